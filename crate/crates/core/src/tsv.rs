//! Small helpers shared by the TSV writers and readers.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Formats a float with 17 significant digits; parsing the result recovers
/// the exact bit pattern.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub(crate) fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// Writes `# key = value` comment lines used as the config echo header.
pub fn write_header<W: Write>(out: &mut W, header: &[(String, String)]) -> std::io::Result<()> {
    for (key, value) in header {
        writeln!(out, "# {key} = {value}")?;
    }
    Ok(())
}

pub(crate) fn parse_f64(cell: &str, line: usize, column: usize) -> Result<f64> {
    let value: f64 = cell.trim().parse().map_err(|_| Error::Parse {
        line,
        column,
        message: format!("'{cell}' is not a number"),
    })?;
    if !value.is_finite() {
        return Err(Error::Parse {
            line,
            column,
            message: format!("non-finite value '{cell}'"),
        });
    }
    Ok(value)
}
