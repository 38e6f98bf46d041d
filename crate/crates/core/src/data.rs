//! Dataset ingestion, validation, within-class standardization and nuisance
//! projection.
//!
//! Everything downstream (correlations, permutations, the logistic baseline)
//! consumes the types defined here. Standard deviations use divisor `n_m`
//! throughout.

use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView1, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tsv::{self, fmt_f64};

/// Smallest class size for which the Fisher-z variance `1/(n_m - 3)` is usable.
pub const MIN_CLASS_SIZE: usize = 4;

/// A within-class standard deviation at or below this fraction of the column's
/// magnitude is treated as zero.
const DEGENERATE_RELATIVE_SD: f64 = 1e-12;

/// Dense samples × features matrix of finite values with unique feature names.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix {
    values: Array2<f64>,
    feature_names: Vec<String>,
}

impl DataMatrix {
    pub fn new(values: Array2<f64>, feature_names: Vec<String>) -> Result<Self> {
        if feature_names.len() != values.ncols() {
            return Err(Error::Shape(format!(
                "{} feature names for {} columns",
                feature_names.len(),
                values.ncols()
            )));
        }
        let mut seen = HashSet::with_capacity(feature_names.len());
        for name in &feature_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::Format(format!("duplicate feature name '{name}'")));
            }
        }
        if let Some(((i, j), v)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Parse {
                line: i + 2,
                column: j + 1,
                message: format!("non-finite value {v}"),
            });
        }
        Ok(Self {
            values,
            feature_names,
        })
    }

    /// Builds a matrix with generated names `f1..fp`.
    pub fn with_default_names(values: Array2<f64>) -> Result<Self> {
        let names = (1..=values.ncols()).map(|j| format!("f{j}")).collect();
        Self::new(values, names)
    }

    pub fn n_samples(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn column(&self, j: usize) -> ArrayView1<'_, f64> {
        self.values.column(j)
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|n| n == name)
    }

    /// Keeps the listed columns, in the order given.
    pub fn select_features(&self, columns: &[usize]) -> DataMatrix {
        DataMatrix {
            values: self.values.select(Axis(1), columns),
            feature_names: columns
                .iter()
                .map(|&j| self.feature_names[j].clone())
                .collect(),
        }
    }

    /// Removes the named columns and returns them as a nuisance matrix.
    pub fn split_nuisance(&self, names: &[String]) -> Result<(DataMatrix, NuisanceMatrix)> {
        let mut nuisance_idx = Vec::with_capacity(names.len());
        for name in names {
            let j = self
                .feature_index(name)
                .ok_or_else(|| Error::UnknownFeature(name.clone()))?;
            nuisance_idx.push(j);
        }
        let keep: Vec<usize> = (0..self.n_features())
            .filter(|j| !nuisance_idx.contains(j))
            .collect();
        let z = self.values.select(Axis(1), &nuisance_idx);
        Ok((self.select_features(&keep), NuisanceMatrix::new(z)?))
    }

    /// Writes the canonical TSV form: header of feature names plus a trailing
    /// `label` column, values with 17 significant digits.
    pub fn write_tsv(&self, labels: &ClassLabels, path: &Path) -> Result<()> {
        let mut out = tsv::create(path)?;
        let io = |e| Error::io(path, e);
        let header = self.feature_names.join("\t");
        writeln!(out, "{header}\tlabel").map_err(io)?;
        for (row, class) in self.values.rows().into_iter().zip(labels.iter()) {
            let cells: Vec<String> = row.iter().map(|&v| fmt_f64(v)).collect();
            writeln!(out, "{}\t{}", cells.join("\t"), class.code()).map_err(io)?;
        }
        out.flush().map_err(io)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Class {
    One,
    Two,
}

impl Class {
    pub fn code(self) -> u8 {
        match self {
            Class::One => 1,
            Class::Two => 2,
        }
    }

    pub fn other(self) -> Class {
        match self {
            Class::One => Class::Two,
            Class::Two => Class::One,
        }
    }

    pub(crate) fn index(self) -> usize {
        self.code() as usize - 1
    }
}

/// Per-sample class assignment with at least [`MIN_CLASS_SIZE`] samples per class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassLabels {
    labels: Vec<Class>,
    n1: usize,
    n2: usize,
}

impl ClassLabels {
    pub fn new(labels: Vec<Class>) -> Result<Self> {
        let n1 = labels.iter().filter(|&&c| c == Class::One).count();
        let n2 = labels.len() - n1;
        if n1 < MIN_CLASS_SIZE || n2 < MIN_CLASS_SIZE {
            return Err(Error::Label(format!(
                "class sizes ({n1}, {n2}); each class needs at least {MIN_CLASS_SIZE} samples"
            )));
        }
        Ok(Self { labels, n1, n2 })
    }

    /// Interprets integer codes. `{1, 2}` is taken as is; `{0, 1}` is remapped
    /// as `0 -> 1`, `1 -> 2`.
    pub fn from_codes(codes: &[i64]) -> Result<Self> {
        let mut distinct: Vec<i64> = codes.to_vec();
        distinct.sort_unstable();
        distinct.dedup();
        let map = match distinct.as_slice() {
            [1, 2] => |c: i64| if c == 1 { Class::One } else { Class::Two },
            [0, 1] => |c: i64| if c == 0 { Class::One } else { Class::Two },
            other => {
                return Err(Error::Label(format!(
                    "expected two labels from {{1,2}} or {{0,1}}, found {other:?}"
                )))
            }
        };
        Self::new(codes.iter().map(|&c| map(c)).collect())
    }

    /// Class 1 takes the first `n1` samples, class 2 the remaining `n2`.
    pub fn blocks(n1: usize, n2: usize) -> Result<Self> {
        let mut labels = vec![Class::One; n1];
        labels.resize(n1 + n2, Class::Two);
        Self::new(labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n1(&self) -> usize {
        self.n1
    }

    pub fn n2(&self) -> usize {
        self.n2
    }

    pub fn size(&self, class: Class) -> usize {
        match class {
            Class::One => self.n1,
            Class::Two => self.n2,
        }
    }

    pub fn get(&self, i: usize) -> Class {
        self.labels[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = Class> + '_ {
        self.labels.iter().copied()
    }

    pub fn as_slice(&self) -> &[Class] {
        &self.labels
    }

    /// Row indices of `class`, ascending.
    pub fn rows(&self, class: Class) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == class)
            .map(|(i, _)| i)
            .collect()
    }

    /// Same samples with classes 1 and 2 exchanged.
    pub fn swapped(&self) -> ClassLabels {
        ClassLabels {
            labels: self.labels.iter().map(|c| c.other()).collect(),
            n1: self.n2,
            n2: self.n1,
        }
    }

    pub(crate) fn check_samples(&self, n: usize) -> Result<()> {
        if self.len() != n {
            return Err(Error::Shape(format!(
                "{} labels for {} samples",
                self.len(),
                n
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Plain,
    NuisanceProjected,
}

/// Data centered and scaled within each class.
#[derive(Debug, Clone)]
pub struct StandardizedMatrix {
    pub values: Array2<f64>,
    /// Row `m` holds the class-`m+1` column means used for centering.
    pub class_means: Array2<f64>,
    /// Row `m` holds the class-`m+1` standard deviations (divisor `n_m`).
    pub class_sds: Array2<f64>,
    pub provenance: Provenance,
    pub feature_names: Vec<String>,
}

impl StandardizedMatrix {
    pub fn n_samples(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.values.ncols()
    }
}

/// Observed confounders `Z` (samples × q). An intercept is added internally.
#[derive(Debug, Clone)]
pub struct NuisanceMatrix {
    values: Array2<f64>,
}

impl NuisanceMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("nuisance matrix has non-finite entries".into()));
        }
        Ok(Self { values })
    }

    pub fn q(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DelimitedFormat {
    Tsv,
    Csv,
}

impl DelimitedFormat {
    fn delimiter(self) -> u8 {
        match self {
            DelimitedFormat::Tsv => b'\t',
            DelimitedFormat::Csv => b',',
        }
    }

    /// Guesses from the file extension, defaulting to TSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => DelimitedFormat::Csv,
            _ => DelimitedFormat::Tsv,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabelSource {
    /// A named column inside the data file.
    Column(String),
    /// A sidecar file with one label per line (optional header line).
    File(PathBuf),
}

/// Parses a dataset and validates labels, without the degeneracy check.
pub fn read_dataset(
    path: &Path,
    format: DelimitedFormat,
    labels: &LabelSource,
) -> Result<(DataMatrix, ClassLabels)> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(format.delimiter())
        .flexible(true)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let label_col = match labels {
        LabelSource::Column(name) => Some(
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Label(format!("label column '{name}' not found")))?,
        ),
        LabelSource::File(_) => None,
    };
    let feature_cols: Vec<usize> = (0..header.len()).filter(|&c| Some(c) != label_col).collect();
    let names: Vec<String> = feature_cols.iter().map(|&c| header[c].clone()).collect();

    let mut flat = Vec::new();
    let mut codes = Vec::new();
    let mut n = 0;
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(n + 2, |p| p.line() as usize);
        if record.len() != header.len() {
            return Err(Error::Shape(format!(
                "line {line} has {} fields, header has {}",
                record.len(),
                header.len()
            )));
        }
        for &c in &feature_cols {
            flat.push(tsv::parse_f64(&record[c], line, c + 1)?);
        }
        if let Some(c) = label_col {
            codes.push(parse_label(&record[c], line)?);
        }
        n += 1;
    }
    if let LabelSource::File(label_path) = labels {
        codes = read_label_file(label_path)?;
    }
    let values = Array2::from_shape_vec((n, names.len()), flat)
        .map_err(|e| Error::Shape(e.to_string()))?;
    let x = DataMatrix::new(values, names)?;
    let y = ClassLabels::from_codes(&codes)?;
    y.check_samples(x.n_samples())?;
    Ok((x, y))
}

/// Parses and validates a dataset, rejecting features that are constant
/// within a class.
pub fn load_dataset(
    path: &Path,
    format: DelimitedFormat,
    labels: &LabelSource,
) -> Result<(DataMatrix, ClassLabels)> {
    let (x, y) = read_dataset(path, format, labels)?;
    let degenerate = degenerate_features(&x, &y);
    if !degenerate.is_empty() {
        return Err(Error::DegenerateFeature(
            degenerate
                .iter()
                .map(|&j| x.feature_names()[j].clone())
                .collect(),
        ));
    }
    Ok((x, y))
}

/// Drops within-class constant features, returning the reduced matrix and the
/// dropped names.
pub fn drop_degenerate(x: &DataMatrix, y: &ClassLabels) -> (DataMatrix, Vec<String>) {
    let degenerate = degenerate_features(x, y);
    let dropped = degenerate
        .iter()
        .map(|&j| x.feature_names()[j].clone())
        .collect();
    let keep: Vec<usize> = (0..x.n_features())
        .filter(|j| !degenerate.contains(j))
        .collect();
    (x.select_features(&keep), dropped)
}

/// Indices of features with zero variance inside either class.
pub fn degenerate_features(x: &DataMatrix, y: &ClassLabels) -> Vec<usize> {
    let groups = [y.rows(Class::One), y.rows(Class::Two)];
    (0..x.n_features())
        .filter(|&j| {
            let col = x.column(j);
            groups.iter().any(|rows| {
                let v: Vec<f64> = rows.iter().map(|&i| col[i]).collect();
                center_scale(&v, max_abs(&v)).is_none()
            })
        })
        .collect()
}

fn parse_label(cell: &str, line: usize) -> Result<i64> {
    let cell = cell.trim();
    cell.parse::<i64>()
        .ok()
        .or_else(|| {
            cell.parse::<f64>()
                .ok()
                .filter(|v| v.fract() == 0.0 && v.abs() < 1e9)
                .map(|v| v as i64)
        })
        .ok_or_else(|| Error::Label(format!("line {line}: unreadable label '{cell}'")))
}

fn read_label_file(path: &Path) -> Result<Vec<i64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut codes = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let cell = raw.trim();
        if cell.is_empty() || cell.starts_with('#') {
            continue;
        }
        match parse_label(cell, k + 1) {
            Ok(code) => codes.push(code),
            // a non-numeric first entry is a header
            Err(_) if codes.is_empty() && k == first_content_line(&text) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(codes)
}

fn first_content_line(text: &str) -> usize {
    text.lines()
        .position(|l| !l.trim().is_empty() && !l.trim().starts_with('#'))
        .unwrap_or(0)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.kind() {
        csv::ErrorKind::Io(_) => match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        },
        _ => Error::Format(format!("{}: {e}", path.display())),
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Centers and scales `v` (divisor `n`). Returns `None` when the standard
/// deviation is zero relative to `scale`.
fn center_scale(v: &[f64], scale: f64) -> Option<(Vec<f64>, f64, f64)> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    if !(sd > DEGENERATE_RELATIVE_SD * scale) || sd == 0.0 {
        return None;
    }
    Some((v.iter().map(|x| (x - mean) / sd).collect(), mean, sd))
}

struct ColumnResult {
    values: [Vec<f64>; 2],
    means: [f64; 2],
    sds: [f64; 2],
}

/// Standardizes every column within both classes. `transform` maps a class's
/// raw column to the vector to be centered/scaled (identity for plain
/// standardization, a residual for nuisance projection).
fn standardize_columns<F>(
    x: &DataMatrix,
    y: &ClassLabels,
    provenance: Provenance,
    transform: F,
) -> Result<StandardizedMatrix>
where
    F: Fn(Class, Vec<f64>) -> Vec<f64> + Sync,
{
    y.check_samples(x.n_samples())?;
    let groups = [y.rows(Class::One), y.rows(Class::Two)];
    let p = x.n_features();
    let results: Vec<Option<ColumnResult>> = (0..p)
        .into_par_iter()
        .map(|j| {
            let col = x.column(j);
            let mut out = ColumnResult {
                values: [Vec::new(), Vec::new()],
                means: [0.0; 2],
                sds: [0.0; 2],
            };
            for (m, rows) in groups.iter().enumerate() {
                let raw: Vec<f64> = rows.iter().map(|&i| col[i]).collect();
                let scale = max_abs(&raw);
                let class = if m == 0 { Class::One } else { Class::Two };
                let v = transform(class, raw);
                let (z, mean, sd) = center_scale(&v, scale)?;
                out.values[m] = z;
                out.means[m] = mean;
                out.sds[m] = sd;
            }
            Some(out)
        })
        .collect();

    let degenerate: Vec<String> = results
        .iter()
        .enumerate()
        .filter(|(_, r)| r.is_none())
        .map(|(j, _)| x.feature_names()[j].clone())
        .collect();
    if !degenerate.is_empty() {
        return Err(Error::DegenerateFeature(degenerate));
    }

    let mut values = Array2::zeros((x.n_samples(), p));
    let mut class_means = Array2::zeros((2, p));
    let mut class_sds = Array2::zeros((2, p));
    for (j, r) in results.into_iter().enumerate() {
        let r = r.expect("degenerate columns handled above");
        for m in 0..2 {
            for (&i, &v) in groups[m].iter().zip(&r.values[m]) {
                values[[i, j]] = v;
            }
            class_means[[m, j]] = r.means[m];
            class_sds[[m, j]] = r.sds[m];
        }
    }
    Ok(StandardizedMatrix {
        values,
        class_means,
        class_sds,
        provenance,
        feature_names: x.feature_names().to_vec(),
    })
}

/// Mean-centers and scales every feature within each class.
pub fn standardize_within_class(x: &DataMatrix, y: &ClassLabels) -> Result<StandardizedMatrix> {
    standardize_columns(x, y, Provenance::Plain, |_, v| v)
}

/// Orthonormal basis (columns, each of length `n_m`) for `[1, Z_m]`.
fn nuisance_basis(z: &NuisanceMatrix, rows: &[usize], class: Class) -> Result<Vec<Vec<f64>>> {
    let n = rows.len();
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(z.q() + 1);
    let columns = std::iter::once(vec![1.0; n]).chain(
        (0..z.q()).map(|c| rows.iter().map(|&i| z.values[[i, c]]).collect::<Vec<f64>>()),
    );
    for mut v in columns {
        let original = norm(&v);
        // two Gram-Schmidt passes keep the basis orthogonal to working precision
        for _ in 0..2 {
            for q in &basis {
                let d = dot(q, &v);
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
            }
        }
        let remaining = norm(&v);
        if !(remaining > 1e-10 * original) {
            return Err(Error::RankDeficientNuisance {
                class: class.code(),
            });
        }
        v.iter_mut().for_each(|a| *a /= remaining);
        basis.push(v);
    }
    Ok(basis)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Regresses `[1, Z]` out of every feature separately within each class, then
/// centers and scales the residuals. Runs once, before any permutation.
pub fn project_out_nuisance(
    x: &DataMatrix,
    y: &ClassLabels,
    z: &NuisanceMatrix,
) -> Result<StandardizedMatrix> {
    y.check_samples(x.n_samples())?;
    if z.values.nrows() != x.n_samples() {
        return Err(Error::Shape(format!(
            "nuisance matrix has {} rows, data has {}",
            z.values.nrows(),
            x.n_samples()
        )));
    }
    let min_class = y.n1().min(y.n2());
    if z.q() + 2 >= min_class {
        return Err(Error::InsufficientDf(format!(
            "q = {} nuisance variables need q < min(n1, n2) - 2 = {}",
            z.q(),
            min_class as i64 - 2
        )));
    }
    let bases = [
        nuisance_basis(z, &y.rows(Class::One), Class::One)?,
        nuisance_basis(z, &y.rows(Class::Two), Class::Two)?,
    ];
    standardize_columns(x, y, Provenance::NuisanceProjected, |class, mut v| {
        for q in &bases[class.index()] {
            let d = dot(q, &v);
            v.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
        }
        v
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_matrix(n: usize, p: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((n, p), || rng.sample(StandardNormal))
    }

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let path = dir.join(name);
        std::fs::write(&path, body).unwrap();
        path
    }

    #[test]
    fn class_size_below_four_is_rejected() {
        let err = ClassLabels::from_codes(&[1, 1, 1, 2, 2, 2, 2, 2]).unwrap_err();
        assert!(matches!(err, Error::Label(_)));
        assert!(ClassLabels::from_codes(&[1, 1, 1, 1, 2, 2, 2, 2]).is_ok());
    }

    #[test]
    fn zero_one_labels_are_remapped() {
        let y = ClassLabels::from_codes(&[0, 0, 0, 0, 1, 1, 1, 1, 1]).unwrap();
        assert_eq!(y.n1(), 4);
        assert_eq!(y.n2(), 5);
        assert_eq!(y.get(0), Class::One);
        assert!(ClassLabels::from_codes(&[1, 1, 1, 1, 3, 3, 3, 3]).is_err());
        assert!(ClassLabels::from_codes(&[1, 1, 1, 1, 2, 2, 2, 3]).is_err());
    }

    #[test]
    fn parses_tsv_with_label_column() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = String::from("a\tb\tlabel\n");
        for i in 0..8 {
            body += &format!("{}\t{}\t{}\n", i, (i * i) as f64 * 0.5, if i < 4 { 1 } else { 2 });
        }
        let path = write(dir.path(), "x.tsv", &body);
        let (x, y) =
            load_dataset(&path, DelimitedFormat::Tsv, &LabelSource::Column("label".into()))
                .unwrap();
        assert_eq!((x.n_samples(), x.n_features()), (8, 2));
        assert_eq!(x.feature_names(), &["a".to_string(), "b".to_string()]);
        assert_eq!(x.values()[[3, 1]], 4.5);
        assert_eq!((y.n1(), y.n2()), (4, 4));
    }

    #[test]
    fn six_sample_file_parses_with_sidecar_labels() {
        // Parsing accepts the matrix; the labels then fail the class-size floor.
        let dir = tempfile::tempdir().unwrap();
        let data = write(
            dir.path(),
            "x.tsv",
            "g1\tg2\n1\t2\n2\t1\n3\t5\n4\t4\n5\t7\n6\t1\n",
        );
        let labels = write(dir.path(), "y.txt", "class\n1\n1\n1\n2\n2\n2\n");
        let err = read_dataset(&data, DelimitedFormat::Tsv, &LabelSource::File(labels))
            .unwrap_err();
        assert!(matches!(err, Error::Label(_)), "{err}");
    }

    #[test]
    fn malformed_inputs_map_to_named_errors() {
        let dir = tempfile::tempdir().unwrap();
        let labels = write(dir.path(), "y.txt", "1\n1\n1\n1\n2\n2\n2\n2\n");
        let src = LabelSource::File(labels);
        let rows = |f: &dyn Fn(usize) -> String| -> String {
            let mut s = String::from("a,b\n");
            for i in 0..8 {
                s += &f(i);
            }
            s
        };
        let bad_cell = write(
            dir.path(),
            "bad.csv",
            &rows(&|i| if i == 5 { "1,zz\n".into() } else { format!("{i},{}\n", i % 3) }),
        );
        assert!(matches!(
            load_dataset(&bad_cell, DelimitedFormat::Csv, &src),
            Err(Error::Parse { line: 7, column: 2, .. })
        ));
        let nan = write(
            dir.path(),
            "nan.csv",
            &rows(&|i| if i == 2 { "1,NaN\n".into() } else { format!("{i},{}\n", i % 3) }),
        );
        assert!(matches!(
            load_dataset(&nan, DelimitedFormat::Csv, &src),
            Err(Error::Parse { .. })
        ));
        let ragged = write(
            dir.path(),
            "ragged.csv",
            &rows(&|i| if i == 3 { "1\n".into() } else { format!("{i},{}\n", i % 3) }),
        );
        assert!(matches!(
            load_dataset(&ragged, DelimitedFormat::Csv, &src),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn constant_within_class_column_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = String::from("a\tflat\tlabel\n");
        for i in 0..8 {
            let flat = if i < 4 { 3.0 } else { i as f64 };
            body += &format!("{}\t{}\t{}\n", (i * 7) % 5, flat, if i < 4 { 1 } else { 2 });
        }
        let path = write(dir.path(), "x.tsv", &body);
        let src = LabelSource::Column("label".into());
        match load_dataset(&path, DelimitedFormat::Tsv, &src) {
            Err(Error::DegenerateFeature(names)) => assert_eq!(names, vec!["flat".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
        let (x, y) = read_dataset(&path, DelimitedFormat::Tsv, &src).unwrap();
        let (kept, dropped) = drop_degenerate(&x, &y);
        assert_eq!(dropped, vec!["flat".to_string()]);
        assert_eq!(kept.feature_names(), &["a".to_string()]);
    }

    #[test]
    fn canonical_writer_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let x = DataMatrix::with_default_names(random_matrix(10, 4, 3) * 1e3).unwrap();
        let y = ClassLabels::blocks(5, 5).unwrap();
        let path = dir.path().join("round.tsv");
        x.write_tsv(&y, &path).unwrap();
        let (x2, y2) =
            load_dataset(&path, DelimitedFormat::Tsv, &LabelSource::Column("label".into()))
                .unwrap();
        assert_eq!(y, y2);
        assert_eq!(x.feature_names(), x2.feature_names());
        for (a, b) in x.values().iter().zip(x2.values().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn standardize_hand_example() {
        // class 1 column (1,2,3), class 2 column (10,20,30); padded to 4 per class
        let x = DataMatrix::with_default_names(array![
            [1.0],
            [2.0],
            [3.0],
            [2.0],
            [10.0],
            [20.0],
            [30.0],
            [20.0]
        ])
        .unwrap();
        let y = ClassLabels::blocks(4, 4).unwrap();
        let s = standardize_within_class(&x, &y).unwrap();
        // mean 2, sd sqrt(2/4) for (1,2,3,2)
        let sd = (0.5_f64).sqrt();
        assert!((s.class_sds[[0, 0]] - sd).abs() < 1e-15);
        assert!((s.values[[0, 0]] + 1.0 / sd).abs() < 1e-12);
        assert!((s.values[[4, 0]] - s.values[[0, 0]]).abs() < 1e-12);
    }

    #[test]
    fn standardize_three_point_oracle() {
        // mean 2, divisor-n sd sqrt(2/3) = 0.81650 for (1,2,3)
        let v = [1.0, 2.0, 3.0];
        let (z, mean, sd) = center_scale(&v, 3.0).unwrap();
        assert_eq!(mean, 2.0);
        assert!((sd - 0.816496580927726).abs() < 1e-12);
        assert!((z[0] + 1.224744871391589).abs() < 1e-12);
        assert_eq!(z[1], 0.0);
        assert!((z[2] - 1.224744871391589).abs() < 1e-12);
    }

    #[test]
    fn standardized_columns_have_zero_mean_unit_sd_per_class() {
        let x = DataMatrix::with_default_names(random_matrix(23, 6, 1) * 4.0 + 7.0).unwrap();
        let y = ClassLabels::blocks(11, 12).unwrap();
        let s = standardize_within_class(&x, &y).unwrap();
        for rows in [y.rows(Class::One), y.rows(Class::Two)] {
            for j in 0..6 {
                let v: Vec<f64> = rows.iter().map(|&i| s.values[[i, j]]).collect();
                let n = v.len() as f64;
                let mean = v.iter().sum::<f64>() / n;
                let sd = (v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n).sqrt();
                assert!(mean.abs() <= 1e-10);
                assert!((sd - 1.0).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn intercept_only_projection_equals_standardization() {
        let x = DataMatrix::with_default_names(random_matrix(30, 5, 2)).unwrap();
        let y = ClassLabels::blocks(14, 16).unwrap();
        let z = NuisanceMatrix::new(Array2::zeros((30, 0))).unwrap();
        let a = project_out_nuisance(&x, &y, &z).unwrap();
        let b = standardize_within_class(&x, &y).unwrap();
        assert_eq!(a.provenance, Provenance::NuisanceProjected);
        for (u, v) in a.values.iter().zip(b.values.iter()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn feature_equal_to_confounder_is_degenerate() {
        let raw = random_matrix(30, 3, 4);
        let x = DataMatrix::with_default_names(raw.clone()).unwrap();
        let y = ClassLabels::blocks(15, 15).unwrap();
        let z = NuisanceMatrix::new(raw.select(Axis(1), &[1]) * 3.0).unwrap();
        match project_out_nuisance(&x, &y, &z) {
            Err(Error::DegenerateFeature(names)) => assert_eq!(names, vec!["f2".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn nuisance_validation_errors() {
        let x = DataMatrix::with_default_names(random_matrix(12, 3, 5)).unwrap();
        let y = ClassLabels::blocks(6, 6).unwrap();
        let too_many = NuisanceMatrix::new(random_matrix(12, 4, 6)).unwrap();
        assert!(matches!(
            project_out_nuisance(&x, &y, &too_many),
            Err(Error::InsufficientDf(_))
        ));
        let mut dup = random_matrix(12, 2, 7);
        let first = dup.column(0).to_owned();
        dup.column_mut(1).assign(&(&first * 2.0));
        let dup = NuisanceMatrix::new(dup).unwrap();
        assert!(matches!(
            project_out_nuisance(&x, &y, &dup),
            Err(Error::RankDeficientNuisance { class: 1 })
        ));
    }

    #[test]
    fn residuals_are_orthogonal_to_confounders() {
        let x = DataMatrix::with_default_names(random_matrix(40, 6, 8)).unwrap();
        let y = ClassLabels::blocks(20, 20).unwrap();
        let z = NuisanceMatrix::new(random_matrix(40, 3, 9)).unwrap();
        let s = project_out_nuisance(&x, &y, &z).unwrap();
        for rows in [y.rows(Class::One), y.rows(Class::Two)] {
            for j in 0..6 {
                let r: Vec<f64> = rows.iter().map(|&i| s.values[[i, j]]).collect();
                for c in 0..3 {
                    let zc: Vec<f64> = rows.iter().map(|&i| z.values()[[i, c]]).collect();
                    assert!(dot(&r, &zc).abs() <= 1e-8 * norm(&r) * norm(&zc));
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn standardization_is_idempotent(seed in any::<u64>()) {
            let x = DataMatrix::with_default_names(random_matrix(16, 4, seed)).unwrap();
            let y = ClassLabels::blocks(8, 8).unwrap();
            let once = standardize_within_class(&x, &y).unwrap();
            let again = DataMatrix::with_default_names(once.values.clone()).unwrap();
            let twice = standardize_within_class(&again, &y).unwrap();
            for (a, b) in once.values.iter().zip(twice.values.iter()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn positive_affine_maps_leave_output_unchanged(
            seed in any::<u64>(),
            scale in 0.01f64..100.0,
            shift in -50.0f64..50.0,
        ) {
            let raw = random_matrix(16, 3, seed);
            let y = ClassLabels::blocks(8, 8).unwrap();
            let mut moved = raw.clone();
            for i in 0..8 {
                moved[[i, 1]] = scale * moved[[i, 1]] + shift;
            }
            let a = standardize_within_class(&DataMatrix::with_default_names(raw).unwrap(), &y).unwrap();
            let b = standardize_within_class(&DataMatrix::with_default_names(moved).unwrap(), &y).unwrap();
            for (u, v) in a.values.iter().zip(b.values.iter()) {
                prop_assert!((u - v).abs() <= 1e-12);
            }
        }
    }
}
