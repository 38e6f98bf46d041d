//! Pipelines behind the `tmicor` command line.
//!
//! Every run writes a `manifest.json` holding the resolved configuration
//! (seed included), the library version and run counters. Feeding the
//! manifest back through [`rerun`] reproduces the outputs byte for byte.
//! Thread count and output directory are deliberately not recorded: they
//! never change an output byte.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use tmicor::data::{
    drop_degenerate, load_dataset, project_out_nuisance, read_dataset, standardize_within_class,
    DataMatrix, DelimitedFormat, LabelSource,
};
use tmicor::fdr::{
    estimate_fdr, generate_null_pool, theoretical_fdr, FdrCurve, NullMode, PermutationPlan,
};
use tmicor::graph::{build_graph, emit, read_fdr_report, top_edges_per_component, GraphFormat, SignFilter};
use tmicor::logistic::{fit_all_pairs, write_baseline_tsv};
use tmicor::simulate::{consistency_probe, run_experiment, SimulationConfig};
use tmicor::stats::{class_correlations, pair_statistics, PairSet};
use tmicor::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NullMethod {
    #[default]
    Permutation,
    Theoretical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputFormat {
    /// Decide from the file extension.
    #[default]
    Auto,
    Tsv,
    Csv,
}

impl InputFormat {
    fn resolve(self, path: &Path) -> DelimitedFormat {
        match self {
            InputFormat::Auto => DelimitedFormat::from_path(path),
            InputFormat::Tsv => DelimitedFormat::Tsv,
            InputFormat::Csv => DelimitedFormat::Csv,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Labels {
    File(PathBuf),
    Column(String),
}

impl Labels {
    fn source(&self) -> LabelSource {
        match self {
            Labels::File(p) => LabelSource::File(p.clone()),
            Labels::Column(c) => LabelSource::Column(c.clone()),
        }
    }
}

/// Inputs shared by `test` and `baseline`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub data: PathBuf,
    pub labels: Labels,
    pub format: InputFormat,
    pub cross_set: Option<PathBuf>,
    pub nuisance_columns: Vec<String>,
    pub drop_degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestConfig {
    pub input: DataConfig,
    pub permutations: usize,
    pub seed: u64,
    pub null: NullMethod,
    pub mode: NullMode,
    pub cutoff: f64,
    pub sign: SignFilter,
    /// Ranks reported in the FDR table; all pairs when absent.
    pub max_rank: Option<usize>,
    pub monotone: bool,
    pub dump_null: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub input: DataConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub p: Vec<usize>,
    pub n: Vec<usize>,
    pub replicates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateConfig {
    pub simulation: SimulationConfig,
    pub probe: Option<ProbeConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum RunConfig {
    Test(TestConfig),
    Baseline(BaselineConfig),
    Simulate(SimulateConfig),
}

impl RunConfig {
    /// Flattened `(key, value)` pairs for the comment header of outputs.
    pub fn header(&self) -> Vec<(String, String)> {
        let mut out = vec![("tmicor_version".to_string(), VERSION.to_string())];
        let value = serde_json::to_value(self).expect("config serializes");
        flatten("", &value, &mut out);
        out
    }
}

fn flatten(prefix: &str, value: &serde_json::Value, out: &mut Vec<(String, String)>) {
    match value {
        serde_json::Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        serde_json::Value::String(s) => out.push((prefix.to_string(), s.clone())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

/// Counters worth knowing when judging a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunCounters {
    pub samples: usize,
    pub features: usize,
    pub pairs: usize,
    pub dropped_features: Vec<String>,
    /// Observed correlations clamped before the Fisher transform.
    pub saturated_observed: usize,
    /// Permuted correlations clamped before the Fisher transform.
    pub saturated_null: usize,
    /// Degenerate relabelings that were redrawn.
    pub redraws: usize,
    /// Number of ranks with estimated FDR at or below the cutoff (prefix rule).
    pub significant: usize,
    pub not_converged: usize,
    pub separated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tmicor_version: String,
    pub config: RunConfig,
    pub counters: RunCounters,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("manifest: {e}")))
    }

    fn write(&self, out_dir: &Path) -> Result<()> {
        let path = out_dir.join("manifest.json");
        let mut w = create(&path)?;
        serde_json::to_writer_pretty(&mut w, self)
            .map_err(|e| Error::Format(format!("manifest: {e}")))?;
        writeln!(w).map_err(|e| io_error(&path, e))?;
        w.flush().map_err(|e| io_error(&path, e))
    }
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| io_error(path, e))
}

/// Reads a two-column file mapping feature names to set tags `A` or `B`.
/// Blank lines and `#` comments are skipped; features not listed are
/// excluded from testing.
pub fn cross_set_parse<R: BufRead>(input: R, names: &[String]) -> Result<PairSet> {
    let mut set_a: Vec<usize> = Vec::new();
    let mut set_b: Vec<usize> = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| io_error(Path::new("<cross-set>"), e))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(['\t', ',']).map(str::trim).collect();
        if fields.len() != 2 {
            return Err(Error::Parse {
                line: i + 1,
                column: fields.len(),
                message: "expected 'feature<TAB>A|B'".into(),
            });
        }
        let (name, tag) = (fields[0], fields[1]);
        let j = names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownFeature(name.to_string()))?;
        let (own, other) = match tag {
            "A" | "a" => (&mut set_a, &set_b),
            "B" | "b" => (&mut set_b, &set_a),
            _ => {
                return Err(Error::Parse {
                    line: i + 1,
                    column: 2,
                    message: format!("set tag '{tag}' is not A or B"),
                })
            }
        };
        if other.contains(&j) {
            return Err(Error::OverlappingSets(name.to_string()));
        }
        if !own.contains(&j) {
            own.push(j);
        }
    }
    set_a.sort_unstable();
    set_b.sort_unstable();
    PairSet::cross(set_a, set_b)
}

struct Prepared {
    x: DataMatrix,
    y: tmicor::data::ClassLabels,
    z: Option<tmicor::data::NuisanceMatrix>,
    pairs: PairSet,
    dropped: Vec<String>,
}

fn prepare(input: &DataConfig) -> Result<Prepared> {
    let format = input.format.resolve(&input.data);
    let (x, y) = if input.drop_degenerate || !input.nuisance_columns.is_empty() {
        read_dataset(&input.data, format, &input.labels.source())?
    } else {
        load_dataset(&input.data, format, &input.labels.source())?
    };
    let (x, z) = if input.nuisance_columns.is_empty() {
        (x, None)
    } else {
        let (x, z) = x.split_nuisance(&input.nuisance_columns)?;
        (x, Some(z))
    };
    let (x, dropped) = if input.drop_degenerate {
        drop_degenerate(&x, &y)
    } else {
        (x, Vec::new())
    };
    if !dropped.is_empty() {
        log::warn!("dropped {} degenerate feature(s): {}", dropped.len(), dropped.join(", "));
    }
    let pairs = match &input.cross_set {
        Some(path) => {
            let f = File::open(path).map_err(|e| io_error(path, e))?;
            cross_set_parse(BufReader::new(f), x.feature_names())?
        }
        None => PairSet::all(x.n_features()),
    };
    if pairs.is_empty() {
        return Err(Error::Config("no feature pairs to test".into()));
    }
    info!(
        "loaded {} samples ({} / {}), {} features, {} pairs",
        x.n_samples(),
        y.n1(),
        y.n2(),
        x.n_features(),
        pairs.len()
    );
    Ok(Prepared {
        x,
        y,
        z,
        pairs,
        dropped,
    })
}

fn run_test(cfg: &TestConfig, header: &[(String, String)], out: &Path) -> Result<(RunCounters, Vec<String>)> {
    if cfg.permutations == 0 && cfg.null == NullMethod::Permutation {
        return Err(Error::Config("--permutations must be at least 1".into()));
    }
    if !(cfg.cutoff > 0.0 && cfg.cutoff <= 1.0) {
        return Err(Error::Config(format!("--cutoff {} outside (0, 1]", cfg.cutoff)));
    }
    let prep = prepare(&cfg.input)?;
    let names = prep.x.feature_names().to_vec();
    let xstd = match &prep.z {
        Some(z) => project_out_nuisance(&prep.x, &prep.y, z)?,
        None => standardize_within_class(&prep.x, &prep.y)?,
    };
    let stats = pair_statistics(&class_correlations(&xstd, &prep.y)?, &prep.pairs)?;
    info!("computed {} statistics", stats.len());
    let max_rank = cfg.max_rank.unwrap_or(stats.len()).min(stats.len());
    let mut outputs = vec!["statistics.tsv".to_string(), "fdr.tsv".to_string()];
    let mut counters = RunCounters {
        samples: prep.x.n_samples(),
        features: prep.x.n_features(),
        pairs: stats.len(),
        dropped_features: prep.dropped.clone(),
        saturated_observed: stats.saturated,
        ..Default::default()
    };
    let curve: FdrCurve = match cfg.null {
        NullMethod::Permutation => {
            let plan = PermutationPlan::new(cfg.permutations, cfg.seed).with_mode(cfg.mode);
            let pool = generate_null_pool(&xstd, &prep.y, &prep.pairs, &plan)?;
            info!("null pool of {} statistics", pool.len());
            counters.saturated_null = pool.saturated;
            counters.redraws = pool.redraws;
            if cfg.dump_null {
                let path = out.join("null_pool.bin");
                let mut w = create(&path)?;
                pool.write_binary(&mut w)
                    .and_then(|_| w.flush())
                    .map_err(|e| io_error(&path, e))?;
                outputs.push("null_pool.bin".into());
            }
            estimate_fdr(&stats, &pool, max_rank, cfg.monotone)?
        }
        NullMethod::Theoretical => {
            theoretical_fdr(&stats, prep.y.n1(), prep.y.n2(), max_rank, cfg.monotone)?
        }
    };
    let significant_edges = {
        let edges = tmicor::graph::ranked_edges(&stats, &curve, &names);
        build_graph(&edges, cfg.cutoff, cfg.sign)?.edges.len()
    };
    counters.significant = curve.rank_at_cutoff(cfg.cutoff);
    info!(
        "{} pair(s) at FDR <= {} ({} after the {:?} sign filter)",
        counters.significant, cfg.cutoff, significant_edges, cfg.sign
    );
    stats.write_tsv(&names, header, &out.join("statistics.tsv"))?;
    curve.write_tsv(&stats, &names, header, &out.join("fdr.tsv"))?;
    Ok((counters, outputs))
}

fn run_baseline(cfg: &BaselineConfig, header: &[(String, String)], out: &Path) -> Result<(RunCounters, Vec<String>)> {
    if !cfg.input.nuisance_columns.is_empty() {
        return Err(Error::Config("the baseline does not take nuisance columns".into()));
    }
    let prep = prepare(&cfg.input)?;
    let fits = fit_all_pairs(&prep.x, &prep.y, &prep.pairs)?;
    let counters = RunCounters {
        samples: prep.x.n_samples(),
        features: prep.x.n_features(),
        pairs: fits.len(),
        dropped_features: prep.dropped.clone(),
        not_converged: fits.iter().filter(|f| !f.fit.converged && !f.fit.separated).count(),
        separated: fits.iter().filter(|f| f.fit.separated).count(),
        ..Default::default()
    };
    if counters.separated + counters.not_converged > 0 {
        log::warn!(
            "{} separated and {} non-converged fit(s)",
            counters.separated,
            counters.not_converged
        );
    }
    write_baseline_tsv(&fits, prep.x.feature_names(), header, &out.join("baseline.tsv"))?;
    Ok((counters, vec!["baseline.tsv".into()]))
}

fn run_simulate(cfg: &SimulateConfig, header: &[(String, String)], out: &Path) -> Result<(RunCounters, Vec<String>)> {
    let result = run_experiment(&cfg.simulation)?;
    info!("ran {} trial(s)", cfg.simulation.trials);
    result.write_tsv(&out.join("simulation.tsv"))?;
    result.write_plot_csv(&out.join("simulation.csv"))?;
    let mut outputs = vec!["simulation.tsv".to_string(), "simulation.csv".to_string()];
    if let Some(probe) = &cfg.probe {
        let rows = consistency_probe(&probe.p, &probe.n, &cfg.simulation, probe.replicates)?;
        let path = out.join("probe.tsv");
        let mut w = create(&path)?;
        let io = |e| io_error(&path, e);
        tmicor::tsv::write_header(&mut w, header).map_err(io)?;
        writeln!(w, "n\tp\treplicate\tmax_null_t\tmin_alt_t\tmax_perm_t\trate").map_err(io)?;
        for r in rows {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.n,
                r.p,
                r.replicate,
                tmicor::tsv::fmt_f64(r.max_null_t),
                tmicor::tsv::fmt_f64(r.min_alt_t),
                tmicor::tsv::fmt_f64(r.max_perm_t),
                tmicor::tsv::fmt_f64(r.rate)
            )
            .map_err(io)?;
        }
        w.flush().map_err(io)?;
        outputs.push("probe.tsv".into());
    }
    Ok((
        RunCounters {
            features: cfg.simulation.n_features(),
            pairs: cfg.simulation.n_features() * (cfg.simulation.n_features() - 1) / 2,
            ..Default::default()
        },
        outputs,
    ))
}

/// Runs a configuration, writing outputs and `manifest.json` into `out`.
pub fn execute(config: &RunConfig, out: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
    let header = config.header();
    let (counters, mut outputs) = match config {
        RunConfig::Test(c) => run_test(c, &header, out)?,
        RunConfig::Baseline(c) => run_baseline(c, &header, out)?,
        RunConfig::Simulate(c) => run_simulate(c, &header, out)?,
    };
    outputs.push("manifest.json".into());
    let manifest = Manifest {
        tmicor_version: VERSION.to_string(),
        config: config.clone(),
        counters,
        outputs,
    };
    manifest.write(out)?;
    Ok(manifest)
}

/// Re-executes the run recorded in a manifest.
pub fn rerun(manifest: &Path, out: &Path) -> Result<Manifest> {
    let m = Manifest::read(manifest)?;
    if m.tmicor_version != VERSION {
        log::warn!(
            "manifest written by version {}, running {}",
            m.tmicor_version,
            VERSION
        );
    }
    execute(&m.config, out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphRequest {
    pub fdr_report: PathBuf,
    pub cutoff: f64,
    pub sign: SignFilter,
    pub top: Option<usize>,
    pub format: GraphFormat,
}

/// Builds the interaction graph from an FDR report and writes it to `out`.
pub fn run_graph<W: Write>(req: &GraphRequest, out: &mut W) -> Result<tmicor::graph::InteractionGraph> {
    let f = File::open(&req.fdr_report).map_err(|e| io_error(&req.fdr_report, e))?;
    let edges = read_fdr_report(BufReader::new(f))?;
    let mut g = build_graph(&edges, req.cutoff, req.sign)?;
    if let Some(m) = req.top {
        g = top_edges_per_component(&g, m)?;
    }
    info!(
        "graph with {} node(s), {} edge(s), {} component(s)",
        g.nodes.len(),
        g.edges.len(),
        g.components.len()
    );
    emit(&g, req.format, out).map_err(|e| io_error(Path::new("<graph output>"), e))?;
    Ok(g)
}

/// Loads a simulation config file.
pub fn read_simulation_config(path: &Path) -> Result<SimulationConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    SimulationConfig::from_text(&text)
}
