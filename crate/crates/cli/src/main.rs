use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use tmicor::fdr::NullMode;
use tmicor::graph::{GraphFormat, SignFilter};
use tmicor_cli::{
    execute, read_simulation_config, rerun, run_graph, BaselineConfig, DataConfig, GraphRequest,
    InputFormat, Labels, NullMethod, ProbeConfig, RunConfig, SimulateConfig, TestConfig,
};

/// Tests for marginal interactions between features across two classes.
#[derive(Parser)]
#[command(name = "tmicor", version)]
struct Cli {
    /// Worker threads (0 = all cores). Never changes any output.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    /// Log level for stage messages on stderr.
    #[arg(long, global = true, default_value = "info")]
    log_level: log::LevelFilter,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rank pairs by the correlation-difference statistic and estimate FDR.
    Test(TestArgs),
    /// Pairwise logistic regression with a Wald test and BH adjustment.
    Baseline(BaselineArgs),
    /// Run a simulation study from a key = value config file.
    Simulate(SimulateArgs),
    /// Build an interaction graph from an FDR report.
    Graph(GraphArgs),
    /// Repeat the run recorded in a manifest.
    Rerun(RerunArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Auto,
    Tsv,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum NullArg {
    Permutation,
    Theoretical,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Restandardize,
    Raw,
}

#[derive(Clone, Copy, ValueEnum)]
enum SignArg {
    Positive,
    Negative,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum GraphFormatArg {
    EdgeTsv,
    Dot,
    Json,
}

#[derive(Args)]
struct DataArgs {
    /// Samples in rows, features in columns, with a header of feature names.
    #[arg(long)]
    data: PathBuf,
    /// Label file, one class code (1/2 or 0/1) per sample.
    #[arg(long, conflicts_with = "label_column", required_unless_present = "label_column")]
    labels: Option<PathBuf>,
    /// Name of the label column inside the data file.
    #[arg(long)]
    label_column: Option<String>,
    #[arg(long, value_enum, default_value = "auto")]
    format: FormatArg,
    /// Two-column file tagging features as set A or B; only A x B pairs are tested.
    #[arg(long)]
    cross_set: Option<PathBuf>,
    /// Comma-separated columns to project out within each class.
    #[arg(long, value_delimiter = ',')]
    nuisance_columns: Vec<String>,
    /// Drop features with zero within-class variance instead of failing.
    #[arg(long)]
    drop_degenerate: bool,
    /// Output directory.
    #[arg(long, default_value = "tmicor-out")]
    out: PathBuf,
}

#[derive(Args)]
struct TestArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 100)]
    permutations: usize,
    /// Random seed; drawn and printed when absent.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "permutation")]
    null: NullArg,
    #[arg(long, value_enum, default_value = "restandardize")]
    mode: ModeArg,
    #[arg(long, default_value_t = 0.1)]
    cutoff: f64,
    /// Sign filter for the significance count (t > 0: class-1 correlation larger).
    #[arg(long, value_enum, default_value = "both")]
    sign: SignArg,
    /// Ranks to report (default: all pairs).
    #[arg(long)]
    max_rank: Option<usize>,
    /// Report the running maximum of the FDR estimate over ranks.
    #[arg(long)]
    monotone: bool,
    /// Also write the permutation null pool to null_pool.bin.
    #[arg(long)]
    dump_null: bool,
}

#[derive(Args)]
struct BaselineArgs {
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Also run the consistency probe over these feature counts.
    #[arg(long, value_delimiter = ',', requires = "probe_n")]
    probe_p: Vec<usize>,
    /// Per-class sample sizes for the probe, increasing.
    #[arg(long, value_delimiter = ',', requires = "probe_p")]
    probe_n: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    probe_replicates: usize,
    #[arg(long, default_value = "tmicor-out")]
    out: PathBuf,
}

#[derive(Args)]
struct GraphArgs {
    /// FDR report written by `tmicor test`.
    #[arg(long)]
    fdr: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    cutoff: f64,
    #[arg(long, value_enum, default_value = "both")]
    sign: SignArg,
    /// Keep only the best-ranked edges of each component.
    #[arg(long)]
    top: Option<usize>,
    #[arg(long, value_enum, default_value = "edge-tsv")]
    format: GraphFormatArg,
    /// Output file (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RerunArgs {
    manifest: PathBuf,
    #[arg(long, default_value = "tmicor-out")]
    out: PathBuf,
}

fn sign(s: SignArg) -> SignFilter {
    match s {
        SignArg::Positive => SignFilter::Positive,
        SignArg::Negative => SignFilter::Negative,
        SignArg::Both => SignFilter::Both,
    }
}

/// Fails with a usage error naming `flag` when `path` does not exist;
/// otherwise returns it made absolute so manifests work from any directory.
fn existing(flag: &str, path: &Path) -> Result<PathBuf, String> {
    std::fs::canonicalize(path).map_err(|e| format!("{flag} {}: {e}", path.display()))
}

fn data_config(a: &DataArgs) -> Result<DataConfig, String> {
    let labels = match (&a.labels, &a.label_column) {
        (Some(p), _) => Labels::File(existing("--labels", p)?),
        (None, Some(c)) => Labels::Column(c.clone()),
        (None, None) => return Err("one of --labels or --label-column is required".into()),
    };
    Ok(DataConfig {
        data: existing("--data", &a.data)?,
        labels,
        format: match a.format {
            FormatArg::Auto => InputFormat::Auto,
            FormatArg::Tsv => InputFormat::Tsv,
            FormatArg::Csv => InputFormat::Csv,
        },
        cross_set: a
            .cross_set
            .as_deref()
            .map(|p| existing("--cross-set", p))
            .transpose()?,
        nuisance_columns: a.nuisance_columns.clone(),
        drop_degenerate: a.drop_degenerate,
    })
}

fn fresh_seed() -> u64 {
    let seed = rand::random::<u64>();
    eprintln!("no seed given; using --seed {seed}");
    seed
}

enum Failure {
    Usage(String),
    Run(tmicor::Error),
}

impl From<tmicor::Error> for Failure {
    fn from(e: tmicor::Error) -> Self {
        Failure::Run(e)
    }
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Test(a) => {
            if a.permutations == 0 {
                return Err(Failure::Usage("--permutations must be at least 1".into()));
            }
            if !(a.cutoff > 0.0 && a.cutoff <= 1.0) {
                return Err(Failure::Usage(format!("--cutoff {} must lie in (0, 1]", a.cutoff)));
            }
            if a.max_rank == Some(0) {
                return Err(Failure::Usage("--max-rank must be at least 1".into()));
            }
            let cfg = RunConfig::Test(TestConfig {
                input: data_config(&a.data).map_err(Failure::Usage)?,
                permutations: a.permutations,
                seed: a.seed.unwrap_or_else(fresh_seed),
                null: match a.null {
                    NullArg::Permutation => NullMethod::Permutation,
                    NullArg::Theoretical => NullMethod::Theoretical,
                },
                mode: match a.mode {
                    ModeArg::Restandardize => NullMode::Restandardize,
                    ModeArg::Raw => NullMode::Raw,
                },
                cutoff: a.cutoff,
                sign: sign(a.sign),
                max_rank: a.max_rank,
                monotone: a.monotone,
                dump_null: a.dump_null,
            });
            execute(&cfg, &a.data.out)?;
        }
        Command::Baseline(a) => {
            let cfg = RunConfig::Baseline(BaselineConfig {
                input: data_config(&a.data).map_err(Failure::Usage)?,
            });
            execute(&cfg, &a.data.out)?;
        }
        Command::Simulate(a) => {
            existing("--config", &a.config).map_err(Failure::Usage)?;
            let mut simulation = read_simulation_config(&a.config)?;
            if let Some(seed) = a.seed {
                simulation.seed = seed;
            }
            let probe = (!a.probe_p.is_empty()).then(|| ProbeConfig {
                p: a.probe_p.clone(),
                n: a.probe_n.clone(),
                replicates: a.probe_replicates,
            });
            execute(&RunConfig::Simulate(SimulateConfig { simulation, probe }), &a.out)?;
        }
        Command::Graph(a) => {
            existing("--fdr", &a.fdr).map_err(Failure::Usage)?;
            let req = GraphRequest {
                fdr_report: a.fdr,
                cutoff: a.cutoff,
                sign: sign(a.sign),
                top: a.top,
                format: match a.format {
                    GraphFormatArg::EdgeTsv => GraphFormat::EdgeTsv,
                    GraphFormatArg::Dot => GraphFormat::Dot,
                    GraphFormatArg::Json => GraphFormat::Json,
                },
            };
            match &a.out {
                Some(path) => {
                    let file = std::fs::File::create(path).map_err(|e| {
                        Failure::Run(tmicor::Error::Io {
                            path: path.clone(),
                            source: e,
                        })
                    })?;
                    let mut w = std::io::BufWriter::new(file);
                    run_graph(&req, &mut w)?;
                    w.flush().map_err(|e| {
                        Failure::Run(tmicor::Error::Io {
                            path: path.clone(),
                            source: e,
                        })
                    })?;
                }
                None => {
                    let stdout = std::io::stdout();
                    run_graph(&req, &mut stdout.lock())?;
                }
            }
        }
        Command::Rerun(a) => {
            existing("manifest", &a.manifest).map_err(Failure::Usage)?;
            rerun(&a.manifest, &a.out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(cli.log_level)
        .format_timestamp(None)
        .init();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
        {
            eprintln!("error: --threads: {e}");
            return ExitCode::from(1);
        }
    }
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}
