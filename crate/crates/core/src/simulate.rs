//! Simulation harness: two Gaussian classes with block-equicorrelated
//! covariances that differ only in block 1, true-FDR bookkeeping against the
//! known alternative set, and empirical consistency probes.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{standardize_within_class, ClassLabels, DataMatrix, MIN_CLASS_SIZE};
use crate::error::{Error, Result};
use crate::fdr::{
    estimate_fdr, generate_null_pool, permuted_statistics, rank_by_magnitude, NullMode,
    PermutationPlan,
};
use crate::logistic::{bh_fdr, fit_all_pairs};
use crate::stats::{class_correlations, pair_statistics, PairSet, StatisticTable};
use crate::tsv::fmt_f64;

/// Innovation distribution, scaled to unit variance before mixing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Noise {
    #[default]
    Gaussian,
    /// Uniform on `[-√3, √3]`: bounded, hence sub-Gaussian.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub blocks: usize,
    pub block_size: usize,
    /// Within-block correlation of every block in class 1 (and blocks 2.. in class 2).
    pub rho: f64,
    /// Within-block correlation of block 1 in class 2.
    pub rho1_tilde: f64,
    /// Mean of the block-1 features in class 2 (class 1 has mean 0).
    pub mean_shift: f64,
    pub n_per_class: usize,
    pub trials: usize,
    pub permutations: usize,
    pub seed: u64,
    pub mode: NullMode,
    /// Also run the logistic baseline.
    pub baseline: bool,
    pub noise: Noise,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            blocks: 10,
            block_size: 10,
            rho: 0.3,
            rho1_tilde: 0.0,
            mean_shift: 0.0,
            n_per_class: 250,
            trials: 10,
            permutations: 100,
            seed: 1,
            mode: NullMode::Restandardize,
            baseline: true,
            noise: Noise::Gaussian,
        }
    }
}

fn check_block_rho(rho: f64, block_size: usize, what: &str) -> Result<()> {
    let small = 1.0 + (block_size as f64 - 1.0) * rho;
    let large = 1.0 - rho;
    if !(small > 0.0 && large > 0.0) {
        return Err(Error::NotPositiveDefinite(format!(
            "{what} = {rho} with block size {block_size} gives eigenvalues {small} and {large}"
        )));
    }
    Ok(())
}

impl SimulationConfig {
    pub fn n_features(&self) -> usize {
        self.blocks * self.block_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.block_size < 2 {
            return Err(Error::Config("need at least one block of size >= 2".into()));
        }
        if self.n_per_class < MIN_CLASS_SIZE {
            return Err(Error::Config(format!(
                "n_per_class must be at least {MIN_CLASS_SIZE}"
            )));
        }
        if self.trials == 0 || self.permutations == 0 {
            return Err(Error::Config("trials and permutations must be positive".into()));
        }
        if !self.mean_shift.is_finite() {
            return Err(Error::Config("mean_shift must be finite".into()));
        }
        check_block_rho(self.rho, self.block_size, "rho")?;
        check_block_rho(self.rho1_tilde, self.block_size, "rho1_tilde")
    }

    /// Flags, in all-pairs order, the pairs whose correlation differs
    /// between classes: every within-block-1 pair when `rho1_tilde != rho`.
    pub fn alternative_pairs(&self) -> Vec<bool> {
        let p = self.n_features();
        let differs = self.rho1_tilde != self.rho;
        PairSet::all(p)
            .iter()
            .map(|(j, k)| differs && j < self.block_size && k < self.block_size)
            .collect()
    }

    /// Parses `key = value` lines; `#` starts a comment. Missing keys keep
    /// their defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| {
                Error::Config(format!("line {}: invalid {what} '{value}'", lineno + 1))
            };
            match key {
                "blocks" => cfg.blocks = value.parse().map_err(|_| bad(key))?,
                "block_size" => cfg.block_size = value.parse().map_err(|_| bad(key))?,
                "rho" => cfg.rho = value.parse().map_err(|_| bad(key))?,
                "rho1_tilde" => cfg.rho1_tilde = value.parse().map_err(|_| bad(key))?,
                "mean_shift" => cfg.mean_shift = value.parse().map_err(|_| bad(key))?,
                "n_per_class" => cfg.n_per_class = value.parse().map_err(|_| bad(key))?,
                "trials" => cfg.trials = value.parse().map_err(|_| bad(key))?,
                "permutations" => cfg.permutations = value.parse().map_err(|_| bad(key))?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad(key))?,
                "mode" => cfg.mode = value.parse().map_err(|_| bad(key))?,
                "baseline" => cfg.baseline = value.parse().map_err(|_| bad(key))?,
                "noise" => {
                    cfg.noise = match value {
                        "gaussian" => Noise::Gaussian,
                        "uniform" => Noise::Uniform,
                        _ => return Err(bad(key)),
                    }
                }
                other => {
                    return Err(Error::Config(format!(
                        "line {}: unknown key '{other}'",
                        lineno + 1
                    )))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Config as ordered `(key, value)` pairs.
    pub fn entries(&self) -> Vec<(String, String)> {
        let noise = match self.noise {
            Noise::Gaussian => "gaussian",
            Noise::Uniform => "uniform",
        };
        [
            ("blocks", self.blocks.to_string()),
            ("block_size", self.block_size.to_string()),
            ("rho", self.rho.to_string()),
            ("rho1_tilde", self.rho1_tilde.to_string()),
            ("mean_shift", self.mean_shift.to_string()),
            ("n_per_class", self.n_per_class.to_string()),
            ("trials", self.trials.to_string()),
            ("permutations", self.permutations.to_string()),
            ("seed", self.seed.to_string()),
            ("mode", self.mode.to_string()),
            ("baseline", self.baseline.to_string()),
            ("noise", noise.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// Class covariances: block-diagonal equicorrelated blocks, identical except
/// for block 1 in class 2.
pub fn build_covariances(cfg: &SimulationConfig) -> Result<(Array2<f64>, Array2<f64>)> {
    check_block_rho(cfg.rho, cfg.block_size, "rho")?;
    check_block_rho(cfg.rho1_tilde, cfg.block_size, "rho1_tilde")?;
    let p = cfg.n_features();
    let b = cfg.block_size;
    let build = |first_block_rho: f64| {
        let mut sigma = Array2::zeros((p, p));
        for block in 0..cfg.blocks {
            let rho = if block == 0 { first_block_rho } else { cfg.rho };
            let mut view = sigma.slice_mut(s![block * b..(block + 1) * b, block * b..(block + 1) * b]);
            view.fill(rho);
            view.diag_mut().fill(1.0);
        }
        sigma
    };
    Ok((build(cfg.rho), build(cfg.rho1_tilde)))
}

/// Lower Cholesky factor of a covariance matrix.
fn cholesky_lower(sigma: &Array2<f64>) -> Result<Array2<f64>> {
    let p = sigma.nrows();
    let m = DMatrix::from_fn(p, p, |i, j| sigma[[i, j]]);
    let l = m.cholesky().ok_or(Error::CholeskyFailure)?.unpack();
    Ok(Array2::from_shape_fn((p, p), |(i, j)| l[(i, j)]))
}

fn innovation(noise: Noise, rng: &mut ChaCha8Rng) -> f64 {
    match noise {
        Noise::Gaussian => rng.sample(StandardNormal),
        Noise::Uniform => (rng.random::<f64>() * 2.0 - 1.0) * 3.0_f64.sqrt(),
    }
}

/// `n` draws `x = L z + mu` with `L` the lower Cholesky factor of `sigma`.
pub fn sample_class(
    sigma: &Array2<f64>,
    mu: &[f64],
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<DataMatrix> {
    sample_class_with(sigma, mu, n, Noise::Gaussian, rng)
}

pub fn sample_class_with(
    sigma: &Array2<f64>,
    mu: &[f64],
    n: usize,
    noise: Noise,
    rng: &mut ChaCha8Rng,
) -> Result<DataMatrix> {
    let p = sigma.nrows();
    if mu.len() != p || sigma.ncols() != p {
        return Err(Error::Shape(format!(
            "covariance {}x{} with mean of length {}",
            sigma.nrows(),
            sigma.ncols(),
            mu.len()
        )));
    }
    let l = cholesky_lower(sigma)?;
    let mut out = Array2::zeros((n, p));
    let mut z = vec![0.0; p];
    for mut row in out.outer_iter_mut() {
        z.iter_mut().for_each(|v| *v = innovation(noise, rng));
        for (i, slot) in row.iter_mut().enumerate() {
            let li = l.row(i);
            let mut acc = 0.0;
            for (a, b) in li.iter().take(i + 1).zip(&z) {
                acc += a * b;
            }
            *slot = acc + mu[i];
        }
    }
    DataMatrix::with_default_names(out)
}

/// Mixes `(seed, index)` into a new 64-bit seed (splitmix64 finalizer).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Both classes stacked (class 1 first) with their labels.
pub fn generate_dataset(
    cfg: &SimulationConfig,
    n_per_class: usize,
    seed: u64,
) -> Result<(DataMatrix, ClassLabels)> {
    let (sigma1, sigma2) = build_covariances(cfg)?;
    let p = cfg.n_features();
    let mut mu2 = vec![0.0; p];
    mu2[..cfg.block_size].fill(cfg.mean_shift);
    let mut rng1 = ChaCha8Rng::seed_from_u64(seed);
    rng1.set_stream(0);
    let mut rng2 = ChaCha8Rng::seed_from_u64(seed);
    rng2.set_stream(1);
    let x1 = sample_class_with(&sigma1, &vec![0.0; p], n_per_class, cfg.noise, &mut rng1)?;
    let x2 = sample_class_with(&sigma2, &mu2, n_per_class, cfg.noise, &mut rng2)?;
    let values = ndarray::concatenate(ndarray::Axis(0), &[x1.values().view(), x2.values().view()])
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok((
        DataMatrix::with_default_names(values)?,
        ClassLabels::blocks(n_per_class, n_per_class)?,
    ))
}

/// Per-rank curves for one trial (index `l - 1` holds rank `l`).
#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub fdr_est_tmicor: Vec<f64>,
    pub fdr_true_tmicor: Vec<f64>,
    /// Alternative pairs among the top `l` by `|T|`.
    pub recovered_tmicor: Vec<usize>,
    pub fdr_est_logistic: Vec<f64>,
    pub fdr_true_logistic: Vec<f64>,
    pub recovered_logistic: Vec<usize>,
}

/// Realized FDR of the top-`l` rejections for every `l`, and the number of
/// true alternatives among them.
pub fn true_fdr_curve(order: &[usize], alternative: &[bool]) -> (Vec<f64>, Vec<usize>) {
    let mut hits = 0;
    let mut fdr = Vec::with_capacity(order.len());
    let mut recovered = Vec::with_capacity(order.len());
    for (l, &idx) in order.iter().enumerate() {
        if alternative[idx] {
            hits += 1;
        }
        let rejections = l + 1;
        fdr.push((rejections - hits) as f64 / rejections as f64);
        recovered.push(hits);
    }
    (fdr, recovered)
}

pub fn run_trial(cfg: &SimulationConfig, trial: usize) -> Result<TrialResult> {
    let seed = derive_seed(cfg.seed, trial as u64);
    let (x, y) = generate_dataset(cfg, cfg.n_per_class, derive_seed(seed, u64::MAX))?;
    let pairs = PairSet::all(cfg.n_features());
    let alternative = cfg.alternative_pairs();

    let xstd = standardize_within_class(&x, &y)?;
    let stats = pair_statistics(&class_correlations(&xstd, &y)?, &pairs)?;
    let plan = PermutationPlan::new(cfg.permutations, seed).with_mode(cfg.mode);
    let pool = generate_null_pool(&xstd, &y, &pairs, &plan)?;
    let curve = estimate_fdr(&stats, &pool, pairs.len(), false)?;
    let (fdr_true_tmicor, recovered_tmicor) = true_fdr_curve(&curve.order, &alternative);

    let (fdr_est_logistic, fdr_true_logistic, recovered_logistic) = if cfg.baseline {
        let fits = fit_all_pairs(&x, &y, &pairs)?;
        let p: Vec<f64> = fits.iter().map(|f| f.fit.p_value).collect();
        let bh = bh_fdr(&p)?;
        let (t, r) = true_fdr_curve(&bh.order, &alternative);
        (bh.rank_fdr, t, r)
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };

    Ok(TrialResult {
        fdr_est_tmicor: curve.fdr_hat,
        fdr_true_tmicor,
        recovered_tmicor,
        fdr_est_logistic,
        fdr_true_logistic,
        recovered_logistic,
    })
}

/// Per-rank mean and standard error of the mean across trials.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveSummary {
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
}

impl CurveSummary {
    fn from_trials<'a>(curves: impl Iterator<Item = &'a [f64]>) -> Self {
        let curves: Vec<&[f64]> = curves.collect();
        let len = curves.first().map_or(0, |c| c.len());
        let t = curves.len() as f64;
        let mut mean = vec![0.0; len];
        let mut se = vec![0.0; len];
        for l in 0..len {
            let m = curves.iter().map(|c| c[l]).sum::<f64>() / t;
            let var = if curves.len() > 1 {
                curves.iter().map(|c| (c[l] - m).powi(2)).sum::<f64>() / (t - 1.0)
            } else {
                0.0
            };
            mean[l] = m;
            se[l] = (var / t).sqrt();
        }
        Self { mean, se }
    }

    /// Mean at 1-based `rank`.
    pub fn at(&self, rank: usize) -> f64 {
        self.mean[rank - 1]
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub config: SimulationConfig,
    pub trials: Vec<TrialResult>,
    pub est_tmicor: CurveSummary,
    pub true_tmicor: CurveSummary,
    pub est_logistic: CurveSummary,
    pub true_logistic: CurveSummary,
}

impl ExperimentResult {
    pub fn ranks(&self) -> usize {
        self.true_tmicor.mean.len()
    }

    fn columns(&self) -> Vec<(&'static str, &[f64])> {
        let mut cols: Vec<(&'static str, &[f64])> = vec![
            ("fdr_est_tmicor", &self.est_tmicor.mean),
            ("fdr_true_tmicor", &self.true_tmicor.mean),
        ];
        if self.config.baseline {
            cols.push(("fdr_est_logistic", &self.est_logistic.mean));
            cols.push(("fdr_true_logistic", &self.true_logistic.mean));
        }
        cols.push(("se_est_tmicor", &self.est_tmicor.se));
        cols.push(("se_true_tmicor", &self.true_tmicor.se));
        if self.config.baseline {
            cols.push(("se_est_logistic", &self.est_logistic.se));
            cols.push(("se_true_logistic", &self.true_logistic.se));
        }
        cols
    }

    fn write_delimited(&self, path: &Path, sep: &str, with_header: bool) -> Result<()> {
        let mut out = crate::tsv::create(path)?;
        let io = |e| Error::io(path, e);
        if with_header {
            crate::tsv::write_header(&mut out, &self.config.entries()).map_err(io)?;
        }
        let cols = self.columns();
        let names: Vec<&str> = std::iter::once("rank").chain(cols.iter().map(|c| c.0)).collect();
        writeln!(out, "{}", names.join(sep)).map_err(io)?;
        for l in 0..self.ranks() {
            let mut cells = vec![(l + 1).to_string()];
            cells.extend(cols.iter().map(|(_, v)| fmt_f64(v[l])));
            writeln!(out, "{}", cells.join(sep)).map_err(io)?;
        }
        out.flush().map_err(io)
    }

    /// Results TSV with the config echoed as a commented header.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        self.write_delimited(path, "\t", true)
    }

    /// Plain CSV of the same columns, without comments, for plotting tools.
    pub fn write_plot_csv(&self, path: &Path) -> Result<()> {
        self.write_delimited(path, ",", false)
    }
}

/// Runs all trials (in parallel) and aggregates the curves. Any failed trial
/// fails the experiment.
pub fn run_experiment(cfg: &SimulationConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let trials: Vec<TrialResult> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| run_trial(cfg, t))
        .collect::<Result<_>>()?;
    let summary = |f: fn(&TrialResult) -> &[f64]| CurveSummary::from_trials(trials.iter().map(f));
    Ok(ExperimentResult {
        config: cfg.clone(),
        est_tmicor: summary(|t| &t.fdr_est_tmicor),
        true_tmicor: summary(|t| &t.fdr_true_tmicor),
        est_logistic: summary(|t| &t.fdr_est_logistic),
        true_logistic: summary(|t| &t.fdr_true_logistic),
        trials,
    })
}

/// One replicate of the consistency probe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProbeRow {
    pub n: usize,
    pub p: usize,
    pub replicate: usize,
    /// Largest `|T|` over null pairs.
    pub max_null_t: f64,
    /// Smallest `|T|` over alternative pairs (NaN when there are none).
    pub min_alt_t: f64,
    /// Largest `|T*|` under one raw-mode relabeling.
    pub max_perm_t: f64,
    /// `sqrt(ln p / n)`.
    pub rate: f64,
}

impl ProbeRow {
    pub fn separated(&self) -> bool {
        self.min_alt_t > self.max_null_t
    }
}

/// For every `(n, p)` in the schedules and each replicate: the largest null
/// statistic, the smallest alternative statistic and the largest permuted
/// statistic, next to the rate `sqrt(ln p / n)`.
///
/// `p` values must be multiples of `base.block_size`; the number of blocks
/// follows from `p`.
pub fn consistency_probe(
    p_schedule: &[usize],
    n_schedule: &[usize],
    base: &SimulationConfig,
    replicates: usize,
) -> Result<Vec<ProbeRow>> {
    if p_schedule.is_empty() || n_schedule.is_empty() || replicates == 0 {
        return Err(Error::Config("probe schedules must be non-empty".into()));
    }
    if n_schedule.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("n schedule must be increasing".into()));
    }
    let mut jobs = Vec::new();
    for &p in p_schedule {
        if p % base.block_size != 0 || p == 0 {
            return Err(Error::Config(format!(
                "p = {p} is not a multiple of block size {}",
                base.block_size
            )));
        }
        for &n in n_schedule {
            for r in 0..replicates {
                jobs.push((n, p, r));
            }
        }
    }
    jobs.par_iter()
        .map(|&(n, p, replicate)| {
            let cfg = SimulationConfig {
                blocks: p / base.block_size,
                n_per_class: n,
                ..base.clone()
            };
            let seed = derive_seed(derive_seed(derive_seed(base.seed, n as u64), p as u64), replicate as u64);
            let (x, y) = generate_dataset(&cfg, n, seed)?;
            let pairs = PairSet::all(p);
            let xstd = standardize_within_class(&x, &y)?;
            let stats = pair_statistics(&class_correlations(&xstd, &y)?, &pairs)?;
            let alternative = cfg.alternative_pairs();
            let (mut max_null, mut min_alt) = (0.0_f64, f64::INFINITY);
            for (t, &alt) in stats.t.iter().zip(&alternative) {
                if alt {
                    min_alt = min_alt.min(t.abs());
                } else {
                    max_null = max_null.max(t.abs());
                }
            }
            let mut rng = crate::fdr::permutation_rng(seed, 0);
            let permuted = crate::fdr::draw_relabeling(&y, &mut rng);
            let mut perm = vec![0.0; pairs.len()];
            permuted_statistics(&xstd, &permuted, &pairs, NullMode::Raw, &mut perm)
                .map_err(|_| Error::DegeneratePermutation(0))?;
            Ok(ProbeRow {
                n,
                p,
                replicate,
                max_null_t: max_null,
                min_alt_t: if min_alt.is_finite() { min_alt } else { f64::NAN },
                max_perm_t: perm.iter().fold(0.0_f64, |m, v| m.max(*v)),
                rate: ((p as f64).ln() / n as f64).sqrt(),
            })
        })
        .collect()
}

/// Observed statistics for a simulated dataset, ranked by `|T|`.
pub fn ranked_statistics(cfg: &SimulationConfig, seed: u64) -> Result<(StatisticTable, Vec<usize>)> {
    let (x, y) = generate_dataset(cfg, cfg.n_per_class, seed)?;
    let xstd = standardize_within_class(&x, &y)?;
    let stats = pair_statistics(&class_correlations(&xstd, &y)?, &PairSet::all(cfg.n_features()))?;
    let order = rank_by_magnitude(&stats.t);
    Ok((stats, order))
}
