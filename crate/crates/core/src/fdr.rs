//! Permutation null generation and FDR estimation.
//!
//! The null pool holds `|T*|` for every pair under `A` class relabelings of the
//! already-standardized matrix. The estimated FDR at rank `l` is
//!
//! ```text
//! FDR(l) = (1/A) * #{ |T*| > |T(l)| } / l
//! ```
//!
//! where `T(l)` is the `l`-th largest observed statistic in magnitude. A
//! theoretical alternative replaces the permutation count with the normal
//! tail `2 * #pairs * Phi(-|T(l)| / s)`, `s² = 1/(n1-3) + 1/(n2-3)`.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::data::{Class, ClassLabels, StandardizedMatrix};
use crate::error::{Error, Result};
use crate::stats::{
    abs_statistics_into, gather_features, gram_correlation, group_correlation, CorrelationPair,
    PairSet, StatisticTable,
};
use crate::tsv::{self, fmt_f64};

/// Upper bound on redraws of degenerate relabelings for a single permutation.
const MAX_REDRAWS: usize = 10_000;

const POOL_MAGIC: &[u8; 4] = b"TMIC";
const POOL_VERSION: u32 = 1;

/// How statistics are recomputed after relabeling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NullMode {
    /// Recompute full sample correlations within the permuted classes.
    #[default]
    Restandardize,
    /// Reuse the pre-permutation centering and scaling: `r = (1/n_m) Σ x̃_j x̃_k`
    /// over the permuted group, clamped to `[-1, 1]`.
    Raw,
}

impl std::str::FromStr for NullMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "restandardize" => Ok(NullMode::Restandardize),
            "raw" => Ok(NullMode::Raw),
            other => Err(Error::Config(format!("unknown null mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for NullMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NullMode::Restandardize => "restandardize",
            NullMode::Raw => "raw",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermutationPlan {
    pub permutations: usize,
    pub seed: u64,
    pub mode: NullMode,
}

impl PermutationPlan {
    pub fn new(permutations: usize, seed: u64) -> Self {
        Self {
            permutations,
            seed,
            mode: NullMode::default(),
        }
    }

    pub fn with_mode(mut self, mode: NullMode) -> Self {
        self.mode = mode;
        self
    }
}

/// Random stream for permutation `index`: ChaCha keyed by `seed`, with the
/// permutation index as stream id, so each permutation is reproducible on
/// its own.
pub fn permutation_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// A uniformly random relabeling that preserves both class sizes.
pub fn draw_relabeling(y: &ClassLabels, rng: &mut ChaCha8Rng) -> ClassLabels {
    let mut labels = y.as_slice().to_vec();
    labels.shuffle(rng);
    ClassLabels::new(labels).expect("class sizes are preserved by shuffling")
}

/// Fraction of class-1 samples that stay in class 1 under `permuted`.
pub fn class_one_retention(y: &ClassLabels, permuted: &ClassLabels) -> f64 {
    let kept = y
        .iter()
        .zip(permuted.iter())
        .filter(|&(a, b)| a == Class::One && b == Class::One)
        .count();
    kept as f64 / y.n1() as f64
}

/// `|T*|` for every pair under the labels `permuted`, written into `out`.
///
/// Returns the saturation count, or the indices of features that are
/// constant inside a permuted class (restandardize mode only).
pub fn permuted_statistics(
    xstd: &StandardizedMatrix,
    permuted: &ClassLabels,
    pairs: &PairSet,
    mode: NullMode,
    out: &mut [f64],
) -> std::result::Result<usize, Vec<usize>> {
    let corr_for = |class: Class| -> std::result::Result<Array2<f64>, Vec<usize>> {
        let rows = permuted.rows(class);
        match mode {
            NullMode::Restandardize => group_correlation(&xstd.values, &rows),
            NullMode::Raw => {
                let block = gather_features(&xstd.values, &rows);
                Ok(gram_correlation(block.view(), 1.0 / rows.len() as f64))
            }
        }
    };
    let corr = CorrelationPair {
        r1: corr_for(Class::One)?,
        r2: corr_for(Class::Two)?,
    };
    Ok(abs_statistics_into(&corr, pairs, out))
}

/// Flat pool of permuted `|T*|` values, `permutations * pairs` long.
#[derive(Debug, Clone)]
pub struct NullPool {
    values: Vec<f64>,
    sorted: Vec<f64>,
    pairs_per_permutation: usize,
    permutations: usize,
    seed: u64,
    /// Per-permutation fraction of class 1 kept in class 1.
    pub perm_balance: Vec<f64>,
    pub saturated: usize,
    pub redraws: usize,
}

impl NullPool {
    /// Assembles a pool from per-permutation blocks laid out consecutively.
    pub fn from_values(
        values: Vec<f64>,
        permutations: usize,
        pairs_per_permutation: usize,
        seed: u64,
    ) -> Result<Self> {
        if values.len() != permutations * pairs_per_permutation {
            return Err(Error::Shape(format!(
                "pool of {} values for {permutations} x {pairs_per_permutation}",
                values.len()
            )));
        }
        let mut sorted = values.clone();
        sorted.par_sort_unstable_by(f64::total_cmp);
        Ok(Self {
            values,
            sorted,
            pairs_per_permutation,
            permutations,
            seed,
            perm_balance: Vec::new(),
            saturated: 0,
            redraws: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn permutations(&self) -> usize {
        self.permutations
    }

    pub fn pairs_per_permutation(&self) -> usize {
        self.pairs_per_permutation
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Ascending copy of the pool.
    pub fn sorted(&self) -> &[f64] {
        &self.sorted
    }

    /// Values of permutation `a`.
    pub fn permutation(&self, a: usize) -> &[f64] {
        let len = self.pairs_per_permutation;
        &self.values[a * len..(a + 1) * len]
    }

    /// `#{ |T*| > threshold }` over the whole pool.
    pub fn count_exceeding(&self, threshold: f64) -> usize {
        self.sorted.len() - self.sorted.partition_point(|&v| v <= threshold)
    }

    /// Writes the binary dump: `TMIC`, version (u32), permutations (u64),
    /// pairs (u64), seed (u64), then the values, all little-endian.
    pub fn write_binary<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        out.write_all(POOL_MAGIC)?;
        out.write_all(&POOL_VERSION.to_le_bytes())?;
        out.write_all(&(self.permutations as u64).to_le_bytes())?;
        out.write_all(&(self.pairs_per_permutation as u64).to_le_bytes())?;
        out.write_all(&self.seed.to_le_bytes())?;
        for v in &self.values {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(input: &mut R) -> Result<Self> {
        let bad = |e: std::io::Error| Error::Format(format!("null pool dump: {e}"));
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic).map_err(bad)?;
        if &magic != POOL_MAGIC {
            return Err(Error::Format("null pool dump: bad magic".into()));
        }
        let mut word = [0u8; 4];
        input.read_exact(&mut word).map_err(bad)?;
        let version = u32::from_le_bytes(word);
        if version != POOL_VERSION {
            return Err(Error::Format(format!(
                "null pool dump: unsupported version {version}"
            )));
        }
        let mut read_u64 = || -> Result<u64> {
            let mut buf = [0u8; 8];
            input.read_exact(&mut buf).map_err(bad)?;
            Ok(u64::from_le_bytes(buf))
        };
        let permutations = read_u64()? as usize;
        let pairs = read_u64()? as usize;
        let seed = read_u64()?;
        let mut raw = Vec::new();
        input.read_to_end(&mut raw).map_err(bad)?;
        if raw.len() != permutations * pairs * 8 {
            return Err(Error::Format(format!(
                "null pool dump: expected {} values, found {} bytes",
                permutations * pairs,
                raw.len()
            )));
        }
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Self::from_values(values, permutations, pairs, seed)
    }
}

/// Builds the permutation null for `plan.permutations` relabelings.
///
/// `xstd` must already be standardized (or nuisance-projected); it is never
/// re-projected here. Permutations run in parallel, each writing its own
/// slice of the pool, so the result does not depend on the thread count.
pub fn generate_null_pool(
    xstd: &StandardizedMatrix,
    y: &ClassLabels,
    pairs: &PairSet,
    plan: &PermutationPlan,
) -> Result<NullPool> {
    y.check_samples(xstd.n_samples())?;
    if plan.permutations == 0 {
        return Err(Error::Config("at least one permutation is required".into()));
    }
    if pairs.min_features() > xstd.n_features() {
        return Err(Error::Shape("pair set references missing features".into()));
    }
    let len = pairs.len();
    let mut values = vec![0.0; plan.permutations * len];
    let per_perm: Vec<Result<(f64, usize, usize)>> = values
        .par_chunks_mut(len.max(1))
        .take(plan.permutations)
        .enumerate()
        .map(|(a, out)| {
            let mut rng = permutation_rng(plan.seed, a as u64);
            let mut redraws = 0;
            loop {
                let permuted = draw_relabeling(y, &mut rng);
                match permuted_statistics(xstd, &permuted, pairs, plan.mode, out) {
                    Ok(saturated) => {
                        return Ok((class_one_retention(y, &permuted), saturated, redraws))
                    }
                    Err(_) if redraws < MAX_REDRAWS => redraws += 1,
                    Err(_) => return Err(Error::DegeneratePermutation(redraws)),
                }
            }
        })
        .collect();
    let mut balance = Vec::with_capacity(plan.permutations);
    let (mut saturated, mut redraws) = (0, 0);
    for r in per_perm {
        let (b, s, d) = r?;
        balance.push(b);
        saturated += s;
        redraws += d;
    }
    if redraws > 0 {
        log::warn!("redrew {redraws} degenerate permutation(s)");
    }
    let mut pool = NullPool::from_values(values, plan.permutations, len, plan.seed)?;
    pool.perm_balance = balance;
    pool.saturated = saturated;
    pool.redraws = redraws;
    Ok(pool)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FdrMethod {
    Permutation,
    Theoretical,
}

impl std::str::FromStr for FdrMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "permutation" => Ok(FdrMethod::Permutation),
            "theoretical" => Ok(FdrMethod::Theoretical),
            other => Err(Error::Config(format!("unknown null method '{other}'"))),
        }
    }
}

impl std::fmt::Display for FdrMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FdrMethod::Permutation => "permutation",
            FdrMethod::Theoretical => "theoretical",
        })
    }
}

/// Estimated FDR for the `l` most significant pairs, `l = 1..=L`.
#[derive(Debug, Clone, PartialEq)]
pub struct FdrCurve {
    pub method: FdrMethod,
    /// Pair index (into the statistic table) at each rank.
    pub order: Vec<usize>,
    /// `|T(l)|`, non-increasing.
    pub thresholds: Vec<f64>,
    /// Estimated number of false rejections at each threshold.
    pub expected_false: Vec<f64>,
    pub fdr_hat_raw: Vec<f64>,
    /// Raw value clamped to `[0, 1]` (and cumulative-maxed when requested).
    pub fdr_hat: Vec<f64>,
    pub monotone: bool,
}

impl FdrCurve {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn ranks(&self) -> impl Iterator<Item = usize> {
        1..=self.order.len()
    }

    /// Estimated FDR at 1-based `rank`.
    pub fn at(&self, rank: usize) -> f64 {
        self.fdr_hat[rank - 1]
    }

    /// Largest rank whose `fdr_hat` is at most `cutoff` (0 if none).
    pub fn rank_at_cutoff(&self, cutoff: f64) -> usize {
        self.fdr_hat
            .iter()
            .rposition(|&f| f <= cutoff)
            .map_or(0, |i| i + 1)
    }

    /// Writes `rank, feature_j, feature_k, t, fdr_hat_raw, fdr_hat` rows.
    pub fn write_tsv(
        &self,
        stats: &StatisticTable,
        names: &[String],
        header: &[(String, String)],
        path: &Path,
    ) -> Result<()> {
        let mut out = tsv::create(path)?;
        let io = |e| Error::io(path, e);
        tsv::write_header(&mut out, header).map_err(io)?;
        writeln!(out, "rank\tfeature_j\tfeature_k\tt\tfdr_hat_raw\tfdr_hat").map_err(io)?;
        for (l, &idx) in self.order.iter().enumerate() {
            let (j, k) = stats.pairs.pair(idx);
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                l + 1,
                names[j],
                names[k],
                fmt_f64(stats.t[idx]),
                fmt_f64(self.fdr_hat_raw[l]),
                fmt_f64(self.fdr_hat[l])
            )
            .map_err(io)?;
        }
        out.flush().map_err(io)
    }
}

/// Pair indices sorted by `|T|` descending; ties keep lexicographic pair
/// order.
pub fn rank_by_magnitude(t: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..t.len()).collect();
    order.par_sort_by(|&a, &b| t[b].abs().total_cmp(&t[a].abs()).then(a.cmp(&b)));
    order
}

fn check_rank(max_rank: usize, pairs: usize) -> Result<()> {
    if max_rank == 0 || max_rank > pairs {
        return Err(Error::Config(format!(
            "max rank {max_rank} must lie in 1..={pairs}"
        )));
    }
    Ok(())
}

fn finish_curve(
    method: FdrMethod,
    order: Vec<usize>,
    thresholds: Vec<f64>,
    expected_false: Vec<f64>,
    monotone: bool,
) -> FdrCurve {
    let fdr_hat_raw: Vec<f64> = expected_false
        .iter()
        .enumerate()
        .map(|(l, &e)| e / (l + 1) as f64)
        .collect();
    let mut running = 0.0_f64;
    let fdr_hat = fdr_hat_raw
        .iter()
        .map(|&f| {
            let clamped = f.clamp(0.0, 1.0);
            if monotone {
                running = running.max(clamped);
                running
            } else {
                clamped
            }
        })
        .collect();
    FdrCurve {
        method,
        order,
        thresholds,
        expected_false,
        fdr_hat_raw,
        fdr_hat,
        monotone,
    }
}

/// Permutation-based FDR estimates for ranks `1..=max_rank`.
///
/// A single sweep walks the ascending pool from the top while the threshold
/// decreases, so the exceedance count is exact and non-increasing in the
/// threshold.
pub fn estimate_fdr(
    stats: &StatisticTable,
    pool: &NullPool,
    max_rank: usize,
    monotone: bool,
) -> Result<FdrCurve> {
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    check_rank(max_rank, stats.len())?;
    let mut order = rank_by_magnitude(&stats.t);
    order.truncate(max_rank);
    let sorted = pool.sorted();
    let a = pool.permutations() as f64;
    let mut cursor = sorted.len();
    let mut thresholds = Vec::with_capacity(max_rank);
    let mut expected_false = Vec::with_capacity(max_rank);
    for &idx in &order {
        let threshold = stats.t[idx].abs();
        while cursor > 0 && sorted[cursor - 1] > threshold {
            cursor -= 1;
        }
        thresholds.push(threshold);
        expected_false.push((sorted.len() - cursor) as f64 / a);
    }
    Ok(finish_curve(
        FdrMethod::Permutation,
        order,
        thresholds,
        expected_false,
        monotone,
    ))
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard deviation of a null statistic for class sizes `n1`, `n2`.
pub fn null_sd(n1: usize, n2: usize) -> f64 {
    (1.0 / (n1 as f64 - 3.0) + 1.0 / (n2 as f64 - 3.0)).sqrt()
}

/// `P(|T| > t)` for a null statistic.
pub fn theoretical_tail(t: f64, n1: usize, n2: usize) -> f64 {
    2.0 * normal_cdf(-t.abs() / null_sd(n1, n2))
}

/// FDR estimates using the asymptotic normal null instead of permutations.
pub fn theoretical_fdr(
    stats: &StatisticTable,
    n1: usize,
    n2: usize,
    max_rank: usize,
    monotone: bool,
) -> Result<FdrCurve> {
    if n1 <= 3 || n2 <= 3 {
        return Err(Error::InsufficientDf(format!(
            "class sizes ({n1}, {n2}) must both exceed 3"
        )));
    }
    check_rank(max_rank, stats.len())?;
    let mut order = rank_by_magnitude(&stats.t);
    order.truncate(max_rank);
    let m = stats.len() as f64;
    let thresholds: Vec<f64> = order.iter().map(|&i| stats.t[i].abs()).collect();
    let expected_false = thresholds
        .iter()
        .map(|&t| m * theoretical_tail(t, n1, n2))
        .collect();
    Ok(finish_curve(
        FdrMethod::Theoretical,
        order,
        thresholds,
        expected_false,
        monotone,
    ))
}
