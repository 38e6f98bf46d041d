//! Per-class correlation matrices, the Fisher transform and pair statistics
//! `T = atanh(r1) - atanh(r2)`.
//!
//! Sign convention: `T > 0` means the class-1 correlation exceeds the class-2
//! correlation.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use crate::data::{Class, ClassLabels, StandardizedMatrix};
use crate::error::{Error, Result};
use crate::tsv::{self, fmt_f64};

/// Correlations with `|r| >= 1 - SATURATION_EPS` are clamped before the
/// Fisher transform.
pub const SATURATION_EPS: f64 = 1e-12;

/// Number of features per side of a tile in the correlation kernel.
const TILE: usize = 32;

/// `atanh(r)`, refusing saturated correlations.
pub fn fisher_transform(r: f64) -> Result<f64> {
    if !(r.abs() < 1.0 - SATURATION_EPS) {
        return Err(Error::SaturatedCorrelation(r));
    }
    Ok(r.atanh())
}

/// `atanh(r)` with `|r|` clamped to `1 - SATURATION_EPS`. The flag reports
/// whether clamping happened.
pub fn fisher_transform_clamped(r: f64) -> (f64, bool) {
    let limit = 1.0 - SATURATION_EPS;
    if r.abs() < limit {
        (r.atanh(), false)
    } else {
        (limit.copysign(r).atanh(), true)
    }
}

/// Off-diagonal entry of the inverse of a bivariate covariance matrix with
/// correlation `r` and standard deviations `sj`, `sk`.
pub fn bivariate_precision_offdiag(r: f64, sj: f64, sk: f64) -> Result<f64> {
    if !(r.abs() < 1.0) {
        return Err(Error::SingularInput(r));
    }
    if !(sj > 0.0 && sk > 0.0) {
        return Err(Error::Domain(format!(
            "standard deviations must be positive, got {sj} and {sk}"
        )));
    }
    Ok(-r / (sj * sk * (1.0 - r * r)))
}

/// Sample correlation matrices of the two classes.
#[derive(Debug, Clone)]
pub struct CorrelationPair {
    pub r1: Array2<f64>,
    pub r2: Array2<f64>,
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Scaled Gram matrix `scale * F Fᵀ` of a features-major block `F` (p × n),
/// clamped to `[-1, 1]` with a unit diagonal.
///
/// Work is split into tiles of feature pairs; every dot product is computed
/// by exactly one task in a fixed order, so the result does not depend on
/// the thread count.
pub fn gram_correlation(features: ArrayView2<'_, f64>, scale: f64) -> Array2<f64> {
    let p = features.nrows();
    let rows: Vec<&[f64]> = features
        .outer_iter()
        .map(|r| r.to_slice().expect("features-major block must be contiguous"))
        .collect();
    let tiles = p.div_ceil(TILE);
    let tile_pairs: Vec<(usize, usize)> = (0..tiles)
        .flat_map(|a| (a..tiles).map(move |b| (a, b)))
        .collect();
    let blocks: Vec<Vec<(usize, usize, f64)>> = tile_pairs
        .par_iter()
        .map(|&(a, b)| {
            let mut out = Vec::with_capacity(TILE * TILE);
            for j in a * TILE..((a + 1) * TILE).min(p) {
                let start = (b * TILE).max(j + 1);
                for k in start..((b + 1) * TILE).min(p) {
                    let r = (scale * dot(rows[j], rows[k])).clamp(-1.0, 1.0);
                    out.push((j, k, r));
                }
            }
            out
        })
        .collect();
    let mut corr = Array2::eye(p);
    for (j, k, r) in blocks.into_iter().flatten() {
        corr[[j, k]] = r;
        corr[[k, j]] = r;
    }
    corr
}

/// Copies `rows` of `x` into a features-major (p × rows.len()) block.
pub(crate) fn gather_features(x: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    let p = x.ncols();
    let mut block = Array2::zeros((p, rows.len()));
    for (c, &i) in rows.iter().enumerate() {
        for (j, &v) in x.row(i).iter().enumerate() {
            block[[j, c]] = v;
        }
    }
    block
}

/// Centers and unit-normalizes each feature row in place. Returns the indices
/// of rows with zero spread.
pub(crate) fn normalize_features(block: &mut Array2<f64>) -> Vec<usize> {
    let mut degenerate = Vec::new();
    for (j, mut row) in block.outer_iter_mut().enumerate() {
        let n = row.len() as f64;
        let mean = row.sum() / n;
        let scale = row.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        row.mapv_inplace(|v| v - mean);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 1e-12 * scale * n.sqrt()) || norm == 0.0 {
            degenerate.push(j);
            continue;
        }
        row.mapv_inplace(|v| v / norm);
    }
    degenerate
}

/// Full sample correlation matrix of the given rows (recentered and
/// rescaled within the group).
pub(crate) fn group_correlation(
    x: &Array2<f64>,
    rows: &[usize],
) -> std::result::Result<Array2<f64>, Vec<usize>> {
    let mut block = gather_features(x, rows);
    let degenerate = normalize_features(&mut block);
    if !degenerate.is_empty() {
        return Err(degenerate);
    }
    Ok(gram_correlation(block.view(), 1.0))
}

/// Correlation matrix of a samples × features matrix.
pub fn correlation_matrix(x: &Array2<f64>) -> Result<Array2<f64>> {
    let rows: Vec<usize> = (0..x.nrows()).collect();
    group_correlation(x, &rows).map_err(|bad| {
        Error::DegenerateFeature(bad.iter().map(|j| format!("column {j}")).collect())
    })
}

/// Per-class sample correlations of standardized data.
pub fn class_correlations(xstd: &StandardizedMatrix, y: &ClassLabels) -> Result<CorrelationPair> {
    y.check_samples(xstd.n_samples())?;
    let one = |class: Class| {
        group_correlation(&xstd.values, &y.rows(class)).map_err(|bad| {
            Error::DegenerateFeature(bad.iter().map(|&j| xstd.feature_names[j].clone()).collect())
        })
    };
    Ok(CorrelationPair {
        r1: one(Class::One)?,
        r2: one(Class::Two)?,
    })
}

/// The pairs `(j, k)`, `j < k`, that are tested, in lexicographic order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PairSet {
    /// Every pair of `p` features.
    All { p: usize },
    /// Pairs with one feature from each of two disjoint sets.
    Cross {
        set_a: Vec<usize>,
        set_b: Vec<usize>,
        pairs: Vec<(usize, usize)>,
    },
}

impl PairSet {
    pub fn all(p: usize) -> Self {
        PairSet::All { p }
    }

    pub fn cross(set_a: Vec<usize>, set_b: Vec<usize>) -> Result<Self> {
        if set_a.is_empty() || set_b.is_empty() {
            return Err(Error::Config("cross-set mode needs both sets non-empty".into()));
        }
        if let Some(j) = set_a.iter().find(|j| set_b.contains(j)) {
            return Err(Error::OverlappingSets(format!("index {j}")));
        }
        let mut pairs: Vec<(usize, usize)> = set_a
            .iter()
            .flat_map(|&a| set_b.iter().map(move |&b| (a.min(b), a.max(b))))
            .collect();
        pairs.sort_unstable();
        pairs.dedup();
        Ok(PairSet::Cross {
            set_a,
            set_b,
            pairs,
        })
    }

    pub fn len(&self) -> usize {
        match self {
            PairSet::All { p } => p * p.saturating_sub(1) / 2,
            PairSet::Cross { pairs, .. } => pairs.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Largest feature index + 1 referenced by the set.
    pub fn min_features(&self) -> usize {
        match self {
            PairSet::All { p } => *p,
            PairSet::Cross { pairs, .. } => pairs.iter().map(|&(_, k)| k + 1).max().unwrap_or(0),
        }
    }

    /// Position of `(j, k)` in the all-pairs ordering of `p` features.
    pub fn triangular_offset(p: usize, j: usize, k: usize) -> usize {
        debug_assert!(j < k && k < p);
        j * (2 * p - j - 1) / 2 + (k - j - 1)
    }

    /// The pair at position `idx`.
    pub fn pair(&self, idx: usize) -> (usize, usize) {
        match self {
            PairSet::All { p } => {
                let p = *p;
                // invert the triangular offset, then correct rounding
                let pf = p as f64;
                let disc = (2.0 * pf - 1.0).powi(2) - 8.0 * idx as f64;
                let mut j = ((2.0 * pf - 1.0 - disc.max(0.0).sqrt()) / 2.0).floor() as usize;
                while j > 0 && Self::triangular_offset(p, j, j + 1) > idx {
                    j -= 1;
                }
                while j + 2 < p && Self::triangular_offset(p, j + 1, j + 2) <= idx {
                    j += 1;
                }
                (j, idx - Self::triangular_offset(p, j, j + 1) + j + 1)
            }
            PairSet::Cross { pairs, .. } => pairs[idx],
        }
    }

    pub fn iter(&self) -> Box<dyn Iterator<Item = (usize, usize)> + '_> {
        match self {
            PairSet::All { p } => {
                let p = *p;
                Box::new((0..p).flat_map(move |j| (j + 1..p).map(move |k| (j, k))))
            }
            PairSet::Cross { pairs, .. } => Box::new(pairs.iter().copied()),
        }
    }

    /// Consecutive index ranges used to split statistic construction across
    /// tasks; for all pairs each range is one row of the upper triangle.
    fn segments(&self) -> Vec<(usize, usize)> {
        match self {
            PairSet::All { p } => (0..*p)
                .map(|j| {
                    let start = if j + 1 < *p {
                        Self::triangular_offset(*p, j, j + 1)
                    } else {
                        self.len()
                    };
                    (start, start + (p - j - 1))
                })
                .filter(|(a, b)| a < b)
                .collect(),
            PairSet::Cross { pairs, .. } => {
                let chunk = 4096;
                (0..pairs.len())
                    .step_by(chunk)
                    .map(|s| (s, (s + chunk).min(pairs.len())))
                    .collect()
            }
        }
    }
}

/// One entry of the statistic table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairStatistic {
    pub j: usize,
    pub k: usize,
    pub r1: f64,
    pub r2: f64,
    pub u1: f64,
    pub u2: f64,
    pub t_value: f64,
}

/// Flat arrays of pair statistics indexed like the [`PairSet`].
#[derive(Debug, Clone)]
pub struct StatisticTable {
    pub pairs: PairSet,
    pub r1: Vec<f64>,
    pub r2: Vec<f64>,
    pub u1: Vec<f64>,
    pub u2: Vec<f64>,
    pub t: Vec<f64>,
    /// Number of correlations clamped before the Fisher transform.
    pub saturated: usize,
}

impl StatisticTable {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn get(&self, idx: usize) -> PairStatistic {
        let (j, k) = self.pairs.pair(idx);
        PairStatistic {
            j,
            k,
            r1: self.r1[idx],
            r2: self.r2[idx],
            u1: self.u1[idx],
            u2: self.u2[idx],
            t_value: self.t[idx],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = PairStatistic> + '_ {
        self.pairs.iter().enumerate().map(|(idx, (j, k))| PairStatistic {
            j,
            k,
            r1: self.r1[idx],
            r2: self.r2[idx],
            u1: self.u1[idx],
            u2: self.u2[idx],
            t_value: self.t[idx],
        })
    }

    pub fn abs_t(&self) -> Vec<f64> {
        self.t.iter().map(|t| t.abs()).collect()
    }

    /// Writes `feature_j, feature_k, r1, r2, u1, u2, t` rows.
    pub fn write_tsv(
        &self,
        names: &[String],
        header: &[(String, String)],
        path: &Path,
    ) -> Result<()> {
        let mut out = tsv::create(path)?;
        let io = |e| Error::io(path, e);
        tsv::write_header(&mut out, header).map_err(io)?;
        writeln!(out, "feature_j\tfeature_k\tr1\tr2\tu1\tu2\tt").map_err(io)?;
        for s in self.iter() {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                names[s.j],
                names[s.k],
                fmt_f64(s.r1),
                fmt_f64(s.r2),
                fmt_f64(s.u1),
                fmt_f64(s.u2),
                fmt_f64(s.t_value)
            )
            .map_err(io)?;
        }
        out.flush().map_err(io)
    }
}

struct Segment {
    r1: Vec<f64>,
    r2: Vec<f64>,
    u1: Vec<f64>,
    u2: Vec<f64>,
    t: Vec<f64>,
    saturated: usize,
}

fn check_pairs(corr: &CorrelationPair, pairs: &PairSet) -> Result<()> {
    let p = corr.r1.nrows();
    if corr.r2.nrows() != p || pairs.min_features() > p {
        return Err(Error::Shape(format!(
            "pair set needs {} features, correlations have {p}",
            pairs.min_features()
        )));
    }
    Ok(())
}

/// Fisher-transformed differences for every pair in `pairs`.
pub fn pair_statistics(corr: &CorrelationPair, pairs: &PairSet) -> Result<StatisticTable> {
    check_pairs(corr, pairs)?;
    let segments: Vec<Segment> = pairs
        .segments()
        .into_par_iter()
        .map(|(start, end)| {
            let len = end - start;
            let mut seg = Segment {
                r1: Vec::with_capacity(len),
                r2: Vec::with_capacity(len),
                u1: Vec::with_capacity(len),
                u2: Vec::with_capacity(len),
                t: Vec::with_capacity(len),
                saturated: 0,
            };
            for idx in start..end {
                let (j, k) = pairs.pair(idx);
                let (a, b) = (corr.r1[[j, k]], corr.r2[[j, k]]);
                let (u1, s1) = fisher_transform_clamped(a);
                let (u2, s2) = fisher_transform_clamped(b);
                seg.saturated += s1 as usize + s2 as usize;
                seg.r1.push(a);
                seg.r2.push(b);
                seg.u1.push(u1);
                seg.u2.push(u2);
                seg.t.push(u1 - u2);
            }
            seg
        })
        .collect();
    let mut table = StatisticTable {
        pairs: pairs.clone(),
        r1: Vec::with_capacity(pairs.len()),
        r2: Vec::with_capacity(pairs.len()),
        u1: Vec::with_capacity(pairs.len()),
        u2: Vec::with_capacity(pairs.len()),
        t: Vec::with_capacity(pairs.len()),
        saturated: 0,
    };
    for seg in segments {
        table.r1.extend(seg.r1);
        table.r2.extend(seg.r2);
        table.u1.extend(seg.u1);
        table.u2.extend(seg.u2);
        table.t.extend(seg.t);
        table.saturated += seg.saturated;
    }
    Ok(table)
}

/// `|T|` for every pair, written into `out`; returns the saturation count.
/// Uses the same arithmetic as [`pair_statistics`].
pub(crate) fn abs_statistics_into(
    corr: &CorrelationPair,
    pairs: &PairSet,
    out: &mut [f64],
) -> usize {
    let mut saturated = 0;
    for (slot, (j, k)) in out.iter_mut().zip(pairs.iter()) {
        let (u1, s1) = fisher_transform_clamped(corr.r1[[j, k]]);
        let (u2, s2) = fisher_transform_clamped(corr.r2[[j, k]]);
        saturated += s1 as usize + s2 as usize;
        *slot = (u1 - u2).abs();
    }
    saturated
}
