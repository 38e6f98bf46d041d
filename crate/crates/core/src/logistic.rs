//! Pairwise logistic-regression baseline.
//!
//! For each pair the model `logit P(class 1) = b0 + bj xj + bk xk + g xj xk`
//! is fit by Newton-Raphson and `g` is tested with a Wald statistic; the
//! resulting p-values are adjusted with the Benjamini-Hochberg step-up rule.

use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix4, Vector4};
use rayon::prelude::*;

use crate::data::{Class, ClassLabels, DataMatrix};
use crate::error::{Error, Result};
use crate::stats::PairSet;
use crate::tsv::{self, fmt_f64};

const MAX_ITERATIONS: usize = 50;
const MAX_HALVINGS: usize = 30;
const GRADIENT_TOL: f64 = 1e-8;
/// A linear predictor beyond this magnitude indicates (quasi-)separation.
const SEPARATION_ETA: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogisticFit {
    pub beta0: f64,
    pub beta_j: f64,
    pub beta_k: f64,
    pub gamma_jk: f64,
    pub se_gamma: f64,
    /// Two-sided Wald p-value for `gamma_jk`; 1 when separation was detected.
    pub p_value: f64,
    pub converged: bool,
    pub separated: bool,
    pub iterations: usize,
}

impl LogisticFit {
    pub fn flag(&self) -> &'static str {
        if self.separated {
            "separated"
        } else if !self.converged {
            "not-converged"
        } else {
            "ok"
        }
    }
}

struct Design {
    rows: Vec<[f64; 4]>,
    response: Vec<f64>,
}

struct Evaluation {
    loglik: f64,
    gradient: Vector4<f64>,
    hessian: Matrix4<f64>,
    max_eta: f64,
}

/// `ln(1 + e^x)` without overflow.
fn log1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Design {
    fn evaluate(&self, beta: &Vector4<f64>) -> Evaluation {
        let mut loglik = 0.0;
        let mut g = [0.0; 4];
        let mut h = [0.0; 10];
        let mut max_eta = 0.0_f64;
        for (x, &y) in self.rows.iter().zip(&self.response) {
            let eta = beta[0] * x[0] + beta[1] * x[1] + beta[2] * x[2] + beta[3] * x[3];
            max_eta = max_eta.max(eta.abs());
            let p = 1.0 / (1.0 + (-eta).exp());
            loglik += y * eta - log1p_exp(eta);
            let r = y - p;
            let w = p * (1.0 - p);
            let mut c = 0;
            for a in 0..4 {
                g[a] += r * x[a];
                let wx = w * x[a];
                for b in a..4 {
                    h[c] += wx * x[b];
                    c += 1;
                }
            }
        }
        let mut hessian = Matrix4::zeros();
        let mut c = 0;
        for a in 0..4 {
            for b in a..4 {
                hessian[(a, b)] = h[c];
                hessian[(b, a)] = h[c];
                c += 1;
            }
        }
        Evaluation {
            loglik,
            gradient: Vector4::from(g),
            hessian,
            max_eta,
        }
    }
}

fn moments(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
    (mean, sd)
}

/// Fits the four-parameter interaction model for one pair.
///
/// Predictors are standardized internally; coefficients and the standard
/// error of `gamma_jk` are reported on the original scale.
pub fn fit_pair_logistic(xj: &[f64], xk: &[f64], y: &ClassLabels) -> Result<LogisticFit> {
    if xj.len() != y.len() || xk.len() != y.len() {
        return Err(Error::Shape(format!(
            "columns of length {} and {} for {} labels",
            xj.len(),
            xk.len(),
            y.len()
        )));
    }
    if xj.iter().chain(xk).any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite predictor".into()));
    }
    let (mj, sj) = moments(xj);
    let (mk, sk) = moments(xk);
    if !(sj > 0.0 && sk > 0.0) {
        return Err(Error::DegenerateFeature(vec!["constant predictor".into()]));
    }
    let design = Design {
        rows: xj
            .iter()
            .zip(xk)
            .map(|(&a, &b)| {
                let u = (a - mj) / sj;
                let v = (b - mk) / sk;
                [1.0, u, v, u * v]
            })
            .collect(),
        response: y
            .iter()
            .map(|c| if c == Class::One { 1.0 } else { 0.0 })
            .collect(),
    };

    let mut beta = Vector4::zeros();
    let mut eval = design.evaluate(&beta);
    let mut iterations = 0;
    let mut converged = false;
    let mut separated = false;
    while iterations < MAX_ITERATIONS {
        if eval.gradient.amax() <= GRADIENT_TOL {
            converged = true;
            break;
        }
        let Some(chol) = eval.hessian.cholesky() else {
            separated = true;
            break;
        };
        iterations += 1;
        let mut step = chol.solve(&eval.gradient);
        let mut next = design.evaluate(&(beta + step));
        // near the optimum the log-likelihood change drowns in rounding
        let slack = 1e-12 * (1.0 + eval.loglik.abs());
        let mut halvings = 0;
        while !(next.loglik >= eval.loglik - slack) && halvings < MAX_HALVINGS {
            step *= 0.5;
            next = design.evaluate(&(beta + step));
            halvings += 1;
        }
        if !(next.loglik >= eval.loglik - slack) {
            break;
        }
        beta += step;
        eval = next;
        if eval.max_eta > SEPARATION_ETA || beta.amax() > 1e6 {
            separated = true;
            break;
        }
    }
    if !converged && !separated && eval.gradient.amax() <= GRADIENT_TOL {
        converged = true;
    }

    let var_gamma_std = eval
        .hessian
        .cholesky()
        .map(|c| c.inverse()[(3, 3)])
        .unwrap_or(f64::INFINITY);
    let se_std = var_gamma_std.sqrt();
    let p_value = if separated || !se_std.is_finite() {
        separated = true;
        1.0
    } else {
        let z = beta[3] / se_std;
        statrs::function::erf::erfc(z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
    };

    let scale = sj * sk;
    let gamma = beta[3] / scale;
    Ok(LogisticFit {
        beta0: beta[0] - beta[1] * mj / sj - beta[2] * mk / sk + gamma * mj * mk,
        beta_j: beta[1] / sj - gamma * mk,
        beta_k: beta[2] / sk - gamma * mj,
        gamma_jk: gamma,
        se_gamma: se_std / scale,
        p_value,
        converged: converged && !separated,
        separated,
        iterations,
    })
}

/// Benjamini-Hochberg adjustment, reported in ascending p-value order.
#[derive(Debug, Clone, PartialEq)]
pub struct BhResult {
    /// Input indices sorted by p-value (ties by index).
    pub order: Vec<usize>,
    pub sorted: Vec<f64>,
    /// Step-up adjusted values, `min_{i' >= i} p(i') m / i'`, capped at 1.
    pub adjusted: Vec<f64>,
    /// Unmonotonized per-rank estimate `p(i) m / i`, capped at 1.
    pub rank_fdr: Vec<f64>,
}

impl BhResult {
    pub fn adjusted_in_input_order(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.order.len()];
        for (&i, &a) in self.order.iter().zip(&self.adjusted) {
            out[i] = a;
        }
        out
    }
}

pub fn bh_fdr(pvalues: &[f64]) -> Result<BhResult> {
    if let Some(p) = pvalues.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Domain(format!("p-value {p} outside [0, 1]")));
    }
    let m = pvalues.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| pvalues[a].total_cmp(&pvalues[b]).then(a.cmp(&b)));
    let sorted: Vec<f64> = order.iter().map(|&i| pvalues[i]).collect();
    let rank_fdr: Vec<f64> = sorted
        .iter()
        .enumerate()
        .map(|(i, &p)| (p * (m as f64 / (i + 1) as f64)).min(1.0))
        .collect();
    let mut adjusted = rank_fdr.clone();
    for i in (0..m.saturating_sub(1)).rev() {
        adjusted[i] = adjusted[i].min(adjusted[i + 1]);
    }
    Ok(BhResult {
        order,
        sorted,
        adjusted,
        rank_fdr,
    })
}

/// One row of the baseline report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairFit {
    pub j: usize,
    pub k: usize,
    pub fit: LogisticFit,
}

/// Fits every pair in parallel; output follows the pair order.
pub fn fit_all_pairs(x: &DataMatrix, y: &ClassLabels, pairs: &PairSet) -> Result<Vec<PairFit>> {
    y.check_samples(x.n_samples())?;
    let columns: Vec<Vec<f64>> = (0..x.n_features()).map(|j| x.column(j).to_vec()).collect();
    let list: Vec<(usize, usize)> = pairs.iter().collect();
    list.par_iter()
        .map(|&(j, k)| {
            fit_pair_logistic(&columns[j], &columns[k], y).map(|fit| PairFit { j, k, fit })
        })
        .collect()
}

/// Writes `feature_j, feature_k, gamma_hat, se, p_value, bh_adjusted, flags`.
pub fn write_baseline_tsv(
    fits: &[PairFit],
    names: &[String],
    header: &[(String, String)],
    path: &Path,
) -> Result<()> {
    let pvalues: Vec<f64> = fits.iter().map(|f| f.fit.p_value).collect();
    let adjusted = bh_fdr(&pvalues)?.adjusted_in_input_order();
    let mut out = tsv::create(path)?;
    let io = |e| Error::io(path, e);
    tsv::write_header(&mut out, header).map_err(io)?;
    writeln!(out, "feature_j\tfeature_k\tgamma_hat\tse\tp_value\tbh_adjusted\tflags").map_err(io)?;
    for (f, adj) in fits.iter().zip(adjusted) {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            names[f.j],
            names[f.k],
            fmt_f64(f.fit.gamma_jk),
            fmt_f64(f.fit.se_gamma),
            fmt_f64(f.fit.p_value),
            fmt_f64(adj),
            f.fit.flag()
        )
        .map_err(io)?;
    }
    out.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn labels_from(response: &[bool]) -> ClassLabels {
        ClassLabels::new(
            response
                .iter()
                .map(|&r| if r { Class::One } else { Class::Two })
                .collect(),
        )
        .unwrap()
    }

    /// Draws from the interaction model itself.
    fn generate(n: usize, coef: [f64; 4], rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>, ClassLabels) {
        let xj: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let xk: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let response: Vec<bool> = xj
            .iter()
            .zip(&xk)
            .map(|(a, b)| {
                let eta = coef[0] + coef[1] * a + coef[2] * b + coef[3] * a * b;
                rng.random::<f64>() < 1.0 / (1.0 + (-eta).exp())
            })
            .collect();
        (xj, xk, labels_from(&response))
    }

    fn score_original_scale(xj: &[f64], xk: &[f64], y: &ClassLabels, fit: &LogisticFit) -> f64 {
        let mut g = [0.0; 4];
        for i in 0..xj.len() {
            let x = [1.0, xj[i], xk[i], xj[i] * xk[i]];
            let eta = fit.beta0 + fit.beta_j * x[1] + fit.beta_k * x[2] + fit.gamma_jk * x[3];
            let p = 1.0 / (1.0 + (-eta).exp());
            let r = if y.get(i) == Class::One { 1.0 } else { 0.0 } - p;
            for a in 0..4 {
                g[a] += r * x[a];
            }
        }
        g.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    #[test]
    fn converged_fit_solves_score_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (xj, xk, y) = generate(400, [0.2, 0.5, -0.3, 0.4], &mut rng);
        let fit = fit_pair_logistic(&xj, &xk, &y).unwrap();
        assert!(fit.converged);
        assert!(fit.iterations < 15);
        assert!(score_original_scale(&xj, &xk, &y, &fit) <= 1e-8);
        assert!((0.0..=1.0).contains(&fit.p_value));
    }

    #[test]
    fn perfectly_separated_pair_is_flagged() {
        let xj = [-2.0, -1.5, -1.0, -0.5, 0.5, 1.0, 1.5, 2.0, -0.7, 0.9];
        let xk = [0.3, -0.2, 0.8, 0.1, -0.4, 0.6, 0.2, -0.9, 0.5, -0.1];
        let response: Vec<bool> = xj.iter().map(|&v| v > 0.0).collect();
        let fit = fit_pair_logistic(&xj, &xk, &labels_from(&response)).unwrap();
        assert!(fit.separated);
        assert!(!fit.converged);
        assert_eq!(fit.p_value, 1.0);
        assert_eq!(fit.flag(), "separated");
    }

    #[test]
    fn gamma_recovered_from_generative_model() {
        let mut covered = 0;
        for rep in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + rep);
            let (xj, xk, y) = generate(2000, [0.1, 0.3, -0.2, 0.5], &mut rng);
            let fit = fit_pair_logistic(&xj, &xk, &y).unwrap();
            if (fit.gamma_jk - 0.5).abs() <= 3.0 * fit.se_gamma {
                covered += 1;
            }
        }
        assert!(covered >= 95, "covered {covered}/100");
    }

    #[test]
    fn null_p_values_are_uniform() {
        let mut p: Vec<f64> = (0..500)
            .map(|rep| {
                let mut rng = ChaCha8Rng::seed_from_u64(5000 + rep);
                let (xj, xk, y) = generate(500, [0.0; 4], &mut rng);
                fit_pair_logistic(&xj, &xk, &y).unwrap().p_value
            })
            .collect();
        p.sort_by(f64::total_cmp);
        let m = p.len() as f64;
        let ks = p
            .iter()
            .enumerate()
            .map(|(i, &v)| ((i + 1) as f64 / m - v).abs().max((v - i as f64 / m).abs()))
            .fold(0.0_f64, f64::max);
        assert!(ks < 0.08, "KS statistic {ks}");
    }

    #[test]
    fn bh_step_up_example() {
        let r = bh_fdr(&[0.01, 0.02, 0.9]).unwrap();
        let expect = [0.03, 0.03, 0.9];
        for (a, b) in r.adjusted.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        let r = bh_fdr(&[0.4; 5]).unwrap();
        assert!(r.adjusted.iter().all(|&a| (a - 0.4).abs() < 1e-15));
        assert!(matches!(bh_fdr(&[0.5, 1.2]), Err(Error::Domain(_))));
        assert!(matches!(bh_fdr(&[f64::NAN]), Err(Error::Domain(_))));
    }

    #[test]
    fn bh_input_order_mapping() {
        let r = bh_fdr(&[0.9, 0.01, 0.02]).unwrap();
        assert_eq!(r.order, vec![1, 2, 0]);
        let adj = r.adjusted_in_input_order();
        assert!((adj[0] - 0.9).abs() < 1e-15);
        assert!((adj[1] - 0.03).abs() < 1e-15);
    }

    #[test]
    fn many_uniform_p_values_give_no_discoveries() {
        let m = 219_453;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
        let r = bh_fdr(&p).unwrap();
        // m * min(p) is Exp(1); below 0.05 with probability about 0.05
        assert!(r.rank_fdr[0] > 0.05);
        assert!(r.adjusted[0] > 0.05, "{}", r.adjusted[0]);
    }

    #[test]
    fn bh_controls_fdr_on_null_uniforms() {
        let mut false_rate = 0.0;
        let reps = 200;
        for rep in 0..reps {
            let mut rng = ChaCha8Rng::seed_from_u64(rep);
            let p: Vec<f64> = (0..1000).map(|_| rng.random::<f64>()).collect();
            let r = bh_fdr(&p).unwrap();
            // all hypotheses are null: any rejection makes FDP = 1
            if r.adjusted.iter().any(|&a| a <= 0.1) {
                false_rate += 1.0;
            }
        }
        assert!(false_rate / reps as f64 <= 0.15);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn bh_adjusted_is_monotone(p in proptest::collection::vec(0.0f64..=1.0, 1..60)) {
            let r = bh_fdr(&p).unwrap();
            for w in r.adjusted.windows(2) {
                prop_assert!(w[0] <= w[1]);
            }
            for (&a, &s) in r.adjusted.iter().zip(&r.sorted) {
                prop_assert!(a >= s && a <= 1.0);
            }
        }

        #[test]
        fn label_swap_negates_coefficients(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (xj, xk, y) = generate(120, [0.3, 0.4, -0.2, 0.3], &mut rng);
            let a = fit_pair_logistic(&xj, &xk, &y).unwrap();
            let b = fit_pair_logistic(&xj, &xk, &y.swapped()).unwrap();
            prop_assume!(a.converged && b.converged);
            prop_assert!((a.gamma_jk + b.gamma_jk).abs() <= 1e-9);
            prop_assert!((a.beta0 + b.beta0).abs() <= 1e-9);
            prop_assert!((a.beta_j + b.beta_j).abs() <= 1e-9);
            prop_assert!((a.beta_k + b.beta_k).abs() <= 1e-9);
            prop_assert!((a.p_value - b.p_value).abs() <= 1e-8);
        }
    }
}
