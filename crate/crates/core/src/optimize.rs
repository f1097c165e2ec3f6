//! Validation-split tuning.
//!
//! The affinity-propagation preference is tuned by 1-D Bayesian
//! optimization of mean ARI: a Gaussian-process surrogate with a
//! squared-exponential kernel, hyperparameters picked from a small grid by
//! marginal likelihood, and expected improvement maximized over a dense
//! grid. The pairwise decision threshold is tuned by an exact sweep over
//! the midpoints of consecutive distinct similarities.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::prf_from_counts;

/// Jitter added to the kernel diagonal.
pub const JITTER: f64 = 1e-8;

/// Points in the initial Latin-hypercube design.
pub const INITIAL_DESIGN: usize = 5;

/// Acquisition grid resolution.
pub const ACQUISITION_GRID: usize = 512;

/// Default evaluation budget.
pub const DEFAULT_BUDGET: usize = 25;

/// 1-D Gaussian-process surrogate with a squared-exponential kernel.
#[derive(Debug, Clone)]
pub struct GpSurrogate {
    xs: Vec<f64>,
    ys: Vec<f64>,
    pub length_scale: f64,
    pub signal_var: f64,
    pub noise_var: f64,
    chol: Cholesky<f64, nalgebra::Dyn>,
    alpha: DVector<f64>,
}

impl GpSurrogate {
    /// Fit with fixed hyperparameters.
    pub fn fit(
        xs: &[f64],
        ys: &[f64],
        length_scale: f64,
        signal_var: f64,
        noise_var: f64,
    ) -> Result<Self> {
        if xs.is_empty() || xs.len() != ys.len() {
            return Err(Error::invalid("GP needs matching non-empty observations"));
        }
        let n = xs.len();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                k[(i, j)] = se_kernel(xs[i], xs[j], length_scale, signal_var);
            }
            k[(i, i)] += noise_var + JITTER;
        }
        let chol = k
            .clone()
            .cholesky()
            .ok_or_else(|| Error::invalid("GP kernel matrix is not positive definite"))?;
        let alpha = chol.solve(&DVector::from_column_slice(ys));
        Ok(GpSurrogate {
            xs: xs.to_vec(),
            ys: ys.to_vec(),
            length_scale,
            signal_var,
            noise_var,
            chol,
            alpha,
        })
    }

    /// Fit hyperparameters over a 3x3 grid of length-scale and signal
    /// variance by maximizing the log marginal likelihood.
    pub fn fit_grid(xs: &[f64], ys: &[f64], span: f64, noise_var: f64) -> Result<Self> {
        let y_var = variance(ys).max(1e-12);
        let mut best: Option<(f64, GpSurrogate)> = None;
        for ls_frac in [0.05, 0.15, 0.4] {
            for sv_scale in [0.5, 1.0, 2.0] {
                let gp = GpSurrogate::fit(
                    xs,
                    ys,
                    (span * ls_frac).max(1e-9),
                    y_var * sv_scale,
                    noise_var,
                )?;
                let lml = gp.log_marginal_likelihood();
                if best.as_ref().is_none_or(|(b, _)| lml > *b) {
                    best = Some((lml, gp));
                }
            }
        }
        Ok(best.unwrap().1)
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.xs.len() as f64;
        let y = DVector::from_column_slice(&self.ys);
        let fit_term = -0.5 * y.dot(&self.alpha);
        let log_det: f64 = self.chol.l().diagonal().iter().map(|d| d.ln()).sum();
        fit_term - log_det - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }

    /// Posterior mean and variance at `x`.
    pub fn posterior(&self, x: f64) -> (f64, f64) {
        let n = self.xs.len();
        let k_star = DVector::from_fn(n, |i, _| {
            se_kernel(self.xs[i], x, self.length_scale, self.signal_var)
        });
        let mean = k_star.dot(&self.alpha);
        let v = self.chol.solve(&k_star);
        let var = (self.signal_var - k_star.dot(&v)).max(0.0);
        (mean, var)
    }

    /// Expected improvement over `f_best` for maximization. Near-zero
    /// posterior variance (relative to the signal variance) gives 0, so an
    /// already-observed point cannot be re-acquired.
    pub fn expected_improvement(&self, x: f64, f_best: f64) -> f64 {
        let (mean, var) = self.posterior(x);
        if var < 1e-4 * self.signal_var {
            return 0.0;
        }
        let sd = var.sqrt();
        let z = (mean - f_best) / sd;
        let normal = Normal::new(0.0, 1.0).unwrap();
        ((mean - f_best) * normal.cdf(z) + sd * normal.pdf(z)).max(0.0)
    }
}

fn se_kernel(a: f64, b: f64, length_scale: f64, signal_var: f64) -> f64 {
    let d = (a - b) / length_scale;
    signal_var * (-0.5 * d * d).exp()
}

fn variance(ys: &[f64]) -> f64 {
    if ys.len() < 2 {
        return 0.0;
    }
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    ys.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / (ys.len() - 1) as f64
}

/// Outcome of preference tuning.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TuneOutcome {
    pub best_x: f64,
    pub best_y: f64,
    /// (iteration, x, y) in evaluation order.
    pub trace: Vec<(usize, f64, f64)>,
}

/// Maximize a black-box objective on `[lo, hi]` by GP expected improvement.
///
/// Starts from a 5-point Latin-hypercube design, then spends the remaining
/// budget maximizing EI on a 512-point grid. Non-finite objective values
/// are recorded as the worst observation so far and the loop continues.
/// Returns the argmax of the observed objective.
pub fn tune_preference<F>(
    mut objective: F,
    bounds: (f64, f64),
    budget: usize,
    seed: u64,
) -> Result<TuneOutcome>
where
    F: FnMut(f64) -> f64,
{
    let (lo, hi) = bounds;
    if !lo.is_finite() || !hi.is_finite() || lo >= hi {
        return Err(Error::invalid("bounds must be finite with lo < hi"));
    }
    if budget < INITIAL_DESIGN {
        return Err(Error::invalid(format!(
            "budget {budget} is below the initial design size {INITIAL_DESIGN}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs: Vec<f64> = Vec::with_capacity(budget);
    let mut ys: Vec<f64> = Vec::with_capacity(budget);
    let mut trace = Vec::with_capacity(budget);

    let record = |x: f64, xs: &mut Vec<f64>, ys: &mut Vec<f64>,
                      trace: &mut Vec<(usize, f64, f64)>,
                      objective: &mut F| {
        let raw = objective(x);
        let y = if raw.is_finite() {
            raw
        } else {
            // record as the worst observation so far
            ys.iter().cloned().fold(f64::INFINITY, f64::min).min(0.0) - 1.0
        };
        xs.push(x);
        ys.push(y);
        trace.push((trace.len(), x, y));
    };

    // Latin hypercube: one uniform draw per stratum, shuffled
    let mut strata: Vec<usize> = (0..INITIAL_DESIGN).collect();
    for i in (1..strata.len()).rev() {
        let j = rng.gen_range(0..=i);
        strata.swap(i, j);
    }
    let width = (hi - lo) / INITIAL_DESIGN as f64;
    for &s in &strata {
        let x = lo + width * (s as f64 + rng.gen_range(0.0..1.0));
        record(x, &mut xs, &mut ys, &mut trace, &mut objective);
    }

    let span = hi - lo;
    while xs.len() < budget {
        let gp = GpSurrogate::fit_grid(&xs, &ys, span, 0.0)?;
        let f_best = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut best_x = lo;
        let mut best_ei = f64::NEG_INFINITY;
        let mut best_mean = f64::NEG_INFINITY;
        for g in 0..ACQUISITION_GRID {
            let x = lo + span * g as f64 / (ACQUISITION_GRID - 1) as f64;
            let ei = gp.expected_improvement(x, f_best);
            if ei > best_ei {
                best_ei = ei;
                best_x = x;
            }
        }
        if best_ei <= 0.0 {
            // fully explored: fall back to the posterior mean argmax
            for g in 0..ACQUISITION_GRID {
                let x = lo + span * g as f64 / (ACQUISITION_GRID - 1) as f64;
                let (mean, _) = gp.posterior(x);
                if mean > best_mean {
                    best_mean = mean;
                    best_x = x;
                }
            }
        }
        record(best_x, &mut xs, &mut ys, &mut trace, &mut objective);
    }

    let mut best = 0usize;
    for i in 1..xs.len() {
        if ys[i] > ys[best] {
            best = i;
        }
    }
    Ok(TuneOutcome {
        best_x: xs[best],
        best_y: ys[best],
        trace,
    })
}

/// Default preference bounds from the validation off-diagonal similarities:
/// `[q01 - (q99 - q01), q50]`, padded when degenerate.
pub fn preference_bounds(off_diagonal: &[f64]) -> (f64, f64) {
    if off_diagonal.is_empty() {
        return (-1.0, 0.0);
    }
    let mut sorted = off_diagonal.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let q = |p: f64| -> f64 {
        let idx = ((sorted.len() - 1) as f64 * p).round() as usize;
        sorted[idx]
    };
    let (q01, q50, q99) = (q(0.01), q(0.5), q(0.99));
    let range = (q99 - q01).max(1e-6);
    let lo = q01 - range;
    let hi = q50;
    if hi - lo < 1e-9 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Best pairwise decision threshold on validation data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThresholdResult {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
}

/// Sweep all midpoints between consecutive distinct similarity values plus
/// sentinels below the minimum (predict everything) and at the maximum
/// (predict nothing, since prediction is strictly greater-than). Ties go to
/// higher precision, then to the lower threshold. Errors without a
/// gold-positive pair.
pub fn tune_threshold(pairs: &[(f64, bool)]) -> Result<ThresholdResult> {
    let gold_pos = pairs.iter().filter(|(_, g)| *g).count();
    if gold_pos == 0 {
        return Err(Error::invalid("no gold-positive pairs to tune against"));
    }

    let mut sorted: Vec<(f64, bool)> = pairs.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut distinct: Vec<f64> = sorted.iter().map(|(s, _)| *s).collect();
    distinct.dedup();

    let mut candidates = Vec::with_capacity(distinct.len() + 1);
    candidates.push(distinct[0]); // at the max: nothing predicted
    for w in distinct.windows(2) {
        candidates.push(0.5 * (w[0] + w[1]));
    }
    candidates.push(distinct[distinct.len() - 1] - 1.0); // below min: all predicted

    // descending candidate thresholds align with prefix counts over the
    // similarity-sorted pairs
    let mut best: Option<ThresholdResult> = None;
    for &ths in &candidates {
        let mut predicted = 0usize;
        let mut tp = 0usize;
        for &(s, g) in &sorted {
            if s > ths {
                predicted += 1;
                if g {
                    tp += 1;
                }
            } else {
                break;
            }
        }
        let (precision, recall, f_score) = prf_from_counts(tp, predicted, gold_pos);
        let candidate = ThresholdResult {
            threshold: ths,
            precision,
            recall,
            f_score,
        };
        let better = match &best {
            None => true,
            Some(b) => {
                candidate.f_score > b.f_score + 1e-15
                    || ((candidate.f_score - b.f_score).abs() <= 1e-15
                        && (candidate.precision > b.precision + 1e-15
                            || ((candidate.precision - b.precision).abs() <= 1e-15
                                && candidate.threshold < b.threshold)))
            }
        };
        if better {
            best = Some(candidate);
        }
    }
    Ok(best.unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn gp_interpolates_with_zero_noise() {
        let xs = [0.0, 0.3, 0.7, 1.0];
        let ys = [0.1, 0.5, 0.4, -0.2];
        let gp = GpSurrogate::fit(&xs, &ys, 0.2, 1.0, 0.0).unwrap();
        for (x, y) in xs.iter().zip(ys.iter()) {
            let (mean, _) = gp.posterior(*x);
            assert_abs_diff_eq!(mean, *y, epsilon = 1e-8);
        }
    }

    #[test]
    fn ei_vanishes_at_observed_points() {
        let xs = [0.0, 0.25, 0.5, 0.75, 1.0];
        let ys = [0.0, 0.2, 0.9, 0.3, 0.1];
        let gp = GpSurrogate::fit(&xs, &ys, 0.2, 1.0, 0.0).unwrap();
        let f_best = 0.9;
        for &x in &xs {
            let ei = gp.expected_improvement(x, f_best);
            assert!(ei.abs() <= 1e-12, "EI at observed {x} is {ei}");
        }
        // and is positive away from the data
        assert!(gp.expected_improvement(0.6, f_best) > 0.0);
    }

    #[test]
    fn optimizer_finds_quadratic_maximum() {
        let mut hits = 0;
        for seed in 0..10 {
            let out = tune_preference(|p| -(p - 0.3) * (p - 0.3), (0.0, 1.0), 20, seed).unwrap();
            if (out.best_x - 0.3).abs() < 0.05 {
                hits += 1;
            }
        }
        assert!(hits >= 9, "only {hits}/10 seeds found the optimum");
    }

    #[test]
    fn optimizer_stays_in_bounds_and_improves() {
        let out = tune_preference(|p| (p - 2.0).sin(), (-1.0, 4.0), 25, 3).unwrap();
        let mut best = f64::NEG_INFINITY;
        for &(_, x, y) in &out.trace {
            assert!((-1.0..=4.0).contains(&x), "x = {x} out of bounds");
            best = best.max(y);
            // best-so-far is non-decreasing by construction of max
        }
        assert_abs_diff_eq!(out.best_y, best, epsilon = 1e-12);
        assert_eq!(out.trace.len(), 25);
    }

    #[test]
    fn optimizer_survives_non_finite_objective() {
        let out = tune_preference(
            |p| if p < 0.5 { f64::NAN } else { -(p - 0.8) * (p - 0.8) },
            (0.0, 1.0),
            20,
            1,
        )
        .unwrap();
        assert!((out.best_x - 0.8).abs() < 0.1, "best_x = {}", out.best_x);
    }

    #[test]
    fn optimizer_rejects_tiny_budget() {
        assert!(tune_preference(|_| 0.0, (0.0, 1.0), 3, 0).is_err());
    }

    #[test]
    fn threshold_separable_case_picks_midpoint() {
        let pairs = vec![(0.9, true), (0.9, true), (0.1, false), (0.1, false)];
        let out = tune_threshold(&pairs).unwrap();
        assert_abs_diff_eq!(out.threshold, 0.5, epsilon = 1e-12);
        assert_eq!(out.f_score, 1.0);
    }

    #[test]
    fn threshold_all_positive_goes_below_min() {
        let pairs = vec![(0.5, true), (0.7, true)];
        let out = tune_threshold(&pairs).unwrap();
        assert!(out.threshold < 0.5);
        assert_eq!(out.f_score, 1.0);
    }

    #[test]
    fn threshold_inverted_scores_degenerate_optimum() {
        // positives all score LOWER than negatives
        let pairs = vec![
            (0.1, true),
            (0.2, true),
            (0.8, false),
            (0.9, false),
            (0.95, false),
        ];
        let out = tune_threshold(&pairs).unwrap();
        // best F is the all-predicted threshold: F = 2p/(p+1), p = 2/5
        let p = 2.0 / 5.0;
        assert_abs_diff_eq!(out.f_score, 2.0 * p / (p + 1.0), epsilon = 1e-12);
        assert!(out.threshold < 0.1);
    }

    #[test]
    fn threshold_errors_without_positives() {
        assert!(tune_threshold(&[(0.5, false)]).is_err());
    }

    #[test]
    fn threshold_sweep_matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..60 {
            let n = rng.gen_range(2..200);
            let pairs: Vec<(f64, bool)> = (0..n)
                .map(|_| {
                    let s = (rng.gen_range(0.0..1.0f64) * 8.0).round() / 8.0; // force ties
                    (s, rng.gen_bool(0.5))
                })
                .collect();
            if !pairs.iter().any(|(_, g)| *g) {
                continue;
            }
            let fast = tune_threshold(&pairs).unwrap();
            // oracle: evaluate F at every candidate threshold directly
            let mut cands: Vec<f64> = pairs.iter().map(|(s, _)| *s).collect();
            cands.sort_by(|a, b| a.total_cmp(b));
            cands.dedup();
            let mut all: Vec<f64> = vec![cands[0] - 1.0];
            for w in cands.windows(2) {
                all.push(0.5 * (w[0] + w[1]));
            }
            all.push(cands[cands.len() - 1]);
            let gold = pairs.iter().filter(|(_, g)| *g).count();
            let mut best_f = f64::NEG_INFINITY;
            for &t in &all {
                let pred: Vec<_> = pairs.iter().filter(|(s, _)| *s > t).collect();
                let tp = pred.iter().filter(|(_, g)| *g).count();
                let (_, _, f) = prf_from_counts(tp, pred.len(), gold);
                best_f = best_f.max(f);
            }
            assert_abs_diff_eq!(fast.f_score, best_f, epsilon = 1e-12);
        }
    }

    #[test]
    fn preference_bounds_span_low_to_median() {
        let sims: Vec<f64> = (0..100).map(|i| i as f64 / 100.0).collect();
        let (lo, hi) = preference_bounds(&sims);
        assert!(lo < 0.0);
        assert_abs_diff_eq!(hi, 0.5, epsilon = 0.02);
    }
}
