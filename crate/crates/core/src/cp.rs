//! Linear one-step airspeed predictor with split-conformal calibration and
//! K-step interval propagation.
//!
//! The predictor is `V_{t+1} = a V_t + b pow_t + c u_t + d`, fit by least
//! squares on rollout transitions. Split conformal prediction turns held-out
//! absolute residuals into a distribution-free interval half-width: with the
//! finite-sample rank `ceil((n+1)(1-delta))`, the interval `V_hat +/- q`
//! covers the next airspeed with probability at least `1 - delta`. A scalar
//! inflation factor (default 1) widens intervals for robustness to mild
//! distribution shift.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Env, EnvConfig, EnvError};
use crate::rl::PolicyParams;
use crate::scalar::{real, Real};

#[derive(Debug, Error)]
pub enum CpError {
    #[error("need at least {need} rows to fit, got {got}")]
    TooFewRows { need: usize, got: usize },
    #[error("design matrix is rank deficient: column `{column}` is linearly dependent on the others")]
    RankDeficient { column: &'static str },
    #[error("miscoverage delta must lie in (0,1), got {0}")]
    BadDelta(f64),
    #[error("no residuals to calibrate on")]
    NoResiduals,
    #[error("inflation factor must be >= 1 and finite, got {0}")]
    BadInflation(f64),
    #[error(
        "calibrated quantile is infinite (n_cal={n_cal}, delta={delta}); recalibrate with more data or larger delta"
    )]
    NeedsRecalibration { n_cal: usize, delta: f64 },
    #[error("lookahead horizon must be >= 1")]
    BadHorizon,
    #[error("endpoint propagation requires a >= 0, got a={0}")]
    UnsupportedCoefficient(f64),
    #[error("fit and calibration splits must both be non-empty")]
    EmptySplit,
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// One observed transition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionRow<T> {
    pub v: T,
    pub pow: T,
    pub u: T,
    pub v_next: T,
}

/// Transition rows with a by-episode fit/calibration split. Splitting by
/// episode (not by row) keeps within-episode correlation out of the
/// calibration set.
#[derive(Debug, Clone)]
pub struct TransitionDataset<T> {
    pub rows: Vec<TransitionRow<T>>,
    pub fit_idx: Vec<usize>,
    pub cal_idx: Vec<usize>,
}

impl<T: Real> TransitionDataset<T> {
    /// Alternates whole episodes between the fit and calibration splits.
    pub fn from_episodes(episodes: Vec<Vec<TransitionRow<T>>>) -> Result<Self, CpError> {
        let mut rows = Vec::new();
        let mut fit_idx = Vec::new();
        let mut cal_idx = Vec::new();
        for (e, episode) in episodes.into_iter().enumerate() {
            for row in episode {
                let idx = rows.len();
                rows.push(row);
                if e % 2 == 0 {
                    fit_idx.push(idx);
                } else {
                    cal_idx.push(idx);
                }
            }
        }
        if fit_idx.is_empty() || cal_idx.is_empty() {
            return Err(CpError::EmptySplit);
        }
        Ok(Self {
            rows,
            fit_idx,
            cal_idx,
        })
    }

    pub fn fit_rows(&self) -> Vec<TransitionRow<T>> {
        self.fit_idx.iter().map(|&i| self.rows[i]).collect()
    }

    pub fn cal_rows(&self) -> Vec<TransitionRow<T>> {
        self.cal_idx.iter().map(|&i| self.rows[i]).collect()
    }
}

/// Coefficients of the one-step airspeed model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearPredictor<T> {
    pub a: T,
    pub b: T,
    pub c: T,
    pub d: T,
}

impl<T: Real> LinearPredictor<T> {
    pub fn predict(&self, v: T, pow: T, u: T) -> T {
        self.a * v + self.b * pow + self.c * u + self.d
    }
}

/// Split-conformal calibration output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult<T> {
    /// Residual quantile (ft/s).
    pub q: T,
    /// Miscoverage level.
    pub delta: T,
    /// Calibration sample count.
    pub n_cal: usize,
    /// Multiplicative robustness inflation, >= 1.
    pub inflation: T,
}

impl<T: Real> CalibrationResult<T> {
    /// Interval half-width actually used: `q * inflation`.
    pub fn effective_q(&self) -> T {
        self.q * self.inflation
    }
}

/// Column labels of the design matrix, intercept first so that a constant
/// regressor is flagged by its own name rather than by the intercept.
const COLUMNS: [&str; 4] = ["intercept", "V", "pow", "u"];
const NCOLS: usize = 4;

/// Exact least-squares fit of the one-step model via Householder QR.
pub fn fit_predictor<T: Real>(rows: &[TransitionRow<T>]) -> Result<LinearPredictor<T>, CpError> {
    let n = rows.len();
    if n < NCOLS {
        return Err(CpError::TooFewRows { need: NCOLS, got: n });
    }
    // Design matrix [1, V, pow, u], row-major.
    let mut a = Vec::with_capacity(n * NCOLS);
    let mut y = Vec::with_capacity(n);
    for r in rows {
        a.extend_from_slice(&[T::one(), r.v, r.pow, r.u]);
        y.push(r.v_next);
    }

    // Largest initial column norm sets the rank-deficiency scale.
    let mut max_col_norm = T::zero();
    for j in 0..NCOLS {
        let norm = (0..n)
            .map(|i| a[i * NCOLS + j] * a[i * NCOLS + j])
            .sum::<T>()
            .sqrt();
        max_col_norm = max_col_norm.max(norm);
    }
    let rank_tol = max_col_norm * real::<T>(1e-10);

    for k in 0..NCOLS {
        let norm = (k..n)
            .map(|i| a[i * NCOLS + k] * a[i * NCOLS + k])
            .sum::<T>()
            .sqrt();
        if norm <= rank_tol {
            return Err(CpError::RankDeficient { column: COLUMNS[k] });
        }
        let pivot = a[k * NCOLS + k];
        let alpha = if pivot >= T::zero() { -norm } else { norm };
        // Householder vector v = x - alpha e1, stored locally.
        let mut v = vec![T::zero(); n - k];
        for i in k..n {
            v[i - k] = a[i * NCOLS + k];
        }
        v[0] = v[0] - alpha;
        let vtv = v.iter().map(|&x| x * x).sum::<T>();
        if vtv > T::zero() {
            let two = real::<T>(2.0);
            for j in k..NCOLS {
                let dot = (k..n).map(|i| v[i - k] * a[i * NCOLS + j]).sum::<T>();
                let scale = two * dot / vtv;
                for i in k..n {
                    a[i * NCOLS + j] = a[i * NCOLS + j] - scale * v[i - k];
                }
            }
            let dot = (k..n).map(|i| v[i - k] * y[i]).sum::<T>();
            let scale = two * dot / vtv;
            for i in k..n {
                y[i] = y[i] - scale * v[i - k];
            }
        }
        a[k * NCOLS + k] = alpha;
        for i in (k + 1)..n {
            a[i * NCOLS + k] = T::zero();
        }
    }

    // Back-substitution on the upper-triangular system.
    let mut beta = [T::zero(); NCOLS];
    for k in (0..NCOLS).rev() {
        let mut acc = y[k];
        for j in (k + 1)..NCOLS {
            acc = acc - a[k * NCOLS + j] * beta[j];
        }
        let diag = a[k * NCOLS + k];
        if diag.abs() <= rank_tol {
            return Err(CpError::RankDeficient { column: COLUMNS[k] });
        }
        beta[k] = acc / diag;
    }

    let fitted = LinearPredictor {
        d: beta[0],
        a: beta[1],
        b: beta[2],
        c: beta[3],
    };
    if !(fitted.a > T::zero() && fitted.a < real(1.1)) {
        log::warn!(
            "fitted airspeed coefficient a = {} outside the stable-plant range (0, 1.1)",
            fitted.a
        );
    }
    Ok(fitted)
}

/// Finite-sample split-CP quantile: the `ceil((n+1)(1-delta))`-th smallest
/// absolute residual, or +inf when that rank exceeds `n`.
pub fn conformal_quantile<T: Real>(residuals: &[T], delta: T) -> Result<T, CpError> {
    if residuals.is_empty() {
        return Err(CpError::NoResiduals);
    }
    let delta_f = delta.to_f64().unwrap_or(f64::NAN);
    if !(delta_f > 0.0 && delta_f < 1.0) {
        return Err(CpError::BadDelta(delta_f));
    }
    let n = residuals.len();
    let rank = (((n + 1) as f64) * (1.0 - delta_f) - 1e-9).ceil() as usize;
    if rank > n {
        return Ok(T::infinity());
    }
    let mut sorted: Vec<T> = residuals.iter().map(|r| r.abs()).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("residuals must not be NaN"));
    Ok(sorted[rank - 1])
}

/// Calibrates the residual quantile of `predictor` on held-out rows.
pub fn calibrate<T: Real>(
    predictor: &LinearPredictor<T>,
    cal_rows: &[TransitionRow<T>],
    delta: T,
    inflation: T,
) -> Result<CalibrationResult<T>, CpError> {
    if !(inflation >= T::one()) || !inflation.is_finite() {
        return Err(CpError::BadInflation(inflation.to_f64().unwrap_or(f64::NAN)));
    }
    let residuals: Vec<T> = cal_rows
        .iter()
        .map(|r| (r.v_next - predictor.predict(r.v, r.pow, r.u)).abs())
        .collect();
    let q = conformal_quantile(&residuals, delta)?;
    Ok(CalibrationResult {
        q,
        delta,
        n_cal: cal_rows.len(),
        inflation,
    })
}

/// One-step prediction interval `[V_hat - q~, V_hat + q~]` with
/// `q~ = inflation * q`.
pub fn predict_interval<T: Real>(
    predictor: &LinearPredictor<T>,
    cal: &CalibrationResult<T>,
    v: T,
    pow: T,
    u: T,
) -> Result<(T, T), CpError> {
    let q = cal.effective_q();
    if !q.is_finite() {
        return Err(CpError::NeedsRecalibration {
            n_cal: cal.n_cal,
            delta: cal.delta.to_f64().unwrap_or(f64::NAN),
        });
    }
    let center = predictor.predict(v, pow, u);
    Ok((center - q, center + q))
}

/// Propagates the prediction interval over `k` steps under a constant
/// candidate throttle. Both endpoints are mapped through the predictor and
/// widened by the calibrated half-width each step, which is exact for
/// `a >= 0`; engine power follows the supplied deterministic lag recursion.
/// Interval `j` (0-based) bounds the airspeed `j + 1` steps ahead.
pub fn rollout_intervals<T: Real, F: Fn(T) -> T>(
    predictor: &LinearPredictor<T>,
    cal: &CalibrationResult<T>,
    v0: T,
    pow0: T,
    u: T,
    k: usize,
    pow_step: F,
) -> Result<Vec<(T, T)>, CpError> {
    if k == 0 {
        return Err(CpError::BadHorizon);
    }
    if predictor.a < T::zero() {
        return Err(CpError::UnsupportedCoefficient(
            predictor.a.to_f64().unwrap_or(f64::NAN),
        ));
    }
    let q = cal.effective_q();
    if !q.is_finite() {
        return Err(CpError::NeedsRecalibration {
            n_cal: cal.n_cal,
            delta: cal.delta.to_f64().unwrap_or(f64::NAN),
        });
    }
    let mut out = Vec::with_capacity(k);
    let mut lo = v0;
    let mut hi = v0;
    let mut pow = pow0;
    for _ in 0..k {
        let lo_next = predictor.predict(lo, pow, u) - q;
        let hi_next = predictor.predict(hi, pow, u) + q;
        out.push((lo_next, hi_next));
        lo = lo_next;
        hi = hi_next;
        pow = pow_step(pow);
    }
    Ok(out)
}

/// Runs the deterministic policy for `episodes` nominal episodes and records
/// every transition, one inner vector per episode.
pub fn collect_transitions<T: Real>(
    cfg: &EnvConfig<T>,
    policy: &PolicyParams<T>,
    episodes: usize,
    base_seed: u64,
) -> Result<Vec<Vec<TransitionRow<T>>>, CpError> {
    let mut out = Vec::with_capacity(episodes);
    for e in 0..episodes {
        let mut c = cfg.clone();
        c.seed = base_seed.wrapping_add(e as u64);
        let (mut env, mut obs) = Env::reset(c)?;
        let mut rows = Vec::new();
        loop {
            let state = env.state();
            let u = policy.act_deterministic(&obs.as_array());
            let (next_obs, _, done, rec) = env.step(u)?;
            rows.push(TransitionRow {
                v: state.v,
                pow: state.pow,
                u: rec.action_applied,
                v_next: rec.v,
            });
            obs = next_obs;
            if done {
                break;
            }
        }
        out.push(rows);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn synthetic_rows(truth: LinearPredictor<f64>, n: usize, seed: u64) -> Vec<TransitionRow<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let v = rng.gen_range(400.0..600.0);
                let pow = rng.gen_range(0.0..100.0);
                let u = rng.gen_range(0.0..1.0);
                TransitionRow {
                    v,
                    pow,
                    u,
                    v_next: truth.predict(v, pow, u),
                }
            })
            .collect()
    }

    #[test]
    fn exact_linear_data_is_recovered() {
        let truth = LinearPredictor {
            a: 0.97,
            b: 0.02,
            c: 0.5,
            d: 1.0,
        };
        let rows = synthetic_rows(truth, 200, 1);
        let fit = fit_predictor(&rows).unwrap();
        assert!((fit.a - truth.a).abs() < 1e-9, "a={}", fit.a);
        assert!((fit.b - truth.b).abs() < 1e-9);
        assert!((fit.c - truth.c).abs() < 1e-9);
        assert!((fit.d - truth.d).abs() < 1e-9);
    }

    #[test]
    fn constant_throttle_column_is_flagged() {
        let mut rows = synthetic_rows(
            LinearPredictor {
                a: 0.97,
                b: 0.02,
                c: 0.5,
                d: 1.0,
            },
            100,
            2,
        );
        for r in &mut rows {
            r.u = 0.5;
        }
        match fit_predictor(&rows) {
            Err(CpError::RankDeficient { column }) => assert_eq!(column, "u"),
            other => panic!("expected rank deficiency on u, got {other:?}"),
        }
    }

    #[test]
    fn too_few_rows_is_an_error() {
        let rows = synthetic_rows(
            LinearPredictor {
                a: 1.0,
                b: 0.0,
                c: 0.0,
                d: 0.0,
            },
            3,
            3,
        );
        assert!(matches!(
            fit_predictor(&rows),
            Err(CpError::TooFewRows { .. })
        ));
    }

    #[test]
    fn quantile_hand_ranked_list() {
        // Residuals 1..9 with delta = 0.30: rank ceil(10 * 0.7) = 7.
        let residuals: Vec<f64> = (1..=9).map(|k| k as f64).collect();
        let q = conformal_quantile(&residuals, 0.30).unwrap();
        assert_eq!(q, 7.0);
    }

    #[test]
    fn quantile_insufficient_data_is_infinite() {
        let q = conformal_quantile(&[0.5f64], 0.30).unwrap();
        assert!(q.is_infinite());
    }

    #[test]
    fn quantile_of_constant_list_is_the_constant() {
        for delta in [0.1, 0.3, 0.5, 0.9] {
            let q = conformal_quantile(&vec![2.5f64; 40], delta).unwrap();
            assert_eq!(q, 2.5, "delta={delta}");
        }
    }

    #[test]
    fn quantile_is_monotone_in_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let residuals: Vec<f64> = (0..200).map(|_| rng.gen_range(0.0..5.0)).collect();
        let mut last = 0.0;
        for delta in [0.9, 0.7, 0.5, 0.3, 0.1, 0.05] {
            let q = conformal_quantile(&residuals, delta).unwrap();
            assert!(q >= last, "q({delta}) = {q} < {last}");
            last = q;
        }
    }

    #[test]
    fn interval_scales_linearly_with_inflation() {
        let p = LinearPredictor {
            a: 0.9,
            b: 0.1,
            c: 1.0,
            d: 2.0,
        };
        let base = CalibrationResult {
            q: 1.5,
            delta: 0.3,
            n_cal: 100,
            inflation: 1.0,
        };
        let doubled = CalibrationResult {
            inflation: 2.0,
            ..base
        };
        let (lo1, hi1) = predict_interval(&p, &base, 500.0, 50.0, 0.5).unwrap();
        let (lo2, hi2) = predict_interval(&p, &doubled, 500.0, 50.0, 0.5).unwrap();
        assert!(((hi2 - lo2) - 2.0 * (hi1 - lo1)).abs() < 1e-12);
        // Nesting: the inflated interval contains the base one.
        assert!(lo2 <= lo1 && hi1 <= hi2);
    }

    #[test]
    fn zero_quantile_gives_degenerate_interval() {
        let p = LinearPredictor {
            a: 0.9,
            b: 0.1,
            c: 1.0,
            d: 2.0,
        };
        let cal = CalibrationResult {
            q: 0.0,
            delta: 0.3,
            n_cal: 100,
            inflation: 1.0,
        };
        let (lo, hi) = predict_interval(&p, &cal, 500.0, 50.0, 0.5).unwrap();
        assert_eq!(lo, hi);
        assert_eq!(lo, p.predict(500.0, 50.0, 0.5));
    }

    #[test]
    fn infinite_quantile_demands_recalibration() {
        let p = LinearPredictor {
            a: 0.9,
            b: 0.1,
            c: 1.0,
            d: 2.0,
        };
        let cal = CalibrationResult {
            q: f64::INFINITY,
            delta: 0.3,
            n_cal: 1,
            inflation: 1.0,
        };
        assert!(matches!(
            predict_interval(&p, &cal, 500.0, 50.0, 0.5),
            Err(CpError::NeedsRecalibration { .. })
        ));
        assert!(matches!(
            rollout_intervals(&p, &cal, 500.0, 50.0, 0.5, 3, |p| p),
            Err(CpError::NeedsRecalibration { .. })
        ));
    }

    #[test]
    fn rollout_collapses_to_exact_recursion_when_q_is_zero() {
        let truth = LinearPredictor {
            a: 0.95,
            b: 0.05,
            c: 0.3,
            d: 0.7,
        };
        let cal = CalibrationResult {
            q: 0.0,
            delta: 0.3,
            n_cal: 100,
            inflation: 1.0,
        };
        let pow_step = |p: f64| 0.9 * p + 5.0;
        let out = rollout_intervals(&truth, &cal, 480.0, 40.0, 0.6, 5, pow_step).unwrap();
        let mut v = 480.0;
        let mut pow = 40.0;
        for (k, &(lo, hi)) in out.iter().enumerate() {
            v = truth.predict(v, pow, 0.6);
            pow = pow_step(pow);
            assert_eq!(lo, hi, "step {k}");
            assert!((lo - v).abs() < 1e-12, "step {k}: {lo} vs {v}");
        }
    }

    #[test]
    fn rollout_widths_follow_the_geometric_sum() {
        // a = 0.9, q~ = 1: width after 3 steps is 2(1 + 0.9 + 0.81) = 5.42.
        let p = LinearPredictor {
            a: 0.9,
            b: 0.0,
            c: 0.0,
            d: 0.0,
        };
        let cal = CalibrationResult {
            q: 1.0,
            delta: 0.3,
            n_cal: 100,
            inflation: 1.0,
        };
        let out = rollout_intervals(&p, &cal, 100.0, 50.0, 0.5, 3, |p| p).unwrap();
        let widths: Vec<f64> = out.iter().map(|&(lo, hi)| hi - lo).collect();
        assert!((widths[0] - 2.0).abs() < 1e-12);
        assert!((widths[1] - 3.8).abs() < 1e-12);
        assert!((widths[2] - 5.42).abs() < 1e-12);
    }

    #[test]
    fn single_step_rollout_matches_predict_interval() {
        let p = LinearPredictor {
            a: 0.9,
            b: 0.1,
            c: 1.0,
            d: 2.0,
        };
        let cal = CalibrationResult {
            q: 0.8,
            delta: 0.3,
            n_cal: 100,
            inflation: 1.3,
        };
        let single = rollout_intervals(&p, &cal, 500.0, 50.0, 0.5, 1, |p| p).unwrap();
        let direct = predict_interval(&p, &cal, 500.0, 50.0, 0.5).unwrap();
        assert_eq!(single[0], direct);
    }

    #[test]
    fn negative_airspeed_coefficient_is_unsupported() {
        let p = LinearPredictor {
            a: -0.2,
            b: 0.0,
            c: 0.0,
            d: 0.0,
        };
        let cal = CalibrationResult {
            q: 1.0,
            delta: 0.3,
            n_cal: 100,
            inflation: 1.0,
        };
        assert!(matches!(
            rollout_intervals(&p, &cal, 500.0, 50.0, 0.5, 3, |p| p),
            Err(CpError::UnsupportedCoefficient(_))
        ));
    }

    #[test]
    fn interval_nesting_along_a_rollout() {
        let p = LinearPredictor {
            a: 0.9,
            b: 0.05,
            c: 0.2,
            d: 1.0,
        };
        let narrow = CalibrationResult {
            q: 0.5,
            delta: 0.3,
            n_cal: 100,
            inflation: 1.0,
        };
        let wide = CalibrationResult {
            inflation: 1.7,
            ..narrow
        };
        let a = rollout_intervals(&p, &narrow, 500.0, 50.0, 0.5, 6, |x| 0.9 * x).unwrap();
        let b = rollout_intervals(&p, &wide, 500.0, 50.0, 0.5, 6, |x| 0.9 * x).unwrap();
        for (k, (&(lo1, hi1), &(lo2, hi2))) in a.iter().zip(&b).enumerate() {
            assert!(lo2 <= lo1 && hi1 <= hi2, "step {k} not nested");
        }
    }

    #[test]
    fn plant_transitions_fit_with_small_residuals() {
        // Exciting throttle schedule around trim; the linear one-step model
        // must track the mildly nonlinear plant within 1 ft/s RMS.
        use crate::plant::{self, PlantParams};
        let params = PlantParams::<f64>::default();
        let (mut state, u_trim) = plant::trim(500.0, &params).unwrap();
        let mut rows = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut u = u_trim;
        for _ in 0..4000 {
            u = (u + rng.gen_range(-0.05..0.05)).clamp(0.3, 0.7);
            let next = plant::step(&state, u, 0.1, &params).unwrap();
            rows.push(TransitionRow {
                v: state.v,
                pow: state.pow,
                u,
                v_next: next.v,
            });
            state = next;
        }
        let fit = fit_predictor(&rows).unwrap();
        let mse: f64 = rows
            .iter()
            .map(|r| {
                let e = r.v_next - fit.predict(r.v, r.pow, r.u);
                e * e
            })
            .sum::<f64>()
            / rows.len() as f64;
        assert!(mse.sqrt() < 1.0, "residual RMS {} ft/s", mse.sqrt());
        assert!(fit.a > 0.0 && fit.a < 1.1, "a={}", fit.a);
    }

    #[test]
    fn episode_split_keeps_sets_disjoint_and_nonempty() {
        let episodes: Vec<Vec<TransitionRow<f64>>> = (0..4)
            .map(|e| {
                (0..10)
                    .map(|k| TransitionRow {
                        v: 500.0 + e as f64,
                        pow: 50.0,
                        u: 0.5,
                        v_next: 500.0 + k as f64,
                    })
                    .collect()
            })
            .collect();
        let ds = TransitionDataset::from_episodes(episodes).unwrap();
        assert_eq!(ds.fit_idx.len(), 20);
        assert_eq!(ds.cal_idx.len(), 20);
        for i in &ds.fit_idx {
            assert!(!ds.cal_idx.contains(i));
        }
        assert!(TransitionDataset::<f64>::from_episodes(vec![vec![]]).is_err());
    }
}
