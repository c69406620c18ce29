//! Runtime action filters: raw pass-through, rate-limited rule shield, and
//! the conformal STL shield.
//!
//! The conformal shield searches a throttle grid inside the slew bound around
//! the previous applied action. For each candidate it propagates the
//! calibrated one-step predictor over a short horizon, builds an
//! interval-valued error trace (observed history as degenerate intervals plus
//! the predicted intervals), and evaluates the worst-case robustness of the
//! tracking specification over the portion of the spec window covered so
//! far. Samples beyond the prediction horizon are excluded from the minimum;
//! when the horizon does not reach the spec window at all, the candidate is
//! unconstrained and scores the specification's full margin.
//!
//! If any candidate keeps the worst case strictly positive, the feasible
//! candidate closest to the policy's proposal is applied (ties: larger
//! robustness, then larger throttle); otherwise the candidate with the
//! largest worst case is applied (ties: closer to the proposal, then larger
//! throttle). On a predictor failure the shield degrades to the rule-based
//! filter and flags the decision rather than aborting the episode.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::cp::{rollout_intervals, CalibrationResult, CpError, LinearPredictor};
use crate::env::Observation;
use crate::plant::pow_lag_step;
use crate::scalar::{clamp, real, Real};
use crate::stl::{
    worst_case_robustness, CmpOp, Formula, IntervalTrace, Predicate, StlError, TimeInterval,
};

/// Default per-step slew bound shared by the rule-based and conformal modes.
pub const DEFAULT_SLEW_BOUND: f64 = 0.05;
/// Default lookahead horizon (steps).
pub const DEFAULT_LOOKAHEAD: usize = 6;
/// Default candidate-grid size (odd, includes the midpoint).
pub const DEFAULT_GRID: usize = 21;

#[derive(Debug, Error)]
pub enum ShieldError {
    #[error("invalid shield config: {0}")]
    InvalidConfig(String),
    #[error("unsupported specification for shielding: {0}")]
    UnsupportedSpec(String),
    #[error(transparent)]
    Stl(#[from] StlError),
    #[error(transparent)]
    Cp(#[from] CpError),
}

/// Execution mode of the action filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShieldMode {
    Raw,
    RuleBased,
    Conformal,
}

impl std::fmt::Display for ShieldMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            ShieldMode::Raw => "raw",
            ShieldMode::RuleBased => "stl",
            ShieldMode::Conformal => "conformal",
        };
        f.write_str(name)
    }
}

/// Shield configuration. The predictor/calibration handles are only required
/// in conformal mode.
#[derive(Debug, Clone)]
pub struct ShieldConfig<T> {
    pub mode: ShieldMode,
    /// Slew bound per step.
    pub slew: T,
    /// Lookahead steps K.
    pub k_steps: usize,
    /// Candidate grid size M (odd, >= 3).
    pub m_grid: usize,
    /// Active tracking specification over the `err` channel.
    pub spec: Formula<T>,
    pub dt: T,
    /// Engine lag constant used for the deterministic power recursion.
    pub tau_eng: T,
    pub predictor: Option<LinearPredictor<T>>,
    pub calibration: Option<CalibrationResult<T>>,
}

impl<T: Real> ShieldConfig<T> {
    pub fn raw(spec: Formula<T>, dt: T) -> Self {
        Self {
            mode: ShieldMode::Raw,
            slew: real(DEFAULT_SLEW_BOUND),
            k_steps: DEFAULT_LOOKAHEAD,
            m_grid: DEFAULT_GRID,
            spec,
            dt,
            tau_eng: real(1.0),
            predictor: None,
            calibration: None,
        }
    }

    pub fn rule_based(spec: Formula<T>, dt: T, slew: T) -> Self {
        Self {
            mode: ShieldMode::RuleBased,
            slew,
            ..Self::raw(spec, dt)
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conformal(
        spec: Formula<T>,
        dt: T,
        slew: T,
        k_steps: usize,
        tau_eng: T,
        predictor: LinearPredictor<T>,
        calibration: CalibrationResult<T>,
    ) -> Self {
        Self {
            mode: ShieldMode::Conformal,
            slew,
            k_steps,
            m_grid: DEFAULT_GRID,
            spec,
            dt,
            tau_eng,
            predictor: Some(predictor),
            calibration: Some(calibration),
        }
    }

    fn validate(&self) -> Result<(), ShieldError> {
        if !(self.slew > T::zero()) || !self.slew.is_finite() {
            return Err(ShieldError::InvalidConfig(
                "slew bound must be positive and finite".into(),
            ));
        }
        if !(self.dt > T::zero()) {
            return Err(ShieldError::InvalidConfig("dt must be positive".into()));
        }
        if self.mode == ShieldMode::Conformal {
            if self.k_steps == 0 {
                return Err(ShieldError::InvalidConfig(
                    "lookahead must be at least one step".into(),
                ));
            }
            if self.m_grid < 3 || self.m_grid % 2 == 0 {
                return Err(ShieldError::InvalidConfig(format!(
                    "candidate grid must be odd and >= 3, got {}",
                    self.m_grid
                )));
            }
            if self.predictor.is_none() || self.calibration.is_none() {
                return Err(ShieldError::InvalidConfig(
                    "conformal mode needs a predictor and a calibration result".into(),
                ));
            }
            tracking_shape(&self.spec)?;
        }
        Ok(())
    }
}

/// Telemetry for a single filtering decision. `rho_min_applied` is NaN for
/// modes that do not evaluate robustness (raw, rule-based, degraded).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShieldDecision<T> {
    pub u_applied: T,
    pub rho_min_applied: T,
    pub feasible_count: usize,
    /// The applied action differs from the slew-clipped policy proposal.
    pub overridden: bool,
    /// Predictor failure forced a fallback to the rule-based filter.
    pub degraded: bool,
}

/// Rate-limited filter: move from `u_prev` toward `u_rl` by at most `s`,
/// then clip into [0, 1].
pub fn rule_shield<T: Real>(u_prev: T, u_rl: T, s: T) -> T {
    clamp(u_prev + clamp(u_rl - u_prev, -s, s), T::zero(), T::one())
}

/// Requires the Eq-5 tracking shape `G[a,b](abs(err) <= tau)` and returns the
/// window and predicate.
fn tracking_shape<T: Real>(
    spec: &Formula<T>,
) -> Result<(TimeInterval<T>, &Predicate<T>), ShieldError> {
    if let Formula::Globally(iv, sub) = spec {
        if let Formula::Pred(p) = sub.as_ref() {
            if p.abs && p.op == CmpOp::Le && p.channel == "err" {
                return Ok((*iv, p));
            }
        }
    }
    Err(ShieldError::UnsupportedSpec(format!(
        "conformal shielding supports only `G[a,b](abs(err) <= tau)`, got `{spec}`"
    )))
}

/// Per-episode shield state: the previous applied throttle and the observed
/// relative-error history.
#[derive(Debug, Clone)]
pub struct Shield<T> {
    cfg: ShieldConfig<T>,
    u_prev: T,
    err_hist: Vec<T>,
}

impl<T: Real> Shield<T> {
    /// New episode shield with the previous throttle initialized to 0.5.
    pub fn new(cfg: ShieldConfig<T>) -> Result<Self, ShieldError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            u_prev: real(0.5),
            err_hist: Vec::new(),
        })
    }

    /// Records an observation; the relative tracking error is exactly
    /// `v_norm - 1`. The initial reset observation must be recorded before
    /// the first `filter` call, and every post-step observation after it.
    pub fn observe(&mut self, obs: &Observation<T>) {
        self.err_hist.push(obs.v_norm - T::one());
    }

    pub fn u_prev(&self) -> T {
        self.u_prev
    }

    /// Worst-case robustness of the spec under candidate throttle `u`, held
    /// constant over the lookahead, from the current observed state.
    pub fn candidate_rho(&self, u: T, obs: &Observation<T>, sp: T) -> Result<T, ShieldError> {
        let (window, pred) = tracking_shape(&self.cfg.spec)?;
        let predictor = self.cfg.predictor.as_ref().ok_or_else(|| {
            ShieldError::InvalidConfig("candidate evaluation needs a predictor".into())
        })?;
        let cal = self.cfg.calibration.as_ref().ok_or_else(|| {
            ShieldError::InvalidConfig("candidate evaluation needs a calibration result".into())
        })?;
        if self.err_hist.is_empty() {
            return Err(ShieldError::InvalidConfig(
                "no observation recorded; call observe() after reset".into(),
            ));
        }

        let t_idx = self.err_hist.len() - 1;
        let snap = |t: T| -> usize {
            let q = t / self.cfg.dt;
            q.round().to_usize().unwrap_or(usize::MAX)
        };
        let w_start_idx = snap(window.start());
        let w_end_idx = snap(window.end());
        let cov_end_idx = w_end_idx.min(t_idx + self.cfg.k_steps);
        if cov_end_idx < w_start_idx {
            // The horizon does not reach the spec window: no constraint is
            // active yet and every candidate scores the full margin.
            return Ok(pred.threshold);
        }

        let n_pred = cov_end_idx - t_idx.min(cov_end_idx);
        let mut err: Vec<(T, T)> = self.err_hist.iter().map(|&e| (e, e)).collect();
        if n_pred > 0 {
            let v_obs = obs.v_norm * sp;
            let pow = obs.pow_norm * real(100.0);
            let dt = self.cfg.dt;
            let tau_eng = self.cfg.tau_eng;
            let intervals = rollout_intervals(predictor, cal, v_obs, pow, u, n_pred, |p| {
                pow_lag_step(p, u, dt, tau_eng)
            })?;
            for (lo, hi) in intervals {
                err.push(((lo - sp) / sp, (hi - sp) / sp));
            }
        }
        let mut channels = BTreeMap::new();
        channels.insert("err".to_string(), err);
        let trace = IntervalTrace::new(self.cfg.dt, channels)?;

        let cov_end_time = (real::<T>(cov_end_idx as f64) * self.cfg.dt).max(window.start());
        let truncated = Formula::globally(
            TimeInterval::new(window.start(), cov_end_time)?,
            Formula::Pred(pred.clone()),
        );
        Ok(worst_case_robustness(&truncated, &trace, T::zero())?)
    }

    /// Filters one policy proposal. `obs` must be the most recently recorded
    /// observation and `sp` the current setpoint.
    pub fn filter(
        &mut self,
        u_rl: T,
        obs: &Observation<T>,
        sp: T,
    ) -> Result<ShieldDecision<T>, ShieldError> {
        let raw = clamp(u_rl, T::zero(), T::one());
        let clipped = clamp(raw, self.u_prev - self.cfg.slew, self.u_prev + self.cfg.slew);
        let decision = match self.cfg.mode {
            ShieldMode::Raw => ShieldDecision {
                u_applied: raw,
                rho_min_applied: T::nan(),
                feasible_count: 0,
                overridden: false,
                degraded: false,
            },
            ShieldMode::RuleBased => {
                let u = rule_shield(self.u_prev, raw, self.cfg.slew);
                ShieldDecision {
                    u_applied: u,
                    rho_min_applied: T::nan(),
                    feasible_count: 0,
                    overridden: u != clipped,
                    degraded: false,
                }
            }
            ShieldMode::Conformal => match self.conformal_decision(raw, clipped, obs, sp) {
                Ok(d) => d,
                Err(ShieldError::Cp(e)) => {
                    log::warn!("conformal shield degraded to rule-based filter: {e}");
                    let u = rule_shield(self.u_prev, raw, self.cfg.slew);
                    ShieldDecision {
                        u_applied: u,
                        rho_min_applied: T::nan(),
                        feasible_count: 0,
                        overridden: u != clipped,
                        degraded: true,
                    }
                }
                Err(other) => return Err(other),
            },
        };
        self.u_prev = decision.u_applied;
        Ok(decision)
    }

    fn conformal_decision(
        &self,
        raw: T,
        clipped: T,
        obs: &Observation<T>,
        sp: T,
    ) -> Result<ShieldDecision<T>, ShieldError> {
        let half = (self.cfg.m_grid - 1) / 2;
        let half_t = real::<T>(half as f64);
        let mut candidates: Vec<T> = Vec::with_capacity(self.cfg.m_grid + 1);
        for j in 0..=half {
            let offset = self.cfg.slew * (real::<T>(j as f64) / half_t);
            for u in [self.u_prev - offset, self.u_prev + offset] {
                if u >= T::zero() && u <= T::one() {
                    candidates.push(u);
                }
            }
        }
        candidates.push(clipped);
        candidates.sort_by(|a, b| a.partial_cmp(b).expect("candidates are finite"));
        candidates.dedup();

        let mut scored = Vec::with_capacity(candidates.len());
        for &u in &candidates {
            scored.push((u, self.candidate_rho(u, obs, sp)?));
        }
        let feasible_count = scored.iter().filter(|&&(_, rho)| rho > T::zero()).count();

        let pick = if feasible_count > 0 {
            // Most permissive feasible candidate: nearest to the proposal.
            scored
                .iter()
                .filter(|&&(_, rho)| rho > T::zero())
                .copied()
                .reduce(|best, cand| {
                    let (bu, brho) = best;
                    let (cu, crho) = cand;
                    let bd = (bu - raw).abs();
                    let cd = (cu - raw).abs();
                    if cd < bd
                        || (cd == bd && crho > brho)
                        || (cd == bd && crho == brho && cu > bu)
                    {
                        cand
                    } else {
                        best
                    }
                })
                .expect("feasible set non-empty")
        } else {
            // Fall back to the largest robustness margin.
            scored
                .iter()
                .copied()
                .reduce(|best, cand| {
                    let (bu, brho) = best;
                    let (cu, crho) = cand;
                    let bd = (bu - raw).abs();
                    let cd = (cu - raw).abs();
                    if crho > brho
                        || (crho == brho && cd < bd)
                        || (crho == brho && cd == bd && cu > bu)
                    {
                        cand
                    } else {
                        best
                    }
                })
                .expect("candidate set non-empty")
        };
        Ok(ShieldDecision {
            u_applied: pick.0,
            rho_min_applied: pick.1,
            feasible_count,
            overridden: pick.0 != clipped,
            degraded: false,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stl::build_tracking_spec;

    fn obs(v_norm: f64, pow_norm: f64) -> Observation<f64> {
        Observation { v_norm, pow_norm }
    }

    fn perfect_predictor() -> LinearPredictor<f64> {
        LinearPredictor {
            a: 1.0,
            b: 0.0,
            c: 0.0,
            d: 0.0,
        }
    }

    fn cal(q: f64) -> CalibrationResult<f64> {
        CalibrationResult {
            q,
            delta: 0.3,
            n_cal: 1000,
            inflation: 1.0,
        }
    }

    #[test]
    fn rule_shield_hand_cases() {
        assert!((rule_shield(0.5, 0.9, 0.1) - 0.6).abs() < 1e-15);
        // Limiter inactive inside the bound.
        assert_eq!(rule_shield(0.5, 0.45, 0.1), 0.45);
        // Lower clip binds before the slew bound.
        assert_eq!(rule_shield(0.05, 0.0, 0.1), 0.0);
    }

    #[test]
    fn perfect_tracking_scores_full_margin() {
        let spec = build_tracking_spec(0.05, 1.0, 1.0).unwrap();
        let cfg = ShieldConfig::conformal(spec, 0.1, 0.05, 6, 1.0, perfect_predictor(), cal(0.0));
        let mut shield = Shield::new(cfg).unwrap();
        let o = obs(1.0, 0.5);
        shield.observe(&o);
        let rho = shield.candidate_rho(0.5, &o, 500.0).unwrap();
        assert!((rho - 0.05).abs() < 1e-12, "rho={rho}");
        let d = shield.filter(0.5, &o, 500.0).unwrap();
        assert_eq!(d.u_applied, 0.5);
        assert!(!d.overridden);
        assert!(d.feasible_count > 0);
    }

    #[test]
    fn lookahead_short_of_window_is_unconstrained() {
        // Window [50, 60] s; at t = 0 with K = 6 the horizon ends at 0.6 s,
        // far before the window: every candidate scores tau.
        let spec = build_tracking_spec(0.05, 10.0, 60.0).unwrap();
        let cfg = ShieldConfig::conformal(spec, 0.1, 0.05, 6, 1.0, perfect_predictor(), cal(0.0));
        let mut shield = Shield::new(cfg).unwrap();
        let o = obs(1.3, 0.5); // far off the band, but the window is not active
        shield.observe(&o);
        let rho = shield.candidate_rho(0.3, &o, 500.0).unwrap();
        assert_eq!(rho, 0.05);
        let d = shield.filter(0.9, &o, 500.0).unwrap();
        // All candidates feasible, so the clipped proposal passes through.
        assert!((d.u_applied - 0.55).abs() < 1e-15);
        assert!(!d.overridden);
    }

    #[test]
    fn three_step_hand_rollout_window() {
        // Perfect predictor, q = 0, constant V = sp inside the covered
        // window: worst case equals the margin of the farthest predicted
        // excursion. Start above the setpoint so margins differ by throttle.
        let spec = build_tracking_spec(0.02, 0.3, 0.6).unwrap();
        let predictor = LinearPredictor {
            a: 1.0,
            b: 0.0,
            c: 20.0,
            d: -10.0,
        };
        let cfg = ShieldConfig::conformal(spec, 0.1, 0.05, 6, 1.0, predictor, cal(0.0));
        let mut shield = Shield::new(cfg).unwrap();
        let o = obs(530.0 / 500.0, 0.5);
        shield.observe(&o);
        // Exhaustive oracle over the explicit grid.
        let mut grid: Vec<f64> = Vec::new();
        for j in 0..=10 {
            let off = 0.05 * (j as f64) / 10.0;
            for u in [0.5 - off, 0.5 + off] {
                grid.push(u);
            }
        }
        grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
        grid.dedup();
        let mut best = f64::NEG_INFINITY;
        let mut best_u = f64::NAN;
        for &u in &grid {
            let rho = shield.candidate_rho(u, &o, 500.0).unwrap();
            assert!(rho < 0.0, "candidate {u} unexpectedly feasible: {rho}");
            if rho > best {
                best = rho;
                best_u = u;
            }
        }
        // Lowest throttle slows down fastest and wins.
        assert!((best_u - 0.45).abs() < 1e-12, "best grid throttle {best_u}");
        let d = shield.filter(0.5, &o, 500.0).unwrap();
        assert_eq!(d.feasible_count, 0);
        assert!((d.u_applied - best_u).abs() < 1e-12);
        assert!((d.rho_min_applied - best).abs() < 1e-12);
        assert!(d.overridden);
    }

    #[test]
    fn huge_quantile_forces_the_argmax_branch_deterministically() {
        let spec = build_tracking_spec(0.05, 0.5, 0.5).unwrap();
        let cfg = ShieldConfig::conformal(
            spec,
            0.1,
            0.05,
            6,
            1.0,
            perfect_predictor(),
            cal(1e6),
        );
        let mut shield = Shield::new(cfg.clone()).unwrap();
        let o = obs(1.0, 0.5);
        shield.observe(&o);
        let d1 = shield.filter(0.6, &o, 500.0).unwrap();
        assert_eq!(d1.feasible_count, 0);
        let mut shield2 = Shield::new(cfg).unwrap();
        shield2.observe(&o);
        let d2 = shield2.filter(0.6, &o, 500.0).unwrap();
        assert_eq!(d1, d2);
    }

    #[test]
    fn infinite_quantile_degrades_to_rule_based() {
        let spec = build_tracking_spec(0.05, 0.5, 0.5).unwrap();
        let cfg = ShieldConfig::conformal(
            spec,
            0.1,
            0.05,
            6,
            1.0,
            perfect_predictor(),
            cal(f64::INFINITY),
        );
        let mut shield = Shield::new(cfg).unwrap();
        let o = obs(1.0, 0.5);
        shield.observe(&o);
        let d = shield.filter(0.9, &o, 500.0).unwrap();
        assert!(d.degraded);
        assert_eq!(d.u_applied, rule_shield(0.5, 0.9, 0.05));
        assert!(d.rho_min_applied.is_nan());
    }

    #[test]
    fn slew_safety_holds_for_every_decision() {
        let spec = build_tracking_spec(0.02, 0.3, 0.6).unwrap();
        let predictor = LinearPredictor {
            a: 1.0,
            b: 0.0,
            c: 20.0,
            d: -10.0,
        };
        let cfg = ShieldConfig::conformal(spec, 0.1, 0.05, 6, 1.0, predictor, cal(0.5));
        let mut shield = Shield::new(cfg).unwrap();
        let mut o = obs(1.04, 0.5);
        shield.observe(&o);
        for k in 0..40 {
            let prev = shield.u_prev();
            let u_rl = 0.5 + 0.4 * ((k as f64 * 0.7).sin());
            let d = shield.filter(u_rl, &o, 500.0).unwrap();
            assert!(
                (d.u_applied - prev).abs() <= 0.05 + 1e-12,
                "slew violated at step {k}: {} -> {}",
                prev,
                d.u_applied
            );
            o = obs(1.04 - 0.001 * k as f64, 0.5);
            shield.observe(&o);
        }
    }

    #[test]
    fn refining_the_grid_never_worsens_the_applied_margin() {
        let spec = build_tracking_spec(0.02, 0.3, 0.6).unwrap();
        let predictor = LinearPredictor {
            a: 1.0,
            b: 0.0,
            c: 20.0,
            d: -10.0,
        };
        // Infeasible-everywhere setting: the argmax over a finer (superset)
        // grid can only improve.
        let mut rho_by_m = Vec::new();
        for m in [5usize, 9, 17] {
            let mut cfg = ShieldConfig::conformal(
                spec.clone(),
                0.1,
                0.05,
                6,
                1.0,
                predictor,
                cal(0.0),
            );
            cfg.m_grid = m;
            let mut shield = Shield::new(cfg).unwrap();
            let o = obs(530.0 / 500.0, 0.5);
            shield.observe(&o);
            let d = shield.filter(0.5, &o, 500.0).unwrap();
            rho_by_m.push(d.rho_min_applied);
        }
        assert!(rho_by_m[1] >= rho_by_m[0] - 1e-15);
        assert!(rho_by_m[2] >= rho_by_m[1] - 1e-15);
    }

    #[test]
    fn inflation_never_raises_a_candidate_margin() {
        let spec = build_tracking_spec(0.05, 0.5, 0.5).unwrap();
        let predictor = LinearPredictor {
            a: 0.98,
            b: 0.01,
            c: 0.5,
            d: 9.0,
        };
        let shield_with = |inflation: f64| {
            let mut c = cal(0.4);
            c.inflation = inflation;
            let cfg =
                ShieldConfig::conformal(spec.clone(), 0.1, 0.05, 6, 1.0, predictor, c);
            let mut s = Shield::new(cfg).unwrap();
            s.observe(&obs(1.01, 0.5));
            s
        };
        let tight = shield_with(1.0);
        let loose = shield_with(1.8);
        for j in 0..=10 {
            let u = 0.45 + 0.01 * j as f64;
            let r_tight = tight.candidate_rho(u, &obs(1.01, 0.5), 500.0).unwrap();
            let r_loose = loose.candidate_rho(u, &obs(1.01, 0.5), 500.0).unwrap();
            assert!(r_loose <= r_tight + 1e-15, "u={u}");
        }
    }

    #[test]
    fn config_validation() {
        let spec = build_tracking_spec(0.05, 10.0, 60.0).unwrap();
        let mut cfg = ShieldConfig::conformal(
            spec.clone(),
            0.1,
            0.05,
            6,
            1.0,
            perfect_predictor(),
            cal(0.0),
        );
        cfg.m_grid = 4;
        assert!(Shield::new(cfg).is_err());
        let cfg = ShieldConfig::conformal(
            crate::stl::parse_formula("F[0,1](err >= 0)").unwrap(),
            0.1,
            0.05,
            6,
            1.0,
            perfect_predictor(),
            cal(0.0),
        );
        assert!(matches!(
            Shield::new(cfg),
            Err(ShieldError::UnsupportedSpec(_))
        ));
        // Raw mode does not require the tracking shape.
        let cfg = ShieldConfig::raw(crate::stl::parse_formula("F[0,1](err >= 0)").unwrap(), 0.1);
        assert!(Shield::new(cfg).is_ok());
    }
}
