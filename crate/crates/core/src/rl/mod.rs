//! From-scratch PPO for the scalar throttle policy.
//!
//! The actor outputs the mean of a Gaussian over an unbounded pre-action,
//! which is squashed through a logistic sigmoid into [0, 1]; log-densities
//! include the squash correction. The critic is an identically shaped value
//! network. Training uses GAE advantages, the clipped surrogate objective and
//! a per-parameter RMS-scaled gradient step, all implemented in-repo.

mod gae;
mod net;
mod ppo;

pub use gae::compute_gae;
pub use net::{Dense, Mlp, MlpCache, MlpGrads};
pub use ppo::{ppo_loss, ppo_loss_grads, train, LossTerms, PolicyGrads, TrajectoryBatch, UpdateLog};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::EnvError;
use crate::scalar::{clamp, real, Real};

/// Hidden widths of the actor and critic perceptrons.
pub const DEFAULT_HIDDEN: [usize; 2] = [64, 64];
/// Bounds on the state-independent log standard deviation.
pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 1.0;

#[derive(Debug, Error)]
pub enum RlError {
    #[error("empty trajectory batch")]
    EmptyBatch,
    #[error("shape mismatch in {what}")]
    ShapeMismatch { what: &'static str },
    #[error("invalid hyperparameters: {0}")]
    InvalidHyper(String),
    #[error("non-finite loss at update {update}")]
    Diverged { update: usize },
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// PPO hyperparameters. All values are plain config; `validate` enforces the
/// structural constraints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams<T> {
    pub gamma: T,
    pub lam_gae: T,
    pub clip_eps: T,
    pub lr: T,
    pub epochs: usize,
    pub minibatch: usize,
    pub rollout_steps: usize,
    pub total_steps: usize,
    pub entropy_coef: T,
    pub vf_coef: T,
}

impl<T: Real> Default for Hyperparams<T> {
    fn default() -> Self {
        Self {
            gamma: real(0.99),
            lam_gae: real(0.95),
            clip_eps: real(0.2),
            lr: real(3e-4),
            epochs: 10,
            minibatch: 256,
            rollout_steps: 4096,
            total_steps: 300_000,
            entropy_coef: real(1e-3),
            vf_coef: real(0.5),
        }
    }
}

impl<T: Real> Hyperparams<T> {
    pub fn validate(&self) -> Result<(), RlError> {
        if !(self.gamma >= T::zero() && self.gamma < T::one()) {
            return Err(RlError::InvalidHyper(format!(
                "gamma must lie in [0,1), got {}",
                self.gamma
            )));
        }
        if !(self.clip_eps > T::zero()) {
            return Err(RlError::InvalidHyper("clip_eps must be positive".into()));
        }
        if !(self.lam_gae >= T::zero() && self.lam_gae <= T::one()) {
            return Err(RlError::InvalidHyper("lam_gae must lie in [0,1]".into()));
        }
        if self.minibatch == 0 || self.rollout_steps == 0 || self.epochs == 0 {
            return Err(RlError::InvalidHyper(
                "epochs, minibatch and rollout_steps must be positive".into(),
            ));
        }
        if !(self.lr > T::zero()) {
            return Err(RlError::InvalidHyper("lr must be positive".into()));
        }
        Ok(())
    }
}

/// Actor-critic parameters: two perceptrons plus a state-independent
/// pre-squash log standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams<T> {
    pub actor: Mlp<T>,
    pub critic: Mlp<T>,
    pub log_std: T,
}

/// One stochastic action draw.
#[derive(Debug, Clone, Copy)]
pub struct ActionSample<T> {
    /// Squashed action in [0, 1].
    pub u: T,
    /// Pre-squash Gaussian sample.
    pub z: T,
    /// Log-density of `u` (includes the squash correction).
    pub log_prob: T,
}

#[inline]
pub(crate) fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Log-density of the squashed action expressed through its pre-squash value
/// `z`: Gaussian log-density minus `log d sigmoid/dz`. The correction term
/// depends only on `z`, so probability ratios between parameter snapshots are
/// unaffected by it.
pub(crate) fn squashed_log_prob<T: Real>(z: T, mean: T, log_std: T) -> T {
    let std = log_std.exp();
    let half = real::<T>(0.5);
    let ln_2pi = real::<T>(std::f64::consts::TAU.ln());
    let y = (z - mean) / std;
    let gauss = -half * y * y - log_std - half * ln_2pi;
    gauss + softplus(z) + softplus(-z)
}

/// Entropy of the pre-squash Gaussian.
pub(crate) fn gaussian_entropy<T: Real>(log_std: T) -> T {
    real::<T>(0.5 * (1.0 + std::f64::consts::TAU.ln())) + log_std
}

impl<T: Real> PolicyParams<T> {
    /// Fresh Xavier-initialized actor-critic for 2-dimensional observations.
    pub fn init(hidden: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(2);
        dims.extend_from_slice(hidden);
        dims.push(1);
        let actor = Mlp::init(&dims, &mut rng);
        let critic = Mlp::init(&dims, &mut rng);
        Self {
            actor,
            critic,
            log_std: real(-1.0),
        }
    }

    pub fn actor_mean(&self, obs: &[T]) -> T {
        self.actor.forward_scalar(obs)
    }

    pub fn value(&self, obs: &[T]) -> T {
        self.critic.forward_scalar(obs)
    }

    /// Deterministic action: the squashed mean. Used for all evaluation runs.
    pub fn act_deterministic(&self, obs: &[T]) -> T {
        sigmoid(self.actor_mean(obs))
    }

    /// Stochastic action from the squashed Gaussian.
    pub fn act_sample<R: Rng + ?Sized>(&self, obs: &[T], rng: &mut R) -> ActionSample<T> {
        let mean = self.actor_mean(obs);
        let noise: T = crate::scalar::std_normal(rng);
        let z = mean + self.log_std.exp() * noise;
        ActionSample {
            u: sigmoid(z),
            z,
            log_prob: squashed_log_prob(z, mean, self.log_std),
        }
    }

    pub fn clamp_log_std(&mut self) {
        self.log_std = clamp(self.log_std, real(LOG_STD_MIN), real(LOG_STD_MAX));
    }

    pub fn param_count(&self) -> usize {
        self.actor.param_count() + self.critic.param_count() + 1
    }

    /// Flattened parameter vector: actor, critic, then log_std.
    pub fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        self.actor.write_flat(&mut out);
        self.critic.write_flat(&mut out);
        out.push(self.log_std);
        out
    }

    pub fn assign_flat(&mut self, flat: &[T]) {
        debug_assert_eq!(flat.len(), self.param_count());
        let mut at = 0;
        self.actor.read_flat(flat, &mut at);
        self.critic.read_flat(flat, &mut at);
        self.log_std = flat[at];
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_action_repeats_and_stays_in_unit_interval() {
        let p = PolicyParams::<f64>::init(&DEFAULT_HIDDEN, 3);
        let obs = [1.01, 0.52];
        let a = p.act_deterministic(&obs);
        let b = p.act_deterministic(&obs);
        assert_eq!(a, b);
        assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn sampled_actions_stay_in_unit_interval() {
        let p = PolicyParams::<f64>::init(&DEFAULT_HIDDEN, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let s = p.act_sample(&[0.97, 0.41], &mut rng);
            assert!((0.0..=1.0).contains(&s.u));
            assert!(s.log_prob.is_finite());
        }
    }

    #[test]
    fn sample_mean_approaches_deterministic_action_at_zero_mean() {
        // With zero actor output the squashed distribution is symmetric
        // around 0.5, so the empirical mean converges to the deterministic
        // action. Zero weights give exactly zero mean.
        let mut p = PolicyParams::<f64>::init(&[4], 9);
        for l in &mut p.actor.layers {
            l.w.iter_mut().for_each(|w| *w = 0.0);
            l.b.iter_mut().for_each(|b| *b = 0.0);
        }
        p.log_std = 0.0;
        let det = p.act_deterministic(&[1.0, 0.5]);
        assert_eq!(det, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let s = p.act_sample(&[1.0, 0.5], &mut rng);
            sum += s.u;
            sum_sq += s.u * s.u;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        let tol = 3.0 * var.sqrt() / (n as f64).sqrt();
        assert!(
            (mean - det).abs() < tol,
            "mean {mean} deviates from {det} beyond {tol}"
        );
    }

    #[test]
    fn squashed_log_prob_matches_numeric_density() {
        // Integrate the squashed density over a fine grid of u in (0,1) by
        // change of variables; it must integrate to ~1.
        let mean = 0.3;
        let log_std = -0.5;
        let mut total = 0.0;
        let n = 20_000;
        for i in 0..n {
            let z = -12.0 + 24.0 * (i as f64 + 0.5) / n as f64;
            let dz = 24.0 / n as f64;
            // density over z of the squashed variable times du/dz recovers
            // the Gaussian, so integrate exp(logp_u) * du/dz over z.
            let s: f64 = sigmoid(z);
            let du_dz = s * (1.0 - s);
            total += (squashed_log_prob(z, mean, log_std)).exp() * du_dz * dz;
        }
        assert!((total - 1.0).abs() < 1e-6, "density integrates to {total}");
    }

    #[test]
    fn hyperparam_validation_catches_bad_values() {
        let mut hp = Hyperparams::<f64>::default();
        hp.gamma = 1.0;
        assert!(hp.validate().is_err());
        let mut hp = Hyperparams::<f64>::default();
        hp.clip_eps = 0.0;
        assert!(hp.validate().is_err());
        assert!(Hyperparams::<f64>::default().validate().is_ok());
    }

    #[test]
    fn flat_round_trip() {
        let p = PolicyParams::<f64>::init(&DEFAULT_HIDDEN, 8);
        let flat = p.to_flat();
        let mut q = PolicyParams::<f64>::init(&DEFAULT_HIDDEN, 9);
        q.assign_flat(&flat);
        assert_eq!(p, q);
    }
}
