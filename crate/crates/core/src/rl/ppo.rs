//! Clipped-surrogate PPO loss, exact gradients and the training loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    compute_gae, gaussian_entropy, squashed_log_prob, Hyperparams, MlpGrads, PolicyParams,
    RlError, DEFAULT_HIDDEN,
};
use crate::env::{Env, EnvError, Observation};
use crate::scalar::{clamp, real, Real};

/// Rollout storage plus derived advantage/return targets.
#[derive(Debug, Clone)]
pub struct TrajectoryBatch<T> {
    pub obs: Vec<[T; 2]>,
    /// Pre-squash action samples.
    pub z: Vec<T>,
    /// Log-probs under the parameters that produced the rollout.
    pub log_prob_old: Vec<T>,
    pub rewards: Vec<T>,
    pub values: Vec<T>,
    pub dones: Vec<bool>,
    /// Critic value of the state after the last step (masked if terminal).
    pub bootstrap_value: T,
    /// Normalized advantages (zero mean, unit variance over the batch).
    pub advantages: Vec<T>,
    pub returns: Vec<T>,
}

impl<T: Real> TrajectoryBatch<T> {
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    /// Computes GAE targets and normalizes advantages in place.
    pub fn finalize(&mut self, gamma: T, lam: T) -> Result<(), RlError> {
        let (adv, ret) = compute_gae(
            &self.rewards,
            &self.values,
            &self.dones,
            self.bootstrap_value,
            gamma,
            lam,
        )?;
        let n = real::<T>(adv.len() as f64);
        let mean = adv.iter().copied().sum::<T>() / n;
        let var = adv.iter().map(|&a| (a - mean) * (a - mean)).sum::<T>() / n;
        let std = var.sqrt() + real::<T>(1e-8);
        self.advantages = adv.iter().map(|&a| (a - mean) / std).collect();
        self.returns = ret;
        Ok(())
    }
}

/// Loss decomposition of one evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms<T> {
    pub total: T,
    pub policy: T,
    pub value: T,
    pub entropy: T,
}

/// Gradients of the total loss with respect to every parameter.
#[derive(Debug, Clone)]
pub struct PolicyGrads<T> {
    pub actor: MlpGrads<T>,
    pub critic: MlpGrads<T>,
    pub log_std: T,
}

impl<T: Real> PolicyGrads<T> {
    pub fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::new();
        self.actor.write_flat(&mut out);
        self.critic.write_flat(&mut out);
        out.push(self.log_std);
        out
    }
}

fn loss_impl<T: Real>(
    params: &PolicyParams<T>,
    batch: &TrajectoryBatch<T>,
    idx: &[usize],
    hp: &Hyperparams<T>,
    mut grads: Option<&mut PolicyGrads<T>>,
) -> Result<LossTerms<T>, RlError> {
    if idx.is_empty() || batch.is_empty() {
        return Err(RlError::EmptyBatch);
    }
    let n = real::<T>(idx.len() as f64);
    let std = params.log_std.exp();
    let inv_var = T::one() / (std * std);
    let lo = T::one() - hp.clip_eps;
    let hi = T::one() + hp.clip_eps;

    let mut policy_sum = T::zero();
    let mut value_sum = T::zero();
    for &i in idx {
        let obs = &batch.obs[i];
        let (mean_out, actor_cache) = params.actor.forward(obs);
        let mean = mean_out[0];
        let (value_out, critic_cache) = params.critic.forward(obs);
        let v = value_out[0];

        let z = batch.z[i];
        let log_prob_new = squashed_log_prob(z, mean, params.log_std);
        let ratio = (log_prob_new - batch.log_prob_old[i]).exp();
        let adv = batch.advantages[i];
        let unclipped = ratio * adv;
        let clipped = clamp(ratio, lo, hi) * adv;
        policy_sum = policy_sum + unclipped.min(clipped);

        let v_err = v - batch.returns[i];
        value_sum = value_sum + v_err * v_err;

        if let Some(g) = grads.as_deref_mut() {
            // Policy term: derivative flows only through the unclipped branch
            // when it attains the min (inside the clip band both coincide).
            if unclipped <= clipped {
                let dl_dlogp = -(ratio * adv) / n;
                let y = (z - mean) * inv_var;
                // d logp / d mean = (z - mean) / std^2
                params.actor.backward(&actor_cache, &[dl_dlogp * y], &mut g.actor);
                // d logp / d log_std = ((z - mean)/std)^2 - 1
                let dlogp_dls = (z - mean) * (z - mean) * inv_var - T::one();
                g.log_std = g.log_std + dl_dlogp * dlogp_dls;
            }
            let dl_dv = hp.vf_coef * real::<T>(2.0) * v_err / n;
            params.critic.backward(&critic_cache, &[dl_dv], &mut g.critic);
        }
    }

    let policy = -policy_sum / n;
    let value = value_sum / n;
    let entropy = gaussian_entropy(params.log_std);
    let total = policy + hp.vf_coef * value - hp.entropy_coef * entropy;
    if let Some(g) = grads {
        g.log_std = g.log_std - hp.entropy_coef;
    }
    Ok(LossTerms {
        total,
        policy,
        value,
        entropy,
    })
}

/// Loss of the clipped PPO objective over the indexed subset of the batch.
pub fn ppo_loss<T: Real>(
    params: &PolicyParams<T>,
    batch: &TrajectoryBatch<T>,
    idx: &[usize],
    hp: &Hyperparams<T>,
) -> Result<LossTerms<T>, RlError> {
    loss_impl(params, batch, idx, hp, None)
}

/// Loss plus exact gradients via backprop through the networks and the
/// squashed Gaussian log-density.
pub fn ppo_loss_grads<T: Real>(
    params: &PolicyParams<T>,
    batch: &TrajectoryBatch<T>,
    idx: &[usize],
    hp: &Hyperparams<T>,
) -> Result<(LossTerms<T>, PolicyGrads<T>), RlError> {
    let mut grads = PolicyGrads {
        actor: params.actor.zeros_like(),
        critic: params.critic.zeros_like(),
        log_std: T::zero(),
    };
    let terms = loss_impl(params, batch, idx, hp, Some(&mut grads))?;
    Ok((terms, grads))
}

/// Momentum-free per-parameter RMS step scaling.
struct RmsScaler<T> {
    cache: Vec<T>,
    rho: T,
    eps: T,
}

impl<T: Real> RmsScaler<T> {
    fn new(n: usize) -> Self {
        Self {
            cache: vec![T::zero(); n],
            rho: real(0.99),
            eps: real(1e-8),
        }
    }

    fn step(&mut self, params: &mut [T], grads: &[T], lr: T) {
        for ((p, &g), c) in params.iter_mut().zip(grads).zip(&mut self.cache) {
            *c = self.rho * *c + (T::one() - self.rho) * g * g;
            *p = *p - lr * g / (c.sqrt() + self.eps);
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateLog<T> {
    pub update: usize,
    pub steps: usize,
    pub mean_return: T,
    pub policy_loss: T,
    pub value_loss: T,
    pub entropy: T,
}

/// Trains PPO from scratch. `make_env` builds a fresh episode from a derived
/// seed; training is a pure function of `(hyperparams, seed)` given a
/// deterministic factory.
pub fn train<T, F>(
    mut make_env: F,
    hp: &Hyperparams<T>,
    seed: u64,
) -> Result<(PolicyParams<T>, Vec<UpdateLog<T>>), RlError>
where
    T: Real,
    F: FnMut(u64) -> Result<(Env<T>, Observation<T>), EnvError>,
{
    hp.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = PolicyParams::init(&DEFAULT_HIDDEN, rng.gen());
    let mut opt = RmsScaler::new(params.param_count());

    let (mut env, mut obs) = make_env(rng.gen())?;
    let mut episode_return = T::zero();
    let mut log = Vec::new();
    let mut steps_done = 0usize;
    let mut update = 0usize;

    while steps_done < hp.total_steps {
        let n = hp.rollout_steps;
        let mut batch = TrajectoryBatch {
            obs: Vec::with_capacity(n),
            z: Vec::with_capacity(n),
            log_prob_old: Vec::with_capacity(n),
            rewards: Vec::with_capacity(n),
            values: Vec::with_capacity(n),
            dones: Vec::with_capacity(n),
            bootstrap_value: T::zero(),
            advantages: Vec::new(),
            returns: Vec::new(),
        };
        let mut completed_returns: Vec<T> = Vec::new();

        for _ in 0..n {
            let o = obs.as_array();
            let sample = params.act_sample(&o, &mut rng);
            let value = params.value(&o);
            let (next_obs, r, done, _) = env.step(sample.u)?;
            batch.obs.push(o);
            batch.z.push(sample.z);
            batch.log_prob_old.push(sample.log_prob);
            batch.rewards.push(r);
            batch.values.push(value);
            batch.dones.push(done);
            episode_return = episode_return + r;
            steps_done += 1;
            if done {
                completed_returns.push(episode_return);
                episode_return = T::zero();
                let (e, o2) = make_env(rng.gen())?;
                env = e;
                obs = o2;
            } else {
                obs = next_obs;
            }
        }
        batch.bootstrap_value = if *batch.dones.last().unwrap() {
            T::zero()
        } else {
            params.value(&obs.as_array())
        };
        batch.finalize(hp.gamma, hp.lam_gae)?;

        let mut order: Vec<usize> = (0..batch.len()).collect();
        let mut policy_acc = T::zero();
        let mut value_acc = T::zero();
        let mut entropy_acc = T::zero();
        let mut minibatches = 0usize;
        for _ in 0..hp.epochs {
            // Fisher-Yates shuffle from the master stream.
            for i in (1..order.len()).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
            for chunk in order.chunks(hp.minibatch) {
                let (terms, grads) = ppo_loss_grads(&params, &batch, chunk, hp)?;
                if !terms.total.is_finite() {
                    return Err(RlError::Diverged { update });
                }
                let mut flat = params.to_flat();
                opt.step(&mut flat, &grads.to_flat(), hp.lr);
                params.assign_flat(&flat);
                params.clamp_log_std();
                policy_acc = policy_acc + terms.policy;
                value_acc = value_acc + terms.value;
                entropy_acc = entropy_acc + terms.entropy;
                minibatches += 1;
            }
        }

        let mean_return = if completed_returns.is_empty() {
            episode_return
        } else {
            completed_returns.iter().copied().sum::<T>()
                / real::<T>(completed_returns.len() as f64)
        };
        let m = real::<T>(minibatches as f64);
        log.push(UpdateLog {
            update,
            steps: steps_done,
            mean_return,
            policy_loss: policy_acc / m,
            value_loss: value_acc / m,
            entropy: entropy_acc / m,
        });
        update += 1;
    }
    Ok((params, log))
}
