//! Episode environment around the plant: observations, reward, termination
//! and the configurable stress-transform stack.
//!
//! Each step applies, in this order: (1) slew limit relative to the last
//! post-transform command, (2) throttle cap, (3) action-delay FIFO, (4) plant
//! step, (5) setpoint jump when the step crosses the jump time, (6) Gaussian
//! observation noise on airspeed only. Rewards and recorded states use the
//! true airspeed; only observations are noisy.
//!
//! An episode is exactly `ceil(T/dt)` steps. Stochasticity comes solely from
//! the seeded initial-airspeed perturbation and the observation noise, and is
//! independent of the action sequence, so runs with the same seed see
//! identical noise streams regardless of controller.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::plant::{self, PlantError, PlantModel, PlantParams, PlantState};
use crate::scalar::{clamp, real, std_normal, uniform, Real};

/// Relative half-width of the reward's tracking bonus band.
pub const REWARD_BAND: f64 = 0.05;
/// Initial relative airspeed perturbation bound (uniform on +/- this).
pub const INIT_PERTURBATION: f64 = 0.02;
/// Previous-throttle initialization for slew references.
pub const INITIAL_PREV_THROTTLE: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
    #[error("step called after the episode finished")]
    EpisodeDone,
    #[error("non-finite action")]
    NonFiniteAction,
    #[error(transparent)]
    Plant(#[from] PlantError),
}

/// Mid-episode setpoint change.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SetpointJump<T> {
    /// Episode time (s) at which the new setpoint takes effect.
    pub time: T,
    /// New commanded airspeed (ft/s).
    pub sp: T,
}

/// Environment configuration. `slew_limit` is infinite when the limiter is
/// off and `throttle_cap` is 1.0 when the cap is off.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig<T> {
    pub dt: T,
    /// Episode length (s).
    pub t_final: T,
    /// Commanded airspeed (ft/s).
    pub sp: T,
    /// Std-dev of the Gaussian noise added to observed airspeed (ft/s).
    pub obs_noise_sigma: T,
    /// Actuation delay in whole steps.
    pub action_delay: usize,
    /// Max per-step change of the commanded throttle.
    pub slew_limit: T,
    /// Upper throttle bound.
    pub throttle_cap: T,
    pub model: PlantModel,
    pub seed: u64,
    /// Action-increment penalty weight in the reward.
    pub alpha: T,
    /// In-band bonus in the reward.
    pub beta: T,
    pub setpoint_jump: Option<SetpointJump<T>>,
}

impl<T: Real> Default for EnvConfig<T> {
    fn default() -> Self {
        Self {
            dt: real(0.1),
            t_final: real(60.0),
            sp: real(500.0),
            obs_noise_sigma: T::zero(),
            action_delay: 0,
            slew_limit: T::infinity(),
            throttle_cap: T::one(),
            model: PlantModel::Nominal,
            seed: 0,
            alpha: real(0.1),
            beta: real(0.5),
            setpoint_jump: None,
        }
    }
}

impl<T: Real> EnvConfig<T> {
    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |msg: String| Err(EnvError::InvalidConfig(msg));
        if !(self.dt > T::zero()) || !self.dt.is_finite() {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.t_final > T::zero()) || !self.t_final.is_finite() {
            return bad(format!("t_final must be positive, got {}", self.t_final));
        }
        if !(self.sp > T::zero()) || !self.sp.is_finite() {
            return bad(format!("sp must be positive, got {}", self.sp));
        }
        if self.obs_noise_sigma < T::zero() || self.obs_noise_sigma.is_nan() {
            return bad("obs_noise_sigma must be >= 0".into());
        }
        if !(self.throttle_cap > T::zero() && self.throttle_cap <= T::one()) {
            return bad(format!(
                "throttle_cap must lie in (0,1], got {}",
                self.throttle_cap
            ));
        }
        if !(self.slew_limit > T::zero()) {
            return bad("slew_limit must be positive (infinite disables it)".into());
        }
        if !(self.alpha.is_finite() && self.beta.is_finite()) {
            return bad("alpha and beta must be finite".into());
        }
        if let Some(j) = &self.setpoint_jump {
            if !(j.sp > T::zero()) || !(j.time >= T::zero()) {
                return bad("setpoint jump needs sp > 0 and time >= 0".into());
            }
        }
        Ok(())
    }

    /// Number of control steps in one episode.
    pub fn n_steps(&self) -> usize {
        let q = self.t_final / self.dt;
        let tol = (T::one() + q.abs()) * T::epsilon() * real::<T>(1024.0);
        (q - tol).ceil().to_usize().unwrap_or(0)
    }
}

/// Normalized observation handed to the policy and the shield.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation<T> {
    /// Observed airspeed over setpoint.
    pub v_norm: T,
    /// Engine power over 100.
    pub pow_norm: T,
}

impl<T: Real> Observation<T> {
    pub fn as_array(&self) -> [T; 2] {
        [self.v_norm, self.pow_norm]
    }
}

/// Per-step telemetry. `v` and `pow` are the true plant states after the
/// step; `obs` is what the policy saw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord<T> {
    pub t: T,
    pub obs: Observation<T>,
    pub action_raw: T,
    pub action_applied: T,
    pub reward: T,
    pub v: T,
    pub pow: T,
    pub sp_current: T,
}

/// Tracking reward: `-|e| - alpha de^2 + beta [|e| <= 0.05]` with
/// `e = (v - sp)/sp`. The band boundary counts as inside.
pub fn reward<T: Real>(v: T, sp: T, delta_a: T, alpha: T, beta: T) -> T {
    let e = ((v - sp) / sp).abs();
    let bonus = if e <= real(REWARD_BAND) { beta } else { T::zero() };
    -e - alpha * delta_a * delta_a + bonus
}

/// Single-episode environment instance. Construct with [`Env::reset`].
#[derive(Debug, Clone)]
pub struct Env<T> {
    cfg: EnvConfig<T>,
    plant: PlantParams<T>,
    state: PlantState<T>,
    sp: T,
    step_idx: usize,
    n_steps: usize,
    /// Previous post-slew, post-cap command (slew reference).
    last_cmd: T,
    /// Previous throttle actually applied to the plant (reward reference).
    prev_applied: T,
    delay_buf: VecDeque<T>,
    rng: ChaCha8Rng,
    jump_done: bool,
    done: bool,
    u_trim: T,
}

impl<T: Real> Env<T> {
    /// Builds the episode: plant trimmed at the setpoint, initial airspeed
    /// perturbed by a seeded uniform +/-2%, delay buffer filled with the trim
    /// throttle and the previous-throttle references set to 0.5.
    pub fn reset(cfg: EnvConfig<T>) -> Result<(Self, Observation<T>), EnvError> {
        cfg.validate()?;
        let plant = PlantParams::with_model(cfg.model);
        let (trim_state, u_trim) = plant::trim(cfg.sp, &plant)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let eta: T = uniform(&mut rng, -INIT_PERTURBATION, INIT_PERTURBATION);
        let state = PlantState {
            v: cfg.sp * (T::one() + eta),
            pow: trim_state.pow,
        };
        let delay_buf: VecDeque<T> = std::iter::repeat(u_trim).take(cfg.action_delay).collect();
        let n_steps = cfg.n_steps();
        let mut env = Self {
            sp: cfg.sp,
            cfg,
            plant,
            state,
            step_idx: 0,
            n_steps,
            last_cmd: real(INITIAL_PREV_THROTTLE),
            prev_applied: u_trim,
            delay_buf,
            rng,
            jump_done: false,
            done: false,
            u_trim,
        };
        let obs = env.observe();
        Ok((env, obs))
    }

    fn observe(&mut self) -> Observation<T> {
        let noise: T = std_normal(&mut self.rng);
        let v_obs = self.state.v + self.cfg.obs_noise_sigma * noise;
        Observation {
            v_norm: v_obs / self.sp,
            pow_norm: self.state.pow / real(100.0),
        }
    }

    /// Applies one policy action through the stress stack and advances the
    /// plant by `dt`.
    pub fn step(&mut self, u_rl: T) -> Result<(Observation<T>, T, bool, StepRecord<T>), EnvError> {
        if self.done {
            return Err(EnvError::EpisodeDone);
        }
        if !u_rl.is_finite() {
            return Err(EnvError::NonFiniteAction);
        }
        let raw = clamp(u_rl, T::zero(), T::one());

        // (1) slew limit relative to the previous command
        let mut cmd = if self.cfg.slew_limit.is_finite() {
            self.last_cmd + clamp(raw - self.last_cmd, -self.cfg.slew_limit, self.cfg.slew_limit)
        } else {
            raw
        };
        // (2) throttle cap
        cmd = cmd.min(self.cfg.throttle_cap);
        self.last_cmd = cmd;

        // (3) action delay
        self.delay_buf.push_back(cmd);
        let applied = self.delay_buf.pop_front().expect("buffer never empty");

        // (4) plant step
        self.state = plant::step(&self.state, applied, self.cfg.dt, &self.plant)?;

        // (5) setpoint jump on the step that crosses the jump time
        self.step_idx += 1;
        let t = real::<T>(self.step_idx as f64) * self.cfg.dt;
        if let Some(jump) = self.cfg.setpoint_jump {
            let tol = self.cfg.dt * real(1e-9);
            if !self.jump_done && t + tol >= jump.time {
                self.sp = jump.sp;
                self.jump_done = true;
            }
        }

        let delta_a = applied - self.prev_applied;
        self.prev_applied = applied;
        let r = reward(self.state.v, self.sp, delta_a, self.cfg.alpha, self.cfg.beta);

        self.done = self.step_idx >= self.n_steps;

        // (6) observation noise
        let obs = self.observe();
        let record = StepRecord {
            t,
            obs,
            action_raw: raw,
            action_applied: applied,
            reward: r,
            v: self.state.v,
            pow: self.state.pow,
            sp_current: self.sp,
        };
        Ok((obs, r, self.done, record))
    }

    pub fn config(&self) -> &EnvConfig<T> {
        &self.cfg
    }

    pub fn state(&self) -> PlantState<T> {
        self.state
    }

    /// Current commanded setpoint (reflects an applied jump).
    pub fn sp(&self) -> T {
        self.sp
    }

    /// Time of the next sample produced by `step`, i.e. steps taken * dt.
    pub fn time(&self) -> T {
        real::<T>(self.step_idx as f64) * self.cfg.dt
    }

    pub fn steps_taken(&self) -> usize {
        self.step_idx
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn u_trim(&self) -> T {
        self.u_trim
    }

    pub fn plant_params(&self) -> &PlantParams<T> {
        &self.plant
    }
}
