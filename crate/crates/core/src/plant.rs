//! Two-state longitudinal engine surrogate.
//!
//! States: true airspeed `V` (ft/s) and engine power lag `pow` (percent).
//! Dynamics are a first-order lag from throttle command to delivered power
//! plus a point-mass thrust/drag balance:
//!
//! ```text
//! pow' = (100 u - pow) / tau_eng
//! V'   = (T_max pow / 100 - c_D V^2) / m
//! ```
//!
//! integrated with classical RK4 at the control step. Units of record are
//! ft, s, lbf and slug. The `Morelli` variant models an aerodynamic switch by
//! derating thrust and raising drag by fixed factors.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{clamp, real, Real};

/// Thrust derate applied by the Morelli variant.
pub const MORELLI_THRUST_FACTOR: f64 = 0.85;
/// Drag increase applied by the Morelli variant.
pub const MORELLI_DRAG_FACTOR: f64 = 1.15;

#[derive(Debug, Error)]
pub enum PlantError {
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("throttle {0} outside [0,1]")]
    ThrottleOutOfRange(f64),
    #[error("dt must be positive, got {0}")]
    BadDt(f64),
    #[error("invalid plant parameters: {0}")]
    BadParams(String),
    #[error("setpoint {sp} ft/s unreachable: required thrust {required} lbf exceeds max {max} lbf")]
    UnreachableSetpoint { sp: f64, required: f64, max: f64 },
}

/// Aerodynamic model selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlantModel {
    #[default]
    Nominal,
    Morelli,
}

/// Plant state: airspeed (ft/s) and engine power (percent).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantState<T> {
    pub v: T,
    pub pow: T,
}

/// Physical parameters. The stored `t_max` and `c_d` are the nominal values;
/// the model variant applies its mismatch factors on top.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantParams<T> {
    /// Engine lag time constant (s).
    pub tau_eng: T,
    /// Maximum static thrust (lbf).
    pub t_max: T,
    /// Vehicle mass (slug).
    pub mass: T,
    /// Lumped drag coefficient (lbf s^2 / ft^2).
    pub c_d: T,
    pub model: PlantModel,
}

impl<T: Real> Default for PlantParams<T> {
    /// Frozen calibration: trim at 500 ft/s sits at u = 0.5 exactly and the
    /// open-loop airspeed time constant near trim is ~3 s, so a 450 -> 500
    /// ft/s open-loop step settles in roughly 10 s.
    fn default() -> Self {
        Self {
            tau_eng: real(1.0),
            t_max: real(106_150.0),
            mass: real(637.0),
            c_d: real(0.2123),
            model: PlantModel::Nominal,
        }
    }
}

impl<T: Real> PlantParams<T> {
    pub fn with_model(model: PlantModel) -> Self {
        Self {
            model,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), PlantError> {
        for (name, v) in [
            ("tau_eng", self.tau_eng),
            ("t_max", self.t_max),
            ("mass", self.mass),
            ("c_d", self.c_d),
        ] {
            if !v.is_finite() || v <= T::zero() {
                return Err(PlantError::BadParams(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Effective maximum thrust after the model mismatch factor.
    pub fn thrust_max(&self) -> T {
        match self.model {
            PlantModel::Nominal => self.t_max,
            PlantModel::Morelli => self.t_max * real(MORELLI_THRUST_FACTOR),
        }
    }

    /// Effective drag coefficient after the model mismatch factor.
    pub fn drag_coeff(&self) -> T {
        match self.model {
            PlantModel::Nominal => self.c_d,
            PlantModel::Morelli => self.c_d * real(MORELLI_DRAG_FACTOR),
        }
    }

    /// Steady-state airspeed at full throttle.
    pub fn max_airspeed(&self) -> T {
        (self.thrust_max() / self.drag_coeff()).sqrt()
    }
}

#[inline]
fn deriv<T: Real>(s: &PlantState<T>, u: T, p: &PlantParams<T>) -> (T, T) {
    let hundred = real::<T>(100.0);
    let d_pow = (hundred * u - s.pow) / p.tau_eng;
    let thrust = p.thrust_max() * s.pow / hundred;
    let drag = p.drag_coeff() * s.v * s.v;
    let d_v = (thrust - drag) / p.mass;
    (d_v, d_pow)
}

/// Advances the plant one control step of length `dt` with throttle `u` held
/// constant, using RK4. Power is clamped to [0, 100] after the step.
pub fn step<T: Real>(
    s: &PlantState<T>,
    u: T,
    dt: T,
    p: &PlantParams<T>,
) -> Result<PlantState<T>, PlantError> {
    if !(s.v.is_finite() && s.pow.is_finite()) {
        return Err(PlantError::NonFinite("plant state"));
    }
    if !u.is_finite() {
        return Err(PlantError::NonFinite("throttle"));
    }
    if u < T::zero() || u > T::one() {
        return Err(PlantError::ThrottleOutOfRange(u.to_f64().unwrap_or(f64::NAN)));
    }
    if !(dt > T::zero()) || !dt.is_finite() {
        return Err(PlantError::BadDt(dt.to_f64().unwrap_or(f64::NAN)));
    }
    p.validate()?;

    let half = real::<T>(0.5);
    let sixth = T::one() / real::<T>(6.0);
    let two = real::<T>(2.0);

    let (k1v, k1p) = deriv(s, u, p);
    let s2 = PlantState {
        v: s.v + half * dt * k1v,
        pow: s.pow + half * dt * k1p,
    };
    let (k2v, k2p) = deriv(&s2, u, p);
    let s3 = PlantState {
        v: s.v + half * dt * k2v,
        pow: s.pow + half * dt * k2p,
    };
    let (k3v, k3p) = deriv(&s3, u, p);
    let s4 = PlantState {
        v: s.v + dt * k3v,
        pow: s.pow + dt * k3p,
    };
    let (k4v, k4p) = deriv(&s4, u, p);

    let v = s.v + dt * sixth * (k1v + two * k2v + two * k3v + k4v);
    let pow = s.pow + dt * sixth * (k1p + two * k2p + two * k3p + k4p);
    let next = PlantState {
        v,
        pow: clamp(pow, T::zero(), real(100.0)),
    };
    if !(next.v.is_finite() && next.pow.is_finite()) {
        return Err(PlantError::NonFinite("plant state after step"));
    }
    Ok(next)
}

/// Straight-level trim at setpoint `sp`: the equilibrium state and the
/// throttle holding it. Closed form: `pow* = 100 c_D sp^2 / T_max`, with
/// `u = pow* / 100`.
pub fn trim<T: Real>(sp: T, p: &PlantParams<T>) -> Result<(PlantState<T>, T), PlantError> {
    p.validate()?;
    if !sp.is_finite() || sp <= T::zero() {
        return Err(PlantError::NonFinite("setpoint"));
    }
    let required = p.drag_coeff() * sp * sp;
    if required > p.thrust_max() {
        return Err(PlantError::UnreachableSetpoint {
            sp: sp.to_f64().unwrap_or(f64::NAN),
            required: required.to_f64().unwrap_or(f64::NAN),
            max: p.thrust_max().to_f64().unwrap_or(f64::NAN),
        });
    }
    let u = required / p.thrust_max();
    let pow = real::<T>(100.0) * u;
    Ok((PlantState { v: sp, pow }, u))
}

/// Exact discrete update of the engine power lag with throttle held constant
/// over `dt`: the closed-form solution of `pow' = (100 u - pow) / tau`.
pub fn pow_lag_step<T: Real>(pow: T, u: T, dt: T, tau_eng: T) -> T {
    let hundred = real::<T>(100.0);
    let target = hundred * u;
    let decay = (-dt / tau_eng).exp();
    clamp(target + (pow - target) * decay, T::zero(), hundred)
}
