//! Signal Temporal Logic monitor: formula AST, quantitative (robust)
//! semantics over sampled traces, and worst-case semantics over
//! interval-valued traces.
//!
//! Semantics are discrete-time over the sample grid: the trace holds samples
//! at times `i * dt` and temporal operators range over grid points inside the
//! shifted interval. Windows that extend past the end of the trace are an
//! error, never silently clamped. Robustness is the usual signed margin:
//! strictly positive means the property holds with slack, strictly negative
//! means it is violated; zero counts as a violation.

mod parse;

pub use parse::parse_formula;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{real, Real};

/// Errors produced by parsing or evaluating STL formulas.
#[derive(Debug, Error)]
pub enum StlError {
    #[error("syntax error at byte {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("invalid interval [{start},{end}]: bounds must satisfy 0 <= start <= end < inf")]
    BadInterval { start: f64, end: f64 },
    #[error("unknown channel `{0}`")]
    UnknownChannel(String),
    #[error("empty sample set for window [{start},{end}] s at t={t} s (dt={dt} s)")]
    EmptyWindow { start: f64, end: f64, t: f64, dt: f64 },
    #[error("window [{start},{end}] s at t={t} s exceeds the trace end ({duration} s)")]
    WindowExceedsTrace {
        start: f64,
        end: f64,
        t: f64,
        duration: f64,
    },
    #[error("evaluation time {t} s is not on the sample grid (dt={dt} s) or outside the trace")]
    TimeOffGrid { t: f64, dt: f64 },
    #[error("formula outside the supported monotone fragment: {0}")]
    UnsupportedFragment(String),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("invalid trace: {0}")]
    InvalidTrace(String),
}

/// Comparison direction of an atomic predicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CmpOp {
    /// `value <= threshold`; margin is `threshold - value`.
    Le,
    /// `value >= threshold`; margin is `value - threshold`.
    Ge,
}

/// Atomic predicate over one trace channel.
///
/// The margin function is affine in the (possibly absolute) channel value:
/// `Le` gives `threshold - g(v)` and `Ge` gives `g(v) - threshold`, where
/// `g(v)` is `|v|` when `abs` is set and `v` otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predicate<T> {
    pub channel: String,
    pub abs: bool,
    pub op: CmpOp,
    pub threshold: T,
}

impl<T: Real> Predicate<T> {
    pub fn margin(&self, v: T) -> T {
        let g = if self.abs { v.abs() } else { v };
        match self.op {
            CmpOp::Le => self.threshold - g,
            CmpOp::Ge => g - self.threshold,
        }
    }

    /// Minimum of the margin over `[lo, hi]`, valid only for predicate shapes
    /// whose worst case sits at an interval endpoint: plain `v <= c` /
    /// `v >= c`, and `abs(v) <= c`. For `abs(v) >= c` the minimum can fall at
    /// an interior zero crossing, so it is rejected as outside the fragment.
    fn worst_margin(&self, lo: T, hi: T) -> Result<T, StlError> {
        if self.abs && self.op == CmpOp::Ge {
            return Err(StlError::UnsupportedFragment(format!(
                "predicate abs({}) >= c is not endpoint-monotone",
                self.channel
            )));
        }
        Ok(self.margin(lo).min(self.margin(hi)))
    }
}

/// Closed time interval `[start, end]` in seconds annotating F/G operators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeInterval<T> {
    start: T,
    end: T,
}

impl<T: Real> TimeInterval<T> {
    pub fn new(start: T, end: T) -> Result<Self, StlError> {
        if !(start.is_finite() && end.is_finite()) || start < T::zero() || start > end {
            return Err(StlError::BadInterval {
                start: start.to_f64().unwrap_or(f64::NAN),
                end: end.to_f64().unwrap_or(f64::NAN),
            });
        }
        Ok(Self { start, end })
    }

    pub fn start(&self) -> T {
        self.start
    }

    pub fn end(&self) -> T {
        self.end
    }
}

/// STL formula over named trace channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Formula<T> {
    Pred(Predicate<T>),
    Not(Box<Formula<T>>),
    And(Box<Formula<T>>, Box<Formula<T>>),
    Or(Box<Formula<T>>, Box<Formula<T>>),
    Eventually(TimeInterval<T>, Box<Formula<T>>),
    Globally(TimeInterval<T>, Box<Formula<T>>),
}

impl<T: Real> Formula<T> {
    pub fn pred(channel: impl Into<String>, abs: bool, op: CmpOp, threshold: T) -> Self {
        Formula::Pred(Predicate {
            channel: channel.into(),
            abs,
            op,
            threshold,
        })
    }

    pub fn not(sub: Formula<T>) -> Self {
        Formula::Not(Box::new(sub))
    }

    pub fn and(lhs: Formula<T>, rhs: Formula<T>) -> Self {
        Formula::And(Box::new(lhs), Box::new(rhs))
    }

    pub fn or(lhs: Formula<T>, rhs: Formula<T>) -> Self {
        Formula::Or(Box::new(lhs), Box::new(rhs))
    }

    pub fn eventually(interval: TimeInterval<T>, sub: Formula<T>) -> Self {
        Formula::Eventually(interval, Box::new(sub))
    }

    pub fn globally(interval: TimeInterval<T>, sub: Formula<T>) -> Self {
        Formula::Globally(interval, Box::new(sub))
    }

    /// Largest time offset the formula can look ahead from its evaluation
    /// point. A trace must cover `t + horizon()` for evaluation at `t`.
    pub fn horizon(&self) -> T {
        match self {
            Formula::Pred(_) => T::zero(),
            Formula::Not(f) => f.horizon(),
            Formula::And(l, r) | Formula::Or(l, r) => l.horizon().max(r.horizon()),
            Formula::Eventually(iv, f) | Formula::Globally(iv, f) => iv.end + f.horizon(),
        }
    }
}

impl<T: Real> fmt::Display for Formula<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Formula::Pred(p) => {
                let op = match p.op {
                    CmpOp::Le => "<=",
                    CmpOp::Ge => ">=",
                };
                if p.abs {
                    write!(f, "abs({}) {} {}", p.channel, op, p.threshold)
                } else {
                    write!(f, "{} {} {}", p.channel, op, p.threshold)
                }
            }
            Formula::Not(sub) => write!(f, "not ({sub})"),
            Formula::And(l, r) => write!(f, "({l} and {r})"),
            Formula::Or(l, r) => write!(f, "({l} or {r})"),
            Formula::Eventually(iv, sub) => write!(f, "F[{},{}]({sub})", iv.start, iv.end),
            Formula::Globally(iv, sub) => write!(f, "G[{},{}]({sub})", iv.start, iv.end),
        }
    }
}

/// Uniformly sampled multi-channel signal. Sample `i` of every channel is at
/// time `i * dt`. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace<T> {
    dt: T,
    len: usize,
    channels: BTreeMap<String, Vec<T>>,
}

impl<T: Real> Trace<T> {
    pub fn new(dt: T, channels: BTreeMap<String, Vec<T>>) -> Result<Self, StlError> {
        if !(dt > T::zero()) || !dt.is_finite() {
            return Err(StlError::InvalidTrace("dt must be positive".into()));
        }
        let mut len = None;
        for (name, samples) in &channels {
            match len {
                None => len = Some(samples.len()),
                Some(n) if n != samples.len() => {
                    return Err(StlError::InvalidTrace(format!(
                        "channel `{name}` has {} samples, expected {n}",
                        samples.len()
                    )))
                }
                _ => {}
            }
        }
        let len = len.unwrap_or(0);
        if len == 0 {
            return Err(StlError::InvalidTrace(
                "trace needs at least one channel with at least one sample".into(),
            ));
        }
        Ok(Self { dt, len, channels })
    }

    pub fn dt(&self) -> T {
        self.dt
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Time of the last sample.
    pub fn duration(&self) -> T {
        real::<T>((self.len - 1) as f64) * self.dt
    }

    pub fn channel(&self, name: &str) -> Result<&[T], StlError> {
        self.channels
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| StlError::UnknownChannel(name.to_string()))
    }

    pub fn channel_names(&self) -> impl Iterator<Item = &str> {
        self.channels.keys().map(String::as_str)
    }
}

/// Interval-valued trace: per-sample `[lo, hi]` bounds per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalTrace<T> {
    dt: T,
    len: usize,
    channels: BTreeMap<String, Vec<(T, T)>>,
}

impl<T: Real> IntervalTrace<T> {
    pub fn new(dt: T, channels: BTreeMap<String, Vec<(T, T)>>) -> Result<Self, StlError> {
        if !(dt > T::zero()) || !dt.is_finite() {
            return Err(StlError::InvalidTrace("dt must be positive".into()));
        }
        let mut len = None;
        for (name, samples) in &channels {
            match len {
                None => len = Some(samples.len()),
                Some(n) if n != samples.len() => {
                    return Err(StlError::InvalidTrace(format!(
                        "channel `{name}` has {} samples, expected {n}",
                        samples.len()
                    )))
                }
                _ => {}
            }
            if let Some((lo, hi)) = samples.iter().find(|(lo, hi)| !(lo <= hi)) {
                return Err(StlError::InvalidTrace(format!(
                    "channel `{name}` has an inverted interval [{lo},{hi}]"
                )));
            }
        }
        let len = len.unwrap_or(0);
        if len == 0 {
            return Err(StlError::InvalidTrace(
                "trace needs at least one channel with at least one sample".into(),
            ));
        }
        Ok(Self { dt, len, channels })
    }

    /// Point trace selecting the interval midpoints (degenerate intervals
    /// collapse to their single value).
    pub fn midpoint_trace(&self) -> Trace<T> {
        let two = real::<T>(2.0);
        let channels = self
            .channels
            .iter()
            .map(|(k, v)| {
                (
                    k.clone(),
                    v.iter().map(|&(lo, hi)| (lo + hi) / two).collect(),
                )
            })
            .collect();
        Trace::new(self.dt, channels).expect("valid by construction")
    }

    pub fn dt(&self) -> T {
        self.dt
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn channel(&self, name: &str) -> Result<&[(T, T)], StlError> {
        self.channels
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| StlError::UnknownChannel(name.to_string()))
    }
}

/// Snaps `t` to the nearest grid index, erroring when `t` falls between
/// samples or outside `[0, (len-1) * dt]`.
fn grid_index<T: Real>(t: T, dt: T, len: usize) -> Result<usize, StlError> {
    let q = t / dt;
    let idx = q.round();
    let tol = (T::one() + q.abs()) * T::epsilon() * real::<T>(1024.0);
    if (q - idx).abs() > tol.max(real::<T>(1e-9)) || idx < -tol {
        return Err(StlError::TimeOffGrid {
            t: t.to_f64().unwrap_or(f64::NAN),
            dt: dt.to_f64().unwrap_or(f64::NAN),
        });
    }
    let i = idx.max(T::zero()).to_usize().ok_or(StlError::TimeOffGrid {
        t: t.to_f64().unwrap_or(f64::NAN),
        dt: dt.to_f64().unwrap_or(f64::NAN),
    })?;
    if i >= len {
        return Err(StlError::TimeOffGrid {
            t: t.to_f64().unwrap_or(f64::NAN),
            dt: dt.to_f64().unwrap_or(f64::NAN),
        });
    }
    Ok(i)
}

/// Grid indices `i` with `i * dt` inside `[t + start, t + end]`, with a small
/// relative tolerance so exact boundaries survive floating-point division.
fn window_indices<T: Real>(
    t: T,
    iv: &TimeInterval<T>,
    dt: T,
    len: usize,
) -> Result<std::ops::RangeInclusive<usize>, StlError> {
    let q_lo = (t + iv.start) / dt;
    let q_hi = (t + iv.end) / dt;
    let eps = T::epsilon() * real::<T>(1024.0);
    let tol_lo = (T::one() + q_lo.abs()) * eps;
    let tol_hi = (T::one() + q_hi.abs()) * eps;
    let i_lo = (q_lo - tol_lo).ceil().max(T::zero());
    let i_hi = (q_hi + tol_hi).floor();
    let err_ctx = || {
        (
            iv.start.to_f64().unwrap_or(f64::NAN),
            iv.end.to_f64().unwrap_or(f64::NAN),
            t.to_f64().unwrap_or(f64::NAN),
        )
    };
    if i_hi < i_lo {
        let (start, end, t) = err_ctx();
        return Err(StlError::EmptyWindow {
            start,
            end,
            t,
            dt: dt.to_f64().unwrap_or(f64::NAN),
        });
    }
    let i_lo = i_lo.to_usize().unwrap_or(usize::MAX);
    let i_hi = i_hi.to_usize().unwrap_or(usize::MAX);
    if i_hi >= len {
        let (start, end, t) = err_ctx();
        return Err(StlError::WindowExceedsTrace {
            start,
            end,
            t,
            duration: ((len - 1) as f64) * dt.to_f64().unwrap_or(f64::NAN),
        });
    }
    Ok(i_lo..=i_hi)
}

/// Quantitative robustness of `formula` on `trace` at time `t` (seconds).
///
/// `Pred -> margin(x_t)`, `Not -> -rho`, `And -> min`, `Or -> max`,
/// `F_[a,b] -> max` and `G_[a,b] -> min` over the grid points in `t + [a,b]`.
pub fn robustness<T: Real>(formula: &Formula<T>, trace: &Trace<T>, t: T) -> Result<T, StlError> {
    match formula {
        Formula::Pred(p) => {
            let samples = trace.channel(&p.channel)?;
            let i = grid_index(t, trace.dt(), trace.len())?;
            Ok(p.margin(samples[i]))
        }
        Formula::Not(sub) => Ok(-robustness(sub, trace, t)?),
        Formula::And(l, r) => Ok(robustness(l, trace, t)?.min(robustness(r, trace, t)?)),
        Formula::Or(l, r) => Ok(robustness(l, trace, t)?.max(robustness(r, trace, t)?)),
        Formula::Eventually(iv, sub) => {
            let mut best: Option<T> = None;
            for i in window_indices(t, iv, trace.dt(), trace.len())? {
                let ti = real::<T>(i as f64) * trace.dt();
                let r = robustness(sub, trace, ti)?;
                best = Some(match best {
                    None => r,
                    Some(b) => b.max(r),
                });
            }
            Ok(best.expect("window indices are non-empty"))
        }
        Formula::Globally(iv, sub) => {
            let mut worst: Option<T> = None;
            for i in window_indices(t, iv, trace.dt(), trace.len())? {
                let ti = real::<T>(i as f64) * trace.dt();
                let r = robustness(sub, trace, ti)?;
                worst = Some(match worst {
                    None => r,
                    Some(w) => w.min(r),
                });
            }
            Ok(worst.expect("window indices are non-empty"))
        }
    }
}

/// Boolean satisfaction by direct recursion, independent of [`robustness`].
/// Atoms are satisfied when their margin is strictly positive, so a margin of
/// exactly zero counts as a violation.
pub fn satisfies<T: Real>(formula: &Formula<T>, trace: &Trace<T>, t: T) -> Result<bool, StlError> {
    match formula {
        Formula::Pred(p) => {
            let samples = trace.channel(&p.channel)?;
            let i = grid_index(t, trace.dt(), trace.len())?;
            Ok(p.margin(samples[i]) > T::zero())
        }
        Formula::Not(sub) => Ok(!satisfies(sub, trace, t)?),
        Formula::And(l, r) => Ok(satisfies(l, trace, t)? && satisfies(r, trace, t)?),
        Formula::Or(l, r) => Ok(satisfies(l, trace, t)? || satisfies(r, trace, t)?),
        Formula::Eventually(iv, sub) => {
            let mut any = false;
            for i in window_indices(t, iv, trace.dt(), trace.len())? {
                let ti = real::<T>(i as f64) * trace.dt();
                any |= satisfies(sub, trace, ti)?;
            }
            Ok(any)
        }
        Formula::Globally(iv, sub) => {
            let mut all = true;
            for i in window_indices(t, iv, trace.dt(), trace.len())? {
                let ti = real::<T>(i as f64) * trace.dt();
                all &= satisfies(sub, trace, ti)?;
            }
            Ok(all)
        }
    }
}

/// Worst-case robustness over every point trace consistent with the
/// per-sample intervals.
///
/// Supported fragment: negation-free formulas over endpoint-monotone
/// predicates (`v <= c`, `v >= c`, `abs(v) <= c`). For `And`/`Globally` the
/// recursion is exact; for `Or`/`Eventually` it is exact when the children
/// constrain disjoint samples (always true for temporal operators applied to
/// predicates) and a sound lower bound otherwise.
pub fn worst_case_robustness<T: Real>(
    formula: &Formula<T>,
    trace: &IntervalTrace<T>,
    t: T,
) -> Result<T, StlError> {
    match formula {
        Formula::Pred(p) => {
            let samples = trace.channel(&p.channel)?;
            let i = grid_index(t, trace.dt(), trace.len())?;
            let (lo, hi) = samples[i];
            p.worst_margin(lo, hi)
        }
        Formula::Not(_) => Err(StlError::UnsupportedFragment(
            "negation is not supported on interval traces; push negations into predicates".into(),
        )),
        Formula::And(l, r) => Ok(worst_case_robustness(l, trace, t)?
            .min(worst_case_robustness(r, trace, t)?)),
        Formula::Or(l, r) => Ok(worst_case_robustness(l, trace, t)?
            .max(worst_case_robustness(r, trace, t)?)),
        Formula::Eventually(iv, sub) => {
            let mut best: Option<T> = None;
            for i in window_indices(t, iv, trace.dt(), trace.len())? {
                let ti = real::<T>(i as f64) * trace.dt();
                let r = worst_case_robustness(sub, trace, ti)?;
                best = Some(match best {
                    None => r,
                    Some(b) => b.max(r),
                });
            }
            Ok(best.expect("window indices are non-empty"))
        }
        Formula::Globally(iv, sub) => {
            let mut worst: Option<T> = None;
            for i in window_indices(t, iv, trace.dt(), trace.len())? {
                let ti = real::<T>(i as f64) * trace.dt();
                let r = worst_case_robustness(sub, trace, ti)?;
                worst = Some(match worst {
                    None => r,
                    Some(w) => w.min(r),
                });
            }
            Ok(worst.expect("window indices are non-empty"))
        }
    }
}

/// Airspeed tracking specification: the relative error channel `err` must
/// stay within `tau` during the final `window` seconds of a `t_final`-second
/// episode, i.e. `G[t_final-window, t_final](abs(err) <= tau)`.
pub fn build_tracking_spec<T: Real>(
    tau: T,
    window: T,
    t_final: T,
) -> Result<Formula<T>, StlError> {
    if !(tau > T::zero() && tau < T::one()) {
        return Err(StlError::InvalidParam(format!(
            "tau must lie in (0,1), got {tau}"
        )));
    }
    if !(window > T::zero() && window <= t_final) {
        return Err(StlError::InvalidParam(format!(
            "window must lie in (0, t_final], got {window} with t_final {t_final}"
        )));
    }
    let iv = TimeInterval::new(t_final - window, t_final)?;
    Ok(Formula::globally(
        iv,
        Formula::pred("err", true, CmpOp::Le, tau),
    ))
}
