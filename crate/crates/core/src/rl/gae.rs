//! Generalized advantage estimation.

use super::RlError;
use crate::scalar::Real;

/// Standard GAE recursion over a rollout that may span episode boundaries.
///
/// `dones[t]` marks that step `t` ended an episode; the recursion and the
/// bootstrap are masked there. `bootstrap_value` is the critic's value of the
/// state following the final step, used only when that step did not terminate.
/// Returns `(advantages, returns)` with `returns = advantages + values`.
pub fn compute_gae<T: Real>(
    rewards: &[T],
    values: &[T],
    dones: &[bool],
    bootstrap_value: T,
    gamma: T,
    lam: T,
) -> Result<(Vec<T>, Vec<T>), RlError> {
    let n = rewards.len();
    if n == 0 {
        return Err(RlError::EmptyBatch);
    }
    if values.len() != n || dones.len() != n {
        return Err(RlError::ShapeMismatch {
            what: "rewards/values/dones",
        });
    }
    let mut advantages = vec![T::zero(); n];
    let mut next_adv = T::zero();
    for t in (0..n).rev() {
        let mask = if dones[t] { T::zero() } else { T::one() };
        let next_value = if t + 1 < n { values[t + 1] } else { bootstrap_value };
        let delta = rewards[t] + gamma * next_value * mask - values[t];
        next_adv = delta + gamma * lam * mask * next_adv;
        advantages[t] = next_adv;
    }
    let returns = advantages
        .iter()
        .zip(values)
        .map(|(&a, &v)| a + v)
        .collect();
    Ok((advantages, returns))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_zero_collapses_to_td_error() {
        let rewards = [1.0, -0.5, 2.0];
        let values = [0.3, 0.6, 0.1];
        let dones = [false, false, false];
        let (adv, _) = compute_gae(&rewards, &values, &dones, 0.9, 0.95, 0.0).unwrap();
        for t in 0..3 {
            let next = if t + 1 < 3 { values[t + 1] } else { 0.9 };
            let td = rewards[t] + 0.95 * next - values[t];
            assert!((adv[t] - td).abs() < 1e-15, "t={t}");
        }
    }

    #[test]
    fn gamma_zero_returns_equal_rewards() {
        let rewards = [1.0, -0.5, 2.0, 0.25];
        let values = [0.3, 0.6, 0.1, -0.4];
        let dones = [false, false, false, true];
        let (_, ret) = compute_gae(&rewards, &values, &dones, 0.0, 0.0, 0.95).unwrap();
        for t in 0..4 {
            assert!((ret[t] - rewards[t]).abs() < 1e-15, "t={t}");
        }
    }

    #[test]
    fn four_step_hand_unroll() {
        // gamma = 0.9, lambda = 0.8, terminal at the last step.
        let rewards = [1.0, 0.0, -1.0, 2.0];
        let values = [0.5, 0.4, 0.3, 0.2];
        let dones = [false, false, false, true];
        let (adv, ret) = compute_gae(&rewards, &values, &dones, 9.9, 0.9, 0.8).unwrap();
        // Hand recursion:
        // d3 = 2 - 0.2 = 1.8;                    A3 = 1.8
        // d2 = -1 + .9*.3... wait, next value is values[3]:
        // d2 = -1 + 0.9*0.2 - 0.3 = -1.12;       A2 = -1.12 + 0.72*1.8  = 0.176
        // d1 =  0 + 0.9*0.3 - 0.4 = -0.13;       A1 = -0.13 + 0.72*0.176 = -0.00328
        // d0 =  1 + 0.9*0.4 - 0.5 =  0.86;       A0 = 0.86 + 0.72*(-0.00328) = 0.8576384
        let expected_adv = [0.8576384, -0.00328, 0.176, 1.8];
        let expected_ret = [1.3576384, 0.39672, 0.476, 2.0];
        for t in 0..4 {
            assert!(
                (adv[t] - expected_adv[t]).abs() < 1e-12,
                "adv[{t}] = {} expected {}",
                adv[t],
                expected_adv[t]
            );
            assert!((ret[t] - expected_ret[t]).abs() < 1e-12);
        }
    }

    #[test]
    fn done_masks_the_bootstrap() {
        // Identical rollouts except for the bootstrap value: when the last
        // step is terminal the bootstrap must not matter.
        let rewards = [0.5, 0.5];
        let values = [0.1, 0.1];
        let dones = [false, true];
        let (a1, _) = compute_gae(&rewards, &values, &dones, 123.0, 0.99, 0.95).unwrap();
        let (a2, _) = compute_gae(&rewards, &values, &dones, -77.0, 0.99, 0.95).unwrap();
        assert_eq!(a1, a2);
    }

    #[test]
    fn empty_batch_is_an_error() {
        let r: [f64; 0] = [];
        assert!(matches!(
            compute_gae(&r, &[], &[], 0.0, 0.99, 0.95),
            Err(RlError::EmptyBatch)
        ));
    }
}
