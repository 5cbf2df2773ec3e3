//! Generalized advantage estimation with episode masking.

use crate::error::{Error, Result};
use crate::rollout::Rollout;

pub struct GaeOut {
    /// Raw (unnormalized) advantages, row-aligned with the rollout.
    pub advantages: Vec<f32>,
    /// `advantages + values`.
    pub returns: Vec<f32>,
}

/// Masked GAE over a time-major rollout:
/// `delta_t = r_t + gamma * V_{t+1} * (1-done_t) - V_t` and
/// `A_t = delta_t + gamma * lambda * (1-done_t) * A_{t+1}`, bootstrapping
/// from the stored per-env values at the segment end.
///
/// Advantages are returned raw; updates normalize a copy per batch.
pub fn compute_gae(rollout: &Rollout, gamma: f32, lambda: f32) -> Result<GaeOut> {
    let (n_envs, len) = (rollout.n_envs, rollout.len);
    if rollout.bootstrap.len() != n_envs {
        return Err(Error::dim("compute_gae bootstrap", &[rollout.bootstrap.len()], &[n_envs]));
    }
    let rows = rollout.rows();
    if rollout.values.len() != rows || rollout.rewards.len() != rows {
        return Err(Error::dim("compute_gae lengths", &[rollout.values.len()], &[rows]));
    }
    let mut advantages = vec![0.0f32; rows];
    let mut returns = vec![0.0f32; rows];
    for e in 0..n_envs {
        let mut acc = 0.0f32;
        for t in (0..len).rev() {
            let row = t * n_envs + e;
            let nonterminal = if rollout.dones[row] { 0.0 } else { 1.0 };
            let v_next = if t + 1 == len {
                rollout.bootstrap[e]
            } else {
                rollout.values[(t + 1) * n_envs + e]
            };
            let delta =
                rollout.rewards[row] + gamma * v_next * nonterminal - rollout.values[row];
            acc = delta + gamma * lambda * nonterminal * acc;
            advantages[row] = acc;
            returns[row] = acc + rollout.values[row];
        }
    }
    Ok(GaeOut {
        advantages,
        returns,
    })
}

/// Shift/scale to mean 0, std 1 (population std, epsilon 1e-8).
pub fn normalize_advantages(adv: &[f32]) -> Vec<f32> {
    let n = adv.len() as f32;
    let mean: f32 = adv.iter().sum::<f32>() / n;
    let var: f32 = adv.iter().map(|&a| (a - mean) * (a - mean)).sum::<f32>() / n;
    let std = var.sqrt() + 1e-8;
    adv.iter().map(|&a| (a - mean) / std).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rollout_with(
        n_envs: usize,
        len: usize,
        rewards: &[f32],
        values: &[f32],
        dones: &[bool],
        bootstrap: &[f32],
    ) -> Rollout {
        let mut r = Rollout::new(n_envs, len, &[1], 0, &[2], 1);
        r.rewards.copy_from_slice(rewards);
        r.values.copy_from_slice(values);
        r.dones.copy_from_slice(dones);
        r.bootstrap.copy_from_slice(bootstrap);
        r
    }

    #[test]
    fn lambda_zero_is_one_step_td() {
        let r = rollout_with(
            1,
            3,
            &[1.0, 2.0, 3.0],
            &[0.5, 0.6, 0.7],
            &[false, false, false],
            &[0.8],
        );
        let out = compute_gae(&r, 0.9, 0.0).unwrap();
        assert!((out.advantages[0] - (1.0 + 0.9 * 0.6 - 0.5)).abs() < 1e-6);
        assert!((out.advantages[1] - (2.0 + 0.9 * 0.7 - 0.6)).abs() < 1e-6);
        assert!((out.advantages[2] - (3.0 + 0.9 * 0.8 - 0.7)).abs() < 1e-6);
    }

    #[test]
    fn lambda_one_gamma_one_zero_values_sums_future_rewards() {
        let r = rollout_with(
            1,
            4,
            &[1.0, 1.0, 1.0, 1.0],
            &[0.0; 4],
            &[false; 4],
            &[0.0],
        );
        let out = compute_gae(&r, 1.0, 1.0).unwrap();
        assert_eq!(out.advantages, vec![4.0, 3.0, 2.0, 1.0]);
    }

    #[test]
    fn done_masks_cut_credit_across_episodes() {
        let r = rollout_with(
            1,
            4,
            &[0.0, 10.0, 0.0, 0.0],
            &[0.0; 4],
            &[false, true, false, false],
            &[5.0],
        );
        let out = compute_gae(&r, 1.0, 1.0).unwrap();
        // Steps after the terminal at t=1 must not leak backward across it,
        // and the pre-terminal steps must not see the bootstrap.
        assert_eq!(out.advantages[0], 10.0);
        assert_eq!(out.advantages[1], 10.0);
        assert_eq!(out.advantages[2], 5.0);
        assert_eq!(out.advantages[3], 5.0);
    }

    #[test]
    fn normalization_hits_mean_zero_std_one() {
        let adv: Vec<f32> = (0..256).map(|i| (i as f32).sin() * 3.0 + 1.0).collect();
        let n = normalize_advantages(&adv);
        let mean: f32 = n.iter().sum::<f32>() / n.len() as f32;
        let var: f32 = n.iter().map(|a| (a - mean) * (a - mean)).sum::<f32>() / n.len() as f32;
        assert!(mean.abs() < 1e-6);
        assert!((var.sqrt() - 1.0).abs() < 1e-4);
    }
}
