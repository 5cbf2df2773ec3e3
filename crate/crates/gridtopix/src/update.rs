//! Reward-maximizing updates: PPO (clipped surrogate) and synchronous
//! advantage actor-critic.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gae::{compute_gae, normalize_advantages};
use crate::graph::{Graph, NodeId};
use crate::net::{CoreDesc, PolicyNet};
use crate::optim::Adam;
use crate::rollout::Rollout;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algo {
    Ppo,
    A2c,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub algo: Algo,
    pub gamma: f32,
    pub gae_lambda: f32,
    pub clip_eps: f32,
    pub epochs: usize,
    pub minibatches: usize,
    pub value_coeff: f32,
    pub entropy_coeff: f32,
    pub lr: f64,
    pub rollout_length: usize,
    pub n_envs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            algo: Algo::Ppo,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_eps: 0.2,
            epochs: 4,
            minibatches: 4,
            value_coeff: 0.5,
            entropy_coeff: 0.01,
            lr: 2.5e-4,
            rollout_length: 128,
            n_envs: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.gamma && self.gamma <= 1.0) {
            return Err(Error::Validation(format!("gamma {} outside (0,1]", self.gamma)));
        }
        if self.clip_eps <= 0.0 {
            return Err(Error::Validation("clip_eps must be positive".into()));
        }
        if self.epochs == 0 || self.minibatches == 0 || self.n_envs == 0 || self.rollout_length == 0
        {
            return Err(Error::Validation(
                "epochs, minibatches, n_envs, rollout_length must be positive".into(),
            ));
        }
        if self.minibatches > self.n_envs {
            return Err(Error::Validation(format!(
                "minibatches {} exceeds n_envs {} (recurrent minibatching is by whole env sequences)",
                self.minibatches, self.n_envs
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LossStats {
    pub policy_loss: f32,
    pub value_loss: f32,
    pub entropy: f32,
    pub clip_frac: f32,
    pub approx_kl: f32,
}

/// Re-unroll the policy over a minibatch of whole env-sequences. Returns
/// per-agent logit nodes and the value node, row-aligned with
/// `rollout.gather_rows(envs)`.
pub(crate) fn unroll(
    net: &PolicyNet<f32>,
    g: &mut Graph<f32>,
    rollout: &Rollout,
    envs: &[usize],
) -> Result<(Vec<NodeId>, NodeId)> {
    let pn = net.param_nodes(g);
    let m = envs.len();
    let obs = g.input(rollout.gather_obs(envs));
    let feat = net.encode(g, &pn, obs)?;
    let featcat = match rollout.gather_aux(envs) {
        Some(aux) => {
            let aux = g.input(aux);
            g.concat_cols(&[feat, aux])?
        }
        None => feat,
    };
    let d_h = net.core_dim();
    let h_all = match net.arch.core {
        CoreDesc::FeedForward { .. } => {
            // No state: one batched core pass.
            net.core_step(g, &pn, featcat, None, featcat)?
        }
        CoreDesc::Gru { .. } => {
            let mut h0 = vec![0.0f32; m * d_h];
            for (j, &e) in envs.iter().enumerate() {
                let src = &rollout.h0.data()[e * d_h..(e + 1) * d_h];
                h0[j * d_h..(j + 1) * d_h].copy_from_slice(src);
            }
            let mut h = g.input(Tensor::new(&[m, d_h], h0)?);
            let mut steps = Vec::with_capacity(rollout.len);
            for t in 0..rollout.len {
                if t > 0 {
                    // Zero the state of envs whose previous step ended an episode.
                    let mut mask = vec![1.0f32; m * d_h];
                    for (j, &e) in envs.iter().enumerate() {
                        if rollout.dones[rollout.row(t - 1, e)] {
                            mask[j * d_h..(j + 1) * d_h].fill(0.0);
                        }
                    }
                    let mask = g.input(Tensor::new(&[m, d_h], mask)?);
                    h = g.mul(h, mask)?;
                }
                let rows = g.slice_rows(featcat, t * m, (t + 1) * m)?;
                h = net.core_step(g, &pn, rows, None, h)?;
                steps.push(h);
            }
            g.concat_rows(&steps)?
        }
    };
    net.heads(g, &pn, h_all)
}

struct MinibatchTensors {
    adv: Vec<f32>,
    returns: Vec<f32>,
    v_old: Vec<f32>,
    logp_old: Vec<Vec<f32>>,
    actions: Vec<Vec<usize>>,
}

fn gather_minibatch(
    rollout: &Rollout,
    envs: &[usize],
    adv_norm: &[f32],
    returns: &[f32],
) -> MinibatchTensors {
    let rows = rollout.gather_rows(envs);
    MinibatchTensors {
        adv: rows.iter().map(|&r| adv_norm[r]).collect(),
        returns: rows.iter().map(|&r| returns[r]).collect(),
        v_old: rows.iter().map(|&r| rollout.values[r]).collect(),
        logp_old: (0..rollout.n_agents)
            .map(|a| rows.iter().map(|&r| rollout.log_probs[a][r]).collect())
            .collect(),
        actions: (0..rollout.n_agents)
            .map(|a| rows.iter().map(|&r| rollout.actions[a][r]).collect())
            .collect(),
    }
}

/// Clipped-surrogate PPO over whole-sequence minibatches.
pub fn ppo_update(
    net: &mut PolicyNet<f32>,
    opt: &mut Adam<f32>,
    rollout: &Rollout,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LossStats> {
    cfg.validate()?;
    let gae = compute_gae(rollout, cfg.gamma, cfg.gae_lambda)?;
    let adv_norm = normalize_advantages(&gae.advantages);
    let mut order: Vec<usize> = (0..rollout.n_envs).collect();
    let mut stats = LossStats::default();
    let mut passes = 0usize;

    for _epoch in 0..cfg.epochs {
        // Deterministic Fisher-Yates on the env order.
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let base = rollout.n_envs / cfg.minibatches;
        let extra = rollout.n_envs % cfg.minibatches;
        let mut cursor = 0usize;
        for mb in 0..cfg.minibatches {
            let take = base + usize::from(mb < extra);
            if take == 0 {
                continue;
            }
            let envs = &order[cursor..cursor + take];
            cursor += take;
            let s = ppo_minibatch(net, opt, rollout, cfg, envs, &adv_norm, &gae.returns)?;
            stats.policy_loss += s.policy_loss;
            stats.value_loss += s.value_loss;
            stats.entropy += s.entropy;
            stats.clip_frac += s.clip_frac;
            stats.approx_kl += s.approx_kl;
            passes += 1;
        }
    }
    let k = passes.max(1) as f32;
    stats.policy_loss /= k;
    stats.value_loss /= k;
    stats.entropy /= k;
    stats.clip_frac /= k;
    stats.approx_kl /= k;
    Ok(stats)
}

fn ppo_minibatch(
    net: &mut PolicyNet<f32>,
    opt: &mut Adam<f32>,
    rollout: &Rollout,
    cfg: &TrainConfig,
    envs: &[usize],
    adv_norm: &[f32],
    returns: &[f32],
) -> Result<LossStats> {
    let mb = gather_minibatch(rollout, envs, adv_norm, returns);
    let n = mb.adv.len();
    let mut g = Graph::new();
    let (logits, value) = unroll(net, &mut g, rollout, envs)?;

    let adv = g.input(Tensor::from_vec(mb.adv.clone()));
    let ret = g.input(Tensor::from_vec(mb.returns.clone()));
    let v_old = g.input(Tensor::from_vec(mb.v_old.clone()));

    let mut total: Option<NodeId> = None;
    let mut policy_loss_val = 0.0f32;
    let mut entropy_val = 0.0f32;
    let mut clip_hits = 0usize;
    let mut kl_sum = 0.0f32;

    for (a, logit) in logits.iter().enumerate() {
        let ls = g.log_softmax(*logit)?;
        let logp_new = g.gather_cols(ls, &mb.actions[a])?;
        let logp_old = g.input(Tensor::from_vec(mb.logp_old[a].clone()));
        let diff = g.sub(logp_new, logp_old)?;
        let ratio = g.exp(diff);
        for &r in g.value(ratio).data() {
            if (r - 1.0).abs() > cfg.clip_eps {
                clip_hits += 1;
            }
        }
        for (new, old) in g.value(logp_new).data().iter().zip(&mb.logp_old[a]) {
            kl_sum += old - new;
        }
        let surr1 = g.mul(ratio, adv)?;
        let clipped = g.clamp(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
        let surr2 = g.mul(clipped, adv)?;
        let surr = g.emin(surr1, surr2)?;
        let mean_surr = g.mean_all(surr);
        let pl = g.neg(mean_surr);
        policy_loss_val += g.value(pl).item();

        let p = g.exp(ls);
        let p_lp = g.mul(p, ls)?;
        let ent_rows = g.row_sum(p_lp)?;
        let ent_neg = g.neg(ent_rows);
        let ent = g.mean_all(ent_neg);
        entropy_val += g.value(ent).item();

        let ent_term = g.scale(ent, -cfg.entropy_coeff);
        let agent_loss = g.add(pl, ent_term)?;
        total = Some(match total {
            Some(t) => g.add(t, agent_loss)?,
            None => agent_loss,
        });
    }

    // Clipped value objective.
    let vdiff = g.sub(value, v_old)?;
    let vclip_delta = g.clamp(vdiff, -cfg.clip_eps, cfg.clip_eps);
    let vclipped = g.add(v_old, vclip_delta)?;
    let e1_diff = g.sub(value, ret)?;
    let e1 = g.square(e1_diff);
    let e2_diff = g.sub(vclipped, ret)?;
    let e2 = g.square(e2_diff);
    let vmax = g.emax(e1, e2)?;
    let vloss = g.mean_all(vmax);
    let value_loss_val = g.value(vloss).item();
    let vterm = g.scale(vloss, cfg.value_coeff);
    let total = g.add(total.expect("at least one agent"), vterm)?;

    let loss_val = g.value(total).item();
    if !loss_val.is_finite() {
        return Err(Error::NonFinite {
            context: "ppo loss",
            detail: format!(
                "loss={loss_val}, policy={policy_loss_val}, value={value_loss_val}, envs={envs:?}"
            ),
        });
    }
    net.params.zero_grad();
    g.backward(total, &mut net.params)?;
    opt.step(&mut net.params)?;

    let n_agents = rollout.n_agents as f32;
    Ok(LossStats {
        policy_loss: policy_loss_val,
        value_loss: value_loss_val,
        entropy: entropy_val / n_agents,
        clip_frac: clip_hits as f32 / (n as f32 * n_agents),
        approx_kl: kl_sum / (n as f32 * n_agents),
    })
}

/// Single-pass synchronous actor-critic:
/// `-logpi(a)*A + value_coeff*(V-R)^2 - entropy_coeff*H`, summed over agents.
pub fn a2c_update(
    net: &mut PolicyNet<f32>,
    opt: &mut Adam<f32>,
    rollout: &Rollout,
    cfg: &TrainConfig,
) -> Result<LossStats> {
    cfg.validate()?;
    let gae = compute_gae(rollout, cfg.gamma, cfg.gae_lambda)?;
    let adv_norm = normalize_advantages(&gae.advantages);
    let envs: Vec<usize> = (0..rollout.n_envs).collect();
    let mb = gather_minibatch(rollout, &envs, &adv_norm, &gae.returns);

    let mut g = Graph::new();
    let (logits, value) = unroll(net, &mut g, rollout, &envs)?;
    let adv = g.input(Tensor::from_vec(mb.adv.clone()));
    let ret = g.input(Tensor::from_vec(mb.returns.clone()));

    let mut total: Option<NodeId> = None;
    let mut policy_loss_val = 0.0f32;
    let mut entropy_val = 0.0f32;
    for (a, logit) in logits.iter().enumerate() {
        let ls = g.log_softmax(*logit)?;
        let logp = g.gather_cols(ls, &mb.actions[a])?;
        let weighted = g.mul(logp, adv)?;
        let mean_w = g.mean_all(weighted);
        let pl = g.neg(mean_w);
        policy_loss_val += g.value(pl).item();

        let p = g.exp(ls);
        let p_lp = g.mul(p, ls)?;
        let ent_rows = g.row_sum(p_lp)?;
        let ent_neg = g.neg(ent_rows);
        let ent = g.mean_all(ent_neg);
        entropy_val += g.value(ent).item();
        let ent_term = g.scale(ent, -cfg.entropy_coeff);

        let agent_loss = g.add(pl, ent_term)?;
        total = Some(match total {
            Some(t) => g.add(t, agent_loss)?,
            None => agent_loss,
        });
    }
    let vdiff = g.sub(value, ret)?;
    let vsq = g.square(vdiff);
    let vloss = g.mean_all(vsq);
    let value_loss_val = g.value(vloss).item();
    let vterm = g.scale(vloss, cfg.value_coeff);
    let total = g.add(total.expect("at least one agent"), vterm)?;

    let loss_val = g.value(total).item();
    if !loss_val.is_finite() {
        return Err(Error::NonFinite {
            context: "a2c loss",
            detail: format!("loss={loss_val}, policy={policy_loss_val}, value={value_loss_val}"),
        });
    }
    net.params.zero_grad();
    g.backward(total, &mut net.params)?;
    opt.step(&mut net.params)?;

    Ok(LossStats {
        policy_loss: policy_loss_val,
        value_loss: value_loss_val,
        entropy: entropy_val / rollout.n_agents as f32,
        clip_frac: 0.0,
        approx_kl: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{build_policy, ArchConfig, Side, TaskDescriptor};
    use crate::optim::AdamConfig;
    use rand::SeedableRng;

    fn vec_task(n_obs: usize, n_actions: usize) -> TaskDescriptor {
        TaskDescriptor {
            task_id: "test".into(),
            grid_obs_shape: vec![n_obs],
            pixel_obs_shape: vec![1, 8, 8],
            aux_dim: 0,
            action_sizes: vec![n_actions],
            recurrent: false,
        }
    }

    fn synthetic_rollout(net: &PolicyNet<f32>, seed: u64) -> Rollout {
        use crate::net::{policy_step, StepMode};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n_envs, len) = (4, 8);
        let mut r = Rollout::new(n_envs, len, &[3], 0, &[2], net.core_dim());
        let h = net.initial_state();
        for t in 0..len {
            for e in 0..n_envs {
                let obs: Vec<f32> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let row = r.row(t, e);
                r.obs[row * 3..(row + 1) * 3].copy_from_slice(&obs);
                let step = policy_step(
                    net,
                    &Tensor::new(&[3], obs).unwrap(),
                    None,
                    &h,
                    StepMode::Sample,
                    &mut rng,
                )
                .unwrap();
                r.actions[0][row] = step.actions[0];
                r.log_probs[0][row] = step.log_probs[0];
                r.values[row] = step.value;
                r.rewards[row] = rng.gen_range(-1.0..1.0);
                r.dones[row] = rng.gen_bool(0.1);
            }
        }
        r
    }

    #[test]
    fn first_pass_ratios_are_one_and_clip_frac_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net: PolicyNet<f32> =
            build_policy(&vec_task(3, 2), Side::Grid, &ArchConfig::tiny(), &mut rng).unwrap();
        // Give the actor head nonzero weights so log-probs vary.
        let slot = net.params.slot_of("head.actor0.w").unwrap();
        for v in net.params.get_mut(slot).data_mut() {
            *v = 0.05;
        }
        let rollout = synthetic_rollout(&net, 3);
        let cfg = TrainConfig {
            epochs: 1,
            minibatches: 1,
            ..TrainConfig::default()
        };
        let mut opt = Adam::new(&net.params, AdamConfig::default());
        let mut urng = ChaCha8Rng::seed_from_u64(1);
        let stats = ppo_update(&mut net, &mut opt, &rollout, &cfg, &mut urng).unwrap();
        assert_eq!(stats.clip_frac, 0.0);
        assert!(stats.approx_kl.abs() < 1e-5);
    }

    #[test]
    fn zero_advantages_leave_policy_gradient_to_entropy_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net: PolicyNet<f32> =
            build_policy(&vec_task(3, 2), Side::Grid, &ArchConfig::tiny(), &mut rng).unwrap();
        let mut rollout = synthetic_rollout(&net, 6);
        // Constant rewards + zero values + no terminals => constant raw
        // advantages => normalized advantages are ~0 everywhere.
        rollout.rewards.iter_mut().for_each(|r| *r = 0.0);
        rollout.values.iter_mut().for_each(|v| *v = 0.0);
        rollout.dones.iter_mut().for_each(|d| *d = false);
        rollout.bootstrap.iter_mut().for_each(|b| *b = 0.0);
        let cfg = TrainConfig {
            epochs: 1,
            minibatches: 1,
            entropy_coeff: 0.0,
            value_coeff: 0.0,
            ..TrainConfig::default()
        };
        let mut opt = Adam::new(&net.params, AdamConfig::default());
        let before: Vec<f32> = net.params.get(net.params.slot_of("enc.mlp0.w").unwrap()).data().to_vec();
        let mut urng = ChaCha8Rng::seed_from_u64(2);
        ppo_update(&mut net, &mut opt, &rollout, &cfg, &mut urng).unwrap();
        let after = net.params.get(net.params.slot_of("enc.mlp0.w").unwrap()).data().to_vec();
        assert_eq!(before, after);
    }

    #[test]
    fn a2c_matches_unclipped_single_pass_ppo_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let task = vec_task(3, 2);
        let net_a: PolicyNet<f32> =
            build_policy(&task, Side::Grid, &ArchConfig::tiny(), &mut rng).unwrap();
        let mut net_b = net_a.clone();
        let mut net_a = net_a;
        let rollout = synthetic_rollout(&net_a, 11);

        // Zero-lr optimizers: we only compare accumulated gradients.
        let cfg_ppo = TrainConfig {
            epochs: 1,
            minibatches: 1,
            clip_eps: f32::INFINITY,
            lr: 0.0,
            ..TrainConfig::default()
        };
        let cfg_a2c = TrainConfig {
            lr: 0.0,
            ..cfg_ppo.clone()
        };
        let zero_lr = AdamConfig { lr: 0.0, ..AdamConfig::default() };
        let mut opt_a = Adam::new(&net_a.params, zero_lr);
        let mut opt_b = Adam::new(&net_b.params, zero_lr);
        let mut urng = ChaCha8Rng::seed_from_u64(0);
        ppo_update(&mut net_a, &mut opt_a, &rollout, &cfg_ppo, &mut urng).unwrap();
        a2c_update(&mut net_b, &mut opt_b, &rollout, &cfg_a2c).unwrap();
        for slot in 0..net_a.params.len() {
            let ga = net_a.params.get(slot).grad().unwrap_or(&[]);
            let gb = net_b.params.get(slot).grad().unwrap_or(&[]);
            for (x, y) in ga.iter().zip(gb) {
                assert!(
                    (x - y).abs() <= 1e-5 * x.abs().max(y.abs()).max(1.0),
                    "{}: {x} vs {y}",
                    net_a.params.name(slot)
                );
            }
        }
    }
}
