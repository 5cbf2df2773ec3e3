//! Grid-to-pixel distillation: a frozen grid-side expert supervises a
//! pixel-side student with full soft-target cross-entropy on the states the
//! exploration policy actually visits. Exploration anneals from teacher
//! forcing to student forcing with a per-step Bernoulli draw.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gae::compute_gae;
use crate::graph::{Graph, NodeId};
use crate::net::{argmax_tie_low, policy_step, AgentStep, PolicyNet, Side, StepMode};
use crate::optim::Adam;
use crate::rollout::{ActDecision, ActingPolicy, Rollout, StoredObs};
use crate::tensor::Tensor;
use crate::update::{unroll, LossStats, TrainConfig};

/// Frozen grid-side expert. Parameters are never updated after load, and
/// evaluation paths take no expert at all.
pub struct ExpertHandle {
    net: PolicyNet<f32>,
}

/// Per-env expert recurrent state, advanced along the exploration
/// trajectory. The clock mirrors the env clock to catch desynchronization.
pub struct ExpertCtx {
    pub h: Tensor<f32>,
    pub expected_clock: u32,
}

impl ExpertHandle {
    pub fn new(net: PolicyNet<f32>) -> Result<ExpertHandle> {
        if net.arch.side != Side::Grid {
            return Err(Error::CheckpointArch(format!(
                "expert must be a grid-side policy, got {}",
                net.arch.side
            )));
        }
        Ok(ExpertHandle { net })
    }

    pub fn net(&self) -> &PolicyNet<f32> {
        &self.net
    }

    pub fn init_ctx(&self) -> ExpertCtx {
        ExpertCtx {
            h: self.net.initial_state(),
            expected_clock: 0,
        }
    }

    pub fn reset_ctx(&self, ctx: &mut ExpertCtx) {
        ctx.h = self.net.initial_state();
        ctx.expected_clock = 0;
    }

    /// Full per-agent action distributions at the given grid observation,
    /// advancing the expert's hidden state. `clock` is the env step count;
    /// a mismatch means the env was reset without resetting the expert.
    pub fn distribution(
        &self,
        ctx: &mut ExpertCtx,
        grid_obs: &crate::env::Obs,
        clock: u32,
    ) -> Result<Vec<Vec<f32>>> {
        if clock != ctx.expected_clock {
            return Err(Error::Usage(format!(
                "expert hidden state desynchronized: env clock {clock}, expert clock {}",
                ctx.expected_clock
            )));
        }
        let aux = if grid_obs.aux.is_empty() {
            None
        } else {
            Some(&grid_obs.aux[..])
        };
        // Argmax mode consumes no randomness; only the distributions matter.
        let mut dummy = ChaCha8Rng::seed_from_u64(0);
        let step = policy_step(
            &self.net,
            &grid_obs.tensor,
            aux,
            &ctx.h,
            StepMode::Argmax,
            &mut dummy,
        )?;
        ctx.h = step.h_new;
        ctx.expected_clock += 1;
        Ok(step.dists)
    }
}

/// Teacher-forcing probability schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AnnealSchedule {
    Linear { p0: f32, p1: f32, steps: u64 },
    Exponential { p0: f32, half_life_steps: u64 },
    Constant { p: f32 },
}

impl AnnealSchedule {
    pub fn p(&self, step: u64) -> f32 {
        let v = match self {
            AnnealSchedule::Linear { p0, p1, steps } => {
                if *steps == 0 || step >= *steps {
                    *p1
                } else {
                    p0 + (p1 - p0) * (step as f32 / *steps as f32)
                }
            }
            AnnealSchedule::Exponential { p0, half_life_steps } => {
                if *half_life_steps == 0 {
                    0.0
                } else {
                    p0 * 0.5f32.powf(step as f32 / *half_life_steps as f32)
                }
            }
            AnnealSchedule::Constant { p } => *p,
        };
        v.clamp(0.0, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            AnnealSchedule::Linear { p0, p1, .. } => {
                (0.0..=1.0).contains(p0) && (0.0..=1.0).contains(p1)
            }
            AnnealSchedule::Exponential { p0, .. } => (0.0..=1.0).contains(p0),
            AnnealSchedule::Constant { p } => (0.0..=1.0).contains(p),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Validation("schedule probabilities must lie in [0,1]".into()))
        }
    }
}

/// One Bernoulli(p) draw per step (not per agent): teacher forcing executes
/// the expert argmax, student forcing the student's samples.
pub fn mix_action(
    student_step: &AgentStep,
    expert_dists: &[Vec<f32>],
    p: f32,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, bool) {
    let teacher = match p {
        p if p <= 0.0 => false,
        p if p >= 1.0 => true,
        p => rng.gen_bool(p as f64),
    };
    let executed = if teacher {
        expert_dists.iter().map(|d| argmax_tie_low(d)).collect()
    } else {
        student_step.actions.clone()
    };
    (executed, teacher)
}

/// DAgger exploration policy: student acts on pixels, expert supplies soft
/// targets from the mirrored grid view of the very same states.
pub struct DaggerActor<'a> {
    pub student: &'a PolicyNet<f32>,
    pub expert: &'a ExpertHandle,
    /// Teacher-forcing probability for this collection round.
    pub p: f32,
}

impl<'a> ActingPolicy for DaggerActor<'a> {
    type EnvCtx = ExpertCtx;

    fn init_ctx(&self) -> ExpertCtx {
        self.expert.init_ctx()
    }

    fn reset_ctx(&self, ctx: &mut ExpertCtx) {
        self.expert.reset_ctx(ctx);
    }

    fn needs_grid(&self) -> bool {
        true
    }

    fn needs_pixel(&self) -> bool {
        true
    }

    fn act(
        &self,
        ctx: &mut ExpertCtx,
        obs: &StoredObs,
        h: &Tensor<f32>,
        clock: u32,
        rng: &mut ChaCha8Rng,
    ) -> Result<ActDecision> {
        let pixel = obs.side(Side::Pixel);
        let aux = if pixel.aux.is_empty() {
            None
        } else {
            Some(&pixel.aux[..])
        };
        let mut step = policy_step(self.student, &pixel.tensor, aux, h, StepMode::Sample, rng)?;
        let expert_dists = self
            .expert
            .distribution(ctx, obs.side(Side::Grid), clock)?;
        let (executed, teacher) = mix_action(&step, &expert_dists, self.p, rng);
        if teacher {
            // Log-probs must describe the executed (expert) actions.
            for (a, &act) in executed.iter().enumerate() {
                step.log_probs[a] = step.dists[a][act].max(1e-8).ln();
            }
        }
        Ok(ActDecision {
            step,
            executed,
            expert_dists: Some(expert_dists),
            teacher_forced: teacher,
        })
    }

    fn bootstrap_value(&self, obs: &StoredObs, h: &Tensor<f32>) -> Result<f32> {
        let pixel = obs.side(Side::Pixel);
        let aux = if pixel.aux.is_empty() {
            None
        } else {
            Some(&pixel.aux[..])
        };
        let mut dummy = ChaCha8Rng::seed_from_u64(0);
        let step = policy_step(self.student, &pixel.tensor, aux, h, StepMode::Argmax, &mut dummy)?;
        Ok(step.value)
    }
}

/// Cross-entropy of the student logits against the rollout's stored expert
/// distributions, averaged over steps and agents.
fn ce_against_expert(
    g: &mut Graph<f32>,
    rollout: &Rollout,
    envs: &[usize],
    logits: &[NodeId],
) -> Result<NodeId> {
    let expert = rollout
        .expert_dists
        .as_ref()
        .ok_or_else(|| Error::Usage("rollout carries no expert distributions".into()))?;
    let rows = rollout.gather_rows(envs);
    let mut total: Option<NodeId> = None;
    for (a, logit) in logits.iter().enumerate() {
        let n = rollout.action_sizes[a];
        let mut target = vec![0.0f32; rows.len() * n];
        for (j, &r) in rows.iter().enumerate() {
            target[j * n..(j + 1) * n].copy_from_slice(&expert[a][r * n..(r + 1) * n]);
        }
        let target = g.input(Tensor::new(&[rows.len(), n], target)?);
        let ce = g.softmax_cross_entropy(*logit, target)?;
        let mean = g.mean_all(ce);
        total = Some(match total {
            Some(t) => g.add(t, mean)?,
            None => mean,
        });
    }
    let total = total.expect("at least one agent");
    Ok(g.scale(total, 1.0 / rollout.n_agents as f32))
}

/// Distillation loss node: mean over steps and agents of the cross-entropy
/// between the expert distribution and the student policy, on the states
/// the exploration policy visited.
pub fn gridtopix_loss_graph(
    net: &PolicyNet<f32>,
    g: &mut Graph<f32>,
    rollout: &Rollout,
    envs: &[usize],
) -> Result<NodeId> {
    let (logits, _value) = unroll(net, g, rollout, envs)?;
    ce_against_expert(g, rollout, envs, &logits)
}

/// Scalar convenience wrapper over [`gridtopix_loss_graph`].
pub fn gridtopix_loss(net: &PolicyNet<f32>, rollout: &Rollout) -> Result<f32> {
    let envs: Vec<usize> = (0..rollout.n_envs).collect();
    let mut g = Graph::new();
    let loss = gridtopix_loss_graph(net, &mut g, rollout, &envs)?;
    Ok(g.value(loss).item())
}

/// One imitation update: distillation cross-entropy plus a value-regression
/// term that keeps the critic useful for a later reward-based phase.
pub fn il_update(
    net: &mut PolicyNet<f32>,
    opt: &mut Adam<f32>,
    rollout: &Rollout,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LossStats> {
    cfg.validate()?;
    let gae = compute_gae(rollout, cfg.gamma, cfg.gae_lambda)?;
    let mut order: Vec<usize> = (0..rollout.n_envs).collect();
    let mut stats = LossStats::default();
    let mut passes = 0usize;
    for _epoch in 0..cfg.epochs {
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
            let envs: Vec<usize> = order[cursor..cursor + take].to_vec();
            cursor += take;

            let mut g = Graph::new();
            let (logits, value) = unroll(net, &mut g, rollout, &envs)?;
            let ce = ce_against_expert(&mut g, rollout, &envs, &logits)?;
            let ce_val = g.value(ce).item();

            // Critic regression on observed returns.
            let loss = if cfg.value_coeff > 0.0 {
                let rows = rollout.gather_rows(&envs);
                let returns: Vec<f32> = rows.iter().map(|&r| gae.returns[r]).collect();
                let ret = g.input(Tensor::from_vec(returns));
                let diff = g.sub(value, ret)?;
                let sq = g.square(diff);
                let vloss = g.mean_all(sq);
                stats.value_loss += g.value(vloss).item();
                let vterm = g.scale(vloss, cfg.value_coeff);
                g.add(ce, vterm)?
            } else {
                ce
            };
            let loss_val = g.value(loss).item();
            if !loss_val.is_finite() {
                return Err(Error::NonFinite {
                    context: "distillation loss",
                    detail: format!("loss={loss_val}"),
                });
            }
            net.params.zero_grad();
            g.backward(loss, &mut net.params)?;
            opt.step(&mut net.params)?;
            stats.policy_loss += ce_val;
            passes += 1;
        }
    }
    let k = passes.max(1) as f32;
    stats.policy_loss /= k;
    stats.value_loss /= k;
    Ok(stats)
}
