//! Rollout storage and synchronous collection across a pool of
//! environments.
//!
//! Per-env trajectories depend only on that env's own RNG stream and the
//! acting policy, never on worker scheduling, so runs with different
//! `n_workers` produce identical data env-by-env.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::env::{self, EnvState, Obs, StepInfo, TaskKind, WorldConfig, WorldState};
use crate::error::{Error, Result};
use crate::net::{AgentStep, PolicyNet, Side, StepMode};
use crate::rewards::{compute_reward, RewardBreakdown, RewardHistory, RewardSpec};
use crate::tensor::Tensor;

/// Rendered observations for one acting step.
pub struct StoredObs {
    pub grid: Option<Obs>,
    pub pixel: Option<Obs>,
}

impl StoredObs {
    pub fn side(&self, side: Side) -> &Obs {
        match side {
            Side::Grid => self.grid.as_ref().expect("grid obs not rendered"),
            Side::Pixel => self.pixel.as_ref().expect("pixel obs not rendered"),
        }
    }
}

/// What one acting policy decided at one step.
pub struct ActDecision {
    /// The learner-side step (distributions, sampled actions, log-probs of
    /// the executed actions, value, new recurrent state).
    pub step: AgentStep,
    /// Actions actually executed in the environment.
    pub executed: Vec<usize>,
    /// Full expert distributions when an expert was consulted.
    pub expert_dists: Option<Vec<Vec<f32>>>,
    /// Teacher-forcing draw for this step.
    pub teacher_forced: bool,
}

/// Exploration policy driving collection. Implementations carry per-env
/// mutable context (`EnvCtx`) so envs can be acted on concurrently.
pub trait ActingPolicy: Sync {
    type EnvCtx: Send;

    fn init_ctx(&self) -> Self::EnvCtx;
    /// Reset per-env context at an episode boundary.
    fn reset_ctx(&self, ctx: &mut Self::EnvCtx);
    fn needs_grid(&self) -> bool;
    fn needs_pixel(&self) -> bool;
    fn act(
        &self,
        ctx: &mut Self::EnvCtx,
        obs: &StoredObs,
        h: &Tensor<f32>,
        clock: u32,
        rng: &mut ChaCha8Rng,
    ) -> Result<ActDecision>;
    /// State-value estimate used to bootstrap truncated episodes.
    fn bootstrap_value(&self, obs: &StoredObs, h: &Tensor<f32>) -> Result<f32>;
}

/// Plain learner-as-actor: sample from the policy on its own side.
pub struct NetActor<'a> {
    pub net: &'a PolicyNet<f32>,
    pub side: Side,
}

impl<'a> ActingPolicy for NetActor<'a> {
    type EnvCtx = ();

    fn init_ctx(&self) {}
    fn reset_ctx(&self, _: &mut ()) {}

    fn needs_grid(&self) -> bool {
        self.side == Side::Grid
    }
    fn needs_pixel(&self) -> bool {
        self.side == Side::Pixel
    }

    fn act(
        &self,
        _ctx: &mut (),
        obs: &StoredObs,
        h: &Tensor<f32>,
        _clock: u32,
        rng: &mut ChaCha8Rng,
    ) -> Result<ActDecision> {
        let o = obs.side(self.side);
        let aux = if o.aux.is_empty() { None } else { Some(&o.aux[..]) };
        let step = crate::net::policy_step(self.net, &o.tensor, aux, h, StepMode::Sample, rng)?;
        Ok(ActDecision {
            executed: step.actions.clone(),
            step,
            expert_dists: None,
            teacher_forced: false,
        })
    }

    fn bootstrap_value(&self, obs: &StoredObs, h: &Tensor<f32>) -> Result<f32> {
        let o = obs.side(self.side);
        let aux = if o.aux.is_empty() { None } else { Some(&o.aux[..]) };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let step =
            crate::net::policy_step(self.net, &o.tensor, aux, h, StepMode::Argmax, &mut rng)?;
        Ok(step.value)
    }
}

/// One environment slot owned by the collector.
pub struct EnvSlot {
    pub state: EnvState,
    pub h: Tensor<f32>,
    pub rng: ChaCha8Rng,
    pub reward_history: RewardHistory,
    pub episode_return: f32,
    pub episode_len: u32,
    pub episode_counter: u64,
}

/// Distance quantity that seeds per-episode reward history.
pub fn initial_distance(state: &EnvState) -> f32 {
    match &state.world {
        WorldState::GridNav(w) => w.geodesic() as f32,
        WorldState::Transport(w) => w.distance() as f32,
        WorldState::PredPrey(w) => {
            let mut sum = 0.0;
            for p in &w.predators {
                let nearest = w
                    .prey
                    .iter()
                    .map(|q| ((p.x - q.x).powi(2) + (p.y - q.y).powi(2)).sqrt())
                    .fold(f32::MAX, f32::min);
                sum += nearest;
            }
            sum / w.predators.len() as f32
        }
    }
}

pub struct EnvPool {
    pub task: TaskKind,
    pub world_cfg: WorldConfig,
    pub reward_spec: RewardSpec,
    pub slots: Vec<EnvSlot>,
    pub core_dim: usize,
    /// World seeds are drawn from `[seed_lo, seed_hi)`.
    pub seed_lo: u64,
    pub seed_hi: u64,
    pub n_workers: usize,
}

/// Training worlds draw seeds from `[0, 1e6)`; evaluation uses a disjoint
/// partition starting at 1e6.
pub const TRAIN_SEED_LO: u64 = 0;
pub const TRAIN_SEED_HI: u64 = 1_000_000;
pub const EVAL_SEED_LO: u64 = 1_000_000;
pub const EVAL_SEED_HI: u64 = 1_000_500;

impl EnvPool {
    pub fn new(
        task: TaskKind,
        world_cfg: WorldConfig,
        reward_spec: RewardSpec,
        n_envs: usize,
        master_seed: u64,
        core_dim: usize,
        n_workers: usize,
    ) -> Result<EnvPool> {
        if n_envs == 0 {
            return Err(Error::Validation("need at least one env".into()));
        }
        let mut slots = Vec::with_capacity(n_envs);
        for i in 0..n_envs {
            // Independent per-slot streams: same master seed, distinct stream id.
            let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
            rng.set_stream(i as u64 + 1);
            let world_seed = rng.gen_range(TRAIN_SEED_LO..TRAIN_SEED_HI);
            let state = env::generate_world(task, world_seed, &world_cfg)?;
            let reward_history = RewardHistory::new(initial_distance(&state), &reward_spec);
            slots.push(EnvSlot {
                state,
                h: Tensor::zeros(&[1, core_dim]),
                rng,
                reward_history,
                episode_return: 0.0,
                episode_len: 0,
                episode_counter: 0,
            });
        }
        Ok(EnvPool {
            task,
            world_cfg,
            reward_spec,
            slots,
            core_dim,
            seed_lo: TRAIN_SEED_LO,
            seed_hi: TRAIN_SEED_HI,
            n_workers,
        })
    }

    pub fn n_envs(&self) -> usize {
        self.slots.len()
    }

    fn reset_slot(&mut self, i: usize) -> Result<()> {
        let slot = &mut self.slots[i];
        let world_seed = slot.rng.gen_range(self.seed_lo..self.seed_hi);
        slot.state = env::generate_world(self.task, world_seed, &self.world_cfg)?;
        slot.reward_history = RewardHistory::new(initial_distance(&slot.state), &self.reward_spec);
        slot.h = Tensor::zeros(&[1, self.core_dim]);
        slot.episode_return = 0.0;
        slot.episode_len = 0;
        slot.episode_counter += 1;
        Ok(())
    }
}

/// Stats of episodes that finished during collection.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeStat {
    pub ret: f32,
    pub len: u32,
    pub success: bool,
}

/// Time-major rollout storage; row `t * n_envs + e`.
pub struct Rollout {
    pub n_envs: usize,
    pub len: usize,
    pub n_agents: usize,
    pub obs_shape: Vec<usize>,
    pub aux_dim: usize,
    pub action_sizes: Vec<usize>,
    pub obs: Vec<f32>,
    pub aux: Vec<f32>,
    /// Executed actions, per agent.
    pub actions: Vec<Vec<usize>>,
    /// Learner log-probs of the executed actions, per agent.
    pub log_probs: Vec<Vec<f32>>,
    pub values: Vec<f32>,
    pub rewards: Vec<f32>,
    pub breakdowns: Vec<RewardBreakdown>,
    pub dones: Vec<bool>,
    pub infos: Vec<StepInfo>,
    /// Recurrent state of each env at the segment start.
    pub h0: Tensor<f32>,
    /// Value bootstrap for each env at the segment end.
    pub bootstrap: Vec<f32>,
    /// Expert target distributions, per agent, flattened `[row * n_actions]`.
    pub expert_dists: Option<Vec<Vec<f32>>>,
    /// Teacher-forcing draw per row.
    pub tf_draws: Vec<bool>,
    pub finished_episodes: Vec<EpisodeStat>,
}

impl Rollout {
    pub fn new(
        n_envs: usize,
        len: usize,
        obs_shape: &[usize],
        aux_dim: usize,
        action_sizes: &[usize],
        core_dim: usize,
    ) -> Rollout {
        let rows = n_envs * len;
        let obs_elems: usize = obs_shape.iter().product();
        let n_agents = action_sizes.len();
        Rollout {
            n_envs,
            len,
            n_agents,
            obs_shape: obs_shape.to_vec(),
            aux_dim,
            action_sizes: action_sizes.to_vec(),
            obs: vec![0.0; rows * obs_elems],
            aux: vec![0.0; rows * aux_dim],
            actions: vec![vec![0; rows]; n_agents],
            log_probs: vec![vec![0.0; rows]; n_agents],
            values: vec![0.0; rows],
            rewards: vec![0.0; rows],
            breakdowns: vec![
                RewardBreakdown {
                    success_term: 0.0,
                    progress_term: 0.0,
                    indep_term: 0.0,
                    total: 0.0
                };
                rows
            ],
            dones: vec![false; rows],
            infos: vec![StepInfo::default(); rows],
            h0: Tensor::zeros(&[n_envs, core_dim]),
            bootstrap: vec![0.0; n_envs],
            expert_dists: None,
            tf_draws: vec![false; rows],
            finished_episodes: Vec::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.n_envs * self.len
    }

    pub fn row(&self, t: usize, e: usize) -> usize {
        t * self.n_envs + e
    }

    pub fn obs_elems(&self) -> usize {
        self.obs_shape.iter().product()
    }

    pub fn write_obs(&mut self, t: usize, e: usize, obs: &Obs) {
        let row = self.row(t, e);
        let k = self.obs_elems();
        self.obs[row * k..(row + 1) * k].copy_from_slice(obs.tensor.data());
        if self.aux_dim > 0 {
            self.aux[row * self.aux_dim..(row + 1) * self.aux_dim].copy_from_slice(&obs.aux);
        }
    }

    /// Minibatch obs tensor `[len * m, ...obs_shape]` for the given envs,
    /// time-major within the minibatch.
    pub fn gather_obs(&self, envs: &[usize]) -> Tensor<f32> {
        let k = self.obs_elems();
        let m = envs.len();
        let mut data = vec![0.0f32; self.len * m * k];
        for t in 0..self.len {
            for (j, &e) in envs.iter().enumerate() {
                let src = self.row(t, e) * k;
                let dst = (t * m + j) * k;
                data[dst..dst + k].copy_from_slice(&self.obs[src..src + k]);
            }
        }
        let mut shape = vec![self.len * m];
        shape.extend_from_slice(&self.obs_shape);
        Tensor::new(&shape, data).unwrap()
    }

    pub fn gather_aux(&self, envs: &[usize]) -> Option<Tensor<f32>> {
        if self.aux_dim == 0 {
            return None;
        }
        let m = envs.len();
        let mut data = vec![0.0f32; self.len * m * self.aux_dim];
        for t in 0..self.len {
            for (j, &e) in envs.iter().enumerate() {
                let src = self.row(t, e) * self.aux_dim;
                let dst = (t * m + j) * self.aux_dim;
                data[dst..dst + self.aux_dim]
                    .copy_from_slice(&self.aux[src..src + self.aux_dim]);
            }
        }
        Some(Tensor::new(&[self.len * m, self.aux_dim], data).unwrap())
    }

    /// Row indices (into flat storage) in minibatch order.
    pub fn gather_rows(&self, envs: &[usize]) -> Vec<usize> {
        let mut rows = Vec::with_capacity(self.len * envs.len());
        for t in 0..self.len {
            for &e in envs {
                rows.push(self.row(t, e));
            }
        }
        rows
    }
}

struct SlotResult {
    decision: ActDecision,
    obs: StoredObs,
}

/// Collect `len` synchronous steps from every env in the pool. Auto-resets
/// finished episodes with fresh seeds from each slot's own stream.
pub fn collect_rollout<A: ActingPolicy>(
    pool: &mut EnvPool,
    actor: &A,
    ctxs: &mut [A::EnvCtx],
    len: usize,
    train_side: Side,
) -> Result<Rollout> {
    let task_desc = env::task_descriptor(pool.task, &pool.world_cfg);
    let obs_shape = match train_side {
        Side::Grid => task_desc.grid_obs_shape.clone(),
        Side::Pixel => task_desc.pixel_obs_shape.clone(),
    };
    let n_envs = pool.n_envs();
    let mut rollout = Rollout::new(
        n_envs,
        len,
        &obs_shape,
        task_desc.aux_dim,
        &task_desc.action_sizes,
        pool.core_dim,
    );
    let needs_grid = actor.needs_grid() || train_side == Side::Grid;
    let needs_pixel = actor.needs_pixel() || train_side == Side::Pixel;

    for (e, slot) in pool.slots.iter().enumerate() {
        let h0 = rollout.h0.data_mut();
        h0[e * pool.core_dim..(e + 1) * pool.core_dim].copy_from_slice(slot.h.data());
    }

    for t in 0..len {
        let render = |state: &EnvState| StoredObs {
            grid: needs_grid.then(|| env::render_grid(state)),
            pixel: needs_pixel.then(|| env::render_pixel(state)),
        };
        // Acting phase: per-env, parallel when configured. Each result
        // depends only on the slot's own state/rng/ctx.
        let results: Vec<Result<SlotResult>> = if pool.n_workers > 1 {
            pool.slots
                .par_iter_mut()
                .zip(ctxs.par_iter_mut())
                .map(|(slot, ctx)| {
                    let obs = render(&slot.state);
                    let decision = actor.act(ctx, &obs, &slot.h, slot.state.t, &mut slot.rng)?;
                    Ok(SlotResult { decision, obs })
                })
                .collect()
        } else {
            pool.slots
                .iter_mut()
                .zip(ctxs.iter_mut())
                .map(|(slot, ctx)| {
                    let obs = render(&slot.state);
                    let decision = actor.act(ctx, &obs, &slot.h, slot.state.t, &mut slot.rng)?;
                    Ok(SlotResult { decision, obs })
                })
                .collect()
        };

        // Stepping phase: sequential, owns reward history and resets.
        for (e, result) in results.into_iter().enumerate() {
            let SlotResult { decision, obs } = result.map_err(|err| {
                Error::Usage(format!("env {e}: {err}"))
            })?;
            let slot = &mut pool.slots[e];
            let info = env::step(&mut slot.state, &decision.executed)
                .map_err(|err| Error::Usage(format!("env {e}: {err}")))?;
            let breakdown = compute_reward(
                &pool.reward_spec,
                &info,
                slot.state.t,
                slot.state.max_steps,
                Some(&mut slot.reward_history),
            )?;

            rollout.write_obs(t, e, obs.side(train_side));
            let row = rollout.row(t, e);
            for (a, &act) in decision.executed.iter().enumerate() {
                rollout.actions[a][row] = act;
                rollout.log_probs[a][row] = decision.step.log_probs[a];
            }
            rollout.values[row] = decision.step.value;
            rollout.rewards[row] = breakdown.total;
            rollout.breakdowns[row] = breakdown;
            rollout.dones[row] = slot.state.done;
            rollout.infos[row] = info;
            rollout.tf_draws[row] = decision.teacher_forced;
            if let Some(dists) = decision.expert_dists {
                let store = rollout.expert_dists.get_or_insert_with(|| {
                    task_desc
                        .action_sizes
                        .iter()
                        .map(|&n| vec![0.0f32; n_envs * len * n])
                        .collect()
                });
                for (a, dist) in dists.iter().enumerate() {
                    let n = task_desc.action_sizes[a];
                    store[a][row * n..(row + 1) * n].copy_from_slice(dist);
                }
            }

            slot.episode_return += breakdown.total;
            slot.episode_len += 1;
            slot.h = decision.step.h_new;

            if slot.state.done {
                rollout.finished_episodes.push(EpisodeStat {
                    ret: slot.episode_return,
                    len: slot.episode_len,
                    success: slot.state.success,
                });
                pool.reset_slot(e)?;
                actor.reset_ctx(&mut ctxs[e]);
            }
        }
    }

    // Bootstrap values on the post-rollout observations.
    for (e, slot) in pool.slots.iter().enumerate() {
        let obs = StoredObs {
            grid: needs_grid.then(|| env::render_grid(&slot.state)),
            pixel: needs_pixel.then(|| env::render_pixel(&slot.state)),
        };
        rollout.bootstrap[e] = actor.bootstrap_value(&obs, &slot.h)?;
    }
    Ok(rollout)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{build_policy, ArchConfig};
    use crate::rewards::preset;

    fn pool(n_envs: usize, n_workers: usize) -> EnvPool {
        EnvPool::new(
            TaskKind::GridNav,
            WorldConfig::default(),
            preset("pointnav_shaped").unwrap(),
            n_envs,
            123,
            10,
            n_workers,
        )
        .unwrap()
    }

    fn tiny_net() -> PolicyNet<f32> {
        let task = env::task_descriptor(TaskKind::GridNav, &WorldConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        build_policy(&task, Side::Grid, &ArchConfig::tiny(), &mut rng).unwrap()
    }

    #[test]
    fn rollout_rows_are_time_major() {
        let r = Rollout::new(3, 4, &[2], 0, &[5], 8);
        assert_eq!(r.row(0, 0), 0);
        assert_eq!(r.row(0, 2), 2);
        assert_eq!(r.row(1, 0), 3);
        assert_eq!(r.rows(), 12);
    }

    #[test]
    fn auto_reset_provides_fresh_episode_after_done() {
        let net = tiny_net();
        let actor = NetActor { net: &net, side: Side::Grid };
        let mut p = pool(2, 1);
        let mut ctxs: Vec<()> = (0..2).map(|_| actor.init_ctx()).collect();
        let r = collect_rollout(&mut p, &actor, &mut ctxs, 64, Side::Grid).unwrap();
        // A uniform random policy stops early ~25% of steps, so some episode
        // must have finished and the pool must hold live episodes.
        assert!(!r.finished_episodes.is_empty());
        for slot in &p.slots {
            assert!(!slot.state.done);
        }
        // After any done row, the same env's next row starts a new episode:
        // its reward history was reset (episode counter advanced).
        assert!(p.slots.iter().any(|s| s.episode_counter > 0));
    }

    #[test]
    fn worker_count_does_not_change_trajectories() {
        let net = tiny_net();
        let actor = NetActor { net: &net, side: Side::Grid };
        let mut p1 = pool(4, 1);
        let mut p4 = pool(4, 4);
        let mut c1: Vec<()> = (0..4).map(|_| actor.init_ctx()).collect();
        let mut c4: Vec<()> = (0..4).map(|_| actor.init_ctx()).collect();
        let r1 = collect_rollout(&mut p1, &actor, &mut c1, 32, Side::Grid).unwrap();
        let r4 = collect_rollout(&mut p4, &actor, &mut c4, 32, Side::Grid).unwrap();
        assert_eq!(r1.rewards, r4.rewards);
        assert_eq!(r1.actions[0], r4.actions[0]);
        assert_eq!(r1.dones, r4.dones);
        assert_eq!(r1.obs, r4.obs);
    }
}
