//! Evaluation loop and metrics: Success, SPL, MD-SPL, episode length,
//! invalid probability mass, final distance, average reward, plus the BFS
//! shortest-path oracle.
//!
//! Evaluation is structurally expert-free: it takes a policy and seeds,
//! nothing else.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{self, gridnav::GridMap, EnvState, TaskKind, WorldConfig, WorldState};
use crate::error::{Error, Result};
use crate::net::{policy_step, PolicyNet, Side, StepMode};
use crate::rewards::{compute_reward, RewardHistory, RewardSpec};
use crate::rollout::{initial_distance, EVAL_SEED_HI, EVAL_SEED_LO};

/// Exact unweighted shortest path length in cells (4-connected), or `None`
/// when unreachable. Start or goal on a wall is a usage error.
pub fn bfs_shortest_path(map: &GridMap, start: (i32, i32), goal: (i32, i32)) -> Result<Option<u32>> {
    if map.is_wall(start.0, start.1) || map.is_wall(goal.0, goal.1) {
        return Err(Error::Usage("bfs start or goal on a wall".into()));
    }
    let dist = map.distance_field(goal);
    let d = dist[map.idx(start.0, start.1)];
    Ok(if d == env::gridnav::UNREACHABLE {
        None
    } else {
        Some(d)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub seed: u64,
    pub success: bool,
    pub steps: u32,
    /// Cells traversed by the agent (navigation) — rotations are free.
    pub path_cells: u32,
    /// Oracle lower bound: BFS shortest path (navigation) or initial
    /// Manhattan distance (transport). Zero where undefined.
    pub oracle_len: u32,
    pub initial_distance: f32,
    pub final_distance: f32,
    /// Mean per-step probability mass on uncoordinated joint actions
    /// (transport only; zero elsewhere).
    pub invalid_mass: f32,
    pub total_reward: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub checkpoint_step: u64,
    pub seed_lo: u64,
    pub seed_hi: u64,
    pub records: Vec<EpisodeRecord>,
    pub success_rate: f32,
    /// SPL for navigation, MD-SPL for transport, 0 for predator-prey.
    pub spl_or_mdspl: f32,
    pub mean_ep_len: f32,
    pub mean_invalid_mass: f32,
    pub mean_final_distance: f32,
    pub mean_reward: f32,
    pub std_reward: f32,
}

/// Success weighted by path length: `mean(S_i * l*_i / max(p_i, l*_i))`.
/// Episodes with a zero oracle length are excluded (world generation
/// forbids them; they can only appear in hand-built fixtures).
pub fn spl(records: &[EpisodeRecord]) -> f32 {
    let usable: Vec<&EpisodeRecord> = records.iter().filter(|r| r.oracle_len > 0).collect();
    if usable.len() < records.len() {
        eprintln!(
            "spl: excluded {} degenerate episodes with zero oracle length",
            records.len() - usable.len()
        );
    }
    if usable.is_empty() {
        return 0.0;
    }
    let sum: f32 = usable
        .iter()
        .map(|r| {
            if r.success {
                r.oracle_len as f32 / (r.path_cells.max(r.oracle_len)) as f32
            } else {
                0.0
            }
        })
        .sum();
    sum / usable.len() as f32
}

/// Manhattan-distance SPL: the initial item-goal Manhattan distance is the
/// optimal step lower bound (the item moves at most one cell per step), so
/// `mean(S_i * m0_i / max(t_i, m0_i))` with episode steps in the denominator.
pub fn md_spl(records: &[EpisodeRecord]) -> f32 {
    let usable: Vec<&EpisodeRecord> = records.iter().filter(|r| r.oracle_len > 0).collect();
    if usable.is_empty() {
        return 0.0;
    }
    let sum: f32 = usable
        .iter()
        .map(|r| {
            if r.success {
                r.oracle_len as f32 / (r.steps.max(r.oracle_len)) as f32
            } else {
                0.0
            }
        })
        .sum();
    sum / usable.len() as f32
}

/// Expected probability mass on uncoordinated joint actions, averaged over
/// steps: both agents picking the same action is coordinated (matched moves
/// and Pass/Pass), everything else is not.
pub fn invalid_prob_mass(step_dists: &[(Vec<f32>, Vec<f32>)]) -> Result<f32> {
    if step_dists.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0f32;
    for (p1, p2) in step_dists {
        if p1.len() != p2.len() {
            return Err(Error::dim("invalid_prob_mass", &[p1.len()], &[p2.len()]));
        }
        let coordinated: f32 = p1.iter().zip(p2).map(|(a, b)| a * b).sum();
        total += 1.0 - coordinated;
    }
    Ok(total / step_dists.len() as f32)
}

fn final_distance(state: &EnvState) -> f32 {
    match &state.world {
        WorldState::GridNav(w) => w.geodesic() as f32,
        WorldState::Transport(w) => w.distance() as f32,
        WorldState::PredPrey(_) => initial_distance(state),
    }
}

fn run_episode(
    net: &PolicyNet<f32>,
    task: TaskKind,
    world_cfg: &WorldConfig,
    reward_spec: &RewardSpec,
    seed: u64,
    mode: StepMode,
) -> Result<EpisodeRecord> {
    let mut state = env::generate_world(task, seed, world_cfg)?;
    let side = net.arch.side;
    let mut h = net.initial_state();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let mut history = RewardHistory::new(initial_distance(&state), reward_spec);
    let d0 = initial_distance(&state);
    let oracle_len = match &state.world {
        WorldState::GridNav(w) => bfs_shortest_path(&w.map, w.start, w.goal)?.unwrap_or(0),
        WorldState::Transport(w) => env::transport::manhattan(w.start_item, w.goal),
        WorldState::PredPrey(_) => 0,
    };
    let mut total_reward = 0.0f32;
    let mut dists_per_step: Vec<(Vec<f32>, Vec<f32>)> = Vec::new();

    while !state.done {
        let obs = match side {
            Side::Grid => env::render_grid(&state),
            Side::Pixel => env::render_pixel(&state),
        };
        let aux = if obs.aux.is_empty() { None } else { Some(&obs.aux[..]) };
        let step = policy_step(net, &obs.tensor, aux, &h, mode, &mut rng)?;
        if task == TaskKind::Transport {
            dists_per_step.push((step.dists[0].clone(), step.dists[1].clone()));
        }
        let info = env::step(&mut state, &step.actions)?;
        let breakdown = compute_reward(
            reward_spec,
            &info,
            state.t,
            state.max_steps,
            Some(&mut history),
        )?;
        total_reward += breakdown.total;
        h = step.h_new;
    }

    let path_cells = match &state.world {
        WorldState::GridNav(w) => w.cells_traversed,
        _ => 0,
    };
    let invalid_mass = if task == TaskKind::Transport {
        invalid_prob_mass(&dists_per_step)?
    } else {
        0.0
    };
    Ok(EpisodeRecord {
        seed,
        success: state.success,
        steps: state.t,
        path_cells,
        oracle_len,
        initial_distance: d0,
        final_distance: final_distance(&state),
        invalid_mass,
        total_reward,
    })
}

/// Evaluate a policy on held-out worlds with greedy (argmax) actions.
/// Seeds must come from the evaluation partition. Episodes are independent
/// and may run in parallel; records are aggregated in seed order either way.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_policy(
    net: &PolicyNet<f32>,
    task: TaskKind,
    world_cfg: &WorldConfig,
    reward_spec: &RewardSpec,
    n_episodes: usize,
    eval_seed_lo: u64,
    mode: StepMode,
    n_workers: usize,
) -> Result<EvalReport> {
    net.ensure_matches(task.id(), net.arch.side)?;
    let seeds: Vec<u64> = (eval_seed_lo..eval_seed_lo + n_episodes as u64).collect();
    for &s in &seeds {
        if !(EVAL_SEED_LO..EVAL_SEED_HI).contains(&s) {
            return Err(Error::Validation(format!(
                "seed {s} outside the evaluation partition [{EVAL_SEED_LO}, {EVAL_SEED_HI})"
            )));
        }
    }
    let records: Vec<EpisodeRecord> = if n_workers > 1 {
        let results: Vec<Result<EpisodeRecord>> = seeds
            .par_iter()
            .map(|&s| run_episode(net, task, world_cfg, reward_spec, s, mode))
            .collect();
        results.into_iter().collect::<Result<Vec<_>>>()?
    } else {
        seeds
            .iter()
            .map(|&s| run_episode(net, task, world_cfg, reward_spec, s, mode))
            .collect::<Result<Vec<_>>>()?
    };

    let n = records.len() as f32;
    let success_rate = records.iter().filter(|r| r.success).count() as f32 / n;
    let spl_value = match task {
        TaskKind::GridNav => spl(&records),
        TaskKind::Transport => md_spl(&records),
        TaskKind::PredPrey => 0.0,
    };
    let mean_reward = records.iter().map(|r| r.total_reward).sum::<f32>() / n;
    let var_reward = records
        .iter()
        .map(|r| (r.total_reward - mean_reward).powi(2))
        .sum::<f32>()
        / n;
    Ok(EvalReport {
        task: task.id().into(),
        checkpoint_step: 0,
        seed_lo: eval_seed_lo,
        seed_hi: eval_seed_lo + n_episodes as u64,
        success_rate,
        spl_or_mdspl: spl_value,
        mean_ep_len: records.iter().map(|r| r.steps as f32).sum::<f32>() / n,
        mean_invalid_mass: records.iter().map(|r| r.invalid_mass).sum::<f32>() / n,
        mean_final_distance: records.iter().map(|r| r.final_distance).sum::<f32>() / n,
        mean_reward,
        std_reward: var_reward.sqrt(),
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{build_policy, ArchConfig};

    fn record(success: bool, steps: u32, path: u32, oracle: u32) -> EpisodeRecord {
        EpisodeRecord {
            seed: 0,
            success,
            steps,
            path_cells: path,
            oracle_len: oracle,
            initial_distance: oracle as f32,
            final_distance: 0.0,
            invalid_mass: 0.0,
            total_reward: 0.0,
        }
    }

    #[test]
    fn bfs_corridor_and_degenerate_cases() {
        // 7x3 corridor: walls all around, one free row of length 5.
        let mut map = GridMap {
            w: 7,
            h: 3,
            walls: vec![true; 21],
        };
        for x in 1..6 {
            map.walls[7 + x] = false;
        }
        assert_eq!(bfs_shortest_path(&map, (1, 1), (5, 1)).unwrap(), Some(4));
        assert_eq!(bfs_shortest_path(&map, (2, 1), (2, 1)).unwrap(), Some(0));
        assert!(bfs_shortest_path(&map, (0, 0), (5, 1)).is_err());
    }

    #[test]
    fn bfs_unreachable_is_distinct() {
        let mut map = GridMap {
            w: 5,
            h: 3,
            walls: vec![true; 15],
        };
        map.walls[5 + 1] = false;
        map.walls[5 + 3] = false;
        assert_eq!(bfs_shortest_path(&map, (1, 1), (3, 1)).unwrap(), None);
    }

    #[test]
    fn spl_formula_cases() {
        assert_eq!(spl(&[record(true, 10, 5, 5)]), 1.0);
        assert_eq!(spl(&[record(false, 10, 5, 5)]), 0.0);
        assert_eq!(spl(&[record(true, 10, 10, 5)]), 0.5);
        // Agent shorter than oracle (possible only in fixtures): capped at 1.
        assert_eq!(spl(&[record(true, 10, 3, 5)]), 1.0);
    }

    #[test]
    fn md_spl_formula_cases() {
        assert_eq!(md_spl(&[record(true, 4, 0, 4)]), 1.0);
        assert_eq!(md_spl(&[record(false, 4, 0, 4)]), 0.0);
        assert_eq!(md_spl(&[record(true, 16, 0, 4)]), 0.25);
    }

    #[test]
    fn invalid_mass_uniform_marginals() {
        let u = vec![0.2f32; 5];
        let mass = invalid_prob_mass(&[(u.clone(), u)]).unwrap();
        assert!((mass - 0.8).abs() < 1e-6);
    }

    #[test]
    fn invalid_mass_deterministic_matched_and_mixed() {
        let mut det = vec![0.0f32; 5];
        det[0] = 1.0;
        let mass = invalid_prob_mass(&[(det.clone(), det.clone())]).unwrap();
        assert_eq!(mass, 0.0);
        let u = vec![0.2f32; 5];
        let mass = invalid_prob_mass(&[(det, u)]).unwrap();
        assert!((mass - 0.8).abs() < 1e-6);
    }

    #[test]
    fn eval_rejects_training_partition_seeds() {
        let cfg = WorldConfig::default();
        let task = env::task_descriptor(TaskKind::GridNav, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = build_policy(&task, Side::Grid, &ArchConfig::tiny(), &mut rng).unwrap();
        let spec = crate::rewards::preset("pointnav_terminal").unwrap();
        let err = evaluate_policy(
            &net,
            TaskKind::GridNav,
            &cfg,
            &spec,
            10,
            0,
            StepMode::Argmax,
            1,
        );
        assert!(matches!(err, Err(Error::Validation(_))));
    }

    #[test]
    fn eval_is_deterministic() {
        let cfg = WorldConfig::default();
        let task = env::task_descriptor(TaskKind::GridNav, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = build_policy(&task, Side::Grid, &ArchConfig::tiny(), &mut rng).unwrap();
        let spec = crate::rewards::preset("pointnav_terminal").unwrap();
        let a = evaluate_policy(&net, TaskKind::GridNav, &cfg, &spec, 12, EVAL_SEED_LO, StepMode::Argmax, 1).unwrap();
        let b = evaluate_policy(&net, TaskKind::GridNav, &cfg, &spec, 12, EVAL_SEED_LO, StepMode::Argmax, 2).unwrap();
        assert_eq!(a, b);
    }
}
