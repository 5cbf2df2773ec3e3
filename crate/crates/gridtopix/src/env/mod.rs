//! Task environments: one transition kernel per task with two renderers,
//! so that a step in the grid view is exactly a step in the pixel view.

pub mod gridnav;
pub mod predprey;
pub mod raycast;
pub mod transport;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::TaskDescriptor;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    GridNav,
    Transport,
    PredPrey,
}

impl TaskKind {
    pub fn id(&self) -> &'static str {
        match self {
            TaskKind::GridNav => "gridnav",
            TaskKind::Transport => "transport",
            TaskKind::PredPrey => "predprey",
        }
    }

    pub fn from_id(s: &str) -> Result<TaskKind> {
        match s {
            "gridnav" => Ok(TaskKind::GridNav),
            "transport" => Ok(TaskKind::Transport),
            "predprey" => Ok(TaskKind::PredPrey),
            other => Err(Error::Validation(format!("unknown task `{other}`"))),
        }
    }
}

/// World-size knobs with desk-scale defaults.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    /// GridNav maze side (odd, 9..=21).
    pub gridnav_size: usize,
    pub gridnav_max_steps: u32,
    /// Transport room side (8..=12).
    pub transport_size: usize,
    pub transport_max_steps: u32,
    pub n_predators: usize,
    pub predprey_max_steps: u32,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            gridnav_size: 11,
            gridnav_max_steps: 128,
            transport_size: 10,
            transport_max_steps: 100,
            n_predators: 3,
            predprey_max_steps: 200,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gridnav_size % 2 == 0 || !(9..=21).contains(&self.gridnav_size) {
            return Err(Error::Validation(format!(
                "gridnav_size {} must be odd and within 9..=21",
                self.gridnav_size
            )));
        }
        if !(8..=12).contains(&self.transport_size) {
            return Err(Error::Validation(format!(
                "transport_size {} must be within 8..=12",
                self.transport_size
            )));
        }
        if self.n_predators == 0 {
            return Err(Error::Validation("n_predators must be positive".into()));
        }
        Ok(())
    }

    pub fn max_steps(&self, task: TaskKind) -> u32 {
        match task {
            TaskKind::GridNav => self.gridnav_max_steps,
            TaskKind::Transport => self.transport_max_steps,
            TaskKind::PredPrey => self.predprey_max_steps,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum WorldState {
    GridNav(gridnav::NavWorld),
    Transport(transport::TransportWorld),
    PredPrey(predprey::PpWorld),
}

/// Full ground-truth simulator state for one episode; both observation
/// spaces render from this single source.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvState {
    pub task: TaskKind,
    pub seed: u64,
    pub t: u32,
    pub max_steps: u32,
    pub done: bool,
    pub success: bool,
    pub world: WorldState,
}

/// Per-step event flags and progress quantities consumed by the reward
/// module and metrics.
#[derive(Debug, Clone, Default)]
pub struct StepInfo {
    pub action_failed: Vec<bool>,
    pub coordination_failed: Vec<bool>,
    pub geodesic_before: Option<u32>,
    pub geodesic_after: Option<u32>,
    pub manhattan_min_before: Option<u32>,
    pub manhattan_after: Option<u32>,
    pub tag_events: Vec<bool>,
    pub mean_prey_distance: Option<f32>,
    /// Goal achieved on this step (never set for predator-prey, whose
    /// success flag is a metric over tags, not a terminating event).
    pub success: bool,
    pub terminated: bool,
}

/// One observation: a tensor plus an optional low-dimensional auxiliary
/// vector (e.g. the relative goal compass).
#[derive(Debug, Clone)]
pub struct Obs {
    pub tensor: Tensor<f32>,
    pub aux: Vec<f32>,
}

/// Grid- and pixel-side observations rendered from the same state.
#[derive(Debug, Clone)]
pub struct ObservationPair {
    pub grid: Obs,
    pub pixel: Obs,
}

const GENERATION_ATTEMPTS: usize = 100;

/// Procedurally generate a solvable episode. Deterministic in `seed`.
pub fn generate_world(task: TaskKind, seed: u64, cfg: &WorldConfig) -> Result<EnvState> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6774_7078); // task worlds get their own stream
    let world = match task {
        TaskKind::GridNav => {
            let mut found = None;
            for _ in 0..GENERATION_ATTEMPTS {
                if let Some(w) = gridnav::NavWorld::generate(cfg.gridnav_size, &mut rng) {
                    found = Some(WorldState::GridNav(w));
                    break;
                }
            }
            found
        }
        TaskKind::Transport => {
            let mut found = None;
            for _ in 0..GENERATION_ATTEMPTS {
                if let Some(w) = transport::TransportWorld::generate(cfg.transport_size, &mut rng) {
                    found = Some(WorldState::Transport(w));
                    break;
                }
            }
            found
        }
        TaskKind::PredPrey => Some(WorldState::PredPrey(predprey::PpWorld::generate(
            cfg.n_predators,
            &mut rng,
        ))),
    };
    let world = world.ok_or_else(|| {
        Error::Validation(format!(
            "world generation failed after {GENERATION_ATTEMPTS} attempts (task {}, seed {seed})",
            task.id()
        ))
    })?;
    Ok(EnvState {
        task,
        seed,
        t: 0,
        max_steps: cfg.max_steps(task),
        done: false,
        success: false,
        world,
    })
}

pub fn action_sizes(task: TaskKind, cfg: &WorldConfig) -> Vec<usize> {
    match task {
        TaskKind::GridNav => vec![gridnav::ACTIONS],
        TaskKind::Transport => vec![transport::ACTIONS; 2],
        TaskKind::PredPrey => vec![predprey::ACTIONS; cfg.n_predators],
    }
}

pub fn task_descriptor(task: TaskKind, cfg: &WorldConfig) -> TaskDescriptor {
    match task {
        TaskKind::GridNav => TaskDescriptor {
            task_id: task.id().into(),
            grid_obs_shape: vec![2, gridnav::CROP, gridnav::CROP],
            pixel_obs_shape: vec![1, gridnav::PIXELS, gridnav::PIXELS],
            aux_dim: 2,
            action_sizes: action_sizes(task, cfg),
            recurrent: true,
        },
        TaskKind::Transport => TaskDescriptor {
            task_id: task.id().into(),
            grid_obs_shape: vec![
                transport::CHANNELS,
                cfg.transport_size,
                cfg.transport_size,
            ],
            pixel_obs_shape: vec![3, transport::PIXELS, transport::PIXELS],
            aux_dim: 0,
            action_sizes: action_sizes(task, cfg),
            recurrent: true,
        },
        TaskKind::PredPrey => TaskDescriptor {
            task_id: task.id().into(),
            grid_obs_shape: vec![predprey::vector_obs_len(cfg.n_predators)],
            pixel_obs_shape: vec![3, predprey::PIXELS, predprey::PIXELS],
            aux_dim: 0,
            action_sizes: action_sizes(task, cfg),
            recurrent: false,
        },
    }
}

/// Advance the episode by one joint action.
pub fn step(state: &mut EnvState, joint_action: &[usize]) -> Result<StepInfo> {
    if state.done {
        return Err(Error::Usage("step() on a done episode".into()));
    }
    let n_agents = match &state.world {
        WorldState::GridNav(_) => 1,
        WorldState::Transport(_) => 2,
        WorldState::PredPrey(w) => w.predators.len(),
    };
    if joint_action.len() != n_agents {
        return Err(Error::dim("step joint_action", &[joint_action.len()], &[n_agents]));
    }
    let max_action = match state.task {
        TaskKind::GridNav => gridnav::ACTIONS,
        TaskKind::Transport => transport::ACTIONS,
        TaskKind::PredPrey => predprey::ACTIONS,
    };
    if let Some(&bad) = joint_action.iter().find(|&&a| a >= max_action) {
        return Err(Error::Validation(format!(
            "action {bad} outside action set of size {max_action}"
        )));
    }

    let mut info = StepInfo::default();
    state.t += 1;
    match &mut state.world {
        WorldState::GridNav(w) => {
            let out = gridnav::nav_step(w, joint_action[0]);
            info.action_failed = vec![out.action_failed];
            info.geodesic_before = Some(out.geodesic_before);
            info.geodesic_after = Some(out.geodesic_after);
            if out.stopped {
                state.done = true;
                state.success = out.success;
                info.success = out.success;
            }
        }
        WorldState::Transport(w) => {
            let out = transport::transport_step(w, joint_action[0], joint_action[1]);
            info.action_failed = vec![out.action_failed; 2];
            info.coordination_failed = vec![out.coordination_failed; 2];
            info.manhattan_min_before = Some(out.manhattan_min_before);
            info.manhattan_after = Some(out.manhattan_after);
            if out.success {
                state.done = true;
                state.success = true;
                info.success = true;
            }
        }
        WorldState::PredPrey(w) => {
            let out = predprey::pp_step(w, joint_action);
            info.action_failed = vec![false; joint_action.len()];
            info.tag_events = out.tag_events;
            info.mean_prey_distance = Some(out.mean_prey_distance);
        }
    }
    if state.t >= state.max_steps && !state.done {
        state.done = true;
        if let WorldState::PredPrey(w) = &state.world {
            state.success = w.tagged;
        }
    }
    info.terminated = state.done;
    Ok(info)
}

/// Perfect-perception observation.
pub fn render_grid(state: &EnvState) -> Obs {
    match &state.world {
        WorldState::GridNav(w) => Obs {
            tensor: gridnav::render_crop(w),
            aux: gridnav::goal_compass(w).to_vec(),
        },
        WorldState::Transport(w) => Obs {
            tensor: transport::render_grid(w),
            aux: vec![],
        },
        WorldState::PredPrey(w) => Obs {
            tensor: predprey::render_vector(w),
            aux: vec![],
        },
    }
}

/// Rendered pixel observation.
pub fn render_pixel(state: &EnvState) -> Obs {
    match &state.world {
        WorldState::GridNav(w) => Obs {
            tensor: raycast::render_first_person(w),
            aux: gridnav::goal_compass(w).to_vec(),
        },
        WorldState::Transport(w) => Obs {
            tensor: transport::render_pixels(w),
            aux: vec![],
        },
        WorldState::PredPrey(w) => Obs {
            tensor: predprey::render_pixels(w),
            aux: vec![],
        },
    }
}

pub fn render_both(state: &EnvState) -> ObservationPair {
    ObservationPair {
        grid: render_grid(state),
        pixel: render_pixel(state),
    }
}

/// Compact JSON-serializable episode snapshot (map as a run-length string)
/// for fixtures and failure replay.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldSnapshot {
    pub task: String,
    pub seed: u64,
    pub t: u32,
    pub max_steps: u32,
    pub done: bool,
    pub success: bool,
    /// Run-length encoded walls ("12W3F..."), empty for particle tasks.
    pub map_rle: String,
    pub map_side: usize,
    pub poses: Vec<(f32, f32)>,
    pub goal: Option<(i32, i32)>,
}

fn rle_encode(walls: &[bool]) -> String {
    let mut out = String::new();
    let mut i = 0;
    while i < walls.len() {
        let v = walls[i];
        let mut run = 1;
        while i + run < walls.len() && walls[i + run] == v {
            run += 1;
        }
        out.push_str(&format!("{}{}", run, if v { 'W' } else { 'F' }));
        i += run;
    }
    out
}

pub fn rle_decode(s: &str) -> Result<Vec<bool>> {
    let mut out = Vec::new();
    let mut num = String::new();
    for ch in s.chars() {
        match ch {
            '0'..='9' => num.push(ch),
            'W' | 'F' => {
                let run: usize = num
                    .parse()
                    .map_err(|_| Error::Validation(format!("bad RLE run in `{s}`")))?;
                out.extend(std::iter::repeat(ch == 'W').take(run));
                num.clear();
            }
            other => return Err(Error::Validation(format!("bad RLE char `{other}`"))),
        }
    }
    Ok(out)
}

pub fn snapshot(state: &EnvState) -> WorldSnapshot {
    let (map_rle, map_side, poses, goal) = match &state.world {
        WorldState::GridNav(w) => (
            rle_encode(&w.map.walls),
            w.map.w,
            vec![(w.agent.0 as f32, w.agent.1 as f32)],
            Some(w.goal),
        ),
        WorldState::Transport(w) => (
            rle_encode(&w.map.walls),
            w.map.w,
            vec![
                (w.item.0 as f32, w.item.1 as f32),
                (w.agents[0].0 as f32, w.agents[0].1 as f32),
                (w.agents[1].0 as f32, w.agents[1].1 as f32),
            ],
            Some(w.goal),
        ),
        WorldState::PredPrey(w) => (
            String::new(),
            0,
            w.predators
                .iter()
                .chain(&w.prey)
                .map(|b| (b.x, b.y))
                .collect(),
            None,
        ),
    };
    WorldSnapshot {
        task: state.task.id().into(),
        seed: state.seed,
        t: state.t,
        max_steps: state.max_steps,
        done: state.done,
        success: state.success,
        map_rle,
        map_side,
        poses,
        goal,
    }
}
