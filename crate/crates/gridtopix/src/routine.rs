//! Training routines: grid-side experts, direct pixel RL, pixel
//! distillation from a frozen expert, and the imitation-then-reward hybrid.
//!
//! A run owns a directory: `config.json` (written by the harness),
//! `curves.csv`, `eval.csv`, `checkpoints/step_{N}.ckpt` (+ `.optim`
//! sidecars), and `expert.ckpt` copied in for provenance when one is used.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distill::{il_update, AnnealSchedule, DaggerActor, ExpertHandle};
use crate::env::{self, TaskKind, WorldConfig};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_policy, EvalReport};
use crate::net::checkpoint::{
    load_checkpoint, load_tensors, save_checkpoint, save_tensors, CheckpointMeta,
};
use crate::net::{build_policy, ArchConfig, PolicyNet, Side, StepMode};
use crate::optim::{Adam, AdamConfig};
use crate::rewards::RewardSpec;
use crate::rollout::{collect_rollout, EnvPool, EpisodeStat, NetActor};
use crate::update::{a2c_update, ppo_update, Algo, LossStats, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Routine {
    GridExpert,
    DirectPix,
    GridToPix,
    GridToPixThenDirectPix,
}

impl Routine {
    pub fn id(&self) -> &'static str {
        match self {
            Routine::GridExpert => "grid_expert",
            Routine::DirectPix => "directpix",
            Routine::GridToPix => "gridtopix",
            Routine::GridToPixThenDirectPix => "gridtopix_then_directpix",
        }
    }

    pub fn from_id(s: &str) -> Result<Routine> {
        match s {
            "grid_expert" => Ok(Routine::GridExpert),
            "directpix" => Ok(Routine::DirectPix),
            "gridtopix" => Ok(Routine::GridToPix),
            "gridtopix_then_directpix" => Ok(Routine::GridToPixThenDirectPix),
            other => Err(Error::Validation(format!("unknown routine `{other}`"))),
        }
    }

    pub fn uses_expert(&self) -> bool {
        matches!(self, Routine::GridToPix | Routine::GridToPixThenDirectPix)
    }

    /// The observation side the learner trains on.
    pub fn side(&self) -> Side {
        match self {
            Routine::GridExpert => Side::Grid,
            _ => Side::Pixel,
        }
    }
}

/// Fully resolved description of one training run.
#[derive(Debug, Clone)]
pub struct RoutineConfig {
    pub routine: Routine,
    pub task: TaskKind,
    pub world: WorldConfig,
    pub reward_name: String,
    pub reward: RewardSpec,
    pub train: TrainConfig,
    pub arch: ArchConfig,
    pub schedule: AnnealSchedule,
    /// Fraction of the budget spent on imitation before switching to
    /// reward-based learning. 1 for pure distillation, 0 for pure RL.
    pub il_fraction: f32,
    pub seed: u64,
    pub budget: u64,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    pub n_workers: usize,
    pub expert_checkpoint: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl RoutineConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.reward.validate()?;
        self.train.validate()?;
        self.schedule.validate()?;
        let il = self.il_fraction;
        match self.routine {
            Routine::GridToPix if il != 1.0 => {
                return Err(Error::Validation(format!(
                    "il_fraction must be 1.0 for the pure distillation routine, got {il}"
                )));
            }
            Routine::GridExpert | Routine::DirectPix if il != 0.0 => {
                return Err(Error::Validation(format!(
                    "il_fraction must be 0.0 for reward-only routines, got {il}"
                )));
            }
            Routine::GridToPixThenDirectPix if !(il > 0.0 && il < 1.0) => {
                return Err(Error::Validation(format!(
                    "il_fraction must lie strictly between 0 and 1 for the hybrid routine, got {il}"
                )));
            }
            _ => {}
        }
        if self.routine.uses_expert() && self.expert_checkpoint.is_none() {
            return Err(Error::Validation(
                "distillation routines need an expert_checkpoint".into(),
            ));
        }
        let min_budget = (self.train.n_envs * self.train.rollout_length) as u64;
        if self.budget < min_budget {
            return Err(Error::Validation(format!(
                "budget {} smaller than one rollout ({min_budget})",
                self.budget
            )));
        }
        Ok(())
    }
}

/// Aggregates returned by a finished run (and serialized via summary.json).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub task: String,
    pub routine: String,
    pub reward: String,
    pub seed: u64,
    pub budget: u64,
    /// Metric name -> value, with `@10%` / `@100%` key suffixes.
    pub metrics: BTreeMap<String, f32>,
    pub final_checkpoint: String,
}

struct CsvWriter {
    file: fs::File,
}

impl CsvWriter {
    fn create(path: &Path, header: &str) -> Result<CsvWriter> {
        let mut file = fs::File::create(path)?;
        writeln!(file, "{header}")?;
        Ok(CsvWriter { file })
    }

    fn append(path: &Path, header: &str) -> Result<CsvWriter> {
        if path.exists() {
            let file = fs::OpenOptions::new().append(true).open(path)?;
            Ok(CsvWriter { file })
        } else {
            CsvWriter::create(path, header)
        }
    }

    fn row(&mut self, line: &str) -> Result<()> {
        writeln!(self.file, "{line}")?;
        Ok(())
    }
}

const CURVES_HEADER: &str = "step,policy_loss,value_loss,entropy,clip_frac,kl,phase";
const EVAL_HEADER: &str =
    "step,task,routine,success,spl_or_mdspl,ep_len,invalid_mass,final_dist,avg_reward";

fn eval_row(step: u64, task: &str, routine: &str, r: &EvalReport) -> String {
    format!(
        "{step},{task},{routine},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
        r.success_rate,
        r.spl_or_mdspl * 100.0,
        r.mean_ep_len,
        r.mean_invalid_mass,
        r.mean_final_distance,
        r.mean_reward
    )
}

fn summary_metrics(prefix: &str, r: &EvalReport, into: &mut BTreeMap<String, f32>) {
    into.insert(format!("success{prefix}"), r.success_rate);
    into.insert(format!("spl_or_mdspl{prefix}"), r.spl_or_mdspl * 100.0);
    into.insert(format!("ep_len{prefix}"), r.mean_ep_len);
    into.insert(format!("invalid_mass{prefix}"), r.mean_invalid_mass);
    into.insert(format!("final_dist{prefix}"), r.mean_final_distance);
    into.insert(format!("avg_reward{prefix}"), r.mean_reward);
}

enum Phase {
    Il,
    Rl,
}

impl Phase {
    fn id(&self) -> &'static str {
        match self {
            Phase::Il => "il",
            Phase::Rl => "rl",
        }
    }
}

fn mean_stat(eps: &[EpisodeStat]) -> (f32, f32) {
    if eps.is_empty() {
        return (0.0, 0.0);
    }
    let n = eps.len() as f32;
    let succ = eps.iter().filter(|e| e.success).count() as f32 / n;
    let ret = eps.iter().map(|e| e.ret).sum::<f32>() / n;
    (succ, ret)
}

/// Run one routine to completion (optionally resuming from the last saved
/// checkpoint in the run directory). Returns the summary aggregates.
pub fn run_routine(cfg: &RoutineConfig, resume: bool) -> Result<RunSummary> {
    cfg.validate()?;
    fs::create_dir_all(cfg.output_dir.join("checkpoints"))?;

    let task_desc = env::task_descriptor(cfg.task, &cfg.world);
    let side = cfg.routine.side();

    // Expert (frozen) for distillation routines.
    let expert = match (&cfg.expert_checkpoint, cfg.routine.uses_expert()) {
        (Some(path), true) => {
            let (net, _) = load_checkpoint(path)?;
            net.ensure_matches(cfg.task.id(), Side::Grid)?;
            let dest = cfg.output_dir.join("expert.ckpt");
            if fs::canonicalize(path).ok() != fs::canonicalize(&dest).ok() {
                fs::copy(path, &dest)?;
            }
            Some(ExpertHandle::new(net)?)
        }
        _ => None,
    };

    // Learner net and optimizer, fresh or resumed.
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net: PolicyNet<f32> = build_policy(&task_desc, side, &cfg.arch, &mut init_rng)?;
    let mut opt = Adam::new(
        &net.params,
        AdamConfig {
            lr: cfg.train.lr,
            ..AdamConfig::default()
        },
    );
    let mut global_step: u64 = 0;

    if resume {
        if let Some((step, ckpt)) = latest_checkpoint(&cfg.output_dir)? {
            let (loaded, meta) = load_checkpoint(&ckpt)?;
            loaded.ensure_matches(cfg.task.id(), side)?;
            net = loaded;
            global_step = meta.global_step;
            let sidecar = ckpt.with_extension("optim");
            if sidecar.exists() {
                let (tensors, _) = load_tensors(&sidecar)?;
                opt.load_state_tensors(&net.params, &tensors)?;
            }
            eprintln!("resumed from {} at step {step}", ckpt.display());
        }
    }

    let mut curves = if resume {
        CsvWriter::append(&cfg.output_dir.join("curves.csv"), CURVES_HEADER)?
    } else {
        CsvWriter::create(&cfg.output_dir.join("curves.csv"), CURVES_HEADER)?
    };
    let mut evals = if resume {
        CsvWriter::append(&cfg.output_dir.join("eval.csv"), EVAL_HEADER)?
    } else {
        CsvWriter::create(&cfg.output_dir.join("eval.csv"), EVAL_HEADER)?
    };

    let mut pool = EnvPool::new(
        cfg.task,
        cfg.world.clone(),
        cfg.reward.clone(),
        cfg.train.n_envs,
        cfg.seed,
        net.core_dim(),
        cfg.n_workers,
    )?;
    let mut update_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    update_rng.set_stream(u64::MAX - 1);

    let steps_per_iter = (cfg.train.n_envs * cfg.train.rollout_length) as u64;
    let il_budget = (cfg.budget as f64 * cfg.il_fraction as f64) as u64;
    let mark_10 = cfg.budget / 10;
    let mut next_eval = cfg.eval_interval.max(steps_per_iter);
    let mut did_10 = false;
    let mut metrics = BTreeMap::new();
    let mut switched = cfg.il_fraction == 0.0 || global_step >= il_budget;
    let mut recent: Vec<EpisodeStat> = Vec::new();

    // Expert contexts and plain contexts are kept alive across iterations so
    // mid-episode expert hidden state survives rollout boundaries.
    let mut expert_ctxs: Vec<crate::distill::ExpertCtx> = match &expert {
        Some(e) => (0..cfg.train.n_envs).map(|_| e.init_ctx()).collect(),
        None => Vec::new(),
    };
    let mut unit_ctxs: Vec<()> = vec![(); cfg.train.n_envs];

    while global_step < cfg.budget {
        let in_il = !switched && global_step < il_budget;
        let (stats, phase): (LossStats, Phase) = if in_il {
            let e = expert.as_ref().expect("validated");
            let actor = DaggerActor {
                student: &net,
                expert: e,
                p: cfg.schedule.p(global_step),
            };
            let rollout = collect_rollout(
                &mut pool,
                &actor,
                &mut expert_ctxs,
                cfg.train.rollout_length,
                Side::Pixel,
            )?;
            recent.extend(rollout.finished_episodes.iter().copied());
            let stats = il_update(&mut net, &mut opt, &rollout, &cfg.train, &mut update_rng)?;
            (stats, Phase::Il)
        } else {
            if !switched {
                switched = true;
            }
            let actor = NetActor { net: &net, side };
            let rollout = collect_rollout(
                &mut pool,
                &actor,
                &mut unit_ctxs,
                cfg.train.rollout_length,
                side,
            )?;
            recent.extend(rollout.finished_episodes.iter().copied());
            let stats = match cfg.train.algo {
                Algo::Ppo => ppo_update(&mut net, &mut opt, &rollout, &cfg.train, &mut update_rng)?,
                Algo::A2c => a2c_update(&mut net, &mut opt, &rollout, &cfg.train)?,
            };
            (stats, Phase::Rl)
        };
        let was_il = matches!(phase, Phase::Il);
        global_step += steps_per_iter;

        curves.row(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            global_step,
            stats.policy_loss,
            stats.value_loss,
            stats.entropy,
            stats.clip_frac,
            stats.approx_kl,
            phase.id()
        ))?;

        // Optimizer moments reset when the objective switches from
        // imitation to reward maximization.
        if was_il && global_step >= il_budget && cfg.il_fraction < 1.0 {
            opt.reset();
            switched = true;
        }

        let crossed_10 = !did_10 && global_step >= mark_10;
        let crossed_interval = global_step >= next_eval;
        let finished = global_step >= cfg.budget;
        if crossed_10 || crossed_interval || finished {
            while next_eval <= global_step {
                next_eval += cfg.eval_interval.max(steps_per_iter);
            }
            let report = evaluate_policy(
                &net,
                cfg.task,
                &cfg.world,
                &cfg.reward,
                cfg.eval_episodes,
                crate::rollout::EVAL_SEED_LO,
                StepMode::Argmax,
                cfg.n_workers,
            )?;
            evals.row(&eval_row(
                global_step,
                cfg.task.id(),
                cfg.routine.id(),
                &report,
            ))?;
            save_step(&cfg.output_dir, &net, &opt, global_step, cfg)?;
            if crossed_10 {
                summary_metrics("@10%", &report, &mut metrics);
                did_10 = true;
            }
            if finished {
                summary_metrics("@100%", &report, &mut metrics);
            }
            let (tr_succ, tr_ret) = mean_stat(&recent);
            eprintln!(
                "[{}/{}] step {global_step}/{} eval success {:.3} reward {:.2} | train success {:.3} return {:.2} | loss {:.4}",
                cfg.task.id(),
                cfg.routine.id(),
                cfg.budget,
                report.success_rate,
                report.mean_reward,
                tr_succ,
                tr_ret,
                stats.policy_loss,
            );
            recent.clear();
        }
    }

    let final_ckpt = cfg
        .output_dir
        .join("checkpoints")
        .join(format!("step_{global_step}.ckpt"));
    Ok(RunSummary {
        schema_version: 1,
        task: cfg.task.id().into(),
        routine: cfg.routine.id().into(),
        reward: cfg.reward_name.clone(),
        seed: cfg.seed,
        budget: cfg.budget,
        metrics,
        final_checkpoint: final_ckpt.display().to_string(),
    })
}

fn save_step(
    dir: &Path,
    net: &PolicyNet<f32>,
    opt: &Adam<f32>,
    step: u64,
    cfg: &RoutineConfig,
) -> Result<()> {
    let meta = CheckpointMeta {
        global_step: step,
        seed: cfg.seed,
        routine: cfg.routine.id().into(),
    };
    let ckpt = dir.join("checkpoints").join(format!("step_{step}.ckpt"));
    save_checkpoint(net, &ckpt, &meta)?;
    let state = opt.state_tensors(&net.params);
    save_tensors(&ckpt.with_extension("optim"), &state, &meta)?;
    Ok(())
}

/// Latest `step_{N}.ckpt` in the run directory, if any.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<(u64, PathBuf)>> {
    let ckpt_dir = dir.join("checkpoints");
    if !ckpt_dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(&ckpt_dir)? {
        let path = entry?.path();
        let name = match path.file_name().and_then(|n| n.to_str()) {
            Some(n) => n,
            None => continue,
        };
        if let Some(num) = name
            .strip_prefix("step_")
            .and_then(|r| r.strip_suffix(".ckpt"))
        {
            if let Ok(step) = num.parse::<u64>() {
                if best.as_ref().map(|(b, _)| step > *b).unwrap_or(true) {
                    best = Some((step, path));
                }
            }
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rewards::preset;

    fn base_config(dir: &Path) -> RoutineConfig {
        RoutineConfig {
            routine: Routine::GridExpert,
            task: TaskKind::GridNav,
            world: WorldConfig::default(),
            reward_name: "pointnav_shaped".into(),
            reward: preset("pointnav_shaped").unwrap(),
            train: TrainConfig {
                n_envs: 2,
                rollout_length: 16,
                epochs: 1,
                minibatches: 1,
                ..TrainConfig::default()
            },
            arch: ArchConfig::tiny(),
            schedule: AnnealSchedule::Constant { p: 0.0 },
            il_fraction: 0.0,
            seed: 1,
            budget: 64,
            eval_interval: 64,
            eval_episodes: 4,
            n_workers: 1,
            expert_checkpoint: None,
            output_dir: dir.to_path_buf(),
        }
    }

    #[test]
    fn il_fraction_invariants_are_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = base_config(dir.path());
        cfg.routine = Routine::GridToPix;
        cfg.il_fraction = 0.5;
        cfg.expert_checkpoint = Some(dir.path().join("missing.ckpt"));
        assert!(matches!(cfg.validate(), Err(Error::Validation(_))));
        cfg.il_fraction = 1.0;
        assert!(cfg.validate().is_ok());
        cfg.routine = Routine::DirectPix;
        cfg.il_fraction = 0.2;
        assert!(cfg.validate().is_err());
        cfg.routine = Routine::GridToPixThenDirectPix;
        cfg.il_fraction = 0.3;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn budget_smaller_than_one_rollout_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = base_config(dir.path());
        cfg.budget = 8;
        assert!(matches!(cfg.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn tiny_grid_expert_run_produces_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = base_config(dir.path());
        let summary = run_routine(&cfg, false).unwrap();
        assert!(dir.path().join("curves.csv").exists());
        assert!(dir.path().join("eval.csv").exists());
        assert!(summary.metrics.contains_key("success@10%"));
        assert!(summary.metrics.contains_key("success@100%"));
        assert!(latest_checkpoint(dir.path()).unwrap().is_some());
    }
}
