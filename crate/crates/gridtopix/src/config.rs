//! Experiment configuration: strict JSON with defaults, resolved into a
//! fully concrete [`RoutineConfig`] that is serialized back next to the run
//! so any run directory reproduces itself.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::distill::AnnealSchedule;
use crate::env::{TaskKind, WorldConfig};
use crate::error::{Error, Result};
use crate::net::ArchConfig;
use crate::rewards::{preset, RewardSpec};
use crate::routine::{Routine, RoutineConfig};
use crate::update::TrainConfig;

/// Environment variable forcing single-worker (bitwise reproducible) runs.
pub const DETERMINISTIC_ENV: &str = "GTPX_DETERMINISTIC";

/// Reward selection: a preset name or an inline structure.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum RewardsField {
    Preset(String),
    Inline(RewardSpec),
}

/// On-disk experiment description. Unknown keys are rejected so typos fail
/// loudly, naming the offending key.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: String,
    pub routine: String,
    pub output_dir: String,
    #[serde(default)]
    pub rewards: Option<RewardsField>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub arch: Option<ArchConfig>,
    #[serde(default)]
    pub world: Option<WorldConfig>,
    #[serde(default)]
    pub schedule: Option<AnnealSchedule>,
    #[serde(default)]
    pub il_fraction: Option<f32>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub n_workers: Option<usize>,
    #[serde(default)]
    pub budget: Option<u64>,
    #[serde(default)]
    pub eval_interval: Option<u64>,
    #[serde(default)]
    pub eval_episodes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expert_checkpoint: Option<String>,
}

/// Command-line overrides applied on top of a config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub routine: Option<String>,
    pub task: Option<String>,
    pub seed: Option<u64>,
    pub n_workers: Option<usize>,
    pub budget: Option<u64>,
    pub output_dir: Option<String>,
    pub expert_checkpoint: Option<String>,
}

impl ExperimentConfig {
    pub fn from_json(json: &str) -> Result<ExperimentConfig> {
        serde_json::from_str(json).map_err(|e| Error::Validation(format!("config: {e}")))
    }

    pub fn from_path(path: &std::path::Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = &o.routine {
            self.routine = v.clone();
        }
        if let Some(v) = &o.task {
            self.task = v.clone();
        }
        if let Some(v) = o.seed {
            self.seed = Some(v);
        }
        if let Some(v) = o.n_workers {
            self.n_workers = Some(v);
        }
        if let Some(v) = o.budget {
            self.budget = Some(v);
        }
        if let Some(v) = &o.output_dir {
            self.output_dir = v.clone();
        }
        if let Some(v) = &o.expert_checkpoint {
            self.expert_checkpoint = Some(v.clone());
        }
    }

    fn default_reward_name(task: TaskKind) -> &'static str {
        match task {
            TaskKind::GridNav => "pointnav_terminal",
            TaskKind::Transport => "furnmove_terminal",
            TaskKind::PredPrey => "predprey_shaped",
        }
    }

    fn default_il_fraction(routine: Routine) -> f32 {
        match routine {
            Routine::GridToPix => 1.0,
            Routine::GridToPixThenDirectPix => 0.3,
            _ => 0.0,
        }
    }

    /// Linear 1 -> 0 over the first half of the imitation phase for the
    /// spatial tasks; exponential with a 10%-of-phase half-life for
    /// predator-prey.
    fn default_schedule(task: TaskKind, il_budget: u64) -> AnnealSchedule {
        match task {
            TaskKind::PredPrey => AnnealSchedule::Exponential {
                p0: 1.0,
                half_life_steps: (il_budget / 10).max(1),
            },
            _ => AnnealSchedule::Linear {
                p0: 1.0,
                p1: 0.0,
                steps: (il_budget / 2).max(1),
            },
        }
    }

    /// Fill every default, honoring the deterministic-mode env var, and
    /// produce both the concrete run description and the fully resolved
    /// config suitable for `config.json`.
    pub fn resolve(&self) -> Result<(RoutineConfig, ExperimentConfig)> {
        let task = TaskKind::from_id(&self.task)?;
        let routine = Routine::from_id(&self.routine)?;
        let budget = self.budget.unwrap_or(300_000);
        let (reward_name, reward) = match &self.rewards {
            None => {
                let name = Self::default_reward_name(task);
                (name.to_string(), preset(name)?)
            }
            Some(RewardsField::Preset(name)) => (name.clone(), preset(name)?),
            Some(RewardsField::Inline(spec)) => {
                spec.validate()?;
                ("custom".to_string(), spec.clone())
            }
        };
        let il_fraction = self
            .il_fraction
            .unwrap_or_else(|| Self::default_il_fraction(routine));
        let il_budget = (budget as f64 * il_fraction as f64) as u64;
        let schedule = self
            .schedule
            .clone()
            .unwrap_or_else(|| Self::default_schedule(task, il_budget));
        let mut n_workers = self.n_workers.unwrap_or(1);
        if std::env::var(DETERMINISTIC_ENV).as_deref() == Ok("1") {
            n_workers = 1;
        }
        let cfg = RoutineConfig {
            routine,
            task,
            world: self.world.clone().unwrap_or_default(),
            reward_name: reward_name.clone(),
            reward,
            train: self.train.clone().unwrap_or_default(),
            arch: self.arch.clone().unwrap_or_default(),
            schedule: schedule.clone(),
            il_fraction,
            seed: self.seed.unwrap_or(0),
            budget,
            eval_interval: self.eval_interval.unwrap_or_else(|| (budget / 10).max(1)),
            eval_episodes: self.eval_episodes.unwrap_or(200),
            n_workers,
            expert_checkpoint: self.expert_checkpoint.as_ref().map(PathBuf::from),
            output_dir: PathBuf::from(&self.output_dir),
        };
        cfg.validate()?;
        let resolved = ExperimentConfig {
            task: self.task.clone(),
            routine: self.routine.clone(),
            output_dir: self.output_dir.clone(),
            rewards: Some(match &self.rewards {
                Some(RewardsField::Inline(spec)) => RewardsField::Inline(spec.clone()),
                _ => RewardsField::Preset(reward_name),
            }),
            train: Some(cfg.train.clone()),
            arch: Some(cfg.arch.clone()),
            world: Some(cfg.world.clone()),
            schedule: Some(schedule),
            il_fraction: Some(il_fraction),
            seed: Some(cfg.seed),
            n_workers: Some(n_workers),
            budget: Some(budget),
            eval_interval: Some(cfg.eval_interval),
            eval_episodes: Some(cfg.eval_episodes),
            expert_checkpoint: self.expert_checkpoint.clone(),
        };
        Ok((cfg, resolved))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = ExperimentConfig::from_json(
            r#"{"task":"gridnav","routine":"grid_expert","output_dir":"/tmp/x"}"#,
        )
        .unwrap();
        let (rc, resolved) = cfg.resolve().unwrap();
        assert_eq!(rc.budget, 300_000);
        assert_eq!(rc.reward_name, "pointnav_terminal");
        assert_eq!(rc.eval_episodes, 200);
        assert_eq!(resolved.seed, Some(0));
        assert!(resolved.schedule.is_some());
    }

    #[test]
    fn unknown_key_is_named_in_the_error() {
        let err = ExperimentConfig::from_json(
            r#"{"task":"gridnav","routine":"grid_expert","output_dir":"/tmp/x","gamm":0.9}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("gamm"), "{err}");
    }

    #[test]
    fn gridtopix_with_partial_il_fraction_is_rejected() {
        let cfg = ExperimentConfig::from_json(
            r#"{"task":"gridnav","routine":"gridtopix","output_dir":"/tmp/x",
                "il_fraction":0.5,"expert_checkpoint":"/tmp/e.ckpt"}"#,
        )
        .unwrap();
        assert!(matches!(cfg.resolve(), Err(Error::Validation(_))));
    }

    #[test]
    fn inline_reward_spec_round_trips() {
        let cfg = ExperimentConfig::from_json(
            r#"{"task":"transport","routine":"grid_expert","output_dir":"/tmp/x",
                "rewards":{"success":{"r_success":2.0,"alpha":0.5},
                           "progress":{"kind":"none"},
                           "indep":{"step_penalty":-0.05}}}"#,
        )
        .unwrap();
        let (rc, _) = cfg.resolve().unwrap();
        assert_eq!(rc.reward.success.r_success, 2.0);
        assert_eq!(rc.reward.indep.step_penalty, -0.05);
        assert_eq!(rc.reward_name, "custom");
    }

    #[test]
    fn resolved_config_reproduces_itself() {
        let cfg = ExperimentConfig::from_json(
            r#"{"task":"predprey","routine":"directpix","output_dir":"/tmp/x","budget":20000}"#,
        )
        .unwrap();
        let (_, resolved) = cfg.resolve().unwrap();
        let json = serde_json::to_string_pretty(&resolved).unwrap();
        let again = ExperimentConfig::from_json(&json).unwrap();
        let (_, resolved2) = again.resolve().unwrap();
        assert_eq!(resolved, resolved2);
    }

    #[test]
    fn train_overrides_reject_unknown_keys() {
        let err = ExperimentConfig::from_json(
            r#"{"task":"gridnav","routine":"grid_expert","output_dir":"/tmp/x",
                "train":{"gamm":0.9}}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("gamm"));
    }
}
