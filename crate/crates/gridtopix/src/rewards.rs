//! Declarative reward structures: a success term paid on goal achievement,
//! an optional dense goal-dependent progress term, and goal-independent
//! penalties/bonuses. Shaped minus progress is terminal, exactly.

use serde::{Deserialize, Serialize};

use crate::env::StepInfo;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuccessTerm {
    pub r_success: f32,
    /// Time scaling: the payout is `r_success * (1 - alpha * t/T)`.
    pub alpha: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Progress {
    None,
    /// Change in geodesic distance to the goal: `d_{t-1} - d_t`.
    GeodesicDelta,
    /// `max(min_{k<t} d_k - d_t, 0)` over Manhattan item-goal distances.
    ManhattanMaxMin,
    /// Bonus on first entry into each of `n_zones` evenly spaced
    /// closer-to-goal distance bands.
    Checkpoint { n_zones: usize, bonus: f32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct IndepTerms {
    pub step_penalty: f32,
    pub failed_action_penalty: f32,
    pub failed_coord_penalty: f32,
    pub tag_bonus: f32,
    /// Applied per step as `coeff * mean predator-prey distance`.
    pub distance_penalty_coeff: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardSpec {
    pub success: SuccessTerm,
    pub progress: Progress,
    pub indep: IndepTerms,
}

impl RewardSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.success.alpha) {
            return Err(Error::Validation(format!(
                "alpha {} outside [0,1]",
                self.success.alpha
            )));
        }
        if self.success.r_success <= 0.0 {
            return Err(Error::Validation("r_success must be positive".into()));
        }
        let i = &self.indep;
        if i.step_penalty > 0.0 || i.failed_action_penalty > 0.0 || i.failed_coord_penalty > 0.0 {
            return Err(Error::Validation("penalties must be <= 0".into()));
        }
        if i.tag_bonus < 0.0 || i.distance_penalty_coeff > 0.0 {
            return Err(Error::Validation(
                "tag_bonus must be >= 0 and distance_penalty_coeff <= 0".into(),
            ));
        }
        if let Progress::Checkpoint { n_zones, .. } = self.progress {
            if n_zones == 0 {
                return Err(Error::Validation("checkpoint n_zones must be positive".into()));
            }
        }
        Ok(())
    }

    /// Terminal structure: no dense goal-dependent progress term.
    pub fn is_terminal(&self) -> bool {
        self.progress == Progress::None
    }

    /// Same spec with the progress term removed.
    pub fn without_progress(&self) -> RewardSpec {
        RewardSpec {
            progress: Progress::None,
            ..self.clone()
        }
    }
}

pub const PRESET_NAMES: [&str; 8] = [
    "pointnav_shaped",
    "pointnav_terminal",
    "furnmove_shaped",
    "furnmove_terminal",
    "furnmove_terminal_alt",
    "football_pattern_shaped",
    "football_pattern_terminal",
    "predprey_shaped",
];

/// Fixed reward structures; constants follow the navigation / furniture
/// moving / football rows with the football checkpoint pattern kept as a
/// reward variant, plus the predator-prey shaping.
pub fn preset(name: &str) -> Result<RewardSpec> {
    let furnmove_indep = IndepTerms {
        step_penalty: -0.01,
        failed_action_penalty: -0.02,
        failed_coord_penalty: -0.1,
        ..IndepTerms::default()
    };
    let spec = match name {
        "pointnav_shaped" => RewardSpec {
            success: SuccessTerm { r_success: 10.0, alpha: 0.0 },
            progress: Progress::GeodesicDelta,
            indep: IndepTerms {
                step_penalty: -0.01,
                ..IndepTerms::default()
            },
        },
        "pointnav_terminal" => RewardSpec {
            success: SuccessTerm { r_success: 10.0, alpha: 0.9 },
            progress: Progress::None,
            indep: IndepTerms::default(),
        },
        "furnmove_shaped" => RewardSpec {
            success: SuccessTerm { r_success: 1.0, alpha: 0.0 },
            progress: Progress::ManhattanMaxMin,
            indep: furnmove_indep,
        },
        "furnmove_terminal" => RewardSpec {
            success: SuccessTerm { r_success: 1.0, alpha: 0.0 },
            progress: Progress::None,
            indep: furnmove_indep,
        },
        "furnmove_terminal_alt" => RewardSpec {
            success: SuccessTerm { r_success: 1.0, alpha: 0.0 },
            progress: Progress::None,
            indep: IndepTerms {
                step_penalty: -0.01,
                failed_coord_penalty: -0.1,
                ..IndepTerms::default()
            },
        },
        "football_pattern_shaped" => RewardSpec {
            success: SuccessTerm { r_success: 1.0, alpha: 0.0 },
            progress: Progress::Checkpoint { n_zones: 10, bonus: 0.1 },
            indep: IndepTerms::default(),
        },
        "football_pattern_terminal" => RewardSpec {
            success: SuccessTerm { r_success: 1.0, alpha: 0.0 },
            progress: Progress::None,
            indep: IndepTerms::default(),
        },
        "predprey_shaped" => RewardSpec {
            success: SuccessTerm { r_success: 10.0, alpha: 0.0 },
            progress: Progress::None,
            indep: IndepTerms {
                tag_bonus: 10.0,
                distance_penalty_coeff: -0.1,
                ..IndepTerms::default()
            },
        },
        other => {
            return Err(Error::Validation(format!(
                "unknown reward preset `{other}` (known: {PRESET_NAMES:?})"
            )))
        }
    };
    Ok(spec)
}

/// Per-episode bookkeeping for history-dependent progress variants.
#[derive(Debug, Clone)]
pub struct RewardHistory {
    pub initial_distance: f32,
    pub claimed_zones: Vec<bool>,
}

impl RewardHistory {
    pub fn new(initial_distance: f32, spec: &RewardSpec) -> RewardHistory {
        let zones = match spec.progress {
            Progress::Checkpoint { n_zones, .. } => n_zones,
            _ => 0,
        };
        RewardHistory {
            initial_distance,
            claimed_zones: vec![false; zones],
        }
    }
}

/// One step's reward, decomposed. `total` is always
/// `(success_term + indep_term) + progress_term` in that f32 order, which
/// makes the shaped = terminal + progress identity exact.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardBreakdown {
    pub success_term: f32,
    pub progress_term: f32,
    pub indep_term: f32,
    pub total: f32,
}

fn current_distance(info: &StepInfo) -> Option<f32> {
    info.geodesic_after
        .map(|d| d as f32)
        .or_else(|| info.manhattan_after.map(|d| d as f32))
        .or(info.mean_prey_distance)
}

/// Evaluate one step's reward. The same value is broadcast to every agent
/// (fully cooperative tasks). `t` is the clock after the acted step; `max_t`
/// the episode horizon.
pub fn compute_reward(
    spec: &RewardSpec,
    info: &StepInfo,
    t: u32,
    max_t: u32,
    history: Option<&mut RewardHistory>,
) -> Result<RewardBreakdown> {
    if t == 0 || t > max_t {
        return Err(Error::Usage(format!(
            "reward clock t={t} outside 1..={max_t}"
        )));
    }
    let success_term = if info.success {
        spec.success.r_success * (1.0 - spec.success.alpha * t as f32 / max_t as f32)
    } else {
        0.0
    };

    let progress_term = match &spec.progress {
        Progress::None => 0.0,
        Progress::GeodesicDelta => {
            let before = info.geodesic_before.ok_or_else(|| {
                Error::Usage("GeodesicDelta progress needs geodesic distances in StepInfo".into())
            })?;
            let after = info.geodesic_after.unwrap_or(before);
            before as f32 - after as f32
        }
        Progress::ManhattanMaxMin => {
            let min_before = info.manhattan_min_before.ok_or_else(|| {
                Error::Usage("ManhattanMaxMin progress needs Manhattan history in StepInfo".into())
            })?;
            let after = info.manhattan_after.ok_or_else(|| {
                Error::Usage("ManhattanMaxMin progress needs Manhattan distance in StepInfo".into())
            })?;
            (min_before as f32 - after as f32).max(0.0)
        }
        Progress::Checkpoint { n_zones, bonus } => {
            let history = history.ok_or_else(|| {
                Error::Usage("Checkpoint progress requires a RewardHistory".into())
            })?;
            let d = current_distance(info).ok_or_else(|| {
                Error::Usage("Checkpoint progress needs a distance in StepInfo".into())
            })?;
            let mut newly = 0usize;
            for k in 1..=*n_zones {
                let threshold =
                    history.initial_distance * (*n_zones - k) as f32 / *n_zones as f32;
                if d <= threshold && !history.claimed_zones[k - 1] {
                    history.claimed_zones[k - 1] = true;
                    newly += 1;
                }
            }
            *bonus * newly as f32
        }
    };

    let i = &spec.indep;
    let mut indep_term = i.step_penalty;
    if info.action_failed.iter().any(|&f| f) {
        indep_term += i.failed_action_penalty;
    }
    if info.coordination_failed.iter().any(|&f| f) {
        indep_term += i.failed_coord_penalty;
    }
    let n_tags = info.tag_events.iter().filter(|&&f| f).count();
    if n_tags > 0 {
        indep_term += i.tag_bonus * n_tags as f32;
    }
    if let Some(d) = info.mean_prey_distance {
        indep_term += i.distance_penalty_coeff * d;
    }

    let total = (success_term + indep_term) + progress_term;
    Ok(RewardBreakdown {
        success_term,
        progress_term,
        indep_term,
        total,
    })
}

/// A recorded trajectory for reward-algebra checks.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub steps: Vec<StepInfo>,
    pub max_steps: u32,
    pub initial_distance: f32,
}

/// Verify that `shaped.total == terminal.total + shaped.progress_term`
/// bit-exactly on every step. The two specs must differ only in the
/// progress variant (shaped non-None, terminal None).
pub fn decompose_check(
    shaped: &RewardSpec,
    terminal: &RewardSpec,
    trajectory: &Trajectory,
) -> Result<bool> {
    if shaped.is_terminal() {
        return Err(Error::Usage("shaped spec has no progress term".into()));
    }
    if !terminal.is_terminal() {
        return Err(Error::Usage("terminal spec has a progress term".into()));
    }
    if shaped.without_progress() != *terminal {
        return Err(Error::Usage(
            "specs differ outside the progress term".into(),
        ));
    }
    let mut h_shaped = RewardHistory::new(trajectory.initial_distance, shaped);
    let mut h_term = RewardHistory::new(trajectory.initial_distance, terminal);
    for (k, info) in trajectory.steps.iter().enumerate() {
        let t = (k + 1) as u32;
        let s = compute_reward(shaped, info, t, trajectory.max_steps, Some(&mut h_shaped))?;
        let r = compute_reward(terminal, info, t, trajectory.max_steps, Some(&mut h_term))?;
        if s.total != r.total + s.progress_term {
            return Ok(false);
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nav_info(before: u32, after: u32, success: bool) -> StepInfo {
        StepInfo {
            action_failed: vec![false],
            geodesic_before: Some(before),
            geodesic_after: Some(after),
            success,
            ..StepInfo::default()
        }
    }

    #[test]
    fn preset_constants_match_reward_tables() {
        let p = preset("pointnav_shaped").unwrap();
        assert_eq!(p.success, SuccessTerm { r_success: 10.0, alpha: 0.0 });
        assert_eq!(p.progress, Progress::GeodesicDelta);
        assert_eq!(p.indep.step_penalty, -0.01);
        assert_eq!(p.indep.failed_action_penalty, 0.0);

        let p = preset("pointnav_terminal").unwrap();
        assert_eq!(p.success, SuccessTerm { r_success: 10.0, alpha: 0.9 });
        assert_eq!(p.progress, Progress::None);
        assert_eq!(p.indep, IndepTerms::default());

        let p = preset("furnmove_shaped").unwrap();
        assert_eq!(p.success, SuccessTerm { r_success: 1.0, alpha: 0.0 });
        assert_eq!(p.progress, Progress::ManhattanMaxMin);
        assert_eq!(p.indep.step_penalty, -0.01);
        assert_eq!(p.indep.failed_action_penalty, -0.02);
        assert_eq!(p.indep.failed_coord_penalty, -0.1);

        let p = preset("furnmove_terminal").unwrap();
        assert_eq!(p.progress, Progress::None);
        assert_eq!(p.indep.failed_action_penalty, -0.02);

        let p = preset("furnmove_terminal_alt").unwrap();
        assert_eq!(p.indep.failed_action_penalty, 0.0);
        assert_eq!(p.indep.failed_coord_penalty, -0.1);
        assert_eq!(p.indep.step_penalty, -0.01);

        let p = preset("football_pattern_shaped").unwrap();
        assert_eq!(p.success, SuccessTerm { r_success: 1.0, alpha: 0.0 });
        assert_eq!(p.progress, Progress::Checkpoint { n_zones: 10, bonus: 0.1 });
        assert_eq!(p.indep, IndepTerms::default());

        let p = preset("football_pattern_terminal").unwrap();
        assert_eq!(p.progress, Progress::None);
        assert_eq!(p.indep, IndepTerms::default());

        let p = preset("predprey_shaped").unwrap();
        assert_eq!(p.indep.tag_bonus, 10.0);
        assert_eq!(p.indep.distance_penalty_coeff, -0.1);

        assert!(preset("nonsense").is_err());
        for name in PRESET_NAMES {
            preset(name).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn success_at_half_horizon_pays_five_and_a_half() {
        let spec = preset("pointnav_terminal").unwrap();
        let info = nav_info(1, 1, true);
        let r = compute_reward(&spec, &info, 64, 128, None).unwrap();
        assert_eq!(r.success_term, 10.0 * (1.0 - 0.9 * 0.5));
        assert_eq!(r.total, 5.5);
    }

    #[test]
    fn max_min_progress_pays_only_below_running_min() {
        let spec = preset("furnmove_shaped").unwrap();
        // Item one cell closer than the previous minimum.
        let info = StepInfo {
            action_failed: vec![false; 2],
            coordination_failed: vec![false; 2],
            manhattan_min_before: Some(4),
            manhattan_after: Some(3),
            ..StepInfo::default()
        };
        let r = compute_reward(&spec, &info, 1, 100, None).unwrap();
        assert_eq!(r.progress_term, 1.0);
        // Moved closer than last step but still above the historic minimum.
        let info = StepInfo {
            manhattan_min_before: Some(2),
            manhattan_after: Some(3),
            action_failed: vec![false; 2],
            coordination_failed: vec![false; 2],
            ..StepInfo::default()
        };
        let r = compute_reward(&spec, &info, 2, 100, None).unwrap();
        assert_eq!(r.progress_term, 0.0);
    }

    #[test]
    fn coordination_failure_totals_minus_point_eleven() {
        let spec = preset("furnmove_terminal").unwrap();
        let info = StepInfo {
            action_failed: vec![false; 2],
            coordination_failed: vec![true; 2],
            manhattan_min_before: Some(5),
            manhattan_after: Some(5),
            ..StepInfo::default()
        };
        let r = compute_reward(&spec, &info, 1, 100, None).unwrap();
        assert!((r.total - (-0.11)).abs() < 1e-7);
    }

    #[test]
    fn tag_at_zero_distance_pays_bonus_only() {
        let spec = preset("predprey_shaped").unwrap();
        let info = StepInfo {
            action_failed: vec![false; 3],
            tag_events: vec![true, false, false],
            mean_prey_distance: Some(0.0),
            ..StepInfo::default()
        };
        let r = compute_reward(&spec, &info, 1, 200, None).unwrap();
        assert_eq!(r.total, 10.0);
        assert_eq!(r.success_term, 0.0);
    }

    #[test]
    fn terminal_specs_pay_nothing_goal_dependent_before_termination() {
        for name in ["pointnav_terminal", "furnmove_terminal", "football_pattern_terminal"] {
            let spec = preset(name).unwrap();
            let info = StepInfo {
                action_failed: vec![false],
                geodesic_before: Some(5),
                geodesic_after: Some(4),
                manhattan_min_before: Some(5),
                manhattan_after: Some(4),
                success: false,
                ..StepInfo::default()
            };
            let r = compute_reward(&spec, &info, 3, 100, None).unwrap();
            assert_eq!(r.success_term, 0.0, "{name}");
            assert_eq!(r.progress_term, 0.0, "{name}");
        }
    }

    #[test]
    fn alpha_makes_success_strictly_decreasing_in_time() {
        let spec = preset("pointnav_terminal").unwrap();
        let mut last = f32::MAX;
        for t in [1u32, 32, 64, 96, 128] {
            let r = compute_reward(&spec, &nav_info(1, 1, true), t, 128, None).unwrap();
            assert!(r.success_term < last);
            last = r.success_term;
        }
    }

    #[test]
    fn checkpoint_zones_pay_once() {
        let spec = preset("football_pattern_shaped").unwrap();
        let mut h = RewardHistory::new(10.0, &spec);
        let mk = |d: u32| StepInfo {
            action_failed: vec![false],
            geodesic_before: Some(d + 1),
            geodesic_after: Some(d),
            ..StepInfo::default()
        };
        // Zone thresholds sit at 9, 8, ..., 0; reaching d=8 claims two.
        let r1 = compute_reward(&spec, &mk(8), 1, 100, Some(&mut h)).unwrap();
        assert!((r1.progress_term - 0.2).abs() < 1e-7);
        let r2 = compute_reward(&spec, &mk(8), 2, 100, Some(&mut h)).unwrap();
        assert_eq!(r2.progress_term, 0.0);
        let r3 = compute_reward(&spec, &mk(5), 3, 100, Some(&mut h)).unwrap();
        assert!((r3.progress_term - 0.3).abs() < 1e-7);
        let r4 = compute_reward(&spec, &mk(5), 4, 100, Some(&mut h)).unwrap();
        assert_eq!(r4.progress_term, 0.0);
    }

    #[test]
    fn decompose_check_usage_errors() {
        let shaped = preset("pointnav_shaped").unwrap();
        let terminal = preset("pointnav_terminal").unwrap(); // differs in alpha too
        let traj = Trajectory {
            steps: vec![nav_info(5, 4, false)],
            max_steps: 128,
            initial_distance: 5.0,
        };
        assert!(matches!(
            decompose_check(&shaped, &terminal, &traj),
            Err(Error::Usage(_))
        ));
        // Correct pairing: shaped vs shaped-minus-progress.
        let stripped = shaped.without_progress();
        assert!(decompose_check(&shaped, &stripped, &traj).unwrap());
    }

    #[test]
    fn reward_clock_bounds_are_enforced() {
        let spec = preset("pointnav_shaped").unwrap();
        let info = nav_info(2, 1, false);
        assert!(compute_reward(&spec, &info, 0, 10, None).is_err());
        assert!(compute_reward(&spec, &info, 11, 10, None).is_err());
    }
}
