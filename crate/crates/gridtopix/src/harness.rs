//! Experiment orchestration: run directories, summary emission, and
//! cross-run comparison tables.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::{ExperimentConfig, Overrides};
use crate::error::{Error, Result};
use crate::routine::{run_routine, RunSummary};

/// Resolve a config (plus CLI overrides), persist `config.json`, train, and
/// write `summary.json`. With `resume`, continues from the latest checkpoint
/// in the run directory.
pub fn run_experiment(
    mut config: ExperimentConfig,
    overrides: &Overrides,
    resume: bool,
) -> Result<RunSummary> {
    config.apply(overrides);
    let (routine_cfg, resolved) = config.resolve()?;
    fs::create_dir_all(&routine_cfg.output_dir)?;
    let config_path = routine_cfg.output_dir.join("config.json");
    if !resume || !config_path.exists() {
        fs::write(&config_path, serde_json::to_string_pretty(&resolved)?)?;
    }
    let summary = run_routine(&routine_cfg, resume)?;
    fs::write(
        routine_cfg.output_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(summary)
}

pub fn load_summary(run_dir: &Path) -> Result<RunSummary> {
    let text = fs::read_to_string(run_dir.join("summary.json")).map_err(|e| {
        Error::Usage(format!(
            "{} has no summary.json ({e}); did the run finish?",
            run_dir.display()
        ))
    })?;
    Ok(serde_json::from_str(&text)?)
}

/// Markdown + CSV table of routines x metrics across runs of one task.
/// The grid-expert row is annotated as the loose upper bound.
pub fn emit_comparison(run_dirs: &[PathBuf], out_path: &Path) -> Result<()> {
    if run_dirs.is_empty() {
        return Err(Error::Usage("no run directories given".into()));
    }
    let summaries: Vec<RunSummary> = run_dirs
        .iter()
        .map(|d| load_summary(d))
        .collect::<Result<Vec<_>>>()?;
    let task = &summaries[0].task;
    if let Some(other) = summaries.iter().find(|s| &s.task != task) {
        return Err(Error::Usage(format!(
            "runs mix tasks: {} vs {}",
            task, other.task
        )));
    }

    let mut columns: BTreeSet<String> = BTreeSet::new();
    for s in &summaries {
        columns.extend(s.metrics.keys().cloned());
    }
    let columns: Vec<String> = columns.into_iter().collect();

    let label = |s: &RunSummary| {
        if s.routine == "grid_expert" {
            format!("{} (upper bound)", s.routine)
        } else {
            s.routine.clone()
        }
    };

    let mut md = String::new();
    md.push_str(&format!("# Task: {task}\n\n"));
    md.push_str("| routine | reward | seed |");
    for c in &columns {
        md.push_str(&format!(" {c} |"));
    }
    md.push('\n');
    md.push_str("|---|---|---|");
    for _ in &columns {
        md.push_str("---|");
    }
    md.push('\n');
    for s in &summaries {
        md.push_str(&format!("| {} | {} | {} |", label(s), s.reward, s.seed));
        for c in &columns {
            match s.metrics.get(c) {
                Some(v) => md.push_str(&format!(" {v:.3} |")),
                None => md.push_str(" - |"),
            }
        }
        md.push('\n');
    }
    fs::write(out_path, &md)?;

    let mut csv = String::from("routine,reward,seed");
    for c in &columns {
        csv.push(',');
        csv.push_str(c);
    }
    csv.push('\n');
    for s in &summaries {
        csv.push_str(&format!("{},{},{}", s.routine, s.reward, s.seed));
        for c in &columns {
            match s.metrics.get(c) {
                Some(v) => csv.push_str(&format!(",{v:.6}")),
                None => csv.push(','),
            }
        }
        csv.push('\n');
    }
    fs::write(out_path.with_extension("csv"), &csv)?;
    Ok(())
}

/// Minimal SVG line chart of one numeric column from a run's `curves.csv`
/// (falling back to `eval.csv` when the column lives there).
pub fn emit_curves_svg(run_dir: &Path, column: &str, out_path: &Path) -> Result<()> {
    let parse = |path: &Path| -> Result<Option<Vec<(f64, f64)>>> {
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header: Vec<&str> = match lines.next() {
            Some(h) => h.split(',').collect(),
            None => return Ok(None),
        };
        let col = match header.iter().position(|c| *c == column) {
            Some(c) => c,
            None => return Ok(None),
        };
        let mut points = Vec::new();
        for line in lines {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != header.len() {
                continue;
            }
            if let (Ok(x), Ok(y)) = (fields[0].parse::<f64>(), fields[col].parse::<f64>()) {
                points.push((x, y));
            }
        }
        Ok(Some(points))
    };
    let points = parse(&run_dir.join("curves.csv"))?
        .filter(|p| !p.is_empty())
        .or(parse(&run_dir.join("eval.csv"))?.filter(|p| !p.is_empty()))
        .ok_or_else(|| {
            Error::Usage(format!(
                "column `{column}` not found in curves.csv or eval.csv under {}",
                run_dir.display()
            ))
        })?;

    let (w, h, pad) = (640.0, 360.0, 40.0);
    let x_max = points.iter().map(|p| p.0).fold(f64::MIN, f64::max).max(1.0);
    let y_min = points.iter().map(|p| p.1).fold(f64::MAX, f64::min);
    let y_max = points.iter().map(|p| p.1).fold(f64::MIN, f64::max);
    let y_span = (y_max - y_min).max(1e-9);
    let path: String = points
        .iter()
        .enumerate()
        .map(|(i, (x, y))| {
            let px = pad + (w - 2.0 * pad) * x / x_max;
            let py = h - pad - (h - 2.0 * pad) * (y - y_min) / y_span;
            format!("{}{px:.1},{py:.1}", if i == 0 { "M" } else { " L" })
        })
        .collect();
    let svg = format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" ",
            "viewBox=\"0 0 {w} {h}\">\n",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
            "<path d=\"{path}\" fill=\"none\" stroke=\"#0b61a4\" stroke-width=\"1.5\"/>\n",
            "<text x=\"{tx}\" y=\"16\" font-family=\"monospace\" font-size=\"12\">{column}: ",
            "min {ymin:.4} max {ymax:.4}</text>\n</svg>\n"
        ),
        w = w,
        h = h,
        path = path,
        tx = pad,
        column = column,
        ymin = y_min,
        ymax = y_max,
    );
    fs::write(out_path, svg)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::routine::RunSummary;
    use std::collections::BTreeMap;

    fn write_summary(dir: &Path, task: &str, routine: &str) {
        let mut metrics = BTreeMap::new();
        metrics.insert("success@10%".to_string(), 0.1);
        metrics.insert("success@100%".to_string(), 0.8);
        let s = RunSummary {
            schema_version: 1,
            task: task.into(),
            routine: routine.into(),
            reward: "pointnav_terminal".into(),
            seed: 0,
            budget: 1000,
            metrics,
            final_checkpoint: "x".into(),
        };
        fs::create_dir_all(dir).unwrap();
        fs::write(
            dir.join("summary.json"),
            serde_json::to_string(&s).unwrap(),
        )
        .unwrap();
    }

    #[test]
    fn comparison_table_marks_upper_bound_and_rejects_mixed_tasks() {
        let tmp = tempfile::tempdir().unwrap();
        let a = tmp.path().join("a");
        let b = tmp.path().join("b");
        let c = tmp.path().join("c");
        write_summary(&a, "gridnav", "directpix");
        write_summary(&b, "gridnav", "grid_expert");
        write_summary(&c, "transport", "directpix");
        let out = tmp.path().join("cmp.md");
        emit_comparison(&[a.clone(), b.clone()], &out).unwrap();
        let md = fs::read_to_string(&out).unwrap();
        assert!(md.contains("grid_expert (upper bound)"));
        assert!(out.with_extension("csv").exists());
        assert!(matches!(
            emit_comparison(&[a, c], &out),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn single_run_comparison_works() {
        let tmp = tempfile::tempdir().unwrap();
        let a = tmp.path().join("a");
        write_summary(&a, "gridnav", "gridtopix");
        let out = tmp.path().join("cmp.md");
        emit_comparison(&[a], &out).unwrap();
        let md = fs::read_to_string(&out).unwrap();
        assert!(md.lines().count() >= 4);
    }

    #[test]
    fn svg_emitter_reads_eval_columns() {
        let tmp = tempfile::tempdir().unwrap();
        fs::write(
            tmp.path().join("eval.csv"),
            "step,task,routine,success,spl_or_mdspl,ep_len,invalid_mass,final_dist,avg_reward\n\
             100,gridnav,directpix,0.1,2.0,60.0,0.0,4.0,-1.0\n\
             200,gridnav,directpix,0.3,9.0,50.0,0.0,3.0,0.5\n",
        )
        .unwrap();
        let out = tmp.path().join("c.svg");
        emit_curves_svg(tmp.path(), "success", &out).unwrap();
        assert!(fs::read_to_string(&out).unwrap().contains("<svg"));
    }
}
