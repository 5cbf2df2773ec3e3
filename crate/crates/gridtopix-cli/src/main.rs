use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gridtopix::config::{ExperimentConfig, Overrides};
use gridtopix::env::TaskKind;
use gridtopix::harness::{emit_comparison, emit_curves_svg, run_experiment};
use gridtopix::metrics::evaluate_policy;
use gridtopix::net::checkpoint::load_checkpoint;
use gridtopix::net::StepMode;
use gridtopix::rewards::preset;
use gridtopix::rollout::EVAL_SEED_LO;

#[derive(Parser)]
#[command(
    name = "gtpx",
    about = "Train grid experts, distill them into pixel agents, and compare routines",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one routine from a JSON config (flags override file values).
    Train(TrainArgs),
    /// Evaluate a checkpoint on held-out worlds.
    Eval(EvalArgs),
    /// Tabulate finished runs of one task into markdown + CSV.
    Compare(CompareArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Path to the experiment JSON config.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    routine: Option<String>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    budget: Option<u64>,
    #[arg(long)]
    output_dir: Option<String>,
    #[arg(long)]
    expert_checkpoint: Option<String>,
    /// Continue from the latest checkpoint in the run directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 200)]
    episodes: usize,
    /// Optional config supplying world-size overrides and the reward used
    /// for the average-reward metric.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sample actions instead of the default greedy argmax.
    #[arg(long)]
    sample: bool,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct CompareArgs {
    /// Finished run directories (must share a task).
    run_dirs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also emit an SVG line chart of this column for each run.
    #[arg(long)]
    svg_column: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> gridtopix::Result<()> {
    match cli.command {
        Command::Train(a) => {
            let config = ExperimentConfig::from_path(&a.config)?;
            let overrides = Overrides {
                routine: a.routine,
                task: a.task,
                seed: a.seed,
                n_workers: a.workers,
                budget: a.budget,
                output_dir: a.output_dir,
                expert_checkpoint: a.expert_checkpoint,
            };
            let summary = run_experiment(config, &overrides, a.resume)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(())
        }
        Command::Eval(a) => {
            let (net, meta) = load_checkpoint(&a.checkpoint)?;
            let task = TaskKind::from_id(&net.arch.task_id)?;
            let (world, reward) = match &a.config {
                Some(path) => {
                    let cfg = ExperimentConfig::from_path(path)?;
                    let (rc, _) = cfg.resolve()?;
                    (rc.world, rc.reward)
                }
                None => {
                    let name = match task {
                        TaskKind::GridNav => "pointnav_terminal",
                        TaskKind::Transport => "furnmove_terminal",
                        TaskKind::PredPrey => "predprey_shaped",
                    };
                    (Default::default(), preset(name)?)
                }
            };
            let mode = if a.sample { StepMode::Sample } else { StepMode::Argmax };
            let report = evaluate_policy(
                &net, task, &world, &reward, a.episodes, EVAL_SEED_LO, mode, a.workers,
            )?;
            println!("checkpoint: {} (step {})", a.checkpoint.display(), meta.global_step);
            println!("task: {} side: {}", net.arch.task_id, net.arch.side);
            println!("episodes: {}", report.records.len());
            println!("success: {:.4}", report.success_rate);
            println!("spl_or_mdspl: {:.4}", report.spl_or_mdspl * 100.0);
            println!("ep_len: {:.2}", report.mean_ep_len);
            println!("invalid_mass: {:.4}", report.mean_invalid_mass);
            println!("final_dist: {:.3}", report.mean_final_distance);
            println!(
                "avg_reward: {:.3} (std {:.3})",
                report.mean_reward, report.std_reward
            );
            Ok(())
        }
        Command::Compare(a) => {
            emit_comparison(&a.run_dirs, &a.out)?;
            if let Some(col) = &a.svg_column {
                for dir in &a.run_dirs {
                    let name = dir
                        .file_name()
                        .map(|n| n.to_string_lossy().to_string())
                        .unwrap_or_else(|| "run".into());
                    let out = a.out.with_file_name(format!("{name}_{col}.svg"));
                    emit_curves_svg(dir, col, &out)?;
                }
            }
            println!("wrote {}", a.out.display());
            Ok(())
        }
    }
}
