use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use munet::data::TaskData;
use munet::error::{Error, Result};
use munet::evolution::{
    evaluate, load_tasks, run_baseline, run_experiment, Preset, RunConfig, RunLog, RunOutput,
};
use munet::report::{
    flow_graph_dot, load_checkpoint, model_graph_dot, report_from_files, write_run_outputs,
};

#[derive(Parser)]
#[command(name = "munet", version, about = "Evolutionary multitask networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the evolutionary multitask search.
    Evolve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Training threads; overrides the config and MUNET_WORKERS.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Train a fixed-architecture baseline on the matched budget.
    Baseline {
        /// multi_head, full_finetune, adapters:D or freeze_below:K.
        #[arg(long)]
        preset: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Write the model graph of a checkpoint as DOT.
    ExportGraph {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the task-to-task knowledge flow of a checkpoint as DOT.
    FlowGraph {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate run logs into tables.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        logs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint's best model for one task on its test split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        task: String,
    },
}

fn load_config(path: &Path, seed: Option<u64>, workers: Option<usize>) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_path(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if workers.is_some() {
        cfg.workers = workers;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn finish(out_dir: &Path, cfg: &RunConfig, tasks: &[TaskData], run: &RunOutput) -> Result<()> {
    write_run_outputs(out_dir, cfg, tasks, run)?;
    for t in &run.summary.tasks {
        println!(
            "{}: test {:.4} valid {:.4} accounted params {:.0}",
            t.task, t.test_accuracy, t.valid_accuracy, t.accounted_params
        );
    }
    println!(
        "mean test {:.4}, mean accounted params {:.0}",
        run.summary.mean_test_accuracy(),
        run.summary.mean_accounted_params()
    );
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Evolve {
            config,
            out,
            seed,
            workers,
        } => {
            let cfg = load_config(&config, seed, workers)?;
            let tasks = load_tasks(&cfg)?;
            create_dir(&out)?;
            let log = RunLog::to_file(&out.join("run.jsonl"))?;
            let run = run_experiment(&cfg, &tasks, log)?;
            finish(&out, &cfg, &tasks, &run)
        }
        Command::Baseline {
            preset,
            config,
            out,
            seed,
            workers,
        } => {
            let preset: Preset = preset.parse()?;
            let cfg = load_config(&config, seed, workers)?;
            let tasks = load_tasks(&cfg)?;
            create_dir(&out)?;
            let log = RunLog::to_file(&out.join("run.jsonl"))?;
            let run = run_baseline(&cfg, &tasks, preset, log)?;
            finish(&out, &cfg, &tasks, &run)
        }
        Command::ExportGraph { ckpt, out } => {
            write_file(&out, &model_graph_dot(&load_checkpoint(&ckpt)?.system)?)
        }
        Command::FlowGraph { ckpt, out } => {
            write_file(&out, &flow_graph_dot(&load_checkpoint(&ckpt)?.system)?)
        }
        Command::Report { logs, out } => {
            let report = report_from_files(&logs)?;
            report.write(&out)?;
            print!("{}", report.markdown());
            Ok(())
        }
        Command::Eval { ckpt, task } => {
            let ck = load_checkpoint(&ckpt)?;
            let cfg = ck.config.ok_or_else(|| {
                Error::Checkpoint("checkpoint has no run config; cannot reload data".into())
            })?;
            let model = ck
                .system
                .best
                .get(&task)
                .ok_or_else(|| Error::UnknownTask(task.clone()))?;
            let tasks = load_tasks(&cfg)?;
            let data = tasks
                .iter()
                .find(|t| t.def.name == task)
                .ok_or_else(|| Error::UnknownTask(task.clone()))?;
            let layers = model
                .layers
                .iter()
                .map(|&id| ck.system.store.get(id).map(|l| (l.config(), l.params())))
                .collect::<Result<Vec<_>>>()?;
            let acc = evaluate(&layers, &data.test, &model.hparams, cfg.eval_batch_size)?;
            println!(
                "{}",
                json!({ "task": task, "model": model.id, "test_accuracy": acc })
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::UnknownHyperparam(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
