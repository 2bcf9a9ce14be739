//! Fixed-architecture fine-tuning baselines trained on the matched budget.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::json;

use super::{summarize, train_child, Engine, RunConfig, RunLog, RunOutput, TrainSettings};
use crate::data::TaskData;
use crate::error::{Error, Result};
use crate::layers::LayerKind;
use crate::mutation::{apply_mutations, Child, MutationAction};
use crate::store::SystemState;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Only a per-task head is trained.
    MultiHead,
    /// Every layer is cloned and trained.
    FullFinetune,
    /// An adapter of the given inner size between every pair of blocks, plus the head.
    Adapters(usize),
    /// Input layers and the first `k` blocks stay frozen.
    FreezeBelow(usize),
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Preset::MultiHead => f.write_str("multi_head"),
            Preset::FullFinetune => f.write_str("full_finetune"),
            Preset::Adapters(d) => write!(f, "adapters:{d}"),
            Preset::FreezeBelow(k) => write!(f, "freeze_below:{k}"),
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    /// Accepts `multi_head`, `full_finetune`, `adapters:D` and `freeze_below:K`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown preset `{s}`"));
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a.parse::<usize>().map_err(|_| bad())?)),
            None => (s, None),
        };
        match (name, arg) {
            ("multi_head", None) => Ok(Preset::MultiHead),
            ("full_finetune", None) => Ok(Preset::FullFinetune),
            ("adapters", Some(d)) => Ok(Preset::Adapters(d)),
            ("adapters", None) => Ok(Preset::Adapters(32)),
            ("freeze_below", Some(k)) => Ok(Preset::FreezeBelow(k)),
            _ => Err(bad()),
        }
    }
}

/// The preset's fixed architecture for `task`, built on the root model.
pub fn baseline_child(
    sys: &SystemState,
    preset: Preset,
    task: &str,
    num_classes: usize,
    rng: &mut impl Rng,
) -> Result<Child> {
    let root = &sys.root;
    let kinds: Vec<LayerKind> = root
        .layers
        .iter()
        .map(|&id| sys.store.get(id).map(|l| l.config().kind))
        .collect::<Result<_>>()?;
    let blocks: Vec<usize> = (0..kinds.len())
        .filter(|&i| kinds[i] == LayerKind::TransformerBlock)
        .collect();
    let head = kinds.len() - 1;
    let mut actions: Vec<MutationAction> = match preset {
        Preset::MultiHead => Vec::new(),
        Preset::FullFinetune => (0..head)
            .map(|index| MutationAction::CloneLayer { index })
            .collect(),
        Preset::Adapters(inner_dim) => (0..blocks.len().saturating_sub(1))
            .map(|slot| MutationAction::InsertAdapter { slot, inner_dim })
            .collect(),
        Preset::FreezeBelow(k) => blocks
            .iter()
            .skip(k)
            .map(|&index| MutationAction::CloneLayer { index })
            .collect(),
    };
    actions.push(MutationAction::MakeTrainableHead);
    let mut child = apply_mutations(&sys.store, root, &actions, task, num_classes, rng)?;
    child.hparams = root.hparams.clone();
    Ok(child)
}

/// Trains the preset on every task with `children` replicas of the
/// baseline-equivalent budget and keeps the best replica per task.
pub fn run_baseline(
    cfg: &RunConfig,
    tasks: &[TaskData],
    preset: Preset,
    log: RunLog,
) -> Result<RunOutput> {
    cfg.validate()?;
    let mut engine = Engine::new(cfg, tasks, log)?;
    let epochs = super::baseline_epochs(cfg.child_epochs, cfg.generations, cfg.task_iterations);
    let settings = TrainSettings {
        child_epochs: epochs,
        scale_factor: 1.0,
        ..engine.settings.clone()
    };
    engine.log.emit(json!({
        "event": "run_start",
        "mode": "baseline",
        "preset": preset.to_string(),
        "seed": cfg.seed,
        "tasks": tasks.iter().map(|t| &t.def).collect::<Vec<_>>(),
        "root_params": engine.system.root_model_params(),
    }))?;

    for (phase, data) in tasks.iter().enumerate() {
        let task = data.def.name.as_str();
        let seeds: Vec<u64> = (0..cfg.children).map(|_| engine.rng.gen()).collect();
        let system = &engine.system;
        let results: Vec<Result<super::TrainOutcome>> = engine.pool.install(|| {
            seeds
                .par_iter()
                .map(|&seed| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let child =
                        baseline_child(system, preset, task, data.def.num_classes, &mut rng)?;
                    train_child(system, child, data, &settings, f64::NEG_INFINITY, &mut rng)
                })
                .collect()
        });
        let mut best: Option<(usize, super::TrainOutcome)> = None;
        for (replica, r) in results.into_iter().enumerate() {
            let outcome = r?;
            engine.batches += outcome.batches;
            engine.log.emit(json!({
                "event": "replica",
                "phase": phase,
                "task": task,
                "replica": replica,
                "trainable_params": outcome.child.trainable_params(),
                "cycle_metrics": outcome.metrics,
                "quality": outcome.best.map(|b| b.0),
                "diverged": outcome.diverged,
                "batches": outcome.batches,
            }))?;
            let q = outcome.best.map(|b| b.0);
            if q.is_some() && best.as_ref().is_none_or(|(_, o)| q > o.best.map(|b| b.0)) {
                best = Some((replica, outcome));
            }
        }
        if let Some((replica, outcome)) = best {
            let (quality, _, cycles) = outcome.best.expect("retained");
            let mut spec = engine.commit(
                &outcome,
                task,
                quality,
                quality,
                cycles,
                engine.system.root.id,
            )?;
            spec.score = quality;
            engine.log.emit(json!({
                "event": "phase_end",
                "phase": phase,
                "task": task,
                "best_model": spec.id,
                "replica": replica,
                "quality": quality,
            }))?;
            engine.system.best.insert(task.to_string(), spec);
        }
    }
    let summary = summarize(&engine.system, tasks, cfg.eval_batch_size, engine.batches)?;
    engine.log.emit(json!({
        "event": "run_end",
        "mode": "baseline",
        "preset": preset.to_string(),
        "batches": engine.batches,
        "tasks": summary.tasks,
    }))?;
    Ok(RunOutput {
        system: engine.system,
        summary,
        log: engine.log,
    })
}
