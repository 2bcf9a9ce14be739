//! Multitask evolution: active phases, parent sampling, child training and commits.

mod baseline;
mod config;
mod train;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use baseline::{baseline_child, run_baseline, Preset};
pub use config::{build_root, load_tasks, DataSource, IdxTask, RootConfig, RunConfig};
pub use train::{
    cycle_plan, epoch_batches, evaluate, predict, score, train_child, CycleMetric, TrainOutcome,
    TrainSettings, CLIP_NORM,
};

use crate::data::TaskData;
use crate::error::{io_err, Error, Result};
use crate::mutation::{apply_mutations, sample_mutations, ChildLayer, HyperparamSpace};
use crate::store::{content_hash_bytes, ModelId, ModelSpec, SystemState, TrainingRecord};

/// Outcome of one parent draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pick {
    /// Index into the seed list (removed from it).
    Seed(usize),
    /// Index into the score-sorted active population, accepted by the back-off walk.
    Active(usize),
    /// Index into the `A ∪ M` pool, drawn uniformly after every candidate was rejected.
    Fallback(usize),
}

/// Back-off walk over the score-sorted active population.
///
/// Candidate `i` is accepted with probability `(1/2)^offsprings[i]`; if none
/// is accepted a uniform index into a pool of `pool_len` models is drawn.
pub fn backoff_pick(offsprings: &[usize], pool_len: usize, rng: &mut impl Rng) -> Pick {
    for (i, &n) in offsprings.iter().enumerate() {
        if rng.gen::<f64>() < 0.5f64.powi(n.min(i32::MAX as usize) as i32) {
            return Pick::Active(i);
        }
    }
    Pick::Fallback(rng.gen_range(0..pool_len))
}

/// Exact probability of each [`backoff_pick`] outcome: `offsprings.len()`
/// active entries followed by `pool_len` fallback entries.
pub fn backoff_distribution(offsprings: &[usize], pool_len: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(offsprings.len() + pool_len);
    let mut reach = 1.0;
    for &n in offsprings {
        let p = 0.5f64.powi(n as i32);
        out.push(reach * p);
        reach *= 1.0 - p;
    }
    out.extend(std::iter::repeat_n(reach / pool_len as f64, pool_len));
    out
}

/// Total-order key: score desc, quality desc, accounted asc, id asc.
fn rank(a: &(ModelSpec, f64), b: &(ModelSpec, f64)) -> std::cmp::Ordering {
    b.0.score
        .total_cmp(&a.0.score)
        .then(b.0.quality.total_cmp(&a.0.quality))
        .then(a.1.total_cmp(&b.1))
        .then(a.0.id.cmp(&b.0.id))
}

/// Training-batch budget of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub baseline_epochs: usize,
    pub replicas: usize,
    /// Per task: `(evolution batches, baseline batches)`.
    pub per_task: BTreeMap<String, (usize, usize)>,
    pub evolution_batches: usize,
    pub baseline_batches: usize,
}

pub fn baseline_epochs(child_epochs: usize, generations: usize, task_iterations: usize) -> usize {
    child_epochs * generations * task_iterations
}

pub fn compute_budget(cfg: &RunConfig, tasks: &[TaskData]) -> Budget {
    let epochs = baseline_epochs(cfg.child_epochs, cfg.generations, cfg.task_iterations);
    let mut per_task = BTreeMap::new();
    for t in tasks {
        let e = epoch_batches(t.train.len(), cfg.batch_size);
        let evo = cfg.task_iterations * cfg.generations * cfg.children * cfg.child_epochs * e;
        let base = cfg.children * epochs * e;
        per_task.insert(t.def.name.clone(), (evo, base));
    }
    Budget {
        baseline_epochs: epochs,
        replicas: cfg.children,
        evolution_batches: per_task.values().map(|v| v.0).sum(),
        baseline_batches: per_task.values().map(|v| v.1).sum(),
        per_task,
    }
}

/// JSON-lines event log. Every line is flushed as it is written.
pub struct RunLog {
    lines: Vec<String>,
    sink: Option<BufWriter<File>>,
}

impl RunLog {
    pub fn in_memory() -> Self {
        Self {
            lines: Vec::new(),
            sink: None,
        }
    }

    pub fn to_file(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(io_err(path))?;
        Ok(Self {
            lines: Vec::new(),
            sink: Some(BufWriter::new(f)),
        })
    }

    pub fn emit(&mut self, event: serde_json::Value) -> Result<()> {
        let line = event.to_string();
        if let Some(w) = &mut self.sink {
            writeln!(w, "{line}")
                .and_then(|_| w.flush())
                .map_err(io_err("run log"))?;
        }
        self.lines.push(line);
        Ok(())
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    /// FNV-1a hash of the log content.
    pub fn content_hash(&self) -> u64 {
        content_hash_bytes(self.lines.join("\n").as_bytes())
    }
}

/// Final per-task metrics of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task: String,
    pub model: ModelId,
    pub valid_accuracy: f64,
    pub test_accuracy: f64,
    pub accounted_params: f64,
    pub total_params: usize,
    pub knowledge_flow: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub tasks: Vec<TaskSummary>,
    pub batches: usize,
    pub root_params: usize,
}

impl RunSummary {
    pub fn mean_valid_accuracy(&self) -> f64 {
        self.tasks.iter().map(|t| t.valid_accuracy).sum::<f64>() / self.tasks.len().max(1) as f64
    }

    pub fn mean_test_accuracy(&self) -> f64 {
        self.tasks.iter().map(|t| t.test_accuracy).sum::<f64>() / self.tasks.len().max(1) as f64
    }

    pub fn mean_accounted_params(&self) -> f64 {
        self.tasks.iter().map(|t| t.accounted_params).sum::<f64>() / self.tasks.len().max(1) as f64
    }
}

pub struct RunOutput {
    pub system: SystemState,
    pub summary: RunSummary,
    pub log: RunLog,
}

/// Shared state of an experiment.
pub struct Engine<'a> {
    pub cfg: &'a RunConfig,
    pub tasks: &'a [TaskData],
    pub system: SystemState,
    pub log: RunLog,
    pub settings: TrainSettings,
    space: HyperparamSpace,
    rng: ChaCha8Rng,
    pool: rayon::ThreadPool,
    phase: usize,
    next_child: usize,
    pub batches: usize,
}

struct Job {
    child_id: usize,
    parent: ModelSpec,
    is_seed: bool,
    actions: Vec<crate::mutation::MutationAction>,
    seed: u64,
}

impl<'a> Engine<'a> {
    pub fn new(cfg: &'a RunConfig, tasks: &'a [TaskData], log: RunLog) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::Config("no tasks".into()));
        }
        let system = build_root(cfg, tasks[0].def.num_classes)?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.worker_count())
            .build()
            .map_err(|e| Error::Invalid(e.to_string()))?;
        Ok(Self {
            cfg,
            tasks,
            system,
            log,
            settings: TrainSettings {
                child_epochs: cfg.child_epochs,
                samples_cap_batches: cfg.samples_cap_batches,
                batch_size: cfg.batch_size,
                eval_batch_size: cfg.eval_batch_size,
                scale_factor: cfg.scale_factor,
            },
            space: cfg.space(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6d75_4e65_7400_0000),
            pool,
            phase: 0,
            next_child: 0,
            batches: 0,
        })
    }

    fn task(&self, name: &str) -> Result<&'a TaskData> {
        self.tasks
            .iter()
            .find(|t| t.def.name == name)
            .ok_or_else(|| Error::UnknownTask(name.to_string()))
    }

    fn rescore(&self, mut m: ModelSpec, task: &str) -> Result<(ModelSpec, f64)> {
        let accounted = self.system.accounted_params(&m, task)?;
        m.score = score(
            m.quality,
            accounted,
            self.system.root_model_params(),
            self.cfg.scale_factor,
        )?;
        Ok((m, accounted))
    }

    /// One active phase on `task`: seed parents, then `generations` rounds of sampled children.
    pub fn run_active_phase(&mut self, task: &str) -> Result<()> {
        let data = self.task(task)?;
        let phase = self.phase;
        self.phase += 1;

        let mut seeds: Vec<ModelSpec> = self.system.models().cloned().collect();
        let mut active: Vec<(ModelSpec, f64)> = Vec::new();
        if let Some(m) = self.system.best.get(task) {
            active.push(self.rescore(m.clone(), task)?);
        }
        let mut offspring: BTreeMap<ModelId, usize> = BTreeMap::new();

        for generation in 0..self.cfg.generations {
            active.sort_by(rank);
            let mut jobs = Vec::with_capacity(self.cfg.children);
            for _ in 0..self.cfg.children {
                let (parent, is_seed) = if !seeds.is_empty() {
                    let i = self.rng.gen_range(0..seeds.len());
                    (seeds.remove(i), true)
                } else {
                    let counts: Vec<usize> = active
                        .iter()
                        .map(|(m, _)| offspring.get(&m.id).copied().unwrap_or(0))
                        .collect();
                    let mut pool: Vec<&ModelSpec> = active.iter().map(|(m, _)| m).collect();
                    pool.extend(
                        self.system
                            .models()
                            .filter(|m| !active.iter().any(|(a, _)| a.id == m.id)),
                    );
                    let parent = match backoff_pick(&counts, pool.len(), &mut self.rng) {
                        Pick::Active(i) => active[i].0.clone(),
                        Pick::Fallback(j) => pool[j].clone(),
                        Pick::Seed(_) => unreachable!("backoff never yields seeds"),
                    };
                    (parent, false)
                };
                *offspring.entry(parent.id).or_default() += 1;
                let actions = sample_mutations(
                    &self.system.store,
                    &parent,
                    &self.space,
                    self.cfg.mutation_prob,
                    is_seed,
                    &mut self.rng,
                )?;
                let seed = self.rng.gen::<u64>();
                jobs.push(Job {
                    child_id: self.next_child,
                    parent,
                    is_seed,
                    actions,
                    seed,
                });
                self.next_child += 1;
            }

            let system = &self.system;
            let settings = &self.settings;
            let results: Vec<Result<TrainOutcome>> = self.pool.install(|| {
                jobs.par_iter()
                    .map(|job| {
                        let mut rng = ChaCha8Rng::seed_from_u64(job.seed);
                        let child = apply_mutations(
                            &system.store,
                            &job.parent,
                            &job.actions,
                            task,
                            data.def.num_classes,
                            &mut rng,
                        )?;
                        let score_star = if job.parent.trained_on(task) {
                            job.parent.score
                        } else {
                            f64::NEG_INFINITY
                        };
                        train_child(system, child, data, settings, score_star, &mut rng)
                    })
                    .collect()
            });

            for (job, result) in jobs.into_iter().zip(results) {
                let outcome = result?;
                self.batches += outcome.batches;
                let mut model_id = None;
                if let Some((quality, s, cycles)) = outcome.best {
                    let spec = self.commit(&outcome, task, quality, s, cycles, job.parent.id)?;
                    model_id = Some(spec.id);
                    active.push((spec, outcome.accounted));
                }
                self.log.emit(json!({
                    "event": "child",
                    "phase": phase,
                    "task": task,
                    "generation": generation,
                    "child_id": job.child_id,
                    "parent_id": job.parent.id,
                    "is_seed": job.is_seed,
                    "mutations": job.actions,
                    "notes": outcome.child.notes,
                    "hparams": outcome.child.hparams,
                    "cycle_metrics": outcome.metrics,
                    "quality": outcome.best.map(|b| b.0),
                    "accounted_params": outcome.accounted,
                    "score": outcome.best.map(|b| b.1),
                    "retained": outcome.best.is_some(),
                    "diverged": outcome.diverged,
                    "batches": outcome.batches,
                    "model_id": model_id,
                }))?;
            }
        }

        active.sort_by(rank);
        if let Some((mut best, accounted)) = active.into_iter().next() {
            best.offspring_count = offspring.get(&best.id).copied().unwrap_or(0);
            self.log.emit(json!({
                "event": "phase_end",
                "phase": phase,
                "task": task,
                "best_model": best.id,
                "quality": best.quality,
                "score": best.score,
                "accounted_params": accounted,
                "offspring": offspring.values().sum::<usize>(),
            }))?;
            self.system.best.insert(task.to_string(), best);
        }
        Ok(())
    }

    fn commit(
        &mut self,
        outcome: &TrainOutcome,
        task: &str,
        quality: f64,
        score: f64,
        cycles: usize,
        parent: ModelId,
    ) -> Result<ModelSpec> {
        let mut layers = Vec::with_capacity(outcome.child.layers.len());
        for l in &outcome.child.layers {
            layers.push(match l {
                ChildLayer::Shared(id) => *id,
                ChildLayer::Trainable(d) => self.system.store.commit(
                    d.config.clone(),
                    d.params.clone(),
                    d.source,
                    vec![TrainingRecord {
                        task: task.to_string(),
                        cycles,
                    }],
                )?,
            });
        }
        let spec = ModelSpec {
            id: self.system.alloc_model_id(),
            task: Some(task.to_string()),
            parent: Some(parent),
            layers,
            hparams: outcome.child.hparams.clone(),
            quality,
            score,
            offspring_count: 0,
        };
        self.system.check_model(&spec)?;
        Ok(spec)
    }

    /// Per-task metrics of the current best models.
    pub fn summary(&self) -> Result<RunSummary> {
        summarize(
            &self.system,
            self.tasks,
            self.cfg.eval_batch_size,
            self.batches,
        )
    }
}

/// Evaluates every best model on its task's validation and test splits.
pub fn summarize(
    system: &SystemState,
    tasks: &[TaskData],
    eval_batch: usize,
    batches: usize,
) -> Result<RunSummary> {
    let mut out = Vec::new();
    for t in tasks {
        let Some(m) = system.best.get(&t.def.name) else {
            continue;
        };
        let layers = m
            .layers
            .iter()
            .map(|&id| system.store.get(id).map(|l| (l.config(), l.params())))
            .collect::<Result<Vec<_>>>()?;
        out.push(TaskSummary {
            task: t.def.name.clone(),
            model: m.id,
            valid_accuracy: evaluate(&layers, &t.valid, &m.hparams, eval_batch)?,
            test_accuracy: evaluate(&layers, &t.test, &m.hparams, eval_batch)?,
            accounted_params: system.accounted_params(m, &t.def.name)?,
            total_params: system.total_params(m)?,
            knowledge_flow: system.knowledge_flow(m)?,
        });
    }
    Ok(RunSummary {
        tasks: out,
        batches,
        root_params: system.root_model_params(),
    })
}

/// Runs `task_iterations` sweeps over the task list.
pub fn run_experiment(cfg: &RunConfig, tasks: &[TaskData], log: RunLog) -> Result<RunOutput> {
    cfg.validate()?;
    let mut engine = Engine::new(cfg, tasks, log)?;
    engine.log.emit(json!({
        "event": "run_start",
        "seed": cfg.seed,
        "tasks": tasks.iter().map(|t| &t.def).collect::<Vec<_>>(),
        "root_params": engine.system.root_model_params(),
    }))?;
    for _ in 0..cfg.task_iterations {
        for t in tasks {
            engine.run_active_phase(&t.def.name)?;
        }
    }
    let summary = engine.summary()?;
    engine.log.emit(json!({
        "event": "run_end",
        "mode": "evolve",
        "batches": engine.batches,
        "tasks": summary.tasks,
    }))?;
    Ok(RunOutput {
        system: engine.system,
        summary,
        log: engine.log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_distribution_examples() {
        let d = backoff_distribution(&[0, 3], 4);
        assert_eq!(d[0], 1.0);
        assert!(d[1..].iter().all(|&p| p == 0.0));

        let d = backoff_distribution(&[1, 0], 2);
        assert_eq!(&d[..2], &[0.5, 0.5]);
        assert_eq!(&d[2..], &[0.0, 0.0]);

        let d = backoff_distribution(&[2, 1], 3);
        assert_eq!(&d[..2], &[0.25, 0.375]);
        for &p in &d[2..] {
            assert!((p - 0.375 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn backoff_pick_matches_distribution() {
        let offsprings = [2, 1];
        let exact = backoff_distribution(&offsprings, 3);
        let mut counts = vec![0usize; exact.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 100_000;
        for _ in 0..n {
            match backoff_pick(&offsprings, 3, &mut rng) {
                Pick::Active(i) => counts[i] += 1,
                Pick::Fallback(j) => counts[2 + j] += 1,
                Pick::Seed(_) => unreachable!(),
            }
        }
        let tv: f64 = counts
            .iter()
            .zip(&exact)
            .map(|(&c, &p)| (c as f64 / n as f64 - p).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.01, "tv {tv}");
    }

    #[test]
    fn budget_matches_published_epochs() {
        assert_eq!(baseline_epochs(5, 8, 2), 80);
        assert_eq!(baseline_epochs(30, 8, 2), 480);
    }
}
