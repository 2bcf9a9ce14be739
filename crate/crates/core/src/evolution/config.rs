//! Run configuration, task loading and root-model construction.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{load_idx, split, synth_tasks, SynthConfig, TaskData, TaskDef};
use crate::error::{io_err, Error, Result};
use crate::layers::{init_layer, InitMode, LayerConfig};
use crate::mutation::{HpName, HpValue, HyperparamSpace, Hyperparams};
use crate::store::{LayerStore, ModelId, ModelSpec, SystemState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxTask {
    pub name: String,
    pub images: PathBuf,
    pub labels: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SynthConfig),
    Idx { tasks: Vec<IdxTask> },
}

/// Shape of the randomly initialised root model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RootConfig {
    pub image_size: usize,
    #[serde(default = "one")]
    pub channels: usize,
    pub patch_size: usize,
    pub hidden_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_dim: usize,
}

fn one() -> usize {
    1
}
fn default_split() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}
fn default_scale() -> f64 {
    1.0
}
fn default_mu() -> f64 {
    0.1
}
fn default_eval_batch() -> usize {
    256
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSource,
    pub root: RootConfig,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    pub task_iterations: usize,
    pub generations: usize,
    pub children: usize,
    pub child_epochs: usize,
    pub samples_cap_batches: usize,
    pub batch_size: usize,
    #[serde(default = "default_scale")]
    pub scale_factor: f64,
    #[serde(default = "default_mu")]
    pub mutation_prob: f64,
    #[serde(default)]
    pub seed: u64,
    /// Training parallelism; `None` defers to the environment.
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
    /// Overrides of the default fine-tuning hyperparameters.
    #[serde(default)]
    pub hparams: BTreeMap<HpName, HpValue>,
}

fn field_err(field: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("field `{field}`: {msg}"))
}

impl RunConfig {
    /// Parses TOML or JSON, chosen by file extension (`.json` is JSON, anything else TOML).
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let cfg: RunConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("task_iterations", self.task_iterations),
            ("generations", self.generations),
            ("children", self.children),
            ("child_epochs", self.child_epochs),
            ("samples_cap_batches", self.samples_cap_batches),
            ("batch_size", self.batch_size),
            ("eval_batch_size", self.eval_batch_size),
        ] {
            if v == 0 {
                return Err(field_err(name, "must be at least 1"));
            }
        }
        if !(self.scale_factor > 0.0 && self.scale_factor <= 1.0) {
            return Err(field_err(
                "scale_factor",
                format!("{} is outside (0, 1]", self.scale_factor),
            ));
        }
        if !(0.0..=1.0).contains(&self.mutation_prob) {
            return Err(field_err(
                "mutation_prob",
                format!("{} is outside [0, 1]", self.mutation_prob),
            ));
        }
        if self.workers == Some(0) {
            return Err(field_err("workers", "must be at least 1"));
        }
        let r = &self.root;
        if r.patch_size == 0 || !r.image_size.is_multiple_of(r.patch_size) {
            return Err(field_err(
                "root.image_size",
                "must be a positive multiple of root.patch_size",
            ));
        }
        let grid = r.image_size / r.patch_size;
        for c in [
            LayerConfig::patch_embed(r.patch_size, r.channels, r.hidden_dim),
            LayerConfig::pos_embed(grid, r.hidden_dim),
            LayerConfig::transformer_block(r.hidden_dim, r.heads, r.mlp_dim),
        ] {
            c.validate().map_err(|e| field_err("root", e))?;
        }
        if r.blocks == 0 {
            return Err(field_err("root.blocks", "must be at least 1"));
        }
        self.default_hparams()
            .map_err(|e| field_err("hparams", e))?;
        if let DataSource::Idx { tasks } = &self.data {
            if tasks.is_empty() {
                return Err(field_err("data.tasks", "no tasks given"));
            }
        }
        Ok(())
    }

    /// Default recipe with the configured overrides applied.
    pub fn default_hparams(&self) -> Result<Hyperparams> {
        let mut hp = Hyperparams::defaults(self.root.image_size);
        for (&name, &value) in &self.hparams {
            let value = match (hp.get(name), value) {
                (HpValue::Float(_), HpValue::Int(i)) => HpValue::Float(i as f64),
                _ => value,
            };
            hp.set(name, value)?;
        }
        Ok(hp)
    }

    pub fn space(&self) -> HyperparamSpace {
        HyperparamSpace::new(self.root.patch_size, self.root.image_size)
    }

    pub fn worker_count(&self) -> usize {
        self.workers
            .or_else(|| {
                std::env::var("MUNET_WORKERS")
                    .ok()
                    .and_then(|v| v.parse().ok())
            })
            .unwrap_or(1)
            .max(1)
    }
}

/// Loads and splits every task of the configured data source.
pub fn load_tasks(cfg: &RunConfig) -> Result<Vec<TaskData>> {
    let [a, b, c] = cfg.split;
    let (full, split_seed): (Vec<(TaskDef, crate::data::Dataset)>, u64) = match &cfg.data {
        DataSource::Synthetic(s) => (synth_tasks(s)?, s.seed),
        DataSource::Idx { tasks } => {
            let mut out = Vec::new();
            for t in tasks {
                let ds = load_idx(&t.images, &t.labels)?;
                let def = TaskDef {
                    name: t.name.clone(),
                    num_classes: ds.num_classes(),
                    image_extent: ds.height.max(ds.width),
                    channels: ds.channels,
                    train_size: 0,
                    valid_size: 0,
                    test_size: 0,
                };
                out.push((def, ds));
            }
            (out, 0)
        }
    };
    let mut names = std::collections::BTreeSet::new();
    full.into_iter()
        .enumerate()
        .map(|(i, (mut def, ds))| {
            if !names.insert(def.name.clone()) {
                return Err(field_err(
                    "data.tasks",
                    format!("duplicate task name `{}`", def.name),
                ));
            }
            if ds.channels != cfg.root.channels {
                return Err(field_err(
                    "root.channels",
                    format!("task `{}` has {} channels", def.name, ds.channels),
                ));
            }
            let (train, valid, test) = split(&ds, (a, b, c), split_seed.wrapping_add(i as u64))?;
            def.train_size = train.len();
            def.valid_size = valid.len();
            def.test_size = test.len();
            Ok(TaskData {
                def,
                train,
                valid,
                test,
            })
        })
        .collect()
}

/// Randomly initialised root with a zero head sized for `head_classes`.
pub fn build_root(cfg: &RunConfig, head_classes: usize) -> Result<SystemState> {
    let r = &cfg.root;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut configs = vec![
        LayerConfig::patch_embed(r.patch_size, r.channels, r.hidden_dim),
        LayerConfig::class_token(r.hidden_dim),
        LayerConfig::pos_embed(r.image_size / r.patch_size, r.hidden_dim),
    ];
    configs.extend(
        (0..r.blocks).map(|_| LayerConfig::transformer_block(r.hidden_dim, r.heads, r.mlp_dim)),
    );
    configs.push(LayerConfig::head(r.hidden_dim, head_classes));
    let mut store = LayerStore::new();
    let mut layers = Vec::with_capacity(configs.len());
    for c in configs {
        let p = init_layer(&c, &mut rng, InitMode::Random);
        layers.push(store.commit(c, p, None, Vec::new())?);
    }
    let root = ModelSpec {
        id: ModelId(0),
        task: None,
        parent: None,
        layers,
        hparams: cfg.default_hparams()?,
        quality: 0.0,
        score: 0.0,
        offspring_count: 0,
    };
    SystemState::new(store, root)
}
