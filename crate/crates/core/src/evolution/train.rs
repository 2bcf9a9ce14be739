//! Child training with cycle-capped validation and best-snapshot retention.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{preprocess_batch, Dataset, TaskData};
use crate::error::{Error, Result};
use crate::layers::{self, LayerCache, LayerConfig, LayerParams};
use crate::mutation::{Child, ChildLayer, Hyperparams};
use crate::optim::{clip_global_norm, lr_at_step, OptimizerState};
use crate::store::{check_path, SystemState};
use crate::tensor::{cross_entropy, Tensor};

/// Gradients are clipped to this global norm before every step.
pub const CLIP_NORM: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub child_epochs: usize,
    pub samples_cap_batches: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub scale_factor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleMetric {
    pub cycle: usize,
    pub batches: usize,
    /// Mean training loss over the cycle; `None` once training diverged.
    pub loss: Option<f64>,
    pub quality: f64,
    pub score: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// The child with its trainable layers set to the retained snapshot.
    pub child: Child,
    pub metrics: Vec<CycleMetric>,
    /// `(quality, score, cycles trained up to the snapshot)` if retained.
    pub best: Option<(f64, f64, usize)>,
    pub batches: usize,
    pub diverged: bool,
    pub accounted: f64,
}

/// Batches per train cycle. Each cycle is `min(epoch, cap)` batches and the
/// last one is truncated so the total is exactly `child_epochs` epochs.
pub fn cycle_plan(epoch_batches: usize, child_epochs: usize, cap: usize) -> Vec<usize> {
    let total = epoch_batches * child_epochs;
    let per = epoch_batches.min(cap).max(1);
    let n = total.div_ceil(per);
    (0..n).map(|i| per.min(total - i * per)).collect()
}

/// Number of batches in one pass over `train` (the trailing partial batch is dropped).
pub fn epoch_batches(train_len: usize, batch_size: usize) -> usize {
    (train_len / batch_size.min(train_len).max(1)).max(1)
}

/// Score `q · s^(accounted / root_params)`.
pub fn score(quality: f64, accounted: f64, root_params: usize, s: f64) -> Result<f64> {
    if !(s > 0.0 && s <= 1.0) {
        return Err(Error::Invalid(format!("scale factor {s} outside (0, 1]")));
    }
    Ok(quality * s.powf(accounted / root_params as f64))
}

fn forward_all(layers: &[(&LayerConfig, &LayerParams)], mut x: Tensor) -> Result<Tensor> {
    for (c, p) in layers {
        x = layers::forward(c, p, &x, false)?.0;
    }
    Ok(x)
}

/// Logits of a resolved path on every sample of `ds` (eval preprocessing).
pub fn predict(
    layers: &[(&LayerConfig, &LayerParams)],
    ds: &Dataset,
    hp: &Hyperparams,
    eval_batch: usize,
) -> Result<Tensor> {
    check_path(&layers.iter().map(|l| l.0).collect::<Vec<_>>())?;
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let mut out = Vec::new();
    let mut classes = 0;
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(eval_batch.max(1)) {
        let x = preprocess_batch(ds, chunk, hp, &mut rng, false)?;
        let logits = forward_all(layers, x)?;
        classes = logits.last_dim();
        out.extend_from_slice(logits.data());
    }
    Tensor::new(vec![ds.len(), classes], out)
}

/// Top-1 accuracy of a resolved path on `ds`.
pub fn evaluate(
    layers: &[(&LayerConfig, &LayerParams)],
    ds: &Dataset,
    hp: &Hyperparams,
    eval_batch: usize,
) -> Result<f64> {
    if ds.is_empty() {
        return Ok(0.0);
    }
    let logits = predict(layers, ds, hp, eval_batch)?;
    let correct = (0..ds.len())
        .filter(|&i| {
            let row = logits.row(i);
            let arg = row
                .iter()
                .enumerate()
                .fold(0, |best, (j, &v)| if v > row[best] { j } else { best });
            arg == ds.labels[i]
        })
        .count();
    Ok(correct as f64 / ds.len() as f64)
}

/// Endless stream of shuffled epochs.
struct BatchStream {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
}

impl BatchStream {
    fn new(n: usize, batch: usize) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
            batch: batch.min(n).max(1),
        }
    }

    fn next(&mut self, rng: &mut impl Rng) -> &[usize] {
        if self.pos + self.batch > self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        let s = &self.order[self.pos..self.pos + self.batch];
        self.pos += self.batch;
        s
    }
}

/// Trains `child` on `task` and keeps the snapshot with the best score above `score_star`.
pub fn train_child(
    sys: &SystemState,
    mut child: Child,
    task: &TaskData,
    settings: &TrainSettings,
    score_star: f64,
    rng: &mut impl Rng,
) -> Result<TrainOutcome> {
    let n = child.layers.len();
    let lo = child.lowest_trainable();
    let root_params = sys.root_model_params();
    let accounted = sys.accounted_for(
        &child.shared_ids(),
        child.trainable_params(),
        &task.def.name,
    )?;

    // Pull trainable parameters out so the optimizer can own them contiguously.
    let mut slot_of = vec![None; n];
    let mut params: Vec<LayerParams> = Vec::new();
    for (i, l) in child.layers.iter_mut().enumerate() {
        if let ChildLayer::Trainable(d) = l {
            slot_of[i] = Some(params.len());
            params.push(std::mem::replace(
                &mut d.params,
                LayerParams {
                    tensors: Vec::new(),
                },
            ));
        }
    }
    let configs: Vec<LayerConfig> = child
        .layers
        .iter()
        .map(|l| match l {
            ChildLayer::Shared(id) => sys.store.get(*id).map(|s| s.config().clone()),
            ChildLayer::Trainable(d) => Ok(d.config.clone()),
        })
        .collect::<Result<_>>()?;
    check_path(&configs.iter().collect::<Vec<_>>())?;

    let hp = child.hparams.clone();
    let train = &task.train;
    let per_epoch = epoch_batches(train.len(), settings.batch_size);
    let plan = cycle_plan(
        per_epoch,
        settings.child_epochs,
        settings.samples_cap_batches,
    );
    let total: usize = plan.iter().sum();
    let mut opt = OptimizerState::new(total);
    let mut stream = BatchStream::new(train.len(), settings.batch_size);

    let mut metrics = Vec::with_capacity(plan.len());
    let mut best: Option<(f64, f64, usize)> = None;
    let mut best_params: Option<Vec<LayerParams>> = None;
    let mut best_score = score_star;
    let mut step = 0;
    let mut diverged = false;

    for (cycle, &batches) in plan.iter().enumerate() {
        let mut loss_sum = 0.0;
        for _ in 0..batches {
            let idx = stream.next(rng).to_vec();
            let x = preprocess_batch(train, &idx, &hp, rng, true)?;
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let refs = resolve(sys, &child, &configs, &params, &slot_of)?;

            let mut h = x;
            for (c, p) in &refs[..lo] {
                h = layers::forward(c, p, &h, false)?.0;
            }
            let mut caches: Vec<(Vec<usize>, LayerCache)> = Vec::with_capacity(n - lo);
            for (c, p) in &refs[lo..] {
                let (y, cache) = layers::forward(c, p, &h, true)?;
                caches.push((h.dims().to_vec(), cache.expect("cache requested")));
                h = y;
            }
            let (loss, mut dy) = cross_entropy(&h, &labels)?;
            if !loss.is_finite() {
                diverged = true;
                break;
            }
            loss_sum += loss;

            let mut grads: Vec<LayerParams> = params.iter().map(LayerParams::zeros_like).collect();
            for i in (lo..n).rev() {
                let (x_dims, cache) = &caches[i - lo];
                let g = slot_of[i].map(|s| &mut grads[s]);
                match layers::backward(refs[i].0, refs[i].1, cache, x_dims, &dy, g, i > lo)? {
                    Some(dx) => dy = dx,
                    None => break,
                }
            }
            drop(refs);
            clip_global_norm(&mut grads, CLIP_NORM);
            let lr = lr_at_step(hp.schedule, step, total, hp.warmup_ratio, hp.learning_rate)?;
            opt.sgd_step(&mut params, &grads, lr, hp.momentum, hp.nesterov)?;
            step += 1;
            if !params.iter().all(LayerParams::all_finite) {
                diverged = true;
                break;
            }
        }
        if diverged {
            break;
        }
        let refs = resolve(sys, &child, &configs, &params, &slot_of)?;
        let quality = evaluate(&refs, &task.valid, &hp, settings.eval_batch_size)?;
        let s = score(quality, accounted, root_params, settings.scale_factor)?;
        metrics.push(CycleMetric {
            cycle: cycle + 1,
            batches,
            loss: Some(loss_sum / batches as f64),
            quality,
            score: s,
        });
        if s > best_score {
            best_score = s;
            best = Some((quality, s, cycle + 1));
            best_params = Some(params.clone());
        }
    }

    if diverged {
        best = None;
        best_params = None;
    }
    let mut restored = best_params.unwrap_or(params);
    for (i, l) in child.layers.iter_mut().enumerate() {
        if let (ChildLayer::Trainable(d), Some(s)) = (l, slot_of[i]) {
            d.params = std::mem::replace(
                &mut restored[s],
                LayerParams {
                    tensors: Vec::new(),
                },
            );
        }
    }
    Ok(TrainOutcome {
        child,
        metrics,
        best,
        batches: step,
        diverged,
        accounted,
    })
}

fn resolve<'a>(
    sys: &'a SystemState,
    child: &Child,
    configs: &'a [LayerConfig],
    params: &'a [LayerParams],
    slot_of: &[Option<usize>],
) -> Result<Vec<(&'a LayerConfig, &'a LayerParams)>> {
    child
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| match (l, slot_of[i]) {
            (_, Some(s)) => Ok((&configs[i], &params[s])),
            (ChildLayer::Shared(id), None) => sys.store.get(*id).map(|s| (&configs[i], s.params())),
            (ChildLayer::Trainable(_), None) => unreachable!("trainable layers always have a slot"),
        })
        .collect()
}
