//! SGD with momentum, warmup learning-rate schedules and global-norm clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::LayerParams;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    Cosine,
    /// Two equal-length cosine cycles after warmup.
    Restarts,
}

impl Schedule {
    pub const ALL: [Schedule; 3] = [Schedule::Constant, Schedule::Cosine, Schedule::Restarts];

    pub fn name(self) -> &'static str {
        match self {
            Schedule::Constant => "constant",
            Schedule::Cosine => "cosine",
            Schedule::Restarts => "restarts",
        }
    }
}

/// Number of cosine cycles used by [`Schedule::Restarts`].
pub const RESTART_CYCLES: usize = 2;

/// Learning rate at `step` of `total_steps`.
///
/// Linear warmup from 0 over `warmup_ratio · total_steps`, then the schedule
/// over the remaining steps.
pub fn lr_at_step(
    schedule: Schedule,
    step: usize,
    total_steps: usize,
    warmup_ratio: f64,
    base_lr: f64,
) -> Result<f64> {
    if !(0.0..1.0).contains(&warmup_ratio) {
        return Err(Error::Invalid(format!(
            "warmup ratio {warmup_ratio} not in [0, 1)"
        )));
    }
    if step > total_steps {
        return Err(Error::Invalid(format!(
            "step {step} beyond total {total_steps}"
        )));
    }
    let total = total_steps as f64;
    let warmup = warmup_ratio * total;
    let step = step as f64;
    if step < warmup {
        return Ok(base_lr * step / warmup);
    }
    let progress = if total > warmup {
        ((step - warmup) / (total - warmup)).clamp(0.0, 1.0)
    } else {
        1.0
    };
    let cosine = |p: f64| base_lr * 0.5 * (1.0 + (std::f64::consts::PI * p).cos());
    Ok(match schedule {
        Schedule::Constant => base_lr,
        Schedule::Cosine => cosine(progress),
        Schedule::Restarts => {
            if progress >= 1.0 {
                0.0
            } else {
                cosine((progress * RESTART_CYCLES as f64).fract())
            }
        }
    })
}

/// Global L2 norm over a set of tensors, accumulated in f64.
pub fn global_norm<'a>(grads: impl IntoIterator<Item = &'a Tensor>) -> f64 {
    grads.into_iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

/// Rescales all gradients so their joint norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [LayerParams], max_norm: f64) -> f64 {
    let norm = global_norm(grads.iter().flat_map(|g| g.tensors.iter()));
    if norm > max_norm {
        let scale = (max_norm / norm) as f32;
        for t in grads.iter_mut().flat_map(|g| g.tensors.iter_mut()) {
            t.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
    }
    norm
}

/// Momentum buffers for one model's trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct OptimizerState {
    velocity: Vec<LayerParams>,
    pub step: usize,
    pub total_steps: usize,
}

impl OptimizerState {
    pub fn new(total_steps: usize) -> Self {
        Self {
            velocity: Vec::new(),
            step: 0,
            total_steps,
        }
    }

    /// `v ← m·v + g`; plain update `v`, nesterov update `g + m·v`; `p ← p − lr·update`.
    pub fn sgd_step(
        &mut self,
        params: &mut [LayerParams],
        grads: &[LayerParams],
        lr: f64,
        momentum: f64,
        nesterov: bool,
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "{} params vs {} grads",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.tensors.len() != g.tensors.len()
                || p.tensors
                    .iter()
                    .zip(&g.tensors)
                    .any(|(a, b)| a.dims() != b.dims())
            {
                return Err(Error::Shape(
                    "gradient shapes do not match parameters".into(),
                ));
            }
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(LayerParams::zeros_like).collect();
        }
        let lr = lr as f32;
        let m = momentum as f32;
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((pt, gt), vt) in p.tensors.iter_mut().zip(&g.tensors).zip(&mut v.tensors) {
                for ((pv, &gv), vv) in pt.data_mut().iter_mut().zip(gt.data()).zip(vt.data_mut()) {
                    *vv = m * *vv + gv;
                    let update = if nesterov { gv + m * *vv } else { *vv };
                    *pv -= lr * update;
                }
            }
        }
        self.step += 1;
        Ok(())
    }
}
