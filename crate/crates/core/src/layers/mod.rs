//! The layer kinds a model path is built from.
//!
//! A model is `PatchEmbed → ClassToken → PosEmbed → {TransformerBlock |
//! ResidualAdapter}* → Head`. Every kind has a forward pass that optionally
//! records a [`LayerCache`], and a backward pass that produces the input
//! gradient and (for trainable layers) accumulates parameter gradients.
//!
//! Activations between layers are `[batch, seq, hidden]` tensors; the patch
//! embedding consumes `[batch, height, width, channels]` images and the head
//! emits `[batch, classes]` logits.

mod block;
mod embed;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use block::{AdapterCache, BlockCache};
pub use embed::{bilinear_resample_grid, ResampleMap};

/// Inner dimensions a residual adapter may take.
pub const ADAPTER_DIMS: [usize; 5] = [8, 16, 32, 64, 128];

/// Standard deviation for truncated-normal initialization.
pub const INIT_STD: f32 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LayerKind {
    PatchEmbed,
    ClassToken,
    PosEmbed,
    TransformerBlock,
    ResidualAdapter,
    Head,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::PatchEmbed => "patch_embed",
            LayerKind::ClassToken => "class_token",
            LayerKind::PosEmbed => "pos_embed",
            LayerKind::TransformerBlock => "transformer",
            LayerKind::ResidualAdapter => "adapter",
            LayerKind::Head => "head",
        }
    }
}

/// Shape configuration of one layer. Fields a kind does not use are zero.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerConfig {
    pub kind: LayerKind,
    pub hidden_dim: usize,
    #[serde(default)]
    pub patch_size: usize,
    #[serde(default)]
    pub channels: usize,
    #[serde(default)]
    pub num_heads: usize,
    #[serde(default)]
    pub mlp_dim: usize,
    #[serde(default)]
    pub adapter_inner_dim: usize,
    #[serde(default)]
    pub num_classes: usize,
    /// Patch tokens per side, for position embeddings.
    #[serde(default)]
    pub grid_extent: usize,
}

impl LayerConfig {
    fn base(kind: LayerKind, hidden_dim: usize) -> Self {
        Self {
            kind,
            hidden_dim,
            patch_size: 0,
            channels: 0,
            num_heads: 0,
            mlp_dim: 0,
            adapter_inner_dim: 0,
            num_classes: 0,
            grid_extent: 0,
        }
    }

    pub fn patch_embed(patch_size: usize, channels: usize, hidden_dim: usize) -> Self {
        Self {
            patch_size,
            channels,
            ..Self::base(LayerKind::PatchEmbed, hidden_dim)
        }
    }

    pub fn class_token(hidden_dim: usize) -> Self {
        Self::base(LayerKind::ClassToken, hidden_dim)
    }

    pub fn pos_embed(grid_extent: usize, hidden_dim: usize) -> Self {
        Self {
            grid_extent,
            ..Self::base(LayerKind::PosEmbed, hidden_dim)
        }
    }

    pub fn transformer_block(hidden_dim: usize, num_heads: usize, mlp_dim: usize) -> Self {
        Self {
            num_heads,
            mlp_dim,
            ..Self::base(LayerKind::TransformerBlock, hidden_dim)
        }
    }

    pub fn residual_adapter(hidden_dim: usize, inner_dim: usize) -> Self {
        Self {
            adapter_inner_dim: inner_dim,
            ..Self::base(LayerKind::ResidualAdapter, hidden_dim)
        }
    }

    pub fn head(hidden_dim: usize, num_classes: usize) -> Self {
        Self {
            num_classes,
            ..Self::base(LayerKind::Head, hidden_dim)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Invalid(format!("{}: {msg}", self.kind.name())));
        if self.hidden_dim == 0 {
            return bad("hidden_dim must be positive".into());
        }
        match self.kind {
            LayerKind::PatchEmbed if self.patch_size == 0 || self.channels == 0 => {
                bad("patch_size and channels must be positive".into())
            }
            LayerKind::PosEmbed if self.grid_extent == 0 => bad("grid_extent must be ≥ 1".into()),
            LayerKind::TransformerBlock
                if self.num_heads == 0
                    || !self.hidden_dim.is_multiple_of(self.num_heads)
                    || self.mlp_dim == 0 =>
            {
                bad(format!(
                    "hidden_dim {} not divisible by {} heads (mlp_dim {})",
                    self.hidden_dim, self.num_heads, self.mlp_dim
                ))
            }
            LayerKind::ResidualAdapter if !ADAPTER_DIMS.contains(&self.adapter_inner_dim) => {
                bad(format!(
                    "inner dim {} not in {ADAPTER_DIMS:?}",
                    self.adapter_inner_dim
                ))
            }
            LayerKind::Head if self.num_classes < 2 => bad("need at least 2 classes".into()),
            _ => Ok(()),
        }
    }

    /// Parameter tensors of this layer, in storage order.
    pub fn tensor_specs(&self) -> Vec<TensorSpec> {
        use TensorRole::*;
        let h = self.hidden_dim;
        let spec = |name: &'static str, dims: Vec<usize>, role| TensorSpec { name, dims, role };
        match self.kind {
            LayerKind::PatchEmbed => {
                let fan_in = self.patch_size * self.patch_size * self.channels;
                vec![
                    spec("kernel", vec![fan_in, h], Weight),
                    spec("bias", vec![h], Bias),
                ]
            }
            LayerKind::ClassToken => vec![spec("token", vec![h], Weight)],
            LayerKind::PosEmbed => {
                let g = self.grid_extent;
                vec![spec("embedding", vec![g * g + 1, h], Weight)]
            }
            LayerKind::TransformerBlock => vec![
                spec("ln1_scale", vec![h], Scale),
                spec("ln1_bias", vec![h], Bias),
                spec("qkv_kernel", vec![h, 3 * h], Weight),
                spec("qkv_bias", vec![3 * h], Bias),
                spec("out_kernel", vec![h, h], Weight),
                spec("out_bias", vec![h], Bias),
                spec("ln2_scale", vec![h], Scale),
                spec("ln2_bias", vec![h], Bias),
                spec("mlp1_kernel", vec![h, self.mlp_dim], Weight),
                spec("mlp1_bias", vec![self.mlp_dim], Bias),
                spec("mlp2_kernel", vec![self.mlp_dim, h], Weight),
                spec("mlp2_bias", vec![h], Bias),
            ],
            LayerKind::ResidualAdapter => {
                let d = self.adapter_inner_dim;
                vec![
                    spec("ln_scale", vec![h], Scale),
                    spec("ln_bias", vec![h], Bias),
                    spec("fc1_kernel", vec![h, d], Weight),
                    spec("fc1_bias", vec![d], Bias),
                    spec("fc2_kernel", vec![d, h], ZeroWeight),
                    spec("fc2_bias", vec![h], Bias),
                ]
            }
            LayerKind::Head => vec![
                spec("kernel", vec![h, self.num_classes], ZeroWeight),
                spec("bias", vec![self.num_classes], Bias),
            ],
        }
    }
}

/// How a parameter tensor is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorRole {
    /// Truncated normal.
    Weight,
    /// Always zero at creation (head kernel, adapter output projection).
    ZeroWeight,
    Bias,
    /// Layer-norm scale, initialized to one.
    Scale,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorSpec {
    pub name: &'static str,
    pub dims: Vec<usize>,
    pub role: TensorRole,
}

/// Exact scalar count of a layer, including biases and norm affines.
pub fn param_count(config: &LayerConfig) -> usize {
    config
        .tensor_specs()
        .iter()
        .map(|s| s.dims.iter().product::<usize>())
        .sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub tensors: Vec<Tensor>,
}

impl LayerParams {
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.dims()))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Checks tensor count and shapes against `config`.
    pub fn check_shapes(&self, config: &LayerConfig) -> Result<()> {
        let specs = config.tensor_specs();
        if specs.len() != self.tensors.len() {
            return Err(Error::Shape(format!(
                "{} expects {} tensors, got {}",
                config.kind.name(),
                specs.len(),
                self.tensors.len()
            )));
        }
        for (s, t) in specs.iter().zip(&self.tensors) {
            if s.dims != t.dims() {
                return Err(Error::Shape(format!(
                    "{}.{}: expected {:?}, got {:?}",
                    config.kind.name(),
                    s.name,
                    s.dims,
                    t.dims()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitMode {
    Random,
    /// All weights and biases zero; layer-norm scales one.
    Zero,
}

/// Truncated normal at ±2σ, by rejection.
pub fn truncated_normal(rng: &mut impl Rng, std: f32) -> f32 {
    let normal = Normal::new(0.0f32, std).expect("valid std");
    loop {
        let v = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            return v;
        }
    }
}

pub fn init_layer(config: &LayerConfig, rng: &mut impl Rng, mode: InitMode) -> LayerParams {
    let tensors = config
        .tensor_specs()
        .into_iter()
        .map(|spec| match (spec.role, mode) {
            (TensorRole::Scale, _) => Tensor::filled(&spec.dims, 1.0),
            (TensorRole::Weight, InitMode::Random) => {
                Tensor::from_fn(&spec.dims, |_| truncated_normal(rng, INIT_STD))
            }
            _ => Tensor::zeros(&spec.dims),
        })
        .collect();
    LayerParams { tensors }
}

/// Per-layer intermediate values needed by the backward pass.
#[derive(Clone, Debug)]
pub enum LayerCache {
    PatchEmbed { patches: Vec<f32>, rows: usize },
    ClassToken,
    PosEmbed { map: Option<ResampleMap> },
    TransformerBlock(Box<BlockCache>),
    ResidualAdapter(Box<AdapterCache>),
    Head { class_repr: Vec<f32>, seq: usize },
}

/// Runs one layer. `x` is an image batch for `PatchEmbed`, otherwise a
/// `[batch, seq, hidden]` activation.
pub fn forward(
    config: &LayerConfig,
    params: &LayerParams,
    x: &Tensor,
    keep_cache: bool,
) -> Result<(Tensor, Option<LayerCache>)> {
    match config.kind {
        LayerKind::PatchEmbed => embed::patch_embed(config, params, x, keep_cache),
        LayerKind::ClassToken => embed::class_token(config, params, x, keep_cache),
        LayerKind::PosEmbed => embed::pos_embed(config, params, x, keep_cache),
        LayerKind::TransformerBlock => block::transformer_block(config, params, x, keep_cache),
        LayerKind::ResidualAdapter => block::residual_adapter(config, params, x, keep_cache),
        LayerKind::Head => embed::head(config, params, x, keep_cache),
    }
}

/// Backward through one layer.
///
/// `x_dims` are the dims of the forward input. Parameter gradients are
/// accumulated into `grads` when given; the input gradient is returned when
/// `need_dx` is set (never for `PatchEmbed`, whose input is pixels).
pub fn backward(
    config: &LayerConfig,
    params: &LayerParams,
    cache: &LayerCache,
    x_dims: &[usize],
    dy: &Tensor,
    grads: Option<&mut LayerParams>,
    need_dx: bool,
) -> Result<Option<Tensor>> {
    match (config.kind, cache) {
        (LayerKind::PatchEmbed, LayerCache::PatchEmbed { patches, rows }) => {
            embed::patch_embed_backward(config, patches, *rows, dy, grads);
            Ok(None)
        }
        (LayerKind::ClassToken, LayerCache::ClassToken) => {
            Ok(embed::class_token_backward(x_dims, dy, grads, need_dx))
        }
        (LayerKind::PosEmbed, LayerCache::PosEmbed { map }) => {
            Ok(embed::pos_embed_backward(map.as_ref(), dy, grads, need_dx))
        }
        (LayerKind::TransformerBlock, LayerCache::TransformerBlock(c)) => Ok(
            block::transformer_block_backward(config, params, c, dy, grads, need_dx),
        ),
        (LayerKind::ResidualAdapter, LayerCache::ResidualAdapter(c)) => Ok(
            block::residual_adapter_backward(config, params, c, dy, grads, need_dx),
        ),
        (LayerKind::Head, LayerCache::Head { class_repr, seq }) => Ok(embed::head_backward(
            config, params, class_repr, *seq, dy, grads, need_dx,
        )),
        (kind, _) => Err(Error::Invalid(format!(
            "cache does not belong to a {}",
            kind.name()
        ))),
    }
}

/// Single-sequence convenience wrappers over [`forward`].
pub fn patch_embed_forward(
    config: &LayerConfig,
    params: &LayerParams,
    image: &Tensor,
) -> Result<Tensor> {
    let d = image.dims().to_vec();
    if d.len() != 3 {
        return Err(Error::Shape(format!("expected [H, W, C] image, got {d:?}")));
    }
    let batch = image.clone().reshape(&[1, d[0], d[1], d[2]])?;
    let (y, _) = forward(config, params, &batch, false)?;
    let (t, h) = (y.dims()[1], y.dims()[2]);
    y.reshape(&[t, h])
}

fn on_sequence(config: &LayerConfig, params: &LayerParams, x: &Tensor) -> Result<Tensor> {
    let d = x.dims().to_vec();
    if d.len() != 2 {
        return Err(Error::Shape(format!("expected [seq, hidden], got {d:?}")));
    }
    let (y, _) = forward(config, params, &x.clone().reshape(&[1, d[0], d[1]])?, false)?;
    let yd = y.dims().to_vec();
    y.reshape(&yd[1..])
}

pub fn class_token_prepend(
    config: &LayerConfig,
    params: &LayerParams,
    tokens: &Tensor,
) -> Result<Tensor> {
    on_sequence(config, params, tokens)
}

pub fn pos_embed_add(
    config: &LayerConfig,
    params: &LayerParams,
    tokens: &Tensor,
) -> Result<Tensor> {
    on_sequence(config, params, tokens)
}

pub fn transformer_block_forward(
    config: &LayerConfig,
    params: &LayerParams,
    x: &Tensor,
) -> Result<Tensor> {
    on_sequence(config, params, x)
}

pub fn residual_adapter_forward(
    config: &LayerConfig,
    params: &LayerParams,
    x: &Tensor,
) -> Result<Tensor> {
    on_sequence(config, params, x)
}

/// Maps a single class-token representation `[hidden]` to logits `[classes]`.
pub fn head_forward(
    config: &LayerConfig,
    params: &LayerParams,
    class_repr: &Tensor,
) -> Result<Tensor> {
    let h = class_repr.len();
    let x = class_repr.clone().reshape(&[1, 1, h])?;
    let (y, _) = forward(config, params, &x, false)?;
    let c = y.last_dim();
    y.reshape(&[c])
}

#[cfg(test)]
mod tests;
