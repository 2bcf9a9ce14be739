//! Tasks, image datasets, splits and the training-time preprocessing pipeline.

mod idx;
mod preprocess;
mod synth;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use idx::{load_idx, read_idx_images, read_idx_labels, write_idx};
pub use preprocess::{flip_horizontal, preprocess, preprocess_batch, DRAWS_PER_IMAGE};
pub use synth::{synth_tasks, SynthConfig};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDef {
    pub name: String,
    pub num_classes: usize,
    pub image_extent: usize,
    pub channels: usize,
    pub train_size: usize,
    pub valid_size: usize,
    pub test_size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Full,
    Train,
    Valid,
    Test,
}

/// Unsigned 8-bit images stored contiguously as `[count, height, width, channels]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<usize>,
    pub split: SplitTag,
}

impl Dataset {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        pixels: Vec<u8>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let per = height * width * channels;
        if per == 0 || pixels.len() != per * labels.len() {
            return Err(Error::Shape(format!(
                "{} pixels for {} images of {height}×{width}×{channels}",
                pixels.len(),
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
            labels,
            split: SplitTag::Full,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    fn subset(&self, indices: &[usize], split: SplitTag) -> Self {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Self {
            height: self.height,
            width: self.width,
            channels: self.channels,
            pixels,
            labels,
            split,
        }
    }
}

/// One task's three splits.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub def: TaskDef,
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
}

/// Seeded shuffle followed by a contiguous `(train, valid, test)` split.
pub fn split(
    ds: &Dataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| *f < 0.0) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::Invalid(format!(
            "split fractions {fractions:?} must be ≥ 0 and sum to 1"
        )));
    }
    let n = ds.len();
    let n_train = (a * n as f64).round() as usize;
    let n_valid = ((b * n as f64).round() as usize).min(n - n_train.min(n));
    let n_test = n.saturating_sub(n_train + n_valid);
    if n_train == 0 || n_valid == 0 || n_test == 0 {
        return Err(Error::Invalid(format!(
            "split of {n} samples leaves an empty part ({n_train}/{n_valid}/{n_test})"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((
        ds.subset(&order[..n_train], SplitTag::Train),
        ds.subset(&order[n_train..n_train + n_valid], SplitTag::Valid),
        ds.subset(&order[n_train + n_valid..], SplitTag::Test),
    ))
}
