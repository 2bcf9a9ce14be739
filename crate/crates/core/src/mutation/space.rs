//! Tunable hyperparameters and their ordered value lists.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::ADAPTER_DIMS;
use crate::optim::Schedule;

pub const LEARNING_RATES: [f64; 12] = [
    0.0001, 0.0002, 0.0005, 0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5,
];
pub const WARMUP_RATIOS: [f64; 7] = [0.01, 0.02, 0.05, 0.1, 0.2, 0.3, 0.4];
pub const MOMENTUMS: [f64; 7] = [0.7, 0.8, 0.85, 0.9, 0.95, 0.98, 0.99];
pub const CROP_AREA_MINS: [f64; 7] = [0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0];
pub const ASPECT_MINS: [f64; 4] = [0.25, 0.5, 0.75, 1.0];
pub const COLOR_DELTAS: [f64; 6] = [0.0, 0.01, 0.02, 0.05, 0.1, 0.2];

/// Names of the tunable dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HpName {
    LearningRate,
    Schedule,
    WarmupRatio,
    Momentum,
    Nesterov,
    CropAreaMin,
    AspectMin,
    Flip,
    BrightnessDelta,
    ContrastDelta,
    SaturationDelta,
    HueDelta,
    ImageSize,
    AdapterInnerDim,
}

impl HpName {
    pub const ALL: [HpName; 14] = [
        HpName::LearningRate,
        HpName::Schedule,
        HpName::WarmupRatio,
        HpName::Momentum,
        HpName::Nesterov,
        HpName::CropAreaMin,
        HpName::AspectMin,
        HpName::Flip,
        HpName::BrightnessDelta,
        HpName::ContrastDelta,
        HpName::SaturationDelta,
        HpName::HueDelta,
        HpName::ImageSize,
        HpName::AdapterInnerDim,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            HpName::LearningRate => "learning_rate",
            HpName::Schedule => "schedule",
            HpName::WarmupRatio => "warmup_ratio",
            HpName::Momentum => "momentum",
            HpName::Nesterov => "nesterov",
            HpName::CropAreaMin => "crop_area_min",
            HpName::AspectMin => "aspect_min",
            HpName::Flip => "flip",
            HpName::BrightnessDelta => "brightness_delta",
            HpName::ContrastDelta => "contrast_delta",
            HpName::SaturationDelta => "saturation_delta",
            HpName::HueDelta => "hue_delta",
            HpName::ImageSize => "image_size",
            HpName::AdapterInnerDim => "adapter_inner_dim",
        }
    }
}

impl std::str::FromStr for HpName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        HpName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| Error::UnknownHyperparam(s.to_string()))
    }
}

/// A single hyperparameter value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum HpValue {
    Bool(bool),
    Int(usize),
    Float(f64),
    Schedule(Schedule),
}

impl std::fmt::Display for HpValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HpValue::Bool(b) => write!(f, "{b}"),
            HpValue::Int(i) => write!(f, "{i}"),
            HpValue::Float(x) => write!(f, "{x}"),
            HpValue::Schedule(s) => f.write_str(s.name()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub schedule: Schedule,
    pub warmup_ratio: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub crop_area_min: f64,
    pub aspect_min: f64,
    pub flip: bool,
    pub brightness_delta: f64,
    pub contrast_delta: f64,
    pub saturation_delta: f64,
    pub hue_delta: f64,
    pub image_size: usize,
    pub adapter_inner_dim: usize,
}

impl Hyperparams {
    /// The default fine-tuning recipe at the given image size.
    pub fn defaults(image_size: usize) -> Self {
        Self {
            learning_rate: 0.01,
            schedule: Schedule::Cosine,
            warmup_ratio: 0.1,
            momentum: 0.9,
            nesterov: false,
            crop_area_min: 0.05,
            aspect_min: 0.75,
            flip: true,
            brightness_delta: 0.0,
            contrast_delta: 0.0,
            saturation_delta: 0.0,
            hue_delta: 0.0,
            image_size,
            adapter_inner_dim: 32,
        }
    }

    pub fn get(&self, name: HpName) -> HpValue {
        use HpValue::*;
        match name {
            HpName::LearningRate => Float(self.learning_rate),
            HpName::Schedule => Schedule(self.schedule),
            HpName::WarmupRatio => Float(self.warmup_ratio),
            HpName::Momentum => Float(self.momentum),
            HpName::Nesterov => Bool(self.nesterov),
            HpName::CropAreaMin => Float(self.crop_area_min),
            HpName::AspectMin => Float(self.aspect_min),
            HpName::Flip => Bool(self.flip),
            HpName::BrightnessDelta => Float(self.brightness_delta),
            HpName::ContrastDelta => Float(self.contrast_delta),
            HpName::SaturationDelta => Float(self.saturation_delta),
            HpName::HueDelta => Float(self.hue_delta),
            HpName::ImageSize => Int(self.image_size),
            HpName::AdapterInnerDim => Int(self.adapter_inner_dim),
        }
    }

    pub fn set(&mut self, name: HpName, value: HpValue) -> Result<()> {
        use HpValue::*;
        let mismatch = || Error::Invalid(format!("value {value} does not fit {}", name.as_str()));
        match (name, value) {
            (HpName::LearningRate, Float(v)) => self.learning_rate = v,
            (HpName::Schedule, Schedule(v)) => self.schedule = v,
            (HpName::WarmupRatio, Float(v)) => self.warmup_ratio = v,
            (HpName::Momentum, Float(v)) => self.momentum = v,
            (HpName::Nesterov, Bool(v)) => self.nesterov = v,
            (HpName::CropAreaMin, Float(v)) => self.crop_area_min = v,
            (HpName::AspectMin, Float(v)) => self.aspect_min = v,
            (HpName::Flip, Bool(v)) => self.flip = v,
            (HpName::BrightnessDelta, Float(v)) => self.brightness_delta = v,
            (HpName::ContrastDelta, Float(v)) => self.contrast_delta = v,
            (HpName::SaturationDelta, Float(v)) => self.saturation_delta = v,
            (HpName::HueDelta, Float(v)) => self.hue_delta = v,
            (HpName::ImageSize, Int(v)) => self.image_size = v,
            (HpName::AdapterInnerDim, Int(v)) => self.adapter_inner_dim = v,
            _ => return Err(mismatch()),
        }
        Ok(())
    }
}

/// Value lists for every dimension. Only image sizes depend on the root model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperparamSpace {
    pub image_sizes: Vec<usize>,
}

impl HyperparamSpace {
    /// Image sizes are multiples of `patch_size` in `[patch_size, 2·default_extent]`.
    pub fn new(patch_size: usize, default_extent: usize) -> Self {
        let image_sizes = (1..)
            .map(|k| k * patch_size)
            .take_while(|&s| s <= (2 * default_extent).max(patch_size))
            .collect();
        Self { image_sizes }
    }

    /// Ordered candidate values for `name`.
    pub fn values(&self, name: HpName) -> Vec<HpValue> {
        let floats = |xs: &[f64]| xs.iter().map(|&x| HpValue::Float(x)).collect();
        match name {
            HpName::LearningRate => floats(&LEARNING_RATES),
            HpName::Schedule => Schedule::ALL
                .iter()
                .map(|&s| HpValue::Schedule(s))
                .collect(),
            HpName::WarmupRatio => floats(&WARMUP_RATIOS),
            HpName::Momentum => floats(&MOMENTUMS),
            HpName::Nesterov | HpName::Flip => vec![HpValue::Bool(false), HpValue::Bool(true)],
            HpName::CropAreaMin => floats(&CROP_AREA_MINS),
            HpName::AspectMin => floats(&ASPECT_MINS),
            HpName::BrightnessDelta
            | HpName::ContrastDelta
            | HpName::SaturationDelta
            | HpName::HueDelta => floats(&COLOR_DELTAS),
            HpName::ImageSize => self.image_sizes.iter().map(|&s| HpValue::Int(s)).collect(),
            HpName::AdapterInnerDim => ADAPTER_DIMS.iter().map(|&d| HpValue::Int(d)).collect(),
        }
    }

    /// Neighbour-constrained mutation of one dimension.
    ///
    /// Ordered dimensions move to a uniformly chosen adjacent list value,
    /// booleans flip, and the schedule switches to one of the other schedules.
    pub fn mutate(&self, hp: &Hyperparams, name: HpName, rng: &mut impl Rng) -> HpValue {
        let current = hp.get(name);
        match current {
            HpValue::Bool(b) => HpValue::Bool(!b),
            HpValue::Schedule(s) => {
                let others: Vec<Schedule> = Schedule::ALL.into_iter().filter(|&o| o != s).collect();
                HpValue::Schedule(*others.choose(rng).expect("three schedules"))
            }
            _ => {
                let values = self.values(name);
                let idx = nearest_index(&values, current);
                let mut neighbours = Vec::with_capacity(2);
                if idx > 0 {
                    neighbours.push(values[idx - 1]);
                }
                if idx + 1 < values.len() {
                    neighbours.push(values[idx + 1]);
                }
                neighbours.choose(rng).copied().unwrap_or(current)
            }
        }
    }
}

fn as_f64(v: HpValue) -> f64 {
    match v {
        HpValue::Float(x) => x,
        HpValue::Int(i) => i as f64,
        HpValue::Bool(b) => b as u8 as f64,
        HpValue::Schedule(s) => Schedule::ALL.iter().position(|&o| o == s).unwrap_or(0) as f64,
    }
}

fn nearest_index(values: &[HpValue], current: HpValue) -> usize {
    let c = as_f64(current);
    values
        .iter()
        .enumerate()
        .min_by(|a, b| {
            (as_f64(*a.1) - c)
                .abs()
                .total_cmp(&(as_f64(*b.1) - c).abs())
        })
        .map_or(0, |(i, _)| i)
}

/// Free-function form of [`HyperparamSpace::mutate`] addressed by name.
pub fn mutate_hyperparam(
    space: &HyperparamSpace,
    hp: &Hyperparams,
    name: &str,
    rng: &mut impl Rng,
) -> Result<HpValue> {
    let name: HpName = name.parse()?;
    Ok(space.mutate(hp, name, rng))
}
