//! Deterministic synthetic glyph-classification tasks.
//!
//! A shared alphabet of random stroke glyphs is generated from the seed.
//! Task `t` draws its classes from a window of the alphabet that overlaps the
//! windows of neighbouring tasks, so features learnt on one task can help
//! another. Odd-numbered tasks render with inverted polarity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, TaskDef};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_tasks: usize,
    pub classes_per_task: usize,
    pub samples_per_task: usize,
    pub extent: usize,
    pub seed: u64,
    #[serde(default = "default_noise")]
    pub noise: f64,
}

fn default_noise() -> f64 {
    0.1
}

impl SynthConfig {
    /// Distance between the alphabet windows of consecutive tasks.
    fn stride(&self) -> usize {
        self.classes_per_task.div_ceil(2)
    }

    fn alphabet_size(&self) -> usize {
        self.stride() * self.n_tasks.saturating_sub(1) + self.classes_per_task
    }
}

const STROKES: usize = 3;

fn render_template(extent: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let e = extent as f64;
    let margin = e / 5.0;
    let thick = (e / 10.0).max(0.8);
    let pt = |rng: &mut ChaCha8Rng| {
        (
            rng.gen_range(margin..e - 1.0 - margin),
            rng.gen_range(margin..e - 1.0 - margin),
        )
    };
    let segs: Vec<((f64, f64), (f64, f64))> = (0..STROKES).map(|_| (pt(rng), pt(rng))).collect();
    let mut out = vec![0.0; extent * extent];
    for y in 0..extent {
        for x in 0..extent {
            let p = (x as f64, y as f64);
            let d = segs
                .iter()
                .map(|&(a, b)| segment_distance(p, a, b))
                .fold(f64::INFINITY, f64::min);
            out[y * extent + x] = (1.0 - (d - thick * 0.5).max(0.0)).clamp(0.0, 1.0);
        }
    }
    out
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

fn sample_bilinear(t: &[f64], extent: usize, x: f64, y: f64) -> f64 {
    if x < 0.0 || y < 0.0 || x > (extent - 1) as f64 || y > (extent - 1) as f64 {
        return 0.0;
    }
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(extent - 1), (y0 + 1).min(extent - 1));
    let (tx, ty) = (x - x0 as f64, y - y0 as f64);
    let at = |yy: usize, xx: usize| t[yy * extent + xx];
    (at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx) * (1.0 - ty)
        + (at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx) * ty
}

/// Renders one randomly shifted, rotated, scaled and noised instance of `template`.
fn render_sample(
    template: &[f64],
    extent: usize,
    invert: bool,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<u8> {
    let e = extent as f64;
    let angle = rng.gen_range(-15f64..15.0).to_radians();
    let scale = rng.gen_range(0.9..1.1);
    let shift = (
        rng.gen_range(-e / 10.0..e / 10.0),
        rng.gen_range(-e / 10.0..e / 10.0),
    );
    let normal = Normal::new(0.0, noise.max(1e-12)).expect("valid noise");
    let (sin, cos) = angle.sin_cos();
    let c = (e - 1.0) / 2.0;
    let mut out = Vec::with_capacity(extent * extent);
    for y in 0..extent {
        for x in 0..extent {
            let (px, py) = (x as f64 - c - shift.0, y as f64 - c - shift.1);
            let sx = (cos * px + sin * py) / scale + c;
            let sy = (-sin * px + cos * py) / scale + c;
            let mut v = sample_bilinear(template, extent, sx, sy);
            if invert {
                v = 1.0 - v;
            }
            v += normal.sample(rng);
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

/// Alphabet of glyph templates shared by all tasks (values in `[0, 1]`).
pub fn glyph_alphabet(cfg: &SynthConfig) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.alphabet_size())
        .map(|_| render_template(cfg.extent, &mut rng))
        .collect()
}

/// Generates `n_tasks` labelled datasets. Task `t` has labels `0..classes_per_task`.
pub fn synth_tasks(cfg: &SynthConfig) -> Result<Vec<(TaskDef, Dataset)>> {
    if cfg.n_tasks == 0 || cfg.classes_per_task < 2 || cfg.samples_per_task == 0 || cfg.extent < 4 {
        return Err(Error::Invalid(format!(
            "degenerate synthetic config {cfg:?}"
        )));
    }
    let alphabet = glyph_alphabet(cfg);
    let mut tasks = Vec::with_capacity(cfg.n_tasks);
    for t in 0..cfg.n_tasks {
        let mut rng = ChaCha8Rng::seed_from_u64(
            cfg.seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(t as u64 + 1)),
        );
        let window = t * cfg.stride();
        let mut pixels = Vec::with_capacity(cfg.samples_per_task * cfg.extent * cfg.extent);
        let mut labels = Vec::with_capacity(cfg.samples_per_task);
        for i in 0..cfg.samples_per_task {
            let label = i % cfg.classes_per_task;
            let glyph = &alphabet[window + label];
            pixels.extend(render_sample(
                glyph,
                cfg.extent,
                t % 2 == 1,
                cfg.noise,
                &mut rng,
            ));
            labels.push(label);
        }
        let ds = Dataset::new(cfg.extent, cfg.extent, 1, pixels, labels)?;
        let def = TaskDef {
            name: format!("glyphs{t}"),
            num_classes: cfg.classes_per_task,
            image_extent: cfg.extent,
            channels: 1,
            train_size: 0,
            valid_size: 0,
            test_size: 0,
        };
        tasks.push((def, ds));
    }
    Ok(tasks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SynthConfig {
        SynthConfig {
            n_tasks: 3,
            classes_per_task: 5,
            samples_per_task: 300,
            extent: 16,
            seed: 42,
            noise: 0.1,
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = synth_tasks(&cfg()).unwrap();
        let b = synth_tasks(&cfg()).unwrap();
        assert_eq!(a.len(), b.len());
        for ((da, xa), (db, xb)) in a.iter().zip(&b) {
            assert_eq!(da, db);
            assert_eq!(xa, xb);
        }
        let other = synth_tasks(&SynthConfig { seed: 43, ..cfg() }).unwrap();
        assert_ne!(a[0].1.pixels, other[0].1.pixels);
    }

    #[test]
    fn label_spaces_have_configured_class_counts() {
        let tasks = synth_tasks(&cfg()).unwrap();
        assert_eq!(tasks.len(), 3);
        for (def, ds) in &tasks {
            assert_eq!(def.num_classes, 5);
            assert_eq!(ds.num_classes(), 5);
            assert_eq!(ds.len(), 300);
        }
        let names: std::collections::BTreeSet<_> = tasks.iter().map(|t| t.0.name.clone()).collect();
        assert_eq!(names.len(), 3);
    }

    #[test]
    fn nearest_template_beats_chance() {
        let c = cfg();
        let alphabet = glyph_alphabet(&c);
        let tasks = synth_tasks(&c).unwrap();
        for (t, (_, ds)) in tasks.iter().enumerate() {
            let window = t * c.stride();
            let mut correct = 0;
            for i in 0..ds.len() {
                let img: Vec<f64> = ds
                    .image(i)
                    .iter()
                    .map(|&p| {
                        let v = p as f64 / 255.0;
                        if t % 2 == 1 {
                            1.0 - v
                        } else {
                            v
                        }
                    })
                    .collect();
                let best = (0..c.classes_per_task)
                    .min_by(|&a, &b| {
                        let d = |k: usize| -> f64 {
                            alphabet[window + k]
                                .iter()
                                .zip(&img)
                                .map(|(x, y)| (x - y).powi(2))
                                .sum()
                        };
                        d(a).total_cmp(&d(b))
                    })
                    .unwrap();
                correct += (best == ds.labels[i]) as usize;
            }
            let acc = correct as f64 / ds.len() as f64;
            assert!(
                acc > 1.0 / c.classes_per_task as f64 + 0.15,
                "task {t}: {acc}"
            );
        }
    }

    #[test]
    fn rejects_degenerate_configs() {
        assert!(synth_tasks(&SynthConfig {
            classes_per_task: 1,
            ..cfg()
        })
        .is_err());
    }
}
