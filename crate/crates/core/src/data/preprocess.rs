//! Image preprocessing driven by the per-model hyperparameters.
//!
//! Training mode: random crop (area in `[crop_area_min, 1]`, log-uniform
//! aspect in `[aspect_min, 1/aspect_min]`), bilinear resize to
//! `image_size`, optional horizontal flip, then colour jitter on the `[0, 1]`
//! pixel scale:
//!
//! * brightness: `p + b`, `b ~ U[-δ, δ]`
//! * contrast: `(p − mean)·c + mean`, `c ~ U[1 − δ, 1 + δ]`
//! * saturation (3 channels only): `gray + (p − gray)·s`, `s ~ U[1 − δ, 1 + δ]`
//! * hue (3 channels only): YIQ chroma rotation by `θ ~ U[-δ, δ]·2π`
//!
//! Values are clamped to `[0, 1]` and mapped to `[-1, 1]`. Eval mode is a
//! centre square crop plus resize and consumes no randomness.

use rand::Rng;

use super::Dataset;
use crate::error::{Error, Result};
use crate::mutation::Hyperparams;
use crate::tensor::Tensor;

/// Uniform draws consumed per image in training mode, whatever the hyperparameters.
pub const DRAWS_PER_IMAGE: usize = 9;

struct Crop {
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
}

/// Bilinear resample of the crop into an `size×size×channels` buffer of `[0, 1]` values.
fn resample(
    image: &[u8],
    height: usize,
    width: usize,
    channels: usize,
    crop: &Crop,
    size: usize,
    out: &mut [f32],
) {
    let coord = |o: usize, start: f64, extent: f64, limit: usize| -> (usize, usize, f64) {
        let c =
            (start + (o as f64 + 0.5) * extent / size as f64 - 0.5).clamp(0.0, (limit - 1) as f64);
        let lo = c.floor() as usize;
        (lo, (lo + 1).min(limit - 1), c - lo as f64)
    };
    for oy in 0..size {
        let (y0, y1, ty) = coord(oy, crop.y0, crop.h, height);
        for ox in 0..size {
            let (x0, x1, tx) = coord(ox, crop.x0, crop.w, width);
            for ch in 0..channels {
                let px = |y: usize, x: usize| image[(y * width + x) * channels + ch] as f64 / 255.0;
                let top = px(y0, x0) * (1.0 - tx) + px(y0, x1) * tx;
                let bottom = px(y1, x0) * (1.0 - tx) + px(y1, x1) * tx;
                out[(oy * size + ox) * channels + ch] = (top * (1.0 - ty) + bottom * ty) as f32;
            }
        }
    }
}

/// Mirrors an `[rows, cols, channels]` buffer left/right in place.
pub fn flip_horizontal(buf: &mut [f32], rows: usize, cols: usize, channels: usize) {
    for r in 0..rows {
        for c in 0..cols / 2 {
            for ch in 0..channels {
                let a = (r * cols + c) * channels + ch;
                let b = (r * cols + (cols - 1 - c)) * channels + ch;
                buf.swap(a, b);
            }
        }
    }
}

fn jitter(buf: &mut [f32], channels: usize, hp: &Hyperparams, u: &[f64; 4]) {
    let sym = |delta: f64, u: f64| delta * (2.0 * u - 1.0);
    let brightness = sym(hp.brightness_delta, u[0]);
    let contrast = 1.0 + sym(hp.contrast_delta, u[1]);
    let saturation = 1.0 + sym(hp.saturation_delta, u[2]);
    let hue = sym(hp.hue_delta, u[3]) * std::f64::consts::TAU;

    if brightness != 0.0 {
        buf.iter_mut()
            .for_each(|p| *p = (*p as f64 + brightness) as f32);
    }
    if contrast != 1.0 {
        let mean = buf.iter().map(|&p| p as f64).sum::<f64>() / buf.len() as f64;
        buf.iter_mut()
            .for_each(|p| *p = ((*p as f64 - mean) * contrast + mean) as f32);
    }
    if channels == 3 && (saturation != 1.0 || hue != 0.0) {
        let (sin, cos) = hue.sin_cos();
        for px in buf.chunks_exact_mut(3) {
            let (r, g, b) = (px[0] as f64, px[1] as f64, px[2] as f64);
            let y = 0.299 * r + 0.587 * g + 0.114 * b;
            let i = (0.596 * r - 0.274 * g - 0.322 * b) * saturation;
            let q = (0.211 * r - 0.523 * g + 0.312 * b) * saturation;
            let (i, q) = (i * cos - q * sin, i * sin + q * cos);
            px[0] = (y + 0.956 * i + 0.621 * q) as f32;
            px[1] = (y - 0.272 * i - 0.647 * q) as f32;
            px[2] = (y - 1.106 * i + 1.703 * q) as f32;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn preprocess_into(
    image: &[u8],
    height: usize,
    width: usize,
    channels: usize,
    hp: &Hyperparams,
    rng: &mut impl Rng,
    training: bool,
    out: &mut [f32],
) -> Result<()> {
    if height == 0 || width == 0 || image.len() != height * width * channels {
        return Err(Error::Shape(format!(
            "image buffer does not match {height}×{width}×{channels}"
        )));
    }
    let size = hp.image_size;
    if training {
        let mut u = [0f64; DRAWS_PER_IMAGE];
        u.iter_mut().for_each(|v| *v = rng.gen());
        let area_frac = hp.crop_area_min + (1.0 - hp.crop_area_min) * u[0];
        let log_lo = hp.aspect_min.ln();
        let aspect = (log_lo + (-2.0 * log_lo) * u[1]).exp();
        let area = area_frac * (height * width) as f64;
        let w = (area * aspect).sqrt().clamp(1.0, width as f64);
        let h = (area / aspect).sqrt().clamp(1.0, height as f64);
        let crop = Crop {
            x0: (width as f64 - w) * u[2],
            y0: (height as f64 - h) * u[3],
            w,
            h,
        };
        resample(image, height, width, channels, &crop, size, out);
        if hp.flip && u[4] < 0.5 {
            flip_horizontal(out, size, size, channels);
        }
        jitter(out, channels, hp, &[u[5], u[6], u[7], u[8]]);
    } else {
        let side = height.min(width) as f64;
        let crop = Crop {
            x0: (width as f64 - side) / 2.0,
            y0: (height as f64 - side) / 2.0,
            w: side,
            h: side,
        };
        resample(image, height, width, channels, &crop, size, out);
    }
    for p in out.iter_mut() {
        *p = 2.0 * p.clamp(0.0, 1.0) - 1.0;
    }
    Ok(())
}

/// Preprocesses one `[height, width, channels]` image into a `[size, size, channels]` tensor.
pub fn preprocess(
    image: &[u8],
    height: usize,
    width: usize,
    channels: usize,
    hp: &Hyperparams,
    rng: &mut impl Rng,
    training: bool,
) -> Result<Tensor> {
    let size = hp.image_size;
    let mut out = vec![0.0; size * size * channels];
    preprocess_into(image, height, width, channels, hp, rng, training, &mut out)?;
    Tensor::new(vec![size, size, channels], out)
}

/// Preprocesses `indices` of `ds` into a `[batch, size, size, channels]` tensor.
pub fn preprocess_batch(
    ds: &Dataset,
    indices: &[usize],
    hp: &Hyperparams,
    rng: &mut impl Rng,
    training: bool,
) -> Result<Tensor> {
    let size = hp.image_size;
    let per = size * size * ds.channels;
    let mut out = vec![0.0; indices.len() * per];
    for (chunk, &i) in out.chunks_exact_mut(per).zip(indices) {
        preprocess_into(
            ds.image(i),
            ds.height,
            ds.width,
            ds.channels,
            hp,
            rng,
            training,
            chunk,
        )?;
    }
    Tensor::new(vec![indices.len(), size, size, ds.channels], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mutation::{HpName, HyperparamSpace};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gradient_image(h: usize, w: usize, c: usize) -> Vec<u8> {
        (0..h * w * c).map(|i| ((i * 37) % 256) as u8).collect()
    }

    #[test]
    fn degenerate_hyperparams_reduce_to_resize() {
        let img = gradient_image(16, 16, 1);
        let mut hp = Hyperparams::defaults(8);
        hp.crop_area_min = 1.0;
        hp.aspect_min = 1.0;
        hp.flip = false;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let eval = preprocess(&img, 16, 16, 1, &hp, &mut rng, false).unwrap();
        for _ in 0..5 {
            let train = preprocess(&img, 16, 16, 1, &hp, &mut rng, true).unwrap();
            assert_eq!(train, eval);
        }
    }

    #[test]
    fn identity_resize_preserves_pixels() {
        let img = gradient_image(4, 4, 3);
        let hp = Hyperparams::defaults(4);
        let out = preprocess(&img, 4, 4, 3, &hp, &mut ChaCha8Rng::seed_from_u64(0), false).unwrap();
        for (o, &p) in out.data().iter().zip(&img) {
            assert!((o - (2.0 * p as f32 / 255.0 - 1.0)).abs() < 1e-6);
        }
    }

    #[test]
    fn flip_is_an_involution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let orig: Vec<f32> = (0..5 * 7 * 3).map(|_| rng.gen()).collect();
        let mut buf = orig.clone();
        flip_horizontal(&mut buf, 5, 7, 3);
        assert_ne!(buf, orig);
        flip_horizontal(&mut buf, 5, 7, 3);
        assert_eq!(buf, orig);
    }

    #[test]
    fn eval_mode_consumes_no_randomness() {
        let img = gradient_image(16, 16, 1);
        let hp = Hyperparams::defaults(16);
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let b = a.clone();
        preprocess(&img, 16, 16, 1, &hp, &mut a, false).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn training_mode_consumes_fixed_draws() {
        let img = gradient_image(12, 12, 3);
        let space = HyperparamSpace::new(4, 12);
        let mut hp_rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let mut hp = Hyperparams::defaults(12);
            for name in HpName::ALL {
                if name != HpName::AdapterInnerDim {
                    let v = space.mutate(&hp, name, &mut hp_rng);
                    hp.set(name, v).unwrap();
                }
            }
            let mut a = ChaCha8Rng::seed_from_u64(3);
            preprocess(&img, 12, 12, 3, &hp, &mut a, true).unwrap();
            let mut b = ChaCha8Rng::seed_from_u64(3);
            for _ in 0..DRAWS_PER_IMAGE {
                let _: f64 = b.gen();
            }
            assert_eq!(a, b);
        }
    }

    #[test]
    fn output_range_within_unit_interval_over_many_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let space = HyperparamSpace::new(4, 8);
        let mut hp = Hyperparams::defaults(8);
        for i in 0..10_000 {
            if i % 10 == 0 {
                let name = HpName::ALL[rng.gen_range(0..HpName::ALL.len())];
                let v = space.mutate(&hp, name, &mut rng);
                hp.set(name, v).unwrap();
                hp.brightness_delta = 0.2;
                hp.contrast_delta = 0.2;
                hp.saturation_delta = 0.2;
                hp.hue_delta = 0.2;
            }
            let c = if i % 2 == 0 { 1 } else { 3 };
            let img: Vec<u8> = (0..8 * 8 * c).map(|_| rng.gen()).collect();
            let out = preprocess(&img, 8, 8, c, &hp, &mut rng, true).unwrap();
            assert!(out.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn rejects_mismatched_buffer() {
        let hp = Hyperparams::defaults(8);
        assert!(preprocess(
            &[0; 10],
            4,
            4,
            1,
            &hp,
            &mut ChaCha8Rng::seed_from_u64(0),
            false
        )
        .is_err());
    }
}
