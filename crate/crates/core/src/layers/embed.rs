use super::{LayerCache, LayerConfig, LayerParams};
use crate::error::{Error, Result};
use crate::tensor::{add_row_bias, col_sum_acc, gemm, gemm_a_bt, gemm_at_b_acc, Tensor};

fn expect_seq(x: &Tensor, hidden: usize, what: &str) -> Result<(usize, usize)> {
    match x.dims() {
        &[b, s, h] if h == hidden => Ok((b, s)),
        d => Err(Error::Shape(format!(
            "{what}: expected [batch, seq, {hidden}], got {d:?}"
        ))),
    }
}

pub(super) fn patch_embed(
    cfg: &LayerConfig,
    p: &LayerParams,
    x: &Tensor,
    keep_cache: bool,
) -> Result<(Tensor, Option<LayerCache>)> {
    let ps = cfg.patch_size;
    let &[b, hgt, wid, ch] = x.dims() else {
        return Err(Error::Shape(format!(
            "patch_embed: expected [B, H, W, C], got {:?}",
            x.dims()
        )));
    };
    if hgt % ps != 0 || wid % ps != 0 {
        return Err(Error::Shape(format!(
            "patch_embed: image {hgt}×{wid} is not a multiple of patch size {ps}"
        )));
    }
    if ch != cfg.channels {
        return Err(Error::Shape(format!(
            "patch_embed: {ch} channels, expected {}",
            cfg.channels
        )));
    }
    let (gy, gx) = (hgt / ps, wid / ps);
    let tokens = gy * gx;
    let fan_in = ps * ps * ch;
    let rows = b * tokens;
    let mut patches = vec![0.0f32; rows * fan_in];
    let px = x.data();
    for n in 0..b {
        for ty in 0..gy {
            for tx in 0..gx {
                let row = (n * tokens + ty * gx + tx) * fan_in;
                for py in 0..ps {
                    let src = ((n * hgt + ty * ps + py) * wid + tx * ps) * ch;
                    let dst = row + py * ps * ch;
                    patches[dst..dst + ps * ch].copy_from_slice(&px[src..src + ps * ch]);
                }
            }
        }
    }
    let h = cfg.hidden_dim;
    let mut out = vec![0.0; rows * h];
    gemm(&patches, p.tensors[0].data(), rows, fan_in, h, &mut out);
    add_row_bias(&mut out, p.tensors[1].data());
    let cache = keep_cache.then_some(LayerCache::PatchEmbed { patches, rows });
    Ok((Tensor::new(vec![b, tokens, h], out)?, cache))
}

pub(super) fn patch_embed_backward(
    cfg: &LayerConfig,
    patches: &[f32],
    rows: usize,
    dy: &Tensor,
    grads: Option<&mut LayerParams>,
) {
    if let Some(g) = grads {
        let fan_in = patches.len() / rows;
        let h = cfg.hidden_dim;
        gemm_at_b_acc(patches, dy.data(), rows, fan_in, h, g.tensors[0].data_mut());
        col_sum_acc(dy.data(), h, g.tensors[1].data_mut());
    }
}

pub(super) fn class_token(
    cfg: &LayerConfig,
    p: &LayerParams,
    x: &Tensor,
    keep_cache: bool,
) -> Result<(Tensor, Option<LayerCache>)> {
    let h = cfg.hidden_dim;
    let (b, s) = expect_seq(x, h, "class_token")?;
    let token = p.tensors[0].data();
    let mut out = Vec::with_capacity(b * (s + 1) * h);
    for n in 0..b {
        out.extend_from_slice(token);
        out.extend_from_slice(&x.data()[n * s * h..(n + 1) * s * h]);
    }
    Ok((
        Tensor::new(vec![b, s + 1, h], out)?,
        keep_cache.then_some(LayerCache::ClassToken),
    ))
}

pub(super) fn class_token_backward(
    x_dims: &[usize],
    dy: &Tensor,
    grads: Option<&mut LayerParams>,
    need_dx: bool,
) -> Option<Tensor> {
    let (b, s, h) = (x_dims[0], x_dims[1], x_dims[2]);
    let d = dy.data();
    if let Some(g) = grads {
        let gt = g.tensors[0].data_mut();
        for n in 0..b {
            let row = &d[n * (s + 1) * h..n * (s + 1) * h + h];
            for (a, v) in gt.iter_mut().zip(row) {
                *a += v;
            }
        }
    }
    need_dx.then(|| {
        let mut dx = Vec::with_capacity(b * s * h);
        for n in 0..b {
            let start = (n * (s + 1) + 1) * h;
            dx.extend_from_slice(&d[start..start + s * h]);
        }
        Tensor::new(x_dims.to_vec(), dx).expect("dims")
    })
}

/// Sparse bilinear weights from a `src×src` grid to a `dst×dst` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ResampleMap {
    pub src: usize,
    pub dst: usize,
    /// Per destination cell: `(source cell, weight)` pairs.
    pub taps: Vec<Vec<(usize, f64)>>,
}

impl ResampleMap {
    /// Half-pixel-centre bilinear interpolation with edge clamping.
    pub fn new(src: usize, dst: usize) -> Self {
        let axis = |o: usize| -> [(usize, f64); 2] {
            let c = ((o as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = c.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            let t = c - lo as f64;
            [(lo, 1.0 - t), (hi, t)]
        };
        let mut taps = Vec::with_capacity(dst * dst);
        for oy in 0..dst {
            for ox in 0..dst {
                let mut cell: Vec<(usize, f64)> = Vec::with_capacity(4);
                for (iy, wy) in axis(oy) {
                    for (ix, wx) in axis(ox) {
                        let w = wy * wx;
                        if w == 0.0 {
                            continue;
                        }
                        let idx = iy * src + ix;
                        match cell.iter_mut().find(|(i, _)| *i == idx) {
                            Some(e) => e.1 += w,
                            None => cell.push((idx, w)),
                        }
                    }
                }
                taps.push(cell);
            }
        }
        Self { src, dst, taps }
    }

    pub fn apply(&self, grid: &[f32], hidden: usize) -> Vec<f32> {
        let mut out = vec![0.0; self.dst * self.dst * hidden];
        let mut acc = vec![0f64; hidden];
        for (o, cell) in self.taps.iter().enumerate() {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for &(i, w) in cell {
                for (a, v) in acc.iter_mut().zip(&grid[i * hidden..(i + 1) * hidden]) {
                    *a += w * *v as f64;
                }
            }
            for (d, a) in out[o * hidden..(o + 1) * hidden].iter_mut().zip(&acc) {
                *d = *a as f32;
            }
        }
        out
    }
}

/// Resamples a `[g·g, hidden]` grid of embeddings to `[target·target, hidden]`.
pub fn bilinear_resample_grid(grid: &[f32], src: usize, target: usize, hidden: usize) -> Vec<f32> {
    if src == target {
        return grid.to_vec();
    }
    ResampleMap::new(src, target).apply(grid, hidden)
}

fn grid_side(tokens: usize) -> Option<usize> {
    let g = (tokens as f64).sqrt().round() as usize;
    (g * g == tokens && g > 0).then_some(g)
}

pub(super) fn pos_embed(
    cfg: &LayerConfig,
    p: &LayerParams,
    x: &Tensor,
    keep_cache: bool,
) -> Result<(Tensor, Option<LayerCache>)> {
    let h = cfg.hidden_dim;
    let (_, s) = expect_seq(x, h, "pos_embed")?;
    let target = grid_side(s - 1).ok_or_else(|| {
        Error::Shape(format!(
            "pos_embed: {} patch tokens do not form a square grid",
            s - 1
        ))
    })?;
    let emb = p.tensors[0].data();
    let map = (target != cfg.grid_extent).then(|| ResampleMap::new(cfg.grid_extent, target));
    let mut table = Vec::with_capacity(s * h);
    table.extend_from_slice(&emb[..h]);
    match &map {
        Some(m) => table.extend(m.apply(&emb[h..], h)),
        None => table.extend_from_slice(&emb[h..]),
    }
    let mut out = x.data().to_vec();
    for chunk in out.chunks_exact_mut(s * h) {
        for (v, e) in chunk.iter_mut().zip(&table) {
            *v += e;
        }
    }
    Ok((
        Tensor::new(x.dims().to_vec(), out)?,
        keep_cache.then_some(LayerCache::PosEmbed { map }),
    ))
}

pub(super) fn pos_embed_backward(
    map: Option<&ResampleMap>,
    dy: &Tensor,
    grads: Option<&mut LayerParams>,
    need_dx: bool,
) -> Option<Tensor> {
    if let Some(g) = grads {
        let (s, h) = (dy.dims()[1], dy.dims()[2]);
        let mut table = vec![0f64; s * h];
        for chunk in dy.data().chunks_exact(s * h) {
            for (t, v) in table.iter_mut().zip(chunk) {
                *t += *v as f64;
            }
        }
        let ge = g.tensors[0].data_mut();
        for j in 0..h {
            ge[j] += table[j] as f32;
        }
        match map {
            None => {
                for (e, t) in ge[h..].iter_mut().zip(&table[h..]) {
                    *e += *t as f32;
                }
            }
            Some(m) => {
                let mut acc = vec![0f64; m.src * m.src * h];
                for (o, cell) in m.taps.iter().enumerate() {
                    for &(i, w) in cell {
                        for j in 0..h {
                            acc[i * h + j] += w * table[(1 + o) * h + j];
                        }
                    }
                }
                for (e, a) in ge[h..].iter_mut().zip(acc) {
                    *e += a as f32;
                }
            }
        }
    }
    need_dx.then(|| dy.clone())
}

pub(super) fn head(
    cfg: &LayerConfig,
    p: &LayerParams,
    x: &Tensor,
    keep_cache: bool,
) -> Result<(Tensor, Option<LayerCache>)> {
    let h = cfg.hidden_dim;
    let (b, s) = expect_seq(x, h, "head")?;
    let mut class_repr = Vec::with_capacity(b * h);
    for n in 0..b {
        class_repr.extend_from_slice(&x.data()[n * s * h..n * s * h + h]);
    }
    let c = cfg.num_classes;
    let mut out = vec![0.0; b * c];
    gemm(&class_repr, p.tensors[0].data(), b, h, c, &mut out);
    add_row_bias(&mut out, p.tensors[1].data());
    let cache = keep_cache.then_some(LayerCache::Head { class_repr, seq: s });
    Ok((Tensor::new(vec![b, c], out)?, cache))
}

pub(super) fn head_backward(
    cfg: &LayerConfig,
    p: &LayerParams,
    class_repr: &[f32],
    seq: usize,
    dy: &Tensor,
    grads: Option<&mut LayerParams>,
    need_dx: bool,
) -> Option<Tensor> {
    let (h, c) = (cfg.hidden_dim, cfg.num_classes);
    let b = dy.dims()[0];
    if let Some(g) = grads {
        gemm_at_b_acc(class_repr, dy.data(), b, h, c, g.tensors[0].data_mut());
        col_sum_acc(dy.data(), c, g.tensors[1].data_mut());
    }
    need_dx.then(|| {
        let mut dcls = vec![0.0; b * h];
        gemm_a_bt(dy.data(), p.tensors[0].data(), b, c, h, &mut dcls);
        let mut dx = vec![0.0; b * seq * h];
        for n in 0..b {
            dx[n * seq * h..n * seq * h + h].copy_from_slice(&dcls[n * h..(n + 1) * h]);
        }
        Tensor::new(vec![b, seq, h], dx).expect("dims")
    })
}
