use super::{LayerCache, LayerConfig, LayerParams};
use crate::error::{Error, Result};
use crate::tensor::{
    add_row_bias, col_sum_acc, dot, gelu_backward_inplace, gelu_slice, gemm, gemm_a_bt,
    gemm_at_b_acc, layer_norm_backward, layer_norm_rows, softmax_row, LnCache, Tensor, LN_EPS,
};

/// Tensor indices inside a transformer block's parameter list.
mod ix {
    pub const LN1_SCALE: usize = 0;
    pub const LN1_BIAS: usize = 1;
    pub const QKV_W: usize = 2;
    pub const QKV_B: usize = 3;
    pub const OUT_W: usize = 4;
    pub const OUT_B: usize = 5;
    pub const LN2_SCALE: usize = 6;
    pub const LN2_BIAS: usize = 7;
    pub const MLP1_W: usize = 8;
    pub const MLP1_B: usize = 9;
    pub const MLP2_W: usize = 10;
    pub const MLP2_B: usize = 11;
}

/// Tensor indices inside a residual adapter.
mod ax {
    pub const LN_SCALE: usize = 0;
    pub const LN_BIAS: usize = 1;
    pub const FC1_W: usize = 2;
    pub const FC1_B: usize = 3;
    pub const FC2_W: usize = 4;
    pub const FC2_B: usize = 5;
}

#[derive(Clone, Debug)]
pub struct BlockCache {
    batch: usize,
    seq: usize,
    ln1: LnCache,
    y1: Vec<f32>,
    qkv: Vec<f32>,
    /// Attention probabilities `[batch, heads, seq, seq]`.
    probs: Vec<f32>,
    attn: Vec<f32>,
    ln2: LnCache,
    y2: Vec<f32>,
    pre_act: Vec<f32>,
    act: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct AdapterCache {
    ln: LnCache,
    y: Vec<f32>,
    pre_act: Vec<f32>,
    act: Vec<f32>,
}

fn expect_seq(x: &Tensor, hidden: usize, what: &str) -> Result<(usize, usize)> {
    match x.dims() {
        &[b, s, h] if h == hidden => Ok((b, s)),
        d => Err(Error::Shape(format!(
            "{what}: expected [batch, seq, {hidden}], got {d:?}"
        ))),
    }
}

/// `out = xs · w + b` over `rows` rows.
fn affine(xs: &[f32], w: &Tensor, b: &Tensor, rows: usize) -> Vec<f32> {
    let (k, n) = (w.dims()[0], w.dims()[1]);
    let mut out = vec![0.0; rows * n];
    gemm(xs, w.data(), rows, k, n, &mut out);
    add_row_bias(&mut out, b.data());
    out
}

/// Accumulates grads of `y = x·w + b` and returns `dx` if requested.
fn affine_backward(
    x: &[f32],
    w: &Tensor,
    dy: &[f32],
    rows: usize,
    grads: Option<(&mut Tensor, &mut Tensor)>,
    need_dx: bool,
) -> Option<Vec<f32>> {
    let (k, n) = (w.dims()[0], w.dims()[1]);
    if let Some((gw, gb)) = grads {
        gemm_at_b_acc(x, dy, rows, k, n, gw.data_mut());
        col_sum_acc(dy, n, gb.data_mut());
    }
    need_dx.then(|| {
        let mut dx = vec![0.0; rows * k];
        gemm_a_bt(dy, w.data(), rows, n, k, &mut dx);
        dx
    })
}

fn pair(g: &mut LayerParams, wi: usize, bi: usize) -> (&mut Tensor, &mut Tensor) {
    let (lo, hi) = g.tensors.split_at_mut(bi);
    (&mut lo[wi], &mut hi[0])
}

pub(super) fn transformer_block(
    cfg: &LayerConfig,
    p: &LayerParams,
    x: &Tensor,
    keep_cache: bool,
) -> Result<(Tensor, Option<LayerCache>)> {
    let h = cfg.hidden_dim;
    let (b, s) = expect_seq(x, h, "transformer_block")?;
    let t = &p.tensors;
    let rows = b * s;
    let heads = cfg.num_heads;
    let d = h / heads;
    let scale = 1.0 / (d as f64).sqrt();

    let mut y1 = vec![0.0; rows * h];
    let ln1 = layer_norm_rows(
        x.data(),
        t[ix::LN1_SCALE].data(),
        t[ix::LN1_BIAS].data(),
        LN_EPS,
        &mut y1,
    );
    let qkv = affine(&y1, &t[ix::QKV_W], &t[ix::QKV_B], rows);

    let mut probs = vec![0.0; b * heads * s * s];
    let mut attn = vec![0.0; rows * h];
    for n in 0..b {
        for hd in 0..heads {
            let q_at = |i: usize| &qkv[(n * s + i) * 3 * h + hd * d..][..d];
            let k_at = |j: usize| &qkv[(n * s + j) * 3 * h + h + hd * d..][..d];
            let base = ((n * heads) + hd) * s * s;
            for i in 0..s {
                let row = &mut probs[base + i * s..base + (i + 1) * s];
                for (j, r) in row.iter_mut().enumerate() {
                    *r = (dot(q_at(i), k_at(j)) * scale) as f32;
                }
                softmax_row(row);
            }
            let mut acc = vec![0f64; d];
            for i in 0..s {
                acc.iter_mut().for_each(|a| *a = 0.0);
                for j in 0..s {
                    let pij = probs[base + i * s + j] as f64;
                    let v = &qkv[(n * s + j) * 3 * h + 2 * h + hd * d..][..d];
                    for (a, vv) in acc.iter_mut().zip(v) {
                        *a += pij * *vv as f64;
                    }
                }
                for (o, a) in attn[(n * s + i) * h + hd * d..][..d].iter_mut().zip(&acc) {
                    *o = *a as f32;
                }
            }
        }
    }
    let proj = affine(&attn, &t[ix::OUT_W], &t[ix::OUT_B], rows);
    let mut x2 = x.data().to_vec();
    for (a, v) in x2.iter_mut().zip(&proj) {
        *a += v;
    }

    let mut y2 = vec![0.0; rows * h];
    let ln2 = layer_norm_rows(
        &x2,
        t[ix::LN2_SCALE].data(),
        t[ix::LN2_BIAS].data(),
        LN_EPS,
        &mut y2,
    );
    let pre_act = affine(&y2, &t[ix::MLP1_W], &t[ix::MLP1_B], rows);
    let mut act = vec![0.0; pre_act.len()];
    gelu_slice(&pre_act, &mut act);
    let mlp = affine(&act, &t[ix::MLP2_W], &t[ix::MLP2_B], rows);
    let mut out = x2;
    for (a, v) in out.iter_mut().zip(&mlp) {
        *a += v;
    }

    let cache = keep_cache.then(|| {
        LayerCache::TransformerBlock(Box::new(BlockCache {
            batch: b,
            seq: s,
            ln1,
            y1,
            qkv,
            probs,
            attn,
            ln2,
            y2,
            pre_act,
            act,
        }))
    });
    Ok((Tensor::new(vec![b, s, h], out)?, cache))
}

pub(super) fn transformer_block_backward(
    cfg: &LayerConfig,
    p: &LayerParams,
    c: &BlockCache,
    dy: &Tensor,
    mut grads: Option<&mut LayerParams>,
    need_dx: bool,
) -> Option<Tensor> {
    let h = cfg.hidden_dim;
    let (b, s) = (c.batch, c.seq);
    let rows = b * s;
    let heads = cfg.num_heads;
    let d = h / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let t = &p.tensors;
    let train = grads.is_some();

    // MLP branch.
    let dout = dy.data();
    let mut d_act = affine_backward(
        &c.act,
        &t[ix::MLP2_W],
        dout,
        rows,
        grads
            .as_deref_mut()
            .map(|g| pair(g, ix::MLP2_W, ix::MLP2_B)),
        true,
    )
    .expect("dx requested");
    gelu_backward_inplace(&c.pre_act, &mut d_act);
    let dy2 = affine_backward(
        &c.y2,
        &t[ix::MLP1_W],
        &d_act,
        rows,
        grads
            .as_deref_mut()
            .map(|g| pair(g, ix::MLP1_W, ix::MLP1_B)),
        true,
    )
    .expect("dx requested");
    let (dg2, db2) = match grads.as_deref_mut() {
        Some(g) => {
            let (lo, hi) = g.tensors.split_at_mut(ix::LN2_BIAS);
            (Some(lo[ix::LN2_SCALE].data_mut()), Some(hi[0].data_mut()))
        }
        None => (None, None),
    };
    let dx2_ln = layer_norm_backward(&c.ln2, t[ix::LN2_SCALE].data(), &dy2, dg2, db2);
    let mut dx2 = dout.to_vec();
    for (a, v) in dx2.iter_mut().zip(&dx2_ln) {
        *a += v;
    }

    // Attention branch.
    let d_attn = affine_backward(
        &c.attn,
        &t[ix::OUT_W],
        &dx2,
        rows,
        grads.as_deref_mut().map(|g| pair(g, ix::OUT_W, ix::OUT_B)),
        true,
    )
    .expect("dx requested");
    let mut dqkv = vec![0f64; rows * 3 * h];
    let qkv = &c.qkv;
    let mut dp = vec![0f64; s];
    for n in 0..b {
        for hd in 0..heads {
            let base = ((n * heads) + hd) * s * s;
            let off_q = |i: usize| (n * s + i) * 3 * h + hd * d;
            for i in 0..s {
                let do_i = &d_attn[(n * s + i) * h + hd * d..][..d];
                let p_row = &c.probs[base + i * s..base + (i + 1) * s];
                let mut weighted = 0f64;
                for j in 0..s {
                    let v_j = &qkv[off_q(j) + 2 * h..][..d];
                    dp[j] = dot(do_i, v_j);
                    weighted += p_row[j] as f64 * dp[j];
                    // dV_j += P_ij · dO_i
                    let pij = p_row[j] as f64;
                    for (acc, g) in dqkv[off_q(j) + 2 * h..][..d].iter_mut().zip(do_i) {
                        *acc += pij * *g as f64;
                    }
                }
                for j in 0..s {
                    let ds = p_row[j] as f64 * (dp[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let (qi, kj) = (off_q(i), off_q(j) + h);
                    for e in 0..d {
                        dqkv[qi + e] += ds * qkv[kj + e] as f64;
                        dqkv[kj + e] += ds * qkv[qi + e] as f64;
                    }
                }
            }
        }
    }
    let dqkv: Vec<f32> = dqkv.into_iter().map(|v| v as f32).collect();
    let need_ln1 = need_dx || train;
    let dy1 = affine_backward(
        &c.y1,
        &t[ix::QKV_W],
        &dqkv,
        rows,
        grads.as_deref_mut().map(|g| pair(g, ix::QKV_W, ix::QKV_B)),
        need_ln1,
    );
    let dy1 = dy1?;
    let (dg1, db1) = match grads {
        Some(g) => {
            let (lo, hi) = g.tensors.split_at_mut(ix::LN1_BIAS);
            (Some(lo[ix::LN1_SCALE].data_mut()), Some(hi[0].data_mut()))
        }
        None => (None, None),
    };
    let dx_ln = layer_norm_backward(&c.ln1, t[ix::LN1_SCALE].data(), &dy1, dg1, db1);
    need_dx.then(|| {
        for (a, v) in dx2.iter_mut().zip(&dx_ln) {
            *a += v;
        }
        Tensor::new(vec![b, s, h], dx2).expect("dims")
    })
}

pub(super) fn residual_adapter(
    cfg: &LayerConfig,
    p: &LayerParams,
    x: &Tensor,
    keep_cache: bool,
) -> Result<(Tensor, Option<LayerCache>)> {
    let h = cfg.hidden_dim;
    let (b, s) = expect_seq(x, h, "residual_adapter")?;
    let rows = b * s;
    let t = &p.tensors;
    let mut y = vec![0.0; rows * h];
    let ln = layer_norm_rows(
        x.data(),
        t[ax::LN_SCALE].data(),
        t[ax::LN_BIAS].data(),
        LN_EPS,
        &mut y,
    );
    let pre_act = affine(&y, &t[ax::FC1_W], &t[ax::FC1_B], rows);
    let mut act = vec![0.0; pre_act.len()];
    gelu_slice(&pre_act, &mut act);
    let branch = affine(&act, &t[ax::FC2_W], &t[ax::FC2_B], rows);
    let mut out = x.data().to_vec();
    for (a, v) in out.iter_mut().zip(&branch) {
        *a += v;
    }
    let cache = keep_cache.then(|| {
        LayerCache::ResidualAdapter(Box::new(AdapterCache {
            ln,
            y,
            pre_act,
            act,
        }))
    });
    Ok((Tensor::new(vec![b, s, h], out)?, cache))
}

pub(super) fn residual_adapter_backward(
    cfg: &LayerConfig,
    p: &LayerParams,
    c: &AdapterCache,
    dy: &Tensor,
    mut grads: Option<&mut LayerParams>,
    need_dx: bool,
) -> Option<Tensor> {
    let h = cfg.hidden_dim;
    let rows = dy.len() / h;
    let t = &p.tensors;
    let mut d_act = affine_backward(
        &c.act,
        &t[ax::FC2_W],
        dy.data(),
        rows,
        grads.as_deref_mut().map(|g| pair(g, ax::FC2_W, ax::FC2_B)),
        true,
    )
    .expect("dx requested");
    gelu_backward_inplace(&c.pre_act, &mut d_act);
    let dyn_ = affine_backward(
        &c.y,
        &t[ax::FC1_W],
        &d_act,
        rows,
        grads.as_deref_mut().map(|g| pair(g, ax::FC1_W, ax::FC1_B)),
        true,
    )
    .expect("dx requested");
    let (dg, db) = match grads {
        Some(g) => {
            let (lo, hi) = g.tensors.split_at_mut(ax::LN_BIAS);
            (Some(lo[ax::LN_SCALE].data_mut()), Some(hi[0].data_mut()))
        }
        None => (None, None),
    };
    let dx_ln = layer_norm_backward(&c.ln, t[ax::LN_SCALE].data(), &dyn_, dg, db);
    need_dx.then(|| {
        let mut dx = dy.data().to_vec();
        for (a, v) in dx.iter_mut().zip(&dx_ln) {
            *a += v;
        }
        Tensor::new(dy.dims().to_vec(), dx).expect("dims")
    })
}
