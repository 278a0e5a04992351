//! Transformer forward pass with activation caches, and the matching
//! reverse-mode backward pass.
//!
//! Post-norm encoder blocks: `y = LN(x + MHA(x))`, `out = LN(y + FFN(y))`
//! with a tanh-approximated GELU. Embeddings are `LN(E[id] + P[pos])`.

use ndarray::{s, Array1, Array2, Axis};

use super::params::{EncoderParams, LayerParams, MlmHeadParams};
use crate::error::{LabError, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn row_vec(a: Array1<f64>) -> Array2<f64> {
    a.insert_axis(Axis(0))
}

pub(crate) struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, g: &Array2<f64>, b: &Array2<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *s = 1.0 / (var + LN_EPS).sqrt();
        let k = *s;
        row.mapv_inplace(|v| v * k);
    }
    let y = &xhat * g + b;
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    g: &Array2<f64>,
    dg: &mut Array2<f64>,
    db: &mut Array2<f64>,
) -> Array2<f64> {
    *dg += &row_vec((dy * &cache.xhat).sum_axis(Axis(0)));
    *db += &row_vec(dy.sum_axis(Axis(0)));
    let d = dy.ncols() as f64;
    let mut dx = dy * g;
    for ((mut row, xhat), &s) in dx
        .rows_mut()
        .into_iter()
        .zip(cache.xhat.rows())
        .zip(cache.inv_std.iter())
    {
        let sum1: f64 = row.sum();
        let sum2: f64 = row.iter().zip(xhat.iter()).map(|(a, b)| a * b).sum();
        for (v, &xh) in row.iter_mut().zip(xhat.iter()) {
            *v = s / d * (d * *v - sum1 - xh * sum2);
        }
    }
    dx
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
}

pub(crate) struct LayerCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    ln1: LnCache,
    y: Array2<f64>,
    f1: Array2<f64>,
    g: Array2<f64>,
    ln2: LnCache,
}

fn layer_forward(l: &LayerParams, x: Array2<f64>, n_heads: usize) -> (Array2<f64>, LayerCache) {
    let (n, d) = x.dim();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = x.dot(&l.wq) + &l.bq;
    let k = x.dot(&l.wk) + &l.bk;
    let v = x.dot(&l.wv) + &l.bv;
    let mut ctx = Array2::zeros((n, d));
    let mut attn = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        softmax_rows(&mut scores);
        ctx.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        attn.push(scores);
    }
    let r1 = &x + &(ctx.dot(&l.wo) + &l.bo);
    let (y, ln1) = layer_norm(&r1, &l.ln1_g, &l.ln1_b);
    let f1 = y.dot(&l.w1) + &l.b1;
    let g = f1.mapv(gelu);
    let r2 = &y + &(g.dot(&l.w2) + &l.b2);
    let (out, ln2) = layer_norm(&r2, &l.ln2_g, &l.ln2_b);
    let cache = LayerCache {
        x,
        q,
        k,
        v,
        attn,
        ctx,
        ln1,
        y,
        f1,
        g,
        ln2,
    };
    (out, cache)
}

fn layer_backward(
    l: &LayerParams,
    gl: &mut LayerParams,
    c: &LayerCache,
    dout: &Array2<f64>,
    n_heads: usize,
) -> Array2<f64> {
    let d = c.x.ncols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let dr2 = layer_norm_backward(dout, &c.ln2, &l.ln2_g, &mut gl.ln2_g, &mut gl.ln2_b);
    gl.w2 += &c.g.t().dot(&dr2);
    gl.b2 += &row_vec(dr2.sum_axis(Axis(0)));
    let mut df1 = dr2.dot(&l.w2.t());
    df1.zip_mut_with(&c.f1, |dg, &f| *dg *= gelu_grad(f));
    gl.w1 += &c.y.t().dot(&df1);
    gl.b1 += &row_vec(df1.sum_axis(Axis(0)));
    let dy = dr2 + df1.dot(&l.w1.t());

    let dr1 = layer_norm_backward(&dy, &c.ln1, &l.ln1_g, &mut gl.ln1_g, &mut gl.ln1_b);
    gl.wo += &c.ctx.t().dot(&dr1);
    gl.bo += &row_vec(dr1.sum_axis(Axis(0)));
    let dctx = dr1.dot(&l.wo.t());

    let shape = c.x.raw_dim();
    let mut dq = Array2::zeros(shape);
    let mut dk = Array2::zeros(shape);
    let mut dv = Array2::zeros(shape);
    for (h, a) in c.attn.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let dctx_h = dctx.slice(cols);
        let da = dctx_h.dot(&c.v.slice(cols).t());
        dv.slice_mut(cols).assign(&a.t().dot(&dctx_h));
        let mut ds = da;
        for (mut drow, arow) in ds.rows_mut().into_iter().zip(a.rows()) {
            let dot: f64 = drow.iter().zip(arow.iter()).map(|(x, y)| x * y).sum();
            for (dv_, &av) in drow.iter_mut().zip(arow.iter()) {
                *dv_ = av * (*dv_ - dot) * scale;
            }
        }
        dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
    }
    gl.wq += &c.x.t().dot(&dq);
    gl.bq += &row_vec(dq.sum_axis(Axis(0)));
    gl.wk += &c.x.t().dot(&dk);
    gl.bk += &row_vec(dk.sum_axis(Axis(0)));
    gl.wv += &c.x.t().dot(&dv);
    gl.bv += &row_vec(dv.sum_axis(Axis(0)));
    dr1 + dq.dot(&l.wq.t()) + dk.dot(&l.wk.t()) + dv.dot(&l.wv.t())
}

/// Everything the backward pass needs from one sequence.
pub(crate) struct SeqCache {
    ids: Vec<u32>,
    emb_ln: LnCache,
    layers: Vec<LayerCache>,
    pub(crate) hidden: Array2<f64>,
}

pub(crate) fn transformer_forward(p: &EncoderParams, ids: &[u32]) -> Result<SeqCache> {
    let n = ids.len();
    if n > p.config.max_len {
        return Err(LabError::SequenceTooLong {
            len: n,
            max_len: p.config.max_len,
        });
    }
    let rows = p.token_embeddings.nrows();
    if let Some(&bad) = ids.iter().find(|&&id| id as usize >= rows) {
        return Err(LabError::DimensionMismatch {
            expected: rows,
            got: bad as usize + 1,
        });
    }
    let d = p.config.d_model;
    let mut x0 = Array2::zeros((n, d));
    for (i, &id) in ids.iter().enumerate() {
        let mut row = x0.row_mut(i);
        row.assign(&p.token_embeddings.row(id as usize));
        row += &p.position_embeddings.row(i);
    }
    let (mut x, emb_ln) = layer_norm(&x0, &p.emb_ln_g, &p.emb_ln_b);
    let mut layers = Vec::with_capacity(p.layers.len());
    for l in &p.layers {
        let (out, cache) = layer_forward(l, x, p.config.n_heads);
        layers.push(cache);
        x = out;
    }
    Ok(SeqCache {
        ids: ids.to_vec(),
        emb_ln,
        layers,
        hidden: x,
    })
}

pub(crate) fn transformer_backward(
    p: &EncoderParams,
    grads: &mut EncoderParams,
    cache: &SeqCache,
    dhidden: Array2<f64>,
) {
    let mut dx = dhidden;
    for ((l, gl), c) in p
        .layers
        .iter()
        .zip(grads.layers.iter_mut())
        .zip(cache.layers.iter())
        .rev()
    {
        dx = layer_backward(l, gl, c, &dx, p.config.n_heads);
    }
    let dx0 = layer_norm_backward(
        &dx,
        &cache.emb_ln,
        &p.emb_ln_g,
        &mut grads.emb_ln_g,
        &mut grads.emb_ln_b,
    );
    for (i, &id) in cache.ids.iter().enumerate() {
        let drow = dx0.row(i);
        let mut e = grads.token_embeddings.row_mut(id as usize);
        e += &drow;
        let mut pos = grads.position_embeddings.row_mut(i);
        pos += &drow;
    }
}

pub(crate) struct HeadCache {
    t1: Array2<f64>,
    ln: LnCache,
    t: Array2<f64>,
    pub(crate) logits: Array2<f64>,
}

/// MLM head: `logits = LN(gelu(H Wt + bt)) Pᵀ + bias`.
pub(crate) fn head_forward(p: &EncoderParams, hidden: &Array2<f64>) -> HeadCache {
    let head = p.head.as_ref().expect("sparse encoder has an MLM head");
    let proj = p.projection().expect("sparse encoder has a projection");
    head_forward_with(p, hidden, proj, &head.bias)
}

/// MLM head restricted to the projection rows and bias entries in `proj`
/// and `bias`; the logits have one column per selected row.
pub(crate) fn head_forward_with(
    p: &EncoderParams,
    hidden: &Array2<f64>,
    proj: &Array2<f64>,
    bias: &Array2<f64>,
) -> HeadCache {
    let head = p.head.as_ref().expect("sparse encoder has an MLM head");
    let t1 = hidden.dot(&head.transform_w) + &head.transform_b;
    let t2 = t1.mapv(gelu);
    let (t, ln) = layer_norm(&t2, &head.ln_g, &head.ln_b);
    let logits = t.dot(&proj.t()) + bias;
    HeadCache { t1, ln, t, logits }
}

pub(crate) fn head_backward(
    p: &EncoderParams,
    grads: &mut EncoderParams,
    hidden: &Array2<f64>,
    cache: &HeadCache,
    dlogits: &Array2<f64>,
) -> Array2<f64> {
    let proj = p.projection().expect("sparse encoder has a projection");
    let EncoderParams {
        token_embeddings: g_emb,
        head: g_head,
        ..
    } = grads;
    let g_head = g_head.as_mut().expect("gradient has a head");
    g_head.bias += &row_vec(dlogits.sum_axis(Axis(0)));
    let dproj = dlogits.t().dot(&cache.t);
    match g_head.decoder.as_mut() {
        Some(dec) => *dec += &dproj,
        None => *g_emb += &dproj,
    }
    let dt = dlogits.dot(proj);
    head_transform_backward(p, g_head, hidden, cache, dt)
}

/// [`head_backward`] for a gradient with few nonzero logits, given as
/// `(row, column, value)` triples.
pub(crate) fn head_backward_sparse(
    p: &EncoderParams,
    grads: &mut EncoderParams,
    hidden: &Array2<f64>,
    cache: &HeadCache,
    dlogits: &[(usize, u32, f64)],
) -> Array2<f64> {
    let proj = p.projection().expect("sparse encoder has a projection");
    let EncoderParams {
        token_embeddings: g_emb,
        head: g_head,
        ..
    } = grads;
    let g_head = g_head.as_mut().expect("gradient has a head");
    let mut dt = Array2::zeros(cache.t.dim());
    for &(i, j, g) in dlogits {
        let j = j as usize;
        g_head.bias[(0, j)] += g;
        let dproj = match g_head.decoder.as_mut() {
            Some(dec) => dec,
            None => &mut *g_emb,
        };
        dproj.row_mut(j).scaled_add(g, &cache.t.row(i));
        dt.row_mut(i).scaled_add(g, &proj.row(j));
    }
    head_transform_backward(p, g_head, hidden, cache, dt)
}

fn head_transform_backward(
    p: &EncoderParams,
    g_head: &mut MlmHeadParams,
    hidden: &Array2<f64>,
    cache: &HeadCache,
    dt: Array2<f64>,
) -> Array2<f64> {
    let head = p.head.as_ref().expect("sparse encoder has an MLM head");
    let dt2 = layer_norm_backward(&dt, &cache.ln, &head.ln_g, &mut g_head.ln_g, &mut g_head.ln_b);
    let mut dt1 = dt2;
    dt1.zip_mut_with(&cache.t1, |g, &x| *g *= gelu_grad(x));
    g_head.transform_w += &hidden.t().dot(&dt1);
    g_head.transform_b += &row_vec(dt1.sum_axis(Axis(0)));
    dt1.dot(&head.transform_w.t())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for &x in &[-3.0, -1.2, -0.1, 0.0, 0.4, 1.0, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = Array2::from_shape_vec((2, 4), vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 0.0, 5.0]).unwrap();
        let (y, _) = layer_norm(&x, &Array2::ones((1, 4)), &Array2::zeros((1, 4)));
        for row in y.rows() {
            assert!(row.sum().abs() < 1e-12);
            let var = row.iter().map(|v| v * v).sum::<f64>() / 4.0;
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut m = Array2::from_shape_vec((2, 3), vec![1.0, 2.0, 3.0, 1000.0, 0.0, -1000.0]).unwrap();
        softmax_rows(&mut m);
        for row in m.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }
}
