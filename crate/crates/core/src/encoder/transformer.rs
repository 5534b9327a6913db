//! Forward and backward passes of the reference encoder.
//!
//! Sequences are processed one at a time without padding. The forward pass
//! records everything the backward pass needs in a [`SeqCache`].

use ndarray::{s, Array1, Array2, ArrayView1, Axis, Zip};

use super::params::{EncoderConfig, EncoderParams, LayerParams};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

pub(crate) struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

pub(crate) struct LayerCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    attn: Array2<f64>,
    ln1: LnCache,
    h1: Array2<f64>,
    ff_pre: Array2<f64>,
    ff_act: Array2<f64>,
    ln2: LnCache,
}

pub(crate) struct HeadCache {
    position: usize,
    act: Array1<f64>,
    norm: f64,
    out: Array1<f64>,
}

/// Intermediate values of one sequence's forward pass.
pub(crate) struct SeqCache {
    ids: Vec<u32>,
    emb_ln: LnCache,
    layers: Vec<LayerCache>,
    hidden: Array2<f64>,
    heads: Vec<HeadCache>,
}

fn layer_norm(x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mean = x.sum_axis(Axis(1)) / d;
    let centered = x - &mean.view().insert_axis(Axis(1));
    let var = centered.mapv(|c| c * c).sum_axis(Axis(1)) / d;
    let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
    let xhat = &centered * &inv_std.view().insert_axis(Axis(1));
    let y = &xhat * g + b;
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_back(
    dy: &Array2<f64>,
    cache: &LnCache,
    g: &Array1<f64>,
    dg: &mut Array1<f64>,
    db: &mut Array1<f64>,
) -> Array2<f64> {
    *dg += &(dy * &cache.xhat).sum_axis(Axis(0));
    *db += &dy.sum_axis(Axis(0));
    let dxhat = dy * g;
    let d = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    for (i, mut row) in dx.axis_iter_mut(Axis(0)).enumerate() {
        let dxh = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let sum = dxh.sum();
        let dot = dxh.dot(&xh);
        let scale = cache.inv_std[i] / d;
        Zip::from(&mut row).and(&dxh).and(&xh).for_each(|o, &a, &h| {
            *o = scale * (d * a - sum - h * dot);
        });
    }
    dx
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

fn affine(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    x.dot(w) + b
}

fn layer_forward(p: &LayerParams, x: Array2<f64>, c: &EncoderConfig) -> (Array2<f64>, LayerCache) {
    let n = x.nrows();
    let dh = c.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let q = affine(&x, &p.wq, &p.bq);
    let k = affine(&x, &p.wk, &p.bk);
    let v = affine(&x, &p.wv, &p.bv);
    let mut attn = Array2::zeros((n, c.d_model));
    let mut probs = Vec::with_capacity(c.n_heads);
    for h in 0..c.n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        softmax_rows(&mut scores);
        attn.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        probs.push(scores);
    }
    let attn_out = affine(&attn, &p.wo, &p.bo);
    let (h1, ln1) = layer_norm(&(&x + &attn_out), &p.ln1_g, &p.ln1_b);
    let ff_pre = affine(&h1, &p.w1, &p.b1);
    let ff_act = ff_pre.mapv(gelu);
    let ff_out = affine(&ff_act, &p.w2, &p.b2);
    let (y, ln2) = layer_norm(&(&h1 + &ff_out), &p.ln2_g, &p.ln2_b);
    (y, LayerCache { x, q, k, v, probs, attn, ln1, h1, ff_pre, ff_act, ln2 })
}

fn accumulate_affine(
    x: &Array2<f64>,
    dy: &Array2<f64>,
    w: &Array2<f64>,
    dw: &mut Array2<f64>,
    db: &mut Array1<f64>,
) -> Array2<f64> {
    *dw += &x.t().dot(dy);
    *db += &dy.sum_axis(Axis(0));
    dy.dot(&w.t())
}

fn layer_backward(
    p: &LayerParams,
    g: &mut LayerParams,
    cache: &LayerCache,
    dy: &Array2<f64>,
    c: &EncoderConfig,
) -> Array2<f64> {
    let dh = c.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let d_res2 = layer_norm_back(dy, &cache.ln2, &p.ln2_g, &mut g.ln2_g, &mut g.ln2_b);
    let d_act = accumulate_affine(&cache.ff_act, &d_res2, &p.w2, &mut g.w2, &mut g.b2);
    let d_pre = &d_act * &cache.ff_pre.mapv(gelu_grad);
    let d_h1 = &d_res2 + &accumulate_affine(&cache.h1, &d_pre, &p.w1, &mut g.w1, &mut g.b1);

    let d_res1 = layer_norm_back(&d_h1, &cache.ln1, &p.ln1_g, &mut g.ln1_g, &mut g.ln1_b);
    let d_attn = accumulate_affine(&cache.attn, &d_res1, &p.wo, &mut g.wo, &mut g.bo);

    let mut dq = Array2::zeros(cache.q.raw_dim());
    let mut dk = Array2::zeros(cache.k.raw_dim());
    let mut dv = Array2::zeros(cache.v.raw_dim());
    for h in 0..c.n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let probs = &cache.probs[h];
        let d_head = d_attn.slice(cols);
        let d_probs = d_head.dot(&cache.v.slice(cols).t());
        dv.slice_mut(cols).assign(&probs.t().dot(&d_head));
        let mut d_scores = Array2::zeros(probs.raw_dim());
        for (i, mut row) in d_scores.axis_iter_mut(Axis(0)).enumerate() {
            let pr = probs.row(i);
            let dp = d_probs.row(i);
            let inner = pr.dot(&dp);
            Zip::from(&mut row).and(&pr).and(&dp).for_each(|o, &pv, &dpv| *o = pv * (dpv - inner) * scale);
        }
        dq.slice_mut(cols).assign(&d_scores.dot(&cache.k.slice(cols)));
        dk.slice_mut(cols).assign(&d_scores.t().dot(&cache.q.slice(cols)));
    }
    let mut dx = d_res1;
    dx += &accumulate_affine(&cache.x, &dq, &p.wq, &mut g.wq, &mut g.bq);
    dx += &accumulate_affine(&cache.x, &dk, &p.wk, &mut g.wk, &mut g.bk);
    dx += &accumulate_affine(&cache.x, &dv, &p.wv, &mut g.wv, &mut g.bv);
    dx
}

fn project(p: &EncoderParams, x: ArrayView1<'_, f64>, position: usize) -> HeadCache {
    let act = (x.dot(&p.head_w) + &p.head_b).mapv(f64::tanh);
    let norm = act.dot(&act).sqrt().max(f64::MIN_POSITIVE);
    let out = &act / norm;
    HeadCache { position, act, norm, out }
}

/// Runs the encoder over `ids` and returns unit-norm head outputs at
/// `positions`, in order. Callers validate lengths and ids.
pub(crate) fn forward(
    p: &EncoderParams,
    c: &EncoderConfig,
    ids: &[u32],
    positions: &[usize],
) -> (Vec<Vec<f64>>, SeqCache) {
    let n = ids.len();
    let mut x = Array2::zeros((n, c.d_model));
    for (i, (&id, mut row)) in ids.iter().zip(x.axis_iter_mut(Axis(0))).enumerate() {
        row.assign(&(&p.tok_emb.row(id as usize) + &p.pos_emb.row(i)));
    }
    let (mut hidden, emb_ln) = layer_norm(&x, &p.emb_ln_g, &p.emb_ln_b);
    let mut layers = Vec::with_capacity(p.layers.len());
    for layer in &p.layers {
        let (y, cache) = layer_forward(layer, hidden, c);
        hidden = y;
        layers.push(cache);
    }
    let heads: Vec<HeadCache> = positions.iter().map(|&pos| project(p, hidden.row(pos), pos)).collect();
    let outputs = heads.iter().map(|h| h.out.to_vec()).collect();
    (outputs, SeqCache { ids: ids.to_vec(), emb_ln, layers, hidden, heads })
}

/// Accumulates into `grads` the gradient of a scalar whose derivative with
/// respect to each head output is `d_outputs[i]`.
pub(crate) fn backward(
    p: &EncoderParams,
    c: &EncoderConfig,
    cache: &SeqCache,
    d_outputs: &[Vec<f64>],
    grads: &mut EncoderParams,
) {
    assert_eq!(d_outputs.len(), cache.heads.len(), "one gradient per head output");
    let mut d_hidden = Array2::zeros(cache.hidden.raw_dim());
    for (head, d_out) in cache.heads.iter().zip(d_outputs) {
        let d_out = ArrayView1::from(d_out.as_slice());
        let radial = head.out.dot(&d_out);
        let d_act = (&d_out - &(&head.out * radial)) / head.norm;
        let d_pre = &d_act * &head.act.mapv(|a| 1.0 - a * a);
        let x = cache.hidden.row(head.position);
        grads.head_w += &x.insert_axis(Axis(1)).dot(&d_pre.view().insert_axis(Axis(0)));
        grads.head_b += &d_pre;
        let mut row = d_hidden.row_mut(head.position);
        row += &p.head_w.dot(&d_pre);
    }
    for ((layer, g), lc) in p.layers.iter().zip(grads.layers.iter_mut()).zip(&cache.layers).rev() {
        d_hidden = layer_backward(layer, g, lc, &d_hidden, c);
    }
    let d_emb = layer_norm_back(&d_hidden, &cache.emb_ln, &p.emb_ln_g, &mut grads.emb_ln_g, &mut grads.emb_ln_b);
    for (i, (&id, row)) in cache.ids.iter().zip(d_emb.axis_iter(Axis(0))).enumerate() {
        let mut t = grads.tok_emb.row_mut(id as usize);
        t += &row;
        let mut pos = grads.pos_emb.row_mut(i);
        pos += &row;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (EncoderConfig, EncoderParams) {
        let c = EncoderConfig { vocab_size: 12, d_model: 8, n_heads: 2, n_layers: 2, d_ff: 12, max_seq_len: 10 };
        let p = EncoderParams::random(&c, &mut ChaCha8Rng::seed_from_u64(7));
        (c, p)
    }

    /// Probe loss: a fixed linear functional of every head output.
    fn probe(p: &EncoderParams, c: &EncoderConfig, ids: &[u32], pos: &[usize], w: &[Vec<f64>]) -> f64 {
        let (outs, _) = forward(p, c, ids, pos);
        outs.iter().zip(w).map(|(o, w)| o.iter().zip(w).map(|(a, b)| a * b).sum::<f64>()).sum()
    }

    #[test]
    fn outputs_are_unit_norm() {
        let (c, p) = tiny();
        let (outs, _) = forward(&p, &c, &[2, 3, 5, 7], &[0, 1, 3]);
        for o in outs {
            let n: f64 = o.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (c, mut p) = tiny();
        let ids = [2u32, 3, 5, 7, 5];
        let pos = [1usize, 4];
        let w = vec![vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.2, 0.7, -0.1], vec![-0.6, 0.1, 0.2, 0.3, 0.0, -0.5, 0.4, 0.9]];
        let (_, cache) = forward(&p, &c, &ids, &pos);
        let mut grads = EncoderParams::zeros(&c);
        backward(&p, &c, &cache, &w, &mut grads);

        let analytic: Vec<(String, Vec<f64>)> =
            grads.tensors().into_iter().map(|(n, _, d)| (n, d.to_vec())).collect();
        let h = 1e-6;
        for (t_idx, (name, g)) in analytic.iter().enumerate() {
            let num: Vec<f64> = (0..g.len())
                .map(|i| {
                    let orig = p.tensors_mut()[t_idx].1[i];
                    p.tensors_mut()[t_idx].1[i] = orig + h;
                    let plus = probe(&p, &c, &ids, &pos, &w);
                    p.tensors_mut()[t_idx].1[i] = orig - h;
                    let minus = probe(&p, &c, &ids, &pos, &w);
                    p.tensors_mut()[t_idx].1[i] = orig;
                    (plus - minus) / (2.0 * h)
                })
                .collect();
            let diff: f64 = g.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale = g.iter().map(|a| a * a).sum::<f64>().sqrt().max(num.iter().map(|a| a * a).sum::<f64>().sqrt());
            // Attention key biases have an exactly zero gradient; allow FD noise there.
            assert!(diff <= 1e-5 * scale + 1e-8, "{name}: diff {diff} scale {scale}");
        }
    }
}
