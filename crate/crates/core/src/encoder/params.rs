use std::collections::HashMap;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Shape of the reference transformer encoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl EncoderConfig {
    /// Two layers, width 64, four heads, sequences up to 128 tokens.
    pub fn reference(vocab_size: usize) -> Self {
        EncoderConfig { vocab_size, d_model: 64, n_heads: 4, n_layers: 2, d_ff: 256, max_seq_len: 128 }
    }

    pub fn validate(&self) -> Result<(), String> {
        let dims = [self.vocab_size, self.d_model, self.n_heads, self.n_layers, self.d_ff, self.max_seq_len];
        if dims.contains(&0) {
            return Err(format!("encoder dimensions must be positive: {self:?}"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// One post-norm transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
}

fn m(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("parameters are stored in standard layout")
}
fn v(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("parameters are stored in standard layout")
}
fn m_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are stored in standard layout")
}
fn v_mut(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are stored in standard layout")
}

impl LayerParams {
    fn zeros(c: &EncoderConfig) -> Self {
        let d = c.d_model;
        LayerParams {
            wq: Array2::zeros((d, d)),
            bq: Array1::zeros(d),
            wk: Array2::zeros((d, d)),
            bk: Array1::zeros(d),
            wv: Array2::zeros((d, d)),
            bv: Array1::zeros(d),
            wo: Array2::zeros((d, d)),
            bo: Array1::zeros(d),
            ln1_g: Array1::zeros(d),
            ln1_b: Array1::zeros(d),
            w1: Array2::zeros((d, c.d_ff)),
            b1: Array1::zeros(c.d_ff),
            w2: Array2::zeros((c.d_ff, d)),
            b2: Array1::zeros(d),
            ln2_g: Array1::zeros(d),
            ln2_b: Array1::zeros(d),
        }
    }

    fn named(&self) -> [(&'static str, Vec<usize>, &[f64]); 16] {
        [
            ("attn.wq", self.wq.shape().to_vec(), m(&self.wq)),
            ("attn.bq", self.bq.shape().to_vec(), v(&self.bq)),
            ("attn.wk", self.wk.shape().to_vec(), m(&self.wk)),
            ("attn.bk", self.bk.shape().to_vec(), v(&self.bk)),
            ("attn.wv", self.wv.shape().to_vec(), m(&self.wv)),
            ("attn.bv", self.bv.shape().to_vec(), v(&self.bv)),
            ("attn.wo", self.wo.shape().to_vec(), m(&self.wo)),
            ("attn.bo", self.bo.shape().to_vec(), v(&self.bo)),
            ("ln1.gamma", self.ln1_g.shape().to_vec(), v(&self.ln1_g)),
            ("ln1.beta", self.ln1_b.shape().to_vec(), v(&self.ln1_b)),
            ("ffn.w1", self.w1.shape().to_vec(), m(&self.w1)),
            ("ffn.b1", self.b1.shape().to_vec(), v(&self.b1)),
            ("ffn.w2", self.w2.shape().to_vec(), m(&self.w2)),
            ("ffn.b2", self.b2.shape().to_vec(), v(&self.b2)),
            ("ln2.gamma", self.ln2_g.shape().to_vec(), v(&self.ln2_g)),
            ("ln2.beta", self.ln2_b.shape().to_vec(), v(&self.ln2_b)),
        ]
    }

    fn named_mut(&mut self) -> [(&'static str, &mut [f64]); 16] {
        [
            ("attn.wq", m_mut(&mut self.wq)),
            ("attn.bq", v_mut(&mut self.bq)),
            ("attn.wk", m_mut(&mut self.wk)),
            ("attn.bk", v_mut(&mut self.bk)),
            ("attn.wv", m_mut(&mut self.wv)),
            ("attn.bv", v_mut(&mut self.bv)),
            ("attn.wo", m_mut(&mut self.wo)),
            ("attn.bo", v_mut(&mut self.bo)),
            ("ln1.gamma", v_mut(&mut self.ln1_g)),
            ("ln1.beta", v_mut(&mut self.ln1_b)),
            ("ffn.w1", m_mut(&mut self.w1)),
            ("ffn.b1", v_mut(&mut self.b1)),
            ("ffn.w2", m_mut(&mut self.w2)),
            ("ffn.b2", v_mut(&mut self.b2)),
            ("ln2.gamma", v_mut(&mut self.ln2_g)),
            ("ln2.beta", v_mut(&mut self.ln2_b)),
        ]
    }
}

/// All trainable tensors of the encoder, including the projection head.
///
/// The same struct doubles as a gradient accumulator (see
/// [`EncoderParams::zeros`]).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub emb_ln_g: Array1<f64>,
    pub emb_ln_b: Array1<f64>,
    pub layers: Vec<LayerParams>,
    /// Projection head `tanh(x · head_w + head_b)`.
    pub head_w: Array2<f64>,
    pub head_b: Array1<f64>,
}

pub type TensorView<'a> = (String, Vec<usize>, &'a [f64]);

impl EncoderParams {
    pub fn zeros(c: &EncoderConfig) -> Self {
        let d = c.d_model;
        EncoderParams {
            tok_emb: Array2::zeros((c.vocab_size, d)),
            pos_emb: Array2::zeros((c.max_seq_len, d)),
            emb_ln_g: Array1::zeros(d),
            emb_ln_b: Array1::zeros(d),
            layers: (0..c.n_layers).map(|_| LayerParams::zeros(c)).collect(),
            head_w: Array2::zeros((d, d)),
            head_b: Array1::zeros(d),
        }
    }

    /// Random initialization: embeddings N(0, 0.02²)-ish scaled for small
    /// widths, matrices with fan-average variance, norms at identity.
    pub fn random<R: Rng>(c: &EncoderConfig, rng: &mut R) -> Self {
        let mut p = Self::zeros(c);
        let emb = Normal::new(0.0, 0.1).expect("valid std");
        p.tok_emb.mapv_inplace(|_| emb.sample(rng));
        p.pos_emb.mapv_inplace(|_| emb.sample(rng));
        p.emb_ln_g.fill(1.0);
        let glorot = |a: &mut Array2<f64>, rng: &mut R| {
            let (r, cdim) = a.dim();
            let n = Normal::new(0.0, (2.0 / (r + cdim) as f64).sqrt()).expect("valid std");
            a.mapv_inplace(|_| n.sample(rng));
        };
        for layer in &mut p.layers {
            for w in [&mut layer.wq, &mut layer.wk, &mut layer.wv, &mut layer.wo, &mut layer.w1, &mut layer.w2] {
                glorot(w, rng);
            }
            layer.ln1_g.fill(1.0);
            layer.ln2_g.fill(1.0);
        }
        glorot(&mut p.head_w, rng);
        p
    }

    /// Named tensors in a fixed order: the checkpoint and optimizer order.
    pub fn tensors(&self) -> Vec<TensorView<'_>> {
        let mut out: Vec<TensorView<'_>> = vec![
            ("tok_emb".into(), self.tok_emb.shape().to_vec(), m(&self.tok_emb)),
            ("pos_emb".into(), self.pos_emb.shape().to_vec(), m(&self.pos_emb)),
            ("emb_ln.gamma".into(), self.emb_ln_g.shape().to_vec(), v(&self.emb_ln_g)),
            ("emb_ln.beta".into(), self.emb_ln_b.shape().to_vec(), v(&self.emb_ln_b)),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            out.extend(layer.named().into_iter().map(|(n, s, d)| (format!("layers.{i}.{n}"), s, d)));
        }
        out.push(("head.w".into(), self.head_w.shape().to_vec(), m(&self.head_w)));
        out.push(("head.b".into(), self.head_b.shape().to_vec(), v(&self.head_b)));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = vec![
            ("tok_emb".into(), m_mut(&mut self.tok_emb)),
            ("pos_emb".into(), m_mut(&mut self.pos_emb)),
            ("emb_ln.gamma".into(), v_mut(&mut self.emb_ln_g)),
            ("emb_ln.beta".into(), v_mut(&mut self.emb_ln_b)),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            out.extend(layer.named_mut().into_iter().map(|(n, d)| (format!("layers.{i}.{n}"), d)));
        }
        out.push(("head.w".into(), m_mut(&mut self.head_w)));
        out.push(("head.b".into(), v_mut(&mut self.head_b)));
        out
    }

    /// Rebuilds parameters from named tensors; every tensor must be present
    /// with the shape `config` implies.
    pub fn from_tensors(c: &EncoderConfig, mut named: HashMap<String, (Vec<usize>, Vec<f64>)>) -> Result<Self, String> {
        let mut p = Self::zeros(c);
        let expected: Vec<(String, Vec<usize>)> = p.tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
        for ((name, shape), (_, slot)) in expected.into_iter().zip(p.tensors_mut()) {
            let (found_shape, data) =
                named.remove(&name).ok_or_else(|| format!("checkpoint lacks tensor `{name}`"))?;
            if found_shape != shape {
                return Err(format!("tensor `{name}` has shape {found_shape:?}, expected {shape:?}"));
            }
            slot.copy_from_slice(&data);
        }
        if let Some(extra) = named.keys().next() {
            return Err(format!("unexpected tensor `{extra}` in checkpoint"));
        }
        Ok(p)
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, _, d)| d.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, d)| d.iter().all(|x| x.is_finite()))
    }

    /// Sets every entry to zero, keeping allocations.
    pub fn clear(&mut self) {
        for (_, d) in self.tensors_mut() {
            d.fill(0.0);
        }
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &EncoderParams) {
        for ((_, dst), (_, _, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (a, b) in dst.iter_mut().zip(src) {
                *a += b;
            }
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors().iter().flat_map(|(_, _, d)| d.iter()).map(|x| x * x).sum::<f64>().sqrt()
    }
}
