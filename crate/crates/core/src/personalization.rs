//! Adapter-only personalization over a frozen encoder and embedding table.
//!
//! The adapter is `g(v) = normalize(W v + b)`, applied to slot and option
//! vectors alike. It starts at `W = I, b = 0`, where it is the identity on
//! unit vectors.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::RwLock;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{Container, NamedTensor};
use crate::dataset::{sentence_rng, AbbSentence};
use crate::embed_table::EmbeddingTable;
use crate::encoder::{cosine, dot, Encoder, EncoderError};
use crate::exec::Exec;
use crate::format::FormatError;
use crate::optim::{clip_scale, Adam};
use crate::trainer::loss::{slot_loss, LossError};
use crate::trainer::metrics::rank_options;
use crate::trainer::SlotScorer;

#[derive(Debug, Error)]
pub enum PersonalizeError {
    #[error("no feedback records to train on")]
    EmptyFeedback,
    #[error("feedback record {index}: {reason}")]
    InvalidFeedback { index: usize, reason: String },
    #[error("frozen {artifact} changed during personalization")]
    FrozenViolation { artifact: &'static str },
    #[error("adapter dimension {adapter} does not match vector dimension {vector}")]
    DimensionMismatch { adapter: usize, vector: usize },
    #[error("adapter output is the zero vector")]
    ZeroOutput,
    #[error("slot {slot} has no options")]
    EmptySlot { slot: usize },
    #[error("invalid personalization configuration: {0}")]
    Config(String),
    #[error("adapter loss diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

/// Provenance stored next to adapter tensors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdapterMeta {
    pub base_model_hash: String,
    pub table_hash: String,
    pub version: u64,
}

impl AdapterParams {
    pub fn identity(dim: usize) -> Self {
        AdapterParams { w: Array2::eye(dim), b: Array1::zeros(dim) }
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity(self.dim())
    }

    fn affine(&self, v: &[f64]) -> Result<Vec<f64>, PersonalizeError> {
        if v.len() != self.dim() {
            return Err(PersonalizeError::DimensionMismatch { adapter: self.dim(), vector: v.len() });
        }
        let v = ndarray::ArrayView1::from(v);
        Ok((self.w.dot(&v) + &self.b).to_vec())
    }

    /// `normalize(W v + b)`.
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>, PersonalizeError> {
        let u = self.affine(v)?;
        let n = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(PersonalizeError::ZeroOutput);
        }
        Ok(u.into_iter().map(|x| x / n).collect())
    }

    /// Output plus the pre-normalization norm, for backprop.
    fn apply_cached(&self, v: &[f64]) -> Result<(Vec<f64>, f64), PersonalizeError> {
        let u = self.affine(v)?;
        let n = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(PersonalizeError::ZeroOutput);
        }
        Ok((u.into_iter().map(|x| x / n).collect(), n))
    }

    /// Accumulates `dL/dW`, `dL/db` given `dL/dg` at output `g` for input `v`.
    fn backward(v: &[f64], g: &[f64], norm: f64, dg: &[f64], grads: &mut AdapterParams) {
        let proj: f64 = g.iter().zip(dg).map(|(a, b)| a * b).sum();
        for i in 0..g.len() {
            let du = (dg[i] - g[i] * proj) / norm;
            grads.b[i] += du;
            let mut row = grads.w.row_mut(i);
            for (j, x) in v.iter().enumerate() {
                row[j] += du * x;
            }
        }
    }

    pub fn to_container(&self, meta: &AdapterMeta) -> Container {
        let mut c = Container::default();
        c.meta.insert("kind".into(), "adapter".into());
        c.meta.insert("dim".into(), self.dim().to_string());
        c.meta.insert("base_model_hash".into(), meta.base_model_hash.clone());
        c.meta.insert("table_hash".into(), meta.table_hash.clone());
        c.meta.insert("version".into(), meta.version.to_string());
        let d = self.dim();
        c.tensors.push(NamedTensor { name: "adapter.W".into(), shape: vec![d, d], data: self.w.iter().copied().collect() });
        c.tensors.push(NamedTensor { name: "adapter.b".into(), shape: vec![d], data: self.b.to_vec() });
        c
    }

    pub fn from_container(c: &Container) -> Result<(Self, AdapterMeta), FormatError> {
        if c.meta("kind")? != "adapter" {
            return Err(FormatError::Invalid("container does not hold an adapter".into()));
        }
        let invalid = |m: String| FormatError::Invalid(m);
        let d: usize = c.meta("dim")?.parse().map_err(|_| invalid("bad adapter dim".into()))?;
        let version: u64 = c.meta("version")?.parse().map_err(|_| invalid("bad adapter version".into()))?;
        let find = |name: &str, shape: &[usize]| -> Result<Vec<f64>, FormatError> {
            let t = c.tensors.iter().find(|t| t.name == name).ok_or_else(|| invalid(format!("missing tensor {name}")))?;
            if t.shape != shape {
                return Err(invalid(format!("tensor {name} has shape {:?}", t.shape)));
            }
            Ok(t.data.clone())
        };
        let w = Array2::from_shape_vec((d, d), find("adapter.W", &[d, d])?).map_err(|e| invalid(e.to_string()))?;
        let b = Array1::from(find("adapter.b", &[d])?);
        let meta = AdapterMeta {
            base_model_hash: c.meta("base_model_hash")?.to_string(),
            table_hash: c.meta("table_hash")?.to_string(),
            version,
        };
        Ok((AdapterParams { w, b }, meta))
    }

    pub fn save(&self, meta: &AdapterMeta, path: impl AsRef<Path>) -> Result<(), FormatError> {
        self.to_container(meta).save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, AdapterMeta), FormatError> {
        Self::from_container(&Container::load(path)?)
    }

    fn zeros(dim: usize) -> Self {
        AdapterParams { w: Array2::zeros((dim, dim)), b: Array1::zeros(dim) }
    }
}

/// One user or domain judgement about a presented slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackRecord {
    pub sentence: AbbSentence,
    pub slot: usize,
    pub options: Vec<String>,
    pub chosen: usize,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    pub source: String,
}

impl FeedbackRecord {
    pub fn validate(&self) -> Result<(), String> {
        if self.options.is_empty() {
            return Err("option list is empty".into());
        }
        if self.chosen >= self.options.len() {
            return Err(format!("chosen index {} out of {} options", self.chosen, self.options.len()));
        }
        if self.slot >= self.sentence.slots.len() {
            return Err(format!("slot {} out of {} slots", self.slot, self.sentence.slots.len()));
        }
        self.sentence.validate()
    }
}

/// Session-local vectors for options missing from the frozen table.
#[derive(Debug, Default)]
pub struct Overlay {
    vectors: RwLock<HashMap<String, Vec<f64>>>,
    fallbacks: AtomicU64,
}

impl Overlay {
    pub fn len(&self) -> usize {
        self.vectors.read().expect("overlay lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of encoder passes run for options absent from the table.
    pub fn fallbacks(&self) -> u64 {
        self.fallbacks.load(Ordering::Relaxed)
    }

    /// Table vector, else overlay vector, else a fresh encoder pass stored at
    /// table precision.
    pub fn option_vector(&self, option: &str, table: &EmbeddingTable, encoder: &Encoder) -> Result<Vec<f64>, PersonalizeError> {
        if let Some(v) = table.vector(option) {
            return Ok(v);
        }
        if let Some(v) = self.vectors.read().expect("overlay lock").get(option) {
            return Ok(v.clone());
        }
        log::warn!("option {option:?} missing from the embedding table; encoding on the fly");
        self.fallbacks.fetch_add(1, Ordering::Relaxed);
        let v: Vec<f64> = encoder.encode_option(option)?.vector.iter().map(|&x| f64::from(x as f32)).collect();
        self.vectors.write().expect("overlay lock").insert(option.to_string(), v.clone());
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedOption {
    pub index: usize,
    pub option: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedSlot {
    pub position: usize,
    pub ranked: Vec<RankedOption>,
}

/// Scores of `options` against `y`: plain cosine without an adapter,
/// `g(t) . g(y)` with one.
pub fn slot_scores(y: &[f64], options: &[Vec<f64>], adapter: Option<&AdapterParams>) -> Result<Vec<f64>, PersonalizeError> {
    match adapter {
        None => options.iter().map(|t| cosine(t, y).map_err(Into::into)).collect(),
        Some(a) => {
            let gy = a.apply(y)?;
            options.iter().map(|t| Ok(dot(&a.apply(t)?, &gy))).collect()
        }
    }
}

/// Ranks every slot of `sentence` with one context pass; options come from
/// the table, falling back to `overlay`.
pub fn rank_with_adapter(
    sentence: &AbbSentence,
    adapter: &AdapterParams,
    table: &EmbeddingTable,
    encoder: &Encoder,
    overlay: &Overlay,
) -> Result<Vec<RankedSlot>, PersonalizeError> {
    if let Some(slot) = sentence.slots.iter().position(|s| s.options.is_empty()) {
        return Err(PersonalizeError::EmptySlot { slot });
    }
    let ys = encoder.encode_context(sentence)?;
    sentence
        .slots
        .iter()
        .zip(ys)
        .map(|(slot, y)| {
            let vecs = slot
                .options
                .iter()
                .map(|o| overlay.option_vector(o, table, encoder))
                .collect::<Result<Vec<_>, _>>()?;
            let scores = slot_scores(&y.vector, &vecs, Some(adapter))?;
            let ranked = rank_options(&scores)
                .into_iter()
                .map(|i| RankedOption { index: i, option: slot.options[i].clone(), score: scores[i] })
                .collect();
            Ok(RankedSlot { position: y.position, ranked })
        })
        .collect()
}

/// [`SlotScorer`] over the adapted table pipeline.
pub struct AdapterScorer<'a> {
    pub adapter: &'a AdapterParams,
    pub table: &'a EmbeddingTable,
    pub encoder: &'a Encoder,
    pub overlay: &'a Overlay,
}

impl SlotScorer for AdapterScorer<'_> {
    fn score_sentence(&self, sentence: &AbbSentence) -> Result<Vec<Vec<f64>>, EncoderError> {
        let to_enc = |e: PersonalizeError| match e {
            PersonalizeError::Encoder(e) => e,
            PersonalizeError::DimensionMismatch { adapter, vector } => {
                EncoderError::DimensionMismatch { expected: adapter, got: vector }
            }
            other => EncoderError::Config(other.to_string()),
        };
        let ranked = rank_with_adapter(sentence, self.adapter, self.table, self.encoder, self.overlay).map_err(to_enc)?;
        Ok(ranked
            .into_iter()
            .map(|r| {
                let mut scores = vec![0.0; r.ranked.len()];
                for o in r.ranked {
                    scores[o.index] = o.score;
                }
                scores
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PersonalizeConfig {
    pub margin: f64,
    pub scale: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub clip: Option<f64>,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for PersonalizeConfig {
    fn default() -> Self {
        PersonalizeConfig { margin: 0.8, scale: 30.0, lr: 5e-3, epochs: 20, batch_size: 16, seed: 0, clip: None, exec: Exec::default() }
    }
}

#[derive(Debug, Clone)]
pub struct PersonalizeOutcome {
    pub adapter: AdapterParams,
    /// Mean feedback loss per epoch.
    pub losses: Vec<f64>,
    pub base_model_hash: String,
    pub table_hash: String,
}

/// Precomputed inputs for one record: slot vector, option vectors, gold.
struct Prepared {
    y: Vec<f64>,
    options: Vec<Vec<f64>>,
    gold: usize,
}

fn record_gradient(
    p: &Prepared,
    adapter: &AdapterParams,
    margin: f64,
    scale: f64,
    weight: f64,
    grads: &mut AdapterParams,
) -> Result<f64, PersonalizeError> {
    let (gy, ny) = adapter.apply_cached(&p.y)?;
    let gts = p.options.iter().map(|t| adapter.apply_cached(t)).collect::<Result<Vec<_>, _>>()?;
    let scores: Vec<f64> = gts.iter().map(|(g, _)| dot(g, &gy)).collect();
    let (loss, dscores) = slot_loss(&scores, p.gold, margin, scale)?;
    let mut dgy = vec![0.0; gy.len()];
    for ((t, (gt, nt)), ds) in p.options.iter().zip(&gts).zip(dscores) {
        let c = ds * weight;
        let dgt: Vec<f64> = gy.iter().map(|x| c * x).collect();
        for (d, x) in dgy.iter_mut().zip(gt) {
            *d += c * x;
        }
        AdapterParams::backward(t, gt, *nt, &dgt, grads);
    }
    AdapterParams::backward(&p.y, &gy, ny, &dgy, grads);
    Ok(loss)
}

/// Mean feedback loss and its gradient with respect to `(W, b)`.
pub fn adapter_loss_and_grad(
    feedback: &[FeedbackRecord],
    adapter: &AdapterParams,
    table: &EmbeddingTable,
    encoder: &Encoder,
    margin: f64,
    scale: f64,
) -> Result<(f64, AdapterParams), PersonalizeError> {
    let overlay = Overlay::default();
    let prepared = prepare(feedback, table, encoder, &overlay, Exec::Serial)?;
    let weight = 1.0 / prepared.len() as f64;
    let mut grads = AdapterParams::zeros(adapter.dim());
    let mut loss = 0.0;
    for p in &prepared {
        loss += record_gradient(p, adapter, margin, scale, weight, &mut grads)?;
    }
    Ok((loss * weight, grads))
}

fn prepare(
    feedback: &[FeedbackRecord],
    table: &EmbeddingTable,
    encoder: &Encoder,
    overlay: &Overlay,
    exec: Exec,
) -> Result<Vec<Prepared>, PersonalizeError> {
    if feedback.is_empty() {
        return Err(PersonalizeError::EmptyFeedback);
    }
    for (index, r) in feedback.iter().enumerate() {
        r.validate().map_err(|reason| PersonalizeError::InvalidFeedback { index, reason })?;
    }
    let ys = exec.try_map(feedback, |r| encoder.encode_context(&r.sentence))?;
    feedback
        .iter()
        .zip(ys)
        .map(|(r, mut y)| {
            let options = r
                .options
                .iter()
                .map(|o| overlay.option_vector(o, table, encoder))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Prepared { y: y.swap_remove(r.slot).vector, options, gold: r.chosen })
        })
        .collect()
}

/// Trains only the adapter on `feedback`, starting from `init` (or identity).
/// The encoder and table are hashed before and after.
pub fn personalize_train(
    feedback: &[FeedbackRecord],
    table: &EmbeddingTable,
    encoder: &Encoder,
    config: &PersonalizeConfig,
    init: Option<&AdapterParams>,
) -> Result<PersonalizeOutcome, PersonalizeError> {
    if !(0.0..).contains(&config.lr) || config.batch_size == 0 || config.scale.is_nan() || config.scale <= 0.0 {
        return Err(PersonalizeError::Config("need lr >= 0, scale > 0 and batch size >= 1".into()));
    }
    if table.dim() != encoder.dim() {
        return Err(PersonalizeError::DimensionMismatch { adapter: table.dim(), vector: encoder.dim() });
    }
    let base_model_hash = encoder.content_hash();
    let table_hash = table.content_hash();

    let overlay = Overlay::default();
    let prepared = prepare(feedback, table, encoder, &overlay, config.exec)?;
    let mut adapter = init.cloned().unwrap_or_else(|| AdapterParams::identity(encoder.dim()));
    if adapter.dim() != encoder.dim() {
        return Err(PersonalizeError::DimensionMismatch { adapter: adapter.dim(), vector: encoder.dim() });
    }
    let mut adam = Adam::new(config.lr);
    let mut losses = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut sentence_rng(config.seed, epoch as u64));
        let mut total = 0.0;
        for idx in order.chunks(config.batch_size) {
            let weight = 1.0 / idx.len() as f64;
            let parts = config.exec.map(idx, |&i| -> Result<(f64, AdapterParams), PersonalizeError> {
                let mut g = AdapterParams::zeros(adapter.dim());
                let l = record_gradient(&prepared[i], &adapter, config.margin, config.scale, weight, &mut g)?;
                Ok((l, g))
            });
            let mut grads = AdapterParams::zeros(adapter.dim());
            for p in parts {
                let (l, g) = p?;
                total += l;
                grads.w += &g.w;
                grads.b += &g.b;
            }
            let norm = (grads.w.iter().chain(grads.b.iter()).map(|x| x * x).sum::<f64>()).sqrt();
            if !norm.is_finite() {
                return Err(PersonalizeError::Diverged { epoch });
            }
            let scale = clip_scale(norm, config.clip);
            let params: Vec<&mut [f64]> =
                vec![adapter.w.as_slice_mut().expect("standard layout"), adapter.b.as_slice_mut().expect("contiguous")];
            let g: Vec<&[f64]> = vec![grads.w.as_slice().expect("standard layout"), grads.b.as_slice().expect("contiguous")];
            adam.step(params, g, scale);
        }
        let mean = total / prepared.len() as f64;
        if !mean.is_finite() {
            return Err(PersonalizeError::Diverged { epoch });
        }
        losses.push(mean);
    }

    if encoder.content_hash() != base_model_hash {
        return Err(PersonalizeError::FrozenViolation { artifact: "encoder" });
    }
    if table.content_hash() != table_hash {
        return Err(PersonalizeError::FrozenViolation { artifact: "embedding table" });
    }
    Ok(PersonalizeOutcome { adapter, losses, base_model_hash, table_hash })
}
