//! Dual-encoder core.
//!
//! One transformer encodes both sides. A sentence with `[ABB]` slots yields
//! one [`SlotEmbedding`] per slot, read from the contextual output at the
//! slot's position; an option string yields one [`OptionEmbedding`] read
//! from its `[CLS]` position. Both pass through the projection head
//! `tanh(W x + b)` and are L2-normalized, so cosine scoring is a dot product.

mod params;
mod transformer;
pub mod vocab;

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use params::{EncoderConfig, EncoderParams, LayerParams, TensorView};
pub use vocab::{Vocabulary, ABB_ID, CLS_ID, PAD_ID, UNK_ID};

use crate::container::{Container, NamedTensor};
use crate::dataset::AbbSentence;
use crate::format::FormatError;
use crate::hash::content_hash;

pub(crate) use transformer::SeqCache;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("sequence of {len} tokens exceeds the maximum of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("sentence has no [ABB] slots")]
    NoSlots,
    #[error("option text is empty")]
    EmptyOption,
    #[error("token id {id} is outside the vocabulary of {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },
    #[error("slot position {pos} does not hold an [ABB] token")]
    SlotMismatch { pos: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("cosine of a zero vector is undefined")]
    ZeroVector,
    #[error("invalid encoder configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Unit-norm query vector for one `[ABB]` slot.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotEmbedding {
    pub position: usize,
    pub vector: Vec<f64>,
}

/// Unit-norm vector for one option string.
#[derive(Debug, Clone, PartialEq)]
pub struct OptionEmbedding {
    pub option: String,
    pub vector: Vec<f64>,
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, EncoderError> {
    if u.len() != v.len() {
        return Err(EncoderError::DimensionMismatch { expected: u.len(), got: v.len() });
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(EncoderError::ZeroVector);
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

pub(crate) fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// Parameters, vocabulary and shape of one encoder, plus a counter of
/// forward passes run for inference and training.
#[derive(Debug)]
pub struct Encoder {
    config: EncoderConfig,
    vocab: Vocabulary,
    params: EncoderParams,
    passes: AtomicU64,
}

impl Clone for Encoder {
    fn clone(&self) -> Self {
        Encoder {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            params: self.params.clone(),
            passes: AtomicU64::new(self.forward_passes()),
        }
    }
}

impl PartialEq for Encoder {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.vocab == other.vocab && self.params == other.params
    }
}

impl Encoder {
    pub fn new(config: EncoderConfig, vocab: Vocabulary, params: EncoderParams) -> Result<Self, EncoderError> {
        config.validate().map_err(EncoderError::Config)?;
        if vocab.len() != config.vocab_size {
            return Err(EncoderError::Config(format!(
                "vocabulary has {} tokens, config expects {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        if !params.all_finite() {
            return Err(EncoderError::Config("parameters contain non-finite values".into()));
        }
        let expected = EncoderParams::zeros(&config);
        let shapes_ok = expected.tensors().iter().zip(params.tensors()).all(|(a, b)| a.0 == b.0 && a.1 == b.1)
            && expected.layers.len() == params.layers.len();
        if !shapes_ok {
            return Err(EncoderError::Config("parameter shapes disagree with config".into()));
        }
        Ok(Encoder { config, vocab, params, passes: AtomicU64::new(0) })
    }

    /// Freshly initialized encoder; `config.vocab_size` is taken from `vocab`.
    pub fn random(mut config: EncoderConfig, vocab: Vocabulary, seed: u64) -> Result<Self, EncoderError> {
        config.vocab_size = vocab.len();
        config.validate().map_err(EncoderError::Config)?;
        let params = EncoderParams::random(&config, &mut ChaCha8Rng::seed_from_u64(seed));
        Encoder::new(config, vocab, params)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &EncoderParams {
        &self.params
    }

    /// Mutable access for optimizers and finite-difference probes.
    pub fn params_mut(&mut self) -> &mut EncoderParams {
        &mut self.params
    }

    pub fn dim(&self) -> usize {
        self.config.d_model
    }

    /// Number of forward passes run so far.
    pub fn forward_passes(&self) -> u64 {
        self.passes.load(Ordering::Relaxed)
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        self.vocab.tokenize(text)
    }

    fn check_ids(&self, ids: &[u32]) -> Result<(), EncoderError> {
        if ids.len() > self.config.max_seq_len {
            return Err(EncoderError::SequenceTooLong { len: ids.len(), max: self.config.max_seq_len });
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(EncoderError::TokenOutOfRange { id, vocab_size: self.config.vocab_size });
        }
        Ok(())
    }

    fn slot_positions(&self, sentence: &AbbSentence) -> Result<Vec<usize>, EncoderError> {
        if sentence.slots.is_empty() {
            return Err(EncoderError::NoSlots);
        }
        sentence
            .slots
            .iter()
            .map(|s| match sentence.tokens.get(s.pos) {
                Some(&ABB_ID) => Ok(s.pos),
                _ => Err(EncoderError::SlotMismatch { pos: s.pos }),
            })
            .collect()
    }

    /// Runs the encoder on `ids` and returns head outputs at `positions`.
    pub fn encode_tokens(&self, ids: &[u32], positions: &[usize]) -> Result<Vec<Vec<f64>>, EncoderError> {
        self.check_ids(ids)?;
        if let Some(&pos) = positions.iter().find(|&&p| p >= ids.len()) {
            return Err(EncoderError::SlotMismatch { pos });
        }
        self.passes.fetch_add(1, Ordering::Relaxed);
        Ok(transformer::forward(&self.params, &self.config, ids, positions).0)
    }

    /// One slot embedding per `[ABB]` slot, in slot order.
    pub fn encode_context(&self, sentence: &AbbSentence) -> Result<Vec<SlotEmbedding>, EncoderError> {
        let positions = self.slot_positions(sentence)?;
        let outs = self.encode_tokens(&sentence.tokens, &positions)?;
        Ok(positions
            .into_iter()
            .zip(outs)
            .map(|(position, vector)| SlotEmbedding { position, vector })
            .collect())
    }

    /// Embedding of an option string, read at its `[CLS]` position.
    pub fn encode_option(&self, option: &str) -> Result<OptionEmbedding, EncoderError> {
        if option.trim().is_empty() {
            return Err(EncoderError::EmptyOption);
        }
        let ids = self.tokenize(option);
        let mut outs = self.encode_tokens(&ids, &[0])?;
        Ok(OptionEmbedding { option: option.to_string(), vector: outs.remove(0) })
    }

    pub(crate) fn forward_cached(
        &self,
        ids: &[u32],
        positions: &[usize],
    ) -> Result<(Vec<Vec<f64>>, SeqCache), EncoderError> {
        self.check_ids(ids)?;
        self.passes.fetch_add(1, Ordering::Relaxed);
        Ok(transformer::forward(&self.params, &self.config, ids, positions))
    }

    pub(crate) fn context_cached(
        &self,
        sentence: &AbbSentence,
    ) -> Result<(Vec<Vec<f64>>, SeqCache), EncoderError> {
        let positions = self.slot_positions(sentence)?;
        self.forward_cached(&sentence.tokens, &positions)
    }

    pub(crate) fn option_cached(&self, option: &str) -> Result<(Vec<f64>, SeqCache), EncoderError> {
        if option.trim().is_empty() {
            return Err(EncoderError::EmptyOption);
        }
        let ids = self.tokenize(option);
        let (mut outs, cache) = self.forward_cached(&ids, &[0])?;
        Ok((outs.remove(0), cache))
    }

    pub(crate) fn backward(&self, cache: &SeqCache, d_outputs: &[Vec<f64>], grads: &mut EncoderParams) {
        transformer::backward(&self.params, &self.config, cache, d_outputs, grads);
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::default();
        c.meta.insert("kind".into(), "encoder".into());
        c.meta.insert("config".into(), serde_json::to_string(&self.config).expect("config serializes"));
        c.meta.insert("vocab".into(), serde_json::to_string(&self.vocab).expect("vocab serializes"));
        c.tensors = self
            .params
            .tensors()
            .into_iter()
            .map(|(name, shape, data)| NamedTensor { name, shape, data: data.to_vec() })
            .collect();
        c
    }

    pub fn from_container(c: Container) -> Result<Self, EncoderError> {
        let kind = c.meta("kind")?;
        if kind != "encoder" {
            return Err(FormatError::Invalid(format!("expected an encoder checkpoint, found `{kind}`")).into());
        }
        let config: EncoderConfig = serde_json::from_str(c.meta("config")?)
            .map_err(|e| FormatError::Invalid(format!("bad encoder config: {e}")))?;
        let vocab: Vocabulary = serde_json::from_str(c.meta("vocab")?)
            .map_err(|e| FormatError::Invalid(format!("bad vocabulary: {e}")))?;
        let named: HashMap<String, (Vec<usize>, Vec<f64>)> =
            c.tensors.into_iter().map(|t| (t.name, (t.shape, t.data))).collect();
        let params = EncoderParams::from_tensors(&config, named).map_err(FormatError::Invalid)?;
        Encoder::new(config, vocab, params)
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        self.to_container().to_bytes()
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self, EncoderError> {
        Encoder::from_container(Container::from_bytes(bytes)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EncoderError> {
        Ok(self.to_container().save(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EncoderError> {
        Encoder::from_container(Container::load(path)?)
    }

    /// SHA-256 of the checkpoint bytes.
    pub fn content_hash(&self) -> String {
        content_hash(&self.to_checkpoint_bytes())
    }
}
