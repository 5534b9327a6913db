//! Margin-softmax training of the encoder and split evaluation.

pub mod loss;
pub mod metrics;

use std::collections::HashMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{sentence_rng, AbbSentence, DatasetSplit};
use crate::encoder::{cosine, dot, Encoder, EncoderError, EncoderParams, SeqCache};
use crate::exec::Exec;
use crate::optim::{clip_scale, Adam};

pub use loss::{ams_loss, option_probability, LossError, LossReport, ScoredSlot};
pub use metrics::{dif, gold_rank, metrics_from_scores, rank_options, EvalMetrics, MetricsAccumulator};

/// Sentences per gradient work unit. Fixed so the reduction order does not
/// depend on the thread count.
const GRAD_CHUNK: usize = 4;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training split has no sentences")]
    EmptyDataset,
    #[error("training split has no slot with a gold index")]
    NoGoldSlots,
    #[error("sentence {sentence} slot {slot} has no gold index")]
    MissingGold { sentence: usize, slot: usize },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("loss diverged at epoch {epoch}, batch {batch}: {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

/// Produces cosine scores for every option of every slot of a sentence.
pub trait SlotScorer: Sync {
    fn score_sentence(&self, sentence: &AbbSentence) -> Result<Vec<Vec<f64>>, EncoderError>;
}

/// Scores with fresh encoder passes for the context and every option.
pub struct EncoderScorer<'a> {
    pub encoder: &'a Encoder,
}

impl SlotScorer for EncoderScorer<'_> {
    fn score_sentence(&self, sentence: &AbbSentence) -> Result<Vec<Vec<f64>>, EncoderError> {
        let ys = self.encoder.encode_context(sentence)?;
        let mut cache: HashMap<&str, Vec<f64>> = HashMap::new();
        let mut out = Vec::with_capacity(ys.len());
        for (y, slot) in ys.iter().zip(&sentence.slots) {
            let mut scores = Vec::with_capacity(slot.options.len());
            for opt in &slot.options {
                if !cache.contains_key(opt.as_str()) {
                    let t = self.encoder.encode_option(opt)?.vector;
                    cache.insert(opt, t);
                }
                scores.push(cosine(&y.vector, &cache[opt.as_str()])?);
            }
            out.push(scores);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EvalOptions {
    /// Permute each slot's options with this seed before ranking.
    pub shuffle_seed: Option<u64>,
    pub exec: Exec,
}

/// R, Dif and top-k over every slot of `split`.
pub fn evaluate(split: &DatasetSplit, scorer: &dyn SlotScorer, opts: EvalOptions) -> Result<EvalMetrics, TrainError> {
    let parts = opts.exec.map_range(split.sentences.len(), |i| -> Result<MetricsAccumulator, TrainError> {
        let sentence = &split.sentences[i];
        let mut acc = MetricsAccumulator::default();
        if sentence.slots.is_empty() {
            return Ok(acc);
        }
        let scores = scorer.score_sentence(sentence)?;
        for (j, (slot, mut s)) in sentence.slots.iter().zip(scores).enumerate() {
            let mut gold = slot.gold.ok_or(TrainError::MissingGold { sentence: i, slot: j })?;
            if let Some(seed) = opts.shuffle_seed {
                let mut perm: Vec<usize> = (0..s.len()).collect();
                perm.shuffle(&mut sentence_rng(seed, (i as u64) << 16 | j as u64));
                gold = perm.iter().position(|&p| p == gold).expect("gold is in the permutation");
                s = perm.iter().map(|&p| s[p]).collect();
            }
            acc.add(&s, gold);
        }
        Ok(acc)
    });
    let mut total = MetricsAccumulator::default();
    for p in parts {
        total.merge(&p?);
    }
    Ok(total.finish())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub margin: f64,
    pub scale: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm clip.
    pub clip: Option<f64>,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { margin: 0.8, scale: 30.0, lr: 1e-3, epochs: 10, batch_size: 32, seed: 0, clip: None, exec: Exec::default() }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(-1.0..=1.0).contains(&self.margin) {
            return bad("margin must lie in [-1, 1]");
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return bad("scale must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if self.clip.is_some_and(|c| c <= 0.0) {
            return bad("clip must be positive");
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub grad_norm: f64,
    #[serde(flatten, skip_serializing_if = "Option::is_none")]
    pub valid: Option<EvalMetrics>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best-validation parameters, or the last epoch without a validation split.
    pub encoder: Encoder,
    pub best_epoch: usize,
    pub history: Vec<EpochLog>,
}

/// Adds the gradient of this sentence's summed slot losses, scaled by
/// `weight`, into `grads`; returns the unscaled loss sum.
fn sentence_gradient(
    encoder: &Encoder,
    sentence: &AbbSentence,
    margin: f64,
    scale: f64,
    weight: f64,
    grads: &mut EncoderParams,
) -> Result<f64, TrainError> {
    if sentence.gold_count() == 0 {
        return Ok(0.0);
    }
    let (ys, ctx_cache) = encoder.context_cached(sentence)?;
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut opts: Vec<(Vec<f64>, SeqCache)> = Vec::new();
    for slot in sentence.slots.iter().filter(|s| s.gold.is_some()) {
        for o in &slot.options {
            if !index.contains_key(o.as_str()) {
                index.insert(o, opts.len());
                opts.push(encoder.option_cached(o)?);
            }
        }
    }
    let dim = encoder.dim();
    let mut dys = vec![vec![0.0; dim]; ys.len()];
    let mut dts = vec![vec![0.0; dim]; opts.len()];
    let mut loss_sum = 0.0;
    for ((slot, y), dy) in sentence.slots.iter().zip(&ys).zip(&mut dys) {
        let Some(gold) = slot.gold else { continue };
        let ids: Vec<usize> = slot.options.iter().map(|o| index[o.as_str()]).collect();
        let scores: Vec<f64> = ids.iter().map(|&k| dot(y, &opts[k].0)).collect();
        let (l, dscores) = loss::slot_loss(&scores, gold, margin, scale)?;
        loss_sum += l;
        for (&k, ds) in ids.iter().zip(dscores) {
            let c = ds * weight;
            let t = &opts[k].0;
            for i in 0..dim {
                dy[i] += c * t[i];
                dts[k][i] += c * y[i];
            }
        }
    }
    encoder.backward(&ctx_cache, &dys, grads);
    for ((_, cache), dt) in opts.iter().zip(dts) {
        encoder.backward(cache, &[dt], grads);
    }
    Ok(loss_sum)
}

fn gold_slots(sentences: &[&AbbSentence]) -> usize {
    sentences.iter().map(|s| s.gold_count()).sum()
}

/// Mean slot loss over `sentences` and its gradient with respect to every
/// encoder parameter.
pub fn batch_gradient(
    encoder: &Encoder,
    sentences: &[&AbbSentence],
    margin: f64,
    scale: f64,
    exec: Exec,
) -> Result<(LossReport, EncoderParams), TrainError> {
    let n = gold_slots(sentences);
    if n == 0 {
        return Err(LossError::EmptyBatch.into());
    }
    let weight = 1.0 / n as f64;
    let chunks: Vec<&[&AbbSentence]> = sentences.chunks(GRAD_CHUNK).collect();
    let parts = exec.map(&chunks, |chunk| -> Result<(f64, EncoderParams), TrainError> {
        let mut g = EncoderParams::zeros(encoder.config());
        let mut l = 0.0;
        for s in chunk.iter() {
            l += sentence_gradient(encoder, s, margin, scale, weight, &mut g)?;
        }
        Ok((l, g))
    });
    let mut grads = EncoderParams::zeros(encoder.config());
    let mut loss = 0.0;
    for p in parts {
        let (l, g) = p?;
        loss += l;
        grads.add_assign(&g);
    }
    let report = LossReport { loss: loss * weight, grad_norm: grads.l2_norm(), slots: n };
    Ok((report, grads))
}

/// Mean slot loss through the public encoding path, for probing gradients.
pub fn batch_loss(encoder: &Encoder, sentences: &[&AbbSentence], margin: f64, scale: f64) -> Result<f64, TrainError> {
    let mut batch = Vec::new();
    for s in sentences {
        if s.gold_count() == 0 {
            continue;
        }
        let ys = encoder.encode_context(s)?;
        for (slot, y) in s.slots.iter().zip(ys) {
            let Some(gold) = slot.gold else { continue };
            let options = slot
                .options
                .iter()
                .map(|o| encoder.encode_option(o).map(|e| e.vector))
                .collect::<Result<Vec<_>, _>>()?;
            batch.push(ScoredSlot { y: y.vector, options, gold });
        }
    }
    Ok(ams_loss(&batch, margin, scale)?.loss)
}

fn better(a: &EvalMetrics, b: &EvalMetrics) -> bool {
    a.avg_rank < b.avg_rank || (a.avg_rank == b.avg_rank && a.avg_dif > b.avg_dif)
}

/// Trains `encoder` on `train_split`, calling `on_epoch` after every epoch.
pub fn train_with<F>(
    config: &TrainConfig,
    train_split: &DatasetSplit,
    valid: Option<&DatasetSplit>,
    encoder: Encoder,
    mut on_epoch: F,
) -> Result<TrainOutcome, TrainError>
where
    F: FnMut(&EpochLog),
{
    config.validate()?;
    if train_split.sentences.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let usable: Vec<usize> = (0..train_split.sentences.len()).filter(|&i| train_split.sentences[i].gold_count() > 0).collect();
    if usable.is_empty() {
        return Err(TrainError::NoGoldSlots);
    }
    let mut encoder = encoder;
    let mut adam = Adam::new(config.lr);
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(EvalMetrics, usize, Encoder)> = None;
    let eval_opts = EvalOptions { shuffle_seed: None, exec: config.exec };

    for epoch in 1..=config.epochs {
        let mut order = usable.clone();
        order.shuffle(&mut sentence_rng(config.seed, epoch as u64));
        let (mut loss_sum, mut norm_sum, mut slots, mut batches) = (0.0, 0.0, 0usize, 0usize);
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&AbbSentence> = idx.iter().map(|&i| &train_split.sentences[i]).collect();
            let (report, grads) = batch_gradient(&encoder, &batch, config.margin, config.scale, config.exec)?;
            if !report.loss.is_finite() || !report.grad_norm.is_finite() {
                return Err(TrainError::Diverged { epoch, batch: b, loss: report.loss });
            }
            let scale = clip_scale(report.grad_norm, config.clip);
            let grad_views: Vec<&[f64]> = grads.tensors().into_iter().map(|(_, _, d)| d).collect();
            let params: Vec<&mut [f64]> = encoder.params_mut().tensors_mut().into_iter().map(|(_, d)| d).collect();
            adam.step(params, grad_views, scale);
            loss_sum += report.loss * report.slots as f64;
            slots += report.slots;
            norm_sum += report.grad_norm;
            batches += 1;
        }
        let valid_metrics = match valid {
            Some(v) => Some(evaluate(v, &EncoderScorer { encoder: &encoder }, eval_opts)?),
            None => None,
        };
        let log = EpochLog { epoch, loss: loss_sum / slots as f64, grad_norm: norm_sum / batches as f64, valid: valid_metrics };
        log::info!("epoch {epoch}: loss {:.5}", log.loss);
        on_epoch(&log);
        if let Some(m) = valid_metrics {
            if best.as_ref().is_none_or(|(bm, _, _)| better(&m, bm)) {
                best = Some((m, epoch, encoder.clone()));
            }
        }
        history.push(log);
    }
    let (encoder, best_epoch) = match best {
        Some((_, e, enc)) => (enc, e),
        None => (encoder, config.epochs),
    };
    Ok(TrainOutcome { encoder, best_epoch, history })
}

pub fn train(
    config: &TrainConfig,
    train_split: &DatasetSplit,
    valid: Option<&DatasetSplit>,
    encoder: Encoder,
) -> Result<TrainOutcome, TrainError> {
    train_with(config, train_split, valid, encoder, |_| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Slot;
    use crate::encoder::tests::small_encoder;

    fn toy_split(enc: &Encoder) -> DatasetSplit {
        let make = |text: &str, opts: &[&str]| {
            let slot = Slot::new(opts.iter().map(|s| s.to_string()).collect(), Some(0));
            AbbSentence::from_text(text, enc.vocab(), vec![slot], 0).unwrap()
        };
        DatasetSplit {
            name: "toy".into(),
            sentences: vec![
                make("the [ABB] saw the patient", &["doctor", "patient", "room"]),
                make("the doctor saw the [ABB]", &["patient", "doctor"]),
                make("in the [ABB]", &["room", "doctor", "patient"]),
            ],
            seed: 0,
            corpus_id: "toy".into(),
        }
    }

    #[test]
    fn gradient_matches_finite_differences_of_public_loss() {
        let enc = small_encoder();
        let split = toy_split(&enc);
        let batch: Vec<&AbbSentence> = split.sentences.iter().collect();
        let (report, grads) = batch_gradient(&enc, &batch, 0.8, 30.0, Exec::Serial).unwrap();
        assert!((report.loss - batch_loss(&enc, &batch, 0.8, 30.0).unwrap()).abs() < 1e-10);
        let h = 1e-6;
        let mut probe = enc.clone();
        let names = ["head.w", "head.b", "layers.1.ffn.w2", "tok_emb"];
        for (t, (name, _, g)) in grads.tensors().into_iter().enumerate() {
            if !names.iter().any(|n| name == *n) {
                continue;
            }
            for i in (0..g.len()).step_by(7) {
                let orig = probe.params_mut().tensors_mut()[t].1[i];
                probe.params_mut().tensors_mut()[t].1[i] = orig + h;
                let plus = batch_loss(&probe, &batch, 0.8, 30.0).unwrap();
                probe.params_mut().tensors_mut()[t].1[i] = orig - h;
                let minus = batch_loss(&probe, &batch, 0.8, 30.0).unwrap();
                probe.params_mut().tensors_mut()[t].1[i] = orig;
                let num = (plus - minus) / (2.0 * h);
                assert!((num - g[i]).abs() <= 1e-5 * num.abs().max(g[i].abs()) + 1e-7, "{name}[{i}]: {num} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn serial_and_parallel_training_agree() {
        let enc = small_encoder();
        let split = toy_split(&enc);
        let mut cfg = TrainConfig { epochs: 3, batch_size: 2, seed: 4, ..TrainConfig::default() };
        cfg.exec = Exec::Serial;
        let a = train(&cfg, &split, Some(&split), enc.clone()).unwrap();
        cfg.exec = Exec::Parallel;
        let b = train(&cfg, &split, Some(&split), enc.clone()).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.encoder.params(), b.encoder.params());
        assert!(a.history.iter().all(|h| h.loss.is_finite()));
    }

    #[test]
    fn zero_epochs_returns_untouched_params() {
        let enc = small_encoder();
        let split = toy_split(&enc);
        let out = train(&TrainConfig { epochs: 0, ..TrainConfig::default() }, &split, None, enc.clone()).unwrap();
        assert_eq!(out.encoder.params(), enc.params());
        assert!(out.history.is_empty());
    }

    #[test]
    fn training_lowers_loss_on_toy_data() {
        let enc = small_encoder();
        let split = toy_split(&enc);
        let cfg = TrainConfig { epochs: 30, batch_size: 3, lr: 1e-2, ..TrainConfig::default() };
        let out = train(&cfg, &split, None, enc).unwrap();
        assert!(out.history.last().unwrap().loss < out.history[0].loss);
    }

    #[test]
    fn config_and_data_errors() {
        let enc = small_encoder();
        let split = toy_split(&enc);
        let bad = TrainConfig { margin: 1.5, ..TrainConfig::default() };
        assert!(matches!(train(&bad, &split, None, enc.clone()), Err(TrainError::Config(_))));
        let empty = DatasetSplit { sentences: vec![], ..split.clone() };
        assert!(matches!(train(&TrainConfig::default(), &empty, None, enc.clone()), Err(TrainError::EmptyDataset)));
        let mut no_gold = split.clone();
        no_gold.sentences[0].slots[0].gold = None;
        let e = evaluate(&no_gold, &EncoderScorer { encoder: &enc }, EvalOptions::default());
        assert!(matches!(e, Err(TrainError::MissingGold { sentence: 0, slot: 0 })));
    }

    #[test]
    fn shuffled_evaluation_matches_unshuffled() {
        let enc = small_encoder();
        let split = toy_split(&enc);
        let scorer = EncoderScorer { encoder: &enc };
        let a = evaluate(&split, &scorer, EvalOptions::default()).unwrap();
        let b = evaluate(&split, &scorer, EvalOptions { shuffle_seed: Some(11), exec: Exec::Serial }).unwrap();
        assert_eq!(a.avg_rank, b.avg_rank);
        assert!((a.avg_dif - b.avg_dif).abs() < 1e-12);
    }
}
