//! Additive-margin softmax over cosine scores.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("batch contains no slots")]
    EmptyBatch,
    #[error("slot has no options")]
    NoOptions,
    #[error("gold index {gold} out of range for {len} options")]
    GoldOutOfRange { gold: usize, len: usize },
    #[error("vector dimension mismatch: {expected} vs {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("zero-length vector")]
    ZeroVector,
}

/// One slot's query vector, option vectors and gold index.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSlot {
    pub y: Vec<f64>,
    pub options: Vec<Vec<f64>>,
    pub gold: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub loss: f64,
    pub grad_norm: f64,
    pub slots: usize,
}

fn check_gold(len: usize, gold: usize) -> Result<(), LossError> {
    if len == 0 {
        return Err(LossError::NoOptions);
    }
    if gold >= len {
        return Err(LossError::GoldOutOfRange { gold, len });
    }
    Ok(())
}

/// `l_o = s * (phi_o - m * [o == gold])`.
pub fn margin_logits(scores: &[f64], gold: usize, m: f64, s: f64) -> Vec<f64> {
    scores
        .iter()
        .enumerate()
        .map(|(o, &phi)| s * (phi - if o == gold { m } else { 0.0 }))
        .collect()
}

/// Softmax with max subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Margin-adjusted option probabilities from precomputed cosine scores.
pub fn probabilities_from_scores(scores: &[f64], gold: usize, m: f64, s: f64) -> Result<Vec<f64>, LossError> {
    check_gold(scores.len(), gold)?;
    Ok(softmax(&margin_logits(scores, gold, m, s)))
}

/// `-log P(gold)` and its gradient with respect to each score.
pub fn slot_loss(scores: &[f64], gold: usize, m: f64, s: f64) -> Result<(f64, Vec<f64>), LossError> {
    check_gold(scores.len(), gold)?;
    let logits = margin_logits(scores, gold, m, s);
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let loss = max + z.ln() - logits[gold];
    let grad = logits
        .iter()
        .enumerate()
        .map(|(o, l)| s * ((l - max).exp() / z - if o == gold { 1.0 } else { 0.0 }))
        .collect();
    Ok((loss.max(0.0), grad))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine without clamping, plus its gradients with respect to both inputs.
fn cosine_with_grad(u: &[f64], v: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>), LossError> {
    if u.len() != v.len() {
        return Err(LossError::DimensionMismatch { expected: u.len(), got: v.len() });
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(LossError::ZeroVector);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let c = dot / (nu * nv);
    let du = u.iter().zip(v).map(|(a, b)| b / (nu * nv) - c * a / (nu * nu)).collect();
    let dv = u.iter().zip(v).map(|(a, b)| a / (nu * nv) - c * b / (nv * nv)).collect();
    Ok((c, du, dv))
}

/// Cosine scores of every option against the slot vector.
pub fn slot_scores(slot: &ScoredSlot) -> Result<Vec<f64>, LossError> {
    slot.options.iter().map(|t| cosine_with_grad(&slot.y, t).map(|(c, _, _)| c)).collect()
}

/// Probabilities for one slot, scoring options by cosine against `y`.
pub fn option_probability(y: &[f64], options: &[Vec<f64>], gold: usize, m: f64, s: f64) -> Result<Vec<f64>, LossError> {
    let scores = options
        .iter()
        .map(|t| cosine_with_grad(y, t).map(|(c, _, _)| c))
        .collect::<Result<Vec<_>, _>>()?;
    probabilities_from_scores(&scores, gold, m, s)
}

/// Gradients of [`ams_loss`] with respect to each slot's `y` and option vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotGrad {
    pub y: Vec<f64>,
    pub options: Vec<Vec<f64>>,
}

/// Mean `-log P(gold)` over every slot in the batch, with input gradients.
pub fn ams_loss_with_grad(batch: &[ScoredSlot], m: f64, s: f64) -> Result<(LossReport, Vec<SlotGrad>), LossError> {
    if batch.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let n = batch.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(batch.len());
    for slot in batch {
        let mut scores = Vec::with_capacity(slot.options.len());
        let mut partials = Vec::with_capacity(slot.options.len());
        for t in &slot.options {
            let (c, dy, dt) = cosine_with_grad(&slot.y, t)?;
            scores.push(c);
            partials.push((dy, dt));
        }
        let (loss, dscores) = slot_loss(&scores, slot.gold, m, s)?;
        total += loss;
        let mut gy = vec![0.0; slot.y.len()];
        let mut gopts = Vec::with_capacity(slot.options.len());
        for ((dy, dt), ds) in partials.into_iter().zip(dscores) {
            let w = ds / n;
            for (g, d) in gy.iter_mut().zip(&dy) {
                *g += w * d;
            }
            gopts.push(dt.into_iter().map(|d| w * d).collect());
        }
        grads.push(SlotGrad { y: gy, options: gopts });
    }
    let sq: f64 = grads
        .iter()
        .map(|g| g.y.iter().chain(g.options.iter().flatten()).map(|x| x * x).sum::<f64>())
        .sum();
    Ok((LossReport { loss: total / n, grad_norm: sq.sqrt(), slots: batch.len() }, grads))
}

/// Mean `-log P(gold)` over every slot in the batch.
pub fn ams_loss(batch: &[ScoredSlot], m: f64, s: f64) -> Result<LossReport, LossError> {
    ams_loss_with_grad(batch, m, s).map(|(r, _)| r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_values() {
        let p = probabilities_from_scores(&[0.4, 0.4], 0, 0.0, 1.0).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15);
        let p = probabilities_from_scores(&[0.9, 0.1], 0, 0.8, 1.0).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12);
        let (l, _) = slot_loss(&[0.3, 0.3], 1, 0.0, 1.0).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn confident_gold_has_vanishing_loss() {
        let (l, _) = slot_loss(&[1.0, -1.0, -1.0], 0, 0.0, 1000.0).unwrap();
        assert!(l < 1e-300);
    }

    #[test]
    fn errors() {
        assert_eq!(ams_loss(&[], 0.8, 30.0), Err(LossError::EmptyBatch));
        assert_eq!(slot_loss(&[], 0, 0.8, 30.0).unwrap_err(), LossError::NoOptions);
        assert_eq!(slot_loss(&[0.1], 3, 0.8, 30.0).unwrap_err(), LossError::GoldOutOfRange { gold: 3, len: 1 });
        let slot = ScoredSlot { y: vec![1.0, 0.0], options: vec![vec![0.0, 0.0]], gold: 0 };
        assert_eq!(ams_loss(&[slot], 0.8, 30.0), Err(LossError::ZeroVector));
    }

    #[test]
    fn input_gradients_match_finite_differences() {
        let batch = vec![
            ScoredSlot { y: vec![0.3, -0.2, 0.9], options: vec![vec![0.1, 0.5, -0.2], vec![-0.7, 0.2, 0.4], vec![0.3, 0.3, 0.3]], gold: 1 },
            ScoredSlot { y: vec![-0.5, 0.1, 0.2], options: vec![vec![0.9, -0.1, 0.0], vec![0.2, 0.8, -0.3]], gold: 0 },
        ];
        let (_, grads) = ams_loss_with_grad(&batch, 0.8, 30.0).unwrap();
        let h = 1e-6;
        for (b, g) in grads.iter().enumerate() {
            for i in 0..3 {
                let mut plus = batch.clone();
                plus[b].y[i] += h;
                let mut minus = batch.clone();
                minus[b].y[i] -= h;
                let num = (ams_loss(&plus, 0.8, 30.0).unwrap().loss - ams_loss(&minus, 0.8, 30.0).unwrap().loss) / (2.0 * h);
                assert!((num - g.y[i]).abs() < 1e-6, "y[{b}][{i}]: {num} vs {}", g.y[i]);
            }
        }
    }
}
