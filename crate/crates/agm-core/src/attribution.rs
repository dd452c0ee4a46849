//! Token-level importance scores.
//!
//! Grad×Input is the training-time signal: the gradient of the
//! classification loss with respect to the per-token states feeding the
//! final encoder layer, multiplied elementwise by those states and summed
//! over the hidden dimension. Because the gradient nodes live on the same
//! tape, the scores stay differentiable with respect to model parameters
//! and can be penalized directly (the double backward pass).
//!
//! Integrated Gradients is the diagnostic signal: a Riemann-midpoint path
//! integral over input embeddings from a PAD-embedding baseline, targeting
//! the predicted-class logit.

use crate::autograd::{Mat, NodeId, Tape};
use crate::error::{Error, Result};
use crate::model::{
    argmax_tie_low, classify_logits_taped, encode_taped, encode_taped_from_embeddings, Dropout,
    Model, PAD_ID,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttributionMethod {
    GradXInput,
    IntegratedGradients,
}

/// What the gradient was taken of.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttributionTarget {
    /// Cross-entropy against a known label (training-time use).
    CeLoss { label: u8 },
    /// Logit of a class (inference-time use; usually the predicted class).
    Logit { class: usize },
}

/// Per-position scalar importance scores for one example under one model.
#[derive(Debug, Clone)]
pub struct AttributionMap {
    pub scores: Vec<f64>,
    pub method: AttributionMethod,
    pub target: AttributionTarget,
    /// Tape handle to the L×1 score column when the map was produced on a
    /// live tape (the differentiable path). Plain maps carry `None`.
    pub graph: Option<NodeId>,
}

impl AttributionMap {
    pub fn is_differentiable(&self) -> bool {
        self.graph.is_some()
    }
}

/// Grad×Input core: differentiate `loss` with respect to `attr_states`
/// (L×d) on the live tape, multiply elementwise by the states, and sum
/// across the hidden dimension. `pad` marks positions whose score is pinned
/// to exactly zero. The returned map carries the tape handle, so the scores
/// remain differentiable with respect to anything upstream.
pub fn grad_x_input_on(
    tape: &mut Tape,
    loss: NodeId,
    attr_states: NodeId,
    pad: &[bool],
    target: AttributionTarget,
) -> Result<AttributionMap> {
    let loss_value = tape.scalar(loss);
    if !loss_value.is_finite() {
        return Err(Error::numeric(format!(
            "attribution loss is {loss_value}; refusing to differentiate"
        )));
    }
    let len = tape.value(attr_states).nrows();
    assert_eq!(len, pad.len(), "pad mask length");

    let grads = tape.backward(loss);
    let score_col = match grads.get(attr_states) {
        Some(g) => {
            let gx = tape.mul(g, attr_states);
            let col = tape.sum_cols(gx);
            // Pin PAD rows to exactly zero (their gradient is already zero
            // by masking, this makes the invariant structural).
            let keep = Mat::from_shape_fn((len, 1), |(i, _)| if pad[i] { 0.0 } else { 1.0 });
            let keep = tape.constant(keep);
            tape.mul(col, keep)
        }
        None => tape.constant(Mat::zeros((len, 1))),
    };

    let scores: Vec<f64> = tape.value(score_col).column(0).to_vec();
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::numeric("non-finite attribution score"));
    }
    Ok(AttributionMap {
        scores,
        method: AttributionMethod::GradXInput,
        target,
        graph: Some(score_col),
    })
}

/// Standalone Grad×Input over a model in eval-mode statistics. Targets the
/// cross-entropy against `label` when given, otherwise the loss against the
/// model's own prediction. The returned map is plain (non-differentiable);
/// the differentiable variant is [`grad_x_input_on`], which operates on the
/// caller's tape.
pub fn grad_x_input(
    model: &Model,
    tokens: &[u32],
    mask: &[bool],
    label: Option<u8>,
) -> Result<AttributionMap> {
    model.check_input(tokens, mask)?;
    let label = match label {
        Some(l) => l,
        None => model.predict_label(tokens, mask)?,
    };
    let mut tape = Tape::new();
    let tp = model.inject(&mut tape);
    let enc = encode_taped(
        &model.config,
        &tp,
        &mut tape,
        tokens,
        mask,
        &mut Dropout::off(),
    );
    let logits = classify_logits_taped(&tp, &mut tape, enc.pooled);
    let ce = crate::model::ce_loss_taped(&mut tape, logits, label as usize);
    let pad = pad_positions(tokens, mask);
    let mut map = grad_x_input_on(
        &mut tape,
        ce,
        enc.attr,
        &pad,
        AttributionTarget::CeLoss { label },
    )?;
    map.graph = None;
    Ok(map)
}

/// Positions treated as absent: PAD tokens or attention-masked slots.
pub fn pad_positions(tokens: &[u32], mask: &[bool]) -> Vec<bool> {
    tokens
        .iter()
        .zip(mask)
        .map(|(&t, &m)| t == PAD_ID || !m)
        .collect()
}

/// Integrated Gradients core over an explicit scalar target builder: mean
/// of path gradients at Riemann midpoints, times (input - baseline).
pub fn integrated_gradients_core<F>(
    emb: &Mat,
    baseline: &Mat,
    steps: usize,
    mut target: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&mut Tape, NodeId) -> NodeId,
{
    if steps == 0 {
        return Err(Error::invalid("integrated gradients needs steps >= 1"));
    }
    assert_eq!(emb.dim(), baseline.dim(), "baseline shape");
    let delta = emb - baseline;
    let mut mean_grad = Mat::zeros(emb.dim());
    let mut tape = Tape::new();
    for k in 1..=steps {
        let alpha = (k as f64 - 0.5) / steps as f64;
        let point = baseline + &(alpha * &delta);
        tape.clear();
        let point_node = tape.param(point);
        let t = target(&mut tape, point_node);
        let value = tape.scalar(t);
        if !value.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite target {value} on the integration path"
            )));
        }
        let grads = tape.backward(t);
        if let Some(g) = grads.get(point_node) {
            mean_grad.scaled_add(1.0 / steps as f64, tape.value(g));
        }
    }
    let gxd = &delta * &mean_grad;
    Ok(gxd.rows().into_iter().map(|r| r.sum()).collect())
}

/// Integrated Gradients for a model input. Baseline is the PAD-token
/// embedding repeated at every position; the target is the logit of
/// `class` (the model's predicted class when omitted).
pub fn integrated_gradients(
    model: &Model,
    tokens: &[u32],
    mask: &[bool],
    steps: usize,
    class: Option<usize>,
) -> Result<AttributionMap> {
    model.check_input(tokens, mask)?;
    if steps == 0 {
        return Err(Error::invalid("integrated gradients needs steps >= 1"));
    }
    let class = match class {
        Some(c) => {
            if c >= model.config.num_labels {
                return Err(Error::invalid(format!("class {c} out of range")));
            }
            c
        }
        None => model.predict_label(tokens, mask)? as usize,
    };
    let emb = model.token_embedding_rows(tokens)?;
    let base_row = model.token_embedding_rows(&[PAD_ID])?;
    let mut baseline = Mat::zeros(emb.dim());
    for mut row in baseline.rows_mut() {
        row.assign(&base_row.row(0));
    }
    let cfg = model.config.clone();
    let scores = integrated_gradients_core(&emb, &baseline, steps, |tape, point| {
        let tp = model.inject(tape);
        let enc = encode_taped_from_embeddings(&cfg, &tp, tape, point, mask, &mut Dropout::off());
        let logits = classify_logits_taped(&tp, tape, enc.pooled);
        tape.slice_cols(logits, class, 1)
    })?;
    Ok(AttributionMap {
        scores,
        method: AttributionMethod::IntegratedGradients,
        target: AttributionTarget::Logit { class },
        graph: None,
    })
}

/// The completeness reference for one input: target at the input minus
/// target at the all-PAD-embedding baseline (eval mode).
pub fn ig_completeness_reference(
    model: &Model,
    tokens: &[u32],
    mask: &[bool],
    class: usize,
) -> Result<f64> {
    let emb = model.token_embedding_rows(tokens)?;
    let base_row = model.token_embedding_rows(&[PAD_ID])?;
    let mut baseline = Mat::zeros(emb.dim());
    for mut row in baseline.rows_mut() {
        row.assign(&base_row.row(0));
    }
    let fx = model.classify_from_embeddings(&emb, mask)?[class];
    let fb = model.classify_from_embeddings(&baseline, mask)?[class];
    Ok(fx - fb)
}

/// Mean IG score per token type over a corpus. Types with zero occurrences
/// carry 0 and are marked absent in the support mask.
pub fn mean_attribution_vector(
    model: &Model,
    corpus: &[crate::data::Example],
    steps: usize,
) -> Result<(Vec<f64>, Vec<bool>)> {
    if corpus.is_empty() {
        return Err(Error::invalid("empty corpus for mean attribution"));
    }
    let vocab = model.config.vocab_size;
    let mut sums = vec![0.0; vocab];
    let mut counts = vec![0u64; vocab];
    for e in corpus {
        let mask = e.mask();
        let map = integrated_gradients(model, &e.tokens, &mask, steps, None)?;
        for (&t, &s) in e.tokens.iter().zip(&map.scores) {
            sums[t as usize] += s;
            counts[t as usize] += 1;
        }
    }
    let support: Vec<bool> = counts.iter().map(|&c| c > 0).collect();
    let means = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    Ok((means, support))
}

/// Predicted-class helper shared by heatmap rendering.
pub fn predicted_class(model: &Model, tokens: &[u32], mask: &[bool]) -> Result<usize> {
    Ok(argmax_tie_low(&model.classify(tokens, mask)?))
}
