//! Attribution-guided masking: spurious-token detection, counterfactual
//! generation with the label-consistency filter, the mask and counterfactual
//! contrastive losses, the combined objective, and the ablation variants.

mod trainer;

pub use trainer::{agm_step, train_agm, DomainData, StepOutcome, StepRngs, TrainOutcome};

use crate::attribution::AttributionMap;
use crate::autograd::{NodeId, Tape};
use crate::data::Example;
use crate::error::{Error, Result};
use crate::eval::percentile;
use crate::model::{is_special_token, Model, MASK_ID};

/// Positions flagged as highly attributed within one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SpuriousMask {
    /// Flagged token positions, ascending. Never includes special-token
    /// positions.
    pub flagged: Vec<usize>,
    /// The realized percentile cut on |score|.
    pub threshold_value: f64,
    pub tau_high: f64,
}

impl SpuriousMask {
    pub fn empty(tau_high: f64) -> Self {
        Self {
            flagged: Vec::new(),
            threshold_value: 0.0,
            tau_high,
        }
    }

    pub fn len(&self) -> usize {
        self.flagged.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flagged.is_empty()
    }
}

/// Content positions eligible for flagging: everything that is not a
/// reserved special token (CLS, PAD, MASK, UNK).
pub fn eligible_positions(tokens: &[u32]) -> Vec<usize> {
    tokens
        .iter()
        .enumerate()
        .filter(|(_, &t)| !is_special_token(t))
        .map(|(i, _)| i)
        .collect()
}

/// Flag eligible positions whose |score| strictly exceeds the
/// linear-interpolation percentile of |scores| over the eligible set at
/// `tau_high`. An all-equal score profile flags nothing.
pub fn detect_spurious(
    attr: &AttributionMap,
    tau_high: f64,
    eligible: &[usize],
) -> Result<SpuriousMask> {
    if eligible.is_empty() {
        return Err(Error::invalid("detect_spurious needs eligible positions"));
    }
    if !(0.0 < tau_high && tau_high < 1.0) {
        return Err(Error::invalid(format!(
            "tau_high {tau_high} outside (0, 1)"
        )));
    }
    let mut magnitudes: Vec<f64> = eligible
        .iter()
        .map(|&i| {
            attr.scores
                .get(i)
                .copied()
                .map(f64::abs)
                .ok_or_else(|| Error::invalid(format!("eligible position {i} out of range")))
        })
        .collect::<Result<_>>()?;
    magnitudes.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    let threshold_value = percentile(&magnitudes, tau_high);
    let flagged = eligible
        .iter()
        .copied()
        .filter(|&i| attr.scores[i].abs() > threshold_value)
        .collect();
    Ok(SpuriousMask {
        flagged,
        threshold_value,
        tau_high,
    })
}

/// An original example, its masked-and-refilled variant, and the
/// label-consistency verdict.
#[derive(Debug, Clone)]
pub struct CounterfactualPair {
    pub original: Example,
    pub counterfactual: Example,
    pub accepted: bool,
    pub original_pred: u8,
    pub counterfactual_pred: u8,
}

/// Replace flagged positions with MASK, refill with the shared-weight MLM
/// head (greedy argmax, MASK excluded so the refill is always a real
/// token), and accept only when the base model's prediction is unchanged.
/// An empty flag set yields the identity counterfactual, accepted.
pub fn generate_counterfactual(
    model: &Model,
    example: &Example,
    mask: &SpuriousMask,
) -> Result<CounterfactualPair> {
    let attention = example.mask();
    let original_pred = model.predict_label(&example.tokens, &attention)?;
    if mask.is_empty() {
        return Ok(CounterfactualPair {
            original: example.clone(),
            counterfactual: example.clone(),
            accepted: true,
            original_pred,
            counterfactual_pred: original_pred,
        });
    }
    for &p in &mask.flagged {
        if p >= example.tokens.len() {
            return Err(Error::invalid(format!(
                "flagged position {p} outside example of length {}",
                example.tokens.len()
            )));
        }
    }

    let mut masked = example.tokens.clone();
    for &p in &mask.flagged {
        masked[p] = MASK_ID;
    }
    let logits = model.mlm_logits(&masked, &attention)?;
    let mut refilled = example.tokens.clone();
    for &p in &mask.flagged {
        refilled[p] = argmax_excluding(logits.row(p).as_slice().expect("row"), MASK_ID);
    }

    let counterfactual_pred = model.predict_label(&refilled, &attention)?;
    let counterfactual = Example {
        id: format!("{}#cf", example.id),
        text: example.text.clone(),
        tokens: refilled,
        label: example.label,
        domain: example.domain.clone(),
    };
    Ok(CounterfactualPair {
        original: example.clone(),
        counterfactual,
        accepted: original_pred == counterfactual_pred,
        original_pred,
        counterfactual_pred,
    })
}

fn argmax_excluding(logits: &[f64], excluded: u32) -> u32 {
    let mut best: Option<usize> = None;
    for (i, &v) in logits.iter().enumerate() {
        if i as u32 == excluded {
            continue;
        }
        match best {
            None => best = Some(i),
            Some(b) if v > logits[b] => best = Some(i),
            _ => {}
        }
    }
    best.expect("vocabulary larger than the excluded id") as u32
}

/// Mean squared attribution over the flagged set, as a tape node (so its
/// gradient flows back into the parameters through the attribution graph).
/// An empty flag set contributes exactly zero.
pub fn mask_loss(tape: &mut Tape, attr: &AttributionMap, mask: &SpuriousMask) -> Result<NodeId> {
    if mask.is_empty() {
        return Ok(tape.scalar_const(0.0));
    }
    let col = attr.graph.ok_or_else(|| {
        Error::NotDifferentiable(
            "mask loss needs an attribution map produced on a live tape".into(),
        )
    })?;
    let picked = tape.gather_rows(col, &mask.flagged);
    let sq = tape.mul(picked, picked);
    let sum = tape.sum_all(sq);
    Ok(tape.scale(sum, 1.0 / mask.flagged.len() as f64))
}

/// Squared Euclidean distance between two pooled representations (sum over
/// dimensions, not mean); gradients flow through both branches.
pub fn ccl_loss(tape: &mut Tape, z: NodeId, z_prime: NodeId) -> Result<NodeId> {
    let (a, b) = (tape.value(z).dim(), tape.value(z_prime).dim());
    if a != b {
        return Err(Error::DimensionMismatch(format!(
            "pooled representations {a:?} vs {b:?}"
        )));
    }
    let diff = tape.sub(z, z_prime);
    let sq = tape.mul(diff, diff);
    Ok(tape.sum_all(sq))
}

/// Value-level counterpart of [`ccl_loss`] for reporting and tests.
pub fn ccl_loss_value(z: &[f64], z_prime: &[f64]) -> Result<f64> {
    if z.len() != z_prime.len() {
        return Err(Error::DimensionMismatch(format!(
            "pooled representations {} vs {}",
            z.len(),
            z_prime.len()
        )));
    }
    Ok(z.iter()
        .zip(z_prime)
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

/// Ablation variants of the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgmVariant {
    /// Both auxiliary losses, attribution-guided selection.
    Full,
    /// Mask loss only (lambda2 = 0); no counterfactual generation.
    MaskOnly,
    /// CCL only (lambda1 = 0), counterfactual positions chosen uniformly at
    /// random (same count as detection would flag).
    NoMask,
    /// Both losses, uniform-random selection replacing attribution guidance.
    RandomMask,
}

impl AgmVariant {
    pub fn guided(self) -> bool {
        matches!(self, AgmVariant::Full | AgmVariant::MaskOnly)
    }

    pub fn effective_lambdas(self, lambda1: f64, lambda2: f64) -> (f64, f64) {
        match self {
            AgmVariant::Full => (lambda1, lambda2),
            AgmVariant::MaskOnly => (lambda1, 0.0),
            AgmVariant::NoMask => (0.0, lambda2),
            AgmVariant::RandomMask => (lambda1, lambda2),
        }
    }
}

/// Regularizer weights and the detection percentile.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AgmParams {
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau_high: f64,
}

impl Default for AgmParams {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 0.1,
            tau_high: 0.75,
        }
    }
}

/// One step's realized loss components; `total` follows the combined
/// objective exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub mask: f64,
    pub ccl: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl LossBreakdown {
    pub fn accounting_error(&self) -> f64 {
        (self.total - (self.ce + self.lambda1 * self.mask + self.lambda2 * self.ccl)).abs()
    }
}

/// Occurrence bookkeeping: how often each token type was seen at an
/// eligible position and how often it was flagged (final epoch).
#[derive(Debug, Clone, Default)]
pub struct FlagTally {
    pub seen: Vec<u64>,
    pub flagged: Vec<u64>,
}

impl FlagTally {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            seen: vec![0; vocab_size],
            flagged: vec![0; vocab_size],
        }
    }

    pub fn reset(&mut self) {
        self.seen.fill(0);
        self.flagged.fill(0);
    }

    pub fn record(&mut self, tokens: &[u32], eligible: &[usize], flagged: &[usize]) {
        for &p in eligible {
            self.seen[tokens[p] as usize] += 1;
        }
        for &p in flagged {
            self.flagged[tokens[p] as usize] += 1;
        }
    }

    /// Token ids flagged at least once but also left unflagged at least
    /// once: context-dependent selections.
    pub fn context_dependent_tokens(&self) -> Vec<u32> {
        self.seen
            .iter()
            .zip(&self.flagged)
            .enumerate()
            .filter(|(_, (&seen, &flagged))| flagged > 0 && flagged < seen)
            .map(|(t, _)| t as u32)
            .collect()
    }
}
