//! Domain-generalization baselines over the same encoder: ERM, DANN (domain
//! classifier behind a gradient reversal layer), IRMv1, GroupDRO, and Fish
//! gradient matching. All share the tokenizer, seeds, hyperparameters, and
//! evaluation harness with the combined-objective trainer.

mod trainers;

pub use trainers::{fish_outer_step, train_dann, train_dro, train_erm, train_fish, train_irm};

use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape};
use crate::error::{Error, Result};

/// GRL schedule value at training progress p in [0, 1]:
/// 2 / (1 + exp(-10 p)) - 1.
pub fn grl_lambda(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("progress {p} outside [0, 1]")));
    }
    Ok(2.0 / (1.0 + (-10.0 * p).exp()) - 1.0)
}

/// IRMv1 dummy-classifier penalty: for each environment, the squared
/// gradient at w = 1 of the environment risk under logits scaled by the
/// scalar w, summed over environments. Each environment is a list of
/// (logits, label) rows.
pub fn irm_penalty(envs: &[(Vec<Vec<f64>>, Vec<u8>)]) -> Result<f64> {
    if envs.is_empty() {
        return Err(Error::invalid("irm penalty needs at least one environment"));
    }
    let mut penalty = 0.0;
    for (logits, labels) in envs {
        if logits.len() != labels.len() || logits.is_empty() {
            return Err(Error::invalid(
                "environment logits and labels must be equal-length and non-empty",
            ));
        }
        let mut tape = Tape::new();
        let w = tape.param(Mat::ones((1, 1)));
        let mut risk = None;
        for (row, &label) in logits.iter().zip(labels) {
            let l = tape.constant(
                Mat::from_shape_vec((1, row.len()), row.clone())
                    .map_err(|e| Error::invalid(e.to_string()))?,
            );
            let wb = tape.broadcast_to(w, 1, row.len());
            let scaled = tape.mul(l, wb);
            let ce = crate::model::ce_loss_taped(&mut tape, scaled, label as usize);
            risk = Some(match risk {
                None => ce,
                Some(acc) => tape.add(acc, ce),
            });
        }
        let risk = tape.scale(risk.expect("non-empty env"), 1.0 / logits.len() as f64);
        let grads = tape.backward(risk);
        let gw = grads
            .get(w)
            .map(|g| tape.scalar(g))
            .unwrap_or(0.0);
        penalty += gw * gw;
    }
    Ok(penalty)
}

/// Exponentiated-gradient state for GroupDRO.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroState {
    /// Group weights; positive, summing to one.
    pub q: Vec<f64>,
    pub eta: f64,
    /// Size adjustment coefficient C.
    pub c_adj: f64,
    pub group_sizes: Vec<usize>,
}

impl DroState {
    pub fn uniform(group_sizes: Vec<usize>, eta: f64, c_adj: f64) -> Self {
        let n = group_sizes.len();
        Self {
            q: vec![1.0 / n as f64; n],
            eta,
            c_adj,
            group_sizes,
        }
    }
}

/// One multiplicative-weights update:
/// q_g <- q_g * exp(eta * (loss_g + C / sqrt(n_g))), then renormalize.
pub fn dro_update(state: &DroState, per_group_losses: &[f64]) -> Result<DroState> {
    if per_group_losses.len() != state.q.len() {
        return Err(Error::invalid(format!(
            "{} losses for {} groups",
            per_group_losses.len(),
            state.q.len()
        )));
    }
    if per_group_losses.iter().any(|l| !l.is_finite()) {
        return Err(Error::numeric("non-finite group loss in DRO update"));
    }
    let mut q: Vec<f64> = state
        .q
        .iter()
        .zip(per_group_losses)
        .zip(&state.group_sizes)
        .map(|((&q, &loss), &n)| {
            let adjusted = loss + state.c_adj / (n as f64).sqrt();
            q * (state.eta * adjusted).exp()
        })
        .collect();
    let sum: f64 = q.iter().sum();
    if !sum.is_finite() || sum <= 0.0 {
        return Err(Error::numeric(format!("degenerate DRO normalizer {sum}")));
    }
    for v in &mut q {
        *v /= sum;
    }
    Ok(DroState {
        q,
        eta: state.eta,
        c_adj: state.c_adj,
        group_sizes: state.group_sizes.clone(),
    })
}

/// IRMv1 recipe: penalty weight and warmup. Before `warmup_steps` the
/// applied weight is 1.0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IrmConfig {
    pub penalty_weight: f64,
    pub warmup_steps: usize,
}

impl IrmConfig {
    /// Full-scale recipe: lambda 100, 500 warmup steps.
    pub fn full_scale() -> Self {
        Self {
            penalty_weight: 100.0,
            warmup_steps: 500,
        }
    }

    /// Desk-scale default shortens the warmup to 50 steps.
    pub fn desk_default() -> Self {
        Self {
            penalty_weight: 100.0,
            warmup_steps: 50,
        }
    }

    pub fn applied_weight(&self, step: usize) -> f64 {
        if step <= self.warmup_steps {
            1.0
        } else {
            self.penalty_weight
        }
    }
}

/// Reptile-style inner/outer recipe for Fish.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FishConfig {
    pub inner_lr: f64,
    pub inner_steps_per_domain: usize,
    /// Meta step size in (0, 1].
    pub epsilon: f64,
}

impl FishConfig {
    /// The stated inner learning rate; meta step and inner step count are
    /// presets (the recipe names only the inner learning rate).
    pub fn full_scale() -> Self {
        Self {
            inner_lr: 1e-4,
            inner_steps_per_domain: 1,
            epsilon: 0.5,
        }
    }

    /// From-scratch desk models need a larger inner learning rate, like
    /// every other trainer here.
    pub fn desk_default() -> Self {
        Self {
            inner_lr: 5e-4,
            inner_steps_per_domain: 1,
            epsilon: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.inner_lr <= 0.0 {
            return Err(Error::config("fish inner_lr must be positive"));
        }
        if !(0.0 < self.epsilon && self.epsilon <= 1.0) {
            return Err(Error::config("fish epsilon must lie in (0, 1]"));
        }
        if self.inner_steps_per_domain == 0 {
            return Err(Error::config("fish needs at least one inner step"));
        }
        Ok(())
    }
}
