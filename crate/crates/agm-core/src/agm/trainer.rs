//! The AGM optimization step and fine-tuning loop.
//!
//! Per example: one training forward provides the classification loss and
//! (through a graph-building backward pass) the differentiable attribution
//! scores. Detection or random selection picks positions; counterfactuals
//! are generated under no-gradient inference; accepted pairs contribute the
//! contrastive term through a second gradient-enabled encoding. The step
//! loss combines the components and a single backward pass (second-order
//! through the attribution graph) yields parameter gradients.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::attribution::{grad_x_input_on, pad_positions, AttributionTarget};
use crate::autograd::{NodeId, Tape};
use crate::data::Example;
use crate::error::{Error, Result};
use crate::model::{
    ce_loss_taped, classify_logits_taped, encode_taped, Dropout, Model,
};
use crate::rng;
use crate::train::{
    epoch_batches, validation_f1, AdamW, EarlyStopper, GradMap, StepRecord, StopVerdict,
    TrainHyper,
};

use super::{
    detect_spurious, eligible_positions, generate_counterfactual, mask_loss, AgmParams,
    AgmVariant, FlagTally, LossBreakdown, SpuriousMask,
};

/// RNG streams consumed by one training run, in a fixed order.
pub struct StepRngs {
    pub dropout: ChaCha8Rng,
    pub selection: ChaCha8Rng,
}

impl StepRngs {
    pub fn for_run(seed: u64) -> Self {
        Self {
            dropout: rng::stream(seed, "finetune-dropout"),
            selection: rng::stream(seed, "agm-selection"),
        }
    }
}

/// Realized outcome of one optimizer step.
#[derive(Debug, Clone, Copy)]
pub struct StepOutcome {
    pub breakdown: LossBreakdown,
    pub n_flagged: usize,
    pub n_accepted_cf: usize,
}

/// One optimizer update over a batch. On a non-finite total the step
/// reports a numeric error and leaves the parameters unchanged.
#[allow(clippy::too_many_arguments)]
pub fn agm_step(
    model: &mut Model,
    opt: &mut AdamW,
    batch: &[&Example],
    variant: AgmVariant,
    agm: &AgmParams,
    hyper: &TrainHyper,
    rngs: &mut StepRngs,
    mut tally: Option<&mut FlagTally>,
) -> Result<StepOutcome> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let (lambda1, lambda2) = variant.effective_lambdas(agm.lambda1, agm.lambda2);
    let needs_selection = lambda1 > 0.0 || lambda2 > 0.0;
    let batch_len = batch.len() as f64;

    let mut grads = GradMap::new();
    let mut ce_total = 0.0;
    let mut mask_total = 0.0;
    let mut ccl_total = 0.0;
    let mut n_flagged = 0usize;
    let mut n_accepted = 0usize;

    let mut tape = Tape::new();
    for chunk in batch.chunks(hyper.micro_batch()) {
        tape.clear();
        let tp = model.inject(&mut tape);
        let mut micro_terms: Vec<NodeId> = Vec::new();

        for e in chunk {
            let attention = e.mask();
            model.check_input(&e.tokens, &attention)?;

            // Training forward: classification loss for this example.
            let mut dropout = Dropout::on(model.config.dropout, &mut rngs.dropout);
            let enc = encode_taped(
                &model.config,
                &tp,
                &mut tape,
                &e.tokens,
                &attention,
                &mut dropout,
            );
            let logits = classify_logits_taped(&tp, &mut tape, enc.pooled);
            let ce = ce_loss_taped(&mut tape, logits, e.label as usize);
            ce_total += tape.scalar(ce);
            let mut term = ce;

            if needs_selection {
                let eligible = eligible_positions(&e.tokens);
                let selected = if eligible.is_empty() {
                    SpuriousMask::empty(agm.tau_high)
                } else {
                    // Attribution under eval-mode statistics (its own
                    // gradient-enabled forward): detection stays stable
                    // under dropout, and the scores remain differentiable
                    // for the mask penalty.
                    let attr_enc = encode_taped(
                        &model.config,
                        &tp,
                        &mut tape,
                        &e.tokens,
                        &attention,
                        &mut Dropout::off(),
                    );
                    let attr_logits = classify_logits_taped(&tp, &mut tape, attr_enc.pooled);
                    let attr_ce =
                        ce_loss_taped(&mut tape, attr_logits, e.label as usize);
                    let pad = pad_positions(&e.tokens, &attention);
                    let attr = grad_x_input_on(
                        &mut tape,
                        attr_ce,
                        attr_enc.attr,
                        &pad,
                        AttributionTarget::CeLoss { label: e.label },
                    )?;
                    let detected = detect_spurious(&attr, agm.tau_high, &eligible)?;
                    let selected = if variant.guided() {
                        detected
                    } else {
                        random_selection(
                            &eligible,
                            detected.len(),
                            agm.tau_high,
                            &mut rngs.selection,
                        )
                    };
                    if let Some(t) = tally.as_deref_mut() {
                        t.record(&e.tokens, &eligible, &selected.flagged);
                    }
                    n_flagged += selected.len();

                    if lambda1 > 0.0 && !selected.is_empty() {
                        let m = mask_loss(&mut tape, &attr, &selected)?;
                        mask_total += tape.scalar(m);
                        let weighted = tape.scale(m, lambda1);
                        term = tape.add(term, weighted);
                    }
                    selected
                };

                if lambda2 > 0.0 {
                    let pair = generate_counterfactual(model, e, &selected)?;
                    if pair.accepted {
                        n_accepted += 1;
                        if !selected.is_empty() {
                            // Gradient-enabled encodings of the accepted
                            // pair, both branches, in eval-mode statistics:
                            // the alignment term measures the token
                            // replacement, not dropout noise.
                            let orig_enc = encode_taped(
                                &model.config,
                                &tp,
                                &mut tape,
                                &e.tokens,
                                &attention,
                                &mut Dropout::off(),
                            );
                            let cf_enc = encode_taped(
                                &model.config,
                                &tp,
                                &mut tape,
                                &pair.counterfactual.tokens,
                                &attention,
                                &mut Dropout::off(),
                            );
                            let ccl =
                                super::ccl_loss(&mut tape, orig_enc.pooled, cf_enc.pooled)?;
                            ccl_total += tape.scalar(ccl);
                            let weighted = tape.scale(ccl, lambda2);
                            term = tape.add(term, weighted);
                        }
                    }
                }
            }
            micro_terms.push(term);
        }

        let Some(&first) = micro_terms.first() else {
            continue;
        };
        let mut sum = first;
        for &t in &micro_terms[1..] {
            sum = tape.add(sum, t);
        }
        let scaled = tape.scale(sum, 1.0 / batch_len);
        let micro_value = tape.scalar(scaled);
        if !micro_value.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite loss {micro_value} (ce so far {ce_total}, mask {mask_total}, ccl {ccl_total}); step aborted, parameters unchanged"
            )));
        }
        let g = tape.backward(scaled);
        model.accumulate_grads(&tape, &g, &tp, 1.0, &mut grads);
    }

    let ce = ce_total / batch_len;
    let mask = mask_total / batch_len;
    let ccl = ccl_total / batch_len;
    let total = ce + lambda1 * mask + lambda2 * ccl;
    if !total.is_finite() {
        return Err(Error::numeric(format!(
            "non-finite total {total} (ce {ce}, mask {mask}, ccl {ccl}); step aborted, parameters unchanged"
        )));
    }
    opt.step(model, &grads);

    Ok(StepOutcome {
        breakdown: LossBreakdown {
            ce,
            mask,
            ccl,
            total,
            lambda1,
            lambda2,
        },
        n_flagged,
        n_accepted_cf: n_accepted,
    })
}

/// Uniform selection without replacement of `count` eligible positions.
fn random_selection(
    eligible: &[usize],
    count: usize,
    tau_high: f64,
    rng: &mut ChaCha8Rng,
) -> SpuriousMask {
    let count = count.min(eligible.len());
    let mut pool: Vec<usize> = eligible.to_vec();
    let mut flagged = Vec::with_capacity(count);
    for _ in 0..count {
        let k = rng.random_range(0..pool.len());
        flagged.push(pool.swap_remove(k));
    }
    flagged.sort_unstable();
    SpuriousMask {
        flagged,
        threshold_value: 0.0,
        tau_high,
    }
}

/// One source domain's training material.
#[derive(Debug, Clone)]
pub struct DomainData {
    pub name: String,
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
}

/// A finished training run: best-validation model plus diagnostics.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<StepRecord>,
    pub val_history: Vec<f64>,
    pub best_val_f1: f64,
    pub epochs_run: usize,
    /// Final-epoch flag bookkeeping (attribution-guided variants).
    pub flag_tally: FlagTally,
}

/// Fine-tune with the combined objective, early-stopping on combined-source
/// validation macro-F1. `start` is normally a warmed-up model so the MLM
/// refills are non-degenerate; the MLM head stays frozen here while the
/// shared encoder continues to move.
pub fn train_agm(
    start: &Model,
    corpora: &[DomainData],
    variant: AgmVariant,
    agm: &AgmParams,
    hyper: &TrainHyper,
    seed: u64,
) -> Result<TrainOutcome> {
    hyper.validate()?;
    if corpora.is_empty() {
        return Err(Error::invalid("no source domains"));
    }
    for d in corpora {
        if d.train.is_empty() || d.validation.is_empty() {
            return Err(Error::invalid(format!(
                "domain {} has an empty train or validation split",
                d.name
            )));
        }
    }
    let train: Vec<&Example> = corpora.iter().flat_map(|d| d.train.iter()).collect();
    let validation: Vec<Example> = corpora
        .iter()
        .flat_map(|d| d.validation.iter().cloned())
        .collect();

    let steps_per_epoch = train.len().div_ceil(hyper.batch_size);
    let total_planned = steps_per_epoch * hyper.max_epochs;
    let warmup_steps = (hyper.warmup_ratio * total_planned as f64).ceil() as usize;

    let mut model = start.clone();
    let mut opt = AdamW::new(hyper.lr, hyper.weight_decay, warmup_steps).freeze_prefix("mlm.");
    let mut shuffle_rng = rng::stream(seed, "finetune-shuffle");
    let mut rngs = StepRngs::for_run(seed);
    let mut stopper = EarlyStopper::new(hyper.patience);
    let mut best = model.clone();
    let mut log = Vec::new();
    let mut val_history = Vec::new();
    let mut tally = FlagTally::new(model.config.vocab_size);
    let mut step = 0usize;
    let mut epochs_run = 0usize;

    'outer: for _epoch in 0..hyper.max_epochs {
        epochs_run += 1;
        tally.reset();
        for batch_idx in epoch_batches(train.len(), hyper.batch_size, &mut shuffle_rng) {
            let batch: Vec<&Example> = batch_idx.iter().map(|&i| train[i]).collect();
            let outcome = agm_step(
                &mut model,
                &mut opt,
                &batch,
                variant,
                agm,
                hyper,
                &mut rngs,
                Some(&mut tally),
            )?;
            step += 1;
            log.push(StepRecord {
                step,
                ce: outcome.breakdown.ce,
                mask: outcome.breakdown.mask,
                ccl: outcome.breakdown.ccl,
                total: outcome.breakdown.total,
                n_flagged: outcome.n_flagged,
                n_accepted_cf: outcome.n_accepted_cf,
                extra: None,
            });
        }
        let f1 = validation_f1(&model, &validation)?;
        val_history.push(f1);
        match stopper.update(f1) {
            StopVerdict::Improved => best = model.clone(),
            StopVerdict::Continue => {}
            StopVerdict::Stop => break 'outer,
        }
    }

    Ok(TrainOutcome {
        model: best,
        log,
        val_history,
        best_val_f1: stopper.best,
        epochs_run,
        flag_tally: tally,
    })
}
