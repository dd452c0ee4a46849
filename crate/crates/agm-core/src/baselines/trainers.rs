//! Baseline fine-tuning loops. Every trainer shares the epoch, validation,
//! early-stopping, and logging discipline of the combined-objective trainer
//! and freezes the MLM head after warm-up.

use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::agm::{train_agm, AgmParams, AgmVariant, DomainData, FlagTally, TrainOutcome};
use crate::autograd::{NodeId, Tape};
use crate::data::Example;
use crate::error::{Error, Result};
use crate::model::{
    ce_loss_taped, classify_logits_taped, encode_taped, Dropout, Model, TapedParams,
};
use crate::rng;
use crate::train::{
    epoch_batches, validation_f1, AdamW, EarlyStopper, GradMap, Sgd, StepRecord, StopVerdict,
    TrainHyper,
};

use super::{dro_update, grl_lambda, DroState, FishConfig, IrmConfig};

/// Empirical risk minimization: the combined objective with both
/// regularizers disabled.
pub fn train_erm(
    start: &Model,
    corpora: &[DomainData],
    hyper: &TrainHyper,
    seed: u64,
) -> Result<TrainOutcome> {
    let agm = AgmParams {
        lambda1: 0.0,
        lambda2: 0.0,
        tau_high: 0.75,
    };
    train_agm(start, corpora, AgmVariant::Full, &agm, hyper, seed)
}

struct Progress {
    stopper: EarlyStopper,
    best: Model,
    val_history: Vec<f64>,
}

impl Progress {
    fn new(model: &Model, patience: usize) -> Self {
        Self {
            stopper: EarlyStopper::new(patience),
            best: model.clone(),
            val_history: Vec::new(),
        }
    }

    fn observe(&mut self, model: &Model, validation: &[Example]) -> Result<bool> {
        let f1 = validation_f1(model, validation)?;
        self.val_history.push(f1);
        Ok(match self.stopper.update(f1) {
            StopVerdict::Improved => {
                self.best = model.clone();
                false
            }
            StopVerdict::Continue => false,
            StopVerdict::Stop => true,
        })
    }

    fn into_outcome(
        self,
        log: Vec<StepRecord>,
        epochs_run: usize,
        vocab_size: usize,
    ) -> TrainOutcome {
        TrainOutcome {
            model: self.best,
            log,
            val_history: self.val_history,
            best_val_f1: self.stopper.best,
            epochs_run,
            flag_tally: FlagTally::new(vocab_size),
        }
    }
}

fn check_corpora(corpora: &[DomainData], min_domains: usize) -> Result<()> {
    if corpora.len() < min_domains {
        return Err(Error::invalid(format!(
            "need at least {min_domains} source domains, got {}",
            corpora.len()
        )));
    }
    for d in corpora {
        if d.train.is_empty() || d.validation.is_empty() {
            return Err(Error::invalid(format!(
                "domain {} has an empty train or validation split",
                d.name
            )));
        }
    }
    Ok(())
}

fn pooled_validation(corpora: &[DomainData]) -> Vec<Example> {
    corpora
        .iter()
        .flat_map(|d| d.validation.iter().cloned())
        .collect()
}

/// Mean classification loss node over a set of examples, with dropout.
fn batch_ce(
    model: &Model,
    tape: &mut Tape,
    tp: &TapedParams,
    batch: &[&Example],
    dropout_rng: &mut ChaCha8Rng,
) -> Result<(NodeId, Vec<NodeId>)> {
    let mut terms = Vec::with_capacity(batch.len());
    let mut pooled = Vec::with_capacity(batch.len());
    for e in batch {
        let attention = e.mask();
        model.check_input(&e.tokens, &attention)?;
        let mut dropout = Dropout::on(model.config.dropout, dropout_rng);
        let enc = encode_taped(&model.config, tp, tape, &e.tokens, &attention, &mut dropout);
        let logits = classify_logits_taped(tp, tape, enc.pooled);
        terms.push(ce_loss_taped(tape, logits, e.label as usize));
        pooled.push(enc.pooled);
    }
    let mut sum = terms[0];
    for &t in &terms[1..] {
        sum = tape.add(sum, t);
    }
    let mean = tape.scale(sum, 1.0 / batch.len() as f64);
    Ok((mean, pooled))
}

/// Domain-adversarial training: a domain-classification head on pooled
/// features behind the gradient reversal layer, with the published schedule
/// driven by training progress.
pub fn train_dann(
    start: &Model,
    corpora: &[DomainData],
    hyper: &TrainHyper,
    seed: u64,
) -> Result<TrainOutcome> {
    hyper.validate()?;
    check_corpora(corpora, 2)?;
    let n_domains = corpora.len();
    let mut model = start.clone();
    {
        let d = model.config.hidden_dim;
        let params = model.params_mut();
        params.insert("dom.w", crate::autograd::Mat::zeros((d, n_domains)));
        params.insert("dom.b", crate::autograd::Mat::zeros((1, n_domains)));
    }

    let train: Vec<(&Example, usize)> = corpora
        .iter()
        .enumerate()
        .flat_map(|(di, d)| d.train.iter().map(move |e| (e, di)))
        .collect();
    let validation = pooled_validation(corpora);

    let steps_per_epoch = train.len().div_ceil(hyper.batch_size);
    let total_planned = steps_per_epoch * hyper.max_epochs;
    let warmup_steps = (hyper.warmup_ratio * total_planned as f64).ceil() as usize;
    let mut opt = AdamW::new(hyper.lr, hyper.weight_decay, warmup_steps).freeze_prefix("mlm.");
    let mut shuffle_rng = rng::stream(seed, "finetune-shuffle");
    let mut dropout_rng = rng::stream(seed, "finetune-dropout");
    let mut progress = Progress::new(&model, hyper.patience);
    let mut log = Vec::new();
    let mut step = 0usize;
    let mut epochs_run = 0usize;
    let mut tape = Tape::new();

    'outer: for _epoch in 0..hyper.max_epochs {
        epochs_run += 1;
        for batch_idx in epoch_batches(train.len(), hyper.batch_size, &mut shuffle_rng) {
            let p = step as f64 / total_planned.max(1) as f64;
            let lambda_p = grl_lambda(p.min(1.0))?;
            let mut grads = GradMap::new();
            let mut ce_total = 0.0;
            let mut dom_total = 0.0;
            for chunk in batch_idx.chunks(hyper.micro_batch()) {
                tape.clear();
                let tp = model.inject(&mut tape);
                let mut terms = Vec::new();
                for &i in chunk {
                    let (e, domain_idx) = train[i];
                    let attention = e.mask();
                    model.check_input(&e.tokens, &attention)?;
                    let mut dropout = Dropout::on(model.config.dropout, &mut dropout_rng);
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

                    let reversed = tape.grad_reverse(enc.pooled, lambda_p);
                    let dw = tape.matmul(reversed, tp.id("dom.w"));
                    let dom_logits = tape.add(dw, tp.id("dom.b"));
                    let dom_ce = ce_loss_taped(&mut tape, dom_logits, domain_idx);
                    dom_total += tape.scalar(dom_ce);
                    terms.push(tape.add(ce, dom_ce));
                }
                let mut sum = terms[0];
                for &t in &terms[1..] {
                    sum = tape.add(sum, t);
                }
                let scaled = tape.scale(sum, 1.0 / batch_idx.len() as f64);
                if !tape.scalar(scaled).is_finite() {
                    return Err(Error::numeric("non-finite DANN loss; step aborted"));
                }
                let g = tape.backward(scaled);
                model.accumulate_grads(&tape, &g, &tp, 1.0, &mut grads);
            }
            opt.step(&mut model, &grads);
            step += 1;
            let ce = ce_total / batch_idx.len() as f64;
            let dom = dom_total / batch_idx.len() as f64;
            let mut rec = StepRecord::basic(step, ce, ce + dom);
            rec.extra = Some(json!({ "lambda_p": lambda_p, "domain_loss": dom }));
            log.push(rec);
        }
        if progress.observe(&model, &validation)? {
            break 'outer;
        }
    }
    Ok(progress.into_outcome(log, epochs_run, model.config.vocab_size))
}

/// Per-epoch, per-domain shuffled batch streams of equal step counts.
fn stratified_batches(
    corpora: &[DomainData],
    per_domain: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<Vec<usize>>> {
    let per_domain_batches: Vec<Vec<Vec<usize>>> = corpora
        .iter()
        .map(|d| epoch_batches(d.train.len(), per_domain, rng))
        .collect();
    let steps = per_domain_batches
        .iter()
        .map(Vec::len)
        .min()
        .unwrap_or(0);
    (0..steps)
        .map(|s| per_domain_batches.iter().map(|b| b[s].clone()).collect())
        .collect()
}

/// IRMv1: per-environment risks through a scalar dummy classifier; the
/// squared gradient at the dummy's resting value is the invariance penalty,
/// itself differentiated through to the parameters.
pub fn train_irm(
    start: &Model,
    corpora: &[DomainData],
    hyper: &TrainHyper,
    irm: &IrmConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    hyper.validate()?;
    check_corpora(corpora, 1)?;
    let n_envs = corpora.len();
    let per_domain = (hyper.batch_size / n_envs).max(1);
    let validation = pooled_validation(corpora);
    let mut model = start.clone();

    let min_train = corpora.iter().map(|d| d.train.len()).min().unwrap();
    let steps_per_epoch = min_train.div_ceil(per_domain);
    let total_planned = steps_per_epoch * hyper.max_epochs;
    let warmup_steps = (hyper.warmup_ratio * total_planned as f64).ceil() as usize;
    let mut opt = AdamW::new(hyper.lr, hyper.weight_decay, warmup_steps).freeze_prefix("mlm.");
    let mut shuffle_rng = rng::stream(seed, "finetune-shuffle");
    let mut dropout_rng = rng::stream(seed, "finetune-dropout");
    let mut progress = Progress::new(&model, hyper.patience);
    let mut log = Vec::new();
    let mut step = 0usize;
    let mut epochs_run = 0usize;
    let mut tape = Tape::new();

    'outer: for _epoch in 0..hyper.max_epochs {
        epochs_run += 1;
        for step_batches in stratified_batches(corpora, per_domain, &mut shuffle_rng) {
            step += 1;
            let applied = irm.applied_weight(step);
            tape.clear();
            let tp = model.inject(&mut tape);
            let mut risk_sum: Option<NodeId> = None;
            let mut penalty_sum: Option<NodeId> = None;
            let mut risk_value = 0.0;
            for (env, batch_idx) in step_batches.iter().enumerate() {
                let batch: Vec<&Example> =
                    batch_idx.iter().map(|&i| &corpora[env].train[i]).collect();
                let w = tape.param(crate::autograd::Mat::ones((1, 1)));
                let mut terms = Vec::new();
                for e in &batch {
                    let attention = e.mask();
                    model.check_input(&e.tokens, &attention)?;
                    let mut dropout = Dropout::on(model.config.dropout, &mut dropout_rng);
                    let enc = encode_taped(
                        &model.config,
                        &tp,
                        &mut tape,
                        &e.tokens,
                        &attention,
                        &mut dropout,
                    );
                    let logits = classify_logits_taped(&tp, &mut tape, enc.pooled);
                    let wb = tape.broadcast_to(w, 1, model.config.num_labels);
                    let scaled_logits = tape.mul(logits, wb);
                    terms.push(ce_loss_taped(&mut tape, scaled_logits, e.label as usize));
                }
                let mut sum = terms[0];
                for &t in &terms[1..] {
                    sum = tape.add(sum, t);
                }
                let risk = tape.scale(sum, 1.0 / batch.len() as f64);
                risk_value += tape.scalar(risk);
                let grads = tape.backward(risk);
                let gw = grads
                    .get(w)
                    .ok_or_else(|| Error::numeric("irm dummy scale received no gradient"))?;
                let pen = tape.mul(gw, gw);
                risk_sum = Some(match risk_sum {
                    None => risk,
                    Some(acc) => tape.add(acc, risk),
                });
                penalty_sum = Some(match penalty_sum {
                    None => pen,
                    Some(acc) => tape.add(acc, pen),
                });
            }
            let risk_sum = risk_sum.expect("at least one environment");
            let penalty_sum = penalty_sum.expect("at least one environment");
            let penalty_value = tape.scalar(penalty_sum) / n_envs as f64;
            let mean_risk = tape.scale(risk_sum, 1.0 / n_envs as f64);
            let mean_pen = tape.scale(penalty_sum, applied / n_envs as f64);
            let mut total = tape.add(mean_risk, mean_pen);
            if applied > 1.0 {
                // Keep the loss scale stable once the large penalty engages.
                total = tape.scale(total, 1.0 / applied);
            }
            let total_value = tape.scalar(total);
            if !total_value.is_finite() {
                return Err(Error::numeric("non-finite IRM loss; step aborted"));
            }
            let g = tape.backward(total);
            let mut grads = GradMap::new();
            model.accumulate_grads(&tape, &g, &tp, 1.0, &mut grads);
            opt.step(&mut model, &grads);

            let mut rec = StepRecord::basic(step, risk_value / n_envs as f64, total_value);
            rec.extra = Some(json!({ "penalty": penalty_value, "applied_weight": applied }));
            log.push(rec);
        }
        if progress.observe(&model, &validation)? {
            break 'outer;
        }
    }
    Ok(progress.into_outcome(log, epochs_run, model.config.vocab_size))
}

/// GroupDRO: exponentiated group weights over per-domain risks; the step
/// loss re-weights each group's risk by the freshly updated weight.
pub fn train_dro(
    start: &Model,
    corpora: &[DomainData],
    hyper: &TrainHyper,
    eta: f64,
    c_adj: f64,
    seed: u64,
) -> Result<TrainOutcome> {
    hyper.validate()?;
    check_corpora(corpora, 1)?;
    let n_groups = corpora.len();
    let per_domain = (hyper.batch_size / n_groups).max(1);
    let validation = pooled_validation(corpora);
    let mut model = start.clone();
    let mut state = DroState::uniform(
        corpora.iter().map(|d| d.train.len()).collect(),
        eta,
        c_adj,
    );

    let min_train = corpora.iter().map(|d| d.train.len()).min().unwrap();
    let steps_per_epoch = min_train.div_ceil(per_domain);
    let total_planned = steps_per_epoch * hyper.max_epochs;
    let warmup_steps = (hyper.warmup_ratio * total_planned as f64).ceil() as usize;
    let mut opt = AdamW::new(hyper.lr, hyper.weight_decay, warmup_steps).freeze_prefix("mlm.");
    let mut shuffle_rng = rng::stream(seed, "finetune-shuffle");
    let mut dropout_rng = rng::stream(seed, "finetune-dropout");
    let mut progress = Progress::new(&model, hyper.patience);
    let mut log = Vec::new();
    let mut step = 0usize;
    let mut epochs_run = 0usize;
    let mut tape = Tape::new();

    'outer: for _epoch in 0..hyper.max_epochs {
        epochs_run += 1;
        for step_batches in stratified_batches(corpora, per_domain, &mut shuffle_rng) {
            step += 1;
            tape.clear();
            let tp = model.inject(&mut tape);
            let mut risks = Vec::with_capacity(n_groups);
            let mut losses = Vec::with_capacity(n_groups);
            for (group, batch_idx) in step_batches.iter().enumerate() {
                let batch: Vec<&Example> = batch_idx
                    .iter()
                    .map(|&i| &corpora[group].train[i])
                    .collect();
                let (risk, _) = batch_ce(&model, &mut tape, &tp, &batch, &mut dropout_rng)?;
                losses.push(tape.scalar(risk));
                risks.push(risk);
            }
            state = dro_update(&state, &losses)?;
            let mut total: Option<NodeId> = None;
            for (g, &risk) in risks.iter().enumerate() {
                let weighted = tape.scale(risk, state.q[g]);
                total = Some(match total {
                    None => weighted,
                    Some(acc) => tape.add(acc, weighted),
                });
            }
            let total = total.expect("at least one group");
            let total_value = tape.scalar(total);
            if !total_value.is_finite() {
                return Err(Error::numeric("non-finite DRO loss; step aborted"));
            }
            let g = tape.backward(total);
            let mut grads = GradMap::new();
            model.accumulate_grads(&tape, &g, &tp, 1.0, &mut grads);
            opt.step(&mut model, &grads);

            let mean_ce = losses.iter().sum::<f64>() / n_groups as f64;
            let mut rec = StepRecord::basic(step, mean_ce, total_value);
            rec.extra = Some(json!({ "q": state.q }));
            log.push(rec);
        }
        if progress.observe(&model, &validation)? {
            break 'outer;
        }
    }
    Ok(progress.into_outcome(log, epochs_run, model.config.vocab_size))
}

/// One Reptile-style outer step: clone the parameters, run inner SGD over a
/// shuffled domain order, and move the real parameters a fraction epsilon
/// toward the adapted clone. Returns the mean inner loss.
pub fn fish_outer_step(
    model: &mut Model,
    domain_batches: &[Vec<&Example>],
    fish: &FishConfig,
    micro: usize,
    order: &[usize],
    dropout_rng: &mut ChaCha8Rng,
) -> Result<f64> {
    fish.validate()?;
    if domain_batches.is_empty() {
        return Err(Error::invalid("fish needs at least one domain batch"));
    }
    let mut clone = model.clone();
    let sgd = Sgd { lr: fish.inner_lr };
    let mut loss_sum = 0.0;
    let mut loss_count = 0usize;
    let mut tape = Tape::new();
    for &di in order {
        let batch = &domain_batches[di];
        for _ in 0..fish.inner_steps_per_domain {
            let mut grads = GradMap::new();
            for chunk in batch.chunks(micro.max(1)) {
                tape.clear();
                let tp = clone.inject(&mut tape);
                let (mean_ce, _) = batch_ce(&clone, &mut tape, &tp, chunk, dropout_rng)?;
                // Chunk means weighted into a batch mean.
                let scaled = tape.scale(mean_ce, chunk.len() as f64 / batch.len() as f64);
                loss_sum += tape.scalar(scaled);
                let g = tape.backward(scaled);
                clone.accumulate_grads(&tape, &g, &tp, 1.0, &mut grads);
            }
            loss_count += 1;
            // The MLM head stays frozen during fine-tuning.
            grads.shift_remove("mlm.w");
            grads.shift_remove("mlm.b");
            sgd.step(&mut clone, &grads);
        }
    }
    // theta <- theta + eps * (theta_tilde - theta)
    for (name, value) in model.params_mut().iter_mut() {
        let adapted = clone.params().get(name);
        ndarray::Zip::from(value)
            .and(adapted)
            .for_each(|w, &a| *w += fish.epsilon * (a - *w));
    }
    Ok(loss_sum / loss_count.max(1) as f64)
}

/// Fish gradient matching: inner/outer loop over per-domain batches.
pub fn train_fish(
    start: &Model,
    corpora: &[DomainData],
    hyper: &TrainHyper,
    fish: &FishConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    hyper.validate()?;
    fish.validate()?;
    check_corpora(corpora, 1)?;
    let validation = pooled_validation(corpora);
    let mut model = start.clone();

    let mut shuffle_rng = rng::stream(seed, "finetune-shuffle");
    let mut order_rng = rng::stream(seed, "fish-domain-order");
    let mut dropout_rng = rng::stream(seed, "finetune-dropout");
    let mut progress = Progress::new(&model, hyper.patience);
    let mut log = Vec::new();
    let mut step = 0usize;
    let mut epochs_run = 0usize;

    'outer: for _epoch in 0..hyper.max_epochs {
        epochs_run += 1;
        for step_batches in stratified_batches(corpora, hyper.batch_size, &mut shuffle_rng) {
            step += 1;
            let batches: Vec<Vec<&Example>> = step_batches
                .iter()
                .enumerate()
                .map(|(d, idx)| idx.iter().map(|&i| &corpora[d].train[i]).collect())
                .collect();
            let mut order: Vec<usize> = (0..batches.len()).collect();
            crate::data::shuffle(&mut order, &mut order_rng);
            let loss = fish_outer_step(
                &mut model,
                &batches,
                fish,
                hyper.micro_batch(),
                &order,
                &mut dropout_rng,
            )?;
            if !loss.is_finite() {
                return Err(Error::numeric("non-finite Fish loss; step aborted"));
            }
            log.push(StepRecord::basic(step, loss, loss));
        }
        if progress.observe(&model, &validation)? {
            break 'outer;
        }
    }
    Ok(progress.into_outcome(log, epochs_run, model.config.vocab_size))
}
