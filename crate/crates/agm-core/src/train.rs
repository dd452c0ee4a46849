//! Shared training machinery: AdamW and SGD, linear warmup, gradient
//! accumulation, early stopping, training-log records, and the MLM warm-up
//! phase that stands in for pretrained weights at desk scale.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape};
use crate::data::Example;
use crate::error::{Error, Result};
use crate::eval::macro_f1;
use crate::model::{
    is_special_token, mlm_logits_taped, mlm_loss_taped, Dropout, Model, MASK_ID,
};
use crate::rng;

/// Training hyperparameters shared by every method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub lr: f64,
    /// Effective batch size (reached via gradient accumulation).
    pub batch_size: usize,
    /// Number of micro-batches accumulated per optimizer step.
    pub accumulation: usize,
    pub warmup_ratio: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub weight_decay: f64,
    /// Epochs of MLM warm-up before fine-tuning.
    pub mlm_warmup_epochs: usize,
    /// Fraction of content positions masked during warm-up.
    pub mlm_mask_rate: f64,
}

impl TrainHyper {
    /// Desk-scale defaults: a from-scratch model needs a larger learning
    /// rate than pretrained fine-tuning.
    pub fn desk_default() -> Self {
        Self {
            lr: 5e-4,
            batch_size: 16,
            accumulation: 4,
            warmup_ratio: 0.1,
            patience: 3,
            max_epochs: 20,
            weight_decay: 0.0,
            mlm_warmup_epochs: 2,
            mlm_mask_rate: 0.15,
        }
    }

    /// The full-scale recipe (pretrained-encoder setting), selected
    /// explicitly; kept as a preset for completeness.
    pub fn full_scale() -> Self {
        Self {
            lr: 2e-5,
            batch_size: 16,
            accumulation: 4,
            warmup_ratio: 0.1,
            patience: 3,
            max_epochs: 10,
            weight_decay: 0.0,
            mlm_warmup_epochs: 0,
            mlm_mask_rate: 0.15,
        }
    }

    pub fn micro_batch(&self) -> usize {
        (self.batch_size + self.accumulation - 1) / self.accumulation.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::config("lr must be positive"));
        }
        if self.batch_size == 0 || self.accumulation == 0 {
            return Err(Error::config("batch_size and accumulation must be positive"));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(Error::config("warmup_ratio must lie in [0, 1]"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs must be positive"));
        }
        if !(0.0..1.0).contains(&self.mlm_mask_rate) || self.mlm_mask_rate <= 0.0 {
            return Err(Error::config("mlm_mask_rate must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// One fine-tuning step's loss components, as logged. Baseline trainers
/// attach method-specific extras (the GRL schedule value, the IRM penalty,
/// the DRO group weights); the combined-objective trainer leaves them out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub ce: f64,
    pub mask: f64,
    pub ccl: f64,
    pub total: f64,
    pub n_flagged: usize,
    pub n_accepted_cf: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub extra: Option<serde_json::Value>,
}

impl StepRecord {
    pub fn basic(step: usize, ce: f64, total: f64) -> Self {
        Self {
            step,
            ce,
            mask: 0.0,
            ccl: 0.0,
            total,
            n_flagged: 0,
            n_accepted_cf: 0,
            extra: None,
        }
    }
}

/// Serialize step records as line-delimited JSON.
pub fn write_log(records: &[StepRecord], path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_log(path: &std::path::Path) -> Result<Vec<StepRecord>> {
    use std::io::BufRead;
    let f = std::fs::File::open(path)
        .map_err(|e| Error::missing(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Accumulated parameter gradients keyed by name.
pub type GradMap = IndexMap<String, Mat>;

/// AdamW with linear warmup. Parameters whose names start with a frozen
/// prefix are left untouched.
pub struct AdamW {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    warmup_steps: usize,
    t: usize,
    m: GradMap,
    v: GradMap,
    frozen: Vec<String>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64, warmup_steps: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            warmup_steps,
            t: 0,
            m: GradMap::new(),
            v: GradMap::new(),
            frozen: Vec::new(),
        }
    }

    pub fn freeze_prefix(mut self, prefix: &str) -> Self {
        self.frozen.push(prefix.to_string());
        self
    }

    fn lr_at(&self, t: usize) -> f64 {
        if self.warmup_steps > 0 && t <= self.warmup_steps {
            self.lr * t as f64 / self.warmup_steps as f64
        } else {
            self.lr
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &GradMap) {
        self.t += 1;
        let lr_t = self.lr_at(self.t);
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let frozen = self.frozen.clone();
        for (name, value) in model.params_mut().iter_mut() {
            if frozen.iter().any(|p| name.starts_with(p.as_str())) {
                continue;
            }
            let zero = Mat::zeros(value.dim());
            let g = grads.get(name).unwrap_or(&zero);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Mat::zeros(value.dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Mat::zeros(value.dim()));
            ndarray::Zip::from(&mut *value)
                .and(&mut *m)
                .and(&mut *v)
                .and(g)
                .for_each(|w, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *w -= lr_t * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *w);
                });
        }
    }
}

/// Plain SGD, used by the Reptile-style inner loop.
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn step(&self, model: &mut Model, grads: &GradMap) {
        for (name, value) in model.params_mut().iter_mut() {
            if let Some(g) = grads.get(name) {
                value.scaled_add(-self.lr, g);
            }
        }
    }
}

/// Early stopping on validation macro-F1: stop after `patience` consecutive
/// non-improving validations.
pub struct EarlyStopper {
    patience: usize,
    pub best: f64,
    bad: usize,
}

pub enum StopVerdict {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::NEG_INFINITY,
            bad: 0,
        }
    }

    pub fn update(&mut self, score: f64) -> StopVerdict {
        if score > self.best {
            self.best = score;
            self.bad = 0;
            StopVerdict::Improved
        } else {
            self.bad += 1;
            if self.bad >= self.patience {
                StopVerdict::Stop
            } else {
                StopVerdict::Continue
            }
        }
    }
}

/// Deterministic epoch order: shuffled indices chunked into batches.
pub fn epoch_batches(
    n: usize,
    batch_size: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    crate::data::shuffle(&mut idx, rng);
    idx.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Eval-mode macro-F1 of a model over a labeled set.
pub fn validation_f1(model: &Model, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::invalid("empty validation set"));
    }
    let mut preds = Vec::with_capacity(examples.len());
    let mut labels = Vec::with_capacity(examples.len());
    for e in examples {
        preds.push(model.predict_label(&e.tokens, &e.mask())?);
        labels.push(e.label);
    }
    macro_f1(&preds, &labels)
}

/// Masked-language-model warm-up over a corpus: the desk-scale analog of
/// starting from a pretrained encoder. Trains the encoder and the MLM head;
/// the classifier head stays untouched. Returns per-step losses.
pub fn mlm_warmup(
    model: &mut Model,
    examples: &[Example],
    hyper: &TrainHyper,
    seed: u64,
) -> Result<Vec<f64>> {
    hyper.validate()?;
    if hyper.mlm_warmup_epochs == 0 {
        return Ok(Vec::new());
    }
    if examples.is_empty() {
        return Err(Error::invalid("empty warm-up corpus"));
    }
    use rand::Rng;
    let mut shuffle_rng = rng::stream(seed, "mlm-shuffle");
    let mut mask_rng = rng::stream(seed, "mlm-mask");
    let mut dropout_rng = rng::stream(seed, "mlm-dropout");

    let steps_per_epoch = examples.len().div_ceil(hyper.batch_size);
    let total_steps = steps_per_epoch * hyper.mlm_warmup_epochs;
    let warmup_steps = (hyper.warmup_ratio * total_steps as f64).ceil() as usize;
    let mut opt =
        AdamW::new(hyper.lr, hyper.weight_decay, warmup_steps).freeze_prefix("cls.");

    let mut losses = Vec::new();
    let mut tape = Tape::new();
    for _epoch in 0..hyper.mlm_warmup_epochs {
        for batch in epoch_batches(examples.len(), hyper.batch_size, &mut shuffle_rng) {
            let mut grads = GradMap::new();
            let mut batch_loss = 0.0;
            let mut used = 0usize;
            for chunk in batch.chunks(hyper.micro_batch()) {
                tape.clear();
                let tp = model.inject(&mut tape);
                let mut micro_losses = Vec::new();
                for &i in chunk {
                    let e = &examples[i];
                    // Mask a random subset of content positions; skip
                    // examples where nothing qualifies.
                    let candidates: Vec<usize> = e
                        .tokens
                        .iter()
                        .enumerate()
                        .filter(|(_, &t)| !is_special_token(t))
                        .map(|(p, _)| p)
                        .collect();
                    let mut positions: Vec<usize> = candidates
                        .iter()
                        .copied()
                        .filter(|_| mask_rng.random::<f64>() < hyper.mlm_mask_rate)
                        .collect();
                    if positions.is_empty() {
                        if candidates.is_empty() {
                            continue;
                        }
                        positions =
                            vec![candidates[mask_rng.random_range(0..candidates.len())]];
                    }
                    let mut masked = e.tokens.clone();
                    for &p in &positions {
                        masked[p] = MASK_ID;
                    }
                    let targets: Vec<u32> = positions.iter().map(|&p| e.tokens[p]).collect();
                    let mask = e.mask();
                    model.check_input(&masked, &mask)?;
                    let mut dropout = Dropout::on(model.config.dropout, &mut dropout_rng);
                    let enc = crate::model::encode_taped(
                        &model.config,
                        &tp,
                        &mut tape,
                        &masked,
                        &mask,
                        &mut dropout,
                    );
                    let logits = mlm_logits_taped(&tp, &mut tape, enc.hidden);
                    let loss = mlm_loss_taped(&mut tape, logits, &positions, &targets);
                    micro_losses.push(loss);
                    used += 1;
                }
                let Some(&first) = micro_losses.first() else {
                    continue;
                };
                let mut sum = first;
                for &l in &micro_losses[1..] {
                    sum = tape.add(sum, l);
                }
                let scaled = tape.scale(sum, 1.0 / batch.len() as f64);
                batch_loss += tape.scalar(scaled) * batch.len() as f64;
                let g = tape.backward(scaled);
                model.accumulate_grads(&tape, &g, &tp, 1.0, &mut grads);
            }
            if used == 0 {
                continue;
            }
            let loss = batch_loss / used as f64;
            if !loss.is_finite() {
                return Err(Error::numeric(format!("non-finite warm-up loss {loss}")));
            }
            opt.step(model, &grads);
            losses.push(loss);
        }
    }
    Ok(losses)
}
