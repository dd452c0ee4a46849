//! Metrics and the zero-shot transfer harness: macro-F1, generalization gap,
//! transfer efficiency, leave-one-out folds over seeds, bootstrap confidence
//! intervals, and Pearson correlation.

mod harness;

pub use harness::{
    check_hygiene, default_seeds, evaluate_cell, fold_domain_data, leave_one_out, run_cell,
    train_method, warmup_for_fold, CellResult, DomainBundles, FoldSpec, Method, MethodParams,
    TransferReport,
};

use crate::error::{Error, Result};
use crate::rng;

/// Unweighted mean of per-class F1 over both classes. A class absent from
/// both predictions and labels contributes F1 = 0 (with a warning).
pub fn macro_f1(predictions: &[u8], labels: &[u8]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::invalid(format!(
            "macro_f1 needs equal non-empty inputs, got {} predictions and {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for class in [0u8, 1u8] {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fne = 0usize;
        for (&p, &l) in predictions.iter().zip(labels) {
            let pc = p == class;
            let lc = l == class;
            match (pc, lc) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fne += 1,
                (false, false) => {}
            }
        }
        if tp + fp + fne == 0 {
            log::warn!("class {class} absent from both predictions and labels; F1 = 0");
            continue;
        }
        let precision = if tp + fp == 0 {
            0.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let recall = if tp + fne == 0 {
            0.0
        } else {
            tp as f64 / (tp + fne) as f64
        };
        if precision + recall > 0.0 {
            total += 2.0 * precision * recall / (precision + recall);
        }
    }
    Ok(total / 2.0)
}

/// Absolute difference between source and target F1.
pub fn generalization_gap(f1_source: f64, f1_target: f64) -> f64 {
    (f1_source - f1_target).abs()
}

/// Ratio of target to source F1; above 1 means the target was easier than
/// the training mix.
pub fn transfer_efficiency(f1_source: f64, f1_target: f64) -> f64 {
    f1_target / f1_source
}

/// Percentile bootstrap over resampled means, deterministic per seed.
pub fn bootstrap_ci(values: &[f64], resamples: usize, level: f64, seed: u64) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::invalid("bootstrap over an empty sample"));
    }
    if !(0.0..1.0).contains(&level) || level <= 0.0 {
        return Err(Error::invalid(format!("confidence level {level}")));
    }
    use rand::Rng;
    let mut rng = rng::stream(seed, "bootstrap");
    let n = values.len();
    let mut means = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let mut acc = 0.0;
        for _ in 0..n {
            acc += values[rng.random_range(0..n)];
        }
        means.push(acc / n as f64);
    }
    means.sort_by(|a, b| a.partial_cmp(b).expect("finite means"));
    let alpha = (1.0 - level) / 2.0;
    Ok((percentile(&means, alpha), percentile(&means, 1.0 - alpha)))
}

/// Linear-interpolation percentile of sorted values at quantile q in [0,1].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let rank = q * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Product-moment correlation. Zero variance on either side is an error.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::invalid(format!(
            "pearson needs two equal-length samples of at least 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::UndefinedCorrelation(
            "zero variance in at least one sample".into(),
        ));
    }
    Ok(cov / (vx.sqrt() * vy.sqrt()))
}
