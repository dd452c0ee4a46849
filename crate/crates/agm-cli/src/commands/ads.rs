//! The drift-score study end to end: per-domain single-source models,
//! scores per pair under all three formulations, per-pair transfer gaps,
//! and the correlation summary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use agm_core::ads::{ads_study, AdsReport, DEFAULT_IG_STEPS};
use agm_core::eval::macro_f1;
use agm_core::model::Model;
use agm_core::{Error, Result};

use crate::config::RunConfig;
use crate::runs::load_corpus;

pub struct AdsArgs {
    pub models_dir: PathBuf,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub ig_steps: usize,
}

pub fn run(config: &RunConfig, args: &AdsArgs) -> Result<()> {
    let (_tokenizer, domains) = load_corpus(&args.data_dir, config.model.max_seq_len)?;

    // Every domain needs a single-source checkpoint for the symmetric
    // formulation; report all missing cells at once.
    let mut models = Vec::new();
    let mut missing = Vec::new();
    for (name, _) in &domains {
        let path = args.models_dir.join(format!("{name}.ckpt"));
        if path.exists() {
            models.push((name.clone(), Model::load(&path)?));
        } else {
            missing.push(format!("{name} (expected {})", path.display()));
        }
    }
    if !missing.is_empty() {
        return Err(Error::missing(format!(
            "per-domain models required for the symmetric formulation: {}",
            missing.join(", ")
        )));
    }

    // Measured per-pair gaps from the single-source models: the source
    // model's own test F1 against its F1 on the target's test split.
    let mut deltas: BTreeMap<(String, String), f64> = BTreeMap::new();
    let mut self_f1: BTreeMap<String, f64> = BTreeMap::new();
    for (name, model) in &models {
        let test = &domains.iter().find(|(n, _)| n == name).expect("domain").1.test;
        let mut preds = Vec::new();
        let mut labels = Vec::new();
        for e in test {
            preds.push(model.predict_label(&e.tokens, &e.mask())?);
            labels.push(e.label);
        }
        self_f1.insert(name.clone(), macro_f1(&preds, &labels)?);
    }
    for (s, model) in &models {
        for (t, bundle) in &domains {
            if s == t {
                continue;
            }
            let mut preds = Vec::new();
            let mut labels = Vec::new();
            for e in &bundle.test {
                preds.push(model.predict_label(&e.tokens, &e.mask())?);
                labels.push(e.label);
            }
            let target_f1 = macro_f1(&preds, &labels)?;
            deltas.insert((s.clone(), t.clone()), (self_f1[s] - target_f1).abs());
        }
    }

    let corpora: Vec<(String, Vec<agm_core::data::Example>)> = domains
        .iter()
        .map(|(n, b)| (n.clone(), b.ads_heldout.clone()))
        .collect();
    let reports = ads_study(&models, &corpora, &deltas, args.ig_steps)?;

    std::fs::create_dir_all(&args.out_dir)?;
    std::fs::write(args.out_dir.join("ads.csv"), scores_csv(&reports))?;
    let correlations: BTreeMap<&str, Option<f64>> = reports
        .iter()
        .map(|r| (r.formulation.name(), r.pearson_vs_delta))
        .collect();
    std::fs::write(
        args.out_dir.join("correlations.json"),
        serde_json::to_string_pretty(&correlations)?,
    )?;
    for r in &reports {
        match (r.pearson_vs_delta, &r.pearson_error) {
            (Some(v), _) => println!("{}: r = {v:+.4}", r.formulation.name()),
            (None, Some(e)) => println!("{}: correlation undefined ({e})", r.formulation.name()),
            _ => {}
        }
    }
    println!("wrote {}", args.out_dir.join("ads.csv").display());
    Ok(())
}

pub fn scores_csv(reports: &[AdsReport]) -> String {
    let mut out = String::from("formulation,source,target,score,support_size\n");
    for r in reports {
        for p in &r.pair_scores {
            writeln!(
                out,
                "{},{},{},{:.6},{}",
                r.formulation.name(),
                p.source,
                p.target,
                p.score,
                p.support_size.map(|s| s.to_string()).unwrap_or_default()
            )
            .expect("write");
        }
    }
    out
}

pub fn default_ig_steps() -> usize {
    DEFAULT_IG_STEPS
}
