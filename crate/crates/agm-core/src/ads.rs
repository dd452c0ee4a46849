//! Attribution Drift Score: one minus the cosine similarity between mean
//! per-token-type attribution vectors computed on source and target data.
//! Three formulations (symmetric, directional, shared-vocabulary) and the
//! correlation study against measured generalization gaps.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attribution::mean_attribution_vector;
use crate::data::Example;
use crate::error::{Error, Result};
use crate::eval::pearson;
use crate::model::Model;

/// Default integration resolution for the attribution vectors.
pub const DEFAULT_IG_STEPS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdsFormulation {
    /// Independent models per domain.
    Symmetric,
    /// A single source model applied to both domains.
    Directional,
    /// Directional, restricted to token types occurring in both corpora.
    SharedVocab,
}

impl AdsFormulation {
    pub fn all() -> [AdsFormulation; 3] {
        [
            AdsFormulation::Symmetric,
            AdsFormulation::Directional,
            AdsFormulation::SharedVocab,
        ]
    }

    pub fn name(self) -> &'static str {
        match self {
            AdsFormulation::Symmetric => "symmetric",
            AdsFormulation::Directional => "directional",
            AdsFormulation::SharedVocab => "shared_vocab",
        }
    }
}

/// One ordered domain pair's drift score.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairScore {
    pub source: String,
    pub target: String,
    pub score: f64,
    /// Shared-token count (shared-vocabulary formulation only).
    pub support_size: Option<usize>,
}

/// Scores and the correlation against measured gaps for one formulation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdsReport {
    pub formulation: AdsFormulation,
    pub pair_scores: Vec<PairScore>,
    pub pearson_vs_delta: Option<f64>,
    /// Present when the correlation is undefined (e.g. constant gaps).
    pub pearson_error: Option<String>,
}

/// 1 - cosine similarity of two vocabulary-indexed vectors restricted to
/// `support`. Identical restrictions score exactly zero; a zero vector on
/// the support is undefined.
pub fn ads_score(v_source: &[f64], v_target: &[f64], support: &[usize]) -> Result<f64> {
    if support.is_empty() {
        return Err(Error::UndefinedScore("empty support".into()));
    }
    let u: Vec<f64> = support.iter().map(|&t| v_source[t]).collect();
    let w: Vec<f64> = support.iter().map(|&t| v_target[t]).collect();
    if u == w {
        return Ok(0.0);
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nw = w.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nw == 0.0 {
        return Err(Error::UndefinedScore(
            "zero attribution vector on the support".into(),
        ));
    }
    let dot: f64 = u.iter().zip(&w).map(|(a, b)| a * b).sum();
    let cos = (dot / (nu * nw)).clamp(-1.0, 1.0);
    Ok(1.0 - cos)
}

fn union_support(a: &[bool], b: &[bool]) -> Vec<usize> {
    a.iter()
        .zip(b)
        .enumerate()
        .filter(|(_, (&x, &y))| x || y)
        .map(|(i, _)| i)
        .collect()
}

fn intersection_support(a: &[bool], b: &[bool]) -> Vec<usize> {
    a.iter()
        .zip(b)
        .enumerate()
        .filter(|(_, (&x, &y))| x && y)
        .map(|(i, _)| i)
        .collect()
}

/// Directional ADS: the same model attributes both corpora; union support.
pub fn ads_directional(
    source_model: &Model,
    corpus_s: &[Example],
    corpus_t: &[Example],
    steps: usize,
) -> Result<f64> {
    let (vs, sup_s) = mean_attribution_vector(source_model, corpus_s, steps)?;
    let (vt, sup_t) = mean_attribution_vector(source_model, corpus_t, steps)?;
    ads_score(&vs, &vt, &union_support(&sup_s, &sup_t))
}

/// Symmetric ADS: independent models per domain; union support.
pub fn ads_symmetric(
    model_s: &Model,
    model_t: &Model,
    corpus_s: &[Example],
    corpus_t: &[Example],
    steps: usize,
) -> Result<f64> {
    let (vs, sup_s) = mean_attribution_vector(model_s, corpus_s, steps)?;
    let (vt, sup_t) = mean_attribution_vector(model_t, corpus_t, steps)?;
    ads_score(&vs, &vt, &union_support(&sup_s, &sup_t))
}

/// Shared-vocabulary ADS: directional computation restricted to token types
/// occurring at least once in both corpora. Returns the score and the
/// shared-support size.
pub fn ads_shared_vocab(
    source_model: &Model,
    corpus_s: &[Example],
    corpus_t: &[Example],
    steps: usize,
) -> Result<(f64, usize)> {
    let (vs, sup_s) = mean_attribution_vector(source_model, corpus_s, steps)?;
    let (vt, sup_t) = mean_attribution_vector(source_model, corpus_t, steps)?;
    let support = intersection_support(&sup_s, &sup_t);
    if support.is_empty() {
        return Err(Error::UndefinedScore(
            "disjoint vocabularies: shared support is empty".into(),
        ));
    }
    let score = ads_score(&vs, &vt, &support)?;
    Ok((score, support.len()))
}

/// Full study: every ordered pair of distinct domains under each
/// formulation, with the Pearson correlation against the measured gaps.
/// `deltas` maps (source, target) to the per-pair generalization gap.
pub fn ads_study(
    domain_models: &[(String, Model)],
    corpora: &[(String, Vec<Example>)],
    deltas: &BTreeMap<(String, String), f64>,
    steps: usize,
) -> Result<Vec<AdsReport>> {
    let domains: Vec<&String> = corpora.iter().map(|(n, _)| n).collect();
    let n_pairs = domains.len() * domains.len().saturating_sub(1);
    if n_pairs < 3 {
        return Err(Error::invalid(format!(
            "the correlation study needs at least 3 ordered pairs, got {n_pairs}"
        )));
    }
    let model_of = |name: &str| -> Result<&Model> {
        domain_models
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::missing(format!("no trained checkpoint for domain {name}")))
    };
    let corpus_of = |name: &str| -> &[Example] {
        corpora
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, c)| c.as_slice())
            .expect("domain iterated from corpora")
    };

    // Mean attribution vectors are reused across pairs: one per
    // (attributing model, corpus) combination.
    let mut cache: BTreeMap<(String, String), (Vec<f64>, Vec<bool>)> = BTreeMap::new();
    let mut vector_for = |model_name: &str, corpus_name: &str| -> Result<(Vec<f64>, Vec<bool>)> {
        let key = (model_name.to_string(), corpus_name.to_string());
        if let Some(v) = cache.get(&key) {
            return Ok(v.clone());
        }
        let model = model_of(model_name)?;
        let v = mean_attribution_vector(model, corpus_of(corpus_name), steps)?;
        cache.insert(key.clone(), v.clone());
        Ok(v)
    };

    let mut reports = Vec::new();
    for formulation in AdsFormulation::all() {
        let mut pair_scores = Vec::new();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for &s in &domains {
            for &t in &domains {
                if s == t {
                    continue;
                }
                let (score, support_size) = match formulation {
                    AdsFormulation::Directional => {
                        let (vs, sup_s) = vector_for(s, s)?;
                        let (vt, sup_t) = vector_for(s, t)?;
                        (ads_score(&vs, &vt, &union_support(&sup_s, &sup_t))?, None)
                    }
                    AdsFormulation::Symmetric => {
                        let (vs, sup_s) = vector_for(s, s)?;
                        let (vt, sup_t) = vector_for(t, t)?;
                        (ads_score(&vs, &vt, &union_support(&sup_s, &sup_t))?, None)
                    }
                    AdsFormulation::SharedVocab => {
                        let (vs, sup_s) = vector_for(s, s)?;
                        let (vt, sup_t) = vector_for(s, t)?;
                        let support = intersection_support(&sup_s, &sup_t);
                        if support.is_empty() {
                            return Err(Error::UndefinedScore(format!(
                                "domains {s} and {t} share no token types"
                            )));
                        }
                        (ads_score(&vs, &vt, &support)?, Some(support.len()))
                    }
                };
                if let Some(&delta) = deltas.get(&(s.clone(), t.clone())) {
                    xs.push(score);
                    ys.push(delta);
                }
                pair_scores.push(PairScore {
                    source: s.clone(),
                    target: t.clone(),
                    score,
                    support_size,
                });
            }
        }
        let (pearson_vs_delta, pearson_error) = if xs.len() < 3 {
            (
                None,
                Some(format!(
                    "only {} pairs have measured gaps; need at least 3",
                    xs.len()
                )),
            )
        } else {
            match pearson(&xs, &ys) {
                Ok(r) => (Some(r), None),
                Err(e) => (None, Some(e.to_string())),
            }
        };
        reports.push(AdsReport {
            formulation,
            pair_scores,
            pearson_vs_delta,
            pearson_error,
        });
    }
    Ok(reports)
}
