//! Strict zero-shot leave-one-out transfer: train on the union of all
//! source-domain train splits, early-stop on their pooled validation
//! splits, and evaluate on the held-out target's test split, which never
//! touches training. Disjointness of target-test ids from all training ids
//! is machine-checked on every cell.

use serde::{Deserialize, Serialize};

use crate::agm::{train_agm, AgmParams, AgmVariant, DomainData, TrainOutcome};
use crate::baselines::{
    train_dann, train_dro, train_erm, train_fish, train_irm, FishConfig, IrmConfig,
};
use crate::data::{Example, SplitBundle};
use crate::error::{Error, Result};
use crate::eval::{bootstrap_ci, generalization_gap, macro_f1, transfer_efficiency};
use crate::model::{Model, ModelConfig};
use crate::train::{mlm_warmup, TrainHyper};

/// Trainable methods, as named on the command line and in result files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Erm,
    Dann,
    Irm,
    Dro,
    Fish,
    AgmFull,
    AgmMaskOnly,
    AgmNoMask,
    AgmRandom,
}

impl Method {
    pub fn all() -> [Method; 9] {
        [
            Method::Erm,
            Method::Dann,
            Method::Irm,
            Method::Dro,
            Method::Fish,
            Method::AgmFull,
            Method::AgmMaskOnly,
            Method::AgmNoMask,
            Method::AgmRandom,
        ]
    }

    pub fn parse(name: &str) -> Result<Method> {
        match name {
            "erm" => Ok(Method::Erm),
            "dann" => Ok(Method::Dann),
            "irm" => Ok(Method::Irm),
            "dro" => Ok(Method::Dro),
            "fish" => Ok(Method::Fish),
            "agm_full" => Ok(Method::AgmFull),
            "agm_mask_only" => Ok(Method::AgmMaskOnly),
            "agm_no_mask" => Ok(Method::AgmNoMask),
            "agm_random" => Ok(Method::AgmRandom),
            other => Err(Error::invalid(format!("unknown method {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Erm => "erm",
            Method::Dann => "dann",
            Method::Irm => "irm",
            Method::Dro => "dro",
            Method::Fish => "fish",
            Method::AgmFull => "agm_full",
            Method::AgmMaskOnly => "agm_mask_only",
            Method::AgmNoMask => "agm_no_mask",
            Method::AgmRandom => "agm_random",
        }
    }

    pub fn agm_variant(self) -> Option<AgmVariant> {
        match self {
            Method::AgmFull => Some(AgmVariant::Full),
            Method::AgmMaskOnly => Some(AgmVariant::MaskOnly),
            Method::AgmNoMask => Some(AgmVariant::NoMask),
            Method::AgmRandom => Some(AgmVariant::RandomMask),
            _ => None,
        }
    }

    pub fn min_source_domains(self) -> usize {
        match self {
            Method::Dann => 2,
            _ => 1,
        }
    }
}

/// Per-method knobs beyond the shared hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodParams {
    pub agm: AgmParams,
    pub irm: IrmConfig,
    pub fish: FishConfig,
    pub dro_eta: f64,
    pub dro_c: f64,
}

impl Default for MethodParams {
    fn default() -> Self {
        Self {
            agm: AgmParams::default(),
            irm: IrmConfig::desk_default(),
            fish: FishConfig::desk_default(),
            dro_eta: 0.01,
            dro_c: 1.5,
        }
    }
}

/// One transfer fold: the held-out target and the source domains.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub target: String,
    pub sources: Vec<String>,
}

impl FoldSpec {
    /// Leave-one-out folds over a domain list.
    pub fn leave_one_out(domains: &[String]) -> Vec<FoldSpec> {
        domains
            .iter()
            .map(|target| FoldSpec {
                target: target.clone(),
                sources: domains.iter().filter(|d| *d != target).cloned().collect(),
            })
            .collect()
    }
}

/// One (method, fold, seed) evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub method: String,
    pub target: String,
    pub seed: u64,
    pub source_f1: f64,
    pub target_f1: f64,
    pub delta: f64,
    pub te: f64,
}

/// Aggregated transfer outcome for one (method, target) over all seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub method: String,
    pub target_domain: String,
    pub seeds: Vec<u64>,
    pub source_f1: Vec<f64>,
    pub target_f1: Vec<f64>,
    pub delta: Vec<f64>,
    pub te: Vec<f64>,
    pub delta_ci: (f64, f64),
}

impl TransferReport {
    pub fn from_cells(method: &str, target: &str, cells: &[CellResult]) -> Result<Self> {
        if cells.is_empty() {
            return Err(Error::invalid("no cells for transfer report"));
        }
        let delta: Vec<f64> = cells.iter().map(|c| c.delta).collect();
        let delta_ci = bootstrap_ci(&delta, 10_000, 0.95, fnv(method) ^ fnv(target))?;
        Ok(Self {
            method: method.to_string(),
            target_domain: target.to_string(),
            seeds: cells.iter().map(|c| c.seed).collect(),
            source_f1: cells.iter().map(|c| c.source_f1).collect(),
            target_f1: cells.iter().map(|c| c.target_f1).collect(),
            delta,
            te: cells.iter().map(|c| c.te).collect(),
            delta_ci,
        })
    }

    pub fn mean_delta(&self) -> f64 {
        self.delta.iter().sum::<f64>() / self.delta.len() as f64
    }
}

fn fnv(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Named domains with split bundles, as the harness consumes them.
pub type DomainBundles<'a> = &'a [(String, SplitBundle)];

fn bundle_of<'a>(domains: DomainBundles<'a>, name: &str) -> Result<&'a SplitBundle> {
    domains
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, b)| b)
        .ok_or_else(|| Error::invalid(format!("unknown domain {name:?}")))
}

/// Fresh model + MLM warm-up over the fold's combined source train splits,
/// then a small random re-initialization of the classification head (a
/// freshly attached head over a warmed encoder, as in pretrain-then-
/// fine-tune practice; it also makes step-one attribution non-degenerate).
/// Deterministic per (sources, config, hyper, seed); shared by every method
/// so all trainers start from the same encoder.
pub fn warmup_for_fold(
    domains: DomainBundles,
    fold: &FoldSpec,
    config: &ModelConfig,
    hyper: &TrainHyper,
    seed: u64,
) -> Result<Model> {
    let mut model = Model::new(config.clone(), seed)?;
    let mut corpus = Vec::new();
    for s in &fold.sources {
        corpus.extend(bundle_of(domains, s)?.train.iter().cloned());
    }
    mlm_warmup(&mut model, &corpus, hyper, seed)?;
    use rand_distr::Distribution;
    let normal = rand_distr::Normal::new(0.0, 0.02).expect("valid normal");
    let mut rng = crate::rng::stream(seed, "classifier-head-init");
    for name in ["cls.w", "cls.b"] {
        for v in model.params_mut().get_mut(name).iter_mut() {
            *v = normal.sample(&mut rng);
        }
    }
    Ok(model)
}

/// Assemble per-source training material for a fold.
pub fn fold_domain_data(domains: DomainBundles, fold: &FoldSpec) -> Result<Vec<DomainData>> {
    fold.sources
        .iter()
        .map(|s| {
            let b = bundle_of(domains, s)?;
            Ok(DomainData {
                name: s.clone(),
                train: b.train.clone(),
                validation: b.validation.clone(),
            })
        })
        .collect()
}

/// The strict zero-shot guarantee, machine-checked: no example id used for
/// training or early stopping may appear in the target's test split.
pub fn check_hygiene(corpora: &[DomainData], target_test: &[Example]) -> Result<()> {
    let mut training_ids = std::collections::HashSet::new();
    for d in corpora {
        for e in d.train.iter().chain(d.validation.iter()) {
            training_ids.insert(e.id.as_str());
        }
    }
    for e in target_test {
        if training_ids.contains(e.id.as_str()) {
            return Err(Error::invalid(format!(
                "zero-shot violation: target test id {} was used in training",
                e.id
            )));
        }
    }
    Ok(())
}

/// Dispatch one training run for a method.
pub fn train_method(
    method: Method,
    start: &Model,
    corpora: &[DomainData],
    hyper: &TrainHyper,
    params: &MethodParams,
    seed: u64,
) -> Result<TrainOutcome> {
    if corpora.len() < method.min_source_domains() {
        return Err(Error::invalid(format!(
            "{} needs at least {} source domains",
            method.name(),
            method.min_source_domains()
        )));
    }
    match method {
        Method::Erm => train_erm(start, corpora, hyper, seed),
        Method::Dann => train_dann(start, corpora, hyper, seed),
        Method::Irm => train_irm(start, corpora, hyper, &params.irm, seed),
        Method::Dro => train_dro(start, corpora, hyper, params.dro_eta, params.dro_c, seed),
        Method::Fish => train_fish(start, corpora, hyper, &params.fish, seed),
        m => {
            let variant = m.agm_variant().expect("agm method");
            train_agm(start, corpora, variant, &params.agm, hyper, seed)
        }
    }
}

/// Macro-F1 of a model over a labeled set.
fn test_f1(model: &Model, examples: &[Example]) -> Result<f64> {
    let mut preds = Vec::with_capacity(examples.len());
    let mut labels = Vec::with_capacity(examples.len());
    for e in examples {
        preds.push(model.predict_label(&e.tokens, &e.mask())?);
        labels.push(e.label);
    }
    macro_f1(&preds, &labels)
}

/// Evaluate a trained model on one fold: size-weighted macro-F1 over the
/// source domains' test splits versus macro-F1 on the target's test split.
pub fn evaluate_cell(
    model: &Model,
    domains: DomainBundles,
    fold: &FoldSpec,
    method: Method,
    seed: u64,
) -> Result<CellResult> {
    let mut weighted = 0.0;
    let mut total = 0usize;
    for s in &fold.sources {
        let test = &bundle_of(domains, s)?.test;
        if test.is_empty() {
            return Err(Error::invalid(format!(
                "domain {s} has an empty test split"
            )));
        }
        weighted += test_f1(model, test)? * test.len() as f64;
        total += test.len();
    }
    let source_f1 = weighted / total as f64;
    let target_test = &bundle_of(domains, &fold.target)?.test;
    let target_f1 = test_f1(model, target_test)?;
    Ok(CellResult {
        method: method.name().to_string(),
        target: fold.target.clone(),
        seed,
        source_f1,
        target_f1,
        delta: generalization_gap(source_f1, target_f1),
        te: transfer_efficiency(source_f1, target_f1),
    })
}

/// Train and evaluate one grid cell from a shared warmed-up start model.
/// Hygiene (target-test ids disjoint from all training ids) is checked
/// before any training happens.
pub fn run_cell(
    method: Method,
    domains: DomainBundles,
    fold: &FoldSpec,
    start: &Model,
    hyper: &TrainHyper,
    params: &MethodParams,
    seed: u64,
) -> Result<(CellResult, TrainOutcome)> {
    let corpora = fold_domain_data(domains, fold)?;
    let target_test = &bundle_of(domains, &fold.target)?.test;
    check_hygiene(&corpora, target_test)?;
    let outcome = train_method(method, start, &corpora, hyper, params, seed)?;
    let cell = evaluate_cell(&outcome.model, domains, fold, method, seed)?;
    Ok((cell, outcome))
}

/// The reference seed list (eight seeds, 42 through 49).
pub fn default_seeds() -> Vec<u64> {
    (42..=49).collect()
}

/// Full leave-one-out protocol for one method: every domain takes a turn as
/// the zero-shot target, trained over every seed. Warm-up is recomputed per
/// (fold, seed); callers orchestrating several methods should prefer
/// [`run_cell`] with a cached warm-up so all methods share their encoder.
pub fn leave_one_out(
    method_name: &str,
    domains: DomainBundles,
    seeds: &[u64],
    config: &ModelConfig,
    hyper: &TrainHyper,
    params: &MethodParams,
) -> Result<Vec<TransferReport>> {
    let method = Method::parse(method_name)?;
    if domains.len() < 2 {
        return Err(Error::invalid("leave-one-out needs at least 2 domains"));
    }
    if seeds.is_empty() {
        return Err(Error::invalid("no seeds"));
    }
    let names: Vec<String> = domains.iter().map(|(n, _)| n.clone()).collect();
    let mut reports = Vec::new();
    for fold in FoldSpec::leave_one_out(&names) {
        let mut cells = Vec::new();
        for &seed in seeds {
            let start = warmup_for_fold(domains, &fold, config, hyper, seed)?;
            let (cell, _) = run_cell(method, domains, &fold, &start, hyper, params, seed)?;
            cells.push(cell);
        }
        reports.push(TransferReport::from_cells(
            method.name(),
            &fold.target,
            &cells,
        )?);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_domains_make_four_folds() {
        let names: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
        let folds = FoldSpec::leave_one_out(&names);
        assert_eq!(folds.len(), 4);
        for f in &folds {
            assert_eq!(f.sources.len(), 3);
            assert!(!f.sources.contains(&f.target));
        }
    }

    #[test]
    fn unknown_method_is_an_argument_error() {
        assert!(Method::parse("gradient_descent_9000").is_err());
        for m in Method::all() {
            assert_eq!(Method::parse(m.name()).unwrap(), m);
        }
    }

    #[test]
    fn hygiene_check_catches_leaks() {
        use crate::model::CLS_ID;
        let mk = |id: &str| Example {
            id: id.into(),
            text: String::new(),
            tokens: vec![CLS_ID, 5],
            label: 0,
            domain: "d".into(),
        };
        let corpora = vec![DomainData {
            name: "d".into(),
            train: vec![mk("a"), mk("b")],
            validation: vec![mk("c")],
        }];
        check_hygiene(&corpora, &[mk("x")]).unwrap();
        assert!(check_hygiene(&corpora, &[mk("b")]).is_err());
        assert!(check_hygiene(&corpora, &[mk("c")]).is_err());
    }

    #[test]
    fn transfer_report_keeps_per_seed_values() {
        let cells: Vec<CellResult> = (0..4)
            .map(|i| CellResult {
                method: "erm".into(),
                target: "t".into(),
                seed: 42 + i,
                source_f1: 0.9,
                target_f1: 0.8 - 0.01 * i as f64,
                delta: 0.1 + 0.01 * i as f64,
                te: 0.9,
            })
            .collect();
        let r = TransferReport::from_cells("erm", "t", &cells).unwrap();
        assert_eq!(r.delta.len(), 4);
        assert_eq!(r.seeds, vec![42, 43, 44, 45]);
        // Both aggregations are recomputable from the stored values.
        let mean_delta = r.mean_delta();
        let mean_src = r.source_f1.iter().sum::<f64>() / 4.0;
        let mean_tgt = r.target_f1.iter().sum::<f64>() / 4.0;
        // No per-seed sign flip here, so the aggregations agree.
        assert!((mean_delta - (mean_src - mean_tgt).abs()) < 1e-12);
        assert!(r.delta_ci.0 <= mean_delta && mean_delta <= r.delta_ci.1);
    }

    #[test]
    fn aggregation_orders_differ_when_signs_flip() {
        // One seed transfers up, the other down: the mean per-seed gap
        // (0.2) no longer equals the gap of the means (0.0).
        let cells: Vec<CellResult> = [(0.9, 0.7), (0.7, 0.9)]
            .iter()
            .enumerate()
            .map(|(i, &(s, t))| CellResult {
                method: "erm".into(),
                target: "t".into(),
                seed: i as u64,
                source_f1: s,
                target_f1: t,
                delta: (s - t as f64).abs(),
                te: t / s,
            })
            .collect();
        let r = TransferReport::from_cells("erm", "t", &cells).unwrap();
        let mean_delta = r.mean_delta();
        let mean_src = r.source_f1.iter().sum::<f64>() / 2.0;
        let mean_tgt = r.target_f1.iter().sum::<f64>() / 2.0;
        assert!((mean_delta - 0.2).abs() < 1e-12);
        assert!((mean_src - mean_tgt).abs() < 1e-12);
    }
}
