//! Shared fixtures for integration tests.

use agm_core::data::Example;
use agm_core::model::{Model, ModelConfig, CLS_ID};
use agm_core::train::{mlm_warmup, TrainHyper};

/// Linearly separable toy examples: token 5 marks label 1, token 6 marks
/// label 0, plus rotating filler.
pub fn sanity_corpus(n: usize) -> Vec<Example> {
    (0..n)
        .map(|i| {
            let label = (i % 2) as u8;
            let marker = if label == 1 { 5 } else { 6 };
            let filler = 7 + (i % 5) as u32;
            Example {
                id: format!("sanity-{i:06}"),
                text: String::new(),
                tokens: vec![CLS_ID, marker, filler, 7 + ((i + 2) % 5) as u32],
                label,
                domain: "sanity".into(),
            }
        })
        .collect()
}

/// Tiny model with a short MLM warm-up over the sanity corpus and a seeded
/// jitter on the (otherwise zero) classifier head.
pub fn warmed_tiny(seed: u64) -> Model {
    let mut config = ModelConfig::tiny();
    config.dropout = 0.1;
    let mut model = Model::new(config, seed).unwrap();
    let mut hyper = TrainHyper::desk_default();
    hyper.mlm_warmup_epochs = 2;
    mlm_warmup(&mut model, &sanity_corpus(24), &hyper, seed).unwrap();
    use rand::Rng;
    let mut r = agm_core::rng::stream(seed, "test-head-jitter");
    for name in ["cls.w", "cls.b"] {
        for v in model.params_mut().get_mut(name).iter_mut() {
            *v = r.random::<f64>() * 0.2 - 0.1;
        }
    }
    model
}

/// Accuracy of a model over a labeled set.
pub fn accuracy(model: &Model, examples: &[Example]) -> f64 {
    let correct = examples
        .iter()
        .filter(|e| model.predict_label(&e.tokens, &e.mask()).unwrap() == e.label)
        .count();
    correct as f64 / examples.len() as f64
}
