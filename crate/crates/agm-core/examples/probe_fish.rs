//! Scratch calibration probe (not part of the test suite).
use agm_core::baselines::{fish_outer_step, FishConfig};
use agm_core::data::Example;
use agm_core::model::{Model, ModelConfig, CLS_ID};
use agm_core::train::{mlm_warmup, TrainHyper};

fn sanity_corpus(n: usize) -> Vec<Example> {
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

fn main() {
    let mut config = ModelConfig::tiny();
    config.dropout = 0.1;
    let mut model = Model::new(config, 37).unwrap();
    let mut h = TrainHyper::desk_default();
    h.mlm_warmup_epochs = 2;
    mlm_warmup(&mut model, &sanity_corpus(24), &h, 37).unwrap();
    use rand::Rng;
    let mut r = agm_core::rng::stream(37, "test-head-jitter");
    for name in ["cls.w", "cls.b"] {
        for v in model.params_mut().get_mut(name).iter_mut() {
            *v = r.random::<f64>() * 0.2 - 0.1;
        }
    }

    let train = sanity_corpus(50);
    let val = sanity_corpus(10);
    let retag = |examples: Vec<Example>, name: &str| -> Vec<Example> {
        examples
            .into_iter()
            .map(|mut e| {
                e.id = format!("{name}-{}", e.id);
                e.domain = name.into();
                e
            })
            .collect()
    };
    let fish_corpora: Vec<agm_core::agm::DomainData> = (0..2)
        .map(|i| {
            let name = format!("copy{i}");
            agm_core::agm::DomainData {
                name: name.clone(),
                train: retag(train.clone(), &name),
                validation: retag(val.clone(), &name),
            }
        })
        .collect();
    let all: Vec<Example> = fish_corpora
        .iter()
        .flat_map(|d| d.train.iter().cloned())
        .collect();
    for lr in [0.7, 1.0, 1.4] {
        for eps in [0.5, 1.0] {
            let fish = FishConfig {
                inner_lr: lr,
                inner_steps_per_domain: 1,
                epsilon: eps,
            };
            let mut fit = None;
            for cap in [4usize, 8, 12, 16, 20, 24, 28, 32] {
                let mut hh = TrainHyper::desk_default();
                hh.max_epochs = cap;
                hh.patience = cap;
                let out =
                    agm_core::baselines::train_fish(&model, &fish_corpora, &hh, &fish, 42).unwrap();
                let acc = all
                    .iter()
                    .filter(|e| {
                        out.model.predict_label(&e.tokens, &e.mask()).unwrap() == e.label
                    })
                    .count() as f64
                    / all.len() as f64;
                if acc == 1.0 {
                    fit = Some(cap);
                    break;
                }
            }
            println!("fish lr={lr} eps={eps}: fits at {fit:?} epochs");
        }
    }
}
