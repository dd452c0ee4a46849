//! Scratch diagnostics: group accuracies and flag composition (not part of
//! the test suite).
use agm_core::data::{default_suite, generate_suite, DomainSpec, Example, SplitSpec};
use agm_core::eval::{run_cell, warmup_for_fold, FoldSpec, Method, MethodParams};
use agm_core::model::{Model, ModelConfig};
use agm_core::train::TrainHyper;

fn spurious_direction(spec: &DomainSpec, e: &Example) -> Option<u8> {
    for word in e.text.split_whitespace() {
        if let Some((_, d)) = spec.spurious_tokens.iter().find(|(t, _)| t == word) {
            return Some(*d);
        }
    }
    None
}

fn group_acc(model: &Model, spec: &DomainSpec, examples: &[Example]) -> (f64, f64) {
    let mut maj = (0usize, 0usize);
    let mut min = (0usize, 0usize);
    for e in examples {
        let dir = spurious_direction(spec, e).unwrap();
        let correct = model.predict_label(&e.tokens, &e.mask()).unwrap() == e.label;
        let slot = if dir == e.label { &mut maj } else { &mut min };
        slot.1 += 1;
        if correct {
            slot.0 += 1;
        }
    }
    (
        maj.0 as f64 / maj.1.max(1) as f64,
        min.0 as f64 / min.1.max(1) as f64,
    )
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let train_n: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(400);
    let seeds: Vec<u64> = args
        .get(2)
        .map(|s| s.split(',').map(|x| x.parse().unwrap()).collect())
        .unwrap_or_else(|| vec![42]);

    let split = SplitSpec {
        train: train_n,
        validation: train_n / 4,
        test: train_n / 2,
        ads_heldout: 40,
    };
    let spec = default_suite(split, 0.9);
    let suite = generate_suite(&spec, 7).unwrap();
    let config = ModelConfig::desk_default();
    let hyper = TrainHyper::desk_default();
    let params = MethodParams::default();
    let fold = FoldSpec {
        target: "shortnoisy".into(),
        sources: vec!["longform".into(), "midlength".into(), "topical".into()],
    };

    for &seed in &seeds {
        let start = warmup_for_fold(&suite.domains, &fold, &config, &hyper, seed).unwrap();
        for method in [Method::Erm, Method::AgmMaskOnly, Method::AgmRandom] {
            let t = std::time::Instant::now();
            let (cell, outcome) =
                run_cell(method, &suite.domains, &fold, &start, &hyper, &params, seed).unwrap();
            println!(
                "seed {seed} {:>13}: src {:.4} tgt {:.4} delta {:.4} epochs {} ({:.0?})",
                cell.method, cell.source_f1, cell.target_f1, cell.delta, outcome.epochs_run,
                t.elapsed()
            );
            // Group accuracies per source domain test set.
            for sname in &fold.sources {
                let dspec = spec.domains.iter().find(|d| &d.name == sname).unwrap();
                let bundle = suite.bundle(sname).unwrap();
                let (maj, min) = group_acc(&outcome.model, dspec, &bundle.test);
                print!("    {sname}: maj {maj:.3} min {min:.3}");
            }
            println!();
            // Flag composition over the final epoch.
            let tally = &outcome.flag_tally;
            let mut spurious_flagged = 0u64;
            let mut spurious_seen = 0u64;
            let mut invariant_flagged = 0u64;
            let mut invariant_seen = 0u64;
            let mut other_flagged = 0u64;
            let mut other_seen = 0u64;
            let inv: Vec<u32> = spec.domains[0]
                .invariant_tokens
                .iter()
                .filter_map(|(t, _)| suite.tokenizer.id_of(t))
                .collect();
            let spur: Vec<u32> = spec
                .domains
                .iter()
                .flat_map(|d| d.spurious_tokens.iter())
                .filter_map(|(t, _)| suite.tokenizer.id_of(t))
                .collect();
            for t in 0..outcome.model.config.vocab_size as u32 {
                let (s, f) = (tally.seen[t as usize], tally.flagged[t as usize]);
                if spur.contains(&t) {
                    spurious_seen += s;
                    spurious_flagged += f;
                } else if inv.contains(&t) {
                    invariant_seen += s;
                    invariant_flagged += f;
                } else {
                    other_seen += s;
                    other_flagged += f;
                }
            }
            println!(
                "    flag rates: spurious {:.3} invariant {:.3} other {:.3}   mask last10 {:.4}",
                spurious_flagged as f64 / spurious_seen.max(1) as f64,
                invariant_flagged as f64 / invariant_seen.max(1) as f64,
                other_flagged as f64 / other_seen.max(1) as f64,
                outcome.log.iter().rev().take(10).map(|r| r.mask).sum::<f64>() / 10.0,
            );
        }
    }
}
