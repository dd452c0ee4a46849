//! Scratch calibration of the directional-claim grid (not part of the
//! test suite): 3 methods x 8 seeds on the short/noisy fold.
use agm_core::data::{default_suite, generate_suite, SplitSpec};
use agm_core::eval::{bootstrap_ci, run_cell, warmup_for_fold, FoldSpec, Method, MethodParams};
use agm_core::model::ModelConfig;
use agm_core::train::TrainHyper;

fn main() {
    let split = SplitSpec {
        train: 400,
        validation: 100,
        test: 200,
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
    let methods = [Method::Erm, Method::AgmMaskOnly, Method::AgmRandom];
    let mut deltas: Vec<Vec<f64>> = vec![Vec::new(); methods.len()];
    for seed in 42..=49u64 {
        let start = warmup_for_fold(&suite.domains, &fold, &config, &hyper, seed).unwrap();
        for (mi, &method) in methods.iter().enumerate() {
            let t = std::time::Instant::now();
            let (cell, _) =
                run_cell(method, &suite.domains, &fold, &start, &hyper, &params, seed).unwrap();
            println!(
                "seed {seed} {:>13}: src {:.4} tgt {:.4} delta {:.4} ({:.0?})",
                cell.method, cell.source_f1, cell.target_f1, cell.delta,
                t.elapsed()
            );
            deltas[mi].push(cell.delta);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    for (mi, &m) in methods.iter().enumerate() {
        println!("{}: mean delta {:.4} {:?}", m.name(), mean(&deltas[mi]), deltas[mi]);
    }
    let paired: Vec<f64> = deltas[0]
        .iter()
        .zip(&deltas[1])
        .map(|(e, m)| e - m)
        .collect();
    let (lo, hi) = bootstrap_ci(&paired, 10_000, 0.95, 99).unwrap();
    println!(
        "erm - mask_only paired diffs {paired:?}\n  mean {:.4} ci [{lo:.4}, {hi:.4}] halfwidth {:.4}",
        mean(&paired),
        (hi - lo) / 2.0
    );
}
