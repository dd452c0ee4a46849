//! Scratch calibration probe for the transfer grid (not part of the suite).
use std::time::Instant;

use agm_core::data::{default_suite, generate_suite, SplitSpec};
use agm_core::eval::{run_cell, warmup_for_fold, FoldSpec, Method, MethodParams};
use agm_core::model::ModelConfig;
use agm_core::train::TrainHyper;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let train_n: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(400);
    let seeds: Vec<u64> = args
        .get(2)
        .map(|s| s.split(',').map(|x| x.parse().unwrap()).collect())
        .unwrap_or_else(|| vec![42, 43]);

    let split = SplitSpec {
        train: train_n,
        validation: train_n / 4,
        test: train_n / 2,
        ads_heldout: 40,
    };
    let spec = default_suite(split, 0.9);
    let t0 = Instant::now();
    let suite = generate_suite(&spec, 7).unwrap();
    println!("suite generated in {:?}", t0.elapsed());

    let config = ModelConfig::desk_default();
    let hyper = TrainHyper::desk_default();
    let params = MethodParams::default();
    let fold = FoldSpec {
        target: "shortnoisy".into(),
        sources: vec!["longform".into(), "midlength".into(), "topical".into()],
    };

    for &seed in &seeds {
        let t1 = Instant::now();
        let start = warmup_for_fold(&suite.domains, &fold, &config, &hyper, seed).unwrap();
        println!("seed {seed}: warmup {:?}", t1.elapsed());
        for method in [Method::Erm, Method::AgmMaskOnly] {
            let t2 = Instant::now();
            let (cell, outcome) =
                run_cell(method, &suite.domains, &fold, &start, &hyper, &params, seed).unwrap();
            println!(
                "seed {seed} {:>13}: src {:.4} tgt {:.4} delta {:.4} te {:.4}  epochs {} best_val {:.4}  ({:?})",
                cell.method,
                cell.source_f1,
                cell.target_f1,
                cell.delta,
                cell.te,
                outcome.epochs_run,
                outcome.best_val_f1,
                t2.elapsed()
            );
            let n = outcome.log.len();
            if n >= 20 {
                let head: f64 = outcome.log[..10].iter().map(|r| r.mask).sum::<f64>() / 10.0;
                let tail: f64 = outcome.log[n - 10..].iter().map(|r| r.mask).sum::<f64>() / 10.0;
                println!("    mask trend: first10 {head:.5} last10 {tail:.5}");
            }
        }
    }
}
