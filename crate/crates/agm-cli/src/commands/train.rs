//! The training grid: (method, fold, seed) cells over a corpus, dispatched
//! to a bounded worker pool. One warm-up per (fold, seed) is shared by all
//! methods of that cell group; results are written atomically so an
//! interrupted run never leaves a cell file behind.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use agm_core::data::SplitBundle;
use agm_core::eval::{run_cell, warmup_for_fold, FoldSpec, Method};
use agm_core::model::Model;
use agm_core::train::write_log;
use agm_core::{Error, Result};

use crate::config::RunConfig;
use crate::runs::{cell_dir, load_corpus, warmup_path, write_cell};

pub struct TrainArgs {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub overwrite: bool,
    pub per_domain: bool,
}

pub fn run(config: &RunConfig, args: &TrainArgs) -> Result<()> {
    let (tokenizer, domains) = load_corpus(&args.data_dir, config.model.max_seq_len)?;
    if tokenizer.vocab_size() != config.model.vocab_size {
        return Err(Error::config(format!(
            "corpus vocabulary ({}) does not match model.vocab_size ({})",
            tokenizer.vocab_size(),
            config.model.vocab_size
        )));
    }
    let names: Vec<String> = domains.iter().map(|(n, _)| n.clone()).collect();

    let folds: Vec<FoldSpec> = if args.per_domain {
        // Single-source models for the drift study: each domain trains on
        // itself; the "target" slot labels the domain.
        names
            .iter()
            .map(|n| FoldSpec {
                target: n.clone(),
                sources: vec![n.clone()],
            })
            .collect()
    } else {
        let targets: Vec<String> = if config.run.targets.is_empty() {
            names.clone()
        } else {
            for t in &config.run.targets {
                if !names.contains(t) {
                    return Err(Error::invalid(format!("unknown target domain {t:?}")));
                }
            }
            config.run.targets.clone()
        };
        targets
            .iter()
            .map(|target| FoldSpec {
                target: target.clone(),
                sources: names.iter().filter(|d| *d != target).cloned().collect(),
            })
            .collect()
    };

    let methods: Vec<Method> = if args.per_domain {
        vec![Method::Erm]
    } else {
        config
            .run
            .methods
            .iter()
            .map(|m| Method::parse(m))
            .collect::<Result<_>>()?
    };

    // Work units: one (fold, seed) pair shares its warm-up across methods.
    let units: Vec<(FoldSpec, u64)> = folds
        .iter()
        .flat_map(|f| config.run.seeds.iter().map(move |&s| (f.clone(), s)))
        .collect();

    std::fs::create_dir_all(&args.out_dir)?;
    let next = AtomicUsize::new(0);
    let failures: Mutex<Vec<String>> = Mutex::new(Vec::new());
    let done = AtomicUsize::new(0);
    let total_cells = units.len() * methods.len();

    std::thread::scope(|scope| {
        for _ in 0..config.run.jobs.min(units.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= units.len() {
                    break;
                }
                let (fold, seed) = &units[i];
                if let Err(e) = run_unit(
                    config,
                    args,
                    &domains,
                    fold,
                    *seed,
                    &methods,
                    &done,
                    total_cells,
                ) {
                    failures
                        .lock()
                        .expect("poisoned")
                        .push(format!("fold {} seed {seed}: {e}", fold.target));
                }
            });
        }
    });

    let failures = failures.into_inner().expect("poisoned");
    if !failures.is_empty() {
        // Surface the first error with its original kind so the exit code
        // mapping stays faithful (numeric aborts exit 2, and so on).
        let joined = failures.join("; ");
        return Err(if joined.contains("non-finite") {
            Error::numeric(joined)
        } else {
            Error::invalid(joined)
        });
    }
    println!(
        "completed {} cells under {}",
        done.load(Ordering::SeqCst),
        args.out_dir.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_unit(
    config: &RunConfig,
    args: &TrainArgs,
    domains: &[(String, SplitBundle)],
    fold: &FoldSpec,
    seed: u64,
    methods: &[Method],
    done: &AtomicUsize,
    total_cells: usize,
) -> Result<()> {
    let hyper = &config.train;
    let params = config.method_params();

    // Shared warm start for every method of this (fold, seed).
    let wpath = warmup_path(&args.out_dir, &fold.target, seed);
    let start: Model = if wpath.exists() && !args.overwrite {
        Model::load(&wpath)?
    } else {
        let m = warmup_for_fold(domains, fold, &config.model, hyper, seed)?;
        std::fs::create_dir_all(wpath.parent().expect("warmup parent"))?;
        m.save(&wpath)?;
        m
    };

    for &method in methods {
        let dir = cell_dir(&args.out_dir, method.name(), &fold.target, seed);
        if dir.exists() {
            let complete = dir.join("cell.json").exists();
            if complete && !args.overwrite {
                log::info!("skipping completed cell {}", dir.display());
                done.fetch_add(1, Ordering::SeqCst);
                continue;
            }
            if !complete && !args.overwrite {
                return Err(Error::invalid(format!(
                    "run directory {} holds a partial run; pass --overwrite to redo it",
                    dir.display()
                )));
            }
            std::fs::remove_dir_all(&dir)?;
        }
        std::fs::create_dir_all(&dir)?;
        config.save(&dir.join("config.toml"))?;

        let (cell, outcome) = run_cell(method, domains, fold, &start, hyper, &params, seed)?;
        outcome.model.save(&dir.join("checkpoint.ckpt"))?;
        write_log(&outcome.log, &dir.join("log.jsonl"))?;
        // The cell file lands last, atomically: its presence marks the cell
        // complete.
        write_cell(&dir, &cell)?;
        let n = done.fetch_add(1, Ordering::SeqCst) + 1;
        println!(
            "[{n}/{total_cells}] {} target={} seed={} delta={:.4}",
            method.name(),
            fold.target,
            seed,
            cell.delta
        );
    }
    Ok(())
}

/// Copy each domain's single-source model to a stable per-domain path for
/// the drift study.
pub fn collect_domain_models(out_dir: &Path, seed: u64) -> Result<()> {
    let erm_root = out_dir.join("erm");
    let models_dir = out_dir.join("domain-models");
    std::fs::create_dir_all(&models_dir)?;
    let entries = std::fs::read_dir(&erm_root)
        .map_err(|e| Error::missing(format!("{}: {e}", erm_root.display())))?;
    for entry in entries.flatten() {
        let domain = entry.file_name().to_string_lossy().to_string();
        let ckpt = entry.path().join(format!("seed{seed}")).join("checkpoint.ckpt");
        if ckpt.exists() {
            std::fs::copy(&ckpt, models_dir.join(format!("{domain}.ckpt")))?;
        }
    }
    Ok(())
}
