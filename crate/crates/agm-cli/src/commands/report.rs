//! Summary emitter: the gap grid, the ablation grid, and the raw F1 table,
//! as CSV plus markdown, with mean +/- std over seeds and bootstrap
//! confidence intervals on the per-seed gaps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use agm_core::eval::{CellResult, TransferReport};
use agm_core::{Error, Result};

use crate::config::RunConfig;
use crate::runs::{find_cells, read_cell};

pub fn run(results_dir: &Path, out_dir: &Path) -> Result<()> {
    let dirs = find_cells(results_dir)?;
    if dirs.is_empty() {
        return Err(Error::missing(format!(
            "no completed cells under {}",
            results_dir.display()
        )));
    }

    // Refuse mixed configurations, diffing the offending fields.
    let mut reference: Option<(String, RunConfig)> = None;
    let mut cells: Vec<CellResult> = Vec::new();
    for dir in &dirs {
        cells.push(read_cell(dir)?);
        let cfg_path = dir.join("config.toml");
        if !cfg_path.exists() {
            continue;
        }
        let cfg = RunConfig::load(&cfg_path)?;
        match &reference {
            None => reference = Some((dir.display().to_string(), cfg)),
            Some((ref_dir, ref_cfg)) => {
                let diffs = config_diff(ref_cfg, &cfg);
                if !diffs.is_empty() {
                    return Err(Error::config(format!(
                        "mixed configurations: {} vs {} differ in [{}]",
                        ref_dir,
                        dir.display(),
                        diffs.join(", ")
                    )));
                }
            }
        }
    }

    // Group cells per (method, target), seed-ordered.
    let mut groups: BTreeMap<(String, String), Vec<CellResult>> = BTreeMap::new();
    for c in cells {
        groups
            .entry((c.method.clone(), c.target.clone()))
            .or_default()
            .push(c);
    }
    let mut reports = Vec::new();
    for ((method, target), mut group) in groups {
        group.sort_by_key(|c| c.seed);
        reports.push(TransferReport::from_cells(&method, &target, &group)?);
    }

    std::fs::create_dir_all(out_dir)?;
    let csv = summary_csv(&reports);
    std::fs::write(out_dir.join("summary.csv"), &csv)?;
    let md = markdown_tables(&reports);
    std::fs::write(out_dir.join("tables.md"), &md)?;
    println!(
        "wrote {} and {}",
        out_dir.join("summary.csv").display(),
        out_dir.join("tables.md").display()
    );
    Ok(())
}

/// Top-level sections whose values differ between two configurations.
/// Per-run fields (seed and method lists, output knobs) are allowed to
/// vary; everything that shapes a cell's numbers must match.
fn config_diff(a: &RunConfig, b: &RunConfig) -> Vec<String> {
    let mut diffs = Vec::new();
    if a.model != b.model {
        diffs.push("model".to_string());
    }
    if a.train != b.train {
        diffs.push("train".to_string());
    }
    if a.agm != b.agm {
        diffs.push("agm".to_string());
    }
    if a.irm != b.irm {
        diffs.push("irm".to_string());
    }
    if a.fish != b.fish {
        diffs.push("fish".to_string());
    }
    if a.dro != b.dro {
        diffs.push("dro".to_string());
    }
    if a.data != b.data {
        diffs.push("data".to_string());
    }
    diffs
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn std_dev(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Column order is part of the interface:
/// method, target, source_f1, target_f1, delta, te, ci_low, ci_high.
pub fn summary_csv(reports: &[TransferReport]) -> String {
    let mut out = String::from("method,target,source_f1,target_f1,delta,te,ci_low,ci_high\n");
    for r in reports {
        writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.method,
            r.target_domain,
            mean(&r.source_f1),
            mean(&r.target_f1),
            mean(&r.delta),
            mean(&r.te),
            r.delta_ci.0,
            r.delta_ci.1
        )
        .expect("write to string");
    }
    out
}

fn fmt_cell(values: &[f64], bold: bool, warn_single: &mut bool) -> String {
    let m = mean(values);
    let body = if values.len() > 1 {
        format!("{m:.3}±{:.3}", std_dev(values))
    } else {
        *warn_single = true;
        format!("{m:.3}")
    };
    if bold {
        format!("**{body}**")
    } else {
        body
    }
}

/// The gap grid, the ablation grid (combined-objective variants), and the
/// raw F1 table.
pub fn markdown_tables(reports: &[TransferReport]) -> String {
    let mut targets: Vec<String> = reports.iter().map(|r| r.target_domain.clone()).collect();
    targets.sort();
    targets.dedup();
    let mut methods: Vec<String> = reports.iter().map(|r| r.method.clone()).collect();
    methods.sort();
    methods.dedup();

    let get = |m: &str, t: &str| -> Option<&TransferReport> {
        reports
            .iter()
            .find(|r| r.method == m && r.target_domain == t)
    };

    let mut warn_single = false;
    let mut out = String::new();

    let mut grid = |title: &str, methods: &[String], out: &mut String| {
        if methods.is_empty() {
            return;
        }
        writeln!(out, "## {title}\n").expect("write");
        write!(out, "| target |").expect("write");
        for m in methods {
            write!(out, " {m} |").expect("write");
        }
        writeln!(out).expect("write");
        write!(out, "|---|").expect("write");
        for _ in methods {
            write!(out, "---|").expect("write");
        }
        writeln!(out).expect("write");
        for t in &targets {
            // Best (minimum mean gap) per row in bold.
            let best = methods
                .iter()
                .filter_map(|m| get(m, t).map(|r| (m.clone(), r.mean_delta())))
                .min_by(|a, b| a.1.partial_cmp(&b.1).expect("finite"))
                .map(|(m, _)| m);
            write!(out, "| {t} |").expect("write");
            for m in methods {
                match get(m, t) {
                    Some(r) => {
                        let bold = best.as_deref() == Some(m.as_str());
                        write!(out, " {} |", fmt_cell(&r.delta, bold, &mut warn_single))
                            .expect("write");
                    }
                    None => write!(out, " — |").expect("write"),
                }
            }
            writeln!(out).expect("write");
        }
        writeln!(out).expect("write");
    };

    grid("Generalization gap (lower is better)", &methods, &mut out);

    let ablation: Vec<String> = ["agm_full", "agm_mask_only", "agm_no_mask", "agm_random"]
        .iter()
        .map(|s| s.to_string())
        .filter(|m| methods.contains(m))
        .collect();
    grid("Ablation grid (gap per variant)", &ablation, &mut out);

    writeln!(out, "## Raw F1 (mean over seeds)\n").expect("write");
    writeln!(
        out,
        "| target | method | source F1 | target F1 | gap | TE | 95% CI |"
    )
    .expect("write");
    writeln!(out, "|---|---|---|---|---|---|---|").expect("write");
    for t in &targets {
        for m in &methods {
            if let Some(r) = get(m, t) {
                writeln!(
                    out,
                    "| {t} | {m} | {} | {} | {} | {} | [{:.3}, {:.3}] |",
                    fmt_cell(&r.source_f1, false, &mut warn_single),
                    fmt_cell(&r.target_f1, false, &mut warn_single),
                    fmt_cell(&r.delta, false, &mut warn_single),
                    fmt_cell(&r.te, false, &mut warn_single),
                    r.delta_ci.0,
                    r.delta_ci.1
                )
                .expect("write");
            }
        }
    }
    if warn_single {
        log::warn!("single-seed groups present; std columns omitted");
        writeln!(
            out,
            "\n*(single-seed cells: standard deviation omitted)*"
        )
        .expect("write");
    }
    out
}
