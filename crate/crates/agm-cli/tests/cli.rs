//! End-to-end command tests over the compiled binary: generation
//! determinism, grid training with resume semantics, report round-trips,
//! heatmaps, the drift study, and exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn agm() -> Command {
    Command::new(env!("CARGO_BIN_EXE_agm"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn agm");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Small-but-real settings: full vocabulary, shrunk model and corpus.
fn tiny_sets(cmd: &mut Command) -> &mut Command {
    for s in [
        "model.hidden_dim=16",
        "model.num_layers=1",
        "model.num_heads=2",
        "model.ffn_dim=32",
        "train.max_epochs=2",
        "train.mlm_warmup_epochs=1",
        "data.split.train=24",
        "data.split.validation=8",
        "data.split.test=12",
        "data.split.ads_heldout=6",
        "run.seeds=[42]",
        "run.jobs=1",
    ] {
        cmd.arg("--set").arg(s);
    }
    cmd
}

fn read_dir_sorted(dir: &Path) -> Vec<PathBuf> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    entries.sort();
    entries
}

#[test]
fn generate_data_is_byte_identical_across_reruns() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        let mut cmd = agm();
        cmd.args(["generate-data", "--out", dir.to_str().unwrap()]);
        run_ok(tiny_sets(&mut cmd));
    }
    let files_a = read_dir_sorted(&a);
    assert!(files_a.len() >= 4 * 4 + 2, "expected per-domain split files");
    for fa in files_a {
        let fb = b.join(fa.file_name().unwrap());
        assert_eq!(
            std::fs::read(&fa).unwrap(),
            std::fs::read(&fb).unwrap(),
            "{} differs between reruns",
            fa.display()
        );
    }
}

#[test]
fn train_report_cycle_with_resume_and_reproducibility() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let runs = tmp.path().join("runs");
    let reports = tmp.path().join("reports");
    {
        let mut cmd = agm();
        cmd.args(["generate-data", "--out", data.to_str().unwrap()]);
        run_ok(tiny_sets(&mut cmd));
    }

    let train = |extra: &[&str]| {
        let mut cmd = agm();
        cmd.args([
            "train",
            "--data",
            data.to_str().unwrap(),
            "--out",
            runs.to_str().unwrap(),
            "--set",
            "run.methods=[\"erm\"]",
            "--set",
            "run.targets=[\"shortnoisy\"]",
        ]);
        tiny_sets(&mut cmd);
        for e in extra {
            cmd.arg(e);
        }
        cmd
    };
    run_ok(&mut train(&[]));

    let cell_dir = runs.join("erm").join("shortnoisy").join("seed42");
    for f in ["cell.json", "checkpoint.ckpt", "log.jsonl", "config.toml"] {
        assert!(cell_dir.join(f).exists(), "missing {f}");
    }
    let first_cell = std::fs::read(cell_dir.join("cell.json")).unwrap();

    // Completed cells are skipped on rerun.
    let out = run_ok(&mut train(&[]));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(
        std::fs::read(cell_dir.join("cell.json")).unwrap() == first_cell,
        "rerun modified a completed cell"
    );
    drop(stdout);

    // A partial run directory is refused without --overwrite.
    std::fs::remove_file(cell_dir.join("cell.json")).unwrap();
    let out = train(&[]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("--overwrite"),
        "stderr should point at --overwrite"
    );

    // With --overwrite the cell reruns and reproduces its result exactly.
    run_ok(&mut train(&["--overwrite"]));
    let second_cell = std::fs::read(cell_dir.join("cell.json")).unwrap();
    assert_eq!(first_cell, second_cell, "rerun results diverged");

    // Report emits the CSV and tables; the CSV parses back losslessly.
    run_ok(&mut agm().args([
        "report",
        "--results",
        runs.to_str().unwrap(),
        "--out",
        reports.to_str().unwrap(),
    ]));
    let csv = std::fs::read_to_string(reports.join("summary.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "method,target,source_f1,target_f1,delta,te,ci_low,ci_high"
    );
    let row = lines.next().expect("one data row");
    let fields: Vec<&str> = row.split(',').collect();
    assert_eq!(fields.len(), 8);
    assert_eq!(fields[0], "erm");
    assert_eq!(fields[1], "shortnoisy");
    let cell: serde_json::Value =
        serde_json::from_slice(&std::fs::read(cell_dir.join("cell.json")).unwrap()).unwrap();
    // One seed: summary means equal the cell values.
    let close = |a: f64, b: f64| (a - b).abs() < 1e-6;
    assert!(close(
        fields[2].parse::<f64>().unwrap(),
        cell["source_f1"].as_f64().unwrap()
    ));
    assert!(close(
        fields[4].parse::<f64>().unwrap(),
        cell["delta"].as_f64().unwrap()
    ));
    let tables = std::fs::read_to_string(reports.join("tables.md")).unwrap();
    assert!(tables.contains("Generalization gap"));
    assert!(tables.contains("single-seed"), "single-seed warning expected");

    // Heatmaps from the trained checkpoint: one column, then two.
    let heat = tmp.path().join("heat.html");
    run_ok(&mut agm().args([
        "heatmap",
        "--checkpoint",
        cell_dir.join("checkpoint.ckpt").to_str().unwrap(),
        "--examples",
        data.join("shortnoisy.test.jsonl").to_str().unwrap(),
        "--vocab",
        data.join("vocab.txt").to_str().unwrap(),
        "--out",
        heat.to_str().unwrap(),
    ]));
    let html = std::fs::read_to_string(&heat).unwrap();
    assert!(html.contains("<table>"));
    assert_eq!(html.matches("<th>").count(), 1);

    let warm = runs.join("warmup").join("shortnoisy").join("seed42.ckpt");
    let heat2 = tmp.path().join("heat2.html");
    run_ok(&mut agm().args([
        "heatmap",
        "--checkpoint",
        cell_dir.join("checkpoint.ckpt").to_str().unwrap(),
        "--checkpoint",
        warm.to_str().unwrap(),
        "--examples",
        data.join("shortnoisy.test.jsonl").to_str().unwrap(),
        "--vocab",
        data.join("vocab.txt").to_str().unwrap(),
        "--out",
        heat2.to_str().unwrap(),
        "--ansi",
    ]));
    let html2 = std::fs::read_to_string(&heat2).unwrap();
    assert_eq!(html2.matches("<th>").count(), 2, "two columns expected");
}

#[test]
fn ads_study_runs_over_per_domain_models() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let runs = tmp.path().join("runs");
    let reports = tmp.path().join("reports");
    {
        let mut cmd = agm();
        cmd.args(["generate-data", "--out", data.to_str().unwrap()]);
        run_ok(tiny_sets(&mut cmd));
    }
    {
        let mut cmd = agm();
        cmd.args([
            "train",
            "--per-domain",
            "--data",
            data.to_str().unwrap(),
            "--out",
            runs.to_str().unwrap(),
        ]);
        run_ok(tiny_sets(&mut cmd));
    }
    let models = runs.join("domain-models");
    for d in ["longform", "midlength", "topical", "shortnoisy"] {
        assert!(models.join(format!("{d}.ckpt")).exists(), "missing {d}");
    }
    {
        let mut cmd = agm();
        cmd.args([
            "ads",
            "--models",
            models.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            reports.to_str().unwrap(),
            "--ig-steps",
            "8",
        ]);
        run_ok(tiny_sets(&mut cmd));
    }
    let csv = std::fs::read_to_string(reports.join("ads.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "formulation,source,target,score,support_size");
    // 3 formulations x 12 ordered pairs.
    assert_eq!(lines.clone().count(), 36);
    for line in lines {
        let score: f64 = line.split(',').nth(3).unwrap().parse().unwrap();
        assert!((0.0..=2.0).contains(&score), "score {score} out of range");
    }
    let corr: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(reports.join("correlations.json")).unwrap())
            .unwrap();
    assert!(corr.get("directional").is_some());

    // Missing per-domain model: listed, exit 3.
    std::fs::remove_file(models.join("topical.ckpt")).unwrap();
    let out = {
        let mut cmd = agm();
        cmd.args([
            "ads",
            "--models",
            models.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            reports.to_str().unwrap(),
        ]);
        tiny_sets(&mut cmd).output().unwrap()
    };
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("topical"));
}

#[test]
fn usage_and_missing_artifact_exit_codes() {
    // Unknown method: usage error, exit 1.
    let out = agm()
        .args(["train", "--set", "run.methods=[\"nonsense\"]"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    // Missing corpus: exit 3.
    let tmp = tempfile::tempdir().unwrap();
    let out = agm()
        .args([
            "train",
            "--data",
            tmp.path().join("nope").to_str().unwrap(),
            "--out",
            tmp.path().join("runs").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));

    // Bad preset: exit 1.
    let out = agm()
        .args(["generate-data", "--preset", "gigantic"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}
