//! End-to-end runs of the `densetrf` binary on a tiny configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seeds = [0, 1]
validation_samples = 2

[model.slots]
num_slots = 3
slot_dim = 8
adapted_dim = 8
mlp_hidden = 16

[model.head]
adapter_hidden = 16
classifier_hidden = 16

[pretrain]
steps = 20
batch_size = 1

[round]
steps_per_round = 3
total_rounds = 2
batch_size = 1

[schedule]
phase1_iters = 5
phase2_iters = 5
phase3_iters = 5

[head_train]
batch_size = 1
eval_every = 5

[data]
kind = "synthetic"

[data.sizes]
source_labeled = 6
unlabeled = 6
test = 3
"#;

struct Workspace {
    _dir: tempfile::TempDir,
    config: PathBuf,
    out: PathBuf,
}

fn workspace(extra: &str) -> Workspace {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    fs::write(&config, format!("{TINY}{extra}")).unwrap();
    let out = dir.path().join("out");
    Workspace { _dir: dir, config, out }
}

fn run(ws: &Workspace, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_densetrf"))
        .arg("--config")
        .arg(&ws.config)
        .arg("--output-dir")
        .arg(&ws.out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(ws: &Workspace, args: &[&str]) -> Output {
    let o = run(ws, args);
    assert!(
        o.status.success(),
        "{args:?} failed with {:?}\n{}",
        o.status.code(),
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let text = fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    text.lines().map(|l| l.split(',').map(String::from).collect()).collect()
}

#[test]
fn generate_creates_the_output_dir_and_is_idempotent() {
    let ws = workspace("");
    ok(&ws, &["generate"]);
    let manifest = ws.out.join("data").join("manifest.toml");
    assert!(manifest.exists());
    assert!(ws.out.join("data").join("validity.toml").exists());
    let first = fs::read(&manifest).unwrap();
    ok(&ws, &["generate"]);
    assert_eq!(fs::read(&manifest).unwrap(), first);
}

#[test]
fn missing_prerequisite_exits_3() {
    let ws = workspace("");
    assert_eq!(run(&ws, &["adapt"]).status.code(), Some(3));
    assert_eq!(run(&ws, &["evaluate"]).status.code(), Some(3));
}

#[test]
fn config_errors_exit_2() {
    let ws = workspace("");
    fs::write(&ws.config, TINY.replace("steps = 20", "steps = \"twenty\"")).unwrap();
    assert_eq!(run(&ws, &["generate"]).status.code(), Some(2));
    fs::write(&ws.config, TINY.replace("seeds = [0, 1]", "seeds = []")).unwrap();
    assert_eq!(run(&ws, &["generate"]).status.code(), Some(2));
    let missing = Command::new(env!("CARGO_BIN_EXE_densetrf"))
        .args(["generate", "--config", "/nonexistent/densetrf.toml"])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn stage_chain_writes_every_output() {
    let ws = workspace("");
    for stage in ["pretrain-base", "adapt", "train-head"] {
        ok(&ws, &[stage]);
    }
    ok(&ws, &["evaluate", "--export", "1"]);

    let resolved = fs::read_to_string(ws.out.join("config.resolved.toml")).unwrap();
    let hash_line = resolved.lines().next().unwrap();
    assert!(hash_line.starts_with("# config_hash = \"") && hash_line.len() > 60);
    assert!(resolved.contains("num_slots = 3"));
    assert!(resolved.contains("lambda"), "defaults are echoed too");

    for seed in [0, 1] {
        let s = ws.out.join(format!("seed_{seed}"));
        for f in ["base.ckpt", "adapted.ckpt", "history_pretrain.csv", "history_adapt.csv", "rounds.csv"] {
            assert!(s.join(f).exists(), "{f}");
        }
        let full = s.join("full");
        for f in ["theta.ckpt", "head.ckpt", "history_head.csv", "validation.csv"] {
            assert!(full.join(f).exists(), "{f}");
        }
        let exported = fs::read_dir(full.join("predictions"))
            .unwrap()
            .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "dtrfp"))
            .count();
        assert_eq!(exported, 1);
        assert!(fs::read_dir(full.join("slots")).unwrap().count() >= 1);
        let rounds = csv_rows(&s.join("rounds.csv"));
        assert_eq!(rounds.len(), 1 + 2);
    }
    assert!(ws.out.join("plots").join("loss_full_seed0.svg").exists());
    assert!(ws.out.join("plots").join("metrics_full.svg").exists());

    let summary = csv_rows(&ws.out.join("results_full_summary.csv"));
    let header = &summary[0];
    let dataset = header.iter().position(|h| h == "dataset").unwrap();
    let runs = header.iter().position(|h| h == "runs").unwrap();
    let datasets: Vec<&str> = summary[1..].iter().map(|r| r[dataset].as_str()).collect();
    assert_eq!(datasets, ["target", "source"]);
    assert!(summary[1..].iter().all(|r| r[runs] == "2"));

    // a finished stage is not overwritten by accident
    assert_eq!(run(&ws, &["pretrain-base"]).status.code(), Some(2));
    ok(&ws, &["pretrain-base", "--overwrite", "--seed", "0"]);
}

#[test]
fn ablate_writes_table_report_and_figures() {
    let ws = workspace("");
    ok(&ws, &["ablate"]);
    let dir = ws.out.join("ablation");
    let table = csv_rows(&dir.join("table.csv"));
    assert_eq!(table.len(), 1 + 4);
    let reference = table[0].iter().position(|h| h == "reference").unwrap();
    let refs: Vec<&str> = table[1..]
        .iter()
        .filter(|r| r[reference] == "true")
        .map(|r| r[0].as_str())
        .collect();
    assert_eq!(refs, ["full"]);

    let report = fs::read_to_string(dir.join("report.md")).unwrap();
    assert!(report.contains("## Checks"));
    assert_eq!(report.matches("[PASS]").count() + report.matches("[FAIL]").count(), 4);
    assert!(report.contains("seed 0") && report.contains("seed 1"));

    let results = csv_rows(&dir.join("results.csv"));
    // 2 datasets × 4 variants × 2 seeds, each with its "mean" row
    let mean_rows = results.iter().filter(|r| r.iter().any(|c| c == "mean")).count();
    assert_eq!(mean_rows, 2 * 4 * 2);
    assert_eq!(csv_rows(&dir.join("results_summary.csv")).len(), 1 + 2 * 4);
    for f in ["ablation_dice.svg", "loss_full_seed0.svg"] {
        assert!(dir.join(f).exists(), "{f}");
    }
    let no_sa = fs::read_to_string(dir.join("history").join("no_sa_seed0.csv")).unwrap();
    assert!(no_sa.lines().count() > 1);
}
