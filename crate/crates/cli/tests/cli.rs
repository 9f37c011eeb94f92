//! End-to-end runs of the `annoflow` binary on the bundled fixtures.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn fixture(rel: &str) -> PathBuf {
    root().join("crates/core/fixtures").join(rel)
}

fn annoflow(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_annoflow"))
        .args(args)
        .output()
        .expect("binary runs");
    if !out.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn run_smoke(out: &Path, extra: &[&str]) -> Output {
    let config = root().join("configs/smoke.toml");
    let transcripts = fixture("corpus/transcripts");
    let gold = fixture("corpus/gold.csv");
    let mut args = vec![
        "run",
        "--config",
        path(&config),
        "--transcripts",
        path(&transcripts),
        "--gold",
        path(&gold),
        "--out",
        path(out),
    ];
    args.extend_from_slice(extra);
    annoflow(&args)
}

#[test]
fn ingest_reports_corpus_shape() {
    let out = annoflow(&[
        "ingest",
        "--transcripts",
        path(&fixture("corpus/transcripts")),
        "--gold",
        path(&fixture("corpus/gold.csv")),
    ]);
    assert!(out.status.success());
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(json["transcripts"], 3);
    assert_eq!(json["utterances"], 60);
    assert_eq!(json["gold_labels"], 33);
}

#[test]
fn sample_then_segment() {
    let dir = tempfile::tempdir().unwrap();
    let targets = dir.path().join("targets.txt");
    let segments = dir.path().join("segments.jsonl");
    let (transcripts, gold) = (fixture("corpus/transcripts"), fixture("corpus/gold.csv"));
    let corpus = ["--transcripts", path(&transcripts), "--gold", path(&gold)];
    let mut args = vec!["sample"];
    args.extend(corpus);
    args.extend(["--size", "10", "--seed", "4", "--out", path(&targets)]);
    assert!(annoflow(&args).status.success());
    let ids = std::fs::read_to_string(&targets).unwrap();
    assert_eq!(ids.lines().count(), 10);

    let mut args = vec!["segment"];
    args.extend(corpus);
    args.extend([
        "--targets",
        path(&targets),
        "--window-k",
        "1",
        "--out",
        path(&segments),
    ]);
    assert!(annoflow(&args).status.success());
    let mut covered = 0;
    for line in std::fs::read_to_string(&segments).unwrap().lines() {
        let seg: serde_json::Value = serde_json::from_str(line).unwrap();
        covered += seg["target_ids"].as_array().unwrap().len();
    }
    assert_eq!(covered, 10);
}

#[test]
fn run_evaluate_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let run = run_smoke(&out, &[]);
    assert!(run.status.success());
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert_eq!(stdout.lines().count(), 6);

    let ledger = out.join("ledgers/flash_pro__non_reasoning_adjudicated.jsonl");
    let eval = annoflow(&[
        "evaluate",
        "--ledger",
        path(&ledger),
        "--gold",
        path(&fixture("corpus/gold.csv")),
    ]);
    assert!(eval.status.success());
    let json: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    let f1 = json[0]["summary"]["macro_f1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&f1));
    assert!(json[0]["kappa_vs_gold"]["p_o"].as_f64().is_some());

    let report = annoflow(&[
        "report",
        "--ledgers",
        path(&out.join("ledgers")),
        "--gold",
        path(&fixture("corpus/gold.csv")),
        "--out",
        path(&out),
    ]);
    assert!(report.status.success());
    for f in [
        "tables/category_table.csv",
        "figures/per_category.csv",
        "figures/cost_performance.csv",
        "meta/report.json",
        "meta/run.json",
    ] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
}

#[test]
fn halted_run_resumes_to_the_same_ledgers() {
    let dir = tempfile::tempdir().unwrap();
    let full = dir.path().join("full");
    let resumed = dir.path().join("resumed");
    assert!(run_smoke(&full, &[]).status.success());
    let halted = run_smoke(&resumed, &["--halt-after", "11"]);
    assert!(!halted.status.success());
    assert!(String::from_utf8_lossy(&halted.stderr).contains("interrupted"));
    // each invocation halts one more strategy part-way; keep going until done
    let mut finished = false;
    for _ in 0..30 {
        if run_smoke(&resumed, &["--halt-after", "11"])
            .status
            .success()
        {
            finished = true;
            break;
        }
    }
    assert!(finished);
    for entry in std::fs::read_dir(full.join("ledgers")).unwrap() {
        let entry = entry.unwrap();
        let other = resumed.join("ledgers").join(entry.file_name());
        assert_eq!(
            std::fs::read(entry.path()).unwrap(),
            std::fs::read(&other).unwrap(),
            "{:?}",
            entry.file_name()
        );
    }
}

#[test]
fn report_from_table_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let out = annoflow(&[
        "report",
        "--table",
        path(&fixture("table1.csv")),
        "--out",
        path(dir.path()),
    ]);
    assert!(out.status.success());
    let table = std::fs::read_to_string(dir.path().join("tables/category_table.csv")).unwrap();
    assert_eq!(table.lines().count(), 22);
    assert!(!dir.path().join("figures/cost_performance.csv").exists());
}

#[test]
fn bad_config_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "seed = 1\nunknown_key = 2\n").unwrap();
    let out = annoflow(&["run", "--config", path(&config), "--out", path(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}
