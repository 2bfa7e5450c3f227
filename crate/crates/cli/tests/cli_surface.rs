//! End-to-end exercises of the command-line surface, run in-process.

use std::path::{Path, PathBuf};

use bpmap_cli::run_with_output;

fn data(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/data")
        .join(name)
        .display()
        .to_string()
}

fn bpmap(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let mut argv = vec!["bpmap"];
    argv.extend_from_slice(args);
    let code = run_with_output(argv, &mut out);
    (code, String::from_utf8(out).unwrap())
}

fn tempdir() -> tempfile::TempDir {
    tempfile::tempdir().unwrap()
}

fn path_in(dir: &tempfile::TempDir, name: &str) -> (PathBuf, String) {
    let path = dir.path().join(name);
    let display = path.display().to_string();
    (path, display)
}

#[test]
fn validate_prints_shape_and_succeeds() {
    let (code, out) = bpmap(&["validate", &data("animals.yaml")]);
    assert_eq!(code, 0, "{out}");
    assert!(out.contains("depth: 3"));
    assert!(out.contains("level 1: 2 categories"));
    assert!(out.contains("level 2: 4 categories"));
    assert!(out.contains("level 3: 8 categories"));
}

#[test]
fn validate_rejects_broken_documents_with_status_2() {
    let dir = tempdir();
    let (bad, bad_str) = path_in(&dir, "bad.yaml");
    std::fs::write(&bad, "Animal:\n  mammal: {}\n  Mammal: {}\n").unwrap();
    let (code, _) = bpmap(&["validate", &bad_str]);
    assert_eq!(code, 2);
}

#[test]
fn unknown_flags_exit_2() {
    let (code, _) = bpmap(&["classify", "--no-such-flag"]);
    assert_eq!(code, 2);
}

#[test]
fn classify_with_mock_backend_writes_results() {
    let dir = tempdir();
    let (output, output_str) = path_in(&dir, "out.csv");
    let (code, out) = bpmap(&[
        "classify",
        "--blueprint",
        &data("animals.yaml"),
        "--items",
        &data("items.csv"),
        "--truth",
        &data("truth.csv"),
        "--backend",
        "mock",
        "--output",
        &output_str,
    ]);
    assert_eq!(code, 0, "{out}");
    let table = std::fs::read_to_string(&output).unwrap();
    assert!(table.starts_with("id,text,Category1,Category2,Category3,failure\n"));
    assert!(table.contains("w1,Meow,Animal,Mammal,Cat,\n"));
    assert!(table.contains("w3,damask rose,Plant,Flower,Rose,\n"));
    // audit sidecar with raw outputs sits next to the table
    let sidecar = std::fs::read_to_string(dir.path().join("out.decisions.jsonl")).unwrap();
    assert_eq!(sidecar.lines().count(), 3);
    assert!(sidecar.contains("oracle: Animal"));
}

#[test]
fn classify_missing_truth_row_fails_that_item_only() {
    let dir = tempdir();
    let (truth, truth_str) = path_in(&dir, "partial.csv");
    std::fs::write(&truth, "id,Category1,Category2,Category3\nw1,Animal,Mammal,Cat\n").unwrap();
    let (output, output_str) = path_in(&dir, "out.csv");
    let (code, out) = bpmap(&[
        "classify",
        "--blueprint",
        &data("animals.yaml"),
        "--items",
        &data("items.csv"),
        "--truth",
        &truth_str,
        "--output",
        &output_str,
    ]);
    assert_eq!(code, 1, "{out}");
    assert!(out.contains("2 failures"));
    let table = std::fs::read_to_string(&output).unwrap();
    assert!(table.contains("w1,Meow,Animal,Mammal,Cat,\n"));
    assert!(table.contains("level 1:"));
}

#[test]
fn classify_dry_run_estimates_without_backend() {
    // An LLM selection with no credentials and an unroutable URL must not
    // matter: dry-run never builds a backend.
    let (code, out) = bpmap(&[
        "classify",
        "--blueprint",
        &data("animals.yaml"),
        "--items",
        &data("items.csv"),
        "--backend",
        "llm",
        "--base-url",
        "http://192.0.2.1:1/v1",
        "--dry-run",
    ]);
    assert_eq!(code, 0, "{out}");
    assert!(out.contains("items: 3"));
    assert!(out.contains("estimated backend calls: <= 9"));
}

#[test]
fn classify_honors_config_file_with_flag_overrides() {
    let dir = tempdir();
    let (config, config_str) = path_in(&dir, "run.yaml");
    let (output, output_str) = path_in(&dir, "from_flags.csv");
    std::fs::write(
        &config,
        format!(
            "blueprint: {}\nitems: {}\ntruth: {}\nbackend: mock\noutput: {}\nseed: 3\n",
            data("animals.yaml"),
            data("items.csv"),
            data("truth.csv"),
            path_in(&dir, "from_config.csv").1,
        ),
    )
    .unwrap();
    let (code, out) = bpmap(&["classify", "--config", &config_str, "--output", &output_str]);
    assert_eq!(code, 0, "{out}");
    assert!(output.exists(), "flag must override the config file output");
}

#[test]
fn classify_few_shot_level_one_uses_exemplars() {
    let dir = tempdir();
    let (_output, output_str) = path_in(&dir, "out.csv");
    let (code, out) = bpmap(&[
        "classify",
        "--blueprint",
        &data("animals.yaml"),
        "--items",
        &data("items.csv"),
        "--truth",
        &data("truth.csv"),
        "--exemplars",
        &data("exemplars.csv"),
        "--levels",
        "1=few_shot,2=zero_shot,3=zero_shot",
        "--output",
        &output_str,
    ]);
    assert_eq!(code, 0, "{out}");
}

#[test]
fn classify_few_shot_without_exemplars_is_a_config_error() {
    let dir = tempdir();
    let (_, output_str) = path_in(&dir, "out.csv");
    let (code, _) = bpmap(&[
        "classify",
        "--blueprint",
        &data("animals.yaml"),
        "--items",
        &data("items.csv"),
        "--truth",
        &data("truth.csv"),
        "--levels",
        "1=few_shot",
        "--output",
        &output_str,
    ]);
    assert_eq!(code, 2);
}

#[test]
fn score_round_trips_classify_output() {
    let dir = tempdir();
    let (output, output_str) = path_in(&dir, "out.csv");
    let (code, _) = bpmap(&[
        "classify",
        "--blueprint",
        &data("animals.yaml"),
        "--items",
        &data("items.csv"),
        "--truth",
        &data("truth.csv"),
        "--output",
        &output_str,
    ]);
    assert_eq!(code, 0);
    assert!(output.exists());

    let (code, out) = bpmap(&[
        "score",
        "--predictions",
        &output_str,
        "--references",
        &data("truth.csv"),
    ]);
    assert_eq!(code, 0, "{out}");
    let report: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(report["mean_weighted_f1"], 1.0);
    assert_eq!(report["per_level"]["3"]["accuracy"], 1.0);
    assert_eq!(report["conditional_agreement"]["2"]["fraction"], 1.0);
}

#[test]
fn score_rejects_id_mismatch() {
    let dir = tempdir();
    let (preds, preds_str) = path_in(&dir, "preds.csv");
    std::fs::write(&preds, "id,Category1\nzz,Animal\n").unwrap();
    let (refs, refs_str) = path_in(&dir, "refs.csv");
    std::fs::write(&refs, "id,Category1\nw1,Animal\n").unwrap();
    let (code, _) = bpmap(&["score", "--predictions", &preds_str, "--references", &refs_str]);
    assert_eq!(code, 2);
}

#[test]
fn simulate_defaults_are_hermetic_and_perfect() {
    let dir = tempdir();
    let (report_path, report_str) = path_in(&dir, "report.json");
    let (code, out) = bpmap(&[
        "simulate",
        "--repetitions",
        "20",
        "--seed",
        "7",
        "--output",
        &report_str,
    ]);
    assert_eq!(code, 0, "{out}");
    assert!(out.contains("mean weighted F1 across repetitions: 1.0000"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["spec"]["repetitions"], 20);
    assert_eq!(report["mean_weighted_f1"], 1.0);
}

#[test]
fn simulate_with_noise_degrades_scores() {
    let (code, out) = bpmap(&[
        "simulate",
        "--repetitions",
        "20",
        "--noise-rate",
        "0.4",
        "--noise-levels",
        "3",
    ]);
    assert_eq!(code, 0, "{out}");
    assert!(!out.contains("mean weighted F1 across repetitions: 1.0000"));
}

#[test]
fn multilabel_mock_respects_cap_and_truth() {
    let dir = tempdir();
    let (output, output_str) = path_in(&dir, "multi.csv");
    let (code, out) = bpmap(&[
        "multilabel",
        "--labels",
        &data("focus_areas.yaml"),
        "--items",
        &data("items_clinical.csv"),
        "--truth",
        &data("multi_truth.csv"),
        "--max-labels",
        "2",
        "--output",
        &output_str,
    ]);
    assert_eq!(code, 0, "{out}");
    let table = std::fs::read_to_string(&output).unwrap();
    assert!(table.contains("q1"), "{table}");
    assert!(table.contains("Cardiology|Geriatrics"));
    // q3's truth is empty: a valid none-of-the-above
    let sidecar = std::fs::read_to_string(dir.path().join("multi.decisions.jsonl")).unwrap();
    let q3: serde_json::Value =
        serde_json::from_str(sidecar.lines().find(|l| l.contains("\"q3\"")).unwrap()).unwrap();
    assert_eq!(q3["chosen"].as_array().unwrap().len(), 0);
}
