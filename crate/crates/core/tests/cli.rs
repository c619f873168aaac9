mod common;

use std::path::Path;

use brainage::cli::main_with_args;
use common::assert_same_tree;

fn run(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("brainage").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn make_cohort(dir: &Path) -> std::path::PathBuf {
    let out = dir.join("data");
    assert_eq!(run(&["phantom-gen", "--n", "5", "--dims", "20", "--seed", "3", "--out", s(&out)]), 0);
    out.join("manifest.csv")
}

fn tiny_train(manifest: &Path, out: &Path, sub: &str) -> i32 {
    run(&[
        sub, "--manifest", s(manifest), "--n-train", "3", "--n-val", "1", "--epochs", "1", "--patch-size", "16",
        "--base-channels", "2", "--seed", "4", "--out", s(out),
    ])
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&["frobnicate"]), 1);
    assert_eq!(run(&["train"]), 1);
    assert_eq!(run(&["--workers", "0", "stats", "--pair", "a.csv:b.csv"]), 1);
    assert_eq!(run(&["--help"]), 0);
    assert_eq!(run(&["--version"]), 0);
}

#[test]
fn missing_input_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let code = run(&["eval", "--checkpoint", "/nonexistent.ckpt", "--testset", "/nonexistent.csv", "--out", s(dir.path())]);
    assert_eq!(code, 2);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = make_cohort(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let ckpt = a.join("train/final.ckpt");
    let split = a.join("train/split.json");
    for out in [&a, &b] {
        assert_eq!(tiny_train(&manifest, &out.join("train"), "train"), 0);
        let code = run(&[
            "eval", "--checkpoint", s(&ckpt), "--testset", s(&manifest), "--split", s(&split), "--seed", "4", "--out",
            s(&out.join("eval")),
        ]);
        assert_eq!(code, 0);
    }
    assert_same_tree(&a, &b);

    let run_json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("train/run.json")).unwrap()).unwrap();
    assert_eq!(run_json["status"], "complete");
    assert_eq!(run_json["seed"], 4);
    assert!(a.join("eval/report.csv").exists());
}

#[test]
fn stats_on_identical_models_reports_insufficient_data() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("r.csv");
    std::fs::write(&csv, "id,mae_voxel\ns1,3.0\ns2,4.0\ns3,5.0\ns4,2.0\ns5,1.0\ns6,6.0\n").unwrap();
    let pair = format!("{}:{}", s(&csv), s(&csv));
    assert_eq!(run(&["stats", "--pair", &pair, "--out", s(&dir.path().join("o"))]), 1);
}

#[test]
fn stats_writes_the_comparison_table() {
    let dir = tempfile::tempdir().unwrap();
    let (x, y) = (dir.path().join("x.csv"), dir.path().join("y.csv"));
    std::fs::write(&x, "id,mae_voxel\ns1,3.0\ns2,4.0\ns3,5.0\ns4,2.0\ns5,1.0\ns6,6.0\n").unwrap();
    std::fs::write(&y, "id,mae_voxel\ns6,7.5\ns1,4.0\ns2,5.5\ns3,5.5\ns4,6.0\ns5,3.0\n").unwrap();
    let out = dir.path().join("o");
    assert_eq!(run(&["stats", "--pair", &format!("{}:{}", s(&x), s(&y)), "--out", s(&out)]), 0);
    let table = std::fs::read_to_string(out.join("stats.csv")).unwrap();
    let row = table.lines().nth(1).unwrap();
    assert!(row.starts_with("x,y,6,0,"), "{row}");
    assert!(row.ends_with("exact,true,true"), "{row}");
}
