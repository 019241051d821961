use std::path::Path;
use std::process::{Command, Output};

use protodiff::harness::{parse_csv, sidecar_path, CSV_COLUMNS};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_protodiff"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

const SMALL: [&str; 18] = [
    "--set",
    "train_data=\"train.csv\"",
    "--set",
    "test_data=\"test.bin\"",
    "--set",
    "n_layers=1",
    "--set",
    "d_model=16",
    "--set",
    "n_heads=2",
    "--set",
    "mlp_hidden=32",
    "--set",
    "q_query=5",
    "--set",
    "n_tasks=20",
    "--set",
    "total_episodes=8",
];

fn with_data(dir: &Path) {
    let a = run(
        dir,
        &[
            "gen-data",
            "--dim",
            "6",
            "--classes",
            "6",
            "--samples",
            "20",
            "--out",
            "train.csv",
        ],
    );
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    let b = run(
        dir,
        &[
            "gen-data",
            "--dim",
            "6",
            "--classes",
            "6",
            "--samples",
            "20",
            "--first-class",
            "6",
            "--out",
            "test.bin",
        ],
    );
    assert_eq!(code(&b), 0);
}

#[test]
fn train_eval_trace_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    with_data(d);
    let mut args = vec!["train", "--out", "m.pdck"];
    args.extend(SMALL);
    let t = run(d, &args);
    assert_eq!(code(&t), 0, "{}", String::from_utf8_lossy(&t.stderr));
    assert!(d.join("m.pdck").exists());
    assert!(sidecar_path(&d.join("m.pdck")).exists());
    let losses = std::fs::read_to_string(d.join("m.loss.tsv")).unwrap();
    assert_eq!(losses.lines().count(), 9);

    let e = run(
        d,
        &["eval", "--checkpoint", "m.pdck", "--stride", "5", "--report", "r.csv"],
    );
    assert_eq!(code(&e), 0, "{}", String::from_utf8_lossy(&e.stderr));
    let rows = parse_csv(&std::fs::read_to_string(d.join("r.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].n_tasks, 20);

    let mut args = vec!["baseline", "--report", "b.json"];
    args.extend(SMALL);
    assert_eq!(code(&run(d, &args)), 0);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("b.json")).unwrap()).unwrap();
    for k in CSV_COLUMNS {
        assert!(json[0].get(k).is_some(), "{k}");
    }

    let tr = run(d, &["trace", "--checkpoint", "m.pdck", "--seed", "3", "--out", "t.tsv"]);
    assert_eq!(code(&tr), 0);
    let text = std::fs::read_to_string(d.join("t.tsv")).unwrap();
    assert!(text.starts_with("t\tclass\tcoord\tvalue\n"));
    // 10 sampling steps plus the final t = 0 entry, 5 classes × 6 coordinates each.
    assert_eq!(text.lines().count(), 1 + 11 * 5 * 6);
}

#[test]
fn ablate_writes_both_tables() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    with_data(d);
    let mut args = vec![
        "ablate",
        "--axis",
        "mc_samples",
        "--values",
        "1,2",
        "--report-dir",
        "out",
    ];
    args.extend(SMALL);
    let o = run(d, &args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = parse_csv(&std::fs::read_to_string(d.join("out/mc_samples.csv")).unwrap()).unwrap();
    assert_eq!(
        rows.iter().map(|r| r.axis_value.as_str()).collect::<Vec<_>>(),
        ["1", "2"]
    );
    assert!(d.join("out/mc_samples.json").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    with_data(d);
    // usage
    assert_eq!(code(&run(d, &["eval"])), 1);
    assert_eq!(code(&run(d, &["frobnicate"])), 1);
    assert_eq!(code(&run(d, &["baseline", "--set", "no_such_key=1"])), 1);
    assert_eq!(code(&run(d, &["--help"])), 0);
    // data and format
    assert_eq!(code(&run(d, &["eval", "--checkpoint", "missing.pdck"])), 2);
    std::fs::write(d.join("junk.pdck"), b"not a checkpoint").unwrap();
    assert_eq!(code(&run(d, &["eval", "--checkpoint", "junk.pdck"])), 2);
    std::fs::write(d.join("bad.csv"), "0,1.0\n1,oops\n").unwrap();
    assert_eq!(code(&run(d, &["baseline", "--data", "bad.csv"])), 2);
    // numerical
    let mut args = vec![
        "train",
        "--out",
        "d.pdck",
        "--set",
        "learning_rate=1e5",
        "--set",
        "grad_clip=0",
        "--set",
        "total_episodes=40",
    ];
    args.extend(SMALL[..16].iter().copied());
    let o = run(d, &args);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("d.diverged.tsv").exists());
}
