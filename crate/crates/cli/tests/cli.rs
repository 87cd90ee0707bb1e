use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn a3(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_a3"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn train_tiny(dir: &Path) -> String {
    let text = "the cat sat on the mat. the dog sat on the log.\n".repeat(40);
    fs::write(dir.join("data.txt"), text).unwrap();
    fs::write(
        dir.join("train.toml"),
        r#"
seed = 5
[model]
d_model = 16
n_layers = 1
n_heads = 2
d_ff = 32
[plan]
stage_fractions = [0.1, 0.1, 0.2]
batch_size = 4
seq_len = 32
[data]
path = "data.txt"
mode = "char"
[out]
dir = "run"
"#,
    )
    .unwrap();
    let cfg = dir.join("train.toml");
    let o = a3(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for name in [
        "stage1.a3ck",
        "stage2.a3ck",
        "stage3.a3ck",
        "final.a3ck",
        "loss.csv",
    ] {
        assert!(dir.join("run").join(name).exists(), "{name}");
    }
    dir.join("run/final.a3ck").to_str().unwrap().to_owned()
}

#[test]
fn bad_usage_exits_with_two() {
    assert_eq!(a3(&["sample"]).status.code(), Some(2));
    assert_eq!(a3(&["nonsense"]).status.code(), Some(2));
    assert_eq!(
        a3(&["infill", "--ckpt", "x", "--blanks", "many"]).status.code(),
        Some(2)
    );
}

#[test]
fn runtime_failure_exits_with_one() {
    let o = a3(&["sample", "--ckpt", "/nonexistent/model.a3ck"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("loading checkpoint"));
}

#[test]
fn masks_render_both_streams() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.txt");
    fs::write(&path, "1 3\n0\n2 4\n").unwrap();
    let o = a3(&["masks", "--grouping", path.to_str().unwrap()]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.contains("content stream:") && out.contains("query stream:"));
}

#[test]
fn masks_reject_a_broken_grouping() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.txt");
    fs::write(&path, "0 1\n1 2\n").unwrap();
    assert_eq!(
        a3(&["masks", "--grouping", path.to_str().unwrap()]).status.code(),
        Some(1)
    );
}

#[test]
fn small_verify_passes() {
    let o = a3(&["verify", "--small", "--seed", "3"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("PASS")).count(), 4);
}

#[test]
fn train_then_decode_and_eval_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(dir.path());
    let loss = fs::read_to_string(dir.path().join("run/loss.csv")).unwrap();
    assert!(loss.starts_with("step,stage,s,loss\n"));

    let sample = [
        "sample",
        "--ckpt",
        &ckpt,
        "--prompt",
        "the ",
        "--max-new",
        "12",
        "--seed",
        "9",
    ];
    let (a, b) = (a3(&sample), a3(&sample));
    assert!(a.status.success());
    assert_eq!(stdout(&a), stdout(&b));
    assert!(stdout(&a).starts_with("the "));

    let trace = dir.path().join("trace.csv");
    let infill = [
        "infill",
        "--ckpt",
        &ckpt,
        "--left",
        "the cat ",
        "--right",
        " on the mat",
        "--blanks",
        "4",
        "--group-size",
        "2",
        "--seed",
        "1",
        "--trace",
        trace.to_str().unwrap(),
    ];
    let (a, b) = (a3(&infill), a3(&infill));
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(stdout(&a), stdout(&b));
    let filled = stdout(&a);
    assert!(filled.starts_with("the cat ") && filled.trim_end().ends_with(" on the mat"));
    let trace = fs::read_to_string(&trace).unwrap();
    assert!(trace.starts_with("iteration,position,criterion,score\n"));
    assert_eq!(trace.lines().count(), 5);

    let data = dir.path().join("data.txt");
    let eval = [
        "eval",
        "--ckpt",
        &ckpt,
        "--data",
        data.to_str().unwrap(),
        "--grouping",
        "permuted:2",
        "--seed",
        "4",
    ];
    let (a, b) = (a3(&eval), a3(&eval));
    assert!(a.status.success());
    assert_eq!(stdout(&a), stdout(&b));
    assert!(stdout(&a).contains("nll (nats/token)"));

    let sweep = a3(&[
        "eval",
        "--ckpt",
        &ckpt,
        "--data",
        data.to_str().unwrap(),
        "--lengths",
        "8,16,32",
    ]);
    assert!(sweep.status.success());
    assert_eq!(stdout(&sweep).lines().count(), 4);
    assert_eq!(
        a3(&[
            "eval",
            "--ckpt",
            &ckpt,
            "--data",
            data.to_str().unwrap(),
            "--lengths",
            "64"
        ])
        .status
        .code(),
        Some(1)
    );

    let v = a3(&["verify", "--small", "--ckpt", &ckpt]);
    assert!(v.status.success(), "{}", stdout(&v));
}
