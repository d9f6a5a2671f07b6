use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
env = chain
model.n_layers = 1
model.d = 8
model.n_state = 4
model.context_k = 4
train.total_updates = 30
train.batch_size = 4
train.warmup_steps = 5
train.lr = 0.001
train.log_every = 10
train.checkpoint_every = 15
data.n_trajectories = 8
eval.episodes = 2
eval.random_episodes = 20
bench.lengths = 16,32
bench.repeats = 1
";

fn dmm(dir: &Path, args: &[&str]) -> Output {
    let cfg = dir.join("tiny.txt");
    if !cfg.exists() {
        fs::write(&cfg, TINY).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_dmm"))
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn verify_reports_every_suite() {
    let dir = tempfile::tempdir().unwrap();
    let out = stdout(&dmm(dir.path(), &["verify"]));
    for suite in ["numkernel", "ssm", "mixer", "model", "data", "train", "env", "rollout"] {
        let line = out
            .lines()
            .find(|l| l.starts_with(suite))
            .unwrap_or_else(|| panic!("{suite} missing"));
        assert!(line.ends_with("pass"), "{line}");
    }
}

#[test]
fn train_then_eval_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        stdout(&dmm(dir.path(), &["train"]));
    }
    let read = |d: &tempfile::TempDir, f: &str| fs::read(d.path().join("out").join(f)).unwrap();
    assert_eq!(read(&a, "metrics.csv"), read(&b, "metrics.csv"));
    assert_eq!(read(&a, "model.ckpt"), read(&b, "model.ckpt"));
    assert_eq!(read(&a, "ckpt_30.ckpt"), read(&a, "model.ckpt"));
    assert!(a.path().join("out/ckpt_15.ckpt").exists());

    let manifest = String::from_utf8(read(&a, "manifest-train.txt")).unwrap();
    assert!(manifest.starts_with("dmm-manifest v1\ncommand train\nseed 0\n"));
    assert!(manifest.contains("artifact metrics.csv sha256 "));

    let report = stdout(&dmm(a.path(), &["eval"]));
    assert!(report.contains("episodes 2"), "{report}");
    assert!(a.path().join("out/eval.txt").exists());
}

#[test]
fn seed_changes_the_run() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    stdout(&dmm(a.path(), &["train"]));
    stdout(&dmm(b.path(), &["--seed", "1", "train"]));
    let read = |d: &tempfile::TempDir| fs::read(d.path().join("out/metrics.csv")).unwrap();
    assert_ne!(read(&a), read(&b));
}

#[test]
fn show_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let text = stdout(&dmm(dir.path(), &["show-config"]));
    assert!(text.contains("model.d = 8"));
    let again = dir.path().join("again.txt");
    fs::write(&again, &text).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_dmm"))
        .arg("--config")
        .arg(&again)
        .arg("show-config")
        .output()
        .unwrap();
    assert_eq!(stdout(&o), text);
}

#[test]
fn count_params_agrees_with_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let out = stdout(&dmm(dir.path(), &["count-params"]));
    let value = |key: &str| -> usize {
        let line = out.lines().find(|l| l.starts_with(key)).unwrap();
        line.split_whitespace().last().unwrap().parse().unwrap()
    };
    assert_eq!(value("total (enumerated)"), value("total (closed form)"));
    assert_eq!(value("double - single"), value("inner mixer stages"));
}

#[test]
fn bench_scan_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    stdout(&dmm(dir.path(), &["bench-scan"]));
    let csv = fs::read_to_string(dir.path().join("out/bench_scan.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "L,variant,lanes,ms_per_call");
    assert_eq!(rows.len(), 5);
}

#[test]
fn errors_exit_nonzero_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let o = dmm(dir.path(), &["eval"]);
    assert!(!o.status.success());
    let err = String::from_utf8(o.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error:"));

    let bad = dir.path().join("bad.txt");
    fs::write(&bad, "model.d = 8\nmodel.state_dim = 3\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_dmm"))
        .arg("--config")
        .arg(&bad)
        .arg("show-config")
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8(o.stderr).unwrap().contains("line 2"));
}
