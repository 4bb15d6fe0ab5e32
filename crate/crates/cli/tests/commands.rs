use std::path::Path;
use std::process::{Command, Output};

fn damamba(args: &[&str], extra: &[&Path]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_damamba"));
    cmd.args(args);
    for p in extra {
        cmd.arg(p);
    }
    cmd.output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn missing_config_exits_2() {
    let o = damamba(&["train"], &[]);
    assert_eq!(o.status.code(), Some(2));
    let o = damamba(&["train", "--config"], &[Path::new("/nonexistent/run.cfg")]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_flags_and_keys_exit_2() {
    assert_eq!(damamba(&["bench", "--frobnicate"], &[]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "train.lr=0.1\ntrain.momentum=0.9\n").unwrap();
    assert_eq!(damamba(&["train", "--config"], &[&cfg]).status.code(), Some(2));
}

#[test]
fn grad_check_passes_and_filters() {
    let dir = tempfile::tempdir().unwrap();
    let o = damamba(&["grad-check", "--out"], &[dir.path()]);
    assert!(dir.path().join("manifest.txt").exists());
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let text = stdout(&o);
    for op in damamba_cli::gradsuite::OPS {
        assert!(text.contains(op), "{op} missing from\n{text}");
    }
    let o = damamba(&["grad-check", "--op", "sampler", "--out"], &[dir.path()]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).lines().count(), 1);
    assert!(stdout(&o).starts_with("sampler"));
}

#[test]
fn wrong_sign_gradient_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = damamba(&["grad-check", "--op", "linalg", "--inject-wrong-sign", "--out"], &[dir.path()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("injected"));
}

#[test]
fn train_then_eval_reproduces_logged_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# short run\nmodel.preset=micro\ndata.samples=120\ntrain.epochs=1\ntrain.batch_size=16\n").unwrap();
    let out = dir.path().join("run");
    let o = damamba(&["train", "--seed", "3", "--config"], &[&cfg, Path::new("--out"), &out]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = std::fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.contains("train.seed=3") && manifest.contains("model.channels="));
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("step,split,loss,accuracy,lr\n"));
    assert!(csv.lines().all(|l| l.split(',').count() == 5));

    let ck = out.join("last.ckpt");
    let eval_out = dir.path().join("eval");
    let o = damamba(&["eval", "--config"], &[&cfg, Path::new("--checkpoint"), &ck, Path::new("--out"), &eval_out]);
    assert!(eval_out.join("manifest.txt").exists());
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("reproduced=true"), "{}", stdout(&o));
}

#[test]
fn diverging_run_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "data.samples=40\ntrain.epochs=3\ntrain.batch_size=8\ntrain.lr=1e200\ntrain.warmup_frac=0\n").unwrap();
    let out = dir.path().join("run");
    let o = damamba(&["train", "--config"], &[&cfg, Path::new("--out"), &out]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn bench_writes_csv_and_fit() {
    let dir = tempfile::tempdir().unwrap();
    let o = damamba(&["bench", "--lengths", "64,128,256", "--out"], &[dir.path()]);
    assert_eq!(o.status.code(), Some(0));
    let csv = std::fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "kernel,L,mean_ms,std_ms");
    assert_eq!(lines.len(), 7);
    assert!(lines.iter().all(|l| l.split(',').count() == 4));
    assert!(std::fs::read_to_string(dir.path().join("bench_fit.csv")).unwrap().contains("attention,"));
    assert_eq!(damamba(&["bench", "--reps", "3"], &[]).status.code(), Some(2));
}

#[test]
fn scan_viz_rejects_unreadable_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.ckpt");
    let img = dir.path().join("img.ppm");
    std::fs::write(&img, b"P6\n2 2\n255\n").unwrap();
    let o = damamba(&["scan-viz", "--checkpoint"], &[&missing, Path::new("--image"), &img]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(damamba(&["scan-viz", "--stage", "5", "--checkpoint", "a", "--image", "b"], &[]).status.code(), Some(2));
}
