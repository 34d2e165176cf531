use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

fn iotlm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iotlm"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn text(o: &Output) -> (String, String) {
    (String::from_utf8_lossy(&o.stdout).into(), String::from_utf8_lossy(&o.stderr).into())
}

#[test]
fn unknown_subcommand_prints_usage_and_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["frobnicate"][..], &[]] {
        let o = iotlm(dir.path(), args);
        assert_eq!(o.status.code(), Some(1));
        assert!(text(&o).1.contains("Usage"));
    }
    let o = iotlm(dir.path(), &["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(text(&o).0.contains("gen-data"));
}

#[test]
fn gradcheck_exits_0() {
    let dir = tempfile::tempdir().unwrap();
    let o = iotlm(dir.path(), &["gradcheck"]);
    let (out, _) = text(&o);
    assert_eq!(o.status.code(), Some(0), "{out}");
    assert!(!out.contains("FAIL"));
    assert!(out.lines().filter(|l| l.contains(" pass ")).count() >= 27);
}

#[test]
fn bad_config_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "epochs = 2\nmystery = true\n").unwrap();
    std::fs::write(dir.path().join("zero.toml"), "lr = 0.0\n").unwrap();
    for cfg in ["bad.toml", "zero.toml"] {
        let o = iotlm(dir.path(), &["--config", cfg, "gen-data"]);
        assert_eq!(o.status.code(), Some(1), "{cfg}");
        assert!(text(&o).1.starts_with("error: config error"));
    }
    let o = iotlm(dir.path(), &["--config", "missing.toml", "gen-data"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).1.contains("missing.toml"));
}

#[test]
fn smoke_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("smoke.toml"), "samples_per_task = 25\ntune_epochs = 1\n").unwrap();
    let ok = |args: &[&str]| {
        let o = iotlm(d, args);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", text(&o).1);
        text(&o).0
    };
    let start = Instant::now();
    let out = ok(&["--config", "smoke.toml", "--out", "data", "gen-data"]);
    assert!(out.contains("train.jsonl: 160 records"));
    ok(&["--config", "smoke.toml", "--out", "run", "pretrain", "--data", "data"]);
    let out = ok(&["--out", "ev", "eval", "--data", "data", "--checkpoint", "run/pretrain.ckpt"]);
    assert!(start.elapsed().as_secs() < 600);
    assert_eq!(out.lines().count(), 8);
    let report = std::fs::read_to_string(d.join("ev/report.jsonl")).unwrap();
    assert_eq!(report.lines().count(), 8);
    for line in report.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["value"].as_f64().unwrap().is_finite());
    }
    for f in ["run/init.ckpt", "run/pretrain_log.json", "run/run_manifest.json", "ev/run_manifest.json"] {
        assert!(d.join(f).exists(), "{f}");
    }

    ok(&["--out", "tuned", "tune", "--data", "data", "--checkpoint", "run/pretrain.ckpt"]);
    std::fs::write(d.join("chat.txt"), ":help\n:nope\n:load data/test.jsonl 0\nwhat is it?\n:quit\nignored\n").unwrap();
    let out = ok(&["chat", "--checkpoint", "tuned/tune.ckpt", "--script", "chat.txt"]);
    assert!(out.contains("unknown command :nope"));
    assert_eq!(out.matches("answer: ").count(), 1);

    // the gaze checkpoint does not know the dataset's other tasks
    std::fs::write(d.join("gaze.toml"), "samples_per_task = 25\nepochs = 1\ntasks = [\"gaze\"]\n").unwrap();
    ok(&["--config", "gaze.toml", "--out", "gaze", "pretrain", "--data", "data"]);
    let o = iotlm(d, &["--out", "ev2", "eval", "--data", "data", "--checkpoint", "gaze/pretrain.ckpt"]);
    assert_eq!(o.status.code(), Some(1));

    // tampered records fail verification
    let test = d.join("data/test.jsonl");
    let mut bytes = std::fs::read(&test).unwrap();
    bytes.push(b'\n');
    std::fs::write(&test, bytes).unwrap();
    let o = iotlm(d, &["--out", "ev3", "eval", "--data", "data", "--checkpoint", "run/pretrain.ckpt"]);
    assert_eq!(o.status.code(), Some(2));

    let o = iotlm(d, &["--out", "ev4", "eval", "--data", "data", "--checkpoint", "nowhere.ckpt"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).1.contains("nowhere.ckpt"));
}
