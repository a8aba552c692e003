use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bregkge"))
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn run_dir_of(o: &Output) -> PathBuf {
    let line = stdout(o)
        .lines()
        .find_map(|l| l.strip_prefix("run directory: ").map(str::to_owned))
        .expect("run directory printed");
    PathBuf::from(line)
}

#[test]
fn missing_config_exits_2_naming_the_path() {
    let o = run(&["train", "--config", "/nonexistent/run.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/run.toml"));
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(fixtures().join("toy.toml")).unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, text.replace("lr = 0.05", "lr = 0.05\nmomentum = 0.9")).unwrap();
    let o = run(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("momentum"));
}

#[test]
fn toy_training_is_fast_deterministic_and_echoes_its_config() {
    let out = tempfile::tempdir().unwrap();
    let cfg = fixtures().join("toy.toml");
    let start = Instant::now();
    let a = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.path().to_str().unwrap(),
        "--threads",
        "1",
    ]);
    assert!(start.elapsed() < Duration::from_secs(60));
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    let dir = run_dir_of(&a);
    for f in ["config.toml", "report.json", "progress.log", "checkpoint.bin", "timing.json"] {
        assert!(dir.join(f).exists(), "{f}");
    }
    let report = std::fs::read_to_string(dir.join("report.json")).unwrap();
    let log = std::fs::read_to_string(dir.join("progress.log")).unwrap();
    assert_eq!(log.lines().next().unwrap().split('\t').count(), 3);

    // the echoed config trains to the same run directory with identical output
    let json: serde_json::Value = serde_json::from_str(&report).unwrap();
    let echoed = out.path().join("echo.toml");
    std::fs::write(&echoed, json["config"].as_str().unwrap()).unwrap();
    let out2 = tempfile::tempdir().unwrap();
    let b = run(&[
        "train",
        "--config",
        echoed.to_str().unwrap(),
        "--out",
        out2.path().to_str().unwrap(),
        "--threads",
        "2",
    ]);
    assert_eq!(b.status.code(), Some(0), "{}", stderr(&b));
    let dir2 = run_dir_of(&b);
    assert_eq!(dir.file_name(), dir2.file_name());
    let report2 = std::fs::read_to_string(dir2.join("report.json")).unwrap();
    assert_eq!(report.replace(out.path().to_str().unwrap(), ""), report2.replace(out2.path().to_str().unwrap(), ""));
    assert_eq!(
        std::fs::read(dir.join("checkpoint.bin")).unwrap(),
        std::fs::read(dir2.join("checkpoint.bin")).unwrap()
    );

    // evaluation of the saved checkpoint
    let e = run(&[
        "evaluate",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        dir.join("checkpoint.bin").to_str().unwrap(),
    ]);
    assert_eq!(e.status.code(), Some(0), "{}", stderr(&e));
    let m: serde_json::Value = serde_json::from_str(&stdout(&e)).unwrap();
    assert!(m["mrr"].as_f64().unwrap() > 0.0);

    // warm start with a different width is rejected, naming the field
    let wide = out.path().join("wide.toml");
    let text = std::fs::read_to_string(&cfg).unwrap().replace("dim = 8", "dim = 16");
    std::fs::write(&wide, text.replace("root = \"toy\"", &format!("root = {:?}", fixtures().join("toy")))).unwrap();
    let w = run(&[
        "train",
        "--config",
        wide.to_str().unwrap(),
        "--warm-start",
        dir.join("checkpoint.bin").to_str().unwrap(),
        "--out",
        out.path().to_str().unwrap(),
    ]);
    assert_eq!(w.status.code(), Some(2));
    assert!(stderr(&w).contains("dim"), "{}", stderr(&w));
}

#[test]
fn pretrain_pipeline_runs_on_the_toy_graph() {
    let out = tempfile::tempdir().unwrap();
    let o = run(&[
        "pretrain-pipeline",
        "--config",
        fixtures().join("toy.toml").to_str().unwrap(),
        "--finetune",
        fixtures().join("toy_finetune.toml").to_str().unwrap(),
        "--out",
        out.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let dir = run_dir_of(&o);
    let s: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("pipeline.json")).unwrap()).unwrap();
    for key in ["pretrain_dev_mrr", "finetune_dev_mrr", "cold_dev_mrr"] {
        assert!(s[key].as_f64().unwrap() > 0.0);
    }
}

#[test]
fn oracle_rows_pass() {
    let o = run(&["oracle", "--worlds", "5"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rows: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 5);

    let nu8 = run(&["oracle", "--worlds", "5", "--nu", "8", "--row", "ns-uni"]);
    assert_eq!(nu8.status.code(), Some(0));

    let sans = run(&["oracle", "--row", "sans"]);
    assert_eq!(sans.status.code(), Some(0));
    let r: serde_json::Value = serde_json::from_str(&stdout(&sans)).unwrap();
    assert_eq!(r["period_two"], true);

    assert_eq!(run(&["oracle", "--row", "bogus"]).status.code(), Some(2));
}

#[test]
fn curve_writes_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("curve.csv");
    let o = run(&["curve", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let text = std::fs::read_to_string(&out).unwrap();
    let rows: Vec<Vec<f64>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 999);
    assert!(rows.iter().all(|r| r[1] >= r[2]));
    let mid = rows.iter().find(|r| (r[0] - 0.5).abs() < 1e-12).unwrap();
    assert_eq!((mid[1], mid[2]), (0.0, 0.0));

    assert_eq!(run(&["curve", "--points", "1", "--out", out.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(run(&["curve", "--ref", "1.5", "--out", out.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn stats_of_identical_splits_is_zero() {
    let train = fixtures().join("toy/train.txt");
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("stats.csv");
    let o = run(&[
        "stats",
        "--train",
        train.to_str().unwrap(),
        "--test",
        train.to_str().unwrap(),
        "--csv",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(v["kl"]["kl"].as_f64().unwrap().abs() < 1e-6);
    assert!(std::fs::read_to_string(csv).unwrap().starts_with("entities,"));

    let missing = run(&["stats", "--train", "/nope/train.txt", "--test", train.to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(3));
}

#[test]
fn bundled_toy_config_trains_quickly() {
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml");
    let out = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let o = run(&["train", "--config", cfg.to_str().unwrap(), "--out", out.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(start.elapsed() < Duration::from_secs(60));
}

#[test]
fn missing_dataset_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(fixtures().join("toy.toml")).unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, text.replace("root = \"toy\"", "root = \"absent\"")).unwrap();
    let o = run(&["train", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}
