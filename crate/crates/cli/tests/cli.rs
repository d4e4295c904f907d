use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn eventrl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eventrl"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn run_ok(args: &[&str]) {
    let out = eventrl(args);
    assert!(out.status.success(), "eventrl {args:?} failed:\n{}", stderr(&out));
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

const TINY_BUS_TRAIN: &str = r#"
[experiment]
seed = 11

[trpo]
batch_episodes = 3
epochs = 2
hidden_sizes = [8]
checkpoint_every = 1
"#;

#[test]
fn bad_config_reports_the_line() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "bad.toml", "[experiment]\nseed = 1\n\n[trpo]\nmax_kl = 0.01\nmax_kll = 0.02\n");
    let out = eventrl(&["train", "--config", &cfg, "--out", dir.path().join("run").to_str().unwrap()]);
    assert!(!out.status.success());
    let msg = stderr(&out);
    assert!(msg.contains("line 6") && msg.contains("max_kll"), "{msg}");

    let cfg = write(dir.path(), "type.toml", "[experiment]\nseed = 1\n[mgae]\ngamma = \"fast\"\n");
    let msg = stderr(&eventrl(&["train", "--config", &cfg]));
    assert!(msg.contains("line 4"), "{msg}");
}

#[test]
fn seed_is_required_and_kind_must_match() {
    let dir = TempDir::new().unwrap();
    let out_dir = dir.path().join("run");
    let msg = stderr(&eventrl(&["race-study", "--out", out_dir.to_str().unwrap()]));
    assert!(msg.contains("seed"), "{msg}");

    let cfg = write(dir.path(), "kind.toml", "[experiment]\nkind = \"train\"\nseed = 2\n");
    let msg = stderr(&eventrl(&["eval", "--config", &cfg, "--out", out_dir.to_str().unwrap()]));
    assert!(msg.contains("train") && msg.contains("eval"), "{msg}");

    let cfg = write(dir.path(), "ckpt.toml", "[experiment]\nseed = 2\n[eval]\npolicy = \"checkpoint\"\ncheckpoint = \"missing.ckpt\"\n");
    let msg = stderr(&eventrl(&["eval", "--config", &cfg, "--out", out_dir.to_str().unwrap()]));
    assert!(msg.contains("missing.ckpt"), "{msg}");
}

#[test]
fn training_is_byte_reproducible_and_manifest_reruns() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "train.toml", TINY_BUS_TRAIN);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run_ok(&["train", "--config", &cfg, "--out", a.to_str().unwrap()]);
    run_ok(&["train", "--config", &cfg, "--out", b.to_str().unwrap()]);
    for name in ["curve.csv", "policy.ckpt", "baseline.ckpt", "manifest.toml", "checkpoints/policy-00002.ckpt"] {
        assert_eq!(read(&a, name), read(&b, name), "{name} differs");
    }
    let curve = String::from_utf8(read(&a, "curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 3);

    let manifest = String::from_utf8(read(&a, "manifest.toml")).unwrap();
    assert!(manifest.starts_with("# eventrl "));
    assert!(manifest.contains("batch_episodes = 3"));
    assert!(manifest.contains("gamma = 0.00001"));
    let c = dir.path().join("c");
    run_ok(&["train", "--config", a.join("manifest.toml").to_str().unwrap(), "--out", c.to_str().unwrap()]);
    assert_eq!(read(&a, "policy.ckpt"), read(&c, "policy.ckpt"));
    assert_eq!(read(&a, "manifest.toml"), read(&c, "manifest.toml"));

    let d = dir.path().join("d");
    run_ok(&["train", "--config", &cfg, "--seed", "12", "--out", d.to_str().unwrap()]);
    assert_ne!(read(&a, "policy.ckpt"), read(&d, "policy.ckpt"));
}

#[test]
fn eval_writes_episode_outputs() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "train.toml", TINY_BUS_TRAIN);
    let run = dir.path().join("train");
    run_ok(&["train", "--config", &cfg, "--out", run.to_str().unwrap()]);

    let eval_cfg = write(
        dir.path(),
        "eval.toml",
        "[experiment]\nseed = 5\n[eval]\nepisodes = 4\npolicy = \"checkpoint\"\ncheckpoint = \"train/policy.ckpt\"\ngreedy = true\n",
    );
    let out = dir.path().join("eval");
    run_ok(&["eval", "--config", &eval_cfg, "--out", out.to_str().unwrap()]);
    let episodes = String::from_utf8(read(&out, "episodes.csv")).unwrap();
    assert_eq!(episodes.lines().count(), 5);
    assert!(String::from_utf8(read(&out, "arrivals.csv")).unwrap().lines().count() > 1);
    assert!(String::from_utf8(read(&out, "trajectories.csv")).unwrap().starts_with("episode,agent,k,T,dt,action,reward"));
    let summary = String::from_utf8(read(&out, "summary.csv")).unwrap();
    assert!(summary.lines().nth(1).unwrap().starts_with("checkpoint,4,"), "{summary}");

    let wf_cfg = write(
        dir.path(),
        "wf.toml",
        "[experiment]\nenvironment = \"wildfire\"\nseed = 5\n[eval]\nepisodes = 3\npolicy = \"scripted\"\n",
    );
    let out = dir.path().join("wf");
    run_ok(&["eval", "--config", &wf_cfg, "--out", out.to_str().unwrap()]);
    assert!(String::from_utf8(read(&out, "events.csv")).unwrap().lines().count() > 1);

    let bad = write(
        dir.path(),
        "mismatch.toml",
        "[experiment]\nenvironment = \"wildfire\"\nseed = 5\n[eval]\npolicy = \"checkpoint\"\ncheckpoint = \"train/policy.ckpt\"\n",
    );
    let msg = stderr(&eventrl(&["eval", "--config", &bad, "--out", out.to_str().unwrap()]));
    assert!(msg.contains("inputs"), "{msg}");
}

#[test]
fn race_study_covers_every_distribution() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        dir.path(),
        "race.toml",
        "[experiment]\nseed = 3\n[race]\ntrials = 400\nn_min = 2\nn_max = 4\n",
    );
    let out = dir.path().join("race");
    run_ok(&["race-study", "--config", &cfg, "--out", out.to_str().unwrap()]);
    let points = String::from_utf8(read(&out, "race_points.csv")).unwrap();
    assert_eq!(points.lines().next(), Some("distribution,N,dt_solved"));
    let mut names: Vec<&str> = points.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names.len(), 9);
    names.dedup();
    assert_eq!(names.len(), 3);
    assert_eq!(String::from_utf8(read(&out, "race_fits.csv")).unwrap().lines().count(), 4);
    assert!(String::from_utf8(read(&out, "plot_race.py")).unwrap().contains("race_points.csv"));
}

#[test]
fn baseline_optimize_reports_thresholds() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        dir.path(),
        "de.toml",
        "[experiment]\nseed = 4\n[de]\npopulation = 5\ngenerations = 2\n[eval]\nepisodes = 3\n",
    );
    let out = dir.path().join("de");
    run_ok(&["baseline-optimize", "--config", &cfg, "--out", out.to_str().unwrap()]);
    let text = String::from_utf8(read(&out, "thresholds.csv")).unwrap();
    let row: Vec<f64> = text.lines().nth(1).unwrap().split(',').skip(1).take(3).map(|x| x.parse().unwrap()).collect();
    assert!(row[0] > row[1] && row[1] > row[2] && row[2] >= 0.0, "{text}");
    assert!(text.lines().nth(2).unwrap().starts_with("no-holding"));

    let wf = write(dir.path(), "wf.toml", "[experiment]\nenvironment = \"wildfire\"\nseed = 4\n");
    assert!(!eventrl(&["baseline-optimize", "--config", &wf, "--out", out.to_str().unwrap()]).status.success());
}

#[test]
fn tiny_transfer_study() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        dir.path(),
        "transfer.toml",
        r#"
[experiment]
seed = 8

[trpo]
batch_episodes = 2
epochs = 1
hidden_sizes = [4]

[transfer]
replicates = 2
eval_episodes = 3
variants = [{}, { time_step = 1.0 }, { time_step = 1.0, fire_health = 2.9999 }]
"#,
    );
    let out = dir.path().join("transfer");
    run_ok(&["transfer-study", "--config", &cfg, "--out", out.to_str().unwrap()]);
    let table = String::from_utf8(read(&out, "transfer.csv")).unwrap();
    let labels: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(labels, ["ED", "FS-1", "FS-1(health=2.9999)"]);
    assert_eq!(String::from_utf8(read(&out, "transfer_runs.csv")).unwrap().lines().count(), 7);
    assert!(out.join("policies/variant2-rep1.ckpt").is_file());
    assert!(out.join("plot_transfer.py").is_file());
    let manifest = String::from_utf8(read(&out, "manifest.toml")).unwrap();
    assert!(manifest.contains("environment = \"wildfire\"") && manifest.contains("gamma = 0.02"), "{manifest}");
}
