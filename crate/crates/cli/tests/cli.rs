use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use decoy_core::{Checkpoint, RunConfig};

fn decoy(out_dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_decoy"))
        .args(args)
        .env("DECOY_OUTPUT_DIR", out_dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn text(out: &Output) -> String {
    format!(
        "{}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    )
}

const SMOKE: &str = r#"
seed = 7

[network]
hidden = 8

[train]
n_envs = 2
horizon = 100
total_steps = 100
minibatch = 64
epochs = 1

[curriculum]
stages = 1

[eval]
episodes = 2
"#;

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, body).unwrap();
    path
}

fn checkpoints(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "ckpt"))
        .collect();
    v.sort();
    v
}

fn fresh_checkpoint(dir: &Path) -> PathBuf {
    let cfg = RunConfig::from_toml_str(SMOKE).unwrap();
    let path = dir.join("fresh.ckpt");
    Checkpoint::fresh(cfg).unwrap().save(&path).unwrap();
    path
}

#[test]
fn missing_config_exits_2_naming_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.toml");
    let out = decoy(tmp.path(), &["train", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out).contains(missing.to_str().unwrap()), "{}", text(&out));
}

#[test]
fn unknown_key_reports_its_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "seed = 1\n[train]\nlearning_rate = 0.1\n");
    let out = decoy(tmp.path(), &["train", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let msg = text(&out);
    assert!(msg.contains("line 3") && msg.contains("learning_rate"), "{msg}");
}

#[test]
fn smoke_run_writes_one_checkpoint_and_reruns_identically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut finals = Vec::new();
    for dir in [a.path(), b.path()] {
        let cfg = write_config(dir, SMOKE);
        let out = decoy(dir, &["train", cfg.to_str().unwrap()]);
        assert!(out.status.success(), "{}", text(&out));
        let ckpts = checkpoints(dir);
        assert_eq!(ckpts.len(), 1, "{ckpts:?}");
        finals.push(std::fs::read(&ckpts[0]).unwrap());

        let report = std::fs::read_to_string(dir.join("stage1_report.toml")).unwrap();
        let hash = RunConfig::from_toml_str(SMOKE).unwrap().hash();
        assert!(report.contains("master_seed = 7"), "{report}");
        assert!(report.contains(&hash), "{report}");
        let stats = std::fs::read_to_string(dir.join("stage1_stats.csv")).unwrap();
        assert_eq!(stats.lines().count(), 2);
    }
    assert!(finals[0] == finals[1], "reruns produced different checkpoints");
}

#[test]
fn eval_of_untrained_policy_is_far_from_covering() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = fresh_checkpoint(tmp.path());
    let out = decoy(tmp.path(), &["eval", ckpt.to_str().unwrap(), "--episodes", "30"]);
    assert!(out.status.success(), "{}", text(&out));
    let csv = std::fs::read_to_string(tmp.path().join("eval_episodes.csv")).unwrap();
    let mut rdr = csv::Reader::from_reader(csv.as_bytes());
    let header = rdr.headers().unwrap().clone();
    let col = header.iter().position(|h| h == "bipartite_distance").unwrap();
    let vals: Vec<f64> = rdr.records().map(|r| r.unwrap()[col].parse().unwrap()).collect();
    assert_eq!(vals.len(), 30);
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    assert!(mean > 0.5, "mean bipartite distance {mean}");
}

#[test]
fn episode_override_is_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = fresh_checkpoint(tmp.path());
    let plot = tmp.path().join("plot.csv");
    let out = decoy(
        tmp.path(),
        &["eval", ckpt.to_str().unwrap(), "--episodes", "5", "--plot-data", plot.to_str().unwrap()],
    );
    assert!(out.status.success(), "{}", text(&out));
    let report = std::fs::read_to_string(tmp.path().join("eval_report.toml")).unwrap();
    assert!(report.contains("episodes = 5"), "{report}");
    let csv = std::fs::read_to_string(tmp.path().join("eval_episodes.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    let plot = std::fs::read_to_string(plot).unwrap();
    assert_eq!(plot.lines().count(), 2);
    assert!(plot.starts_with("w_dec,"));
}

#[test]
fn tampered_checkpoint_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = fresh_checkpoint(tmp.path());
    let mut bytes = std::fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x01;
    std::fs::write(&ckpt, bytes).unwrap();
    let out = decoy(tmp.path(), &["eval", ckpt.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(text(&out).contains("hash mismatch"), "{}", text(&out));
}

#[test]
fn missing_checkpoint_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = decoy(tmp.path(), &["eval", "absent.ckpt"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out).contains("absent.ckpt"));
}

#[test]
fn gradcheck_passes_and_flags_a_corrupted_block() {
    let tmp = tempfile::tempdir().unwrap();
    let ok = decoy(tmp.path(), &["gradcheck", "--seed", "3"]);
    assert!(ok.status.success(), "{}", text(&ok));
    let again = decoy(tmp.path(), &["gradcheck", "--seed", "3"]);
    assert_eq!(ok.stdout, again.stdout);

    let bad = decoy(tmp.path(), &["gradcheck", "--seed", "3", "--corrupt", "op.tanh"]);
    assert!(!bad.status.success());
    assert!(text(&bad).contains("op.tanh"), "{}", text(&bad));
}

#[test]
fn transfer_evaluates_at_a_new_team_size() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = fresh_checkpoint(tmp.path());
    let out = decoy(tmp.path(), &["transfer", ckpt.to_str().unwrap(), "--agents", "3"]);
    assert!(out.status.success(), "{}", text(&out));
}

#[test]
fn grid_without_parent_checkpoint_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMOKE);
    let out = decoy(tmp.path(), &["grid", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", text(&out));
}
