use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
variants = ["mf-eril", "ermbc"]
seeds = [0, 1]
expert_trajectories = 3
test_trajectories = 2
expert_seed = 4
reference_episodes = 10
out_dir = "results"

[env]
kind = "gridworld"
width = 3
height = 3
goal = [2, 2]
slip = 0.1
slip_to = "sideways"
discount = 0.9

[regularization]
kappa = 2.0
eta = 2.0

[schedule]
iterations = 2
disc_steps = 5
pe_steps = 5
improve_steps = 5
model_steps = 5
bc_steps = 5
batch_size = 16
n_real = 20
n_sim = 200
horizon = 15
lr = 0.05
eval_episodes = 4

[sweep]
trajectories = [1, 3]
"#;

fn eril(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eril")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, TINY).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn solve_writes_the_oracle_table() {
    let dir = tempfile::tempdir().unwrap();
    let mdp = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/chain.toml");
    let out = eril(&["solve", "--config", s(&mdp), "--out", s(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("oracle.csv")).unwrap();
    assert!(csv.starts_with("x,u,x_next,p,q,pi,b,v,q_value,model_log_ratio,policy_log_ratio\n"));
    // deterministic chain: one row per (x, u)
    assert_eq!(csv.lines().count(), 1 + 6);
}

#[test]
fn compare_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = eril(&["compare", "--config", s(&cfg), "--out", s(out), "--svg"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for name in ["mf-eril_seed0.csv", "mf-eril_seed1.csv", "ermbc_seed0.csv", "ermbc_seed1.csv", "summary.csv", "returns.svg"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn seed_and_variant_flags_narrow_a_comparison() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("one");
    let o = eril(&["compare", "--config", s(&cfg), "--out", s(&out), "--seed", "7", "--variant", "ermbc"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("ermbc_seed7.csv").exists());
    assert!(!out.join("mf-eril_seed0.csv").exists());
}

#[test]
fn train_writes_metrics_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let o = eril(&["train", "--config", s(&cfg), "--variant", "mb-eril", "--seed", "2", "--out", s(dir.path())]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("mb-eril_seed2.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(dir.path().join("mb-eril_seed2.json").exists());
}

#[test]
fn expert_and_sweep_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let o = eril(&["expert", "--config", s(&cfg), "--out", s(dir.path())]);
    assert!(o.status.success());
    let expert = std::fs::read_to_string(dir.path().join("expert.csv")).unwrap();
    assert_eq!(expert.lines().count(), 1 + 3 * 15);
    let o = eril(&["sweep-expert", "--config", s(&cfg), "--out", s(dir.path())]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let sweep = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 1 + 2 * 2 * 2);
}

#[test]
fn property_check_passes() {
    let o = eril(&["check"]);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "{text}");
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 6);
}

#[test]
fn bad_input_is_reported() {
    let o = eril(&["train", "--config", "missing.toml", "--variant", "bc"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    let o = eril(&["train", "--config", "x.toml", "--variant", "gail"]);
    assert!(!o.status.success());
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, TINY.replace("iterations = 2", "iterations = 2\nturbo = true")).unwrap();
    let o = eril(&["compare", "--config", s(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("turbo"));
}
