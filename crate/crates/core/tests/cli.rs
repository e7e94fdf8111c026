//! Command-line contract: exit codes, run layout, config files, sweeps and aggregation.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sqrt_trust::analytics::read_metrics;

fn cli() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sqrt-trust"));
    cmd.env_remove("SQRT_TRUST_OUT");
    cmd
}

fn run(args: &[&str], out: &Path) -> Output {
    cli().args(args).arg("--out").arg(out).output().unwrap()
}

const TINY: &[&str] = &[
    "--steps", "128", "--batch-size", "64", "--minibatch-size", "32", "--epochs", "2", "--hidden", "8",
    "--eval-episodes", "2", "--eval-every", "1",
];

fn train_args<'a>(env: &'a str, algo: &'a str, seeds: &'a str) -> Vec<&'a str> {
    let mut v = vec!["train", "--env", env, "--algo", algo, "--seeds", seeds];
    v.extend_from_slice(TINY);
    v
}

#[test]
fn unknown_algorithm_is_a_usage_error() {
    let out = cli().args(["train", "--env", "cartpole", "--algo", "sgd"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown algorithm"));
}

#[test]
fn invalid_configuration_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = train_args("cartpole", "btrpo", "0");
    args.extend(["--beta", "0"]);
    assert_eq!(run(&args, dir.path()).status.code(), Some(2));
    let out = run(&["train", "--env", "cartpole", "--algo", "ppo", "--steps", "10"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_writes_one_directory_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&train_args("cartpole", "bppo", "0..3"), dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for k in 0..4 {
        let run_dir = dir.path().join(format!("cartpole/bppo/seed{k}"));
        for f in ["manifest.cfg", "metrics.csv", "policy.bin", "value.bin"] {
            assert!(run_dir.join(f).is_file(), "missing {f} in seed{k}");
        }
        assert_eq!(read_metrics(&run_dir.join("metrics.csv")).unwrap().len(), 2);
    }
}

#[test]
fn output_root_falls_back_to_the_environment_variable() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli()
        .args(train_args("frozenlake", "ppo", "0"))
        .env("SQRT_TRUST_OUT", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("frozenlake/ppo/seed0/metrics.csv").is_file());
}

#[test]
fn manifest_relaunch_reproduces_metrics() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run(&train_args("mountaincar_continuous", "btrpo", "4"), &dir.path().join("a"))
        .status
        .success());
    let first = dir.path().join("a/mountaincar_continuous/btrpo/seed4");
    let out = cli()
        .args(["train", "--config"])
        .arg(first.join("manifest.cfg"))
        .arg("--out")
        .arg(dir.path().join("b"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let second = dir.path().join("b/mountaincar_continuous/btrpo/seed4");
    assert_eq!(
        fs::read(first.join("metrics.csv")).unwrap(),
        fs::read(second.join("metrics.csv")).unwrap()
    );
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.cfg");
    fs::write(
        &cfg,
        "# small run\nenv = cartpole\nalgo = ppo\nsteps = 128\nrollout_len = 64\nminibatch_size = 32\nhidden = 8\nepsilon = 0.3\neval_episodes = 1\n",
    )
    .unwrap();
    let out = cli()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--epsilon", "0.1", "--batch-size", "32"])
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = fs::read_to_string(dir.path().join("cartpole/ppo/seed0/manifest.cfg")).unwrap();
    assert!(manifest.contains("epsilon = 0.1\n"));
    assert!(manifest.contains("rollout_len = 32\n"));
    assert!(manifest.contains("hidden = 8\n"));
}

#[test]
fn parallel_jobs_match_sequential_runs() {
    let dir = tempfile::tempdir().unwrap();
    let mut par = train_args("cartpole", "btrpo", "0,1,2");
    par.extend(["--jobs", "3"]);
    assert!(run(&par, &dir.path().join("par")).status.success());
    assert!(run(&train_args("cartpole", "btrpo", "0,1,2"), &dir.path().join("seq")).status.success());
    for k in 0..3 {
        let rel = format!("cartpole/btrpo/seed{k}/metrics.csv");
        assert_eq!(
            fs::read(dir.path().join("par").join(&rel)).unwrap(),
            fs::read(dir.path().join("seq").join(&rel)).unwrap()
        );
    }
}

#[test]
fn single_cell_sweep_matches_train() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run(&train_args("cartpole", "bppo", "0"), &dir.path().join("t")).status.success());
    let mut sweep = train_args("cartpole", "bppo", "0");
    sweep[0] = "sweep";
    sweep.extend(["--grid", "epsilon=0.2"]);
    let out = run(&sweep, &dir.path().join("s"));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        fs::read(dir.path().join("t/cartpole/bppo/seed0/metrics.csv")).unwrap(),
        fs::read(dir.path().join("s/eps0.2/cartpole/bppo/seed0/metrics.csv")).unwrap()
    );
    let summary = fs::read_to_string(dir.path().join("s/sweep_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 2);
    assert!(summary.starts_with("cell,epsilon,final_iqm,final_mean,n_completed,n_failed\n"));
}

#[test]
fn sweep_rejects_unknown_axes() {
    let dir = tempfile::tempdir().unwrap();
    let mut sweep = train_args("cartpole", "bppo", "0");
    sweep[0] = "sweep";
    sweep.extend(["--grid", "momentum=0.9"]);
    assert_eq!(run(&sweep, dir.path()).status.code(), Some(2));
}

#[test]
fn verify_lists_runs_and_catches_a_perturbed_coefficient() {
    let list = cli().args(["verify", "--list"]).output().unwrap();
    assert!(list.status.success());
    let names = String::from_utf8_lossy(&list.stdout);
    assert!(names.contains("bc_kl_equivalence") && names.contains("grad_learners"));

    let clean = cli().arg("verify").output().unwrap();
    assert!(clean.status.success(), "{}", String::from_utf8_lossy(&clean.stdout));

    let faulty = cli()
        .args(["verify", "--perturb-bc", "0.01", "--only", "bc_kl_equivalence"])
        .output()
        .unwrap();
    assert_eq!(faulty.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&faulty.stdout).contains("FAIL bc_kl_equivalence"));
}

#[test]
fn aggregate_groups_cells_and_survives_a_corrupt_run() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run(&train_args("cartpole", "bppo", "0..3"), dir.path()).status.success());
    assert!(run(&train_args("cartpole", "ppo", "0..1"), dir.path()).status.success());
    fs::write(dir.path().join("cartpole/bppo/seed2/metrics.csv"), "garbage\n").unwrap();

    let out = cli().args(["aggregate", "--out"]).arg(dir.path()).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
    let report = fs::read_to_string(dir.path().join("iqm_report.csv")).unwrap();
    let rows: Vec<&str> = report.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    let bppo = rows.iter().find(|r| r.starts_with("cartpole,bppo,")).unwrap();
    assert!(bppo.ends_with(",3"), "{bppo}");
    assert!(dir.path().join("curves.csv").is_file());
}

#[test]
fn aggregate_without_runs_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli().args(["aggregate", "--out"]).arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}
