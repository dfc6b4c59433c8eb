use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Process;

use bff_cli::config::{ContinuousConfig, DiscreteConfig, DiscreteRewardConfig, EnvironmentConfig, TransitionConfig};
use bff_cli::manifest::RunManifest;
use bff_cli::{Command, ExperimentConfig, Input, RunOptions, Runner};
use bff_core::env::{Diffusion, Drift, StateReward, TWO_PI};
use proptest::prelude::*;

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(command: Command, text: &str, out: &Path, allow_oracle: bool) -> Result<bff_cli::RunReport, bff_cli::CliError> {
    let opts = RunOptions {
        out_dir: out.to_path_buf(),
        allow_oracle,
    };
    Runner::new().run(command, &[Input::from_text(text)?], &opts)
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

const DISCRETE: &str = r#"
schema_version = 1
master_seed = 4

[environment]
kind = "discrete"
"#;

const CONTINUOUS: &str = r#"
schema_version = 1
master_seed = 4

[environment]
kind = "continuous"
"#;

#[test]
fn simulate_discrete_writes_ring_states() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(configs_dir().join("simulate_discrete.toml")).unwrap();
    run(Command::Simulate, &text, dir.path(), false).unwrap();
    let rows = csv_rows(&dir.path().join("trajectory.csv"));
    assert_eq!(rows.len(), 101);
    for r in &rows {
        let i: u32 = r[0].parse().unwrap();
        assert!(i < 32);
    }
}

#[test]
fn simulate_is_reproducible() {
    let text = format!("{DISCRETE}\n[simulate]\nlength = 500\n");
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run(Command::Simulate, &text, a.path(), false).unwrap();
    let rb = run(Command::Simulate, &text, b.path(), false).unwrap();
    assert_eq!(ra.manifest.outputs, rb.manifest.outputs);
    assert_eq!(ra.manifest.config_sha256, rb.manifest.config_sha256);
    assert_eq!(ra.manifest.input_digests, rb.manifest.input_digests);
}

#[test]
fn simulate_continuous_stays_on_circle() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(configs_dir().join("simulate_continuous.toml")).unwrap();
    run(Command::Simulate, &text, dir.path(), false).unwrap();
    let rows = csv_rows(&dir.path().join("trajectory.csv"));
    assert_eq!(rows.len(), 100_001);
    assert!(rows.iter().all(|r| {
        let s: f64 = r[0].parse().unwrap();
        s > 0.0 && s <= TWO_PI
    }));
}

fn exact_column(text: &str) -> Vec<f64> {
    let dir = tempfile::tempdir().unwrap();
    run(Command::SolveExact, text, dir.path(), false).unwrap();
    csv_rows(&dir.path().join("value_exact.csv"))
        .iter()
        .map(|r| r[1].parse().unwrap())
        .collect()
}

#[test]
fn solve_exact_ring_is_a_fixed_point() {
    let text = fs::read_to_string(configs_dir().join("solve_exact_ring.toml")).unwrap();
    let v = exact_column(&text);
    assert_eq!(v.len(), 32);
    let n = 32;
    for i in 0..n {
        let a = 0.2 * (TWO_PI * i as f64 / n as f64).sin();
        let r = 1.0 + (TWO_PI * i as f64 / n as f64).cos();
        let tv = r + 0.9 * ((0.5 - a) * v[(i + 1) % n] + (0.5 + a) * v[(i + n - 1) % n]);
        assert!((tv - v[i]).abs() < 1e-10);
    }
}

#[test]
fn solve_exact_special_cases() {
    let zero = exact_column(&format!("{DISCRETE}reward = \"zero\"\n"));
    assert!(zero.iter().all(|&x| x == 0.0));

    let myopic = exact_column(&format!("{DISCRETE}gamma = 0.0\n"));
    for (i, v) in myopic.iter().enumerate() {
        assert!((*v - 1.0 - (TWO_PI * i as f64 / 32.0).cos()).abs() < 1e-12);
    }

    let dir = tempfile::tempdir().unwrap();
    let err = run(Command::SolveExact, CONTINUOUS, dir.path(), false).unwrap_err();
    assert!(err.to_string().contains("exact solve unavailable"));
    assert_eq!(err.exit_code(), 2);
}

const SMALL_TRAIN: &str = r#"
[trainer]
estimators = ["bff-loss", "sample-cloning"]
tau = 0.1
batch_size = 1
epochs = 1
trajectory_length = 2000
eval_every = 100
"#;

#[test]
fn zero_learning_rate_gives_flat_trace() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{DISCRETE}{}", SMALL_TRAIN.replace("tau = 0.1", "tau = 0.0"));
    let report = run(Command::Train, &text, dir.path(), false).unwrap();
    for r in &report.runs {
        let rows = csv_rows(&dir.path().join(format!("trace_{}.csv", r.label)));
        assert!(rows.len() > 2);
        assert!(rows.iter().all(|row| row[1] == rows[0][1] && row[2] == "1"));
    }
    for name in ["trace_bff-loss.csv", "profile_bff-loss.csv", "checkpoint_bff-loss.bin"] {
        assert!(report.outputs.iter().any(|o| o == name), "{name}");
    }
    let profile = fs::read_to_string(dir.path().join("profile_bff-loss.csv")).unwrap();
    assert!(profile.starts_with("s,v_approx,v_reference\n"));
}

#[test]
fn oracle_requires_flag() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{DISCRETE}{}", SMALL_TRAIN.replace("\"sample-cloning\"", "\"uncorrelated\""));
    let err = run(Command::Train, &text, dir.path(), false).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    run(Command::Train, &text, dir.path(), true).unwrap();
}

#[test]
fn identical_configs_compare_identically() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{DISCRETE}{SMALL_TRAIN}");
    let inputs = [Input::from_text(&text).unwrap(), Input::from_text(&text).unwrap()];
    let opts = RunOptions {
        out_dir: dir.path().to_path_buf(),
        allow_oracle: false,
    };
    let report = Runner::new().run(Command::Compare, &inputs, &opts).unwrap();
    assert_eq!(report.runs.len(), 4);
    let rows = csv_rows(&dir.path().join("compare.csv"));
    for kind in ["bff-loss", "sample-cloning"] {
        let of = |prefix: &str| {
            rows.iter()
                .find(|r| r[0] == format!("{prefix}{kind}"))
                .map(|r| r[1..].to_vec())
                .unwrap()
        };
        assert_eq!(of("c0_"), of("c1_"));
    }
    let table = report.table.unwrap();
    assert!(table.lines().count() >= 5, "{table}");
}

#[test]
fn compare_rejects_mismatched_environments() {
    let dir = tempfile::tempdir().unwrap();
    let a = format!("{DISCRETE}{SMALL_TRAIN}");
    let b = format!("{DISCRETE}gamma = 0.5\n{SMALL_TRAIN}");
    let inputs = [Input::from_text(&a).unwrap(), Input::from_text(&b).unwrap()];
    let opts = RunOptions {
        out_dir: dir.path().to_path_buf(),
        allow_oracle: false,
    };
    let err = Runner::new().run(Command::Compare, &inputs, &opts).unwrap_err();
    assert!(err.to_string().contains("different environments"));

    let single = format!("{DISCRETE}{}", SMALL_TRAIN.replace(", \"sample-cloning\"", ""));
    let err = run(Command::Compare, &single, dir.path(), false).unwrap_err();
    assert!(err.to_string().contains("at least two runs"));
}

#[test]
fn bias_sweep_writes_csv_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        "{CONTINUOUS}\n[approximator]\nkind = \"mlp\"\n\n[bias_sweep]\neps = [0.2, 0.1, 0.05]\nn_outer = 3000\nn_inner = 16\ncontrol = true\n"
    );
    let report = run(Command::BiasSweep, &text, dir.path(), false).unwrap();
    let csv = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert!(csv.starts_with("eps,gap,std_err,abs_gap\n"));
    assert_eq!(csv.lines().count(), 4);
    let json: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("sweep_summary.json")).unwrap()).unwrap();
    let sweep = report.sweep.unwrap();
    assert_eq!(json["slope"].as_f64().unwrap(), sweep.slope);
    assert!(json["intercept"].is_number());
    assert_eq!(sweep.control.unwrap().gap, 0.0);
}

fn bin() -> Process {
    Process::new(env!("CARGO_BIN_EXE_bff"))
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, format!("{DISCRETE}colour = 1\n")).unwrap();
    let status = bin().args(["simulate", "--config"]).arg(&cfg).status().unwrap();
    assert_eq!(status.code(), Some(2));

    let diverging = dir.path().join("div.toml");
    fs::write(
        &diverging,
        format!("{DISCRETE}{}", SMALL_TRAIN.replace("tau = 0.1", "tau = 50.0")),
    )
    .unwrap();
    let out = dir.path().join("div");
    let status = bin().args(["train", "--config"]).arg(&diverging).arg("--out").arg(&out).status().unwrap();
    assert_eq!(status.code(), Some(3));
    assert!(out.join("trace_bff-loss.csv").exists());
    assert!(!out.join("manifest.json").exists());

    let ok = dir.path().join("sim.toml");
    fs::write(&ok, format!("{DISCRETE}\n[simulate]\nlength = 10\n")).unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "").unwrap();
    let status = bin().args(["simulate", "--config"]).arg(&ok).arg("--out").arg(&blocker).status().unwrap();
    assert_eq!(status.code(), Some(4));

    let env_out = dir.path().join("from-env");
    let status = bin()
        .args(["simulate", "--seed", "9", "--config"])
        .arg(&ok)
        .env("BFF_OUT_DIR", &env_out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let status = bin().args(["simulate", "--seed", &u64::MAX.to_string(), "--config"]).arg(&ok).status().unwrap();
    assert_eq!(status.code(), Some(2));
    let manifest: RunManifest = serde_json::from_slice(&fs::read(env_out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.master_seed, 9);
    assert_eq!(manifest.outputs[0].path, "trajectory.csv");

    let status = bin().args(["bias-sweep", "--self-test"]).status().unwrap();
    assert_eq!(status.code(), Some(0));
}

#[test]
fn bundled_configs_parse() {
    let mut count = 0;
    for entry in fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        let input = Input::from_path(&path).unwrap();
        let again = ExperimentConfig::parse(&input.config.to_toml()).unwrap();
        assert_eq!(again, input.config, "{}", path.display());
        count += 1;
    }
    assert!(count >= 7);
}

fn env_strategy() -> impl Strategy<Value = EnvironmentConfig> {
    let continuous = (
        0.001f64..1.0,
        0.01f64..0.99,
        prop_oneof![Just(Drift::SinCos), Just(Drift::Zero), (-3.0f64..3.0).prop_map(Drift::Constant)],
        prop_oneof![
            Just(Diffusion::OnePlusCosSquared),
            Just(Diffusion::Zero),
            (0.0f64..3.0).prop_map(Diffusion::Constant)
        ],
        prop_oneof![Just(StateReward::CosTwoSPlusOne), (-5.0f64..5.0).prop_map(StateReward::Constant)],
        0.01f64..TWO_PI,
    )
        .prop_map(|(epsilon, gamma, drift, diffusion, reward, s0)| {
            EnvironmentConfig::Continuous(ContinuousConfig {
                epsilon,
                gamma,
                drift,
                diffusion,
                reward,
                s0,
            })
        });
    let discrete = (
        2usize..40,
        0.0f64..0.99,
        prop_oneof![Just(TransitionConfig::Ring), Just(TransitionConfig::Uniform)],
        prop_oneof![
            Just(DiscreteRewardConfig::Ring),
            Just(DiscreteRewardConfig::Zero),
            (-5.0f64..5.0).prop_map(DiscreteRewardConfig::Constant)
        ],
    )
        .prop_map(|(n, gamma, transition, reward)| {
            EnvironmentConfig::Discrete(DiscreteConfig {
                n,
                gamma,
                transition,
                reward,
                s0: n / 2,
            })
        });
    prop_oneof![continuous, discrete]
}

proptest! {
    #[test]
    fn config_round_trip_is_identity(
        env in env_strategy(),
        seed in 0..=i64::MAX as u64,
        tau in 0.0f64..10.0,
        batch in 1usize..5000,
        eps in proptest::collection::vec(0.001f64..1.0, 3..6),
    ) {
        let text = format!(
            "schema_version = 1\nmaster_seed = {seed}\n\n[trainer]\nestimators = [\"bff-loss\", \"primal-dual\"]\n\
             tau = {tau:?}\nbatch_size = {batch}\nepochs = 2\ntrajectory_length = 100\ndual_seeds = [5, 6]\n\n\
             [bias_sweep]\neps = {eps:?}\nn_outer = 10\n"
        );
        let mut cfg: ExperimentConfig = toml::from_str(&format!("{text}\n[environment]\nkind = \"discrete\"\n")).unwrap();
        cfg.environment = env;
        let back = ExperimentConfig::parse(&cfg.to_toml()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
