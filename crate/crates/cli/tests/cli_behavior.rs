//! End-to-end behavior of the command-line surface.

use rand::Rng;
use std::path::PathBuf;
use std::process::Command;
use turnlab_core::envs::build_degradation_mdp;
use turnlab_core::policy::TabularSoftmaxPolicy;
use turnlab_core::rollout::collect_mdp_batch;
use turnlab_core::updates::EnvSpec;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_turnlab"))
}

fn test_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir()
        .join("turnlab-cli-tests")
        .join(format!("{name}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn gen_env_reports_path_count_and_oracle() {
    let dir = test_dir("gen_env");
    let out = dir.join("env.json");
    let output = bin()
        .args([
            "gen-env", "--kind", "tree", "--seed", "7", "--turns", "2", "--actions", "2",
            "--out",
        ])
        .arg(&out)
        .arg("--oracle")
        .output()
        .unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8(output.stdout).unwrap();
    assert!(stdout.contains("paths: 4"), "{stdout}");
    assert!(stdout.contains("optimal_return:"), "{stdout}");

    // repeated invocation writes byte-identical files
    let out2 = dir.join("env2.json");
    let output = bin()
        .args([
            "gen-env", "--kind", "tree", "--seed", "7", "--turns", "2", "--actions", "2",
            "--out",
        ])
        .arg(&out2)
        .output()
        .unwrap();
    assert!(output.status.success());
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(&out2).unwrap());
}

#[test]
fn oracle_cross_checks_brute_force() {
    let dir = test_dir("oracle");
    let out = dir.join("env.json");
    bin()
        .args([
            "gen-env", "--kind", "tree", "--seed", "3", "--turns", "3", "--actions", "2,3,2",
            "--states", "2", "--out",
        ])
        .arg(&out)
        .output()
        .unwrap();
    let output = bin()
        .args(["oracle", "--env"])
        .arg(&out)
        .arg("--brute-force")
        .output()
        .unwrap();
    assert!(output.status.success());
    let summary: serde_json::Value =
        serde_json::from_slice(&output.stdout).expect("oracle prints JSON");
    assert_eq!(summary["oracles_agree_exactly"], serde_json::json!(true));
}

#[test]
fn run_rejects_invalid_combinations_with_nonzero_exit() {
    let dir = test_dir("invalid");
    let config = dir.join("config.json");
    std::fs::write(
        &config,
        serde_json::json!({
            "environment": {"generate": {"kind": "tree", "seed": 1, "tree_shape": {
                "num_initial_states": 1, "actions_per_turn": [2],
                "reward_range": [0.0, 1.0], "min_turns": null}}},
            "algorithm": "grae-reinforce",
            "update": {
                "learning_rate": 0.1, "clip_epsilon": 0.2, "epochs_per_batch": 1,
                "kl_penalty_coefficient": 0.0, "discount": 1.0, "gae_lambda": 0.95,
                "normalization": "none", "estimator": "gae"
            },
            "iterations": 1,
            "mode": "exact",
            "master_seed": 0
        })
        .to_string(),
    )
    .unwrap();
    let output = bin()
        .args(["run", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8(output.stderr).unwrap();
    assert!(stderr.contains("estimator"), "{stderr}");
}

#[test]
fn grpo_like_run_on_the_degradation_mdp_decreases_the_return() {
    let dir = test_dir("degradation_run");
    let mdp = build_degradation_mdp();
    let env_path = dir.join("degradation.json");
    std::fs::write(
        &env_path,
        serde_json::to_string_pretty(&EnvSpec::Mdp(mdp.clone())).unwrap(),
    )
    .unwrap();

    // find a master seed whose first sampled group pairs the bad action at
    // the high-value state with the low branch, under the uniform policy
    // the run starts from
    let policy = TabularSoftmaxPolicy::uniform_for_mdp(&mdp);
    let master = (0..100_000u64)
        .find(|&seed| {
            let derived: u64 = turnlab_core::rng::stream(seed, "iteration-collect", 0).gen();
            let groups = collect_mdp_batch(&mdp, &policy, 1, 2, derived).unwrap();
            let bad = groups[0]
                .trajectories
                .iter()
                .any(|t| t.states[1] == 1 && t.actions[1] == 1);
            let low = groups[0].trajectories.iter().any(|t| t.states[1] == 2);
            bad && low
        })
        .expect("degrading composition exists");

    let config = dir.join("config.json");
    std::fs::write(
        &config,
        serde_json::json!({
            "environment": {"path": env_path},
            "algorithm": "grae-ppu-token",
            "update": {
                "learning_rate": 1e-4, "clip_epsilon": 0.2, "epochs_per_batch": 6000,
                "kl_penalty_coefficient": 0.0, "discount": 1.0, "gae_lambda": 0.95,
                "normalization": "none", "estimator": "grae"
            },
            "iterations": 1,
            "mode": "sampled",
            "batch_size": 1,
            "group_size": 2,
            "master_seed": master
        })
        .to_string(),
    )
    .unwrap();
    let prefix = dir.join("report");
    let output = bin()
        .args(["run", "--config"])
        .arg(&config)
        .arg("--out-prefix")
        .arg(&prefix)
        .output()
        .unwrap();
    assert!(output.status.success(), "{output:?}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(prefix.with_extension("json")).unwrap())
            .unwrap();
    let before = report["rows"][0]["exact_return"].as_f64().unwrap();
    let after = report["final_return"].as_f64().unwrap();
    assert!(after < before, "J {before} -> {after}");
}

#[test]
fn out_dir_override_redirects_relative_paths() {
    let dir = test_dir("out_dir");
    let output = bin()
        .args([
            "gen-env", "--kind", "mdp", "--seed", "2", "--turns", "2", "--states", "2",
            "--actions", "2", "--out", "env.json",
        ])
        .env("TURNLAB_OUT_DIR", &dir)
        .output()
        .unwrap();
    assert!(output.status.success());
    assert!(dir.join("env.json").exists());
}

#[test]
fn verify_unknown_suite_fails() {
    let dir = test_dir("verify_unknown");
    let output = bin()
        .args(["verify", "--suite", "no-such-suite", "--out"])
        .arg(dir.join("card.json"))
        .output()
        .unwrap();
    assert!(!output.status.success());
}

#[test]
fn norm_compare_emits_versioned_table() {
    let dir = test_dir("norm_compare");
    let out = dir.join("norm.csv");
    let output = bin()
        .args(["norm-compare", "--iterations", "10", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(output.status.success(), "{output:?}");
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("# schema: turnlab-norm-compare-v1\n"));
    assert_eq!(text.lines().count(), 2 + 20); // schema + header + 20 instances
}
