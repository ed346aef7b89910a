//! Command-line front end: environment generation, experiment runs, the
//! theorem scorecard, and the order / normalization comparison tables.
//!
//! All artifacts are deterministic given the config (timings go to stderr
//! only, behind `--timing`). `TURNLAB_OUT_DIR` overrides the directory for
//! relative output paths.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use turnlab_core::envs::{
    env_from_json, env_to_json, generate_finite_mdp, generate_tree_bandit, MdpShape,
    TreeBanditShape,
};
use turnlab_core::policy::{PolicySnapshot, TabularSoftmaxPolicy};
use turnlab_core::report::write_atomic;
use turnlab_core::seeupo::{run_seeupo, UpdateOrder};
use turnlab_core::theory::{backward_induction, brute_force_optimal};
use turnlab_core::updates::{run_algorithm, AlgorithmName, EnvSpec, Mode, RunSettings, UpdateConfig};
use turnlab_core::verify::{
    all_suite_ids, norm_compare_csv, norm_compare_table, order_compare_csv, order_compare_table,
    run_suites,
};

#[derive(Parser)]
#[command(name = "turnlab", version, about = "Exact-mode policy-optimization laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an environment spec file from a seed and shape.
    GenEnv {
        /// Environment kind: "tree" or "mdp".
        #[arg(long)]
        kind: String,
        #[arg(long)]
        seed: u64,
        /// Number of turns (tree) or horizon (mdp).
        #[arg(long)]
        turns: usize,
        /// Initial states (tree) or states (mdp).
        #[arg(long, default_value_t = 1)]
        states: usize,
        /// Comma-separated actions per turn (tree) or a single count (mdp).
        #[arg(long, default_value = "2")]
        actions: String,
        #[arg(long, default_value_t = 0.0)]
        reward_lo: f64,
        #[arg(long, default_value_t = 1.0)]
        reward_hi: f64,
        /// Sample episode lengths in `min_turns..=turns` (tree only).
        #[arg(long)]
        min_turns: Option<usize>,
        #[arg(long, default_value_t = 1.0)]
        discount: f64,
        /// One-hot transition rows (mdp only).
        #[arg(long)]
        deterministic: bool,
        /// Layered chain paying only at the final step (mdp only).
        #[arg(long)]
        layered: bool,
        #[arg(long)]
        out: PathBuf,
        /// Also print the oracle optimal return (tree only).
        #[arg(long)]
        oracle: bool,
    },
    /// Run an experiment described by a JSON config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output prefix for the CSV/JSON report (default: config stem).
        #[arg(long)]
        out_prefix: Option<PathBuf>,
        /// Print per-iteration wall times to stderr.
        #[arg(long)]
        timing: bool,
    },
    /// Run theorem suites and write a scorecard; exit 0 iff all pass.
    Verify {
        /// Suite ids to run (repeatable); default: all.
        #[arg(long = "suite")]
        suites: Vec<String>,
        #[arg(long, default_value = "scorecard.json")]
        out: PathBuf,
        #[arg(long)]
        timing: bool,
    },
    /// Print the backward-induction oracle for a tree-bandit spec file.
    Oracle {
        #[arg(long)]
        env: PathBuf,
        /// Cross-check against brute-force policy enumeration.
        #[arg(long)]
        brute_force: bool,
    },
    /// Final-return table for reverse/natural/random update orders.
    OrderCompare {
        #[arg(long, default_value_t = 500)]
        iterations: usize,
        #[arg(long, default_value = "order_compare.csv")]
        out: PathBuf,
    },
    /// Final-return table for none/batch/group advantage normalization.
    NormCompare {
        #[arg(long, default_value_t = 500)]
        iterations: usize,
        #[arg(long, default_value = "norm_compare.csv")]
        out: PathBuf,
    },
    /// Collect one batch from a tree-bandit spec and dump it as JSON (debug
    /// / replay surface).
    SampleBatch {
        #[arg(long)]
        env: PathBuf,
        #[arg(long, default_value_t = 2)]
        batch_size: usize,
        #[arg(long, default_value_t = 4)]
        group_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Enumerate every path with exact probabilities instead of
        /// sampling.
        #[arg(long)]
        exact: bool,
        #[arg(long, default_value = "batch.json")]
        out: PathBuf,
    },
}

/// Experiment description consumed by `run`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ExperimentConfig {
    environment: EnvSource,
    /// "seeupo", "gae-ppu", "grae-reinforce", "grae-ppu-token", "grae-ppu-seq".
    algorithm: String,
    update: UpdateConfig,
    iterations: usize,
    mode: Mode,
    #[serde(default = "default_batch")]
    batch_size: usize,
    #[serde(default = "default_batch")]
    group_size: usize,
    /// Turn-update order for "seeupo" (default reverse).
    #[serde(default)]
    update_order: Option<UpdateOrder>,
    master_seed: u64,
    /// Gaussian logit noise applied to the initial (uniform) policy.
    #[serde(default)]
    init_sigma: f64,
    /// Start from a policy snapshot written by a previous run.
    #[serde(default)]
    initial_policy: Option<PathBuf>,
    /// Compute the oracle return for the gap column (tree environments).
    #[serde(default = "default_true")]
    compute_oracle: bool,
}

fn default_batch() -> usize {
    4
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum EnvSource {
    /// Load a spec file written by `gen-env`.
    Path(PathBuf),
    /// Generate in place.
    Generate {
        kind: String,
        seed: u64,
        #[serde(default)]
        tree_shape: Option<TreeBanditShape>,
        #[serde(default)]
        mdp_shape: Option<MdpShape>,
    },
}

fn out_path(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os("TURNLAB_OUT_DIR") {
        Some(dir) => PathBuf::from(dir).join(path),
        None => path.to_path_buf(),
    }
}

fn load_env(source: &EnvSource) -> Result<EnvSpec> {
    match source {
        EnvSource::Path(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading environment spec {}", path.display()))?;
            Ok(env_from_json(&text)?)
        }
        EnvSource::Generate {
            kind,
            seed,
            tree_shape,
            mdp_shape,
        } => match kind.as_str() {
            "tree" => {
                let shape = tree_shape
                    .as_ref()
                    .context("generate.tree_shape required for kind \"tree\"")?;
                Ok(EnvSpec::Tree(generate_tree_bandit(*seed, shape)?))
            }
            "mdp" => {
                let shape = mdp_shape
                    .as_ref()
                    .context("generate.mdp_shape required for kind \"mdp\"")?;
                Ok(EnvSpec::Mdp(generate_finite_mdp(*seed, shape)?))
            }
            other => bail!("unknown environment kind {other:?}"),
        },
    }
}

fn cmd_gen_env(
    kind: &str,
    seed: u64,
    turns: usize,
    states: usize,
    actions: &str,
    reward_range: (f64, f64),
    min_turns: Option<usize>,
    discount: f64,
    deterministic: bool,
    layered: bool,
    out: &Path,
    oracle: bool,
) -> Result<()> {
    let action_counts: Vec<usize> = actions
        .split(',')
        .map(|s| s.trim().parse::<usize>().context("parsing --actions"))
        .collect::<Result<_>>()?;
    let env = match kind {
        "tree" => {
            let per_turn = if action_counts.len() == turns {
                action_counts
            } else if action_counts.len() == 1 {
                vec![action_counts[0]; turns]
            } else {
                bail!("--actions must list one count or one per turn");
            };
            let shape = TreeBanditShape {
                num_initial_states: states,
                actions_per_turn: per_turn,
                reward_range,
                min_turns,
            };
            EnvSpec::Tree(generate_tree_bandit(seed, &shape)?)
        }
        "mdp" => {
            if action_counts.len() != 1 {
                bail!("mdp takes a single --actions count");
            }
            let shape = MdpShape {
                num_states: states,
                num_actions: action_counts[0],
                horizon: turns,
                discount,
                reward_range,
                deterministic_transitions: deterministic,
                layered_terminal_rewards: layered,
            };
            EnvSpec::Mdp(generate_finite_mdp(seed, &shape)?)
        }
        other => bail!("unknown environment kind {other:?}"),
    };
    let path = out_path(out);
    write_atomic(&path, env_to_json(&env)?.as_bytes())?;
    match &env {
        EnvSpec::Tree(spec) => {
            println!("wrote {} (paths: {})", path.display(), spec.total_paths());
            if oracle {
                let tree = backward_induction(spec)?;
                println!("optimal_return: {}", tree.optimal_return);
            }
        }
        EnvSpec::Mdp(spec) => {
            println!(
                "wrote {} (states: {}, actions: {}, horizon: {})",
                path.display(),
                spec.num_states,
                spec.num_actions,
                spec.horizon
            );
            if oracle {
                bail!("--oracle applies to tree environments");
            }
        }
    }
    Ok(())
}

fn cmd_run(config_path: &Path, out_prefix: Option<PathBuf>, timing: bool) -> Result<()> {
    let text = std::fs::read_to_string(config_path)
        .with_context(|| format!("reading config {}", config_path.display()))?;
    let config: ExperimentConfig = serde_json::from_str(&text)?;
    config.update.validate()?;
    let env = load_env(&config.environment)?;

    let optimal_return = match (&env, config.compute_oracle) {
        (EnvSpec::Tree(spec), true) => Some(backward_induction(spec)?.optimal_return),
        _ => None,
    };
    let settings = RunSettings {
        iterations: config.iterations,
        seed: config.master_seed,
        mode: config.mode,
        batch_size: config.batch_size,
        group_size: config.group_size,
        optimal_return,
    };

    let mut policy = match &config.initial_policy {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading policy snapshot {}", path.display()))?;
            TabularSoftmaxPolicy::restore(&PolicySnapshot::from_json(&text)?)
        }
        None => {
            let mut policy = match &env {
                EnvSpec::Tree(spec) => TabularSoftmaxPolicy::uniform_for_bandit(spec),
                EnvSpec::Mdp(mdp) => TabularSoftmaxPolicy::uniform_for_mdp(mdp),
            };
            if config.init_sigma > 0.0 {
                policy.perturb_gaussian(config.master_seed, config.init_sigma);
            }
            policy
        }
    };

    let report = match (config.algorithm.as_str(), &env) {
        ("seeupo", EnvSpec::Tree(spec)) => {
            let order = config.update_order.unwrap_or(UpdateOrder::Reverse);
            run_seeupo(spec, &mut policy, &config.update, &settings, order)?
        }
        ("seeupo", EnvSpec::Mdp(_)) => bail!("seeupo runs on tree environments"),
        (name, env) => {
            let algorithm: AlgorithmName = name.parse()?;
            run_algorithm(algorithm, env, &mut policy, &config.update, &settings)?
        }
    };

    let prefix = out_path(&out_prefix.unwrap_or_else(|| {
        config_path
            .file_stem()
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("experiment"))
    }));
    report.write(&prefix)?;
    write_atomic(
        &prefix.with_extension("policy.json"),
        policy.snapshot().to_json()?.as_bytes(),
    )?;
    println!(
        "wrote {}.{{csv,json,policy.json}} (final return: {}{})",
        prefix.display(),
        report.final_return,
        report
            .final_gap_to_optimal
            .map(|g| format!(", gap to optimal: {g}"))
            .unwrap_or_default()
    );
    if timing {
        let total: f64 = report.wall_times_ms.iter().sum();
        eprintln!("total iteration time: {total:.1} ms over {} iterations", report.wall_times_ms.len());
    }
    Ok(())
}

fn cmd_verify(suites: Vec<String>, out: &Path, timing: bool) -> Result<()> {
    let ids: Vec<&str> = if suites.is_empty() {
        all_suite_ids().to_vec()
    } else {
        suites.iter().map(String::as_str).collect()
    };
    let (scorecard, elapsed) = run_suites(&ids)?;
    for (outcome, secs) in scorecard.outcomes.iter().zip(&elapsed) {
        println!(
            "{}: {}",
            outcome.id,
            if outcome.passed { "PASS" } else { "FAIL" }
        );
        if timing {
            eprintln!("  {} took {secs:.2}s", outcome.id);
        }
    }
    let path = out_path(out);
    write_atomic(&path, serde_json::to_string_pretty(&scorecard)?.as_bytes())?;
    println!("wrote {}", path.display());
    if !scorecard.all_passed {
        std::process::exit(1);
    }
    Ok(())
}

fn cmd_oracle(env_path: &Path, brute_force: bool) -> Result<()> {
    let text = std::fs::read_to_string(env_path)?;
    let env: EnvSpec = env_from_json(&text)?;
    match env {
        EnvSpec::Tree(spec) => {
            let tree = backward_induction(&spec)?;
            let mut summary = serde_json::json!({
                "optimal_return": tree.optimal_return,
            });
            if brute_force {
                let (j_star, policy) = brute_force_optimal(&spec)?;
                summary["brute_force_return"] = serde_json::json!(j_star);
                summary["oracles_agree_exactly"] =
                    serde_json::json!(j_star == tree.optimal_return);
                summary["optimal_policy"] = serde_json::json!(policy
                    .iter()
                    .map(|(k, a)| (k.to_string(), *a))
                    .collect::<std::collections::BTreeMap<String, usize>>());
            }
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        EnvSpec::Mdp(_) => bail!("the oracle subcommand applies to tree environments"),
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenEnv {
            kind,
            seed,
            turns,
            states,
            actions,
            reward_lo,
            reward_hi,
            min_turns,
            discount,
            deterministic,
            layered,
            out,
            oracle,
        } => cmd_gen_env(
            &kind,
            seed,
            turns,
            states,
            &actions,
            (reward_lo, reward_hi),
            min_turns,
            discount,
            deterministic,
            layered,
            &out,
            oracle,
        ),
        Command::Run {
            config,
            out_prefix,
            timing,
        } => cmd_run(&config, out_prefix, timing),
        Command::Verify {
            suites,
            out,
            timing,
        } => cmd_verify(suites, &out, timing),
        Command::Oracle { env, brute_force } => cmd_oracle(&env, brute_force),
        Command::OrderCompare { iterations, out } => {
            let rows = order_compare_table(iterations)?;
            let path = out_path(&out);
            write_atomic(&path, order_compare_csv(&rows).as_bytes())?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::NormCompare { iterations, out } => {
            let rows = norm_compare_table(iterations)?;
            let path = out_path(&out);
            write_atomic(&path, norm_compare_csv(&rows).as_bytes())?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::SampleBatch {
            env,
            batch_size,
            group_size,
            seed,
            exact,
            out,
        } => {
            let text = std::fs::read_to_string(&env)?;
            let spec = match env_from_json(&text)? {
                EnvSpec::Tree(spec) => spec,
                EnvSpec::Mdp(_) => bail!("sample-batch applies to tree environments"),
            };
            let policy = TabularSoftmaxPolicy::uniform_for_bandit(&spec);
            let groups = if exact {
                turnlab_core::rollout::enumerate_batch(&spec, &policy)?
            } else {
                turnlab_core::rollout::collect_batch(&spec, &policy, batch_size, group_size, seed)?
            };
            let pools = turnlab_core::rollout::build_turn_pools(&spec, &groups);
            let path = out_path(&out);
            let payload = serde_json::json!({
                "schema": "turnlab-batch-v1",
                "groups": groups,
                "turn_pools": pools,
            });
            write_atomic(&path, serde_json::to_string_pretty(&payload)?.as_bytes())?;
            println!("wrote {}", path.display());
            Ok(())
        }
    }
}
