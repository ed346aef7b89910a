//! Sequential per-turn policy updates with a running product of suffix
//! importance ratios (the M table), reverse execution order by default.
//!
//! One iteration: collect a batch, compute joint group-relative advantages
//! once (normalization statistics frozen for the whole iteration), then
//! optimize each turn's clipped objective in the configured order. The ratio
//! denominator is always the iteration-start snapshot; after a turn finishes
//! its epochs, every trajectory's M is multiplied by that turn's new/old
//! ratio, so M always equals the joint advantage times the product of the
//! processed turns' ratios.

use crate::advantage::AdvantageRecord;
use crate::envs::TreeBanditSpec;
use crate::error::{CoreError, Result};
use crate::policy::{HistoryKey, PolicySnapshot, TabularSoftmaxPolicy};
use crate::report::{ExperimentReport, IterationRow};
use crate::rng;
use crate::rollout::{build_turn_pools, Group, TurnPool};
use crate::updates::{
    clipped_update_epoch, sequence_advantage_records, tree_batch, ClipSample, EpochStats,
    RunSettings, UpdateConfig,
};
use crate::advantage::{exact_tree_values, tree_exact_return};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Turn-update order for one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateOrder {
    /// `T, T-1, ..., 1` (the default; enables backward induction).
    Reverse,
    /// `1, 2, ..., T`.
    Natural,
    /// A fresh seeded permutation every iteration.
    Random,
}

impl UpdateOrder {
    pub fn as_str(&self) -> &'static str {
        match self {
            UpdateOrder::Reverse => "reverse",
            UpdateOrder::Natural => "natural",
            UpdateOrder::Random => "random",
        }
    }

    /// The concrete permutation of `1..=horizon` used at iteration `k`.
    pub fn permutation(&self, horizon: usize, seed: u64, iteration: usize) -> Vec<usize> {
        match self {
            UpdateOrder::Reverse => (1..=horizon).rev().collect(),
            UpdateOrder::Natural => (1..=horizon).collect(),
            UpdateOrder::Random => {
                let mut turns: Vec<usize> = (1..=horizon).collect();
                let mut r = rng::stream(seed, "update-order", iteration as u64);
                for i in (1..turns.len()).rev() {
                    let j = r.gen_range(0..=i);
                    turns.swap(i, j);
                }
                turns
            }
        }
    }
}

impl std::str::FromStr for UpdateOrder {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reverse" => Ok(UpdateOrder::Reverse),
            "natural" => Ok(UpdateOrder::Natural),
            "random" => Ok(UpdateOrder::Random),
            other => Err(CoreError::InvalidParameter(format!(
                "unknown update order {other:?}"
            ))),
        }
    }
}

/// Per-trajectory running value `M`, indexed `[group][trajectory]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MTable {
    pub values: Vec<Vec<f64>>,
}

impl MTable {
    pub fn get(&self, group: usize, trajectory: usize) -> f64 {
        self.values[group][trajectory]
    }
}

/// Initializes `M` to the joint advantage of every trajectory.
pub fn init_m(groups: &[Group], records: &[AdvantageRecord]) -> Result<MTable> {
    let total: usize = groups.iter().map(|g| g.trajectories.len()).sum();
    if records.len() != total {
        return Err(CoreError::Misaligned(format!(
            "{} advantage records for {} trajectories",
            records.len(),
            total
        )));
    }
    let mut values = Vec::with_capacity(groups.len());
    let mut idx = 0;
    for (g, group) in groups.iter().enumerate() {
        let mut row = Vec::with_capacity(group.trajectories.len());
        for i in 0..group.trajectories.len() {
            let rec = &records[idx];
            if rec.group != g || rec.trajectory != i {
                return Err(CoreError::Misaligned(
                    "advantage records out of batch order".into(),
                ));
            }
            row.push(rec.normalized);
            idx += 1;
        }
        values.push(row);
    }
    Ok(MTable { values })
}

/// Multiplies each trajectory's `M` by its turn-`t` ratio
/// `pi_after_turn(a^t | .) / pi_iteration_start(a^t | .)`. Padded turns have
/// ratio 1 and are skipped.
pub fn update_m(
    mtable: &mut MTable,
    spec: &TreeBanditSpec,
    groups: &[Group],
    turn: usize,
    policy_after_turn: &TabularSoftmaxPolicy,
    iteration_start: &PolicySnapshot,
) -> Result<()> {
    for (g, group) in groups.iter().enumerate() {
        for (i, traj) in group.trajectories.iter().enumerate() {
            if turn > spec.episode_turns[traj.s0] {
                continue;
            }
            let key = HistoryKey::new(traj.s0, traj.actions[..turn - 1].to_vec());
            let a = traj.actions[turn - 1];
            let ratio = policy_after_turn.prob(&key, a)? / iteration_start.prob(&key, a)?;
            mtable.values[g][i] *= ratio;
        }
    }
    Ok(())
}

/// Recomputes what `M` should be from scratch: the joint advantage times the
/// path-probability ratio of the processed turns, each side computed as a
/// full product before dividing. Used to pin the incremental recursion.
pub fn expected_m(
    spec: &TreeBanditSpec,
    traj: &crate::rollout::Trajectory,
    advantage: f64,
    processed_turns: &[usize],
    policy_now: &TabularSoftmaxPolicy,
    iteration_start: &PolicySnapshot,
) -> Result<f64> {
    let mut now = 1.0;
    let mut start = 1.0;
    for &t in processed_turns {
        if t > spec.episode_turns[traj.s0] {
            continue;
        }
        let key = HistoryKey::new(traj.s0, traj.actions[..t - 1].to_vec());
        now *= policy_now.prob(&key, traj.actions[t - 1])?;
        start *= iteration_start.prob(&key, traj.actions[t - 1])?;
    }
    Ok(advantage * (now / start))
}

/// Builds the clipped-objective samples for one turn pool: single-turn
/// ratios against the iteration-start snapshot, coefficients from the M
/// table, placeholder samples masked.
pub fn turn_samples(
    pool: &TurnPool,
    mtable: &MTable,
    groups: &[Group],
    group_weights: &[f64],
) -> Vec<ClipSample> {
    pool.samples
        .iter()
        .map(|s| ClipSample {
            ratio_terms: vec![(s.key.clone(), s.action)],
            coefficient: mtable.get(s.group, s.trajectory),
            weight: group_weights[s.group] * groups[s.group].trajectories[s.trajectory].weight,
            masked: s.is_placeholder,
        })
        .collect()
}

/// Runs the turn's clipped update for `epochs_per_batch` epochs; ratios are
/// against the iteration-start snapshot. Returns the last epoch's stats.
pub fn seeupo_turn_update(
    pool: &TurnPool,
    mtable: &MTable,
    groups: &[Group],
    group_weights: &[f64],
    policy: &mut TabularSoftmaxPolicy,
    iteration_start: &PolicySnapshot,
    config: &UpdateConfig,
) -> Result<EpochStats> {
    let samples = turn_samples(pool, mtable, groups, group_weights);
    let mut grad = policy.zero_grad();
    let mut stats = EpochStats::default();
    for _ in 0..config.epochs_per_batch {
        stats = clipped_update_epoch(policy, iteration_start, &samples, config, &mut grad)?;
    }
    Ok(stats)
}

/// One full iteration: data collection, joint advantages, sequential
/// per-turn updates in `order`, M recursion between turns. Returns the
/// report row and the iteration's advantage records.
pub fn seeupo_iteration(
    spec: &TreeBanditSpec,
    policy: &mut TabularSoftmaxPolicy,
    config: &UpdateConfig,
    settings: &RunSettings,
    order: UpdateOrder,
    iteration: usize,
) -> Result<(IterationRow, Vec<crate::advantage::AdvantageRecord>)> {
    let values = exact_tree_values(spec, policy)?;
    let exact_return = tree_exact_return(spec, &values);

    let (groups, group_weights) = tree_batch(spec, policy, settings, iteration)?;
    let records = sequence_advantage_records(&groups, config)?;
    let pools = build_turn_pools(spec, &groups);
    let iteration_start = policy.snapshot();
    let mut mtable = init_m(&groups, &records)?;

    let turns = order.permutation(spec.horizon, settings.seed, iteration);
    let mut turn_clip = vec![0.0; spec.horizon];
    let mut turn_mean_abs_m = vec![0.0; spec.horizon];
    let mut grad_norm = 0.0;
    for (step, &t) in turns.iter().enumerate() {
        let pool = &pools[t - 1];
        let live: Vec<&crate::rollout::TurnSample> =
            pool.samples.iter().filter(|s| !s.is_placeholder).collect();
        turn_mean_abs_m[t - 1] = if live.is_empty() {
            0.0
        } else {
            live.iter()
                .map(|s| mtable.get(s.group, s.trajectory).abs())
                .sum::<f64>()
                / live.len() as f64
        };
        let stats = seeupo_turn_update(
            pool,
            &mtable,
            &groups,
            &group_weights,
            policy,
            &iteration_start,
            config,
        )?;
        turn_clip[t - 1] = stats.clip_fraction;
        grad_norm += stats.grad_norm * stats.grad_norm;
        if step + 1 < turns.len() {
            update_m(&mut mtable, spec, &groups, t, policy, &iteration_start)?;
        }
    }

    let (adv_mean, adv_std) = crate::updates::record_stats(&records);
    let row = IterationRow {
        iteration,
        exact_return,
        gap_to_optimal: settings.optimal_return.map(|j| j - exact_return),
        grad_norm: grad_norm.sqrt(),
        clip_fraction: turn_clip.iter().sum::<f64>() / spec.horizon as f64,
        adv_mean,
        adv_std,
        update_order: Some(turns),
        turn_clip_fractions: Some(turn_clip),
        turn_mean_abs_m: Some(turn_mean_abs_m),
    };
    Ok((row, records))
}

/// Full run over `settings.iterations` iterations.
pub fn run_seeupo(
    spec: &TreeBanditSpec,
    policy: &mut TabularSoftmaxPolicy,
    config: &UpdateConfig,
    settings: &RunSettings,
    order: UpdateOrder,
) -> Result<ExperimentReport> {
    config.validate()?;
    let mut report = ExperimentReport::new(
        &format!("seeupo-{}", order.as_str()),
        settings.mode.as_str(),
        serde_json::to_value(config)?,
    );
    report.optimal_return = settings.optimal_return;
    for k in 0..settings.iterations {
        let started = Instant::now();
        let (row, records) = seeupo_iteration(spec, policy, config, settings, order, k)?;
        report.rows.push(row);
        report.advantage_records = records;
        report
            .wall_times_ms
            .push(started.elapsed().as_secs_f64() * 1e3);
    }
    let values = exact_tree_values(spec, policy)?;
    report.final_return = tree_exact_return(spec, &values);
    report.final_gap_to_optimal = settings.optimal_return.map(|j| j - report.final_return);
    Ok(report)
}
