//! Policy-update mechanisms and the four baseline algorithm assemblies:
//! REINFORCE, the clipped proximal update (PPU), and their pairings with
//! GAE / group-relative advantages at token and sequence level.

use crate::advantage::{
    exact_gae_expectation, exact_mdp_values, exact_token_grae, exact_tree_values, gae_estimate,
    grae_estimate, mdp_exact_return, normalize_batch, normalize_group, tree_exact_return,
    AdvantageRecord, EstimatorKind, NormalizationKind,
};
use crate::envs::{FiniteMdpSpec, TreeBanditSpec};
use crate::error::{CoreError, Result};
use crate::policy::{HistoryKey, PolicySnapshot, TabularSoftmaxPolicy};
use crate::report::{ExperimentReport, IterationRow};
use crate::rng;
use crate::rollout::{
    collect_batch, collect_mdp_batch, enumerate_batch, enumerate_mdp_trajectories, Group,
};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlgorithmName {
    /// Token-level clipped update with exact-critic GAE advantages.
    GaePpu,
    /// Sequence-level REINFORCE with group-relative advantages.
    GraeReinforce,
    /// Token-level clipped update with broadcast group-relative advantages.
    GraePpuToken,
    /// Sequence-level clipped update with group-relative advantages.
    GraePpuSeq,
}

impl AlgorithmName {
    pub fn as_str(&self) -> &'static str {
        match self {
            AlgorithmName::GaePpu => "gae-ppu",
            AlgorithmName::GraeReinforce => "grae-reinforce",
            AlgorithmName::GraePpuToken => "grae-ppu-token",
            AlgorithmName::GraePpuSeq => "grae-ppu-seq",
        }
    }
}

impl std::str::FromStr for AlgorithmName {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gae-ppu" => Ok(AlgorithmName::GaePpu),
            "grae-reinforce" => Ok(AlgorithmName::GraeReinforce),
            "grae-ppu-token" => Ok(AlgorithmName::GraePpuToken),
            "grae-ppu-seq" => Ok(AlgorithmName::GraePpuSeq),
            other => Err(CoreError::InvalidParameter(format!(
                "unknown algorithm {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateConfig {
    pub learning_rate: f64,
    pub clip_epsilon: f64,
    pub epochs_per_batch: usize,
    /// Additive KL penalty toward the iteration-start policy; 0 disables.
    pub kl_penalty_coefficient: f64,
    pub discount: f64,
    pub gae_lambda: f64,
    pub normalization: NormalizationKind,
    pub estimator: EstimatorKind,
    /// Clipped updates: rescale each context's gradient block by that
    /// context's total pool weight, making the per-context step scale-free
    /// the way the argmax update is. Rarely-visited histories then keep
    /// converging instead of freezing, which is what backward induction
    /// needs; per-context ascent directions and maximizers are unchanged.
    #[serde(default)]
    pub per_context_steps: bool,
}

impl Default for UpdateConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            clip_epsilon: 0.2,
            epochs_per_batch: 4,
            kl_penalty_coefficient: 0.0,
            discount: 1.0,
            gae_lambda: 0.95,
            normalization: NormalizationKind::Batch,
            estimator: EstimatorKind::Grae,
            per_context_steps: false,
        }
    }
}

impl UpdateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clip_epsilon <= 0.0 {
            return Err(CoreError::InvalidParameter("clip_epsilon must be > 0".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(CoreError::InvalidParameter("learning_rate must be > 0".into()));
        }
        if self.epochs_per_batch < 1 {
            return Err(CoreError::InvalidParameter("epochs_per_batch must be >= 1".into()));
        }
        if self.kl_penalty_coefficient < 0.0 {
            return Err(CoreError::InvalidParameter("kl penalty must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.discount) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(CoreError::InvalidParameter(
                "discount and gae_lambda must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn check_compatibility(&self, name: AlgorithmName) -> Result<()> {
        let ok = match name {
            AlgorithmName::GaePpu => self.estimator == EstimatorKind::Gae,
            _ => matches!(self.estimator, EstimatorKind::Grae | EstimatorKind::GraeLoo),
        };
        if ok {
            Ok(())
        } else {
            Err(CoreError::InvalidCombination(format!(
                "{} cannot use estimator {:?}",
                name.as_str(),
                self.estimator
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Exact,
    Sampled,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Exact => "exact",
            Mode::Sampled => "sampled",
        }
    }
}

/// Everything a single run needs beyond the update rule itself.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub iterations: usize,
    pub seed: u64,
    pub mode: Mode,
    pub batch_size: usize,
    pub group_size: usize,
    /// `J*` when known; enables the gap column.
    pub optimal_return: Option<f64>,
}

pub use crate::envs::EnvSpec;

// ---------------------------------------------------------------------------
// Objective terms and gradients
// ---------------------------------------------------------------------------

/// One weighted term of a clipped or score-function objective. The
/// importance ratio is the product over `ratio_terms` of per-key conditional
/// ratios; `coefficient` is the (already normalized) advantage or `M` value.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipSample {
    pub ratio_terms: Vec<(HistoryKey, usize)>,
    pub coefficient: f64,
    pub weight: f64,
    pub masked: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpochStats {
    pub clip_fraction: f64,
    pub grad_norm: f64,
}

/// `min(r * c, clip(r, 1 +- eps) * c)` for a single term.
pub fn clip_term(ratio: f64, coefficient: f64, eps: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps);
    (ratio * coefficient).min(clipped * coefficient)
}

fn sample_ratio(
    policy: &TabularSoftmaxPolicy,
    old: &PolicySnapshot,
    sample: &ClipSample,
) -> Result<f64> {
    let mut r = 1.0;
    for (key, action) in &sample.ratio_terms {
        r *= policy.prob(key, *action)? / old.prob(key, *action)?;
    }
    Ok(r)
}

/// Weighted clipped surrogate `sum_i w_i min(r_i c_i, clip(r_i) c_i)` over
/// the non-masked samples; with candidate = old this is `sum_i w_i c_i`.
pub fn ppu_objective(
    policy_candidate: &TabularSoftmaxPolicy,
    policy_old: &PolicySnapshot,
    samples: &[ClipSample],
    eps: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for s in samples.iter().filter(|s| !s.masked) {
        let r = sample_ratio(policy_candidate, policy_old, s)?;
        total += s.weight * clip_term(r, s.coefficient, eps);
    }
    Ok(total)
}

/// Gradient of [`ppu_objective`] in the candidate's parameters, with the
/// standard convention that an active clipped branch contributes zero
/// gradient. An optional KL penalty toward `policy_old` is subtracted.
pub fn ppu_gradient(
    policy_candidate: &TabularSoftmaxPolicy,
    policy_old: &PolicySnapshot,
    samples: &[ClipSample],
    eps: f64,
    kl_coefficient: f64,
    grad: &mut [f64],
) -> Result<EpochStats> {
    grad.fill(0.0);
    let mut considered = 0usize;
    let mut clipped = 0usize;
    for s in samples.iter().filter(|s| !s.masked) {
        considered += 1;
        let r = sample_ratio(policy_candidate, policy_old, s)?;
        let rc = r.clamp(1.0 - eps, 1.0 + eps);
        let unclipped = r * s.coefficient;
        let clipped_val = rc * s.coefficient;
        if unclipped <= clipped_val {
            // d/dtheta (r * c) = c * r * sum_k grad log pi(a_k | key_k)
            let scale = s.weight * s.coefficient * r;
            for (key, action) in &s.ratio_terms {
                policy_candidate.accumulate_score(key, *action, scale, grad)?;
            }
        } else {
            clipped += 1;
        }
        if kl_coefficient > 0.0 {
            for (key, _) in &s.ratio_terms {
                policy_candidate.accumulate_kl_grad(
                    policy_old,
                    key,
                    -kl_coefficient * s.weight,
                    grad,
                )?;
            }
        }
    }
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    Ok(EpochStats {
        clip_fraction: if considered == 0 {
            0.0
        } else {
            clipped as f64 / considered as f64
        },
        grad_norm: norm,
    })
}

/// Rescales each context's gradient block by the reciprocal of its total
/// non-masked sample weight (zero-weight contexts are left alone).
pub fn apply_per_context_scaling(
    policy: &TabularSoftmaxPolicy,
    samples: &[ClipSample],
    grad: &mut [f64],
) -> Result<()> {
    let mut weights: std::collections::BTreeMap<&HistoryKey, f64> =
        std::collections::BTreeMap::new();
    for s in samples.iter().filter(|s| !s.masked) {
        for (key, _) in &s.ratio_terms {
            *weights.entry(key).or_insert(0.0) += s.weight;
        }
    }
    for (key, w) in weights {
        if w > 0.0 {
            let (off, len) = policy.block_span(key)?;
            for g in &mut grad[off..off + len] {
                *g /= w;
            }
        }
    }
    Ok(())
}

/// One epoch of the clipped update: gradient, optional per-context scaling,
/// ascent step.
pub fn clipped_update_epoch(
    policy: &mut TabularSoftmaxPolicy,
    old: &PolicySnapshot,
    samples: &[ClipSample],
    config: &UpdateConfig,
    grad: &mut [f64],
) -> Result<EpochStats> {
    let mut stats = ppu_gradient(
        policy,
        old,
        samples,
        config.clip_epsilon,
        config.kl_penalty_coefficient,
        grad,
    )?;
    if config.per_context_steps {
        apply_per_context_scaling(policy, samples, grad)?;
        stats.grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    }
    policy.apply_step(grad, config.learning_rate);
    Ok(stats)
}

/// Score-function gradient `sum_i w_i c_i sum_k grad log pi(a_k | key_k)`
/// over the non-masked samples.
pub fn reinforce_gradient(
    policy: &TabularSoftmaxPolicy,
    samples: &[ClipSample],
    grad: &mut [f64],
) -> Result<f64> {
    grad.fill(0.0);
    for s in samples.iter().filter(|s| !s.masked) {
        let scale = s.weight * s.coefficient;
        for (key, action) in &s.ratio_terms {
            policy.accumulate_score(key, *action, scale, grad)?;
        }
    }
    Ok(grad.iter().map(|g| g * g).sum::<f64>().sqrt())
}

// ---------------------------------------------------------------------------
// Shared batch machinery
// ---------------------------------------------------------------------------

/// Collects or enumerates a tree-bandit batch and the per-group weights
/// (`d(s0)` in exact mode, `1/B` in sampled mode).
pub fn tree_batch(
    spec: &TreeBanditSpec,
    policy: &TabularSoftmaxPolicy,
    settings: &RunSettings,
    iteration: usize,
) -> Result<(Vec<Group>, Vec<f64>)> {
    match settings.mode {
        Mode::Exact => {
            let groups = enumerate_batch(spec, policy)?;
            let weights = groups
                .iter()
                .map(|g| spec.initial_distribution[g.s0])
                .collect();
            Ok((groups, weights))
        }
        Mode::Sampled => {
            let seed = rng::stream(settings.seed, "iteration-collect", iteration as u64).gen();
            let groups = collect_batch(
                spec,
                policy,
                settings.batch_size,
                settings.group_size,
                seed,
            )?;
            let w = 1.0 / groups.len() as f64;
            let weights = groups.iter().map(|_| w).collect();
            Ok((groups, weights))
        }
    }
}

/// Sequence-level group-relative advantage records with the configured
/// normalization applied; one record per trajectory, in batch order.
pub fn sequence_advantage_records(
    groups: &[Group],
    config: &UpdateConfig,
) -> Result<Vec<AdvantageRecord>> {
    let estimator = config.estimator;
    let loo = estimator == EstimatorKind::GraeLoo;
    let mut records = Vec::new();
    for (g, group) in groups.iter().enumerate() {
        let adv = grae_estimate(group, loo)?;
        for (i, raw) in adv.into_iter().enumerate() {
            records.push(AdvantageRecord::sequence(g, i, estimator, raw));
        }
    }
    match config.normalization {
        NormalizationKind::None => {}
        NormalizationKind::Batch => {
            normalize_batch(&mut records);
        }
        NormalizationKind::Group => {
            let stds: Vec<f64> = groups.iter().map(Group::reward_std).collect();
            normalize_group(&mut records, &stds);
        }
    }
    Ok(records)
}

pub fn record_stats(records: &[AdvantageRecord]) -> (f64, f64) {
    if records.is_empty() {
        return (0.0, 0.0);
    }
    let n = records.len() as f64;
    let mean = records.iter().map(|r| r.normalized).sum::<f64>() / n;
    let var = records
        .iter()
        .map(|r| (r.normalized - mean).powi(2))
        .sum::<f64>()
        / n;
    (mean, var.sqrt())
}

// ---------------------------------------------------------------------------
// Algorithm runner
// ---------------------------------------------------------------------------

/// Runs one of the four baseline algorithms for `settings.iterations`
/// iterations, recording exact returns and update diagnostics. Token-level
/// algorithms need an MDP, sequence-level ones a tree bandit.
pub fn run_algorithm(
    name: AlgorithmName,
    env: &EnvSpec,
    policy: &mut TabularSoftmaxPolicy,
    config: &UpdateConfig,
    settings: &RunSettings,
) -> Result<ExperimentReport> {
    config.validate()?;
    config.check_compatibility(name)?;
    let mut report = ExperimentReport::new(
        name.as_str(),
        settings.mode.as_str(),
        serde_json::to_value(config)?,
    );
    report.optimal_return = settings.optimal_return;

    match (name, env) {
        (AlgorithmName::GraeReinforce, EnvSpec::Tree(spec)) => {
            run_grae_reinforce(spec, policy, config, settings, &mut report)?
        }
        (AlgorithmName::GraePpuSeq, EnvSpec::Tree(spec)) => {
            run_grae_ppu_seq(spec, policy, config, settings, &mut report)?
        }
        (AlgorithmName::GaePpu, EnvSpec::Mdp(mdp)) => {
            run_gae_ppu(mdp, policy, config, settings, &mut report)?
        }
        (AlgorithmName::GraePpuToken, EnvSpec::Mdp(mdp)) => {
            run_grae_ppu_token(mdp, policy, config, settings, &mut report)?
        }
        (name, _) => {
            return Err(CoreError::InvalidCombination(format!(
                "{} does not run on this environment kind",
                name.as_str()
            )))
        }
    }
    Ok(report)
}

fn push_row(
    report: &mut ExperimentReport,
    settings: &RunSettings,
    iteration: usize,
    exact_return: f64,
    stats: EpochStats,
    adv_mean: f64,
    adv_std: f64,
    started: Instant,
) {
    report.rows.push(IterationRow {
        iteration,
        exact_return,
        gap_to_optimal: settings.optimal_return.map(|j| j - exact_return),
        grad_norm: stats.grad_norm,
        clip_fraction: stats.clip_fraction,
        adv_mean,
        adv_std,
        update_order: None,
        turn_clip_fractions: None,
        turn_mean_abs_m: None,
    });
    report
        .wall_times_ms
        .push(started.elapsed().as_secs_f64() * 1e3);
}

fn finish_tree(
    spec: &TreeBanditSpec,
    policy: &TabularSoftmaxPolicy,
    settings: &RunSettings,
    report: &mut ExperimentReport,
) -> Result<()> {
    let values = exact_tree_values(spec, policy)?;
    report.final_return = tree_exact_return(spec, &values);
    report.final_gap_to_optimal = settings.optimal_return.map(|j| j - report.final_return);
    Ok(())
}

fn run_grae_reinforce(
    spec: &TreeBanditSpec,
    policy: &mut TabularSoftmaxPolicy,
    config: &UpdateConfig,
    settings: &RunSettings,
    report: &mut ExperimentReport,
) -> Result<()> {
    let mut grad = policy.zero_grad();
    for k in 0..settings.iterations {
        let started = Instant::now();
        let values = exact_tree_values(spec, policy)?;
        let j = tree_exact_return(spec, &values);
        let (groups, group_weights) = tree_batch(spec, policy, settings, k)?;
        let records = sequence_advantage_records(&groups, config)?;
        let samples = sequence_samples(spec, &groups, &group_weights, &records);
        let norm = reinforce_gradient(policy, &samples, &mut grad)?;
        policy.apply_step(&grad, config.learning_rate);
        let (m, s) = record_stats(&records);
        push_row(
            report,
            settings,
            k,
            j,
            EpochStats {
                clip_fraction: 0.0,
                grad_norm: norm,
            },
            m,
            s,
            started,
        );
        report.advantage_records = records;
    }
    finish_tree(spec, policy, settings, report)
}

/// Builds the sequence-level samples: one per trajectory, ratio over all
/// non-padded turns.
pub fn sequence_samples(
    spec: &TreeBanditSpec,
    groups: &[Group],
    group_weights: &[f64],
    records: &[AdvantageRecord],
) -> Vec<ClipSample> {
    let mut samples = Vec::with_capacity(records.len());
    let mut idx = 0usize;
    for (g, group) in groups.iter().enumerate() {
        for traj in &group.trajectories {
            let record = &records[idx];
            debug_assert_eq!(record.group, g);
            idx += 1;
            let turns = spec.episode_turns[traj.s0];
            let ratio_terms: Vec<(HistoryKey, usize)> = (1..=turns)
                .map(|t| {
                    (
                        HistoryKey::new(traj.s0, traj.actions[..t - 1].to_vec()),
                        traj.actions[t - 1],
                    )
                })
                .collect();
            samples.push(ClipSample {
                ratio_terms,
                coefficient: record.normalized,
                weight: group_weights[g] * traj.weight,
                masked: false,
            });
        }
    }
    samples
}

fn run_grae_ppu_seq(
    spec: &TreeBanditSpec,
    policy: &mut TabularSoftmaxPolicy,
    config: &UpdateConfig,
    settings: &RunSettings,
    report: &mut ExperimentReport,
) -> Result<()> {
    let mut grad = policy.zero_grad();
    for k in 0..settings.iterations {
        let started = Instant::now();
        let values = exact_tree_values(spec, policy)?;
        let j = tree_exact_return(spec, &values);
        let (groups, group_weights) = tree_batch(spec, policy, settings, k)?;
        let records = sequence_advantage_records(&groups, config)?;
        let samples = sequence_samples(spec, &groups, &group_weights, &records);
        let old = policy.snapshot();
        let mut stats = EpochStats::default();
        for _ in 0..config.epochs_per_batch {
            stats = clipped_update_epoch(policy, &old, &samples, config, &mut grad)?;
        }
        let (m, s) = record_stats(&records);
        push_row(report, settings, k, j, stats, m, s, started);
        report.advantage_records = records;
    }
    finish_tree(spec, policy, settings, report)
}

fn run_gae_ppu(
    mdp: &FiniteMdpSpec,
    policy: &mut TabularSoftmaxPolicy,
    config: &UpdateConfig,
    settings: &RunSettings,
    report: &mut ExperimentReport,
) -> Result<()> {
    let gamma = config.discount;
    let lambda = config.gae_lambda;
    let mut grad = policy.zero_grad();
    for k in 0..settings.iterations {
        let started = Instant::now();
        let values = exact_mdp_values(mdp, policy, gamma)?;
        let j = mdp_exact_return(mdp, &values);
        let old = policy.snapshot();

        let (samples, raw_advantages) = match settings.mode {
            Mode::Exact => {
                let adv = exact_gae_expectation(mdp, policy, &values, gamma, lambda)?;
                let visit = state_visitation(mdp, policy)?;
                let mut samples = Vec::new();
                let mut raws = Vec::new();
                for t in 0..mdp.horizon {
                    for s in 0..mdp.num_states {
                        if visit[t][s] == 0.0 {
                            continue;
                        }
                        let probs = policy.action_probs(&HistoryKey::new(s, vec![]))?;
                        for a in 0..mdp.num_actions {
                            if probs[a] == 0.0 {
                                continue;
                            }
                            samples.push(ClipSample {
                                ratio_terms: vec![(HistoryKey::new(s, vec![]), a)],
                                coefficient: adv[t][s][a],
                                weight: visit[t][s] * probs[a],
                                masked: false,
                            });
                            raws.push(adv[t][s][a]);
                        }
                    }
                }
                (samples, raws)
            }
            Mode::Sampled => {
                let seed = rng::stream(settings.seed, "iteration-collect", k as u64).gen();
                let groups = collect_mdp_batch(
                    mdp,
                    policy,
                    settings.batch_size,
                    settings.group_size,
                    seed,
                )?;
                let w = 1.0 / (settings.batch_size * settings.group_size) as f64;
                let mut samples = Vec::new();
                let mut raws = Vec::new();
                for group in &groups {
                    for traj in &group.trajectories {
                        let adv = gae_estimate(traj, &values, gamma, lambda)?;
                        for t in 0..traj.actions.len() {
                            samples.push(ClipSample {
                                ratio_terms: vec![(
                                    HistoryKey::new(traj.states[t], vec![]),
                                    traj.actions[t],
                                )],
                                coefficient: adv[t],
                                weight: w,
                                masked: false,
                            });
                            raws.push(adv[t]);
                        }
                    }
                }
                (samples, raws)
            }
        };

        let samples = apply_token_normalization(samples, &raw_advantages, config);
        let mut stats = EpochStats::default();
        for _ in 0..config.epochs_per_batch {
            stats = clipped_update_epoch(policy, &old, &samples, config, &mut grad)?;
        }
        let (m, s) = moments(&raw_advantages);
        push_row(report, settings, k, j, stats, m, s, started);
    }
    let values = exact_mdp_values(mdp, policy, gamma)?;
    report.final_return = mdp_exact_return(mdp, &values);
    report.final_gap_to_optimal = settings.optimal_return.map(|j| j - report.final_return);
    Ok(())
}

fn run_grae_ppu_token(
    mdp: &FiniteMdpSpec,
    policy: &mut TabularSoftmaxPolicy,
    config: &UpdateConfig,
    settings: &RunSettings,
    report: &mut ExperimentReport,
) -> Result<()> {
    let gamma = config.discount;
    let mut grad = policy.zero_grad();
    for k in 0..settings.iterations {
        let started = Instant::now();
        let values = exact_mdp_values(mdp, policy, gamma)?;
        let j = mdp_exact_return(mdp, &values);
        let old = policy.snapshot();

        let (samples, raw_advantages, final_records) = match settings.mode {
            Mode::Exact => {
                let token = exact_token_grae(mdp, policy)?;
                let mut samples = Vec::new();
                let mut raws = Vec::new();
                for part in &token {
                    for t in 0..mdp.horizon {
                        for s in 0..mdp.num_states {
                            if part.visit[t][s] == 0.0 {
                                continue;
                            }
                            let probs = policy.action_probs(&HistoryKey::new(s, vec![]))?;
                            for a in 0..mdp.num_actions {
                                if probs[a] == 0.0 {
                                    continue;
                                }
                                samples.push(ClipSample {
                                    ratio_terms: vec![(HistoryKey::new(s, vec![]), a)],
                                    coefficient: part.advantage[t][s][a],
                                    weight: part.weight * part.visit[t][s] * probs[a],
                                    masked: false,
                                });
                                raws.push(part.advantage[t][s][a]);
                            }
                        }
                    }
                }
                (samples, raws, Vec::new())
            }
            Mode::Sampled => {
                let seed = rng::stream(settings.seed, "iteration-collect", k as u64).gen();
                let groups = collect_mdp_batch(
                    mdp,
                    policy,
                    settings.batch_size,
                    settings.group_size,
                    seed,
                )?;
                let loo = config.estimator == EstimatorKind::GraeLoo;
                let w = 1.0 / (settings.batch_size * settings.group_size) as f64;
                // per-trajectory centered returns, optionally normalized,
                // broadcast to every step
                let mut records = Vec::new();
                for (g, group) in groups.iter().enumerate() {
                    for (i, traj) in group.trajectories.iter().enumerate() {
                        let baseline = if loo {
                            let total: f64 =
                                group.trajectories.iter().map(|t| t.total_return()).sum();
                            (total - traj.total_return())
                                / (group.trajectories.len() as f64 - 1.0)
                        } else {
                            group.mean_return
                        };
                        let mut rec = AdvantageRecord::sequence(
                            g,
                            i,
                            config.estimator,
                            traj.total_return() - baseline,
                        );
                        rec.step = None;
                        records.push(rec);
                    }
                }
                match config.normalization {
                    NormalizationKind::None => {}
                    NormalizationKind::Batch => {
                        normalize_batch(&mut records);
                    }
                    NormalizationKind::Group => {
                        let stds: Vec<f64> = groups
                            .iter()
                            .map(|g| {
                                let n = g.trajectories.len() as f64;
                                let var = g
                                    .trajectories
                                    .iter()
                                    .map(|t| (t.total_return() - g.mean_return).powi(2))
                                    .sum::<f64>()
                                    / n;
                                var.max(0.0).sqrt()
                            })
                            .collect();
                        normalize_group(&mut records, &stds);
                    }
                }
                let mut samples = Vec::new();
                let mut raws = Vec::new();
                let mut idx = 0usize;
                for group in &groups {
                    for traj in &group.trajectories {
                        let coef = records[idx].normalized;
                        raws.push(records[idx].raw);
                        idx += 1;
                        for t in 0..traj.actions.len() {
                            samples.push(ClipSample {
                                ratio_terms: vec![(
                                    HistoryKey::new(traj.states[t], vec![]),
                                    traj.actions[t],
                                )],
                                coefficient: coef,
                                weight: w,
                                masked: false,
                            });
                        }
                    }
                }
                (samples, raws, records)
            }
        };

        let samples = if settings.mode == Mode::Exact {
            apply_token_normalization(samples, &raw_advantages, config)
        } else {
            samples
        };
        let mut stats = EpochStats::default();
        for _ in 0..config.epochs_per_batch {
            stats = clipped_update_epoch(policy, &old, &samples, config, &mut grad)?;
        }
        let (m, s) = moments(&raw_advantages);
        push_row(report, settings, k, j, stats, m, s, started);
        report.advantage_records = final_records;
    }
    let values = exact_mdp_values(mdp, policy, gamma)?;
    report.final_return = mdp_exact_return(mdp, &values);
    report.final_gap_to_optimal = settings.optimal_return.map(|j| j - report.final_return);
    Ok(())
}

/// Weighted batch normalization for exact-mode token samples: the batch
/// moments are taken under the sample weights (the exact analogue of the
/// empirical batch statistics). Group-level scaling in exact token mode
/// divides by the per-initial-state return spread.
fn apply_token_normalization(
    mut samples: Vec<ClipSample>,
    _raws: &[f64],
    config: &UpdateConfig,
) -> Vec<ClipSample> {
    match config.normalization {
        NormalizationKind::None => samples,
        NormalizationKind::Batch => {
            let wsum: f64 = samples.iter().map(|s| s.weight).sum();
            if wsum == 0.0 {
                return samples;
            }
            let mean: f64 =
                samples.iter().map(|s| s.weight * s.coefficient).sum::<f64>() / wsum;
            let var: f64 = samples
                .iter()
                .map(|s| s.weight * (s.coefficient - mean).powi(2))
                .sum::<f64>()
                / wsum;
            let std = var.max(0.0).sqrt();
            if std > 0.0 {
                for s in samples.iter_mut() {
                    s.coefficient = (s.coefficient - mean) / std;
                }
            }
            samples
        }
        // exact-mode group scaling is only defined per initial state; the
        // sequence-level algorithms carry it, token-level exact runs skip it
        NormalizationKind::Group => samples,
    }
}

/// Forward visitation `p_t(s)` from the initial distribution.
pub fn state_visitation(
    mdp: &FiniteMdpSpec,
    policy: &TabularSoftmaxPolicy,
) -> Result<Vec<Vec<f64>>> {
    let mut visit = vec![vec![0.0; mdp.num_states]; mdp.horizon + 1];
    visit[0].copy_from_slice(&mdp.initial_distribution);
    for t in 0..mdp.horizon {
        for s in 0..mdp.num_states {
            if visit[t][s] == 0.0 {
                continue;
            }
            let probs = policy.action_probs(&HistoryKey::new(s, vec![]))?;
            for a in 0..mdp.num_actions {
                if probs[a] == 0.0 {
                    continue;
                }
                for (s_next, &p) in mdp.transition[s][a].iter().enumerate() {
                    if p > 0.0 {
                        visit[t + 1][s_next] += visit[t][s] * probs[a] * p;
                    }
                }
            }
        }
    }
    Ok(visit)
}

fn moments(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Exact policy gradient of the undiscounted tree-bandit return, computed by
/// full enumeration with group-relative advantages; equals `grad J` exactly.
pub fn exact_tree_policy_gradient(
    spec: &TreeBanditSpec,
    policy: &TabularSoftmaxPolicy,
) -> Result<Vec<f64>> {
    let groups = enumerate_batch(spec, policy)?;
    let weights: Vec<f64> = groups
        .iter()
        .map(|g| spec.initial_distribution[g.s0])
        .collect();
    let config = UpdateConfig {
        normalization: NormalizationKind::None,
        estimator: EstimatorKind::Grae,
        ..UpdateConfig::default()
    };
    let records = sequence_advantage_records(&groups, &config)?;
    let samples = sequence_samples(spec, &groups, &weights, &records);
    let mut grad = policy.zero_grad();
    reinforce_gradient(policy, &samples, &mut grad)?;
    Ok(grad)
}

/// Exact discounted policy gradient of an MDP objective by trajectory
/// enumeration: `E[(sum_t grad log pi) * G_gamma]`.
pub fn exact_mdp_policy_gradient(
    mdp: &FiniteMdpSpec,
    policy: &TabularSoftmaxPolicy,
    discount: f64,
) -> Result<Vec<f64>> {
    let mut grad = policy.zero_grad();
    for (traj, prob) in enumerate_mdp_trajectories(mdp, policy)? {
        let g = traj.discounted_return(discount);
        for t in 0..traj.actions.len() {
            policy.accumulate_score(
                &HistoryKey::new(traj.states[t], vec![]),
                traj.actions[t],
                prob * g,
                &mut grad,
            )?;
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{generate_finite_mdp, generate_tree_bandit, MdpShape, TreeBanditShape};

    fn bandit(seed: u64) -> TreeBanditSpec {
        generate_tree_bandit(
            seed,
            &TreeBanditShape {
                num_initial_states: 2,
                actions_per_turn: vec![2, 3],
                reward_range: (0.0, 1.0),
                min_turns: None,
            },
        )
        .unwrap()
    }

    fn exact_settings(iterations: usize) -> RunSettings {
        RunSettings {
            iterations,
            seed: 0,
            mode: Mode::Exact,
            batch_size: 4,
            group_size: 4,
            optimal_return: None,
        }
    }

    #[test]
    fn zero_advantages_give_zero_gradient() {
        let spec = bandit(1);
        let policy = TabularSoftmaxPolicy::uniform_for_bandit(&spec);
        let samples = vec![ClipSample {
            ratio_terms: vec![(HistoryKey::new(0, vec![]), 0)],
            coefficient: 0.0,
            weight: 1.0,
            masked: false,
        }];
        let mut grad = policy.zero_grad();
        let norm = reinforce_gradient(&policy, &samples, &mut grad).unwrap();
        assert_eq!(norm, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn single_sample_score_gradient() {
        let spec = bandit(1);
        let policy = TabularSoftmaxPolicy::uniform_for_bandit(&spec);
        let key = HistoryKey::new(0, vec![]);
        let samples = vec![ClipSample {
            ratio_terms: vec![(key.clone(), 0)],
            coefficient: 1.0,
            weight: 1.0,
            masked: false,
        }];
        let mut grad = policy.zero_grad();
        reinforce_gradient(&policy, &samples, &mut grad).unwrap();
        // find the key's block: probe via a policy step and prob change
        let g = policy.grad_log_prob(&key, 0).unwrap();
        assert_eq!(g, vec![0.5, -0.5]);
        // the flat gradient contains exactly that block
        let nonzero: Vec<f64> = grad.iter().copied().filter(|&x| x != 0.0).collect();
        assert_eq!(nonzero, vec![0.5, -0.5]);
    }

    #[test]
    fn exact_grae_reinforce_gradient_matches_finite_differences_of_j() {
        let spec = bandit(3);
        let mut policy = TabularSoftmaxPolicy::uniform_for_bandit(&spec);
        policy.perturb_gaussian(2, 0.5);
        let analytic = exact_tree_policy_gradient(&spec, &policy).unwrap();

        // finite differences of exact J over every logit
        let h = 1e-5;
        let n = policy.param_count();
        let mut fd = vec![0.0; n];
        for i in 0..n {
            let mut basis = vec![0.0; n];
            basis[i] = 1.0;
            let mut plus = policy.clone();
            plus.apply_step(&basis, h);
            let mut minus = policy.clone();
            minus.apply_step(&basis, -h);
            let jp = tree_exact_return(&spec, &exact_tree_values(&spec, &plus).unwrap());
            let jm = tree_exact_return(&spec, &exact_tree_values(&spec, &minus).unwrap());
            fd[i] = (jp - jm) / (2.0 * h);
        }
        let gap: f64 = analytic
            .iter()
            .zip(&fd)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(gap < 1e-8, "gap {gap}");
    }

    #[test]
    fn clip_term_piecewise_shapes() {
        // negative advantage: -5r above the lower clip bound, flat -4 below
        for (r, expected) in [(0.5, -4.0), (0.79, -4.0), (0.8, -4.0), (1.0, -5.0), (1.5, -7.5)] {
            assert!((clip_term(r, -5.0, 0.2) - expected).abs() <= 1e-12, "r={r}");
        }
        // positive advantage: +5r below the upper bound, flat +6 above
        for (r, expected) in [(0.5, 2.5), (1.0, 5.0), (1.2, 6.0), (1.4, 6.0)] {
            assert!((clip_term(r, 5.0, 0.2) - expected).abs() <= 1e-12, "r={r}");
        }
    }

    #[test]
    fn objective_at_old_policy_is_expected_advantage() {
        let spec = bandit(4);
        let mut policy = TabularSoftmaxPolicy::uniform_for_bandit(&spec);
        policy.perturb_gaussian(4, 0.4);
        let old = policy.snapshot();
        let samples = vec![
            ClipSample {
                ratio_terms: vec![(HistoryKey::new(0, vec![]), 0)],
                coefficient: 2.0,
                weight: 0.25,
                masked: false,
            },
            ClipSample {
                ratio_terms: vec![(HistoryKey::new(1, vec![]), 1)],
                coefficient: -1.0,
                weight: 0.75,
                masked: false,
            },
        ];
        let obj = ppu_objective(&policy, &old, &samples, 0.2).unwrap();
        assert!((obj - (0.25 * 2.0 + 0.75 * -1.0)).abs() <= 1e-15);
    }

    #[test]
    fn ppu_gradient_at_old_policy_equals_reinforce_for_positive_advantages() {
        let spec = bandit(5);
        let mut policy = TabularSoftmaxPolicy::uniform_for_bandit(&spec);
        policy.perturb_gaussian(6, 0.7);
        let old = policy.snapshot();
        let samples: Vec<ClipSample> = policy
            .keys()
            .iter()
            .enumerate()
            .map(|(i, key)| ClipSample {
                ratio_terms: vec![(key.clone(), 0)],
                coefficient: 0.5 + i as f64 * 0.1,
                weight: 1.0 / 7.0,
                masked: false,
            })
            .collect();
        let mut a = policy.zero_grad();
        let mut b = policy.zero_grad();
        ppu_gradient(&policy, &old, &samples, 0.2, 0.0, &mut a).unwrap();
        reinforce_gradient(&policy, &samples, &mut b).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-15);
        }
    }

    #[test]
    fn clipped_samples_contribute_zero_gradient() {
        let spec = bandit(5);
        let mut policy = TabularSoftmaxPolicy::uniform_for_bandit(&spec);
        let key = HistoryKey::new(0, vec![]);
        let old = policy.snapshot();
        // push prob of action 0 well above 1.2x its old value
        policy.set_logits(&key, &[2.0, -2.0]).unwrap();
        let samples = vec![ClipSample {
            ratio_terms: vec![(key.clone(), 0)],
            coefficient: 1.0,
            weight: 1.0,
            masked: false,
        }];
        let mut grad = policy.zero_grad();
        let stats = ppu_gradient(&policy, &old, &samples, 0.2, 0.0, &mut grad).unwrap();
        assert_eq!(stats.clip_fraction, 1.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn masked_samples_are_ignored() {
        let spec = bandit(5);
        let policy = TabularSoftmaxPolicy::uniform_for_bandit(&spec);
        let old = policy.snapshot();
        let live = ClipSample {
            ratio_terms: vec![(HistoryKey::new(0, vec![]), 0)],
            coefficient: 1.0,
            weight: 1.0,
            masked: false,
        };
        let mut masked = live.clone();
        masked.coefficient = 99.0;
        masked.masked = true;
        let mut with = policy.zero_grad();
        let mut without = policy.zero_grad();
        ppu_gradient(&policy, &old, &[live.clone(), masked], 0.2, 0.0, &mut with).unwrap();
        ppu_gradient(&policy, &old, &[live], 0.2, 0.0, &mut without).unwrap();
        assert_eq!(with, without);
    }

    #[test]
    fn ppu_gradient_matches_finite_differences_away_from_kinks() {
        let spec = bandit(7);
        let mut policy = TabularSoftmaxPolicy::uniform_for_bandit(&spec);
        policy.perturb_gaussian(9, 0.3);
        let old_policy = {
            let mut p = policy.clone();
            p.perturb_gaussian(10, 0.05);
            p
        };
        let old = old_policy.snapshot();
        let samples: Vec<ClipSample> = policy
            .keys()
            .iter()
            .enumerate()
            .map(|(i, key)| ClipSample {
                ratio_terms: vec![(key.clone(), i % 2)],
                coefficient: if i % 2 == 0 { 1.3 } else { -0.8 },
                weight: 0.2,
                masked: false,
            })
            .collect();
        // keep away from clip kinks: require |r - (1 +- eps)| > 1e-3
        let eps = 0.2;
        for s in &samples {
            let r = sample_ratio(&policy, &old, s).unwrap();
            assert!((r - (1.0 - eps)).abs() > 1e-3 && (r - (1.0 + eps)).abs() > 1e-3);
        }
        let mut analytic = policy.zero_grad();
        ppu_gradient(&policy, &old, &samples, eps, 0.0, &mut analytic).unwrap();
        let h = 1e-5;
        for i in 0..policy.param_count() {
            let mut basis = vec![0.0; policy.param_count()];
            basis[i] = 1.0;
            let mut plus = policy.clone();
            plus.apply_step(&basis, h);
            let mut minus = policy.clone();
            minus.apply_step(&basis, -h);
            let op = ppu_objective(&plus, &old, &samples, eps).unwrap();
            let om = ppu_objective(&minus, &old, &samples, eps).unwrap();
            let fd = (op - om) / (2.0 * h);
            assert!(
                (fd - analytic[i]).abs() <= 1e-6 * fd.abs().max(1.0),
                "param {i}: fd {fd} vs {}",
                analytic[i]
            );
        }
    }

    #[test]
    fn baseline_shift_leaves_exact_reinforce_gradient_unchanged() {
        let spec = bandit(8);
        let mut policy = TabularSoftmaxPolicy::uniform_for_bandit(&spec);
        policy.perturb_gaussian(11, 0.6);
        let groups = enumerate_batch(&spec, &policy).unwrap();
        let weights: Vec<f64> = groups
            .iter()
            .map(|g| spec.initial_distribution[g.s0])
            .collect();
        let config = UpdateConfig {
            normalization: NormalizationKind::None,
            ..UpdateConfig::default()
        };
        let records = sequence_advantage_records(&groups, &config).unwrap();
        let samples = sequence_samples(&spec, &groups, &weights, &records);
        // shift per-initial-state constants into the coefficients
        let shifted: Vec<ClipSample> = samples
            .iter()
            .map(|s| {
                let mut c = s.clone();
                let s0 = c.ratio_terms[0].0.s0;
                c.coefficient += 3.0 + 2.0 * s0 as f64;
                c
            })
            .collect();
        let mut a = policy.zero_grad();
        let mut b = policy.zero_grad();
        reinforce_gradient(&policy, &samples, &mut a).unwrap();
        reinforce_gradient(&policy, &shifted, &mut b).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-10, "{x} vs {y}");
        }
    }

    #[test]
    fn scaling_advantages_scales_the_clipped_gradient() {
        let spec = bandit(9);
        let mut policy = TabularSoftmaxPolicy::uniform_for_bandit(&spec);
        policy.perturb_gaussian(12, 0.4);
        let old_policy = {
            let mut p = policy.clone();
            p.perturb_gaussian(13, 0.1);
            p
        };
        let old = old_policy.snapshot();
        let samples: Vec<ClipSample> = policy
            .keys()
            .iter()
            .enumerate()
            .map(|(i, key)| ClipSample {
                ratio_terms: vec![(key.clone(), 0)],
                coefficient: (i as f64 - 3.0) * 0.7,
                weight: 0.1,
                masked: false,
            })
            .collect();
        // power-of-two scale: bitwise-exact homogeneity
        let doubled: Vec<ClipSample> = samples
            .iter()
            .map(|s| {
                let mut c = s.clone();
                c.coefficient *= 2.0;
                c
            })
            .collect();
        let mut g1 = policy.zero_grad();
        let mut g2 = policy.zero_grad();
        ppu_gradient(&policy, &old, &samples, 0.2, 0.0, &mut g1).unwrap();
        ppu_gradient(&policy, &old, &doubled, 0.2, 0.0, &mut g2).unwrap();
        for (x, y) in g1.iter().zip(&g2) {
            assert_eq!(2.0 * x, *y);
        }
        // generic positive scale: direction preserved to fp accuracy
        let scaled: Vec<ClipSample> = samples
            .iter()
            .map(|s| {
                let mut c = s.clone();
                c.coefficient *= 1.7;
                c
            })
            .collect();
        let mut g3 = policy.zero_grad();
        ppu_gradient(&policy, &old, &scaled, 0.2, 0.0, &mut g3).unwrap();
        for (x, y) in g1.iter().zip(&g3) {
            assert!((1.7 * x - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
    }

    #[test]
    fn grae_reinforce_improves_monotonically_in_exact_mode() {
        let spec = bandit(20);
        let mut policy = TabularSoftmaxPolicy::uniform_for_bandit(&spec);
        let config = UpdateConfig {
            learning_rate: 0.2,
            epochs_per_batch: 1,
            normalization: NormalizationKind::None,
            estimator: EstimatorKind::Grae,
            discount: 1.0,
            ..UpdateConfig::default()
        };
        let report = run_algorithm(
            AlgorithmName::GraeReinforce,
            &EnvSpec::Tree(spec),
            &mut policy,
            &config,
            &exact_settings(200),
        )
        .unwrap();
        assert!(
            report.min_return_delta() >= -1e-9,
            "worst delta {}",
            report.min_return_delta()
        );
        assert!(report.final_return > report.rows[0].exact_return);
    }

    #[test]
    fn gae_ppu_improves_monotonically_with_exact_values() {
        let mdp = generate_finite_mdp(
            21,
            &MdpShape {
                num_states: 3,
                num_actions: 2,
                horizon: 3,
                discount: 0.9,
                reward_range: (-1.0, 1.0),
                deterministic_transitions: false,
                layered_terminal_rewards: false,
            },
        )
        .unwrap();
        let mut policy = TabularSoftmaxPolicy::uniform_for_mdp(&mdp);
        let config = UpdateConfig {
            learning_rate: 0.1,
            epochs_per_batch: 1,
            discount: 0.9,
            gae_lambda: 0.5,
            normalization: NormalizationKind::None,
            estimator: EstimatorKind::Gae,
            ..UpdateConfig::default()
        };
        let report = run_algorithm(
            AlgorithmName::GaePpu,
            &EnvSpec::Mdp(mdp),
            &mut policy,
            &config,
            &exact_settings(150),
        )
        .unwrap();
        assert!(
            report.min_return_delta() >= -1e-9,
            "worst delta {}",
            report.min_return_delta()
        );
        assert!(report.final_return > report.rows[0].exact_return);
    }

    #[test]
    fn invalid_combinations_are_rejected() {
        let spec = bandit(1);
        let mut policy = TabularSoftmaxPolicy::uniform_for_bandit(&spec);
        let config = UpdateConfig {
            estimator: EstimatorKind::Gae,
            ..UpdateConfig::default()
        };
        let err = run_algorithm(
            AlgorithmName::GraeReinforce,
            &EnvSpec::Tree(spec.clone()),
            &mut policy,
            &config,
            &exact_settings(1),
        );
        assert!(matches!(err, Err(CoreError::InvalidCombination(_))));

        let config = UpdateConfig::default();
        let err = run_algorithm(
            AlgorithmName::GraePpuToken,
            &EnvSpec::Tree(spec),
            &mut policy,
            &config,
            &exact_settings(1),
        );
        assert!(matches!(err, Err(CoreError::InvalidCombination(_))));
    }

    #[test]
    fn discounted_grae_gradient_differs_from_true_gradient_on_witness() {
        // deferred to theory::verify_grae_gradient tests; here check gamma=1
        // equality pathway on a small random MDP
        let mdp = generate_finite_mdp(
            22,
            &MdpShape {
                num_states: 3,
                num_actions: 2,
                horizon: 3,
                discount: 1.0,
                reward_range: (-1.0, 1.0),
                deterministic_transitions: false,
                layered_terminal_rewards: false,
            },
        )
        .unwrap();
        let mut policy = TabularSoftmaxPolicy::uniform_for_mdp(&mdp);
        policy.perturb_gaussian(3, 0.5);
        let true_grad = exact_mdp_policy_gradient(&mdp, &policy, 1.0).unwrap();
        // GRAE gradient: centered total return per trajectory
        let values = exact_mdp_values(&mdp, &policy, 1.0).unwrap();
        let mut grae_grad = policy.zero_grad();
        for (traj, prob) in enumerate_mdp_trajectories(&mdp, &policy).unwrap() {
            let centered = traj.total_return() - values.v[0][traj.states[0]];
            for t in 0..traj.actions.len() {
                policy
                    .accumulate_score(
                        &HistoryKey::new(traj.states[t], vec![]),
                        traj.actions[t],
                        prob * centered,
                        &mut grae_grad,
                    )
                    .unwrap();
            }
        }
        let gap: f64 = true_grad
            .iter()
            .zip(&grae_grad)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(gap < 1e-8, "gap {gap}");
    }
}
