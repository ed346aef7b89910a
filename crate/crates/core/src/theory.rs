//! Executable counterparts of the convergence analysis: the backward
//! induction and brute-force oracles, the three drift functionals with
//! randomized property certification, exact gradient verification, and the
//! clipping-direction / policy-degradation reproduction.

use crate::advantage::{exact_mdp_values, mdp_exact_return};
use crate::envs::{
    build_degradation_mdp, FiniteMdpSpec, TreeBanditSpec, DEGRADATION_REFERENCE_S1,
    EXACT_PATH_CAP,
};
use crate::error::{CoreError, Result};
use crate::policy::{HistoryKey, TabularSoftmaxPolicy};
use crate::rng;
use crate::rollout::enumerate_mdp_trajectories;
use crate::updates::{
    exact_mdp_policy_gradient, ppu_gradient, run_algorithm, AlgorithmName, ClipSample, EnvSpec,
    Mode, RunSettings, UpdateConfig,
};
use crate::advantage::{EstimatorKind, NormalizationKind};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Cap on deterministic history-conditioned policies enumerated per initial
/// state by [`brute_force_optimal`].
pub const BRUTE_FORCE_POLICY_CAP: u128 = 1_000_000;

// ---------------------------------------------------------------------------
// Optimality oracles
// ---------------------------------------------------------------------------

/// `V*` over every history prefix, the argmax action sets, and
/// `J* = sum_s0 d(s0) V*(s0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimalValueTree {
    pub v_star: BTreeMap<HistoryKey, f64>,
    /// Actions achieving the max at each decision node (ties kept).
    pub argmax_actions: BTreeMap<HistoryKey, Vec<usize>>,
    pub optimal_return: f64,
}

/// Backward maximization over the reward tree: terminal values are table
/// rewards, each earlier node takes the max over its children.
pub fn backward_induction(spec: &TreeBanditSpec) -> Result<OptimalValueTree> {
    if spec.total_paths() > EXACT_PATH_CAP {
        return Err(CoreError::CapExceeded {
            actual: spec.total_paths(),
            cap: EXACT_PATH_CAP,
        });
    }
    let mut v_star = BTreeMap::new();
    let mut argmax_actions = BTreeMap::new();
    let mut initial_values = vec![0.0; spec.num_initial_states];
    for s0 in 0..spec.num_initial_states {
        let mut prefix = Vec::new();
        initial_values[s0] =
            backward_rec(spec, s0, 1, &mut prefix, &mut v_star, &mut argmax_actions);
    }
    let optimal_return = (0..spec.num_initial_states)
        .map(|s0| spec.initial_distribution[s0] * initial_values[s0])
        .sum();
    Ok(OptimalValueTree {
        v_star,
        argmax_actions,
        optimal_return,
    })
}

fn backward_rec(
    spec: &TreeBanditSpec,
    s0: usize,
    turn: usize,
    prefix: &mut Vec<usize>,
    v_star: &mut BTreeMap<HistoryKey, f64>,
    argmax_actions: &mut BTreeMap<HistoryKey, Vec<usize>>,
) -> f64 {
    if turn > spec.horizon {
        let value = spec.reward(s0, prefix);
        v_star.insert(HistoryKey::new(s0, prefix.clone()), value);
        return value;
    }
    let n = spec.effective_actions(s0, turn);
    let mut children = Vec::with_capacity(n);
    for a in 0..n {
        prefix.push(a);
        children.push(backward_rec(spec, s0, turn + 1, prefix, v_star, argmax_actions));
        prefix.pop();
    }
    let best = children.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let winners: Vec<usize> = children
        .iter()
        .enumerate()
        .filter(|(_, &v)| v == best)
        .map(|(a, _)| a)
        .collect();
    let key = HistoryKey::new(s0, prefix.clone());
    v_star.insert(key.clone(), best);
    argmax_actions.insert(key, winners);
    best
}

/// Exhaustive enumeration of deterministic history-conditioned policies,
/// independently per initial state (the joint optimum decomposes across
/// initial states). Must agree with [`backward_induction`].
pub fn brute_force_optimal(
    spec: &TreeBanditSpec,
) -> Result<(f64, BTreeMap<HistoryKey, usize>)> {
    let mut best_policy = BTreeMap::new();
    let mut per_state_best = vec![f64::NEG_INFINITY; spec.num_initial_states];
    for s0 in 0..spec.num_initial_states {
        // Decision nodes in breadth-first order with their action counts.
        let mut nodes: Vec<(HistoryKey, usize)> = Vec::new();
        let mut frontier: Vec<Vec<usize>> = vec![vec![]];
        for turn in 1..=spec.episode_turns[s0] {
            let n = spec.effective_actions(s0, turn);
            let mut next = Vec::new();
            for prefix in frontier {
                nodes.push((HistoryKey::new(s0, prefix.clone()), n));
                if turn < spec.episode_turns[s0] {
                    for a in 0..n {
                        let mut p = prefix.clone();
                        p.push(a);
                        next.push(p);
                    }
                }
            }
            frontier = next;
        }
        let count: u128 = nodes.iter().map(|(_, n)| *n as u128).product();
        if count > BRUTE_FORCE_POLICY_CAP {
            return Err(CoreError::CapExceeded {
                actual: count,
                cap: BRUTE_FORCE_POLICY_CAP,
            });
        }
        let node_index: BTreeMap<&HistoryKey, usize> =
            nodes.iter().enumerate().map(|(i, (k, _))| (k, i)).collect();

        let mut digits = vec![0usize; nodes.len()];
        let mut best_digits = digits.clone();
        loop {
            // follow the deterministic policy from the root
            let mut path = vec![0usize; spec.horizon];
            let mut prefix: Vec<usize> = Vec::new();
            for turn in 1..=spec.episode_turns[s0] {
                let key = HistoryKey::new(s0, prefix.clone());
                let a = digits[node_index[&key]];
                path[turn - 1] = a;
                prefix.push(a);
            }
            let value = spec.reward(s0, &path);
            if value > per_state_best[s0] {
                per_state_best[s0] = value;
                best_digits.copy_from_slice(&digits);
            }
            // mixed-radix increment over policy assignments
            let mut i = nodes.len();
            loop {
                if i == 0 {
                    break;
                }
                i -= 1;
                digits[i] += 1;
                if digits[i] < nodes[i].1 {
                    break;
                }
                digits[i] = 0;
            }
            if digits.iter().all(|&d| d == 0) {
                break;
            }
        }
        for (i, (key, _)) in nodes.iter().enumerate() {
            best_policy.insert(key.clone(), best_digits[i]);
        }
    }
    let optimal_return = (0..spec.num_initial_states)
        .map(|s0| spec.initial_distribution[s0] * per_state_best[s0])
        .sum();
    Ok((optimal_return, best_policy))
}

// ---------------------------------------------------------------------------
// Drift functionals
// ---------------------------------------------------------------------------

/// `E_{a~old}[ relu( (r - clip(r, 1 +- eps)) A(a) ) ]` with `r = cand/old`.
pub fn ppu_drift(old: &[f64], candidate: &[f64], advantages: &[f64], eps: f64) -> f64 {
    let mut total = 0.0;
    for a in 0..old.len() {
        let r = candidate[a] / old[a];
        let excess = (r - r.clamp(1.0 - eps, 1.0 + eps)) * advantages[a];
        total += old[a] * excess.max(0.0);
    }
    total
}

/// The group-relative variant: the state-dependent shift `delta` rides
/// inside the ReLU and is subtracted outside, so the value at
/// candidate = old is exactly `-delta`.
pub fn grae_ppu_drift(
    old: &[f64],
    candidate: &[f64],
    advantages: &[f64],
    delta: f64,
    eps: f64,
) -> f64 {
    let mut total = 0.0;
    for a in 0..old.len() {
        let r = candidate[a] / old[a];
        let excess = (r - r.clamp(1.0 - eps, 1.0 + eps)) * (advantages[a] + delta);
        total += old[a] * excess.max(0.0);
    }
    total - delta
}

/// The group-variance-scaled sequence objective's drift:
/// `E_{a~old}[ r A - min(r A / delta, clip(r) A / delta) ]`.
pub fn gspo_drift(
    old: &[f64],
    candidate: &[f64],
    advantages: &[f64],
    delta_std: f64,
    eps: f64,
) -> Result<f64> {
    if delta_std <= 0.0 {
        return Err(CoreError::InvalidParameter(
            "group std must be positive".into(),
        ));
    }
    let mut total = 0.0;
    for a in 0..old.len() {
        let r = candidate[a] / old[a];
        let rc = r.clamp(1.0 - eps, 1.0 + eps);
        let scaled = (r * advantages[a] / delta_std).min(rc * advantages[a] / delta_std);
        total += old[a] * (r * advantages[a] - scaled);
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum DriftKind {
    Ppu,
    GraePpu { delta: f64 },
    Gspo { delta_std: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftWitness {
    pub old: Vec<f64>,
    pub candidate: Vec<f64>,
    pub advantages: Vec<f64>,
    pub value: f64,
}

/// Outcome of randomized drift certification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftPropertyReport {
    pub kind: DriftKind,
    pub draws: usize,
    pub min_value: f64,
    pub negative_draws: usize,
    /// Value at candidate = old on a canonical interior state.
    pub origin_value: f64,
    /// Central-difference gradient norm at the origin over simplex
    /// directions, h = 1e-5.
    pub origin_fd_grad_norm: f64,
    /// A certified negative-drift witness, when one exists.
    pub witness: Option<DriftWitness>,
}

fn random_simplex(r: &mut rand_chacha::ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| -f64::ln(r.gen_range(1e-12..1.0))).collect();
    let sum: f64 = raw.iter().sum();
    raw.iter().map(|x| (x / sum).max(1e-9)).collect()
}

/// Advantages consistent with `old` being the sampling policy:
/// `A = Q - E_old[Q]`, so `sum_a old(a) A(a) = 0`.
fn random_advantages(r: &mut rand_chacha::ChaCha8Rng, old: &[f64]) -> Vec<f64> {
    let q: Vec<f64> = (0..old.len()).map(|_| r.gen_range(-1.0..1.0)).collect();
    let mean: f64 = old.iter().zip(&q).map(|(p, v)| p * v).sum();
    q.iter().map(|v| v - mean).collect()
}

fn evaluate(kind: DriftKind, old: &[f64], cand: &[f64], adv: &[f64], eps: f64) -> f64 {
    match kind {
        DriftKind::Ppu => ppu_drift(old, cand, adv, eps),
        DriftKind::GraePpu { delta } => grae_ppu_drift(old, cand, adv, delta, eps),
        DriftKind::Gspo { delta_std } => {
            gspo_drift(old, cand, adv, delta_std, eps).expect("positive std")
        }
    }
}

/// Randomized certification with an analytic fallback witness: the clipped
/// drift never goes negative, while the shifted and the variance-scaled
/// variants admit certified violations whenever their bias parameter is not
/// neutral.
pub fn check_drift_properties(kind: DriftKind, search_budget: usize, seed: u64) -> DriftPropertyReport {
    let eps = 0.2;
    let mut r = rng::stream(seed, "drift-search", 0);
    let mut min_value = f64::INFINITY;
    let mut negative_draws = 0usize;
    let mut witness: Option<DriftWitness> = None;

    for _ in 0..search_budget.max(1) {
        let n = r.gen_range(2..=5);
        let old = random_simplex(&mut r, n);
        let cand = random_simplex(&mut r, n);
        let adv = random_advantages(&mut r, &old);
        let value = evaluate(kind, &old, &cand, &adv, eps);
        if value < min_value {
            min_value = value;
            if value < -1e-12 {
                witness = Some(DriftWitness {
                    old: old.clone(),
                    candidate: cand.clone(),
                    advantages: adv.clone(),
                    value,
                });
            }
        }
        if value < -1e-12 {
            negative_draws += 1;
        }
    }

    // canonical interior origin: uniform old = candidate, advantages (+-c)
    let origin_old = vec![0.5, 0.5];
    let origin_adv = vec![1.0, -1.0];
    let origin_value = evaluate(kind, &origin_old, &origin_old, &origin_adv, eps);
    if origin_value < min_value {
        min_value = origin_value;
        if origin_value < -1e-12 && witness.is_none() {
            witness = Some(DriftWitness {
                old: origin_old.clone(),
                candidate: origin_old.clone(),
                advantages: origin_adv.clone(),
                value: origin_value,
            });
        }
    }

    // analytic fallback witnesses from the scaled-integrand case analysis
    if let DriftKind::Gspo { delta_std } = kind {
        if (delta_std - 1.0).abs() > 1e-12 {
            let candidate = if delta_std > 1.0 {
                // in-band ratios (0.8, 1.2): positive-advantage mass shrinks
                vec![0.4, 0.6]
            } else {
                // in-band ratios (1.2, 0.8): positive-advantage mass grows
                vec![0.6, 0.4]
            };
            let value = evaluate(kind, &origin_old, &candidate, &origin_adv, eps);
            if value < min_value {
                min_value = value;
            }
            if value < -1e-12 {
                negative_draws += 1;
                witness = Some(DriftWitness {
                    old: origin_old.clone(),
                    candidate,
                    advantages: origin_adv.clone(),
                    value,
                });
            }
        }
    }

    // finite-difference gradient at the origin along simplex directions
    let h = 1e-5;
    let mut grad_sq = 0.0;
    for i in 0..origin_old.len() {
        for j in (i + 1)..origin_old.len() {
            let mut plus = origin_old.clone();
            let mut minus = origin_old.clone();
            plus[i] += h;
            plus[j] -= h;
            minus[i] -= h;
            minus[j] += h;
            let dp = evaluate(kind, &origin_old, &plus, &origin_adv, eps);
            let dm = evaluate(kind, &origin_old, &minus, &origin_adv, eps);
            let g = (dp - dm) / (2.0 * h);
            grad_sq += g * g;
        }
    }

    DriftPropertyReport {
        kind,
        draws: search_budget,
        min_value,
        negative_draws,
        origin_value,
        origin_fd_grad_norm: grad_sq.sqrt(),
        witness,
    }
}

// ---------------------------------------------------------------------------
// Gradient verification
// ---------------------------------------------------------------------------

/// Both gradients by exact trajectory enumeration: the group-relative
/// estimator's expectation (total return minus the exact initial-state
/// value) and the true discounted policy gradient. Returns
/// `(grae_gradient, true_gradient, gap_norm)`.
pub fn verify_grae_gradient(
    mdp: &FiniteMdpSpec,
    policy: &TabularSoftmaxPolicy,
    discount: f64,
) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let undiscounted = exact_mdp_values(mdp, policy, 1.0)?;
    let mut grae = policy.zero_grad();
    for (traj, prob) in enumerate_mdp_trajectories(mdp, policy)? {
        let centered = traj.total_return() - undiscounted.v[0][traj.states[0]];
        for t in 0..traj.actions.len() {
            policy.accumulate_score(
                &HistoryKey::new(traj.states[t], vec![]),
                traj.actions[t],
                prob * centered,
                &mut grae,
            )?;
        }
    }
    let true_grad = exact_mdp_policy_gradient(mdp, policy, discount)?;
    let gap = grae
        .iter()
        .zip(&true_grad)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok((grae, true_grad, gap))
}

/// Fixed witness for the discounted-gradient bias: a two-state chain where
/// the first action controls whether later steps pay. The total-return
/// estimator weighs those later rewards without the discount, so its
/// gradient differs from the discounted policy gradient whenever
/// `discount < 1`.
pub fn build_discount_witness_mdp() -> FiniteMdpSpec {
    FiniteMdpSpec {
        num_states: 2,
        num_actions: 2,
        transition: vec![
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![vec![0.0, 1.0], vec![0.0, 1.0]],
        ],
        reward: vec![vec![0.0, 0.0], vec![1.0, 1.0]],
        horizon: 3,
        discount: 0.9,
        initial_distribution: vec![1.0, 0.0],
    }
}

// ---------------------------------------------------------------------------
// Degradation reproduction
// ---------------------------------------------------------------------------

/// The reference policy of the degradation MDP: uniform everywhere except
/// `s1`, whose probabilities pin `V(s1) = 10`.
pub fn degradation_reference_policy(mdp: &FiniteMdpSpec) -> TabularSoftmaxPolicy {
    let mut policy = TabularSoftmaxPolicy::uniform_for_mdp(mdp);
    let (p_good, p_bad) = DEGRADATION_REFERENCE_S1;
    policy
        .set_logits(&HistoryKey::new(1, vec![]), &[p_good.ln(), p_bad.ln()])
        .expect("s1 exists");
    policy
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationReport {
    pub delta_s1: f64,
    pub true_advantages_s1: (f64, f64),
    pub grae_advantages_s1: (f64, f64),
    /// Where the clipped objective drives the `a_bad` ratio under the
    /// group-relative (sign-flipped) advantage.
    pub ratio_bad_under_grae: f64,
    /// Where it drives the same ratio under the true advantage.
    pub ratio_bad_under_true: f64,
    /// Exact return before and after one sampled-mode group-relative
    /// clipped iteration whose group pairs the bad action with the low
    /// branch.
    pub j_before: f64,
    pub j_after: f64,
    pub pi_bad_before: f64,
    pub pi_bad_after: f64,
    /// Seed whose batch realizes that group composition (first match).
    pub batch_seed: u64,
}

/// Optimizes the clipped objective restricted to the single `(s1, a_bad)`
/// sample until its gradient vanishes; returns the final ratio. With a
/// positive coefficient the ratio saturates just above `1 + eps`, with a
/// negative one just below `1 - eps`.
fn saturate_bad_ratio(mdp: &FiniteMdpSpec, coefficient: f64, eps: f64) -> Result<f64> {
    let mut policy = degradation_reference_policy(mdp);
    let start = policy.snapshot();
    let key = HistoryKey::new(1, vec![]);
    let samples = vec![ClipSample {
        ratio_terms: vec![(key.clone(), 1)],
        coefficient,
        weight: 1.0,
        masked: false,
    }];
    let mut grad = policy.zero_grad();
    for _ in 0..200_000 {
        let stats = ppu_gradient(&policy, &start, &samples, eps, 0.0, &mut grad)?;
        if stats.grad_norm == 0.0 {
            break;
        }
        policy.apply_step(&grad, 1e-4);
    }
    Ok(policy.prob(&key, 1)? / start.prob(&key, 1)?)
}

/// Finds the first seed whose single sampled group pairs one trajectory
/// through `(s1, a_bad)` with one through the low branch `s2`.
fn find_degrading_batch_seed(
    mdp: &FiniteMdpSpec,
    policy: &TabularSoftmaxPolicy,
) -> Result<u64> {
    for seed in 0..100_000u64 {
        let groups = crate::rollout::collect_mdp_batch(mdp, policy, 1, 2, seed)?;
        let group = &groups[0];
        let bad = group
            .trajectories
            .iter()
            .any(|t| t.states[1] == 1 && t.actions[1] == 1);
        let low = group.trajectories.iter().any(|t| t.states[1] == 2);
        if bad && low {
            return Ok(seed);
        }
    }
    Err(CoreError::Invariant(
        "no degrading batch composition found".into(),
    ))
}

/// Reproduces the counterexample end to end: the clipping directions at
/// `(s1, a_bad)` reverse under the group-relative shift, and one realistic
/// sampled iteration strictly decreases the exact return.
pub fn reproduce_degradation() -> Result<DegradationReport> {
    let mdp = build_degradation_mdp();
    let eps = 0.2;
    let policy = degradation_reference_policy(&mdp);
    let values = exact_mdp_values(&mdp, &policy, 1.0)?;
    let delta_s1 = values.v[1][1] - values.v[0][0];
    let true_adv = (values.advantage(1, 1, 0), values.advantage(1, 1, 1));
    let grae_adv = (true_adv.0 + delta_s1, true_adv.1 + delta_s1);

    let ratio_bad_under_grae = saturate_bad_ratio(&mdp, grae_adv.1, eps)?;
    let ratio_bad_under_true = saturate_bad_ratio(&mdp, true_adv.1, eps)?;

    // one real sampled-mode iteration with the degrading group composition
    let batch_seed = find_degrading_batch_seed(&mdp, &policy)?;
    let mut trained = policy.clone();
    let config = UpdateConfig {
        learning_rate: 1e-4,
        clip_epsilon: eps,
        epochs_per_batch: 6_000,
        kl_penalty_coefficient: 0.0,
        discount: 1.0,
        gae_lambda: 0.95,
        normalization: NormalizationKind::None,
        estimator: EstimatorKind::Grae,
        per_context_steps: false,
    };
    let settings = RunSettings {
        iterations: 1,
        seed: batch_seed,
        mode: Mode::Sampled,
        batch_size: 1,
        group_size: 2,
        optimal_return: None,
    };
    // the runner derives its collection seed from (seed, iteration); rebuild
    // the same batch directly to keep the composition pinned
    let report = run_with_fixed_batch_seed(&mdp, &mut trained, &config, &settings)?;
    let j_before = report.0;
    let j_after = report.1;

    let key = HistoryKey::new(1, vec![]);
    Ok(DegradationReport {
        delta_s1,
        true_advantages_s1: true_adv,
        grae_advantages_s1: grae_adv,
        ratio_bad_under_grae,
        ratio_bad_under_true,
        j_before,
        j_after,
        pi_bad_before: policy.prob(&key, 1)?,
        pi_bad_after: trained.prob(&key, 1)?,
        batch_seed,
    })
}

/// One group-relative token-level clipped iteration on a batch collected
/// with exactly `settings.seed`; returns `(J_before, J_after)`.
fn run_with_fixed_batch_seed(
    mdp: &FiniteMdpSpec,
    policy: &mut TabularSoftmaxPolicy,
    config: &UpdateConfig,
    settings: &RunSettings,
) -> Result<(f64, f64)> {
    let j_before = mdp_exact_return(mdp, &exact_mdp_values(mdp, policy, 1.0)?);
    let groups = crate::rollout::collect_mdp_batch(
        mdp,
        policy,
        settings.batch_size,
        settings.group_size,
        settings.seed,
    )?;
    let old = policy.snapshot();
    let w = 1.0 / (settings.batch_size * settings.group_size) as f64;
    let mut samples = Vec::new();
    for group in &groups {
        for traj in &group.trajectories {
            let adv = traj.total_return() - group.mean_return;
            for t in 0..traj.actions.len() {
                samples.push(ClipSample {
                    ratio_terms: vec![(
                        HistoryKey::new(traj.states[t], vec![]),
                        traj.actions[t],
                    )],
                    coefficient: adv,
                    weight: w,
                    masked: false,
                });
            }
        }
    }
    let mut grad = policy.zero_grad();
    for _ in 0..config.epochs_per_batch {
        let stats = ppu_gradient(
            policy,
            &old,
            &samples,
            config.clip_epsilon,
            config.kl_penalty_coefficient,
            &mut grad,
        )?;
        if stats.grad_norm == 0.0 {
            break;
        }
        policy.apply_step(&grad, config.learning_rate);
    }
    let j_after = mdp_exact_return(mdp, &exact_mdp_values(mdp, policy, 1.0)?);
    Ok((j_before, j_after))
}

/// Same counterexample through the public algorithm runner (one sampled
/// iteration of the token-level group-relative update).
pub fn degradation_j_decrease_via_runner() -> Result<(f64, f64)> {
    let mdp = build_degradation_mdp();
    let mut policy = degradation_reference_policy(&mdp);
    let j_before = mdp_exact_return(&mdp, &exact_mdp_values(&mdp, &policy, 1.0)?);
    // search master seeds whose derived collection stream realizes the
    // degrading composition for iteration 0
    let mut master = None;
    for seed in 0..100_000u64 {
        let derived: u64 = rng::stream(seed, "iteration-collect", 0).gen();
        let groups = crate::rollout::collect_mdp_batch(&mdp, &policy, 1, 2, derived)?;
        let group = &groups[0];
        let bad = group
            .trajectories
            .iter()
            .any(|t| t.states[1] == 1 && t.actions[1] == 1);
        let low = group.trajectories.iter().any(|t| t.states[1] == 2);
        if bad && low {
            master = Some(seed);
            break;
        }
    }
    let master = master.ok_or_else(|| CoreError::Invariant("no degrading seed".into()))?;
    let config = UpdateConfig {
        learning_rate: 1e-4,
        clip_epsilon: 0.2,
        epochs_per_batch: 6_000,
        kl_penalty_coefficient: 0.0,
        discount: 1.0,
        gae_lambda: 0.95,
        normalization: NormalizationKind::None,
        estimator: EstimatorKind::Grae,
        per_context_steps: false,
    };
    let settings = RunSettings {
        iterations: 1,
        seed: master,
        mode: Mode::Sampled,
        batch_size: 1,
        group_size: 2,
        optimal_return: None,
    };
    let report = run_algorithm(
        AlgorithmName::GraePpuToken,
        &EnvSpec::Mdp(mdp),
        &mut policy,
        &config,
        &settings,
    )?;
    Ok((j_before, report.final_return))
}
