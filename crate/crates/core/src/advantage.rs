//! Advantage estimation: exact dynamic-programming value oracles, GAE over
//! sampled or analytically-averaged rollouts, group-relative estimates, and
//! the batch/group normalizers.
//!
//! There is no learned critic anywhere: the "critic" is always the exact DP
//! value table or a deliberately perturbed copy of it.

use crate::envs::{FiniteMdpSpec, TreeBanditSpec, EXACT_PATH_CAP};
use crate::error::{CoreError, Result};
use crate::policy::{HistoryKey, TabularSoftmaxPolicy};
use crate::rng;
use crate::rollout::{enumerate_mdp_trajectories, Group, MdpTrajectory};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

// ---------------------------------------------------------------------------
// Value tables
// ---------------------------------------------------------------------------

/// Finite-horizon value table for an MDP under a fixed policy:
/// `v[t][s]` for `t in 0..=H` (terminal row all zero) and `q[t][s][a]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpValues {
    pub discount: f64,
    pub v: Vec<Vec<f64>>,
    pub q: Vec<Vec<Vec<f64>>>,
}

impl MdpValues {
    pub fn horizon(&self) -> usize {
        self.q.len()
    }

    /// True advantage `A(s, a, t) = q(s, a, t) - v(s, t)`.
    pub fn advantage(&self, t: usize, s: usize, a: usize) -> f64 {
        self.q[t][s][a] - self.v[t][s]
    }

    /// Copy with every non-terminal `v(s, t)` shifted by a seeded error
    /// rescaled so that `max |eps| == eps_max` exactly. Terminal values stay
    /// pinned at zero: the episode has ended and there is nothing to
    /// estimate. `q` is dropped to the perturbed-consistent recomputation's
    /// responsibility and left untouched here.
    pub fn perturbed(&self, seed: u64, eps_max: f64) -> MdpValues {
        let mut r = rng::stream(seed, "value-perturbation", 0);
        let h = self.horizon();
        let num_states = self.v[0].len();
        let mut eps: Vec<Vec<f64>> = vec![vec![0.0; num_states]; h];
        let mut max_abs: f64 = 0.0;
        for row in eps.iter_mut() {
            for e in row.iter_mut() {
                *e = r.gen_range(-1.0..1.0);
                max_abs = max_abs.max((*e).abs());
            }
        }
        let scale = if max_abs > 0.0 { eps_max / max_abs } else { 0.0 };
        let mut out = self.clone();
        for t in 0..h {
            for s in 0..num_states {
                out.v[t][s] += eps[t][s] * scale;
            }
        }
        out
    }
}

/// Backward DP under `policy` with an explicit discount (callers may
/// override the spec's own): `v(s, H) = 0`,
/// `q(s, a, t) = r(s, a) + gamma * sum_s' P(s'|s, a) v(s', t+1)`,
/// `v(s, t) = sum_a pi(a|s) q(s, a, t)`.
pub fn exact_mdp_values(
    mdp: &FiniteMdpSpec,
    policy: &TabularSoftmaxPolicy,
    discount: f64,
) -> Result<MdpValues> {
    let h = mdp.horizon;
    let sn = mdp.num_states;
    let an = mdp.num_actions;
    let mut v = vec![vec![0.0; sn]; h + 1];
    let mut q = vec![vec![vec![0.0; an]; sn]; h];
    for t in (0..h).rev() {
        for s in 0..sn {
            let probs = policy.action_probs(&HistoryKey::new(s, vec![]))?;
            let mut vs = 0.0;
            for a in 0..an {
                let mut future = 0.0;
                for (s_next, &p) in mdp.transition[s][a].iter().enumerate() {
                    if p > 0.0 {
                        future += p * v[t + 1][s_next];
                    }
                }
                q[t][s][a] = mdp.reward[s][a] + discount * future;
                vs += probs[a] * q[t][s][a];
            }
            v[t][s] = vs;
        }
    }
    v.truncate(h + 1);
    Ok(MdpValues { discount, v, q })
}

/// Initial-state value `J = sum_s d(s) v(s, 0)`.
pub fn mdp_exact_return(mdp: &FiniteMdpSpec, values: &MdpValues) -> f64 {
    mdp.initial_distribution
        .iter()
        .zip(&values.v[0])
        .map(|(d, v)| d * v)
        .sum()
}

/// Values over tree-bandit histories: `v(s0, a^{1:t})` for every prefix,
/// terminal entries equal to table rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeValues {
    pub v: BTreeMap<HistoryKey, f64>,
}

impl TreeValues {
    pub fn value(&self, s0: usize, prefix: &[usize]) -> f64 {
        self.v[&HistoryKey::new(s0, prefix.to_vec())]
    }

    /// `V_pi(s0)`, the exact expected team reward from `s0`.
    pub fn initial_value(&self, s0: usize) -> f64 {
        self.value(s0, &[])
    }
}

/// Backward DP over the history tree. Padded turns pass values through
/// unchanged (their single no-op action has probability 1).
pub fn exact_tree_values(
    spec: &TreeBanditSpec,
    policy: &TabularSoftmaxPolicy,
) -> Result<TreeValues> {
    if spec.total_paths() > EXACT_PATH_CAP {
        return Err(CoreError::CapExceeded {
            actual: spec.total_paths(),
            cap: EXACT_PATH_CAP,
        });
    }
    let mut v = BTreeMap::new();
    for s0 in 0..spec.num_initial_states {
        let mut prefix = Vec::new();
        tree_value_rec(spec, policy, s0, 1, &mut prefix, &mut v)?;
    }
    Ok(TreeValues { v })
}

fn tree_value_rec(
    spec: &TreeBanditSpec,
    policy: &TabularSoftmaxPolicy,
    s0: usize,
    turn: usize,
    prefix: &mut Vec<usize>,
    v: &mut BTreeMap<HistoryKey, f64>,
) -> Result<f64> {
    if turn > spec.horizon {
        let value = spec.reward(s0, prefix);
        v.insert(HistoryKey::new(s0, prefix.clone()), value);
        return Ok(value);
    }
    let n = spec.effective_actions(s0, turn);
    let probs = if turn <= spec.episode_turns[s0] {
        policy.action_probs(&HistoryKey::new(s0, prefix.clone()))?
    } else {
        vec![1.0]
    };
    let mut value = 0.0;
    for a in 0..n {
        prefix.push(a);
        let child = tree_value_rec(spec, policy, s0, turn + 1, prefix, v)?;
        prefix.pop();
        value += probs[a] * child;
    }
    v.insert(HistoryKey::new(s0, prefix.clone()), value);
    Ok(value)
}

/// Exact expected team reward `J(pi) = sum_s0 d(s0) V_pi(s0)`.
pub fn tree_exact_return(spec: &TreeBanditSpec, values: &TreeValues) -> f64 {
    (0..spec.num_initial_states)
        .map(|s0| spec.initial_distribution[s0] * values.initial_value(s0))
        .sum()
}

// ---------------------------------------------------------------------------
// GAE
// ---------------------------------------------------------------------------

/// Truncated `(gamma * lambda)`-weighted sum of TD errors along one sampled
/// episode, against the given (possibly perturbed) critic.
pub fn gae_estimate(
    traj: &MdpTrajectory,
    critic: &MdpValues,
    gamma: f64,
    lambda: f64,
) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&lambda) || !(0.0..=1.0).contains(&gamma) {
        return Err(CoreError::InvalidParameter(
            "gamma and lambda must lie in [0, 1]".into(),
        ));
    }
    let h = traj.actions.len();
    if critic.v.len() < h + 1 {
        return Err(CoreError::Misaligned("critic shorter than episode".into()));
    }
    let value_at = |t: usize, s: usize| -> Result<f64> {
        critic
            .v
            .get(t)
            .and_then(|row| row.get(s))
            .copied()
            .ok_or_else(|| CoreError::Misaligned(format!("no value for state {s} at t={t}")))
    };
    let mut adv = vec![0.0; h];
    let mut acc = 0.0;
    for t in (0..h).rev() {
        let delta = traj.rewards[t] + gamma * value_at(t + 1, traj.states[t + 1])?
            - value_at(t, traj.states[t])?;
        acc = delta + gamma * lambda * acc;
        adv[t] = acc;
    }
    Ok(adv)
}

/// Analytic conditional expectation `E[GAE | s_t = s, a_t = a]` under
/// on-policy continuation: `[t][s][a]`. With the true value table this
/// equals the true advantage at every entry.
pub fn exact_gae_expectation(
    mdp: &FiniteMdpSpec,
    policy: &TabularSoftmaxPolicy,
    critic: &MdpValues,
    gamma: f64,
    lambda: f64,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let h = mdp.horizon;
    let sn = mdp.num_states;
    let an = mdp.num_actions;
    let mut e = vec![vec![vec![0.0; an]; sn]; h];
    for t in (0..h).rev() {
        for s in 0..sn {
            for a in 0..an {
                let mut next_v = 0.0;
                let mut next_e = 0.0;
                for (s_next, &p) in mdp.transition[s][a].iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    next_v += p * critic.v[t + 1][s_next];
                    if t + 1 < h {
                        let probs = policy.action_probs(&HistoryKey::new(s_next, vec![]))?;
                        for (a_next, &pa) in probs.iter().enumerate() {
                            next_e += p * pa * e[t + 1][s_next][a_next];
                        }
                    }
                }
                let delta = mdp.reward[s][a] + gamma * next_v - critic.v[t][s];
                e[t][s][a] = delta + gamma * lambda * next_e;
            }
        }
    }
    Ok(e)
}

/// Closed-form bias cap `(1 + gamma - 2*gamma*lambda) / (1 - gamma*lambda) * eps_max`.
pub fn gae_bias_bound(gamma: f64, lambda: f64, eps_max: f64) -> Result<f64> {
    if gamma * lambda >= 1.0 {
        return Err(CoreError::InvalidParameter(
            "gamma * lambda must be < 1".into(),
        ));
    }
    Ok((1.0 + gamma - 2.0 * gamma * lambda) / (1.0 - gamma * lambda) * eps_max)
}

// ---------------------------------------------------------------------------
// GRAE
// ---------------------------------------------------------------------------

/// Per-trajectory group-relative advantage `r_i - group mean` (weighted mean
/// in exact mode, where it equals `V_pi(s0)` exactly). With `leave_one_out`
/// the baseline excludes the trajectory itself.
pub fn grae_estimate(group: &Group, leave_one_out: bool) -> Result<Vec<f64>> {
    let g = group.trajectories.len();
    if leave_one_out && g < 2 {
        return Err(CoreError::InvalidParameter(
            "leave-one-out needs a group of at least 2".into(),
        ));
    }
    if leave_one_out {
        let wsum: f64 = group.trajectories.iter().map(|t| t.weight).sum();
        let wrsum: f64 = group
            .trajectories
            .iter()
            .map(|t| t.weight * t.reward)
            .sum();
        Ok(group
            .trajectories
            .iter()
            .map(|t| {
                let others = (wrsum - t.weight * t.reward) / (wsum - t.weight);
                t.reward - others
            })
            .collect())
    } else {
        Ok(group
            .trajectories
            .iter()
            .map(|t| t.reward - group.mean_reward)
            .collect())
    }
}

/// Honest conditional expectation of the token-level group-relative
/// estimate, `E[R_total - V(s0) | s_t = s, a_t = a]`, by exhaustive
/// trajectory enumeration. `None` where `(s, a, t)` has zero visitation.
pub fn exact_grae_token_expectation(
    mdp: &FiniteMdpSpec,
    policy: &TabularSoftmaxPolicy,
) -> Result<Vec<Vec<Vec<Option<f64>>>>> {
    let undiscounted = exact_mdp_values(mdp, policy, 1.0)?;
    let h = mdp.horizon;
    let sn = mdp.num_states;
    let an = mdp.num_actions;
    let mut wsum = vec![vec![vec![0.0; an]; sn]; h];
    let mut asum = vec![vec![vec![0.0; an]; sn]; h];
    for (traj, prob) in enumerate_mdp_trajectories(mdp, policy)? {
        let s0 = traj.states[0];
        let centered = traj.total_return() - undiscounted.v[0][s0];
        for t in 0..h {
            let (s, a) = (traj.states[t], traj.actions[t]);
            wsum[t][s][a] += prob;
            asum[t][s][a] += prob * centered;
        }
    }
    let mut out = vec![vec![vec![None; an]; sn]; h];
    for t in 0..h {
        for s in 0..sn {
            for a in 0..an {
                if wsum[t][s][a] > 1e-300 {
                    out[t][s][a] = Some(asum[t][s][a] / wsum[t][s][a]);
                }
            }
        }
    }
    Ok(out)
}

/// Token-level group-relative advantages and visitation weights for
/// exact-mode updates, computed by forward DP per initial state:
/// `advantage[t][s][a] = E[past | s0, s_t = s] + q_1(s, a, t) - V_1(s0)`.
#[derive(Debug, Clone)]
pub struct TokenGrae {
    pub s0: usize,
    /// `d(s0)`.
    pub weight: f64,
    /// `[t][s]` visitation probability from `s0`.
    pub visit: Vec<Vec<f64>>,
    /// `[t][s][a]`; zero where unreachable.
    pub advantage: Vec<Vec<Vec<f64>>>,
}

pub fn exact_token_grae(
    mdp: &FiniteMdpSpec,
    policy: &TabularSoftmaxPolicy,
) -> Result<Vec<TokenGrae>> {
    let undiscounted = exact_mdp_values(mdp, policy, 1.0)?;
    let h = mdp.horizon;
    let sn = mdp.num_states;
    let an = mdp.num_actions;
    let mut out = Vec::new();
    for s0 in 0..mdp.num_states {
        let d = mdp.initial_distribution[s0];
        if d == 0.0 {
            continue;
        }
        let mut visit = vec![vec![0.0; sn]; h + 1];
        let mut past = vec![vec![0.0; sn]; h + 1]; // E[past reward * 1{s_t = s}]
        visit[0][s0] = 1.0;
        for t in 0..h {
            for s in 0..sn {
                if visit[t][s] == 0.0 {
                    continue;
                }
                let probs = policy.action_probs(&HistoryKey::new(s, vec![]))?;
                for a in 0..an {
                    let pa = probs[a];
                    if pa == 0.0 {
                        continue;
                    }
                    for (s_next, &p) in mdp.transition[s][a].iter().enumerate() {
                        if p == 0.0 {
                            continue;
                        }
                        visit[t + 1][s_next] += visit[t][s] * pa * p;
                        past[t + 1][s_next] +=
                            (past[t][s] + visit[t][s] * mdp.reward[s][a]) * pa * p;
                    }
                }
            }
        }
        let mut advantage = vec![vec![vec![0.0; an]; sn]; h];
        for t in 0..h {
            for s in 0..sn {
                if visit[t][s] == 0.0 {
                    continue;
                }
                let expected_past = past[t][s] / visit[t][s];
                for a in 0..an {
                    advantage[t][s][a] =
                        expected_past + undiscounted.q[t][s][a] - undiscounted.v[0][s0];
                }
            }
        }
        out.push(TokenGrae {
            s0,
            weight: d,
            visit,
            advantage,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Advantage records and normalization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    Gae,
    Grae,
    GraeLoo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizationKind {
    #[default]
    None,
    Batch,
    Group,
}

/// One advantage estimate with its normalization provenance, as emitted in
/// the CSV diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageRecord {
    pub group: usize,
    pub trajectory: usize,
    /// `None` for sequence-level estimates.
    pub step: Option<usize>,
    pub estimator: EstimatorKind,
    pub raw: f64,
    pub normalization: NormalizationKind,
    pub normalized: f64,
    pub group_std: Option<f64>,
    pub batch_mean: Option<f64>,
    pub batch_std: Option<f64>,
    pub degenerate: bool,
}

impl AdvantageRecord {
    pub fn sequence(group: usize, trajectory: usize, estimator: EstimatorKind, raw: f64) -> Self {
        Self {
            group,
            trajectory,
            step: None,
            estimator,
            raw,
            normalization: NormalizationKind::None,
            normalized: raw,
            group_std: None,
            batch_mean: None,
            batch_std: None,
            degenerate: false,
        }
    }
}

/// Batch statistics recorded by [`normalize_batch`]. Population standard
/// deviation, matching the estimator formulas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchNormStats {
    pub mean: f64,
    pub std: f64,
    pub degenerate: bool,
}

/// Spreads at or below this are treated as zero for the degenerate-batch
/// and degenerate-group pass-through (an all-equal batch can carry rounding
/// dust of order 1e-16).
pub const DEGENERATE_STD_TOL: f64 = 1e-12;

/// `(raw - mean_B) / std_B` over the whole batch. A zero-spread batch passes
/// through unchanged with the degenerate flag set.
pub fn normalize_batch(records: &mut [AdvantageRecord]) -> BatchNormStats {
    let n = records.len();
    if n == 0 {
        return BatchNormStats {
            mean: 0.0,
            std: 0.0,
            degenerate: true,
        };
    }
    let mean = records.iter().map(|r| r.raw).sum::<f64>() / n as f64;
    let var = records
        .iter()
        .map(|r| (r.raw - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    let std = var.sqrt();
    let degenerate = std <= DEGENERATE_STD_TOL * (1.0 + mean.abs()) || n < 2;
    for r in records.iter_mut() {
        r.normalization = NormalizationKind::Batch;
        r.batch_mean = Some(mean);
        r.batch_std = Some(std);
        r.degenerate = degenerate;
        r.normalized = if degenerate { r.raw } else { (r.raw - mean) / std };
    }
    BatchNormStats {
        mean,
        std,
        degenerate,
    }
}

/// Divides each record by its own group's reward standard deviation
/// (`delta(s)`), the state-dependent scaling used by sequence-level
/// group-normalized objectives. Degenerate groups pass through flagged.
pub fn normalize_group(records: &mut [AdvantageRecord], group_stds: &[f64]) {
    for r in records.iter_mut() {
        let std = group_stds[r.group];
        r.normalization = NormalizationKind::Group;
        r.group_std = Some(std);
        if std <= DEGENERATE_STD_TOL {
            r.degenerate = true;
            r.normalized = r.raw;
        } else {
            r.normalized = r.raw / std;
        }
    }
}
