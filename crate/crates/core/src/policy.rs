//! Tabular softmax policies over conditioning contexts, with exact
//! probabilities, analytic score-function gradients, and lossless snapshots.
//!
//! A [`HistoryKey`] is the conditioning context of one decision. For tree
//! bandits that is `(s0, a^{1:t-1})`; for finite MDPs the policy is
//! stationary and the key is just the state with an empty prefix. Every key
//! owns its own logit block, so the single shared table is already
//! partitioned by turn — a separate per-turn table would be the same
//! parameterization.

use crate::envs::{FiniteMdpSpec, TreeBanditSpec};
use crate::error::{CoreError, Result};
use crate::rng;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Conditioning context of one decision: initial state plus the action
/// prefix `a^{1:t-1}`. The turn is `prefix.len() + 1`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HistoryKey {
    pub s0: usize,
    pub prefix: Vec<usize>,
}

impl HistoryKey {
    pub fn new(s0: usize, prefix: Vec<usize>) -> Self {
        Self { s0, prefix }
    }

    /// 1-based turn this key conditions.
    pub fn turn(&self) -> usize {
        self.prefix.len() + 1
    }
}

impl std::fmt::Display for HistoryKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "s{}:", self.s0)?;
        for (i, a) in self.prefix.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{a}")?;
        }
        Ok(())
    }
}

/// Logit table indexed by [`HistoryKey`]. Keys are fixed at construction
/// (dense over all reachable contexts) and iterate in sorted order; that
/// order defines the flat gradient layout and is part of the snapshot
/// format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "PolicyData", into = "PolicyData")]
pub struct TabularSoftmaxPolicy {
    keys: Vec<HistoryKey>,
    /// Block id per key, in `keys` order.
    index: BTreeMap<HistoryKey, usize>,
    /// Flat-parameter offset of each block.
    offsets: Vec<usize>,
    logits: Vec<Vec<f64>>,
    param_count: usize,
}

/// Serialized form: one entry per key in stable key order. JSON numbers
/// round-trip f64 exactly, so snapshots restore bit-for-bit.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct PolicyData {
    entries: Vec<PolicyEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PolicyEntry {
    s0: usize,
    prefix: Vec<usize>,
    logits: Vec<f64>,
}

impl From<TabularSoftmaxPolicy> for PolicyData {
    fn from(policy: TabularSoftmaxPolicy) -> Self {
        let entries = policy
            .keys
            .iter()
            .zip(&policy.logits)
            .map(|(key, logits)| PolicyEntry {
                s0: key.s0,
                prefix: key.prefix.clone(),
                logits: logits.clone(),
            })
            .collect();
        PolicyData { entries }
    }
}

impl From<PolicyData> for TabularSoftmaxPolicy {
    fn from(data: PolicyData) -> Self {
        let keyed = data
            .entries
            .iter()
            .map(|e| (HistoryKey::new(e.s0, e.prefix.clone()), e.logits.len()))
            .collect();
        let mut policy = TabularSoftmaxPolicy::from_keys(keyed);
        for e in &data.entries {
            policy
                .set_logits(&HistoryKey::new(e.s0, e.prefix.clone()), &e.logits)
                .expect("keys were just constructed");
        }
        policy
    }
}

/// Immutable copy of a policy's parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySnapshot(TabularSoftmaxPolicy);

impl TabularSoftmaxPolicy {
    fn from_keys(keyed: Vec<(HistoryKey, usize)>) -> Self {
        let mut sorted = keyed;
        sorted.sort_by(|a, b| a.0.cmp(&b.0));
        let mut keys = Vec::with_capacity(sorted.len());
        let mut index = BTreeMap::new();
        let mut offsets = Vec::with_capacity(sorted.len());
        let mut logits = Vec::with_capacity(sorted.len());
        let mut offset = 0;
        for (i, (key, n)) in sorted.into_iter().enumerate() {
            index.insert(key.clone(), i);
            keys.push(key);
            offsets.push(offset);
            offset += n;
            logits.push(vec![0.0; n]);
        }
        Self {
            keys,
            index,
            offsets,
            logits,
            param_count: offset,
        }
    }

    /// Uniform policy over every reachable context of a tree bandit. Keys
    /// beyond the padded horizon are never materialized.
    pub fn uniform_for_bandit(spec: &TreeBanditSpec) -> Self {
        let mut keyed = Vec::new();
        for s0 in 0..spec.num_initial_states {
            let mut frontier: Vec<Vec<usize>> = vec![vec![]];
            for turn in 1..=spec.episode_turns[s0] {
                let n = spec.effective_actions(s0, turn);
                let mut next = Vec::new();
                for prefix in frontier {
                    keyed.push((HistoryKey::new(s0, prefix.clone()), n));
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
        }
        Self::from_keys(keyed)
    }

    /// Uniform stationary policy over MDP states: key `(s, [])` per state.
    pub fn uniform_for_mdp(spec: &FiniteMdpSpec) -> Self {
        let keyed = (0..spec.num_states)
            .map(|s| (HistoryKey::new(s, vec![]), spec.num_actions))
            .collect();
        Self::from_keys(keyed)
    }

    /// Adds seeded Gaussian noise (std `sigma`) to every logit.
    pub fn perturb_gaussian(&mut self, seed: u64, sigma: f64) {
        let mut r = rng::stream(seed, "policy-init", 0);
        for block in &mut self.logits {
            for l in block.iter_mut() {
                // Box-Muller
                let u1: f64 = r.gen_range(f64::MIN_POSITIVE..1.0);
                let u2: f64 = r.gen_range(0.0..1.0);
                *l += sigma * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            }
        }
    }

    pub fn keys(&self) -> &[HistoryKey] {
        &self.keys
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    fn block(&self, key: &HistoryKey) -> Result<usize> {
        self.index
            .get(key)
            .copied()
            .ok_or_else(|| CoreError::UnknownKey(key.to_string()))
    }

    pub fn action_count(&self, key: &HistoryKey) -> Result<usize> {
        Ok(self.logits[self.block(key)?].len())
    }

    pub fn logits_at(&self, key: &HistoryKey) -> Result<&[f64]> {
        Ok(&self.logits[self.block(key)?])
    }

    pub fn set_logits(&mut self, key: &HistoryKey, values: &[f64]) -> Result<()> {
        let b = self.block(key)?;
        if values.len() != self.logits[b].len() {
            return Err(CoreError::Misaligned(format!(
                "logit block for {key} has {} entries",
                self.logits[b].len()
            )));
        }
        self.logits[b].copy_from_slice(values);
        Ok(())
    }

    /// Softmax of the stored logits: strictly positive, sums to 1.
    pub fn action_probs(&self, key: &HistoryKey) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits[self.block(key)?]))
    }

    pub fn prob(&self, key: &HistoryKey, action: usize) -> Result<f64> {
        let probs = self.action_probs(key)?;
        probs
            .get(action)
            .copied()
            .ok_or_else(|| CoreError::Misaligned(format!("action {action} out of range at {key}")))
    }

    pub fn log_prob(&self, key: &HistoryKey, action: usize) -> Result<f64> {
        Ok(self.prob(key, action)?.ln())
    }

    /// Analytic score at `key`: `one_hot(action) - action_probs(key)`,
    /// returned block-locally (zero everywhere else).
    pub fn grad_log_prob(&self, key: &HistoryKey, action: usize) -> Result<Vec<f64>> {
        let mut g = self.action_probs(key)?;
        if action >= g.len() {
            return Err(CoreError::Misaligned(format!(
                "action {action} out of range at {key}"
            )));
        }
        for v in g.iter_mut() {
            *v = -*v;
        }
        g[action] += 1.0;
        Ok(g)
    }

    /// Adds `scale * grad_log_prob(key, action)` into a flat gradient.
    pub fn accumulate_score(
        &self,
        key: &HistoryKey,
        action: usize,
        scale: f64,
        grad: &mut [f64],
    ) -> Result<()> {
        let b = self.block(key)?;
        let probs = softmax(&self.logits[b]);
        if action >= probs.len() {
            return Err(CoreError::Misaligned(format!(
                "action {action} out of range at {key}"
            )));
        }
        let off = self.offsets[b];
        for (i, p) in probs.iter().enumerate() {
            grad[off + i] -= scale * p;
        }
        grad[off + action] += scale;
        Ok(())
    }

    /// Adds `scale * grad_theta KL(pi_theta(.|key) || old(.|key))` into a
    /// flat gradient.
    pub fn accumulate_kl_grad(
        &self,
        old: &PolicySnapshot,
        key: &HistoryKey,
        scale: f64,
        grad: &mut [f64],
    ) -> Result<()> {
        let b = self.block(key)?;
        let probs = softmax(&self.logits[b]);
        let old_probs = old.action_probs(key)?;
        let mut kl = 0.0;
        for (p, q) in probs.iter().zip(&old_probs) {
            kl += p * (p / q).ln();
        }
        let off = self.offsets[b];
        for (i, p) in probs.iter().enumerate() {
            grad[off + i] += scale * p * ((p / old_probs[i]).ln() - kl);
        }
        Ok(())
    }

    pub fn kl_to(&self, old: &PolicySnapshot, key: &HistoryKey) -> Result<f64> {
        let probs = self.action_probs(key)?;
        let old_probs = old.action_probs(key)?;
        Ok(probs
            .iter()
            .zip(&old_probs)
            .map(|(p, q)| p * (p / q).ln())
            .sum())
    }

    pub fn zero_grad(&self) -> Vec<f64> {
        vec![0.0; self.param_count]
    }

    /// Flat-gradient span `(offset, len)` of the key's logit block.
    pub fn block_span(&self, key: &HistoryKey) -> Result<(usize, usize)> {
        let b = self.block(key)?;
        Ok((self.offsets[b], self.logits[b].len()))
    }

    /// Gradient-ascent step: `logits += step * grad`.
    pub fn apply_step(&mut self, grad: &[f64], step: f64) {
        debug_assert_eq!(grad.len(), self.param_count);
        for (b, block) in self.logits.iter_mut().enumerate() {
            let off = self.offsets[b];
            for (i, l) in block.iter_mut().enumerate() {
                *l += step * grad[off + i];
            }
        }
    }

    pub fn snapshot(&self) -> PolicySnapshot {
        PolicySnapshot(self.clone())
    }

    pub fn restore(snapshot: &PolicySnapshot) -> Self {
        snapshot.0.clone()
    }

    /// Log-probability of a full padded path; padded turns contribute 0.
    pub fn path_log_prob(&self, spec: &TreeBanditSpec, s0: usize, actions: &[usize]) -> Result<f64> {
        let mut lp = 0.0;
        for t in 1..=spec.episode_turns[s0] {
            let key = HistoryKey::new(s0, actions[..t - 1].to_vec());
            lp += self.log_prob(&key, actions[t - 1])?;
        }
        Ok(lp)
    }

    /// Probability of a full padded path (product of per-turn conditionals).
    pub fn path_prob(&self, spec: &TreeBanditSpec, s0: usize, actions: &[usize]) -> Result<f64> {
        let mut p = 1.0;
        for t in 1..=spec.episode_turns[s0] {
            let key = HistoryKey::new(s0, actions[..t - 1].to_vec());
            p *= self.prob(&key, actions[t - 1])?;
        }
        Ok(p)
    }
}

impl PolicySnapshot {
    pub fn action_probs(&self, key: &HistoryKey) -> Result<Vec<f64>> {
        self.0.action_probs(key)
    }

    pub fn prob(&self, key: &HistoryKey, action: usize) -> Result<f64> {
        self.0.prob(key, action)
    }

    pub fn log_prob(&self, key: &HistoryKey, action: usize) -> Result<f64> {
        self.0.log_prob(key, action)
    }

    pub fn path_prob(&self, spec: &TreeBanditSpec, s0: usize, actions: &[usize]) -> Result<f64> {
        self.0.path_prob(spec, s0, actions)
    }

    pub fn keys(&self) -> &[HistoryKey] {
        self.0.keys()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.0)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(PolicySnapshot(serde_json::from_str(s)?))
    }
}

/// Per-turn sequence-level importance ratio
/// `pi_new(a | key) / pi_old(a | key)`; strictly positive.
pub fn sequence_ratio(
    policy_new: &TabularSoftmaxPolicy,
    policy_old: &PolicySnapshot,
    key: &HistoryKey,
    action: usize,
) -> Result<f64> {
    Ok(policy_new.prob(key, action)? / policy_old.prob(key, action)?)
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}
