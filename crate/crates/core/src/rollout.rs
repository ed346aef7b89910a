//! Trajectory collection: Monte Carlo sampling and exact enumeration, group
//! bookkeeping, and the per-turn sample pools the sequential updates consume.

use crate::envs::{enumerate_paths, FiniteMdpSpec, TreeBanditSpec, EXACT_PATH_CAP};
use crate::error::{CoreError, Result};
use crate::policy::{HistoryKey, TabularSoftmaxPolicy};
use crate::rng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// One padded rollout of a tree bandit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub s0: usize,
    /// Full padded action path `a^{1:T}`.
    pub actions: Vec<usize>,
    /// Per-turn `log pi_behavior(a^t | .)`; 0 at padded turns.
    pub behavior_log_probs: Vec<f64>,
    /// Team reward `r(s0, a^{1:T})`.
    pub reward: f64,
    /// `1/G` in sampled mode; exact path probability in exact mode.
    pub weight: f64,
}

/// `G` rollouts sharing an initial state, with their (weight-adjusted) mean
/// reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub s0: usize,
    pub trajectories: Vec<Trajectory>,
    pub mean_reward: f64,
}

impl Group {
    fn from_trajectories(s0: usize, trajectories: Vec<Trajectory>) -> Self {
        let wsum: f64 = trajectories.iter().map(|t| t.weight).sum();
        let mean_reward = trajectories
            .iter()
            .map(|t| t.weight * t.reward)
            .sum::<f64>()
            / wsum;
        Self {
            s0,
            trajectories,
            mean_reward,
        }
    }

    /// Population standard deviation of rewards under the trajectory
    /// weights; the group-level scaling factor `delta(s)`.
    pub fn reward_std(&self) -> f64 {
        let wsum: f64 = self.trajectories.iter().map(|t| t.weight).sum();
        let var = self
            .trajectories
            .iter()
            .map(|t| t.weight * (t.reward - self.mean_reward).powi(2))
            .sum::<f64>()
            / wsum;
        var.max(0.0).sqrt()
    }
}

/// One entry of a turn pool. Placeholder samples keep pool alignment for
/// turns past a short episode's end and are masked out of losses and
/// gradients downstream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnSample {
    pub group: usize,
    pub trajectory: usize,
    pub key: HistoryKey,
    pub action: usize,
    pub is_placeholder: bool,
}

/// The turn-`t` sample pool: one entry per trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnPool {
    /// 1-based turn.
    pub turn: usize,
    pub samples: Vec<TurnSample>,
}

fn sample_categorical(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.gen_range(0.0..1.0);
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Samples `B` groups of `G` trajectories under `policy`. Initial states are
/// drawn from the spec's initial distribution; each group's RNG stream is
/// derived from `(seed, group index)`, so groups can be collected in any
/// order without changing the result.
pub fn collect_batch(
    spec: &TreeBanditSpec,
    policy: &TabularSoftmaxPolicy,
    batch_size: usize,
    group_size: usize,
    seed: u64,
) -> Result<Vec<Group>> {
    if batch_size == 0 || group_size == 0 {
        return Err(CoreError::InvalidParameter("B and G must be >= 1".into()));
    }
    let mut init_rng = rng::stream(seed, "batch-initial", 0);
    let initial_states: Vec<usize> = (0..batch_size)
        .map(|_| sample_categorical(&mut init_rng, &spec.initial_distribution))
        .collect();

    let mut groups = Vec::with_capacity(batch_size);
    for (g, &s0) in initial_states.iter().enumerate() {
        let mut group_rng = rng::stream(seed, "group", g as u64);
        let mut trajectories = Vec::with_capacity(group_size);
        for _ in 0..group_size {
            trajectories.push(sample_trajectory(spec, policy, s0, group_size, &mut group_rng)?);
        }
        groups.push(Group::from_trajectories(s0, trajectories));
    }
    Ok(groups)
}

fn sample_trajectory(
    spec: &TreeBanditSpec,
    policy: &TabularSoftmaxPolicy,
    s0: usize,
    group_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory> {
    let t_max = spec.horizon;
    let mut actions = vec![0usize; t_max];
    let mut behavior_log_probs = vec![0.0; t_max];
    for t in 1..=spec.episode_turns[s0] {
        let key = HistoryKey::new(s0, actions[..t - 1].to_vec());
        let probs = policy.action_probs(&key)?;
        let a = sample_categorical(rng, &probs);
        actions[t - 1] = a;
        behavior_log_probs[t - 1] = probs[a].ln();
    }
    let reward = spec.reward(s0, &actions);
    Ok(Trajectory {
        s0,
        actions,
        behavior_log_probs,
        reward,
        weight: 1.0 / group_size as f64,
    })
}

/// Exact mode: one group per initial state holding every path, weighted by
/// its probability under `policy`. The group mean is then the exact state
/// value `V_pi(s0)`.
pub fn enumerate_batch(
    spec: &TreeBanditSpec,
    policy: &TabularSoftmaxPolicy,
) -> Result<Vec<Group>> {
    let total = spec.total_paths();
    if total > EXACT_PATH_CAP {
        return Err(CoreError::CapExceeded {
            actual: total,
            cap: EXACT_PATH_CAP,
        });
    }
    let mut groups = Vec::with_capacity(spec.num_initial_states);
    for s0 in 0..spec.num_initial_states {
        let mut trajectories = Vec::with_capacity(spec.path_count(s0));
        for (actions, reward) in enumerate_paths(spec, s0) {
            let mut behavior_log_probs = vec![0.0; spec.horizon];
            let mut weight = 1.0;
            for t in 1..=spec.episode_turns[s0] {
                let key = HistoryKey::new(s0, actions[..t - 1].to_vec());
                let p = policy.prob(&key, actions[t - 1])?;
                behavior_log_probs[t - 1] = p.ln();
                weight *= p;
            }
            trajectories.push(Trajectory {
                s0,
                actions,
                behavior_log_probs,
                reward,
                weight,
            });
        }
        groups.push(Group::from_trajectories(s0, trajectories));
    }
    Ok(groups)
}

/// Reorganizes a batch into `T` turn pools. Every trajectory contributes
/// exactly one sample to each pool; turns past an episode's end contribute
/// placeholder samples.
pub fn build_turn_pools(spec: &TreeBanditSpec, groups: &[Group]) -> Vec<TurnPool> {
    let mut pools: Vec<TurnPool> = (1..=spec.horizon)
        .map(|turn| TurnPool {
            turn,
            samples: Vec::new(),
        })
        .collect();
    for (g, group) in groups.iter().enumerate() {
        for (i, traj) in group.trajectories.iter().enumerate() {
            for t in 1..=spec.horizon {
                pools[t - 1].samples.push(TurnSample {
                    group: g,
                    trajectory: i,
                    key: HistoryKey::new(traj.s0, traj.actions[..t - 1].to_vec()),
                    action: traj.actions[t - 1],
                    is_placeholder: t > spec.episode_turns[traj.s0],
                });
            }
        }
    }
    pools
}

// ---------------------------------------------------------------------------
// MDP rollouts
// ---------------------------------------------------------------------------

/// One sampled MDP episode: `H+1` states, `H` actions and rewards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpTrajectory {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
}

impl MdpTrajectory {
    pub fn discounted_return(&self, discount: f64) -> f64 {
        let mut g = 0.0;
        let mut w = 1.0;
        for &r in &self.rewards {
            g += w * r;
            w *= discount;
        }
        g
    }

    pub fn total_return(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// A group of MDP episodes from one initial state with the mean total
/// (undiscounted) return.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpGroup {
    pub s0: usize,
    pub trajectories: Vec<MdpTrajectory>,
    pub mean_return: f64,
}

/// Samples `B` groups of `G` episodes; stationary policy keyed `(s, [])`.
pub fn collect_mdp_batch(
    mdp: &FiniteMdpSpec,
    policy: &TabularSoftmaxPolicy,
    batch_size: usize,
    group_size: usize,
    seed: u64,
) -> Result<Vec<MdpGroup>> {
    if batch_size == 0 || group_size == 0 {
        return Err(CoreError::InvalidParameter("B and G must be >= 1".into()));
    }
    let mut init_rng = rng::stream(seed, "mdp-batch-initial", 0);
    let initial_states: Vec<usize> = (0..batch_size)
        .map(|_| sample_categorical(&mut init_rng, &mdp.initial_distribution))
        .collect();
    let mut groups = Vec::with_capacity(batch_size);
    for (g, &s0) in initial_states.iter().enumerate() {
        let mut group_rng = rng::stream(seed, "mdp-group", g as u64);
        let mut trajectories = Vec::with_capacity(group_size);
        for _ in 0..group_size {
            let mut states = vec![s0];
            let mut actions = Vec::with_capacity(mdp.horizon);
            let mut rewards = Vec::with_capacity(mdp.horizon);
            let mut s = s0;
            for _ in 0..mdp.horizon {
                let key = HistoryKey::new(s, vec![]);
                let probs = policy.action_probs(&key)?;
                let a = sample_categorical(&mut group_rng, &probs);
                actions.push(a);
                rewards.push(mdp.reward[s][a]);
                s = sample_categorical(&mut group_rng, &mdp.transition[s][a]);
                states.push(s);
            }
            trajectories.push(MdpTrajectory {
                states,
                actions,
                rewards,
            });
        }
        let mean_return = trajectories
            .iter()
            .map(MdpTrajectory::total_return)
            .sum::<f64>()
            / group_size as f64;
        groups.push(MdpGroup {
            s0,
            trajectories,
            mean_return,
        });
    }
    Ok(groups)
}

/// Exhaustively enumerates positive-probability trajectories from each
/// initial state, with their exact probabilities (initial weight included).
pub fn enumerate_mdp_trajectories(
    mdp: &FiniteMdpSpec,
    policy: &TabularSoftmaxPolicy,
) -> Result<Vec<(MdpTrajectory, f64)>> {
    let mut out = Vec::new();
    for s0 in 0..mdp.num_states {
        let d = mdp.initial_distribution[s0];
        if d == 0.0 {
            continue;
        }
        let mut stack = vec![(
            MdpTrajectory {
                states: vec![s0],
                actions: vec![],
                rewards: vec![],
            },
            d,
        )];
        while let Some((traj, prob)) = stack.pop() {
            if traj.actions.len() == mdp.horizon {
                out.push((traj, prob));
                if out.len() as u128 > EXACT_PATH_CAP {
                    return Err(CoreError::CapExceeded {
                        actual: out.len() as u128,
                        cap: EXACT_PATH_CAP,
                    });
                }
                continue;
            }
            let s = *traj.states.last().unwrap();
            let key = HistoryKey::new(s, vec![]);
            let probs = policy.action_probs(&key)?;
            // push in reverse so trajectories pop in lexicographic order
            for a in (0..mdp.num_actions).rev() {
                for s_next in (0..mdp.num_states).rev() {
                    let p = probs[a] * mdp.transition[s][a][s_next];
                    if p == 0.0 {
                        continue;
                    }
                    let mut t = traj.clone();
                    t.actions.push(a);
                    t.rewards.push(mdp.reward[s][a]);
                    t.states.push(s_next);
                    stack.push((t, prob * p));
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{generate_tree_bandit, TreeBanditShape};

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

    #[test]
    fn group_mean_is_arithmetic_mean_in_sampled_mode() {
        let trajectories: Vec<Trajectory> = [1.0, 0.0, 0.0, 1.0]
            .iter()
            .map(|&r| Trajectory {
                s0: 0,
                actions: vec![0],
                behavior_log_probs: vec![0.0],
                reward: r,
                weight: 0.25,
            })
            .collect();
        let group = Group::from_trajectories(0, trajectories);
        assert_eq!(group.mean_reward, 0.5);
    }

    #[test]
    fn deterministic_policy_repeats_one_trajectory() {
        let spec = bandit(1);
        let mut policy = TabularSoftmaxPolicy::uniform_for_bandit(&spec);
        for key in policy.keys().to_vec() {
            let n = policy.action_count(&key).unwrap();
            let mut logits = vec![-60.0; n];
            logits[0] = 60.0;
            policy.set_logits(&key, &logits).unwrap();
        }
        let groups = collect_batch(&spec, &policy, 2, 4, 9).unwrap();
        for group in groups {
            let first = &group.trajectories[0];
            for t in &group.trajectories {
                assert_eq!(t.actions, first.actions);
            }
        }
    }

    #[test]
    fn collection_is_deterministic_in_the_seed() {
        let spec = bandit(2);
        let mut policy = TabularSoftmaxPolicy::uniform_for_bandit(&spec);
        policy.perturb_gaussian(4, 0.5);
        let a = collect_batch(&spec, &policy, 3, 5, 42).unwrap();
        let b = collect_batch(&spec, &policy, 3, 5, 42).unwrap();
        assert_eq!(a, b);
        let c = collect_batch(&spec, &policy, 3, 5, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn exact_weights_sum_to_one_per_group() {
        let spec = bandit(3);
        let mut policy = TabularSoftmaxPolicy::uniform_for_bandit(&spec);
        policy.perturb_gaussian(30, 1.0);
        for group in enumerate_batch(&spec, &policy).unwrap() {
            let sum: f64 = group.trajectories.iter().map(|t| t.weight).sum();
            assert!((sum - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn exact_mean_of_uniform_single_turn() {
        let spec = TreeBanditSpec {
            num_initial_states: 1,
            horizon: 1,
            actions_per_turn: vec![2],
            episode_turns: vec![1],
            initial_distribution: vec![1.0],
            reward_bound: 1.0,
            rewards: vec![vec![0.0, 1.0]],
        };
        let policy = TabularSoftmaxPolicy::uniform_for_bandit(&spec);
        let groups = enumerate_batch(&spec, &policy).unwrap();
        assert!((groups[0].mean_reward - 0.5).abs() <= 1e-15);
    }

    #[test]
    fn exact_mean_matches_monte_carlo_within_three_standard_errors() {
        let spec = bandit(5);
        let mut policy = TabularSoftmaxPolicy::uniform_for_bandit(&spec);
        policy.perturb_gaussian(50, 0.8);
        let exact = enumerate_batch(&spec, &policy).unwrap();

        // Monte Carlo oracle: G = 1e5 draws from a fixed s0.
        let g = 100_000usize;
        let mut rng = rng::stream(123, "mc-oracle", 0);
        let s0 = 0usize;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..g {
            let traj = sample_trajectory(&spec, &policy, s0, g, &mut rng).unwrap();
            sum += traj.reward;
            sumsq += traj.reward * traj.reward;
        }
        let mean = sum / g as f64;
        let var = (sumsq / g as f64 - mean * mean).max(0.0);
        let stderr = (var / g as f64).sqrt();
        let exact_mean = exact.iter().find(|gr| gr.s0 == s0).unwrap().mean_reward;
        assert!(
            (exact_mean - mean).abs() <= 3.0 * stderr + 1e-12,
            "exact {exact_mean} vs MC {mean} (3se = {})",
            3.0 * stderr
        );
    }

    #[test]
    fn pools_contain_one_sample_per_trajectory_per_turn() {
        let spec = generate_tree_bandit(
            7,
            &TreeBanditShape {
                num_initial_states: 2,
                actions_per_turn: vec![2, 2, 2],
                reward_range: (0.0, 1.0),
                min_turns: None,
            },
        )
        .unwrap();
        let policy = TabularSoftmaxPolicy::uniform_for_bandit(&spec);
        let groups = collect_batch(&spec, &policy, 2, 3, 1).unwrap();
        let pools = build_turn_pools(&spec, &groups);
        assert_eq!(pools.len(), 3);
        for pool in &pools {
            assert_eq!(pool.samples.len(), 6);
        }
        // partition check: (group, trajectory, turn) triples are all distinct
        let mut seen = std::collections::BTreeSet::new();
        for pool in &pools {
            for s in &pool.samples {
                assert!(seen.insert((pool.turn, s.group, s.trajectory)));
                assert_eq!(s.key.prefix.len(), pool.turn - 1);
            }
        }
        assert_eq!(seen.len(), 18);
    }

    #[test]
    fn short_episodes_get_placeholder_samples() {
        let mut spec = generate_tree_bandit(
            7,
            &TreeBanditShape {
                num_initial_states: 1,
                actions_per_turn: vec![2, 2, 2],
                reward_range: (0.0, 1.0),
                min_turns: None,
            },
        )
        .unwrap();
        // force a 2-turn episode under T = 3
        spec.episode_turns[0] = 2;
        spec.rewards[0].truncate(4);
        spec.validate().unwrap();

        let policy = TabularSoftmaxPolicy::uniform_for_bandit(&spec);
        let groups = enumerate_batch(&spec, &policy).unwrap();
        let pools = build_turn_pools(&spec, &groups);
        assert!(pools[0].samples.iter().all(|s| !s.is_placeholder));
        assert!(pools[1].samples.iter().all(|s| !s.is_placeholder));
        assert!(pools[2].samples.iter().all(|s| s.is_placeholder));
        // non-placeholder keys match trajectory prefixes
        for pool in &pools[..2] {
            for s in &pool.samples {
                let traj = &groups[s.group].trajectories[s.trajectory];
                assert_eq!(s.key.prefix, traj.actions[..pool.turn - 1].to_vec());
                assert_eq!(s.action, traj.actions[pool.turn - 1]);
            }
        }
    }

    #[test]
    fn mdp_enumeration_probabilities_sum_to_one() {
        let mdp = crate::envs::generate_finite_mdp(
            4,
            &crate::envs::MdpShape {
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
        policy.perturb_gaussian(8, 0.6);
        let trajs = enumerate_mdp_trajectories(&mdp, &policy).unwrap();
        let total: f64 = trajs.iter().map(|(_, p)| p).sum();
        assert!((total - 1.0).abs() <= 1e-12);
    }
}
