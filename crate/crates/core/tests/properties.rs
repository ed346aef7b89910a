//! Property-based invariants over randomly generated environments and
//! policies.

use proptest::prelude::*;
use turnlab_core::advantage::{
    exact_mdp_values, exact_tree_values, gae_estimate, grae_estimate, normalize_batch,
    AdvantageRecord, EstimatorKind, MdpValues,
};
use turnlab_core::envs::{
    enumerate_paths, generate_finite_mdp, generate_tree_bandit, MdpShape, TreeBanditShape,
};
use turnlab_core::policy::{sequence_ratio, HistoryKey, TabularSoftmaxPolicy};
use turnlab_core::rollout::{build_turn_pools, enumerate_batch, MdpTrajectory};

fn arb_tree_shape() -> impl Strategy<Value = (TreeBanditShape, u64, u64)> {
    (
        1usize..=3,
        prop::collection::vec(1usize..=4, 1..=3),
        any::<u64>(),
        any::<u64>(),
        prop::option::of(Just(1usize)),
    )
        .prop_map(|(states, actions, seed, pseed, min_turns)| {
            (
                TreeBanditShape {
                    num_initial_states: states,
                    actions_per_turn: actions,
                    reward_range: (-1.0, 1.0),
                    min_turns,
                },
                seed,
                pseed,
            )
        })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn generated_specs_revalidate_and_enumerate_fully((shape, seed, _p) in arb_tree_shape()) {
        let spec = generate_tree_bandit(seed, &shape).unwrap();
        spec.validate().unwrap();
        for s0 in 0..spec.num_initial_states {
            let paths = enumerate_paths(&spec, s0);
            let expected: usize = (1..=spec.horizon)
                .map(|t| spec.effective_actions(s0, t))
                .product();
            prop_assert_eq!(paths.len(), expected);
            // lexicographic and exhaustive: strictly increasing path indices
            for w in paths.windows(2) {
                prop_assert!(w[0].0 < w[1].0);
            }
        }
    }

    #[test]
    fn policy_probabilities_are_normalized((shape, seed, pseed) in arb_tree_shape()) {
        let spec = generate_tree_bandit(seed, &shape).unwrap();
        let mut policy = TabularSoftmaxPolicy::uniform_for_bandit(&spec);
        policy.perturb_gaussian(pseed, 1.5);
        for key in policy.keys().to_vec() {
            let probs = policy.action_probs(&key).unwrap();
            let sum: f64 = probs.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            prop_assert!(probs.iter().all(|&p| p > 0.0));

            // expected score is the zero vector
            let n = probs.len();
            let mut acc = vec![0.0; n];
            for (a, &p) in probs.iter().enumerate() {
                for (i, g) in policy.grad_log_prob(&key, a).unwrap().iter().enumerate() {
                    acc[i] += p * g;
                }
            }
            prop_assert!(acc.iter().all(|v| v.abs() <= 1e-10));
        }
    }

    #[test]
    fn ratio_chain_rule_holds((shape, seed, pseed) in arb_tree_shape()) {
        let spec = generate_tree_bandit(seed, &shape).unwrap();
        let mut old = TabularSoftmaxPolicy::uniform_for_bandit(&spec);
        old.perturb_gaussian(pseed, 0.8);
        let snap = old.snapshot();
        let mut new = old.clone();
        new.perturb_gaussian(pseed ^ 0xabcd, 0.5);
        for s0 in 0..spec.num_initial_states {
            for (path, _) in enumerate_paths(&spec, s0) {
                let mut prod = 1.0;
                for t in 1..=spec.episode_turns[s0] {
                    let key = HistoryKey::new(s0, path[..t - 1].to_vec());
                    prod *= sequence_ratio(&new, &snap, &key, path[t - 1]).unwrap();
                }
                let direct = new.path_prob(&spec, s0, &path).unwrap()
                    / snap.path_prob(&spec, s0, &path).unwrap();
                prop_assert!((prod - direct).abs() <= 1e-12 * direct.max(1.0));
            }
        }
    }

    #[test]
    fn exact_groups_are_probability_weighted((shape, seed, pseed) in arb_tree_shape()) {
        let spec = generate_tree_bandit(seed, &shape).unwrap();
        let mut policy = TabularSoftmaxPolicy::uniform_for_bandit(&spec);
        policy.perturb_gaussian(pseed, 1.0);
        let values = exact_tree_values(&spec, &policy).unwrap();
        let groups = enumerate_batch(&spec, &policy).unwrap();
        for group in &groups {
            let wsum: f64 = group.trajectories.iter().map(|t| t.weight).sum();
            prop_assert!((wsum - 1.0).abs() <= 1e-12);
            prop_assert!(
                (group.mean_reward - values.initial_value(group.s0)).abs() <= 1e-10
            );
            // group-relative estimates are exactly centered rewards
            let adv = grae_estimate(group, false).unwrap();
            for (traj, a) in group.trajectories.iter().zip(adv) {
                prop_assert!((a - (traj.reward - group.mean_reward)).abs() == 0.0);
            }
        }

        // turn pools partition (group, trajectory, turn) triples
        let pools = build_turn_pools(&spec, &groups);
        let total: usize = groups.iter().map(|g| g.trajectories.len()).sum();
        for pool in &pools {
            prop_assert_eq!(pool.samples.len(), total);
            for s in &pool.samples {
                prop_assert_eq!(s.key.prefix.len(), pool.turn - 1);
                let traj = &groups[s.group].trajectories[s.trajectory];
                prop_assert_eq!(&s.key.prefix[..], &traj.actions[..pool.turn - 1]);
                let placeholder = pool.turn > spec.episode_turns[traj.s0];
                prop_assert_eq!(s.is_placeholder, placeholder);
            }
        }
    }

    #[test]
    fn gae_recursion_identities(
        seed in any::<u64>(),
        pseed in any::<u64>(),
        gamma in 0.0f64..=1.0,
        lambda in 0.0f64..=1.0,
    ) {
        let mdp = generate_finite_mdp(
            seed,
            &MdpShape {
                num_states: 3,
                num_actions: 2,
                horizon: 4,
                discount: 1.0,
                reward_range: (-1.0, 1.0),
                deterministic_transitions: false,
                layered_terminal_rewards: false,
            },
        )
        .unwrap();
        let mut policy = TabularSoftmaxPolicy::uniform_for_mdp(&mdp);
        policy.perturb_gaussian(pseed, 0.7);
        let values = exact_mdp_values(&mdp, &policy, gamma).unwrap();
        let traj = MdpTrajectory {
            states: vec![0, 1, 2, 0, 1],
            actions: vec![0, 1, 0, 1],
            rewards: vec![
                mdp.reward[0][0],
                mdp.reward[1][1],
                mdp.reward[2][0],
                mdp.reward[0][1],
            ],
        };
        let adv = gae_estimate(&traj, &values, gamma, lambda).unwrap();
        // backward recursion: adv_t = delta_t + gamma*lambda*adv_{t+1}
        for t in 0..4 {
            let delta = traj.rewards[t] + gamma * values.v[t + 1][traj.states[t + 1]]
                - values.v[t][traj.states[t]];
            let cont = if t + 1 < 4 { adv[t + 1] } else { 0.0 };
            prop_assert!((adv[t] - (delta + gamma * lambda * cont)).abs() <= 1e-12);
        }

        // lambda = 1, zero critic: plain discounted return-to-go
        let zero = MdpValues {
            discount: gamma,
            v: vec![vec![0.0; 3]; 5],
            q: vec![vec![vec![0.0; 2]; 3]; 4],
        };
        let telescoped = gae_estimate(&traj, &zero, gamma, 1.0).unwrap();
        for t in 0..4 {
            let mut g = 0.0;
            let mut w = 1.0;
            for k in t..4 {
                g += w * traj.rewards[k];
                w *= gamma;
            }
            prop_assert!((telescoped[t] - g).abs() <= 1e-12);
        }
    }

    #[test]
    fn batch_normalization_standardizes_any_spread_batch(
        raws in prop::collection::vec(-10.0f64..10.0, 2..40),
    ) {
        let mut records: Vec<AdvantageRecord> = raws
            .iter()
            .enumerate()
            .map(|(i, &r)| AdvantageRecord::sequence(0, i, EstimatorKind::Grae, r))
            .collect();
        let stats = normalize_batch(&mut records);
        if !stats.degenerate {
            let n = records.len() as f64;
            let mean: f64 = records.iter().map(|r| r.normalized).sum::<f64>() / n;
            let var: f64 = records
                .iter()
                .map(|r| (r.normalized - mean).powi(2))
                .sum::<f64>()
                / n;
            prop_assert!(mean.abs() <= 1e-10);
            prop_assert!((var - 1.0).abs() <= 1e-10);
        } else {
            for (rec, raw) in records.iter().zip(&raws) {
                prop_assert_eq!(rec.normalized, *raw);
            }
        }
    }
}
