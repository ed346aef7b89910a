//! Environment families: multi-turn tree bandits and finite-horizon MDPs.
//!
//! A tree bandit pays a single team reward after `T` sequentially chosen
//! actions; a finite-horizon MDP has per-step rewards, transitions, and a
//! discount. Both are small enough to enumerate exhaustively, which is what
//! every exact-mode expectation in this crate relies on.

use crate::error::{CoreError, Result};
use crate::rng;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Hard cap on the total number of reward-table entries across initial
/// states. Exact mode enumerates everything, so generation fails loudly
/// beyond this.
pub const EXACT_PATH_CAP: u128 = 100_000;

const DIST_TOL: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Tree bandits
// ---------------------------------------------------------------------------

/// A finite multi-turn contextual bandit: `T` actions chosen in sequence from
/// an initial state, one team reward paid for the full joint action path.
///
/// Episodes may be shorter than the shared horizon: initial state `s0` makes
/// real decisions for `episode_turns[s0]` turns, and every later turn has a
/// single distinguished no-op action (index 0). The reward table is total
/// over padded full paths, so padding carries zero marginal reward by
/// construction (there is exactly one padded continuation per short path).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeBanditSpec {
    pub num_initial_states: usize,
    /// Shared maximum number of turns `T`.
    pub horizon: usize,
    /// Real action counts per turn (before per-state padding).
    pub actions_per_turn: Vec<usize>,
    /// Decision turns per initial state, each in `1..=horizon`.
    pub episode_turns: Vec<usize>,
    pub initial_distribution: Vec<f64>,
    /// `R_max`: every table entry satisfies `|r| <= reward_bound`.
    pub reward_bound: f64,
    /// Dense table `[s0][path_index]` in mixed-radix path order (turn 1 most
    /// significant) over the effective action counts.
    pub rewards: Vec<Vec<f64>>,
}

/// Generation ranges for [`generate_tree_bandit`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeBanditShape {
    pub num_initial_states: usize,
    pub actions_per_turn: Vec<usize>,
    pub reward_range: (f64, f64),
    /// When set, each initial state's episode length is drawn uniformly from
    /// `min_turns..=horizon`; otherwise every episode runs the full horizon.
    pub min_turns: Option<usize>,
}

impl TreeBanditSpec {
    /// Number of real actions available at `turn` (1-based) from `s0`; padded
    /// turns expose the single no-op.
    pub fn effective_actions(&self, s0: usize, turn: usize) -> usize {
        if turn <= self.episode_turns[s0] {
            self.actions_per_turn[turn - 1]
        } else {
            1
        }
    }

    /// Number of distinct padded paths from `s0`.
    pub fn path_count(&self, s0: usize) -> usize {
        (1..=self.horizon)
            .map(|t| self.effective_actions(s0, t))
            .product()
    }

    pub fn total_paths(&self) -> u128 {
        (0..self.num_initial_states)
            .map(|s0| self.path_count(s0) as u128)
            .sum()
    }

    /// Mixed-radix index of a full padded path (turn 1 most significant).
    pub fn path_index(&self, s0: usize, actions: &[usize]) -> usize {
        debug_assert_eq!(actions.len(), self.horizon);
        let mut idx = 0;
        for (t, &a) in actions.iter().enumerate() {
            idx = idx * self.effective_actions(s0, t + 1) + a;
        }
        idx
    }

    pub fn reward(&self, s0: usize, actions: &[usize]) -> f64 {
        self.rewards[s0][self.path_index(s0, actions)]
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.horizon;
        if t < 1 {
            return Err(CoreError::InvalidShape("horizon must be >= 1".into()));
        }
        if self.actions_per_turn.len() != t {
            return Err(CoreError::InvalidShape(
                "actions_per_turn length must equal horizon".into(),
            ));
        }
        if self.actions_per_turn.iter().any(|&a| a == 0) {
            return Err(CoreError::InvalidShape("zero action count".into()));
        }
        if self.num_initial_states == 0 || self.episode_turns.len() != self.num_initial_states {
            return Err(CoreError::InvalidShape(
                "episode_turns length must equal num_initial_states".into(),
            ));
        }
        if self
            .episode_turns
            .iter()
            .any(|&l| l < 1 || l > self.horizon)
        {
            return Err(CoreError::InvalidShape(
                "episode_turns entries must lie in 1..=horizon".into(),
            ));
        }
        check_distribution(&self.initial_distribution, self.num_initial_states)?;
        let total = self.total_paths();
        if total > EXACT_PATH_CAP {
            return Err(CoreError::CapExceeded {
                actual: total,
                cap: EXACT_PATH_CAP,
            });
        }
        for s0 in 0..self.num_initial_states {
            if self.rewards[s0].len() != self.path_count(s0) {
                return Err(CoreError::Invariant(format!(
                    "reward table for s0={s0} must be total over padded paths"
                )));
            }
            for &r in &self.rewards[s0] {
                if r.abs() > self.reward_bound + DIST_TOL {
                    return Err(CoreError::Invariant(format!(
                        "reward {r} exceeds bound {}",
                        self.reward_bound
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Deterministic function of `seed`: the same seed yields a bit-identical
/// spec. Rejects degenerate shapes and instances over the exact-mode cap.
pub fn generate_tree_bandit(seed: u64, shape: &TreeBanditShape) -> Result<TreeBanditSpec> {
    let t = shape.actions_per_turn.len();
    if t < 1 {
        return Err(CoreError::InvalidShape("horizon must be >= 1".into()));
    }
    if shape.actions_per_turn.iter().any(|&a| a == 0) {
        return Err(CoreError::InvalidShape("zero action count".into()));
    }
    if shape.num_initial_states == 0 {
        return Err(CoreError::InvalidShape("need at least one initial state".into()));
    }
    let (lo, hi) = shape.reward_range;
    if !(lo <= hi) {
        return Err(CoreError::InvalidShape("empty reward range".into()));
    }
    if let Some(m) = shape.min_turns {
        if m < 1 || m > t {
            return Err(CoreError::InvalidShape(
                "min_turns must lie in 1..=horizon".into(),
            ));
        }
    }

    let mut r = rng::stream(seed, "gen-tree-bandit", 0);
    let episode_turns: Vec<usize> = (0..shape.num_initial_states)
        .map(|_| match shape.min_turns {
            Some(m) => r.gen_range(m..=t),
            None => t,
        })
        .collect();

    let initial_distribution = if shape.num_initial_states == 1 {
        vec![1.0]
    } else {
        let raw: Vec<f64> = (0..shape.num_initial_states)
            .map(|_| r.gen_range(0.1..1.0))
            .collect();
        let sum: f64 = raw.iter().sum();
        raw.iter().map(|x| x / sum).collect()
    };

    let mut spec = TreeBanditSpec {
        num_initial_states: shape.num_initial_states,
        horizon: t,
        actions_per_turn: shape.actions_per_turn.clone(),
        episode_turns,
        initial_distribution,
        reward_bound: 0.0,
        rewards: Vec::new(),
    };

    let total = spec.total_paths();
    if total > EXACT_PATH_CAP {
        return Err(CoreError::CapExceeded {
            actual: total,
            cap: EXACT_PATH_CAP,
        });
    }

    let mut bound: f64 = 0.0;
    for s0 in 0..spec.num_initial_states {
        let n = spec.path_count(s0);
        let row: Vec<f64> = (0..n)
            .map(|_| {
                let v = if lo == hi { lo } else { r.gen_range(lo..hi) };
                bound = bound.max(v.abs());
                v
            })
            .collect();
        spec.rewards.push(row);
    }
    spec.reward_bound = bound;
    spec.validate()?;
    Ok(spec)
}

/// Exhaustive path listing from `s0` in lexicographic order of the padded
/// action vector. Length equals the product of effective action counts.
pub fn enumerate_paths(spec: &TreeBanditSpec, s0: usize) -> Vec<(Vec<usize>, f64)> {
    assert!(s0 < spec.num_initial_states, "invalid initial state");
    let t = spec.horizon;
    let radices: Vec<usize> = (1..=t).map(|turn| spec.effective_actions(s0, turn)).collect();
    let mut out = Vec::with_capacity(spec.path_count(s0));
    let mut path = vec![0usize; t];
    loop {
        out.push((path.clone(), spec.reward(s0, &path)));
        // mixed-radix increment, last turn fastest
        let mut turn = t;
        loop {
            if turn == 0 {
                return out;
            }
            turn -= 1;
            path[turn] += 1;
            if path[turn] < radices[turn] {
                break;
            }
            path[turn] = 0;
        }
    }
}

// ---------------------------------------------------------------------------
// Finite-horizon MDPs
// ---------------------------------------------------------------------------

/// A finite-horizon MDP with stationary transitions and rewards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteMdpSpec {
    pub num_states: usize,
    pub num_actions: usize,
    /// `[s][a]` -> probability vector over next states.
    pub transition: Vec<Vec<Vec<f64>>>,
    /// `[s][a]` -> immediate reward.
    pub reward: Vec<Vec<f64>>,
    pub horizon: usize,
    /// Discount in `[0, 1]`; 1 is the undiscounted case.
    pub discount: f64,
    pub initial_distribution: Vec<f64>,
}

/// Generation ranges for [`generate_finite_mdp`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpShape {
    pub num_states: usize,
    pub num_actions: usize,
    pub horizon: usize,
    pub discount: f64,
    pub reward_range: (f64, f64),
    /// Every transition row becomes a one-hot vector.
    pub deterministic_transitions: bool,
    /// Build a time-layered chain (state 0 is the sole initial state, layer
    /// `i` only reaches layer `i+1`) whose rewards are zero everywhere except
    /// the final layer. In such instances the whole return is paid by the
    /// last decision, which is what group-relative baselines assume.
    pub layered_terminal_rewards: bool,
}

impl FiniteMdpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_states == 0 || self.num_actions == 0 || self.horizon == 0 {
            return Err(CoreError::InvalidShape(
                "states, actions, and horizon must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.discount) {
            return Err(CoreError::InvalidShape("discount must lie in [0, 1]".into()));
        }
        check_distribution(&self.initial_distribution, self.num_states)?;
        for s in 0..self.num_states {
            for a in 0..self.num_actions {
                check_distribution(&self.transition[s][a], self.num_states)?;
            }
        }
        Ok(())
    }
}

/// Deterministic function of `seed`; transition rows are normalized after
/// sampling so every row sums to 1.
pub fn generate_finite_mdp(seed: u64, shape: &MdpShape) -> Result<FiniteMdpSpec> {
    if shape.num_states == 0 || shape.num_actions == 0 || shape.horizon == 0 {
        return Err(CoreError::InvalidShape(
            "states, actions, and horizon must be positive".into(),
        ));
    }
    if !(0.0..=1.0).contains(&shape.discount) {
        return Err(CoreError::InvalidShape("discount must lie in [0, 1]".into()));
    }
    let (lo, hi) = shape.reward_range;
    if !(lo <= hi) {
        return Err(CoreError::InvalidShape("empty reward range".into()));
    }
    let mut r = rng::stream(seed, "gen-finite-mdp", 0);
    let s_n = shape.num_states;
    let a_n = shape.num_actions;

    let layer_of: Option<Vec<usize>> = if shape.layered_terminal_rewards {
        if s_n < shape.horizon {
            return Err(CoreError::InvalidShape(
                "layered shape needs at least one state per layer".into(),
            ));
        }
        // state 0 alone in layer 0; remaining states split over layers 1..H
        // with at least one state each.
        let mut sizes = vec![1usize; shape.horizon];
        for _ in 0..(s_n - shape.horizon) {
            let l = r.gen_range(1..shape.horizon.max(2));
            sizes[l.min(shape.horizon - 1)] += 1;
        }
        let mut layers = Vec::with_capacity(s_n);
        for (l, &sz) in sizes.iter().enumerate() {
            for _ in 0..sz {
                layers.push(l);
            }
        }
        Some(layers)
    } else {
        None
    };

    let mut transition = vec![vec![vec![0.0; s_n]; a_n]; s_n];
    for s in 0..s_n {
        for a in 0..a_n {
            let targets: Vec<usize> = match &layer_of {
                Some(layers) => {
                    let next_layer = (layers[s] + 1).min(shape.horizon - 1);
                    if layers[s] == shape.horizon - 1 {
                        vec![s] // absorbing final layer
                    } else {
                        (0..s_n).filter(|&q| layers[q] == next_layer).collect()
                    }
                }
                None => (0..s_n).collect(),
            };
            if shape.deterministic_transitions || targets.len() == 1 {
                let pick = targets[r.gen_range(0..targets.len())];
                transition[s][a][pick] = 1.0;
            } else {
                let raw: Vec<f64> = targets.iter().map(|_| r.gen_range(0.05..1.0)).collect();
                let sum: f64 = raw.iter().sum();
                for (&q, w) in targets.iter().zip(raw) {
                    transition[s][a][q] = w / sum;
                }
            }
        }
    }

    let mut reward = vec![vec![0.0; a_n]; s_n];
    for s in 0..s_n {
        let pays = match &layer_of {
            Some(layers) => layers[s] == shape.horizon - 1,
            None => true,
        };
        if pays {
            for a in 0..a_n {
                reward[s][a] = if lo == hi { lo } else { r.gen_range(lo..hi) };
            }
        }
    }

    let initial_distribution = match &layer_of {
        Some(_) => {
            let mut d = vec![0.0; s_n];
            d[0] = 1.0;
            d
        }
        None => {
            let raw: Vec<f64> = (0..s_n).map(|_| r.gen_range(0.1..1.0)).collect();
            let sum: f64 = raw.iter().sum();
            raw.iter().map(|x| x / sum).collect()
        }
    };

    let spec = FiniteMdpSpec {
        num_states: s_n,
        num_actions: a_n,
        transition,
        reward,
        horizon: shape.horizon,
        discount: shape.discount,
        initial_distribution,
    };
    spec.validate()?;
    Ok(spec)
}

/// The two-branch counterexample MDP: from `s0` both actions reach the
/// high-value state `s1` or the low branch `s2` with probability 1/2 each;
/// only the final step pays. Under [`DEGRADATION_REFERENCE_S1`] the values
/// are `V(s0) = 0`, `V(s1) = 10`, the true advantages at `s1` are `(+2, -5)`,
/// and a group-relative baseline shifts both by `+10` to `(12, 5)`.
pub fn build_degradation_mdp() -> FiniteMdpSpec {
    FiniteMdpSpec {
        num_states: 3,
        num_actions: 2,
        transition: vec![
            vec![vec![0.0, 0.5, 0.5], vec![0.0, 0.5, 0.5]],
            vec![vec![0.0, 1.0, 0.0], vec![0.0, 1.0, 0.0]],
            vec![vec![0.0, 0.0, 1.0], vec![0.0, 0.0, 1.0]],
        ],
        reward: vec![vec![0.0, 0.0], vec![12.0, 5.0], vec![-10.0, -10.0]],
        horizon: 2,
        discount: 1.0,
        initial_distribution: vec![1.0, 0.0, 0.0],
    }
}

/// Reference action probabilities at `s1` of the degradation MDP. Chosen so
/// the state value is exactly 10: `5/7 * 12 + 2/7 * 5 = 10`.
pub const DEGRADATION_REFERENCE_S1: (f64, f64) = (5.0 / 7.0, 2.0 / 7.0);

/// Version tag of the environment spec file format.
pub const ENV_SCHEMA: &str = "turnlab-env-v1";

/// Either environment family, as stored in spec files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvSpec {
    Tree(TreeBanditSpec),
    Mdp(FiniteMdpSpec),
}

/// On-disk wrapper: `{"schema": "turnlab-env-v1", "tree": {...}}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvFile {
    pub schema: String,
    #[serde(flatten)]
    pub env: EnvSpec,
}

pub fn env_to_json(env: &EnvSpec) -> Result<String> {
    Ok(serde_json::to_string_pretty(&EnvFile {
        schema: ENV_SCHEMA.to_string(),
        env: env.clone(),
    })?)
}

pub fn env_from_json(text: &str) -> Result<EnvSpec> {
    let file: EnvFile = serde_json::from_str(text)?;
    if file.schema != ENV_SCHEMA {
        return Err(CoreError::InvalidParameter(format!(
            "unsupported environment schema {:?} (expected {ENV_SCHEMA:?})",
            file.schema
        )));
    }
    match &file.env {
        EnvSpec::Tree(spec) => spec.validate()?,
        EnvSpec::Mdp(spec) => spec.validate()?,
    }
    Ok(file.env)
}

fn check_distribution(d: &[f64], len: usize) -> Result<()> {
    if d.len() != len {
        return Err(CoreError::InvalidShape(format!(
            "distribution length {} != {}",
            d.len(),
            len
        )));
    }
    if d.iter().any(|&p| p < 0.0) {
        return Err(CoreError::Invariant("negative probability".into()));
    }
    let sum: f64 = d.iter().sum();
    if (sum - 1.0).abs() > DIST_TOL {
        return Err(CoreError::Invariant(format!(
            "distribution sums to {sum}, expected 1"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_shape() -> TreeBanditShape {
        TreeBanditShape {
            num_initial_states: 1,
            actions_per_turn: vec![2, 2],
            reward_range: (0.0, 1.0),
            min_turns: None,
        }
    }

    #[test]
    fn tree_bandit_has_one_entry_per_path() {
        let spec = generate_tree_bandit(7, &small_shape()).unwrap();
        assert_eq!(spec.rewards[0].len(), 4);
        assert_eq!(spec.total_paths(), 4);
    }

    #[test]
    fn tree_bandit_generation_is_deterministic() {
        let a = generate_tree_bandit(7, &small_shape()).unwrap();
        let b = generate_tree_bandit(7, &small_shape()).unwrap();
        assert_eq!(a, b);
        let json_a = serde_json::to_vec(&a).unwrap();
        let json_b = serde_json::to_vec(&b).unwrap();
        assert_eq!(json_a, json_b);
    }

    #[test]
    fn tree_bandit_path_count_matches_enumeration() {
        let shape = TreeBanditShape {
            num_initial_states: 1,
            actions_per_turn: vec![2, 3, 2],
            reward_range: (0.0, 1.0),
            min_turns: None,
        };
        let spec = generate_tree_bandit(7, &shape).unwrap();
        assert_eq!(spec.rewards[0].len(), 12);
        // independent counter: walk the tree recursively
        fn count(spec: &TreeBanditSpec, s0: usize, turn: usize) -> usize {
            if turn > spec.horizon {
                return 1;
            }
            (0..spec.effective_actions(s0, turn))
                .map(|_| count(spec, s0, turn + 1))
                .sum()
        }
        assert_eq!(count(&spec, 0, 1), enumerate_paths(&spec, 0).len());
    }

    #[test]
    fn generation_rejects_bad_shapes() {
        let mut shape = small_shape();
        shape.actions_per_turn = vec![];
        assert!(generate_tree_bandit(1, &shape).is_err());
        shape.actions_per_turn = vec![2, 0];
        assert!(generate_tree_bandit(1, &shape).is_err());
    }

    #[test]
    fn generation_rejects_over_cap() {
        let shape = TreeBanditShape {
            num_initial_states: 1,
            actions_per_turn: vec![10; 6], // 10^6 paths
            reward_range: (0.0, 1.0),
            min_turns: None,
        };
        match generate_tree_bandit(1, &shape) {
            Err(CoreError::CapExceeded { .. }) => {}
            other => panic!("expected cap error, got {other:?}"),
        }
    }

    #[test]
    fn enumerate_is_lexicographic() {
        let spec = TreeBanditSpec {
            num_initial_states: 1,
            horizon: 2,
            actions_per_turn: vec![2, 2],
            episode_turns: vec![2],
            initial_distribution: vec![1.0],
            reward_bound: 2.0,
            rewards: vec![vec![0.0, 1.0, 2.0, 0.0]],
        };
        spec.validate().unwrap();
        let paths = enumerate_paths(&spec, 0);
        let expected: Vec<(Vec<usize>, f64)> = vec![
            (vec![0, 0], 0.0),
            (vec![0, 1], 1.0),
            (vec![1, 0], 2.0),
            (vec![1, 1], 0.0),
        ];
        assert_eq!(paths, expected);
    }

    #[test]
    fn enumerate_single_turn() {
        let spec = TreeBanditSpec {
            num_initial_states: 1,
            horizon: 1,
            actions_per_turn: vec![3],
            episode_turns: vec![1],
            initial_distribution: vec![1.0],
            reward_bound: 1.0,
            rewards: vec![vec![0.5, 0.25, 1.0]],
        };
        assert_eq!(enumerate_paths(&spec, 0).len(), 3);
    }

    #[test]
    fn short_episodes_pad_with_noop() {
        let shape = TreeBanditShape {
            num_initial_states: 4,
            actions_per_turn: vec![2, 2, 2],
            reward_range: (0.0, 1.0),
            min_turns: Some(1),
        };
        let spec = generate_tree_bandit(11, &shape).unwrap();
        spec.validate().unwrap();
        for s0 in 0..spec.num_initial_states {
            let len = spec.episode_turns[s0];
            for t in 1..=spec.horizon {
                let n = spec.effective_actions(s0, t);
                if t <= len {
                    assert_eq!(n, 2);
                } else {
                    assert_eq!(n, 1);
                }
            }
            assert_eq!(enumerate_paths(&spec, s0).len(), spec.path_count(s0));
        }
    }

    #[test]
    fn mdp_rows_normalized_and_deterministic() {
        let shape = MdpShape {
            num_states: 2,
            num_actions: 2,
            horizon: 2,
            discount: 1.0,
            reward_range: (-1.0, 1.0),
            deterministic_transitions: false,
            layered_terminal_rewards: false,
        };
        let a = generate_finite_mdp(1, &shape).unwrap();
        let b = generate_finite_mdp(1, &shape).unwrap();
        assert_eq!(a, b);
        for s in 0..2 {
            for act in 0..2 {
                let sum: f64 = a.transition[s][act].iter().sum();
                assert!((sum - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn deterministic_flag_gives_one_hot_rows() {
        let shape = MdpShape {
            num_states: 3,
            num_actions: 2,
            horizon: 3,
            discount: 0.9,
            reward_range: (0.0, 1.0),
            deterministic_transitions: true,
            layered_terminal_rewards: false,
        };
        let spec = generate_finite_mdp(5, &shape).unwrap();
        for s in 0..3 {
            for a in 0..2 {
                let ones = spec.transition[s][a].iter().filter(|&&p| p == 1.0).count();
                let zeros = spec.transition[s][a].iter().filter(|&&p| p == 0.0).count();
                assert_eq!(ones, 1);
                assert_eq!(zeros, 2);
            }
        }
    }

    #[test]
    fn layered_mdp_pays_only_in_final_layer() {
        let shape = MdpShape {
            num_states: 5,
            num_actions: 3,
            horizon: 3,
            discount: 1.0,
            reward_range: (0.0, 1.0),
            deterministic_transitions: false,
            layered_terminal_rewards: true,
        };
        let spec = generate_finite_mdp(3, &shape).unwrap();
        spec.validate().unwrap();
        assert_eq!(spec.initial_distribution[0], 1.0);
        // State 0 never pays and only reaches layer-1 states.
        assert!(spec.reward[0].iter().all(|&r| r == 0.0));
        let paying: Vec<usize> = (0..5)
            .filter(|&s| spec.reward[s].iter().any(|&r| r != 0.0))
            .collect();
        assert!(!paying.is_empty());
        // Paying states are absorbing.
        for &s in &paying {
            for a in 0..3 {
                assert_eq!(spec.transition[s][a][s], 1.0);
            }
        }
    }

    #[test]
    fn degradation_mdp_validates() {
        let spec = build_degradation_mdp();
        spec.validate().unwrap();
        assert_eq!(spec.reward[1], vec![12.0, 5.0]);
        let (p_good, p_bad) = DEGRADATION_REFERENCE_S1;
        let v1 = p_good * 12.0 + p_bad * 5.0;
        assert!((v1 - 10.0).abs() <= 1e-12);
        let v0 = 0.5 * v1 + 0.5 * (-10.0);
        assert!(v0.abs() <= 1e-12);
    }
}
