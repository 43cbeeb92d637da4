//! Finite Markov games: data model, joint-action indexing, policies and
//! value-function evaluation.

mod config;
mod eval;
mod policy;

pub use config::{load_game_config, parse_game_config, GameConfig};
pub use eval::{
    bellman_sweep, best_response, best_response_value, evaluate_joint_q, evaluate_joint_q_with,
    evaluate_soft_q, evaluate_soft_value, induced_chain, joint_distribution,
    stationary_distribution, BestResponse, EvalMethod, EvalOptions, SoftBootstrap,
    LINEAR_SOLVE_LIMIT,
};
pub use policy::{JointPolicy, QEstimate, Rationality, SoftValueParams, SIMPLEX_TOL};
pub(crate) use eval::{best_response_capped, soft_lse_values};

use crate::error::{Error, Result};

/// Default cap on the number of joint action profiles.
pub const DEFAULT_JOINT_CAP: usize = 1_000_000;

const PROB_TOL: f64 = 1e-12;

/// Lexicographic indexing of joint actions; agent 0 is the most significant digit.
#[derive(Debug, Clone, PartialEq)]
pub struct JointActionSpace {
    sizes: Vec<usize>,
    strides: Vec<usize>,
    count: usize,
}

impl JointActionSpace {
    pub fn new(sizes: &[usize], cap: usize) -> Result<Self> {
        if sizes.is_empty() || sizes.contains(&0) {
            return Err(Error::InvalidGame(
                "every agent needs at least one action".into(),
            ));
        }
        let count: u128 = sizes.iter().map(|&n| n as u128).product();
        if count > cap as u128 {
            return Err(Error::JointActionCap { count, cap });
        }
        let mut strides = vec![1; sizes.len()];
        for i in (0..sizes.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * sizes[i + 1];
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            strides,
            count: count as usize,
        })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn agents(&self) -> usize {
        self.sizes.len()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn encode(&self, actions: &[usize]) -> usize {
        debug_assert_eq!(actions.len(), self.sizes.len());
        actions.iter().zip(&self.strides).map(|(a, s)| a * s).sum()
    }

    /// Action of `agent` inside joint index `joint`.
    #[inline]
    pub fn action_of(&self, joint: usize, agent: usize) -> usize {
        (joint / self.strides[agent]) % self.sizes[agent]
    }

    pub fn decode(&self, joint: usize) -> Vec<usize> {
        (0..self.sizes.len())
            .map(|i| self.action_of(joint, i))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardBounds {
    pub min: f64,
    pub max: f64,
}

/// Dense description of a game, validated by [`MarkovGame::new`].
#[derive(Debug, Clone)]
pub struct GameDefinition {
    pub state_labels: Vec<String>,
    pub action_labels: Vec<Vec<String>>,
    /// `transitions[s][a]` is the next-state distribution for joint action `a`.
    pub transitions: Vec<Vec<Vec<f64>>>,
    /// `rewards[i][s][a]`.
    pub rewards: Vec<Vec<Vec<f64>>>,
    pub reward_bounds: RewardBounds,
    pub discount: f64,
    pub initial: Vec<f64>,
    /// Standard deviation of Gaussian noise added to sampled rewards.
    pub reward_noise: f64,
    pub joint_cap: usize,
}

/// Immutable N-agent Markov game with tabular transitions and rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovGame {
    state_labels: Vec<String>,
    action_labels: Vec<Vec<String>>,
    joint: JointActionSpace,
    /// Sparse next-state rows indexed by `s * J + a`.
    transitions: Vec<Vec<(usize, f64)>>,
    /// `rewards[i][s * J + a]`.
    rewards: Vec<Vec<f64>>,
    reward_bounds: RewardBounds,
    discount: f64,
    initial: Vec<f64>,
    reward_noise: f64,
}

impl MarkovGame {
    pub fn new(def: GameDefinition) -> Result<Self> {
        let n_states = def.state_labels.len();
        if n_states == 0 {
            return Err(Error::InvalidGame("no states".into()));
        }
        let n_agents = def.action_labels.len();
        if n_agents == 0 {
            return Err(Error::InvalidGame("no agents".into()));
        }
        let sizes: Vec<usize> = def.action_labels.iter().map(Vec::len).collect();
        let joint = JointActionSpace::new(&sizes, def.joint_cap)?;
        let nj = joint.count();

        if !(0.0..1.0).contains(&def.discount) {
            return Err(Error::InvalidGame(format!(
                "discount {} must lie in [0, 1)",
                def.discount
            )));
        }
        if !(def.reward_bounds.min <= def.reward_bounds.max) {
            return Err(Error::InvalidGame("reward bounds are inverted".into()));
        }
        if !(def.reward_noise >= 0.0) {
            return Err(Error::InvalidGame("reward noise must be nonnegative".into()));
        }
        check_distribution(&def.initial, n_states, "initial distribution")?;

        if def.transitions.len() != n_states {
            return Err(Error::InvalidGame(format!(
                "expected transition rows for {n_states} states, got {}",
                def.transitions.len()
            )));
        }
        let mut transitions = Vec::with_capacity(n_states * nj);
        for (s, rows) in def.transitions.iter().enumerate() {
            if rows.len() != nj {
                return Err(Error::InvalidGame(format!(
                    "state {s}: expected {nj} joint-action rows, got {}",
                    rows.len()
                )));
            }
            for (a, row) in rows.iter().enumerate() {
                check_distribution(row, n_states, &format!("transition row ({s}, {a})"))?;
                transitions.push(
                    row.iter()
                        .enumerate()
                        .filter(|(_, &p)| p > 0.0)
                        .map(|(t, &p)| (t, p))
                        .collect(),
                );
            }
        }

        if def.rewards.len() != n_agents {
            return Err(Error::InvalidGame(format!(
                "expected reward tables for {n_agents} agents, got {}",
                def.rewards.len()
            )));
        }
        let mut rewards = Vec::with_capacity(n_agents);
        for (i, table) in def.rewards.iter().enumerate() {
            if table.len() != n_states || table.iter().any(|r| r.len() != nj) {
                return Err(Error::InvalidGame(format!(
                    "agent {i}: reward table must be {n_states} x {nj}"
                )));
            }
            let flat: Vec<f64> = table.iter().flatten().copied().collect();
            if let Some(r) = flat.iter().find(|r| {
                !r.is_finite() || **r < def.reward_bounds.min || **r > def.reward_bounds.max
            }) {
                return Err(Error::InvalidGame(format!(
                    "agent {i}: reward {r} outside declared bounds [{}, {}]",
                    def.reward_bounds.min, def.reward_bounds.max
                )));
            }
            rewards.push(flat);
        }

        Ok(Self {
            state_labels: def.state_labels,
            action_labels: def.action_labels,
            joint,
            transitions,
            rewards,
            reward_bounds: def.reward_bounds,
            discount: def.discount,
            initial: def.initial,
            reward_noise: def.reward_noise,
        })
    }

    /// Single-state game from per-agent payoff tensors indexed by joint action.
    pub fn matrix_game(action_counts: &[usize], payoffs: Vec<Vec<f64>>, discount: f64) -> Result<Self> {
        let joint = JointActionSpace::new(action_counts, DEFAULT_JOINT_CAP)?;
        let nj = joint.count();
        let (lo, hi) = bounds_of(payoffs.iter().flatten());
        Self::new(GameDefinition {
            state_labels: vec!["s0".into()],
            action_labels: action_counts
                .iter()
                .map(|&n| (0..n).map(|a| format!("a{a}")).collect())
                .collect(),
            transitions: vec![vec![vec![1.0]; nj]],
            rewards: payoffs.into_iter().map(|r| vec![r]).collect(),
            reward_bounds: RewardBounds { min: lo, max: hi },
            discount,
            initial: vec![1.0],
            reward_noise: 0.0,
            joint_cap: DEFAULT_JOINT_CAP,
        })
    }

    /// Two-player single-state game from bimatrix payoffs `row[a1][a2]`, `col[a1][a2]`.
    pub fn bimatrix(row: &[Vec<f64>], col: &[Vec<f64>], discount: f64) -> Result<Self> {
        let n1 = row.len();
        let n2 = row.first().map_or(0, Vec::len);
        if col.len() != n1 || row.iter().chain(col).any(|r| r.len() != n2) {
            return Err(Error::InvalidGame("bimatrix shapes differ".into()));
        }
        let flat = |m: &[Vec<f64>]| m.iter().flatten().copied().collect::<Vec<_>>();
        Self::matrix_game(&[n1, n2], vec![flat(row), flat(col)], discount)
    }

    pub fn n_agents(&self) -> usize {
        self.joint.agents()
    }

    pub fn n_states(&self) -> usize {
        self.state_labels.len()
    }

    pub fn n_actions(&self, agent: usize) -> usize {
        self.joint.sizes()[agent]
    }

    pub fn n_joint(&self) -> usize {
        self.joint.count()
    }

    pub fn joint(&self) -> &JointActionSpace {
        &self.joint
    }

    pub fn state_labels(&self) -> &[String] {
        &self.state_labels
    }

    pub fn action_labels(&self, agent: usize) -> &[String] {
        &self.action_labels[agent]
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    pub fn reward_bounds(&self) -> RewardBounds {
        self.reward_bounds
    }

    pub fn reward_noise(&self) -> f64 {
        self.reward_noise
    }

    #[inline]
    pub fn reward(&self, agent: usize, state: usize, joint: usize) -> f64 {
        self.rewards[agent][state * self.joint.count() + joint]
    }

    /// Reward table of one agent, indexed by `s * J + a`.
    pub fn reward_table(&self, agent: usize) -> &[f64] {
        &self.rewards[agent]
    }

    #[inline]
    pub fn transition(&self, state: usize, joint: usize) -> &[(usize, f64)] {
        &self.transitions[state * self.joint.count() + joint]
    }

    pub fn dense_transition(&self, state: usize, joint: usize) -> Vec<f64> {
        let mut row = vec![0.0; self.n_states()];
        for &(t, p) in self.transition(state, joint) {
            row[t] = p;
        }
        row
    }

    /// Copy of this game with different rewards for every agent.
    pub fn with_rewards(&self, rewards: Vec<Vec<f64>>, bounds: RewardBounds) -> Result<Self> {
        let nj = self.n_joint();
        let mut def = self.to_definition();
        def.rewards = rewards
            .into_iter()
            .map(|flat| flat.chunks(nj).map(<[f64]>::to_vec).collect())
            .collect();
        def.reward_bounds = bounds;
        Self::new(def)
    }

    pub fn with_reward_noise(mut self, sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0) {
            return Err(Error::InvalidGame("reward noise must be nonnegative".into()));
        }
        self.reward_noise = sigma;
        Ok(self)
    }

    pub fn with_initial(&self, initial: Vec<f64>) -> Result<Self> {
        let mut def = self.to_definition();
        def.initial = initial;
        Self::new(def)
    }

    pub fn to_definition(&self) -> GameDefinition {
        let nj = self.n_joint();
        GameDefinition {
            state_labels: self.state_labels.clone(),
            action_labels: self.action_labels.clone(),
            transitions: (0..self.n_states())
                .map(|s| (0..nj).map(|a| self.dense_transition(s, a)).collect())
                .collect(),
            rewards: self
                .rewards
                .iter()
                .map(|flat| flat.chunks(nj).map(<[f64]>::to_vec).collect())
                .collect(),
            reward_bounds: self.reward_bounds,
            discount: self.discount,
            initial: self.initial.clone(),
            reward_noise: self.reward_noise,
            joint_cap: DEFAULT_JOINT_CAP.max(nj),
        }
    }

    /// Upper bound on |soft value| for agent `i` at temperature `alpha`.
    pub fn soft_value_bound(&self, agent: usize, alpha: f64) -> f64 {
        let r = self.reward_bounds.max.abs().max(self.reward_bounds.min.abs());
        (r + alpha * (self.n_actions(agent) as f64).ln()) / (1.0 - self.discount)
    }
}

pub(crate) fn bounds_of<'a>(values: impl Iterator<Item = &'a f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &r| {
        (lo.min(r), hi.max(r))
    })
}

fn check_distribution(p: &[f64], len: usize, what: &str) -> Result<()> {
    if p.len() != len {
        return Err(Error::InvalidGame(format!(
            "{what}: length {} but {len} states",
            p.len()
        )));
    }
    if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::InvalidGame(format!("{what}: negative or non-finite entry")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > PROB_TOL {
        return Err(Error::InvalidGame(format!("{what}: sums to {sum}")));
    }
    Ok(())
}
