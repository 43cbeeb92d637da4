use serde::{Deserialize, Serialize};

use super::MarkovGame;
use crate::error::{Error, Result};
use crate::numeric;

pub const SIMPLEX_TOL: f64 = 1e-10;

/// Per-agent, per-state distributions over that agent's own actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointPolicy {
    /// `probs[i][s][a_i]`.
    probs: Vec<Vec<Vec<f64>>>,
}

impl JointPolicy {
    pub fn uniform(game: &MarkovGame) -> Self {
        let probs = (0..game.n_agents())
            .map(|i| {
                let n = game.n_actions(i);
                vec![vec![1.0 / n as f64; n]; game.n_states()]
            })
            .collect();
        Self { probs }
    }

    pub fn from_rows(probs: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let policy = Self { probs };
        policy.validate(SIMPLEX_TOL)?;
        Ok(policy)
    }

    /// Deterministic policy from `actions[i][s]`.
    pub fn pure(game: &MarkovGame, actions: &[Vec<usize>]) -> Self {
        let probs = actions
            .iter()
            .enumerate()
            .map(|(i, per_state)| {
                per_state
                    .iter()
                    .map(|&a| {
                        let mut row = vec![0.0; game.n_actions(i)];
                        row[a] = 1.0;
                        row
                    })
                    .collect()
            })
            .collect();
        Self { probs }
    }

    pub fn n_agents(&self) -> usize {
        self.probs.len()
    }

    pub fn n_states(&self) -> usize {
        self.probs.first().map_or(0, Vec::len)
    }

    #[inline]
    pub fn row(&self, agent: usize, state: usize) -> &[f64] {
        &self.probs[agent][state]
    }

    #[inline]
    pub fn row_mut(&mut self, agent: usize, state: usize) -> &mut [f64] {
        &mut self.probs[agent][state]
    }

    pub fn agent_rows(&self, agent: usize) -> &[Vec<f64>] {
        &self.probs[agent]
    }

    pub fn rows(&self) -> impl Iterator<Item = (usize, usize, &[f64])> {
        self.probs.iter().enumerate().flat_map(|(i, states)| {
            states
                .iter()
                .enumerate()
                .map(move |(s, row)| (i, s, row.as_slice()))
        })
    }

    /// Probability of joint action `joint` at `state` under the product policy.
    pub fn joint_prob(&self, game: &MarkovGame, state: usize, joint: usize) -> f64 {
        let space = game.joint();
        (0..self.n_agents())
            .map(|i| self.probs[i][state][space.action_of(joint, i)])
            .product()
    }

    /// Probability of the opponents' part of `joint`, excluding `agent`.
    pub fn opponents_prob(&self, game: &MarkovGame, state: usize, joint: usize, agent: usize) -> f64 {
        let space = game.joint();
        (0..self.n_agents())
            .filter(|&j| j != agent)
            .map(|j| self.probs[j][state][space.action_of(joint, j)])
            .product()
    }

    pub fn check_shape(&self, game: &MarkovGame) -> Result<()> {
        if self.n_agents() != game.n_agents() {
            return Err(Error::InvalidPolicy(format!(
                "policy has {} agents, game has {}",
                self.n_agents(),
                game.n_agents()
            )));
        }
        for (i, states) in self.probs.iter().enumerate() {
            if states.len() != game.n_states() || states.iter().any(|r| r.len() != game.n_actions(i)) {
                return Err(Error::InvalidPolicy(format!(
                    "agent {i}: rows do not match the game's {} states x {} actions",
                    game.n_states(),
                    game.n_actions(i)
                )));
            }
        }
        Ok(())
    }

    pub fn validate(&self, tol: f64) -> Result<()> {
        match self.first_invalid_row(tol) {
            None => Ok(()),
            Some((i, s)) => Err(Error::InvalidPolicy(format!(
                "row (agent {i}, state {s}) is off the simplex: {:?}",
                self.probs[i][s]
            ))),
        }
    }

    pub fn first_invalid_row(&self, tol: f64) -> Option<(usize, usize)> {
        self.rows()
            .find(|(_, _, row)| !numeric::is_simplex(row, tol))
            .map(|(i, s, _)| (i, s))
    }

    pub fn is_simplex_valid(&self, tol: f64) -> bool {
        self.first_invalid_row(tol).is_none()
    }

    /// Largest per-row total-variation distance.
    pub fn max_row_tv(&self, other: &JointPolicy) -> f64 {
        self.rows()
            .map(|(i, s, row)| numeric::total_variation(row, other.row(i, s)))
            .fold(0.0, f64::max)
    }

    /// Largest per-row L1 distance.
    pub fn max_row_l1(&self, other: &JointPolicy) -> f64 {
        self.rows()
            .map(|(i, s, row)| numeric::l1_distance(row, other.row(i, s)))
            .fold(0.0, f64::max)
    }

    /// `max_s Σ_i TV(π_i(·|s), π'_i(·|s))`, an upper bound on the TV
    /// distance between the joint action distributions at any state.
    pub fn joint_tv(&self, other: &JointPolicy) -> f64 {
        (0..self.n_states())
            .map(|s| {
                (0..self.n_agents())
                    .map(|i| numeric::total_variation(self.row(i, s), other.row(i, s)))
                    .sum::<f64>()
            })
            .fold(0.0, f64::max)
    }

    /// Mean per-row entropy over agents and states.
    pub fn mean_entropy(&self) -> f64 {
        let (sum, n) = self
            .rows()
            .fold((0.0, 0usize), |(acc, n), (_, _, row)| (acc + numeric::entropy(row), n + 1));
        sum / n as f64
    }

    pub fn agent_mean_entropy(&self, agent: usize) -> f64 {
        let rows = &self.probs[agent];
        rows.iter().map(|r| numeric::entropy(r)).sum::<f64>() / rows.len() as f64
    }

    /// `(1 - w) * self + w * other`, row by row.
    pub fn mix(&self, other: &JointPolicy, w: f64) -> JointPolicy {
        let mut out = self.clone();
        for (i, s, row) in other.rows() {
            for (x, y) in out.row_mut(i, s).iter_mut().zip(row) {
                *x = (1.0 - w) * *x + w * y;
            }
        }
        out
    }
}

/// Per-agent rationality λ_i; temperature α_i = 1/λ_i.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rationality(Vec<f64>);

impl Rationality {
    pub fn homogeneous(n_agents: usize, lambda: f64) -> Self {
        Self(vec![lambda; n_agents])
    }

    pub fn per_agent(lambdas: Vec<f64>) -> Result<Self> {
        if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "rationality must be finite and nonnegative: {lambdas:?}"
            )));
        }
        Ok(Self(lambdas))
    }

    pub fn lambda(&self, agent: usize) -> f64 {
        self.0[agent]
    }

    pub fn alpha(&self, agent: usize) -> f64 {
        1.0 / self.0[agent]
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.0.iter().sum::<f64>() / self.0.len() as f64
    }

    /// Temperature parameters for one agent; requires λ_i > 0.
    pub fn params(&self, agent: usize) -> Result<SoftValueParams> {
        SoftValueParams::from_lambda(self.0[agent])
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self(self.0.iter().map(|&l| f(l)).collect())
    }
}

/// Temperature α with its reciprocal rationality λ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftValueParams {
    alpha: f64,
    lambda: f64,
}

impl SoftValueParams {
    pub fn from_alpha(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive and finite, got {alpha}"
            )));
        }
        Ok(Self {
            alpha,
            lambda: 1.0 / alpha,
        })
    }

    pub fn from_lambda(lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "rationality must be positive and finite, got {lambda}"
            )));
        }
        Ok(Self {
            alpha: 1.0 / lambda,
            lambda,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }
}

/// Critic tables: joint `Q_i(s, a)`, marginal `Q_i(s, a_i)`, and an optional
/// target copy of the joint table.
#[derive(Debug, Clone, PartialEq)]
pub struct QEstimate {
    /// `joint[i][s * J + a]`.
    pub joint: Vec<Vec<f64>>,
    /// `marginal[i][s][a_i]`.
    pub marginal: Vec<Vec<Vec<f64>>>,
    pub target: Option<Vec<Vec<f64>>>,
    pub tau_target: f64,
}

impl QEstimate {
    pub fn zeros(game: &MarkovGame) -> Self {
        let size = game.n_states() * game.n_joint();
        Self {
            joint: vec![vec![0.0; size]; game.n_agents()],
            marginal: (0..game.n_agents())
                .map(|i| vec![vec![0.0; game.n_actions(i)]; game.n_states()])
                .collect(),
            target: None,
            tau_target: 1.0,
        }
    }

    pub fn from_joint(game: &MarkovGame, joint: Vec<Vec<f64>>, policy: &JointPolicy) -> Self {
        let mut q = Self::zeros(game);
        q.joint = joint;
        q.refresh_marginals(game, policy);
        q
    }

    /// Enables the target copy with soft-update rate `tau` ∈ (0, 1].
    pub fn with_target(mut self, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "target update rate must lie in (0, 1], got {tau}"
            )));
        }
        self.target = Some(self.joint.clone());
        self.tau_target = tau;
        Ok(self)
    }

    #[inline]
    pub fn get(&self, game: &MarkovGame, agent: usize, state: usize, joint: usize) -> f64 {
        self.joint[agent][state * game.n_joint() + joint]
    }

    /// Target copy if present, else the online table.
    pub fn target_table(&self, agent: usize) -> &[f64] {
        match &self.target {
            Some(t) => &t[agent],
            None => &self.joint[agent],
        }
    }

    pub fn marginal_row(&self, agent: usize, state: usize) -> &[f64] {
        &self.marginal[agent][state]
    }

    /// Recomputes `Q_i(s, a_i) = Σ_{a_-i} π_-i(a_-i|s) Q_i(s, a_i, a_-i)`.
    pub fn refresh_marginals(&mut self, game: &MarkovGame, policy: &JointPolicy) {
        for i in 0..game.n_agents() {
            let rows = marginalize(game, policy, &self.joint[i], i);
            self.marginal[i] = rows;
        }
    }

    /// Marginal rows of the target copy under `policy`.
    pub fn target_marginal(&self, game: &MarkovGame, policy: &JointPolicy, agent: usize) -> Vec<Vec<f64>> {
        marginalize(game, policy, self.target_table(agent), agent)
    }

    /// `target ← τ·joint + (1 − τ)·target`.
    pub fn soft_update_target(&mut self) {
        let tau = self.tau_target;
        if let Some(target) = &mut self.target {
            for (t_row, q_row) in target.iter_mut().zip(&self.joint) {
                for (t, q) in t_row.iter_mut().zip(q_row) {
                    *t = tau * q + (1.0 - tau) * *t;
                }
            }
        }
    }

    pub fn sup_distance(&self, other: &QEstimate) -> f64 {
        self.joint
            .iter()
            .zip(&other.joint)
            .map(|(a, b)| numeric::sup_distance(a, b))
            .fold(0.0, f64::max)
    }
}

pub(crate) fn marginalize(
    game: &MarkovGame,
    policy: &JointPolicy,
    table: &[f64],
    agent: usize,
) -> Vec<Vec<f64>> {
    let nj = game.n_joint();
    let space = game.joint();
    (0..game.n_states())
        .map(|s| {
            let mut row = vec![0.0; game.n_actions(agent)];
            for a in 0..nj {
                let w = policy.opponents_prob(game, s, a, agent);
                if w != 0.0 {
                    row[space.action_of(a, agent)] += w * table[s * nj + a];
                }
            }
            row
        })
        .collect()
}
