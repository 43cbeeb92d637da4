use nalgebra::DMatrix;

use super::policy::marginalize;
use super::{JointPolicy, MarkovGame, QEstimate, Rationality};
use crate::error::{Error, Result};
use crate::numeric;

/// Problems with `|S|·|A|` up to this size are evaluated by a direct linear solve.
pub const LINEAR_SOLVE_LIMIT: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMethod {
    /// Linear solve when `|S|·|A| ≤ LINEAR_SOLVE_LIMIT`, synchronous sweeps otherwise.
    Auto,
    Sweeps,
    LinearSolve,
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub method: EvalMethod,
    pub max_sweeps: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            method: EvalMethod::Auto,
            max_sweeps: 200_000,
        }
    }
}

/// How the soft state value is bootstrapped from a marginal Q row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftBootstrap {
    /// `V(s) = α log Σ_a exp(Q(s, a) / α)`.
    #[default]
    LogSumExp,
    /// `V(s) = Σ_a π(a|s) (Q(s, a) − α log π(a|s))`.
    Expectation,
}

/// Probability of every joint action at every state, indexed `s * J + a`.
pub fn joint_distribution(game: &MarkovGame, policy: &JointPolicy) -> Vec<f64> {
    let nj = game.n_joint();
    let mut out = vec![0.0; game.n_states() * nj];
    for s in 0..game.n_states() {
        for a in 0..nj {
            out[s * nj + a] = policy.joint_prob(game, s, a);
        }
    }
    out
}

/// State-to-state kernel of the chain induced by `policy`.
pub fn induced_chain(game: &MarkovGame, policy: &JointPolicy) -> Vec<Vec<f64>> {
    let ns = game.n_states();
    let nj = game.n_joint();
    let probs = joint_distribution(game, policy);
    let mut chain = vec![vec![0.0; ns]; ns];
    for s in 0..ns {
        for a in 0..nj {
            let p = probs[s * nj + a];
            if p == 0.0 {
                continue;
            }
            for &(t, pt) in game.transition(s, a) {
                chain[s][t] += p * pt;
            }
        }
    }
    chain
}

/// One synchronous application of `T_i^π[Q](s, a) = R_i(s, a) + γ Σ_{s'} P(s'|s, a) V_i(s')`
/// with `V_i(s') = Σ_{a'} π(a'|s') Q_i(s', a')`, for every agent.
pub fn bellman_sweep(game: &MarkovGame, policy: &JointPolicy, joint_q: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let probs = joint_distribution(game, policy);
    let zero = vec![vec![0.0; game.n_states()]; game.n_agents()];
    sweep_with(game, &probs, joint_q, &zero)
}

fn state_values(game: &MarkovGame, probs: &[f64], table: &[f64], bonus: &[f64]) -> Vec<f64> {
    let nj = game.n_joint();
    (0..game.n_states())
        .map(|s| {
            let row = &table[s * nj..(s + 1) * nj];
            numeric::dot(&probs[s * nj..(s + 1) * nj], row) + bonus[s]
        })
        .collect()
}

fn backup(game: &MarkovGame, agent: usize, values: &[f64]) -> Vec<f64> {
    let nj = game.n_joint();
    let gamma = game.discount();
    let mut out = vec![0.0; game.n_states() * nj];
    for s in 0..game.n_states() {
        for a in 0..nj {
            let next: f64 = game.transition(s, a).iter().map(|&(t, p)| p * values[t]).sum();
            out[s * nj + a] = game.reward(agent, s, a) + gamma * next;
        }
    }
    out
}

fn sweep_with(
    game: &MarkovGame,
    probs: &[f64],
    joint_q: &[Vec<f64>],
    bonus: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    (0..game.n_agents())
        .map(|i| {
            let v = state_values(game, probs, &joint_q[i], &bonus[i]);
            backup(game, i, &v)
        })
        .collect()
}

fn residual(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| numeric::sup_distance(x, y))
        .fold(0.0, f64::max)
}

/// Evaluates joint Q tables for the reward `R + γ P (V + bonus)` structure.
fn evaluate_with_bonus(
    game: &MarkovGame,
    policy: &JointPolicy,
    bonus: &[Vec<f64>],
    tol: f64,
    opts: &EvalOptions,
) -> Result<(Vec<Vec<f64>>, f64)> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be positive, got {tol}")));
    }
    policy.check_shape(game)?;
    let probs = joint_distribution(game, policy);
    let size = game.n_states() * game.n_joint();
    let use_linear = match opts.method {
        EvalMethod::LinearSolve => true,
        EvalMethod::Sweeps => false,
        EvalMethod::Auto => size <= LINEAR_SOLVE_LIMIT,
    };

    let mut q: Vec<Vec<f64>> = if use_linear {
        linear_solve(game, policy, bonus)?
    } else {
        (0..game.n_agents()).map(|i| game.reward_table(i).to_vec()).collect()
    };

    for _ in 0..opts.max_sweeps {
        let next = sweep_with(game, &probs, &q, bonus);
        let res = residual(&next, &q);
        if res <= tol {
            // residual of `next` is at most γ·res.
            let res_next = game.discount() * res;
            return Ok((next, res_next));
        }
        q = next;
    }
    let next = sweep_with(game, &probs, &q, bonus);
    Err(Error::Divergence {
        what: "policy evaluation",
        iterations: opts.max_sweeps,
        residual: residual(&next, &q),
    })
}

fn linear_solve(game: &MarkovGame, policy: &JointPolicy, bonus: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let ns = game.n_states();
    let nj = game.n_joint();
    let gamma = game.discount();
    let chain = induced_chain(game, policy);
    let probs = joint_distribution(game, policy);
    let m = DMatrix::from_fn(ns, ns, |r, c| {
        let id = if r == c { 1.0 } else { 0.0 };
        id - gamma * chain[r][c]
    });
    let rhs = DMatrix::from_fn(ns, game.n_agents(), |s, i| {
        let r: f64 = (0..nj).map(|a| probs[s * nj + a] * game.reward(i, s, a)).sum();
        r + bonus[i][s]
    });
    let sol = m
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::NonFinite("singular policy-evaluation system".into()))?;
    Ok((0..game.n_agents())
        .map(|i| {
            let values: Vec<f64> = (0..ns).map(|s| sol[(s, i)]).collect();
            backup(game, i, &values)
        })
        .collect())
}

/// Exact policy evaluation of every agent's joint Q table, with marginals filled.
pub fn evaluate_joint_q(game: &MarkovGame, policy: &JointPolicy, tol: f64) -> Result<QEstimate> {
    evaluate_joint_q_with(game, policy, tol, &EvalOptions::default())
}

pub fn evaluate_joint_q_with(
    game: &MarkovGame,
    policy: &JointPolicy,
    tol: f64,
    opts: &EvalOptions,
) -> Result<QEstimate> {
    let zero = vec![vec![0.0; game.n_states()]; game.n_agents()];
    let (joint, _) = evaluate_with_bonus(game, policy, &zero, tol, opts)?;
    Ok(QEstimate::from_joint(game, joint, policy))
}

fn entropy_bonus(game: &MarkovGame, policy: &JointPolicy, rationality: &Rationality) -> Result<Vec<Vec<f64>>> {
    (0..game.n_agents())
        .map(|i| {
            let alpha = rationality.params(i)?.alpha();
            Ok((0..game.n_states())
                .map(|s| alpha * numeric::entropy(policy.row(i, s)))
                .collect())
        })
        .collect()
}

/// Entropy-regularized state values `V_i^soft(s)`, each step earning `α_i H(π_i(·|s_t))`.
pub fn evaluate_soft_value(
    game: &MarkovGame,
    policy: &JointPolicy,
    rationality: &Rationality,
    tol: f64,
) -> Result<Vec<Vec<f64>>> {
    let bonus = entropy_bonus(game, policy, rationality)?;
    let (joint, _) = evaluate_with_bonus(game, policy, &bonus, tol, &EvalOptions::default())?;
    let probs = joint_distribution(game, policy);
    Ok((0..game.n_agents())
        .map(|i| state_values(game, &probs, &joint[i], &bonus[i]))
        .collect())
}

/// Fixed point of the soft critic operator
/// `Q_i(s, a) = R_i(s, a) + γ Σ P(s'|s, a) V_i^soft(s')`, where `V_i^soft` is
/// bootstrapped from the opponent-marginal of `Q_i` as selected by `bootstrap`.
pub fn evaluate_soft_q(
    game: &MarkovGame,
    policy: &JointPolicy,
    rationality: &Rationality,
    bootstrap: SoftBootstrap,
    tol: f64,
) -> Result<QEstimate> {
    match bootstrap {
        SoftBootstrap::Expectation => {
            let bonus = entropy_bonus(game, policy, rationality)?;
            let (joint, _) = evaluate_with_bonus(game, policy, &bonus, tol, &EvalOptions::default())?;
            Ok(QEstimate::from_joint(game, joint, policy))
        }
        SoftBootstrap::LogSumExp => {
            policy.check_shape(game)?;
            let alphas = (0..game.n_agents())
                .map(|i| rationality.params(i).map(|p| p.alpha()))
                .collect::<Result<Vec<_>>>()?;
            let mut joint: Vec<Vec<f64>> =
                (0..game.n_agents()).map(|i| game.reward_table(i).to_vec()).collect();
            let cap = EvalOptions::default().max_sweeps;
            for _ in 0..cap {
                let next: Vec<Vec<f64>> = (0..game.n_agents())
                    .map(|i| {
                        let v = soft_lse_values(game, policy, &joint[i], i, alphas[i]);
                        backup(game, i, &v)
                    })
                    .collect();
                let res = residual(&next, &joint);
                joint = next;
                if res <= tol {
                    return Ok(QEstimate::from_joint(game, joint, policy));
                }
            }
            Err(Error::Divergence {
                what: "soft value iteration",
                iterations: cap,
                residual: f64::NAN,
            })
        }
    }
}

/// `α log Σ_{a_i} exp(Q̄_i(s, a_i)/α)` per state, with `Q̄_i` the opponent-marginal of `table`.
pub(crate) fn soft_lse_values(
    game: &MarkovGame,
    policy: &JointPolicy,
    table: &[f64],
    agent: usize,
    alpha: f64,
) -> Vec<f64> {
    marginalize(game, policy, table, agent)
        .iter()
        .map(|row| {
            let scaled: Vec<f64> = row.iter().map(|q| q / alpha).collect();
            alpha * numeric::log_sum_exp(&scaled)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestResponse {
    pub values: Vec<f64>,
    /// Greedy action per state.
    pub actions: Vec<usize>,
    pub iterations: usize,
}

/// Exact best response of `agent` against the other agents' rows of `policy`,
/// solved by value iteration on the induced single-agent MDP.
pub fn best_response(game: &MarkovGame, policy: &JointPolicy, agent: usize, tol: f64) -> Result<BestResponse> {
    best_response_capped(game, policy, agent, tol, EvalOptions::default().max_sweeps)
}

pub(crate) fn best_response_capped(
    game: &MarkovGame,
    policy: &JointPolicy,
    agent: usize,
    tol: f64,
    max_iters: usize,
) -> Result<BestResponse> {
    if agent >= game.n_agents() {
        return Err(Error::InvalidArgument(format!("no agent {agent}")));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be positive, got {tol}")));
    }
    policy.check_shape(game)?;
    let ns = game.n_states();
    let nj = game.n_joint();
    let na = game.n_actions(agent);
    let space = game.joint();
    let gamma = game.discount();

    // Induced MDP: expected reward and next-state distribution per (s, a_i).
    let mut reward = vec![0.0; ns * na];
    let mut kernel: Vec<Vec<(usize, f64)>> = vec![Vec::new(); ns * na];
    for s in 0..ns {
        let mut dense = vec![vec![0.0; ns]; na];
        for a in 0..nj {
            let w = policy.opponents_prob(game, s, a, agent);
            if w == 0.0 {
                continue;
            }
            let ai = space.action_of(a, agent);
            reward[s * na + ai] += w * game.reward(agent, s, a);
            for &(t, p) in game.transition(s, a) {
                dense[ai][t] += w * p;
            }
        }
        for (ai, row) in dense.into_iter().enumerate() {
            kernel[s * na + ai] = row
                .into_iter()
                .enumerate()
                .filter(|(_, p)| *p > 0.0)
                .collect();
        }
    }

    let greedy = |v: &[f64]| -> (Vec<f64>, Vec<usize>) {
        let mut values = vec![0.0; ns];
        let mut actions = vec![0; ns];
        for s in 0..ns {
            let mut best = f64::NEG_INFINITY;
            for ai in 0..na {
                let q = reward[s * na + ai]
                    + gamma * kernel[s * na + ai].iter().map(|&(t, p)| p * v[t]).sum::<f64>();
                if q > best {
                    best = q;
                    actions[s] = ai;
                }
            }
            values[s] = best;
        }
        (values, actions)
    };

    let mut v = vec![0.0; ns];
    for it in 1..=max_iters {
        let (next, actions) = greedy(&v);
        let res = numeric::sup_distance(&next, &v);
        v = next;
        if res * gamma <= tol {
            return Ok(BestResponse {
                values: v,
                actions,
                iterations: it,
            });
        }
    }
    let (next, _) = greedy(&v);
    Err(Error::Divergence {
        what: "best-response value iteration",
        iterations: max_iters,
        residual: numeric::sup_distance(&next, &v),
    })
}

pub fn best_response_value(game: &MarkovGame, policy: &JointPolicy, agent: usize, tol: f64) -> Result<Vec<f64>> {
    best_response(game, policy, agent, tol).map(|br| br.values)
}

/// Stationary distribution of the chain induced by `policy`.
pub fn stationary_distribution(game: &MarkovGame, policy: &JointPolicy) -> Result<Vec<f64>> {
    let chain = induced_chain(game, policy);
    let ns = game.n_states();
    // ρ (I − P) = 0 with the last equation replaced by Σ ρ = 1.
    let m = DMatrix::from_fn(ns, ns, |r, c| {
        if r == ns - 1 {
            1.0
        } else {
            let id = if r == c { 1.0 } else { 0.0 };
            id - chain[c][r]
        }
    });
    let mut rhs = nalgebra::DVector::zeros(ns);
    rhs[ns - 1] = 1.0;
    let sol = m
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::NonFinite("chain has no unique stationary distribution".into()))?;
    Ok(sol.iter().map(|x| x.max(0.0)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{GameDefinition, RewardBounds, DEFAULT_JOINT_CAP};

    fn pd() -> MarkovGame {
        let row = vec![vec![3.0, 0.0], vec![5.0, 1.0]];
        let col = vec![vec![3.0, 5.0], vec![0.0, 1.0]];
        MarkovGame::bimatrix(&row, &col, 0.0).unwrap()
    }

    /// 2-state, 1-agent, 1-action chain: s0 → s1 → s0 with rewards 1 and 0.
    fn two_state_chain(gamma: f64) -> MarkovGame {
        MarkovGame::new(GameDefinition {
            state_labels: vec!["s0".into(), "s1".into()],
            action_labels: vec![vec!["go".into()]],
            transitions: vec![vec![vec![0.0, 1.0]], vec![vec![1.0, 0.0]]],
            rewards: vec![vec![vec![1.0], vec![0.0]]],
            reward_bounds: RewardBounds { min: 0.0, max: 1.0 },
            discount: gamma,
            initial: vec![1.0, 0.0],
            reward_noise: 0.0,
            joint_cap: DEFAULT_JOINT_CAP,
        })
        .unwrap()
    }

    #[test]
    fn zero_discount_q_is_reward() {
        let g = pd();
        let q = evaluate_joint_q(&g, &JointPolicy::uniform(&g), 1e-12).unwrap();
        for i in 0..2 {
            assert_eq!(q.joint[i], g.reward_table(i));
        }
    }

    #[test]
    fn two_state_chain_closed_form() {
        // V = (I − γP)^{-1} r with P the swap: V0 = 1/(1−γ²), V1 = γ/(1−γ²).
        let gamma = 0.9;
        let g = two_state_chain(gamma);
        let policy = JointPolicy::uniform(&g);
        let v0 = 1.0 / (1.0 - gamma * gamma);
        let v1 = gamma / (1.0 - gamma * gamma);
        for method in [EvalMethod::Sweeps, EvalMethod::LinearSolve] {
            let opts = EvalOptions { method, ..Default::default() };
            let q = evaluate_joint_q_with(&g, &policy, 1e-12, &opts).unwrap();
            // Q(s0) = 1 + γ V1 = V0, Q(s1) = 0 + γ V0 = V1.
            assert!((q.joint[0][0] - v0).abs() < 1e-9, "{method:?}");
            assert!((q.joint[0][1] - v1).abs() < 1e-9, "{method:?}");
        }
    }

    #[test]
    fn residual_meets_tolerance() {
        let g = two_state_chain(0.95);
        let policy = JointPolicy::uniform(&g);
        let opts = EvalOptions { method: EvalMethod::Sweeps, ..Default::default() };
        let q = evaluate_joint_q_with(&g, &policy, 1e-10, &opts).unwrap();
        let next = bellman_sweep(&g, &policy, &q.joint);
        assert!(residual(&next, &q.joint) <= 1e-10);
    }

    #[test]
    fn sweep_cap_reports_divergence() {
        let g = two_state_chain(0.99);
        let opts = EvalOptions { method: EvalMethod::Sweeps, max_sweeps: 3 };
        let err = evaluate_joint_q_with(&g, &JointPolicy::uniform(&g), 1e-12, &opts).unwrap_err();
        assert!(matches!(err, Error::Divergence { iterations: 3, .. }));
    }

    #[test]
    fn soft_value_of_one_hot_equals_plain_value() {
        let g = pd();
        let policy = JointPolicy::pure(&g, &[vec![1], vec![0]]);
        let q = evaluate_joint_q(&g, &policy, 1e-12).unwrap();
        let v = evaluate_soft_value(&g, &policy, &Rationality::homogeneous(2, 0.7), 1e-12).unwrap();
        assert!((v[0][0] - q.marginal[0][0][1]).abs() < 1e-12);
        assert!((v[1][0] - q.marginal[1][0][0]).abs() < 1e-12);
    }

    #[test]
    fn soft_value_pure_entropy_accumulation() {
        // zero rewards, γ = 0.5, |A| = 2, α = 1 → 2 log 2
        let zeros = vec![vec![0.0, 0.0], vec![0.0, 0.0]];
        let g = MarkovGame::bimatrix(&zeros, &zeros, 0.5).unwrap();
        let v = evaluate_soft_value(&g, &JointPolicy::uniform(&g), &Rationality::homogeneous(2, 1.0), 1e-13)
            .unwrap();
        assert!((v[0][0] - 2.0 * 2f64.ln()).abs() < 1e-12);
        // single-state general form: α log|A| / (1 − γ)
        let alpha = 0.25;
        let v = evaluate_soft_value(&g, &JointPolicy::uniform(&g), &Rationality::homogeneous(2, 1.0 / alpha), 1e-13)
            .unwrap();
        assert!((v[1][0] - alpha * 2f64.ln() / 0.5).abs() < 1e-12);
    }

    #[test]
    fn logsumexp_soft_q_at_zero_discount_is_reward() {
        let g = pd();
        let q = evaluate_soft_q(&g, &JointPolicy::uniform(&g), &Rationality::homogeneous(2, 1.0), SoftBootstrap::LogSumExp, 1e-12)
            .unwrap();
        assert_eq!(q.joint[0], g.reward_table(0));
    }

    #[test]
    fn best_response_matching_pennies_is_zero() {
        let row = vec![vec![1.0, -1.0], vec![-1.0, 1.0]];
        let col = vec![vec![-1.0, 1.0], vec![1.0, -1.0]];
        let g = MarkovGame::bimatrix(&row, &col, 0.0).unwrap();
        let v = best_response_value(&g, &JointPolicy::uniform(&g), 0, 1e-12).unwrap();
        assert!(v[0].abs() < 1e-15);
    }

    #[test]
    fn best_response_prisoners_dilemma_against_cooperate() {
        // value iteration on the 1-state MDP: V = 5 + γV → 5/(1−γ)
        for gamma in [0.0, 0.5, 0.9] {
            let row = vec![vec![3.0, 0.0], vec![5.0, 1.0]];
            let col = vec![vec![3.0, 5.0], vec![0.0, 1.0]];
            let g = MarkovGame::bimatrix(&row, &col, gamma).unwrap();
            let policy = JointPolicy::pure(&g, &[vec![0], vec![0]]);
            let br = best_response(&g, &policy, 0, 1e-12).unwrap();
            assert!((br.values[0] - 5.0 / (1.0 - gamma)).abs() < 1e-9);
            assert_eq!(br.actions, vec![1]);
        }
    }

    #[test]
    fn best_response_equals_current_value_under_dominance() {
        let g = pd();
        let policy = JointPolicy::pure(&g, &[vec![1], vec![1]]);
        let q = evaluate_joint_q(&g, &policy, 1e-12).unwrap();
        let v = best_response_value(&g, &policy, 0, 1e-12).unwrap();
        assert_eq!(v[0], q.marginal[0][0][1]);
    }

    #[test]
    fn stationary_distribution_of_swap_chain_is_uniform() {
        let g = two_state_chain(0.5);
        let rho = stationary_distribution(&g, &JointPolicy::uniform(&g)).unwrap();
        assert!((rho[0] - 0.5).abs() < 1e-12 && (rho[1] - 0.5).abs() < 1e-12);
    }
}
