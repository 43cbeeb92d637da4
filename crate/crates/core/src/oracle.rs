//! Reference solvers for logit QRE and pure Nash equilibria on small games.
//!
//! The damped fixed-point iteration `π ← (1 − θ)π + θ·B_λ(π)` is used as the
//! ground truth for the dynamics. Equilibria need not be unique; results
//! report whichever fixed point the iteration reaches, and
//! [`trace_qre_homotopy`] follows the branch that starts at the uniform
//! λ = 0 solution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{evaluate_joint_q, JointPolicy, MarkovGame, Rationality, DEFAULT_JOINT_CAP};
use crate::numeric;

/// Tolerance used when comparing Q values for pure Nash deviations.
pub const NASH_TIE_TOL: f64 = 1e-12;

const STALL_WINDOW: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogitBrConfig {
    /// Initial damping θ ∈ (0, 1].
    pub damping: f64,
    /// When the residual exceeds twice the best one seen, or no new best has
    /// appeared for `STALL_WINDOW` iterations, halve θ (down to `min_damping`)
    /// and restart from the best iterate.
    pub adaptive: bool,
    pub min_damping: f64,
    pub max_iters: usize,
    pub tol: f64,
    /// Tolerance for the inner policy evaluations.
    pub eval_tol: f64,
}

impl Default for LogitBrConfig {
    fn default() -> Self {
        Self {
            damping: 0.5,
            adaptive: true,
            min_damping: 1e-4,
            max_iters: 100_000,
            tol: 1e-10,
            eval_tol: 1e-13,
        }
    }
}

impl LogitBrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "damping must lie in (0, 1], got {}",
                self.damping
            )));
        }
        if self.adaptive && !(self.min_damping > 0.0 && self.min_damping <= self.damping) {
            return Err(Error::InvalidArgument("min_damping must lie in (0, damping]".into()));
        }
        if !(self.tol > 0.0 && self.eval_tol > 0.0) {
            return Err(Error::InvalidArgument("tolerances must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QreSolution {
    pub policy: JointPolicy,
    /// `‖π − B_λ(π)‖_∞` at the returned policy.
    pub residual: f64,
    pub iterations: usize,
    pub rationality: Rationality,
}

impl QreSolution {
    pub fn lambda(&self) -> f64 {
        self.rationality.mean()
    }
}

/// `B_λ(π)`: every row replaced by `softmax(λ_i Q_i^π(s, ·))`.
pub fn logit_best_response(
    game: &MarkovGame,
    policy: &JointPolicy,
    rationality: &Rationality,
    eval_tol: f64,
) -> Result<JointPolicy> {
    check_rationality(game, rationality)?;
    let q = evaluate_joint_q(game, policy, eval_tol)?;
    let mut out = policy.clone();
    for i in 0..game.n_agents() {
        for s in 0..game.n_states() {
            numeric::softmax_scaled_into(q.marginal_row(i, s), rationality.lambda(i), out.row_mut(i, s));
        }
    }
    Ok(out)
}

fn check_rationality(game: &MarkovGame, rationality: &Rationality) -> Result<()> {
    if rationality.len() != game.n_agents() {
        return Err(Error::InvalidArgument(format!(
            "rationality has {} entries for {} agents",
            rationality.len(),
            game.n_agents()
        )));
    }
    if rationality.lambdas().iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
        return Err(Error::InvalidArgument("rationality must be finite and nonnegative".into()));
    }
    Ok(())
}

fn sup_row_distance(a: &JointPolicy, b: &JointPolicy) -> f64 {
    a.rows()
        .map(|(i, s, row)| numeric::sup_distance(row, b.row(i, s)))
        .fold(0.0, f64::max)
}

/// Sup-norm fixed-point residual `‖π − B_λ(π)‖_∞`.
pub fn qre_residual(game: &MarkovGame, policy: &JointPolicy, rationality: &Rationality, eval_tol: f64) -> Result<f64> {
    let br = logit_best_response(game, policy, rationality, eval_tol)?;
    Ok(sup_row_distance(policy, &br))
}

/// Damped logit best-response iteration from `init` (uniform when `None`).
///
/// On hitting `max_iters` the error carries the last iterate and residual.
pub fn solve_qre_fixed_point(
    game: &MarkovGame,
    rationality: &Rationality,
    config: &LogitBrConfig,
    init: Option<&JointPolicy>,
) -> Result<QreSolution> {
    config.validate()?;
    check_rationality(game, rationality)?;
    let mut policy = match init {
        Some(p) => {
            p.check_shape(game)?;
            p.validate(crate::game::SIMPLEX_TOL)?;
            p.clone()
        }
        None => JointPolicy::uniform(game),
    };
    let mut theta = config.damping;
    let mut residual = f64::INFINITY;
    let mut best: Option<(f64, JointPolicy)> = None;
    let mut since_best = 0usize;
    for it in 1..=config.max_iters {
        let br = logit_best_response(game, &policy, rationality, config.eval_tol)?;
        residual = sup_row_distance(&policy, &br);
        if config.adaptive {
            match &best {
                Some((r, p))
                    if (residual > 2.0 * r || since_best >= STALL_WINDOW) && theta > config.min_damping =>
                {
                    theta = (0.5 * theta).max(config.min_damping);
                    policy = p.clone();
                    since_best = 0;
                    continue;
                }
                Some((r, _)) if residual >= *r => since_best += 1,
                _ => {
                    best = Some((residual, policy.clone()));
                    since_best = 0;
                }
            }
        }
        if residual <= config.tol {
            return Ok(QreSolution {
                policy,
                residual,
                iterations: it,
                rationality: rationality.clone(),
            });
        }
        policy = policy.mix(&br, theta);
        debug_assert!(policy.is_simplex_valid(crate::game::SIMPLEX_TOL));
    }
    Err(Error::QreNotConverged {
        lambda: rationality.mean(),
        iterations: config.max_iters,
        residual,
        partial: Box::new(QreSolution {
            policy,
            residual,
            iterations: config.max_iters,
            rationality: rationality.clone(),
        }),
    })
}

/// Result of a homotopy trace; `failure` is set when a grid point failed and
/// the trace was cut short.
#[derive(Debug)]
pub struct HomotopyTrace {
    pub solutions: Vec<QreSolution>,
    pub failure: Option<Error>,
}

impl HomotopyTrace {
    pub fn into_result(self) -> Result<Vec<QreSolution>> {
        match self.failure {
            None => Ok(self.solutions),
            Some(e) => Err(e),
        }
    }
}

/// Solves along an ascending λ grid, warm-starting each point from the previous one.
pub fn trace_qre_homotopy(game: &MarkovGame, lambda_grid: &[f64], config: &LogitBrConfig) -> HomotopyTrace {
    trace_qre_homotopy_with(game, lambda_grid, config, |l| Rationality::homogeneous(game.n_agents(), l))
}

/// Homotopy over a scalar grid mapped to per-agent rationality by `to_rationality`.
pub fn trace_qre_homotopy_with(
    game: &MarkovGame,
    lambda_grid: &[f64],
    config: &LogitBrConfig,
    to_rationality: impl Fn(f64) -> Rationality,
) -> HomotopyTrace {
    let mut solutions: Vec<QreSolution> = Vec::with_capacity(lambda_grid.len());
    if lambda_grid.windows(2).any(|w| w[1] < w[0]) {
        return HomotopyTrace {
            solutions,
            failure: Some(Error::InvalidArgument("lambda grid must be ascending".into())),
        };
    }
    for &lambda in lambda_grid {
        let init = solutions.last().map(|s| &s.policy);
        match solve_qre_fixed_point(game, &to_rationality(lambda), config, init) {
            Ok(sol) => solutions.push(sol),
            Err(e) => {
                return HomotopyTrace {
                    solutions,
                    failure: Some(Error::AtLambda {
                        lambda,
                        source: Box::new(e),
                    }),
                }
            }
        }
    }
    HomotopyTrace {
        solutions,
        failure: None,
    }
}

/// Deterministic stationary joint policy: `actions[i][s]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PureProfile {
    pub actions: Vec<Vec<usize>>,
}

impl PureProfile {
    pub fn to_policy(&self, game: &MarkovGame) -> JointPolicy {
        JointPolicy::pure(game, &self.actions)
    }
}

/// All deterministic stationary profiles from which no agent has a strictly
/// improving unilateral deviation.
pub fn nash_pure_enumeration(game: &MarkovGame) -> Result<Vec<PureProfile>> {
    nash_pure_enumeration_capped(game, DEFAULT_JOINT_CAP)
}

pub fn nash_pure_enumeration_capped(game: &MarkovGame, cap: usize) -> Result<Vec<PureProfile>> {
    let ns = game.n_states();
    // one "digit" per (agent, state)
    let digits: Vec<usize> = (0..game.n_agents())
        .flat_map(|i| std::iter::repeat_n(game.n_actions(i), ns))
        .collect();
    let count: u128 = digits.iter().map(|&d| d as u128).product();
    if count > cap as u128 {
        return Err(Error::JointActionCap { count, cap });
    }
    let mut found = Vec::new();
    let mut cursor = vec![0usize; digits.len()];
    loop {
        let actions: Vec<Vec<usize>> = cursor.chunks(ns).map(<[usize]>::to_vec).collect();
        let profile = PureProfile { actions };
        if is_pure_nash(game, &profile)? {
            found.push(profile);
        }
        // odometer increment, last digit fastest
        let mut k = digits.len();
        loop {
            if k == 0 {
                return Ok(found);
            }
            k -= 1;
            cursor[k] += 1;
            if cursor[k] < digits[k] {
                break;
            }
            cursor[k] = 0;
        }
    }
}

pub fn is_pure_nash(game: &MarkovGame, profile: &PureProfile) -> Result<bool> {
    let policy = profile.to_policy(game);
    let q = evaluate_joint_q(game, &policy, 1e-13)?;
    for i in 0..game.n_agents() {
        for s in 0..game.n_states() {
            let row = q.marginal_row(i, s);
            let current = row[profile.actions[i][s]];
            if row.iter().any(|&v| v > current + NASH_TIE_TOL) {
                return Ok(false);
            }
        }
    }
    Ok(true)
}
