//! Entropy-regularized replicator dynamics: the continuous-time vector field,
//! its log-linear integrator, and the discrete two-timescale actor-critic loop.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::critic::{critic_update_sampled, sample_trajectory, RetraceConfig, Trajectory};
use crate::error::{Error, Result};
use crate::game::{bellman_sweep, evaluate_joint_q, JointPolicy, MarkovGame, QEstimate, Rationality, SIMPLEX_TOL};
use crate::metrics::{kl_to_reference, qre_gap};
use crate::numeric;
use crate::rng::{rng_for, stream};

const EVAL_TOL: f64 = 1e-12;

/// `η_π(k) = c_π k^{-2/3}`, `η_Q(k) = c_Q k^{-1}` for `k ≥ 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoTimescaleSchedule {
    pub c_pi: f64,
    pub c_q: f64,
}

impl TwoTimescaleSchedule {
    pub const EXPONENT_PI: f64 = 2.0 / 3.0;
    pub const EXPONENT_Q: f64 = 1.0;

    pub fn new(c_pi: f64, c_q: f64) -> Result<Self> {
        let s = Self { c_pi, c_q };
        s.validate()?;
        Ok(s)
    }

    /// Both constants must lie in (0, 1] so every step is a valid relaxation.
    pub fn validate(&self) -> Result<()> {
        for (name, c) in [("c_pi", self.c_pi), ("c_q", self.c_q)] {
            if !(c > 0.0 && c <= 1.0) {
                return Err(Error::InvalidArgument(format!("{name} must lie in (0, 1], got {c}")));
            }
        }
        Ok(())
    }

    pub fn eta_pi(&self, k: usize) -> f64 {
        self.c_pi * (k.max(1) as f64).powf(-Self::EXPONENT_PI)
    }

    pub fn eta_q(&self, k: usize) -> f64 {
        self.c_q / k.max(1) as f64
    }

    pub fn ratio(&self, k: usize) -> f64 {
        self.eta_pi(k) / self.eta_q(k)
    }
}

impl Default for TwoTimescaleSchedule {
    fn default() -> Self {
        Self { c_pi: 1.0, c_q: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepSizes {
    TwoTimescale(TwoTimescaleSchedule),
    Constant { eta_pi: f64, eta_q: f64 },
}

impl StepSizes {
    pub fn at(&self, k: usize) -> (f64, f64) {
        match self {
            StepSizes::TwoTimescale(s) => (s.eta_pi(k), s.eta_q(k)),
            StepSizes::Constant { eta_pi, eta_q } => (*eta_pi, *eta_q),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            StepSizes::TwoTimescale(s) => s.validate(),
            StepSizes::Constant { eta_pi, eta_q } => {
                if !(*eta_pi > 0.0 && *eta_pi <= 1.0 && *eta_q > 0.0 && *eta_q <= 1.0) {
                    return Err(Error::InvalidArgument("constant step sizes must lie in (0, 1]".into()));
                }
                Ok(())
            }
        }
    }
}

impl Default for StepSizes {
    fn default() -> Self {
        StepSizes::TwoTimescale(TwoTimescaleSchedule::default())
    }
}

/// Raises α by `factor` once the periodic QRE-gap has failed to decrease on
/// `patience` consecutive checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OscillationMitigation {
    pub patience: usize,
    pub factor: f64,
}

impl Default for OscillationMitigation {
    fn default() -> Self {
        Self { patience: 3, factor: 1.5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemperatureSchedule {
    pub lambda_init: Rationality,
    pub lambda_max: f64,
    pub growth: f64,
    pub check_period: usize,
    pub tol: f64,
    pub mitigation: Option<OscillationMitigation>,
}

impl TemperatureSchedule {
    /// Rationality held at `lambda` for the whole run.
    pub fn fixed(lambda: Rationality) -> Self {
        let max = lambda.lambdas().iter().copied().fold(0.0, f64::max);
        Self {
            lambda_init: lambda,
            lambda_max: max,
            growth: 1.0,
            check_period: 1000,
            tol: 1e-3,
            mitigation: None,
        }
    }

    pub fn adaptive(lambda_init: Rationality, lambda_max: f64, tol: f64) -> Self {
        Self {
            lambda_init,
            lambda_max,
            growth: 1.1,
            check_period: 1000,
            tol,
            mitigation: None,
        }
    }

    pub fn with_mitigation(mut self, m: OscillationMitigation) -> Self {
        self.mitigation = Some(m);
        self
    }

    pub fn validate(&self, n_agents: usize) -> Result<()> {
        if self.lambda_init.len() != n_agents {
            return Err(Error::InvalidArgument(format!(
                "rationality has {} entries for {n_agents} agents",
                self.lambda_init.len()
            )));
        }
        if self.lambda_init.lambdas().iter().any(|&l| !(l > 0.0) || l > self.lambda_max) {
            return Err(Error::InvalidArgument("initial λ must lie in (0, λ_max]".into()));
        }
        if !(self.growth >= 1.0) || self.check_period == 0 || !(self.tol > 0.0) {
            return Err(Error::InvalidArgument("need growth ≥ 1, check period ≥ 1 and tol > 0".into()));
        }
        if let Some(m) = &self.mitigation {
            if m.patience == 0 || !(m.factor > 1.0) {
                return Err(Error::InvalidArgument("mitigation needs patience ≥ 1 and factor > 1".into()));
            }
        }
        Ok(())
    }
}

/// Solver state after iteration `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrdState {
    pub policy: JointPolicy,
    pub q: QEstimate,
    pub k: usize,
    pub rationality: Rationality,
}

impl ErrdState {
    pub fn alpha(&self, agent: usize) -> f64 {
        self.rationality.alpha(agent)
    }
}

/// `dπ/dt = π (Q − ⟨π, Q⟩) + τ (1/|A| − π)` per `(i, s, a)` with `q`'s marginals.
pub fn errd_vector_field(game: &MarkovGame, policy: &JointPolicy, q: &QEstimate, tau: f64) -> Result<Vec<Vec<Vec<f64>>>> {
    policy.check_shape(game)?;
    if !(tau >= 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be nonnegative, got {tau}")));
    }
    Ok((0..game.n_agents())
        .map(|i| {
            (0..game.n_states())
                .map(|s| {
                    let pi = policy.row(i, s);
                    let qr = q.marginal_row(i, s);
                    let avg = numeric::dot(pi, qr);
                    let uniform = 1.0 / pi.len() as f64;
                    pi.iter()
                        .zip(qr)
                        .map(|(p, qa)| p * (qa - avg) + tau * (uniform - p))
                        .collect()
                })
                .collect()
        })
        .collect())
}

/// Integrates the log-linear form `l ← (1 − dt τ) l + dt Q`, followed by
/// exponentiate-and-normalize, from `init`. Joint Q tables are re-evaluated
/// exactly every `q_refresh_every` steps; marginals follow the policy at
/// every step. Returns the states after each multiple of `record_every` and
/// the final one.
pub fn integrate_errd(
    game: &MarkovGame,
    init: &JointPolicy,
    tau: f64,
    dt: f64,
    steps: usize,
    q_refresh_every: usize,
    record_every: usize,
) -> Result<Vec<ErrdState>> {
    init.check_shape(game)?;
    init.validate(SIMPLEX_TOL)?;
    if !(tau > 0.0) || !(dt > 0.0) || q_refresh_every == 0 || record_every == 0 {
        return Err(Error::InvalidArgument(
            "need τ > 0, dt > 0, q_refresh_every ≥ 1 and record_every ≥ 1".into(),
        ));
    }
    let rationality = Rationality::homogeneous(game.n_agents(), 1.0 / tau);
    let mut policy = init.clone();
    let mut logits: Vec<Vec<Vec<f64>>> = (0..game.n_agents())
        .map(|i| {
            policy
                .agent_rows(i)
                .iter()
                .map(|row| row.iter().map(|p| p.ln()).collect())
                .collect()
        })
        .collect();
    let mut q = evaluate_joint_q(game, &policy, EVAL_TOL)?;
    let mut out = Vec::new();
    for step in 1..=steps {
        if step > 1 && (step - 1) % q_refresh_every == 0 {
            q = evaluate_joint_q(game, &policy, EVAL_TOL)?;
        } else {
            q.refresh_marginals(game, &policy);
        }
        for i in 0..game.n_agents() {
            for s in 0..game.n_states() {
                let l = &mut logits[i][s];
                for (x, qa) in l.iter_mut().zip(q.marginal_row(i, s)) {
                    *x = (1.0 - dt * tau) * *x + dt * qa;
                }
                let norm = numeric::log_sum_exp(l);
                if !norm.is_finite() || l.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
                    return Err(Error::StepSize { agent: i, state: s });
                }
                for x in l.iter_mut() {
                    *x -= norm;
                }
                let row = policy.row_mut(i, s);
                for (p, x) in row.iter_mut().zip(l.iter()) {
                    *p = x.exp();
                }
                let sum: f64 = row.iter().sum();
                for p in row.iter_mut() {
                    *p /= sum;
                }
            }
        }
        debug_assert!(policy.is_simplex_valid(SIMPLEX_TOL));
        if step % record_every == 0 || step == steps {
            let mut snapshot = q.clone();
            snapshot.refresh_marginals(game, &policy);
            out.push(ErrdState {
                policy: policy.clone(),
                q: snapshot,
                k: step,
                rationality: rationality.clone(),
            });
        }
    }
    Ok(out)
}

/// Multiplicative-weights row update `π'(a) ∝ π(a) exp(η Q(a)/α)`.
pub fn policy_step_mw(row: &[f64], q_row: &[f64], eta: f64, alpha: f64) -> Result<Vec<f64>> {
    if row.len() != q_row.len() {
        return Err(Error::InvalidArgument("policy and payoff rows differ in length".into()));
    }
    if !(eta > 0.0) || !(alpha > 0.0) || !eta.is_finite() || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!("need finite η > 0 and α > 0, got η={eta}, α={alpha}")));
    }
    let scale = eta / alpha;
    let mut max = f64::NEG_INFINITY;
    for (p, q) in row.iter().zip(q_row) {
        if !q.is_finite() || !p.is_finite() {
            return Err(Error::NonFinite("policy step input".into()));
        }
        if *p > 0.0 {
            max = max.max(*q);
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(Error::NonFinite("policy row has no mass".into()));
    }
    let mut out: Vec<f64> = row
        .iter()
        .zip(q_row)
        .map(|(p, q)| if *p > 0.0 { p * (scale * (q - max)).exp() } else { 0.0 })
        .collect();
    let sum: f64 = out.iter().sum();
    if !(sum > 0.0) || !sum.is_finite() {
        return Err(Error::NonFinite("policy row vanished after the update".into()));
    }
    for p in &mut out {
        *p /= sum;
    }
    Ok(out)
}

/// Multiplicative-weights step on the soft advantage `Q − α log π`, i.e.
/// `π' ∝ π^{1−η} exp(η Q/α)`. Its unique interior rest point is
/// `softmax(Q/α)`; requires `η ≤ 1`.
pub fn soft_policy_step(row: &[f64], q_row: &[f64], eta: f64, alpha: f64) -> Result<Vec<f64>> {
    if eta > 1.0 {
        return Err(Error::InvalidArgument(format!("soft policy step needs η ≤ 1, got {eta}")));
    }
    let adjusted: Vec<f64> = row
        .iter()
        .zip(q_row)
        .map(|(p, q)| if *p > 0.0 { q - alpha * p.ln() } else { 0.0 })
        .collect();
    policy_step_mw(row, &adjusted, eta, alpha)
}

/// `Q ← Q + η_Q (T^π Q − Q)` with the exact policy-evaluation operator.
pub fn critic_step(q: &QEstimate, game: &MarkovGame, policy: &JointPolicy, eta_q: f64) -> Result<QEstimate> {
    if !(eta_q > 0.0 && eta_q <= 1.0) {
        return Err(Error::InvalidArgument(format!("critic step must lie in (0, 1], got {eta_q}")));
    }
    let backed = bellman_sweep(game, policy, &q.joint);
    let mut out = q.clone();
    for (row, t_row) in out.joint.iter_mut().zip(&backed) {
        for (x, t) in row.iter_mut().zip(t_row) {
            *x += eta_q * (t - *x);
        }
    }
    out.refresh_marginals(game, policy);
    Ok(out)
}

/// `max_i ‖T^π Q_i − Q_i‖_∞`.
pub fn bellman_residual(game: &MarkovGame, policy: &JointPolicy, q: &QEstimate) -> f64 {
    bellman_sweep(game, policy, &q.joint)
        .iter()
        .zip(&q.joint)
        .map(|(a, b)| numeric::sup_distance(a, b))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampledCritic {
    /// Fresh trajectories per iteration.
    pub batch: usize,
    pub retrace: RetraceConfig,
    pub tau_target: f64,
    /// Number of past batches (including the current one) replayed per update.
    pub replay: usize,
}

impl Default for SampledCritic {
    fn default() -> Self {
        Self {
            batch: 8,
            retrace: RetraceConfig::default(),
            tau_target: 0.1,
            replay: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum CriticMode {
    /// Full expected Bellman sweeps.
    #[default]
    Exact,
    /// Retrace targets from rollouts of the current policy.
    Sampled(SampledCritic),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvoQreConfig {
    pub steps: StepSizes,
    pub temperature: TemperatureSchedule,
    pub iters: usize,
    pub critic: CriticMode,
    /// Initial policy; uniform when absent.
    pub init: Option<JointPolicy>,
    /// Start the critic at the exact Q of the initial policy instead of zero.
    pub warm_critic: bool,
    /// Reference policy for the KL column of the trace.
    pub oracle: Option<JointPolicy>,
    /// Trace period; the first and last iterations are always recorded.
    pub trace_every: usize,
    /// Stop once the per-row displacement of the actor step is at most this.
    pub stop_displacement: Option<f64>,
}

impl EvoQreConfig {
    pub fn new(temperature: TemperatureSchedule, iters: usize) -> Self {
        Self {
            steps: StepSizes::default(),
            temperature,
            iters,
            critic: CriticMode::Exact,
            init: None,
            warm_critic: true,
            oracle: None,
            trace_every: 1,
            stop_displacement: None,
        }
    }
}

/// One row of the solver trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRecord {
    pub k: usize,
    /// Mean λ over agents.
    pub lambda: f64,
    /// Mean α over agents.
    pub alpha: f64,
    pub eta_pi: f64,
    pub eta_q: f64,
    pub qre_gap: f64,
    pub kl_to_oracle: Option<f64>,
    pub bellman_residual: f64,
    /// Largest L1 change of a policy row in this iteration.
    pub displacement: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapCheck {
    pub k: usize,
    pub gap: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvoQreRun {
    pub state: ErrdState,
    pub trace: Vec<TraceRecord>,
    pub checks: Vec<GapCheck>,
    /// Displacement of the last actor step.
    pub displacement: f64,
    /// QRE-gap of the terminal policy against the terminal critic.
    pub final_gap: f64,
    /// True when the run stopped on the displacement criterion.
    pub stopped_early: bool,
    /// Number of α increases triggered by the mitigation rule.
    pub mitigations: usize,
}

impl EvoQreRun {
    /// Terminal gap within tolerance with every agent at `λ_max`.
    pub fn reached_tolerance(&self, temp: &TemperatureSchedule) -> bool {
        self.final_gap <= temp.tol
            && self
                .state
                .rationality
                .lambdas()
                .iter()
                .all(|&l| (l - temp.lambda_max).abs() <= 1e-12 * temp.lambda_max)
    }
}

/// Runs the coupled critic/actor loop and returns the terminal state with its trace.
pub fn run_evoqre(game: &MarkovGame, cfg: &EvoQreConfig, seed: u64) -> Result<EvoQreRun> {
    let mut trace = Vec::new();
    let mut run = run_evoqre_observed(game, cfg, seed, |r| trace.push(*r))?;
    run.trace = trace;
    Ok(run)
}

/// As [`run_evoqre`], handing each trace record to `observe` as soon as it is
/// produced so a caller can persist the trace even when the run fails.
/// The returned run carries an empty `trace`.
pub fn run_evoqre_observed(
    game: &MarkovGame,
    cfg: &EvoQreConfig,
    seed: u64,
    mut observe: impl FnMut(&TraceRecord),
) -> Result<EvoQreRun> {
    if cfg.iters == 0 {
        return Err(Error::InvalidArgument("need at least one iteration".into()));
    }
    if cfg.trace_every == 0 {
        return Err(Error::InvalidArgument("trace period must be at least 1".into()));
    }
    cfg.steps.validate()?;
    let temp = &cfg.temperature;
    temp.validate(game.n_agents())?;

    let mut policy = match &cfg.init {
        Some(p) => {
            p.check_shape(game)?;
            p.validate(SIMPLEX_TOL)?;
            p.clone()
        }
        None => JointPolicy::uniform(game),
    };
    if let Some(o) = &cfg.oracle {
        o.check_shape(game)?;
    }
    let mut rationality = temp.lambda_init.clone();
    let mut q = if cfg.warm_critic {
        evaluate_joint_q(game, &policy, EVAL_TOL)?
    } else {
        QEstimate::zeros(game)
    };

    let mut rng = rng_for(seed, stream::ROLLOUT);
    let mut replay: VecDeque<Vec<Trajectory>> = VecDeque::new();
    if let CriticMode::Sampled(sc) = &cfg.critic {
        if sc.batch == 0 || sc.replay == 0 {
            return Err(Error::InvalidArgument("sampled critic needs batch ≥ 1 and replay ≥ 1".into()));
        }
        sc.retrace.validate()?;
        q = q.with_target(sc.tau_target)?;
    }

    let mut checks = Vec::new();
    let mut plateau = 0usize;
    let mut mitigations = 0usize;
    let mut displacement = 0.0;
    let mut stopped_early = false;
    let mut k_done = 0;

    for k in 1..=cfg.iters {
        let (eta_pi, eta_q) = cfg.steps.at(k);

        q = match &cfg.critic {
            CriticMode::Exact => critic_step(&q, game, &policy, eta_q)?,
            CriticMode::Sampled(sc) => {
                let fresh = (0..sc.batch)
                    .map(|_| sample_trajectory(game, &policy, sc.retrace.horizon, &mut rng, None))
                    .collect::<Result<Vec<_>>>()?;
                replay.push_back(fresh);
                while replay.len() > sc.replay {
                    replay.pop_front();
                }
                let batch: Vec<Trajectory> = replay.iter().flatten().cloned().collect();
                critic_update_sampled(game, &q, &batch, &policy, &rationality, &sc.retrace, eta_q)?
            }
        };

        let mut next = policy.clone();
        displacement = 0.0;
        for i in 0..game.n_agents() {
            let alpha = rationality.alpha(i);
            for s in 0..game.n_states() {
                let row = soft_policy_step(policy.row(i, s), q.marginal_row(i, s), eta_pi, alpha).map_err(|e| match e {
                    Error::NonFinite(_) => Error::StepSize { agent: i, state: s },
                    other => other,
                })?;
                displacement = f64::max(displacement, numeric::l1_distance(&row, policy.row(i, s)));
                next.row_mut(i, s).copy_from_slice(&row);
            }
        }
        policy = next;
        debug_assert!(
            policy.is_simplex_valid(SIMPLEX_TOL),
            "policy row left the simplex at iteration {k}: {:?}",
            policy.first_invalid_row(SIMPLEX_TOL)
        );
        q.refresh_marginals(game, &policy);
        k_done = k;

        let stop = cfg.stop_displacement.is_some_and(|eps| displacement <= eps);
        if k % cfg.trace_every == 0 || k == 1 || k == cfg.iters || stop {
            let record = TraceRecord {
                k,
                lambda: rationality.mean(),
                alpha: rationality.lambdas().iter().map(|l| 1.0 / l).sum::<f64>() / rationality.len() as f64,
                eta_pi,
                eta_q,
                qre_gap: qre_gap(&policy, &rationality, &q)?,
                kl_to_oracle: match &cfg.oracle {
                    Some(o) => Some(kl_to_reference(&policy, o, None)?),
                    None => None,
                },
                bellman_residual: bellman_residual(game, &policy, &q),
                displacement,
            };
            observe(&record);
        }

        if k % temp.check_period == 0 && k < cfg.iters {
            let gap = qre_gap(&policy, &rationality, &q)?;
            let improved = gap < temp.tol || checks.last().is_none_or(|c: &GapCheck| gap < c.gap);
            checks.push(GapCheck {
                k,
                gap,
                lambda: rationality.mean(),
            });
            if gap < temp.tol {
                rationality = rationality.map(|l| (l * temp.growth).min(temp.lambda_max));
            }
            if let Some(m) = &temp.mitigation {
                plateau = if improved { 0 } else { plateau + 1 };
                if plateau >= m.patience {
                    rationality = rationality.map(|l| l / m.factor);
                    mitigations += 1;
                    plateau = 0;
                }
            }
        }

        if stop {
            stopped_early = true;
            break;
        }
    }

    let final_gap = qre_gap(&policy, &rationality, &q)?;
    Ok(EvoQreRun {
        state: ErrdState {
            policy,
            q,
            k: k_done,
            rationality,
        },
        trace: Vec::new(),
        checks,
        displacement,
        final_gap,
        stopped_early,
        mitigations,
    })
}
