//! Equilibrium diagnostics: QRE-gap, exploitability, the empirical
//! monotonicity residual, KL tracking and a few numerical checks of the
//! continuity constants used in the convergence analysis.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{
    best_response_capped, evaluate_joint_q, induced_chain, stationary_distribution, JointPolicy, MarkovGame,
    QEstimate, Rationality, EvalOptions,
};
use crate::numeric;
use crate::rng::{rng_for, stream};

const EVAL_TOL: f64 = 1e-12;

fn check_alpha(rationality: &Rationality, n_agents: usize) -> Result<()> {
    if rationality.len() != n_agents {
        return Err(Error::InvalidArgument(format!(
            "rationality has {} entries for {n_agents} agents",
            rationality.len()
        )));
    }
    Ok(())
}

fn gap_with(
    policy: &JointPolicy,
    rationality: &Rationality,
    q: &QEstimate,
    kl: impl Fn(&[f64], &[f64]) -> f64,
) -> Result<f64> {
    check_alpha(rationality, policy.n_agents())?;
    let mut total = 0.0;
    let mut count = 0usize;
    let mut soft = Vec::new();
    for (i, s, row) in policy.rows() {
        let lambda = rationality.lambda(i);
        soft.resize(row.len(), 0.0);
        numeric::softmax_scaled_into(q.marginal_row(i, s), lambda, &mut soft);
        total += kl(row, &soft);
        count += 1;
    }
    Ok(total / count as f64)
}

/// `(1 / (N|S|)) Σ_{i,s} KL(π_i(·|s) ‖ softmax(Q_i(s, ·)/α_i))` with `q`'s marginals.
pub fn qre_gap(policy: &JointPolicy, rationality: &Rationality, q: &QEstimate) -> Result<f64> {
    gap_with(policy, rationality, q, numeric::kl_divergence)
}

/// Same average with the divergence reversed: `KL(softmax(Q/α) ‖ π)`.
pub fn qre_gap_reverse(policy: &JointPolicy, rationality: &Rationality, q: &QEstimate) -> Result<f64> {
    gap_with(policy, rationality, q, |p, s| numeric::kl_divergence(s, p))
}

/// QRE-gap against the exact Q of `policy`.
pub fn exact_qre_gap(game: &MarkovGame, policy: &JointPolicy, rationality: &Rationality) -> Result<f64> {
    let q = evaluate_joint_q(game, policy, EVAL_TOL)?;
    qre_gap(policy, rationality, &q)
}

/// Weighted average over agents and states of `KL(reference ‖ policy)`;
/// `weights` over states default to uniform.
pub fn kl_to_reference(policy: &JointPolicy, reference: &JointPolicy, weights: Option<&[f64]>) -> Result<f64> {
    if policy.n_agents() != reference.n_agents() || policy.n_states() != reference.n_states() {
        return Err(Error::InvalidPolicy("reference shape differs from policy".into()));
    }
    let ns = policy.n_states();
    let uniform;
    let w = match weights {
        Some(w) if w.len() == ns => w,
        Some(w) => {
            return Err(Error::InvalidArgument(format!("{} state weights for {ns} states", w.len())));
        }
        None => {
            uniform = vec![1.0 / ns as f64; ns];
            &uniform
        }
    };
    let wsum: f64 = w.iter().sum();
    if !(wsum > 0.0) || w.iter().any(|x| *x < 0.0) {
        return Err(Error::InvalidArgument("state weights must be nonnegative with positive sum".into()));
    }
    let mut total = 0.0;
    for i in 0..policy.n_agents() {
        for s in 0..ns {
            if w[s] == 0.0 {
                continue;
            }
            let kl = numeric::kl_divergence(reference.row(i, s), policy.row(i, s));
            if kl.is_infinite() {
                return Ok(f64::INFINITY);
            }
            total += w[s] * kl;
        }
    }
    Ok(total / (wsum * policy.n_agents() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleTier {
    /// Exact value iteration at the configured tolerance.
    QuickVi,
    /// Cross-entropy search over stochastic policy tables, each scored exactly.
    Cem,
    /// Value iteration with a tighter tolerance and a larger iteration cap.
    Extended,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CemConfig {
    pub population: usize,
    pub elite_fraction: f64,
    pub iterations: usize,
    pub initial_std: f64,
    pub seed: u64,
}

impl Default for CemConfig {
    fn default() -> Self {
        Self {
            population: 64,
            elite_fraction: 0.125,
            iterations: 40,
            initial_std: 3.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExploitabilityConfig {
    pub tier: OracleTier,
    pub tol: f64,
    pub max_iters: usize,
    pub cem: CemConfig,
}

impl Default for ExploitabilityConfig {
    fn default() -> Self {
        Self {
            tier: OracleTier::QuickVi,
            tol: 1e-10,
            max_iters: EvalOptions::default().max_sweeps,
            cem: CemConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Exploitability {
    /// `(1/N) Σ_i gain_i`.
    pub total: f64,
    /// `V_i^{BR_i, π_-i} − V_i^π` under the initial distribution.
    pub per_agent: Vec<f64>,
}

fn initial_value(game: &MarkovGame, policy: &JointPolicy, joint_q: &[f64]) -> f64 {
    let nj = game.n_joint();
    (0..game.n_states())
        .map(|s| {
            let rho = game.initial()[s];
            if rho == 0.0 {
                return 0.0;
            }
            let v: f64 = (0..nj).map(|a| policy.joint_prob(game, s, a) * joint_q[s * nj + a]).sum();
            rho * v
        })
        .sum()
}

fn policy_value(game: &MarkovGame, policy: &JointPolicy, agent: usize) -> Result<f64> {
    let q = evaluate_joint_q(game, policy, EVAL_TOL)?;
    Ok(initial_value(game, policy, &q.joint[agent]))
}

fn cem_best_value(game: &MarkovGame, policy: &JointPolicy, agent: usize, cfg: &CemConfig, baseline: f64) -> Result<f64> {
    if cfg.population < 2 || !(cfg.elite_fraction > 0.0 && cfg.elite_fraction <= 1.0) {
        return Err(Error::InvalidArgument("CEM needs population ≥ 2 and elite fraction in (0, 1]".into()));
    }
    let ns = game.n_states();
    let na = game.n_actions(agent);
    let dim = ns * na;
    let mut rng = rng_for(cfg.seed.wrapping_add(agent as u64), stream::METRICS);
    let mut mean = vec![0.0; dim];
    let mut std = vec![cfg.initial_std; dim];
    let n_elite = ((cfg.population as f64 * cfg.elite_fraction).ceil() as usize).max(1);
    let mut best = baseline;
    let mut candidate = policy.clone();
    for _ in 0..cfg.iterations {
        let mut scored: Vec<(f64, Vec<f64>)> = Vec::with_capacity(cfg.population);
        for _ in 0..cfg.population {
            let theta: Vec<f64> = (0..dim)
                .map(|k| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    mean[k] + std[k] * z
                })
                .collect();
            for s in 0..ns {
                let row = numeric::softmax_scaled(&theta[s * na..(s + 1) * na], 1.0);
                candidate.row_mut(agent, s).copy_from_slice(&row);
            }
            let v = policy_value(game, &candidate, agent)?;
            best = best.max(v);
            scored.push((v, theta));
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        for k in 0..dim {
            let m = scored[..n_elite].iter().map(|(_, t)| t[k]).sum::<f64>() / n_elite as f64;
            let var = scored[..n_elite].iter().map(|(_, t)| (t[k] - m).powi(2)).sum::<f64>() / n_elite as f64;
            mean[k] = m;
            std[k] = var.sqrt().max(1e-3);
        }
    }
    Ok(best)
}

/// Average unilateral gain from a best-response deviation, evaluated under the
/// game's initial distribution.
pub fn exploitability(game: &MarkovGame, policy: &JointPolicy, cfg: &ExploitabilityConfig) -> Result<Exploitability> {
    policy.check_shape(game)?;
    let q = evaluate_joint_q(game, policy, EVAL_TOL)?;
    let mut per_agent = Vec::with_capacity(game.n_agents());
    for i in 0..game.n_agents() {
        let current = initial_value(game, policy, &q.joint[i]);
        let best = match cfg.tier {
            OracleTier::QuickVi | OracleTier::Extended => {
                let (tol, cap) = if cfg.tier == OracleTier::Extended {
                    (cfg.tol * 1e-3, cfg.max_iters.saturating_mul(10))
                } else {
                    (cfg.tol, cfg.max_iters)
                };
                let br = best_response_capped(game, policy, i, tol.max(f64::MIN_POSITIVE), cap)?;
                numeric::dot(game.initial(), &br.values)
            }
            OracleTier::Cem => cem_best_value(game, policy, i, &cfg.cem, current)?,
        };
        per_agent.push((best - current).max(0.0));
    }
    let total = per_agent.iter().sum::<f64>() / per_agent.len() as f64;
    Ok(Exploitability { total, per_agent })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceDistribution {
    /// Stationary visitation of the chain induced by the current policy.
    #[default]
    Visitation,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonotonicityConfig {
    pub pairs: usize,
    /// TV radius of the ball around the current iterate.
    pub radius: f64,
    pub reference: ReferenceDistribution,
    pub seed: u64,
}

impl Default for MonotonicityConfig {
    fn default() -> Self {
        Self {
            pairs: 100,
            radius: 0.1,
            reference: ReferenceDistribution::Visitation,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonotonicityResidual {
    /// `max_pairs max{0, −LHS} / ‖π − π'‖_TV²`.
    pub normalized: f64,
    /// `max_pairs max{0, −LHS}`.
    pub unnormalized: f64,
    pub pairs_used: usize,
}

fn random_simplex<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    // uniform on the simplex via normalized exponentials
    let e: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Policy drawn from the TV ball of `radius` around `center`: every row is
/// `(1 − w) center + w u` with `u` random and `w ~ U[0, radius]`.
pub fn sample_nearby_policy<R: Rng + ?Sized>(center: &JointPolicy, radius: f64, rng: &mut R) -> JointPolicy {
    let mut out = center.clone();
    let w = radius * rng.random::<f64>();
    for i in 0..center.n_agents() {
        for s in 0..center.n_states() {
            let row = out.row_mut(i, s);
            let u = random_simplex(row.len(), rng);
            for (p, x) in row.iter_mut().zip(u) {
                *p = (1.0 - w) * *p + w * x;
            }
        }
    }
    out
}

/// `Σ_i E_{s∼ρ} ⟨Q_i^π(s,·) − Q_i^{π'}(s,·), π_i(·|s) − π'_i(·|s)⟩` with exact marginal Q tables.
pub fn monotonicity_lhs(game: &MarkovGame, a: &JointPolicy, b: &JointPolicy, rho: &[f64]) -> Result<f64> {
    let qa = evaluate_joint_q(game, a, EVAL_TOL)?;
    let qb = evaluate_joint_q(game, b, EVAL_TOL)?;
    let mut lhs = 0.0;
    for i in 0..game.n_agents() {
        for (s, &w) in rho.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let inner: f64 = qa
                .marginal_row(i, s)
                .iter()
                .zip(qb.marginal_row(i, s))
                .zip(a.row(i, s).iter().zip(b.row(i, s)))
                .map(|((x, y), (p, q))| (x - y) * (p - q))
                .sum();
            lhs += w * inner;
        }
    }
    Ok(lhs)
}

/// Empirical monotonicity residual over random policy pairs near `policy`.
pub fn monotonicity_residual(game: &MarkovGame, policy: &JointPolicy, cfg: &MonotonicityConfig) -> Result<MonotonicityResidual> {
    policy.check_shape(game)?;
    let rho = match cfg.reference {
        ReferenceDistribution::Visitation => stationary_distribution(game, policy)?,
        ReferenceDistribution::Uniform => vec![1.0 / game.n_states() as f64; game.n_states()],
    };
    let mut rng = rng_for(cfg.seed, stream::METRICS);
    let mut out = MonotonicityResidual {
        normalized: 0.0,
        unnormalized: 0.0,
        pairs_used: 0,
    };
    for _ in 0..cfg.pairs {
        let a = sample_nearby_policy(policy, cfg.radius, &mut rng);
        let b = sample_nearby_policy(policy, cfg.radius, &mut rng);
        let dist = a.joint_tv(&b);
        if dist == 0.0 {
            continue;
        }
        let lhs = monotonicity_lhs(game, &a, &b, &rho)?;
        let violation = (-lhs).max(0.0);
        out.unnormalized = out.unnormalized.max(violation);
        out.normalized = out.normalized.max(violation / (dist * dist));
        out.pairs_used += 1;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzCheck {
    /// `max ‖σ(Q) − σ(Q')‖_1 / ((2/α)‖Q − Q'‖_∞)`.
    pub l1_ratio: f64,
    /// `max KL(σ(Q) ‖ σ(Q')) / ((|A|/α²)‖Q − Q'‖_∞²)`.
    pub kl_ratio: f64,
    pub l1_violations: usize,
    pub kl_violations: usize,
    pub skipped: usize,
}

/// Samples Q pairs uniformly from `[-q_range, q_range]^n_actions` and
/// measures both softmax continuity ratios at temperature `alpha`.
pub fn softmax_lipschitz_check(samples: usize, n_actions: usize, alpha: f64, q_range: f64, seed: u64) -> Result<LipschitzCheck> {
    if !(alpha > 0.0) || n_actions == 0 || !(q_range > 0.0) {
        return Err(Error::InvalidArgument("need α > 0, at least one action and a positive range".into()));
    }
    let mut rng = rng_for(seed, stream::METRICS);
    let mut out = LipschitzCheck {
        l1_ratio: 0.0,
        kl_ratio: 0.0,
        l1_violations: 0,
        kl_violations: 0,
        skipped: 0,
    };
    let scale = 1.0 / alpha;
    for k in 0..samples {
        let q: Vec<f64> = (0..n_actions).map(|_| rng.random_range(-q_range..=q_range)).collect();
        // mix large and small perturbations so both regimes are exercised
        let radius = if k % 2 == 0 { q_range } else { q_range * 1e-3 };
        let q2: Vec<f64> = q.iter().map(|x| x + rng.random_range(-radius..=radius)).collect();
        let d = numeric::sup_distance(&q, &q2);
        if d == 0.0 {
            out.skipped += 1;
            continue;
        }
        let p = numeric::softmax_scaled(&q, scale);
        let p2 = numeric::softmax_scaled(&q2, scale);
        let l1 = numeric::l1_distance(&p, &p2) / (2.0 / alpha * d);
        let kl = numeric::kl_divergence(&p, &p2) / (n_actions as f64 / (alpha * alpha) * d * d);
        if l1 > 1.0 {
            out.l1_violations += 1;
        }
        if kl > 1.0 {
            out.kl_violations += 1;
        }
        out.l1_ratio = out.l1_ratio.max(l1);
        out.kl_ratio = out.kl_ratio.max(kl);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixingConstants {
    pub c_erg: f64,
    pub rho_mix: f64,
    /// `Σ_{t ≥ 0} d̄(t)`, truncated once `d̄` drops below 1e-15.
    pub sum_tv: f64,
}

fn chain_tv_coefficient(m: &[Vec<f64>]) -> f64 {
    let n = m.len();
    let mut worst: f64 = 0.0;
    for a in 0..n {
        for b in (a + 1)..n {
            worst = worst.max(numeric::total_variation(&m[a], &m[b]));
        }
    }
    worst
}

fn mat_mul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut out = vec![vec![0.0; n]; n];
    for (i, row) in a.iter().enumerate() {
        for (k, &x) in row.iter().enumerate() {
            if x != 0.0 {
                for j in 0..n {
                    out[i][j] += x * b[k][j];
                }
            }
        }
    }
    out
}

/// Mixing constants of a state kernel from `d̄(t) = max_{s,s'} TV(P^t(s,·), P^t(s',·))`:
/// `C_erg = 1` and `ρ_mix = max_{t≥1} d̄(t)^{1/t}`, so that `d̄(t) ≤ C_erg ρ_mix^t`.
pub fn mixing_constants(chain: &[Vec<f64>], max_t: usize) -> Result<MixingConstants> {
    let mut power = chain.to_vec();
    let mut rho: f64 = 0.0;
    let mut sum = 1.0;
    for t in 1..=max_t {
        let d = chain_tv_coefficient(&power);
        // below ~1e-8 the rounding error in d̄ dominates its t-th root
        if d >= 1e-8 {
            rho = rho.max(d.powf(1.0 / t as f64));
        }
        sum += d;
        if d < 1e-15 {
            break;
        }
        power = mat_mul(&power, chain);
    }
    if rho >= 1.0 {
        return Err(Error::InvalidGame("induced chain is not uniformly ergodic".into()));
    }
    Ok(MixingConstants {
        c_erg: 1.0,
        rho_mix: rho,
        sum_tv: sum,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StationaryLipschitz {
    /// `max ‖ρ^π − ρ^{π'}‖_TV / ‖π − π'‖_TV` over the sampled pairs.
    pub max_ratio: f64,
    /// `C_erg / (1 − ρ_mix)` measured at the center policy's chain.
    pub bound: f64,
    pub violations: usize,
}

/// Measures how fast the stationary distribution moves with the policy. The
/// bound uses the worst mixing constants over the center and every sampled
/// policy, because the perturbation series runs on the chain of either endpoint.
pub fn stationary_lipschitz_check(game: &MarkovGame, center: &JointPolicy, pairs: usize, radius: f64, seed: u64) -> Result<StationaryLipschitz> {
    let mut rng = rng_for(seed, stream::METRICS);
    let base = mixing_constants(&induced_chain(game, center), 10_000)?;
    let mut out = StationaryLipschitz {
        max_ratio: 0.0,
        bound: base.c_erg / (1.0 - base.rho_mix),
        violations: 0,
    };
    for _ in 0..pairs {
        let a = sample_nearby_policy(center, radius, &mut rng);
        let b = sample_nearby_policy(center, radius, &mut rng);
        let dist = a.joint_tv(&b);
        if dist == 0.0 {
            continue;
        }
        let ra = stationary_distribution(game, &a)?;
        let rb = stationary_distribution(game, &b)?;
        let ratio = numeric::total_variation(&ra, &rb) / dist;
        let mix = mixing_constants(&induced_chain(game, &a), 10_000)?;
        let bound = mix.c_erg / (1.0 - mix.rho_mix);
        if ratio > bound {
            out.violations += 1;
        }
        out.bound = out.bound.max(bound);
        out.max_ratio = out.max_ratio.max(ratio);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackingConfig {
    pub n_actions: usize,
    pub alpha: f64,
    pub c_pi: f64,
    /// Drift magnitude: `Q_{k+1} = Q_k + (Δ_Q / k) u_k` with `u_k` uniform in `[-1, 1]^A`.
    pub drift: f64,
    pub iters: usize,
    pub seed: u64,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        Self {
            n_actions: 3,
            alpha: 1.0,
            c_pi: 0.5,
            drift: 1.0,
            iters: 100_000,
            seed: 0,
        }
    }
}

/// Errors `‖π_k − softmax(Q_k/α)‖_1` of the entropy-regularized MW actor
/// following a drifting payoff row, one entry per `k = 1..=iters`.
pub fn policy_tracking_trace(cfg: &TrackingConfig) -> Result<Vec<f64>> {
    if cfg.n_actions < 2 || !(cfg.alpha > 0.0) || !(cfg.c_pi > 0.0 && cfg.c_pi <= 1.0) {
        return Err(Error::InvalidArgument("tracking needs ≥ 2 actions, α > 0 and c_π in (0, 1]".into()));
    }
    let mut rng = rng_for(cfg.seed, stream::METRICS);
    let unit = Normal::new(0.0, 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut q: Vec<f64> = (0..cfg.n_actions).map(|_| unit.sample(&mut rng)).collect();
    let mut pi = vec![1.0 / cfg.n_actions as f64; cfg.n_actions];
    let mut errors = Vec::with_capacity(cfg.iters);
    for k in 1..=cfg.iters {
        let eta = cfg.c_pi * (k as f64).powf(-2.0 / 3.0);
        pi = crate::dynamics::soft_policy_step(&pi, &q, eta, cfg.alpha)?;
        for x in &mut q {
            *x += cfg.drift / k as f64 * rng.random_range(-1.0..=1.0);
        }
        let target = numeric::softmax_scaled(&q, 1.0 / cfg.alpha);
        errors.push(numeric::l1_distance(&pi, &target));
    }
    Ok(errors)
}

/// Smallest `c` with `err_k ≤ c log k · k^{-1/3}` over `k ∈ [lo, hi]` (1-based).
pub fn fit_tracking_constant(errors: &[f64], lo: usize, hi: usize) -> f64 {
    (lo.max(2)..=hi.min(errors.len()))
        .map(|k| errors[k - 1] / ((k as f64).ln() * (k as f64).powf(-1.0 / 3.0)))
        .fold(0.0, f64::max)
}

/// One row of the diagnostics table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticsReport {
    pub iteration: usize,
    pub qre_gap: f64,
    pub qre_gap_reverse: f64,
    pub exploitability: f64,
    pub exploitability_per_agent: Vec<f64>,
    pub mu_emp: f64,
    pub mu_emp_unnormalized: f64,
    pub kl_to_oracle: Option<f64>,
    pub entropy_per_agent: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DiagnosticsOptions {
    pub exploitability: ExploitabilityConfig,
    /// `None` skips the monotonicity residual (reported as 0).
    pub monotonicity: Option<MonotonicityConfig>,
}

/// Computes every diagnostic for `policy` using exact evaluation.
pub fn diagnose(
    game: &MarkovGame,
    policy: &JointPolicy,
    rationality: &Rationality,
    oracle: Option<&JointPolicy>,
    iteration: usize,
    opts: &DiagnosticsOptions,
) -> Result<DiagnosticsReport> {
    let q = evaluate_joint_q(game, policy, EVAL_TOL)?;
    let expl = exploitability(game, policy, &opts.exploitability)?;
    let mono = match &opts.monotonicity {
        Some(cfg) => Some(monotonicity_residual(game, policy, cfg)?),
        None => None,
    };
    Ok(DiagnosticsReport {
        iteration,
        qre_gap: qre_gap(policy, rationality, &q)?,
        qre_gap_reverse: qre_gap_reverse(policy, rationality, &q)?,
        exploitability: expl.total,
        exploitability_per_agent: expl.per_agent,
        mu_emp: mono.map_or(0.0, |m| m.normalized),
        mu_emp_unnormalized: mono.map_or(0.0, |m| m.unnormalized),
        kl_to_oracle: match oracle {
            Some(r) => Some(kl_to_reference(policy, r, None)?),
            None => None,
        },
        entropy_per_agent: (0..policy.n_agents()).map(|i| policy.agent_mean_entropy(i)).collect(),
    })
}

impl DiagnosticsReport {
    pub fn csv_header(n_agents: usize) -> Vec<String> {
        let mut h: Vec<String> = ["iteration", "qre_gap", "qre_gap_reverse", "exploitability"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        h.extend((0..n_agents).map(|i| format!("exploitability_{i}")));
        h.push("mu_emp".into());
        h.push("mu_emp_unnormalized".into());
        h.push("kl_to_oracle".into());
        h.extend((0..n_agents).map(|i| format!("entropy_{i}")));
        h
    }

    pub fn csv_record(&self) -> Vec<String> {
        let mut r = vec![
            self.iteration.to_string(),
            format!("{:?}", self.qre_gap),
            format!("{:?}", self.qre_gap_reverse),
            format!("{:?}", self.exploitability),
        ];
        r.extend(self.exploitability_per_agent.iter().map(|x| format!("{x:?}")));
        r.push(format!("{:?}", self.mu_emp));
        r.push(format!("{:?}", self.mu_emp_unnormalized));
        r.push(self.kl_to_oracle.map_or_else(String::new, |x| format!("{x:?}")));
        r.extend(self.entropy_per_agent.iter().map(|x| format!("{x:?}")));
        r
    }
}

pub fn write_diagnostics<W: Write>(writer: W, reports: &[DiagnosticsReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let n = reports.first().map_or(0, |r| r.entropy_per_agent.len());
    w.write_record(DiagnosticsReport::csv_header(n))?;
    for r in reports {
        w.write_record(r.csv_record())?;
    }
    w.flush()?;
    Ok(())
}
