//! Continuous-action logit policies on a compact box: Gaussian mixtures with
//! replicator weight updates, SVGD particles and reflected Langevin sampling,
//! plus quadrature of the exact Gibbs density `∝ exp(λQ)` for checking them.
//!
//! Mixture sizing: about `2^d` components for a `d`-dimensional action space
//! is a reasonable starting point; the default is 10.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numeric::log_sum_exp;
use crate::rng::{rng_for, stream};

#[derive(Debug, Clone, PartialEq)]
pub struct ActionBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl ActionBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.is_empty() || lo.len() != hi.len() || lo.iter().zip(&hi).any(|(l, h)| !(l < h) || !l.is_finite() || !h.is_finite()) {
            return Err(Error::InvalidArgument("action box needs finite lo < hi in every dimension".into()));
        }
        Ok(Self { lo, hi })
    }

    pub fn interval(lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo], vec![hi])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn width(&self, d: usize) -> f64 {
        self.hi[d] - self.lo[d]
    }

    pub fn volume(&self) -> f64 {
        (0..self.dim()).map(|d| self.width(d)).product()
    }

    pub fn contains(&self, a: &[f64]) -> bool {
        a.iter().enumerate().all(|(d, &x)| x >= self.lo[d] && x <= self.hi[d])
    }

    pub fn clamp(&self, a: &mut [f64]) {
        for (d, x) in a.iter_mut().enumerate() {
            *x = x.clamp(self.lo[d], self.hi[d]);
        }
    }

    /// Folds each coordinate back into the box by mirror reflection.
    pub fn reflect(&self, a: &mut [f64]) {
        for (d, x) in a.iter_mut().enumerate() {
            let (lo, w) = (self.lo[d], self.width(d));
            let mut t = (*x - lo).rem_euclid(2.0 * w);
            if t > w {
                t = 2.0 * w - t;
            }
            *x = lo + t;
        }
    }
}

/// A differentiable action-value field over a box action space, for one state.
pub trait SmoothQ {
    fn bounds(&self) -> &ActionBox;
    fn value(&self, a: &[f64]) -> f64;
    fn gradient(&self, a: &[f64]) -> Vec<f64>;

    fn dim(&self) -> usize {
        self.bounds().dim()
    }
}

/// `Q(a) = peak − curvature·‖a − center‖²`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticQ {
    pub center: Vec<f64>,
    pub curvature: f64,
    pub peak: f64,
    pub bounds: ActionBox,
}

impl SmoothQ for QuadraticQ {
    fn bounds(&self) -> &ActionBox {
        &self.bounds
    }

    fn value(&self, a: &[f64]) -> f64 {
        let r2: f64 = a.iter().zip(&self.center).map(|(x, c)| (x - c).powi(2)).sum();
        self.peak - self.curvature * r2
    }

    fn gradient(&self, a: &[f64]) -> Vec<f64> {
        a.iter().zip(&self.center).map(|(x, c)| -2.0 * self.curvature * (x - c)).collect()
    }
}

/// Double well `Q(a) = −depth·(‖a‖² − radius²)²`, maximal on the sphere of `radius`.
#[derive(Debug, Clone, PartialEq)]
pub struct DoubleWellQ {
    pub radius: f64,
    pub depth: f64,
    pub bounds: ActionBox,
}

impl SmoothQ for DoubleWellQ {
    fn bounds(&self) -> &ActionBox {
        &self.bounds
    }

    fn value(&self, a: &[f64]) -> f64 {
        let r2: f64 = a.iter().map(|x| x * x).sum();
        -self.depth * (r2 - self.radius * self.radius).powi(2)
    }

    fn gradient(&self, a: &[f64]) -> Vec<f64> {
        let r2: f64 = a.iter().map(|x| x * x).sum();
        let s = -4.0 * self.depth * (r2 - self.radius * self.radius);
        a.iter().map(|x| s * x).collect()
    }
}

/// `Q(a) = offset + slope·a`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearQ {
    pub slope: Vec<f64>,
    pub offset: f64,
    pub bounds: ActionBox,
}

impl SmoothQ for LinearQ {
    fn bounds(&self) -> &ActionBox {
        &self.bounds
    }

    fn value(&self, a: &[f64]) -> f64 {
        self.offset + a.iter().zip(&self.slope).map(|(x, s)| x * s).sum::<f64>()
    }

    fn gradient(&self, _a: &[f64]) -> Vec<f64> {
        self.slope.clone()
    }
}

/// Piecewise-linear interpolant of tabulated values on an even 1-D grid
/// spanning the box. The gradient is the slope of the enclosing segment.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularQ1d {
    pub values: Vec<f64>,
    pub bounds: ActionBox,
}

impl TabularQ1d {
    pub fn new(values: Vec<f64>, bounds: ActionBox) -> Result<Self> {
        if values.len() < 2 || bounds.dim() != 1 || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("tabular Q needs ≥ 2 finite values on a 1-D box".into()));
        }
        Ok(Self { values, bounds })
    }

    fn locate(&self, x: f64) -> (usize, f64, f64) {
        let n = self.values.len() - 1;
        let h = self.bounds.width(0) / n as f64;
        let t = ((x - self.bounds.lo[0]) / h).clamp(0.0, n as f64);
        let k = (t.floor() as usize).min(n - 1);
        (k, t - k as f64, h)
    }
}

impl SmoothQ for TabularQ1d {
    fn bounds(&self) -> &ActionBox {
        &self.bounds
    }

    fn value(&self, a: &[f64]) -> f64 {
        let (k, f, _) = self.locate(a[0]);
        self.values[k] * (1.0 - f) + self.values[k + 1] * f
    }

    fn gradient(&self, a: &[f64]) -> Vec<f64> {
        let (k, _, h) = self.locate(a[0]);
        vec![(self.values[k + 1] - self.values[k]) / h]
    }
}

/// The 1-D quadratic benchmark: `Q(a) = −(a − 0.3)²` on `[−2, 2]`, used at
/// [`BENCHMARK_LAMBDA`], where the Gibbs density is close to `N(0.3, 0.1)`.
pub fn quadratic_benchmark() -> QuadraticQ {
    QuadraticQ {
        center: vec![0.3],
        curvature: 1.0,
        peak: 0.0,
        bounds: ActionBox::interval(-2.0, 2.0).expect("valid box"),
    }
}

pub const BENCHMARK_LAMBDA: f64 = 5.0;

/// Double well with modes at `±1` on `[−2, 2]`.
pub fn bimodal_benchmark() -> DoubleWellQ {
    DoubleWellQ {
        radius: 1.0,
        depth: 1.0,
        bounds: ActionBox::interval(-2.0, 2.0).expect("valid box"),
    }
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

// ---------------------------------------------------------------------------
// Gaussian mixtures

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Diagonal of the covariance.
    pub var: Vec<f64>,
}

/// Mixture policy for one state.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureRow {
    pub components: Vec<Component>,
}

pub const DEFAULT_DIVERSITY: f64 = 0.1;
pub const DEFAULT_SIGMA_MIN: f64 = 1e-4;
pub const DEFAULT_COMPONENTS: usize = 10;

/// A mixture row per state, with the weight-entropy coefficient and the
/// covariance floor shared by all rows.
#[derive(Debug, Clone, PartialEq)]
pub struct MixturePolicy {
    pub rows: Vec<MixtureRow>,
    pub diversity: f64,
    pub sigma_min: f64,
}

impl MixturePolicy {
    pub fn new(rows: Vec<MixtureRow>) -> Result<Self> {
        let p = Self {
            rows,
            diversity: DEFAULT_DIVERSITY,
            sigma_min: DEFAULT_SIGMA_MIN,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (s, row) in self.rows.iter().enumerate() {
            row.validate(self.sigma_min).map_err(|e| Error::InvalidPolicy(format!("state {s}: {e}")))?;
        }
        Ok(())
    }
}

impl MixtureRow {
    /// `m` equal-weight components with means evenly spaced along the box
    /// diagonal and variances `(width / m)²`.
    pub fn spread(bounds: &ActionBox, m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidArgument("mixture needs at least one component".into()));
        }
        let components = (0..m)
            .map(|k| {
                let t = (k as f64 + 0.5) / m as f64;
                Component {
                    weight: 1.0 / m as f64,
                    mean: (0..bounds.dim()).map(|d| bounds.lo[d] + t * bounds.width(d)).collect(),
                    var: (0..bounds.dim()).map(|d| (bounds.width(d) / m as f64).powi(2)).collect(),
                }
            })
            .collect();
        Ok(Self { components })
    }

    pub fn single(mean: Vec<f64>, var: Vec<f64>) -> Self {
        Self {
            components: vec![Component { weight: 1.0, mean, var }],
        }
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.weight).collect()
    }

    pub fn validate(&self, sigma_min: f64) -> std::result::Result<(), String> {
        if self.components.is_empty() {
            return Err("no components".into());
        }
        let sum: f64 = self.components.iter().map(|c| c.weight).sum();
        if (sum - 1.0).abs() > 1e-10 || self.components.iter().any(|c| !(c.weight >= 0.0)) {
            return Err(format!("weights are not on the simplex (sum {sum})"));
        }
        if self.components.iter().any(|c| c.var.iter().any(|&v| !(v >= sigma_min))) {
            return Err(format!("a covariance entry is below the floor {sigma_min}"));
        }
        Ok(())
    }

    /// Unnormalized-by-box Gaussian mixture density.
    pub fn density(&self, a: &[f64]) -> f64 {
        self.components
            .iter()
            .map(|c| {
                let mut log = 0.0;
                for ((x, m), v) in a.iter().zip(&c.mean).zip(&c.var) {
                    log += -0.5 * (x - m).powi(2) / v - 0.5 * (2.0 * std::f64::consts::PI * v).ln();
                }
                c.weight * log.exp()
            })
            .sum()
    }

    fn draw_from<R: Rng + ?Sized>(c: &Component, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
        let eps: Vec<f64> = (0..c.mean.len()).map(|_| rng.sample(StandardNormal)).collect();
        let a = c.mean.iter().zip(&c.var).zip(&eps).map(|((m, v), e)| m + v.sqrt() * e).collect();
        (a, eps)
    }

    /// One action drawn from the mixture, clamped to the box.
    pub fn sample<R: Rng + ?Sized>(&self, bounds: &ActionBox, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.components.len() - 1;
        for (k, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                pick = k;
                break;
            }
        }
        let (mut a, _) = Self::draw_from(&self.components[pick], rng);
        bounds.clamp(&mut a);
        a
    }
}

/// Number of components whose weight is below `threshold`.
pub fn collapsed_components(row: &MixtureRow, threshold: f64) -> usize {
    row.components.iter().filter(|c| c.weight < threshold).count()
}

/// `Q̄_m`: Monte-Carlo mean of `Q` over `j` draws from each component.
pub fn component_values<R: Rng + ?Sized>(row: &MixtureRow, q: &dyn SmoothQ, j: usize, rng: &mut R) -> Result<Vec<f64>> {
    if j == 0 {
        return Err(Error::InvalidArgument("need at least one sample per component".into()));
    }
    let out: Vec<f64> = row
        .components
        .iter()
        .map(|c| {
            (0..j)
                .map(|_| {
                    let (mut a, _) = MixtureRow::draw_from(c, rng);
                    q.bounds().clamp(&mut a);
                    q.value(&a)
                })
                .sum::<f64>()
                / j as f64
        })
        .collect();
    check_finite(&out, "component values")?;
    Ok(out)
}

/// Exponential weights on the mixture weights with a weight-entropy bonus:
/// `w_m ∝ w_m·exp(η(Q̄_m/α − c·log w_m))`.
pub fn mixture_weight_step(weights: &[f64], qbar: &[f64], eta: f64, alpha: f64, diversity: f64) -> Result<Vec<f64>> {
    if weights.len() != qbar.len() || weights.is_empty() {
        return Err(Error::InvalidArgument("weights and component values differ in length".into()));
    }
    if !(alpha > 0.0) || !(eta >= 0.0) || !(diversity >= 0.0) {
        return Err(Error::InvalidArgument("need α > 0, η ≥ 0, diversity ≥ 0".into()));
    }
    if weights.iter().all(|&w| w <= 0.0) {
        return Err(Error::InvalidPolicy("all mixture weights are zero".into()));
    }
    if eta == 0.0 {
        return Ok(weights.to_vec());
    }
    let logits: Vec<f64> = weights
        .iter()
        .zip(qbar)
        .map(|(&w, &q)| {
            if w <= 0.0 {
                f64::NEG_INFINITY
            } else {
                w.ln() + eta * (q / alpha - diversity * w.ln())
            }
        })
        .collect();
    let z = log_sum_exp(&logits);
    let out: Vec<f64> = logits.iter().map(|l| (l - z).exp()).collect();
    check_finite(&out, "mixture weights")?;
    Ok(out)
}

/// Reparameterized gradient step on every mean:
/// `μ_m ← μ_m + η_μ·(1/J)Σ_j ∇Q(μ_m + Σ_m^{1/2} ε_j)`, projected to the box.
pub fn mixture_mean_step<R: Rng + ?Sized>(row: &MixtureRow, q: &dyn SmoothQ, eta_mu: f64, j: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    if j == 0 {
        return Err(Error::InvalidArgument("need at least one sample per component".into()));
    }
    let bounds = q.bounds();
    let mut means = Vec::with_capacity(row.len());
    for c in &row.components {
        let mut g = vec![0.0; c.mean.len()];
        for _ in 0..j {
            let (mut a, _) = MixtureRow::draw_from(c, rng);
            bounds.clamp(&mut a);
            let grad = q.gradient(&a);
            check_finite(&grad, "Q gradient")?;
            for (gd, x) in g.iter_mut().zip(grad) {
                *gd += x / j as f64;
            }
        }
        let mut m: Vec<f64> = c.mean.iter().zip(&g).map(|(m, g)| m + eta_mu * g).collect();
        bounds.clamp(&mut m);
        means.push(m);
    }
    Ok(means)
}

/// Moment-matching covariance update. Stein's identity turns draws from the
/// component into a curvature estimate `E[∂²Q] ≈ E[(a−μ)·∂Q]/σ²`, and the
/// variance relaxes towards the local Gibbs variance `−1/(λ·E[∂²Q])`, clipped
/// to `[σ_min, width²]`. Where the estimated curvature is not negative the
/// variance is left unchanged.
pub fn mixture_cov_step<R: Rng + ?Sized>(
    row: &MixtureRow,
    q: &dyn SmoothQ,
    lambda: f64,
    relax: f64,
    j: usize,
    sigma_min: f64,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    let bounds = q.bounds();
    let mut out = Vec::with_capacity(row.len());
    for c in &row.components {
        let mut stein = vec![0.0; c.mean.len()];
        for _ in 0..j.max(1) {
            let (mut a, _) = MixtureRow::draw_from(c, rng);
            bounds.clamp(&mut a);
            let grad = q.gradient(&a);
            check_finite(&grad, "Q gradient")?;
            for d in 0..a.len() {
                stein[d] += (a[d] - c.mean[d]) * grad[d] / j.max(1) as f64;
            }
        }
        let var = (0..c.var.len())
            .map(|d| {
                let cap = bounds.width(d).powi(2);
                let curvature = stein[d] / c.var[d];
                let target = if lambda * curvature < 0.0 { -1.0 / (lambda * curvature) } else { c.var[d] };
                ((1.0 - relax) * c.var[d] + relax * target).clamp(sigma_min, cap.max(sigma_min))
            })
            .collect();
        out.push(var);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureFitConfig {
    pub components: usize,
    pub iters: usize,
    pub eta_pi: f64,
    pub eta_mu: f64,
    pub cov_relax: f64,
    pub samples: usize,
    pub diversity: f64,
    pub sigma_min: f64,
    pub seed: u64,
}

impl Default for MixtureFitConfig {
    fn default() -> Self {
        Self {
            components: DEFAULT_COMPONENTS,
            iters: 2000,
            eta_pi: 0.05,
            eta_mu: 0.02,
            cov_relax: 0.05,
            samples: 16,
            diversity: DEFAULT_DIVERSITY,
            sigma_min: DEFAULT_SIGMA_MIN,
            seed: 0,
        }
    }
}

/// Runs weight, mean and covariance updates from an evenly spread start.
pub fn fit_mixture(q: &dyn SmoothQ, lambda: f64, cfg: &MixtureFitConfig) -> Result<MixtureRow> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidArgument("mixture fitting needs λ > 0".into()));
    }
    let mut rng = rng_for(cfg.seed, stream::CONTINUOUS);
    let mut row = MixtureRow::spread(q.bounds(), cfg.components)?;
    for c in &mut row.components {
        for v in &mut c.var {
            *v = v.max(cfg.sigma_min);
        }
    }
    let alpha = 1.0 / lambda;
    for _ in 0..cfg.iters {
        let qbar = component_values(&row, q, cfg.samples, &mut rng)?;
        let w = mixture_weight_step(&row.weights(), &qbar, cfg.eta_pi, alpha, cfg.diversity)?;
        let means = mixture_mean_step(&row, q, cfg.eta_mu, cfg.samples, &mut rng)?;
        let vars = mixture_cov_step(&row, q, lambda, cfg.cov_relax, cfg.samples, cfg.sigma_min, &mut rng)?;
        for (((c, w), m), v) in row.components.iter_mut().zip(w).zip(means).zip(vars) {
            c.weight = w;
            c.mean = m;
            c.var = v;
        }
        debug_assert!(row.validate(cfg.sigma_min).is_ok());
    }
    Ok(row)
}

// ---------------------------------------------------------------------------
// SVGD

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    /// `h = med²/ln(M+1)` over pairwise distances.
    Median,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet {
    pub particles: Vec<Vec<f64>>,
    pub bandwidth: Bandwidth,
}

impl ParticleSet {
    /// `m` particles evenly spaced along the box diagonal.
    pub fn spread(bounds: &ActionBox, m: usize) -> Self {
        let particles = (0..m)
            .map(|k| {
                let t = (k as f64 + 0.5) / m as f64;
                (0..bounds.dim()).map(|d| bounds.lo[d] + t * bounds.width(d)).collect()
            })
            .collect();
        Self {
            particles,
            bandwidth: Bandwidth::Median,
        }
    }

    pub fn bandwidth_value(&self) -> f64 {
        match self.bandwidth {
            Bandwidth::Fixed(h) => h,
            Bandwidth::Median => {
                let m = self.particles.len();
                let mut d2 = Vec::with_capacity(m * m.saturating_sub(1) / 2);
                for i in 0..m {
                    for j in i + 1..m {
                        d2.push(sq_dist(&self.particles[i], &self.particles[j]));
                    }
                }
                if d2.is_empty() {
                    return 1.0;
                }
                d2.sort_by(f64::total_cmp);
                let med = d2[d2.len() / 2];
                let h = med / ((m + 1) as f64).ln();
                if h > 1e-12 { h } else { 1e-3 }
            }
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// One SVGD step towards `∝ exp(Q/α)` with RBF kernel `exp(−‖x−y‖²/h)`.
pub fn svgd_step(set: &ParticleSet, q: &dyn SmoothQ, alpha: f64, step: f64) -> Result<ParticleSet> {
    if !(alpha > 0.0) || !(step >= 0.0) {
        return Err(Error::InvalidArgument("SVGD needs α > 0 and a nonnegative step".into()));
    }
    let h = set.bandwidth_value();
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::NonFinite("SVGD bandwidth".into()));
    }
    let m = set.particles.len();
    let grads: Vec<Vec<f64>> = set.particles.iter().map(|x| q.gradient(x)).collect();
    for g in &grads {
        check_finite(g, "Q gradient")?;
    }
    let mut next = Vec::with_capacity(m);
    for x in &set.particles {
        let mut phi = vec![0.0; x.len()];
        for (xj, gj) in set.particles.iter().zip(&grads) {
            let k = (-sq_dist(xj, x) / h).exp();
            if !k.is_finite() {
                return Err(Error::NonFinite("SVGD kernel".into()));
            }
            for d in 0..x.len() {
                // ∇_{x_j} k(x_j, x) = −2(x_j − x)/h · k
                phi[d] += k * gj[d] + alpha * (-2.0 * (xj[d] - x[d]) / h) * k;
            }
        }
        let mut y: Vec<f64> = x.iter().zip(&phi).map(|(x, p)| x + step * p / m as f64).collect();
        q.bounds().clamp(&mut y);
        next.push(y);
    }
    Ok(ParticleSet {
        particles: next,
        bandwidth: set.bandwidth,
    })
}

pub fn run_svgd(init: ParticleSet, q: &dyn SmoothQ, alpha: f64, step: f64, iters: usize) -> Result<ParticleSet> {
    let mut set = init;
    for _ in 0..iters {
        set = svgd_step(&set, q, alpha, step)?;
    }
    Ok(set)
}

// ---------------------------------------------------------------------------
// Langevin

/// Consecutive far excursions after which a chain is declared divergent.
const ESCAPE_LIMIT: usize = 100;

fn langevin_advance<R: Rng + ?Sized>(a: &mut [f64], q: &dyn SmoothQ, lambda: f64, eta: f64, rng: &mut R, escapes: &mut usize) -> Result<()> {
    let bounds = q.bounds();
    let g = q.gradient(a);
    check_finite(&g, "Q gradient")?;
    let noise = (2.0 * eta).sqrt();
    let mut far = false;
    for d in 0..a.len() {
        let e: f64 = rng.sample(StandardNormal);
        a[d] += eta * lambda * g[d] + noise * e;
        if !a[d].is_finite() {
            return Err(Error::NonFinite("Langevin iterate".into()));
        }
        if a[d] < bounds.lo[d] - bounds.width(d) || a[d] > bounds.hi[d] + bounds.width(d) {
            far = true;
        }
    }
    bounds.reflect(a);
    *escapes = if far { *escapes + 1 } else { 0 };
    if *escapes >= ESCAPE_LIMIT {
        return Err(Error::Divergence {
            what: "Langevin chain",
            iterations: ESCAPE_LIMIT,
            residual: f64::INFINITY,
        });
    }
    Ok(())
}

/// `a ← a + η∇E + √(2η)·ε` with `E = λQ`, reflected at the box; returns the
/// final iterate. The stationary density is `∝ exp(E)`.
pub fn langevin_sample<R: Rng + ?Sized>(q: &dyn SmoothQ, lambda: f64, steps: usize, eta: f64, rng: &mut R, init: &[f64]) -> Result<Vec<f64>> {
    if !(eta > 0.0) {
        return Err(Error::InvalidArgument("Langevin step must be positive".into()));
    }
    let mut a = init.to_vec();
    let mut escapes = 0;
    for _ in 0..steps {
        langevin_advance(&mut a, q, lambda, eta, rng, &mut escapes)?;
    }
    Ok(a)
}

/// Every `thin`-th iterate of one chain after `burn_in` steps.
pub fn langevin_chain<R: Rng + ?Sized>(
    q: &dyn SmoothQ,
    lambda: f64,
    eta: f64,
    burn_in: usize,
    samples: usize,
    thin: usize,
    rng: &mut R,
    init: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let mut a = langevin_sample(q, lambda, burn_in, eta, rng, init)?;
    let mut escapes = 0;
    let mut out = Vec::with_capacity(samples);
    for _ in 0..samples {
        for _ in 0..thin.max(1) {
            langevin_advance(&mut a, q, lambda, eta, rng, &mut escapes)?;
        }
        out.push(a.clone());
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Quadrature

/// Midpoint tensor grid with `n` cells per dimension (dimension ≤ 2).
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    pub points: Vec<Vec<f64>>,
    pub cell: f64,
    /// Exact Gibbs density `exp(λQ)/Z` at each point.
    pub gibbs: Vec<f64>,
}

fn grid_points(bounds: &ActionBox, n: usize) -> Result<(Vec<Vec<f64>>, f64)> {
    if bounds.dim() > 2 {
        return Err(Error::InvalidArgument("quadrature supports action dimension ≤ 2".into()));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("quadrature needs at least one point per dimension".into()));
    }
    let axis = |d: usize| -> Vec<f64> {
        let h = bounds.width(d) / n as f64;
        (0..n).map(|k| bounds.lo[d] + (k as f64 + 0.5) * h).collect()
    };
    let cell = bounds.volume() / (n as f64).powi(bounds.dim() as i32);
    let points = if bounds.dim() == 1 {
        axis(0).into_iter().map(|x| vec![x]).collect()
    } else {
        let (xs, ys) = (axis(0), axis(1));
        xs.iter().flat_map(|&x| ys.iter().map(move |&y| vec![x, y])).collect()
    };
    Ok((points, cell))
}

pub fn gibbs_grid(q: &dyn SmoothQ, lambda: f64, n: usize) -> Result<DensityGrid> {
    let (points, cell) = grid_points(q.bounds(), n)?;
    let logits: Vec<f64> = points.iter().map(|a| lambda * q.value(a)).collect();
    check_finite(&logits, "Gibbs exponent")?;
    let z = log_sum_exp(&logits) + cell.ln();
    let gibbs = logits.iter().map(|l| (l - z).exp()).collect();
    Ok(DensityGrid { points, cell, gibbs })
}

fn normalized_on_grid(grid: &DensityGrid, density: impl Fn(&[f64]) -> f64) -> Result<Vec<f64>> {
    let vals: Vec<f64> = grid.points.iter().map(|a| density(a)).collect();
    let mass: f64 = vals.iter().sum::<f64>() * grid.cell;
    if !(mass > 0.0) || !mass.is_finite() {
        return Err(Error::NonFinite("density has no mass on the box".into()));
    }
    Ok(vals.into_iter().map(|v| v / mass).collect())
}

fn grid_tv(grid: &DensityGrid, p: &[f64]) -> f64 {
    0.5 * grid.cell * grid.gibbs.iter().zip(p).map(|(g, p)| (g - p).abs()).sum::<f64>()
}

fn mixture_tv_at(row: &MixtureRow, q: &dyn SmoothQ, lambda: f64, n: usize) -> Result<f64> {
    let grid = gibbs_grid(q, lambda, n)?;
    let p = normalized_on_grid(&grid, |a| row.density(a))?;
    Ok(grid_tv(&grid, &p))
}

/// TV between the mixture density (renormalized on the box) and the exact
/// continuous logit density `∝ exp(λQ)`, by midpoint quadrature with `n`
/// points per dimension. Fails when the `n/2` result disagrees by more than 10%.
pub fn continuous_qre_residual(row: &MixtureRow, q: &dyn SmoothQ, lambda: f64, n: usize) -> Result<f64> {
    if n < 4 {
        return Err(Error::InvalidArgument("quadrature needs n ≥ 4".into()));
    }
    let fine = mixture_tv_at(row, q, lambda, n)?;
    let coarse = mixture_tv_at(row, q, lambda, n / 2)?;
    if (fine - coarse).abs() > 0.1 * fine.max(1e-3) {
        return Err(Error::QuadratureTooCoarse { coarse, fine });
    }
    Ok(fine)
}

/// TV between the histogram of `samples` on `bins` cells per dimension and
/// the Gibbs mass of each cell (integrated on a 16-fold finer grid).
pub fn sample_tv(samples: &[Vec<f64>], q: &dyn SmoothQ, lambda: f64, bins: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples".into()));
    }
    let bounds = q.bounds();
    let dim = bounds.dim();
    let sub = 16;
    let fine = gibbs_grid(q, lambda, bins * sub)?;
    let cell_of = |a: &[f64], n: usize| -> usize {
        let mut idx = 0;
        for d in 0..dim {
            let t = ((a[d] - bounds.lo[d]) / bounds.width(d) * n as f64).floor();
            idx = idx * n + (t.max(0.0) as usize).min(n - 1);
        }
        idx
    };
    let total = bins.pow(dim as u32);
    let mut exact = vec![0.0; total];
    for (a, g) in fine.points.iter().zip(&fine.gibbs) {
        exact[cell_of(a, bins)] += g * fine.cell;
    }
    let mut hist = vec![0.0; total];
    for a in samples {
        hist[cell_of(a, bins)] += 1.0 / samples.len() as f64;
    }
    Ok(0.5 * exact.iter().zip(&hist).map(|(e, h)| (e - h).abs()).sum::<f64>())
}

/// Density snapshot CSV: coordinates `a0[,a1]`, then `gibbs`, then one column
/// per named density evaluated on the same grid.
pub fn write_density_csv<W: Write>(writer: W, grid: &DensityGrid, columns: &[(&str, Vec<f64>)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let dim = grid.points.first().map_or(1, Vec::len);
    let mut header: Vec<String> = (0..dim).map(|d| format!("a{d}")).collect();
    header.push("gibbs".into());
    header.extend(columns.iter().map(|(n, _)| n.to_string()));
    w.write_record(&header)?;
    for (k, a) in grid.points.iter().enumerate() {
        let mut rec: Vec<String> = a.iter().map(|x| format!("{x:?}")).collect();
        rec.push(format!("{:?}", grid.gibbs[k]));
        rec.extend(columns.iter().map(|(_, v)| format!("{:?}", v[k])));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Mixture density renormalized on the grid, ready for [`write_density_csv`].
pub fn mixture_on_grid(row: &MixtureRow, grid: &DensityGrid) -> Result<Vec<f64>> {
    normalized_on_grid(grid, |a| row.density(a))
}
