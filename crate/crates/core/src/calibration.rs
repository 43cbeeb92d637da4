//! Maximum-likelihood calibration of the rationality parameter from observed
//! actions, re-solving the QRE for every candidate λ.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::critic::sample_trajectory;
use crate::error::{Error, Result};
use crate::game::{JointPolicy, MarkovGame, Rationality};
use crate::oracle::{solve_qre_fixed_point, LogitBrConfig};
use crate::rng::{rng_for, stream};

/// One observed action: `agent` chose `action` in `state`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub state: usize,
    pub agent: usize,
    pub action: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BehaviorDataset {
    pub records: Vec<Observation>,
}

impl BehaviorDataset {
    pub fn new(records: Vec<Observation>) -> Self {
        Self { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validate(&self, game: &MarkovGame) -> Result<()> {
        for (k, r) in self.records.iter().enumerate() {
            if r.state >= game.n_states() || r.agent >= game.n_agents() || r.action >= game.n_actions(r.agent) {
                return Err(Error::DataCorruption(format!(
                    "record {k}: (state {}, agent {}, action {}) is not valid for the game",
                    r.state, r.agent, r.action
                )));
            }
        }
        Ok(())
    }

    /// `(1/T) Σ log |A_agent|`, the NLL of uniform play.
    pub fn uniform_nll(&self, game: &MarkovGame) -> f64 {
        self.records
            .iter()
            .map(|r| (game.n_actions(r.agent) as f64).ln())
            .sum::<f64>()
            / self.records.len() as f64
    }

    /// Resample with replacement, same size.
    pub fn bootstrap<R: Rng + ?Sized>(&self, rng: &mut R) -> Self {
        let n = self.records.len();
        Self {
            records: (0..n).map(|_| self.records[rng.random_range(0..n)]).collect(),
        }
    }

    /// CSV with header `state_id,agent_id,action_id`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["state_id", "agent_id", "action_id"])?;
        for r in &self.records {
            w.write_record([r.state.to_string(), r.agent.to_string(), r.action.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads `state_id,agent_id,action_id`; a file without the `agent_id`
    /// column attributes every record to agent 0.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let headers = r.headers()?.clone();
        let col = |name: &str| headers.iter().position(|h| h.trim() == name);
        let state_col = col("state_id").ok_or_else(|| Error::DataCorruption("missing state_id column".into()))?;
        let action_col = col("action_id").ok_or_else(|| Error::DataCorruption("missing action_id column".into()))?;
        let agent_col = col("agent_id");
        let mut records = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let get = |c: usize| -> Result<usize> {
                rec.get(c)
                    .and_then(|v| v.trim().parse().ok())
                    .ok_or_else(|| Error::DataCorruption(format!("row {line}: bad integer in column {c}")))
            };
            records.push(Observation {
                state: get(state_col)?,
                agent: match agent_col {
                    Some(c) => get(c)?,
                    None => 0,
                },
                action: get(action_col)?,
            });
        }
        Ok(Self { records })
    }
}

/// Mean negative log-likelihood of the records under `policy`.
pub fn nll_of_policy(policy: &JointPolicy, data: &BehaviorDataset) -> f64 {
    let total: f64 = data
        .records
        .iter()
        .map(|r| -policy.row(r.agent, r.state)[r.action].ln())
        .sum();
    total / data.records.len() as f64
}

/// Caches QRE solutions by λ so that repeated likelihood evaluations, the
/// bootstrap and the refinement share solves. New λ values warm-start from
/// the nearest cached solution.
#[derive(Debug, Clone)]
pub struct QreCache<'g> {
    game: &'g MarkovGame,
    solver: LogitBrConfig,
    solved: BTreeMap<u64, JointPolicy>,
}

impl<'g> QreCache<'g> {
    pub fn new(game: &'g MarkovGame, solver: LogitBrConfig) -> Self {
        Self {
            game,
            solver,
            solved: BTreeMap::new(),
        }
    }

    pub fn policy(&mut self, lambda: f64) -> Result<JointPolicy> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidArgument(format!("λ must be finite and nonnegative, got {lambda}")));
        }
        let key = lambda.to_bits();
        if let Some(p) = self.solved.get(&key) {
            return Ok(p.clone());
        }
        let policy = if lambda == 0.0 {
            JointPolicy::uniform(self.game)
        } else {
            let init = self
                .solved
                .iter()
                .min_by(|a, b| {
                    let da = (f64::from_bits(*a.0) - lambda).abs();
                    let db = (f64::from_bits(*b.0) - lambda).abs();
                    da.total_cmp(&db)
                })
                .map(|(_, p)| p.clone());
            let rat = Rationality::homogeneous(self.game.n_agents(), lambda);
            solve_qre_fixed_point(self.game, &rat, &self.solver, init.as_ref())
                .map_err(|e| Error::AtLambda {
                    lambda,
                    source: Box::new(e),
                })?
                .policy
        };
        self.solved.insert(key, policy.clone());
        Ok(policy)
    }

    pub fn nll(&mut self, lambda: f64, data: &BehaviorDataset) -> Result<f64> {
        Ok(nll_of_policy(&self.policy(lambda)?, data))
    }
}

/// `L(λ) = −(1/T) Σ_t log π_λ(a_t | s_t)` over the records, with `π_λ` the QRE at `λ`.
pub fn nll_at_lambda(game: &MarkovGame, data: &BehaviorDataset, lambda: f64, solver: &LogitBrConfig) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty behavior dataset".into()));
    }
    data.validate(game)?;
    QreCache::new(game, *solver).nll(lambda, data)
}

pub const DEFAULT_GRID: [f64; 7] = [1.0, 2.0, 5.0, 8.0, 10.0, 15.0, 20.0];

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationConfig {
    pub grid: Vec<f64>,
    pub refine: bool,
    /// Refinement stops once the bracket is at most this wide.
    pub bracket_tol: f64,
    pub solver: LogitBrConfig,
    /// Step of the central finite difference for `dL/dλ`.
    pub fd_step: f64,
    /// Bootstrap resamples for the seed-variability estimate; 0 disables it.
    pub bootstrap: usize,
    pub seed: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            grid: DEFAULT_GRID.to_vec(),
            refine: true,
            bracket_tol: 0.05,
            solver: LogitBrConfig {
                tol: 1e-8,
                ..LogitBrConfig::default()
            },
            fd_step: 1e-3,
            bootstrap: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    pub lambda_star: f64,
    pub nll_star: f64,
    /// `(λ, NLL)` at every grid point.
    pub curve: Vec<(f64, f64)>,
    /// `(λ, NLL)` at every refinement evaluation, in order.
    pub refinement: Vec<(f64, f64)>,
    /// Grid argmin at either end of the grid.
    pub boundary: bool,
    /// More than one strict local minimum on the grid; refinement skipped.
    pub multimodal: bool,
    /// Central finite-difference `dL/dλ` at `λ*`.
    pub gradient: f64,
    /// Standard deviation of `λ*` over bootstrap resamples.
    pub seed_spread: Option<f64>,
}

const GOLDEN: f64 = 0.618_033_988_749_894_8;

fn count_local_minima(values: &[f64]) -> usize {
    let n = values.len();
    (0..n)
        .filter(|&k| {
            let left = k == 0 || values[k] < values[k - 1];
            let right = k + 1 == n || values[k] < values[k + 1];
            left && right
        })
        .count()
}

struct Search {
    lambda: f64,
    nll: f64,
    curve: Vec<(f64, f64)>,
    refinement: Vec<(f64, f64)>,
    boundary: bool,
    multimodal: bool,
}

fn search(cache: &mut QreCache<'_>, data: &BehaviorDataset, cfg: &CalibrationConfig) -> Result<Search> {
    let mut curve = Vec::with_capacity(cfg.grid.len());
    for &l in &cfg.grid {
        curve.push((l, cache.nll(l, data)?));
    }
    let values: Vec<f64> = curve.iter().map(|c| c.1).collect();
    let best = values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, _)| k)
        .unwrap_or(0);
    let boundary = best == 0 || best + 1 == values.len();
    let multimodal = count_local_minima(&values) > 1;
    let (mut lambda, mut nll) = curve[best];
    let mut refinement = Vec::new();
    if cfg.refine && !multimodal && !boundary {
        let (mut a, mut b) = (cfg.grid[best - 1], cfg.grid[best + 1]);
        let mut c = b - GOLDEN * (b - a);
        let mut d = a + GOLDEN * (b - a);
        let mut fc = cache.nll(c, data)?;
        let mut fd = cache.nll(d, data)?;
        refinement.push((c, fc));
        refinement.push((d, fd));
        while b - a > cfg.bracket_tol {
            if fc <= fd {
                b = d;
                d = c;
                fd = fc;
                c = b - GOLDEN * (b - a);
                fc = cache.nll(c, data)?;
                refinement.push((c, fc));
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + GOLDEN * (b - a);
                fd = cache.nll(d, data)?;
                refinement.push((d, fd));
            }
        }
        for &(l, f) in &refinement {
            if f < nll {
                lambda = l;
                nll = f;
            }
        }
    }
    Ok(Search {
        lambda,
        nll,
        curve,
        refinement,
        boundary,
        multimodal,
    })
}

/// Grid search with warm-started re-solving, followed by golden-section
/// refinement between the neighbours of the best grid point.
pub fn calibrate_lambda(game: &MarkovGame, data: &BehaviorDataset, cfg: &CalibrationConfig) -> Result<CalibrationResult> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty behavior dataset".into()));
    }
    data.validate(game)?;
    if cfg.grid.is_empty() || cfg.grid.windows(2).any(|w| !(w[1] > w[0])) || cfg.grid[0] < 0.0 {
        return Err(Error::InvalidArgument("λ grid must be nonempty, nonnegative and strictly ascending".into()));
    }
    if !(cfg.bracket_tol > 0.0) || !(cfg.fd_step > 0.0) {
        return Err(Error::InvalidArgument("bracket tolerance and finite-difference step must be positive".into()));
    }
    let mut cache = QreCache::new(game, cfg.solver);
    let found = search(&mut cache, data, cfg)?;

    let h = cfg.fd_step.min(found.lambda.max(cfg.fd_step));
    let lo = (found.lambda - h).max(0.0);
    let hi = found.lambda + h;
    let gradient = (cache.nll(hi, data)? - cache.nll(lo, data)?) / (hi - lo);

    let seed_spread = if cfg.bootstrap > 1 {
        let mut rng = rng_for(cfg.seed, stream::CALIBRATION);
        let mut stars = Vec::with_capacity(cfg.bootstrap);
        for _ in 0..cfg.bootstrap {
            let resample = data.bootstrap(&mut rng);
            stars.push(search(&mut cache, &resample, cfg)?.lambda);
        }
        let mean = stars.iter().sum::<f64>() / stars.len() as f64;
        let var = stars.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (stars.len() - 1) as f64;
        Some(var.sqrt())
    } else {
        None
    };

    Ok(CalibrationResult {
        lambda_star: found.lambda,
        nll_star: found.nll,
        curve: found.curve,
        refinement: found.refinement,
        boundary: found.boundary,
        multimodal: found.multimodal,
        gradient,
        seed_spread,
    })
}

/// Records of `steps` time steps of play under `policy`, one record per agent
/// per step. Episodes of `episode_len` steps start from the initial distribution.
pub fn generate_behavior(game: &MarkovGame, policy: &JointPolicy, steps: usize, episode_len: usize, seed: u64) -> Result<BehaviorDataset> {
    if steps == 0 || episode_len == 0 {
        return Err(Error::InvalidArgument("need at least one step per episode and overall".into()));
    }
    let mut rng = rng_for(seed, stream::DATA);
    let space = game.joint();
    let mut records = Vec::with_capacity(steps * game.n_agents());
    while records.len() < steps * game.n_agents() {
        let left = steps - records.len() / game.n_agents();
        let traj = sample_trajectory(game, policy, episode_len.min(left), &mut rng, None)?;
        for step in &traj.steps {
            for (agent, action) in space.decode(step.joint).into_iter().enumerate() {
                records.push(Observation {
                    state: step.state,
                    agent,
                    action,
                });
            }
        }
    }
    Ok(BehaviorDataset { records })
}

/// Writes the NLL curve (`kind,lambda,nll`, with `grid` and `refine` rows)
/// followed by nothing else; the summary goes to [`write_calibration_summary`].
pub fn write_calibration_curve<W: Write>(writer: W, result: &CalibrationResult) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["kind", "lambda", "nll"])?;
    for (kind, rows) in [("grid", &result.curve), ("refine", &result.refinement)] {
        for (l, f) in rows.iter() {
            w.write_record([kind.to_string(), format!("{l:?}"), format!("{f:?}")])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_calibration_summary<W: Write>(writer: W, result: &CalibrationResult) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["lambda_star", "nll_star", "gradient", "boundary", "multimodal", "seed_spread"])?;
    w.write_record([
        format!("{:?}", result.lambda_star),
        format!("{:?}", result.nll_star),
        format!("{:?}", result.gradient),
        result.boundary.to_string(),
        result.multimodal.to_string(),
        result.seed_spread.map_or_else(String::new, |s| format!("{s:?}")),
    ])?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenarios::prisoners_dilemma;

    fn spread_game() -> MarkovGame {
        // payoffs with a moderate spread so that QRE varies over λ ∈ [1, 20]
        let row = vec![vec![0.5, 0.2, 0.0], vec![0.3, 0.4, 0.1], vec![0.1, 0.2, 0.35]];
        let col = vec![vec![0.4, 0.1, 0.2], vec![0.2, 0.45, 0.0], vec![0.3, 0.1, 0.3]];
        MarkovGame::bimatrix(&row, &col, 0.0).unwrap()
    }

    #[test]
    fn zero_lambda_nll_is_uniform_constant() {
        let g = spread_game();
        let data = BehaviorDataset::new(vec![
            Observation { state: 0, agent: 0, action: 2 },
            Observation { state: 0, agent: 1, action: 0 },
            Observation { state: 0, agent: 0, action: 1 },
        ]);
        let nll = nll_at_lambda(&g, &data, 0.0, &LogitBrConfig::default()).unwrap();
        assert_eq!(nll, data.uniform_nll(&g));
        assert!((nll - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn modal_action_nll_falls_with_lambda_on_dominant_strategy_game() {
        let g = prisoners_dilemma();
        let data = BehaviorDataset::new(vec![Observation { state: 0, agent: 0, action: 1 }]);
        let mut cache = QreCache::new(&g, LogitBrConfig::default());
        let nll: Vec<f64> = [0.5, 1.0, 2.0, 5.0, 10.0].iter().map(|&l| cache.nll(l, &data).unwrap()).collect();
        assert!(nll.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn recovers_lambda_from_synthetic_data() {
        let g = spread_game();
        let mut cache = QreCache::new(&g, LogitBrConfig::default());
        let truth = cache.policy(5.0).unwrap();
        let data = generate_behavior(&g, &truth, 10_000, 1, 3).unwrap();
        assert_eq!(data.len(), 20_000);
        let res = calibrate_lambda(&g, &data, &CalibrationConfig::default()).unwrap();
        assert!(!res.boundary && !res.multimodal);
        assert!((4.5..=5.5).contains(&res.lambda_star), "{}", res.lambda_star);
        assert!(res.gradient.abs() < 1e-2);
        let last = res.refinement.len();
        assert!(last >= 2);
    }

    #[test]
    fn uniform_data_lands_on_lower_boundary() {
        let g = spread_game();
        let data = generate_behavior(&g, &JointPolicy::uniform(&g), 5_000, 1, 8).unwrap();
        let res = calibrate_lambda(&g, &data, &CalibrationConfig::default()).unwrap();
        assert!(res.boundary);
        assert_eq!(res.lambda_star, 1.0);
    }

    #[test]
    fn invalid_records_are_rejected() {
        let g = spread_game();
        let data = BehaviorDataset::new(vec![Observation { state: 0, agent: 0, action: 3 }]);
        assert!(matches!(nll_at_lambda(&g, &data, 1.0, &LogitBrConfig::default()), Err(Error::DataCorruption(_))));
    }

    #[test]
    fn csv_round_trip_and_missing_agent_column() {
        let data = BehaviorDataset::new(vec![
            Observation { state: 0, agent: 1, action: 2 },
            Observation { state: 0, agent: 0, action: 0 },
        ]);
        let mut buf = Vec::new();
        data.write_csv(&mut buf).unwrap();
        assert_eq!(BehaviorDataset::read_csv(buf.as_slice()).unwrap(), data);
        let pooled = BehaviorDataset::read_csv("state_id,action_id\n0,1\n".as_bytes()).unwrap();
        assert_eq!(pooled.records, vec![Observation { state: 0, agent: 0, action: 1 }]);
    }

    #[test]
    fn local_minima_counting() {
        assert_eq!(count_local_minima(&[3.0, 2.0, 1.0, 2.0]), 1);
        assert_eq!(count_local_minima(&[3.0, 1.0, 2.0, 1.0, 4.0]), 2);
    }
}
