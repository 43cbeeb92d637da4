//! Built-in games: classic matrix games as single-state Markov games, a small
//! two-state team game, and two desk-scale traffic games (merge and
//! unsignalized intersection) with reward perturbation and rollout statistics.
//!
//! Traffic layout: every agent moves along its own 1-D track of cells
//! `0..=L`, where `L` is an absorbing goal. Actions are `wait` and `go`
//! (advance one cell). In the merge game the tracks join at cell `m`, so cells
//! `m..L` are shared; in the intersection game the tracks cross at cell `c`
//! only. Two agents sharing a shared non-goal cell after a move collide.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{run_evoqre, EvoQreConfig, StepSizes, TemperatureSchedule};
use crate::error::{Error, Result};
use crate::game::{GameDefinition, JointPolicy, MarkovGame, Rationality, RewardBounds, DEFAULT_JOINT_CAP};
use crate::numeric;
use crate::oracle::{solve_qre_fixed_point, LogitBrConfig};
use crate::rng::{rng_for, stream};

pub const MAX_TRAFFIC_AGENTS: usize = 4;

pub fn prisoners_dilemma() -> MarkovGame {
    let row = vec![vec![3.0, 0.0], vec![5.0, 1.0]];
    let col = vec![vec![3.0, 5.0], vec![0.0, 1.0]];
    MarkovGame::bimatrix(&row, &col, 0.0).expect("valid game")
}

pub fn matching_pennies() -> MarkovGame {
    let row = vec![vec![1.0, -1.0], vec![-1.0, 1.0]];
    let col = vec![vec![-1.0, 1.0], vec![1.0, -1.0]];
    MarkovGame::bimatrix(&row, &col, 0.0).expect("valid game")
}

pub fn coordination() -> MarkovGame {
    let m = vec![vec![2.0, 0.0], vec![0.0, 1.0]];
    MarkovGame::bimatrix(&m, &m, 0.0).expect("valid game")
}

pub fn rock_paper_scissors() -> MarkovGame {
    let row = vec![vec![0.0, -1.0, 1.0], vec![1.0, 0.0, -1.0], vec![-1.0, 1.0, 0.0]];
    let col: Vec<Vec<f64>> = row.iter().map(|r| r.iter().map(|x| -x).collect()).collect();
    MarkovGame::bimatrix(&row, &col, 0.0).expect("valid game")
}

/// General-sum 3×3 game with an interior-leaning equilibrium.
pub fn three_action() -> MarkovGame {
    let row = vec![vec![3.0, 0.0, 2.0], vec![1.0, 2.0, 0.0], vec![0.0, 1.0, 3.0]];
    let col = vec![vec![1.0, 3.0, 0.0], vec![2.0, 0.0, 1.0], vec![0.0, 2.0, 2.0]];
    MarkovGame::bimatrix(&row, &col, 0.0).expect("valid game")
}

/// Two-agent game with payoffs drawn uniformly from `[0, 1]`.
pub fn random_matrix_game(rows: usize, cols: usize, seed: u64) -> Result<MarkovGame> {
    let mut rng = rng_for(seed, stream::SCENARIO);
    let mut draw = || -> Vec<Vec<f64>> {
        (0..rows).map(|_| (0..cols).map(|_| rng.random::<f64>()).collect()).collect()
    };
    let row = draw();
    let col = draw();
    MarkovGame::bimatrix(&row, &col, 0.0)
}

/// Team game with additively separable payoff `R(a_1, a_2) = f(a_1) + g(a_2)`
/// shared by both agents.
pub fn separable_team(f: &[f64], g: &[f64]) -> Result<MarkovGame> {
    let payoff: Vec<f64> = f.iter().flat_map(|x| g.iter().map(move |y| x + y)).collect();
    MarkovGame::matrix_game(&[f.len(), g.len()], vec![payoff.clone(), payoff], 0.0)
}

/// Two-state, two-agent team game with action-dependent transitions.
pub fn two_state_team(discount: f64) -> Result<MarkovGame> {
    // joint action index = 2 a_1 + a_2
    let r0 = [1.0, 0.0, 0.0, 0.6];
    let r1 = [0.2, 0.7, 0.5, 0.0];
    let stay0 = [0.8, 0.3, 0.4, 0.7];
    let stay1 = [0.5, 0.9, 0.6, 0.2];
    let transitions = vec![
        stay0.iter().map(|p| vec![*p, 1.0 - p]).collect(),
        stay1.iter().map(|p| vec![1.0 - p, *p]).collect(),
    ];
    let rewards = vec![r0.to_vec(), r1.to_vec()];
    MarkovGame::new(GameDefinition {
        state_labels: vec!["s0".into(), "s1".into()],
        action_labels: vec![vec!["a".into(), "b".into()], vec!["a".into(), "b".into()]],
        transitions,
        rewards: vec![rewards.clone(), rewards],
        reward_bounds: RewardBounds { min: 0.0, max: 1.0 },
        discount,
        initial: vec![0.5, 0.5],
        reward_noise: 0.0,
        joint_cap: DEFAULT_JOINT_CAP,
    })
}

/// Single-agent chain of `n` states with two actions. Every transition lands
/// on a uniformly random state; mean rewards are `0.1·s − 0.2·a` and sampled
/// rewards carry `N(0, noise²)` noise.
pub fn noisy_chain(n: usize, discount: f64, noise: f64) -> Result<MarkovGame> {
    if n == 0 {
        return Err(Error::InvalidArgument("chain needs at least one state".into()));
    }
    let uniform = vec![1.0 / n as f64; n];
    let rewards: Vec<Vec<f64>> = (0..n).map(|s| vec![0.1 * s as f64, 0.1 * s as f64 - 0.2]).collect();
    let max = 0.1 * (n - 1) as f64;
    MarkovGame::new(GameDefinition {
        state_labels: (0..n).map(|s| format!("c{s}")).collect(),
        action_labels: vec![vec!["left".into(), "right".into()]],
        transitions: vec![vec![uniform.clone(), uniform.clone()]; n],
        rewards: vec![rewards],
        reward_bounds: RewardBounds { min: -0.2, max },
        discount,
        initial: vec![1.0 / n as f64; n],
        reward_noise: noise,
        joint_cap: DEFAULT_JOINT_CAP,
    })
}

/// Games available by name from the command line.
pub const BUILTIN_GAMES: &[&str] = &[
    "pd",
    "matching_pennies",
    "coordination",
    "rps",
    "three_action",
    "random",
    "separable_team",
    "two_state_team",
    "noisy_chain",
];

pub fn builtin_game(name: &str) -> Option<MarkovGame> {
    Some(match name {
        "pd" | "prisoners_dilemma" => prisoners_dilemma(),
        "matching_pennies" => matching_pennies(),
        "coordination" => coordination(),
        "rps" => rock_paper_scissors(),
        "three_action" => three_action(),
        "random" => random_matrix_game(3, 3, 0).ok()?,
        "separable_team" => separable_team(&[1.0, 0.0, 0.5], &[0.2, 0.8, 0.0]).ok()?,
        "two_state_team" => two_state_team(0.5).ok()?,
        "noisy_chain" => noisy_chain(8, 0.9, 1.0).ok()?,
        _ => return None,
    })
}

/// Adds independent `N(0, σ²)` noise to every reward entry `R_i(s, a)`.
/// `σ = 0` returns the game unchanged.
pub fn perturb_rewards(game: &MarkovGame, sigma: f64, seed: u64) -> Result<MarkovGame> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("perturbation σ must be nonnegative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(game.clone());
    }
    let mut rng = rng_for(seed, stream::PERTURBATION);
    let rewards: Vec<Vec<f64>> = (0..game.n_agents())
        .map(|i| {
            game.reward_table(i)
                .iter()
                .map(|r| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    r + sigma * z
                })
                .collect()
        })
        .collect();
    let (lo, hi) = rewards
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), x| (l.min(*x), h.max(*x)));
    game.with_rewards(rewards, RewardBounds { min: lo, max: hi })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RationalitySpec {
    Homogeneous(f64),
    PerAgent(Vec<f64>),
    /// λ_i drawn uniformly from `[mean − spread, mean + spread]`.
    Random { mean: f64, spread: f64, seed: u64 },
}

impl Default for RationalitySpec {
    fn default() -> Self {
        RationalitySpec::Homogeneous(1.0)
    }
}

impl RationalitySpec {
    pub fn resolve(&self, n_agents: usize) -> Result<Rationality> {
        match self {
            RationalitySpec::Homogeneous(l) => Rationality::per_agent(vec![*l; n_agents]),
            RationalitySpec::PerAgent(ls) => {
                if ls.len() != n_agents {
                    return Err(Error::Config(format!("{} rationality values for {n_agents} agents", ls.len())));
                }
                Rationality::per_agent(ls.clone())
            }
            RationalitySpec::Random { mean, spread, seed } => {
                if !(*spread >= 0.0) || !(mean - spread > 0.0) {
                    return Err(Error::Config("random rationality needs 0 ≤ spread < mean".into()));
                }
                let mut rng = rng_for(*seed, stream::SCENARIO);
                Rationality::per_agent(
                    (0..n_agents)
                        .map(|_| mean - spread + 2.0 * spread * rng.random::<f64>())
                        .collect(),
                )
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Merge,
    Intersection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct Perturbation {
    #[serde(default)]
    pub sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_agents() -> usize {
    2
}
fn default_length() -> usize {
    4
}
fn default_penalty() -> f64 {
    -10.0
}
fn default_progress() -> f64 {
    1.0
}
fn default_discount() -> f64 {
    0.9
}

/// Declarative description of a traffic scenario, loadable from TOML:
///
/// ```toml
/// scenario = "merge"
/// agents = 2
/// length = 4
/// conflict_cell = 2          # merge point or crossing cell
/// collision_penalty = -10.0
/// progress_reward = 1.0
/// discount = 0.9
/// rationality = { per_agent = [15.0, 2.0] }
/// perturbation = { sigma = 0.1, seed = 3 }
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub scenario: ScenarioKind,
    #[serde(default = "default_agents")]
    pub agents: usize,
    #[serde(default = "default_length")]
    pub length: usize,
    /// Merge point `m` or crossing cell `c`; defaults to `length / 2`.
    #[serde(default)]
    pub conflict_cell: Option<usize>,
    #[serde(default = "default_penalty")]
    pub collision_penalty: f64,
    #[serde(default = "default_progress")]
    pub progress_reward: f64,
    #[serde(default = "default_discount")]
    pub discount: f64,
    /// Start cell per agent; all agents start at 0 by default.
    #[serde(default)]
    pub starts: Option<Vec<usize>>,
    #[serde(default)]
    pub rationality: RationalitySpec,
    #[serde(default)]
    pub perturbation: Perturbation,
}

impl ScenarioSpec {
    pub fn new(scenario: ScenarioKind) -> Self {
        Self {
            scenario,
            agents: default_agents(),
            length: default_length(),
            conflict_cell: None,
            collision_penalty: default_penalty(),
            progress_reward: default_progress(),
            discount: default_discount(),
            starts: None,
            rationality: RationalitySpec::default(),
            perturbation: Perturbation::default(),
        }
    }

    pub fn conflict(&self) -> usize {
        self.conflict_cell.unwrap_or(self.length / 2)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=MAX_TRAFFIC_AGENTS).contains(&self.agents) {
            return Err(Error::Config(format!(
                "traffic scenarios need 2 to {MAX_TRAFFIC_AGENTS} agents, got {}",
                self.agents
            )));
        }
        if self.length < 2 {
            return Err(Error::Config("track length must be at least 2".into()));
        }
        let c = self.conflict();
        if c == 0 || c >= self.length {
            return Err(Error::Config(format!("conflict cell must lie in 1..{}, got {c}", self.length)));
        }
        if !(self.collision_penalty < 0.0) {
            return Err(Error::Config("collision penalty must be negative".into()));
        }
        if !(self.progress_reward > 0.0) {
            return Err(Error::Config("progress reward must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.discount) {
            return Err(Error::Config("discount must lie in [0, 1)".into()));
        }
        if let Some(starts) = &self.starts {
            if starts.len() != self.agents || starts.iter().any(|&p| p > self.length) {
                return Err(Error::Config("one start cell in 0..=length per agent required".into()));
            }
        }
        if !(self.perturbation.sigma >= 0.0) {
            return Err(Error::Config("perturbation σ must be nonnegative".into()));
        }
        Ok(())
    }
}

pub fn parse_scenario_spec(text: &str) -> Result<ScenarioSpec> {
    let spec: ScenarioSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    spec.validate()?;
    Ok(spec)
}

pub fn load_scenario_spec(path: &Path) -> Result<ScenarioSpec> {
    parse_scenario_spec(&std::fs::read_to_string(path)?)
}

/// Geometry needed to classify events along a rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub kind: ScenarioKind,
    pub agents: usize,
    pub length: usize,
    pub conflict: usize,
}

pub const WAIT: usize = 0;
pub const GO: usize = 1;

impl Layout {
    pub fn encode(&self, positions: &[usize]) -> usize {
        positions.iter().fold(0, |acc, &p| acc * (self.length + 1) + p)
    }

    pub fn decode(&self, mut state: usize) -> Vec<usize> {
        let mut out = vec![0; self.agents];
        for slot in out.iter_mut().rev() {
            *slot = state % (self.length + 1);
            state /= self.length + 1;
        }
        out
    }

    pub fn n_states(&self) -> usize {
        (self.length + 1).pow(self.agents as u32)
    }

    fn shared(&self, cell: usize) -> bool {
        match self.kind {
            ScenarioKind::Merge => cell >= self.conflict && cell < self.length,
            ScenarioKind::Intersection => cell == self.conflict,
        }
    }

    /// Positions after `actions` from `positions`.
    pub fn step(&self, positions: &[usize], actions: &[usize]) -> Vec<usize> {
        positions
            .iter()
            .zip(actions)
            .map(|(&p, &a)| if a == GO && p < self.length { p + 1 } else { p })
            .collect()
    }

    /// Agents sharing a shared non-goal cell with some other agent.
    pub fn colliding(&self, positions: &[usize]) -> Vec<bool> {
        (0..self.agents)
            .map(|i| {
                self.shared(positions[i]) && (0..self.agents).any(|j| j != i && positions[j] == positions[i])
            })
            .collect()
    }

    /// Agents responsible for a near miss on the move `before → after`, which
    /// must itself be collision-free. Merge: two agents in the zone
    /// `[m − 1, L − 1]` end up at most one cell apart after the gap between
    /// them shrank; the rear agent that advanced is blamed. Intersection: two
    /// agents end up in `{c − 1, c}` with at least one of them having just
    /// advanced into it; each advancing agent is blamed.
    pub fn near_miss(&self, before: &[usize], after: &[usize]) -> Vec<bool> {
        let mut blame = vec![false; self.agents];
        for i in 0..self.agents {
            for j in (i + 1)..self.agents {
                match self.kind {
                    ScenarioKind::Merge => {
                        let zone = |p: usize| p + 1 >= self.conflict && p < self.length;
                        if !(zone(after[i]) && zone(after[j])) {
                            continue;
                        }
                        let gap_before = before[i].abs_diff(before[j]);
                        let gap_after = after[i].abs_diff(after[j]);
                        if gap_after <= 1 && gap_after < gap_before {
                            let rear = if after[i] <= after[j] { i } else { j };
                            if after[rear] > before[rear] {
                                blame[rear] = true;
                            }
                        }
                    }
                    ScenarioKind::Intersection => {
                        let zone = |p: usize| p + 1 == self.conflict || p == self.conflict;
                        if !(zone(after[i]) && zone(after[j])) {
                            continue;
                        }
                        for k in [i, j] {
                            if after[k] > before[k] {
                                blame[k] = true;
                            }
                        }
                    }
                }
            }
        }
        blame
    }
}

/// A built traffic game with its geometry and the spec's rationality.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    pub layout: Layout,
    pub game: MarkovGame,
    pub rationality: Rationality,
}

/// Builds the merge or intersection game described by `spec`.
pub fn build_scenario(spec: &ScenarioSpec) -> Result<Scenario> {
    spec.validate()?;
    let layout = Layout {
        kind: spec.scenario,
        agents: spec.agents,
        length: spec.length,
        conflict: spec.conflict(),
    };
    let sizes = vec![2; spec.agents];
    let space = crate::game::JointActionSpace::new(&sizes, DEFAULT_JOINT_CAP)?;
    let ns = layout.n_states();
    let nj = space.count();
    let mut transitions = Vec::with_capacity(ns);
    let mut rewards = vec![vec![vec![0.0; nj]; ns]; spec.agents];
    for s in 0..ns {
        let pos = layout.decode(s);
        let mut rows = Vec::with_capacity(nj);
        for a in 0..nj {
            let actions = space.decode(a);
            let next = layout.step(&pos, &actions);
            let mut row = vec![0.0; ns];
            row[layout.encode(&next)] = 1.0;
            rows.push(row);
            let hits = layout.colliding(&next);
            for i in 0..spec.agents {
                let mut r = 0.0;
                if next[i] > pos[i] {
                    r += spec.progress_reward;
                }
                if hits[i] {
                    r += spec.collision_penalty;
                }
                rewards[i][s][a] = r;
            }
        }
        transitions.push(rows);
    }
    let starts = spec.starts.clone().unwrap_or_else(|| vec![0; spec.agents]);
    let mut initial = vec![0.0; ns];
    initial[layout.encode(&starts)] = 1.0;

    let labels = (0..ns)
        .map(|s| {
            layout
                .decode(s)
                .iter()
                .map(|p| p.to_string())
                .collect::<Vec<_>>()
                .join("-")
        })
        .collect();
    let game = MarkovGame::new(GameDefinition {
        state_labels: labels,
        action_labels: vec![vec!["wait".into(), "go".into()]; spec.agents],
        transitions,
        rewards,
        reward_bounds: RewardBounds {
            min: spec.collision_penalty,
            max: spec.progress_reward,
        },
        discount: spec.discount,
        initial,
        reward_noise: 0.0,
        joint_cap: DEFAULT_JOINT_CAP,
    })?;
    let game = perturb_rewards(&game, spec.perturbation.sigma, spec.perturbation.seed)?;
    Ok(Scenario {
        spec: spec.clone(),
        layout,
        rationality: spec.rationality.resolve(spec.agents)?,
        game,
    })
}

/// Monte-Carlo safety statistics; rates are fractions of episodes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SafetyStats {
    pub episodes: usize,
    pub collision_rate: f64,
    pub collision_se: f64,
    pub pass_rate: f64,
    pub pass_se: f64,
    pub near_miss_rate: f64,
    pub near_miss_se: f64,
    /// Fraction of episodes in which agent `i` was blamed for a near miss.
    pub agent_near_miss: Vec<f64>,
    /// Fraction of episodes in which agent `i` was involved in a collision.
    pub agent_collision: Vec<f64>,
    /// Mean decision entropy of agents still en route, over visited steps.
    pub visited_entropy: f64,
}

fn rate(count: usize, n: usize) -> (f64, f64) {
    let p = count as f64 / n as f64;
    (p, (p * (1.0 - p) / n as f64).sqrt())
}

/// Rolls out `policy` from the scenario's start state and counts events.
pub fn rollout_stats(scenario: &Scenario, policy: &JointPolicy, episodes: usize, horizon: usize, seed: u64) -> Result<SafetyStats> {
    if episodes == 0 || horizon == 0 {
        return Err(Error::InvalidArgument("need at least one episode and one step".into()));
    }
    let game = &scenario.game;
    let layout = &scenario.layout;
    policy.check_shape(game)?;
    let mut rng = rng_for(seed, stream::SCENARIO);
    let n = layout.agents;
    let start = game.initial().iter().position(|&p| p > 0.0).unwrap_or(0);
    let (mut collisions, mut passes, mut near) = (0, 0, 0);
    let mut agent_near = vec![0usize; n];
    let mut agent_coll = vec![0usize; n];
    let (mut entropy_sum, mut entropy_count) = (0.0, 0usize);
    let mut actions = vec![0; n];
    for _ in 0..episodes {
        let mut pos = layout.decode(start);
        let mut ep_coll = vec![false; n];
        let mut ep_near = vec![false; n];
        for _ in 0..horizon {
            if pos.iter().all(|&p| p == layout.length) {
                break;
            }
            let s = layout.encode(&pos);
            for (i, a) in actions.iter_mut().enumerate() {
                let row = policy.row(i, s);
                if pos[i] < layout.length {
                    entropy_sum += numeric::entropy(row);
                    entropy_count += 1;
                }
                let u: f64 = rng.random();
                *a = if u < row[WAIT] { WAIT } else { GO };
            }
            let next = layout.step(&pos, &actions);
            let hits = layout.colliding(&next);
            if hits.iter().any(|&h| h) {
                for i in 0..n {
                    ep_coll[i] |= hits[i];
                }
            } else {
                for (i, b) in layout.near_miss(&pos, &next).into_iter().enumerate() {
                    ep_near[i] |= b;
                }
            }
            pos = next;
        }
        collisions += usize::from(ep_coll.iter().any(|&c| c));
        near += usize::from(ep_near.iter().any(|&c| c));
        passes += usize::from(pos.iter().all(|&p| p == layout.length));
        for i in 0..n {
            agent_coll[i] += usize::from(ep_coll[i]);
            agent_near[i] += usize::from(ep_near[i]);
        }
    }
    let (collision_rate, collision_se) = rate(collisions, episodes);
    let (pass_rate, pass_se) = rate(passes, episodes);
    let (near_miss_rate, near_miss_se) = rate(near, episodes);
    Ok(SafetyStats {
        episodes,
        collision_rate,
        collision_se,
        pass_rate,
        pass_se,
        near_miss_rate,
        near_miss_se,
        agent_near_miss: agent_near.iter().map(|&c| c as f64 / episodes as f64).collect(),
        agent_collision: agent_coll.iter().map(|&c| c as f64 / episodes as f64).collect(),
        visited_entropy: if entropy_count > 0 { entropy_sum / entropy_count as f64 } else { 0.0 },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum SolveMethod {
    /// Exact-mode EvoQRE with fixed rationality.
    EvoQre { iters: usize, steps: StepSizes },
    Oracle(LogitBrConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub method: SolveMethod,
    pub episodes: usize,
    pub horizon: usize,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            method: SolveMethod::EvoQre {
                iters: 20_000,
                steps: StepSizes::default(),
            },
            episodes: 20_000,
            horizon: 30,
            seed: 0,
        }
    }
}

/// Solves `game` at `rationality`; all-zero rationality yields the uniform policy.
pub fn solve_policy(game: &MarkovGame, rationality: &Rationality, method: &SolveMethod, seed: u64) -> Result<JointPolicy> {
    if rationality.lambdas().iter().all(|&l| l == 0.0) {
        return Ok(JointPolicy::uniform(game));
    }
    match method {
        SolveMethod::EvoQre { iters, steps } => {
            let mut cfg = EvoQreConfig::new(TemperatureSchedule::fixed(rationality.clone()), *iters);
            cfg.steps = *steps;
            cfg.trace_every = *iters;
            Ok(run_evoqre(game, &cfg, seed)?.state.policy)
        }
        SolveMethod::Oracle(cfg) => Ok(solve_qre_fixed_point(game, rationality, cfg, None)?.policy),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub stats: Option<SafetyStats>,
    /// Mean decision entropy along rollouts.
    pub entropy: f64,
    /// Mean entropy over all agents and states.
    pub table_entropy: f64,
    pub error: Option<String>,
}

/// One solve and one batch of rollouts per λ. Failures are recorded in the
/// row and the sweep continues.
pub fn lambda_sweep(scenario: &Scenario, lambdas: &[f64], cfg: &SweepConfig) -> Vec<SweepRow> {
    lambdas
        .iter()
        .map(|&lambda| {
            let result = Rationality::per_agent(vec![lambda; scenario.layout.agents])
                .and_then(|r| solve_policy(&scenario.game, &r, &cfg.method, cfg.seed))
                .and_then(|policy| {
                    let stats = rollout_stats(scenario, &policy, cfg.episodes, cfg.horizon, cfg.seed)?;
                    Ok((policy, stats))
                });
            match result {
                Ok((policy, stats)) => SweepRow {
                    lambda,
                    entropy: stats.visited_entropy,
                    table_entropy: policy.mean_entropy(),
                    stats: Some(stats),
                    error: None,
                },
                Err(e) => SweepRow {
                    lambda,
                    stats: None,
                    entropy: f64::NAN,
                    table_entropy: f64::NAN,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn merge(length: usize) -> ScenarioSpec {
        ScenarioSpec {
            length,
            ..ScenarioSpec::new(ScenarioKind::Merge)
        }
    }

    #[test]
    fn merge_counts() {
        let sc = build_scenario(&merge(4)).unwrap();
        assert_eq!(sc.game.n_states(), 25);
        assert_eq!(sc.game.n_agents(), 2);
        assert_eq!(sc.game.n_actions(0), 2);
        assert_eq!(sc.game.n_joint(), 4);
        let four = build_scenario(&ScenarioSpec { agents: 4, ..merge(4) }).unwrap();
        assert_eq!(four.game.n_states(), 625);
        assert_eq!(four.game.n_joint(), 16);
    }

    #[test]
    fn layout_round_trip() {
        let l = build_scenario(&merge(4)).unwrap().layout;
        for s in 0..l.n_states() {
            assert_eq!(l.encode(&l.decode(s)), s);
        }
        assert_eq!(l.decode(l.encode(&[3, 1])), vec![3, 1]);
    }

    #[test]
    fn builds_are_deterministic() {
        let spec = merge(4);
        assert_eq!(build_scenario(&spec).unwrap().game, build_scenario(&spec).unwrap().game);
        let noisy = ScenarioSpec {
            perturbation: Perturbation { sigma: 0.3, seed: 5 },
            ..spec
        };
        let a = build_scenario(&noisy).unwrap().game;
        assert_eq!(a, build_scenario(&noisy).unwrap().game);
        assert_ne!(a, build_scenario(&merge(4)).unwrap().game);
    }

    #[test]
    fn waiting_apart_never_collides() {
        let spec = ScenarioSpec {
            starts: Some(vec![0, 1]),
            ..merge(4)
        };
        let sc = build_scenario(&spec).unwrap();
        let wait = JointPolicy::pure(&sc.game, &[vec![WAIT; 25], vec![WAIT; 25]]);
        let st = rollout_stats(&sc, &wait, 100, 10, 0).unwrap();
        assert_eq!(st.collision_rate, 0.0);
        assert_eq!(st.pass_rate, 0.0);
    }

    #[test]
    fn simultaneous_merge_always_collides() {
        let spec = ScenarioSpec {
            starts: Some(vec![1, 1]),
            ..merge(4)
        };
        let sc = build_scenario(&spec).unwrap();
        let go = JointPolicy::pure(&sc.game, &[vec![GO; 25], vec![GO; 25]]);
        let st = rollout_stats(&sc, &go, 50, 10, 0).unwrap();
        assert_eq!(st.collision_rate, 1.0);
        assert_eq!(st.agent_collision, vec![1.0, 1.0]);
        assert_eq!(st.pass_rate, 1.0);
    }

    #[test]
    fn near_miss_blames_the_closing_rear_agent() {
        let l = build_scenario(&merge(6)).unwrap().layout;
        // m = 3: agent 1 waits at 3, agent 0 closes from 1 to 2
        assert_eq!(l.near_miss(&[1, 3], &[2, 3]), vec![true, false]);
        assert_eq!(l.near_miss(&[2, 3], &[3, 4]), vec![false, false]);
        let x = build_scenario(&ScenarioSpec::new(ScenarioKind::Intersection)).unwrap().layout;
        assert_eq!(x.near_miss(&[2, 0], &[2, 1]), vec![false, true]);
    }

    #[test]
    fn intersection_collides_only_at_crossing() {
        let l = build_scenario(&ScenarioSpec::new(ScenarioKind::Intersection)).unwrap().layout;
        assert_eq!(l.colliding(&[2, 2]), vec![true, true]);
        assert_eq!(l.colliding(&[3, 3]), vec![false, false]);
        assert_eq!(l.colliding(&[4, 4]), vec![false, false]);
    }

    #[test]
    fn zero_lambda_sweep_is_uniform() {
        let sc = build_scenario(&merge(4)).unwrap();
        let rows = lambda_sweep(&sc, &[0.0], &SweepConfig { episodes: 100, ..Default::default() });
        assert!((rows[0].table_entropy - 2f64.ln()).abs() < 1e-15);
        assert!((rows[0].entropy - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn rationality_specs_resolve() {
        assert_eq!(RationalitySpec::Homogeneous(2.0).resolve(3).unwrap().lambdas(), &[2.0, 2.0, 2.0]);
        assert!(RationalitySpec::PerAgent(vec![1.0]).resolve(2).is_err());
        let r = RationalitySpec::Random { mean: 5.0, spread: 1.0, seed: 2 }.resolve(4).unwrap();
        assert!(r.lambdas().iter().all(|l| (4.0..=6.0).contains(l)));
        assert_eq!(r, RationalitySpec::Random { mean: 5.0, spread: 1.0, seed: 2 }.resolve(4).unwrap());
    }

    #[test]
    fn spec_parses_from_toml() {
        let spec = parse_scenario_spec(
            "scenario = \"intersection\"\nagents = 3\nrationality = { per_agent = [15.0, 2.0, 5.0] }\nperturbation = { sigma = 0.1, seed = 3 }\n",
        )
        .unwrap();
        assert_eq!(spec.agents, 3);
        assert_eq!(spec.rationality, RationalitySpec::PerAgent(vec![15.0, 2.0, 5.0]));
        assert!(parse_scenario_spec("scenario = \"merge\"\nagents = 5\n").is_err());
        assert!(parse_scenario_spec("scenario = \"merge\"\ncollision_penalty = 1.0\n").is_err());
    }

    #[test]
    fn builtins_resolve() {
        for name in BUILTIN_GAMES {
            assert!(builtin_game(name).is_some(), "{name}");
        }
        assert!(builtin_game("nope").is_none());
    }

    #[test]
    fn zero_sigma_perturbation_is_identity() {
        let g = prisoners_dilemma();
        assert_eq!(perturb_rewards(&g, 0.0, 9).unwrap(), g);
    }
}
