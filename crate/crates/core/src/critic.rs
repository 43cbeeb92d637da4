//! Sampled-mode critic: trajectory rollouts, retrace(λ̄) targets and the
//! tabular regression step toward them.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{soft_lse_values, JointPolicy, MarkovGame, QEstimate, Rationality, SoftBootstrap};
use crate::numeric;
use crate::rng::{rng_for, stream};

/// One transition `(s_t, a_t, r_t, s_{t+1})` with its behavior probability `μ(a_t|s_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub state: usize,
    pub joint: usize,
    pub rewards: Vec<f64>,
    pub next_state: usize,
    pub behavior_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn states(&self) -> impl Iterator<Item = usize> + '_ {
        self.steps.iter().map(|s| s.state)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetraceConfig {
    /// λ̄ ∈ [0, 1].
    pub lambda_bar: f64,
    pub horizon: usize,
    #[serde(default)]
    pub bootstrap: SoftBootstrap,
}

impl Default for RetraceConfig {
    fn default() -> Self {
        Self {
            lambda_bar: 0.9,
            horizon: 16,
            bootstrap: SoftBootstrap::LogSumExp,
        }
    }
}

impl RetraceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_bar) {
            return Err(Error::InvalidArgument(format!(
                "retrace lambda must lie in [0, 1], got {}",
                self.lambda_bar
            )));
        }
        if self.horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be at least 1".into()));
        }
        Ok(())
    }
}

fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    // rounding: fall back to the last index with positive mass
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

fn sample_sparse<R: Rng + ?Sized>(row: &[(usize, f64)], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(t, p) in row {
        acc += p;
        if u < acc {
            return t;
        }
    }
    row.last().map_or(0, |&(t, _)| t)
}

/// Rolls out `policy` for `horizon` steps. The start state is drawn from the
/// game's initial distribution unless given; every agent samples its action
/// independently and `μ` records the product of their probabilities.
pub fn sample_trajectory<R: Rng + ?Sized>(
    game: &MarkovGame,
    policy: &JointPolicy,
    horizon: usize,
    rng: &mut R,
    start: Option<usize>,
) -> Result<Trajectory> {
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be at least 1".into()));
    }
    let mut state = match start {
        Some(s) if s < game.n_states() => s,
        Some(s) => return Err(Error::InvalidArgument(format!("no state {s}"))),
        None => sample_index(game.initial(), rng),
    };
    let space = game.joint();
    let noise = game.reward_noise();
    let mut steps = Vec::with_capacity(horizon);
    let mut actions = vec![0; game.n_agents()];
    for _ in 0..horizon {
        let mut mu = 1.0;
        for (i, a) in actions.iter_mut().enumerate() {
            let row = policy.row(i, state);
            *a = sample_index(row, rng);
            mu *= row[*a];
        }
        let joint = space.encode(&actions);
        let rewards = (0..game.n_agents())
            .map(|i| {
                let r = game.reward(i, state, joint);
                if noise > 0.0 {
                    let z: f64 = StandardNormal.sample(rng);
                    r + noise * z
                } else {
                    r
                }
            })
            .collect();
        let next_state = sample_sparse(game.transition(state, joint), rng);
        steps.push(Step {
            state,
            joint,
            rewards,
            next_state,
            behavior_prob: mu,
        });
        state = next_state;
    }
    Ok(Trajectory { steps })
}

/// Convenience wrapper seeding the rollout stream from `seed`.
pub fn sample_trajectory_seeded(
    game: &MarkovGame,
    policy: &JointPolicy,
    horizon: usize,
    seed: u64,
    start: Option<usize>,
) -> Result<Trajectory> {
    let mut rng = rng_for(seed, stream::ROLLOUT);
    sample_trajectory(game, policy, horizon, &mut rng, start)
}

/// Soft state values of the target critic, one table per agent.
pub fn target_soft_values(
    game: &MarkovGame,
    q: &QEstimate,
    policy: &JointPolicy,
    rationality: &Rationality,
    bootstrap: SoftBootstrap,
) -> Result<Vec<Vec<f64>>> {
    (0..game.n_agents())
        .map(|i| {
            let alpha = rationality.params(i)?.alpha();
            Ok(match bootstrap {
                SoftBootstrap::LogSumExp => soft_lse_values(game, policy, q.target_table(i), i, alpha),
                SoftBootstrap::Expectation => q
                    .target_marginal(game, policy, i)
                    .iter()
                    .enumerate()
                    .map(|(s, row)| {
                        let pi = policy.row(i, s);
                        numeric::dot(pi, row) + alpha * numeric::entropy(pi)
                    })
                    .collect(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetraceTargets {
    /// `targets[t][i]`.
    pub targets: Vec<Vec<f64>>,
    /// Truncated importance weights `c_t = λ̄ min(1, π(a_t|s_t) / μ(a_t|s_t))`.
    pub traces: Vec<f64>,
}

/// Retrace targets
/// `y_t = Q̄(s_t, a_t) + Σ_{j ≥ t} γ^{j−t} (Π_{ℓ=t}^{j−1} c_ℓ) δ_j` with
/// `δ_j = r_j + γ V̄^soft(s_{j+1}) − Q̄(s_j, a_j)`, bootstrapped from the target copy.
pub fn retrace_targets(
    game: &MarkovGame,
    traj: &Trajectory,
    q: &QEstimate,
    policy: &JointPolicy,
    rationality: &Rationality,
    cfg: &RetraceConfig,
) -> Result<RetraceTargets> {
    let values = target_soft_values(game, q, policy, rationality, cfg.bootstrap)?;
    retrace_with_values(game, traj, q, policy, cfg, &values)
}

fn retrace_with_values(
    game: &MarkovGame,
    traj: &Trajectory,
    q: &QEstimate,
    policy: &JointPolicy,
    cfg: &RetraceConfig,
    values: &[Vec<f64>],
) -> Result<RetraceTargets> {
    cfg.validate()?;
    let nj = game.n_joint();
    let gamma = game.discount();
    let h = traj.len();

    let mut traces = Vec::with_capacity(h);
    for (t, step) in traj.steps.iter().enumerate() {
        if !(step.behavior_prob > 0.0 && step.behavior_prob <= 1.0 + 1e-12) {
            return Err(Error::DataCorruption(format!(
                "behavior probability {} at step {t}",
                step.behavior_prob
            )));
        }
        let pi = policy.joint_prob(game, step.state, step.joint);
        traces.push(cfg.lambda_bar * (pi / step.behavior_prob).min(1.0));
    }

    let mut targets = vec![vec![0.0; game.n_agents()]; h];
    for i in 0..game.n_agents() {
        let table = q.target_table(i);
        // G_t = δ_t + γ c_t G_{t+1}
        let mut g_next = 0.0;
        for t in (0..h).rev() {
            let step = &traj.steps[t];
            let q_sa = table[step.state * nj + step.joint];
            let delta = step.rewards[i] + gamma * values[i][step.next_state] - q_sa;
            let g = if t + 1 < h {
                delta + gamma * traces[t] * g_next
            } else {
                delta
            };
            targets[t][i] = q_sa + g;
            g_next = g;
        }
    }
    Ok(RetraceTargets { targets, traces })
}

/// One regression step of the tabular critic toward retrace targets.
///
/// Visited `(i, s, a)` entries move by `η_Q (ȳ − Q)` where `ȳ` is the mean
/// target over the batch visits of that entry; the target copy is then
/// soft-updated and marginals refreshed under `policy`. `η_Q = 0` is a no-op.
pub fn critic_update_sampled(
    game: &MarkovGame,
    q: &QEstimate,
    batch: &[Trajectory],
    policy: &JointPolicy,
    rationality: &Rationality,
    cfg: &RetraceConfig,
    eta_q: f64,
) -> Result<QEstimate> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty trajectory batch".into()));
    }
    if !(0.0..=1.0).contains(&eta_q) {
        return Err(Error::InvalidArgument(format!("critic step must lie in [0, 1], got {eta_q}")));
    }
    if eta_q == 0.0 {
        return Ok(q.clone());
    }
    let nj = game.n_joint();
    let size = game.n_states() * nj;
    let values = target_soft_values(game, q, policy, rationality, cfg.bootstrap)?;
    let mut sums = vec![vec![0.0; size]; game.n_agents()];
    let mut counts = vec![0u32; size];
    for traj in batch {
        let tg = retrace_with_values(game, traj, q, policy, cfg, &values)?;
        for (step, y) in traj.steps.iter().zip(&tg.targets) {
            let idx = step.state * nj + step.joint;
            counts[idx] += 1;
            for (i, yi) in y.iter().enumerate() {
                sums[i][idx] += yi;
            }
        }
    }
    let mut out = q.clone();
    for i in 0..game.n_agents() {
        for idx in 0..size {
            if counts[idx] > 0 {
                let mean = sums[i][idx] / counts[idx] as f64;
                let cur = out.joint[i][idx];
                out.joint[i][idx] = cur + eta_q * (mean - cur);
            }
        }
    }
    out.soft_update_target();
    out.refresh_marginals(game, policy);
    Ok(out)
}

/// Writes trajectories as CSV: `traj,t,state,joint_action,reward_0..reward_{N-1},next_state,mu`.
pub fn write_trajectories<W: Write>(writer: W, game: &MarkovGame, trajectories: &[Trajectory]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["traj".to_string(), "t".into(), "state".into(), "joint_action".into()];
    header.extend((0..game.n_agents()).map(|i| format!("reward_{i}")));
    header.push("next_state".into());
    header.push("mu".into());
    w.write_record(&header)?;
    for (k, traj) in trajectories.iter().enumerate() {
        for (t, step) in traj.steps.iter().enumerate() {
            let mut rec = vec![
                k.to_string(),
                t.to_string(),
                step.state.to_string(),
                step.joint.to_string(),
            ];
            rec.extend(step.rewards.iter().map(|r| format!("{r:?}")));
            rec.push(step.next_state.to_string());
            rec.push(format!("{:?}", step.behavior_prob));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads the format of [`write_trajectories`], validating indices against `game`.
pub fn read_trajectories<R: Read>(reader: R, game: &MarkovGame) -> Result<Vec<Trajectory>> {
    let mut r = csv::Reader::from_reader(reader);
    let n = game.n_agents();
    let mut out: Vec<Trajectory> = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != 6 + n {
            return Err(Error::DataCorruption(format!("row {line}: expected {} fields", 6 + n)));
        }
        let field = |k: usize| -> Result<&str> { Ok(rec.get(k).unwrap_or_default()) };
        let parse_usize = |k: usize| -> Result<usize> {
            field(k)?
                .parse()
                .map_err(|_| Error::DataCorruption(format!("row {line}: bad integer in column {k}")))
        };
        let parse_f64 = |k: usize| -> Result<f64> {
            field(k)?
                .parse()
                .map_err(|_| Error::DataCorruption(format!("row {line}: bad number in column {k}")))
        };
        let traj = parse_usize(0)?;
        let state = parse_usize(2)?;
        let joint = parse_usize(3)?;
        let rewards = (0..n).map(|i| parse_f64(4 + i)).collect::<Result<Vec<_>>>()?;
        let next_state = parse_usize(4 + n)?;
        let mu = parse_f64(5 + n)?;
        if state >= game.n_states() || next_state >= game.n_states() || joint >= game.n_joint() {
            return Err(Error::DataCorruption(format!("row {line}: index out of range")));
        }
        if !game.transition(state, joint).iter().any(|&(t, _)| t == next_state) {
            return Err(Error::DataCorruption(format!(
                "row {line}: transition {state} -> {next_state} has zero probability"
            )));
        }
        while out.len() <= traj {
            out.push(Trajectory::default());
        }
        out[traj].steps.push(Step {
            state,
            joint,
            rewards,
            next_state,
            behavior_prob: mu,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{GameDefinition, RewardBounds, DEFAULT_JOINT_CAP};
    use crate::rng::SimRng;
    use rand::SeedableRng;

    fn pd() -> MarkovGame {
        let row = vec![vec![3.0, 0.0], vec![5.0, 1.0]];
        let col = vec![vec![3.0, 5.0], vec![0.0, 1.0]];
        MarkovGame::bimatrix(&row, &col, 0.0).unwrap()
    }

    fn ring(gamma: f64) -> MarkovGame {
        // deterministic 3-cycle, one agent with one action
        MarkovGame::new(GameDefinition {
            state_labels: vec!["a".into(), "b".into(), "c".into()],
            action_labels: vec![vec!["go".into()]],
            transitions: vec![
                vec![vec![0.0, 1.0, 0.0]],
                vec![vec![0.0, 0.0, 1.0]],
                vec![vec![1.0, 0.0, 0.0]],
            ],
            rewards: vec![vec![vec![1.0], vec![2.0], vec![3.0]]],
            reward_bounds: RewardBounds { min: 0.0, max: 3.0 },
            discount: gamma,
            initial: vec![1.0, 0.0, 0.0],
            reward_noise: 0.0,
            joint_cap: DEFAULT_JOINT_CAP,
        })
        .unwrap()
    }

    #[test]
    fn deterministic_game_gives_unique_path() {
        let g = ring(0.9);
        let traj = sample_trajectory_seeded(&g, &JointPolicy::uniform(&g), 5, 3, None).unwrap();
        let states: Vec<usize> = traj.states().collect();
        assert_eq!(states, vec![0, 1, 2, 0, 1]);
        assert!(traj.steps.iter().all(|s| s.behavior_prob == 1.0));
    }

    #[test]
    fn single_state_game_stays_put() {
        let g = pd();
        let traj = sample_trajectory_seeded(&g, &JointPolicy::uniform(&g), 50, 9, None).unwrap();
        assert!(traj.steps.iter().all(|s| s.state == 0 && s.next_state == 0));
        assert!(traj.steps.iter().all(|s| s.behavior_prob == 0.25));
    }

    #[test]
    fn zero_retrace_lambda_is_one_step_td() {
        let g = ring(0.8);
        let policy = JointPolicy::uniform(&g);
        let mut q = QEstimate::zeros(&g);
        q.joint[0] = vec![0.5, -1.0, 2.0];
        let q = q.with_target(1.0).unwrap();
        let rat = Rationality::homogeneous(1, 2.0);
        let traj = sample_trajectory_seeded(&g, &policy, 6, 1, None).unwrap();
        let cfg = RetraceConfig { lambda_bar: 0.0, horizon: 6, ..Default::default() };
        let tg = retrace_targets(&g, &traj, &q, &policy, &rat, &cfg).unwrap();
        let v = target_soft_values(&g, &q, &policy, &rat, cfg.bootstrap).unwrap();
        for (step, y) in traj.steps.iter().zip(&tg.targets) {
            let q_sa = q.joint[0][step.state];
            let td = q_sa + (step.rewards[0] + 0.8 * v[0][step.next_state] - q_sa);
            assert_eq!(y[0], td);
        }
    }

    #[test]
    fn zero_discount_targets_are_rewards() {
        let g = pd();
        let policy = JointPolicy::uniform(&g);
        let mut q = QEstimate::zeros(&g);
        q.joint[0] = vec![0.25, 7.0, -3.0, 1.5];
        q.joint[1] = vec![1.0, 2.0, 3.0, 4.0];
        let q = q.with_target(0.5).unwrap();
        let traj = sample_trajectory_seeded(&g, &policy, 1, 4, None).unwrap();
        for lambda_bar in [0.0, 0.5, 1.0] {
            let cfg = RetraceConfig { lambda_bar, horizon: 1, ..Default::default() };
            let tg = retrace_targets(&g, &traj, &q, &policy, &Rationality::homogeneous(2, 1.0), &cfg).unwrap();
            let step = &traj.steps[0];
            for i in 0..2 {
                assert!((tg.targets[0][i] - step.rewards[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn traces_are_truncated_and_exact_on_policy() {
        let g = pd();
        let policy = JointPolicy::uniform(&g);
        let q = QEstimate::zeros(&g);
        let traj = sample_trajectory_seeded(&g, &policy, 20, 5, None).unwrap();
        let cfg = RetraceConfig { lambda_bar: 0.7, horizon: 20, ..Default::default() };
        let tg = retrace_targets(&g, &traj, &q, &policy, &Rationality::homogeneous(2, 1.0), &cfg).unwrap();
        assert!(tg.traces.iter().all(|&c| c == 0.7));

        // stale behavior: current policy differs from the logged μ
        let greedy = JointPolicy::pure(&g, &[vec![1], vec![1]]).mix(&policy, 0.1);
        let tg = retrace_targets(&g, &traj, &q, &greedy, &Rationality::homogeneous(2, 1.0), &cfg).unwrap();
        assert!(tg.traces.iter().all(|&c| c <= 0.7 + 1e-15));
        assert!(tg.traces.iter().any(|&c| c < 0.7));
    }

    #[test]
    fn zero_behavior_probability_is_corruption() {
        let g = pd();
        let mut traj = sample_trajectory_seeded(&g, &JointPolicy::uniform(&g), 3, 5, None).unwrap();
        traj.steps[1].behavior_prob = 0.0;
        let err = retrace_targets(
            &g,
            &traj,
            &QEstimate::zeros(&g),
            &JointPolicy::uniform(&g),
            &Rationality::homogeneous(2, 1.0),
            &RetraceConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::DataCorruption(_)));
    }

    #[test]
    fn zero_step_leaves_critic_unchanged() {
        let g = pd();
        let policy = JointPolicy::uniform(&g);
        let q = QEstimate::from_joint(&g, vec![vec![1.0; 4], vec![2.0; 4]], &policy)
            .with_target(0.3)
            .unwrap();
        let batch = vec![sample_trajectory_seeded(&g, &policy, 4, 2, None).unwrap()];
        let out = critic_update_sampled(&g, &q, &batch, &policy, &Rationality::homogeneous(2, 1.0), &RetraceConfig::default(), 0.0)
            .unwrap();
        assert_eq!(out, q);
    }

    #[test]
    fn target_soft_update_is_convex_combination() {
        let g = pd();
        let policy = JointPolicy::uniform(&g);
        let old = QEstimate::from_joint(&g, vec![vec![0.0; 4], vec![0.0; 4]], &policy)
            .with_target(0.25)
            .unwrap();
        let batch = vec![sample_trajectory_seeded(&g, &policy, 8, 2, None).unwrap()];
        let cfg = RetraceConfig { lambda_bar: 1.0, horizon: 8, ..Default::default() };
        let new = critic_update_sampled(&g, &old, &batch, &policy, &Rationality::homogeneous(2, 1.0), &cfg, 0.5).unwrap();
        let target = new.target.as_ref().unwrap();
        for i in 0..2 {
            for k in 0..4 {
                let expect = 0.25 * new.joint[i][k] + 0.75 * old.target.as_ref().unwrap()[i][k];
                assert!((target[i][k] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn trajectory_csv_round_trip() {
        let g = pd().with_reward_noise(0.3).unwrap();
        let policy = JointPolicy::uniform(&g);
        let mut rng = SimRng::seed_from_u64(11);
        let trajs: Vec<Trajectory> = (0..3)
            .map(|_| sample_trajectory(&g, &policy, 4, &mut rng, None).unwrap())
            .collect();
        let mut buf = Vec::new();
        write_trajectories(&mut buf, &g, &trajs).unwrap();
        let back = read_trajectories(buf.as_slice(), &g).unwrap();
        assert_eq!(back, trajs);
    }

    #[test]
    fn trajectory_reader_rejects_impossible_transition() {
        let g = ring(0.5);
        let text = "traj,t,state,joint_action,reward_0,next_state,mu\n0,0,0,0,1.0,2,1.0\n";
        assert!(matches!(read_trajectories(text.as_bytes(), &g), Err(Error::DataCorruption(_))));
    }
}
