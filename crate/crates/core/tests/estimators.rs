use qre_core::critic::{critic_update_sampled, sample_trajectory, sample_trajectory_seeded, RetraceConfig};
use qre_core::game::{
    evaluate_soft_q, stationary_distribution, GameDefinition, RewardBounds, SoftBootstrap, DEFAULT_JOINT_CAP,
};
use qre_core::rng::{rng_for, stream};
use qre_core::{JointPolicy, MarkovGame, QEstimate, Rationality};

fn single_agent(transitions: Vec<Vec<Vec<f64>>>, rewards: Vec<Vec<f64>>, discount: f64) -> MarkovGame {
    let ns = transitions.len();
    let na = transitions[0].len();
    let flat: Vec<f64> = rewards.iter().flatten().copied().collect();
    let (lo, hi) = flat.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), x| (l.min(*x), h.max(*x)));
    MarkovGame::new(GameDefinition {
        state_labels: (0..ns).map(|s| format!("s{s}")).collect(),
        action_labels: vec![(0..na).map(|a| format!("a{a}")).collect()],
        transitions,
        rewards: vec![rewards],
        reward_bounds: RewardBounds { min: lo, max: hi },
        discount,
        initial: vec![1.0 / ns as f64; ns],
        reward_noise: 0.0,
        joint_cap: DEFAULT_JOINT_CAP,
    })
    .unwrap()
}

#[test]
fn empirical_visitation_matches_stationary_distribution() {
    let game = single_agent(
        vec![
            vec![vec![0.1, 0.6, 0.3], vec![0.5, 0.5, 0.0]],
            vec![vec![0.0, 0.2, 0.8], vec![0.7, 0.1, 0.2]],
            vec![vec![0.4, 0.4, 0.2], vec![0.3, 0.0, 0.7]],
        ],
        vec![vec![0.0; 2]; 3],
        0.9,
    );
    let policy = JointPolicy::from_rows(vec![vec![vec![0.3, 0.7], vec![0.5, 0.5], vec![0.9, 0.1]]]).unwrap();
    let rho = stationary_distribution(&game, &policy).unwrap();
    let n = 100_000;
    let traj = sample_trajectory_seeded(&game, &policy, n, 11, Some(0)).unwrap();
    let mut counts = [0.0; 3];
    for s in traj.states() {
        counts[s] += 1.0 / n as f64;
    }
    let tv = 0.5 * counts.iter().zip(&rho).map(|(c, r)| (c - r).abs()).sum::<f64>();
    assert!(tv <= 0.01, "TV {tv} between visitation {counts:?} and stationary {rho:?}");
}

#[test]
fn sampled_critic_converges_to_soft_q() {
    // deterministic ring, so retrace targets carry no sampling noise
    let ring: Vec<Vec<Vec<f64>>> = (0..4)
        .map(|s| {
            (0..2)
                .map(|a| {
                    let mut row = vec![0.0; 4];
                    row[(s + 1 + a) % 4] = 1.0;
                    row
                })
                .collect()
        })
        .collect();
    let rewards = vec![vec![1.0, 0.0], vec![0.2, 0.5], vec![-0.3, 0.1], vec![0.0, 0.8]];
    let game = single_agent(ring, rewards, 0.8);
    let rat = Rationality::homogeneous(1, 2.0);
    let policy = JointPolicy::from_rows(vec![vec![vec![0.6, 0.4], vec![0.3, 0.7], vec![0.5, 0.5], vec![0.8, 0.2]]]).unwrap();
    let exact = evaluate_soft_q(&game, &policy, &rat, SoftBootstrap::LogSumExp, 1e-12).unwrap();
    let cfg = RetraceConfig {
        lambda_bar: 0.9,
        horizon: 8,
        ..RetraceConfig::default()
    };
    let mut q = QEstimate::zeros(&game).with_target(0.5).unwrap();
    let mut rng = rng_for(2, stream::CRITIC);
    for _ in 0..400 {
        let batch: Vec<_> = (0..4)
            .map(|_| sample_trajectory(&game, &policy, cfg.horizon, &mut rng, None).unwrap())
            .collect();
        q = critic_update_sampled(&game, &q, &batch, &policy, &rat, &cfg, 0.5).unwrap();
    }
    let err = q.sup_distance(&exact);
    assert!(err <= 1e-3, "critic error {err}");
}
