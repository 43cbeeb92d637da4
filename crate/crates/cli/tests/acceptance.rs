//! Acceptance checks. Each criterion prints one PASS/FAIL line; the process
//! exits non-zero if any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use qre_core::calibration::{calibrate_lambda, generate_behavior, nll_at_lambda, CalibrationConfig};
use qre_core::continuous::{
    continuous_qre_residual, fit_mixture, langevin_chain, quadratic_benchmark, run_svgd, sample_tv, MixtureFitConfig,
    MixtureRow, ParticleSet, BENCHMARK_LAMBDA,
};
use qre_core::critic::{retrace_targets, sample_trajectory, target_soft_values, RetraceConfig};
use qre_core::dynamics::{
    integrate_errd, run_evoqre, CriticMode, EvoQreConfig, OscillationMitigation, SampledCritic, StepSizes,
    TemperatureSchedule, TwoTimescaleSchedule,
};
use qre_core::game::{evaluate_soft_q, SoftBootstrap, SIMPLEX_TOL};
use qre_core::metrics::{monotonicity_residual, softmax_lipschitz_check, MonotonicityConfig};
use qre_core::numeric::log_log_slope;
use qre_core::oracle::{nash_pure_enumeration, solve_qre_fixed_point, LogitBrConfig};
use qre_core::rng::{rng_for, stream};
use qre_core::scenarios::{
    build_scenario, builtin_game, coordination, lambda_sweep, matching_pennies, noisy_chain, perturb_rewards,
    prisoners_dilemma, random_matrix_game, three_action, two_state_team, ScenarioKind, ScenarioSpec, SweepConfig,
};
use qre_core::{JointPolicy, MarkovGame, QEstimate, Rationality};
use rand_distr::{Distribution, Normal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

const LAMBDAS: [f64; 5] = [0.5, 1.0, 2.0, 5.0, 10.0];

fn oracle_games() -> Vec<(&'static str, MarkovGame, Option<JointPolicy>)> {
    // uniform play already is the matching-pennies QRE, so start elsewhere
    let off_center = JointPolicy::from_rows(vec![vec![vec![0.8, 0.2]], vec![vec![0.3, 0.7]]]).unwrap();
    vec![
        ("pd", prisoners_dilemma(), None),
        ("matching_pennies", matching_pennies(), Some(off_center)),
        ("coordination", coordination(), None),
        ("three_action", three_action(), None),
        ("random", random_matrix_game(3, 3, 0).unwrap(), None),
    ]
}

struct EquivalenceCase {
    name: &'static str,
    lambda: f64,
    tv: f64,
    gap: f64,
    displacement: f64,
    elapsed: Duration,
}

fn equivalence_cases() -> Vec<EquivalenceCase> {
    let mut cases = Vec::new();
    for (name, game, init) in oracle_games() {
        for lambda in LAMBDAS {
            let rat = Rationality::homogeneous(2, lambda);
            let oracle = solve_qre_fixed_point(&game, &rat, &LogitBrConfig::default(), None).unwrap();
            let start = Instant::now();
            let mut cfg = EvoQreConfig::new(TemperatureSchedule::fixed(rat), 50_000);
            cfg.trace_every = 50_000;
            cfg.init = init.clone();
            cfg.stop_displacement = Some(1e-9);
            let run = run_evoqre(&game, &cfg, 0).unwrap();
            cases.push(EquivalenceCase {
                name,
                lambda,
                tv: run.state.policy.joint_tv(&oracle.policy),
                gap: run.final_gap,
                displacement: run.displacement,
                elapsed: start.elapsed(),
            });
        }
    }
    cases
}

fn criterion_1(cases: &[EquivalenceCase]) -> Outcome {
    let worst = cases.iter().max_by(|a, b| a.tv.total_cmp(&b.tv)).unwrap();
    let slowest = cases.iter().map(|c| c.elapsed).max().unwrap();
    let pass = cases.iter().all(|c| c.tv <= 1e-3 && c.elapsed < Duration::from_secs(60));
    outcome(
        pass,
        format!(
            "{} cases, max TV {:.2e} ({} at λ={}), slowest {:?}",
            cases.len(),
            worst.tv,
            worst.name,
            worst.lambda,
            slowest
        ),
    )
}

fn criterion_2(cases: &[EquivalenceCase]) -> Outcome {
    let bad: Vec<String> = cases
        .iter()
        .filter(|c| c.gap > 10.0 * c.displacement)
        .map(|c| format!("{} λ={}: gap {:.2e} vs displacement {:.2e}", c.name, c.lambda, c.gap, c.displacement))
        .collect();
    let max_gap = cases.iter().map(|c| c.gap).fold(0.0, f64::max);
    if bad.is_empty() {
        outcome(true, format!("gap ≤ 10·displacement on all {} cases, max gap {max_gap:.2e}", cases.len()))
    } else {
        outcome(false, bad.join("; "))
    }
}

fn criterion_3() -> Outcome {
    let mut worst_uniform = 0.0f64;
    for (_, game, _) in oracle_games() {
        let sol = solve_qre_fixed_point(&game, &Rationality::homogeneous(2, 0.0), &LogitBrConfig::default(), None).unwrap();
        worst_uniform = worst_uniform.max(sol.policy.max_row_l1(&JointPolicy::uniform(&game)));
    }
    let pd = prisoners_dilemma();
    let nash = nash_pure_enumeration(&pd).unwrap();
    let sol = solve_qre_fixed_point(&pd, &Rationality::homogeneous(2, 1e3), &LogitBrConfig::default(), None).unwrap();
    let tv = sol.policy.joint_tv(&nash[0].to_policy(&pd));
    outcome(
        worst_uniform == 0.0 && nash.len() == 1 && tv <= 1e-3,
        format!("λ=0 max deviation from uniform {worst_uniform:e}; λ=1e3 TV to pure Nash {tv:.2e}"),
    )
}

fn criterion_4() -> Outcome {
    let game = two_state_team(0.5).unwrap();
    let rat = Rationality::homogeneous(2, 2.0);
    let oracle = solve_qre_fixed_point(&game, &rat, &LogitBrConfig { tol: 1e-13, ..LogitBrConfig::default() }, None).unwrap();
    let start = Instant::now();
    let mut cfg = EvoQreConfig::new(TemperatureSchedule::fixed(rat), 100_000);
    cfg.steps = StepSizes::TwoTimescale(TwoTimescaleSchedule::new(1.0, 1.0).unwrap());
    cfg.oracle = Some(oracle.policy);
    let run = run_evoqre(&game, &cfg, 0).unwrap();
    let elapsed = start.elapsed();
    // log-spaced sample of the trace, 20 points per decade
    let mut points = Vec::new();
    for j in 40..=100 {
        let k = 10f64.powf(j as f64 / 20.0).round() as usize;
        if let Some(kl) = run.trace[k - 1].kl_to_oracle {
            points.push((k as f64, kl));
        }
    }
    points.dedup_by(|a, b| a.0 == b.0);
    let slope = log_log_slope(&points).unwrap_or(f64::NAN);
    outcome(
        slope <= -0.25 && elapsed < Duration::from_secs(600),
        format!("slope {slope:.3} over {} points, runtime {elapsed:?}", points.len()),
    )
}

fn criterion_5() -> Outcome {
    let (mut l1, mut kl, mut l1_max, mut kl_max, mut pairs) = (0, 0, 0.0f64, 0.0f64, 0);
    for (k, n) in [2usize, 5, 10].into_iter().enumerate() {
        for (j, alpha) in [0.2, 1.0, 5.0].into_iter().enumerate() {
            let c = softmax_lipschitz_check(100_000, n, alpha, 5.0, (3 * k + j) as u64).unwrap();
            l1 += c.l1_violations;
            kl += c.kl_violations;
            l1_max = l1_max.max(c.l1_ratio);
            kl_max = kl_max.max(c.kl_ratio);
            pairs += 100_000 - c.skipped;
        }
    }
    outcome(
        l1 == 0 && kl == 0,
        format!("{pairs} pairs: {l1} L1 and {kl} KL violations, max ratios {l1_max:.3} / {kl_max:.3}"),
    )
}

fn criterion_6() -> Outcome {
    let mut rows_checked = 0usize;
    let mut bad = Vec::new();
    let mut check = |label: &str, p: &JointPolicy| {
        rows_checked += p.rows().count();
        if let Some((i, s)) = p.first_invalid_row(SIMPLEX_TOL) {
            bad.push(format!("{label}: agent {i} state {s}"));
        }
    };
    let games = [
        ("pd", prisoners_dilemma()),
        ("rps", builtin_game("rps").unwrap()),
        ("two_state_team", two_state_team(0.9).unwrap()),
        ("merge", build_scenario(&ScenarioSpec::new(ScenarioKind::Merge)).unwrap().game),
    ];
    for (name, game) in &games {
        let n = game.n_agents();
        for lambda in [1.0, 10.0] {
            let rat = Rationality::homogeneous(n, lambda);
            let mut cfg = EvoQreConfig::new(TemperatureSchedule::fixed(rat.clone()), 2000);
            cfg.trace_every = 2000;
            check(&format!("{name} exact"), &run_evoqre(game, &cfg, 1).unwrap().state.policy);
            cfg.critic = CriticMode::Sampled(SampledCritic::default());
            check(&format!("{name} sampled"), &run_evoqre(game, &cfg, 1).unwrap().state.policy);
            if let Ok(sol) = solve_qre_fixed_point(game, &rat, &LogitBrConfig::default(), None) {
                check(&format!("{name} oracle"), &sol.policy);
            }
            for state in integrate_errd(game, &JointPolicy::uniform(game), 1.0 / lambda, 0.05, 500, 1, 1).unwrap() {
                check(&format!("{name} ode k={}", state.k), &state.policy);
            }
        }
    }
    let per_iteration = cfg!(debug_assertions);
    outcome(
        bad.is_empty() && per_iteration,
        format!(
            "{rows_checked} recorded rows valid within {SIMPLEX_TOL:e}; per-iteration assertions {}{}",
            if per_iteration { "enabled" } else { "DISABLED" },
            if bad.is_empty() { String::new() } else { format!("; violations: {}", bad.join(", ")) }
        ),
    )
}

fn start_targets(game: &MarkovGame, q: &QEstimate, policy: &JointPolicy, rat: &Rationality, lambda_bar: f64, n: usize) -> Vec<(f64, f64)> {
    let cfg = RetraceConfig {
        lambda_bar,
        ..RetraceConfig::default()
    };
    let mut rng = rng_for(99, stream::CRITIC);
    (0..n)
        .map(|_| {
            let traj = sample_trajectory(game, policy, cfg.horizon, &mut rng, Some(0)).unwrap();
            let y = retrace_targets(game, &traj, q, policy, rat, &cfg).unwrap().targets[0][0];
            let s = &traj.steps[0];
            (y, q.joint[0][s.state * game.n_joint() + s.joint])
        })
        .collect()
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

fn criterion_7() -> Outcome {
    let game = noisy_chain(8, 0.9, 1.0).unwrap();
    let rat = Rationality::homogeneous(1, 1.0);
    let policy = solve_qre_fixed_point(&game, &rat, &LogitBrConfig::default(), None).unwrap().policy;
    let exact = evaluate_soft_q(&game, &policy, &rat, SoftBootstrap::LogSumExp, 1e-12)
        .unwrap()
        .with_target(1.0)
        .unwrap();

    // λ̄ = 0 is the one-step TD target, bit for bit
    let cfg0 = RetraceConfig {
        lambda_bar: 0.0,
        ..RetraceConfig::default()
    };
    let values = target_soft_values(&game, &exact, &policy, &rat, cfg0.bootstrap).unwrap();
    let mut rng = rng_for(7, stream::CRITIC);
    let mut td_exact = true;
    for _ in 0..100 {
        let traj = sample_trajectory(&game, &policy, cfg0.horizon, &mut rng, None).unwrap();
        let tg = retrace_targets(&game, &traj, &exact, &policy, &rat, &cfg0).unwrap();
        for (step, y) in traj.steps.iter().zip(&tg.targets) {
            let q_sa = exact.joint[0][step.state * game.n_joint() + step.joint];
            td_exact &= y[0] == q_sa + (step.rewards[0] + game.discount() * values[0][step.next_state] - q_sa);
        }
    }

    // unbiased at the fixed point
    let n = 10_000;
    let errors: Vec<f64> = start_targets(&game, &exact, &policy, &rat, 0.9, n).iter().map(|(y, q)| y - q).collect();
    let (bias, var) = mean_var(&errors);
    let se = (var / n as f64).sqrt();

    // critic with per-state errors shared across actions
    let mut r = rng_for(3, stream::CRITIC);
    let offsets = Normal::new(0.0, 3.0).unwrap();
    let nj = game.n_joint();
    let shift: Vec<f64> = (0..game.n_states()).map(|_| offsets.sample(&mut r)).collect();
    let joint = vec![exact.joint[0].iter().enumerate().map(|(k, x)| x + shift[k / nj]).collect()];
    let noisy = QEstimate::from_joint(&game, joint, &policy).with_target(1.0).unwrap();
    let targets = |lb| start_targets(&game, &noisy, &policy, &rat, lb, n).iter().map(|p| p.0).collect::<Vec<_>>();
    let (_, var0) = mean_var(&targets(0.0));
    let (_, var9) = mean_var(&targets(0.9));

    outcome(
        td_exact && bias.abs() <= 3.0 * se && var9 < var0,
        format!(
            "λ̄=0 TD identity {}; bias {bias:.4} (3 SE = {:.4}); Var λ̄=0.9 {var9:.3} vs λ̄=0 {var0:.3}",
            if td_exact { "exact" } else { "BROKEN" },
            3.0 * se
        ),
    )
}

fn criterion_8() -> Outcome {
    let q = quadratic_benchmark();
    let lambda = BENCHMARK_LAMBDA;
    let row = fit_mixture(&q, lambda, &MixtureFitConfig::default()).unwrap();
    let mixture = continuous_qre_residual(&row, &q, lambda, 400).unwrap();
    let particles = run_svgd(ParticleSet::spread(&q.bounds, 200), &q, 1.0 / lambda, 0.1, 500).unwrap();
    let svgd = sample_tv(&particles.particles, &q, lambda, 40).unwrap();
    let mut rng = rng_for(0, stream::CONTINUOUS);
    let chain = langevin_chain(&q, lambda, 0.005, 2000, 20_000, 10, &mut rng, &[0.0]).unwrap();
    let langevin = sample_tv(&chain, &q, lambda, 40).unwrap();
    let single = MixtureRow::single(vec![0.3], vec![1.0 / (2.0 * lambda)]);
    let gaussian = continuous_qre_residual(&single, &q, lambda, 400).unwrap();
    outcome(
        mixture <= 0.15 && svgd <= 0.15 && langevin <= 0.15 && gaussian <= 0.02,
        format!("TV mixture {mixture:.4}, SVGD {svgd:.4}, Langevin {langevin:.4}; single Gaussian residual {gaussian:.2e}"),
    )
}

fn criterion_9() -> Outcome {
    let base = builtin_game("separable_team").unwrap();
    let tol = 1e-3;
    let iters = 50_000;
    let temp = TemperatureSchedule::adaptive(Rationality::homogeneous(2, 1.0), 20.0, tol);
    let mut medians = Vec::new();
    let (mut failures, mut restored) = (0, 0);
    let sigmas = [0.0, 0.1, 0.3, 0.5];
    for (k, sigma) in sigmas.into_iter().enumerate() {
        let mut mus = Vec::new();
        for seed in 0..5u64 {
            let game = perturb_rewards(&base, sigma, seed).unwrap();
            let cfg = MonotonicityConfig { seed, ..MonotonicityConfig::default() };
            mus.push(monotonicity_residual(&game, &JointPolicy::uniform(&game), &cfg).unwrap().normalized);
            if k == sigmas.len() - 1 {
                let mut run_cfg = EvoQreConfig::new(temp.clone(), iters);
                run_cfg.trace_every = iters;
                if !run_evoqre(&game, &run_cfg, seed).unwrap().reached_tolerance(&temp) {
                    failures += 1;
                    let mitigated = temp.clone().with_mitigation(OscillationMitigation::default());
                    run_cfg.temperature = mitigated.clone();
                    restored += usize::from(run_evoqre(&game, &run_cfg, seed).unwrap().reached_tolerance(&mitigated));
                }
            }
        }
        mus.sort_by(f64::total_cmp);
        medians.push(mus[2]);
    }
    let trend = medians.windows(2).all(|w| w[1] >= w[0]);
    let cycling = failures >= 3;
    let mitigation = restored >= 1;
    outcome(
        trend && cycling && mitigation,
        format!(
            "median μ_emp {:?} ({}); at σ=0.5 {failures}/5 runs miss ε_tol ({}), mitigation restores {restored} ({})",
            medians.iter().map(|m| format!("{m:.3}")).collect::<Vec<_>>(),
            if trend { "nondecreasing" } else { "NOT nondecreasing" },
            if cycling { "ok" } else { "need ≥ 3" },
            if mitigation { "ok" } else { "need ≥ 1" },
        ),
    )
}

fn spread_game() -> MarkovGame {
    MarkovGame::bimatrix(
        &[vec![0.5, 0.2, 0.0], vec![0.3, 0.4, 0.1], vec![0.1, 0.2, 0.35]],
        &[vec![0.4, 0.1, 0.2], vec![0.2, 0.45, 0.0], vec![0.3, 0.1, 0.3]],
        0.0,
    )
    .unwrap()
}

fn criterion_10() -> Outcome {
    let game = spread_game();
    let cfg = CalibrationConfig::default();
    let mut lines = Vec::new();
    let mut pass = true;
    let mut nll0_err = 0.0f64;
    for lambda_true in [2.0, 5.0, 10.0] {
        let rat = Rationality::homogeneous(2, lambda_true);
        let policy = solve_qre_fixed_point(&game, &rat, &cfg.solver, None).unwrap().policy;
        let mut errs = Vec::new();
        for seed in 0..5u64 {
            let data = generate_behavior(&game, &policy, 10_000, 1, seed).unwrap();
            let nll0 = nll_at_lambda(&game, &data, 0.0, &cfg.solver).unwrap();
            nll0_err = nll0_err.max((nll0 - data.uniform_nll(&game)).abs());
            let res = calibrate_lambda(&game, &data, &cfg).unwrap();
            errs.push((res.lambda_star - lambda_true).abs() / lambda_true);
        }
        errs.sort_by(f64::total_cmp);
        pass &= errs[2] <= 0.1;
        lines.push(format!("λ={lambda_true}: median rel. error {:.3}", errs[2]));
    }
    pass &= nll0_err <= 4.0 * f64::EPSILON;
    outcome(pass, format!("{}; |NLL(0) − uniform| ≤ {nll0_err:e}", lines.join(", ")))
}

fn criterion_11() -> Outcome {
    let scenario = build_scenario(&ScenarioSpec::new(ScenarioKind::Merge)).unwrap();
    let rows = lambda_sweep(&scenario, &[2.0, 5.0, 10.0, 15.0], &SweepConfig::default());
    if let Some(e) = rows.iter().find_map(|r| r.error.clone()) {
        return outcome(false, e);
    }
    let near: Vec<f64> = rows.iter().map(|r| r.stats.as_ref().unwrap().near_miss_rate).collect();
    let entropy: Vec<f64> = rows.iter().map(|r| r.entropy).collect();
    let decreasing = |v: &[f64]| v.windows(2).all(|w| w[1] < w[0]);
    outcome(
        decreasing(&near) && decreasing(&entropy),
        format!(
            "near-miss {:?}, entropy {:?}",
            near.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>(),
            entropy.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>()
        ),
    )
}

fn run_cli(args: &[&str], out: &Path) -> std::process::ExitStatus {
    Command::new(env!("CARGO_BIN_EXE_qre"))
        .args(args)
        .arg("--out-dir")
        .arg(out)
        .env_remove("QRE_OUT_DIR")
        .output()
        .expect("run qre")
        .status
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn criterion_12() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = root.join("synth");
    let synth = ["synth", "--game", "three_action", "--lambda", "5", "--steps", "2000", "--seed", "4"];
    run_cli(&synth, &data);
    let behavior = data.join("behavior.csv");
    let policy = data.join("policy.csv");
    let (behavior, policy) = (behavior.to_str().unwrap(), policy.to_str().unwrap());
    let runs: Vec<Vec<&str>> = vec![
        vec!["solve", "--game", "pd", "--lambda", "2", "--mode", "exact", "--iters", "5000", "--seed", "7"],
        vec!["solve", "--game", "two_state_team", "--lambda", "2", "--mode", "sampled", "--iters", "500", "--seed", "7"],
        vec!["solve", "--game", "rps", "--lambda", "2", "--mode", "ode", "--iters", "500", "--seed", "7"],
        vec!["solve", "--scenario", "intersection", "--mode", "oracle", "--seed", "7", "--sigma-perturb", "0.1"],
        vec!["sweep", "--scenario", "merge", "--lambda-grid", "1,5", "--iters", "2000", "--episodes", "2000", "--seed", "3"],
        synth.to_vec(),
        vec!["calibrate", "--game", "three_action", "--data", behavior, "--bootstrap", "3", "--seed", "2"],
        vec!["metrics", "evaluate", "--game", "three_action", "--policy", policy, "--tier", "cem", "--seed", "2"],
        vec!["continuous", "--benchmark", "bimodal", "--iters", "300", "--seed", "5"],
    ];
    let mut mismatched = Vec::new();
    let mut compared = 0;
    for (k, args) in runs.iter().enumerate() {
        let (a, b) = (root.join(format!("{k}a")), root.join(format!("{k}b")));
        let (sa, sb) = (run_cli(args, &a), run_cli(args, &b));
        let (fa, fb) = (csv_files(&a), csv_files(&b));
        compared += fa.len();
        if sa.code() != sb.code() || fa.is_empty() || fa != fb {
            mismatched.push(args.join(" "));
        }
    }
    outcome(
        mismatched.is_empty(),
        if mismatched.is_empty() {
            format!("{} commands, {compared} CSV files byte-identical across two runs", runs.len())
        } else {
            format!("differing outputs: {}", mismatched.join(" | "))
        },
    )
}

type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn main() {
    let start = Instant::now();
    let cases = equivalence_cases();
    println!("solved {} oracle-equivalence cases in {:.1?}", cases.len(), start.elapsed());
    let criteria: Vec<Criterion<'_>> = vec![
        ("oracle equivalence", Box::new(|| criterion_1(&cases))),
        ("fixed-point check", Box::new(|| criterion_2(&cases))),
        ("λ limits", Box::new(criterion_3)),
        ("convergence rate", Box::new(criterion_4)),
        ("softmax Lipschitz bounds", Box::new(criterion_5)),
        ("simplex invariance", Box::new(criterion_6)),
        ("retrace correctness", Box::new(criterion_7)),
        ("continuous-action consistency", Box::new(criterion_8)),
        ("monotonicity sensitivity", Box::new(criterion_9)),
        ("calibration recovery", Box::new(criterion_10)),
        ("controllability trend", Box::new(criterion_11)),
        ("reproducibility", Box::new(criterion_12)),
    ];
    let mut failed = 0;
    for (k, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let o = check();
        failed += usize::from(!o.pass);
        println!(
            "criterion {:>2} {:<30} {}  {} [{:.1?}]",
            k + 1,
            name,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed()
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
