use std::path::Path;

use qre_core::calibration::{
    calibrate_lambda, generate_behavior, write_calibration_curve, write_calibration_summary, BehaviorDataset,
    CalibrationConfig,
};
use qre_core::continuous::{
    bimodal_benchmark, collapsed_components, continuous_qre_residual, fit_mixture, gibbs_grid, langevin_chain,
    mixture_on_grid, quadratic_benchmark, run_svgd, sample_tv, write_density_csv, MixtureFitConfig, ParticleSet,
    SmoothQ,
};
use qre_core::critic::RetraceConfig;
use qre_core::dynamics::{
    bellman_residual, integrate_errd, run_evoqre_observed, CriticMode, EvoQreConfig, OscillationMitigation,
    SampledCritic, StepSizes, TemperatureSchedule, TraceRecord, TwoTimescaleSchedule,
};
use qre_core::io::{
    read_policy_csv, read_trace_csv, summarize_trace, write_policy_csv, write_summary_csv, write_sweep_csv,
    write_trace_csv,
};
use qre_core::metrics::{
    diagnose, exact_qre_gap, kl_to_reference, qre_gap, write_diagnostics, CemConfig, DiagnosticsOptions,
    ExploitabilityConfig, MonotonicityConfig, OracleTier, ReferenceDistribution,
};
use qre_core::oracle::{qre_residual, solve_qre_fixed_point, LogitBrConfig};
use qre_core::rng::{rng_for, stream};
use qre_core::scenarios::{build_scenario, lambda_sweep, perturb_rewards, SolveMethod, SweepConfig};
use qre_core::{Error, JointPolicy, MarkovGame, Rationality};

use crate::args::{
    Benchmark, CalibrateArgs, ContinuousArgs, EvaluateArgs, Mode, SolveArgs, SummarizeArgs, SweepArgs, SweepMode,
    SynthArgs, Tier,
};
use crate::inputs::{load_game, load_scenario, open, rationality, resolve};
use crate::output::{config_err, core_err, is_solver_failure, Failure, Outputs};

const EVAL_TOL: f64 = 1e-13;

/// Staged files plus, when the run fell short of its tolerance, the reason.
pub struct Report {
    pub outputs: Outputs,
    pub shortfall: Option<String>,
}

impl Report {
    fn ok(outputs: Outputs) -> Self {
        Self { outputs, shortfall: None }
    }
}

#[allow(clippy::too_many_arguments)]
fn diagnostics(
    out: &mut Outputs,
    game: &MarkovGame,
    policy: &JointPolicy,
    rat: &Rationality,
    oracle: Option<&JointPolicy>,
    iteration: usize,
    reference: ReferenceDistribution,
    exploitability: ExploitabilityConfig,
    seed: u64,
) -> Result<(), Failure> {
    let opts = DiagnosticsOptions {
        exploitability,
        monotonicity: Some(MonotonicityConfig {
            reference,
            seed,
            ..MonotonicityConfig::default()
        }),
    };
    let report = diagnose(game, policy, rat, oracle, iteration, &opts).map_err(core_err)?;
    out.csv("diagnostics.csv", |w| write_diagnostics(w, &[report]))
}

pub fn solve(a: &SolveArgs) -> Result<Report, Failure> {
    let seed = a.common.seed;
    let resolved = resolve(&a.source, seed)?;
    let game = &resolved.game;
    let n = game.n_agents();
    let rat = match (&a.lambda, &resolved.default_rationality) {
        (Some(ls), _) => rationality(ls, n)?,
        (None, Some(r)) => r.clone(),
        (None, None) => Rationality::homogeneous(n, 1.0),
    };
    let target = match a.lambda_max {
        Some(max) => Rationality::homogeneous(n, max),
        None => rat.clone(),
    };
    if a.trace_every == 0 || a.iters == 0 {
        return Err(config_err(anyhow::anyhow!("--iters and --trace-every must be positive")));
    }
    let oracle_cfg = LogitBrConfig::default();
    let reference_policy = |r: &Rationality| -> Option<JointPolicy> {
        match solve_qre_fixed_point(game, r, &oracle_cfg, None) {
            Ok(s) => Some(s.policy),
            Err(_) => None,
        }
    };

    let mut out = Outputs::default();
    let (policy, final_rat, iteration, shortfall, oracle) = match a.mode {
        Mode::Exact | Mode::Sampled => {
            let mut temp = match a.lambda_max {
                Some(max) => TemperatureSchedule::adaptive(rat.clone(), max, a.tol),
                None => {
                    let mut t = TemperatureSchedule::fixed(rat.clone());
                    t.tol = a.tol;
                    t
                }
            };
            if a.mitigate {
                temp = temp.with_mitigation(OscillationMitigation::default());
            }
            temp.validate(n).map_err(core_err)?;
            let schedule = TwoTimescaleSchedule::new(a.c_pi, a.c_q).map_err(core_err)?;
            let mut cfg = EvoQreConfig::new(temp.clone(), a.iters);
            cfg.steps = StepSizes::TwoTimescale(schedule);
            cfg.trace_every = a.trace_every;
            if a.mode == Mode::Sampled {
                let retrace = RetraceConfig {
                    lambda_bar: a.retrace_lambda,
                    ..RetraceConfig::default()
                };
                retrace.validate().map_err(core_err)?;
                cfg.critic = CriticMode::Sampled(SampledCritic {
                    batch: a.batch,
                    retrace,
                    ..SampledCritic::default()
                });
            }
            cfg.oracle = reference_policy(&target);
            let mut trace = Vec::new();
            let result = run_evoqre_observed(game, &cfg, seed, |r| trace.push(*r));
            out.csv("trace.csv", |w| write_trace_csv(w, &trace))?;
            let run = match result {
                Ok(run) => run,
                Err(e) if is_solver_failure(&e) => {
                    return Ok(Report {
                        outputs: out,
                        shortfall: Some(e.to_string()),
                    })
                }
                Err(e) => return Err(core_err(e)),
            };
            let shortfall = (!run.reached_tolerance(&temp)).then(|| {
                format!(
                    "final QRE-gap {:e} at mean λ {} (tolerance {:e}, λ target {})",
                    run.final_gap,
                    run.state.rationality.mean(),
                    temp.tol,
                    temp.lambda_max
                )
            });
            (run.state.policy, run.state.rationality, run.state.k, shortfall, cfg.oracle)
        }
        Mode::Ode => {
            let lambda = rat.lambda(0);
            if rat.lambdas().iter().any(|&l| l != lambda) || lambda.is_nan() || lambda <= 0.0 {
                return Err(config_err(anyhow::anyhow!("ode mode needs one positive λ shared by all agents")));
            }
            if a.lambda_max.is_some() || a.mitigate {
                return Err(config_err(anyhow::anyhow!("ode mode runs at a fixed λ")));
            }
            let oracle = reference_policy(&rat);
            let states = integrate_errd(game, &JointPolicy::uniform(game), 1.0 / lambda, a.dt, a.iters, 1, a.trace_every)
                .map_err(core_err)?;
            let mut trace = Vec::with_capacity(states.len());
            let mut prev = JointPolicy::uniform(game);
            for s in &states {
                trace.push(TraceRecord {
                    k: s.k,
                    lambda,
                    alpha: 1.0 / lambda,
                    eta_pi: a.dt,
                    eta_q: 1.0,
                    qre_gap: qre_gap(&s.policy, &rat, &s.q).map_err(core_err)?,
                    kl_to_oracle: match &oracle {
                        Some(o) => Some(kl_to_reference(&s.policy, o, None).map_err(core_err)?),
                        None => None,
                    },
                    bellman_residual: bellman_residual(game, &s.policy, &s.q),
                    displacement: s.policy.max_row_l1(&prev),
                });
                prev = s.policy.clone();
            }
            out.csv("trace.csv", |w| write_trace_csv(w, &trace))?;
            let last = states.last().expect("integration records the final state");
            let gap = exact_qre_gap(game, &last.policy, &rat).map_err(core_err)?;
            let shortfall = (gap > a.tol).then(|| format!("final QRE-gap {gap:e} above tolerance {:e}", a.tol));
            (last.policy.clone(), rat, last.k, shortfall, oracle)
        }
        Mode::Oracle => {
            if a.lambda_max.is_some() || a.mitigate {
                return Err(config_err(anyhow::anyhow!("oracle mode runs at a fixed λ")));
            }
            let (sol, shortfall) = match solve_qre_fixed_point(game, &rat, &oracle_cfg, None) {
                Ok(s) => (s, None),
                Err(Error::QreNotConverged { partial, .. }) => {
                    let msg = format!(
                        "oracle residual {:e} after {} iterations (tolerance {:e})",
                        partial.residual, partial.iterations, oracle_cfg.tol
                    );
                    (*partial, Some(msg))
                }
                Err(e) => return Err(core_err(e)),
            };
            let gap = exact_qre_gap(game, &sol.policy, &rat).map_err(core_err)?;
            let record = TraceRecord {
                k: sol.iterations,
                lambda: rat.mean(),
                alpha: 1.0 / rat.mean(),
                eta_pi: oracle_cfg.damping,
                eta_q: 1.0,
                qre_gap: gap,
                kl_to_oracle: Some(0.0),
                bellman_residual: 0.0,
                displacement: sol.residual,
            };
            out.csv("trace.csv", |w| write_trace_csv(w, &[record]))?;
            let policy = sol.policy.clone();
            (sol.policy, rat, sol.iterations, shortfall, Some(policy))
        }
    };

    let residual = qre_residual(game, &policy, &final_rat, EVAL_TOL).map_err(core_err)?;
    out.csv("policy.csv", |w| write_policy_csv(w, &policy, &final_rat, Some(residual)))?;
    diagnostics(
        &mut out,
        game,
        &policy,
        &final_rat,
        oracle.as_ref(),
        iteration,
        resolved.reference,
        ExploitabilityConfig::default(),
        seed,
    )?;
    Ok(Report { outputs: out, shortfall })
}

pub fn sweep(a: &SweepArgs) -> Result<Report, Failure> {
    let mut scenario = build_scenario(&load_scenario(&a.scenario)?).map_err(core_err)?;
    if let Some(sigma) = a.sigma_perturb {
        scenario.game = perturb_rewards(&scenario.game, sigma, a.common.seed).map_err(core_err)?;
    }
    if a.lambda_grid.is_empty() || a.lambda_grid.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
        return Err(config_err(anyhow::anyhow!("λ grid needs finite, nonnegative values")));
    }
    if a.episodes == 0 || a.horizon == 0 || a.iters == 0 {
        return Err(config_err(anyhow::anyhow!("--iters, --episodes and --horizon must be positive")));
    }
    let cfg = SweepConfig {
        method: match a.mode {
            SweepMode::Exact => SolveMethod::EvoQre {
                iters: a.iters,
                steps: StepSizes::default(),
            },
            SweepMode::Oracle => SolveMethod::Oracle(LogitBrConfig::default()),
        },
        episodes: a.episodes,
        horizon: a.horizon,
        seed: a.common.seed,
    };
    let rows = lambda_sweep(&scenario, &a.lambda_grid, &cfg);
    let mut out = Outputs::default();
    out.csv("sweep.csv", |w| write_sweep_csv(w, &rows))?;
    let failed: Vec<String> = rows
        .iter()
        .filter_map(|r| r.error.as_ref().map(|e| format!("λ={}: {e}", r.lambda)))
        .collect();
    Ok(Report {
        outputs: out,
        shortfall: (!failed.is_empty()).then(|| failed.join("; ")),
    })
}

fn read_dataset(path: &Path) -> Result<BehaviorDataset, Failure> {
    BehaviorDataset::read_csv(open(path)?).map_err(core_err)
}

pub fn calibrate(a: &CalibrateArgs) -> Result<Report, Failure> {
    let game = load_game(&a.game)?;
    let data = read_dataset(&a.data)?;
    let cfg = CalibrationConfig {
        grid: a.lambda_grid.clone(),
        bootstrap: a.bootstrap,
        seed: a.common.seed,
        ..CalibrationConfig::default()
    };
    let result = calibrate_lambda(&game, &data, &cfg).map_err(core_err)?;
    let mut out = Outputs::default();
    out.csv("nll_curve.csv", |w| write_calibration_curve(w, &result))?;
    out.csv("calibration_summary.csv", |w| write_calibration_summary(w, &result))?;
    Ok(Report::ok(out))
}

pub fn synth(a: &SynthArgs) -> Result<Report, Failure> {
    let game = load_game(&a.game)?;
    let rat = rationality(&[a.lambda], game.n_agents())?;
    let sol = solve_qre_fixed_point(&game, &rat, &LogitBrConfig::default(), None).map_err(core_err)?;
    let data = generate_behavior(&game, &sol.policy, a.steps, a.episode_len, a.common.seed).map_err(core_err)?;
    let mut out = Outputs::default();
    out.csv("behavior.csv", |w| data.write_csv(w))?;
    out.csv("policy.csv", |w| write_policy_csv(w, &sol.policy, &rat, Some(sol.residual)))?;
    Ok(Report::ok(out))
}

pub fn evaluate(a: &EvaluateArgs) -> Result<Report, Failure> {
    let game = load_game(&a.game)?;
    let stored = read_policy_csv(open(&a.policy)?, &game).map_err(core_err)?;
    let rat = match &a.lambda {
        Some(ls) => rationality(ls, game.n_agents())?,
        None => stored.rationality,
    };
    let tier = match a.tier {
        Tier::Quick => OracleTier::QuickVi,
        Tier::Cem => OracleTier::Cem,
        Tier::Extended => OracleTier::Extended,
    };
    let expl = ExploitabilityConfig {
        tier,
        cem: CemConfig {
            seed: a.common.seed,
            ..CemConfig::default()
        },
        ..ExploitabilityConfig::default()
    };
    let mut out = Outputs::default();
    diagnostics(
        &mut out,
        &game,
        &stored.policy,
        &rat,
        None,
        0,
        ReferenceDistribution::Visitation,
        expl,
        a.common.seed,
    )?;
    Ok(Report::ok(out))
}

pub fn summarize(a: &SummarizeArgs) -> Result<Report, Failure> {
    let mut rows = Vec::with_capacity(a.trace.len());
    for path in &a.trace {
        let records = read_trace_csv(open(path)?).map_err(core_err)?;
        let run = path.display().to_string();
        rows.push(summarize_trace(&run, &records).map_err(core_err)?);
    }
    let mut out = Outputs::default();
    out.csv("summary.csv", |w| write_summary_csv(w, &rows))?;
    Ok(Report::ok(out))
}

pub fn continuous(a: &ContinuousArgs) -> Result<Report, Failure> {
    let seed = a.common.seed;
    let (quadratic, bimodal) = (quadratic_benchmark(), bimodal_benchmark());
    let q: &dyn SmoothQ = match a.benchmark {
        Benchmark::Quadratic => &quadratic,
        Benchmark::Bimodal => &bimodal,
    };
    if a.lambda.is_nan() || a.lambda <= 0.0 || a.mixture_m == 0 || a.particles < 2 || a.grid < 4 {
        return Err(config_err(anyhow::anyhow!(
            "need λ > 0, at least one component, two particles and four grid points"
        )));
    }
    let lambda = a.lambda;
    let row = fit_mixture(
        q,
        lambda,
        &MixtureFitConfig {
            components: a.mixture_m,
            iters: a.iters,
            seed,
            ..MixtureFitConfig::default()
        },
    )
    .map_err(core_err)?;
    let particles = run_svgd(ParticleSet::spread(q.bounds(), a.particles), q, 1.0 / lambda, 0.1, 500).map_err(core_err)?;
    let mut rng = rng_for(seed, stream::CONTINUOUS);
    let center: Vec<f64> = (0..q.dim()).map(|d| q.bounds().lo[d] + 0.5 * q.bounds().width(d)).collect();
    let chain = langevin_chain(q, lambda, 0.005, 2000, 20_000, 10, &mut rng, &center).map_err(core_err)?;

    let grid = gibbs_grid(q, lambda, a.grid).map_err(core_err)?;
    let density = mixture_on_grid(&row, &grid).map_err(core_err)?;
    let bins = 40;
    let mut out = Outputs::default();
    out.csv("density.csv", |w| write_density_csv(w, &grid, &[("mixture", density)]))?;

    let (mixture_tv, shortfall) = match continuous_qre_residual(&row, q, lambda, a.grid) {
        Ok(tv) => (Some(tv), None),
        Err(e @ Error::QuadratureTooCoarse { .. }) => (None, Some(e.to_string())),
        Err(e) => return Err(core_err(e)),
    };
    let svgd_tv = sample_tv(&particles.particles, q, lambda, bins).map_err(core_err)?;
    let langevin_tv = sample_tv(&chain, q, lambda, bins).map_err(core_err)?;
    let fmt = |x: Option<f64>| x.map_or_else(String::new, |v| format!("{v:?}"));
    let mut summary = String::from("method,tv,size,collapsed\n");
    summary += &format!(
        "mixture,{},{},{}\n",
        fmt(mixture_tv),
        row.len(),
        collapsed_components(&row, 1e-3)
    );
    summary += &format!("svgd,{},{},\n", fmt(Some(svgd_tv)), particles.particles.len());
    summary += &format!("langevin,{},{},\n", fmt(Some(langevin_tv)), chain.len());
    out.add("continuous_summary.csv", summary.into_bytes());
    Ok(Report { outputs: out, shortfall })
}
