//! CSV formats shared by the solvers, the sweep and the command line.
//!
//! Floats are written with Rust's shortest round-trip representation, so a
//! policy read back from disk is bit-identical to the one written.

use std::io::{Read, Write};

use serde::Serialize;

use crate::dynamics::TraceRecord;
use crate::error::{Error, Result};
use crate::game::{JointPolicy, MarkovGame, Rationality};
use crate::numeric::log_log_slope;
use crate::scenarios::SweepRow;

const SIMPLEX_READ_TOL: f64 = 1e-9;

fn f(x: f64) -> String {
    format!("{x:?}")
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, f)
}

fn parse_f64(v: &str, what: &str, line: usize) -> Result<f64> {
    v.trim()
        .parse()
        .map_err(|_| Error::DataCorruption(format!("row {line}: cannot parse {what} from {v:?}")))
}

fn parse_usize(v: &str, what: &str, line: usize) -> Result<usize> {
    v.trim()
        .parse()
        .map_err(|_| Error::DataCorruption(format!("row {line}: cannot parse {what} from {v:?}")))
}

fn parse_opt(v: &str, what: &str, line: usize) -> Result<Option<f64>> {
    if v.trim().is_empty() {
        Ok(None)
    } else {
        parse_f64(v, what, line).map(Some)
    }
}

fn expect_header<R: Read>(r: &mut csv::Reader<R>, expected: &[&str]) -> Result<()> {
    let headers = r.headers()?;
    let names: Vec<&str> = headers.iter().map(str::trim).collect();
    if names.len() < expected.len() || names[..expected.len()] != *expected {
        return Err(Error::DataCorruption(format!("expected columns {expected:?}, found {names:?}")));
    }
    Ok(())
}

pub const POLICY_COLUMNS: [&str; 6] = ["agent", "state", "action", "probability", "lambda", "residual"];

/// One row per `(agent, state, action)`: probability, that agent's λ and the
/// solver residual (blank when unknown).
pub fn write_policy_csv<W: Write>(writer: W, policy: &JointPolicy, rationality: &Rationality, residual: Option<f64>) -> Result<()> {
    if rationality.len() != policy.n_agents() {
        return Err(Error::InvalidArgument("rationality and policy disagree on the agent count".into()));
    }
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(POLICY_COLUMNS)?;
    for (i, s, row) in policy.rows() {
        for (a, p) in row.iter().enumerate() {
            w.write_record([i.to_string(), s.to_string(), a.to_string(), f(*p), f(rationality.lambda(i)), opt(residual)])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredPolicy {
    pub policy: JointPolicy,
    pub rationality: Rationality,
    pub residual: Option<f64>,
}

/// Reads a policy written by [`write_policy_csv`] and checks it against the game.
pub fn read_policy_csv<R: Read>(reader: R, game: &MarkovGame) -> Result<StoredPolicy> {
    let mut r = csv::Reader::from_reader(reader);
    expect_header(&mut r, &POLICY_COLUMNS)?;
    let mut probs: Vec<Vec<Vec<Option<f64>>>> = (0..game.n_agents())
        .map(|i| vec![vec![None; game.n_actions(i)]; game.n_states()])
        .collect();
    let mut lambdas: Vec<Option<f64>> = vec![None; game.n_agents()];
    let mut residual = None;
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let get = |k: usize| rec.get(k).unwrap_or("");
        let (i, s, a) = (parse_usize(get(0), "agent", line)?, parse_usize(get(1), "state", line)?, parse_usize(get(2), "action", line)?);
        if i >= game.n_agents() || s >= game.n_states() || a >= game.n_actions(i) {
            return Err(Error::DataCorruption(format!("row {line}: ({i}, {s}, {a}) is outside the game")));
        }
        let cell = &mut probs[i][s][a];
        if cell.is_some() {
            return Err(Error::DataCorruption(format!("row {line}: duplicate entry ({i}, {s}, {a})")));
        }
        *cell = Some(parse_f64(get(3), "probability", line)?);
        let l = parse_f64(get(4), "lambda", line)?;
        match lambdas[i] {
            Some(prev) if prev != l => return Err(Error::DataCorruption(format!("row {line}: agent {i} has two λ values"))),
            _ => lambdas[i] = Some(l),
        }
        if let Some(res) = parse_opt(get(5), "residual", line)? {
            residual = Some(res);
        }
    }
    let rows = probs
        .into_iter()
        .enumerate()
        .map(|(i, states)| {
            states
                .into_iter()
                .enumerate()
                .map(|(s, row)| {
                    row.into_iter()
                        .enumerate()
                        .map(|(a, p)| p.ok_or_else(|| Error::DataCorruption(format!("missing entry ({i}, {s}, {a})"))))
                        .collect::<Result<Vec<f64>>>()
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let policy = JointPolicy::from_rows(rows)?;
    policy.validate(SIMPLEX_READ_TOL)?;
    let rationality = Rationality::per_agent(lambdas.into_iter().map(|l| l.unwrap_or(0.0)).collect())?;
    Ok(StoredPolicy {
        policy,
        rationality,
        residual,
    })
}

pub const TRACE_COLUMNS: [&str; 9] = [
    "k",
    "lambda",
    "alpha",
    "eta_pi",
    "eta_q",
    "qre_gap",
    "kl_to_oracle",
    "bellman_residual",
    "displacement",
];

pub fn write_trace_csv<W: Write>(writer: W, records: &[TraceRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(TRACE_COLUMNS)?;
    for r in records {
        w.write_record([
            r.k.to_string(),
            f(r.lambda),
            f(r.alpha),
            f(r.eta_pi),
            f(r.eta_q),
            f(r.qre_gap),
            opt(r.kl_to_oracle),
            f(r.bellman_residual),
            f(r.displacement),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace_csv<R: Read>(reader: R) -> Result<Vec<TraceRecord>> {
    let mut r = csv::Reader::from_reader(reader);
    expect_header(&mut r, &TRACE_COLUMNS)?;
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let get = |k: usize| rec.get(k).unwrap_or("");
        out.push(TraceRecord {
            k: parse_usize(get(0), "k", line)?,
            lambda: parse_f64(get(1), "lambda", line)?,
            alpha: parse_f64(get(2), "alpha", line)?,
            eta_pi: parse_f64(get(3), "eta_pi", line)?,
            eta_q: parse_f64(get(4), "eta_q", line)?,
            qre_gap: parse_f64(get(5), "qre_gap", line)?,
            kl_to_oracle: parse_opt(get(6), "kl_to_oracle", line)?,
            bellman_residual: parse_f64(get(7), "bellman_residual", line)?,
            displacement: parse_f64(get(8), "displacement", line)?,
        });
    }
    Ok(out)
}

/// Controllability table: `lambda,near_miss_rate,entropy` first, then the
/// remaining safety statistics, per-agent attribution and any solver error.
pub fn write_sweep_csv<W: Write>(writer: W, rows: &[SweepRow]) -> Result<()> {
    let n = rows
        .iter()
        .filter_map(|r| r.stats.as_ref().map(|s| s.agent_near_miss.len()))
        .max()
        .unwrap_or(0);
    let mut header: Vec<String> = [
        "lambda",
        "near_miss_rate",
        "entropy",
        "near_miss_se",
        "collision_rate",
        "collision_se",
        "pass_rate",
        "pass_se",
        "table_entropy",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((0..n).map(|i| format!("near_miss_agent_{i}")));
    header.extend((0..n).map(|i| format!("collision_agent_{i}")));
    header.push("error".into());
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(&header)?;
    for row in rows {
        let mut rec = vec![f(row.lambda)];
        match &row.stats {
            Some(s) => {
                rec.extend([
                    f(s.near_miss_rate),
                    f(row.entropy),
                    f(s.near_miss_se),
                    f(s.collision_rate),
                    f(s.collision_se),
                    f(s.pass_rate),
                    f(s.pass_se),
                    f(row.table_entropy),
                ]);
                rec.extend((0..n).map(|i| s.agent_near_miss.get(i).copied().map_or_else(String::new, f)));
                rec.extend((0..n).map(|i| s.agent_collision.get(i).copied().map_or_else(String::new, f)));
            }
            None => rec.extend(std::iter::repeat_n(String::new(), 8 + 2 * n)),
        }
        rec.push(row.error.clone().unwrap_or_default());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// One line of the run summary table produced from stored traces.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceSummary {
    pub run: String,
    pub iterations: usize,
    pub final_lambda: f64,
    pub final_qre_gap: f64,
    pub min_qre_gap: f64,
    pub final_kl_to_oracle: Option<f64>,
    pub final_bellman_residual: f64,
    /// Log-log slope of KL-to-oracle against `k` over `k ∈ [10², 10⁵]`.
    pub kl_slope: Option<f64>,
}

pub fn summarize_trace(run: &str, records: &[TraceRecord]) -> Result<TraceSummary> {
    let last = records
        .last()
        .ok_or_else(|| Error::DataCorruption(format!("trace {run} has no records")))?;
    let window: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| (100..=100_000).contains(&r.k))
        .filter_map(|r| r.kl_to_oracle.map(|kl| (r.k as f64, kl)))
        .collect();
    Ok(TraceSummary {
        run: run.to_string(),
        iterations: last.k,
        final_lambda: last.lambda,
        final_qre_gap: last.qre_gap,
        min_qre_gap: records.iter().map(|r| r.qre_gap).fold(f64::INFINITY, f64::min),
        final_kl_to_oracle: last.kl_to_oracle,
        final_bellman_residual: last.bellman_residual,
        kl_slope: log_log_slope(&window),
    })
}

pub fn write_summary_csv<W: Write>(writer: W, rows: &[TraceSummary]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "run",
        "iterations",
        "final_lambda",
        "final_qre_gap",
        "min_qre_gap",
        "final_kl_to_oracle",
        "final_bellman_residual",
        "kl_slope",
    ])?;
    for r in rows {
        w.write_record([
            r.run.clone(),
            r.iterations.to_string(),
            f(r.final_lambda),
            f(r.final_qre_gap),
            f(r.min_qre_gap),
            opt(r.final_kl_to_oracle),
            f(r.final_bellman_residual),
            opt(r.kl_slope),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenarios::{prisoners_dilemma, two_state_team};

    #[test]
    fn policy_round_trip_is_bit_exact() {
        let g = two_state_team(0.5).unwrap();
        let policy = JointPolicy::from_rows(vec![
            vec![vec![0.1, 0.9], vec![1.0 / 3.0, 2.0 / 3.0]],
            vec![vec![0.7, 0.3], vec![0.123456789012345, 1.0 - 0.123456789012345]],
        ])
        .unwrap();
        let rat = Rationality::per_agent(vec![2.0, 0.5]).unwrap();
        let mut buf = Vec::new();
        write_policy_csv(&mut buf, &policy, &rat, Some(1e-13)).unwrap();
        let back = read_policy_csv(buf.as_slice(), &g).unwrap();
        assert_eq!(back.policy, policy);
        assert_eq!(back.rationality, rat);
        assert_eq!(back.residual, Some(1e-13));
    }

    #[test]
    fn policy_reader_rejects_bad_files() {
        let g = prisoners_dilemma();
        let header = "agent,state,action,probability,lambda,residual\n";
        let missing = format!("{header}0,0,0,0.5,1.0,\n0,0,1,0.5,1.0,\n1,0,0,1.0,1.0,\n");
        assert!(matches!(read_policy_csv(missing.as_bytes(), &g), Err(Error::DataCorruption(_))));
        let off_simplex = format!("{header}0,0,0,0.5,1.0,\n0,0,1,0.6,1.0,\n1,0,0,1.0,1.0,\n1,0,1,0.0,1.0,\n");
        assert!(read_policy_csv(off_simplex.as_bytes(), &g).is_err());
        assert!(read_policy_csv("a,b\n".as_bytes(), &g).is_err());
    }

    #[test]
    fn trace_round_trip() {
        let records = vec![
            TraceRecord {
                k: 1,
                lambda: 2.0,
                alpha: 0.5,
                eta_pi: 0.5,
                eta_q: 1.0,
                qre_gap: 0.25,
                kl_to_oracle: None,
                bellman_residual: 0.1,
                displacement: 0.3,
            },
            TraceRecord {
                k: 1000,
                lambda: 2.0,
                alpha: 0.5,
                eta_pi: 0.005,
                eta_q: 0.001,
                qre_gap: 1e-9,
                kl_to_oracle: Some(3e-7),
                bellman_residual: 1e-8,
                displacement: 1e-10,
            },
        ];
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &records).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("k,lambda,alpha,eta_pi,eta_q,qre_gap,kl_to_oracle,bellman_residual,displacement\n"));
        assert_eq!(read_trace_csv(buf.as_slice()).unwrap(), records);
        let summary = summarize_trace("run", &records).unwrap();
        assert_eq!(summary.iterations, 1000);
        assert_eq!(summary.min_qre_gap, 1e-9);
        assert_eq!(summary.kl_slope, None);
    }
}
