//! Artifacts of an experiment: CSV tables and the summary document.
//!
//! CSV bodies depend only on configuration and seeds. Timestamps and
//! wall-clock times appear only in `summary.json`.

use std::collections::BTreeMap;
use std::io;
use std::path::Path;

use interleave_core::grpo::StepMetrics;
use interleave_core::oracle::MicroStepReport;
use interleave_core::rollout::{INTERACTOR, NAVIGATOR};
use interleave_core::scheduler::{Solver, TrainingLog};
use serde_json::{json, Value};

use crate::config::{ExperimentKind, SuiteName};
use crate::experiment::{monotone_counts, ExperimentOutcome, RunResult, SuiteStatus};

pub const ROUNDS_HEADER: [&str; 7] = ["round", "seed", "mode", "J_exact", "J_mc", "delta", "arm"];
pub const COMPARISON_HEADER: [&str; 6] = ["arm", "seed", "rounds", "warm_up_J", "final_J", "gain"];
pub const BOUND_HEADER: [&str; 9] = ["game", "trial", "J_old", "J_new", "L", "max_kl", "epsilon", "C", "slack"];

/// Twelve significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.11e}")
}

fn opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

fn csv_err(e: csv::Error) -> io::Error {
    io::Error::other(e)
}

fn write_table(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> io::Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()
}

fn with_logs(runs: &[RunResult]) -> impl Iterator<Item = (&RunResult, &TrainingLog)> {
    runs.iter().filter_map(|r| r.log.as_ref().map(|l| (r, l)))
}

fn metrics_row(arm: &str, seed: u64, round: usize, m: &StepMetrics) -> Vec<String> {
    vec![
        arm.to_string(),
        seed.to_string(),
        round.to_string(),
        m.iteration.to_string(),
        m.step.to_string(),
        m.agent.to_string(),
        fmt_f64(m.objective),
        fmt_f64(m.mean_kl_ref),
        fmt_f64(m.clip_fraction),
        m.n_filtered.to_string(),
        m.n_refilled.to_string(),
        m.skipped.to_string(),
        fmt_f64(m.mean_reward),
    ]
}

pub fn metrics_header() -> Vec<&'static str> {
    let mut h = vec!["arm", "seed", "round"];
    h.extend(StepMetrics::CSV_HEADER);
    h
}

pub fn reports_header() -> Vec<&'static str> {
    let mut h = vec!["arm", "seed"];
    h.extend(MicroStepReport::CSV_HEADER);
    h
}

/// Writes the CSV tables of an experiment into `dir`.
pub fn write_tables(dir: &Path, kind: ExperimentKind, outcome: &ExperimentOutcome) -> io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let runs = &outcome.runs;
    write_table(
        &dir.join("rounds.csv"),
        &ROUNDS_HEADER,
        with_logs(runs).flat_map(|(r, l)| {
            l.rounds.iter().map(move |rec| {
                vec![
                    rec.round.to_string(),
                    r.seed.to_string(),
                    l.mode.as_str().to_string(),
                    opt(rec.j_exact),
                    fmt_f64(rec.j_mc),
                    opt(rec.delta),
                    r.arm.clone(),
                ]
            })
        }),
    )?;
    write_table(
        &dir.join("metrics.csv"),
        &metrics_header(),
        with_logs(runs).flat_map(|(r, l)| {
            l.warm_up
                .steps
                .iter()
                .map(|s| (0, &s.metrics))
                .chain(l.steps.iter().map(|s| (s.round, &s.metrics)))
                .map(|(round, m)| metrics_row(&r.arm, r.seed, round, m))
                .collect::<Vec<_>>()
        }),
    )?;
    if with_logs(runs).any(|(_, l)| l.solver == Solver::Exact) {
        write_table(
            &dir.join("microstep_reports.csv"),
            &reports_header(),
            with_logs(runs).flat_map(|(r, l)| {
                l.reports.iter().map(move |rec| {
                    let mut row = vec![
                        r.arm.clone(),
                        r.seed.to_string(),
                        rec.round.to_string(),
                        rec.agent.to_string(),
                        rec.microstep.to_string(),
                    ];
                    row.extend(rec.report.values().map(fmt_f64));
                    row
                })
            }),
        )?;
    }
    if !outcome.bound.is_empty() {
        write_table(
            &dir.join("bound_trials.csv"),
            &BOUND_HEADER,
            outcome.bound.iter().flat_map(|b| {
                b.reports.iter().enumerate().map(move |(t, rep)| {
                    let mut row = vec![b.game.clone(), t.to_string()];
                    row.extend(rep.values().map(fmt_f64));
                    row
                })
            }),
        )?;
    }
    if matches!(
        kind,
        ExperimentKind::AblationReweight | ExperimentKind::AblationParallel | ExperimentKind::AblationRoundsEpochs
    ) {
        write_table(
            &dir.join("comparison.csv"),
            &COMPARISON_HEADER,
            with_logs(runs).map(|(r, l)| {
                let warm = l.rounds.first().map(|x| x.j());
                let last = l.final_j();
                vec![
                    r.arm.clone(),
                    r.seed.to_string(),
                    l.completed_rounds().to_string(),
                    opt(warm),
                    opt(last),
                    opt(warm.zip(last).map(|(w, f)| f - w)),
                ]
            }),
        )?;
    }
    Ok(())
}

fn agent_name(n_agents: usize, gridgui: bool, agent: usize) -> String {
    match (gridgui, agent) {
        (true, NAVIGATOR) => "navigator".into(),
        (true, INTERACTOR) => "interactor".into(),
        _ if agent == n_agents => "joint".into(),
        _ => format!("agent{agent}"),
    }
}

fn run_summary(log: &TrainingLog, gridgui: bool) -> Value {
    let n = log.filtering.len();
    let filtered: BTreeMap<String, Value> = log
        .filtering
        .iter()
        .enumerate()
        .map(|(i, c)| {
            (
                agent_name(n, gridgui, i),
                json!({ "sampled": c.sampled, "filtered": c.filtered, "fraction": c.fraction() }),
            )
        })
        .collect();
    let slacks: Vec<f64> = log.reports.iter().map(|r| r.report.slack).collect();
    json!({
        "final_j": log.final_j(),
        "warm_up_j": log.rounds.first().map(|r| r.j()),
        "rounds": log.completed_rounds(),
        "deltas": log.rounds.iter().skip(1).map(|r| r.delta).collect::<Vec<_>>(),
        "slack_min": slacks.iter().copied().reduce(f64::min),
        "slack_max": slacks.iter().copied().reduce(f64::max),
        "filtered": filtered,
        "warm_up": {
            "skipped": log.warm_up.skipped,
            "navigator_accuracy": log.warm_up.navigator_accuracy,
            "interactor_uniform_score": log.warm_up.interactor_uniform_score,
            "interactor_score": log.warm_up.interactor_score,
        },
        "max_resident_agents": log.max_resident_agents,
        "stopped_early": log.stopped_early,
        "wall_clock_secs": log.wall_clock_secs,
    })
}

/// Machine-readable summary. Suites missing from `suites` are reported as
/// not run.
pub fn emit_summary(kind: ExperimentKind, outcome: &ExperimentOutcome, expected: &[SuiteName], gridgui: bool) -> Value {
    let runs = &outcome.runs;
    let suites = &outcome.suites;
    let mut arms: BTreeMap<String, BTreeMap<String, Value>> = BTreeMap::new();
    for r in runs {
        let entry = match (&r.log, &r.error) {
            (Some(l), err) => {
                let mut v = run_summary(l, gridgui);
                v["error"] = json!(err);
                v
            }
            (None, err) => json!({ "rounds": 0, "error": err }),
        };
        arms.entry(r.arm.clone()).or_default().insert(r.seed.to_string(), entry);
    }
    let mut suite_map: BTreeMap<&str, Value> = expected
        .iter()
        .map(|s| (s.as_str(), json!({ "status": SuiteStatus::NotRun.as_str(), "detail": "" })))
        .collect();
    for s in suites {
        suite_map.insert(s.name.as_str(), json!({ "status": s.status.as_str(), "detail": s.detail }));
    }
    let all_slacks = runs
        .iter()
        .filter_map(|r| r.log.as_ref())
        .flat_map(|l| l.reports.iter().map(|r| r.report.slack));
    let bound_slacks = outcome.bound.iter().flat_map(|b| b.reports.iter().map(|r| r.slack));
    let slacks: Vec<f64> = all_slacks.chain(bound_slacks).collect();
    let (ok, total) = monotone_counts(runs);
    let passed = outcome.passed() && expected.iter().all(|e| suites.iter().any(|s| s.name == *e && s.status == SuiteStatus::Pass));
    json!({
        "kind": kind.as_str(),
        "timestamp": chrono::Utc::now().to_rfc3339(),
        "arms": arms,
        "prop1_min_slack": slacks.iter().copied().reduce(f64::min),
        "prop1_trials": slacks.len(),
        "monotone_rounds": if total > 0 && ok == total { "all".to_string() } else { format!("{ok}/{total}") },
        "suites": suite_map,
        "passed": passed,
    })
}

pub fn write_summary(dir: &Path, summary: &Value) -> io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let text = serde_json::to_string_pretty(summary).map_err(io::Error::other)?;
    std::fs::write(dir.join("summary.json"), text + "\n")
}
