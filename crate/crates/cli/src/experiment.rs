//! Running experiments: arms × seeds, invariant suites.

use interleave_core::host::InProcessHost;
use interleave_core::oracle::{microstep_bound, MicroStepReport};
use interleave_core::policy::{JointPolicy, TabularPolicy};
use interleave_core::rng::{mix_seed, rng_from_seed};
use interleave_core::rollout::TrainingEnv;
use interleave_core::scheduler::{warm_up, ScheduleConfig, Solver, Trainer, TrainingLog, UpdateMode};
use interleave_core::{MarkovGame, Result};
use interleave_service::{serve, ClientConfig, RemoteHost};
use rand::Rng;

use crate::config::{ExperimentConfig, ExperimentKind, SuiteName, Transport};

/// One configuration variant of an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Arm {
    pub name: String,
    pub schedule: ScheduleConfig,
}

/// One seed of one arm. `log` is absent if the run failed before its first
/// evaluation; `error` is set if it failed at all.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub arm: String,
    pub seed: u64,
    pub log: Option<TrainingLog>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SuiteStatus {
    Pass,
    Fail,
    NotRun,
}

impl SuiteStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SuiteStatus::Pass => "pass",
            SuiteStatus::Fail => "fail",
            SuiteStatus::NotRun => "not_run",
        }
    }

    fn from_bool(ok: bool) -> Self {
        if ok {
            SuiteStatus::Pass
        } else {
            SuiteStatus::Fail
        }
    }
}

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: SuiteName,
    pub status: SuiteStatus,
    pub detail: String,
}

/// Random single-slot perturbation trials of one game.
#[derive(Debug, Clone)]
pub struct BoundTrials {
    pub game: String,
    pub reports: Vec<MicroStepReport>,
}

impl BoundTrials {
    pub fn min_slack(&self) -> f64 {
        self.reports.iter().map(|r| r.slack).fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub runs: Vec<RunResult>,
    pub bound: Vec<BoundTrials>,
    pub suites: Vec<SuiteResult>,
}

impl ExperimentOutcome {
    pub fn passed(&self) -> bool {
        self.runs.iter().all(|r| r.error.is_none()) && self.suites.iter().all(|s| s.status != SuiteStatus::Fail)
    }

    pub fn runtime_error(&self) -> Option<&str> {
        self.runs.iter().find_map(|r| r.error.as_deref())
    }

    pub fn logs_of<'a>(&'a self, arm: &'a str) -> impl Iterator<Item = (u64, &'a TrainingLog)> + 'a {
        self.runs
            .iter()
            .filter(move |r| r.arm == arm)
            .filter_map(|r| r.log.as_ref().map(|l| (r.seed, l)))
    }
}

pub fn arms(cfg: &ExperimentConfig, n_agents: usize) -> Vec<Arm> {
    let base = &cfg.schedule;
    let arm = |name: &str, schedule: ScheduleConfig| Arm {
        name: name.to_string(),
        schedule,
    };
    match cfg.kind {
        ExperimentKind::VerifyTheory | ExperimentKind::Train => vec![arm("main", base.clone())],
        ExperimentKind::AblationReweight => vec![
            arm(
                "reweight_on",
                ScheduleConfig {
                    reweight: vec![Some(cfg.ablation.reweight_rule); n_agents],
                    ..base.clone()
                },
            ),
            arm(
                "reweight_off",
                ScheduleConfig {
                    reweight: Vec::new(),
                    ..base.clone()
                },
            ),
        ],
        ExperimentKind::AblationParallel => {
            let modes = cfg.ablation.modes.clone().unwrap_or_else(|| {
                let mut m = vec![UpdateMode::Sequential, UpdateMode::Parallel];
                if base.solver == Solver::Grpo {
                    m.push(UpdateMode::Joint);
                }
                m
            });
            modes
                .into_iter()
                .map(|mode| arm(mode.as_str(), ScheduleConfig { mode, ..base.clone() }))
                .collect()
        }
        ExperimentKind::AblationRoundsEpochs => cfg
            .ablation
            .rounds_epochs
            .iter()
            .map(|re| {
                arm(
                    &format!("rounds{}_epochs{}", re.rounds, re.epochs),
                    ScheduleConfig {
                        rounds: re.rounds,
                        budgets: vec![re.epochs; n_agents],
                        ..base.clone()
                    },
                )
            })
            .collect(),
    }
}

/// Warm-up and training of one seed. Failures after the first evaluation
/// keep the completed rounds.
pub fn run_one(env: &dyn TrainingEnv, schedule: &ScheduleConfig, transport: Transport) -> (Option<TrainingLog>, Option<String>) {
    let (policies, record) = match warm_up(env, schedule) {
        Ok(x) => x,
        Err(e) => return (None, Some(e.to_string())),
    };
    let drive = |host: &dyn interleave_core::host::PolicyHost| match Trainer::new(env, host, schedule.clone(), record.clone()) {
        Err(e) => (None, Some(e.to_string())),
        Ok(mut trainer) => {
            let err = trainer.run().err().map(|e| e.to_string());
            (Some(trainer.into_log()), err)
        }
    };
    match transport {
        Transport::InProcess => match InProcessHost::new(policies) {
            Ok(host) => drive(&host),
            Err(e) => (None, Some(e.to_string())),
        },
        Transport::Remote => {
            let service = match serve(policies, "127.0.0.1:0") {
                Ok(s) => s,
                Err(e) => return (None, Some(e.to_string())),
            };
            match RemoteHost::new(&service, ClientConfig::default()) {
                Ok(host) => drive(&host),
                Err(e) => (None, Some(e.to_string())),
            }
        }
    }
}

/// Runs every arm for every seed; seeds of one arm run as parallel jobs.
pub fn run_arms(cfg: &ExperimentConfig, env: &dyn TrainingEnv, arms: &[Arm]) -> Vec<RunResult> {
    let mut out = Vec::new();
    for arm in arms {
        let results: Vec<RunResult> = std::thread::scope(|scope| {
            let jobs: Vec<_> = cfg
                .seeds
                .iter()
                .map(|&seed| {
                    let schedule = ScheduleConfig {
                        seed,
                        ..arm.schedule.clone()
                    };
                    let name = arm.name.clone();
                    scope.spawn(move || {
                        let (log, error) = run_one(env, &schedule, cfg.transport);
                        RunResult {
                            arm: name,
                            seed,
                            log,
                            error,
                        }
                    })
                })
                .collect();
            jobs.into_iter().map(|j| j.join().expect("training job panicked")).collect()
        });
        out.extend(results);
    }
    out
}

/// Single-slot perturbation trials: random joint policy, one random agent's
/// logits moved by noise of log-uniform magnitude.
pub fn bound_trials(game: &MarkovGame, trials: usize, seed: u64) -> Result<Vec<MicroStepReport>> {
    (0..trials as u64)
        .map(|t| {
            let mut rng = rng_from_seed(mix_seed(seed, t));
            let per_agent = (0..game.n_agents())
                .map(|i| {
                    let logits = (0..game.n_states() * game.n_actions(i)).map(|_| rng.gen_range(-2.0..2.0)).collect();
                    TabularPolicy::from_logits(i, game.n_states(), game.n_actions(i), logits)
                })
                .collect::<Result<Vec<_>>>()?;
            let old = JointPolicy::new(per_agent)?;
            let agent = rng.gen_range(0..game.n_agents());
            let magnitude = 10f64.powf(rng.gen_range(-3.0..0.5));
            let mut slot = old.agent(agent).clone();
            for z in slot.logits_mut() {
                *z += magnitude * rng.gen_range(-1.0..1.0);
            }
            let new = old.with_slot(agent, slot)?;
            microstep_bound(game, &old, &new, agent)
        })
        .collect()
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let env = cfg.build_env()?;
    let arms = arms(cfg, env.n_agents());
    let suites = cfg.suites();
    let mut bound = Vec::new();
    if suites.contains(&SuiteName::Bound) {
        let mut games = Vec::new();
        if let Some(g) = env.as_game() {
            games.push(("experiment".to_string(), g.clone()));
        }
        for (k, spec) in cfg.verify.random_games.iter().enumerate() {
            let game = MarkovGame::random(&mut rng_from_seed(spec.seed), spec.states, spec.actions.clone(), spec.discount);
            games.push((format!("random{k}"), game));
        }
        for (name, game) in games {
            let reports = bound_trials(&game, cfg.verify.bound_trials, cfg.seeds[0])?;
            bound.push(BoundTrials { game: name, reports });
        }
    }
    let runs = run_arms(cfg, env.as_ref(), &arms);
    let mut results = Vec::new();
    for name in suites {
        results.push(evaluate_suite(name, cfg, env.as_ref(), &arms, &runs, &bound));
    }
    Ok(ExperimentOutcome {
        runs,
        bound,
        suites: results,
    })
}

fn logs(runs: &[RunResult]) -> impl Iterator<Item = &TrainingLog> {
    runs.iter().filter_map(|r| r.log.as_ref())
}

fn evaluate_suite(
    name: SuiteName,
    cfg: &ExperimentConfig,
    env: &dyn TrainingEnv,
    arms: &[Arm],
    runs: &[RunResult],
    bound: &[BoundTrials],
) -> SuiteResult {
    let result = |status, detail: String| SuiteResult { name, status, detail };
    if runs.iter().any(|r| r.log.is_none()) && name != SuiteName::Bound {
        return result(SuiteStatus::NotRun, "a run failed before producing a log".into());
    }
    match name {
        SuiteName::Bound => {
            if bound.is_empty() {
                return result(SuiteStatus::NotRun, "no games".into());
            }
            let min = bound.iter().map(BoundTrials::min_slack).fold(f64::INFINITY, f64::min);
            let trials: usize = bound.iter().map(|b| b.reports.len()).sum();
            result(
                SuiteStatus::from_bool(min >= -1e-8),
                format!("{trials} trials on {} games, min slack {min:e}", bound.len()),
            )
        }
        SuiteName::Slack => {
            let slacks: Vec<f64> = logs(runs).flat_map(|l| l.reports.iter().map(|r| r.report.slack)).collect();
            if slacks.is_empty() {
                return result(SuiteStatus::NotRun, "no exact-mode micro-steps".into());
            }
            let min = slacks.iter().copied().fold(f64::INFINITY, f64::min);
            result(
                SuiteStatus::from_bool(min >= -1e-8),
                format!("{} micro-steps, min slack {min:e}", slacks.len()),
            )
        }
        SuiteName::Monotone => {
            let (ok, total) = monotone_counts(runs);
            result(SuiteStatus::from_bool(ok == total), format!("{ok}/{total} rounds nondecreasing"))
        }
        SuiteName::Convergence => {
            let tol = cfg.verify.convergence_tolerance;
            let bound = env.as_game().map(|g| g.max_abs_reward() / (1.0 - g.discount()));
            let all: Vec<&TrainingLog> = logs(runs).collect();
            let converged = all
                .iter()
                .filter(|l| l.rounds.iter().skip(1).any(|r| r.delta.is_some_and(|d| d.abs() < tol)))
                .count();
            let bounded = bound.is_none_or(|b| {
                all.iter().all(|l| l.rounds.iter().all(|r| r.j().abs() <= b + 1e-9))
            });
            let needed = (cfg.verify.convergence_fraction * all.len() as f64).ceil() as usize;
            result(
                SuiteStatus::from_bool(converged >= needed && bounded),
                format!("{converged}/{} runs reached |delta| < {tol:e}; bounded: {bounded}", all.len()),
            )
        }
        SuiteName::Lift => {
            let all: Vec<&TrainingLog> = logs(runs).collect();
            let lifted = all
                .iter()
                .filter(|l| l.final_j().unwrap_or(f64::NEG_INFINITY) > l.rounds[0].j())
                .count();
            result(
                SuiteStatus::from_bool(lifted == all.len()),
                format!("{lifted}/{} runs end above their warm-up", all.len()),
            )
        }
        SuiteName::ReweightDirectional => {
            let on: Vec<f64> = runs
                .iter()
                .filter(|r| r.arm == "reweight_on")
                .filter_map(|r| r.log.as_ref()?.final_j())
                .collect();
            let off: Vec<f64> = runs
                .iter()
                .filter(|r| r.arm == "reweight_off")
                .filter_map(|r| r.log.as_ref()?.final_j())
                .collect();
            if on.is_empty() || on.len() != off.len() {
                return result(SuiteStatus::NotRun, "reweighting arms missing".into());
            }
            let wins = on.iter().zip(&off).filter(|(a, b)| a >= b).count();
            let needed = (cfg.ablation.directional_fraction * on.len() as f64).ceil() as usize;
            result(
                SuiteStatus::from_bool(wins >= needed),
                format!("filtering not worse on {wins}/{} seeds", on.len()),
            )
        }
        SuiteName::Reproducible => {
            let again = run_arms(cfg, env, arms);
            let same = runs.iter().zip(&again).all(|(a, b)| match (&a.log, &b.log) {
                (Some(x), Some(y)) => x.same_run(y),
                _ => false,
            });
            result(SuiteStatus::from_bool(same), format!("{} runs repeated", runs.len()))
        }
    }
}

/// Nondecreasing rounds (tolerance 1e-9) and total rounds across runs.
pub fn monotone_counts(runs: &[RunResult]) -> (usize, usize) {
    let deltas: Vec<f64> = logs(runs)
        .flat_map(|l| l.rounds.iter().skip(1).filter_map(|r| r.delta))
        .collect();
    (deltas.iter().filter(|d| **d >= -1e-9).count(), deltas.len())
}
