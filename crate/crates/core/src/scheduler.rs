//! Interleaved training: warm-up, then rounds in which agents take turns
//! updating while the others stay frozen.
//!
//! Frozen agents are only ever read through a [`PolicyHost`]. A sequential
//! round publishes each agent's block result as soon as the block ends, so the
//! next agent trains against the rolling baseline. A parallel round trains
//! every agent against the round-start snapshot and publishes at the end. The
//! joint baseline trains all agents at once from shared rollouts.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::MarkovGame;
use crate::gridgui::{scripted_instruction, GridGuiTask};
use crate::grpo::{
    reweight_batch, step_multi_with_halving, step_with_halving, GrpoHyperparams, ReweightRule, RolloutGroup,
    StepMetrics,
};
use crate::host::{InProcessHost, PolicyHost};
use crate::oracle::{microstep_bound, MicroStepReport, SlotSurrogate};
use crate::policy::{JointPolicy, TabularPolicy};
use crate::rng::{mix_seed, rng_from_seed};
use crate::rollout::{Actor, GridGuiSuite, TrainingEnv, INTERACTOR, NAVIGATOR};

/// Learning-rate halvings allowed per sampled step.
pub const MAX_HALVINGS: usize = 5;
/// Round-to-round change treated as converged by the early stop.
pub const EARLY_STOP_TOLERANCE: f64 = 1e-6;
/// Consecutive converged rounds before the early stop fires.
pub const EARLY_STOP_PATIENCE: usize = 3;

const WARMUP_STREAM: u64 = 0x5741_524d;
const ROUND_STREAM: u64 = 0x524f_554e;
const EVAL_STREAM: u64 = 0x4556_414c;
const JOINT_SLOT: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    Sequential,
    Parallel,
    Joint,
}

impl UpdateMode {
    pub fn as_str(self) -> &'static str {
        match self {
            UpdateMode::Sequential => "sequential",
            UpdateMode::Parallel => "parallel",
            UpdateMode::Joint => "joint",
        }
    }
}

/// Inner solver of a micro-step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    /// Ascent on the penalized surrogate, computed with the exact oracle.
    Exact,
    /// Sampled group-relative policy optimization.
    Grpo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WarmUpSpec {
    /// Keep zero logits and skip every other warm-up stage.
    pub skip: bool,
    /// Initial logits are drawn uniformly from `[-init_scale, init_scale]`.
    pub init_scale: f64,
    /// Labeled tasks for the navigator imitation and interactor RL stages.
    pub tasks: usize,
    pub imitation_epochs: usize,
    pub imitation_lr: f64,
    /// Sampled-update micro-steps of the interactor against scripted
    /// instructions.
    pub interactor_epochs: usize,
}

impl Default for WarmUpSpec {
    fn default() -> Self {
        Self {
            skip: false,
            init_scale: 0.0,
            tasks: 10,
            imitation_epochs: 40,
            imitation_lr: 0.5,
            interactor_epochs: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExactSolverSpec {
    /// Gradient iterations per micro-step.
    pub iterations: usize,
    pub step_size: f64,
    /// Step halvings tried before an iteration gives up.
    pub backtracks: usize,
}

impl Default for ExactSolverSpec {
    fn default() -> Self {
        Self {
            iterations: 25,
            step_size: 1.0,
            backtracks: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub rounds: usize,
    /// Micro-steps per round for each agent.
    pub budgets: Vec<usize>,
    /// Update order; defaults to agent index order.
    #[serde(default)]
    pub order: Option<Vec<usize>>,
    pub mode: UpdateMode,
    pub solver: Solver,
    /// Per-agent sampled-update settings; empty means defaults for all.
    #[serde(default)]
    pub grpo: Vec<GrpoHyperparams>,
    /// Per-agent group filter; empty means no filtering.
    #[serde(default)]
    pub reweight: Vec<Option<ReweightRule>>,
    #[serde(default)]
    pub warm_up: WarmUpSpec,
    #[serde(default)]
    pub exact: ExactSolverSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub early_stop: bool,
    /// Samples per input for the Monte-Carlo performance estimate.
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
}

fn default_eval_samples() -> usize {
    64
}

impl ScheduleConfig {
    /// Sequential exact-mode schedule with one micro-step per agent.
    pub fn exact(n_agents: usize, rounds: usize, seed: u64) -> Self {
        Self {
            rounds,
            budgets: vec![1; n_agents],
            order: None,
            mode: UpdateMode::Sequential,
            solver: Solver::Exact,
            grpo: Vec::new(),
            reweight: Vec::new(),
            warm_up: WarmUpSpec::default(),
            exact: ExactSolverSpec::default(),
            seed,
            early_stop: false,
            eval_samples: default_eval_samples(),
        }
    }

    /// Sequential sampled-update schedule.
    pub fn grpo(n_agents: usize, rounds: usize, epochs: usize, seed: u64) -> Self {
        Self {
            budgets: vec![epochs; n_agents],
            solver: Solver::Grpo,
            ..Self::exact(n_agents, rounds, seed)
        }
    }

    pub fn order(&self, n_agents: usize) -> Vec<usize> {
        self.order.clone().unwrap_or_else(|| (0..n_agents).collect())
    }

    pub fn hyper(&self, agent: usize) -> GrpoHyperparams {
        self.grpo.get(agent).copied().unwrap_or_default()
    }

    pub fn rule(&self, agent: usize) -> Option<ReweightRule> {
        self.reweight.get(agent).copied().flatten()
    }

    /// Checks the structure against an agent count. Zero rounds and zero
    /// budgets are accepted here; configuration files reject them.
    pub fn validate(&self, n_agents: usize) -> Result<()> {
        if self.budgets.len() != n_agents {
            return Err(Error::Invalid(format!(
                "{} micro-step budgets for {n_agents} agents",
                self.budgets.len()
            )));
        }
        let mut order = self.order(n_agents);
        order.sort_unstable();
        if order != (0..n_agents).collect::<Vec<_>>() {
            return Err(Error::Invalid(format!(
                "agent order {:?} is not a permutation of 0..{n_agents}",
                self.order(n_agents)
            )));
        }
        if !self.grpo.is_empty() && self.grpo.len() != n_agents {
            return Err(Error::Invalid(format!("{} hyperparameter sets for {n_agents} agents", self.grpo.len())));
        }
        if !self.reweight.is_empty() && self.reweight.len() != n_agents {
            return Err(Error::Invalid(format!("{} reweight rules for {n_agents} agents", self.reweight.len())));
        }
        for agent in 0..n_agents {
            self.hyper(agent).validate()?;
        }
        if self.mode == UpdateMode::Joint && self.solver == Solver::Exact {
            return Err(Error::Invalid("joint mode requires the grpo solver".into()));
        }
        if !(self.warm_up.init_scale >= 0.0) || !self.warm_up.init_scale.is_finite() {
            return Err(Error::Invalid(format!("init scale {} must be nonnegative", self.warm_up.init_scale)));
        }
        if self.eval_samples == 0 {
            return Err(Error::Invalid("eval_samples must be positive".into()));
        }
        Ok(())
    }
}

/// Outcome of the warm-up stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmUpRecord {
    pub skipped: bool,
    /// Share of labeled states where the navigator's argmax matches the script.
    pub navigator_accuracy: Option<f64>,
    /// Interactor reward against scripted instructions, before and after.
    pub interactor_uniform_score: Option<f64>,
    pub interactor_score: Option<f64>,
    pub steps: Vec<StepRecord>,
}

/// Performance after warm-up (round 0) or after a round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub j_exact: Option<f64>,
    pub j_mc: f64,
    /// Change from the previous record, exact when available.
    pub delta: Option<f64>,
}

impl RoundRecord {
    pub fn j(&self) -> f64 {
        self.j_exact.unwrap_or(self.j_mc)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub round: usize,
    pub metrics: StepMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub round: usize,
    pub agent: usize,
    pub microstep: usize,
    pub report: MicroStepReport,
}

/// Sampled and filtered group counts of one agent.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterCounts {
    pub sampled: usize,
    pub filtered: usize,
}

impl FilterCounts {
    pub fn fraction(&self) -> f64 {
        if self.sampled == 0 {
            0.0
        } else {
            self.filtered as f64 / self.sampled as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub mode: UpdateMode,
    pub solver: Solver,
    pub seed: u64,
    pub warm_up: WarmUpRecord,
    /// Round 0 is the warm-up evaluation.
    pub rounds: Vec<RoundRecord>,
    pub steps: Vec<StepRecord>,
    pub reports: Vec<ReportRecord>,
    pub filtering: Vec<FilterCounts>,
    /// Largest number of agents whose trainable parameters were held in the
    /// trainer's memory at once during a block.
    pub max_resident_agents: usize,
    pub stopped_early: bool,
    pub wall_clock_secs: f64,
}

impl TrainingLog {
    pub fn completed_rounds(&self) -> usize {
        self.rounds.len().saturating_sub(1)
    }

    pub fn final_j(&self) -> Option<f64> {
        self.rounds.last().map(RoundRecord::j)
    }

    pub fn min_slack(&self) -> Option<f64> {
        self.reports.iter().map(|r| r.report.slack).reduce(f64::min)
    }

    /// Every round-to-round change is at least `-tolerance`.
    pub fn is_monotone(&self, tolerance: f64) -> bool {
        self.rounds.iter().skip(1).all(|r| r.delta.is_none_or(|d| d >= -tolerance))
    }

    /// Equality ignoring wall-clock time and memory accounting, which depend
    /// on where the frozen agents are hosted rather than on the run.
    pub fn same_run(&self, other: &TrainingLog) -> bool {
        let mut a = self.clone();
        a.wall_clock_secs = other.wall_clock_secs;
        a.max_resident_agents = other.max_resident_agents;
        a == *other
    }
}

/// Initializes every agent independently.
///
/// With `skip` all logits are zero. Otherwise logits start from uniform noise
/// of width `init_scale`; on GridGUI the navigator then imitates the scripted
/// planner on labeled tasks and the interactor trains with sampled updates
/// against scripted instructions on the same tasks.
pub fn warm_up(env: &dyn TrainingEnv, config: &ScheduleConfig) -> Result<(Vec<TabularPolicy>, WarmUpRecord)> {
    config.validate(env.n_agents())?;
    let mut policies = env.uniform_policies();
    let mut record = WarmUpRecord {
        skipped: config.warm_up.skip,
        navigator_accuracy: None,
        interactor_uniform_score: None,
        interactor_score: None,
        steps: Vec::new(),
    };
    if config.warm_up.skip {
        return Ok((policies, record));
    }
    let spec = &config.warm_up;
    let mut rng = rng_from_seed(mix_seed(config.seed, WARMUP_STREAM));
    if spec.init_scale > 0.0 {
        for p in &mut policies {
            for z in p.logits_mut() {
                *z = spec.init_scale * (2.0 * uniform01(rng.next_u64()) - 1.0);
            }
        }
    }
    let Some(suite) = env.as_gridgui() else {
        return Ok((policies, record));
    };
    if spec.tasks == 0 {
        return Ok((policies, record));
    }
    let shape = suite.tasks()[0].clone();
    let tasks: Vec<GridGuiTask> = (0..spec.tasks)
        .map(|_| GridGuiTask::random(&mut rng, shape.width(), shape.height(), shape.horizon()))
        .collect();
    let labeled = GridGuiSuite::new(tasks, suite.weights)?;

    let samples = labeled.labeled_navigator_states()?;
    imitate(&mut policies[NAVIGATOR], &samples, spec.imitation_epochs, spec.imitation_lr);
    let hits = samples
        .iter()
        .filter(|(s, tok)| argmax(&policies[NAVIGATOR].probs(*s)) == tok.index())
        .count();
    record.navigator_accuracy = Some(hits as f64 / samples.len() as f64);

    record.interactor_uniform_score = Some(labeled.interactor_score(&policies[INTERACTOR])?);
    let script = |s: usize| scripted_instruction(s).index();
    let fixed = Actor::Fixed(&script);
    let mut counts = FilterCounts::default();
    policies[INTERACTOR] = grpo_block(
        &labeled,
        policies[INTERACTOR].clone(),
        &[fixed, fixed],
        &config.hyper(INTERACTOR),
        None,
        spec.interactor_epochs,
        rng.next_u64(),
        0,
        &mut record.steps,
        &mut counts,
    )?;
    record.interactor_score = Some(labeled.interactor_score(&policies[INTERACTOR])?);
    Ok((policies, record))
}

fn uniform01(bits: u64) -> f64 {
    (bits >> 11) as f64 / (1u64 << 53) as f64
}

fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

/// Full-batch gradient ascent on the summed log-likelihood of the labels.
fn imitate(policy: &mut TabularPolicy, samples: &[(usize, crate::gridgui::InstructionToken)], epochs: usize, lr: f64) {
    let n_a = policy.n_actions();
    for _ in 0..epochs {
        let mut grad = vec![0.0; policy.logits().len()];
        for (s, tok) in samples {
            let probs = policy.probs(*s);
            let row = &mut grad[s * n_a..(s + 1) * n_a];
            for (c, g) in row.iter_mut().enumerate() {
                *g += if c == tok.index() { 1.0 } else { 0.0 } - probs[c];
            }
        }
        for (z, g) in policy.logits_mut().iter_mut().zip(&grad) {
            *z += lr * g;
        }
    }
}

/// Runs `micro_steps` sampled-update micro-steps for `policy`'s agent. The
/// other agents act through `frozen`; their entries at the active slot are
/// ignored.
#[allow(clippy::too_many_arguments)]
fn grpo_block(
    env: &dyn TrainingEnv,
    mut policy: TabularPolicy,
    frozen: &[Actor<'_>],
    hyper: &GrpoHyperparams,
    rule: Option<ReweightRule>,
    micro_steps: usize,
    seed: u64,
    round: usize,
    sink: &mut Vec<StepRecord>,
    counts: &mut FilterCounts,
) -> Result<TabularPolicy> {
    let agent = policy.agent_id;
    let n = env.n_agents();
    let mut rng = rng_from_seed(seed);
    let n_inputs = env.n_inputs();
    let steps = if hyper.steps == 0 {
        n_inputs.div_ceil(hyper.batch_size)
    } else {
        hyper.steps
    };
    let per_rollout: Vec<bool> = (0..n).map(|i| i == agent).collect();
    for j in 0..micro_steps {
        for it in 0..hyper.iterations {
            let reference = policy.clone();
            let mut order: Vec<usize> = (0..n_inputs).collect();
            order.shuffle(&mut rng);
            for b in 0..steps {
                let groups = {
                    let actors: Vec<Actor<'_>> = (0..n)
                        .map(|i| if i == agent { Actor::Local(&policy) } else { frozen[i] })
                        .collect();
                    (0..hyper.batch_size)
                        .map(|g| {
                            let input = order[(b * hyper.batch_size + g) % n_inputs];
                            env.collect_group(input, &actors, &per_rollout, hyper.rollouts, rng.next_u64())
                        })
                        .collect::<Result<Vec<RolloutGroup>>>()?
                };
                let mean_reward = groups.iter().map(RolloutGroup::mean_reward).sum::<f64>() / groups.len() as f64;
                let refill_seed = rng.next_u64();
                counts.sampled += groups.len();
                let (batch, n_filtered, n_refilled) = match rule {
                    Some(rule) => {
                        let out = reweight_batch(groups, &rule, refill_seed);
                        (out.batch, out.n_filtered, out.n_refilled)
                    }
                    None => (groups, 0, 0),
                };
                counts.filtered += n_filtered;
                let outcome = step_with_halving(&policy, &batch, &reference, hyper, MAX_HALVINGS)?;
                policy = outcome.policy;
                sink.push(StepRecord {
                    round,
                    metrics: StepMetrics {
                        iteration: j * hyper.iterations + it,
                        step: b,
                        agent,
                        objective: outcome.objective_after,
                        mean_kl_ref: outcome.mean_kl_ref,
                        clip_fraction: outcome.clip_fraction,
                        n_filtered,
                        n_refilled,
                        skipped: outcome.skipped,
                        mean_reward,
                    },
                });
            }
        }
    }
    Ok(policy)
}

/// One exact-mode micro-step: ascent on the penalized surrogate of slot
/// `agent`, starting at the incumbent (where it is zero) and accepting only
/// strict increases. Returns the new slot policy and its bound report.
pub fn exact_micro_step(
    game: &MarkovGame,
    baseline: &JointPolicy,
    agent: usize,
    spec: &ExactSolverSpec,
) -> Result<(TabularPolicy, MicroStepReport)> {
    let surrogate = SlotSurrogate::new(game, baseline, agent)?;
    let mut candidate = surrogate.incumbent().clone();
    let mut value = 0.0;
    let mut step = spec.step_size;
    for _ in 0..spec.iterations {
        let grad = surrogate.f_gradient(&candidate)?;
        if grad.iter().all(|g| g.abs() < 1e-15) {
            break;
        }
        let mut improved = false;
        for _ in 0..spec.backtracks {
            let mut trial = candidate.clone();
            for (z, g) in trial.logits_mut().iter_mut().zip(&grad) {
                *z += step * g;
            }
            let f = surrogate.f(&trial)?;
            if f > value {
                candidate = trial;
                value = f;
                improved = true;
                break;
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
        step *= 2.0;
    }
    let new_joint = baseline.with_slot(agent, candidate.clone())?;
    let report = microstep_bound(game, baseline, &new_joint, agent)?;
    Ok((candidate, report))
}

/// Drives training against a policy host.
pub struct Trainer<'a> {
    env: &'a dyn TrainingEnv,
    host: &'a dyn PolicyHost,
    config: ScheduleConfig,
    log: TrainingLog,
    started: Instant,
    converged_rounds: usize,
}

impl<'a> Trainer<'a> {
    /// Takes the host as initialized by warm-up and records round 0.
    pub fn new(
        env: &'a dyn TrainingEnv,
        host: &'a dyn PolicyHost,
        config: ScheduleConfig,
        warm_up: WarmUpRecord,
    ) -> Result<Self> {
        let n = env.n_agents();
        config.validate(n)?;
        if host.n_agents() != n {
            return Err(Error::Invalid(format!("host serves {} agents, environment has {n}", host.n_agents())));
        }
        if config.solver == Solver::Exact && env.as_game().is_none() {
            return Err(Error::Invalid("the exact solver needs a tabular game".into()));
        }
        let log = TrainingLog {
            mode: config.mode,
            solver: config.solver,
            seed: config.seed,
            warm_up,
            rounds: Vec::new(),
            steps: Vec::new(),
            reports: Vec::new(),
            filtering: vec![FilterCounts::default(); n],
            max_resident_agents: 0,
            stopped_early: false,
            wall_clock_secs: 0.0,
        };
        let mut trainer = Self {
            env,
            host,
            config,
            log,
            started: Instant::now(),
            converged_rounds: 0,
        };
        let record = trainer.evaluate(0)?;
        trainer.log.rounds.push(record);
        Ok(trainer)
    }

    pub fn log(&self) -> &TrainingLog {
        &self.log
    }

    pub fn into_log(mut self) -> TrainingLog {
        self.log.wall_clock_secs = self.started.elapsed().as_secs_f64();
        self.log
    }

    /// Runs every configured round. On error the log keeps the completed
    /// rounds and the host is back at the last committed state.
    pub fn run(&mut self) -> Result<()> {
        for round in 1..=self.config.rounds {
            self.step_round(round)?;
            if self.config.early_stop && self.converged_rounds >= EARLY_STOP_PATIENCE {
                self.log.stopped_early = true;
                break;
            }
        }
        self.log.wall_clock_secs = self.started.elapsed().as_secs_f64();
        Ok(())
    }

    /// Runs one round in the configured mode and records its evaluation.
    pub fn step_round(&mut self, round: usize) -> Result<()> {
        match self.config.mode {
            UpdateMode::Sequential => self.run_round(round),
            UpdateMode::Parallel => self.run_parallel_round(round),
            UpdateMode::Joint => self.run_joint_baseline(round),
        }
    }

    /// Agents in order each run their block against the rolling baseline and
    /// commit immediately.
    pub fn run_round(&mut self, round: usize) -> Result<()> {
        self.transaction(round, |t| {
            for agent in t.config.order(t.env.n_agents()) {
                let updated = t.block(agent, round, 0)?;
                t.host.publish(updated)?;
            }
            Ok(())
        })
    }

    /// Every agent runs its block against the round-start snapshot; all
    /// results are committed together.
    pub fn run_parallel_round(&mut self, round: usize) -> Result<()> {
        self.transaction(round, |t| {
            let mut pending = Vec::new();
            for agent in t.config.order(t.env.n_agents()) {
                pending.push(t.block(agent, round, pending.len())?);
            }
            for p in pending {
                t.host.publish(p)?;
            }
            Ok(())
        })
    }

    /// All agents update together from shared rollouts, without masking.
    pub fn run_joint_baseline(&mut self, round: usize) -> Result<()> {
        self.transaction(round, |t| {
            let n = t.env.n_agents();
            let mut policies = (0..n).map(|i| t.host.checkout(i)).collect::<Result<Vec<_>>>()?;
            t.note_resident(n);
            let hyper = t.config.hyper(0);
            let rule = t.config.rule(0);
            let micro_steps = t.config.budgets.iter().copied().max().unwrap_or(0);
            let mut rng = rng_from_seed(block_seed(t.config.seed, round, JOINT_SLOT));
            let n_inputs = t.env.n_inputs();
            let steps = if hyper.steps == 0 {
                n_inputs.div_ceil(hyper.batch_size)
            } else {
                hyper.steps
            };
            let trainable = vec![true; n];
            for j in 0..micro_steps {
                for it in 0..hyper.iterations {
                    let refs = policies.clone();
                    let mut order: Vec<usize> = (0..n_inputs).collect();
                    order.shuffle(&mut rng);
                    for b in 0..steps {
                        let groups = {
                            let actors: Vec<Actor<'_>> = policies.iter().map(Actor::Local).collect();
                            (0..hyper.batch_size)
                                .map(|g| {
                                    let input = order[(b * hyper.batch_size + g) % n_inputs];
                                    t.env
                                        .collect_group(input, &actors, &trainable, hyper.rollouts, rng.next_u64())
                                })
                                .collect::<Result<Vec<RolloutGroup>>>()?
                        };
                        let mean_reward =
                            groups.iter().map(RolloutGroup::mean_reward).sum::<f64>() / groups.len() as f64;
                        let refill_seed = rng.next_u64();
                        let (batch, n_filtered, n_refilled) = match rule {
                            Some(rule) => {
                                let out = reweight_batch(groups.clone(), &rule, refill_seed);
                                (out.batch, out.n_filtered, out.n_refilled)
                            }
                            None => (groups.clone(), 0, 0),
                        };
                        for c in &mut t.log.filtering {
                            c.sampled += groups.len();
                            c.filtered += n_filtered;
                        }
                        let out = step_multi_with_halving(&policies, &batch, &refs, &trainable, &hyper, MAX_HALVINGS)?;
                        policies = out.policies;
                        t.log.steps.push(StepRecord {
                            round,
                            metrics: StepMetrics {
                                iteration: j * hyper.iterations + it,
                                step: b,
                                agent: n,
                                objective: out.objective_after,
                                mean_kl_ref: out.mean_kl_ref,
                                clip_fraction: out.clip_fraction,
                                n_filtered,
                                n_refilled,
                                skipped: out.skipped,
                                mean_reward,
                            },
                        });
                    }
                }
            }
            for p in policies {
                t.host.publish(p)?;
            }
            Ok(())
        })
    }

    fn transaction(&mut self, round: usize, body: impl FnOnce(&mut Self) -> Result<()>) -> Result<()> {
        let (n_steps, n_reports, filtering) = (self.log.steps.len(), self.log.reports.len(), self.log.filtering.clone());
        self.host.begin_round()?;
        if let Err(e) = body(self) {
            self.log.steps.truncate(n_steps);
            self.log.reports.truncate(n_reports);
            self.log.filtering = filtering;
            // The rollback error, if any, is secondary to the round error.
            let _ = self.host.rollback();
            return Err(e);
        }
        self.host.commit()?;
        let record = self.evaluate(round)?;
        if record.delta.is_some_and(|d| d.abs() < EARLY_STOP_TOLERANCE) {
            self.converged_rounds += 1;
        } else {
            self.converged_rounds = 0;
        }
        self.log.rounds.push(record);
        Ok(())
    }

    /// One agent's block of micro-steps. `held` counts block results already
    /// kept in memory by the caller.
    fn block(&mut self, agent: usize, round: usize, held: usize) -> Result<TabularPolicy> {
        let budget = self.config.budgets[agent];
        let seed = block_seed(self.config.seed, round, agent as u64);
        self.note_resident(held + 1);
        match self.config.solver {
            Solver::Exact => {
                let game = self.env.as_game().expect("checked at construction");
                let per_agent = (0..self.env.n_agents())
                    .map(|i| self.host.checkout(i))
                    .collect::<Result<Vec<_>>>()?;
                let mut joint = JointPolicy::new(per_agent)?;
                for microstep in 0..budget {
                    let (updated, report) = exact_micro_step(game, &joint, agent, &self.config.exact)?;
                    self.log.reports.push(ReportRecord {
                        round,
                        agent,
                        microstep,
                        report,
                    });
                    joint = joint.with_slot(agent, updated)?;
                }
                Ok(joint.agent(agent).clone())
            }
            Solver::Grpo => {
                let policy = self.host.checkout(agent)?;
                let frozen = vec![Actor::Host(self.host); self.env.n_agents()];
                grpo_block(
                    self.env,
                    policy,
                    &frozen,
                    &self.config.hyper(agent),
                    self.config.rule(agent),
                    budget,
                    seed,
                    round,
                    &mut self.log.steps,
                    &mut self.log.filtering[agent],
                )
            }
        }
    }

    fn note_resident(&mut self, held_by_trainer: usize) {
        let resident = held_by_trainer.max(self.host.resident_blocks());
        self.log.max_resident_agents = self.log.max_resident_agents.max(resident);
    }

    /// Exact value (when available) and Monte-Carlo estimate of the committed
    /// joint policy.
    fn evaluate(&self, round: usize) -> Result<RoundRecord> {
        let n = self.env.n_agents();
        let joint = JointPolicy::new((0..n).map(|i| self.host.checkout(i)).collect::<Result<Vec<_>>>()?)?;
        let j_exact = self.env.exact_value(&joint)?;
        let actors = vec![Actor::Host(self.host); n];
        let j_mc = self.env.monte_carlo(
            &actors,
            self.config.eval_samples,
            mix_seed(mix_seed(self.config.seed, EVAL_STREAM), round as u64),
        )?;
        let delta = self.log.rounds.last().map(|prev| j_exact.unwrap_or(j_mc) - prev.j());
        Ok(RoundRecord {
            round,
            j_exact,
            j_mc,
            delta,
        })
    }
}

fn block_seed(seed: u64, round: usize, slot: u64) -> u64 {
    mix_seed(mix_seed(mix_seed(seed, ROUND_STREAM), round as u64), slot)
}

/// Warm-up followed by training with every policy held in process.
pub fn run_training(env: &dyn TrainingEnv, config: &ScheduleConfig) -> Result<TrainingLog> {
    let (policies, record) = warm_up(env, config)?;
    let host = InProcessHost::new(policies)?;
    let mut trainer = Trainer::new(env, &host, config.clone(), record)?;
    trainer.run()?;
    Ok(trainer.into_log())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridgui::fixture_suite;
    use crate::grpo::RewardWeights;
    use crate::rollout::GameEnv;

    fn chain2_env() -> GameEnv {
        GameEnv::new(MarkovGame::chain2(), 40).unwrap()
    }

    #[test]
    fn skip_warm_up_gives_zero_logits() {
        let env = chain2_env();
        let mut cfg = ScheduleConfig::exact(2, 1, 3);
        cfg.warm_up.skip = true;
        cfg.warm_up.init_scale = 2.0;
        let (p, rec) = warm_up(&env, &cfg).unwrap();
        assert!(rec.skipped);
        assert!(p.iter().all(|p| p.logits().iter().all(|z| *z == 0.0)));
    }

    #[test]
    fn zero_rounds_logs_only_warm_up() {
        let env = chain2_env();
        let log = run_training(&env, &ScheduleConfig::exact(2, 0, 1)).unwrap();
        assert_eq!(log.rounds.len(), 1);
        assert_eq!(log.rounds[0].round, 0);
        assert!(log.steps.is_empty() && log.reports.is_empty());
    }

    #[test]
    fn zero_budgets_leave_state_unchanged() {
        let env = chain2_env();
        let mut cfg = ScheduleConfig::grpo(2, 1, 0, 5);
        cfg.warm_up.init_scale = 1.0;
        let (p, rec) = warm_up(&env, &cfg).unwrap();
        let host = InProcessHost::new(p.clone()).unwrap();
        let mut t = Trainer::new(&env, &host, cfg, rec).unwrap();
        t.run_round(1).unwrap();
        for (i, p) in p.iter().enumerate() {
            assert_eq!(&host.checkout(i).unwrap(), p);
        }
    }

    #[test]
    fn exact_micro_step_is_feasible_and_bounded() {
        let game = MarkovGame::chain2();
        let base = JointPolicy::new(vec![
            TabularPolicy::from_logits(0, 2, 2, vec![0.2, -0.1, 0.4, 0.0]).unwrap(),
            TabularPolicy::from_logits(1, 2, 2, vec![-0.3, 0.5, 0.0, 0.1]).unwrap(),
        ])
        .unwrap();
        for agent in 0..2 {
            let (p, rep) = exact_micro_step(&game, &base, agent, &ExactSolverSpec::default()).unwrap();
            let f = crate::oracle::surrogate_f(&game, &base, &p).unwrap();
            assert!(f >= 0.0);
            assert!(rep.slack >= -1e-8);
            assert!(rep.j_new >= rep.j_old - 1e-12);
        }
    }

    #[test]
    fn exact_sequential_training_is_monotone() {
        let env = chain2_env();
        let mut cfg = ScheduleConfig::exact(2, 6, 11);
        cfg.warm_up.init_scale = 1.0;
        let log = run_training(&env, &cfg).unwrap();
        assert_eq!(log.completed_rounds(), 6);
        assert!(log.is_monotone(1e-9));
        assert!(log.min_slack().unwrap() >= -1e-8);
        assert_eq!(log.reports.len(), 12);
    }

    #[test]
    fn training_is_deterministic() {
        let env = chain2_env();
        let mut cfg = ScheduleConfig::grpo(2, 2, 1, 8);
        cfg.warm_up.init_scale = 0.5;
        let a = run_training(&env, &cfg).unwrap();
        let b = run_training(&env, &cfg).unwrap();
        assert!(a.same_run(&b));
    }

    #[test]
    fn single_agent_parallel_equals_sequential() {
        let game = MarkovGame::random(&mut rng_from_seed(4), 3, vec![3], 0.8);
        let env = GameEnv::new(game, 20).unwrap();
        let mut cfg = ScheduleConfig::grpo(1, 2, 1, 2);
        cfg.warm_up.init_scale = 0.5;
        let seq = run_training(&env, &cfg).unwrap();
        cfg.mode = UpdateMode::Parallel;
        let par = run_training(&env, &cfg).unwrap();
        assert_eq!(seq.rounds, par.rounds);
        assert_eq!(seq.steps, par.steps);
    }

    #[test]
    fn joint_rejects_exact_solver() {
        let mut cfg = ScheduleConfig::exact(2, 1, 0);
        cfg.mode = UpdateMode::Joint;
        assert!(cfg.validate(2).is_err());
        let mut cfg = ScheduleConfig::exact(2, 1, 0);
        cfg.order = Some(vec![0, 0]);
        assert!(cfg.validate(2).is_err());
    }

    #[test]
    fn imitation_warm_up_matches_script() {
        let suite = GridGuiSuite::new(fixture_suite(4), RewardWeights::default()).unwrap();
        let cfg = ScheduleConfig::grpo(2, 0, 1, 21);
        let (_, rec) = warm_up(&suite, &cfg).unwrap();
        assert!(rec.navigator_accuracy.unwrap() >= 0.9, "{:?}", rec.navigator_accuracy);
        assert!(rec.interactor_score.unwrap() > rec.interactor_uniform_score.unwrap());
    }
}
