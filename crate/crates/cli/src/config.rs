//! Experiment configuration files (JSON, unknown keys rejected).

use std::fmt;
use std::path::{Path, PathBuf};

use interleave_core::gridgui::{fixture_suite, GridGuiTask};
use interleave_core::grpo::{ReweightRule, RewardWeights};
use interleave_core::policy::TabularPolicy;
use interleave_core::rollout::{GameEnv, GridGuiSuite, TrainingEnv};
use interleave_core::scheduler::{ScheduleConfig, UpdateMode};
use interleave_core::MarkovGame;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    VerifyTheory,
    Train,
    AblationReweight,
    AblationParallel,
    AblationRoundsEpochs,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::VerifyTheory => "verify_theory",
            ExperimentKind::Train => "train",
            ExperimentKind::AblationReweight => "ablation_reweight",
            ExperimentKind::AblationParallel => "ablation_parallel",
            ExperimentKind::AblationRoundsEpochs => "ablation_rounds_epochs",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvSpec {
    /// The built-in two-state, two-agent chain.
    Chain2 {
        #[serde(default = "default_horizon")]
        horizon: usize,
    },
    /// A game file.
    Game {
        path: PathBuf,
        #[serde(default = "default_horizon")]
        horizon: usize,
    },
    /// GridGUI tasks: the first `fixtures` seeded fixture tasks plus any task
    /// files.
    Gridgui {
        #[serde(default)]
        fixtures: usize,
        #[serde(default)]
        tasks: Vec<PathBuf>,
        #[serde(default)]
        weights: RewardWeights,
    },
}

fn default_horizon() -> usize {
    60
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transport {
    #[default]
    InProcess,
    /// Frozen agents are served by a loopback policy service.
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomGameSpec {
    pub states: usize,
    pub actions: Vec<usize>,
    pub discount: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySpec {
    /// Random single-slot perturbations per game for the bound suite.
    pub bound_trials: usize,
    /// Games checked besides the experiment's own game.
    pub random_games: Vec<RandomGameSpec>,
    pub convergence_tolerance: f64,
    /// Share of seeds that must reach the tolerance.
    pub convergence_fraction: f64,
}

impl Default for VerifySpec {
    fn default() -> Self {
        Self {
            bound_trials: 1000,
            random_games: vec![
                RandomGameSpec {
                    states: 5,
                    actions: vec![2, 3],
                    discount: 0.9,
                    seed: 1,
                },
                RandomGameSpec {
                    states: 6,
                    actions: vec![2, 2, 2],
                    discount: 0.85,
                    seed: 2,
                },
            ],
            convergence_tolerance: 1e-4,
            convergence_fraction: 0.9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundsEpochs {
    pub rounds: usize,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSpec {
    /// Filter applied to every agent in the "on" arm.
    pub reweight_rule: ReweightRule,
    pub rounds_epochs: Vec<RoundsEpochs>,
    /// Update modes compared by the parallel ablation; `None` means
    /// sequential and parallel, plus joint for the sampled solver.
    pub modes: Option<Vec<UpdateMode>>,
    /// Share of seeds on which filtering must not lose to no filtering.
    pub directional_fraction: f64,
}

impl Default for AblationSpec {
    fn default() -> Self {
        Self {
            reweight_rule: ReweightRule::default(),
            rounds_epochs: vec![RoundsEpochs { rounds: 10, epochs: 2 }, RoundsEpochs { rounds: 2, epochs: 10 }],
            modes: None,
            directional_fraction: 0.8,
        }
    }
}

/// Checks an experiment can run. Which ones apply by default depends on the
/// kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuiteName {
    /// Random single-slot perturbations satisfy the safety bound.
    Bound,
    /// Every exact-mode micro-step satisfies the safety bound.
    Slack,
    /// No round decreases the exact objective.
    Monotone,
    /// Round-to-round change falls below tolerance for enough seeds, and
    /// values stay within the reward bound.
    Convergence,
    /// Final performance beats the warm-up for every seed.
    Lift,
    /// Filtering does not lose to no filtering on enough seeds.
    ReweightDirectional,
    /// A second run of every arm reproduces the first.
    Reproducible,
}

impl SuiteName {
    pub fn as_str(self) -> &'static str {
        match self {
            SuiteName::Bound => "bound",
            SuiteName::Slack => "slack",
            SuiteName::Monotone => "monotone",
            SuiteName::Convergence => "convergence",
            SuiteName::Lift => "lift",
            SuiteName::ReweightDirectional => "reweight_directional",
            SuiteName::Reproducible => "reproducible",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub env: EnvSpec,
    pub schedule: ScheduleConfig,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub transport: Transport,
    #[serde(default)]
    pub verify: VerifySpec,
    #[serde(default)]
    pub ablation: AblationSpec,
    /// Overrides the kind's default suites.
    #[serde(default)]
    pub suites: Option<Vec<SuiteName>>,
}

/// Serving configuration for the `serve` verb.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeConfig {
    /// JSON array of per-agent policies, agent `i` at index `i`.
    pub policies: PathBuf,
    #[serde(default = "default_endpoint")]
    pub endpoint: String,
}

fn default_endpoint() -> String {
    "127.0.0.1:7878".into()
}

/// Problems that make a configuration unusable (exit status 2).
#[derive(Debug)]
pub enum ConfigError {
    Read { path: PathBuf, message: String },
    Parse { path: PathBuf, line: usize, column: usize, message: String },
    Invalid(String),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Read { path, message } => write!(f, "cannot read {}: {message}", path.display()),
            ConfigError::Parse {
                path,
                line,
                column,
                message,
            } => write!(f, "{}:{line}:{column}: {message}", path.display()),
            ConfigError::Invalid(m) => write!(f, "invalid configuration: {m}"),
        }
    }
}

impl std::error::Error for ConfigError {}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn parse<T: serde::de::DeserializeOwned>(path: &Path, text: &str) -> Result<T, ConfigError> {
    serde_json::from_str(text).map_err(|e| ConfigError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn require_file(p: &Path) -> Result<(), ConfigError> {
    if p.is_file() {
        Ok(())
    } else {
        Err(ConfigError::Invalid(format!("referenced file {} does not exist", p.display())))
    }
}

impl ExperimentConfig {
    /// Parses, resolves relative paths against the file's directory and
    /// validates.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = read(path)?;
        let mut cfg: Self = parse(path, &text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        match &mut cfg.env {
            EnvSpec::Game { path, .. } => *path = resolve(base, path),
            EnvSpec::Gridgui { tasks, .. } => {
                for t in tasks.iter_mut() {
                    *t = resolve(base, t);
                }
            }
            EnvSpec::Chain2 { .. } => {}
        }
        if let Some(out) = &mut cfg.out {
            *out = resolve(base, out);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.seeds.is_empty() {
            return Err(ConfigError::Invalid("seeds must not be empty".into()));
        }
        match &self.env {
            EnvSpec::Game { path, .. } => require_file(path)?,
            EnvSpec::Gridgui { fixtures, tasks, .. } => {
                for t in tasks {
                    require_file(t)?;
                }
                if *fixtures == 0 && tasks.is_empty() {
                    return Err(ConfigError::Invalid("gridgui needs fixtures or task files".into()));
                }
            }
            EnvSpec::Chain2 { .. } => {}
        }
        if self.schedule.rounds == 0 {
            return Err(ConfigError::Invalid("schedule.rounds must be at least 1".into()));
        }
        if self.schedule.budgets.contains(&0) {
            return Err(ConfigError::Invalid("every micro-step budget must be at least 1".into()));
        }
        let invalid = |e: interleave_core::Error| ConfigError::Invalid(e.to_string());
        let env = self.build_env().map_err(invalid)?;
        self.schedule.validate(env.n_agents()).map_err(invalid)?;
        if self.kind == ExperimentKind::AblationRoundsEpochs
            && self.ablation.rounds_epochs.iter().any(|a| a.rounds == 0 || a.epochs == 0)
        {
            return Err(ConfigError::Invalid("rounds and epochs of every arm must be at least 1".into()));
        }
        Ok(())
    }

    pub fn build_env(&self) -> interleave_core::Result<Box<dyn TrainingEnv>> {
        Ok(match &self.env {
            EnvSpec::Chain2 { horizon } => Box::new(GameEnv::new(MarkovGame::chain2(), *horizon)?),
            EnvSpec::Game { path, horizon } => Box::new(GameEnv::new(MarkovGame::load(path)?, *horizon)?),
            EnvSpec::Gridgui {
                fixtures,
                tasks,
                weights,
            } => {
                let mut all = fixture_suite(*fixtures);
                for t in tasks {
                    all.push(GridGuiTask::load(t)?);
                }
                Box::new(GridGuiSuite::new(all, *weights)?)
            }
        })
    }

    /// Suites run when the configuration does not list its own.
    pub fn suites(&self) -> Vec<SuiteName> {
        if let Some(s) = &self.suites {
            let mut s = s.clone();
            s.sort();
            s.dedup();
            return s;
        }
        use SuiteName::*;
        let exact = self.schedule.solver == interleave_core::scheduler::Solver::Exact;
        match self.kind {
            ExperimentKind::VerifyTheory => vec![Bound, Slack, Monotone, Convergence],
            ExperimentKind::Train if exact => vec![Slack, Monotone],
            ExperimentKind::Train => vec![Lift],
            ExperimentKind::AblationReweight => vec![ReweightDirectional],
            ExperimentKind::AblationParallel if exact => vec![Slack],
            ExperimentKind::AblationParallel => vec![],
            ExperimentKind::AblationRoundsEpochs => vec![Reproducible],
        }
    }
}

impl ServeConfig {
    pub fn load(path: &Path) -> Result<(Self, Vec<TabularPolicy>), ConfigError> {
        let mut cfg: Self = parse(path, &read(path)?)?;
        cfg.policies = resolve(path.parent().unwrap_or(Path::new(".")), &cfg.policies);
        require_file(&cfg.policies)?;
        let raw: Vec<TabularPolicy> = parse(&cfg.policies, &read(&cfg.policies)?)?;
        let policies = raw
            .into_iter()
            .map(|p| TabularPolicy::from_logits(p.agent_id, p.n_states(), p.n_actions(), p.logits().to_vec()))
            .collect::<interleave_core::Result<Vec<_>>>()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok((cfg, policies))
    }
}
