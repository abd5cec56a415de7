//! The command-line verbs, returning process exit codes.

use std::io::Write;
use std::path::{Path, PathBuf};

use interleave_service::serve;

use crate::config::{ConfigError, EnvSpec, ExperimentConfig, ExperimentKind, ServeConfig};
use crate::experiment::{run_experiment, ExperimentOutcome};
use crate::output::{emit_summary, write_summary, write_tables};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verb {
    Verify,
    Train,
    Ablate,
}

impl Verb {
    fn accepts(self, kind: ExperimentKind) -> bool {
        match self {
            Verb::Verify => kind == ExperimentKind::VerifyTheory,
            Verb::Train => kind == ExperimentKind::Train,
            Verb::Ablate => matches!(
                kind,
                ExperimentKind::AblationReweight | ExperimentKind::AblationParallel | ExperimentKind::AblationRoundsEpochs
            ),
        }
    }
}

/// Overrides given on the command line.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    /// Replaces the configured seed list with this single seed.
    pub seed: Option<u64>,
}

/// Loads, checks and applies overrides; nothing is written on failure.
pub fn prepare(verb: Verb, config: &Path, overrides: &Overrides) -> Result<(ExperimentConfig, PathBuf), ConfigError> {
    let mut cfg = ExperimentConfig::load(config)?;
    if !verb.accepts(cfg.kind) {
        return Err(ConfigError::Invalid(format!(
            "experiment kind {} cannot run under this verb",
            cfg.kind.as_str()
        )));
    }
    if let Some(seed) = overrides.seed {
        cfg.seeds = vec![seed];
    }
    let out = overrides
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| ConfigError::Invalid("no output directory: set `out` or pass --out".into()))?;
    Ok((cfg, out))
}

/// Runs an experiment and writes its artifacts.
pub fn run_verb(verb: Verb, config: &Path, overrides: &Overrides) -> i32 {
    let (cfg, out) = match prepare(verb, config, overrides) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    let outcome = match run_experiment(&cfg) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            let empty = ExperimentOutcome {
                runs: Vec::new(),
                bound: Vec::new(),
                suites: Vec::new(),
            };
            let _ = write_summary(&out, &emit_summary(cfg.kind, &empty, &cfg.suites(), false));
            return EXIT_FAILED;
        }
    };
    let gridgui = matches!(cfg.env, EnvSpec::Gridgui { .. });
    let summary = emit_summary(cfg.kind, &outcome, &cfg.suites(), gridgui);
    if let Err(e) = write_tables(&out, cfg.kind, &outcome).and_then(|_| write_summary(&out, &summary)) {
        eprintln!("error: cannot write artifacts to {}: {e}", out.display());
        return EXIT_FAILED;
    }
    if let Some(e) = outcome.runtime_error() {
        eprintln!("error: {e}");
    }
    for s in &outcome.suites {
        println!("{:<22} {:<8} {}", s.name.as_str(), s.status.as_str(), s.detail);
    }
    if summary["passed"].as_bool() == Some(true) {
        EXIT_OK
    } else {
        EXIT_FAILED
    }
}

/// Serves the configured policies until the process is killed. The bound
/// endpoint is printed and, with `out`, written to `endpoint.txt`.
pub fn run_serve(config: &Path, out: Option<&Path>) -> i32 {
    let (cfg, policies) = match ServeConfig::load(config) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    let handle = match serve(policies, &cfg.endpoint) {
        Ok(h) => h,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_FAILED;
        }
    };
    let endpoint = handle.endpoint();
    if let Some(dir) = out {
        let written = std::fs::create_dir_all(dir).and_then(|_| std::fs::write(dir.join("endpoint.txt"), format!("{endpoint}\n")));
        if let Err(e) = written {
            eprintln!("error: {e}");
            return EXIT_FAILED;
        }
    }
    println!("serving on {endpoint}");
    let _ = std::io::stdout().flush();
    handle.wait();
    EXIT_OK
}
