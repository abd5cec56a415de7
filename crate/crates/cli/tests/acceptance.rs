//! Acceptance criteria, one line of output each. Runs without the libtest
//! harness so that every line is printed whether or not it passes.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use interleave_cli::config::{ExperimentConfig, Transport, VerifySpec};
use interleave_cli::experiment::{bound_trials, run_experiment, ExperimentOutcome};
use interleave_cli::run::{run_verb, Overrides, Verb, EXIT_OK};
use interleave_core::gridgui::fixture_suite;
use interleave_core::grpo::{
    composite_reward, normalized_advantage, objective_multi, Decision, GrpoHyperparams, RewardWeights, Rollout,
    RolloutGroup,
};
use interleave_core::host::InProcessHost;
use interleave_core::policy::TabularPolicy;
use interleave_core::rng::{mix_seed, rng_from_seed, SeedRng};
use interleave_core::rollout::{Actor, GameEnv, GridGuiSuite, TrainingEnv};
use interleave_core::MarkovGame;
use interleave_service::{serve, ClientConfig, RemoteHost};
use rand::Rng;

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn load(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&config_path(name)).expect("shipped config loads")
}

fn run(cfg: &ExperimentConfig) -> (ExperimentOutcome, Duration) {
    let start = Instant::now();
    let outcome = run_experiment(cfg).expect("experiment runs");
    (outcome, start.elapsed())
}

fn chain2_runs() -> &'static (ExperimentOutcome, Duration) {
    static RUNS: OnceLock<(ExperimentOutcome, Duration)> = OnceLock::new();
    RUNS.get_or_init(|| {
        let mut cfg = load("verify_chain2.json");
        cfg.suites = Some(Vec::new());
        run(&cfg)
    })
}

fn bound_suite() -> Check {
    let start = Instant::now();
    let spec = VerifySpec::default();
    let mut games = vec![("chain2".to_string(), MarkovGame::chain2())];
    for (k, g) in spec.random_games.iter().enumerate() {
        if g.states > 6 || !(2..=3).contains(&g.actions.len()) {
            return Err(format!("random game {k} outside the required size"));
        }
        let game = MarkovGame::random(&mut rng_from_seed(g.seed), g.states, g.actions.clone(), g.discount);
        games.push((format!("random{k} ({} agents)", game.n_agents()), game));
    }
    let mut worst = f64::INFINITY;
    let mut failures = 0;
    let mut trials = 0;
    for (_, game) in &games {
        let reports = bound_trials(game, 1000, 7).map_err(|e| e.to_string())?;
        trials += reports.len();
        failures += reports.iter().filter(|r| r.slack < -1e-8).count();
        worst = reports.iter().map(|r| r.slack).fold(worst, f64::min);
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(
        failures == 0 && trials == 3000 && secs < 120.0,
        format!("{trials} trials on {} games, {failures} violations, min slack {worst:.3e}, {secs:.1}s", games.len()),
    )
}

fn monotonicity() -> Check {
    let (outcome, elapsed) = chain2_runs();
    let logs: Vec<_> = outcome.logs_of("main").collect();
    let rounds: usize = logs.iter().map(|(_, l)| l.completed_rounds()).sum();
    let worst = logs
        .iter()
        .flat_map(|(_, l)| l.rounds.iter().filter_map(|r| r.delta))
        .fold(f64::INFINITY, f64::min);
    let all_exact = logs.iter().all(|(_, l)| l.rounds.iter().all(|r| r.j_exact.is_some()));
    ensure(
        logs.len() == 10 && rounds == 200 && all_exact && worst >= -1e-9 && elapsed.as_secs_f64() < 300.0,
        format!(
            "{} seeds, {rounds} rounds, smallest change {worst:.3e}, {:.1}s",
            logs.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn convergence() -> Check {
    let (outcome, _) = chain2_runs();
    let game = MarkovGame::chain2();
    let bound = game.max_abs_reward() / (1.0 - game.discount());
    let logs: Vec<_> = outcome.logs_of("main").collect();
    let mut first = Vec::new();
    for (_, log) in &logs {
        first.push(log.rounds.iter().skip(1).find(|r| r.delta.is_some_and(|d| d.abs() < 1e-4)).map(|r| r.round));
    }
    let converged = first.iter().filter(|f| f.is_some()).count();
    let largest = logs
        .iter()
        .flat_map(|(_, l)| l.rounds.iter().map(|r| r.j().abs()))
        .fold(0.0, f64::max);
    ensure(
        converged >= 9 && largest <= bound,
        format!("{converged}/{} seeds below 1e-4 (first rounds {first:?}); max |J| {largest:.6} <= {bound}", logs.len()),
    )
}

struct RandomBatch {
    groups: Vec<RolloutGroup>,
    policies: Vec<TabularPolicy>,
    refs: Vec<TabularPolicy>,
    trainable: Vec<bool>,
    hyper: GrpoHyperparams,
}

/// A batch whose importance ratios all stay at least `margin` away from the
/// clip boundaries, so that the objective is smooth at the evaluation point.
fn random_batch(seed: u64, margin: f64) -> RandomBatch {
    let mut rng = rng_from_seed(seed);
    let n_agents = rng.gen_range(2..=3);
    let shapes: Vec<(usize, usize)> = (0..n_agents).map(|_| (rng.gen_range(1..=4), rng.gen_range(2..=4))).collect();
    let table = |rng: &mut SeedRng, i: usize| {
        let (s, a) = shapes[i];
        TabularPolicy::from_logits(i, s, a, (0..s * a).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    };
    let policies: Vec<TabularPolicy> = (0..n_agents).map(|i| table(&mut rng, i)).collect();
    let refs: Vec<TabularPolicy> = (0..n_agents).map(|i| table(&mut rng, i)).collect();
    let frozen = rng.gen_range(0..n_agents);
    let mut trainable: Vec<bool> = (0..n_agents).map(|_| rng.gen_bool(0.7)).collect();
    trainable[frozen] = false;
    if !trainable.iter().any(|t| *t) {
        trainable[(frozen + 1) % n_agents] = true;
    }
    let hyper = GrpoHyperparams {
        kl_coef: rng.gen_range(0.0..0.1),
        ..GrpoHyperparams::default()
    };
    let eps = hyper.clip_epsilon;
    let groups = (0..rng.gen_range(1..=4))
        .map(|input_id| RolloutGroup {
            input_id,
            rollouts: (0..rng.gen_range(2..=6))
                .map(|_| Rollout {
                    decisions: (0..rng.gen_range(1..=5))
                        .map(|_| {
                            let agent = rng.gen_range(0..n_agents);
                            let (s, a) = shapes[agent];
                            let (state, action) = (rng.gen_range(0..s), rng.gen_range(0..a));
                            let current = policies[agent].log_prob(state, action).unwrap();
                            let old_log_prob = loop {
                                let old = current + rng.gen_range(-0.5..0.5);
                                let v = (current - old).exp();
                                if (v - (1.0 - eps)).abs() > margin && (v - (1.0 + eps)).abs() > margin && old < 0.0 {
                                    break old;
                                }
                            };
                            Decision {
                                agent,
                                state,
                                action,
                                old_log_prob,
                            }
                        })
                        .collect(),
                    reward: rng.gen_range(0.0..1.0),
                })
                .collect(),
        })
        .collect();
    RandomBatch {
        groups,
        policies,
        refs,
        trainable,
        hyper,
    }
}

fn objective_at(b: &RandomBatch, policies: &[TabularPolicy]) -> f64 {
    let ps: Vec<&TabularPolicy> = policies.iter().collect();
    let rs: Vec<&TabularPolicy> = b.refs.iter().collect();
    objective_multi(&b.groups, &ps, &rs, &b.trainable, &b.hyper).unwrap().objective
}

fn grpo_gradient() -> Check {
    let h = 1e-5;
    let mut worst_rel = 0.0f64;
    let mut worst_frozen = 0.0f64;
    let mut checked = 0;
    for batch in 0..100u64 {
        let b = random_batch(mix_seed(4, batch), 1e-3);
        let ps: Vec<&TabularPolicy> = b.policies.iter().collect();
        let rs: Vec<&TabularPolicy> = b.refs.iter().collect();
        let eval = objective_multi(&b.groups, &ps, &rs, &b.trainable, &b.hyper).unwrap();
        let base = eval.objective;
        for (j, grad) in eval.gradients.iter().enumerate() {
            if !b.trainable[j] {
                worst_frozen = grad.iter().map(|g| g.abs()).fold(worst_frozen, f64::max);
                let mut moved = b.policies.clone();
                for z in moved[j].logits_mut() {
                    *z += 1.0;
                }
                moved[j].logits_mut()[0] -= 3.0;
                worst_frozen = worst_frozen.max((objective_at(&b, &moved) - base).abs());
                continue;
            }
            let mut diff2 = 0.0;
            let mut norm2 = 0.0;
            for (idx, g) in grad.iter().enumerate() {
                let mut plus = b.policies.clone();
                plus[j].logits_mut()[idx] += h;
                let mut minus = b.policies.clone();
                minus[j].logits_mut()[idx] -= h;
                let fd = (objective_at(&b, &plus) - objective_at(&b, &minus)) / (2.0 * h);
                diff2 += (fd - g).powi(2);
                norm2 += g * g;
            }
            worst_rel = worst_rel.max(diff2.sqrt() / norm2.sqrt().max(1e-8));
        }
        checked += 1;
    }
    ensure(
        checked == 100 && worst_rel <= 1e-4 && worst_frozen < 1e-12,
        format!("{checked} batches, max relative error {worst_rel:.3e}, max frozen response {worst_frozen:.3e}"),
    )
}

fn normalization() -> Check {
    let mut rng = rng_from_seed(5);
    let mut worst_mean = 0.0f64;
    let mut worst_std = 0.0f64;
    let mut degenerate = 0;
    for g in 0..10_000 {
        let k = rng.gen_range(2..=16);
        let scale = 10f64.powf(rng.gen_range(-3.0..3.0));
        let rewards: Vec<f64> = if g % 100 == 0 {
            vec![scale; k]
        } else {
            (0..k).map(|_| scale * rng.gen_range(-1.0..1.0)).collect()
        };
        let adv = normalized_advantage(&rewards).map_err(|e| e.to_string())?;
        let n = k as f64;
        let mean = adv.advantages.iter().sum::<f64>() / n;
        if adv.degenerate {
            degenerate += 1;
            worst_mean = adv.advantages.iter().map(|a| a.abs()).fold(worst_mean, f64::max);
            continue;
        }
        let std = (adv.advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
        worst_mean = worst_mean.max(mean.abs());
        worst_std = worst_std.max((std - 1.0).abs());
    }
    let r = composite_reward(1.0, 1.0, 0.0, &RewardWeights::default()).map_err(|e| e.to_string())?;
    ensure(
        worst_mean < 1e-12 && worst_std < 1e-9 && degenerate == 100 && (r - 0.28).abs() < 1e-12,
        format!("10000 groups: max |mean| {worst_mean:.1e}, max |std-1| {worst_std:.1e}, {degenerate} constant groups zeroed; R(1,1,0) = {r}"),
    )
}

fn gridgui_runs(name: &str) -> &'static (ExperimentOutcome, Duration) {
    static RUNS: OnceLock<std::sync::Mutex<BTreeMap<String, &'static (ExperimentOutcome, Duration)>>> = OnceLock::new();
    let cache = RUNS.get_or_init(Default::default);
    let mut cache = cache.lock().unwrap();
    cache.entry(name.to_string()).or_insert_with(|| {
        let mut cfg = load(name);
        cfg.suites = Some(Vec::new());
        Box::leak(Box::new(run(&cfg)))
    })
}

fn training_lift() -> Check {
    let (outcome, elapsed) = gridgui_runs("train_gridgui.json");
    let cfg = load("train_gridgui.json");
    let logs: Vec<_> = outcome.logs_of("main").collect();
    let pairs: Vec<(f64, f64)> = logs.iter().map(|(_, l)| (l.rounds[0].j(), l.final_j().unwrap())).collect();
    let lifted = pairs.iter().filter(|(w, f)| f > w).count();
    let fixtures = matches!(cfg.env, interleave_cli::config::EnvSpec::Gridgui { fixtures: 20, .. });
    let shape = logs.iter().all(|(_, l)| l.completed_rounds() == 10) && cfg.schedule.budgets == vec![2, 2];
    ensure(
        fixtures && shape && logs.len() == 5 && lifted == 5 && elapsed.as_secs_f64() < 900.0,
        format!(
            "{lifted}/{} seeds improve; warm-up -> final {}; {:.1}s",
            logs.len(),
            pairs.iter().map(|(w, f)| format!("{w:.3}->{f:.3}")).collect::<Vec<_>>().join(", "),
            elapsed.as_secs_f64()
        ),
    )
}

fn reweight_ablation() -> Check {
    let (outcome, _) = gridgui_runs("ablate_reweight.json");
    let on: Vec<f64> = outcome.logs_of("reweight_on").map(|(_, l)| l.final_j().unwrap()).collect();
    let off: Vec<f64> = outcome.logs_of("reweight_off").map(|(_, l)| l.final_j().unwrap()).collect();
    let wins = on.iter().zip(&off).filter(|(a, b)| a >= b).count();
    let filtered = |arm: &str, agent: usize| -> f64 {
        let (s, f) = outcome
            .logs_of(arm)
            .map(|(_, l)| l.filtering[agent])
            .fold((0, 0), |(s, f), c| (s + c.sampled, f + c.filtered));
        f as f64 / s.max(1) as f64
    };
    ensure(
        on.len() == 5 && off.len() == 5 && wins >= 4,
        format!(
            "with filtering >= without on {wins}/5 seeds (mean {:.4} vs {:.4}); filtered share navigator {:.3}, interactor {:.3}",
            on.iter().sum::<f64>() / on.len() as f64,
            off.iter().sum::<f64>() / off.len() as f64,
            filtered("reweight_on", 0),
            filtered("reweight_on", 1)
        ),
    )
}

fn read_csvs(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

fn cli_twice(verb: Verb, config: &str) -> (BTreeMap<String, Vec<u8>>, BTreeMap<String, Vec<u8>>, bool) {
    let tmp = tempfile::tempdir().unwrap();
    let mut ok = true;
    let mut outputs = Vec::new();
    for run in ["first", "second"] {
        let out = tmp.path().join(run);
        let overrides = Overrides {
            out: Some(out.clone()),
            seed: None,
        };
        ok &= run_verb(verb, &config_path(config), &overrides) == EXIT_OK;
        outputs.push(read_csvs(&out));
    }
    let second = outputs.pop().unwrap();
    (outputs.pop().unwrap(), second, ok)
}

fn rounds_epochs_ablation() -> Check {
    let (first, second, ok) = cli_twice(Verb::Ablate, "ablate_rounds_epochs.json");
    let comparison = first.get("comparison.csv").cloned().unwrap_or_default();
    let mut reader = csv::Reader::from_reader(comparison.as_slice());
    let mut finals: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut rounds: BTreeMap<String, String> = BTreeMap::new();
    for row in reader.records() {
        let row = row.map_err(|e| e.to_string())?;
        finals.entry(row[0].to_string()).or_default().push(row[4].parse().unwrap());
        rounds.insert(row[0].to_string(), row[2].to_string());
    }
    let arms_ok = finals.get("rounds10_epochs2").map(Vec::len) == Some(5)
        && finals.get("rounds2_epochs10").map(Vec::len) == Some(5)
        && rounds["rounds10_epochs2"] == "10"
        && rounds["rounds2_epochs10"] == "2";
    let mean = |arm: &str| finals.get(arm).map_or(f64::NAN, |v| v.iter().sum::<f64>() / v.len() as f64);
    ensure(
        ok && arms_ok && first == second,
        format!(
            "both arms complete, reruns identical: {}; mean final 10x2 {:.4}, 2x10 {:.4}",
            first == second,
            mean("rounds10_epochs2"),
            mean("rounds2_epochs10")
        ),
    )
}

fn transport_equivalence() -> Check {
    let suite = GridGuiSuite::new(fixture_suite(20), RewardWeights::default()).map_err(|e| e.to_string())?;
    let chain = GameEnv::new(MarkovGame::chain2(), 30).map_err(|e| e.to_string())?;
    let mut groups_compared = 0;
    for (env, per_rollout) in [(&suite as &dyn TrainingEnv, vec![false, true]), (&chain, vec![true, true])] {
        let mut rng = rng_from_seed(9);
        let policies: Vec<TabularPolicy> = env
            .uniform_policies()
            .into_iter()
            .map(|p| {
                let logits = (0..p.logits().len()).map(|_| rng.gen_range(-1.5..1.5)).collect();
                TabularPolicy::from_logits(p.agent_id, p.n_states(), p.n_actions(), logits).unwrap()
            })
            .collect();
        let service = serve(policies.clone(), "127.0.0.1:0").map_err(|e| e.to_string())?;
        let remote = RemoteHost::new(&service, ClientConfig::default()).map_err(|e| e.to_string())?;
        let local = InProcessHost::new(policies).map_err(|e| e.to_string())?;
        for input in 0..env.n_inputs() {
            let seed = mix_seed(11, input as u64);
            let a = env
                .collect_group(input, &[Actor::Host(&remote), Actor::Host(&remote)], &per_rollout, 8, seed)
                .map_err(|e| e.to_string())?;
            let b = env
                .collect_group(input, &[Actor::Host(&local), Actor::Host(&local)], &per_rollout, 8, seed)
                .map_err(|e| e.to_string())?;
            if serde_json::to_string(&a).unwrap() != serde_json::to_string(&b).unwrap() {
                return Err(format!("rollout group {input} differs between transports"));
            }
            groups_compared += 1;
        }
    }
    let in_process = load("train_gridgui.json");
    let remote = ExperimentConfig {
        transport: Transport::Remote,
        suites: Some(Vec::new()),
        ..in_process.clone()
    };
    let (a, _) = gridgui_runs("train_gridgui.json");
    let (b, _) = run(&remote);
    let mut same = 0;
    let mut resident = Vec::new();
    for ((_, x), (_, y)) in a.logs_of("main").zip(b.logs_of("main")) {
        same += usize::from(x.same_run(y));
        resident.push(y.max_resident_agents);
    }
    ensure(
        same == in_process.seeds.len() && resident.iter().all(|r| *r == 1),
        format!("{groups_compared} rollout groups identical; {same}/{} training logs identical; remote resident blocks {resident:?}", in_process.seeds.len()),
    )
}

fn determinism() -> Check {
    let mut details = Vec::new();
    for (verb, config) in [
        (Verb::Verify, "verify_chain2.json"),
        (Verb::Train, "train_gridgui.json"),
        (Verb::Ablate, "ablate_reweight.json"),
        (Verb::Ablate, "ablate_parallel.json"),
    ] {
        let (first, second, ok) = cli_twice(verb, config);
        if !ok || first.is_empty() || first != second {
            return Err(format!("{config}: rerun differs or failed"));
        }
        details.push(format!("{config} ({} csv)", first.len()));
    }
    Ok(format!("byte-identical reruns: {}", details.join(", ")))
}

fn main() {
    let criteria: [(&str, fn() -> Check); 10] = [
        ("single-slot improvement bound", bound_suite),
        ("monotone exact training", monotonicity),
        ("convergence and boundedness", convergence),
        ("objective gradient and frozen mask", grpo_gradient),
        ("advantage normalization and reward identity", normalization),
        ("end-to-end training lift", training_lift),
        ("reweighting ablation", reweight_ablation),
        ("rounds versus epochs ablation", rounds_epochs_ablation),
        ("transport equivalence", transport_equivalence),
        ("determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let label = format!("criterion {}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| label.ends_with(&format!(" {f}")) || name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("{label:<12} PASS  {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("{label:<12} FAIL  {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
