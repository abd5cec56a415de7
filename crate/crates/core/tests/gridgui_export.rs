//! The exported game's exact value against direct episodes of the grid
//! environment.

use interleave_core::gridgui::{
    export_game, interactor_state, navigator_state, scripted_policies, GridGuiEnv, GridGuiTask,
};
use interleave_core::gridgui::{AtomicAction, InstructionToken};
use interleave_core::grpo::RewardWeights;
use interleave_core::oracle::return_j;
use interleave_core::policy::TabularPolicy;
use interleave_core::rng::{mix_seed, rng_from_seed};

/// Discounted combined reward of one episode; the navigator's decision and
/// the interactor's decision each take one discount step.
fn episode(task: &GridGuiTask, nav: &TabularPolicy, int: &TabularPolicy, gamma: f64, seed: u64) -> f64 {
    let weights = RewardWeights::default();
    let (mut env, mut obs) = GridGuiEnv::reset(task, seed);
    let mut discount = gamma;
    let mut total = 0.0;
    let mut t = 0u64;
    while !env.is_done() {
        let (tok, _) = nav.sample(navigator_state(&obs).unwrap(), mix_seed(seed, 2 * t)).unwrap();
        let token = InstructionToken::from_index(tok).unwrap();
        let int_state = interactor_state(&env.interactor_observation(token));
        let (a, _) = int.sample(int_state, mix_seed(seed, 2 * t + 1)).unwrap();
        let result = env.step(token, AtomicAction::from_index(a).unwrap()).unwrap();
        total += discount * result.components.combined(&weights);
        discount *= gamma * gamma;
        obs = result.navigator;
        t += 1;
    }
    total
}

#[test]
fn exported_value_matches_sampled_episodes() {
    let gamma = 0.9;
    let mut rng = rng_from_seed(31);
    for (k, strength) in [(0u64, 3.0), (1, 1.5)] {
        let task = GridGuiTask::random(&mut rng, 3, 3, 400);
        let (nav, int) = scripted_policies(strength);
        let exported = export_game(&task, &RewardWeights::default(), gamma).unwrap();
        let exact = return_j(&exported.game, &exported.lift(&nav, &int).unwrap()).unwrap();
        let n = 3000;
        let samples: Vec<f64> = (0..n).map(|e| episode(&task, &nav, &int, gamma, mix_seed(k, e))).collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let sd = (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        let se = sd / (n as f64).sqrt();
        assert!((mean - exact).abs() < 3.0 * se + 1e-9, "task {k}: MC {mean} ± {se}, exact {exact}");
    }
}

#[test]
fn confident_script_earns_near_full_reward_per_step() {
    let mut rng = rng_from_seed(32);
    let task = GridGuiTask::random(&mut rng, 3, 2, 50);
    let (nav, int) = scripted_policies(30.0);
    let exported = export_game(&task, &RewardWeights::default(), 0.95).unwrap();
    let exact = return_j(&exported.game, &exported.lift(&nav, &int).unwrap()).unwrap();
    // Every gold step pays 1 at odd game steps until finish.
    let steps = task.gold_trace().len() as i32;
    let expected: f64 = (0..steps).map(|t| 0.95f64.powi(2 * t + 1)).sum();
    assert!((exact - expected).abs() < 1e-9, "{exact} vs {expected}");
}
