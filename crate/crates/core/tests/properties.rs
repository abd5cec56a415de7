use interleave_core::grpo::{clipped_term, normalized_advantage};
use interleave_core::oracle::microstep_bound;
use interleave_core::policy::{softmax, JointPolicy, TabularPolicy};
use interleave_core::rng::rng_from_seed;
use interleave_core::MarkovGame;
use proptest::prelude::*;

fn joint(game: &MarkovGame, logits: &[f64]) -> JointPolicy {
    let mut offset = 0;
    JointPolicy::new(
        (0..game.n_agents())
            .map(|i| {
                let n = game.n_states() * game.n_actions(i);
                let p = TabularPolicy::from_logits(i, game.n_states(), game.n_actions(i), logits[offset..offset + n].to_vec());
                offset += n;
                p.unwrap()
            })
            .collect(),
    )
    .unwrap()
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-50.0f64..50.0, 1..12)) {
        let p = softmax(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|x| *x >= 0.0));
    }

    #[test]
    fn joint_action_probabilities_sum_to_one(
        game_seed in 0u64..1000,
        logits in prop::collection::vec(-3.0f64..3.0, 64),
        state in 0usize..4,
    ) {
        let game = MarkovGame::random(&mut rng_from_seed(game_seed), 4, vec![2, 3, 2], 0.9);
        let policy = joint(&game, &logits);
        let total: f64 = (0..game.n_joint_actions())
            .map(|ja| policy.joint_action_prob(state, &game.joint_components(ja)).unwrap())
            .sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_slot_changes_satisfy_the_bound(
        game_seed in 0u64..1000,
        discount in 0.0f64..0.97,
        logits in prop::collection::vec(-3.0f64..3.0, 30),
        noise in prop::collection::vec(-1.0f64..1.0, 15),
        scale in -3.0f64..0.5,
        agent in 0usize..2,
    ) {
        let game = MarkovGame::random(&mut rng_from_seed(game_seed), 5, vec![3, 3], discount);
        let old = joint(&game, &logits);
        let mut slot = old.agent(agent).clone();
        for (z, e) in slot.logits_mut().iter_mut().zip(&noise) {
            *z += 10f64.powf(scale) * e;
        }
        let new = old.with_slot(agent, slot).unwrap();
        let report = microstep_bound(&game, &old, &new, agent).unwrap();
        prop_assert!(report.slack >= -1e-8, "slack {}", report.slack);
    }

    #[test]
    fn clipping_never_raises_the_objective(ratio in 0.0f64..5.0, advantage in -5.0f64..5.0, eps in 0.01f64..0.99) {
        prop_assert!(clipped_term(ratio, advantage, eps) <= ratio * advantage + 1e-15);
    }

    #[test]
    fn advantages_are_standardized(rewards in prop::collection::vec(-100.0f64..100.0, 2..20)) {
        let adv = normalized_advantage(&rewards).unwrap();
        let n = rewards.len() as f64;
        let mean = adv.advantages.iter().sum::<f64>() / n;
        prop_assert!(mean.abs() < 1e-10);
        if !adv.degenerate {
            let var = adv.advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
            prop_assert!((var.sqrt() - 1.0).abs() < 1e-10);
        }
    }
}
