//! The grid environment as a cooperative Markov game.
//!
//! Each environment step becomes two game steps: a planning state where only
//! the Navigator's action matters, then an execution state (grid state plus
//! pending instruction) where only the Interactor's action matters and the
//! combined reward is paid. Finish leads to a zero-reward absorbing state.
//! The step limit of the task is not part of the exported state.

use super::env::{interactor_state, navigator_state, reward_components, GridGuiEnv};
use super::task::{GridGuiTask, Pos};
use super::{Arg, AtomicAction, InstructionToken, Verb, N_INTERACTOR_STATES, N_NAVIGATOR_STATES};
use crate::error::{Error, Result};
use crate::game::MarkovGame;
use crate::grpo::RewardWeights;
use crate::policy::{JointPolicy, TabularPolicy};

/// Largest grid (in cells) the export accepts.
pub const MAX_EXPORT_CELLS: usize = 9;

pub struct ExportedGame {
    pub game: MarkovGame,
    /// Navigator feature state of every game state (planning states only).
    nav_features: Vec<Option<usize>>,
    /// Interactor feature state of every game state (execution states only).
    int_features: Vec<Option<usize>>,
}

impl ExportedGame {
    /// Expands feature-level policies into per-game-state policies. States
    /// where an agent's action is irrelevant get a uniform row.
    pub fn lift(&self, navigator: &TabularPolicy, interactor: &TabularPolicy) -> Result<JointPolicy> {
        let lift_one = |agent: usize, source: &TabularPolicy, features: &[Option<usize>]| {
            let n_a = source.n_actions();
            let mut logits = vec![0.0; features.len() * n_a];
            for (s, f) in features.iter().enumerate() {
                if let Some(f) = f {
                    logits[s * n_a..(s + 1) * n_a].copy_from_slice(source.logit_row(*f));
                }
            }
            TabularPolicy::from_logits(agent, features.len(), n_a, logits)
        };
        JointPolicy::new(vec![
            lift_one(0, navigator, &self.nav_features)?,
            lift_one(1, interactor, &self.int_features)?,
        ])
    }
}

pub fn export_game(task: &GridGuiTask, weights: &RewardWeights, discount: f64) -> Result<ExportedGame> {
    let cells = task.width() * task.height();
    if cells > MAX_EXPORT_CELLS {
        return Err(Error::Invalid(format!(
            "export supports grids of at most {MAX_EXPORT_CELLS} cells, task has {cells}"
        )));
    }
    let vocab = InstructionToken::VOCAB_SIZE;
    let n_actions = AtomicAction::COUNT;
    let phases = task.goal().len() + 1;
    let n_plan = phases * cells;
    let n_states = n_plan + n_plan * vocab + 1;
    let absorbing = n_states - 1;
    let n_joint = vocab * n_actions;
    let pos_of = |c: usize| Pos::new(c % task.width(), c / task.width());
    let plan_index = |p: Pos, k: usize| k * cells + p.y * task.width() + p.x;
    let exec_index = |plan: usize, tok: usize| n_plan + plan * vocab + tok;

    let mut transition = Vec::with_capacity(n_states * n_joint);
    let mut reward = Vec::with_capacity(n_states * n_joint);
    let mut nav_features = vec![None; n_states];
    let mut int_features = vec![None; n_states];

    for plan in 0..n_plan {
        let (k, c) = (plan / cells, plan % cells);
        let env = GridGuiEnv::at_state(task, pos_of(c), k)?;
        nav_features[plan] = Some(navigator_state(&env.navigator_observation())?);
        for ja in 0..n_joint {
            transition.push(vec![(exec_index(plan, ja / n_actions), 1.0)]);
            reward.push(0.0);
        }
    }
    for plan in 0..n_plan {
        let (k, c) = (plan / cells, plan % cells);
        for tok in 0..vocab {
            let token = InstructionToken::from_index(tok).expect("in vocabulary");
            let env = GridGuiEnv::at_state(task, pos_of(c), k)?;
            int_features[exec_index(plan, tok)] = Some(interactor_state(&env.interactor_observation(token)));
            let gold = env.gold();
            for ja in 0..n_joint {
                let action = AtomicAction::from_index(ja % n_actions).expect("in range");
                let r = reward_components(&gold, token, action).combined(weights);
                let mut next_env = env.clone();
                next_env.step(token, action)?;
                let next = if action == AtomicAction::Finish {
                    absorbing
                } else {
                    plan_index(next_env.cursor(), next_env.completed())
                };
                transition.push(vec![(next, 1.0)]);
                reward.push(r);
            }
        }
    }
    for _ in 0..n_joint {
        transition.push(vec![(absorbing, 1.0)]);
        reward.push(0.0);
    }
    let mut initial = vec![0.0; n_states];
    initial[plan_index(task.start(), 0)] = 1.0;
    let game = MarkovGame::from_sparse(
        n_states,
        vec![vocab, n_actions],
        transition,
        reward,
        initial,
        discount,
    )?;
    Ok(ExportedGame {
        game,
        nav_features,
        int_features,
    })
}

/// Feature-level scripted policies: the navigator follows the planner, the
/// interactor executes the instruction literally. `strength` is the logit
/// margin of the scripted choice over every alternative.
pub fn scripted_policies(strength: f64) -> (TabularPolicy, TabularPolicy) {
    let vocab = InstructionToken::VOCAB_SIZE;
    let mut nav = vec![0.0; N_NAVIGATOR_STATES * vocab];
    for s in 0..N_NAVIGATOR_STATES {
        nav[s * vocab + scripted_instruction(s).index()] = strength;
    }
    let n_a = AtomicAction::COUNT;
    let mut int = vec![0.0; N_INTERACTOR_STATES * n_a];
    for s in 0..N_INTERACTOR_STATES {
        let token = InstructionToken::from_index(s / 3).expect("in vocabulary");
        int[s * n_a + scripted_execution(token).index()] = strength;
    }
    (
        TabularPolicy::from_logits(0, N_NAVIGATOR_STATES, vocab, nav).expect("shape"),
        TabularPolicy::from_logits(1, N_INTERACTOR_STATES, n_a, int).expect("shape"),
    )
}

/// Planner decision for a navigator feature state.
pub fn scripted_instruction(state: usize) -> InstructionToken {
    use super::Dir;
    if state == 0 {
        return InstructionToken::done();
    }
    let f = state - 1;
    let (target, kind, sx, sy) = (f / 18, (f / 9) % 2, (f % 9) / 3, f % 3);
    let dir = if sy == 0 {
        Some(Dir::North)
    } else if sx == 2 {
        Some(Dir::East)
    } else if sy == 2 {
        Some(Dir::South)
    } else if sx == 0 {
        Some(Dir::West)
    } else {
        None
    };
    match (dir, kind) {
        (Some(d), _) => InstructionToken::new(Verb::MoveTo, Arg::Dir(d)),
        (None, 0) => InstructionToken::new(Verb::Click, Arg::Element(target)),
        (None, _) => InstructionToken::new(Verb::Type, Arg::Element(target)),
    }
}

/// Literal execution of an instruction.
pub fn scripted_execution(token: InstructionToken) -> AtomicAction {
    match (token.verb, token.arg) {
        (Verb::MoveTo, Arg::Dir(d)) => AtomicAction::Move(d),
        (Verb::Click, _) => AtomicAction::Click,
        (Verb::Type, _) => AtomicAction::TypeText,
        (Verb::Done, _) => AtomicAction::Finish,
        _ => AtomicAction::Noop,
    }
}
