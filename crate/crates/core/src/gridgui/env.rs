use serde::{Deserialize, Serialize};

use super::task::{ElementKind, GoldStep, GridGuiTask, Pos};
use super::{ActionKind, AtomicAction, Element, InstructionToken, MAX_ELEMENTS};
use crate::error::{Error, Result};
use crate::grpo::{composite_reward, RewardWeights};

/// Navigator view: the goal and the full screen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NavigatorObservation {
    pub goal: Vec<usize>,
    /// Goal elements already handled, in order.
    pub completed: usize,
    pub cursor: Pos,
    pub width: usize,
    pub height: usize,
    pub elements: Vec<Element>,
    /// Every action taken so far; no past frames are kept.
    pub history: Vec<AtomicAction>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellView {
    OutOfBounds,
    Blank,
    Button(usize),
    Field(usize),
}

/// Interactor view: the instruction and a 3x3 window (rows top to bottom)
/// centered on the cursor. It carries no goal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InteractorObservation {
    pub instruction: InstructionToken,
    pub local: [[CellView; 3]; 3],
    pub cursor: Pos,
}

/// Tabular navigator states: one "goal complete" state, plus
/// (target id, target kind, sign dx, sign dy) toward the next goal element.
pub const N_NAVIGATOR_STATES: usize = 1 + MAX_ELEMENTS * 2 * 9;
/// Tabular interactor states: (instruction token, kind of the cell under the cursor).
pub const N_INTERACTOR_STATES: usize = InstructionToken::VOCAB_SIZE * 3;

fn sign_index(from: usize, to: usize) -> usize {
    match to.cmp(&from) {
        std::cmp::Ordering::Less => 0,
        std::cmp::Ordering::Equal => 1,
        std::cmp::Ordering::Greater => 2,
    }
}

pub fn navigator_state(obs: &NavigatorObservation) -> Result<usize> {
    let Some(&target) = obs.goal.get(obs.completed) else {
        return Ok(0);
    };
    let element = obs
        .elements
        .iter()
        .find(|e| e.id == target)
        .ok_or_else(|| Error::Domain(format!("goal element {target} not in the element map")))?;
    let kind = match element.kind {
        ElementKind::Button => 0,
        ElementKind::Field => 1,
    };
    let sx = sign_index(obs.cursor.x, element.pos.x);
    let sy = sign_index(obs.cursor.y, element.pos.y);
    Ok(1 + (target * 2 + kind) * 9 + sx * 3 + sy)
}

pub fn interactor_state(obs: &InteractorObservation) -> usize {
    let center = match obs.local[1][1] {
        CellView::Button(_) => 1,
        CellView::Field(_) => 2,
        CellView::Blank | CellView::OutOfBounds => 0,
    };
    obs.instruction.index() * 3 + center
}

/// Binary reward components of one (instruction, action) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardComponents {
    pub form: f64,
    pub act: f64,
    pub info: f64,
}

impl RewardComponents {
    pub fn combined(&self, weights: &RewardWeights) -> f64 {
        composite_reward(self.form, self.act, self.info, weights)
            .expect("components are binary and weights validated")
    }
}

/// Scores an emitted pair against the planner's step.
///
/// * form: the instruction is schema-valid;
/// * act: the action kind equals the gold kind;
/// * info: the action's effect matches: a move gets closer (Manhattan) to
///   the gold target, a click/type lands on the gold target cell, finish
///   matches finish.
pub fn reward_components(gold: &GoldStep, instruction: InstructionToken, action: AtomicAction) -> RewardComponents {
    let form = if instruction.is_valid() { 1.0 } else { 0.0 };
    let kind_match = action.kind() == gold.action.kind();
    let act = if kind_match { 1.0 } else { 0.0 };
    let info = if !kind_match {
        0.0
    } else {
        match (action, gold.target_pos) {
            (AtomicAction::Move(d), Some(target)) => {
                // Moving off the grid leaves the cursor in place.
                let next = gold.cursor.step(d, usize::MAX, usize::MAX);
                match next {
                    Some(n) if n.manhattan(target) < gold.cursor.manhattan(target) => 1.0,
                    _ => 0.0,
                }
            }
            (AtomicAction::Click | AtomicAction::TypeText, Some(target)) => {
                if gold.cursor == target {
                    1.0
                } else {
                    0.0
                }
            }
            (AtomicAction::Finish, None) => 1.0,
            _ => 0.0,
        }
    };
    RewardComponents { form, act, info }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub components: RewardComponents,
    pub gold: GoldStep,
    pub navigator: NavigatorObservation,
    pub done: bool,
    /// All goal elements handled and the episode closed with finish.
    pub success: bool,
}

/// One episode on a task. Steps after `done` are a contract error.
#[derive(Debug, Clone)]
pub struct GridGuiEnv<'a> {
    task: &'a GridGuiTask,
    cursor: Pos,
    completed: usize,
    steps: usize,
    done: bool,
    history: Vec<AtomicAction>,
    seed: u64,
}

impl<'a> GridGuiEnv<'a> {
    /// Starts an episode. The start state is fixed by the task; `seed` is
    /// recorded for bookkeeping only.
    pub fn reset(task: &'a GridGuiTask, seed: u64) -> (Self, NavigatorObservation) {
        let env = Self {
            task,
            cursor: task.start(),
            completed: 0,
            steps: 0,
            done: false,
            history: Vec::new(),
            seed,
        };
        let obs = env.navigator_observation();
        (env, obs)
    }

    /// Restores the state reached by replaying the first `k` gold actions.
    pub fn at_gold_step(task: &'a GridGuiTask, k: usize) -> Result<Self> {
        let (mut env, _) = Self::reset(task, 0);
        for g in task.gold_trace().iter().take(k) {
            env.apply(g.action);
            env.steps += 1;
        }
        if env.done {
            return Err(Error::Domain(format!("gold step {k} is past the end of the trace")));
        }
        Ok(env)
    }

    /// An episode positioned at an arbitrary grid state with empty history.
    pub fn at_state(task: &'a GridGuiTask, cursor: Pos, completed: usize) -> Result<Self> {
        if cursor.x >= task.width() || cursor.y >= task.height() || completed > task.goal().len() {
            return Err(Error::Domain(format!("state ({cursor:?}, {completed}) is outside the task")));
        }
        let (mut env, _) = Self::reset(task, 0);
        env.cursor = cursor;
        env.completed = completed;
        Ok(env)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn task(&self) -> &GridGuiTask {
        self.task
    }

    pub fn cursor(&self) -> Pos {
        self.cursor
    }

    pub fn completed(&self) -> usize {
        self.completed
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// The goal is complete and only finish remains.
    pub fn terminal_eligible(&self) -> bool {
        self.completed == self.task.goal().len()
    }

    pub fn gold(&self) -> GoldStep {
        self.task.gold_at(self.cursor, self.completed)
    }

    pub fn navigator_observation(&self) -> NavigatorObservation {
        NavigatorObservation {
            goal: self.task.goal().to_vec(),
            completed: self.completed,
            cursor: self.cursor,
            width: self.task.width(),
            height: self.task.height(),
            elements: self.task.elements().to_vec(),
            history: self.history.clone(),
        }
    }

    pub fn interactor_observation(&self, instruction: InstructionToken) -> InteractorObservation {
        let mut local = [[CellView::OutOfBounds; 3]; 3];
        for (dy, row) in local.iter_mut().enumerate() {
            for (dx, cell) in row.iter_mut().enumerate() {
                let x = self.cursor.x as i64 + dx as i64 - 1;
                let y = self.cursor.y as i64 + dy as i64 - 1;
                if x < 0 || y < 0 || x as usize >= self.task.width() || y as usize >= self.task.height() {
                    continue;
                }
                *cell = match self.task.element_at(Pos::new(x as usize, y as usize)) {
                    None => CellView::Blank,
                    Some(e) => match e.kind {
                        ElementKind::Button => CellView::Button(e.id),
                        ElementKind::Field => CellView::Field(e.id),
                    },
                };
            }
        }
        InteractorObservation {
            instruction,
            local,
            cursor: self.cursor,
        }
    }

    fn apply(&mut self, action: AtomicAction) {
        match action {
            AtomicAction::Move(d) => {
                if let Some(n) = self.cursor.step(d, self.task.width(), self.task.height()) {
                    self.cursor = n;
                }
            }
            AtomicAction::Click | AtomicAction::TypeText => {
                let wanted = match action.kind() {
                    ActionKind::Click => ElementKind::Button,
                    _ => ElementKind::Field,
                };
                if let (Some(e), Some(&next)) = (self.task.element_at(self.cursor), self.task.goal().get(self.completed)) {
                    if e.id == next && e.kind == wanted {
                        self.completed += 1;
                    }
                }
            }
            AtomicAction::Noop => {}
            AtomicAction::Finish => self.done = true,
        }
        self.history.push(action);
    }

    pub fn step(&mut self, instruction: InstructionToken, action: AtomicAction) -> Result<StepResult> {
        if self.done {
            return Err(Error::Contract("step called after the episode finished".into()));
        }
        let gold = self.gold();
        let components = reward_components(&gold, instruction, action);
        let was_complete = self.terminal_eligible();
        self.apply(action);
        self.steps += 1;
        let success = self.done && was_complete;
        if self.steps >= self.task.horizon() {
            self.done = true;
        }
        Ok(StepResult {
            components,
            gold,
            navigator: self.navigator_observation(),
            done: self.done,
            success,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::{Arg, Dir, Verb};
    use super::*;

    fn click(e: usize) -> InstructionToken {
        InstructionToken::new(Verb::Click, Arg::Element(e))
    }

    #[test]
    fn reset_is_deterministic() {
        let t = GridGuiTask::press_b_then_f();
        let (_, a) = GridGuiEnv::reset(&t, 5);
        let (_, b) = GridGuiEnv::reset(&t, 5);
        assert_eq!(a, b);
        let ids: Vec<usize> = a.elements.iter().map(|e| e.id).collect();
        assert!(ids.contains(&1) && ids.contains(&3));
        assert!(a.history.is_empty());
    }

    #[test]
    fn one_cell_done_task() {
        let t = GridGuiTask::new(1, 1, Pos::new(0, 0), vec![], vec![], 1).unwrap();
        let (mut env, _) = GridGuiEnv::reset(&t, 0);
        assert!(env.terminal_eligible());
        let r = env.step(InstructionToken::done(), AtomicAction::Finish).unwrap();
        assert!(r.done && r.success);
        assert_eq!(r.components, RewardComponents { form: 1.0, act: 1.0, info: 1.0 });
        assert!(matches!(env.step(InstructionToken::done(), AtomicAction::Finish), Err(Error::Contract(_))));
    }

    #[test]
    fn click_on_b() {
        let t = GridGuiTask::press_b_then_f();
        let mut env = GridGuiEnv::at_gold_step(&t, 1).unwrap();
        assert_eq!(env.cursor(), Pos::new(1, 0));
        let r = env.step(click(1), AtomicAction::Click).unwrap();
        assert_eq!((r.components.act, r.components.info), (1.0, 1.0));
        assert_eq!(env.completed(), 1);
    }

    #[test]
    fn click_instruction_with_move_scores_no_act() {
        let t = GridGuiTask::press_b_then_f();
        let mut env = GridGuiEnv::at_gold_step(&t, 1).unwrap();
        let r = env.step(click(1), AtomicAction::Move(Dir::North)).unwrap();
        assert_eq!(r.components.act, 0.0);
        assert_eq!(r.components.info, 0.0);
    }

    #[test]
    fn move_info_follows_manhattan_distance() {
        let t = GridGuiTask::press_b_then_f();
        // after clicking B the cursor is at (1,0) and F sits at (3,2)
        let env = GridGuiEnv::at_gold_step(&t, 2).unwrap();
        let gold = env.gold();
        let target = gold.target_pos.unwrap();
        let tok = InstructionToken::new(Verb::MoveTo, Arg::Element(3));
        for d in Dir::ALL {
            let c = reward_components(&gold, tok, AtomicAction::Move(d));
            assert_eq!(c.act, 1.0);
            let closer = env
                .cursor()
                .step(d, t.width(), t.height())
                .is_some_and(|n| n.manhattan(target) < env.cursor().manhattan(target));
            assert_eq!(c.info, if closer { 1.0 } else { 0.0 }, "{d:?}");
        }
    }

    #[test]
    fn schema_invalid_instruction_loses_form() {
        let t = GridGuiTask::press_b_then_f();
        let env = GridGuiEnv::at_gold_step(&t, 7).unwrap();
        let c = reward_components(&env.gold(), InstructionToken::new(Verb::Done, Arg::Element(1)), AtomicAction::Finish);
        assert_eq!(c.form, 0.0);
    }

    #[test]
    fn wrong_argument_scores_028() {
        let t = GridGuiTask::press_b_then_f();
        // cursor at (0,0), gold moves east toward B; moving west is the
        // right kind with the wrong argument
        let env = GridGuiEnv::at_gold_step(&t, 0).unwrap();
        let tok = InstructionToken::new(Verb::MoveTo, Arg::Dir(Dir::West));
        let c = reward_components(&env.gold(), tok, AtomicAction::Move(Dir::West));
        assert_eq!(c, RewardComponents { form: 1.0, act: 1.0, info: 0.0 });
        assert!((c.combined(&RewardWeights::default()) - 0.28).abs() < 1e-12);
    }

    #[test]
    fn gold_trace_earns_full_reward_on_every_fixture() {
        let w = RewardWeights::default();
        for t in super::super::fixture_suite(20).iter().chain([&GridGuiTask::press_b_then_f()]) {
            let (mut env, _) = GridGuiEnv::reset(t, 0);
            for g in t.gold_trace() {
                let r = env.step(g.instruction, g.action).unwrap();
                assert_eq!(r.components.combined(&w), 1.0);
            }
            assert!(env.is_done());
            assert!(env.terminal_eligible());
        }
    }

    #[test]
    fn interactor_observation_hides_goal() {
        let t = GridGuiTask::press_b_then_f();
        let (env, _) = GridGuiEnv::reset(&t, 0);
        let obs = env.interactor_observation(click(1));
        let value = serde_json::to_value(&obs).unwrap();
        let keys: Vec<&String> = value.as_object().unwrap().keys().collect();
        assert_eq!(keys.len(), 3);
        assert!(!value.as_object().unwrap().contains_key("goal"));
        assert_eq!(obs.local[0], [CellView::OutOfBounds; 3]);
        assert_eq!(obs.local[1][2], CellView::Button(1));
    }

    #[test]
    fn horizon_ends_episode() {
        let t = GridGuiTask::press_b_then_f();
        let (mut env, _) = GridGuiEnv::reset(&t, 0);
        for _ in 0..12 {
            env.step(InstructionToken::done(), AtomicAction::Noop).unwrap();
        }
        assert!(env.is_done());
        assert!(env.step(InstructionToken::done(), AtomicAction::Noop).is_err());
    }

    #[test]
    fn featurizers_in_range() {
        for t in super::super::fixture_suite(20) {
            for k in 0..t.gold_trace().len() {
                let env = GridGuiEnv::at_gold_step(&t, k).unwrap();
                let s = navigator_state(&env.navigator_observation()).unwrap();
                assert!(s < N_NAVIGATOR_STATES);
                for tok in 0..InstructionToken::VOCAB_SIZE {
                    let obs = env.interactor_observation(InstructionToken::from_index(tok).unwrap());
                    assert!(interactor_state(&obs) < N_INTERACTOR_STATES);
                }
            }
        }
    }
}
