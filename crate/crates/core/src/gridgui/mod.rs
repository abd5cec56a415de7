//! Two-agent grid "GUI": a planner (Navigator) sees the goal and the whole
//! screen and emits a discrete instruction; an executor (Interactor) sees
//! only the instruction and a 3x3 window around the cursor and emits an
//! atomic action.

mod env;
mod export;
mod task;

pub use env::{
    interactor_state, navigator_state, reward_components, CellView, GridGuiEnv,
    InteractorObservation, NavigatorObservation, RewardComponents, StepResult,
    N_INTERACTOR_STATES, N_NAVIGATOR_STATES,
};
pub use export::{export_game, scripted_execution, scripted_instruction, scripted_policies, ExportedGame, MAX_EXPORT_CELLS};
pub use task::{fixture_suite, Element, ElementKind, GoldStep, GridGuiTask, Pos, TaskFile};

use serde::{Deserialize, Serialize};

/// Element ids range over `0..MAX_ELEMENTS`.
pub const MAX_ELEMENTS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dir {
    North,
    East,
    South,
    West,
}

impl Dir {
    pub const ALL: [Dir; 4] = [Dir::North, Dir::East, Dir::South, Dir::West];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn delta(self) -> (i64, i64) {
        match self {
            Dir::North => (0, -1),
            Dir::East => (1, 0),
            Dir::South => (0, 1),
            Dir::West => (-1, 0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verb {
    MoveTo,
    Click,
    Type,
    Done,
}

impl Verb {
    pub const ALL: [Verb; 4] = [Verb::MoveTo, Verb::Click, Verb::Type, Verb::Done];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arg {
    None,
    Dir(Dir),
    Element(usize),
}

impl Arg {
    const COUNT: usize = 1 + 4 + MAX_ELEMENTS;

    fn index(self) -> usize {
        match self {
            Arg::None => 0,
            Arg::Dir(d) => 1 + d.index(),
            Arg::Element(e) => 5 + e,
        }
    }

    fn from_index(i: usize) -> Arg {
        match i {
            0 => Arg::None,
            1..=4 => Arg::Dir(Dir::ALL[i - 1]),
            _ => Arg::Element(i - 5),
        }
    }
}

/// A low-level instruction from the Navigator. The vocabulary is every
/// (verb, argument) pair, including schema-invalid ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InstructionToken {
    pub verb: Verb,
    pub arg: Arg,
}

impl InstructionToken {
    pub const VOCAB_SIZE: usize = 4 * Arg::COUNT;

    pub fn new(verb: Verb, arg: Arg) -> Self {
        Self { verb, arg }
    }

    pub fn done() -> Self {
        Self::new(Verb::Done, Arg::None)
    }

    pub fn index(self) -> usize {
        (self.verb as usize) * Arg::COUNT + self.arg.index()
    }

    pub fn from_index(i: usize) -> Option<Self> {
        if i >= Self::VOCAB_SIZE {
            return None;
        }
        Some(Self {
            verb: Verb::ALL[i / Arg::COUNT],
            arg: Arg::from_index(i % Arg::COUNT),
        })
    }

    /// Verb/argument compatibility: MOVE_TO takes a direction or an element,
    /// CLICK and TYPE take an element, DONE takes nothing.
    pub fn is_valid(self) -> bool {
        match (self.verb, self.arg) {
            (Verb::MoveTo, Arg::Dir(_)) | (Verb::MoveTo, Arg::Element(_)) => true,
            (Verb::Click, Arg::Element(_)) | (Verb::Type, Arg::Element(_)) => true,
            (Verb::Done, Arg::None) => true,
            _ => false,
        }
    }
}

/// An executor action. Clicking or typing on a blank cell is legal and has
/// no effect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AtomicAction {
    Move(Dir),
    Click,
    TypeText,
    Noop,
    Finish,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ActionKind {
    Move,
    Click,
    TypeText,
    Noop,
    Finish,
}

impl AtomicAction {
    pub const COUNT: usize = 8;

    pub fn index(self) -> usize {
        match self {
            AtomicAction::Move(d) => d.index(),
            AtomicAction::Click => 4,
            AtomicAction::TypeText => 5,
            AtomicAction::Noop => 6,
            AtomicAction::Finish => 7,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Some(match i {
            0..=3 => AtomicAction::Move(Dir::ALL[i]),
            4 => AtomicAction::Click,
            5 => AtomicAction::TypeText,
            6 => AtomicAction::Noop,
            7 => AtomicAction::Finish,
            _ => return None,
        })
    }

    pub fn kind(self) -> ActionKind {
        match self {
            AtomicAction::Move(_) => ActionKind::Move,
            AtomicAction::Click => ActionKind::Click,
            AtomicAction::TypeText => ActionKind::TypeText,
            AtomicAction::Noop => ActionKind::Noop,
            AtomicAction::Finish => ActionKind::Finish,
        }
    }
}
