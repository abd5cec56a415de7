use std::collections::VecDeque;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Arg, AtomicAction, Dir, InstructionToken, Verb, MAX_ELEMENTS};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pos {
    pub x: usize,
    pub y: usize,
}

impl Pos {
    pub fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }

    pub fn manhattan(self, other: Pos) -> usize {
        self.x.abs_diff(other.x) + self.y.abs_diff(other.y)
    }

    /// Neighbor in direction `dir`, if it lies on a `width x height` grid.
    pub fn step(self, dir: Dir, width: usize, height: usize) -> Option<Pos> {
        let (dx, dy) = dir.delta();
        let x = self.x as i64 + dx;
        let y = self.y as i64 + dy;
        (x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height)
            .then(|| Pos::new(x as usize, y as usize))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementKind {
    Button,
    Field,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Element {
    pub id: usize,
    pub label: char,
    pub kind: ElementKind,
    pub pos: Pos,
}

/// Supervision for one state: what the scripted planner would say and do.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldStep {
    pub instruction: InstructionToken,
    pub action: AtomicAction,
    pub cursor: Pos,
    /// Element the step works toward; `None` once the goal is complete.
    pub target: Option<usize>,
    pub target_pos: Option<Pos>,
}

/// On-disk task description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskFile {
    pub width: usize,
    pub height: usize,
    pub start: Pos,
    pub elements: Vec<Element>,
    pub goal: Vec<usize>,
    pub horizon: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<Vec<GoldStep>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridGuiTask {
    width: usize,
    height: usize,
    start: Pos,
    elements: Vec<Element>,
    goal: Vec<usize>,
    horizon: usize,
    gold: Vec<GoldStep>,
}

impl GridGuiTask {
    pub fn new(
        width: usize,
        height: usize,
        start: Pos,
        elements: Vec<Element>,
        goal: Vec<usize>,
        horizon: usize,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Invalid("grid must be at least 1x1".into()));
        }
        if start.x >= width || start.y >= height {
            return Err(Error::Invalid(format!("start {start:?} is off the grid")));
        }
        if horizon == 0 {
            return Err(Error::Invalid("horizon must be at least 1".into()));
        }
        for (i, e) in elements.iter().enumerate() {
            if e.id >= MAX_ELEMENTS {
                return Err(Error::Invalid(format!("element id {} exceeds {}", e.id, MAX_ELEMENTS - 1)));
            }
            if e.pos.x >= width || e.pos.y >= height {
                return Err(Error::Invalid(format!("element {} is off the grid", e.label)));
            }
            for other in &elements[..i] {
                if other.id == e.id {
                    return Err(Error::Invalid(format!("duplicate element id {}", e.id)));
                }
                if other.pos == e.pos {
                    return Err(Error::Invalid(format!(
                        "elements {} and {} share a cell",
                        other.label, e.label
                    )));
                }
            }
        }
        for g in &goal {
            if !elements.iter().any(|e| e.id == *g) {
                return Err(Error::Invalid(format!("goal element {g} is not on the grid")));
            }
        }
        let mut task = Self {
            width,
            height,
            start,
            elements,
            goal,
            horizon,
            gold: Vec::new(),
        };
        task.gold = task.plan_trace()?;
        Ok(task)
    }

    pub fn from_file(file: TaskFile) -> Result<Self> {
        let task = Self::new(file.width, file.height, file.start, file.elements, file.goal, file.horizon)?;
        if let Some(provided) = file.gold {
            if provided != task.gold {
                let at = provided
                    .iter()
                    .zip(&task.gold)
                    .position(|(a, b)| a != b)
                    .unwrap_or(provided.len().min(task.gold.len()));
                return Err(Error::Invalid(format!(
                    "provided gold trace disagrees with the planner at step {at}"
                )));
            }
        }
        Ok(task)
    }

    pub fn to_file(&self, with_gold: bool) -> TaskFile {
        TaskFile {
            width: self.width,
            height: self.height,
            start: self.start,
            elements: self.elements.clone(),
            goal: self.goal.clone(),
            horizon: self.horizon,
            gold: with_gold.then(|| self.gold.clone()),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_file(serde_json::from_str(&text)?)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn start(&self) -> Pos {
        self.start
    }

    pub fn elements(&self) -> &[Element] {
        &self.elements
    }

    pub fn goal(&self) -> &[usize] {
        &self.goal
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn gold_trace(&self) -> &[GoldStep] {
        &self.gold
    }

    pub fn element(&self, id: usize) -> Option<&Element> {
        self.elements.iter().find(|e| e.id == id)
    }

    pub fn element_at(&self, pos: Pos) -> Option<&Element> {
        self.elements.iter().find(|e| e.pos == pos)
    }

    /// Scripted planner: breadth-first distances from the next goal element,
    /// first direction (in N, E, S, W order) that gets strictly closer.
    pub fn gold_at(&self, cursor: Pos, completed: usize) -> GoldStep {
        let Some(&target) = self.goal.get(completed) else {
            return GoldStep {
                instruction: InstructionToken::done(),
                action: AtomicAction::Finish,
                cursor,
                target: None,
                target_pos: None,
            };
        };
        let element = self.element(target).expect("goal validated at construction");
        let (instruction, action) = if element.pos == cursor {
            match element.kind {
                ElementKind::Button => (InstructionToken::new(Verb::Click, Arg::Element(target)), AtomicAction::Click),
                ElementKind::Field => (InstructionToken::new(Verb::Type, Arg::Element(target)), AtomicAction::TypeText),
            }
        } else {
            let dist = self.distances_from(element.pos);
            let here = dist[self.cell(cursor)];
            let dir = Dir::ALL
                .into_iter()
                .find(|d| {
                    cursor
                        .step(*d, self.width, self.height)
                        .is_some_and(|n| dist[self.cell(n)] < here)
                })
                .expect("open grid: some neighbor is closer");
            (InstructionToken::new(Verb::MoveTo, Arg::Dir(dir)), AtomicAction::Move(dir))
        };
        GoldStep {
            instruction,
            action,
            cursor,
            target: Some(target),
            target_pos: Some(element.pos),
        }
    }

    fn cell(&self, p: Pos) -> usize {
        p.y * self.width + p.x
    }

    fn distances_from(&self, source: Pos) -> Vec<usize> {
        let mut dist = vec![usize::MAX; self.width * self.height];
        let mut queue = VecDeque::from([source]);
        dist[self.cell(source)] = 0;
        while let Some(p) = queue.pop_front() {
            let d = dist[self.cell(p)];
            for dir in Dir::ALL {
                if let Some(n) = p.step(dir, self.width, self.height) {
                    if dist[self.cell(n)] == usize::MAX {
                        dist[self.cell(n)] = d + 1;
                        queue.push_back(n);
                    }
                }
            }
        }
        dist
    }

    fn plan_trace(&self) -> Result<Vec<GoldStep>> {
        let mut cursor = self.start;
        let mut completed = 0;
        let mut trace = Vec::new();
        loop {
            let step = self.gold_at(cursor, completed);
            let action = step.action;
            trace.push(step);
            match action {
                AtomicAction::Finish => break,
                AtomicAction::Move(d) => {
                    cursor = cursor.step(d, self.width, self.height).expect("planner stays on grid")
                }
                AtomicAction::Click | AtomicAction::TypeText => completed += 1,
                AtomicAction::Noop => {}
            }
            if trace.len() > self.horizon {
                break;
            }
        }
        if trace.len() > self.horizon {
            return Err(Error::Invalid(format!(
                "gold trace needs more than the horizon of {} steps",
                self.horizon
            )));
        }
        Ok(trace)
    }

    /// 4x4 grid, button B at (1,0), field F at (3,2); press B then fill F.
    pub fn press_b_then_f() -> Self {
        Self::new(
            4,
            4,
            Pos::new(0, 0),
            vec![
                Element {
                    id: 1,
                    label: 'B',
                    kind: ElementKind::Button,
                    pos: Pos::new(1, 0),
                },
                Element {
                    id: 3,
                    label: 'F',
                    kind: ElementKind::Field,
                    pos: Pos::new(3, 2),
                },
            ],
            vec![1, 3],
            12,
        )
        .expect("fixture task is valid")
    }

    /// Random task on a `width x height` grid with 2-3 elements and a goal
    /// of 1-3 of them; resampled until the gold trace fits the horizon.
    pub fn random(rng: &mut rng::SeedRng, width: usize, height: usize, horizon: usize) -> Self {
        loop {
            let n_elements = rng.gen_range(2..=3usize.min(width * height));
            let mut cells: Vec<Pos> = (0..height)
                .flat_map(|y| (0..width).map(move |x| Pos::new(x, y)))
                .collect();
            cells.shuffle(rng);
            let mut ids: Vec<usize> = (0..MAX_ELEMENTS).collect();
            ids.shuffle(rng);
            let elements: Vec<Element> = (0..n_elements)
                .map(|k| Element {
                    id: ids[k],
                    label: (b'A' + ids[k] as u8) as char,
                    kind: if rng.gen_bool(0.5) { ElementKind::Button } else { ElementKind::Field },
                    pos: cells[k],
                })
                .collect();
            let goal_len = rng.gen_range(1..=n_elements);
            let mut goal: Vec<usize> = elements.iter().map(|e| e.id).collect();
            goal.shuffle(rng);
            goal.truncate(goal_len);
            let start = Pos::new(rng.gen_range(0..width), rng.gen_range(0..height));
            if let Ok(task) = Self::new(width, height, start, elements, goal, horizon) {
                return task;
            }
        }
    }
}

/// Seed of the standard fixture suite.
pub const FIXTURE_SEED: u64 = 20_240_917;

/// `n` seeded tasks on 4x4 grids with horizon 12. The standard suite is
/// `fixture_suite(20)`.
pub fn fixture_suite(n: usize) -> Vec<GridGuiTask> {
    let mut rng = rng::rng_from_seed(FIXTURE_SEED);
    (0..n).map(|_| GridGuiTask::random(&mut rng, 4, 4, 12)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn press_b_then_f_trace() {
        let t = GridGuiTask::press_b_then_f();
        let actions: Vec<AtomicAction> = t.gold_trace().iter().map(|g| g.action).collect();
        assert_eq!(
            actions,
            vec![
                AtomicAction::Move(Dir::East),
                AtomicAction::Click,
                AtomicAction::Move(Dir::East),
                AtomicAction::Move(Dir::East),
                AtomicAction::Move(Dir::South),
                AtomicAction::Move(Dir::South),
                AtomicAction::TypeText,
                AtomicAction::Finish,
            ]
        );
        assert_eq!(t.gold_trace()[1].instruction, InstructionToken::new(Verb::Click, Arg::Element(1)));
    }

    #[test]
    fn trivial_task_is_done_immediately() {
        let t = GridGuiTask::new(1, 1, Pos::new(0, 0), vec![], vec![], 1).unwrap();
        assert_eq!(t.gold_trace().len(), 1);
        assert_eq!(t.gold_trace()[0].instruction, InstructionToken::done());
    }

    #[test]
    fn fixture_suite_is_reproducible_and_valid() {
        let a = fixture_suite(20);
        assert_eq!(a, fixture_suite(20));
        for t in &a {
            assert_eq!((t.width(), t.height(), t.horizon()), (4, 4, 12));
            assert!(t.gold_trace().len() <= 12);
            assert!(!t.goal().is_empty());
        }
    }

    #[test]
    fn invalid_tasks_rejected() {
        let e = |id, x, y| Element {
            id,
            label: 'X',
            kind: ElementKind::Button,
            pos: Pos::new(x, y),
        };
        assert!(GridGuiTask::new(2, 2, Pos::new(0, 0), vec![e(0, 0, 0)], vec![1], 5).is_err());
        assert!(GridGuiTask::new(2, 2, Pos::new(0, 0), vec![e(0, 0, 0), e(1, 0, 0)], vec![0], 5).is_err());
        assert!(GridGuiTask::new(2, 2, Pos::new(0, 0), vec![e(0, 3, 0)], vec![0], 5).is_err());
        // B at distance 6 on a 4x4 grid cannot be done in 3 steps
        assert!(GridGuiTask::new(4, 4, Pos::new(0, 0), vec![e(0, 3, 3)], vec![0], 3).is_err());
    }

    #[test]
    fn file_roundtrip_and_gold_check() {
        let t = GridGuiTask::press_b_then_f();
        let file = t.to_file(true);
        let text = serde_json::to_string(&file).unwrap();
        let back = GridGuiTask::from_file(serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, t);
        let mut bad = t.to_file(true);
        bad.gold.as_mut().unwrap()[2].action = AtomicAction::Move(Dir::South);
        let err = GridGuiTask::from_file(bad).unwrap_err().to_string();
        assert!(err.contains("step 2"), "{err}");
    }
}
