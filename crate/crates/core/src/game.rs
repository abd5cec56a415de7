//! Finite cooperative Markov games and seeded episode sampling.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::JointPolicy;
use crate::rng::{self, SeedRng};

const ROW_TOL: f64 = 1e-12;
/// Cap on `|S| * sum_i |A^i|` (total tabular policy entries) for games
/// handled by the exact oracle.
pub const MAX_TABLE_ENTRIES: usize = 100_000;

/// On-disk game definition. Joint actions are enumerated in mixed radix with
/// agent 0 as the most significant digit, so for two agents with two actions
/// each the order is (0,0), (0,1), (1,0), (1,1).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameFile {
    pub n_agents: usize,
    pub states: usize,
    pub actions: Vec<usize>,
    /// `transition[s][joint_action][s']`
    pub transition: Vec<Vec<Vec<f64>>>,
    /// `reward[s][joint_action]`
    pub reward: Vec<Vec<f64>>,
    pub initial_dist: Vec<f64>,
    pub discount: f64,
}

/// Cooperative Markov game `<N, S, A, r, P, d>` with discount `gamma`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovGame {
    n_states: usize,
    actions: Vec<usize>,
    n_joint: usize,
    /// Sparse successor lists indexed by `s * n_joint + ja`.
    transition: Vec<Vec<(usize, f64)>>,
    /// Flattened `[s][ja]`.
    reward: Vec<f64>,
    initial_dist: Vec<f64>,
    discount: f64,
}

impl MarkovGame {
    /// Builds a game from a dense `[s][ja][s']` transition tensor.
    pub fn new(
        n_states: usize,
        actions: Vec<usize>,
        transition: Vec<f64>,
        reward: Vec<f64>,
        initial_dist: Vec<f64>,
        discount: f64,
    ) -> Result<Self> {
        if n_states == 0 || transition.len() % n_states != 0 {
            return Err(Error::Invalid("transition tensor has the wrong size".into()));
        }
        let rows = transition
            .chunks(n_states)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .filter(|(_, p)| **p != 0.0)
                    .map(|(t, p)| (t, *p))
                    .collect()
            })
            .collect();
        Self::from_sparse(n_states, actions, rows, reward, initial_dist, discount)
    }

    /// Builds a game from sparse successor lists, one per `(s, ja)` pair in
    /// `s * n_joint + ja` order.
    pub fn from_sparse(
        n_states: usize,
        actions: Vec<usize>,
        transition: Vec<Vec<(usize, f64)>>,
        reward: Vec<f64>,
        initial_dist: Vec<f64>,
        discount: f64,
    ) -> Result<Self> {
        if n_states == 0 {
            return Err(Error::Invalid("game has no states".into()));
        }
        if actions.is_empty() {
            return Err(Error::Invalid("game has no agents".into()));
        }
        if let Some(i) = actions.iter().position(|&a| a == 0) {
            return Err(Error::Invalid(format!("agent {i} has an empty action set")));
        }
        let n_joint: usize = actions.iter().product();
        let entries = n_states * actions.iter().sum::<usize>();
        if entries > MAX_TABLE_ENTRIES {
            return Err(Error::Invalid(format!(
                "{entries} policy-table entries exceed the cap of {MAX_TABLE_ENTRIES}"
            )));
        }
        if !(0.0..1.0).contains(&discount) {
            return Err(Error::Invalid(format!("discount {discount} not in [0, 1)")));
        }
        if transition.len() != n_states * n_joint {
            return Err(Error::Invalid("transition tensor has the wrong size".into()));
        }
        if reward.len() != n_states * n_joint {
            return Err(Error::Invalid("reward table has the wrong size".into()));
        }
        if initial_dist.len() != n_states {
            return Err(Error::Invalid("initial distribution has the wrong size".into()));
        }
        for s in 0..n_states {
            for ja in 0..n_joint {
                let row = &transition[s * n_joint + ja];
                if let Some((t, _)) = row.iter().find(|(t, _)| *t >= n_states) {
                    return Err(Error::Invalid(format!(
                        "transition row (state {s}, joint action {ja}): successor {t} out of range"
                    )));
                }
                let probs: Vec<f64> = row.iter().map(|(_, p)| *p).collect();
                check_distribution(&probs)
                    .map_err(|e| Error::Invalid(format!("transition row (state {s}, joint action {ja}): {e}")))?;
                let r = reward[s * n_joint + ja];
                if !r.is_finite() {
                    return Err(Error::Invalid(format!(
                        "reward (state {s}, joint action {ja}) is not finite"
                    )));
                }
            }
        }
        check_distribution(&initial_dist)
            .map_err(|e| Error::Invalid(format!("initial distribution: {e}")))?;
        Ok(Self {
            n_states,
            actions,
            n_joint,
            transition,
            reward,
            initial_dist,
            discount,
        })
    }

    pub fn from_file(file: GameFile) -> Result<Self> {
        if file.actions.len() != file.n_agents {
            return Err(Error::Invalid(format!(
                "n_agents is {} but {} action counts were given",
                file.n_agents,
                file.actions.len()
            )));
        }
        let n_joint: usize = file.actions.iter().product();
        if file.transition.len() != file.states {
            return Err(Error::Invalid(format!(
                "transition has {} state rows, expected {}",
                file.transition.len(),
                file.states
            )));
        }
        if file.reward.len() != file.states {
            return Err(Error::Invalid(format!(
                "reward has {} state rows, expected {}",
                file.reward.len(),
                file.states
            )));
        }
        let mut transition = Vec::with_capacity(file.states * n_joint * file.states);
        if file.states == 0 {
            return Err(Error::Invalid("game has no states".into()));
        }
        for (s, per_action) in file.transition.iter().enumerate() {
            if per_action.len() != n_joint {
                return Err(Error::Invalid(format!(
                    "transition row for state {s} has {} joint actions, expected {n_joint}",
                    per_action.len()
                )));
            }
            for (ja, row) in per_action.iter().enumerate() {
                if row.len() != file.states {
                    return Err(Error::Invalid(format!(
                        "transition row (state {s}, joint action {ja}) has {} entries, expected {}",
                        row.len(),
                        file.states
                    )));
                }
                transition.extend_from_slice(row);
            }
        }
        let mut reward = Vec::with_capacity(file.states * n_joint);
        for (s, row) in file.reward.iter().enumerate() {
            if row.len() != n_joint {
                return Err(Error::Invalid(format!(
                    "reward row for state {s} has {} entries, expected {n_joint}",
                    row.len()
                )));
            }
            reward.extend_from_slice(row);
        }
        Self::new(
            file.states,
            file.actions,
            transition,
            reward,
            file.initial_dist,
            file.discount,
        )
    }

    pub fn to_file(&self) -> GameFile {
        GameFile {
            n_agents: self.n_agents(),
            states: self.n_states,
            actions: self.actions.clone(),
            transition: (0..self.n_states)
                .map(|s| {
                    (0..self.n_joint)
                        .map(|ja| {
                            let mut row = vec![0.0; self.n_states];
                            for &(t, p) in self.successors(s, ja) {
                                row[t] += p;
                            }
                            row
                        })
                        .collect()
                })
                .collect(),
            reward: (0..self.n_states)
                .map(|s| (0..self.n_joint).map(|ja| self.reward(s, ja)).collect())
                .collect(),
            initial_dist: self.initial_dist.clone(),
            discount: self.discount,
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        Self::from_file(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    /// Two states, two agents with two actions, `gamma = 0.9`. Joint action
    /// (0,0) moves s0 to s1, everything else self-loops; reward 1 only for
    /// (s1, (1,1)); start in s0.
    pub fn chain2() -> Self {
        let n_joint = 4;
        let mut transition = vec![0.0; 2 * n_joint * 2];
        for ja in 0..n_joint {
            let next = if ja == 0 { 1 } else { 0 };
            transition[ja * 2 + next] = 1.0;
            transition[(n_joint + ja) * 2 + 1] = 1.0;
        }
        let mut reward = vec![0.0; 2 * n_joint];
        reward[n_joint + 3] = 1.0;
        Self::new(2, vec![2, 2], transition, reward, vec![1.0, 0.0], 0.9)
            .expect("chain2 fixture is valid")
    }

    /// Random dense game for property tests: uniform-then-normalized
    /// transition rows, rewards in [-1, 1], random initial distribution.
    pub fn random(rng: &mut SeedRng, n_states: usize, actions: Vec<usize>, discount: f64) -> Self {
        let n_joint: usize = actions.iter().product();
        let mut transition = Vec::with_capacity(n_states * n_joint);
        for _ in 0..n_states * n_joint {
            let row: Vec<f64> = (0..n_states).map(|_| rng.gen_range(0.01..1.0)).collect();
            let sum: f64 = row.iter().sum();
            transition.push(row.iter().enumerate().map(|(t, x)| (t, x / sum)).collect());
        }
        let reward = (0..n_states * n_joint).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let d: Vec<f64> = (0..n_states).map(|_| rng.gen_range(0.01..1.0)).collect();
        let sum: f64 = d.iter().sum();
        let d = d.iter().map(|x| x / sum).collect();
        let mut game = Self {
            n_states,
            actions,
            n_joint,
            transition,
            reward,
            initial_dist: d,
            discount,
        };
        game.renormalize();
        game
    }

    /// Pushes accumulated round-off into the largest entry so rows sum to one
    /// within the validation tolerance.
    fn renormalize(&mut self) {
        for row in &mut self.transition {
            let mut probs: Vec<f64> = row.iter().map(|(_, p)| *p).collect();
            fix_row(&mut probs);
            for ((_, p), q) in row.iter_mut().zip(probs) {
                *p = q;
            }
        }
        fix_row(&mut self.initial_dist);
    }

    pub fn n_agents(&self) -> usize {
        self.actions.len()
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self, agent: usize) -> usize {
        self.actions[agent]
    }

    pub fn actions(&self) -> &[usize] {
        &self.actions
    }

    pub fn n_joint_actions(&self) -> usize {
        self.n_joint
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    pub fn reward(&self, state: usize, joint: usize) -> f64 {
        self.reward[state * self.n_joint + joint]
    }

    /// Nonzero entries of `P(. | state, joint)` as `(successor, probability)`.
    pub fn successors(&self, state: usize, joint: usize) -> &[(usize, f64)] {
        &self.transition[state * self.n_joint + joint]
    }

    /// Samples a successor of `(state, joint)` with decision seed `seed`.
    pub fn sample_next(&self, state: usize, joint: usize, seed: u64) -> usize {
        let row = self.successors(state, joint);
        let probs: Vec<f64> = row.iter().map(|(_, p)| *p).collect();
        row[rng::sample_index(&probs, seed)].0
    }

    /// Largest absolute reward.
    pub fn max_abs_reward(&self) -> f64 {
        self.reward.iter().fold(0.0, |m, r| m.max(r.abs()))
    }

    /// Mixed-radix index of a joint action (agent 0 most significant).
    pub fn joint_index(&self, joint_action: &[usize]) -> Result<usize> {
        if joint_action.len() != self.actions.len() {
            return Err(Error::Domain(format!(
                "joint action has {} components for {} agents",
                joint_action.len(),
                self.actions.len()
            )));
        }
        let mut idx = 0;
        for (i, (&a, &n)) in joint_action.iter().zip(&self.actions).enumerate() {
            if a >= n {
                return Err(Error::Domain(format!("action {a} out of range for agent {i}")));
            }
            idx = idx * n + a;
        }
        Ok(idx)
    }

    pub fn joint_components(&self, mut joint: usize) -> Vec<usize> {
        let mut out = vec![0; self.actions.len()];
        for (slot, &n) in out.iter_mut().zip(&self.actions).rev() {
            *slot = joint % n;
            joint /= n;
        }
        out
    }

    pub fn check_policy(&self, policy: &JointPolicy) -> Result<()> {
        if policy.n_agents() != self.n_agents() {
            return Err(Error::Domain(format!(
                "policy has {} agents, game has {}",
                policy.n_agents(),
                self.n_agents()
            )));
        }
        for (i, p) in policy.per_agent.iter().enumerate() {
            if p.n_states() != self.n_states || p.n_actions() != self.actions[i] {
                return Err(Error::Domain(format!(
                    "policy of agent {i} has shape {}x{}, game needs {}x{}",
                    p.n_states(),
                    p.n_actions(),
                    self.n_states,
                    self.actions[i]
                )));
            }
        }
        Ok(())
    }
}

fn check_distribution(row: &[f64]) -> std::result::Result<(), String> {
    if let Some(x) = row.iter().find(|x| !x.is_finite() || **x < 0.0) {
        return Err(format!("entry {x} is negative or not finite"));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > ROW_TOL {
        return Err(format!("sums to {sum}"));
    }
    Ok(())
}

fn fix_row(row: &mut [f64]) {
    let sum: f64 = row.iter().sum();
    let (imax, _) = row
        .iter()
        .enumerate()
        .fold((0, f64::MIN), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
    row[imax] += 1.0 - sum;
}

/// One step of an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state: usize,
    pub joint_action: Vec<usize>,
    pub reward: f64,
    pub log_probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    pub seed: u64,
    pub horizon: usize,
}

impl Trajectory {
    pub fn discounted_return(&self, gamma: f64) -> f64 {
        let mut g = 1.0;
        let mut total = 0.0;
        for step in &self.steps {
            total += g * step.reward;
            g *= gamma;
        }
        total
    }
}

/// Per-episode random stream. Draw order per episode: one sub-seed for the
/// initial state, then per step one sub-seed per agent (in agent order)
/// followed by one for the transition.
pub struct EpisodeStream {
    rng: SeedRng,
}

impl EpisodeStream {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: rng::rng_from_seed(seed),
        }
    }

    pub fn next_seed(&mut self) -> u64 {
        rng::next_subseed(&mut self.rng)
    }
}

/// Samples one episode of exactly `horizon` steps. Identical seeds give
/// bit-identical trajectories.
pub fn sample_episode(
    game: &MarkovGame,
    policy: &JointPolicy,
    seed: u64,
    horizon: usize,
) -> Result<Trajectory> {
    game.check_policy(policy)?;
    if horizon == 0 {
        return Err(Error::Domain("horizon must be at least 1".into()));
    }
    let mut stream = EpisodeStream::new(seed);
    let mut state = rng::sample_index(game.initial_dist(), stream.next_seed());
    let mut steps = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let mut joint_action = Vec::with_capacity(game.n_agents());
        let mut log_probs = Vec::with_capacity(game.n_agents());
        for p in &policy.per_agent {
            let (a, lp) = p.sample(state, stream.next_seed())?;
            joint_action.push(a);
            log_probs.push(lp);
        }
        let ja = game.joint_index(&joint_action)?;
        let reward = game.reward(state, ja);
        let next = game.sample_next(state, ja, stream.next_seed());
        steps.push(Step {
            state,
            joint_action,
            reward,
            log_probs,
        });
        state = next;
    }
    Ok(Trajectory {
        steps,
        seed,
        horizon,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::TabularPolicy;

    fn uniform_joint(game: &MarkovGame) -> JointPolicy {
        JointPolicy::new(
            (0..game.n_agents())
                .map(|i| TabularPolicy::uniform(i, game.n_states(), game.n_actions(i)))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn chain2_shape() {
        let g = MarkovGame::chain2();
        assert_eq!(g.n_joint_actions(), 4);
        assert_eq!(g.successors(0, 0), &[(1, 1.0)]);
        assert_eq!(g.successors(0, 3), &[(0, 1.0)]);
        assert_eq!(g.successors(1, 2), &[(1, 1.0)]);
        assert_eq!(g.reward(1, g.joint_index(&[1, 1]).unwrap()), 1.0);
        assert_eq!(g.reward(0, 3), 0.0);
    }

    #[test]
    fn joint_index_roundtrip() {
        let g = MarkovGame::new(
            1,
            vec![2, 3, 2],
            vec![1.0; 12],
            vec![0.0; 12],
            vec![1.0],
            0.5,
        )
        .unwrap();
        for ja in 0..12 {
            assert_eq!(g.joint_index(&g.joint_components(ja)).unwrap(), ja);
        }
        assert_eq!(g.joint_index(&[1, 2, 1]).unwrap(), 11);
    }

    #[test]
    fn deterministic_game_unique_path() {
        // 3-state cycle with a single action per agent.
        let mut t = vec![0.0; 9];
        t[1] = 1.0;
        t[3 + 2] = 1.0;
        t[6] = 1.0;
        let g = MarkovGame::new(3, vec![1], t, vec![1.0, 2.0, 3.0], vec![1.0, 0.0, 0.0], 0.9).unwrap();
        let traj = sample_episode(&g, &uniform_joint(&g), 11, 3).unwrap();
        let states: Vec<usize> = traj.steps.iter().map(|s| s.state).collect();
        assert_eq!(states, vec![0, 1, 2]);
        assert!(traj.steps.iter().all(|s| s.log_probs == vec![0.0]));
        assert_eq!(traj.steps.iter().map(|s| s.reward).collect::<Vec<_>>(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn seeded_episodes_reproduce() {
        let g = MarkovGame::chain2();
        let p = uniform_joint(&g);
        let a = sample_episode(&g, &p, 42, 30).unwrap();
        let b = sample_episode(&g, &p, 42, 30).unwrap();
        assert_eq!(a, b);
        let c = sample_episode(&g, &p, 43, 30).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn logged_log_probs_match_policy() {
        let mut rng = rng::rng_from_seed(3);
        let g = MarkovGame::random(&mut rng, 4, vec![2, 3], 0.8);
        let p = JointPolicy::new(vec![
            TabularPolicy::from_logits(0, 4, 2, (0..8).map(|x| x as f64 * 0.3 - 1.0).collect()).unwrap(),
            TabularPolicy::from_logits(1, 4, 3, (0..12).map(|x| (x as f64).sin()).collect()).unwrap(),
        ])
        .unwrap();
        let t = sample_episode(&g, &p, 9, 50).unwrap();
        assert_eq!(t.steps.len(), 50);
        for step in &t.steps {
            for (i, (&a, &lp)) in step.joint_action.iter().zip(&step.log_probs).enumerate() {
                let expect = p.agent(i).prob(step.state, a).unwrap().ln();
                assert!((lp - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn loader_reports_first_bad_row() {
        let mut file = MarkovGame::chain2().to_file();
        file.transition[1][2] = vec![0.5, 0.4];
        let err = MarkovGame::from_file(file).unwrap_err().to_string();
        assert!(err.contains("state 1, joint action 2"), "{err}");
    }

    #[test]
    fn loader_rejects_bad_discount_and_dist() {
        let mut file = MarkovGame::chain2().to_file();
        file.discount = 1.0;
        assert!(MarkovGame::from_file(file).is_err());
        let mut file = MarkovGame::chain2().to_file();
        file.initial_dist = vec![0.5, 0.6];
        let err = MarkovGame::from_file(file).unwrap_err().to_string();
        assert!(err.contains("initial distribution"), "{err}");
    }

    #[test]
    fn json_roundtrip() {
        let g = MarkovGame::chain2();
        let text = serde_json::to_string(&g.to_file()).unwrap();
        assert_eq!(MarkovGame::from_json_str(&text).unwrap(), g);
        assert!(MarkovGame::from_json_str(&text.replace("\"discount\"", "\"gamma\"")).is_err());
    }

    #[test]
    fn random_games_validate() {
        let mut rng = rng::rng_from_seed(5);
        for _ in 0..20 {
            let g = MarkovGame::random(&mut rng, 6, vec![2, 3, 2], 0.9);
            MarkovGame::from_file(g.to_file()).unwrap();
        }
    }
}
