//! Rollout collection for sampled training.
//!
//! An environment turns an input id and a set of actors into a group of `K`
//! rollouts. Actors are either a local policy (the agent being trained),
//! a [`PolicyHost`] (frozen agents), or a fixed rule.

use crate::error::{Error, Result};
use crate::game::{EpisodeStream, MarkovGame};
use crate::gridgui::{
    reward_components, AtomicAction, GridGuiEnv, GridGuiTask, InstructionToken,
};
use crate::grpo::{Decision, RewardWeights, Rollout, RolloutGroup};
use crate::host::{Observation, PolicyHost};
use crate::oracle;
use crate::policy::{JointPolicy, TabularPolicy};
use crate::rng::{self, mix_seed};

/// Who chooses an agent's actions during collection.
#[derive(Clone, Copy)]
pub enum Actor<'a> {
    Local(&'a TabularPolicy),
    Host(&'a dyn PolicyHost),
    /// Deterministic rule over state indices; log-probability 0.
    Fixed(&'a (dyn Fn(usize) -> usize + Sync)),
}

impl Actor<'_> {
    /// Samples `(action, log_prob)` for every `(observation, seed)` pair.
    pub fn sample_batch(&self, agent: usize, queries: &[(Observation, u64)]) -> Result<Vec<(usize, f64)>> {
        match self {
            Actor::Local(p) => queries
                .iter()
                .map(|(o, seed)| p.sample(o.state_index()?, *seed))
                .collect(),
            Actor::Host(h) => Ok(h
                .sample_batch(agent, queries)?
                .into_iter()
                .map(|s| (s.action, s.log_prob))
                .collect()),
            Actor::Fixed(rule) => queries
                .iter()
                .map(|(o, _)| Ok((rule(o.state_index()?), 0.0)))
                .collect(),
        }
    }
}

/// An environment usable by sampled training.
pub trait TrainingEnv: Sync {
    fn n_agents(&self) -> usize;

    /// `(n_states, n_actions)` of each agent's policy table.
    fn policy_shape(&self, agent: usize) -> (usize, usize);

    /// Number of distinct inputs groups can be drawn for.
    fn n_inputs(&self) -> usize;

    /// Samples `k` rollouts for `input`. Agents not flagged in `per_rollout`
    /// may be sampled once and shared by the whole group where the
    /// environment supports it.
    fn collect_group(
        &self,
        input: usize,
        actors: &[Actor<'_>],
        per_rollout: &[bool],
        k: usize,
        seed: u64,
    ) -> Result<RolloutGroup>;

    /// Exact performance of a joint policy, if computable.
    fn exact_value(&self, policy: &JointPolicy) -> Result<Option<f64>>;

    /// Monte-Carlo performance estimate from `samples` draws per input.
    fn monte_carlo(&self, actors: &[Actor<'_>], samples: usize, seed: u64) -> Result<f64>;

    /// The underlying game, when the exact oracle applies.
    fn as_game(&self) -> Option<&MarkovGame> {
        None
    }

    fn as_gridgui(&self) -> Option<&GridGuiSuite> {
        None
    }

    /// Zero-logit policies of the right shapes.
    fn uniform_policies(&self) -> Vec<TabularPolicy> {
        (0..self.n_agents())
            .map(|i| {
                let (s, a) = self.policy_shape(i);
                TabularPolicy::uniform(i, s, a)
            })
            .collect()
    }
}

/// A Markov game played for a fixed number of steps per rollout. The rollout
/// reward is the discounted return.
#[derive(Debug, Clone)]
pub struct GameEnv {
    pub game: MarkovGame,
    pub horizon: usize,
}

impl GameEnv {
    pub fn new(game: MarkovGame, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Domain("horizon must be at least 1".into()));
        }
        Ok(Self { game, horizon })
    }

    /// Plays `seeds.len()` episodes in lockstep so that frozen-agent queries
    /// of one step go out as one batch. Returns the per-episode decisions and
    /// discounted returns.
    fn play(&self, actors: &[Actor<'_>], seeds: &[u64]) -> Result<Vec<Rollout>> {
        let game = &self.game;
        let n = game.n_agents();
        if actors.len() != n {
            return Err(Error::Domain(format!("{} actors for {n} agents", actors.len())));
        }
        let mut streams: Vec<EpisodeStream> = seeds.iter().map(|s| EpisodeStream::new(*s)).collect();
        let mut states: Vec<usize> = streams
            .iter_mut()
            .map(|st| rng::sample_index(game.initial_dist(), st.next_seed()))
            .collect();
        let mut out: Vec<Rollout> = seeds
            .iter()
            .map(|_| Rollout {
                decisions: Vec::with_capacity(self.horizon * n),
                reward: 0.0,
            })
            .collect();
        let mut discount = 1.0;
        for _ in 0..self.horizon {
            let mut actions = vec![Vec::with_capacity(n); seeds.len()];
            for (agent, actor) in actors.iter().enumerate() {
                let queries: Vec<(Observation, u64)> = states
                    .iter()
                    .zip(streams.iter_mut())
                    .map(|(s, st)| (Observation::State(*s), st.next_seed()))
                    .collect();
                let sampled = actor.sample_batch(agent, &queries)?;
                for (e, (a, lp)) in sampled.into_iter().enumerate() {
                    actions[e].push(a);
                    out[e].decisions.push(Decision {
                        agent,
                        state: states[e],
                        action: a,
                        old_log_prob: lp,
                    });
                }
            }
            for e in 0..seeds.len() {
                let ja = game.joint_index(&actions[e])?;
                out[e].reward += discount * game.reward(states[e], ja);
                states[e] = game.sample_next(states[e], ja, streams[e].next_seed());
            }
            discount *= game.discount();
        }
        Ok(out)
    }
}

impl TrainingEnv for GameEnv {
    fn n_agents(&self) -> usize {
        self.game.n_agents()
    }

    fn as_game(&self) -> Option<&MarkovGame> {
        Some(&self.game)
    }

    fn policy_shape(&self, agent: usize) -> (usize, usize) {
        (self.game.n_states(), self.game.n_actions(agent))
    }

    fn n_inputs(&self) -> usize {
        1
    }

    fn collect_group(
        &self,
        input: usize,
        actors: &[Actor<'_>],
        _per_rollout: &[bool],
        k: usize,
        seed: u64,
    ) -> Result<RolloutGroup> {
        let seeds: Vec<u64> = (0..k as u64).map(|e| rng::episode_seed(seed, e)).collect();
        Ok(RolloutGroup {
            input_id: input,
            rollouts: self.play(actors, &seeds)?,
        })
    }

    fn exact_value(&self, policy: &JointPolicy) -> Result<Option<f64>> {
        Ok(Some(oracle::return_j(&self.game, policy)?))
    }

    fn monte_carlo(&self, actors: &[Actor<'_>], samples: usize, seed: u64) -> Result<f64> {
        let seeds: Vec<u64> = (0..samples as u64).map(|e| rng::episode_seed(seed, e)).collect();
        let rollouts = self.play(actors, &seeds)?;
        Ok(rollouts.iter().map(|r| r.reward).sum::<f64>() / samples.max(1) as f64)
    }
}

/// One-step GridGUI training: each input is a state on a gold trace; the
/// navigator emits an instruction, the interactor an action, and the rollout
/// earns the combined reward against the gold step.
#[derive(Debug, Clone)]
pub struct GridGuiSuite {
    tasks: Vec<GridGuiTask>,
    /// `(task, gold step)` per input.
    inputs: Vec<(usize, usize)>,
    pub weights: RewardWeights,
}

pub const NAVIGATOR: usize = 0;
pub const INTERACTOR: usize = 1;

impl GridGuiSuite {
    pub fn new(tasks: Vec<GridGuiTask>, weights: RewardWeights) -> Result<Self> {
        weights.validate()?;
        if tasks.is_empty() {
            return Err(Error::Domain("task suite is empty".into()));
        }
        let inputs = tasks
            .iter()
            .enumerate()
            .flat_map(|(t, task)| (0..task.gold_trace().len()).map(move |k| (t, k)))
            .collect();
        Ok(Self { tasks, inputs, weights })
    }

    pub fn tasks(&self) -> &[GridGuiTask] {
        &self.tasks
    }

    fn env_at(&self, input: usize) -> Result<GridGuiEnv<'_>> {
        let &(t, k) = self
            .inputs
            .get(input)
            .ok_or_else(|| Error::Domain(format!("input {input} out of range")))?;
        GridGuiEnv::at_gold_step(&self.tasks[t], k)
    }

    /// Navigator feature state and gold instruction of every input.
    pub fn labeled_navigator_states(&self) -> Result<Vec<(usize, InstructionToken)>> {
        (0..self.inputs.len())
            .map(|i| {
                let env = self.env_at(i)?;
                let s = crate::gridgui::navigator_state(&env.navigator_observation())?;
                Ok((s, env.gold().instruction))
            })
            .collect()
    }

    /// Expected combined reward of an interactor that receives the gold
    /// instruction at every input.
    pub fn interactor_score(&self, interactor: &TabularPolicy) -> Result<f64> {
        let mut total = 0.0;
        for i in 0..self.inputs.len() {
            let env = self.env_at(i)?;
            let gold = env.gold();
            let obs = Observation::Interactor(env.interactor_observation(gold.instruction));
            let probs = interactor.try_probs(obs.state_index()?)?;
            for (a, p) in probs.iter().enumerate() {
                let action = AtomicAction::from_index(a).expect("action index");
                total += p * reward_components(&gold, gold.instruction, action).combined(&self.weights);
            }
        }
        Ok(total / self.inputs.len() as f64)
    }

    fn reward(&self, env: &GridGuiEnv<'_>, token: usize, action: usize) -> Result<f64> {
        let token = InstructionToken::from_index(token)
            .ok_or_else(|| Error::Domain(format!("instruction index {token} out of range")))?;
        let action = AtomicAction::from_index(action)
            .ok_or_else(|| Error::Domain(format!("action index {action} out of range")))?;
        Ok(reward_components(&env.gold(), token, action).combined(&self.weights))
    }
}

impl TrainingEnv for GridGuiSuite {
    fn n_agents(&self) -> usize {
        2
    }

    fn as_gridgui(&self) -> Option<&GridGuiSuite> {
        Some(self)
    }

    fn policy_shape(&self, agent: usize) -> (usize, usize) {
        if agent == NAVIGATOR {
            (crate::gridgui::N_NAVIGATOR_STATES, InstructionToken::VOCAB_SIZE)
        } else {
            (crate::gridgui::N_INTERACTOR_STATES, AtomicAction::COUNT)
        }
    }

    fn n_inputs(&self) -> usize {
        self.inputs.len()
    }

    fn collect_group(
        &self,
        input: usize,
        actors: &[Actor<'_>],
        per_rollout: &[bool],
        k: usize,
        seed: u64,
    ) -> Result<RolloutGroup> {
        if actors.len() != 2 || per_rollout.len() != 2 {
            return Err(Error::Domain("GridGUI rollouts need exactly two actors".into()));
        }
        let env = self.env_at(input)?;
        let nav_obs = Observation::Navigator(env.navigator_observation());
        let nav_state = nav_obs.state_index()?;
        let nav_queries: Vec<(Observation, u64)> = if per_rollout[NAVIGATOR] {
            (0..k as u64).map(|r| (nav_obs.clone(), mix_seed(seed, 2 * r))).collect()
        } else {
            vec![(nav_obs.clone(), mix_seed(seed, u64::MAX))]
        };
        let mut tokens = actors[NAVIGATOR].sample_batch(NAVIGATOR, &nav_queries)?;
        if tokens.len() == 1 {
            tokens = vec![tokens[0]; k];
        }
        let int_queries = tokens
            .iter()
            .enumerate()
            .map(|(r, (tok, _))| {
                let token = InstructionToken::from_index(*tok)
                    .ok_or_else(|| Error::Domain(format!("instruction index {tok} out of range")))?;
                Ok((
                    Observation::Interactor(env.interactor_observation(token)),
                    mix_seed(seed, 2 * r as u64 + 1),
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let actions = actors[INTERACTOR].sample_batch(INTERACTOR, &int_queries)?;
        let rollouts = tokens
            .iter()
            .zip(&actions)
            .zip(&int_queries)
            .map(|((&(tok, tok_lp), &(act, act_lp)), (int_obs, _))| {
                Ok(Rollout {
                    decisions: vec![
                        Decision {
                            agent: NAVIGATOR,
                            state: nav_state,
                            action: tok,
                            old_log_prob: tok_lp,
                        },
                        Decision {
                            agent: INTERACTOR,
                            state: int_obs.state_index()?,
                            action: act,
                            old_log_prob: act_lp,
                        },
                    ],
                    reward: self.reward(&env, tok, act)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RolloutGroup {
            input_id: input,
            rollouts,
        })
    }

    fn exact_value(&self, policy: &JointPolicy) -> Result<Option<f64>> {
        let nav = policy.agent(NAVIGATOR);
        let int = policy.agent(INTERACTOR);
        let mut total = 0.0;
        for i in 0..self.inputs.len() {
            let env = self.env_at(i)?;
            let nav_probs = nav.try_probs(crate::gridgui::navigator_state(&env.navigator_observation())?)?;
            for (tok, p_tok) in nav_probs.iter().enumerate() {
                let token = InstructionToken::from_index(tok).expect("token index");
                let int_probs = int.try_probs(crate::gridgui::interactor_state(&env.interactor_observation(token)))?;
                for (a, p_a) in int_probs.iter().enumerate() {
                    total += p_tok * p_a * self.reward(&env, tok, a)?;
                }
            }
        }
        Ok(Some(total / self.inputs.len() as f64))
    }

    fn monte_carlo(&self, actors: &[Actor<'_>], samples: usize, seed: u64) -> Result<f64> {
        let mut total = 0.0;
        for i in 0..self.inputs.len() {
            let g = self.collect_group(i, actors, &[true, true], samples, mix_seed(seed, i as u64))?;
            total += g.mean_reward();
        }
        Ok(total / self.inputs.len() as f64)
    }
}
