//! Tabular softmax policies and their joint composition.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Max-shifted softmax. Rows sum to one for any finite logits.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

/// Log-softmax computed with the log-sum-exp shift.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// KL(p || q) in nats. Both must be strictly positive.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| a * (a.ln() - b.ln())).sum()
}

/// One agent's policy: a `|S| x |A|` logit table, softmax per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    pub agent_id: usize,
    n_states: usize,
    n_actions: usize,
    logits: Vec<f64>,
}

impl TabularPolicy {
    pub fn uniform(agent_id: usize, n_states: usize, n_actions: usize) -> Self {
        Self {
            agent_id,
            n_states,
            n_actions,
            logits: vec![0.0; n_states * n_actions],
        }
    }

    /// Builds a policy from row-major logits.
    pub fn from_logits(
        agent_id: usize,
        n_states: usize,
        n_actions: usize,
        logits: Vec<f64>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::Domain("policy needs at least one state and one action".into()));
        }
        if logits.len() != n_states * n_actions {
            return Err(Error::Domain(format!(
                "expected {} logits, got {}",
                n_states * n_actions,
                logits.len()
            )));
        }
        if let Some(z) = logits.iter().find(|z| !z.is_finite()) {
            return Err(Error::Numeric(format!("non-finite logit {z}")));
        }
        Ok(Self {
            agent_id,
            n_states,
            n_actions,
            logits,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    /// Mutable access to the logit table. Only trainers write here.
    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn logit_row(&self, state: usize) -> &[f64] {
        &self.logits[state * self.n_actions..(state + 1) * self.n_actions]
    }

    pub fn logit_row_mut(&mut self, state: usize) -> &mut [f64] {
        &mut self.logits[state * self.n_actions..(state + 1) * self.n_actions]
    }

    fn check_state(&self, state: usize) -> Result<()> {
        if state >= self.n_states {
            return Err(Error::Domain(format!(
                "state {state} out of range for agent {} ({} states)",
                self.agent_id, self.n_states
            )));
        }
        Ok(())
    }

    fn check_action(&self, action: usize) -> Result<()> {
        if action >= self.n_actions {
            return Err(Error::Domain(format!(
                "action {action} out of range for agent {} ({} actions)",
                self.agent_id, self.n_actions
            )));
        }
        Ok(())
    }

    /// Action distribution at `state`. Panics on an out-of-range state;
    /// use [`TabularPolicy::try_probs`] for untrusted indices.
    pub fn probs(&self, state: usize) -> Vec<f64> {
        softmax(self.logit_row(state))
    }

    pub fn try_probs(&self, state: usize) -> Result<Vec<f64>> {
        self.check_state(state)?;
        Ok(self.probs(state))
    }

    pub fn log_probs(&self, state: usize) -> Vec<f64> {
        log_softmax(self.logit_row(state))
    }

    pub fn prob(&self, state: usize, action: usize) -> Result<f64> {
        self.check_state(state)?;
        self.check_action(action)?;
        Ok(self.probs(state)[action])
    }

    pub fn log_prob(&self, state: usize, action: usize) -> Result<f64> {
        self.check_state(state)?;
        self.check_action(action)?;
        Ok(self.log_probs(state)[action])
    }

    /// Samples an action at `state` with the decision seed `seed`, returning
    /// the action and its log-probability. Local and remote execution both go
    /// through this function.
    pub fn sample(&self, state: usize, seed: u64) -> Result<(usize, f64)> {
        self.check_state(state)?;
        let action = rng::sample_index(&self.probs(state), seed);
        Ok((action, self.log_probs(state)[action]))
    }

    pub fn same_shape(&self, other: &TabularPolicy) -> bool {
        self.n_states == other.n_states && self.n_actions == other.n_actions
    }
}

/// Product policy over all agents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointPolicy {
    pub per_agent: Vec<TabularPolicy>,
}

impl JointPolicy {
    pub fn new(per_agent: Vec<TabularPolicy>) -> Result<Self> {
        for (slot, p) in per_agent.iter().enumerate() {
            if p.agent_id != slot {
                return Err(Error::Composition(format!(
                    "slot {slot} holds the policy of agent {}",
                    p.agent_id
                )));
            }
        }
        Ok(Self { per_agent })
    }

    pub fn n_agents(&self) -> usize {
        self.per_agent.len()
    }

    pub fn agent(&self, i: usize) -> &TabularPolicy {
        &self.per_agent[i]
    }

    /// Product of per-agent probabilities of `joint_action` at `state`.
    pub fn joint_action_prob(&self, state: usize, joint_action: &[usize]) -> Result<f64> {
        if joint_action.len() != self.per_agent.len() {
            return Err(Error::Domain(format!(
                "joint action has {} components for {} agents",
                joint_action.len(),
                self.per_agent.len()
            )));
        }
        let mut p = 1.0;
        for (policy, &a) in self.per_agent.iter().zip(joint_action) {
            p *= policy.prob(state, a)?;
        }
        Ok(p)
    }

    /// Replaces slot `i`, returning the new joint policy.
    pub fn with_slot(&self, i: usize, policy: TabularPolicy) -> Result<JointPolicy> {
        if policy.agent_id != i || i >= self.per_agent.len() {
            return Err(Error::Composition(format!(
                "cannot place agent {} into slot {i}",
                policy.agent_id
            )));
        }
        let mut per_agent = self.per_agent.clone();
        per_agent[i] = policy;
        Ok(JointPolicy { per_agent })
    }

    /// The complement of slot `i`: every agent except `i`, in order.
    pub fn complement(&self, i: usize) -> Vec<&TabularPolicy> {
        self.per_agent
            .iter()
            .filter(|p| p.agent_id != i)
            .collect()
    }

    /// Indices of slots whose logits differ between `self` and `other`.
    pub fn differing_slots(&self, other: &JointPolicy) -> Vec<usize> {
        self.per_agent
            .iter()
            .zip(&other.per_agent)
            .enumerate()
            .filter(|(_, (a, b))| a != b)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Rolling baseline at a micro-step of agent `i`: agents before `i` already
/// carry their next-round policies, agent `i` its current iterate, and agents
/// after `i` their current-round policies.
pub fn compose_rolling_baseline(
    updated_prev: &[TabularPolicy],
    active: &TabularPolicy,
    frozen_next: &[TabularPolicy],
) -> Result<JointPolicy> {
    let i = active.agent_id;
    let n = updated_prev.len() + 1 + frozen_next.len();
    let mut slots: Vec<Option<TabularPolicy>> = vec![None; n];
    let groups = [
        (updated_prev, 0..i, "updated"),
        (frozen_next, i + 1..n, "frozen"),
    ];
    for (group, range, name) in groups {
        for p in group {
            if !range.contains(&p.agent_id) {
                return Err(Error::Composition(format!(
                    "agent {} does not belong to the {name} group of active agent {i}",
                    p.agent_id
                )));
            }
            if slots[p.agent_id].is_some() {
                return Err(Error::Composition(format!("duplicate agent {}", p.agent_id)));
            }
            slots[p.agent_id] = Some(p.clone());
        }
    }
    if i >= n {
        return Err(Error::Composition(format!("active agent {i} out of range")));
    }
    slots[i] = Some(active.clone());
    let per_agent = slots
        .into_iter()
        .enumerate()
        .map(|(slot, p)| p.ok_or_else(|| Error::Composition(format!("missing agent {slot}"))))
        .collect::<Result<Vec<_>>>()?;
    JointPolicy::new(per_agent)
}
