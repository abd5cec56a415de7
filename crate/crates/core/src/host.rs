//! Access to agent policies that are not being trained.
//!
//! A [`PolicyHost`] owns one versioned snapshot per agent. The trainer reads
//! frozen agents only through queries and swaps in a new snapshot when an
//! agent commits. [`InProcessHost`] keeps the snapshots in the caller's
//! memory; the service crate provides a host that answers over a socket.

use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridgui::{interactor_state, navigator_state, InteractorObservation, NavigatorObservation};
use crate::policy::TabularPolicy;

/// What a queried agent sees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Observation {
    /// A state index of a tabular game.
    State(usize),
    Navigator(NavigatorObservation),
    Interactor(InteractorObservation),
}

impl Observation {
    /// Row of the agent's policy table this observation selects.
    pub fn state_index(&self) -> Result<usize> {
        match self {
            Observation::State(s) => Ok(*s),
            Observation::Navigator(obs) => navigator_state(obs),
            Observation::Interactor(obs) => Ok(interactor_state(obs)),
        }
    }
}

/// A sampled action of a frozen agent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sampled {
    pub action: usize,
    pub log_prob: f64,
    pub version: u64,
}

/// An immutable policy snapshot with its version tag.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub version: u64,
    pub policy: Arc<TabularPolicy>,
}

impl Snapshot {
    pub fn sample(&self, obs: &Observation, seed: u64) -> Result<Sampled> {
        let (action, log_prob) = self.policy.sample(obs.state_index()?, seed)?;
        Ok(Sampled {
            action,
            log_prob,
            version: self.version,
        })
    }

    pub fn distribution(&self, obs: &Observation) -> Result<Vec<f64>> {
        self.policy.try_probs(obs.state_index()?)
    }
}

/// Versioned per-agent snapshots with atomic replacement and a round
/// checkpoint for all-or-nothing commits.
#[derive(Debug, Default)]
pub struct SnapshotStore {
    slots: RwLock<Vec<Snapshot>>,
    checkpoint: Mutex<Option<Vec<Snapshot>>>,
}

impl SnapshotStore {
    pub fn new(policies: Vec<TabularPolicy>) -> Result<Self> {
        for (i, p) in policies.iter().enumerate() {
            if p.agent_id != i {
                return Err(Error::Composition(format!(
                    "policy of agent {} placed in slot {i}",
                    p.agent_id
                )));
            }
        }
        let slots = policies
            .into_iter()
            .map(|p| Snapshot {
                version: 1,
                policy: Arc::new(p),
            })
            .collect();
        Ok(Self {
            slots: RwLock::new(slots),
            checkpoint: Mutex::new(None),
        })
    }

    pub fn n_agents(&self) -> usize {
        self.slots.read().expect("store lock").len()
    }

    pub fn snapshot(&self, agent: usize) -> Result<Snapshot> {
        self.slots
            .read()
            .expect("store lock")
            .get(agent)
            .cloned()
            .ok_or_else(|| Error::Domain(format!("no agent {agent}")))
    }

    /// Replaces the snapshot of `policy.agent_id`; returns the new version.
    pub fn publish(&self, policy: TabularPolicy) -> Result<u64> {
        let mut slots = self.slots.write().expect("store lock");
        let agent = policy.agent_id;
        let slot = slots
            .get_mut(agent)
            .ok_or_else(|| Error::Domain(format!("no agent {agent}")))?;
        if !slot.policy.same_shape(&policy) {
            return Err(Error::Domain(format!("published policy for agent {agent} has a different shape")));
        }
        slot.version += 1;
        slot.policy = Arc::new(policy);
        Ok(slot.version)
    }

    pub fn begin_round(&self) {
        let slots = self.slots.read().expect("store lock").clone();
        *self.checkpoint.lock().expect("checkpoint lock") = Some(slots);
    }

    /// Restores the snapshots saved by the last [`begin_round`](Self::begin_round).
    pub fn rollback(&self) {
        if let Some(saved) = self.checkpoint.lock().expect("checkpoint lock").take() {
            *self.slots.write().expect("store lock") = saved;
        }
    }

    pub fn commit(&self) {
        self.checkpoint.lock().expect("checkpoint lock").take();
    }
}

/// Source of frozen-agent behavior and sink for committed policies.
pub trait PolicyHost: Send + Sync {
    fn n_agents(&self) -> usize;

    fn sample(&self, agent: usize, obs: &Observation, seed: u64) -> Result<Sampled>;

    fn distribution(&self, agent: usize, obs: &Observation) -> Result<(Vec<f64>, u64)>;

    /// Samples several observations; implementations may pipeline them.
    fn sample_batch(&self, agent: usize, queries: &[(Observation, u64)]) -> Result<Vec<Sampled>> {
        queries.iter().map(|(o, s)| self.sample(agent, o, *s)).collect()
    }

    /// A full copy of the agent's current parameters.
    fn checkout(&self, agent: usize) -> Result<TabularPolicy>;

    fn publish(&self, policy: TabularPolicy) -> Result<u64>;

    fn begin_round(&self) -> Result<()>;

    fn rollback(&self) -> Result<()>;

    fn commit(&self) -> Result<()>;

    /// Parameter blocks this host keeps in the trainer's address space.
    fn resident_blocks(&self) -> usize;
}

/// Host that keeps every snapshot in the trainer process.
#[derive(Debug)]
pub struct InProcessHost {
    store: SnapshotStore,
}

impl InProcessHost {
    pub fn new(policies: Vec<TabularPolicy>) -> Result<Self> {
        Ok(Self {
            store: SnapshotStore::new(policies)?,
        })
    }

    pub fn store(&self) -> &SnapshotStore {
        &self.store
    }
}

impl PolicyHost for InProcessHost {
    fn n_agents(&self) -> usize {
        self.store.n_agents()
    }

    fn sample(&self, agent: usize, obs: &Observation, seed: u64) -> Result<Sampled> {
        self.store.snapshot(agent)?.sample(obs, seed)
    }

    fn distribution(&self, agent: usize, obs: &Observation) -> Result<(Vec<f64>, u64)> {
        let snap = self.store.snapshot(agent)?;
        Ok((snap.distribution(obs)?, snap.version))
    }

    fn checkout(&self, agent: usize) -> Result<TabularPolicy> {
        Ok((*self.store.snapshot(agent)?.policy).clone())
    }

    fn publish(&self, policy: TabularPolicy) -> Result<u64> {
        self.store.publish(policy)
    }

    fn begin_round(&self) -> Result<()> {
        self.store.begin_round();
        Ok(())
    }

    fn rollback(&self) -> Result<()> {
        self.store.rollback();
        Ok(())
    }

    fn commit(&self) -> Result<()> {
        self.store.commit();
        Ok(())
    }

    fn resident_blocks(&self) -> usize {
        self.store.n_agents()
    }
}
