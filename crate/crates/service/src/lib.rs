//! Frozen agents behind a socket.
//!
//! The service holds one versioned snapshot per agent and answers sampling
//! and distribution queries. Sampling happens on the server with the
//! client's seed through the same code path the in-process host uses, so the
//! two hosts give bit-identical answers.

pub mod client;
pub mod protocol;
pub mod server;

use std::sync::Arc;

use interleave_core::host::{Observation, PolicyHost, Sampled, SnapshotStore};
use interleave_core::policy::TabularPolicy;
use interleave_core::Result;

pub use client::{ClientConfig, PolicyClient};
pub use protocol::{QueryMode, WireRequest, WireResponse};
pub use server::{serve, serve_store, ServiceHandle};

/// A [`PolicyHost`] whose frozen agents are queried over the wire.
///
/// Parameters live in the service's store. The trainer reaches them only
/// through `checkout`/`publish`, the deployment side of the service, and
/// keeps none resident.
pub struct RemoteHost {
    client: PolicyClient,
    store: Arc<SnapshotStore>,
}

impl RemoteHost {
    pub fn new(service: &ServiceHandle, config: ClientConfig) -> Result<Self> {
        Ok(Self {
            client: PolicyClient::connect(&service.endpoint(), config)?,
            store: service.store().clone(),
        })
    }

    pub fn client(&self) -> &PolicyClient {
        &self.client
    }
}

impl PolicyHost for RemoteHost {
    fn n_agents(&self) -> usize {
        self.store.n_agents()
    }

    fn sample(&self, agent: usize, obs: &Observation, seed: u64) -> Result<Sampled> {
        self.client.query_action(agent, obs, seed)
    }

    fn distribution(&self, agent: usize, obs: &Observation) -> Result<(Vec<f64>, u64)> {
        self.client.query_distribution(agent, obs)
    }

    fn sample_batch(&self, agent: usize, queries: &[(Observation, u64)]) -> Result<Vec<Sampled>> {
        self.client.sample_many(agent, queries)
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
        0
    }
}
