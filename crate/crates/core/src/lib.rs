//! Interleaved multi-agent policy optimization.
//!
//! One agent is optimized at a time while the rest of the team is frozen.
//! The crate provides tabular cooperative Markov games, an exact oracle that
//! certifies the per-micro-step safety bound and round-level monotonicity, a
//! group-relative clipped objective with a KL anchor, a two-agent
//! planner/executor grid environment, and the scheduler tying them together.

pub mod error;
pub mod game;
pub mod gridgui;
pub mod grpo;
pub mod host;
pub mod oracle;
pub mod policy;
pub mod rng;
pub mod rollout;
pub mod scheduler;

pub use error::{Error, Result};
pub use game::{sample_episode, MarkovGame, Trajectory};
pub use oracle::{ExactEvaluation, MicroStepReport};
pub use policy::{compose_rolling_baseline, JointPolicy, TabularPolicy};
