//! Wire format: one JSON object per line, UTF-8.
//!
//! ```text
//! request   {"id":7,"agent":1,"obs":3,"mode":"sample","seed":42}
//! request   {"id":8,"agent":1,"obs":3,"mode":"distribution"}
//! response  {"id":7,"version":2,"action":1,"logp":-0.31326168751822286}
//! response  {"id":8,"version":2,"probs":[0.2689414213699951,0.7310585786300049]}
//! error     {"id":9,"error":"state 12 out of range for 4 states"}
//! ```

use interleave_core::host::Observation;
use interleave_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    Sample,
    Distribution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireRequest {
    pub id: u64,
    pub agent: usize,
    pub obs: Observation,
    pub mode: QueryMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl WireRequest {
    pub fn sample(id: u64, agent: usize, obs: Observation, seed: u64) -> Self {
        Self {
            id,
            agent,
            obs,
            mode: QueryMode::Sample,
            seed: Some(seed),
        }
    }

    pub fn distribution(id: u64, agent: usize, obs: Observation) -> Self {
        Self {
            id,
            agent,
            obs,
            mode: QueryMode::Distribution,
            seed: None,
        }
    }

    /// A seed is present exactly in sample mode.
    pub fn validate(&self) -> Result<()> {
        match (self.mode, self.seed) {
            (QueryMode::Sample, None) => Err(Error::Protocol(format!("request {}: sample mode needs a seed", self.id))),
            (QueryMode::Distribution, Some(_)) => {
                Err(Error::Protocol(format!("request {}: distribution mode takes no seed", self.id)))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WireResponse {
    Sample(SampleResponse),
    Distribution(DistributionResponse),
    Error(ErrorResponse),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleResponse {
    pub id: u64,
    pub version: u64,
    pub action: usize,
    pub logp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistributionResponse {
    pub id: u64,
    pub version: u64,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorResponse {
    pub id: u64,
    pub error: String,
}

impl WireResponse {
    pub fn id(&self) -> u64 {
        match self {
            WireResponse::Sample(r) => r.id,
            WireResponse::Distribution(r) => r.id,
            WireResponse::Error(r) => r.id,
        }
    }

    /// Checks the numeric invariants of a response.
    pub fn validate(&self) -> Result<()> {
        match self {
            WireResponse::Sample(r) if !(r.logp <= 0.0) => {
                Err(Error::Protocol(format!("response {}: log-probability {} is not <= 0", r.id, r.logp)))
            }
            WireResponse::Distribution(r) => {
                let sum: f64 = r.probs.iter().sum();
                if r.probs.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::Protocol(format!("response {}: probabilities sum to {sum}", r.id)));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

pub fn encode<T: Serialize>(message: &T) -> Result<String> {
    let mut line = serde_json::to_string(message)?;
    line.push('\n');
    Ok(line)
}
