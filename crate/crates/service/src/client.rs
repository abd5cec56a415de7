//! Client with timeouts, retries and pipelined batches.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use interleave_core::host::{Observation, Sampled};
use interleave_core::{Error, Result};

use crate::protocol::{encode, WireRequest, WireResponse};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClientConfig {
    pub timeout: Duration,
    /// Attempts after the first one.
    pub retries: usize,
    /// Pause before retry `k` is `k * backoff`.
    pub backoff: Duration,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(5),
            retries: 3,
            backoff: Duration::from_millis(20),
        }
    }
}

struct Connection {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

/// Safe to share between threads; concurrent calls take turns on one
/// connection.
pub struct PolicyClient {
    addr: SocketAddr,
    config: ClientConfig,
    connection: Mutex<Option<Connection>>,
    next_id: AtomicU64,
}

/// Failure of one attempt.
enum Attempt {
    /// Worth retrying on a fresh connection.
    Transport(String),
    Fatal(Error),
}

impl PolicyClient {
    pub fn connect(endpoint: &str, config: ClientConfig) -> Result<Self> {
        let addr = endpoint
            .to_socket_addrs()
            .map_err(|e| Error::Transport(format!("cannot resolve {endpoint}: {e}")))?
            .next()
            .ok_or_else(|| Error::Transport(format!("{endpoint} resolves to no address")))?;
        Ok(Self {
            addr,
            config,
            connection: Mutex::new(None),
            next_id: AtomicU64::new(1),
        })
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    pub fn query_action(&self, agent: usize, obs: &Observation, seed: u64) -> Result<Sampled> {
        Ok(self.sample_many(agent, &[(obs.clone(), seed)])?[0])
    }

    pub fn query_distribution(&self, agent: usize, obs: &Observation) -> Result<(Vec<f64>, u64)> {
        let id = self.fresh_id();
        match self.exchange(vec![WireRequest::distribution(id, agent, obs.clone())])?.remove(0) {
            WireResponse::Distribution(r) => Ok((r.probs, r.version)),
            other => Err(unexpected(other)),
        }
    }

    /// Sends all queries before reading any answer.
    pub fn sample_many(&self, agent: usize, queries: &[(Observation, u64)]) -> Result<Vec<Sampled>> {
        let requests = queries
            .iter()
            .map(|(obs, seed)| WireRequest::sample(self.fresh_id(), agent, obs.clone(), *seed))
            .collect();
        self.exchange(requests)?
            .into_iter()
            .map(|r| match r {
                WireResponse::Sample(s) => Ok(Sampled {
                    action: s.action,
                    log_prob: s.logp,
                    version: s.version,
                }),
                other => Err(unexpected(other)),
            })
            .collect()
    }

    fn fresh_id(&self) -> u64 {
        self.next_id.fetch_add(1, Ordering::Relaxed)
    }

    /// Sends `requests` and returns the responses in request order.
    pub fn exchange(&self, requests: Vec<WireRequest>) -> Result<Vec<WireResponse>> {
        if requests.is_empty() {
            return Ok(Vec::new());
        }
        let mut guard = self.connection.lock().expect("client lock");
        let mut last = String::new();
        for attempt in 0..=self.config.retries {
            if attempt > 0 {
                std::thread::sleep(self.config.backoff * attempt as u32);
            }
            match self.attempt(&mut guard, &requests) {
                Ok(responses) => return Ok(responses),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Transport(msg)) => {
                    *guard = None;
                    last = msg;
                }
            }
        }
        Err(Error::Transport(format!(
            "{} unreachable after {} retries: {last}",
            self.addr, self.config.retries
        )))
    }

    fn attempt(&self, slot: &mut Option<Connection>, requests: &[WireRequest]) -> std::result::Result<Vec<WireResponse>, Attempt> {
        let io = |e: std::io::Error| Attempt::Transport(e.to_string());
        if slot.is_none() {
            let stream = TcpStream::connect_timeout(&self.addr, self.config.timeout).map_err(io)?;
            stream.set_read_timeout(Some(self.config.timeout)).map_err(io)?;
            stream.set_write_timeout(Some(self.config.timeout)).map_err(io)?;
            stream.set_nodelay(true).map_err(io)?;
            *slot = Some(Connection {
                reader: BufReader::new(stream.try_clone().map_err(io)?),
                writer: BufWriter::new(stream),
            });
        }
        let conn = slot.as_mut().expect("connected above");
        for r in requests {
            let line = encode(r).map_err(Attempt::Fatal)?;
            conn.writer.write_all(line.as_bytes()).map_err(io)?;
        }
        conn.writer.flush().map_err(io)?;
        let index: HashMap<u64, usize> = requests.iter().enumerate().map(|(i, r)| (r.id, i)).collect();
        let mut out: Vec<Option<WireResponse>> = vec![None; requests.len()];
        let mut line = String::new();
        for _ in 0..requests.len() {
            line.clear();
            let n = conn.reader.read_line(&mut line).map_err(io)?;
            if n == 0 {
                return Err(Attempt::Transport("connection closed by the service".into()));
            }
            let response: WireResponse = serde_json::from_str(line.trim_end())
                .map_err(|e| Attempt::Fatal(Error::Protocol(format!("malformed response {line:?}: {e}"))))?;
            response.validate().map_err(Attempt::Fatal)?;
            let slot = index
                .get(&response.id())
                .copied()
                .ok_or_else(|| Attempt::Fatal(Error::Protocol(format!("response to unknown id {}", response.id()))))?;
            if out[slot].replace(response).is_some() {
                return Err(Attempt::Fatal(Error::Protocol("duplicate response id".into())));
            }
        }
        Ok(out.into_iter().map(|r| r.expect("every id answered once")).collect())
    }
}

fn unexpected(response: WireResponse) -> Error {
    match response {
        WireResponse::Error(e) => Error::Protocol(format!("service error for request {}: {}", e.id, e.error)),
        other => Error::Protocol(format!("unexpected response shape for request {}", other.id())),
    }
}
