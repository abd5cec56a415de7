//! Threaded line server answering against a [`SnapshotStore`].

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use interleave_core::host::SnapshotStore;
use interleave_core::policy::TabularPolicy;
use interleave_core::{Error, Result};

use crate::protocol::{
    encode, DistributionResponse, ErrorResponse, QueryMode, SampleResponse, WireRequest, WireResponse,
};

/// A running service. Dropping the handle stops it.
pub struct ServiceHandle {
    addr: SocketAddr,
    store: Arc<SnapshotStore>,
    stopping: Arc<AtomicBool>,
    connections: Arc<Mutex<Vec<TcpStream>>>,
    acceptor: Option<JoinHandle<()>>,
}

/// Binds `endpoint` (`host:port`; port 0 picks a free port) and serves the
/// given per-agent policies.
pub fn serve(policies: Vec<TabularPolicy>, endpoint: &str) -> Result<ServiceHandle> {
    let store = Arc::new(SnapshotStore::new(policies)?);
    serve_store(store, endpoint)
}

pub fn serve_store(store: Arc<SnapshotStore>, endpoint: &str) -> Result<ServiceHandle> {
    let listener =
        TcpListener::bind(endpoint).map_err(|e| Error::Transport(format!("cannot bind {endpoint}: {e}")))?;
    let addr = listener.local_addr()?;
    let stopping = Arc::new(AtomicBool::new(false));
    let connections: Arc<Mutex<Vec<TcpStream>>> = Arc::default();
    let acceptor = {
        let (store, stopping, connections) = (store.clone(), stopping.clone(), connections.clone());
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                if stopping.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                if let Ok(clone) = stream.try_clone() {
                    connections.lock().expect("connection list").push(clone);
                }
                let store = store.clone();
                std::thread::spawn(move || {
                    // A broken connection only ends its own thread.
                    let _ = handle_connection(stream, &store);
                });
            }
        })
    };
    Ok(ServiceHandle {
        addr,
        store,
        stopping,
        connections,
        acceptor: Some(acceptor),
    })
}

impl ServiceHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn endpoint(&self) -> String {
        self.addr.to_string()
    }

    /// The served snapshots; publishing through it swaps a snapshot
    /// atomically and bumps its version.
    pub fn store(&self) -> &Arc<SnapshotStore> {
        &self.store
    }

    /// Stops accepting, closes open connections and joins the acceptor.
    pub fn stop(&mut self) {
        if self.stopping.swap(true, Ordering::SeqCst) {
            return;
        }
        // Wake the blocking accept.
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.acceptor.take() {
            let _ = t.join();
        }
        for c in self.connections.lock().expect("connection list").drain(..) {
            let _ = c.shutdown(Shutdown::Both);
        }
    }

    /// Blocks until the acceptor exits.
    pub fn wait(mut self) {
        if let Some(t) = self.acceptor.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

fn handle_connection(stream: TcpStream, store: &SnapshotStore) -> std::io::Result<()> {
    stream.set_nodelay(true)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    let mut line = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Ok(());
        }
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let response = answer(line, store);
        let encoded = encode(&response).unwrap_or_else(|e| {
            format!("{{\"id\":{},\"error\":{:?}}}\n", response.id(), e.to_string())
        });
        writer.write_all(encoded.as_bytes())?;
        // Pipelined requests are answered in one write.
        if reader.buffer().is_empty() {
            writer.flush()?;
        }
    }
}

/// Answers one request line. Never mutates the store.
pub fn answer(line: &str, store: &SnapshotStore) -> WireResponse {
    let request: WireRequest = match serde_json::from_str(line) {
        Ok(r) => r,
        Err(e) => {
            return WireResponse::Error(ErrorResponse {
                id: salvage_id(line),
                error: format!("malformed request: {e}"),
            })
        }
    };
    let id = request.id;
    let result = request.validate().and_then(|()| {
        let snapshot = store.snapshot(request.agent)?;
        Ok(match request.mode {
            QueryMode::Sample => {
                let s = snapshot.sample(&request.obs, request.seed.expect("validated"))?;
                WireResponse::Sample(SampleResponse {
                    id,
                    version: s.version,
                    action: s.action,
                    logp: s.log_prob,
                })
            }
            QueryMode::Distribution => WireResponse::Distribution(DistributionResponse {
                id,
                version: snapshot.version,
                probs: snapshot.distribution(&request.obs)?,
            }),
        })
    });
    result.unwrap_or_else(|e| {
        WireResponse::Error(ErrorResponse {
            id,
            error: e.to_string(),
        })
    })
}

fn salvage_id(line: &str) -> u64 {
    serde_json::from_str::<serde_json::Value>(line)
        .ok()
        .and_then(|v| v.get("id").and_then(|id| id.as_u64()))
        .unwrap_or(0)
}
