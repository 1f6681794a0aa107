//! Server startup and the handle that owns a running server.

use std::io;
use std::sync::mpsc;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use super::loops::{panic_msg, run_net_loop, run_payload_loop, NetLoopCtx, PayloadLoopCtx};
use super::queue::{Dispatcher, JobQueue};
use super::{
    build_topology, ConfigError, EngineCounters, ServerConfig, Shared, ThreadCensus, Topology,
};
use crate::netio::{Endpoint, EventLoop, Listener, LoopWaker};
use crate::store::{Store, StoreError};

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("cannot bind {endpoint}: {source}")]
    Bind {
        endpoint: String,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("server threads did not all become ready within {0:?}")]
    StartupTimeout(Duration),
    #[error("a server thread panicked: {0}")]
    WorkerPanic(String),
}

/// A running server. Dropping the handle shuts the server down; prefer
/// [`ServerHandle::shutdown`] to observe worker panics.
pub struct ServerHandle {
    shared: Arc<Shared>,
    accept: Option<JoinHandle<()>>,
    endpoint: Endpoint,
}

impl ServerHandle {
    /// The bound address. For `tcp:<host>:0` this carries the actual port.
    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    pub fn topology(&self) -> Topology {
        self.shared.topology
    }

    /// Thread counts as self-reported by the running threads.
    pub fn census(&self) -> ThreadCensus {
        self.shared.census()
    }

    pub fn counters(&self) -> &EngineCounters {
        &self.shared.counters
    }

    pub fn store(&self) -> &Store {
        &self.shared.store
    }

    pub fn connection_count(&self) -> usize {
        self.shared.conns.lock().unwrap().len()
    }

    pub fn is_running(&self) -> bool {
        self.shared.is_running()
    }

    /// Stop accepting, drain in-flight work (bounded by the configured
    /// grace period), join every thread.
    pub fn shutdown(mut self) -> Result<(), ServeError> {
        self.shared.begin_drain();
        let result = match self.accept.take() {
            Some(h) => h.join().map_err(|p| ServeError::WorkerPanic(panic_msg(p))),
            None => Ok(()),
        };
        self.shared.mark_stopped();
        result
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if let Some(h) = self.accept.take() {
            self.shared.begin_drain();
            let _ = h.join();
            self.shared.mark_stopped();
        }
    }
}

/// Build the dispatcher a network-capable thread uses to move request jobs
/// to payload threads. Inline-payload models get none; paired wiring gets a
/// single-target dispatcher (network thread i feeds payload thread i only);
/// everything else round-robins across all payload queues.
fn make_dispatcher(
    topology: &Topology,
    capable_idx: usize,
    payload_queues: &[Arc<JobQueue>],
) -> Option<Dispatcher> {
    if topology.payload_inline() {
        return None;
    }
    if topology.paired {
        Some(Dispatcher::new(vec![Arc::clone(&payload_queues[capable_idx])]))
    } else {
        Some(Dispatcher::new(payload_queues.to_vec()))
    }
}

/// Bind the endpoint, spawn the model's threads, and wait until every one
/// of them is registered and polling.
pub fn serve(config: ServerConfig) -> Result<ServerHandle, ServeError> {
    let topology = build_topology(config.model)?;
    let store = Store::new(config.store)?;
    let listener = Listener::bind(&config.endpoint).map_err(|source| ServeError::Bind {
        endpoint: config.endpoint.to_string(),
        source,
    })?;
    let endpoint = listener.local_endpoint()?;

    let shared = Arc::new(Shared::new(config, topology, store));
    shared
        .payloads_alive
        .store(topology.n_payload_threads, std::sync::atomic::Ordering::SeqCst);
    shared
        .nets_reading
        .store(topology.net_capable_count(), std::sync::atomic::Ordering::SeqCst);

    // One event loop per thread; queue pushes wake the consuming loop.
    let (accept_ev, accept_waker) = EventLoop::new()?;
    let mut net_evs: Vec<(EventLoop, LoopWaker)> = Vec::new();
    for _ in 0..topology.n_net_threads {
        net_evs.push(EventLoop::new()?);
    }
    let mut payload_evs: Vec<(EventLoop, LoopWaker)> = Vec::new();
    for _ in 0..topology.n_payload_threads {
        payload_evs.push(EventLoop::new()?);
    }

    // Inboxes for the network-capable threads (index = owner). When the
    // accept thread is the network-capable one, its inbox is slot 0.
    let net_inboxes: Vec<Arc<JobQueue>> = if topology.accept_handles_network {
        vec![Arc::new(JobQueue::new(Some(accept_waker.clone())))]
    } else {
        net_evs
            .iter()
            .map(|(_, w)| Arc::new(JobQueue::new(Some(w.clone()))))
            .collect()
    };
    let payload_queues: Vec<Arc<JobQueue>> = payload_evs
        .iter()
        .map(|(_, w)| Arc::new(JobQueue::new(Some(w.clone()))))
        .collect();

    {
        let mut wakers = shared.all_wakers.lock().unwrap();
        wakers.push(accept_waker.clone());
        for (_, w) in &net_evs {
            wakers.push(w.clone());
        }
        for (_, w) in &payload_evs {
            wakers.push(w.clone());
        }
    }

    let (ready_tx, ready_rx) = mpsc::channel::<()>();
    let mut children: Vec<JoinHandle<()>> = Vec::new();

    for (idx, (ev, _)) in payload_evs.into_iter().enumerate() {
        let ctx = PayloadLoopCtx {
            shared: Arc::clone(&shared),
            ev,
            queue: Arc::clone(&payload_queues[idx]),
            payload_idx: idx,
            net_inboxes: net_inboxes.clone(),
            slot: 1 + topology.n_net_threads + idx,
            ready: ready_tx.clone(),
        };
        let h = std::thread::Builder::new()
            .name(format!("kv-payload-{idx}"))
            .spawn(move || run_payload_loop(ctx))?;
        children.push(h);
    }

    for (idx, (ev, _)) in net_evs.into_iter().enumerate() {
        let ctx = NetLoopCtx {
            shared: Arc::clone(&shared),
            ev,
            inbox: Arc::clone(&net_inboxes[idx]),
            inboxes: net_inboxes.clone(),
            capable_idx: Some(idx),
            dispatcher: make_dispatcher(&topology, idx, &payload_queues),
            listener: None,
            children: Vec::new(),
            slot: 1 + idx,
            ready: ready_tx.clone(),
        };
        let h = std::thread::Builder::new()
            .name(format!("kv-net-{idx}"))
            .spawn(move || run_net_loop(ctx))?;
        children.push(h);
    }

    let accept_ctx = NetLoopCtx {
        shared: Arc::clone(&shared),
        ev: accept_ev,
        inbox: if topology.accept_handles_network {
            Arc::clone(&net_inboxes[0])
        } else {
            // Non-capable accept threads still poll an inbox; it just never
            // receives anything.
            Arc::new(JobQueue::new(Some(accept_waker.clone())))
        },
        inboxes: net_inboxes.clone(),
        capable_idx: if topology.accept_handles_network { Some(0) } else { None },
        dispatcher: if topology.accept_handles_network {
            make_dispatcher(&topology, 0, &payload_queues)
        } else {
            None
        },
        listener: Some(listener),
        children,
        slot: 0,
        ready: ready_tx,
    };
    let accept = std::thread::Builder::new()
        .name("kv-accept".to_string())
        .spawn(move || run_net_loop(accept_ctx))?;

    let handle = ServerHandle {
        shared: Arc::clone(&shared),
        accept: Some(accept),
        endpoint,
    };

    // Readiness barrier: every thread has registered in the census and is
    // about to poll. After this, a census read is complete and the endpoint
    // accepts connections.
    let per_thread = Duration::from_secs(5);
    for _ in 0..topology.total_threads() {
        if ready_rx.recv_timeout(per_thread).is_err() {
            // Handle drop triggers drain + join of whatever did start.
            drop(handle);
            return Err(ServeError::StartupTimeout(per_thread));
        }
    }
    Ok(handle)
}
