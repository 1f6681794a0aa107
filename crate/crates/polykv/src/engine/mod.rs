//! Threading models, job dispatch, and the server engine.
//!
//! The engine splits serving into three task classes and maps them onto
//! threads according to the selected model:
//!
//! - *accept*: accept new connections, expire idle ones. Always one thread.
//! - *network*: readiness polling, draining sockets, extracting validated
//!   raw frames, finishing interrupted writes.
//! - *payload*: parsing a raw frame, running the store operation, encoding
//!   and sending the response.
//!
//! | model    | network class runs on      | payload class runs on          |
//! |----------|----------------------------|--------------------------------|
//! | `sped`   | the accept thread          | the accept thread              |
//! | `seda`   | N1 network threads         | N2 payload threads, round-robin|
//! | `seda-s` | N network threads          | N payload threads, paired 1:1  |
//! | `amped`  | accept thread or 1 thread  | N payload threads, round-robin |
//! | `symped` | N network threads          | inline in each network thread  |
//!
//! Job movement between classes goes through multi-producer queues with
//! batched transfer: a producer stages jobs locally during one
//! event-handling pass and pushes each target's batch under a single lock
//! acquisition. When a payload thread's response write fills the socket, the
//! unsent remainder is queued on the connection and ownership of finishing
//! it hands back to the connection's network thread.

mod loops;
pub mod queue;
mod serve;

pub use queue::{Dispatcher, Job, JobQueue, PayloadGate, QueueClosed};
pub use serve::{serve, ServeError, ServerHandle};

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, AtomicU8, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use crate::netio::{Clock, Conn, Endpoint, LoopWaker};
use crate::store::{Store, StoreConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Sped,
    Seda,
    SedaS,
    Amped,
    Symped,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Sped,
        ModelKind::Seda,
        ModelKind::SedaS,
        ModelKind::Amped,
        ModelKind::Symped,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Sped => "sped",
            ModelKind::Seda => "seda",
            ModelKind::SedaS => "seda-s",
            ModelKind::Amped => "amped",
            ModelKind::Symped => "symped",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<ModelKind, ConfigError> {
        match s {
            "sped" => Ok(ModelKind::Sped),
            "seda" => Ok(ModelKind::Seda),
            "seda-s" | "seda_s" => Ok(ModelKind::SedaS),
            "amped" => Ok(ModelKind::Amped),
            "symped" => Ok(ModelKind::Symped),
            other => Err(ConfigError::UnknownModel(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown model {0:?}; valid models: sped, seda, seda-s, amped, symped")]
    UnknownModel(String),
    #[error("sped runs both code paths in the connection-handling thread: network and payload thread counts must be 0 (got {net} and {payload})")]
    SpedHasNoWorkers { net: usize, payload: usize },
    #[error("seda needs at least one network thread and one payload thread (got {net} and {payload})")]
    SedaNeedsBothStages { net: usize, payload: usize },
    #[error("seda-s pairs each network thread with exactly one payload thread: counts must match (got {net} and {payload})")]
    SedaSUnpaired { net: usize, payload: usize },
    #[error("seda-s needs at least one network/payload pair")]
    SedaSNeedsPair,
    #[error("amped uses at most one dedicated network thread; with 0, the accept thread runs the network code path (got {0})")]
    AmpedTooManyNet(usize),
    #[error("amped needs at least one payload thread")]
    AmpedNeedsPayload,
    #[error("symped needs at least one network thread")]
    SympedNeedsNet,
    #[error("symped runs the payload code path inside its network threads: payload thread count must be 0 (got {0})")]
    SympedHasNoPayload(usize),
}

/// A fully specified threading model: the kind plus its thread counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub n_network: usize,
    pub n_payload: usize,
}

impl ModelConfig {
    pub fn sped() -> ModelConfig {
        ModelConfig { kind: ModelKind::Sped, n_network: 0, n_payload: 0 }
    }

    pub fn seda(n_network: usize, n_payload: usize) -> ModelConfig {
        ModelConfig { kind: ModelKind::Seda, n_network, n_payload }
    }

    pub fn seda_s(pairs: usize) -> ModelConfig {
        ModelConfig { kind: ModelKind::SedaS, n_network: pairs, n_payload: pairs }
    }

    pub fn amped(n_network: usize, n_payload: usize) -> ModelConfig {
        ModelConfig { kind: ModelKind::Amped, n_network, n_payload }
    }

    pub fn symped(n_network: usize) -> ModelConfig {
        ModelConfig { kind: ModelKind::Symped, n_network, n_payload: 0 }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        match self.kind {
            ModelKind::Sped => {
                if self.n_network != 0 || self.n_payload != 0 {
                    return Err(ConfigError::SpedHasNoWorkers {
                        net: self.n_network,
                        payload: self.n_payload,
                    });
                }
            }
            ModelKind::Seda => {
                if self.n_network == 0 || self.n_payload == 0 {
                    return Err(ConfigError::SedaNeedsBothStages {
                        net: self.n_network,
                        payload: self.n_payload,
                    });
                }
            }
            ModelKind::SedaS => {
                if self.n_network == 0 && self.n_payload == 0 {
                    return Err(ConfigError::SedaSNeedsPair);
                }
                if self.n_network != self.n_payload {
                    return Err(ConfigError::SedaSUnpaired {
                        net: self.n_network,
                        payload: self.n_payload,
                    });
                }
            }
            ModelKind::Amped => {
                if self.n_network > 1 {
                    return Err(ConfigError::AmpedTooManyNet(self.n_network));
                }
                if self.n_payload == 0 {
                    return Err(ConfigError::AmpedNeedsPayload);
                }
            }
            ModelKind::Symped => {
                if self.n_network == 0 {
                    return Err(ConfigError::SympedNeedsNet);
                }
                if self.n_payload != 0 {
                    return Err(ConfigError::SympedHasNoPayload(self.n_payload));
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} net={} payload={}", self.kind, self.n_network, self.n_payload)
    }
}

/// The concrete thread plan derived from a validated [`ModelConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Topology {
    pub config: ModelConfig,
    /// The accept thread also runs the network (and possibly payload) code
    /// path: sped always, amped when it has no dedicated network thread.
    pub accept_handles_network: bool,
    /// Dedicated network threads.
    pub n_net_threads: usize,
    /// Dedicated payload threads; 0 means payload work runs inline in
    /// whichever thread extracted the frame.
    pub n_payload_threads: usize,
    /// seda-s: network thread i feeds payload thread i and nobody else.
    pub paired: bool,
}

impl Topology {
    /// Threads that own connections and run the network code path.
    pub fn net_capable_count(&self) -> usize {
        if self.accept_handles_network {
            1
        } else {
            self.n_net_threads
        }
    }

    pub fn payload_inline(&self) -> bool {
        self.n_payload_threads == 0
    }

    /// Every thread the server runs, accept included.
    pub fn total_threads(&self) -> usize {
        1 + self.n_net_threads + self.n_payload_threads
    }

    pub fn describe(&self) -> String {
        format!(
            "model={} accept=1 net={} payload={} total={}",
            self.config.kind,
            self.n_net_threads,
            self.n_payload_threads,
            self.total_threads()
        )
    }
}

pub fn build_topology(config: ModelConfig) -> Result<Topology, ConfigError> {
    config.validate()?;
    let t = match config.kind {
        ModelKind::Sped => Topology {
            config,
            accept_handles_network: true,
            n_net_threads: 0,
            n_payload_threads: 0,
            paired: false,
        },
        ModelKind::Seda => Topology {
            config,
            accept_handles_network: false,
            n_net_threads: config.n_network,
            n_payload_threads: config.n_payload,
            paired: false,
        },
        ModelKind::SedaS => Topology {
            config,
            accept_handles_network: false,
            n_net_threads: config.n_network,
            n_payload_threads: config.n_payload,
            paired: true,
        },
        ModelKind::Amped => Topology {
            config,
            accept_handles_network: config.n_network == 0,
            n_net_threads: config.n_network,
            n_payload_threads: config.n_payload,
            paired: false,
        },
        ModelKind::Symped => Topology {
            config,
            accept_handles_network: false,
            n_net_threads: config.n_network,
            n_payload_threads: 0,
            paired: false,
        },
    };
    Ok(t)
}

/// Which task class a thread runs; used for the thread census.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ThreadRole {
    Accept,
    Network,
    Payload,
}

/// Live thread counts, as registered by the threads themselves at startup.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ThreadCensus {
    pub accept: usize,
    pub network: usize,
    pub payload: usize,
}

impl ThreadCensus {
    pub fn total(&self) -> usize {
        self.accept + self.network + self.payload
    }
}

/// Monotonic event counters, updated lock-free by every engine thread.
#[derive(Debug)]
pub struct EngineCounters {
    pub accepted: AtomicU64,
    pub closed: AtomicU64,
    pub closed_idle: AtomicU64,
    pub closed_violation: AtomicU64,
    pub closed_peer: AtomicU64,
    /// Validated raw frames extracted by the network code path.
    pub frames_extracted: AtomicU64,
    /// Operations completed by the payload code path (one response each).
    pub requests_executed: AtomicU64,
    pub responses_enqueued: AtomicU64,
    /// Request jobs transferred network -> payload queues.
    pub jobs_dispatched: AtomicU64,
    /// Request jobs executed inline in a network-capable thread.
    pub jobs_inline: AtomicU64,
    /// Jobs dropped because their connection closed first.
    pub jobs_discarded: AtomicU64,
    /// Batches pushed network -> payload queues.
    pub dispatch_batches: AtomicU64,
    /// Unsent-remainder handoffs payload -> owner network thread.
    pub write_handoffs: AtomicU64,
    /// Bytes flushed by owner threads (writable events and handoffs).
    pub owner_drained_bytes: AtomicU64,
    /// consumed[producer][payload_thread]: request jobs executed on each
    /// payload thread, keyed by the network-capable thread that produced
    /// them. Empty when payload runs inline.
    consumed: Vec<Vec<AtomicU64>>,
    /// Event-handling passes per thread slot (accept, nets..., payloads...).
    loop_passes: Vec<AtomicU64>,
}

impl EngineCounters {
    pub fn new(topology: &Topology) -> EngineCounters {
        let producers = topology.net_capable_count();
        let consumers = topology.n_payload_threads;
        EngineCounters {
            accepted: AtomicU64::new(0),
            closed: AtomicU64::new(0),
            closed_idle: AtomicU64::new(0),
            closed_violation: AtomicU64::new(0),
            closed_peer: AtomicU64::new(0),
            frames_extracted: AtomicU64::new(0),
            requests_executed: AtomicU64::new(0),
            responses_enqueued: AtomicU64::new(0),
            jobs_dispatched: AtomicU64::new(0),
            jobs_inline: AtomicU64::new(0),
            jobs_discarded: AtomicU64::new(0),
            dispatch_batches: AtomicU64::new(0),
            write_handoffs: AtomicU64::new(0),
            owner_drained_bytes: AtomicU64::new(0),
            consumed: (0..producers)
                .map(|_| (0..consumers).map(|_| AtomicU64::new(0)).collect())
                .collect(),
            loop_passes: (0..topology.total_threads()).map(|_| AtomicU64::new(0)).collect(),
        }
    }

    pub fn record_consumed(&self, producer: usize, payload_thread: usize) {
        self.consumed[producer][payload_thread].fetch_add(1, Ordering::Relaxed);
    }

    pub fn record_loop_pass(&self, slot: usize) {
        self.loop_passes[slot].fetch_add(1, Ordering::Relaxed);
    }

    /// Producer-by-consumer matrix of executed request jobs.
    pub fn consumed_matrix(&self) -> Vec<Vec<u64>> {
        self.consumed
            .iter()
            .map(|row| row.iter().map(|c| c.load(Ordering::SeqCst)).collect())
            .collect()
    }

    pub fn loop_passes(&self) -> Vec<u64> {
        self.loop_passes.iter().map(|c| c.load(Ordering::SeqCst)).collect()
    }
}

/// Server-wide run state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum RunState {
    Running,
    Draining,
    Stopped,
}

/// Everything the engine threads share.
pub(crate) struct Shared {
    pub config: ServerConfig,
    pub topology: Topology,
    pub store: Store,
    pub counters: EngineCounters,
    pub clock: Clock,
    state: AtomicU8,
    pub drain_deadline_ms: AtomicU64,
    pub conns: Mutex<HashMap<u64, Arc<ServerConn>>>,
    pub registry: Mutex<Vec<(ThreadRole, String)>>,
    pub payloads_alive: AtomicUsize,
    /// Network-capable threads that may still produce request jobs. Each one
    /// decrements exactly once, after its final dispatch flush, when it
    /// observes the drain; payload threads may only exit once this hits zero
    /// and their queue is empty (otherwise a last-pass batch could strand).
    pub nets_reading: AtomicUsize,
    /// Every loop's waker, for shutdown broadcast.
    pub all_wakers: Mutex<Vec<LoopWaker>>,
}

impl Shared {
    pub fn state(&self) -> RunState {
        match self.state.load(Ordering::SeqCst) {
            0 => RunState::Running,
            1 => RunState::Draining,
            _ => RunState::Stopped,
        }
    }

    pub fn is_running(&self) -> bool {
        self.state.load(Ordering::SeqCst) == 0
    }

    /// First call wins; starts the drain clock and wakes every loop.
    pub fn begin_drain(&self) {
        if self
            .state
            .compare_exchange(0, 1, Ordering::SeqCst, Ordering::SeqCst)
            .is_ok()
        {
            let deadline = self.clock.now_ms() + self.config.shutdown_grace.as_millis() as u64;
            self.drain_deadline_ms.store(deadline, Ordering::SeqCst);
            for w in self.all_wakers.lock().unwrap().iter() {
                w.wake();
            }
        }
    }

    pub fn mark_stopped(&self) {
        self.state.store(2, Ordering::SeqCst);
    }

    pub(crate) fn new(config: ServerConfig, topology: Topology, store: Store) -> Shared {
        Shared {
            counters: EngineCounters::new(&topology),
            topology,
            store,
            clock: Clock::new(),
            state: AtomicU8::new(0),
            drain_deadline_ms: AtomicU64::new(u64::MAX),
            conns: Mutex::new(HashMap::new()),
            registry: Mutex::new(Vec::new()),
            payloads_alive: AtomicUsize::new(0),
            nets_reading: AtomicUsize::new(0),
            all_wakers: Mutex::new(Vec::new()),
            config,
        }
    }

    pub fn register_thread(&self, role: ThreadRole, name: String) {
        self.registry.lock().unwrap().push((role, name));
    }

    pub fn census(&self) -> ThreadCensus {
        let reg = self.registry.lock().unwrap();
        let mut census = ThreadCensus { accept: 0, network: 0, payload: 0 };
        for (role, _) in reg.iter() {
            match role {
                ThreadRole::Accept => census.accept += 1,
                ThreadRole::Network => census.network += 1,
                ThreadRole::Payload => census.payload += 1,
            }
        }
        census
    }
}

/// One connection as the engine sees it: the I/O state plus the ordering
/// gate that keeps payload execution per-connection-sequential even when
/// jobs from one connection land on different payload threads.
pub struct ServerConn {
    pub io: Conn,
    pub gate: Mutex<PayloadGate>,
}

/// Full server configuration.
#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub model: ModelConfig,
    pub endpoint: Endpoint,
    pub store: StoreConfig,
    /// Close connections quiet for this long; zero disables expiry.
    pub idle_timeout: Duration,
    /// How long shutdown waits for in-flight work before forcing closes.
    pub shutdown_grace: Duration,
    /// Shrink each accepted socket's kernel send buffer (testing hook for
    /// the write-overflow handoff path).
    pub send_buffer: Option<usize>,
}

impl ServerConfig {
    pub fn new(model: ModelConfig, endpoint: Endpoint) -> ServerConfig {
        ServerConfig {
            model,
            endpoint,
            store: StoreConfig::default(),
            idle_timeout: Duration::from_secs(60),
            shutdown_grace: Duration::from_millis(700),
            send_buffer: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_parsing() {
        assert_eq!("sped".parse::<ModelKind>().unwrap(), ModelKind::Sped);
        assert_eq!("seda-s".parse::<ModelKind>().unwrap(), ModelKind::SedaS);
        assert!(matches!(
            "epoll".parse::<ModelKind>(),
            Err(ConfigError::UnknownModel(_))
        ));
    }

    #[test]
    fn thread_count_rules_per_model() {
        // Valid configurations and their total thread counts.
        let cases = [
            (ModelConfig::sped(), 1),
            (ModelConfig::seda(1, 1), 3),
            (ModelConfig::seda(2, 4), 7),
            (ModelConfig::seda_s(3), 7),
            (ModelConfig::amped(0, 2), 3),
            (ModelConfig::amped(1, 2), 4),
            (ModelConfig::symped(1), 2),
            (ModelConfig::symped(4), 5),
        ];
        for (cfg, total) in cases {
            let t = build_topology(cfg).unwrap();
            assert_eq!(t.total_threads(), total, "{cfg}");
        }

        // Each model's structural rules reject bad counts.
        assert!(matches!(
            build_topology(ModelConfig { kind: ModelKind::Sped, n_network: 1, n_payload: 0 }),
            Err(ConfigError::SpedHasNoWorkers { .. })
        ));
        assert!(matches!(
            build_topology(ModelConfig { kind: ModelKind::Seda, n_network: 2, n_payload: 0 }),
            Err(ConfigError::SedaNeedsBothStages { .. })
        ));
        assert!(matches!(
            build_topology(ModelConfig { kind: ModelKind::SedaS, n_network: 2, n_payload: 3 }),
            Err(ConfigError::SedaSUnpaired { .. })
        ));
        assert!(matches!(
            build_topology(ModelConfig { kind: ModelKind::SedaS, n_network: 0, n_payload: 0 }),
            Err(ConfigError::SedaSNeedsPair)
        ));
        assert!(matches!(
            build_topology(ModelConfig { kind: ModelKind::Amped, n_network: 2, n_payload: 1 }),
            Err(ConfigError::AmpedTooManyNet(2))
        ));
        assert!(matches!(
            build_topology(ModelConfig { kind: ModelKind::Amped, n_network: 1, n_payload: 0 }),
            Err(ConfigError::AmpedNeedsPayload)
        ));
        assert!(matches!(
            build_topology(ModelConfig { kind: ModelKind::Symped, n_network: 0, n_payload: 0 }),
            Err(ConfigError::SympedNeedsNet)
        ));
        assert!(matches!(
            build_topology(ModelConfig { kind: ModelKind::Symped, n_network: 2, n_payload: 1 }),
            Err(ConfigError::SympedHasNoPayload(1))
        ));
    }

    #[test]
    fn topology_structure() {
        let sped = build_topology(ModelConfig::sped()).unwrap();
        assert!(sped.accept_handles_network);
        assert!(sped.payload_inline());
        assert_eq!(sped.net_capable_count(), 1);

        let seda = build_topology(ModelConfig::seda(2, 4)).unwrap();
        assert!(!seda.accept_handles_network);
        assert!(!seda.payload_inline());
        assert!(!seda.paired);
        assert_eq!(seda.net_capable_count(), 2);

        let sedas = build_topology(ModelConfig::seda_s(3)).unwrap();
        assert!(sedas.paired);

        let amped0 = build_topology(ModelConfig::amped(0, 3)).unwrap();
        assert!(amped0.accept_handles_network);
        assert_eq!(amped0.net_capable_count(), 1);
        assert!(!amped0.payload_inline());

        let symped = build_topology(ModelConfig::symped(3)).unwrap();
        assert!(symped.payload_inline());
        assert_eq!(symped.net_capable_count(), 3);
    }

    #[test]
    fn describe_reads_like_a_census_line() {
        let t = build_topology(ModelConfig::seda(2, 4)).unwrap();
        assert_eq!(t.describe(), "model=seda accept=1 net=2 payload=4 total=7");
    }
}
