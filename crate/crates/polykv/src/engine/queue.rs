//! Job queues and dispatch between task classes.
//!
//! Queue traffic is batched to coalesce locking: a producer stages jobs in
//! thread-local buckets during one event-handling pass, then moves each
//! nonempty bucket into its target queue under a single lock acquisition
//! ([`JobQueue::push_batch`]). Consumers do the mirror image and take the
//! whole queue in one acquisition ([`JobQueue::drain_into`]). The per-queue
//! counters exist so tests can verify that lock traffic scales with batches,
//! not with jobs.
//!
//! Request jobs for one connection can land on different payload threads
//! (round-robin is per-job). Response order is still per-connection FIFO:
//! each request carries a connection-local sequence number and executes
//! through the connection's [`PayloadGate`], which parks out-of-order
//! arrivals instead of blocking the thread.

use std::collections::{BTreeMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use super::ServerConn;
use crate::netio::LoopWaker;
use crate::protocol::RawRequest;

/// Why a connection is being closed by a routed job.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloseReason {
    Idle,
}

/// Work item moved between engine threads.
pub enum Job {
    /// A validated raw request frame, to be parsed and executed.
    Request {
        conn: Arc<ServerConn>,
        /// Connection-local sequence number (response order).
        seq: u64,
        raw: RawRequest,
        /// Index of the producing network-capable thread.
        producer: usize,
    },
    /// A freshly accepted connection for the owner to register.
    NewConn { conn: Arc<ServerConn> },
    /// A payload thread left unsent response bytes on the connection; the
    /// owner must finish the write.
    Handoff { conn: Arc<ServerConn> },
    /// Close request routed to the owner (e.g. idle expiry from accept).
    Close { conn: Arc<ServerConn>, reason: CloseReason },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("job queue is closed")]
pub struct QueueClosed;

struct QueueInner<T> {
    jobs: VecDeque<T>,
    closed: bool,
}

/// Multi-producer single-consumer job queue with batch transfer and a waker
/// tied to the consuming loop.
pub struct JobQueue<T = Job> {
    inner: Mutex<QueueInner<T>>,
    waker: Option<LoopWaker>,
    /// Lock acquisitions by producers (one per push or push_batch call).
    pub producer_acquisitions: AtomicU64,
    /// Batches pushed (same as producer_acquisitions for batch-only use).
    pub batches_in: AtomicU64,
    /// Individual jobs pushed.
    pub jobs_in: AtomicU64,
    /// Lock acquisitions by the consumer.
    pub consumer_acquisitions: AtomicU64,
}

impl<T> JobQueue<T> {
    pub fn new(waker: Option<LoopWaker>) -> JobQueue<T> {
        JobQueue {
            inner: Mutex::new(QueueInner {
                jobs: VecDeque::new(),
                closed: false,
            }),
            waker,
            producer_acquisitions: AtomicU64::new(0),
            batches_in: AtomicU64::new(0),
            jobs_in: AtomicU64::new(0),
            consumer_acquisitions: AtomicU64::new(0),
        }
    }

    fn wake(&self) {
        if let Some(w) = &self.waker {
            w.wake();
        }
    }

    /// Push one job (single lock acquisition).
    pub fn push(&self, job: T) -> Result<(), QueueClosed> {
        {
            let mut inner = self.inner.lock().unwrap();
            self.producer_acquisitions.fetch_add(1, Ordering::Relaxed);
            if inner.closed {
                return Err(QueueClosed);
            }
            inner.jobs.push_back(job);
        }
        self.jobs_in.fetch_add(1, Ordering::Relaxed);
        self.batches_in.fetch_add(1, Ordering::Relaxed);
        self.wake();
        Ok(())
    }

    /// Move an entire staged batch in under one lock acquisition. On success
    /// the batch vector comes back empty; on a closed queue it is left
    /// intact so the caller can dispose of the jobs.
    pub fn push_batch(&self, batch: &mut Vec<T>) -> Result<(), QueueClosed> {
        if batch.is_empty() {
            return Ok(());
        }
        let n = batch.len() as u64;
        {
            let mut inner = self.inner.lock().unwrap();
            self.producer_acquisitions.fetch_add(1, Ordering::Relaxed);
            if inner.closed {
                return Err(QueueClosed);
            }
            inner.jobs.extend(batch.drain(..));
        }
        self.jobs_in.fetch_add(n, Ordering::Relaxed);
        self.batches_in.fetch_add(1, Ordering::Relaxed);
        self.wake();
        Ok(())
    }

    /// Take everything queued, appending to `out`; one lock acquisition.
    pub fn drain_into(&self, out: &mut Vec<T>) -> usize {
        let mut inner = self.inner.lock().unwrap();
        self.consumer_acquisitions.fetch_add(1, Ordering::Relaxed);
        let n = inner.jobs.len();
        out.extend(inner.jobs.drain(..));
        n
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().jobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reject future pushes; queued jobs remain drainable.
    pub fn close(&self) {
        self.inner.lock().unwrap().closed = true;
        self.wake();
    }
}

/// Per-producer round-robin dispatcher with local batch staging.
///
/// `stage` assigns each job to the next target in strict rotation (fairness
/// is per producer: over any window, per-target counts differ by at most
/// one). `flush` moves every nonempty bucket with one `push_batch` each.
pub struct Dispatcher<T = Job> {
    targets: Vec<Arc<JobQueue<T>>>,
    rr_next: usize,
    buckets: Vec<Vec<T>>,
    staged: usize,
}

/// Result of one dispatcher flush.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct FlushStats {
    pub jobs: usize,
    pub batches: usize,
}

impl<T> Dispatcher<T> {
    pub fn new(targets: Vec<Arc<JobQueue<T>>>) -> Dispatcher<T> {
        let buckets = targets.iter().map(|_| Vec::new()).collect();
        Dispatcher {
            targets,
            rr_next: 0,
            buckets,
            staged: 0,
        }
    }

    pub fn target_count(&self) -> usize {
        self.targets.len()
    }

    /// Stage a job for the next target in rotation; returns the target index.
    pub fn stage(&mut self, job: T) -> usize {
        let idx = self.rr_next;
        self.rr_next = (self.rr_next + 1) % self.targets.len();
        self.buckets[idx].push(job);
        self.staged += 1;
        idx
    }

    /// Stage for one specific target (paired wiring).
    pub fn stage_to(&mut self, idx: usize, job: T) {
        self.buckets[idx].push(job);
        self.staged += 1;
    }

    pub fn staged(&self) -> usize {
        self.staged
    }

    /// Push every nonempty bucket to its queue, one batch per target.
    /// Jobs bound for a closed queue come back for the caller to dispose of.
    pub fn flush(&mut self) -> (FlushStats, Vec<T>) {
        let mut stats = FlushStats::default();
        let mut stranded = Vec::new();
        if self.staged == 0 {
            return (stats, stranded);
        }
        for (idx, bucket) in self.buckets.iter_mut().enumerate() {
            if bucket.is_empty() {
                continue;
            }
            stats.jobs += bucket.len();
            match self.targets[idx].push_batch(bucket) {
                Ok(()) => stats.batches += 1,
                Err(QueueClosed) => {
                    stats.jobs -= bucket.len();
                    stranded.append(bucket);
                }
            }
        }
        self.staged = 0;
        (stats, stranded)
    }
}

/// Per-connection execution gate: admits request jobs strictly in sequence
/// order and never blocks a thread.
///
/// A job whose sequence number is not yet due — or whose connection is
/// already executing — parks here. The thread that finishes the current job
/// chains directly into any parked successor, so parked work is always
/// completed by whichever thread runs its predecessor. (A blocking design
/// deadlocks: two payload threads can each hold the job the other must wait
/// for. Parking sidesteps that by never holding two jobs at once.)
pub struct PayloadGate {
    next_seq: u64,
    running: bool,
    parked: BTreeMap<u64, (RawRequest, usize)>,
}

impl Default for PayloadGate {
    fn default() -> Self {
        PayloadGate {
            next_seq: 0,
            running: false,
            parked: BTreeMap::new(),
        }
    }
}

impl PayloadGate {
    /// Try to admit `seq` for execution. Returns the job back when the
    /// caller should run it now; otherwise the job is parked and a
    /// predecessor's executor will chain into it. Check-and-park is atomic
    /// under the gate lock, so a job can never be both missed and parked.
    pub(crate) fn admit(
        &mut self,
        seq: u64,
        raw: RawRequest,
        producer: usize,
    ) -> Option<(RawRequest, usize)> {
        if self.running || seq != self.next_seq {
            self.parked.insert(seq, (raw, producer));
            None
        } else {
            self.running = true;
            Some((raw, producer))
        }
    }

    /// Finish the current job; returns the successor if it is already
    /// parked, otherwise releases the gate.
    pub(crate) fn finish(&mut self) -> Option<(RawRequest, usize)> {
        debug_assert!(self.running);
        self.next_seq += 1;
        match self.parked.remove(&self.next_seq) {
            Some(job) => Some(job),
            None => {
                self.running = false;
                None
            }
        }
    }

    #[cfg(test)]
    pub(crate) fn parked_len(&self) -> usize {
        self.parked.len()
    }
}
