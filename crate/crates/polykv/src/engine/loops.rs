//! The engine's thread bodies: the network-capable loop (which doubles as
//! the accept loop) and the payload loop, plus the payload execution path
//! they share.
//!
//! Shutdown is a two-phase drain. Entering `Draining`: the accept thread
//! closes the listener; network loops stop reading request bytes, flush the
//! staged dispatch batches of their final read pass, and announce quiescence
//! (`nets_reading`); payload loops finish their queues and announce exit
//! (`payloads_alive`); network loops then finish pending/handoff writes and
//! tear their connections down. A drain deadline bounds the whole phase so a
//! peer that stops reading cannot wedge shutdown.

use std::collections::HashMap;
use std::sync::mpsc::Sender;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use super::queue::{CloseReason, Dispatcher, Job, JobQueue};
use super::{RunState, ServerConn, Shared, ThreadRole};
use crate::netio::{
    Conn, EventLoop, Listener, LoopEvent, ReadStatus, LISTEN_TOKEN, WAKE_TOKEN,
};
use crate::protocol::{encode_response, RawRequest, RequestFrame, ResponseFrame, WireLimits};
use crate::store::{DeleteOutcome, Store, StoreError};

/// Why a connection is being torn down (drives the close counters).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CloseKind {
    Peer,
    Violation,
    Idle,
    Shutdown,
}

pub(crate) fn panic_msg(payload: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "unknown panic".to_string()
    }
}

/// Where a request job is being executed; decides how a short response
/// write is finished.
pub(crate) enum ExecEnv<'a> {
    /// Inside the owner network thread: it can arm writable interest itself.
    Inline { ev: &'a EventLoop, token: usize },
    /// On a dedicated payload thread: a remainder is handed back to the
    /// owner's inbox.
    Payload {
        payload_idx: usize,
        net_inboxes: &'a [Arc<JobQueue>],
    },
}

fn apply_to_store(store: &Store, frame: RequestFrame) -> ResponseFrame {
    // Wire validation runs before jobs are created, so store-level rejections
    // here mean the store was configured stricter than the wire limits.
    fn store_err(e: StoreError) -> ResponseFrame {
        match e {
            StoreError::EmptyKey | StoreError::KeyTooLong(_) | StoreError::ValueTooLarge { .. } => {
                ResponseFrame::BadRequest
            }
            StoreError::BadBucketCount(_) => ResponseFrame::ServerError,
        }
    }
    match frame {
        RequestFrame::Get { key } => match store.get(&key) {
            Ok(Some(value)) => ResponseFrame::Ok { value },
            Ok(None) => ResponseFrame::NotFound,
            Err(e) => store_err(e),
        },
        RequestFrame::Put { key, value } => match store.put(&key, &value) {
            Ok(_) => ResponseFrame::Ok { value: Vec::new() },
            Err(e) => store_err(e),
        },
        RequestFrame::Delete { key } => match store.delete(&key) {
            Ok(DeleteOutcome::Deleted) => ResponseFrame::Ok { value: Vec::new() },
            Ok(DeleteOutcome::NotFound) => ResponseFrame::NotFound,
            Err(e) => store_err(e),
        },
        RequestFrame::Ping => ResponseFrame::Ok { value: Vec::new() },
    }
}

/// Parse, execute, respond — one request job.
fn run_one(shared: &Shared, conn: &Arc<ServerConn>, raw: &RawRequest, producer: usize, env: &ExecEnv) {
    let counters = &shared.counters;
    if conn.io.is_closing() {
        counters.jobs_discarded.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        return;
    }
    if let ExecEnv::Payload { payload_idx, .. } = env {
        counters.record_consumed(producer, *payload_idx);
    }
    let response = apply_to_store(&shared.store, raw.parse());
    counters
        .requests_executed
        .fetch_add(1, std::sync::atomic::Ordering::Relaxed);
    let bytes = encode_response(&response).expect("store caps values far below the u32 wire limit");
    let inline = matches!(env, ExecEnv::Inline { .. });
    match conn.io.write_or_queue(&bytes, inline) {
        Ok(crate::netio::WriteOutcome::Sent) => {
            counters
                .responses_enqueued
                .fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        }
        Ok(crate::netio::WriteOutcome::Queued { arm_now, .. }) => {
            counters
                .responses_enqueued
                .fetch_add(1, std::sync::atomic::Ordering::Relaxed);
            match env {
                ExecEnv::Inline { ev, token } => {
                    if arm_now {
                        let _ = ev.reregister(conn.io.raw_fd(), *token, true, true);
                    }
                }
                ExecEnv::Payload { net_inboxes, .. } => {
                    counters
                        .write_handoffs
                        .fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    let owner = conn.io.owner;
                    if net_inboxes[owner]
                        .push(Job::Handoff { conn: Arc::clone(conn) })
                        .is_err()
                    {
                        // Owner loop already gone (late shutdown); the drain
                        // deadline reaps the connection.
                        conn.io.set_closing();
                    }
                }
            }
        }
        Err(_) => {
            // Peer vanished mid-write. The owner sees the hangup event and
            // tears the connection down; discard further jobs meanwhile.
            conn.io.set_closing();
        }
    }
}

/// Execute a request job under the connection's ordering gate, chaining
/// into any parked successors this execution unblocks.
pub(crate) fn execute_ordered(
    shared: &Shared,
    conn: &Arc<ServerConn>,
    seq: u64,
    raw: RawRequest,
    producer: usize,
    env: &ExecEnv,
) {
    let mut current = match conn.gate.lock().unwrap().admit(seq, raw, producer) {
        Some(job) => job,
        None => return,
    };
    loop {
        run_one(shared, conn, &current.0, current.1, env);
        match conn.gate.lock().unwrap().finish() {
            Some(next) => current = next,
            None => return,
        }
    }
}

pub(crate) struct NetLoopCtx {
    pub shared: Arc<Shared>,
    pub ev: EventLoop,
    /// This thread's inbox (new connections, handoffs, close requests).
    pub inbox: Arc<JobQueue>,
    /// All network-capable inboxes, indexed by owner. Used by the accept
    /// role to route connections and idle-close requests.
    pub inboxes: Vec<Arc<JobQueue>>,
    /// Some(i): this thread is network-capable with producer index i.
    pub capable_idx: Option<usize>,
    /// None when payload work runs inline on this thread.
    pub dispatcher: Option<Dispatcher>,
    /// Present on the accept thread only.
    pub listener: Option<Listener>,
    /// Worker threads the accept thread joins at exit.
    pub children: Vec<JoinHandle<()>>,
    /// Slot in the per-thread loop-pass counters.
    pub slot: usize,
    pub ready: Sender<()>,
}

pub(crate) fn run_net_loop(ctx: NetLoopCtx) {
    let l = NetLoop {
        conns: HashMap::new(),
        next_conn_id: 1,
        rr_owner: 0,
        drain_quiesced: false,
        listener_closed: false,
        ctx,
    };
    l.run();
}

struct NetLoop {
    ctx: NetLoopCtx,
    conns: HashMap<usize, Arc<ServerConn>>,
    next_conn_id: u64,
    rr_owner: usize,
    /// Set once this loop has done its final dispatch flush and announced
    /// that it will produce no more request jobs.
    drain_quiesced: bool,
    listener_closed: bool,
}

impl NetLoop {
    fn shared(&self) -> &Shared {
        &self.ctx.shared
    }

    fn is_accept(&self) -> bool {
        self.ctx.listener.is_some() || self.listener_closed
    }

    fn sweep_interval_ms(&self) -> Option<u64> {
        let t = self.shared().config.idle_timeout;
        if t.is_zero() {
            return None;
        }
        Some((t.as_millis() as u64 / 4).clamp(100, 5_000))
    }

    fn run(mut self) {
        let role = if self.is_accept() {
            ThreadRole::Accept
        } else {
            ThreadRole::Network
        };
        let name = std::thread::current().name().unwrap_or("net").to_string();
        self.shared().register_thread(role, name);
        if let Some(listener) = &self.ctx.listener {
            use std::os::unix::io::AsRawFd;
            self.ctx
                .ev
                .register(listener.as_raw_fd(), LISTEN_TOKEN, true, false)
                .expect("register listener");
        }
        let _ = self.ctx.ready.send(());

        let mut events: Vec<LoopEvent> = Vec::new();
        let mut jobs: Vec<Job> = Vec::new();
        let sweep_ms = self.sweep_interval_ms();
        let mut next_sweep_ms = self.shared().clock.now_ms() + sweep_ms.unwrap_or(0);

        loop {
            let state = self.shared().state();
            let timeout = match state {
                RunState::Running => match (self.is_accept(), sweep_ms) {
                    (true, Some(_)) => {
                        let now = self.shared().clock.now_ms();
                        Some(Duration::from_millis(next_sweep_ms.saturating_sub(now).max(1)))
                    }
                    _ => None,
                },
                _ => Some(Duration::from_millis(20)),
            };
            self.ctx
                .ev
                .poll(timeout, &mut events)
                .expect("readiness poll failed");
            self.shared().counters.record_loop_pass(self.ctx.slot);

            for i in 0..events.len() {
                let e = events[i];
                match e.token {
                    WAKE_TOKEN => {}
                    LISTEN_TOKEN => self.accept_burst(),
                    token => {
                        if e.readable {
                            self.on_readable(token);
                        }
                        if e.writable {
                            self.on_writable(token);
                        }
                    }
                }
            }

            self.ctx.inbox.drain_into(&mut jobs);
            for job in jobs.drain(..) {
                match job {
                    Job::NewConn { conn } => self.adopt_conn(conn),
                    Job::Handoff { conn } => {
                        let token = conn.io.id as usize;
                        if self.conns.contains_key(&token) {
                            self.owner_drain(token);
                        }
                    }
                    Job::Close { conn, reason: CloseReason::Idle } => {
                        let token = conn.io.id as usize;
                        // Re-validate: activity may have arrived since the sweep.
                        let timeout = self.shared().config.idle_timeout;
                        let now = self.shared().clock.now_ms();
                        if self.conns.contains_key(&token) && conn.io.is_expired(now, timeout) {
                            self.teardown(token, CloseKind::Idle);
                        }
                    }
                    Job::Request { .. } => {
                        debug_assert!(false, "request jobs never target net inboxes");
                    }
                }
            }

            self.flush_dispatch();

            if state == RunState::Running {
                if let Some(interval) = sweep_ms {
                    let now = self.shared().clock.now_ms();
                    if self.is_accept() && now >= next_sweep_ms {
                        self.sweep_idle(now);
                        next_sweep_ms = now + interval;
                    }
                }
                continue;
            }

            // Draining (or stopped): quiesce once, then watch for completion.
            if !self.drain_quiesced {
                self.drain_quiesced = true;
                if let Some(listener) = self.ctx.listener.take() {
                    use std::os::unix::io::AsRawFd;
                    let _ = self.ctx.ev.deregister(listener.as_raw_fd());
                    drop(listener);
                    self.listener_closed = true;
                }
                if self.ctx.capable_idx.is_some() {
                    self.shared()
                        .nets_reading
                        .fetch_sub(1, std::sync::atomic::Ordering::SeqCst);
                }
            }
            let now = self.shared().clock.now_ms();
            let deadline = self
                .shared()
                .drain_deadline_ms
                .load(std::sync::atomic::Ordering::SeqCst);
            let payloads_done = self
                .shared()
                .payloads_alive
                .load(std::sync::atomic::Ordering::SeqCst)
                == 0;
            let all_flushed = self.conns.values().all(|c| c.io.pending_out() == 0);
            if (payloads_done && all_flushed && self.ctx.inbox.is_empty()) || now >= deadline {
                let tokens: Vec<usize> = self.conns.keys().copied().collect();
                for t in tokens {
                    self.teardown(t, CloseKind::Shutdown);
                }
                break;
            }
        }

        // Accept-thread epilogue: join workers, then release the unix path.
        let children = std::mem::take(&mut self.ctx.children);
        for h in children {
            if let Err(p) = h.join() {
                panic!("worker thread panicked: {}", panic_msg(p));
            }
        }
        if self.is_accept() {
            let _ = self.shared().config.endpoint.cleanup_socket_file();
        }
    }

    fn accept_burst(&mut self) {
        if !self.shared().is_running() || self.ctx.listener.is_none() {
            return;
        }
        let capable = self.shared().topology.net_capable_count();
        let mut routed: Vec<Vec<Job>> = (0..capable).map(|_| Vec::new()).collect();
        loop {
            let accepted = match &self.ctx.listener {
                Some(listener) => listener.accept(),
                None => break,
            };
            match accepted {
                Ok(Some(transport)) => {
                    let _ = transport.set_nodelay();
                    if let Some(bytes) = self.shared().config.send_buffer {
                        let _ = transport.set_send_buffer(bytes);
                    }
                    let id = self.next_conn_id;
                    self.next_conn_id += 1;
                    let owner = self.rr_owner % capable;
                    self.rr_owner += 1;
                    let limits = WireLimits {
                        max_value_len: self.shared().config.store.value_cap,
                    };
                    let conn = Arc::new(ServerConn {
                        io: Conn::new(id, owner, transport, limits, self.shared().clock.clone()),
                        gate: Mutex::new(super::queue::PayloadGate::default()),
                    });
                    self.shared().conns.lock().unwrap().insert(id, Arc::clone(&conn));
                    self.shared()
                        .counters
                        .accepted
                        .fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if self.ctx.capable_idx == Some(owner) {
                        self.adopt_conn(conn);
                    } else {
                        routed[owner].push(Job::NewConn { conn });
                    }
                }
                Ok(None) => break,
                Err(_) => break,
            }
        }
        for (owner, mut batch) in routed.into_iter().enumerate() {
            if batch.is_empty() {
                continue;
            }
            let _ = self.ctx.inboxes[owner].push_batch(&mut batch);
        }
    }

    /// Take ownership of a connection: register it and start reading.
    fn adopt_conn(&mut self, conn: Arc<ServerConn>) {
        let token = conn.io.id as usize;
        if conn.io.is_closing() {
            return;
        }
        if let Err(_e) = self.ctx.ev.register(conn.io.raw_fd(), token, true, false) {
            conn.io.set_closing();
            self.shared().conns.lock().unwrap().remove(&conn.io.id);
            self.shared()
                .counters
                .closed
                .fetch_add(1, std::sync::atomic::Ordering::Relaxed);
            return;
        }
        self.conns.insert(token, conn);
    }

    fn on_readable(&mut self, token: usize) {
        let Some(conn) = self.conns.get(&token).map(Arc::clone) else {
            return;
        };
        // During the drain no new request bytes are consumed; pending
        // responses still flush via writable events.
        if !self.shared().is_running() || conn.io.is_closing() {
            return;
        }
        // The lock block yields either frames or a close verdict; the read
        // lock is released before any teardown runs.
        let outcome = {
            let mut rh = conn.io.read.lock().unwrap();
            let rh = &mut *rh;
            rh.scratch.clear();
            match conn.io.read_available(&mut rh.scratch) {
                Err(_) => Err(CloseKind::Peer),
                Ok(status) => match rh.decoder.decode_raw(&rh.scratch) {
                    Ok(raws) => {
                        let base = rh.next_seq;
                        rh.next_seq += raws.len() as u64;
                        Ok((base, raws, status == ReadStatus::Eof))
                    }
                    Err(_) => Err(CloseKind::Violation),
                },
            }
        };
        let (base_seq, raws, eof) = match outcome {
            Ok(v) => v,
            Err(kind) => {
                self.teardown(token, kind);
                return;
            }
        };
        if eof {
            // Peer closed before awaiting these responses; drop the tail.
            self.teardown(token, CloseKind::Peer);
            return;
        }
        if raws.is_empty() {
            return;
        }
        self.shared()
            .counters
            .frames_extracted
            .fetch_add(raws.len() as u64, std::sync::atomic::Ordering::Relaxed);
        let producer = self.ctx.capable_idx.unwrap_or(0);
        match self.ctx.dispatcher.as_mut() {
            Some(d) => {
                for (i, raw) in raws.into_iter().enumerate() {
                    d.stage(Job::Request {
                        conn: Arc::clone(&conn),
                        seq: base_seq + i as u64,
                        raw,
                        producer,
                    });
                }
            }
            None => {
                let n = raws.len() as u64;
                self.shared()
                    .counters
                    .jobs_inline
                    .fetch_add(n, std::sync::atomic::Ordering::Relaxed);
                let env = ExecEnv::Inline {
                    ev: &self.ctx.ev,
                    token,
                };
                for (i, raw) in raws.into_iter().enumerate() {
                    execute_ordered(
                        self.shared(),
                        &conn,
                        base_seq + i as u64,
                        raw,
                        producer,
                        &env,
                    );
                }
            }
        }
    }

    fn on_writable(&mut self, token: usize) {
        if self.conns.contains_key(&token) {
            self.owner_drain(token);
        }
    }

    /// Owner-side flush of pending response bytes (writable event, handoff,
    /// or drain pass), applying the arm/disarm decision it yields.
    fn owner_drain(&mut self, token: usize) {
        let Some(conn) = self.conns.get(&token).map(Arc::clone) else {
            return;
        };
        match conn.io.owner_flush() {
            Ok(flush) => {
                if flush.written > 0 {
                    self.shared()
                        .counters
                        .owner_drained_bytes
                        .fetch_add(flush.written as u64, std::sync::atomic::Ordering::Relaxed);
                }
                match flush.arm_change {
                    Some(arm) => {
                        let _ = self.ctx.ev.reregister(conn.io.raw_fd(), token, true, arm);
                    }
                    None => {}
                }
            }
            Err(_) => self.teardown(token, CloseKind::Peer),
        }
    }

    fn flush_dispatch(&mut self) {
        let Some(d) = self.ctx.dispatcher.as_mut() else {
            return;
        };
        if d.staged() == 0 {
            return;
        }
        let (stats, stranded) = d.flush();
        let counters = &self.shared().counters;
        counters
            .jobs_dispatched
            .fetch_add(stats.jobs as u64, std::sync::atomic::Ordering::Relaxed);
        counters
            .dispatch_batches
            .fetch_add(stats.batches as u64, std::sync::atomic::Ordering::Relaxed);
        for job in stranded {
            if let Job::Request { conn, .. } = job {
                let token = conn.io.id as usize;
                self.teardown(token, CloseKind::Shutdown);
            }
        }
    }

    fn sweep_idle(&mut self, now_ms: u64) {
        let timeout = self.shared().config.idle_timeout;
        let snapshot: Vec<Arc<ServerConn>> = {
            self.shared().conns.lock().unwrap().values().cloned().collect()
        };
        let capable = self.shared().topology.net_capable_count();
        let mut routed: Vec<Vec<Job>> = (0..capable).map(|_| Vec::new()).collect();
        for conn in snapshot {
            if !conn.io.is_expired(now_ms, timeout) {
                continue;
            }
            if self.ctx.capable_idx == Some(conn.io.owner) {
                let token = conn.io.id as usize;
                if self.conns.contains_key(&token) {
                    self.teardown(token, CloseKind::Idle);
                }
            } else {
                let owner = conn.io.owner;
                routed[owner].push(Job::Close {
                    conn,
                    reason: CloseReason::Idle,
                });
            }
        }
        for (owner, mut batch) in routed.into_iter().enumerate() {
            if batch.is_empty() {
                continue;
            }
            let _ = self.ctx.inboxes[owner].push_batch(&mut batch);
        }
    }

    fn teardown(&mut self, token: usize, kind: CloseKind) {
        let Some(conn) = self.conns.remove(&token) else {
            return;
        };
        conn.io.set_closing();
        let _ = self.ctx.ev.deregister(conn.io.raw_fd());
        self.shared().conns.lock().unwrap().remove(&conn.io.id);
        let counters = &self.shared().counters;
        counters.closed.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        let bucket = match kind {
            CloseKind::Peer => Some(&counters.closed_peer),
            CloseKind::Violation => Some(&counters.closed_violation),
            CloseKind::Idle => Some(&counters.closed_idle),
            CloseKind::Shutdown => None,
        };
        if let Some(c) = bucket {
            c.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        }
    }
}

pub(crate) struct PayloadLoopCtx {
    pub shared: Arc<Shared>,
    pub ev: EventLoop,
    pub queue: Arc<JobQueue>,
    pub payload_idx: usize,
    pub net_inboxes: Vec<Arc<JobQueue>>,
    pub slot: usize,
    pub ready: Sender<()>,
}

pub(crate) fn run_payload_loop(mut ctx: PayloadLoopCtx) {
    let name = std::thread::current().name().unwrap_or("payload").to_string();
    ctx.shared.register_thread(ThreadRole::Payload, name);
    let _ = ctx.ready.send(());

    let mut events: Vec<LoopEvent> = Vec::new();
    let mut jobs: Vec<Job> = Vec::new();
    loop {
        let running = ctx.shared.is_running();
        let timeout = if running {
            None
        } else {
            Some(Duration::from_millis(5))
        };
        ctx.ev.poll(timeout, &mut events).expect("payload poll failed");
        ctx.shared.counters.record_loop_pass(ctx.slot);

        // Producers quiesce before this flag drops to zero, so one further
        // drain observes every job they pushed.
        let producers_quiet = !ctx.shared.is_running()
            && ctx
                .shared
                .nets_reading
                .load(std::sync::atomic::Ordering::SeqCst)
                == 0;

        ctx.queue.drain_into(&mut jobs);
        let env = ExecEnv::Payload {
            payload_idx: ctx.payload_idx,
            net_inboxes: &ctx.net_inboxes,
        };
        for job in jobs.drain(..) {
            if let Job::Request { conn, seq, raw, producer } = job {
                execute_ordered(&ctx.shared, &conn, seq, raw, producer, &env);
            }
        }

        let deadline_passed = !ctx.shared.is_running()
            && ctx.shared.clock.now_ms()
                >= ctx
                    .shared
                    .drain_deadline_ms
                    .load(std::sync::atomic::Ordering::SeqCst);
        if (producers_quiet && ctx.queue.is_empty()) || deadline_passed {
            ctx.shared
                .payloads_alive
                .fetch_sub(1, std::sync::atomic::Ordering::SeqCst);
            return;
        }
    }
}
