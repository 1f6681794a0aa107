//! Per-connection I/O state: buffered decode on the read side, a FIFO of
//! unsent bytes on the write side, and liveness tracking for idle expiry.
//!
//! Thread roles matter here. Every connection has exactly one *owner*
//! network-capable thread: only the owner reads the socket, drains the
//! pending-write queue, and (de)registers the descriptor. Payload threads may
//! *append* response bytes concurrently via [`Conn::write_or_queue`]; the
//! write half's mutex keeps those appends FIFO with in-progress owner
//! flushes. Nothing here blocks on the network — short writes land in the
//! pending queue and the owner finishes them when the socket turns writable.

use std::io;
use std::os::unix::io::{AsRawFd, RawFd};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use super::Transport;
use crate::protocol::{RequestDecoder, WireLimits};

/// Milliseconds since a process-local epoch; cheap, monotonic, and compact
/// enough to stash in an atomic.
#[derive(Clone)]
pub struct Clock(Arc<Instant>);

impl Clock {
    pub fn new() -> Clock {
        Clock(Arc::new(Instant::now()))
    }

    pub fn now_ms(&self) -> u64 {
        self.0.elapsed().as_millis() as u64
    }
}

impl Default for Clock {
    fn default() -> Self {
        Clock::new()
    }
}

/// FIFO byte queue holding not-yet-written response bytes as chunks.
#[derive(Default)]
pub struct ByteQueue {
    chunks: std::collections::VecDeque<Vec<u8>>,
    front_pos: usize,
    len: usize,
}

impl ByteQueue {
    pub fn push(&mut self, bytes: Vec<u8>) {
        if bytes.is_empty() {
            return;
        }
        self.len += bytes.len();
        self.chunks.push_back(bytes);
    }

    pub fn push_slice(&mut self, bytes: &[u8]) {
        if bytes.is_empty() {
            return;
        }
        self.len += bytes.len();
        self.chunks.push_back(bytes.to_vec());
    }

    /// The first unwritten span, or None when empty.
    pub fn front(&self) -> Option<&[u8]> {
        self.chunks.front().map(|c| &c[self.front_pos..])
    }

    /// Drop `n` bytes from the front; `n` may span chunk boundaries.
    pub fn advance(&mut self, mut n: usize) {
        debug_assert!(n <= self.len);
        self.len -= n;
        while n > 0 {
            let remaining = self.chunks[0].len() - self.front_pos;
            if n >= remaining {
                n -= remaining;
                self.chunks.pop_front();
                self.front_pos = 0;
            } else {
                self.front_pos += n;
                n = 0;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Result of draining the socket's receive buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReadStatus {
    /// Drained to `WouldBlock`; connection still open.
    Open,
    /// Peer closed its end; whatever was read before EOF is in the buffer.
    Eof,
}

/// Outcome of appending response bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriteOutcome {
    /// Everything reached the kernel.
    Sent,
    /// A remainder is queued on the connection.
    Queued {
        remaining: usize,
        /// True when the caller is the owner thread and just became
        /// responsible for arming writable interest (computed under the
        /// write lock so arming decisions are never duplicated).
        arm_now: bool,
    },
}

/// Owner-side flush result.
#[derive(Debug, Clone, Copy)]
pub struct OwnerFlush {
    pub written: usize,
    pub remaining: usize,
    /// Some(true): arm writable interest; Some(false): disarm; None: leave.
    pub arm_change: Option<bool>,
}

/// Read-side state, locked by the owner thread per readable event.
pub struct ReadHalf {
    pub decoder: RequestDecoder,
    /// Reusable buffer for one read pass.
    pub scratch: Vec<u8>,
    /// Next request sequence number on this connection.
    pub next_seq: u64,
}

struct WriteHalf {
    pending: ByteQueue,
    /// Whether writable interest is currently registered. Only the owner
    /// thread acts on arm decisions; the flag lives under this lock so the
    /// decision and the queue state stay consistent.
    armed: bool,
}

/// One accepted connection.
pub struct Conn {
    pub id: u64,
    /// Index of the owning thread in the server's network-capable list.
    pub owner: usize,
    transport: Transport,
    pub read: Mutex<ReadHalf>,
    write: Mutex<WriteHalf>,
    /// Advisory: set once teardown is initiated or the peer is known dead.
    /// Payload work checks it to discard jobs for dying connections.
    closing: AtomicBool,
    last_activity_ms: AtomicU64,
    /// Mirror of the pending queue length, readable without the write lock.
    pending_out: AtomicUsize,
    clock: Clock,
}

impl Conn {
    pub fn new(id: u64, owner: usize, transport: Transport, limits: WireLimits, clock: Clock) -> Conn {
        let now = clock.now_ms();
        Conn {
            id,
            owner,
            transport,
            read: Mutex::new(ReadHalf {
                decoder: RequestDecoder::new(limits),
                scratch: Vec::with_capacity(16 * 1024),
                next_seq: 0,
            }),
            write: Mutex::new(WriteHalf {
                pending: ByteQueue::default(),
                armed: false,
            }),
            closing: AtomicBool::new(false),
            last_activity_ms: AtomicU64::new(now),
            pending_out: AtomicUsize::new(0),
            clock,
        }
    }

    pub fn raw_fd(&self) -> RawFd {
        self.transport.as_raw_fd()
    }

    pub fn transport(&self) -> &Transport {
        &self.transport
    }

    pub fn set_closing(&self) {
        self.closing.store(true, Ordering::SeqCst);
    }

    pub fn is_closing(&self) -> bool {
        self.closing.load(Ordering::SeqCst)
    }

    pub fn pending_out(&self) -> usize {
        self.pending_out.load(Ordering::SeqCst)
    }

    fn touch(&self) {
        self.last_activity_ms.store(self.clock.now_ms(), Ordering::SeqCst);
    }

    pub fn idle_for(&self, now_ms: u64) -> Duration {
        Duration::from_millis(now_ms.saturating_sub(self.last_activity_ms.load(Ordering::SeqCst)))
    }

    /// Idle-expiry predicate: quiet past the timeout, nothing left to send,
    /// and not already being torn down.
    pub fn is_expired(&self, now_ms: u64, idle_timeout: Duration) -> bool {
        !self.is_closing() && self.pending_out() == 0 && self.idle_for(now_ms) >= idle_timeout
    }

    /// Owner-side: drain everything currently readable into `out`.
    /// Loops until `WouldBlock`, so one call observes all bytes the kernel
    /// has buffered — multiple frames arrive together in one pass.
    pub fn read_available(&self, out: &mut Vec<u8>) -> io::Result<ReadStatus> {
        let mut chunk = [0u8; 16 * 1024];
        loop {
            match self.transport.read(&mut chunk) {
                Ok(0) => {
                    self.touch();
                    return Ok(ReadStatus::Eof);
                }
                Ok(n) => {
                    out.extend_from_slice(&chunk[..n]);
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    self.touch();
                    return Ok(ReadStatus::Open);
                }
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(e) => return Err(e),
            }
        }
    }

    fn flush_locked(&self, w: &mut WriteHalf) -> io::Result<usize> {
        let mut written = 0;
        while let Some(front) = w.pending.front() {
            match self.transport.write(front) {
                Ok(0) => return Err(io::ErrorKind::WriteZero.into()),
                Ok(n) => {
                    w.pending.advance(n);
                    written += n;
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => break,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(e) => return Err(e),
            }
        }
        Ok(written)
    }

    /// Append response bytes: attempt the write inline on the calling
    /// thread, queue whatever the kernel refused. FIFO order is preserved —
    /// if older bytes are pending, the new bytes queue behind them.
    ///
    /// `inline_owner` says the caller *is* the owner thread; only then may
    /// this call claim the arming duty (`WriteOutcome::Queued { arm_now }`).
    /// Non-owner callers with a remainder must hand off to the owner.
    pub fn write_or_queue(&self, bytes: &[u8], inline_owner: bool) -> io::Result<WriteOutcome> {
        if self.is_closing() {
            return Err(io::Error::new(io::ErrorKind::NotConnected, "connection closing"));
        }
        let mut w = self.write.lock().unwrap();
        self.flush_locked(&mut w)?;
        if w.pending.is_empty() {
            let mut off = 0;
            loop {
                if off == bytes.len() {
                    break;
                }
                match self.transport.write(&bytes[off..]) {
                    Ok(0) => return Err(io::ErrorKind::WriteZero.into()),
                    Ok(n) => off += n,
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => break,
                    Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                    Err(e) => return Err(e),
                }
            }
            if off < bytes.len() {
                w.pending.push_slice(&bytes[off..]);
            }
        } else {
            w.pending.push_slice(bytes);
        }
        let remaining = w.pending.len();
        self.pending_out.store(remaining, Ordering::SeqCst);
        self.touch();
        if remaining == 0 {
            Ok(WriteOutcome::Sent)
        } else {
            let arm_now = inline_owner && !w.armed;
            if arm_now {
                w.armed = true;
            }
            Ok(WriteOutcome::Queued { remaining, arm_now })
        }
    }

    /// Owner-side: flush the pending queue (writable event or handoff) and
    /// compute the arm/disarm decision under the same lock.
    pub fn owner_flush(&self) -> io::Result<OwnerFlush> {
        let mut w = self.write.lock().unwrap();
        let written = self.flush_locked(&mut w)?;
        let remaining = w.pending.len();
        self.pending_out.store(remaining, Ordering::SeqCst);
        if written > 0 {
            self.touch();
        }
        let arm_change = if remaining > 0 && !w.armed {
            w.armed = true;
            Some(true)
        } else if remaining == 0 && w.armed {
            w.armed = false;
            Some(false)
        } else {
            None
        };
        Ok(OwnerFlush {
            written,
            remaining,
            arm_change,
        })
    }
}
