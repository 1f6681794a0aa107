//! The measurement client: N concurrent connections in a closed loop (one
//! outstanding request each), driven by a few readiness-polling threads.
//!
//! Every GET response is validated against the locally regenerated dataset,
//! so a run doubles as a correctness check. Operations are counted on
//! response arrival, and at the end of a run every outstanding request is
//! drained — so the client's operation count equals the number of requests
//! the server executed for it, exactly.

use std::io;
use std::os::unix::io::AsRawFd;
use std::sync::{Arc, Barrier};
use std::time::{Duration, Instant};

use serde::Serialize;

use super::{BenchError, Dataset, Op, OpGen};
use crate::netio::{Endpoint, EventLoop, LoopEvent, Transport};
use crate::protocol::{encode_request, RequestFrame, ResponseDecoder, ResponseFrame, WireLimits};

/// How long after the deadline outstanding responses may take before the
/// run is declared stalled.
const DRAIN_GRACE: Duration = Duration::from_secs(10);

#[derive(Debug, Clone, Copy)]
pub struct MeasureSpec {
    pub clients: usize,
    pub duration: Duration,
    pub client_threads: usize,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct MeasureResult {
    /// Completed operations (requests issued and answered).
    pub ops: u64,
    pub get_ops: u64,
    pub put_ops: u64,
    /// Wall time from start barrier to last drained response.
    pub elapsed_s: f64,
    pub tps: f64,
}

struct BenchConn {
    transport: Transport,
    decoder: ResponseDecoder,
    opgen: OpGen,
    outstanding: Option<Op>,
    /// Unwritten request bytes (kernel buffer was full).
    pending: Vec<u8>,
    write_armed: bool,
    ops: u64,
    gets: u64,
    puts: u64,
}

impl BenchConn {
    fn issue(&mut self, ev: &EventLoop, token: usize, dataset: &Dataset) -> Result<(), BenchError> {
        debug_assert!(self.outstanding.is_none() && self.pending.is_empty());
        let op = self.opgen.next_op();
        let frame = match op {
            Op::Get { idx } => RequestFrame::Get { key: dataset.key(idx) },
            Op::Put { idx } => RequestFrame::Put {
                key: dataset.key(idx),
                value: dataset.value(idx).to_vec(),
            },
        };
        let bytes = encode_request(&frame)?;
        self.outstanding = Some(op);
        let mut off = 0;
        while off < bytes.len() {
            match self.transport.write(&bytes[off..]) {
                Ok(0) => return Err(BenchError::Disconnected),
                Ok(n) => off += n,
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    self.pending.extend_from_slice(&bytes[off..]);
                    self.arm_write(ev, token)?;
                    break;
                }
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(e) => return Err(e.into()),
            }
        }
        Ok(())
    }

    fn arm_write(&mut self, ev: &EventLoop, token: usize) -> Result<(), BenchError> {
        if !self.write_armed {
            self.write_armed = true;
            ev.reregister(self.transport.as_raw_fd(), token, true, true)?;
        }
        Ok(())
    }

    fn flush_pending(&mut self, ev: &EventLoop, token: usize) -> Result<(), BenchError> {
        while !self.pending.is_empty() {
            match self.transport.write(&self.pending) {
                Ok(0) => return Err(BenchError::Disconnected),
                Ok(n) => {
                    self.pending.drain(..n);
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => return Ok(()),
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(e) => return Err(e.into()),
            }
        }
        if self.write_armed {
            self.write_armed = false;
            ev.reregister(self.transport.as_raw_fd(), token, true, false)?;
        }
        Ok(())
    }

    /// Drain the socket and decode; returns the completed response frames.
    fn read_responses(&mut self) -> Result<Vec<ResponseFrame>, BenchError> {
        let mut frames = Vec::new();
        let mut chunk = [0u8; 16 * 1024];
        loop {
            match self.transport.read(&mut chunk) {
                Ok(0) => return Err(BenchError::Disconnected),
                Ok(n) => frames.extend(self.decoder.decode(&chunk[..n])?),
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => break,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(e) => return Err(e.into()),
            }
        }
        Ok(frames)
    }

    fn complete(&mut self, frame: ResponseFrame, dataset: &Dataset) -> Result<(), BenchError> {
        let op = self.outstanding.take().ok_or(BenchError::UnexpectedResponse)?;
        match op {
            Op::Get { idx } => {
                self.gets += 1;
                let ok = matches!(&frame, ResponseFrame::Ok { value } if value == dataset.value(idx));
                if !ok {
                    return Err(BenchError::Validation {
                        key: String::from_utf8_lossy(&dataset.key(idx)).into_owned(),
                    });
                }
            }
            Op::Put { idx } => {
                self.puts += 1;
                if !matches!(&frame, ResponseFrame::Ok { .. }) {
                    return Err(BenchError::PutRejected {
                        key: String::from_utf8_lossy(&dataset.key(idx)).into_owned(),
                    });
                }
            }
        }
        self.ops += 1;
        Ok(())
    }
}

fn connect_transport(endpoint: &Endpoint) -> io::Result<Transport> {
    match endpoint {
        Endpoint::Unix(path) => {
            Transport::from_std_unix(std::os::unix::net::UnixStream::connect(path)?)
        }
        Endpoint::Tcp(addr) => {
            let s = std::net::TcpStream::connect(addr)?;
            s.set_nodelay(true)?;
            Transport::from_std_tcp(s)
        }
    }
}

struct ThreadStats {
    ops: u64,
    gets: u64,
    puts: u64,
    start: Instant,
    end: Instant,
}

fn run_worker(
    seeds: Vec<(Transport, u64)>,
    dataset: &Dataset,
    duration: Duration,
    barrier: &Barrier,
) -> Result<ThreadStats, BenchError> {
    // All fallible setup happens before the barrier but its result is
    // checked after, so a failing thread can never strand the others.
    let setup = (|| -> Result<(EventLoop, Vec<BenchConn>), BenchError> {
        let (ev, _waker) = EventLoop::new()?;
        let mut conns = Vec::with_capacity(seeds.len());
        for (token, (transport, stream_id)) in seeds.into_iter().enumerate() {
            ev.register(transport.as_raw_fd(), token, true, false)?;
            conns.push(BenchConn {
                transport,
                decoder: ResponseDecoder::new(WireLimits::default()),
                opgen: OpGen::new(&dataset.spec, stream_id),
                outstanding: None,
                pending: Vec::new(),
                write_armed: false,
                ops: 0,
                gets: 0,
                puts: 0,
            });
        }
        Ok((ev, conns))
    })();
    barrier.wait();
    let (mut ev, mut conns) = setup?;

    let start = Instant::now();
    let deadline = start + duration;
    let stall_deadline = deadline + DRAIN_GRACE;
    for token in 0..conns.len() {
        conns[token].issue(&ev, token, dataset)?;
    }

    let mut events: Vec<LoopEvent> = Vec::new();
    loop {
        if conns.iter().all(|c| c.outstanding.is_none()) {
            break;
        }
        let now = Instant::now();
        if now >= stall_deadline {
            return Err(BenchError::Stalled);
        }
        let timeout = if now >= deadline {
            Duration::from_millis(5)
        } else {
            (deadline - now).min(Duration::from_millis(100))
        };
        ev.poll(Some(timeout), &mut events)?;
        for i in 0..events.len() {
            let e = events[i];
            let token = e.token;
            if token >= conns.len() {
                continue;
            }
            if e.writable {
                conns[token].flush_pending(&ev, token)?;
            }
            if e.readable {
                let frames = conns[token].read_responses()?;
                for frame in frames {
                    conns[token].complete(frame, dataset)?;
                    if Instant::now() < deadline {
                        conns[token].issue(&ev, token, dataset)?;
                    }
                }
            }
        }
    }
    let end = Instant::now();
    Ok(ThreadStats {
        ops: conns.iter().map(|c| c.ops).sum(),
        gets: conns.iter().map(|c| c.gets).sum(),
        puts: conns.iter().map(|c| c.puts).sum(),
        start,
        end,
    })
}

/// One measured run: connect, hammer the server for the duration, drain,
/// and report the completed-operation rate.
pub fn run_measurement(
    endpoint: &Endpoint,
    dataset: &Arc<Dataset>,
    spec: &MeasureSpec,
) -> Result<MeasureResult, BenchError> {
    if spec.clients == 0 {
        return Err(BenchError::NoClients);
    }
    let threads = spec.client_threads.clamp(1, spec.clients);

    // Connect everything up front so no thread can fail before the barrier.
    let mut seeds: Vec<Vec<(Transport, u64)>> = (0..threads).map(|_| Vec::new()).collect();
    for global in 0..spec.clients {
        let t = connect_transport(endpoint)?;
        seeds[global % threads].push((t, global as u64));
    }

    let barrier = Barrier::new(threads);
    let stats = std::thread::scope(|scope| -> Result<Vec<ThreadStats>, BenchError> {
        let barrier = &barrier;
        let duration = spec.duration;
        let mut handles = Vec::new();
        for seed in seeds {
            let dataset = Arc::clone(dataset);
            handles.push(
                scope.spawn(move || run_worker(seed, &dataset, duration, barrier)),
            );
        }
        let mut out = Vec::new();
        let mut first_err = None;
        for h in handles {
            match h.join().expect("bench worker panicked") {
                Ok(s) => out.push(s),
                Err(e) => first_err = first_err.or(Some(e)),
            }
        }
        match first_err {
            Some(e) => Err(e),
            None => Ok(out),
        }
    })?;

    let ops: u64 = stats.iter().map(|s| s.ops).sum();
    let first_start = stats.iter().map(|s| s.start).min().expect("at least one thread");
    let last_end = stats.iter().map(|s| s.end).max().expect("at least one thread");
    let elapsed = last_end.duration_since(first_start);
    let elapsed_s = elapsed.as_secs_f64();
    Ok(MeasureResult {
        ops,
        get_ops: stats.iter().map(|s| s.gets).sum(),
        put_ops: stats.iter().map(|s| s.puts).sum(),
        elapsed_s,
        tps: if elapsed_s > 0.0 { ops as f64 / elapsed_s } else { 0.0 },
    })
}
