//! Endpoints, nonblocking transports, and the readiness event loop.
//!
//! Everything here is model-agnostic plumbing: parse an endpoint string,
//! bind/accept on it, poll file descriptors for readiness, and wake a
//! sleeping loop from another thread. The per-connection read/write state
//! machine lives in [`conn`].
//!
//! Event delivery contract: a loop that gets a readable/writable event for a
//! descriptor must drain it to `WouldBlock` before sleeping again. Every
//! handler in this crate does exactly that, which is also what makes response
//! byte streams independent of how the kernel fragments I/O.

pub mod conn;

pub use conn::{ByteQueue, Clock, Conn, OwnerFlush, ReadHalf, ReadStatus, WriteOutcome};

use std::fmt;
use std::io::{self, Read, Write};
use std::net::SocketAddr;
use std::os::unix::io::{AsRawFd, RawFd};
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use mio::unix::SourceFd;
use mio::{Events, Interest, Poll, Token, Waker};

/// Token reserved for cross-thread wakeups.
pub const WAKE_TOKEN: usize = usize::MAX;
/// Token reserved for the accept socket.
pub const LISTEN_TOKEN: usize = usize::MAX - 1;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EndpointError {
    #[error("endpoint must start with `unix:` or `tcp:` (got {0:?})")]
    BadScheme(String),
    #[error("unix endpoint needs a path, e.g. unix:/tmp/kv.sock")]
    MissingPath,
    #[error("tcp endpoint needs host:port, e.g. tcp:127.0.0.1:9090 (got {0:?})")]
    MissingPort(String),
}

/// A server or client address: `unix:<path>` or `tcp:<host>:<port>`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Endpoint {
    Unix(PathBuf),
    Tcp(String),
}

impl Endpoint {
    /// Remove a unix socket file left behind by a previous process.
    /// No-op for TCP endpoints and missing files.
    pub fn cleanup_socket_file(&self) -> io::Result<()> {
        if let Endpoint::Unix(path) = self {
            match std::fs::remove_file(path) {
                Ok(()) => Ok(()),
                Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(()),
                Err(e) => Err(e),
            }
        } else {
            Ok(())
        }
    }

    fn resolve_tcp(spec: &str) -> io::Result<SocketAddr> {
        use std::net::ToSocketAddrs;
        spec.to_socket_addrs()?
            .next()
            .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, format!("no address for {spec}")))
    }
}

impl FromStr for Endpoint {
    type Err = EndpointError;

    fn from_str(s: &str) -> Result<Endpoint, EndpointError> {
        if let Some(path) = s.strip_prefix("unix:") {
            if path.is_empty() {
                return Err(EndpointError::MissingPath);
            }
            Ok(Endpoint::Unix(PathBuf::from(path)))
        } else if let Some(addr) = s.strip_prefix("tcp:") {
            if !addr.contains(':') {
                return Err(EndpointError::MissingPort(addr.to_string()));
            }
            Ok(Endpoint::Tcp(addr.to_string()))
        } else {
            Err(EndpointError::BadScheme(s.to_string()))
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Unix(p) => write!(f, "unix:{}", p.display()),
            Endpoint::Tcp(a) => write!(f, "tcp:{a}"),
        }
    }
}

/// A connected, nonblocking stream socket.
pub enum Transport {
    Unix(mio::net::UnixStream),
    Tcp(mio::net::TcpStream),
}

impl Transport {
    pub fn read(&self, buf: &mut [u8]) -> io::Result<usize> {
        match self {
            Transport::Unix(s) => (&*s).read(buf),
            Transport::Tcp(s) => (&*s).read(buf),
        }
    }

    pub fn write(&self, buf: &[u8]) -> io::Result<usize> {
        match self {
            Transport::Unix(s) => (&*s).write(buf),
            Transport::Tcp(s) => (&*s).write(buf),
        }
    }

    /// Shrink the kernel send buffer; used to force short writes in tests
    /// and to study the write-overflow handoff path.
    pub fn set_send_buffer(&self, bytes: usize) -> io::Result<()> {
        let val = bytes as libc::c_int;
        let rc = unsafe {
            libc::setsockopt(
                self.as_raw_fd(),
                libc::SOL_SOCKET,
                libc::SO_SNDBUF,
                &val as *const _ as *const libc::c_void,
                std::mem::size_of::<libc::c_int>() as libc::socklen_t,
            )
        };
        if rc != 0 {
            return Err(io::Error::last_os_error());
        }
        Ok(())
    }

    /// Latency tuning for TCP; no-op on unix sockets.
    pub fn set_nodelay(&self) -> io::Result<()> {
        match self {
            Transport::Unix(_) => Ok(()),
            Transport::Tcp(s) => s.set_nodelay(true),
        }
    }

    /// Wrap an already-connected blocking std stream.
    pub fn from_std_unix(s: std::os::unix::net::UnixStream) -> io::Result<Transport> {
        s.set_nonblocking(true)?;
        Ok(Transport::Unix(mio::net::UnixStream::from_std(s)))
    }

    pub fn from_std_tcp(s: std::net::TcpStream) -> io::Result<Transport> {
        s.set_nonblocking(true)?;
        Ok(Transport::Tcp(mio::net::TcpStream::from_std(s)))
    }
}

impl AsRawFd for Transport {
    fn as_raw_fd(&self) -> RawFd {
        match self {
            Transport::Unix(s) => s.as_raw_fd(),
            Transport::Tcp(s) => s.as_raw_fd(),
        }
    }
}

/// A bound, nonblocking accept socket.
#[derive(Debug)]
pub enum Listener {
    Unix(mio::net::UnixListener),
    Tcp(mio::net::TcpListener),
}

impl Listener {
    /// Bind the endpoint. An occupied unix path or busy TCP port surfaces as
    /// `AddrInUse`; stale unix socket files are never removed implicitly.
    pub fn bind(endpoint: &Endpoint) -> io::Result<Listener> {
        match endpoint {
            Endpoint::Unix(path) => Ok(Listener::Unix(mio::net::UnixListener::bind(path)?)),
            Endpoint::Tcp(spec) => {
                let addr = Endpoint::resolve_tcp(spec)?;
                Ok(Listener::Tcp(mio::net::TcpListener::bind(addr)?))
            }
        }
    }

    /// Accept one pending connection, or None when the backlog is empty.
    pub fn accept(&self) -> io::Result<Option<Transport>> {
        let r = match self {
            Listener::Unix(l) => l.accept().map(|(s, _)| Transport::Unix(s)),
            Listener::Tcp(l) => l.accept().map(|(s, _)| Transport::Tcp(s)),
        };
        match r {
            Ok(t) => Ok(Some(t)),
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => Ok(None),
            // Connection died between arrival and accept; not our problem.
            Err(e) if e.kind() == io::ErrorKind::ConnectionAborted => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// The bound address. For `tcp:<host>:0` this carries the real port.
    pub fn local_endpoint(&self) -> io::Result<Endpoint> {
        match self {
            Listener::Unix(l) => {
                let addr = l.local_addr()?;
                let path = addr
                    .as_pathname()
                    .ok_or_else(|| io::Error::new(io::ErrorKind::Other, "unnamed unix socket"))?;
                Ok(Endpoint::Unix(path.to_path_buf()))
            }
            Listener::Tcp(l) => Ok(Endpoint::Tcp(l.local_addr()?.to_string())),
        }
    }
}

impl AsRawFd for Listener {
    fn as_raw_fd(&self) -> RawFd {
        match self {
            Listener::Unix(l) => l.as_raw_fd(),
            Listener::Tcp(l) => l.as_raw_fd(),
        }
    }
}

/// One readiness event, flattened for matching.
#[derive(Debug, Clone, Copy)]
pub struct LoopEvent {
    pub token: usize,
    pub readable: bool,
    pub writable: bool,
}

/// Cross-thread wakeup handle for one [`EventLoop`].
///
/// Lifetime contract: keep at least one clone alive until the target loop
/// has observed the wakeup. Dropping the last clone closes the wakeup
/// descriptor, and the kernel discards a still-pending wakeup event along
/// with it — a `wake()` immediately followed by the final drop can
/// therefore go unseen. Long-lived owners (queues, shared state) are the
/// right place to hold these.
#[derive(Clone)]
pub struct LoopWaker(Arc<Waker>);

impl LoopWaker {
    pub fn wake(&self) {
        // A failed wake means the loop is gone; nothing useful to do.
        let _ = self.0.wake();
    }
}

/// Readiness poller wrapping one OS selector plus its wakeup channel.
pub struct EventLoop {
    poll: Poll,
    events: Events,
}

impl EventLoop {
    pub fn new() -> io::Result<(EventLoop, LoopWaker)> {
        let poll = Poll::new()?;
        let waker = Waker::new(poll.registry(), Token(WAKE_TOKEN))?;
        Ok((
            EventLoop {
                poll,
                events: Events::with_capacity(512),
            },
            LoopWaker(Arc::new(waker)),
        ))
    }

    fn interests(readable: bool, writable: bool) -> Interest {
        match (readable, writable) {
            (true, true) => Interest::READABLE.add(Interest::WRITABLE),
            (false, true) => Interest::WRITABLE,
            // Registering with no interest is a caller bug; default to read.
            _ => Interest::READABLE,
        }
    }

    pub fn register(&self, fd: RawFd, token: usize, readable: bool, writable: bool) -> io::Result<()> {
        self.poll
            .registry()
            .register(&mut SourceFd(&fd), Token(token), Self::interests(readable, writable))
    }

    pub fn reregister(&self, fd: RawFd, token: usize, readable: bool, writable: bool) -> io::Result<()> {
        self.poll
            .registry()
            .reregister(&mut SourceFd(&fd), Token(token), Self::interests(readable, writable))
    }

    pub fn deregister(&self, fd: RawFd) -> io::Result<()> {
        self.poll.registry().deregister(&mut SourceFd(&fd))
    }

    /// Wait for readiness, a wakeup, or the timeout; fills `out` with every
    /// event that arrived. Returns with an empty `out` on timeout. Never
    /// spins: with nothing ready the call blocks in the OS selector.
    pub fn poll(&mut self, timeout: Option<Duration>, out: &mut Vec<LoopEvent>) -> io::Result<()> {
        out.clear();
        match self.poll.poll(&mut self.events, timeout) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::Interrupted => return Ok(()),
            Err(e) => return Err(e),
        }
        for ev in self.events.iter() {
            out.push(LoopEvent {
                token: ev.token().0,
                // Peer hangups must reach the read path (to observe EOF) and
                // the write path (to observe the error), so fold them in.
                readable: ev.is_readable() || ev.is_read_closed(),
                writable: ev.is_writable() || ev.is_write_closed(),
            });
        }
        Ok(())
    }
}
