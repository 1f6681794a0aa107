//! Blocking client: one connection, one outstanding request at a time.
//!
//! This is the simple interface for scripts, examples, and dataset preloads.
//! The measurement client in [`crate::bench`] drives many connections from a
//! readiness loop instead; both speak the same wire format from
//! [`crate::protocol`].

use std::collections::VecDeque;
use std::io::{self, Read, Write};
use std::time::{Duration, Instant};

use crate::netio::Endpoint;
use crate::protocol::{
    encode_request, RequestFrame, ResponseDecoder, ResponseFrame, Status, WireError, WireLimits,
};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("server closed the connection")]
    Disconnected,
    #[error("unexpected response status {0:?}")]
    UnexpectedStatus(Status),
}

enum ClientStream {
    Unix(std::os::unix::net::UnixStream),
    Tcp(std::net::TcpStream),
}

impl ClientStream {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        match self {
            ClientStream::Unix(s) => s.read(buf),
            ClientStream::Tcp(s) => s.read(buf),
        }
    }

    fn write_all(&mut self, buf: &[u8]) -> io::Result<()> {
        match self {
            ClientStream::Unix(s) => s.write_all(buf),
            ClientStream::Tcp(s) => s.write_all(buf),
        }
    }
}

pub struct BlockingClient {
    stream: ClientStream,
    decoder: ResponseDecoder,
    ready: VecDeque<ResponseFrame>,
    buf: Vec<u8>,
}

impl BlockingClient {
    pub fn connect(endpoint: &Endpoint) -> io::Result<BlockingClient> {
        let stream = match endpoint {
            Endpoint::Unix(path) => {
                ClientStream::Unix(std::os::unix::net::UnixStream::connect(path)?)
            }
            Endpoint::Tcp(addr) => {
                let s = std::net::TcpStream::connect(addr)?;
                s.set_nodelay(true)?;
                ClientStream::Tcp(s)
            }
        };
        Ok(BlockingClient {
            stream,
            decoder: ResponseDecoder::new(WireLimits::default()),
            ready: VecDeque::new(),
            buf: vec![0u8; 64 * 1024],
        })
    }

    /// Connect, retrying while the endpoint isn't up yet. Useful when the
    /// server was just spawned and may not have bound its socket.
    pub fn connect_retry(endpoint: &Endpoint, timeout: Duration) -> io::Result<BlockingClient> {
        let deadline = Instant::now() + timeout;
        loop {
            match BlockingClient::connect(endpoint) {
                Ok(c) => return Ok(c),
                Err(e) => {
                    let retryable = matches!(
                        e.kind(),
                        io::ErrorKind::ConnectionRefused
                            | io::ErrorKind::NotFound
                            | io::ErrorKind::AddrNotAvailable
                    );
                    if !retryable || Instant::now() >= deadline {
                        return Err(e);
                    }
                    std::thread::sleep(Duration::from_millis(10));
                }
            }
        }
    }

    pub fn set_read_timeout(&mut self, timeout: Option<Duration>) -> io::Result<()> {
        match &self.stream {
            ClientStream::Unix(s) => s.set_read_timeout(timeout),
            ClientStream::Tcp(s) => s.set_read_timeout(timeout),
        }
    }

    /// Half-close: no more requests will be sent, responses remain readable.
    pub fn shutdown_write(&mut self) -> io::Result<()> {
        match &self.stream {
            ClientStream::Unix(s) => s.shutdown(std::net::Shutdown::Write),
            ClientStream::Tcp(s) => s.shutdown(std::net::Shutdown::Write),
        }
    }

    /// Write raw bytes, bypassing request encoding. For protocol tests.
    pub fn send_raw(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.stream.write_all(bytes)
    }

    /// Read until one full response is decoded.
    pub fn recv_response(&mut self) -> Result<ResponseFrame, ClientError> {
        loop {
            if let Some(r) = self.ready.pop_front() {
                return Ok(r);
            }
            let n = self.stream.read(&mut self.buf)?;
            if n == 0 {
                return Err(ClientError::Disconnected);
            }
            let buf = std::mem::take(&mut self.buf);
            let result = self.decoder.decode(&buf[..n]);
            self.buf = buf;
            self.ready.extend(result?);
        }
    }

    /// One round trip: send the request, await its response.
    pub fn request(&mut self, frame: &RequestFrame) -> Result<ResponseFrame, ClientError> {
        let bytes = encode_request(frame)?;
        self.send_raw(&bytes)?;
        self.recv_response()
    }

    pub fn get(&mut self, key: &[u8]) -> Result<Option<Vec<u8>>, ClientError> {
        match self.request(&RequestFrame::Get { key: key.to_vec() })? {
            ResponseFrame::Ok { value } => Ok(Some(value)),
            ResponseFrame::NotFound => Ok(None),
            other => Err(ClientError::UnexpectedStatus(other.status())),
        }
    }

    pub fn put(&mut self, key: &[u8], value: &[u8]) -> Result<(), ClientError> {
        match self.request(&RequestFrame::Put {
            key: key.to_vec(),
            value: value.to_vec(),
        })? {
            ResponseFrame::Ok { .. } => Ok(()),
            other => Err(ClientError::UnexpectedStatus(other.status())),
        }
    }

    /// True when the key existed.
    pub fn delete(&mut self, key: &[u8]) -> Result<bool, ClientError> {
        match self.request(&RequestFrame::Delete { key: key.to_vec() })? {
            ResponseFrame::Ok { .. } => Ok(true),
            ResponseFrame::NotFound => Ok(false),
            other => Err(ClientError::UnexpectedStatus(other.status())),
        }
    }

    pub fn ping(&mut self) -> Result<(), ClientError> {
        match self.request(&RequestFrame::Ping)? {
            ResponseFrame::Ok { .. } => Ok(()),
            other => Err(ClientError::UnexpectedStatus(other.status())),
        }
    }
}
