//! Binary wire protocol: framing, encoding, and streaming decoders.
//!
//! Requests and responses are length-prefixed binary frames with fixed
//! headers and little-endian length fields. The layout is normative and
//! documented bit-exactly in the README; the short form:
//!
//! ```text
//! request:  magic 0xC5 | opcode u8 | key_len u16 LE | value_len u32 LE | key | value
//! response: magic 0xC6 | status u8 | value_len u32 LE | value
//! ```
//!
//! Opcodes: GET=0x01, PUT=0x02, DELETE=0x03, PING=0x04. Statuses: OK=0x00,
//! NOT_FOUND=0x01, BAD_REQUEST=0x02, SERVER_ERROR=0x03. Only PUT carries a
//! request value; only OK carries a response value. Keys are nonempty for
//! keyed opcodes and absent for PING.
//!
//! Decoding is streaming and chunking-invariant: bytes may arrive in any
//! fragmentation and each [`RequestDecoder::decode`] call yields exactly the
//! frames completed so far, in order. Violations (bad magic, unknown opcode
//! or status, oversize declared length, shape violations) are detected as
//! early as the arrived bytes allow and poison the decoder; the caller is
//! expected to drop the connection.

use std::fmt;

pub const REQUEST_MAGIC: u8 = 0xC5;
pub const RESPONSE_MAGIC: u8 = 0xC6;
pub const REQUEST_HEADER_LEN: usize = 8;
pub const RESPONSE_HEADER_LEN: usize = 6;

/// Default decoder cap on a declared value length. Kept equal to
/// `store::DEFAULT_VALUE_CAP` (checked by test) so the wire layer and the
/// store reject the same sizes by default.
pub const DEFAULT_MAX_VALUE_LEN: usize = 4 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Opcode {
    Get = 0x01,
    Put = 0x02,
    Delete = 0x03,
    Ping = 0x04,
}

impl Opcode {
    pub fn from_u8(b: u8) -> Option<Opcode> {
        match b {
            0x01 => Some(Opcode::Get),
            0x02 => Some(Opcode::Put),
            0x03 => Some(Opcode::Delete),
            0x04 => Some(Opcode::Ping),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Status {
    Ok = 0x00,
    NotFound = 0x01,
    BadRequest = 0x02,
    ServerError = 0x03,
}

impl Status {
    pub fn from_u8(b: u8) -> Option<Status> {
        match b {
            0x00 => Some(Status::Ok),
            0x01 => Some(Status::NotFound),
            0x02 => Some(Status::BadRequest),
            0x03 => Some(Status::ServerError),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RequestFrame {
    Get { key: Vec<u8> },
    Put { key: Vec<u8>, value: Vec<u8> },
    Delete { key: Vec<u8> },
    Ping,
}

impl RequestFrame {
    pub fn opcode(&self) -> Opcode {
        match self {
            RequestFrame::Get { .. } => Opcode::Get,
            RequestFrame::Put { .. } => Opcode::Put,
            RequestFrame::Delete { .. } => Opcode::Delete,
            RequestFrame::Ping => Opcode::Ping,
        }
    }

    pub fn key(&self) -> &[u8] {
        match self {
            RequestFrame::Get { key }
            | RequestFrame::Put { key, .. }
            | RequestFrame::Delete { key } => key,
            RequestFrame::Ping => &[],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ResponseFrame {
    Ok { value: Vec<u8> },
    NotFound,
    BadRequest,
    ServerError,
}

impl ResponseFrame {
    pub fn status(&self) -> Status {
        match self {
            ResponseFrame::Ok { .. } => Status::Ok,
            ResponseFrame::NotFound => Status::NotFound,
            ResponseFrame::BadRequest => Status::BadRequest,
            ResponseFrame::ServerError => Status::ServerError,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WireError {
    #[error("bad frame magic 0x{0:02x}")]
    BadMagic(u8),
    #[error("unknown opcode 0x{0:02x}")]
    UnknownOpcode(u8),
    #[error("unknown status 0x{0:02x}")]
    UnknownStatus(u8),
    #[error("declared value length {len} exceeds the cap of {cap} bytes")]
    ValueTooLarge { len: usize, cap: usize },
    #[error("value length {0} does not fit the 32-bit wire field")]
    ValueUnencodable(usize),
    #[error("key length {0} does not fit the 16-bit wire field")]
    KeyUnencodable(usize),
    #[error("opcode {0:?} requires a nonempty key")]
    KeyRequired(Opcode),
    #[error("opcode {0:?} carries no key but key_len is nonzero")]
    KeyForbidden(Opcode),
    #[error("opcode {0:?} carries no value but value_len is nonzero")]
    ValueForbidden(Opcode),
    #[error("status {0:?} carries no value but value_len is nonzero")]
    StatusValueForbidden(Status),
}

/// Decode-side policy limits. The structural key cap (u16) needs no policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WireLimits {
    pub max_value_len: usize,
}

impl Default for WireLimits {
    fn default() -> Self {
        WireLimits {
            max_value_len: DEFAULT_MAX_VALUE_LEN,
        }
    }
}

pub fn encode_request(frame: &RequestFrame) -> Result<Vec<u8>, WireError> {
    let (key, value): (&[u8], &[u8]) = match frame {
        RequestFrame::Get { key } => (key, &[]),
        RequestFrame::Put { key, value } => (key, value),
        RequestFrame::Delete { key } => (key, &[]),
        RequestFrame::Ping => (&[], &[]),
    };
    if frame.opcode() != Opcode::Ping && key.is_empty() {
        return Err(WireError::KeyRequired(frame.opcode()));
    }
    if key.len() > u16::MAX as usize {
        return Err(WireError::KeyUnencodable(key.len()));
    }
    if value.len() > u32::MAX as usize {
        return Err(WireError::ValueUnencodable(value.len()));
    }
    let mut out = Vec::with_capacity(REQUEST_HEADER_LEN + key.len() + value.len());
    out.push(REQUEST_MAGIC);
    out.push(frame.opcode() as u8);
    out.extend_from_slice(&(key.len() as u16).to_le_bytes());
    out.extend_from_slice(&(value.len() as u32).to_le_bytes());
    out.extend_from_slice(key);
    out.extend_from_slice(value);
    Ok(out)
}

pub fn encode_response(frame: &ResponseFrame) -> Result<Vec<u8>, WireError> {
    let value: &[u8] = match frame {
        ResponseFrame::Ok { value } => value,
        _ => &[],
    };
    if value.len() > u32::MAX as usize {
        return Err(WireError::ValueUnencodable(value.len()));
    }
    let mut out = Vec::with_capacity(RESPONSE_HEADER_LEN + value.len());
    out.push(RESPONSE_MAGIC);
    out.push(frame.status() as u8);
    out.extend_from_slice(&(value.len() as u32).to_le_bytes());
    out.extend_from_slice(value);
    Ok(out)
}

/// A complete, envelope-validated request frame in raw wire form.
///
/// Produced only by [`RequestDecoder::decode_raw`], which has already checked
/// magic, opcode, length caps, and per-opcode shape — so [`RawRequest::parse`]
/// is total. This is the unit handed from the network code path (validity
/// checking) to the payload code path (parsing and execution).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawRequest {
    bytes: Box<[u8]>,
}

impl RawRequest {
    pub fn opcode(&self) -> Opcode {
        Opcode::from_u8(self.bytes[1]).expect("validated at decode")
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    /// Parse the validated frame into its typed form.
    pub fn parse(&self) -> RequestFrame {
        let key_len = u16::from_le_bytes([self.bytes[2], self.bytes[3]]) as usize;
        let key_end = REQUEST_HEADER_LEN + key_len;
        let key = self.bytes[REQUEST_HEADER_LEN..key_end].to_vec();
        match self.opcode() {
            Opcode::Get => RequestFrame::Get { key },
            Opcode::Put => RequestFrame::Put {
                key,
                value: self.bytes[key_end..].to_vec(),
            },
            Opcode::Delete => RequestFrame::Delete { key },
            Opcode::Ping => RequestFrame::Ping,
        }
    }
}

impl fmt::Display for RawRequest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}({}B)", self.opcode(), self.bytes.len())
    }
}

/// Accumulation buffer with a consumed-prefix cursor.
#[derive(Default)]
struct DecodeBuffer {
    buf: Vec<u8>,
    pos: usize,
}

impl DecodeBuffer {
    fn extend(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    fn available(&self) -> &[u8] {
        &self.buf[self.pos..]
    }

    fn consume(&mut self, n: usize) {
        self.pos += n;
        debug_assert!(self.pos <= self.buf.len());
        if self.pos == self.buf.len() {
            self.buf.clear();
            self.pos = 0;
        } else if self.pos >= 64 * 1024 {
            self.buf.drain(..self.pos);
            self.pos = 0;
        }
    }

    fn len(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// Envelope check on a request header. Fails as early as the bytes allow;
/// returns the total frame length once the header proves valid.
fn scan_request_header(avail: &[u8], limits: &WireLimits) -> Result<Option<usize>, WireError> {
    if avail.is_empty() {
        return Ok(None);
    }
    if avail[0] != REQUEST_MAGIC {
        return Err(WireError::BadMagic(avail[0]));
    }
    if avail.len() < 2 {
        return Ok(None);
    }
    let opcode = Opcode::from_u8(avail[1]).ok_or(WireError::UnknownOpcode(avail[1]))?;
    if avail.len() < REQUEST_HEADER_LEN {
        return Ok(None);
    }
    let key_len = u16::from_le_bytes([avail[2], avail[3]]) as usize;
    let value_len = u32::from_le_bytes([avail[4], avail[5], avail[6], avail[7]]) as usize;
    if value_len > limits.max_value_len {
        return Err(WireError::ValueTooLarge {
            len: value_len,
            cap: limits.max_value_len,
        });
    }
    match opcode {
        Opcode::Ping => {
            if key_len != 0 {
                return Err(WireError::KeyForbidden(opcode));
            }
            if value_len != 0 {
                return Err(WireError::ValueForbidden(opcode));
            }
        }
        Opcode::Get | Opcode::Delete => {
            if key_len == 0 {
                return Err(WireError::KeyRequired(opcode));
            }
            if value_len != 0 {
                return Err(WireError::ValueForbidden(opcode));
            }
        }
        Opcode::Put => {
            if key_len == 0 {
                return Err(WireError::KeyRequired(opcode));
            }
        }
    }
    Ok(Some(REQUEST_HEADER_LEN + key_len + value_len))
}

/// Streaming request decoder. Feed arbitrary chunks; complete frames come
/// out in arrival order. The first wire error poisons the decoder.
pub struct RequestDecoder {
    buf: DecodeBuffer,
    limits: WireLimits,
    failed: Option<WireError>,
}

impl RequestDecoder {
    pub fn new(limits: WireLimits) -> RequestDecoder {
        RequestDecoder {
            buf: DecodeBuffer::default(),
            limits,
            failed: None,
        }
    }

    /// Bytes buffered toward a not-yet-complete frame.
    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    fn next_frame_len(&mut self) -> Result<Option<usize>, WireError> {
        if let Some(e) = &self.failed {
            return Err(e.clone());
        }
        match scan_request_header(self.buf.available(), &self.limits) {
            Ok(Some(total)) if self.buf.len() >= total => Ok(Some(total)),
            Ok(_) => Ok(None),
            Err(e) => {
                self.failed = Some(e.clone());
                Err(e)
            }
        }
    }

    /// Append bytes and return every frame completed so far, parsed.
    pub fn decode(&mut self, bytes: &[u8]) -> Result<Vec<RequestFrame>, WireError> {
        Ok(self.decode_raw(bytes)?.iter().map(|r| r.parse()).collect())
    }

    /// Append bytes and return every completed frame in raw validated form.
    pub fn decode_raw(&mut self, bytes: &[u8]) -> Result<Vec<RawRequest>, WireError> {
        if let Some(e) = &self.failed {
            return Err(e.clone());
        }
        self.buf.extend(bytes);
        let mut out = Vec::new();
        while let Some(total) = self.next_frame_len()? {
            out.push(RawRequest {
                bytes: self.buf.available()[..total].into(),
            });
            self.buf.consume(total);
        }
        Ok(out)
    }
}

fn scan_response_header(avail: &[u8], limits: &WireLimits) -> Result<Option<usize>, WireError> {
    if avail.is_empty() {
        return Ok(None);
    }
    if avail[0] != RESPONSE_MAGIC {
        return Err(WireError::BadMagic(avail[0]));
    }
    if avail.len() < 2 {
        return Ok(None);
    }
    let status = Status::from_u8(avail[1]).ok_or(WireError::UnknownStatus(avail[1]))?;
    if avail.len() < RESPONSE_HEADER_LEN {
        return Ok(None);
    }
    let value_len = u32::from_le_bytes([avail[2], avail[3], avail[4], avail[5]]) as usize;
    if value_len > limits.max_value_len {
        return Err(WireError::ValueTooLarge {
            len: value_len,
            cap: limits.max_value_len,
        });
    }
    if status != Status::Ok && value_len != 0 {
        return Err(WireError::StatusValueForbidden(status));
    }
    Ok(Some(RESPONSE_HEADER_LEN + value_len))
}

/// Streaming response decoder; the client-side mirror of [`RequestDecoder`].
pub struct ResponseDecoder {
    buf: DecodeBuffer,
    limits: WireLimits,
    failed: Option<WireError>,
}

impl ResponseDecoder {
    pub fn new(limits: WireLimits) -> ResponseDecoder {
        ResponseDecoder {
            buf: DecodeBuffer::default(),
            limits,
            failed: None,
        }
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    pub fn decode(&mut self, bytes: &[u8]) -> Result<Vec<ResponseFrame>, WireError> {
        if let Some(e) = &self.failed {
            return Err(e.clone());
        }
        self.buf.extend(bytes);
        let mut out = Vec::new();
        loop {
            let scanned = match scan_response_header(self.buf.available(), &self.limits) {
                Ok(s) => s,
                Err(e) => {
                    self.failed = Some(e.clone());
                    return Err(e);
                }
            };
            match scanned {
                Some(total) if self.buf.len() >= total => {
                    let avail = self.buf.available();
                    let status = Status::from_u8(avail[1]).expect("validated by scan");
                    let frame = match status {
                        Status::Ok => ResponseFrame::Ok {
                            value: avail[RESPONSE_HEADER_LEN..total].to_vec(),
                        },
                        Status::NotFound => ResponseFrame::NotFound,
                        Status::BadRequest => ResponseFrame::BadRequest,
                        Status::ServerError => ResponseFrame::ServerError,
                    };
                    out.push(frame);
                    self.buf.consume(total);
                }
                _ => return Ok(out),
            }
        }
    }
}
