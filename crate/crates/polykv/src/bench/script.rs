//! Deterministic scripted sessions for comparing server output across
//! threading models.
//!
//! Each connection in a session gets a private keyspace and a reproducible
//! request script, so its response sequence is fully determined no matter
//! how the server schedules work internally. Running the same session
//! against two servers and comparing per-connection responses is therefore
//! a behavioral equivalence check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::mix;
use crate::client::{BlockingClient, ClientError};
use crate::netio::Endpoint;
use crate::protocol::{encode_response, RequestFrame, ResponseFrame};
use crate::store::hash_key;

const SCRIPT_SALT: u64 = 0x5343_5249_5054; // "SCRIPT"

/// The request script for one connection: a reproducible mix of PUT (40%),
/// GET (35%), DELETE (20%), and PING (5%) over a 64-key private keyspace.
/// Values vary in size and include empty ones.
pub fn scripted_requests(seed: u64, conn_id: usize, ops: usize) -> Vec<RequestFrame> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ SCRIPT_SALT, conn_id as u64));
    let mut out = Vec::with_capacity(ops);
    for _ in 0..ops {
        let k: usize = rng.gen_range(0..64);
        let key = format!("s{conn_id}:{k:02}").into_bytes();
        let roll: f64 = rng.gen();
        let frame = if roll < 0.40 {
            let len = rng.gen_range(0..=300);
            let mut value = vec![0u8; len];
            rng.fill(&mut value[..]);
            RequestFrame::Put { key, value }
        } else if roll < 0.75 {
            RequestFrame::Get { key }
        } else if roll < 0.95 {
            RequestFrame::Delete { key }
        } else {
            RequestFrame::Ping
        };
        out.push(frame);
    }
    out
}

/// Run a whole session: `conns` concurrent connections, each sending its
/// script one request at a time. Returns each connection's responses in
/// order.
pub fn run_scripted_session(
    endpoint: &Endpoint,
    seed: u64,
    conns: usize,
    ops_per_conn: usize,
) -> Result<Vec<Vec<ResponseFrame>>, ClientError> {
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for c in 0..conns {
            handles.push(scope.spawn(move || -> Result<Vec<ResponseFrame>, ClientError> {
                let mut client = BlockingClient::connect(endpoint)?;
                let script = scripted_requests(seed, c, ops_per_conn);
                let mut responses = Vec::with_capacity(script.len());
                for frame in &script {
                    responses.push(client.request(frame)?);
                }
                Ok(responses)
            }));
        }
        let mut out = Vec::with_capacity(conns);
        for h in handles {
            out.push(h.join().expect("session thread panicked")?);
        }
        Ok(out)
    })
}

/// 64-bit digest of a session's responses: per-connection wire bytes,
/// chained in connection order. Two servers that byte-identically answer
/// every connection produce the same digest.
pub fn session_digest(responses: &[Vec<ResponseFrame>]) -> u64 {
    let mut acc = 0u64;
    for frames in responses {
        let mut bytes = Vec::new();
        for f in frames {
            bytes.extend(encode_response(f).expect("decoded responses re-encode"));
        }
        acc = hash_key(acc, &bytes);
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scripts_are_deterministic_and_conn_private() {
        let a = scripted_requests(7, 0, 500);
        let b = scripted_requests(7, 0, 500);
        assert_eq!(a, b);
        let c = scripted_requests(7, 1, 500);
        assert_ne!(a, c, "different connections get different scripts");

        // Keyspace privacy: every keyed request carries the conn prefix.
        for frame in &c {
            if !matches!(frame, RequestFrame::Ping) {
                assert!(frame.key().starts_with(b"s1:"), "leaked key {:?}", frame.key());
            }
        }

        // The mix exercises every opcode.
        let count = |p: fn(&RequestFrame) -> bool| a.iter().filter(|f| p(f)).count();
        assert!(count(|f| matches!(f, RequestFrame::Put { .. })) > 100);
        assert!(count(|f| matches!(f, RequestFrame::Get { .. })) > 100);
        assert!(count(|f| matches!(f, RequestFrame::Delete { .. })) > 50);
        assert!(count(|f| matches!(f, RequestFrame::Ping)) > 5);

        // Some PUTs carry empty values (legal on the wire).
        assert!(a
            .iter()
            .any(|f| matches!(f, RequestFrame::Put { value, .. } if value.is_empty())));
    }

    #[test]
    fn digest_tracks_content() {
        let r1 = vec![vec![ResponseFrame::Ok { value: b"x".to_vec() }]];
        let r2 = vec![vec![ResponseFrame::Ok { value: b"y".to_vec() }]];
        assert_eq!(session_digest(&r1), session_digest(&r1));
        assert_ne!(session_digest(&r1), session_digest(&r2));
    }
}
