//! Behavioral equivalence check: every threading model must produce
//! byte-identical response streams for the same deterministic session.
//!
//! Each of five server shapes runs the same scripted workload (per-client
//! key spaces, mixed PUT/GET/DELETE/PING); the full response streams are
//! digested and compared. Exit 0 when all digests match, 1 otherwise.
//!
//! ```text
//! cargo run --release --example model_equivalence
//! ```

use polykv::bench::{run_scripted_session, session_digest};
use polykv::engine::{serve, ModelConfig, ServerConfig};
use polykv::netio::Endpoint;

fn main() {
    let configs: Vec<(&str, ModelConfig)> = vec![
        ("sped", ModelConfig::sped()),
        ("seda 2+4", ModelConfig::seda(2, 4)),
        ("seda-s 2 pairs", ModelConfig::seda_s(2)),
        ("amped 1+2", ModelConfig::amped(1, 2)),
        ("symped 2", ModelConfig::symped(2)),
    ];
    let seed = 4242;
    let conns = 4;
    let ops_per_conn = 2500;

    let dir = std::env::temp_dir();
    let pid = std::process::id();
    let mut digests: Vec<(String, u64)> = Vec::new();

    for (i, (label, model)) in configs.into_iter().enumerate() {
        let endpoint = Endpoint::Unix(dir.join(format!("kv-eq-{pid}-{i}.sock")));
        let handle = match serve(ServerConfig::new(model, endpoint.clone())) {
            Ok(h) => h,
            Err(e) => {
                eprintln!("error: cannot start {label}: {e}");
                std::process::exit(1);
            }
        };
        let responses = match run_scripted_session(&endpoint, seed, conns, ops_per_conn) {
            Ok(r) => r,
            Err(e) => {
                eprintln!("error: session against {label} failed: {e}");
                std::process::exit(1);
            }
        };
        let digest = session_digest(&responses);
        let total: usize = responses.iter().map(|r| r.len()).sum();
        println!("{label:<16} {total} responses  digest {digest:016x}");
        digests.push((label.to_string(), digest));
        if let Err(e) = handle.shutdown() {
            eprintln!("error: {label} shutdown: {e}");
            std::process::exit(1);
        }
    }

    let reference = digests[0].1;
    if digests.iter().all(|(_, d)| *d == reference) {
        println!("MATCH: all {} models agree", digests.len());
    } else {
        println!("MISMATCH:");
        for (label, d) in &digests {
            println!("  {label:<16} {d:016x}");
        }
        std::process::exit(1);
    }
}
