//! Closed-loop benchmark client: preload a keyspace, then measure
//! request/response throughput with at most one outstanding request per
//! connection.
//!
//! ```text
//! cargo run --release --example benchclient -- --connect tcp:127.0.0.1:7421 --clients 16 --json
//! ```

fn main() {
    std::process::exit(polykv::bench::run_bench_cli());
}
