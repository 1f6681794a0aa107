//! Key-value cache server daemon.
//!
//! ```text
//! cargo run --release --example serverd -- --model symped --net-threads 4 --listen tcp:127.0.0.1:7421
//! ```
//!
//! Models: sped | seda | seda-s | amped | symped. SIGINT/SIGTERM drain
//! in-flight work, then exit 0.

fn main() {
    std::process::exit(polykv::server::run_server_cli());
}
