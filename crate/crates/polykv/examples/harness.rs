//! Experiment harness: run a plan of (model, workers, clients) cells, each
//! against a fresh server, and write results.csv plus SVG charts.
//!
//! ```text
//! cargo run --release --example harness -- --quick --out-dir results
//! cargo run --release --example harness -- --plan my.plan --out-dir results
//! ```
//!
//! Plan files: `set duration_s 2` / `run seda net=2 payload=2 clients=1,8,64`
//! lines; see the library docs for the full format.

fn main() {
    std::process::exit(polykv::harness::run_harness_cli());
}
