//! PolyKV: an in-memory key-value cache server whose threading architecture is
//! selected at startup, plus the tooling to measure how each architecture
//! performs.
//!
//! The server separates its work into three task classes: accepting
//! connections (and expiring idle ones), network communication (readiness
//! polling, socket reads/writes, frame extraction), and payload work (request
//! parsing, the store operation, building the response). How those classes map
//! onto OS threads is the *threading model*:
//!
//! | model    | accept | network threads | payload threads |
//! |----------|--------|-----------------|-----------------|
//! | `sped`   | 1      | 0 (in accept)   | 0 (in accept)   |
//! | `seda`   | 1      | N1 >= 1         | N2 >= 1         |
//! | `seda-s` | 1      | N >= 1          | N (paired 1:1)  |
//! | `amped`  | 1      | 0 or 1          | N >= 1          |
//! | `symped` | 1      | N >= 1          | 0 (in network)  |
//!
//! All models serve the same binary GET/PUT/DELETE/PING protocol over Unix or
//! TCP sockets and produce byte-identical responses for the same request
//! streams; only the concurrency structure differs. See [`engine`] for the
//! topology rules and [`protocol`] for the exact wire layout.
//!
//! The crate is organized bottom-up:
//!
//! - [`protocol`]: wire format, streaming encoders/decoders.
//! - [`store`]: the concurrent hash-of-trees keyspace.
//! - [`netio`]: endpoints, readiness event loop, per-connection I/O state.
//! - [`engine`]: threading models, job queues, dispatch, the server itself.
//! - [`server`]: command-line front end used by `examples/serverd.rs`.
//! - [`client`]: a small blocking client for tests, tools, and preloading.
//! - [`bench`]: workload generation and the closed-loop benchmark client.
//! - [`harness`]: experiment plans, CSV results, SVG charts.
//!
//! Runnable entry points live in `examples/`: `serverd` (the server),
//! `benchclient` (the load generator), `harness` (full experiment sweeps),
//! `model_equivalence` (byte-equivalence demo across all five models), and
//! `put_get` (minimal client usage).

pub mod bench;
pub mod client;
pub mod engine;
pub mod harness;
pub mod netio;
pub mod protocol;
pub mod server;
pub mod store;
