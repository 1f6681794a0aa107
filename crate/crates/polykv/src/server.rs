//! Command-line server: flag parsing, model defaulting, signal-driven
//! shutdown, and periodic stats. The `serverd` example is a thin wrapper
//! around [`run_server_cli`].
//!
//! Exit codes: 0 clean shutdown, 1 runtime failure, 2 bad flags or model
//! configuration, 3 endpoint bind failure.

use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;

use clap::Parser;

use crate::engine::{serve, ModelConfig, ModelKind, ServeError, ServerConfig};
use crate::netio::Endpoint;
use crate::store::StoreConfig;

/// In-memory key-value cache server with selectable threading models.
#[derive(Debug, Parser)]
#[command(name = "serverd", disable_version_flag = true)]
pub struct ServerArgs {
    /// Threading model: sped, seda, seda-s, amped, symped.
    #[arg(long, default_value = "sped")]
    pub model: String,

    /// Dedicated network threads. Default depends on the model.
    #[arg(long)]
    pub net_threads: Option<usize>,

    /// Dedicated payload threads. Default depends on the model.
    #[arg(long)]
    pub payload_threads: Option<usize>,

    /// Endpoint to listen on: unix:<path> or tcp:<host>:<port>.
    #[arg(long, default_value = "tcp:127.0.0.1:7421")]
    pub listen: String,

    /// Close connections idle for this many seconds; 0 disables expiry.
    #[arg(long, default_value_t = 60)]
    pub idle_timeout_s: u64,

    /// Seconds between stats lines on stderr; 0 disables stats.
    #[arg(long, default_value_t = 10)]
    pub stats_interval_s: u64,

    /// Store bucket count (power of two).
    #[arg(long, default_value_t = crate::store::DEFAULT_BUCKET_COUNT)]
    pub buckets: usize,

    /// Shrink each accepted socket's kernel send buffer to this many bytes.
    /// Testing hook for the write-overflow handoff path.
    #[arg(long)]
    pub send_buffer: Option<usize>,

    /// Milliseconds shutdown waits for in-flight work.
    #[arg(long, default_value_t = 700)]
    pub shutdown_grace_ms: u64,
}

/// Fill in each model's conventional thread counts for flags the user
/// omitted. Explicit values always win (and then must pass validation).
/// For `seda-s`, giving either count alone sets both, since the stages are
/// paired one-to-one anyway.
pub fn resolve_model(
    kind: ModelKind,
    net: Option<usize>,
    payload: Option<usize>,
) -> ModelConfig {
    match kind {
        ModelKind::Sped => ModelConfig {
            kind,
            n_network: net.unwrap_or(0),
            n_payload: payload.unwrap_or(0),
        },
        ModelKind::Seda => ModelConfig {
            kind,
            n_network: net.unwrap_or(1),
            n_payload: payload.unwrap_or(1),
        },
        ModelKind::SedaS => {
            let pairs = net.or(payload).unwrap_or(1);
            ModelConfig {
                kind,
                n_network: net.unwrap_or(pairs),
                n_payload: payload.unwrap_or(pairs),
            }
        }
        ModelKind::Amped => ModelConfig {
            kind,
            n_network: net.unwrap_or(1),
            n_payload: payload.unwrap_or(1),
        },
        ModelKind::Symped => ModelConfig {
            kind,
            n_network: net.unwrap_or(1),
            n_payload: payload.unwrap_or(0),
        },
    }
}

static SHUTDOWN_FLAG: AtomicBool = AtomicBool::new(false);

extern "C" fn on_signal(_sig: libc::c_int) {
    SHUTDOWN_FLAG.store(true, Ordering::SeqCst);
}

/// Route SIGINT and SIGTERM to a graceful drain.
pub fn install_shutdown_signal_handlers() {
    unsafe {
        let handler = on_signal as *const () as libc::sighandler_t;
        libc::signal(libc::SIGINT, handler);
        libc::signal(libc::SIGTERM, handler);
    }
}

pub fn shutdown_requested() -> bool {
    SHUTDOWN_FLAG.load(Ordering::SeqCst)
}

/// Parse argv and run the server until a shutdown signal. Returns the
/// process exit code.
pub fn run_server_cli() -> i32 {
    run_server(ServerArgs::parse())
}

pub fn run_server(args: ServerArgs) -> i32 {
    let kind: ModelKind = match args.model.parse() {
        Ok(k) => k,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let model = resolve_model(kind, args.net_threads, args.payload_threads);
    if let Err(e) = model.validate() {
        eprintln!("error: {e}");
        return 2;
    }
    let endpoint: Endpoint = match args.listen.parse() {
        Ok(ep) => ep,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let config = ServerConfig {
        model,
        endpoint,
        store: StoreConfig {
            bucket_count: args.buckets,
            ..StoreConfig::default()
        },
        idle_timeout: Duration::from_secs(args.idle_timeout_s),
        shutdown_grace: Duration::from_millis(args.shutdown_grace_ms),
        send_buffer: args.send_buffer,
    };

    install_shutdown_signal_handlers();
    let handle = match serve(config) {
        Ok(h) => h,
        Err(e @ ServeError::Bind { .. }) => {
            eprintln!("error: {e}");
            return 3;
        }
        Err(ServeError::Config(e)) => {
            eprintln!("error: {e}");
            return 2;
        }
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    eprintln!("listening on {} ({})", handle.endpoint(), handle.topology().describe());

    let stats_every = Duration::from_secs(args.stats_interval_s);
    let mut last_stats = std::time::Instant::now();
    loop {
        if shutdown_requested() {
            eprintln!("shutdown signal received, draining");
            break;
        }
        if !handle.is_running() {
            break;
        }
        std::thread::sleep(Duration::from_millis(50));
        if !stats_every.is_zero() && last_stats.elapsed() >= stats_every {
            last_stats = std::time::Instant::now();
            let c = handle.counters();
            eprintln!(
                "stats conns={} accepted={} executed={} dispatched={} inline={} handoffs={} closed={} closed_idle={}",
                handle.connection_count(),
                c.accepted.load(Ordering::Relaxed),
                c.requests_executed.load(Ordering::Relaxed),
                c.jobs_dispatched.load(Ordering::Relaxed),
                c.jobs_inline.load(Ordering::Relaxed),
                c.write_handoffs.load(Ordering::Relaxed),
                c.closed.load(Ordering::Relaxed),
                c.closed_idle.load(Ordering::Relaxed),
            );
        }
    }

    match handle.shutdown() {
        Ok(()) => {
            eprintln!("shutdown complete");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_defaults_fill_in_omitted_counts() {
        let cases = [
            (ModelKind::Sped, None, None, 0, 0),
            (ModelKind::Seda, None, None, 1, 1),
            (ModelKind::Seda, Some(2), Some(4), 2, 4),
            (ModelKind::SedaS, None, None, 1, 1),
            (ModelKind::SedaS, Some(3), None, 3, 3),
            (ModelKind::SedaS, None, Some(2), 2, 2),
            (ModelKind::Amped, None, None, 1, 1),
            (ModelKind::Amped, Some(0), Some(2), 0, 2),
            (ModelKind::Symped, None, None, 1, 0),
            (ModelKind::Symped, Some(4), None, 4, 0),
        ];
        for (kind, net, payload, want_net, want_payload) in cases {
            let m = resolve_model(kind, net, payload);
            assert_eq!((m.n_network, m.n_payload), (want_net, want_payload), "{kind}");
            m.validate().expect("defaults must validate");
        }
    }

    #[test]
    fn explicit_invalid_counts_fail_validation() {
        // Auto-pairing never overrides explicit values.
        let m = resolve_model(ModelKind::SedaS, Some(2), Some(3));
        assert!(m.validate().is_err());
        let m = resolve_model(ModelKind::Sped, Some(1), None);
        assert!(m.validate().is_err());
    }

    #[test]
    fn args_parse_with_defaults() {
        let args = ServerArgs::try_parse_from(["serverd"]).unwrap();
        assert_eq!(args.model, "sped");
        assert_eq!(args.listen, "tcp:127.0.0.1:7421");
        assert_eq!(args.net_threads, None);

        let args = ServerArgs::try_parse_from([
            "serverd",
            "--model",
            "seda",
            "--net-threads",
            "2",
            "--payload-threads",
            "4",
            "--listen",
            "unix:/tmp/kv.sock",
        ])
        .unwrap();
        assert_eq!(args.model, "seda");
        assert_eq!(args.net_threads, Some(2));
        assert_eq!(args.payload_threads, Some(4));

        assert!(ServerArgs::try_parse_from(["serverd", "--bogus"]).is_err());
    }
}
