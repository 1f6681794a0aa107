//! Benchmark-client behavior: deterministic workload generation, exact
//! agreement between client-side and server-side operation counts,
//! validation of served values, and the `benchclient` example end to end.

use std::process::{Command, Stdio};
use std::sync::atomic::Ordering;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use polykv::bench::{
    preload, run_scripted_session, run_series, scripted_requests, session_digest, BenchError,
    Dataset, OpGen, SeriesSpec, WorkloadSpec,
};
use polykv::engine::{serve, ModelConfig, ServerConfig};
use polykv::netio::Endpoint;

static GATE: Mutex<()> = Mutex::new(());

fn lock() -> MutexGuard<'static, ()> {
    GATE.lock().unwrap_or_else(|p| p.into_inner())
}

fn unix_endpoint(tag: &str) -> Endpoint {
    Endpoint::Unix(
        std::env::temp_dir().join(format!("kv-bb-{tag}-{}.sock", std::process::id())),
    )
}

fn start(tag: &str, config: ModelConfig) -> (polykv::engine::ServerHandle, Endpoint) {
    let ep = unix_endpoint(tag);
    let _ = ep.cleanup_socket_file();
    let handle = serve(ServerConfig::new(config, ep.clone())).expect("server starts");
    (handle, ep)
}

#[test]
fn workload_generation_is_deterministic() {
    let spec = WorkloadSpec {
        record_count: 500,
        seed: 12345,
        ..WorkloadSpec::default()
    };
    let a = Dataset::new(spec);
    let b = Dataset::new(spec);
    assert_eq!(a.len(), 500);
    for idx in 0..a.len() {
        assert_eq!(a.key(idx), b.key(idx));
        assert_eq!(a.value(idx), b.value(idx));
    }

    // Same (spec, stream) replays the same operations; other streams and
    // other seeds diverge.
    let ops = |spec: &WorkloadSpec, stream: u64| {
        let mut g = OpGen::new(spec, stream);
        (0..1000).map(|_| g.next_op()).collect::<Vec<_>>()
    };
    assert_eq!(ops(&spec, 3), ops(&spec, 3));
    assert_ne!(ops(&spec, 3), ops(&spec, 4));
    let reseeded = WorkloadSpec { seed: 54321, ..spec };
    assert_ne!(ops(&spec, 3), ops(&reseeded, 3));
    let values_differ = (0..a.len()).any(|i| {
        a.value(i) != Dataset::new(reseeded).value(i) || a.key(i) != Dataset::new(reseeded).key(i)
    });
    assert!(values_differ, "reseeding must change record contents");

    // Scripted sessions replay exactly and differ per connection.
    assert_eq!(scripted_requests(7, 0, 200), scripted_requests(7, 0, 200));
    assert_ne!(scripted_requests(7, 0, 200), scripted_requests(7, 1, 200));
    assert_ne!(scripted_requests(7, 0, 200), scripted_requests(8, 0, 200));
}

#[test]
fn scripted_sessions_reproduce_across_server_instances() {
    let _g = lock();
    let mut digests = Vec::new();
    for round in 0..2 {
        let (handle, ep) = start(&format!("script{round}"), ModelConfig::sped());
        let responses = run_scripted_session(&ep, 11, 2, 500).expect("session runs");
        digests.push(session_digest(&responses));
        handle.shutdown().expect("clean shutdown");
    }
    assert_eq!(
        digests[0], digests[1],
        "same script against a fresh server must yield identical responses"
    );
}

#[test]
fn server_counters_agree_with_client_completions() {
    let _g = lock();
    let (handle, ep) = start("counters", ModelConfig::symped(1));
    let dataset = Arc::new(Dataset::new(WorkloadSpec {
        record_count: 400,
        ..WorkloadSpec::default()
    }));
    preload(&ep, &dataset, 2).expect("preload");
    let spot_checks = (dataset.len() / 100).max(1) as u64;
    let after_preload = handle.counters().requests_executed.load(Ordering::Relaxed);
    assert_eq!(
        after_preload,
        dataset.len() as u64 + spot_checks,
        "preload executes one PUT per record plus its spot-check GETs"
    );

    let series = SeriesSpec {
        clients: 2,
        duration: Duration::from_millis(400),
        warmups: 0,
        repeats: 2,
        client_threads: 1,
    };
    let result = run_series(&ep, &dataset, &series).expect("series runs");
    let executed = handle.counters().requests_executed.load(Ordering::Relaxed);
    handle.shutdown().expect("clean shutdown");

    assert!(result.total_ops > 0);
    assert_eq!(
        executed,
        after_preload + result.total_ops,
        "every client-completed operation is executed exactly once server-side"
    );
    assert_eq!(result.tps_samples.len(), 2);
}

#[test]
fn throughput_is_duration_invariant() {
    let _g = lock();
    let (handle, ep) = start("linear", ModelConfig::sped());
    let dataset = Arc::new(Dataset::new(WorkloadSpec {
        record_count: 2000,
        ..WorkloadSpec::default()
    }));
    preload(&ep, &dataset, 2).expect("preload");
    let run = |millis: u64| {
        let series = SeriesSpec {
            clients: 2,
            duration: Duration::from_millis(millis),
            warmups: 1,
            repeats: 2,
            client_threads: 1,
        };
        run_series(&ep, &dataset, &series).expect("series runs")
    };
    let short = run(500);
    let long = run(1000);
    handle.shutdown().expect("clean shutdown");

    // Rates, not totals, are the invariant: doubling the window must not
    // move the measured tps much.
    let ratio = long.tps_mean / short.tps_mean;
    assert!(
        (0.7..=1.43).contains(&ratio),
        "tps moved {ratio:.2}x between 0.5s and 1s windows ({:.0} vs {:.0})",
        short.tps_mean,
        long.tps_mean
    );
    // And the op totals scale with the window.
    let op_ratio = long.total_ops as f64 / short.total_ops as f64;
    assert!(
        (1.4..=2.9).contains(&op_ratio),
        "2x window should do roughly 2x ops, got {op_ratio:.2}x"
    );
}

#[test]
fn zero_clients_is_rejected() {
    let _g = lock();
    let (handle, ep) = start("zeroc", ModelConfig::sped());
    let dataset = Arc::new(Dataset::new(WorkloadSpec {
        record_count: 10,
        ..WorkloadSpec::default()
    }));
    let series = SeriesSpec {
        clients: 0,
        duration: Duration::from_millis(100),
        warmups: 0,
        repeats: 1,
        client_threads: 1,
    };
    let err = run_series(&ep, &dataset, &series).expect_err("zero clients must fail");
    assert!(matches!(err, BenchError::NoClients), "got {err:?}");
    handle.shutdown().expect("clean shutdown");
}

#[test]
fn served_values_are_validated_against_the_workload() {
    let _g = lock();
    let (handle, ep) = start("validate", ModelConfig::sped());
    let preloaded = Dataset::new(WorkloadSpec {
        record_count: 300,
        seed: 1,
        ..WorkloadSpec::default()
    });
    preload(&ep, &preloaded, 1).expect("preload");

    // Same keys, different seed: the stored bytes no longer match what the
    // measurement expects, so its GET validation must catch the corruption.
    let expected = Arc::new(Dataset::new(WorkloadSpec {
        record_count: 300,
        seed: 2,
        get_fraction: 1.0,
        ..WorkloadSpec::default()
    }));
    let series = SeriesSpec {
        clients: 1,
        duration: Duration::from_millis(300),
        warmups: 0,
        repeats: 1,
        client_threads: 1,
    };
    let err = run_series(&ep, &expected, &series).expect_err("wrong bytes must fail");
    assert!(
        matches!(err, BenchError::Validation { .. }),
        "expected a validation failure, got {err:?}"
    );
    handle.shutdown().expect("clean shutdown");
}

// --- benchclient example: process-level contract ------------------------

fn example_bin(name: &str) -> Option<std::path::PathBuf> {
    let exe = std::env::current_exe().ok()?;
    for dir in exe.ancestors() {
        let candidate = dir.join("examples").join(name);
        if candidate.is_file() {
            return Some(candidate);
        }
    }
    None
}

#[test]
fn benchclient_reports_json_and_exits_zero() {
    let _g = lock();
    let Some(bin) = example_bin("benchclient") else {
        println!("note: examples/benchclient not built in this invocation; run the full suite");
        return;
    };
    let (handle, ep) = start("cli", ModelConfig::seda(1, 1));
    let out = Command::new(&bin)
        .args([
            "--connect",
            &ep.to_string(),
            "--clients",
            "2",
            "--duration-s",
            "0.3",
            "--repeats",
            "2",
            "--warmups",
            "0",
            "--records",
            "1000",
            "--client-threads",
            "1",
            "--json",
        ])
        .stderr(Stdio::null())
        .output()
        .expect("run benchclient");
    handle.shutdown().expect("clean shutdown");

    assert_eq!(out.status.code(), Some(0), "benchclient exits zero");
    let report: serde_json::Value =
        serde_json::from_slice(&out.stdout).expect("stdout is a json report");
    assert_eq!(report["clients"], 2);
    assert_eq!(report["repeats"], 2);
    assert_eq!(report["tps_samples"].as_array().map(|a| a.len()), Some(2));
    assert!(report["tps_mean"].as_f64().unwrap() > 0.0);
    assert_eq!(report["tps_rounded"].as_u64().unwrap() % 5000, 0);
    assert!(report["total_ops"].as_u64().unwrap() > 0);
}

#[test]
fn benchclient_rejects_zero_clients() {
    let _g = lock();
    let Some(bin) = example_bin("benchclient") else {
        println!("note: examples/benchclient not built in this invocation; run the full suite");
        return;
    };
    let status = Command::new(&bin)
        .args(["--connect", "unix:/tmp/never-dialed.sock", "--clients", "0"])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .status()
        .expect("run benchclient");
    assert_eq!(status.code(), Some(2), "config errors exit 2");
}
