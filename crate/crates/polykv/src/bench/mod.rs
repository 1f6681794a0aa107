//! Closed-loop benchmark client: deterministic workload generation, dataset
//! preload, a readiness-loop measurement client, and repeat-series
//! statistics.
//!
//! Everything the benchmark sends is regenerable from a seed: record `i`'s
//! key and value depend only on the workload spec, and connection `c`'s
//! operation stream depends only on the spec and `c`. Two processes with the
//! same spec therefore agree on every byte, which is what lets the client
//! validate each GET response against locally recomputed truth.

mod measure;
mod script;

pub use measure::{run_measurement, MeasureResult, MeasureSpec};
pub use script::{run_scripted_session, scripted_requests, session_digest};

use std::io;
use std::sync::Arc;
use std::time::Duration;

use clap::Parser;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::client::{BlockingClient, ClientError};
use crate::netio::Endpoint;
use crate::protocol::WireError;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("benchmark needs at least one client connection")]
    NoClients,
    #[error("GET {key} returned a wrong or missing value")]
    Validation { key: String },
    #[error("PUT {key} was not acknowledged")]
    PutRejected { key: String },
    #[error("server closed a benchmark connection mid-run")]
    Disconnected,
    #[error("server sent a response with no request outstanding")]
    UnexpectedResponse,
    #[error("benchmark stalled: outstanding responses never arrived")]
    Stalled,
    #[error("preload spot check failed for record {idx}")]
    SpotCheck { idx: usize },
}

/// Deterministic workload description.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WorkloadSpec {
    /// Records preloaded into the store and addressed by operations.
    pub record_count: usize,
    /// Smallest value size, bytes (inclusive).
    pub min_value_len: usize,
    /// Largest value size, bytes (inclusive).
    pub max_value_len: usize,
    /// Fraction of operations that are GETs; the rest are PUTs.
    pub get_fraction: f64,
    /// Master seed for record contents and operation streams.
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            record_count: 30_000,
            min_value_len: 10,
            max_value_len: 1000,
            get_fraction: 0.9,
            seed: 42,
        }
    }
}

/// splitmix64-style stream splitter: one master seed, many independent
/// substreams.
pub(crate) fn mix(seed: u64, idx: u64) -> u64 {
    let mut z = seed ^ idx.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const VALUE_STREAM_SALT: u64 = 0x5641_4c55_4553; // "VALUES"
const OP_STREAM_SALT: u64 = 0x4f50_5354_5245_414d; // "OPSTREAM"

impl WorkloadSpec {
    pub fn key(&self, idx: usize) -> Vec<u8> {
        format!("key:{idx:08}").into_bytes()
    }

    /// Record `idx`'s value, regenerated from the seed. Sizes are
    /// log-uniform over `[min_value_len, max_value_len]`: the exponent is
    /// uniform, so each size decade gets equal probability mass.
    pub fn value(&self, idx: usize) -> Vec<u8> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed ^ VALUE_STREAM_SALT, idx as u64));
        let lo = (self.min_value_len as f64).ln();
        let hi = ((self.max_value_len + 1) as f64).ln();
        let x: f64 = rng.gen::<f64>() * (hi - lo) + lo;
        let size = (x.exp() as usize).clamp(self.min_value_len, self.max_value_len);
        let mut value = vec![0u8; size];
        rng.fill(&mut value[..]);
        value
    }

    /// P(size <= s) under the log-uniform construction in [`Self::value`].
    /// This is the analytical reference the size-distribution test checks
    /// samples against.
    pub fn value_size_cdf(&self, s: usize) -> f64 {
        let lo = (self.min_value_len as f64).ln();
        let hi = ((self.max_value_len + 1) as f64).ln();
        if s < self.min_value_len {
            return 0.0;
        }
        ((((s + 1) as f64).ln() - lo) / (hi - lo)).clamp(0.0, 1.0)
    }
}

/// The preload materialized: every record's key and value, index-addressable
/// so GET responses can be validated without any bookkeeping during the run.
pub struct Dataset {
    pub spec: WorkloadSpec,
    values: Vec<Vec<u8>>,
}

impl Dataset {
    pub fn new(spec: WorkloadSpec) -> Dataset {
        let values = (0..spec.record_count).map(|i| spec.value(i)).collect();
        Dataset { spec, values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn key(&self, idx: usize) -> Vec<u8> {
        self.spec.key(idx)
    }

    pub fn value(&self, idx: usize) -> &[u8] {
        &self.values[idx]
    }
}

/// One benchmark operation. PUTs rewrite the record's canonical value, so a
/// concurrent GET is correct no matter how operations interleave.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Get { idx: usize },
    Put { idx: usize },
}

/// Deterministic per-connection operation stream.
pub struct OpGen {
    rng: ChaCha8Rng,
    record_count: usize,
    get_fraction: f64,
}

impl OpGen {
    pub fn new(spec: &WorkloadSpec, stream_id: u64) -> OpGen {
        OpGen {
            rng: ChaCha8Rng::seed_from_u64(mix(spec.seed ^ OP_STREAM_SALT, stream_id)),
            record_count: spec.record_count,
            get_fraction: spec.get_fraction,
        }
    }

    pub fn next_op(&mut self) -> Op {
        let idx = self.rng.gen_range(0..self.record_count);
        if self.rng.gen_bool(self.get_fraction) {
            Op::Get { idx }
        } else {
            Op::Put { idx }
        }
    }
}

/// PUT every record, split across `threads` connections, then spot-check a
/// 1% sample by reading values back.
pub fn preload(endpoint: &Endpoint, dataset: &Dataset, threads: usize) -> Result<(), BenchError> {
    let threads = threads.max(1);
    let n = dataset.len();
    std::thread::scope(|scope| -> Result<(), BenchError> {
        let mut handles = Vec::new();
        for t in 0..threads {
            handles.push(scope.spawn(move || -> Result<(), BenchError> {
                let mut client = BlockingClient::connect(endpoint)?;
                let mut idx = t;
                while idx < n {
                    client.put(&dataset.key(idx), dataset.value(idx))?;
                    idx += threads;
                }
                Ok(())
            }));
        }
        for h in handles {
            h.join().expect("preload thread panicked")?;
        }
        Ok(())
    })?;

    // Spot check: 1% of records, deterministic sample.
    let mut client = BlockingClient::connect(endpoint)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(dataset.spec.seed, 0x5753_4654));
    let checks = (n / 100).max(1);
    for _ in 0..checks {
        let idx = rng.gen_range(0..n);
        match client.get(&dataset.key(idx))? {
            Some(v) if v == dataset.value(idx) => {}
            _ => return Err(BenchError::SpotCheck { idx }),
        }
    }
    Ok(())
}

/// A repeat series: warmup runs (discarded) then measured runs.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SeriesSpec {
    pub clients: usize,
    pub duration: Duration,
    pub warmups: usize,
    pub repeats: usize,
    /// Threads driving the client connections.
    pub client_threads: usize,
}

impl Default for SeriesSpec {
    fn default() -> Self {
        SeriesSpec {
            clients: 8,
            duration: Duration::from_secs(2),
            warmups: 1,
            repeats: 3,
            client_threads: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SeriesResult {
    pub tps_samples: Vec<f64>,
    pub tps_mean: f64,
    /// Sample standard deviation (n-1 denominator); 0 for a single repeat.
    pub tps_std: f64,
    /// Mean rounded to the nearest 5000, the reporting granularity.
    pub tps_rounded: u64,
    pub total_ops: u64,
}

pub const TPS_ROUNDING_STEP: u64 = 5000;

pub fn round_tps(mean: f64) -> u64 {
    let step = TPS_ROUNDING_STEP as f64;
    ((mean / step).round() * step) as u64
}

pub fn mean_and_sample_std(samples: &[f64]) -> (f64, f64) {
    if samples.is_empty() {
        return (0.0, 0.0);
    }
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    if samples.len() < 2 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>()
        / (samples.len() - 1) as f64;
    (mean, var.sqrt())
}

/// Run warmups then measured repeats against an already-preloaded server.
pub fn run_series(
    endpoint: &Endpoint,
    dataset: &Arc<Dataset>,
    series: &SeriesSpec,
) -> Result<SeriesResult, BenchError> {
    let spec = MeasureSpec {
        clients: series.clients,
        duration: series.duration,
        client_threads: series.client_threads,
    };
    for _ in 0..series.warmups {
        run_measurement(endpoint, dataset, &spec)?;
    }
    let mut samples = Vec::with_capacity(series.repeats);
    let mut total_ops = 0u64;
    for _ in 0..series.repeats {
        let r = run_measurement(endpoint, dataset, &spec)?;
        samples.push(r.tps);
        total_ops += r.ops;
    }
    let (tps_mean, tps_std) = mean_and_sample_std(&samples);
    Ok(SeriesResult {
        tps_samples: samples,
        tps_mean,
        tps_std,
        tps_rounded: round_tps(tps_mean),
        total_ops,
    })
}

/// Closed-loop benchmark against a running server.
#[derive(Debug, Parser)]
#[command(name = "benchclient", disable_version_flag = true)]
pub struct BenchArgs {
    /// Server endpoint: unix:<path> or tcp:<host>:<port>.
    #[arg(long)]
    pub connect: String,

    /// Concurrent client connections (each with one outstanding request).
    #[arg(long, default_value_t = 8)]
    pub clients: usize,

    /// Seconds per measured run.
    #[arg(long, default_value_t = 2.0)]
    pub duration_s: f64,

    /// Measured runs (reported with mean and sample stddev).
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,

    /// Discarded warmup runs before measuring.
    #[arg(long, default_value_t = 1)]
    pub warmups: usize,

    /// Records to preload and address.
    #[arg(long, default_value_t = 30_000)]
    pub records: usize,

    /// Fraction of operations that are GETs.
    #[arg(long, default_value_t = 0.9)]
    pub get_fraction: f64,

    /// Workload seed.
    #[arg(long, default_value_t = 42)]
    pub seed: u64,

    /// Skip the preload (the server must already hold the records).
    #[arg(long, default_value_t = false)]
    pub skip_preload: bool,

    /// Threads driving the client connections.
    #[arg(long, default_value_t = 4)]
    pub client_threads: usize,

    /// Emit results as JSON on stdout instead of text.
    #[arg(long, default_value_t = false)]
    pub json: bool,
}

#[derive(Debug, Serialize)]
struct BenchReport<'a> {
    endpoint: String,
    workload: &'a WorkloadSpec,
    clients: usize,
    duration_s: f64,
    warmups: usize,
    repeats: usize,
    tps_samples: &'a [f64],
    tps_mean: f64,
    tps_std: f64,
    tps_rounded: u64,
    total_ops: u64,
}

pub fn run_bench_cli() -> i32 {
    run_bench(BenchArgs::parse())
}

pub fn run_bench(args: BenchArgs) -> i32 {
    let endpoint: Endpoint = match args.connect.parse() {
        Ok(ep) => ep,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    if args.clients == 0 {
        eprintln!("error: {}", BenchError::NoClients);
        return 2;
    }
    let workload = WorkloadSpec {
        record_count: args.records,
        get_fraction: args.get_fraction,
        seed: args.seed,
        ..WorkloadSpec::default()
    };
    let dataset = Arc::new(Dataset::new(workload));
    if !args.skip_preload {
        eprintln!("preloading {} records", dataset.len());
        if let Err(e) = preload(&endpoint, &dataset, args.client_threads) {
            eprintln!("error: preload failed: {e}");
            return 1;
        }
    }
    let series = SeriesSpec {
        clients: args.clients,
        duration: Duration::from_secs_f64(args.duration_s),
        warmups: args.warmups,
        repeats: args.repeats,
        client_threads: args.client_threads,
    };
    eprintln!(
        "measuring: {} clients, {} x {:.1}s runs ({} warmup)",
        series.clients, series.repeats, args.duration_s, series.warmups
    );
    let result = match run_series(&endpoint, &dataset, &series) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    if args.json {
        let report = BenchReport {
            endpoint: endpoint.to_string(),
            workload: &workload,
            clients: args.clients,
            duration_s: args.duration_s,
            warmups: args.warmups,
            repeats: args.repeats,
            tps_samples: &result.tps_samples,
            tps_mean: result.tps_mean,
            tps_std: result.tps_std,
            tps_rounded: result.tps_rounded,
            total_ops: result.total_ops,
        };
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        for (i, s) in result.tps_samples.iter().enumerate() {
            println!("run {}: {:.0} tps", i + 1, s);
        }
        println!(
            "tps_mean={:.1} tps_std={:.1} tps_rounded={} ops={}",
            result.tps_mean, result.tps_std, result.tps_rounded, result.total_ops
        );
    }
    0
}
