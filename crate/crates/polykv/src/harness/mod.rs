//! Experiment harness: run a plan of (model, thread counts, client count)
//! cells against freshly started servers, collect throughput rows, and emit
//! CSV plus SVG charts and summary tables.
//!
//! Each cell gets its own server on its own unix socket: start, preload,
//! measure, stop, then verify the socket cleaned up and the address is
//! immediately reusable. A failing cell produces an error row; the plan
//! keeps going.

pub mod chart;

use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::Parser;
use serde::Serialize;

use crate::bench::{preload, run_series, Dataset, SeriesSpec, WorkloadSpec};
use crate::client::BlockingClient;
use crate::engine::{serve, ModelConfig, ModelKind, ServerConfig, ServerHandle};
use crate::netio::{Endpoint, Listener};
use crate::server::resolve_model;

pub const CSV_HEADER: &str =
    "model,n_net,n_payload,clients,duration_s,repeats,tps_mean,tps_std,tps_rounded,status";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlanError {
    #[error("line {line}: {msg}")]
    Line { line: usize, msg: String },
    #[error("plan has no run lines")]
    Empty,
}

/// One measurement cell: a server shape and an offered load.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanCell {
    pub model: ModelConfig,
    pub clients: usize,
}

/// A full experiment: global knobs plus the cells to run.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub workload: WorkloadSpec,
    pub duration: Duration,
    pub repeats: usize,
    pub warmups: usize,
    pub cells: Vec<PlanCell>,
}

impl Plan {
    /// Parse the plan text format:
    ///
    /// ```text
    /// # comment
    /// set duration_s 2
    /// set repeats 3
    /// set warmups 1
    /// set records 30000
    /// set seed 42
    /// set get_fraction 0.9
    ///
    /// run sped clients=1,2,4
    /// run seda net=2 payload=2 clients=8,16
    /// ```
    ///
    /// `run` lines expand into one cell per clients value. Omitted net= or
    /// payload= counts take the model's defaults.
    pub fn parse(text: &str) -> Result<Plan, PlanError> {
        let err = |line: usize, msg: String| PlanError::Line { line, msg };
        let mut plan = Plan {
            workload: WorkloadSpec::default(),
            duration: Duration::from_secs(2),
            repeats: 3,
            warmups: 1,
            cells: Vec::new(),
        };
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut words = line.split_whitespace();
            match words.next() {
                Some("set") => {
                    let key = words
                        .next()
                        .ok_or_else(|| err(line_no, "set needs a key".into()))?;
                    let value = words
                        .next()
                        .ok_or_else(|| err(line_no, format!("set {key} needs a value")))?;
                    if let Some(extra) = words.next() {
                        return Err(err(line_no, format!("unexpected token {extra:?}")));
                    }
                    let bad = |what: &str| err(line_no, format!("{key} must be {what} (got {value:?})"));
                    match key {
                        "duration_s" => {
                            let v: f64 = value.parse().map_err(|_| bad("a number"))?;
                            if v <= 0.0 {
                                return Err(bad("positive"));
                            }
                            plan.duration = Duration::from_secs_f64(v);
                        }
                        "repeats" => {
                            plan.repeats = value.parse().map_err(|_| bad("an integer"))?;
                            if plan.repeats == 0 {
                                return Err(bad("at least 1"));
                            }
                        }
                        "warmups" => plan.warmups = value.parse().map_err(|_| bad("an integer"))?,
                        "records" => {
                            plan.workload.record_count =
                                value.parse().map_err(|_| bad("an integer"))?;
                            if plan.workload.record_count == 0 {
                                return Err(bad("at least 1"));
                            }
                        }
                        "seed" => plan.workload.seed = value.parse().map_err(|_| bad("an integer"))?,
                        "get_fraction" => {
                            let v: f64 = value.parse().map_err(|_| bad("a number"))?;
                            if !(0.0..=1.0).contains(&v) {
                                return Err(bad("between 0 and 1"));
                            }
                            plan.workload.get_fraction = v;
                        }
                        other => return Err(err(line_no, format!("unknown setting {other:?}"))),
                    }
                }
                Some("run") => {
                    let model_word = words
                        .next()
                        .ok_or_else(|| err(line_no, "run needs a model".into()))?;
                    let kind: ModelKind = model_word
                        .parse()
                        .map_err(|e| err(line_no, format!("{e}")))?;
                    let mut net = None;
                    let mut payload = None;
                    let mut clients: Option<Vec<usize>> = None;
                    for word in words {
                        let (k, v) = word
                            .split_once('=')
                            .ok_or_else(|| err(line_no, format!("expected key=value, got {word:?}")))?;
                        match k {
                            "net" => {
                                net = Some(v.parse().map_err(|_| {
                                    err(line_no, format!("net must be an integer (got {v:?})"))
                                })?)
                            }
                            "payload" => {
                                payload = Some(v.parse().map_err(|_| {
                                    err(line_no, format!("payload must be an integer (got {v:?})"))
                                })?)
                            }
                            "clients" => {
                                let mut list = Vec::new();
                                for part in v.split(',') {
                                    let n: usize = part.parse().map_err(|_| {
                                        err(line_no, format!("bad clients value {part:?}"))
                                    })?;
                                    if n == 0 {
                                        return Err(err(line_no, "clients must be ≥ 1".into()));
                                    }
                                    list.push(n);
                                }
                                clients = Some(list);
                            }
                            other => {
                                return Err(err(line_no, format!("unknown run option {other:?}")))
                            }
                        }
                    }
                    let clients = clients
                        .ok_or_else(|| err(line_no, "run needs clients=<n,...>".into()))?;
                    let model = resolve_model(kind, net, payload);
                    model
                        .validate()
                        .map_err(|e| err(line_no, format!("{e}")))?;
                    for c in clients {
                        plan.cells.push(PlanCell { model, clients: c });
                    }
                }
                Some(other) => {
                    return Err(err(
                        line_no,
                        format!("expected `set` or `run`, got {other:?}"),
                    ))
                }
                None => unreachable!("blank lines are skipped"),
            }
        }
        if plan.cells.is_empty() {
            return Err(PlanError::Empty);
        }
        Ok(plan)
    }
}

pub fn available_cores() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

/// The full comparison at desk scale: a client sweep per model at a
/// reference worker count, plus a worker-count sweep per multi-threaded
/// model at fixed load. `cores` caps the worker count so server threads and
/// the 4 client threads don't thrash each other.
pub fn default_plan(cores: usize) -> Plan {
    let w = cores.saturating_sub(4).clamp(1, 4);
    let mut cells = Vec::new();
    for &c in &[1usize, 2, 4, 8, 16, 32, 64] {
        for model in [
            ModelConfig::sped(),
            ModelConfig::seda(w, w),
            ModelConfig::seda_s(w),
            ModelConfig::amped(1, w),
            ModelConfig::symped(w),
        ] {
            cells.push(PlanCell { model, clients: c });
        }
    }
    for n in 1..=w {
        for model in [
            ModelConfig::seda(n, n),
            ModelConfig::seda_s(n),
            ModelConfig::amped(1, n),
            ModelConfig::symped(n),
        ] {
            let cell = PlanCell { model, clients: 32 };
            if !cells.contains(&cell) {
                cells.push(cell);
            }
        }
    }
    Plan {
        workload: WorkloadSpec::default(),
        duration: Duration::from_secs(2),
        repeats: 3,
        warmups: 1,
        cells,
    }
}

/// A minutes-to-seconds shrink of the default plan, for smoke tests.
pub fn quick_plan() -> Plan {
    let mut cells = Vec::new();
    for &c in &[2usize, 8] {
        for model in [
            ModelConfig::sped(),
            ModelConfig::seda(1, 1),
            ModelConfig::seda_s(1),
            ModelConfig::amped(1, 1),
            ModelConfig::symped(1),
        ] {
            cells.push(PlanCell { model, clients: c });
        }
    }
    Plan {
        workload: WorkloadSpec {
            record_count: 2000,
            ..WorkloadSpec::default()
        },
        duration: Duration::from_millis(300),
        repeats: 2,
        warmups: 1,
        cells,
    }
}

/// How each cell's server is started.
#[derive(Debug, Clone)]
pub enum Launcher {
    /// Server threads live in the harness process (default; no extra
    /// processes, exact in-process counters available).
    InProcess,
    /// Spawn a server binary per cell and stop it with SIGTERM. Isolates
    /// server and client into separate processes.
    Subprocess { server_bin: PathBuf },
}

impl Launcher {
    fn describe(&self) -> String {
        match self {
            Launcher::InProcess => "in-process".to_string(),
            Launcher::Subprocess { server_bin } => {
                format!("subprocess:{}", server_bin.display())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMeta {
    pub started_unix: u64,
    pub duration_s: f64,
    pub repeats: usize,
    pub warmups: usize,
    pub records: usize,
    pub seed: u64,
    pub launcher: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub model: String,
    pub n_net: usize,
    pub n_payload: usize,
    pub clients: usize,
    pub duration_s: f64,
    pub repeats: usize,
    pub tps_mean: f64,
    pub tps_std: f64,
    pub tps_rounded: u64,
    pub status: String,
}

impl ResultRow {
    pub fn config_label(&self) -> String {
        format!("{} {}+{}", self.model, self.n_net, self.n_payload)
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultTable {
    pub meta: RunMeta,
    pub rows: Vec<ResultRow>,
}

enum RunningServer {
    InProcess(ServerHandle),
    Subprocess(std::process::Child),
}

fn launch(
    launcher: &Launcher,
    model: ModelConfig,
    endpoint: &Endpoint,
) -> Result<RunningServer, String> {
    match launcher {
        Launcher::InProcess => {
            let config = ServerConfig::new(model, endpoint.clone());
            let handle = serve(config).map_err(|e| format!("serve failed: {e}"))?;
            Ok(RunningServer::InProcess(handle))
        }
        Launcher::Subprocess { server_bin } => {
            let child = std::process::Command::new(server_bin)
                .args([
                    "--model",
                    model.kind.as_str(),
                    "--net-threads",
                    &model.n_network.to_string(),
                    "--payload-threads",
                    &model.n_payload.to_string(),
                    "--listen",
                    &endpoint.to_string(),
                    "--stats-interval-s",
                    "0",
                ])
                .stdin(std::process::Stdio::null())
                .stdout(std::process::Stdio::null())
                .stderr(std::process::Stdio::null())
                .spawn()
                .map_err(|e| format!("cannot spawn {}: {e}", server_bin.display()))?;
            // Readiness: the endpoint answers a ping.
            let mut client = BlockingClient::connect_retry(endpoint, Duration::from_secs(5))
                .map_err(|e| format!("server did not come up: {e}"))?;
            client.ping().map_err(|e| format!("readiness ping failed: {e}"))?;
            Ok(RunningServer::Subprocess(child))
        }
    }
}

fn stop(server: RunningServer) -> Result<(), String> {
    match server {
        RunningServer::InProcess(handle) => {
            handle.shutdown().map_err(|e| format!("shutdown failed: {e}"))
        }
        RunningServer::Subprocess(mut child) => {
            unsafe {
                libc::kill(child.id() as libc::pid_t, libc::SIGTERM);
            }
            for _ in 0..100 {
                match child.try_wait() {
                    Ok(Some(status)) => {
                        return if status.success() {
                            Ok(())
                        } else {
                            Err(format!("server exited with {status}"))
                        };
                    }
                    Ok(None) => std::thread::sleep(Duration::from_millis(50)),
                    Err(e) => return Err(format!("wait failed: {e}")),
                }
            }
            let _ = child.kill();
            let _ = child.wait();
            Err("server ignored SIGTERM; killed".to_string())
        }
    }
}

/// After a cell ends, its address must be immediately reusable: the unix
/// socket file is gone and a fresh bind succeeds.
fn check_endpoint_reusable(endpoint: &Endpoint) -> Result<(), String> {
    if let Endpoint::Unix(path) = endpoint {
        if path.exists() {
            return Err("socket file left behind".to_string());
        }
    }
    let l = Listener::bind(endpoint).map_err(|e| format!("address not rebindable: {e}"))?;
    drop(l);
    let _ = endpoint.cleanup_socket_file();
    Ok(())
}

/// Run every cell in the plan. Infrastructure failures become error rows,
/// never panics; `progress` gets one line per cell.
pub fn run_plan<F: FnMut(&str)>(
    plan: &Plan,
    launcher: &Launcher,
    socket_dir: &Path,
    mut progress: F,
) -> ResultTable {
    let dataset = Arc::new(Dataset::new(plan.workload));
    let meta = RunMeta {
        started_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        duration_s: plan.duration.as_secs_f64(),
        repeats: plan.repeats,
        warmups: plan.warmups,
        records: plan.workload.record_count,
        seed: plan.workload.seed,
        launcher: launcher.describe(),
    };
    let mut rows = Vec::with_capacity(plan.cells.len());
    let pid = std::process::id();
    for (i, cell) in plan.cells.iter().enumerate() {
        let endpoint = Endpoint::Unix(socket_dir.join(format!("pkv-{pid}-{i}.sock")));
        let series = SeriesSpec {
            clients: cell.clients,
            duration: plan.duration,
            warmups: plan.warmups,
            repeats: plan.repeats,
            client_threads: 4,
        };
        let mut status = "ok".to_string();
        let mut result = None;
        match launch(launcher, cell.model, &endpoint) {
            Ok(server) => {
                let run = preload(&endpoint, &dataset, 4)
                    .map_err(|e| format!("preload failed: {e}"))
                    .and_then(|()| {
                        run_series(&endpoint, &dataset, &series)
                            .map_err(|e| format!("measurement failed: {e}"))
                    });
                match run {
                    Ok(r) => result = Some(r),
                    Err(e) => status = format!("error: {e}"),
                }
                if let Err(e) = stop(server) {
                    if status == "ok" {
                        status = format!("error: {e}");
                    }
                }
                if let Err(e) = check_endpoint_reusable(&endpoint) {
                    if status == "ok" {
                        status = format!("error: {e}");
                    }
                }
            }
            Err(e) => status = format!("error: {e}"),
        }
        let (tps_mean, tps_std, tps_rounded) = match &result {
            Some(r) => (r.tps_mean, r.tps_std, r.tps_rounded),
            None => (0.0, 0.0, 0),
        };
        let row = ResultRow {
            model: cell.model.kind.to_string(),
            n_net: cell.model.n_network,
            n_payload: cell.model.n_payload,
            clients: cell.clients,
            duration_s: plan.duration.as_secs_f64(),
            repeats: plan.repeats,
            tps_mean,
            tps_std,
            tps_rounded,
            status,
        };
        progress(&format!(
            "cell {}/{}: {} clients={} -> {} ({})",
            i + 1,
            plan.cells.len(),
            row.config_label(),
            row.clients,
            row.tps_rounded,
            row.status
        ));
        rows.push(row);
    }
    ResultTable { meta, rows }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CsvError {
    #[error("cannot read csv: {0}")]
    Read(String),
    #[error("line 1: expected meta line starting with '#'")]
    MissingMeta,
    #[error("bad meta field {0:?}")]
    BadMeta(String),
    #[error("line {line}: expected header {expected:?}, got {got:?}")]
    BadHeader {
        line: usize,
        expected: String,
        got: String,
    },
    #[error("line {line}: {msg}")]
    Row { line: usize, msg: String },
}

fn csv_escape(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn csv_unescape(s: &str) -> String {
    if s.len() >= 2 && s.starts_with('"') && s.ends_with('"') {
        s[1..s.len() - 1].replace("\"\"", "\"")
    } else {
        s.to_string()
    }
}

/// Write the table: one `#` meta line, the exact header, one row per cell.
/// Floats use Rust's shortest-round-trip formatting, so read_csv returns
/// bit-identical values.
pub fn write_csv(table: &ResultTable, path: &Path) -> io::Result<()> {
    let mut out = String::new();
    let m = &table.meta;
    out.push_str(&format!(
        "# started_unix={} duration_s={} repeats={} warmups={} records={} seed={} launcher={}\n",
        m.started_unix, m.duration_s, m.repeats, m.warmups, m.records, m.seed, m.launcher
    ));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in &table.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.model,
            r.n_net,
            r.n_payload,
            r.clients,
            r.duration_s,
            r.repeats,
            r.tps_mean,
            r.tps_std,
            r.tps_rounded,
            csv_escape(&r.status)
        ));
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())
}

pub fn read_csv(path: &Path) -> Result<ResultTable, CsvError> {
    let text = std::fs::read_to_string(path).map_err(|e| CsvError::Read(e.to_string()))?;
    parse_csv(&text)
}

pub fn parse_csv(text: &str) -> Result<ResultTable, CsvError> {
    let mut lines = text.lines().enumerate();
    let (_, meta_line) = lines.next().ok_or(CsvError::MissingMeta)?;
    let meta_body = meta_line.strip_prefix('#').ok_or(CsvError::MissingMeta)?.trim();
    let mut meta = RunMeta {
        started_unix: 0,
        duration_s: 0.0,
        repeats: 0,
        warmups: 0,
        records: 0,
        seed: 0,
        launcher: String::new(),
    };
    // `launcher=` may contain spaces (a path), so it terminates the scan.
    let mut rest = meta_body;
    while !rest.is_empty() {
        let (field, remainder) = match rest.split_once(' ') {
            Some((f, r)) => (f, r.trim_start()),
            None => (rest, ""),
        };
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| CsvError::BadMeta(field.to_string()))?;
        let bad = || CsvError::BadMeta(field.to_string());
        match key {
            "started_unix" => meta.started_unix = value.parse().map_err(|_| bad())?,
            "duration_s" => meta.duration_s = value.parse().map_err(|_| bad())?,
            "repeats" => meta.repeats = value.parse().map_err(|_| bad())?,
            "warmups" => meta.warmups = value.parse().map_err(|_| bad())?,
            "records" => meta.records = value.parse().map_err(|_| bad())?,
            "seed" => meta.seed = value.parse().map_err(|_| bad())?,
            "launcher" => {
                meta.launcher = if remainder.is_empty() {
                    value.to_string()
                } else {
                    format!("{value} {remainder}")
                };
                rest = "";
                continue;
            }
            _ => return Err(bad()),
        }
        rest = remainder;
    }
    let (header_idx, header) = lines.next().ok_or(CsvError::BadHeader {
        line: 2,
        expected: CSV_HEADER.to_string(),
        got: String::new(),
    })?;
    if header != CSV_HEADER {
        return Err(CsvError::BadHeader {
            line: header_idx + 1,
            expected: CSV_HEADER.to_string(),
            got: header.to_string(),
        });
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.splitn(10, ',').collect();
        if fields.len() != 10 {
            return Err(CsvError::Row {
                line: line_no,
                msg: format!("expected 10 fields, got {}", fields.len()),
            });
        }
        let parse_err = |what: &str, v: &str| CsvError::Row {
            line: line_no,
            msg: format!("bad {what} {v:?}"),
        };
        rows.push(ResultRow {
            model: fields[0].to_string(),
            n_net: fields[1].parse().map_err(|_| parse_err("n_net", fields[1]))?,
            n_payload: fields[2]
                .parse()
                .map_err(|_| parse_err("n_payload", fields[2]))?,
            clients: fields[3].parse().map_err(|_| parse_err("clients", fields[3]))?,
            duration_s: fields[4]
                .parse()
                .map_err(|_| parse_err("duration_s", fields[4]))?,
            repeats: fields[5].parse().map_err(|_| parse_err("repeats", fields[5]))?,
            tps_mean: fields[6].parse().map_err(|_| parse_err("tps_mean", fields[6]))?,
            tps_std: fields[7].parse().map_err(|_| parse_err("tps_std", fields[7]))?,
            tps_rounded: fields[8]
                .parse()
                .map_err(|_| parse_err("tps_rounded", fields[8]))?,
            status: csv_unescape(fields[9]),
        });
    }
    Ok(ResultTable { meta, rows })
}

/// Best result per model kind, ranked, with each peak's throughput ratio
/// over the next-ranked model's peak.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PeakRow {
    pub model: String,
    pub n_net: usize,
    pub n_payload: usize,
    pub clients: usize,
    pub tps_mean: f64,
    pub tps_rounded: u64,
    /// This peak divided by the next-ranked peak; 1.0 for the last row.
    pub ratio_vs_next: f64,
}

pub fn peak_table(table: &ResultTable) -> Vec<PeakRow> {
    let mut best: Vec<&ResultRow> = Vec::new();
    for kind in ModelKind::ALL {
        let peak = table
            .rows
            .iter()
            .filter(|r| r.is_ok() && r.model == kind.as_str())
            .max_by(|a, b| a.tps_mean.total_cmp(&b.tps_mean));
        if let Some(r) = peak {
            best.push(r);
        }
    }
    best.sort_by(|a, b| b.tps_mean.total_cmp(&a.tps_mean));
    (0..best.len())
        .map(|i| {
            let r = best[i];
            let ratio = if i + 1 < best.len() && best[i + 1].tps_mean > 0.0 {
                r.tps_mean / best[i + 1].tps_mean
            } else {
                1.0
            };
            PeakRow {
                model: r.model.clone(),
                n_net: r.n_net,
                n_payload: r.n_payload,
                clients: r.clients,
                tps_mean: r.tps_mean,
                tps_rounded: r.tps_rounded,
                ratio_vs_next: ratio,
            }
        })
        .collect()
}

pub fn render_peak_table(rows: &[PeakRow]) -> String {
    let mut out = String::new();
    out.push_str("model    config  clients  tps_rounded  ratio_vs_next\n");
    for r in rows {
        out.push_str(&format!(
            "{:<8} {:>2}+{:<3} {:>7}  {:>11}  {:>13.2}\n",
            r.model, r.n_net, r.n_payload, r.clients, r.tps_rounded, r.ratio_vs_next
        ));
    }
    out
}

/// The worker-count knob a scaling sweep varies, by model. `sped` has no
/// knob. For `seda` the sweep uses matched stage sizes (n network + n
/// payload), so mixed counts don't enter scaling rows.
pub fn sweep_param(kind: ModelKind, n_net: usize, n_payload: usize) -> Option<usize> {
    match kind {
        ModelKind::Sped => None,
        ModelKind::Seda => (n_net == n_payload).then_some(n_net),
        ModelKind::SedaS => Some(n_net),
        ModelKind::Amped => Some(n_payload),
        ModelKind::Symped => Some(n_net),
    }
}

/// Throughput versus worker count at fixed load, with a least-squares
/// slope per added worker.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingRow {
    pub model: String,
    pub clients: usize,
    /// (worker count, tps_mean), ascending.
    pub points: Vec<(usize, f64)>,
    pub slope_per_worker: f64,
}

pub fn scaling_table(table: &ResultTable) -> Vec<ScalingRow> {
    let mut out = Vec::new();
    for kind in ModelKind::ALL {
        // Group this model's ok rows by client count.
        let mut by_clients: std::collections::BTreeMap<usize, Vec<(usize, f64)>> =
            std::collections::BTreeMap::new();
        for r in &table.rows {
            if !r.is_ok() || r.model != kind.as_str() {
                continue;
            }
            if let Some(param) = sweep_param(kind, r.n_net, r.n_payload) {
                by_clients.entry(r.clients).or_default().push((param, r.tps_mean));
            }
        }
        for (clients, mut points) in by_clients {
            points.sort_by_key(|(p, _)| *p);
            points.dedup_by_key(|(p, _)| *p);
            if points.len() < 2 {
                continue;
            }
            let n = points.len() as f64;
            let sx: f64 = points.iter().map(|(p, _)| *p as f64).sum();
            let sy: f64 = points.iter().map(|(_, t)| *t).sum();
            let sxx: f64 = points.iter().map(|(p, _)| (*p as f64) * (*p as f64)).sum();
            let sxy: f64 = points.iter().map(|(p, t)| (*p as f64) * t).sum();
            let denom = n * sxx - sx * sx;
            let slope = if denom.abs() > f64::EPSILON {
                (n * sxy - sx * sy) / denom
            } else {
                0.0
            };
            out.push(ScalingRow {
                model: kind.to_string(),
                clients,
                points,
                slope_per_worker: slope,
            });
        }
    }
    out
}

pub fn render_scaling_table(rows: &[ScalingRow]) -> String {
    let mut out = String::new();
    out.push_str("model    clients  tps by workers                     slope/worker\n");
    for r in rows {
        let pts: Vec<String> = r
            .points
            .iter()
            .map(|(p, t)| format!("{p}:{:.0}", t))
            .collect();
        out.push_str(&format!(
            "{:<8} {:>7}  {:<33} {:>12.0}\n",
            r.model,
            r.clients,
            pts.join(" "),
            r.slope_per_worker
        ));
    }
    out
}

/// Compare model throughput at desk scale.
#[derive(Debug, Parser)]
#[command(name = "harness", disable_version_flag = true)]
pub struct HarnessArgs {
    /// Plan file; omitted = the built-in default plan sized to this machine.
    #[arg(long)]
    pub plan: Option<PathBuf>,

    /// Use the built-in quick plan (seconds, not minutes).
    #[arg(long, default_value_t = false)]
    pub quick: bool,

    /// Directory for results.csv and charts.
    #[arg(long, default_value = "results")]
    pub out_dir: PathBuf,

    /// Run each cell's server as this binary in a subprocess instead of
    /// in the harness process.
    #[arg(long)]
    pub server_bin: Option<PathBuf>,

    /// Directory for the per-cell unix sockets (default: the system temp
    /// dir; keep the path short).
    #[arg(long)]
    pub socket_dir: Option<PathBuf>,
}

pub fn run_harness_cli() -> i32 {
    run_harness(HarnessArgs::parse())
}

pub fn run_harness(args: HarnessArgs) -> i32 {
    let plan = match (&args.plan, args.quick) {
        (Some(path), _) => {
            let text = match std::fs::read_to_string(path) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("error: cannot read {}: {e}", path.display());
                    return 2;
                }
            };
            match Plan::parse(&text) {
                Ok(p) => p,
                Err(e) => {
                    eprintln!("error: {}: {e}", path.display());
                    return 2;
                }
            }
        }
        (None, true) => quick_plan(),
        (None, false) => default_plan(available_cores()),
    };
    let launcher = match args.server_bin {
        Some(bin) => Launcher::Subprocess { server_bin: bin },
        None => Launcher::InProcess,
    };
    let socket_dir = args.socket_dir.unwrap_or_else(std::env::temp_dir);
    if let Err(e) = std::fs::create_dir_all(&args.out_dir) {
        eprintln!("error: cannot create {}: {e}", args.out_dir.display());
        return 1;
    }
    eprintln!(
        "running {} cells ({} launcher, {} cores)",
        plan.cells.len(),
        launcher.describe(),
        available_cores()
    );
    let table = run_plan(&plan, &launcher, &socket_dir, |line| eprintln!("{line}"));

    let csv_path = args.out_dir.join("results.csv");
    if let Err(e) = write_csv(&table, &csv_path) {
        eprintln!("error: cannot write {}: {e}", csv_path.display());
        return 1;
    }
    eprintln!("wrote {}", csv_path.display());
    match chart::emit_standard_charts(&table, &args.out_dir) {
        Ok(paths) => {
            for p in paths {
                eprintln!("wrote {}", p.display());
            }
        }
        Err(e) => {
            eprintln!("error: charts failed: {e}");
            return 1;
        }
    }
    println!("\npeak throughput per model:");
    print!("{}", render_peak_table(&peak_table(&table)));
    let scaling = scaling_table(&table);
    if !scaling.is_empty() {
        println!("\nscaling with worker count:");
        print!("{}", render_scaling_table(&scaling));
    }
    let failed = table.rows.iter().filter(|r| !r.is_ok()).count();
    if failed > 0 {
        eprintln!("{failed} cell(s) failed; see the status column");
        return 1;
    }
    0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_parses_sets_and_runs() {
        let text = "\
# comparison at two loads
set duration_s 0.5
set repeats 2
set records 1000

run sped clients=1,4
run seda net=2 payload=2 clients=4
run seda-s net=2 clients=4
";
        let plan = Plan::parse(text).unwrap();
        assert_eq!(plan.duration, Duration::from_millis(500));
        assert_eq!(plan.repeats, 2);
        assert_eq!(plan.workload.record_count, 1000);
        assert_eq!(plan.cells.len(), 4);
        assert_eq!(plan.cells[0].model, ModelConfig::sped());
        assert_eq!(plan.cells[0].clients, 1);
        assert_eq!(plan.cells[1].clients, 4);
        assert_eq!(plan.cells[2].model, ModelConfig::seda(2, 2));
        assert_eq!(plan.cells[3].model, ModelConfig::seda_s(2));
    }

    #[test]
    fn plan_errors_carry_line_numbers() {
        let cases = [
            ("set duration_s fast\nrun sped clients=1", 1),
            ("set repeats 2\nrun sped clients=0", 2),
            ("walk sped clients=1", 1),
            ("run sped\n", 1),
            ("set bogus 3\nrun sped clients=1", 1),
            ("run seda net=2 payload=0 clients=1", 1),
        ];
        for (text, want_line) in cases {
            match Plan::parse(text) {
                Err(PlanError::Line { line, .. }) => {
                    assert_eq!(line, want_line, "plan text {text:?}")
                }
                other => panic!("expected line error for {text:?}, got {other:?}"),
            }
        }
        assert_eq!(Plan::parse("# nothing\n"), Err(PlanError::Empty));
    }

    #[test]
    fn default_plan_covers_every_model_within_core_budget() {
        for cores in [1usize, 2, 8, 64] {
            let plan = default_plan(cores);
            for kind in ModelKind::ALL {
                assert!(
                    plan.cells.iter().any(|c| c.model.kind == kind),
                    "{cores} cores: missing {kind}"
                );
            }
            let cap = cores.saturating_sub(4).clamp(1, 4);
            for cell in &plan.cells {
                assert!(cell.model.n_network <= cap.max(1), "{:?}", cell.model);
                assert!(cell.model.n_payload <= cap.max(1), "{:?}", cell.model);
                cell.model.validate().unwrap();
            }
        }
    }

    #[test]
    fn csv_round_trips_bit_exactly() {
        let table = ResultTable {
            meta: RunMeta {
                started_unix: 1_700_000_000,
                duration_s: 2.5,
                repeats: 3,
                warmups: 1,
                records: 30_000,
                seed: 42,
                launcher: "in-process".to_string(),
            },
            rows: vec![
                ResultRow {
                    model: "seda".into(),
                    n_net: 2,
                    n_payload: 2,
                    clients: 8,
                    duration_s: 2.5,
                    repeats: 3,
                    tps_mean: 123_456.789_012_345,
                    tps_std: 0.1 + 0.2, // deliberately non-representable
                    tps_rounded: 125_000,
                    status: "ok".into(),
                },
                ResultRow {
                    model: "sped".into(),
                    n_net: 0,
                    n_payload: 0,
                    clients: 1,
                    duration_s: 2.5,
                    repeats: 3,
                    tps_mean: 0.0,
                    tps_std: 0.0,
                    tps_rounded: 0,
                    status: "error: preload failed: oops, with a comma".into(),
                },
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.csv");
        write_csv(&table, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().nth(1).unwrap().eq(CSV_HEADER));
        assert!(text.starts_with("# started_unix=1700000000 "));
        let back = read_csv(&path).unwrap();
        assert_eq!(back, table, "round trip must be exact, floats included");
    }

    #[test]
    fn csv_rejects_malformed_input() {
        assert!(matches!(parse_csv(""), Err(CsvError::MissingMeta)));
        assert!(matches!(
            parse_csv("model,n_net\n"),
            Err(CsvError::MissingMeta)
        ));
        let bad_header = "# started_unix=0 duration_s=1 repeats=1 warmups=0 records=1 seed=0 launcher=x\nmodel,nope\n";
        assert!(matches!(parse_csv(bad_header), Err(CsvError::BadHeader { .. })));
        let bad_row = format!(
            "# started_unix=0 duration_s=1 repeats=1 warmups=0 records=1 seed=0 launcher=x\n{CSV_HEADER}\nsped,0,0,one,1,1,0,0,0,ok\n"
        );
        assert!(matches!(parse_csv(&bad_row), Err(CsvError::Row { line: 3, .. })));
    }

    fn table_for_summaries() -> ResultTable {
        let mk = |model: &str, n_net, n_payload, clients, tps: f64| ResultRow {
            model: model.into(),
            n_net,
            n_payload,
            clients,
            duration_s: 1.0,
            repeats: 2,
            tps_mean: tps,
            tps_std: 1.0,
            tps_rounded: crate::bench::round_tps(tps),
            status: "ok".into(),
        };
        ResultTable {
            meta: RunMeta {
                started_unix: 0,
                duration_s: 1.0,
                repeats: 2,
                warmups: 0,
                records: 100,
                seed: 1,
                launcher: "in-process".into(),
            },
            rows: vec![
                mk("sped", 0, 0, 8, 50_000.0),
                mk("symped", 1, 0, 8, 60_000.0),
                mk("symped", 2, 0, 8, 110_000.0),
                mk("symped", 3, 0, 8, 160_000.0),
                mk("seda", 1, 1, 8, 40_000.0),
                mk("seda", 2, 2, 8, 70_000.0),
                // A failed row must not enter summaries.
                ResultRow {
                    model: "amped".into(),
                    n_net: 1,
                    n_payload: 9,
                    clients: 8,
                    duration_s: 1.0,
                    repeats: 2,
                    tps_mean: 999_999.0,
                    tps_std: 0.0,
                    tps_rounded: 1_000_000,
                    status: "error: boom".into(),
                },
            ],
        }
    }

    #[test]
    fn peak_table_ranks_and_ratios() {
        let rows = peak_table(&table_for_summaries());
        assert_eq!(rows.len(), 3, "only models with ok rows appear");
        assert_eq!(rows[0].model, "symped");
        assert_eq!(rows[0].n_net, 3);
        assert!((rows[0].ratio_vs_next - 160_000.0 / 70_000.0).abs() < 1e-9);
        assert_eq!(rows[1].model, "seda");
        assert_eq!(rows[2].model, "sped");
        assert_eq!(rows[2].ratio_vs_next, 1.0);
    }

    #[test]
    fn scaling_table_fits_slopes() {
        let rows = scaling_table(&table_for_summaries());
        // symped has 3 points (1,2,3 workers); seda has 2 (1 and 2).
        let symped = rows.iter().find(|r| r.model == "symped").unwrap();
        assert_eq!(symped.points, vec![(1, 60_000.0), (2, 110_000.0), (3, 160_000.0)]);
        assert!((symped.slope_per_worker - 50_000.0).abs() < 1e-6);
        let seda = rows.iter().find(|r| r.model == "seda").unwrap();
        assert!((seda.slope_per_worker - 30_000.0).abs() < 1e-6);
        // sped never appears: it has no worker knob.
        assert!(!rows.iter().any(|r| r.model == "sped"));
    }
}
