//! Self-contained SVG line charts for result tables. No drawing library:
//! the charts are axes, polylines, and a legend, written as SVG text. Each
//! chart embeds the full results CSV in a `<metadata>` block so a chart
//! file alone is enough to recover the numbers behind it.

use std::collections::BTreeMap;
use std::io;
use std::path::{Path, PathBuf};

use super::{parse_csv, sweep_param, CsvError, ResultTable};
use crate::engine::ModelKind;

const WIDTH: f64 = 860.0;
const HEIGHT: f64 = 520.0;
const MARGIN_LEFT: f64 = 90.0;
const MARGIN_RIGHT: f64 = 180.0;
const MARGIN_TOP: f64 = 56.0;
const MARGIN_BOTTOM: f64 = 64.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#7f7f7f",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ChartSeries {
    pub name: String,
    /// Points in x order.
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct ChartSpec {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    /// Lay the x axis out in log2 (for client sweeps like 1,2,4,...,64).
    pub x_log2: bool,
    pub series: Vec<ChartSeries>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Round a max value up to a clean tick ceiling (1/2/5 × 10^k).
fn nice_ceil(v: f64) -> f64 {
    if v <= 0.0 {
        return 1.0;
    }
    let exp = v.log10().floor();
    let base = 10f64.powf(exp);
    for m in [1.0, 2.0, 5.0, 10.0] {
        if m * base >= v {
            return m * base;
        }
    }
    10.0 * base
}

fn fmt_tick(v: f64) -> String {
    if v >= 1_000_000.0 {
        format!("{}M", v / 1_000_000.0)
    } else if v >= 1_000.0 {
        format!("{}k", v / 1_000.0)
    } else if v == v.trunc() {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

/// Render the chart plus an embedded payload (the results CSV) inside
/// `<metadata><![CDATA[...]]></metadata>`.
pub fn line_chart_svg(spec: &ChartSpec, embedded_csv: &str) -> String {
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;

    let xs: Vec<f64> = spec
        .series
        .iter()
        .flat_map(|s| s.points.iter().map(|(x, _)| *x))
        .collect();
    let ys: Vec<f64> = spec
        .series
        .iter()
        .flat_map(|s| s.points.iter().map(|(_, y)| *y))
        .collect();
    let xform = |x: f64| if spec.x_log2 { x.max(1e-12).log2() } else { x };
    let (x_min, x_max) = match (xs.iter().cloned().reduce(f64::min), xs.iter().cloned().reduce(f64::max)) {
        (Some(a), Some(b)) => (xform(a), xform(b)),
        _ => (0.0, 1.0),
    };
    let x_span = if (x_max - x_min).abs() < 1e-12 { 1.0 } else { x_max - x_min };
    let y_max = nice_ceil(ys.iter().cloned().fold(0.0, f64::max) * 1.05);

    let px = |x: f64| MARGIN_LEFT + (xform(x) - x_min) / x_span * plot_w;
    let py = |y: f64| MARGIN_TOP + (1.0 - y / y_max) * plot_h;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\">\n"
    ));
    svg.push_str("<metadata><![CDATA[");
    svg.push_str(embedded_csv);
    svg.push_str("]]></metadata>\n");
    svg.push_str(&format!(
        "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"28\" font-size=\"18\" text-anchor=\"middle\">{}</text>\n",
        MARGIN_LEFT + plot_w / 2.0,
        esc(&spec.title)
    ));

    // Y grid and ticks.
    let y_ticks = 5usize;
    for t in 0..=y_ticks {
        let v = y_max * t as f64 / y_ticks as f64;
        let y = py(v);
        svg.push_str(&format!(
            "<line x1=\"{MARGIN_LEFT}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"#ddd\"/>\n",
            MARGIN_LEFT + plot_w
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"end\">{}</text>\n",
            MARGIN_LEFT - 8.0,
            y + 4.0,
            fmt_tick(v)
        ));
    }
    // X ticks: the union of x values across series.
    let mut x_vals: Vec<f64> = xs.clone();
    x_vals.sort_by(f64::total_cmp);
    x_vals.dedup();
    for &v in &x_vals {
        let x = px(v);
        svg.push_str(&format!(
            "<line x1=\"{x}\" y1=\"{}\" x2=\"{x}\" y2=\"{}\" stroke=\"#ddd\"/>\n",
            MARGIN_TOP,
            MARGIN_TOP + plot_h
        ));
        svg.push_str(&format!(
            "<text x=\"{x}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n",
            MARGIN_TOP + plot_h + 18.0,
            fmt_tick(v)
        ));
    }
    // Axes.
    svg.push_str(&format!(
        "<line x1=\"{MARGIN_LEFT}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        MARGIN_TOP + plot_h,
        MARGIN_LEFT + plot_w,
        MARGIN_TOP + plot_h
    ));
    svg.push_str(&format!(
        "<line x1=\"{MARGIN_LEFT}\" y1=\"{MARGIN_TOP}\" x2=\"{MARGIN_LEFT}\" y2=\"{}\" stroke=\"black\"/>\n",
        MARGIN_TOP + plot_h
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"14\" text-anchor=\"middle\">{}</text>\n",
        MARGIN_LEFT + plot_w / 2.0,
        HEIGHT - 16.0,
        esc(&spec.x_label)
    ));
    svg.push_str(&format!(
        "<text x=\"20\" y=\"{}\" font-size=\"14\" text-anchor=\"middle\" transform=\"rotate(-90 20 {})\">{}</text>\n",
        MARGIN_TOP + plot_h / 2.0,
        MARGIN_TOP + plot_h / 2.0,
        esc(&spec.y_label)
    ));

    // Series lines, markers, legend.
    for (i, series) in spec.series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if series.points.len() > 1 {
            let pts: Vec<String> = series
                .points
                .iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
                .collect();
            svg.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
                pts.join(" ")
            ));
        }
        for &(x, y) in &series.points {
            svg.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3.5\" fill=\"{color}\"/>\n",
                px(x),
                py(y)
            ));
        }
        let ly = MARGIN_TOP + 16.0 + i as f64 * 22.0;
        let lx = MARGIN_LEFT + plot_w + 16.0;
        svg.push_str(&format!(
            "<line x1=\"{lx}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            lx + 24.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"13\">{}</text>\n",
            lx + 30.0,
            ly + 4.0,
            esc(&series.name)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Pull the embedded CSV text back out of a chart produced by
/// [`line_chart_svg`].
pub fn extract_embedded(svg_text: &str) -> Option<String> {
    let start = svg_text.find("<metadata><![CDATA[")? + "<metadata><![CDATA[".len();
    let end = svg_text[start..].find("]]></metadata>")? + start;
    Some(svg_text[start..end].to_string())
}

/// Recover a full [`ResultTable`] from a chart file alone.
pub fn table_from_chart(svg_text: &str) -> Result<ResultTable, CsvError> {
    let csv = extract_embedded(svg_text)
        .ok_or_else(|| CsvError::Read("no embedded csv in svg".to_string()))?;
    parse_csv(&csv)
}

/// Throughput vs offered clients: one line per server configuration that
/// was measured at two or more client counts.
pub fn clients_chart(table: &ResultTable) -> Option<ChartSpec> {
    let mut groups: BTreeMap<(String, usize, usize), Vec<(f64, f64)>> = BTreeMap::new();
    for r in &table.rows {
        if r.is_ok() {
            groups
                .entry((r.model.clone(), r.n_net, r.n_payload))
                .or_default()
                .push((r.clients as f64, r.tps_mean));
        }
    }
    let mut series = Vec::new();
    // Present models in their canonical order, not alphabetically.
    for kind in ModelKind::ALL {
        for ((model, n_net, n_payload), mut points) in groups.clone() {
            if model != kind.as_str() {
                continue;
            }
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            points.dedup_by(|a, b| a.0 == b.0);
            if points.len() < 2 {
                continue;
            }
            series.push(ChartSeries {
                name: format!("{model} {n_net}+{n_payload}"),
                points,
            });
        }
    }
    if series.is_empty() {
        return None;
    }
    Some(ChartSpec {
        title: "throughput vs concurrent clients".to_string(),
        x_label: "clients (log2)".to_string(),
        y_label: "requests / second".to_string(),
        x_log2: true,
        series,
    })
}

/// Throughput vs worker count at fixed load: one line per (model, clients)
/// pair with two or more measured worker counts.
pub fn threads_chart(table: &ResultTable) -> Option<ChartSpec> {
    let mut groups: BTreeMap<(String, usize), Vec<(f64, f64)>> = BTreeMap::new();
    for r in &table.rows {
        if !r.is_ok() {
            continue;
        }
        let kind: ModelKind = match r.model.parse() {
            Ok(k) => k,
            Err(_) => continue,
        };
        if let Some(param) = sweep_param(kind, r.n_net, r.n_payload) {
            groups
                .entry((r.model.clone(), r.clients))
                .or_default()
                .push((param as f64, r.tps_mean));
        }
    }
    let mut series = Vec::new();
    for kind in ModelKind::ALL {
        for ((model, clients), mut points) in groups.clone() {
            if model != kind.as_str() {
                continue;
            }
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            points.dedup_by(|a, b| a.0 == b.0);
            if points.len() < 2 {
                continue;
            }
            series.push(ChartSeries {
                name: format!("{model} @{clients} clients"),
                points,
            });
        }
    }
    if series.is_empty() {
        return None;
    }
    Some(ChartSpec {
        title: "throughput vs worker threads".to_string(),
        x_label: "worker threads".to_string(),
        y_label: "requests / second".to_string(),
        x_log2: false,
        series,
    })
}

/// Write the standard charts for a result table into `out_dir`. Charts
/// whose data is absent (e.g. no multi-point sweeps) are skipped.
pub fn emit_standard_charts(table: &ResultTable, out_dir: &Path) -> io::Result<Vec<PathBuf>> {
    let mut csv = String::new();
    {
        // Reuse the CSV writer via a temp buffer so chart metadata matches
        // results.csv byte for byte.
        let m = &table.meta;
        csv.push_str(&format!(
            "# started_unix={} duration_s={} repeats={} warmups={} records={} seed={} launcher={}\n",
            m.started_unix, m.duration_s, m.repeats, m.warmups, m.records, m.seed, m.launcher
        ));
        csv.push_str(super::CSV_HEADER);
        csv.push('\n');
        for r in &table.rows {
            csv.push_str(&format!(
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
                super::csv_escape(&r.status)
            ));
        }
    }
    let mut written = Vec::new();
    if let Some(spec) = clients_chart(table) {
        let path = out_dir.join("throughput_vs_clients.svg");
        std::fs::write(&path, line_chart_svg(&spec, &csv))?;
        written.push(path);
    }
    if let Some(spec) = threads_chart(table) {
        let path = out_dir.join("throughput_vs_threads.svg");
        std::fs::write(&path, line_chart_svg(&spec, &csv))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{ResultRow, RunMeta};

    fn sample_table() -> ResultTable {
        let mk = |model: &str, n_net, n_payload, clients, tps: f64| ResultRow {
            model: model.into(),
            n_net,
            n_payload,
            clients,
            duration_s: 1.0,
            repeats: 2,
            tps_mean: tps,
            tps_std: 10.0,
            tps_rounded: crate::bench::round_tps(tps),
            status: "ok".into(),
        };
        ResultTable {
            meta: RunMeta {
                started_unix: 7,
                duration_s: 1.0,
                repeats: 2,
                warmups: 1,
                records: 500,
                seed: 3,
                launcher: "in-process".into(),
            },
            rows: vec![
                mk("sped", 0, 0, 1, 30_000.0),
                mk("sped", 0, 0, 4, 50_000.0),
                mk("sped", 0, 0, 16, 52_000.0),
                mk("symped", 2, 0, 1, 28_000.0),
                mk("symped", 2, 0, 4, 90_000.0),
                mk("symped", 2, 0, 16, 150_000.0),
                mk("symped", 1, 0, 16, 80_000.0),
                mk("symped", 3, 0, 16, 190_000.0),
            ],
        }
    }

    #[test]
    fn charts_embed_recoverable_csv() {
        let table = sample_table();
        let spec = clients_chart(&table).expect("clients chart has data");
        assert_eq!(spec.series.len(), 2, "sped 0+0 and symped 2+0 sweeps");
        let dir = tempfile::tempdir().unwrap();
        let paths = emit_standard_charts(&table, dir.path()).unwrap();
        assert_eq!(paths.len(), 2);
        for path in &paths {
            let text = std::fs::read_to_string(path).unwrap();
            assert!(text.starts_with("<svg "));
            assert!(text.contains("<polyline"));
            let recovered = table_from_chart(&text).unwrap();
            assert_eq!(recovered, table, "chart metadata must rebuild the table");
        }
    }

    #[test]
    fn threads_chart_uses_worker_sweeps() {
        let table = sample_table();
        let spec = threads_chart(&table).expect("threads chart has data");
        assert_eq!(spec.series.len(), 1);
        assert_eq!(spec.series[0].name, "symped @16 clients");
        assert_eq!(
            spec.series[0].points,
            vec![(1.0, 80_000.0), (2.0, 150_000.0), (3.0, 190_000.0)]
        );
    }

    #[test]
    fn svg_escapes_and_scales() {
        let spec = ChartSpec {
            title: "a < b & c".to_string(),
            x_label: "x".to_string(),
            y_label: "y".to_string(),
            x_log2: false,
            series: vec![ChartSeries {
                name: "only".to_string(),
                points: vec![(1.0, 0.0), (2.0, 123.0)],
            }],
        };
        let svg = line_chart_svg(&spec, "payload");
        assert!(svg.contains("a &lt; b &amp; c"));
        assert_eq!(extract_embedded(&svg).as_deref(), Some("payload"));
        assert!(!svg.contains("NaN"));
    }
}
