//! Per-tick ledgers and the four run-level indicators: energy per
//! iteration (EPI), collaboration efficiency (CE), adaptation latency (AL)
//! and resilience ratio (RR).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_AL_EPSILON: f64 = 0.02;
pub const AL_REFERENCE_TICKS: u64 = 20;

/// One row of `metrics.csv`. `node == None` marks the population row.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricRecord {
    pub tick: u64,
    pub node: Option<usize>,
    pub alive: bool,
    /// Absent for dead nodes and when no evaluation ran.
    pub accuracy: Option<f64>,
    /// Cumulative consumption, `step + tx + rx`.
    pub energy_j: f64,
    pub energy_step_j: f64,
    pub energy_tx_j: f64,
    pub energy_rx_j: f64,
    pub energy_harvest_j: f64,
    pub energy_level_j: f64,
    pub bytes_tx: u64,
    pub bytes_rx: u64,
    pub updates: u64,
    pub skipped: u64,
    /// `;`-separated event tags.
    pub tags: String,
}

impl MetricRecord {
    /// Population row: sums of the cumulative ledgers, mean accuracy over
    /// nodes that report one.
    pub fn population(tick: u64, nodes: &[MetricRecord]) -> Self {
        let accs: Vec<f64> = nodes.iter().filter_map(|r| r.accuracy).collect();
        let mut tags: Vec<&str> = nodes.iter().flat_map(|r| r.tags.split(';')).filter(|t| !t.is_empty()).collect();
        tags.sort_unstable();
        tags.dedup();
        Self {
            tick,
            node: None,
            alive: nodes.iter().any(|r| r.alive),
            accuracy: (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64),
            energy_j: nodes.iter().map(|r| r.energy_j).sum(),
            energy_step_j: nodes.iter().map(|r| r.energy_step_j).sum(),
            energy_tx_j: nodes.iter().map(|r| r.energy_tx_j).sum(),
            energy_rx_j: nodes.iter().map(|r| r.energy_rx_j).sum(),
            energy_harvest_j: nodes.iter().map(|r| r.energy_harvest_j).sum(),
            energy_level_j: nodes.iter().map(|r| r.energy_level_j).sum(),
            bytes_tx: nodes.iter().map(|r| r.bytes_tx).sum(),
            bytes_rx: nodes.iter().map(|r| r.bytes_rx).sum(),
            updates: nodes.iter().map(|r| r.updates).sum(),
            skipped: nodes.iter().map(|r| r.skipped).sum(),
            tags: tags.join(";"),
        }
    }
}

/// Everything the indicators need from one run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunTrace {
    pub records: Vec<MetricRecord>,
    pub initial_energy: Vec<f64>,
    /// First tick at which each scheduled drift is in effect.
    pub drift_ticks: Vec<u64>,
}

impl RunTrace {
    pub fn node_count(&self) -> usize {
        self.initial_energy.len()
    }

    pub fn node_records(&self, node: usize) -> impl Iterator<Item = &MetricRecord> {
        self.records.iter().filter(move |r| r.node == Some(node))
    }

    pub fn population_records(&self) -> impl Iterator<Item = &MetricRecord> {
        self.records.iter().filter(|r| r.node.is_none())
    }

    pub fn final_population(&self) -> Option<&MetricRecord> {
        self.population_records().last()
    }

    pub fn final_node(&self, node: usize) -> Option<&MetricRecord> {
        self.node_records(node).last()
    }
}

/// Structured log line for `events.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub tick: u64,
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub node: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub peer: Option<usize>,
    #[serde(skip_serializing_if = "String::is_empty", default)]
    pub detail: String,
}

impl Event {
    pub fn new(tick: u64, kind: &str) -> Self {
        Self {
            tick,
            kind: kind.to_string(),
            node: None,
            peer: None,
            detail: String::new(),
        }
    }

    pub fn node(mut self, node: usize) -> Self {
        self.node = Some(node);
        self
    }

    pub fn peer(mut self, peer: usize) -> Self {
        self.peer = Some(peer);
        self
    }

    pub fn detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = detail.into();
        self
    }
}

const HEADER: [&str; 15] = [
    "tick",
    "node",
    "alive",
    "accuracy",
    "energy_j",
    "energy_step_j",
    "energy_tx_j",
    "energy_rx_j",
    "energy_harvest_j",
    "energy_level_j",
    "bytes_tx",
    "bytes_rx",
    "updates",
    "skipped",
    "tags",
];

/// Floats are written in shortest round-trip form, so parsing the file back
/// yields bit-identical values.
pub fn write_metrics_csv<W: std::io::Write>(out: W, records: &[MetricRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(HEADER)?;
    for r in records {
        w.write_record([
            r.tick.to_string(),
            r.node.map_or_else(|| "all".to_string(), |n| n.to_string()),
            u8::from(r.alive).to_string(),
            r.accuracy.map_or_else(String::new, |a| a.to_string()),
            r.energy_j.to_string(),
            r.energy_step_j.to_string(),
            r.energy_tx_j.to_string(),
            r.energy_rx_j.to_string(),
            r.energy_harvest_j.to_string(),
            r.energy_level_j.to_string(),
            r.bytes_tx.to_string(),
            r.bytes_rx.to_string(),
            r.updates.to_string(),
            r.skipped.to_string(),
            r.tags.clone(),
        ])?;
    }
    w.flush().map_err(|e| Error::Io {
        path: PathBuf::from("metrics.csv"),
        source: e,
    })?;
    Ok(())
}

pub fn metrics_csv_string(records: &[MetricRecord]) -> String {
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, records).expect("writing to memory cannot fail");
    String::from_utf8(buf).expect("csv output is utf-8")
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRecord>> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Ingestion {
            row: 0,
            message: format!("{other:?}"),
        },
    })?;
    let mut out = Vec::new();
    for (i, row) in rd.records().enumerate() {
        let row = row?;
        let bad = |field: &str| Error::Ingestion {
            row: i + 1,
            message: format!("bad {field}"),
        };
        let get = |k: usize| row.get(k).ok_or_else(|| bad(HEADER[k]));
        let f = |k: usize| -> Result<f64> { get(k)?.parse().map_err(|_| bad(HEADER[k])) };
        let u = |k: usize| -> Result<u64> { get(k)?.parse().map_err(|_| bad(HEADER[k])) };
        let node = match get(1)? {
            "all" => None,
            s => Some(s.parse().map_err(|_| bad("node"))?),
        };
        let accuracy = match get(3)? {
            "" => None,
            s => Some(s.parse().map_err(|_| bad("accuracy"))?),
        };
        out.push(MetricRecord {
            tick: u(0)?,
            node,
            alive: get(2)? == "1",
            accuracy,
            energy_j: f(4)?,
            energy_step_j: f(5)?,
            energy_tx_j: f(6)?,
            energy_rx_j: f(7)?,
            energy_harvest_j: f(8)?,
            energy_level_j: f(9)?,
            bytes_tx: u(10)?,
            bytes_rx: u(11)?,
            updates: u(12)?,
            skipped: u(13)?,
            tags: get(14)?.to_string(),
        });
    }
    Ok(out)
}

/// Tick-over-tick monotonicity of the cumulative fields, per series.
pub fn check_monotone(records: &[MetricRecord]) -> Result<()> {
    let mut last: BTreeMap<Option<usize>, &MetricRecord> = BTreeMap::new();
    for r in records {
        if let Some(p) = last.get(&r.node) {
            let ok = r.tick >= p.tick
                && r.energy_j >= p.energy_j
                && r.energy_step_j >= p.energy_step_j
                && r.energy_tx_j >= p.energy_tx_j
                && r.energy_rx_j >= p.energy_rx_j
                && r.energy_harvest_j >= p.energy_harvest_j
                && r.bytes_tx >= p.bytes_tx
                && r.bytes_rx >= p.bytes_rx
                && r.updates >= p.updates
                && r.skipped >= p.skipped;
            if !ok {
                return Err(Error::Audit {
                    node: r.node.unwrap_or(usize::MAX),
                    tick: r.tick,
                    message: "cumulative field decreased".into(),
                });
            }
        }
        last.insert(r.node, r);
    }
    Ok(())
}

/// Joules per local update between two cumulative snapshots; `start = None`
/// means the beginning of the run. Absent when no update happened.
pub fn epi_between(start: Option<&MetricRecord>, end: &MetricRecord, compute_only: bool) -> Option<f64> {
    let zero = MetricRecord::default();
    let s = start.unwrap_or(&zero);
    let updates = end.updates - s.updates;
    if updates == 0 {
        return None;
    }
    let joules = if compute_only {
        end.energy_step_j - s.energy_step_j
    } else {
        end.energy_j - s.energy_j
    };
    Some(joules / updates as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpiReport {
    pub per_node: Vec<Option<f64>>,
    /// Mean over nodes with a defined value.
    pub mean: Option<f64>,
}

fn mean_of(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// EPI over ticks `(from, to]`; `from = None` starts at the beginning of the
/// run. The numerator counts exchange energy unless `compute_only`.
pub fn epi(trace: &RunTrace, from: Option<u64>, to: u64, compute_only: bool) -> EpiReport {
    let per_node: Vec<Option<f64>> = (0..trace.node_count())
        .map(|n| {
            let recs: Vec<&MetricRecord> = trace.node_records(n).collect();
            let end = recs.iter().rev().find(|r| r.tick <= to)?;
            let start = from.and_then(|f| recs.iter().rev().find(|r| r.tick <= f).copied());
            epi_between(start, end, compute_only)
        })
        .collect();
    let mean = mean_of(per_node.iter().flatten().copied());
    EpiReport { per_node, mean }
}

/// Collaboration efficiency: accuracy gain over the isolated baseline per
/// byte sent. Uses final accuracy, or the mean over all population rows when
/// `time_averaged`. Absent when nothing was sent.
pub fn ce(run: &RunTrace, baseline: &RunTrace, time_averaged: bool) -> Option<f64> {
    let acc = |t: &RunTrace| -> Option<f64> {
        if time_averaged {
            mean_of(t.population_records().filter_map(|r| r.accuracy))
        } else {
            t.final_population()?.accuracy
        }
    };
    let bytes = run.final_population()?.bytes_tx;
    if bytes == 0 {
        return None;
    }
    Some((acc(run)? - acc(baseline)?) / bytes as f64)
}

/// Adaptation latency per node for the drift in effect from `drift_tick`:
/// the smallest `Δt ≥ 0` with accuracy at `drift_tick + Δt` at least the
/// trailing 20-tick pre-drift mean minus `epsilon`. Absent if a node never
/// recovers or has no pre-drift reference.
pub fn al(trace: &RunTrace, drift_tick: u64, epsilon: f64) -> Result<Vec<Option<u64>>> {
    if !trace.drift_ticks.contains(&drift_tick) {
        return Err(Error::usage(format!("no drift in effect from tick {drift_tick}")));
    }
    if !(epsilon > 0.0) {
        return Err(Error::usage("epsilon must be positive"));
    }
    let lo = drift_tick.saturating_sub(AL_REFERENCE_TICKS);
    Ok((0..trace.node_count())
        .map(|n| {
            let reference = mean_of(
                trace
                    .node_records(n)
                    .filter(|r| r.tick >= lo && r.tick < drift_tick)
                    .filter_map(|r| r.accuracy),
            )?;
            trace
                .node_records(n)
                .filter(|r| r.tick >= drift_tick)
                .find(|r| r.accuracy.is_some_and(|a| a >= reference - epsilon))
                .map(|r| r.tick - drift_tick)
        })
        .collect())
}

/// Mean of the defined per-node latencies.
pub fn mean_al(latencies: &[Option<u64>]) -> Option<f64> {
    mean_of(latencies.iter().flatten().map(|&x| x as f64))
}

/// Mean latency with nodes that never recover counted at `horizon`, the
/// ticks left after the drift. When any node is censored this is a lower
/// bound on the true mean. Absent for an empty population.
pub fn mean_al_censored(latencies: &[Option<u64>], horizon: u64) -> Option<f64> {
    mean_of(latencies.iter().map(|x| x.unwrap_or(horizon) as f64))
}

/// Resilience ratio: final accuracy of the nodes that survive the dropout
/// run, divided by the same nodes' final accuracy in the undisturbed run.
pub fn rr(with_dropout: &RunTrace, without: &RunTrace) -> Option<f64> {
    let survivors: Vec<usize> = (0..with_dropout.node_count())
        .filter(|&n| with_dropout.final_node(n).is_some_and(|r| r.alive))
        .collect();
    let a = mean_of(survivors.iter().filter_map(|&n| with_dropout.final_node(n)?.accuracy))?;
    let b = mean_of(survivors.iter().filter_map(|&n| without.final_node(n)?.accuracy))?;
    Some(a / b)
}

/// Scalar summaries reported for every run.
pub const SUMMARY_METRICS: [&str; 6] = ["final_accuracy", "mean_accuracy", "energy_j", "bytes_tx", "updates", "epi"];

pub fn run_summary(trace: &RunTrace) -> BTreeMap<&'static str, Option<f64>> {
    let last = trace.final_population();
    let mut m = BTreeMap::new();
    m.insert("final_accuracy", last.and_then(|r| r.accuracy));
    m.insert("mean_accuracy", mean_of(trace.population_records().filter_map(|r| r.accuracy)));
    m.insert("energy_j", last.map(|r| r.energy_j));
    m.insert("bytes_tx", last.map(|r| r.bytes_tx as f64));
    m.insert("updates", last.map(|r| r.updates as f64));
    m.insert(
        "epi",
        last.and_then(|r| epi(trace, None, r.tick, false).mean),
    );
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub group: String,
    pub metric: String,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub missing: Vec<PathBuf>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Group key of a run dir: its resolved config without the seed, so seeds
/// of one configuration pool together.
fn group_key(dir: &Path) -> Result<(String, String)> {
    let path = dir.join("config-echo.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut v: serde_json::Value = serde_json::from_str(&text)?;
    let name = v.get("name").and_then(|n| n.as_str()).unwrap_or("run").to_string();
    if let Some(o) = v.as_object_mut() {
        o.remove("seed");
    }
    Ok((serde_json::to_string(&v)?, name))
}

/// Aggregate completed run dirs into mean ± std per configuration and
/// metric. Dirs with missing or unreadable files are listed and skipped.
pub fn report(dirs: &[PathBuf]) -> Report {
    let mut groups: BTreeMap<String, (String, Vec<BTreeMap<&'static str, Option<f64>>>)> = BTreeMap::new();
    let mut missing = Vec::new();
    for d in dirs {
        let loaded = (|| -> Result<_> {
            let key = group_key(d)?;
            let records = read_metrics_csv(&d.join("metrics.csv"))?;
            let manifest: serde_json::Value = {
                let p = d.join("manifest.json");
                serde_json::from_str(&std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)?
            };
            let initial_energy = manifest
                .get("initial_energy")
                .and_then(|v| serde_json::from_value(v.clone()).ok())
                .unwrap_or_default();
            Ok((
                key,
                RunTrace {
                    records,
                    initial_energy,
                    drift_ticks: Vec::new(),
                },
            ))
        })();
        match loaded {
            Ok(((key, name), trace)) => groups.entry(key).or_insert_with(|| (name, Vec::new())).1.push(run_summary(&trace)),
            Err(_) => missing.push(d.clone()),
        }
    }
    // Label groups by name, disambiguated in key order.
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    let mut rows = Vec::new();
    for (name, runs) in groups.into_values() {
        let k = seen.entry(name.clone()).or_insert(0);
        *k += 1;
        let label = if *k == 1 { name } else { format!("{name}#{k}") };
        for metric in SUMMARY_METRICS {
            let xs: Vec<f64> = runs.iter().filter_map(|r| r[metric]).collect();
            if xs.is_empty() {
                continue;
            }
            let (mean, std) = mean_std(&xs);
            rows.push(ReportRow {
                group: label.clone(),
                metric: metric.to_string(),
                mean,
                std,
                n: xs.len(),
            });
        }
    }
    Report { rows, missing }
}

impl Report {
    pub fn to_table(&self) -> String {
        let gw = self.rows.iter().map(|r| r.group.len()).max().unwrap_or(5).max(5);
        let mut s = String::new();
        let _ = writeln!(s, "{:<gw$}  {:<14}  {:>14}  {:>14}  {:>4}", "group", "metric", "mean", "std", "n");
        for r in &self.rows {
            let _ = writeln!(s, "{:<gw$}  {:<14}  {:>14.6e}  {:>14.6e}  {:>4}", r.group, r.metric, r.mean, r.std, r.n);
        }
        for m in &self.missing {
            let _ = writeln!(s, "missing: {}", m.display());
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("group,metric,mean,std,n\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.group, r.metric, r.mean, r.std, r.n);
        }
        s
    }
}
