//! Per-tick trajectory records, the binary session log, task metrics and
//! the relative-change aggregation used to compare scaling configurations.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::wire::{Reader, Writer};
use crate::follower::{ReachTask, TaskStatus, TaskTracker};
use crate::kinematics::Pose;

#[derive(Debug, Error)]
pub enum TelemetryError {
    #[error("non-finite point at tick {0}")]
    NonFinite(usize),
    #[error("path needs at least one point")]
    EmptyPath,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("metrics csv line {line}: {msg}")]
    Csv { line: u64, msg: String },
    #[error("not a session log: bad header {0:?}")]
    BadHeader(Vec<u8>),
    #[error("log version mismatch: file is TLOG{found}, reader supports TLOG{LOG_VERSION}")]
    VersionMismatch { found: char },
    #[error("log truncated at byte offset {offset}")]
    Truncated { offset: usize },
    #[error("corrupt log record at byte offset {offset}: {msg}")]
    Corrupt { offset: usize, msg: String },
    #[error("record tick {now} does not follow tick {last}")]
    NonMonotonicTick { last: u64, now: u64 },
    #[error("log has no session metadata record")]
    MissingMeta,
    #[error("no tasks shared by {baseline:?} and {variant:?}")]
    NoSharedTasks { baseline: String, variant: String },
    #[error("baseline value is zero for task {task:?}")]
    ZeroBaseline { task: String },
    #[error("duplicate metrics row for task {task:?}, config {config:?}")]
    DuplicateRow { task: String, config: String },
    #[error("negative or non-finite metric {field} for task {task:?}")]
    InvalidMetric { task: String, field: &'static str },
    #[error("meta: {0}")]
    Meta(String),
}

/// Sum of Euclidean segment lengths. Errors name the first non-finite
/// sample by its index (one sample per tick).
pub fn path_length(points: &[Vector3<f64>]) -> Result<f64, TelemetryError> {
    if points.is_empty() {
        return Err(TelemetryError::EmptyPath);
    }
    let mut acc = PathAccumulator::default();
    for (i, p) in points.iter().enumerate() {
        if !acc.push(p) {
            return Err(TelemetryError::NonFinite(i));
        }
    }
    Ok(acc.length())
}

/// Running path length, shared by live runs and replay so both add the
/// same segments in the same order.
#[derive(Debug, Clone, Default)]
pub struct PathAccumulator {
    last: Option<Vector3<f64>>,
    total: f64,
}

impl PathAccumulator {
    /// Returns false (and ignores the point) when it is not finite.
    pub fn push(&mut self, p: &Vector3<f64>) -> bool {
        if !p.iter().all(|c| c.is_finite()) {
            return false;
        }
        if let Some(last) = self.last {
            self.total += (p - last).norm();
        }
        self.last = Some(*p);
        true
    }

    pub fn length(&self) -> f64 {
        self.total
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRecord {
    pub tick: u64,
    pub master_pose: Pose,
    pub follower_target: Pose,
    pub follower_actual: Pose,
    /// Sequence number of the telecommand handled this tick, if any.
    pub seq: Option<u64>,
    pub clutched: bool,
    pub gamma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Fault,
    ConfigChange,
    Completed,
    Note,
}

impl EventKind {
    fn code(self) -> u8 {
        match self {
            EventKind::Fault => 1,
            EventKind::ConfigChange => 2,
            EventKind::Completed => 3,
            EventKind::Note => 4,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            1 => EventKind::Fault,
            2 => EventKind::ConfigChange,
            3 => EventKind::Completed,
            4 => EventKind::Note,
            _ => return None,
        })
    }
}

/// Everything replay needs to recompute metrics without the original
/// config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub task: ReachTask,
    pub config_label: String,
    pub tick_hz: f64,
    /// The full configuration the session ran with, for provenance.
    #[serde(default)]
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LogRecord {
    Meta(SessionMeta),
    Trajectory(TrajectoryRecord),
    Event {
        tick: u64,
        kind: EventKind,
        detail: String,
    },
}

impl LogRecord {
    pub fn tick(&self) -> Option<u64> {
        match self {
            LogRecord::Meta(_) => None,
            LogRecord::Trajectory(r) => Some(r.tick),
            LogRecord::Event { tick, .. } => Some(*tick),
        }
    }
}

pub const LOG_MAGIC: &[u8; 4] = b"TLOG";
pub const LOG_VERSION: char = '1';
const HEADER_LEN: usize = 5;

const KIND_META: u8 = 1;
const KIND_TRAJECTORY: u8 = 2;
const KIND_EVENT: u8 = 3;

const FLAG_CLUTCHED: u8 = 0x01;
const FLAG_HAS_SEQ: u8 = 0x02;

const TRAJECTORY_BODY_LEN: usize = 8 + 3 * 56 + 8 + 1 + 8;

fn encode_record(record: &LogRecord, out: &mut Vec<u8>) {
    let mut body = Vec::with_capacity(1 + TRAJECTORY_BODY_LEN);
    let mut w = Writer::new(&mut body);
    match record {
        LogRecord::Meta(meta) => {
            w.u8(KIND_META);
            let json = serde_json::to_vec(meta).expect("session meta serializes");
            body.extend_from_slice(&json);
        }
        LogRecord::Trajectory(r) => {
            w.u8(KIND_TRAJECTORY);
            w.u64(r.tick);
            w.pose(&r.master_pose);
            w.pose(&r.follower_target);
            w.pose(&r.follower_actual);
            w.u64(r.seq.unwrap_or(0));
            let mut flags = 0;
            if r.clutched {
                flags |= FLAG_CLUTCHED;
            }
            if r.seq.is_some() {
                flags |= FLAG_HAS_SEQ;
            }
            w.u8(flags);
            w.f64(r.gamma);
        }
        LogRecord::Event { tick, kind, detail } => {
            w.u8(KIND_EVENT);
            w.u64(*tick);
            w.u8(kind.code());
            body.extend_from_slice(detail.as_bytes());
        }
    }
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(&body);
    out.extend_from_slice(&crc32fast::hash(&body).to_le_bytes());
}

fn decode_body(body: &[u8], offset: usize) -> Result<LogRecord, TelemetryError> {
    let corrupt = |msg: String| TelemetryError::Corrupt { offset, msg };
    let (&kind, rest) = body
        .split_first()
        .ok_or_else(|| corrupt("empty record".into()))?;
    match kind {
        KIND_META => {
            let meta: SessionMeta =
                serde_json::from_slice(rest).map_err(|e| corrupt(format!("meta: {e}")))?;
            Ok(LogRecord::Meta(meta))
        }
        KIND_TRAJECTORY => {
            if rest.len() != TRAJECTORY_BODY_LEN {
                return Err(corrupt(format!(
                    "trajectory record is {} bytes, expected {TRAJECTORY_BODY_LEN}",
                    rest.len()
                )));
            }
            let mut r = Reader::new(rest);
            let tick = r.u64();
            let wire = |e: crate::channel::WireError| corrupt(e.to_string());
            let master_pose = r.pose("master_pose").map_err(wire)?;
            let follower_target = r.pose("follower_target").map_err(wire)?;
            let follower_actual = r.pose("follower_actual").map_err(wire)?;
            let seq = r.u64();
            let flags = r.u8();
            if flags & !(FLAG_CLUTCHED | FLAG_HAS_SEQ) != 0 {
                return Err(corrupt(format!("reserved flag bits set ({flags:#04x})")));
            }
            let gamma = r.f64();
            Ok(LogRecord::Trajectory(TrajectoryRecord {
                tick,
                master_pose,
                follower_target,
                follower_actual,
                seq: (flags & FLAG_HAS_SEQ != 0).then_some(seq),
                clutched: flags & FLAG_CLUTCHED != 0,
                gamma,
            }))
        }
        KIND_EVENT => {
            if rest.len() < 9 {
                return Err(corrupt("event record too short".into()));
            }
            let mut r = Reader::new(rest);
            let tick = r.u64();
            let code = r.u8();
            let kind = EventKind::from_code(code)
                .ok_or_else(|| corrupt(format!("unknown event kind {code}")))?;
            let detail = String::from_utf8(rest[9..].to_vec())
                .map_err(|e| corrupt(format!("event detail: {e}")))?;
            debug_assert_eq!(r.remaining(), rest.len() - 9);
            Ok(LogRecord::Event { tick, kind, detail })
        }
        other => Err(corrupt(format!("unknown record kind {other}"))),
    }
}

/// Tracks the ordering rule: trajectory ticks strictly increase, events
/// never go back in time.
#[derive(Debug, Default, Clone)]
struct TickOrder {
    last_trajectory: Option<u64>,
    last_any: Option<u64>,
}

impl TickOrder {
    fn check(&mut self, record: &LogRecord) -> Result<(), TelemetryError> {
        let Some(tick) = record.tick() else {
            return Ok(());
        };
        if let LogRecord::Trajectory(_) = record {
            if let Some(last) = self.last_trajectory {
                if tick <= last {
                    return Err(TelemetryError::NonMonotonicTick { last, now: tick });
                }
            }
            self.last_trajectory = Some(tick);
        }
        if let Some(last) = self.last_any {
            if tick < last {
                return Err(TelemetryError::NonMonotonicTick { last, now: tick });
            }
        }
        self.last_any = Some(tick);
        Ok(())
    }
}

pub fn encode_log(records: &[LogRecord]) -> Result<Vec<u8>, TelemetryError> {
    let mut out = Vec::new();
    out.extend_from_slice(LOG_MAGIC);
    out.push(LOG_VERSION as u8);
    let mut order = TickOrder::default();
    for r in records {
        order.check(r)?;
        encode_record(r, &mut out);
    }
    Ok(out)
}

pub fn decode_log(bytes: &[u8]) -> Result<Vec<LogRecord>, TelemetryError> {
    if bytes.len() < HEADER_LEN {
        if LOG_MAGIC.starts_with(bytes) {
            return Err(TelemetryError::Truncated {
                offset: bytes.len(),
            });
        }
        return Err(TelemetryError::BadHeader(bytes.to_vec()));
    }
    if &bytes[..4] != LOG_MAGIC {
        return Err(TelemetryError::BadHeader(bytes[..HEADER_LEN].to_vec()));
    }
    if bytes[4] != LOG_VERSION as u8 {
        return Err(TelemetryError::VersionMismatch {
            found: bytes[4] as char,
        });
    }
    let mut records = Vec::new();
    let mut order = TickOrder::default();
    let mut pos = HEADER_LEN;
    while pos < bytes.len() {
        let start = pos;
        if bytes.len() - pos < 4 {
            return Err(TelemetryError::Truncated { offset: bytes.len() });
        }
        let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().expect("4 bytes")) as usize;
        pos += 4;
        if bytes.len() - pos < len + 4 {
            return Err(TelemetryError::Truncated { offset: bytes.len() });
        }
        let body = &bytes[pos..pos + len];
        pos += len;
        let stored = u32::from_le_bytes(bytes[pos..pos + 4].try_into().expect("4 bytes"));
        pos += 4;
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(TelemetryError::Corrupt {
                offset: start,
                msg: format!("crc32 stored {stored:#010x}, computed {computed:#010x}"),
            });
        }
        let record = decode_body(body, start)?;
        order.check(&record)?;
        records.push(record);
    }
    Ok(records)
}

pub fn write_log(path: &Path, records: &[LogRecord]) -> Result<(), TelemetryError> {
    let bytes = encode_log(records)?;
    let tmp = partial_path(path);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>, TelemetryError> {
    decode_log(&fs::read(path)?)
}

fn partial_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".partial");
    path.with_file_name(name)
}

/// Append-only log file. Records go to `<path>.partial` and the file is
/// renamed into place by [`LogWriter::finish`], so readers only ever see
/// complete logs.
pub struct LogWriter {
    file: std::io::BufWriter<fs::File>,
    tmp: PathBuf,
    path: PathBuf,
    order: TickOrder,
    scratch: Vec<u8>,
    written: usize,
}

impl LogWriter {
    pub fn create(path: &Path) -> Result<Self, TelemetryError> {
        let tmp = partial_path(path);
        let mut file = std::io::BufWriter::new(fs::File::create(&tmp)?);
        file.write_all(LOG_MAGIC)?;
        file.write_all(&[LOG_VERSION as u8])?;
        Ok(Self {
            file,
            tmp,
            path: path.to_path_buf(),
            order: TickOrder::default(),
            scratch: Vec::new(),
            written: 0,
        })
    }

    pub fn append(&mut self, record: &LogRecord) -> Result<(), TelemetryError> {
        self.order.check(record)?;
        self.scratch.clear();
        encode_record(record, &mut self.scratch);
        self.file.write_all(&self.scratch)?;
        self.written += 1;
        Ok(())
    }

    pub fn records_written(&self) -> usize {
        self.written
    }

    pub fn finish(mut self) -> Result<PathBuf, TelemetryError> {
        self.file.flush()?;
        drop(self.file);
        fs::rename(&self.tmp, &self.path)?;
        Ok(self.path)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: String,
    pub config: String,
    pub time_s: Option<f64>,
    pub dist_left_m: Option<f64>,
    pub dist_right_m: Option<f64>,
}

impl TaskMetrics {
    pub fn validate(&self) -> Result<(), TelemetryError> {
        for (field, v) in [
            ("time_s", self.time_s),
            ("dist_left_m", self.dist_left_m),
            ("dist_right_m", self.dist_right_m),
        ] {
            if let Some(v) = v {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(TelemetryError::InvalidMetric {
                        task: self.task.clone(),
                        field,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Incremental metrics for one single-arm run. Timing starts at the first
/// tick that carries a telecommand and stops at task completion; distance
/// is the follower's actual path over the same window.
#[derive(Debug, Clone)]
pub struct MetricsBuilder {
    tracker: TaskTracker,
    config: String,
    tick_hz: f64,
    start_tick: Option<u64>,
    completed: Option<u64>,
    actual: PathAccumulator,
    commanded: PathAccumulator,
}

impl MetricsBuilder {
    pub fn new(task: ReachTask, config: &str, tick_hz: f64) -> Self {
        Self {
            tracker: TaskTracker::new(task),
            config: config.to_string(),
            tick_hz,
            start_tick: None,
            completed: None,
            actual: PathAccumulator::default(),
            commanded: PathAccumulator::default(),
        }
    }

    /// Feeds one trajectory record; returns the completion tick once the
    /// task is done. Records after completion are ignored.
    pub fn push(&mut self, r: &TrajectoryRecord) -> Option<u64> {
        if self.completed.is_some() {
            return self.completed;
        }
        if self.start_tick.is_none() && r.seq.is_some() {
            self.start_tick = Some(r.tick);
        }
        if self.start_tick.is_some() {
            self.actual.push(&r.follower_actual.position);
            self.commanded.push(&r.follower_target.position);
            if let TaskStatus::Completed { tick } = self.tracker.update(&r.follower_actual.position, r.tick) {
                self.completed = Some(tick);
            }
        }
        self.completed
    }

    pub fn completed_tick(&self) -> Option<u64> {
        self.completed
    }

    pub fn status(&self) -> TaskStatus {
        self.tracker.status()
    }

    pub fn commanded_distance(&self) -> f64 {
        self.commanded.length()
    }

    pub fn metrics(&self) -> TaskMetrics {
        let time_s = match (self.start_tick, self.completed) {
            (Some(s), Some(e)) => Some((e - s) as f64 / self.tick_hz),
            _ => None,
        };
        TaskMetrics {
            task: self.tracker.task().id.clone(),
            config: self.config.clone(),
            time_s,
            dist_left_m: self.start_tick.map(|_| self.actual.length()),
            dist_right_m: None,
        }
    }
}

/// Recomputes task metrics from a decoded session log.
pub fn replay(records: &[LogRecord]) -> Result<TaskMetrics, TelemetryError> {
    let meta = records
        .iter()
        .find_map(|r| match r {
            LogRecord::Meta(m) => Some(m),
            _ => None,
        })
        .ok_or(TelemetryError::MissingMeta)?;
    let mut builder = MetricsBuilder::new(meta.task.clone(), &meta.config_label, meta.tick_hz);
    for r in records {
        if let LogRecord::Trajectory(t) = r {
            builder.push(t);
        }
    }
    Ok(builder.metrics())
}

pub const METRICS_CSV_HEADER: [&str; 5] = ["task", "config", "time_s", "dist_left_m", "dist_right_m"];
pub const MISSING_CELL: &str = "---";

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| MISSING_CELL.to_string(), |x| x.to_string())
}

pub fn metrics_to_csv(metrics: &[TaskMetrics]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(METRICS_CSV_HEADER).expect("in-memory csv");
    for m in metrics {
        w.write_record([
            m.task.clone(),
            m.config.clone(),
            cell(m.time_s),
            cell(m.dist_left_m),
            cell(m.dist_right_m),
        ])
        .expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
}

pub fn metrics_from_csv(text: &str) -> Result<Vec<TaskMetrics>, TelemetryError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| TelemetryError::Csv {
        line: 1,
        msg: e.to_string(),
    })?;
    if headers.iter().collect::<Vec<_>>() != METRICS_CSV_HEADER {
        return Err(TelemetryError::Csv {
            line: 1,
            msg: format!("expected header {}", METRICS_CSV_HEADER.join(",")),
        });
    }
    let mut out: Vec<TaskMetrics> = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| TelemetryError::Csv {
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let num = |i: usize| -> Result<Option<f64>, TelemetryError> {
            let s = &row[i];
            if s == MISSING_CELL || s.is_empty() {
                return Ok(None);
            }
            f64::from_str(s).map(Some).map_err(|e| TelemetryError::Csv {
                line,
                msg: format!("{}: {e}", METRICS_CSV_HEADER[i]),
            })
        };
        let m = TaskMetrics {
            task: row[0].to_string(),
            config: row[1].to_string(),
            time_s: num(2)?,
            dist_left_m: num(3)?,
            dist_right_m: num(4)?,
        };
        m.validate()?;
        if out.iter().any(|o| o.task == m.task && o.config == m.config) {
            return Err(TelemetryError::DuplicateRow {
                task: m.task,
                config: m.config,
            });
        }
        out.push(m);
    }
    Ok(out)
}

pub fn load_metrics_csv(path: &Path) -> Result<Vec<TaskMetrics>, TelemetryError> {
    metrics_from_csv(&fs::read_to_string(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    Time,
    Distance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMethod {
    PerTaskRatioMean,
    RatioOfTotals,
}

impl FromStr for AggregationMethod {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "per_task_ratio_mean" => Ok(Self::PerTaskRatioMean),
            "ratio_of_totals" => Ok(Self::RatioOfTotals),
            other => Err(format!(
                "unknown method {other:?} (expected per_task_ratio_mean or ratio_of_totals)"
            )),
        }
    }
}

impl std::fmt::Display for AggregationMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::PerTaskRatioMean => "per_task_ratio_mean",
            Self::RatioOfTotals => "ratio_of_totals",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub percent: f64,
    /// Number of (task, hand) pairs that entered the comparison.
    pub pairs: usize,
}

/// Variant relative to baseline, in percent. Tasks (and, for distance,
/// hands) missing on either side are skipped pairwise.
pub fn aggregate_relative(
    metrics: &[TaskMetrics],
    baseline: &str,
    variant: &str,
    quantity: Quantity,
    method: AggregationMethod,
) -> Result<Aggregate, TelemetryError> {
    let base: HashMap<&str, &TaskMetrics> = metrics
        .iter()
        .filter(|m| m.config == baseline)
        .map(|m| (m.task.as_str(), m))
        .collect();
    let mut pairs: Vec<(&str, f64, f64)> = Vec::new();
    for v in metrics.iter().filter(|m| m.config == variant) {
        let Some(b) = base.get(v.task.as_str()) else {
            continue;
        };
        let cells: &[(Option<f64>, Option<f64>)] = match quantity {
            Quantity::Time => &[(b.time_s, v.time_s)],
            Quantity::Distance => &[(b.dist_left_m, v.dist_left_m), (b.dist_right_m, v.dist_right_m)],
        };
        for (bv, vv) in cells {
            if let (Some(bv), Some(vv)) = (bv, vv) {
                pairs.push((&v.task, *bv, *vv));
            }
        }
    }
    if pairs.is_empty() {
        return Err(TelemetryError::NoSharedTasks {
            baseline: baseline.into(),
            variant: variant.into(),
        });
    }
    if let Some((task, _, _)) = pairs.iter().find(|(_, b, _)| *b == 0.0) {
        return Err(TelemetryError::ZeroBaseline {
            task: task.to_string(),
        });
    }
    let percent = match method {
        AggregationMethod::PerTaskRatioMean => {
            pairs.iter().map(|(_, b, v)| v / b).sum::<f64>() / pairs.len() as f64 * 100.0
        }
        AggregationMethod::RatioOfTotals => {
            let (sb, sv) = pairs
                .iter()
                .fold((0.0, 0.0), |(sb, sv), (_, b, v)| (sb + b, sv + v));
            sv / sb * 100.0
        }
    };
    Ok(Aggregate {
        percent,
        pairs: pairs.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    /// Cells printed with the shortest exact representation.
    Text,
    /// Cells printed with a fixed number of decimals.
    TextFixed(usize),
    Csv,
}

fn first_seen<'a>(it: impl Iterator<Item = &'a str>) -> Vec<&'a str> {
    let mut out: Vec<&str> = Vec::new();
    for s in it {
        if !out.contains(&s) {
            out.push(s);
        }
    }
    out
}

/// Renders the time / left distance / right distance grids, one row per
/// config and one column per task, in first-seen order.
pub fn emit_table(metrics: &[TaskMetrics], format: TableFormat) -> String {
    if format == TableFormat::Csv {
        return metrics_to_csv(metrics);
    }
    let tasks = first_seen(metrics.iter().map(|m| m.task.as_str()));
    let configs = first_seen(metrics.iter().map(|m| m.config.as_str()));
    let grids: [(&str, fn(&TaskMetrics) -> Option<f64>); 3] = [
        ("Time to finish (s)", |m| m.time_s),
        ("Distance travelled, left (m)", |m| m.dist_left_m),
        ("Distance travelled, right (m)", |m| m.dist_right_m),
    ];
    let fmt = |v: Option<f64>| match (v, format) {
        (None, _) => MISSING_CELL.to_string(),
        (Some(x), TableFormat::TextFixed(d)) => format!("{x:.d$}"),
        (Some(x), _) => x.to_string(),
    };
    let mut out = String::new();
    for (i, (title, get)) in grids.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let mut rows: Vec<Vec<String>> = Vec::new();
        let mut header = vec!["config".to_string()];
        header.extend(tasks.iter().map(|t| t.to_string()));
        rows.push(header);
        for c in &configs {
            let mut row = vec![c.to_string()];
            for t in &tasks {
                let v = metrics
                    .iter()
                    .find(|m| m.config == *c && m.task == *t)
                    .and_then(get);
                row.push(fmt(v));
            }
            rows.push(row);
        }
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|j| rows.iter().map(|r| r[j].len()).max().unwrap_or(0))
            .collect();
        let _ = writeln!(out, "{title}");
        for row in &rows {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:>w$}"))
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
    }
    out
}
