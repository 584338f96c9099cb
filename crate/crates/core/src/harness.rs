//! Experiment configuration, the deterministic simulation loop and the
//! multi-configuration suite runner.
//!
//! Per-tick order: operator, controller, command channel, follower apply
//! and regulate, task tracking and logging, feedback channel, operator
//! feedback buffer.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::channel::{tick_hz_from_env, ChannelConfig, FeedbackMsg, SimChannel};
use crate::controller::{ControllerOptions, FrameAlignment, MasterController, ScalingConfig, Telecommand};
use crate::follower::{FollowerState, ReachTask};
use crate::kinematics::{KinematicChain, Pose};
use crate::operators::{Operator, OperatorSpec};
use crate::telemetry::{
    aggregate_relative, emit_table, AggregationMethod, EventKind, LogRecord, LogWriter, MetricsBuilder,
    Quantity, SessionMeta, TableFormat, TaskMetrics, TelemetryError, TrajectoryRecord,
};

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_MAX_TICKS: u64 = 10_000_000;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("telemetry: {0}")]
    Telemetry(#[from] TelemetryError),
}

impl HarnessError {
    /// Process exit code for the CLI: 2 for unreadable or invalid inputs,
    /// 3 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Io { .. } => 2,
            HarnessError::Telemetry(_) => 3,
        }
    }
}

fn config_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

fn default_schema() -> u32 {
    SCHEMA_VERSION
}
fn default_tick_hz() -> f64 {
    1000.0
}
fn default_max_ticks() -> u64 {
    DEFAULT_MAX_TICKS
}
fn default_alignment() -> [f64; 4] {
    [1.0, 0.0, 0.0, 0.0]
}
fn default_alpha() -> f64 {
    crate::controller::SmoothedVelocity::DEFAULT_ALPHA
}
fn default_true() -> bool {
    true
}
fn default_linear_rate() -> f64 {
    FollowerState::DEFAULT_LINEAR_RATE
}
fn default_angular_rate() -> f64 {
    FollowerState::DEFAULT_ANGULAR_RATE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    pub label: String,
    #[serde(default = "default_tick_hz")]
    pub tick_hz: f64,
    /// Fixed run length; `None` runs until the task completes.
    #[serde(default)]
    pub duration_ticks: Option<u64>,
    #[serde(default = "default_max_ticks")]
    pub max_ticks: u64,
    pub scaling: ScalingConfig,
    /// Master-to-follower rotation as (w, x, y, z).
    #[serde(default = "default_alignment")]
    pub alignment: [f64; 4],
    /// Command direction; also used for feedback unless overridden.
    #[serde(default)]
    pub channel: ChannelConfig,
    #[serde(default)]
    pub feedback_channel: Option<ChannelConfig>,
    pub operator: OperatorSpec,
    /// Task fixture file, relative to the config file.
    pub task: PathBuf,
    /// Optional master chain file; loaded and validated.
    #[serde(default)]
    pub chain: Option<PathBuf>,
    /// Root seed. Channel jitter and operator tremor streams derive from it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_alpha")]
    pub smoothing_alpha: f64,
    #[serde(default = "default_true")]
    pub stream_orientation_while_clutched: bool,
    #[serde(default = "default_linear_rate")]
    pub follower_max_linear_rate: f64,
    #[serde(default = "default_angular_rate")]
    pub follower_max_angular_rate: f64,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(config_err(format!(
                "schema_version {} not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.label.trim().is_empty() {
            return Err(config_err("label must not be empty"));
        }
        if !(self.tick_hz.is_finite() && self.tick_hz > 0.0) {
            return Err(config_err(format!("tick_hz must be > 0, got {}", self.tick_hz)));
        }
        if self.max_ticks == 0 {
            return Err(config_err("max_ticks must be > 0"));
        }
        self.scaling.validate().map_err(|e| config_err(e.to_string()))?;
        FrameAlignment::from_wxyz(self.alignment).map_err(|e| config_err(format!("alignment: {e}")))?;
        self.channel.validate().map_err(|e| config_err(format!("channel: {e}")))?;
        if let Some(fb) = &self.feedback_channel {
            fb.validate().map_err(|e| config_err(format!("feedback_channel: {e}")))?;
        }
        self.operator.validate().map_err(|e| config_err(e.to_string()))?;
        if !(self.smoothing_alpha > 0.0 && self.smoothing_alpha <= 1.0) {
            return Err(config_err(format!("smoothing_alpha must be in (0, 1], got {}", self.smoothing_alpha)));
        }
        for (name, v) in [
            ("follower_max_linear_rate", self.follower_max_linear_rate),
            ("follower_max_angular_rate", self.follower_max_angular_rate),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(config_err(format!("{name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Applies the `TELEOP_TICK_HZ` override, if set.
    pub fn apply_env(&mut self) {
        self.tick_hz = tick_hz_from_env(self.tick_hz);
    }

    pub fn alignment(&self) -> FrameAlignment {
        FrameAlignment::from_wxyz(self.alignment).expect("validated alignment")
    }

    fn command_channel(&self) -> ChannelConfig {
        ChannelConfig {
            seed: self.seed.wrapping_mul(4).wrapping_add(1),
            ..self.channel.clone()
        }
    }

    fn feedback_channel_config(&self) -> ChannelConfig {
        ChannelConfig {
            seed: self.seed.wrapping_mul(4).wrapping_add(2),
            ..self.feedback_channel.clone().unwrap_or_else(|| self.channel.clone())
        }
    }

    fn operator_spec(&self) -> OperatorSpec {
        OperatorSpec {
            seed: self.seed.wrapping_mul(4).wrapping_add(3),
            ..self.operator.clone()
        }
    }
}

/// A validated config with its fixture (and optional chain) loaded.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub task: ReachTask,
    pub chain: Option<KinematicChain>,
}

fn read_text(path: &Path) -> Result<String, HarnessError> {
    fs::read_to_string(path).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl Experiment {
    pub fn new(config: ExperimentConfig, task: ReachTask) -> Result<Self, HarnessError> {
        config.validate()?;
        task.validate().map_err(|e| config_err(format!("task: {e}")))?;
        Ok(Self {
            config,
            task,
            chain: None,
        })
    }

    /// Loads fixture and chain paths relative to `base_dir`.
    pub fn resolve(config: ExperimentConfig, base_dir: &Path) -> Result<Self, HarnessError> {
        config.validate()?;
        let task_path = resolve(base_dir, &config.task);
        let task = ReachTask::load(&task_path)
            .map_err(|e| config_err(format!("task fixture {}: {e}", task_path.display())))?;
        let chain = match &config.chain {
            Some(p) => {
                let path = resolve(base_dir, p);
                Some(
                    KinematicChain::load(&path)
                        .map_err(|e| config_err(format!("chain {}: {e}", path.display())))?,
                )
            }
            None => None,
        };
        let mut exp = Self::new(config, task)?;
        exp.chain = chain;
        Ok(exp)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let mut config = ExperimentConfig::from_json(&read_text(path)?)?;
        config.apply_env();
        Self::resolve(config, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn meta(&self) -> SessionMeta {
        SessionMeta {
            task: self.task.clone(),
            config_label: self.config.label.clone(),
            tick_hz: self.config.tick_hz,
            config: serde_json::to_value(&self.config).expect("config serializes"),
        }
    }
}

/// Destination for log records.
pub trait LogSink {
    fn append(&mut self, record: &LogRecord) -> Result<(), TelemetryError>;
}

impl LogSink for Vec<LogRecord> {
    fn append(&mut self, record: &LogRecord) -> Result<(), TelemetryError> {
        self.push(record.clone());
        Ok(())
    }
}

impl LogSink for LogWriter {
    fn append(&mut self, record: &LogRecord) -> Result<(), TelemetryError> {
        LogWriter::append(self, record)
    }
}

/// Discards records; useful when only metrics are wanted.
pub struct NullSink;

impl LogSink for NullSink {
    fn append(&mut self, _: &LogRecord) -> Result<(), TelemetryError> {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub metrics: TaskMetrics,
    pub completed_tick: Option<u64>,
    pub ticks_run: u64,
    /// Commanded (follower target) path length over the timed window.
    pub commanded_distance: f64,
    pub fault: Option<String>,
}

/// Runs one experiment, streaming every record to `log`. Module faults end
/// the run with a fault event in the log and `fault` set in the outcome.
pub fn run_experiment(exp: &Experiment, log: &mut dyn LogSink) -> Result<RunOutcome, HarnessError> {
    let cfg = &exp.config;
    let align = cfg.alignment();
    let dt = 1.0 / cfg.tick_hz;
    let master_start = Pose::identity();
    let follower_start = Pose::from_position(exp.task.start());

    let mut operator = Operator::new(
        cfg.operator_spec(),
        exp.task.clone(),
        master_start,
        align,
        cfg.scaling,
        cfg.tick_hz,
    )
    .map_err(|e| config_err(e.to_string()))?;
    let options = ControllerOptions {
        tick_hz: cfg.tick_hz,
        smoothing_alpha: cfg.smoothing_alpha,
        stream_orientation_while_clutched: cfg.stream_orientation_while_clutched,
    };
    let mut controller =
        MasterController::new(cfg.scaling, align, options).map_err(|e| config_err(e.to_string()))?;
    // The operator's first step is already a displacement from the start pose.
    controller.anchor(master_start);
    let mut cmd_channel: SimChannel<Telecommand> =
        SimChannel::new(cfg.command_channel()).map_err(|e| config_err(e.to_string()))?;
    let mut fb_channel: SimChannel<FeedbackMsg> =
        SimChannel::new(cfg.feedback_channel_config()).map_err(|e| config_err(e.to_string()))?;
    let mut follower = FollowerState::new(follower_start, align)
        .with_rates(cfg.follower_max_linear_rate, cfg.follower_max_angular_rate);
    let mut metrics = MetricsBuilder::new(exp.task.clone(), &cfg.label, cfg.tick_hz);

    log.append(&LogRecord::Meta(exp.meta()))?;

    let budget = cfg.duration_ticks.unwrap_or(cfg.max_ticks).min(cfg.max_ticks);
    let mut fault: Option<String> = None;
    let mut tick = 0u64;
    while tick < budget {
        let step = (|| -> Result<(Pose, Telecommand), String> {
            let master = operator.step(tick).map_err(|e| e.to_string())?;
            let cmd = controller
                .step(master, tick, false, 0.0)
                .map_err(|e| e.to_string())?;
            cmd_channel.send(cmd, tick).map_err(|e| e.to_string())?;
            for c in cmd_channel.poll(tick) {
                follower.apply_telecommand(&c).map_err(|e| e.to_string())?;
            }
            follower.regulate(dt);
            Ok((master, cmd))
        })();
        let (master, cmd) = match step {
            Ok(v) => v,
            Err(msg) => {
                log.append(&LogRecord::Event {
                    tick,
                    kind: EventKind::Fault,
                    detail: msg.clone(),
                })?;
                fault = Some(msg);
                break;
            }
        };

        let record = TrajectoryRecord {
            tick,
            master_pose: master,
            follower_target: follower.target_pose,
            follower_actual: follower.actual_pose,
            seq: Some(cmd.seq),
            clutched: cmd.clutched,
            gamma: controller.last_gamma(),
        };
        log.append(&LogRecord::Trajectory(record))?;
        if let Some(done) = metrics.push(&record) {
            log.append(&LogRecord::Event {
                tick: done,
                kind: EventKind::Completed,
                detail: exp.task.id.clone(),
            })?;
            if cfg.duration_ticks.is_none() {
                tick += 1;
                break;
            }
        }

        let fb = FeedbackMsg {
            seq: tick,
            send_tick: tick,
            follower_pose: follower.actual_pose,
            frame_id: tick,
        };
        if let Err(e) = fb_channel.send(fb, tick) {
            let msg = e.to_string();
            log.append(&LogRecord::Event {
                tick,
                kind: EventKind::Fault,
                detail: msg.clone(),
            })?;
            fault = Some(msg);
            break;
        }
        operator.observe_feedback(fb_channel.poll(tick), tick);
        tick += 1;
    }

    if fault.is_none() && cfg.duration_ticks.is_none() && metrics.completed_tick().is_none() {
        let msg = format!("tick budget of {budget} exhausted before task {:?} completed", exp.task.id);
        log.append(&LogRecord::Event {
            tick: tick.saturating_sub(1),
            kind: EventKind::Fault,
            detail: msg.clone(),
        })?;
        fault = Some(msg);
    }

    Ok(RunOutcome {
        metrics: metrics.metrics(),
        completed_tick: metrics.completed_tick(),
        ticks_run: tick,
        commanded_distance: metrics.commanded_distance(),
        fault,
    })
}

/// Runs `exp` and writes its log to `path`.
pub fn run_to_file(exp: &Experiment, path: &Path) -> Result<RunOutcome, HarnessError> {
    let mut writer = LogWriter::create(path)?;
    let outcome = run_experiment(exp, &mut writer)?;
    writer.finish()?;
    Ok(outcome)
}

/// Base config plus per-configuration overlays, run over a shared fixture
/// list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteFile {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    /// Partial experiment config shared by every run.
    pub base: Value,
    /// Overlays merged onto `base`; each must set a distinct `label`.
    pub configs: Vec<Value>,
    /// Task fixtures, relative to the suite file.
    pub tasks: Vec<PathBuf>,
    /// Label the others are compared against; defaults to the first config.
    #[serde(default)]
    pub baseline: Option<String>,
}

fn merge(base: &mut Value, overlay: &Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o.clone(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub baseline: String,
    pub variant: String,
    pub quantity: Quantity,
    pub method: AggregationMethod,
    pub percent: f64,
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub metrics: Vec<TaskMetrics>,
    pub comparisons: Vec<Comparison>,
    /// (config label, task id, outcome) per run, in execution order.
    pub runs: Vec<(String, String, RunOutcome)>,
}

impl SuiteReport {
    pub fn render(&self) -> String {
        let mut out = emit_table(&self.metrics, TableFormat::TextFixed(3));
        out.push('\n');
        out.push_str(&render_comparisons(&self.comparisons));
        out
    }
}

pub fn render_comparisons(comparisons: &[Comparison]) -> String {
    let mut out = String::new();
    for c in comparisons {
        let q = match c.quantity {
            Quantity::Time => "time",
            Quantity::Distance => "distance",
        };
        out.push_str(&format!(
            "{q} {} vs {} {}: {:.1}% (n={})\n",
            c.variant, c.baseline, c.method, c.percent, c.pairs
        ));
    }
    out
}

/// All (variant vs baseline, quantity, method) comparisons that have data.
pub fn compare_all(metrics: &[TaskMetrics], baseline: &str) -> Vec<Comparison> {
    let mut labels: Vec<&str> = Vec::new();
    for m in metrics {
        if m.config != baseline && !labels.contains(&m.config.as_str()) {
            labels.push(&m.config);
        }
    }
    let mut out = Vec::new();
    for variant in labels {
        for quantity in [Quantity::Time, Quantity::Distance] {
            for method in [AggregationMethod::PerTaskRatioMean, AggregationMethod::RatioOfTotals] {
                if let Ok(a) = aggregate_relative(metrics, baseline, variant, quantity, method) {
                    out.push(Comparison {
                        baseline: baseline.to_string(),
                        variant: variant.to_string(),
                        quantity,
                        method,
                        percent: a.percent,
                        pairs: a.pairs,
                    });
                }
            }
        }
    }
    out
}

/// A suite expanded into concrete experiments.
#[derive(Debug, Clone)]
pub struct Suite {
    pub baseline: String,
    pub experiments: Vec<Experiment>,
}

impl Suite {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let file: SuiteFile =
            serde_json::from_str(&read_text(path)?).map_err(|e| config_err(e.to_string()))?;
        Self::from_file(file, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn from_file(file: SuiteFile, base_dir: &Path) -> Result<Self, HarnessError> {
        if file.schema_version != SCHEMA_VERSION {
            return Err(config_err(format!(
                "suite schema_version {} not supported (expected {SCHEMA_VERSION})",
                file.schema_version
            )));
        }
        if file.configs.len() < 2 {
            return Err(config_err("nothing to compare: a suite needs at least two configs"));
        }
        if file.tasks.is_empty() {
            return Err(config_err("suite lists no task fixtures"));
        }
        let mut tasks = Vec::new();
        for t in &file.tasks {
            let path = resolve(base_dir, t);
            tasks.push((
                t.clone(),
                ReachTask::load(&path)
                    .map_err(|e| config_err(format!("task fixture {}: {e}", path.display())))?,
            ));
        }
        let mut labels: Vec<String> = Vec::new();
        let mut experiments = Vec::new();
        for overlay in &file.configs {
            if overlay.get("task").is_some() {
                return Err(config_err(
                    "config overlays may not set \"task\": every config must run the suite's shared fixtures",
                ));
            }
            let mut merged = file.base.clone();
            merge(&mut merged, overlay);
            if merged.get("task").is_some() {
                return Err(config_err("suite base may not set \"task\"; list fixtures under \"tasks\""));
            }
            let label = merged
                .get("label")
                .and_then(Value::as_str)
                .ok_or_else(|| config_err("every suite config needs a label"))?
                .to_string();
            if labels.contains(&label) {
                return Err(config_err(format!("duplicate config label {label:?}")));
            }
            labels.push(label);
            for (rel, task) in &tasks {
                let mut with_task = merged.clone();
                with_task["task"] = Value::String(rel.to_string_lossy().into_owned());
                let mut cfg: ExperimentConfig = serde_json::from_value(with_task)
                    .map_err(|e| config_err(format!("config {:?}: {e}", labels.last().unwrap())))?;
                cfg.apply_env();
                let mut exp = Experiment::new(cfg, task.clone())?;
                if let Some(chain) = &exp.config.chain {
                    let path = resolve(base_dir, chain);
                    exp.chain = Some(
                        KinematicChain::load(&path)
                            .map_err(|e| config_err(format!("chain {}: {e}", path.display())))?,
                    );
                }
                experiments.push(exp);
            }
        }
        let baseline = file.baseline.unwrap_or_else(|| labels[0].clone());
        if !labels.contains(&baseline) {
            return Err(config_err(format!("baseline {baseline:?} is not one of the suite's configs")));
        }
        Ok(Self {
            baseline,
            experiments,
        })
    }

    /// Runs every experiment. When `log_dir` is given each run's log is
    /// written there as `<label>__<task>.tlog`.
    pub fn run(&self, log_dir: Option<&Path>) -> Result<SuiteReport, HarnessError> {
        let mut runs = Vec::new();
        let mut metrics = Vec::new();
        for exp in &self.experiments {
            let outcome = match log_dir {
                Some(dir) => run_to_file(exp, &dir.join(log_file_name(exp)))?,
                None => run_experiment(exp, &mut NullSink)?,
            };
            metrics.push(outcome.metrics.clone());
            runs.push((exp.config.label.clone(), exp.task.id.clone(), outcome));
        }
        Ok(SuiteReport {
            comparisons: compare_all(&metrics, &self.baseline),
            metrics,
            runs,
        })
    }
}

pub fn log_file_name(exp: &Experiment) -> String {
    let clean = |s: &str| -> String {
        s.chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect()
    };
    format!("{}__{}.tlog", clean(&exp.config.label), clean(&exp.task.id))
}

/// Closed-form completion time, in ticks, of the scripted operator on a
/// single straight reach: travel of `distance / (gain * speed)` seconds on
/// top of the fixed `overhead_ticks`.
pub fn scripted_travel_ticks(distance: f64, gain: f64, speed: f64, tick_hz: f64) -> f64 {
    distance / (gain * speed) * tick_hz
}
