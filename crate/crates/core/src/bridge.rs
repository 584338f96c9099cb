//! Web-socket bridge: a human master drives the same controller, channel,
//! follower and telemetry stack that the simulation uses.
//!
//! One TCP port serves three things:
//!
//! * `GET /session/config` returns the session configuration as JSON.
//! * `GET /session/:id/metrics` returns live or final metrics for a session.
//! * `GET /session/ws` upgrades to a web socket. Binary messages are wire
//!   frames; text messages are JSON control and status messages.
//!
//! Client telecommand frames carry the *unscaled* master displacement since
//! the client's previous frame in `delta_p_scaled`, plus the raw master
//! orientation, clutch flag and gripper. The server integrates the master
//! pose and runs the scaling controller itself, so the effective gain is
//! always decided server-side.
//!
//! Each session has a network context (socket reads and writes) and a tick
//! loop paced by the wall clock. The network context hands inbound frames
//! to the tick loop through an ordered queue; the tick loop is the only
//! writer of the session log.

use std::collections::HashMap;
use std::io::{ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;
use tungstenite::handshake::derive_accept_key;
use tungstenite::protocol::Role;
use tungstenite::WebSocket;

use crate::channel::wire::WIRE_VERSION;
use crate::channel::{deserialize, serialize, FeedbackMsg, Message, SimChannel, FRAME_LEN};
use crate::controller::{ControllerOptions, MasterController, ScalingConfig, Telecommand};
use crate::follower::FollowerState;
use crate::harness::{Experiment, HarnessError};
use crate::kinematics::Pose;
use crate::telemetry::{
    EventKind, LogRecord, LogWriter, MetricsBuilder, TaskMetrics, TelemetryError, TrajectoryRecord,
};

pub const WS_PATH: &str = "/session/ws";
const MAX_REQUEST_BYTES: usize = 16 * 1024;

#[derive(Debug, Error)]
pub enum BridgeError {
    #[error("bind {address}: {source}")]
    Bind {
        address: String,
        source: std::io::Error,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
}

#[derive(Debug, Clone)]
pub struct BridgeOptions {
    /// Directory for session logs (`<session id>.tlog`).
    pub log_dir: PathBuf,
    /// Send a JSON status text message every this many ticks (0 = never).
    pub status_every_ticks: u64,
    /// Send a feedback frame every this many ticks.
    pub feedback_every_ticks: u64,
}

impl Default for BridgeOptions {
    fn default() -> Self {
        Self {
            log_dir: PathBuf::from("."),
            status_every_ticks: 50,
            feedback_every_ticks: 1,
        }
    }
}

/// Control messages a client may send as text frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientControl {
    SetScaling { gamma_c: f64, gamma_v: f64 },
    Ping,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Active,
    Finished,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub state: SessionState,
    pub ticks: u64,
    pub metrics: TaskMetrics,
    pub log: PathBuf,
    pub rejected_frames: u64,
}

enum Inbound {
    Command(Telecommand),
    Control(ClientControl),
    Rejected(String),
    Disconnected,
}

enum Outbound {
    Binary(Vec<u8>),
    Text(String),
}

struct Shared {
    experiment: Experiment,
    options: BridgeOptions,
    sessions: Mutex<HashMap<String, SessionSummary>>,
    active: AtomicBool,
    next_session: AtomicU64,
    stop: AtomicBool,
    workers: Mutex<Vec<JoinHandle<()>>>,
}

/// Handle to a running bridge.
pub struct BridgeHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    acceptor: Option<JoinHandle<()>>,
}

impl BridgeHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn session(&self, id: &str) -> Option<SessionSummary> {
        self.shared.sessions.lock().expect("sessions lock").get(id).cloned()
    }

    /// Blocks until the bridge is stopped from another thread.
    pub fn wait(mut self) {
        if let Some(a) = self.acceptor.take() {
            let _ = a.join();
        }
    }

    /// Stops accepting, ends any active session and joins all threads.
    pub fn shutdown(mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        if let Some(a) = self.acceptor.take() {
            let _ = a.join();
        }
        let workers: Vec<_> = self.shared.workers.lock().expect("workers lock").drain(..).collect();
        for w in workers {
            let _ = w.join();
        }
    }
}

pub fn serve_bridge(
    experiment: Experiment,
    listen: &str,
    options: BridgeOptions,
) -> Result<BridgeHandle, BridgeError> {
    let listener = TcpListener::bind(listen).map_err(|source| BridgeError::Bind {
        address: listen.to_string(),
        source,
    })?;
    listener.set_nonblocking(true)?;
    std::fs::create_dir_all(&options.log_dir)?;
    let addr = listener.local_addr()?;
    let shared = Arc::new(Shared {
        experiment,
        options,
        sessions: Mutex::new(HashMap::new()),
        active: AtomicBool::new(false),
        next_session: AtomicU64::new(1),
        stop: AtomicBool::new(false),
        workers: Mutex::new(Vec::new()),
    });
    let acceptor = {
        let shared = Arc::clone(&shared);
        thread::spawn(move || accept_loop(listener, shared))
    };
    log::info!("bridge listening on {addr}");
    Ok(BridgeHandle {
        addr,
        shared,
        acceptor: Some(acceptor),
    })
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    while !shared.stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                if let Err(e) = handle_connection(stream, &shared) {
                    log::warn!("connection from {peer}: {e}");
                }
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
            Err(e) => {
                log::warn!("accept: {e}");
                thread::sleep(Duration::from_millis(5));
            }
        }
    }
}

struct Request {
    method: String,
    path: String,
    headers: Vec<(String, String)>,
}

impl Request {
    fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }
}

fn read_request(stream: &mut TcpStream) -> std::io::Result<Option<Request>> {
    stream.set_read_timeout(Some(Duration::from_secs(2)))?;
    let mut buf = Vec::new();
    let mut chunk = [0u8; 1024];
    while !buf.windows(4).any(|w| w == b"\r\n\r\n") {
        if buf.len() > MAX_REQUEST_BYTES {
            return Ok(None);
        }
        let n = stream.read(&mut chunk)?;
        if n == 0 {
            return Ok(None);
        }
        buf.extend_from_slice(&chunk[..n]);
    }
    let text = String::from_utf8_lossy(&buf);
    let mut lines = text.split("\r\n");
    let mut first = lines.next().unwrap_or("").split_whitespace();
    let (Some(method), Some(path)) = (first.next(), first.next()) else {
        return Ok(None);
    };
    let headers = lines
        .take_while(|l| !l.is_empty())
        .filter_map(|l| l.split_once(':'))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect();
    Ok(Some(Request {
        method: method.to_string(),
        path: path.to_string(),
        headers,
    }))
}

fn respond(stream: &mut TcpStream, status: &str, body: &serde_json::Value) -> std::io::Result<()> {
    let body = serde_json::to_vec_pretty(body).expect("json body");
    write!(
        stream,
        "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nAccess-Control-Allow-Origin: *\r\nConnection: close\r\n\r\n",
        body.len()
    )?;
    stream.write_all(&body)?;
    stream.flush()
}

fn session_config_json(shared: &Shared) -> serde_json::Value {
    let cfg = &shared.experiment.config;
    json!({
        "schema_version": cfg.schema_version,
        "label": cfg.label,
        "tick_hz": cfg.tick_hz,
        "scaling": cfg.scaling,
        "alignment": cfg.alignment,
        "channel": cfg.channel,
        "feedback_channel": cfg.feedback_channel.clone().unwrap_or_else(|| cfg.channel.clone()),
        "task": shared.experiment.task,
        "wire": { "version": WIRE_VERSION, "frame_len": FRAME_LEN },
        "websocket_path": WS_PATH,
        "input": "telecommand delta field carries the unscaled master displacement in meters",
    })
}

fn handle_connection(mut stream: TcpStream, shared: &Arc<Shared>) -> Result<(), BridgeError> {
    stream.set_nonblocking(false)?;
    let Some(req) = read_request(&mut stream)? else {
        return Ok(());
    };
    if req.method != "GET" {
        respond(&mut stream, "405 Method Not Allowed", &json!({"error": "only GET is supported"}))?;
        return Ok(());
    }
    let path = req.path.split('?').next().unwrap_or("");
    if path == "/session/config" {
        respond(&mut stream, "200 OK", &session_config_json(shared))?;
        return Ok(());
    }
    if let Some(id) = path
        .strip_prefix("/session/")
        .and_then(|rest| rest.strip_suffix("/metrics"))
    {
        let summary = shared.sessions.lock().expect("sessions lock").get(id).cloned();
        match summary {
            Some(s) => respond(&mut stream, "200 OK", &serde_json::to_value(s).expect("summary json"))?,
            None => respond(&mut stream, "404 Not Found", &json!({"error": format!("no session {id:?}")}))?,
        }
        return Ok(());
    }
    if path == WS_PATH {
        let is_upgrade = req
            .header("upgrade")
            .is_some_and(|v| v.eq_ignore_ascii_case("websocket"));
        let Some(key) = req.header("sec-websocket-key").filter(|_| is_upgrade) else {
            respond(&mut stream, "400 Bad Request", &json!({"error": "web-socket upgrade required"}))?;
            return Ok(());
        };
        if shared
            .active
            .compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst)
            .is_err()
        {
            respond(&mut stream, "409 Conflict", &json!({"error": "an operator session is already active"}))?;
            return Ok(());
        }
        let accept = derive_accept_key(key.as_bytes());
        write!(
            stream,
            "HTTP/1.1 101 Switching Protocols\r\nUpgrade: websocket\r\nConnection: Upgrade\r\nSec-WebSocket-Accept: {accept}\r\n\r\n"
        )?;
        stream.flush()?;
        start_session(stream, Arc::clone(shared));
        return Ok(());
    }
    respond(&mut stream, "404 Not Found", &json!({"error": format!("no route for {path}")}))?;
    Ok(())
}

fn start_session(stream: TcpStream, shared: Arc<Shared>) {
    let n = shared.next_session.fetch_add(1, Ordering::SeqCst);
    let session_id = format!("s{n}");
    let (in_tx, in_rx) = mpsc::channel::<Inbound>();
    let (out_tx, out_rx) = mpsc::channel::<Outbound>();
    let ended = Arc::new(AtomicBool::new(false));

    let net = {
        let shared = Arc::clone(&shared);
        let ended = Arc::clone(&ended);
        thread::spawn(move || network_loop(stream, in_tx, out_rx, &shared, &ended))
    };
    let ticker = {
        let shared = Arc::clone(&shared);
        thread::spawn(move || {
            if let Err(e) = tick_loop(&session_id, &shared, in_rx, out_tx) {
                log::error!("session {session_id}: {e}");
            }
            ended.store(true, Ordering::SeqCst);
            shared.active.store(false, Ordering::SeqCst);
        })
    };
    let mut workers = shared.workers.lock().expect("workers lock");
    workers.retain(|h| !h.is_finished());
    workers.push(net);
    workers.push(ticker);
}

fn reject(ws: &mut WebSocket<TcpStream>, in_tx: &Sender<Inbound>, reason: String, field: &str) {
    let msg = json!({"type": "rejected", "reason": reason, "field": field}).to_string();
    let _ = ws.send(tungstenite::Message::text(msg));
    let _ = in_tx.send(Inbound::Rejected(reason));
}

fn network_loop(
    stream: TcpStream,
    in_tx: Sender<Inbound>,
    out_rx: Receiver<Outbound>,
    shared: &Shared,
    ended: &AtomicBool,
) {
    if stream.set_read_timeout(Some(Duration::from_millis(2))).is_err() {
        let _ = in_tx.send(Inbound::Disconnected);
        return;
    }
    let _ = stream.set_nodelay(true);
    let mut ws = WebSocket::from_raw_socket(stream, Role::Server, None);
    loop {
        if shared.stop.load(Ordering::SeqCst) || ended.load(Ordering::SeqCst) {
            let _ = ws.close(None);
            let _ = ws.flush();
            break;
        }
        match ws.read() {
            Ok(tungstenite::Message::Binary(bytes)) => match deserialize(&bytes) {
                Ok(Message::Telecommand(t)) => {
                    let _ = in_tx.send(Inbound::Command(t));
                }
                Ok(Message::Feedback(_)) => reject(
                    &mut ws,
                    &in_tx,
                    "feedback frames are server-to-client only".into(),
                    "magic",
                ),
                Err(e) => {
                    let field = e.field();
                    reject(&mut ws, &in_tx, e.to_string(), field)
                }
            },
            Ok(tungstenite::Message::Text(text)) => {
                match serde_json::from_str::<ClientControl>(text.as_str()) {
                    Ok(c) => {
                        let _ = in_tx.send(Inbound::Control(c));
                    }
                    Err(e) => reject(&mut ws, &in_tx, format!("control message: {e}"), "text"),
                }
            }
            Ok(tungstenite::Message::Close(_)) => break,
            Ok(_) => {}
            Err(tungstenite::Error::Io(e))
                if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(e) => {
                log::debug!("web socket closed: {e}");
                break;
            }
        }
        let mut failed = false;
        for out in out_rx.try_iter() {
            let msg = match out {
                Outbound::Binary(b) => tungstenite::Message::binary(b),
                Outbound::Text(t) => tungstenite::Message::text(t),
            };
            if ws.write(msg).is_err() {
                failed = true;
                break;
            }
        }
        if failed || matches!(ws.flush(), Err(e) if !is_would_block(&e)) {
            break;
        }
    }
    let _ = in_tx.send(Inbound::Disconnected);
}

fn is_would_block(e: &tungstenite::Error) -> bool {
    matches!(e, tungstenite::Error::Io(io) if io.kind() == ErrorKind::WouldBlock)
}

fn tick_loop(
    session_id: &str,
    shared: &Shared,
    in_rx: Receiver<Inbound>,
    out_tx: Sender<Outbound>,
) -> Result<(), BridgeError> {
    let exp = &shared.experiment;
    let cfg = &exp.config;
    let opts = &shared.options;
    let align = cfg.alignment();
    let dt = 1.0 / cfg.tick_hz;
    let log_path = opts.log_dir.join(format!("{session_id}.tlog"));

    let mut controller = MasterController::new(
        cfg.scaling,
        align,
        ControllerOptions {
            tick_hz: cfg.tick_hz,
            smoothing_alpha: cfg.smoothing_alpha,
            stream_orientation_while_clutched: cfg.stream_orientation_while_clutched,
        },
    )
    .map_err(|e| HarnessError::Config(e.to_string()))?;
    let cmd_cfg = cfg.channel.clone();
    let fb_cfg = cfg.feedback_channel.clone().unwrap_or_else(|| cfg.channel.clone());
    let mut cmd_channel: SimChannel<Telecommand> =
        SimChannel::new(cmd_cfg).map_err(|e| HarnessError::Config(e.to_string()))?;
    let mut fb_channel: SimChannel<FeedbackMsg> =
        SimChannel::new(fb_cfg).map_err(|e| HarnessError::Config(e.to_string()))?;
    let mut follower = FollowerState::new(Pose::from_position(exp.task.start()), align)
        .with_rates(cfg.follower_max_linear_rate, cfg.follower_max_angular_rate);
    let mut metrics = MetricsBuilder::new(exp.task.clone(), &cfg.label, cfg.tick_hz);
    let mut writer = LogWriter::create(&log_path)?;
    writer.append(&LogRecord::Meta(exp.meta()))?;

    let mut summary = SessionSummary {
        session_id: session_id.to_string(),
        state: SessionState::Active,
        ticks: 0,
        metrics: metrics.metrics(),
        log: log_path.clone(),
        rejected_frames: 0,
    };
    let publish = |s: &SessionSummary| {
        shared
            .sessions
            .lock()
            .expect("sessions lock")
            .insert(s.session_id.clone(), s.clone());
    };
    publish(&summary);
    let _ = out_tx.send(Outbound::Text(
        json!({"type": "session", "session_id": session_id, "tick_hz": cfg.tick_hz}).to_string(),
    ));

    let mut master = Pose::identity();
    controller.anchor(master);
    let mut clutched = false;
    let mut gripper = 0.0;
    let mut announced_completion = false;
    let start = Instant::now();
    let mut tick = 0u64;
    'session: loop {
        let due = start + Duration::from_secs_f64(tick as f64 * dt);
        let now = Instant::now();
        if due > now {
            thread::sleep(due - now);
        }
        if shared.stop.load(Ordering::SeqCst) {
            break;
        }

        let mut seq_this_tick = None;
        for inbound in in_rx.try_iter() {
            match inbound {
                Inbound::Command(t) => {
                    master.position += t.delta_p_scaled;
                    master.orientation = t.orientation;
                    clutched = t.clutched;
                    gripper = t.gripper;
                    seq_this_tick = Some(t.seq);
                }
                Inbound::Control(ClientControl::SetScaling { gamma_c, gamma_v }) => {
                    let scaling = ScalingConfig { gamma_c, gamma_v };
                    match controller.set_scaling(scaling) {
                        Ok(()) => {
                            writer.append(&LogRecord::Event {
                                tick,
                                kind: EventKind::ConfigChange,
                                detail: format!("scaling {}", scaling.label()),
                            })?;
                            let _ = out_tx.send(Outbound::Text(
                                json!({"type": "config", "scaling": scaling, "label": scaling.label()})
                                    .to_string(),
                            ));
                        }
                        Err(e) => {
                            summary.rejected_frames += 1;
                            writer.append(&LogRecord::Event {
                                tick,
                                kind: EventKind::Note,
                                detail: format!("rejected set_scaling: {e}"),
                            })?;
                            let _ = out_tx.send(Outbound::Text(
                                json!({"type": "rejected", "reason": e.to_string(), "field": "scaling"})
                                    .to_string(),
                            ));
                        }
                    }
                }
                Inbound::Control(ClientControl::Ping) => {
                    let _ = out_tx.send(Outbound::Text(json!({"type": "pong", "tick": tick}).to_string()));
                }
                Inbound::Rejected(reason) => {
                    summary.rejected_frames += 1;
                    writer.append(&LogRecord::Event {
                        tick,
                        kind: EventKind::Note,
                        detail: format!("rejected frame: {reason}"),
                    })?;
                }
                Inbound::Disconnected => break 'session,
            }
        }

        let cmd = match controller.step(master, tick, clutched, gripper) {
            Ok(c) => c,
            Err(e) => {
                writer.append(&LogRecord::Event {
                    tick,
                    kind: EventKind::Fault,
                    detail: e.to_string(),
                })?;
                break;
            }
        };
        cmd_channel
            .send(cmd, tick)
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        for c in cmd_channel.poll(tick) {
            if let Err(e) = follower.apply_telecommand(&c) {
                writer.append(&LogRecord::Event {
                    tick,
                    kind: EventKind::Fault,
                    detail: e.to_string(),
                })?;
                break 'session;
            }
        }
        follower.regulate(dt);

        let record = TrajectoryRecord {
            tick,
            master_pose: master,
            follower_target: follower.target_pose,
            follower_actual: follower.actual_pose,
            seq: seq_this_tick,
            clutched,
            gamma: controller.last_gamma(),
        };
        writer.append(&LogRecord::Trajectory(record))?;
        if let Some(done) = metrics.push(&record) {
            if !announced_completion {
                announced_completion = true;
                writer.append(&LogRecord::Event {
                    tick: done,
                    kind: EventKind::Completed,
                    detail: exp.task.id.clone(),
                })?;
                let _ = out_tx.send(Outbound::Text(
                    json!({"type": "completed", "tick": done, "metrics": metrics.metrics()}).to_string(),
                ));
            }
        }

        let fb = FeedbackMsg {
            seq: tick,
            send_tick: tick,
            follower_pose: follower.actual_pose,
            frame_id: tick,
        };
        fb_channel
            .send(fb, tick)
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        for delivered in fb_channel.poll(tick) {
            if delivered.seq % opts.feedback_every_ticks.max(1) == 0 {
                let _ = out_tx.send(Outbound::Binary(serialize(&Message::Feedback(delivered))));
            }
        }
        if opts.status_every_ticks > 0 && tick % opts.status_every_ticks == 0 {
            let _ = out_tx.send(Outbound::Text(
                json!({
                    "type": "status",
                    "tick": tick,
                    "effective_gamma": controller.last_gamma(),
                    "scaling": controller.scaling().label(),
                    "clutched": clutched,
                    "dropped": follower.dropped,
                })
                .to_string(),
            ));
            summary.ticks = tick + 1;
            summary.metrics = metrics.metrics();
            publish(&summary);
        }
        tick += 1;
    }

    writer.finish()?;
    summary.ticks = tick;
    summary.metrics = metrics.metrics();
    summary.state = SessionState::Finished;
    publish(&summary);
    Ok(())
}
