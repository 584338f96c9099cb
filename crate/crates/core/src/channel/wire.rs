//! Fixed-layout binary encoding shared by the simulated channel, the TCP
//! transport, the web-socket bridge and the session log.
//!
//! ```text
//! offset  size  field
//!      0     1  magic      0x54 'T' telecommand | 0x46 'F' feedback
//!      1     1  version    currently 1
//!      2     8  seq        u64 LE
//!     10     8  send_tick  u64 LE
//!     18    24  vec3       3 x f64 LE (telecommand: scaled delta, feedback: position)
//!     42    32  quat       4 x f64 LE, (w, x, y, z)
//!     74     8  extra      telecommand: gripper f64 LE, feedback: frame_id u64 LE
//!     82     1  flags      bit 0 = clutched (telecommand only)
//!     83     4  crc32      IEEE CRC-32 of bytes 0..83, LE
//! ```

use nalgebra::Vector3;
use thiserror::Error;

use crate::controller::Telecommand;
use crate::kinematics::{quaternion_wxyz, unit_quaternion_from_wxyz, Pose};

pub const MAGIC_TELECOMMAND: u8 = 0x54;
pub const MAGIC_FEEDBACK: u8 = 0x46;
pub const WIRE_VERSION: u8 = 1;
/// Encoded size of either message kind.
pub const FRAME_LEN: usize = 2 + 8 + 8 + 24 + 32 + 8 + 1 + 4;

const FLAG_CLUTCHED: u8 = 0x01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WireError {
    #[error("length: expected {expected} bytes, got {got}")]
    Length { expected: usize, got: usize },
    #[error("magic: unknown message kind byte {0:#04x}")]
    BadMagic(u8),
    #[error("version: unsupported wire version {0}")]
    BadVersion(u8),
    #[error("crc32: stored {stored:#010x}, computed {computed:#010x}")]
    Crc { stored: u32, computed: u32 },
    #[error("{field}: {msg}")]
    Field { field: &'static str, msg: String },
    #[error("flags: reserved bits set ({0:#04x})")]
    Flags(u8),
}

impl WireError {
    /// Name of the offending field, for error reporting.
    pub fn field(&self) -> &'static str {
        match self {
            WireError::Length { .. } => "length",
            WireError::BadMagic(_) => "magic",
            WireError::BadVersion(_) => "version",
            WireError::Crc { .. } => "crc32",
            WireError::Field { field, .. } => field,
            WireError::Flags(_) => "flags",
        }
    }
}

/// Follower state sent back to the operator. `frame_id` stands in for the
/// camera frame that would accompany it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeedbackMsg {
    pub seq: u64,
    pub send_tick: u64,
    pub follower_pose: Pose,
    pub frame_id: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Message {
    Telecommand(Telecommand),
    Feedback(FeedbackMsg),
}

impl Message {
    pub fn seq(&self) -> u64 {
        match self {
            Message::Telecommand(t) => t.seq,
            Message::Feedback(f) => f.seq,
        }
    }

    pub fn send_tick(&self) -> u64 {
        match self {
            Message::Telecommand(t) => t.send_tick,
            Message::Feedback(f) => f.send_tick,
        }
    }
}

impl From<Telecommand> for Message {
    fn from(t: Telecommand) -> Self {
        Message::Telecommand(t)
    }
}

impl From<FeedbackMsg> for Message {
    fn from(f: FeedbackMsg) -> Self {
        Message::Feedback(f)
    }
}

pub(crate) struct Writer<'a> {
    buf: &'a mut Vec<u8>,
}

impl<'a> Writer<'a> {
    pub(crate) fn new(buf: &'a mut Vec<u8>) -> Self {
        Self { buf }
    }
    pub(crate) fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    pub(crate) fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub(crate) fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub(crate) fn vec3(&mut self, v: &Vector3<f64>) {
        for c in v.iter() {
            self.f64(*c);
        }
    }
    pub(crate) fn pose(&mut self, p: &Pose) {
        write_pose_parts(self, &p.position, p.wxyz());
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let mut out = [0u8; N];
        out.copy_from_slice(&self.buf[self.pos..self.pos + N]);
        self.pos += N;
        out
    }
    pub(crate) fn u8(&mut self) -> u8 {
        self.take::<1>()[0]
    }
    pub(crate) fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take())
    }
    pub(crate) fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.take())
    }
    pub(crate) fn finite(&mut self, field: &'static str) -> Result<f64, WireError> {
        let v = self.f64();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(WireError::Field {
                field,
                msg: "non-finite value".into(),
            })
        }
    }
    pub(crate) fn vec3(&mut self, field: &'static str) -> Result<Vector3<f64>, WireError> {
        Ok(Vector3::new(
            self.finite(field)?,
            self.finite(field)?,
            self.finite(field)?,
        ))
    }
    pub(crate) fn pose(&mut self, field: &'static str) -> Result<Pose, WireError> {
        let position = self.vec3(field)?;
        let wxyz = [self.f64(), self.f64(), self.f64(), self.f64()];
        let orientation = unit_quaternion_from_wxyz(wxyz).map_err(|e| WireError::Field {
            field,
            msg: e.to_string(),
        })?;
        Ok(Pose::new(position, orientation))
    }
    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

fn write_pose_parts(w: &mut Writer<'_>, v: &Vector3<f64>, q: [f64; 4]) {
    w.vec3(v);
    for c in q {
        w.f64(c);
    }
}

/// Appends the encoding of `msg` to `out`.
pub fn encode_into(msg: &Message, out: &mut Vec<u8>) {
    let start = out.len();
    let mut w = Writer { buf: out };
    match msg {
        Message::Telecommand(t) => {
            w.u8(MAGIC_TELECOMMAND);
            w.u8(WIRE_VERSION);
            w.u64(t.seq);
            w.u64(t.send_tick);
            write_pose_parts(&mut w, &t.delta_p_scaled, quaternion_wxyz(&t.orientation));
            w.f64(t.gripper);
            w.u8(if t.clutched { FLAG_CLUTCHED } else { 0 });
        }
        Message::Feedback(f) => {
            w.u8(MAGIC_FEEDBACK);
            w.u8(WIRE_VERSION);
            w.u64(f.seq);
            w.u64(f.send_tick);
            write_pose_parts(&mut w, &f.follower_pose.position, f.follower_pose.wxyz());
            w.u64(f.frame_id);
            w.u8(0);
        }
    }
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
}

pub fn serialize(msg: &Message) -> Vec<u8> {
    let mut out = Vec::with_capacity(FRAME_LEN);
    encode_into(msg, &mut out);
    out
}

pub fn deserialize(bytes: &[u8]) -> Result<Message, WireError> {
    if bytes.len() != FRAME_LEN {
        return Err(WireError::Length {
            expected: FRAME_LEN,
            got: bytes.len(),
        });
    }
    let body = &bytes[..FRAME_LEN - 4];
    let stored = u32::from_le_bytes(bytes[FRAME_LEN - 4..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(WireError::Crc { stored, computed });
    }
    let magic = bytes[0];
    if magic != MAGIC_TELECOMMAND && magic != MAGIC_FEEDBACK {
        return Err(WireError::BadMagic(magic));
    }
    if bytes[1] != WIRE_VERSION {
        return Err(WireError::BadVersion(bytes[1]));
    }

    let mut r = Reader::new(&body[2..]);
    let seq = r.u64();
    let send_tick = r.u64();
    let is_cmd = magic == MAGIC_TELECOMMAND;
    let v = r.vec3(if is_cmd { "delta_p_scaled" } else { "position" })?;
    let wxyz = [r.f64(), r.f64(), r.f64(), r.f64()];
    let orientation = unit_quaternion_from_wxyz(wxyz).map_err(|e| WireError::Field {
        field: "orientation",
        msg: e.to_string(),
    })?;
    if is_cmd {
        let gripper = r.finite("gripper")?;
        let flags = r.u8();
        if flags & !FLAG_CLUTCHED != 0 {
            return Err(WireError::Flags(flags));
        }
        Ok(Message::Telecommand(Telecommand {
            seq,
            send_tick,
            delta_p_scaled: v,
            orientation,
            gripper,
            clutched: flags & FLAG_CLUTCHED != 0,
        }))
    } else {
        let frame_id = r.u64();
        let flags = r.u8();
        if flags != 0 {
            return Err(WireError::Flags(flags));
        }
        Ok(Message::Feedback(FeedbackMsg {
            seq,
            send_tick,
            follower_pose: Pose::new(v, orientation),
            frame_id,
        }))
    }
}
