//! Framing and message schemas for the two control channels.
//!
//! Every message on either channel is an envelope: a 4-byte big-endian
//! unsigned length followed by that many bytes of UTF-8 JSON. The JSON is a
//! single object whose string field `"type"` selects one of the schemas in
//! [`ControlMessage`].

use std::io::{self, Read, Write};

use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::framebus::{ColorFormat, DepthFormat, TransportKind};
use crate::geometry::Convention;

/// Version carried in [`Hello`]; the server rejects anything else.
pub const PROTOCOL_VERSION: u32 = 1;

/// Upper bound on an envelope payload, in bytes.
pub const MAX_PAYLOAD_LEN: usize = 16 * 1024 * 1024;

/// Allowed deviation of a pose quaternion's norm from 1.
pub const QUATERNION_NORM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, thiserror::Error)]
pub enum WireError {
    #[error("payload of {len} bytes exceeds the {MAX_PAYLOAD_LEN}-byte cap")]
    Oversize { len: u64 },
    #[error("incomplete frame: expected {expected} bytes, got {got}")]
    Incomplete { expected: u64, got: u64 },
    #[error("stream closed")]
    Closed,
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("unsupported message type: {0}")]
    Unsupported(String),
    #[error("cannot serialize message: {0}")]
    Serialize(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl WireError {
    /// The code to report to a peer for this failure, if any.
    pub fn error_code(&self) -> Option<ErrorCode> {
        match self {
            WireError::Oversize { .. } => Some(ErrorCode::Oversize),
            WireError::Malformed(_) | WireError::Incomplete { .. } => Some(ErrorCode::Malformed),
            WireError::Unsupported(_) => Some(ErrorCode::Unsupported),
            _ => None,
        }
    }
}

/// One decoded length-prefixed frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub payload: Vec<u8>,
}

impl Envelope {
    pub fn len(&self) -> u32 {
        self.payload.len() as u32
    }

    pub fn is_empty(&self) -> bool {
        self.payload.is_empty()
    }
}

pub fn encode_envelope(payload: &[u8]) -> Result<Vec<u8>, WireError> {
    if payload.len() > MAX_PAYLOAD_LEN {
        return Err(WireError::Oversize {
            len: payload.len() as u64,
        });
    }
    let mut out = Vec::with_capacity(4 + payload.len());
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(payload);
    Ok(out)
}

/// Writes one envelope. The prefix and payload go out in a single write call.
pub fn write_envelope<W: Write>(w: &mut W, payload: &[u8]) -> Result<(), WireError> {
    let framed = encode_envelope(payload)?;
    w.write_all(&framed)?;
    w.flush()?;
    Ok(())
}

/// Reads exactly one envelope, consuming `4 + length` bytes and nothing more.
///
/// End of stream before the first prefix byte is reported as
/// [`WireError::Closed`]; end of stream anywhere later is
/// [`WireError::Incomplete`]. A declared length above the cap yields
/// [`WireError::Oversize`] without reading the payload; the caller must drop
/// the connection since the stream can no longer be resynchronized.
pub fn decode_envelope<R: Read>(stream: &mut R) -> Result<Envelope, WireError> {
    let mut prefix = [0u8; 4];
    let mut filled = 0;
    while filled < prefix.len() {
        match stream.read(&mut prefix[filled..]) {
            Ok(0) if filled == 0 => return Err(WireError::Closed),
            Ok(0) => {
                return Err(WireError::Incomplete {
                    expected: 4,
                    got: filled as u64,
                })
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_be_bytes(prefix) as u64;
    if len > MAX_PAYLOAD_LEN as u64 {
        return Err(WireError::Oversize { len });
    }
    // Grow incrementally so a hostile prefix cannot force a 16 MiB allocation
    // before any payload arrives.
    let mut payload = Vec::with_capacity(len.min(64 * 1024) as usize);
    let got = stream.take(len).read_to_end(&mut payload)? as u64;
    if got < len {
        return Err(WireError::Incomplete { expected: len, got });
    }
    Ok(Envelope { payload })
}

/// Reassembles envelopes from arbitrarily split chunks, for readers that
/// poll with timeouts and must not lose a partially received frame.
#[derive(Debug, Default)]
pub struct EnvelopeAssembler {
    buf: Vec<u8>,
}

impl EnvelopeAssembler {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Bytes held that do not yet form a complete envelope.
    pub fn pending(&self) -> usize {
        self.buf.len()
    }

    /// Pops the next complete payload. An oversize prefix is reported as
    /// soon as it is seen; the stream cannot be resynchronized after that.
    pub fn next_payload(&mut self) -> Result<Option<Vec<u8>>, WireError> {
        if self.buf.len() < 4 {
            return Ok(None);
        }
        let len = u32::from_be_bytes(self.buf[..4].try_into().unwrap()) as usize;
        if len > MAX_PAYLOAD_LEN {
            return Err(WireError::Oversize { len: len as u64 });
        }
        if self.buf.len() < 4 + len {
            return Ok(None);
        }
        let payload = self.buf[4..4 + len].to_vec();
        self.buf.drain(..4 + len);
        Ok(Some(payload))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hello {
    pub protocol_version: u32,
    pub client_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitPacket {
    pub width: u32,
    pub height: u32,
    pub color_format: ColorFormat,
    pub depth_format: DepthFormat,
    pub color_pitch: u32,
    pub depth_pitch: u32,
    pub transport: TransportKind,
    pub attachment_token: String,
    pub frame_region_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraPoseMsg {
    pub position: [f64; 3],
    /// Unit quaternion, `(x, y, z, w)`.
    pub rotation: [f64; 4],
    pub convention: Convention,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fov_y_deg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectPoseMsg {
    pub object_id: String,
    pub position: [f64; 3],
    pub rotation: [f64; 4],
    pub scale: f64,
    pub convention: Convention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryMsg {
    pub series: String,
    /// Seconds since the emitting session started.
    pub t: f64,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    VersionMismatch,
    Malformed,
    Oversize,
    Unsupported,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorMsg {
    pub code: ErrorCode,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ControlMessage {
    Hello(Hello),
    Init(InitPacket),
    CameraPose(CameraPoseMsg),
    ObjectPose(ObjectPoseMsg),
    Telemetry(TelemetryMsg),
    Error(ErrorMsg),
}

const KNOWN_TYPES: [&str; 6] = [
    "hello",
    "init",
    "camera_pose",
    "object_pose",
    "telemetry",
    "error",
];

impl ControlMessage {
    pub fn type_name(&self) -> &'static str {
        match self {
            ControlMessage::Hello(_) => "hello",
            ControlMessage::Init(_) => "init",
            ControlMessage::CameraPose(_) => "camera_pose",
            ControlMessage::ObjectPose(_) => "object_pose",
            ControlMessage::Telemetry(_) => "telemetry",
            ControlMessage::Error(_) => "error",
        }
    }

    /// Checks every schema invariant; the message is otherwise unusable.
    pub fn validate(&self) -> Result<(), String> {
        match self {
            ControlMessage::Hello(h) => {
                if h.protocol_version < 1 {
                    return Err("protocol_version must be >= 1".into());
                }
            }
            ControlMessage::Init(p) => {
                if p.width == 0 || p.height == 0 {
                    return Err("width and height must be positive".into());
                }
                if (p.color_pitch as u64) < p.width as u64 * 16 {
                    return Err("color_pitch smaller than width * 16".into());
                }
                if (p.depth_pitch as u64) < p.width as u64 * 4 {
                    return Err("depth_pitch smaller than width * 4".into());
                }
                base64::engine::general_purpose::STANDARD
                    .decode(&p.attachment_token)
                    .map_err(|e| format!("attachment_token is not base64: {e}"))?;
            }
            ControlMessage::CameraPose(m) => {
                check_vec3("position", &m.position)?;
                check_quaternion(&m.rotation)?;
                if let Some(fov) = m.fov_y_deg {
                    if !(fov.is_finite() && fov > 0.0 && fov < 180.0) {
                        return Err(format!("fov_y_deg {fov} outside (0, 180)"));
                    }
                }
            }
            ControlMessage::ObjectPose(m) => {
                check_vec3("position", &m.position)?;
                check_quaternion(&m.rotation)?;
                if !(m.scale.is_finite() && m.scale > 0.0) {
                    return Err(format!("scale {} must be positive", m.scale));
                }
            }
            ControlMessage::Telemetry(m) => {
                if !(m.t.is_finite() && m.t >= 0.0) {
                    return Err(format!("telemetry time {} must be finite and >= 0", m.t));
                }
                if !m.value.is_finite() {
                    return Err("telemetry value must be finite".into());
                }
            }
            ControlMessage::Error(_) => {}
        }
        Ok(())
    }
}

fn check_vec3(name: &str, v: &[f64; 3]) -> Result<(), String> {
    if v.iter().all(|c| c.is_finite()) {
        Ok(())
    } else {
        Err(format!("{name} has a non-finite component"))
    }
}

fn check_quaternion(q: &[f64; 4]) -> Result<(), String> {
    if !q.iter().all(|c| c.is_finite()) {
        return Err("rotation has a non-finite component".into());
    }
    let norm = q.iter().map(|c| c * c).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > QUATERNION_NORM_TOLERANCE {
        return Err(format!("rotation norm {norm} is not within 1e-4 of 1"));
    }
    Ok(())
}

/// Parses and validates one payload.
pub fn parse_message(payload: &[u8]) -> Result<ControlMessage, WireError> {
    let text =
        std::str::from_utf8(payload).map_err(|e| WireError::Malformed(format!("not UTF-8: {e}")))?;
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| WireError::Malformed(e.to_string()))?;
    let ty = value
        .as_object()
        .ok_or_else(|| WireError::Malformed("payload is not a JSON object".into()))?
        .get("type")
        .and_then(|t| t.as_str())
        .ok_or_else(|| WireError::Malformed("missing string field \"type\"".into()))?;
    if !KNOWN_TYPES.contains(&ty) {
        return Err(WireError::Unsupported(ty.to_owned()));
    }
    let msg: ControlMessage =
        serde_json::from_value(value).map_err(|e| WireError::Malformed(e.to_string()))?;
    msg.validate().map_err(WireError::Malformed)?;
    Ok(msg)
}

pub fn serialize_message(msg: &ControlMessage) -> Result<String, WireError> {
    msg.validate().map_err(WireError::Serialize)?;
    serde_json::to_string(msg).map_err(|e| WireError::Serialize(e.to_string()))
}

/// Serializes and frames a message in one step.
pub fn write_message<W: Write>(w: &mut W, msg: &ControlMessage) -> Result<(), WireError> {
    let text = serialize_message(msg)?;
    write_envelope(w, text.as_bytes())
}

/// Reads one envelope and parses its payload.
pub fn read_message<R: Read>(r: &mut R) -> Result<ControlMessage, WireError> {
    let env = decode_envelope(r)?;
    parse_message(&env.payload)
}
