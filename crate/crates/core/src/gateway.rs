//! Relays the frame bus to browsers over a WebSocket at `/ws`.
//!
//! One bus thread holds a client session: it picks up the newest frame at
//! most `target_fps_cap` times per second, encodes it as 8-bit sRGB and
//! stores it in a shared latest-frame cell. Each viewer task sends whatever
//! is in the cell when its previous send finishes, so a viewer never has
//! more than one frame pending. A viewer whose send stays blocked while
//! `max_superseded` newer frames arrive is dropped.
//!
//! Binary messages are [`WebFramePacket`]s. Text messages are the wire JSON
//! schemas (telemetry and error) plus `{"type":"status", ...}`. Camera and
//! object pose messages from viewers are validated and forwarded to the
//! server byte for byte.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::Router;
use futures::{SinkExt, StreamExt};
use serde::Serialize;
use tokio::sync::{broadcast, watch};

use crate::client::{ClientError, ClientSession, ConnectOptions, MessageSender};
use crate::export::{depth_preview, encode_png, tonemap_to_rgba8, DEFAULT_DEPTH_VIS_MAX};
use crate::framebus::{FrameSnapshot, Wait};
use crate::wire::{self, ControlMessage, ErrorCode, ErrorMsg};

pub const DEFAULT_GATEWAY_PORT: u16 = 8080;
pub const PACKET_HEADER_LEN: usize = 17;
/// Set in the encoding byte when an 8-bit depth preview trails the color.
pub const DEPTH_PREVIEW_FLAG: u8 = 0x80;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WebEncoding {
    Rgba8Raw,
    Png,
}

impl WebEncoding {
    pub fn code(self) -> u8 {
        match self {
            WebEncoding::Rgba8Raw => 0,
            WebEncoding::Png => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(WebEncoding::Rgba8Raw),
            1 => Some(WebEncoding::Png),
            _ => None,
        }
    }
}

impl std::str::FromStr for WebEncoding {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "rgba8_raw" | "raw" => Ok(WebEncoding::Rgba8Raw),
            "png" => Ok(WebEncoding::Png),
            other => Err(format!("unknown encoding {other:?}; expected rgba8_raw or png")),
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PacketError {
    #[error("packet shorter than its {PACKET_HEADER_LEN}-byte header")]
    Truncated,
    #[error("unknown encoding byte {0:#04x}")]
    UnknownEncoding(u8),
    #[error("payload is {got} bytes, expected {expected}")]
    BadLength { expected: usize, got: usize },
}

/// One frame as sent to browsers. Layout, little-endian:
/// `[u32 frame_index][u64 timestamp_ns][u16 width][u16 height][u8 encoding][payload]`.
/// With [`DEPTH_PREVIEW_FLAG`] set, the last `width * height` payload bytes
/// are the depth preview and the color payload precedes them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WebFramePacket {
    /// Low 32 bits of the bus frame index.
    pub frame_index: u32,
    pub timestamp_ns: u64,
    pub width: u16,
    pub height: u16,
    pub encoding: WebEncoding,
    pub color: Vec<u8>,
    pub depth_preview: Option<Vec<u8>>,
}

impl WebFramePacket {
    pub fn encode(&self) -> Vec<u8> {
        let depth_len = self.depth_preview.as_ref().map_or(0, Vec::len);
        let mut out = Vec::with_capacity(PACKET_HEADER_LEN + self.color.len() + depth_len);
        out.extend_from_slice(&self.frame_index.to_le_bytes());
        out.extend_from_slice(&self.timestamp_ns.to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        let flag = if self.depth_preview.is_some() { DEPTH_PREVIEW_FLAG } else { 0 };
        out.push(self.encoding.code() | flag);
        out.extend_from_slice(&self.color);
        if let Some(d) = &self.depth_preview {
            out.extend_from_slice(d);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, PacketError> {
        if bytes.len() < PACKET_HEADER_LEN {
            return Err(PacketError::Truncated);
        }
        let frame_index = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
        let timestamp_ns = u64::from_le_bytes(bytes[4..12].try_into().unwrap());
        let width = u16::from_le_bytes(bytes[12..14].try_into().unwrap());
        let height = u16::from_le_bytes(bytes[14..16].try_into().unwrap());
        let code = bytes[16];
        let encoding = WebEncoding::from_code(code & !DEPTH_PREVIEW_FLAG).ok_or(PacketError::UnknownEncoding(code))?;
        let mut payload = &bytes[PACKET_HEADER_LEN..];
        let pixels = width as usize * height as usize;
        let depth_preview = if code & DEPTH_PREVIEW_FLAG != 0 {
            if payload.len() < pixels {
                return Err(PacketError::BadLength {
                    expected: pixels,
                    got: payload.len(),
                });
            }
            let (color, depth) = payload.split_at(payload.len() - pixels);
            payload = color;
            Some(depth.to_vec())
        } else {
            None
        };
        if encoding == WebEncoding::Rgba8Raw && payload.len() != 4 * pixels {
            return Err(PacketError::BadLength {
                expected: 4 * pixels,
                got: payload.len(),
            });
        }
        Ok(Self {
            frame_index,
            timestamp_ns,
            width,
            height,
            encoding,
            color: payload.to_vec(),
            depth_preview,
        })
    }
}

/// Encodes a bus snapshot for browsers.
pub fn encode_snapshot(snap: &FrameSnapshot, opts: &GatewayConfig) -> Result<WebFramePacket, png::EncodingError> {
    let rgba = tonemap_to_rgba8(&snap.color, opts.background);
    let color = match opts.encoding {
        WebEncoding::Rgba8Raw => rgba.pixels().as_flattened().to_vec(),
        WebEncoding::Png => encode_png(&rgba)?,
    };
    let depth_preview = opts
        .depth_preview
        .then(|| depth_preview(&snap.depth, opts.depth_vis_max).into_pixels());
    Ok(WebFramePacket {
        frame_index: snap.frame_index as u32,
        timestamp_ns: snap.timestamp_ns,
        width: snap.color.width() as u16,
        height: snap.color.height() as u16,
        encoding: opts.encoding,
        color,
        depth_preview,
    })
}

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub listen: SocketAddr,
    pub server: ConnectOptions,
    pub target_fps_cap: f64,
    pub encoding: WebEncoding,
    pub depth_preview: bool,
    pub depth_vis_max: f32,
    pub background: [f32; 3],
    /// Object ids advertised to viewers in status messages.
    pub objects: Vec<String>,
    /// Frames that may supersede a blocked send before the viewer is dropped.
    pub max_superseded: u32,
    pub retry_initial: Duration,
    pub retry_max: Duration,
}

impl GatewayConfig {
    pub fn new(listen: SocketAddr, server: ConnectOptions) -> Self {
        Self {
            listen,
            server,
            target_fps_cap: 30.0,
            encoding: WebEncoding::Png,
            depth_preview: false,
            depth_vis_max: DEFAULT_DEPTH_VIS_MAX,
            background: [0.0; 3],
            objects: vec![crate::server::DEMO_OBJECT_ID.to_owned()],
            max_superseded: 3,
            retry_initial: Duration::from_millis(200),
            retry_max: Duration::from_secs(5),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("bad gateway configuration: {0}")]
    Config(String),
    #[error("cannot listen on {addr}: {source}")]
    Bind { addr: SocketAddr, source: std::io::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct StatusMsg {
    #[serde(rename = "type")]
    pub kind: &'static str,
    /// `connecting`, `connected` or `disconnected`.
    pub state: &'static str,
    pub detail: String,
    pub objects: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
}

/// Counters for observing a running gateway.
#[derive(Debug, Default)]
pub struct GatewayStats {
    pub frames_encoded: AtomicU64,
    pub frames_sent: AtomicU64,
    pub viewers_connected: AtomicU64,
    pub viewers_dropped: AtomicU64,
    pub messages_forwarded: AtomicU64,
    pub messages_rejected: AtomicU64,
    pub reconnects: AtomicU64,
}

#[derive(Clone)]
struct AppState {
    frames: watch::Receiver<Option<Arc<Vec<u8>>>>,
    status: watch::Receiver<String>,
    text: broadcast::Sender<String>,
    sender: Arc<Mutex<Option<MessageSender>>>,
    stats: Arc<GatewayStats>,
    shutdown: watch::Receiver<bool>,
    max_superseded: u32,
}

/// A gateway running on background threads.
pub struct GatewayHandle {
    addr: SocketAddr,
    stats: Arc<GatewayStats>,
    stop: Arc<AtomicBool>,
    shutdown: watch::Sender<bool>,
    bus: Option<JoinHandle<()>>,
    web: Option<JoinHandle<()>>,
}

impl GatewayHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stats(&self) -> &GatewayStats {
        &self.stats
    }

    pub fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = self.shutdown.send(true);
        if let Some(h) = self.bus.take() {
            let _ = h.join();
        }
        if let Some(h) = self.web.take() {
            let _ = h.join();
        }
    }

    /// Blocks until the gateway stops (after [`GatewayHandle::shutdown`]
    /// from another thread, or `stop` being set).
    pub fn wait(mut self, stop: &AtomicBool) {
        while !stop.load(Ordering::SeqCst) {
            std::thread::sleep(Duration::from_millis(50));
        }
        self.shutdown();
    }
}

impl Drop for GatewayHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Binds the browser endpoint and starts relaying. Returns once listening.
pub fn serve_web(config: GatewayConfig) -> Result<GatewayHandle, GatewayError> {
    if !(config.target_fps_cap > 0.0) {
        return Err(GatewayError::Config(format!("fps cap {} must be positive", config.target_fps_cap)));
    }
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .thread_name("splatbus-gateway")
        .enable_all()
        .build()?;
    let listener = runtime
        .block_on(tokio::net::TcpListener::bind(config.listen))
        .map_err(|source| GatewayError::Bind {
            addr: config.listen,
            source,
        })?;
    let addr = listener.local_addr()?;

    let (frame_tx, frame_rx) = watch::channel(None);
    let initial = status_json(&config, "connecting", "waiting for the server", None);
    let (status_tx, status_rx) = watch::channel(initial);
    let (text_tx, _) = broadcast::channel(256);
    let (shutdown_tx, shutdown_rx) = watch::channel(false);
    let stats = Arc::new(GatewayStats::default());
    let sender = Arc::new(Mutex::new(None));
    let stop = Arc::new(AtomicBool::new(false));

    let state = AppState {
        frames: frame_rx,
        status: status_rx,
        text: text_tx.clone(),
        sender: sender.clone(),
        stats: stats.clone(),
        shutdown: shutdown_rx.clone(),
        max_superseded: config.max_superseded,
    };
    let app = Router::new().route("/ws", get(ws_handler)).with_state(state);
    let mut shutdown_wait = shutdown_rx;
    let web = std::thread::Builder::new()
        .name("splatbus-gateway-web".into())
        .spawn(move || {
            runtime.block_on(async move {
                let graceful = async move {
                    let _ = shutdown_wait.wait_for(|s| *s).await;
                };
                if let Err(e) = axum::serve(listener, app).with_graceful_shutdown(graceful).await {
                    log::error!("gateway endpoint failed: {e}");
                }
            });
            runtime.shutdown_timeout(Duration::from_secs(1));
        })?;

    let bus_stop = stop.clone();
    let bus_stats = stats.clone();
    let bus = std::thread::Builder::new()
        .name("splatbus-gateway-bus".into())
        .spawn(move || {
            run_bus(&config, &bus_stop, &frame_tx, &status_tx, &text_tx, &sender, &bus_stats);
        })?;
    log::info!("gateway listening on ws://{addr}/ws");
    Ok(GatewayHandle {
        addr,
        stats,
        stop,
        shutdown: shutdown_tx,
        bus: Some(bus),
        web: Some(web),
    })
}

fn status_json(config: &GatewayConfig, state: &'static str, detail: &str, size: Option<(u32, u32)>) -> String {
    serde_json::to_string(&StatusMsg {
        kind: "status",
        state,
        detail: detail.to_owned(),
        objects: config.objects.clone(),
        width: size.map(|s| s.0),
        height: size.map(|s| s.1),
    })
    .expect("status serializes")
}

fn run_bus(
    config: &GatewayConfig,
    stop: &AtomicBool,
    frames: &watch::Sender<Option<Arc<Vec<u8>>>>,
    status: &watch::Sender<String>,
    text: &broadcast::Sender<String>,
    sender: &Mutex<Option<MessageSender>>,
    stats: &GatewayStats,
) {
    let mut backoff = config.retry_initial;
    let interval = Duration::from_secs_f64(1.0 / config.target_fps_cap);
    while !stop.load(Ordering::SeqCst) {
        let mut session = match ClientSession::connect(&config.server) {
            Ok(s) => s,
            Err(e) => {
                log::warn!("gateway cannot reach the server: {e}; retrying in {backoff:?}");
                let _ = status.send(status_json(
                    config,
                    "disconnected",
                    &format!("{e}; retrying in {} ms", backoff.as_millis()),
                    None,
                ));
                sleep_unless(stop, backoff);
                backoff = (backoff * 2).min(config.retry_max);
                continue;
            }
        };
        backoff = config.retry_initial;
        stats.reconnects.fetch_add(1, Ordering::Relaxed);
        let size = (session.init().width, session.init().height);
        *sender.lock().unwrap() = Some(session.sender());
        let _ = status.send(status_json(config, "connected", "relaying frames", Some(size)));

        let mut next_slot = Instant::now();
        let reason = loop {
            if stop.load(Ordering::SeqCst) {
                break "gateway stopping".to_owned();
            }
            while let Some(msg) = session.inbox().try_recv() {
                if let Ok(json) = wire::serialize_message(&msg) {
                    let _ = text.send(json);
                }
            }
            if !session.inbox().is_connected() {
                break "server closed the message channel".to_owned();
            }
            let now = Instant::now();
            if now < next_slot {
                std::thread::sleep(next_slot - now);
            }
            match session.grab_frame(Wait::BlockUntilNewTimeout(Duration::from_millis(100))) {
                Ok(Some(snap)) => {
                    next_slot = Instant::now() + interval;
                    match encode_snapshot(&snap, config) {
                        Ok(packet) => {
                            stats.frames_encoded.fetch_add(1, Ordering::Relaxed);
                            let _ = frames.send(Some(Arc::new(packet.encode())));
                        }
                        Err(e) => log::error!("cannot encode frame: {e}"),
                    }
                }
                Ok(None) => {}
                Err(ClientError::Disconnected) => break "frame writer went away".to_owned(),
                Err(e) => break e.to_string(),
            }
        };
        *sender.lock().unwrap() = None;
        log::info!("gateway lost the server: {reason}");
        let _ = status.send(status_json(config, "disconnected", &reason, None));
        drop(session);
        sleep_unless(stop, backoff);
    }
}

fn sleep_unless(stop: &AtomicBool, total: Duration) {
    let end = Instant::now() + total;
    while !stop.load(Ordering::SeqCst) {
        let now = Instant::now();
        if now >= end {
            break;
        }
        std::thread::sleep((end - now).min(Duration::from_millis(50)));
    }
}

async fn ws_handler(ws: WebSocketUpgrade, State(state): State<AppState>) -> impl IntoResponse {
    ws.on_upgrade(move |socket| viewer(socket, state))
}

/// Why a send to a viewer did not complete.
enum SendOutcome {
    Sent,
    Failed,
    /// Too many frames superseded the one being sent.
    Stalled,
}

/// Sends `msg` while counting frames that arrive meanwhile.
async fn send_counting<S>(
    sink: &mut S,
    msg: Message,
    frames: &mut watch::Receiver<Option<Arc<Vec<u8>>>>,
    superseded: &mut u32,
    cap: u32,
) -> SendOutcome
where
    S: futures::Sink<Message> + Unpin,
{
    let send = sink.send(msg);
    tokio::pin!(send);
    loop {
        tokio::select! {
            r = &mut send => return if r.is_ok() { SendOutcome::Sent } else { SendOutcome::Failed },
            changed = frames.changed() => {
                if changed.is_err() {
                    return SendOutcome::Failed;
                }
                *superseded += 1;
                if *superseded >= cap {
                    return SendOutcome::Stalled;
                }
            }
        }
    }
}

async fn viewer(socket: WebSocket, mut state: AppState) {
    state.stats.viewers_connected.fetch_add(1, Ordering::Relaxed);
    let (mut sink, mut stream) = socket.split();
    let mut text_rx = state.text.subscribe();
    let cap = state.max_superseded;
    let mut pending_frame = state.frames.borrow_and_update().clone();
    let mut status_pending = true;
    state.status.mark_unchanged();
    let sender = state.sender.clone();
    let stats = state.stats.clone();
    let mut shutdown = state.shutdown.clone();

    let outcome = loop {
        // Pending outbound work first, status before frames.
        let mut superseded = 0;
        if status_pending {
            status_pending = false;
            let json = state.status.borrow_and_update().clone();
            match send_counting(&mut sink, Message::Text(json.into()), &mut state.frames, &mut superseded, cap).await {
                SendOutcome::Sent => {}
                other => break other,
            }
            if superseded > 0 {
                pending_frame = state.frames.borrow_and_update().clone();
            }
        }
        if let Some(bytes) = pending_frame.take() {
            let msg = Message::Binary(bytes.as_ref().clone().into());
            match send_counting(&mut sink, msg, &mut state.frames, &mut superseded, cap).await {
                SendOutcome::Sent => {
                    state.stats.frames_sent.fetch_add(1, Ordering::Relaxed);
                }
                other => break other,
            }
            if superseded > 0 {
                pending_frame = state.frames.borrow_and_update().clone();
                continue;
            }
        }

        tokio::select! {
            changed = state.frames.changed() => {
                if changed.is_err() {
                    break SendOutcome::Failed;
                }
                pending_frame = state.frames.borrow_and_update().clone();
            }
            changed = state.status.changed() => {
                if changed.is_err() {
                    break SendOutcome::Failed;
                }
                status_pending = true;
            }
            text = text_rx.recv() => match text {
                Ok(json) => {
                    let mut superseded = 0;
                    match send_counting(&mut sink, Message::Text(json.into()), &mut state.frames, &mut superseded, cap).await {
                        SendOutcome::Sent => {}
                        other => break other,
                    }
                    if superseded > 0 {
                        pending_frame = state.frames.borrow_and_update().clone();
                    }
                }
                Err(broadcast::error::RecvError::Lagged(n)) => log::debug!("viewer skipped {n} text messages"),
                Err(broadcast::error::RecvError::Closed) => break SendOutcome::Failed,
            },
            incoming = stream.next() => match incoming {
                Some(Ok(Message::Text(text))) => {
                    if let Some(reply) = forward(&sender, &stats, text.as_str()) {
                        let mut superseded = 0;
                        if let SendOutcome::Stalled | SendOutcome::Failed =
                            send_counting(&mut sink, Message::Text(reply.into()), &mut state.frames, &mut superseded, cap).await
                        {
                            break SendOutcome::Failed;
                        }
                    }
                }
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break SendOutcome::Failed,
                Some(Ok(_)) => {}
            },
            _ = async { let _ = shutdown.wait_for(|s| *s).await; } => {
                let _ = sink.send(Message::Close(None)).await;
                break SendOutcome::Sent;
            }
        }
    };
    if let SendOutcome::Stalled = outcome {
        log::info!("dropping a viewer that stopped reading");
        state.stats.viewers_dropped.fetch_add(1, Ordering::Relaxed);
    }
    state.stats.viewers_connected.fetch_sub(1, Ordering::Relaxed);
}

/// Validates a viewer message and forwards it verbatim. Returns a JSON
/// error to send back when the message is refused.
fn forward(sender: &Mutex<Option<MessageSender>>, stats: &GatewayStats, text: &str) -> Option<String> {
    let refuse = |code: ErrorCode, detail: String| {
        stats.messages_rejected.fetch_add(1, Ordering::Relaxed);
        Some(
            wire::serialize_message(&ControlMessage::Error(ErrorMsg { code, detail }))
                .expect("error message serializes"),
        )
    };
    match wire::parse_message(text.as_bytes()) {
        Ok(ControlMessage::CameraPose(_) | ControlMessage::ObjectPose(_)) => {
            let sender = sender.lock().unwrap().clone();
            match sender {
                Some(s) if s.send_raw(text.as_bytes()).is_ok() => {
                    stats.messages_forwarded.fetch_add(1, Ordering::Relaxed);
                    None
                }
                _ => refuse(ErrorCode::Unsupported, "server is not connected".into()),
            }
        }
        Ok(other) => refuse(
            ErrorCode::Unsupported,
            format!("viewers may send camera_pose or object_pose, not {}", other.type_name()),
        ),
        Err(e) => refuse(e.error_code().unwrap_or(ErrorCode::Malformed), e.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn packet(encoding: WebEncoding, depth: bool) -> WebFramePacket {
        WebFramePacket {
            frame_index: 7,
            timestamp_ns: 0x0102_0304_0506_0708,
            width: 2,
            height: 1,
            encoding,
            color: vec![1, 2, 3, 4, 5, 6, 7, 8],
            depth_preview: depth.then(|| vec![9, 10]),
        }
    }

    #[test]
    fn header_layout_is_little_endian() {
        let bytes = packet(WebEncoding::Rgba8Raw, false).encode();
        assert_eq!(&bytes[..4], &[7, 0, 0, 0]);
        assert_eq!(&bytes[4..12], &[8, 7, 6, 5, 4, 3, 2, 1]);
        assert_eq!(&bytes[12..17], &[2, 0, 1, 0, 0]);
        assert_eq!(bytes.len(), PACKET_HEADER_LEN + 8);
    }

    #[test]
    fn packets_round_trip() {
        for enc in [WebEncoding::Rgba8Raw, WebEncoding::Png] {
            for depth in [false, true] {
                let p = packet(enc, depth);
                assert_eq!(WebFramePacket::decode(&p.encode()).unwrap(), p);
            }
        }
        let bytes = packet(WebEncoding::Rgba8Raw, true).encode();
        assert_eq!(bytes[16], DEPTH_PREVIEW_FLAG);
    }

    #[test]
    fn bad_packets_are_errors() {
        assert_eq!(WebFramePacket::decode(&[0; 5]), Err(PacketError::Truncated));
        let mut bytes = packet(WebEncoding::Rgba8Raw, false).encode();
        bytes.pop();
        assert!(matches!(WebFramePacket::decode(&bytes), Err(PacketError::BadLength { .. })));
        bytes[16] = 5;
        assert_eq!(WebFramePacket::decode(&bytes), Err(PacketError::UnknownEncoding(5)));
    }
}
