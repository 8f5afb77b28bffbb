//! Embeddable server runtime.
//!
//! The server owns the frame region and two TCP listeners. The init channel
//! answers a `hello` with the init packet and then stays open so errors can
//! be reported. The message channel carries pose messages from clients and
//! telemetry back to them. Network threads only parse and enqueue; scene
//! state changes happen in [`Server::poll_messages`], called from the render
//! loop, so poses are sampled at frame boundaries.
//!
//! A message connection is reaped when no bytes have moved in either
//! direction for `client_timeout`.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender, SyncSender, TrySendError};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crate::framebus::{
    self, create_region, FrameBusError, FrameDescriptor, FrameWriter, RegionOptions, TransportKind,
};
use crate::geometry::{
    client_pose_to_view, invdepth_to_linear, GeometryError, Pose, ViewState, DEFAULT_FAR_SENTINEL,
    DEFAULT_FOV_Y_DEG,
};
use crate::image::{frame_checksum, ColorImage, DepthImage};
use crate::splatref::{self, GaussianCloud, PlyError, RenderSettings, SplatError};
use crate::wire::{
    self, encode_envelope, parse_message, serialize_message, ControlMessage, EnvelopeAssembler,
    ErrorCode, ErrorMsg, InitPacket, TelemetryMsg, WireError, PROTOCOL_VERSION,
};

pub const DEFAULT_INIT_PORT: u16 = 7420;
pub const DEFAULT_MESSAGE_PORT: u16 = 7421;
pub const DEFAULT_CLIENT_TIMEOUT: Duration = Duration::from_secs(10);
/// Object id the demo binds to the loaded asset.
pub const DEMO_OBJECT_ID: &str = "scene";

/// Telemetry messages buffered per client before further ones are dropped.
const OUTBOX_CAPACITY: usize = 256;
/// How often blocked network threads re-check the stop flag.
const POLL_INTERVAL: Duration = Duration::from_millis(100);

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub width: u32,
    pub height: u32,
    /// Interface both listeners bind to.
    pub host: String,
    /// Port 0 picks an ephemeral port; see [`Server::init_addr`].
    pub init_port: u16,
    pub message_port: u16,
    pub transport: TransportKind,
    pub far_sentinel: f32,
    pub default_fov_y_deg: f64,
    /// Concurrent connections admitted per channel.
    pub max_clients: usize,
    pub asset_path: Option<PathBuf>,
    pub region_name: Option<String>,
    pub stamp_checksums: bool,
    pub client_timeout: Duration,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            width: 800,
            height: 600,
            host: "127.0.0.1".into(),
            init_port: DEFAULT_INIT_PORT,
            message_port: DEFAULT_MESSAGE_PORT,
            transport: TransportKind::SharedMemory,
            far_sentinel: DEFAULT_FAR_SENTINEL,
            default_fov_y_deg: DEFAULT_FOV_Y_DEG,
            max_clients: 8,
            asset_path: None,
            region_name: None,
            stamp_checksums: false,
            client_timeout: DEFAULT_CLIENT_TIMEOUT,
        }
    }
}

impl ServerConfig {
    /// Local config on ephemeral ports, handy for tests and embedding.
    pub fn ephemeral(width: u32, height: u32, transport: TransportKind) -> Self {
        Self {
            width,
            height,
            init_port: 0,
            message_port: 0,
            transport,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ServerError> {
        let bad = |m: String| Err(ServerError::Config(m));
        if self.width == 0 || self.height == 0 {
            return bad(format!("frame size {}x{} must be positive", self.width, self.height));
        }
        if self.init_port != 0 && self.init_port == self.message_port {
            return bad(format!("init and message ports are both {}", self.init_port));
        }
        if self.max_clients == 0 {
            return bad("max_clients must be at least 1".into());
        }
        if !(self.far_sentinel.is_finite() && self.far_sentinel > 0.0) {
            return bad(format!("far sentinel {} must be positive", self.far_sentinel));
        }
        if !(self.default_fov_y_deg > 0.0 && self.default_fov_y_deg < 180.0) {
            return bad(format!("fov {} must be in (0, 180)", self.default_fov_y_deg));
        }
        if self.client_timeout.is_zero() {
            return bad("client timeout must be positive".into());
        }
        Ok(())
    }

    pub fn default_view(&self) -> ViewState {
        ViewState::identity(self.default_fov_y_deg.to_radians(), self.width, self.height)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error("bad configuration: {0}")]
    Config(String),
    #[error("cannot listen on {addr}: {source}")]
    Bind { addr: String, source: io::Error },
    #[error(transparent)]
    Frame(#[from] FrameBusError),
    #[error("cannot load asset {}: {source}", path.display())]
    Asset { path: PathBuf, source: PlyError },
    #[error(transparent)]
    Depth(#[from] GeometryError),
    #[error(transparent)]
    Render(#[from] SplatError),
    #[error(transparent)]
    Wire(#[from] WireError),
}

impl ServerError {
    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            ServerError::Config(_) | ServerError::Bind { .. } => 2,
            ServerError::Asset { .. } => 3,
            _ => 1,
        }
    }
}

pub type ClientId = u64;

/// Renderer-side state driven by client messages.
#[derive(Debug, Clone)]
pub struct SceneState {
    pub camera: ViewState,
    /// The client pose the camera came from, if any message was applied.
    pub camera_pose: Option<Pose>,
    pub object_poses: BTreeMap<String, (Pose, f64)>,
    pub last_message_time: HashMap<ClientId, Instant>,
}

/// What one [`Server::poll_messages`] call drained and applied.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UpdateSummary {
    pub camera_messages: usize,
    pub camera_applied: bool,
    pub object_messages: usize,
    /// Objects whose pose changed, in id order.
    pub objects_updated: Vec<String>,
    /// Subset of `objects_updated` seen for the first time.
    pub new_objects: Vec<String>,
    pub telemetry_messages: usize,
    /// Messages dropped because they failed to parse or validate or were
    /// not meant for the message channel.
    pub rejected: usize,
    pub disconnected: usize,
}

impl UpdateSummary {
    pub fn changed_scene(&self) -> bool {
        self.camera_applied || !self.objects_updated.is_empty()
    }
}

/// Bookkeeping returned by [`Server::publish`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PublishedFrame {
    pub frame_index: u64,
    pub timestamp_ns: u64,
    /// Present when the server stamps checksums.
    pub checksum: Option<u64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ServerStats {
    pub init_connections: usize,
    pub message_connections: usize,
    pub rejected_total: u64,
    pub frames_published: u64,
    pub telemetry_dropped: u64,
}

enum Event {
    Message { client: ClientId, msg: ControlMessage },
    Rejected { client: ClientId },
    Disconnected { client: ClientId },
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Channel {
    Init,
    Message,
}

struct Conn {
    channel: Channel,
    stream: TcpStream,
    outbox: Option<SyncSender<Arc<[u8]>>>,
}

struct Shared {
    stop: AtomicBool,
    conns: Mutex<HashMap<ClientId, Conn>>,
    next_id: AtomicU64,
    workers: Mutex<Vec<JoinHandle<()>>>,
    telemetry_dropped: AtomicU64,
    config: ServerConfig,
    init: InitPacket,
}

impl Shared {
    fn count(&self, channel: Channel) -> usize {
        self.conns.lock().unwrap().values().filter(|c| c.channel == channel).count()
    }

    fn spawn(self: &Arc<Self>, name: &str, f: impl FnOnce() + Send + 'static) {
        let handle = std::thread::Builder::new()
            .name(name.into())
            .spawn(f)
            .expect("spawn server thread");
        let mut workers = self.workers.lock().unwrap();
        workers.retain(|h| !h.is_finished());
        workers.push(handle);
    }

    fn remove(&self, id: ClientId) {
        if let Some(conn) = self.conns.lock().unwrap().remove(&id) {
            let _ = conn.stream.shutdown(std::net::Shutdown::Both);
        }
    }
}

pub struct Server {
    shared: Arc<Shared>,
    writer: Option<FrameWriter>,
    init_addr: SocketAddr,
    message_addr: SocketAddr,
    events: Receiver<Event>,
    pending: VecDeque<Event>,
    accept_threads: Vec<JoinHandle<()>>,
    scene: SceneState,
    started: Instant,
    rejected_total: u64,
    frames_published: u64,
}

fn bind(host: &str, port: u16) -> Result<TcpListener, ServerError> {
    let addr = format!("{host}:{port}");
    let listener = TcpListener::bind(&addr).map_err(|source| ServerError::Bind { addr: addr.clone(), source })?;
    listener
        .set_nonblocking(true)
        .map_err(|source| ServerError::Bind { addr, source })?;
    Ok(listener)
}

impl Server {
    /// Creates the frame region and starts listening on both channels.
    pub fn start(config: ServerConfig) -> Result<Self, ServerError> {
        config.validate()?;
        let desc = FrameDescriptor::new(config.width, config.height)?;
        let init_listener = bind(&config.host, config.init_port)?;
        let message_listener = bind(&config.host, config.message_port)?;
        let init_addr = init_listener.local_addr().expect("bound listener has an address");
        let message_addr = message_listener.local_addr().expect("bound listener has an address");

        let (writer, token) = create_region(
            desc,
            config.transport,
            RegionOptions {
                name: config.region_name.clone(),
                stamp_checksums: config.stamp_checksums,
            },
        )?;
        let init = InitPacket {
            width: desc.width,
            height: desc.height,
            color_format: desc.color_format,
            depth_format: desc.depth_format,
            color_pitch: desc.color_pitch,
            depth_pitch: desc.depth_pitch,
            transport: config.transport,
            attachment_token: token,
            frame_region_bytes: writer.region_bytes() as u64,
        };
        let scene = SceneState {
            camera: config.default_view(),
            camera_pose: None,
            object_poses: BTreeMap::new(),
            last_message_time: HashMap::new(),
        };
        let shared = Arc::new(Shared {
            stop: AtomicBool::new(false),
            conns: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(1),
            workers: Mutex::new(Vec::new()),
            telemetry_dropped: AtomicU64::new(0),
            config,
            init,
        });
        let (tx, events) = mpsc::channel();
        let accept_threads = vec![
            spawn_acceptor(shared.clone(), init_listener, Channel::Init, tx.clone()),
            spawn_acceptor(shared.clone(), message_listener, Channel::Message, tx),
        ];
        log::info!(
            "server listening: init {init_addr}, messages {message_addr}, region {}",
            writer.name()
        );
        Ok(Self {
            shared,
            writer: Some(writer),
            init_addr,
            message_addr,
            events,
            pending: VecDeque::new(),
            accept_threads,
            scene,
            started: Instant::now(),
            rejected_total: 0,
            frames_published: 0,
        })
    }

    pub fn config(&self) -> &ServerConfig {
        &self.shared.config
    }

    pub fn init_addr(&self) -> SocketAddr {
        self.init_addr
    }

    pub fn message_addr(&self) -> SocketAddr {
        self.message_addr
    }

    /// The packet sent to every admitted client.
    pub fn init_packet(&self) -> &InitPacket {
        &self.shared.init
    }

    pub fn scene(&self) -> &SceneState {
        &self.scene
    }

    pub fn stats(&self) -> ServerStats {
        ServerStats {
            init_connections: self.shared.count(Channel::Init),
            message_connections: self.shared.count(Channel::Message),
            rejected_total: self.rejected_total,
            frames_published: self.frames_published,
            telemetry_dropped: self.shared.telemetry_dropped.load(Ordering::Relaxed),
        }
    }

    /// Seconds since start, the time base of emitted telemetry.
    pub fn session_time(&self) -> f64 {
        self.started.elapsed().as_secs_f64()
    }

    /// Blocks until a message is pending or `timeout` elapses. Returns
    /// whether anything is pending.
    pub fn wait_for_messages(&mut self, timeout: Duration) -> bool {
        if !self.pending.is_empty() {
            return true;
        }
        match self.events.recv_timeout(timeout) {
            Ok(ev) => {
                self.pending.push_back(ev);
                true
            }
            Err(RecvTimeoutError::Timeout | RecvTimeoutError::Disconnected) => false,
        }
    }

    /// Drains every pending message and applies the newest camera pose and
    /// the newest pose per object.
    pub fn poll_messages(&mut self) -> UpdateSummary {
        let mut summary = UpdateSummary::default();
        let mut camera = None;
        let mut objects: BTreeMap<String, (Pose, f64)> = BTreeMap::new();
        let drained: Vec<Event> = self.pending.drain(..).chain(self.events.try_iter()).collect();
        for event in drained {
            match event {
                Event::Message { client, msg } => {
                    self.scene.last_message_time.insert(client, Instant::now());
                    match msg {
                        ControlMessage::CameraPose(m) => {
                            summary.camera_messages += 1;
                            let fov = m.fov_y_deg.unwrap_or(self.shared.config.default_fov_y_deg);
                            let cfg = &self.shared.config;
                            let converted = Pose::new(m.position, m.rotation, m.convention).and_then(|pose| {
                                client_pose_to_view(&pose, fov.to_radians(), cfg.width, cfg.height)
                                    .map(|view| (pose, view))
                            });
                            match converted {
                                Ok(pv) => camera = Some(pv),
                                Err(e) => {
                                    log::warn!("dropping camera pose from client {client}: {e}");
                                    summary.rejected += 1;
                                }
                            }
                        }
                        ControlMessage::ObjectPose(m) => {
                            summary.object_messages += 1;
                            match Pose::new(m.position, m.rotation, m.convention) {
                                Ok(pose) => {
                                    objects.insert(m.object_id, (pose, m.scale));
                                }
                                Err(e) => {
                                    log::warn!("dropping object pose from client {client}: {e}");
                                    summary.rejected += 1;
                                }
                            }
                        }
                        ControlMessage::Telemetry(_) => summary.telemetry_messages += 1,
                        other => {
                            log::warn!("client {client} sent {} on the message channel", other.type_name());
                            summary.rejected += 1;
                        }
                    }
                }
                Event::Rejected { client } => {
                    self.scene.last_message_time.insert(client, Instant::now());
                    summary.rejected += 1;
                }
                Event::Disconnected { client } => {
                    self.scene.last_message_time.remove(&client);
                    summary.disconnected += 1;
                }
            }
        }
        if let Some((pose, view)) = camera {
            self.scene.camera = view;
            self.scene.camera_pose = Some(pose);
            summary.camera_applied = true;
        }
        for (id, value) in objects {
            if self.scene.object_poses.insert(id.clone(), value).is_none() {
                summary.new_objects.push(id.clone());
            }
            summary.objects_updated.push(id);
        }
        self.rejected_total += summary.rejected as u64;
        summary
    }

    /// Registers an object pose directly, as if a client had sent it.
    pub fn set_object_pose(&mut self, id: &str, pose: Pose, scale: f64) {
        self.scene.object_poses.insert(id.to_owned(), (pose, scale));
    }

    /// Converts `invdepth` to linear depth and publishes the next frame.
    pub fn publish(&mut self, color: &ColorImage, invdepth: &DepthImage) -> Result<PublishedFrame, ServerError> {
        let writer = self.writer.as_mut().ok_or(FrameBusError::Disconnected)?;
        let desc = *writer.descriptor();
        for (w, h) in [color.dimensions(), invdepth.dimensions()] {
            if (w, h) != (desc.width, desc.height) {
                return Err(FrameBusError::DimensionMismatch {
                    expected_width: desc.width,
                    expected_height: desc.height,
                    actual_width: w,
                    actual_height: h,
                }
                .into());
            }
        }
        let depth = invdepth_to_linear(invdepth, self.shared.config.far_sentinel)?;
        let frame_index = writer.last_frame_index() + 1;
        let timestamp_ns = framebus::monotonic_ns();
        writer.publish_frame(color, &depth, frame_index, timestamp_ns)?;
        self.frames_published += 1;
        let checksum = writer
            .stamps_checksums()
            .then(|| frame_checksum(color.pixels(), depth.pixels()));
        Ok(PublishedFrame {
            frame_index,
            timestamp_ns,
            checksum,
        })
    }

    /// Sends a telemetry sample to every message-channel client. Clients
    /// whose buffer is full miss the sample.
    pub fn emit_telemetry(&self, series: &str, value: f64) -> Result<(), ServerError> {
        let msg = ControlMessage::Telemetry(TelemetryMsg {
            series: series.to_owned(),
            t: self.session_time(),
            value,
        });
        let bytes: Arc<[u8]> = encode_envelope(serialize_message(&msg)?.as_bytes())?.into();
        for conn in self.shared.conns.lock().unwrap().values() {
            if let Some(outbox) = &conn.outbox {
                if let Err(TrySendError::Full(_)) = outbox.try_send(bytes.clone()) {
                    self.shared.telemetry_dropped.fetch_add(1, Ordering::Relaxed);
                }
            }
        }
        Ok(())
    }

    /// Closes every connection, joins the network threads and tears the
    /// frame region down. Readers then see the writer as gone.
    pub fn shutdown(&mut self) {
        if self.shared.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        for handle in self.accept_threads.drain(..) {
            let _ = handle.join();
        }
        for conn in self.shared.conns.lock().unwrap().values() {
            let _ = conn.stream.shutdown(std::net::Shutdown::Both);
        }
        let workers: Vec<_> = self.shared.workers.lock().unwrap().drain(..).collect();
        for handle in workers {
            let _ = handle.join();
        }
        self.shared.conns.lock().unwrap().clear();
        if let Some(writer) = self.writer.take() {
            writer.teardown();
        }
        log::info!("server shut down");
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn spawn_acceptor(shared: Arc<Shared>, listener: TcpListener, channel: Channel, events: Sender<Event>) -> JoinHandle<()> {
    let name = match channel {
        Channel::Init => "splatbus-init-accept",
        Channel::Message => "splatbus-msg-accept",
    };
    std::thread::Builder::new()
        .name(name.into())
        .spawn(move || {
            while !shared.stop.load(Ordering::SeqCst) {
                match listener.accept() {
                    Ok((stream, peer)) => {
                        if let Err(e) = stream.set_nonblocking(false) {
                            log::warn!("dropping connection from {peer}: {e}");
                            continue;
                        }
                        let _ = stream.set_nodelay(true);
                        let id = shared.next_id.fetch_add(1, Ordering::Relaxed);
                        log::debug!("connection {id} from {peer}");
                        let s = shared.clone();
                        match channel {
                            Channel::Init => shared.spawn("splatbus-init", move || serve_init(s, id, stream)),
                            Channel::Message => {
                                let ev = events.clone();
                                shared.spawn("splatbus-msg", move || serve_messages(s, id, stream, ev))
                            }
                        }
                    }
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => std::thread::sleep(Duration::from_millis(5)),
                    Err(e) => {
                        log::warn!("accept failed: {e}");
                        std::thread::sleep(Duration::from_millis(50));
                    }
                }
            }
        })
        .expect("spawn accept thread")
}

fn send_error(stream: &mut TcpStream, code: ErrorCode, detail: impl Into<String>) {
    let msg = ControlMessage::Error(ErrorMsg {
        code,
        detail: detail.into(),
    });
    let _ = wire::write_message(stream, &msg);
}

fn reject(mut stream: TcpStream, code: ErrorCode, detail: &str) {
    log::info!("rejecting connection: {detail}");
    send_error(&mut stream, code, detail);
    let _ = stream.shutdown(std::net::Shutdown::Both);
}

fn serve_init(shared: Arc<Shared>, id: ClientId, mut stream: TcpStream) {
    let _ = stream.set_read_timeout(Some(shared.config.client_timeout));
    let _ = stream.set_write_timeout(Some(shared.config.client_timeout));
    let hello = match wire::read_message(&mut stream) {
        Ok(ControlMessage::Hello(h)) => h,
        Ok(other) => {
            return reject(stream, ErrorCode::Unsupported, &format!("expected hello, got {}", other.type_name()));
        }
        Err(WireError::Closed) => return,
        Err(e) => {
            let code = e.error_code().unwrap_or(ErrorCode::Malformed);
            return reject(stream, code, &format!("bad hello: {e}"));
        }
    };
    if hello.protocol_version != PROTOCOL_VERSION {
        return reject(
            stream,
            ErrorCode::VersionMismatch,
            &format!(
                "client speaks protocol {}, server speaks {PROTOCOL_VERSION}",
                hello.protocol_version
            ),
        );
    }
    {
        let mut conns = shared.conns.lock().unwrap();
        let active = conns.values().filter(|c| c.channel == Channel::Init).count();
        if active >= shared.config.max_clients || shared.stop.load(Ordering::SeqCst) {
            drop(conns);
            return reject(stream, ErrorCode::Unsupported, "server is at its client limit");
        }
        let Ok(clone) = stream.try_clone() else { return };
        conns.insert(
            id,
            Conn {
                channel: Channel::Init,
                stream: clone,
                outbox: None,
            },
        );
    }
    log::info!("client {id} ({}) admitted", hello.client_name);
    if wire::write_message(&mut stream, &ControlMessage::Init(shared.init.clone())).is_err() {
        return shared.remove(id);
    }
    // The channel stays open for error reports; anything the client sends
    // here is answered with an error and otherwise ignored.
    let _ = stream.set_read_timeout(Some(POLL_INTERVAL));
    let mut asm = EnvelopeAssembler::new();
    let mut buf = [0u8; 4096];
    while !shared.stop.load(Ordering::SeqCst) {
        match stream.read(&mut buf) {
            Ok(0) => break,
            Ok(n) => {
                asm.push(&buf[..n]);
                match asm.next_payload() {
                    Ok(Some(_)) => send_error(&mut stream, ErrorCode::Unsupported, "init channel takes no further messages"),
                    Ok(None) => {}
                    Err(e) => {
                        send_error(&mut stream, ErrorCode::Oversize, e.to_string());
                        break;
                    }
                }
            }
            Err(e) if is_timeout(&e) => {}
            Err(_) => break,
        }
    }
    shared.remove(id);
    log::info!("client {id} left the init channel");
}

fn is_timeout(e: &io::Error) -> bool {
    matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut | io::ErrorKind::Interrupted)
}

fn serve_messages(shared: Arc<Shared>, id: ClientId, stream: TcpStream, events: Sender<Event>) {
    let timeout = shared.config.client_timeout;
    let (tx, rx) = mpsc::sync_channel::<Arc<[u8]>>(OUTBOX_CAPACITY);
    let last_write = Arc::new(Mutex::new(Instant::now()));
    {
        let mut conns = shared.conns.lock().unwrap();
        let active = conns.values().filter(|c| c.channel == Channel::Message).count();
        if active >= shared.config.max_clients || shared.stop.load(Ordering::SeqCst) {
            drop(conns);
            return reject(stream, ErrorCode::Unsupported, "server is at its client limit");
        }
        let Ok(clone) = stream.try_clone() else { return };
        conns.insert(
            id,
            Conn {
                channel: Channel::Message,
                stream: clone,
                outbox: Some(tx.clone()),
            },
        );
    }
    let Ok(mut out) = stream.try_clone() else {
        return shared.remove(id);
    };
    let _ = out.set_write_timeout(Some(timeout));
    let lw = last_write.clone();
    let writer = std::thread::Builder::new()
        .name("splatbus-msg-out".into())
        .spawn(move || {
            for bytes in rx {
                if out.write_all(&bytes).is_err() {
                    let _ = out.shutdown(std::net::Shutdown::Both);
                    break;
                }
                *lw.lock().unwrap() = Instant::now();
            }
        })
        .expect("spawn writer thread");

    let mut stream = stream;
    let _ = stream.set_read_timeout(Some(POLL_INTERVAL));
    let mut asm = EnvelopeAssembler::new();
    let mut buf = vec![0u8; 64 * 1024];
    let mut last_read = Instant::now();
    let reply = |code: ErrorCode, detail: String| {
        let msg = ControlMessage::Error(ErrorMsg { code, detail });
        if let Ok(text) = serialize_message(&msg) {
            if let Ok(bytes) = encode_envelope(text.as_bytes()) {
                let _ = tx.try_send(bytes.into());
            }
        }
    };
    'read: while !shared.stop.load(Ordering::SeqCst) {
        match stream.read(&mut buf) {
            Ok(0) => break,
            Ok(n) => {
                last_read = Instant::now();
                asm.push(&buf[..n]);
                loop {
                    match asm.next_payload() {
                        Ok(Some(payload)) => match parse_message(&payload) {
                            Ok(msg) => {
                                let _ = events.send(Event::Message { client: id, msg });
                            }
                            Err(e) => {
                                log::debug!("client {id}: {e}");
                                let _ = events.send(Event::Rejected { client: id });
                                reply(e.error_code().unwrap_or(ErrorCode::Malformed), e.to_string());
                            }
                        },
                        Ok(None) => break,
                        Err(e) => {
                            log::warn!("client {id}: {e}; closing");
                            let _ = events.send(Event::Rejected { client: id });
                            reply(ErrorCode::Oversize, e.to_string());
                            break 'read;
                        }
                    }
                }
            }
            Err(e) if is_timeout(&e) => {
                let idle = last_read.elapsed().min(last_write.lock().unwrap().elapsed());
                if idle > timeout {
                    log::info!("client {id} idle for {idle:?}; reaping");
                    break;
                }
            }
            Err(_) => break,
        }
    }
    drop(tx);
    // Let a final error reply drain before the socket goes away.
    if let Some(conn) = shared.conns.lock().unwrap().get_mut(&id) {
        conn.outbox = None;
    }
    let _ = writer.join();
    shared.remove(id);
    let _ = events.send(Event::Disconnected { client: id });
    log::info!("client {id} left the message channel");
}

/// Options for [`Demo::run`].
#[derive(Debug, Clone)]
pub struct DemoOptions {
    /// Frame rate cap; 0 renders as fast as possible.
    pub target_fps: f64,
    pub max_frames: Option<u64>,
    /// Render only when a message changed the scene (plus the first frame).
    /// Makes the published frame sequence a function of the message trace.
    pub on_demand: bool,
}

impl Default for DemoOptions {
    fn default() -> Self {
        Self {
            target_fps: 60.0,
            max_frames: None,
            on_demand: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DemoReport {
    pub frames: u64,
    pub rejected: u64,
}

/// The reference integration: a server wrapped around the CPU rasterizer.
pub struct Demo {
    server: Server,
    cloud: GaussianCloud,
}

impl Demo {
    /// Loads the asset (or the built-in scene) and starts the server.
    pub fn new(config: ServerConfig) -> Result<Self, ServerError> {
        config.validate()?;
        let cloud = match &config.asset_path {
            Some(path) => {
                let cloud = splatref::load_ply(path).map_err(|source| ServerError::Asset {
                    path: path.clone(),
                    source,
                })?;
                log::info!("loaded {} Gaussians from {}", cloud.len(), path.display());
                cloud
            }
            None => GaussianCloud::demo_scene(),
        };
        let mut server = Server::start(config)?;
        server.set_object_pose(DEMO_OBJECT_ID, Pose::identity(crate::geometry::Convention::GsRhYdown), 1.0);
        Ok(Self { server, cloud })
    }

    pub fn server(&self) -> &Server {
        &self.server
    }

    pub fn server_mut(&mut self) -> &mut Server {
        &mut self.server
    }

    /// Renders the current scene state.
    pub fn render(&self) -> Result<splatref::RenderOutput, ServerError> {
        let scene = self.server.scene();
        let cloud = match scene.object_poses.get(DEMO_OBJECT_ID) {
            Some((pose, scale)) => splatref::transform_cloud(&self.cloud, pose, *scale)?,
            None => self.cloud.clone(),
        };
        let settings = RenderSettings::for_view(&scene.camera);
        Ok(splatref::rasterize(&cloud, &scene.camera, &settings)?)
    }

    /// Runs poll, render, publish until `stop` is set or `max_frames` is
    /// reached, then shuts the server down.
    pub fn run(mut self, options: &DemoOptions, stop: &AtomicBool) -> Result<DemoReport, ServerError> {
        let mut report = DemoReport::default();
        let frame_budget = (options.target_fps > 0.0).then(|| Duration::from_secs_f64(1.0 / options.target_fps));
        let mut window_start = Instant::now();
        let mut window_frames = 0u32;
        let mut first = true;
        while !stop.load(Ordering::SeqCst) && options.max_frames.is_none_or(|m| report.frames < m) {
            let tick = Instant::now();
            if options.on_demand && !first {
                self.server.wait_for_messages(Duration::from_millis(50));
            }
            let summary = self.server.poll_messages();
            report.rejected += summary.rejected as u64;
            if first || !options.on_demand || summary.changed_scene() {
                first = false;
                let out = self.render()?;
                let render_ms = tick.elapsed().as_secs_f64() * 1e3;
                self.server.publish(&out.color, &out.invdepth)?;
                report.frames += 1;
                window_frames += 1;
                self.server.emit_telemetry("render_ms", render_ms)?;
                self.server.emit_telemetry("camera_msgs", summary.camera_messages as f64)?;
            }
            let window = window_start.elapsed();
            if window >= Duration::from_secs(1) {
                self.server.emit_telemetry("fps", f64::from(window_frames) / window.as_secs_f64())?;
                window_start = Instant::now();
                window_frames = 0;
            }
            if let (Some(budget), false) = (frame_budget, options.on_demand) {
                if let Some(rest) = budget.checked_sub(tick.elapsed()) {
                    std::thread::sleep(rest);
                }
            }
        }
        self.server.shutdown();
        Ok(report)
    }
}

/// Loads the scene, starts the server and runs the render loop.
pub fn run_demo(config: ServerConfig, options: &DemoOptions, stop: &AtomicBool) -> Result<DemoReport, ServerError> {
    Demo::new(config)?.run(options, stop)
}
