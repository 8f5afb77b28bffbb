//! Headless client: handshake on the init channel, attach the frame region,
//! then stream poses and receive telemetry on the message channel.

use std::fs::OpenOptions;
use std::io::{self, Write};
use std::net::{Shutdown, SocketAddr, TcpStream, ToSocketAddrs};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, TrySendError};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crate::framebus::{attach_region, FrameBusError, FrameReader, FrameSnapshot, Wait};
use crate::geometry::Pose;
use crate::wire::{
    self, encode_envelope, serialize_message, CameraPoseMsg, ControlMessage, ErrorCode, Hello, InitPacket,
    ObjectPoseMsg, TelemetryMsg, WireError, PROTOCOL_VERSION,
};

/// Incoming messages buffered before further ones are dropped.
const INBOX_CAPACITY: usize = 4096;

#[derive(Debug, Clone)]
pub struct ConnectOptions {
    pub host: String,
    pub init_port: u16,
    pub message_port: u16,
    pub client_name: String,
    /// Bound on connecting and on waiting for the init packet.
    pub timeout: Duration,
}

impl ConnectOptions {
    pub fn new(host: impl Into<String>, init_port: u16, message_port: u16) -> Self {
        Self {
            host: host.into(),
            init_port,
            message_port,
            client_name: "splatbus-client".into(),
            timeout: Duration::from_secs(5),
        }
    }

    pub fn for_addrs(init: SocketAddr, message: SocketAddr) -> Self {
        Self::new(init.ip().to_string(), init.port(), message.port())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("network error on the {channel} channel: {source}")]
    Network { channel: &'static str, source: io::Error },
    #[error("protocol version mismatch: {0}")]
    VersionMismatch(String),
    #[error("server rejected the connection ({code:?}): {detail}")]
    Rejected { code: ErrorCode, detail: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    /// Handshake succeeded but the frame region could not be mapped.
    #[error("cannot attach frame region: {0}")]
    Attach(FrameBusError),
    #[error("invalid message: {0}")]
    Invalid(String),
    #[error("server disconnected")]
    Disconnected,
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl ClientError {
    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            ClientError::Invalid(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClientStats {
    pub frames: u64,
    pub retries: u64,
    pub last_frame_index: u64,
    pub incoming_dropped: u64,
}

/// Sends envelopes on a message channel; cheap to clone and share across
/// threads.
#[derive(Clone)]
pub struct MessageSender {
    stream: Arc<Mutex<TcpStream>>,
}

impl MessageSender {
    /// Validates and sends a message.
    pub fn send(&self, msg: &ControlMessage) -> Result<(), ClientError> {
        let text = serialize_message(msg).map_err(|e| ClientError::Invalid(e.to_string()))?;
        self.send_raw(text.as_bytes())
    }

    /// Sends `payload` verbatim inside one envelope.
    pub fn send_raw(&self, payload: &[u8]) -> Result<(), ClientError> {
        let bytes = encode_envelope(payload).map_err(|e| ClientError::Invalid(e.to_string()))?;
        self.stream
            .lock()
            .unwrap()
            .write_all(&bytes)
            .map_err(|_| ClientError::Disconnected)
    }
}

/// Receiving side of a message channel, fed by a background thread.
pub struct MessageInbox {
    rx: Receiver<ControlMessage>,
    dropped: Arc<AtomicU64>,
    connected: Arc<AtomicBool>,
}

impl MessageInbox {
    pub fn try_recv(&self) -> Option<ControlMessage> {
        self.rx.try_recv().ok()
    }

    /// Waits up to `timeout`; `Err` once the channel has closed and drained.
    pub fn recv_timeout(&self, timeout: Duration) -> Result<Option<ControlMessage>, ClientError> {
        match self.rx.recv_timeout(timeout) {
            Ok(msg) => Ok(Some(msg)),
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => Err(ClientError::Disconnected),
        }
    }

    pub fn is_connected(&self) -> bool {
        self.connected.load(Ordering::Acquire)
    }

    pub fn dropped(&self) -> u64 {
        self.dropped.load(Ordering::Relaxed)
    }
}

/// The pieces of a session, for callers that drive them from different
/// threads.
pub struct SessionParts {
    pub init: InitPacket,
    pub reader: FrameReader,
    pub sender: MessageSender,
    pub inbox: MessageInbox,
    pub connection: SessionConnection,
}

/// Keeps the sockets of a session open; dropping it disconnects.
pub struct SessionConnection {
    init_stream: TcpStream,
    message_stream: TcpStream,
    inbox_thread: Option<JoinHandle<()>>,
}

impl Drop for SessionConnection {
    fn drop(&mut self) {
        let _ = self.init_stream.shutdown(Shutdown::Both);
        let _ = self.message_stream.shutdown(Shutdown::Both);
        if let Some(handle) = self.inbox_thread.take() {
            let _ = handle.join();
        }
    }
}

pub struct ClientSession {
    parts: SessionParts,
    frames: u64,
}

fn resolve(host: &str, port: u16, channel: &'static str) -> Result<Vec<SocketAddr>, ClientError> {
    let addrs: Vec<SocketAddr> = (host, port)
        .to_socket_addrs()
        .map_err(|source| ClientError::Network { channel, source })?
        .collect();
    if addrs.is_empty() {
        return Err(ClientError::Network {
            channel,
            source: io::Error::new(io::ErrorKind::NotFound, format!("{host} did not resolve")),
        });
    }
    Ok(addrs)
}

fn connect_to(host: &str, port: u16, timeout: Duration, channel: &'static str) -> Result<TcpStream, ClientError> {
    let mut last = None;
    for addr in resolve(host, port, channel)? {
        match TcpStream::connect_timeout(&addr, timeout) {
            Ok(s) => {
                let _ = s.set_nodelay(true);
                return Ok(s);
            }
            Err(e) => last = Some(e),
        }
    }
    Err(ClientError::Network {
        channel,
        source: last.expect("at least one address was tried"),
    })
}

fn check_init(init: &InitPacket, reader: &FrameReader) -> Result<(), ClientError> {
    let d = reader.descriptor();
    let fields = [
        ("width", init.width, d.width),
        ("height", init.height, d.height),
        ("color_pitch", init.color_pitch, d.color_pitch),
        ("depth_pitch", init.depth_pitch, d.depth_pitch),
    ];
    for (name, sent, mapped) in fields {
        if sent != mapped {
            return Err(ClientError::Protocol(format!(
                "init packet {name} {sent} disagrees with the region's {mapped}"
            )));
        }
    }
    if init.frame_region_bytes != d.region_bytes() as u64 {
        return Err(ClientError::Protocol(format!(
            "init packet region size {} disagrees with the region's {}",
            init.frame_region_bytes,
            d.region_bytes()
        )));
    }
    Ok(())
}

/// Performs the handshake on the init channel and returns the open stream
/// and the init packet.
pub fn handshake(opts: &ConnectOptions) -> Result<(TcpStream, InitPacket), ClientError> {
    let net = |source: io::Error| ClientError::Network { channel: "init", source };
    let mut stream = connect_to(&opts.host, opts.init_port, opts.timeout, "init")?;
    stream.set_read_timeout(Some(opts.timeout)).map_err(net)?;
    let hello = ControlMessage::Hello(Hello {
        protocol_version: PROTOCOL_VERSION,
        client_name: opts.client_name.clone(),
    });
    wire::write_message(&mut stream, &hello).map_err(|e| match e {
        WireError::Io(source) => net(source),
        other => ClientError::Protocol(other.to_string()),
    })?;
    let reply = wire::read_message(&mut stream).map_err(|e| match e {
        WireError::Io(source) => net(source),
        WireError::Closed => net(io::Error::new(io::ErrorKind::UnexpectedEof, "server closed the init channel")),
        other => ClientError::Protocol(other.to_string()),
    })?;
    stream.set_read_timeout(None).map_err(net)?;
    match reply {
        ControlMessage::Init(init) => Ok((stream, init)),
        ControlMessage::Error(e) if e.code == ErrorCode::VersionMismatch => Err(ClientError::VersionMismatch(e.detail)),
        ControlMessage::Error(e) => Err(ClientError::Rejected {
            code: e.code,
            detail: e.detail,
        }),
        other => Err(ClientError::Protocol(format!("expected init, got {}", other.type_name()))),
    }
}

/// Connects only the message channel, for callers that do not need frames.
pub fn connect_messages(
    host: &str,
    port: u16,
    timeout: Duration,
) -> Result<(MessageSender, MessageInbox, TcpStream, JoinHandle<()>), ClientError> {
    let stream = connect_to(host, port, timeout, "message")?;
    let read_half = stream.try_clone()?;
    let (tx, rx) = mpsc::sync_channel(INBOX_CAPACITY);
    let dropped = Arc::new(AtomicU64::new(0));
    let connected = Arc::new(AtomicBool::new(true));
    let (d, c) = (dropped.clone(), connected.clone());
    let handle = std::thread::Builder::new()
        .name("splatbus-client-inbox".into())
        .spawn(move || {
            let mut read_half = read_half;
            loop {
                match wire::read_message(&mut read_half) {
                    Ok(msg) => {
                        if let Err(TrySendError::Full(_)) = tx.try_send(msg) {
                            d.fetch_add(1, Ordering::Relaxed);
                        }
                    }
                    Err(WireError::Malformed(e) | WireError::Unsupported(e)) => {
                        log::warn!("ignoring bad message from server: {e}");
                    }
                    Err(_) => break,
                }
            }
            c.store(false, Ordering::Release);
        })?;
    let sender = MessageSender {
        stream: Arc::new(Mutex::new(stream.try_clone()?)),
    };
    let inbox = MessageInbox { rx, dropped, connected };
    Ok((sender, inbox, stream, handle))
}

impl ClientSession {
    /// Handshake, attach, then connect the message channel. Nothing is left
    /// open if any step fails.
    pub fn connect(opts: &ConnectOptions) -> Result<Self, ClientError> {
        let (init_stream, init) = handshake(opts)?;
        let reader = attach_region(&init.attachment_token).map_err(ClientError::Attach)?;
        check_init(&init, &reader)?;
        let (sender, inbox, message_stream, handle) = connect_messages(&opts.host, opts.message_port, opts.timeout)?;
        log::info!(
            "connected: {}x{} frames over {}",
            init.width,
            init.height,
            init.transport
        );
        Ok(Self {
            parts: SessionParts {
                init,
                reader,
                sender,
                inbox,
                connection: SessionConnection {
                    init_stream,
                    message_stream,
                    inbox_thread: Some(handle),
                },
            },
            frames: 0,
        })
    }

    pub fn init(&self) -> &InitPacket {
        &self.parts.init
    }

    pub fn reader(&self) -> &FrameReader {
        &self.parts.reader
    }

    pub fn sender(&self) -> MessageSender {
        self.parts.sender.clone()
    }

    pub fn inbox(&self) -> &MessageInbox {
        &self.parts.inbox
    }

    pub fn into_parts(self) -> SessionParts {
        self.parts
    }

    pub fn stats(&self) -> ClientStats {
        let r = self.parts.reader.stats();
        ClientStats {
            frames: self.frames,
            retries: r.retries,
            last_frame_index: r.last_frame_index,
            incoming_dropped: self.parts.inbox.dropped(),
        }
    }

    /// Acquires the newest frame. `Ok(None)` means no new frame (non-blocking
    /// or timed out).
    pub fn grab_frame(&mut self, wait: Wait) -> Result<Option<FrameSnapshot>, ClientError> {
        match self.parts.reader.acquire_latest(wait) {
            Ok(Some(snap)) => {
                self.frames += 1;
                Ok(Some(snap))
            }
            Ok(None) => Ok(None),
            Err(FrameBusError::Disconnected | FrameBusError::Stale(_)) => Err(ClientError::Disconnected),
            Err(e) => Err(ClientError::Attach(e)),
        }
    }

    pub fn send_camera(&self, pose: &Pose, fov_y_deg: Option<f64>) -> Result<(), ClientError> {
        self.parts.sender.send(&ControlMessage::CameraPose(CameraPoseMsg {
            position: pose.position_array(),
            rotation: pose.rotation_xyzw(),
            convention: pose.convention,
            fov_y_deg,
        }))
    }

    pub fn send_object(&self, object_id: &str, pose: &Pose, scale: f64) -> Result<(), ClientError> {
        self.parts.sender.send(&ControlMessage::ObjectPose(ObjectPoseMsg {
            object_id: object_id.to_owned(),
            position: pose.position_array(),
            rotation: pose.rotation_xyzw(),
            scale,
            convention: pose.convention,
        }))
    }

    pub fn send(&self, msg: &ControlMessage) -> Result<(), ClientError> {
        self.parts.sender.send(msg)
    }

    pub fn send_raw(&self, payload: &[u8]) -> Result<(), ClientError> {
        self.parts.sender.send_raw(payload)
    }

    /// Appends incoming telemetry to a CSV file (`series,t,value`) until
    /// `duration` passes, `stop` is set or the server goes away. Writes the
    /// header when the file is new or empty. Returns the rows written.
    pub fn record_telemetry(
        &self,
        path: impl AsRef<Path>,
        duration: Option<Duration>,
        stop: &AtomicBool,
    ) -> Result<u64, ClientError> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let mut recorder = TelemetryRecorder::new(file)?;
        let deadline = duration.map(|d| Instant::now() + d);
        while !stop.load(Ordering::SeqCst) {
            let wait = match deadline {
                Some(d) => match d.checked_duration_since(Instant::now()) {
                    Some(rest) => rest.min(Duration::from_millis(100)),
                    None => break,
                },
                None => Duration::from_millis(100),
            };
            match self.parts.inbox.recv_timeout(wait) {
                Ok(Some(ControlMessage::Telemetry(t))) => recorder.record(&t)?,
                Ok(Some(ControlMessage::Error(e))) => log::warn!("server reported {:?}: {}", e.code, e.detail),
                Ok(_) => {}
                Err(_) => break,
            }
        }
        recorder.flush()?;
        Ok(recorder.rows())
    }
}

/// Parses a pose script: one message JSON object per line, blank lines
/// ignored.
pub fn read_pose_script<R: io::BufRead>(reader: R) -> Result<Vec<ControlMessage>, ClientError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let msg = wire::parse_message(line.as_bytes())
            .map_err(|e| ClientError::Invalid(format!("script line {}: {e}", i + 1)))?;
        out.push(msg);
    }
    Ok(out)
}

/// A frame observed while replaying a script.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObservedFrame {
    pub frame_index: u64,
    pub checksum: u64,
}

impl ClientSession {
    /// Sends `script` at `rate` messages per second (0 for no pacing).
    /// With `sync`, waits after every pose message for the next frame and
    /// records it; against a server that renders on demand this yields one
    /// frame per pose, so the recorded sequence depends only on the script.
    pub fn replay(
        &mut self,
        script: &[ControlMessage],
        rate: f64,
        sync: bool,
        frame_timeout: Duration,
    ) -> Result<Vec<ObservedFrame>, ClientError> {
        let interval = (rate > 0.0).then(|| Duration::from_secs_f64(1.0 / rate));
        let mut observed = Vec::new();
        if sync {
            // Consume the current frame so the first wait sees a new one. A
            // server that has not published yet is waited for, otherwise its
            // first frame would be paired with the first pose.
            let wait = if self.parts.reader.peek_frame_index() == 0 {
                Wait::BlockUntilNewTimeout(frame_timeout)
            } else {
                Wait::NonBlocking
            };
            self.grab_frame(wait)?;
        }
        for msg in script {
            let started = Instant::now();
            self.send(msg)?;
            let is_pose = matches!(msg, ControlMessage::CameraPose(_) | ControlMessage::ObjectPose(_));
            if sync && is_pose {
                let snap = self
                    .grab_frame(Wait::BlockUntilNewTimeout(frame_timeout))?
                    .ok_or_else(|| ClientError::Protocol(format!("no frame within {frame_timeout:?} of a pose")))?;
                observed.push(ObservedFrame {
                    frame_index: snap.frame_index,
                    checksum: snap.content_checksum(),
                });
            }
            if let Some(rest) = interval.and_then(|i| i.checked_sub(started.elapsed())) {
                std::thread::sleep(rest);
            }
        }
        Ok(observed)
    }
}

/// Writes telemetry samples as CSV rows.
pub struct TelemetryRecorder<W: Write> {
    csv: csv::Writer<W>,
    rows: u64,
}

impl TelemetryRecorder<std::fs::File> {
    /// Starts appending to `file`; the header goes out only if it is empty.
    pub fn new(file: std::fs::File) -> io::Result<Self> {
        let empty = file.metadata()?.len() == 0;
        let mut csv = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        if empty {
            csv.write_record(["series", "t", "value"]).map_err(io::Error::other)?;
            csv.flush()?;
        }
        Ok(Self { csv, rows: 0 })
    }
}

impl<W: Write> TelemetryRecorder<W> {
    /// Starts a fresh CSV stream with a header.
    pub fn with_header(writer: W) -> io::Result<Self> {
        let mut csv = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
        csv.write_record(["series", "t", "value"]).map_err(io::Error::other)?;
        Ok(Self { csv, rows: 0 })
    }

    pub fn record(&mut self, msg: &TelemetryMsg) -> io::Result<()> {
        self.csv
            .write_record([msg.series.as_str(), &msg.t.to_string(), &msg.value.to_string()])
            .map_err(io::Error::other)?;
        self.rows += 1;
        Ok(())
    }

    pub fn rows(&self) -> u64 {
        self.rows
    }

    pub fn flush(&mut self) -> io::Result<()> {
        self.csv.flush()
    }
}

/// Reads a telemetry CSV written by [`TelemetryRecorder`].
pub fn read_telemetry_csv<R: io::Read>(reader: R) -> Result<Vec<TelemetryMsg>, csv::Error> {
    let mut rdr = csv::Reader::from_reader(reader);
    rdr.deserialize::<(String, f64, f64)>()
        .map(|row| row.map(|(series, t, value)| TelemetryMsg { series, t, value }))
        .collect()
}
