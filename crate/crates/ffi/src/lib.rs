//! C ABI for embedding the frame bus server in a renderer and for native
//! viewers.
//!
//! Handles are opaque pointers created by `*_start` / `*_connect` and
//! released with the matching `*_free`. Every fallible call returns an
//! [`SbStatus`]; on failure [`sb_last_error_message`] describes the error on
//! the calling thread. No call panics across the boundary.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::time::Duration;

use splatbus::client::{ClientError, ClientSession, ConnectOptions};
use splatbus::framebus::{FrameBusError, TransportKind, Wait};
use splatbus::geometry::{self, Convention, Pose};
use splatbus::image::{ColorImage, DepthImage};
use splatbus::server::{Server, ServerConfig, ServerError};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SbStatus {
    Ok = 0,
    /// A null pointer, bad length or out-of-range value was passed.
    InvalidArgument = 1,
    /// The server configuration was rejected.
    Config = 2,
    /// The scene asset could not be loaded.
    Asset = 3,
    /// A socket could not be bound, connected, read or written.
    Network = 4,
    /// The peer speaks another protocol version.
    VersionMismatch = 5,
    /// The peer sent something unexpected or refused the connection.
    Protocol = 6,
    /// The frame region could not be created or attached.
    Region = 7,
    /// Image dimensions do not match the frame region.
    DimensionMismatch = 8,
    /// The other end has gone away.
    Disconnected = 9,
    /// No new frame was available in time.
    NoFrame = 10,
    /// A depth value was negative or not finite.
    MalformedDepth = 11,
    /// An unexpected internal failure.
    Internal = 12,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SbTransport {
    SharedMemory = 0,
    Inprocess = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SbConvention {
    /// Left-handed, +Y up, +Z forward.
    UnityLhYup = 0,
    /// Right-handed, +Y down, +Z forward.
    GsRhYdown = 1,
}

impl From<SbConvention> for Convention {
    fn from(c: SbConvention) -> Self {
        match c {
            SbConvention::UnityLhYup => Convention::UnityLhYup,
            SbConvention::GsRhYdown => Convention::GsRhYdown,
        }
    }
}

impl From<TransportKind> for SbTransport {
    fn from(t: TransportKind) -> Self {
        match t {
            TransportKind::SharedMemory => SbTransport::SharedMemory,
            TransportKind::Inprocess => SbTransport::Inprocess,
        }
    }
}

/// Server settings. Fill with [`sb_server_config_default`] first.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SbServerConfig {
    pub width: u32,
    pub height: u32,
    /// 0 picks an ephemeral port; query it with [`sb_server_ports`].
    pub init_port: u16,
    pub message_port: u16,
    pub transport: SbTransport,
    pub far_sentinel: f32,
    pub default_fov_y_deg: f64,
    pub max_clients: u32,
    /// Nonzero stamps per-frame checksums into the region header.
    pub stamp_checksums: u8,
}

/// What one [`sb_server_poll`] call applied.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct SbUpdateSummary {
    pub camera_messages: u32,
    /// Nonzero when a new camera pose was applied.
    pub camera_applied: u8,
    pub object_messages: u32,
    pub rejected: u32,
}

/// The renderer camera. `world_to_camera` is row-major.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SbCamera {
    pub world_to_camera: [f64; 16],
    pub fov_y: f64,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SbFrameInfo {
    pub width: u32,
    pub height: u32,
    pub transport: SbTransport,
}

/// Opaque server handle.
pub struct SbServer {
    inner: Server,
}

/// Opaque client handle.
pub struct SbClient {
    inner: ClientSession,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: impl Into<String>) {
    let text = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).expect("nul bytes were replaced"));
}

fn fail(status: SbStatus, message: impl Into<String>) -> SbStatus {
    set_error(message);
    status
}

/// Runs `f`, turning panics into [`SbStatus::Internal`].
fn guard(f: impl FnOnce() -> SbStatus) -> SbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => fail(SbStatus::Internal, "internal panic"),
    }
}

fn frame_status(e: &FrameBusError) -> SbStatus {
    match e {
        FrameBusError::DimensionMismatch { .. } => SbStatus::DimensionMismatch,
        FrameBusError::Disconnected | FrameBusError::Stale(_) => SbStatus::Disconnected,
        FrameBusError::InvalidDescriptor(_) => SbStatus::Config,
        _ => SbStatus::Region,
    }
}

fn server_status(e: &ServerError) -> SbStatus {
    match e {
        ServerError::Config(_) => SbStatus::Config,
        ServerError::Bind { .. } => SbStatus::Network,
        ServerError::Asset { .. } => SbStatus::Asset,
        ServerError::Frame(f) => frame_status(f),
        ServerError::Depth(_) => SbStatus::MalformedDepth,
        ServerError::Render(_) | ServerError::Wire(_) => SbStatus::InvalidArgument,
    }
}

fn client_status(e: &ClientError) -> SbStatus {
    match e {
        ClientError::Network { .. } | ClientError::Io(_) => SbStatus::Network,
        ClientError::VersionMismatch(_) => SbStatus::VersionMismatch,
        ClientError::Rejected { .. } | ClientError::Protocol(_) => SbStatus::Protocol,
        ClientError::Attach(f) => frame_status(f),
        ClientError::Invalid(_) => SbStatus::InvalidArgument,
        ClientError::Disconnected => SbStatus::Disconnected,
    }
}

macro_rules! not_null {
    ($($p:ident),+) => {
        $(if $p.is_null() {
            return fail(SbStatus::InvalidArgument, concat!("`", stringify!($p), "` is null"));
        })+
    };
}

/// Protocol version spoken by this library.
#[no_mangle]
pub extern "C" fn sb_protocol_version() -> u32 {
    splatbus::wire::PROTOCOL_VERSION
}

/// Description of the last error on this thread. Valid until the next call
/// into the library from the same thread; empty if nothing failed yet.
#[no_mangle]
pub extern "C" fn sb_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Writes the default configuration (800x600, ports 7420/7421, shared
/// memory, 60 degree fov).
#[no_mangle]
pub unsafe extern "C" fn sb_server_config_default(config: *mut SbServerConfig) -> SbStatus {
    not_null!(config);
    let d = ServerConfig::default();
    config.write(SbServerConfig {
        width: d.width,
        height: d.height,
        init_port: d.init_port,
        message_port: d.message_port,
        transport: d.transport.into(),
        far_sentinel: d.far_sentinel,
        default_fov_y_deg: d.default_fov_y_deg,
        max_clients: d.max_clients as u32,
        stamp_checksums: 0,
    });
    SbStatus::Ok
}

/// Creates the frame region and starts listening. On success `*out` owns a
/// server to be released with [`sb_server_free`].
#[no_mangle]
pub unsafe extern "C" fn sb_server_start(config: *const SbServerConfig, out: *mut *mut SbServer) -> SbStatus {
    not_null!(config, out);
    guard(|| {
        let c = &*config;
        let transport = match c.transport {
            SbTransport::SharedMemory => TransportKind::SharedMemory,
            SbTransport::Inprocess => TransportKind::Inprocess,
        };
        let cfg = ServerConfig {
            width: c.width,
            height: c.height,
            init_port: c.init_port,
            message_port: c.message_port,
            transport,
            far_sentinel: c.far_sentinel,
            default_fov_y_deg: c.default_fov_y_deg,
            max_clients: c.max_clients as usize,
            stamp_checksums: c.stamp_checksums != 0,
            ..ServerConfig::default()
        };
        match Server::start(cfg) {
            Ok(inner) => {
                out.write(Box::into_raw(Box::new(SbServer { inner })));
                SbStatus::Ok
            }
            Err(e) => fail(server_status(&e), e.to_string()),
        }
    })
}

/// Ports the server actually listens on.
#[no_mangle]
pub unsafe extern "C" fn sb_server_ports(server: *const SbServer, init_port: *mut u16, message_port: *mut u16) -> SbStatus {
    not_null!(server, init_port, message_port);
    let s = &(*server).inner;
    init_port.write(s.init_addr().port());
    message_port.write(s.message_addr().port());
    SbStatus::Ok
}

/// Applies pending client messages. Call once per frame from the render
/// loop. `summary` may be null.
#[no_mangle]
pub unsafe extern "C" fn sb_server_poll(server: *mut SbServer, summary: *mut SbUpdateSummary) -> SbStatus {
    not_null!(server);
    guard(|| {
        let s = (*server).inner.poll_messages();
        if !summary.is_null() {
            summary.write(SbUpdateSummary {
                camera_messages: s.camera_messages as u32,
                camera_applied: s.camera_applied as u8,
                object_messages: s.object_messages as u32,
                rejected: s.rejected as u32,
            });
        }
        SbStatus::Ok
    })
}

/// The camera to render with, after the last poll.
#[no_mangle]
pub unsafe extern "C" fn sb_server_camera(server: *const SbServer, camera: *mut SbCamera) -> SbStatus {
    not_null!(server, camera);
    let view = (*server).inner.scene().camera;
    let intr = view.intrinsics();
    let mut m = [0.0; 16];
    for r in 0..4 {
        for c in 0..4 {
            m[r * 4 + c] = view.world_to_camera[(r, c)];
        }
    }
    camera.write(SbCamera {
        world_to_camera: m,
        fov_y: view.fov_y,
        fx: intr.fx,
        fy: intr.fy,
        cx: intr.cx,
        cy: intr.cy,
        width: view.width,
        height: view.height,
    });
    SbStatus::Ok
}

/// Publishes a frame. `color` holds `width * height` premultiplied RGBA
/// float pixels, row-major without padding; `invdepth` holds `width *
/// height` inverse depths (0 for background). `frame_index` may be null.
#[no_mangle]
pub unsafe extern "C" fn sb_server_publish(
    server: *mut SbServer,
    color: *const f32,
    invdepth: *const f32,
    width: u32,
    height: u32,
    frame_index: *mut u64,
) -> SbStatus {
    not_null!(server, color, invdepth);
    guard(|| {
        let n = width as usize * height as usize;
        let color = std::slice::from_raw_parts(color as *const [f32; 4], n).to_vec();
        let inv = std::slice::from_raw_parts(invdepth, n).to_vec();
        let (Ok(color), Ok(inv)) = (
            ColorImage::from_pixels(width, height, color),
            DepthImage::from_pixels(width, height, inv),
        ) else {
            return fail(SbStatus::InvalidArgument, "image buffers do not match the dimensions");
        };
        match (*server).inner.publish(&color, &inv) {
            Ok(f) => {
                if !frame_index.is_null() {
                    frame_index.write(f.frame_index);
                }
                SbStatus::Ok
            }
            Err(e) => fail(server_status(&e), e.to_string()),
        }
    })
}

/// Sends a telemetry sample to connected clients.
#[no_mangle]
pub unsafe extern "C" fn sb_server_emit_telemetry(server: *const SbServer, series: *const c_char, value: f64) -> SbStatus {
    not_null!(server, series);
    guard(|| {
        let Ok(series) = CStr::from_ptr(series).to_str() else {
            return fail(SbStatus::InvalidArgument, "series name is not UTF-8");
        };
        match (*server).inner.emit_telemetry(series, value) {
            Ok(()) => SbStatus::Ok,
            Err(e) => fail(SbStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Disconnects clients, tears the region down and frees the handle. Null
/// is ignored.
#[no_mangle]
pub unsafe extern "C" fn sb_server_free(server: *mut SbServer) {
    if !server.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(server))));
    }
}

/// Performs the handshake, attaches the frame region and opens the message
/// channel. On success `*out` owns a client to be released with
/// [`sb_client_free`].
#[no_mangle]
pub unsafe extern "C" fn sb_client_connect(
    host: *const c_char,
    init_port: u16,
    message_port: u16,
    out: *mut *mut SbClient,
) -> SbStatus {
    not_null!(host, out);
    guard(|| {
        let Ok(host) = CStr::from_ptr(host).to_str() else {
            return fail(SbStatus::InvalidArgument, "host is not UTF-8");
        };
        match ClientSession::connect(&ConnectOptions::new(host, init_port, message_port)) {
            Ok(inner) => {
                out.write(Box::into_raw(Box::new(SbClient { inner })));
                SbStatus::Ok
            }
            Err(e) => fail(client_status(&e), e.to_string()),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn sb_client_info(client: *const SbClient, info: *mut SbFrameInfo) -> SbStatus {
    not_null!(client, info);
    let init = (*client).inner.init();
    info.write(SbFrameInfo {
        width: init.width,
        height: init.height,
        transport: init.transport.into(),
    });
    SbStatus::Ok
}

/// Copies the newest frame into caller buffers of `color_len` floats (at
/// least `4 * width * height`) and `depth_len` floats (at least `width *
/// height`, linear depth). `wait_ms` 0 returns at once, a positive value
/// waits that long for a frame newer than the last one returned. Returns
/// [`SbStatus::NoFrame`] when none arrived. `frame_index` and
/// `timestamp_ns` may be null.
#[no_mangle]
pub unsafe extern "C" fn sb_client_grab(
    client: *mut SbClient,
    wait_ms: u32,
    color: *mut f32,
    color_len: usize,
    depth: *mut f32,
    depth_len: usize,
    frame_index: *mut u64,
    timestamp_ns: *mut u64,
) -> SbStatus {
    not_null!(client, color, depth);
    guard(|| {
        let session = &mut (*client).inner;
        let n = session.init().width as usize * session.init().height as usize;
        if color_len < 4 * n || depth_len < n {
            return fail(
                SbStatus::InvalidArgument,
                format!("buffers hold {color_len} and {depth_len} floats, frame needs {} and {n}", 4 * n),
            );
        }
        let wait = if wait_ms == 0 {
            Wait::NonBlocking
        } else {
            Wait::BlockUntilNewTimeout(Duration::from_millis(wait_ms.into()))
        };
        match session.grab_frame(wait) {
            Ok(Some(snap)) => {
                ptr::copy_nonoverlapping(snap.color.pixels().as_flattened().as_ptr(), color, 4 * n);
                ptr::copy_nonoverlapping(snap.depth.pixels().as_ptr(), depth, n);
                if !frame_index.is_null() {
                    frame_index.write(snap.frame_index);
                }
                if !timestamp_ns.is_null() {
                    timestamp_ns.write(snap.timestamp_ns);
                }
                SbStatus::Ok
            }
            Ok(None) => fail(SbStatus::NoFrame, "no new frame"),
            Err(e) => fail(client_status(&e), e.to_string()),
        }
    })
}

unsafe fn read_pose(position: *const f64, rotation: *const f64, convention: SbConvention) -> Result<Pose, SbStatus> {
    let p = std::slice::from_raw_parts(position, 3);
    let q = std::slice::from_raw_parts(rotation, 4);
    Pose::new([p[0], p[1], p[2]], [q[0], q[1], q[2], q[3]], convention.into())
        .map_err(|e| fail(SbStatus::InvalidArgument, e.to_string()))
}

/// Sends a camera pose. `position` points to 3 doubles, `rotation` to an
/// (x, y, z, w) quaternion. A non-positive `fov_y_deg` leaves the field of
/// view to the server default.
#[no_mangle]
pub unsafe extern "C" fn sb_client_send_camera(
    client: *const SbClient,
    position: *const f64,
    rotation: *const f64,
    convention: SbConvention,
    fov_y_deg: f64,
) -> SbStatus {
    not_null!(client, position, rotation);
    guard(|| {
        let pose = match read_pose(position, rotation, convention) {
            Ok(p) => p,
            Err(s) => return s,
        };
        let fov = (fov_y_deg > 0.0).then_some(fov_y_deg);
        match (*client).inner.send_camera(&pose, fov) {
            Ok(()) => SbStatus::Ok,
            Err(e) => fail(client_status(&e), e.to_string()),
        }
    })
}

/// Sends an object pose with a uniform scale.
#[no_mangle]
pub unsafe extern "C" fn sb_client_send_object(
    client: *const SbClient,
    object_id: *const c_char,
    position: *const f64,
    rotation: *const f64,
    convention: SbConvention,
    scale: f64,
) -> SbStatus {
    not_null!(client, object_id, position, rotation);
    guard(|| {
        let Ok(id) = CStr::from_ptr(object_id).to_str() else {
            return fail(SbStatus::InvalidArgument, "object id is not UTF-8");
        };
        let pose = match read_pose(position, rotation, convention) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match (*client).inner.send_object(id, &pose, scale) {
            Ok(()) => SbStatus::Ok,
            Err(e) => fail(client_status(&e), e.to_string()),
        }
    })
}

/// Closes the session and frees the handle. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn sb_client_free(client: *mut SbClient) {
    if !client.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(client))));
    }
}

/// Converts `count` inverse depths to linear depth; values at or below
/// 1e-12 become `far_sentinel`. `input` and `output` may alias.
#[no_mangle]
pub unsafe extern "C" fn sb_invdepth_to_linear(
    input: *const f32,
    output: *mut f32,
    count: usize,
    far_sentinel: f32,
) -> SbStatus {
    not_null!(input, output);
    guard(|| {
        let values = std::slice::from_raw_parts(input, count).to_vec();
        let Ok(img) = DepthImage::from_pixels(count as u32, 1, values) else {
            return fail(SbStatus::InvalidArgument, "count is too large");
        };
        match geometry::invdepth_to_linear(&img, far_sentinel) {
            Ok(z) => {
                ptr::copy_nonoverlapping(z.pixels().as_ptr(), output, count);
                SbStatus::Ok
            }
            Err(e) => fail(SbStatus::MalformedDepth, e.to_string()),
        }
    })
}
