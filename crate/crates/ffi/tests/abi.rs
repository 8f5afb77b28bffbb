use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use splatbus_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(sb_last_error_message()) }
        .to_string_lossy()
        .into_owned()
}

fn start_server(width: u32, height: u32, transport: SbTransport) -> *mut SbServer {
    unsafe {
        let mut cfg = std::mem::zeroed::<SbServerConfig>();
        assert_eq!(sb_server_config_default(&mut cfg), SbStatus::Ok);
        cfg.width = width;
        cfg.height = height;
        cfg.init_port = 0;
        cfg.message_port = 0;
        cfg.transport = transport;
        let mut server = ptr::null_mut();
        assert_eq!(sb_server_start(&cfg, &mut server), SbStatus::Ok, "{}", last_error());
        server
    }
}

fn round_trip(transport: SbTransport) {
    let (w, h) = (8u32, 4u32);
    let n = (w * h) as usize;
    let server = start_server(w, h, transport);
    unsafe {
        let (mut ip, mut mp) = (0u16, 0u16);
        assert_eq!(sb_server_ports(server, &mut ip, &mut mp), SbStatus::Ok);
        let host = CString::new("127.0.0.1").unwrap();
        let mut client = ptr::null_mut();
        assert_eq!(sb_client_connect(host.as_ptr(), ip, mp, &mut client), SbStatus::Ok, "{}", last_error());

        let mut info = std::mem::zeroed::<SbFrameInfo>();
        assert_eq!(sb_client_info(client, &mut info), SbStatus::Ok);
        assert_eq!((info.width, info.height, info.transport), (w, h, transport));

        let color: Vec<f32> = (0..4 * n).map(|i| i as f32 / 256.0).collect();
        let invdepth: Vec<f32> = (0..n).map(|i| if i == 0 { 0.0 } else { 1.0 / (i as f32) }).collect();
        let mut index = 0u64;
        assert_eq!(sb_server_publish(server, color.as_ptr(), invdepth.as_ptr(), w, h, &mut index), SbStatus::Ok);
        assert_eq!(index, 1);

        let mut got_color = vec![0f32; 4 * n];
        let mut got_depth = vec![0f32; n];
        let (mut gi, mut ts) = (0u64, 0u64);
        let status = sb_client_grab(
            client, 2000, got_color.as_mut_ptr(), got_color.len(), got_depth.as_mut_ptr(), got_depth.len(), &mut gi, &mut ts,
        );
        assert_eq!(status, SbStatus::Ok, "{}", last_error());
        assert_eq!(gi, 1);
        assert!(ts > 0);
        assert_eq!(got_color, color);
        assert_eq!(got_depth[0], 1e10);
        for (i, z) in got_depth.iter().enumerate().skip(1) {
            assert_eq!(*z, 1.0 / (1.0 / i as f32), "pixel {i}");
        }

        // Nothing newer: a nonblocking grab reports no frame.
        let status = sb_client_grab(
            client, 0, got_color.as_mut_ptr(), got_color.len(), got_depth.as_mut_ptr(), got_depth.len(),
            ptr::null_mut(), ptr::null_mut(),
        );
        assert_eq!(status, SbStatus::NoFrame);

        let pos = [1.0, 2.0, 3.0];
        let rot = [0.0, 0.0, 0.0, 1.0];
        assert_eq!(sb_client_send_camera(client, pos.as_ptr(), rot.as_ptr(), SbConvention::GsRhYdown, 45.0), SbStatus::Ok);
        let mut summary = SbUpdateSummary::default();
        for _ in 0..200 {
            assert_eq!(sb_server_poll(server, &mut summary), SbStatus::Ok);
            if summary.camera_applied != 0 {
                break;
            }
            std::thread::sleep(std::time::Duration::from_millis(10));
        }
        assert_eq!(summary.camera_applied, 1);
        let mut cam = std::mem::zeroed::<SbCamera>();
        assert_eq!(sb_server_camera(server, &mut cam), SbStatus::Ok);
        assert!((cam.fov_y - 45f64.to_radians()).abs() < 1e-12);
        assert_eq!((cam.width, cam.height), (w, h));
        // Camera at (1, 2, 3) with identity rotation: translation is the negated position.
        assert_eq!([cam.world_to_camera[3], cam.world_to_camera[7], cam.world_to_camera[11]], [-1.0, -2.0, -3.0]);
        assert_eq!(cam.world_to_camera[15], 1.0);

        let id = CString::new("scene").unwrap();
        assert_eq!(
            sb_client_send_object(client, id.as_ptr(), pos.as_ptr(), rot.as_ptr(), SbConvention::UnityLhYup, 2.0),
            SbStatus::Ok
        );
        let series = CString::new("render_ms").unwrap();
        assert_eq!(sb_server_emit_telemetry(server, series.as_ptr(), 1.5), SbStatus::Ok);

        sb_client_free(client);
        sb_server_free(server);
    }
}

#[test]
fn frame_and_camera_round_trip_over_shared_memory() {
    round_trip(SbTransport::SharedMemory);
}

#[test]
fn frame_and_camera_round_trip_in_process() {
    round_trip(SbTransport::Inprocess);
}

#[test]
fn null_arguments_are_reported_not_dereferenced() {
    unsafe {
        assert_eq!(sb_server_config_default(ptr::null_mut()), SbStatus::InvalidArgument);
        assert!(last_error().contains("config"));
        let mut server = ptr::null_mut();
        assert_eq!(sb_server_start(ptr::null(), &mut server), SbStatus::InvalidArgument);
        assert_eq!(sb_server_poll(ptr::null_mut(), ptr::null_mut()), SbStatus::InvalidArgument);
        let mut client = ptr::null_mut();
        assert_eq!(sb_client_connect(ptr::null(), 1, 2, &mut client), SbStatus::InvalidArgument);
        assert!(client.is_null());
        assert_eq!(sb_invdepth_to_linear(ptr::null(), ptr::null_mut(), 0, 1e10), SbStatus::InvalidArgument);
        sb_server_free(ptr::null_mut());
        sb_client_free(ptr::null_mut());
    }
}

#[test]
fn failures_map_to_distinct_codes() {
    unsafe {
        let mut cfg = std::mem::zeroed::<SbServerConfig>();
        sb_server_config_default(&mut cfg);
        cfg.width = 0;
        let mut server = ptr::null_mut();
        assert_eq!(sb_server_start(&cfg, &mut server), SbStatus::Config);
        assert!(!last_error().is_empty());

        // Nothing listens on a port we just released.
        let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let host = CString::new("127.0.0.1").unwrap();
        let mut client = ptr::null_mut();
        assert_eq!(sb_client_connect(host.as_ptr(), port, port, &mut client), SbStatus::Network);

        let server = start_server(2, 2, SbTransport::Inprocess);
        let color = [0f32; 16];
        let bad_depth = [1.0f32, -1.0, 0.5, 0.25];
        assert_eq!(
            sb_server_publish(server, color.as_ptr(), bad_depth.as_ptr(), 2, 2, ptr::null_mut()),
            SbStatus::MalformedDepth
        );
        let depth = [1.0f32; 9];
        assert_eq!(
            sb_server_publish(server, color.as_ptr(), depth.as_ptr(), 3, 3, ptr::null_mut()),
            SbStatus::DimensionMismatch,
            "{}",
            last_error()
        );
        sb_server_free(server);
    }
}

#[test]
fn grab_rejects_short_buffers() {
    let server = start_server(4, 4, SbTransport::Inprocess);
    unsafe {
        let (mut ip, mut mp) = (0u16, 0u16);
        sb_server_ports(server, &mut ip, &mut mp);
        let host = CString::new("127.0.0.1").unwrap();
        let mut client = ptr::null_mut();
        assert_eq!(sb_client_connect(host.as_ptr(), ip, mp, &mut client), SbStatus::Ok);
        let mut color = vec![0f32; 63];
        let mut depth = vec![0f32; 16];
        let status = sb_client_grab(
            client, 0, color.as_mut_ptr(), color.len(), depth.as_mut_ptr(), depth.len(), ptr::null_mut(), ptr::null_mut(),
        );
        assert_eq!(status, SbStatus::InvalidArgument);
        assert!(last_error().contains("64"));
        sb_client_free(client);
    }
    unsafe { sb_server_free(server) };
}

#[test]
fn invdepth_conversion_matches_reciprocal_and_sentinel() {
    let input = [0.0f32, 1e-13, 0.5, 2.0, 1e-3];
    let mut out = [0f32; 5];
    unsafe {
        assert_eq!(sb_invdepth_to_linear(input.as_ptr(), out.as_mut_ptr(), 5, 1e10), SbStatus::Ok);
    }
    assert_eq!(out, [1e10, 1e10, 2.0, 0.5, 1.0 / 1e-3f32]);
    let bad = [f32::NAN];
    unsafe {
        assert_eq!(sb_invdepth_to_linear(bad.as_ptr(), out.as_mut_ptr(), 1, 1e10), SbStatus::MalformedDepth);
    }
}

#[test]
fn protocol_version_is_one() {
    assert_eq!(sb_protocol_version(), 1);
}

fn header_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include/splatbus.h")
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(header_path()).unwrap();
    for name in [
        "sb_protocol_version",
        "sb_last_error_message",
        "sb_server_config_default",
        "sb_server_start",
        "sb_server_ports",
        "sb_server_poll",
        "sb_server_camera",
        "sb_server_publish",
        "sb_server_emit_telemetry",
        "sb_server_free",
        "sb_client_connect",
        "sb_client_info",
        "sb_client_grab",
        "sb_client_send_camera",
        "sb_client_send_object",
        "sb_client_free",
        "sb_invdepth_to_linear",
        "typedef struct SbServer SbServer;",
        "typedef struct SbClient SbClient;",
        "SB_STATUS_OK = 0",
        "SB_STATUS_INTERNAL = 12",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}

const C_PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "splatbus.h"

int main(void) {
    SbServerConfig cfg;
    SbServer *server = NULL;
    SbClient *client = NULL;
    uint16_t ip = 0, mp = 0;
    float color[4 * 4 * 2], depth[4 * 2], inv[4 * 2], got_color[4 * 4 * 2], got_depth[4 * 2];
    uint64_t index = 0;
    int i;

    if (sb_protocol_version() != 1) return 10;
    if (sb_server_config_default(NULL) != SB_STATUS_INVALID_ARGUMENT) return 11;
    if (strlen(sb_last_error_message()) == 0) return 12;

    sb_server_config_default(&cfg);
    cfg.width = 4;
    cfg.height = 2;
    cfg.init_port = 0;
    cfg.message_port = 0;
    cfg.transport = SB_TRANSPORT_INPROCESS;
    if (sb_server_start(&cfg, &server) != SB_STATUS_OK) return 13;
    sb_server_ports(server, &ip, &mp);
    if (sb_client_connect("127.0.0.1", ip, mp, &client) != SB_STATUS_OK) return 14;

    for (i = 0; i < 32; i++) color[i] = (float)i;
    for (i = 0; i < 8; i++) inv[i] = 0.5f;
    if (sb_server_publish(server, color, inv, 4, 2, &index) != SB_STATUS_OK) return 15;
    if (sb_client_grab(client, 1000, got_color, 32, got_depth, 8, &index, NULL) != SB_STATUS_OK) return 16;
    if (memcmp(color, got_color, sizeof color) != 0) return 17;
    for (i = 0; i < 8; i++) if (got_depth[i] != 2.0f) return 18;
    (void)depth;

    sb_client_free(client);
    sb_server_free(server);
    printf("ok %llu\n", (unsigned long long)index);
    return 0;
}
"#;

/// Directory holding the built cdylib: the test binary lives in its `deps/`.
fn library_dir() -> PathBuf {
    std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn header_compiles_and_links_from_c() {
    let Ok(cc) = which_cc() else {
        eprintln!("skipping: no C compiler on PATH");
        return;
    };
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("c_abi");
    std::fs::create_dir_all(&dir).unwrap();
    let src = dir.join("main.c");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let include = header_path().parent().unwrap().to_path_buf();

    let status = Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Wextra", "-Werror", "-pedantic", "-c"])
        .arg("-I")
        .arg(&include)
        .arg(&src)
        .arg("-o")
        .arg(dir.join("main.o"))
        .status()
        .unwrap();
    assert!(status.success(), "header does not compile as C99");

    let lib_dir = library_dir();
    if !lib_dir.join("libsplatbus_ffi.so").exists() {
        eprintln!("skipping link step: no cdylib in {}", lib_dir.display());
        return;
    }
    let exe = dir.join("main");
    let status = Command::new(&cc)
        .arg(dir.join("main.o"))
        .arg("-L")
        .arg(&lib_dir)
        .args(["-lsplatbus_ffi", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "link against libsplatbus_ffi failed");
    let out = Command::new(&exe).env("LD_LIBRARY_PATH", &lib_dir).output().unwrap();
    assert!(out.status.success(), "C program exited with {:?}", out.status);
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok 1");
}

fn which_cc() -> Result<PathBuf, ()> {
    let cc = std::env::var_os("CC").unwrap_or_else(|| "cc".into());
    match Command::new(&cc).arg("--version").output() {
        Ok(o) if o.status.success() => Ok(PathBuf::from(cc)),
        _ => Err(()),
    }
}
