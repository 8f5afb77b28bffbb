use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::Duration;

use splatbus::client::{ClientError, ClientSession, ConnectOptions};
use splatbus::framebus::{TransportKind, Wait};
use splatbus::geometry::{Convention, Pose};
use splatbus::server::{Demo, DemoOptions, Server, ServerConfig};
use splatbus::wire::{self, ControlMessage, ErrorCode, Hello};

fn opts(server: &Server) -> ConnectOptions {
    ConnectOptions::for_addrs(server.init_addr(), server.message_addr())
}

#[test]
fn demo_frame_has_visible_pixels() {
    let demo = Demo::new(ServerConfig::ephemeral(64, 64, TransportKind::SharedMemory)).unwrap();
    let mut session = ClientSession::connect(&opts(demo.server())).unwrap();
    assert_eq!(session.init().width, 64);
    let stop = Arc::new(AtomicBool::new(false));
    let s = stop.clone();
    let runner = std::thread::spawn(move || {
        demo.run(&DemoOptions { max_frames: Some(5), ..Default::default() }, &s).unwrap()
    });
    let snap = session
        .grab_frame(Wait::BlockUntilNewTimeout(Duration::from_secs(5)))
        .unwrap()
        .unwrap();
    assert!(snap.color.pixels().iter().any(|p| p[3] > 0.0));
    assert_eq!(runner.join().unwrap().frames, 5);
}

#[test]
fn version_mismatch_is_reported_and_closed() {
    let server = Server::start(ServerConfig::ephemeral(8, 8, TransportKind::Inprocess)).unwrap();
    let mut stream = std::net::TcpStream::connect(server.init_addr()).unwrap();
    wire::write_message(
        &mut stream,
        &ControlMessage::Hello(Hello { protocol_version: 999, client_name: "old".into() }),
    )
    .unwrap();
    match wire::read_message(&mut stream).unwrap() {
        ControlMessage::Error(e) => assert_eq!(e.code, ErrorCode::VersionMismatch),
        other => panic!("unexpected {other:?}"),
    }
    assert!(matches!(wire::read_message(&mut stream), Err(wire::WireError::Closed) | Err(wire::WireError::Io(_))));
}

#[test]
fn client_beyond_limit_is_refused() {
    let config = ServerConfig { max_clients: 1, ..ServerConfig::ephemeral(8, 8, TransportKind::Inprocess) };
    let server = Server::start(config).unwrap();
    let _first = ClientSession::connect(&opts(&server)).unwrap();
    let err = ClientSession::connect(&opts(&server)).err().unwrap();
    assert!(matches!(err, ClientError::Rejected { code: ErrorCode::Unsupported, .. }), "{err}");
}

#[test]
fn latest_camera_pose_wins() {
    let mut server = Server::start(ServerConfig::ephemeral(8, 8, TransportKind::Inprocess)).unwrap();
    let session = ClientSession::connect(&opts(&server)).unwrap();
    for i in 0..100 {
        let pose = Pose::new([i as f64, 0.0, 0.0], [0.0, 0.0, 0.0, 1.0], Convention::GsRhYdown).unwrap();
        session.send_camera(&pose, None).unwrap();
    }
    let mut seen = 0;
    let mut last = None;
    for _ in 0..200 {
        let s = server.poll_messages();
        seen += s.camera_messages;
        if s.camera_applied {
            last = server.scene().camera_pose;
        }
        if seen == 100 {
            break;
        }
        std::thread::sleep(Duration::from_millis(10));
    }
    assert_eq!(seen, 100);
    assert_eq!(last.unwrap().position.x, 99.0);
}
