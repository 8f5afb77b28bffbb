//! Command-line entry point: the demo server, the headless client tools and
//! the web gateway.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use splatbus::bench::{self, BenchConfig, LatencyReport};
use splatbus::client::{self, ClientError, ClientSession, ConnectOptions};
use splatbus::export::{self, DEFAULT_DEPTH_VIS_MAX};
use splatbus::framebus::{TransportKind, Wait};
use splatbus::gateway::{self, GatewayConfig, WebEncoding};
use splatbus::geometry::{Convention, Pose, DEFAULT_FAR_SENTINEL, DEFAULT_FOV_Y_DEG};
use splatbus::server::{self, DemoOptions, ServerConfig, ServerError};
use splatbus::wire::{CameraPoseMsg, ControlMessage, ObjectPoseMsg};

#[derive(Parser)]
#[command(name = "splatbus", version, about = "Frame bus between a Gaussian-splat renderer and its viewers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the demo server around the CPU reference rasterizer.
    Serve(ServeArgs),
    /// Save frames (PNG or PPM) and depth (16-bit PGM).
    Grab(GrabArgs),
    /// Send a camera or object pose, from flags or a JSONL script.
    Pose(PoseArgs),
    /// Record server telemetry as CSV.
    Telemetry(TelemetryArgs),
    /// Measure publish-to-snapshot latency.
    Bench(BenchArgs),
    /// Relay frames to browsers over WebSocket.
    Gateway(GatewayArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Transport {
    #[value(name = "shared_memory", alias = "shared-memory")]
    SharedMemory,
    Inprocess,
}

impl From<Transport> for TransportKind {
    fn from(t: Transport) -> Self {
        match t {
            Transport::SharedMemory => TransportKind::SharedMemory,
            Transport::Inprocess => TransportKind::Inprocess,
        }
    }
}

#[derive(Args, Clone)]
struct ConnectArgs {
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = server::DEFAULT_INIT_PORT)]
    init_port: u16,
    #[arg(long, default_value_t = server::DEFAULT_MESSAGE_PORT)]
    msg_port: u16,
}

impl ConnectArgs {
    fn options(&self) -> ConnectOptions {
        ConnectOptions::new(self.host.clone(), self.init_port, self.msg_port)
    }
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value_t = 800)]
    width: u32,
    #[arg(long, default_value_t = 600)]
    height: u32,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = server::DEFAULT_INIT_PORT)]
    init_port: u16,
    #[arg(long, default_value_t = server::DEFAULT_MESSAGE_PORT)]
    msg_port: u16,
    /// Gaussian asset; the built-in three-Gaussian scene when absent.
    #[arg(long)]
    ply: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "shared_memory")]
    transport: Transport,
    /// Vertical field of view in degrees when clients send none.
    #[arg(long, default_value_t = DEFAULT_FOV_Y_DEG)]
    fov: f64,
    #[arg(long, default_value_t = DEFAULT_FAR_SENTINEL)]
    far_sentinel: f32,
    #[arg(long, default_value_t = 8)]
    max_clients: usize,
    /// Frame rate cap; 0 renders as fast as possible.
    #[arg(long, default_value_t = 60.0)]
    fps: f64,
    /// Exit after this many frames.
    #[arg(long)]
    max_frames: Option<u64>,
    /// Render only when a message changes the scene.
    #[arg(long)]
    on_demand: bool,
    /// Stamp per-frame checksums into the region header.
    #[arg(long)]
    checksum: bool,
    /// Shared-memory object name instead of a generated one.
    #[arg(long)]
    region_name: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ImageFormat {
    Png,
    Ppm,
}

#[derive(Args)]
struct GrabArgs {
    #[command(flatten)]
    connect: ConnectArgs,
    /// Number of distinct frames to save.
    #[arg(short = 'n', long, default_value_t = 1)]
    count: u32,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    #[arg(long, value_enum, default_value = "png")]
    format: ImageFormat,
    /// Depth mapped to the top of the 16-bit range.
    #[arg(long, default_value_t = DEFAULT_DEPTH_VIS_MAX)]
    depth_vis_max: f32,
    /// Seconds to wait for each frame.
    #[arg(long, default_value_t = 5.0)]
    timeout: f64,
}

#[derive(Args)]
struct PoseArgs {
    #[command(flatten)]
    connect: ConnectArgs,
    /// JSONL file with one message per line; replaces the pose flags.
    #[arg(long)]
    script: Option<PathBuf>,
    /// Script messages per second; 0 sends without pacing.
    #[arg(long, default_value_t = 30.0)]
    rate: f64,
    /// After each pose, wait for the next frame and print its index and checksum.
    #[arg(long)]
    sync: bool,
    /// Send an object pose for this id instead of a camera pose.
    #[arg(long)]
    object: Option<String>,
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    #[arg(long, num_args = 3, value_names = ["X", "Y", "Z"], allow_negative_numbers = true)]
    position: Option<Vec<f64>>,
    /// Quaternion as x y z w.
    #[arg(long, num_args = 4, value_names = ["X", "Y", "Z", "W"], allow_negative_numbers = true)]
    rotation: Option<Vec<f64>>,
    #[arg(long, default_value = "unity_lh_yup")]
    convention: Convention,
    #[arg(long)]
    fov: Option<f64>,
}

#[derive(Args)]
struct TelemetryArgs {
    #[command(flatten)]
    connect: ConnectArgs,
    #[arg(long, default_value = "telemetry.csv")]
    out: PathBuf,
    /// Seconds to record; until interrupted when absent.
    #[arg(long)]
    duration: Option<f64>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 256)]
    width: u32,
    #[arg(long, default_value_t = 256)]
    height: u32,
    #[arg(long, default_value_t = 500)]
    frames: usize,
    #[arg(long, value_enum, default_value = "shared_memory")]
    transport: Transport,
    /// Writer publish rate in Hz; 0 publishes back to back.
    #[arg(long, default_value_t = 500.0)]
    rate: f64,
    /// Measure against a running server instead of a local writer.
    #[arg(long)]
    remote: bool,
    #[command(flatten)]
    connect: ConnectArgs,
}

#[derive(Args)]
struct GatewayArgs {
    #[command(flatten)]
    connect: ConnectArgs,
    #[arg(long, default_value = "127.0.0.1:8080")]
    listen: SocketAddr,
    #[arg(long, default_value_t = 30.0)]
    fps_cap: f64,
    #[arg(long, default_value = "png")]
    encoding: WebEncoding,
    /// Append an 8-bit depth preview to every frame.
    #[arg(long)]
    depth_preview: bool,
    #[arg(long, default_value_t = DEFAULT_DEPTH_VIS_MAX)]
    depth_vis_max: f32,
}

/// A command failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<ServerError> for Failure {
    fn from(e: ServerError) -> Self {
        Self {
            code: e.exit_code() as u8,
            message: e.to_string(),
        }
    }
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        Self {
            code: e.exit_code() as u8,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::runtime(e.to_string())
    }
}

fn stop_flag() -> Arc<AtomicBool> {
    let stop = Arc::new(AtomicBool::new(false));
    let s = stop.clone();
    if let Err(e) = ctrlc::set_handler(move || s.store(true, Ordering::SeqCst)) {
        log::warn!("cannot install the interrupt handler: {e}");
    }
    stop
}

fn serve(args: ServeArgs) -> Result<(), Failure> {
    let config = ServerConfig {
        width: args.width,
        height: args.height,
        host: args.host,
        init_port: args.init_port,
        message_port: args.msg_port,
        transport: args.transport.into(),
        far_sentinel: args.far_sentinel,
        default_fov_y_deg: args.fov,
        max_clients: args.max_clients,
        asset_path: args.ply,
        region_name: args.region_name,
        stamp_checksums: args.checksum,
        ..ServerConfig::default()
    };
    let options = DemoOptions {
        target_fps: args.fps,
        max_frames: args.max_frames,
        on_demand: args.on_demand,
    };
    if !(options.target_fps >= 0.0) {
        return Err(Failure::config(format!("--fps {} must not be negative", options.target_fps)));
    }
    let stop = stop_flag();
    let demo = server::Demo::new(config)?;
    println!(
        "serving {}x{} on init {} / messages {}",
        args.width,
        args.height,
        demo.server().init_addr(),
        demo.server().message_addr()
    );
    let report = demo.run(&options, &stop)?;
    println!("published {} frames, rejected {} messages", report.frames, report.rejected);
    Ok(())
}

fn grab(args: GrabArgs) -> Result<(), Failure> {
    if !(args.depth_vis_max > 0.0) {
        return Err(Failure::config("--depth-vis-max must be positive"));
    }
    let timeout = Duration::from_secs_f64(args.timeout);
    let mut session = ClientSession::connect(&args.connect.options())?;
    std::fs::create_dir_all(&args.out_dir)?;
    let mut wait = Wait::NonBlocking;
    for _ in 0..args.count {
        let snap = match session.grab_frame(wait)? {
            Some(s) => s,
            None => session
                .grab_frame(Wait::BlockUntilNewTimeout(timeout))?
                .ok_or_else(|| Failure::runtime(format!("no frame within {timeout:?}")))?,
        };
        wait = Wait::BlockUntilNewTimeout(timeout);
        let rgba = export::tonemap_to_rgba8(&snap.color, [0.0; 3]);
        let stem = format!("frame_{:06}", snap.frame_index);
        let color_path = match args.format {
            ImageFormat::Png => {
                let p = args.out_dir.join(format!("{stem}.png"));
                export::write_png(BufWriter::new(File::create(&p)?), &rgba)?;
                p
            }
            ImageFormat::Ppm => {
                let p = args.out_dir.join(format!("{stem}.ppm"));
                export::write_ppm(BufWriter::new(File::create(&p)?), &rgba)?;
                p
            }
        };
        let depth_path = args.out_dir.join(format!("{stem}_depth.pgm"));
        export::write_pgm16(BufWriter::new(File::create(&depth_path)?), &snap.depth, args.depth_vis_max)?;
        println!(
            "{} {:016x} {} {}",
            snap.frame_index,
            snap.content_checksum(),
            color_path.display(),
            depth_path.display()
        );
    }
    Ok(())
}

fn pose(args: PoseArgs) -> Result<(), Failure> {
    let script = match &args.script {
        Some(path) => client::read_pose_script(BufReader::new(File::open(path)?))?,
        None => {
            let position: [f64; 3] = args
                .position
                .clone()
                .unwrap_or(vec![0.0; 3])
                .try_into()
                .map_err(|_| Failure::config("--position takes three values"))?;
            let rotation: [f64; 4] = args
                .rotation
                .clone()
                .unwrap_or(vec![0.0, 0.0, 0.0, 1.0])
                .try_into()
                .map_err(|_| Failure::config("--rotation takes four values"))?;
            let pose = Pose::new(position, rotation, args.convention).map_err(|e| Failure::config(e.to_string()))?;
            let msg = match &args.object {
                Some(id) => ControlMessage::ObjectPose(ObjectPoseMsg {
                    object_id: id.clone(),
                    position: pose.position_array(),
                    rotation: pose.rotation_xyzw(),
                    scale: args.scale,
                    convention: args.convention,
                }),
                None => ControlMessage::CameraPose(CameraPoseMsg {
                    position: pose.position_array(),
                    rotation: pose.rotation_xyzw(),
                    convention: args.convention,
                    fov_y_deg: args.fov,
                }),
            };
            msg.validate().map_err(Failure::config)?;
            vec![msg]
        }
    };
    let mut session = ClientSession::connect(&args.connect.options())?;
    let frames = session.replay(&script, args.rate, args.sync, Duration::from_secs(5))?;
    for f in frames {
        println!("{} {:016x}", f.frame_index, f.checksum);
    }
    // Give the kernel a moment to deliver the last message before closing.
    std::thread::sleep(Duration::from_millis(50));
    Ok(())
}

fn telemetry(args: TelemetryArgs) -> Result<(), Failure> {
    let stop = stop_flag();
    let session = ClientSession::connect(&args.connect.options())?;
    let rows = session.record_telemetry(&args.out, args.duration.map(Duration::from_secs_f64), &stop)?;
    println!("recorded {rows} samples to {}", args.out.display());
    Ok(())
}

fn print_report(label: &str, report: &LatencyReport) {
    println!("{label}: {report}");
    println!("median_ms {:.3}", report.median_ms());
}

fn bench_cmd(args: BenchArgs) -> Result<(), Failure> {
    if args.remote {
        let session = ClientSession::connect(&args.connect.options())?;
        let mut reader = session.into_parts().reader;
        let samples = bench::sample_reader(&mut reader, args.frames, Duration::from_secs(5))
            .map_err(|e| Failure::runtime(e.to_string()))?;
        let report = LatencyReport::from_samples(samples).ok_or_else(|| Failure::runtime("no frames received"))?;
        print_report("remote publish->snapshot", &report);
        return Ok(());
    }
    let config = BenchConfig {
        width: args.width,
        height: args.height,
        transport: args.transport.into(),
        frames: args.frames,
        rate_hz: args.rate,
    };
    let report = bench::run_local(&config).map_err(|e| Failure::runtime(e.to_string()))?;
    let transport: TransportKind = args.transport.into();
    print_report(&format!("{transport} {}x{} publish->snapshot", args.width, args.height), &report);
    Ok(())
}

fn gateway_cmd(args: GatewayArgs) -> Result<(), Failure> {
    let mut config = GatewayConfig::new(args.listen, args.connect.options());
    config.target_fps_cap = args.fps_cap;
    config.encoding = args.encoding;
    config.depth_preview = args.depth_preview;
    config.depth_vis_max = args.depth_vis_max;
    let stop = stop_flag();
    let handle = gateway::serve_web(config).map_err(|e| match e {
        gateway::GatewayError::Config(m) => Failure::config(m),
        other => Failure::runtime(other.to_string()),
    })?;
    println!("gateway listening on ws://{}/ws", handle.addr());
    handle.wait(&stop);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SPLATBUS_LOG", "info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Serve(a) => serve(a),
        Command::Grab(a) => grab(a),
        Command::Pose(a) => pose(a),
        Command::Telemetry(a) => telemetry(a),
        Command::Bench(a) => bench_cmd(a),
        Command::Gateway(a) => gateway_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("splatbus: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
