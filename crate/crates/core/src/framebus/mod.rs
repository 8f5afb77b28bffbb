//! Single-writer, multi-reader frame region.
//!
//! The writer brackets every publication with two increments of a sequence
//! counter (odd while writing, even when stable). Readers copy the planes
//! and accept the copy only if the counter was even and unchanged across it,
//! so a returned [`FrameSnapshot`] is always exactly one published frame.
//! Only the latest frame is kept; a slow reader skips frames.

mod layout;
mod notify;
mod transport;

use std::sync::atomic::{fence, AtomicU32, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

pub use layout::*;
pub use transport::{inprocess_region_count, TransportBackend, TransportKind};

use crate::image::{frame_checksum, ColorImage, DepthImage};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FrameBusError {
    #[error("invalid frame descriptor: {0}")]
    InvalidDescriptor(String),
    #[error("region {0:?} already exists")]
    AlreadyExists(String),
    #[error("cannot allocate frame region: {0}")]
    Resource(String),
    #[error("cannot attach frame region: {0}")]
    Attach(String),
    #[error("stale attachment token: {0}")]
    Stale(String),
    #[error("incompatible region layout: {0}")]
    IncompatibleLayout(String),
    #[error("frame is {actual_width}x{actual_height}, region expects {expected_width}x{expected_height}")]
    DimensionMismatch {
        expected_width: u32,
        expected_height: u32,
        actual_width: u32,
        actual_height: u32,
    },
    #[error("frame index {got} does not follow {last}")]
    NonMonotonicFrameIndex { last: u64, got: u64 },
    #[error("frame writer disconnected")]
    Disconnected,
}

/// Nanoseconds on the system-wide monotonic clock; comparable across
/// processes on the same host.
pub fn monotonic_ns() -> u64 {
    #[cfg(unix)]
    {
        let mut ts = libc::timespec {
            tv_sec: 0,
            tv_nsec: 0,
        };
        // SAFETY: ts is a valid out-pointer.
        unsafe { libc::clock_gettime(libc::CLOCK_MONOTONIC, &mut ts) };
        ts.tv_sec as u64 * 1_000_000_000 + ts.tv_nsec as u64
    }
    #[cfg(not(unix))]
    {
        static START: std::sync::OnceLock<Instant> = std::sync::OnceLock::new();
        START.get_or_init(Instant::now).elapsed().as_nanos() as u64
    }
}

/// Typed atomic views into a mapped region.
#[derive(Clone)]
struct Region {
    backend: Arc<dyn TransportBackend>,
}

impl Region {
    fn u64_at(&self, off: usize) -> &AtomicU64 {
        assert!(off.is_multiple_of(8) && off + 8 <= self.backend.len());
        // SAFETY: in bounds, aligned, and the backend outlives the borrow.
        unsafe { &*(self.backend.as_ptr().add(off) as *const AtomicU64) }
    }

    fn u32_at(&self, off: usize) -> &AtomicU32 {
        assert!(off.is_multiple_of(4) && off + 4 <= self.backend.len());
        // SAFETY: as above.
        unsafe { &*(self.backend.as_ptr().add(off) as *const AtomicU32) }
    }

    fn words(&self, off: usize, count: usize) -> &[AtomicU32] {
        assert!(off.is_multiple_of(4) && off + count * 4 <= self.backend.len());
        // SAFETY: as above.
        unsafe { std::slice::from_raw_parts(self.backend.as_ptr().add(off) as *const AtomicU32, count) }
    }

    fn load64(&self, off: usize) -> u64 {
        u64::from_le(self.u64_at(off).load(Ordering::Relaxed))
    }

    fn load32(&self, off: usize) -> u32 {
        u32::from_le(self.u32_at(off).load(Ordering::Relaxed))
    }

    fn store64(&self, off: usize, v: u64) {
        self.u64_at(off).store(v.to_le(), Ordering::Relaxed)
    }

    fn store32(&self, off: usize, v: u32) {
        self.u32_at(off).store(v.to_le(), Ordering::Relaxed)
    }

    fn seq(&self) -> &AtomicU64 {
        self.u64_at(OFF_SEQ)
    }

    fn notify(&self) -> &AtomicU32 {
        self.u32_at(OFF_NOTIFY)
    }

    fn descriptor(&self) -> Result<FrameDescriptor, FrameBusError> {
        let incompatible = |m: String| FrameBusError::IncompatibleLayout(m);
        if self.load32(OFF_COLOR_FORMAT) != ColorFormat::Rgba32f.code()
            || self.load32(OFF_DEPTH_FORMAT) != DepthFormat::R32f.code()
        {
            return Err(incompatible("unknown pixel format code".into()));
        }
        let desc = FrameDescriptor {
            width: self.load32(OFF_WIDTH),
            height: self.load32(OFF_HEIGHT),
            color_format: ColorFormat::Rgba32f,
            depth_format: DepthFormat::R32f,
            color_pitch: self.load32(OFF_COLOR_PITCH),
            depth_pitch: self.load32(OFF_DEPTH_PITCH),
        };
        desc.validate().map_err(|e| incompatible(e.to_string()))?;
        if self.load64(OFF_COLOR_OFFSET) != desc.color_offset() as u64
            || self.load64(OFF_DEPTH_OFFSET) != desc.depth_offset() as u64
            || self.load64(OFF_TOTAL_SIZE) != desc.region_bytes() as u64
            || desc.region_bytes() > self.backend.len()
        {
            return Err(incompatible("plane offsets disagree with the descriptor".into()));
        }
        Ok(desc)
    }
}

/// Options for [`create_region`].
#[derive(Debug, Clone, Default)]
pub struct RegionOptions {
    /// Explicit region name; a unique one is generated when absent.
    pub name: Option<String>,
    /// Stamp each frame's checksum into the header. Off means the field
    /// stays zero.
    pub stamp_checksums: bool,
}

fn generated_name(attempt: u32) -> String {
    use std::sync::atomic::AtomicU32;
    static COUNTER: AtomicU32 = AtomicU32::new(0);
    let n = COUNTER.fetch_add(1, Ordering::Relaxed);
    format!(
        "splatbus-{}-{}-{:x}",
        std::process::id(),
        n,
        (monotonic_ns() ^ attempt as u64) & 0xffff_ffff
    )
}

/// Creates and initializes a frame region. Returns the writer and the
/// attachment token readers need.
pub fn create_region(
    desc: FrameDescriptor,
    transport: TransportKind,
    options: RegionOptions,
) -> Result<(FrameWriter, String), FrameBusError> {
    desc.validate()?;
    let total = desc.region_bytes();
    let backend = match &options.name {
        Some(name) => transport::create(transport, name, total)?,
        None => {
            let mut attempt = 0;
            loop {
                match transport::create(transport, &generated_name(attempt), total) {
                    Err(FrameBusError::AlreadyExists(_)) if attempt < 16 => attempt += 1,
                    other => break other?,
                }
            }
        }
    };
    let region = Region { backend };
    region.store64(OFF_MAGIC, u64::from_le_bytes(MAGIC));
    region.store32(OFF_LAYOUT_VERSION, LAYOUT_VERSION);
    region.store32(OFF_HEADER_SIZE, HEADER_SIZE as u32);
    region.store64(OFF_FRAME_INDEX, 0);
    region.store64(OFF_TIMESTAMP_NS, 0);
    region.store64(OFF_CHECKSUM, 0);
    region.store32(OFF_WIDTH, desc.width);
    region.store32(OFF_HEIGHT, desc.height);
    region.store32(OFF_COLOR_FORMAT, desc.color_format.code());
    region.store32(OFF_DEPTH_FORMAT, desc.depth_format.code());
    region.store32(OFF_COLOR_PITCH, desc.color_pitch);
    region.store32(OFF_DEPTH_PITCH, desc.depth_pitch);
    region.store64(OFF_COLOR_OFFSET, desc.color_offset() as u64);
    region.store64(OFF_DEPTH_OFFSET, desc.depth_offset() as u64);
    region.store64(OFF_TOTAL_SIZE, total as u64);
    region.store32(OFF_WRITER_PID, std::process::id());
    region.store32(OFF_FLAGS, 0);
    region.seq().store(0, Ordering::Release);

    let token = TokenInfo {
        name: region.backend.name().to_owned(),
        layout_version: LAYOUT_VERSION,
        total_size: total as u64,
        transport,
    }
    .encode();
    let writer = FrameWriter {
        region,
        desc,
        token: token.clone(),
        stamp_checksums: options.stamp_checksums,
        last_frame_index: 0,
        torn_down: false,
    };
    Ok((writer, token))
}

/// The single writer of a frame region. Dropping it tears the region down.
pub struct FrameWriter {
    region: Region,
    desc: FrameDescriptor,
    token: String,
    stamp_checksums: bool,
    last_frame_index: u64,
    torn_down: bool,
}

impl std::fmt::Debug for FrameWriter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FrameWriter")
            .field("name", &self.name())
            .field("desc", &self.desc)
            .field("last_frame_index", &self.last_frame_index)
            .finish()
    }
}

impl FrameWriter {
    pub fn descriptor(&self) -> &FrameDescriptor {
        &self.desc
    }

    pub fn token(&self) -> &str {
        &self.token
    }

    pub fn name(&self) -> &str {
        self.region.backend.name()
    }

    pub fn transport(&self) -> TransportKind {
        self.region.backend.kind()
    }

    pub fn region_bytes(&self) -> usize {
        self.desc.region_bytes()
    }

    pub fn last_frame_index(&self) -> u64 {
        self.last_frame_index
    }

    pub fn stamps_checksums(&self) -> bool {
        self.stamp_checksums
    }

    pub fn publish_frame(
        &mut self,
        color: &ColorImage,
        depth: &DepthImage,
        frame_index: u64,
        timestamp_ns: u64,
    ) -> Result<(), FrameBusError> {
        for (w, h) in [color.dimensions(), depth.dimensions()] {
            if (w, h) != (self.desc.width, self.desc.height) {
                return Err(FrameBusError::DimensionMismatch {
                    expected_width: self.desc.width,
                    expected_height: self.desc.height,
                    actual_width: w,
                    actual_height: h,
                });
            }
        }
        self.publish_planes(color.pixels(), depth.pixels(), frame_index, timestamp_ns)
    }

    /// Like [`FrameWriter::publish_frame`] but on packed row-major slices.
    pub fn publish_planes(
        &mut self,
        color: &[[f32; 4]],
        depth: &[f32],
        frame_index: u64,
        timestamp_ns: u64,
    ) -> Result<(), FrameBusError> {
        let n = self.desc.pixel_count();
        if color.len() != n || depth.len() != n {
            let rows = |len: usize| (len / self.desc.width as usize) as u32;
            let bad = if color.len() != n { color.len() } else { depth.len() };
            return Err(FrameBusError::DimensionMismatch {
                expected_width: self.desc.width,
                expected_height: self.desc.height,
                actual_width: self.desc.width,
                actual_height: rows(bad),
            });
        }
        if frame_index <= self.last_frame_index {
            return Err(FrameBusError::NonMonotonicFrameIndex {
                last: self.last_frame_index,
                got: frame_index,
            });
        }
        let checksum = if self.stamp_checksums {
            frame_checksum(color, depth)
        } else {
            0
        };
        let region = &self.region;
        let desc = &self.desc;
        let w = desc.width as usize;

        let seq = region.seq().load(Ordering::Relaxed);
        debug_assert!(seq.is_multiple_of(2));
        region.seq().store(seq.wrapping_add(1), Ordering::Relaxed);
        fence(Ordering::Release);

        for y in 0..desc.height as usize {
            let dst = region.words(desc.color_offset() + y * desc.color_pitch as usize, w * 4);
            for (d, s) in dst.chunks_exact(4).zip(&color[y * w..(y + 1) * w]) {
                for c in 0..4 {
                    d[c].store(s[c].to_bits().to_le(), Ordering::Relaxed);
                }
            }
            let dst = region.words(desc.depth_offset() + y * desc.depth_pitch as usize, w);
            for (d, s) in dst.iter().zip(&depth[y * w..(y + 1) * w]) {
                d.store(s.to_bits().to_le(), Ordering::Relaxed);
            }
        }
        region.store64(OFF_FRAME_INDEX, frame_index);
        region.store64(OFF_TIMESTAMP_NS, timestamp_ns);
        region.store64(OFF_CHECKSUM, checksum);

        region.seq().store(seq.wrapping_add(2), Ordering::Release);
        region.notify().fetch_add(1, Ordering::Release);
        notify::wake_all(region.notify());
        self.last_frame_index = frame_index;
        Ok(())
    }

    /// Marks the region closed, wakes blocked readers and removes its name.
    pub fn teardown(mut self) {
        self.teardown_inner();
    }

    fn teardown_inner(&mut self) {
        if self.torn_down {
            return;
        }
        self.torn_down = true;
        self.region
            .u32_at(OFF_FLAGS)
            .fetch_or(FLAG_WRITER_CLOSED.to_le(), Ordering::Release);
        self.region.notify().fetch_add(1, Ordering::Release);
        notify::wake_all(self.region.notify());
        transport::unlink(self.region.backend.kind(), self.region.backend.name());
    }
}

impl Drop for FrameWriter {
    fn drop(&mut self) {
        self.teardown_inner();
    }
}

/// How [`FrameReader::acquire_latest`] waits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wait {
    /// Return `None` unless a frame newer than the last one returned exists.
    NonBlocking,
    /// Block until a newer frame is published or the writer goes away.
    BlockUntilNew,
    /// As `BlockUntilNew`, returning `None` once the timeout elapses.
    BlockUntilNewTimeout(Duration),
}

/// One internally consistent published frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSnapshot {
    pub frame_index: u64,
    pub timestamp_ns: u64,
    /// Checksum stamped by the writer, zero if it does not stamp.
    pub checksum: u64,
    pub color: ColorImage,
    pub depth: DepthImage,
}

impl FrameSnapshot {
    /// Checksum recomputed from the snapshot's own planes.
    pub fn content_checksum(&self) -> u64 {
        frame_checksum(self.color.pixels(), self.depth.pixels())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReaderStats {
    pub frames: u64,
    /// Copies discarded because the writer was active.
    pub retries: u64,
    pub last_frame_index: u64,
}

/// Above this many retries in a single acquire the reader logs a warning.
pub const RETRY_WARN_THRESHOLD: u64 = 100;

const LIVENESS_POLL: Duration = Duration::from_millis(100);
const WAIT_SLICE: Duration = Duration::from_millis(50);

/// A reader attached to a frame region.
pub struct FrameReader {
    region: Region,
    desc: FrameDescriptor,
    token: TokenInfo,
    writer_pid: u32,
    stats: ReaderStats,
    last_liveness_check: Instant,
    color_buf: Vec<[f32; 4]>,
    depth_buf: Vec<f32>,
}

impl std::fmt::Debug for FrameReader {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FrameReader")
            .field("name", &self.token.name)
            .field("desc", &self.desc)
            .field("stats", &self.stats)
            .finish()
    }
}

fn process_alive(pid: u32) -> bool {
    #[cfg(unix)]
    {
        if pid == std::process::id() {
            return true;
        }
        // SAFETY: signal 0 performs only the existence/permission check.
        let rc = unsafe { libc::kill(pid as libc::pid_t, 0) };
        rc == 0 || std::io::Error::last_os_error().raw_os_error() == Some(libc::EPERM)
    }
    #[cfg(not(unix))]
    {
        let _ = pid;
        true
    }
}

pub fn attach_region(token: &str) -> Result<FrameReader, FrameBusError> {
    let info = TokenInfo::decode(token)?;
    if info.layout_version != LAYOUT_VERSION {
        return Err(FrameBusError::IncompatibleLayout(format!(
            "token layout version {} (expected {LAYOUT_VERSION})",
            info.layout_version
        )));
    }
    if info.total_size < HEADER_SIZE as u64 || info.total_size > isize::MAX as u64 {
        return Err(FrameBusError::Attach(format!(
            "token declares an impossible region size {}",
            info.total_size
        )));
    }
    let backend = transport::open(info.transport, &info.name, info.total_size as usize)?;
    let region = Region { backend };
    if region.load64(OFF_MAGIC) != u64::from_le_bytes(MAGIC) {
        return Err(FrameBusError::IncompatibleLayout("bad magic".into()));
    }
    let version = region.load32(OFF_LAYOUT_VERSION);
    if version != LAYOUT_VERSION || region.load32(OFF_HEADER_SIZE) != HEADER_SIZE as u32 {
        return Err(FrameBusError::IncompatibleLayout(format!(
            "region layout version {version}"
        )));
    }
    let desc = region.descriptor()?;
    if desc.region_bytes() as u64 != info.total_size {
        return Err(FrameBusError::IncompatibleLayout(format!(
            "region is {} bytes, token says {}",
            desc.region_bytes(),
            info.total_size
        )));
    }
    if region.load32(OFF_FLAGS) & FLAG_WRITER_CLOSED != 0 {
        return Err(FrameBusError::Stale(format!(
            "region {} was torn down",
            info.name
        )));
    }
    let writer_pid = region.load32(OFF_WRITER_PID);
    if !process_alive(writer_pid) {
        // Nobody else will clean up after a crashed writer.
        transport::unlink(info.transport, &info.name);
        return Err(FrameBusError::Stale(format!(
            "writer process {writer_pid} of region {} is gone",
            info.name
        )));
    }
    Ok(FrameReader {
        region,
        desc,
        token: info,
        writer_pid,
        stats: ReaderStats::default(),
        last_liveness_check: Instant::now(),
        color_buf: Vec::new(),
        depth_buf: Vec::new(),
    })
}

impl FrameReader {
    pub fn descriptor(&self) -> &FrameDescriptor {
        &self.desc
    }

    pub fn magic(&self) -> [u8; 8] {
        self.region.load64(OFF_MAGIC).to_le_bytes()
    }

    pub fn layout_version(&self) -> u32 {
        self.region.load32(OFF_LAYOUT_VERSION)
    }

    pub fn region_name(&self) -> &str {
        &self.token.name
    }

    pub fn transport(&self) -> TransportKind {
        self.token.transport
    }

    pub fn stats(&self) -> ReaderStats {
        self.stats
    }

    /// Frame index most recently published, without copying anything.
    pub fn peek_frame_index(&self) -> u64 {
        self.region.load64(OFF_FRAME_INDEX)
    }

    fn check_writer(&mut self) -> Result<(), FrameBusError> {
        if self.region.load32(OFF_FLAGS) & FLAG_WRITER_CLOSED != 0 {
            return Err(FrameBusError::Disconnected);
        }
        if self.last_liveness_check.elapsed() >= LIVENESS_POLL {
            self.last_liveness_check = Instant::now();
            if !process_alive(self.writer_pid) {
                return Err(FrameBusError::Disconnected);
            }
        }
        Ok(())
    }

    /// Returns the newest frame if it is newer than the last one this reader
    /// returned. See [`Wait`] for the blocking behavior.
    pub fn acquire_latest(&mut self, wait: Wait) -> Result<Option<FrameSnapshot>, FrameBusError> {
        let deadline = match wait {
            Wait::BlockUntilNewTimeout(d) => Some(Instant::now() + d),
            _ => None,
        };
        let mut retries = 0u64;
        let mut warned = false;
        loop {
            self.check_writer()?;
            let notify_seen = self.region.notify().load(Ordering::Acquire);
            let s1 = self.region.seq().load(Ordering::Acquire);
            if s1 % 2 == 1 {
                retries += 1;
                self.stats.retries += 1;
                if retries.is_multiple_of(64) {
                    std::thread::yield_now();
                } else {
                    std::hint::spin_loop();
                }
                continue;
            }
            let frame_index = self.region.load64(OFF_FRAME_INDEX);
            if frame_index <= self.stats.last_frame_index {
                fence(Ordering::Acquire);
                if self.region.seq().load(Ordering::Relaxed) != s1 {
                    continue;
                }
                let slice = match (wait, deadline) {
                    (Wait::NonBlocking, _) => return Ok(None),
                    (_, Some(deadline)) => {
                        let now = Instant::now();
                        if now >= deadline {
                            return Ok(None);
                        }
                        (deadline - now).min(WAIT_SLICE)
                    }
                    (_, None) => WAIT_SLICE,
                };
                notify::wait(self.region.notify(), notify_seen, slice);
                continue;
            }

            self.copy_planes();
            let timestamp_ns = self.region.load64(OFF_TIMESTAMP_NS);
            let checksum = self.region.load64(OFF_CHECKSUM);
            fence(Ordering::Acquire);
            if self.region.seq().load(Ordering::Relaxed) != s1 {
                retries += 1;
                self.stats.retries += 1;
                if retries > RETRY_WARN_THRESHOLD && !warned {
                    warned = true;
                    log::warn!(
                        "frame reader retried {retries} times in one acquire on {}",
                        self.token.name
                    );
                }
                continue;
            }
            self.stats.frames += 1;
            self.stats.last_frame_index = frame_index;
            let (w, h) = (self.desc.width, self.desc.height);
            return Ok(Some(FrameSnapshot {
                frame_index,
                timestamp_ns,
                checksum,
                color: ColorImage::from_pixels(w, h, self.color_buf.clone()).expect("sized"),
                depth: DepthImage::from_pixels(w, h, self.depth_buf.clone()).expect("sized"),
            }));
        }
    }

    fn copy_planes(&mut self) {
        let desc = self.desc;
        let w = desc.width as usize;
        let n = desc.pixel_count();
        self.color_buf.resize(n, [0.0; 4]);
        self.depth_buf.resize(n, 0.0);
        for y in 0..desc.height as usize {
            let src = self
                .region
                .words(desc.color_offset() + y * desc.color_pitch as usize, w * 4);
            for (d, s) in self.color_buf[y * w..(y + 1) * w]
                .iter_mut()
                .zip(src.chunks_exact(4))
            {
                for c in 0..4 {
                    d[c] = f32::from_bits(u32::from_le(s[c].load(Ordering::Relaxed)));
                }
            }
            let src = self
                .region
                .words(desc.depth_offset() + y * desc.depth_pitch as usize, w);
            for (d, s) in self.depth_buf[y * w..(y + 1) * w].iter_mut().zip(src) {
                *d = f32::from_bits(u32::from_le(s.load(Ordering::Relaxed)));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solid(desc: &FrameDescriptor, rgba: [f32; 4], z: f32) -> (ColorImage, DepthImage) {
        (
            ColorImage::filled(desc.width, desc.height, rgba),
            DepthImage::filled(desc.width, desc.height, z),
        )
    }

    #[test]
    fn fresh_region_has_no_frame() {
        let desc = FrameDescriptor::new(8, 4).unwrap();
        let (_w, token) = create_region(desc, TransportKind::Inprocess, Default::default()).unwrap();
        let mut r = attach_region(&token).unwrap();
        assert_eq!(r.descriptor(), &desc);
        assert_eq!(&r.magic(), b"SPLATBUS");
        assert_eq!(r.layout_version(), 1);
        assert_eq!(r.acquire_latest(Wait::NonBlocking).unwrap(), None);
        assert_eq!(
            r.acquire_latest(Wait::BlockUntilNewTimeout(Duration::from_millis(20)))
                .unwrap(),
            None
        );
    }

    #[test]
    fn publish_then_acquire_is_identity() {
        let desc = FrameDescriptor::new(5, 3).unwrap();
        let opts = RegionOptions {
            stamp_checksums: true,
            ..Default::default()
        };
        let (mut w, token) = create_region(desc, TransportKind::Inprocess, opts).unwrap();
        let color = ColorImage::from_fn(5, 3, |x, y| [x as f32, y as f32, 0.5, 1.0]);
        let depth = DepthImage::from_fn(5, 3, |x, y| 1.0 + x as f32 * 10.0 + y as f32);
        w.publish_frame(&color, &depth, 1, 1234).unwrap();
        let mut r = attach_region(&token).unwrap();
        let snap = r.acquire_latest(Wait::NonBlocking).unwrap().unwrap();
        assert_eq!(snap.frame_index, 1);
        assert_eq!(snap.timestamp_ns, 1234);
        assert_eq!(snap.color, color);
        assert_eq!(snap.depth, depth);
        assert_eq!(snap.checksum, snap.content_checksum());
        assert_eq!(r.acquire_latest(Wait::NonBlocking).unwrap(), None);
    }

    #[test]
    fn latest_wins() {
        let desc = FrameDescriptor::new(4, 4).unwrap();
        let (mut w, token) = create_region(desc, TransportKind::Inprocess, Default::default()).unwrap();
        let mut r = attach_region(&token).unwrap();
        let (c1, d1) = solid(&desc, [1.0, 0.0, 0.0, 1.0], 1.0);
        let (c2, d2) = solid(&desc, [0.0, 1.0, 0.0, 1.0], 2.0);
        w.publish_frame(&c1, &d1, 1, 0).unwrap();
        w.publish_frame(&c2, &d2, 2, 0).unwrap();
        let snap = r.acquire_latest(Wait::NonBlocking).unwrap().unwrap();
        assert_eq!(snap.frame_index, 2);
        assert_eq!(snap.color, c2);
        assert_eq!(snap.checksum, 0, "checksums are off by default");
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let desc = FrameDescriptor::new(64, 64).unwrap();
        let (mut w, _t) = create_region(desc, TransportKind::Inprocess, Default::default()).unwrap();
        let small = FrameDescriptor::new(32, 32).unwrap();
        let (c, d) = solid(&small, [0.0; 4], 1.0);
        assert!(matches!(
            w.publish_frame(&c, &d, 1, 0),
            Err(FrameBusError::DimensionMismatch {
                actual_width: 32,
                ..
            })
        ));
    }

    #[test]
    fn frame_index_must_increase() {
        let desc = FrameDescriptor::new(2, 2).unwrap();
        let (mut w, _t) = create_region(desc, TransportKind::Inprocess, Default::default()).unwrap();
        let (c, d) = solid(&desc, [0.0; 4], 1.0);
        w.publish_frame(&c, &d, 5, 0).unwrap();
        assert!(matches!(
            w.publish_frame(&c, &d, 5, 0),
            Err(FrameBusError::NonMonotonicFrameIndex { last: 5, got: 5 })
        ));
    }

    #[test]
    fn duplicate_explicit_name_fails() {
        let desc = FrameDescriptor::new(2, 2).unwrap();
        for transport in [TransportKind::Inprocess, TransportKind::SharedMemory] {
            let name = format!("splatbus-test-dup-{}-{transport}", std::process::id());
            let opts = RegionOptions {
                name: Some(name.clone()),
                ..Default::default()
            };
            let (_w, _t) = create_region(desc, transport, opts.clone()).unwrap();
            assert_eq!(
                create_region(desc, transport, opts).unwrap_err(),
                FrameBusError::AlreadyExists(name)
            );
        }
    }

    #[test]
    fn corrupted_token_fails_to_attach() {
        assert!(matches!(
            attach_region("not base64 !!!"),
            Err(FrameBusError::Attach(_))
        ));
        // Valid base64 of a non-token.
        assert!(matches!(attach_region("e30="), Err(FrameBusError::Attach(_))));
    }

    #[test]
    fn wrong_layout_version_in_token() {
        let token = TokenInfo {
            name: "x".into(),
            layout_version: 2,
            total_size: 8192,
            transport: TransportKind::Inprocess,
        }
        .encode();
        assert!(matches!(
            attach_region(&token),
            Err(FrameBusError::IncompatibleLayout(_))
        ));
    }

    #[test]
    fn torn_down_region_is_stale_and_readers_disconnect() {
        for transport in [TransportKind::Inprocess, TransportKind::SharedMemory] {
            let desc = FrameDescriptor::new(4, 4).unwrap();
            let (w, token) = create_region(desc, transport, Default::default()).unwrap();
            let mut r = attach_region(&token).unwrap();
            w.teardown();
            assert!(matches!(attach_region(&token), Err(FrameBusError::Stale(_))));
            assert_eq!(
                r.acquire_latest(Wait::BlockUntilNew).unwrap_err(),
                FrameBusError::Disconnected
            );
        }
    }

    #[test]
    fn blocked_reader_wakes_on_publish() {
        let desc = FrameDescriptor::new(4, 4).unwrap();
        let (mut w, token) = create_region(desc, TransportKind::SharedMemory, Default::default()).unwrap();
        let mut r = attach_region(&token).unwrap();
        let t = std::thread::spawn(move || r.acquire_latest(Wait::BlockUntilNew).map(|s| s.map(|s| s.frame_index)));
        std::thread::sleep(Duration::from_millis(30));
        let (c, d) = solid(&desc, [1.0; 4], 1.0);
        w.publish_frame(&c, &d, 7, 0).unwrap();
        assert_eq!(t.join().unwrap().unwrap(), Some(7));
    }
}
