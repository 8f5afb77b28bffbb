//! Publish-to-snapshot latency measurement.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use crate::framebus::{
    attach_region, create_region, monotonic_ns, FrameBusError, FrameDescriptor, FrameReader, RegionOptions,
    TransportKind, Wait,
};

/// Summary of latency samples, in nanoseconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyReport {
    pub samples: usize,
    pub median_ns: u64,
    pub p95_ns: u64,
    pub min_ns: u64,
    pub max_ns: u64,
    pub mean_ns: f64,
}

impl LatencyReport {
    /// Nearest-rank percentiles over the samples.
    pub fn from_samples(mut samples: Vec<u64>) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        samples.sort_unstable();
        let rank = |p: f64| samples[((p * samples.len() as f64).ceil() as usize).clamp(1, samples.len()) - 1];
        Some(Self {
            samples: samples.len(),
            median_ns: rank(0.5),
            p95_ns: rank(0.95),
            min_ns: samples[0],
            max_ns: samples[samples.len() - 1],
            mean_ns: samples.iter().map(|&s| s as f64).sum::<f64>() / samples.len() as f64,
        })
    }

    pub fn median_ms(&self) -> f64 {
        self.median_ns as f64 / 1e6
    }

    pub fn p95_ms(&self) -> f64 {
        self.p95_ns as f64 / 1e6
    }
}

impl std::fmt::Display for LatencyReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} frames: median {:.3} ms, p95 {:.3} ms, min {:.3} ms, max {:.3} ms",
            self.samples,
            self.median_ms(),
            self.p95_ms(),
            self.min_ns as f64 / 1e6,
            self.max_ns as f64 / 1e6
        )
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub width: u32,
    pub height: u32,
    pub transport: TransportKind,
    pub frames: usize,
    /// Writer publish rate; 0 publishes back to back.
    pub rate_hz: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            width: 256,
            height: 256,
            transport: TransportKind::SharedMemory,
            frames: 500,
            rate_hz: 500.0,
        }
    }
}

/// Collects latency samples from a reader: the time from a frame's publish
/// timestamp until its snapshot is in hand.
pub fn sample_reader(
    reader: &mut FrameReader,
    frames: usize,
    timeout: Duration,
) -> Result<Vec<u64>, FrameBusError> {
    let mut samples = Vec::with_capacity(frames);
    while samples.len() < frames {
        match reader.acquire_latest(Wait::BlockUntilNewTimeout(timeout))? {
            Some(snap) => samples.push(monotonic_ns().saturating_sub(snap.timestamp_ns)),
            None => break,
        }
    }
    Ok(samples)
}

/// Runs a writer thread against a reader attached through the chosen
/// transport and reports publish-to-snapshot latency.
pub fn run_local(config: &BenchConfig) -> Result<LatencyReport, FrameBusError> {
    let desc = FrameDescriptor::new(config.width, config.height)?;
    let (mut writer, token) = create_region(desc, config.transport, RegionOptions::default())?;
    let mut reader = attach_region(&token)?;
    let done = Arc::new(AtomicBool::new(false));
    let writer_done = done.clone();
    let interval = (config.rate_hz > 0.0).then(|| Duration::from_secs_f64(1.0 / config.rate_hz));
    let n = desc.pixel_count();
    let handle = std::thread::spawn(move || -> Result<(), FrameBusError> {
        let mut color = vec![[0.0f32; 4]; n];
        let depth = vec![1.0f32; n];
        let mut index = 0u64;
        while !writer_done.load(Ordering::Acquire) {
            index += 1;
            color[0][0] = index as f32;
            writer.publish_planes(&color, &depth, index, monotonic_ns())?;
            match interval {
                Some(i) => std::thread::sleep(i),
                None => std::thread::yield_now(),
            }
        }
        writer.teardown();
        Ok(())
    });
    let samples = sample_reader(&mut reader, config.frames, Duration::from_secs(5));
    done.store(true, Ordering::Release);
    handle.join().expect("writer thread panicked")?;
    let samples = samples?;
    LatencyReport::from_samples(samples)
        .ok_or_else(|| FrameBusError::Resource("the writer published no frames".into()))
}
