//! Independent reference implementations shared by the integration tests
//! and the acceptance harness. Nothing here calls the code it checks.

#![allow(dead_code)]

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use splatbus::compositor::LayerImage;
use splatbus::framebus::{ColorFormat, DepthFormat, TransportKind};
use splatbus::geometry::Convention;
use splatbus::image::{ColorImage, DepthImage};
use splatbus::splatref::{Gaussian, GaussianCloud};
use splatbus::wire::{
    CameraPoseMsg, ControlMessage, ErrorCode, ErrorMsg, Hello, InitPacket, ObjectPoseMsg, TelemetryMsg,
};

pub fn rng(seed: u64) -> ChaCha8Rng {
    rand::SeedableRng::seed_from_u64(seed)
}

/// FNV-1a 64 over the plane bytes, written out from the published constants.
pub fn fnv1a_planes(color: &[[f32; 4]], depth: &[f32]) -> u64 {
    let mut h: u64 = 14695981039346656037;
    let bytes = color
        .iter()
        .flat_map(|p| p.iter())
        .chain(depth.iter())
        .flat_map(|v| v.to_bits().to_le_bytes());
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(1099511628211);
    }
    h
}

/// Inverse depth to linear depth, with background mapped to `far`.
pub fn linear_depth(inv: f32, far: f32) -> f32 {
    if (inv as f64) <= 1e-12 {
        far
    } else {
        (1.0 / inv as f64) as f32
    }
}

pub fn bits_equal(a: &[f32], b: &[f32]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

pub fn color_bits_equal(a: &ColorImage, b: &ColorImage) -> bool {
    a.dimensions() == b.dimensions() && bits_equal(a.pixels().as_flattened(), b.pixels().as_flattened())
}

pub fn unit_quaternion(rng: &mut impl Rng) -> [f64; 4] {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
        if n > 0.1 {
            return q.map(|c| c / n);
        }
    }
}

fn finite(rng: &mut impl Rng, span: f64) -> f64 {
    // Mix plain values with extreme magnitudes to exercise float formatting.
    match rng.random_range(0..8) {
        0 => 0.0,
        1 => rng.random_range(-1e-300..1e-300),
        2 => rng.random_range(-1e300..1e300),
        _ => rng.random_range(-span..span),
    }
}

fn text(rng: &mut impl Rng) -> String {
    const ALPHABET: &[char] = &['a', 'Z', '0', ' ', '"', '\\', '\n', '\t', '/', 'é', '→', '\u{1F600}', '\u{7f}', '\u{0}'];
    let n = rng.random_range(0..24);
    (0..n).map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())]).collect()
}

fn convention(rng: &mut impl Rng) -> Convention {
    if rng.random() {
        Convention::UnityLhYup
    } else {
        Convention::GsRhYdown
    }
}

/// A valid message of the given schema (0..6, in declaration order).
pub fn random_message(rng: &mut impl Rng, schema: usize) -> ControlMessage {
    use base64::Engine as _;
    match schema {
        0 => ControlMessage::Hello(Hello {
            protocol_version: rng.random_range(1..=u32::MAX),
            client_name: text(rng),
        }),
        1 => {
            let width = rng.random_range(1..4096u32);
            let height = rng.random_range(1..4096u32);
            let token: Vec<u8> = (0..rng.random_range(0..64)).map(|_| rng.random()).collect();
            ControlMessage::Init(InitPacket {
                width,
                height,
                color_format: ColorFormat::Rgba32f,
                depth_format: DepthFormat::R32f,
                color_pitch: width * 16 + rng.random_range(0..128),
                depth_pitch: width * 4 + rng.random_range(0..128),
                transport: if rng.random() { TransportKind::SharedMemory } else { TransportKind::Inprocess },
                attachment_token: base64::engine::general_purpose::STANDARD.encode(token),
                frame_region_bytes: rng.random(),
            })
        }
        2 => ControlMessage::CameraPose(CameraPoseMsg {
            position: std::array::from_fn(|_| finite(rng, 1e4)),
            rotation: unit_quaternion(rng),
            convention: convention(rng),
            fov_y_deg: rng.random::<bool>().then(|| rng.random_range(1e-3..179.9)),
        }),
        3 => ControlMessage::ObjectPose(ObjectPoseMsg {
            object_id: text(rng),
            position: std::array::from_fn(|_| finite(rng, 1e4)),
            rotation: unit_quaternion(rng),
            scale: rng.random_range(1e-6..1e6),
            convention: convention(rng),
        }),
        4 => ControlMessage::Telemetry(TelemetryMsg {
            series: text(rng),
            t: rng.random_range(0.0..1e9),
            value: finite(rng, 1e6),
        }),
        _ => ControlMessage::Error(ErrorMsg {
            code: [ErrorCode::VersionMismatch, ErrorCode::Malformed, ErrorCode::Oversize, ErrorCode::Unsupported]
                [rng.random_range(0..4)],
            detail: text(rng),
        }),
    }
}

pub fn random_gaussian(rng: &mut impl Rng, center: [f64; 3], spread: f64) -> Gaussian {
    let q = unit_quaternion(rng);
    Gaussian {
        mean: Vector3::from(center.map(|c| if spread > 0.0 { c + rng.random_range(-spread..spread) } else { c })),
        scale: Vector3::from_fn(|_, _| rng.random_range(0.05..0.5)),
        rotation: UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[3], q[0], q[1], q[2])),
        opacity: rng.random_range(0.1..1.0),
        color: std::array::from_fn(|_| rng.random_range(0.0..1.0)),
    }
}

pub fn random_cloud(rng: &mut impl Rng, n: usize) -> GaussianCloud {
    GaussianCloud::new((0..n).map(|_| random_gaussian(rng, [0.0, 0.0, 4.0], 1.5)).collect()).unwrap()
}

pub fn shuffled(cloud: &GaussianCloud, rng: &mut impl Rng) -> GaussianCloud {
    let mut g = cloud.gaussians.clone();
    g.shuffle(rng);
    GaussianCloud { gaussians: g }
}

/// R diag(s²) Rᵀ built from a rotation matrix assembled by hand from the
/// quaternion.
pub fn covariance3(scale: &Vector3<f64>, q: &UnitQuaternion<f64>) -> Matrix3<f64> {
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    let r = Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    );
    r * Matrix3::from_diagonal(&scale.component_mul(scale)) * r.transpose()
}

/// A premultiplied layer with a mix of empty, opaque and translucent pixels
/// and a share of exact depth ties against `tie_with`.
pub fn random_layer(rng: &mut impl Rng, w: u32, h: u32, far: f32, tie_with: Option<&LayerImage>) -> LayerImage {
    let n = (w * h) as usize;
    let mut color = Vec::with_capacity(n);
    let mut depth = Vec::with_capacity(n);
    for i in 0..n {
        let a: f32 = match rng.random_range(0..6) {
            0 => 0.0,
            1 => 1.0,
            _ => rng.random_range(0.0..1.0),
        };
        let px = [rng.random_range(0.0..=1.0) * a, rng.random_range(0.0..=1.0) * a, rng.random_range(0.0..=1.0) * a, a];
        color.push(px);
        let d = if a == 0.0 {
            far
        } else if let (Some(other), 0) = (tie_with, rng.random_range(0..5)) {
            other.depth.pixels()[i]
        } else {
            rng.random_range(0.01..100.0)
        };
        depth.push(d);
    }
    LayerImage::new(
        ColorImage::from_pixels(w, h, color).unwrap(),
        DepthImage::from_pixels(w, h, depth).unwrap(),
    )
    .unwrap()
}

/// Per-pixel reference: order the layers near to far (splat first on a
/// tie), then accumulate front to back against the transmittance, finishing
/// with the opaque background.
pub fn composite_oracle(splat: &LayerImage, mesh: &LayerImage, bg: [f32; 3]) -> Vec<[f64; 4]> {
    let mut out = Vec::new();
    for i in 0..splat.color.pixels().len() {
        let s = (splat.color.pixels()[i], splat.depth.pixels()[i]);
        let m = (mesh.color.pixels()[i], mesh.depth.pixels()[i]);
        let order = if m.1 < s.1 { [m.0, s.0] } else { [s.0, m.0] };
        let mut acc = [0.0f64; 3];
        let mut transmittance = 1.0f64;
        for c in order {
            for k in 0..3 {
                acc[k] += transmittance * c[k] as f64;
            }
            transmittance *= 1.0 - c[3] as f64;
        }
        for k in 0..3 {
            acc[k] += transmittance * bg[k] as f64;
        }
        out.push([acc[0], acc[1], acc[2], 1.0]);
    }
    out
}

/// Deterministic frame content for the tear tests: every value is a
/// function of the frame index and the sample position, so a copy mixing
/// two frames is detectable without the stamped checksum.
pub fn tear_pattern(index: u64, n: usize) -> (Vec<[f32; 4]>, Vec<f32>) {
    let base = (index % 1_000_000) as f32;
    let color = (0..n).map(|i| [base, i as f32, base + 0.5, 1.0]).collect();
    let depth = (0..n).map(|i| base + i as f32 * 1e-3).collect();
    (color, depth)
}

/// Whether a snapshot's planes match [`tear_pattern`] for its own index.
pub fn matches_tear_pattern(index: u64, color: &[[f32; 4]], depth: &[f32]) -> bool {
    let (c, d) = tear_pattern(index, depth.len());
    bits_equal(color.as_flattened(), c.as_flattened()) && bits_equal(depth, &d)
}
