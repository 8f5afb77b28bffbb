//! Depth-aware blending of a splat layer with a mesh layer.
//!
//! Colors are premultiplied and linear. Each pixel makes one depth
//! comparison: the nearer layer is placed over the farther one, and the pair
//! over an opaque background. Equal depths favor the splat layer.

use rayon::prelude::*;

use crate::image::{ColorImage, DepthImage};

#[derive(Debug, thiserror::Error)]
pub enum CompositeError {
    #[error("layer dimensions differ: splat {splat:?}, mesh {mesh:?}")]
    DimensionMismatch { splat: (u32, u32), mesh: (u32, u32) },
}

/// A premultiplied RGBA image with per-pixel linear depth. Empty pixels have
/// alpha 0 and depth equal to the far sentinel.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerImage {
    pub color: ColorImage,
    pub depth: DepthImage,
}

impl LayerImage {
    pub fn new(color: ColorImage, depth: DepthImage) -> Result<Self, CompositeError> {
        if color.dimensions() != depth.dimensions() {
            return Err(CompositeError::DimensionMismatch {
                splat: color.dimensions(),
                mesh: depth.dimensions(),
            });
        }
        Ok(Self { color, depth })
    }

    /// A layer with nothing in it.
    pub fn empty(width: u32, height: u32, far_sentinel: f32) -> Self {
        Self {
            color: ColorImage::filled(width, height, [0.0; 4]),
            depth: DepthImage::filled(width, height, far_sentinel),
        }
    }

    pub fn dimensions(&self) -> (u32, u32) {
        self.color.dimensions()
    }
}

fn over(front: [f64; 4], back: [f64; 4]) -> [f64; 4] {
    let k = 1.0 - front[3];
    [
        front[0] + k * back[0],
        front[1] + k * back[1],
        front[2] + k * back[2],
        front[3] + k * back[3],
    ]
}

fn widen(c: [f32; 4]) -> [f64; 4] {
    c.map(f64::from)
}

/// Blends one pixel. The result is opaque.
pub fn composite_pixel(
    splat: [f32; 4],
    splat_depth: f32,
    mesh: [f32; 4],
    mesh_depth: f32,
    background: [f32; 3],
) -> [f32; 4] {
    let bg = [
        f64::from(background[0]),
        f64::from(background[1]),
        f64::from(background[2]),
        1.0,
    ];
    let out = if splat_depth <= mesh_depth {
        over(widen(splat), over(widen(mesh), bg))
    } else {
        over(widen(mesh), over(widen(splat), bg))
    };
    [out[0] as f32, out[1] as f32, out[2] as f32, 1.0]
}

/// Composites the two layers over `background`.
pub fn composite_depth_aware(
    splat: &LayerImage,
    mesh: &LayerImage,
    background: [f32; 3],
) -> Result<ColorImage, CompositeError> {
    check_dims(splat, mesh)?;
    let (w, h) = splat.dimensions();
    let pixels: Vec<[f32; 4]> = splat
        .color
        .pixels()
        .par_iter()
        .zip(splat.depth.pixels().par_iter())
        .zip(mesh.color.pixels().par_iter().zip(mesh.depth.pixels().par_iter()))
        .map(|((&sc, &sd), (&mc, &md))| composite_pixel(sc, sd, mc, md, background))
        .collect();
    Ok(ColorImage::from_pixels(w, h, pixels).expect("same dimensions"))
}

fn check_dims(splat: &LayerImage, mesh: &LayerImage) -> Result<(), CompositeError> {
    if splat.dimensions() != mesh.dimensions() {
        return Err(CompositeError::DimensionMismatch {
            splat: splat.dimensions(),
            mesh: mesh.dimensions(),
        });
    }
    Ok(())
}

/// Result of [`composite_commutes_check`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CommuteReport {
    /// Pixels where both layers are opaque and were compared.
    pub checked: usize,
    /// Pixels skipped because one of the layers is not opaque there.
    pub skipped: usize,
    /// Compared pixels deviating from the depth test by more than the tolerance.
    pub flagged: Vec<(u32, u32)>,
    pub max_deviation: f32,
}

impl CommuteReport {
    pub fn passed(&self) -> bool {
        self.flagged.is_empty()
    }
}

pub const COMMUTE_TOLERANCE: f32 = 1e-6;

/// Checks that, wherever both layers are opaque, compositing reduces to a
/// plain depth test (nearer color wins, splat on ties).
pub fn composite_commutes_check(
    splat: &LayerImage,
    mesh: &LayerImage,
) -> Result<CommuteReport, CompositeError> {
    check_dims(splat, mesh)?;
    let out = composite_depth_aware(splat, mesh, [0.0; 3])?;
    let (w, _) = splat.dimensions();
    let mut report = CommuteReport::default();
    for (i, px) in out.pixels().iter().enumerate() {
        let sc = splat.color.pixels()[i];
        let mc = mesh.color.pixels()[i];
        if sc[3] != 1.0 || mc[3] != 1.0 {
            report.skipped += 1;
            continue;
        }
        report.checked += 1;
        let expected = if splat.depth.pixels()[i] <= mesh.depth.pixels()[i] { sc } else { mc };
        let dev = (0..4).map(|c| (px[c] - expected[c]).abs()).fold(0.0f32, f32::max);
        report.max_deviation = report.max_deviation.max(dev);
        if dev > COMMUTE_TOLERANCE {
            report.flagged.push((i as u32 % w, i as u32 / w));
        }
    }
    Ok(report)
}
