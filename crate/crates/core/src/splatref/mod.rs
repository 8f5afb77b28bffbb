//! Deterministic CPU reference rasterizer for 3D Gaussian clouds.
//!
//! Gaussians are projected with the usual affine (EWA) approximation, sorted
//! globally front-to-back by camera depth and alpha-composited per pixel.
//! Besides premultiplied color the renderer accumulates alpha-weighted inverse
//! depth, which is what most splatting rasterizers expose as their depth
//! output.
//!
//! Pixel `(x, y)` samples the continuous image point `(x, y)`, so the
//! principal point `(width/2, height/2)` falls exactly on a pixel.

mod ply;

use std::cmp::Ordering;

use nalgebra::{Matrix2, Matrix3, Matrix4, UnitQuaternion, Vector2, Vector3};
use rayon::prelude::*;

pub use ply::{load_ply, read_ply, write_ply, PlyError};

use crate::geometry::{self, GeometryError, Intrinsics, Pose, ViewState};
use crate::image::{ColorImage, DepthImage};

/// Added to the diagonal of every screen-space covariance.
pub const COVARIANCE_DILATION: f64 = 0.3;
/// Largest alpha a single splat may contribute.
pub const MAX_SPLAT_ALPHA: f64 = 0.99;
/// A pixel stops accumulating once its transmittance falls below this.
pub const MIN_TRANSMITTANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SplatError {
    #[error("invalid gaussian {index}: {reason}")]
    InvalidGaussian { index: usize, reason: String },
    #[error("invalid render settings: {0}")]
    InvalidSettings(String),
    #[error("object scale must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// One 3D Gaussian primitive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian {
    pub mean: Vector3<f64>,
    /// Standard deviations along the Gaussian's local axes.
    pub scale: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
    pub opacity: f64,
    /// Linear RGB from the degree-0 spherical-harmonic band.
    pub color: [f64; 3],
}

impl Gaussian {
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.rotation.to_rotation_matrix();
        let s2 = Matrix3::from_diagonal(&self.scale.component_mul(&self.scale));
        r.matrix() * s2 * r.matrix().transpose()
    }

    fn check(&self) -> Result<(), String> {
        if !self.mean.iter().all(|c| c.is_finite()) {
            return Err("non-finite mean".into());
        }
        if !self.scale.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(format!("scales must be positive, got {:?}", self.scale.as_slice()));
        }
        let n = self.rotation.quaternion().norm();
        if !((n - 1.0).abs() <= 1e-4) {
            return Err(format!("rotation norm {n}"));
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(format!("opacity {} outside [0, 1]", self.opacity));
        }
        if !self.color.iter().all(|c| (0.0..=1.0).contains(c)) {
            return Err(format!("color {:?} outside [0, 1]", self.color));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianCloud {
    pub gaussians: Vec<Gaussian>,
}

impl GaussianCloud {
    pub fn new(gaussians: Vec<Gaussian>) -> Result<Self, SplatError> {
        let cloud = Self { gaussians };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn validate(&self) -> Result<(), SplatError> {
        for (index, g) in self.gaussians.iter().enumerate() {
            g.check()
                .map_err(|reason| SplatError::InvalidGaussian { index, reason })?;
        }
        Ok(())
    }

    /// Three colored Gaussians in front of the default camera. Used by the
    /// demo server when no asset is given.
    pub fn demo_scene() -> Self {
        let g = |mean: [f64; 3], scale: [f64; 3], angle: f64, opacity: f64, color: [f64; 3]| Gaussian {
            mean: Vector3::from(mean),
            scale: Vector3::from(scale),
            rotation: UnitQuaternion::from_euler_angles(0.0, 0.0, angle),
            opacity,
            color,
        };
        Self {
            gaussians: vec![
                g([-0.6, 0.1, 3.0], [0.35, 0.2, 0.2], 0.4, 0.9, [0.9, 0.15, 0.1]),
                g([0.5, -0.2, 3.5], [0.3, 0.45, 0.3], -0.3, 0.8, [0.1, 0.8, 0.2]),
                g([0.0, 0.3, 4.5], [0.8, 0.5, 0.4], 0.0, 0.7, [0.15, 0.25, 0.9]),
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderSettings {
    pub width: u32,
    pub height: u32,
    pub fov_y: f64,
    pub near: f64,
    pub far: f64,
    /// Contributions with a smaller alpha are skipped.
    pub alpha_threshold: f64,
    pub tile_size: u32,
    /// Linear RGB applied as `C + (1 - A) * background`. Keep it black for
    /// a truly premultiplied output.
    pub background: [f32; 3],
}

impl RenderSettings {
    pub fn new(width: u32, height: u32, fov_y: f64) -> Self {
        Self {
            width,
            height,
            fov_y,
            near: 0.01,
            far: 1000.0,
            alpha_threshold: 1.0 / 255.0,
            tile_size: 16,
            background: [0.0; 3],
        }
    }

    pub fn for_view(view: &ViewState) -> Self {
        Self::new(view.width, view.height, view.fov_y)
    }

    pub fn validate(&self) -> Result<(), SplatError> {
        let bad = |m: String| Err(SplatError::InvalidSettings(m));
        if self.width == 0 || self.height == 0 {
            return bad("image must not be empty".into());
        }
        if !(self.near > 0.0 && self.far > self.near && self.far.is_finite()) {
            return bad(format!("need 0 < near < far, got {} {}", self.near, self.far));
        }
        if !self.tile_size.is_power_of_two() {
            return bad(format!("tile size {} is not a power of two", self.tile_size));
        }
        if !(self.alpha_threshold >= 0.0 && self.alpha_threshold < 1.0) {
            return bad(format!("alpha threshold {}", self.alpha_threshold));
        }
        if !(self.fov_y > 0.0 && self.fov_y < std::f64::consts::PI) {
            return bad(format!("fov_y {}", self.fov_y));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    /// RGB is `C + (1 - A) * background`, alpha is the accumulated opacity.
    pub color: ColorImage,
    /// Alpha-weighted inverse camera depth; zero where alpha is zero.
    pub invdepth: DepthImage,
}

/// Camera data shared by every Gaussian in a render.
#[derive(Debug, Clone, Copy)]
pub struct SplatCamera {
    pub view: ViewState,
    pub intrinsics: Intrinsics,
    pub projection: Matrix4<f64>,
    pub near: f64,
}

impl SplatCamera {
    pub fn new(view: &ViewState, near: f64, far: f64) -> Result<Self, GeometryError> {
        view.validate()?;
        let intrinsics = view.intrinsics();
        let projection = geometry::projection_matrix(&intrinsics, near, far)?;
        Ok(Self {
            view: *view,
            intrinsics,
            projection,
            near,
        })
    }
}

/// Screen-space footprint of one Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedGaussian {
    pub center: Vector2<f64>,
    /// Dilated 2D covariance in pixels².
    pub covariance: Matrix2<f64>,
    /// Camera-space z of the mean.
    pub depth: f64,
    /// Radius of the 3-sigma disc, in pixels.
    pub radius: f64,
}

/// Jacobian of the pinhole projection at camera-space point `t`.
pub fn projection_jacobian(intr: &Intrinsics, t: &Vector3<f64>) -> nalgebra::Matrix2x3<f64> {
    let (x, y, z) = (t.x, t.y, t.z);
    nalgebra::Matrix2x3::new(
        intr.fx / z,
        0.0,
        -intr.fx * x / (z * z),
        0.0,
        intr.fy / z,
        -intr.fy * y / (z * z),
    )
}

/// Projects one Gaussian; `None` when it is culled.
pub fn project_gaussian(
    mean: &Vector3<f64>,
    scale: &Vector3<f64>,
    rotation: &UnitQuaternion<f64>,
    camera: &SplatCamera,
) -> Option<ProjectedGaussian> {
    let t = camera.view.world_to_camera_point(mean);
    if !(t.z > camera.near) {
        return None;
    }
    let r = rotation.to_rotation_matrix();
    let cov3 = r.matrix() * Matrix3::from_diagonal(&scale.component_mul(scale)) * r.matrix().transpose();
    let w = camera.view.rotation();
    let cov_cam = w * cov3 * w.transpose();
    let j = projection_jacobian(&camera.intrinsics, &t);
    let mut cov2 = j * cov_cam * j.transpose();
    // Exact symmetry keeps the conic well defined.
    let off = 0.5 * (cov2[(0, 1)] + cov2[(1, 0)]);
    cov2[(0, 1)] = off;
    cov2[(1, 0)] = off;
    cov2[(0, 0)] += COVARIANCE_DILATION;
    cov2[(1, 1)] += COVARIANCE_DILATION;

    let (u, v, _) = geometry::project_point(
        &camera.projection,
        camera.intrinsics.width,
        camera.intrinsics.height,
        &t,
    );
    let mid = 0.5 * (cov2[(0, 0)] + cov2[(1, 1)]);
    let det = cov2.determinant();
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    let radius = 3.0 * lambda_max.sqrt();
    if !(radius.is_finite() && det > 0.0) {
        return None;
    }
    let (w_px, h_px) = (camera.intrinsics.width as f64, camera.intrinsics.height as f64);
    if u + radius < 0.0 || u - radius > w_px - 1.0 || v + radius < 0.0 || v - radius > h_px - 1.0 {
        return None;
    }
    Some(ProjectedGaussian {
        center: Vector2::new(u, v),
        covariance: cov2,
        depth: t.z,
        radius,
    })
}

struct Splat {
    center: Vector2<f64>,
    /// Inverse of the screen covariance, as (a, b, c) of [[a, b], [b, c]].
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
    invdepth: f64,
    x0: u32,
    x1: u32,
    y0: u32,
    y1: u32,
}

fn param_key(g: &Gaussian) -> [f64; 14] {
    let q = g.rotation.quaternion();
    [
        g.mean.x, g.mean.y, g.mean.z, g.scale.x, g.scale.y, g.scale.z, q.i, q.j, q.k, q.w, g.opacity,
        g.color[0], g.color[1], g.color[2],
    ]
}

/// Front-to-back order: camera depth, then the Gaussian's parameters so
/// that exact-depth ties do not depend on input order.
fn front_to_back(a: (f64, &Gaussian, usize), b: (f64, &Gaussian, usize)) -> Ordering {
    a.0.total_cmp(&b.0)
        .then_with(|| {
            param_key(a.1)
                .iter()
                .zip(param_key(b.1).iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
        .then(a.2.cmp(&b.2))
}

pub fn rasterize(
    cloud: &GaussianCloud,
    view: &ViewState,
    settings: &RenderSettings,
) -> Result<RenderOutput, SplatError> {
    settings.validate()?;
    let mut view = *view;
    view.width = settings.width;
    view.height = settings.height;
    view.fov_y = settings.fov_y;
    let camera = SplatCamera::new(&view, settings.near, settings.far)?;

    let mut visible: Vec<(f64, &Gaussian, usize, ProjectedGaussian)> = cloud
        .gaussians
        .iter()
        .enumerate()
        .filter_map(|(i, g)| {
            project_gaussian(&g.mean, &g.scale, &g.rotation, &camera).map(|p| (p.depth, g, i, p))
        })
        .collect();
    visible.sort_by(|a, b| front_to_back((a.0, a.1, a.2), (b.0, b.1, b.2)));

    let (w, h) = (settings.width, settings.height);
    let splats: Vec<Splat> = visible
        .iter()
        .map(|(_, g, _, p)| {
            let inv = p.covariance.try_inverse().expect("dilated covariance is invertible");
            let clamp = |lo: f64, hi: u32| lo.clamp(0.0, (hi - 1) as f64) as u32;
            Splat {
                center: p.center,
                conic: [inv[(0, 0)], inv[(0, 1)], inv[(1, 1)]],
                opacity: g.opacity,
                color: g.color,
                invdepth: 1.0 / p.depth,
                x0: clamp((p.center.x - p.radius).floor(), w),
                x1: clamp((p.center.x + p.radius).ceil(), w),
                y0: clamp((p.center.y - p.radius).floor(), h),
                y1: clamp((p.center.y + p.radius).ceil(), h),
            }
        })
        .collect();

    let ts = settings.tile_size;
    let tiles_x = w.div_ceil(ts);
    let tiles_y = h.div_ceil(ts);
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); (tiles_x * tiles_y) as usize];
    for (i, s) in splats.iter().enumerate() {
        for ty in s.y0 / ts..=s.y1 / ts {
            for tx in s.x0 / ts..=s.x1 / ts {
                bins[(ty * tiles_x + tx) as usize].push(i as u32);
            }
        }
    }

    let bg = settings.background.map(f64::from);
    let threshold = settings.alpha_threshold;
    let tiles: Vec<(u32, u32, Vec<([f32; 4], f32)>)> = bins
        .par_iter()
        .enumerate()
        .map(|(tile, bin)| {
            let tx = tile as u32 % tiles_x;
            let ty = tile as u32 / tiles_x;
            let (px0, py0) = (tx * ts, ty * ts);
            let (px1, py1) = ((px0 + ts).min(w), (py0 + ts).min(h));
            let mut out = Vec::with_capacity(((px1 - px0) * (py1 - py0)) as usize);
            for y in py0..py1 {
                for x in px0..px1 {
                    out.push(shade_pixel(&splats, bin, x, y, threshold, bg));
                }
            }
            (tx, ty, out)
        })
        .collect();

    let mut color = ColorImage::filled(w, h, [0.0; 4]);
    let mut invdepth = DepthImage::filled(w, h, 0.0);
    for (tx, ty, out) in tiles {
        let (px0, py0) = (tx * ts, ty * ts);
        let tw = (px0 + ts).min(w) - px0;
        for (k, (c, d)) in out.into_iter().enumerate() {
            let x = px0 + k as u32 % tw;
            let y = py0 + k as u32 / tw;
            *color.get_mut(x, y) = c;
            *invdepth.get_mut(x, y) = d;
        }
    }
    Ok(RenderOutput { color, invdepth })
}

fn shade_pixel(splats: &[Splat], bin: &[u32], x: u32, y: u32, threshold: f64, bg: [f64; 3]) -> ([f32; 4], f32) {
    let p = Vector2::new(x as f64, y as f64);
    let mut rgb = [0.0f64; 3];
    let mut alpha = 0.0f64;
    let mut inv = 0.0f64;
    let mut transmittance = 1.0f64;
    for &i in bin {
        let s = &splats[i as usize];
        if x < s.x0 || x > s.x1 || y < s.y0 || y > s.y1 {
            continue;
        }
        let d = p - s.center;
        let [a, b, c] = s.conic;
        let power = -0.5 * (a * d.x * d.x + 2.0 * b * d.x * d.y + c * d.y * d.y);
        if power > 0.0 {
            continue;
        }
        let a_i = (s.opacity * power.exp()).min(MAX_SPLAT_ALPHA);
        if a_i < threshold {
            continue;
        }
        let weight = a_i * transmittance;
        for k in 0..3 {
            rgb[k] += s.color[k] * weight;
        }
        alpha += weight;
        inv += s.invdepth * weight;
        transmittance *= 1.0 - a_i;
        if transmittance < MIN_TRANSMITTANCE {
            break;
        }
    }
    let rest = 1.0 - alpha;
    (
        [
            (rgb[0] + rest * bg[0]) as f32,
            (rgb[1] + rest * bg[1]) as f32,
            (rgb[2] + rest * bg[2]) as f32,
            alpha as f32,
        ],
        inv as f32,
    )
}

/// Applies an object pose (in its client convention) and a uniform scale to
/// every Gaussian: means are scaled, rotated and translated, rotations are
/// left-multiplied by the pose rotation and scales multiplied.
pub fn transform_cloud(cloud: &GaussianCloud, pose: &Pose, scale: f64) -> Result<GaussianCloud, SplatError> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(SplatError::NonPositiveScale(scale));
    }
    pose.validate()?;
    let (r, t) = pose.to_renderer_frame();
    let q = pose.renderer_rotation();
    let gaussians = cloud
        .gaussians
        .iter()
        .map(|g| Gaussian {
            mean: r * (g.mean * scale) + t,
            scale: g.scale * scale,
            rotation: q * g.rotation,
            ..*g
        })
        .collect();
    Ok(GaussianCloud { gaussians })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Convention;

    fn on_axis(z: f64, s: f64, opacity: f64, color: [f64; 3]) -> Gaussian {
        Gaussian {
            mean: Vector3::new(0.0, 0.0, z),
            scale: Vector3::new(s, s, s),
            rotation: UnitQuaternion::identity(),
            opacity,
            color,
        }
    }

    fn view64() -> ViewState {
        ViewState::identity(60f64.to_radians(), 64, 64)
    }

    #[test]
    fn empty_cloud_renders_background() {
        let mut settings = RenderSettings::new(64, 64, 60f64.to_radians());
        settings.background = [0.2, 0.3, 0.4];
        let out = rasterize(&GaussianCloud::default(), &view64(), &settings).unwrap();
        assert!(out.color.pixels().iter().all(|p| *p == [0.2, 0.3, 0.4, 0.0]));
        assert!(out.invdepth.pixels().iter().all(|d| *d == 0.0));
    }

    #[test]
    fn behind_camera_is_culled() {
        let cam = SplatCamera::new(&view64(), 0.01, 100.0).unwrap();
        let g = on_axis(-2.0, 0.1, 1.0, [1.0; 3]);
        assert!(project_gaussian(&g.mean, &g.scale, &g.rotation, &cam).is_none());
        let g = on_axis(0.005, 0.1, 1.0, [1.0; 3]);
        assert!(project_gaussian(&g.mean, &g.scale, &g.rotation, &cam).is_none());
    }

    #[test]
    fn offscreen_is_culled() {
        let cam = SplatCamera::new(&view64(), 0.01, 100.0).unwrap();
        let g = Gaussian {
            mean: Vector3::new(50.0, 0.0, 2.0),
            ..on_axis(2.0, 0.01, 1.0, [1.0; 3])
        };
        assert!(project_gaussian(&g.mean, &g.scale, &g.rotation, &cam).is_none());
    }

    #[test]
    fn single_gaussian_center_alpha_and_decay() {
        let settings = RenderSettings::new(64, 64, 60f64.to_radians());
        for opacity in [0.3, 0.75, 1.0] {
            let cloud = GaussianCloud::new(vec![on_axis(3.0, 0.2, opacity, [1.0, 0.5, 0.25])]).unwrap();
            let out = rasterize(&cloud, &view64(), &settings).unwrap();
            let center = out.color.get(32, 32)[3] as f64;
            assert!((center - opacity.min(0.99)).abs() < 1e-6, "{center} vs {opacity}");
            let mut prev = center;
            for dx in 1..20 {
                let a = out.color.get(32 + dx, 32)[3] as f64;
                assert!(a <= prev);
                prev = a;
            }
            assert!((out.invdepth.get(32, 32) / out.color.get(32, 32)[3] - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn invdepth_is_zero_exactly_where_alpha_is() {
        let settings = RenderSettings::new(64, 64, 60f64.to_radians());
        let cloud = GaussianCloud::new(vec![on_axis(3.0, 0.1, 0.8, [1.0; 3])]).unwrap();
        let out = rasterize(&cloud, &view64(), &settings).unwrap();
        let mut empty = 0;
        for (c, d) in out.color.pixels().iter().zip(out.invdepth.pixels()) {
            assert_eq!(c[3] == 0.0, *d == 0.0);
            empty += (c[3] == 0.0) as u32;
        }
        assert!(empty > 0);
    }

    #[test]
    fn tile_size_does_not_change_the_image() {
        let cloud = GaussianCloud::demo_scene();
        let view = view64();
        let mut settings = RenderSettings::new(64, 64, 60f64.to_radians());
        let a = rasterize(&cloud, &view, &settings).unwrap();
        settings.tile_size = 8;
        let b = rasterize(&cloud, &view, &settings).unwrap();
        settings.tile_size = 64;
        let c = rasterize(&cloud, &view, &settings).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn settings_validation() {
        let mut s = RenderSettings::new(8, 8, 1.0);
        s.tile_size = 12;
        assert!(s.validate().is_err());
        let mut s = RenderSettings::new(8, 8, 1.0);
        s.near = 2.0;
        s.far = 1.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn identity_transform_is_a_no_op() {
        let cloud = GaussianCloud::demo_scene();
        let out = transform_cloud(&cloud, &Pose::identity(Convention::GsRhYdown), 1.0).unwrap();
        assert_eq!(out, cloud);
    }

    #[test]
    fn translation_shifts_means_only() {
        let cloud = GaussianCloud::demo_scene();
        let pose = Pose::new([1.0, -2.0, 0.5], [0.0, 0.0, 0.0, 1.0], Convention::GsRhYdown).unwrap();
        let out = transform_cloud(&cloud, &pose, 1.0).unwrap();
        for (a, b) in cloud.gaussians.iter().zip(&out.gaussians) {
            assert_eq!(b.mean, a.mean + Vector3::new(1.0, -2.0, 0.5));
            assert_eq!(b.covariance(), a.covariance());
        }
    }

    #[test]
    fn scale_and_bad_scale() {
        let cloud = GaussianCloud::demo_scene();
        let id = Pose::identity(Convention::GsRhYdown);
        let out = transform_cloud(&cloud, &id, 2.0).unwrap();
        assert_eq!(out.gaussians[0].scale, cloud.gaussians[0].scale * 2.0);
        assert_eq!(out.gaussians[0].mean, cloud.gaussians[0].mean * 2.0);
        assert_eq!(
            transform_cloud(&cloud, &id, 0.0).unwrap_err(),
            SplatError::NonPositiveScale(0.0)
        );
    }

    #[test]
    fn invalid_gaussians_are_rejected() {
        let mut g = on_axis(1.0, 0.1, 0.5, [0.5; 3]);
        g.scale.y = 0.0;
        assert!(GaussianCloud::new(vec![g]).is_err());
        let mut g = on_axis(1.0, 0.1, 1.5, [0.5; 3]);
        assert!(GaussianCloud::new(vec![g]).is_err());
        g.opacity = 0.5;
        g.color = [2.0, 0.0, 0.0];
        assert!(GaussianCloud::new(vec![g]).is_err());
    }
}
