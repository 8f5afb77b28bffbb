//! Pose conventions, camera model and depth conversions.
//!
//! The renderer works in a right-handed frame with +X right, +Y down and +Z
//! forward (the COLMAP camera frame used by Gaussian-splatting pipelines).
//! Game-engine clients typically use a left-handed frame with +Y up and +Z
//! forward. The two differ by the reflection `M = diag(1, -1, 1)`, applied to
//! points as `M·p` and to rotations as `M·R·M`.

use nalgebra::{Matrix3, Matrix4, Quaternion, Rotation3, UnitQuaternion, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::image::DepthImage;

/// Depth written where nothing was rendered.
pub const DEFAULT_FAR_SENTINEL: f32 = 1e10;

/// Vertical field of view used until a client sends one.
pub const DEFAULT_FOV_Y_DEG: f64 = 60.0;

/// Inverse depths at or below this are background.
pub const INVDEPTH_EPSILON: f64 = 1e-12;

const ORTHONORMAL_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("malformed pose: {0}")]
    MalformedPose(String),
    #[error("malformed view: {0}")]
    MalformedView(String),
    #[error("malformed depth at pixel {index}: {value}")]
    MalformedDepth { index: usize, value: f32 },
    #[error("degenerate projection: {0}")]
    DegenerateProjection(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convention {
    /// Left-handed, +Y up, +Z forward.
    UnityLhYup,
    /// Right-handed, +X right, +Y down, +Z forward.
    GsRhYdown,
}

impl Convention {
    /// Linear map from this convention's axes to the renderer's axes. It is
    /// its own inverse.
    pub fn basis_change(self) -> Matrix3<f64> {
        match self {
            Convention::UnityLhYup => Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, 1.0)),
            Convention::GsRhYdown => Matrix3::identity(),
        }
    }
}

impl std::str::FromStr for Convention {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "unity_lh_yup" => Ok(Convention::UnityLhYup),
            "gs_rh_ydown" => Ok(Convention::GsRhYdown),
            other => Err(format!("unknown convention {other:?}; expected unity_lh_yup or gs_rh_ydown")),
        }
    }
}

/// A rigid transform expressed in some client convention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub rotation: Quaternion<f64>,
    pub convention: Convention,
}

impl Pose {
    /// Builds a pose from a position and an `(x, y, z, w)` quaternion.
    pub fn new(
        position: [f64; 3],
        rotation_xyzw: [f64; 4],
        convention: Convention,
    ) -> Result<Self, GeometryError> {
        let pose = Self {
            position: Vector3::from(position),
            rotation: Quaternion::from(Vector4::from(rotation_xyzw)),
            convention,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn identity(convention: Convention) -> Self {
        Self {
            position: Vector3::zeros(),
            rotation: Quaternion::identity(),
            convention,
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !self.position.iter().all(|c| c.is_finite()) {
            return Err(GeometryError::MalformedPose(
                "non-finite position".into(),
            ));
        }
        if !self.rotation.coords.iter().all(|c| c.is_finite()) {
            return Err(GeometryError::MalformedPose(
                "non-finite rotation".into(),
            ));
        }
        let norm = self.rotation.norm();
        if (norm - 1.0).abs() > crate::wire::QUATERNION_NORM_TOLERANCE {
            return Err(GeometryError::MalformedPose(format!(
                "quaternion norm {norm} is not within 1e-4 of 1"
            )));
        }
        Ok(())
    }

    pub fn position_array(&self) -> [f64; 3] {
        self.position.into()
    }

    pub fn rotation_xyzw(&self) -> [f64; 4] {
        self.rotation.coords.into()
    }

    /// Rotation and translation of this pose expressed in the renderer frame.
    pub fn to_renderer_frame(&self) -> (Matrix3<f64>, Vector3<f64>) {
        let m = self.convention.basis_change();
        let r = UnitQuaternion::from_quaternion(self.rotation).to_rotation_matrix();
        (m * r.matrix() * m, m * self.position)
    }

    /// Same rotation as [`Pose::to_renderer_frame`], as a unit quaternion.
    /// Conjugating by `diag(1, -1, 1)` negates the x and z quaternion parts.
    pub fn renderer_rotation(&self) -> UnitQuaternion<f64> {
        let q = UnitQuaternion::from_quaternion(self.rotation).into_inner();
        let q = match self.convention {
            Convention::UnityLhYup => Quaternion::new(q.w, -q.i, q.j, -q.k),
            Convention::GsRhYdown => q,
        };
        UnitQuaternion::new_unchecked(q)
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    /// Square pixels, principal point at the image center.
    pub fn from_fov_y(fov_y: f64, width: u32, height: u32) -> Self {
        let fy = height as f64 / (2.0 * (fov_y / 2.0).tan());
        Self {
            fx: fy,
            fy,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }
}

/// The renderer's camera: a world-to-camera rigid transform plus the image
/// it produces.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewState {
    pub world_to_camera: Matrix4<f64>,
    pub fov_y: f64,
    pub width: u32,
    pub height: u32,
}

impl ViewState {
    pub fn identity(fov_y: f64, width: u32, height: u32) -> Self {
        Self {
            world_to_camera: Matrix4::identity(),
            fov_y,
            width,
            height,
        }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.world_to_camera.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.world_to_camera.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics::from_fov_y(self.fov_y, self.width, self.height)
    }

    pub fn world_to_camera_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let w = &self.world_to_camera;
        if !w.iter().all(|c| c.is_finite()) {
            return Err(GeometryError::MalformedView("non-finite matrix".into()));
        }
        let last = w.row(3);
        if last[0] != 0.0 || last[1] != 0.0 || last[2] != 0.0 || last[3] != 1.0 {
            return Err(GeometryError::MalformedView(
                "last row is not (0, 0, 0, 1)".into(),
            ));
        }
        let r = self.rotation();
        let gram_err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if gram_err > ORTHONORMAL_TOLERANCE {
            return Err(GeometryError::MalformedView(format!(
                "rotation block not orthonormal (error {gram_err:e})"
            )));
        }
        let det = r.determinant();
        if (det - 1.0).abs() > ORTHONORMAL_TOLERANCE {
            return Err(GeometryError::MalformedView(format!(
                "rotation determinant {det} is not +1"
            )));
        }
        if !(self.fov_y.is_finite() && self.fov_y > 0.0 && self.fov_y < std::f64::consts::PI) {
            return Err(GeometryError::MalformedView(format!(
                "fov_y {} outside (0, pi)",
                self.fov_y
            )));
        }
        Ok(())
    }
}

/// Converts a client camera pose (camera-to-world) into the renderer's view.
pub fn client_pose_to_view(
    pose: &Pose,
    fov_y: f64,
    width: u32,
    height: u32,
) -> Result<ViewState, GeometryError> {
    pose.validate()?;
    let (r, p) = pose.to_renderer_frame();
    let rt = r.transpose();
    let t = -(rt * p);
    let mut w = Matrix4::identity();
    w.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
    w.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
    let view = ViewState {
        world_to_camera: w,
        fov_y,
        width,
        height,
    };
    view.validate()?;
    Ok(view)
}

/// Inverse of [`client_pose_to_view`]. The returned quaternion has `w >= 0`.
pub fn view_to_client_pose(view: &ViewState, convention: Convention) -> Result<Pose, GeometryError> {
    view.validate()?;
    let rt = view.rotation();
    let r = rt.transpose();
    let p = -(r * view.translation());
    let m = convention.basis_change();
    let client_r = m * r * m;
    let client_p = m * p;
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(client_r));
    let mut q = q.into_inner();
    if q.w < 0.0 {
        q = -q;
    }
    Ok(Pose {
        position: client_p,
        rotation: q,
        convention,
    })
}

fn inv_to_linear(inv: f32, far_sentinel: f32) -> Option<f32> {
    if !(inv.is_finite() && inv >= 0.0) {
        return None;
    }
    if f64::from(inv) <= INVDEPTH_EPSILON {
        Some(far_sentinel)
    } else {
        Some((1.0 / f64::from(inv)) as f32)
    }
}

pub fn invdepth_to_linear(inv: &DepthImage, far_sentinel: f32) -> Result<DepthImage, GeometryError> {
    let mut out = Vec::with_capacity(inv.pixels().len());
    for (index, &value) in inv.pixels().iter().enumerate() {
        out.push(
            inv_to_linear(value, far_sentinel)
                .ok_or(GeometryError::MalformedDepth { index, value })?,
        );
    }
    Ok(DepthImage::from_pixels(inv.width(), inv.height(), out).expect("same dimensions"))
}

pub fn linear_to_invdepth(z: &DepthImage, far_sentinel: f32) -> Result<DepthImage, GeometryError> {
    let mut out = Vec::with_capacity(z.pixels().len());
    for (index, &value) in z.pixels().iter().enumerate() {
        // NaN fails the comparison and lands here too.
        if !(value > 0.0) {
            return Err(GeometryError::MalformedDepth { index, value });
        }
        out.push(if value >= far_sentinel {
            0.0
        } else {
            (1.0 / f64::from(value)) as f32
        });
    }
    Ok(DepthImage::from_pixels(z.width(), z.height(), out).expect("same dimensions"))
}

/// Clip-space projection for a camera looking down +Z with +Y down.
///
/// Normalized device x and y span `[-1, 1]` across the image; depth maps
/// `near → 0` and `far → 1`. Use [`ndc_to_pixel`] to recover pixel
/// coordinates.
pub fn projection_matrix(intr: &Intrinsics, near: f64, far: f64) -> Result<Matrix4<f64>, GeometryError> {
    if !(near.is_finite() && far.is_finite() && near > 0.0 && far > near) {
        return Err(GeometryError::DegenerateProjection(format!(
            "need 0 < near < far, got near={near} far={far}"
        )));
    }
    let w = intr.width as f64;
    let h = intr.height as f64;
    #[rustfmt::skip]
    let p = Matrix4::new(
        2.0 * intr.fx / w, 0.0,               2.0 * intr.cx / w - 1.0, 0.0,
        0.0,               2.0 * intr.fy / h, 2.0 * intr.cy / h - 1.0, 0.0,
        0.0,               0.0,               far / (far - near),      -far * near / (far - near),
        0.0,               0.0,               1.0,                     0.0,
    );
    Ok(p)
}

/// Projects a camera-space point through `proj`; returns `(u, v, ndc_depth)`.
pub fn project_point(proj: &Matrix4<f64>, width: u32, height: u32, p: &Vector3<f64>) -> (f64, f64, f64) {
    let clip = proj * p.push(1.0);
    let ndc = clip.xyz() / clip.w;
    let (u, v) = ndc_to_pixel(ndc.x, ndc.y, width, height);
    (u, v, ndc.z)
}

pub fn ndc_to_pixel(x: f64, y: f64, width: u32, height: u32) -> (f64, f64) {
    ((x + 1.0) * 0.5 * width as f64, (y + 1.0) * 0.5 * height as f64)
}
