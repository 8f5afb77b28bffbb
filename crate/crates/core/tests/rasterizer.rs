mod common;

use nalgebra::{UnitQuaternion, Vector3};
use proptest::prelude::*;

use splatbus::geometry::{Convention, Pose, ViewState};
use splatbus::splatref::{
    rasterize, read_ply, transform_cloud, write_ply, Gaussian, GaussianCloud, PlyError, RenderSettings,
    COVARIANCE_DILATION, MAX_SPLAT_ALPHA,
};

fn on_axis(z: f64, sigma: f64, opacity: f64) -> Gaussian {
    Gaussian {
        mean: Vector3::new(0.0, 0.0, z),
        scale: Vector3::repeat(sigma),
        rotation: UnitQuaternion::identity(),
        opacity,
        color: [0.2, 0.4, 0.6],
    }
}

#[test]
fn single_gaussian_matches_closed_form_profile() {
    let (w, h, fov) = (48u32, 32u32, 0.8f64);
    let view = ViewState::identity(fov, w, h);
    let settings = RenderSettings::new(w, h, fov);
    let (z, sigma, opacity) = (5.0, 0.3, 0.7);
    let out = rasterize(&GaussianCloud::new(vec![on_axis(z, sigma, opacity)]).unwrap(), &view, &settings).unwrap();
    let f = h as f64 / (2.0 * (fov / 2.0).tan());
    let var = (f * sigma / z).powi(2) + COVARIANCE_DILATION;
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - w as f64 / 2.0, y as f64 - h as f64 / 2.0);
            let mut a = opacity * (-0.5 * (dx * dx + dy * dy) / var).exp();
            // Below the threshold or well outside the footprint nothing is drawn.
            if a < 1.0 / 255.0 || (dx * dx + dy * dy).sqrt() > 3.0 * var.sqrt() + 1.0 {
                a = 0.0;
            }
            let got = out.color.get(x, y)[3] as f64;
            assert!((got - a).abs() < 1e-6, "pixel ({x}, {y}): {got} vs {a}");
            let inv = out.invdepth.get(x, y);
            assert!((*inv as f64 - a / z).abs() < 1e-6);
        }
    }
}

#[test]
fn alpha_is_clamped_for_opaque_gaussians() {
    let view = ViewState::identity(1.0, 16, 16);
    let out = rasterize(&GaussianCloud::new(vec![on_axis(3.0, 0.2, 1.0)]).unwrap(), &view, &RenderSettings::new(16, 16, 1.0))
        .unwrap();
    assert_eq!(out.color.get(8, 8)[3], MAX_SPLAT_ALPHA as f32);
}

#[test]
fn saturated_pixels_stop_accumulating() {
    // Many opaque layers: transmittance drops under the floor, so a far
    // colored layer behind them contributes nothing.
    let mut g: Vec<_> = (0..4).map(|i| on_axis(2.0 + 0.1 * i as f64, 0.3, 1.0)).collect();
    let mut far = on_axis(8.0, 0.5, 1.0);
    far.color = [1.0, 1.0, 1.0];
    g.push(far);
    for (i, gg) in g.iter_mut().enumerate().take(4) {
        gg.color = [0.0, 0.0, 0.1 * i as f64];
    }
    let view = ViewState::identity(1.0, 16, 16);
    let out = rasterize(&GaussianCloud::new(g).unwrap(), &view, &RenderSettings::new(16, 16, 1.0)).unwrap();
    // Each near layer passes 1%, so three of them drop below the floor.
    let px = out.color.get(8, 8);
    assert!(px[0] < 1e-5, "far white layer leaked: {px:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn order_of_the_cloud_does_not_matter(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let cloud = common::random_cloud(&mut rng, 25);
        let view = ViewState::identity(1.0, 40, 30);
        let s = RenderSettings::new(40, 30, 1.0);
        let a = rasterize(&cloud, &view, &s).unwrap();
        let b = rasterize(&common::shuffled(&cloud, &mut rng), &view, &s).unwrap();
        prop_assert!(common::color_bits_equal(&a.color, &b.color));
        prop_assert!(common::bits_equal(a.invdepth.pixels(), b.invdepth.pixels()));
    }

    #[test]
    fn outputs_stay_in_range(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let cloud = common::random_cloud(&mut rng, 25);
        let out = rasterize(&cloud, &ViewState::identity(1.0, 32, 32), &RenderSettings::new(32, 32, 1.0)).unwrap();
        for (c, d) in out.color.pixels().iter().zip(out.invdepth.pixels()) {
            prop_assert!((0.0..=1.0).contains(&c[3]));
            // Premultiplied: no channel exceeds coverage for colors in [0, 1].
            prop_assert!(c[..3].iter().all(|v| *v >= 0.0 && *v <= c[3] + 1e-6));
            prop_assert!(*d >= 0.0 && (*d > 0.0) == (c[3] > 0.0));
        }
    }

    /// Moving the object by a pose is the same as moving the camera by the
    /// inverse pose.
    #[test]
    fn object_pose_equals_inverse_camera_motion(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let cloud = GaussianCloud::new((0..3).map(|_| common::random_gaussian(&mut rng, [0.0, 0.0, 0.0], 0.4)).collect()).unwrap();
        let q = common::unit_quaternion(&mut rng);
        let pose = Pose::new([0.1, -0.2, 0.15], q, Convention::GsRhYdown).unwrap();
        let moved = transform_cloud(&cloud, &pose, 1.0).unwrap();
        let camera = Pose::new([0.0, 0.0, -4.0], [0.0, 0.0, 0.0, 1.0], Convention::GsRhYdown).unwrap();
        let view = splatbus::geometry::client_pose_to_view(&camera, 1.0, 48, 48).unwrap();
        let direct = rasterize(&moved, &view, &RenderSettings::new(48, 48, 1.0)).unwrap();

        let (r, t) = pose.to_renderer_frame();
        let mut m = nalgebra::Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        let relative = ViewState { world_to_camera: view.world_to_camera * m, ..view };
        let via_camera = rasterize(&cloud, &relative, &RenderSettings::new(48, 48, 1.0)).unwrap();
        let worst = direct.color.pixels().as_flattened().iter()
            .zip(via_camera.color.pixels().as_flattened())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        prop_assert!(worst < 1e-4, "deviation {worst}");
    }
}

// PLY: a file assembled byte by byte here, with properties in an unusual
// order, mixed scalar types and an extra element before the vertices.

fn push_f32(out: &mut Vec<u8>, v: f32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn hand_written_ply_decodes_to_the_expected_gaussians() {
    let header = "ply\nformat binary_little_endian 1.0\ncomment made by hand\n\
        element camera 1\nproperty uchar id\nproperty double fov\n\
        element vertex 2\n\
        property float opacity\nproperty float x\nproperty float y\nproperty float z\n\
        property float nx\nproperty float ny\nproperty float nz\n\
        property float f_dc_0\nproperty float f_dc_1\nproperty float f_dc_2\n\
        property float f_rest_0\n\
        property float scale_0\nproperty float scale_1\nproperty float scale_2\n\
        property float rot_0\nproperty float rot_1\nproperty float rot_2\nproperty float rot_3\n\
        end_header\n";
    let mut bytes = header.as_bytes().to_vec();
    bytes.push(7);
    bytes.extend_from_slice(&1.25f64.to_le_bytes());
    let rows: [[f32; 18]; 2] = [
        [0.0, 1.0, 2.0, 3.0, 0.0, 0.0, 1.0, 0.0, 0.5, -0.5, 9.0, -1.0, -2.0, 0.0, 2.0, 0.0, 0.0, 0.0],
        [-3.0, -1.0, 0.5, 8.0, 0.0, 0.0, 0.0, 10.0, -10.0, 1.0, 9.0, 0.0, 0.5, -0.5, 1.0, 1.0, 1.0, 1.0],
    ];
    for row in rows {
        for v in row {
            push_f32(&mut bytes, v);
        }
    }
    let cloud = read_ply(&bytes[..]).unwrap();
    assert_eq!(cloud.len(), 2);
    let c0 = 0.28209479177387814f64;
    for (g, row) in cloud.gaussians.iter().zip(rows) {
        let r = row.map(f64::from);
        assert_eq!(g.mean, Vector3::new(r[1], r[2], r[3]));
        assert!((g.opacity - sigmoid(r[0])).abs() < 1e-12);
        for k in 0..3 {
            assert!((g.scale[k] - r[11 + k].exp()).abs() < 1e-12);
            let want = (0.5 + c0 * r[7 + k]).clamp(0.0, 1.0);
            assert!((g.color[k] - want).abs() < 1e-12);
        }
        let n = (r[14] * r[14] + r[15] * r[15] + r[16] * r[16] + r[17] * r[17]).sqrt();
        let q = g.rotation.quaternion();
        assert!((q.w - r[14] / n).abs() < 1e-12);
        assert!((q.i - r[15] / n).abs() < 1e-12);
        assert!((q.j - r[16] / n).abs() < 1e-12);
        assert!((q.k - r[17] / n).abs() < 1e-12);
    }
}

#[test]
fn unsupported_ply_variants_are_named() {
    let ascii = b"ply\nformat ascii 1.0\nelement vertex 0\nend_header\n";
    assert!(matches!(read_ply(&ascii[..]), Err(PlyError::Unsupported(_))));
    let missing = b"ply\nformat binary_little_endian 1.0\nelement vertex 0\nproperty float x\nend_header\n";
    match read_ply(&missing[..]) {
        Err(PlyError::Unsupported(m)) => assert!(m.contains("opacity"), "{m}"),
        other => panic!("unexpected {other:?}"),
    }
    let truncated = b"ply\nformat binary_little_endian 1.0\nelement vertex 1\nproperty float x\nproperty float y\n\
        property float z\nproperty float opacity\nproperty float f_dc_0\nproperty float f_dc_1\nproperty float f_dc_2\n\
        property float scale_0\nproperty float scale_1\nproperty float scale_2\nproperty float rot_0\n\
        property float rot_1\nproperty float rot_2\nproperty float rot_3\nend_header\n\x00\x00";
    assert!(read_ply(&truncated[..]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn write_then_read_preserves_the_cloud(seed in any::<u64>(), n in 0usize..20) {
        let mut rng = common::rng(seed);
        let mut cloud = common::random_cloud(&mut rng, n);
        // Colors below the representable floor of the DC band would clamp.
        for g in &mut cloud.gaussians {
            g.color = g.color.map(|c| c.clamp(0.01, 0.99));
        }
        let mut buf = Vec::new();
        write_ply(&mut buf, &cloud).unwrap();
        let back = read_ply(&buf[..]).unwrap();
        prop_assert_eq!(back.len(), cloud.len());
        for (a, b) in cloud.gaussians.iter().zip(&back.gaussians) {
            // Stored as float32.
            prop_assert!((a.mean - b.mean).amax() < 1e-5);
            prop_assert!(((a.scale - b.scale).component_div(&a.scale)).amax() < 1e-5);
            prop_assert!((a.opacity - b.opacity).abs() < 1e-5);
            prop_assert!(a.color.iter().zip(&b.color).all(|(x, y)| (x - y).abs() < 1e-5));
            prop_assert!(a.rotation.angle_to(&b.rotation) < 1e-3);
        }
    }
}
