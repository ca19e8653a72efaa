use gapnav::dynamics::{exp_so3, rot_x, rot_z};
use gapnav::renderer::{
    check_collision, generate_gap, preprocess, render_depth, render_depth_bruteforce, CameraConfig, CameraModel,
    DepthImage, SceneConfig, TriMesh,
};
use gapnav::sim::Course;
use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bits(img: &DepthImage) -> Vec<u64> {
    img.data.iter().map(|d| d.to_bits()).collect()
}

fn random_camera(rng: &mut ChaCha8Rng, cfg: &CameraConfig, near: Vector3<f64>) -> CameraModel {
    let offset = Vector3::new(
        rng.gen_range(-4.0..0.5),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-0.8..0.8),
    );
    let w = Vector3::from_fn(|_, _| rng.gen_range(-0.6..0.6));
    CameraModel::new(cfg, near + offset, exp_so3(&w))
}

#[test]
fn culled_renderer_is_bit_identical_to_brute_force() {
    let cfg = CameraConfig::default();
    let scene_cfg = SceneConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut hits = 0;
    for i in 0..100u64 {
        let n = 1 + (i % 3) as usize;
        let mut gaps = Vec::new();
        let mut x = 0.0;
        for g in 0..n {
            let gap = generate_gap(i * 10 + g as u64, &scene_cfg, x).unwrap();
            x = gap.pose.position.x;
            gaps.push(gap);
        }
        let course = Course::new(gaps);
        let target = course.gaps[0].pose.position;
        for _ in 0..3 {
            let cam = random_camera(&mut rng, &cfg, target);
            let fast = render_depth(&course.mesh, &cam);
            let slow = render_depth_bruteforce(&course.mesh, &cam);
            assert_eq!(bits(&fast), bits(&slow), "scene {i}");
            hits += fast.data.iter().filter(|&&d| d < cfg.d_max).count();
        }
    }
    assert!(hits > 10_000, "scenes barely visible: {hits} hit pixels");
}

#[test]
fn close_range_views_agree_with_brute_force() {
    let cfg = CameraConfig::default();
    let scene = generate_gap(5, &SceneConfig::default(), 0.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let v = rng.gen_range(0..scene.mesh.vertices.len());
        let p = scene.mesh.vertices[v] + Vector3::from_fn(|_, _| rng.gen_range(-0.05..0.05));
        let cam = CameraModel::new(&cfg, p, exp_so3(&Vector3::from_fn(|_, _| rng.gen_range(-1.5..1.5))));
        assert_eq!(
            bits(&render_depth(&scene.mesh, &cam)),
            bits(&render_depth_bruteforce(&scene.mesh, &cam))
        );
    }
}

fn wall(x: f64, half: f64) -> TriMesh {
    let v = vec![
        Vector3::new(x, -half, -half),
        Vector3::new(x, half, -half),
        Vector3::new(x, half, half),
        Vector3::new(x, -half, half),
    ];
    TriMesh::new(v, vec![[0, 1, 2], [0, 2, 3]]).unwrap()
}

/// World-from-camera homogeneous transform; camera axes are
/// (right, down, forward) as in the usual pinhole convention.
fn world_from_camera(cam: &CameraModel) -> Matrix4<f64> {
    let body_from_cam = Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0);
    let r = cam.rotation * body_from_cam;
    let mut t = Matrix4::identity();
    t.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    t.fixed_view_mut::<3, 1>(0, 3).copy_from(&cam.position);
    t
}

#[test]
fn depth_matches_homogeneous_projection_oracle() {
    let cfg = CameraConfig::default();
    let mesh = wall(2.0, 50.0);
    let k = cfg.intrinsics();
    for (yaw, pitch) in [(0.0, 0.0), (0.3, 0.0), (-0.2, 0.25), (0.4, -0.3)] {
        let rot = rot_z(yaw) * exp_so3(&Vector3::new(0.0, pitch, 0.0));
        let cam = CameraModel::new(&cfg, Vector3::new(-0.5, 0.2, 1.0), rot);
        let img = render_depth(&mesh, &cam);
        let t = world_from_camera(&cam);
        let t_inv = t.try_inverse().unwrap();
        for v in 0..cfg.height {
            for u in 0..cfg.width {
                // Back-project the pixel center at unit depth and intersect with x = 2.
                let xn = (u as f64 + 0.5 - k.cx) / k.fx;
                let yn = (v as f64 + 0.5 - k.cy) / k.fy;
                let origin = t * Vector4::new(0.0, 0.0, 0.0, 1.0);
                let unit = t * Vector4::new(xn, yn, 1.0, 1.0);
                let dir = unit - origin;
                let s = (2.0 - origin.x) / dir.x;
                let hit = origin + dir * s;
                let in_cam = t_inv * hit;
                let d = img.at(u, v);
                assert!((d - in_cam.z).abs() < 1e-12, "pixel ({u},{v}): {d} vs {}", in_cam.z);
            }
        }
    }
}

#[test]
fn simple_depth_cases() {
    let cfg = CameraConfig::default();
    let cam = CameraModel::new(&cfg, Vector3::zeros(), Matrix3::identity());
    let img = render_depth(&wall(2.0, 10.0), &cam);
    let (cu, cv) = (cfg.width / 2, cfg.height / 2);
    assert!((img.at(cu, cv) - 2.0).abs() < 1e-12);

    let flat = SceneConfig {
        vertex_jitter: 0.0,
        tilt_deg: [0.0, 0.0],
        distance: [4.0, 4.0],
        ..SceneConfig::default()
    };
    let scene = generate_gap(1, &flat, 0.0).unwrap();
    let cam = CameraModel::new(
        &cfg,
        scene.pose.position - Vector3::new(4.0, 0.0, 0.0),
        Matrix3::identity(),
    );
    let img = render_depth(&scene.mesh, &cam);
    for (u, v) in [(cu - 1, cv - 1), (cu, cv - 1), (cu - 1, cv), (cu, cv)] {
        assert_eq!(img.at(u, v), cfg.d_max);
    }
    let inner: Vec<[f64; 2]> = scene.inner.to_vec();
    assert_eq!(inner, vec![[0.4, 0.2], [-0.4, 0.2], [-0.4, -0.2], [0.4, -0.2]]);
    assert!((scene.pose.normal() - Vector3::x()).norm() < 1e-15);
}

#[test]
fn touching_camera_reports_near_clip() {
    let cfg = CameraConfig::default();
    let cam = CameraModel::new(&cfg, Vector3::new(2.0 - 1e-8, 0.0, 0.0), Matrix3::identity());
    let img = render_depth(&wall(2.0, 10.0), &cam);
    assert!(img.data.iter().all(|&d| d == cfg.near_clip));
}

#[test]
fn translation_and_background_invariance() {
    let cfg = CameraConfig::default();
    let scene = generate_gap(8, &SceneConfig::default(), 0.0).unwrap();
    let cam = CameraModel::new(&cfg, Vector3::new(0.0, 0.0, 1.5), rot_x(0.1));
    let base = render_depth(&scene.mesh, &cam);
    let off = Vector3::new(3.0, -2.0, 0.5);
    let moved = render_depth(
        &scene.mesh.translated(&off),
        &CameraModel::new(&cfg, cam.position + off, cam.rotation),
    );
    for (a, b) in base.data.iter().zip(&moved.data) {
        assert!((a - b).abs() < 1e-12);
    }
    let far = CameraConfig {
        d_max: 50.0,
        ..cfg.clone()
    };
    let wide = render_depth(&scene.mesh, &CameraModel::new(&far, cam.position, cam.rotation));
    for (a, b) in base.data.iter().zip(&wide.data) {
        if *a < cfg.d_max {
            assert_eq!(a, b);
        } else {
            assert_eq!(*b, 50.0);
        }
    }
}

#[test]
fn preprocessing_hand_values() {
    let mut img = DepthImage::filled(4, 2, 20.0);
    img.data = vec![1.0, 2.0, 20.0, 20.0, 4.0, 10.0, 20.0, 8.0];
    let t = preprocess(&img).unwrap();
    assert_eq!(t.shape(), &[1, 1, 2]);
    assert!((t.values()[0] - 1.0).abs() < 1e-12);
    assert!((t.values()[1] - 0.125).abs() < 1e-12);

    let t = preprocess(&DepthImage::filled(32, 24, 2.0)).unwrap();
    assert_eq!(t.shape(), &[1, 12, 16]);
    assert!(t.values().iter().all(|v| (v - 0.5).abs() < 1e-12));
    let t = preprocess(&DepthImage::filled(32, 24, 20.0)).unwrap();
    assert!(t.values().iter().all(|v| (v - 0.05).abs() < 1e-12));

    let mut bad = DepthImage::filled(4, 4, 1.0);
    bad.data[5] = 0.0;
    assert!(preprocess(&bad).is_err());
}

#[test]
fn collision_geometry() {
    let flat = SceneConfig {
        vertex_jitter: 0.0,
        tilt_deg: [0.0, 0.0],
        ..SceneConfig::default()
    };
    let scene = generate_gap(2, &flat, 0.0).unwrap();
    let (hit, d) = check_collision(&scene.pose.position, &scene.mesh, 0.1);
    assert!(!hit);
    assert!((d - 0.2).abs() < 1e-12);
    let (hit, d) = check_collision(&scene.mesh.vertices[4], &scene.mesh, 0.1);
    assert!(hit && d == 0.0);
    let behind = scene.pose.position - Vector3::new(5.0, 0.0, 0.0);
    assert!(check_collision(&behind, &scene.mesh, 0.1).1 >= 5.0 - 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn seeded_scenes_are_deterministic_and_valid(seed in any::<u64>()) {
        let cfg = SceneConfig::default();
        let a = generate_gap(seed, &cfg, 0.0).unwrap();
        let b = generate_gap(seed, &cfg, 0.0).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.mesh.vertices.len(), 12);
        prop_assert!(a.tilt.abs() <= 80f64.to_radians() + 1e-12);
        let d = a.pose.position.x;
        prop_assert!((3.0..=5.0).contains(&d));
        prop_assert!(a.mesh.validate().is_ok());
        prop_assert!(a.inside_aperture([0.0, 0.0]));
        for j in &a.jitter {
            prop_assert!(j[0].abs() <= cfg.vertex_jitter && j[1].abs() <= cfg.vertex_jitter);
        }
    }
}
