//! Triangle-mesh depth rendering and procedural gap scenes.
//!
//! A gap is a rectangular frame built from twelve vertices: four inner
//! (aperture) corners, four outer corners and four midpoints of the outer
//! edges. Each side of the frame is split into three triangles, giving a
//! twelve-triangle ring. In the gap frame the x-axis is the plane normal
//! (direction of travel), y points left and z up.
//!
//! The plain-text scene dump lists one `v x y z` line per vertex followed by
//! one `t i j k` line per triangle (zero-based indices), after a `#` header.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use diffcore::Tensor;
use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{rot_x, GapPose, QuadState};
use crate::error::{Error, Result};

/// Barycentric tolerance of the ray-triangle test.
pub const RAY_EPS: f64 = 1e-9;
/// Hits closer than this report the near-clip value.
pub const NEAR_HIT: f64 = 1e-6;
/// Hits within this distance of the current best keep the lower triangle index.
pub const TIE_EPS: f64 = 1e-12;
const MIN_TRIANGLE_AREA: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[usize; 3]>,
}

impl TriMesh {
    pub fn new(vertices: Vec<Vector3<f64>>, triangles: Vec<[usize; 3]>) -> Result<TriMesh> {
        let mesh = TriMesh { vertices, triangles };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, tri) in self.triangles.iter().enumerate() {
            if tri.iter().any(|&k| k >= self.vertices.len()) {
                return Err(Error::Input(format!("triangle {i} indexes a missing vertex")));
            }
            if self.area(i) <= MIN_TRIANGLE_AREA {
                return Err(Error::Input(format!("triangle {i} is degenerate")));
            }
        }
        if self.vertices.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::Input("non-finite mesh vertex".into()));
        }
        Ok(())
    }

    pub fn corners(&self, i: usize) -> [Vector3<f64>; 3] {
        let [a, b, c] = self.triangles[i];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn area(&self, i: usize) -> f64 {
        let [a, b, c] = self.corners(i);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    /// Appends `other`, re-indexing its triangles.
    pub fn extend(&mut self, other: &TriMesh) {
        let base = self.vertices.len();
        self.vertices.extend_from_slice(&other.vertices);
        self.triangles
            .extend(other.triangles.iter().map(|t| [t[0] + base, t[1] + base, t[2] + base]));
    }

    pub fn translated(&self, offset: &Vector3<f64>) -> TriMesh {
        TriMesh {
            vertices: self.vertices.iter().map(|v| v + offset).collect(),
            triangles: self.triangles.clone(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "# trimesh vertices={} triangles={}\n",
            self.vertices.len(),
            self.triangles.len()
        );
        for v in &self.vertices {
            writeln!(s, "v {:.9} {:.9} {:.9}", v.x, v.y, v.z).unwrap();
        }
        for t in &self.triangles {
            writeln!(s, "t {} {} {}", t[0], t[1], t[2]).unwrap();
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// Nominal inner aperture, width (y) × height (z), m.
    pub aperture: [f64; 2],
    /// Frame width around the aperture, m.
    pub frame_border: f64,
    /// Uniform in-plane offset bound for every frame vertex, m.
    pub vertex_jitter: f64,
    /// Uniform scale applied to the aperture.
    pub scale: [f64; 2],
    /// Distance ahead of the origin along world x, m.
    pub distance: [f64; 2],
    /// World y of the gap center, m.
    pub lateral: [f64; 2],
    /// World z of the gap center, m.
    pub height: [f64; 2],
    /// Tilt magnitude range, deg; the sign is drawn separately.
    pub tilt_deg: [f64; 2],
    pub max_attempts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            aperture: [0.8, 0.4],
            frame_border: 0.6,
            vertex_jitter: 0.1,
            scale: [1.0, 1.0],
            distance: [3.0, 5.0],
            lateral: [-1.0, 1.0],
            height: [1.0, 2.0],
            tilt_deg: [0.0, 80.0],
            max_attempts: 32,
        }
    }
}

fn check_range(name: &str, r: [f64; 2]) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
        return Err(Error::Config(format!(
            "{name} must be an ordered finite range, got {r:?}"
        )));
    }
    Ok(())
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("scene.scale", self.scale),
            ("scene.distance", self.distance),
            ("scene.lateral", self.lateral),
            ("scene.height", self.height),
            ("scene.tilt_deg", self.tilt_deg),
        ] {
            check_range(name, r)?;
        }
        if self.aperture.iter().any(|&a| !(a > 0.0)) || !(self.frame_border > 0.0) {
            return Err(Error::Config("scene aperture and frame_border must be positive".into()));
        }
        if !(self.scale[0] > 0.0) || !(self.vertex_jitter >= 0.0) || self.max_attempts == 0 {
            return Err(Error::Config("scene scale, jitter or max_attempts out of range".into()));
        }
        if self.tilt_deg[0] < 0.0 || self.tilt_deg[1] > 80.0 {
            return Err(Error::Config("scene.tilt_deg must lie within [0, 80]".into()));
        }
        Ok(())
    }
}

/// One gap frame placed in the world.
#[derive(Clone, Debug, PartialEq)]
pub struct GapScene {
    pub mesh: TriMesh,
    pub pose: GapPose,
    /// Nominal inner width × height after scaling, m.
    pub aperture: [f64; 2],
    /// Roll of the frame about its normal, rad.
    pub tilt: f64,
    /// In-plane (y, z) offsets applied to each of the 12 vertices, m.
    pub jitter: Vec<[f64; 2]>,
    /// Gap-frame (y, z) of the four inner corners, counter-clockwise.
    pub inner: [[f64; 2]; 4],
}

/// Inner corners, outer corners, then outer-edge midpoints, each
/// counter-clockwise in the gap (y, z) plane starting at (+y, +z).
fn template(aperture: [f64; 2], border: f64) -> [[f64; 2]; 12] {
    let (iw, ih) = (aperture[0] / 2.0, aperture[1] / 2.0);
    let (ow, oh) = (iw + border, ih + border);
    [
        [iw, ih],
        [-iw, ih],
        [-iw, -ih],
        [iw, -ih],
        [ow, oh],
        [-ow, oh],
        [-ow, -oh],
        [ow, -oh],
        [0.0, oh],
        [-ow, 0.0],
        [0.0, -oh],
        [ow, 0.0],
    ]
}

/// Three triangles per side: (outer_a, mid, inner_a), (mid, inner_b, inner_a),
/// (mid, outer_b, inner_b), all counter-clockwise when viewed along -x.
pub const GAP_TRIANGLES: [[usize; 3]; 12] = [
    [4, 8, 0],
    [8, 1, 0],
    [8, 5, 1],
    [5, 9, 1],
    [9, 2, 1],
    [9, 6, 2],
    [6, 10, 2],
    [10, 3, 2],
    [10, 7, 3],
    [7, 11, 3],
    [11, 0, 3],
    [11, 4, 0],
];

fn cross2(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

/// The ring is valid when every triangle keeps its orientation and the
/// aperture stays a convex counter-clockwise quadrilateral.
fn ring_is_valid(pts: &[[f64; 2]; 12]) -> bool {
    let tris_ok = GAP_TRIANGLES
        .iter()
        .all(|t| 0.5 * cross2(pts[t[0]], pts[t[1]], pts[t[2]]) > MIN_TRIANGLE_AREA);
    let quad_ok = (0..4).all(|i| cross2(pts[i], pts[(i + 1) % 4], pts[(i + 2) % 4]) > 0.0);
    tris_ok && quad_ok
}

impl GapScene {
    /// Builds a frame from gap-frame (y, z) vertex coordinates.
    pub fn from_template(
        pose: GapPose,
        pts: &[[f64; 2]; 12],
        aperture: [f64; 2],
        tilt: f64,
        jitter: Vec<[f64; 2]>,
    ) -> Result<GapScene> {
        let vertices = pts
            .iter()
            .map(|q| pose.position + pose.rotation * Vector3::new(0.0, q[0], q[1]))
            .collect();
        let mesh = TriMesh::new(vertices, GAP_TRIANGLES.to_vec())?;
        Ok(GapScene {
            mesh,
            pose,
            aperture,
            tilt,
            jitter,
            inner: [pts[0], pts[1], pts[2], pts[3]],
        })
    }

    /// Whether gap-frame (y, z) lies strictly inside the aperture.
    pub fn inside_aperture(&self, yz: [f64; 2]) -> bool {
        (0..4).all(|i| cross2(self.inner[i], self.inner[(i + 1) % 4], yz) > 0.0)
    }

    pub fn to_text(&self) -> String {
        let p = &self.pose.position;
        let mut s = format!(
            "# gap position {:.9} {:.9} {:.9} tilt_rad {:.9} aperture {:.9} {:.9}\n",
            p.x, p.y, p.z, self.tilt, self.aperture[0], self.aperture[1]
        );
        s.push_str(&self.mesh.to_text());
        s
    }
}

/// Samples a gap whose center lies `distance` ahead of world x = `x_origin`.
pub fn generate_gap(seed: u64, cfg: &SceneConfig, x_origin: f64) -> Result<GapScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let uniform = |r: [f64; 2], rng: &mut ChaCha8Rng| {
        if r[0] == r[1] {
            r[0]
        } else {
            rng.gen_range(r[0]..r[1])
        }
    };
    let distance = uniform(cfg.distance, &mut rng);
    let lateral = uniform(cfg.lateral, &mut rng);
    let height = uniform(cfg.height, &mut rng);
    let magnitude = uniform(cfg.tilt_deg, &mut rng).to_radians();
    let tilt = if rng.gen_bool(0.5) { magnitude } else { -magnitude };
    let scale = uniform(cfg.scale, &mut rng);
    let aperture = [cfg.aperture[0] * scale, cfg.aperture[1] * scale];
    let pose = GapPose {
        position: Vector3::new(x_origin + distance, lateral, height),
        rotation: rot_x(tilt),
    };
    let base = template(aperture, cfg.frame_border);
    for _ in 0..cfg.max_attempts {
        let mut pts = base;
        let mut jitter = vec![[0.0; 2]; 12];
        if cfg.vertex_jitter > 0.0 {
            for (q, j) in pts.iter_mut().zip(jitter.iter_mut()) {
                *j = [
                    rng.gen_range(-cfg.vertex_jitter..=cfg.vertex_jitter),
                    rng.gen_range(-cfg.vertex_jitter..=cfg.vertex_jitter),
                ];
                q[0] += j[0];
                q[1] += j[1];
            }
        }
        if ring_is_valid(&pts) {
            return GapScene::from_template(pose, &pts, aperture, tilt, jitter);
        }
    }
    Err(Error::SceneGeneration {
        attempts: cfg.max_attempts,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraConfig {
    pub width: usize,
    pub height: usize,
    pub fov_h_deg: f64,
    pub fov_v_deg: f64,
    /// Background value for rays that hit nothing, m.
    pub d_max: f64,
    /// Value reported when the camera touches a surface, m.
    pub near_clip: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        CameraConfig {
            width: 32,
            height: 24,
            fov_h_deg: 87.0,
            fov_v_deg: 58.0,
            d_max: 20.0,
            near_clip: 0.01,
        }
    }
}

impl CameraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 2 || self.height < 2 || self.width % 2 != 0 || self.height % 2 != 0 {
            return Err(Error::Config(
                "camera width and height must be even and at least 2".into(),
            ));
        }
        let fov_ok = |f: f64| f > 0.0 && f < 180.0;
        if !fov_ok(self.fov_h_deg) || !fov_ok(self.fov_v_deg) {
            return Err(Error::Config("camera fields of view must lie in (0, 180) deg".into()));
        }
        if !(self.near_clip > 0.0 && self.near_clip < self.d_max) {
            return Err(Error::Config("camera needs 0 < near_clip < d_max".into()));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Intrinsics {
        let (w, h) = (self.width as f64, self.height as f64);
        Intrinsics {
            fx: 0.5 * w / (0.5 * self.fov_h_deg.to_radians()).tan(),
            fy: 0.5 * h / (0.5 * self.fov_v_deg.to_radians()).tan(),
            cx: 0.5 * w,
            cy: 0.5 * h,
        }
    }
}

/// Pinhole intrinsics in pixels; pixel `(u, v)` has its center at `(u + ½, v + ½)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// Camera looking along body +x, image right = body −y, image down = body −z.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraModel {
    pub config: CameraConfig,
    pub intrinsics: Intrinsics,
    pub position: Vector3<f64>,
    /// World-from-body rotation of the carrying vehicle.
    pub rotation: Matrix3<f64>,
}

impl CameraModel {
    pub fn new(config: &CameraConfig, position: Vector3<f64>, rotation: Matrix3<f64>) -> CameraModel {
        CameraModel {
            config: config.clone(),
            intrinsics: config.intrinsics(),
            position,
            rotation,
        }
    }

    pub fn from_state(config: &CameraConfig, state: &QuadState) -> CameraModel {
        CameraModel::new(config, state.p, state.r)
    }

    /// World-frame ray direction whose body-x component is 1, so the ray
    /// parameter equals z-depth.
    pub fn ray(&self, u: usize, v: usize) -> Vector3<f64> {
        let k = &self.intrinsics;
        let xn = (u as f64 + 0.5 - k.cx) / k.fx;
        let yn = (v as f64 + 0.5 - k.cy) / k.fy;
        self.rotation * Vector3::new(1.0, -xn, -yn)
    }

    /// Pixel coordinates of a camera-frame point `(forward, left, up)`.
    fn project(&self, q: &Vector3<f64>) -> Vector2<f64> {
        let k = &self.intrinsics;
        Vector2::new(k.cx - k.fx * q.y / q.x, k.cy - k.fy * q.z / q.x)
    }
}

/// Row-major depth image in metres.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl DepthImage {
    pub fn filled(width: usize, height: usize, value: f64) -> DepthImage {
        DepthImage {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.data[v * self.width + u]
    }

    /// 16-bit binary PGM, depth in millimetres.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n65535\n", self.width, self.height).into_bytes();
        for &d in &self.data {
            let mm = (d * 1000.0).round().clamp(0.0, 65535.0) as u16;
            out.extend_from_slice(&mm.to_be_bytes());
        }
        out
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_pgm()).map_err(|e| Error::io(path, e))
    }
}

/// Ray-triangle intersection with barycentric tolerance [`RAY_EPS`].
/// Returns the ray parameter of a hit in front of the origin.
pub fn intersect(origin: &Vector3<f64>, dir: &Vector3<f64>, tri: &[Vector3<f64>; 3]) -> Option<f64> {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let pvec = dir.cross(&e2);
    let det = e1.dot(&pvec);
    if det.abs() < 1e-15 {
        return None;
    }
    let inv = 1.0 / det;
    let s = origin - tri[0];
    let u = s.dot(&pvec) * inv;
    if u < -RAY_EPS || u > 1.0 + RAY_EPS {
        return None;
    }
    let qvec = s.cross(&e1);
    let v = dir.dot(&qvec) * inv;
    if v < -RAY_EPS || u + v > 1.0 + RAY_EPS {
        return None;
    }
    let t = e2.dot(&qvec) * inv;
    (t >= 0.0).then_some(t)
}

/// Keeps the nearest hit; near-ties go to the earlier triangle.
#[inline]
fn consider(best: &mut Option<f64>, t: f64) {
    match best {
        Some(b) if t >= *b - TIE_EPS => {}
        _ => *best = Some(t),
    }
}

fn finish(best: Option<f64>, cfg: &CameraConfig) -> f64 {
    match best {
        None => cfg.d_max,
        Some(t) if t < NEAR_HIT => cfg.near_clip,
        Some(t) => t.min(cfg.d_max),
    }
}

/// Reference renderer: every ray against every triangle.
pub fn render_depth_bruteforce(mesh: &TriMesh, camera: &CameraModel) -> DepthImage {
    let cfg = &camera.config;
    let tris: Vec<_> = (0..mesh.triangles.len()).map(|i| mesh.corners(i)).collect();
    let mut img = DepthImage::filled(cfg.width, cfg.height, cfg.d_max);
    for v in 0..cfg.height {
        for u in 0..cfg.width {
            let dir = camera.ray(u, v);
            let mut best = None;
            for tri in &tris {
                if let Some(t) = intersect(&camera.position, &dir, tri) {
                    consider(&mut best, t);
                }
            }
            img.data[v * cfg.width + u] = finish(best, cfg);
        }
    }
    img
}

/// Pixel rectangle `[u0, u1) × [v0, v1)` that may contain the triangle.
fn screen_bounds(camera: &CameraModel, tri: &[Vector3<f64>; 3]) -> Option<[usize; 4]> {
    let (w, h) = (camera.config.width, camera.config.height);
    let to_cam = camera.rotation.transpose();
    let local: Vec<Vector3<f64>> = tri.iter().map(|p| to_cam * (p - camera.position)).collect();
    if local.iter().all(|q| q.x <= 0.0) {
        return None;
    }
    if local.iter().any(|q| q.x <= 1e-3) {
        return Some([0, w, 0, h]);
    }
    let pts: Vec<Vector2<f64>> = local.iter().map(|q| camera.project(q)).collect();
    let lo_u = pts.iter().map(|p| p.x).fold(f64::INFINITY, f64::min) - 1.0;
    let hi_u = pts.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max) + 1.0;
    let lo_v = pts.iter().map(|p| p.y).fold(f64::INFINITY, f64::min) - 1.0;
    let hi_v = pts.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max) + 1.0;
    let clamp = |x: f64, n: usize| x.max(0.0).min(n as f64) as usize;
    let (u0, u1) = (clamp(lo_u.floor(), w), clamp(hi_u.ceil(), w));
    let (v0, v1) = (clamp(lo_v.floor(), h), clamp(hi_v.ceil(), h));
    (u0 < u1 && v0 < v1).then_some([u0, u1, v0, v1])
}

/// Depth rendering with per-triangle screen-space culling. Produces the same
/// image as [`render_depth_bruteforce`].
pub fn render_depth(mesh: &TriMesh, camera: &CameraModel) -> DepthImage {
    let cfg = &camera.config;
    let mut best: Vec<Option<f64>> = vec![None; cfg.width * cfg.height];
    let rays: Vec<Vector3<f64>> = (0..cfg.height)
        .flat_map(|v| (0..cfg.width).map(move |u| (u, v)))
        .map(|(u, v)| camera.ray(u, v))
        .collect();
    for i in 0..mesh.triangles.len() {
        let tri = mesh.corners(i);
        let Some([u0, u1, v0, v1]) = screen_bounds(camera, &tri) else {
            continue;
        };
        for v in v0..v1 {
            for u in u0..u1 {
                let k = v * cfg.width + u;
                if let Some(t) = intersect(&camera.position, &rays[k], &tri) {
                    consider(&mut best[k], t);
                }
            }
        }
    }
    DepthImage {
        width: cfg.width,
        height: cfg.height,
        data: best.into_iter().map(|b| finish(b, cfg)).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Standard deviation of the per-pixel multiplicative Gaussian factor.
    pub sigma: f64,
    /// Probability that a patch is dropped to the background value.
    pub dropout: f64,
    /// Side length of a dropout patch, pixels.
    pub patch: usize,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            sigma: 0.0,
            dropout: 0.0,
            patch: 3,
        }
    }
}

impl NoiseConfig {
    pub fn is_enabled(&self) -> bool {
        self.sigma > 0.0 || self.dropout > 0.0
    }
}

/// Applies multiplicative Gaussian noise and random background patches.
pub fn apply_noise(img: &mut DepthImage, noise: &NoiseConfig, camera: &CameraConfig, rng: &mut impl Rng) {
    if noise.sigma > 0.0 {
        let n = Normal::new(1.0, noise.sigma).expect("positive sigma");
        for d in img.data.iter_mut() {
            *d = (*d * n.sample(rng)).clamp(camera.near_clip, camera.d_max);
        }
    }
    if noise.dropout > 0.0 && noise.patch > 0 {
        let p = noise.patch;
        for v0 in (0..img.height).step_by(p) {
            for u0 in (0..img.width).step_by(p) {
                if rng.gen_bool(noise.dropout.min(1.0)) {
                    for v in v0..(v0 + p).min(img.height) {
                        for u in u0..(u0 + p).min(img.width) {
                            img.data[v * img.width + u] = camera.d_max;
                        }
                    }
                }
            }
        }
    }
}

/// Inverse depth followed by 2×2 max pooling, shaped `[1, H/2, W/2]`.
pub fn preprocess(img: &DepthImage) -> Result<Tensor> {
    if img.width % 2 != 0 || img.height % 2 != 0 || img.data.len() != img.width * img.height {
        return Err(Error::Input(format!(
            "depth image must have even size, got {}x{}",
            img.width, img.height
        )));
    }
    if let Some(d) = img.data.iter().find(|d| !(**d > 0.0 && d.is_finite())) {
        return Err(Error::Input(format!("depth must be positive and finite, got {d}")));
    }
    let (ow, oh) = (img.width / 2, img.height / 2);
    let mut out = Vec::with_capacity(ow * oh);
    for r in 0..oh {
        for c in 0..ow {
            let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                .iter()
                .map(|(dr, dc)| 1.0 / img.at(2 * c + dc, 2 * r + dr))
                .fold(f64::NEG_INFINITY, f64::max);
            out.push(m);
        }
    }
    Ok(Tensor::new(&[1, oh, ow], out)?)
}

/// Closest point on triangle `abc` to `p`.
pub fn closest_point_on_triangle(p: &Vector3<f64>, tri: &[Vector3<f64>; 3]) -> Vector3<f64> {
    let [a, b, c] = *tri;
    let (ab, ac, ap) = (b - a, c - a, p - a);
    let (d1, d2) = (ab.dot(&ap), ac.dot(&ap));
    if d1 <= 0.0 && d2 <= 0.0 {
        return a;
    }
    let bp = p - b;
    let (d3, d4) = (ab.dot(&bp), ac.dot(&bp));
    if d3 >= 0.0 && d4 <= d3 {
        return b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let (d5, d6) = (ab.dot(&cp), ac.dot(&cp));
    if d6 >= 0.0 && d5 <= d6 {
        return c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    a + ab * (vb * denom) + ac * (vc * denom)
}

/// Minimum distance from `p` to the mesh.
pub fn min_distance(p: &Vector3<f64>, mesh: &TriMesh) -> f64 {
    (0..mesh.triangles.len())
        .map(|i| (p - closest_point_on_triangle(p, &mesh.corners(i))).norm())
        .fold(f64::INFINITY, f64::min)
}

/// `(collided, min_distance)` for a sphere of `radius` at `p`.
pub fn check_collision(p: &Vector3<f64>, mesh: &TriMesh, radius: f64) -> (bool, f64) {
    let d = min_distance(p, mesh);
    (d < radius, d)
}
