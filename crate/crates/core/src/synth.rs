//! Synthetic scenes with known geometry for end-to-end checks.
//!
//! A scene is an analytic surface seen by cameras on an arc around the
//! origin. Each view gets its true depth, a corrupted copy (smooth scale
//! field plus smooth offset), a procedural texture and exact matches.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use nalgebra::{Matrix2, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::geometry::{is_valid_depth, look_at, scene_scale, Camera, DepthMap, ViewId};
use crate::io::{self, JobManifest, ViewEntry};
use crate::tracks::{default_key_view_count, select_key_views, PairwiseMatch};

const CAMERA_DISTANCE: f64 = 4.0;
const POLAR_ANGLE_DEG: f64 = 35.0;
const MAX_TRACE_STEPS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurfaceKind {
    Plane,
    Sphere,
    HeightField,
}

impl std::str::FromStr for SurfaceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plane" => Ok(SurfaceKind::Plane),
            "sphere" => Ok(SurfaceKind::Sphere),
            "heightfield" | "height_field" => Ok(SurfaceKind::HeightField),
            _ => Err(Error::InvalidInput(format!(
                "unknown surface kind '{s}' (expected plane, sphere or heightfield)"
            ))),
        }
    }
}

/// `amplitude * sin(frequency . p + phase)` over a 2D coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wave {
    pub amplitude: f64,
    pub frequency: [f64; 2],
    pub phase: f64,
}

impl Wave {
    fn arg(&self, x: f64, y: f64) -> f64 {
        self.frequency[0] * x + self.frequency[1] * y + self.phase
    }

    pub fn value(&self, x: f64, y: f64) -> f64 {
        self.amplitude * self.arg(x, y).sin()
    }

    pub fn gradient(&self, x: f64, y: f64) -> Vector2<f64> {
        let c = self.amplitude * self.arg(x, y).cos();
        Vector2::new(c * self.frequency[0], c * self.frequency[1])
    }

    fn hessian(&self, x: f64, y: f64) -> Matrix2<f64> {
        let s = -self.amplitude * self.arg(x, y).sin();
        let [fx, fy] = self.frequency;
        Matrix2::new(s * fx * fx, s * fx * fy, s * fx * fy, s * fy * fy)
    }

    fn lipschitz(&self) -> f64 {
        self.amplitude.abs() * (self.frequency[0].hypot(self.frequency[1]))
    }
}

fn random_waves(rng: &mut ChaCha8Rng, n: usize, amplitude: f64, freq: (f64, f64)) -> Vec<Wave> {
    (0..n)
        .map(|_| {
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let f = rng.random_range(freq.0..freq.1);
            Wave {
                amplitude: amplitude / n as f64,
                frequency: [f * angle.cos(), f * angle.sin()],
                phase: rng.random_range(0.0..std::f64::consts::TAU),
            }
        })
        .collect()
}

/// Analytic ground-truth surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Surface {
    Plane { point: Vector3<f64>, normal: Vector3<f64> },
    Sphere { center: Vector3<f64>, radius: f64 },
    /// `z = sum of waves(x, y)`.
    HeightField { waves: Vec<Wave> },
}

impl Surface {
    fn height(waves: &[Wave], x: f64, y: f64) -> f64 {
        waves.iter().map(|w| w.value(x, y)).sum()
    }

    fn height_gradient(waves: &[Wave], x: f64, y: f64) -> Vector2<f64> {
        waves.iter().map(|w| w.gradient(x, y)).sum()
    }

    /// Distance along the unit ray `dir` from `origin` to the first hit.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        match self {
            Surface::Plane { point, normal } => {
                let denom = normal.dot(dir);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let t = normal.dot(&(point - origin)) / denom;
                (t > 0.0).then_some(t)
            }
            Surface::Sphere { center, radius } => {
                let oc = origin - center;
                let b = oc.dot(dir);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                // Stable root pair.
                let q = -b - sq;
                let (t0, t1) = if q.abs() > 0.0 { (q, c / q) } else { (-b, -b) };
                let (near, far) = if t0 <= t1 { (t0, t1) } else { (t1, t0) };
                if near > 0.0 {
                    Some(near)
                } else if far > 0.0 {
                    Some(far)
                } else {
                    None
                }
            }
            Surface::HeightField { waves } => trace_height_field(waves, origin, dir),
        }
    }

    /// Unsigned distance from `p` to the surface.
    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        match self {
            Surface::Plane { point, normal } => (p - point).dot(normal).abs() / normal.norm(),
            Surface::Sphere { center, radius } => ((p - center).norm() - radius).abs(),
            Surface::HeightField { waves } => {
                let q = nearest_on_height_field(waves, p);
                (p - q).norm()
            }
        }
    }

    /// Unit normal at a surface point.
    pub fn normal(&self, p: &Vector3<f64>) -> Vector3<f64> {
        match self {
            Surface::Plane { normal, .. } => normal.normalize(),
            Surface::Sphere { center, .. } => (p - center).normalize(),
            Surface::HeightField { waves } => {
                let g = Surface::height_gradient(waves, p.x, p.y);
                Vector3::new(-g.x, -g.y, 1.0).normalize()
            }
        }
    }

    /// Procedural texture color of a surface point.
    pub fn color(&self, p: &Vector3<f64>) -> [u8; 3] {
        let channel = |v: f64| (127.5 + 110.0 * v.sin()).round() as u8;
        [
            channel(5.0 * p.x + 1.0),
            channel(5.0 * p.y + 2.0 * p.z),
            channel(3.0 * (p.x + p.y) - 4.0 * p.z),
        ]
    }
}

fn trace_height_field(waves: &[Wave], origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
    let lip: f64 = waves.iter().map(Wave::lipschitz).sum();
    let above = |t: f64| {
        let p = origin + dir * t;
        p.z - Surface::height(waves, p.x, p.y)
    };
    let mut t = 0.0;
    let mut f = above(t);
    if f <= 0.0 {
        return None;
    }
    // The height gap shrinks by at most |dz| + L |dxy| per unit of t.
    let rate = dir.z.abs() + lip * dir.xy().norm();
    let max_t = 1e3 * (1.0 + origin.norm());
    let mut steps = 0;
    while f > 1e-10 {
        t += f / rate;
        f = above(t);
        steps += 1;
        if t > max_t || steps > MAX_TRACE_STEPS {
            return None;
        }
    }
    // Newton polish on the height gap.
    for _ in 0..4 {
        let p = origin + dir * t;
        let g = Surface::height_gradient(waves, p.x, p.y);
        let df = dir.z - g.dot(&dir.xy());
        if df.abs() < 1e-12 {
            break;
        }
        t -= above(t) / df;
    }
    Some(t)
}

fn nearest_on_height_field(waves: &[Wave], p: &Vector3<f64>) -> Vector3<f64> {
    let mut xy = p.xy();
    for _ in 0..50 {
        let h = Surface::height(waves, xy.x, xy.y);
        let g = Surface::height_gradient(waves, xy.x, xy.y);
        let hess: Matrix2<f64> = waves.iter().map(|w| w.hessian(xy.x, xy.y)).sum();
        let dz = h - p.z;
        // Newton step on 0.5 |(x, y, h(x, y)) - p|^2.
        let grad = (xy - p.xy()) + g * dz;
        let jac = Matrix2::identity() + g * g.transpose() + hess * dz;
        let step = jac
            .try_inverse()
            .filter(|inv| (inv * grad).norm().is_finite())
            .map(|inv| inv * grad)
            .unwrap_or(grad);
        xy -= step;
        if step.norm() < 1e-15 {
            break;
        }
    }
    Vector3::new(xy.x, xy.y, Surface::height(waves, xy.x, xy.y))
}

/// Smooth per-view depth corruption `d' = scale(u, v) * d + offset(u, v)`
/// over normalized pixel coordinates `u, v` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthCorruption {
    pub scale_waves: Vec<Wave>,
    pub offset_waves: Vec<Wave>,
}

impl DepthCorruption {
    pub fn none() -> Self {
        DepthCorruption {
            scale_waves: Vec::new(),
            offset_waves: Vec::new(),
        }
    }

    fn random(rng: &mut ChaCha8Rng, amplitude: f64, depth_unit: f64) -> Self {
        let two_pi = std::f64::consts::TAU;
        DepthCorruption {
            scale_waves: random_waves(rng, 3, amplitude, (0.3 * two_pi, 0.9 * two_pi)),
            offset_waves: random_waves(rng, 3, 0.5 * amplitude * depth_unit, (0.3 * two_pi, 0.9 * two_pi)),
        }
    }

    pub fn scale(&self, u: f64, v: f64) -> f64 {
        1.0 + Surface::height(&self.scale_waves, u, v)
    }

    pub fn offset(&self, u: f64, v: f64) -> f64 {
        Surface::height(&self.offset_waves, u, v)
    }

    pub fn apply(&self, u: f64, v: f64, d: f64) -> f64 {
        self.scale(u, v) * d + self.offset(u, v)
    }

    pub fn invert(&self, u: f64, v: f64, corrupted: f64) -> f64 {
        (corrupted - self.offset(u, v)) / self.scale(u, v)
    }
}

fn normalized(i: u32, j: u32, width: u32, height: u32) -> (f64, f64) {
    (
        i as f64 / (width.max(2) - 1) as f64,
        j as f64 / (height.max(2) - 1) as f64,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub surface: SurfaceKind,
    pub n_views: usize,
    pub width: u32,
    pub height: u32,
    /// Relative amplitude of the depth corruption; 0.1 means about 10%.
    pub corruption: f64,
    /// Fraction of each view's pixels used as match anchors.
    pub match_fraction: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn new(surface: SurfaceKind, n_views: usize, width: u32, height: u32, corruption: f64, seed: u64) -> Self {
        SceneSpec {
            surface,
            n_views,
            width,
            height,
            corruption,
            match_fraction: 0.01,
            seed,
        }
    }

    pub fn with_match_fraction(mut self, fraction: f64) -> Self {
        self.match_fraction = fraction;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.n_views < 2 {
            return Err(Error::InvalidInput(format!("a scene needs at least 2 views, got {}", self.n_views)));
        }
        if self.width < 8 || self.height < 8 {
            return Err(Error::InvalidInput(format!(
                "resolution {}x{} is below 8x8",
                self.width, self.height
            )));
        }
        if !(0.0..0.5).contains(&self.corruption) {
            return Err(Error::InvalidInput(format!(
                "corruption amplitude must be in [0, 0.5), got {}",
                self.corruption
            )));
        }
        if !(0.0..=1.0).contains(&self.match_fraction) {
            return Err(Error::InvalidInput(format!(
                "match fraction must be in [0, 1], got {}",
                self.match_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub surface: Surface,
    pub cameras: Vec<Camera>,
    pub true_depth: Vec<DepthMap>,
    pub depth: Vec<DepthMap>,
    pub corruption: Vec<DepthCorruption>,
    pub images: Vec<RgbImage>,
    pub matches: Vec<PairwiseMatch>,
}

impl SyntheticScene {
    /// Ground-truth surface point seen at pixel `(i, j)` of a view.
    pub fn true_point(&self, view: usize, i: u32, j: u32) -> Option<Vector3<f64>> {
        let d = self.true_depth[view].get(i, j);
        if !is_valid_depth(d) {
            return None;
        }
        let cam = &self.cameras[view];
        let xc = cam.backproject_pixel(&Vector2::new(i as f64, j as f64), d).ok()?;
        Some(cam.to_world(&xc))
    }

    pub fn scene_scale(&self) -> f64 {
        scene_scale(&self.cameras).map(|s| s.radius).unwrap_or(1.0)
    }
}

fn arc_cameras(n: usize, width: u32, height: u32) -> Result<Vec<Camera>> {
    let polar = POLAR_ANGLE_DEG.to_radians();
    let span = (30.0 * (n - 1) as f64).min(120.0).to_radians();
    let focal = 0.8 * width as f64;
    let principal = ((width - 1) as f64 / 2.0, (height - 1) as f64 / 2.0);
    (0..n)
        .map(|v| {
            let azimuth = if n == 1 {
                0.0
            } else {
                -span / 2.0 + span * v as f64 / (n - 1) as f64
            };
            let eye = CAMERA_DISTANCE
                * Vector3::new(polar.sin() * azimuth.cos(), polar.sin() * azimuth.sin(), polar.cos());
            let (r, t) = look_at(&eye, &Vector3::zeros(), &Vector3::z());
            Camera::from_focal(v as ViewId, (focal, focal), principal, r, t, width, height)
        })
        .collect()
}

fn make_surface(kind: SurfaceKind, rng: &mut ChaCha8Rng) -> Surface {
    match kind {
        SurfaceKind::Plane => Surface::Plane {
            point: Vector3::zeros(),
            normal: Vector3::z(),
        },
        SurfaceKind::Sphere => Surface::Sphere {
            center: Vector3::zeros(),
            radius: 1.2,
        },
        SurfaceKind::HeightField => Surface::HeightField {
            waves: random_waves(rng, 4, 0.4, (1.0, 2.5)),
        },
    }
}

fn render_view(camera: &Camera, surface: &Surface) -> (Vec<f64>, RgbImage) {
    let (w, h) = (camera.width, camera.height);
    let center = camera.center();
    let rows: Vec<(Vec<f64>, Vec<[u8; 3]>)> = (0..h)
        .into_par_iter()
        .map(|j| {
            let mut depth = Vec::with_capacity(w as usize);
            let mut colors = Vec::with_capacity(w as usize);
            for i in 0..w {
                let ray = (camera.r.transpose() * camera.ray(&Vector2::new(i as f64, j as f64))).normalize();
                match surface.intersect(&center, &ray) {
                    Some(t) => {
                        let x = center + ray * t;
                        depth.push(camera.to_camera(&x).z);
                        colors.push(surface.color(&x));
                    }
                    None => {
                        depth.push(f64::NAN);
                        colors.push([0, 0, 0]);
                    }
                }
            }
            (depth, colors)
        })
        .collect();
    let mut depth = Vec::with_capacity((w * h) as usize);
    let mut image = RgbImage::new(w, h);
    for (j, (d, c)) in rows.into_iter().enumerate() {
        depth.extend(d);
        for (i, rgb) in c.into_iter().enumerate() {
            image.put_pixel(i as u32, j as u32, Rgb(rgb));
        }
    }
    (depth, image)
}

/// True when all four bilinear neighbors of `q` hold valid depth.
fn interpolable(depth: &DepthMap, q: &Vector2<f64>) -> bool {
    let (w, h) = (depth.width as f64, depth.height as f64);
    if !(q.x >= 0.0 && q.y >= 0.0 && q.x <= w - 1.0 && q.y <= h - 1.0) {
        return false;
    }
    let i0 = q.x.floor() as u32;
    let j0 = q.y.floor() as u32;
    let i1 = (i0 + 1).min(depth.width - 1);
    let j1 = (j0 + 1).min(depth.height - 1);
    [(i0, j0), (i1, j0), (i0, j1), (i1, j1)]
        .iter()
        .all(|&(i, j)| depth.is_valid(i, j))
}

fn visible(camera: &Camera, surface: &Surface, x: &Vector3<f64>) -> bool {
    let c = camera.center();
    let dist = (x - c).norm();
    match surface.intersect(&c, &((x - c) / dist)) {
        Some(t) => (t - dist).abs() <= 1e-9 * dist,
        None => false,
    }
}

type Cell = (ViewId, i64, i64);

fn cell(view: ViewId, q: &Vector2<f64>) -> Cell {
    (view, q.x.round() as i64, q.y.round() as i64)
}

/// Star-shaped exact matches: each anchor pixel is matched to its key views.
/// Candidates whose observations would share a pixel cell with an earlier
/// star are skipped, so every track corresponds to one surface point.
fn generate_matches(
    scene: &SyntheticScene,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PairwiseMatch>> {
    let n = scene.cameras.len();
    let k = default_key_view_count(n);
    let mut occupied: HashSet<Cell> = HashSet::new();
    let mut matches = Vec::new();
    for (a, cam_a) in scene.cameras.iter().enumerate() {
        let keys = select_key_views(&scene.cameras, cam_a.id, k)?.keys;
        for j in 0..cam_a.height {
            for i in 0..cam_a.width {
                if !rng.random_bool(scene.spec.match_fraction) {
                    continue;
                }
                let Some(x) = scene.true_point(a, i, j) else {
                    continue;
                };
                let pa = Vector2::new(i as f64, j as f64);
                if !interpolable(&scene.true_depth[a], &pa) {
                    continue;
                }
                let mut star = Vec::new();
                for &b in &keys {
                    let cam_b = &scene.cameras[b as usize];
                    let Some(q) = cam_b.project(&x) else {
                        continue;
                    };
                    if interpolable(&scene.true_depth[b as usize], &q) && visible(cam_b, &scene.surface, &x) {
                        star.push((b, q));
                    }
                }
                if star.is_empty() {
                    continue;
                }
                let cells: Vec<Cell> = std::iter::once(cell(cam_a.id, &pa))
                    .chain(star.iter().map(|(b, q)| cell(*b, q)))
                    .collect();
                if cells.iter().any(|c| occupied.contains(c)) {
                    continue;
                }
                occupied.extend(cells);
                for (b, q) in star {
                    matches.push(PairwiseMatch::new(cam_a.id, pa, b, q));
                }
            }
        }
    }
    Ok(matches)
}

/// Builds a deterministic scene from `spec`.
pub fn generate_scene(spec: &SceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let surface = make_surface(spec.surface, &mut rng);
    let cameras = arc_cameras(spec.n_views, spec.width, spec.height)?;
    let corruption: Vec<DepthCorruption> = (0..spec.n_views)
        .map(|_| {
            if spec.corruption > 0.0 {
                DepthCorruption::random(&mut rng, spec.corruption, CAMERA_DISTANCE)
            } else {
                DepthCorruption::none()
            }
        })
        .collect();

    let rendered: Vec<(Vec<f64>, RgbImage)> = cameras.par_iter().map(|c| render_view(c, &surface)).collect();
    let mut true_depth = Vec::with_capacity(spec.n_views);
    let mut depth = Vec::with_capacity(spec.n_views);
    let mut images = Vec::with_capacity(spec.n_views);
    for ((cam, (values, image)), field) in cameras.iter().zip(rendered).zip(&corruption) {
        if !values.iter().any(|d| is_valid_depth(*d)) {
            return Err(Error::InvalidInput(format!("surface is not visible from view {}", cam.id)));
        }
        let corrupted: Vec<f64> = if field.scale_waves.is_empty() && field.offset_waves.is_empty() {
            values.clone()
        } else {
            values
                .iter()
                .enumerate()
                .map(|(idx, &d)| {
                    if !is_valid_depth(d) {
                        return d;
                    }
                    let i = idx as u32 % cam.width;
                    let j = idx as u32 / cam.width;
                    let (u, v) = normalized(i, j, cam.width, cam.height);
                    field.apply(u, v, d)
                })
                .collect()
        };
        true_depth.push(DepthMap::new(cam.id, cam.width, cam.height, values)?);
        depth.push(DepthMap::new(cam.id, cam.width, cam.height, corrupted)?);
        images.push(image);
    }

    let mut scene = SyntheticScene {
        spec: spec.clone(),
        surface,
        cameras,
        true_depth,
        depth,
        corruption,
        images,
        matches: Vec::new(),
    };
    scene.matches = generate_matches(&scene, &mut rng)?;
    Ok(scene)
}

/// Distance statistics of a point cloud against the true surface.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub rms: f64,
    pub max: f64,
    pub points: usize,
}

pub fn evaluate_recovery(surface: &Surface, cloud: &PointCloud) -> Result<RecoveryReport> {
    if cloud.is_empty() {
        return Err(Error::InvalidInput("cannot evaluate an empty point cloud".into()));
    }
    let distances: Vec<f64> = cloud.positions.par_iter().map(|p| surface.distance(p)).collect();
    let sq: f64 = distances.iter().map(|d| d * d).sum();
    Ok(RecoveryReport {
        rms: (sq / distances.len() as f64).sqrt(),
        max: distances.iter().copied().fold(0.0, f64::max),
        points: distances.len(),
    })
}

/// Depth encoding used when a scene is written to disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DepthFormat {
    Pfm,
    F32,
    #[default]
    F64,
}

impl DepthFormat {
    fn extension(self) -> &'static str {
        match self {
            DepthFormat::Pfm => "pfm",
            DepthFormat::F32 => "f32",
            DepthFormat::F64 => "f64",
        }
    }
}

impl std::str::FromStr for DepthFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pfm" => Ok(DepthFormat::Pfm),
            "f32" => Ok(DepthFormat::F32),
            "f64" => Ok(DepthFormat::F64),
            other => Err(Error::InvalidInput(format!("unknown depth format '{other}'"))),
        }
    }
}

/// Ground truth stored next to a written scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneTruth {
    pub spec: SceneSpec,
    pub surface: Surface,
    pub scene_scale: f64,
}

pub const TRUTH_FILE: &str = "truth.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes cameras, corrupted depth, images, matches, ground truth and a
/// manifest into `dir`. Returns the manifest path.
pub fn write_scene(scene: &SyntheticScene, dir: &Path, format: DepthFormat) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    io::write_cameras_json(&scene.cameras, &dir.join("cameras.json"))?;
    let views = scene
        .cameras
        .par_iter()
        .zip(&scene.depth)
        .zip(&scene.images)
        .map(|((cam, depth), image)| {
            let depth_name = format!("depth_{}.{}", cam.id, format.extension());
            let image_name = format!("image_{}.png", cam.id);
            let depth_path = dir.join(&depth_name);
            match format {
                DepthFormat::Pfm => io::write_depth_pfm(depth, &depth_path)?,
                DepthFormat::F32 => io::write_depth_raw(depth, &depth_path, io::RawPrecision::F32)?,
                DepthFormat::F64 => io::write_depth_raw(depth, &depth_path, io::RawPrecision::F64)?,
            }
            let image_path = dir.join(&image_name);
            image.save(&image_path).map_err(|e| match e {
                image::ImageError::IoError(err) => Error::io(&image_path, err),
                other => Error::format(&image_path, other.to_string()),
            })?;
            Ok(ViewEntry {
                id: cam.id,
                depth: PathBuf::from(depth_name),
                image: Some(PathBuf::from(image_name)),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    io::write_matches(&scene.matches, &dir.join("matches.txt"))?;
    let truth = SceneTruth {
        spec: scene.spec.clone(),
        surface: scene.surface.clone(),
        scene_scale: scene.scene_scale(),
    };
    let json = serde_json::to_string_pretty(&truth).expect("truth serializes");
    io::write_file(&dir.join(TRUTH_FILE), json.as_bytes())?;
    let manifest = JobManifest {
        cameras: Some(PathBuf::from("cameras.json")),
        views,
        matches: PathBuf::from("matches.txt"),
        seed: Some(scene.spec.seed),
        ..Default::default()
    };
    let path = dir.join(MANIFEST_FILE);
    manifest.save(&path)?;
    Ok(path)
}

pub fn read_truth(path: &Path) -> Result<SceneTruth> {
    let text = io::read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::PointSource;

    fn spec(kind: SurfaceKind, corruption: f64) -> SceneSpec {
        SceneSpec::new(kind, 3, 64, 48, corruption, 9).with_match_fraction(0.05)
    }

    #[test]
    fn plane_without_corruption() {
        let scene = generate_scene(&spec(SurfaceKind::Plane, 0.0)).unwrap();
        assert_eq!(scene.depth, scene.true_depth);
        for v in 0..3 {
            for (j, i) in [(0, 0), (10, 20), (47, 63)] {
                let x = scene.true_point(v, i, j).unwrap();
                assert!(x.z.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deterministic() {
        let s = spec(SurfaceKind::HeightField, 0.1);
        assert_eq!(generate_scene(&s).unwrap(), generate_scene(&s).unwrap());
    }

    #[test]
    fn matches_reproject() {
        for kind in [SurfaceKind::Sphere, SurfaceKind::Plane, SurfaceKind::HeightField] {
            let scene = generate_scene(&spec(kind, 0.1)).unwrap();
            assert!(scene.matches.len() > 50, "{kind:?}: {}", scene.matches.len());
            for m in &scene.matches {
                let a = m.view_a as usize;
                let x = scene
                    .true_point(a, m.pixel_a.x as u32, m.pixel_a.y as u32)
                    .unwrap();
                assert!((scene.surface.distance(&x)) < 1e-9);
                let qa = scene.cameras[a].project(&x).unwrap();
                let qb = scene.cameras[m.view_b as usize].project(&x).unwrap();
                assert!((qa - m.pixel_a).norm() < 0.25);
                assert!((qb - m.pixel_b).norm() < 0.25);
            }
        }
    }

    #[test]
    fn corruption_is_invertible() {
        let scene = generate_scene(&spec(SurfaceKind::Sphere, 0.1)).unwrap();
        let mut changed = 0;
        for v in 0..3 {
            let (t, c) = (&scene.true_depth[v], &scene.depth[v]);
            for j in 0..t.height {
                for i in 0..t.width {
                    if !t.is_valid(i, j) {
                        assert!(!c.is_valid(i, j));
                        continue;
                    }
                    let (u, w) = normalized(i, j, t.width, t.height);
                    let back = scene.corruption[v].invert(u, w, c.get(i, j));
                    assert!((back - t.get(i, j)).abs() < 1e-12);
                    changed += (c.get(i, j) != t.get(i, j)) as usize;
                }
            }
        }
        assert!(changed > 0);
    }

    #[test]
    fn sphere_has_invalid_background() {
        let scene = generate_scene(&spec(SurfaceKind::Sphere, 0.0)).unwrap();
        assert!(!scene.true_depth[0].is_valid(0, 0));
        assert!(scene.true_depth[0].is_valid(32, 24));
    }

    #[test]
    fn invisible_surface_is_an_error() {
        let mut s = spec(SurfaceKind::Plane, 0.0);
        s.n_views = 1;
        assert!(generate_scene(&s).is_err());
        let cams = arc_cameras(2, 16, 16).unwrap();
        let away = Surface::Plane {
            point: Vector3::new(0.0, 0.0, 10.0),
            normal: Vector3::z(),
        };
        let (depth, _) = render_view(&cams[0], &away);
        assert!(depth.iter().all(|d| !is_valid_depth(*d)));
    }

    #[test]
    fn recovery_metrics() {
        let scene = generate_scene(&spec(SurfaceKind::HeightField, 0.0)).unwrap();
        let mut pts = Vec::new();
        for j in (0..48).step_by(5) {
            for i in (0..64).step_by(5) {
                pts.extend(scene.true_point(0, i, j));
            }
        }
        let on = PointCloud::from_parts(pts.clone(), vec![[0; 3]; pts.len()], PointSource::Cbp).unwrap();
        let r = evaluate_recovery(&scene.surface, &on).unwrap();
        assert!(r.rms < 1e-9, "{r:?}");

        let plane = Surface::Plane {
            point: Vector3::zeros(),
            normal: Vector3::z(),
        };
        let sphere = Surface::Sphere {
            center: Vector3::zeros(),
            radius: 1.0,
        };
        let lifted = PointCloud::from_parts(
            vec![Vector3::new(0.3, -2.0, 0.1), Vector3::new(5.0, 1.0, -0.1)],
            vec![[0; 3]; 2],
            PointSource::Cbp,
        )
        .unwrap();
        assert!((evaluate_recovery(&plane, &lifted).unwrap().rms - 0.1).abs() < 1e-15);
        let shell = PointCloud::from_parts(
            vec![Vector3::new(1.1, 0.0, 0.0), Vector3::new(0.0, -1.1, 0.0)],
            vec![[0; 3]; 2],
            PointSource::Cbp,
        )
        .unwrap();
        assert!((evaluate_recovery(&sphere, &shell).unwrap().rms - 0.1).abs() < 1e-12);

        // Offsetting along the normal of the height field.
        let moved: Vec<Vector3<f64>> = pts.iter().map(|p| p + scene.surface.normal(p) * 0.05).collect();
        let off = PointCloud::from_parts(moved.clone(), vec![[0; 3]; moved.len()], PointSource::Cbp).unwrap();
        let r = evaluate_recovery(&scene.surface, &off).unwrap();
        assert!((r.rms - 0.05).abs() < 1e-6, "{r:?}");
        assert!(evaluate_recovery(&plane, &PointCloud::new()).is_err());
    }

    #[test]
    fn written_scene_loads_back() {
        let scene = generate_scene(&spec(SurfaceKind::Sphere, 0.1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_scene(&scene, dir.path(), DepthFormat::F64).unwrap();
        let m = JobManifest::load(&manifest).unwrap();
        let inputs = crate::pipeline::JobInputs::load(&m).unwrap();
        assert_eq!(inputs.cameras.len(), 3);
        let bits = |d: &DepthMap| d.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&inputs.depths[1]), bits(&scene.depth[1]));
        assert_eq!(inputs.images[2].as_ref(), Some(&scene.images[2]));
        assert_eq!(inputs.matches, scene.matches);
        for (a, b) in inputs.cameras.iter().zip(&scene.cameras) {
            assert!((a.k - b.k).norm() < 1e-12 && (a.r - b.r).norm() < 1e-12 && (a.t - b.t).norm() < 1e-12);
        }
        let truth = read_truth(&dir.path().join(TRUTH_FILE)).unwrap();
        assert_eq!(truth.surface, scene.surface);
        assert_eq!(truth.spec, scene.spec);
    }
}
