//! Pinhole cameras, depth backprojection, dense pointmaps and scene scale.
//!
//! Pixel coordinates are `(i, j) = (column, row)` with pixel centers at
//! integer coordinates. Readers of external formats (COLMAP, for instance)
//! translate their own convention at the I/O boundary.

use log::warn;
use nalgebra::{Matrix3, Matrix3x4, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identifier of a training view.
pub type ViewId = u32;

/// Camera-frame depths at or below this value are treated as behind the camera.
pub const BEHIND_CAMERA_EPS: f64 = 1e-12;

const ROTATION_TOL: f64 = 1e-9;

/// Pinhole camera with a world-to-camera pose: `x_cam = R * x_world + t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub id: ViewId,
    pub k: Matrix3<f64>,
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
    pub width: u32,
    pub height: u32,
}

impl Camera {
    /// Builds a camera, checking the intrinsic and rotation invariants.
    pub fn new(
        id: ViewId,
        k: Matrix3<f64>,
        r: Matrix3<f64>,
        t: Vector3<f64>,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let cam = Camera {
            id,
            k,
            r,
            t,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera with `K = [[f, 0, cx], [0, f, cy], [0, 0, 1]]`.
    pub fn from_focal(
        id: ViewId,
        focal: (f64, f64),
        principal: (f64, f64),
        r: Matrix3<f64>,
        t: Vector3<f64>,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let k = Matrix3::new(
            focal.0,
            0.0,
            principal.0,
            0.0,
            focal.1,
            principal.1,
            0.0,
            0.0,
            1.0,
        );
        Camera::new(id, k, r, t, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.k;
        if !(k.iter().all(|v| v.is_finite())
            && self.r.iter().all(|v| v.is_finite())
            && self.t.iter().all(|v| v.is_finite()))
        {
            return Err(Error::InvalidInput(format!(
                "camera {}: non-finite parameters",
                self.id
            )));
        }
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 || k[(2, 2)] != 1.0 {
            return Err(Error::InvalidInput(format!(
                "camera {}: K must be upper-triangular with K[2][2] = 1",
                self.id
            )));
        }
        if k[(0, 0)] <= 0.0 || k[(1, 1)] <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "camera {}: focal lengths must be positive",
                self.id
            )));
        }
        let ortho = (self.r * self.r.transpose() - Matrix3::identity()).abs().max();
        let det = self.r.determinant();
        if ortho > ROTATION_TOL || (det - 1.0).abs() > ROTATION_TOL {
            return Err(Error::InvalidInput(format!(
                "camera {}: R is not a proper rotation (|RRᵀ-I| = {ortho:e}, det = {det})",
                self.id
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidInput(format!(
                "camera {}: image dimensions must be at least 1x1",
                self.id
            )));
        }
        Ok(())
    }

    /// Camera center in world coordinates, `-Rᵀ t`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.r.transpose() * self.t)
    }

    /// The 3×4 projection matrix `K [R | t]`.
    pub fn projection_matrix(&self) -> Matrix3x4<f64> {
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.r);
        rt.set_column(3, &self.t);
        self.k * rt
    }

    pub fn to_camera(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.r * x + self.t
    }

    pub fn to_world(&self, x_cam: &Vector3<f64>) -> Vector3<f64> {
        self.r.transpose() * (x_cam - self.t)
    }

    /// Projects a world point to pixel coordinates; `None` if it lies behind the camera.
    pub fn project(&self, x: &Vector3<f64>) -> Option<Vector2<f64>> {
        let xc = self.to_camera(x);
        if xc.z <= BEHIND_CAMERA_EPS {
            return None;
        }
        let h = self.k * xc;
        Some(Vector2::new(h.x / h.z, h.y / h.z))
    }

    /// Camera-frame point `K⁻¹ [i, j, 1]ᵀ · depth`.
    pub fn backproject_pixel(&self, pixel: &Vector2<f64>, depth: f64) -> Result<Vector3<f64>> {
        if !(depth.is_finite() && depth > 0.0) {
            return Err(Error::InvalidInput(format!(
                "backprojection depth must be positive and finite, got {depth}"
            )));
        }
        Ok(self.ray(pixel) * depth)
    }

    /// `K⁻¹ [i, j, 1]ᵀ`, the camera-frame ray with unit z.
    pub fn ray(&self, pixel: &Vector2<f64>) -> Vector3<f64> {
        // K is upper-triangular, so solve by back substitution.
        let k = &self.k;
        let y = (pixel.y - k[(1, 2)]) / k[(1, 1)];
        let x = (pixel.x - k[(0, 1)] * y - k[(0, 2)]) / k[(0, 0)];
        Vector3::new(x, y, 1.0)
    }

    pub fn contains_pixel(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= -0.5
            && pixel.y >= -0.5
            && pixel.x < self.width as f64 - 0.5
            && pixel.y < self.height as f64 - 0.5
    }
}

/// Returns `true` for depths that count as observations.
#[inline]
pub fn is_valid_depth(d: f64) -> bool {
    d.is_finite() && d > 0.0
}

/// Per-view depth grid in camera-frame z, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub view: ViewId,
    pub width: u32,
    pub height: u32,
    pub values: Vec<f64>,
}

impl DepthMap {
    pub fn new(view: ViewId, width: u32, height: u32, values: Vec<f64>) -> Result<Self> {
        if values.len() != width as usize * height as usize {
            return Err(Error::InvalidInput(format!(
                "depth map for view {view}: expected {} values, got {}",
                width as usize * height as usize,
                values.len()
            )));
        }
        Ok(DepthMap {
            view,
            width,
            height,
            values,
        })
    }

    pub fn get(&self, i: u32, j: u32) -> f64 {
        self.values[j as usize * self.width as usize + i as usize]
    }

    pub fn is_valid(&self, i: u32, j: u32) -> bool {
        is_valid_depth(self.get(i, j))
    }
}

/// Dense per-pixel world points with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Pointmap {
    pub view: ViewId,
    pub width: u32,
    pub height: u32,
    pub points: Vec<Vector3<f64>>,
    pub valid: Vec<bool>,
}

impl Pointmap {
    #[inline]
    pub fn index(&self, i: u32, j: u32) -> usize {
        j as usize * self.width as usize + i as usize
    }

    pub fn get(&self, i: u32, j: u32) -> Option<Vector3<f64>> {
        let idx = self.index(i, j);
        self.valid[idx].then(|| self.points[idx])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Bilinear sample at a sub-pixel location over the valid neighbors.
    ///
    /// Returns `None` when the location is outside the grid, when the nearest
    /// pixel is invalid, or when no neighbor with positive weight is valid.
    pub fn sample_bilinear(&self, pixel: &Vector2<f64>) -> Option<Vector3<f64>> {
        let (w, h) = (self.width as f64, self.height as f64);
        if !(pixel.x >= -0.5 && pixel.y >= -0.5 && pixel.x < w - 0.5 && pixel.y < h - 0.5) {
            return None;
        }
        let nearest_i = (pixel.x.round().max(0.0) as u32).min(self.width - 1);
        let nearest_j = (pixel.y.round().max(0.0) as u32).min(self.height - 1);
        if !self.valid[self.index(nearest_i, nearest_j)] {
            return None;
        }
        let x = pixel.x.clamp(0.0, w - 1.0);
        let y = pixel.y.clamp(0.0, h - 1.0);
        let i0 = x.floor() as u32;
        let j0 = y.floor() as u32;
        let fx = x - i0 as f64;
        let fy = y - j0 as f64;
        let i1 = (i0 + 1).min(self.width - 1);
        let j1 = (j0 + 1).min(self.height - 1);

        let mut acc = Vector3::zeros();
        let mut wsum = 0.0;
        for (ii, jj, wt) in [
            (i0, j0, (1.0 - fx) * (1.0 - fy)),
            (i1, j0, fx * (1.0 - fy)),
            (i0, j1, (1.0 - fx) * fy),
            (i1, j1, fx * fy),
        ] {
            if wt <= 0.0 {
                continue;
            }
            let idx = self.index(ii, jj);
            if self.valid[idx] {
                acc += self.points[idx] * wt;
                wsum += wt;
            }
        }
        if wsum <= 0.0 {
            return None;
        }
        if wsum == 1.0 {
            Some(acc)
        } else {
            Some(acc / wsum)
        }
    }
}

/// Backprojects every valid depth pixel into world coordinates.
pub fn backproject_depthmap(camera: &Camera, depth: &DepthMap) -> Result<Pointmap> {
    if depth.width != camera.width || depth.height != camera.height {
        return Err(Error::InvalidInput(format!(
            "depth map {}x{} does not match camera {} ({}x{})",
            depth.width, depth.height, camera.id, camera.width, camera.height
        )));
    }
    let w = depth.width as usize;
    let rows: Vec<Vec<(Vector3<f64>, bool)>> = (0..depth.height)
        .into_par_iter()
        .map(|j| {
            (0..depth.width)
                .map(|i| {
                    let d = depth.values[j as usize * w + i as usize];
                    if is_valid_depth(d) {
                        let xc = camera.ray(&Vector2::new(i as f64, j as f64)) * d;
                        (camera.to_world(&xc), true)
                    } else {
                        (Vector3::zeros(), false)
                    }
                })
                .collect()
        })
        .collect();
    let (points, valid) = rows.into_iter().flatten().unzip();
    Ok(Pointmap {
        view: camera.id,
        width: depth.width,
        height: depth.height,
        points,
        valid,
    })
}

/// Radius of the sphere around the mean camera center that encloses all centers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneScale {
    pub radius: f64,
    pub centroid: Vector3<f64>,
}

/// Computes the scene scale from camera centers; falls back to 1.0 when the
/// centers coincide.
pub fn scene_scale(cameras: &[Camera]) -> Result<SceneScale> {
    if cameras.is_empty() {
        return Err(Error::InvalidInput(
            "scene scale needs at least one camera".into(),
        ));
    }
    let centers: Vec<Vector3<f64>> = cameras.iter().map(Camera::center).collect();
    let centroid = centers.iter().sum::<Vector3<f64>>() / centers.len() as f64;
    let radius = centers
        .iter()
        .map(|c| (c - centroid).norm())
        .fold(0.0, f64::max);
    if radius > 1e-12 {
        Ok(SceneScale { radius, centroid })
    } else {
        warn!("camera centers coincide; using scene scale 1.0");
        Ok(SceneScale {
            radius: 1.0,
            centroid,
        })
    }
}

/// Rotation that makes a camera at `eye` look at `target`, with image y
/// pointing roughly along `-up`.
pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>, up: &Vector3<f64>) -> (Matrix3<f64>, Vector3<f64>) {
    let z = (target - eye).normalize();
    let x = z.cross(&-up).normalize();
    let y = z.cross(&x);
    let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    let t = -(r * eye);
    (r, t)
}
