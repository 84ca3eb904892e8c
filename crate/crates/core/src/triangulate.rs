//! Multi-view triangulation: homogeneous DLT followed by Levenberg-Marquardt
//! refinement of the summed squared reprojection error.

use std::collections::BTreeMap;

use log::{debug, info};
use nalgebra::{DMatrix, Matrix2x3, Matrix3, Matrix3x4, Matrix4, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Camera, ViewId, BEHIND_CAMERA_EPS};
use crate::tracks::Track;

/// Cameras keyed by view id.
pub type CameraMap = BTreeMap<ViewId, Camera>;

/// Default inlier threshold on the mean reprojection error, in pixels.
pub const DEFAULT_MAX_REPROJ_PX: f64 = 2.0;

const INITIAL_DAMPING: f64 = 1e-3;
const MAX_ITERATIONS: usize = 50;

/// A triangulated, filtered track point used as a desired control point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlPoint {
    pub position: Vector3<f64>,
    /// Index of the source track.
    pub track: usize,
    pub mean_reproj_error: f64,
    pub views: usize,
}

pub fn cameras_by_id(cameras: &[Camera]) -> CameraMap {
    cameras.iter().map(|c| (c.id, c.clone())).collect()
}

fn observing<'a>(track: &'a Track, cameras: &'a CameraMap) -> Result<Vec<(&'a Camera, Vector2<f64>)>> {
    track
        .observations()
        .iter()
        .map(|(view, px)| {
            cameras
                .get(view)
                .map(|c| (c, *px))
                .ok_or_else(|| Error::InvalidInput(format!("track references unknown view {view}")))
        })
        .collect()
}

/// Linear triangulation from the stacked cross-product constraints `p̃ × (P X) = 0`.
pub fn triangulate_dlt(track: &Track, cameras: &CameraMap) -> Result<Vector3<f64>> {
    let obs = observing(track, cameras)?;
    if obs.len() < 2 {
        return Err(Error::InvalidInput("triangulation needs two observations".into()));
    }

    // Condition the world side on the camera centers.
    let centers: Vec<Vector3<f64>> = obs.iter().map(|(c, _)| c.center()).collect();
    let mean = centers.iter().sum::<Vector3<f64>>() / centers.len() as f64;
    let spread = centers.iter().map(|c| (c - mean).norm()).fold(0.0, f64::max);
    if spread <= 1e-12 * (1.0 + mean.norm()) {
        return Err(Error::DegenerateBaseline);
    }
    let mut denorm = Matrix4::identity() * spread;
    denorm.fixed_view_mut::<3, 1>(0, 3).copy_from(&mean);
    denorm[(3, 3)] = 1.0;

    let mut a = DMatrix::<f64>::zeros(2 * obs.len(), 4);
    for (k, (cam, px)) in obs.iter().enumerate() {
        // Pixel side: center on the image and scale by the diagonal.
        let (w, h) = (cam.width as f64, cam.height as f64);
        let diag = (w * w + h * h).sqrt();
        let norm = Matrix3::new(
            1.0 / diag,
            0.0,
            -0.5 * (w - 1.0) / diag,
            0.0,
            1.0 / diag,
            -0.5 * (h - 1.0) / diag,
            0.0,
            0.0,
            1.0,
        );
        let p: Matrix3x4<f64> = norm * cam.projection_matrix() * denorm;
        let q = norm * Vector3::new(px.x, px.y, 1.0);
        let (x, y) = (q.x / q.z, q.y / q.z);
        let row0 = p.row(2) * x - p.row(0);
        let row1 = p.row(2) * y - p.row(1);
        a.row_mut(2 * k).copy_from(&(row0 / row0.norm().max(f64::MIN_POSITIVE)));
        a.row_mut(2 * k + 1).copy_from(&(row1 / row1.norm().max(f64::MIN_POSITIVE)));
    }

    let svd = a.svd(false, true);
    let v_t = svd.v_t.expect("requested V");
    let (min_idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("four singular values");
    let xh = v_t.row(min_idx).transpose();
    let xh = &xh / xh.norm();
    if xh[3].abs() < 1e-12 {
        return Err(Error::PointAtInfinity(xh[3].abs()));
    }
    let local = Vector3::new(xh[0], xh[1], xh[2]) / xh[3];
    Ok(local * spread + mean)
}

/// Projection `π(K(RX + t))` and its Jacobian with respect to `X`.
///
/// Returns `None` when the camera-frame depth is zero.
pub fn projection_jacobian(camera: &Camera, x: &Vector3<f64>) -> Option<(Vector2<f64>, Matrix2x3<f64>)> {
    let m = camera.k * camera.r;
    let y = m * x + camera.k * camera.t;
    if y.z.abs() < f64::MIN_POSITIVE || !y.iter().all(|v| v.is_finite()) {
        return None;
    }
    let u = y.x / y.z;
    let v = y.y / y.z;
    let row_u = (m.row(0) - m.row(2) * u) / y.z;
    let row_v = (m.row(1) - m.row(2) * v) / y.z;
    Some((Vector2::new(u, v), Matrix2x3::from_rows(&[row_u, row_v])))
}

fn raw_projection(camera: &Camera, x: &Vector3<f64>) -> Vector2<f64> {
    let y = camera.k * (camera.r * x + camera.t);
    Vector2::new(y.x / y.z, y.y / y.z)
}

/// Summed squared reprojection error of `x` over all observations of the track.
pub fn reprojection_cost(x: &Vector3<f64>, obs: &[(&Camera, Vector2<f64>)]) -> f64 {
    obs.iter()
        .map(|(cam, px)| (raw_projection(cam, x) - px).norm_squared())
        .sum()
}

/// Outcome of a nonlinear refinement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Refinement {
    pub position: Vector3<f64>,
    pub initial_cost: f64,
    pub cost: f64,
    pub iterations: usize,
}

/// Levenberg-Marquardt minimization of the reprojection error starting at `x0`.
///
/// The returned cost never exceeds the cost at `x0`.
pub fn refine_reprojection(x0: &Vector3<f64>, track: &Track, cameras: &CameraMap) -> Result<Refinement> {
    let obs = observing(track, cameras)?;
    let initial_cost = reprojection_cost(x0, &obs);
    if !initial_cost.is_finite() || !x0.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "reprojection cost at the initial point is not finite ({initial_cost})"
        )));
    }

    let mut x = *x0;
    let mut cost = initial_cost;
    let mut lambda = INITIAL_DAMPING;
    let mut iterations = 0;

    'outer: while iterations < MAX_ITERATIONS {
        let mut h = Matrix3::<f64>::zeros();
        let mut g = Vector3::<f64>::zeros();
        for (cam, px) in &obs {
            let Some((proj, jac)) = projection_jacobian(cam, &x) else {
                break 'outer;
            };
            let r = proj - px;
            h += jac.transpose() * jac;
            g += jac.transpose() * r;
        }
        let diag_floor = 1e-12 * h.diagonal().max().max(f64::MIN_POSITIVE);

        loop {
            iterations += 1;
            let mut damped = h;
            for i in 0..3 {
                damped[(i, i)] += lambda * h[(i, i)].max(diag_floor);
            }
            let Some(step) = damped.cholesky().map(|c| c.solve(&-g)) else {
                lambda *= 10.0;
                if iterations >= MAX_ITERATIONS || lambda > 1e16 {
                    break 'outer;
                }
                continue;
            };
            if step.norm() < 1e-10 * (1.0 + x.norm()) {
                break 'outer;
            }
            let candidate = x + step;
            let new_cost = reprojection_cost(&candidate, &obs);
            if new_cost.is_finite() && new_cost < cost {
                let decrease = cost - new_cost;
                x = candidate;
                cost = new_cost;
                lambda = (lambda * 0.1).max(1e-12);
                if decrease < 1e-12 {
                    break 'outer;
                }
                break;
            }
            lambda *= 10.0;
            if iterations >= MAX_ITERATIONS || lambda > 1e16 {
                break 'outer;
            }
        }
    }

    Ok(Refinement {
        position: x,
        initial_cost,
        cost,
        iterations,
    })
}

/// Why a track did not produce a control point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RejectionCounts {
    pub failed: usize,
    pub cheirality: usize,
    pub reprojection: usize,
}

impl RejectionCounts {
    pub fn total(&self) -> usize {
        self.failed + self.cheirality + self.reprojection
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Triangulation {
    pub controls: Vec<ControlPoint>,
    pub rejected: RejectionCounts,
}

enum Outcome {
    Accepted(ControlPoint),
    Failed,
    Cheirality,
    Reprojection,
}

fn triangulate_track(index: usize, track: &Track, cameras: &CameraMap, max_reproj_error: f64) -> Outcome {
    let Ok(obs) = observing(track, cameras) else {
        return Outcome::Failed;
    };
    let refined = triangulate_dlt(track, cameras).and_then(|x0| refine_reprojection(&x0, track, cameras));
    let x = match refined {
        Ok(r) => r.position,
        Err(e) => {
            debug!("track {index}: {e}");
            return Outcome::Failed;
        }
    };
    let mut total = 0.0;
    for (cam, px) in &obs {
        if cam.to_camera(&x).z <= BEHIND_CAMERA_EPS {
            return Outcome::Cheirality;
        }
        match cam.project(&x) {
            Some(p) => total += (p - px).norm(),
            None => return Outcome::Cheirality,
        }
    }
    let mean = total / obs.len() as f64;
    if !(mean <= max_reproj_error) {
        return Outcome::Reprojection;
    }
    Outcome::Accepted(ControlPoint {
        position: x,
        track: index,
        mean_reproj_error: mean,
        views: obs.len(),
    })
}

/// Triangulates every track, keeping points in front of all observing cameras
/// whose mean reprojection error is within `max_reproj_error` pixels.
pub fn triangulate_all(tracks: &[Track], cameras: &CameraMap, max_reproj_error: f64) -> Triangulation {
    let outcomes: Vec<Outcome> = tracks
        .par_iter()
        .enumerate()
        .map(|(i, t)| triangulate_track(i, t, cameras, max_reproj_error))
        .collect();
    let mut controls = Vec::new();
    let mut rejected = RejectionCounts::default();
    for o in outcomes {
        match o {
            Outcome::Accepted(c) => controls.push(c),
            Outcome::Failed => rejected.failed += 1,
            Outcome::Cheirality => rejected.cheirality += 1,
            Outcome::Reprojection => rejected.reprojection += 1,
        }
    }
    info!(
        "triangulated {} of {} tracks ({} failed, {} behind camera, {} above {max_reproj_error} px)",
        controls.len(),
        tracks.len(),
        rejected.failed,
        rejected.cheirality,
        rejected.reprojection
    );
    Triangulation { controls, rejected }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::look_at;
    use nalgebra::Rotation3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn rig(n: usize) -> CameraMap {
        let k = Matrix3::new(500.0, 0.0, 319.5, 0.0, 500.0, 239.5, 0.0, 0.0, 1.0);
        (0..n)
            .map(|i| {
                let ang = (i as f64 - (n as f64 - 1.0) / 2.0) * 0.25;
                let eye = Vector3::new(6.0 * ang.sin(), 0.3 * i as f64, -6.0 * ang.cos());
                let (r, t) = look_at(&eye, &Vector3::zeros(), &Vector3::y());
                (i as u32, Camera::new(i as u32, k, r, t, 640, 480).unwrap())
            })
            .collect()
    }

    fn exact_track(cams: &CameraMap, x: &Vector3<f64>) -> Track {
        Track::from_pairs(cams.values().map(|c| (c.id, c.project(x).unwrap()))).unwrap()
    }

    #[test]
    fn two_view_exact() {
        let cams: CameraMap = [
            (0, Camera::new(0, Matrix3::identity(), Matrix3::identity(), Vector3::zeros(), 2, 2).unwrap()),
            (
                1,
                Camera::new(1, Matrix3::identity(), Matrix3::identity(), Vector3::new(-1.0, 0.0, 0.0), 2, 2).unwrap(),
            ),
        ]
        .into();
        let track = Track::from_pairs([(0, Vector2::new(0.0, 0.0)), (1, Vector2::new(-0.2, 0.0))]).unwrap();
        let x = triangulate_dlt(&track, &cams).unwrap();
        assert!((x - Vector3::new(0.0, 0.0, 5.0)).norm() < 1e-8);
    }

    #[test]
    fn coincident_centers_rejected() {
        let r2 = *Rotation3::from_euler_angles(0.0, 0.1, 0.0).matrix();
        let cams: CameraMap = [
            (0, Camera::new(0, Matrix3::identity(), Matrix3::identity(), Vector3::zeros(), 2, 2).unwrap()),
            (1, Camera::new(1, Matrix3::identity(), r2, Vector3::zeros(), 2, 2).unwrap()),
        ]
        .into();
        let track = Track::from_pairs([(0, Vector2::new(0.0, 0.0)), (1, Vector2::new(0.1, 0.0))]).unwrap();
        assert!(matches!(triangulate_dlt(&track, &cams), Err(Error::DegenerateBaseline)));
    }

    /// Minimum of the reprojection cost over a shrinking grid around `center`.
    fn grid_search(obs: &[(&Camera, Vector2<f64>)], center: Vector3<f64>, half: f64) -> (Vector3<f64>, f64) {
        let mut best = (center, reprojection_cost(&center, obs));
        let mut half = half;
        for _ in 0..12 {
            let c = best.0;
            let n = 10;
            for i in -n..=n {
                for j in -n..=n {
                    for k in -n..=n {
                        let x = c + Vector3::new(i as f64, j as f64, k as f64) * (half / n as f64);
                        let f = reprojection_cost(&x, obs);
                        if f < best.1 {
                            best = (x, f);
                        }
                    }
                }
            }
            half /= 4.0;
        }
        best
    }

    #[test]
    fn noisy_track_matches_grid_search() {
        let cams = rig(3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = Normal::new(0.0, 0.5).unwrap();
        for _ in 0..5 {
            let truth = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let track = Track::from_pairs(cams.values().map(|c| {
                let p = c.project(&truth).unwrap();
                (c.id, p + Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng)))
            }))
            .unwrap();
            let obs = observing(&track, &cams).unwrap();
            let (grid_x, grid_f) = grid_search(&obs, truth, 0.2);
            let dlt = triangulate_dlt(&track, &cams).unwrap();
            assert!((dlt - grid_x).norm() < 0.05, "dlt {dlt} grid {grid_x}");
            let refined = refine_reprojection(&dlt, &track, &cams).unwrap();
            assert!(refined.cost <= refined.initial_cost);
            assert!(
                (refined.cost - grid_f).abs() <= 1e-4 * grid_f.max(1e-12),
                "refined {} grid {}",
                refined.cost,
                grid_f
            );
        }
    }

    #[test]
    fn refinement_fixed_point_and_basin() {
        let cams = rig(3);
        let truth = Vector3::new(0.2, -0.3, 0.4);
        let track = exact_track(&cams, &truth);
        let r = refine_reprojection(&truth, &track, &cams).unwrap();
        assert!((r.position - truth).norm() < 1e-12);
        let r = refine_reprojection(&(truth + Vector3::new(0.1, -0.1, 0.1)), &track, &cams).unwrap();
        assert!((r.position - truth).norm() < 1e-6);
    }

    #[test]
    fn refinement_rejects_non_finite_start() {
        let cams = rig(2);
        let track = exact_track(&cams, &Vector3::zeros());
        assert!(refine_reprojection(&Vector3::new(f64::NAN, 0.0, 0.0), &track, &cams).is_err());
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let k = Matrix3::new(
                rng.random_range(100.0..1000.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(100.0..400.0),
                0.0,
                rng.random_range(100.0..1000.0),
                rng.random_range(100.0..400.0),
                0.0,
                0.0,
                1.0,
            );
            let r = *Rotation3::from_euler_angles(rng.random(), rng.random(), rng.random()).matrix();
            let t = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(3.0..6.0));
            let cam = Camera::new(0, k, r, t, 800, 600).unwrap();
            let xc = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(1.0..5.0));
            let x = cam.to_world(&xc);
            let (_, jac) = projection_jacobian(&cam, &x).unwrap();
            let h = 1e-6;
            for c in 0..3 {
                let mut e = Vector3::zeros();
                e[c] = h;
                let fd = (raw_projection(&cam, &(x + e)) - raw_projection(&cam, &(x - e))) / (2.0 * h);
                let an = jac.column(c);
                let rel = (fd - an).norm() / an.norm().max(1e-12);
                assert!(rel < 1e-5, "column {c}: rel err {rel}");
            }
        }
    }

    #[test]
    fn triangulate_all_filters() {
        let cams = rig(3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let truths: Vec<Vector3<f64>> = (0..20)
            .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let mut tracks: Vec<Track> = truths.iter().map(|x| exact_track(&cams, x)).collect();
        let all = triangulate_all(&tracks, &cams, DEFAULT_MAX_REPROJ_PX);
        assert_eq!(all.controls.len(), 20);
        for c in &all.controls {
            assert!((c.position - truths[c.track]).norm() < 1e-6);
            assert_eq!(c.views, 3);
        }

        // Swap one observation with another track's pixel.
        let other = tracks[1].pixel_in(2).unwrap();
        tracks[0].insert(2, other);
        let obs = observing(&tracks[0], &cams).unwrap();
        let x = refine_reprojection(&triangulate_dlt(&tracks[0], &cams).unwrap(), &tracks[0], &cams)
            .unwrap()
            .position;
        let mean: f64 = obs.iter().map(|(c, p)| (raw_projection(c, &x) - p).norm()).sum::<f64>() / 3.0;
        assert!(mean > DEFAULT_MAX_REPROJ_PX);
        let all = triangulate_all(&tracks, &cams, DEFAULT_MAX_REPROJ_PX);
        assert_eq!(all.controls.len(), 19);
        assert_eq!(all.rejected.reprojection, 1);
        assert!(all.controls.iter().all(|c| c.track != 0));
    }

    #[test]
    fn cheirality_rejection() {
        // Two cameras facing +z; a point behind both still satisfies the linear system.
        let k = Matrix3::new(100.0, 0.0, 50.0, 0.0, 100.0, 50.0, 0.0, 0.0, 1.0);
        let cams: CameraMap = [
            (0, Camera::new(0, k, Matrix3::identity(), Vector3::zeros(), 100, 100).unwrap()),
            (1, Camera::new(1, k, Matrix3::identity(), Vector3::new(-1.0, 0.0, 0.0), 100, 100).unwrap()),
        ]
        .into();
        let behind = Vector3::new(0.3, 0.2, -4.0);
        let track = Track::from_pairs(cams.values().map(|c| {
            let h = c.k * c.to_camera(&behind);
            (c.id, Vector2::new(h.x / h.z, h.y / h.z))
        }))
        .unwrap();
        let all = triangulate_all(&[track], &cams, DEFAULT_MAX_REPROJ_PX);
        assert!(all.controls.is_empty());
        assert_eq!(all.rejected.cheirality, 1);
    }

    #[test]
    fn rigid_equivariance() {
        let cams = rig(4);
        let truth = Vector3::new(0.1, 0.5, -0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noise = Normal::new(0.0, 0.3).unwrap();
        let track = Track::from_pairs(cams.values().map(|c| {
            (c.id, c.project(&truth).unwrap() + Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng)))
        }))
        .unwrap();
        let rot = *Rotation3::from_euler_angles(0.3, -0.7, 1.1).matrix();
        let shift = Vector3::new(2.0, -1.0, 0.5);
        // x' = rot x + shift; camera maps x' via R rotᵀ and t - R rotᵀ shift
        let moved: CameraMap = cams
            .iter()
            .map(|(id, c)| {
                let r = c.r * rot.transpose();
                let t = c.t - r * shift;
                (*id, Camera::new(*id, c.k, r, t, c.width, c.height).unwrap())
            })
            .collect();
        let solve = |cams: &CameraMap| {
            let x0 = triangulate_dlt(&track, cams).unwrap();
            refine_reprojection(&x0, &track, cams).unwrap().position
        };
        let a = solve(&cams);
        let b = solve(&moved);
        assert!((rot * a + shift - b).norm() < 1e-6);
    }
}
