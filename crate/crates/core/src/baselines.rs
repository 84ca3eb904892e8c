//! Global linear depth alignment, the reference point for judging the
//! non-rigid warp.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{is_valid_depth, Camera, DepthMap};
use crate::tps::{fit_tps_scaled, ControlPair};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthAlignment {
    pub scale: f64,
    pub offset: f64,
    pub rms: f64,
}

impl DepthAlignment {
    pub fn identity() -> Self {
        DepthAlignment {
            scale: 1.0,
            offset: 0.0,
            rms: 0.0,
        }
    }

    #[inline]
    pub fn apply(&self, d: f64) -> f64 {
        self.scale * d + self.offset
    }
}

/// Least-squares `s, b` minimizing `sum (s * est + b - ref)^2`.
pub fn fit_linear_scaling(estimated: &[f64], reference: &[f64]) -> Result<DepthAlignment> {
    if estimated.len() != reference.len() {
        return Err(Error::InvalidInput(format!(
            "{} estimated depths but {} reference depths",
            estimated.len(),
            reference.len()
        )));
    }
    if estimated.len() < 2 {
        return Err(Error::InvalidInput("linear scaling needs at least two depth pairs".into()));
    }
    if estimated.iter().chain(reference).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("depths must be finite".into()));
    }
    let n = estimated.len() as f64;
    let mean_e = estimated.iter().sum::<f64>() / n;
    let mean_r = reference.iter().sum::<f64>() / n;
    let mut see = 0.0;
    let mut ser = 0.0;
    for (e, r) in estimated.iter().zip(reference) {
        see += (e - mean_e) * (e - mean_e);
        ser += (e - mean_e) * (r - mean_r);
    }
    let spread = estimated.iter().fold(0.0f64, |m, e| m.max((e - mean_e).abs()));
    if spread <= 1e-12 * mean_e.abs().max(1.0) {
        return Err(Error::RankDeficient("estimated depths are all equal".into()));
    }
    let scale = ser / see;
    let offset = mean_r - scale * mean_e;
    let sq: f64 = estimated
        .iter()
        .zip(reference)
        .map(|(e, r)| (scale * e + offset - r).powi(2))
        .sum();
    Ok(DepthAlignment {
        scale,
        offset,
        rms: (sq / n).sqrt(),
    })
}

/// Rescales every valid depth; results that are not positive become invalid.
pub fn apply_linear_scaling(alignment: &DepthAlignment, depth: &DepthMap) -> DepthMap {
    let values = depth
        .values
        .iter()
        .map(|&d| {
            if !is_valid_depth(d) {
                return d;
            }
            let v = alignment.apply(d);
            if is_valid_depth(v) {
                v
            } else {
                f64::NAN
            }
        })
        .collect();
    DepthMap {
        view: depth.view,
        width: depth.width,
        height: depth.height,
        values,
    }
}

/// Moves a backprojected point along its camera ray to the rescaled depth.
pub fn rescale_point(camera: &Camera, alignment: &DepthAlignment, x: &Vector3<f64>) -> Option<Vector3<f64>> {
    let xc = camera.to_camera(x);
    if !is_valid_depth(xc.z) {
        return None;
    }
    let d = alignment.apply(xc.z);
    is_valid_depth(d).then(|| camera.to_world(&(xc * (d / xc.z))))
}

/// Fits linear scaling to control pairs of one view: source depths against
/// the camera-frame depth of the triangulated targets.
pub fn fit_linear_scaling_pairs(camera: &Camera, pairs: &[ControlPair]) -> Result<DepthAlignment> {
    let (est, reference): (Vec<f64>, Vec<f64>) = pairs
        .iter()
        .map(|p| (camera.to_camera(&p.source).z, camera.to_camera(&p.target).z))
        .unzip();
    fit_linear_scaling(&est, &reference)
}

/// RMS held-out alignment error of both deformation methods.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeldOutErrors {
    pub tps: f64,
    pub linear: f64,
    pub train: usize,
    pub test: usize,
}

/// Fits both methods on `train` and measures how far they move the `test`
/// sources from their targets.
pub fn compare_held_out(
    camera: &Camera,
    train: &[ControlPair],
    test: &[ControlPair],
    lambda: f64,
    scene_scale: Option<f64>,
) -> Result<HeldOutErrors> {
    if test.is_empty() {
        return Err(Error::InvalidInput("no held-out pairs".into()));
    }
    let tps = fit_tps_scaled(train, lambda, scene_scale)?;
    let ls = fit_linear_scaling_pairs(camera, train)?;
    let mut tps_sq = 0.0;
    let mut ls_sq = 0.0;
    for p in test {
        tps_sq += (tps.apply(&p.source) - p.target).norm_squared();
        let moved = rescale_point(camera, &ls, &p.source).ok_or_else(|| {
            Error::RankDeficient("linear scaling maps a held-out point behind the camera".into())
        })?;
        ls_sq += (moved - p.target).norm_squared();
    }
    let n = test.len() as f64;
    Ok(HeldOutErrors {
        tps: (tps_sq / n).sqrt(),
        linear: (ls_sq / n).sqrt(),
        train: train.len(),
        test: test.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix2, Vector2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cost(a: f64, b: f64, est: &[f64], r: &[f64]) -> f64 {
        est.iter().zip(r).map(|(e, r)| (a * e + b - r).powi(2)).sum()
    }

    #[test]
    fn exact_relations() {
        let a = fit_linear_scaling(&[1.0, 2.0], &[2.0, 4.0]).unwrap();
        assert!((a.scale - 2.0).abs() < 1e-15 && a.offset.abs() < 1e-15 && a.rms < 1e-15);
        let d = [1.5, 2.5, 7.0];
        let a = fit_linear_scaling(&d, &d).unwrap();
        assert!((a.scale - 1.0).abs() < 1e-15 && a.offset.abs() < 1e-14);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            fit_linear_scaling(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]),
            Err(Error::RankDeficient(_))
        ));
        assert!(fit_linear_scaling(&[1.0], &[1.0]).is_err());
        assert!(fit_linear_scaling(&[1.0, 2.0], &[1.0]).is_err());
    }

    fn noisy(seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let est: Vec<f64> = (0..30).map(|_| rng.random_range(1.0..10.0)).collect();
        let r = est.iter().map(|e| 1.7 * e - 0.4 + rng.random_range(-0.3..0.3)).collect();
        (est, r)
    }

    #[test]
    fn matches_normal_equations() {
        let (est, r) = noisy(11);
        let a = fit_linear_scaling(&est, &r).unwrap();
        let n = est.len() as f64;
        let sx: f64 = est.iter().sum();
        let sxx: f64 = est.iter().map(|e| e * e).sum();
        let sy: f64 = r.iter().sum();
        let sxy: f64 = est.iter().zip(&r).map(|(e, r)| e * r).sum();
        let sol = Matrix2::new(sxx, sx, sx, n).lu().solve(&Vector2::new(sxy, sy)).unwrap();
        assert!((a.scale - sol.x).abs() < 1e-10);
        assert!((a.offset - sol.y).abs() < 1e-10);
        assert!((a.rms - (cost(a.scale, a.offset, &est, &r) / n).sqrt()).abs() < 1e-9);
    }

    #[test]
    fn locally_optimal_on_grid() {
        let (est, r) = noisy(12);
        let a = fit_linear_scaling(&est, &r).unwrap();
        let best = cost(a.scale, a.offset, &est, &r);
        for i in 0..100 {
            for j in 0..100 {
                let s = a.scale + (i as f64 - 49.5) * 1e-3;
                let b = a.offset + (j as f64 - 49.5) * 1e-3;
                assert!(best <= cost(s, b, &est, &r) + 1e-12);
            }
        }
    }

    #[test]
    fn apply_examples() {
        let depth = DepthMap::new(0, 3, 1, vec![3.0, 5.0, f64::NAN]).unwrap();
        let same = apply_linear_scaling(&DepthAlignment::identity(), &depth);
        assert_eq!(same.values[..2], depth.values[..2]);
        let doubled = apply_linear_scaling(
            &DepthAlignment {
                scale: 2.0,
                offset: 0.0,
                rms: 0.0,
            },
            &depth,
        );
        assert_eq!(doubled.values[0], 6.0);
        let shifted = apply_linear_scaling(
            &DepthAlignment {
                scale: 1.0,
                offset: -10.0,
                rms: 0.0,
            },
            &depth,
        );
        assert!(!is_valid_depth(shifted.values[1]));
        assert!(!is_valid_depth(shifted.values[2]));
    }

    #[test]
    fn exact_linear_data_both_zero() {
        let cam = Camera::from_focal(0, (100.0, 100.0), (31.5, 23.5), nalgebra::Matrix3::identity(), Vector3::zeros(), 64, 48).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pairs: Vec<ControlPair> = (0..30)
            .map(|_| {
                let px = Vector2::new(rng.random_range(0.0..63.0), rng.random_range(0.0..47.0));
                let d = rng.random_range(2.0..6.0);
                ControlPair {
                    source: cam.backproject_pixel(&px, d).unwrap(),
                    target: cam.backproject_pixel(&px, 1.3 * d + 0.2).unwrap(),
                    pixel: px,
                }
            })
            .collect();
        let (train, test) = pairs.split_at(20);
        let e = compare_held_out(&cam, train, test, 0.0, None).unwrap();
        assert!(e.linear < 1e-9, "{e:?}");
        let a = fit_linear_scaling_pairs(&cam, train).unwrap();
        assert!((a.scale - 1.3).abs() < 1e-12 && (a.offset - 0.2).abs() < 1e-12);
    }
}
