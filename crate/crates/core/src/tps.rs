//! Three-dimensional thin-plate-spline warps with the kernel `U(r) = r`.
//!
//! A model maps `X` to `t + A·X + Σᵢ wᵢ·U(‖X − cᵢ‖)`, where the centers `cᵢ`
//! are the source control points. Fitting solves the bordered system
//!
//! ```text
//! [ K − λI  P ] [ W ]   [ Y ]
//! [ Pᵀ      0 ] [ a ] = [ 0 ]
//! ```
//!
//! with `K_ij = ‖cᵢ − cⱼ‖` and `P` the affine basis evaluated at the centers.
//! `U(r) = r` is conditionally negative definite, so the smoothing term enters
//! the diagonal as `K − λI`; the residual at the controls is then `λ·W` and
//! grows monotonically with `λ`.
//! The fit is carried out on displacements `Y = target − source` in a
//! centered frame and converted back, which is the same warp as solving on
//! the targets directly but keeps near-identity warps exact.

use faer::linalg::solvers::Solve;
use log::{debug, warn};
use nalgebra::{DMatrix, DVector, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Pointmap, ViewId};
use crate::tracks::Track;
use crate::triangulate::ControlPoint;

/// Minimum number of distinct control pairs for a fit.
pub const MIN_CONTROL_PAIRS: usize = 4;

/// Sources closer than this are merged before fitting.
pub const DEDUP_DISTANCE: f64 = 1e-9;

/// Relative singular-value threshold below which a direction of the source
/// cloud counts as degenerate (coplanar or collinear sources).
const DEGENERATE_RATIO: f64 = 1e-9;

/// Relative ridge used when the plain system cannot be solved.
const FALLBACK_RIDGE: f64 = 1e-8;

/// Initial control point (backprojected estimate) paired with its desired
/// position (triangulated).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlPair {
    pub source: Vector3<f64>,
    pub target: Vector3<f64>,
    pub pixel: Vector2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TpsModel {
    pub translation: Vector3<f64>,
    pub affine: Matrix3<f64>,
    pub centers: Vec<Vector3<f64>>,
    pub weights: Vec<Vector3<f64>>,
    /// Regularization actually used by the fit.
    pub lambda: f64,
}

#[inline]
pub fn kernel(r: f64) -> f64 {
    r
}

impl TpsModel {
    pub fn identity() -> Self {
        TpsModel {
            translation: Vector3::zeros(),
            affine: Matrix3::identity(),
            centers: Vec::new(),
            weights: Vec::new(),
            lambda: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    /// Evaluates the warp at `x`.
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        let mut out = self.translation + self.affine * x;
        for (c, w) in self.centers.iter().zip(&self.weights) {
            out += w * kernel((x - c).norm());
        }
        out
    }

    /// Frobenius norm of the nonaffine weights.
    pub fn weight_norm(&self) -> f64 {
        self.weights.iter().map(|w| w.norm_squared()).sum::<f64>().sqrt()
    }

    /// `(‖Σ wᵢ‖, ‖Σ wᵢ cᵢᵀ‖)`, both zero for a valid spline.
    pub fn side_conditions(&self) -> (f64, f64) {
        let mut sum = Vector3::zeros();
        let mut moment = Matrix3::zeros();
        for (c, w) in self.centers.iter().zip(&self.weights) {
            sum += w;
            moment += w * c.transpose();
        }
        (sum.norm(), moment.norm())
    }

    /// Serializes as `TPS3`, version, M, λ, t, A (row-major), centers, W; all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let m = self.centers.len();
        let mut out = Vec::with_capacity(4 + 4 + 8 + 8 * (1 + 3 + 9 + 6 * m));
        out.extend_from_slice(TPS_MAGIC);
        out.extend_from_slice(&TPS_VERSION.to_le_bytes());
        out.extend_from_slice(&(m as u64).to_le_bytes());
        let mut put = |v: f64| out.extend_from_slice(&v.to_le_bytes());
        put(self.lambda);
        self.translation.iter().for_each(|v| put(*v));
        for r in 0..3 {
            for c in 0..3 {
                put(self.affine[(r, c)]);
            }
        }
        self.centers.iter().flat_map(|c| c.iter()).for_each(|v| put(*v));
        self.weights.iter().flat_map(|w| w.iter()).for_each(|v| put(*v));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 16 || &bytes[0..4] != TPS_MAGIC {
            return Err("missing TPS3 magic".into());
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != TPS_VERSION {
            return Err(format!("unsupported TPS3 version {version}"));
        }
        let m = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let expected = (m as u128) * 48 + 16 + 8 * 13;
        if bytes.len() as u128 != expected {
            return Err(format!(
                "TPS3 record for {m} centers should be {expected} bytes, found {}",
                bytes.len()
            ));
        }
        let m = m as usize;
        let mut vals = bytes[16..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut next = || vals.next().expect("length checked");
        let lambda = next();
        let translation = Vector3::new(next(), next(), next());
        let mut affine = Matrix3::zeros();
        for r in 0..3 {
            for c in 0..3 {
                affine[(r, c)] = next();
            }
        }
        let centers = (0..m).map(|_| Vector3::new(next(), next(), next())).collect();
        let weights = (0..m).map(|_| Vector3::new(next(), next(), next())).collect();
        Ok(TpsModel {
            translation,
            affine,
            centers,
            weights,
            lambda,
        })
    }
}

pub const TPS_MAGIC: &[u8; 4] = b"TPS3";
pub const TPS_VERSION: u32 = 1;

/// Merges pairs whose sources lie within [`DEDUP_DISTANCE`], averaging targets.
fn deduplicate(pairs: &[ControlPair]) -> Vec<(Vector3<f64>, Vector3<f64>)> {
    let mut merged: Vec<(Vector3<f64>, Vector3<f64>, usize)> = Vec::with_capacity(pairs.len());
    for p in pairs {
        match merged
            .iter_mut()
            .find(|(s, _, _)| (s - p.source).norm() <= DEDUP_DISTANCE)
        {
            Some(entry) => {
                entry.1 += p.target;
                entry.2 += 1;
            }
            None => merged.push((p.source, p.target, 1)),
        }
    }
    let dupes = pairs.len() - merged.len();
    if dupes > 0 {
        debug!("merged {dupes} duplicate control sources");
    }
    merged
        .into_iter()
        .map(|(s, t, n)| (s, t / n as f64))
        .collect()
}

/// Fits a warp using the spread of the sources as the fallback-ridge scale.
pub fn fit_tps(pairs: &[ControlPair], lambda: f64) -> Result<TpsModel> {
    fit_tps_scaled(pairs, lambda, None)
}

/// Fits a warp taking source points onto target points.
///
/// `scene_scale`, when given, sets the ridge `1e-8·S` used if the system is
/// rank-deficient; otherwise the spread of the sources is used.
pub fn fit_tps_scaled(pairs: &[ControlPair], lambda: f64, scene_scale: Option<f64>) -> Result<TpsModel> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidInput(format!("regularization must be >= 0, got {lambda}")));
    }
    if pairs
        .iter()
        .any(|p| !(p.source.iter().all(|v| v.is_finite()) && p.target.iter().all(|v| v.is_finite())))
    {
        return Err(Error::InvalidInput("control pairs must be finite".into()));
    }
    let controls = deduplicate(pairs);
    let m = controls.len();
    if m < MIN_CONTROL_PAIRS {
        return Err(Error::InsufficientControls {
            needed: MIN_CONTROL_PAIRS,
            got: m,
        });
    }

    let centroid = controls.iter().map(|c| c.0).sum::<Vector3<f64>>() / m as f64;
    let spread = controls
        .iter()
        .map(|c| (c.0 - centroid).norm())
        .fold(0.0, f64::max);
    let local: Vec<Vector3<f64>> = controls.iter().map(|c| (c.0 - centroid) / spread).collect();

    // Affine directions supported by the sources.
    let scatter = local.iter().map(|q| q * q.transpose()).sum::<Matrix3<f64>>();
    let eig = scatter.symmetric_eigen();
    let sigma_max = eig.eigenvalues.max().max(0.0).sqrt();
    let degenerate: Vec<usize> = (0..3)
        .filter(|&k| eig.eigenvalues[k].max(0.0).sqrt() <= DEGENERATE_RATIO * sigma_max)
        .collect();
    let basis: Matrix3<f64> = if degenerate.is_empty() {
        Matrix3::identity()
    } else {
        let mut kept: Vec<usize> = (0..3).filter(|k| !degenerate.contains(k)).collect();
        kept.sort_by(|a, b| eig.eigenvalues[*b].total_cmp(&eig.eigenvalues[*a]));
        let mut b = Matrix3::zeros();
        for (row, &k) in kept.iter().enumerate() {
            b.set_row(row, &eig.eigenvectors.column(k).transpose());
        }
        b
    };
    let rank = 3 - degenerate.len();
    if rank == 0 {
        return Err(Error::RankDeficient("control sources coincide".into()));
    }

    let ridge = FALLBACK_RIDGE * scene_scale.filter(|s| *s > 0.0).unwrap_or(spread);
    let fallback_lambda = lambda.max(ridge);

    let mut attempt_lambda = lambda;
    if rank < 3 {
        warn!("control sources span only {rank} dimension(s); fitting with λ = {fallback_lambda:e}");
        attempt_lambda = fallback_lambda;
    }

    let solution = match solve_system(&controls, &local, &basis, rank, attempt_lambda) {
        Some(s) => s,
        None if attempt_lambda < fallback_lambda => {
            warn!("TPS system is singular; retrying with λ = {fallback_lambda:e}");
            attempt_lambda = fallback_lambda;
            solve_system(&controls, &local, &basis, rank, attempt_lambda)
                .ok_or_else(|| Error::RankDeficient(format!("TPS system singular even with λ = {fallback_lambda:e}")))?
        }
        None => {
            return Err(Error::RankDeficient(format!(
                "TPS system singular with λ = {attempt_lambda:e}"
            )))
        }
    };

    // Back to world coordinates: affine(X) = t0 + B·basis·(X − centroid)/spread.
    let weights: Vec<Vector3<f64>> = (0..m)
        .map(|i| Vector3::new(solution[(i, 0)], solution[(i, 1)], solution[(i, 2)]))
        .collect();
    let t0 = Vector3::new(solution[(m, 0)], solution[(m, 1)], solution[(m, 2)]);
    let mut b = Matrix3::zeros();
    for k in 0..rank {
        let row = m + 1 + k;
        b.set_column(k, &Vector3::new(solution[(row, 0)], solution[(row, 1)], solution[(row, 2)]));
    }
    let linear = b * basis / spread;
    let affine = Matrix3::identity() + linear;
    let translation = t0 - linear * centroid;

    Ok(TpsModel {
        translation,
        affine,
        centers: controls.iter().map(|c| c.0).collect(),
        weights,
        lambda: attempt_lambda,
    })
}

/// Householder reflector `I − β·v·vᵀ` taking column `k` of `p` (rows `k..`)
/// onto a multiple of the `k`-th unit vector. Applied to `p` in place.
fn householder_step(p: &mut DMatrix<f64>, k: usize) -> Option<(DVector<f64>, f64)> {
    let m = p.nrows();
    let x = p.view((k, k), (m - k, 1)).clone_owned();
    let norm = x.norm();
    if !(norm > 0.0) {
        return None;
    }
    let alpha = if x[0] >= 0.0 { -norm } else { norm };
    let mut v = DVector::<f64>::zeros(m);
    v.rows_mut(k, m - k).copy_from(&x.column(0));
    v[k] -= alpha;
    let vv = v.norm_squared();
    if !(vv > 0.0) {
        return None;
    }
    let beta = 2.0 / vv;
    let vt_p = v.transpose() * &*p;
    *p -= beta * &v * vt_p;
    Some((v, beta))
}

/// Solves the bordered system for displacements; `None` when it is singular.
///
/// The side conditions `PᵀW = 0` are eliminated with a QR factorization of
/// `P`: with `Q = [Q₁ Q₂]`, `W = Q₂z` where `−Q₂ᵀ(K − λI)Q₂` is positive
/// definite, so `z` comes from a Cholesky solve and the affine part from the
/// triangular factor of `P`.
fn solve_system(
    controls: &[(Vector3<f64>, Vector3<f64>)],
    local: &[Vector3<f64>],
    basis: &Matrix3<f64>,
    rank: usize,
    lambda: f64,
) -> Option<DMatrix<f64>> {
    let m = controls.len();
    let np = 1 + rank;
    if m < np {
        return None;
    }
    let mut k = DMatrix::<f64>::zeros(m, m);
    for j in 0..m {
        for i in 0..m {
            k[(i, j)] = kernel((controls[i].0 - controls[j].0).norm());
        }
        k[(j, j)] -= lambda;
    }
    let mut p = DMatrix::<f64>::zeros(m, np);
    for i in 0..m {
        let proj = basis * local[i];
        p[(i, 0)] = 1.0;
        for c in 0..rank {
            p[(i, 1 + c)] = proj[c];
        }
    }
    let mut y = DMatrix::<f64>::zeros(m, 3);
    for i in 0..m {
        let d = controls[i].1 - controls[i].0;
        for c in 0..3 {
            y[(i, c)] = d[c];
        }
    }

    // QᵀKQ and QᵀY, one reflector at a time.
    let mut qk = k.clone();
    let mut qy = y.clone();
    let mut reflectors = Vec::with_capacity(np);
    for c in 0..np {
        let (v, beta) = householder_step(&mut p, c)?;
        let kv = &qk * &v;
        let vkv = v.dot(&kv);
        let w = beta * (kv - (0.5 * beta * vkv) * &v);
        qk -= &v * w.transpose() + &w * v.transpose();
        let vt_y = v.transpose() * &qy;
        qy -= beta * &v * vt_y;
        reflectors.push((v, beta));
    }
    let r = p.view((0, 0), (np, np)).clone_owned();
    let r_diag = r.diagonal();
    let r_max = r_diag.amax();
    if !(r_max > 0.0) || r_diag.iter().any(|d| d.abs() <= 1e-12 * r_max) {
        return None;
    }

    let mut weights = DMatrix::<f64>::zeros(m, 3);
    if m > np {
        let size = m - np;
        let g = faer::Mat::<f64>::from_fn(size, size, |i, j| -qk[(np + i, np + j)]);
        let chol = g.llt(faer::Side::Lower).ok()?;
        let l = chol.L();
        let l_diag: Vec<f64> = (0..size).map(|i| l[(i, i)].abs()).collect();
        let l_max = l_diag.iter().copied().fold(0.0, f64::max);
        let l_min = l_diag.iter().copied().fold(f64::INFINITY, f64::min);
        if !(l_max > 0.0) || l_min <= 1e-7 * l_max {
            return None;
        }
        let rhs = faer::Mat::<f64>::from_fn(size, 3, |i, c| -qy[(np + i, c)]);
        let sol = chol.solve(&rhs);
        let z = DMatrix::<f64>::from_fn(size, 3, |i, c| sol[(i, c)]);
        weights.rows_mut(np, m - np).copy_from(&z);
    }
    // W = Q·[0; z], built by applying the reflectors in reverse.
    for (v, beta) in reflectors.iter().rev() {
        let vt_w = v.transpose() * &weights;
        weights -= *beta * v * vt_w;
    }
    // R·a = Q₁ᵀ(Y − (K − λI)·W).
    let mut resid = y - &k * &weights;
    for (v, beta) in &reflectors {
        let vt_r = v.transpose() * &resid;
        resid -= *beta * v * vt_r;
    }
    let a = r.solve_upper_triangular(&resid.rows(0, np).clone_owned())?;

    let mut sol = DMatrix::<f64>::zeros(m + np, 3);
    sol.rows_mut(0, m).copy_from(&weights);
    sol.rows_mut(m, np).copy_from(&a);
    sol.iter().all(|v| v.is_finite()).then_some(sol)
}

/// Applies the warp to an arbitrary point.
pub fn apply_tps(model: &TpsModel, x: &Vector3<f64>) -> Vector3<f64> {
    model.apply(x)
}

/// Warps every valid point of a pointmap; invalid entries are left untouched.
pub fn deform_pointmap(model: &TpsModel, pointmap: &Pointmap) -> Pointmap {
    let w = pointmap.width as usize;
    let points: Vec<Vector3<f64>> = pointmap
        .points
        .par_chunks(w.max(1))
        .zip(pointmap.valid.par_chunks(w.max(1)))
        .flat_map_iter(|(pts, valid)| {
            pts.iter()
                .zip(valid)
                .map(|(p, v)| if *v { model.apply(p) } else { *p })
                .collect::<Vec<_>>()
        })
        .collect();
    Pointmap {
        view: pointmap.view,
        width: pointmap.width,
        height: pointmap.height,
        points,
        valid: pointmap.valid.clone(),
    }
}

/// Control pairs for one view plus the number skipped on invalid depth.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewControlPairs {
    pub view: ViewId,
    pub pairs: Vec<ControlPair>,
    pub skipped: usize,
}

/// Pairs each control point observed in `view` with the estimated pointmap
/// sampled at its pixel in that view.
pub fn build_control_pairs(
    view: ViewId,
    tracks: &[Track],
    controls: &[ControlPoint],
    pointmap: &Pointmap,
) -> Result<ViewControlPairs> {
    if pointmap.view != view {
        return Err(Error::InvalidInput(format!(
            "pointmap belongs to view {}, not {view}",
            pointmap.view
        )));
    }
    let mut pairs = Vec::new();
    let mut skipped = 0;
    for cp in controls {
        let track = tracks.get(cp.track).ok_or_else(|| {
            Error::InvalidInput(format!("control point references missing track {}", cp.track))
        })?;
        let Some(pixel) = track.pixel_in(view) else {
            continue;
        };
        match pointmap.sample_bilinear(&pixel) {
            Some(source) => pairs.push(ControlPair {
                source,
                target: cp.position,
                pixel,
            }),
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        debug!("view {view}: skipped {skipped} control points on invalid depth");
    }
    if pairs.is_empty() {
        return Err(Error::InsufficientControls {
            needed: 1,
            got: 0,
        });
    }
    Ok(ViewControlPairs {
        view,
        pairs,
        skipped,
    })
}
