//! Selection of calibrated backprojected points near reliable control points
//! and assembly of the final initialization cloud.

use image::RgbImage;
use log::warn;
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::{PointCloud, PointSource};
use crate::error::{Error, Result};
use crate::geometry::Pointmap;
use crate::spatial::GridIndex;

pub const DEFAULT_MARGIN: f64 = 0.05;
pub const DEFAULT_CLUSTER_RADIUS: f64 = 0.01;
pub const DEFAULT_MAX_POINTS: usize = 30_000;

/// Color used for points whose view has no image.
pub const DEFAULT_COLOR: [u8; 3] = [128, 128, 128];

/// Sampling radius as a fraction of the scene scale: 1/8 for sparse (< 6
/// view) inputs, 1/16 otherwise.
pub fn default_radius_fraction(n_views: usize) -> f64 {
    if n_views >= 6 {
        1.0 / 16.0
    } else {
        1.0 / 8.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub radius_fraction: f64,
    pub margin: f64,
    pub cluster_radius: f64,
    pub max_points: usize,
}

impl SamplingConfig {
    pub fn for_views(n_views: usize) -> Self {
        SamplingConfig {
            radius_fraction: default_radius_fraction(n_views),
            margin: DEFAULT_MARGIN,
            cluster_radius: DEFAULT_CLUSTER_RADIUS,
            max_points: DEFAULT_MAX_POINTS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !(positive(self.radius_fraction) && positive(self.margin) && positive(self.cluster_radius)) {
            return Err(Error::InvalidInput(format!(
                "sampling radius fraction, margin and cluster radius must be positive: {self:?}"
            )));
        }
        if self.max_points == 0 {
            return Err(Error::InvalidInput("max_points must be at least 1".into()));
        }
        Ok(())
    }
}

/// A warped pointmap together with the image its pixels came from.
#[derive(Debug, Clone)]
pub struct CalibratedView {
    pub pointmap: Pointmap,
    pub image: Option<RgbImage>,
}

impl CalibratedView {
    fn color(&self, idx: usize) -> [u8; 3] {
        match &self.image {
            Some(img) => {
                let w = self.pointmap.width as usize;
                img.get_pixel((idx % w) as u32, (idx / w) as u32).0
            }
            None => DEFAULT_COLOR,
        }
    }
}

/// Every valid calibrated point within `radius` (inclusive) of some control
/// point, in view order then row-major pixel order.
pub fn sample_near_controls(views: &[CalibratedView], controls: &[Vector3<f64>], radius: f64) -> Result<PointCloud> {
    if !(radius >= 0.0 && radius.is_finite()) {
        return Err(Error::InvalidInput(format!("sampling radius must be >= 0, got {radius}")));
    }
    for v in views {
        if let Some(img) = &v.image {
            if img.width() != v.pointmap.width || img.height() != v.pointmap.height {
                return Err(Error::InvalidInput(format!(
                    "image for view {} is {}x{}, pointmap is {}x{}",
                    v.pointmap.view,
                    img.width(),
                    img.height(),
                    v.pointmap.width,
                    v.pointmap.height
                )));
            }
        }
    }
    if controls.is_empty() {
        warn!("no control points; nothing to sample");
        return Ok(PointCloud::new());
    }
    let index = GridIndex::build(controls, GridIndex::cell_for_radius(radius));
    let mut out = PointCloud::new();
    for view in views {
        let pm = &view.pointmap;
        let keep: Vec<usize> = (0..pm.points.len())
            .into_par_iter()
            .filter(|&i| pm.valid[i] && index.any_within(&pm.points[i], radius))
            .collect();
        for i in keep {
            out.push(pm.points[i], view.color(i), PointSource::Cbp);
        }
    }
    Ok(out)
}

/// The sparse cloud followed by the sampled points lying farther than
/// `margin` from every sparse point.
pub fn merge_with_sfm(sfm: &PointCloud, sampled: &PointCloud, margin: f64) -> PointCloud {
    let index = GridIndex::build(&sfm.positions, GridIndex::cell_for_radius(margin));
    let keep: Vec<usize> = (0..sampled.len())
        .into_par_iter()
        .filter(|&i| !index.any_within(&sampled.positions[i], margin))
        .collect();
    let mut out = sfm.clone();
    out.extend_from(&sampled.select(&keep));
    out
}

/// Greedy thinning in input order: a point survives if no earlier survivor
/// lies within `radius`.
pub fn radius_cluster(cloud: &PointCloud, radius: f64) -> PointCloud {
    let mut kept = GridIndex::new(GridIndex::cell_for_radius(radius));
    let mut keep = Vec::new();
    for (i, p) in cloud.positions.iter().enumerate() {
        if !kept.any_within(p, radius) {
            kept.insert(*p);
            keep.push(i);
        }
    }
    cloud.select(&keep)
}

/// Randomly keeps `max_points` of the calibrated points (sparse points are
/// never removed); order is preserved and the draw depends only on `seed`.
pub fn downsample(cloud: &PointCloud, max_points: usize, seed: u64) -> PointCloud {
    let cbp: Vec<usize> = (0..cloud.len())
        .filter(|&i| cloud.sources[i] == PointSource::Cbp)
        .collect();
    if cbp.len() <= max_points {
        return cloud.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = rand::seq::index::sample(&mut rng, cbp.len(), max_points).into_vec();
    chosen.sort_unstable();
    let mut keep_cbp = vec![false; cloud.len()];
    for c in chosen {
        keep_cbp[cbp[c]] = true;
    }
    let keep: Vec<usize> = (0..cloud.len())
        .filter(|&i| cloud.sources[i] == PointSource::Sfm || keep_cbp[i])
        .collect();
    cloud.select(&keep)
}

/// Merge, cluster and downsample in that order.
pub fn assemble_cloud(sfm: &PointCloud, sampled: &PointCloud, config: &SamplingConfig, seed: u64) -> PointCloud {
    let merged = merge_with_sfm(sfm, sampled, config.margin);
    let clustered = radius_cluster(&merged, config.cluster_radius);
    downsample(&clustered, config.max_points, seed)
}
