use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where a point of the initialization cloud came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PointSource {
    /// Sparse structure-from-motion or triangulated point.
    Sfm,
    /// Calibrated (warped) backprojected depth point.
    Cbp,
}

/// Colored point set flowing through sampling, merging and export.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<Vector3<f64>>,
    pub colors: Vec<[u8; 3]>,
    pub sources: Vec<PointSource>,
}

impl PointCloud {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a cloud whose points all carry the same source tag.
    pub fn from_parts(positions: Vec<Vector3<f64>>, colors: Vec<[u8; 3]>, source: PointSource) -> Result<Self> {
        if positions.len() != colors.len() {
            return Err(Error::InvalidInput(format!(
                "{} positions but {} colors",
                positions.len(),
                colors.len()
            )));
        }
        if positions.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidInput("point cloud positions must be finite".into()));
        }
        let sources = vec![source; positions.len()];
        Ok(PointCloud {
            positions,
            colors,
            sources,
        })
    }

    pub fn with_capacity(n: usize) -> Self {
        PointCloud {
            positions: Vec::with_capacity(n),
            colors: Vec::with_capacity(n),
            sources: Vec::with_capacity(n),
        }
    }

    pub fn push(&mut self, position: Vector3<f64>, color: [u8; 3], source: PointSource) {
        self.positions.push(position);
        self.colors.push(color);
        self.sources.push(source);
    }

    pub fn extend_from(&mut self, other: &PointCloud) {
        self.positions.extend_from_slice(&other.positions);
        self.colors.extend_from_slice(&other.colors);
        self.sources.extend_from_slice(&other.sources);
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn count(&self, source: PointSource) -> usize {
        self.sources.iter().filter(|s| **s == source).count()
    }

    /// Keeps the points whose indices are listed, in the given order.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        let mut out = PointCloud::with_capacity(indices.len());
        for &i in indices {
            out.push(self.positions[i], self.colors[i], self.sources[i]);
        }
        out
    }

    pub fn retag(mut self, source: PointSource) -> PointCloud {
        self.sources.iter_mut().for_each(|s| *s = source);
        self
    }
}
