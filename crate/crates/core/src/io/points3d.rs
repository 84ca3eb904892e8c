use std::path::Path;

use nalgebra::Vector3;

use super::{content_lines, parse_field, read_text};
use crate::cloud::{PointCloud, PointSource};
use crate::error::Result;

/// Reads COLMAP `points3D.txt`: `POINT3D_ID X Y Z R G B ERROR TRACK[]`.
pub fn read_points3d(path: &Path) -> Result<PointCloud> {
    let text = read_text(path)?;
    let mut cloud = PointCloud::new();
    for (line, content) in content_lines(&text) {
        let mut tok = content.split_whitespace();
        let _id: u64 = parse_field(path, line, tok.next(), "point id")?;
        let mut p = Vector3::<f64>::zeros();
        for (axis, name) in ["X", "Y", "Z"].iter().enumerate() {
            p[axis] = parse_field(path, line, tok.next(), name)?;
        }
        let mut rgb = [0u8; 3];
        for (slot, name) in rgb.iter_mut().zip(["R", "G", "B"]) {
            *slot = parse_field(path, line, tok.next(), name)?;
        }
        if !p.iter().all(|v| v.is_finite()) {
            return Err(crate::error::Error::parse(path, line, "non-finite position"));
        }
        cloud.push(p, rgb, PointSource::Sfm);
    }
    Ok(cloud)
}

/// Sparse cloud from `.ply` or COLMAP `points3D.txt`, tagged as sfm.
pub fn read_sfm_cloud(path: &Path) -> Result<PointCloud> {
    let is_ply = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("ply"));
    if is_ply {
        Ok(super::read_ply(path)?.retag(PointSource::Sfm))
    } else {
        read_points3d(path)
    }
}
