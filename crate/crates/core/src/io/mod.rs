//! On-disk formats: cameras, depth maps, matches, point clouds, models and
//! the job manifest.

mod artifacts;
mod cameras;
mod depth;
mod manifest;
mod matches;
mod ply;
mod points3d;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

pub use artifacts::{
    read_controls, read_tps_model, read_tracks, write_controls, write_tps_model, write_tracks, ControlsArtifact,
};
pub use cameras::{read_cameras_json, read_colmap_cameras, write_cameras_json, write_colmap_cameras};
pub use depth::{read_depth, read_depth_pfm, read_depth_raw, write_depth_pfm, write_depth_raw, RawPrecision};
pub use manifest::{ColmapPaths, JobManifest, ViewEntry};
pub use matches::{read_matches, write_matches, MatchFile};
pub use ply::{ply_bytes, read_ply, write_ply};
pub use points3d::{read_points3d, read_sfm_cloud};

use crate::error::{Error, Result};

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    let bytes = read_bytes(path)?;
    String::from_utf8(bytes).map_err(|_| Error::format(path, "file is not valid UTF-8"))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Non-empty, non-comment lines with their 1-based line numbers.
pub(crate) fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

pub(crate) fn parse_field<T: std::str::FromStr>(path: &Path, line: usize, token: Option<&str>, what: &str) -> Result<T> {
    let token = token.ok_or_else(|| Error::parse(path, line, format!("missing {what}")))?;
    token
        .parse()
        .map_err(|_| Error::parse(path, line, format!("invalid {what} '{token}'")))
}
