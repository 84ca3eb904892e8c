//! Intermediate stage outputs. JSON floats are written with round-trip
//! precision so chained stages see bit-identical values.

use std::path::Path;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use super::{read_bytes, read_text, write_file};
use crate::error::{Error, Result};
use crate::geometry::ViewId;
use crate::tps::TpsModel;
use crate::tracks::Track;
use crate::triangulate::{ControlPoint, RejectionCounts};

#[derive(Serialize, Deserialize)]
struct TracksRecord {
    tracks: Vec<Vec<(ViewId, f64, f64)>>,
}

pub fn write_tracks(tracks: &[Track], path: &Path) -> Result<()> {
    let record = TracksRecord {
        tracks: tracks
            .iter()
            .map(|t| t.observations().iter().map(|(v, p)| (*v, p.x, p.y)).collect())
            .collect(),
    };
    let json = serde_json::to_string(&record).expect("tracks serialize");
    write_file(path, json.as_bytes())
}

pub fn read_tracks(path: &Path) -> Result<Vec<Track>> {
    let text = read_text(path)?;
    let record: TracksRecord =
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e.to_string()))?;
    record
        .tracks
        .into_iter()
        .enumerate()
        .map(|(i, obs)| {
            Track::from_pairs(obs.into_iter().map(|(v, x, y)| (v, Vector2::new(x, y))))
                .map_err(|e| Error::format(path, format!("track {i}: {e}")))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlsArtifact {
    pub controls: Vec<ControlPoint>,
    pub rejected: RejectionCounts,
}

pub fn write_controls(artifact: &ControlsArtifact, path: &Path) -> Result<()> {
    let json = serde_json::to_string(artifact).expect("controls serialize");
    write_file(path, json.as_bytes())
}

pub fn read_controls(path: &Path) -> Result<ControlsArtifact> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e.to_string()))
}

pub fn write_tps_model(model: &TpsModel, path: &Path) -> Result<()> {
    write_file(path, &model.to_bytes())
}

pub fn read_tps_model(path: &Path) -> Result<TpsModel> {
    let bytes = read_bytes(path)?;
    TpsModel::from_bytes(&bytes).map_err(|m| Error::format(path, m))
}
