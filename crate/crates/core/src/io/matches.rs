use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use nalgebra::Vector2;

use super::{content_lines, parse_field, read_text, write_file};
use crate::error::{Error, Result};
use crate::geometry::ViewId;
use crate::tracks::PairwiseMatch;
use crate::triangulate::CameraMap;

#[derive(Debug, Clone, PartialEq)]
pub struct MatchFile {
    pub matches: Vec<PairwiseMatch>,
    /// Lines dropped because a pixel fell outside its image.
    pub out_of_bounds: usize,
}

/// Reads `view_a view_b xa ya xb yb [confidence]` lines; `#` starts a
/// comment line. Views must exist in `cameras`.
pub fn read_matches(path: &Path, cameras: &CameraMap) -> Result<MatchFile> {
    let text = read_text(path)?;
    let mut matches = Vec::new();
    let mut out_of_bounds = 0;
    for (line, content) in content_lines(&text) {
        let mut tok = content.split_whitespace();
        let view_a: ViewId = parse_field(path, line, tok.next(), "view_a")?;
        let view_b: ViewId = parse_field(path, line, tok.next(), "view_b")?;
        let mut coords = [0.0f64; 4];
        for (slot, name) in coords.iter_mut().zip(["xa", "ya", "xb", "yb"]) {
            *slot = parse_field(path, line, tok.next(), name)?;
        }
        let confidence: f64 = match tok.next() {
            Some(t) => parse_field(path, line, Some(t), "confidence")?,
            None => 1.0,
        };
        if tok.next().is_some() {
            return Err(Error::parse(path, line, "too many fields"));
        }
        if coords.iter().any(|v| !v.is_finite()) || !(confidence.is_finite() && confidence >= 0.0) {
            return Err(Error::parse(path, line, "non-finite coordinate or negative confidence"));
        }
        if view_a == view_b {
            return Err(Error::parse(path, line, format!("match within a single view {view_a}")));
        }
        let lookup = |v: ViewId| {
            cameras
                .get(&v)
                .ok_or_else(|| Error::parse(path, line, format!("unknown view {v}")))
        };
        let (cam_a, cam_b) = (lookup(view_a)?, lookup(view_b)?);
        let pa = Vector2::new(coords[0], coords[1]);
        let pb = Vector2::new(coords[2], coords[3]);
        if !cam_a.contains_pixel(&pa) || !cam_b.contains_pixel(&pb) {
            out_of_bounds += 1;
            continue;
        }
        matches.push(PairwiseMatch::new(view_a, pa, view_b, pb).with_confidence(confidence));
    }
    if out_of_bounds > 0 {
        warn!("{}: rejected {out_of_bounds} out-of-bounds matches", path.display());
    }
    Ok(MatchFile {
        matches,
        out_of_bounds,
    })
}

pub fn write_matches(matches: &[PairwiseMatch], path: &Path) -> Result<()> {
    let mut out = String::from("# view_a view_b xa ya xb yb confidence\n");
    for m in matches {
        writeln!(
            out,
            "{} {} {:?} {:?} {:?} {:?} {:?}",
            m.view_a, m.view_b, m.pixel_a.x, m.pixel_a.y, m.pixel_b.x, m.pixel_b.y, m.confidence
        )
        .expect("string write");
    }
    write_file(path, out.as_bytes())
}
