use std::path::Path;

use super::{read_bytes, write_file};
use crate::error::{Error, Result};
use crate::geometry::{DepthMap, ViewId};

/// Reads a single-channel PFM ("Pf") depth map. The sign of the scale field
/// selects the byte order; rows are stored bottom to top.
pub fn read_depth_pfm(path: &Path, view: ViewId) -> Result<DepthMap> {
    let bytes = read_bytes(path)?;
    let mut pos = 0;
    let mut token = |what: &str| -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos || pos - start > 64 {
            return Err(Error::format(path, format!("bad PFM header: missing {what}")));
        }
        let tok = String::from_utf8_lossy(&bytes[start..pos]).into_owned();
        Ok(tok)
    };
    let magic = token("magic")?;
    match magic.as_str() {
        "Pf" => {}
        "PF" => return Err(Error::format(path, "color PFM (PF) is not a depth map")),
        other => return Err(Error::format(path, format!("bad PFM magic '{other}'"))),
    }
    let width: u32 = token("width")?
        .parse()
        .map_err(|_| Error::format(path, "bad PFM width"))?;
    let height: u32 = token("height")?
        .parse()
        .map_err(|_| Error::format(path, "bad PFM height"))?;
    let scale: f64 = token("scale")?
        .parse()
        .map_err(|_| Error::format(path, "bad PFM scale"))?;
    if width == 0 || height == 0 {
        return Err(Error::format(path, format!("bad PFM dimensions {width}x{height}")));
    }
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::format(path, "PFM scale must be non-zero"));
    }
    // Exactly one whitespace byte separates the header from the data.
    pos += 1;
    let n = width as usize * height as usize;
    let data = bytes.get(pos..).unwrap_or(&[]);
    if data.len() != n * 4 {
        return Err(Error::format(
            path,
            format!("PFM {width}x{height} needs {} data bytes, found {}", n * 4, data.len()),
        ));
    }
    let little = scale < 0.0;
    let mut values = vec![0.0; n];
    let w = width as usize;
    for (k, chunk) in data.chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let file_row = k / w;
        let row = height as usize - 1 - file_row;
        values[row * w + k % w] = v as f64;
    }
    DepthMap::new(view, width, height, values)
}

/// Writes a little-endian PFM (scale -1).
pub fn write_depth_pfm(depth: &DepthMap, path: &Path) -> Result<()> {
    let header = format!("Pf\n{} {}\n-1.0\n", depth.width, depth.height);
    let mut out = Vec::with_capacity(header.len() + depth.values.len() * 4);
    out.extend_from_slice(header.as_bytes());
    let w = depth.width as usize;
    for row in (0..depth.height as usize).rev() {
        for v in &depth.values[row * w..(row + 1) * w] {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    write_file(path, &out)
}

/// Element type of a headerless depth file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RawPrecision {
    F32,
    F64,
}

impl RawPrecision {
    fn size(self) -> usize {
        match self {
            RawPrecision::F32 => 4,
            RawPrecision::F64 => 8,
        }
    }
}

/// Reads a headerless little-endian row-major depth grid.
pub fn read_depth_raw(path: &Path, view: ViewId, width: u32, height: u32, precision: RawPrecision) -> Result<DepthMap> {
    let bytes = read_bytes(path)?;
    let n = width as usize * height as usize;
    let size = precision.size();
    if bytes.len() != n * size {
        return Err(Error::format(
            path,
            format!("raw depth {width}x{height} needs {} bytes, found {}", n * size, bytes.len()),
        ));
    }
    let values = bytes
        .chunks_exact(size)
        .map(|c| match precision {
            RawPrecision::F32 => f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64,
            RawPrecision::F64 => f64::from_le_bytes(c.try_into().expect("8 bytes")),
        })
        .collect();
    DepthMap::new(view, width, height, values)
}

pub fn write_depth_raw(depth: &DepthMap, path: &Path, precision: RawPrecision) -> Result<()> {
    let mut out = Vec::with_capacity(depth.values.len() * precision.size());
    for v in &depth.values {
        match precision {
            RawPrecision::F32 => out.extend_from_slice(&(*v as f32).to_le_bytes()),
            RawPrecision::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    write_file(path, &out)
}

/// Picks the reader from the extension: `.pfm`, `.f64` (raw double) or
/// anything else as raw single precision.
pub fn read_depth(path: &Path, view: ViewId, width: u32, height: u32) -> Result<DepthMap> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase());
    let depth = match ext.as_deref() {
        Some("pfm") => read_depth_pfm(path, view)?,
        Some("f64") => read_depth_raw(path, view, width, height, RawPrecision::F64)?,
        _ => read_depth_raw(path, view, width, height, RawPrecision::F32)?,
    };
    if depth.width != width || depth.height != height {
        return Err(Error::format(
            path,
            format!(
                "depth map is {}x{} but camera {view} is {width}x{height}",
                depth.width, depth.height
            ),
        ));
    }
    Ok(depth)
}
