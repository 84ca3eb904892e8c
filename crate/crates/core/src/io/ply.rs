use std::path::Path;

use nalgebra::Vector3;

use super::{read_bytes, write_file};
use crate::cloud::{PointCloud, PointSource};
use crate::error::{Error, Result};
use crate::sampling::DEFAULT_COLOR;

/// Binary little-endian PLY with float positions and uchar colors.
pub fn ply_bytes(cloud: &PointCloud) -> Vec<u8> {
    let header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        cloud.len()
    );
    let mut out = Vec::with_capacity(header.len() + cloud.len() * 15);
    out.extend_from_slice(header.as_bytes());
    for (p, c) in cloud.positions.iter().zip(&cloud.colors) {
        for v in p.iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out.extend_from_slice(c);
    }
    out
}

pub fn write_ply(cloud: &PointCloud, path: &Path) -> Result<()> {
    write_file(path, &ply_bytes(cloud))
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Scalar> {
        Some(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
        }
    }
}

#[derive(Debug, PartialEq)]
enum Encoding {
    Ascii,
    BinaryLe,
}

struct Header {
    encoding: Encoding,
    vertices: usize,
    properties: Vec<(String, Scalar)>,
    data_start: usize,
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<Header> {
    let end = bytes
        .windows(11)
        .position(|w| w == b"end_header\n")
        .ok_or_else(|| Error::format(path, "PLY header has no end_header"))?;
    let text = std::str::from_utf8(&bytes[..end]).map_err(|_| Error::format(path, "PLY header is not ASCII"))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(Error::format(path, "missing 'ply' magic"));
    }
    let mut encoding = None;
    let mut vertices = None;
    let mut properties = Vec::new();
    let mut in_vertex = false;
    for line in lines {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["format", "ascii", "1.0"] => encoding = Some(Encoding::Ascii),
            ["format", "binary_little_endian", "1.0"] => encoding = Some(Encoding::BinaryLe),
            ["format", other, ..] => {
                return Err(Error::format(path, format!("unsupported PLY format '{other}'")));
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => {
                if vertices.is_some() {
                    // Elements after the vertices are ignored.
                    in_vertex = false;
                    continue;
                }
                let count: usize = count
                    .parse()
                    .map_err(|_| Error::format(path, format!("bad element count '{count}'")))?;
                if *name == "vertex" {
                    vertices = Some(count);
                    in_vertex = true;
                } else if count > 0 {
                    return Err(Error::format(path, format!("element '{name}' precedes the vertices")));
                }
            }
            ["property", "list", ..] if in_vertex => {
                return Err(Error::format(path, "list properties on vertices are not supported"));
            }
            ["property", ty, name] if in_vertex => {
                let scalar =
                    Scalar::parse(ty).ok_or_else(|| Error::format(path, format!("unknown property type '{ty}'")))?;
                properties.push((name.to_string(), scalar));
            }
            ["property", ..] => {}
            _ => return Err(Error::format(path, format!("unexpected header line '{line}'"))),
        }
    }
    Ok(Header {
        encoding: encoding.ok_or_else(|| Error::format(path, "PLY header has no format line"))?,
        vertices: vertices.ok_or_else(|| Error::format(path, "PLY has no vertex element"))?,
        properties,
        data_start: end + 11,
    })
}

fn color_channel(v: f64, scalar: Scalar) -> u8 {
    match scalar {
        Scalar::F32 | Scalar::F64 => (v.clamp(0.0, 1.0) * 255.0).round() as u8,
        _ => v.clamp(0.0, 255.0) as u8,
    }
}

/// Reads a PLY vertex element (binary little-endian or ASCII). Positions
/// come from `x, y, z`; colors from `red, green, blue` when present.
pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let bytes = read_bytes(path)?;
    let header = parse_header(path, &bytes)?;
    let find = |name: &str| header.properties.iter().position(|(n, _)| n == name);
    let xyz = [find("x"), find("y"), find("z")];
    let [Some(ix), Some(iy), Some(iz)] = xyz else {
        return Err(Error::format(path, "vertices lack x, y, z"));
    };
    let rgb = [find("red"), find("green"), find("blue")];
    let n_props = header.properties.len();
    let mut row = vec![0.0f64; n_props];
    let mut cloud = PointCloud::with_capacity(header.vertices.min(1 << 24));
    let data = &bytes[header.data_start..];

    let mut push = |row: &[f64]| -> Result<()> {
        let p = Vector3::new(row[ix], row[iy], row[iz]);
        if !p.iter().all(|v| v.is_finite()) {
            return Err(Error::format(path, "non-finite vertex position"));
        }
        let color = match rgb {
            [Some(r), Some(g), Some(b)] => [
                color_channel(row[r], header.properties[r].1),
                color_channel(row[g], header.properties[g].1),
                color_channel(row[b], header.properties[b].1),
            ],
            _ => DEFAULT_COLOR,
        };
        cloud.push(p, color, PointSource::Cbp);
        Ok(())
    };

    match header.encoding {
        Encoding::BinaryLe => {
            let stride: usize = header.properties.iter().map(|(_, s)| s.size()).sum();
            let needed = stride
                .checked_mul(header.vertices)
                .ok_or_else(|| Error::format(path, "vertex count overflows"))?;
            if data.len() < needed {
                return Err(Error::format(
                    path,
                    format!("{} vertices need {needed} bytes, found {}", header.vertices, data.len()),
                ));
            }
            for chunk in data[..needed].chunks_exact(stride.max(1)).take(header.vertices) {
                let mut off = 0;
                for (slot, (_, s)) in row.iter_mut().zip(&header.properties) {
                    *slot = s.read_le(&chunk[off..off + s.size()]);
                    off += s.size();
                }
                push(&row)?;
            }
        }
        Encoding::Ascii => {
            let text = std::str::from_utf8(data).map_err(|_| Error::format(path, "ASCII PLY body is not text"))?;
            let mut lines = text.lines().filter(|l| !l.trim().is_empty());
            for k in 0..header.vertices {
                let line = lines
                    .next()
                    .ok_or_else(|| Error::format(path, format!("expected {} vertices, found {k}", header.vertices)))?;
                let mut tok = line.split_whitespace();
                for slot in row.iter_mut() {
                    *slot = tok
                        .next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| Error::format(path, format!("bad vertex line {}", k + 1)))?;
                }
                push(&row)?;
            }
        }
    }
    Ok(cloud)
}
