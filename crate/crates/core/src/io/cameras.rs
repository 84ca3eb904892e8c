use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use super::{content_lines, parse_field, read_text, write_file};
use crate::error::{Error, Result};
use crate::geometry::{Camera, ViewId};

struct Intrinsics {
    width: u32,
    height: u32,
    k: Matrix3<f64>,
}

fn parse_colmap_intrinsics(path: &Path) -> Result<BTreeMap<u32, Intrinsics>> {
    let text = read_text(path)?;
    let mut out = BTreeMap::new();
    for (line, content) in content_lines(&text) {
        let mut tok = content.split_whitespace();
        let id: u32 = parse_field(path, line, tok.next(), "camera id")?;
        let model = tok
            .next()
            .ok_or_else(|| Error::parse(path, line, "missing camera model"))?;
        let width: u32 = parse_field(path, line, tok.next(), "width")?;
        let height: u32 = parse_field(path, line, tok.next(), "height")?;
        let params: Vec<f64> = tok
            .map(|t| {
                t.parse()
                    .map_err(|_| Error::parse(path, line, format!("invalid camera parameter '{t}'")))
            })
            .collect::<Result<_>>()?;
        let (fx, fy, cx, cy) = match model {
            "SIMPLE_PINHOLE" => {
                if params.len() != 3 {
                    return Err(Error::parse(path, line, format!("SIMPLE_PINHOLE needs 3 parameters, got {}", params.len())));
                }
                (params[0], params[0], params[1], params[2])
            }
            "PINHOLE" => {
                if params.len() != 4 {
                    return Err(Error::parse(path, line, format!("PINHOLE needs 4 parameters, got {}", params.len())));
                }
                (params[0], params[1], params[2], params[3])
            }
            other => {
                return Err(Error::UnsupportedCameraModel {
                    model: other.to_string(),
                    line,
                })
            }
        };
        // COLMAP puts the first pixel's center at 0.5; ours is at 0.
        let k = Matrix3::new(fx, 0.0, cx - 0.5, 0.0, fy, cy - 0.5, 0.0, 0.0, 1.0);
        if out.insert(id, Intrinsics { width, height, k }).is_some() {
            return Err(Error::parse(path, line, format!("duplicate camera id {id}")));
        }
    }
    Ok(out)
}

/// Reads a COLMAP text model (`cameras.txt` + `images.txt`); the image id
/// becomes the view id.
pub fn read_colmap_cameras(cameras_path: &Path, images_path: &Path) -> Result<Vec<Camera>> {
    let intrinsics = parse_colmap_intrinsics(cameras_path)?;
    let text = read_text(images_path)?;
    let path = images_path;
    let mut cameras: Vec<Camera> = Vec::new();
    // Each image has a header line followed by a (possibly empty) line of 2D
    // points, so blank lines are significant here.
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    while let Some((line, content)) = lines.next() {
        if content.is_empty() || content.starts_with('#') {
            continue;
        }
        let mut tok = content.split_whitespace();
        let id: ViewId = parse_field(path, line, tok.next(), "image id")?;
        let mut q = [0.0; 4];
        for (slot, name) in q.iter_mut().zip(["QW", "QX", "QY", "QZ"]) {
            *slot = parse_field(path, line, tok.next(), name)?;
        }
        let mut t = Vector3::zeros();
        for (axis, name) in ["TX", "TY", "TZ"].iter().enumerate() {
            t[axis] = parse_field(path, line, tok.next(), name)?;
        }
        let camera_id: u32 = parse_field(path, line, tok.next(), "camera id")?;
        if tok.next().is_none() {
            return Err(Error::parse(path, line, "missing image name"));
        }
        let quat = Quaternion::new(q[0], q[1], q[2], q[3]);
        if !(quat.norm() > 1e-12) {
            return Err(Error::parse(path, line, "zero quaternion"));
        }
        let r = *UnitQuaternion::from_quaternion(quat).to_rotation_matrix().matrix();
        let intr = intrinsics
            .get(&camera_id)
            .ok_or_else(|| Error::parse(path, line, format!("unknown camera id {camera_id}")))?;
        let camera = Camera::new(id, intr.k, r, t, intr.width, intr.height)
            .map_err(|e| Error::parse(path, line, e.to_string()))?;
        if cameras.iter().any(|c| c.id == id) {
            return Err(Error::parse(path, line, format!("duplicate image id {id}")));
        }
        cameras.push(camera);
        // Skip the 2D point line.
        lines.next();
    }
    if cameras.is_empty() {
        return Err(Error::format(path, "no images"));
    }
    cameras.sort_by_key(|c| c.id);
    Ok(cameras)
}

/// Writes a COLMAP text model with one PINHOLE camera per image.
pub fn write_colmap_cameras(cameras: &[Camera], cameras_path: &Path, images_path: &Path) -> Result<()> {
    let mut cams = String::from("# Camera list with one line of data per camera:\n#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n");
    let mut images = String::from("# Image list with two lines of data per image:\n#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n#   POINTS2D[] as (X, Y, POINT3D_ID)\n");
    for (idx, c) in cameras.iter().enumerate() {
        let cam_id = idx + 1;
        let k = &c.k;
        writeln!(
            cams,
            "{cam_id} PINHOLE {} {} {:?} {:?} {:?} {:?}",
            c.width,
            c.height,
            k[(0, 0)],
            k[(1, 1)],
            k[(0, 2)] + 0.5,
            k[(1, 2)] + 0.5
        )
        .expect("string write");
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(c.r));
        writeln!(
            images,
            "{} {:?} {:?} {:?} {:?} {:?} {:?} {:?} {cam_id} view_{}.png\n",
            c.id, q.w, q.i, q.j, q.k, c.t.x, c.t.y, c.t.z, c.id
        )
        .expect("string write");
    }
    write_file(cameras_path, cams.as_bytes())?;
    write_file(images_path, images.as_bytes())
}

#[derive(Serialize, Deserialize)]
struct CameraRecord {
    id: ViewId,
    width: u32,
    height: u32,
    /// Row-major intrinsics.
    k: [[f64; 3]; 3],
    /// Row-major world-to-camera rotation.
    r: [[f64; 3]; 3],
    t: [f64; 3],
}

fn rows(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    [0, 1, 2].map(|i| [m[(i, 0)], m[(i, 1)], m[(i, 2)]])
}

fn from_rows(r: &[[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| r[i][j])
}

/// Native camera file: a JSON array of `{id, width, height, k, r, t}` with
/// row-major matrices and `x_cam = r x + t`.
pub fn read_cameras_json(path: &Path) -> Result<Vec<Camera>> {
    let text = read_text(path)?;
    let records: Vec<CameraRecord> = serde_json::from_str(&text)
        .map_err(|e| Error::parse(path, e.line(), e.to_string()))?;
    let mut cameras = Vec::with_capacity(records.len());
    for rec in records {
        let cam = Camera::new(rec.id, from_rows(&rec.k), from_rows(&rec.r), Vector3::from(rec.t), rec.width, rec.height)
            .map_err(|e| Error::format(path, format!("camera {}: {e}", rec.id)))?;
        if cameras.iter().any(|c: &Camera| c.id == cam.id) {
            return Err(Error::format(path, format!("duplicate camera id {}", cam.id)));
        }
        cameras.push(cam);
    }
    if cameras.is_empty() {
        return Err(Error::format(path, "no cameras"));
    }
    cameras.sort_by_key(|c| c.id);
    Ok(cameras)
}

pub fn write_cameras_json(cameras: &[Camera], path: &Path) -> Result<()> {
    let records: Vec<CameraRecord> = cameras
        .iter()
        .map(|c| CameraRecord {
            id: c.id,
            width: c.width,
            height: c.height,
            k: rows(&c.k),
            r: rows(&c.r),
            t: [c.t.x, c.t.y, c.t.z],
        })
        .collect();
    let json = serde_json::to_string_pretty(&records).expect("camera records serialize");
    write_file(path, json.as_bytes())
}
