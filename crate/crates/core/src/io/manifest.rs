use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_text, write_file};
use crate::error::{Error, Result};
use crate::geometry::ViewId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColmapPaths {
    pub cameras: PathBuf,
    pub images: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewEntry {
    pub id: ViewId,
    pub depth: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<PathBuf>,
}

/// A job description. Relative paths are resolved against the manifest's
/// directory when loaded; unset parameters take their defaults at run time.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobManifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cameras: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub colmap: Option<ColmapPaths>,
    pub views: Vec<ViewEntry>,
    pub matches: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sfm: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub work_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster_radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_points: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_reproj_px: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantization: Option<f64>,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn require(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("missing input file {}", path.display())))
    }
}

impl JobManifest {
    /// Parses a manifest, resolves its paths and checks that every input file
    /// exists.
    pub fn load(path: &Path) -> Result<JobManifest> {
        let text = read_text(path)?;
        let mut m: JobManifest =
            serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e.to_string()))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.resolve_paths(&base);
        m.validate()?;
        Ok(m)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        if let Some(c) = &mut self.cameras {
            resolve(base, c);
        }
        if let Some(c) = &mut self.colmap {
            resolve(base, &mut c.cameras);
            resolve(base, &mut c.images);
        }
        for v in &mut self.views {
            resolve(base, &mut v.depth);
            if let Some(i) = &mut v.image {
                resolve(base, i);
            }
        }
        resolve(base, &mut self.matches);
        for p in [&mut self.sfm, &mut self.output, &mut self.work_dir].into_iter().flatten() {
            resolve(base, p);
        }
        if self.output.is_none() {
            self.output = Some(base.join("init.ply"));
        }
        if self.work_dir.is_none() {
            self.work_dir = Some(base.join("work"));
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.cameras, &self.colmap) {
            (Some(c), None) => require(c)?,
            (None, Some(c)) => {
                require(&c.cameras)?;
                require(&c.images)?;
            }
            _ => {
                return Err(Error::InvalidInput(
                    "manifest needs exactly one of 'cameras' or 'colmap'".into(),
                ))
            }
        }
        if self.views.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "manifest lists {} views; at least 2 are needed",
                self.views.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for v in &self.views {
            if !seen.insert(v.id) {
                return Err(Error::InvalidInput(format!("view {} is listed twice", v.id)));
            }
            require(&v.depth)?;
            if let Some(i) = &v.image {
                require(i)?;
            }
        }
        require(&self.matches)?;
        if let Some(s) = &self.sfm {
            require(s)?;
        }
        Ok(())
    }

    pub fn output_path(&self) -> PathBuf {
        self.output.clone().unwrap_or_else(|| PathBuf::from("init.ply"))
    }

    pub fn work_path(&self) -> PathBuf {
        self.work_dir.clone().unwrap_or_else(|| PathBuf::from("work"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_file(path, json.as_bytes())
    }
}
