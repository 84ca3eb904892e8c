//! End-to-end initialization: tracks, triangulation, per-view warps,
//! sampling and export, runnable as a whole or one stage at a time.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use image::RgbImage;
use log::{info, warn};
use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::{PointCloud, PointSource};
use crate::error::{Error, Result};
use crate::geometry::{backproject_depthmap, scene_scale, Camera, DepthMap, ViewId};
use crate::io::{self, ControlsArtifact, JobManifest};
use crate::sampling::{assemble_cloud, sample_near_controls, CalibratedView, SamplingConfig, DEFAULT_COLOR};
use crate::synth::SyntheticScene;
use crate::tps::{build_control_pairs, deform_pointmap, fit_tps_scaled, TpsModel, MIN_CONTROL_PAIRS};
use crate::tracks::{
    build_tracks, default_key_view_count, filter_matches_by_key_views, multiview_score, select_key_views,
    PairwiseMatch, Track,
};
use crate::triangulate::{cameras_by_id, triangulate_all, ControlPoint, Triangulation, DEFAULT_MAX_REPROJ_PX};

pub const DEFAULT_SEED: u64 = 0;
pub const DEFAULT_QUANTIZATION: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub key_views: usize,
    pub quantization: f64,
    pub max_reproj_px: f64,
    pub lambda: f64,
    pub sampling: SamplingConfig,
    pub seed: u64,
}

impl PipelineConfig {
    pub fn for_views(n_views: usize) -> Self {
        PipelineConfig {
            key_views: default_key_view_count(n_views),
            quantization: DEFAULT_QUANTIZATION,
            max_reproj_px: DEFAULT_MAX_REPROJ_PX,
            lambda: 0.0,
            sampling: SamplingConfig::for_views(n_views),
            seed: DEFAULT_SEED,
        }
    }

    /// Defaults for `n_views` with every parameter the manifest sets applied.
    pub fn from_manifest(m: &JobManifest, n_views: usize) -> Result<Self> {
        let mut c = PipelineConfig::for_views(n_views);
        if let Some(v) = m.k {
            c.key_views = v;
        }
        if let Some(v) = m.quantization {
            c.quantization = v;
        }
        if let Some(v) = m.max_reproj_px {
            c.max_reproj_px = v;
        }
        if let Some(v) = m.lambda {
            c.lambda = v;
        }
        if let Some(v) = m.radius_fraction {
            c.sampling.radius_fraction = v;
        }
        if let Some(v) = m.margin {
            c.sampling.margin = v;
        }
        if let Some(v) = m.cluster_radius {
            c.sampling.cluster_radius = v;
        }
        if let Some(v) = m.max_points {
            c.sampling.max_points = v;
        }
        if let Some(v) = m.seed {
            c.seed = v;
        }
        c.validate(n_views)?;
        Ok(c)
    }

    pub fn validate(&self, n_views: usize) -> Result<()> {
        if self.key_views == 0 || self.key_views >= n_views {
            return Err(Error::InvalidInput(format!(
                "k = {} key views is not in 1..{n_views}",
                self.key_views
            )));
        }
        if !(self.quantization > 0.0 && self.quantization.is_finite()) {
            return Err(Error::InvalidInput("quantization must be positive".into()));
        }
        if !(self.max_reproj_px > 0.0) {
            return Err(Error::InvalidInput("max_reproj_px must be positive".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidInput("lambda must be >= 0".into()));
        }
        self.sampling.validate()
    }
}

/// Everything a run reads from disk, ordered by view id.
#[derive(Debug, Clone)]
pub struct JobInputs {
    pub cameras: Vec<Camera>,
    pub depths: Vec<DepthMap>,
    pub images: Vec<Option<RgbImage>>,
    pub matches: Vec<PairwiseMatch>,
    pub out_of_bounds: usize,
    pub sfm: Option<PointCloud>,
}

impl JobInputs {
    pub fn load(m: &JobManifest) -> Result<JobInputs> {
        let all = match (&m.cameras, &m.colmap) {
            (Some(p), _) => io::read_cameras_json(p)?,
            (None, Some(c)) => io::read_colmap_cameras(&c.cameras, &c.images)?,
            (None, None) => return Err(Error::InvalidInput("manifest names no cameras".into())),
        };
        let by_id = cameras_by_id(&all);
        let mut views = m.views.clone();
        views.sort_by_key(|v| v.id);
        let mut cameras = Vec::with_capacity(views.len());
        for v in &views {
            let cam = by_id
                .get(&v.id)
                .ok_or_else(|| Error::InvalidInput(format!("view {} has no camera", v.id)))?;
            cameras.push(cam.clone());
        }
        let loaded: Vec<(DepthMap, Option<RgbImage>)> = views
            .par_iter()
            .zip(&cameras)
            .map(|(v, cam)| {
                let depth = io::read_depth(&v.depth, v.id, cam.width, cam.height)?;
                let image = match &v.image {
                    Some(p) => Some(read_image(p, cam)?),
                    None => None,
                };
                Ok((depth, image))
            })
            .collect::<Result<_>>()?;
        let (depths, images) = loaded.into_iter().unzip();
        let file = io::read_matches(&m.matches, &cameras_by_id(&cameras))?;
        let sfm = m.sfm.as_deref().map(io::read_sfm_cloud).transpose()?;
        Ok(JobInputs {
            cameras,
            depths,
            images,
            matches: file.matches,
            out_of_bounds: file.out_of_bounds,
            sfm,
        })
    }

    pub fn from_scene(scene: &SyntheticScene) -> JobInputs {
        JobInputs {
            cameras: scene.cameras.clone(),
            depths: scene.depth.clone(),
            images: scene.images.iter().cloned().map(Some).collect(),
            matches: scene.matches.clone(),
            out_of_bounds: 0,
            sfm: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.cameras.len() < 2 {
            return Err(Error::InvalidInput("at least two views are needed".into()));
        }
        if self.depths.len() != self.cameras.len() || self.images.len() != self.cameras.len() {
            return Err(Error::InvalidInput("one depth map (and image slot) per camera is needed".into()));
        }
        for (c, d) in self.cameras.iter().zip(&self.depths) {
            if c.id != d.view {
                return Err(Error::InvalidInput(format!("depth map for view {} paired with camera {}", d.view, c.id)));
            }
        }
        Ok(())
    }
}

fn read_image(path: &Path, cam: &Camera) -> Result<RgbImage> {
    let img = image::open(path)
        .map_err(|e| match e {
            image::ImageError::IoError(err) => Error::io(path, err),
            other => Error::format(path, other.to_string()),
        })?
        .to_rgb8();
    if img.width() != cam.width || img.height() != cam.height {
        return Err(Error::format(
            path,
            format!(
                "image is {}x{} but camera {} is {}x{}",
                img.width(),
                img.height(),
                cam.id,
                cam.width,
                cam.height
            ),
        ));
    }
    Ok(img)
}

/// Pipeline stages as reported in the timing table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Correspondences,
    Triangulation,
    Tps,
    Cbps,
    Io,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Correspondences, Stage::Triangulation, Stage::Tps, Stage::Cbps, Stage::Io];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Correspondences => "correspondences",
            Stage::Triangulation => "triangulation",
            Stage::Tps => "tps",
            Stage::Cbps => "cbps",
            Stage::Io => "io",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: Stage,
    pub seconds: f64,
}

/// Wall time per stage; always holds all five stages in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings(Vec<StageTiming>);

impl Default for Timings {
    fn default() -> Self {
        Timings(
            Stage::ALL
                .iter()
                .map(|&stage| StageTiming { stage, seconds: 0.0 })
                .collect(),
        )
    }
}

impl Timings {
    pub fn add(&mut self, stage: Stage, seconds: f64) {
        let slot = self.0.iter_mut().find(|t| t.stage == stage).expect("every stage present");
        slot.seconds += seconds.max(0.0);
    }

    /// Runs `f`, charging its wall time to `stage`.
    pub fn time<T>(&mut self, stage: Stage, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.add(stage, start.elapsed().as_secs_f64());
        out
    }

    pub fn entries(&self) -> &[StageTiming] {
        &self.0
    }

    pub fn get(&self, stage: Stage) -> f64 {
        self.0.iter().find(|t| t.stage == stage).map_or(0.0, |t| t.seconds)
    }

    pub fn total(&self) -> f64 {
        self.0.iter().map(|t| t.seconds).sum()
    }
}

impl fmt::Display for Timings {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<16} {:>10}", "stage", "seconds")?;
        for t in &self.0 {
            writeln!(f, "{:<16} {:>10.3}", t.stage.name(), t.seconds)?;
        }
        write!(f, "{:<16} {:>10.3}", "total", self.total())
    }
}

/// Per-view outcome of the warp stage.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewFit {
    pub view: ViewId,
    pub pairs: usize,
    pub skipped_pairs: usize,
    /// `None` when the view was skipped for lack of control pairs.
    pub model: Option<TpsModel>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub matches: usize,
    pub out_of_bounds: usize,
    pub matches_used: usize,
    pub tracks: usize,
    pub multiview_score: f64,
    pub controls: usize,
    pub rejected_failed: usize,
    pub rejected_cheirality: usize,
    pub rejected_reprojection: usize,
    pub pairs_per_view: Vec<(ViewId, usize)>,
    pub skipped_views: Vec<ViewId>,
    pub sfm_points: usize,
    pub sampled: usize,
    pub merged: usize,
    pub final_points: usize,
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "matches: {} read, {} out of bounds, {} between key views",
            self.matches, self.out_of_bounds, self.matches_used
        )?;
        writeln!(f, "tracks built: {} (multi-view score {:.4})", self.tracks, self.multiview_score)?;
        writeln!(
            f,
            "controls: {} accepted, {} rejected ({} failed, {} cheirality, {} reprojection)",
            self.controls,
            self.rejected_failed + self.rejected_cheirality + self.rejected_reprojection,
            self.rejected_failed,
            self.rejected_cheirality,
            self.rejected_reprojection
        )?;
        let pairs: Vec<String> = self.pairs_per_view.iter().map(|(v, n)| format!("{v}:{n}")).collect();
        writeln!(f, "pairs per view: {}", pairs.join(" "))?;
        if !self.skipped_views.is_empty() {
            let skipped: Vec<String> = self.skipped_views.iter().map(|v| v.to_string()).collect();
            writeln!(f, "skipped views: {}", skipped.join(" "))?;
        }
        write!(
            f,
            "points: {} sfm, {} sampled, {} after merge, {} final",
            self.sfm_points, self.sampled, self.merged, self.final_points
        )
    }
}

/// Key-view filtering followed by track building.
pub fn compute_tracks(cameras: &[Camera], matches: &[PairwiseMatch], config: &PipelineConfig) -> Result<(Vec<Track>, usize)> {
    let neighborhoods = cameras
        .iter()
        .map(|c| select_key_views(cameras, c.id, config.key_views))
        .collect::<Result<Vec<_>>>()?;
    let used = filter_matches_by_key_views(matches, &neighborhoods);
    Ok((build_tracks(&used, config.quantization), used.len()))
}

/// Fits one warp per view; views without enough control pairs are skipped.
pub fn fit_view_warps(
    cameras: &[Camera],
    depths: &[DepthMap],
    tracks: &[Track],
    controls: &[ControlPoint],
    lambda: f64,
    scale: f64,
) -> Result<Vec<ViewFit>> {
    cameras
        .par_iter()
        .zip(depths)
        .map(|(cam, depth)| {
            let pointmap = backproject_depthmap(cam, depth)?;
            let (pairs, skipped) = match build_control_pairs(cam.id, tracks, controls, &pointmap) {
                Ok(p) => (p.pairs, p.skipped),
                Err(Error::InsufficientControls { .. }) => (Vec::new(), 0),
                Err(e) => return Err(e),
            };
            let model = if pairs.len() < MIN_CONTROL_PAIRS {
                None
            } else {
                match fit_tps_scaled(&pairs, lambda, Some(scale)) {
                    Ok(m) => Some(m),
                    Err(Error::InsufficientControls { .. }) => None,
                    Err(e) => return Err(e),
                }
            };
            if model.is_none() {
                warn!(
                    "view {}: {} control pairs (need {MIN_CONTROL_PAIRS}); skipping view",
                    cam.id,
                    pairs.len()
                );
            }
            Ok(ViewFit {
                view: cam.id,
                pairs: pairs.len(),
                skipped_pairs: skipped,
                model,
            })
        })
        .collect()
}

/// Triangulated control points as a sparse cloud, colored from the anchor
/// view's image.
pub fn controls_as_cloud(controls: &[ControlPoint], tracks: &[Track], cameras: &[Camera], images: &[Option<RgbImage>]) -> PointCloud {
    let mut cloud = PointCloud::with_capacity(controls.len());
    for c in controls {
        let (view, pixel) = tracks[c.track].anchor();
        let color = cameras
            .iter()
            .position(|cam| cam.id == view)
            .and_then(|idx| images[idx].as_ref())
            .map(|img| {
                let i = (pixel.x.round().max(0.0) as u32).min(img.width() - 1);
                let j = (pixel.y.round().max(0.0) as u32).min(img.height() - 1);
                img.get_pixel(i, j).0
            })
            .unwrap_or(DEFAULT_COLOR);
        cloud.push(c.position, color, PointSource::Sfm);
    }
    cloud
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingOutput {
    pub sampled: PointCloud,
    pub cloud: PointCloud,
    pub sfm_points: usize,
    pub merged: usize,
}

/// Warps every fitted view, samples near the controls and assembles the
/// final cloud.
#[allow(clippy::too_many_arguments)]
pub fn sample_and_assemble(
    inputs: &JobInputs,
    fits: &[ViewFit],
    tracks: &[Track],
    controls: &[ControlPoint],
    config: &PipelineConfig,
    scale: f64,
) -> Result<SamplingOutput> {
    let views: Vec<CalibratedView> = inputs
        .cameras
        .par_iter()
        .zip(&inputs.depths)
        .zip(&inputs.images)
        .filter_map(|((cam, depth), image)| {
            let fit = fits.iter().find(|f| f.view == cam.id)?;
            let model = fit.model.as_ref()?;
            Some(backproject_depthmap(cam, depth).map(|pm| CalibratedView {
                pointmap: deform_pointmap(model, &pm),
                image: image.clone(),
            }))
        })
        .collect::<Result<_>>()?;
    let positions: Vec<Vector3<f64>> = controls.iter().map(|c| c.position).collect();
    let radius = config.sampling.radius_fraction * scale;
    let sampled = sample_near_controls(&views, &positions, radius)?;
    let sfm = match &inputs.sfm {
        Some(s) => s.clone().retag(PointSource::Sfm),
        None => controls_as_cloud(controls, tracks, &inputs.cameras, &inputs.images),
    };
    let merged = crate::sampling::merge_with_sfm(&sfm, &sampled, config.sampling.margin).len();
    let cloud = assemble_cloud(&sfm, &sampled, &config.sampling, config.seed);
    Ok(SamplingOutput {
        sfm_points: sfm.len(),
        merged,
        sampled,
        cloud,
    })
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub tracks: Vec<Track>,
    pub triangulation: Triangulation,
    pub fits: Vec<ViewFit>,
    pub sampled: PointCloud,
    pub cloud: PointCloud,
    pub summary: Summary,
    pub timings: Timings,
}

fn stage_err(stage: Stage) -> impl Fn(Error) -> Error {
    move |e| {
        warn!("stage {stage} failed: {e}");
        e
    }
}

/// Runs every stage in memory.
pub fn run_pipeline(inputs: &JobInputs, config: &PipelineConfig) -> Result<PipelineOutput> {
    inputs.validate()?;
    config.validate(inputs.cameras.len())?;
    let mut timings = Timings::default();
    let scale = scene_scale(&inputs.cameras)?.radius;

    let (tracks, used) = timings
        .time(Stage::Correspondences, || compute_tracks(&inputs.cameras, &inputs.matches, config))
        .map_err(stage_err(Stage::Correspondences))?;
    let camera_map = cameras_by_id(&inputs.cameras);
    let triangulation = timings.time(Stage::Triangulation, || {
        triangulate_all(&tracks, &camera_map, config.max_reproj_px)
    });
    let fits = timings
        .time(Stage::Tps, || {
            fit_view_warps(
                &inputs.cameras,
                &inputs.depths,
                &tracks,
                &triangulation.controls,
                config.lambda,
                scale,
            )
        })
        .map_err(stage_err(Stage::Tps))?;
    let sampling = timings
        .time(Stage::Cbps, || {
            sample_and_assemble(inputs, &fits, &tracks, &triangulation.controls, config, scale)
        })
        .map_err(stage_err(Stage::Cbps))?;

    let summary = Summary {
        matches: inputs.matches.len() + inputs.out_of_bounds,
        out_of_bounds: inputs.out_of_bounds,
        matches_used: used,
        tracks: tracks.len(),
        multiview_score: multiview_score(&tracks),
        controls: triangulation.controls.len(),
        rejected_failed: triangulation.rejected.failed,
        rejected_cheirality: triangulation.rejected.cheirality,
        rejected_reprojection: triangulation.rejected.reprojection,
        pairs_per_view: fits.iter().map(|f| (f.view, f.pairs)).collect(),
        skipped_views: fits.iter().filter(|f| f.model.is_none()).map(|f| f.view).collect(),
        sfm_points: sampling.sfm_points,
        sampled: sampling.sampled.len(),
        merged: sampling.merged,
        final_points: sampling.cloud.len(),
    };
    info!("pipeline finished: {} points", summary.final_points);
    Ok(PipelineOutput {
        tracks,
        triangulation,
        fits,
        sampled: sampling.sampled,
        cloud: sampling.cloud,
        summary,
        timings,
    })
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub output: PathBuf,
    pub summary: Summary,
    pub timings: Timings,
}

/// Loads the job, runs all stages and writes the PLY.
pub fn run_init(manifest: &JobManifest) -> Result<RunReport> {
    let mut timings = Timings::default();
    let inputs = timings.time(Stage::Io, || JobInputs::load(manifest)).map_err(stage_err(Stage::Io))?;
    let config = PipelineConfig::from_manifest(manifest, inputs.cameras.len())?;
    let out = run_pipeline(&inputs, &config)?;
    let path = manifest.output_path();
    timings
        .time(Stage::Io, || io::write_ply(&out.cloud, &path))
        .map_err(stage_err(Stage::Io))?;
    for t in out.timings.entries() {
        timings.add(t.stage, t.seconds);
    }
    Ok(RunReport {
        output: path,
        summary: out.summary,
        timings,
    })
}

const TRACKS_FILE: &str = "tracks.json";
const CONTROLS_FILE: &str = "controls.json";
const TPS_DIR: &str = "tps";
const TPS_INDEX: &str = "index.json";
const SAMPLED_FILE: &str = "sampled.ply";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TpsIndexEntry {
    view: ViewId,
    pairs: usize,
    skipped_pairs: usize,
    model: Option<String>,
}

fn upstream(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact(path))
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Which artifact a single-stage run produced.
#[derive(Debug, Clone)]
pub struct StageReport {
    pub stage: Stage,
    pub artifact: PathBuf,
    pub count: usize,
    pub timings: Timings,
}

/// Runs one stage from its upstream artifacts in the work directory.
/// Chaining correspondences, triangulation, tps and cbps reproduces
/// `run_init` byte for byte.
pub fn run_stage(stage: Stage, manifest: &JobManifest) -> Result<StageReport> {
    let work = manifest.work_path();
    let mut timings = Timings::default();
    let (artifact, count) = match stage {
        Stage::Correspondences => {
            let inputs = timings.time(Stage::Io, || JobInputs::load(manifest))?;
            let config = PipelineConfig::from_manifest(manifest, inputs.cameras.len())?;
            let (tracks, _) =
                timings.time(Stage::Correspondences, || compute_tracks(&inputs.cameras, &inputs.matches, &config))?;
            ensure_dir(&work)?;
            let path = work.join(TRACKS_FILE);
            timings.time(Stage::Io, || io::write_tracks(&tracks, &path))?;
            (path, tracks.len())
        }
        Stage::Triangulation => {
            let tracks_path = upstream(work.join(TRACKS_FILE))?;
            let (cameras, tracks) = timings.time(Stage::Io, || -> Result<_> {
                let inputs = JobInputs::load(manifest)?;
                Ok((inputs.cameras, io::read_tracks(&tracks_path)?))
            })?;
            let config = PipelineConfig::from_manifest(manifest, cameras.len())?;
            let tri = timings.time(Stage::Triangulation, || {
                triangulate_all(&tracks, &cameras_by_id(&cameras), config.max_reproj_px)
            });
            let path = work.join(CONTROLS_FILE);
            let artifact = ControlsArtifact {
                controls: tri.controls,
                rejected: tri.rejected,
            };
            timings.time(Stage::Io, || io::write_controls(&artifact, &path))?;
            (path, artifact.controls.len())
        }
        Stage::Tps => {
            let tracks_path = upstream(work.join(TRACKS_FILE))?;
            let controls_path = upstream(work.join(CONTROLS_FILE))?;
            let (inputs, tracks, controls) = timings.time(Stage::Io, || -> Result<_> {
                Ok((
                    JobInputs::load(manifest)?,
                    io::read_tracks(&tracks_path)?,
                    io::read_controls(&controls_path)?,
                ))
            })?;
            let config = PipelineConfig::from_manifest(manifest, inputs.cameras.len())?;
            let scale = scene_scale(&inputs.cameras)?.radius;
            let fits = timings.time(Stage::Tps, || {
                fit_view_warps(&inputs.cameras, &inputs.depths, &tracks, &controls.controls, config.lambda, scale)
            })?;
            let dir = work.join(TPS_DIR);
            ensure_dir(&dir)?;
            let index = timings.time(Stage::Io, || -> Result<Vec<TpsIndexEntry>> {
                fits.iter()
                    .map(|f| {
                        let model = match &f.model {
                            Some(m) => {
                                let name = format!("view_{}.tps", f.view);
                                io::write_tps_model(m, &dir.join(&name))?;
                                Some(name)
                            }
                            None => None,
                        };
                        Ok(TpsIndexEntry {
                            view: f.view,
                            pairs: f.pairs,
                            skipped_pairs: f.skipped_pairs,
                            model,
                        })
                    })
                    .collect()
            })?;
            let path = dir.join(TPS_INDEX);
            let json = serde_json::to_string_pretty(&index).expect("index serializes");
            io::write_file(&path, json.as_bytes())?;
            (path, fits.iter().filter(|f| f.model.is_some()).count())
        }
        Stage::Cbps => {
            let tracks_path = upstream(work.join(TRACKS_FILE))?;
            let controls_path = upstream(work.join(CONTROLS_FILE))?;
            let index_path = upstream(work.join(TPS_DIR).join(TPS_INDEX))?;
            let (inputs, tracks, controls, fits) = timings.time(Stage::Io, || -> Result<_> {
                let text = io::read_text(&index_path)?;
                let index: Vec<TpsIndexEntry> = serde_json::from_str(&text)
                    .map_err(|e| Error::parse(&index_path, e.line(), e.to_string()))?;
                let fits = index
                    .into_iter()
                    .map(|e| {
                        let model = match &e.model {
                            Some(name) => Some(io::read_tps_model(&upstream(work.join(TPS_DIR).join(name))?)?),
                            None => None,
                        };
                        Ok(ViewFit {
                            view: e.view,
                            pairs: e.pairs,
                            skipped_pairs: e.skipped_pairs,
                            model,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((
                    JobInputs::load(manifest)?,
                    io::read_tracks(&tracks_path)?,
                    io::read_controls(&controls_path)?,
                    fits,
                ))
            })?;
            let config = PipelineConfig::from_manifest(manifest, inputs.cameras.len())?;
            let scale = scene_scale(&inputs.cameras)?.radius;
            let out = timings.time(Stage::Cbps, || {
                sample_and_assemble(&inputs, &fits, &tracks, &controls.controls, &config, scale)
            })?;
            let path = manifest.output_path();
            timings.time(Stage::Io, || -> Result<()> {
                io::write_ply(&out.sampled, &work.join(SAMPLED_FILE))?;
                io::write_ply(&out.cloud, &path)
            })?;
            (path, out.cloud.len())
        }
        Stage::Io => {
            return Err(Error::InvalidInput("io is not a standalone stage".into()));
        }
    };
    Ok(StageReport {
        stage,
        artifact,
        count,
        timings,
    })
}
