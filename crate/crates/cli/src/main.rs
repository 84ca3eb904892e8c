use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use warpinit::io::{self, JobManifest};
use warpinit::pipeline::{compute_tracks, run_init, run_stage, JobInputs, PipelineConfig, Stage};
use warpinit::synth::{evaluate_recovery, generate_scene, read_truth, write_scene, DepthFormat, SceneSpec, SurfaceKind};
use warpinit::tracks::multiview_score;
use warpinit::Result;

#[derive(Parser)]
#[command(name = "warpinit", version, about = "Dense point-cloud initialization from calibrated depth maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the whole pipeline and write the initialization PLY.
    Init(JobArgs),
    /// Build tracks from pairwise matches.
    Tracks(JobArgs),
    /// Triangulate tracks into control points.
    Triangulate(JobArgs),
    /// Fit one warp per view.
    Tps(JobArgs),
    /// Sample near controls and assemble the final cloud.
    Cbps(JobArgs),
    /// Generate a synthetic scene with ground truth.
    Synth(SynthArgs),
    /// Report the multi-view score of a track set, and recovery error when
    /// ground truth is given.
    Score(ScoreArgs),
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    work_dir: Option<PathBuf>,
    #[arg(long)]
    sfm: Option<PathBuf>,
    #[arg(long)]
    radius_fraction: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    cluster_radius: Option<f64>,
    #[arg(long)]
    max_points: Option<usize>,
    #[arg(long)]
    max_reproj_px: Option<f64>,
    #[arg(short, long)]
    k: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    quantization: Option<f64>,
}

#[derive(Args)]
struct JobArgs {
    /// Job manifest (JSON).
    manifest: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "plane")]
    surface: SurfaceKind,
    #[arg(long, default_value_t = 3)]
    views: usize,
    #[arg(long, default_value_t = 160)]
    width: u32,
    #[arg(long, default_value_t = 120)]
    height: u32,
    #[arg(long, default_value_t = 0.1)]
    corruption: f64,
    #[arg(long, default_value_t = 0.01)]
    match_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// pfm, f32 or f64.
    #[arg(long, default_value = "f64")]
    depth_format: DepthFormat,
}

#[derive(Args)]
struct ScoreArgs {
    /// Job manifest; tracks are rebuilt from its matches.
    #[arg(long, required_unless_present_any = ["tracks", "cloud"])]
    manifest: Option<PathBuf>,
    /// Track file written by the tracks stage.
    #[arg(long, conflicts_with = "manifest")]
    tracks: Option<PathBuf>,
    /// Point cloud to compare against `truth`.
    #[arg(long, requires = "truth")]
    cloud: Option<PathBuf>,
    #[arg(long, requires = "cloud")]
    truth: Option<PathBuf>,
}

fn load_manifest(path: &Path, o: Overrides) -> Result<JobManifest> {
    let mut m = JobManifest::load(path)?;
    if let Some(v) = o.output {
        m.output = Some(v);
    }
    if let Some(v) = o.work_dir {
        m.work_dir = Some(v);
    }
    if o.sfm.is_some() {
        m.sfm = o.sfm;
    }
    m.radius_fraction = o.radius_fraction.or(m.radius_fraction);
    m.margin = o.margin.or(m.margin);
    m.cluster_radius = o.cluster_radius.or(m.cluster_radius);
    m.max_points = o.max_points.or(m.max_points);
    m.max_reproj_px = o.max_reproj_px.or(m.max_reproj_px);
    m.k = o.k.or(m.k);
    m.lambda = o.lambda.or(m.lambda);
    m.seed = o.seed.or(m.seed);
    m.quantization = o.quantization.or(m.quantization);
    m.validate()?;
    Ok(m)
}

fn stage_command(stage: Stage, args: JobArgs) -> Result<()> {
    let manifest = load_manifest(&args.manifest, args.overrides)?;
    let report = run_stage(stage, &manifest)?;
    println!("{}", report.timings);
    println!("{stage}: {} items -> {}", report.count, report.artifact.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Init(args) => {
            let manifest = load_manifest(&args.manifest, args.overrides)?;
            let report = run_init(&manifest)?;
            println!("{}", report.timings);
            println!("{}", report.summary);
            println!("wrote {}", report.output.display());
            Ok(())
        }
        Command::Tracks(args) => stage_command(Stage::Correspondences, args),
        Command::Triangulate(args) => stage_command(Stage::Triangulation, args),
        Command::Tps(args) => stage_command(Stage::Tps, args),
        Command::Cbps(args) => stage_command(Stage::Cbps, args),
        Command::Synth(a) => {
            let spec = SceneSpec::new(a.surface, a.views, a.width, a.height, a.corruption, a.seed)
                .with_match_fraction(a.match_fraction);
            let scene = generate_scene(&spec)?;
            let manifest = write_scene(&scene, &a.out, a.depth_format)?;
            println!(
                "{} views, {} matches, scene scale {:.6}",
                scene.cameras.len(),
                scene.matches.len(),
                scene.scene_scale()
            );
            println!("wrote {}", manifest.display());
            Ok(())
        }
        Command::Score(a) => {
            let tracks = match (&a.manifest, &a.tracks) {
                (Some(m), _) => {
                    let manifest = JobManifest::load(m)?;
                    let inputs = JobInputs::load(&manifest)?;
                    let config = PipelineConfig::from_manifest(&manifest, inputs.cameras.len())?;
                    Some(compute_tracks(&inputs.cameras, &inputs.matches, &config)?.0)
                }
                (None, Some(t)) => Some(io::read_tracks(t)?),
                (None, None) => None,
            };
            if let Some(tracks) = tracks {
                println!("tracks: {}", tracks.len());
                println!("multiview score: {:.6}", multiview_score(&tracks));
            }
            if let (Some(cloud), Some(truth)) = (&a.cloud, &a.truth) {
                let truth = read_truth(truth)?;
                let cloud = io::read_ply(cloud)?;
                let r = evaluate_recovery(&truth.surface, &cloud)?;
                info!("scene scale {}", truth.scene_scale);
                println!("points: {}", r.points);
                println!("rms: {:e} ({:e} of scene scale)", r.rms, r.rms / truth.scene_scale);
                println!("max: {:e}", r.max);
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
