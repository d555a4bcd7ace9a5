//! `capvision`: detect, localize and orient mushroom caps in RGB-D frames.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use capvision_core::evaluation::{depth_accuracy, match_detections, GroundTruthCircle, DEPTH_WINDOW};
use capvision_core::io::{
    load_depth_png, load_intrinsics, load_json, load_ply, load_rgb_png, save_depth_png, save_json, save_ply, save_rgb_png,
    IntrinsicsFile,
};
use capvision_core::linalg::Point3;
use capvision_core::localization::CameraIntrinsics;
use capvision_core::pipeline::{draw_overlay, run_pipeline, PipelineConfig, PipelineOutput, OVERLAY_COLOR};
use capvision_core::registration::{estimate_pose, InitialAlignment, PoseParams, RigidTransform};
use capvision_core::synthetic::{render_scene, sample_cap_cloud, SceneSpec};

#[derive(Parser)]
#[command(name = "capvision", version, about = "Mushroom cap detection, localization and pose from RGB-D frames")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline on one RGB-D frame.
    Detect {
        #[arg(long)]
        rgb: PathBuf,
        #[arg(long)]
        depth: PathBuf,
        #[arg(long)]
        intrinsics: PathBuf,
        /// Pipeline configuration JSON; omitted fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Cap model PLY; overrides `model_path` in the config.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the RGB frame with detections drawn on it.
        #[arg(long)]
        overlay: Option<PathBuf>,
        /// Exit with status 2 when no cap is reported.
        #[arg(long)]
        require_detections: bool,
    },
    /// Register a cap model onto a sample cloud.
    Pose {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Registration parameters JSON.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Model up axis as x,y,z.
        #[arg(long, value_parser = parse_vec3, default_value = "0,0,1")]
        up: Point3<f64>,
    },
    /// Render a synthetic scene with ground truth.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Score a detection report against ground-truth circles.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Depth statistics over the central window against a known distance.
    DepthAccuracy {
        #[arg(long)]
        depth: PathBuf,
        /// Ground-truth distance in meters.
        #[arg(long)]
        gt_depth: f64,
        /// Meters per depth unit.
        #[arg(long, default_value_t = 0.001, conflicts_with = "intrinsics")]
        depth_scale: f64,
        /// Take the depth unit from an intrinsics file instead.
        #[arg(long)]
        intrinsics: Option<PathBuf>,
        #[arg(long, default_value_t = DEPTH_WINDOW)]
        window: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_vec3(s: &str) -> Result<Point3<f64>, String> {
    let v: Vec<f64> = s.split(',').map(|t| t.trim().parse::<f64>().map_err(|e| e.to_string())).collect::<Result<_, _>>()?;
    match v.as_slice() {
        [x, y, z] => Ok(Point3::new(*x, *y, *z)),
        _ => Err(format!("expected x,y,z, got '{s}'")),
    }
}

/// Successful runs that still ask for a non-zero exit.
enum Outcome {
    Done,
    Empty,
}

fn emit<V: Serialize>(value: &V, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => save_json(p, value)?,
        None => println!("{}", serde_json::to_string_pretty(value)?),
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn detect(
    rgb: &Path,
    depth: &Path,
    intrinsics: &Path,
    config: Option<&Path>,
    model: Option<&Path>,
    out: &Path,
    overlay: Option<&Path>,
    require: bool,
) -> Result<Outcome> {
    let cfg: PipelineConfig<f64> = match config {
        Some(p) => load_json(p)?,
        None => PipelineConfig::default(),
    };
    let model_path = match (model, &cfg.model_path) {
        (Some(m), _) => m.to_path_buf(),
        (None, Some(m)) if m.is_relative() => config.and_then(Path::parent).unwrap_or(Path::new(".")).join(m),
        (None, Some(m)) => m.clone(),
        (None, None) => bail!("no cap model: pass --model or set model_path in the config"),
    };
    let k: IntrinsicsFile<f64> = load_intrinsics(intrinsics)?;
    let image = load_rgb_png(rgb)?;
    let frame = load_depth_png(depth, k.depth_scale)?;
    let cloud = load_ply(&model_path)?;
    let result = run_pipeline(&image, &frame, &k.camera, &cloud, &cfg).context("pipeline failed")?;
    save_json(out, &result)?;
    if let Some(p) = overlay {
        save_rgb_png(p, &draw_overlay(&image, &result.detections(), OVERLAY_COLOR))?;
    }
    eprintln!("{} reported, {} rejected", result.reports.len(), result.rejects.len());
    Ok(if require && result.reports.is_empty() { Outcome::Empty } else { Outcome::Done })
}

#[derive(Serialize)]
struct PoseOutput {
    quaternion_xyzw: [f64; 4],
    cap_normal: [f64; 3],
    transform: RigidTransform<f64>,
    fitness: f64,
    inlier_rmse: f64,
    iterations: usize,
    initial: InitialAlignment,
}

fn pose(model: &Path, sample: &Path, out: &Path, params: Option<&Path>, up: &Point3<f64>) -> Result<Outcome> {
    let params: PoseParams<f64> = match params {
        Some(p) => load_json(p)?,
        None => PoseParams::default(),
    };
    let m = load_ply(model)?;
    let s = load_ply(sample)?;
    let est = estimate_pose(&m, &s, up, &params)?;
    let n = est.cap_normal;
    let doc = PoseOutput {
        quaternion_xyzw: est.quaternion.to_xyzw(),
        cap_normal: [n.x, n.y, n.z],
        transform: est.result.transform,
        fitness: est.result.fitness,
        inlier_rmse: est.result.inlier_rmse,
        iterations: est.result.iterations,
        initial: est.initial,
    };
    save_json(out, &doc)?;
    Ok(Outcome::Done)
}

#[derive(serde::Deserialize)]
struct SynthFile {
    #[serde(flatten)]
    scene: SceneSpec<f64>,
    #[serde(default)]
    intrinsics: CameraIntrinsics<f64>,
    /// Points in the emitted cap model cloud.
    #[serde(default = "default_model_points")]
    model_points: usize,
}

fn default_model_points() -> usize {
    3000
}

#[derive(Serialize)]
struct TruthRecord {
    id: usize,
    position_m: [f64; 3],
    distance_m: f64,
    diameter_m: f64,
    cap_normal: [f64; 3],
}

fn synth(spec: &Path, out_dir: &Path) -> Result<Outcome> {
    let file: SynthFile = load_json(spec)?;
    let scene = render_scene(&file.scene, &file.intrinsics)?;
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    save_rgb_png(&out_dir.join("rgb.png"), &scene.rgb)?;
    save_depth_png(&out_dir.join("depth.png"), &scene.depth)?;
    save_json(&out_dir.join("intrinsics.json"), &IntrinsicsFile { camera: file.intrinsics, depth_scale: file.scene.depth_scale })?;
    save_json(&out_dir.join("gt.json"), &scene.gt_circles)?;
    let truth: Vec<TruthRecord> = scene
        .gt_locations
        .iter()
        .zip(&scene.gt_normals)
        .enumerate()
        .map(|(id, (l, n))| TruthRecord {
            id,
            position_m: [l.position.x, l.position.y, l.position.z],
            distance_m: l.distance_m,
            diameter_m: l.diameter_m,
            cap_normal: [n.x, n.y, n.z],
        })
        .collect();
    save_json(&out_dir.join("truth.json"), &truth)?;
    let caps = &file.scene.caps;
    let radius = if caps.is_empty() { 0.02 } else { caps.iter().map(|c| c.radius).sum::<f64>() / caps.len() as f64 };
    let model = sample_cap_cloud(radius, file.model_points.max(10), &RigidTransform::identity(), 0.0, file.scene.seed);
    save_ply(&out_dir.join("model.ply"), &model)?;
    let cfg = PipelineConfig::<f64> { model_path: Some("model.ply".into()), seed: file.scene.seed, ..PipelineConfig::default() };
    save_json(&out_dir.join("config.json"), &cfg)?;
    Ok(Outcome::Done)
}

#[derive(serde::Deserialize)]
struct PredFile {
    #[serde(flatten)]
    output: PipelineOutput<f64>,
}

fn eval(pred: &Path, gt: &Path, iou: f64, out: Option<&Path>) -> Result<Outcome> {
    if !(0.0..=1.0).contains(&iou) {
        bail!("--iou must lie in [0, 1]");
    }
    let p: PredFile = load_json(pred)?;
    let g: Vec<GroundTruthCircle<f64>> = load_json(gt)?;
    let metrics = match_detections(&p.output.detections(), &g, iou);
    emit(&metrics, out)?;
    Ok(Outcome::Done)
}

fn depth_acc(depth: &Path, gt: f64, scale: f64, intrinsics: Option<&Path>, window: usize, out: Option<&Path>) -> Result<Outcome> {
    let scale = match intrinsics {
        Some(p) => load_intrinsics::<f64>(p)?.depth_scale,
        None => scale,
    };
    if !(gt > 0.0) || !gt.is_finite() {
        bail!("--gt-depth must be a positive distance in meters");
    }
    let frame = load_depth_png(depth, scale)?;
    let stats = depth_accuracy(&frame, gt, window)?;
    emit(&stats, out)?;
    Ok(Outcome::Done)
}

fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Detect { rgb, depth, intrinsics, config, model, out, overlay, require_detections } => detect(
            &rgb,
            &depth,
            &intrinsics,
            config.as_deref(),
            model.as_deref(),
            &out,
            overlay.as_deref(),
            require_detections,
        ),
        Command::Pose { model, sample, out, params, up } => pose(&model, &sample, &out, params.as_deref(), &up),
        Command::Synth { spec, out_dir } => synth(&spec, &out_dir),
        Command::Eval { pred, gt, iou, out } => eval(&pred, &gt, iou, out.as_deref()),
        Command::DepthAccuracy { depth, gt_depth, depth_scale, intrinsics, window, out } => {
            depth_acc(&depth, gt_depth, depth_scale, intrinsics.as_deref(), window, out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Empty) => {
            eprintln!("no caps reported");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
