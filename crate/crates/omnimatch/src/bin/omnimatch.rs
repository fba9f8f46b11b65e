//! Command-line front end: synthetic scene generation, dense matching,
//! relative pose evaluation, triangulation, and the embedded invariant
//! suites.
//!
//! Exit codes: 0 success, 1 usage, 2 data or I/O error, 3 numerical
//! failure. Every JSON report embeds the resolved config, so results
//! are self-describing; timing fields are the only content that varies
//! between identical runs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use rayon::prelude::*;

use omnimatch::config::{ConfigError, RunConfig};
use omnimatch::frame::{certainty_mask, warp_frame, ErpImage, MatchField};
use omnimatch::io::{self, Frame, IoError, PairEntry, PlyPoint};
use omnimatch::pipeline::{self, PipelineError};
use omnimatch::pose::{
    auc_at, pose_error, triangulate_indexed, PoseError, RelativePose, DEFAULT_AUC_THRESHOLDS,
};
use omnimatch::report::{
    self, MatchReport, PairPoseRecord, PoseReport, TriangulationReport, SCHEMA_VERSION,
};
use omnimatch::selftest;
use omnimatch::synth::{make_pair, SceneSpec, SynthError};
use omnimatch::viz;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

/// Texture seed for the built-in scenes when no `--seed` is given.
const DEFAULT_SCENE_SEED: u64 = 7;

#[derive(Parser)]
#[command(
    name = "omnimatch",
    version,
    about = "Dense matching and two-view pose estimation for equirectangular image pairs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run config; fields left unset keep the built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config (sampling, RANSAC, generation).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for data-parallel stages; defaults to all cores.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic frame pairs with ground-truth depth and poses.
    Gen {
        /// Output directory, created if missing.
        #[arg(long)]
        out: PathBuf,
        /// Scene spec JSON; omitted means the built-in textured room.
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Use the texture-free room instead (matching is expected to
        /// degrade; useful for exercising failure accounting).
        #[arg(long)]
        flat: bool,
        /// Half-extent of the built-in room, meters.
        #[arg(long, default_value_t = 2.0)]
        room_half: f64,
        /// Camera translation between the two frames, meters.
        #[arg(long, default_value_t = 0.3)]
        baseline: f64,
        /// Camera rotation between the two frames, degrees.
        #[arg(long, default_value_t = 10.0)]
        rotation_deg: f64,
        /// Number of pairs to render.
        #[arg(long, default_value_t = 1)]
        pairs: usize,
    },
    /// Densely match two frames; write field, overlays, and a report.
    Match {
        /// Directory holding the input frames.
        #[arg(long)]
        dir: PathBuf,
        /// Frame name (loads <dir>/<name>.png and optional sidecars).
        #[arg(long)]
        frame_a: String,
        /// Frame name (loads <dir>/<name>.png and optional sidecars).
        #[arg(long)]
        frame_b: String,
        /// Output directory, created if missing.
        #[arg(long)]
        out: PathBuf,
        /// Also report angular error against warped ground truth;
        /// requires depth maps and poses for both frames.
        #[arg(long)]
        gt_eval: bool,
    },
    /// Estimate relative poses over a pair list; report error and AUC.
    Pose {
        /// Directory holding the frames and pair list.
        #[arg(long)]
        dir: PathBuf,
        /// Pair list CSV; defaults to <dir>/pairs.csv.
        #[arg(long)]
        pairs: Option<PathBuf>,
        /// Output directory for the report, created if missing.
        #[arg(long)]
        out: PathBuf,
    },
    /// Match one pair, estimate pose, and write a triangulated cloud.
    Triangulate {
        /// Directory holding the input frames.
        #[arg(long)]
        dir: PathBuf,
        /// Frame name (loads <dir>/<name>.png and optional sidecars).
        #[arg(long)]
        frame_a: String,
        /// Frame name (loads <dir>/<name>.png and optional sidecars).
        #[arg(long)]
        frame_b: String,
        /// Output PLY path; the JSON report lands next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the embedded invariant suites and print a pass/fail table.
    Selftest,
}

/// A fatal command failure carrying its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_DATA,
            message: message.into(),
        }
    }

    fn numerical(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_NUMERICAL,
            message: message.into(),
        }
    }
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        Failure::data(e.to_string())
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::data(e.to_string())
    }
}

impl From<SynthError> for Failure {
    fn from(e: SynthError) -> Self {
        Failure::data(e.to_string())
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        if e.is_numerical() {
            Failure::numerical(e.to_string())
        } else {
            Failure::data(e.to_string())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap's default exit code for usage errors is 2, which this
            // contract reserves for data errors; remap to 1. Help and
            // version displays stay successful.
            let ok = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_USAGE)
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(workers) = cli.workers {
        if workers == 0 {
            return Err(Failure::usage("--workers must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .map_err(|e| Failure::data(format!("worker pool: {e}")))?;
    }
    let cfg = load_config(cli.config.as_deref(), cli.seed)?;
    match cli.command {
        Command::Gen {
            out,
            scene,
            flat,
            room_half,
            baseline,
            rotation_deg,
            pairs,
        } => cmd_gen(
            &cfg,
            cli.seed,
            &out,
            scene.as_deref(),
            flat,
            room_half,
            baseline,
            rotation_deg,
            pairs,
        ),
        Command::Match {
            dir,
            frame_a,
            frame_b,
            out,
            gt_eval,
        } => cmd_match(&cfg, &dir, &frame_a, &frame_b, &out, gt_eval),
        Command::Pose { dir, pairs, out } => cmd_pose(&cfg, &dir, pairs.as_deref(), &out),
        Command::Triangulate {
            dir,
            frame_a,
            frame_b,
            out,
        } => cmd_triangulate(&cfg, &dir, &frame_a, &frame_b, &out),
        Command::Selftest => cmd_selftest(),
    }
}

/// Layered config: built-in defaults, then the file, then flag overrides.
fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig, Failure> {
    let mut cfg = match path {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.sampling.seed = seed;
        cfg.ransac.seed = seed;
    }
    Ok(cfg)
}

fn create_dir(path: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(path)
        .map_err(|e| Failure::data(format!("{}: cannot create directory: {e}", path.display())))
}

fn write_report<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    report::write_json(path, value)
        .map_err(|e| Failure::data(format!("{}: cannot write report: {e}", path.display())))
}

#[allow(clippy::too_many_arguments)]
fn cmd_gen(
    cfg: &RunConfig,
    seed: Option<u64>,
    out: &Path,
    scene_path: Option<&Path>,
    flat: bool,
    room_half: f64,
    baseline: f64,
    rotation_deg: f64,
    n_pairs: usize,
) -> Result<(), Failure> {
    if n_pairs == 0 {
        return Err(Failure::usage("--pairs must be at least 1"));
    }
    let scene_seed = seed.unwrap_or(DEFAULT_SCENE_SEED);
    let scene = match scene_path {
        Some(p) => load_scene(p)?,
        None if flat => SceneSpec::flat_room(room_half, scene_seed),
        None => SceneSpec::textured_room(room_half, scene_seed),
    };
    let grid = cfg.grid.spec()?;
    create_dir(out)?;

    // Pose seeds derive from the scene seed so a file-provided scene
    // regenerates identically without any flags.
    let pose_seed_base = seed.unwrap_or(scene.seed);
    let mut entries = Vec::with_capacity(n_pairs);
    for i in 0..n_pairs {
        let pair = make_pair(
            &scene,
            baseline,
            rotation_deg.to_radians(),
            &grid,
            pose_seed_base.wrapping_add(i as u64),
        )?;
        let name_a = format!("pair{i:04}_a");
        let name_b = format!("pair{i:04}_b");
        io::save_frame(
            out,
            &Frame {
                name: name_a.clone(),
                image: pair.image_a,
                depth: Some(pair.depth_a),
                pose: Some(pair.pose_a),
            },
        )?;
        io::save_frame(
            out,
            &Frame {
                name: name_b.clone(),
                image: pair.image_b,
                depth: Some(pair.depth_b),
                pose: Some(pair.pose_b),
            },
        )?;
        println!("{name_a} <-> {name_b}: overlap {:.3}", pair.overlap);
        entries.push(PairEntry {
            frame_a: name_a,
            frame_b: name_b,
            overlap: pair.overlap,
        });
    }
    io::save_pairs(&out.join("pairs.csv"), &entries)?;

    // The resolved scene makes the directory self-describing and feeds
    // back into --scene for exact regeneration.
    let scene_json = serde_json::to_string_pretty(&scene)
        .expect("scene spec serializes") + "\n";
    std::fs::write(out.join("scene.json"), scene_json)
        .map_err(|e| Failure::data(format!("{}: {e}", out.join("scene.json").display())))?;
    println!(
        "wrote {} pair(s) at {}x{} to {}",
        n_pairs,
        grid.width(),
        grid.height(),
        out.display()
    );
    Ok(())
}

fn load_scene(path: &Path) -> Result<SceneSpec, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
    let scene: SceneSpec = serde_json::from_str(&text)
        .map_err(|e| Failure::data(format!("{}: invalid scene: {e}", path.display())))?;
    Ok(scene)
}

fn cmd_match(
    cfg: &RunConfig,
    dir: &Path,
    name_a: &str,
    name_b: &str,
    out: &Path,
    gt_eval: bool,
) -> Result<(), Failure> {
    let a = io::load_frame(dir, name_a)?;
    let b = io::load_frame(dir, name_b)?;
    let outcome = pipeline::match_images(&a.image, &b.image, cfg)?;
    create_dir(out)?;

    let mut outputs = Vec::new();
    io::save_matchfield(out, "match", &outcome.refined)?;
    outputs.extend(
        ["match.theta.pfm", "match.phi.pfm", "match.certainty.pfm"]
            .iter()
            .map(|s| s.to_string()),
    );

    io::save_image(
        &out.join("certainty.png"),
        &viz::certainty_image(&outcome.refined),
    )?;
    outputs.push("certainty.png".to_string());

    io::save_image(
        &out.join("warp_certainty.png"),
        &viz::warp_times_certainty(&outcome.refined, &b.image),
    )?;
    outputs.push("warp_certainty.png".to_string());

    io::save_grid_png(
        &out.join("overlay.png"),
        &viz::match_overlay(&a.image, &b.image, &outcome.refined, viz::MAX_OVERLAY_LINES),
    )?;
    outputs.push("overlay.png".to_string());

    let (mean_err, coarse_err) = if gt_eval {
        let gt = ground_truth_field(&a, &b, cfg)?;
        let refined_err = pipeline::mean_angular_error(&outcome.refined, &gt);
        let coarse_full =
            pipeline::upsample_field_to(&outcome.coarse, a.image.spec().height())?;
        let coarse = pipeline::mean_angular_error(&coarse_full, &gt);
        (
            refined_err.map(f64::to_degrees),
            coarse.map(f64::to_degrees),
        )
    } else {
        (None, None)
    };

    let threshold = cfg.sampling.certainty_threshold;
    let confident = outcome
        .refined
        .certainty()
        .iter()
        .filter(|&&c| f64::from(c) >= threshold)
        .count() as f64
        / outcome.refined.certainty().len() as f64;

    let report = MatchReport {
        schema_version: SCHEMA_VERSION,
        command: "match".to_string(),
        config: cfg.clone(),
        frame_a: name_a.to_string(),
        frame_b: name_b.to_string(),
        confident_fraction: confident,
        mean_angular_error_deg: mean_err,
        coarse_angular_error_deg: coarse_err,
        outputs,
        timings: outcome.timings,
    };
    write_report(&out.join("match_report.json"), &report)?;

    println!(
        "{name_a} -> {name_b}: {:.1}% of cells confident at threshold {threshold}",
        100.0 * confident
    );
    if let Some(e) = mean_err {
        println!(
            "mean angular error {e:.4} deg (coarse {:.4} deg)",
            coarse_err.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

/// Warped ground truth on A's grid: directions from depth + poses,
/// certainty from the depth-consistency mask.
fn ground_truth_field(a: &Frame, b: &Frame, cfg: &RunConfig) -> Result<MatchField, Failure> {
    let need = |field: &str, name: &str| {
        Failure::data(format!(
            "--gt-eval needs {field} for frame {name}, but the file is missing"
        ))
    };
    let depth_a = a.depth.as_ref().ok_or_else(|| need("a depth map", &a.name))?;
    let depth_b = b.depth.as_ref().ok_or_else(|| need("a depth map", &b.name))?;
    let pose_a = a.pose.as_ref().ok_or_else(|| need("a pose", &a.name))?;
    let pose_b = b.pose.as_ref().ok_or_else(|| need("a pose", &b.name))?;
    let (mut gt, warped_depth) = warp_frame(depth_a, pose_a, pose_b);
    let mask = certainty_mask(&gt, &warped_depth, depth_b, cfg.loss.alpha)
        .map_err(|e| Failure::data(e.to_string()))?;
    for (c, &m) in gt.certainty_mut().iter_mut().zip(&mask) {
        *c = if m { 1.0 } else { 0.0 };
    }
    Ok(gt)
}

fn cmd_pose(
    cfg: &RunConfig,
    dir: &Path,
    pairs_path: Option<&Path>,
    out: &Path,
) -> Result<(), Failure> {
    let t0 = Instant::now();
    let default_path = dir.join("pairs.csv");
    let path = pairs_path.unwrap_or(&default_path);
    let pairs = io::load_pairs(path)?;
    if pairs.is_empty() {
        return Err(PipelineError::from(PoseError::EmptyList).into());
    }

    // Pair-level parallelism; per-pair estimation failures become 180
    // degree records, data errors abort the run.
    let records: Vec<PairPoseRecord> = pairs
        .par_iter()
        .map(|p| evaluate_pair(cfg, dir, p))
        .collect::<Result<_, _>>()?;

    let errors: Vec<f64> = records.iter().map(|r| r.pose_error_deg).collect();
    let auc = auc_at(&errors, &DEFAULT_AUC_THRESHOLDS)
        .map_err(|e| Failure::numerical(e.to_string()))?;

    create_dir(out)?;
    let report = PoseReport {
        schema_version: SCHEMA_VERSION,
        command: "pose".to_string(),
        config: cfg.clone(),
        pairs: records,
        auc_thresholds_deg: DEFAULT_AUC_THRESHOLDS.to_vec(),
        auc_percent: auc.clone(),
        total_ms: t0.elapsed().as_secs_f64() * 1e3,
    };
    write_report(&out.join("pose_report.json"), &report)?;

    for r in &report.pairs {
        match &r.failure {
            None => println!(
                "{} -> {}: {:.4} deg, {}/{} inliers",
                r.frame_a, r.frame_b, r.pose_error_deg, r.inliers, r.correspondences
            ),
            Some(why) => println!("{} -> {}: failed ({why})", r.frame_a, r.frame_b),
        }
    }
    let auc_line = DEFAULT_AUC_THRESHOLDS
        .iter()
        .zip(&auc)
        .map(|(t, v)| format!("@{t:.0} {v:.2}"))
        .collect::<Vec<_>>()
        .join("  ");
    println!("AUC (deg): {auc_line}");
    Ok(())
}

fn evaluate_pair(cfg: &RunConfig, dir: &Path, pair: &PairEntry) -> Result<PairPoseRecord, Failure> {
    let a = io::load_frame(dir, &pair.frame_a)?;
    let b = io::load_frame(dir, &pair.frame_b)?;
    let need_pose = |name: &str| {
        Failure::data(format!(
            "frame {name} has no pose file; pose evaluation needs ground truth"
        ))
    };
    let pose_a = a.pose.as_ref().ok_or_else(|| need_pose(&a.name))?;
    let pose_b = b.pose.as_ref().ok_or_else(|| need_pose(&b.name))?;

    let failed = |why: String| PairPoseRecord {
        frame_a: pair.frame_a.clone(),
        frame_b: pair.frame_b.clone(),
        pose_error_deg: 180.0,
        inliers: 0,
        correspondences: 0,
        failure: Some(why),
    };

    let Some(gt) = RelativePose::between(pose_a, pose_b) else {
        return Ok(failed(
            "ground-truth motion is a pure rotation; translation direction undefined".to_string(),
        ));
    };

    let estimated = pipeline::match_images(&a.image, &b.image, cfg)
        .and_then(|m| pipeline::estimate_pose(&m.refined, cfg));
    Ok(match estimated {
        Ok(outcome) => PairPoseRecord {
            frame_a: pair.frame_a.clone(),
            frame_b: pair.frame_b.clone(),
            pose_error_deg: pose_error(&outcome.pose, &gt),
            inliers: outcome.inlier_count(),
            correspondences: outcome.correspondences.len(),
            failure: None,
        },
        Err(e) if e.is_numerical() => failed(e.to_string()),
        Err(e) => return Err(e.into()),
    })
}

fn cmd_triangulate(
    cfg: &RunConfig,
    dir: &Path,
    name_a: &str,
    name_b: &str,
    out: &Path,
) -> Result<(), Failure> {
    let t0 = Instant::now();
    let a = io::load_frame(dir, name_a)?;
    let b = io::load_frame(dir, name_b)?;
    let outcome = pipeline::match_images(&a.image, &b.image, cfg)?;

    // A degenerate pair (pure rotation, no consensus) still produces a
    // well-formed, empty cloud; only data errors abort.
    let pose = match pipeline::estimate_pose(&outcome.refined, cfg) {
        Ok(p) => Some(p),
        Err(e) if e.is_numerical() => {
            eprintln!("warning: pose estimation failed ({e}); writing an empty cloud");
            None
        }
        Err(e) => return Err(e.into()),
    };

    let points: Vec<PlyPoint> = match &pose {
        None => Vec::new(),
        Some(outcome) => {
            let inliers = outcome.correspondences.filtered(&outcome.inliers);
            triangulate_indexed(&inliers, &outcome.pose)
                .into_iter()
                .map(|(i, position)| {
                    let (row, col) = inliers.pixels()[i];
                    PlyPoint {
                        position,
                        color: pixel_color(&a.image, row, col),
                    }
                })
                .collect()
        }
    };

    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    io::save_ply(out, &points)?;

    let median_err = match (&pose, &a.depth) {
        (Some(outcome), Some(depth_a)) => {
            let inliers = outcome.correspondences.filtered(&outcome.inliers);
            median_depth_error(&triangulate_indexed(&inliers, &outcome.pose), &inliers, depth_a)
        }
        _ => None,
    };

    let report_path = out.with_extension("json");
    let report = TriangulationReport {
        schema_version: SCHEMA_VERSION,
        command: "triangulate".to_string(),
        config: cfg.clone(),
        frame_a: name_a.to_string(),
        frame_b: name_b.to_string(),
        point_count: points.len(),
        median_relative_depth_error: median_err,
        ply_path: out.display().to_string(),
        total_ms: t0.elapsed().as_secs_f64() * 1e3,
    };
    write_report(&report_path, &report)?;

    println!("wrote {} points to {}", points.len(), out.display());
    if let Some(e) = median_err {
        println!("median relative depth error {:.4}% after scale alignment", 100.0 * e);
    }
    Ok(())
}

fn pixel_color(image: &ErpImage, row: usize, col: usize) -> [u8; 3] {
    let px = image.grid().pixel(row, col);
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    match px {
        [g] => [q(*g); 3],
        [r, g, b] => [q(*r), q(*g), q(*b)],
        _ => [0; 3],
    }
}

/// Median relative error of triangulated ranges against GT depth after
/// aligning the cloud's free scale by the median range ratio.
fn median_depth_error(
    points: &[(usize, nalgebra::Vector3<f64>)],
    c: &omnimatch::pose::BearingCorrespondences,
    depth_a: &omnimatch::frame::DepthMap,
) -> Option<f64> {
    let width = depth_a.spec().width();
    let mut gt_est: Vec<(f64, f64)> = Vec::new();
    for &(i, p) in points {
        let (row, col) = c.pixels()[i];
        let idx = row * width + col;
        if !depth_a.valid()[idx] {
            continue;
        }
        let gt = f64::from(depth_a.depth().data()[idx]);
        let est = p.norm();
        if gt > 0.0 && est > 0.0 {
            gt_est.push((gt, est));
        }
    }
    let scale = median(gt_est.iter().map(|&(gt, est)| gt / est).collect())?;
    median(
        gt_est
            .iter()
            .map(|&(gt, est)| (scale * est - gt).abs() / gt)
            .collect(),
    )
}

fn median(mut xs: Vec<f64>) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(|a, b| a.total_cmp(b));
    let mid = xs.len() / 2;
    Some(if xs.len() % 2 == 1 {
        xs[mid]
    } else {
        0.5 * (xs[mid - 1] + xs[mid])
    })
}

fn cmd_selftest() -> Result<(), Failure> {
    let report = selftest::run_all();
    println!(
        "{:<24} {:>14} {:>12}  status",
        "suite", "max error", "tolerance"
    );
    for s in &report.suites {
        println!(
            "{:<24} {:>14.6e} {:>12.0e}  {}",
            s.name,
            s.max_error,
            s.tolerance,
            if s.passed { "pass" } else { "FAIL" }
        );
    }
    if report.all_passed() {
        Ok(())
    } else {
        Err(Failure::numerical("one or more invariant suites failed"))
    }
}
