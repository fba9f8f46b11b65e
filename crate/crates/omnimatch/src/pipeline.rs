//! End-to-end orchestration shared by the command-line tool and the
//! evaluation harness: images in, dense match field out, then pose and
//! point cloud. Each stage is the module-level API wired together with
//! one [`RunConfig`]; nothing here adds behavior beyond sequencing.

use std::time::Instant;

use nalgebra::Vector3;
use thiserror::Error;

use crate::config::{ExtractorConfig, RunConfig};
use crate::frame::{augment_azimuth, ErpImage, FrameError, MatchField, PoseSE3, ShiftMode};
use crate::matcher::{
    match_coarse, EmbeddingInversionDecoder, EmbeddingParams, MatchError,
};
use crate::pose::{
    decompose_essential, ransac_essential, refine_essential_nonlinear, sample_matches,
    triangulate_spherical, BearingCorrespondences, EssentialMatrix, PoseError,
    RelativePose,
};
use crate::pyramid::{
    FeatureExtractor, FeaturePyramid, GradientExtractor, PatchExtractor, PyramidError,
};
use crate::refine::{run_refinement, RefineError, SoftargmaxRefiner};

/// Yaw applied to frame B when azimuth augmentation is enabled; a
/// quarter turn is an exact column permutation on any grid with width
/// divisible by four.
pub const AUGMENT_YAW: f64 = std::f64::consts::FRAC_PI_2;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Pyramid(#[from] PyramidError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Pose(#[from] PoseError),
}

impl PipelineError {
    /// True for failures of the numerics (solver breakdown, degenerate
    /// geometry, consensus starvation) as opposed to malformed inputs.
    pub fn is_numerical(&self) -> bool {
        match self {
            PipelineError::Match(MatchError::SolveFailure { .. }) => true,
            PipelineError::Pose(e) => !matches!(
                e,
                PoseError::BadInput { .. } | PoseError::EmptyList
            ),
            _ => false,
        }
    }
}

/// Wall-clock stage durations, milliseconds.
#[derive(Debug, Clone, Copy, Default, serde::Serialize, serde::Deserialize)]
pub struct StageTimings {
    pub extract_ms: f64,
    pub coarse_ms: f64,
    pub refine_ms: f64,
}

/// Dense matching result: the coarse field the global matcher produced
/// and the full-resolution refined field.
#[derive(Debug, Clone)]
pub struct MatchOutcome {
    pub coarse: MatchField,
    pub refined: MatchField,
    pub timings: StageTimings,
}

pub fn build_extractor(cfg: &ExtractorConfig) -> Box<dyn FeatureExtractor> {
    match *cfg {
        ExtractorConfig::Patch { patch_size } => Box::new(PatchExtractor { patch_size }),
        ExtractorConfig::Gradient { window } => Box::new(GradientExtractor { window }),
    }
}

pub fn extract_pyramid(
    img: &ErpImage,
    cfg: &RunConfig,
) -> Result<FeaturePyramid, PipelineError> {
    Ok(build_extractor(&cfg.extractor).extract(img)?)
}

/// Full dense matching: descriptor pyramids, kernel-regression coarse
/// matching, coarse-to-fine geodesic refinement. With augmentation
/// enabled, frame B is yawed by [`AUGMENT_YAW`] before matching and the
/// matched directions are rotated back afterwards, which exercises the
/// pipeline's azimuth equivariance without changing its output frame.
pub fn match_images(
    a: &ErpImage,
    b: &ErpImage,
    cfg: &RunConfig,
) -> Result<MatchOutcome, PipelineError> {
    let (b_input, undo) = if cfg.augment_azimuth {
        let aug = augment_azimuth(b, None, &PoseSE3::identity(), AUGMENT_YAW, ShiftMode::Snap);
        let undo = *aug.pose.rotation();
        (aug.image, Some(undo))
    } else {
        (b.clone(), None)
    };

    let t0 = Instant::now();
    let extractor = build_extractor(&cfg.extractor);
    let pyr_a = extractor.extract(a)?;
    let pyr_b = extractor.extract(&b_input)?;
    let extract_ms = t0.elapsed().as_secs_f64() * 1e3;

    let t1 = Instant::now();
    let params = EmbeddingParams::seeded(cfg.gp.embed_dim, cfg.embedding_seed);
    let mut coarse = match_coarse(&pyr_a, &pyr_b, &params, &cfg.gp, &EmbeddingInversionDecoder)?;
    let coarse_ms = t1.elapsed().as_secs_f64() * 1e3;

    let t2 = Instant::now();
    let refiner = SoftargmaxRefiner::from_config(&cfg.refiner);
    let mut refined = run_refinement(&coarse, &pyr_a, &pyr_b, &cfg.refiner, &refiner)?;
    let refine_ms = t2.elapsed().as_secs_f64() * 1e3;

    if let Some(undo) = undo {
        for d in coarse.directions_mut() {
            *d = undo * *d;
        }
        for d in refined.directions_mut() {
            *d = undo * *d;
        }
    }

    Ok(MatchOutcome {
        coarse,
        refined,
        timings: StageTimings {
            extract_ms,
            coarse_ms,
            refine_ms,
        },
    })
}

/// Relative pose estimated from a match field, with the evidence kept
/// for reporting and triangulation.
#[derive(Debug, Clone)]
pub struct PoseOutcome {
    pub pose: RelativePose,
    pub essential: EssentialMatrix,
    pub correspondences: BearingCorrespondences,
    pub inliers: Vec<bool>,
}

impl PoseOutcome {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&m| m).count()
    }
}

/// Sample, RANSAC, refine, decompose.
pub fn estimate_pose(
    field: &MatchField,
    cfg: &RunConfig,
) -> Result<PoseOutcome, PipelineError> {
    let c = sample_matches(
        field,
        cfg.sampling.certainty_threshold,
        cfg.sampling.max_matches,
        cfg.sampling.seed,
    )?;
    let (e, inliers) = ransac_essential(
        &c,
        cfg.ransac.iterations,
        cfg.ransac.inlier_threshold_deg.to_radians(),
        cfg.ransac.seed,
    )?;
    let refined = refine_essential_nonlinear(&e, &c, &inliers);
    let pose = decompose_essential(&refined, &c.filtered(&inliers))?;
    Ok(PoseOutcome {
        pose,
        essential: refined,
        correspondences: c,
        inliers,
    })
}

/// Triangulates the pose outcome's inlier correspondences; points are
/// in frame A at unit-baseline scale.
pub fn triangulate_outcome(outcome: &PoseOutcome) -> Vec<Vector3<f64>> {
    triangulate_spherical(
        &outcome.correspondences.filtered(&outcome.inliers),
        &outcome.pose,
    )
}

/// Upsamples a match field by repeated doubling until it reaches
/// `target_height` rows; the refinement-free baseline a refined field
/// is judged against.
pub fn upsample_field_to(
    field: &MatchField,
    target_height: usize,
) -> Result<MatchField, PipelineError> {
    let mut out = field.clone();
    while out.spec().height() < target_height {
        out = crate::refine::upsample_matchfield(&out)?;
    }
    assert_eq!(
        out.spec().height(),
        target_height,
        "target height must be a power-of-two multiple of the input"
    );
    Ok(out)
}

/// Mean angle in radians between predicted and ground-truth directions
/// over GT-certain cells; `None` when no cell is certain. The two
/// fields must share a grid; predictions are compared at the GT grid's
/// resolution.
pub fn mean_angular_error(pred: &MatchField, gt: &MatchField) -> Option<f64> {
    assert_eq!(
        pred.spec(),
        gt.spec(),
        "angular error needs fields on one grid"
    );
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for i in 0..pred.spec().len() {
        if gt.certainty()[i] < 0.5 {
            continue;
        }
        let dot = pred.directions()[i].dot(&gt.directions()[i]).clamp(-1.0, 1.0);
        sum += dot.acos();
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}
