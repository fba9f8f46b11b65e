//! Versioned JSON run reports. Every report embeds the fully resolved
//! configuration so results are self-describing, and keeps wall-clock
//! timings in one clearly named field so reproducibility checks can
//! exclude them.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::pipeline::StageTimings;

/// Bumped whenever a report's shape changes incompatibly.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatchReport {
    pub schema_version: u32,
    pub command: String,
    pub config: RunConfig,
    pub frame_a: String,
    pub frame_b: String,
    /// Fraction of cells at or above the sampling certainty threshold.
    pub confident_fraction: f64,
    /// Mean angle between predicted and GT directions over GT-certain
    /// cells, degrees; absent without ground truth.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_angular_error_deg: Option<f64>,
    /// Same metric for the upsampled coarse field, for judging what
    /// refinement bought; absent without ground truth.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coarse_angular_error_deg: Option<f64>,
    pub outputs: Vec<String>,
    /// Wall-clock only; excluded from byte-identity comparisons.
    pub timings: StageTimings,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairPoseRecord {
    pub frame_a: String,
    pub frame_b: String,
    /// Degrees; 180 for failures.
    pub pose_error_deg: f64,
    pub inliers: usize,
    pub correspondences: usize,
    /// Set when estimation failed; the error is then recorded as 180.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoseReport {
    pub schema_version: u32,
    pub command: String,
    pub config: RunConfig,
    pub pairs: Vec<PairPoseRecord>,
    /// AUC percentages at [`crate::pose::DEFAULT_AUC_THRESHOLDS`].
    pub auc_thresholds_deg: Vec<f64>,
    pub auc_percent: Vec<f64>,
    /// Wall-clock only; excluded from byte-identity comparisons.
    pub total_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TriangulationReport {
    pub schema_version: u32,
    pub command: String,
    pub config: RunConfig,
    pub frame_a: String,
    pub frame_b: String,
    pub point_count: usize,
    /// Median relative depth error after median-scale alignment to GT
    /// depth; absent without ground truth.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub median_relative_depth_error: Option<f64>,
    pub ply_path: String,
    /// Wall-clock only; excluded from byte-identity comparisons.
    pub total_ms: f64,
}

/// Writes a report as pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, report: &T) -> std::io::Result<()> {
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    std::fs::write(path, text)
}

/// The report with every timing line blanked, for byte-identity
/// comparisons across runs.
pub fn strip_timings(json_text: &str) -> String {
    json_text
        .lines()
        .filter(|l| {
            let key = l.trim_start();
            !(key.starts_with("\"extract_ms\"")
                || key.starts_with("\"coarse_ms\"")
                || key.starts_with("\"refine_ms\"")
                || key.starts_with("\"total_ms\""))
        })
        .collect::<Vec<_>>()
        .join("\n")
}
