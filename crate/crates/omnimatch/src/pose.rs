//! Two-view relative pose from dense spherical matches: certainty-
//! filtered correspondence sampling, a normalized eight-point solver on
//! bearing vectors with RANSAC and Gauss-Newton refinement, pose-error
//! metrics with AUC summaries, and midpoint triangulation.
//!
//! Conventions: a correspondence pairs unit bearings `a` (frame A) and
//! `b` (frame B) of the same scene point; the relative pose maps A
//! coordinates to B as `X_B = R X_A + t`, so the essential constraint
//! reads `b' [t]x R a = 0`. Translation scale is unobservable from
//! bearings alone and is kept normalized.

use nalgebra::{Matrix3, Rotation3, SMatrix, Unit, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::frame::{pixel_rays, MatchField, PoseSE3};

#[derive(Debug, Error)]
pub enum PoseError {
    #[error("need at least 8 correspondences, got {got}")]
    TooFewMatches { got: usize },
    #[error(
        "degenerate configuration: null-space ambiguity ratio {ratio:.3} exceeds {limit}"
    )]
    DegenerateConfiguration { ratio: f64, limit: f64 },
    #[error("no RANSAC iteration produced a model with at least 8 inliers")]
    NoModelFound,
    #[error("essential decomposition ambiguous: two candidates tie at {votes} votes")]
    AmbiguousDecomposition { votes: usize },
    #[error("empty error list")]
    EmptyList,
    #[error("invalid correspondences: {reason}")]
    BadInput { reason: String },
}

/// Certainty cutoff for sampling correspondences out of a match field.
pub const DEFAULT_CERTAINTY_THRESHOLD: f64 = 0.8;

/// Cap on sampled correspondences.
pub const DEFAULT_MAX_MATCHES: usize = 5000;

/// RANSAC iteration budget.
pub const DEFAULT_RANSAC_ITERATIONS: usize = 1000;

/// Angular epipolar residual bound for RANSAC inliers, radians (1 deg).
pub const DEFAULT_ANGULAR_INLIER_THRESHOLD: f64 = std::f64::consts::PI / 180.0;

/// AUC thresholds reported for pose error, degrees.
pub const DEFAULT_AUC_THRESHOLDS: [f64; 3] = [5.0, 10.0, 20.0];

/// Two smallest constraint-matrix singular values closer than this ratio
/// mean the essential null space is not unique.
const DEGENERACY_RATIO: f64 = 0.9;

/// Rays within this angle of collinear are untriangulable, radians
/// (0.1 deg).
const MIN_TRIANGULATION_ANGLE: f64 = 0.1 * std::f64::consts::PI / 180.0;

/// Gauss-Newton iteration cap for essential refinement.
const GN_MAX_ITERATIONS: usize = 20;

/// Central-difference step for the refinement Jacobian.
const GN_JACOBIAN_STEP: f64 = 1e-6;

/// Unit bearing pairs with their source cells and certainties.
#[derive(Debug, Clone, PartialEq)]
pub struct BearingCorrespondences {
    bearings_a: Vec<Vector3<f64>>,
    bearings_b: Vec<Vector3<f64>>,
    pixels: Vec<(usize, usize)>,
    certainties: Vec<f32>,
}

impl BearingCorrespondences {
    pub fn new(
        bearings_a: Vec<Vector3<f64>>,
        bearings_b: Vec<Vector3<f64>>,
        pixels: Vec<(usize, usize)>,
        certainties: Vec<f32>,
    ) -> Result<Self, PoseError> {
        let n = bearings_a.len();
        if bearings_b.len() != n || pixels.len() != n || certainties.len() != n {
            return Err(PoseError::BadInput {
                reason: format!(
                    "field lengths disagree: {} / {} / {} / {}",
                    n,
                    bearings_b.len(),
                    pixels.len(),
                    certainties.len()
                ),
            });
        }
        for (i, v) in bearings_a.iter().chain(&bearings_b).enumerate() {
            if (v.norm() - 1.0).abs() > 1e-6 {
                return Err(PoseError::BadInput {
                    reason: format!("bearing {i} has norm {}", v.norm()),
                });
            }
        }
        Ok(Self {
            bearings_a,
            bearings_b,
            pixels,
            certainties,
        })
    }

    pub fn len(&self) -> usize {
        self.bearings_a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bearings_a.is_empty()
    }

    pub fn bearings_a(&self) -> &[Vector3<f64>] {
        &self.bearings_a
    }

    pub fn bearings_b(&self) -> &[Vector3<f64>] {
        &self.bearings_b
    }

    pub fn pixels(&self) -> &[(usize, usize)] {
        &self.pixels
    }

    pub fn certainties(&self) -> &[f32] {
        &self.certainties
    }

    /// The subset selected by `mask`.
    pub fn filtered(&self, mask: &[bool]) -> Self {
        let pick = |i: &usize| mask[*i];
        let idx: Vec<usize> = (0..self.len()).filter(pick).collect();
        Self {
            bearings_a: idx.iter().map(|&i| self.bearings_a[i]).collect(),
            bearings_b: idx.iter().map(|&i| self.bearings_b[i]).collect(),
            pixels: idx.iter().map(|&i| self.pixels[i]).collect(),
            certainties: idx.iter().map(|&i| self.certainties[i]).collect(),
        }
    }

    fn subset(&self, idx: &[usize]) -> Self {
        Self {
            bearings_a: idx.iter().map(|&i| self.bearings_a[i]).collect(),
            bearings_b: idx.iter().map(|&i| self.bearings_b[i]).collect(),
            pixels: idx.iter().map(|&i| self.pixels[i]).collect(),
            certainties: idx.iter().map(|&i| self.certainties[i]).collect(),
        }
    }
}

/// Essential matrix, canonicalized: rank 2, equal nonzero singular
/// values, unit Frobenius norm, and the largest-magnitude entry
/// positive so equality is meaningful across solvers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EssentialMatrix(Matrix3<f64>);

impl EssentialMatrix {
    /// Projects an arbitrary matrix to the canonical essential manifold.
    pub fn from_matrix(m: Matrix3<f64>) -> Self {
        let svd = m.svd(true, true);
        let u = svd.u.expect("3x3 svd with u");
        let v_t = svd.v_t.expect("3x3 svd with v_t");
        // nalgebra's fixed-size SVD returns descending singular values.
        let d = Matrix3::from_diagonal(&Vector3::new(
            std::f64::consts::FRAC_1_SQRT_2,
            std::f64::consts::FRAC_1_SQRT_2,
            0.0,
        ));
        let mut e = u * d * v_t;
        let mut largest = 0.0f64;
        for v in e.iter() {
            if v.abs() > largest.abs() {
                largest = *v;
            }
        }
        if largest < 0.0 {
            e = -e;
        }
        EssentialMatrix(e)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// Angular epipolar residual: the bearing's angle out of the
    /// epipolar plane that the essential matrix assigns to its partner.
    pub fn angular_residual(&self, a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
        let plane_normal = self.0 * a;
        let n = plane_normal.norm();
        if n < 1e-15 {
            // Bearing through an epipole constrains nothing; report the
            // worst residual so it never counts as evidence.
            return std::f64::consts::FRAC_PI_2;
        }
        (b.dot(&plane_normal).abs() / n).clamp(0.0, 1.0).asin()
    }
}

/// Scale-free relative pose: `X_B = R X_A + t` with `|t| = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativePose {
    rotation: Rotation3<f64>,
    translation: Unit<Vector3<f64>>,
}

impl RelativePose {
    pub fn new(rotation: Rotation3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation: Unit::new_normalize(translation),
        }
    }

    pub fn rotation(&self) -> &Rotation3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Unit<Vector3<f64>> {
        &self.translation
    }

    /// The scale-free pose between two camera-to-world poses, or `None`
    /// for a pure rotation (translation direction unobservable).
    pub fn between(a: &PoseSE3, b: &PoseSE3) -> Option<Self> {
        let r_rel = b.rotation().inverse() * a.rotation();
        let t_rel = b.rotation().inverse() * (a.translation() - b.translation());
        if t_rel.norm() < 1e-12 {
            return None;
        }
        Some(Self::new(r_rel, t_rel))
    }

    /// The essential matrix `[t]x R` of this pose, canonicalized.
    pub fn essential(&self) -> EssentialMatrix {
        EssentialMatrix::from_matrix(skew(&self.translation) * self.rotation.matrix())
    }
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Draws up to `max_n` correspondences from cells at or above the
/// certainty threshold, pairing each cell's ray with its predicted
/// match direction. The sample is uniform without replacement and
/// deterministic per seed; surviving indices are emitted in grid order.
pub fn sample_matches(
    m: &MatchField,
    threshold: f64,
    max_n: usize,
    seed: u64,
) -> Result<BearingCorrespondences, PoseError> {
    let spec = *m.spec();
    let rays = pixel_rays(&spec);
    let eligible: Vec<usize> = (0..spec.len())
        .filter(|&i| f64::from(m.certainty()[i]) >= threshold)
        .collect();
    if eligible.len() < 8 {
        return Err(PoseError::TooFewMatches {
            got: eligible.len(),
        });
    }
    let chosen: Vec<usize> = if eligible.len() <= max_n {
        eligible
    } else {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut picks = rand::seq::index::sample(&mut rng, eligible.len(), max_n).into_vec();
        picks.sort_unstable();
        picks.into_iter().map(|p| eligible[p]).collect()
    };
    let bearings_a: Vec<_> = chosen.iter().map(|&i| rays[i]).collect();
    let bearings_b: Vec<_> = chosen.iter().map(|&i| m.directions()[i]).collect();
    let pixels: Vec<_> = chosen
        .iter()
        .map(|&i| (i / spec.width(), i % spec.width()))
        .collect();
    let certainties: Vec<_> = chosen.iter().map(|&i| m.certainty()[i]).collect();
    BearingCorrespondences::new(bearings_a, bearings_b, pixels, certainties)
}

/// Rotation taking the mean of `dirs` to the +z axis; identity when the
/// mean cancels to nothing.
fn rotation_to_mean_z(dirs: &[Vector3<f64>]) -> Rotation3<f64> {
    let mean: Vector3<f64> = dirs.iter().sum();
    if mean.norm() < 1e-12 {
        return Rotation3::identity();
    }
    Rotation3::rotation_between(&mean, &Vector3::z()).unwrap_or_else(|| {
        // Antipodal mean: any half-turn through an orthogonal axis works;
        // pick the x axis for determinism.
        Rotation3::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI)
    })
}

/// Least-squares essential matrix from at least eight bearing pairs.
///
/// Both bearing sets are pre-conditioned by rotating their mean to the
/// +z axis, which centers the constraint rows the way coordinate
/// normalization does for planar images; each row of the stacked
/// constraint system is the Kronecker product of unit bearings and so
/// already has unit norm. The null vector comes from the eigendecomposition
/// of the 9x9 normal matrix, and the result is projected to the
/// essential manifold.
pub fn eight_point_spherical(
    c: &BearingCorrespondences,
) -> Result<EssentialMatrix, PoseError> {
    if c.len() < 8 {
        return Err(PoseError::TooFewMatches { got: c.len() });
    }
    let r_a = rotation_to_mean_z(c.bearings_a());
    let r_b = rotation_to_mean_z(c.bearings_b());
    let mut ata = SMatrix::<f64, 9, 9>::zeros();
    for (a, b) in c.bearings_a().iter().zip(c.bearings_b()) {
        let a = r_a * a;
        let b = r_b * b;
        let mut row = [0.0f64; 9];
        for i in 0..3 {
            for j in 0..3 {
                row[3 * i + j] = b[i] * a[j];
            }
        }
        for i in 0..9 {
            for j in 0..9 {
                ata[(i, j)] += row[i] * row[j];
            }
        }
    }
    let eig = ata.symmetric_eigen();
    // Eigenvalues of A'A are squared singular values of A; order them
    // explicitly since the decomposition does not sort.
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[i]
            .partial_cmp(&eig.eigenvalues[j])
            .expect("eigenvalues of a real symmetric matrix are finite")
    });
    let smallest = eig.eigenvalues[order[0]].max(0.0).sqrt();
    let second = eig.eigenvalues[order[1]].max(0.0).sqrt();
    let scale = eig.eigenvalues[order[8]].max(0.0).sqrt().max(1e-300);
    // The normal matrix squares singular values, so a rank deficiency
    // bottoms out near sqrt(machine eps) relative, not eps.
    let ratio = if second / scale < 1e-6 {
        // Null space of dimension two or more; no unique essential line.
        1.0
    } else {
        smallest / second
    };
    if ratio > DEGENERACY_RATIO {
        return Err(PoseError::DegenerateConfiguration {
            ratio,
            limit: DEGENERACY_RATIO,
        });
    }
    let e_vec = eig.eigenvectors.column(order[0]);
    let e_hat = Matrix3::new(
        e_vec[0], e_vec[1], e_vec[2], e_vec[3], e_vec[4], e_vec[5], e_vec[6], e_vec[7],
        e_vec[8],
    );
    // Undo the normalization rotations: the solved system constrained
    // (R_b b)' E_hat (R_a a).
    let e = r_b.matrix().transpose() * e_hat * r_a.matrix();
    Ok(EssentialMatrix::from_matrix(e))
}

/// Robust essential estimation: repeated minimal eight-point fits on
/// seeded random subsets, scored by angular-residual inliers, with the
/// winner re-fit on its inlier set. Returns the model and its inlier
/// mask. Iterations run independently with per-iteration derived seeds;
/// ties in inlier count resolve to the earliest iteration.
pub fn ransac_essential(
    c: &BearingCorrespondences,
    iterations: usize,
    angular_inlier_threshold: f64,
    seed: u64,
) -> Result<(EssentialMatrix, Vec<bool>), PoseError> {
    if c.len() < 8 {
        return Err(PoseError::TooFewMatches { got: c.len() });
    }
    let inlier_mask = |e: &EssentialMatrix| -> Vec<bool> {
        c.bearings_a()
            .iter()
            .zip(c.bearings_b())
            .map(|(a, b)| e.angular_residual(a, b) < angular_inlier_threshold)
            .collect()
    };
    let candidates: Vec<(usize, usize, EssentialMatrix)> = (0..iterations)
        .into_par_iter()
        .filter_map(|iter| {
            let mut rng = ChaCha12Rng::seed_from_u64(
                seed ^ (iter as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            );
            let picks = rand::seq::index::sample(&mut rng, c.len(), 8).into_vec();
            let model = eight_point_spherical(&c.subset(&picks)).ok()?;
            let count = inlier_mask(&model).iter().filter(|&&m| m).count();
            (count >= 8).then_some((count, iter, model))
        })
        .collect();
    let best = candidates
        .into_iter()
        .min_by(|(ca, ia, _), (cb, ib, _)| cb.cmp(ca).then(ia.cmp(ib)))
        .ok_or(PoseError::NoModelFound)?;
    let mask = inlier_mask(&best.2);
    // Re-fit on the consensus set; keep the minimal model if the
    // consensus happens to be degenerate for the linear system.
    let refit = eight_point_spherical(&c.filtered(&mask)).unwrap_or(best.2);
    let mask = inlier_mask(&refit);
    Ok((refit, mask))
}

/// Five-parameter pose chart around a base pose: a rotation increment
/// (axis-angle) and a translation-direction increment in the tangent
/// plane at the base translation.
fn apply_chart(base: &RelativePose, delta: &[f64; 5]) -> RelativePose {
    let w = Vector3::new(delta[0], delta[1], delta[2]);
    let rotation = Rotation3::new(w) * base.rotation;
    let t = base.translation.into_inner();
    let (e1, e2) = tangent_basis(&t);
    RelativePose::new(rotation, t + delta[3] * e1 + delta[4] * e2)
}

fn tangent_basis(t: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if t.x.abs() < 0.9 {
        Vector3::x()
    } else {
        Vector3::y()
    };
    let e1 = t.cross(&helper).normalize();
    let e2 = t.cross(&e1).normalize();
    (e1, e2)
}

fn residual_sum_squares(pose: &RelativePose, c: &BearingCorrespondences) -> f64 {
    let e = pose.essential();
    c.bearings_a()
        .iter()
        .zip(c.bearings_b())
        .map(|(a, b)| {
            let r = e.angular_residual(a, b);
            r * r
        })
        .sum()
}

/// Gauss-Newton refinement of an essential matrix over the inlier set,
/// minimizing summed squared angular epipolar residuals over a minimal
/// five-parameter pose. The step halves on error increase; the result
/// never scores worse than the initialization (which is returned
/// unchanged if no probe improves on it).
pub fn refine_essential_nonlinear(
    e: &EssentialMatrix,
    c: &BearingCorrespondences,
    inliers: &[bool],
) -> EssentialMatrix {
    let subset = c.filtered(inliers);
    if subset.len() < 8 {
        return *e;
    }
    // Any of the four decomposition candidates parametrizes the same
    // essential line; cheirality is settled later by the caller.
    let Some(mut pose) = first_candidate(e) else {
        return *e;
    };
    let mut best_err = residual_sum_squares(&pose, &subset);
    let init_err = best_err;
    let n = subset.len();
    for _ in 0..GN_MAX_ITERATIONS {
        let e_now = pose.essential();
        let base_res: Vec<f64> = subset
            .bearings_a()
            .iter()
            .zip(subset.bearings_b())
            .map(|(a, b)| e_now.angular_residual(a, b))
            .collect();
        // Numeric Jacobian, forward differences per parameter.
        let mut jt_j = SMatrix::<f64, 5, 5>::zeros();
        let mut jt_r = SMatrix::<f64, 5, 1>::zeros();
        let mut jac = vec![[0.0f64; 5]; n];
        for p in 0..5 {
            let mut delta = [0.0f64; 5];
            delta[p] = GN_JACOBIAN_STEP;
            let probe = apply_chart(&pose, &delta).essential();
            for (i, (a, b)) in subset
                .bearings_a()
                .iter()
                .zip(subset.bearings_b())
                .enumerate()
            {
                jac[i][p] = (probe.angular_residual(a, b) - base_res[i]) / GN_JACOBIAN_STEP;
            }
        }
        for (row, r) in jac.iter().zip(&base_res) {
            for p in 0..5 {
                jt_r[p] += row[p] * r;
                for q in 0..5 {
                    jt_j[(p, q)] += row[p] * row[q];
                }
            }
        }
        // Tiny Tikhonov term keeps the normal system solvable when a
        // parameter direction is momentarily unconstrained.
        for p in 0..5 {
            jt_j[(p, p)] += 1e-12;
        }
        let Some(chol) = jt_j.cholesky() else {
            break;
        };
        let step = -chol.solve(&jt_r);
        let mut improved = false;
        let mut scale = 1.0f64;
        for _ in 0..8 {
            let delta = [
                scale * step[0],
                scale * step[1],
                scale * step[2],
                scale * step[3],
                scale * step[4],
            ];
            let candidate = apply_chart(&pose, &delta);
            let err = residual_sum_squares(&candidate, &subset);
            if err < best_err {
                pose = candidate;
                best_err = err;
                improved = true;
                break;
            }
            scale *= 0.5;
        }
        if !improved || init_err - best_err < 1e-18 {
            break;
        }
    }
    if best_err <= init_err {
        pose.essential()
    } else {
        *e
    }
}

/// The decomposition candidate with `R = U W V'` and `t = +u3`; `None`
/// if the SVD degenerates.
fn first_candidate(e: &EssentialMatrix) -> Option<RelativePose> {
    let cands = decomposition_candidates(e)?;
    cands.into_iter().next()
}

fn decomposition_candidates(e: &EssentialMatrix) -> Option<Vec<RelativePose>> {
    let svd = e.0.svd(true, true);
    let mut u = svd.u?;
    let mut v_t = svd.v_t?;
    // Force proper rotations; the zero singular value absorbs the flip.
    if u.determinant() < 0.0 {
        u.column_mut(2).neg_mut();
    }
    if v_t.determinant() < 0.0 {
        v_t.row_mut(2).neg_mut();
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = Rotation3::from_matrix_unchecked(u * w * v_t);
    let r2 = Rotation3::from_matrix_unchecked(u * w.transpose() * v_t);
    let t: Vector3<f64> = u.column(2).into();
    Some(vec![
        RelativePose::new(r1, t),
        RelativePose::new(r1, -t),
        RelativePose::new(r2, t),
        RelativePose::new(r2, -t),
    ])
}

/// Midpoint triangulation of one bearing pair under a pose; returns the
/// point in A's frame and the two ray depths, or `None` for rays within
/// [`MIN_TRIANGULATION_ANGLE`] of collinear.
fn midpoint_depths(
    pose: &RelativePose,
    a: &Vector3<f64>,
    b: &Vector3<f64>,
) -> Option<(Vector3<f64>, f64, f64)> {
    let r_inv = pose.rotation.inverse();
    let center_b = -(r_inv * pose.translation.into_inner());
    let d = r_inv * b;
    let ad = a.dot(&d);
    let denom = 1.0 - ad * ad;
    if denom < MIN_TRIANGULATION_ANGLE.sin().powi(2) {
        return None;
    }
    let ac = a.dot(&center_b);
    let dc = d.dot(&center_b);
    let s = (ac - ad * dc) / denom;
    let t = s * ad - dc;
    let point = 0.5 * (s * a + center_b + t * d);
    Some((point, s, t))
}

/// Resolves the four-fold decomposition ambiguity of an essential
/// matrix by counting correspondences whose midpoint triangulation puts
/// positive depth along both bearings, the spherical-camera analogue of
/// the positive-z test. A tie between the two best candidates (pure
/// rotation, or contaminated data) is reported, not guessed.
pub fn decompose_essential(
    e: &EssentialMatrix,
    c: &BearingCorrespondences,
) -> Result<RelativePose, PoseError> {
    let candidates = decomposition_candidates(e).ok_or(PoseError::AmbiguousDecomposition {
        votes: 0,
    })?;
    let mut scored: Vec<(usize, usize)> = candidates
        .iter()
        .enumerate()
        .map(|(idx, pose)| {
            let votes = c
                .bearings_a()
                .iter()
                .zip(c.bearings_b())
                .filter(|(a, b)| {
                    midpoint_depths(pose, a, b)
                        .map(|(_, s, t)| s > 0.0 && t > 0.0)
                        .unwrap_or(false)
                })
                .count();
            (votes, idx)
        })
        .collect();
    scored.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let (best_votes, best_idx) = scored[0];
    let (second_votes, _) = scored[1];
    if best_votes == 0 || best_votes == second_votes {
        return Err(PoseError::AmbiguousDecomposition { votes: best_votes });
    }
    Ok(candidates[best_idx])
}

/// Pose error in degrees: the larger of the rotation angle between the
/// rotations and the angle between translation directions.
pub fn pose_error(est: &RelativePose, gt: &RelativePose) -> f64 {
    let rot = (est.rotation * gt.rotation.inverse()).angle().to_degrees();
    let trans = est
        .translation
        .dot(&gt.translation)
        .clamp(-1.0, 1.0)
        .acos()
        .to_degrees();
    rot.max(trans)
}

/// AUC of the pose-error recall curve at each threshold, as a
/// percentage. The recall staircase over sorted errors integrates in
/// closed form to the mean of `1 - min(error, tau)/tau`, which is the
/// exact trapezoid value, so no binning is involved.
pub fn auc_at(errors: &[f64], thresholds: &[f64]) -> Result<Vec<f64>, PoseError> {
    if errors.is_empty() {
        return Err(PoseError::EmptyList);
    }
    Ok(thresholds
        .iter()
        .map(|&tau| {
            let mean: f64 = errors
                .iter()
                .map(|&e| 1.0 - e.min(tau).max(0.0) / tau)
                .sum::<f64>()
                / errors.len() as f64;
            100.0 * mean
        })
        .collect())
}

/// Midpoint triangulation of every correspondence under a pose, in A's
/// frame at the pose's unit translation scale. Pairs with non-positive
/// depth along either bearing or near-collinear rays are dropped.
pub fn triangulate_spherical(
    c: &BearingCorrespondences,
    pose: &RelativePose,
) -> Vec<Vector3<f64>> {
    triangulate_indexed(c, pose)
        .into_iter()
        .map(|(_, p)| p)
        .collect()
}

/// [`triangulate_spherical`] keeping each surviving point's index into
/// the correspondence set, so callers can look up pixels or colors.
pub fn triangulate_indexed(
    c: &BearingCorrespondences,
    pose: &RelativePose,
) -> Vec<(usize, Vector3<f64>)> {
    c.bearings_a()
        .iter()
        .zip(c.bearings_b())
        .enumerate()
        .filter_map(|(i, (a, b))| {
            let (point, s, t) = midpoint_depths(pose, a, b)?;
            (s > 0.0 && t > 0.0).then_some((i, point))
        })
        .collect()
}

/// Summed squared angular residuals of a model over correspondences;
/// the quantity [`refine_essential_nonlinear`] minimizes, exposed for
/// reporting.
pub fn epipolar_error_sum(e: &EssentialMatrix, c: &BearingCorrespondences) -> f64 {
    c.bearings_a()
        .iter()
        .zip(c.bearings_b())
        .map(|(a, b)| {
            let r = e.angular_residual(a, b);
            r * r
        })
        .sum()
}
