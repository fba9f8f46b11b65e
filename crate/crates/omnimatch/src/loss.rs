//! Training objectives for dense spherical matching: an angular
//! regression loss on match directions, a cross-entropy loss on
//! certainty, and their weighted multi-level total, plus a
//! finite-difference gradient checker for validating any differentiable
//! component slotted into the pipeline.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::MatchField;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("loss inputs disagree in shape: {context}")]
    ShapeMismatch { context: String },
    #[error("per-level loss lists disagree: {want} regression vs {got} certainty levels")]
    LevelMismatch { want: usize, got: usize },
    #[error("invalid loss config: {reason}")]
    BadConfig { reason: String },
}

/// Predicted probabilities are clamped to `[PROBABILITY_CLAMP, 1 -
/// PROBABILITY_CLAMP]` before taking logs, so saturated predictions
/// produce large finite losses instead of infinities.
pub const PROBABILITY_CLAMP: f64 = 1e-7;

/// Default central-difference step for [`finite_diff_gradcheck`].
pub const DEFAULT_GRADCHECK_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Relative depth-consistency bound defining ground-truth certainty
    /// (see [`crate::frame::certainty_mask`]).
    pub alpha: f64,
    /// Weight of the certainty term in the total loss.
    pub lambda: f64,
    /// With the signed cosine (default), antipodal predictions cost 2.
    /// The absolute-value variant treats a direction and its antipode as
    /// equally correct, which zeroes the cost of the worst possible
    /// prediction; it exists for comparison only.
    pub signed_cosine: bool,
    /// Divide grid sums by their term counts. Sums match the objective
    /// as defined; means compare stably across resolutions.
    pub mean_reduction: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            lambda: 0.01,
            signed_cosine: true,
            mean_reduction: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(LossError::BadConfig {
                reason: format!("alpha must be finite and positive, got {}", self.alpha),
            });
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(LossError::BadConfig {
                reason: format!("lambda must be finite and non-negative, got {}", self.lambda),
            });
        }
        Ok(())
    }
}

/// Angular regression loss for one level: the sum over masked cells of
/// `1 - cos` of the angle between ground-truth and predicted match
/// directions. Directions must be unit-norm, which both producers
/// (ground-truth warps and refined match fields) guarantee.
pub fn regression_loss(
    gt: &MatchField,
    pred: &MatchField,
    mask: &[bool],
    cfg: &LossConfig,
) -> Result<f64, LossError> {
    if gt.spec() != pred.spec() {
        return Err(LossError::ShapeMismatch {
            context: format!(
                "gt grid {}x{} vs pred grid {}x{}",
                gt.spec().width(),
                gt.spec().height(),
                pred.spec().width(),
                pred.spec().height()
            ),
        });
    }
    if mask.len() != gt.spec().len() {
        return Err(LossError::ShapeMismatch {
            context: format!(
                "mask has {} entries for a grid of {}",
                mask.len(),
                gt.spec().len()
            ),
        });
    }
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for ((s, s_hat), &m) in gt.directions().iter().zip(pred.directions()).zip(mask) {
        if !m {
            continue;
        }
        let dot = s.dot(s_hat);
        sum += if cfg.signed_cosine {
            1.0 - dot
        } else {
            1.0 - dot.abs()
        };
        n += 1;
    }
    if cfg.mean_reduction && n > 0 {
        sum /= n as f64;
    }
    Ok(sum)
}

/// Certainty loss for one level: binary cross-entropy between the
/// ground-truth certainty mask and predicted certainty, summed over the
/// grid. The minimized quantity is the negative log-likelihood, so it is
/// non-negative and zero (up to the clamp) for perfect predictions.
pub fn certainty_loss(
    gt_mask: &[bool],
    pred_c: &[f64],
    cfg: &LossConfig,
) -> Result<f64, LossError> {
    if gt_mask.len() != pred_c.len() {
        return Err(LossError::ShapeMismatch {
            context: format!(
                "mask has {} entries, predictions {}",
                gt_mask.len(),
                pred_c.len()
            ),
        });
    }
    let mut sum = 0.0f64;
    for (&c, &c_hat) in gt_mask.iter().zip(pred_c) {
        let p = c_hat.clamp(PROBABILITY_CLAMP, 1.0 - PROBABILITY_CLAMP);
        sum -= if c { p.ln() } else { (1.0 - p).ln() };
    }
    if cfg.mean_reduction && !gt_mask.is_empty() {
        sum /= gt_mask.len() as f64;
    }
    Ok(sum)
}

/// Weighted total over levels: `sum_l (L_r^l + lambda * L_c^l)`.
pub fn total_loss(
    regression: &[f64],
    certainty: &[f64],
    cfg: &LossConfig,
) -> Result<f64, LossError> {
    if regression.len() != certainty.len() {
        return Err(LossError::LevelMismatch {
            want: regression.len(),
            got: certainty.len(),
        });
    }
    Ok(regression
        .iter()
        .zip(certainty)
        .map(|(r, c)| r + cfg.lambda * c)
        .sum())
}

/// Validates an analytic gradient against central differences of
/// `loss_fn` around `point`, returning the maximum relative error over
/// coordinates. The denominator floors at 1, so near-zero gradient
/// components are compared absolutely.
pub fn finite_diff_gradcheck<F>(loss_fn: F, point: &[f64], analytic: &[f64], h: f64) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    assert_eq!(
        point.len(),
        analytic.len(),
        "analytic gradient must cover every coordinate"
    );
    let mut x = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + h;
        let f_plus = loss_fn(&x);
        x[i] = orig - h;
        let f_minus = loss_fn(&x);
        x[i] = orig;
        let numeric = (f_plus - f_minus) / (2.0 * h);
        let err = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1.0);
        worst = worst.max(err);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::pixel_rays;
    use crate::sphere::{sph_to_cart, ErpGridSpec, SphericalCoord};
    use approx::assert_relative_eq;
    use nalgebra::{Rotation3, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn field_from(spec: ErpGridSpec, dirs: Vec<Vector3<f64>>) -> MatchField {
        let n = spec.len();
        MatchField::new(spec, dirs, vec![1.0; n]).unwrap()
    }

    fn random_unit(rng: &mut ChaCha12Rng) -> Vector3<f64> {
        loop {
            let v = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let n = v.norm();
            if n > 1e-3 {
                return v / n;
            }
        }
    }

    #[test]
    fn regression_zero_for_exact_prediction() {
        let spec = ErpGridSpec::new(8, 4).unwrap();
        let gt = field_from(spec, pixel_rays(&spec));
        let pred = field_from(spec, pixel_rays(&spec));
        let mask = vec![true; spec.len()];
        let loss = regression_loss(&gt, &pred, &mask, &LossConfig::default()).unwrap();
        assert!(loss.abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn regression_orthogonal_cell_costs_one() {
        let spec = ErpGridSpec::new(8, 4).unwrap();
        let mut gt_dirs = pixel_rays(&spec);
        let mut pred_dirs = pixel_rays(&spec);
        gt_dirs[5] = Vector3::new(1.0, 0.0, 0.0);
        pred_dirs[5] = Vector3::new(0.0, 1.0, 0.0);
        let mut mask = vec![false; spec.len()];
        mask[5] = true;
        let loss = regression_loss(
            &field_from(spec, gt_dirs),
            &field_from(spec, pred_dirs),
            &mask,
            &LossConfig::default(),
        )
        .unwrap();
        assert_eq!(loss, 1.0);
    }

    #[test]
    fn regression_antipodal_cell_costs_two_signed_zero_literal() {
        let spec = ErpGridSpec::new(8, 4).unwrap();
        let mut gt_dirs = pixel_rays(&spec);
        let mut pred_dirs = pixel_rays(&spec);
        gt_dirs[3] = Vector3::new(0.0, 0.0, 1.0);
        pred_dirs[3] = Vector3::new(0.0, 0.0, -1.0);
        let mut mask = vec![false; spec.len()];
        mask[3] = true;
        let gt = field_from(spec, gt_dirs);
        let pred = field_from(spec, pred_dirs);
        let signed = regression_loss(&gt, &pred, &mask, &LossConfig::default()).unwrap();
        assert_eq!(signed, 2.0);
        let literal = LossConfig {
            signed_cosine: false,
            ..LossConfig::default()
        };
        let unsigned = regression_loss(&gt, &pred, &mask, &literal).unwrap();
        assert_eq!(unsigned, 0.0);
    }

    #[test]
    fn regression_ignores_unmasked_cells() {
        let spec = ErpGridSpec::new(8, 4).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let gt_dirs: Vec<_> = (0..spec.len()).map(|_| random_unit(&mut rng)).collect();
        let pred_dirs: Vec<_> = (0..spec.len()).map(|_| random_unit(&mut rng)).collect();
        let mask: Vec<bool> = (0..spec.len()).map(|i| i % 3 == 0).collect();
        let gt = field_from(spec, gt_dirs.clone());
        let pred = field_from(spec, pred_dirs.clone());
        let loss = regression_loss(&gt, &pred, &mask, &LossConfig::default()).unwrap();
        let manual: f64 = gt_dirs
            .iter()
            .zip(&pred_dirs)
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|((s, p), _)| 1.0 - s.dot(p))
            .sum();
        assert_relative_eq!(loss, manual, epsilon = 1e-15);
        assert!(loss > 0.0);
    }

    #[test]
    fn regression_invariant_under_global_rotation() {
        let spec = ErpGridSpec::new(16, 8).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let gt_dirs: Vec<_> = (0..spec.len()).map(|_| random_unit(&mut rng)).collect();
        let pred_dirs: Vec<_> = (0..spec.len()).map(|_| random_unit(&mut rng)).collect();
        let mask: Vec<bool> = (0..spec.len()).map(|i| i % 2 == 0).collect();
        let rot = Rotation3::from_euler_angles(0.4, -1.1, 2.3);
        let base = regression_loss(
            &field_from(spec, gt_dirs.clone()),
            &field_from(spec, pred_dirs.clone()),
            &mask,
            &LossConfig::default(),
        )
        .unwrap();
        let rotated = regression_loss(
            &field_from(spec, gt_dirs.iter().map(|d| rot * d).collect()),
            &field_from(spec, pred_dirs.iter().map(|d| rot * d).collect()),
            &mask,
            &LossConfig::default(),
        )
        .unwrap();
        assert_relative_eq!(base, rotated, epsilon = 1e-12);
    }

    #[test]
    fn regression_rejects_shape_mismatch() {
        let a = ErpGridSpec::new(8, 4).unwrap();
        let b = ErpGridSpec::new(16, 8).unwrap();
        let gt = field_from(a, pixel_rays(&a));
        let pred = field_from(b, pixel_rays(&b));
        let err = regression_loss(&gt, &pred, &vec![true; a.len()], &LossConfig::default());
        assert!(matches!(err, Err(LossError::ShapeMismatch { .. })));
        let pred = field_from(a, pixel_rays(&a));
        let err = regression_loss(&gt, &pred, &[true; 3], &LossConfig::default());
        assert!(matches!(err, Err(LossError::ShapeMismatch { .. })));
    }

    #[test]
    fn certainty_near_zero_for_perfect_predictions() {
        let mask = [true, false, true, false];
        let pred = [1.0, 0.0, 1.0, 0.0];
        let loss = certainty_loss(&mask, &pred, &LossConfig::default()).unwrap();
        // Each term is -ln(1 - clamp), about 1e-7.
        assert!(loss > 0.0);
        assert!(loss < 1e-6, "loss {loss}");
    }

    #[test]
    fn certainty_half_prediction_costs_ln_two() {
        let loss = certainty_loss(&[true], &[0.5], &LossConfig::default()).unwrap();
        assert_relative_eq!(loss, std::f64::consts::LN_2, epsilon = 1e-15);
        let sym = certainty_loss(&[false], &[0.5], &LossConfig::default()).unwrap();
        assert_eq!(loss, sym);
    }

    #[test]
    fn certainty_minimized_at_ground_truth() {
        let cfg = LossConfig::default();
        for c in [false, true] {
            let at_truth =
                certainty_loss(&[c], &[if c { 1.0 } else { 0.0 }], &cfg).unwrap();
            for i in 1..100 {
                let c_hat = i as f64 / 100.0;
                if !(0.01..=0.99).contains(&c_hat) {
                    continue;
                }
                let loss = certainty_loss(&[c], &[c_hat], &cfg).unwrap();
                assert!(
                    loss > at_truth,
                    "c={c} c_hat={c_hat}: {loss} vs {at_truth}"
                );
            }
        }
    }

    #[test]
    fn total_weights_certainty_by_lambda() {
        let cfg = LossConfig::default();
        assert_relative_eq!(
            total_loss(&[1.0], &[2.0], &cfg).unwrap(),
            1.02,
            epsilon = 1e-15
        );
        let no_certainty = LossConfig {
            lambda: 0.0,
            ..cfg
        };
        assert_eq!(
            total_loss(&[1.0, 3.0], &[5.0, 7.0], &no_certainty).unwrap(),
            4.0
        );
        assert_eq!(total_loss(&[0.0, 0.0], &[0.0, 0.0], &cfg).unwrap(), 0.0);
        assert!(matches!(
            total_loss(&[1.0], &[1.0, 2.0], &cfg),
            Err(LossError::LevelMismatch { want: 1, got: 2 })
        ));
    }

    #[test]
    fn total_is_linear_in_lambda() {
        let r = [0.7, 2.1, 0.4];
        let c = [1.3, 0.2, 5.0];
        let at = |lambda: f64| {
            total_loss(
                &r,
                &c,
                &LossConfig {
                    lambda,
                    ..LossConfig::default()
                },
            )
            .unwrap()
        };
        let t0 = at(0.0);
        let t1 = at(1.0);
        let slope = t1 - t0;
        for lambda in [0.25, 0.5, 0.75] {
            assert_relative_eq!(at(lambda), t0 + slope * lambda, epsilon = 1e-12);
        }
    }

    #[test]
    fn mean_reduction_divides_by_term_count() {
        let spec = ErpGridSpec::new(8, 4).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let gt_dirs: Vec<_> = (0..spec.len()).map(|_| random_unit(&mut rng)).collect();
        let pred_dirs: Vec<_> = (0..spec.len()).map(|_| random_unit(&mut rng)).collect();
        let mask: Vec<bool> = (0..spec.len()).map(|i| i < 8).collect();
        let gt = field_from(spec, gt_dirs);
        let pred = field_from(spec, pred_dirs);
        let sum_cfg = LossConfig::default();
        let mean_cfg = LossConfig {
            mean_reduction: true,
            ..sum_cfg
        };
        let sum = regression_loss(&gt, &pred, &mask, &sum_cfg).unwrap();
        let mean = regression_loss(&gt, &pred, &mask, &mean_cfg).unwrap();
        assert_relative_eq!(mean, sum / 8.0, epsilon = 1e-15);

        let pred_c: Vec<f64> = (0..32).map(|i| (i as f64 + 0.5) / 32.0).collect();
        let gt_mask: Vec<bool> = (0..32).map(|i| i % 2 == 0).collect();
        let sum = certainty_loss(&gt_mask, &pred_c, &sum_cfg).unwrap();
        let mean = certainty_loss(&gt_mask, &pred_c, &mean_cfg).unwrap();
        assert_relative_eq!(mean, sum / 32.0, epsilon = 1e-15);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        assert!(LossConfig::default().validate().is_ok());
        let bad_alpha = LossConfig {
            alpha: 0.0,
            ..LossConfig::default()
        };
        assert!(matches!(
            bad_alpha.validate(),
            Err(LossError::BadConfig { .. })
        ));
        let bad_lambda = LossConfig {
            lambda: -0.5,
            ..LossConfig::default()
        };
        assert!(matches!(
            bad_lambda.validate(),
            Err(LossError::BadConfig { .. })
        ));
    }

    #[test]
    fn gradcheck_exact_on_quadratic() {
        let point = [0.3, -1.7, 2.4, 0.0];
        let f = |x: &[f64]| -> f64 {
            x.iter()
                .enumerate()
                .map(|(i, v)| (i + 1) as f64 * v * v)
                .sum()
        };
        let grad: Vec<f64> = point
            .iter()
            .enumerate()
            .map(|(i, v)| 2.0 * (i + 1) as f64 * v)
            .collect();
        let err = finite_diff_gradcheck(f, &point, &grad, DEFAULT_GRADCHECK_STEP);
        assert!(err <= 1e-8, "max relative error {err}");
    }

    #[test]
    fn gradcheck_regression_wrt_spherical_parameters() {
        let spec = ErpGridSpec::new(4, 2).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(19);
        let gt_dirs: Vec<_> = (0..spec.len()).map(|_| random_unit(&mut rng)).collect();
        let gt = field_from(spec, gt_dirs.clone());
        let mask = vec![true; spec.len()];
        let cfg = LossConfig::default();
        // Parameters: (theta, phi) per cell, away from the poles so the
        // parametrization is smooth.
        let point: Vec<f64> = (0..spec.len())
            .flat_map(|_| {
                [
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-1.2..1.2),
                ]
            })
            .collect();
        let build = |params: &[f64]| -> MatchField {
            let dirs: Vec<Vector3<f64>> = params
                .chunks(2)
                .map(|p| sph_to_cart(SphericalCoord::new(p[0], p[1])))
                .collect();
            field_from(spec, dirs)
        };
        let loss_fn = |params: &[f64]| -> f64 {
            regression_loss(&gt, &build(params), &mask, &cfg).unwrap()
        };
        // d/dtheta and d/dphi of the unit direction under the frame's
        // convention (x = sin t cos p, y = sin p, z = cos t cos p).
        let analytic: Vec<f64> = point
            .chunks(2)
            .zip(&gt_dirs)
            .flat_map(|(p, s)| {
                let (t, ph) = (p[0], p[1]);
                let d_theta =
                    Vector3::new(t.cos() * ph.cos(), 0.0, -t.sin() * ph.cos());
                let d_phi = Vector3::new(
                    -t.sin() * ph.sin(),
                    ph.cos(),
                    -t.cos() * ph.sin(),
                );
                [-s.dot(&d_theta), -s.dot(&d_phi)]
            })
            .collect();
        let err = finite_diff_gradcheck(loss_fn, &point, &analytic, DEFAULT_GRADCHECK_STEP);
        assert!(err <= 1e-4, "max relative error {err}");
    }

    #[test]
    fn gradcheck_certainty_wrt_predictions() {
        let gt_mask = [true, false, true, false, true];
        let point = [0.3, 0.6, 0.9, 0.15, 0.5];
        let cfg = LossConfig::default();
        let loss_fn =
            |c_hat: &[f64]| -> f64 { certainty_loss(&gt_mask, c_hat, &cfg).unwrap() };
        let analytic: Vec<f64> = gt_mask
            .iter()
            .zip(&point)
            .map(|(&c, &p)| if c { -1.0 / p } else { 1.0 / (1.0 - p) })
            .collect();
        let err = finite_diff_gradcheck(loss_fn, &point, &analytic, DEFAULT_GRADCHECK_STEP);
        assert!(err <= 1e-4, "max relative error {err}");
    }
}
