//! Embedded invariant suites: fast, deterministic checks of the
//! numerical core (coordinate round-trips, kernel health, regression
//! solve, loss gradients, essential-matrix recovery) runnable from the
//! installed binary to validate a build without the test harness.

use nalgebra::{DMatrix, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::Serialize;

use crate::loss::{certainty_loss, finite_diff_gradcheck, regression_loss, LossConfig};
use crate::matcher::{gp_posterior_mean, kernel_matrix, GpConfig};
use crate::pose::{eight_point_spherical, BearingCorrespondences, RelativePose};
use crate::pyramid::FeatureGrid;
use crate::sphere::{
    cart_to_sph, pixel_to_sph, sph_to_cart, sph_to_pixel, ErpGridSpec, PixelCoord,
    SphericalCoord,
};

/// One suite's outcome; `max_error <= tolerance` iff `passed`.
#[derive(Debug, Clone, Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl SuiteResult {
    fn new(name: &str, max_error: f64, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            max_error,
            tolerance,
            passed: max_error.is_finite() && max_error <= tolerance,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SelftestReport {
    pub suites: Vec<SuiteResult>,
}

impl SelftestReport {
    pub fn all_passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }
}

/// Latitudes this close to a pole are excluded from round-trips; the
/// azimuth is undefined in the limit.
const POLE_MARGIN: f64 = 1e-6;

/// Round-trip suite against an injectable spherical-to-Cartesian map,
/// so a deliberately broken transform can be shown to fail the suite.
pub fn round_trip_suite_with(
    to_cart: &dyn Fn(SphericalCoord) -> Vector3<f64>,
    n: usize,
    seed: u64,
) -> SuiteResult {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let spec = ErpGridSpec::new(512, 256).expect("static spec");
    let mut max_err = 0.0f64;
    for _ in 0..n {
        let theta = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let phi_lim = std::f64::consts::FRAC_PI_2 - POLE_MARGIN;
        let phi = rng.random_range(-phi_lim..phi_lim);
        let u = SphericalCoord::new(theta, phi);

        let s = to_cart(u);
        let back = match cart_to_sph(&s) {
            Ok(b) => b,
            Err(_) => return SuiteResult::new("round_trip", f64::INFINITY, 1e-9),
        };
        max_err = max_err
            .max((back.theta - u.theta).abs())
            .max((back.phi - u.phi).abs());

        let p = sph_to_pixel(u, &spec);
        let u2 = pixel_to_sph(p, &spec);
        max_err = max_err
            .max((u2.theta - u.theta).abs())
            .max((u2.phi - u.phi).abs());

        // Pixel lattice round-trip stays on the lattice.
        let col = rng.random_range(0..spec.width()) as f64;
        let row = rng.random_range(0..spec.height()) as f64;
        let lat = PixelCoord::new(col, row);
        let back_p = sph_to_pixel(pixel_to_sph(lat, &spec), &spec);
        max_err = max_err
            .max((back_p.col - lat.col).abs())
            .max((back_p.row - lat.row).abs());
    }
    SuiteResult::new("round_trip", max_err, 1e-9)
}

pub fn round_trip_suite(n: usize, seed: u64) -> SuiteResult {
    round_trip_suite_with(&sph_to_cart, n, seed)
}

fn random_grid(cells: usize, dim: usize, rng: &mut ChaCha12Rng) -> FeatureGrid {
    let mut data = vec![0.0f32; cells * dim];
    for v in data.iter_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    // L2-normalize per descriptor, matching extractor output.
    for c in 0..cells {
        let d = &mut data[c * dim..(c + 1) * dim];
        let norm = d.iter().map(|v| v * v).sum::<f32>().sqrt();
        if norm > 0.0 {
            for v in d.iter_mut() {
                *v /= norm;
            }
        }
    }
    FeatureGrid::new(1, 1, cells, dim, data)
}

/// Kernel health on random descriptor sets: symmetry, unit diagonal,
/// range (0, 1], and positive definiteness of `K + sigma_n^2 I`. The
/// tolerance is 1e-5, not machine precision: the normalization guard
/// epsilon shifts the diagonal of unit descriptors by about
/// `tau * epsilon / 2` (2.5e-6 at the defaults).
pub fn kernel_suite(instances: usize, cells: usize, seed: u64) -> SuiteResult {
    let cfg = GpConfig::default();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut max_err = 0.0f64;
    for _ in 0..instances {
        let g = random_grid(cells, 16, &mut rng);
        let k = match kernel_matrix(&g, &g, &cfg) {
            Ok(k) => k,
            Err(_) => return SuiteResult::new("kernel", f64::INFINITY, 1e-5),
        };
        for i in 0..cells {
            max_err = max_err.max((k[(i, i)] - 1.0).abs());
            for j in 0..cells {
                max_err = max_err.max((k[(i, j)] - k[(j, i)]).abs());
                if k[(i, j)] <= 0.0 || k[(i, j)] > 1.0 + 1e-12 {
                    max_err = f64::INFINITY;
                }
            }
        }
        let mut noisy = k;
        for i in 0..cells {
            noisy[(i, i)] += cfg.sigma_n * cfg.sigma_n;
        }
        if noisy.cholesky().is_none() {
            max_err = f64::INFINITY;
        }
    }
    SuiteResult::new("kernel", max_err, 1e-5)
}

/// Regression solve versus a naive dense inverse on a small instance.
pub fn gp_solve_suite(cells: usize, seed: u64) -> SuiteResult {
    let cfg = GpConfig::default();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let f_a = random_grid(cells, 16, &mut rng);
    let f_b = random_grid(cells, 16, &mut rng);
    let dim = 8;
    let chi = DMatrix::from_fn(cells, dim, |_, _| rng.random_range(-1.0..1.0));

    let mu = match gp_posterior_mean(&f_a, &f_b, &chi, &cfg) {
        Ok(mu) => mu,
        Err(_) => return SuiteResult::new("gp_solve", f64::INFINITY, 1e-8),
    };

    let k_ab = kernel_matrix(&f_a, &f_b, &cfg).expect("same dims");
    let mut k_bb = kernel_matrix(&f_b, &f_b, &cfg).expect("same dims");
    for i in 0..cells {
        k_bb[(i, i)] += cfg.sigma_n * cfg.sigma_n;
    }
    let inv = k_bb.try_inverse().expect("SPD matrix inverts");
    let oracle = k_ab * inv * chi;

    let max_err = (mu - oracle).abs().max();
    SuiteResult::new("gp_solve", max_err, 1e-8)
}

/// Finite-difference check of the loss gradients.
pub fn gradcheck_suite(seed: u64) -> SuiteResult {
    let cfg = LossConfig::default();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let spec = ErpGridSpec::new(8, 4).unwrap();
    let gt_dirs: Vec<Vector3<f64>> = (0..spec.len())
        .map(|_| {
            Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
            .normalize()
        })
        .collect();
    let gt = crate::frame::MatchField::new(spec, gt_dirs, vec![1.0; spec.len()]).unwrap();
    let mask = vec![true; spec.len()];

    // Perturbed prediction parametrized by one cell's (theta, phi).
    let cell = 3usize;
    let point = [0.7f64, -0.4f64];
    let build = |params: &[f64]| {
        let mut dirs = gt.directions().to_vec();
        dirs[cell] = sph_to_cart(SphericalCoord::new(params[0], params[1]));
        crate::frame::MatchField::new(spec, dirs, vec![1.0; spec.len()]).unwrap()
    };
    let loss_fn = |params: &[f64]| {
        regression_loss(&gt, &build(params), &mask, &cfg).expect("shapes agree")
    };
    let (t, p) = (point[0], point[1]);
    let s = gt.directions()[cell];
    let d_theta = Vector3::new(t.cos() * p.cos(), 0.0, -t.sin() * p.cos());
    let d_phi = Vector3::new(-t.sin() * p.sin(), p.cos(), -t.cos() * p.sin());
    let analytic = [-s.dot(&d_theta), -s.dot(&d_phi)];
    let mut max_err = finite_diff_gradcheck(&loss_fn, &point, &analytic, 1e-5);

    // Certainty loss wrt one predicted probability.
    let gt_mask = [true, false, true, true];
    let probe = 1usize;
    let base = [0.8f64, 0.3, 0.9, 0.6];
    let c_loss = |params: &[f64]| {
        let mut pred = base.to_vec();
        pred[probe] = params[0];
        certainty_loss(&gt_mask, &pred, &cfg).expect("lengths agree")
    };
    let p0 = base[probe];
    let analytic_c = [1.0 / (1.0 - p0)];
    max_err = max_err.max(finite_diff_gradcheck(&c_loss, &[p0], &analytic_c, 1e-5));

    SuiteResult::new("gradcheck", max_err, 1e-4)
}

/// Eight-point recovery of a known essential matrix from clean bearings.
pub fn eight_point_suite(seed: u64) -> SuiteResult {
    let pose = RelativePose::new(
        Rotation3::from_euler_angles(0.15, -0.2, 0.3),
        Vector3::new(0.5, -0.4, 0.7),
    );
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut bearings_a = Vec::new();
    let mut bearings_b = Vec::new();
    while bearings_a.len() < 48 {
        let p = Vector3::new(
            rng.random_range(-4.0..4.0),
            rng.random_range(-4.0..4.0),
            rng.random_range(-4.0..4.0),
        );
        if p.norm() < 1.0 {
            continue;
        }
        let in_b = pose.rotation() * p + pose.translation().into_inner();
        if in_b.norm() < 1e-3 {
            continue;
        }
        bearings_a.push(p.normalize());
        bearings_b.push(in_b.normalize());
    }
    let n = bearings_a.len();
    let c = BearingCorrespondences::new(bearings_a, bearings_b, vec![(0, 0); n], vec![1.0; n])
        .expect("unit bearings");
    let max_err = match eight_point_spherical(&c) {
        Ok(e) => {
            let gt = pose.essential();
            let diff = (e.matrix() - gt.matrix()).norm();
            let sum = (e.matrix() + gt.matrix()).norm();
            diff.min(sum)
        }
        Err(_) => f64::INFINITY,
    };
    SuiteResult::new("eight_point", max_err, 1e-6)
}

/// Every suite at its default size; the binary's `selftest` command.
pub fn run_all() -> SelftestReport {
    SelftestReport {
        suites: vec![
            round_trip_suite(100_000, 2),
            kernel_suite(20, 30, 3),
            gp_solve_suite(20, 4),
            gradcheck_suite(5),
            eight_point_suite(6),
        ],
    }
}
