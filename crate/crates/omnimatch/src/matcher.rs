//! Global coarse matching: random spherical positional embeddings, an
//! exponential cosine-similarity kernel over descriptors, Gaussian-process
//! regression of B's embedded coordinates onto A's cells, and a decoder
//! that inverts the embedding back to a direction per cell.
//!
//! The decoder is a contract; the built-in implementation is an analytic
//! nearest-neighbor inversion with deterministic tie-breaking.

use nalgebra::{DMatrix, DVector, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{pixel_rays, MatchField};
use crate::pyramid::{FeatureGrid, FeaturePyramid};
use crate::sphere::ErpGridSpec;

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("SPD solve failed after jitter escalation up to {max_jitter:e}")]
    SolveFailure { max_jitter: f64 },
    #[error("shape mismatch: {context}")]
    DimensionMismatch { context: String },
}

/// Kernel and noise hyperparameters of the regression.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GpConfig {
    /// Kernel temperature.
    pub tau: f64,
    /// Guard added inside the normalization square root, making zero
    /// descriptors safe.
    pub epsilon: f64,
    /// Measurement noise standard deviation.
    pub sigma_n: f64,
    /// Positional embedding dimensionality.
    pub embed_dim: usize,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self {
            tau: 5.0,
            epsilon: 1e-6,
            sigma_n: 0.1,
            embed_dim: 64,
        }
    }
}

/// Fixed random projection defining the positional embedding
/// `chi(S) = cos(W S + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingParams {
    weights: DMatrix<f64>,
    bias: DVector<f64>,
    seed: u64,
}

pub const DEFAULT_EMBEDDING_SEED: u64 = 42;

/// Standard deviation of the embedding weight initialization.
pub const EMBEDDING_WEIGHT_SCALE: f64 = 2.0;

impl EmbeddingParams {
    /// Draws `W ~ N(0, 2^2)` entries (row-major) followed by
    /// `b ~ U[0, 2pi)` from a seeded generator. The nonzero bias breaks the
    /// antipodal degeneracy `cos(W S) = cos(-W S)`.
    pub fn seeded(embed_dim: usize, seed: u64) -> Self {
        assert!(embed_dim > 0);
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, EMBEDDING_WEIGHT_SCALE).expect("valid scale");
        let weights = DMatrix::from_fn(embed_dim, 3, |_, _| normal.sample(&mut rng));
        let uniform = Uniform::new(0.0, std::f64::consts::TAU).expect("valid range");
        let bias = DVector::from_fn(embed_dim, |_, _| uniform.sample(&mut rng));
        Self {
            weights,
            bias,
            seed,
        }
    }

    /// Explicit parameters, mainly for tests.
    pub fn from_parts(weights: DMatrix<f64>, bias: DVector<f64>) -> Self {
        assert_eq!(weights.ncols(), 3);
        assert_eq!(weights.nrows(), bias.len());
        Self {
            weights,
            bias,
            seed: 0,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Spectral norm bound of `W` (Frobenius), the Lipschitz constant of
    /// the embedding on the sphere.
    pub fn lipschitz_bound(&self) -> f64 {
        self.weights.norm()
    }
}

/// Embeds unit directions: row i of the result is `cos(W S_i + b)`.
pub fn spherical_embedding(dirs: &[Vector3<f64>], params: &EmbeddingParams) -> DMatrix<f64> {
    let d = params.embed_dim();
    let mut out = DMatrix::zeros(dirs.len(), d);
    for (i, s) in dirs.iter().enumerate() {
        for j in 0..d {
            let row = params.weights.row(j);
            let v = row[0] * s.x + row[1] * s.y + row[2] * s.z + params.bias[j];
            out[(i, j)] = v.cos();
        }
    }
    out
}

/// Embedded coordinates of every cell center of a grid, plus the centers
/// themselves, cached for decoding.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    spec: ErpGridSpec,
    chi: DMatrix<f64>,
    centers: Vec<Vector3<f64>>,
}

impl EmbeddingTable {
    pub fn build(spec: ErpGridSpec, params: &EmbeddingParams) -> Self {
        let centers = pixel_rays(&spec);
        let chi = spherical_embedding(&centers, params);
        Self {
            spec,
            chi,
            centers,
        }
    }

    pub fn spec(&self) -> &ErpGridSpec {
        &self.spec
    }

    pub fn chi(&self) -> &DMatrix<f64> {
        &self.chi
    }

    pub fn centers(&self) -> &[Vector3<f64>] {
        &self.centers
    }
}

/// One kernel entry: `exp(tau * (guarded_cos_sim - 1))`. Zero descriptors
/// fall back to similarity 0, hence `exp(-tau)`.
pub fn kernel_entry(a: &[f32], b: &[f32], cfg: &GpConfig) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let sim = dot / (na * nb + cfg.epsilon).sqrt();
    (cfg.tau * (sim - 1.0)).exp()
}

/// Dense kernel matrix between two descriptor grids (rows: cells of `a`).
pub fn kernel_matrix(
    a: &FeatureGrid,
    b: &FeatureGrid,
    cfg: &GpConfig,
) -> Result<DMatrix<f64>, MatchError> {
    if a.dim() != b.dim() {
        return Err(MatchError::DimensionMismatch {
            context: format!("descriptor dims {} vs {}", a.dim(), b.dim()),
        });
    }
    let mut k = DMatrix::zeros(a.len(), b.len());
    for i in 0..a.len() {
        for j in 0..b.len() {
            k[(i, j)] = kernel_entry(a.descriptor_at(i), b.descriptor_at(j), cfg);
        }
    }
    Ok(k)
}

/// Diagonal jitters tried, in order, when the SPD factorization fails.
pub const JITTER_LADDER: [f64; 3] = [1e-8, 1e-6, 1e-4];

/// Solves `(m + jitter I) x = rhs` by Cholesky, escalating jitter from 0
/// through [`JITTER_LADDER`].
pub(crate) fn solve_spd(
    m: &DMatrix<f64>,
    rhs: &DMatrix<f64>,
) -> Result<DMatrix<f64>, MatchError> {
    let mut jitters = vec![0.0];
    jitters.extend(JITTER_LADDER);
    for jitter in jitters {
        let mut attempt = m.clone();
        for i in 0..attempt.nrows() {
            attempt[(i, i)] += jitter;
        }
        if let Some(chol) = attempt.cholesky() {
            return Ok(chol.solve(rhs));
        }
    }
    Err(MatchError::SolveFailure {
        max_jitter: *JITTER_LADDER.last().expect("nonempty ladder"),
    })
}

/// Predicted embedded coordinates for frame A's coarse cells.
#[derive(Debug, Clone)]
pub struct PosteriorMean {
    spec: ErpGridSpec,
    /// Row i: predicted embedding of A cell i (row-major cells).
    values: DMatrix<f64>,
}

impl PosteriorMean {
    pub fn new(spec: ErpGridSpec, values: DMatrix<f64>) -> Result<Self, MatchError> {
        if values.nrows() != spec.len() {
            return Err(MatchError::DimensionMismatch {
                context: format!("{} rows for {} cells", values.nrows(), spec.len()),
            });
        }
        Ok(Self { spec, values })
    }

    pub fn spec(&self) -> &ErpGridSpec {
        &self.spec
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }
}

/// GP regression of B's embedded coordinates onto A's cells:
/// `mu = K_AB (K_BB + sigma_n^2 I)^-1 chi_B`.
pub fn gp_posterior_mean(
    f_a: &FeatureGrid,
    f_b: &FeatureGrid,
    chi_b: &DMatrix<f64>,
    cfg: &GpConfig,
) -> Result<DMatrix<f64>, MatchError> {
    if chi_b.nrows() != f_b.len() {
        return Err(MatchError::DimensionMismatch {
            context: format!("chi rows {} vs {} B cells", chi_b.nrows(), f_b.len()),
        });
    }
    let k_ab = kernel_matrix(f_a, f_b, cfg)?;
    let mut k_bb = kernel_matrix(f_b, f_b, cfg)?;
    let noise = cfg.sigma_n * cfg.sigma_n;
    for i in 0..k_bb.nrows() {
        k_bb[(i, i)] += noise;
    }
    let x = solve_spd(&k_bb, chi_b)?;
    Ok(k_ab * x)
}

/// Decoder contract: posterior mean (+ A's coarse descriptors, which a
/// learned decoder would consume) to a coarse match field.
pub trait CoarseDecoder {
    fn decode(
        &self,
        mu: &PosteriorMean,
        f_a: &FeatureGrid,
        table: &EmbeddingTable,
    ) -> Result<MatchField, MatchError>;
}

/// Analytic decoder: nearest embedding-table row per cell (Euclidean), the
/// matched cell's center as direction, and a best-versus-second-best margin
/// as certainty. Ties break toward the lower linear index. Ignores `f_a`
/// (a deliberate simplification of the decoder contract).
#[derive(Debug, Clone, Copy, Default)]
pub struct EmbeddingInversionDecoder;

impl CoarseDecoder for EmbeddingInversionDecoder {
    fn decode(
        &self,
        mu: &PosteriorMean,
        _f_a: &FeatureGrid,
        table: &EmbeddingTable,
    ) -> Result<MatchField, MatchError> {
        let n_b = table.chi().nrows();
        let dim = table.chi().ncols();
        if mu.values().ncols() != dim {
            return Err(MatchError::DimensionMismatch {
                context: format!("mu dim {} vs table dim {dim}", mu.values().ncols()),
            });
        }
        let mut directions = Vec::with_capacity(mu.spec().len());
        let mut certainty = Vec::with_capacity(mu.spec().len());
        for i in 0..mu.values().nrows() {
            let mut best = (f64::INFINITY, 0usize);
            let mut second = f64::INFINITY;
            for j in 0..n_b {
                let mut d2 = 0.0;
                for c in 0..dim {
                    let diff = mu.values()[(i, c)] - table.chi()[(j, c)];
                    d2 += diff * diff;
                }
                if d2 < best.0 {
                    second = best.0;
                    best = (d2, j);
                } else if d2 < second {
                    second = d2;
                }
            }
            directions.push(table.centers()[best.1]);
            let c = if second.is_finite() {
                // Margin of Euclidean distances through a logistic map;
                // equal distances give 0, a clear winner approaches 1.
                let margin = second.sqrt() - best.0.sqrt();
                (margin / 2.0).tanh() as f32
            } else {
                1.0
            };
            certainty.push(c.clamp(0.0, 1.0));
        }
        MatchField::new(*mu.spec(), directions, certainty).map_err(|e| {
            MatchError::DimensionMismatch {
                context: e.to_string(),
            }
        })
    }
}

/// Shape-checks and runs a decoder.
pub fn decode_coarse(
    mu: &PosteriorMean,
    f_a: &FeatureGrid,
    table: &EmbeddingTable,
    decoder: &dyn CoarseDecoder,
) -> Result<MatchField, MatchError> {
    if mu.values().nrows() != f_a.len() {
        return Err(MatchError::DimensionMismatch {
            context: format!("mu rows {} vs {} A cells", mu.values().nrows(), f_a.len()),
        });
    }
    decoder.decode(mu, f_a, table)
}

/// Stride of the grid the global matcher operates on.
pub const COARSE_STRIDE: usize = 32;

/// Full coarse stage for a pair of pyramids: embed B's stride-32 cells,
/// regress, decode.
pub fn match_coarse(
    pyr_a: &FeaturePyramid,
    pyr_b: &FeaturePyramid,
    params: &EmbeddingParams,
    cfg: &GpConfig,
    decoder: &dyn CoarseDecoder,
) -> Result<MatchField, MatchError> {
    let f_a = pyr_a.level(COARSE_STRIDE);
    let f_b = pyr_b.level(COARSE_STRIDE);
    let table = EmbeddingTable::build(pyr_b.spec(COARSE_STRIDE), params);
    let mu = gp_posterior_mean(f_a, f_b, table.chi(), cfg)?;
    let mu = PosteriorMean::new(pyr_a.spec(COARSE_STRIDE), mu)?;
    decode_coarse(&mu, f_a, &table, decoder)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit_grid(descriptors: Vec<Vec<f32>>, width: usize, height: usize) -> FeatureGrid {
        let dim = descriptors[0].len();
        let data: Vec<f32> = descriptors.into_iter().flatten().collect();
        FeatureGrid::new(32, height, width, dim, data)
    }

    fn cfg() -> GpConfig {
        GpConfig::default()
    }

    #[test]
    fn kernel_unit_diagonal_and_range() {
        let c = cfg();
        let f = [0.6f32, 0.8, 0.0];
        let k = kernel_entry(&f, &f, &c);
        assert_relative_eq!(k, 1.0, epsilon = 1e-5);

        let a = [1.0f32, 0.0];
        let b = [0.0f32, 1.0];
        assert_relative_eq!(kernel_entry(&a, &b, &c), (-5.0f64).exp(), epsilon = 1e-6);

        let zero = [0.0f32, 0.0];
        assert_relative_eq!(kernel_entry(&zero, &zero, &c), (-5.0f64).exp(), epsilon = 1e-12);

        // Anti-aligned descriptors give the minimum exp(-2 tau); everything
        // lies in (0, 1] up to the guard.
        let neg = [-1.0f32, 0.0];
        assert_relative_eq!(kernel_entry(&a, &neg, &c), (-10.0f64).exp(), epsilon = 1e-8);
    }

    #[test]
    fn kernel_matrix_symmetric_psd() {
        use rand::Rng;
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let n = 50;
        let descs: Vec<Vec<f32>> = (0..n)
            .map(|_| (0..9).map(|_| rng.random_range(-1.0f32..1.0)).collect())
            .collect();
        let g = unit_grid(descs, 10, 5);
        let c = cfg();
        let k = kernel_matrix(&g, &g, &c).unwrap();
        for i in 0..n {
            for j in 0..n {
                assert!(k[(i, j)] > 0.0 && k[(i, j)] <= 1.0 + 1e-12);
                assert_relative_eq!(k[(i, j)], k[(j, i)], epsilon = 1e-14);
            }
        }
        let mut shifted = k.clone();
        for i in 0..n {
            shifted[(i, i)] += c.sigma_n * c.sigma_n;
        }
        let eig = shifted.symmetric_eigen();
        assert!(eig.eigenvalues.iter().all(|&e| e > 0.0));
    }

    #[test]
    fn solve_spd_jitter_and_failure() {
        // Rank-one matrix: plain Cholesky fails, jitter rescues it.
        let ones = DMatrix::from_element(3, 3, 1.0);
        let rhs = DMatrix::identity(3, 3);
        assert!(solve_spd(&ones, &rhs).is_ok());

        // Indefinite matrix: fails at every jitter level.
        let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let rhs = DMatrix::identity(2, 2);
        assert!(matches!(
            solve_spd(&indefinite, &rhs),
            Err(MatchError::SolveFailure { .. })
        ));
    }

    #[test]
    fn posterior_interpolates_when_noise_vanishes() {
        // Distinct near-orthogonal descriptors, f_A = f_B: with tiny noise
        // the regression returns chi_B itself.
        let mut descs = Vec::new();
        for i in 0..8 {
            let mut d = vec![0.0f32; 8];
            d[i] = 1.0;
            descs.push(d);
        }
        let g = unit_grid(descs, 4, 2);
        let spec = ErpGridSpec::new(4, 2).unwrap();
        let params = EmbeddingParams::seeded(16, DEFAULT_EMBEDDING_SEED);
        let chi = spherical_embedding(&pixel_rays(&spec), &params);
        let mut c = cfg();
        c.sigma_n = 1e-4;
        let mu = gp_posterior_mean(&g, &g, &chi, &c).unwrap();
        for i in 0..chi.nrows() {
            for j in 0..chi.ncols() {
                assert!(
                    (mu[(i, j)] - chi[(i, j)]).abs() <= 1e-3,
                    "({i},{j}): {} vs {}",
                    mu[(i, j)],
                    chi[(i, j)]
                );
            }
        }
    }

    #[test]
    fn posterior_scalar_closed_form() {
        // Single-cell grids with identical unit descriptors:
        // mu = chi / (1 + sigma_n^2) up to the epsilon guard.
        let g = unit_grid(vec![vec![1.0, 0.0]], 1, 1);
        let chi = DMatrix::from_row_slice(1, 3, &[0.3, -0.7, 0.2]);
        let mu = gp_posterior_mean(&g, &g, &chi, &cfg()).unwrap();
        for j in 0..3 {
            assert_relative_eq!(mu[(0, j)], chi[(0, j)] / 1.01, epsilon = 1e-5);
        }
    }

    #[test]
    fn gp_agrees_with_gaussian_elimination_oracle() {
        use rand::Rng;
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let n = 20;
        let dim = 6;
        let descs_b: Vec<Vec<f32>> = (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect())
            .collect();
        let descs_a: Vec<Vec<f32>> = (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect())
            .collect();
        let g_a = unit_grid(descs_a, 5, 4);
        let g_b = unit_grid(descs_b, 5, 4);
        let c = cfg();
        let chi = DMatrix::from_fn(n, 4, |i, j| ((i * 7 + j * 3) as f64 * 0.37).sin());

        let mu = gp_posterior_mean(&g_a, &g_b, &chi, &c).unwrap();

        // Independent path: rebuild the system and run naive Gaussian
        // elimination with partial pivoting.
        let k_ab = kernel_matrix(&g_a, &g_b, &c).unwrap();
        let mut k_bb = kernel_matrix(&g_b, &g_b, &c).unwrap();
        for i in 0..n {
            k_bb[(i, i)] += c.sigma_n * c.sigma_n;
        }
        let x = gaussian_elimination(&k_bb, &chi);
        let expected = k_ab * x;
        for i in 0..n {
            for j in 0..4 {
                assert!(
                    (mu[(i, j)] - expected[(i, j)]).abs() < 1e-8,
                    "({i},{j}): {} vs {}",
                    mu[(i, j)],
                    expected[(i, j)]
                );
            }
        }
    }

    fn gaussian_elimination(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
        let n = a.nrows();
        let m = b.ncols();
        let mut aug = DMatrix::zeros(n, n + m);
        aug.view_mut((0, 0), (n, n)).copy_from(a);
        aug.view_mut((0, n), (n, m)).copy_from(b);
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| {
                    aug[(i, col)]
                        .abs()
                        .partial_cmp(&aug[(j, col)].abs())
                        .unwrap()
                })
                .unwrap();
            aug.swap_rows(col, pivot);
            let p = aug[(col, col)];
            for row in col + 1..n {
                let factor = aug[(row, col)] / p;
                for k in col..n + m {
                    aug[(row, k)] -= factor * aug[(col, k)];
                }
            }
        }
        let mut x = DMatrix::zeros(n, m);
        for rhs in 0..m {
            for row in (0..n).rev() {
                let mut acc = aug[(row, n + rhs)];
                for k in row + 1..n {
                    acc -= aug[(row, k)] * x[(k, rhs)];
                }
                x[(row, rhs)] = acc / aug[(row, row)];
            }
        }
        x
    }

    #[test]
    fn embedding_constant_when_weights_zero() {
        let params = EmbeddingParams::from_parts(DMatrix::zeros(4, 3), DVector::zeros(4));
        let dirs = vec![Vector3::new(0.0, 0.0, 1.0), Vector3::new(1.0, 0.0, 0.0)];
        let chi = spherical_embedding(&dirs, &params);
        assert!(chi.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn embedding_antipodal_parity_without_bias() {
        let params = EmbeddingParams::from_parts(
            DMatrix::from_row_slice(2, 3, &[1.0, -2.0, 0.5, 0.3, 0.9, -1.1]),
            DVector::zeros(2),
        );
        let s = Vector3::new(0.6, -0.64, 0.48).normalize();
        let chi = spherical_embedding(&[s, -s], &params);
        for j in 0..2 {
            assert_relative_eq!(chi[(0, j)], chi[(1, j)], epsilon = 1e-14);
        }
        // The seeded bias breaks the degeneracy.
        let seeded = EmbeddingParams::seeded(16, DEFAULT_EMBEDDING_SEED);
        let chi = spherical_embedding(&[s, -s], &seeded);
        let diff: f64 = (0..16).map(|j| (chi[(0, j)] - chi[(1, j)]).abs()).sum();
        assert!(diff > 1e-3);
    }

    #[test]
    fn embedding_is_lipschitz_across_seam() {
        let spec = ErpGridSpec::new(20, 10).unwrap();
        let params = EmbeddingParams::seeded(32, DEFAULT_EMBEDDING_SEED);
        let centers = pixel_rays(&spec);
        let chi = spherical_embedding(&centers, &params);
        let bound = params.lipschitz_bound();
        for row in 0..10 {
            let (i, j) = (row * 20, row * 20 + 19); // col 0 and col W-1
            let chord = (centers[i] - centers[j]).norm();
            let mut dist = 0.0;
            for c in 0..32 {
                let d = chi[(i, c)] - chi[(j, c)];
                dist += d * d;
            }
            assert!(
                dist.sqrt() <= bound * chord + 1e-12,
                "row {row}: {} > {}",
                dist.sqrt(),
                bound * chord
            );
        }
    }

    #[test]
    fn embedding_seeding_is_reproducible() {
        let a = EmbeddingParams::seeded(64, 42);
        let b = EmbeddingParams::seeded(64, 42);
        assert_eq!(a, b);
        let c = EmbeddingParams::seeded(64, 43);
        assert_ne!(a, c);
    }

    #[test]
    fn decoder_inverts_exact_embeddings() {
        let spec = ErpGridSpec::new(4, 2).unwrap();
        let params = EmbeddingParams::seeded(16, DEFAULT_EMBEDDING_SEED);
        let table = EmbeddingTable::build(spec, &params);
        let mu = PosteriorMean::new(spec, table.chi().clone()).unwrap();
        let f_a = unit_grid(vec![vec![1.0f32]; 8], 4, 2);
        let field = decode_coarse(&mu, &f_a, &table, &EmbeddingInversionDecoder).unwrap();
        let rays = pixel_rays(&spec);
        for i in 0..8 {
            assert_relative_eq!(field.directions()[i], rays[i], epsilon = 1e-12);
            assert!(field.certainty()[i] > 0.0);
        }
    }

    #[test]
    fn decoder_ties_break_to_lower_index() {
        // Duplicate embedding rows: the decoder must pick the first.
        let spec = ErpGridSpec::new(4, 2).unwrap();
        let chi = DMatrix::from_fn(8, 4, |i, j| {
            if i >= 4 {
                ((i - 4) * 4 + j) as f64
            } else {
                (i * 4 + j) as f64
            }
        });
        let centers = pixel_rays(&spec);
        let table = EmbeddingTable {
            spec,
            chi: chi.clone(),
            centers: centers.clone(),
        };
        let mu = PosteriorMean::new(spec, chi.rows(4, 4).into_owned().resize_vertically(8, 0.0))
            .unwrap();
        // Rows 0..4 of mu equal chi rows 4..8 which duplicate rows 0..4;
        // ties must resolve to indices 0..4.
        let f_a = unit_grid(vec![vec![1.0f32]; 8], 4, 2);
        let field = decode_coarse(&mu, &f_a, &table, &EmbeddingInversionDecoder).unwrap();
        for i in 0..4 {
            assert_relative_eq!(field.directions()[i], centers[i], epsilon = 1e-12);
            // Exact tie: margin 0, certainty 0.
            assert_eq!(field.certainty()[i], 0.0);
        }
    }

    #[test]
    fn decoder_matches_brute_force_scan() {
        use rand::Rng;
        let spec = ErpGridSpec::new(8, 4).unwrap();
        let params = EmbeddingParams::seeded(24, 5);
        let table = EmbeddingTable::build(spec, &params);
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mu_values = DMatrix::from_fn(32, 24, |_, _| rng.random_range(-1.0..1.0));
        let mu = PosteriorMean::new(spec, mu_values.clone()).unwrap();
        let f_a = unit_grid(vec![vec![1.0f32]; 32], 8, 4);
        let field = decode_coarse(&mu, &f_a, &table, &EmbeddingInversionDecoder).unwrap();

        for i in 0..32 {
            let mut best = (f64::INFINITY, usize::MAX);
            for j in 0..32 {
                let mut d2 = 0.0;
                for c in 0..24 {
                    let d = mu_values[(i, c)] - table.chi()[(j, c)];
                    d2 += d * d;
                }
                if d2 < best.0 {
                    best = (d2, j);
                }
            }
            assert_relative_eq!(
                field.directions()[i],
                table.centers()[best.1],
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn certainty_single_cell_is_one() {
        let spec = ErpGridSpec::new(2, 1).unwrap();
        let params = EmbeddingParams::seeded(8, 1);
        let centers = vec![pixel_rays(&spec)[0]];
        let chi = spherical_embedding(&centers, &params);
        let table = EmbeddingTable {
            spec,
            chi: chi.clone(),
            centers,
        };
        let mu = PosteriorMean::new(spec, chi.clone().resize_vertically(2, 0.0)).unwrap();
        let f_a = unit_grid(vec![vec![1.0f32]; 2], 2, 1);
        let field = decode_coarse(&mu, &f_a, &table, &EmbeddingInversionDecoder).unwrap();
        assert_eq!(field.certainty()[0], 1.0);
    }
}
