//! Data-generating processes for the simulation experiments: Fourier-basis
//! Gaussian functional data with block covariance structure, plus the
//! partial-observation sampler with measurement noise.

use crate::dense::DenseSample;
use crate::error::{Error, Result};
use crate::grid::{CovField, Grid, Surface};
use crate::smooth::{PartialSample, SubjectBlock};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

pub const BASIS_DIM: usize = 50;

/// Which block covariance structure to generate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Model {
    /// Block banded: omega_jk = (1 - |j-k|/10)_+ on the first half,
    /// 4 I(j = k) on the second half.
    Model1,
    /// Block sparse without structure: random symmetric B on the first half
    /// shifted to be positive definite, 4 I(j = k) on the second half.
    Model2,
}

impl std::str::FromStr for Model {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" | "model1" => Ok(Model::Model1),
            "2" | "model2" => Ok(Model::Model2),
            other => Err(Error::Parse(format!("unknown model '{other}', expected 1 or 2"))),
        }
    }
}

/// Configuration of the partial-observation sampler.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PartialConfig {
    /// Observations per subject (common across variables).
    pub points_per_subject: usize,
    /// Standard deviation of the additive measurement error.
    pub noise_sd: f64,
    /// Place observation locations on the output grid instead of sampling
    /// them uniformly; used to cross-check against the fully observed path.
    pub on_grid: bool,
}

impl PartialConfig {
    pub fn new(points_per_subject: usize) -> Self {
        PartialConfig { points_per_subject, noise_sd: 0.5, on_grid: false }
    }
}

/// Simulation design.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimSpec {
    pub model: Model,
    pub n: usize,
    pub p: usize,
    pub r: usize,
    pub seed: u64,
    pub partial: Option<PartialConfig>,
}

impl SimSpec {
    pub fn new(model: Model, n: usize, p: usize, r: usize, seed: u64) -> Self {
        SimSpec { model, n, p, r, seed, partial: None }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p % 2 != 0 {
            return Err(Error::Config(format!("p must be even, got {}", self.p)));
        }
        if self.n < 2 || self.r < 2 {
            return Err(Error::Config("need n >= 2 and r >= 2".into()));
        }
        if let Some(pc) = &self.partial {
            if pc.points_per_subject < 2 {
                return Err(Error::Config(
                    "partial sampling needs at least 2 points per subject".into(),
                ));
            }
            if pc.noise_sd < 0.0 {
                return Err(Error::Config("noise_sd must be >= 0".into()));
            }
        }
        Ok(())
    }
}

/// Scalar block multipliers omega_jk; the implied coefficient covariance is
/// omega_jk * diag((b+1)^{-2}).
#[derive(Clone, Debug)]
pub struct OmegaSpec {
    p: usize,
    omega: Vec<f64>,
}

impl OmegaSpec {
    pub fn p(&self) -> usize {
        self.p
    }

    #[inline]
    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.omega[j * self.p + k]
    }

    pub fn values(&self) -> &[f64] {
        &self.omega
    }

    /// Basis-coefficient decay d_b = (b + 1)^{-2} for b = 0..49.
    pub fn decay(b: usize) -> f64 {
        let k = (b + 1) as f64;
        1.0 / (k * k)
    }
}

const SCORE_STREAM: u64 = 1;
const LOCATION_STREAM: u64 = 2;
const NOISE_STREAM: u64 = 3;
const OMEGA_STREAM: u64 = 4;

/// Build the block multiplier matrix for the requested model.
pub fn build_omega(spec: &SimSpec) -> Result<OmegaSpec> {
    spec.validate()?;
    let p = spec.p;
    let half = p / 2;
    let mut omega = vec![0.0; p * p];
    match spec.model {
        Model::Model1 => {
            for j in 0..half {
                for k in 0..half {
                    let d = (j as f64 - k as f64).abs();
                    omega[j * p + k] = (1.0 - d / 10.0).max(0.0);
                }
            }
        }
        Model::Model2 => {
            // B is drawn on the upper triangle with zero diagonal, mirrored,
            // then shifted by max(-lambda_min(B), 0) + 0.01
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(OMEGA_STREAM);
            let mut b = DMatrix::<f64>::zeros(half, half);
            for j in 0..half {
                for k in j + 1..half {
                    let v = if rng.random::<f64>() < 0.2 {
                        rng.random_range(0.3..0.8)
                    } else {
                        0.0
                    };
                    b[(j, k)] = v;
                    b[(k, j)] = v;
                }
            }
            let lambda_min = b
                .clone()
                .symmetric_eigenvalues()
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min);
            let shift = (-lambda_min).max(0.0) + 0.01;
            for j in 0..half {
                for k in 0..half {
                    omega[j * p + k] = b[(j, k)] + if j == k { shift } else { 0.0 };
                }
            }
        }
    }
    for j in half..p {
        omega[j * p + j] = 4.0;
    }
    Ok(OmegaSpec { p, omega })
}

/// Orthonormal Fourier system on [0, 1]: s_0 = 1, s_{2m-1} = sqrt(2) sin(2 pi m u),
/// s_{2m} = sqrt(2) cos(2 pi m u).
pub fn fourier_basis(b: usize, u: f64) -> f64 {
    if b == 0 {
        return 1.0;
    }
    let m = ((b + 1) / 2) as f64;
    let arg = 2.0 * std::f64::consts::PI * m * u;
    let sqrt2 = std::f64::consts::SQRT_2;
    if b % 2 == 1 {
        sqrt2 * arg.sin()
    } else {
        sqrt2 * arg.cos()
    }
}

/// The shared covariance kernel kappa(u, v) = sum_b d_b s_b(u) s_b(v); each
/// true covariance entry is omega_jk * kappa.
fn truth_kernel(grid: &Arc<Grid>) -> Surface {
    let pts = grid.points();
    let r = pts.len();
    let mut basis = vec![0.0; BASIS_DIM * r];
    for b in 0..BASIS_DIM {
        for (t, &u) in pts.iter().enumerate() {
            basis[b * r + t] = fourier_basis(b, u);
        }
    }
    let mut values = vec![0.0; r * r];
    for r1 in 0..r {
        for r2 in 0..r {
            let mut acc = 0.0;
            for b in 0..BASIS_DIM {
                acc += OmegaSpec::decay(b) * basis[b * r + r1] * basis[b * r + r2];
            }
            values[r1 * r + r2] = acc;
        }
    }
    Surface::new(values, grid.clone(), grid.clone()).unwrap()
}

/// Exact covariance field implied by an omega matrix on a grid.
pub fn truth_field(omega: &OmegaSpec, grid: &Arc<Grid>) -> CovField {
    let kappa = truth_kernel(grid);
    let p = omega.p();
    let upper: Vec<Surface> = CovField::upper_indices(p)
        .map(|(j, k)| kappa.scaled(omega.get(j, k)))
        .collect();
    CovField::from_upper(p, grid.clone(), upper).unwrap()
}

/// Cholesky factor of omega, with a tiny jitter retry for numerically
/// semidefinite inputs.
fn omega_cholesky(omega: &OmegaSpec) -> Result<DMatrix<f64>> {
    let p = omega.p();
    let m = DMatrix::from_row_slice(p, p, omega.values());
    for &j in &[0.0, 1e-10, 1e-8] {
        let shifted = &m + DMatrix::identity(p, p) * j;
        if let Some(chol) = shifted.cholesky() {
            return Ok(chol.l());
        }
    }
    Err(Error::Config("omega matrix is not positive semidefinite".into()))
}

/// Basis scores for all subjects: theta[i][j * BASIS_DIM + b].
///
/// Scores are drawn per subject from a dedicated RNG stream so that the full
/// and partial samplers agree on the latent curves for a common seed.
fn draw_scores(spec: &SimSpec, chol: &DMatrix<f64>) -> Vec<Vec<f64>> {
    let p = spec.p;
    (0..spec.n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(i as u64));
            rng.set_stream(SCORE_STREAM);
            let mut z = vec![0.0; p * BASIS_DIM];
            for v in &mut z {
                *v = StandardNormal.sample(&mut rng);
            }
            // theta_{j,b} = d_b^{1/2} * sum_{j'} L[j][j'] z_{j',b}
            let mut theta = vec![0.0; p * BASIS_DIM];
            for j in 0..p {
                for b in 0..BASIS_DIM {
                    let mut acc = 0.0;
                    for jp in 0..=j {
                        let l = chol[(j, jp)];
                        if l != 0.0 {
                            acc += l * z[jp * BASIS_DIM + b];
                        }
                    }
                    theta[j * BASIS_DIM + b] = OmegaSpec::decay(b).sqrt() * acc;
                }
            }
            theta
        })
        .collect()
}

fn eval_curve(theta: &[f64], j: usize, u: f64) -> f64 {
    let coef = &theta[j * BASIS_DIM..(j + 1) * BASIS_DIM];
    let mut acc = 0.0;
    for (b, &c) in coef.iter().enumerate() {
        acc += c * fourier_basis(b, u);
    }
    acc
}

/// Fully observed sample together with the exact truth on the same grid.
pub fn simulate_full(spec: &SimSpec) -> Result<(DenseSample, CovField)> {
    spec.validate()?;
    let omega = build_omega(spec)?;
    let grid = Arc::new(Grid::uniform(spec.r));
    let chol = omega_cholesky(&omega)?;
    let scores = draw_scores(spec, &chol);
    let r = spec.r;
    let pts = grid.points().to_vec();
    let mut values = vec![0.0; spec.n * spec.p * r];
    for (i, theta) in scores.iter().enumerate() {
        for j in 0..spec.p {
            for (t, &u) in pts.iter().enumerate() {
                values[(i * spec.p + j) * r + t] = eval_curve(theta, j, u);
            }
        }
    }
    let data = DenseSample::new(spec.n, spec.p, grid.clone(), values)?;
    Ok((data, truth_field(&omega, &grid)))
}

/// Partially observed noisy sample in the simplified layout (shared
/// locations within each subject) plus the exact truth.
pub fn simulate_partial(spec: &SimSpec) -> Result<(PartialSample, CovField)> {
    spec.validate()?;
    let pc = spec
        .partial
        .clone()
        .ok_or_else(|| Error::Config("partial sampling config missing".into()))?;
    let omega = build_omega(spec)?;
    let grid = Arc::new(Grid::uniform(spec.r));
    let chol = omega_cholesky(&omega)?;
    let scores = draw_scores(spec, &chol);
    let mut subjects = Vec::with_capacity(spec.n);
    for (i, theta) in scores.iter().enumerate() {
        let locations: Vec<f64> = if pc.on_grid {
            if pc.points_per_subject != spec.r {
                return Err(Error::Config(
                    "on-grid sampling requires points_per_subject == r".into(),
                ));
            }
            grid.points().to_vec()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(i as u64));
            rng.set_stream(LOCATION_STREAM);
            let mut locs: Vec<f64> =
                (0..pc.points_per_subject).map(|_| rng.random::<f64>()).collect();
            locs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            locs
        };
        let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(i as u64));
        noise_rng.set_stream(NOISE_STREAM);
        let l = locations.len();
        let mut block_values = vec![0.0; spec.p * l];
        for j in 0..spec.p {
            for (t, &u) in locations.iter().enumerate() {
                let eps: f64 = if pc.noise_sd > 0.0 {
                    let z: f64 = StandardNormal.sample(&mut noise_rng);
                    pc.noise_sd * z
                } else {
                    0.0
                };
                block_values[j * l + t] = eval_curve(theta, j, u) + eps;
            }
        }
        subjects.push(SubjectBlock::new(locations, block_values, spec.p)?);
    }
    let data = PartialSample::simplified(spec.p, subjects)?;
    Ok((data, truth_field(&omega, &grid)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{functional_frobenius, hs_norm, integrated_matrix};

    #[test]
    fn model1_block_values() {
        let spec = SimSpec::new(Model::Model1, 4, 20, 11, 1);
        let omega = build_omega(&spec).unwrap();
        for j in 0..10 {
            assert_eq!(omega.get(j, j), 1.0);
        }
        assert!((omega.get(0, 9) - 0.1).abs() < 1e-15);
        // second half is 4 I
        for j in 10..20 {
            assert_eq!(omega.get(j, j), 4.0);
            for k in 10..20 {
                if j != k {
                    assert_eq!(omega.get(j, k), 0.0);
                }
            }
        }
        // |j - k| >= 10 vanishes inside the first block for larger p
        let spec = SimSpec::new(Model::Model1, 4, 30, 11, 1);
        let omega = build_omega(&spec).unwrap();
        assert_eq!(omega.get(0, 10), 0.0);
        assert_eq!(omega.get(0, 11), 0.0);
    }

    #[test]
    fn model2_is_positive_definite() {
        for seed in 0..5 {
            let spec = SimSpec::new(Model::Model2, 4, 30, 11, seed);
            let omega = build_omega(&spec).unwrap();
            let m = DMatrix::from_row_slice(30, 30, omega.values());
            let lambda_min = m
                .symmetric_eigenvalues()
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min);
            assert!(lambda_min >= 0.01 - 1e-10, "seed {seed}: lambda_min = {lambda_min}");
        }
    }

    #[test]
    fn fourier_basis_is_orthonormal_under_quadrature() {
        let grid = Grid::uniform(201);
        let w = grid.quad_weights();
        let pts = grid.points();
        for a in 0..10 {
            for b in a..10 {
                let dot: f64 = pts
                    .iter()
                    .enumerate()
                    .map(|(t, &u)| w[t] * fourier_basis(a, u) * fourier_basis(b, u))
                    .sum();
                let expected = if a == b { 1.0 } else { 0.0 };
                assert!(
                    (dot - expected).abs() < 1e-3,
                    "basis ({a}, {b}) quadrature product {dot}"
                );
            }
        }
    }

    #[test]
    fn truth_support_matches_omega() {
        let spec = SimSpec::new(Model::Model1, 4, 24, 15, 3);
        let omega = build_omega(&spec).unwrap();
        let grid = Arc::new(Grid::uniform(15));
        let truth = truth_field(&omega, &grid);
        for j in 0..24 {
            for k in 0..24 {
                let norm = hs_norm(truth.entry(j, k));
                if omega.get(j, k) == 0.0 {
                    assert_eq!(norm, 0.0);
                } else {
                    assert!(norm > 0.0);
                }
            }
        }
    }

    #[test]
    fn sample_moments_approach_truth() {
        let spec = SimSpec::new(Model::Model1, 2000, 2, 21, 42);
        let (data, truth) = simulate_full(&spec).unwrap();
        let cov = crate::dense::sample_cov(&data).unwrap();
        let zero = CovField::zero(2, truth.grid().clone());
        let dist = functional_frobenius(&cov, &truth).unwrap();
        let scale = functional_frobenius(&truth, &zero).unwrap();
        assert!(dist <= 0.1 * scale, "relative error {}", dist / scale);
    }

    #[test]
    fn reproducible_and_seed_sensitive() {
        let spec = SimSpec::new(Model::Model1, 5, 4, 9, 7);
        let (a, _) = simulate_full(&spec).unwrap();
        let (b, _) = simulate_full(&spec).unwrap();
        assert_eq!(a.values(), b.values());
        let spec2 = SimSpec::new(Model::Model1, 5, 4, 9, 8);
        let (c, _) = simulate_full(&spec2).unwrap();
        assert_ne!(a.values(), c.values());
    }

    #[test]
    fn truth_is_integrated_psd() {
        let spec = SimSpec::new(Model::Model2, 4, 20, 11, 5);
        let omega = build_omega(&spec).unwrap();
        let grid = Arc::new(Grid::uniform(11));
        let truth = truth_field(&omega, &grid);
        let m = integrated_matrix(&truth);
        let mat = DMatrix::from_row_slice(20, 20, &m);
        let sym = (&mat + mat.transpose()) * 0.5;
        let eigs = sym.symmetric_eigenvalues();
        let norm = sym.norm();
        assert!(eigs.iter().all(|&e| e >= -1e-8 * norm));
    }

    #[test]
    fn partial_degenerates_to_full_on_grid() {
        let mut spec = SimSpec::new(Model::Model1, 4, 4, 13, 11);
        spec.partial = Some(PartialConfig {
            points_per_subject: 13,
            noise_sd: 0.0,
            on_grid: true,
        });
        let (partial, _) = simulate_partial(&spec).unwrap();
        let (full, _) = simulate_full(&spec).unwrap();
        for i in 0..4 {
            let (locs, _) = partial.subject_channel(i, 0).unwrap();
            assert_eq!(locs, full.grid().points());
            for j in 0..4 {
                let (_, z) = partial.subject_channel(i, j).unwrap();
                assert_eq!(z, full.curve(i, j));
            }
        }
    }

    #[test]
    fn noise_variance_matches_config() {
        let mut spec = SimSpec::new(Model::Model1, 200, 2, 21, 17);
        spec.partial = Some(PartialConfig {
            points_per_subject: 21,
            noise_sd: 0.5,
            on_grid: true,
        });
        let (partial, _) = simulate_partial(&spec).unwrap();
        let (full, _) = simulate_full(&spec).unwrap();
        let mut sq = 0.0;
        let mut count = 0usize;
        for i in 0..200 {
            for j in 0..2 {
                let (_, z) = partial.subject_channel(i, j).unwrap();
                for (t, &v) in z.iter().enumerate() {
                    let e = v - full.curve(i, j)[t];
                    sq += e * e;
                    count += 1;
                }
            }
        }
        let var = sq / count as f64;
        assert!((var - 0.25).abs() <= 0.02, "noise variance {var}");
    }

    #[test]
    fn partial_layout_shares_locations() {
        let mut spec = SimSpec::new(Model::Model1, 6, 4, 21, 23);
        spec.partial = Some(PartialConfig::new(11));
        let (partial, _) = simulate_partial(&spec).unwrap();
        assert_eq!(partial.n(), 6);
        for i in 0..6 {
            let (locs0, _) = partial.subject_channel(i, 0).unwrap();
            assert_eq!(locs0.len(), 11);
            assert!(locs0.windows(2).all(|w| w[0] <= w[1]));
            for j in 1..4 {
                let (locs, _) = partial.subject_channel(i, j).unwrap();
                assert_eq!(locs0, locs);
            }
        }
    }
}
