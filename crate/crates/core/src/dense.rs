//! Estimation from fully observed curves: sample covariance function,
//! variance factors, and the adaptive / universal thresholding estimators.

use crate::error::{Error, Result};
use crate::grid::{CovField, Grid, Surface};
use crate::threshold::{shrinkage_factor, DecisionNorm, ThresholdRule};
use rayon::prelude::*;
use std::sync::Arc;

/// Fully observed functional data: an n x p x R tensor on a common grid.
#[derive(Clone, Debug)]
pub struct DenseSample {
    n: usize,
    p: usize,
    grid: Arc<Grid>,
    /// Row-major values indexed by (i * p + j) * R + r.
    values: Vec<f64>,
}

impl DenseSample {
    pub fn new(n: usize, p: usize, grid: Arc<Grid>, values: Vec<f64>) -> Result<Self> {
        if n < 2 {
            return Err(Error::InsufficientData(format!("need n >= 2 subjects, got {n}")));
        }
        let r = grid.len();
        if values.len() != n * p * r {
            return Err(Error::ShapeMismatch(format!(
                "expected {} values for n={n}, p={p}, R={r}, got {}",
                n * p * r,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch("sample values must be finite".into()));
        }
        Ok(DenseSample { n, p, grid, values })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn r(&self) -> usize {
        self.grid.len()
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    /// Curve of subject i, variable j evaluated on the grid.
    #[inline]
    pub fn curve(&self, i: usize, j: usize) -> &[f64] {
        let r = self.grid.len();
        let start = (i * self.p + j) * r;
        &self.values[start..start + r]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Restrict to a subset of subjects (rows are copied in the given order).
    pub fn subset(&self, subjects: &[usize]) -> Result<DenseSample> {
        let r = self.grid.len();
        let mut values = Vec::with_capacity(subjects.len() * self.p * r);
        for &i in subjects {
            if i >= self.n {
                return Err(Error::ShapeMismatch(format!("subject index {i} out of range")));
            }
            let start = i * self.p * r;
            values.extend_from_slice(&self.values[start..start + self.p * r]);
        }
        DenseSample::new(subjects.len(), self.p, self.grid.clone(), values)
    }
}

/// Per-entry variance factors of the empirical covariance surfaces.
#[derive(Clone, Debug)]
pub struct VarianceField {
    field: CovField,
}

impl VarianceField {
    pub fn field(&self) -> &CovField {
        &self.field
    }

    pub fn p(&self) -> usize {
        self.field.p()
    }

    pub fn entry(&self, j: usize, k: usize) -> &Surface {
        self.field.entry(j, k)
    }
}

/// Centered copy of the sample: X_ij(u_r) - mean_j(u_r).
fn centered_values(data: &DenseSample) -> Vec<f64> {
    let (n, p, r) = (data.n(), data.p(), data.r());
    let mut mean = vec![0.0; p * r];
    for i in 0..n {
        for j in 0..p {
            let row = data.curve(i, j);
            let m = &mut mean[j * r..(j + 1) * r];
            for (acc, &v) in m.iter_mut().zip(row) {
                *acc += v;
            }
        }
    }
    let inv_n = 1.0 / n as f64;
    for v in &mut mean {
        *v *= inv_n;
    }
    let mut centered = vec![0.0; n * p * r];
    for i in 0..n {
        for j in 0..p {
            let row = data.curve(i, j);
            let m = &mean[j * r..(j + 1) * r];
            let out = &mut centered[(i * p + j) * r..(i * p + j + 1) * r];
            for ((o, &v), &mu) in out.iter_mut().zip(row).zip(m) {
                *o = v - mu;
            }
        }
    }
    centered
}

/// Sample covariance function with divisor n - 1; centering always uses the
/// empirical mean.
pub fn sample_cov(data: &DenseSample) -> Result<CovField> {
    let centered = centered_values(data);
    sample_cov_from_centered(data, &centered)
}

fn sample_cov_from_centered(data: &DenseSample, centered: &[f64]) -> Result<CovField> {
    let (n, p, r) = (data.n(), data.p(), data.r());
    if n < 2 {
        return Err(Error::InsufficientData("sample covariance needs n >= 2".into()));
    }
    let inv = 1.0 / (n - 1) as f64;
    let pairs: Vec<(usize, usize)> = CovField::upper_indices(p).collect();
    let upper: Vec<Surface> = pairs
        .par_iter()
        .map(|&(j, k)| {
            let mut acc = vec![0.0; r * r];
            for i in 0..n {
                let xj = &centered[(i * p + j) * r..(i * p + j + 1) * r];
                let xk = &centered[(i * p + k) * r..(i * p + k + 1) * r];
                for (r1, &a) in xj.iter().enumerate() {
                    let row = &mut acc[r1 * r..(r1 + 1) * r];
                    for (slot, &b) in row.iter_mut().zip(xk) {
                        *slot += a * b;
                    }
                }
            }
            for v in &mut acc {
                *v *= inv;
            }
            Surface::new(acc, data.grid().clone(), data.grid().clone()).unwrap()
        })
        .collect();
    CovField::from_upper(p, data.grid().clone(), upper)
}

/// Variance factors: the per-point empirical variance of the centered
/// products about the sample covariance, with divisor n.
pub fn variance_factors(data: &DenseSample, sigma_hat: &CovField) -> Result<VarianceField> {
    let (n, p, r) = (data.n(), data.p(), data.r());
    if sigma_hat.p() != p || sigma_hat.r() != r {
        return Err(Error::ShapeMismatch("covariance field does not match the sample".into()));
    }
    let centered = centered_values(data);
    let inv_n = 1.0 / n as f64;
    let pairs: Vec<(usize, usize)> = CovField::upper_indices(p).collect();
    let upper: Vec<Surface> = pairs
        .par_iter()
        .map(|&(j, k)| {
            let sig = sigma_hat.entry(j, k);
            let mut acc = vec![0.0; r * r];
            for i in 0..n {
                let xj = &centered[(i * p + j) * r..(i * p + j + 1) * r];
                let xk = &centered[(i * p + k) * r..(i * p + k + 1) * r];
                for (r1, &a) in xj.iter().enumerate() {
                    let row = &mut acc[r1 * r..(r1 + 1) * r];
                    for (r2, (slot, &b)) in row.iter_mut().zip(xk).enumerate() {
                        let resid = a * b - sig.get(r1, r2);
                        *slot += resid * resid;
                    }
                }
            }
            for v in &mut acc {
                *v *= inv_n;
            }
            Surface::new(acc, data.grid().clone(), data.grid().clone()).unwrap()
        })
        .collect();
    let field = CovField::from_upper(p, data.grid().clone(), upper)?;
    Ok(VarianceField { field })
}

/// Support mask over the p x p entries together with the norms that drove
/// each thresholding decision.
#[derive(Clone, Debug)]
pub struct SupportMask {
    p: usize,
    included: Vec<bool>,
    decision_norms: Vec<f64>,
}

impl SupportMask {
    pub fn p(&self) -> usize {
        self.p
    }

    #[inline]
    pub fn contains(&self, j: usize, k: usize) -> bool {
        self.included[j * self.p + k]
    }

    pub fn decision_norm(&self, j: usize, k: usize) -> f64 {
        self.decision_norms[j * self.p + k]
    }

    pub fn included(&self) -> &[bool] {
        &self.included
    }

    pub fn count_included(&self) -> usize {
        self.included.iter().filter(|&&b| b).count()
    }

    pub fn from_parts(p: usize, included: Vec<bool>, decision_norms: Vec<f64>) -> Self {
        assert_eq!(included.len(), p * p);
        assert_eq!(decision_norms.len(), p * p);
        SupportMask { p, included, decision_norms }
    }
}

/// A thresholded covariance estimate with its recovered support.
#[derive(Clone, Debug)]
pub struct ThresholdedEstimate {
    pub field: CovField,
    pub support: SupportMask,
}

/// Options shared by the adaptive and universal estimators.
#[derive(Clone, Copy, Debug)]
pub struct ThresholdOptions {
    pub rule: ThresholdRule,
    pub norm: DecisionNorm,
    /// Exempt diagonal entries from thresholding.
    pub keep_diagonal: bool,
}

impl ThresholdOptions {
    pub fn new(rule: ThresholdRule) -> Self {
        ThresholdOptions { rule, norm: DecisionNorm::default(), keep_diagonal: false }
    }
}

/// Relative floor applied to variance factors before standardization.
const VARIANCE_FLOOR_REL: f64 = 1e-12;

/// Threshold the standardized entries and de-standardize.
///
/// Each entry is thresholded as c * Sigma_jk where c is the shrinkage factor
/// evaluated at the norm of the standardized surface Sigma_jk / Theta_jk^{1/2};
/// the ratio surface is materialized only to take its norm, so lambda = 0
/// reproduces the input bit-for-bit.
pub fn adaptive_estimate(
    sigma_hat: &CovField,
    theta_hat: &VarianceField,
    lambda: f64,
    opts: ThresholdOptions,
) -> Result<ThresholdedEstimate> {
    if sigma_hat.p() != theta_hat.p() || sigma_hat.r() != theta_hat.field().r() {
        return Err(Error::ShapeMismatch("variance field does not match the covariance".into()));
    }
    threshold_field(sigma_hat, Some(theta_hat), lambda, opts)
}

/// One threshold level applied to the raw entries.
pub fn universal_estimate(
    sigma_hat: &CovField,
    lambda: f64,
    opts: ThresholdOptions,
) -> Result<ThresholdedEstimate> {
    threshold_field(sigma_hat, None, lambda, opts)
}

pub(crate) fn threshold_field(
    sigma_hat: &CovField,
    theta_hat: Option<&VarianceField>,
    lambda: f64,
    opts: ThresholdOptions,
) -> Result<ThresholdedEstimate> {
    opts.rule.validate()?;
    if !(lambda >= 0.0) {
        return Err(Error::InvalidRuleParameter(format!("lambda must be >= 0, got {lambda}")));
    }
    let p = sigma_hat.p();
    let grid = sigma_hat.grid().clone();
    let norms = decision_norms(sigma_hat, theta_hat, opts.norm)?;
    let pairs: Vec<(usize, usize)> = CovField::upper_indices(p).collect();
    let mut included = vec![false; p * p];
    let mut decision_norms = vec![0.0; p * p];
    let upper: Vec<Surface> = pairs
        .iter()
        .map(|&(j, k)| {
            let norm = norms[j * p + k];
            if opts.keep_diagonal && j == k {
                sigma_hat.entry(j, k).clone()
            } else {
                let c = shrinkage_factor(norm, lambda, opts.rule);
                sigma_hat.entry(j, k).scaled(c)
            }
        })
        .collect();
    for &(j, k) in &pairs {
        let norm = norms[j * p + k];
        let inc = (opts.keep_diagonal && j == k) || norm > lambda;
        included[j * p + k] = inc;
        included[k * p + j] = inc;
        decision_norms[j * p + k] = norm;
        decision_norms[k * p + j] = norm;
    }
    let field = CovField::from_upper(p, grid, upper)?;
    Ok(ThresholdedEstimate {
        field,
        support: SupportMask::from_parts(p, included, decision_norms),
    })
}

/// Norms of the (standardized) entries that drive the thresholding decision.
pub(crate) fn decision_norms(
    sigma_hat: &CovField,
    theta_hat: Option<&VarianceField>,
    norm: DecisionNorm,
) -> Result<Vec<f64>> {
    let p = sigma_hat.p();
    let r = sigma_hat.r();
    let mut out = vec![0.0; p * p];
    for (j, k) in CovField::upper_indices(p) {
        let sig = sigma_hat.entry(j, k);
        let value = match theta_hat {
            None => norm.eval(sig),
            Some(theta) => {
                let th = theta.entry(j, k);
                let floor = VARIANCE_FLOOR_REL
                    * th.values().iter().fold(0.0_f64, |m, &v| m.max(v));
                if floor <= 0.0 {
                    return Err(Error::DegenerateVariance(format!(
                        "variance factor for entry ({j}, {k}) is identically zero"
                    )));
                }
                let mut ratio = Surface::zero(sigma_hat.grid().clone());
                let vals = ratio.values_mut();
                for r1 in 0..r {
                    for r2 in 0..r {
                        let t = th.get(r1, r2).max(floor);
                        vals[r1 * r + r2] = sig.get(r1, r2) / t.sqrt();
                    }
                }
                norm.eval(&ratio)
            }
        };
        out[j * p + k] = value;
        out[k * p + j] = value;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{functional_frobenius, hs_norm, integrated_matrix};
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    fn grid(r: usize) -> Arc<Grid> {
        Arc::new(Grid::uniform(r))
    }

    fn constant_sample(n: usize, p: usize, r: usize, levels: &[f64]) -> DenseSample {
        // subject i, variable j takes the constant value levels[i * p + j]
        let g = grid(r);
        let mut values = vec![0.0; n * p * r];
        for i in 0..n {
            for j in 0..p {
                for t in 0..r {
                    values[(i * p + j) * r + t] = levels[i * p + j];
                }
            }
        }
        DenseSample::new(n, p, g, values).unwrap()
    }

    #[test]
    fn identical_rows_give_zero_field() {
        let data = constant_sample(4, 2, 7, &[1.0, -2.0, 1.0, -2.0, 1.0, -2.0, 1.0, -2.0]);
        let cov = sample_cov(&data).unwrap();
        for j in 0..2 {
            for k in 0..2 {
                assert!(cov.entry(j, k).values().iter().all(|&v| v == 0.0));
            }
        }
        let theta = variance_factors(&data, &cov).unwrap();
        assert!(theta.entry(0, 0).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_variance_of_one_two_three() {
        let data = constant_sample(3, 1, 5, &[1.0, 2.0, 3.0]);
        let cov = sample_cov(&data).unwrap();
        for &v in cov.entry(0, 0).values() {
            assert_relative_eq!(v, 1.0, epsilon = 1e-14);
        }
        // centered products are (1, 0, 1); residuals about 1 are (0, -1, 0);
        // mean of squares over n = 3 is 1/3
        let theta = variance_factors(&data, &cov).unwrap();
        for &v in theta.entry(0, 0).values() {
            assert_relative_eq!(v, 1.0 / 3.0, epsilon = 1e-14);
        }
    }

    /// Brute-force evaluation of the displayed covariance and variance
    /// formulas, independent of the production accumulation path.
    fn brute_force(data: &DenseSample) -> (Vec<f64>, Vec<f64>) {
        let (n, p, r) = (data.n(), data.p(), data.r());
        let mut mean = vec![0.0; p * r];
        for i in 0..n {
            for j in 0..p {
                for t in 0..r {
                    mean[j * r + t] += data.curve(i, j)[t] / n as f64;
                }
            }
        }
        let mut sigma = vec![0.0; p * p * r * r];
        let mut theta = vec![0.0; p * p * r * r];
        for j in 0..p {
            for k in 0..p {
                for r1 in 0..r {
                    for r2 in 0..r {
                        let mut s = 0.0;
                        for i in 0..n {
                            s += (data.curve(i, j)[r1] - mean[j * r + r1])
                                * (data.curve(i, k)[r2] - mean[k * r + r2]);
                        }
                        s /= (n - 1) as f64;
                        let idx = ((j * p + k) * r + r1) * r + r2;
                        sigma[idx] = s;
                        let mut t = 0.0;
                        for i in 0..n {
                            let prod = (data.curve(i, j)[r1] - mean[j * r + r1])
                                * (data.curve(i, k)[r2] - mean[k * r + r2]);
                            t += (prod - s) * (prod - s);
                        }
                        theta[idx] = t / n as f64;
                    }
                }
            }
        }
        (sigma, theta)
    }

    #[test]
    fn matches_brute_force_on_hand_tensor() {
        let g = grid(2);
        let values = vec![
            0.5, 1.0, /* i0 j0 */ 2.0, -1.0, /* i0 j1 */
            1.5, 0.0, /* i1 j0 */ 0.5, 0.5, /* i1 j1 */
            -1.0, 2.0, /* i2 j0 */ 1.0, 3.0, /* i2 j1 */
        ];
        let data = DenseSample::new(3, 2, g, values).unwrap();
        let cov = sample_cov(&data).unwrap();
        let theta = variance_factors(&data, &cov).unwrap();
        let (bs, bt) = brute_force(&data);
        for j in 0..2 {
            for k in 0..2 {
                for r1 in 0..2 {
                    for r2 in 0..2 {
                        let idx = ((j * 2 + k) * 2 + r1) * 2 + r2;
                        assert_relative_eq!(cov.entry(j, k).get(r1, r2), bs[idx], epsilon = 1e-13);
                        assert_relative_eq!(
                            theta.entry(j, k).get(r1, r2),
                            bt[idx],
                            epsilon = 1e-13
                        );
                    }
                }
            }
        }
    }

    fn random_sample(n: usize, p: usize, r: usize, seed: u64) -> DenseSample {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<f64> = (0..n * p * r).map(|_| rng.random_range(-1.0..1.0)).collect();
        DenseSample::new(n, p, grid(r), values).unwrap()
    }

    #[test]
    fn theta_scales_quartically_per_index() {
        let data = random_sample(6, 2, 4, 7);
        let cov = sample_cov(&data).unwrap();
        let theta = variance_factors(&data, &cov).unwrap();

        let mut scaled_values = data.values().to_vec();
        let r = data.r();
        for i in 0..data.n() {
            for t in 0..r {
                scaled_values[(i * 2) * r + t] *= 2.0;
            }
        }
        let scaled = DenseSample::new(6, 2, data.grid().clone(), scaled_values).unwrap();
        let cov2 = sample_cov(&scaled).unwrap();
        let theta2 = variance_factors(&scaled, &cov2).unwrap();

        for idx in 0..theta.entry(0, 1).values().len() {
            assert_relative_eq!(
                theta2.entry(0, 1).values()[idx],
                4.0 * theta.entry(0, 1).values()[idx],
                max_relative = 1e-12
            );
            assert_relative_eq!(
                theta2.entry(0, 0).values()[idx],
                16.0 * theta.entry(0, 0).values()[idx],
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn lambda_zero_is_identity() {
        let data = random_sample(8, 3, 5, 11);
        let cov = sample_cov(&data).unwrap();
        let theta = variance_factors(&data, &cov).unwrap();
        for rule in [ThresholdRule::Hard, ThresholdRule::Soft, ThresholdRule::Scad { a: 3.7 }] {
            let est = adaptive_estimate(&cov, &theta, 0.0, ThresholdOptions::new(rule)).unwrap();
            for j in 0..3 {
                for k in 0..3 {
                    assert_eq!(est.field.entry(j, k).values(), cov.entry(j, k).values());
                }
            }
            let uni = universal_estimate(&cov, 0.0, ThresholdOptions::new(rule)).unwrap();
            for j in 0..3 {
                for k in 0..3 {
                    assert_eq!(uni.field.entry(j, k).values(), cov.entry(j, k).values());
                }
            }
        }
    }

    #[test]
    fn small_standardized_norm_is_zeroed_and_excluded() {
        let g = grid(5);
        let sigma = CovField::from_upper(1, g.clone(), vec![Surface::constant(0.5, g.clone())])
            .unwrap();
        let theta = VarianceField {
            field: CovField::from_upper(1, g.clone(), vec![Surface::constant(1.0, g)]).unwrap(),
        };
        // standardized surface is constant 0.5 with HS norm 0.5 < lambda = 1
        let est =
            adaptive_estimate(&sigma, &theta, 1.0, ThresholdOptions::new(ThresholdRule::Soft))
                .unwrap();
        assert!(est.field.entry(0, 0).values().iter().all(|&v| v == 0.0));
        assert!(!est.support.contains(0, 0));
    }

    #[test]
    fn adaptive_equals_hand_composition() {
        let data = random_sample(10, 2, 6, 3);
        let cov = sample_cov(&data).unwrap();
        let theta = variance_factors(&data, &cov).unwrap();
        let lambda = 0.4;
        let rule = ThresholdRule::Soft;
        let est = adaptive_estimate(&cov, &theta, lambda, ThresholdOptions::new(rule)).unwrap();
        for (j, k) in CovField::upper_indices(2) {
            // standardize -> threshold -> de-standardize, done pointwise by hand
            let sig = cov.entry(j, k);
            let th = theta.entry(j, k);
            let floor = 1e-12 * th.values().iter().fold(0.0_f64, |m, &v| m.max(v));
            let mut standardized = Surface::zero(data.grid().clone());
            for r1 in 0..6 {
                for r2 in 0..6 {
                    standardized.values_mut()[r1 * 6 + r2] =
                        sig.get(r1, r2) / th.get(r1, r2).max(floor).sqrt();
                }
            }
            let shrunk =
                crate::threshold::apply_threshold(&standardized, lambda, rule).unwrap();
            for r1 in 0..6 {
                for r2 in 0..6 {
                    let expected =
                        th.get(r1, r2).max(floor).sqrt() * shrunk.get(r1, r2);
                    assert_relative_eq!(
                        est.field.entry(j, k).get(r1, r2),
                        expected,
                        max_relative = 1e-10,
                        epsilon = 1e-14
                    );
                }
            }
        }
    }

    #[test]
    fn universal_kills_everything_beyond_max_norm() {
        let data = random_sample(8, 2, 5, 9);
        let cov = sample_cov(&data).unwrap();
        let max_norm = (0..2)
            .flat_map(|j| (0..2).map(move |k| (j, k)))
            .map(|(j, k)| hs_norm(cov.entry(j, k)))
            .fold(0.0_f64, f64::max);
        let est =
            universal_estimate(&cov, max_norm * 1.001, ThresholdOptions::new(ThresholdRule::Soft))
                .unwrap();
        for j in 0..2 {
            for k in 0..2 {
                assert!(est.field.entry(j, k).values().iter().all(|&v| v == 0.0));
                assert!(!est.support.contains(j, k));
            }
        }
    }

    #[test]
    fn standardization_is_scale_equivariant() {
        let data = random_sample(12, 3, 5, 21);
        let cov = sample_cov(&data).unwrap();
        let theta = variance_factors(&data, &cov).unwrap();
        let base = decision_norms(&cov, Some(&theta), DecisionNorm::HilbertSchmidt).unwrap();

        let scales = [100.0, 0.01, 7.0];
        let r = data.r();
        let mut scaled_values = data.values().to_vec();
        for i in 0..data.n() {
            for j in 0..3 {
                for t in 0..r {
                    scaled_values[(i * 3 + j) * r + t] *= scales[j];
                }
            }
        }
        let scaled = DenseSample::new(12, 3, data.grid().clone(), scaled_values).unwrap();
        let cov2 = sample_cov(&scaled).unwrap();
        let theta2 = variance_factors(&scaled, &cov2).unwrap();
        let rescaled = decision_norms(&cov2, Some(&theta2), DecisionNorm::HilbertSchmidt).unwrap();
        for (a, b) in base.iter().zip(&rescaled) {
            assert_relative_eq!(a, b, max_relative = 1e-10);
        }
        // universal decisions are not scale invariant
        let uni = decision_norms(&cov, None, DecisionNorm::HilbertSchmidt).unwrap();
        let uni2 = decision_norms(&cov2, None, DecisionNorm::HilbertSchmidt).unwrap();
        assert!(uni.iter().zip(&uni2).any(|(a, b)| (a - b).abs() > 1e-6 * a.abs().max(1.0)));
    }

    #[test]
    fn integrated_matrix_is_near_psd() {
        let data = random_sample(30, 4, 7, 5);
        let cov = sample_cov(&data).unwrap();
        let m = integrated_matrix(&cov);
        let mat = DMatrix::from_row_slice(4, 4, &m);
        let sym = (&mat + mat.transpose()) * 0.5;
        let norm = sym.norm();
        let eigs = sym.symmetric_eigenvalues();
        assert!(eigs.iter().all(|&e| e >= -1e-8 * norm));
    }

    #[test]
    fn support_is_nested_in_lambda() {
        let data = random_sample(15, 4, 5, 13);
        let cov = sample_cov(&data).unwrap();
        let theta = variance_factors(&data, &cov).unwrap();
        let mut prev: Option<Vec<bool>> = None;
        for step in 0..12 {
            let lambda = step as f64 * 0.25;
            let est = adaptive_estimate(&cov, &theta, lambda, ThresholdOptions::new(ThresholdRule::Soft))
                .unwrap();
            let cur = est.support.included().to_vec();
            if let Some(ref before) = prev {
                for (b, c) in before.iter().zip(&cur) {
                    assert!(*b || !*c, "support grew when lambda increased");
                }
            }
            prev = Some(cur);
        }
    }

    #[test]
    fn subset_preserves_rows() {
        let data = random_sample(6, 2, 4, 99);
        let sub = data.subset(&[4, 1]).unwrap();
        assert_eq!(sub.n(), 2);
        assert_eq!(sub.curve(0, 1), data.curve(4, 1));
        assert_eq!(sub.curve(1, 0), data.curve(1, 0));
    }

    #[test]
    fn frobenius_of_estimate_decreases_with_thresholding_noise_free() {
        // thresholding a noisy field toward a sparse truth should not blow up
        let data = random_sample(40, 3, 5, 77);
        let cov = sample_cov(&data).unwrap();
        let theta = variance_factors(&data, &cov).unwrap();
        let est = adaptive_estimate(&cov, &theta, 0.5, ThresholdOptions::new(ThresholdRule::Soft))
            .unwrap();
        let d = functional_frobenius(&est.field, &cov).unwrap();
        assert!(d.is_finite());
    }
}
