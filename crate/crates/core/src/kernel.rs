//! Univariate smoothing kernels.

use serde::{Deserialize, Serialize};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Kernel evaluations are cut off at |x|/h > TRUNCATION_RADIUS; the Gaussian
/// tail beyond 5 standard deviations is below 4e-6 relative mass.
pub const TRUNCATION_RADIUS: f64 = 5.0;

/// Univariate kernel used by the local-linear smoothers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Kernel {
    /// K(x) = exp(-x^2/2) / sqrt(2 pi), truncated at |x| > 5.
    Gaussian,
    /// K(x) = 0.75 (1 - x^2) for |x| <= 1.
    Epanechnikov,
}

impl Kernel {
    /// Scaled evaluation K_h(x) = K(x/h) / h.
    #[inline]
    pub fn eval_scaled(self, h: f64, x: f64) -> f64 {
        let u = x / h;
        match self {
            Kernel::Gaussian => {
                if u.abs() > TRUNCATION_RADIUS {
                    0.0
                } else {
                    (-0.5 * u * u).exp() * INV_SQRT_2PI / h
                }
            }
            Kernel::Epanechnikov => {
                if u.abs() > 1.0 {
                    0.0
                } else {
                    0.75 * (1.0 - u * u) / h
                }
            }
        }
    }
}

impl Default for Kernel {
    fn default() -> Self {
        Kernel::Gaussian
    }
}
