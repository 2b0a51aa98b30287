//! Functional thresholding rules acting on surfaces through a global norm.
//!
//! Every rule reduces to a scalar shrinkage factor c(||z||, lambda) in [0, 1]
//! applied to the whole surface, with c = 0 whenever ||z|| <= lambda. Keeping
//! the factor explicit makes thresholded-out entries genuine zero surfaces and
//! makes lambda = 0 an exact identity.

use crate::error::{Error, Result};
use crate::grid::{hs_norm, sup_norm, Surface};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Thresholding rule family.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ThresholdRule {
    Hard,
    Soft,
    /// Smoothly clipped absolute deviation; requires a > 2.
    Scad { a: f64 },
    /// Adaptive lasso; requires eta >= 0.
    AdaptiveLasso { eta: f64 },
}

impl ThresholdRule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ThresholdRule::Scad { a } if !(a > 2.0) => {
                Err(Error::InvalidRuleParameter(format!("scad requires a > 2, got {a}")))
            }
            ThresholdRule::AdaptiveLasso { eta } if !(eta >= 0.0) => {
                Err(Error::InvalidRuleParameter(format!("adaptive lasso requires eta >= 0, got {eta}")))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for ThresholdRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ThresholdRule::Hard => write!(f, "hard"),
            ThresholdRule::Soft => write!(f, "soft"),
            ThresholdRule::Scad { a } => write!(f, "scad:a={a}"),
            ThresholdRule::AdaptiveLasso { eta } => write!(f, "al:eta={eta}"),
        }
    }
}

impl FromStr for ThresholdRule {
    type Err = Error;

    /// Accepts "hard", "soft", "scad:a=3.7", "al:eta=3".
    fn from_str(s: &str) -> Result<Self> {
        let rule = match s.trim() {
            "hard" => ThresholdRule::Hard,
            "soft" => ThresholdRule::Soft,
            other => {
                let (name, arg) = other
                    .split_once(':')
                    .ok_or_else(|| Error::Parse(format!("unknown thresholding rule '{other}'")))?;
                let parse_val = |key: &str| -> Result<f64> {
                    let v = arg
                        .strip_prefix(key)
                        .and_then(|t| t.strip_prefix('='))
                        .ok_or_else(|| Error::Parse(format!("expected {name}:{key}=<value>, got '{other}'")))?;
                    v.parse::<f64>()
                        .map_err(|_| Error::Parse(format!("cannot parse '{v}' as a number")))
                };
                match name {
                    "scad" => ThresholdRule::Scad { a: parse_val("a")? },
                    "al" => ThresholdRule::AdaptiveLasso { eta: parse_val("eta")? },
                    _ => return Err(Error::Parse(format!("unknown thresholding rule '{other}'"))),
                }
            }
        };
        rule.validate()?;
        Ok(rule)
    }
}

/// Norm driving the thresholding decision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DecisionNorm {
    #[default]
    HilbertSchmidt,
    Supremum,
}

impl DecisionNorm {
    pub fn eval(self, z: &Surface) -> f64 {
        match self {
            DecisionNorm::HilbertSchmidt => hs_norm(z),
            DecisionNorm::Supremum => sup_norm(z),
        }
    }
}

/// Scalar core of the thresholding rules: the factor c in [0, 1] such that
/// s_lambda(Z) = c Z for a surface with norm `norm`. Always 0 for
/// norm <= lambda.
pub fn shrinkage_factor(norm: f64, lambda: f64, rule: ThresholdRule) -> f64 {
    debug_assert!(norm >= 0.0 && lambda >= 0.0);
    if norm <= lambda {
        return 0.0;
    }
    match rule {
        ThresholdRule::Hard => 1.0,
        ThresholdRule::Soft => 1.0 - lambda / norm,
        ThresholdRule::Scad { a } => {
            if norm < 2.0 * lambda {
                1.0 - lambda / norm
            } else if norm <= a * lambda {
                ((a - 1.0) - a * lambda / norm) / (a - 2.0)
            } else {
                1.0
            }
        }
        ThresholdRule::AdaptiveLasso { eta } => {
            let ratio = (lambda / norm).powf(eta + 1.0);
            (1.0 - ratio).max(0.0)
        }
    }
}

/// Apply a thresholding rule to a surface under the chosen decision norm.
pub fn apply_threshold_with_norm(
    z: &Surface,
    lambda: f64,
    rule: ThresholdRule,
    norm: DecisionNorm,
) -> Result<Surface> {
    rule.validate()?;
    if !(lambda >= 0.0) {
        return Err(Error::InvalidRuleParameter(format!("lambda must be >= 0, got {lambda}")));
    }
    let c = shrinkage_factor(norm.eval(z), lambda, rule);
    Ok(z.scaled(c))
}

/// Apply a thresholding rule under the Hilbert-Schmidt norm.
pub fn apply_threshold(z: &Surface, lambda: f64, rule: ThresholdRule) -> Result<Surface> {
    apply_threshold_with_norm(z, lambda, rule, DecisionNorm::HilbertSchmidt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use approx::assert_relative_eq;
    use std::sync::Arc;

    fn grid() -> Arc<Grid> {
        Arc::new(Grid::uniform(21))
    }

    #[test]
    fn soft_on_constant_two() {
        // ||z|| = 2, lambda = 0.5 so the factor is 1 - 0.25 = 0.75
        let z = Surface::constant(2.0, grid());
        let out = apply_threshold(&z, 0.5, ThresholdRule::Soft).unwrap();
        for &v in out.values() {
            assert_relative_eq!(v, 1.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn all_rules_zero_at_or_below_lambda() {
        let z = Surface::constant(1.0, grid());
        for rule in [
            ThresholdRule::Hard,
            ThresholdRule::Soft,
            ThresholdRule::Scad { a: 3.7 },
            ThresholdRule::AdaptiveLasso { eta: 3.0 },
        ] {
            let out = apply_threshold(&z, 1.0 + 1e-9, rule).unwrap();
            assert!(out.values().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn scad_middle_branch() {
        // ||z|| = 3 lies in [2 lambda, a lambda] for a = 3.7, lambda = 1
        let z = Surface::constant(3.0, grid());
        let out = apply_threshold(&z, 1.0, ThresholdRule::Scad { a: 3.7 }).unwrap();
        let expected = 3.0 * ((3.7 - 1.0) - 3.7 / 3.0) / (3.7 - 2.0);
        for &v in out.values() {
            assert_relative_eq!(v, expected, epsilon = 1e-12);
        }
        assert_relative_eq!(expected, 2.5882, epsilon = 1e-4);
    }

    #[test]
    fn adaptive_lasso_eta_three() {
        let z = Surface::constant(2.0, grid());
        let out = apply_threshold(&z, 1.0, ThresholdRule::AdaptiveLasso { eta: 3.0 }).unwrap();
        for &v in out.values() {
            assert_relative_eq!(v, 2.0 * (1.0 - 1.0 / 16.0), epsilon = 1e-12);
        }
    }

    #[test]
    fn hard_keeps_large_entries_untouched() {
        let z = Surface::constant(2.0, grid());
        let out = apply_threshold(&z, 1.0, ThresholdRule::Hard).unwrap();
        for (a, b) in out.values().iter().zip(z.values()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn shrinkage_factor_examples() {
        assert_eq!(shrinkage_factor(0.0, 1.0, ThresholdRule::Soft), 0.0);
        assert_eq!(shrinkage_factor(5.0, 1.0, ThresholdRule::Scad { a: 3.7 }), 1.0);
        assert_relative_eq!(
            shrinkage_factor(2.0, 1.0, ThresholdRule::AdaptiveLasso { eta: 0.0 }),
            0.5,
            epsilon = 1e-15
        );
    }

    #[test]
    fn factor_is_monotone_in_norm() {
        for rule in [
            ThresholdRule::Hard,
            ThresholdRule::Soft,
            ThresholdRule::Scad { a: 3.7 },
            ThresholdRule::AdaptiveLasso { eta: 2.0 },
        ] {
            let lambda = 0.8;
            let mut prev = -1.0;
            for i in 0..400 {
                let norm = i as f64 * 0.02;
                let c = shrinkage_factor(norm, lambda, rule);
                assert!(c >= prev - 1e-15, "rule {rule:?} not monotone at norm {norm}");
                assert!((0.0..=1.0).contains(&c));
                prev = c;
            }
        }
    }

    #[test]
    fn rule_parsing() {
        assert_eq!("hard".parse::<ThresholdRule>().unwrap(), ThresholdRule::Hard);
        assert_eq!("soft".parse::<ThresholdRule>().unwrap(), ThresholdRule::Soft);
        assert_eq!(
            "scad:a=3.7".parse::<ThresholdRule>().unwrap(),
            ThresholdRule::Scad { a: 3.7 }
        );
        assert_eq!(
            "al:eta=3".parse::<ThresholdRule>().unwrap(),
            ThresholdRule::AdaptiveLasso { eta: 3.0 }
        );
        assert!("scad:a=2".parse::<ThresholdRule>().is_err());
        assert!("al:eta=-1".parse::<ThresholdRule>().is_err());
        assert!("banana".parse::<ThresholdRule>().is_err());
    }

    #[test]
    fn sup_norm_variant_uses_the_other_norm() {
        // peak 3 at one point, tiny HS mass: sup-norm decision keeps it,
        // HS-norm decision kills it
        let g = grid();
        let mut z = Surface::zero(g);
        z.values_mut()[0] = 3.0;
        let lambda = 1.0;
        let hs = apply_threshold(&z, lambda, ThresholdRule::Hard).unwrap();
        assert!(hs.values().iter().all(|&v| v == 0.0));
        let sup =
            apply_threshold_with_norm(&z, lambda, ThresholdRule::Hard, DecisionNorm::Supremum)
                .unwrap();
        assert_eq!(sup.values()[0], 3.0);
    }
}
