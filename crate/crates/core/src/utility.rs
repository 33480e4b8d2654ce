//! Power (CRRA) utility `U(x) = x^α/α`.

use serde::{Deserialize, Serialize};

use crate::error::{DrbcError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerUtility {
    alpha: f64,
}

impl PowerUtility {
    pub fn new(alpha: f64) -> Result<Self> {
        if !alpha.is_finite() || alpha >= 1.0 || alpha == 0.0 {
            return Err(DrbcError::invalid(format!(
                "CRRA exponent must satisfy alpha < 1 and alpha != 0, got {alpha}"
            )));
        }
        Ok(Self { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `α/(1−α)`.
    pub fn beta(&self) -> f64 {
        self.alpha / (1.0 - self.alpha)
    }

    /// `1/(1−α)`, the exponent applied to `F` in the value integral.
    pub fn gamma(&self) -> f64 {
        1.0 / (1.0 - self.alpha)
    }

    pub fn u(&self, x: f64) -> f64 {
        x.powf(self.alpha) / self.alpha
    }

    /// Inverse marginal utility `I(y) = y^{1/(α−1)}`.
    pub fn inv_marginal(&self, y: f64) -> f64 {
        y.powf(1.0 / (self.alpha - 1.0))
    }

    /// `I′(y) = y^{(2−α)/(α−1)}/(α−1)`.
    pub fn inv_marginal_deriv(&self, y: f64) -> f64 {
        y.powf((2.0 - self.alpha) / (self.alpha - 1.0)) / (self.alpha - 1.0)
    }

    /// Direction of the worst-case prior shift: −1 when α ∈ (0,1), where the
    /// adversary lowers `𝒥`, and +1 when α < 0, where it raises it.
    pub fn adversarial_sign(&self) -> f64 {
        if self.alpha > 0.0 {
            -1.0
        } else {
            1.0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn rejects_invalid_alpha() {
        assert!(PowerUtility::new(0.0).is_err());
        assert!(PowerUtility::new(1.0).is_err());
        assert!(PowerUtility::new(1.5).is_err());
        assert!(PowerUtility::new(f64::NAN).is_err());
    }

    #[test]
    fn terminal_utility_examples() {
        assert_eq!(PowerUtility::new(0.5).unwrap().u(1.0), 2.0);
        assert_eq!(PowerUtility::new(-1.0).unwrap().u(2.0), -0.5);
    }

    #[test]
    fn inverse_marginal_at_one() {
        let u = PowerUtility::new(0.5).unwrap();
        assert_eq!(u.inv_marginal(1.0), 1.0);
        assert_eq!(u.inv_marginal_deriv(1.0), -2.0);
    }

    proptest! {
        #[test]
        fn beta_consistency(alpha in -5.0f64..0.99) {
            prop_assume!(alpha.abs() > 1e-6);
            let u = PowerUtility::new(alpha).unwrap();
            prop_assert!((u.beta() * (1.0 - alpha) - alpha).abs() <= 1e-15 * (1.0 + alpha.abs()));
        }

        #[test]
        fn inverse_of_marginal(alpha in -5.0f64..0.95, x in 0.05f64..20.0) {
            prop_assume!(alpha.abs() > 1e-3);
            let u = PowerUtility::new(alpha).unwrap();
            let marginal = x.powf(alpha - 1.0);
            assert_relative_eq!(u.inv_marginal(marginal), x, max_relative = 1e-10);
        }

        #[test]
        fn derivative_matches_finite_difference(alpha in -3.0f64..0.9, y in 0.2f64..5.0) {
            prop_assume!(alpha.abs() > 1e-3);
            let u = PowerUtility::new(alpha).unwrap();
            let h = 1e-6 * y;
            let fd = (u.inv_marginal(y + h) - u.inv_marginal(y - h)) / (2.0 * h);
            assert_relative_eq!(u.inv_marginal_deriv(y), fd, max_relative = 1e-6);
        }

        #[test]
        fn utility_increasing(alpha in -4.0f64..0.99, x in 0.01f64..100.0) {
            prop_assume!(alpha.abs() > 1e-6);
            let u = PowerUtility::new(alpha).unwrap();
            prop_assert!(u.u(x * 1.01) > u.u(x));
        }
    }
}
