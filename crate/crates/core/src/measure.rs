//! Values with 1σ uncertainties and first-order error propagation.

use serde::{Deserialize, Serialize};

/// A measured or fitted quantity with its 1σ standard uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub sigma: f64,
}

impl Estimate {
    pub fn new(value: f64, sigma: f64) -> Self {
        Self { value, sigma }
    }

    pub fn exact(value: f64) -> Self {
        Self { value, sigma: 0.0 }
    }

    /// Poisson count `n` normalized by an exposure: `n/t ± √n/t`.
    pub fn poisson_rate(count: u64, exposure: f64) -> Self {
        let n = count as f64;
        Self::new(n / exposure, n.sqrt() / exposure)
    }

    /// Number of standard deviations separating `self` from `truth`.
    pub fn pull(&self, truth: f64) -> f64 {
        (self.value - truth) / self.sigma
    }

    pub fn relative_sigma(&self) -> f64 {
        self.sigma / self.value.abs()
    }

    pub fn scale(self, k: f64) -> Self {
        Self::new(self.value * k, self.sigma * k.abs())
    }
}

/// Difference of two independent estimates.
impl std::ops::Sub for Estimate {
    type Output = Self;

    fn sub(self, other: Self) -> Self {
        Self::new(self.value - other.value, self.sigma.hypot(other.sigma))
    }
}

/// Quotient of two independent estimates.
impl std::ops::Div for Estimate {
    type Output = Self;

    fn div(self, other: Self) -> Self {
        let q = self.value / other.value;
        let sigma = (self.sigma / other.value).hypot(q * other.sigma / other.value);
        Self::new(q, sigma.abs())
    }
}

impl std::ops::Mul for Estimate {
    type Output = Self;

    fn mul(self, other: Self) -> Self {
        let p = self.value * other.value;
        let sigma = (self.sigma * other.value).hypot(self.value * other.sigma);
        Self::new(p, sigma)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quotient_propagation() {
        let a = Estimate::new(10.0, 1.0);
        let b = Estimate::new(2.0, 0.0);
        let q = a / b;
        assert_eq!(q.value, 5.0);
        assert!((q.sigma - 0.5).abs() < 1e-15);
        let c = Estimate::new(2.0, 0.2) / Estimate::new(4.0, 0.4);
        assert!((c.sigma - 0.5 * (0.1f64.powi(2) + 0.1f64.powi(2)).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn poisson_rate_of_zero_counts() {
        let r = Estimate::poisson_rate(0, 4.0);
        assert_eq!(r.value, 0.0);
        assert_eq!(r.sigma, 0.0);
    }
}
