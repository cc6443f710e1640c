//! Priors on the unconstrained scale, Jacobians included.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use super::layout::{corr_cholesky_from_unconstrained, ParamLayout};
use crate::error::{Error, Result};
use crate::mediator::RE_DIM;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSpec {
    pub regression_sd: f64,
    pub baseline_shape: f64,
    pub baseline_rate: f64,
    /// Half-Cauchy scale for σ and the random-effect SDs.
    pub scale_prior: f64,
    /// LKJ shape on the random-effect correlation.
    pub correlation_prior: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec {
            regression_sd: 5.0,
            baseline_shape: 0.5,
            baseline_rate: 0.5,
            scale_prior: 10.0,
            correlation_prior: 1.0,
        }
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        let v = [self.regression_sd, self.baseline_shape, self.baseline_rate, self.scale_prior, self.correlation_prior];
        if v.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
            return Err(Error::invalid("prior hyperparameters must be positive"));
        }
        Ok(())
    }

    pub fn normal_logpdf(&self, x: f64) -> f64 {
        let s = self.regression_sd;
        -0.5 * (x / s).powi(2) - s.ln() - 0.5 * (2.0 * PI).ln()
    }

    /// Gamma prior on `λ = exp(y)` plus `log λ`.
    pub fn log_gamma_on_log(&self, y: f64) -> f64 {
        let (a, b) = (self.baseline_shape, self.baseline_rate);
        a * b.ln() - ln_gamma(a) + a * y - b * y.exp()
    }

    /// Half-Cauchy prior on `σ = exp(y)` plus `log σ`.
    pub fn log_half_cauchy_on_log(&self, y: f64) -> f64 {
        let s = self.scale_prior;
        let x = y.exp();
        (2.0 / (PI * s)).ln() - (1.0 + (x / s).powi(2)).ln() + y
    }

    /// LKJ on the correlation Cholesky factor plus the CPC Jacobian.
    pub fn log_lkj_on_unconstrained(&self, y: &[f64]) -> f64 {
        let (l, log_jac) = corr_cholesky_from_unconstrained(y);
        let eta = self.correlation_prior;
        let mut lp = log_jac;
        for i in 1..RE_DIM {
            let d = l[(i, i)];
            if d <= 0.0 {
                return f64::NEG_INFINITY;
            }
            lp += (RE_DIM as f64 - i as f64 - 1.0 + 2.0 * eta - 2.0) * d.ln();
        }
        lp
    }

    pub fn log_prior(&self, layout: &ParamLayout, theta: &[f64]) -> f64 {
        let mut lp = 0.0;
        for i in layout.mediator.clone().chain(layout.survival.clone()) {
            lp += self.normal_logpdf(theta[i]);
        }
        lp += self.log_half_cauchy_on_log(theta[layout.sigma]);
        for i in layout.baseline.clone() {
            lp += self.log_gamma_on_log(theta[i]);
        }
        let re = layout.random_effects.clone();
        for i in re.start..re.start + RE_DIM {
            lp += self.log_half_cauchy_on_log(theta[i]);
        }
        lp += self.log_lkj_on_unconstrained(&theta[re.start + RE_DIM..re.end]);
        lp
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn densities_integrate_to_one() {
        let p = PriorSpec::default();
        let grid = |f: &dyn Fn(f64) -> f64, lo: f64, hi: f64| {
            let n = 400_000;
            let h = (hi - lo) / n as f64;
            (0..n).map(|i| f(lo + (i as f64 + 0.5) * h).exp() * h).sum::<f64>()
        };
        assert!((grid(&|y| p.log_gamma_on_log(y), -60.0, 6.0) - 1.0).abs() < 1e-6);
        assert!((grid(&|y| p.normal_logpdf(y), -60.0, 60.0) - 1.0).abs() < 1e-9);
        // half-Cauchy tails are heavy; the mass beyond e^12 is about 2·10/(π e^12)
        let mass = grid(&|y| p.log_half_cauchy_on_log(y), -40.0, 12.0);
        assert!((mass + 2.0 * 10.0 / (PI * 12f64.exp()) - 1.0).abs() < 1e-6);
    }
}
