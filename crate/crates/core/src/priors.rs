//! Closed-form log-densities of the model's distributions and the
//! regularized-horseshoe scale arithmetic.
//!
//! Everything is evaluated in the log domain in double precision.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{MuviError, Result};

/// `0.5 * ln(2π)`.
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Arguments of the half-Cauchy density are floored here during optimization.
pub const HALF_CAUCHY_FLOOR: f64 = 1e-12;

/// How the auxiliary constant enters the slab.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlabScaling {
    /// Effective slab sd is `alpha * c`.
    #[default]
    Sd,
    /// Effective slab variance is `alpha * c²`, i.e. slab sd `sqrt(alpha) * c`.
    Variance,
}

impl SlabScaling {
    /// Multiplier applied to the slab *variance* `c²`.
    #[inline]
    pub fn variance_factor(self, alpha: f64) -> f64 {
        match self {
            SlabScaling::Sd => alpha * alpha,
            SlabScaling::Variance => alpha,
        }
    }
}

/// Hyperparameters of the inverse-Gamma priors on noise variances and slab widths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    pub sigma_shape: f64,
    pub sigma_scale: f64,
    pub slab_shape: f64,
    pub slab_scale: f64,
    pub slab_scaling: SlabScaling,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            sigma_shape: 1.0,
            sigma_scale: 1.0,
            slab_shape: 0.5,
            slab_scale: 0.5,
            slab_scaling: SlabScaling::Sd,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sigma_shape", self.sigma_shape),
            ("sigma_scale", self.sigma_scale),
            ("slab_shape", self.slab_shape),
            ("slab_scale", self.slab_scale),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(MuviError::InvalidArgument(format!(
                    "prior hyperparameter {name} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

fn finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(MuviError::Domain(format!("{name} is not finite: {v}")))
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    finite(name, v)?;
    if v > 0.0 {
        Ok(())
    } else {
        Err(MuviError::Domain(format!("{name} must be positive, got {v}")))
    }
}

/// Gaussian log-density.
pub fn normal_logpdf(x: f64, mean: f64, sd: f64) -> Result<f64> {
    finite("x", x)?;
    finite("mean", mean)?;
    positive("sd", sd)?;
    Ok(normal_logpdf_unchecked(x, mean, sd))
}

#[inline]
pub(crate) fn normal_logpdf_unchecked(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * z * z - sd.ln() - HALF_LN_2PI
}

/// Half-Cauchy log-density with location 0.
pub fn half_cauchy_logpdf(x: f64, scale: f64) -> Result<f64> {
    finite("x", x)?;
    positive("scale", scale)?;
    if x < 0.0 {
        return Err(MuviError::Domain(format!("half-Cauchy support is x >= 0, got {x}")));
    }
    Ok(half_cauchy_logpdf_unchecked(x, scale))
}

#[inline]
pub(crate) fn half_cauchy_logpdf_unchecked(x: f64, scale: f64) -> f64 {
    let z = x / scale;
    // ln(1 + z²) without overflow for huge z
    let log1p_z2 = if z > 1e150 { 2.0 * z.ln() } else { (z * z).ln_1p() };
    (2.0 / std::f64::consts::PI).ln() - scale.ln() - log1p_z2
}

/// Inverse-Gamma log-density, parameterized by shape and scale.
pub fn inverse_gamma_logpdf(x: f64, shape: f64, scale: f64) -> Result<f64> {
    positive("x", x)?;
    positive("shape", shape)?;
    positive("scale", scale)?;
    Ok(inverse_gamma_logpdf_unchecked(x, shape, scale))
}

#[inline]
pub(crate) fn inverse_gamma_logpdf_unchecked(x: f64, shape: f64, scale: f64) -> f64 {
    shape * scale.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - scale / x
}

/// Inverse-gamma log-density with its normalizing constant precomputed.
#[derive(Debug, Clone, Copy)]
pub(crate) struct InverseGammaTerm {
    norm: f64,
    shape: f64,
    scale: f64,
}

impl InverseGammaTerm {
    pub(crate) fn new(shape: f64, scale: f64) -> Self {
        Self {
            norm: shape * scale.ln() - ln_gamma(shape),
            shape,
            scale,
        }
    }

    /// Log-density at `x`, given `log_x = ln x`.
    #[inline]
    pub(crate) fn log_density(&self, x: f64, log_x: f64) -> f64 {
        self.norm - (self.shape + 1.0) * log_x - self.scale / x
    }

    /// Derivative of the log-density w.r.t. `ln x`.
    #[inline]
    pub(crate) fn dlog(&self, x: f64) -> f64 {
        -(self.shape + 1.0) + self.scale / x
    }
}

/// log-Normal log-density: density of `ln x` under N(mu, sigma) minus the Jacobian `ln x`.
pub fn lognormal_logpdf(x: f64, mu: f64, sigma: f64) -> Result<f64> {
    positive("x", x)?;
    finite("mu", mu)?;
    positive("sigma", sigma)?;
    let lx = x.ln();
    Ok(normal_logpdf_unchecked(lx, mu, sigma) - lx)
}

/// Standard deviation of a regularized-horseshoe loading given the local-global
/// scale `gamma` and the effective slab scale.
pub fn regularized_sd(gamma: f64, slab: f64) -> Result<f64> {
    positive("gamma", gamma)?;
    positive("slab", slab)?;
    Ok(regularized_sd_unchecked(gamma, slab))
}

#[inline]
pub(crate) fn regularized_sd_unchecked(gamma: f64, slab: f64) -> f64 {
    // 1/v = 1/slab² + 1/γ², written to avoid overflow of the squares
    let (lo, hi) = if gamma < slab { (gamma, slab) } else { (slab, gamma) };
    let r = lo / hi;
    lo / (1.0 + r * r).sqrt()
}

/// Local-global scale of one loading together with its slab.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularizedScale {
    pub gamma: f64,
    pub slab: f64,
    pub effective_sd: f64,
}

impl RegularizedScale {
    /// `gamma = tau * delta * lambda`; `slab` is the already-scaled slab sd.
    pub fn new(tau: f64, delta: f64, lambda: f64, slab: f64) -> Result<Self> {
        let gamma = tau * delta * lambda;
        let effective_sd = regularized_sd(gamma, slab)?;
        Ok(Self {
            gamma,
            slab,
            effective_sd,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const TOL: f64 = 1e-9;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= TOL * (1.0 + b.abs())
    }

    #[test]
    fn normal_values() {
        assert!(close(normal_logpdf(0.0, 0.0, 1.0).unwrap(), -0.918_938_533_204_672_8));
        assert!(close(normal_logpdf(1.0, 0.0, 1.0).unwrap(), -1.418_938_533_204_672_7));
        assert!(close(
            normal_logpdf(2.0, 2.0, 3.0).unwrap(),
            -(3.0f64).ln() - HALF_LN_2PI
        ));
        assert!(normal_logpdf(f64::NAN, 0.0, 1.0).is_err());
        assert!(normal_logpdf(0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn half_cauchy_values() {
        assert!(close(half_cauchy_logpdf(0.0, 1.0).unwrap(), -0.451_582_705_289_454_9));
        assert!(close(half_cauchy_logpdf(1.0, 1.0).unwrap(), -1.144_729_885_849_400_2));
        let expected = (2.0 / (std::f64::consts::PI * 2.0 * 2.0)).ln();
        assert!(close(half_cauchy_logpdf(2.0, 2.0).unwrap(), expected));
        assert!(close(expected, -1.837_877_066_409_345_3));
        assert!(half_cauchy_logpdf(-1.0, 1.0).is_err());
    }

    #[test]
    fn inverse_gamma_values() {
        assert!(close(inverse_gamma_logpdf(1.0, 1.0, 1.0).unwrap(), -1.0));
        assert!(close(inverse_gamma_logpdf(1.0, 2.0, 1.0).unwrap(), -1.0));
        assert!(close(
            inverse_gamma_logpdf(0.5, 1.0, 1.0).unwrap(),
            -0.613_705_638_880_109_4
        ));
        assert!(inverse_gamma_logpdf(0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn lognormal_values() {
        assert!(close(lognormal_logpdf(1.0, 0.0, 1.0).unwrap(), -HALF_LN_2PI));
        assert!(close(
            lognormal_logpdf(std::f64::consts::E, 1.0, 1.0).unwrap(),
            -HALF_LN_2PI - 1.0
        ));
        assert!(lognormal_logpdf(0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn regularized_sd_values() {
        assert!(close(regularized_sd(1.0, 1.0).unwrap(), 0.5f64.sqrt()));
        assert!((regularized_sd(1.0, 1e6).unwrap() - 1.0).abs() < 1e-9);
        assert!((regularized_sd(1e6, 0.01).unwrap() - 0.01).abs() < 1e-9);
        assert!(regularized_sd(0.0, 1.0).is_err());
        assert!(regularized_sd(1.0, -1.0).is_err());
    }

    #[test]
    fn regularized_scale_record() {
        let s = RegularizedScale::new(0.5, 2.0, 3.0, 0.7).unwrap();
        assert!(close(s.gamma, 3.0));
        let v = s.slab.powi(2) * s.gamma.powi(2) / (s.slab.powi(2) + s.gamma.powi(2));
        assert!(close(s.effective_sd.powi(2), v));
    }

    // Composite Simpson rule on [a, b].
    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let n = if n % 2 == 1 { n + 1 } else { n };
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            let x = a + i as f64 * h;
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
        }
        s * h / 3.0
    }

    #[test]
    fn densities_integrate_to_one() {
        let n = 200_000;
        let normal = simpson(|x| normal_logpdf(x, 0.3, 1.7).unwrap().exp(), -20.0, 20.0, n);
        assert!((normal - 1.0).abs() < 1e-3, "normal {normal}");

        // half-Cauchy has heavy tails: integrate the bulk numerically and add
        // the analytic tail mass 1 - (2/π)·atan(T/s).
        let t = 1e3;
        let hc = simpson(|x| half_cauchy_logpdf(x, 1.3).unwrap().exp(), 0.0, t, n) + 1.0
            - 2.0 / std::f64::consts::PI * (t / 1.3f64).atan();
        assert!((hc - 1.0).abs() < 1e-3, "half-cauchy {hc}");

        let ig = simpson(
            |x| {
                if x <= 0.0 {
                    0.0
                } else {
                    inverse_gamma_logpdf(x, 3.0, 2.0).unwrap().exp()
                }
            },
            0.0,
            400.0,
            n,
        );
        assert!((ig - 1.0).abs() < 1e-3, "inverse-gamma {ig}");

        let ln = simpson(
            |x| {
                if x <= 0.0 {
                    0.0
                } else {
                    lognormal_logpdf(x, 0.2, 0.5).unwrap().exp()
                }
            },
            0.0,
            60.0,
            n,
        );
        assert!((ln - 1.0).abs() < 1e-3, "lognormal {ln}");
    }

    #[test]
    fn finite_over_wide_range() {
        let mut x = 1e-8;
        while x <= 1e8 {
            assert!(normal_logpdf(x, 0.0, 1.0).unwrap().is_finite() || x > 1e150);
            assert!(half_cauchy_logpdf(x, 1.0).unwrap().is_finite());
            assert!(inverse_gamma_logpdf(x, 0.5, 0.5).unwrap().is_finite());
            assert!(lognormal_logpdf(x, 0.0, 1.0).unwrap().is_finite());
            assert!(regularized_sd(x, 1.0 / x).unwrap().is_finite());
            assert!(regularized_sd(x, x).unwrap() > 0.0);
            x *= 10.0;
        }
    }

    proptest! {
        #[test]
        fn regularized_sd_bounded(g in 1e-6f64..1e6, c in 1e-6f64..1e6) {
            let s = regularized_sd(g, c).unwrap();
            prop_assert!(s <= g.min(c) * (1.0 + 1e-12));
        }

        #[test]
        fn regularized_sd_symmetric(g in 1e-6f64..1e6, c in 1e-6f64..1e6) {
            let a = regularized_sd(g, c).unwrap();
            let b = regularized_sd(c, g).unwrap();
            prop_assert!((a - b).abs() <= 1e-15 * a);
        }

        #[test]
        fn regularized_sd_matches_harmonic_form(g in 1e-3f64..1e3, c in 1e-3f64..1e3) {
            let s = regularized_sd(g, c).unwrap();
            let v = c * c * g * g / (c * c + g * g);
            prop_assert!((s * s - v).abs() <= 1e-12 * v);
        }

        #[test]
        fn regularized_sd_monotone(g in 1e-3f64..1e3, c in 1e-3f64..1e3, f in 1.001f64..10.0) {
            let s = regularized_sd(g, c).unwrap();
            prop_assert!(regularized_sd(g * f, c).unwrap() > s);
            prop_assert!(regularized_sd(g, c * f).unwrap() > s);
        }
    }
}
