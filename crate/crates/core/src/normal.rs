//! Scalar Gaussian helpers: CDF, quantile, interval masses and the
//! truncated normal.

use std::f64::consts::{PI, SQRT_2};

use libm::erfc;
use statrs::function::erf::erfc_inv;

use crate::error::{Error, Result};

pub fn std_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// `Φ(z)`, accurate in the lower tail.
pub fn std_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / SQRT_2)
}

/// `1 - Φ(z)`, accurate in the upper tail.
pub fn std_sf(z: f64) -> f64 {
    0.5 * erfc(z / SQRT_2)
}

/// `Φ⁻¹(p)` for `p ∈ (0, 1)`; returns ±∞ at the endpoints. The rational
/// approximation is refined by one Newton step on whichever tail holds `p`.
pub fn std_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let z = -SQRT_2 * erfc_inv(2.0 * p);
    let dens = std_pdf(z);
    if !(dens > 0.0) {
        return z;
    }
    if p < 0.5 {
        z - (std_cdf(z) - p) / dens
    } else {
        z + (std_sf(z) - (1.0 - p)) / dens
    }
}

/// `Φ(hi) - Φ(lo)` computed on whichever tail keeps the difference accurate.
pub fn std_interval_mass(lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return 0.0;
    }
    if lo > 0.0 {
        (std_sf(lo) - std_sf(hi)).max(0.0)
    } else {
        (std_cdf(hi) - std_cdf(lo)).max(0.0)
    }
}

/// Mass of `N(mean, sd²)` on `(lo, hi]`.
pub fn interval_mass(mean: f64, sd: f64, lo: f64, hi: f64) -> f64 {
    std_interval_mass((lo - mean) / sd, (hi - mean) / sd)
}

/// Largest absolute slope of the `N(mean, var)` density, `1/(var √(2πe))`.
pub fn density_lipschitz(var: f64) -> f64 {
    1.0 / (var * (2.0 * PI * std::f64::consts::E).sqrt())
}

/// Normal distribution restricted to `(lower, upper]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncatedNormal {
    pub mean: f64,
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
    mass: f64,
}

impl TruncatedNormal {
    pub fn new(mean: f64, var: f64, lower: f64, upper: f64) -> Result<Self> {
        if !(var.is_finite() && var > 0.0) || !mean.is_finite() {
            return Err(Error::InvalidMoments { mean, variance: var });
        }
        if !(lower < upper) {
            return Err(Error::InvalidPartition(format!("empty truncation interval ({lower}, {upper}]")));
        }
        let sd = var.sqrt();
        let mass = interval_mass(mean, sd, lower, upper);
        if !(mass > 0.0) {
            return Err(Error::InvalidPartition(format!(
                "truncation interval ({lower}, {upper}] carries no mass under N({mean}, {var})"
            )));
        }
        Ok(TruncatedNormal { mean, sd, lower, upper, mass })
    }

    /// Untruncated mass of the interval, `1 - ε`.
    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn pdf(&self, t: f64) -> f64 {
        if t <= self.lower || t > self.upper {
            return 0.0;
        }
        std_pdf((t - self.mean) / self.sd) / (self.sd * self.mass)
    }

    /// Truncated mass of `(lo, hi]`, clipped to the support.
    pub fn mass_between(&self, lo: f64, hi: f64) -> f64 {
        let lo = lo.max(self.lower);
        let hi = hi.min(self.upper);
        interval_mass(self.mean, self.sd, lo, hi) / self.mass
    }

    pub fn cdf(&self, t: f64) -> f64 {
        self.mass_between(self.lower, t).clamp(0.0, 1.0)
    }

    /// Inverse CDF. The computation runs on the tail that is farther from
    /// the mean so that deep truncations stay accurate.
    pub fn quantile(&self, u: f64) -> f64 {
        let a = (self.lower - self.mean) / self.sd;
        let b = (self.upper - self.mean) / self.sd;
        let z = if a > 0.0 {
            let (qa, qb) = (std_sf(a), std_sf(b));
            -std_quantile(qa - u * (qa - qb))
        } else {
            let (pa, pb) = (std_cdf(a), std_cdf(b));
            std_quantile(pa + u * (pb - pa))
        };
        let t = self.mean + self.sd * z;
        t.clamp(self.lower.next_up(), self.upper)
    }

    /// Mean and variance of the truncated law.
    pub fn moments(&self) -> (f64, f64) {
        let a = (self.lower - self.mean) / self.sd;
        let b = (self.upper - self.mean) / self.sd;
        let z = std_interval_mass(a, b);
        let (pa, pb) = (std_pdf(a), std_pdf(b));
        let ta = if a.is_finite() { a * pa } else { 0.0 };
        let tb = if b.is_finite() { b * pb } else { 0.0 };
        let m = (pa - pb) / z;
        let mean = self.mean + self.sd * m;
        let var = self.sd * self.sd * (1.0 + (ta - tb) / z - m * m);
        (mean, var)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cdf_and_quantile_agree() {
        for &p in &[1e-12, 1e-6, 0.001, 0.3, 0.5, 0.9, 0.999] {
            let z = std_quantile(p);
            assert!((std_cdf(z) - p).abs() <= 1e-14 * p.min(1.0 - p), "p={p}");
        }
        assert!((std_quantile(0.999) - 3.090232306167813).abs() < 1e-12);
    }

    #[test]
    fn upper_tail_mass_is_accurate() {
        let m = std_interval_mass(9.0, 10.0);
        assert!(m > 0.0 && (m / 1.128512207423599e-19 - 1.0).abs() < 1e-13);
    }

    #[test]
    fn truncated_quantile_stays_inside() {
        let t = TruncatedNormal::new(0.0, 1.0, 8.0, 9.0).unwrap();
        for &u in &[0.0, 1e-9, 0.5, 1.0 - 1e-12, 1.0] {
            let q = t.quantile(u);
            assert!(q > 8.0 && q <= 9.0);
        }
    }

    #[test]
    fn truncated_moments_symmetric() {
        let t = TruncatedNormal::new(0.0, 1.0, -1.0, 1.0).unwrap();
        let (m, v) = t.moments();
        assert!(m.abs() < 1e-15);
        // 1 - 2φ(1)/(2Φ(1)-1)
        assert!((v - 0.2911250947727932).abs() < 1e-14);
    }
}
