//! Binned predictive distributions: the exponential-family head, softmax
//! binning, and distributional metrics.

use nalgebra::DMatrix;

use crate::datagen::{self, PriorConfig, StreamSeed};
use crate::error::{Error, Result};
use crate::gp::PPDMoments;
use crate::normal::{self, TruncatedNormal};

/// Equidistant partition of `(lower, upper]` into `bins` cells.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Partition {
    lower: f64,
    upper: f64,
    bins: usize,
}

impl Partition {
    pub fn new(lower: f64, upper: f64, bins: usize) -> Result<Self> {
        if !(lower.is_finite() && upper.is_finite() && lower < upper) {
            return Err(Error::InvalidPartition(format!("need finite a < b, got ({lower}, {upper}]")));
        }
        if bins == 0 {
            return Err(Error::InvalidPartition("bin count must be at least 1".into()));
        }
        Ok(Partition { lower, upper, bins })
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn width(&self) -> f64 {
        (self.upper - self.lower) / self.bins as f64
    }

    /// Edge `c` for `c = 0..=bins`; the last edge is exactly `upper`.
    pub fn edge(&self, c: usize) -> f64 {
        if c >= self.bins {
            self.upper
        } else {
            self.lower + c as f64 * self.width()
        }
    }

    pub fn midpoint(&self, c: usize) -> f64 {
        self.lower + (c as f64 + 0.5) * self.width()
    }

    pub fn midpoints(&self) -> Vec<f64> {
        (0..self.bins).map(|c| self.midpoint(c)).collect()
    }
}

/// Gaussian natural parameters `(μ/τ, -1/(2τ))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NaturalParams {
    pub theta1: f64,
    pub theta2: f64,
}

impl NaturalParams {
    pub fn from_moments(m: &PPDMoments) -> Result<Self> {
        if !(m.variance.is_finite() && m.variance > 0.0 && m.mean.is_finite()) {
            return Err(Error::InvalidMoments { mean: m.mean, variance: m.variance });
        }
        Ok(NaturalParams { theta1: m.mean / m.variance, theta2: -0.5 / m.variance })
    }
}

/// Sufficient statistics `(ξ, ξ²)` at the bin midpoints, one row per bin.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    pub xi: DMatrix<f64>,
}

impl SufficientStats {
    pub fn new(partition: &Partition) -> Self {
        let mids = partition.midpoints();
        SufficientStats { xi: DMatrix::from_fn(mids.len(), 2, |c, k| if k == 0 { mids[c] } else { mids[c] * mids[c] }) }
    }

    pub fn logits(&self, psi: &NaturalParams) -> Vec<f64> {
        (0..self.xi.nrows())
            .map(|c| self.xi[(c, 0)] * psi.theta1 + self.xi[(c, 1)] * psi.theta2)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinnedDistribution {
    partition: Partition,
    probs: Vec<f64>,
}

impl BinnedDistribution {
    /// Softmax of the logits with a max shift.
    pub fn from_logits(partition: Partition, logits: &[f64]) -> Result<Self> {
        check_len(&partition, logits.len())?;
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::invalid("logits must be finite"));
        }
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        Ok(BinnedDistribution { partition, probs: exps.iter().map(|e| e / total).collect() })
    }

    /// Normalizes nonnegative bin masses.
    pub fn from_masses(partition: Partition, masses: Vec<f64>) -> Result<Self> {
        check_len(&partition, masses.len())?;
        if masses.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
            return Err(Error::invalid("bin masses must be finite and nonnegative"));
        }
        let total: f64 = masses.iter().sum();
        if !(total > 0.0) {
            return Err(Error::invalid("bin masses sum to zero"));
        }
        Ok(BinnedDistribution { partition, probs: masses.iter().map(|m| m / total).collect() })
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Piecewise-constant density value in bin `c`.
    pub fn density(&self, c: usize) -> f64 {
        self.probs[c] / self.partition.width()
    }

    /// Piecewise-linear CDF; 0 below the partition and 1 above it.
    pub fn cdf(&self, t: f64) -> f64 {
        let p = &self.partition;
        if t <= p.lower {
            return 0.0;
        }
        if t >= p.upper {
            return 1.0;
        }
        let c = (((t - p.lower) / p.width()) as usize).min(p.bins - 1);
        let before: f64 = self.probs[..c].iter().sum();
        before + self.probs[c] * (t - p.edge(c)) / p.width()
    }
}

fn check_len(partition: &Partition, len: usize) -> Result<()> {
    if len != partition.bins {
        return Err(Error::DimensionMismatch { expected: partition.bins, got: len });
    }
    Ok(())
}

/// The head: softmax over midpoint logits `⟨ψ(μ, τ), (ξ_c, ξ_c²)⟩`.
pub fn head_binned(moments: &PPDMoments, partition: &Partition) -> Result<BinnedDistribution> {
    let psi = NaturalParams::from_moments(moments)?;
    let logits = SufficientStats::new(partition).logits(&psi);
    BinnedDistribution::from_logits(*partition, &logits)
}

/// Total variation between two binned laws on the same partition.
pub fn tv_distance(p: &BinnedDistribution, q: &BinnedDistribution) -> Result<f64> {
    if p.partition != q.partition {
        return Err(Error::InvalidPartition(format!(
            "partition mismatch: {:?} vs {:?}",
            p.partition, q.partition
        )));
    }
    let l1: f64 = p.probs.iter().zip(&q.probs).map(|(a, b)| (a - b).abs()).sum();
    Ok(0.5 * l1)
}

/// Total variation between the piecewise-constant density of `p` and a
/// truncated normal on the same interval, integrated exactly.
///
/// Within a bin the normal density crosses the constant level at most twice,
/// so each bin splits into at most three pieces of constant sign.
pub fn tv_to_truncated_normal(p: &BinnedDistribution, law: &TruncatedNormal) -> Result<f64> {
    let part = &p.partition;
    if part.lower != law.lower || part.upper != law.upper {
        return Err(Error::InvalidPartition("truncation interval differs from partition".into()));
    }
    let peak = 1.0 / (law.sd * law.mass() * (2.0 * std::f64::consts::PI).sqrt());
    let mut total = 0.0;
    for c in 0..part.bins {
        let (lo, hi) = (part.edge(c), part.edge(c + 1));
        let h = p.density(c);
        let mut cuts = vec![lo];
        if h > 0.0 && h < peak {
            let r = law.sd * (2.0 * (peak / h).ln()).sqrt();
            for t in [law.mean - r, law.mean + r] {
                if t > lo && t < hi {
                    cuts.push(t);
                }
            }
        }
        cuts.push(hi);
        for w in cuts.windows(2) {
            total += (law.mass_between(w[0], w[1]) - h * (w[1] - w[0])).abs();
        }
    }
    Ok(0.5 * total)
}

/// Quantile of the piecewise-linear CDF.
pub fn quantile(p: &BinnedDistribution, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("quantile level must lie in (0, 1), got {alpha}")));
    }
    let part = &p.partition;
    let mut cum = 0.0;
    for (c, &pc) in p.probs.iter().enumerate() {
        let next = cum + pc;
        if next >= alpha && pc > 0.0 {
            if next == alpha {
                return Ok(part.edge(c + 1));
            }
            let t = part.edge(c) + (alpha - cum) / pc * part.width();
            return Ok(t.min(part.edge(c + 1)));
        }
        cum = next;
    }
    Ok(part.upper)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CentralInterval {
    pub lower: f64,
    pub upper: f64,
    pub covered: bool,
}

impl CentralInterval {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

/// Central interval at `level` and whether it contains `y`.
pub fn coverage_and_width(p: &BinnedDistribution, y: f64, level: f64) -> Result<CentralInterval> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!("coverage level must lie in (0, 1), got {level}")));
    }
    let lower = quantile(p, 0.5 * (1.0 - level))?;
    let upper = quantile(p, 0.5 * (1.0 + level))?;
    Ok(CentralInterval { lower, upper, covered: lower <= y && y <= upper })
}

/// `∫ (F(t) - 1{t ≥ y})² dt` over the real line, with `F` the piecewise-linear
/// CDF of `p`. Outside the partition `F` is 0 or 1, so only the stretch
/// between `y` and the partition contributes there.
pub fn crps(p: &BinnedDistribution, y: f64) -> f64 {
    let part = &p.partition;
    let mut total = 0.0;
    if y < part.lower {
        total += part.lower - y;
    } else if y > part.upper {
        total += y - part.upper;
    }
    // ∫ of a squared linear function from A to B over length w
    let seg = |w: f64, a: f64, b: f64| w * (a * a + a * b + b * b) / 3.0;
    let mut f0 = 0.0;
    for (c, &pc) in p.probs.iter().enumerate() {
        let (lo, hi) = (part.edge(c), part.edge(c + 1));
        let f1 = f0 + pc;
        if y <= lo {
            total += seg(hi - lo, f0 - 1.0, f1 - 1.0);
        } else if y >= hi {
            total += seg(hi - lo, f0, f1);
        } else {
            let fy = f0 + pc * (y - lo) / (hi - lo);
            total += seg(y - lo, f0, fy) + seg(hi - y, fy - 1.0, f1 - 1.0);
        }
        f0 = f1;
    }
    total
}

/// First and second raw moments at the bin midpoints.
pub fn moment_readback(p: &BinnedDistribution) -> (f64, f64) {
    let mut m1 = 0.0;
    let mut m2 = 0.0;
    for (c, &pc) in p.probs.iter().enumerate() {
        let xi = p.partition.midpoint(c);
        m1 += pc * xi;
        m2 += pc * xi * xi;
    }
    (m1, m2)
}

/// Untruncated raw second moment `τ + μ²` and its counterpart under
/// truncation to the partition interval.
pub fn second_moment_targets(m: &PPDMoments, partition: &Partition) -> Result<(f64, f64)> {
    let raw = m.variance + m.mean * m.mean;
    let t = TruncatedNormal::new(m.mean, m.variance, partition.lower, partition.upper)?;
    let (tm, tv) = t.moments();
    Ok((raw, tv + tm * tm))
}

/// Chooses `(a, b]` so that about `tail_mass` of prior-predictive labels
/// fall outside: the empirical `tail_mass/2` and `1 - tail_mass/2`
/// quantiles of `mc_count` untruncated draws.
pub fn calibrate_truncation(prior: &PriorConfig, mc_count: usize, tail_mass: f64, seed: u64) -> Result<(f64, f64)> {
    if mc_count == 0 {
        return Err(Error::invalid("mc_count must be at least 1"));
    }
    if !(tail_mass > 0.0 && tail_mass < 1.0) {
        return Err(Error::invalid(format!("tail mass must lie in (0, 1), got {tail_mass}")));
    }
    prior.validate()?;
    let mut ys = Vec::with_capacity(mc_count);
    for i in 0..mc_count {
        let mut rng = StreamSeed::new(seed, i as u64).rng();
        let (_, truth, _) = datagen::sample_task(prior, &mut rng)?;
        ys.push(truth.sample(&mut rng));
    }
    ys.sort_by(f64::total_cmp);
    let a = empirical_quantile(&ys, 0.5 * tail_mass);
    let b = empirical_quantile(&ys, 1.0 - 0.5 * tail_mass);
    if !(a < b) {
        return Err(Error::invalid(format!("degenerate truncation interval ({a}, {b}]")));
    }
    Ok((a, b))
}

/// Linear interpolation between order statistics.
fn empirical_quantile(sorted: &[f64], level: f64) -> f64 {
    let pos = level * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 >= sorted.len() {
        sorted[sorted.len() - 1]
    } else {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    }
}

/// Largest slope of the truncated density, used by the discretization bound.
pub fn truncated_lipschitz(m: &PPDMoments, partition: &Partition) -> Result<f64> {
    let t = TruncatedNormal::new(m.mean, m.variance, partition.lower, partition.upper)?;
    Ok(normal::density_lipschitz(m.variance) / t.mass())
}
