//! Exact posterior predictive computations: moments, marginal likelihood,
//! hierarchical mixtures, binned references and grid-search empirical Bayes.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::head::{BinnedDistribution, Partition};
use crate::kernels::{self, KernelSpec};
use crate::linalg;
use crate::normal;

/// Relative slack under `σ²` that is attributed to round-off in `τ`.
pub const TAU_CLAMP_RELATIVE: f64 = 1e-10;

/// A regression context `(X, Y)` and one query point.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextSet {
    x: DMatrix<f64>,
    y: DVector<f64>,
    query: DVector<f64>,
}

impl ContextSet {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>, query: DVector<f64>) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::invalid("context must contain at least one point"));
        }
        if x.ncols() == 0 {
            return Err(Error::invalid("feature dimension must be at least 1"));
        }
        if y.len() != x.nrows() {
            return Err(Error::DimensionMismatch { expected: x.nrows(), got: y.len() });
        }
        if query.len() != x.ncols() {
            return Err(Error::DimensionMismatch { expected: x.ncols(), got: query.len() });
        }
        if x.iter().chain(y.iter()).chain(query.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("context contains non-finite values"));
        }
        Ok(ContextSet { x, y, query })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn query(&self) -> &DVector<f64> {
        &self.query
    }

    /// Reorders the context points; `order[k]` is the old index of new point `k`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let n = self.n();
        let mut seen = vec![false; n];
        if order.len() != n || order.iter().any(|&i| i >= n || std::mem::replace(&mut seen[i], true)) {
            return Err(Error::invalid("order is not a permutation of the context"));
        }
        let x = DMatrix::from_fn(n, self.dim(), |i, k| self.x[(order[i], k)]);
        let y = DVector::from_fn(n, |i, _| self.y[order[i]]);
        ContextSet::new(x, y, self.query.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PPDMoments {
    pub mean: f64,
    /// Predictive variance of a new label, noise included.
    pub variance: f64,
}

/// Anything that can report the probability of an interval.
pub trait PredictiveLaw {
    /// Untruncated probability of `(lo, hi]`.
    fn interval_mass(&self, lo: f64, hi: f64) -> f64;
    fn mean(&self) -> f64;
    fn variance(&self) -> f64;
}

impl PredictiveLaw for PPDMoments {
    fn interval_mass(&self, lo: f64, hi: f64) -> f64 {
        normal::interval_mass(self.mean, self.variance.sqrt(), lo, hi)
    }

    fn mean(&self) -> f64 {
        self.mean
    }

    fn variance(&self) -> f64 {
        self.variance
    }
}

/// Factorization of `G + σ²I` for one kernel and context.
struct Posterior {
    chol: Cholesky<f64, Dyn>,
}

impl Posterior {
    fn new(spec: &KernelSpec, noise_var: f64, x: &DMatrix<f64>) -> Result<Self> {
        if !(noise_var.is_finite() && noise_var > 0.0) {
            return Err(Error::invalid(format!("noise variance must be positive, got {noise_var}")));
        }
        let g = kernels::gram(spec, x)?;
        let chol = linalg::cholesky_with_jitter(&g.ridged(noise_var))?;
        Ok(Posterior { chol })
    }

    fn log_marginal_likelihood(&self, y: &DVector<f64>) -> f64 {
        let n = y.len() as f64;
        let alpha = self.chol.solve(y);
        let half_logdet: f64 = self.chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum();
        -0.5 * y.dot(&alpha) - half_logdet - 0.5 * n * (2.0 * PI).ln()
    }

    fn moments(&self, spec: &KernelSpec, noise_var: f64, ctx: &ContextSet) -> Result<PPDMoments> {
        let q = ctx.query.as_slice();
        let kx = kernels::cross_vector(spec, &ctx.x, q)?;
        let mean = kx.dot(&self.chol.solve(&ctx.y));
        let w = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&kx)
            .ok_or_else(|| Error::numeric("singular Cholesky factor"))?;
        let prior_var = spec.eval(q, q) + noise_var;
        let mut variance = prior_var - w.norm_squared();
        if variance < noise_var {
            if variance < noise_var * (1.0 - TAU_CLAMP_RELATIVE) {
                log::warn!(
                    "predictive variance {variance:e} below noise variance {noise_var:e} beyond round-off; clamping"
                );
            }
            variance = noise_var;
        }
        Ok(PPDMoments { mean, variance })
    }
}

/// Posterior predictive mean and variance at the context's query point.
pub fn exact_moments(spec: &KernelSpec, noise_var: f64, ctx: &ContextSet) -> Result<PPDMoments> {
    Posterior::new(spec, noise_var, &ctx.x)?.moments(spec, noise_var, ctx)
}

/// Log density of `Y ~ N(0, G + σ²I)`.
pub fn log_marginal_likelihood(
    spec: &KernelSpec,
    noise_var: f64,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<f64> {
    if y.len() != x.nrows() {
        return Err(Error::DimensionMismatch { expected: x.nrows(), got: y.len() });
    }
    Ok(Posterior::new(spec, noise_var, x)?.log_marginal_likelihood(y))
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperComponent {
    pub kernel: KernelSpec,
    pub noise_var: f64,
    pub weight: f64,
}

/// Discrete prior over kernel hyperparameters and noise level.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperPrior {
    components: Vec<HyperComponent>,
}

impl HyperPrior {
    pub fn new(components: Vec<HyperComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::invalid("hyperprior needs at least one component"));
        }
        let mut total = 0.0;
        for c in &components {
            c.kernel.validate()?;
            if !(c.weight.is_finite() && c.weight > 0.0) {
                return Err(Error::invalid(format!("prior weight must be positive, got {}", c.weight)));
            }
            if !(c.noise_var.is_finite() && c.noise_var > 0.0) {
                return Err(Error::invalid(format!("noise variance must be positive, got {}", c.noise_var)));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("prior weights sum to {total}, not 1")));
        }
        Ok(HyperPrior { components })
    }

    /// Uniform prior over an RBF grid of lengthscales and noise standard
    /// deviations, lengthscale-major.
    pub fn rbf_grid(amplitude: f64, lengthscales: &[f64], noise_sds: &[f64]) -> Result<Self> {
        let h = (lengthscales.len() * noise_sds.len()) as f64;
        let mut components = Vec::new();
        for &l in lengthscales {
            for &s in noise_sds {
                components.push(HyperComponent {
                    kernel: KernelSpec::rbf(amplitude, l)?,
                    noise_var: s * s,
                    weight: 1.0 / h,
                });
            }
        }
        Self::new(components)
    }

    pub fn components(&self) -> &[HyperComponent] {
        &self.components
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureComponent {
    pub weight: f64,
    pub moments: PPDMoments,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixturePPD {
    pub components: Vec<MixtureComponent>,
}

impl PredictiveLaw for MixturePPD {
    fn interval_mass(&self, lo: f64, hi: f64) -> f64 {
        self.components.iter().map(|c| c.weight * c.moments.interval_mass(lo, hi)).sum()
    }

    fn mean(&self) -> f64 {
        self.components.iter().map(|c| c.weight * c.moments.mean).sum()
    }

    fn variance(&self) -> f64 {
        let m = self.mean();
        self.components
            .iter()
            .map(|c| c.weight * (c.moments.variance + (c.moments.mean - m).powi(2)))
            .sum()
    }
}

/// Posterior predictive under a discrete hyperprior: a Gaussian mixture whose
/// weights are the hyperparameter posteriors.
pub fn hierarchical_mixture(prior: &HyperPrior, ctx: &ContextSet) -> Result<MixturePPD> {
    let mut logw = Vec::with_capacity(prior.components.len());
    let mut moments = Vec::with_capacity(prior.components.len());
    for c in &prior.components {
        let post = Posterior::new(&c.kernel, c.noise_var, &ctx.x)?;
        logw.push(c.weight.ln() + post.log_marginal_likelihood(&ctx.y));
        moments.push(post.moments(&c.kernel, c.noise_var, ctx)?);
    }
    let shift = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = logw.iter().map(|l| (l - shift).exp()).collect();
    let total: f64 = raw.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::numeric(format!("mixture weights degenerate (log weights {logw:?})")));
    }
    Ok(MixturePPD {
        components: raw
            .iter()
            .zip(moments)
            .map(|(w, m)| MixtureComponent { weight: w / total, moments: m })
            .collect(),
    })
}

/// Exact truncated-and-binned law: each bin gets its CDF difference, then
/// the masses are renormalized over the partition.
pub fn reference_binned(law: &impl PredictiveLaw, partition: &Partition) -> Result<BinnedDistribution> {
    let masses: Vec<f64> = (0..partition.bins())
        .map(|c| law.interval_mass(partition.edge(c), partition.edge(c + 1)))
        .collect();
    let total: f64 = masses.iter().sum();
    if !(total >= 1e-12) {
        return Err(Error::InvalidPartition(format!(
            "interval ({}, {}] carries mass {total:e} under the predictive law",
            partition.lower(),
            partition.upper()
        )));
    }
    BinnedDistribution::from_masses(partition.clone(), masses)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EbFit {
    pub index: usize,
    pub kernel: KernelSpec,
    pub noise_var: f64,
    pub log_likelihood: f64,
}

/// Grid search for the marginal-likelihood maximizer. Ties keep the earliest
/// grid point.
pub fn empirical_bayes_fit(grid: &[(KernelSpec, f64)], x: &DMatrix<f64>, y: &DVector<f64>) -> Result<EbFit> {
    if grid.is_empty() {
        return Err(Error::invalid("empty hyperparameter grid"));
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, (spec, noise_var)) in grid.iter().enumerate() {
        let ll = log_marginal_likelihood(spec, *noise_var, x, y)?;
        if best.is_none_or(|(_, b)| ll > b) {
            best = Some((i, ll));
        }
    }
    let (index, log_likelihood) = best.expect("grid is nonempty");
    Ok(EbFit { index, kernel: grid[index].0.clone(), noise_var: grid[index].1, log_likelihood })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_point(x: f64, y: f64, q: f64) -> ContextSet {
        ContextSet::new(
            DMatrix::from_element(1, 1, x),
            DVector::from_element(1, y),
            DVector::from_element(1, q),
        )
        .unwrap()
    }

    #[test]
    fn rank_one_moments() {
        let spec = KernelSpec::linear_identity(1).unwrap();
        let m = exact_moments(&spec, 1.0, &one_point(1.0, 2.0, 1.0)).unwrap();
        assert!((m.mean - 1.0).abs() < 1e-15);
        assert!((m.variance - 1.5).abs() < 1e-15);
    }

    #[test]
    fn orthogonal_query_keeps_prior() {
        let spec = KernelSpec::linear_identity(2).unwrap();
        let ctx = ContextSet::new(
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DVector::from_element(1, 3.0),
            DVector::from_vec(vec![0.0, 2.0]),
        )
        .unwrap();
        let m = exact_moments(&spec, 0.5, &ctx).unwrap();
        assert_eq!(m.mean, 0.0);
        assert_eq!(m.variance, 4.5);
    }

    #[test]
    fn empty_context_rejected() {
        let r = ContextSet::new(DMatrix::zeros(0, 1), DVector::zeros(0), DVector::zeros(1));
        assert!(r.is_err());
    }

    #[test]
    fn scalar_log_likelihood() {
        let spec = KernelSpec::linear_identity(1).unwrap();
        let ll = log_marginal_likelihood(&spec, 1.0, &DMatrix::from_element(1, 1, 1.0), &DVector::zeros(1)).unwrap();
        let expected = -0.5 * 2f64.ln() - 0.5 * (2.0 * PI).ln();
        assert!((ll - expected).abs() < 1e-15);
    }

    #[test]
    fn single_component_mixture_is_exact() {
        let spec = KernelSpec::rbf(1.0, 0.8).unwrap();
        let prior = HyperPrior::new(vec![HyperComponent { kernel: spec.clone(), noise_var: 0.2, weight: 1.0 }]).unwrap();
        let ctx = one_point(0.3, -0.4, 0.1);
        let mix = hierarchical_mixture(&prior, &ctx).unwrap();
        assert_eq!(mix.components.len(), 1);
        assert_eq!(mix.components[0].weight, 1.0);
        assert_eq!(mix.components[0].moments, exact_moments(&spec, 0.2, &ctx).unwrap());
    }

    #[test]
    fn identical_components_keep_prior_weights() {
        let spec = KernelSpec::rbf(1.0, 0.8).unwrap();
        let prior = HyperPrior::new(vec![
            HyperComponent { kernel: spec.clone(), noise_var: 0.2, weight: 0.25 },
            HyperComponent { kernel: spec, noise_var: 0.2, weight: 0.75 },
        ])
        .unwrap();
        let mix = hierarchical_mixture(&prior, &one_point(0.3, -0.4, 0.1)).unwrap();
        assert!((mix.components[0].weight - 0.25).abs() < 1e-15);
        assert!((mix.components[1].weight - 0.75).abs() < 1e-15);
    }

    #[test]
    fn eb_ties_keep_first() {
        let a = KernelSpec::rbf(1.0, 0.5).unwrap();
        let b = KernelSpec::rbf(1.0, 2.0).unwrap();
        let grid = vec![(b.clone(), 0.1), (a.clone(), 0.1), (a, 0.1)];
        let x = DMatrix::from_row_slice(3, 1, &[0.0, 0.5, 1.0]);
        let y = DVector::from_vec(vec![1.0, -1.0, 1.0]);
        let fit = empirical_bayes_fit(&grid, &x, &y).unwrap();
        assert_eq!(fit.index, 1);
        let single = empirical_bayes_fit(&grid[..1], &x, &y).unwrap();
        assert_eq!(single.index, 0);
        assert_eq!(single.kernel, b);
    }
}
