//! Kernel evaluation, Gram assembly and spectral diagnostics.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

/// Relative tolerance below which a negative eigenvalue counts as round-off.
pub const PSD_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub enum KernelSpec {
    /// `k(x, x') = xᵀ Σ x'` with diagonal `Σ`.
    Linear { covariance: Vec<f64> },
    /// `k(x, x') = α² exp(-|x - x'|² / (2ℓ²))`.
    Rbf { amplitude: f64, lengthscale: f64 },
    /// RBF with one lengthscale per input dimension.
    ArdRbf { amplitude: f64, lengthscales: Vec<f64> },
}

impl KernelSpec {
    pub fn linear(covariance: Vec<f64>) -> Result<Self> {
        let spec = KernelSpec::Linear { covariance };
        spec.validate()?;
        Ok(spec)
    }

    pub fn linear_identity(dim: usize) -> Result<Self> {
        Self::linear(vec![1.0; dim])
    }

    /// Linear kernel with the three-level diagonal used for the Bayesian
    /// linear regression experiments: the first third of the coordinates get
    /// prior variance 2, the middle third 1, the rest 0.4.
    pub fn blr_default(dim: usize) -> Result<Self> {
        let (t1, t2) = (dim / 3, 2 * dim / 3);
        let covariance = (0..dim)
            .map(|k| if k < t1 { 2.0 } else if k < t2 { 1.0 } else { 0.4 })
            .collect();
        Self::linear(covariance)
    }

    pub fn rbf(amplitude: f64, lengthscale: f64) -> Result<Self> {
        let spec = KernelSpec::Rbf { amplitude, lengthscale };
        spec.validate()?;
        Ok(spec)
    }

    pub fn ard_rbf(amplitude: f64, lengthscales: Vec<f64>) -> Result<Self> {
        let spec = KernelSpec::ArdRbf { amplitude, lengthscales };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidKernel(format!("{name} must be positive and finite, got {v}")))
            }
        };
        match self {
            KernelSpec::Linear { covariance } => {
                if covariance.is_empty() {
                    return Err(Error::InvalidKernel("empty linear covariance".into()));
                }
                covariance.iter().try_for_each(|&v| positive("linear covariance entry", v))
            }
            KernelSpec::Rbf { amplitude, lengthscale } => {
                positive("amplitude", *amplitude)?;
                positive("lengthscale", *lengthscale)
            }
            KernelSpec::ArdRbf { amplitude, lengthscales } => {
                positive("amplitude", *amplitude)?;
                if lengthscales.is_empty() {
                    return Err(Error::InvalidKernel("empty ARD lengthscales".into()));
                }
                lengthscales.iter().try_for_each(|&v| positive("lengthscale", v))
            }
        }
    }

    /// Input dimension fixed by the kernel parameters, if any.
    pub fn input_dim(&self) -> Option<usize> {
        match self {
            KernelSpec::Linear { covariance } => Some(covariance.len()),
            KernelSpec::Rbf { .. } => None,
            KernelSpec::ArdRbf { lengthscales, .. } => Some(lengthscales.len()),
        }
    }

    /// True for kernels whose values are all positive, so that row sums of a
    /// Gram matrix are positive.
    pub fn is_strictly_positive(&self) -> bool {
        !matches!(self, KernelSpec::Linear { .. })
    }

    pub fn check_dim(&self, d: usize) -> Result<()> {
        match self.input_dim() {
            Some(expected) if expected != d => Err(Error::DimensionMismatch { expected, got: d }),
            _ => Ok(()),
        }
    }

    /// Evaluates the kernel on two points of equal length.
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        debug_assert_eq!(a.len(), b.len());
        match self {
            KernelSpec::Linear { covariance } => {
                let mut s = 0.0;
                for k in 0..a.len() {
                    s += a[k] * covariance[k] * b[k];
                }
                s
            }
            KernelSpec::Rbf { amplitude, lengthscale } => {
                let inv = 1.0 / lengthscale;
                amplitude * amplitude * (-0.5 * scaled_sq_dist(a, b, |_| inv)).exp()
            }
            KernelSpec::ArdRbf { amplitude, lengthscales } => {
                amplitude * amplitude * (-0.5 * scaled_sq_dist(a, b, |k| 1.0 / lengthscales[k])).exp()
            }
        }
    }
}

#[inline]
fn scaled_sq_dist(a: &[f64], b: &[f64], inv_scale: impl Fn(usize) -> f64) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        let t = (a[k] - b[k]) * inv_scale(k);
        s += t * t;
    }
    s
}

/// Symmetric Gram matrix of a kernel over a point set.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix(DMatrix<f64>);

impl GramMatrix {
    /// Wraps a matrix after checking that it is square and exactly symmetric.
    pub fn from_matrix(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() != values.ncols() {
            return Err(Error::DimensionMismatch { expected: values.nrows(), got: values.ncols() });
        }
        if values.nrows() == 0 {
            return Err(Error::invalid("empty Gram matrix"));
        }
        let n = values.nrows();
        for i in 0..n {
            for j in 0..i {
                if values[(i, j)] != values[(j, i)] {
                    return Err(Error::invalid(format!("Gram matrix not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(GramMatrix(values))
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    /// Row sums, accumulated left to right over the column index.
    pub fn row_sums(&self) -> DVector<f64> {
        let n = self.n();
        DVector::from_fn(n, |i, _| {
            let mut s = 0.0;
            for j in 0..n {
                s += self.0[(i, j)];
            }
            s
        })
    }

    /// `G + σ² I`.
    pub fn ridged(&self, noise_var: f64) -> DMatrix<f64> {
        let mut a = self.0.clone();
        for i in 0..self.n() {
            a[(i, i)] += noise_var;
        }
        a
    }

    /// Largest eigenvalue by Lanczos; much cheaper than the dense solver for
    /// large `n` when only the top of the spectrum is needed.
    pub fn top_eigenvalue(&self) -> Result<f64> {
        linalg::lanczos_top_eigenvalue(self.n(), 1e-12, |v, out| out.gemv(1.0, &self.0, v, 0.0))
    }
}

/// Points stored one per column so each is a contiguous slice.
pub(crate) fn columns_of(x: &DMatrix<f64>) -> DMatrix<f64> {
    x.transpose()
}

fn check_finite(x: &DMatrix<f64>, what: &str) -> Result<()> {
    if let Some(pos) = x.iter().position(|v| !v.is_finite()) {
        let (r, c) = (pos % x.nrows(), pos / x.nrows());
        return Err(Error::invalid(format!("non-finite {what} entry at ({r}, {c})")));
    }
    Ok(())
}

/// Gram matrix of `spec` over the rows of `x` (n×d). Only the upper triangle
/// is evaluated; the lower one is mirrored.
pub fn gram(spec: &KernelSpec, x: &DMatrix<f64>) -> Result<GramMatrix> {
    let n = x.nrows();
    if n == 0 {
        return Err(Error::invalid("gram needs at least one point"));
    }
    spec.check_dim(x.ncols())?;
    check_finite(x, "feature")?;
    let pts = columns_of(x);
    let mut g = DMatrix::zeros(n, n);
    for j in 0..n {
        let xj = pts.column(j);
        for i in 0..=j {
            let v = spec.eval(pts.column(i).as_slice(), xj.as_slice());
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    Ok(GramMatrix(g))
}

/// `k_x`: kernel values between every row of `x` and the query.
pub fn cross_vector(spec: &KernelSpec, x: &DMatrix<f64>, query: &[f64]) -> Result<DVector<f64>> {
    if query.len() != x.ncols() {
        return Err(Error::DimensionMismatch { expected: x.ncols(), got: query.len() });
    }
    spec.check_dim(x.ncols())?;
    check_finite(x, "feature")?;
    if query.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite query entry"));
    }
    let pts = columns_of(x);
    Ok(DVector::from_fn(x.nrows(), |i, _| spec.eval(pts.column(i).as_slice(), query)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralSummary {
    /// Largest eigenvalue of `G`, or of `D⁻¹(G + σ²I)` when preconditioned.
    pub lambda_max: f64,
    /// Smallest eigenvalue of the same matrix.
    pub lambda_min: f64,
    pub noise_var: f64,
    pub preconditioned: bool,
    pub cond: f64,
    pub row_sums: DVector<f64>,
    pub step_bound: f64,
}

impl SpectralSummary {
    /// Extreme eigenvalues of the matrix the iteration actually contracts:
    /// `G + σ²I` or `D⁻¹(G + σ²I)`.
    pub fn system_extremes(&self) -> (f64, f64) {
        if self.preconditioned {
            (self.lambda_max, self.lambda_min)
        } else {
            (self.lambda_max + self.noise_var, self.lambda_min + self.noise_var)
        }
    }
}

/// Spectrum of the ridged system, optionally Jacobi preconditioned by the
/// kernel row sums. The preconditioned spectrum is computed on the similar
/// symmetric matrix `D^{-1/2}(G + σ²I)D^{-1/2}`.
pub fn spectral_summary(g: &GramMatrix, noise_var: f64, preconditioned: bool) -> Result<SpectralSummary> {
    if !(noise_var.is_finite() && noise_var > 0.0) {
        return Err(Error::invalid(format!("noise variance must be positive, got {noise_var}")));
    }
    let row_sums = g.row_sums();
    if !preconditioned {
        let ev = linalg::symmetric_eigenvalues(g.values())?;
        let (l1, ln) = (ev[0], ev[ev.len() - 1]);
        check_psd(l1, ln, g)?;
        return Ok(SpectralSummary {
            lambda_max: l1,
            lambda_min: ln,
            noise_var,
            preconditioned,
            cond: (l1 + noise_var) / (ln + noise_var),
            row_sums,
            step_bound: 2.0 / (l1 + noise_var),
        });
    }
    if let Some(i) = row_sums.iter().position(|&s| !(s > 0.0)) {
        return Err(Error::InvalidKernel(format!(
            "row sum {} at index {i} is not positive; preconditioning needs a strictly positive kernel",
            row_sums[i]
        )));
    }
    let scale = row_sums.map(|s| 1.0 / s.sqrt());
    let n = g.n();
    let mut a = g.ridged(noise_var);
    for j in 0..n {
        for i in 0..n {
            a[(i, j)] *= scale[i] * scale[j];
        }
    }
    let ev = linalg::symmetric_eigenvalues(&a)?;
    let (l1, ln) = (ev[0], ev[ev.len() - 1]);
    if !(ln > 0.0) {
        return Err(Error::numeric(format!(
            "preconditioned system not positive definite: smallest eigenvalue {ln:e} ({})",
            linalg::diagnostics(g.values())
        )));
    }
    Ok(SpectralSummary {
        lambda_max: l1,
        lambda_min: ln,
        noise_var,
        preconditioned,
        cond: l1 / ln,
        row_sums,
        step_bound: 2.0 / l1,
    })
}

/// Largest eigenvalue of the iterated system (`G + σ²I`, or `D⁻¹(G + σ²I)`
/// when preconditioned) by Lanczos, without the full spectrum.
pub fn system_top_eigenvalue(g: &GramMatrix, noise_var: f64, preconditioned: bool) -> Result<f64> {
    if !(noise_var.is_finite() && noise_var > 0.0) {
        return Err(Error::invalid(format!("noise variance must be positive, got {noise_var}")));
    }
    if !preconditioned {
        return Ok(g.top_eigenvalue()? + noise_var);
    }
    let row_sums = g.row_sums();
    if let Some(i) = row_sums.iter().position(|&s| !(s > 0.0)) {
        return Err(Error::InvalidKernel(format!("row sum {} at index {i} is not positive", row_sums[i])));
    }
    let scale = row_sums.map(|s| 1.0 / s.sqrt());
    let a = g.ridged(noise_var);
    let mut tmp = DVector::zeros(g.n());
    linalg::lanczos_top_eigenvalue(g.n(), 1e-12, |v, out| {
        tmp.copy_from(v);
        tmp.component_mul_assign(&scale);
        out.gemv(1.0, &a, &tmp, 0.0);
        out.component_mul_assign(&scale);
    })
}

fn check_psd(l1: f64, ln: f64, g: &GramMatrix) -> Result<()> {
    if ln < -PSD_TOLERANCE * l1.abs() {
        return Err(Error::numeric(format!(
            "Gram matrix not PSD: smallest eigenvalue {ln:e} vs largest {l1:e} ({})",
            linalg::diagnostics(g.values())
        )));
    }
    Ok(())
}
