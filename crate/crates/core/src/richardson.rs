//! Richardson iteration for the kernel ridge systems `(G + σ²I)α = v`,
//! plain and Jacobi preconditioned, evaluated at the context points and at
//! the query.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::kernels::{GramMatrix, SpectralSummary};

/// Magnitude beyond which a state counts as diverged.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;

/// Step sizes indexed by update number `k = 1, 2, …`.
#[derive(Debug, Clone, PartialEq)]
pub enum StepSchedule {
    Constant(f64),
    /// Entry `k - 1` is the step of update `k`.
    PerLayer(Vec<f64>),
}

impl StepSchedule {
    /// Step of update `k ≥ 1`.
    pub fn at(&self, k: usize) -> f64 {
        debug_assert!(k >= 1);
        match self {
            StepSchedule::Constant(eta) => *eta,
            StepSchedule::PerLayer(etas) => etas[k - 1],
        }
    }

    /// Checks that every step is finite and nonnegative and that a per-layer
    /// schedule covers `updates` updates.
    pub fn validate(&self, updates: usize) -> Result<()> {
        let check = |eta: f64| {
            if eta.is_finite() && eta >= 0.0 {
                Ok(())
            } else {
                Err(Error::invalid(format!("step size must be finite and nonnegative, got {eta}")))
            }
        };
        match self {
            StepSchedule::Constant(eta) => check(*eta),
            StepSchedule::PerLayer(etas) => {
                if etas.len() < updates {
                    return Err(Error::invalid(format!(
                        "per-layer schedule has {} entries, {updates} updates requested",
                        etas.len()
                    )));
                }
                etas.iter().try_for_each(|&e| check(e))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverState {
    /// Iterate at the context points.
    pub context: DVector<f64>,
    /// Iterate extended to the query.
    pub query: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverTrajectory {
    /// States `u⁽⁰⁾ … u⁽ᴸ⁾`; the first is zero.
    pub states: Vec<SolverState>,
    /// First iteration at which any entry was non-finite or exceeded
    /// [`DIVERGENCE_THRESHOLD`] in magnitude.
    pub diverged_at: Option<usize>,
}

impl SolverTrajectory {
    pub fn diverged(&self) -> bool {
        self.diverged_at.is_some()
    }

    pub fn last(&self) -> &SolverState {
        self.states.last().expect("trajectory holds the initial state")
    }
}

/// Plain Richardson iteration from zero:
/// `u⁽ᵏ⁾(x) = (1 - ηₖσ²) u⁽ᵏ⁻¹⁾(x) + ηₖ Σᵢ κ(xᵢ, x)(vᵢ - u⁽ᵏ⁻¹⁾(xᵢ))`
/// at every context point and at the query.
pub fn richardson_run(
    g: &GramMatrix,
    kx: &DVector<f64>,
    v: &DVector<f64>,
    noise_var: f64,
    schedule: &StepSchedule,
    depth: usize,
) -> Result<SolverTrajectory> {
    run(g, kx, v, noise_var, schedule, schedule, depth, false)
}

/// Richardson iteration where the drift `-σ² u` and the residual sum carry
/// separate step schedules.
pub fn richardson_run_dual(
    g: &GramMatrix,
    kx: &DVector<f64>,
    v: &DVector<f64>,
    noise_var: f64,
    residual: &StepSchedule,
    drift: &StepSchedule,
    depth: usize,
    preconditioned: bool,
) -> Result<SolverTrajectory> {
    run(g, kx, v, noise_var, residual, drift, depth, preconditioned)
}

/// Jacobi-preconditioned Richardson iteration: each coordinate's step is
/// divided by its kernel row sum over the context, `s(x) = Σᵢ κ(xᵢ, x)`.
pub fn preconditioned_run(
    g: &GramMatrix,
    kx: &DVector<f64>,
    v: &DVector<f64>,
    noise_var: f64,
    schedule: &StepSchedule,
    depth: usize,
) -> Result<SolverTrajectory> {
    run(g, kx, v, noise_var, schedule, schedule, depth, true)
}

#[allow(clippy::too_many_arguments)]
fn run(
    g: &GramMatrix,
    kx: &DVector<f64>,
    v: &DVector<f64>,
    noise_var: f64,
    residual: &StepSchedule,
    drift: &StepSchedule,
    depth: usize,
    preconditioned: bool,
) -> Result<SolverTrajectory> {
    let n = g.n();
    if kx.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: kx.len() });
    }
    if v.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: v.len() });
    }
    if depth == 0 {
        return Err(Error::invalid("depth must be at least 1"));
    }
    if !(noise_var.is_finite() && noise_var >= 0.0) {
        return Err(Error::invalid(format!("noise variance must be nonnegative, got {noise_var}")));
    }
    residual.validate(depth)?;
    drift.validate(depth)?;
    let gv = g.values();

    // Normalizers: one per context point plus one for the query.
    let scales: Vec<f64> = if preconditioned {
        let mut s: Vec<f64> = g.row_sums().iter().copied().collect();
        let mut sx = 0.0;
        for i in 0..n {
            sx += kx[i];
        }
        s.push(sx);
        if let Some(i) = s.iter().position(|&v| !(v > 0.0)) {
            let which = if i == n { "query".to_string() } else { format!("context point {i}") };
            return Err(Error::InvalidKernel(format!("kernel row sum {} at {which} is not positive", s[i])));
        }
        s
    } else {
        vec![1.0; n + 1]
    };

    let mut states = Vec::with_capacity(depth + 1);
    states.push(SolverState { context: DVector::zeros(n), query: 0.0 });
    let mut diverged_at = None;
    let mut resid = vec![0.0; n];
    for k in 1..=depth {
        let (eta_v, eta_s) = (residual.at(k), drift.at(k));
        let prev = &states[k - 1];
        for i in 0..n {
            resid[i] = v[i] - prev.context[i];
        }
        let update = |u: f64, col: &dyn Fn(usize) -> f64, scale: f64| {
            let mut acc = 0.0;
            for (i, r) in resid.iter().enumerate() {
                acc += col(i) * r;
            }
            (1.0 - eta_s * noise_var / scale) * u + (eta_v / scale) * acc
        };
        let context = DVector::from_fn(n, |j, _| update(prev.context[j], &|i| gv[(i, j)], scales[j]));
        let query = update(prev.query, &|i| kx[i], scales[n]);
        let state = SolverState { context, query };
        if diverged_at.is_none() && !state_bounded(&state) {
            diverged_at = Some(k);
        }
        states.push(state);
    }
    Ok(SolverTrajectory { states, diverged_at })
}

fn state_bounded(s: &SolverState) -> bool {
    s.context.iter().chain(std::iter::once(&s.query)).all(|v| v.abs() <= DIVERGENCE_THRESHOLD)
}

/// Step size within the convergence region: `1/λ₁` of the iterated system.
pub fn default_step(summary: &SpectralSummary) -> f64 {
    1.0 / summary.system_extremes().0
}

/// Contraction factor `1 - η λₙ` of the iterated system at step `eta`.
pub fn contraction_factor(eta: f64, summary: &SpectralSummary) -> f64 {
    1.0 - eta * summary.system_extremes().1
}

/// Optimal constant step `η* = 2/(λ₁ + λₙ)` of the iterated system and its
/// factor `ρ* = 1 - 2/(cond + 1)`.
pub fn optimal_step(summary: &SpectralSummary) -> (f64, f64) {
    let (hi, lo) = summary.system_extremes();
    (2.0 / (hi + lo), 1.0 - 2.0 / (summary.cond + 1.0))
}

/// Quantities entering the query-error bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundNorms {
    pub lambda_max: f64,
    pub lambda_min: f64,
    pub noise_var: f64,
    pub rhs_norm: f64,
    pub cross_norm: f64,
}

/// `exp(-(1-ρ)L) · ‖k_x‖ ‖v‖ / (λₙ + σ²)`.
pub fn predicted_error_bound(rho: f64, depth: usize, norms: &BoundNorms) -> Result<f64> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::invalid(format!("convergence factor must lie in (0, 1), got {rho}")));
    }
    let prefactor = norms.cross_norm * norms.rhs_norm / (norms.lambda_min + norms.noise_var);
    Ok((-(1.0 - rho) * depth as f64).exp() * prefactor)
}
