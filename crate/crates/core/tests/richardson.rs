mod common;

use common::{gaussian_design, rbf_context, to_mat, vec_of};
use nalgebra::{DMatrix, DVector};
use ppd_core::gp::exact_moments;
use ppd_core::kernels::{cross_vector, gram, spectral_summary, GramMatrix, KernelSpec};
use ppd_core::richardson::{
    contraction_factor, default_step, optimal_step, preconditioned_run, predicted_error_bound, richardson_run,
    BoundNorms, SolverTrajectory, StepSchedule,
};
use ppd_testkit::{jacobi_eigen, ls_slope};

const S2: f64 = 0.2;

struct Problem {
    g: GramMatrix,
    kx: DVector<f64>,
    y: DVector<f64>,
    mu: f64,
}

fn problem(n: usize, d: usize, seed: u64) -> Problem {
    let spec = KernelSpec::rbf(1.0, 0.8).unwrap();
    let ctx = rbf_context(n, d, seed);
    let g = gram(&spec, ctx.x()).unwrap();
    let kx = cross_vector(&spec, ctx.x(), ctx.query().as_slice()).unwrap();
    let mu = exact_moments(&spec, S2, &ctx).unwrap().mean;
    Problem { g, kx, y: ctx.y().clone(), mu }
}

/// `(G + σ²I)⁻¹ G v` through an independent eigensolver.
fn fixed_point(g: &GramMatrix, v: &DVector<f64>) -> Vec<f64> {
    let mut a = to_mat(g.values());
    for (i, row) in a.iter_mut().enumerate() {
        row[i] += S2;
    }
    let gv = vec_of(&(g.values() * v));
    jacobi_eigen(&a).solve(&gv)
}

fn error_norms(t: &SolverTrajectory, target: &[f64]) -> Vec<f64> {
    t.states
        .iter()
        .map(|s| s.context.iter().zip(target).map(|(u, t)| (u - t).powi(2)).sum::<f64>().sqrt())
        .collect()
}

fn plain_run_error(seed: u64, depth: usize) -> f64 {
    let p = problem(32, 2, seed);
    let s = spectral_summary(&p.g, S2, false).unwrap();
    let eta = 1.0 / (s.lambda_max + S2);
    let t = richardson_run(&p.g, &p.kx, &p.y, S2, &StepSchedule::Constant(eta), depth).unwrap();
    assert!(t.states[0].query == 0.0 && t.states[0].context.iter().all(|&u| u == 0.0));
    (t.last().query - p.mu).abs()
}

/// 500 steps at η = 1/(λ₁+σ²). With σ² = 0.2 these systems have condition
/// numbers of 60-90, so 500 steps leave errors around 1e-5 on most seeds.
#[test]
#[ignore = "unattainable: n=32 RBF systems have cond ≈ 60-90, 500 steps reach 1e-6 on only 4 of 20 seeds"]
fn plain_run_reaches_predictive_mean_in_500_steps() {
    let err = plain_run_error(1, 500);
    assert!(err <= 1e-6, "error {err}");
}

#[test]
fn plain_run_converges_to_predictive_mean() {
    for seed in 0..20 {
        let err = plain_run_error(seed, 1500);
        assert!(err <= 1e-6, "seed {seed}: error {err}");
    }
}

#[test]
fn preconditioned_run_converges_to_predictive_mean() {
    let p = problem(64, 2, 2);
    let eta = 2.0 / (2.0 + S2);
    let t = preconditioned_run(&p.g, &p.kx, &p.y, S2, &StepSchedule::Constant(eta), 2000).unwrap();
    assert!((t.last().query - p.mu).abs() <= 1e-6, "{} vs {}", t.last().query, p.mu);
}

#[test]
fn both_iterations_share_the_fixed_point() {
    let p = problem(16, 2, 3);
    let s = spectral_summary(&p.g, S2, false).unwrap();
    let plain = richardson_run(&p.g, &p.kx, &p.y, S2, &StepSchedule::Constant(default_step(&s)), 4000).unwrap();
    let prec = preconditioned_run(&p.g, &p.kx, &p.y, S2, &StepSchedule::Constant(1.0), 4000).unwrap();
    let gv = p.g.values() * &p.y;
    let scale = gv.amax();
    for t in [plain, prec] {
        let u = &t.last().context;
        let resid = p.g.ridged(S2) * u - &gv;
        assert!(resid.amax() < 1e-6 * scale, "residual {}", resid.amax());
    }
}

#[test]
fn optimal_step_contracts_at_predicted_rate() {
    let p = problem(24, 2, 4);
    let s = spectral_summary(&p.g, S2, false).unwrap();
    let (eta, rho) = optimal_step(&s);
    let target = fixed_point(&p.g, &p.y);
    let t = richardson_run(&p.g, &p.kx, &p.y, S2, &StepSchedule::Constant(eta), 200).unwrap();
    let errs = error_norms(&t, &target);
    let mut checked = 0;
    for w in errs.windows(2) {
        if w[0] > 1e-8 {
            assert!(w[1] / w[0] <= rho + 1e-9, "ratio {} > {}", w[1] / w[0], rho);
            checked += 1;
        }
    }
    assert!(checked > 10);
}

#[test]
fn small_steps_decay_monotonically() {
    let p = problem(24, 2, 5);
    let s = spectral_summary(&p.g, S2, false).unwrap();
    let eta = 0.9 / (s.lambda_max + S2);
    let rho = contraction_factor(eta, &s);
    let target = fixed_point(&p.g, &p.y);
    let t = richardson_run(&p.g, &p.kx, &p.y, S2, &StepSchedule::Constant(eta), 300).unwrap();
    let errs = error_norms(&t, &target);
    for w in errs.windows(2) {
        if w[0] > 1e-8 {
            assert!(w[1] <= w[0]);
            assert!(w[1] / w[0] <= rho + 1e-9);
        }
    }
}

#[test]
fn query_error_stays_below_bound() {
    for seed in 0..10 {
        let p = problem(64, 2, 10 + seed);
        let s = spectral_summary(&p.g, S2, false).unwrap();
        let eta = default_step(&s);
        let rho = contraction_factor(eta, &s);
        let norms = BoundNorms {
            lambda_max: s.lambda_max,
            lambda_min: s.lambda_min,
            noise_var: S2,
            rhs_norm: p.y.norm(),
            cross_norm: p.kx.norm(),
        };
        let t = richardson_run(&p.g, &p.kx, &p.y, S2, &StepSchedule::Constant(eta), 64).unwrap();
        for l in 1..=64 {
            let err = (t.states[l].query - p.mu).abs();
            assert!(err <= predicted_error_bound(rho, l, &norms).unwrap(), "seed {seed} L={l}");
        }
    }
}

#[test]
fn oversized_step_diverges() {
    let p = problem(32, 2, 6);
    let s = spectral_summary(&p.g, S2, false).unwrap();
    let eta = 2.0 / (s.lambda_max + S2) * (1.0 + 1e-3);
    let t = richardson_run(&p.g, &p.kx, &p.y, S2, &StepSchedule::Constant(eta), 20000).unwrap();
    let norm = |l: usize| t.states[l].context.norm();
    assert!(norm(128) > norm(64));
    assert!(norm(4096) > 10.0 * norm(128));
    assert!(t.diverged());
}

#[test]
fn admissible_step_falls_like_inverse_n() {
    let d = 16;
    let spec = KernelSpec::blr_default(d).unwrap();
    let ns: Vec<usize> = (1..=10).map(|i| 100 * i).collect();
    let bounds: Vec<f64> = ns
        .iter()
        .map(|&n| {
            (0..20u64)
                .map(|t| 2.0 / (gram(&spec, &gaussian_design(n, d, 4000 + t)).unwrap().top_eigenvalue().unwrap() + S2))
                .sum::<f64>()
                / 20.0
        })
        .collect();
    let lx: Vec<f64> = ns.iter().map(|&n| (n as f64).ln()).collect();
    let ly: Vec<f64> = bounds.iter().map(|b| b.ln()).collect();
    let slope = ls_slope(&lx, &ly);
    assert!((slope + 1.0).abs() <= 0.15, "slope {slope}");
}

#[test]
fn mismatched_lengths_rejected() {
    let g = GramMatrix::from_matrix(DMatrix::identity(3, 3)).unwrap();
    let r = richardson_run(&g, &DVector::zeros(2), &DVector::zeros(3), S2, &StepSchedule::Constant(0.1), 5);
    assert!(r.is_err());
    let neg = GramMatrix::from_matrix(DMatrix::from_row_slice(2, 2, &[1.0, -2.0, -2.0, 1.0])).unwrap();
    let p = preconditioned_run(&neg, &DVector::from_element(2, 1.0), &DVector::zeros(2), S2, &StepSchedule::Constant(0.1), 5);
    assert!(matches!(p, Err(ppd_core::Error::InvalidKernel(_))));
}
