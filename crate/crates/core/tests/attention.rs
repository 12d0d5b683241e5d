mod common;

use common::{rbf_context, to_mat, vec_of};
use nalgebra::DMatrix;
use ppd_core::attention::{
    attn, build_tokens, construct_weights, forward, AttentionMask, MaskKind, Rows, Transformer, TransformerConfig,
};
use ppd_core::gp::{exact_moments, ContextSet};
use ppd_core::kernels::{cross_vector, gram, spectral_summary, KernelSpec};
use ppd_core::richardson::{preconditioned_run, richardson_run, richardson_run_dual, StepSchedule};

const S2: f64 = 0.2;

fn rbf() -> KernelSpec {
    KernelSpec::rbf(1.0, 0.8).unwrap()
}

fn config(d: usize, depth: usize, eta: f64, normalized: bool) -> TransformerConfig {
    TransformerConfig::new(rbf(), S2, d, depth, StepSchedule::Constant(eta), normalized).unwrap()
}

#[test]
fn weights_have_only_the_allowed_nonzeros() {
    let d = 3;
    let r = Rows { dim: d };
    let cfgs = [
        config(d, 6, 0.3, false),
        config(d, 4, 0.7, true),
        config(d, 5, 0.3, false).with_drift_schedule(StepSchedule::PerLayer(vec![0.1, 0.2, 0.3, 0.4])).unwrap(),
        TransformerConfig::new(rbf(), S2, d, 4, StepSchedule::PerLayer(vec![0.5, 0.0, 0.25]), false).unwrap(),
    ];
    for cfg in &cfgs {
        let layers = construct_weights(cfg).unwrap();
        assert_eq!(layers.len(), cfg.depth);
        for (l, w) in layers.iter().enumerate() {
            let mut sel = DMatrix::zeros(d + 4, d + 4);
            for k in 0..d {
                sel[(k, k)] = 1.0;
            }
            assert_eq!(w.key, sel);
            assert_eq!(w.query, sel);
            let allowed_v: Vec<(usize, usize)> = if l == 0 {
                vec![(r.cross(), r.label())]
            } else {
                vec![(r.mean(), r.label()), (r.var(), r.cross()), (r.mean(), r.mean()), (r.var(), r.var())]
            };
            let allowed_s: Vec<(usize, usize)> =
                if l == 0 { vec![] } else { vec![(r.mean(), r.mean()), (r.var(), r.var())] };
            for i in 0..d + 4 {
                for j in 0..d + 4 {
                    if !allowed_v.contains(&(i, j)) {
                        assert_eq!(w.value[(i, j)], 0.0, "V({i},{j}) layer {l}");
                    }
                    if !allowed_s.contains(&(i, j)) {
                        assert_eq!(w.skip[(i, j)], 0.0, "S({i},{j}) layer {l}");
                    }
                }
            }
            if l == 0 {
                assert_eq!(w.value[(r.cross(), r.label())], 1.0);
                assert_eq!(w.mask, MaskKind::FirstLayer);
            } else {
                let eta = cfg.schedule.at(l);
                let eta_s = cfg.drift_schedule.as_ref().unwrap_or(&cfg.schedule).at(l);
                assert_eq!(w.value[(r.mean(), r.label())], eta);
                assert_eq!(w.value[(r.var(), r.cross())], eta);
                assert_eq!(w.value[(r.mean(), r.mean())], -eta);
                assert_eq!(w.value[(r.var(), r.var())], -eta);
                assert_eq!(w.skip[(r.mean(), r.mean())], -eta_s * S2);
                assert_eq!(w.skip[(r.var(), r.var())], -eta_s * S2);
                assert_eq!(w.mask, MaskKind::Context);
            }
        }
    }
}

/// Three nested loops over query token, key token and value row.
fn naive_attention(z: &DMatrix<f64>, value: &DMatrix<f64>, mask: &AttentionMask, d: usize, normalized: bool) -> Vec<Vec<f64>> {
    let z = to_mat(z);
    let v = to_mat(value);
    let (rows, cols) = (z.len(), z[0].len());
    let mut out = vec![vec![0.0; cols]; rows];
    for j in 0..cols {
        let qj: Vec<f64> = (0..d).map(|k| z[k][j]).collect();
        let mut s = 0.0;
        for i in 0..cols {
            if !mask.get(i, j) {
                continue;
            }
            let ki: Vec<f64> = (0..d).map(|k| z[k][i]).collect();
            let h = ppd_testkit::rbf(&ki, &qj, 1.0, 0.8);
            s += h;
            for r in 0..rows {
                let vz: f64 = (0..rows).map(|k| v[r][k] * z[k][i]).sum();
                out[r][j] += h * vz;
            }
        }
        if normalized {
            for row in out.iter_mut() {
                row[j] /= s;
            }
        }
    }
    out
}

#[test]
fn attention_matches_naive_loops() {
    let ctx = rbf_context(16, 2, 8);
    let cfg = config(2, 3, 0.37, false);
    let layers = construct_weights(&cfg).unwrap();
    // a token matrix with populated workspace rows
    let t = Transformer::new(cfg.clone()).unwrap();
    let z = t.run(&build_tokens(&ctx), |l, _| if l == 2 { std::ops::ControlFlow::Break(()) } else { std::ops::ControlFlow::Continue(()) }).unwrap().last;
    for (w, kind) in [(&layers[0], MaskKind::FirstLayer), (&layers[1], MaskKind::Context)] {
        let mask = AttentionMask::of_kind(kind, 16);
        for normalized in [false, true] {
            let got = attn(&z, w, &mask, &rbf(), normalized).unwrap().delta;
            let want = naive_attention(z.matrix(), &w.value, &mask, 2, normalized);
            for r in 0..6 {
                for j in 0..17 {
                    assert!((got[(r, j)] - want[r][j]).abs() <= 1e-14, "({r},{j})");
                }
            }
        }
    }
}

fn assert_layerwise_match(ctx: &ContextSet, depth: usize, eta: f64, normalized: bool) {
    let spec = rbf();
    let d = ctx.dim();
    let r = Rows { dim: d };
    let g = gram(&spec, ctx.x()).unwrap();
    let kx = cross_vector(&spec, ctx.x(), ctx.query().as_slice()).unwrap();
    let sched = StepSchedule::Constant(eta);
    let run = if normalized { preconditioned_run } else { richardson_run };
    let ty = run(&g, &kx, ctx.y(), S2, &sched, depth - 1).unwrap();
    let tk = run(&g, &kx, &kx, S2, &sched, depth - 1).unwrap();
    let out = forward(&config(d, depth, eta, normalized), &build_tokens(ctx)).unwrap();
    assert_eq!(out.trace.len(), depth + 1);
    let n = ctx.n();
    for l in 1..=depth {
        let z = out.trace[l].matrix();
        for (traj, row) in [(&ty, r.mean()), (&tk, r.var())] {
            let s = &traj.states[l - 1];
            for j in 0..n {
                assert!((z[(row, j)] - s.context[j]).abs() <= 1e-12, "layer {l} row {row} col {j}");
            }
            assert!((z[(row, n)] - s.query).abs() <= 1e-12, "layer {l} row {row} query");
        }
    }
}

#[test]
fn trace_matches_richardson_layer_by_layer() {
    for seed in 0..5 {
        let ctx = rbf_context(64, 2, 100 + seed);
        let s = spectral_summary(&gram(&rbf(), ctx.x()).unwrap(), S2, false).unwrap();
        assert_layerwise_match(&ctx, 32, 1.0 / (s.lambda_max + S2), false);
        assert_layerwise_match(&ctx, 32, 1.0, true);
    }
}

#[test]
fn moments_within_error_bound() {
    let ctx = rbf_context(64, 2, 7);
    let spec = rbf();
    let g = gram(&spec, ctx.x()).unwrap();
    let s = spectral_summary(&g, S2, false).unwrap();
    let eta = 1.0 / (s.lambda_max + S2);
    let rho = 1.0 - eta * (s.lambda_min + S2);
    let kx = cross_vector(&spec, ctx.x(), ctx.query().as_slice()).unwrap();
    let exact = exact_moments(&spec, S2, &ctx).unwrap();
    let out = forward(&config(2, 32, eta, false), &build_tokens(&ctx)).unwrap();
    let err = (out.moments.mean - exact.mean).abs().max((out.moments.variance - exact.variance).abs());
    let norms = ppd_core::richardson::BoundNorms {
        lambda_max: s.lambda_max,
        lambda_min: s.lambda_min,
        noise_var: S2,
        rhs_norm: ctx.y().norm().max(kx.norm()),
        cross_norm: kx.norm(),
    };
    assert!(err <= ppd_core::richardson::predicted_error_bound(rho, 31, &norms).unwrap());
}

#[test]
fn dual_step_sizes_match_dual_richardson() {
    let ctx = rbf_context(20, 2, 9);
    let spec = rbf();
    let g = gram(&spec, ctx.x()).unwrap();
    let kx = cross_vector(&spec, ctx.x(), ctx.query().as_slice()).unwrap();
    let residual = StepSchedule::PerLayer((1..=9).map(|l| 0.05 + 0.01 * l as f64).collect());
    let drift = StepSchedule::PerLayer((1..=9).map(|l| 0.2 - 0.01 * l as f64).collect());
    let cfg = TransformerConfig::new(spec, S2, 2, 10, residual.clone(), false)
        .unwrap()
        .with_drift_schedule(drift.clone())
        .unwrap();
    let out = forward(&cfg, &build_tokens(&ctx)).unwrap();
    let t = richardson_run_dual(&g, &kx, ctx.y(), S2, &residual, &drift, 9, false).unwrap();
    let z = out.trace[10].matrix();
    for j in 0..20 {
        assert!((z[(4, j)] - t.last().context[j]).abs() <= 1e-12);
    }
}

#[test]
fn one_layer_and_zero_steps_read_the_prior() {
    let ctx = rbf_context(32, 2, 10);
    let q = vec_of(ctx.query());
    let prior = rbf().eval(&q, &q) + S2;
    let z0 = build_tokens(&ctx);
    let one = forward(&config(2, 1, 0.5, false), &z0).unwrap();
    assert_eq!(one.moments.mean, 0.0);
    assert!((one.moments.variance - prior).abs() <= 1e-15);

    let t = Transformer::new(config(2, 1, 0.5, false)).unwrap();
    assert_eq!(t.read_out(&z0).mean, 0.0);
    assert_eq!(t.read_out(&z0).variance, S2);

    let frozen = TransformerConfig::new(rbf(), S2, 2, 6, StepSchedule::PerLayer(vec![0.0; 5]), false).unwrap();
    let out = forward(&frozen, &z0).unwrap();
    let r = Rows { dim: 2 };
    for z in &out.trace {
        assert!(z.matrix().row(r.mean()).iter().all(|&v| v == 0.0));
        assert!(z.matrix().row(r.var()).iter().all(|&v| v == 0.0));
    }
    assert_eq!(out.moments.mean, 0.0);
    assert!((out.moments.variance - prior).abs() <= 1e-15);
}

#[test]
fn features_and_labels_never_change() {
    let ctx = rbf_context(24, 3, 11);
    let out = forward(&config(3, 12, 0.05, false), &build_tokens(&ctx)).unwrap();
    let z0 = out.trace[0].matrix();
    for z in &out.trace {
        for k in 0..=3 {
            assert_eq!(z.matrix().row(k), z0.row(k));
        }
    }
}

#[test]
fn context_order_does_not_change_moments() {
    let ctx = rbf_context(40, 2, 12);
    let order: Vec<usize> = (0..40).map(|i| (i * 17 + 5) % 40).collect();
    let perm = ctx.permuted(&order).unwrap();
    for normalized in [false, true] {
        let eta = if normalized { 1.0 } else { 0.05 };
        let a = forward(&config(2, 20, eta, normalized), &build_tokens(&ctx)).unwrap();
        let b = forward(&config(2, 20, eta, normalized), &build_tokens(&perm)).unwrap();
        assert!((a.moments.mean - b.moments.mean).abs() <= 1e-12);
        assert!((a.moments.variance - b.moments.variance).abs() <= 1e-12);
        let (za, zb) = (a.trace[20].matrix(), b.trace[20].matrix());
        for (k, &i) in order.iter().enumerate() {
            for row in [4, 5] {
                assert!((zb[(row, k)] - za[(row, i)]).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn normalized_outputs_stay_bounded_for_all_sizes() {
    let eta = 2.0 / (1.0 + S2) * 0.99 * 0.999;
    for n in [16, 32, 64, 128, 256, 512] {
        let ctx = rbf_context(n, 2, 13 + n as u64);
        let t = Transformer::new(config(2, 64, eta, true)).unwrap();
        let mut peak = 0.0f64;
        let s = t
            .run(&build_tokens(&ctx), |_, z| {
                peak = peak.max(z.matrix().amax());
                std::ops::ControlFlow::Continue(())
            })
            .unwrap();
        assert!(s.diverged_at.is_none(), "n={n}");
        assert!(peak < 1e3, "n={n}: peak {peak}");
        assert!(s.moments.variance.is_finite());
    }
}

#[test]
fn unnormalized_large_step_flags_divergence() {
    let ctx = rbf_context(128, 2, 14);
    let s = spectral_summary(&gram(&rbf(), ctx.x()).unwrap(), S2, false).unwrap();
    let out = forward(&config(2, 400, 2.2 / (s.lambda_max + S2), false), &build_tokens(&ctx)).unwrap();
    assert!(out.diverged_at.is_some());
}
