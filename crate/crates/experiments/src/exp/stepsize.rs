//! Largest admissible constant step `2/(λ₁(G) + σ²)` against context size.

use nalgebra::DMatrix;
use ppd_core::datagen::StreamSeed;
use ppd_core::kernels::gram;
use rayon::prelude::*;

use super::common::derive_seed;
use super::Outputs;
use crate::config::{kernel_from_name, ExperimentConfig};
use crate::error::RunResult;
use crate::svg::{LinePlot, Series};
use crate::table::{Coords, Summary};

#[derive(Debug, Clone, PartialEq)]
pub struct KernelSweep {
    pub kernel: String,
    pub ns: Vec<usize>,
    /// `bounds[n][trial]`.
    pub bounds: Vec<Vec<f64>>,
    pub lambda_max: Vec<Vec<f64>>,
}

impl KernelSweep {
    pub fn mean_bounds(&self) -> Vec<f64> {
        self.bounds.iter().map(|b| Summary::of(b).mean).collect()
    }

    /// Least-squares slope of log mean bound against log n.
    pub fn loglog_slope(&self) -> f64 {
        let xs: Vec<f64> = self.ns.iter().map(|&n| (n as f64).ln()).collect();
        let ys: Vec<f64> = self.mean_bounds().iter().map(|b| b.ln()).collect();
        least_squares_slope(&xs, &ys)
    }
}

pub fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

pub fn evaluate(cfg: &ExperimentConfig) -> RunResult<Vec<KernelSweep>> {
    let prior = cfg.prior_config()?;
    let (d, noise_var) = (prior.dim, prior.noise_var);
    let mut out = Vec::new();
    for name in &cfg.sweep.kernels {
        let spec = kernel_from_name(name, &cfg.prior)?;
        let mut bounds = Vec::new();
        let mut lambda_max = Vec::new();
        for &n in &cfg.sweep.ns {
            let seed = derive_seed(cfg.seed, &format!("stepsize/{name}/n={n}"));
            let tops: Vec<f64> = (0..cfg.replicates)
                .into_par_iter()
                .map(|trial| -> RunResult<f64> {
                    let mut rng = StreamSeed::new(seed, trial as u64).rng();
                    let mut x = DMatrix::zeros(n, d);
                    for i in 0..n {
                        let row = prior.input_law.sample(&mut rng, d);
                        for k in 0..d {
                            x[(i, k)] = row[k];
                        }
                    }
                    Ok(gram(&spec, &x)?.top_eigenvalue()?)
                })
                .collect::<RunResult<_>>()?;
            bounds.push(tops.iter().map(|l| 2.0 / (l + noise_var)).collect());
            lambda_max.push(tops);
        }
        out.push(KernelSweep { kernel: name.clone(), ns: cfg.sweep.ns.clone(), bounds, lambda_max });
    }
    Ok(out)
}

pub fn run(cfg: &ExperimentConfig) -> RunResult<Outputs> {
    let sweeps = evaluate(cfg)?;
    let mut out = Outputs::new(cfg);
    let t = &mut out.table;
    let mut series = Vec::new();
    for s in &sweeps {
        for (k, &n) in s.ns.iter().enumerate() {
            t.summary(Coords::variant(&s.kernel).n(n), "step_bound", &s.bounds[k], 0);
            t.summary(Coords::variant(&s.kernel).n(n), "lambda_max", &s.lambda_max[k], 0);
        }
        if s.ns.len() > 1 {
            t.value(Coords::variant(&s.kernel), "loglog_slope", s.loglog_slope());
            let m = s.mean_bounds();
            t.value(Coords::variant(&s.kernel), "first_to_last_ratio", m[0] / m[m.len() - 1]);
        }
        series.push(Series::new(&s.kernel, s.ns.iter().map(|&n| n as f64).zip(s.mean_bounds()).collect()));
    }
    out.plots.push((
        "step_bound.svg".into(),
        LinePlot {
            title: format!("admissible step 2/(λ1+σ²), d={}, σ²={}", cfg.prior.dim, cfg.prior.noise_var),
            x_label: "context size n".into(),
            y_label: "mean step bound".into(),
            log_x: true,
            log_y: true,
            series,
        }
        .to_svg(),
    ));
    Ok(out)
}
