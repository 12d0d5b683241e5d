//! Condition numbers of the plain and Jacobi-preconditioned systems against
//! context size.

use ppd_core::kernels::{gram, spectral_summary};
use rayon::prelude::*;

use super::common::{self, derive_seed};
use super::Outputs;
use crate::config::ExperimentConfig;
use crate::error::RunResult;
use crate::svg::{LinePlot, Series};
use crate::table::{Coords, Summary};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trial {
    pub cond_raw: f64,
    pub cond_pre: f64,
    /// Top eigenvalue of `D⁻¹(G + σ²I)`.
    pub lambda_max_pre: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Spectra {
    pub noise_var: f64,
    pub ns: Vec<usize>,
    /// `trials[n][seed]`.
    pub trials: Vec<Vec<Trial>>,
}

impl Spectra {
    pub fn mean_cond(&self, k: usize, preconditioned: bool) -> f64 {
        let v: Vec<f64> = self.trials[k].iter().map(|t| if preconditioned { t.cond_pre } else { t.cond_raw }).collect();
        Summary::of(&v).mean
    }
}

pub fn evaluate(cfg: &ExperimentConfig) -> RunResult<Spectra> {
    let prior = cfg.prior_config()?;
    let ns = common::sorted_unique(&cfg.sweep.ns);
    let mut trials = Vec::with_capacity(ns.len());
    for &n in &ns {
        let p = common::at_size(&prior, n);
        let seed = derive_seed(cfg.seed, &format!("spectra/n={n}"));
        let insts = common::instances(&p, (-1.0, 1.0), seed, cfg.replicates)?;
        let row: Vec<Trial> = insts
            .par_iter()
            .map(|inst| -> RunResult<Trial> {
                let g = gram(&p.kernel, inst.context.x())?;
                let raw = spectral_summary(&g, p.noise_var, false)?;
                let pre = spectral_summary(&g, p.noise_var, true)?;
                Ok(Trial { cond_raw: raw.cond, cond_pre: pre.cond, lambda_max_pre: pre.lambda_max })
            })
            .collect::<RunResult<_>>()?;
        trials.push(row);
    }
    Ok(Spectra { noise_var: prior.noise_var, ns, trials })
}

pub fn run(cfg: &ExperimentConfig) -> RunResult<Outputs> {
    let r = evaluate(cfg)?;
    let mut out = Outputs::new(cfg);
    let t = &mut out.table;
    for (k, &n) in r.ns.iter().enumerate() {
        let col = |f: fn(&Trial) -> f64| r.trials[k].iter().map(f).collect::<Vec<f64>>();
        let c = Coords::variant("rbf").n(n);
        t.summary(c.clone(), "cond_preconditioned", &col(|t| t.cond_pre), 0);
        t.summary(c.clone(), "cond_raw", &col(|t| t.cond_raw), 0);
        let lam = col(|t| t.lambda_max_pre);
        t.summary(c.clone(), "lambda_max_preconditioned", &lam, 0);
        t.value(c.clone(), "lambda_max_preconditioned_min", lam.iter().copied().fold(f64::INFINITY, f64::min));
        t.value(c.clone(), "lambda_max_preconditioned_max", lam.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        if k > 0 {
            t.value(c.clone(), "cond_preconditioned_ratio", r.mean_cond(k, true) / r.mean_cond(k - 1, true));
            t.value(c, "cond_raw_ratio", r.mean_cond(k, false) / r.mean_cond(k - 1, false));
        }
    }
    let pts = |pre: bool| r.ns.iter().enumerate().map(|(k, &n)| (n as f64, r.mean_cond(k, pre))).collect();
    out.plots.push((
        "condition_numbers.svg".into(),
        LinePlot {
            title: "condition number vs context size".into(),
            x_label: "context size n".into(),
            y_label: "mean condition number".into(),
            log_x: true,
            log_y: true,
            series: vec![Series::new("D⁻¹(G+σ²I)", pts(true)), Series::new("G+σ²I", pts(false))],
        }
        .to_svg(),
    ));
    Ok(out)
}
