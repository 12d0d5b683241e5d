//! Plain vs. normalized attention evaluated at context sizes in and beyond
//! the range the step was tuned for.

use ppd_core::head::{head_binned, tv_to_truncated_normal};
use rayon::prelude::*;

use super::common::{self, Reference, Tuning};
use super::{mean_tv, push_tv, Outputs};
use crate::config::{ExperimentConfig, StepRule};
use crate::error::RunResult;
use crate::svg::{LinePlot, Series};
use crate::table::Coords;

pub const VARIANTS: [(&str, bool); 2] = [("unnormalized", false), ("normalized", true)];

#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub bounds: (f64, f64),
    pub tuning: Tuning,
    /// Tuned step of each variant (unnormalized, normalized); `None` unless
    /// the step rule is `tuned`.
    pub steps: [Option<f64>; 2],
    pub depths: Vec<usize>,
    pub bins: Vec<usize>,
    pub eval_n: Vec<usize>,
    /// `tv[variant][depth][bins][n'][replicate]`; `None` marks an unusable
    /// readout.
    pub tv: Vec<Vec<Vec<Vec<Vec<Option<f64>>>>>>,
}

impl Normalization {
    pub fn cell(&self, normalized: bool, depth: usize, bins: usize, n: usize) -> Option<&[Option<f64>]> {
        let d = self.depths.iter().position(|&x| x == depth)?;
        let c = self.bins.iter().position(|&x| x == bins)?;
        let k = self.eval_n.iter().position(|&x| x == n)?;
        Some(&self.tv[normalized as usize][d][c][k])
    }
}

pub fn evaluate(cfg: &ExperimentConfig) -> RunResult<Normalization> {
    let prior = cfg.prior_config()?;
    let bounds = common::truncation_bounds(cfg, &prior)?;
    let depths = common::sorted_unique(&cfg.sweep.depths);
    let bins = common::sorted_unique(&cfg.sweep.bins);
    let eval_n = common::sorted_unique(&cfg.sweep.eval_n);
    let parts = common::partitions(bounds, &bins)?;
    let rule = cfg.solver.step.rule()?;
    let tuning = common::tune(&prior, prior.n_max, cfg.solver.tuning_seeds, cfg.seed)?;
    let steps = VARIANTS.map(|(_, norm)| (rule == StepRule::Tuned).then(|| tuning.step(cfg.solver.tuning_factor, norm)));
    let max_depth = *depths.last().expect("validated nonempty");

    // [n'][replicate][variant][depth][bins]
    let mut raw = Vec::with_capacity(eval_n.len());
    for &n in &eval_n {
        let p = common::at_size(&prior, n);
        let insts = common::instances(&p, bounds, common::derive_seed(cfg.seed, &format!("eval/n={n}")), cfg.replicates)?;
        let per: Vec<Vec<Vec<Vec<Option<f64>>>>> = insts
            .par_iter()
            .map(|inst| -> RunResult<_> {
                let truth = common::gaussian_truth(inst)?;
                let refs: Vec<Reference> = parts.iter().map(|p| Reference::new(&truth, p)).collect::<RunResult<_>>()?;
                let mut by_variant = Vec::with_capacity(2);
                for (vi, (_, norm)) in VARIANTS.iter().enumerate() {
                    let eta = common::instance_step(rule, steps[vi], &p.kernel, p.noise_var, &inst.context, *norm)?;
                    let tf = common::transformer(&p.kernel, p.noise_var, p.dim, max_depth, eta, *norm)?;
                    let reads = common::readouts_at(&tf, &inst.context, &depths)?;
                    let mut cells = vec![vec![None; parts.len()]; depths.len()];
                    for (di, m) in reads.iter().enumerate() {
                        let Some(m) = m else { continue };
                        for (ci, (part, r)) in parts.iter().zip(&refs).enumerate() {
                            cells[di][ci] = Some(tv_to_truncated_normal(&head_binned(m, part)?, &r.truncated)?);
                        }
                    }
                    by_variant.push(cells);
                }
                Ok(by_variant)
            })
            .collect::<RunResult<_>>()?;
        raw.push(per);
    }

    let tv = (0..2)
        .map(|v| {
            (0..depths.len())
                .map(|d| {
                    (0..bins.len())
                        .map(|c| (0..eval_n.len()).map(|k| raw[k].iter().map(|rep| rep[v][d][c]).collect()).collect())
                        .collect()
                })
                .collect()
        })
        .collect();
    Ok(Normalization { bounds, tuning, steps, depths, bins, eval_n, tv })
}

pub fn run(cfg: &ExperimentConfig) -> RunResult<Outputs> {
    let r = evaluate(cfg)?;
    let mut out = Outputs::new(cfg);
    let t = &mut out.table;
    t.value(Coords::variant("truncation"), "lower", r.bounds.0);
    t.value(Coords::variant("truncation"), "upper", r.bounds.1);
    t.value(Coords::variant("unnormalized").n_max(r.tuning.n), "mean_top_eigenvalue", r.tuning.plain_top);
    t.value(Coords::variant("normalized").n_max(r.tuning.n), "mean_top_eigenvalue", r.tuning.normalized_top);
    for (vi, (name, _)) in VARIANTS.iter().enumerate() {
        if let Some(eta) = r.steps[vi] {
            t.value(Coords::variant(*name).n_max(r.tuning.n), "step", eta);
        }
    }
    let mut series = Vec::new();
    for (vi, (name, _)) in VARIANTS.iter().enumerate() {
        for (di, &l) in r.depths.iter().enumerate() {
            for (ci, &c) in r.bins.iter().enumerate() {
                for (k, &n) in r.eval_n.iter().enumerate() {
                    let coords = Coords::variant(*name).depth(l).bins(c).n_max(r.tuning.n).n(n);
                    push_tv(t, coords, &r.tv[vi][di][ci][k]);
                }
                let pts = r.eval_n.iter().enumerate().map(|(k, &n)| (n as f64, mean_tv(&r.tv[vi][di][ci][k]))).collect();
                series.push(Series::new(format!("{name} L={l} C={c}"), pts));
            }
        }
    }
    out.plots.push((
        "tv_vs_context_size.svg".into(),
        LinePlot {
            title: format!("TV vs context size (step tuned at n={})", r.tuning.n),
            x_label: "context size n'".into(),
            y_label: "mean TV (unusable = 1)".into(),
            log_x: true,
            log_y: true,
            series,
        }
        .to_svg(),
    ));
    Ok(out)
}
