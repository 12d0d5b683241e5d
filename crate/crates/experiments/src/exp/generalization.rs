//! Prediction and uncertainty metrics against context size, for each depth
//! and tuning size, next to the exact predictive law.

use rayon::prelude::*;

use super::common::{self, Reference, Scores, Tuning};
use super::{push_scores, Outputs};
use crate::config::{ExperimentConfig, StepRule};
use crate::error::RunResult;
use crate::svg::{LinePlot, Series};
use crate::table::{Coords, Summary};

#[derive(Debug, Clone, PartialEq)]
pub struct Generalization {
    pub bounds: (f64, f64),
    pub tunings: Vec<Tuning>,
    pub depths: Vec<usize>,
    pub bins: Vec<usize>,
    pub eval_n: Vec<usize>,
    /// `model[n_max][depth][bins][n'][replicate]`; `None` marks an unusable
    /// readout.
    pub model: Vec<Vec<Vec<Vec<Vec<Option<Scores>>>>>>,
    /// Exact law discretized on the same bins, `truth[bins][n'][replicate]`.
    pub truth: Vec<Vec<Vec<Scores>>>,
}

struct InstanceOut {
    model: Vec<Vec<Vec<Option<Scores>>>>,
    truth: Vec<Scores>,
}

pub fn evaluate(cfg: &ExperimentConfig) -> RunResult<Generalization> {
    let prior = cfg.prior_config()?;
    let bounds = common::truncation_bounds(cfg, &prior)?;
    let depths = common::sorted_unique(&cfg.sweep.depths);
    let bins = common::sorted_unique(&cfg.sweep.bins);
    let eval_n = common::sorted_unique(&cfg.sweep.eval_n);
    let n_maxes = common::sorted_unique(&cfg.sweep.n_max);
    let parts = common::partitions(bounds, &bins)?;
    let rule = cfg.solver.step.rule()?;
    let normalized = cfg.solver.normalized;
    let level = cfg.solver.level;
    let tunings: Vec<Tuning> = n_maxes
        .iter()
        .map(|&n| common::tune(&prior, n, cfg.solver.tuning_seeds, cfg.seed))
        .collect::<RunResult<_>>()?;
    let steps: Vec<Option<f64>> = tunings
        .iter()
        .map(|t| (rule == StepRule::Tuned).then(|| t.step(cfg.solver.tuning_factor, normalized)))
        .collect();
    let max_depth = *depths.last().expect("validated nonempty");

    let mut per_n = Vec::with_capacity(eval_n.len());
    for &n in &eval_n {
        let p = common::at_size(&prior, n);
        let insts = common::instances(&p, bounds, common::derive_seed(cfg.seed, &format!("eval/n={n}")), cfg.replicates)?;
        let per: Vec<InstanceOut> = insts
            .par_iter()
            .map(|inst| -> RunResult<InstanceOut> {
                let truth = common::gaussian_truth(inst)?;
                let refs: Vec<Reference> = parts.iter().map(|q| Reference::new(&truth, q)).collect::<RunResult<_>>()?;
                let truth_scores =
                    refs.iter().map(|r| r.score_binned(&r.binned, inst.y, level)).collect::<RunResult<_>>()?;
                let mut model = Vec::with_capacity(steps.len());
                for step in &steps {
                    let eta = common::instance_step(rule, *step, &p.kernel, p.noise_var, &inst.context, normalized)?;
                    let tf = common::transformer(&p.kernel, p.noise_var, p.dim, max_depth, eta, normalized)?;
                    let reads = common::readouts_at(&tf, &inst.context, &depths)?;
                    let cells = reads
                        .iter()
                        .map(|m| {
                            refs.iter()
                                .map(|r| m.map(|m| r.score_moments(&m, inst.y, level)).transpose())
                                .collect::<RunResult<Vec<_>>>()
                        })
                        .collect::<RunResult<Vec<_>>>()?;
                    model.push(cells);
                }
                Ok(InstanceOut { model, truth: truth_scores })
            })
            .collect::<RunResult<_>>()?;
        per_n.push(per);
    }

    let model = (0..n_maxes.len())
        .map(|m| {
            (0..depths.len())
                .map(|d| {
                    (0..bins.len())
                        .map(|c| per_n.iter().map(|per| per.iter().map(|o| o.model[m][d][c]).collect()).collect())
                        .collect()
                })
                .collect()
        })
        .collect();
    let truth = (0..bins.len())
        .map(|c| per_n.iter().map(|per| per.iter().map(|o| o.truth[c]).collect()).collect())
        .collect();
    Ok(Generalization { bounds, tunings, depths, bins, eval_n, model, truth })
}

pub fn run(cfg: &ExperimentConfig) -> RunResult<Outputs> {
    let r = evaluate(cfg)?;
    let mut out = Outputs::new(cfg);
    let t = &mut out.table;
    let normalized = cfg.solver.normalized;
    t.value(Coords::variant("truncation"), "lower", r.bounds.0);
    t.value(Coords::variant("truncation"), "upper", r.bounds.1);
    for tu in &r.tunings {
        let top = if normalized { tu.normalized_top } else { tu.plain_top };
        t.value(Coords::variant("transformer").n_max(tu.n), "mean_top_eigenvalue", top);
    }
    for (mi, tu) in r.tunings.iter().enumerate() {
        for (di, &l) in r.depths.iter().enumerate() {
            for (ci, &c) in r.bins.iter().enumerate() {
                for (k, &n) in r.eval_n.iter().enumerate() {
                    let coords = Coords::variant("transformer").depth(l).bins(c).n_max(tu.n).n(n);
                    push_scores(t, coords, &r.model[mi][di][ci][k]);
                }
            }
        }
    }
    for (ci, &c) in r.bins.iter().enumerate() {
        for (k, &n) in r.eval_n.iter().enumerate() {
            let scores: Vec<Option<Scores>> = r.truth[ci][k].iter().copied().map(Some).collect();
            push_scores(t, Coords::variant("true_ppd").bins(c).n(n), &scores);
        }
    }

    // one figure per metric at the largest bin count
    let ci = r.bins.len() - 1;
    let c = r.bins[ci];
    let mean_of = |cells: &[Option<Scores>], k: usize| {
        let v: Vec<f64> = cells.iter().flatten().map(|s| s.values()[k]).collect();
        Summary::of(&v).mean
    };
    for (k, metric, log_y) in [(0, "tv", true), (3, "coverage", false), (4, "interval_width", false), (5, "prediction_mse", true)] {
        let mut series = Vec::new();
        for (mi, tu) in r.tunings.iter().enumerate() {
            for (di, &l) in r.depths.iter().enumerate() {
                let pts = r
                    .eval_n
                    .iter()
                    .enumerate()
                    .map(|(j, &n)| {
                        let cells = &r.model[mi][di][ci][j];
                        let v = if k == 0 { super::mean_tv(&cells.iter().map(|s| s.map(|s| s.tv)).collect::<Vec<_>>()) } else { mean_of(cells, k) };
                        (n as f64, v)
                    })
                    .collect();
                series.push(Series::new(format!("L={l} n_max={}", tu.n), pts));
            }
        }
        let truth_pts = r
            .eval_n
            .iter()
            .enumerate()
            .map(|(j, &n)| (n as f64, Summary::of(&r.truth[ci][j].iter().map(|s| s.values()[k]).collect::<Vec<_>>()).mean))
            .collect();
        series.push(Series::new("true PPD", truth_pts).dashed());
        out.plots.push((
            format!("{metric}_vs_context_size.svg"),
            LinePlot {
                title: format!("{metric} vs context size (C={c})"),
                x_label: "context size n'".into(),
                y_label: metric.into(),
                log_x: true,
                log_y,
                series,
            }
            .to_svg(),
        ));
    }
    Ok(out)
}
