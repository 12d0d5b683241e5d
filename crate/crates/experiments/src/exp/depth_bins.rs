//! TV of the transformer's binned prediction over a depth × bin-count grid.

use ppd_core::head::{head_binned, tv_distance, tv_to_truncated_normal};
use rayon::prelude::*;

use super::common::{self, Reference};
use super::{mean_tv, push_tv, Outputs};
use crate::config::{ExperimentConfig, StepRule};
use crate::error::RunResult;
use crate::svg::{Heatmap, LinePlot, Series};
use crate::table::{Coords, Summary};

#[derive(Debug, Clone, PartialEq)]
pub struct DepthBins {
    pub bounds: (f64, f64),
    pub depths: Vec<usize>,
    pub bins: Vec<usize>,
    /// `tv[depth][bins][replicate]`; `None` marks an unusable readout.
    pub tv: Vec<Vec<Vec<Option<f64>>>>,
    pub tv_bins: Vec<Vec<Vec<Option<f64>>>>,
    /// The head applied to the exact moments, `exact_tv[bins][replicate]`.
    pub exact_tv: Vec<Vec<f64>>,
}

struct InstanceOut {
    tv: Vec<Vec<Option<f64>>>,
    tv_bins: Vec<Vec<Option<f64>>>,
    exact_tv: Vec<f64>,
}

pub fn evaluate(cfg: &ExperimentConfig) -> RunResult<DepthBins> {
    let prior = cfg.prior_config()?;
    let bounds = common::truncation_bounds(cfg, &prior)?;
    let depths = common::sorted_unique(&cfg.sweep.depths);
    let bins = common::sorted_unique(&cfg.sweep.bins);
    let parts = common::partitions(bounds, &bins)?;
    let rule = cfg.solver.step.rule()?;
    let normalized = cfg.solver.normalized;
    let tuned = match rule {
        StepRule::Tuned => Some(
            common::tune(&prior, prior.n_max, cfg.solver.tuning_seeds, cfg.seed)?
                .step(cfg.solver.tuning_factor, normalized),
        ),
        _ => None,
    };
    let max_depth = *depths.last().expect("validated nonempty");
    let insts = common::instances(&prior, bounds, common::derive_seed(cfg.seed, "eval"), cfg.replicates)?;

    let per: Vec<InstanceOut> = insts
        .par_iter()
        .map(|inst| -> RunResult<InstanceOut> {
            let truth = common::gaussian_truth(inst)?;
            let ctx = &inst.context;
            let eta = common::instance_step(rule, tuned, &prior.kernel, prior.noise_var, ctx, normalized)?;
            let tf = common::transformer(&prior.kernel, prior.noise_var, prior.dim, max_depth, eta, normalized)?;
            let reads = common::readouts_at(&tf, ctx, &depths)?;
            let refs: Vec<Reference> = parts.iter().map(|p| Reference::new(&truth, p)).collect::<RunResult<_>>()?;
            let mut tv = vec![vec![None; parts.len()]; depths.len()];
            let mut tv_bins = tv.clone();
            for (di, m) in reads.iter().enumerate() {
                let Some(m) = m else { continue };
                for (ci, (p, r)) in parts.iter().zip(&refs).enumerate() {
                    let q = head_binned(m, p)?;
                    tv[di][ci] = Some(tv_to_truncated_normal(&q, &r.truncated)?);
                    tv_bins[di][ci] = Some(tv_distance(&r.binned, &q)?);
                }
            }
            let exact_tv = parts
                .iter()
                .zip(&refs)
                .map(|(p, r)| Ok(tv_to_truncated_normal(&head_binned(&truth, p)?, &r.truncated)?))
                .collect::<RunResult<_>>()?;
            Ok(InstanceOut { tv, tv_bins, exact_tv })
        })
        .collect::<RunResult<_>>()?;

    let gather = |f: &dyn Fn(&InstanceOut, usize, usize) -> Option<f64>| -> Vec<Vec<Vec<Option<f64>>>> {
        (0..depths.len())
            .map(|di| (0..bins.len()).map(|ci| per.iter().map(|o| f(o, di, ci)).collect()).collect())
            .collect()
    };
    let tv = gather(&|o, d, c| o.tv[d][c]);
    let tv_bins = gather(&|o, d, c| o.tv_bins[d][c]);
    let exact_tv = (0..bins.len()).map(|ci| per.iter().map(|o| o.exact_tv[ci]).collect()).collect();
    Ok(DepthBins { bounds, depths, bins, tv, tv_bins, exact_tv })
}

pub fn run(cfg: &ExperimentConfig) -> RunResult<Outputs> {
    let r = evaluate(cfg)?;
    let mut out = Outputs::new(cfg);
    let t = &mut out.table;
    t.value(Coords::variant("truncation"), "lower", r.bounds.0);
    t.value(Coords::variant("truncation"), "upper", r.bounds.1);
    for (di, &l) in r.depths.iter().enumerate() {
        for (ci, &c) in r.bins.iter().enumerate() {
            let coords = Coords::variant("transformer").depth(l).bins(c);
            push_tv(t, coords.clone(), &r.tv[di][ci]);
            let tvb = &r.tv_bins[di][ci];
            let valid: Vec<f64> = tvb.iter().flatten().copied().collect();
            t.summary(coords, "tv_bins", &valid, tvb.len() - valid.len());
        }
    }
    for (ci, &c) in r.bins.iter().enumerate() {
        t.summary(Coords::variant("exact_moments").bins(c), "tv", &r.exact_tv[ci], 0);
    }

    let grid: Vec<Vec<f64>> = r.tv.iter().map(|row| row.iter().map(|v| mean_tv(v)).collect()).collect();
    out.plots.push((
        "tv_heatmap.svg".into(),
        Heatmap {
            title: "mean TV by depth and bin count".into(),
            x_label: "bins C".into(),
            y_label: "depth L".into(),
            col_labels: r.bins.iter().map(|c| c.to_string()).collect(),
            row_labels: r.depths.iter().map(|l| l.to_string()).collect(),
            values: grid.clone(),
            log_scale: true,
        }
        .to_svg(),
    ));
    let mut by_bins: Vec<Series> = r
        .depths
        .iter()
        .zip(&grid)
        .map(|(l, row)| Series::new(format!("L={l}"), r.bins.iter().map(|&c| c as f64).zip(row.iter().copied()).collect()))
        .collect();
    by_bins.push(
        Series::new(
            "exact moments",
            r.bins.iter().zip(&r.exact_tv).map(|(&c, v)| (c as f64, Summary::of(v).mean)).collect(),
        )
        .dashed(),
    );
    out.plots.push((
        "tv_vs_bins.svg".into(),
        LinePlot {
            title: "TV vs bin count".into(),
            x_label: "bins C".into(),
            y_label: "mean TV".into(),
            log_x: true,
            log_y: true,
            series: by_bins,
        }
        .to_svg(),
    ));
    let by_depth = r
        .bins
        .iter()
        .enumerate()
        .map(|(ci, c)| Series::new(format!("C={c}"), r.depths.iter().zip(&grid).map(|(&l, row)| (l as f64, row[ci])).collect()))
        .collect();
    out.plots.push((
        "tv_vs_depth.svg".into(),
        LinePlot {
            title: "TV vs depth".into(),
            x_label: "depth L".into(),
            y_label: "mean TV".into(),
            log_x: true,
            log_y: true,
            series: by_depth,
        }
        .to_svg(),
    ));
    Ok(out)
}
