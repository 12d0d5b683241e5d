//! Pieces shared by the experiments: seeding, truncation, step rules,
//! transformer readouts and per-instance scores.

use std::ops::ControlFlow;

use ppd_core::attention::{build_tokens, Transformer, TransformerConfig};
use ppd_core::datagen::{sample_instance, PriorConfig, StreamSeed, SyntheticInstance};
use ppd_core::gp::{reference_binned, ContextSet, PPDMoments};
use ppd_core::head::{
    calibrate_truncation, coverage_and_width, crps, head_binned, moment_readback, second_moment_targets,
    tv_distance, tv_to_truncated_normal, BinnedDistribution, Partition,
};
use ppd_core::kernels::{gram, spectral_summary, system_top_eigenvalue, KernelSpec};
use ppd_core::normal::TruncatedNormal;
use ppd_core::richardson::{optimal_step, StepSchedule, DIVERGENCE_THRESHOLD};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, StepRule};
use crate::error::{RunError, RunResult};

/// Seed for one role of a run (`"eval/n=64"`, `"truncation"`, ...), so roles
/// never share random streams.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// The truncation interval: explicit if configured, calibrated otherwise.
pub fn truncation_bounds(cfg: &ExperimentConfig, prior: &PriorConfig) -> RunResult<(f64, f64)> {
    let t = &cfg.truncation;
    if let (Some(a), Some(b)) = (t.lower, t.upper) {
        return Ok((a, b));
    }
    Ok(calibrate_truncation(prior, t.mc_count, t.tail_mass, derive_seed(cfg.seed, "truncation"))?)
}

/// Evaluation instances `0..count` of `prior`, drawn in parallel, each from
/// its own stream.
pub fn instances(prior: &PriorConfig, bounds: (f64, f64), seed: u64, count: usize) -> RunResult<Vec<SyntheticInstance>> {
    (0..count)
        .into_par_iter()
        .map(|i| sample_instance(prior, bounds, StreamSeed::new(seed, i as u64)).map_err(RunError::from))
        .collect()
}

/// Prior restricted to context size exactly `n`.
pub fn at_size(prior: &PriorConfig, n: usize) -> PriorConfig {
    prior.clone().with_n_range(n, n)
}

/// Seed-averaged top eigenvalues of the iterated system at context size `n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tuning {
    pub n: usize,
    /// Mean `λ₁(G) + σ²`.
    pub plain_top: f64,
    /// Mean `λ₁(D⁻¹(G + σ²I))`.
    pub normalized_top: f64,
}

impl Tuning {
    /// `factor · 2 / λ̄₁` for the chosen variant.
    pub fn step(&self, factor: f64, normalized: bool) -> f64 {
        factor * 2.0 / if normalized { self.normalized_top } else { self.plain_top }
    }
}

pub fn tune(prior: &PriorConfig, n: usize, seeds: usize, seed: u64) -> RunResult<Tuning> {
    let p = at_size(prior, n);
    let s = derive_seed(seed, &format!("tune/n={n}"));
    let tops: Vec<(f64, f64)> = (0..seeds)
        .into_par_iter()
        .map(|i| -> RunResult<(f64, f64)> {
            let inst = sample_instance(&p, (-1.0, 1.0), StreamSeed::new(s, i as u64))?;
            let g = gram(&p.kernel, inst.context.x())?;
            Ok((system_top_eigenvalue(&g, p.noise_var, false)?, system_top_eigenvalue(&g, p.noise_var, true)?))
        })
        .collect::<RunResult<_>>()?;
    let k = seeds as f64;
    Ok(Tuning {
        n,
        plain_top: tops.iter().map(|t| t.0).sum::<f64>() / k,
        normalized_top: tops.iter().map(|t| t.1).sum::<f64>() / k,
    })
}

/// Step for one instance under `rule`; `tuned` is the step used by
/// [`StepRule::Tuned`].
pub fn instance_step(
    rule: StepRule,
    tuned: Option<f64>,
    kernel: &KernelSpec,
    noise_var: f64,
    ctx: &ContextSet,
    normalized: bool,
) -> RunResult<f64> {
    match rule {
        StepRule::Constant(eta) => Ok(eta),
        StepRule::Tuned => tuned.ok_or_else(|| RunError::config("tuned step requested without a tuning size")),
        StepRule::Default => {
            let g = gram(kernel, ctx.x())?;
            Ok(1.0 / system_top_eigenvalue(&g, noise_var, normalized)?)
        }
        StepRule::Optimal => {
            let g = gram(kernel, ctx.x())?;
            Ok(optimal_step(&spectral_summary(&g, noise_var, normalized)?).0)
        }
    }
}

pub fn transformer(
    kernel: &KernelSpec,
    noise_var: f64,
    dim: usize,
    depth: usize,
    eta: f64,
    normalized: bool,
) -> RunResult<Transformer> {
    let cfg = TransformerConfig::new(kernel.clone(), noise_var, dim, depth, StepSchedule::Constant(eta), normalized)?;
    Ok(Transformer::new(cfg)?)
}

/// A readout that can be fed to the head: finite, within the divergence
/// threshold, with positive variance.
pub fn usable(m: &PPDMoments) -> bool {
    m.mean.abs() <= DIVERGENCE_THRESHOLD && m.variance.abs() <= DIVERGENCE_THRESHOLD && m.variance > 0.0
}

/// Readouts after each layer count in `depths` (ascending); `None` marks an
/// unusable readout. Stops once the token matrix diverges.
pub fn readouts_at(tf: &Transformer, ctx: &ContextSet, depths: &[usize]) -> RunResult<Vec<Option<PPDMoments>>> {
    let mut out = vec![None; depths.len()];
    let mut next = 0;
    tf.run(&build_tokens(ctx), |l, z| {
        while next < depths.len() && depths[next] == l {
            let m = tf.read_out(z);
            out[next] = usable(&m).then_some(m);
            next += 1;
        }
        if next == depths.len() || !z.bounded() {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    })?;
    Ok(out)
}

/// First layer count at which `‖(μ_L, τ_L) - target‖∞ < tol`, if any up to
/// the transformer's depth.
pub fn depth_to_tolerance(tf: &Transformer, ctx: &ContextSet, target: &PPDMoments, tol: f64) -> RunResult<Option<usize>> {
    let mut hit = None;
    tf.run(&build_tokens(ctx), |l, z| {
        let m = tf.read_out(z);
        let err = (m.mean - target.mean).abs().max((m.variance - target.variance).abs());
        if l > 0 && err < tol {
            hit = Some(l);
            return ControlFlow::Break(());
        }
        if z.bounded() {
            ControlFlow::Continue(())
        } else {
            ControlFlow::Break(())
        }
    })?;
    Ok(hit)
}

/// Everything scored for one prediction of one instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    /// Density TV to the truncated true law.
    pub tv: f64,
    /// TV between bin masses and the true law's bin masses.
    pub tv_bins: f64,
    pub crps: f64,
    pub covered: f64,
    pub width: f64,
    /// `(m₁ - y)²` with `m₁` the binned mean.
    pub pred_se: f64,
    pub mean_se: f64,
    pub var_se: f64,
    pub m1_se: f64,
    pub m2_raw_se: f64,
    pub m1_trunc_se: f64,
    pub m2_trunc_se: f64,
}

pub const SCORE_NAMES: [&str; 12] = [
    "tv",
    "tv_bins",
    "crps",
    "coverage",
    "interval_width",
    "prediction_mse",
    "mean_mse",
    "variance_mse",
    "m1_mse",
    "m2_mse",
    "m1_trunc_mse",
    "m2_trunc_mse",
];

impl Scores {
    pub fn values(&self) -> [f64; 12] {
        [
            self.tv,
            self.tv_bins,
            self.crps,
            self.covered,
            self.width,
            self.pred_se,
            self.mean_se,
            self.var_se,
            self.m1_se,
            self.m2_raw_se,
            self.m1_trunc_se,
            self.m2_trunc_se,
        ]
    }
}

/// The truth's pieces every score needs, computed once per partition.
pub struct Reference {
    pub truth: PPDMoments,
    pub truncated: TruncatedNormal,
    pub binned: BinnedDistribution,
    pub m2_targets: (f64, f64),
}

impl Reference {
    pub fn new(truth: &PPDMoments, partition: &Partition) -> RunResult<Self> {
        Ok(Reference {
            truth: *truth,
            truncated: TruncatedNormal::new(truth.mean, truth.variance, partition.lower(), partition.upper())?,
            binned: reference_binned(truth, partition)?,
            m2_targets: second_moment_targets(truth, partition)?,
        })
    }

    /// Scores of the head applied to `pred`.
    pub fn score_moments(&self, pred: &PPDMoments, y: f64, level: f64) -> RunResult<Scores> {
        let q = head_binned(pred, self.binned.partition())?;
        let mut s = self.score_binned(&q, y, level)?;
        s.mean_se = (pred.mean - self.truth.mean).powi(2);
        s.var_se = (pred.variance - self.truth.variance).powi(2);
        Ok(s)
    }

    /// Scores of an arbitrary binned prediction; the solver moment errors
    /// are left at zero.
    pub fn score_binned(&self, q: &BinnedDistribution, y: f64, level: f64) -> RunResult<Scores> {
        let interval = coverage_and_width(q, y, level)?;
        let (m1, m2) = moment_readback(q);
        let (tm, _) = self.truncated.moments();
        let t = &self.truth;
        Ok(Scores {
            tv: tv_to_truncated_normal(q, &self.truncated)?,
            tv_bins: tv_distance(&self.binned, q)?,
            crps: crps(q, y),
            covered: if interval.covered { 1.0 } else { 0.0 },
            width: interval.width(),
            pred_se: (m1 - y).powi(2),
            mean_se: 0.0,
            var_se: 0.0,
            m1_se: (m1 - t.mean).powi(2),
            m2_raw_se: (m2 - self.m2_targets.0).powi(2),
            m1_trunc_se: (m1 - tm).powi(2),
            m2_trunc_se: (m2 - self.m2_targets.1).powi(2),
        })
    }
}

/// Sorted, deduplicated copy.
pub fn sorted_unique(v: &[usize]) -> Vec<usize> {
    let mut s = v.to_vec();
    s.sort_unstable();
    s.dedup();
    s
}

pub fn partitions(bounds: (f64, f64), bins: &[usize]) -> RunResult<Vec<Partition>> {
    bins.iter().map(|&c| Partition::new(bounds.0, bounds.1, c).map_err(RunError::from)).collect()
}

/// The instance's label law; the CLI only builds priors without a
/// hyperprior, so it is always Gaussian.
pub fn gaussian_truth(inst: &SyntheticInstance) -> RunResult<PPDMoments> {
    match &inst.truth {
        ppd_core::datagen::Truth::Gaussian(m) => Ok(*m),
        ppd_core::datagen::Truth::Mixture(_) => Err(RunError::config("mixture truths are not supported here")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ_by_tag_and_seed() {
        assert_ne!(derive_seed(1, "a"), derive_seed(1, "b"));
        assert_ne!(derive_seed(1, "a"), derive_seed(2, "a"));
        assert_eq!(derive_seed(5, "eval"), derive_seed(5, "eval"));
    }

    #[test]
    fn oracle_prediction_scores_match_reference() {
        let part = Partition::new(-4.0, 4.0, 64).unwrap();
        let truth = PPDMoments { mean: 0.3, variance: 0.8 };
        let r = Reference::new(&truth, &part).unwrap();
        let s = r.score_moments(&truth, 0.1, 0.9).unwrap();
        assert_eq!(s.mean_se, 0.0);
        assert_eq!(s.var_se, 0.0);
        assert!(s.tv_bins < 1e-3, "{}", s.tv_bins);
        assert!(s.tv < 0.05, "{}", s.tv);
        assert_eq!(s.covered, 1.0);
    }
}
