//! Truncation interval for a prior, checked on fresh draws.

use ppd_core::datagen::{sample_task, StreamSeed};
use rayon::prelude::*;

use super::common::{self, derive_seed};
use super::Outputs;
use crate::config::ExperimentConfig;
use crate::error::RunResult;
use crate::table::Coords;

pub fn run(cfg: &ExperimentConfig) -> RunResult<Outputs> {
    let prior = cfg.prior_config()?;
    let (a, b) = common::truncation_bounds(cfg, &prior)?;
    let seed = derive_seed(cfg.seed, "calibrate/check");
    let outside: Vec<f64> = (0..cfg.truncation.mc_count)
        .into_par_iter()
        .map(|i| -> RunResult<f64> {
            let mut rng = StreamSeed::new(seed, i as u64).rng();
            let (_, truth, _) = sample_task(&prior, &mut rng)?;
            let y = truth.sample(&mut rng);
            Ok(if y <= a || y > b { 1.0 } else { 0.0 })
        })
        .collect::<RunResult<_>>()?;
    let mut out = Outputs::new(cfg);
    let t = &mut out.table;
    let c = Coords::variant("truncation").n_max(prior.n_max);
    t.value(c.clone(), "lower", a);
    t.value(c.clone(), "upper", b);
    t.value(c.clone(), "target_tail_mass", cfg.truncation.tail_mass);
    t.summary(c, "heldout_tail_mass", &outside, 0);
    out.files.push(("bounds.toml".into(), format!("lower = {a:?}\nupper = {b:?}\n")));
    Ok(out)
}
