//! The experiments behind the CLI subcommands. Each module exposes
//! `evaluate` returning structured per-replicate results and `run`
//! producing the table and plots.

pub mod calibrate;
pub mod common;
pub mod depth_bins;
pub mod fit_eb;
pub mod generalization;
pub mod normalization;
pub mod spectra;
pub mod stepsize;

use crate::config::{ExperimentConfig, ExperimentKind};
use crate::error::RunResult;
use crate::table::{Coords, ResultTable};
use common::{Scores, SCORE_NAMES};

/// What a run writes besides the manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct Outputs {
    pub table: ResultTable,
    /// `(file name, svg)`.
    pub plots: Vec<(String, String)>,
    /// Other text files, `(file name, contents)`.
    pub files: Vec<(String, String)>,
}

impl Outputs {
    fn new(cfg: &ExperimentConfig) -> Self {
        Outputs { table: ResultTable::new(&cfg.experiment, cfg.seed, cfg.hash()), plots: vec![], files: vec![] }
    }
}

pub fn run(cfg: &ExperimentConfig) -> RunResult<Outputs> {
    match cfg.kind()? {
        ExperimentKind::DepthBins => depth_bins::run(cfg),
        ExperimentKind::Normalization => normalization::run(cfg),
        ExperimentKind::Generalization => generalization::run(cfg),
        ExperimentKind::Stepsize => stepsize::run(cfg),
        ExperimentKind::Spectra => spectra::run(cfg),
        ExperimentKind::Calibrate => calibrate::run(cfg),
        ExperimentKind::FitEb => fit_eb::run(cfg),
    }
}

/// Unusable readouts count as TV 1 in `tv`; `tv_valid` averages the rest.
pub(crate) fn push_tv(table: &mut ResultTable, coords: Coords, values: &[Option<f64>]) {
    let diverged = values.iter().filter(|v| v.is_none()).count();
    let all: Vec<f64> = values.iter().map(|v| v.unwrap_or(1.0)).collect();
    let valid: Vec<f64> = values.iter().flatten().copied().collect();
    table.summary(coords.clone(), "tv", &all, diverged);
    table.summary(coords, "tv_valid", &valid, diverged);
}

/// One row per score. `tv` counts unusable readouts as 1; every other
/// metric averages the usable ones and reports how many were not.
pub(crate) fn push_scores(table: &mut ResultTable, coords: Coords, scores: &[Option<Scores>]) {
    let diverged = scores.iter().filter(|s| s.is_none()).count();
    push_tv(table, coords.clone(), &scores.iter().map(|s| s.map(|s| s.tv)).collect::<Vec<_>>());
    for (k, name) in SCORE_NAMES.iter().enumerate().skip(1) {
        let valid: Vec<f64> = scores.iter().flatten().map(|s| s.values()[k]).collect();
        table.summary(coords.clone(), name, &valid, diverged);
    }
}

/// Mean of usable values with unusable ones counted as 1.
pub fn mean_tv(values: &[Option<f64>]) -> f64 {
    values.iter().map(|v| v.unwrap_or(1.0)).sum::<f64>() / values.len() as f64
}
