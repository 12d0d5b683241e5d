//! Experiment harness: configs, the sweeps themselves, long-format CSV
//! tables, SVG plots and run manifests.

pub mod config;
pub mod error;
pub mod exp;
pub mod svg;
pub mod table;

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use config::{ExperimentConfig, ExperimentKind};
use error::{RunError, RunResult};
use exp::Outputs;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Serialize)]
struct Manifest<'a> {
    experiment: &'a str,
    seed: u64,
    config_sha256: String,
    ppd_core_version: &'static str,
    ppd_experiments_version: &'static str,
    outputs: Vec<OutputEntry>,
    config: &'a ExperimentConfig,
}

#[derive(Serialize)]
struct OutputEntry {
    file: String,
    sha256: String,
}

/// What a completed run wrote.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub rows: usize,
}

/// Runs `f` on a pool of `threads` workers, or the default pool (one per
/// logical core) when `None`.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> RunResult<T> {
    match threads {
        None => Ok(f()),
        Some(0) => Err(RunError::config("--threads must be at least 1")),
        Some(k) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(k)
                .build()
                .map_err(|e| RunError::config(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Runs the configured experiment and writes `results.csv`, the plots,
/// any extra files and `manifest.txt` into its output directory.
pub fn run(cfg: &ExperimentConfig, threads: Option<usize>) -> RunResult<RunReport> {
    let outputs = with_threads(threads, || exp::run(cfg))??;
    write_outputs(cfg, &outputs, &cfg.output_path())
}

pub fn write_outputs(cfg: &ExperimentConfig, outputs: &Outputs, dir: &Path) -> RunResult<RunReport> {
    std::fs::create_dir_all(dir).map_err(|e| RunError::io(dir, e))?;
    let mut written: Vec<(String, String)> = vec![("results.csv".into(), outputs.table.to_csv())];
    written.extend(outputs.plots.iter().cloned());
    written.extend(outputs.files.iter().cloned());
    let mut files = Vec::new();
    let mut entries = Vec::new();
    for (name, contents) in &written {
        let path = dir.join(name);
        std::fs::write(&path, contents).map_err(|e| RunError::io(&path, e))?;
        entries.push(OutputEntry { file: name.clone(), sha256: config::hex(&Sha256::digest(contents.as_bytes())) });
        files.push(path);
    }
    let manifest = Manifest {
        experiment: &cfg.experiment,
        seed: cfg.seed,
        config_sha256: cfg.hash(),
        ppd_core_version: ppd_core::VERSION,
        ppd_experiments_version: VERSION,
        outputs: entries,
        config: cfg,
    };
    let text = toml::to_string(&manifest).map_err(|e| RunError::config(e.to_string()))?;
    let path = dir.join("manifest.txt");
    std::fs::write(&path, text).map_err(|e| RunError::io(&path, e))?;
    files.push(path);
    Ok(RunReport { dir: dir.to_path_buf(), files, rows: outputs.table.rows.len() })
}

/// The resolved config and the grid of cells a run would evaluate.
pub fn describe(cfg: &ExperimentConfig) -> RunResult<String> {
    let s = &cfg.sweep;
    let list = |v: &[usize]| format!("{v:?}");
    let grid = match cfg.kind()? {
        ExperimentKind::DepthBins => format!(
            "depths {} x bins {} ; n in [{}, {}] ; {} instances",
            list(&s.depths),
            list(&s.bins),
            cfg.prior.n_min,
            cfg.prior.n_max,
            cfg.replicates
        ),
        ExperimentKind::Normalization => format!(
            "variants [unnormalized, normalized] x depths {} x bins {} x n' {} ; step tuned at n={} ; {} instances per n'",
            list(&s.depths),
            list(&s.bins),
            list(&s.eval_n),
            cfg.prior.n_max,
            cfg.replicates
        ),
        ExperimentKind::Generalization => format!(
            "n_max {} x depths {} x bins {} x n' {} ; {} instances per n'",
            list(&s.n_max),
            list(&s.depths),
            list(&s.bins),
            list(&s.eval_n),
            cfg.replicates
        ),
        ExperimentKind::Stepsize => {
            format!("kernels {:?} x n {} ; {} trials", s.kernels, list(&s.ns), cfg.replicates)
        }
        ExperimentKind::Spectra => format!("n {} ; {} seeds", list(&s.ns), cfg.replicates),
        ExperimentKind::Calibrate => format!(
            "{} draws, tail mass {}",
            cfg.truncation.mc_count, cfg.truncation.tail_mass
        ),
        ExperimentKind::FitEb => format!(
            "{} amplitudes x {}^{} lengthscales x {} noise levels on {}",
            cfg.data.amplitudes.len(),
            cfg.data.lengthscales.len(),
            cfg.data.features.len(),
            cfg.data.noise_sds.len(),
            cfg.data.path
        ),
    };
    Ok(format!(
        "# experiment {} (config sha256 {})\n# output {}\n# grid: {grid}\n{}",
        cfg.experiment,
        cfg.hash(),
        cfg.output_path().display(),
        cfg.to_toml()
    ))
}
