//! Run configuration: per-experiment defaults, a TOML file merged over them,
//! then `key=value` overrides.

use std::fmt;
use std::path::{Path, PathBuf};

use ppd_core::datagen::{InputLaw, PriorConfig};
use ppd_core::kernels::KernelSpec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::error::{RunError, RunResult};

/// Environment variable holding the root that relative output directories
/// are resolved against.
pub const OUTPUT_ROOT_ENV: &str = "PPD_OUTPUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExperimentKind {
    DepthBins,
    Normalization,
    Generalization,
    Stepsize,
    Spectra,
    Calibrate,
    FitEb,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 7] = [
        ExperimentKind::DepthBins,
        ExperimentKind::Normalization,
        ExperimentKind::Generalization,
        ExperimentKind::Stepsize,
        ExperimentKind::Spectra,
        ExperimentKind::Calibrate,
        ExperimentKind::FitEb,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::DepthBins => "depth-bins",
            ExperimentKind::Normalization => "normalization",
            ExperimentKind::Generalization => "generalization",
            ExperimentKind::Stepsize => "stepsize",
            ExperimentKind::Spectra => "spectra",
            ExperimentKind::Calibrate => "calibrate",
            ExperimentKind::FitEb => "fit-eb",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: String,
    pub seed: u64,
    /// Evaluation instances per cell (trials for `stepsize`, seeds for
    /// `spectra`).
    pub replicates: usize,
    /// Relative paths are resolved against `PPD_OUTPUT_ROOT` (or the working
    /// directory). Not part of the config hash.
    pub output_dir: String,
    pub prior: PriorSection,
    pub sweep: SweepSection,
    pub truncation: TruncationSection,
    pub solver: SolverSection,
    pub data: DataSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSection {
    /// `rbf`, `ard_rbf`, `linear` (diagonal `covariance`, identity if empty)
    /// or `blr` (segmented diagonal covariance).
    pub kernel: String,
    pub amplitude: f64,
    pub lengthscale: f64,
    pub lengthscales: Vec<f64>,
    pub covariance: Vec<f64>,
    pub noise_var: f64,
    pub dim: usize,
    pub n_min: usize,
    pub n_max: usize,
    /// `gaussian` or `uniform`.
    pub input_law: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub depths: Vec<usize>,
    pub bins: Vec<usize>,
    /// Context sizes the step is tuned at.
    pub n_max: Vec<usize>,
    /// Evaluation context sizes `n'`.
    pub eval_n: Vec<usize>,
    /// Context sizes for the spectral sweeps.
    pub ns: Vec<usize>,
    /// Kernel names for `stepsize`.
    pub kernels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruncationSection {
    pub mc_count: usize,
    pub tail_mass: f64,
    /// Explicit interval; when both are set calibration is skipped.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    pub normalized: bool,
    /// `"default"` (1/λ₁ per instance), `"optimal"` (η* per instance),
    /// `"tuned"` (seed-averaged at the tuning size) or a number.
    pub step: StepSetting,
    pub tuning_seeds: usize,
    pub tuning_factor: f64,
    pub level: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub path: String,
    pub features: Vec<String>,
    pub response: String,
    pub delimiter: String,
    pub coord_scale: f64,
    pub amplitudes: Vec<f64>,
    pub lengthscales: Vec<f64>,
    pub noise_sds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StepSetting {
    Value(f64),
    Name(String),
}

impl StepSetting {
    pub fn rule(&self) -> RunResult<StepRule> {
        match self {
            StepSetting::Value(v) if v.is_finite() && *v >= 0.0 => Ok(StepRule::Constant(*v)),
            StepSetting::Value(v) => Err(RunError::config(format!("solver.step must be nonnegative, got {v}"))),
            StepSetting::Name(s) => StepRule::parse(s),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepRule {
    Default,
    Optimal,
    Tuned,
    Constant(f64),
}

impl StepRule {
    pub fn parse(s: &str) -> RunResult<Self> {
        match s {
            "default" => Ok(StepRule::Default),
            "optimal" => Ok(StepRule::Optimal),
            "tuned" => Ok(StepRule::Tuned),
            other => match other.parse::<f64>() {
                Ok(v) if v.is_finite() && v >= 0.0 => Ok(StepRule::Constant(v)),
                _ => Err(RunError::config(format!(
                    "solver.step must be \"default\", \"optimal\", \"tuned\" or a nonnegative number, got '{other}'"
                ))),
            },
        }
    }
}

impl ExperimentConfig {
    pub fn defaults(kind: ExperimentKind) -> Self {
        let mut cfg = ExperimentConfig {
            experiment: kind.name().to_string(),
            seed: 1,
            replicates: 4096,
            output_dir: kind.name().to_string(),
            prior: PriorSection {
                kernel: "rbf".into(),
                amplitude: 1.0,
                lengthscale: 0.8,
                lengthscales: vec![],
                covariance: vec![],
                noise_var: 0.2,
                dim: 2,
                n_min: 1,
                n_max: 64,
                input_law: "gaussian".into(),
            },
            sweep: SweepSection {
                depths: vec![2, 4, 8, 16, 32],
                bins: vec![16, 32, 64, 128, 256],
                n_max: vec![64],
                eval_n: vec![],
                ns: vec![],
                kernels: vec![],
            },
            truncation: TruncationSection { mc_count: 20000, tail_mass: 0.002, lower: None, upper: None },
            solver: SolverSection {
                normalized: false,
                step: StepSetting::Name("default".into()),
                tuning_seeds: 20,
                tuning_factor: 0.99,
                level: 0.9,
            },
            data: DataSection {
                path: String::new(),
                features: vec![],
                response: String::new(),
                delimiter: ",".into(),
                coord_scale: 1.0,
                amplitudes: vec![1.0],
                lengthscales: vec![0.1, 0.2, 0.4, 0.8, 1.6],
                noise_sds: vec![0.1, 0.2, 0.4, 0.8],
            },
        };
        match kind {
            ExperimentKind::DepthBins | ExperimentKind::Calibrate | ExperimentKind::FitEb => {}
            ExperimentKind::Normalization => {
                cfg.prior.dim = 8;
                cfg.prior.n_min = 64;
                cfg.prior.n_max = 128;
                cfg.sweep.depths = vec![32];
                cfg.sweep.bins = vec![256];
                cfg.sweep.eval_n = vec![16, 32, 64, 100, 128, 200, 256];
                cfg.solver.step = StepSetting::Name("tuned".into());
            }
            ExperimentKind::Generalization => {
                cfg.sweep.depths = vec![32, 128, 512];
                cfg.sweep.bins = vec![256];
                cfg.sweep.n_max = vec![32, 64, 128];
                cfg.sweep.eval_n = vec![1, 2, 4, 8, 16, 32, 64, 128, 256];
                cfg.solver.normalized = true;
                cfg.solver.step = StepSetting::Name("tuned".into());
            }
            ExperimentKind::Stepsize => {
                cfg.replicates = 100;
                cfg.prior.dim = 16;
                cfg.sweep.ns = (1..=10).map(|i| 100 * i).collect();
                cfg.sweep.kernels = vec!["blr".into(), "rbf".into()];
            }
            ExperimentKind::Spectra => {
                cfg.replicates = 20;
                cfg.prior.dim = 8;
                cfg.sweep.ns = vec![1, 16, 32, 64, 128, 256, 512];
            }
        }
        cfg
    }

    pub fn kind(&self) -> RunResult<ExperimentKind> {
        ExperimentKind::from_name(&self.experiment)
            .ok_or_else(|| RunError::config(format!("unknown experiment '{}'", self.experiment)))
    }

    /// Resolves `kind`'s defaults, the optional file and the overrides, in
    /// that order. A run manifest is accepted in place of a config file.
    pub fn load(kind: ExperimentKind, file: Option<&Path>, overrides: &[String]) -> RunResult<Self> {
        let mut table = to_table(&Self::defaults(kind))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| RunError::io(path, e))?;
            let mut user: Table = text
                .parse()
                .map_err(|e| RunError::config(format!("{}: {e}", path.display())))?;
            if user.contains_key("config_sha256") {
                user = manifest_config(user, path)?;
            }
            if let Some(name) = user.get("experiment") {
                if name.as_str() != Some(kind.name()) {
                    return Err(RunError::config(format!(
                        "{}: experiment is {name}, but the subcommand is {kind}",
                        path.display()
                    )));
                }
            }
            merge(&mut table, user);
        }
        for ov in overrides {
            apply_override(&mut table, ov)?;
        }
        let cfg = ExperimentConfig::deserialize(Value::Table(table)).map_err(|e| RunError::config(e.to_string()))?;
        if cfg.experiment != kind.name() {
            return Err(RunError::config(format!("experiment cannot be overridden to '{}'", cfg.experiment)));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads the config embedded in a run manifest, with overrides applied.
    pub fn from_manifest(path: &Path, overrides: &[String]) -> RunResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| RunError::io(path, e))?;
        let table: Table = text
            .parse()
            .map_err(|e| RunError::config(format!("{}: {e}", path.display())))?;
        let inner = manifest_config(table, path)?;
        let name = inner.get("experiment").and_then(Value::as_str).unwrap_or_default();
        let kind = ExperimentKind::from_name(name)
            .ok_or_else(|| RunError::config(format!("{}: unknown experiment '{name}'", path.display())))?;
        Self::load(kind, Some(path), overrides)
    }

    pub fn validate(&self) -> RunResult<()> {
        let kind = self.kind()?;
        let fail = |msg: String| Err(RunError::Config(msg));
        if self.replicates == 0 {
            return fail("replicates must be at least 1".into());
        }
        if self.output_dir.is_empty() {
            return fail("output_dir must not be empty".into());
        }
        self.solver.step.rule()?;
        if self.solver.tuning_seeds == 0 {
            return fail("solver.tuning_seeds must be at least 1".into());
        }
        if !(self.solver.tuning_factor > 0.0 && self.solver.tuning_factor.is_finite()) {
            return fail("solver.tuning_factor must be positive".into());
        }
        if !(self.solver.level > 0.0 && self.solver.level < 1.0) {
            return fail(format!("solver.level must lie in (0, 1), got {}", self.solver.level));
        }
        let nonempty = |name: &str, len: usize| -> RunResult<()> {
            if len == 0 {
                Err(RunError::config(format!("sweep.{name} must not be empty for {kind}")))
            } else {
                Ok(())
            }
        };
        let positive = |name: &str, v: &[usize]| -> RunResult<()> {
            if v.contains(&0) {
                Err(RunError::config(format!("sweep.{name} entries must be at least 1")))
            } else {
                Ok(())
            }
        };
        positive("depths", &self.sweep.depths)?;
        positive("bins", &self.sweep.bins)?;
        positive("n_max", &self.sweep.n_max)?;
        positive("eval_n", &self.sweep.eval_n)?;
        positive("ns", &self.sweep.ns)?;
        match kind {
            ExperimentKind::DepthBins => {
                nonempty("depths", self.sweep.depths.len())?;
                nonempty("bins", self.sweep.bins.len())?;
            }
            ExperimentKind::Normalization => {
                nonempty("depths", self.sweep.depths.len())?;
                nonempty("bins", self.sweep.bins.len())?;
                nonempty("eval_n", self.sweep.eval_n.len())?;
            }
            ExperimentKind::Generalization => {
                nonempty("depths", self.sweep.depths.len())?;
                nonempty("bins", self.sweep.bins.len())?;
                nonempty("n_max", self.sweep.n_max.len())?;
                nonempty("eval_n", self.sweep.eval_n.len())?;
            }
            ExperimentKind::Stepsize => {
                nonempty("ns", self.sweep.ns.len())?;
                nonempty("kernels", self.sweep.kernels.len())?;
                for k in &self.sweep.kernels {
                    kernel_from_name(k, &self.prior)?;
                }
            }
            ExperimentKind::Spectra => {
                nonempty("ns", self.sweep.ns.len())?;
                if self.prior.kernel != "rbf" && self.prior.kernel != "ard_rbf" {
                    return fail(format!("spectra needs an RBF kernel, got '{}'", self.prior.kernel));
                }
            }
            ExperimentKind::Calibrate => {}
            ExperimentKind::FitEb => {
                let d = &self.data;
                if d.path.is_empty() {
                    return fail("data.path must be set for fit-eb".into());
                }
                if d.features.is_empty() || d.response.is_empty() {
                    return fail("data.features and data.response must be set for fit-eb".into());
                }
                if d.delimiter.len() != 1 {
                    return fail(format!("data.delimiter must be a single byte, got '{}'", d.delimiter));
                }
                if d.amplitudes.is_empty() || d.lengthscales.is_empty() || d.noise_sds.is_empty() {
                    return fail("data grids must not be empty".into());
                }
                return Ok(());
            }
        }
        let t = &self.truncation;
        match (t.lower, t.upper) {
            (Some(a), Some(b)) if !(a < b) => return fail(format!("truncation interval ({a}, {b}] is empty")),
            (Some(_), None) | (None, Some(_)) => {
                return fail("truncation.lower and truncation.upper must be set together".into())
            }
            _ => {}
        }
        if t.mc_count == 0 || !(t.tail_mass > 0.0 && t.tail_mass < 1.0) {
            return fail("truncation needs mc_count ≥ 1 and tail_mass in (0, 1)".into());
        }
        self.prior_config().map(|_| ())
    }

    pub fn prior_config(&self) -> RunResult<PriorConfig> {
        let p = &self.prior;
        let input_law = match p.input_law.as_str() {
            "gaussian" => InputLaw::Gaussian,
            "uniform" => InputLaw::Uniform,
            other => return Err(RunError::config(format!("unknown input law '{other}'"))),
        };
        let prior = PriorConfig {
            kernel: kernel_from_name(&p.kernel, p)?,
            noise_var: p.noise_var,
            dim: p.dim,
            n_min: p.n_min,
            n_max: p.n_max,
            input_law,
            hyper: None,
        };
        prior.validate()?;
        Ok(prior)
    }

    /// The config as canonical TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML with `output_dir` blanked, so moving
    /// the output does not change the hash.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = String::new();
        hex(&Sha256::digest(c.to_toml().as_bytes()))
    }

    pub fn output_path(&self) -> PathBuf {
        let dir = PathBuf::from(&self.output_dir);
        if dir.is_absolute() {
            return dir;
        }
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if !root.is_empty() => PathBuf::from(root).join(dir),
            _ => dir,
        }
    }
}

pub fn kernel_from_name(name: &str, p: &PriorSection) -> RunResult<KernelSpec> {
    let spec = match name {
        "rbf" => KernelSpec::rbf(p.amplitude, p.lengthscale),
        "ard_rbf" => KernelSpec::ard_rbf(p.amplitude, p.lengthscales.clone()),
        "linear" if p.covariance.is_empty() => KernelSpec::linear_identity(p.dim),
        "linear" => KernelSpec::linear(p.covariance.clone()),
        "blr" => KernelSpec::blr_default(p.dim),
        other => return Err(RunError::config(format!("unknown kernel '{other}'"))),
    }?;
    spec.check_dim(p.dim)?;
    Ok(spec)
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn to_table(cfg: &ExperimentConfig) -> RunResult<Table> {
    Table::try_from(cfg).map_err(|e| RunError::config(e.to_string()))
}

fn manifest_config(mut manifest: Table, path: &Path) -> RunResult<Table> {
    let Some(Value::Table(inner)) = manifest.remove("config") else {
        return Err(RunError::config(format!("{}: manifest has no [config] table", path.display())));
    };
    let recorded = manifest.get("config_sha256").and_then(Value::as_str).unwrap_or_default();
    let cfg = ExperimentConfig::deserialize(Value::Table(inner.clone()))
        .map_err(|e| RunError::config(format!("{}: {e}", path.display())))?;
    if cfg.hash() != recorded {
        return Err(RunError::config(format!(
            "{}: embedded config does not match config_sha256",
            path.display()
        )));
    }
    Ok(inner)
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Applies `a.b.c=value`. The value is read as a TOML value when it parses
/// as one and as a bare string otherwise.
fn apply_override(table: &mut Table, ov: &str) -> RunResult<()> {
    let (key, raw) = ov
        .split_once('=')
        .ok_or_else(|| RunError::config(format!("override '{ov}' is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(RunError::config(format!("malformed override key '{key}'")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        cur = match cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new())) {
            Value::Table(t) => t,
            _ => return Err(RunError::config(format!("override key '{key}': '{p}' is not a section"))),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
