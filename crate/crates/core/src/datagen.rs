//! Synthetic GP regression tasks and CSV ingestion.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::gp::{self, ContextSet, HyperPrior, MixturePPD, PPDMoments, PredictiveLaw};
use crate::kernels::{self, KernelSpec};
use crate::linalg;
use crate::normal::TruncatedNormal;

/// Seed plus stream index. Every instance gets its own ChaCha8 stream, so
/// draws do not depend on how instances are scheduled across threads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamSeed {
    pub seed: u64,
    pub stream: u64,
}

impl StreamSeed {
    pub fn new(seed: u64, stream: u64) -> Self {
        StreamSeed { seed, stream }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputLaw {
    /// `N(0, I/d)`.
    Gaussian,
    /// Uniform on `[-1/√d, 1/√d]^d`.
    Uniform,
}

impl InputLaw {
    pub fn sample(&self, rng: &mut impl Rng, dim: usize) -> Vec<f64> {
        let s = 1.0 / (dim as f64).sqrt();
        match self {
            InputLaw::Gaussian => (0..dim).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect(),
            InputLaw::Uniform => (0..dim).map(|_| s * (2.0 * rng.random::<f64>() - 1.0)).collect(),
        }
    }
}

/// Law of synthetic regression tasks.
///
/// With a hyperprior, each task first draws its kernel and noise level from
/// it and `kernel`/`noise_var` are unused.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorConfig {
    pub kernel: KernelSpec,
    pub noise_var: f64,
    pub dim: usize,
    pub n_min: usize,
    pub n_max: usize,
    pub input_law: InputLaw,
    pub hyper: Option<HyperPrior>,
}

impl PriorConfig {
    /// RBF with unit amplitude, lengthscale 0.8, noise variance 0.2 and
    /// Gaussian inputs.
    pub fn rbf_default(dim: usize) -> Self {
        PriorConfig {
            kernel: KernelSpec::Rbf { amplitude: 1.0, lengthscale: 0.8 },
            noise_var: 0.2,
            dim,
            n_min: 1,
            n_max: 64,
            input_law: InputLaw::Gaussian,
            hyper: None,
        }
    }

    pub fn with_n_range(mut self, n_min: usize, n_max: usize) -> Self {
        self.n_min = n_min;
        self.n_max = n_max;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::invalid("dimension must be at least 1"));
        }
        if self.n_min == 0 || self.n_min > self.n_max {
            return Err(Error::invalid(format!("invalid sample-size range [{}, {}]", self.n_min, self.n_max)));
        }
        if !(self.noise_var.is_finite() && self.noise_var > 0.0) {
            return Err(Error::invalid(format!("noise variance must be positive, got {}", self.noise_var)));
        }
        self.kernel.validate()?;
        self.kernel.check_dim(self.dim)?;
        if let Some(h) = &self.hyper {
            for c in h.components() {
                c.kernel.check_dim(self.dim)?;
            }
        }
        Ok(())
    }
}

/// Exact predictive law of a task.
#[derive(Debug, Clone, PartialEq)]
pub enum Truth {
    Gaussian(PPDMoments),
    Mixture(MixturePPD),
}

impl Truth {
    /// Untruncated draw.
    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        let m = self.pick(rng, |m| m.variance);
        m.mean + m.variance.sqrt() * rng.sample::<f64, _>(StandardNormal)
    }

    /// Draw restricted to `(lower, upper]`, by inverse CDF. Mixture
    /// components are chosen in proportion to their truncated mass.
    pub fn sample_truncated(&self, rng: &mut impl Rng, lower: f64, upper: f64) -> Result<f64> {
        let m = self.pick(rng, |m| m.interval_mass(lower, upper));
        let t = TruncatedNormal::new(m.mean, m.variance, lower, upper)?;
        Ok(t.quantile(rng.random::<f64>()))
    }

    pub fn moments(&self) -> PPDMoments {
        PPDMoments { mean: self.mean(), variance: self.variance() }
    }

    fn pick(&self, rng: &mut impl Rng, factor: impl Fn(&PPDMoments) -> f64) -> PPDMoments {
        match self {
            Truth::Gaussian(m) => *m,
            Truth::Mixture(mix) => {
                let w: Vec<f64> = mix.components.iter().map(|c| c.weight * factor(&c.moments)).collect();
                let total: f64 = w.iter().sum();
                let mut u = rng.random::<f64>() * total;
                for (c, wc) in mix.components.iter().zip(&w) {
                    if u < *wc {
                        return c.moments;
                    }
                    u -= wc;
                }
                mix.components.iter().zip(&w).rev().find(|(_, w)| **w > 0.0).map_or(mix.components[0].moments, |(c, _)| c.moments)
            }
        }
    }
}

impl PredictiveLaw for Truth {
    fn interval_mass(&self, lo: f64, hi: f64) -> f64 {
        match self {
            Truth::Gaussian(m) => m.interval_mass(lo, hi),
            Truth::Mixture(m) => m.interval_mass(lo, hi),
        }
    }

    fn mean(&self) -> f64 {
        match self {
            Truth::Gaussian(m) => m.mean,
            Truth::Mixture(m) => m.mean(),
        }
    }

    fn variance(&self) -> f64 {
        match self {
            Truth::Gaussian(m) => m.variance,
            Truth::Mixture(m) => m.variance(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticInstance {
    pub context: ContextSet,
    pub truth: Truth,
    /// Realized label in `(bounds.0, bounds.1]`.
    pub y: f64,
    pub bounds: (f64, f64),
    /// Hyperprior component the task was drawn from.
    pub component: Option<usize>,
}

/// Draws `Y ~ N(0, G + σ²I)` for fixed inputs with one factorization.
pub fn sample_labels(spec: &KernelSpec, noise_var: f64, x: &DMatrix<f64>, rng: &mut impl Rng) -> Result<DVector<f64>> {
    let g = kernels::gram(spec, x)?;
    let chol = linalg::cholesky_with_jitter(&g.ridged(noise_var))?;
    let z = DVector::from_fn(x.nrows(), |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok(chol.l_dirty().lower_triangle() * z)
}

/// Draws a context, query and exact predictive law, leaving the label to the
/// caller. Draw order: n, hyperprior component, inputs row by row, query,
/// labels.
pub fn sample_task(prior: &PriorConfig, rng: &mut impl Rng) -> Result<(ContextSet, Truth, Option<usize>)> {
    let n = rng.random_range(prior.n_min..=prior.n_max);
    let component = prior.hyper.as_ref().map(|h| {
        let mut u = rng.random::<f64>();
        let comps = h.components();
        for (i, c) in comps.iter().enumerate() {
            if u < c.weight {
                return i;
            }
            u -= c.weight;
        }
        comps.len() - 1
    });
    let (spec, noise_var) = match (&prior.hyper, component) {
        (Some(h), Some(i)) => (&h.components()[i].kernel, h.components()[i].noise_var),
        _ => (&prior.kernel, prior.noise_var),
    };
    let d = prior.dim;
    let mut x = DMatrix::zeros(n, d);
    for i in 0..n {
        let row = prior.input_law.sample(rng, d);
        for k in 0..d {
            x[(i, k)] = row[k];
        }
    }
    let query = DVector::from_vec(prior.input_law.sample(rng, d));
    let y = sample_labels(spec, noise_var, &x, rng)?;
    let ctx = ContextSet::new(x, y, query)?;
    let truth = match &prior.hyper {
        Some(h) => Truth::Mixture(gp::hierarchical_mixture(h, &ctx)?),
        None => Truth::Gaussian(gp::exact_moments(spec, noise_var, &ctx)?),
    };
    Ok((ctx, truth, component))
}

/// One synthetic task with a label drawn from its truncated predictive law.
pub fn sample_instance(prior: &PriorConfig, bounds: (f64, f64), seed: StreamSeed) -> Result<SyntheticInstance> {
    prior.validate()?;
    if !(bounds.0 < bounds.1) {
        return Err(Error::InvalidPartition(format!("empty truncation interval ({}, {}]", bounds.0, bounds.1)));
    }
    let mut rng = seed.rng();
    let (context, truth, component) = sample_task(prior, &mut rng)?;
    let y = truth.sample_truncated(&mut rng, bounds.0, bounds.1)?;
    Ok(SyntheticInstance { context, truth, y, bounds, component })
}

/// Affine map `z = (v - center) / scale` for one column.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnTransform {
    pub name: String,
    pub center: f64,
    pub scale: f64,
}

impl ColumnTransform {
    pub fn forward(&self, v: f64) -> f64 {
        (v - self.center) / self.scale
    }

    pub fn inverse(&self, z: f64) -> f64 {
        z * self.scale + self.center
    }

    pub fn inverse_variance(&self, var: f64) -> f64 {
        var * self.scale * self.scale
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformRecord {
    pub features: Vec<ColumnTransform>,
    pub response: ColumnTransform,
}

impl TransformRecord {
    /// `key = value` lines, one per transform parameter.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |kind: &str, t: &ColumnTransform| {
            let _ = writeln!(s, "{kind}.{}.center = {:?}", t.name, t.center);
            let _ = writeln!(s, "{kind}.{}.scale = {:?}", t.name, t.scale);
        };
        for f in &self.features {
            put("feature", f);
        }
        put("response", &self.response);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut features: Vec<String> = Vec::new();
        let mut values: BTreeMap<(String, String), (Option<f64>, Option<f64>)> = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || Error::InvalidData(format!("transform record line {}: '{line}'", lineno + 1));
            let (key, value) = line.split_once('=').ok_or_else(bad)?;
            let key = key.trim();
            let value: f64 = value.trim().parse().map_err(|_| bad())?;
            let (kind, rest) = key.split_once('.').ok_or_else(bad)?;
            let (name, field) = rest.rsplit_once('.').ok_or_else(bad)?;
            if kind != "feature" && kind != "response" {
                return Err(bad());
            }
            let entry = values.entry((kind.to_string(), name.to_string())).or_default();
            match field {
                "center" => entry.0 = Some(value),
                "scale" => entry.1 = Some(value),
                _ => return Err(bad()),
            }
            if kind == "feature" && !features.iter().any(|f| f == name) {
                features.push(name.to_string());
            }
        }
        let take = |kind: &str, name: &str| -> Result<ColumnTransform> {
            match values.get(&(kind.to_string(), name.to_string())) {
                Some((Some(center), Some(scale))) => {
                    Ok(ColumnTransform { name: name.to_string(), center: *center, scale: *scale })
                }
                _ => Err(Error::InvalidData(format!("transform record incomplete for {kind} '{name}'"))),
            }
        };
        let responses: Vec<&String> =
            values.keys().filter(|(k, _)| k == "response").map(|(_, n)| n).collect();
        let [response] = responses.as_slice() else {
            return Err(Error::InvalidData("transform record needs exactly one response".into()));
        };
        Ok(TransformRecord {
            features: features.iter().map(|f| take("feature", f)).collect::<Result<_>>()?,
            response: take("response", response)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvOptions {
    pub feature_columns: Vec<String>,
    pub response_column: String,
    /// Extra divisor applied to every standardized feature.
    pub coord_scale: f64,
    pub delimiter: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StandardizedData {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub record: TransformRecord,
}

/// Reads a headed CSV, centers and scales each selected column to unit
/// sample standard deviation, and divides features by `coord_scale`.
pub fn load_standardized_csv(path: &Path, opts: &CsvOptions) -> Result<StandardizedData> {
    if !(opts.coord_scale.is_finite() && opts.coord_scale > 0.0) {
        return Err(Error::invalid(format!("coord_scale must be positive, got {}", opts.coord_scale)));
    }
    if opts.feature_columns.is_empty() {
        return Err(Error::invalid("at least one feature column is required"));
    }
    let io_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io { path: path.to_path_buf(), source },
        other => Error::Parse { path: path.to_path_buf(), row: 0, column: String::new(), message: format!("{other:?}") },
    };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(opts.delimiter)
        .has_headers(true)
        .from_path(path)
        .map_err(io_err)?;
    let headers = reader.headers().map_err(io_err)?.clone();
    let locate = |name: &str| {
        headers.iter().position(|h| h.trim() == name).ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            row: 1,
            column: name.to_string(),
            message: "column not found in header".into(),
        })
    };
    let mut wanted: Vec<(String, usize)> = Vec::new();
    for name in opts.feature_columns.iter().chain(std::iter::once(&opts.response_column)) {
        wanted.push((name.clone(), locate(name)?));
    }
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); wanted.len()];
    for (i, record) in reader.records().enumerate() {
        // line 1 is the header
        let row = i + 2;
        let record = record.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            row,
            column: String::new(),
            message: e.to_string(),
        })?;
        for (k, (name, idx)) in wanted.iter().enumerate() {
            let cell = record.get(*idx).unwrap_or("");
            let v: f64 = cell.trim().parse().ok().filter(|v: &f64| v.is_finite()).ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                row,
                column: name.clone(),
                message: format!("not a finite number: '{cell}'"),
            })?;
            columns[k].push(v);
        }
    }
    let n = columns[0].len();
    if n < 2 {
        return Err(Error::InvalidData(format!("{}: need at least two data rows", path.display())));
    }
    let fit = |name: &str, col: &[f64], extra: f64| -> Result<ColumnTransform> {
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let sd = var.sqrt();
        if !(sd > 0.0) {
            return Err(Error::InvalidData(format!("column '{name}' is constant")));
        }
        Ok(ColumnTransform { name: name.to_string(), center: mean, scale: sd * extra })
    };
    let d = opts.feature_columns.len();
    let features: Vec<ColumnTransform> = (0..d)
        .map(|k| fit(&wanted[k].0, &columns[k], opts.coord_scale))
        .collect::<Result<_>>()?;
    let response = fit(&opts.response_column, &columns[d], 1.0)?;
    let x = DMatrix::from_fn(n, d, |i, k| features[k].forward(columns[k][i]));
    let y = DVector::from_fn(n, |i, _| response.forward(columns[d][i]));
    Ok(StandardizedData { x, y, record: TransformRecord { features, response } })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_instance() {
        let prior = PriorConfig::rbf_default(2).with_n_range(3, 9);
        let a = sample_instance(&prior, (-4.0, 4.0), StreamSeed::new(7, 3)).unwrap();
        let b = sample_instance(&prior, (-4.0, 4.0), StreamSeed::new(7, 3)).unwrap();
        assert_eq!(a, b);
        let c = sample_instance(&prior, (-4.0, 4.0), StreamSeed::new(7, 4)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn single_point_context_matches_rank_one_formula() {
        let prior = PriorConfig::rbf_default(1).with_n_range(1, 1);
        let inst = sample_instance(&prior, (-5.0, 5.0), StreamSeed::new(1, 0)).unwrap();
        let ctx = &inst.context;
        assert_eq!(ctx.n(), 1);
        let (x1, q, y1) = (ctx.x()[(0, 0)], ctx.query()[0], ctx.y()[0]);
        let k = (-0.5 * (x1 - q).powi(2) / 0.64).exp();
        let m = inst.truth.moments();
        assert!((m.mean - k * y1 / 1.2).abs() < 1e-15);
        assert!((m.variance - (1.2 - k * k / 1.2)).abs() < 1e-15);
        assert!(inst.y > -5.0 && inst.y <= 5.0);
    }

    #[test]
    fn invalid_prior_rejected() {
        let prior = PriorConfig::rbf_default(2).with_n_range(5, 4);
        assert!(sample_instance(&prior, (-1.0, 1.0), StreamSeed::new(0, 0)).is_err());
    }

    #[test]
    fn record_text_round_trip() {
        let rec = TransformRecord {
            features: vec![
                ColumnTransform { name: "lon".into(), center: -121.4, scale: 0.1 / 3.0 },
                ColumnTransform { name: "lat".into(), center: 38.6, scale: 2.5e-3 },
            ],
            response: ColumnTransform { name: "price".into(), center: 234_144.3, scale: 138_000.1 },
        };
        assert_eq!(TransformRecord::from_text(&rec.to_text()).unwrap(), rec);
        assert!(TransformRecord::from_text("feature.a.center = 1").is_err());
    }
}
