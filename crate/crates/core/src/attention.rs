//! The explicit transformer whose attention layers run Richardson iteration.
//!
//! Token layout for a context of `n` points in `d` dimensions: a
//! `(d+4) × (n+1)` matrix with one token per column, the query last.
//!
//! | rows      | content                                       |
//! |-----------|-----------------------------------------------|
//! | `0..d`    | features                                      |
//! | `d`       | labels, 1 in the query column                 |
//! | `d + 1`   | `κ(x_j, x)`, written by the first layer       |
//! | `d + 2`   | iterate for `v = Y` (predictive mean)         |
//! | `d + 3`   | iterate for `v = k_x` (variance reduction)    |
//!
//! The first layer lets every token attend only to the query, so row `d+1`
//! of column `j` becomes `κ(x_j, x)` and the query column gets `κ(x, x)`.
//! Every later layer lets tokens attend only to the context and performs
//! one Richardson update on rows `d+2` and `d+3`.

use std::ops::ControlFlow;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::gp::{ContextSet, PPDMoments};
use crate::kernels::KernelSpec;
use crate::richardson::{StepSchedule, DIVERGENCE_THRESHOLD};

/// Row indices of the token layout for feature dimension `d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rows {
    pub dim: usize,
}

impl Rows {
    pub fn label(&self) -> usize {
        self.dim
    }
    pub fn cross(&self) -> usize {
        self.dim + 1
    }
    pub fn mean(&self) -> usize {
        self.dim + 2
    }
    pub fn var(&self) -> usize {
        self.dim + 3
    }
    pub fn total(&self) -> usize {
        self.dim + 4
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    z: DMatrix<f64>,
    dim: usize,
}

impl TokenMatrix {
    pub fn from_matrix(z: DMatrix<f64>, dim: usize) -> Result<Self> {
        if z.nrows() != dim + 4 {
            return Err(Error::DimensionMismatch { expected: dim + 4, got: z.nrows() });
        }
        if z.ncols() < 2 {
            return Err(Error::invalid("token matrix needs a context token and a query token"));
        }
        Ok(TokenMatrix { z, dim })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of context tokens.
    pub fn n(&self) -> usize {
        self.z.ncols() - 1
    }

    pub fn rows(&self) -> Rows {
        Rows { dim: self.dim }
    }

    pub fn query_column(&self) -> usize {
        self.n()
    }

    /// Every entry finite and within the divergence threshold.
    pub fn bounded(&self) -> bool {
        self.z.iter().all(|v| v.abs() <= DIVERGENCE_THRESHOLD)
    }
}

/// Embeds a context: features and labels in place, 1 in the query's label
/// slot, zero workspace.
pub fn build_tokens(ctx: &ContextSet) -> TokenMatrix {
    let (n, d) = (ctx.n(), ctx.dim());
    let mut z = DMatrix::zeros(d + 4, n + 1);
    for j in 0..n {
        for k in 0..d {
            z[(k, j)] = ctx.x()[(j, k)];
        }
        z[(d, j)] = ctx.y()[j];
    }
    for k in 0..d {
        z[(k, n)] = ctx.query()[k];
    }
    z[(d, n)] = 1.0;
    TokenMatrix { z, dim: d }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    /// Keys are the query token only.
    FirstLayer,
    /// Keys are the context tokens only.
    Context,
}

/// Binary `(n+1) × (n+1)` mask; entry `(i, j)` lets key `i` reach query `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    size: usize,
    bits: Vec<bool>,
}

impl AttentionMask {
    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let size = n + 1;
        let mut bits = vec![false; size * size];
        for i in 0..size {
            for j in 0..size {
                bits[i * size + j] = f(i, j);
            }
        }
        AttentionMask { size, bits }
    }

    pub fn of_kind(kind: MaskKind, n: usize) -> Self {
        match kind {
            MaskKind::FirstLayer => Self::from_fn(n, |i, _| i == n),
            MaskKind::Context => Self::from_fn(n, |i, _| i < n),
        }
    }

    pub fn zeros(n: usize) -> Self {
        Self::from_fn(n, |_, _| false)
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.size + j]
    }

    pub fn size(&self) -> usize {
        self.size
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub value: DMatrix<f64>,
    pub key: DMatrix<f64>,
    pub query: DMatrix<f64>,
    pub skip: DMatrix<f64>,
    pub mask: MaskKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerConfig {
    pub dim: usize,
    /// Number of layers; the first embeds `k_x`, the remaining `depth - 1`
    /// are Richardson updates.
    pub depth: usize,
    /// Step of the residual term; layer `l` uses update index `l`.
    pub schedule: StepSchedule,
    /// Step of the drift term `-σ² u`, when it differs from `schedule`.
    pub drift_schedule: Option<StepSchedule>,
    pub noise_var: f64,
    pub kernel: KernelSpec,
    pub normalized: bool,
    /// `2 × (d+4)` linear map from the query token to `(μ, τ)`.
    pub readout: DMatrix<f64>,
}

impl TransformerConfig {
    pub fn new(
        kernel: KernelSpec,
        noise_var: f64,
        dim: usize,
        depth: usize,
        schedule: StepSchedule,
        normalized: bool,
    ) -> Result<Self> {
        let cfg = TransformerConfig {
            dim,
            depth,
            schedule,
            drift_schedule: None,
            noise_var,
            kernel,
            normalized,
            readout: readout_matrix(dim, noise_var),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_drift_schedule(mut self, drift: StepSchedule) -> Result<Self> {
        self.drift_schedule = Some(drift);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::invalid("feature dimension must be at least 1"));
        }
        if self.depth == 0 {
            return Err(Error::invalid("depth must be at least 1"));
        }
        if !(self.noise_var.is_finite() && self.noise_var >= 0.0) {
            return Err(Error::invalid(format!("noise variance must be nonnegative, got {}", self.noise_var)));
        }
        self.kernel.validate()?;
        self.kernel.check_dim(self.dim)?;
        self.schedule.validate(self.depth - 1)?;
        if let Some(d) = &self.drift_schedule {
            d.validate(self.depth - 1)?;
        }
        if self.readout.shape() != (2, self.dim + 4) {
            return Err(Error::invalid("readout must be 2 × (d+4)"));
        }
        Ok(())
    }
}

/// Readout taking the query token to `(μ, τ)`: row 0 picks the mean iterate,
/// row 1 forms `σ²·1 + κ(x, x) - u(k_x)` using the query's unit label slot.
pub fn readout_matrix(dim: usize, noise_var: f64) -> DMatrix<f64> {
    let r = Rows { dim };
    let mut w = DMatrix::zeros(2, r.total());
    w[(0, r.mean())] = 1.0;
    w[(1, r.label())] = noise_var;
    w[(1, r.cross())] = 1.0;
    w[(1, r.var())] = -1.0;
    w
}

/// Weights of every layer, first layer included.
pub fn construct_weights(config: &TransformerConfig) -> Result<Vec<LayerWeights>> {
    config.validate()?;
    let r = Rows { dim: config.dim };
    let t = r.total();
    let mut select = DMatrix::zeros(t, t);
    for k in 0..config.dim {
        select[(k, k)] = 1.0;
    }
    let drift = config.drift_schedule.as_ref().unwrap_or(&config.schedule);
    let mut layers = Vec::with_capacity(config.depth);
    let mut value = DMatrix::zeros(t, t);
    value[(r.cross(), r.label())] = 1.0;
    layers.push(LayerWeights {
        value,
        key: select.clone(),
        query: select.clone(),
        skip: DMatrix::zeros(t, t),
        mask: MaskKind::FirstLayer,
    });
    for l in 1..config.depth {
        let (eta, eta_s) = (config.schedule.at(l), drift.at(l));
        let mut value = DMatrix::zeros(t, t);
        value[(r.mean(), r.label())] = eta;
        value[(r.var(), r.cross())] = eta;
        value[(r.mean(), r.mean())] = -eta;
        value[(r.var(), r.var())] = -eta;
        let mut skip = DMatrix::zeros(t, t);
        skip[(r.mean(), r.mean())] = -eta_s * config.noise_var;
        skip[(r.var(), r.var())] = -eta_s * config.noise_var;
        layers.push(LayerWeights { value, key: select.clone(), query: select.clone(), skip, mask: MaskKind::Context });
    }
    Ok(layers)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub delta: DMatrix<f64>,
    /// Per-query normalizers `s_j`, present in normalized mode.
    pub normalizers: Option<Vec<f64>>,
}

/// Masked kernel attention. Column `j` of the output is
/// `Σᵢ κ(Kzᵢ, Qzⱼ) Mᵢⱼ Vzᵢ`, summed left to right over keys `i`, divided
/// by `sⱼ = Σᵢ κ(Kzᵢ, Qzⱼ) Mᵢⱼ` when normalized. The kernel sees the
/// feature block (first `d` rows) of the projected tokens.
pub fn attn(
    z: &TokenMatrix,
    w: &LayerWeights,
    mask: &AttentionMask,
    spec: &KernelSpec,
    normalized: bool,
) -> Result<AttentionOutput> {
    let t = z.rows().total();
    for m in [&w.value, &w.key, &w.query, &w.skip] {
        if m.shape() != (t, t) {
            return Err(Error::DimensionMismatch { expected: t, got: m.nrows() });
        }
    }
    if mask.size() != z.n() + 1 {
        return Err(Error::DimensionMismatch { expected: z.n() + 1, got: mask.size() });
    }
    let scores = score_matrix(z, w, spec);
    apply_scores(z, &w.value, &scores, mask, normalized)
}

/// Unmasked scores `κ(Kzᵢ, Qzⱼ)`, row `i` = key, column `j` = query.
fn score_matrix(z: &TokenMatrix, w: &LayerWeights, spec: &KernelSpec) -> DMatrix<f64> {
    let d = z.dim;
    let keys = (&w.key * &z.z).rows(0, d).into_owned();
    let queries = (&w.query * &z.z).rows(0, d).into_owned();
    let m = z.z.ncols();
    DMatrix::from_fn(m, m, |i, j| spec.eval(keys.column(i).as_slice(), queries.column(j).as_slice()))
}

fn apply_scores(
    z: &TokenMatrix,
    value: &DMatrix<f64>,
    scores: &DMatrix<f64>,
    mask: &AttentionMask,
    normalized: bool,
) -> Result<AttentionOutput> {
    let t = z.z.nrows();
    let m = z.z.ncols();
    let values = value * &z.z;
    let active: Vec<usize> = (0..t).filter(|&r| value.row(r).iter().any(|&v| v != 0.0)).collect();
    let mut delta = DMatrix::zeros(t, m);
    let mut normalizers = normalized.then(|| vec![0.0; m]);
    let mut acc = vec![0.0; active.len()];
    for j in 0..m {
        acc.iter_mut().for_each(|a| *a = 0.0);
        let mut s = 0.0;
        for i in 0..m {
            if !mask.get(i, j) {
                continue;
            }
            let h = scores[(i, j)];
            s += h;
            for (a, &r) in acc.iter_mut().zip(&active) {
                *a += h * values[(r, i)];
            }
        }
        if let Some(norms) = normalizers.as_mut() {
            if !(s > 0.0) {
                return Err(Error::InvalidKernel(format!("attention normalizer {s} for token {j} is not positive")));
            }
            norms[j] = s;
            acc.iter_mut().for_each(|a| *a /= s);
        }
        for (a, &r) in acc.iter().zip(&active) {
            delta[(r, j)] = *a;
        }
    }
    Ok(AttentionOutput { delta, normalizers })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `Z⁽⁰⁾ … Z⁽ᴸ⁾`.
    pub trace: Vec<TokenMatrix>,
    pub moments: PPDMoments,
    /// First layer whose output had an entry that was non-finite or beyond
    /// the divergence threshold.
    pub diverged_at: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub last: TokenMatrix,
    pub moments: PPDMoments,
    pub layers_run: usize,
    pub diverged_at: Option<usize>,
}

/// A configured transformer with its constructed weights.
#[derive(Debug, Clone)]
pub struct Transformer {
    config: TransformerConfig,
    weights: Vec<LayerWeights>,
}

impl Transformer {
    pub fn new(config: TransformerConfig) -> Result<Self> {
        let weights = construct_weights(&config)?;
        Ok(Transformer { config, weights })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn weights(&self) -> &[LayerWeights] {
        &self.weights
    }

    /// `(μ, τ)` read from the query token.
    pub fn read_out(&self, z: &TokenMatrix) -> PPDMoments {
        let out = &self.config.readout * z.z.column(z.query_column());
        PPDMoments { mean: out[0], variance: out[1] }
    }

    /// Runs the layers in order, calling `observer(l, Z⁽ˡ⁾)` for
    /// `l = 0..=L` (after layer `l` for `l ≥ 1`). Returning `Break` stops
    /// early.
    pub fn run<F>(&self, z0: &TokenMatrix, mut observer: F) -> Result<RunSummary>
    where
        F: FnMut(usize, &TokenMatrix) -> ControlFlow<()>,
    {
        if z0.dim != self.config.dim {
            return Err(Error::DimensionMismatch { expected: self.config.dim, got: z0.dim });
        }
        let n = z0.n();
        let masks = [AttentionMask::of_kind(MaskKind::FirstLayer, n), AttentionMask::of_kind(MaskKind::Context, n)];
        let mut z = z0.clone();
        let mut diverged_at = None;
        let mut layers_run = 0;
        // Scores only depend on the projected feature rows, which no layer
        // writes, so they are reused while the key/query maps are unchanged.
        let mut cache: Option<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> = None;
        if observer(0, &z).is_break() {
            return Ok(self.summary(z, 0, None));
        }
        for (l, w) in self.weights.iter().enumerate() {
            let scores = match &cache {
                Some((k, q, s)) if *k == w.key && *q == w.query && l > 0 => s.clone(),
                _ => {
                    let s = score_matrix(&z, w, &self.config.kernel);
                    cache = Some((w.key.clone(), w.query.clone(), s.clone()));
                    s
                }
            };
            let (mask, normalized) = match w.mask {
                MaskKind::FirstLayer => (&masks[0], false),
                MaskKind::Context => (&masks[1], self.config.normalized),
            };
            let out = apply_scores(&z, &w.value, &scores, mask, normalized)?;
            let mut skip = &w.skip * &z.z;
            if let Some(s) = &out.normalizers {
                for (j, sj) in s.iter().enumerate() {
                    skip.column_mut(j).unscale_mut(*sj);
                }
            }
            z.z += out.delta;
            z.z += skip;
            layers_run = l + 1;
            if diverged_at.is_none() && !z.bounded() {
                diverged_at = Some(layers_run);
            }
            if observer(layers_run, &z).is_break() {
                break;
            }
        }
        Ok(self.summary(z, layers_run, diverged_at))
    }

    fn summary(&self, last: TokenMatrix, layers_run: usize, diverged_at: Option<usize>) -> RunSummary {
        RunSummary { moments: self.read_out(&last), last, layers_run, diverged_at }
    }

    /// Full forward pass retaining every intermediate token matrix.
    pub fn forward(&self, z0: &TokenMatrix) -> Result<ForwardOutput> {
        let mut trace = Vec::with_capacity(self.config.depth + 1);
        let summary = self.run(z0, |_, z| {
            trace.push(z.clone());
            ControlFlow::Continue(())
        })?;
        Ok(ForwardOutput { trace, moments: summary.moments, diverged_at: summary.diverged_at })
    }
}

/// Builds the weights for `config` and runs them on `z0`.
pub fn forward(config: &TransformerConfig, z0: &TokenMatrix) -> Result<ForwardOutput> {
    Transformer::new(config.clone())?.forward(z0)
}
