//! Long-format result tables: one metric per row.

use std::path::Path;

use crate::error::{RunError, RunResult};

pub const COLUMNS: [&str; 13] = [
    "experiment",
    "variant",
    "depth",
    "bins",
    "n_max",
    "n",
    "metric",
    "value",
    "count",
    "stderr",
    "diverged",
    "seed",
    "config_hash",
];

/// Sweep coordinates of a row; unused ones stay empty in the CSV.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Coords {
    pub variant: String,
    pub depth: Option<usize>,
    pub bins: Option<usize>,
    pub n_max: Option<usize>,
    pub n: Option<usize>,
}

impl Coords {
    pub fn variant(v: impl Into<String>) -> Self {
        Coords { variant: v.into(), ..Default::default() }
    }

    pub fn depth(mut self, l: usize) -> Self {
        self.depth = Some(l);
        self
    }

    pub fn bins(mut self, c: usize) -> Self {
        self.bins = Some(c);
        self
    }

    pub fn n_max(mut self, n: usize) -> Self {
        self.n_max = Some(n);
        self
    }

    pub fn n(mut self, n: usize) -> Self {
        self.n = Some(n);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub coords: Coords,
    pub metric: String,
    pub value: f64,
    pub count: usize,
    pub stderr: Option<f64>,
    /// Replicates whose readout was non-finite, beyond the divergence
    /// threshold, or had nonpositive variance.
    pub diverged: usize,
}

/// Mean and standard error of per-replicate values, summed in index order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub stderr: f64,
    pub count: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Summary {
        let count = values.len();
        if count == 0 {
            return Summary { mean: f64::NAN, stderr: f64::NAN, count };
        }
        let mean = values.iter().sum::<f64>() / count as f64;
        let stderr = if count > 1 {
            let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
            (ss / (count - 1) as f64 / count as f64).sqrt()
        } else {
            f64::NAN
        };
        Summary { mean, stderr, count }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultTable {
    pub experiment: String,
    pub seed: u64,
    pub config_hash: String,
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    pub fn new(experiment: impl Into<String>, seed: u64, config_hash: impl Into<String>) -> Self {
        ResultTable { experiment: experiment.into(), seed, config_hash: config_hash.into(), rows: Vec::new() }
    }

    /// Adds a single value.
    pub fn value(&mut self, coords: Coords, metric: &str, value: f64) {
        self.rows.push(ResultRow { coords, metric: metric.into(), value, count: 1, stderr: None, diverged: 0 });
    }

    /// Adds the mean of per-replicate values with its standard error.
    pub fn summary(&mut self, coords: Coords, metric: &str, values: &[f64], diverged: usize) {
        let s = Summary::of(values);
        self.rows.push(ResultRow {
            coords,
            metric: metric.into(),
            value: s.mean,
            count: s.count,
            stderr: Some(s.stderr),
            diverged,
        });
    }

    pub fn find(&self, metric: &str, pred: impl Fn(&Coords) -> bool) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.metric == metric && pred(&r.coords))
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(COLUMNS).expect("in-memory write");
        let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            let c = &r.coords;
            w.write_record([
                self.experiment.clone(),
                c.variant.clone(),
                opt(c.depth),
                opt(c.bins),
                opt(c.n_max),
                opt(c.n),
                r.metric.clone(),
                fmt_f64(r.value),
                r.count.to_string(),
                r.stderr.map(fmt_f64).unwrap_or_default(),
                r.diverged.to_string(),
                self.seed.to_string(),
                self.config_hash.clone(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }

    pub fn write_csv(&self, path: &Path) -> RunResult<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| RunError::io(path, e))
    }
}

/// Shortest round-trip decimal; `nan`, `inf` and `-inf` for the rest.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{v:?}")
    }
}
