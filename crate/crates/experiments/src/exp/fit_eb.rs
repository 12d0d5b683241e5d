//! Empirical-Bayes fit of an anisotropic RBF GP to a standardized CSV.

use std::path::Path;

use ppd_core::datagen::{load_standardized_csv, CsvOptions};
use ppd_core::gp::empirical_bayes_fit;
use ppd_core::kernels::KernelSpec;

use super::Outputs;
use crate::config::ExperimentConfig;
use crate::error::RunResult;
use crate::table::Coords;

/// Every assignment of `values` to `dims` coordinates, last coordinate
/// fastest.
fn product(values: &[f64], dims: usize) -> Vec<Vec<f64>> {
    let mut out = vec![vec![]];
    for _ in 0..dims {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                values.iter().map(move |&v| {
                    let mut p = prefix.clone();
                    p.push(v);
                    p
                })
            })
            .collect();
    }
    out
}

pub fn run(cfg: &ExperimentConfig) -> RunResult<Outputs> {
    let d = &cfg.data;
    let opts = CsvOptions {
        feature_columns: d.features.clone(),
        response_column: d.response.clone(),
        coord_scale: d.coord_scale,
        delimiter: d.delimiter.as_bytes()[0],
    };
    let data = load_standardized_csv(Path::new(&d.path), &opts)?;
    let mut grid = Vec::new();
    for &amp in &d.amplitudes {
        for ls in product(&d.lengthscales, d.features.len()) {
            for &sd in &d.noise_sds {
                grid.push((KernelSpec::ard_rbf(amp, ls.clone())?, sd * sd));
            }
        }
    }
    let fit = empirical_bayes_fit(&grid, &data.x, &data.y)?;

    let mut out = Outputs::new(cfg);
    let t = &mut out.table;
    let all = Coords::variant("fit").n(data.x.nrows());
    t.value(all.clone(), "grid_size", grid.len() as f64);
    t.value(all.clone(), "grid_index", fit.index as f64);
    t.value(all.clone(), "log_marginal_likelihood", fit.log_likelihood);
    t.value(all.clone(), "noise_var", fit.noise_var);
    t.value(all.clone(), "noise_var_original_units", data.record.response.inverse_variance(fit.noise_var));
    if let KernelSpec::ArdRbf { amplitude, lengthscales } = &fit.kernel {
        t.value(all.clone(), "amplitude", *amplitude);
        for ((ls, name), tr) in lengthscales.iter().zip(&d.features).zip(&data.record.features) {
            let c = Coords { variant: name.clone(), ..all.clone() };
            t.value(c.clone(), "lengthscale", *ls);
            t.value(c, "lengthscale_original_units", ls * tr.scale);
        }
    }
    out.files.push(("transform.txt".into(), data.record.to_text()));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_enumerates_in_order() {
        let p = product(&[1.0, 2.0], 2);
        assert_eq!(p, vec![vec![1.0, 1.0], vec![1.0, 2.0], vec![2.0, 1.0], vec![2.0, 2.0]]);
    }
}
