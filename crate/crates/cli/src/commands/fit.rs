use latent_brrr::evaluation::{compare_predictions, ptve, Comparison, FittedModel};
use latent_brrr::{ChainOptions, ModelConfig};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{load_dataset, model_config, model_inputs, out_file};
use crate::args::{FitArgs, PredictArgs};
use crate::error::{CliError, CliResult};
use crate::io::{default_names, from_rows, read_json, read_matrix, rows, write_json, write_matrix, write_samples};
use crate::manifest::Manifest;

pub const SUMMARY_FILE: &str = "posterior_summary.json";

/// Posterior means and standard deviations over the retained draws, plus
/// what `predict` needs to undo the centring.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PosteriorSummary {
    /// Resolved configuration (latent variance filled in).
    pub config: ModelConfig,
    pub n_retained: usize,
    pub x_names: Vec<String>,
    pub y_names: Vec<String>,
    pub x_mean: Vec<f64>,
    pub y_mean: Vec<f64>,
    pub train_ptve: f64,
    pub theta_mean: Vec<Vec<f64>>,
    pub theta_sd: Vec<Vec<f64>>,
    pub psi_mean: Vec<Vec<f64>>,
    pub psi_sd: Vec<Vec<f64>>,
    pub gamma_mean: Vec<Vec<f64>>,
    pub gamma_sd: Vec<Vec<f64>>,
    pub tau_mean: Vec<f64>,
    pub tau_sd: Vec<f64>,
    pub sigma_sq_mean: Vec<f64>,
    pub sigma_sq_sd: Vec<f64>,
}

/// Element-wise mean and sample standard deviation.
fn moments(draws: &[DMatrix<f64>], shape: (usize, usize)) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = draws.len() as f64;
    let mut mean = DMatrix::zeros(shape.0, shape.1);
    for d in draws {
        mean += d;
    }
    if draws.is_empty() {
        return (mean.clone(), mean);
    }
    mean /= n;
    let mut ss = DMatrix::zeros(shape.0, shape.1);
    for d in draws {
        let c = d - &mean;
        ss += c.component_mul(&c);
    }
    let sd = if draws.len() > 1 { (ss / (n - 1.0)).map(f64::sqrt) } else { ss };
    (mean, sd)
}

fn column(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v.as_slice())
}

fn flat(m: &DMatrix<f64>) -> Vec<f64> {
    m.iter().copied().collect()
}

impl PosteriorSummary {
    fn new(fit: &FittedModel, names: (Vec<String>, Vec<String>), train_ptve: f64) -> Self {
        let s = &fit.samples;
        let (p, k) = s.theta_mean.shape();
        let rank = s.config.rank;
        let collect = |f: &dyn Fn(&latent_brrr::ModelState) -> DMatrix<f64>| -> Vec<DMatrix<f64>> { s.states.iter().map(f).collect() };
        let (theta_mean, theta_sd) = moments(&collect(&|st| st.theta()), (p, k));
        let (psi_mean, psi_sd) = moments(&collect(&|st| st.psi.clone()), (p, rank));
        let (gamma_mean, gamma_sd) = moments(&collect(&|st| st.gamma.clone()), (rank, k));
        let (tau_mean, tau_sd) = moments(&collect(&|st| column(&st.tau())), (rank, 1));
        let (sig_mean, sig_sd) = moments(&collect(&|st| column(&st.sigma_sq)), (k, 1));
        PosteriorSummary {
            config: s.config.clone(),
            n_retained: s.states.len(),
            x_names: names.0,
            y_names: names.1,
            x_mean: fit.centering.x_mean.iter().copied().collect(),
            y_mean: fit.centering.y_mean.iter().copied().collect(),
            train_ptve,
            theta_mean: rows(&theta_mean),
            theta_sd: rows(&theta_sd),
            psi_mean: rows(&psi_mean),
            psi_sd: rows(&psi_sd),
            gamma_mean: rows(&gamma_mean),
            gamma_sd: rows(&gamma_sd),
            tau_mean: flat(&tau_mean),
            tau_sd: flat(&tau_sd),
            sigma_sq_mean: flat(&sig_mean),
            sigma_sq_sd: flat(&sig_sd),
        }
    }

    /// `(X − x̄)Θ̄ + ȳ`
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>, String> {
        let theta = from_rows(&self.theta_mean).ok_or("ragged theta_mean")?;
        let p = self.x_mean.len();
        let k = self.y_mean.len();
        if theta.shape() != (p, k) && !(p == 0 || k == 0) {
            return Err(format!("theta_mean is {}x{}, expected {p}x{k}", theta.nrows(), theta.ncols()));
        }
        if x.ncols() != p {
            return Err(format!("expected {p} covariate columns, got {}", x.ncols()));
        }
        let mut pred = DMatrix::zeros(x.nrows(), k);
        for i in 0..x.nrows() {
            for j in 0..k {
                let mut v = self.y_mean[j];
                for c in 0..p {
                    v += (x[(i, c)] - self.x_mean[c]) * theta[(c, j)];
                }
                pred[(i, j)] = v;
            }
        }
        Ok(pred)
    }
}

pub fn fit(a: &FitArgs) -> CliResult<()> {
    let m = &a.model;
    let config = model_config(m)?;
    let dir = &m.out_dir;
    Manifest::begin(dir, "fit", &config, &model_inputs(m))?.run(|man| {
        let data = load_dataset(&m.x, &m.y)?;
        let options = ChainOptions {
            psi_method: m.psi_method.into(),
        };
        let fit = FittedModel::fit(&data, &config, &options)?;
        man.add_timings(&fit.timings);
        let train_ptve = ptve(&fit.samples, &data)?;
        let names = (
            data.x_names.clone().unwrap_or_else(|| default_names("x", data.n_covariates())),
            data.y_names.clone().unwrap_or_else(|| default_names("y", data.n_targets())),
        );
        write_json(&out_file(dir, SUMMARY_FILE), &PosteriorSummary::new(&fit, names, train_ptve))?;
        if a.samples {
            write_samples(&out_file(dir, "samples.bin"), &fit.samples.states)?;
        }
        println!(
            "fitted {} on {} samples; {} draws retained, training PTVE {train_ptve:.4}",
            config.variant.name(),
            data.n_samples(),
            fit.samples.states.len()
        );
        Ok(())
    })
}

#[derive(Serialize)]
struct EvalFile {
    n_samples: usize,
    /// Present when observed targets were supplied; the null model predicts
    /// the training means.
    comparison: Option<Comparison>,
}

pub fn predict(a: &PredictArgs) -> CliResult<()> {
    let summary: PosteriorSummary = read_json(&a.summary)?;
    let mut inputs: Vec<&std::path::Path> = vec![&a.summary, &a.x];
    if let Some(y) = &a.y {
        inputs.push(y);
    }
    let dir = &a.out_dir;
    Manifest::begin(dir, "predict", &summary.config, &inputs)?.run(|_| {
        let (x, _) = read_matrix(&a.x)?;
        latent_brrr::Dataset::new(x.clone(), DMatrix::zeros(x.nrows(), 0))?;
        let pred = summary.predict(&x).map_err(|e| CliError::format(&a.x, e))?;
        write_matrix(&out_file(dir, "Y_pred.csv"), &pred, &summary.y_names)?;
        let comparison = match &a.y {
            Some(path) => {
                let (y, _) = read_matrix(path)?;
                if y.shape() != pred.shape() {
                    return Err(CliError::format(
                        path,
                        format!("expected {}x{} targets, got {}x{}", pred.nrows(), pred.ncols(), y.nrows(), y.ncols()),
                    ));
                }
                let null = DMatrix::from_fn(y.nrows(), y.ncols(), |_, j| summary.y_mean[j]);
                Some(compare_predictions(&null, &[(summary.config.variant.name().to_string(), pred.clone())], &y)?)
            }
            None => None,
        };
        write_json(
            &out_file(dir, "eval.json"),
            &EvalFile {
                n_samples: x.nrows(),
                comparison,
            },
        )?;
        println!("predicted {} samples", x.nrows());
        Ok(())
    })
}
