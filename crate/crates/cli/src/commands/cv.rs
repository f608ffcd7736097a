use std::path::Path;

use latent_brrr::tuning::{cross_validate, CvPlan, CvScore};
use latent_brrr::ChainOptions;
use serde::Serialize;

use super::{load_dataset, model_config, model_inputs, out_file};
use crate::args::CvArgs;
use crate::error::{CliError, CliResult};
use crate::io::{read_json, write_json};
use crate::manifest::Manifest;

#[derive(Serialize)]
struct CvRun<'a> {
    base: &'a latent_brrr::ModelConfig,
    plan: &'a CvPlan,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

fn write_table(path: &Path, table: &[CvScore], n_folds: usize) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::format(path, e.to_string()))?;
    let mut header: Vec<String> = ["beta", "rank", "cv_mse"].map(String::from).to_vec();
    header.extend((0..n_folds).map(|f| format!("fold_{f}")));
    header.push("failure".into());
    let err = |e: csv::Error| CliError::format(path, e.to_string());
    w.write_record(&header).map_err(err)?;
    for s in table {
        let mut rec = vec![cell(s.beta), s.rank.to_string(), cell(s.cv_mse)];
        rec.extend(s.fold_mse.iter().map(|v| cell(*v)));
        rec.push(s.failure.clone().unwrap_or_default());
        w.write_record(&rec).map_err(err)?;
    }
    w.flush().map_err(|e| CliError::output(path, e))
}

pub fn cv(a: &CvArgs) -> CliResult<()> {
    let m = &a.model;
    let base = model_config(m)?;
    let mut plan: CvPlan = a.plan.as_deref().map(read_json).transpose()?.unwrap_or_default();
    if let Some(g) = &a.beta_grid {
        plan.beta_grid = g.clone();
    }
    if let Some(g) = &a.rank_grid {
        plan.rank_grid = g.clone();
    }
    if let Some(f) = a.folds {
        plan.n_folds = f;
    }
    if let Some(s) = a.cv_seed {
        plan.seed = s;
    }
    plan.validate(base.variant)?;
    let mut inputs = model_inputs(m);
    if let Some(p) = &a.plan {
        inputs.push(p);
    }
    let dir = &m.out_dir;
    let run = CvRun { base: &base, plan: &plan };
    Manifest::begin(dir, "cv", &run, &inputs)?.run(|_| {
        let data = load_dataset(&m.x, &m.y)?;
        let options = ChainOptions {
            psi_method: m.psi_method.into(),
        };
        let (best, table) = cross_validate(&data, &base, &plan, &options)?;
        write_table(&out_file(dir, "score_table.csv"), &table, plan.n_folds)?;
        write_json(&out_file(dir, "best_config.json"), &best)?;
        let beta = best.latent_snr.map(|b| format!(", latent SNR {b}")).unwrap_or_default();
        println!("best: rank {}{beta}", best.rank);
        Ok(())
    })
}
