use latent_brrr::simulation::{generate, oracle_mse, SimConfig};
use serde::Serialize;

use super::out_file;
use crate::args::SimulateArgs;
use crate::error::CliResult;
use crate::io::{default_names, read_json, rows, write_json, write_matrix};
use crate::manifest::Manifest;

#[derive(Serialize)]
struct TruthFile<'a> {
    config: &'a SimConfig,
    /// Realized shares of signal, structured and diagonal noise.
    fractions: [f64; 3],
    oracle_test_mse: Option<f64>,
    theta: Vec<Vec<f64>>,
    psi: Vec<Vec<f64>>,
    gamma: Vec<Vec<f64>>,
    lambda: Vec<Vec<f64>>,
}

fn sim_config(a: &SimulateArgs) -> CliResult<SimConfig> {
    let mut c: SimConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SimConfig::default(),
    };
    macro_rules! set {
        ($($field:ident <- $flag:ident),*) => {
            $(if let Some(v) = a.$flag { c.$field = v; })*
        };
    }
    set!(alpha <- alpha, n_train <- n_train, n_test <- n_test, n_covariates <- p, n_targets <- k,
         rank <- rank, var_signal <- var_signal, var_structured <- var_structured, var_diag <- var_diag,
         seed <- seed);
    c.validate()?;
    Ok(c)
}

pub fn simulate(a: &SimulateArgs) -> CliResult<()> {
    let config = sim_config(a)?;
    let inputs: Vec<&std::path::Path> = a.config.iter().map(|p| p.as_path()).collect();
    let dir = &a.out_dir;
    Manifest::begin(dir, "simulate", &config, &inputs)?.run(|_| {
        let sim = generate(&config)?;
        let xn = default_names("x", config.n_covariates);
        let yn = default_names("y", config.n_targets);
        write_matrix(&out_file(dir, "X_train.csv"), &sim.train.x, &xn)?;
        write_matrix(&out_file(dir, "Y_train.csv"), &sim.train.y, &yn)?;
        write_matrix(&out_file(dir, "X_test.csv"), &sim.test.x, &xn)?;
        write_matrix(&out_file(dir, "Y_test.csv"), &sim.test.y, &yn)?;
        let oracle = if config.n_test > 0 { Some(oracle_mse(&sim.truth, &sim.test)?) } else { None };
        let t = &sim.truth;
        write_json(
            &out_file(dir, "truth.json"),
            &TruthFile {
                config: &config,
                fractions: t.fractions,
                oracle_test_mse: oracle,
                theta: rows(&t.theta),
                psi: rows(&t.psi),
                gamma: rows(&t.gamma),
                lambda: rows(&t.lambda),
            },
        )?;
        println!("simulated {} train / {} test samples into {}", config.n_train, config.n_test, dir.display());
        Ok(())
    })
}
