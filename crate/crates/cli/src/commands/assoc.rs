use latent_brrr::evaluation::{permutation_test, AssocResult};
use latent_brrr::{ChainOptions, ModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{load_dataset, model_config, model_inputs, out_file};
use crate::args::AssocArgs;
use crate::error::CliResult;
use crate::io::write_json;
use crate::manifest::Manifest;

#[derive(Serialize)]
struct AssocRun<'a> {
    config: &'a ModelConfig,
    n_perm: usize,
    perm_seed: u64,
}

#[derive(Serialize)]
struct AssocFile<'a> {
    #[serde(flatten)]
    run: AssocRun<'a>,
    result: AssocResult,
}

pub fn assoc(a: &AssocArgs) -> CliResult<()> {
    let m = &a.model;
    let config = model_config(m)?;
    let run = AssocRun {
        config: &config,
        n_perm: a.n_perm,
        perm_seed: a.perm_seed,
    };
    let dir = &m.out_dir;
    Manifest::begin(dir, "assoc", &run, &model_inputs(m))?.run(|_| {
        let data = load_dataset(&m.x, &m.y)?;
        let options = ChainOptions {
            psi_method: m.psi_method.into(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(a.perm_seed);
        let result = permutation_test(&data, &config, &options, a.n_perm, &mut rng)?;
        println!(
            "observed PTVE {:.4}; exceeds {:.1}% of {} permutations",
            result.observed_ptve,
            100.0 * result.rank_fraction,
            a.n_perm
        );
        write_json(&out_file(dir, "assoc.json"), &AssocFile { run, result })?;
        Ok(())
    })
}
