use latent_brrr::theory::{
    check_marginal_covariance, check_prop1, check_prop2, geweke_config, geweke_test, GewekeReport,
    MarginalizationReport, Prop1Estimator, PropositionReport, ShrinkageHyper,
};
use latent_brrr::{sample_prior, Dims, ModelConfig, Variant};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::out_file;
use crate::args::{EstimatorArg, VerifyArgs};
use crate::error::CliResult;
use crate::io::write_json;
use crate::manifest::Manifest;

const MARGINAL_Z_LIMIT: f64 = 5.0;

#[derive(Serialize)]
struct VerifyRun {
    prop1: bool,
    prop2: bool,
    geweke: bool,
    marginal: bool,
    hyper: ShrinkageHyper,
    n_covariates: usize,
    draws: usize,
    truncation: usize,
    tolerance: f64,
    estimator: Prop1Estimator,
    ranks: Vec<usize>,
    prop2_draws: usize,
    geweke_iter: usize,
    marginal_draws: usize,
    seed: u64,
}

#[derive(Serialize)]
struct RankReport {
    rank: usize,
    #[serde(flatten)]
    report: PropositionReport,
}

#[derive(Serialize)]
struct PropositionsFile {
    prop1: Option<PropositionReport>,
    prop2: Option<Vec<RankReport>>,
    marginal: Option<MarginalizationReport>,
}

#[derive(Serialize)]
struct GewekeFile {
    geweke: Option<GewekeReport>,
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

/// Marginal covariance of a prior draw with σ_Ω² = 1, rank 3 and 10 targets.
fn marginal(draws: usize, seed: u64) -> latent_brrr::Result<MarginalizationReport> {
    let cfg = ModelConfig {
        latent_snr: None,
        sigma_omega_sq: Some(1.0),
        rank: 3,
        ..ModelConfig::with_variant(Variant::LatentNoise)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let state = sample_prior(&cfg, &Dims::new(1, 3, 10, 3)?, &mut rng)?;
    check_marginal_covariance(&state, &cfg, draws, MARGINAL_Z_LIMIT, seed.wrapping_add(1))
}

/// Runs the selected checks (all when none is selected). A failed check is
/// reported in the output files and on stdout; only errors change the exit
/// code.
pub fn verify(a: &VerifyArgs) -> CliResult<()> {
    let all = !(a.prop1 || a.prop2 || a.geweke || a.marginal);
    let run = VerifyRun {
        prop1: all || a.prop1,
        prop2: all || a.prop2,
        geweke: all || a.geweke,
        marginal: all || a.marginal,
        hyper: ShrinkageHyper {
            a1: a.a1,
            a2: a.a2,
            nu: a.nu,
        },
        n_covariates: a.p,
        draws: a.draws,
        truncation: a.truncation,
        tolerance: a.tolerance,
        estimator: match a.estimator {
            EstimatorArg::Conditional => Prop1Estimator::Conditional,
            EstimatorArg::Raw => Prop1Estimator::Raw,
        },
        ranks: a.ranks.clone(),
        prop2_draws: a.prop2_draws,
        geweke_iter: a.geweke_iter,
        marginal_draws: a.marginal_draws,
        seed: a.seed,
    };
    let dir = &a.out_dir;
    Manifest::begin(dir, "verify", &run, &[])?.run(|_| {
        let mut props = PropositionsFile {
            prop1: None,
            prop2: None,
            marginal: None,
        };
        if run.prop1 {
            let var_x = vec![1.0; run.n_covariates];
            let r = check_prop1(&run.hyper, &var_x, run.truncation, run.draws, run.tolerance, run.estimator, run.seed)?;
            println!(
                "prediction variance: {} (analytic {:.6}, empirical {:.6}, relative error {:.4})",
                verdict(r.pass),
                r.analytic_value,
                r.empirical_value,
                r.relative_error()
            );
            props.prop1 = Some(r);
        }
        if run.prop2 {
            let mut reports = Vec::new();
            for &rank in &run.ranks {
                let r = check_prop2(&run.hyper, rank, run.truncation, run.prop2_draws, run.seed)?;
                println!(
                    "truncation deficit at rank {rank}: {} (analytic {:.3e}, empirical {:.3e}, se {:.1e})",
                    verdict(r.pass),
                    r.analytic_value,
                    r.empirical_value,
                    r.mc_standard_error
                );
                reports.push(RankReport { rank, report: r });
            }
            props.prop2 = Some(reports);
        }
        if run.marginal {
            let r = marginal(run.marginal_draws, run.seed)?;
            println!("marginal covariance: {} (max |z| {:.2})", verdict(r.pass), r.max_abs_z);
            props.marginal = Some(r);
        }
        write_json(&out_file(dir, "propositions.json"), &props)?;

        let mut geweke = GewekeFile { geweke: None };
        if run.geweke {
            let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
            let r = geweke_test(&geweke_config(), &Dims::new(20, 3, 4, 2)?, run.geweke_iter, &mut rng)?;
            println!(
                "joint-distribution test: {} ({:.1}% of statistics within bounds, max |z| {:.2})",
                verdict(r.pass),
                100.0 * r.fraction_within,
                r.max_abs_z
            );
            geweke.geweke = Some(r);
        }
        write_json(&out_file(dir, "geweke.json"), &geweke)?;
        Ok(())
    })
}
