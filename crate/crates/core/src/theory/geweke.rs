//! Joint-distribution ("getting it right") test of a Gibbs kernel.
//!
//! The marginal-conditional simulator draws parameters from the prior and
//! targets from the likelihood independently at every step. The
//! successive-conditional simulator alternates one sweep of the kernel with
//! regeneration of the targets. Both sample the same joint distribution if
//! and only if the kernel leaves the posterior invariant, so a set of
//! statistics is compared between the two with two-sample z-scores.
//!
//! Monitored statistics, each as `g` and `g²`: every entry of `Γ` and `Ψ`,
//! every `τ_h`, every `σ_j²` and `y[0,0]`.

use nalgebra::DMatrix;
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::gibbs::{sweep, PreparedData, PsiMethod};
use crate::linalg::standard_normal_matrix;
use crate::model::{sample_prior, sample_targets, Dataset, Dims, ModelConfig, ModelState, Variant};

/// Statistics with `|z|` below this count as agreeing.
pub const Z_LIMIT: f64 = 4.0;
/// Fraction of statistics that must agree.
pub const PASS_FRACTION: f64 = 0.95;
const BATCHES: usize = 100;

#[derive(Debug, Clone, Serialize)]
pub struct GewekeStatistic {
    pub name: String,
    pub marginal_mean: f64,
    pub successive_mean: f64,
    pub marginal_se: f64,
    /// Batch-means standard error of the autocorrelated chain average.
    pub successive_se: f64,
    pub z: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GewekeReport {
    pub n_iter: usize,
    pub statistics: Vec<GewekeStatistic>,
    pub fraction_within: f64,
    pub max_abs_z: f64,
    pub pass: bool,
}

/// Small latent-noise configuration with hyperparameters chosen so that the
/// monitored statistics have finite fourth moments.
pub fn geweke_config() -> ModelConfig {
    ModelConfig {
        a1: 5.0,
        a2: 6.0,
        nu: 10.0,
        a_sigma: 6.0,
        b_sigma: 5.0,
        latent_snr: None,
        sigma_omega_sq: Some(1.0),
        rank: 2,
        ..ModelConfig::with_variant(Variant::LatentNoise)
    }
}

fn statistic_names(state: &ModelState) -> Vec<String> {
    let mut base = Vec::new();
    for h in 0..state.gamma.nrows() {
        for j in 0..state.gamma.ncols() {
            base.push(format!("gamma[{h},{j}]"));
        }
    }
    for i in 0..state.psi.nrows() {
        for h in 0..state.psi.ncols() {
            base.push(format!("psi[{i},{h}]"));
        }
    }
    for h in 0..state.rank() {
        base.push(format!("tau[{h}]"));
    }
    for j in 0..state.sigma_sq.len() {
        base.push(format!("sigma_sq[{j}]"));
    }
    base.push("y[0,0]".into());
    base.iter().cloned().chain(base.iter().map(|n| format!("{n}^2"))).collect()
}

fn statistics(state: &ModelState, y: &DMatrix<f64>, out: &mut Vec<f64>) {
    out.clear();
    for h in 0..state.gamma.nrows() {
        for j in 0..state.gamma.ncols() {
            out.push(state.gamma[(h, j)]);
        }
    }
    for i in 0..state.psi.nrows() {
        for h in 0..state.psi.ncols() {
            out.push(state.psi[(i, h)]);
        }
    }
    out.extend(state.tau().iter());
    out.extend(state.sigma_sq.iter());
    out.push(y[(0, 0)]);
    let n = out.len();
    for i in 0..n {
        out.push(out[i] * out[i]);
    }
}

/// Geweke test of the library's sweep (fast `Ψ` update).
pub fn geweke_test<R: Rng>(config: &ModelConfig, dims: &Dims, n_iter: usize, rng: &mut R) -> Result<GewekeReport> {
    geweke_test_with(config, dims, n_iter, rng, |state, data, cfg, rng| {
        sweep(state, data, cfg, PsiMethod::Fast, rng)
    })
}

/// Geweke test of an arbitrary transition kernel.
///
/// `config` must be resolved; `dims.rank` must equal `config.rank`. The
/// covariates are drawn once from a standard normal and held fixed.
pub fn geweke_test_with<R, F>(
    config: &ModelConfig,
    dims: &Dims,
    n_iter: usize,
    rng: &mut R,
    mut kernel: F,
) -> Result<GewekeReport>
where
    R: Rng,
    F: FnMut(&mut ModelState, &PreparedData, &ModelConfig, &mut R) -> Result<()>,
{
    if n_iter < 2 * BATCHES {
        return Err(Error::Config(format!("geweke test needs at least {} iterations, got {n_iter}", 2 * BATCHES)));
    }
    config.validate()?;
    let x = standard_normal_matrix(dims.n_samples, dims.n_covariates, rng);

    let mut scratch = Vec::new();
    let first = sample_prior(config, dims, rng)?;
    let names = statistic_names(&first);
    let m = names.len();

    // Marginal-conditional: independent draws, plain moments.
    let mut mc_sum = vec![0.0; m];
    let mut mc_sq = vec![0.0; m];
    for _ in 0..n_iter {
        let state = sample_prior(config, dims, rng)?;
        let y = sample_targets(&state, &x, rng)?;
        statistics(&state, &y, &mut scratch);
        for (i, v) in scratch.iter().enumerate() {
            mc_sum[i] += v;
            mc_sq[i] += v * v;
        }
    }

    // Successive-conditional: kernel sweep then fresh targets.
    let batch = n_iter / BATCHES;
    let used = batch * BATCHES;
    let mut state = first;
    let y = sample_targets(&state, &x, rng)?;
    let mut data = PreparedData::new(Dataset::new(x.clone(), y)?, true)?;
    let mut batch_sums = vec![vec![0.0; m]; BATCHES];
    for it in 0..used {
        kernel(&mut state, &data, config, rng).map_err(|e| e.at_iteration(it))?;
        let y = sample_targets(&state, &x, rng)?;
        statistics(&state, &y, &mut scratch);
        data.replace_targets(y);
        let b = &mut batch_sums[it / batch];
        for (i, v) in scratch.iter().enumerate() {
            b[i] += v;
        }
    }

    let n = n_iter as f64;
    let mut stats = Vec::with_capacity(m);
    for (i, name) in names.into_iter().enumerate() {
        let mc_mean = mc_sum[i] / n;
        let mc_var = (mc_sq[i] - n * mc_mean * mc_mean) / (n - 1.0);
        let means: Vec<f64> = batch_sums.iter().map(|b| b[i] / batch as f64).collect();
        let sc_mean = means.iter().sum::<f64>() / BATCHES as f64;
        let batch_var = means.iter().map(|v| (v - sc_mean).powi(2)).sum::<f64>() / (BATCHES as f64 - 1.0);
        let mc_se = (mc_var.max(0.0) / n).sqrt();
        let sc_se = (batch_var / BATCHES as f64).sqrt();
        if ![mc_mean, sc_mean, mc_se, sc_se].iter().all(|v| v.is_finite()) {
            return Err(Error::numerical(format!("geweke statistic {name} is not finite")));
        }
        let se = (mc_se * mc_se + sc_se * sc_se).sqrt();
        let z = if se > 0.0 { (mc_mean - sc_mean) / se } else { 0.0 };
        stats.push(GewekeStatistic {
            name,
            marginal_mean: mc_mean,
            successive_mean: sc_mean,
            marginal_se: mc_se,
            successive_se: sc_se,
            z,
        });
    }
    let within = stats.iter().filter(|s| s.z.abs() < Z_LIMIT).count() as f64 / m as f64;
    let max_abs_z = stats.iter().map(|s| s.z.abs()).fold(0.0, f64::max);
    Ok(GewekeReport {
        n_iter,
        statistics: stats,
        fraction_within: within,
        max_abs_z,
        pass: within >= PASS_FRACTION,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gibbs::{delta_statistics, draw_delta, update_gamma, update_omega, update_phi_gamma, update_psi, update_sigma};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims() -> Dims {
        Dims::new(20, 3, 4, 2).unwrap()
    }

    #[test]
    fn statistic_set_is_complete() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_prior(&geweke_config(), &dims(), &mut rng).unwrap();
        let names = statistic_names(&s);
        // (8 + 6 + 2 + 4 + 1) statistics, each as g and g²
        assert_eq!(names.len(), 42);
        let mut v = Vec::new();
        statistics(&s, &DMatrix::zeros(20, 4), &mut v);
        assert_eq!(v.len(), names.len());
    }

    #[test]
    fn too_few_iterations_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(geweke_test(&geweke_config(), &dims(), 0, &mut rng).is_err());
    }

    #[test]
    fn correct_kernels_pass_short_run() {
        for variant in [Variant::LatentNoise, Variant::NoNoise, Variant::IndependentNoise] {
            let mut cfg = geweke_config();
            cfg.variant = variant;
            if variant != Variant::LatentNoise {
                cfg.sigma_omega_sq = None;
            }
            if variant == Variant::IndependentNoise {
                cfg.noise_rank = Some(2);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let report = geweke_test(&cfg, &dims(), 20_000, &mut rng).unwrap();
            assert!(report.pass, "{variant:?}: {:.3} within, max |z| {:.2}", report.fraction_within, report.max_abs_z);
        }
    }

    #[test]
    fn naive_kernel_passes_short_run() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let report = geweke_test_with(&geweke_config(), &dims(), 20_000, &mut rng, |s, d, c, r| {
            sweep(s, d, c, PsiMethod::Naive, r)
        })
        .unwrap();
        assert!(report.pass, "max |z| {:.2}", report.max_abs_z);
    }

    #[test]
    fn wrong_delta_shape_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let report = geweke_test_with(&geweke_config(), &dims(), 20_000, &mut rng, |s, d, c, r| {
            update_psi(PsiMethod::Fast, s, d, c, r)?;
            update_omega(s, d, c, r)?;
            update_gamma(s, d, c, r)?;
            update_phi_gamma(s, c, r)?;
            let (_, quad) = delta_statistics(s, c)?;
            // Shape counts only the loadings' coordinates.
            let counts = nalgebra::DVector::from_element(s.rank(), s.gamma.ncols() as f64);
            draw_delta(&mut s.delta, &counts, &quad, c.a1, c.a2, r)?;
            update_sigma(s, d, c, r)
        })
        .unwrap();
        assert!(report.max_abs_z > 6.0, "max |z| {:.2}", report.max_abs_z);
    }
}
