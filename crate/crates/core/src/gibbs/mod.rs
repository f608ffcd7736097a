//! Gibbs sampler for all model variants.
//!
//! One sweep of the latent-noise model updates, in order, `Ψ` (with `Ω`
//! integrated out), `Ω`, `Γ`, the local shrinkage `Φ^Γ`, the increments `δ`
//! and the residual variances. Drawing `Ψ` from its collapsed conditional and
//! then `Ω` given `Ψ` is a blocked draw of `(Ψ, Ω)`, so the joint posterior is
//! left invariant.

mod psi;
mod updates;

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use psi::{psi_moments_fast, psi_moments_naive, update_psi, update_psi_fast, update_psi_naive, GramEigen, PsiMethod, PsiMoments};
pub use updates::{
    delta_statistics, draw_delta, gamma_posterior, omega_posterior, residual, update_delta, update_gamma, update_h, update_lambda, update_omega,
    update_phi_gamma, update_sigma, ColumnPosterior,
};

use crate::error::Result;
use crate::linalg;
use crate::model::{sample_prior, Dataset, ModelConfig, ModelState, PosteriorSamples, Variant};

/// A dataset with the products the sampler reuses every sweep.
#[derive(Debug, Clone)]
pub struct PreparedData {
    data: Dataset,
    /// `XᵀX`
    pub gram: DMatrix<f64>,
    /// `XᵀY`
    pub xty: DMatrix<f64>,
    pub gram_eigen: Option<GramEigen>,
}

impl PreparedData {
    pub fn new(data: Dataset, with_eigen: bool) -> Result<Self> {
        let gram = data.x.tr_mul(&data.x);
        let xty = data.x.tr_mul(&data.y);
        let gram_eigen = if with_eigen { Some(GramEigen::new(&gram)?) } else { None };
        Ok(PreparedData {
            data,
            gram,
            xty,
            gram_eigen,
        })
    }

    pub fn for_method(data: Dataset, method: PsiMethod) -> Result<Self> {
        Self::new(data, method == PsiMethod::Fast)
    }

    pub fn dataset(&self) -> &Dataset {
        &self.data
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.data.x
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.data.y
    }

    pub fn n_samples(&self) -> usize {
        self.data.x.nrows()
    }

    /// Swap in new targets, keeping the covariate products.
    pub fn replace_targets(&mut self, y: DMatrix<f64>) {
        self.xty = self.data.x.tr_mul(&y);
        self.data.y = y;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainOptions {
    pub psi_method: PsiMethod,
}

/// Retained draws of one chain plus cumulative wall time per update kind.
#[derive(Debug, Clone)]
pub struct ChainTrace {
    pub retained: PosteriorSamples,
    pub timings: BTreeMap<String, f64>,
}

#[derive(Default)]
struct Timer {
    totals: BTreeMap<&'static str, f64>,
}

impl Timer {
    fn run<T>(&mut self, name: &'static str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        *self.totals.entry(name).or_insert(0.0) += start.elapsed().as_secs_f64();
        out
    }
}

fn run_sweep<R: Rng + ?Sized>(
    state: &mut ModelState,
    data: &PreparedData,
    config: &ModelConfig,
    psi_method: PsiMethod,
    rng: &mut R,
    timer: &mut Timer,
) -> Result<()> {
    let psi_name = match psi_method {
        PsiMethod::Fast => "psi_fast",
        PsiMethod::Naive => "psi_naive",
    };
    match config.variant {
        Variant::LatentNoise => {
            timer.run(psi_name, || update_psi(psi_method, state, data, config, rng))?;
            timer.run("omega", || update_omega(state, data, config, rng))?;
            timer.run("gamma", || update_gamma(state, data, config, rng))?;
            timer.run("phi_gamma", || update_phi_gamma(state, config, rng))?;
            timer.run("delta", || update_delta(state, config, rng))?;
        }
        Variant::IndependentNoise => {
            timer.run(psi_name, || update_psi(psi_method, state, data, config, rng))?;
            timer.run("h", || update_h(state, data, rng))?;
            timer.run("gamma", || update_gamma(state, data, config, rng))?;
            timer.run("lambda", || update_lambda(state, data, rng))?;
            timer.run("phi_gamma", || update_phi_gamma(state, config, rng))?;
            timer.run("delta", || update_delta(state, config, rng))?;
        }
        Variant::NoNoise => {
            timer.run(psi_name, || update_psi(psi_method, state, data, config, rng))?;
            timer.run("gamma", || update_gamma(state, data, config, rng))?;
            timer.run("phi_gamma", || update_phi_gamma(state, config, rng))?;
            timer.run("delta", || update_delta(state, config, rng))?;
        }
        Variant::Null => {}
    }
    timer.run("sigma", || update_sigma(state, data, config, rng))
}

/// One full Gibbs sweep in the fixed update order of the variant.
/// `config` must be resolved (see [`ModelConfig::resolve`]).
pub fn sweep<R: Rng + ?Sized>(
    state: &mut ModelState,
    data: &PreparedData,
    config: &ModelConfig,
    psi_method: PsiMethod,
    rng: &mut R,
) -> Result<()> {
    run_sweep(state, data, config, psi_method, rng, &mut Timer::default())
}

/// Starting point: a prior draw with residual variances set to the target
/// variances, which keeps the first sweeps on the data's scale.
pub fn initial_state<R: Rng + ?Sized>(data: &Dataset, config: &ModelConfig, rng: &mut R) -> Result<ModelState> {
    let dims = config.dims(data.n_samples(), data.n_covariates(), data.n_targets())?;
    let mut state = sample_prior(config, &dims, rng)?;
    let var = linalg::column_variances(&data.y);
    for (s, v) in state.sigma_sq.iter_mut().zip(var.iter()) {
        *s = if *v > 0.0 && v.is_finite() { *v } else { 1.0 };
    }
    Ok(state)
}

/// Run the Gibbs sampler with the fast `Ψ` update.
pub fn run_chain(data: &Dataset, config: &ModelConfig) -> Result<ChainTrace> {
    run_chain_with(data, config, &ChainOptions::default())
}

pub fn run_chain_with(data: &Dataset, config: &ModelConfig, options: &ChainOptions) -> Result<ChainTrace> {
    let config = config.resolve(&data.x)?;
    let mut timer = Timer::default();
    let method = options.psi_method;
    let needs_eigen = method == PsiMethod::Fast && config.variant != Variant::Null;
    let prepared = timer.run("setup_products", || PreparedData::new(data.clone(), false))?;
    let prepared = if needs_eigen {
        let eig = timer.run("setup_eigen", || GramEigen::new(&prepared.gram))?;
        PreparedData {
            gram_eigen: Some(eig),
            ..prepared
        }
    } else {
        prepared
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = initial_state(data, &config, &mut rng)?;
    let mut states = Vec::with_capacity(config.n_retained());
    for it in 0..config.iterations {
        run_sweep(&mut state, &prepared, &config, method, &mut rng, &mut timer).map_err(|e| e.at_iteration(it))?;
        if it >= config.burn_in && (it - config.burn_in + 1) % config.thin == 0 {
            states.push(state.clone());
        }
    }
    let retained = PosteriorSamples::from_states(states, config, data.n_covariates(), data.n_targets());
    Ok(ChainTrace {
        retained,
        timings: timer.totals.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
    })
}
