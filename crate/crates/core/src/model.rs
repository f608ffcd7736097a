//! Model types, prior sampling and the closed-form quantities of the
//! latent-noise reduced-rank regression `Y = (XΨ + Ω)Γ + E`.
//!
//! The infinite-rank prior is truncated at `rank` components. Component `h`
//! is shrunk by the global precision `τ_h = δ_1 ⋯ δ_h`, shared by row `h` of
//! `Γ` and column `h` of both `Ψ` and `Ω`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, covariance_trace};

/// Which generative structure the sampler fits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// `Y = (XΨ + Ω)Γ + E`: noise and signal share the loadings `Γ`.
    #[default]
    LatentNoise,
    /// `Y = XΨΓ + HΛ + E`: a priori independent factor-regression noise model.
    IndependentNoise,
    /// `Y = XΨΓ + E`.
    NoNoise,
    /// Intercept only; predicts the training means.
    Null,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::LatentNoise => "latent_noise",
            Variant::IndependentNoise => "independent_noise",
            Variant::NoNoise => "no_noise",
            Variant::Null => "null",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub n_samples: usize,
    pub n_covariates: usize,
    pub n_targets: usize,
    pub rank: usize,
}

impl Dims {
    pub fn new(n_samples: usize, n_covariates: usize, n_targets: usize, rank: usize) -> Result<Self> {
        let dims = Dims {
            n_samples,
            n_covariates,
            n_targets,
            rank,
        };
        dims.validate()?;
        Ok(dims)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || self.n_covariates == 0 || self.n_targets == 0 || self.rank == 0 {
            return Err(Error::Config(format!("all dimensions must be positive, got {self:?}")));
        }
        Ok(())
    }
}

/// Hyperparameters, model variant and MCMC schedule for one fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Shape of `δ_1`.
    pub a1: f64,
    /// Shape of `δ_l`, `l ≥ 2`.
    pub a2: f64,
    /// Degrees of freedom of the local shrinkage `φ_hj ~ Ga(ν/2, ν/2)`.
    pub nu: f64,
    pub a_sigma: f64,
    pub b_sigma: f64,
    /// Latent signal-to-noise ratio β; converted to `sigma_omega_sq` from the
    /// training covariates.
    pub latent_snr: Option<f64>,
    /// Latent noise variance σ_Ω².
    pub sigma_omega_sq: Option<f64>,
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub rank: usize,
    /// Rank of `HΛ`; independent-noise variant only.
    pub noise_rank: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::LatentNoise,
            a1: 3.0,
            a2: 4.0,
            nu: 3.0,
            a_sigma: 1.0,
            b_sigma: 1.0,
            latent_snr: Some(0.1),
            sigma_omega_sq: None,
            iterations: 1000,
            burn_in: 500,
            thin: 10,
            seed: 0,
            rank: 3,
            noise_rank: None,
        }
    }
}

impl ModelConfig {
    pub fn with_variant(variant: Variant) -> Self {
        let mut cfg = ModelConfig {
            variant,
            ..Default::default()
        };
        if variant != Variant::LatentNoise {
            cfg.latent_snr = None;
        }
        if variant == Variant::IndependentNoise {
            cfg.noise_rank = Some(cfg.rank);
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.a1 > 2.0) {
            return bad(format!("a1 must exceed 2 for finite prediction variance, got {}", self.a1));
        }
        if !(self.a2 > 3.0) {
            return bad(format!("a2 must exceed 3 for finite prediction variance, got {}", self.a2));
        }
        if !(self.nu > 2.0) {
            return bad(format!("nu must exceed 2, got {}", self.nu));
        }
        if !(self.a_sigma > 0.0) || !(self.b_sigma > 0.0) {
            return bad("a_sigma and b_sigma must be positive".into());
        }
        if self.iterations == 0 {
            return bad("iterations must be positive".into());
        }
        if self.burn_in >= self.iterations {
            return bad(format!(
                "burn_in ({}) must be smaller than iterations ({})",
                self.burn_in, self.iterations
            ));
        }
        if self.thin == 0 {
            return bad("thin must be positive".into());
        }
        if self.rank == 0 {
            return bad("rank must be positive".into());
        }
        match self.variant {
            Variant::LatentNoise => match (self.latent_snr, self.sigma_omega_sq) {
                (Some(_), Some(_)) | (None, None) => {
                    return bad("exactly one of latent_snr and sigma_omega_sq must be set".into())
                }
                (Some(beta), None) if !(beta > 0.0) || !beta.is_finite() => {
                    return bad(format!("latent_snr must be positive and finite, got {beta}"))
                }
                (None, Some(s)) if !(s >= 0.0) || !s.is_finite() => {
                    return bad(format!("sigma_omega_sq must be non-negative and finite, got {s}"))
                }
                _ => {}
            },
            Variant::IndependentNoise => match self.noise_rank {
                Some(r) if r > 0 => {}
                _ => return bad("independent_noise requires a positive noise_rank".into()),
            },
            Variant::NoNoise | Variant::Null => {}
        }
        Ok(())
    }

    /// Replace `latent_snr` by the equivalent `sigma_omega_sq` for covariates `x`.
    pub fn resolve(&self, x: &DMatrix<f64>) -> Result<ModelConfig> {
        self.validate()?;
        let mut out = self.clone();
        if self.variant == Variant::LatentNoise {
            if let Some(beta) = self.latent_snr {
                out.sigma_omega_sq = Some(latent_snr_to_variance(beta, self.rank, x)?);
                out.latent_snr = None;
            }
        }
        Ok(out)
    }

    /// Resolved latent noise variance. Errors when only `latent_snr` is known.
    pub fn sigma_omega_sq(&self) -> Result<f64> {
        self.sigma_omega_sq.ok_or_else(|| {
            Error::Config("sigma_omega_sq unresolved; call ModelConfig::resolve with the covariates".into())
        })
    }

    /// Number of states kept by the schedule.
    pub fn n_retained(&self) -> usize {
        (self.iterations - self.burn_in) / self.thin
    }

    pub fn dims(&self, n_samples: usize, n_covariates: usize, n_targets: usize) -> Result<Dims> {
        Dims::new(n_samples, n_covariates, n_targets, self.rank)
    }
}

/// Separate factor model `HΛ` of the independent-noise variant, with its own
/// multiplicative gamma shrinkage stack on the rows of `Λ`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorNoise {
    /// N×S2 latent factors.
    pub h: DMatrix<f64>,
    /// S2×K loadings.
    pub lambda: DMatrix<f64>,
    pub phi_lambda: DMatrix<f64>,
    pub delta_lambda: DVector<f64>,
}

impl FactorNoise {
    pub fn tau(&self) -> DVector<f64> {
        cumulative_product(&self.delta_lambda)
    }
}

/// One joint draw of all model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    /// P×S1 covariate-to-latent weights.
    pub psi: DMatrix<f64>,
    /// S1×K latent-to-target loadings.
    pub gamma: DMatrix<f64>,
    /// N×S1 latent noise (latent-noise variant).
    pub omega: Option<DMatrix<f64>>,
    /// Independent-noise variant only.
    pub noise: Option<FactorNoise>,
    /// S1×K local shrinkage of `Γ`.
    pub phi_gamma: DMatrix<f64>,
    pub delta: DVector<f64>,
    /// Target-specific residual variances σ_j².
    pub sigma_sq: DVector<f64>,
}

pub(crate) fn cumulative_product(v: &DVector<f64>) -> DVector<f64> {
    let mut acc = 1.0;
    v.map(|d| {
        acc *= d;
        acc
    })
}

impl ModelState {
    /// Global shrinkage `τ_h = ∏_{l≤h} δ_l`.
    pub fn tau(&self) -> DVector<f64> {
        cumulative_product(&self.delta)
    }

    pub fn rank(&self) -> usize {
        self.delta.len()
    }

    /// Coefficient matrix `Θ = ΨΓ` (P×K).
    pub fn theta(&self) -> DMatrix<f64> {
        &self.psi * &self.gamma
    }

    pub fn validate(&self, dims: &Dims) -> Result<()> {
        let (p, k, s) = (dims.n_covariates, dims.n_targets, dims.rank);
        let shape = |m: &DMatrix<f64>, r: usize, c: usize, what: &'static str| {
            if m.shape() != (r, c) {
                Err(Error::dims(what, format!("{r}x{c}"), format!("{}x{}", m.nrows(), m.ncols())))
            } else {
                Ok(())
            }
        };
        shape(&self.psi, p, s, "psi")?;
        shape(&self.gamma, s, k, "gamma")?;
        shape(&self.phi_gamma, s, k, "phi_gamma")?;
        if let Some(omega) = &self.omega {
            shape(omega, dims.n_samples, s, "omega")?;
        }
        if self.delta.len() != s {
            return Err(Error::dims("delta", s, self.delta.len()));
        }
        if self.sigma_sq.len() != k {
            return Err(Error::dims("sigma_sq", k, self.sigma_sq.len()));
        }
        if self.delta.iter().any(|d| !(*d > 0.0)) || self.phi_gamma.iter().any(|d| !(*d > 0.0)) {
            return Err(Error::State("shrinkage parameters must be strictly positive".into()));
        }
        if self.sigma_sq.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::State("sigma_sq must be strictly positive".into()));
        }
        Ok(())
    }
}

/// Paired covariates `X` (N×P) and targets `Y` (N×K).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub x_names: Option<Vec<String>>,
    pub y_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DMatrix<f64>) -> Result<Self> {
        if x.nrows() != y.nrows() {
            return Err(Error::dims("dataset rows", x.nrows(), y.nrows()));
        }
        for (name, m) in [("X", &x), ("Y", &y)] {
            if let Some(pos) = m.iter().position(|v| !v.is_finite()) {
                let (row, col) = (pos % m.nrows(), pos / m.nrows());
                return Err(Error::Data(format!("non-finite value in {name} at row {row}, column {col}")));
            }
        }
        Ok(Dataset {
            x,
            y,
            x_names: None,
            y_names: None,
        })
    }

    pub fn with_names(mut self, x_names: Option<Vec<String>>, y_names: Option<Vec<String>>) -> Self {
        self.x_names = x_names;
        self.y_names = y_names;
        self
    }

    pub fn n_samples(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_covariates(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_targets(&self) -> usize {
        self.y.ncols()
    }

    /// Rows `idx` of both matrices, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            y: self.y.select_rows(idx),
            x_names: self.x_names.clone(),
            y_names: self.y_names.clone(),
        }
    }

    /// Column-centred copy together with the removed means.
    pub fn centered(&self) -> (Dataset, Centering) {
        let x_mean = linalg::column_means(&self.x);
        let y_mean = linalg::column_means(&self.y);
        let ds = Dataset {
            x: linalg::center_columns(&self.x, &x_mean),
            y: linalg::center_columns(&self.y, &y_mean),
            x_names: self.x_names.clone(),
            y_names: self.y_names.clone(),
        };
        (ds, Centering { x_mean, y_mean })
    }
}

/// Column means removed before fitting; the model itself has no intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct Centering {
    pub x_mean: DVector<f64>,
    pub y_mean: DVector<f64>,
}

/// Retained post-burn-in, thinned draws.
#[derive(Debug, Clone)]
pub struct PosteriorSamples {
    pub states: Vec<ModelState>,
    /// Posterior mean of `Θ = ΨΓ`.
    pub theta_mean: DMatrix<f64>,
    pub config: ModelConfig,
}

impl PosteriorSamples {
    pub fn from_states(states: Vec<ModelState>, config: ModelConfig, p: usize, k: usize) -> Self {
        let theta_mean = mean_theta(&states, p, k);
        PosteriorSamples {
            states,
            theta_mean,
            config,
        }
    }

    pub fn predict(&self, x_new: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x_new.ncols() != self.theta_mean.nrows() {
            return Err(Error::dims("predict covariates", self.theta_mean.nrows(), x_new.ncols()));
        }
        Ok(x_new * &self.theta_mean)
    }
}

pub(crate) fn mean_theta(states: &[ModelState], p: usize, k: usize) -> DMatrix<f64> {
    let mut acc = DMatrix::zeros(p, k);
    for s in states {
        acc += s.theta();
    }
    if !states.is_empty() {
        acc /= states.len() as f64;
    }
    acc
}

fn gamma_draw<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> Result<f64> {
    let dist = Gamma::new(shape, 1.0 / rate)
        .map_err(|e| Error::numerical(format!("gamma(shape={shape}, rate={rate}): {e}")))?;
    // Draws can underflow to zero for tiny shapes; keep precisions positive.
    Ok(dist.sample(rng).max(f64::MIN_POSITIVE))
}

pub(crate) fn sample_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> Result<f64> {
    gamma_draw(shape, rate, rng)
}

/// Multiplicative gamma process increments: `δ_1 ~ Ga(a1, 1)`, `δ_l ~ Ga(a2, 1)`.
pub(crate) fn sample_delta<R: Rng + ?Sized>(a1: f64, a2: f64, rank: usize, rng: &mut R) -> Result<DVector<f64>> {
    let mut d = DVector::zeros(rank);
    for l in 0..rank {
        d[l] = gamma_draw(if l == 0 { a1 } else { a2 }, 1.0, rng)?;
    }
    Ok(d)
}

/// Loadings `γ_hj ~ N(0, (φ_hj τ_h)⁻¹)` with `φ_hj ~ Ga(ν/2, ν/2)`.
fn sample_loadings<R: Rng + ?Sized>(
    tau: &DVector<f64>,
    nu: f64,
    k: usize,
    rng: &mut R,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let s = tau.len();
    let mut phi = DMatrix::zeros(s, k);
    let mut load = DMatrix::zeros(s, k);
    for j in 0..k {
        for h in 0..s {
            let f = gamma_draw(nu / 2.0, nu / 2.0, rng)?;
            phi[(h, j)] = f;
            let z: f64 = rng.sample(StandardNormal);
            load[(h, j)] = z / (f * tau[h]).sqrt();
        }
    }
    Ok((phi, load))
}

/// Draw a complete state from the prior.
///
/// For the latent-noise variant `sigma_omega_sq` must already be resolved.
pub fn sample_prior<R: Rng + ?Sized>(config: &ModelConfig, dims: &Dims, rng: &mut R) -> Result<ModelState> {
    config.validate()?;
    dims.validate()?;
    if config.rank != dims.rank {
        return Err(Error::dims("prior rank", config.rank, dims.rank));
    }
    let (n, p, k, s) = (dims.n_samples, dims.n_covariates, dims.n_targets, dims.rank);

    let delta = sample_delta(config.a1, config.a2, s, rng)?;
    let tau = cumulative_product(&delta);
    let (phi_gamma, mut gamma) = sample_loadings(&tau, config.nu, k, rng)?;

    let mut psi = DMatrix::zeros(p, s);
    for h in 0..s {
        let sd = tau[h].sqrt().recip();
        for j in 0..p {
            let z: f64 = rng.sample(StandardNormal);
            psi[(j, h)] = z * sd;
        }
    }

    let omega = if config.variant == Variant::LatentNoise {
        let var = config.sigma_omega_sq()?;
        let mut om = DMatrix::zeros(n, s);
        for h in 0..s {
            let sd = (var / tau[h]).sqrt();
            for i in 0..n {
                let z: f64 = rng.sample(StandardNormal);
                om[(i, h)] = z * sd;
            }
        }
        Some(om)
    } else {
        None
    };

    let noise = if config.variant == Variant::IndependentNoise {
        let s2 = config.noise_rank.unwrap_or(s);
        let delta_lambda = sample_delta(config.a1, config.a2, s2, rng)?;
        let tau_l = cumulative_product(&delta_lambda);
        let (phi_lambda, lambda) = sample_loadings(&tau_l, config.nu, k, rng)?;
        let h = linalg::standard_normal_matrix(n, s2, rng);
        Some(FactorNoise {
            h,
            lambda,
            phi_lambda,
            delta_lambda,
        })
    } else {
        None
    };

    let mut sigma_sq = DVector::zeros(k);
    for j in 0..k {
        sigma_sq[j] = 1.0 / gamma_draw(config.a_sigma, config.b_sigma, rng)?;
    }

    if config.variant == Variant::Null {
        psi.fill(0.0);
        gamma.fill(0.0);
    }

    Ok(ModelState {
        psi,
        gamma,
        omega,
        noise,
        phi_gamma,
        delta,
        sigma_sq,
    })
}

/// Mean prediction `X_new Ψ Γ`.
pub fn predict_mean(state: &ModelState, x_new: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x_new.ncols() != state.psi.nrows() {
        return Err(Error::dims("predict_mean covariates", state.psi.nrows(), x_new.ncols()));
    }
    Ok((x_new * &state.psi) * &state.gamma)
}

/// Draw targets from the likelihood given every parameter in `state`.
pub fn sample_targets<R: Rng + ?Sized>(state: &ModelState, x: &DMatrix<f64>, rng: &mut R) -> Result<DMatrix<f64>> {
    if x.ncols() != state.psi.nrows() {
        return Err(Error::dims("sample_targets covariates", state.psi.nrows(), x.ncols()));
    }
    let mut latent = x * &state.psi;
    if let Some(omega) = &state.omega {
        if omega.shape() != latent.shape() {
            return Err(Error::dims("sample_targets omega rows", latent.nrows(), omega.nrows()));
        }
        latent += omega;
    }
    let mut y = latent * &state.gamma;
    if let Some(noise) = &state.noise {
        y += &noise.h * &noise.lambda;
    }
    for (mut col, s) in y.column_iter_mut().zip(state.sigma_sq.iter()) {
        let sd = s.sqrt();
        for v in col.iter_mut() {
            *v += sd * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(y)
}

/// Target covariance with `Ω` integrated out: `σ_Ω² Γ*ᵀΓ* + Σ`, where row `h`
/// of `Γ*` is row `h` of `Γ` scaled by `τ_h^{-1/2}`.
pub fn marginal_covariance(state: &ModelState, config: &ModelConfig) -> Result<DMatrix<f64>> {
    if config.variant != Variant::LatentNoise {
        return Err(Error::Config("marginal covariance is defined for the latent_noise variant".into()));
    }
    if let Some(bad) = state.sigma_sq.iter().find(|s| !(**s > 0.0)) {
        return Err(Error::State(format!("residual variance must be positive, got {bad}")));
    }
    let var = config.sigma_omega_sq()?;
    let tau = state.tau();
    let mut gstar = state.gamma.clone();
    for (h, mut row) in gstar.row_iter_mut().enumerate() {
        row /= tau[h].sqrt();
    }
    let mut cov = gstar.tr_mul(&gstar) * var;
    for j in 0..cov.nrows() {
        cov[(j, j)] += state.sigma_sq[j];
    }
    Ok(cov)
}

/// Latent noise variance for a latent signal-to-noise ratio β:
/// `σ_Ω² = S1 · trace(Var(X)) / β`, with the `N - 1` covariance denominator.
pub fn latent_snr_to_variance(beta: f64, rank: usize, x: &DMatrix<f64>) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(Error::Config(format!("latent_snr must be positive, got {beta}")));
    }
    if x.nrows() < 2 {
        return Err(Error::Data("latent_snr conversion needs at least two rows of X".into()));
    }
    Ok(rank as f64 * covariance_trace(x) / beta)
}
