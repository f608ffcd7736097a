//! Conjugate full-conditional updates for everything except `Ψ`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::PreparedData;
use crate::error::{Error, Result};
use crate::linalg::{self, cholesky};
use crate::model::{sample_gamma, ModelConfig, ModelState, Variant};

/// Posterior of one column of a loading matrix under a Gaussian linear model.
#[derive(Debug, Clone)]
pub struct ColumnPosterior {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

/// Rows-as-samples design and target for the `Γ` regression.
fn gamma_design(state: &ModelState, data: &PreparedData, config: &ModelConfig) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let mut design = data.x() * &state.psi;
    let mut target = data.y().clone();
    match config.variant {
        Variant::LatentNoise => {
            let omega = state
                .omega
                .as_ref()
                .ok_or_else(|| Error::State("latent_noise state without omega".into()))?;
            design += omega;
        }
        Variant::IndependentNoise => {
            let noise = state
                .noise
                .as_ref()
                .ok_or_else(|| Error::State("independent_noise state without a noise model".into()))?;
            target -= &noise.h * &noise.lambda;
        }
        Variant::NoNoise | Variant::Null => {}
    }
    Ok((design, target))
}

struct LinearSystem {
    /// X*ᵀX*
    gram: DMatrix<f64>,
    /// X*ᵀR
    cross: DMatrix<f64>,
}

fn column_precision(sys: &LinearSystem, prior_prec: impl Fn(usize) -> f64, sigma_sq: f64) -> (DMatrix<f64>, f64) {
    let s = sys.gram.nrows();
    let inv = 1.0 / sigma_sq;
    let mut prec = &sys.gram * inv;
    for h in 0..s {
        prec[(h, h)] += prior_prec(h);
    }
    (prec, inv)
}

/// Draw each column `i` of a loading matrix from
/// `N(Q_i⁻¹ X*ᵀ r_i / σ_i², Q_i⁻¹)`, `Q_i = diag(φ_·i τ) + X*ᵀX* / σ_i²`.
fn draw_loadings<R: Rng + ?Sized>(
    sys: &LinearSystem,
    phi: &DMatrix<f64>,
    tau: &DVector<f64>,
    sigma_sq: &DVector<f64>,
    context: &str,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let (s, k) = phi.shape();
    let mut out = DMatrix::zeros(s, k);
    for i in 0..k {
        let (prec, inv) = column_precision(sys, |h| phi[(h, i)] * tau[h], sigma_sq[i]);
        let chol = cholesky(prec, context)?;
        let b = sys.cross.column(i) * inv;
        let (_, draw) = linalg::gaussian_from_precision(&chol, &b, rng);
        out.set_column(i, &draw);
    }
    Ok(out)
}

fn loading_posteriors(
    sys: &LinearSystem,
    phi: &DMatrix<f64>,
    tau: &DVector<f64>,
    sigma_sq: &DVector<f64>,
    context: &str,
) -> Result<Vec<ColumnPosterior>> {
    (0..phi.ncols())
        .map(|i| {
            let (prec, inv) = column_precision(sys, |h| phi[(h, i)] * tau[h], sigma_sq[i]);
            let chol = cholesky(prec, context)?;
            let b = sys.cross.column(i) * inv;
            Ok(ColumnPosterior {
                mean: chol.solve(&b),
                covariance: chol.inverse(),
            })
        })
        .collect()
}

fn gamma_system(state: &ModelState, data: &PreparedData, config: &ModelConfig) -> Result<LinearSystem> {
    let (design, target) = gamma_design(state, data, config)?;
    Ok(LinearSystem {
        gram: design.tr_mul(&design),
        cross: design.tr_mul(&target),
    })
}

/// Per-column Gaussian posteriors of `Γ`.
pub fn gamma_posterior(state: &ModelState, data: &PreparedData, config: &ModelConfig) -> Result<Vec<ColumnPosterior>> {
    let sys = gamma_system(state, data, config)?;
    loading_posteriors(&sys, &state.phi_gamma, &state.tau(), &state.sigma_sq, "gamma")
}

pub fn update_gamma<R: Rng + ?Sized>(
    state: &mut ModelState,
    data: &PreparedData,
    config: &ModelConfig,
    rng: &mut R,
) -> Result<()> {
    let sys = gamma_system(state, data, config)?;
    state.gamma = draw_loadings(&sys, &state.phi_gamma, &state.tau(), &state.sigma_sq, "gamma", rng)?;
    Ok(())
}

/// `Λ` of the independent-noise model: regression of `Y − XΨΓ` on `H`.
pub fn update_lambda<R: Rng + ?Sized>(
    state: &mut ModelState,
    data: &PreparedData,
    rng: &mut R,
) -> Result<()> {
    let target = data.y() - data.x() * &state.psi * &state.gamma;
    let sigma_sq = state.sigma_sq.clone();
    let noise = state
        .noise
        .as_mut()
        .ok_or_else(|| Error::State("independent_noise state without a noise model".into()))?;
    let sys = LinearSystem {
        gram: noise.h.tr_mul(&noise.h),
        cross: noise.h.tr_mul(&target),
    };
    let tau = noise.tau();
    noise.lambda = draw_loadings(&sys, &noise.phi_lambda, &tau, &sigma_sq, "lambda", rng)?;
    Ok(())
}

/// Rows of latent factors `f_n ~ N(C L Σ⁻¹ r_n, C)` with
/// `C = (prior_prec + L Σ⁻¹ Lᵀ)⁻¹` for loadings `L` and residual rows `r_n`.
/// Returns `(precision, mean)`; the draw is added by the caller.
fn factor_rows(
    loadings: &DMatrix<f64>,
    residual: &DMatrix<f64>,
    prior_prec: &DVector<f64>,
    sigma_sq: &DVector<f64>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut w = loadings.transpose();
    for (j, mut row) in w.row_iter_mut().enumerate() {
        row /= sigma_sq[j];
    }
    let mut prec = loadings * &w;
    for h in 0..prior_prec.len() {
        prec[(h, h)] += prior_prec[h];
    }
    (prec, residual * w)
}

fn draw_factor_rows<R: Rng + ?Sized>(
    loadings: &DMatrix<f64>,
    residual: &DMatrix<f64>,
    prior_prec: &DVector<f64>,
    sigma_sq: &DVector<f64>,
    context: &str,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let (prec, rw) = factor_rows(loadings, residual, prior_prec, sigma_sq);
    let chol = cholesky(prec, context)?;
    // Each row: C (L Σ⁻¹ r_n) + L_c⁻ᵀ z_n, with C⁻¹ = L_c L_cᵀ.
    let mut cols = rw.transpose();
    chol.solve_mut(&mut cols);
    let mut z = linalg::standard_normal_matrix(prior_prec.len(), residual.nrows(), rng);
    if !chol.l().transpose().solve_upper_triangular_mut(&mut z) {
        return Err(Error::numerical(format!("{context}: singular factor")));
    }
    Ok((cols + z).transpose())
}

fn omega_residual(state: &ModelState, data: &PreparedData) -> DMatrix<f64> {
    data.y() - data.x() * &state.psi * &state.gamma
}

/// Common row posterior of `Ω`: `(mean rows, covariance)`.
pub fn omega_posterior(
    state: &ModelState,
    data: &PreparedData,
    config: &ModelConfig,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let var = config.sigma_omega_sq()?;
    if !(var > 0.0) {
        let s = state.rank();
        return Ok((DMatrix::zeros(data.n_samples(), s), DMatrix::zeros(s, s)));
    }
    let prior = state.tau() / var;
    let (prec, rw) = factor_rows(&state.gamma, &omega_residual(state, data), &prior, &state.sigma_sq);
    let chol = cholesky(prec, "omega")?;
    let mut cols = rw.transpose();
    chol.solve_mut(&mut cols);
    Ok((cols.transpose(), chol.inverse()))
}

pub fn update_omega<R: Rng + ?Sized>(
    state: &mut ModelState,
    data: &PreparedData,
    config: &ModelConfig,
    rng: &mut R,
) -> Result<()> {
    let var = config.sigma_omega_sq()?;
    let s = state.rank();
    if !(var > 0.0) {
        state.omega = Some(DMatrix::zeros(data.n_samples(), s));
        return Ok(());
    }
    let prior = state.tau() / var;
    let residual = omega_residual(state, data);
    state.omega = Some(draw_factor_rows(&state.gamma, &residual, &prior, &state.sigma_sq, "omega", rng)?);
    Ok(())
}

/// Latent factors `H` of the independent-noise model, standard normal prior.
pub fn update_h<R: Rng + ?Sized>(state: &mut ModelState, data: &PreparedData, rng: &mut R) -> Result<()> {
    let residual = omega_residual(state, data);
    let sigma_sq = state.sigma_sq.clone();
    let noise = state
        .noise
        .as_mut()
        .ok_or_else(|| Error::State("independent_noise state without a noise model".into()))?;
    let prior = DVector::from_element(noise.lambda.nrows(), 1.0);
    noise.h = draw_factor_rows(&noise.lambda, &residual, &prior, &sigma_sq, "h", rng)?;
    Ok(())
}

fn draw_local_shrinkage<R: Rng + ?Sized>(
    loadings: &DMatrix<f64>,
    tau: &DVector<f64>,
    nu: f64,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let (s, k) = loadings.shape();
    let mut phi = DMatrix::zeros(s, k);
    for j in 0..k {
        for h in 0..s {
            let g = loadings[(h, j)];
            phi[(h, j)] = sample_gamma((nu + 1.0) / 2.0, (nu + tau[h] * g * g) / 2.0, rng)?;
        }
    }
    Ok(phi)
}

/// `φ_hj ~ Ga((ν+1)/2, (ν + τ_h γ_hj²)/2)`, and likewise for `Λ`.
pub fn update_phi_gamma<R: Rng + ?Sized>(state: &mut ModelState, config: &ModelConfig, rng: &mut R) -> Result<()> {
    state.phi_gamma = draw_local_shrinkage(&state.gamma, &state.tau(), config.nu, rng)?;
    if let Some(noise) = state.noise.as_mut() {
        let tau = noise.tau();
        noise.phi_lambda = draw_local_shrinkage(&noise.lambda, &tau, config.nu, rng)?;
    }
    Ok(())
}

/// Per-component sufficient statistics for the `δ` update: the number of
/// Gaussian coordinates shrunk by `τ_h` and their quadratic form `q_h`.
pub fn delta_statistics(state: &ModelState, config: &ModelConfig) -> Result<(DVector<f64>, DVector<f64>)> {
    let s = state.rank();
    let k = state.gamma.ncols();
    let p = state.psi.nrows();
    let mut counts = DVector::from_element(s, (k + p) as f64);
    let mut quad = DVector::zeros(s);
    for h in 0..s {
        let g = state.gamma.row(h);
        let f = state.phi_gamma.row(h);
        quad[h] = g.iter().zip(f.iter()).map(|(g, f)| f * g * g).sum::<f64>() + state.psi.column(h).norm_squared();
    }
    if config.variant == Variant::LatentNoise {
        let var = config.sigma_omega_sq()?;
        if var > 0.0 {
            let omega = state
                .omega
                .as_ref()
                .ok_or_else(|| Error::State("latent_noise state without omega".into()))?;
            for h in 0..s {
                counts[h] += omega.nrows() as f64;
                quad[h] += omega.column(h).norm_squared() / var;
            }
        }
    }
    Ok((counts, quad))
}

/// Sequential update of the multiplicative gamma increments. For each `l`:
/// `δ_l ~ Ga(a_l + ½ Σ_{h≥l} c_h, 1 + ½ Σ_{h≥l} τ_h^{(-l)} q_h)`.
pub fn draw_delta<R: Rng + ?Sized>(
    delta: &mut DVector<f64>,
    counts: &DVector<f64>,
    quad: &DVector<f64>,
    a1: f64,
    a2: f64,
    rng: &mut R,
) -> Result<()> {
    let s = delta.len();
    for l in 0..s {
        let mut shape = if l == 0 { a1 } else { a2 };
        let mut rate = 1.0;
        // τ_h with δ_l removed, for h ≥ l.
        let mut partial: f64 = delta.iter().take(l).product();
        for h in l..s {
            if h > l {
                partial *= delta[h];
            }
            shape += 0.5 * counts[h];
            rate += 0.5 * partial * quad[h];
        }
        if !rate.is_finite() {
            return Err(Error::numerical("delta: non-finite rate"));
        }
        delta[l] = sample_gamma(shape, rate, rng)?;
    }
    Ok(())
}

pub fn update_delta<R: Rng + ?Sized>(state: &mut ModelState, config: &ModelConfig, rng: &mut R) -> Result<()> {
    let (counts, quad) = delta_statistics(state, config)?;
    draw_delta(&mut state.delta, &counts, &quad, config.a1, config.a2, rng)?;
    if let Some(noise) = state.noise.as_mut() {
        let s2 = noise.lambda.nrows();
        let counts = DVector::from_element(s2, noise.lambda.ncols() as f64);
        let quad = DVector::from_fn(s2, |h, _| {
            noise
                .lambda
                .row(h)
                .iter()
                .zip(noise.phi_lambda.row(h).iter())
                .map(|(g, f)| f * g * g)
                .sum::<f64>()
        });
        draw_delta(&mut noise.delta_lambda, &counts, &quad, config.a1, config.a2, rng)?;
    }
    Ok(())
}

/// Full residual `Y − E[Y | all parameters]` for the variant.
pub fn residual(state: &ModelState, data: &PreparedData, config: &ModelConfig) -> Result<DMatrix<f64>> {
    let mut latent = data.x() * &state.psi;
    match config.variant {
        Variant::LatentNoise => {
            if let Some(omega) = &state.omega {
                latent += omega;
            }
        }
        Variant::Null => return Ok(data.y().clone()),
        _ => {}
    }
    let mut r = data.y() - latent * &state.gamma;
    if let Some(noise) = &state.noise {
        r -= &noise.h * &noise.lambda;
    }
    Ok(r)
}

/// `σ_j⁻² ~ Ga(a_σ + N/2, b_σ + ½‖r_j‖²)`.
pub fn update_sigma<R: Rng + ?Sized>(
    state: &mut ModelState,
    data: &PreparedData,
    config: &ModelConfig,
    rng: &mut R,
) -> Result<()> {
    let r = residual(state, data, config)?;
    let n = r.nrows() as f64;
    for (j, col) in r.column_iter().enumerate() {
        let precision = sample_gamma(config.a_sigma + n / 2.0, config.b_sigma + 0.5 * col.norm_squared(), rng)?;
        state.sigma_sq[j] = 1.0 / precision;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{sample_prior, Dataset, Dims};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(n: usize, p: usize, k: usize, s: usize, seed: u64) -> (ModelState, PreparedData, ModelConfig) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = ModelConfig {
            rank: s,
            latent_snr: None,
            sigma_omega_sq: Some(1.5),
            ..Default::default()
        };
        let dims = Dims::new(n, p, k, s).unwrap();
        let state = sample_prior(&config, &dims, &mut rng).unwrap();
        let x = linalg::standard_normal_matrix(n, p, &mut rng);
        let y = linalg::standard_normal_matrix(n, k, &mut rng);
        (state, PreparedData::new(Dataset::new(x, y).unwrap(), false).unwrap(), config)
    }

    #[test]
    fn gamma_posterior_matches_dense_formula() {
        let (state, data, config) = setup(50, 4, 3, 2, 1);
        let post = gamma_posterior(&state, &data, &config).unwrap();
        let xs = data.x() * &state.psi + state.omega.as_ref().unwrap();
        let tau = state.tau();
        for i in 0..3 {
            let prior_cov = DMatrix::from_diagonal(&DVector::from_fn(2, |h, _| 1.0 / (state.phi_gamma[(h, i)] * tau[h])));
            let s2 = state.sigma_sq[i];
            let cov = (prior_cov.try_inverse().unwrap() + xs.transpose() * &xs / s2).try_inverse().unwrap();
            let mean = &cov * (xs.transpose() * data.y().column(i) / s2);
            assert!((&post[i].mean - &mean).amax() < 1e-10 * mean.amax().max(1.0));
            assert!((&post[i].covariance - &cov).amax() < 1e-10 * cov.amax());
        }
    }

    #[test]
    fn gamma_without_data_information_is_prior() {
        let (mut state, data, config) = setup(20, 3, 4, 2, 2);
        state.psi.fill(0.0);
        state.omega.as_mut().unwrap().fill(0.0);
        let post = gamma_posterior(&state, &data, &config).unwrap();
        let tau = state.tau();
        for (i, col) in post.iter().enumerate() {
            assert!(col.mean.amax() < 1e-15);
            for h in 0..2 {
                assert_relative_eq!(col.covariance[(h, h)], 1.0 / (state.phi_gamma[(h, i)] * tau[h]), max_relative = 1e-12);
            }
        }
        // Infinite residual variance also leaves the prior.
        let (mut state, data, config) = setup(20, 3, 4, 2, 3);
        state.sigma_sq.fill(1e300);
        let post = gamma_posterior(&state, &data, &config).unwrap();
        let tau = state.tau();
        assert_relative_eq!(post[0].covariance[(1, 1)], 1.0 / (state.phi_gamma[(1, 0)] * tau[1]), max_relative = 1e-9);
    }

    #[test]
    fn omega_posterior_matches_linear_model_oracle() {
        // Row n: r_n = Γᵀ ω_n + e_n, prior ω_n ~ N(0, σ_Ω² D_τ⁻¹).
        let (state, data, config) = setup(6, 3, 5, 2, 4);
        let (mean, cov) = omega_posterior(&state, &data, &config).unwrap();
        let var = config.sigma_omega_sq().unwrap();
        let tau = state.tau();
        let design = state.gamma.transpose();
        let sigma_inv = DMatrix::from_diagonal(&state.sigma_sq.map(|s| 1.0 / s));
        let prior_prec = DMatrix::from_diagonal(&tau.map(|t| t / var));
        let oracle_cov = (prior_prec + design.transpose() * &sigma_inv * &design).try_inverse().unwrap();
        assert!((&cov - &oracle_cov).amax() < 1e-10 * oracle_cov.amax());
        let resid = data.y() - data.x() * &state.psi * &state.gamma;
        for n in 0..6 {
            let r = resid.row(n).transpose();
            let m = &oracle_cov * design.transpose() * &sigma_inv * r;
            for h in 0..2 {
                assert_relative_eq!(mean[(n, h)], m[h], max_relative = 1e-10, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn omega_with_zero_loadings_or_residual() {
        let (mut state, data, config) = setup(8, 3, 4, 2, 5);
        state.gamma.fill(0.0);
        let (mean, cov) = omega_posterior(&state, &data, &config).unwrap();
        assert!(mean.amax() < 1e-15);
        let tau = state.tau();
        for h in 0..2 {
            assert_relative_eq!(cov[(h, h)], 1.5 / tau[h], max_relative = 1e-12);
        }
        let (state, _, config) = setup(8, 3, 4, 2, 6);
        let y = data.x() * &state.psi * &state.gamma;
        let zero_resid = PreparedData::new(Dataset::new(data.x().clone(), y).unwrap(), false).unwrap();
        let (mean, _) = omega_posterior(&state, &zero_resid, &config).unwrap();
        assert!(mean.amax() < 1e-12);
    }

    #[test]
    fn delta_zero_parameters_hand_posterior() {
        // All quadratic forms vanish: δ_l ~ Ga(a_l + ½ Σ_{h≥l}(K+P+N), 1).
        let (mut state, _, config) = setup(10, 3, 4, 2, 7);
        state.gamma.fill(0.0);
        state.psi.fill(0.0);
        state.omega.as_mut().unwrap().fill(0.0);
        let (counts, quad) = delta_statistics(&state, &config).unwrap();
        assert_eq!(counts, DVector::from_element(2, 17.0));
        assert_eq!(quad, DVector::zeros(2));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 40_000;
        let mut sums = [0.0; 2];
        for _ in 0..n {
            let mut s = state.clone();
            update_delta(&mut s, &config, &mut rng).unwrap();
            sums[0] += s.delta[0];
            sums[1] += s.delta[1];
        }
        // Shapes: 3 + 17 = 20 and 4 + 8.5 = 12.5, unit rate.
        assert_relative_eq!(sums[0] / n as f64, 20.0, max_relative = 0.01);
        assert_relative_eq!(sums[1] / n as f64, 12.5, max_relative = 0.01);
    }

    #[test]
    fn delta_single_component_hand_posterior() {
        // S1 = 1: δ_1 ~ Ga(a1 + (K+P+N)/2, 1 + q/2).
        let (state, _, config) = setup(5, 2, 3, 1, 8);
        let (counts, quad) = delta_statistics(&state, &config).unwrap();
        let q = state.gamma.component_mul(&state.gamma).component_mul(&state.phi_gamma).sum()
            + state.psi.norm_squared()
            + state.omega.as_ref().unwrap().norm_squared() / 1.5;
        assert_relative_eq!(quad[0], q, max_relative = 1e-12);
        assert_eq!(counts[0], 10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 40_000;
        let mean = (0..n)
            .map(|_| {
                let mut s = state.clone();
                update_delta(&mut s, &config, &mut rng).unwrap();
                s.delta[0]
            })
            .sum::<f64>()
            / n as f64;
        assert_relative_eq!(mean, (3.0 + 5.0) / (1.0 + q / 2.0), max_relative = 0.01);
    }

    #[test]
    fn phi_gamma_posterior_means() {
        let (mut state, _, config) = setup(5, 2, 2, 1, 9);
        state.gamma[(0, 0)] = 0.0;
        state.gamma[(0, 1)] = 30.0;
        let tau = state.tau()[0];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 40_000;
        let mut sums = [0.0; 2];
        for _ in 0..n {
            let mut s = state.clone();
            update_phi_gamma(&mut s, &config, &mut rng).unwrap();
            sums[0] += s.phi_gamma[(0, 0)];
            sums[1] += s.phi_gamma[(0, 1)];
        }
        // Ga((ν+1)/2, ν/2) at γ = 0: mean (ν+1)/ν.
        assert_relative_eq!(sums[0] / n as f64, 4.0 / 3.0, max_relative = 0.02);
        let big = tau * 900.0;
        assert_relative_eq!(sums[1] / n as f64, 4.0 / (3.0 + big), max_relative = 0.02);
    }

    #[test]
    fn sigma_posterior_means() {
        // Residual with ‖r‖² = 2N per column: σ⁻² mean (a + N/2)/(b + N).
        let n = 4000;
        let mut state = setup(n, 2, 2, 1, 10).0;
        state.psi.fill(0.0);
        let config = ModelConfig {
            variant: Variant::NoNoise,
            latent_snr: None,
            rank: 1,
            ..Default::default()
        };
        let y = DMatrix::from_fn(n, 2, |i, _| if i % 2 == 0 { 2f64.sqrt() } else { -(2f64.sqrt()) });
        let data = PreparedData::new(Dataset::new(DMatrix::zeros(n, 2), y).unwrap(), false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let reps = 2000;
        let mut prec = 0.0;
        for _ in 0..reps {
            update_sigma(&mut state, &data, &config, &mut rng).unwrap();
            prec += 1.0 / state.sigma_sq[0];
        }
        let expect = (1.0 + n as f64 / 2.0) / (1.0 + n as f64);
        assert_relative_eq!(prec / reps as f64, expect, max_relative = 0.005);
        assert!((state.sigma_sq[0] - 2.0).abs() < 0.2);
    }
}
