//! Full conditional of `Ψ` with the latent noise `Ω` integrated out.
//!
//! With `M = σ_Ω² Γᵀ D_τ⁻¹ Γ + Σ` the rows of the target residual are
//! `N(Γᵀ Ψᵀ x_n, M)`, so `vec(Ψ)` is Gaussian with
//!
//! ```text
//! precision  Q = D_τ ⊗ I_P + (Γ M⁻¹ Γᵀ) ⊗ XᵀX
//! Q · mean     = vec(Xᵀ R M⁻¹ Γᵀ)
//! ```
//!
//! The naive route factorises the dense `PS×PS` matrix `Q`. The fast route
//! whitens with the prior, `Ψ = Ψ̃ D_τ^{-1/2}`, which turns the precision of
//! `vec(Ψ̃)` into `I + Ã ⊗ XᵀX`. With `Ã = U_A Λ_A U_Aᵀ` and
//! `XᵀX = U_X Λ_X U_Xᵀ` this is `(U_A ⊗ U_X)(I + Λ_A ⊗ Λ_X)(U_A ⊗ U_X)ᵀ`, so
//! both the mean and a draw reduce to products with the two eigenbases. The
//! eigendecomposition of `XᵀX` depends only on the data and is cached in
//! [`PreparedData`].

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::PreparedData;
use crate::error::{Error, Result};
use crate::linalg::{self, cholesky};
use crate::model::{ModelConfig, ModelState, Variant};

/// Which algorithm draws `Ψ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsiMethod {
    /// Dense `PS1×PS1` Cholesky, `O(P³S1³)` per update.
    Naive,
    /// Kronecker eigenbasis, `O(P²S1 + S1³)` per update after a one-off
    /// `O(P³)` eigendecomposition of `XᵀX`.
    #[default]
    Fast,
}

/// Gaussian conditional moments of `Ψ`: mean and element-wise variance.
#[derive(Debug, Clone)]
pub struct PsiMoments {
    pub mean: DMatrix<f64>,
    pub variance: DMatrix<f64>,
}

/// The data-side pieces of the conditional: `B = Xᵀ R M⁻¹ Γᵀ` and
/// `A = Γ M⁻¹ Γᵀ`.
struct PsiSystem {
    b: DMatrix<f64>,
    a: DMatrix<f64>,
    tau: DVector<f64>,
}

fn psi_system(state: &ModelState, data: &PreparedData, config: &ModelConfig) -> Result<PsiSystem> {
    let tau = state.tau();
    let gamma = &state.gamma;
    let inv_sigma = state.sigma_sq.map(|s| 1.0 / s);
    // W = Σ⁻¹ Γᵀ (K×S), G = Γ Σ⁻¹ Γᵀ (S×S)
    let mut w = gamma.transpose();
    for (j, mut row) in w.row_iter_mut().enumerate() {
        row *= inv_sigma[j];
    }
    let g = gamma * &w;

    let xtr = match (config.variant, &state.noise) {
        (Variant::IndependentNoise, Some(noise)) => &data.xty - (data.x().tr_mul(&noise.h)) * &noise.lambda,
        (Variant::IndependentNoise, None) => {
            return Err(Error::State("independent_noise state without a noise model".into()))
        }
        _ => data.xty.clone(),
    };

    let var_omega = match config.variant {
        Variant::LatentNoise => config.sigma_omega_sq()?,
        _ => 0.0,
    };
    let (m_inv_gt, a) = if var_omega > 0.0 {
        // Woodbury: M⁻¹Γᵀ = W C D_τ/σ_Ω² and ΓM⁻¹Γᵀ = G C D_τ/σ_Ω², with
        // C = (D_τ/σ_Ω² + G)⁻¹. Avoids the cancellation in G − G C G.
        let d = tau.map(|t| t / var_omega);
        let mut c_inv = g.clone();
        for h in 0..d.len() {
            c_inv[(h, h)] += d[h];
        }
        let chol = cholesky(c_inv, "psi: latent covariance")?;
        let mut c_d = chol.inverse();
        for (h, mut col) in c_d.column_iter_mut().enumerate() {
            col *= d[h];
        }
        let m_inv_gt = &w * &c_d;
        let mut a = &g * &c_d;
        a = (&a + a.transpose()) * 0.5;
        (m_inv_gt, a)
    } else {
        (w, g)
    };
    Ok(PsiSystem {
        b: xtr * m_inv_gt,
        a,
        tau,
    })
}

fn dense_precision(sys: &PsiSystem, gram: &DMatrix<f64>) -> DMatrix<f64> {
    let p = gram.nrows();
    let s = sys.tau.len();
    let mut q = DMatrix::zeros(p * s, p * s);
    for h in 0..s {
        for h2 in 0..s {
            let a = sys.a[(h, h2)];
            for j2 in 0..p {
                for j in 0..p {
                    q[(j + p * h, j2 + p * h2)] = a * gram[(j, j2)];
                }
            }
        }
        for j in 0..p {
            q[(j + p * h, j + p * h)] += sys.tau[h];
        }
    }
    q
}

/// Exact conditional moments from the dense precision matrix.
pub fn psi_moments_naive(state: &ModelState, data: &PreparedData, config: &ModelConfig) -> Result<PsiMoments> {
    let sys = psi_system(state, data, config)?;
    let (p, s) = (data.gram.nrows(), sys.tau.len());
    let chol = cholesky(dense_precision(&sys, &data.gram), "psi (naive)")?;
    let b = DVector::from_column_slice(sys.b.as_slice());
    let mean = chol.solve(&b);
    let cov = chol.inverse();
    Ok(PsiMoments {
        mean: DMatrix::from_column_slice(p, s, mean.as_slice()),
        variance: DMatrix::from_iterator(p, s, cov.diagonal().iter().copied()),
    })
}

/// Draw `Ψ` from its collapsed conditional using the dense factorisation.
pub fn update_psi_naive<R: Rng + ?Sized>(
    state: &mut ModelState,
    data: &PreparedData,
    config: &ModelConfig,
    rng: &mut R,
) -> Result<()> {
    let sys = psi_system(state, data, config)?;
    let (p, s) = (data.gram.nrows(), sys.tau.len());
    let chol = cholesky(dense_precision(&sys, &data.gram), "psi (naive)")?;
    let b = DVector::from_column_slice(sys.b.as_slice());
    let (_, draw) = linalg::gaussian_from_precision(&chol, &b, rng);
    state.psi = DMatrix::from_column_slice(p, s, draw.as_slice());
    Ok(())
}

/// Cached eigendecomposition of `XᵀX`.
#[derive(Debug, Clone)]
pub struct GramEigen {
    pub vectors: DMatrix<f64>,
    pub values: DVector<f64>,
}

impl GramEigen {
    pub fn new(gram: &DMatrix<f64>) -> Result<Self> {
        if !linalg::all_finite(gram) {
            return Err(Error::numerical("eigendecomposition of X'X: non-finite entries"));
        }
        let eig = SymmetricEigen::try_new(gram.clone(), f64::EPSILON, 0)
            .ok_or_else(|| Error::numerical("eigendecomposition of X'X did not converge"))?;
        Ok(GramEigen {
            vectors: eig.eigenvectors,
            // X'X is positive semi-definite; clip rounding noise.
            values: eig.eigenvalues.map(|v| v.max(0.0)),
        })
    }
}

struct FastBasis {
    /// Eigenvectors of the whitened `Ã`.
    ua: DMatrix<f64>,
    /// `1 / (1 + λ_X[j] λ_A[a])`, P×S.
    inv_scale: DMatrix<f64>,
    /// `τ_h^{-1/2}`.
    unwhiten: DVector<f64>,
    /// Whitened right-hand side `B D_τ^{-1/2}`.
    b_white: DMatrix<f64>,
}

fn fast_basis(sys: &PsiSystem, eig: &GramEigen) -> Result<FastBasis> {
    let s = sys.tau.len();
    let unwhiten = sys.tau.map(|t| t.sqrt().recip());
    let mut a_white = sys.a.clone();
    for h in 0..s {
        for h2 in 0..s {
            a_white[(h, h2)] *= unwhiten[h] * unwhiten[h2];
        }
    }
    if !linalg::all_finite(&a_white) {
        return Err(Error::numerical("psi (fast): non-finite whitened loading product"));
    }
    let eig_a = SymmetricEigen::try_new(a_white, f64::EPSILON, 0)
        .ok_or_else(|| Error::numerical("psi (fast): eigendecomposition did not converge"))?;
    let la = eig_a.eigenvalues.map(|v| v.max(0.0));
    let p = eig.values.len();
    let inv_scale = DMatrix::from_fn(p, s, |j, a| 1.0 / (1.0 + eig.values[j] * la[a]));
    let mut b_white = sys.b.clone();
    for (h, mut col) in b_white.column_iter_mut().enumerate() {
        col *= unwhiten[h];
    }
    Ok(FastBasis {
        ua: eig_a.eigenvectors,
        inv_scale,
        unwhiten,
        b_white,
    })
}

fn fast_mean_white(basis: &FastBasis, eig: &GramEigen) -> DMatrix<f64> {
    let rotated = eig.vectors.tr_mul(&basis.b_white) * &basis.ua;
    let scaled = rotated.component_mul(&basis.inv_scale);
    &eig.vectors * scaled * basis.ua.transpose()
}

fn unwhiten(mut m: DMatrix<f64>, scale: &DVector<f64>) -> DMatrix<f64> {
    for (h, mut col) in m.column_iter_mut().enumerate() {
        col *= scale[h];
    }
    m
}

fn require_eigen(data: &PreparedData) -> Result<&GramEigen> {
    data.gram_eigen
        .as_ref()
        .ok_or_else(|| Error::Config("fast psi update needs PreparedData built with the X'X eigendecomposition".into()))
}

/// Conditional moments via the Kronecker eigenbasis.
pub fn psi_moments_fast(state: &ModelState, data: &PreparedData, config: &ModelConfig) -> Result<PsiMoments> {
    let eig = require_eigen(data)?;
    let sys = psi_system(state, data, config)?;
    let basis = fast_basis(&sys, eig)?;
    let mean = unwhiten(fast_mean_white(&basis, eig), &basis.unwhiten);
    // diag of (U_A ⊗ U_X) S (U_A ⊗ U_X)ᵀ, element (j, h):
    //   Σ_a Σ_b U_X[j,b]² U_A[h,a]² / (1 + λ_X[b] λ_A[a])
    let ux_sq = eig.vectors.component_mul(&eig.vectors);
    let ua_sq = basis.ua.component_mul(&basis.ua);
    let partial = ux_sq * &basis.inv_scale;
    let var_white = partial * ua_sq.transpose();
    let scale_sq = basis.unwhiten.component_mul(&basis.unwhiten);
    Ok(PsiMoments {
        mean,
        variance: unwhiten(var_white, &scale_sq),
    })
}

/// Draw `Ψ` from its collapsed conditional using the Kronecker eigenbasis.
pub fn update_psi_fast<R: Rng + ?Sized>(
    state: &mut ModelState,
    data: &PreparedData,
    config: &ModelConfig,
    rng: &mut R,
) -> Result<()> {
    let eig = require_eigen(data)?;
    let sys = psi_system(state, data, config)?;
    let basis = fast_basis(&sys, eig)?;
    let (p, s) = basis.inv_scale.shape();
    let mean = fast_mean_white(&basis, eig);
    let noise = linalg::standard_normal_matrix(p, s, rng).component_mul(&basis.inv_scale.map(f64::sqrt));
    let draw = mean + &eig.vectors * noise * basis.ua.transpose();
    state.psi = unwhiten(draw, &basis.unwhiten);
    Ok(())
}

pub fn update_psi<R: Rng + ?Sized>(
    method: PsiMethod,
    state: &mut ModelState,
    data: &PreparedData,
    config: &ModelConfig,
    rng: &mut R,
) -> Result<()> {
    match method {
        PsiMethod::Naive => update_psi_naive(state, data, config, rng),
        PsiMethod::Fast => update_psi_fast(state, data, config, rng),
    }
}
