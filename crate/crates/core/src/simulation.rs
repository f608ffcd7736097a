//! Synthetic data on the continuum between latent and independent noise:
//!
//! ```text
//! Y = (XΨ + αΩ)Γ + (1 − α)HΛ + E
//! ```
//!
//! The three parts (signal `XΨΓ`, structured noise, diagonal noise `E`) are
//! rescaled on the realized combined sample so their covariance traces are
//! exactly `var_signal·K`, `var_structured·K` and `var_diag·K`.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{covariance_trace, standard_normal_matrix};
use crate::model::Dataset;

const MAX_ATTEMPTS: usize = 10;
const DEGENERACY: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub alpha: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub n_covariates: usize,
    pub n_targets: usize,
    pub rank: usize,
    pub var_signal: f64,
    pub var_structured: f64,
    pub var_diag: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            alpha: 1.0,
            n_train: 500,
            n_test: 15_000,
            n_covariates: 30,
            n_targets: 60,
            rank: 3,
            var_signal: 0.03,
            var_structured: 0.77,
            var_diag: 0.20,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if self.n_train == 0 || self.n_covariates == 0 || self.n_targets == 0 || self.rank == 0 {
            return Err(Error::Config("n_train, n_covariates, n_targets and rank must be positive".into()));
        }
        if self.rank > self.n_covariates.min(self.n_targets) {
            return Err(Error::Config(format!(
                "rank {} exceeds min(n_covariates, n_targets) = {}",
                self.rank,
                self.n_covariates.min(self.n_targets)
            )));
        }
        let fr = [self.var_signal, self.var_structured, self.var_diag];
        if fr.iter().any(|f| !(*f >= 0.0)) {
            return Err(Error::Config("variance fractions must be non-negative".into()));
        }
        let total: f64 = fr.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("variance fractions must sum to 1, got {total}")));
        }
        Ok(())
    }
}

/// Generating parameters after rescaling.
#[derive(Debug, Clone)]
pub struct Truth {
    pub psi: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    pub lambda: DMatrix<f64>,
    /// `ΨΓ`
    pub theta: DMatrix<f64>,
    /// Realized trace shares of signal, structured and diagonal noise on the
    /// combined sample.
    pub fractions: [f64; 3],
}

#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub train: Dataset,
    pub test: Dataset,
    pub truth: Truth,
}

/// Modified Gram-Schmidt on the rows, normalising each. `None` when a row is
/// numerically dependent on the previous ones.
pub fn orthonormalize_rows(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let mut out = m.clone();
    for i in 0..out.nrows() {
        let original = out.row(i).norm();
        for j in 0..i {
            let proj = out.row(i).dot(&out.row(j));
            let rj = out.row(j).clone_owned();
            let mut ri = out.row_mut(i);
            ri -= rj * proj;
        }
        let norm = out.row(i).norm();
        if !(norm > DEGENERACY * original.max(f64::MIN_POSITIVE)) {
            return None;
        }
        out.row_mut(i).scale_mut(1.0 / norm);
    }
    Some(out)
}

fn orthonormal_loadings<R: Rng + ?Sized>(rank: usize, k: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    for _ in 0..MAX_ATTEMPTS {
        if let Some(m) = orthonormalize_rows(&standard_normal_matrix(rank, k, rng)) {
            return Ok(m);
        }
    }
    Err(Error::numerical(format!(
        "Gram-Schmidt degenerate in {MAX_ATTEMPTS} attempts"
    )))
}

/// Factor making `trace(Var(scale·m)) = target`.
fn scale_to(m: &DMatrix<f64>, target: f64, what: &str) -> Result<f64> {
    if target == 0.0 {
        return Ok(0.0);
    }
    let t = covariance_trace(m);
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::numerical(format!("{what} has no variance to rescale")));
    }
    Ok((target / t).sqrt())
}

pub fn generate(config: &SimConfig) -> Result<SimulatedData> {
    generate_with(config, &mut ChaCha8Rng::seed_from_u64(config.seed))
}

pub fn generate_with<R: Rng + ?Sized>(config: &SimConfig, rng: &mut R) -> Result<SimulatedData> {
    config.validate()?;
    let (p, k, s) = (config.n_covariates, config.n_targets, config.rank);
    let n = config.n_train + config.n_test;
    if n < 2 {
        return Err(Error::Config("need at least two samples in total".into()));
    }
    let x = standard_normal_matrix(n, p, rng);
    let psi = standard_normal_matrix(p, s, rng);
    let gamma = orthonormal_loadings(s, k, rng)?;
    let omega = standard_normal_matrix(n, s, rng);
    let h = standard_normal_matrix(n, s, rng);
    let lambda = orthonormal_loadings(s, k, rng)?;
    let noise = standard_normal_matrix(n, k, rng);

    let signal = &x * &psi * &gamma;
    let structured = &omega * &gamma * config.alpha + &h * &lambda * (1.0 - config.alpha);
    let total = k as f64;
    let c_signal = scale_to(&signal, config.var_signal * total, "signal")?;
    let c_struct = scale_to(&structured, config.var_structured * total, "structured noise")?;
    let c_diag = scale_to(&noise, config.var_diag * total, "diagonal noise")?;
    let signal = signal * c_signal;
    let structured = structured * c_struct;
    let noise = noise * c_diag;
    let parts = [covariance_trace(&signal), covariance_trace(&structured), covariance_trace(&noise)];
    let sum: f64 = parts.iter().sum();
    let fractions = parts.map(|t| t / sum);

    let y = signal + structured + noise;
    let psi = psi * c_signal;
    let theta = &psi * &gamma;
    let full = Dataset::new(x, y)?;
    let train_idx: Vec<usize> = (0..config.n_train).collect();
    let test_idx: Vec<usize> = (config.n_train..n).collect();
    Ok(SimulatedData {
        train: full.select_rows(&train_idx),
        test: full.select_rows(&test_idx),
        truth: Truth {
            psi,
            gamma,
            lambda,
            theta,
            fractions,
        },
    })
}

/// Test MSE of the true mean prediction `XΘ` (Ω and H are unobservable at
/// test time).
pub fn oracle_mse(truth: &Truth, test: &Dataset) -> Result<f64> {
    if test.n_samples() == 0 {
        return Err(Error::Data("empty test set".into()));
    }
    if test.n_covariates() != truth.theta.nrows() || test.n_targets() != truth.theta.ncols() {
        return Err(Error::dims(
            "oracle_mse",
            format!("{}x{}", truth.theta.nrows(), truth.theta.ncols()),
            format!("{}x{}", test.n_covariates(), test.n_targets()),
        ));
    }
    let r = &test.y - &test.x * &truth.theta;
    Ok(r.norm_squared() / r.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn small(alpha: f64, seed: u64) -> SimConfig {
        SimConfig {
            alpha,
            n_train: 200,
            n_test: 300,
            n_covariates: 8,
            n_targets: 10,
            rank: 3,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = small(0.5, 0);
        c.rank = 9;
        assert!(matches!(generate(&c), Err(Error::Config(_))));
        let mut c = small(0.5, 0);
        c.var_diag = 0.3;
        assert!(generate(&c).is_err());
        assert!(generate(&small(1.5, 0)).is_err());
    }

    #[test]
    fn fractions_are_exact_on_generating_sample() {
        let d = generate(&small(0.3, 1)).unwrap();
        assert_relative_eq!(d.truth.fractions[0], 0.03, epsilon = 1e-10);
        assert_relative_eq!(d.truth.fractions[1], 0.77, epsilon = 1e-10);
        assert_relative_eq!(d.truth.fractions[2], 0.20, epsilon = 1e-10);
    }

    #[test]
    fn realized_signal_share_of_y_at_large_n() {
        let c = SimConfig {
            n_train: 15_000,
            n_test: 0,
            ..Default::default()
        };
        let d = generate(&c).unwrap();
        let signal = &d.train.x * &d.truth.theta;
        let share = covariance_trace(&signal) / covariance_trace(&d.train.y);
        assert!((share - 0.03).abs() < 0.005, "{share}");
    }

    #[test]
    fn zero_alpha_uses_independent_noise_only() {
        // With α = 0 the part of Y outside the span of Λ's rows is signal plus
        // diagonal noise; with α = 1 that holds for Γ instead.
        let c = SimConfig {
            var_diag: 0.0,
            var_signal: 0.0,
            var_structured: 1.0,
            ..small(0.0, 2)
        };
        let d = generate(&c).unwrap();
        let proj = d.truth.lambda.transpose() * &d.truth.lambda;
        let resid = &d.train.y - &d.train.y * proj;
        assert!(resid.amax() < 1e-10);
    }

    #[test]
    fn oracle_without_diagonal_noise_sees_structured_share() {
        let c = SimConfig {
            var_diag: 0.0,
            var_signal: 0.1,
            var_structured: 0.9,
            n_train: 100,
            n_test: 20_000,
            ..small(0.5, 3)
        };
        let d = generate(&c).unwrap();
        let m = oracle_mse(&d.truth, &d.test).unwrap();
        assert!((m - 0.9).abs() < 0.05, "{m}");
    }

    #[test]
    fn oracle_mse_empty_test_is_error() {
        let d = generate(&SimConfig { n_test: 0, ..small(1.0, 4) }).unwrap();
        assert!(oracle_mse(&d.truth, &d.test).is_err());
    }

    #[test]
    fn gram_schmidt_flags_dependence() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0]);
        assert!(orthonormalize_rows(&m).is_none());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn generated_loadings_are_orthonormal(seed in 0u64..1000, alpha in 0.0f64..=1.0) {
            let d = generate(&small(alpha, seed)).unwrap();
            for m in [&d.truth.gamma, &d.truth.lambda] {
                let g = m * m.transpose();
                let err = (g - DMatrix::identity(m.nrows(), m.nrows())).amax();
                prop_assert!(err < 1e-10);
            }
            let sum: f64 = d.truth.fractions.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
        }

        #[test]
        fn generation_is_deterministic(seed in 0u64..1000) {
            let a = generate(&small(0.5, seed)).unwrap();
            let b = generate(&small(0.5, seed)).unwrap();
            prop_assert_eq!(a.train.y, b.train.y);
            prop_assert_eq!(a.test.x, b.test.x);
        }
    }
}
