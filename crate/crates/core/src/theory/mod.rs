//! Monte-Carlo checks of the shrinkage prior's variance properties and of
//! the sampler.
//!
//! Under the prior, a prediction `ỹ_i = xᵀ Σ_h Ψ_h γ_hi` with independent
//! zero-mean covariates of variances `v_j` has
//!
//! ```text
//! Var(ỹ_i) = ν/(ν−2) · Σ_j v_j · r(a1) / (1 − r(a2)),   r(a) = Γ(a−2)/Γ(a)
//! ```
//!
//! finite whenever `a1 > 2`, `a2 > 3`, `ν > 2`; keeping only the first `S`
//! components loses the fraction `r(a2)^S` of that variance.

mod geweke;

pub use geweke::{Z_LIMIT, PASS_FRACTION, geweke_config, geweke_test, geweke_test_with, GewekeReport, GewekeStatistic};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{marginal_covariance, ModelConfig, ModelState};

/// `Γ(a−2)/Γ(a)` via `1/((a−1)(a−2))`, which cannot overflow.
pub fn gamma_ratio(a: f64) -> f64 {
    1.0 / ((a - 1.0) * (a - 2.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ShrinkageHyper {
    pub a1: f64,
    pub a2: f64,
    pub nu: f64,
}

impl ShrinkageHyper {
    pub fn from_config(c: &ModelConfig) -> Self {
        ShrinkageHyper {
            a1: c.a1,
            a2: c.a2,
            nu: c.nu,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.a1 > 2.0) || !(self.a2 > 3.0) {
            return Err(Error::Config(format!(
                "prediction variance diverges unless a1 > 2 and a2 > 3 (got a1 = {}, a2 = {}): \
                 E[δ⁻²] is infinite for shape ≤ 2 and the geometric series over components needs Γ(a2−2)/Γ(a2) < 1",
                self.a1, self.a2
            )));
        }
        if !(self.nu > 2.0) {
            return Err(Error::Config(format!(
                "prediction variance diverges unless nu > 2 (got {}): E[1/φ] = ν/(ν−2)",
                self.nu
            )));
        }
        Ok(())
    }
}

/// Analytic prior variance of a prediction.
pub fn prediction_variance(hyper: &ShrinkageHyper, var_x: &[f64]) -> Result<f64> {
    hyper.validate()?;
    let sum_var: f64 = var_x.iter().sum();
    Ok(hyper.nu / (hyper.nu - 2.0) * sum_var * gamma_ratio(hyper.a1) / (1.0 - gamma_ratio(hyper.a2)))
}

/// Relative variance lost by truncating at `rank` components: `r(a2)^rank`.
pub fn truncation_deficit(a2: f64, rank: usize) -> f64 {
    gamma_ratio(a2).powi(rank as i32)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropositionReport {
    pub analytic_value: f64,
    pub empirical_value: f64,
    pub mc_standard_error: f64,
    pub n_draws: usize,
    /// Absolute tolerance used alongside three standard errors.
    pub tolerance: f64,
    pub pass: bool,
}

impl PropositionReport {
    fn new(analytic: f64, empirical: f64, se: f64, n: usize, tolerance: f64) -> Self {
        let pass = (analytic - empirical).abs() <= (3.0 * se).max(tolerance);
        PropositionReport {
            analytic_value: analytic,
            empirical_value: empirical,
            mc_standard_error: se,
            n_draws: n,
            tolerance,
            pass,
        }
    }

    pub fn relative_error(&self) -> f64 {
        if self.analytic_value == 0.0 {
            (self.empirical_value - self.analytic_value).abs()
        } else {
            ((self.empirical_value - self.analytic_value) / self.analytic_value).abs()
        }
    }
}

const CHUNK: usize = 8192;

/// Deterministic parallel Monte Carlo: chunk `c` uses stream `c` of the
/// seeded generator, and partial sums are combined in chunk order.
fn chunked_sums<const M: usize>(
    n_draws: usize,
    seed: u64,
    draw: impl Fn(&mut ChaCha8Rng) -> [f64; M] + Sync,
) -> [f64; M] {
    let n_chunks = n_draws.div_ceil(CHUNK);
    let partials: Vec<[f64; M]> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let len = CHUNK.min(n_draws - c * CHUNK);
            let mut acc = [0.0; M];
            for _ in 0..len {
                let v = draw(&mut rng);
                for (a, x) in acc.iter_mut().zip(v) {
                    *a += x;
                }
            }
            acc
        })
        .collect();
    let mut total = [0.0; M];
    for p in partials {
        for (t, x) in total.iter_mut().zip(p) {
            *t += x;
        }
    }
    total
}

struct PriorDraws {
    delta_first: Gamma<f64>,
    delta_rest: Gamma<f64>,
    phi: Gamma<f64>,
}

impl PriorDraws {
    fn new(h: &ShrinkageHyper) -> Result<Self> {
        let g = |shape: f64, rate: f64| Gamma::new(shape, 1.0 / rate).map_err(|e| Error::Config(e.to_string()));
        Ok(PriorDraws {
            delta_first: g(h.a1, 1.0)?,
            delta_rest: g(h.a2, 1.0)?,
            phi: g(h.nu / 2.0, h.nu / 2.0)?,
        })
    }

    fn delta(&self, h: usize, rng: &mut ChaCha8Rng) -> f64 {
        if h == 0 {
            self.delta_first.sample(rng)
        } else {
            self.delta_rest.sample(rng)
        }
    }
}

fn check_truncation(hyper: &ShrinkageHyper, truncation: usize, rel_tol: f64) -> Result<()> {
    let residual = truncation_deficit(hyper.a2, truncation);
    if truncation == 0 || residual >= rel_tol {
        return Err(Error::Config(format!(
            "truncation {truncation} leaves relative variance {residual:.3e}, not below tolerance {rel_tol}"
        )));
    }
    Ok(())
}

/// How [`check_prop1`] estimates `Var(ỹ)` from prior draws.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub enum Prop1Estimator {
    /// Average of `E[ỹ² | x, δ] = ν/(ν−2) · ‖x‖² · Σ_h τ_h⁻²`: the Gaussian
    /// loadings and the local scales `φ` are integrated analytically, `x`
    /// and the whole `δ` stack are simulated.
    #[default]
    Conditional,
    /// Sample variance of simulated `ỹ`. Its squares have infinite variance
    /// when `ν ≤ 4` or `a1 ≤ 4`, so it converges slowly.
    Raw,
}

/// Empirical prior variance of `ỹ = xᵀ Σ_h Ψ_h γ_h` against the analytic value.
///
/// In raw mode, each draw samples `x`, the shrinkage stack and the loadings.
/// Given `x` and `τ_h`, `xᵀΨ_h ~ N(0, ‖x‖²/τ_h)` exactly, so it is drawn
/// directly. The reported standard error assumes finite fourth moments.
pub fn check_prop1(
    hyper: &ShrinkageHyper,
    var_x: &[f64],
    truncation: usize,
    n_draws: usize,
    rel_tol: f64,
    estimator: Prop1Estimator,
    seed: u64,
) -> Result<PropositionReport> {
    let analytic = prediction_variance(hyper, var_x)?;
    check_truncation(hyper, truncation, rel_tol)?;
    if n_draws < 2 {
        return Err(Error::Config("need at least two Monte-Carlo draws".into()));
    }
    let dist = PriorDraws::new(hyper)?;
    let sd_x: Vec<f64> = var_x.iter().map(|v| v.sqrt()).collect();
    let phi_mean_inv = hyper.nu / (hyper.nu - 2.0);
    let n = n_draws as f64;
    match estimator {
        Prop1Estimator::Conditional => {
            let [s1, s2] = chunked_sums(n_draws, seed, |rng| {
                let xx = squared_norm(&sd_x, rng);
                let mut tau = 1.0;
                let mut inv_sq = 0.0;
                for h in 0..truncation {
                    tau *= dist.delta(h, rng);
                    inv_sq += 1.0 / (tau * tau);
                }
                let v = phi_mean_inv * xx * inv_sq;
                [v, v * v]
            });
            let mean = s1 / n;
            let se = ((s2 / n - mean * mean).max(0.0) / n).sqrt();
            Ok(PropositionReport::new(analytic, mean, se, n_draws, rel_tol * analytic.abs()))
        }
        Prop1Estimator::Raw => {
            let [s1, s2, s4] = chunked_sums(n_draws, seed, |rng| {
                let xx = squared_norm(&sd_x, rng);
                let mut tau = 1.0;
                let mut y = 0.0;
                for h in 0..truncation {
                    tau *= dist.delta(h, rng);
                    let phi = dist.phi.sample(rng);
                    let u: f64 = rng.sample::<f64, _>(StandardNormal) * (xx / tau).sqrt();
                    let g: f64 = rng.sample::<f64, _>(StandardNormal) / (phi * tau).sqrt();
                    y += u * g;
                }
                [y, y * y, y.powi(4)]
            });
            let mean = s1 / n;
            let var = (s2 - n * mean * mean) / (n - 1.0);
            let m2 = s2 / n;
            let se = ((s4 / n - m2 * m2).max(0.0) / n).sqrt();
            Ok(PropositionReport::new(analytic, var, se, n_draws, rel_tol * analytic.abs()))
        }
    }
}

fn squared_norm(sd: &[f64], rng: &mut ChaCha8Rng) -> f64 {
    sd.iter()
        .map(|s| {
            let z: f64 = rng.sample(StandardNormal);
            (s * z).powi(2)
        })
        .sum()
}

/// Monte-Carlo relative variance deficit of the rank-`rank` truncation.
///
/// Given the shrinkage parameters, component `h` contributes
/// `Σ_j v_j / (φ_h τ_h²)` to the prediction variance. `δ_1` is a common
/// factor of every `τ_h` and each `φ_h` is independent with the same mean,
/// so both cancel from the ratio of expected tail to expected total
/// variance. The estimator therefore simulates `δ_2, δ_3, …` only, which
/// removes the infinite-variance factors `δ_1⁻²` and `φ⁻¹`. The deficit is
/// the ratio of summed tail contributions to summed totals, with a
/// delta-method standard error.
pub fn check_prop2(
    hyper: &ShrinkageHyper,
    rank: usize,
    truncation: usize,
    n_draws: usize,
    seed: u64,
) -> Result<PropositionReport> {
    hyper.validate()?;
    if rank >= truncation {
        return Err(Error::Config(format!("rank {rank} must be below the reference truncation {truncation}")));
    }
    check_truncation(hyper, truncation, 1e-12)?;
    if n_draws < 2 {
        return Err(Error::Config("need at least two Monte-Carlo draws".into()));
    }
    let dist = PriorDraws::new(hyper)?;
    let [sb, st, sbb, stt, sbt] = chunked_sums(n_draws, seed, |rng| {
        let mut tau = 1.0;
        let (mut head, mut tail) = (0.0, 0.0);
        for h in 0..truncation {
            if h > 0 {
                tau *= dist.delta_rest.sample(rng);
            }
            let c = 1.0 / (tau * tau);
            if h < rank {
                head += c;
            } else {
                tail += c;
            }
        }
        let t = head + tail;
        [tail, t, tail * tail, t * t, tail * t]
    });
    let n = n_draws as f64;
    let (mb, mt) = (sb / n, st / n);
    let ratio = mb / mt;
    // Var(b − R t) = Var(b) − 2R Cov(b, t) + R² Var(t)
    let vb = sbb / n - mb * mb;
    let vt = stt / n - mt * mt;
    let cbt = sbt / n - mb * mt;
    let var_lin = (vb - 2.0 * ratio * cbt + ratio * ratio * vt).max(0.0);
    let se = (var_lin / n).sqrt() / mt;
    let analytic = truncation_deficit(hyper.a2, rank);
    Ok(PropositionReport::new(analytic, ratio, se, n_draws, 0.0))
}

/// Element-wise comparison of the empirical covariance of `ΩΓ + E` (X = 0)
/// with the marginal covariance `σ_Ω² Γ*ᵀΓ* + Σ`.
#[derive(Debug, Clone, Serialize)]
pub struct MarginalizationReport {
    pub n_draws: usize,
    /// Largest `|empirical − analytic| / se` over all entries.
    pub max_abs_z: f64,
    pub max_abs_error: f64,
    pub pass: bool,
}

pub fn check_marginal_covariance(
    state: &ModelState,
    config: &ModelConfig,
    n_draws: usize,
    z_limit: f64,
    seed: u64,
) -> Result<MarginalizationReport> {
    let analytic = marginal_covariance(state, config)?;
    let var = config.sigma_omega_sq()?;
    let k = state.gamma.ncols();
    let s = state.rank();
    let omega_sd: DVector<f64> = state.tau().map(|t| (var / t).sqrt());
    let sigma_sd = state.sigma_sq.map(f64::sqrt);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = DVector::<f64>::zeros(k);
    let mut outer = DMatrix::<f64>::zeros(k, k);
    let mut outer_sq = DMatrix::<f64>::zeros(k, k);
    let gt = state.gamma.transpose();
    for _ in 0..n_draws {
        let omega = DVector::from_fn(s, |h, _| omega_sd[h] * rng.sample::<f64, _>(StandardNormal));
        let mut y = &gt * omega;
        for j in 0..k {
            y[j] += sigma_sd[j] * rng.sample::<f64, _>(StandardNormal);
        }
        sum += &y;
        for i in 0..k {
            for j in 0..k {
                let p = y[i] * y[j];
                outer[(i, j)] += p;
                outer_sq[(i, j)] += p * p;
            }
        }
    }
    let n = n_draws as f64;
    let mean = &sum / n;
    let mut max_z: f64 = 0.0;
    let mut max_err: f64 = 0.0;
    for i in 0..k {
        for j in 0..k {
            let m = outer[(i, j)] / n;
            let emp = (outer[(i, j)] - n * mean[i] * mean[j]) / (n - 1.0);
            let se = ((outer_sq[(i, j)] / n - m * m).max(0.0) / n).sqrt();
            let err = (emp - analytic[(i, j)]).abs();
            max_err = max_err.max(err);
            max_z = max_z.max(if se > 0.0 { err / se } else if err > 0.0 { f64::INFINITY } else { 0.0 });
        }
    }
    Ok(MarginalizationReport {
        n_draws,
        max_abs_z: max_z,
        max_abs_error: max_err,
        pass: max_z < z_limit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    const DEFAULTS: ShrinkageHyper = ShrinkageHyper { a1: 3.0, a2: 4.0, nu: 3.0 };

    #[test]
    fn analytic_prediction_variance_default_prior() {
        // 3 · 30 · (1/2) / (5/6)
        assert_relative_eq!(prediction_variance(&DEFAULTS, &[1.0; 30]).unwrap(), 54.0, max_relative = 1e-14);
        assert_eq!(prediction_variance(&DEFAULTS, &[]).unwrap(), 0.0);
    }

    #[test]
    fn divergent_hyperparameters_are_rejected() {
        let h = ShrinkageHyper { a2: 3.0, ..DEFAULTS };
        let err = prediction_variance(&h, &[1.0]).unwrap_err();
        assert!(err.to_string().contains("a2 > 3"));
        assert!(check_prop1(&h, &[1.0], 50, 100, 0.05, Prop1Estimator::Raw, 0).is_err());
    }

    #[test]
    fn truncation_deficit_closed_form() {
        assert_relative_eq!(truncation_deficit(4.0, 3), 1.0 / 216.0, max_relative = 1e-14);
        assert_eq!(truncation_deficit(4.0, 0), 1.0);
        for s in 0..10 {
            assert!(truncation_deficit(4.0, s + 1) < truncation_deficit(4.0, s));
        }
        for a in [3.5, 4.0, 6.0, 10.0] {
            assert!(truncation_deficit(a + 0.5, 2) < truncation_deficit(a, 2));
        }
    }

    #[test]
    fn zero_covariates_zero_variance() {
        let r = check_prop1(&DEFAULTS, &[], 50, 1000, 0.05, Prop1Estimator::Raw, 1).unwrap();
        assert_eq!(r.empirical_value, 0.0);
        assert!(r.pass);
        let r = check_prop1(&DEFAULTS, &[], 50, 1000, 0.05, Prop1Estimator::Conditional, 1).unwrap();
        assert_eq!(r.empirical_value, 0.0);
    }

    #[test]
    fn prop2_monte_carlo_matches_closed_form() {
        for rank in 1..=2 {
            let r = check_prop2(&DEFAULTS, rank, 40, 200_000, 7).unwrap();
            assert!(r.pass, "rank {rank}: {r:?}");
        }
        let light = ShrinkageHyper { a2: 8.0, ..DEFAULTS };
        let r = check_prop2(&light, 3, 20, 200_000, 8).unwrap();
        assert_relative_eq!(r.analytic_value, 1.0 / 42f64.powi(3), max_relative = 1e-12);
        assert!(r.pass, "{r:?}");
        assert!(check_prop2(&DEFAULTS, 5, 5, 1000, 0).is_err());
    }

    #[test]
    fn marginal_covariance_monte_carlo() {
        use crate::model::{sample_prior, Dims, Variant};
        let cfg = ModelConfig {
            latent_snr: None,
            sigma_omega_sq: Some(2.0),
            rank: 2,
            ..ModelConfig::with_variant(Variant::LatentNoise)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let state = sample_prior(&cfg, &Dims::new(1, 2, 4, 2).unwrap(), &mut rng).unwrap();
        let r = check_marginal_covariance(&state, &cfg, 20_000, 5.0, 2).unwrap();
        assert!(r.pass, "{r:?}");
        assert!(r.max_abs_error < 0.5, "{r:?}");
    }

    #[test]
    fn too_short_truncation_is_rejected() {
        assert!(check_prop1(&DEFAULTS, &[1.0], 1, 1000, 0.05, Prop1Estimator::default(), 1).is_err());
    }

    #[test]
    fn prop1_monte_carlo_small() {
        let r = check_prop1(&DEFAULTS, &[1.0; 5], 50, 200_000, 0.1, Prop1Estimator::Conditional, 2).unwrap();
        assert_relative_eq!(r.analytic_value, 9.0, max_relative = 1e-12);
        assert!(r.relative_error() < 0.1, "{r:?}");
        // Light-tailed prior: the raw estimator has finite variance too.
        let light = ShrinkageHyper { a1: 6.0, a2: 6.0, nu: 12.0 };
        let r = check_prop1(&light, &[1.0; 5], 50, 200_000, 0.05, Prop1Estimator::Raw, 3).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn prop1_is_reproducible() {
        for est in [Prop1Estimator::Raw, Prop1Estimator::Conditional] {
            let a = check_prop1(&DEFAULTS, &[1.0; 3], 20, 20_000, 0.1, est, 5).unwrap();
            let b = check_prop1(&DEFAULTS, &[1.0; 3], 20, 20_000, 0.1, est, 5).unwrap();
            assert_eq!(a, b);
        }
    }
}
