//! Test-set scoring, the mean-only baseline, proportion of target variance
//! explained (PTVE) and permutation association tests.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::gibbs::{run_chain_with, ChainOptions};
use crate::linalg::{column_means, covariance_trace};
use crate::model::{Centering, Dataset, ModelConfig, PosteriorSamples};

/// Overall and per-target mean squared error.
pub fn mse(predictions: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<(f64, DVector<f64>)> {
    if predictions.shape() != y.shape() {
        return Err(Error::dims(
            "mse",
            format!("{}x{}", y.nrows(), y.ncols()),
            format!("{}x{}", predictions.nrows(), predictions.ncols()),
        ));
    }
    if y.nrows() == 0 {
        return Err(Error::Data("mse of an empty set".into()));
    }
    let n = y.nrows() as f64;
    let per = DVector::from_iterator(
        y.ncols(),
        (predictions - y).column_iter().map(|c| c.norm_squared() / n),
    );
    Ok((per.mean(), per))
}

/// Predicts the training column means.
#[derive(Debug, Clone, PartialEq)]
pub struct NullModel {
    pub means: DVector<f64>,
}

impl NullModel {
    pub fn fit(y: &DMatrix<f64>) -> Result<Self> {
        if y.nrows() == 0 {
            return Err(Error::Data("null model needs at least one training row".into()));
        }
        Ok(NullModel { means: column_means(y) })
    }

    pub fn predict(&self, n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, self.means.len(), |_, j| self.means[j])
    }
}

/// A chain fitted on column-centred data; predictions add the intercept back.
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub samples: PosteriorSamples,
    pub centering: Centering,
    pub timings: BTreeMap<String, f64>,
}

impl FittedModel {
    pub fn fit(data: &Dataset, config: &ModelConfig, options: &ChainOptions) -> Result<Self> {
        let (centered, centering) = data.centered();
        let trace = run_chain_with(&centered, config, options)?;
        Ok(FittedModel {
            samples: trace.retained,
            centering,
            timings: trace.timings,
        })
    }

    pub fn predict(&self, x_new: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x_new.ncols() != self.centering.x_mean.len() {
            return Err(Error::dims("predict covariates", self.centering.x_mean.len(), x_new.ncols()));
        }
        let offset = self.centering.y_mean.transpose() - self.centering.x_mean.transpose() * &self.samples.theta_mean;
        let mut pred = self.samples.predict(x_new)?;
        for mut row in pred.row_iter_mut() {
            row += &offset;
        }
        Ok(pred)
    }
}

/// `trace(Cov(X·Θ̄)) / trace(Cov(Y))` with the posterior-mean coefficients.
pub fn ptve(samples: &PosteriorSamples, data: &Dataset) -> Result<f64> {
    ptve_theta(&samples.theta_mean, data)
}

pub fn ptve_theta(theta: &DMatrix<f64>, data: &Dataset) -> Result<f64> {
    if theta.nrows() != data.n_covariates() || theta.ncols() != data.n_targets() {
        return Err(Error::dims(
            "ptve coefficients",
            format!("{}x{}", data.n_covariates(), data.n_targets()),
            format!("{}x{}", theta.nrows(), theta.ncols()),
        ));
    }
    let total = covariance_trace(&data.y);
    if !(total > 0.0) {
        return Err(Error::Data("targets have zero total variance".into()));
    }
    Ok(covariance_trace(&(&data.x * theta)) / total)
}

/// `n` indices shuffled with `seed` and cut into `folds` contiguous blocks
/// whose sizes differ by at most one. Returns the held-out indices per fold.
pub fn kfold_partition(n: usize, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 || folds > n {
        return Err(Error::Config(format!("cannot split {n} samples into {folds} folds")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / folds, n % folds);
    let mut out = Vec::with_capacity(folds);
    let mut start = 0;
    for f in 0..folds {
        let len = base + usize::from(f < extra);
        out.push(idx[start..start + len].to_vec());
        start += len;
    }
    Ok(out)
}

/// Indices not in `held_out`, ascending.
pub fn complement(n: usize, held_out: &[usize]) -> Vec<usize> {
    let mut mask = vec![true; n];
    for &i in held_out {
        mask[i] = false;
    }
    (0..n).filter(|&i| mask[i]).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub mse_total: f64,
    pub mse_per_target: Vec<f64>,
    /// Targets with test MSE below the null model's.
    pub n_better_than_null: usize,
    /// MSE over the targets that at least one compared method predicts
    /// better than the null model.
    pub mse_predictable: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub null: EvalReport,
    pub methods: Vec<(String, EvalReport)>,
}

/// Score each method's test predictions against the null model. Every
/// prediction matrix must match `y_test`.
pub fn compare_predictions(
    null_pred: &DMatrix<f64>,
    predictions: &[(String, DMatrix<f64>)],
    y_test: &DMatrix<f64>,
) -> Result<Comparison> {
    let (_, null_per) = mse(null_pred, y_test)?;
    let mut scored = Vec::with_capacity(predictions.len());
    for (name, p) in predictions {
        let (total, per) = mse(p, y_test)?;
        scored.push((name.clone(), total, per));
    }
    let k = y_test.ncols();
    let predictable: Vec<usize> = (0..k)
        .filter(|&j| scored.iter().any(|(_, _, per)| per[j] < null_per[j]))
        .collect();
    let report = |total: f64, per: &DVector<f64>| EvalReport {
        mse_total: total,
        mse_per_target: per.iter().copied().collect(),
        n_better_than_null: (0..k).filter(|&j| per[j] < null_per[j]).count(),
        mse_predictable: if predictable.is_empty() {
            f64::NAN
        } else {
            predictable.iter().map(|&j| per[j]).sum::<f64>() / predictable.len() as f64
        },
    };
    Ok(Comparison {
        null: report(null_per.mean(), &null_per),
        methods: scored.iter().map(|(n, t, per)| (n.clone(), report(*t, per))).collect(),
    })
}

/// Fit every configuration on `train` and score on `test`.
pub fn compare_methods(
    train: &Dataset,
    test: &Dataset,
    methods: &[(String, ModelConfig)],
    options: &ChainOptions,
) -> Result<Comparison> {
    let predictions: Vec<(String, DMatrix<f64>)> = methods
        .par_iter()
        .map(|(name, cfg)| {
            let fit = FittedModel::fit(train, cfg, options)?;
            Ok((name.clone(), fit.predict(&test.x)?))
        })
        .collect::<Result<_>>()?;
    let null = NullModel::fit(&train.y)?.predict(test.n_samples());
    compare_predictions(&null, &predictions, &test.y)
}

#[derive(Debug, Clone, Serialize)]
pub struct AssocResult {
    pub observed_ptve: f64,
    pub perm_ptves: Vec<f64>,
    /// Fraction of permutations with PTVE strictly below the observed one.
    pub rank_fraction: f64,
    /// Permutations whose first fit failed and were refitted.
    pub n_retried: usize,
}

fn fit_ptve(data: &Dataset, config: &ModelConfig, options: &ChainOptions) -> Result<f64> {
    let fit = FittedModel::fit(data, config, options)?;
    ptve(&fit.samples, data)
}

/// Refit with the rows of `X` permuted (targets fixed) `n_perm` times.
///
/// Each permutation draws its row order and chain seed from `rng` up front,
/// so results do not depend on scheduling. A failed fit is retried once
/// with a fresh seed; a second failure aborts the test.
pub fn permutation_test<R: Rng + ?Sized>(
    data: &Dataset,
    config: &ModelConfig,
    options: &ChainOptions,
    n_perm: usize,
    rng: &mut R,
) -> Result<AssocResult> {
    if n_perm == 0 {
        return Err(Error::Config("n_perm must be at least 1".into()));
    }
    let observed = fit_ptve(data, config, options)?;
    let n = data.n_samples();
    let jobs: Vec<(Vec<usize>, u64, u64)> = (0..n_perm)
        .map(|_| {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(rng);
            (order, rng.random(), rng.random())
        })
        .collect();
    let results: Vec<(f64, bool)> = jobs
        .par_iter()
        .enumerate()
        .map(|(i, (order, seed, retry_seed))| {
            let permuted = Dataset::new(data.x.select_rows(order), data.y.clone())?;
            match fit_ptve(&permuted, &ModelConfig { seed: *seed, ..config.clone() }, options) {
                Ok(v) => Ok((v, false)),
                Err(_) => fit_ptve(&permuted, &ModelConfig { seed: *retry_seed, ..config.clone() }, options)
                    .map(|v| (v, true))
                    .map_err(|e| Error::numerical(format!("permutation {i} failed twice: {e}"))),
            }
        })
        .collect::<Result<_>>()?;
    let perm_ptves: Vec<f64> = results.iter().map(|r| r.0).collect();
    let below = perm_ptves.iter().filter(|v| **v < observed).count();
    Ok(AssocResult {
        observed_ptve: observed,
        rank_fraction: below as f64 / n_perm as f64,
        n_retried: results.iter().filter(|r| r.1).count(),
        perm_ptves,
    })
}

/// One-sample Kolmogorov-Smirnov statistic against Uniform(0, 1).
pub fn ks_uniform(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, x)| {
            let x = x.clamp(0.0, 1.0);
            ((i as f64 + 1.0) / n - x).max(x - i as f64 / n)
        })
        .fold(0.0, f64::max)
}
