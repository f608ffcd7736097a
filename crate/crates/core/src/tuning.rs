//! K-fold cross-validation over the latent signal-to-noise ratio and rank.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{complement, kfold_partition, mse, FittedModel};
use crate::gibbs::ChainOptions;
use crate::model::{Dataset, ModelConfig, Variant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvPlan {
    pub beta_grid: Vec<f64>,
    pub rank_grid: Vec<usize>,
    pub n_folds: usize,
    pub seed: u64,
}

impl Default for CvPlan {
    fn default() -> Self {
        CvPlan {
            beta_grid: vec![1.0 / 5.0, 1.0 / 7.5, 1.0 / 10.0, 1.0 / 12.5, 1.0 / 15.0],
            rank_grid: vec![2, 4, 6],
            n_folds: 10,
            seed: 0,
        }
    }
}

/// One grid point. `beta` is `None` for variants without latent noise.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvScore {
    pub beta: Option<f64>,
    pub rank: usize,
    /// Mean of the fold MSEs; `None` if any fold failed.
    pub cv_mse: Option<f64>,
    pub fold_mse: Vec<Option<f64>>,
    pub failure: Option<String>,
}

impl CvPlan {
    pub fn validate(&self, variant: Variant) -> Result<()> {
        if self.rank_grid.is_empty() || self.rank_grid.contains(&0) {
            return Err(Error::Config("rank grid must be non-empty with positive ranks".into()));
        }
        if variant == Variant::LatentNoise && self.beta_grid.is_empty() {
            return Err(Error::Config("beta grid must be non-empty for latent_noise".into()));
        }
        if self.beta_grid.iter().any(|b| !(*b > 0.0) || !b.is_finite()) {
            return Err(Error::Config("beta grid values must be positive and finite".into()));
        }
        if self.n_folds < 2 {
            return Err(Error::Config(format!("n_folds must be at least 2, got {}", self.n_folds)));
        }
        Ok(())
    }

    fn grid(&self, variant: Variant) -> Vec<(Option<f64>, usize)> {
        let betas: Vec<Option<f64>> = if variant == Variant::LatentNoise {
            self.beta_grid.iter().map(|b| Some(*b)).collect()
        } else {
            vec![None]
        };
        self.rank_grid
            .iter()
            .flat_map(|&r| betas.iter().map(move |&b| (b, r)))
            .collect()
    }
}

/// Lower score first; ties go to the smaller rank, then the larger β.
fn preference(a: &CvScore, b: &CvScore) -> Ordering {
    let score = |s: &CvScore| s.cv_mse.unwrap_or(f64::INFINITY);
    score(a)
        .total_cmp(&score(b))
        .then(a.rank.cmp(&b.rank))
        .then(b.beta.unwrap_or(0.0).total_cmp(&a.beta.unwrap_or(0.0)))
}

fn configure(base: &ModelConfig, beta: Option<f64>, rank: usize) -> ModelConfig {
    let mut c = base.clone();
    c.rank = rank;
    if c.variant == Variant::IndependentNoise && c.noise_rank.is_none() {
        c.noise_rank = Some(rank);
    }
    if let Some(b) = beta {
        c.latent_snr = Some(b);
        c.sigma_omega_sq = None;
    }
    c
}

/// Score every grid point by mean held-out MSE and return the best
/// configuration. Ties go to the smaller rank, then the larger β.
pub fn cross_validate(
    data: &Dataset,
    base: &ModelConfig,
    plan: &CvPlan,
    options: &ChainOptions,
) -> Result<(ModelConfig, Vec<CvScore>)> {
    plan.validate(base.variant)?;
    let n = data.n_samples();
    let folds = kfold_partition(n, plan.n_folds, plan.seed)?;
    let smallest_train = folds.iter().map(|f| n - f.len()).min().unwrap_or(0);
    if smallest_train < 2 {
        return Err(Error::Config(format!(
            "{n} samples in {} folds leaves {smallest_train} training rows",
            plan.n_folds
        )));
    }
    let grid = plan.grid(base.variant);
    for &(beta, rank) in &grid {
        configure(base, beta, rank).validate()?;
    }
    let jobs: Vec<(usize, usize)> = (0..grid.len()).flat_map(|g| (0..folds.len()).map(move |f| (g, f))).collect();
    let results: Vec<std::result::Result<f64, String>> = jobs
        .par_iter()
        .map(|&(g, f)| {
            let (beta, rank) = grid[g];
            let cfg = configure(base, beta, rank);
            let held = &folds[f];
            let train = data.select_rows(&complement(n, held));
            let valid = data.select_rows(held);
            FittedModel::fit(&train, &cfg, options)
                .and_then(|m| m.predict(&valid.x))
                .and_then(|p| mse(&p, &valid.y))
                .map(|(total, _)| total)
                .map_err(|e| e.to_string())
        })
        .collect();

    let mut table = Vec::with_capacity(grid.len());
    for (g, &(beta, rank)) in grid.iter().enumerate() {
        let fold_res = &results[g * folds.len()..(g + 1) * folds.len()];
        let fold_mse: Vec<Option<f64>> = fold_res.iter().map(|r| r.as_ref().ok().copied()).collect();
        let failure = fold_res.iter().enumerate().find_map(|(f, r)| r.as_ref().err().map(|e| format!("fold {f}: {e}")));
        let cv_mse = if failure.is_none() {
            Some(fold_mse.iter().flatten().sum::<f64>() / folds.len() as f64)
        } else {
            None
        };
        table.push(CvScore {
            beta,
            rank,
            cv_mse,
            fold_mse,
            failure,
        });
    }
    let best = table
        .iter()
        .filter(|s| s.cv_mse.is_some())
        .min_by(|a, b| preference(a, b))
        .ok_or_else(|| Error::numerical("every cross-validation grid point failed"))?;
    Ok((configure(base, best.beta, best.rank), table))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::standard_normal_matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn data(n: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = standard_normal_matrix(n, 3, &mut rng);
        let y = &x * standard_normal_matrix(3, 4, &mut rng) * 0.5 + standard_normal_matrix(n, 4, &mut rng);
        Dataset::new(x, y).unwrap()
    }

    fn quick() -> ModelConfig {
        ModelConfig {
            iterations: 40,
            burn_in: 20,
            thin: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn singleton_grid_returns_that_point() {
        let plan = CvPlan {
            beta_grid: vec![0.01],
            rank_grid: vec![2],
            n_folds: 3,
            seed: 0,
        };
        let (best, table) = cross_validate(&data(30), &quick(), &plan, &ChainOptions::default()).unwrap();
        assert_eq!(best.rank, 2);
        assert_eq!(best.latent_snr, Some(0.01));
        assert_eq!(table.len(), 1);
        assert!(table[0].cv_mse.unwrap().is_finite());
        assert_eq!(table[0].fold_mse.len(), 3);
    }

    #[test]
    fn table_has_row_per_grid_point() {
        let plan = CvPlan {
            beta_grid: vec![0.1, 0.2],
            rank_grid: vec![1, 2],
            n_folds: 2,
            seed: 3,
        };
        let (best, table) = cross_validate(&data(24), &quick(), &plan, &ChainOptions::default()).unwrap();
        assert_eq!(table.len(), 4);
        let min = table.iter().filter_map(|s| s.cv_mse).fold(f64::INFINITY, f64::min);
        let chosen = table.iter().find(|s| s.rank == best.rank && s.beta == best.latent_snr).unwrap();
        assert_eq!(chosen.cv_mse, Some(min));
    }

    #[test]
    fn beta_grid_ignored_without_latent_noise() {
        let base = ModelConfig {
            iterations: 30,
            burn_in: 10,
            thin: 5,
            ..ModelConfig::with_variant(Variant::NoNoise)
        };
        let plan = CvPlan {
            rank_grid: vec![1],
            n_folds: 2,
            ..Default::default()
        };
        let (best, table) = cross_validate(&data(20), &base, &plan, &ChainOptions::default()).unwrap();
        assert_eq!(table.len(), 1);
        assert_eq!(table[0].beta, None);
        assert_eq!(best.latent_snr, None);
    }

    #[test]
    fn ties_prefer_small_rank_then_large_beta() {
        // Null variant ignores rank and beta, so every grid point scores the same.
        let base = ModelConfig {
            iterations: 10,
            burn_in: 5,
            thin: 1,
            ..ModelConfig::with_variant(Variant::Null)
        };
        let plan = CvPlan {
            rank_grid: vec![3, 1, 2],
            n_folds: 2,
            ..Default::default()
        };
        let (best, table) = cross_validate(&data(20), &base, &plan, &ChainOptions::default()).unwrap();
        assert!(table.windows(2).all(|w| w[0].cv_mse == w[1].cv_mse));
        assert_eq!(best.rank, 1);

        let score = |beta, rank, cv_mse| CvScore { beta: Some(beta), rank, cv_mse, fold_mse: vec![], failure: None };
        assert_eq!(preference(&score(0.1, 2, Some(1.0)), &score(0.2, 2, Some(1.0))), Ordering::Greater);
        assert_eq!(preference(&score(0.1, 2, Some(1.0)), &score(0.2, 3, Some(1.0))), Ordering::Less);
        assert_eq!(preference(&score(0.1, 4, Some(0.5)), &score(0.2, 1, Some(1.0))), Ordering::Less);
        assert_eq!(preference(&score(0.1, 1, None), &score(0.2, 4, Some(9.0))), Ordering::Greater);
    }

    #[test]
    fn too_small_folds_are_rejected() {
        let plan = CvPlan {
            n_folds: 10,
            ..Default::default()
        };
        assert!(matches!(
            cross_validate(&data(5), &quick(), &plan, &ChainOptions::default()),
            Err(Error::Config(_))
        ));
        let plan = CvPlan {
            n_folds: 1,
            ..Default::default()
        };
        assert!(cross_validate(&data(30), &quick(), &plan, &ChainOptions::default()).is_err());
    }
}
