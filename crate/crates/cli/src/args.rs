use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use latent_brrr::{ModelConfig, PsiMethod, Variant};

#[derive(Debug, Parser)]
#[command(name = "latent-brrr", version, about = "Latent-noise Bayesian reduced-rank regression")]
pub struct Cli {
    /// Worker threads (default: all cores). LATENT_BRRR_THREADS takes precedence.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic train/test pair.
    Simulate(SimulateArgs),
    /// Run the Gibbs sampler and summarise the posterior.
    Fit(FitArgs),
    /// Predict targets from a fitted posterior summary.
    Predict(PredictArgs),
    /// Cross-validate latent SNR and rank.
    Cv(CvArgs),
    /// Permutation test of association between covariates and targets.
    Assoc(AssocArgs),
    /// Monte-Carlo checks of the prior and the sampler.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// JSON simulation config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub var_signal: Option<f64>,
    #[arg(long)]
    pub var_structured: Option<f64>,
    #[arg(long)]
    pub var_diag: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    LatentNoise,
    IndependentNoise,
    NoNoise,
    Null,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::LatentNoise => Variant::LatentNoise,
            VariantArg::IndependentNoise => Variant::IndependentNoise,
            VariantArg::NoNoise => Variant::NoNoise,
            VariantArg::Null => Variant::Null,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PsiMethodArg {
    Fast,
    Naive,
}

impl From<PsiMethodArg> for PsiMethod {
    fn from(m: PsiMethodArg) -> Self {
        match m {
            PsiMethodArg::Fast => PsiMethod::Fast,
            PsiMethodArg::Naive => PsiMethod::Naive,
        }
    }
}

/// Data files plus model configuration shared by fit, cv and assoc.
#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Covariates CSV (header row, one sample per line).
    #[arg(long)]
    pub x: PathBuf,
    /// Targets CSV.
    #[arg(long)]
    pub y: PathBuf,
    /// JSON model config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub noise_rank: Option<usize>,
    #[arg(long, conflicts_with = "sigma_omega_sq")]
    pub latent_snr: Option<f64>,
    #[arg(long)]
    pub sigma_omega_sq: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub burn_in: Option<usize>,
    #[arg(long)]
    pub thin: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value = "fast")]
    pub psi_method: PsiMethodArg,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

impl ModelArgs {
    /// Config file (or defaults for the chosen variant) with flag overrides.
    pub fn apply(&self, base: Option<ModelConfig>) -> ModelConfig {
        let mut c = match (base, self.variant) {
            (Some(c), None) => c,
            (Some(mut c), Some(v)) => {
                c.variant = v.into();
                c
            }
            (None, v) => ModelConfig::with_variant(v.map_or(Variant::LatentNoise, Into::into)),
        };
        if c.variant != Variant::LatentNoise {
            c.latent_snr = None;
            c.sigma_omega_sq = None;
        }
        if let Some(r) = self.rank {
            c.rank = r;
        }
        if let Some(r) = self.noise_rank {
            c.noise_rank = Some(r);
        }
        if c.variant == Variant::IndependentNoise && c.noise_rank.is_none() {
            c.noise_rank = Some(c.rank);
        }
        if let Some(b) = self.latent_snr {
            c.latent_snr = Some(b);
            c.sigma_omega_sq = None;
        }
        if let Some(v) = self.sigma_omega_sq {
            c.sigma_omega_sq = Some(v);
            c.latent_snr = None;
        }
        if let Some(v) = self.iterations {
            c.iterations = v;
        }
        if let Some(v) = self.burn_in {
            c.burn_in = v;
        }
        if let Some(v) = self.thin {
            c.thin = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        c
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Also write every retained state to samples.bin.
    #[arg(long)]
    pub samples: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// posterior_summary.json written by `fit`.
    #[arg(long)]
    pub summary: PathBuf,
    #[arg(long)]
    pub x: PathBuf,
    /// Observed targets; when given, eval.json scores the predictions.
    #[arg(long)]
    pub y: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct CvArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// JSON plan; flags override its fields.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub beta_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub rank_grid: Option<Vec<usize>>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub cv_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct AssocArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 100)]
    pub n_perm: usize,
    #[arg(long, default_value_t = 0)]
    pub perm_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EstimatorArg {
    Conditional,
    Raw,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Prior prediction variance against its closed form.
    #[arg(long)]
    pub prop1: bool,
    /// Truncation deficit against its closed form.
    #[arg(long)]
    pub prop2: bool,
    /// Joint-distribution test of the sampler.
    #[arg(long)]
    pub geweke: bool,
    /// Covariance of simulated targets with X = 0.
    #[arg(long)]
    pub marginal: bool,
    #[arg(long, default_value_t = 3.0)]
    pub a1: f64,
    #[arg(long, default_value_t = 4.0)]
    pub a2: f64,
    #[arg(long, default_value_t = 3.0)]
    pub nu: f64,
    /// Number of unit-variance covariates.
    #[arg(long, default_value_t = 30)]
    pub p: usize,
    #[arg(long, default_value_t = 1_000_000)]
    pub draws: usize,
    #[arg(long, default_value_t = 50)]
    pub truncation: usize,
    #[arg(long, default_value_t = 0.05)]
    pub tolerance: f64,
    #[arg(long, value_enum, default_value = "conditional")]
    pub estimator: EstimatorArg,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    pub ranks: Vec<usize>,
    #[arg(long, default_value_t = 4_000_000)]
    pub prop2_draws: usize,
    #[arg(long, default_value_t = 100_000)]
    pub geweke_iter: usize,
    #[arg(long, default_value_t = 100_000)]
    pub marginal_draws: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}
