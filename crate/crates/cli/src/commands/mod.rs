mod assoc;
mod cv;
mod fit;
mod simulate;
mod verify;

use std::path::{Path, PathBuf};

use latent_brrr::{Dataset, ModelConfig};

use crate::args::ModelArgs;
use crate::error::CliResult;
use crate::io::{read_json, read_matrix};

pub use assoc::assoc;
pub use cv::cv;
pub use fit::{fit, predict, PosteriorSummary, SUMMARY_FILE};
pub use simulate::simulate;
pub use verify::verify;

pub(crate) fn load_dataset(x: &Path, y: &Path) -> CliResult<Dataset> {
    let (xm, xn) = read_matrix(x)?;
    let (ym, yn) = read_matrix(y)?;
    Ok(Dataset::new(xm, ym)?.with_names(Some(xn), Some(yn)))
}

/// Validated model configuration from the config file and flags.
pub(crate) fn model_config(args: &ModelArgs) -> CliResult<ModelConfig> {
    let base = args.config.as_deref().map(read_json::<ModelConfig>).transpose()?;
    let config = args.apply(base);
    config.validate()?;
    Ok(config)
}

pub(crate) fn model_inputs(args: &ModelArgs) -> Vec<&Path> {
    let mut v: Vec<&Path> = vec![&args.x, &args.y];
    if let Some(c) = &args.config {
        v.push(c);
    }
    v
}

pub(crate) fn out_file(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}
