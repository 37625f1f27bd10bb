//! The batch commands behind the `mitseg` binary.
//!
//! Each `cmd_*` function validates its inputs completely before touching
//! the filesystem, so a rejected invocation leaves no output behind.

mod infer;
mod report;
mod train;

use std::path::{Path, PathBuf};

pub use infer::{cmd_eval, cmd_predict, evaluate, load_model, overlay, predict_label, score_image, EvalArgs, EvalOutcome, PredictArgs};
pub use report::{cmd_analyze, cmd_cost, cmd_synth, render_histogram, write_histogram_csv};
pub use train::{cmd_train, StepLog, TrainArgs, TrainSummary, Trainer};

use crate::config::RunConfig;
use crate::data::normalize_image;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Environment variable that replaces the configured output root.
pub const OUT_ENV: &str = "MITSEG_OUT";

/// `--out` beats `$MITSEG_OUT`, which beats the configured directory.
pub fn resolve_out_dir(flag: Option<&Path>, configured: &Path) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    match std::env::var_os(OUT_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => configured.to_path_buf(),
    }
}

pub(crate) fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Exclusive ownership of an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub const FILE: &'static str = "train.lock";

    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(Self::FILE);
        let mut f = std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => Error::Config(format!(
                    "{} is locked by another training run (remove {} if that run is gone)",
                    dir.display(),
                    path.display()
                )),
                _ => Error::io(&path, e),
            })?;
        use std::io::Write;
        writeln!(f, "{}", std::process::id()).map_err(|e| Error::io(&path, e))?;
        Ok(Self { path })
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Model input for a raw 0..255 image, using the run's normalization.
pub fn prepare_input(image: &Tensor<f32>, run: Option<&RunConfig>) -> Tensor<f32> {
    let spec = run.map(|r| r.augment.clone()).unwrap_or_default();
    normalize_image(image, &spec.mean, &spec.std)
}

/// Parse `"0.5,1.0,1.5"`.
pub fn parse_scales(text: &str) -> Result<Vec<f64>> {
    let scales: Vec<f64> = text
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad scale {s:?}"))))
        .collect::<Result<_>>()?;
    if scales.is_empty() || scales.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Config(format!("scales {text:?} must be positive numbers")));
    }
    Ok(scales)
}
