//! TOML run configuration for the `train` command.
//!
//! ```toml
//! [data]
//! train = "ellipse.vaed"          # relative to this file
//!
//! [model]
//! kind = "mlp"                    # or "conv2d"
//! latent_dim = 8
//! hidden = [128, 64]              # mlp only
//! # channels = [8, 16]; kernel = 3; stride = 2   (conv2d only)
//!
//! [objective]
//! divergence = "mmd"              # or "kl"
//! lambda = "auto"                 # or a number
//! recon = "mse"                   # "gaussian_nll", "dssim"
//!
//! [train]
//! epochs = 400
//! batch_size = 64
//! learning_rate = 1e-4
//! seed = 0
//!
//! [output]
//! dir = "runs/mmd"
//! ```
//!
//! Unknown keys anywhere are rejected. Omitted keys take the library defaults.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::networks::{Architecture, ArchitectureSpec};
use crate::objective::{DivergenceKind, ObjectiveConfig, ReconKind, SsimParams};
use crate::trainer::TrainConfig;

/// Environment variable that replaces `train.seed` when set.
pub const SEED_ENV: &str = "VAE_SEED";

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    #[serde(default)]
    pub objective: ObjectiveSection,
    #[serde(default)]
    pub train: TrainSection,
    pub output: OutputSection,
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train: PathBuf,
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Mlp,
    Conv2d,
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub latent_dim: usize,
    pub hidden: Option<Vec<usize>>,
    pub channels: Option<Vec<usize>>,
    pub kernel: Option<usize>,
    pub stride: Option<usize>,
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
enum AutoKeyword {
    Auto,
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq)]
#[serde(untagged)]
enum LambdaRepr {
    Value(f64),
    Keyword(AutoKeyword),
}

/// `lambda = 2.5` or `lambda = "auto"`.
#[derive(Clone, Copy, Debug, Deserialize, PartialEq)]
#[serde(from = "LambdaRepr")]
pub enum LambdaSetting {
    Fixed(f64),
    Auto,
}

impl From<LambdaRepr> for LambdaSetting {
    fn from(r: LambdaRepr) -> Self {
        match r {
            LambdaRepr::Value(v) => LambdaSetting::Fixed(v),
            LambdaRepr::Keyword(AutoKeyword::Auto) => LambdaSetting::Auto,
        }
    }
}

impl Default for LambdaSetting {
    fn default() -> Self {
        LambdaSetting::Fixed(1.0)
    }
}

#[derive(Clone, Debug, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSection {
    pub divergence: Option<DivergenceKind>,
    #[serde(default)]
    pub lambda: LambdaSetting,
    pub recon: Option<ReconKind>,
    pub mc_samples: Option<usize>,
    pub bandwidths: Option<Vec<f64>>,
    pub dynamic_range: Option<f64>,
    pub ssim_window: Option<usize>,
    pub ssim_c1: Option<f64>,
    pub ssim_c2: Option<f64>,
}

#[derive(Clone, Debug, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub eps: Option<f64>,
    pub seed: Option<u64>,
    pub collapse_kl_threshold: Option<f64>,
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

/// A configuration with paths made absolute and every setting validated.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedRun {
    pub data_path: PathBuf,
    pub output_dir: PathBuf,
    pub model: ModelSection,
    pub train: TrainConfig,
}

impl ResolvedRun {
    /// Architecture for samples of the given shape (taken from the dataset).
    pub fn architecture(&self, input_shape: &[usize]) -> Result<ArchitectureSpec> {
        let m = &self.model;
        let mut spec = match m.kind {
            ModelKind::Mlp => ArchitectureSpec::mlp(input_shape.to_vec(), m.latent_dim),
            ModelKind::Conv2d => ArchitectureSpec::conv(input_shape.to_vec(), m.latent_dim),
        };
        match &mut spec.arch {
            Architecture::Mlp { hidden } => {
                if let Some(h) = &m.hidden {
                    *hidden = h.clone();
                }
            }
            Architecture::Conv2d {
                channels,
                kernel,
                stride,
            } => {
                if let Some(c) = &m.channels {
                    *channels = c.clone();
                }
                if let Some(k) = m.kernel {
                    *kernel = k;
                }
                if let Some(s) = m.stride {
                    *stride = s;
                }
            }
        }
        spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(spec)
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads, resolves and validates a config file. `seed_override` (usually
    /// from [`SEED_ENV`]) wins over `train.seed`.
    pub fn load(path: impl AsRef<Path>, seed_override: Option<u64>) -> Result<ResolvedRun> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text)?.resolve(base, seed_override)
    }

    pub fn resolve(&self, base: &Path, seed_override: Option<u64>) -> Result<ResolvedRun> {
        let data_path = base.join(&self.data.train);
        if !data_path.is_file() {
            return Err(Error::Config(format!(
                "training data {} does not exist",
                data_path.display()
            )));
        }
        let output_dir = base.join(&self.output.dir);
        if output_dir.exists() && !output_dir.is_dir() {
            return Err(Error::Config(format!(
                "output path {} exists and is not a directory",
                output_dir.display()
            )));
        }

        let m = &self.model;
        if m.latent_dim == 0 {
            return Err(Error::Config("model.latent_dim must be at least 1".into()));
        }
        let conv_only = m.channels.is_some() || m.kernel.is_some() || m.stride.is_some();
        match m.kind {
            ModelKind::Mlp if conv_only => {
                return Err(Error::Config("channels/kernel/stride apply to conv2d models only".into()))
            }
            ModelKind::Conv2d if m.hidden.is_some() => {
                return Err(Error::Config("hidden applies to mlp models only".into()))
            }
            _ => {}
        }

        let o = &self.objective;
        let defaults = TrainConfig::default();
        let dynamic_range = o.dynamic_range.unwrap_or(1.0);
        let ssim_defaults = SsimParams::for_dynamic_range(dynamic_range);
        let (lambda, auto_lambda) = match o.lambda {
            LambdaSetting::Fixed(v) => (v, false),
            LambdaSetting::Auto => (1.0, true),
        };
        let objective = ObjectiveConfig {
            divergence: o.divergence.unwrap_or(DivergenceKind::Kl),
            lambda,
            recon: o.recon.unwrap_or(ReconKind::Mse),
            mc_samples: o.mc_samples.unwrap_or(1),
            mmd_bandwidths: o.bandwidths.clone(),
            ssim: SsimParams {
                window: o.ssim_window.unwrap_or(ssim_defaults.window),
                c1: o.ssim_c1.unwrap_or(ssim_defaults.c1),
                c2: o.ssim_c2.unwrap_or(ssim_defaults.c2),
            },
            dynamic_range,
        };
        let t = &self.train;
        let train = TrainConfig {
            epochs: t.epochs.unwrap_or(defaults.epochs),
            batch_size: t.batch_size.unwrap_or(defaults.batch_size),
            learning_rate: t.learning_rate.unwrap_or(defaults.learning_rate),
            adam_beta1: t.beta1.unwrap_or(defaults.adam_beta1),
            adam_beta2: t.beta2.unwrap_or(defaults.adam_beta2),
            adam_eps: t.eps.unwrap_or(defaults.adam_eps),
            seed: seed_override.or(t.seed).unwrap_or(defaults.seed),
            objective,
            auto_lambda,
            collapse_kl_threshold: t
                .collapse_kl_threshold
                .unwrap_or(defaults.collapse_kl_threshold),
        };
        train.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(ResolvedRun {
            data_path,
            output_dir,
            model: m.clone(),
            train,
        })
    }
}

/// Parses [`SEED_ENV`] if present.
pub fn seed_from_env() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(Error::Config(format!("{SEED_ENV}: {e}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
[data]
train = "d.vaed"
[model]
kind = "mlp"
latent_dim = 4
[output]
dir = "out"
"#;

    fn with_data() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("d.vaed"), b"x").unwrap();
        dir
    }

    #[test]
    fn minimal_config_takes_defaults() {
        let dir = with_data();
        let run = RunConfig::parse(BASE).unwrap().resolve(dir.path(), None).unwrap();
        assert_eq!(run.data_path, dir.path().join("d.vaed"));
        assert_eq!(run.train.epochs, TrainConfig::default().epochs);
        assert!(!run.train.auto_lambda);
        let spec = run.architecture(&[2]).unwrap();
        assert_eq!(spec, ArchitectureSpec::mlp(vec![2], 4));
    }

    #[test]
    fn lambda_auto_and_number() {
        let dir = with_data();
        let auto = format!("{BASE}[objective]\ndivergence = \"mmd\"\nlambda = \"auto\"\n");
        let run = RunConfig::parse(&auto).unwrap().resolve(dir.path(), None).unwrap();
        assert!(run.train.auto_lambda);
        assert_eq!(run.train.objective.divergence, DivergenceKind::Mmd);
        let fixed = format!("{BASE}[objective]\nlambda = 100\n");
        let run = RunConfig::parse(&fixed).unwrap().resolve(dir.path(), None).unwrap();
        assert_eq!(run.train.objective.lambda, 100.0);
        assert!(RunConfig::parse(&format!("{BASE}[objective]\nlambda = \"big\"\n")).is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = format!("{BASE}[train]\nepochz = 3\n");
        assert!(matches!(RunConfig::parse(&bad), Err(Error::Config(_))));
        assert!(RunConfig::parse(&format!("{BASE}[extra]\na = 1\n")).is_err());
    }

    #[test]
    fn missing_data_file_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::parse(BASE).unwrap();
        assert!(matches!(cfg.resolve(dir.path(), None), Err(Error::Config(_))));
    }

    #[test]
    fn seed_override_wins() {
        let dir = with_data();
        let text = format!("{BASE}[train]\nseed = 5\n");
        let cfg = RunConfig::parse(&text).unwrap();
        assert_eq!(cfg.resolve(dir.path(), None).unwrap().train.seed, 5);
        assert_eq!(cfg.resolve(dir.path(), Some(9)).unwrap().train.seed, 9);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let dir = with_data();
        for extra in ["[train]\nlearning_rate = -1.0\n", "[objective]\nssim_window = 4\n"] {
            let cfg = RunConfig::parse(&format!("{BASE}{extra}")).unwrap();
            assert!(matches!(cfg.resolve(dir.path(), None), Err(Error::Config(_))), "{extra}");
        }
        let conv_on_mlp = BASE.replace("latent_dim = 4", "latent_dim = 4\nkernel = 3");
        assert!(RunConfig::parse(&conv_on_mlp).unwrap().resolve(dir.path(), None).is_err());
    }

    #[test]
    fn conv_schedule_is_checked_against_input() {
        let dir = with_data();
        let text = BASE.replace("\"mlp\"", "\"conv2d\"");
        let run = RunConfig::parse(&text).unwrap().resolve(dir.path(), None).unwrap();
        assert!(run.architecture(&[1, 16, 16]).is_ok());
        assert!(matches!(run.architecture(&[1, 10, 10]), Err(Error::Config(_))));
    }
}
