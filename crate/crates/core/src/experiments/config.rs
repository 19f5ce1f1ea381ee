//! TOML experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::LabelMode;
use crate::encoder_decoder::EncoderArch;
use crate::error::{Error, Result};
use crate::objectives::Objective;
use crate::trainer::TrainConfig;

/// Environment variable that overrides the data root.
pub const DATA_ENV: &str = "TASKCOMM_DATA";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub methods: Vec<Objective>,
    /// Run directory; `runs/<name>` when absent. The CLI `--out` flag wins.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Append label-oracle rows to the PSNR table.
    #[serde(default = "yes")]
    pub oracle_row: bool,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub sweep: SweepConfig,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding one subdirectory per dataset; `data` when absent.
    #[serde(default)]
    pub root: Option<PathBuf>,
    #[serde(default = "mnist")]
    pub dataset: String,
    /// Semantic-shift images, e.g. `fashion`. Enables the AUROC column.
    #[serde(default)]
    pub ood_dataset: Option<String>,
    /// One bias ratio per training environment.
    pub train_bias: Vec<f64>,
    pub test_bias: f64,
    pub label_noise: f64,
    #[serde(default)]
    pub labels: LabelMode,
    /// Examples per training environment; 0 splits the training set evenly.
    #[serde(default)]
    pub train_size: usize,
    /// 0 uses the whole test split.
    #[serde(default)]
    pub test_size: usize,
    /// 0 uses the whole semantic-shift test split.
    #[serde(default)]
    pub ood_size: usize,
}

fn mnist() -> String {
    "mnist".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub arch: EncoderArch,
    #[serde(default = "one")]
    pub p_max: f64,
}

fn one() -> f64 {
    1.0
}

/// Training hyperparameters shared by every sweep point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    #[serde(default)]
    pub batch_size: usize,
    #[serde(default = "d_noise_samples")]
    pub noise_samples: usize,
    #[serde(default = "d_beta")]
    pub beta: f64,
    #[serde(default = "d_lambda")]
    pub lambda: f64,
    #[serde(default = "d_margin")]
    pub margin: f64,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub warmup_fraction: f64,
    #[serde(default = "yes")]
    pub penalty_rescale: bool,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "d_anchors")]
    pub triplet_anchors_per_domain: usize,
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default = "d_repeats")]
    pub eval_repeats: usize,
}

fn d_noise_samples() -> usize {
    TrainConfig::default().noise_samples
}
fn d_beta() -> f64 {
    TrainConfig::default().beta
}
fn d_lambda() -> f64 {
    TrainConfig::default().lambda
}
fn d_margin() -> f64 {
    TrainConfig::default().margin
}
fn d_lr() -> f64 {
    TrainConfig::default().learning_rate
}
fn d_anchors() -> usize {
    TrainConfig::default().triplet_anchors_per_domain
}
fn d_repeats() -> usize {
    1
}

impl TrainSection {
    pub fn to_train_config(&self, objective: Objective, psnr_db: f64, p_max: f64, seed: u64) -> TrainConfig {
        TrainConfig {
            objective,
            epochs: self.epochs,
            batch_size: self.batch_size,
            noise_samples: self.noise_samples,
            beta: self.beta,
            lambda: self.lambda,
            margin: self.margin,
            p_max,
            psnr_db,
            learning_rate: self.learning_rate,
            warmup_fraction: self.warmup_fraction,
            penalty_rescale: self.penalty_rescale,
            weight_decay: self.weight_decay,
            triplet_anchors_per_domain: self.triplet_anchors_per_domain,
            eval_every: self.eval_every,
            eval_repeats: self.eval_repeats,
            seed,
        }
    }
}

/// Which parameters a sweep point reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSelection {
    /// Parameters after the last epoch.
    #[default]
    Final,
    /// Best evaluated epoch by training-domain accuracy.
    TrainDomain,
    /// Best evaluated epoch by test-domain accuracy. Peeks at test labels.
    TestDomain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub latent_dims: Vec<usize>,
    pub train_psnr: Vec<f64>,
    pub test_psnr: Vec<f64>,
    /// Fraction of in-distribution samples the stored threshold keeps.
    #[serde(default = "d_tpr")]
    pub target_tpr: f64,
    #[serde(default)]
    pub selection: ModelSelection,
}

fn d_tpr() -> f64 {
    0.95
}

fn unit(field: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::config(field, format!("must lie in [0, 1], got {v}")))
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(toml_field(&e), e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path)?;
        Ok((Self::parse(&text)?, text))
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty()
            || !self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
        {
            return Err(Error::config("name", "must be nonempty and use only [A-Za-z0-9._-]"));
        }
        if self.methods.is_empty() {
            return Err(Error::config("methods", "must list at least one method"));
        }
        let d = &self.data;
        if d.train_bias.is_empty() {
            return Err(Error::config("data.train_bias", "must list at least one environment"));
        }
        for b in &d.train_bias {
            unit("data.train_bias", *b)?;
        }
        unit("data.test_bias", d.test_bias)?;
        unit("data.label_noise", d.label_noise)?;
        if d.train_bias.len() < 2 {
            if let Some(m) = self.methods.iter().find(|m| m.penalized()) {
                return Err(Error::config(
                    "methods",
                    format!("{m} needs at least two training environments"),
                ));
            }
        }
        let s = &self.sweep;
        if s.latent_dims.is_empty() || s.latent_dims.contains(&0) {
            return Err(Error::config(
                "sweep.latent_dims",
                "must be a nonempty list of positive sizes",
            ));
        }
        if s.train_psnr.is_empty() || s.train_psnr.iter().any(|p| !p.is_finite()) {
            return Err(Error::config(
                "sweep.train_psnr",
                "must be a nonempty list of finite values",
            ));
        }
        if s.test_psnr.is_empty() || s.test_psnr.iter().any(|p| !p.is_finite()) {
            return Err(Error::config(
                "sweep.test_psnr",
                "must be a nonempty list of finite values",
            ));
        }
        if !(s.target_tpr > 0.0 && s.target_tpr <= 1.0) {
            return Err(Error::config("sweep.target_tpr", "must lie in (0, 1]"));
        }
        if !(self.model.p_max > 0.0 && self.model.p_max.is_finite()) {
            return Err(Error::config("model.p_max", "must be positive"));
        }
        for &psnr in &s.train_psnr {
            self.train
                .to_train_config(self.methods[0], psnr, self.model.p_max, self.seed)
                .validate()
                .map_err(|e| match e {
                    Error::Config { field, reason } => Error::config(format!("train.{field}"), reason),
                    other => other,
                })?;
        }
        Ok(())
    }

    /// Data root: the environment override, then the config, then `data`.
    pub fn data_root(&self) -> PathBuf {
        std::env::var_os(DATA_ENV)
            .map(PathBuf::from)
            .or_else(|| self.data.root.clone())
            .unwrap_or_else(|| PathBuf::from("data"))
    }

    pub fn default_output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .unwrap_or_else(|| Path::new("runs").join(&self.name))
    }
}

/// Best-effort name of the key a TOML error points at.
fn toml_field(e: &toml::de::Error) -> String {
    let msg = e.message();
    // unknown keys: "unknown field `lamda`, expected ..."
    if let Some(rest) = msg.strip_prefix("unknown field `") {
        if let Some(end) = rest.find('`') {
            return rest[..end].to_string();
        }
    }
    if let Some(rest) = msg.strip_prefix("missing field `") {
        if let Some(end) = rest.find('`') {
            return rest[..end].to_string();
        }
    }
    "config".into()
}
