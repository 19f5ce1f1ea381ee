//! Training losses: KL rate terms, cross-entropy distortion, the invariance
//! gradient penalty, the triplet term and their assemblies.

mod engine;
mod prior;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

pub use engine::{evaluate, evaluate_features, DomainBatch, Evaluation, NoiseDraws};
pub use prior::{cholesky, ClassPrior, RIDGE_FLOOR, RIDGE_SCALE};

use crate::channel::ChannelConfig;
use crate::encoder_decoder::layers::Linear;
use crate::encoder_decoder::Model;
use crate::error::{Error, Result};

/// Class index to prior.
pub type PriorTable = BTreeMap<usize, ClassPrior>;

/// Objective selector. Each variant fixes which terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Deterministic encoder, cross-entropy only.
    #[serde(rename = "deepjscc")]
    DeepJscc,
    /// Stochastic encoder, cross-entropy plus KL to a standard normal.
    Vib,
    /// Deterministic encoder, cross-entropy plus the invariance penalty.
    Irm,
    /// Vib plus the invariance penalty.
    Vife,
    /// Stochastic encoder with class-conditional priors and a triplet term.
    Vlfe,
    /// Vlfe plus the invariance penalty.
    Combined,
}

impl Objective {
    pub const ALL: [Objective; 6] = [
        Objective::DeepJscc,
        Objective::Vib,
        Objective::Irm,
        Objective::Vife,
        Objective::Vlfe,
        Objective::Combined,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Objective::DeepJscc => "deepjscc",
            Objective::Vib => "vib",
            Objective::Irm => "irm",
            Objective::Vife => "vife",
            Objective::Vlfe => "vlfe",
            Objective::Combined => "combined",
        }
    }

    /// Whether the latent is sampled from the posterior (otherwise the mean is sent).
    pub fn stochastic(self) -> bool {
        !matches!(self, Objective::DeepJscc | Objective::Irm)
    }

    /// Whether `beta` multiplies a KL term.
    pub fn has_rate(self) -> bool {
        self.stochastic()
    }

    pub fn penalized(self) -> bool {
        matches!(self, Objective::Irm | Objective::Vife | Objective::Combined)
    }

    pub fn class_priors(self) -> bool {
        matches!(self, Objective::Vlfe | Objective::Combined)
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Objective::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| Error::param(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub beta: f64,
    pub lambda: f64,
    /// Triplet margin `alpha`.
    pub margin: f64,
    /// Channel-noise draws per datapoint.
    pub noise_samples: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta: 1e-3,
            lambda: 1e4,
            margin: 0.2,
            noise_samples: 5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("beta", self.beta), ("lambda", self.lambda), ("margin", self.margin)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, format!("must be finite and >= 0, got {v}")));
            }
        }
        if self.noise_samples == 0 {
            return Err(Error::config("noise_samples", "must be >= 1"));
        }
        Ok(())
    }
}

/// Per-domain values of the audited components.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DomainTerms {
    pub weight: f64,
    pub distortion: f64,
    pub kl: f64,
    pub penalty: f64,
}

/// An assembled loss together with the components it was built from.
///
/// `total == distortion + beta * kl + lambda * penalty + triplet`, where
/// `distortion`, `kl` and `penalty` are the domain-weighted sums of
/// `per_domain` and `beta`, `lambda` are the effective multipliers for the
/// selected objective.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub distortion: f64,
    pub kl: f64,
    pub penalty: f64,
    pub triplet: f64,
    pub beta: f64,
    pub lambda: f64,
    pub per_domain: Vec<DomainTerms>,
    /// Set when no anchor had both a same-class and an other-class partner.
    pub triplet_degenerate: bool,
}

impl LossBreakdown {
    pub fn recomputed_total(&self) -> f64 {
        self.distortion + self.beta * self.kl + self.lambda * self.penalty + self.triplet
    }
}

fn check_var_mean(var: &[f64], mean: &[f64]) -> Result<()> {
    if var.len() != mean.len() {
        return Err(Error::param("variance and mean lengths differ"));
    }
    if var.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::param("variances must be positive"));
    }
    Ok(())
}

/// `KL(N(m, diag v) || N(0, I))`.
pub fn kl_diag_to_std_normal(var: &[f64], mean: &[f64]) -> Result<f64> {
    check_var_mean(var, mean)?;
    Ok(0.5 * var.iter().zip(mean).map(|(v, m)| m * m + v - 1.0 - v.ln()).sum::<f64>())
}

/// `KL(N(m, diag v) || N(mu_c, Sigma_c))`.
pub fn kl_diag_to_class_prior(var: &[f64], mean: &[f64], prior: &ClassPrior) -> Result<f64> {
    check_var_mean(var, mean)?;
    if prior.dim() != mean.len() {
        return Err(Error::param("prior dimension differs from posterior"));
    }
    let p = prior.precision();
    let trace: f64 = var.iter().enumerate().map(|(i, v)| p[[i, i]] * v).sum();
    let maha = prior.mahalanobis_sq(mean)?;
    let k = mean.len() as f64;
    Ok(0.5 * (trace + maha - k + prior.log_det() - var.iter().map(|v| v.ln()).sum::<f64>()))
}

/// Mean negative log-probability of the labels.
pub fn distortion(log_probs: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    if log_probs.nrows() != labels.len() || labels.is_empty() {
        return Err(Error::param("need one label per row and at least one row"));
    }
    let mut s = 0.0;
    for (row, &y) in log_probs.rows().into_iter().zip(labels) {
        s -= *row
            .get(y)
            .ok_or_else(|| Error::param(format!("label {y} out of range")))?;
    }
    Ok(s / labels.len() as f64)
}

/// `sum_d p(d) ||grad_phi CE_d||^2` for a linear head, with `p(d)`
/// proportional to the number of rows in each domain.
pub fn irm_penalty(domains: &[(ArrayView2<f64>, &[usize])], head: &Linear<f64>) -> Result<f64> {
    if domains.is_empty() {
        return Err(Error::param("penalty needs at least one domain"));
    }
    let total: usize = domains.iter().map(|(z, _)| z.nrows()).sum();
    let mut out = 0.0;
    for (z, y) in domains {
        let terms = engine::penalty_terms(*z, y, head)?;
        out += z.nrows() as f64 / total as f64 * terms.value;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripletLoss {
    pub value: f64,
    pub degenerate: bool,
}

/// Hard-in-batch triplet loss with every row as an anchor.
pub fn triplet_loss(latents: ArrayView2<f64>, labels: &[usize], margin: f64) -> Result<TripletLoss> {
    if latents.nrows() != labels.len() {
        return Err(Error::param("need one label per latent"));
    }
    let (value, degenerate, _) = engine::triplet(latents, labels, margin, false);
    Ok(TripletLoss { value, degenerate })
}

fn assemble(
    model: &Model<f64>,
    batches: &[DomainBatch<'_, f64>],
    objective: Objective,
    weights: &LossWeights,
    channel: &ChannelConfig,
    priors: Option<&PriorTable>,
    draws: &NoiseDraws<f64>,
) -> Result<LossBreakdown> {
    Ok(evaluate(model, batches, objective, weights, channel, priors, draws, None)?.loss)
}

/// Cross-entropy plus `beta` times KL to a standard normal.
pub fn vib_loss(
    model: &Model<f64>,
    batches: &[DomainBatch<'_, f64>],
    weights: &LossWeights,
    channel: &ChannelConfig,
    draws: &NoiseDraws<f64>,
) -> Result<LossBreakdown> {
    assemble(model, batches, Objective::Vib, weights, channel, None, draws)
}

/// Vib plus `lambda` times the invariance penalty.
pub fn vife_loss(
    model: &Model<f64>,
    batches: &[DomainBatch<'_, f64>],
    weights: &LossWeights,
    channel: &ChannelConfig,
    draws: &NoiseDraws<f64>,
) -> Result<LossBreakdown> {
    assemble(model, batches, Objective::Vife, weights, channel, None, draws)
}

/// Cross-entropy plus `beta` times KL to the class priors plus the triplet term.
pub fn vlfe_loss(
    model: &Model<f64>,
    batches: &[DomainBatch<'_, f64>],
    weights: &LossWeights,
    channel: &ChannelConfig,
    priors: &PriorTable,
    draws: &NoiseDraws<f64>,
) -> Result<LossBreakdown> {
    assemble(model, batches, Objective::Vlfe, weights, channel, Some(priors), draws)
}

/// Vlfe plus `lambda` times the invariance penalty.
pub fn combined_loss(
    model: &Model<f64>,
    batches: &[DomainBatch<'_, f64>],
    weights: &LossWeights,
    channel: &ChannelConfig,
    priors: &PriorTable,
    draws: &NoiseDraws<f64>,
) -> Result<LossBreakdown> {
    assemble(
        model,
        batches,
        Objective::Combined,
        weights,
        channel,
        Some(priors),
        draws,
    )
}

/// Standard-normal priors for classes `0..num_classes`.
pub fn standard_priors(num_classes: usize, k: usize) -> PriorTable {
    (0..num_classes).map(|c| (c, ClassPrior::standard_normal(k))).collect()
}

/// Stack rows into a matrix; handy for small hand-built instances.
pub fn rows_to_matrix(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    let k = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != k) {
        return Err(Error::param("ragged rows"));
    }
    Ok(Array2::from_shape_fn((rows.len(), k), |(i, j)| rows[i][j]))
}
