//! Semantic-shift scoring from stored class priors, thresholding and AUROC.

use std::fmt;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::channel::ChannelConfig;
use crate::datasets::LabeledExample;
use crate::encoder_decoder::Predictor;
use crate::error::{Error, Result};
use crate::objectives::PriorTable;

/// Largest class-conditional log-density of `z` over all stored priors.
pub fn ood_score(z: &[f64], priors: &PriorTable) -> Result<f64> {
    if priors.is_empty() {
        return Err(Error::param("no class priors to score against"));
    }
    let mut best = f64::NEG_INFINITY;
    for p in priors.values() {
        best = best.max(p.log_density(z)?);
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    InDistribution,
    SemanticShift,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::InDistribution => "in_distribution",
            Verdict::SemanticShift => "semantic_shift",
        })
    }
}

/// A score equal to the threshold counts as in-distribution.
pub fn detect(score: f64, threshold: f64) -> Verdict {
    if score < threshold {
        Verdict::SemanticShift
    } else {
        Verdict::InDistribution
    }
}

/// Rank-based area under the ROC curve; ties count one half.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    if id_scores.is_empty() || ood_scores.is_empty() {
        return Err(Error::param("auroc needs nonempty score lists"));
    }
    if id_scores.iter().chain(ood_scores).any(|s| s.is_nan()) {
        return Err(Error::numeric("auroc got a NaN score"));
    }
    // sort the pooled scores and use midranks of tie groups
    let mut all: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (s, true))
        .chain(ood_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum_id = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_id += midrank * all[i..=j].iter().filter(|e| e.1).count() as f64;
        i = j + 1;
    }
    let (n1, n0) = (id_scores.len() as f64, ood_scores.len() as f64);
    Ok((rank_sum_id - n1 * (n1 + 1.0) / 2.0) / (n1 * n0))
}

/// Largest threshold that keeps at least `target_tpr` of `id_scores` in-distribution.
pub fn choose_threshold(id_scores: &[f64], target_tpr: f64) -> Result<f64> {
    if !(target_tpr > 0.0 && target_tpr <= 1.0) {
        return Err(Error::param(format!("target TPR must lie in (0, 1], got {target_tpr}")));
    }
    if id_scores.is_empty() {
        return Err(Error::param("cannot calibrate a threshold on zero scores"));
    }
    let mut sorted = id_scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let m = (target_tpr * sorted.len() as f64).ceil() as usize;
    Ok(sorted[m.clamp(1, sorted.len()) - 1])
}

/// Hook applied to each raw log-likelihood score before thresholding.
pub trait ScoreTransform: Send + Sync {
    fn transform(&self, score: f64, z: &[f64]) -> f64;
}

pub struct Identity;

impl ScoreTransform for Identity {
    fn transform(&self, score: f64, _z: &[f64]) -> f64 {
        score
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorState {
    pub priors: PriorTable,
    pub threshold: f64,
}

impl DetectorState {
    pub fn new(priors: PriorTable, threshold: f64) -> Result<Self> {
        if priors.is_empty() {
            return Err(Error::param("detector needs at least one class prior"));
        }
        let k = priors.values().next().map(|p| p.dim()).unwrap_or(0);
        if priors.values().any(|p| p.dim() != k) {
            return Err(Error::param("class priors disagree on latent dimension"));
        }
        Ok(Self { priors, threshold })
    }

    pub fn score(&self, z: &[f64], transform: &dyn ScoreTransform) -> Result<f64> {
        Ok(transform.transform(ood_score(z, &self.priors)?, z))
    }

    pub fn verdict(&self, score: f64) -> Verdict {
        detect(score, self.threshold)
    }
}

/// Scores of received latents: the encoder signal plus one channel draw per example.
pub fn score_dataset<P: Predictor + ?Sized>(
    predictor: &P,
    data: &[LabeledExample],
    channel: &ChannelConfig,
    priors: &PriorTable,
    transform: &dyn ScoreTransform,
    seed: u64,
) -> Result<Vec<f64>> {
    let amp = predictor.p_max().sqrt();
    let sigma = channel.noise_std();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(1024) {
        let refs: Vec<&LabeledExample> = chunk.iter().collect();
        let signal = predictor.signal(&refs)?;
        for row in signal.rows() {
            let z: Vec<f64> = row
                .iter()
                .map(|v| v.clamp(-amp, amp) + sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            out.push(transform.transform(ood_score(&z, priors)?, &z));
        }
    }
    Ok(out)
}

/// Write `sample_id,score,verdict` rows.
pub fn write_scores_csv<W: Write>(out: &mut W, scores: &[f64], threshold: f64) -> Result<()> {
    writeln!(out, "sample_id,score,verdict")?;
    for (i, &s) in scores.iter().enumerate() {
        writeln!(out, "{i},{s},{}", detect(s, threshold))?;
    }
    Ok(())
}
