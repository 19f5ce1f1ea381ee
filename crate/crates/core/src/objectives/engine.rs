//! One forward/backward routine shared by every objective.
//!
//! Rows of the per-domain latent matrices are ordered `(l, i)`: noise draw
//! `l` of example `i` sits at row `l * n + i`.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis, NdFloat};
use rand::Rng;
use rand_distr::StandardNormal;

use super::{DomainTerms, LossBreakdown, LossWeights, Objective, PriorTable};
use crate::channel::ChannelConfig;
use crate::encoder_decoder::layers::{cast, log_softmax, Linear};
use crate::encoder_decoder::Model;
use crate::error::{Error, Result};

/// Inputs and labels of one domain's batch.
#[derive(Debug, Clone, Copy)]
pub struct DomainBatch<'a, F> {
    pub x: ArrayView2<'a, F>,
    pub labels: &'a [usize],
}

/// Every random quantity an objective evaluation consumes, drawn up front so
/// the loss is a deterministic function of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraws<F> {
    /// Standard normal reparameterization draws, `(L * n) x k` per domain;
    /// empty for deterministic objectives.
    pub latent: Vec<Array2<F>>,
    /// Standard normal channel draws, `(L * n) x k` per domain.
    pub channel: Vec<Array2<F>>,
    /// Per domain, the example indices used as triplet anchors.
    pub anchors: Vec<Vec<usize>>,
}

fn normal_matrix<F: NdFloat, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<F> {
    Array2::from_shape_simple_fn((rows, cols), || cast(rng.sample::<f64, _>(StandardNormal)))
}

impl<F: NdFloat> NoiseDraws<F> {
    pub fn sample<R: Rng + ?Sized>(
        sizes: &[usize],
        latent_dim: usize,
        noise_samples: usize,
        stochastic: bool,
        anchors_per_domain: Option<usize>,
        rng: &mut R,
    ) -> Self {
        let mut latent = Vec::new();
        let mut channel = Vec::new();
        let mut anchors = Vec::new();
        for &n in sizes {
            let rows = noise_samples * n;
            latent.push(if stochastic {
                normal_matrix(rows, latent_dim, rng)
            } else {
                Array2::zeros((0, latent_dim))
            });
            channel.push(normal_matrix(rows, latent_dim, rng));
            anchors.push(match anchors_per_domain {
                Some(a) if a < n => {
                    let mut idx = rand::seq::index::sample(rng, n, a).into_vec();
                    idx.sort_unstable();
                    idx
                }
                _ => (0..n).collect(),
            });
        }
        Self {
            latent,
            channel,
            anchors,
        }
    }
}

/// The loss plus the first-draw received latents of every domain (used for
/// prior refresh).
#[derive(Debug, Clone)]
pub struct Evaluation<F> {
    pub loss: LossBreakdown,
    pub received: Vec<Array2<F>>,
}

/// Head quantities for one block of received latents.
pub(crate) struct HeadPass<F> {
    /// softmax - onehot
    pub delta: Array2<F>,
    pub probs: Array2<F>,
    pub distortion: f64,
    /// Cross-entropy gradient w.r.t. the head weight and bias.
    pub g_w: Array2<F>,
    pub g_b: Array1<F>,
    pub value: f64,
}

pub(crate) fn penalty_terms<F: NdFloat>(z: ArrayView2<F>, labels: &[usize], head: &Linear<F>) -> Result<HeadPass<F>> {
    let m = z.nrows();
    if m == 0 || labels.len() != m {
        return Err(Error::param("need one label per latent row and at least one row"));
    }
    let c = head.output_dim();
    let logp = log_softmax(head.forward(z).view());
    let probs = logp.mapv(|v| v.exp());
    let mut delta = probs.clone();
    let mut ce = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::param(format!("label {y} out of range for {c} classes")));
        }
        delta[[i, y]] -= F::one();
        ce -= logp[[i, y]].to_f64().unwrap_or(f64::NAN);
    }
    let inv_m: F = cast(1.0 / m as f64);
    let g_w = z.t().dot(&delta) * inv_m;
    let g_b = delta.sum_axis(Axis(0)) * inv_m;
    let sq = |a: F| a.to_f64().unwrap_or(f64::NAN).powi(2);
    let value = g_w.iter().map(|&v| sq(v)).sum::<f64>() + g_b.iter().map(|&v| sq(v)).sum::<f64>();
    Ok(HeadPass {
        delta,
        probs,
        distortion: ce / m as f64,
        g_w,
        g_b,
        value,
    })
}

/// Hard-in-batch triplet loss over `z` (f64), optionally with its gradient.
pub(crate) fn triplet(
    z: ArrayView2<f64>,
    labels: &[usize],
    margin: f64,
    want_grad: bool,
) -> (f64, bool, Option<Array2<f64>>) {
    let n = z.nrows();
    let mut grad = want_grad.then(|| Array2::<f64>::zeros(z.raw_dim()));
    let d2 = |a: usize, b: usize| -> f64 {
        z.row(a)
            .iter()
            .zip(z.row(b).iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum()
    };
    let mut total = 0.0;
    let mut valid = 0usize;
    let mut active = Vec::new();
    for a in 0..n {
        let (mut pos, mut neg) = (None::<(f64, usize)>, None::<(f64, usize)>);
        for b in 0..n {
            if b == a {
                continue;
            }
            let d = d2(a, b);
            let slot = if labels[b] == labels[a] { &mut pos } else { &mut neg };
            if slot.map_or(true, |(best, _)| d < best) {
                *slot = Some((d, b));
            }
        }
        if let (Some((dp, p)), Some((dn, q))) = (pos, neg) {
            valid += 1;
            let h = dp - dn + margin;
            if h > 0.0 {
                total += h;
                active.push((a, p, q));
            }
        }
    }
    if valid == 0 {
        return (0.0, true, grad);
    }
    if let Some(g) = grad.as_mut() {
        let w = 1.0 / valid as f64;
        for (a, p, q) in active {
            for j in 0..z.ncols() {
                let (za, zp, zq) = (z[[a, j]], z[[p, j]], z[[q, j]]);
                g[[a, j]] += w * 2.0 * (zq - zp);
                g[[p, j]] -= w * 2.0 * (za - zp);
                g[[q, j]] += w * 2.0 * (za - zq);
            }
        }
    }
    (total / valid as f64, false, grad)
}

/// Evaluate `objective` on per-domain batches; when `grad` is given, add the
/// gradient of the total into it.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<F: NdFloat>(
    model: &Model<F>,
    batches: &[DomainBatch<'_, F>],
    objective: Objective,
    weights: &LossWeights,
    channel: &ChannelConfig,
    priors: Option<&PriorTable>,
    draws: &NoiseDraws<F>,
    grad: Option<&mut Model<F>>,
) -> Result<Evaluation<F>> {
    if batches.is_empty()
        || batches
            .iter()
            .any(|b| b.labels.is_empty() || b.labels.len() != b.x.nrows())
    {
        return Err(Error::param(
            "every domain batch needs matching, nonempty inputs and labels",
        ));
    }
    let views: Vec<ArrayView2<F>> = batches.iter().map(|b| b.x).collect();
    let x = concatenate(Axis(0), &views).map_err(|e| Error::param(format!("inputs: {e}")))?;
    let features = model.prepare_input(x.view())?;
    let labels: Vec<&[usize]> = batches.iter().map(|b| b.labels).collect();
    evaluate_features(
        model,
        features.view(),
        &labels,
        objective,
        weights,
        channel,
        priors,
        draws,
        grad,
    )
}

/// As [`evaluate`], on the stacked output of [`Model::prepare_input`] for all
/// domains in order; `labels[d]` covers domain `d`'s rows.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_features<F: NdFloat>(
    model: &Model<F>,
    features: ArrayView2<F>,
    labels: &[&[usize]],
    objective: Objective,
    weights: &LossWeights,
    channel: &ChannelConfig,
    priors: Option<&PriorTable>,
    draws: &NoiseDraws<F>,
    mut grad: Option<&mut Model<F>>,
) -> Result<Evaluation<F>> {
    weights.validate()?;
    if labels.is_empty() || labels.iter().any(|l| l.is_empty()) {
        return Err(Error::param("every domain needs a nonempty batch"));
    }
    if labels.iter().map(|l| l.len()).sum::<usize>() != features.nrows() {
        return Err(Error::param("feature rows do not match the label count"));
    }
    if draws.channel.len() != labels.len() || draws.anchors.len() != labels.len() {
        return Err(Error::param("noise draws do not match the number of domains"));
    }
    if objective.class_priors() && priors.is_none() {
        return Err(Error::param("class priors required for this objective"));
    }
    let k = model.latent_dim();
    let l_draws = weights.noise_samples;
    let beta = if objective.has_rate() { weights.beta } else { 0.0 };
    let lambda = if objective.penalized() { weights.lambda } else { 0.0 };
    let stochastic = objective.stochastic();
    let amp: F = cast(model.amplitude());
    let sigma: F = cast(channel.noise_std());
    let noise_var = channel.noise_var;

    let (post, cache) = model.encode_features(features)?;
    let total_n = features.nrows();

    let mut d_mean = Array2::<F>::zeros(post.mean.raw_dim());
    let mut d_std = Array2::<F>::zeros(post.std.raw_dim());
    let mut loss = LossBreakdown {
        beta,
        lambda,
        ..Default::default()
    };
    let mut received = Vec::with_capacity(labels.len());
    // per domain: (offset, received latents, gradient wrt received latents)
    let mut blocks: Vec<(usize, Array2<F>, Array2<F>, Array2<F>)> = Vec::new();
    let mut offset = 0;
    for (d, y) in labels.iter().enumerate() {
        let n = y.len();
        let rows = l_draws * n;
        if draws.channel[d].dim() != (rows, k) || (stochastic && draws.latent[d].dim() != (rows, k)) {
            return Err(Error::param(format!("noise draws for domain {d} have the wrong shape")));
        }
        let mean = post.mean.slice(s![offset..offset + n, ..]);
        let std = post.std.slice(s![offset..offset + n, ..]);
        let mut z = Array2::<F>::zeros((rows, k));
        for l in 0..l_draws {
            let mut blk = z.slice_mut(s![l * n..(l + 1) * n, ..]);
            blk.assign(&mean);
            if stochastic {
                blk += &(&std * &draws.latent[d].slice(s![l * n..(l + 1) * n, ..]));
            }
        }
        // power projection; gradient passes only where the clamp was inactive
        let mask = z.mapv(|v| if v.abs() <= amp { F::one() } else { F::zero() });
        z.mapv_inplace(|v| v.max(-amp).min(amp));
        let z_hat = &z + &(&draws.channel[d] * sigma);

        let repeated: Vec<usize> = (0..l_draws).flat_map(|_| y.iter().copied()).collect();
        let hp = penalty_terms(z_hat.view(), &repeated, &model.head.linear)?;
        let p_d = n as f64 / total_n as f64;

        // rate term
        let mut kl_sum = 0.0;
        let want_kl_grad = grad.is_some() && beta > 0.0;
        let kl_scale = beta * p_d / n as f64;
        if stochastic {
            for i in 0..n {
                let m: Vec<f64> = mean.row(i).iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
                let sd: Vec<f64> = std.row(i).iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
                let var: Vec<f64> = sd.iter().map(|s| s * s + noise_var).collect();
                if objective.class_priors() {
                    let y = y[i];
                    let prior = priors
                        .and_then(|p| p.get(&y))
                        .ok_or_else(|| Error::param(format!("missing class prior for class {y}")))?;
                    kl_sum += super::kl_diag_to_class_prior(&var, &m, prior)?;
                    if want_kl_grad {
                        let pr = prior.precision();
                        let mu = prior.mean();
                        for a in 0..k {
                            let dm: f64 = (0..k).map(|c| pr[[a, c]] * (m[c] - mu[c])).sum();
                            let dv = 0.5 * (pr[[a, a]] - 1.0 / var[a]);
                            d_mean[[offset + i, a]] += cast(kl_scale * dm);
                            d_std[[offset + i, a]] += cast(kl_scale * dv * 2.0 * sd[a]);
                        }
                    }
                } else {
                    kl_sum += super::kl_diag_to_std_normal(&var, &m)?;
                    if want_kl_grad {
                        for a in 0..k {
                            let dv = 0.5 * (1.0 - 1.0 / var[a]);
                            d_mean[[offset + i, a]] += cast(kl_scale * m[a]);
                            d_std[[offset + i, a]] += cast(kl_scale * dv * 2.0 * sd[a]);
                        }
                    }
                }
            }
        }
        let kl_d = kl_sum / n as f64;
        loss.per_domain.push(DomainTerms {
            weight: p_d,
            distortion: hp.distortion,
            kl: kl_d,
            penalty: hp.value,
        });
        loss.distortion += p_d * hp.distortion;
        loss.kl += p_d * kl_d;
        loss.penalty += p_d * hp.value;
        received.push(z_hat.slice(s![0..n, ..]).to_owned());

        let mut dz_hat = Array2::<F>::zeros((rows, k));
        if let Some(g) = grad.as_deref_mut() {
            let w = &model.head.linear.weight;
            let inv_m = 1.0 / rows as f64;
            let mut d_logits = &hp.delta * cast::<F>(p_d * inv_m);
            if lambda > 0.0 {
                let two: F = cast(2.0);
                let a_mat = &hp.g_w * two;
                let a_vec = &hp.g_b * two;
                let mut v = z_hat.dot(&a_mat);
                v += &a_vec;
                let pv = (&hp.probs * &v).sum_axis(Axis(1)).insert_axis(Axis(1));
                let gmat = &hp.probs * &(&v - &pv);
                let s_pen: F = cast(lambda * p_d * inv_m);
                d_logits = d_logits + &gmat * s_pen;
                dz_hat += &(hp.delta.dot(&a_mat.t()) * s_pen);
            }
            dz_hat += &d_logits.dot(&w.t());
            ndarray::linalg::general_mat_mul(F::one(), &z_hat.t(), &d_logits, F::one(), &mut g.head.linear.weight);
            g.head.linear.bias += &d_logits.sum_axis(Axis(0));
        }
        blocks.push((offset, z_hat, dz_hat, mask));
        offset += n;
    }

    if objective.class_priors() {
        let mut pooled = Vec::new();
        let mut pooled_labels = Vec::new();
        for d in 0..blocks.len() {
            for &i in &draws.anchors[d] {
                pooled.push((d, i));
                pooled_labels.push(labels[d][i]);
            }
        }
        let zp = Array2::from_shape_fn((pooled.len(), k), |(r, j)| {
            let (d, i) = pooled[r];
            blocks[d].1[[i, j]].to_f64().unwrap_or(f64::NAN)
        });
        let (value, degenerate, g) = triplet(zp.view(), &pooled_labels, weights.margin, grad.is_some());
        if degenerate {
            log::warn!("triplet term has no valid anchor (single-class batch)");
        }
        loss.triplet = value;
        loss.triplet_degenerate = degenerate;
        if let Some(g) = g {
            for (r, &(d, i)) in pooled.iter().enumerate() {
                for j in 0..k {
                    blocks[d].2[[i, j]] += cast(g[[r, j]]);
                }
            }
        }
    }
    loss.total = loss.recomputed_total();
    if !loss.total.is_finite() {
        return Err(Error::numeric("loss is not finite"));
    }

    if let Some(g) = grad {
        for (d, (offset, _, dz_hat, mask)) in blocks.iter().enumerate() {
            let n = labels[d].len();
            let dz = dz_hat * mask;
            for l in 0..l_draws {
                let blk = dz.slice(s![l * n..(l + 1) * n, ..]);
                let mut dm = d_mean.slice_mut(s![*offset..offset + n, ..]);
                dm += &blk;
                if stochastic {
                    let mut ds = d_std.slice_mut(s![*offset..offset + n, ..]);
                    ds += &(&blk * &draws.latent[d].slice(s![l * n..(l + 1) * n, ..]));
                }
            }
        }
        model.encoder_backward(&cache, d_mean.view(), d_std.view(), g);
    }
    Ok(Evaluation { loss, received })
}
