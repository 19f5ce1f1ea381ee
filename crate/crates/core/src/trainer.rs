//! Training loop, class-prior refresh, evaluation and seeding.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayD, ArrayView2, NdFloat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::ChannelConfig;
use crate::datasets::{batch_indices, LabeledExample};
use crate::encoder_decoder::layers::cast;
use crate::encoder_decoder::{input_matrix, Model, Predictor};
use crate::error::{Error, Result};
use crate::objectives::{
    evaluate, evaluate_features, standard_priors, ClassPrior, DomainBatch, LossWeights, NoiseDraws, Objective,
    PriorTable,
};

/// Deterministic child seed from a master seed and a path of labels.
pub fn derive_seed(master: u64, path: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    for p in path {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: Objective,
    pub epochs: usize,
    /// Examples drawn from each domain per update; 0 means the whole domain.
    pub batch_size: usize,
    pub noise_samples: usize,
    pub beta: f64,
    pub lambda: f64,
    pub margin: f64,
    pub p_max: f64,
    pub psnr_db: f64,
    pub learning_rate: f64,
    /// Fraction of epochs trained with `lambda = 0` before the penalty switches on.
    pub warmup_fraction: f64,
    /// Divide the loss by `lambda` whenever `lambda > 1`.
    pub penalty_rescale: bool,
    /// Coefficient of the squared-norm penalty on encoder weight matrices.
    pub weight_decay: f64,
    /// Triplet anchors drawn per domain and update; 0 uses every example.
    pub triplet_anchors_per_domain: usize,
    /// Accuracy is measured every this many epochs (and at the last epoch); 0 disables it.
    pub eval_every: usize,
    pub eval_repeats: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            objective: Objective::Vife,
            epochs: 10,
            batch_size: 256,
            noise_samples: w.noise_samples,
            beta: w.beta,
            lambda: w.lambda,
            margin: w.margin,
            p_max: 1.0,
            psnr_db: 10.0,
            learning_rate: 1e-3,
            warmup_fraction: 0.1,
            penalty_rescale: true,
            weight_decay: 0.0,
            triplet_anchors_per_domain: 256,
            eval_every: 1,
            eval_repeats: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            beta: self.beta,
            lambda: self.lambda,
            margin: self.margin,
            noise_samples: self.noise_samples,
        }
    }

    pub fn channel(&self) -> Result<ChannelConfig> {
        ChannelConfig::from_psnr(self.p_max, self.psnr_db)
    }

    pub fn warmup_epochs(&self) -> usize {
        (self.warmup_fraction * self.epochs as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_weights().validate()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::config("warmup_fraction", "must lie in [0, 1]"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be >= 0"));
        }
        if self.eval_repeats == 0 {
            return Err(Error::config("eval_repeats", "must be >= 1"));
        }
        if !self.psnr_db.is_finite() {
            return Err(Error::config("psnr_db", "must be finite"));
        }
        self.channel().map_err(|e| Error::config("p_max", e.to_string()))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lambda: f64,
    pub loss: f64,
    pub distortion: f64,
    pub kl: f64,
    pub penalty: f64,
    pub triplet: f64,
    pub train_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectedEpoch {
    pub epoch: usize,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    pub final_priors: PriorTable,
    /// Best evaluated epoch by train-domain accuracy.
    pub best_by_train: Option<SelectedEpoch>,
    /// Best evaluated epoch by test-domain accuracy (uses test labels).
    pub best_by_test: Option<SelectedEpoch>,
    pub wall_clock_s: f64,
}

impl RunRecord {
    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for e in &self.epochs {
            s.push_str(&serde_json::to_string(e)?);
            s.push('\n');
        }
        Ok(s)
    }
}

pub struct TrainOutcome<F> {
    pub model: Model<F>,
    pub priors: PriorTable,
    pub record: RunRecord,
    /// Parameters at [`RunRecord::best_by_train`].
    pub best_by_train: Option<Model<F>>,
    /// Parameters at [`RunRecord::best_by_test`].
    pub best_by_test: Option<Model<F>>,
}

/// First-order adaptive-moment optimizer.
pub struct Adam<F> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
}

impl<F: NdFloat> Adam<F> {
    pub fn new(model: &Model<F>, learning_rate: f64) -> Self {
        let zeros: Vec<ArrayD<F>> = model
            .tensors()
            .iter()
            .map(|(_, t)| ArrayD::zeros(t.raw_dim()))
            .collect();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, model: &mut Model<F>, grad: &Model<F>) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let step: F = cast(self.learning_rate / c1);
        let (fb1, fb2) = (cast::<F>(b1), cast::<F>(b2));
        let (ob1, ob2) = (F::one() - fb1, F::one() - fb2);
        let inv_c2: F = cast(1.0 / c2);
        let eps: F = cast(self.eps);
        let grads = grad.tensors();
        for (i, (_, mut p)) in model.tensors_mut().into_iter().enumerate() {
            let g = &grads[i].1;
            ndarray::Zip::from(&mut p)
                .and(g)
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .for_each(|p, &g, m, v| {
                    *m = fb1 * *m + ob1 * g;
                    *v = fb2 * *v + ob2 * g * g;
                    *p -= step * *m / ((*v * inv_c2).sqrt() + eps);
                });
        }
    }
}

/// Per-class running sums of received latents.
#[derive(Debug, Clone)]
pub struct MomentAccumulator {
    k: usize,
    stats: BTreeMap<usize, (usize, Array1<f64>, Array2<f64>)>,
}

impl MomentAccumulator {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            stats: BTreeMap::new(),
        }
    }

    pub fn add<F: NdFloat>(&mut self, latents: ArrayView2<F>, labels: &[usize]) {
        let k = self.k;
        for (row, &y) in latents.rows().into_iter().zip(labels) {
            let e = self
                .stats
                .entry(y)
                .or_insert_with(|| (0, Array1::zeros(k), Array2::zeros((k, k))));
            e.0 += 1;
            let z: Vec<f64> = row.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
            for a in 0..k {
                e.1[a] += z[a];
                for b in 0..k {
                    e.2[[a, b]] += z[a] * z[b];
                }
            }
        }
    }

    /// Mean and ridged covariance per class; classes with no latents (or a
    /// numerically broken covariance) keep their entry from `previous`.
    pub fn finish(&self, previous: &PriorTable) -> PriorTable {
        let mut out = previous.clone();
        for (&c, (n, sum, outer)) in &self.stats {
            let n = *n as f64;
            let mean = sum / n;
            let mm = mean.view().insert_axis(ndarray::Axis(1));
            let cov = outer / n - mm.dot(&mm.t());
            match ClassPrior::from_moments(mean.to_vec(), cov) {
                Ok(p) => {
                    out.insert(c, p);
                }
                Err(e) => log::warn!("class {c}: keeping previous prior ({e})"),
            }
        }
        for c in previous.keys() {
            if !self.stats.contains_key(c) {
                log::warn!("class {c} had no latents this epoch; keeping previous prior");
            }
        }
        out
    }
}

/// Fit one prior per class from grouped latents, falling back to `previous`
/// for empty groups.
pub fn update_class_priors(groups: &BTreeMap<usize, Array2<f64>>, previous: &PriorTable) -> PriorTable {
    let k = groups
        .values()
        .map(|g| g.ncols())
        .chain(previous.values().map(ClassPrior::dim))
        .next()
        .unwrap_or(0);
    let mut acc = MomentAccumulator::new(k);
    for (&c, z) in groups {
        if z.nrows() > 0 {
            acc.add(z.view(), &vec![c; z.nrows()]);
        }
    }
    acc.finish(previous)
}

/// Fraction of examples whose modal prediction over `repeats` channel draws
/// matches the label. The transmitted signal is deterministic.
pub fn evaluate_accuracy<P: Predictor + ?Sized>(
    predictor: &P,
    data: &[LabeledExample],
    channel: &ChannelConfig,
    repeats: usize,
    seed: u64,
) -> Result<f64> {
    if data.is_empty() || repeats == 0 {
        return Err(Error::param("accuracy needs data and at least one repeat"));
    }
    let c = predictor.num_classes();
    let amp = predictor.p_max().sqrt();
    let sigma = channel.noise_std();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut correct = 0usize;
    for chunk in data.chunks(1024) {
        let refs: Vec<&LabeledExample> = chunk.iter().collect();
        let signal = predictor.signal(&refs)?.mapv(|v| v.clamp(-amp, amp));
        let mut votes = vec![0usize; chunk.len() * c];
        for _ in 0..repeats {
            let received = signal.mapv(|v| v + sigma * rng.sample::<f64, _>(StandardNormal));
            let lp = predictor.log_probs(received.view())?;
            for (i, row) in lp.rows().into_iter().enumerate() {
                votes[i * c + argmax(row.iter().copied())] += 1;
            }
        }
        for (i, ex) in chunk.iter().enumerate() {
            if ex.y >= c {
                return Err(Error::param(format!("label {} outside the {c} known classes", ex.y)));
            }
            let modal = argmax(votes[i * c..(i + 1) * c].iter().map(|&v| v as f64));
            correct += usize::from(modal == ex.y);
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Index of the first maximum.
fn argmax(xs: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in xs.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

fn labels_of(batch: &[&LabeledExample]) -> Vec<usize> {
    batch.iter().map(|e| e.y).collect()
}

fn add_weight_decay<F: NdFloat>(model: &Model<F>, grad: &mut Model<F>, wd: f64) {
    if wd == 0.0 {
        return;
    }
    let two_wd: F = cast(2.0 * wd);
    let params = model.tensors();
    for (i, (name, mut g)) in grad.tensors_mut().into_iter().enumerate() {
        if name.starts_with("encoder.") && name.ends_with(".weight") {
            g.scaled_add(two_wd, &params[i].1);
        }
    }
}

fn scale_grad<F: NdFloat>(grad: &mut Model<F>, s: f64) {
    let s: F = cast(s);
    for (_, mut g) in grad.tensors_mut() {
        g.mapv_inplace(|v| v * s);
    }
}

/// Run the epoch / domain / batch loop.
///
/// Each update draws one batch from every domain, samples `noise_samples`
/// latent and channel draws per example, evaluates the objective on all
/// domains together and takes one optimizer step. Received latents from the
/// first draw are accumulated per class and become the class priors of the
/// next epoch; epoch one uses standard-normal priors.
pub fn train<F: NdFloat>(
    config: &TrainConfig,
    envs: &[Vec<LabeledExample>],
    model: Model<F>,
    test: Option<&[LabeledExample]>,
) -> Result<TrainOutcome<F>> {
    config.validate()?;
    if envs.is_empty() || envs.iter().any(Vec::is_empty) {
        return Err(Error::config("train_envs", "need at least one nonempty environment"));
    }
    if config.objective.penalized() && envs.len() < 2 {
        return Err(Error::config(
            "objective",
            format!("{} needs at least two training domains", config.objective),
        ));
    }
    let start = Instant::now();
    let channel = config.channel()?;
    let k = model.latent_dim();
    let num_classes = model.num_classes();
    let mut priors = standard_priors(num_classes, k);
    let mut model = model;
    let mut adam = Adam::new(&model, config.learning_rate);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &["noise"]));
    let warmup = config.warmup_epochs();
    let anchors = (config.triplet_anchors_per_domain > 0).then_some(config.triplet_anchors_per_domain);
    let train_total: usize = envs.iter().map(Vec::len).sum();

    let mut record = RunRecord {
        config: config.clone(),
        epochs: Vec::new(),
        final_priors: priors.clone(),
        best_by_train: None,
        best_by_test: None,
        wall_clock_s: 0.0,
    };
    let mut best_train_model = None;
    let mut best_test_model = None;

    // full-batch training prepares the stacked encoder input once
    let full: Option<(Array2<F>, Vec<Vec<usize>>)> = if config.batch_size == 0 && config.epochs > 0 {
        let all: Vec<&LabeledExample> = envs.iter().flat_map(|env| env.iter()).collect();
        let x = input_matrix(&all, model.spec.input)?;
        Some((
            model.prepare_input(x.view())?,
            envs.iter().map(|env| env.iter().map(|e| e.y).collect()).collect(),
        ))
    } else {
        None
    };
    for epoch in 1..=config.epochs {
        let lambda = if epoch <= warmup { 0.0 } else { config.lambda };
        let mut weights = config.loss_weights();
        weights.lambda = lambda;
        let batches: Vec<Vec<Vec<usize>>> = match full {
            Some(_) => Vec::new(),
            None => envs
                .iter()
                .enumerate()
                .map(|(d, env)| {
                    let seed = derive_seed(config.seed, &["batches", &epoch.to_string(), &d.to_string()]);
                    batch_indices(env.len(), config.batch_size, seed)
                })
                .collect::<Result<_>>()?,
        };
        let steps = if full.is_some() {
            1
        } else {
            batches.iter().map(Vec::len).min().unwrap_or(0)
        };
        let mut acc = MomentAccumulator::new(k);
        let mut sums = [0.0f64; 5];
        for step in 0..steps {
            let mut grad = model.zeros_like();
            let (ev, ys) = match &full {
                Some((features, ys)) => {
                    let sizes: Vec<usize> = ys.iter().map(Vec::len).collect();
                    let draws = NoiseDraws::sample(
                        &sizes,
                        k,
                        config.noise_samples,
                        config.objective.stochastic(),
                        anchors,
                        &mut noise_rng,
                    );
                    let labels: Vec<&[usize]> = ys.iter().map(Vec::as_slice).collect();
                    let ev = evaluate_features(
                        &model,
                        features.view(),
                        &labels,
                        config.objective,
                        &weights,
                        &channel,
                        Some(&priors),
                        &draws,
                        Some(&mut grad),
                    )?;
                    (ev, std::borrow::Cow::Borrowed(ys))
                }
                None => {
                    let refs: Vec<Vec<&LabeledExample>> = batches
                        .iter()
                        .zip(envs)
                        .map(|(b, env)| b[step].iter().map(|&i| &env[i]).collect())
                        .collect();
                    let xs: Vec<Array2<F>> = refs
                        .iter()
                        .map(|r| input_matrix(r, model.spec.input))
                        .collect::<Result<_>>()?;
                    let ys: Vec<Vec<usize>> = refs.iter().map(|r| labels_of(r)).collect();
                    let domain_batches: Vec<DomainBatch<F>> = xs
                        .iter()
                        .zip(ys.iter())
                        .map(|(x, y)| DomainBatch { x: x.view(), labels: y })
                        .collect();
                    let sizes: Vec<usize> = ys.iter().map(Vec::len).collect();
                    let draws = NoiseDraws::sample(
                        &sizes,
                        k,
                        config.noise_samples,
                        config.objective.stochastic(),
                        anchors,
                        &mut noise_rng,
                    );
                    let ev = evaluate(
                        &model,
                        &domain_batches,
                        config.objective,
                        &weights,
                        &channel,
                        Some(&priors),
                        &draws,
                        Some(&mut grad),
                    )?;
                    (ev, std::borrow::Cow::Owned(ys))
                }
            };
            add_weight_decay(&model, &mut grad, config.weight_decay);
            if config.penalty_rescale && weights.lambda > 1.0 && config.objective.penalized() {
                scale_grad(&mut grad, 1.0 / weights.lambda);
            }
            adam.step(&mut model, &grad);
            for (z, y) in ev.received.iter().zip(ys.iter()) {
                acc.add(z.view(), y);
            }
            let l = &ev.loss;
            for (s, v) in sums.iter_mut().zip([l.total, l.distortion, l.kl, l.penalty, l.triplet]) {
                *s += v;
            }
        }
        priors = acc.finish(&priors);

        let evaluate_now = config.eval_every > 0 && (epoch % config.eval_every == 0 || epoch == config.epochs);
        let (train_accuracy, test_accuracy) = if evaluate_now {
            let seed = derive_seed(config.seed, &["eval", &epoch.to_string()]);
            let mut tr = 0.0;
            for (d, env) in envs.iter().enumerate() {
                let acc = evaluate_accuracy(
                    &model,
                    env,
                    &channel,
                    config.eval_repeats,
                    seed.wrapping_add(d as u64 + 2),
                )?;
                tr += acc * env.len() as f64 / train_total as f64;
            }
            let te = test
                .map(|t| evaluate_accuracy(&model, t, &channel, config.eval_repeats, seed ^ 1))
                .transpose()?;
            (Some(tr), te)
        } else {
            (None, None)
        };
        if let Some(tr) = train_accuracy {
            let sel = SelectedEpoch {
                epoch,
                train_accuracy: tr,
                test_accuracy,
            };
            if record.best_by_train.map_or(true, |b| tr > b.train_accuracy) {
                record.best_by_train = Some(sel);
                best_train_model = Some(model.clone());
            }
            if let Some(te) = test_accuracy {
                if record
                    .best_by_test
                    .map_or(true, |b| b.test_accuracy.map_or(true, |bt| te > bt))
                {
                    record.best_by_test = Some(sel);
                    best_test_model = Some(model.clone());
                }
            }
        }
        let n = steps.max(1) as f64;
        let rec = EpochRecord {
            epoch,
            lambda,
            loss: sums[0] / n,
            distortion: sums[1] / n,
            kl: sums[2] / n,
            penalty: sums[3] / n,
            triplet: sums[4] / n,
            train_accuracy,
            test_accuracy,
        };
        log::info!(
            "{} epoch {epoch}: loss {:.4} ce {:.4} kl {:.3} pen {:.2e} trip {:.3} train {:?} test {:?}",
            config.objective,
            rec.loss,
            rec.distortion,
            rec.kl,
            rec.penalty,
            rec.triplet,
            rec.train_accuracy,
            rec.test_accuracy
        );
        record.epochs.push(rec);
    }
    record.final_priors = priors.clone();
    record.wall_clock_s = start.elapsed().as_secs_f64();
    Ok(TrainOutcome {
        model,
        priors,
        record,
        best_by_train: best_train_model,
        best_by_test: best_test_model,
    })
}
