//! Device-side stochastic encoder and server-side classifier head.

mod checkpoint;
pub mod layers;

use ndarray::{s, Array2, ArrayView2, NdFloat};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, StoredTensor, CHECKPOINT_FORMAT};
use layers::{cast, log_softmax, relu_backward_in_place, relu_in_place, sigmoid, softplus, Conv2d, Linear};

use crate::datasets::{LabeledExample, COLOR_CHANNELS};
use crate::error::{Error, Result};

/// Lower bound on every posterior standard deviation.
pub const STD_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    pub const COLORED_MNIST: InputShape = InputShape {
        channels: COLOR_CHANNELS,
        height: 28,
        width: 28,
    };

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Feature extractor layout in front of the final `2k` linear map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EncoderArch {
    /// Average-pool by `pool`, then fully connected ReLU layers.
    Mlp { hidden: Vec<usize>, pool: usize },
    /// Strided ReLU convolutions, then flatten.
    Conv {
        channels: Vec<usize>,
        kernel: usize,
        stride: usize,
    },
}

impl Default for EncoderArch {
    fn default() -> Self {
        EncoderArch::Conv {
            channels: vec![32, 64],
            kernel: 3,
            stride: 2,
        }
    }
}

/// Everything needed to rebuild a model's shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: EncoderArch,
    pub input: InputShape,
    pub latent_dim: usize,
    pub num_classes: usize,
    pub p_max: f64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.num_classes < 2 {
            return Err(Error::param("latent_dim must be >= 1 and num_classes >= 2"));
        }
        if !(self.p_max > 0.0 && self.p_max.is_finite()) {
            return Err(Error::param(format!("p_max must be positive, got {}", self.p_max)));
        }
        match &self.arch {
            EncoderArch::Mlp { hidden, pool } => {
                if *pool == 0 || self.input.height % pool != 0 || self.input.width % pool != 0 {
                    return Err(Error::param(format!("pool {pool} must divide the input size")));
                }
                if hidden.contains(&0) {
                    return Err(Error::param("hidden widths must be positive"));
                }
            }
            EncoderArch::Conv {
                channels,
                kernel,
                stride,
            } => {
                if *kernel == 0 || *stride == 0 || channels.contains(&0) {
                    return Err(Error::param("conv kernel, stride and channels must be positive"));
                }
            }
        }
        Ok(())
    }
}

/// Per-example Gaussian `p(z|x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPosterior {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Received-feature marginal: the posterior convolved with channel noise.
#[derive(Debug, Clone, PartialEq)]
pub struct ReceivedPosterior {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl GaussianPosterior {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::param("mean and std lengths differ"));
        }
        if std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::param("posterior std must be positive"));
        }
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `mean + std * eps` for a caller-provided standard normal draw.
    pub fn sample_with(&self, eps: &[f64]) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.std)
            .zip(eps)
            .map(|((m, s), e)| m + s * e)
            .collect()
    }

    pub fn sample_latent<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let eps: Vec<f64> = (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect();
        self.sample_with(&eps)
    }

    pub fn effective_received_posterior(&self, noise_var: f64) -> Result<ReceivedPosterior> {
        if !(noise_var >= 0.0) {
            return Err(Error::param(format!("noise variance must be >= 0, got {noise_var}")));
        }
        Ok(ReceivedPosterior {
            mean: self.mean.clone(),
            var: self.std.iter().map(|s| s * s + noise_var).collect(),
        })
    }
}

/// Pull `d f / d z` back through `z = mean + std * eps`.
pub fn reparam_backward(eps: &[f64], dz: &[f64]) -> (Vec<f64>, Vec<f64>) {
    (dz.to_vec(), dz.iter().zip(eps).map(|(d, e)| d * e).collect())
}

/// A batch of posteriors as `n x k` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorBatch<F> {
    pub mean: Array2<F>,
    pub std: Array2<F>,
}

impl<F: NdFloat> PosteriorBatch<F> {
    pub fn len(&self) -> usize {
        self.mean.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> GaussianPosterior {
        GaussianPosterior {
            mean: self
                .mean
                .row(i)
                .iter()
                .map(|v| v.to_f64().unwrap_or(f64::NAN))
                .collect(),
            std: self.std.row(i).iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder<F> {
    pub convs: Vec<Conv2d<F>>,
    pub dense: Vec<Linear<F>>,
    /// Final map to `2k` raw outputs: means first, then raw stds.
    pub out: Linear<F>,
}

/// Intermediate activations kept for the backward pass.
pub struct EncoderCache<F> {
    conv_cols: Vec<Array2<F>>,
    conv_out: Vec<Array2<F>>,
    dense_in: Vec<Array2<F>>,
    dense_out: Vec<Array2<F>>,
    out_in: Array2<F>,
    raw: Array2<F>,
    mean_tanh: Array2<F>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier<F> {
    pub linear: Linear<F>,
}

impl<F: NdFloat> Classifier<F> {
    pub fn logits(&self, z: ArrayView2<F>) -> Array2<F> {
        self.linear.forward(z)
    }

    pub fn log_probs(&self, z: ArrayView2<F>) -> Array2<F> {
        log_softmax(self.logits(z).view())
    }
}

/// Encoder parameters `theta` plus head parameters `phi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model<F> {
    pub spec: ModelSpec,
    pub encoder: Encoder<F>,
    pub head: Classifier<F>,
}

fn avg_pool<F: NdFloat>(x: ArrayView2<F>, shape: InputShape, pool: usize) -> Array2<F> {
    if pool == 1 {
        return x.to_owned();
    }
    let (c, h, w) = (shape.channels, shape.height, shape.width);
    let (oh, ow) = (h / pool, w / pool);
    let scale: F = cast(1.0 / (pool * pool) as f64);
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    let (n_in, n_out) = (c * h * w, c * oh * ow);
    let mut out = vec![F::zero(); x.nrows() * n_out];
    for (src, dst) in src.chunks_exact(n_in.max(1)).zip(out.chunks_exact_mut(n_out.max(1))) {
        for ch in 0..c {
            for y in 0..oh * pool {
                let row = &src[(ch * h + y) * w..(ch * h + y) * w + ow * pool];
                let acc = &mut dst[(ch * oh + y / pool) * ow..(ch * oh + y / pool + 1) * ow];
                for (a, px) in acc.iter_mut().zip(row.chunks_exact(pool)) {
                    *a += px.iter().fold(F::zero(), |s, &v| s + v);
                }
            }
        }
        for v in dst.iter_mut() {
            *v *= scale;
        }
    }
    Array2::from_shape_vec((x.nrows(), n_out), out).expect("pooled shape")
}

fn chw_to_hwc<F: NdFloat>(x: ArrayView2<F>, shape: InputShape) -> Array2<F> {
    let (c, h, w) = (shape.channels, shape.height, shape.width);
    let mut out = Array2::zeros(x.raw_dim());
    for (src, mut dst) in x.rows().into_iter().zip(out.rows_mut()) {
        for ch in 0..c {
            for p in 0..h * w {
                dst[p * c + ch] = src[ch * h * w + p];
            }
        }
    }
    out
}

/// Stack example features into an `n x (C*H*W)` matrix.
pub fn input_matrix<F: NdFloat>(batch: &[&LabeledExample], shape: InputShape) -> Result<Array2<F>> {
    let d = shape.len();
    let mut x = Array2::zeros((batch.len(), d));
    for (mut row, ex) in x.rows_mut().into_iter().zip(batch) {
        if ex.x.len() != d {
            return Err(Error::param(format!(
                "example has {} features, model expects {d}",
                ex.x.len()
            )));
        }
        for (o, &v) in row.iter_mut().zip(&ex.x) {
            *o = cast(v as f64);
        }
    }
    Ok(x)
}

fn check_finite<F: NdFloat>(a: &Array2<F>, what: &str) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::numeric(format!("non-finite {what}")))
    }
}

impl<F: NdFloat> Model<F> {
    pub fn new<R: Rng + ?Sized>(spec: ModelSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let k = spec.latent_dim;
        let mut convs = Vec::new();
        let mut dense = Vec::new();
        let feat = match &spec.arch {
            EncoderArch::Mlp { hidden, pool } => {
                let mut width = spec.input.len() / (pool * pool);
                for &h in hidden {
                    dense.push(Linear::new(width, h, rng));
                    width = h;
                }
                width
            }
            EncoderArch::Conv {
                channels,
                kernel,
                stride,
            } => {
                let (mut c, mut h, mut w) = (spec.input.channels, spec.input.height, spec.input.width);
                for &oc in channels {
                    let conv = Conv2d::new(c, oc, *kernel, *stride, rng);
                    (h, w) = conv.output_size(h, w);
                    c = oc;
                    convs.push(conv);
                }
                c * h * w
            }
        };
        let out = Linear::new(feat, 2 * k, rng);
        let head = Classifier {
            linear: Linear::new(k, spec.num_classes, rng),
        };
        Ok(Self {
            spec,
            encoder: Encoder { convs, dense, out },
            head,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn amplitude(&self) -> f64 {
        self.spec.p_max.sqrt()
    }

    /// Named parameter views in a fixed order.
    pub fn tensors(&self) -> Vec<(String, ndarray::ArrayViewD<'_, F>)> {
        let mut out = Vec::new();
        for (i, c) in self.encoder.convs.iter().enumerate() {
            out.push((format!("encoder.conv{i}.weight"), c.weight.view().into_dyn()));
            out.push((format!("encoder.conv{i}.bias"), c.bias.view().into_dyn()));
        }
        for (i, l) in self.encoder.dense.iter().enumerate() {
            out.push((format!("encoder.dense{i}.weight"), l.weight.view().into_dyn()));
            out.push((format!("encoder.dense{i}.bias"), l.bias.view().into_dyn()));
        }
        out.push(("encoder.out.weight".into(), self.encoder.out.weight.view().into_dyn()));
        out.push(("encoder.out.bias".into(), self.encoder.out.bias.view().into_dyn()));
        out.push(("head.weight".into(), self.head.linear.weight.view().into_dyn()));
        out.push(("head.bias".into(), self.head.linear.bias.view().into_dyn()));
        out
    }

    /// Mutable counterpart of [`Model::tensors`], same order and names.
    pub fn tensors_mut(&mut self) -> Vec<(String, ndarray::ArrayViewMutD<'_, F>)> {
        let mut out = Vec::new();
        for (i, c) in self.encoder.convs.iter_mut().enumerate() {
            out.push((format!("encoder.conv{i}.weight"), c.weight.view_mut().into_dyn()));
            out.push((format!("encoder.conv{i}.bias"), c.bias.view_mut().into_dyn()));
        }
        for (i, l) in self.encoder.dense.iter_mut().enumerate() {
            out.push((format!("encoder.dense{i}.weight"), l.weight.view_mut().into_dyn()));
            out.push((format!("encoder.dense{i}.bias"), l.bias.view_mut().into_dyn()));
        }
        out.push((
            "encoder.out.weight".into(),
            self.encoder.out.weight.view_mut().into_dyn(),
        ));
        out.push(("encoder.out.bias".into(), self.encoder.out.bias.view_mut().into_dyn()));
        out.push(("head.weight".into(), self.head.linear.weight.view_mut().into_dyn()));
        out.push(("head.bias".into(), self.head.linear.bias.view_mut().into_dyn()));
        out
    }

    /// Same shapes, all parameters zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, mut t) in z.tensors_mut() {
            t.fill(F::zero());
        }
        z
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Convert every parameter to another float type.
    pub fn cast<G: NdFloat>(&self) -> Model<G> {
        let conv = |c: &Conv2d<F>| Conv2d {
            weight: c.weight.mapv(|v| cast(v.to_f64().unwrap_or(f64::NAN))),
            bias: c.bias.mapv(|v| cast(v.to_f64().unwrap_or(f64::NAN))),
            in_channels: c.in_channels,
            out_channels: c.out_channels,
            kernel: c.kernel,
            stride: c.stride,
            padding: c.padding,
        };
        let lin = |l: &Linear<F>| Linear {
            weight: l.weight.mapv(|v| cast(v.to_f64().unwrap_or(f64::NAN))),
            bias: l.bias.mapv(|v| cast(v.to_f64().unwrap_or(f64::NAN))),
        };
        Model {
            spec: self.spec.clone(),
            encoder: Encoder {
                convs: self.encoder.convs.iter().map(conv).collect(),
                dense: self.encoder.dense.iter().map(lin).collect(),
                out: lin(&self.encoder.out),
            },
            head: Classifier {
                linear: lin(&self.head.linear),
            },
        }
    }

    /// Parameter-free input stage: average pooling for the MLP, channel-last
    /// reordering for the conv stack.
    pub fn prepare_input(&self, x: ArrayView2<F>) -> Result<Array2<F>> {
        if x.ncols() != self.spec.input.len() {
            return Err(Error::param(format!(
                "input has {} features, model expects {}",
                x.ncols(),
                self.spec.input.len()
            )));
        }
        Ok(match &self.spec.arch {
            EncoderArch::Mlp { pool, .. } => avg_pool(x, self.spec.input, *pool),
            EncoderArch::Conv { .. } => chw_to_hwc(x, self.spec.input),
        })
    }

    fn feature_width(&self) -> usize {
        match &self.spec.arch {
            EncoderArch::Mlp { pool, .. } => self.spec.input.len() / (pool * pool),
            EncoderArch::Conv { .. } => self.spec.input.len(),
        }
    }

    /// Forward pass keeping the activations for [`Model::encoder_backward`].
    pub fn encode_train(&self, x: ArrayView2<F>) -> Result<(PosteriorBatch<F>, EncoderCache<F>)> {
        let h = self.prepare_input(x)?;
        self.encode_features(h.view())
    }

    /// As [`Model::encode_train`] on the output of [`Model::prepare_input`].
    pub fn encode_features(&self, features: ArrayView2<F>) -> Result<(PosteriorBatch<F>, EncoderCache<F>)> {
        if features.ncols() != self.feature_width() {
            return Err(Error::param(format!(
                "features have {} columns, model expects {}",
                features.ncols(),
                self.feature_width()
            )));
        }
        let shape = self.spec.input;
        let mut conv_cols = Vec::new();
        let mut conv_out = Vec::new();
        let mut h = match &self.spec.arch {
            EncoderArch::Mlp { .. } => features.to_owned(),
            EncoderArch::Conv { .. } => {
                let mut h = features.to_owned();
                let (mut hh, mut ww) = (shape.height, shape.width);
                for conv in &self.encoder.convs {
                    let (mut y, cols) = conv.forward(h.view(), hh, ww);
                    relu_in_place(&mut y);
                    (hh, ww) = conv.output_size(hh, ww);
                    conv_cols.push(cols);
                    conv_out.push(y.clone());
                    h = y;
                }
                h
            }
        };
        let mut dense_in = Vec::new();
        let mut dense_out = Vec::new();
        for lin in &self.encoder.dense {
            let mut y = lin.forward(h.view());
            relu_in_place(&mut y);
            dense_in.push(h);
            dense_out.push(y.clone());
            h = y;
        }
        let raw = self.encoder.out.forward(h.view());
        check_finite(&raw, "encoder activations")?;
        let k = self.latent_dim();
        let amp: F = cast(self.amplitude());
        let floor: F = cast(STD_FLOOR);
        let mean_tanh = raw.slice(s![.., ..k]).mapv(|v| v.tanh());
        let mean = mean_tanh.mapv(|t| t * amp);
        let std = raw.slice(s![.., k..]).mapv(|v| softplus(v).max(floor));
        Ok((
            PosteriorBatch { mean, std },
            EncoderCache {
                conv_cols,
                conv_out,
                dense_in,
                dense_out,
                out_in: h,
                raw,
                mean_tanh,
            },
        ))
    }

    pub fn encode_batch(&self, x: ArrayView2<F>) -> Result<PosteriorBatch<F>> {
        Ok(self.encode_train(x)?.0)
    }

    pub fn encode(&self, example: &LabeledExample) -> Result<GaussianPosterior> {
        let x = input_matrix::<F>(&[example], self.spec.input)?;
        Ok(self.encode_batch(x.view())?.row(0))
    }

    /// Class log-probabilities for one received latent.
    pub fn classify(&self, z_hat: &[f64]) -> Result<Vec<f64>> {
        if z_hat.len() != self.latent_dim() {
            return Err(Error::param("latent dimension mismatch"));
        }
        if z_hat.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite received latent"));
        }
        let z = Array2::from_shape_fn((1, z_hat.len()), |(_, j)| cast::<F>(z_hat[j]));
        let lp = self.head.log_probs(z.view());
        Ok(lp.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect())
    }

    /// Backpropagate posterior gradients into `grad.encoder`.
    pub fn encoder_backward(
        &self,
        cache: &EncoderCache<F>,
        d_mean: ArrayView2<F>,
        d_std: ArrayView2<F>,
        grad: &mut Model<F>,
    ) {
        let k = self.latent_dim();
        let amp: F = cast(self.amplitude());
        let floor: F = cast(STD_FLOOR);
        let mut d_raw = Array2::zeros(cache.raw.raw_dim());
        ndarray::Zip::from(d_raw.slice_mut(s![.., ..k]))
            .and(d_mean)
            .and(&cache.mean_tanh)
            .for_each(|o, &d, &t| *o = d * amp * (F::one() - t * t));
        ndarray::Zip::from(d_raw.slice_mut(s![.., k..]))
            .and(d_std)
            .and(cache.raw.slice(s![.., k..]))
            .for_each(|o, &d, &r| {
                *o = if softplus(r) > floor { d * sigmoid(r) } else { F::zero() };
            });

        let need_feat_grad = !self.encoder.dense.is_empty() || !self.encoder.convs.is_empty();
        let mut dh =
            self.encoder
                .out
                .backward(cache.out_in.view(), d_raw.view(), &mut grad.encoder.out, need_feat_grad);
        for i in (0..self.encoder.dense.len()).rev() {
            let mut d = dh.take().expect("gradient requested");
            relu_backward_in_place(&mut d, &cache.dense_out[i]);
            let need = i > 0 || !self.encoder.convs.is_empty();
            dh = self.encoder.dense[i].backward(cache.dense_in[i].view(), d.view(), &mut grad.encoder.dense[i], need);
        }
        if self.encoder.convs.is_empty() {
            return;
        }
        let mut sizes = vec![(self.spec.input.height, self.spec.input.width)];
        for conv in &self.encoder.convs {
            let (h, w) = *sizes.last().expect("nonempty");
            sizes.push(conv.output_size(h, w));
        }
        for i in (0..self.encoder.convs.len()).rev() {
            let mut d = dh.take().expect("gradient requested");
            relu_backward_in_place(&mut d, &cache.conv_out[i]);
            let (h, w) = sizes[i];
            dh = self.encoder.convs[i].backward(&cache.conv_cols[i], d.view(), h, w, &mut grad.encoder.convs[i], i > 0);
        }
    }
}

/// Anything that maps examples to a transmitted signal and received latents to
/// class log-probabilities. Evaluation only sees this interface.
pub trait Predictor {
    fn num_classes(&self) -> usize;
    fn latent_dim(&self) -> usize;
    fn p_max(&self) -> f64;
    /// Deterministic transmitted signal, one row per example.
    fn signal(&self, batch: &[&LabeledExample]) -> Result<Array2<f64>>;
    fn log_probs(&self, received: ArrayView2<f64>) -> Result<Array2<f64>>;
}

impl<F: NdFloat> Predictor for Model<F> {
    fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }

    fn p_max(&self) -> f64 {
        self.spec.p_max
    }

    fn signal(&self, batch: &[&LabeledExample]) -> Result<Array2<f64>> {
        let x = input_matrix::<F>(batch, self.spec.input)?;
        let post = self.encode_batch(x.view())?;
        Ok(post.mean.mapv(|v| v.to_f64().unwrap_or(f64::NAN)))
    }

    fn log_probs(&self, received: ArrayView2<f64>) -> Result<Array2<f64>> {
        if received.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite received latent"));
        }
        let z = received.mapv(|v| cast::<F>(v));
        Ok(self.head.log_probs(z.view()).mapv(|v| v.to_f64().unwrap_or(f64::NAN)))
    }
}

/// Reads the uncorrupted label off each example and sends it as a scaled
/// one-hot latent; the head picks the largest coordinate.
#[derive(Debug, Clone, Copy)]
pub struct LabelOracle {
    pub num_classes: usize,
    pub p_max: f64,
}

impl Predictor for LabelOracle {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn latent_dim(&self) -> usize {
        self.num_classes
    }

    fn p_max(&self) -> f64 {
        self.p_max
    }

    fn signal(&self, batch: &[&LabeledExample]) -> Result<Array2<f64>> {
        let a = self.p_max.sqrt();
        let mut z = Array2::from_elem((batch.len(), self.num_classes), -a);
        for (i, ex) in batch.iter().enumerate() {
            if ex.y_clean >= self.num_classes {
                return Err(Error::param("label oracle needs an in-vocabulary clean label"));
            }
            z[[i, ex.y_clean]] = a;
        }
        Ok(z)
    }

    fn log_probs(&self, received: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(log_softmax(received.mapv(|v| 10.0 * v).view()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pooling_matches_block_means() {
        let shape = InputShape {
            channels: 2,
            height: 6,
            width: 4,
        };
        let x = Array2::from_shape_fn((3, shape.len()), |(i, j)| ((i * 31 + j * 7) % 13) as f64);
        let got = avg_pool(x.view(), shape, 2);
        assert_eq!(got.dim(), (3, 2 * 3 * 2));
        for n in 0..3 {
            for c in 0..2 {
                for by in 0..3 {
                    for bx in 0..2 {
                        let mut want = 0.0;
                        for y in 2 * by..2 * by + 2 {
                            for xx in 2 * bx..2 * bx + 2 {
                                want += x[[n, (c * 6 + y) * 4 + xx]] / 4.0;
                            }
                        }
                        assert_relative_eq!(got[[n, (c * 3 + by) * 2 + bx]], want, epsilon = 1e-12);
                    }
                }
            }
        }
    }

    fn spec(arch: EncoderArch) -> ModelSpec {
        ModelSpec {
            arch,
            input: InputShape {
                channels: 2,
                height: 4,
                width: 4,
            },
            latent_dim: 3,
            num_classes: 2,
            p_max: 1.0,
        }
    }

    fn mlp() -> EncoderArch {
        EncoderArch::Mlp {
            hidden: vec![5],
            pool: 2,
        }
    }

    fn conv() -> EncoderArch {
        EncoderArch::Conv {
            channels: vec![3, 4],
            kernel: 3,
            stride: 2,
        }
    }

    fn example(seed: u64) -> LabeledExample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LabeledExample {
            x: (0..32).map(|i| if i < 16 { rng.gen::<f32>() } else { 0.0 }).collect(),
            y: 0,
            d: 0,
            y_clean: 0,
            color: 0,
        }
    }

    #[test]
    fn zero_parameters_give_dead_posterior() {
        for arch in [mlp(), conv()] {
            let mut m = Model::<f64>::new(spec(arch), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            for (_, mut t) in m.tensors_mut() {
                t.fill(0.0);
            }
            let post = m.encode(&example(1)).unwrap();
            assert!(post.mean.iter().all(|&v| v == 0.0));
            for s in &post.std {
                assert_relative_eq!(*s, 2f64.ln(), epsilon = 1e-15);
            }
            let lp = m.classify(&[0.3, -1.0, 2.0]).unwrap();
            for v in lp {
                assert_relative_eq!(v, (0.5f64).ln(), epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn encode_is_deterministic_and_bounded() {
        let mut sp = spec(conv());
        sp.p_max = 0.25;
        let mut m = Model::<f64>::new(sp, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        // inflate the output layer so tanh saturates
        m.encoder.out.weight.mapv_inplace(|v| v * 1e3);
        let a = m.encode(&example(3)).unwrap();
        let b = m.encode(&example(3)).unwrap();
        assert_eq!(a, b);
        assert!(a.mean.iter().all(|v| v * v <= 0.25));
        assert!(a.std.iter().all(|&s| s >= STD_FLOOR));
    }

    #[test]
    fn received_posterior_adds_noise_variance() {
        let p = GaussianPosterior::new(vec![0.5, -0.5], vec![1.0, 1.0]).unwrap();
        assert_eq!(p.effective_received_posterior(0.0).unwrap().var, vec![1.0, 1.0]);
        let r = p.effective_received_posterior(3.0).unwrap();
        assert_eq!(r.var, vec![4.0, 4.0]);
        assert_eq!(r.mean, p.mean);
        assert!(p.effective_received_posterior(-1.0).is_err());
        assert!(GaussianPosterior::new(vec![0.0], vec![0.0]).is_err());
    }

    #[test]
    fn sample_latent_statistics() {
        let p = GaussianPosterior::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 100_000;
        let mut ss = [0.0; 2];
        for _ in 0..n {
            let z = p.sample_latent(&mut rng);
            ss[0] += z[0] * z[0];
            ss[1] += z[1] * z[1];
        }
        for s in ss {
            assert!(((s / n as f64).sqrt() - 1.0).abs() < 0.01);
        }
        let tight = GaussianPosterior::new(vec![0.7], vec![STD_FLOOR]).unwrap();
        assert!((tight.sample_latent(&mut rng)[0] - 0.7).abs() < 1e-3);
    }

    #[test]
    fn reparameterized_gradient_matches_finite_differences() {
        // f(z) = sum sin(z_i) * z_i, averaged over fixed draws
        let f = |z: &[f64]| z.iter().map(|v| v.sin() * v).sum::<f64>();
        let df = |z: &[f64]| z.iter().map(|v| v.cos() * v + v.sin()).collect::<Vec<_>>();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let draws: Vec<Vec<f64>> = (0..10_000)
            .map(|_| (0..2).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let objective =
            |p: &GaussianPosterior| draws.iter().map(|e| f(&p.sample_with(e))).sum::<f64>() / draws.len() as f64;
        let p = GaussianPosterior::new(vec![0.3, -0.4], vec![0.8, 0.5]).unwrap();
        let (mut gm, mut gs) = (vec![0.0; 2], vec![0.0; 2]);
        for e in &draws {
            let (dm, ds) = reparam_backward(e, &df(&p.sample_with(e)));
            for i in 0..2 {
                gm[i] += dm[i] / draws.len() as f64;
                gs[i] += ds[i] / draws.len() as f64;
            }
        }
        let h = 1e-5;
        for i in 0..2 {
            let (mut a, mut b) = (p.clone(), p.clone());
            a.mean[i] += h;
            b.mean[i] -= h;
            assert_relative_eq!(gm[i], (objective(&a) - objective(&b)) / (2.0 * h), max_relative = 1e-3);
            let (mut a, mut b) = (p.clone(), p.clone());
            a.std[i] += h;
            b.std[i] -= h;
            assert_relative_eq!(gs[i], (objective(&a) - objective(&b)) / (2.0 * h), max_relative = 1e-3);
        }
        // E[z] = mean, so its gradient is the identity
        let (dm, _) = reparam_backward(&draws[0], &[1.0, 0.0]);
        assert_eq!(dm, vec![1.0, 0.0]);
    }

    #[test]
    fn encoder_backward_matches_finite_differences() {
        for arch in [mlp(), conv()] {
            let m = Model::<f64>::new(spec(arch), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
            let xs: Vec<LabeledExample> = (0..3).map(example).collect();
            let refs: Vec<&LabeledExample> = xs.iter().collect();
            let x = input_matrix::<f64>(&refs, m.spec.input).unwrap();
            let wm = Array2::from_shape_fn((3, 3), |(i, j)| ((i + 2 * j) as f64 * 0.7).sin());
            let ws = Array2::from_shape_fn((3, 3), |(i, j)| ((2 * i + j) as f64 * 0.3).cos());
            let f = |m: &Model<f64>| {
                let p = m.encode_batch(x.view()).unwrap();
                (&p.mean * &wm).sum() + (&p.std * &ws).sum()
            };
            let (_, cache) = m.encode_train(x.view()).unwrap();
            let mut grad = m.zeros_like();
            m.encoder_backward(&cache, wm.view(), ws.view(), &mut grad);
            let analytic: Vec<(String, Vec<f64>)> = grad
                .tensors()
                .into_iter()
                .map(|(n, t)| (n, t.iter().copied().collect()))
                .collect();
            let h = 1e-6;
            for (ti, (name, g)) in analytic.iter().enumerate() {
                if name.starts_with("head") {
                    assert!(g.iter().all(|&v| v == 0.0));
                    continue;
                }
                for j in (0..g.len()).step_by(7) {
                    let bump = |delta: f64| {
                        let mut p = m.clone();
                        let mut ts = p.tensors_mut();
                        let t = &mut ts[ti].1;
                        let v = t.iter_mut().nth(j).unwrap();
                        *v += delta;
                        drop(ts);
                        f(&p)
                    };
                    let fd = (bump(h) - bump(-h)) / (2.0 * h);
                    assert!(
                        (g[j] - fd).abs() < 1e-6 * (1.0 + fd.abs()),
                        "{name}[{j}]: {} vs {fd}",
                        g[j]
                    );
                }
            }
        }
    }

    #[test]
    fn cast_round_trip() {
        let m = Model::<f64>::new(spec(mlp()), &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let back: Model<f64> = m.cast::<f32>().cast();
        for ((_, a), (_, b)) in m.tensors().into_iter().zip(back.tensors()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_relative_eq!(*x, *y, max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn spec_validation() {
        let mut s = spec(EncoderArch::Mlp {
            hidden: vec![],
            pool: 3,
        });
        assert!(s.validate().is_err());
        s.arch = mlp();
        s.latent_dim = 0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn label_oracle_reads_clean_label() {
        let o = LabelOracle {
            num_classes: 2,
            p_max: 1.0,
        };
        let mut ex = example(0);
        ex.y_clean = 1;
        let s = o.signal(&[&ex]).unwrap();
        let lp = o.log_probs(s.view()).unwrap();
        assert!(lp[[0, 1]] > lp[[0, 0]]);
    }
}
