//! Dense and convolutional layers with hand-written backward passes.
//!
//! Activations are row-major matrices with one example per row. Convolutional
//! feature maps are stored height-major with channels innermost (HWC), so a
//! `(n * positions, out_channels)` GEMM result is already the `(n, positions *
//! out_channels)` activation matrix.

use ndarray::{Array1, Array2, ArrayView2, Axis, NdFloat};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub(crate) fn cast<F: NdFloat>(x: f64) -> F {
    <F as num_traits::NumCast>::from(x).expect("f64 representable in float type")
}

fn uniform_fill<F: NdFloat, R: Rng + ?Sized>(n: usize, bound: f64, rng: &mut R) -> Vec<F> {
    (0..n).map(|_| cast(rng.gen_range(-bound..bound))).collect()
}

/// `y = x W + b` with `W` stored `in x out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: NdFloat> Linear<F> {
    /// Uniform initialization in `±1/sqrt(fan_in)` for weights and bias.
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        let w = uniform_fill(input * output, bound, rng);
        let b = uniform_fill(output, bound, rng);
        Self {
            weight: Array2::from_shape_vec((input, output), w).expect("shape matches"),
            bias: Array1::from_vec(b),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<F>) -> Array2<F> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    /// Accumulates parameter gradients into `grad`; returns `dx` when asked.
    pub fn backward(
        &self,
        x: ArrayView2<F>,
        dy: ArrayView2<F>,
        grad: &mut Linear<F>,
        need_input_grad: bool,
    ) -> Option<Array2<F>> {
        ndarray::linalg::general_mat_mul(F::one(), &x.t(), &dy, F::one(), &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(0));
        need_input_grad.then(|| dy.dot(&self.weight.t()))
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dim(), self.output_dim())
    }
}

/// Square-kernel 2-D convolution with symmetric zero padding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d<F> {
    /// `(kernel * kernel * in_channels) x out_channels`, rows ordered (ky, kx, c).
    pub weight: Array2<F>,
    pub bias: Array1<F>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl<F: NdFloat> Conv2d<F> {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = kernel * kernel * in_channels;
        let lin = Linear::new(fan_in, out_channels, rng);
        Self {
            weight: lin.weight,
            bias: lin.bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.len()),
            ..*self
        }
    }

    pub fn output_size(&self, height: usize, width: usize) -> (usize, usize) {
        let f = |s: usize| (s + 2 * self.padding - self.kernel) / self.stride + 1;
        (f(height), f(width))
    }

    fn im2col(&self, x: ArrayView2<F>, height: usize, width: usize) -> Array2<F> {
        let n = x.nrows();
        let c = self.in_channels;
        let (oh, ow) = self.output_size(height, width);
        let k = self.kernel;
        let row_len = k * k * c;
        let mut cols = vec![F::zero(); n * oh * ow * row_len];
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let per = height * width * c;
        for b in 0..n {
            let img = &xs[b * per..(b + 1) * per];
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((b * oh + oy) * ow + ox) * row_len;
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= height as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= width as isize {
                                continue;
                            }
                            let src = (iy as usize * width + ix as usize) * c;
                            let dst = row + (ky * k + kx) * c;
                            cols[dst..dst + c].copy_from_slice(&img[src..src + c]);
                        }
                    }
                }
            }
        }
        Array2::from_shape_vec((n * oh * ow, row_len), cols).expect("shape matches")
    }

    fn col2im(&self, dcols: &Array2<F>, n: usize, height: usize, width: usize) -> Array2<F> {
        let c = self.in_channels;
        let (oh, ow) = self.output_size(height, width);
        let k = self.kernel;
        let row_len = k * k * c;
        let per = height * width * c;
        let mut dx = vec![F::zero(); n * per];
        let ds = dcols.as_slice().expect("standard layout");
        for b in 0..n {
            let img = &mut dx[b * per..(b + 1) * per];
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((b * oh + oy) * ow + ox) * row_len;
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= height as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= width as isize {
                                continue;
                            }
                            let dst = (iy as usize * width + ix as usize) * c;
                            let src = row + (ky * k + kx) * c;
                            for ch in 0..c {
                                img[dst + ch] += ds[src + ch];
                            }
                        }
                    }
                }
            }
        }
        Array2::from_shape_vec((n, per), dx).expect("shape matches")
    }

    /// Returns the `(n, oh * ow * out_channels)` output and the im2col buffer
    /// needed by [`Conv2d::backward`].
    pub fn forward(&self, x: ArrayView2<F>, height: usize, width: usize) -> (Array2<F>, Array2<F>) {
        let n = x.nrows();
        let (oh, ow) = self.output_size(height, width);
        let cols = self.im2col(x, height, width);
        let mut y = cols.dot(&self.weight);
        y += &self.bias;
        let y = y
            .into_shape_with_order((n, oh * ow * self.out_channels))
            .expect("contiguous GEMM output");
        (y, cols)
    }

    pub fn backward(
        &self,
        cols: &Array2<F>,
        dy: ArrayView2<F>,
        height: usize,
        width: usize,
        grad: &mut Conv2d<F>,
        need_input_grad: bool,
    ) -> Option<Array2<F>> {
        let n = dy.nrows();
        let dy = dy.as_standard_layout();
        let dy = dy
            .view()
            .into_shape_with_order((cols.nrows(), self.out_channels))
            .expect("contiguous gradient");
        ndarray::linalg::general_mat_mul(F::one(), &cols.t(), &dy, F::one(), &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(0));
        need_input_grad.then(|| {
            let dcols = dy.dot(&self.weight.t());
            self.col2im(&dcols, n, height, width)
        })
    }
}

pub fn relu_in_place<F: NdFloat>(x: &mut Array2<F>) {
    x.mapv_inplace(|v| if v > F::zero() { v } else { F::zero() });
}

/// Zero `dy` wherever the post-activation output was not positive.
pub fn relu_backward_in_place<F: NdFloat>(dy: &mut Array2<F>, post: &Array2<F>) {
    ndarray::Zip::from(dy).and(post).for_each(|d, &p| {
        if p <= F::zero() {
            *d = F::zero();
        }
    });
}

/// Row-wise log-softmax.
pub fn log_softmax<F: NdFloat>(logits: ArrayView2<F>) -> Array2<F> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let m = row.fold(F::neg_infinity(), |a, &b| a.max(b));
        let lse = m + row.fold(F::zero(), |a, &b| a + (b - m).exp()).ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus<F: NdFloat>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid<F: NdFloat>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct 4-loop convolution over an HWC image, used as the reference.
    fn naive_conv(conv: &Conv2d<f64>, x: &[f64], h: usize, w: usize) -> Vec<f64> {
        let (oh, ow) = conv.output_size(h, w);
        let (c, k) = (conv.in_channels, conv.kernel);
        let mut y = vec![0.0; oh * ow * conv.out_channels];
        for oy in 0..oh {
            for ox in 0..ow {
                for o in 0..conv.out_channels {
                    let mut acc = conv.bias[o];
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * conv.stride + ky) as isize - conv.padding as isize;
                            let ix = (ox * conv.stride + kx) as isize - conv.padding as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for ch in 0..c {
                                let xi = x[(iy as usize * w + ix as usize) * c + ch];
                                acc += xi * conv.weight[[(ky * k + kx) * c + ch, o]];
                            }
                        }
                    }
                    y[(oy * ow + ox) * conv.out_channels + o] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn linear_forward_matches_hand_product() {
        let lin = Linear {
            weight: array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]],
            bias: array![0.5, -0.5],
        };
        let y = lin.forward(array![[1.0, 0.0, -1.0]].view());
        assert_eq!(y, array![[-3.5, -4.5]]);
    }

    #[test]
    fn conv_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv2d::<f64>::new(2, 3, 3, 2, &mut rng);
        let (h, w) = (5, 6);
        let x = Array2::from_shape_fn((2, h * w * 2), |(i, j)| ((i * 31 + j * 7) % 11) as f64 / 11.0 - 0.4);
        let (y, _) = conv.forward(x.view(), h, w);
        for b in 0..2 {
            let expect = naive_conv(&conv, x.row(b).as_slice().unwrap(), h, w);
            for (a, e) in y.row(b).iter().zip(&expect) {
                assert_relative_eq!(*a, *e, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv2d::<f64>::new(2, 2, 3, 2, &mut rng);
        let (h, w) = (4, 4);
        let x = Array2::from_shape_fn((1, h * w * 2), |(_, j)| (j as f64 * 0.37).sin());
        let (y, cols) = conv.forward(x.view(), h, w);
        // objective: sum of y weighted by a fixed pattern
        let g = Array2::from_shape_fn(y.raw_dim(), |(_, j)| (j as f64 * 0.5).cos());
        let f = |c: &Conv2d<f64>, x: &Array2<f64>| (c.forward(x.view(), h, w).0 * &g).sum();
        let mut grad = conv.zeros_like();
        let dx = conv.backward(&cols, g.view(), h, w, &mut grad, true).unwrap();
        let e = 1e-6;
        for idx in [(0, 0), (5, 1), (17, 0)] {
            let mut p = conv.clone();
            p.weight[idx] += e;
            let mut m = conv.clone();
            m.weight[idx] -= e;
            assert_relative_eq!(grad.weight[idx], (f(&p, &x) - f(&m, &x)) / (2.0 * e), epsilon = 1e-7);
        }
        for j in [0, 9, 31] {
            let mut xp = x.clone();
            xp[[0, j]] += e;
            let mut xm = x.clone();
            xm[[0, j]] -= e;
            assert_relative_eq!(dx[[0, j]], (f(&conv, &xp) - f(&conv, &xm)) / (2.0 * e), epsilon = 1e-7);
        }
    }

    #[test]
    fn log_softmax_shift_invariant() {
        let a = log_softmax(array![[1.0, 2.0, 3.0]].view());
        let b = log_softmax(array![[101.0, 102.0, 103.0]].view());
        for (x, y) in a.iter().zip(b.iter()) {
            assert_relative_eq!(*x, *y, epsilon = 1e-12);
        }
        assert_relative_eq!(a.mapv(f64::exp).sum(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn softplus_is_stable() {
        assert_relative_eq!(softplus(0.0f64), 2f64.ln());
        assert_eq!(softplus(1000.0f64), 1000.0);
        assert!(softplus(-1000.0f64) >= 0.0);
    }
}
