//! Layers with explicit forward/backward passes.
//!
//! Each layer caches what its backward pass needs during forward, and
//! accumulates parameter gradients into [`Param::grad`]. Models drive layers
//! in a fixed order, so caches are plain fields rather than a tape.

mod attention;
pub mod losses;

pub use attention::{EncoderBlock, MultiHeadAttention};

use rand_chacha::ChaCha20Rng;

use crate::rng::truncated_normal;
use crate::scalar::Scalar;
use crate::tensor::{matmul, matmul_at, matmul_bt, Tensor};

/// Initialization spread for projection weights.
pub const INIT_STD: f64 = 0.02;

/// A trainable tensor with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Param<S> {
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
}

impl<S: Scalar> Param<S> {
    pub fn new(value: Tensor<S>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param { value, grad }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Param::new(Tensor::zeros(shape))
    }

    pub fn ones(shape: &[usize]) -> Self {
        Param::new(Tensor::filled(shape, S::one()))
    }

    pub fn truncated_normal(shape: &[usize], std: f64, rng: &mut ChaCha20Rng) -> Self {
        let mut value = Tensor::zeros(shape);
        for x in value.data_mut() {
            *x = truncated_normal(rng, std);
        }
        Param::new(value)
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(S::zero());
    }

    pub fn count(&self) -> usize {
        self.value.len()
    }
}

/// A differentiable block operating on one float tensor.
pub trait Net<S: Scalar> {
    fn forward(&mut self, input: &Tensor<S>) -> Tensor<S>;
    /// Propagate the output gradient, accumulating parameter gradients.
    fn backward(&mut self, grad_out: &Tensor<S>) -> Tensor<S>;
    /// Visit every parameter under a stable, unique name.
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param<S>));

    fn zero_grad(&mut self) {
        self.visit_params(&mut |_, p| p.zero_grad());
    }
}

/// Dense layer `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear<S> {
    pub weight: Param<S>,
    pub bias: Param<S>,
    name: String,
    cached_input: Option<Tensor<S>>,
}

impl<S: Scalar> Linear<S> {
    pub fn new(name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha20Rng) -> Self {
        Linear {
            weight: Param::truncated_normal(&[fan_in, fan_out], INIT_STD, rng),
            bias: Param::zeros(&[fan_out]),
            name: name.to_string(),
            cached_input: None,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.value.shape()[1]
    }
}

impl<S: Scalar> Net<S> for Linear<S> {
    fn forward(&mut self, input: &Tensor<S>) -> Tensor<S> {
        let mut out = matmul(input, &self.weight.value);
        let (rows, cols) = out.dims2();
        let bias = self.bias.value.data();
        for r in 0..rows {
            let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
            for (o, &b) in row.iter_mut().zip(bias) {
                *o += b;
            }
        }
        self.cached_input = Some(input.clone());
        out.debug_check_finite(&self.name);
        out
    }

    fn backward(&mut self, grad_out: &Tensor<S>) -> Tensor<S> {
        let input = self.cached_input.as_ref().expect("forward before backward");
        self.weight.grad.add_assign(&matmul_at(input, grad_out));
        let (rows, cols) = grad_out.dims2();
        for r in 0..rows {
            let row = &grad_out.data()[r * cols..(r + 1) * cols];
            for (b, &g) in self.bias.grad.data_mut().iter_mut().zip(row) {
                *b += g;
            }
        }
        matmul_bt(grad_out, &self.weight.value)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        f(&format!("{}.weight", self.name), &mut self.weight);
        f(&format!("{}.bias", self.name), &mut self.bias);
    }
}

/// Per-row layer normalization with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm<S> {
    pub gain: Param<S>,
    pub bias: Param<S>,
    eps: S,
    name: String,
    cache: Option<(Tensor<S>, Vec<S>)>, // (x_hat, inv_std per row)
}

impl<S: Scalar> LayerNorm<S> {
    pub fn new(name: &str, width: usize) -> Self {
        LayerNorm {
            gain: Param::ones(&[width]),
            bias: Param::zeros(&[width]),
            eps: S::from_f64(1e-12),
            name: name.to_string(),
            cache: None,
        }
    }
}

impl<S: Scalar> Net<S> for LayerNorm<S> {
    fn forward(&mut self, input: &Tensor<S>) -> Tensor<S> {
        let (rows, cols) = input.dims2();
        let width = S::from_usize(cols);
        let mut x_hat = Tensor::zeros(&[rows, cols]);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Tensor::zeros(&[rows, cols]);
        let gain = self.gain.value.data();
        let bias = self.bias.value.data();
        for r in 0..rows {
            let x = input.row(r);
            let mut mean = S::zero();
            for &v in x {
                mean += v;
            }
            mean /= width;
            let mut var = S::zero();
            for &v in x {
                let d = v - mean;
                var += d * d;
            }
            var /= width;
            let istd = (var + self.eps).sqrt().recip();
            inv_std.push(istd);
            let xh_row = &mut x_hat.data_mut()[r * cols..(r + 1) * cols];
            for (xh, &v) in xh_row.iter_mut().zip(x) {
                *xh = (v - mean) * istd;
            }
            let out_row = &mut out.data_mut()[r * cols..(r + 1) * cols];
            for (((o, xh), &g), &b) in out_row
                .iter_mut()
                .zip(&x_hat.data()[r * cols..(r + 1) * cols])
                .zip(gain)
                .zip(bias)
            {
                *o = g * *xh + b;
            }
        }
        self.cache = Some((x_hat, inv_std));
        out.debug_check_finite(&self.name);
        out
    }

    fn backward(&mut self, grad_out: &Tensor<S>) -> Tensor<S> {
        let (x_hat, inv_std) = self.cache.as_ref().expect("forward before backward");
        let (rows, cols) = grad_out.dims2();
        let width = S::from_usize(cols);
        let mut grad_in = Tensor::zeros(&[rows, cols]);
        let gain = self.gain.value.data();
        for r in 0..rows {
            let dy = grad_out.row(r);
            let xh = x_hat.row(r);
            for ((g, b), (&d, &x)) in self
                .gain
                .grad
                .data_mut()
                .iter_mut()
                .zip(self.bias.grad.data_mut())
                .zip(dy.iter().zip(xh))
            {
                *g += d * x;
                *b += d;
            }
            // dx = inv_std * (dxh - mean(dxh) - xh * mean(dxh ⊙ xh))
            let mut sum_dxh = S::zero();
            let mut sum_dxh_xh = S::zero();
            for ((&d, &g), &x) in dy.iter().zip(gain).zip(xh) {
                let dxh = d * g;
                sum_dxh += dxh;
                sum_dxh_xh += dxh * x;
            }
            let mean_dxh = sum_dxh / width;
            let mean_dxh_xh = sum_dxh_xh / width;
            let out_row = &mut grad_in.data_mut()[r * cols..(r + 1) * cols];
            for ((o, (&d, &g)), &x) in out_row.iter_mut().zip(dy.iter().zip(gain)).zip(xh) {
                let dxh = d * g;
                *o = inv_std[r] * (dxh - mean_dxh - x * mean_dxh_xh);
            }
        }
        grad_in
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        f(&format!("{}.gain", self.name), &mut self.gain);
        f(&format!("{}.bias", self.name), &mut self.bias);
    }
}

/// GELU activation (tanh form).
#[derive(Clone, Debug, Default)]
pub struct Gelu<S> {
    cached_input: Option<Tensor<S>>,
}

pub fn gelu_value<S: Scalar>(x: S) -> S {
    let c = S::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = S::from_f64(0.044_715);
    let half = S::from_f64(0.5);
    let inner = c * (x + a * x * x * x);
    half * x * (S::one() + inner.tanh())
}

pub fn gelu_derivative<S: Scalar>(x: S) -> S {
    let c = S::from_f64(0.797_884_560_802_865_4);
    let a = S::from_f64(0.044_715);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let sech2 = S::one() - t * t;
    half * (S::one() + t) + half * x * sech2 * c * (S::one() + three * a * x * x)
}

impl<S: Scalar> Net<S> for Gelu<S> {
    fn forward(&mut self, input: &Tensor<S>) -> Tensor<S> {
        let mut out = input.clone();
        for v in out.data_mut() {
            *v = gelu_value(*v);
        }
        self.cached_input = Some(input.clone());
        out
    }

    fn backward(&mut self, grad_out: &Tensor<S>) -> Tensor<S> {
        let input = self.cached_input.as_ref().expect("forward before backward");
        let mut grad_in = grad_out.clone();
        for (g, &x) in grad_in.data_mut().iter_mut().zip(input.data()) {
            *g = *g * gelu_derivative(x);
        }
        grad_in
    }

    fn visit_params(&mut self, _f: &mut dyn FnMut(&str, &mut Param<S>)) {}
}

/// Elementwise tanh.
#[derive(Clone, Debug, Default)]
pub struct Tanh<S> {
    cached_output: Option<Tensor<S>>,
}

impl<S: Scalar> Net<S> for Tanh<S> {
    fn forward(&mut self, input: &Tensor<S>) -> Tensor<S> {
        let mut out = input.clone();
        for v in out.data_mut() {
            *v = v.tanh();
        }
        self.cached_output = Some(out.clone());
        out
    }

    fn backward(&mut self, grad_out: &Tensor<S>) -> Tensor<S> {
        let y = self.cached_output.as_ref().expect("forward before backward");
        let mut grad_in = grad_out.clone();
        for (g, &t) in grad_in.data_mut().iter_mut().zip(y.data()) {
            *g = *g * (S::one() - t * t);
        }
        grad_in
    }

    fn visit_params(&mut self, _f: &mut dyn FnMut(&str, &mut Param<S>)) {}
}

/// Elementwise rectifier.
#[derive(Clone, Debug, Default)]
pub struct Relu<S> {
    cached_input: Option<Tensor<S>>,
}

impl<S: Scalar> Net<S> for Relu<S> {
    fn forward(&mut self, input: &Tensor<S>) -> Tensor<S> {
        let mut out = input.clone();
        for v in out.data_mut() {
            if *v < S::zero() {
                *v = S::zero();
            }
        }
        self.cached_input = Some(input.clone());
        out
    }

    fn backward(&mut self, grad_out: &Tensor<S>) -> Tensor<S> {
        let input = self.cached_input.as_ref().expect("forward before backward");
        let mut grad_in = grad_out.clone();
        for (g, &x) in grad_in.data_mut().iter_mut().zip(input.data()) {
            if x <= S::zero() {
                *g = S::zero();
            }
        }
        grad_in
    }

    fn visit_params(&mut self, _f: &mut dyn FnMut(&str, &mut Param<S>)) {}
}

/// Row-wise softmax as a standalone layer.
#[derive(Clone, Debug, Default)]
pub struct Softmax<S> {
    cached_output: Option<Tensor<S>>,
}

/// Numerically-stable softmax over each row.
pub fn softmax_rows<S: Scalar>(input: &Tensor<S>) -> Tensor<S> {
    let (rows, cols) = input.dims2();
    let mut out = Tensor::zeros(&[rows, cols]);
    for r in 0..rows {
        let x = input.row(r);
        let max = x.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
        let mut sum = S::zero();
        let out_row = &mut out.data_mut()[r * cols..(r + 1) * cols];
        for (o, &v) in out_row.iter_mut().zip(x) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in out_row.iter_mut() {
            *o /= sum;
        }
    }
    out
}

impl<S: Scalar> Net<S> for Softmax<S> {
    fn forward(&mut self, input: &Tensor<S>) -> Tensor<S> {
        let out = softmax_rows(input);
        self.cached_output = Some(out.clone());
        out
    }

    fn backward(&mut self, grad_out: &Tensor<S>) -> Tensor<S> {
        let y = self.cached_output.as_ref().expect("forward before backward");
        let (rows, cols) = grad_out.dims2();
        let mut grad_in = Tensor::zeros(&[rows, cols]);
        for r in 0..rows {
            let dy = grad_out.row(r);
            let yr = y.row(r);
            let mut dot = S::zero();
            for (&d, &v) in dy.iter().zip(yr) {
                dot += d * v;
            }
            let out_row = &mut grad_in.data_mut()[r * cols..(r + 1) * cols];
            for ((o, &v), &d) in out_row.iter_mut().zip(yr).zip(dy) {
                *o = v * (d - dot);
            }
        }
        grad_in
    }

    fn visit_params(&mut self, _f: &mut dyn FnMut(&str, &mut Param<S>)) {}
}

/// Token-id lookup table. Not a [`Net`]: the input is discrete.
#[derive(Clone, Debug)]
pub struct Embedding<S> {
    pub table: Param<S>,
    name: String,
    cached_ids: Option<Vec<u32>>,
}

impl<S: Scalar> Embedding<S> {
    pub fn new(name: &str, entries: usize, width: usize, rng: &mut ChaCha20Rng) -> Self {
        Embedding {
            table: Param::truncated_normal(&[entries, width], INIT_STD, rng),
            name: name.to_string(),
            cached_ids: None,
        }
    }

    pub fn width(&self) -> usize {
        self.table.value.shape()[1]
    }

    pub fn lookup(&mut self, ids: &[u32]) -> Tensor<S> {
        let width = self.width();
        let mut out = Tensor::zeros(&[ids.len(), width]);
        for (r, &id) in ids.iter().enumerate() {
            let src = self.table.value.row(id as usize);
            out.row_mut(r).copy_from_slice(src);
        }
        self.cached_ids = Some(ids.to_vec());
        out
    }

    pub fn backward(&mut self, grad_out: &Tensor<S>) {
        let ids = self.cached_ids.as_ref().expect("lookup before backward");
        let width = self.width();
        for (r, &id) in ids.iter().enumerate() {
            let dst = &mut self.table.grad.data_mut()
                [id as usize * width..(id as usize + 1) * width];
            for (d, &g) in dst.iter_mut().zip(grad_out.row(r)) {
                *d += g;
            }
        }
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        f(&format!("{}.table", self.name), &mut self.table);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn softmax_of_zero_row_is_uniform() {
        for k in [1usize, 3, 7] {
            let t = Tensor::<f64>::zeros(&[1, k]);
            let y = softmax_rows(&t);
            for &v in y.data() {
                assert!((v - 1.0 / k as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = rng_from_seed(3);
        let mut t = Tensor::<f64>::zeros(&[5, 8]);
        for v in t.data_mut() {
            *v = crate::rng::truncated_normal(&mut rng, 2.0);
        }
        let y = softmax_rows(&t);
        for r in 0..5 {
            let sum: f64 = y.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn linear_identity_passthrough() {
        let mut rng = rng_from_seed(1);
        let mut layer = Linear::<f64>::new("id", 3, 3, &mut rng);
        layer.weight.value.fill(0.0);
        for i in 0..3 {
            layer.weight.value.data_mut()[i * 3 + i] = 1.0;
        }
        let x = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = layer.forward(&x);
        assert_eq!(y.data(), x.data());
        let dx = layer.backward(&y);
        assert_eq!(dx.data(), x.data());
    }

    #[test]
    fn embedding_scatters_gradients_to_used_rows() {
        let mut rng = rng_from_seed(2);
        let mut emb = Embedding::<f64>::new("emb", 4, 2, &mut rng);
        let out = emb.lookup(&[1, 1, 3]);
        let grad = Tensor::filled(out.shape(), 1.0);
        emb.backward(&grad);
        assert_eq!(emb.table.grad.row(0), &[0.0, 0.0]);
        assert_eq!(emb.table.grad.row(1), &[2.0, 2.0]);
        assert_eq!(emb.table.grad.row(2), &[0.0, 0.0]);
        assert_eq!(emb.table.grad.row(3), &[1.0, 1.0]);
    }
}
