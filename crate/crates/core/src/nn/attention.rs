//! Multi-head self-attention and the post-norm encoder block.

use rand_chacha::ChaCha20Rng;

use crate::scalar::Scalar;
use crate::tensor::{matmul, matmul_bt, Tensor};

use super::{Gelu, LayerNorm, Linear, Net, Param};

/// Self-attention over a single sequence with key masking.
///
/// The key mask excludes padded positions from every softmax row, giving
/// them exactly zero attention weight. The mask applies to keys only; it is
/// set per call via [`MultiHeadAttention::set_key_mask`] and defaults to
/// all-visible.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention<S> {
    pub query: Linear<S>,
    pub key: Linear<S>,
    pub value: Linear<S>,
    pub output: Linear<S>,
    heads: usize,
    key_mask: Option<Vec<u8>>,
    cache: Option<AttnCache<S>>,
}

#[derive(Clone, Debug)]
struct AttnCache<S> {
    q: Tensor<S>,
    k: Tensor<S>,
    v: Tensor<S>,
    weights: Vec<Tensor<S>>, // per head, [n, n]
}

impl<S: Scalar> MultiHeadAttention<S> {
    pub fn new(name: &str, width: usize, heads: usize, rng: &mut ChaCha20Rng) -> Self {
        assert!(width % heads == 0, "width must divide evenly across heads");
        MultiHeadAttention {
            query: Linear::new(&format!("{name}.query"), width, width, rng),
            key: Linear::new(&format!("{name}.key"), width, width, rng),
            value: Linear::new(&format!("{name}.value"), width, width, rng),
            output: Linear::new(&format!("{name}.output"), width, width, rng),
            heads,
            key_mask: None,
            cache: None,
        }
    }

    pub fn set_key_mask(&mut self, mask: Option<Vec<u8>>) {
        self.key_mask = mask;
    }

    fn head_dim(&self) -> usize {
        self.query.fan_out() / self.heads
    }
}

fn slice_cols<S: Scalar>(t: &Tensor<S>, from: usize, width: usize) -> Tensor<S> {
    let (rows, cols) = t.dims2();
    let mut out = Tensor::zeros(&[rows, width]);
    for r in 0..rows {
        out.row_mut(r)
            .copy_from_slice(&t.row(r)[from..from + width]);
    }
    let _ = cols;
    out
}

fn add_cols<S: Scalar>(dst: &mut Tensor<S>, src: &Tensor<S>, from: usize) {
    let (rows, width) = src.dims2();
    for r in 0..rows {
        let d = &mut dst.row_mut(r)[from..from + width];
        for (a, &b) in d.iter_mut().zip(src.row(r)) {
            *a += b;
        }
    }
}

/// Softmax over the unmasked keys of each row; masked keys get exact zeros.
fn masked_softmax_rows<S: Scalar>(scores: &mut Tensor<S>, mask: Option<&[u8]>) {
    let (rows, cols) = scores.dims2();
    for r in 0..rows {
        let row = &mut scores.data_mut()[r * cols..(r + 1) * cols];
        let mut max = S::neg_infinity();
        for (c, &v) in row.iter().enumerate() {
            if mask.is_none_or(|m| m[c] != 0) {
                max = max.max(v);
            }
        }
        let mut sum = S::zero();
        for (c, v) in row.iter_mut().enumerate() {
            if mask.is_none_or(|m| m[c] != 0) {
                *v = (*v - max).exp();
                sum += *v;
            } else {
                *v = S::zero();
            }
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

impl<S: Scalar> Net<S> for MultiHeadAttention<S> {
    fn forward(&mut self, input: &Tensor<S>) -> Tensor<S> {
        let (n, width) = input.dims2();
        let dh = self.head_dim();
        let scale = S::from_f64(1.0 / (dh as f64).sqrt());

        let q = self.query.forward(input);
        let k = self.key.forward(input);
        let v = self.value.forward(input);

        let mut context = Tensor::zeros(&[n, width]);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = slice_cols(&q, h * dh, dh);
            let kh = slice_cols(&k, h * dh, dh);
            let vh = slice_cols(&v, h * dh, dh);
            let mut scores = matmul_bt(&qh, &kh);
            scores.scale(scale);
            masked_softmax_rows(&mut scores, self.key_mask.as_deref());
            let ctx_h = matmul(&scores, &vh);
            add_cols(&mut context, &ctx_h, h * dh);
            weights.push(scores);
        }
        self.cache = Some(AttnCache { q, k, v, weights });
        let out = self.output.forward(&context);
        out.debug_check_finite("attention");
        out
    }

    fn backward(&mut self, grad_out: &Tensor<S>) -> Tensor<S> {
        let dh = self.head_dim();
        let scale = S::from_f64(1.0 / (dh as f64).sqrt());
        let d_context = self.output.backward(grad_out);
        let cache = self.cache.as_ref().expect("forward before backward");
        let (n, width) = d_context.dims2();

        let mut dq = Tensor::zeros(&[n, width]);
        let mut dk = Tensor::zeros(&[n, width]);
        let mut dv = Tensor::zeros(&[n, width]);
        for h in 0..self.heads {
            let d_ctx_h = slice_cols(&d_context, h * dh, dh);
            let qh = slice_cols(&cache.q, h * dh, dh);
            let kh = slice_cols(&cache.k, h * dh, dh);
            let vh = slice_cols(&cache.v, h * dh, dh);
            let attn = &cache.weights[h];

            // d attn = d_ctx x V^T; dV = attn^T x d_ctx
            let d_attn = matmul_bt(&d_ctx_h, &vh);
            let dv_h = crate::tensor::matmul_at(attn, &d_ctx_h);

            // Softmax rows: dS_ij = A_ij (dA_ij - sum_k dA_ik A_ik); masked
            // entries have A = 0 and stay zero.
            let mut d_scores = Tensor::zeros(&[n, n]);
            for r in 0..n {
                let a = attn.row(r);
                let da = d_attn.row(r);
                let mut dot = S::zero();
                for (&dv, &av) in da.iter().zip(a) {
                    dot += dv * av;
                }
                let out_row = &mut d_scores.data_mut()[r * n..(r + 1) * n];
                for ((o, &av), &dv) in out_row.iter_mut().zip(a).zip(da) {
                    *o = av * (dv - dot) * scale;
                }
            }

            let dq_h = matmul(&d_scores, &kh);
            let dk_h = crate::tensor::matmul_at(&d_scores, &qh);
            add_cols(&mut dq, &dq_h, h * dh);
            add_cols(&mut dk, &dk_h, h * dh);
            add_cols(&mut dv, &dv_h, h * dh);
        }

        let mut grad_in = self.query.backward(&dq);
        grad_in.add_assign(&self.key.backward(&dk));
        grad_in.add_assign(&self.value.backward(&dv));
        grad_in
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        self.query.visit_params(f);
        self.key.visit_params(f);
        self.value.visit_params(f);
        self.output.visit_params(f);
    }
}

/// Post-norm transformer block: attention and feed-forward sublayers, each
/// wrapped as `LayerNorm(x + sublayer(x))`.
#[derive(Clone, Debug)]
pub struct EncoderBlock<S> {
    pub attention: MultiHeadAttention<S>,
    pub norm_attn: LayerNorm<S>,
    pub expand: Linear<S>,
    pub activation: Gelu<S>,
    pub contract: Linear<S>,
    pub norm_ffn: LayerNorm<S>,
}

impl<S: Scalar> EncoderBlock<S> {
    pub fn new(name: &str, width: usize, heads: usize, ffn: usize, rng: &mut ChaCha20Rng) -> Self {
        EncoderBlock {
            attention: MultiHeadAttention::new(&format!("{name}.attn"), width, heads, rng),
            norm_attn: LayerNorm::new(&format!("{name}.norm_attn"), width),
            expand: Linear::new(&format!("{name}.ffn.expand"), width, ffn, rng),
            activation: Gelu::default(),
            contract: Linear::new(&format!("{name}.ffn.contract"), ffn, width, rng),
            norm_ffn: LayerNorm::new(&format!("{name}.norm_ffn"), width),
        }
    }

    pub fn set_key_mask(&mut self, mask: Option<Vec<u8>>) {
        self.attention.set_key_mask(mask);
    }
}

impl<S: Scalar> Net<S> for EncoderBlock<S> {
    fn forward(&mut self, input: &Tensor<S>) -> Tensor<S> {
        let attn_out = self.attention.forward(input);
        let h = self.norm_attn.forward(&input.add(&attn_out));
        let f = self.contract.forward(&self.activation.forward(&self.expand.forward(&h)));
        self.norm_ffn.forward(&h.add(&f))
    }

    fn backward(&mut self, grad_out: &Tensor<S>) -> Tensor<S> {
        let d_res2 = self.norm_ffn.backward(grad_out);
        let d_f = self
            .expand
            .backward(&self.activation.backward(&self.contract.backward(&d_res2)));
        let d_h = d_res2.add(&d_f);
        let d_res1 = self.norm_attn.backward(&d_h);
        let d_attn = self.attention.backward(&d_res1);
        d_res1.add(&d_attn)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        self.attention.visit_params(f);
        self.norm_attn.visit_params(f);
        self.expand.visit_params(f);
        self.contract.visit_params(f);
        self.norm_ffn.visit_params(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn random_input(n: usize, width: usize, seed: u64) -> Tensor<f64> {
        let mut rng = rng_from_seed(seed);
        let mut t = Tensor::zeros(&[n, width]);
        for v in t.data_mut() {
            *v = crate::rng::truncated_normal(&mut rng, 1.0);
        }
        t
    }

    #[test]
    fn attention_preserves_shape() {
        let mut rng = rng_from_seed(1);
        let mut attn = MultiHeadAttention::<f64>::new("a", 8, 2, &mut rng);
        let x = random_input(5, 8, 2);
        let y = attn.forward(&x);
        assert_eq!(y.shape(), &[5, 8]);
    }

    #[test]
    fn masked_keys_get_exactly_zero_weight() {
        let mut rng = rng_from_seed(3);
        let mut attn = MultiHeadAttention::<f64>::new("a", 8, 2, &mut rng);
        attn.set_key_mask(Some(vec![1, 1, 0, 0, 0]));
        let x = random_input(5, 8, 4);
        let _ = attn.forward(&x);
        let cache = attn.cache.as_ref().unwrap();
        for weights in &cache.weights {
            for r in 0..5 {
                let row = weights.row(r);
                assert_eq!(row[2], 0.0);
                assert_eq!(row[3], 0.0);
                assert_eq!(row[4], 0.0);
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_visible_key_confines_attention_to_it() {
        let mut rng = rng_from_seed(5);
        let mut attn = MultiHeadAttention::<f64>::new("a", 4, 1, &mut rng);
        attn.set_key_mask(Some(vec![1, 0, 0]));
        let x = random_input(3, 4, 6);
        let _ = attn.forward(&x);
        let weights = &attn.cache.as_ref().unwrap().weights[0];
        for r in 0..3 {
            assert!((weights.row(r)[0] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn encoder_block_output_shape_matches_input() {
        let mut rng = rng_from_seed(7);
        let mut block = EncoderBlock::<f64>::new("b", 8, 2, 16, &mut rng);
        block.set_key_mask(Some(vec![1, 1, 1, 0]));
        let x = random_input(4, 8, 8);
        let y = block.forward(&x);
        assert_eq!(y.shape(), x.shape());
        let dx = block.backward(&y);
        assert_eq!(dx.shape(), x.shape());
    }
}
