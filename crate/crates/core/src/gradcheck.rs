//! Finite-difference verification of analytic gradients.
//!
//! The output tensor is scalarized through a fixed pseudo-random weighting
//! `L = sum(r ⊙ f(x))`, the analytic gradient of `L` is taken from one
//! backward pass, and every parameter and input element is then perturbed by
//! `±h` to form the central-difference estimate. Relative error uses
//! `|a - n| / max(|a| + |n|, 1e-4)`, which stays meaningful for near-zero
//! gradients (for example parameters feeding fully masked positions).

use crate::nn::Net;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<GradCheckEntry>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-4)
}

fn scalarize_weights(shape: &[usize]) -> Tensor<f64> {
    let mut rng = crate::rng::rng_from_seed(0x5ca1a);
    let mut r = Tensor::zeros(shape);
    for v in r.data_mut() {
        *v = crate::rng::truncated_normal(&mut rng, 1.0);
    }
    r
}

fn weighted_sum(y: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

/// Compare analytic parameter and input gradients of a [`Net`] against
/// central differences at step `h`.
pub fn grad_check_net<N: Net<f64>>(net: &mut N, input: &Tensor<f64>, h: f64) -> GradCheckReport {
    let r = scalarize_weights(net.forward(input).shape());

    // Analytic pass.
    net.zero_grad();
    let _ = net.forward(input);
    let input_grad = net.backward(&r);
    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    net.visit_params(&mut |name, p| {
        analytic.push((
            name.to_string(),
            p.grad.data().iter().copied().collect(),
        ));
    });

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let record = |name: &str, index: usize, a: f64, n: f64, report: &mut GradCheckReport| {
        let rel = relative_error(a, n);
        report.checked += 1;
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some(GradCheckEntry {
                name: name.to_string(),
                index,
                analytic: a,
                numeric: n,
                rel_error: rel,
            });
        }
    };

    // Parameters.
    let mut param_index = 0usize;
    loop {
        // Locate the param tensor by visit order on each probe to avoid
        // holding a borrow across forward calls.
        let mut exists = false;
        let mut len = 0;
        let mut name = String::new();
        {
            let mut i = 0;
            net.visit_params(&mut |n, p| {
                if i == param_index {
                    exists = true;
                    len = p.count();
                    name = n.to_string();
                }
                i += 1;
            });
        }
        if !exists {
            break;
        }
        for e in 0..len {
            let nudge = |net: &mut N, delta: f64| {
                let mut i = 0;
                net.visit_params(&mut |_, p| {
                    if i == param_index {
                        p.value.data_mut()[e] += delta;
                    }
                    i += 1;
                });
            };
            nudge(net, h);
            let plus = weighted_sum(&net.forward(input), &r);
            nudge(net, -2.0 * h);
            let minus = weighted_sum(&net.forward(input), &r);
            nudge(net, h);
            let numeric = (plus - minus) / (2.0 * h);
            record(&name, e, analytic[param_index].1[e], numeric, &mut report);
        }
        param_index += 1;
    }

    // Inputs.
    let mut x = input.clone();
    for e in 0..x.len() {
        x.data_mut()[e] += h;
        let plus = weighted_sum(&net.forward(&x), &r);
        x.data_mut()[e] -= 2.0 * h;
        let minus = weighted_sum(&net.forward(&x), &r);
        x.data_mut()[e] += h;
        let numeric = (plus - minus) / (2.0 * h);
        record("input", e, input_grad.data()[e], numeric, &mut report);
    }

    report
}

/// Compare an analytic gradient map against a numeric probe.
///
/// Drives checks for models whose inputs are token ids rather than a float
/// tensor. `analytic` holds the gradients from one backward pass in visit
/// order; `loss_with_nudge(pi, e, delta)` must apply `delta` to element `e`
/// of parameter `pi`, evaluate the scalar objective, and undo the nudge.
pub fn grad_check_params(
    names: &[String],
    analytic: &[Vec<f64>],
    mut loss_with_nudge: impl FnMut(usize, usize, f64) -> f64,
    h: f64,
) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (pi, grads) in analytic.iter().enumerate() {
        for e in 0..grads.len() {
            let plus = loss_with_nudge(pi, e, h);
            let minus = loss_with_nudge(pi, e, -h);
            let numeric = (plus - minus) / (2.0 * h);
            let rel = relative_error(grads[e], numeric);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some(GradCheckEntry {
                    name: names[pi].clone(),
                    index: e,
                    analytic: grads[e],
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{
        EncoderBlock, Gelu, LayerNorm, Linear, MultiHeadAttention, Net, Param, Relu, Softmax,
        Tanh,
    };
    use crate::rng::rng_from_seed;

    const TOLERANCE: f64 = 1e-4;

    fn random_input(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = rng_from_seed(seed);
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = crate::rng::truncated_normal(&mut rng, 1.0);
        }
        t
    }

    #[test]
    fn identity_linear_layer_has_near_zero_error() {
        let mut rng = rng_from_seed(1);
        let mut layer = Linear::<f64>::new("id", 4, 4, &mut rng);
        layer.weight.value.fill(0.0);
        for i in 0..4 {
            layer.weight.value.data_mut()[i * 4 + i] = 1.0;
        }
        let report = grad_check_net(&mut layer, &random_input(&[3, 4], 2), DEFAULT_STEP);
        assert!(report.max_rel_error < 1e-10, "{report:?}");
    }

    #[test]
    fn dense_layer_passes() {
        let mut rng = rng_from_seed(3);
        let mut layer = Linear::<f64>::new("fc", 5, 7, &mut rng);
        let report = grad_check_net(&mut layer, &random_input(&[4, 5], 4), DEFAULT_STEP);
        assert!(report.passes(TOLERANCE), "{report:?}");
    }

    #[test]
    fn layer_norm_passes() {
        let mut norm = LayerNorm::<f64>::new("ln", 6);
        let report = grad_check_net(&mut norm, &random_input(&[3, 6], 5), DEFAULT_STEP);
        assert!(report.passes(TOLERANCE), "{report:?}");
    }

    #[test]
    fn activations_pass() {
        let report = grad_check_net(&mut Gelu::default(), &random_input(&[3, 5], 6), DEFAULT_STEP);
        assert!(report.passes(TOLERANCE), "{report:?}");
        let report = grad_check_net(&mut Tanh::default(), &random_input(&[3, 5], 7), DEFAULT_STEP);
        assert!(report.passes(TOLERANCE), "{report:?}");
        let report = grad_check_net(&mut Relu::default(), &random_input(&[3, 5], 8), DEFAULT_STEP);
        assert!(report.passes(TOLERANCE), "{report:?}");
    }

    #[test]
    fn softmax_passes() {
        let report = grad_check_net(
            &mut Softmax::default(),
            &random_input(&[4, 6], 9),
            DEFAULT_STEP,
        );
        assert!(report.passes(TOLERANCE), "{report:?}");
    }

    #[test]
    fn attention_with_padding_mask_passes() {
        let mut rng = rng_from_seed(10);
        let mut attn = MultiHeadAttention::<f64>::new("a", 8, 2, &mut rng);
        attn.set_key_mask(Some(vec![1, 1, 1, 0, 0]));
        let report = grad_check_net(&mut attn, &random_input(&[5, 8], 11), DEFAULT_STEP);
        assert!(report.passes(TOLERANCE), "{report:?}");
    }

    #[test]
    fn full_encoder_block_passes() {
        let mut rng = rng_from_seed(12);
        let mut block = EncoderBlock::<f64>::new("b", 8, 2, 12, &mut rng);
        block.set_key_mask(Some(vec![1, 1, 1, 1, 0]));
        let report = grad_check_net(&mut block, &random_input(&[5, 8], 13), DEFAULT_STEP);
        assert!(report.passes(TOLERANCE), "{report:?}");
    }

    /// Negative control: a layer whose backward flips the weight-gradient
    /// sign must be flagged loudly.
    struct SignFlipped(Linear<f64>);

    impl Net<f64> for SignFlipped {
        fn forward(&mut self, input: &Tensor<f64>) -> Tensor<f64> {
            self.0.forward(input)
        }
        fn backward(&mut self, grad_out: &Tensor<f64>) -> Tensor<f64> {
            let before = self.0.weight.grad.clone();
            let dx = self.0.backward(grad_out);
            // Flip the increment this backward contributed.
            let after = self.0.weight.grad.clone();
            for (slot, (&b, &a)) in self
                .0
                .weight
                .grad
                .data_mut()
                .iter_mut()
                .zip(before.data().iter().zip(after.data()))
            {
                *slot = b - (a - b);
            }
            dx
        }
        fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param<f64>)) {
            self.0.visit_params(f);
        }
    }

    #[test]
    fn corrupted_backward_is_detected() {
        let mut rng = rng_from_seed(14);
        let mut layer = SignFlipped(Linear::new("bad", 4, 4, &mut rng));
        let report = grad_check_net(&mut layer, &random_input(&[3, 4], 15), DEFAULT_STEP);
        assert!(report.max_rel_error > 1e-1, "{report:?}");
    }
}
