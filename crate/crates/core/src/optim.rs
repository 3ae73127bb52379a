//! Adam optimizer with bias correction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Param;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment buffers for one parameter tensor.
#[derive(Clone, Debug)]
pub struct Moments<S> {
    pub m: Vec<S>,
    pub v: Vec<S>,
}

/// Optimizer state: hyperparameters, step counter and per-parameter moments
/// keyed by the stable visit name.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub hp: AdamParams,
    pub step: u64,
    moments: BTreeMap<String, Moments<S>>,
}

/// One in-place Adam update for a single parameter array.
pub fn adam_update<S: Scalar>(
    value: &mut [S],
    grad: &[S],
    moments: &mut Moments<S>,
    step: u64,
    hp: &AdamParams,
) -> Result<()> {
    if grad.len() != value.len() || moments.m.len() != value.len() {
        return Err(Error::ShapeMismatch(format!(
            "adam buffers disagree: value {}, grad {}, moments {}",
            value.len(),
            grad.len(),
            moments.m.len()
        )));
    }
    let b1 = S::from_f64(hp.beta1);
    let b2 = S::from_f64(hp.beta2);
    let one = S::one();
    let corr1 = S::from_f64(1.0 - hp.beta1.powi(step as i32));
    let corr2 = S::from_f64(1.0 - hp.beta2.powi(step as i32));
    let lr = S::from_f64(hp.lr);
    let eps = S::from_f64(hp.epsilon);
    for i in 0..value.len() {
        let g = grad[i];
        moments.m[i] = b1 * moments.m[i] + (one - b1) * g;
        moments.v[i] = b2 * moments.v[i] + (one - b2) * g * g;
        let m_hat = moments.m[i] / corr1;
        let v_hat = moments.v[i] / corr2;
        value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

impl<S: Scalar> Adam<S> {
    pub fn new(hp: AdamParams) -> Self {
        Adam {
            hp,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Apply one optimizer step over every parameter the visitor yields.
    pub fn step(
        &mut self,
        visit: impl FnOnce(&mut dyn FnMut(&str, &mut Param<S>)),
    ) -> Result<()> {
        self.step += 1;
        let step = self.step;
        let hp = self.hp;
        let moments = &mut self.moments;
        let mut failure = None;
        visit(&mut |name, param| {
            let entry = moments.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![S::zero(); param.count()],
                v: vec![S::zero(); param.count()],
            });
            let grad = param.grad.data().to_vec();
            if let Err(e) =
                adam_update(param.value.data_mut(), &grad, entry, step, &hp)
            {
                failure.get_or_insert(e);
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.hp.lr = lr;
    }

    pub fn moments(&self) -> &BTreeMap<String, Moments<S>> {
        &self.moments
    }

    pub fn insert_moments(&mut self, name: String, m: Moments<S>) {
        self.moments.insert(name, m);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut p = Param::new(Tensor::from_vec(&[2], vec![0.5f64, -0.25]).unwrap());
        let mut adam = Adam::new(AdamParams::default());
        adam.step(|f| f("p", &mut p)).unwrap();
        assert_eq!(adam.step, 1);
        assert_eq!(p.value.data(), &[0.5, -0.25]);
    }

    #[test]
    fn single_step_matches_hand_computed_update() {
        // Hand calculation for one scalar with g = 1 at t = 1:
        //   m = 0.1, v = 0.001, m_hat = 1, v_hat = 1,
        //   delta = lr * 1 / (1 + eps) = lr / (1 + 1e-8).
        let mut p = Param::new(Tensor::from_vec(&[1], vec![0.5f64]).unwrap());
        p.grad.data_mut()[0] = 1.0;
        let hp = AdamParams::default();
        let mut adam = Adam::new(hp);
        adam.step(|f| f("p", &mut p)).unwrap();
        let expected = 0.5 - hp.lr / (1.0 + hp.epsilon);
        assert!((p.value.data()[0] - expected).abs() < 1e-15);
        // The decrease is the learning rate up to the epsilon correction.
        assert!((0.5 - p.value.data()[0] - hp.lr).abs() < 1e-11);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut p = Param::new(Tensor::from_vec(&[3], vec![0.1f64, 0.2, 0.3]).unwrap());
            let mut adam = Adam::new(AdamParams::default());
            for step in 1..=10 {
                for (i, g) in p.grad.data_mut().iter_mut().enumerate() {
                    *g = ((step * (i + 1)) as f64).sin();
                }
                adam.step(|f| f("p", &mut p)).unwrap();
            }
            p.value.data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let mut value = vec![0.0f64; 3];
        let grad = vec![0.0f64; 2];
        let mut moments = Moments {
            m: vec![0.0; 3],
            v: vec![0.0; 3],
        };
        let err = adam_update(&mut value, &grad, &mut moments, 1, &AdamParams::default());
        assert!(matches!(err, Err(Error::ShapeMismatch(_))));
    }
}
