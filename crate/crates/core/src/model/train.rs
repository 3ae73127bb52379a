//! Joint-loss pretraining over example sets.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{Adam, AdamParams};
use crate::pretrain::PretrainExample;
use crate::rng::{derive_seed, rng_from_seed};
use crate::scalar::Scalar;

use super::{HeadLosses, SmaliBert};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainParams {
    pub batch: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Linear learning-rate warmup over this many optimizer steps; 0 keeps
    /// the rate flat from the first step.
    pub warmup_steps: usize,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            batch: 72,
            lr: 1e-4,
            epochs: 40,
            seed: 0,
            warmup_steps: 0,
        }
    }
}

/// One recorded optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: u64,
    pub mlm_loss: Option<f64>,
    pub nip_loss: Option<f64>,
    pub ae_loss: Option<f64>,
}

/// Per-iteration loss series for each head.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossCurves {
    pub points: Vec<CurvePoint>,
}

impl LossCurves {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,mlm_loss,nip_loss,ae_loss\n");
        let cell = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        for p in &self.points {
            out.push_str(&format!(
                "{},{},{},{}\n",
                p.iteration,
                cell(p.mlm_loss),
                cell(p.nip_loss),
                cell(p.ae_loss)
            ));
        }
        out
    }

    fn head_series(&self, pick: impl Fn(&CurvePoint) -> Option<f64>) -> Vec<f64> {
        self.points.iter().filter_map(pick).collect()
    }

    /// (first, last) of each head series, for convergence checks.
    pub fn endpoints(&self) -> Vec<(&'static str, f64, f64)> {
        let mut out = Vec::new();
        for (name, pick) in [
            ("mlm", (|p: &CurvePoint| p.mlm_loss) as fn(&CurvePoint) -> Option<f64>),
            ("nip", |p| p.nip_loss),
            ("ae", |p| p.ae_loss),
        ] {
            let series = self.head_series(pick);
            if let (Some(&first), Some(&last)) = (series.first(), series.last()) {
                out.push((name, first, last));
            }
        }
        out
    }
}

/// Optimize the joint loss with Adam. Returns the loss curves and the final
/// optimizer state; deterministic for a fixed seed.
pub fn pretrain<S: Scalar>(
    model: &mut SmaliBert<S>,
    examples: &[PretrainExample],
    params: &TrainParams,
) -> Result<(LossCurves, Adam<S>)> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let batch = params.batch.max(1);
    let mut adam = Adam::new(AdamParams {
        lr: params.lr,
        ..AdamParams::default()
    });
    let mut curves = LossCurves::default();
    let mut iteration = 0u64;
    let mut order: Vec<usize> = (0..examples.len()).collect();

    for epoch in 0..params.epochs {
        let mut rng = rng_from_seed(derive_seed(params.seed, &format!("epoch-{epoch}")));
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            model.zero_grad();
            let scale = 1.0 / chunk.len() as f64;
            let mut batch_losses = HeadLosses::default();
            for &idx in chunk {
                let losses = model.train_step(&examples[idx], scale)?;
                accumulate(&mut batch_losses, &losses, scale);
            }
            if !batch_losses.is_finite() {
                return Err(Error::NonFiniteDetected(format!(
                    "loss at iteration {iteration}"
                )));
            }
            iteration += 1;
            if params.warmup_steps > 0 {
                let ramp = (iteration as f64 / params.warmup_steps as f64).min(1.0);
                adam.set_lr(params.lr * ramp);
            }
            adam.step(|f| model.visit_params(f))?;
            curves.points.push(CurvePoint {
                iteration,
                mlm_loss: batch_losses.mlm,
                nip_loss: batch_losses.nip,
                ae_loss: batch_losses.ae,
            });
        }
    }
    Ok((curves, adam))
}

fn accumulate(total: &mut HeadLosses, part: &HeadLosses, scale: f64) {
    let add = |acc: &mut Option<f64>, v: Option<f64>| {
        if let Some(v) = v {
            *acc = Some(acc.unwrap_or(0.0) + v * scale);
        }
    };
    add(&mut total.mlm, part.mlm);
    add(&mut total.nip, part.nip);
    add(&mut total.ae, part.ae);
}

/// Accuracy/error metrics of a model over an example set.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PretrainEval {
    pub mlm_accuracy: Option<f64>,
    pub nip_accuracy: Option<f64>,
    pub ae_mse: Option<f64>,
    pub masked_tokens: usize,
    pub pairs: usize,
}

pub fn evaluate_pretrain<S: Scalar>(
    model: &mut SmaliBert<S>,
    examples: &[PretrainExample],
) -> Result<PretrainEval> {
    let heads = model.config.enabled_heads;
    let mut mlm_hits = 0usize;
    let mut mlm_total = 0usize;
    let mut nip_hits = 0usize;
    let mut ae_sum = 0.0f64;
    for ex in examples {
        let states = model.encode_sequence(&ex.input_ids, &ex.segment_ids, &ex.attention_mask)?;
        if heads.mlm {
            let logits = model.mlm_logits(&states, &ex.mask_positions)?;
            let (rows, vocab) = logits.dims2();
            for r in 0..rows {
                let row = logits.row(r);
                let mut best = 0usize;
                for c in 1..vocab {
                    if row[c] > row[best] {
                        best = c;
                    }
                }
                if best as u32 == ex.mask_targets[r] {
                    mlm_hits += 1;
                }
                mlm_total += 1;
            }
        }
        if heads.nip {
            let logits = model.nip_logits(&states)?;
            let predicted = logits.data()[1] > logits.data()[0];
            if predicted == ex.is_next {
                nip_hits += 1;
            }
        }
        if heads.ae {
            let losses = model.joint_loss(ex)?;
            ae_sum += losses.ae.unwrap_or(0.0);
        }
    }
    Ok(PretrainEval {
        mlm_accuracy: (heads.mlm && mlm_total > 0).then(|| mlm_hits as f64 / mlm_total as f64),
        nip_accuracy: (heads.nip && !examples.is_empty())
            .then(|| nip_hits as f64 / examples.len() as f64),
        ae_mse: (heads.ae && !examples.is_empty()).then(|| ae_sum / examples.len() as f64),
        masked_tokens: mlm_total,
        pairs: examples.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HeadSet, ModelConfig};
    use crate::pretrain::build_sequence;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            layers: 1,
            heads: 2,
            hidden: 8,
            ffn: 12,
            seq_len: 10,
            vocab_size: 17,
            ae_intermediate: 6,
            ae_hidden: 4,
            enabled_heads: HeadSet::all(),
            tie_mlm_decoder: true,
        }
    }

    fn examples() -> Vec<crate::pretrain::PretrainExample> {
        let mut out = Vec::new();
        for (a, b, next) in [(7u32, 9u32, true), (9, 11, false), (11, 13, true)] {
            let mut ex = build_sequence(&[a, a + 1], &[b, b + 1], 10);
            ex.is_next = next;
            ex.mask_positions = vec![1, 4];
            ex.mask_targets = vec![a, b];
            out.push(ex);
        }
        out
    }

    #[test]
    fn zero_epochs_leave_the_model_at_init() {
        let mut model = SmaliBert::<f32>::new(tiny_config(), 9).unwrap();
        let mut reference = SmaliBert::<f32>::new(tiny_config(), 9).unwrap();
        let (curves, adam) = pretrain(
            &mut model,
            &examples(),
            &TrainParams {
                epochs: 0,
                ..TrainParams::default()
            },
        )
        .unwrap();
        assert!(curves.points.is_empty());
        assert_eq!(adam.step, 0);
        let mut same = true;
        let mut values = Vec::new();
        reference.visit_params(&mut |_, p| values.push(p.value.clone()));
        let mut i = 0;
        model.visit_params(&mut |_, p| {
            if p.value != values[i] {
                same = false;
            }
            i += 1;
        });
        assert!(same);
    }

    #[test]
    fn same_seed_gives_identical_curves() {
        let run = || {
            let mut model = SmaliBert::<f32>::new(tiny_config(), 11).unwrap();
            let (curves, _) = pretrain(
                &mut model,
                &examples(),
                &TrainParams {
                    batch: 2,
                    lr: 1e-3,
                    epochs: 3,
                    seed: 4,
                    warmup_steps: 0,
                },
            )
            .unwrap();
            curves
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn loss_decreases_on_a_tiny_overfit() {
        let mut model = SmaliBert::<f32>::new(tiny_config(), 13).unwrap();
        let (curves, _) = pretrain(
            &mut model,
            &examples(),
            &TrainParams {
                batch: 3,
                lr: 1e-3,
                epochs: 60,
                seed: 5,
                warmup_steps: 0,
            },
        )
        .unwrap();
        for (head, first, last) in curves.endpoints() {
            assert!(
                last < first,
                "{head} did not improve: {first} -> {last}"
            );
        }
    }

    #[test]
    fn warmup_scales_early_steps() {
        let mut model = SmaliBert::<f32>::new(tiny_config(), 15).unwrap();
        let (_, adam) = pretrain(
            &mut model,
            &examples(),
            &TrainParams {
                batch: 1,
                lr: 1e-3,
                epochs: 1,
                seed: 6,
                warmup_steps: 100,
            },
        )
        .unwrap();
        // Three examples, batch 1: three steps into a 100-step ramp.
        assert!((adam.hp.lr - 1e-3 * 3.0 / 100.0).abs() < 1e-12);
    }

    #[test]
    fn curves_render_as_csv() {
        let curves = LossCurves {
            points: vec![CurvePoint {
                iteration: 1,
                mlm_loss: Some(2.5),
                nip_loss: None,
                ae_loss: Some(0.5),
            }],
        };
        assert_eq!(curves.to_csv(), "iteration,mlm_loss,nip_loss,ae_loss\n1,2.5,,0.5\n");
    }
}
