//! The sequence encoder with its three pretraining heads: masked-token
//! prediction, next-instruction prediction, and the autoencoder bottleneck
//! that yields compact chunk embeddings.
//!
//! Head wiring:
//! - masked-token: gather masked states, dense + GELU + norm, then decode to
//!   the vocabulary with the token embedding transposed (tied, the default)
//!   or a dedicated projection;
//! - next-instruction: position-0 state through a tanh pooler and a 2-way
//!   classifier;
//! - autoencoder: the flattened sequence states through
//!   `widen -> bottleneck -> widen -> reconstruct`, trained to reproduce its
//!   own input under mean squared error. Reconstruction error propagates
//!   through both the chain and the target side, matching a joint objective
//!   where the target is the live encoder output.

mod accounting;
mod config;
pub mod train;

pub use accounting::{count_flops, count_parameters};
pub use config::{HeadSet, ModelConfig};

use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::nn::losses::{cross_entropy, mse};
use crate::nn::{Embedding, EncoderBlock, Gelu, LayerNorm, Linear, Net, Param, Tanh};
use crate::pretrain::PretrainExample;
use crate::rng::rng_from_seed;
use crate::scalar::Scalar;
use crate::tensor::{matmul, matmul_at, matmul_bt, Tensor};

#[derive(Clone, Debug)]
struct Encoder<S> {
    token: Embedding<S>,
    position: Param<S>,
    segment: Param<S>,
    norm: LayerNorm<S>,
    blocks: Vec<EncoderBlock<S>>,
    cached_segments: Option<Vec<u8>>,
}

impl<S: Scalar> Encoder<S> {
    fn new(config: &ModelConfig, rng: &mut ChaCha20Rng) -> Self {
        let h = config.hidden;
        Encoder {
            token: Embedding::new("encoder.token", config.vocab_size, h, rng),
            position: Param::truncated_normal(&[config.seq_len, h], crate::nn::INIT_STD, rng),
            segment: Param::truncated_normal(&[2, h], crate::nn::INIT_STD, rng),
            norm: LayerNorm::new("encoder.norm", h),
            blocks: (0..config.layers)
                .map(|i| {
                    EncoderBlock::new(&format!("encoder.block{i}"), h, config.heads, config.ffn, rng)
                })
                .collect(),
            cached_segments: None,
        }
    }

    fn forward(&mut self, ids: &[u32], segments: &[u8], attention_mask: &[u8]) -> Tensor<S> {
        let mut x = self.token.lookup(ids);
        let (n, h) = x.dims2();
        for r in 0..n {
            let pos = self.position.value.row(r).to_vec();
            let seg = self.segment.value.row(segments[r] as usize).to_vec();
            let row = x.row_mut(r);
            for c in 0..h {
                row[c] += pos[c] + seg[c];
            }
        }
        let mut states = self.norm.forward(&x);
        for block in &mut self.blocks {
            block.set_key_mask(Some(attention_mask.to_vec()));
            states = block.forward(&states);
        }
        self.cached_segments = Some(segments.to_vec());
        states
    }

    fn backward(&mut self, grad_states: &Tensor<S>) {
        let mut grad = grad_states.clone();
        for block in self.blocks.iter_mut().rev() {
            grad = block.backward(&grad);
        }
        let grad = self.norm.backward(&grad);
        let segments = self
            .cached_segments
            .as_ref()
            .expect("forward before backward");
        let (n, h) = grad.dims2();
        for r in 0..n {
            let row = grad.row(r);
            for c in 0..h {
                self.position.grad.data_mut()[r * h + c] += row[c];
            }
            let seg = segments[r] as usize;
            for c in 0..h {
                self.segment.grad.data_mut()[seg * h + c] += row[c];
            }
        }
        self.token.backward(&grad);
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        self.token.visit_params(f);
        f("encoder.position", &mut self.position);
        f("encoder.segment", &mut self.segment);
        self.norm.visit_params(f);
        for block in &mut self.blocks {
            block.visit_params(f);
        }
    }
}

#[derive(Clone, Debug)]
struct MlmHead<S> {
    transform: Linear<S>,
    activation: Gelu<S>,
    norm: LayerNorm<S>,
    decoder_bias: Param<S>,
    untied_decoder: Option<Param<S>>, // [hidden, vocab]
    cached_transformed: Option<Tensor<S>>,
}

impl<S: Scalar> MlmHead<S> {
    fn new(config: &ModelConfig, rng: &mut ChaCha20Rng) -> Self {
        let h = config.hidden;
        MlmHead {
            transform: Linear::new("mlm.transform", h, h, rng),
            activation: Gelu::default(),
            norm: LayerNorm::new("mlm.norm", h),
            decoder_bias: Param::zeros(&[config.vocab_size]),
            untied_decoder: (!config.tie_mlm_decoder)
                .then(|| Param::truncated_normal(&[h, config.vocab_size], crate::nn::INIT_STD, rng)),
            cached_transformed: None,
        }
    }

    fn logits(&mut self, gathered: &Tensor<S>, token_table: &Param<S>) -> Tensor<S> {
        let t = self
            .norm
            .forward(&self.activation.forward(&self.transform.forward(gathered)));
        let mut logits = match &self.untied_decoder {
            Some(w) => matmul(&t, &w.value),
            None => matmul_bt(&t, &token_table.value),
        };
        let (rows, vocab) = logits.dims2();
        for r in 0..rows {
            let row = &mut logits.data_mut()[r * vocab..(r + 1) * vocab];
            for (l, &b) in row.iter_mut().zip(self.decoder_bias.value.data()) {
                *l += b;
            }
        }
        self.cached_transformed = Some(t);
        logits
    }

    fn backward(&mut self, grad_logits: &Tensor<S>, token_table: &mut Param<S>) -> Tensor<S> {
        let t = self
            .cached_transformed
            .as_ref()
            .expect("forward before backward");
        let (rows, vocab) = grad_logits.dims2();
        for r in 0..rows {
            let row = &grad_logits.data()[r * vocab..(r + 1) * vocab];
            for (b, &g) in self.decoder_bias.grad.data_mut().iter_mut().zip(row) {
                *b += g;
            }
        }
        let d_t = match &mut self.untied_decoder {
            Some(w) => {
                w.grad.add_assign(&matmul_at(t, grad_logits));
                matmul_bt(grad_logits, &w.value)
            }
            None => {
                token_table.grad.add_assign(&matmul_at(grad_logits, t));
                matmul(grad_logits, &token_table.value)
            }
        };
        self.transform
            .backward(&self.activation.backward(&self.norm.backward(&d_t)))
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        self.transform.visit_params(f);
        self.norm.visit_params(f);
        f("mlm.decoder_bias", &mut self.decoder_bias);
        if let Some(w) = &mut self.untied_decoder {
            f("mlm.decoder_weight", w);
        }
    }
}

#[derive(Clone, Debug)]
struct NipHead<S> {
    pooler: Linear<S>,
    activation: Tanh<S>,
    classifier: Linear<S>,
}

impl<S: Scalar> NipHead<S> {
    fn new(config: &ModelConfig, rng: &mut ChaCha20Rng) -> Self {
        NipHead {
            pooler: Linear::new("nip.pooler", config.hidden, config.hidden, rng),
            activation: Tanh::default(),
            classifier: Linear::new("nip.classifier", config.hidden, 2, rng),
        }
    }

    fn logits(&mut self, first_state: &Tensor<S>) -> Tensor<S> {
        self.classifier
            .forward(&self.activation.forward(&self.pooler.forward(first_state)))
    }

    fn backward(&mut self, grad_logits: &Tensor<S>) -> Tensor<S> {
        self.pooler
            .backward(&self.activation.backward(&self.classifier.backward(grad_logits)))
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        self.pooler.visit_params(f);
        self.classifier.visit_params(f);
    }
}

#[derive(Clone, Debug)]
struct AeHead<S> {
    widen: Linear<S>,
    act_enc: Gelu<S>,
    bottleneck: Linear<S>,
    expand: Linear<S>,
    act_dec: Gelu<S>,
    reconstruct: Linear<S>,
}

impl<S: Scalar> AeHead<S> {
    fn new(config: &ModelConfig, rng: &mut ChaCha20Rng) -> Self {
        let flat = config.seq_len * config.hidden;
        let inter = config.ae_intermediate;
        let code = config.ae_hidden;
        AeHead {
            widen: Linear::new("ae.widen", flat, inter, rng),
            act_enc: Gelu::default(),
            bottleneck: Linear::new("ae.bottleneck", inter, code, rng),
            expand: Linear::new("ae.expand", code, inter, rng),
            act_dec: Gelu::default(),
            reconstruct: Linear::new("ae.reconstruct", inter, flat, rng),
        }
    }

    fn encode(&mut self, flat: &Tensor<S>) -> Tensor<S> {
        self.bottleneck
            .forward(&self.act_enc.forward(&self.widen.forward(flat)))
    }

    fn decode(&mut self, code: &Tensor<S>) -> Tensor<S> {
        self.reconstruct
            .forward(&self.act_dec.forward(&self.expand.forward(code)))
    }

    fn backward_chain(&mut self, grad_recon: &Tensor<S>) -> Tensor<S> {
        let d_code = self
            .expand
            .backward(&self.act_dec.backward(&self.reconstruct.backward(grad_recon)));
        self.widen
            .backward(&self.act_enc.backward(&self.bottleneck.backward(&d_code)))
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        self.widen.visit_params(f);
        self.bottleneck.visit_params(f);
        self.expand.visit_params(f);
        self.reconstruct.visit_params(f);
    }
}

/// Per-head losses of one example or batch, reported in f64.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct HeadLosses {
    pub mlm: Option<f64>,
    pub nip: Option<f64>,
    pub ae: Option<f64>,
}

impl HeadLosses {
    /// Unweighted sum of the enabled parts.
    pub fn total(&self) -> f64 {
        self.mlm.unwrap_or(0.0) + self.nip.unwrap_or(0.0) + self.ae.unwrap_or(0.0)
    }

    pub fn is_finite(&self) -> bool {
        [self.mlm, self.nip, self.ae]
            .iter()
            .flatten()
            .all(|v| v.is_finite())
    }
}

/// The encoder and its pretraining heads.
#[derive(Clone, Debug)]
pub struct SmaliBert<S> {
    pub config: ModelConfig,
    encoder: Encoder<S>,
    mlm: Option<MlmHead<S>>,
    nip: Option<NipHead<S>>,
    ae: Option<AeHead<S>>,
}

impl<S: Scalar> SmaliBert<S> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(seed);
        let encoder = Encoder::new(&config, &mut rng);
        let mlm = config.enabled_heads.mlm.then(|| MlmHead::new(&config, &mut rng));
        let nip = config.enabled_heads.nip.then(|| NipHead::new(&config, &mut rng));
        let ae = config.enabled_heads.ae.then(|| AeHead::new(&config, &mut rng));
        Ok(SmaliBert {
            config,
            encoder,
            mlm,
            nip,
            ae,
        })
    }

    /// Run the encoder over one fixed-length input.
    pub fn encode_sequence(
        &mut self,
        ids: &[u32],
        segments: &[u8],
        attention_mask: &[u8],
    ) -> Result<Tensor<S>> {
        let n = self.config.seq_len;
        if ids.len() != n || segments.len() != n || attention_mask.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "input length must be {n}, got {}/{}/{}",
                ids.len(),
                segments.len(),
                attention_mask.len()
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::IdOutOfRange {
                id: bad,
                vocab_size: self.config.vocab_size,
            });
        }
        if segments.iter().any(|&s| s > 1) {
            return Err(Error::ShapeMismatch("segment ids must be 0 or 1".into()));
        }
        Ok(self.encoder.forward(ids, segments, attention_mask))
    }

    /// Vocabulary logits at the masked positions.
    pub fn mlm_logits(&mut self, states: &Tensor<S>, positions: &[usize]) -> Result<Tensor<S>> {
        let head = self
            .mlm
            .as_mut()
            .ok_or_else(|| Error::ConfigMismatch("masked-token head disabled".into()))?;
        let gathered = gather_rows(states, positions)?;
        Ok(head.logits(&gathered, &self.encoder.token.table))
    }

    /// 2-way next-instruction logits from the position-0 state.
    pub fn nip_logits(&mut self, states: &Tensor<S>) -> Result<Tensor<S>> {
        let head = self
            .nip
            .as_mut()
            .ok_or_else(|| Error::ConfigMismatch("next-instruction head disabled".into()))?;
        let first = gather_rows(states, &[0])?;
        Ok(head.logits(&first))
    }

    /// Compress sequence states to the bottleneck code.
    pub fn ae_encode(&mut self, states: &Tensor<S>) -> Result<Tensor<S>> {
        let head = self
            .ae
            .as_mut()
            .ok_or_else(|| Error::ConfigMismatch("autoencoder head disabled".into()))?;
        let flat = flatten_states(states, &self.config)?;
        Ok(head.encode(&flat))
    }

    /// Reconstruct sequence states from a bottleneck code.
    pub fn ae_decode(&mut self, code: &Tensor<S>) -> Result<Tensor<S>> {
        let head = self
            .ae
            .as_mut()
            .ok_or_else(|| Error::ConfigMismatch("autoencoder head disabled".into()))?;
        if code.shape() != [1, self.config.ae_hidden] {
            return Err(Error::ShapeMismatch(format!(
                "code must be [1, {}], got {:?}",
                self.config.ae_hidden,
                code.shape()
            )));
        }
        let flat = head.decode(code);
        Tensor::from_vec(
            &[self.config.seq_len, self.config.hidden],
            flat.into_data(),
        )
    }

    /// Joint loss of one example without touching gradients.
    pub fn joint_loss(&mut self, example: &PretrainExample) -> Result<HeadLosses> {
        self.run_example(example, None)
    }

    /// Joint loss plus one backward pass; gradients accumulate scaled by
    /// `scale` (use `1/batch` to average over a batch).
    pub fn train_step(&mut self, example: &PretrainExample, scale: f64) -> Result<HeadLosses> {
        self.run_example(example, Some(scale))
    }

    fn run_example(
        &mut self,
        example: &PretrainExample,
        backprop_scale: Option<f64>,
    ) -> Result<HeadLosses> {
        let states =
            self.encode_sequence(&example.input_ids, &example.segment_ids, &example.attention_mask)?;
        let mut losses = HeadLosses::default();
        let mut grad_states = backprop_scale.map(|_| Tensor::<S>::zeros(states.shape()));
        let scale = S::from_f64(backprop_scale.unwrap_or(0.0));

        if let Some(head) = self.mlm.as_mut() {
            let gathered = gather_rows(&states, &example.mask_positions)?;
            let logits = head.logits(&gathered, &self.encoder.token.table);
            let targets: Vec<usize> =
                example.mask_targets.iter().map(|&t| t as usize).collect();
            let (loss, mut grad_logits) = cross_entropy(&logits, &targets);
            losses.mlm = Some(loss.into_f64());
            if let Some(grad_states) = grad_states.as_mut() {
                grad_logits.scale(scale);
                let d_gathered = head.backward(&grad_logits, &mut self.encoder.token.table);
                scatter_rows(grad_states, &d_gathered, &example.mask_positions);
            }
        }

        if let Some(head) = self.nip.as_mut() {
            let first = gather_rows(&states, &[0])?;
            let logits = head.logits(&first);
            let target = usize::from(example.is_next);
            let (loss, mut grad_logits) = cross_entropy(&logits, &[target]);
            losses.nip = Some(loss.into_f64());
            if let Some(grad_states) = grad_states.as_mut() {
                grad_logits.scale(scale);
                let d_first = head.backward(&grad_logits);
                scatter_rows(grad_states, &d_first, &[0]);
            }
        }

        if let Some(head) = self.ae.as_mut() {
            let flat = flatten_states(&states, &self.config)?;
            let code = head.encode(&flat);
            let recon = head.decode(&code);
            let (loss, mut grad_recon) = mse(&recon, &flat);
            losses.ae = Some(loss.into_f64());
            if let Some(grad_states) = grad_states.as_mut() {
                grad_recon.scale(scale);
                let d_flat_chain = head.backward_chain(&grad_recon);
                // Target side: the reconstruction target is the live state
                // tensor, so the residual also pulls on it directly.
                let (n, h) = grad_states.dims2();
                for i in 0..n * h {
                    grad_states.data_mut()[i] += d_flat_chain.data()[i] - grad_recon.data()[i];
                }
            }
        }

        if let Some(grad_states) = grad_states {
            self.encoder.backward(&grad_states);
        }
        Ok(losses)
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        self.encoder.visit_params(f);
        if let Some(head) = &mut self.mlm {
            head.visit_params(f);
        }
        if let Some(head) = &mut self.nip {
            head.visit_params(f);
        }
        if let Some(head) = &mut self.ae {
            head.visit_params(f);
        }
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(&mut |_, p| p.zero_grad());
    }

    /// Trainable scalars actually allocated; must agree with
    /// [`count_parameters`].
    pub fn allocated_parameters(&mut self) -> u64 {
        let mut total = 0u64;
        self.visit_params(&mut |_, p| total += p.count() as u64);
        total
    }
}

fn gather_rows<S: Scalar>(states: &Tensor<S>, positions: &[usize]) -> Result<Tensor<S>> {
    let (n, h) = states.dims2();
    let mut out = Tensor::zeros(&[positions.len(), h]);
    for (r, &p) in positions.iter().enumerate() {
        if p >= n {
            return Err(Error::PositionOutOfRange { position: p, len: n });
        }
        out.row_mut(r).copy_from_slice(states.row(p));
    }
    Ok(out)
}

fn scatter_rows<S: Scalar>(dst: &mut Tensor<S>, src: &Tensor<S>, positions: &[usize]) {
    for (r, &p) in positions.iter().enumerate() {
        let (_, h) = dst.dims2();
        let row = &mut dst.data_mut()[p * h..(p + 1) * h];
        for (d, &s) in row.iter_mut().zip(src.row(r)) {
            *d += s;
        }
    }
}

fn flatten_states<S: Scalar>(states: &Tensor<S>, config: &ModelConfig) -> Result<Tensor<S>> {
    let expected = [config.seq_len, config.hidden];
    if states.shape() != expected {
        return Err(Error::ShapeMismatch(format!(
            "states must be {expected:?}, got {:?}",
            states.shape()
        )));
    }
    Tensor::from_vec(&[1, config.seq_len * config.hidden], states.data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pretrain::{build_sequence, PretrainExample};
    use crate::tokenizer::{CLS, PAD, SEP};

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

    fn example_for(config: &ModelConfig) -> PretrainExample {
        let mut ex = build_sequence(&[7, 8], &[9, 10, 11], config.seq_len);
        ex.is_next = true;
        ex.mask_positions = vec![1, 5];
        ex.mask_targets = vec![7, 10];
        ex
    }

    #[test]
    fn allocated_parameters_match_accounting() {
        for config in [
            tiny_config(),
            ModelConfig {
                tie_mlm_decoder: false,
                ..tiny_config()
            },
            ModelConfig {
                enabled_heads: HeadSet::only_mlm(),
                ..tiny_config()
            },
            ModelConfig {
                enabled_heads: HeadSet::only_nip(),
                ..tiny_config()
            },
            ModelConfig::desk(),
        ] {
            let mut model = SmaliBert::<f32>::new(config.clone(), 1).unwrap();
            assert_eq!(
                model.allocated_parameters(),
                count_parameters(&config),
                "config {config:?}"
            );
        }
    }

    #[test]
    fn encode_sequence_shape_and_finiteness() {
        let config = tiny_config();
        let mut model = SmaliBert::<f32>::new(config.clone(), 2).unwrap();
        let ex = example_for(&config);
        let states = model
            .encode_sequence(&ex.input_ids, &ex.segment_ids, &ex.attention_mask)
            .unwrap();
        assert_eq!(states.shape(), &[config.seq_len, config.hidden]);
        assert!(states.is_finite());
    }

    #[test]
    fn all_pad_after_cls_is_finite() {
        let config = tiny_config();
        let mut model = SmaliBert::<f32>::new(config.clone(), 3).unwrap();
        let n = config.seq_len;
        let mut ids = vec![PAD; n];
        ids[0] = CLS;
        let segments = vec![0u8; n];
        let mut mask = vec![0u8; n];
        mask[0] = 1;
        let states = model.encode_sequence(&ids, &segments, &mask).unwrap();
        assert!(states.is_finite());
    }

    #[test]
    fn pad_region_contents_cannot_leak_into_visible_positions() {
        let config = tiny_config();
        let n = config.seq_len;
        let mut ids = vec![CLS, 7, SEP, 9, SEP];
        let visible = ids.len();
        ids.resize(n, PAD);
        let mut segments = vec![0u8, 0, 0, 1, 1];
        segments.resize(n, 0);
        let mut mask = vec![1u8; visible];
        mask.resize(n, 0);

        let mut permuted = ids.clone();
        permuted[visible..].copy_from_slice(&[13, 14, 15, 16, 12]);

        let mut model = SmaliBert::<f64>::new(config, 4).unwrap();
        let a = model.encode_sequence(&ids, &segments, &mask).unwrap();
        let b = model.encode_sequence(&permuted, &segments, &mask).unwrap();
        for r in 0..visible {
            for (x, y) in a.row(r).iter().zip(b.row(r)) {
                assert!(
                    (x - y).abs() < 1e-12,
                    "visible row {r} depends on pad contents"
                );
            }
        }
    }

    #[test]
    fn head_shapes() {
        let config = tiny_config();
        let mut model = SmaliBert::<f32>::new(config.clone(), 5).unwrap();
        let ex = example_for(&config);
        let states = model
            .encode_sequence(&ex.input_ids, &ex.segment_ids, &ex.attention_mask)
            .unwrap();
        let logits = model.mlm_logits(&states, &ex.mask_positions).unwrap();
        assert_eq!(logits.shape(), &[2, config.vocab_size]);
        let empty = model.mlm_logits(&states, &[]).unwrap();
        assert_eq!(empty.shape(), &[0, config.vocab_size]);
        let nip = model.nip_logits(&states).unwrap();
        assert_eq!(nip.shape(), &[1, 2]);
        let code = model.ae_encode(&states).unwrap();
        assert_eq!(code.shape(), &[1, config.ae_hidden]);
        let recon = model.ae_decode(&code).unwrap();
        assert_eq!(recon.shape(), states.shape());
        assert!(matches!(
            model.mlm_logits(&states, &[99]),
            Err(Error::PositionOutOfRange { .. })
        ));
    }

    #[test]
    fn joint_loss_is_the_sum_of_enabled_parts() {
        let base = tiny_config();
        let ex = example_for(&base);
        let seed = 6;

        let full = SmaliBert::<f64>::new(base.clone(), seed)
            .unwrap()
            .joint_loss(&ex)
            .unwrap();
        assert!(
            (full.total() - (full.mlm.unwrap() + full.nip.unwrap() + full.ae.unwrap())).abs()
                < 1e-12
        );

        // Heads are created from the same rng stream in order, so the
        // mlm-only model shares the encoder and mlm weights with the full
        // one; its loss must equal the full model's mlm part alone.
        let only_mlm = SmaliBert::<f64>::new(
            ModelConfig {
                enabled_heads: HeadSet::only_mlm(),
                ..base.clone()
            },
            seed,
        )
        .unwrap()
        .joint_loss(&ex)
        .unwrap();
        assert_eq!(only_mlm.nip, None);
        assert_eq!(only_mlm.ae, None);
        assert!((only_mlm.total() - only_mlm.mlm.unwrap()).abs() < 1e-15);
        assert!((only_mlm.mlm.unwrap() - full.mlm.unwrap()).abs() < 1e-12);

        let only_nip = SmaliBert::<f64>::new(
            ModelConfig {
                enabled_heads: HeadSet::only_nip(),
                ..base
            },
            seed,
        )
        .unwrap()
        .joint_loss(&ex)
        .unwrap();
        assert!((only_nip.total() - only_nip.nip.unwrap()).abs() < 1e-15);
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let config = ModelConfig {
            layers: 1,
            heads: 2,
            hidden: 6,
            ffn: 8,
            seq_len: 8,
            vocab_size: 13,
            ae_intermediate: 5,
            ae_hidden: 3,
            enabled_heads: HeadSet::all(),
            tie_mlm_decoder: true,
        };
        let mut ex = build_sequence(&[7, 8], &[9, 10], config.seq_len);
        ex.is_next = false;
        ex.mask_positions = vec![2, 4];
        ex.mask_targets = vec![8, 9];

        let mut model = SmaliBert::<f64>::new(config, 7).unwrap();
        model.zero_grad();
        let _ = model.train_step(&ex, 1.0).unwrap();

        let mut names = Vec::new();
        let mut analytic = Vec::new();
        model.visit_params(&mut |name, p| {
            names.push(name.to_string());
            analytic.push(p.grad.data().to_vec());
        });

        let report = crate::gradcheck::grad_check_params(
            &names,
            &analytic,
            |pi, e, delta| {
                let mut i = 0;
                model.visit_params(&mut |_, p| {
                    if i == pi {
                        p.value.data_mut()[e] += delta;
                    }
                    i += 1;
                });
                let loss = model.joint_loss(&ex).unwrap().total();
                let mut i = 0;
                model.visit_params(&mut |_, p| {
                    if i == pi {
                        p.value.data_mut()[e] -= delta;
                    }
                    i += 1;
                });
                loss
            },
            crate::gradcheck::DEFAULT_STEP,
        );
        assert!(
            report.passes(1e-4),
            "max rel error {} at {:?}",
            report.max_rel_error,
            report.worst
        );
    }
}
