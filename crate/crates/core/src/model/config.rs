use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which pretraining heads are attached.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSet {
    pub mlm: bool,
    pub nip: bool,
    pub ae: bool,
}

impl HeadSet {
    pub fn all() -> Self {
        HeadSet {
            mlm: true,
            nip: true,
            ae: true,
        }
    }

    pub fn only_mlm() -> Self {
        HeadSet {
            mlm: true,
            nip: false,
            ae: false,
        }
    }

    pub fn only_nip() -> Self {
        HeadSet {
            mlm: false,
            nip: true,
            ae: false,
        }
    }

    pub fn is_empty(&self) -> bool {
        !(self.mlm || self.nip || self.ae)
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.mlm {
            parts.push("mlm");
        }
        if self.nip {
            parts.push("nip");
        }
        if self.ae {
            parts.push("ae");
        }
        parts.join("+")
    }
}

impl Default for HeadSet {
    fn default() -> Self {
        HeadSet::all()
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub seq_len: usize,
    pub vocab_size: usize,
    pub ae_intermediate: usize,
    pub ae_hidden: usize,
    pub enabled_heads: HeadSet,
    pub tie_mlm_decoder: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::base()
    }
}

impl ModelConfig {
    /// Production architecture: 8 layers, 8 heads, hidden 768, feed-forward
    /// 2304 (three times the hidden width), sequences of 512 tokens over a
    /// 10000-token vocabulary, autoencoder chain 512 -> 128.
    pub fn base() -> Self {
        ModelConfig {
            layers: 8,
            heads: 8,
            hidden: 768,
            ffn: 2304,
            seq_len: 512,
            vocab_size: 10_000,
            ae_intermediate: 512,
            ae_hidden: 128,
            enabled_heads: HeadSet::all(),
            tie_mlm_decoder: true,
        }
    }

    /// The unsimplified reference architecture this design was cut down
    /// from: 12 layers, 12 heads, feed-forward at four times the hidden
    /// width.
    pub fn unsimplified() -> Self {
        ModelConfig {
            layers: 12,
            heads: 12,
            ffn: 3072,
            ..ModelConfig::base()
        }
    }

    /// Small configuration for tests and CPU-scale experiments.
    pub fn desk() -> Self {
        ModelConfig {
            layers: 2,
            heads: 2,
            hidden: 64,
            ffn: 192,
            seq_len: 64,
            vocab_size: 1000,
            ae_intermediate: 64,
            ae_hidden: 16,
            enabled_heads: HeadSet::all(),
            tie_mlm_decoder: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.layers == 0 || self.heads == 0 || self.ffn == 0 {
            return Err(Error::ConfigMismatch("zero-sized architecture".into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::ConfigMismatch(format!(
                "hidden {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.ae_hidden > 512 {
            return Err(Error::ConfigMismatch(format!(
                "autoencoder hidden width {} exceeds 512",
                self.ae_hidden
            )));
        }
        if self.enabled_heads.is_empty() {
            return Err(Error::ConfigMismatch("no pretraining head enabled".into()));
        }
        if self.seq_len < 5 {
            return Err(Error::ConfigMismatch(format!(
                "sequence length {} cannot hold [CLS] a [SEP] b [SEP]",
                self.seq_len
            )));
        }
        if self.vocab_size < 5 {
            return Err(Error::ConfigMismatch("vocab smaller than the specials".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::base().validate().unwrap();
        ModelConfig::unsimplified().validate().unwrap();
        ModelConfig::desk().validate().unwrap();
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = ModelConfig::desk();
        c.heads = 3;
        assert!(c.validate().is_err());

        let mut c = ModelConfig::desk();
        c.ae_hidden = 513;
        assert!(c.validate().is_err());

        let mut c = ModelConfig::desk();
        c.enabled_heads = HeadSet {
            mlm: false,
            nip: false,
            ae: false,
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_json_roundtrip() {
        let c = ModelConfig::desk();
        let json = serde_json::to_string(&c).unwrap();
        let back: ModelConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, c);
        // Partial JSON falls back to defaults.
        let partial: ModelConfig = serde_json::from_str(r#"{"layers": 4}"#).unwrap();
        assert_eq!(partial.layers, 4);
        assert_eq!(partial.hidden, ModelConfig::base().hidden);
    }
}
