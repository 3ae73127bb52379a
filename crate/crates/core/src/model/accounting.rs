//! Closed-form parameter and FLOP accounting.
//!
//! The parameter count enumerates every trainable scalar the model
//! allocates, biases included, and is cross-checked against the live
//! allocation in tests. The FLOP count follows a dense-projection
//! convention: multiply-accumulate operations of the QKV, attention output
//! and the two feed-forward projections, per token, times sequence length,
//! times layers. Attention score/value products, norms, activations and the
//! heads are excluded.

use super::config::ModelConfig;

/// Exact trainable-parameter count for a configuration.
pub fn count_parameters(config: &ModelConfig) -> u64 {
    let h = config.hidden as u64;
    let n = config.seq_len as u64;
    let vocab = config.vocab_size as u64;
    let ffn = config.ffn as u64;

    // Token, position and segment embeddings plus their shared norm.
    let embeddings = vocab * h + n * h + 2 * h + 2 * h;

    // One transformer block: QKV and output projections, two norms, the
    // feed-forward pair.
    let block = 4 * (h * h + h) + 2 * (2 * h) + (h * ffn + ffn) + (ffn * h + h);
    let encoder = embeddings + config.layers as u64 * block;

    let mut total = encoder;
    if config.enabled_heads.nip {
        let pooler = h * h + h;
        let classifier = h * 2 + 2;
        total += pooler + classifier;
    }
    if config.enabled_heads.mlm {
        let transform = h * h + h;
        let norm = 2 * h;
        let decoder_bias = vocab;
        total += transform + norm + decoder_bias;
        if !config.tie_mlm_decoder {
            total += h * vocab;
        }
    }
    if config.enabled_heads.ae {
        let flat = n * h;
        let inter = config.ae_intermediate as u64;
        let bottleneck = config.ae_hidden as u64;
        total += flat * inter + inter; // encoder widen
        total += inter * bottleneck + bottleneck; // encoder bottleneck
        total += bottleneck * inter + inter; // decoder widen
        total += inter * flat + flat; // decoder reconstruct
    }
    total
}

/// Multiply-accumulate count of one forward pass over one sequence.
pub fn count_flops(config: &ModelConfig) -> u64 {
    let h = config.hidden as u64;
    let ffn = config.ffn as u64;
    let per_token_per_layer = 4 * h * h + 2 * h * ffn;
    config.seq_len as u64 * config.layers as u64 * per_token_per_layer
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::HeadSet;

    fn within(value: f64, target: f64, fraction: f64) -> bool {
        (value - target).abs() <= target * fraction
    }

    #[test]
    fn base_config_lands_on_459m() {
        let count = count_parameters(&ModelConfig::base()) as f64;
        assert!(within(count, 459.35e6, 0.01), "got {count}");
    }

    #[test]
    fn unsimplified_config_lands_on_497m() {
        let count = count_parameters(&ModelConfig::unsimplified()) as f64;
        assert!(within(count, 497.45e6, 0.01), "got {count}");
    }

    #[test]
    fn simplification_sheds_about_7_7_percent_of_parameters() {
        let base = count_parameters(&ModelConfig::base()) as f64;
        let full = count_parameters(&ModelConfig::unsimplified()) as f64;
        let reduction = (full - base) / full * 100.0;
        assert!((reduction - 7.7).abs() <= 0.5, "reduction {reduction}%");
    }

    #[test]
    fn tiny_config_matches_hand_count() {
        // Counted layer by layer by hand:
        //   embeddings 7*4 + 2*4 + 2*4 + 8            = 52
        //   block: qkv+out 4*(16+4)=80, norms 16,
        //          ffn 4*8+8=40 and 8*4+4=36          = 172
        //   pooler 20, classifier 10                   = 30
        //   mlm transform 20, norm 8, bias 7           = 35
        //   ae 8*3+3=27, 3*2+2=8, 2*3+3=9, 3*8+8=32    = 76
        //   total                                      = 365
        let tiny = ModelConfig {
            layers: 1,
            heads: 1,
            hidden: 4,
            ffn: 8,
            seq_len: 2,
            vocab_size: 7,
            ae_intermediate: 3,
            ae_hidden: 2,
            enabled_heads: HeadSet::all(),
            tie_mlm_decoder: true,
        };
        assert_eq!(count_parameters(&tiny), 365);

        // Untying the decoder adds exactly hidden * vocab.
        let untied = ModelConfig {
            tie_mlm_decoder: false,
            ..tiny.clone()
        };
        assert_eq!(count_parameters(&untied), 365 + 4 * 7);

        // Disabling a head removes exactly its parameters.
        let no_ae = ModelConfig {
            enabled_heads: HeadSet {
                ae: false,
                ..HeadSet::all()
            },
            ..tiny.clone()
        };
        assert_eq!(count_parameters(&no_ae), 365 - 76);
        let no_nip = ModelConfig {
            enabled_heads: HeadSet {
                nip: false,
                ..HeadSet::all()
            },
            ..tiny
        };
        assert_eq!(count_parameters(&no_nip), 365 - 30);
    }

    #[test]
    fn flop_figures_match_the_documented_convention() {
        let base = count_flops(&ModelConfig::base()) as f64;
        let full = count_flops(&ModelConfig::unsimplified()) as f64;
        assert!(within(base, 24.72e9, 0.05), "got {base}");
        assert!(within(full, 44.05e9, 0.05), "got {full}");
        let reduction = (full - base) / full * 100.0;
        assert!((reduction - 43.9).abs() <= 1.5, "reduction {reduction}%");
    }

    #[test]
    fn tiny_flops_by_hand() {
        let tiny = ModelConfig {
            layers: 1,
            heads: 1,
            hidden: 4,
            ffn: 8,
            seq_len: 2,
            vocab_size: 7,
            ae_intermediate: 3,
            ae_hidden: 2,
            enabled_heads: HeadSet::all(),
            tie_mlm_decoder: true,
        };
        // 2 tokens * 1 layer * (4*16 + 2*4*8) = 2 * 128 = 256.
        assert_eq!(count_flops(&tiny), 256);
    }
}
