use std::collections::HashMap;

use smalibert_core::model::train::{pretrain, TrainParams};
use smalibert_core::model::{ModelConfig, SmaliBert};
use smalibert_core::pretrain::{build_examples, ExampleConfig};
use smalibert_core::synth::{synth_corpus, SynthSpec};
use smalibert_core::tokenizer::train_wordpiece;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(8);
    let vocab_size: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(300);

    let classes = synth_corpus(&SynthSpec {
        families: 2,
        classes_per_family: 100,
        instructions_per_class: 20,
        seed: 1,
    })
    .unwrap();
    let parsed: Vec<_> = classes
        .iter()
        .map(|c| smalibert_core::corpus::parse_smali_class(&c.smali).unwrap())
        .collect();
    let corpus = smalibert_core::corpus::Corpus::from_classes(parsed);
    let vocab = train_wordpiece(corpus.instruction_texts(), vocab_size, 2, 0)
        .unwrap()
        .vocab;
    let mut config = ModelConfig::desk();
    config.vocab_size = vocab.size();
    let examples = build_examples(
        &corpus,
        &vocab,
        &ExampleConfig {
            seq_len: config.seq_len,
            seed: 7,
            ..ExampleConfig::default()
        },
    )
    .unwrap();

    let mut model = SmaliBert::<f32>::new(config, 3).unwrap();
    for epoch in 0..epochs {
        let lr = if epoch < 6 { 2e-3 } else { 5e-4 };
        pretrain(
            &mut model,
            &examples,
            &TrainParams {
                batch: 8,
                lr,
                epochs: 1,
                seed: 100 + epoch as u64,
                warmup_steps: 0,
            },
        )
        .unwrap();
    }

    // Per-target-token accuracy.
    let mut hits: HashMap<u32, (usize, usize)> = HashMap::new();
    let mut masked_vs_kept = [(0usize, 0usize); 3]; // [MASK], random, kept
    for ex in &examples {
        let states = model
            .encode_sequence(&ex.input_ids, &ex.segment_ids, &ex.attention_mask)
            .unwrap();
        let logits = model.mlm_logits(&states, &ex.mask_positions).unwrap();
        let (rows, v) = logits.dims2();
        for r in 0..rows {
            let row = logits.row(r);
            let mut best = 0usize;
            for c in 1..v {
                if row[c] > row[best] {
                    best = c;
                }
            }
            let target = ex.mask_targets[r];
            let entry = hits.entry(target).or_insert((0, 0));
            entry.1 += 1;
            let input_tok = ex.input_ids[ex.mask_positions[r]];
            let kind = if input_tok == smalibert_core::tokenizer::MASK {
                0
            } else if input_tok == target {
                2
            } else {
                1
            };
            masked_vs_kept[kind].1 += 1;
            if best as u32 == target {
                entry.0 += 1;
                masked_vs_kept[kind].0 += 1;
            }
        }
    }
    let total: usize = hits.values().map(|(_, t)| t).sum();
    let correct: usize = hits.values().map(|(c, _)| c).sum();
    println!(
        "overall {}/{} = {:.4}",
        correct,
        total,
        correct as f64 / total as f64
    );
    for (label, (c, t)) in ["[MASK]", "random", "kept"].iter().zip(masked_vs_kept) {
        println!("  {label}: {}/{} = {:.4}", c, t, c as f64 / t.max(1) as f64);
    }
    let mut worst: Vec<(u32, usize, usize)> = hits
        .iter()
        .map(|(&tok, &(c, t))| (tok, t - c, t))
        .collect();
    worst.sort_by_key(|&(_, miss, _)| std::cmp::Reverse(miss));
    println!("top missed targets:");
    for (tok, miss, t) in worst.iter().take(25) {
        println!(
            "  {:>12}  missed {:>4} of {:>4}",
            vocab.token_of(*tok).unwrap(),
            miss,
            t
        );
    }
}
