use smalibert_core::model::train::{evaluate_pretrain, pretrain, TrainParams};
use smalibert_core::model::{ModelConfig, SmaliBert};
use smalibert_core::pretrain::{build_examples, ExampleConfig};
use smalibert_core::synth::{synth_corpus, SynthSpec};
use smalibert_core::tokenizer::train_wordpiece;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let instr: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let lr1: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2e-3);
    let phase1: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(6);
    let lr2: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(5e-4);
    let phase2: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(20);
    let batch: usize = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(8);
    let vocab_size: usize = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(1000);

    let classes = synth_corpus(&SynthSpec {
        families: 2,
        classes_per_family: 100,
        instructions_per_class: instr,
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
    println!(
        "{} classes, vocab {}, {} examples, lr {lr1}x{phase1}+{lr2}x{phase2}, batch {batch}",
        corpus.stats().class_count,
        vocab.size(),
        examples.len()
    );

    let mut model = SmaliBert::<f32>::new(config, 3).unwrap();
    let t = Instant::now();
    for epoch in 1..=(phase1 + phase2) {
        let lr = if epoch <= phase1 { lr1 } else { lr2 };
        let params = TrainParams {
            batch,
            lr,
            epochs: 1,
            seed: 100 + epoch as u64,
            warmup_steps: 0,
        };
        let (curves, _) = pretrain(&mut model, &examples, &params).unwrap();
        let last = curves.points.last().unwrap();
        let eval = evaluate_pretrain(&mut model, &examples).unwrap();
        println!(
            "epoch {epoch} (lr {lr}): {:5.0}s mlm_loss {:.3} nip_loss {:.3} ae_loss {:.5} | mlm_acc {:.4} nip_acc {:.4} ae_mse {:.5}",
            t.elapsed().as_secs_f64(),
            last.mlm_loss.unwrap(),
            last.nip_loss.unwrap(),
            last.ae_loss.unwrap(),
            eval.mlm_accuracy.unwrap(),
            eval.nip_accuracy.unwrap(),
            eval.ae_mse.unwrap()
        );
        if eval.mlm_accuracy.unwrap() >= 0.95 && eval.nip_accuracy.unwrap() >= 0.99 {
            println!(
                "targets reached at epoch {epoch}, {:.1}s",
                t.elapsed().as_secs_f64()
            );
            break;
        }
    }
}
