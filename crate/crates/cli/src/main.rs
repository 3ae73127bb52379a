//! `smalibert` — pipeline CLI: build a corpus from Smali sources, train a
//! WordPiece vocabulary, generate masked instruction-pair examples, pretrain
//! the encoder, produce class embeddings, fine-tune classifier heads and
//! evaluate them, plus one-knob ablation grids and a synthetic-corpus
//! generator.
//!
//! Global behavior: `--config cfg.json` supplies defaults that individual
//! flags override; every stage writes a manifest next to its primary output
//! recording input/output digests and the seed; `SMALIBERT_THREADS` caps
//! intra-op parallelism.

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use smalibert_core::model::train::TrainParams;
use smalibert_core::pipeline::{
    self, AblateStage, CorpusStage, EmbedStage, EvaluateStage, FinetuneStage, Grid,
    PipelineConfig, PretrainDataStage, PretrainStage, SynthStage, VocabStage,
};
use smalibert_core::tasks::FineTuneParams;

#[derive(Parser)]
#[command(name = "smalibert", version, about = "Smali bytecode representation pipeline")]
struct Cli {
    /// JSON file with pipeline defaults; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed recorded in every artifact this run produces.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Record the run as deterministic (the default; retained for interface
    /// stability — runs are seed-deterministic either way).
    #[arg(long, global = true, default_value_t = true)]
    deterministic: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Corpus construction.
    Corpus {
        #[command(subcommand)]
        action: CorpusAction,
    },
    /// Vocabulary training.
    Vocab {
        #[command(subcommand)]
        action: VocabAction,
    },
    /// Build masked instruction-pair examples.
    PretrainData(PretrainDataArgs),
    /// Pretrain the encoder and its heads.
    Pretrain(PretrainArgs),
    /// Produce class embeddings from a checkpoint.
    Embed(EmbedArgs),
    /// Fine-tune a classifier head with k-fold cross-validation.
    Finetune(FinetuneArgs),
    /// Post-process a fine-tuning report (thresholding, beam selection).
    Evaluate(EvaluateArgs),
    /// Run a one-knob experiment grid.
    Ablate(AblateArgs),
    /// Generate a labeled synthetic corpus.
    Synth(SynthArgs),
}

#[derive(Subcommand)]
enum CorpusAction {
    /// Parse .smali files (or a JSONL export) into the canonical corpus.
    Build(CorpusArgs),
}

#[derive(Subcommand)]
enum VocabAction {
    /// Train a WordPiece vocabulary over a corpus.
    Train(VocabArgs),
}

#[derive(Args)]
struct CorpusArgs {
    /// Directory tree of .smali files, or JSONL with {"name","smali"}.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Drop classes whose instruction sequence duplicates an earlier class.
    #[arg(long)]
    dedup: bool,
    /// Keep only invoke-family instructions.
    #[arg(long)]
    api_only: bool,
    /// Drop debug-info directives (.line, .local, .prologue, ...).
    #[arg(long)]
    strip_debug: bool,
}

#[derive(Args)]
struct VocabArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    min_frequency: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainDataArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    mask_rate: Option<f64>,
    /// Fraction of pairs drawn as negatives.
    #[arg(long)]
    neg: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    examples: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// addition | average | random | concat_resize
    #[arg(long)]
    method: Option<String>,
    /// ae | raw_first_state
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    api_only: bool,
    /// error | zeros — handling of classes left empty by filtering.
    #[arg(long)]
    empty_policy: Option<String>,
    #[arg(long)]
    export_csv: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    emb: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Undersample the majority class (binary tasks).
    #[arg(long)]
    balance: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    report: PathBuf,
    /// Flag the top-N classes per app instead of thresholding only.
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    /// CSV class_name,app_id; default groups by package prefix.
    #[arg(long)]
    apps: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// aggregation | ae-size | heads | api
    #[arg(long)]
    grid: String,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 2)]
    families: usize,
    #[arg(long, default_value_t = 100)]
    classes_per_family: usize,
    #[arg(long, default_value_t = 30)]
    instructions_per_class: usize,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err
                .downcast_ref::<smalibert_core::Error>()
                .map(|e| e.exit_code())
                .unwrap_or(2);
            ExitCode::from(code as u8)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.deterministic = cli.deterministic;

    match cli.command {
        Command::Corpus {
            action: CorpusAction::Build(args),
        } => {
            let stage = CorpusStage {
                input: args.input,
                output: args.out,
                dedup: args.dedup,
                api_only: args.api_only,
                strip_debug: args.strip_debug,
                deterministic: config.deterministic,
            };
            let (stats, _) = pipeline::run_corpus(&stage)?;
            println!(
                "corpus: {} classes, {} instructions, api fraction {:.4}",
                stats.class_count, stats.instruction_count, stats.api_fraction
            );
        }
        Command::Vocab {
            action: VocabAction::Train(args),
        } => {
            let stage = VocabStage {
                corpus: args.corpus,
                output: args.out,
                size: args.size.unwrap_or(config.vocab_size),
                min_frequency: args.min_frequency.unwrap_or(config.min_frequency),
                seed: config.seed,
                deterministic: config.deterministic,
            };
            let (size, _) = pipeline::run_vocab(&stage)?;
            println!("vocab: {size} tokens");
        }
        Command::PretrainData(args) => {
            let stage = PretrainDataStage {
                corpus: args.corpus,
                vocab: args.vocab,
                output: args.out,
                seq_len: args.seq_len.unwrap_or(config.model.seq_len),
                mask_rate: args.mask_rate.unwrap_or(config.mask_rate),
                negative_ratio: args.neg.unwrap_or(config.negative_ratio),
                seed: config.seed,
                deterministic: config.deterministic,
            };
            let (count, _) = pipeline::run_pretrain_data(&stage)?;
            println!("examples: {count}");
        }
        Command::Pretrain(args) => {
            let stage = PretrainStage {
                examples: args.examples,
                vocab: args.vocab,
                out_dir: args.out,
                model: config.model.clone(),
                train: TrainParams {
                    batch: args.batch.unwrap_or(config.batch),
                    lr: args.lr.unwrap_or(config.lr),
                    epochs: args.epochs.unwrap_or(config.epochs),
                    seed: config.seed,
                    warmup_steps: args.warmup_steps.unwrap_or(config.warmup_steps),
                },
                deterministic: config.deterministic,
            };
            let (eval, _) = pipeline::run_pretrain(&stage)?;
            println!(
                "pretrained: mlm acc {:?}, nip acc {:?}, ae mse {:?}",
                eval.mlm_accuracy, eval.nip_accuracy, eval.ae_mse
            );
        }
        Command::Embed(args) => {
            let stage = EmbedStage {
                corpus: args.corpus,
                checkpoint: args.ckpt,
                output: args.out,
                mode: parse_or(args.mode.as_deref(), config.mode)?,
                aggregation: parse_or(args.method.as_deref(), config.aggregation)?,
                api_only: args.api_only || config.api_only,
                empty_policy: parse_or(args.empty_policy.as_deref(), config.empty_policy)?,
                seed: config.seed,
                export_csv: args.export_csv,
                deterministic: config.deterministic,
            };
            let (report, _) = pipeline::run_embed(&stage)?;
            println!(
                "embedded {} classes (width {}) in {:.2}s ({:.5}s/class, {} cache hits, {} empty)",
                report.classes,
                report.width,
                report.wall_secs,
                report.secs_per_class,
                report.cache_hits,
                report.empty_classes
            );
        }
        Command::Finetune(args) => {
            let stage = FinetuneStage {
                embeddings: args.emb,
                labels: args.labels,
                output: args.out,
                classes: args.classes.unwrap_or(config.classes),
                folds: args.folds.unwrap_or(config.folds),
                params: FineTuneParams {
                    batch: args.batch.unwrap_or(config.finetune_batch),
                    epochs: args.epochs.unwrap_or(config.finetune_epochs),
                    lr: args.lr.unwrap_or(config.finetune_lr),
                    seed: config.seed,
                },
                balance: args.balance || config.balance,
                deterministic: config.deterministic,
            };
            let (report, _) = pipeline::run_finetune(&stage)?;
            println!(
                "finetuned: pooled F1 {:.4}, fold-average F1 {:.4}, AUC {:?}",
                report.primary_f1(),
                report.fold_average_f1,
                report.pooled.auc
            );
        }
        Command::Evaluate(args) => {
            let stage = EvaluateStage {
                report: args.report,
                output: args.out,
                threshold: args.threshold.unwrap_or(config.threshold),
                beam_width: args.beam,
                apps: args.apps,
                deterministic: config.deterministic,
            };
            let (output, _) = pipeline::run_evaluate(&stage)?;
            if let Some(m) = &output.thresholded {
                println!(
                    "threshold {}: F1 {:.4} P {:.4} R {:.4} FNR {:.4} FPR {:.4} AUC {:?}",
                    output.threshold,
                    m.f1.unwrap_or(0.0),
                    m.precision.unwrap_or(0.0),
                    m.recall.unwrap_or(0.0),
                    m.fnr.unwrap_or(0.0),
                    m.fpr.unwrap_or(0.0),
                    m.auc
                );
            }
            if let (Some(width), Some(m)) = (output.beam_width, &output.beam) {
                println!(
                    "beam {width}: F1 {:.4} P {:.4} R {:.4} over {} apps",
                    m.f1.unwrap_or(0.0),
                    m.precision.unwrap_or(0.0),
                    m.recall.unwrap_or(0.0),
                    output.apps.unwrap_or(0)
                );
            }
        }
        Command::Ablate(args) => {
            let stage = AblateStage {
                corpus: args.corpus,
                labels: args.labels,
                out_dir: args.out_dir,
                grid: Grid::from_str(&args.grid)?,
                model: config.model.clone(),
                train: TrainParams {
                    batch: args.batch.unwrap_or(config.batch),
                    lr: args.lr.unwrap_or(config.lr),
                    epochs: args.epochs.unwrap_or(config.epochs),
                    seed: config.seed,
                    warmup_steps: config.warmup_steps,
                },
                finetune: FineTuneParams {
                    batch: config.finetune_batch,
                    epochs: config.finetune_epochs,
                    lr: config.finetune_lr,
                    seed: config.seed,
                },
                classes: args.classes.unwrap_or(config.classes),
                folds: args.folds.unwrap_or(config.folds),
                mask_rate: config.mask_rate,
                negative_ratio: config.negative_ratio,
                aggregation: config.aggregation,
                deterministic: config.deterministic,
            };
            let (cells, _) = pipeline::run_ablate(&stage)?;
            for cell in &cells {
                println!(
                    "{}: F1 {:.4} (width {}, {:.5}s/class)",
                    cell.cell, cell.f1, cell.embedding_width, cell.embed_secs_per_class
                );
            }
        }
        Command::Synth(args) => {
            let stage = SynthStage {
                out_dir: args.out,
                families: args.families,
                classes_per_family: args.classes_per_family,
                instructions_per_class: args.instructions_per_class,
                seed: config.seed,
                deterministic: config.deterministic,
            };
            let (count, _) = pipeline::run_synth(&stage)?;
            println!("generated {count} classes");
        }
    }
    Ok(())
}

fn parse_or<T: FromStr<Err = smalibert_core::Error>>(
    flag: Option<&str>,
    fallback: T,
) -> anyhow::Result<T> {
    match flag {
        Some(s) => Ok(T::from_str(s)?),
        None => Ok(fallback),
    }
}
