//! One-knob experiment grids over a labeled corpus.
//!
//! Grids mirror the published comparisons: aggregation method, embedding
//! size (raw first state plus autoencoder widths), pretraining-task design,
//! and full-instruction versus API-call-only input. Each cell writes its own
//! report under the output directory; a summary CSV collects the headline
//! numbers.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use serde::Serialize;

use crate::corpus::{read_corpus_jsonl, Corpus};
use crate::embed::{Aggregation, EmbedMode};
use crate::error::{Error, Result};
use crate::model::train::{pretrain, TrainParams};
use crate::model::{HeadSet, ModelConfig, SmaliBert};
use crate::pretrain::{build_examples, ExampleConfig, MaskScheme};
use crate::rng::derive_seed;
use crate::tasks::FineTuneParams;
use crate::tokenizer::Vocab;

use super::stages::{embed_multi_aggregation, finetune_in_memory, labels_map};
use super::{StageManifest, StageRun};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Grid {
    Aggregation,
    AeSize,
    Heads,
    Api,
}

impl FromStr for Grid {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aggregation" => Ok(Grid::Aggregation),
            "ae-size" | "ae_size" => Ok(Grid::AeSize),
            "heads" => Ok(Grid::Heads),
            "api" => Ok(Grid::Api),
            other => Err(Error::Format(format!("unknown ablation grid {other}"))),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AblateStage {
    pub corpus: PathBuf,
    pub labels: PathBuf,
    pub out_dir: PathBuf,
    pub grid: Grid,
    pub model: ModelConfig,
    pub train: TrainParams,
    pub finetune: FineTuneParams,
    pub classes: usize,
    pub folds: usize,
    pub mask_rate: f64,
    pub negative_ratio: f64,
    pub aggregation: Aggregation,
    pub deterministic: bool,
}

/// Headline numbers of one grid cell.
#[derive(Clone, Debug, Serialize)]
pub struct CellSummary {
    pub cell: String,
    pub f1: f64,
    pub auc: Option<f64>,
    pub embedding_width: usize,
    pub embed_secs_per_class: f64,
}

struct PretrainedBundle {
    model: SmaliBert<f32>,
    vocab: Vocab,
}

fn pretrain_on(
    corpus: &Corpus,
    stage: &AblateStage,
    config: &ModelConfig,
    tag: &str,
) -> Result<PretrainedBundle> {
    let vocab = crate::tokenizer::train_wordpiece(
        corpus.instruction_texts(),
        config.vocab_size,
        2,
        stage.train.seed,
    )?
    .vocab;
    let mut config = config.clone();
    config.vocab_size = vocab.size();
    let examples = build_examples(
        corpus,
        &vocab,
        &ExampleConfig {
            seq_len: config.seq_len,
            negative_ratio: stage.negative_ratio,
            mask: MaskScheme {
                mask_rate: stage.mask_rate,
                ..MaskScheme::default()
            },
            seed: derive_seed(stage.train.seed, tag),
        },
    )?;
    let mut model = SmaliBert::<f32>::new(config, stage.train.seed)?;
    let params = TrainParams {
        seed: derive_seed(stage.train.seed, tag),
        ..stage.train.clone()
    };
    pretrain(&mut model, &examples, &params)?;
    Ok(PretrainedBundle { model, vocab })
}

fn run_cell(
    stage: &AblateStage,
    bundle: &mut PretrainedBundle,
    corpus: &Corpus,
    labels: &HashMap<String, usize>,
    mode: EmbedMode,
    method: Aggregation,
    cell: &str,
) -> Result<CellSummary> {
    let started = Instant::now();
    let embedded = embed_multi_aggregation(
        &mut bundle.model,
        &bundle.vocab,
        corpus,
        mode,
        &[method],
        stage.finetune.seed,
    )?;
    let wall = started.elapsed().as_secs_f64();
    let (_, embeddings) = &embedded[0];
    let report = finetune_in_memory(embeddings, labels, stage.classes, stage.folds, &stage.finetune)?;

    let cell_dir = stage.out_dir.join(cell);
    std::fs::create_dir_all(&cell_dir)?;
    std::fs::write(
        cell_dir.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok(CellSummary {
        cell: cell.to_string(),
        f1: report.primary_f1(),
        auc: report.pooled.auc,
        embedding_width: embeddings.first().map(|e| e.vector.len()).unwrap_or(0),
        embed_secs_per_class: wall / corpus.classes().len().max(1) as f64,
    })
}

pub fn run_ablate(stage: &AblateStage) -> Result<(Vec<CellSummary>, StageManifest)> {
    let mut run = StageRun::begin("ablate", stage, stage.train.seed, stage.deterministic)?;
    run.input(&stage.corpus)?;
    run.input(&stage.labels)?;
    let corpus = read_corpus_jsonl(&stage.corpus)?;
    let labels = labels_map(&stage.labels)?;
    std::fs::create_dir_all(&stage.out_dir)?;

    let mut cells = Vec::new();
    match stage.grid {
        Grid::Aggregation => {
            let mut bundle = pretrain_on(&corpus, stage, &stage.model, "agg")?;
            for method in Aggregation::ALL {
                cells.push(run_cell(
                    stage,
                    &mut bundle,
                    &corpus,
                    &labels,
                    EmbedMode::Ae,
                    method,
                    method.name(),
                )?);
            }
        }
        Grid::AeSize => {
            // Raw first state plus the bottleneck widths; the raw cell reads
            // the default-width checkpoint without its reduction stage.
            for width in [256usize, 128, 64] {
                let config = ModelConfig {
                    ae_hidden: width.min(512),
                    ..stage.model.clone()
                };
                let mut bundle = pretrain_on(&corpus, stage, &config, &format!("ae-{width}"))?;
                cells.push(run_cell(
                    stage,
                    &mut bundle,
                    &corpus,
                    &labels,
                    EmbedMode::Ae,
                    stage.aggregation,
                    &format!("ae_{width}"),
                )?);
                if width == 128 {
                    cells.push(run_cell(
                        stage,
                        &mut bundle,
                        &corpus,
                        &labels,
                        EmbedMode::RawFirstState,
                        stage.aggregation,
                        "raw_first_state",
                    )?);
                }
            }
            // Published order: raw first, then descending widths.
            cells.sort_by_key(|c| match c.cell.as_str() {
                "raw_first_state" => 0,
                "ae_256" => 1,
                "ae_128" => 2,
                _ => 3,
            });
        }
        Grid::Heads => {
            for (label, heads) in [
                ("only_mlm", HeadSet { mlm: true, nip: false, ae: true }),
                ("only_nip", HeadSet { mlm: false, nip: true, ae: true }),
                ("mlm_and_nip", HeadSet::all()),
            ] {
                let config = ModelConfig {
                    enabled_heads: heads,
                    ..stage.model.clone()
                };
                let mut bundle = pretrain_on(&corpus, stage, &config, label)?;
                cells.push(run_cell(
                    stage,
                    &mut bundle,
                    &corpus,
                    &labels,
                    EmbedMode::Ae,
                    stage.aggregation,
                    label,
                )?);
            }
        }
        Grid::Api => {
            let mut bundle = pretrain_on(&corpus, stage, &stage.model, "api")?;
            cells.push(run_cell(
                stage,
                &mut bundle,
                &corpus,
                &labels,
                EmbedMode::Ae,
                stage.aggregation,
                "full_instructions",
            )?);
            let filtered = corpus.filter_api_calls();
            // Invoke-free classes would have no representation; keep only
            // classes that still carry instructions.
            let kept = Corpus::from_classes(
                filtered
                    .classes()
                    .iter()
                    .filter(|c| !c.instructions.is_empty())
                    .cloned()
                    .collect(),
            );
            cells.push(run_cell(
                stage,
                &mut bundle,
                &kept,
                &labels,
                EmbedMode::Ae,
                stage.aggregation,
                "api_only",
            )?);
        }
    }

    let mut summary = String::from("cell,f1,auc,embedding_width,embed_secs_per_class\n");
    for cell in &cells {
        let _ = writeln!(
            summary,
            "{},{},{},{},{}",
            cell.cell,
            cell.f1,
            cell.auc.map(|a| a.to_string()).unwrap_or_default(),
            cell.embedding_width,
            cell.embed_secs_per_class
        );
    }
    let summary_path = stage.out_dir.join("summary.csv");
    std::fs::write(&summary_path, summary)?;
    let manifest = run.finish(&stage.out_dir, &[&stage.out_dir])?;
    Ok((cells, manifest))
}
