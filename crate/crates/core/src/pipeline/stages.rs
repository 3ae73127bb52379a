//! The pipeline stages behind the CLI subcommands.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, load_model, save_checkpoint};
use crate::corpus::{load_corpus, read_corpus_jsonl, write_corpus_jsonl, Corpus, CorpusStats};
use crate::embed::{
    aggregate, chunk_class, embed_chunks, read_store, write_store, Aggregation, ClassEmbedding,
    EmbedMode, EmbeddingCache,
};
use crate::error::{Error, Result};
use crate::model::train::{evaluate_pretrain, pretrain, PretrainEval, TrainParams};
use crate::model::{ModelConfig, SmaliBert};
use crate::pretrain::{build_examples, read_examples, write_examples, ExampleConfig, MaskScheme};
use crate::rng::derive_seed;
use crate::synth::{synth_corpus, write_synth_corpus, SynthSpec};
use crate::tasks::{
    beam_select, evaluate_binary, evaluate_multiclass, fine_tune, kfold, read_labels_csv,
    threshold_classify, FineTuneParams, HeadConfig, LabeledDataset, MetricsReport,
};
use crate::tokenizer::{train_wordpiece, Vocab};

use super::{StageManifest, StageRun};

/// How an invoke-free class is treated in API-only embedding mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyPolicy {
    Error,
    Zeros,
}

impl FromStr for EmptyPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "error" => Ok(EmptyPolicy::Error),
            "zeros" => Ok(EmptyPolicy::Zeros),
            other => Err(Error::Format(format!("unknown empty policy {other}"))),
        }
    }
}

impl fmt::Display for EmptyPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmptyPolicy::Error => "error",
            EmptyPolicy::Zeros => "zeros",
        })
    }
}

// ---------------------------------------------------------------------------
// corpus

#[derive(Clone, Debug, Serialize)]
pub struct CorpusStage {
    pub input: PathBuf,
    pub output: PathBuf,
    pub dedup: bool,
    pub api_only: bool,
    pub strip_debug: bool,
    pub deterministic: bool,
}

pub fn run_corpus(stage: &CorpusStage) -> Result<(CorpusStats, StageManifest)> {
    let mut run = StageRun::begin("corpus", stage, 0, stage.deterministic)?;
    run.input(&stage.input)?;
    let (mut corpus, warnings) = load_corpus(&stage.input)?;
    for (path, warning) in &warnings {
        eprintln!("warning: {}:{}: {}", path.display(), warning.line, warning.message);
    }
    if stage.strip_debug {
        corpus = corpus.strip_debug();
    }
    if stage.dedup {
        corpus = corpus.dedup();
    }
    if stage.api_only {
        corpus = corpus.filter_api_calls();
    }
    write_corpus_jsonl(&corpus, &stage.output)?;
    let manifest = run.finish(&stage.output, &[&stage.output])?;
    Ok((*corpus.stats(), manifest))
}

// ---------------------------------------------------------------------------
// vocab

#[derive(Clone, Debug, Serialize)]
pub struct VocabStage {
    pub corpus: PathBuf,
    pub output: PathBuf,
    pub size: usize,
    pub min_frequency: u64,
    pub seed: u64,
    pub deterministic: bool,
}

pub fn run_vocab(stage: &VocabStage) -> Result<(usize, StageManifest)> {
    let mut run = StageRun::begin("vocab", stage, stage.seed, stage.deterministic)?;
    run.input(&stage.corpus)?;
    let corpus = read_corpus_jsonl(&stage.corpus)?;
    let outcome = train_wordpiece(
        corpus.instruction_texts(),
        stage.size,
        stage.min_frequency,
        stage.seed,
    )?;
    for warning in &outcome.warnings {
        eprintln!("warning: {warning}");
    }
    outcome.vocab.save(&stage.output)?;
    let manifest = run.finish(&stage.output, &[&stage.output])?;
    Ok((outcome.vocab.size(), manifest))
}

// ---------------------------------------------------------------------------
// pretrain-data

#[derive(Clone, Debug, Serialize)]
pub struct PretrainDataStage {
    pub corpus: PathBuf,
    pub vocab: PathBuf,
    pub output: PathBuf,
    pub seq_len: usize,
    pub mask_rate: f64,
    pub negative_ratio: f64,
    pub seed: u64,
    pub deterministic: bool,
}

pub fn run_pretrain_data(stage: &PretrainDataStage) -> Result<(usize, StageManifest)> {
    let mut run = StageRun::begin("pretrain-data", stage, stage.seed, stage.deterministic)?;
    run.input(&stage.corpus)?;
    run.input(&stage.vocab)?;
    let corpus = read_corpus_jsonl(&stage.corpus)?;
    let vocab = Vocab::load(&stage.vocab)?;
    let cfg = ExampleConfig {
        seq_len: stage.seq_len,
        negative_ratio: stage.negative_ratio,
        mask: MaskScheme {
            mask_rate: stage.mask_rate,
            ..MaskScheme::default()
        },
        seed: stage.seed,
    };
    let examples = build_examples(&corpus, &vocab, &cfg)?;
    write_examples(&stage.output, &examples)?;
    let manifest = run.finish(&stage.output, &[&stage.output])?;
    Ok((examples.len(), manifest))
}

// ---------------------------------------------------------------------------
// pretrain

#[derive(Clone, Debug, Serialize)]
pub struct PretrainStage {
    pub examples: PathBuf,
    pub vocab: PathBuf,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainParams,
    pub deterministic: bool,
}

pub fn run_pretrain(stage: &PretrainStage) -> Result<(PretrainEval, StageManifest)> {
    let mut run = StageRun::begin("pretrain", stage, stage.train.seed, stage.deterministic)?;
    run.input(&stage.examples)?;
    run.input(&stage.vocab)?;
    let examples = read_examples(&stage.examples)?;
    let vocab_text = std::fs::read_to_string(&stage.vocab)?;
    let vocab = Vocab::load(&stage.vocab)?;

    let mut config = stage.model.clone();
    if config.vocab_size != vocab.size() {
        eprintln!(
            "note: sizing the model vocabulary to the trained vocab ({} tokens)",
            vocab.size()
        );
        config.vocab_size = vocab.size();
    }
    for ex in &examples {
        ex.validate(config.seq_len, config.vocab_size)?;
    }

    let mut model = SmaliBert::<f32>::new(config, stage.train.seed)?;
    let (curves, adam) = pretrain(&mut model, &examples, &stage.train)?;
    std::fs::create_dir_all(&stage.out_dir)?;
    std::fs::write(stage.out_dir.join("loss_curves.csv"), curves.to_csv())?;
    save_checkpoint(
        &stage.out_dir,
        &mut model,
        Some(&adam),
        &vocab_text,
        stage.train.seed,
    )?;
    let eval = evaluate_pretrain(&mut model, &examples)?;
    let manifest = run.finish(&stage.out_dir, &[&stage.out_dir])?;
    Ok((eval, manifest))
}

// ---------------------------------------------------------------------------
// embed

#[derive(Clone, Debug, Serialize)]
pub struct EmbedStage {
    pub corpus: PathBuf,
    pub checkpoint: PathBuf,
    pub output: PathBuf,
    pub mode: EmbedMode,
    pub aggregation: Aggregation,
    pub api_only: bool,
    pub empty_policy: EmptyPolicy,
    pub seed: u64,
    pub export_csv: Option<PathBuf>,
    pub deterministic: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EmbedReport {
    pub classes: usize,
    pub empty_classes: usize,
    pub cache_hits: usize,
    pub wall_secs: f64,
    pub secs_per_class: f64,
    pub width: usize,
}

pub fn run_embed(stage: &EmbedStage) -> Result<(EmbedReport, StageManifest)> {
    let mut run = StageRun::begin("embed", stage, stage.seed, stage.deterministic)?;
    run.input(&stage.corpus)?;
    run.input(&stage.checkpoint)?;
    let corpus = read_corpus_jsonl(&stage.corpus)?;
    let corpus = if stage.api_only {
        corpus.filter_api_calls()
    } else {
        corpus
    };
    let (mut model, manifest) = load_model::<f32>(&stage.checkpoint, 0)?;
    let vocab = Vocab::load(&checkpoint::checkpoint_vocab_path(&stage.checkpoint))?;
    let vocab_digest =
        checkpoint::file_digest(&checkpoint::checkpoint_vocab_path(&stage.checkpoint))?;
    if vocab_digest != manifest.vocab_digest {
        return Err(Error::ConfigMismatch(
            "checkpoint vocabulary does not match its manifest digest".into(),
        ));
    }
    if vocab.size() != model.config.vocab_size {
        return Err(Error::ConfigMismatch(format!(
            "vocab has {} tokens but the model expects {}",
            vocab.size(),
            model.config.vocab_size
        )));
    }
    let ckpt_digest = checkpoint::checkpoint_digest(&stage.checkpoint)?;

    let width = match stage.mode {
        EmbedMode::Ae => model.config.ae_hidden,
        EmbedMode::RawFirstState => model.config.hidden,
    };
    let cache = EmbeddingCache::new();
    let mut embeddings = Vec::with_capacity(corpus.classes().len());
    let mut empty_classes = 0usize;
    let mut cache_hits = 0usize;
    let started = Instant::now();
    for class in corpus.classes() {
        if class.instructions.is_empty() {
            match stage.empty_policy {
                EmptyPolicy::Error => return Err(Error::EmptyClass(class.name.clone())),
                EmptyPolicy::Zeros => {
                    empty_classes += 1;
                    embeddings.push(ClassEmbedding {
                        class_name: class.name.clone(),
                        hash: class.content_hash.clone(),
                        vector: vec![0.0; width],
                        chunk_count: 0,
                        mode: stage.mode,
                        aggregation: stage.aggregation,
                    });
                    continue;
                }
            }
        }
        let vector = match cache.get(
            &class.content_hash,
            &ckpt_digest,
            stage.mode,
            stage.aggregation,
            stage.seed,
        ) {
            Some(v) => {
                cache_hits += 1;
                v
            }
            None => {
                let emb = crate::embed::embed_class(
                    &mut model,
                    &vocab,
                    class,
                    stage.aggregation,
                    stage.mode,
                    stage.seed,
                )?;
                cache.insert(
                    &class.content_hash,
                    &ckpt_digest,
                    stage.mode,
                    stage.aggregation,
                    stage.seed,
                    emb.vector.clone(),
                );
                embeddings.push(emb.clone());
                continue;
            }
        };
        let chunk_count = chunk_class(class, &vocab, model.config.seq_len)?.len();
        embeddings.push(ClassEmbedding {
            class_name: class.name.clone(),
            hash: class.content_hash.clone(),
            vector,
            chunk_count,
            mode: stage.mode,
            aggregation: stage.aggregation,
        });
    }
    let wall = started.elapsed().as_secs_f64();
    write_store(&stage.output, &embeddings)?;
    if let Some(csv) = &stage.export_csv {
        crate::embed::export_csv(csv, &embeddings)?;
    }
    let report = EmbedReport {
        classes: embeddings.len(),
        empty_classes,
        cache_hits,
        wall_secs: wall,
        secs_per_class: wall / embeddings.len().max(1) as f64,
        width,
    };
    let manifest = run.finish(&stage.output, &[&stage.output])?;
    Ok((report, manifest))
}

// ---------------------------------------------------------------------------
// finetune

#[derive(Clone, Debug, Serialize)]
pub struct FinetuneStage {
    pub embeddings: PathBuf,
    pub labels: PathBuf,
    pub output: PathBuf,
    pub classes: usize,
    pub folds: usize,
    pub params: FineTuneParams,
    pub balance: bool,
    pub deterministic: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub class_name: String,
    pub label: usize,
    pub predicted: usize,
    pub probabilities: Vec<f32>,
    pub fold: usize,
}

impl PredictionRecord {
    /// Positive-class probability of a binary prediction.
    pub fn m_score(&self) -> f64 {
        self.probabilities.get(1).copied().unwrap_or(0.0) as f64
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub metrics: MetricsReport,
}

/// Fine-tuning report: per-fold metrics, their plain average, and the
/// pooled metrics over every held-out prediction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskReport {
    pub classes: usize,
    pub folds: Vec<FoldReport>,
    pub pooled: MetricsReport,
    pub fold_average_f1: f64,
    pub fold_average_auc: Option<f64>,
    pub predictions: Vec<PredictionRecord>,
    pub seed: u64,
}

impl TaskReport {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn primary_f1(&self) -> f64 {
        if self.classes == 2 {
            self.pooled.f1.unwrap_or(0.0)
        } else {
            self.pooled.macro_f1
        }
    }
}

pub fn run_finetune(stage: &FinetuneStage) -> Result<(TaskReport, StageManifest)> {
    let mut run = StageRun::begin("finetune", stage, stage.params.seed, stage.deterministic)?;
    run.input(&stage.embeddings)?;
    run.input(&stage.labels)?;
    let store = read_store(&stage.embeddings)?;
    let labels = read_labels_csv(&stage.labels)?;
    let by_name: std::collections::HashMap<&str, usize> =
        labels.iter().map(|(n, l)| (n.as_str(), *l)).collect();

    let mut names = Vec::new();
    let mut items: Vec<(Vec<f32>, usize)> = Vec::new();
    for emb in &store {
        if let Some(&label) = by_name.get(emb.class_name.as_str()) {
            names.push(emb.class_name.clone());
            items.push((emb.vector.clone(), label));
        }
    }
    if items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let width = items[0].0.len();
    let dataset = LabeledDataset::new(items, stage.classes)?;
    let dataset = if stage.balance && stage.classes == 2 {
        // Balancing drops names alignment; rebuild names from the kept rows.
        let balanced = dataset.balance_binary(stage.params.seed);
        names = vec![String::new(); balanced.items.len()];
        balanced
    } else {
        dataset
    };

    let folds = kfold(dataset.items.len(), stage.folds, stage.params.seed)?;
    let mut fold_reports = Vec::new();
    let mut predictions: Vec<PredictionRecord> = Vec::new();
    for (fold_idx, (train_idx, test_idx)) in folds.iter().enumerate() {
        let train_items: Vec<(Vec<f32>, usize)> = train_idx
            .iter()
            .map(|&i| dataset.items[i].clone())
            .collect();
        let train = LabeledDataset::new(train_items, stage.classes)?;
        let fold_params = FineTuneParams {
            seed: derive_seed(stage.params.seed, &format!("fold-{fold_idx}")),
            ..stage.params.clone()
        };
        let mut head = fine_tune(&train, HeadConfig::new(width, stage.classes), &fold_params)?;

        let mut fold_preds = Vec::new();
        for &i in test_idx {
            let (v, label) = &dataset.items[i];
            let probs = head.predict(v)?;
            let predicted = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
                .map(|(c, _)| c)
                .unwrap_or(0);
            fold_preds.push(PredictionRecord {
                class_name: names.get(i).cloned().unwrap_or_default(),
                label: *label,
                predicted,
                probabilities: probs.iter().map(|&p| p).collect(),
                fold: fold_idx,
            });
        }
        let metrics = metrics_over(&fold_preds, stage.classes)?;
        fold_reports.push(FoldReport {
            fold: fold_idx,
            train_size: train_idx.len(),
            test_size: test_idx.len(),
            metrics,
        });
        predictions.extend(fold_preds);
    }

    let pooled = metrics_over(&predictions, stage.classes)?;
    let fold_average_f1 = fold_reports
        .iter()
        .map(|f| {
            if stage.classes == 2 {
                f.metrics.f1.unwrap_or(0.0)
            } else {
                f.metrics.macro_f1
            }
        })
        .sum::<f64>()
        / fold_reports.len() as f64;
    let fold_aucs: Vec<f64> = fold_reports.iter().filter_map(|f| f.metrics.auc).collect();
    let report = TaskReport {
        classes: stage.classes,
        folds: fold_reports,
        pooled,
        fold_average_f1,
        fold_average_auc: (!fold_aucs.is_empty())
            .then(|| fold_aucs.iter().sum::<f64>() / fold_aucs.len() as f64),
        predictions,
        seed: stage.params.seed,
    };
    std::fs::write(&stage.output, serde_json::to_string_pretty(&report)?)?;
    let manifest = run.finish(&stage.output, &[&stage.output])?;
    Ok((report, manifest))
}

fn metrics_over(preds: &[PredictionRecord], classes: usize) -> Result<MetricsReport> {
    if classes == 2 {
        let predicted: Vec<bool> = preds.iter().map(|p| p.predicted == 1).collect();
        let labels: Vec<bool> = preds.iter().map(|p| p.label == 1).collect();
        let scores: Vec<f64> = preds.iter().map(|p| p.m_score()).collect();
        evaluate_binary(&predicted, &labels, Some(&scores))
    } else {
        let predicted: Vec<usize> = preds.iter().map(|p| p.predicted).collect();
        let labels: Vec<usize> = preds.iter().map(|p| p.label).collect();
        evaluate_multiclass(&predicted, &labels, classes)
    }
}

// ---------------------------------------------------------------------------
// evaluate

#[derive(Clone, Debug, Serialize)]
pub struct EvaluateStage {
    pub report: PathBuf,
    pub output: Option<PathBuf>,
    pub threshold: f64,
    pub beam_width: Option<usize>,
    /// Optional CSV `class_name,app_id`; defaults to grouping by the package
    /// prefix of the class descriptor.
    pub apps: Option<PathBuf>,
    pub deterministic: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvaluationOutput {
    pub threshold: f64,
    pub thresholded: Option<MetricsReport>,
    pub beam_width: Option<usize>,
    pub beam: Option<MetricsReport>,
    pub apps: Option<usize>,
}

fn app_of(class_name: &str) -> String {
    match class_name.rfind('/') {
        Some(idx) => class_name[..idx].to_string(),
        None => class_name.to_string(),
    }
}

pub fn run_evaluate(stage: &EvaluateStage) -> Result<(EvaluationOutput, StageManifest)> {
    let mut run = StageRun::begin("evaluate", stage, 0, stage.deterministic)?;
    run.input(&stage.report)?;
    let report = TaskReport::load(&stage.report)?;

    let mut thresholded = None;
    let mut beam_metrics = None;
    let mut app_count = None;
    if report.classes == 2 {
        let scores: Vec<f64> = report.predictions.iter().map(|p| p.m_score()).collect();
        let labels: Vec<bool> = report.predictions.iter().map(|p| p.label == 1).collect();
        let predicted = threshold_classify(&scores, stage.threshold);
        thresholded = Some(evaluate_binary(&predicted, &labels, Some(&scores))?);

        if let Some(width) = stage.beam_width {
            let app_map: Option<std::collections::HashMap<String, String>> = match &stage.apps {
                Some(path) => {
                    run.input(path)?;
                    let rows = read_labels_csv_strings(path)?;
                    Some(rows.into_iter().collect())
                }
                None => None,
            };
            let mut per_app: std::collections::BTreeMap<String, Vec<(usize, f64)>> =
                Default::default();
            for (i, p) in report.predictions.iter().enumerate() {
                let app = match &app_map {
                    Some(map) => map
                        .get(&p.class_name)
                        .cloned()
                        .unwrap_or_else(|| app_of(&p.class_name)),
                    None => app_of(&p.class_name),
                };
                per_app.entry(app).or_default().push((i, p.m_score()));
            }
            app_count = Some(per_app.len());
            let grouped: Vec<(String, Vec<(usize, f64)>)> = per_app.into_iter().collect();
            let flagged = beam_select(&grouped, width);
            let mut predicted = vec![false; report.predictions.len()];
            for (_, classes) in &flagged {
                for &i in classes {
                    predicted[i] = true;
                }
            }
            beam_metrics = Some(evaluate_binary(&predicted, &labels, Some(&scores))?);
        }
    }

    let output = EvaluationOutput {
        threshold: stage.threshold,
        thresholded,
        beam_width: stage.beam_width,
        beam: beam_metrics,
        apps: app_count,
    };
    let out_path = stage
        .output
        .clone()
        .unwrap_or_else(|| stage.report.with_extension("eval.json"));
    std::fs::write(&out_path, serde_json::to_string_pretty(&output)?)?;
    let manifest = run.finish(&out_path, &[&out_path])?;
    Ok((output, manifest))
}

fn read_labels_csv_strings(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || (idx == 0 && trimmed.starts_with("class_name,")) {
            continue;
        }
        let (name, value) = trimmed.rsplit_once(',').ok_or_else(|| {
            Error::Format(format!("{}:{}: expected class_name,value", path.display(), idx + 1))
        })?;
        out.push((name.to_string(), value.trim().to_string()));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// synth

#[derive(Clone, Debug, Serialize)]
pub struct SynthStage {
    pub out_dir: PathBuf,
    pub families: usize,
    pub classes_per_family: usize,
    pub instructions_per_class: usize,
    pub seed: u64,
    pub deterministic: bool,
}

pub fn run_synth(stage: &SynthStage) -> Result<(usize, StageManifest)> {
    let run = StageRun::begin("synth", stage, stage.seed, stage.deterministic)?;
    let spec = SynthSpec {
        families: stage.families,
        classes_per_family: stage.classes_per_family,
        instructions_per_class: stage.instructions_per_class,
        seed: stage.seed,
    };
    let classes = synth_corpus(&spec)?;
    std::fs::create_dir_all(&stage.out_dir)?;
    let (classes_dir, labels) = write_synth_corpus(&stage.out_dir, &classes)?;
    let manifest = run.finish(&stage.out_dir, &[&classes_dir, &labels])?;
    Ok((classes.len(), manifest))
}

// ---------------------------------------------------------------------------
// helpers shared with the ablation harness

/// Embed a corpus once per aggregation method, sharing the per-class chunk
/// embeddings across methods.
pub(crate) fn embed_multi_aggregation(
    model: &mut SmaliBert<f32>,
    vocab: &Vocab,
    corpus: &Corpus,
    mode: EmbedMode,
    methods: &[Aggregation],
    seed: u64,
) -> Result<Vec<(Aggregation, Vec<ClassEmbedding>)>> {
    let mut per_method: Vec<(Aggregation, Vec<ClassEmbedding>)> =
        methods.iter().map(|&m| (m, Vec::new())).collect();
    for class in corpus.classes() {
        let inputs = chunk_class(class, vocab, model.config.seq_len)?;
        let chunks = embed_chunks(model, &inputs, mode)?;
        for (method, out) in per_method.iter_mut() {
            let vector = aggregate(&chunks, *method, seed)?;
            out.push(ClassEmbedding {
                class_name: class.name.clone(),
                hash: class.content_hash.clone(),
                vector,
                chunk_count: inputs.len(),
                mode,
                aggregation: *method,
            });
        }
    }
    Ok(per_method)
}

/// Quick fold evaluation used by the ablation harness: fine-tune over the
/// given embeddings/labels and return the pooled report.
pub(crate) fn finetune_in_memory(
    embeddings: &[ClassEmbedding],
    labels: &std::collections::HashMap<String, usize>,
    classes: usize,
    folds: usize,
    params: &FineTuneParams,
) -> Result<TaskReport> {
    let mut names = Vec::new();
    let mut items = Vec::new();
    for emb in embeddings {
        if let Some(&label) = labels.get(&emb.class_name) {
            names.push(emb.class_name.clone());
            items.push((emb.vector.clone(), label));
        }
    }
    if items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let width = items[0].0.len();
    let dataset = LabeledDataset::new(items, classes)?;
    let fold_splits = kfold(dataset.items.len(), folds, params.seed)?;
    let mut fold_reports = Vec::new();
    let mut predictions = Vec::new();
    for (fold_idx, (train_idx, test_idx)) in fold_splits.iter().enumerate() {
        let train = LabeledDataset::new(
            train_idx.iter().map(|&i| dataset.items[i].clone()).collect(),
            classes,
        )?;
        let fold_params = FineTuneParams {
            seed: derive_seed(params.seed, &format!("fold-{fold_idx}")),
            ..params.clone()
        };
        let mut head = fine_tune(&train, HeadConfig::new(width, classes), &fold_params)?;
        let mut fold_preds = Vec::new();
        for &i in test_idx {
            let (v, label) = &dataset.items[i];
            let probs = head.predict(v)?;
            let predicted = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
                .map(|(c, _)| c)
                .unwrap_or(0);
            fold_preds.push(PredictionRecord {
                class_name: names[i].clone(),
                label: *label,
                predicted,
                probabilities: probs.clone(),
                fold: fold_idx,
            });
        }
        let metrics = metrics_over(&fold_preds, classes)?;
        fold_reports.push(FoldReport {
            fold: fold_idx,
            train_size: train_idx.len(),
            test_size: test_idx.len(),
            metrics,
        });
        predictions.extend(fold_preds);
    }
    let pooled = metrics_over(&predictions, classes)?;
    let fold_average_f1 = fold_reports
        .iter()
        .map(|f| {
            if classes == 2 {
                f.metrics.f1.unwrap_or(0.0)
            } else {
                f.metrics.macro_f1
            }
        })
        .sum::<f64>()
        / fold_reports.len() as f64;
    let fold_aucs: Vec<f64> = fold_reports.iter().filter_map(|f| f.metrics.auc).collect();
    Ok(TaskReport {
        classes,
        folds: fold_reports,
        pooled,
        fold_average_f1,
        fold_average_auc: (!fold_aucs.is_empty())
            .then(|| fold_aucs.iter().sum::<f64>() / fold_aucs.len() as f64),
        predictions,
        seed: params.seed,
    })
}

pub(crate) fn labels_map(path: &Path) -> Result<std::collections::HashMap<String, usize>> {
    Ok(read_labels_csv(path)?.into_iter().collect())
}
