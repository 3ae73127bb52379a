//! Frozen-backbone classification heads and evaluation harnesses.
//!
//! The prediction model is three dense layers over a precomputed class
//! embedding; only these weights train, the encoder checkpoint is never
//! touched. Binary tasks report precision/recall/F1/FNR/FPR plus a
//! rank-based AUC with midrank tie handling; multi-class tasks report
//! per-class F1 and the macro average.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::losses::cross_entropy;
use crate::nn::{softmax_rows, Linear, Net, Relu};
use crate::optim::{Adam, AdamParams};
use crate::rng::{derive_seed, rng_from_seed};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Layer plan of the prediction head. The hidden chain narrows
/// `input -> 64 -> 32 -> classes` by default.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub input_width: usize,
    pub hidden: [usize; 2],
    pub classes: usize,
}

impl HeadConfig {
    pub fn new(input_width: usize, classes: usize) -> Self {
        HeadConfig {
            input_width,
            hidden: [64, 32],
            classes,
        }
    }
}

/// Weight parameters only, biases excluded: the counting convention for the
/// published head sizes.
pub fn count_head_weights(config: &HeadConfig) -> usize {
    config.input_width * config.hidden[0]
        + config.hidden[0] * config.hidden[1]
        + config.hidden[1] * config.classes
}

/// Three dense layers with rectifier activations between them.
#[derive(Clone, Debug)]
pub struct ClassifierHead<S> {
    config: HeadConfig,
    first: Linear<S>,
    act1: Relu<S>,
    second: Linear<S>,
    act2: Relu<S>,
    output: Linear<S>,
}

impl<S: Scalar> ClassifierHead<S> {
    pub fn new(config: HeadConfig, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        ClassifierHead {
            first: Linear::new("head.first", config.input_width, config.hidden[0], &mut rng),
            act1: Relu::default(),
            second: Linear::new("head.second", config.hidden[0], config.hidden[1], &mut rng),
            act2: Relu::default(),
            output: Linear::new("head.output", config.hidden[1], config.classes, &mut rng),
            config,
        }
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    fn forward(&mut self, batch: &Tensor<S>) -> Tensor<S> {
        let h1 = self.act1.forward(&self.first.forward(batch));
        let h2 = self.act2.forward(&self.second.forward(&h1));
        self.output.forward(&h2)
    }

    fn backward(&mut self, grad: &Tensor<S>) {
        let g = self.act2.backward(&self.output.backward(grad));
        let g = self.act1.backward(&self.second.backward(&g));
        let _ = self.first.backward(&g);
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut crate::nn::Param<S>)) {
        self.first.visit_params(f);
        self.second.visit_params(f);
        self.output.visit_params(f);
    }

    fn zero_grad(&mut self) {
        self.visit_params(&mut |_, p| p.zero_grad());
    }

    /// Weight scalars excluding biases; must agree with
    /// [`count_head_weights`].
    pub fn allocated_weights(&mut self) -> usize {
        let mut total = 0;
        self.visit_params(&mut |name, p| {
            if name.ends_with(".weight") {
                total += p.count();
            }
        });
        total
    }

    /// Class probabilities for one embedding.
    pub fn predict(&mut self, embedding: &[S]) -> Result<Vec<S>> {
        if embedding.len() != self.config.input_width {
            return Err(Error::WidthMismatch {
                expected: self.config.input_width,
                got: embedding.len(),
            });
        }
        let x = Tensor::from_vec(&[1, embedding.len()], embedding.to_vec())?;
        let logits = self.forward(&x);
        Ok(softmax_rows(&logits).into_data())
    }

    /// Probability of the positive class (index 1): the maliciousness score
    /// for the binary security tasks.
    pub fn m_score(&mut self, embedding: &[S]) -> Result<S> {
        let probs = self.predict(embedding)?;
        probs
            .get(1)
            .copied()
            .ok_or_else(|| Error::ConfigMismatch("m-score needs two classes".into()))
    }
}

/// Items of one classification task: embedding vectors plus integer labels.
#[derive(Clone, Debug, Default)]
pub struct LabeledDataset<S> {
    pub items: Vec<(Vec<S>, usize)>,
    pub classes: usize,
}

impl<S: Scalar> LabeledDataset<S> {
    pub fn new(items: Vec<(Vec<S>, usize)>, classes: usize) -> Result<Self> {
        for (v, label) in &items {
            if *label >= classes {
                return Err(Error::Format(format!(
                    "label {label} out of range for {classes} classes"
                )));
            }
            if v.len() != items[0].0.len() {
                return Err(Error::WidthMismatch {
                    expected: items[0].0.len(),
                    got: v.len(),
                });
            }
        }
        Ok(LabeledDataset { items, classes })
    }

    pub fn width(&self) -> usize {
        self.items.first().map(|(v, _)| v.len()).unwrap_or(0)
    }

    /// Random undersampling of the majority class of a binary task.
    pub fn balance_binary(&self, seed: u64) -> LabeledDataset<S> {
        let mut positive: Vec<&(Vec<S>, usize)> =
            self.items.iter().filter(|(_, l)| *l == 1).collect();
        let mut negative: Vec<&(Vec<S>, usize)> =
            self.items.iter().filter(|(_, l)| *l == 0).collect();
        let mut rng = rng_from_seed(derive_seed(seed, "balance"));
        let keep = positive.len().min(negative.len());
        positive.shuffle(&mut rng);
        negative.shuffle(&mut rng);
        let mut items: Vec<(Vec<S>, usize)> = positive
            .into_iter()
            .take(keep)
            .chain(negative.into_iter().take(keep))
            .cloned()
            .collect();
        items.shuffle(&mut rng);
        LabeledDataset {
            items,
            classes: self.classes,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FineTuneParams {
    pub batch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for FineTuneParams {
    fn default() -> Self {
        FineTuneParams {
            batch: 256,
            epochs: 40,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Train a head on precomputed embeddings with cross-entropy and Adam.
/// The backbone is untouched by construction: only head parameters exist
/// here.
pub fn fine_tune<S: Scalar>(
    dataset: &LabeledDataset<S>,
    head_config: HeadConfig,
    params: &FineTuneParams,
) -> Result<ClassifierHead<S>> {
    if dataset.items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if dataset.width() != head_config.input_width {
        return Err(Error::WidthMismatch {
            expected: head_config.input_width,
            got: dataset.width(),
        });
    }
    let mut head = ClassifierHead::new(head_config, derive_seed(params.seed, "head-init"));
    let mut adam = Adam::new(AdamParams {
        lr: params.lr,
        ..AdamParams::default()
    });
    let width = dataset.width();
    let mut order: Vec<usize> = (0..dataset.items.len()).collect();
    for epoch in 0..params.epochs {
        let mut rng = rng_from_seed(derive_seed(params.seed, &format!("ft-epoch-{epoch}")));
        order.shuffle(&mut rng);
        for chunk in order.chunks(params.batch.max(1)) {
            let mut batch = Tensor::zeros(&[chunk.len(), width]);
            let mut targets = Vec::with_capacity(chunk.len());
            for (r, &idx) in chunk.iter().enumerate() {
                let (v, label) = &dataset.items[idx];
                batch.row_mut(r).copy_from_slice(v);
                targets.push(*label);
            }
            head.zero_grad();
            let logits = head.forward(&batch);
            let (loss, grad) = cross_entropy(&logits, &targets);
            if !loss.into_f64().is_finite() {
                return Err(Error::NonFiniteDetected("fine-tune loss".into()));
            }
            head.backward(&grad);
            adam.step(|f| head.visit_params(f))?;
        }
    }
    Ok(head)
}

/// Strictly-above thresholding of maliciousness scores.
pub fn threshold_classify(m_scores: &[f64], threshold: f64) -> Vec<bool> {
    m_scores.iter().map(|&s| s > threshold).collect()
}

/// Flag the `width` highest-scoring classes of each app (all classes when
/// fewer), ties broken by stable input order. Input: per app, the classes
/// with their m-scores.
pub fn beam_select<C: Clone>(
    per_app_scores: &[(String, Vec<(C, f64)>)],
    width: usize,
) -> Vec<(String, Vec<C>)> {
    per_app_scores
        .iter()
        .map(|(app, classes)| {
            let mut order: Vec<usize> = (0..classes.len()).collect();
            // Stable sort keeps input order among equal scores.
            order.sort_by(|&a, &b| {
                classes[b]
                    .1
                    .partial_cmp(&classes[a].1)
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
            let flagged = order
                .into_iter()
                .take(width)
                .map(|i| classes[i].0.clone())
                .collect();
            (app.clone(), flagged)
        })
        .collect()
}

/// 2x2 counts of a binary task.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub confusion: Vec<Vec<u64>>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub fnr: Option<f64>,
    pub fpr: Option<f64>,
    /// Absent when the labels are degenerate (one class only) or no scores
    /// were supplied.
    pub auc: Option<f64>,
    pub per_class_f1: Vec<f64>,
    pub macro_f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Metrics from an explicit confusion matrix.
pub fn metrics_from_confusion(m: &ConfusionMatrix) -> MetricsReport {
    let precision = ratio(m.tp, m.tp + m.fp);
    let recall = ratio(m.tp, m.tp + m.fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    let fnr = 1.0 - recall;
    let fpr = ratio(m.fp, m.fp + m.tn);
    // Per-class F1 with the negative class as class 0.
    let neg_precision = ratio(m.tn, m.tn + m.fn_);
    let neg_recall = ratio(m.tn, m.tn + m.fp);
    let neg_f1 = if neg_precision + neg_recall == 0.0 {
        0.0
    } else {
        2.0 * neg_precision * neg_recall / (neg_precision + neg_recall)
    };
    MetricsReport {
        confusion: vec![vec![m.tn, m.fp], vec![m.fn_, m.tp]],
        precision: Some(precision),
        recall: Some(recall),
        f1: Some(f1),
        fnr: Some(fnr),
        fpr: Some(fpr),
        auc: None,
        per_class_f1: vec![neg_f1, f1],
        macro_f1: (neg_f1 + f1) / 2.0,
    }
}

/// Binary evaluation; `scores` enable the rank-based AUC.
pub fn evaluate_binary(
    predictions: &[bool],
    labels: &[bool],
    scores: Option<&[f64]>,
) -> Result<MetricsReport> {
    if predictions.len() != labels.len() || predictions.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "predictions {} vs labels {}",
            predictions.len(),
            labels.len()
        )));
    }
    let mut m = ConfusionMatrix::default();
    for (&p, &l) in predictions.iter().zip(labels) {
        match (l, p) {
            (true, true) => m.tp += 1,
            (true, false) => m.fn_ += 1,
            (false, true) => m.fp += 1,
            (false, false) => m.tn += 1,
        }
    }
    let mut report = metrics_from_confusion(&m);
    if let Some(scores) = scores {
        report.auc = rank_auc(scores, labels);
    }
    Ok(report)
}

/// Rank-statistic AUC with midrank tie handling. `None` when the labels are
/// degenerate.
pub fn rank_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks are 1-based; ties share the midrank.
        let midrank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let auc = (rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos * n_neg) as f64;
    Some(auc)
}

/// Multi-class evaluation: per-class F1 (one-vs-rest) and macro average.
pub fn evaluate_multiclass(
    predictions: &[usize],
    labels: &[usize],
    classes: usize,
) -> Result<MetricsReport> {
    if predictions.len() != labels.len() || predictions.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "predictions {} vs labels {}",
            predictions.len(),
            labels.len()
        )));
    }
    let mut confusion = vec![vec![0u64; classes]; classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        if p >= classes || l >= classes {
            return Err(Error::Format("class index out of range".into()));
        }
        confusion[l][p] += 1;
    }
    let mut per_class_f1 = Vec::with_capacity(classes);
    for c in 0..classes {
        let tp = confusion[c][c];
        let fp: u64 = (0..classes).filter(|&r| r != c).map(|r| confusion[r][c]).sum();
        let fn_: u64 = (0..classes).filter(|&p| p != c).map(|p| confusion[c][p]).sum();
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        per_class_f1.push(if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        });
    }
    let macro_f1 = per_class_f1.iter().sum::<f64>() / classes as f64;
    Ok(MetricsReport {
        confusion,
        precision: None,
        recall: None,
        f1: None,
        fnr: None,
        fpr: None,
        auc: None,
        per_class_f1,
        macro_f1,
    })
}

/// Seeded shuffle then contiguous partition into `k` disjoint covering
/// folds; returns (train, test) index lists.
pub fn kfold(n: usize, k: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if k < 2 {
        return Err(Error::TooFewItems { needed: 2, got: k });
    }
    if n < k {
        return Err(Error::TooFewItems { needed: k, got: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng_from_seed(derive_seed(seed, "kfold"));
    order.shuffle(&mut rng);
    let mut folds = Vec::with_capacity(k);
    let base = n / k;
    let extra = n % k;
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let test: Vec<usize> = order[start..start + size].to_vec();
        let train: Vec<usize> = order[..start]
            .iter()
            .chain(&order[start + size..])
            .copied()
            .collect();
        folds.push((train, test));
        start += size;
    }
    Ok(folds)
}

/// Plain and size-weighted averages of per-project scores.
pub fn weighted_average_auc(per_project: &[(f64, u64)]) -> (f64, f64) {
    let mean = per_project.iter().map(|(a, _)| a).sum::<f64>() / per_project.len() as f64;
    let total: u64 = per_project.iter().map(|(_, c)| c).sum();
    let weighted = per_project
        .iter()
        .map(|(a, c)| a * *c as f64)
        .sum::<f64>()
        / total as f64;
    (mean, weighted)
}

/// Label file: CSV `class_name,label` with an optional header line.
pub fn read_labels_csv(path: &Path) -> Result<Vec<(String, usize)>> {
    let file = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in file.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || (idx == 0 && trimmed == "class_name,label") {
            continue;
        }
        let (name, label) = trimmed.rsplit_once(',').ok_or_else(|| {
            Error::Format(format!("{}:{}: expected class_name,label", path.display(), idx + 1))
        })?;
        let label: usize = label.trim().parse().map_err(|_| {
            Error::Format(format!("{}:{}: label must be an integer", path.display(), idx + 1))
        })?;
        out.push((name.to_string(), label));
    }
    Ok(out)
}

pub fn write_labels_csv(path: &Path, labels: &[(String, usize)]) -> Result<()> {
    let mut text = String::from("class_name,label\n");
    for (name, label) in labels {
        let _ = writeln!(text, "{name},{label}");
    }
    fs::write(path, text)?;
    Ok(())
}

/// Make random confusion matrices for identity checks.
pub fn random_confusion(rng: &mut rand_chacha::ChaCha20Rng) -> ConfusionMatrix {
    ConfusionMatrix {
        tp: rng.gen_range(1..=1000),
        fp: rng.gen_range(1..=1000),
        fn_: rng.gen_range(1..=1000),
        tn: rng.gen_range(1..=1000),
    }
}
