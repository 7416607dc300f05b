use serde::{Deserialize, Serialize};

use crate::data::{Label, NUM_CLASSES};
use crate::error::{Error, Result};

/// Accuracy with macro-averaged recall and F1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub accuracy: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

/// Scores `preds` against `labels`. Classes of `classes` that never occur in
/// `labels` are left out of the macro averages.
pub fn metrics(preds: &[usize], labels: &[usize], classes: &[usize]) -> Result<ClassMetrics> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::Metrics(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    if let Some(y) = labels.iter().find(|y| !classes.contains(y)) {
        return Err(Error::Metrics(format!("label {y} is outside the class set {classes:?}")));
    }
    let correct = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    let mut recalls = Vec::new();
    let mut f1s = Vec::new();
    for &c in classes {
        let tp = preds.iter().zip(labels).filter(|&(&p, &y)| p == c && y == c).count() as f64;
        let fn_ = labels.iter().zip(preds).filter(|&(&y, &p)| y == c && p != c).count() as f64;
        let fp = preds.iter().zip(labels).filter(|&(&p, &y)| p == c && y != c).count() as f64;
        if tp + fn_ == 0.0 {
            log::warn!("class {c} has no samples; excluded from macro averages");
            continue;
        }
        recalls.push(tp / (tp + fn_));
        f1s.push(2.0 * tp / (2.0 * tp + fp + fn_));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(ClassMetrics { accuracy: correct as f64 / preds.len() as f64, macro_recall: mean(&recalls), macro_f1: mean(&f1s) })
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// The binary tasks reported alongside the three-class metrics.
pub const BINARY_TASKS: [(Label, Label); 3] = [(Label::Ad, Label::Ctl), (Label::Ad, Label::Mci), (Label::Mci, Label::Ctl)];

pub fn task_name(task: (Label, Label)) -> String {
    format!("{} vs {}", task.0.name(), task.1.name())
}

/// Metrics restricted to samples of the two classes, predicting whichever of
/// the two has the higher probability.
pub fn binary_metrics(probs: &[[f64; NUM_CLASSES]], labels: &[usize], task: (Label, Label)) -> Result<ClassMetrics> {
    let (a, b) = (task.0.index(), task.1.index());
    let mut preds = Vec::new();
    let mut ys = Vec::new();
    for (p, &y) in probs.iter().zip(labels) {
        if y == a || y == b {
            preds.push(if p[a] >= p[b] { a } else { b });
            ys.push(y);
        }
    }
    metrics(&preds, &ys, &[a, b])
}

/// Mean and standard deviation across folds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
}

impl Summary {
    /// Population SD by default; `sample_sd` divides by `k - 1`.
    pub fn of(values: &[f64], sample_sd: bool) -> Summary {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
        let denom = if sample_sd && values.len() > 1 { n - 1.0 } else { n };
        Summary { mean, sd: (ss / denom).sqrt() }
    }

    /// `mean ± sd` in percent with two decimals.
    pub fn percent(&self) -> String {
        format!("{:.2} ± {:.2}", 100.0 * self.mean, 100.0 * self.sd)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryFoldMetrics {
    pub task: String,
    #[serde(flatten)]
    pub metrics: ClassMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    #[serde(flatten)]
    pub metrics: ClassMetrics,
    pub binary: Vec<BinaryFoldMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummaries {
    pub accuracy: Summary,
    pub macro_recall: Summary,
    pub macro_f1: Summary,
}

impl MetricSummaries {
    pub fn of(values: &[ClassMetrics], sample_sd: bool) -> Self {
        let pick = |f: fn(&ClassMetrics) -> f64| Summary::of(&values.iter().map(f).collect::<Vec<_>>(), sample_sd);
        Self { accuracy: pick(|m| m.accuracy), macro_recall: pick(|m| m.macro_recall), macro_f1: pick(|m| m.macro_f1) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinarySummary {
    pub task: String,
    #[serde(flatten)]
    pub summary: MetricSummaries,
}

/// Per-fold metrics and their aggregate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub folds: Vec<FoldMetrics>,
    pub aggregate: MetricSummaries,
    pub binary: Vec<BinarySummary>,
    pub sample_sd: bool,
}

impl MetricsReport {
    pub fn from_folds(folds: Vec<FoldMetrics>, sample_sd: bool) -> Result<Self> {
        if folds.is_empty() {
            return Err(Error::Metrics("no folds to aggregate".into()));
        }
        let aggregate = MetricSummaries::of(&folds.iter().map(|f| f.metrics).collect::<Vec<_>>(), sample_sd);
        let tasks: Vec<String> = folds[0].binary.iter().map(|b| b.task.clone()).collect();
        let binary = tasks
            .into_iter()
            .map(|task| {
                let vals: Vec<ClassMetrics> =
                    folds.iter().filter_map(|f| f.binary.iter().find(|b| b.task == task)).map(|b| b.metrics).collect();
                BinarySummary { summary: MetricSummaries::of(&vals, sample_sd), task }
            })
            .collect();
        Ok(Self { folds, aggregate, binary, sample_sd })
    }
}

/// Three-class and binary metrics of one evaluated fold.
pub fn fold_metrics(fold: usize, probs: &[[f64; NUM_CLASSES]], labels: &[usize]) -> Result<FoldMetrics> {
    let preds: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    let all: Vec<usize> = (0..NUM_CLASSES).collect();
    let metrics = metrics(&preds, labels, &all)?;
    let binary = BINARY_TASKS
        .iter()
        .filter_map(|&task| {
            binary_metrics(probs, labels, task).ok().map(|m| BinaryFoldMetrics { task: task_name(task), metrics: m })
        })
        .collect();
    Ok(FoldMetrics { fold, metrics, binary })
}
