use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::fit::{predict_dataset, train_with_validation, TrainConfig, TrainHistory};
use super::metrics::{fold_metrics, FoldMetrics, MetricsReport};
use crate::data::{validation_split, Dataset, FoldPlan, ImputationModel, ImputeMode, ModalityKind, Scaler};
use crate::error::{Error, Result};
use crate::fusion::{FusionModel, ModalityMask, ModelConfig};
use crate::select::{combined_rank, score_features, SelectionConfig, SelectionReport};

/// Stable 64-bit seed for a named stream of a run.
pub fn derive_seed(seed: u64, stream: &str, index: u64) -> u64 {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stream.as_bytes());
    h.update(index.to_le_bytes());
    u64::from_le_bytes(h.finalize()[0..8].try_into().expect("8 bytes"))
}

/// Gene selection, imputation and scaling fitted on one training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub selected_genes: Vec<String>,
    pub selection: Option<SelectionReport>,
    pub imputer: ImputationModel,
    pub scaler: Scaler,
}

impl Preprocessor {
    /// Fits every step on `train` only. Without a selection config all genes are kept.
    pub fn fit(train: &Dataset, selection: Option<&SelectionConfig>) -> Result<Self> {
        let (selected_genes, report) = match selection {
            Some(cfg) => {
                cfg.validate()?;
                let ranking = combined_rank(&score_features(train, ModalityKind::Genes), cfg);
                let report = SelectionReport::new(cfg, ModalityKind::Genes, &ranking);
                (ranking.selected, Some(report))
            }
            None => (train.schema.genes.numeric.clone(), None),
        };
        let selected = train.select_genes(&selected_genes)?;
        let imputer = ImputationModel::fit(&selected)?;
        let scaler = Scaler::fit(&imputer.apply_dataset(&selected, ImputeMode::ClassConditional));
        Ok(Self { selected_genes, selection: report, imputer, scaler })
    }

    /// Applies selection, imputation (`mode`) and scaling.
    pub fn transform(&self, data: &Dataset, mode: ImputeMode) -> Result<Dataset> {
        let selected = data.select_genes(&self.selected_genes)?;
        Ok(self.scaler.apply_dataset(&self.imputer.apply_dataset(&selected, mode)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedMask {
    pub name: String,
    pub mask: ModalityMask,
}

#[derive(Clone, Debug)]
pub struct CvOptions {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub selection: Option<SelectionConfig>,
    /// Modalities the model may use at all, in training and evaluation.
    pub modalities: ModalityMask,
    /// Test-time masks; the first one is the primary report.
    pub eval_masks: Vec<NamedMask>,
    pub parallel_folds: usize,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            selection: Some(SelectionConfig::default()),
            modalities: ModalityMask::all(),
            eval_masks: vec![NamedMask { name: "full".into(), mask: ModalityMask::all() }],
            parallel_folds: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub fold: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    pub test_samples: usize,
    pub test_patients: usize,
    pub selected_genes: Vec<String>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub fold: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskReport {
    pub name: String,
    pub mask: ModalityMask,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvOutcome {
    pub reports: Vec<MaskReport>,
    pub folds: Vec<FoldRecord>,
    pub history: Vec<HistoryRow>,
}

impl CvOutcome {
    pub fn primary(&self) -> &MetricsReport {
        &self.reports[0].metrics
    }

    pub fn report(&self, name: &str) -> Option<&MetricsReport> {
        self.reports.iter().find(|r| r.name == name).map(|r| &r.metrics)
    }
}

struct FoldResult {
    record: FoldRecord,
    history: TrainHistory,
    metrics: Vec<FoldMetrics>,
}

/// Everything fitted on one training split, ready for evaluation.
pub struct FittedFold {
    pub preprocessor: Preprocessor,
    pub model: FusionModel<f64>,
    pub history: TrainHistory,
    pub train_samples: usize,
    pub val_samples: usize,
}

/// Fits preprocessing on the training part of `train` and trains a fresh model.
///
/// Validation patients are held out of preprocessing fits and imputed with
/// class-marginal statistics, like test rows.
pub fn fit_fold(train: &Dataset, options: &CvOptions, seed: u64, fold: u64) -> Result<FittedFold> {
    let all: Vec<usize> = (0..train.len()).collect();
    let (tr, va) = validation_split(train, &all, options.train.val_fraction, derive_seed(seed, "val", fold))?;
    let (fit_part, val_part) = (train.subset(&tr), train.subset(&va));
    let selection = options.selection.as_ref().filter(|_| options.modalities.is_present(ModalityKind::Genes));
    let preprocessor = Preprocessor::fit(&fit_part, selection)?;
    let fit_data = preprocessor.transform(&fit_part, ImputeMode::ClassConditional)?;
    let val_data = preprocessor.transform(&val_part, ImputeMode::Marginal)?;
    let mut model = FusionModel::<f64>::new(&options.model, &fit_data.schema, derive_seed(seed, "init", fold))?;
    let config = TrainConfig { seed: derive_seed(seed, "train", fold), ..options.train.clone() };
    let history = train_with_validation(&mut model, &fit_data, &val_data, &config, &options.modalities)?;
    Ok(FittedFold { preprocessor, model, history, train_samples: fit_data.len(), val_samples: val_data.len() })
}

fn run_fold(data: &Dataset, plan: &FoldPlan, options: &CvOptions, fold: usize) -> Result<FoldResult> {
    let (train_idx, test_idx) = plan.split(data, fold)?;
    if test_idx.is_empty() {
        return Err(Error::Split(format!("fold {fold} has no test samples")));
    }
    let train = data.subset(&train_idx);
    let fitted = fit_fold(&train, options, options.train.seed, fold as u64)?;
    let test = fitted.preprocessor.transform(&data.subset(&test_idx), ImputeMode::Marginal)?;
    let labels: Vec<usize> = test.labels()?.into_iter().map(|l| l.index()).collect();
    let metrics = options
        .eval_masks
        .iter()
        .map(|m| {
            let mask = ModalityMask { present: std::array::from_fn(|i| m.mask.present[i] && options.modalities.present[i]) };
            fold_metrics(fold, &predict_dataset(&fitted.model, &test, &mask)?, &labels)
        })
        .collect::<Result<Vec<_>>>()?;
    let record = FoldRecord {
        fold,
        train_samples: fitted.train_samples,
        val_samples: fitted.val_samples,
        test_samples: test.len(),
        test_patients: test.patients().len(),
        selected_genes: fitted.preprocessor.selected_genes.clone(),
        best_epoch: fitted.history.best_epoch,
        epochs_run: fitted.history.epochs.len(),
        stopped_early: fitted.history.stopped_early,
    };
    log::info!("fold {fold}: accuracy {:.4}", metrics[0].metrics.accuracy);
    Ok(FoldResult { record, history: fitted.history, metrics })
}

/// Patient-level cross-validation with fold-local preprocessing.
///
/// Every fold draws its randomness from `(train.seed, fold)`, so the outcome
/// does not depend on `parallel_folds`.
pub fn run_cv(data: &Dataset, plan: &FoldPlan, options: &CvOptions) -> Result<CvOutcome> {
    if options.eval_masks.is_empty() {
        return Err(Error::Config("at least one evaluation mask is required".into()));
    }
    options.train.validate()?;
    options.model.validate()?;
    let folds: Vec<usize> = (0..plan.k).collect();
    let results: Vec<Result<FoldResult>> = if options.parallel_folds > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(options.parallel_folds)
            .build()
            .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?;
        pool.install(|| folds.par_iter().map(|&f| run_fold(data, plan, options, f)).collect())
    } else {
        folds.iter().map(|&f| run_fold(data, plan, options, f)).collect()
    };
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;

    let reports = options
        .eval_masks
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let per_fold = results.iter().map(|r| r.metrics[i].clone()).collect();
            Ok(MaskReport { name: m.name.clone(), mask: m.mask, metrics: MetricsReport::from_folds(per_fold, options.train.sample_sd)? })
        })
        .collect::<Result<Vec<_>>>()?;
    let history = results
        .iter()
        .flat_map(|r| {
            r.history.epochs.iter().map(move |e| HistoryRow {
                fold: r.record.fold,
                epoch: e.epoch,
                train_loss: e.train_loss,
                val_loss: e.val_loss,
            })
        })
        .collect();
    Ok(CvOutcome { reports, folds: results.into_iter().map(|r| r.record).collect(), history })
}
