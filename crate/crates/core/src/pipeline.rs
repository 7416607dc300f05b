//! A fitted preprocessing chain plus model, persisted as `model.json` and an
//! `OFT1` checkpoint.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{Dataset, DatasetSchema, ImputeMode, Provenance, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::fusion::{FusionModel, ModalityMask, ModelConfig};
use crate::params::ParamStore;
use crate::train::{fit_fold, predict_dataset, CvOptions, NamedMask, Preprocessor, TrainHistory};

pub const MODEL_FILE: &str = "model.json";
pub const CHECKPOINT_FILE: &str = "model.oft";

pub struct Pipeline {
    pub preprocessor: Preprocessor,
    pub model: FusionModel<f64>,
    /// Modalities the model was trained with.
    pub modalities: ModalityMask,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    provenance: Provenance,
    schema_hash: String,
    checkpoint: String,
    model: ModelConfig,
    modalities: ModalityMask,
    schema: DatasetSchema,
    preprocessor: Preprocessor,
}

impl Pipeline {
    /// Fits preprocessing and a model on `data` with a patient-grouped validation split.
    pub fn fit(data: &Dataset, config: &RunConfig) -> Result<(Self, TrainHistory)> {
        config.validate()?;
        let options = cv_options(config);
        let fitted = fit_fold(data, &options, config.seed(), 0)?;
        let pipeline = Self {
            preprocessor: fitted.preprocessor,
            model: fitted.model,
            modalities: options.modalities,
            provenance: config.provenance(),
        };
        Ok((pipeline, fitted.history))
    }

    /// Selection, marginal imputation and scaling as fitted.
    pub fn prepare(&self, data: &Dataset) -> Result<Dataset> {
        self.preprocessor.transform(data, ImputeMode::Marginal)
    }

    /// Probabilities for already prepared data under `mask ∩ modalities`.
    pub fn predict_prepared(&self, data: &Dataset, mask: &ModalityMask) -> Result<Vec<[f64; NUM_CLASSES]>> {
        let mask = ModalityMask { present: std::array::from_fn(|i| mask.present[i] && self.modalities.present[i]) };
        predict_dataset(&self.model, data, &mask)
    }

    pub fn predict(&self, data: &Dataset, mask: &ModalityMask) -> Result<Vec<[f64; NUM_CLASSES]>> {
        self.predict_prepared(&self.prepare(data)?, mask)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let hash = self.model.schema_hash();
        let file = ModelFile {
            provenance: self.provenance.clone(),
            schema_hash: format!("{hash:016x}"),
            checkpoint: CHECKPOINT_FILE.into(),
            model: self.model.config.clone(),
            modalities: self.modalities,
            schema: self.model.schema.clone(),
            preprocessor: self.preprocessor.clone(),
        };
        std::fs::write(dir.join(MODEL_FILE), serde_json::to_string_pretty(&file)? + "\n")?;
        self.model.params.save(hash, &dir.join(CHECKPOINT_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let file: ModelFile = serde_json::from_slice(&std::fs::read(dir.join(MODEL_FILE))?)?;
        let (hash, params) = ParamStore::<f64>::load(&dir.join(&file.checkpoint))?;
        let model = FusionModel::with_params(&file.model, &file.schema, &params)?;
        if hash != model.schema_hash() || format!("{hash:016x}") != file.schema_hash {
            return Err(Error::Format("checkpoint does not match the model description".into()));
        }
        Ok(Self { preprocessor: file.preprocessor, model, modalities: file.modalities, provenance: file.provenance })
    }
}

/// Cross-validation options derived from a run config.
pub fn cv_options(config: &RunConfig) -> CvOptions {
    CvOptions {
        model: config.model.clone(),
        train: config.train.clone(),
        selection: config.selection().cloned(),
        modalities: config.cv.modality_mask(),
        eval_masks: vec![NamedMask { name: "full".into(), mask: ModalityMask::all() }],
        parallel_folds: 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, ModalityKind, SynthConfig};
    use crate::tabular::EncoderConfig;

    #[test]
    fn save_load_predicts_identically() {
        let synth = SynthConfig { class_counts: [6, 6, 6], genes_dim: 8, ..Default::default() };
        let data = synth_generate(&synth, 3).unwrap();
        let mut config = RunConfig::default();
        config.model.encoder = EncoderConfig { d: 8, layers: 1, heads: 2, d_ff: 8, ffn_residual: false };
        config.model.fusion.heads = 2;
        config.model.fusion.classifier_hidden = 8;
        config.train.max_epochs = 2;
        config.train.patience = 1;
        config.selection.p_threshold = 0.5;
        let (p, history) = Pipeline::fit(&data, &config).unwrap();
        assert!(!history.epochs.is_empty());
        let dir = tempfile::tempdir().unwrap();
        p.save(dir.path()).unwrap();
        let back = Pipeline::load(dir.path()).unwrap();
        let mask = ModalityMask::all().without(&[ModalityKind::Meta]);
        assert_eq!(p.predict(&data, &mask).unwrap(), back.predict(&data, &mask).unwrap());
        assert_eq!(back.provenance, config.provenance());
    }
}
