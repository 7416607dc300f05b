//! Single-document run configuration and its hash.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{ModalityKind, Provenance, SynthConfig};
use crate::error::{Error, Result};
use crate::fusion::{ModalityMask, ModelConfig};
use crate::radiomics::RadiomicsConfig;
use crate::select::SelectionConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvConfig {
    pub folds: usize,
    /// Balance patient labels across folds.
    pub stratified: bool,
    /// Modalities the model may use; every modality when empty.
    pub modalities: Vec<ModalityKind>,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self { folds: 5, stratified: true, modalities: Vec::new() }
    }
}

impl CvConfig {
    pub fn modality_mask(&self) -> ModalityMask {
        if self.modalities.is_empty() {
            ModalityMask::all()
        } else {
            ModalityMask::only(&self.modalities)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    /// Permutations for Monte-Carlo Shapley estimates.
    pub permutations: usize,
    /// Largest number of background samples used for reference values.
    pub background_size: usize,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self { permutations: 2000, background_size: 200 }
    }
}

/// Everything a command needs besides its paths. The training seed is the run seed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub selection: SelectionConfig,
    /// Skip gene selection and keep every gene.
    pub no_selection: bool,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub cv: CvConfig,
    pub radiomics: RadiomicsConfig,
    pub explain: ExplainConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid run config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        if !self.no_selection {
            self.selection.validate()?;
        }
        self.model.validate()?;
        self.train.validate()?;
        self.radiomics.validate()?;
        if self.cv.folds < 2 {
            return Err(Error::Config(format!("cv.folds must be at least 2, got {}", self.cv.folds)));
        }
        if !self.cv.modality_mask().has_imaging() {
            return Err(Error::Config("cv.modalities must include radiomics or gm".into()));
        }
        if self.explain.permutations == 0 || self.explain.background_size == 0 {
            return Err(Error::Config("explain.permutations and explain.background_size must be positive".into()));
        }
        Ok(())
    }

    pub fn selection(&self) -> Option<&SelectionConfig> {
        (!self.no_selection).then_some(&self.selection)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(serde_json::to_vec(self).expect("run config serializes"));
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn provenance(&self) -> Provenance {
        Provenance { config_hash: self.hash(), seed: self.seed() }
    }
}
