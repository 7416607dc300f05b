//! Multimodal samples, dataset schema, preprocessing and splitting.

mod impute;
mod io;
mod scale;
mod split;
mod synth;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume3D;

pub use impute::{CategoricalImputation, ImputationModel, ImputeMode, NumericImputation};
pub use io::{load_dataset, save_dataset, Manifest, Provenance, FORMAT_VERSION};
pub use scale::{FeatureScaling, Scaler};
pub use split::{group_kfold, validation_split, FoldPlan};
pub use synth::{synth_generate, synth_generate_with_truth, GmVolumeConfig, ModalityStrength, SynthConfig, SynthTruth};

/// Diagnostic class, in the fixed order used by every model output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "CTL")]
    Ctl,
    #[serde(rename = "MCI")]
    Mci,
    #[serde(rename = "AD")]
    Ad,
}

pub const NUM_CLASSES: usize = 3;

impl Label {
    pub const ALL: [Label; NUM_CLASSES] = [Label::Ctl, Label::Mci, Label::Ad];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Ctl => "CTL",
            Label::Mci => "MCI",
            Label::Ad => "AD",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "CTL" | "CN" => Ok(Label::Ctl),
            "MCI" => Ok(Label::Mci),
            "AD" => Ok(Label::Ad),
            other => Err(Error::Schema(format!("unknown class label `{other}`"))),
        }
    }
}

/// One input stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityKind {
    Radiomics,
    #[serde(rename = "gm")]
    GmEmbedding,
    Genes,
    Meta,
}

pub const NUM_MODALITIES: usize = 4;

impl ModalityKind {
    pub const ALL: [ModalityKind; NUM_MODALITIES] =
        [ModalityKind::Radiomics, ModalityKind::GmEmbedding, ModalityKind::Genes, ModalityKind::Meta];

    /// Modalities whose features become tabular tokens.
    pub const TABULAR: [ModalityKind; 3] = [ModalityKind::Radiomics, ModalityKind::Genes, ModalityKind::Meta];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ModalityKind::Radiomics => "radiomics",
            ModalityKind::GmEmbedding => "gm",
            ModalityKind::Genes => "genes",
            ModalityKind::Meta => "meta",
        }
    }

    pub fn is_imaging(self) -> bool {
        matches!(self, ModalityKind::Radiomics | ModalityKind::GmEmbedding)
    }

    /// Parses a comma-separated list such as `genes,meta`.
    pub fn parse_list(s: &str) -> Result<Vec<ModalityKind>> {
        s.split(',').map(str::trim).filter(|p| !p.is_empty()).map(str::parse).collect()
    }
}

impl fmt::Display for ModalityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModalityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "radiomics" | "rad" | "tabular" => Ok(ModalityKind::Radiomics),
            "gm" | "gm_embedding" | "gmembedding" | "mri" => Ok(ModalityKind::GmEmbedding),
            "genes" | "gene" => Ok(ModalityKind::Genes),
            "meta" | "metadata" | "ehr" => Ok(ModalityKind::Meta),
            other => Err(Error::Schema(format!("unknown modality `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoricalSpec {
    pub name: String,
    pub cardinality: usize,
}

/// Feature layout of one modality. Order is fixed and significant.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalitySchema {
    pub numeric: Vec<String>,
    #[serde(default)]
    pub categorical: Vec<CategoricalSpec>,
}

impl ModalitySchema {
    pub fn numeric_only(names: Vec<String>) -> Self {
        Self { numeric: names, categorical: Vec::new() }
    }

    pub fn width(&self) -> usize {
        self.numeric.len() + self.categorical.len()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSchema {
    pub radiomics: ModalitySchema,
    pub gm: ModalitySchema,
    pub genes: ModalitySchema,
    pub meta: ModalitySchema,
}

impl DatasetSchema {
    pub fn modality(&self, kind: ModalityKind) -> &ModalitySchema {
        match kind {
            ModalityKind::Radiomics => &self.radiomics,
            ModalityKind::GmEmbedding => &self.gm,
            ModalityKind::Genes => &self.genes,
            ModalityKind::Meta => &self.meta,
        }
    }

    pub fn modality_mut(&mut self, kind: ModalityKind) -> &mut ModalitySchema {
        match kind {
            ModalityKind::Radiomics => &mut self.radiomics,
            ModalityKind::GmEmbedding => &mut self.gm,
            ModalityKind::Genes => &mut self.genes,
            ModalityKind::Meta => &mut self.meta,
        }
    }

    pub fn gm_dim(&self) -> usize {
        self.gm.numeric.len()
    }

    /// Stable digest of the schema, used to tie checkpoints to their data layout.
    pub fn digest(&self) -> u64 {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("schema serializes");
        let h = Sha256::digest(&json);
        u64::from_le_bytes(h[0..8].try_into().expect("8 bytes"))
    }

    /// Names of GM embedding coordinates `e0..e{d-1}`.
    pub fn embedding_names(d: usize) -> Vec<String> {
        (0..d).map(|i| format!("e{i}")).collect()
    }
}

/// Values of one modality for one sample.
///
/// When `present` is false the values are placeholders that no downstream
/// consumer reads.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityBlock {
    pub kind: ModalityKind,
    pub numeric: Vec<Option<f64>>,
    pub categorical: Vec<Option<u32>>,
    pub present: bool,
}

impl ModalityBlock {
    pub fn absent(kind: ModalityKind, schema: &ModalitySchema) -> Self {
        Self {
            kind,
            numeric: vec![None; schema.numeric.len()],
            categorical: vec![None; schema.categorical.len()],
            present: false,
        }
    }

    pub fn present(kind: ModalityKind, numeric: Vec<Option<f64>>, categorical: Vec<Option<u32>>) -> Self {
        Self { kind, numeric, categorical, present: true }
    }

    pub fn has_missing_entries(&self) -> bool {
        self.numeric.iter().any(Option::is_none) || self.categorical.iter().any(Option::is_none)
    }
}

/// One patient visit.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub patient_id: String,
    pub visit_id: String,
    pub label: Option<Label>,
    pub modalities: [ModalityBlock; NUM_MODALITIES],
    /// Grey-matter volume, when images are supplied instead of embeddings.
    pub gm_volume: Option<Arc<Volume3D>>,
}

impl Sample {
    pub fn block(&self, kind: ModalityKind) -> &ModalityBlock {
        &self.modalities[kind.index()]
    }

    pub fn block_mut(&mut self, kind: ModalityKind) -> &mut ModalityBlock {
        &mut self.modalities[kind.index()]
    }

    pub fn is_present(&self, kind: ModalityKind) -> bool {
        self.modalities[kind.index()].present
    }

    pub fn presence(&self) -> [bool; NUM_MODALITIES] {
        ModalityKind::ALL.map(|k| self.is_present(k))
    }

    pub fn key(&self) -> (String, String) {
        (self.patient_id.clone(), self.visit_id.clone())
    }

    /// Checks arities against the schema and the imaging-presence invariant.
    pub fn validate(&self, schema: &DatasetSchema) -> Result<()> {
        for kind in ModalityKind::ALL {
            let b = self.block(kind);
            let s = schema.modality(kind);
            if b.kind != kind || b.numeric.len() != s.numeric.len() || b.categorical.len() != s.categorical.len() {
                return Err(Error::Schema(format!(
                    "sample {}/{}: {kind} block has {} numeric / {} categorical values, schema expects {} / {}",
                    self.patient_id,
                    self.visit_id,
                    b.numeric.len(),
                    b.categorical.len(),
                    s.numeric.len(),
                    s.categorical.len()
                )));
            }
            if b.present {
                for (v, spec) in b.categorical.iter().zip(&s.categorical) {
                    if let Some(code) = v {
                        if *code as usize >= spec.cardinality {
                            return Err(Error::Schema(format!(
                                "sample {}/{}: categorical `{}` code {code} >= cardinality {}",
                                self.patient_id, self.visit_id, spec.name, spec.cardinality
                            )));
                        }
                    }
                }
            }
        }
        if !self.is_present(ModalityKind::Radiomics) && !self.is_present(ModalityKind::GmEmbedding) {
            return Err(Error::Schema(format!(
                "sample {}/{} has neither radiomics nor grey-matter imaging",
                self.patient_id, self.visit_id
            )));
        }
        Ok(())
    }
}

/// Immutable collection of samples conforming to one schema.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub schema: DatasetSchema,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(schema: DatasetSchema, samples: Vec<Sample>) -> Result<Self> {
        for s in &samples {
            s.validate(&schema)?;
        }
        Ok(Self { schema, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sub-dataset with the given sample indices, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset { schema: self.schema.clone(), samples: indices.iter().map(|&i| self.samples[i].clone()).collect() }
    }

    /// Distinct patient ids in sorted order.
    pub fn patients(&self) -> Vec<String> {
        let mut p: Vec<String> = self.samples.iter().map(|s| s.patient_id.clone()).collect();
        p.sort();
        p.dedup();
        p
    }

    /// Per-class counts of labelled samples.
    pub fn label_counts(&self) -> [usize; NUM_CLASSES] {
        let mut c = [0; NUM_CLASSES];
        for s in &self.samples {
            if let Some(l) = s.label {
                c[l.index()] += 1;
            }
        }
        c
    }

    /// Per-class counts of distinct patients (label of each patient's first visit).
    pub fn patient_label_counts(&self) -> [usize; NUM_CLASSES] {
        let mut seen = std::collections::BTreeMap::new();
        for s in &self.samples {
            if let Some(l) = s.label {
                seen.entry(s.patient_id.as_str()).or_insert(l);
            }
        }
        let mut c = [0; NUM_CLASSES];
        for l in seen.values() {
            c[l.index()] += 1;
        }
        c
    }

    pub fn labels(&self) -> Result<Vec<Label>> {
        self.samples
            .iter()
            .map(|s| s.label.ok_or_else(|| Error::Schema(format!("sample {}/{} is unlabelled", s.patient_id, s.visit_id))))
            .collect()
    }

    /// Keeps only the listed genes, in the given order.
    pub fn select_genes(&self, genes: &[String]) -> Result<Dataset> {
        let idx: Vec<usize> = genes
            .iter()
            .map(|g| {
                self.schema
                    .genes
                    .numeric
                    .iter()
                    .position(|n| n == g)
                    .ok_or_else(|| Error::Schema(format!("unknown gene `{g}`")))
            })
            .collect::<Result<_>>()?;
        let mut schema = self.schema.clone();
        schema.genes.numeric = genes.to_vec();
        let samples = self
            .samples
            .iter()
            .map(|s| {
                let mut s = s.clone();
                let b = s.block_mut(ModalityKind::Genes);
                b.numeric = idx.iter().map(|&i| b.numeric[i]).collect();
                s
            })
            .collect();
        Ok(Dataset { schema, samples })
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;

    pub fn schema(rad: usize, genes: usize) -> DatasetSchema {
        DatasetSchema {
            radiomics: ModalitySchema::numeric_only((0..rad).map(|i| format!("r{i}")).collect()),
            gm: ModalitySchema::numeric_only(DatasetSchema::embedding_names(2)),
            genes: ModalitySchema::numeric_only((0..genes).map(|i| format!("g{i}")).collect()),
            meta: ModalitySchema {
                numeric: vec!["age".into()],
                categorical: vec![CategoricalSpec { name: "apoe".into(), cardinality: 3 }],
            },
        }
    }

    pub fn sample(schema: &DatasetSchema, pid: &str, vid: &str, label: Option<Label>, rad: Vec<Option<f64>>) -> Sample {
        let mut modalities = ModalityKind::ALL.map(|k| ModalityBlock::absent(k, schema.modality(k)));
        modalities[ModalityKind::Radiomics.index()] = ModalityBlock::present(ModalityKind::Radiomics, rad, vec![]);
        Sample { patient_id: pid.into(), visit_id: vid.into(), label, modalities, gm_volume: None }
    }
}

#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;

    #[test]
    fn validate_requires_imaging() {
        let sc = schema(1, 0);
        let mut s = sample(&sc, "p", "v", Some(Label::Ad), vec![Some(1.0)]);
        assert!(s.validate(&sc).is_ok());
        s.block_mut(ModalityKind::Radiomics).present = false;
        assert!(matches!(s.validate(&sc), Err(Error::Schema(_))));
    }

    #[test]
    fn validate_rejects_categorical_overflow() {
        let sc = schema(1, 0);
        let mut s = sample(&sc, "p", "v", None, vec![Some(1.0)]);
        *s.block_mut(ModalityKind::Meta) = ModalityBlock::present(ModalityKind::Meta, vec![Some(1.0)], vec![Some(3)]);
        assert!(s.validate(&sc).is_err());
    }

    #[test]
    fn labels_and_modalities_parse() {
        assert_eq!("ad".parse::<Label>().unwrap(), Label::Ad);
        assert_eq!(ModalityKind::parse_list("genes, meta").unwrap(), vec![ModalityKind::Genes, ModalityKind::Meta]);
        assert!("pet".parse::<ModalityKind>().is_err());
    }
}
