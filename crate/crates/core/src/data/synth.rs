//! Synthetic multimodal cohorts with a planted class signal.
//!
//! Every modality carries the same class geometry: three prototypes forming
//! an equilateral triangle (side `snr · strength`) in a random plane of its
//! informative coordinates. Remaining coordinates are pure noise. Noise has
//! unit variance per coordinate, split between a per-patient component shared
//! by all visits and a per-visit component.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    CategoricalSpec, Dataset, DatasetSchema, Label, ModalityBlock, ModalityKind, ModalitySchema, Sample, NUM_CLASSES,
    NUM_MODALITIES,
};
use crate::error::{Error, Result};
use crate::volume::Volume3D;

/// Multiplier on the prototype separation of each modality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModalityStrength {
    pub radiomics: f64,
    pub gm: f64,
    pub genes: f64,
    pub meta: f64,
}

impl Default for ModalityStrength {
    fn default() -> Self {
        Self { radiomics: 1.0, gm: 1.0, genes: 1.0, meta: 1.0 }
    }
}

impl ModalityStrength {
    pub fn get(&self, kind: ModalityKind) -> f64 {
        match kind {
            ModalityKind::Radiomics => self.radiomics,
            ModalityKind::GmEmbedding => self.gm,
            ModalityKind::Genes => self.genes,
            ModalityKind::Meta => self.meta,
        }
    }
}

/// Emit grey-matter volumes (whose pooled cell means carry the embedding) instead of embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmVolumeConfig {
    pub side: usize,
    pub grid: usize,
    pub voxel_noise: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Patients per class, in (CTL, MCI, AD) order.
    pub class_counts: [usize; NUM_CLASSES],
    pub radiomics_dim: usize,
    pub gm_dim: usize,
    pub genes_dim: usize,
    pub meta_numeric_dim: usize,
    /// Cardinalities of the metadata categorical features; the first one is class-dependent.
    pub meta_categorical: Vec<usize>,
    pub informative_dims: usize,
    /// Distance between class prototypes in units of per-coordinate noise SD.
    pub snr: f64,
    pub strength: ModalityStrength,
    /// Fraction of patients without gene expression.
    pub missing_genes: f64,
    /// Fraction of patients without clinical metadata.
    pub missing_meta: f64,
    /// Probability that a single tabular entry is missing.
    pub cell_missing_rate: f64,
    /// Inclusive range of visits per patient.
    pub visits: [usize; 2],
    /// Share of noise variance that is constant across a patient's visits.
    pub patient_effect: f64,
    pub gm_volume: Option<GmVolumeConfig>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            class_counts: [100, 100, 100],
            radiomics_dim: 12,
            gm_dim: 16,
            genes_dim: 40,
            meta_numeric_dim: 4,
            meta_categorical: vec![3, 2],
            informative_dims: 4,
            snr: 2.0,
            strength: ModalityStrength::default(),
            missing_genes: 0.1,
            missing_meta: 0.1,
            cell_missing_rate: 0.02,
            visits: [1, 3],
            patient_effect: 0.3,
            gm_volume: None,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.class_counts.iter().sum::<usize>() == 0 {
            return bad("class_counts must request at least one patient".into());
        }
        if !(self.snr > 0.0 && self.snr.is_finite()) {
            return bad(format!("snr must be positive, got {}", self.snr));
        }
        for k in ModalityKind::ALL {
            let s = self.strength.get(k);
            if !(s >= 0.0 && s.is_finite()) {
                return bad(format!("strength for {k} must be non-negative, got {s}"));
            }
        }
        if self.radiomics_dim == 0 && self.gm_dim == 0 {
            return bad("at least one imaging modality needs features".into());
        }
        if self.informative_dims == 0 {
            return bad("informative_dims must be at least 1".into());
        }
        for (name, f) in [
            ("missing_genes", self.missing_genes),
            ("missing_meta", self.missing_meta),
            ("cell_missing_rate", self.cell_missing_rate),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return bad(format!("{name} must lie in [0, 1], got {f}"));
            }
        }
        if !(0.0..1.0).contains(&self.patient_effect) {
            return bad(format!("patient_effect must lie in [0, 1), got {}", self.patient_effect));
        }
        if self.visits[0] == 0 || self.visits[0] > self.visits[1] {
            return bad(format!("visits range {:?} is invalid", self.visits));
        }
        if self.meta_categorical.iter().any(|&c| c < 2) {
            return bad("categorical cardinalities must be at least 2".into());
        }
        if let Some(v) = &self.gm_volume {
            if v.grid == 0 || v.grid.pow(3) != self.gm_dim || v.side < v.grid {
                return bad(format!("gm_volume grid {}³ must equal gm_dim {} and fit in side {}", v.grid, self.gm_dim, v.side));
            }
        }
        Ok(())
    }

    pub fn total_patients(&self) -> usize {
        self.class_counts.iter().sum()
    }

    fn dim(&self, kind: ModalityKind) -> usize {
        match kind {
            ModalityKind::Radiomics => self.radiomics_dim,
            ModalityKind::GmEmbedding => self.gm_dim,
            ModalityKind::Genes => self.genes_dim,
            ModalityKind::Meta => self.meta_numeric_dim,
        }
    }

    pub fn schema(&self) -> DatasetSchema {
        const META_NAMES: [&str; 4] = ["mmse", "age", "education_years", "cdr_sb"];
        const CAT_NAMES: [&str; 2] = ["apoe4_alleles", "sex"];
        DatasetSchema {
            radiomics: ModalitySchema::numeric_only((0..self.radiomics_dim).map(|i| format!("rad_{i:03}")).collect()),
            gm: ModalitySchema::numeric_only(DatasetSchema::embedding_names(self.gm_dim)),
            genes: ModalitySchema::numeric_only((0..self.genes_dim).map(|i| format!("GENE{i:03}")).collect()),
            meta: ModalitySchema {
                numeric: (0..self.meta_numeric_dim)
                    .map(|i| META_NAMES.get(i).map_or_else(|| format!("meta_num_{i}"), |s| s.to_string()))
                    .collect(),
                categorical: self
                    .meta_categorical
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| CategoricalSpec {
                        name: CAT_NAMES.get(i).map_or_else(|| format!("meta_cat_{i}"), |s| s.to_string()),
                        cardinality: c,
                    })
                    .collect(),
            },
        }
    }
}

/// Ground truth of a generated cohort, for oracles.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthTruth {
    /// Informative numeric feature indices per modality.
    pub informative: [Vec<usize>; NUM_MODALITIES],
    /// Class prototypes on the informative coordinates (before the per-feature affine map).
    pub prototypes: [[Vec<f64>; NUM_CLASSES]; NUM_MODALITIES],
    /// Per-feature `(scale, shift)` applied to the latent value.
    pub affine: [Vec<(f64, f64)>; NUM_MODALITIES],
}

/// Class probabilities of the class-dependent categorical feature.
const CATEGORICAL_PROFILE: [[f64; 3]; NUM_CLASSES] = [[0.70, 0.25, 0.05], [0.50, 0.35, 0.15], [0.30, 0.45, 0.25]];

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn orthonormal_pair(rng: &mut ChaCha8Rng, r: usize) -> (Vec<f64>, Vec<f64>) {
    loop {
        let u: Vec<f64> = (0..r).map(|_| normal(rng)).collect();
        let v: Vec<f64> = (0..r).map(|_| normal(rng)).collect();
        let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nu < 1e-9 {
            continue;
        }
        let u: Vec<f64> = u.iter().map(|x| x / nu).collect();
        let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
        let w: Vec<f64> = v.iter().zip(&u).map(|(b, a)| b - dot * a).collect();
        let nw = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nw < 1e-9 {
            continue;
        }
        return (u, w.iter().map(|x| x / nw).collect());
    }
}

/// Equilateral-triangle prototypes with the given side length.
fn prototypes(rng: &mut ChaCha8Rng, r: usize, side: f64) -> [Vec<f64>; NUM_CLASSES] {
    if r == 1 {
        // ordered CTL < MCI < AD on a line, neighbours `side` apart
        return [vec![-side], vec![0.0], vec![side]];
    }
    let (u, v) = orthonormal_pair(rng, r);
    let radius = side / 3f64.sqrt();
    std::array::from_fn(|c| {
        let angle = std::f64::consts::FRAC_PI_2 + c as f64 * 2.0 * std::f64::consts::PI / 3.0;
        let (a, b) = (radius * angle.cos(), radius * angle.sin());
        u.iter().zip(&v).map(|(x, y)| a * x + b * y).collect()
    })
}

fn sample_categorical(rng: &mut ChaCha8Rng, probs: &[f64]) -> u32 {
    let x: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if x < acc {
            return i as u32;
        }
    }
    (probs.len() - 1) as u32
}

fn pick_exact(rng: &mut ChaCha8Rng, n: usize, fraction: f64) -> Vec<bool> {
    let count = (fraction * n as f64).round() as usize;
    let mut flags: Vec<bool> = (0..n).map(|i| i < count).collect();
    flags.shuffle(rng);
    flags
}

pub fn synth_generate(config: &SynthConfig, seed: u64) -> Result<Dataset> {
    synth_generate_with_truth(config, seed).map(|(d, _)| d)
}

pub fn synth_generate_with_truth(config: &SynthConfig, seed: u64) -> Result<(Dataset, SynthTruth)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let schema = config.schema();

    let mut informative: [Vec<usize>; NUM_MODALITIES] = Default::default();
    let mut protos: [[Vec<f64>; NUM_CLASSES]; NUM_MODALITIES] = Default::default();
    let mut affine: [Vec<(f64, f64)>; NUM_MODALITIES] = Default::default();
    for kind in ModalityKind::ALL {
        let d = config.dim(kind);
        let r = config.informative_dims.min(d);
        let mut idx: Vec<usize> = (0..d).collect();
        idx.shuffle(&mut rng);
        let mut chosen = idx[..r].to_vec();
        chosen.sort_unstable();
        informative[kind.index()] = chosen;
        if r > 0 {
            protos[kind.index()] = prototypes(&mut rng, r, config.snr * config.strength.get(kind));
        }
        affine[kind.index()] = (0..d)
            .map(|_| {
                if kind == ModalityKind::GmEmbedding {
                    (1.0, 0.0)
                } else {
                    (rng.random_range(0.5..3.0), rng.random_range(-5.0..5.0))
                }
            })
            .collect();
    }

    let n = config.total_patients();
    let mut labels: Vec<Label> =
        config.class_counts.iter().enumerate().flat_map(|(c, &k)| std::iter::repeat_n(Label::ALL[c], k)).collect();
    labels.shuffle(&mut rng);
    let no_genes = pick_exact(&mut rng, n, config.missing_genes);
    let no_meta = pick_exact(&mut rng, n, config.missing_meta);

    let rho = config.patient_effect;
    let (shared_sd, visit_sd) = (rho.sqrt(), (1.0 - rho).sqrt());
    let mut samples = Vec::new();
    for (p, &label) in labels.iter().enumerate() {
        let patient_id = format!("P{:04}", p + 1);
        let patient_noise: [Vec<f64>; NUM_MODALITIES] =
            std::array::from_fn(|m| (0..config.dim(ModalityKind::ALL[m])).map(|_| normal(&mut rng)).collect());
        let visits = rng.random_range(config.visits[0]..=config.visits[1]);
        for v in 0..visits {
            let mut modalities = ModalityKind::ALL.map(|k| ModalityBlock::absent(k, schema.modality(k)));
            for kind in ModalityKind::ALL {
                let m = kind.index();
                let present = match kind {
                    ModalityKind::Genes => !no_genes[p],
                    ModalityKind::Meta => !no_meta[p],
                    _ => config.dim(kind) > 0,
                };
                let mut latent: Vec<f64> =
                    patient_noise[m].iter().map(|&z| shared_sd * z + visit_sd * normal(&mut rng)).collect();
                for (slot, &j) in informative[m].iter().enumerate() {
                    latent[j] += protos[m][label.index()][slot];
                }
                let mut numeric: Vec<Option<f64>> =
                    latent.iter().zip(&affine[m]).map(|(&z, &(a, b))| Some(a * z + b)).collect();
                let mut categorical = Vec::new();
                if kind == ModalityKind::Meta {
                    for (i, &card) in config.meta_categorical.iter().enumerate() {
                        let code = if i == 0 && card == 3 {
                            sample_categorical(&mut rng, &CATEGORICAL_PROFILE[label.index()])
                        } else {
                            rng.random_range(0..card as u32)
                        };
                        categorical.push(Some(code));
                    }
                }
                if kind != ModalityKind::GmEmbedding && config.cell_missing_rate > 0.0 {
                    for v in numeric.iter_mut() {
                        if rng.random::<f64>() < config.cell_missing_rate {
                            *v = None;
                        }
                    }
                    for v in categorical.iter_mut() {
                        if rng.random::<f64>() < config.cell_missing_rate {
                            *v = None;
                        }
                    }
                }
                if present {
                    modalities[m] = ModalityBlock::present(kind, numeric, categorical);
                }
            }
            let gm_volume = match &config.gm_volume {
                Some(vc) => {
                    let emb: Vec<f64> = modalities[ModalityKind::GmEmbedding.index()].numeric.iter().map(|v| v.unwrap_or(0.0)).collect();
                    Some(Arc::new(embed_in_volume(&mut rng, &emb, vc)?))
                }
                None => None,
            };
            samples.push(Sample { patient_id: patient_id.clone(), visit_id: format!("v{v}"), label: Some(label), modalities, gm_volume });
        }
    }
    let dataset = Dataset::new(schema, samples)?;
    Ok((dataset, SynthTruth { informative, prototypes: protos, affine }))
}

/// Volume whose `grid³` cell means equal `emb` up to voxel noise.
fn embed_in_volume(rng: &mut ChaCha8Rng, emb: &[f64], vc: &GmVolumeConfig) -> Result<Volume3D> {
    let g = vc.grid;
    let s = vc.side;
    let mut data = Vec::with_capacity(s * s * s);
    for x in 0..s {
        for y in 0..s {
            for z in 0..s {
                let cell = ((x * g / s) * g + y * g / s) * g + z * g / s;
                data.push((emb[cell] + vc.voxel_noise * normal(rng)) as f32);
            }
        }
    }
    Volume3D::new([s, s, s], [1.0; 3], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patient_counts_follow_config() {
        let cfg = SynthConfig { class_counts: [100, 100, 100], ..Default::default() };
        let d = synth_generate(&cfg, 1).unwrap();
        assert_eq!(d.patient_label_counts(), [100, 100, 100]);
        assert_eq!(d.patients().len(), 300);
    }

    #[test]
    fn deterministic_for_seed() {
        let cfg = SynthConfig { class_counts: [5, 5, 5], ..Default::default() };
        assert_eq!(synth_generate(&cfg, 3).unwrap(), synth_generate(&cfg, 3).unwrap());
        assert_ne!(synth_generate(&cfg, 3).unwrap(), synth_generate(&cfg, 4).unwrap());
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            SynthConfig { snr: 0.0, ..Default::default() },
            SynthConfig { snr: -1.0, ..Default::default() },
            SynthConfig { class_counts: [0, 0, 0], ..Default::default() },
            SynthConfig { missing_genes: 1.5, ..Default::default() },
            SynthConfig { visits: [2, 1], ..Default::default() },
        ] {
            assert!(matches!(synth_generate(&cfg, 0), Err(Error::Config(_))));
        }
    }

    #[test]
    fn prototypes_form_equilateral_triangle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = prototypes(&mut rng, 6, 2.5);
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        for (i, j) in [(0, 1), (1, 2), (0, 2)] {
            assert!((dist(&p[i], &p[j]) - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn imaging_always_present() {
        let cfg = SynthConfig { class_counts: [20, 20, 20], missing_genes: 1.0, missing_meta: 1.0, ..Default::default() };
        let d = synth_generate(&cfg, 2).unwrap();
        assert!(d.samples.iter().all(|s| s.is_present(ModalityKind::GmEmbedding) && !s.is_present(ModalityKind::Genes)));
    }

    #[test]
    fn volume_cells_carry_embedding() {
        let cfg = SynthConfig {
            class_counts: [1, 1, 1],
            gm_dim: 8,
            gm_volume: Some(GmVolumeConfig { side: 4, grid: 2, voxel_noise: 0.0 }),
            ..Default::default()
        };
        let d = synth_generate(&cfg, 2).unwrap();
        let s = &d.samples[0];
        let vol = s.gm_volume.as_ref().unwrap();
        let emb = &s.block(ModalityKind::GmEmbedding).numeric;
        assert!((vol.get(3, 0, 1) as f64 - emb[4].unwrap()).abs() < 1e-6);
    }
}
