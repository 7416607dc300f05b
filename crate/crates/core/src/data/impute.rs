use serde::{Deserialize, Serialize};

use super::{Dataset, Label, ModalityKind, Sample, NUM_CLASSES, NUM_MODALITIES};
use crate::error::{Error, Result};

/// Which statistics fill a gap.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImputeMode {
    /// Use the sample's own class statistics (training rows only).
    ClassConditional,
    /// Use class-marginal statistics; the only option for unlabelled rows.
    Marginal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NumericImputation {
    pub class_mean: [Option<f64>; NUM_CLASSES],
    pub global_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoricalImputation {
    pub class_mode: [Option<u32>; NUM_CLASSES],
    pub global_mode: u32,
}

/// Per-feature fill values fitted on a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImputationModel {
    pub numeric: [Vec<NumericImputation>; NUM_MODALITIES],
    pub categorical: [Vec<CategoricalImputation>; NUM_MODALITIES],
}

fn mode(counts: &std::collections::BTreeMap<u32, usize>) -> Option<u32> {
    // highest count, smallest code on ties
    counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).map(|(&c, _)| c)
}

impl ImputationModel {
    /// Fits on `train` only. Fails if a feature of a modality present in the
    /// split has no observed value.
    pub fn fit(train: &Dataset) -> Result<Self> {
        let schema = &train.schema;
        let mut numeric: [Vec<NumericImputation>; NUM_MODALITIES] = Default::default();
        let mut categorical: [Vec<CategoricalImputation>; NUM_MODALITIES] = Default::default();
        for kind in ModalityKind::ALL {
            // a modality never observed in the fit split gets no fill values
            if !train.samples.iter().any(|s| s.is_present(kind)) {
                continue;
            }
            let ms = schema.modality(kind);
            for (j, name) in ms.numeric.iter().enumerate() {
                let mut sums = [0.0; NUM_CLASSES];
                let mut counts = [0usize; NUM_CLASSES];
                let (mut total, mut n) = (0.0, 0usize);
                for s in train.samples.iter().filter(|s| s.is_present(kind)) {
                    if let Some(v) = s.block(kind).numeric[j] {
                        total += v;
                        n += 1;
                        if let Some(l) = s.label {
                            sums[l.index()] += v;
                            counts[l.index()] += 1;
                        }
                    }
                }
                if n == 0 {
                    return Err(Error::Fit { feature: format!("{kind}:{name}") });
                }
                let class_mean = std::array::from_fn(|c| (counts[c] > 0).then(|| sums[c] / counts[c] as f64));
                numeric[kind.index()].push(NumericImputation { class_mean, global_mean: total / n as f64 });
            }
            for (j, spec) in ms.categorical.iter().enumerate() {
                let mut per_class: [std::collections::BTreeMap<u32, usize>; NUM_CLASSES] = Default::default();
                let mut global = std::collections::BTreeMap::new();
                for s in train.samples.iter().filter(|s| s.is_present(kind)) {
                    if let Some(v) = s.block(kind).categorical[j] {
                        *global.entry(v).or_insert(0) += 1;
                        if let Some(l) = s.label {
                            *per_class[l.index()].entry(v).or_insert(0) += 1;
                        }
                    }
                }
                let global_mode = mode(&global).ok_or_else(|| Error::Fit { feature: format!("{kind}:{}", spec.name) })?;
                let class_mode = std::array::from_fn(|c| mode(&per_class[c]));
                categorical[kind.index()].push(CategoricalImputation { class_mode, global_mode });
            }
        }
        Ok(Self { numeric, categorical })
    }

    /// Fills missing entries of present modalities. Absent modalities are left untouched.
    pub fn apply(&self, sample: &Sample, mode: ImputeMode) -> Sample {
        let mut out = sample.clone();
        let label: Option<Label> = match mode {
            ImputeMode::ClassConditional => sample.label,
            ImputeMode::Marginal => None,
        };
        for kind in ModalityKind::ALL {
            let block = out.block_mut(kind);
            if !block.present {
                continue;
            }
            for (v, imp) in block.numeric.iter_mut().zip(&self.numeric[kind.index()]) {
                if v.is_none() {
                    let class_value = label.and_then(|l| imp.class_mean[l.index()]);
                    *v = Some(class_value.unwrap_or(imp.global_mean));
                }
            }
            for (v, imp) in block.categorical.iter_mut().zip(&self.categorical[kind.index()]) {
                if v.is_none() {
                    let class_value = label.and_then(|l| imp.class_mode[l.index()]);
                    *v = Some(class_value.unwrap_or(imp.global_mode));
                }
            }
        }
        out
    }

    pub fn apply_dataset(&self, data: &Dataset, mode: ImputeMode) -> Dataset {
        Dataset { schema: data.schema.clone(), samples: data.samples.iter().map(|s| self.apply(s, mode)).collect() }
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::{sample, schema};
    use super::super::{ModalityBlock, ModalityKind};
    use super::*;

    #[test]
    fn class_mean_fills_numeric_gap() {
        let sc = schema(1, 0);
        let rows = vec![
            sample(&sc, "a", "1", Some(Label::Ctl), vec![Some(1.0)]),
            sample(&sc, "b", "1", Some(Label::Ctl), vec![Some(3.0)]),
            sample(&sc, "c", "1", Some(Label::Ad), vec![Some(10.0)]),
        ];
        let model = ImputationModel::fit(&Dataset::new(sc.clone(), rows).unwrap()).unwrap();
        let gap = sample(&sc, "d", "1", Some(Label::Ctl), vec![None]);
        let filled = model.apply(&gap, ImputeMode::ClassConditional);
        assert_eq!(filled.block(ModalityKind::Radiomics).numeric[0], Some(2.0));
    }

    #[test]
    fn class_mode_fills_categorical_gap() {
        let sc = schema(1, 0);
        let mut rows = Vec::new();
        for (i, code) in [0u32, 0, 1].into_iter().enumerate() {
            let mut s = sample(&sc, &format!("p{i}"), "1", Some(Label::Ad), vec![Some(0.0)]);
            *s.block_mut(ModalityKind::Meta) = ModalityBlock::present(ModalityKind::Meta, vec![Some(1.0)], vec![Some(code)]);
            rows.push(s);
        }
        let model = ImputationModel::fit(&Dataset::new(sc.clone(), rows).unwrap()).unwrap();
        let mut gap = sample(&sc, "x", "1", Some(Label::Ad), vec![Some(0.0)]);
        *gap.block_mut(ModalityKind::Meta) = ModalityBlock::present(ModalityKind::Meta, vec![Some(1.0)], vec![None]);
        let filled = model.apply(&gap, ImputeMode::ClassConditional);
        assert_eq!(filled.block(ModalityKind::Meta).categorical[0], Some(0));
    }

    #[test]
    fn unlabelled_rows_use_marginal_mean() {
        let sc = schema(1, 0);
        let rows = vec![
            sample(&sc, "a", "1", Some(Label::Ctl), vec![Some(2.0)]),
            sample(&sc, "b", "1", Some(Label::Mci), vec![Some(4.0)]),
            sample(&sc, "c", "1", Some(Label::Ad), vec![Some(6.0)]),
        ];
        let model = ImputationModel::fit(&Dataset::new(sc.clone(), rows).unwrap()).unwrap();
        let gap = sample(&sc, "d", "1", None, vec![None]);
        assert_eq!(model.apply(&gap, ImputeMode::ClassConditional).block(ModalityKind::Radiomics).numeric[0], Some(4.0));
        let labelled = sample(&sc, "d", "1", Some(Label::Ctl), vec![None]);
        assert_eq!(model.apply(&labelled, ImputeMode::Marginal).block(ModalityKind::Radiomics).numeric[0], Some(4.0));
    }

    #[test]
    fn unobserved_feature_is_a_fit_error() {
        let sc = schema(2, 0);
        let rows = vec![sample(&sc, "a", "1", Some(Label::Ctl), vec![Some(1.0), None])];
        match ImputationModel::fit(&Dataset::new(sc, rows).unwrap()) {
            Err(Error::Fit { feature }) => assert_eq!(feature, "radiomics:r1"),
            other => panic!("expected FitError, got {other:?}"),
        }
    }
}
