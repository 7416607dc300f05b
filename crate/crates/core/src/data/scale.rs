use serde::{Deserialize, Serialize};

use super::{Dataset, ModalityKind, Sample, NUM_MODALITIES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaling {
    pub mean: f64,
    /// Population standard deviation over the fit split.
    pub sd: f64,
    /// Zero variance (or no observations): values pass through unchanged.
    pub passthrough: bool,
}

/// Standard scaler over numeric features of every modality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub features: [Vec<FeatureScaling>; NUM_MODALITIES],
    pub warnings: Vec<String>,
}

impl Scaler {
    pub fn fit(train: &Dataset) -> Self {
        let mut features: [Vec<FeatureScaling>; NUM_MODALITIES] = Default::default();
        let mut warnings = Vec::new();
        for kind in ModalityKind::ALL {
            for (j, name) in train.schema.modality(kind).numeric.iter().enumerate() {
                let values: Vec<f64> = train
                    .samples
                    .iter()
                    .filter(|s| s.is_present(kind))
                    .filter_map(|s| s.block(kind).numeric[j])
                    .collect();
                let n = values.len() as f64;
                let mean = if values.is_empty() { 0.0 } else { values.iter().sum::<f64>() / n };
                let var = if values.is_empty() { 0.0 } else { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n };
                let sd = var.sqrt();
                let passthrough = !(sd > 0.0 && sd.is_finite());
                if passthrough {
                    let msg = format!("{kind}:{name} has zero variance in the fit split; left unscaled");
                    log::warn!("{msg}");
                    warnings.push(msg);
                }
                features[kind.index()].push(FeatureScaling { mean, sd, passthrough });
            }
        }
        Self { features, warnings }
    }

    pub fn apply(&self, sample: &Sample) -> Sample {
        let mut out = sample.clone();
        for kind in ModalityKind::ALL {
            let block = out.block_mut(kind);
            if !block.present {
                continue;
            }
            for (v, f) in block.numeric.iter_mut().zip(&self.features[kind.index()]) {
                if let Some(x) = v {
                    if !f.passthrough {
                        *x = (*x - f.mean) / f.sd;
                    }
                }
            }
        }
        out
    }

    pub fn apply_dataset(&self, data: &Dataset) -> Dataset {
        Dataset { schema: data.schema.clone(), samples: data.samples.iter().map(|s| self.apply(s)).collect() }
    }
}
