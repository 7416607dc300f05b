use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{class_weights, focal_loss_batch};
use super::optim::{adam_step, AdamState};
use crate::data::{Dataset, NUM_CLASSES};
use crate::diff::Tape;
use crate::error::{Error, Result};
use crate::fusion::{apply_dropout, DropoutPolicy, FusionModel, ModalityMask};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub focal_gamma: f64,
    pub dropout: DropoutPolicy,
    pub seed: u64,
    /// Share of training patients held out for early stopping.
    pub val_fraction: f64,
    /// Aggregate folds with the `k - 1` SD instead of the population SD.
    pub sample_sd: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            weight_decay: 5e-4,
            batch_size: 64,
            max_epochs: 50,
            patience: 5,
            focal_gamma: 2.0,
            dropout: DropoutPolicy::default(),
            seed: 0,
            val_fraction: 0.15,
            sample_sd: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return bad("batch_size, max_epochs and patience must be positive".into());
        }
        if self.patience > self.max_epochs {
            return bad(format!("patience {} exceeds max_epochs {}", self.patience, self.max_epochs));
        }
        if !(self.focal_gamma >= 0.0 && self.focal_gamma.is_finite()) {
            return bad(format!("focal_gamma must be non-negative, got {}", self.focal_gamma));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction must lie in (0, 1), got {}", self.val_fraction));
        }
        self.dropout.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Patience counter on a loss that should decrease.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::INFINITY, best_epoch: 0, stale: 0 }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> StopDecision {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.stale = 0;
            StopDecision::Improved
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were restored (1-based).
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Class probabilities for every sample of `data` under `mask`, in f64.
pub fn predict_dataset<T: Scalar>(model: &FusionModel<T>, data: &Dataset, mask: &ModalityMask) -> Result<Vec<[f64; NUM_CLASSES]>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.samples.chunks(256) {
        let refs: Vec<_> = chunk.iter().collect();
        let probs = model.predict_batch(&refs, &vec![*mask; refs.len()])?;
        out.extend(probs.data().chunks(NUM_CLASSES).map(|r| [r[0].to_f64_lossy(), r[1].to_f64_lossy(), r[2].to_f64_lossy()]));
    }
    Ok(out)
}

fn label_indices(data: &Dataset) -> Result<Vec<usize>> {
    Ok(data.labels()?.into_iter().map(|l| l.index()).collect())
}

/// Mean focal loss over `data` under `mask`.
pub fn evaluate_loss<T: Scalar>(
    model: &FusionModel<T>,
    data: &Dataset,
    mask: &ModalityMask,
    weights: &[f64],
    gamma: f64,
) -> Result<f64> {
    let probs = predict_dataset(model, data, mask)?;
    focal_loss_batch(&probs, &label_indices(data)?, weights, gamma)
}

/// Minibatch training with early stopping on `val`; restores the best epoch.
///
/// Each training sample starts from `base` intersected with its own presence,
/// then passes through modality dropout. Validation uses `base` only.
pub fn train_with_validation<T: Scalar>(
    model: &mut FusionModel<T>,
    train: &Dataset,
    val: &Dataset,
    config: &TrainConfig,
    base: &ModalityMask,
) -> Result<TrainHistory> {
    config.validate()?;
    if val.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let labels = label_indices(train)?;
    let weights = class_weights(&train.label_counts())?;
    let weights_t: Vec<T> = weights.iter().map(|&w| T::c(w)).collect();
    let gamma = T::c(config.focal_gamma);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = AdamState::new(&model.params);
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = model.params.clone();
    let mut epochs = Vec::new();
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=config.max_epochs {
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let samples: Vec<_> = chunk.iter().map(|&i| &train.samples[i]).collect();
            let masks: Vec<ModalityMask> =
                samples.iter().map(|s| apply_dropout(base.effective(s), &config.dropout, &mut rng)).collect();
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let batch = model.batch(&samples, &masks)?;
            let tape = Tape::new();
            let p = model.params.bind(&tape);
            let out = model.forward(&p, &tape, &batch)?;
            let loss = out.logits.focal_loss(&batch_labels, &weights_t, gamma)?;
            let lv = loss.value().item().to_f64_lossy();
            if !lv.is_finite() {
                return Err(Error::Numeric(format!("training loss became {lv} in epoch {epoch}")));
            }
            let mut grads = tape.backward(loss)?;
            let g: Vec<_> = model.params.ids().map(|id| grads.take(p[id])).collect();
            drop(p);
            adam_step(&mut model.params, &g, &mut state, config.lr, config.weight_decay)?;
            total += lv * chunk.len() as f64;
        }
        let train_loss = total / train.len() as f64;
        let val_loss = evaluate_loss(model, val, base, &weights, config.focal_gamma)?;
        if !val_loss.is_finite() {
            return Err(Error::Numeric(format!("validation loss became {val_loss} in epoch {epoch}")));
        }
        log::debug!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6}");
        epochs.push(EpochRecord { epoch, train_loss, val_loss });
        match stopper.observe(epoch, val_loss) {
            StopDecision::Improved => best = model.params.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                stopped_early = true;
                break;
            }
        }
    }
    model.params = best;
    Ok(TrainHistory { epochs, best_epoch: stopper.best_epoch(), stopped_early })
}

/// Carves a patient-grouped validation split from `data` and trains on the rest.
pub fn train<T: Scalar>(model: &mut FusionModel<T>, data: &Dataset, config: &TrainConfig) -> Result<TrainHistory> {
    let all: Vec<usize> = (0..data.len()).collect();
    let (tr, va) = crate::data::validation_split(data, &all, config.val_fraction, config.seed)?;
    train_with_validation(model, &data.subset(&tr), &data.subset(&va), config, &ModalityMask::all())
}
