//! Shapley attribution over tabular features and gradient·input attribution
//! over fused tokens.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ModalityKind, Sample, NUM_CLASSES};
use crate::diff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::fusion::{FusionModel, ModalityMask};
use crate::scalar::Scalar;
use crate::tabular::TokenSource;
use crate::train::derive_seed;

/// Largest feature set accepted by exact enumeration.
pub const MAX_EXACT_FEATURES: usize = 15;

const PREDICT_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributionMethod {
    ExactShapley,
    McShapley,
    GradInput,
}

/// Contents of `attributions.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub method: AttributionMethod,
    pub target_class: usize,
    pub features: Vec<String>,
    pub phi: Vec<f64>,
    /// Output on the background reference; 0 for gradient attribution.
    pub baseline_value: f64,
    /// Output on the explained sample.
    pub sample_value: f64,
    /// `Σφ − (sample_value − baseline_value)`; absent for gradient attribution.
    pub efficiency_residual: Option<f64>,
}

/// Shapley values of a game together with the values of the empty and full coalitions.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapleyValues {
    pub phi: Vec<f64>,
    pub empty_value: f64,
    pub full_value: f64,
}

impl ShapleyValues {
    pub fn efficiency_residual(&self) -> f64 {
        self.phi.iter().sum::<f64>() - (self.full_value - self.empty_value)
    }
}

/// Exact Shapley values of an `n`-player game. `value` receives coalitions as
/// membership vectors and returns one value per coalition.
pub fn shapley_game_exact<V>(n: usize, mut value: V) -> Result<ShapleyValues>
where
    V: FnMut(&[Vec<bool>]) -> Result<Vec<f64>>,
{
    if n > MAX_EXACT_FEATURES {
        return Err(Error::Arity { n, max: MAX_EXACT_FEATURES });
    }
    let coalitions: Vec<Vec<bool>> = (0..1usize << n).map(|s| (0..n).map(|i| s >> i & 1 == 1).collect()).collect();
    let v = value(&coalitions)?;
    if v.len() != coalitions.len() {
        return Err(Error::Shape(format!("value function returned {} values for {} coalitions", v.len(), coalitions.len())));
    }
    let fact: Vec<f64> = (0..=n).scan(1.0, |acc, k| {
        if k > 0 {
            *acc *= k as f64;
        }
        Some(*acc)
    }).collect();
    let weight: Vec<f64> = (0..n).map(|s| fact[s] * fact[n - s - 1] / fact[n]).collect();
    let mut phi = vec![0.0; n];
    for (i, p) in phi.iter_mut().enumerate() {
        let bit = 1usize << i;
        for s in (0..1usize << n).filter(|s| s & bit == 0) {
            *p += weight[s.count_ones() as usize] * (v[s | bit] - v[s]);
        }
    }
    Ok(ShapleyValues { phi, empty_value: v[0], full_value: v[(1 << n) - 1] })
}

/// Permutation-sampling estimate over `m` permutations. Permutation `k` is
/// drawn from its own generator seeded by `(seed, k)`.
pub fn shapley_game_mc<V>(n: usize, m: usize, seed: u64, mut value: V) -> Result<ShapleyValues>
where
    V: FnMut(&[Vec<bool>]) -> Result<Vec<f64>>,
{
    if m == 0 {
        return Err(Error::Config("at least one permutation is required".into()));
    }
    let mut phi = vec![0.0; n];
    let mut ends = None;
    for k in 0..m {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "perm", k as u64));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut chain = vec![vec![false; n]];
        for &i in &order {
            let mut next = chain.last().expect("non-empty chain").clone();
            next[i] = true;
            chain.push(next);
        }
        let v = value(&chain)?;
        if v.len() != chain.len() {
            return Err(Error::Shape(format!("value function returned {} values for {} coalitions", v.len(), chain.len())));
        }
        for (step, &i) in order.iter().enumerate() {
            phi[i] += v[step + 1] - v[step];
        }
        ends.get_or_insert((v[0], v[n]));
    }
    phi.iter_mut().for_each(|p| *p /= m as f64);
    let (empty_value, full_value) = ends.expect("m >= 1");
    Ok(ShapleyValues { phi, empty_value, full_value })
}

fn column_means(background: &[Vec<f64>], width: usize) -> Result<Vec<f64>> {
    if background.is_empty() {
        return Err(Error::Config("background set is empty".into()));
    }
    if let Some(row) = background.iter().find(|r| r.len() != width) {
        return Err(Error::Shape(format!("background row has {} values, expected {width}", row.len())));
    }
    Ok((0..width).map(|j| background.iter().map(|r| r[j]).sum::<f64>() / background.len() as f64).collect())
}

fn vector_game<'a, F>(f: &'a F, sample: &'a [f64], reference: Vec<f64>, features: &'a [usize]) -> Result<impl FnMut(&[Vec<bool>]) -> Result<Vec<f64>> + 'a>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if let Some(&j) = features.iter().find(|&&j| j >= sample.len()) {
        return Err(Error::Shape(format!("feature index {j} out of range for {} values", sample.len())));
    }
    Ok(move |coalitions: &[Vec<bool>]| {
        coalitions
            .iter()
            .map(|c| {
                let mut x = sample.to_vec();
                for (&j, &on) in features.iter().zip(c) {
                    if !on {
                        x[j] = reference[j];
                    }
                }
                f(&x)
            })
            .collect()
    })
}

/// Exact Shapley values of `features` for a function of a numeric vector.
/// Absent features take the background column mean; features outside
/// `features` keep their sample value. The returned `phi` is indexed like `features`.
pub fn shapley_exact<F>(f: F, sample: &[f64], background: &[Vec<f64>], features: &[usize]) -> Result<ShapleyValues>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let reference = column_means(background, sample.len())?;
    shapley_game_exact(features.len(), vector_game(&f, sample, reference, features)?)
}

/// Permutation-sampling counterpart of [`shapley_exact`].
pub fn shapley_mc<F>(f: F, sample: &[f64], background: &[Vec<f64>], features: &[usize], m: usize, seed: u64) -> Result<ShapleyValues>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let reference = column_means(background, sample.len())?;
    shapley_game_mc(features.len(), m, seed, vector_game(&f, sample, reference, features)?)
}

/// One tabular input of the model, in token order.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularFeature {
    pub name: String,
    pub source: TokenSource,
}

/// Background value substituted for an absent feature.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Reference {
    Numeric(f64),
    Categorical(u32),
}

pub fn tabular_features<T: Scalar>(model: &FusionModel<T>) -> Vec<TabularFeature> {
    let layout = &model.encoder.layout;
    layout
        .tokens
        .iter()
        .zip(&layout.names)
        .filter(|(t, _)| **t != TokenSource::Cls)
        .map(|(&source, name)| TabularFeature { name: name.clone(), source })
        .collect()
}

/// Means of numeric features and modes of categorical features over the
/// background samples where the modality is present and the entry observed.
pub fn background_reference(features: &[TabularFeature], background: &Dataset) -> Result<Vec<Reference>> {
    if background.is_empty() {
        return Err(Error::Config("background set is empty".into()));
    }
    features
        .iter()
        .map(|f| {
            let rows = background.samples.iter().filter(|s| f.source.modality().is_some_and(|k| s.is_present(k)));
            match f.source {
                TokenSource::Numeric { modality, feature } => {
                    let vals: Vec<f64> = rows.filter_map(|s| s.block(modality).numeric[feature]).collect();
                    if vals.is_empty() {
                        return Err(Error::Fit { feature: f.name.clone() });
                    }
                    Ok(Reference::Numeric(vals.iter().sum::<f64>() / vals.len() as f64))
                }
                TokenSource::Categorical { modality, feature } => {
                    let mut counts = std::collections::BTreeMap::new();
                    for code in rows.filter_map(|s| s.block(modality).categorical[feature]) {
                        *counts.entry(code).or_insert(0usize) += 1;
                    }
                    let best = counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)));
                    best.map(|(&c, _)| Reference::Categorical(c)).ok_or_else(|| Error::Fit { feature: f.name.clone() })
                }
                TokenSource::Cls => Err(Error::Shape("CLS is not a feature".into())),
            }
        })
        .collect()
}

fn substitute(sample: &mut Sample, source: TokenSource, reference: Reference) {
    match (source, reference) {
        (TokenSource::Numeric { modality, feature }, Reference::Numeric(v)) => {
            sample.block_mut(modality).numeric[feature] = Some(v)
        }
        (TokenSource::Categorical { modality, feature }, Reference::Categorical(c)) => {
            sample.block_mut(modality).categorical[feature] = Some(c)
        }
        _ => unreachable!("reference kind follows its feature"),
    }
}

/// How to estimate Shapley values for [`explain_shapley`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ShapleyMethod {
    Exact,
    MonteCarlo { permutations: usize, seed: u64 },
}

/// Shapley attribution of the target-class probability to tabular features.
///
/// Features of modalities absent under `mask` (or missing from the sample)
/// are not enumerated and receive `φ = 0`.
pub fn explain_shapley<T: Scalar>(
    model: &FusionModel<T>,
    sample: &Sample,
    mask: &ModalityMask,
    background: &Dataset,
    target: usize,
    method: ShapleyMethod,
) -> Result<Attribution> {
    if target >= NUM_CLASSES {
        return Err(Error::Config(format!("target class {target} out of range")));
    }
    let features = tabular_features(model);
    let reference = background_reference(&features, background)?;
    let effective = mask.effective(sample);
    let active: Vec<usize> = (0..features.len())
        .filter(|&i| features[i].source.modality().is_some_and(|k| effective.is_present(k)))
        .collect();
    let game = |coalitions: &[Vec<bool>]| -> Result<Vec<f64>> {
        let variants: Vec<Sample> = coalitions
            .iter()
            .map(|c| {
                let mut s = sample.clone();
                for (&i, &on) in active.iter().zip(c) {
                    if !on {
                        substitute(&mut s, features[i].source, reference[i]);
                    }
                }
                s
            })
            .collect();
        let mut out = Vec::with_capacity(variants.len());
        for chunk in variants.chunks(PREDICT_CHUNK) {
            let refs: Vec<&Sample> = chunk.iter().collect();
            let probs = model.predict_batch(&refs, &vec![*mask; refs.len()])?;
            out.extend(probs.data().chunks(NUM_CLASSES).map(|row| row[target].to_f64_lossy()));
        }
        Ok(out)
    };
    let (values, kind) = match method {
        ShapleyMethod::Exact => (shapley_game_exact(active.len(), game)?, AttributionMethod::ExactShapley),
        ShapleyMethod::MonteCarlo { permutations, seed } => {
            (shapley_game_mc(active.len(), permutations, seed, game)?, AttributionMethod::McShapley)
        }
    };
    let mut phi = vec![0.0; features.len()];
    for (&i, &v) in active.iter().zip(&values.phi) {
        phi[i] = v;
    }
    Ok(Attribution {
        method: kind,
        target_class: target,
        features: features.into_iter().map(|f| f.name).collect(),
        phi,
        baseline_value: values.empty_value,
        sample_value: values.full_value,
        efficiency_residual: Some(values.efficiency_residual()),
    })
}

/// Name of the image token in gradient attributions.
pub const IMAGE_TOKEN: &str = "[IMG]";

/// Gradient of the target-class logit times each fused token, summed over the
/// embedding width. Tokens are the image query first, then the tabular tokens
/// (CLS included). Tokens of masked modalities score 0.
pub fn grad_attribution<T: Scalar>(model: &FusionModel<T>, sample: &Sample, mask: &ModalityMask, target: usize) -> Result<Attribution> {
    if target >= NUM_CLASSES {
        return Err(Error::Config(format!("target class {target} out of range")));
    }
    let batch = model.batch(&[sample], &[*mask])?;
    let tape = Tape::new();
    let p = model.params.bind(&tape);
    let out = model.forward(&p, &tape, &batch)?;
    let mut onehot = vec![T::zero(); NUM_CLASSES];
    onehot[target] = T::one();
    let selector = tape.leaf(Tensor::new(vec![1, NUM_CLASSES], onehot)?);
    let logit = out.logits.mul(&selector)?.sum();
    let sample_value = logit.value().item().to_f64_lossy();
    let grads = tape.backward(logit)?;

    let dot = |g: &[T], x: &[T]| g.iter().zip(x).map(|(&a, &b)| (a * b).to_f64_lossy()).sum::<f64>();
    let d = model.config.encoder.d;
    let img_grad = grads.get_or_zeros(out.image_token);
    let img = out.image_token.value();
    let mut phi = vec![if batch.image_present[0] { dot(img_grad.data(), img.data()) } else { 0.0 }];
    let tok_grad = grads.get_or_zeros(out.tabular_tokens);
    let toks = out.tabular_tokens.value();
    for (t, valid) in batch.tabular.valid.iter().enumerate() {
        let range = t * d..(t + 1) * d;
        phi.push(if *valid { dot(&tok_grad.data()[range.clone()], &toks.data()[range]) } else { 0.0 });
    }
    let score = |v: f64| {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Numeric(format!("gradient attribution produced {v}")))
        }
    };
    let phi = phi.into_iter().map(score).collect::<Result<Vec<_>>>()?;
    let mut features = vec![IMAGE_TOKEN.to_string()];
    features.extend(model.encoder.layout.names.iter().cloned());
    Ok(Attribution {
        method: AttributionMethod::GradInput,
        target_class: target,
        features,
        phi,
        baseline_value: 0.0,
        sample_value,
        efficiency_residual: None,
    })
}

/// Modality of each gradient-attribution token; `None` for CLS.
pub fn token_modalities<T: Scalar>(model: &FusionModel<T>) -> Vec<Option<ModalityKind>> {
    let mut out = vec![Some(ModalityKind::GmEmbedding)];
    out.extend(model.encoder.layout.tokens.iter().map(|t| t.modality()));
    out
}
