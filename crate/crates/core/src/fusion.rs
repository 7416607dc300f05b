//! Cross-attention fusion of the image embedding with the tabular tokens,
//! modality masks, modality dropout and the classification head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetSchema, ModalityKind, Sample, NUM_CLASSES, NUM_MODALITIES};
use crate::diff::{concat, softmax_masked_values, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::image::{EmbeddingProvider, ImageConfig};
use crate::params::{Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tabular::{Attention, EncoderConfig, FtTransformer, LayerNormParams, Mlp, TabularInput};

/// Which modalities a forward pass may use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModalityMask {
    pub present: [bool; NUM_MODALITIES],
}

impl Default for ModalityMask {
    fn default() -> Self {
        Self::all()
    }
}

impl ModalityMask {
    pub fn all() -> Self {
        Self { present: [true; NUM_MODALITIES] }
    }

    pub fn only(kinds: &[ModalityKind]) -> Self {
        let mut present = [false; NUM_MODALITIES];
        for k in kinds {
            present[k.index()] = true;
        }
        Self { present }
    }

    pub fn without(mut self, kinds: &[ModalityKind]) -> Self {
        for k in kinds {
            self.present[k.index()] = false;
        }
        self
    }

    pub fn of_sample(sample: &Sample) -> Self {
        Self { present: sample.presence() }
    }

    pub fn is_present(&self, kind: ModalityKind) -> bool {
        self.present[kind.index()]
    }

    /// Intersection with what the sample actually carries.
    pub fn effective(&self, sample: &Sample) -> Self {
        let mut present = self.present;
        for k in ModalityKind::ALL {
            present[k.index()] &= sample.is_present(k);
        }
        Self { present }
    }

    pub fn has_imaging(&self) -> bool {
        self.is_present(ModalityKind::Radiomics) || self.is_present(ModalityKind::GmEmbedding)
    }
}

/// Per-modality drop probabilities used during training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DropoutPolicy {
    pub radiomics: f64,
    pub gm: f64,
    pub genes: f64,
    pub meta: f64,
}

impl Default for DropoutPolicy {
    fn default() -> Self {
        Self { radiomics: 0.0, gm: 0.0, genes: 0.3, meta: 0.3 }
    }
}

impl DropoutPolicy {
    pub fn new(radiomics: f64, gm: f64, genes: f64, meta: f64) -> Result<Self> {
        let p = Self { radiomics, gm, genes, meta };
        p.validate()?;
        Ok(p)
    }

    pub fn none() -> Self {
        Self { radiomics: 0.0, gm: 0.0, genes: 0.0, meta: 0.0 }
    }

    pub fn probability(&self, kind: ModalityKind) -> f64 {
        match kind {
            ModalityKind::Radiomics => self.radiomics,
            ModalityKind::GmEmbedding => self.gm,
            ModalityKind::Genes => self.genes,
            ModalityKind::Meta => self.meta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for k in ModalityKind::ALL {
            let p = self.probability(k);
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("drop probability for {k} must lie in [0, 1], got {p}")));
            }
        }
        if self.radiomics > 0.0 && self.gm > 0.0 {
            return Err(Error::Config("at most one imaging stream may be dropped; imaging must always survive".into()));
        }
        Ok(())
    }

    pub fn is_inactive(&self) -> bool {
        ModalityKind::ALL.iter().all(|&k| self.probability(k) == 0.0)
    }
}

/// Drops each present modality with its policy probability. One uniform
/// draw is consumed per modality regardless of presence. An imaging stream
/// is exempt when the other imaging stream is absent.
pub fn apply_dropout<R: Rng + ?Sized>(mask: ModalityMask, policy: &DropoutPolicy, rng: &mut R) -> ModalityMask {
    let mut out = mask;
    for k in ModalityKind::ALL {
        let u: f64 = rng.random();
        if !out.is_present(k) || u >= policy.probability(k) {
            continue;
        }
        let other = match k {
            ModalityKind::Radiomics => Some(ModalityKind::GmEmbedding),
            ModalityKind::GmEmbedding => Some(ModalityKind::Radiomics),
            _ => None,
        };
        if other.is_some_and(|o| !out.is_present(o)) {
            continue;
        }
        out.present[k.index()] = false;
    }
    out
}

/// Granularity of the key/value set attended by the image query.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KvMode {
    PerFeature,
    PooledPerModality,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub heads: usize,
    /// Adds the reverse direction (CLS attending to the image token) and
    /// concatenates both outputs.
    pub symmetric: bool,
    pub kv: KvMode,
    pub classifier_hidden: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { heads: 4, symmetric: false, kv: KvMode::PerFeature, classifier_hidden: 64 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub image: ImageConfig,
    pub fusion: FusionConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let f = &self.fusion;
        if f.heads == 0 || !self.encoder.d.is_multiple_of(f.heads) || f.classifier_hidden == 0 {
            return Err(Error::Config(format!(
                "fusion heads {} must divide token width {} and the classifier needs a hidden layer",
                f.heads, self.encoder.d
            )));
        }
        Ok(())
    }
}

/// Inputs of one forward pass.
#[derive(Clone, Debug)]
pub struct FusionBatch<T> {
    pub tabular: TabularInput<T>,
    pub image: Tensor<T>,
    pub image_present: Vec<bool>,
}

impl<T: Scalar> FusionBatch<T> {
    pub fn len(&self) -> usize {
        self.image_present.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image_present.is_empty()
    }
}

/// Intermediate values exposed for attribution.
pub struct FusionOutputs<'t, T> {
    /// `[B, 3]`.
    pub logits: Var<'t, T>,
    /// Tokenizer output `[B, n, d]`, CLS first.
    pub tabular_tokens: Var<'t, T>,
    /// Image query after projection (or the null-image token) `[B, d]`.
    pub image_token: Var<'t, T>,
}

/// Per-token multipliers for [`FusionModel::forward_scaled`]: `B·n` tabular factors and `B` image factors.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenScales<T> {
    pub tabular: Vec<T>,
    pub image: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct FusionModel<T> {
    pub config: ModelConfig,
    pub schema: DatasetSchema,
    pub params: ParamStore<T>,
    pub encoder: FtTransformer,
    pub image: EmbeddingProvider,
    pub projection: Option<(ParamId, ParamId)>,
    pub null_image: ParamId,
    pub cross: Attention,
    pub ln_cross: LayerNormParams,
    pub reverse: Option<(Attention, LayerNormParams)>,
    pub classifier: Mlp,
}

impl<T: Scalar> FusionModel<T> {
    pub fn new(config: &ModelConfig, schema: &DatasetSchema, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.encoder.d;
        let encoder = FtTransformer::new(&config.encoder, schema, &mut params, "encoder", &mut rng)?;
        let image = EmbeddingProvider::new(&config.image, schema, &mut params, "image", &mut rng)?;
        let projection = (image.d_img != d).then(|| {
            let bound = 1.0 / (image.d_img.max(1) as f64).sqrt();
            (
                params.add_uniform("fusion.proj.weight", &[image.d_img, d], bound, &mut rng),
                params.add_zeros("fusion.proj.bias", &[d]),
            )
        });
        let null_image = params.add_uniform("fusion.null_image", &[d], 1.0 / (d as f64).sqrt(), &mut rng);
        let cross = Attention::new(d, config.fusion.heads, &mut params, "fusion.cross", &mut rng);
        let ln_cross = LayerNormParams::new(d, &mut params, "fusion.ln_cross");
        let reverse = config.fusion.symmetric.then(|| {
            (
                Attention::new(d, config.fusion.heads, &mut params, "fusion.reverse", &mut rng),
                LayerNormParams::new(d, &mut params, "fusion.ln_reverse"),
            )
        });
        let head_in = if config.fusion.symmetric { 2 * d } else { d };
        let classifier = Mlp::new(head_in, config.fusion.classifier_hidden, NUM_CLASSES, &mut params, "head", &mut rng);
        Ok(Self {
            config: config.clone(),
            schema: schema.clone(),
            params,
            encoder,
            image,
            projection,
            null_image,
            cross,
            ln_cross,
            reverse,
            classifier,
        })
    }

    /// Rebuilds the architecture and loads parameters from a checkpoint store.
    pub fn with_params(config: &ModelConfig, schema: &DatasetSchema, params: &ParamStore<T>) -> Result<Self> {
        let mut model = Self::new(config, schema, 0)?;
        model.params.load_from(params)?;
        Ok(model)
    }

    /// Builds a batch; each sample uses the intersection of its mask and its own presence.
    pub fn batch(&self, samples: &[&Sample], masks: &[ModalityMask]) -> Result<FusionBatch<T>> {
        if samples.len() != masks.len() {
            return Err(Error::Shape(format!("{} samples with {} masks", samples.len(), masks.len())));
        }
        let effective: Vec<ModalityMask> = samples.iter().zip(masks).map(|(s, m)| m.effective(s)).collect();
        if let Some((s, _)) = samples.iter().zip(&effective).find(|(_, m)| !m.has_imaging()) {
            return Err(Error::Schema(format!(
                "{} / {} has no imaging modality under the requested mask",
                s.patient_id, s.visit_id
            )));
        }
        let presence: Vec<[bool; NUM_MODALITIES]> = effective.iter().map(|m| m.present).collect();
        let image_present: Vec<bool> = effective.iter().map(|m| m.is_present(ModalityKind::GmEmbedding)).collect();
        Ok(FusionBatch {
            tabular: self.encoder.layout.batch(samples, &presence)?,
            image: self.image.batch(samples, &image_present)?,
            image_present,
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'t, T>, tape: &'t Tape<T>, batch: &FusionBatch<T>) -> Result<FusionOutputs<'t, T>> {
        self.forward_scaled(p, tape, batch, None)
    }

    /// Forward pass with each fused token multiplied by a constant factor.
    pub fn forward_scaled<'t>(
        &self,
        p: &Bound<'t, T>,
        tape: &'t Tape<T>,
        batch: &FusionBatch<T>,
        scales: Option<&TokenScales<T>>,
    ) -> Result<FusionOutputs<'t, T>> {
        let b = batch.len();
        let d = self.config.encoder.d;
        let n = self.encoder.layout.len();
        let mut tabular_tokens = self.encoder.tokenizer.tokenize(p, &batch.tabular)?;
        if let Some(s) = scales {
            tabular_tokens = tabular_tokens.reshape(&[b * n, d])?.mul_rows(&s.tabular)?.reshape(&[b, n, d])?;
        }
        let encoded = self.encoder.encode_tokens(p, &tabular_tokens, &batch.tabular.valid)?;
        let mut img = self.image.embed(p, tape, &batch.image)?;
        if let Some((w, bias)) = self.projection {
            img = img.linear(&p[w], Some(&p[bias]))?;
        }
        let mut image_token = img.where_rows(&p[self.null_image], &batch.image_present)?;
        if let Some(s) = scales {
            image_token = image_token.mul_rows(&s.image)?;
        }

        let (kv, kv_valid) = match self.config.fusion.kv {
            KvMode::PerFeature => (encoded, batch.tabular.valid.clone()),
            KvMode::PooledPerModality => {
                let mut groups = vec![vec![0]];
                groups.extend(self.encoder.layout.modality_groups().into_iter().map(|(_, g)| g));
                encoded.pool_groups(&groups, &batch.tabular.valid)?
            }
        };
        let nk = kv.shape()[1];
        let any_valid: Vec<T> =
            kv_valid.chunks(nk).map(|row| if row.iter().any(|&v| v) { T::one() } else { T::zero() }).collect();
        let query = image_token.reshape(&[b, 1, d])?;
        let attended = self.cross.forward(p, &query, &kv, &kv_valid, true)?.reshape(&[b, d])?.mul_rows(&any_valid)?;
        let mut fused = self.ln_cross.forward(p, &image_token.add(&attended)?)?;

        if let Some((attn, ln)) = &self.reverse {
            let cls = encoded.select_axis1(0)?;
            let back = attn.forward(p, &cls.reshape(&[b, 1, d])?, &query, &vec![true; b], false)?.reshape(&[b, d])?;
            let cls_fused = ln.forward(p, &cls.add(&back)?)?;
            fused = concat(&[fused, cls_fused], 1)?;
        }
        let logits = self.classifier.forward(p, &fused)?;
        Ok(FusionOutputs { logits, tabular_tokens, image_token })
    }

    /// Logits `[B, 3]` on an inference tape.
    pub fn logits(&self, batch: &FusionBatch<T>) -> Result<Tensor<T>> {
        let tape = Tape::inference();
        let p = self.params.bind(&tape);
        let out = self.forward(&p, &tape, batch)?;
        let value = out.logits.value();
        Ok((*value).clone())
    }

    /// Class probabilities `[B, 3]` in (CTL, MCI, AD) order.
    pub fn predict_batch(&self, samples: &[&Sample], masks: &[ModalityMask]) -> Result<Tensor<T>> {
        let batch = self.batch(samples, masks)?;
        let logits = self.logits(&batch)?;
        logits.ensure_finite("logits")?;
        softmax_masked_values(&logits, &[true; NUM_CLASSES], false)
    }

    pub fn predict(&self, sample: &Sample, mask: &ModalityMask) -> Result<[T; NUM_CLASSES]> {
        let probs = self.predict_batch(&[sample], &[*mask])?;
        let d = probs.data();
        Ok([d[0], d[1], d[2]])
    }

    /// Ties the checkpoint to the schema and architecture.
    pub fn schema_hash(&self) -> u64 {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(&(&self.schema, &self.config)).expect("schema and config serialize");
        let h = Sha256::digest(&json);
        u64::from_le_bytes(h[0..8].try_into().expect("8 bytes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::testutil::{sample, schema};
    use crate::data::{Label, ModalityBlock};

    fn toy_config() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig { d: 8, layers: 1, heads: 2, d_ff: 16, ffn_residual: false },
            fusion: FusionConfig { heads: 2, classifier_hidden: 6, ..Default::default() },
            ..Default::default()
        }
    }

    fn full(sc: &DatasetSchema, x: f64) -> Sample {
        let mut s = sample(sc, "p", "v", Some(Label::Ad), vec![Some(x), Some(2.0 * x)]);
        *s.block_mut(ModalityKind::GmEmbedding) =
            ModalityBlock::present(ModalityKind::GmEmbedding, vec![Some(x), Some(-x)], vec![]);
        *s.block_mut(ModalityKind::Genes) = ModalityBlock::present(ModalityKind::Genes, vec![Some(0.3), Some(x)], vec![]);
        *s.block_mut(ModalityKind::Meta) = ModalityBlock::present(ModalityKind::Meta, vec![Some(-x)], vec![Some(1)]);
        s
    }

    #[test]
    fn probabilities_sum_to_one() {
        let sc = schema(2, 2);
        for seed in 0..5 {
            let m = FusionModel::<f64>::new(&toy_config(), &sc, seed).unwrap();
            let p = m.predict(&full(&sc, seed as f64 - 2.0), &ModalityMask::all()).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_modalities_have_no_influence() {
        let sc = schema(2, 2);
        let m = FusionModel::<f64>::new(&toy_config(), &sc, 1).unwrap();
        let mask = ModalityMask::all().without(&[ModalityKind::Genes, ModalityKind::Meta]);
        let a = full(&sc, 0.5);
        let mut b = a.clone();
        b.block_mut(ModalityKind::Genes).numeric = vec![Some(1e9), Some(f64::NAN)];
        b.block_mut(ModalityKind::Meta).numeric = vec![Some(-7.0)];
        b.block_mut(ModalityKind::Meta).categorical = vec![Some(2)];
        assert_eq!(m.predict(&a, &mask).unwrap(), m.predict(&b, &mask).unwrap());
    }

    #[test]
    fn absent_image_uses_null_token() {
        let sc = schema(2, 2);
        let m = FusionModel::<f64>::new(&toy_config(), &sc, 2).unwrap();
        let mask = ModalityMask::all().without(&[ModalityKind::GmEmbedding]);
        let a = full(&sc, 0.5);
        let mut b = a.clone();
        b.block_mut(ModalityKind::GmEmbedding).numeric = vec![Some(3.0), Some(4.0)];
        assert_eq!(m.predict(&a, &mask).unwrap(), m.predict(&b, &mask).unwrap());
        assert_ne!(m.predict(&a, &ModalityMask::all()).unwrap(), m.predict(&b, &ModalityMask::all()).unwrap());
    }

    #[test]
    fn no_imaging_is_rejected() {
        let sc = schema(2, 2);
        let m = FusionModel::<f64>::new(&toy_config(), &sc, 2).unwrap();
        let mask = ModalityMask::only(&[ModalityKind::Genes]);
        assert!(matches!(m.predict(&full(&sc, 1.0), &mask), Err(Error::Schema(_))));
    }

    #[test]
    fn variants_run() {
        let sc = schema(2, 2);
        for (symmetric, kv) in [(true, KvMode::PerFeature), (false, KvMode::PooledPerModality), (true, KvMode::PooledPerModality)] {
            let mut cfg = toy_config();
            cfg.fusion.symmetric = symmetric;
            cfg.fusion.kv = kv;
            let m = FusionModel::<f64>::new(&cfg, &sc, 4).unwrap();
            let p = m.predict(&full(&sc, 1.0), &ModalityMask::all().without(&[ModalityKind::Meta])).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let none = DropoutPolicy::none();
        let always = DropoutPolicy::new(0.0, 0.0, 1.0, 1.0).unwrap();
        for _ in 0..100 {
            assert_eq!(apply_dropout(ModalityMask::all(), &none, &mut rng), ModalityMask::all());
            let m = apply_dropout(ModalityMask::all(), &always, &mut rng);
            assert_eq!(m, ModalityMask::only(&[ModalityKind::Radiomics, ModalityKind::GmEmbedding]));
        }
    }

    #[test]
    fn dropout_rate_matches_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let policy = DropoutPolicy::new(0.0, 0.0, 0.5, 0.0).unwrap();
        let n = 10_000;
        let dropped = (0..n)
            .filter(|_| !apply_dropout(ModalityMask::all(), &policy, &mut rng).is_present(ModalityKind::Genes))
            .count();
        assert!((dropped as f64 / n as f64 - 0.5).abs() < 0.02);
    }

    #[test]
    fn imaging_always_survives() {
        assert!(DropoutPolicy::new(0.5, 0.5, 0.0, 0.0).is_err());
        assert!(DropoutPolicy::new(0.0, 0.0, 1.5, 0.0).is_err());
        let policy = DropoutPolicy::new(1.0, 0.0, 1.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rad_only = ModalityMask::only(&[ModalityKind::Radiomics, ModalityKind::Genes]);
        assert!(apply_dropout(rad_only, &policy, &mut rng).has_imaging());
        assert_eq!(apply_dropout(ModalityMask::all(), &policy, &mut rng), ModalityMask::only(&[ModalityKind::GmEmbedding]));
    }
}
