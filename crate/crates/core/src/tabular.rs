//! FT-Transformer over the tabular modalities: per-feature tokenizer, CLS token
//! and a stack of self-attention layers.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetSchema, ModalityKind, Sample, NUM_MODALITIES};
use crate::diff::{concat, Tensor, Var, LN_EPS};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Token width.
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    /// Adds the block input back after the FFN (`h + FFN(LN(h))`) instead of
    /// returning `FFN(LN(h))`.
    pub ffn_residual: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { d: 64, layers: 2, heads: 4, d_ff: 128, ffn_residual: false }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d_ff == 0 || self.layers == 0 {
            return Err(Error::Config("encoder dimensions, heads and layers must be positive".into()));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("{} heads do not divide token width {}", self.heads, self.d)));
        }
        Ok(())
    }
}

/// Where each token comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenSource {
    Cls,
    Numeric { modality: ModalityKind, feature: usize },
    Categorical { modality: ModalityKind, feature: usize },
}

impl TokenSource {
    pub fn modality(self) -> Option<ModalityKind> {
        match self {
            TokenSource::Cls => None,
            TokenSource::Numeric { modality, .. } | TokenSource::Categorical { modality, .. } => Some(modality),
        }
    }
}

/// Token order derived from a schema: CLS, every numeric feature of the
/// tabular modalities, then every categorical feature.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenLayout {
    pub tokens: Vec<TokenSource>,
    pub names: Vec<String>,
    pub cardinalities: Vec<usize>,
    num_numeric: usize,
}

impl TokenLayout {
    pub fn new(schema: &DatasetSchema) -> Self {
        let mut tokens = vec![TokenSource::Cls];
        let mut names = vec!["[CLS]".to_string()];
        for kind in ModalityKind::TABULAR {
            for (feature, n) in schema.modality(kind).numeric.iter().enumerate() {
                tokens.push(TokenSource::Numeric { modality: kind, feature });
                names.push(format!("{kind}:{n}"));
            }
        }
        let num_numeric = tokens.len() - 1;
        let mut cardinalities = Vec::new();
        for kind in ModalityKind::TABULAR {
            for (feature, c) in schema.modality(kind).categorical.iter().enumerate() {
                tokens.push(TokenSource::Categorical { modality: kind, feature });
                names.push(format!("{kind}:{}", c.name));
                cardinalities.push(c.cardinality);
            }
        }
        Self { tokens, names, cardinalities, num_numeric }
    }

    /// Sequence length including CLS.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 1
    }

    pub fn num_numeric(&self) -> usize {
        self.num_numeric
    }

    pub fn num_categorical(&self) -> usize {
        self.cardinalities.len()
    }

    /// Token indices grouped by modality, in [`ModalityKind::TABULAR`] order.
    pub fn modality_groups(&self) -> Vec<(ModalityKind, Vec<usize>)> {
        ModalityKind::TABULAR
            .iter()
            .map(|&k| (k, (0..self.len()).filter(|&i| self.tokens[i].modality() == Some(k)).collect()))
            .collect()
    }

    /// Builds tokenizer inputs for a batch. Features of modalities absent
    /// under `presence` are zeroed and flagged invalid.
    pub fn batch<T: Scalar>(&self, samples: &[&Sample], presence: &[[bool; NUM_MODALITIES]]) -> Result<TabularInput<T>> {
        if samples.len() != presence.len() {
            return Err(Error::Shape(format!("{} samples with {} presence masks", samples.len(), presence.len())));
        }
        let b = samples.len();
        let mut numeric = Vec::with_capacity(b * self.num_numeric);
        let mut categorical = vec![Vec::with_capacity(b); self.num_categorical()];
        let mut valid = Vec::with_capacity(b * self.len());
        for (s, p) in samples.iter().zip(presence) {
            let mut cat = 0;
            for &tok in &self.tokens {
                let on = match tok {
                    TokenSource::Cls => true,
                    TokenSource::Numeric { modality, feature } => {
                        let on = p[modality.index()] && s.is_present(modality);
                        let v = if on {
                            s.block(modality).numeric[feature].ok_or_else(|| {
                                Error::Schema(format!("{} has an unimputed value in {modality} feature {feature}", s.patient_id))
                            })?
                        } else {
                            0.0
                        };
                        numeric.push(T::c(v));
                        on
                    }
                    TokenSource::Categorical { modality, feature } => {
                        let on = p[modality.index()] && s.is_present(modality);
                        let code = if on {
                            let code = s.block(modality).categorical[feature].ok_or_else(|| {
                                Error::Schema(format!(
                                    "{} has an unimputed code in {modality} categorical {feature}",
                                    s.patient_id
                                ))
                            })?;
                            if code as usize >= self.cardinalities[cat] {
                                return Err(Error::Schema(format!(
                                    "categorical code {code} exceeds cardinality {} of `{}`",
                                    self.cardinalities[cat],
                                    self.names[1 + self.num_numeric + cat]
                                )));
                            }
                            code as usize
                        } else {
                            0
                        };
                        categorical[cat].push(code);
                        cat += 1;
                        on
                    }
                };
                valid.push(on);
            }
        }
        Ok(TabularInput {
            numeric: Tensor::new(vec![b, self.num_numeric], numeric)?,
            categorical,
            valid,
        })
    }
}

/// Tokenizer inputs for a batch of `B` samples.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularInput<T> {
    /// `[B, n_num]`.
    pub numeric: Tensor<T>,
    /// One code vector of length `B` per categorical feature.
    pub categorical: Vec<Vec<usize>>,
    /// Token validity, `B × sequence length`, CLS first.
    pub valid: Vec<bool>,
}

impl<T: Scalar> TabularInput<T> {
    pub fn batch_size(&self) -> usize {
        self.numeric.shape()[0]
    }
}

/// Per-feature linear tokens, categorical lookups and the CLS embedding.
#[derive(Clone, Debug)]
pub struct FeatureTokenizer {
    pub cls: ParamId,
    pub num_weight: Option<ParamId>,
    pub num_bias: Option<ParamId>,
    pub cat_tables: Vec<ParamId>,
    pub cat_bias: Vec<ParamId>,
    d: usize,
}

impl FeatureTokenizer {
    pub fn new<T: Scalar>(layout: &TokenLayout, d: usize, store: &mut ParamStore<T>, prefix: &str, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        let cls = store.add_uniform(format!("{prefix}.cls"), &[d], bound, rng);
        let (num_weight, num_bias) = if layout.num_numeric() > 0 {
            let n = layout.num_numeric();
            (
                Some(store.add_uniform(format!("{prefix}.num.weight"), &[n, d], bound, rng)),
                Some(store.add_uniform(format!("{prefix}.num.bias"), &[n, d], bound, rng)),
            )
        } else {
            (None, None)
        };
        let mut cat_tables = Vec::new();
        let mut cat_bias = Vec::new();
        for (j, &card) in layout.cardinalities.iter().enumerate() {
            cat_tables.push(store.add_uniform(format!("{prefix}.cat{j}.table"), &[card, d], bound, rng));
            cat_bias.push(store.add_uniform(format!("{prefix}.cat{j}.bias"), &[d], bound, rng));
        }
        Self { cls, num_weight, num_bias, cat_tables, cat_bias, d }
    }

    /// Token sequence `[B, 1 + n_num + n_cat, d]` with CLS at index 0.
    pub fn tokenize<'t, T: Scalar>(&self, p: &Bound<'t, T>, input: &TabularInput<T>) -> Result<Var<'t, T>> {
        let b = input.batch_size();
        let tape = p[self.cls].tape();
        let mut parts = vec![p[self.cls].reshape(&[1, self.d])?.expand(b)];
        if let (Some(w), Some(bias)) = (self.num_weight, self.num_bias) {
            let x = tape.leaf(input.numeric.clone());
            parts.push(x.feature_tokens(&p[w], &p[bias])?);
        }
        for ((table, bias), codes) in self.cat_tables.iter().zip(&self.cat_bias).zip(&input.categorical) {
            let rows = p[*table].embedding(codes)?.add_broadcast(&p[*bias])?;
            parts.push(rows.reshape(&[b, 1, self.d])?);
        }
        concat(&parts, 1)
    }
}

/// Multi-head attention projections.
#[derive(Clone, Debug)]
pub struct Attention {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub heads: usize,
    pub d: usize,
}

impl Attention {
    pub fn new<T: Scalar>(d: usize, heads: usize, store: &mut ParamStore<T>, prefix: &str, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        let mut lin = |n: &str| {
            (
                store.add_uniform(format!("{prefix}.{n}.weight"), &[d, d], bound, rng),
                store.add_zeros(format!("{prefix}.{n}.bias"), &[d]),
            )
        };
        let (wq, bq) = lin("q");
        let (wk, bk) = lin("k");
        let (wv, bv) = lin("v");
        let (wo, bo) = lin("out");
        Self { wq, bq, wk, bk, wv, bv, wo, bo, heads, d }
    }

    fn split_heads<'t, T: Scalar>(&self, x: Var<'t, T>, b: usize, n: usize) -> Result<Var<'t, T>> {
        let dh = self.d / self.heads;
        x.reshape(&[b, n, self.heads, dh])?.permute_0213()?.reshape(&[b * self.heads, n, dh])
    }

    /// Attention of `query [B, nq, d]` over `kv [B, nk, d]`; `key_valid` has length `B·nk`.
    ///
    /// With `allow_all_masked`, a batch row without valid keys gets a zero
    /// attention output.
    pub fn forward<'t, T: Scalar>(
        &self,
        p: &Bound<'t, T>,
        query: &Var<'t, T>,
        kv: &Var<'t, T>,
        key_valid: &[bool],
        allow_all_masked: bool,
    ) -> Result<Var<'t, T>> {
        let (qs, ks) = (query.shape(), kv.shape());
        if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != self.d || ks[2] != self.d {
            return Err(Error::Shape(format!("attention: query {:?}, keys {:?}, width {}", qs, ks, self.d)));
        }
        let (b, nq, nk) = (qs[0], qs[1], ks[1]);
        if key_valid.len() != b * nk {
            return Err(Error::Shape(format!("attention: {} key flags for {b}x{nk} keys", key_valid.len())));
        }
        let q = self.split_heads(query.linear(&p[self.wq], Some(&p[self.bq]))?, b, nq)?;
        let k = self.split_heads(kv.linear(&p[self.wk], Some(&p[self.bk]))?, b, nk)?;
        let v = self.split_heads(kv.linear(&p[self.wv], Some(&p[self.bv]))?, b, nk)?;
        let dh = self.d / self.heads;
        let scores = q.bmm(&k, true)?.scale(T::c(1.0 / (dh as f64).sqrt()));
        let attn = scores.softmax_masked(key_valid, allow_all_masked)?;
        let ctx = attn
            .bmm(&v, false)?
            .reshape(&[b, self.heads, nq, dh])?
            .permute_0213()?
            .reshape(&[b, nq, self.d])?;
        ctx.linear(&p[self.wo], Some(&p[self.bo]))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn new<T: Scalar>(d: usize, store: &mut ParamStore<T>, prefix: &str) -> Self {
        Self { gain: store.add_ones(format!("{prefix}.gain"), &[d]), bias: store.add_zeros(format!("{prefix}.bias"), &[d]) }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm(&p[self.gain], &p[self.bias], T::c(LN_EPS))
    }
}

/// Two-layer perceptron with a GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Mlp {
    pub fn new<T: Scalar>(
        d_in: usize,
        hidden: usize,
        d_out: usize,
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            w1: store.add_uniform(format!("{prefix}.fc1.weight"), &[d_in, hidden], 1.0 / (d_in as f64).sqrt(), rng),
            b1: store.add_zeros(format!("{prefix}.fc1.bias"), &[hidden]),
            w2: store.add_uniform(format!("{prefix}.fc2.weight"), &[hidden, d_out], 1.0 / (hidden as f64).sqrt(), rng),
            b2: store.add_zeros(format!("{prefix}.fc2.bias"), &[d_out]),
        }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        x.linear(&p[self.w1], Some(&p[self.b1]))?.gelu().linear(&p[self.w2], Some(&p[self.b2]))
    }
}

/// `FFN(LN(T + MHSA(LN(T))))`; the first layer feeds `T` to attention directly.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub ln_attn: Option<LayerNormParams>,
    pub attention: Attention,
    pub ln_ffn: LayerNormParams,
    pub ffn: Mlp,
    pub ffn_residual: bool,
}

impl TransformerLayer {
    pub fn new<T: Scalar>(
        config: &EncoderConfig,
        first: bool,
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let ln_attn = (!first).then(|| LayerNormParams::new(config.d, store, &format!("{prefix}.ln_attn")));
        let attention = Attention::new(config.d, config.heads, store, &format!("{prefix}.attn"), rng);
        let ln_ffn = LayerNormParams::new(config.d, store, &format!("{prefix}.ln_ffn"));
        let ffn = Mlp::new(config.d, config.d_ff, config.d, store, &format!("{prefix}.ffn"), rng);
        Self { ln_attn, attention, ln_ffn, ffn, ffn_residual: config.ffn_residual }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: &Var<'t, T>, valid: &[bool]) -> Result<Var<'t, T>> {
        let normed = match &self.ln_attn {
            Some(ln) => ln.forward(p, x)?,
            None => *x,
        };
        let h = x.add(&self.attention.forward(p, &normed, &normed, valid, false)?)?;
        let f = self.ffn.forward(p, &self.ln_ffn.forward(p, &h)?)?;
        if self.ffn_residual {
            h.add(&f)
        } else {
            Ok(f)
        }
    }
}

/// Tokenizer plus transformer stack.
#[derive(Clone, Debug)]
pub struct FtTransformer {
    pub config: EncoderConfig,
    pub layout: TokenLayout,
    pub tokenizer: FeatureTokenizer,
    pub layers: Vec<TransformerLayer>,
}

impl FtTransformer {
    pub fn new<T: Scalar>(
        config: &EncoderConfig,
        schema: &DatasetSchema,
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let layout = TokenLayout::new(schema);
        let tokenizer = FeatureTokenizer::new(&layout, config.d, store, &format!("{prefix}.tok"), rng);
        let layers = (0..config.layers)
            .map(|l| TransformerLayer::new(config, l == 0, store, &format!("{prefix}.layer{l}"), rng))
            .collect();
        Ok(Self { config: config.clone(), layout, tokenizer, layers })
    }

    /// Runs the stack over already tokenized input, returning every token `[B, n, d]`.
    pub fn encode_tokens<'t, T: Scalar>(&self, p: &Bound<'t, T>, tokens: &Var<'t, T>, valid: &[bool]) -> Result<Var<'t, T>> {
        let mut x = *tokens;
        for layer in &self.layers {
            x = layer.forward(p, &x, valid)?;
        }
        Ok(x)
    }

    /// Tokenizes and encodes; returns (input tokens, output tokens).
    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, input: &TabularInput<T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let tokens = self.tokenizer.tokenize(p, input)?;
        let out = self.encode_tokens(p, &tokens, &input.valid)?;
        Ok((tokens, out))
    }

    /// Final CLS representation `[B, d]`.
    pub fn encode<'t, T: Scalar>(&self, p: &Bound<'t, T>, input: &TabularInput<T>) -> Result<Var<'t, T>> {
        self.forward(p, input)?.1.select_axis1(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::testutil::{sample, schema};
    use crate::data::{CategoricalSpec, Label, ModalityBlock};
    use crate::diff::Tape;
    use rand::SeedableRng;

    fn small_schema() -> DatasetSchema {
        let mut sc = schema(2, 3);
        sc.meta.numeric = vec!["mmse".into()];
        sc.meta.categorical = vec![CategoricalSpec { name: "apoe".into(), cardinality: 3 }];
        sc
    }

    fn full_sample(sc: &DatasetSchema, seed: f64) -> Sample {
        let mut s = sample(sc, "p", "v", Some(Label::Mci), vec![Some(seed), Some(-seed)]);
        *s.block_mut(ModalityKind::Genes) =
            ModalityBlock::present(ModalityKind::Genes, vec![Some(0.5 * seed), Some(1.0), Some(-2.0)], vec![]);
        *s.block_mut(ModalityKind::Meta) = ModalityBlock::present(ModalityKind::Meta, vec![Some(seed)], vec![Some(2)]);
        s
    }

    fn model(config: &EncoderConfig, sc: &DatasetSchema) -> (FtTransformer, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = FtTransformer::new(config, sc, &mut store, "enc", &mut rng).unwrap();
        (enc, store)
    }

    fn cfg() -> EncoderConfig {
        EncoderConfig { d: 8, layers: 2, heads: 2, d_ff: 16, ffn_residual: false }
    }

    #[test]
    fn layout_has_cls_first_and_one_token_per_feature() {
        let sc = small_schema();
        let layout = TokenLayout::new(&sc);
        assert_eq!(layout.len(), 1 + 2 + 3 + 1 + 1);
        assert_eq!(layout.tokens[0], TokenSource::Cls);
        assert_eq!(layout.names[7], "meta:apoe");
    }

    #[test]
    fn zero_numeric_input_gives_bias_token() {
        let sc = small_schema();
        let (enc, store) = model(&cfg(), &sc);
        let s = sample(&sc, "p", "v", None, vec![Some(0.0), Some(1.0)]);
        let input = enc.layout.batch::<f64>(&[&s], &[[true; 4]]).unwrap();
        let tape = Tape::inference();
        let p = store.bind(&tape);
        let tokens = enc.tokenizer.tokenize(&p, &input).unwrap().value();
        let bias = store.get(enc.tokenizer.num_bias.unwrap());
        assert_eq!(&tokens.data()[8..16], &bias.data()[..8]);
    }

    #[test]
    fn categorical_token_is_table_row_plus_bias() {
        let sc = small_schema();
        let (enc, store) = model(&cfg(), &sc);
        let s = full_sample(&sc, 1.0);
        let input = enc.layout.batch::<f64>(&[&s], &[[true; 4]]).unwrap();
        let tape = Tape::inference();
        let tokens = enc.tokenizer.tokenize(&store.bind(&tape), &input).unwrap().value();
        let table = store.get(enc.tokenizer.cat_tables[0]);
        let bias = store.get(enc.tokenizer.cat_bias[0]);
        for k in 0..8 {
            assert_eq!(tokens.data()[7 * 8 + k], table.data()[2 * 8 + k] + bias.data()[k]);
        }
    }

    #[test]
    fn out_of_range_code_is_a_schema_error() {
        let sc = small_schema();
        let layout = TokenLayout::new(&sc);
        let mut s = full_sample(&sc, 1.0);
        s.block_mut(ModalityKind::Meta).categorical[0] = Some(3);
        assert!(matches!(layout.batch::<f64>(&[&s], &[[true; 4]]), Err(Error::Schema(_))));
    }

    #[test]
    fn absent_modality_tokens_are_invalid() {
        let sc = small_schema();
        let layout = TokenLayout::new(&sc);
        let s = full_sample(&sc, 1.0);
        let input = layout.batch::<f64>(&[&s], &[[true, true, false, true]]).unwrap();
        assert_eq!(input.valid, vec![true, true, true, false, false, false, true, true]);
    }

    #[test]
    fn masked_values_do_not_reach_cls() {
        let sc = small_schema();
        let (enc, store) = model(&cfg(), &sc);
        let mask = [[true, true, false, false]];
        let run = |s: &Sample| {
            let input = enc.layout.batch::<f64>(&[s], &mask).unwrap();
            let tape = Tape::inference();
            enc.encode(&store.bind(&tape), &input).unwrap().value().data().to_vec()
        };
        let a = full_sample(&sc, 1.0);
        let mut b = a.clone();
        b.block_mut(ModalityKind::Genes).numeric = vec![Some(1e6), Some(-3.0), Some(f64::NAN)];
        b.block_mut(ModalityKind::Meta).categorical = vec![Some(0)];
        assert_eq!(run(&a), run(&b));
    }

    #[test]
    fn cls_only_output_ignores_features() {
        let sc = small_schema();
        let (enc, store) = model(&cfg(), &sc);
        let tape = Tape::inference();
        let p = store.bind(&tape);
        let mut input = enc.layout.batch::<f64>(&[&full_sample(&sc, 1.0), &full_sample(&sc, -4.0)], &[[true; 4]; 2]).unwrap();
        for (i, v) in input.valid.iter_mut().enumerate() {
            *v = i % enc.layout.len() == 0;
        }
        let out = enc.encode(&p, &input).unwrap().value();
        assert_eq!(out.data()[..8], out.data()[8..]);
    }

    #[test]
    fn cls_is_invariant_to_token_permutation() {
        let sc = small_schema();
        let (enc, store) = model(&EncoderConfig { ffn_residual: true, ..cfg() }, &sc);
        let tape = Tape::inference();
        let p = store.bind(&tape);
        let input = enc.layout.batch::<f64>(&[&full_sample(&sc, 0.7)], &[[true, true, false, true]]).unwrap();
        let tokens = enc.tokenizer.tokenize(&p, &input).unwrap();
        let n = enc.layout.len();
        let perm: Vec<usize> = std::iter::once(0).chain((1..n).rev()).collect();
        let tv = tokens.value();
        let mut permuted = Vec::new();
        for &i in &perm {
            permuted.extend_from_slice(&tv.data()[i * 8..(i + 1) * 8]);
        }
        let valid_p: Vec<bool> = perm.iter().map(|&i| input.valid[i]).collect();
        let x = tape.leaf(Tensor::new(vec![1, n, 8], permuted).unwrap());
        let a = enc.encode_tokens(&p, &tokens, &input.valid).unwrap().select_axis1(0).unwrap().value();
        let b = enc.encode_tokens(&p, &x, &valid_p).unwrap().select_axis1(0).unwrap().value();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-10);
        }
    }

    #[test]
    fn heads_must_divide_width() {
        assert!(EncoderConfig { d: 10, heads: 4, ..cfg() }.validate().is_err());
    }
}
