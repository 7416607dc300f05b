#![allow(dead_code)]

use std::sync::Arc;

use omnifuse::data::{
    synth_generate, Dataset, GmVolumeConfig, ImputationModel, ImputeMode, ModalityKind, Sample, SynthConfig, NUM_CLASSES,
};
use omnifuse::diff::{concat, relative_error, Tape, Tensor, Var};
use omnifuse::fusion::{FusionConfig, FusionModel, KvMode, ModalityMask, ModelConfig};
use omnifuse::image::{ImageConfig, ImageMode};
use omnifuse::radiomics::GrayGrid;
use omnifuse::tabular::EncoderConfig;
use omnifuse::volume::Volume3D;
use omnifuse::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

// ----- differentiable op catalogue ------------------------------------------

pub type OpFn = for<'t> fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>>;

pub struct OpCase {
    pub name: &'static str,
    pub shapes: &'static [&'static [usize]],
    pub f: OpFn,
}

impl OpCase {
    pub fn inputs(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
        self.shapes.iter().map(|s| uniform(rng, s)).collect()
    }
}

pub fn op_catalogue() -> Vec<OpCase> {
    vec![
        OpCase { name: "add", shapes: &[&[3, 4], &[3, 4]], f: |x| x[0].add(&x[1]) },
        OpCase { name: "sub", shapes: &[&[3, 4], &[3, 4]], f: |x| x[0].sub(&x[1]) },
        OpCase { name: "mul", shapes: &[&[3, 4], &[3, 4]], f: |x| x[0].mul(&x[1]) },
        OpCase { name: "add_broadcast", shapes: &[&[2, 3, 4], &[4]], f: |x| x[0].add_broadcast(&x[1]) },
        OpCase { name: "scale", shapes: &[&[3, 4]], f: |x| Ok(x[0].scale(-0.7)) },
        OpCase { name: "mul_rows", shapes: &[&[3, 4]], f: |x| x[0].mul_rows(&[0.5, -1.25, 2.0]) },
        OpCase { name: "matmul", shapes: &[&[3, 4], &[4, 5]], f: |x| x[0].matmul(&x[1]) },
        OpCase { name: "bmm", shapes: &[&[2, 3, 4], &[2, 4, 5]], f: |x| x[0].bmm(&x[1], false) },
        OpCase { name: "bmm_transposed", shapes: &[&[2, 3, 4], &[2, 5, 4]], f: |x| x[0].bmm(&x[1], true) },
        OpCase { name: "linear", shapes: &[&[3, 4], &[4, 5], &[5]], f: |x| x[0].linear(&x[1], Some(&x[2])) },
        OpCase { name: "linear_no_bias", shapes: &[&[2, 3, 4], &[4, 2]], f: |x| x[0].linear(&x[1], None) },
        OpCase {
            name: "reshape_permute",
            shapes: &[&[2, 3, 4], &[2, 2, 3, 2]],
            f: |x| x[0].reshape(&[2, 3, 2, 2])?.permute_0213()?.mul(&x[1]),
        },
        OpCase { name: "select_axis1", shapes: &[&[2, 3, 4]], f: |x| x[0].select_axis1(1) },
        OpCase { name: "expand", shapes: &[&[4], &[3, 4]], f: |x| x[0].expand(3).mul(&x[1]) },
        OpCase {
            name: "where_rows",
            shapes: &[&[3, 4], &[4]],
            f: |x| x[0].where_rows(&x[1], &[true, false, false]),
        },
        OpCase {
            name: "softmax_masked",
            shapes: &[&[2, 3, 5]],
            f: |x| x[0].softmax_masked(&[true, false, true, true, false, false, true, true, true, true], false),
        },
        OpCase {
            name: "softmax_all_masked_row",
            shapes: &[&[2, 3, 5]],
            f: |x| x[0].softmax_masked(&[false, false, false, false, false, true, false, true, true, false], true),
        },
        OpCase { name: "softmax", shapes: &[&[3, 4]], f: |x| x[0].softmax() },
        OpCase { name: "layer_norm", shapes: &[&[3, 6], &[6], &[6]], f: |x| x[0].layer_norm(&x[1], &x[2], 1e-5) },
        OpCase { name: "gelu", shapes: &[&[3, 4]], f: |x| Ok(x[0].scale(3.0).gelu()) },
        OpCase { name: "sum", shapes: &[&[3, 4], &[3, 4]], f: |x| Ok(x[0].mul(&x[1])?.sum()) },
        OpCase { name: "mean", shapes: &[&[3, 4], &[3, 4]], f: |x| Ok(x[0].mul(&x[1])?.mean()) },
        OpCase {
            name: "feature_tokens",
            shapes: &[&[3, 4], &[4, 5], &[4, 5]],
            f: |x| x[0].feature_tokens(&x[1], &x[2]),
        },
        OpCase { name: "embedding", shapes: &[&[5, 3]], f: |x| x[0].embedding(&[0, 2, 2, 4, 0]) },
        OpCase {
            name: "pool_groups",
            shapes: &[&[2, 5, 3]],
            f: |x| {
                let groups = [vec![0], vec![1, 2], vec![3, 4]];
                let valid = [true, true, false, false, true, true, false, true, false, false];
                Ok(x[0].pool_groups(&groups, &valid)?.0)
            },
        },
        OpCase { name: "avg_pool3d", shapes: &[&[2, 4, 5, 4]], f: |x| x[0].avg_pool3d(2) },
        OpCase {
            name: "focal_loss",
            shapes: &[&[4, 3]],
            f: |x| x[0].scale(2.0).focal_loss(&[0, 2, 1, 2], &[1.0, 2.0, 0.5], 2.0),
        },
        OpCase {
            name: "focal_loss_gamma0",
            shapes: &[&[4, 3]],
            f: |x| x[0].focal_loss(&[1, 1, 0, 2], &[0.8, 1.1, 1.7], 0.0),
        },
        OpCase { name: "concat_axis0", shapes: &[&[2, 3], &[1, 3]], f: |x| concat(&[x[0], x[1]], 0) },
        OpCase { name: "concat_axis1", shapes: &[&[2, 3, 4], &[2, 1, 4]], f: |x| concat(&[x[0], x[1]], 1) },
        OpCase {
            name: "composite_attention",
            shapes: &[&[2, 3, 4], &[4, 4], &[4, 4], &[4], &[4]],
            f: |x| {
                let q = x[0].linear(&x[1], None)?;
                let k = x[0].linear(&x[2], None)?;
                let a = q.bmm(&k, true)?.scale(0.5).softmax_masked(&[true, true, false, true, false, true], false)?;
                Ok(a.bmm(&x[0], false)?.layer_norm(&x[3], &x[4], 1e-5)?.gelu())
            },
        },
    ]
}

// ----- toy cohort and models ------------------------------------------------

/// Small complete cohort with grey-matter volumes alongside the embeddings.
pub fn toy_synth(class_counts: [usize; NUM_CLASSES]) -> SynthConfig {
    SynthConfig {
        class_counts,
        radiomics_dim: 3,
        gm_dim: 8,
        genes_dim: 3,
        meta_numeric_dim: 2,
        meta_categorical: vec![3],
        informative_dims: 1,
        missing_genes: 0.0,
        missing_meta: 0.0,
        cell_missing_rate: 0.0,
        visits: [1, 2],
        gm_volume: Some(GmVolumeConfig { side: 4, grid: 2, voxel_noise: 0.05 }),
        ..Default::default()
    }
}

pub fn toy_dataset(seed: u64) -> Dataset {
    synth_generate(&toy_synth([3, 3, 3]), seed).unwrap()
}

/// Architecture variant selected by `variant`: plain, symmetric, pooled keys,
/// trainable image encoder, each with and without the FFN residual.
pub fn toy_model_config(variant: u64) -> ModelConfig {
    let mut config = ModelConfig {
        encoder: EncoderConfig { d: 4, layers: 2, heads: 2, d_ff: 6, ffn_residual: variant % 2 == 1 },
        fusion: FusionConfig { heads: 2, classifier_hidden: 5, ..Default::default() },
        ..Default::default()
    };
    match (variant / 2) % 4 {
        1 => config.fusion.symmetric = true,
        2 => config.fusion.kv = KvMode::PooledPerModality,
        3 => {
            config.image = ImageConfig {
                mode: ImageMode::TrainableSmall,
                d_img: 3,
                grid: 2,
                hidden: 4,
                volume_dims: Some([4, 4, 4]),
            }
        }
        _ => {}
    }
    config
}

/// Model with every parameter shifted away from its initial value, so that
/// zero biases and unit gains do not hide errors.
pub fn randomized_model(config: &ModelConfig, data: &Dataset, seed: u64) -> FusionModel<f64> {
    let mut model = FusionModel::<f64>::new(config, &data.schema, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        for v in model.params.get_mut(id).data_mut() {
            *v += r.random_range(-0.4..0.4);
        }
    }
    model
}

/// Random mask that keeps at least one imaging modality.
pub fn random_mask(rng: &mut ChaCha8Rng) -> ModalityMask {
    loop {
        let m = ModalityMask { present: std::array::from_fn(|_| rng.random_bool(0.6)) };
        if m.has_imaging() {
            return m;
        }
    }
}

/// Overwrites every value of the modalities hidden by `mask` (and of those the
/// sample lacks) with random numbers, codes and voxels.
pub fn scramble_hidden(sample: &mut Sample, mask: &ModalityMask, cardinalities: &[usize], rng: &mut ChaCha8Rng) {
    let effective = mask.effective(sample);
    for kind in ModalityKind::ALL {
        if effective.is_present(kind) {
            continue;
        }
        let block = sample.block_mut(kind);
        for v in &mut block.numeric {
            *v = Some(rng.random_range(-50.0..50.0));
        }
        for (c, &card) in block.categorical.iter_mut().zip(cardinalities) {
            *c = Some(rng.random_range(0..card as u32));
        }
        if kind == ModalityKind::GmEmbedding {
            if let Some(vol) = &sample.gm_volume {
                let noise: Vec<f32> = vol.intensities().iter().map(|_| rng.random_range(-9.0..9.0)).collect();
                sample.gm_volume = Some(Arc::new(Volume3D::new(vol.dims(), vol.spacing(), noise).unwrap()));
            }
        }
    }
}

/// Gradient of the mean focal loss with respect to every parameter, from the
/// tape and from central differences; returns the relative error over the
/// concatenated gradient and the worst per-parameter error with its name.
pub fn model_gradient_error(
    model: &FusionModel<f64>,
    samples: &[&Sample],
    masks: &[ModalityMask],
    labels: &[usize],
    h: f64,
) -> Result<(f64, f64, String)> {
    let weights = [1.0, 1.5, 0.7];
    let batch = model.batch(samples, masks)?;
    let tape = Tape::new();
    let p = model.params.bind(&tape);
    let loss = model.forward(&p, &tape, &batch)?.logits.focal_loss(labels, &weights, 2.0)?;
    let grads = tape.backward(loss)?;
    let loss_of = |m: &FusionModel<f64>| -> Result<f64> {
        let tape = Tape::inference();
        let p = m.params.bind(&tape);
        Ok(m.forward(&p, &tape, &batch)?.logits.focal_loss(labels, &weights, 2.0)?.value().item())
    };
    let mut probe = model.clone();
    let (mut all_a, mut all_n) = (Vec::new(), Vec::new());
    let (mut worst, mut worst_name) = (0.0f64, String::new());
    for id in model.params.ids() {
        let analytic = grads.get_or_zeros(p[id]).to_f64();
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..analytic.len() {
            let orig = probe.params.get(id).data()[i];
            probe.params.get_mut(id).data_mut()[i] = orig + h;
            let up = loss_of(&probe)?;
            probe.params.get_mut(id).data_mut()[i] = orig - h;
            let down = loss_of(&probe)?;
            probe.params.get_mut(id).data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
        let err = per_parameter_error(&analytic, &numeric);
        if err > worst {
            worst = err;
            worst_name = model.params.name(id).to_string();
        }
        all_a.extend(analytic);
        all_n.extend(numeric);
    }
    Ok((relative_error(&all_a, &all_n), worst, worst_name))
}

/// Relative error with an absolute floor, for parameters whose gradient
/// vanishes identically (a key bias under softmax, for one).
fn per_parameter_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-6)
}

// ----- oracles --------------------------------------------------------------

/// F statistic from sums of squares computed over all pairs:
/// `SS = Σ_{i<j} (x_i − x_j)² / n` for the whole sample and for each group.
pub fn anova_pairwise_f(groups: &[Vec<f64>]) -> f64 {
    let pair_ss = |xs: &[f64]| {
        let mut s = 0.0;
        for i in 0..xs.len() {
            for j in i + 1..xs.len() {
                s += (xs[i] - xs[j]).powi(2);
            }
        }
        s / xs.len() as f64
    };
    let all: Vec<f64> = groups.iter().flatten().copied().collect();
    let total = pair_ss(&all);
    let within: f64 = groups.iter().map(|g| pair_ss(g)).sum();
    let between = total - within;
    let (k, n) = (groups.len() as f64, all.len() as f64);
    (between / (k - 1.0)) / (within / (n - k))
}

/// Co-occurrence counts by enumerating every ordered voxel pair.
pub fn naive_glcm(grid: &GrayGrid, offset: [i32; 3], symmetric: bool) -> Vec<f64> {
    let g = grid.bins;
    let [nx, ny, nz] = grid.dims;
    let coords: Vec<([i64; 3], u16)> = (0..nx * ny * nz)
        .map(|i| ([(i / (ny * nz)) as i64, ((i / nz) % ny) as i64, (i % nz) as i64], grid.levels[i]))
        .filter(|&(_, l)| l > 0)
        .collect();
    let mut m = vec![0.0; g * g];
    for &(a, la) in &coords {
        for &(b, lb) in &coords {
            if (0..3).all(|k| b[k] - a[k] == offset[k] as i64) {
                let (i, j) = (la as usize - 1, lb as usize - 1);
                m[i * g + j] += 1.0;
                if symmetric {
                    m[j * g + i] += 1.0;
                }
            }
        }
    }
    m
}

/// Pooled-covariance linear discriminant over the numeric features (with
/// one-hot categoricals) of `modalities`, imputed with training means.
pub fn lda_accuracy(train: &Dataset, test: &Dataset, modalities: &[ModalityKind]) -> f64 {
    let imputer = ImputationModel::fit(train).unwrap();
    let encode = |data: &Dataset, mode: ImputeMode| -> Vec<(Vec<f64>, usize)> {
        imputer
            .apply_dataset(data, mode)
            .samples
            .iter()
            .map(|s| {
                let mut x = Vec::new();
                for &k in modalities {
                    let block = s.block(k);
                    let fill = &imputer.numeric[k.index()];
                    for (j, v) in block.numeric.iter().enumerate() {
                        x.push(if block.present { v.unwrap() } else { fill[j].global_mean });
                    }
                    for (j, spec) in data.schema.modality(k).categorical.iter().enumerate() {
                        let code = if block.present {
                            block.categorical[j].unwrap()
                        } else {
                            imputer.categorical[k.index()][j].global_mode
                        };
                        x.extend((1..spec.cardinality as u32).map(|c| if c == code { 1.0 } else { 0.0 }));
                    }
                }
                (x, s.label.unwrap().index())
            })
            .collect()
    };
    let tr = encode(train, ImputeMode::Marginal);
    let te = encode(test, ImputeMode::Marginal);
    let p = tr[0].0.len();
    let mut means = vec![vec![0.0; p]; NUM_CLASSES];
    let mut counts = [0usize; NUM_CLASSES];
    for (x, y) in &tr {
        counts[*y] += 1;
        for k in 0..p {
            means[*y][k] += x[k];
        }
    }
    for (c, m) in means.iter_mut().enumerate() {
        m.iter_mut().for_each(|v| *v /= counts[c] as f64);
    }
    let mut cov = vec![0.0; p * p];
    for (x, y) in &tr {
        for i in 0..p {
            for j in 0..p {
                cov[i * p + j] += (x[i] - means[*y][i]) * (x[j] - means[*y][j]);
            }
        }
    }
    let denom = (tr.len() - NUM_CLASSES) as f64;
    let trace: f64 = (0..p).map(|i| cov[i * p + i]).sum::<f64>() / denom / p as f64;
    cov.iter_mut().for_each(|v| *v /= denom);
    for i in 0..p {
        cov[i * p + i] += 1e-6 * trace.max(1e-12);
    }
    let chol = cholesky(&cov, p);
    let coef: Vec<Vec<f64>> = means.iter().map(|m| cholesky_solve(&chol, p, m)).collect();
    let offset: Vec<f64> = (0..NUM_CLASSES)
        .map(|c| {
            let quad: f64 = means[c].iter().zip(&coef[c]).map(|(a, b)| a * b).sum();
            -0.5 * quad + (counts[c] as f64 / tr.len() as f64).ln()
        })
        .collect();
    let correct = te
        .iter()
        .filter(|(x, y)| {
            let score = |c: usize| offset[c] + x.iter().zip(&coef[c]).map(|(a, b)| a * b).sum::<f64>();
            let best = (0..NUM_CLASSES).max_by(|&a, &b| score(a).total_cmp(&score(b))).unwrap();
            best == *y
        })
        .count();
    correct as f64 / te.len() as f64
}

fn cholesky(a: &[f64], n: usize) -> Vec<f64> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                l[i * n + i] = (a[i * n + i] - s).sqrt();
            } else {
                l[i * n + j] = (a[i * n + j] - s) / l[j * n + j];
            }
        }
    }
    l
}

fn cholesky_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[i * n + k] * y[k]).sum();
        y[i] = (b[i] - s) / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[k * n + i] * x[k]).sum();
        x[i] = (y[i] - s) / l[i * n + i];
    }
    x
}
