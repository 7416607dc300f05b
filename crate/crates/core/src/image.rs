//! Grey-matter image embeddings: precomputed passthrough or a small trainable
//! pooling encoder over volumes.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetSchema, ModalityKind, Sample};
use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tabular::Mlp;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageMode {
    Precomputed,
    TrainableSmall,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageConfig {
    pub mode: ImageMode,
    /// Output width of the trainable encoder. Precomputed embeddings take
    /// their width from the schema.
    pub d_img: usize,
    /// Pooling cells per axis.
    pub grid: usize,
    pub hidden: usize,
    /// Expected volume dimensions for the trainable encoder.
    pub volume_dims: Option<[usize; 3]>,
}

impl Default for ImageConfig {
    fn default() -> Self {
        Self { mode: ImageMode::Precomputed, d_img: 64, grid: 4, hidden: 64, volume_dims: None }
    }
}

/// Source of the image embedding fed to fusion.
#[derive(Clone, Debug)]
pub struct EmbeddingProvider {
    pub mode: ImageMode,
    pub d_img: usize,
    pub grid: usize,
    pub volume_dims: Option<[usize; 3]>,
    pub mlp: Option<Mlp>,
}

impl EmbeddingProvider {
    pub fn new<T: Scalar>(
        config: &ImageConfig,
        schema: &DatasetSchema,
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        match config.mode {
            ImageMode::Precomputed => {
                let d_img = schema.gm_dim();
                Ok(Self { mode: config.mode, d_img, grid: 0, volume_dims: None, mlp: None })
            }
            ImageMode::TrainableSmall => {
                let dims = config
                    .volume_dims
                    .ok_or_else(|| Error::Config("trainable image encoder needs `volume_dims`".into()))?;
                if config.grid == 0 || dims.iter().any(|&n| n < config.grid) || config.d_img == 0 || config.hidden == 0 {
                    return Err(Error::Config(format!(
                        "pooling grid {} does not fit volume {:?} (d_img {}, hidden {})",
                        config.grid, dims, config.d_img, config.hidden
                    )));
                }
                let cells = config.grid.pow(3);
                let mlp = Mlp::new(cells, config.hidden, config.d_img, store, &format!("{prefix}.mlp"), rng);
                Ok(Self { mode: config.mode, d_img: config.d_img, grid: config.grid, volume_dims: Some(dims), mlp: Some(mlp) })
            }
        }
    }

    /// Raw image inputs for a batch; rows whose image is absent are zero.
    pub fn batch<T: Scalar>(&self, samples: &[&Sample], present: &[bool]) -> Result<Tensor<T>> {
        let b = samples.len();
        match self.mode {
            ImageMode::Precomputed => {
                let mut data = Vec::with_capacity(b * self.d_img);
                for (s, &on) in samples.iter().zip(present) {
                    if on {
                        let block = &s.block(ModalityKind::GmEmbedding).numeric;
                        if block.len() != self.d_img {
                            return Err(Error::Schema(format!("embedding has {} values, expected {}", block.len(), self.d_img)));
                        }
                        for v in block {
                            let v = v.ok_or_else(|| Error::Schema(format!("{} has a missing embedding value", s.patient_id)))?;
                            data.push(T::c(v));
                        }
                    } else {
                        data.extend(std::iter::repeat_n(T::zero(), self.d_img));
                    }
                }
                Tensor::new(vec![b, self.d_img], data)
            }
            ImageMode::TrainableSmall => {
                let dims = self.volume_dims.expect("trainable encoder has volume dims");
                let n: usize = dims.iter().product();
                let mut data = Vec::with_capacity(b * n);
                for (s, &on) in samples.iter().zip(present) {
                    if on {
                        let vol = s
                            .gm_volume
                            .as_ref()
                            .ok_or_else(|| Error::Schema(format!("{} has no grey-matter volume", s.patient_id)))?;
                        if vol.dims() != dims {
                            return Err(Error::Schema(format!("volume dims {:?}, expected {:?}", vol.dims(), dims)));
                        }
                        data.extend(vol.intensities().iter().map(|&v| T::c(v as f64)));
                    } else {
                        data.extend(std::iter::repeat_n(T::zero(), n));
                    }
                }
                Tensor::new(vec![b, dims[0], dims[1], dims[2]], data)
            }
        }
    }

    /// Embeddings `[B, d_img]` for a batch built by [`EmbeddingProvider::batch`].
    pub fn embed<'t, T: Scalar>(&self, p: &Bound<'t, T>, tape: &'t Tape<T>, input: &Tensor<T>) -> Result<Var<'t, T>> {
        let x = tape.leaf(input.clone());
        match (&self.mode, &self.mlp) {
            (ImageMode::Precomputed, _) => Ok(x),
            (ImageMode::TrainableSmall, Some(mlp)) => mlp.forward(p, &x.avg_pool3d(self.grid)?),
            (ImageMode::TrainableSmall, None) => Err(Error::Config("trainable image encoder without parameters".into())),
        }
    }

    /// Passthrough check for a single precomputed vector.
    pub fn embed_precomputed<T: Scalar>(&self, v: &[T]) -> Result<Vec<T>> {
        if self.mode != ImageMode::Precomputed {
            return Err(Error::Config("encoder is not in precomputed mode".into()));
        }
        if v.len() != self.d_img {
            return Err(Error::Schema(format!("embedding has {} values, expected {}", v.len(), self.d_img)));
        }
        Ok(v.to_vec())
    }
}
