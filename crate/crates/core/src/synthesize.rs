//! Inference: images from an instance mask and a style reference.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use ndarray::Array3;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::InstanceMask;
use crate::network::{array_batch_to_tensor, reparameterize, tensor_to_arrays, BatchConditions, SianModel, StyleVector};
use crate::train::Trainer;

/// Posterior of one encoded reference image, storable as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredStyle {
    pub mu: Vec<f32>,
    pub logvar: Vec<f32>,
}

impl StoredStyle {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("style serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

pub enum StyleSource<'a> {
    /// Reference image (3, H, W) in `[-1, 1]`, encoded on the fly.
    Image(&'a Array3<f32>),
    Stored(&'a StoredStyle),
}

/// Generator and encoder restored from a checkpoint.
pub struct Synthesizer {
    pub model: SianModel,
}

impl Synthesizer {
    pub fn load(checkpoint: &Path) -> Result<Self> {
        if !checkpoint.exists() {
            return Err(Error::Config(format!("checkpoint {} does not exist", checkpoint.display())));
        }
        Ok(Self {
            model: Trainer::load(checkpoint)?.model,
        })
    }

    pub fn from_model(model: SianModel) -> Self {
        Self { model }
    }

    pub fn image_size(&self) -> usize {
        self.model.config.image_size
    }

    pub fn encode(&self, image: &Array3<f32>) -> Result<StoredStyle> {
        let t = array_batch_to_tensor(&[image], self.model.dtype())?;
        let s = self.model.encoder.forward(&t)?;
        Ok(StoredStyle {
            mu: s.mu.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?,
            logvar: s.logvar.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?,
        })
    }

    /// Generates one image. The style is the posterior mean unless `sample`
    /// supplies a generator for a reparameterized draw.
    pub fn synthesize(&self, style: StyleSource<'_>, mask: &InstanceMask, sample: Option<&mut ChaCha8Rng>) -> Result<Array3<f32>> {
        let size = self.image_size();
        if (mask.height(), mask.width()) != (size, size) {
            return Err(Error::shape(
                format!("{size}x{size} mask for this checkpoint"),
                format!("{}x{}", mask.height(), mask.width()),
            ));
        }
        let stored = match style {
            StyleSource::Image(img) => self.encode(img)?,
            StyleSource::Stored(s) => s.clone(),
        };
        let dim = self.model.config.style_dim;
        if stored.mu.len() != dim || stored.logvar.len() != dim {
            return Err(Error::shape(
                format!("style vector of length {dim}"),
                format!("mu {} / logvar {}", stored.mu.len(), stored.logvar.len()),
            ));
        }
        let dtype = self.model.dtype();
        let mu = Tensor::from_slice(&stored.mu, (1, dim), &Device::Cpu)?.to_dtype(dtype)?;
        let logvar = Tensor::from_slice(&stored.logvar, (1, dim), &Device::Cpu)?.to_dtype(dtype)?;
        let posterior = StyleVector::from_posterior(mu, logvar);
        let code = match sample {
            Some(rng) => reparameterize(&posterior, rng)?.sample,
            None => posterior.mu,
        };
        let cond = BatchConditions::from_masks(std::slice::from_ref(mask), &self.model.config.level_sizes(), dtype)?;
        let out = self.model.generator.forward(&code, &cond.levels)?;
        Ok(tensor_to_arrays(&out)?.remove(0))
    }
}
