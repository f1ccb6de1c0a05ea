//! Frozen convolutional feature embedder shared by the perceptual loss and
//! the FID statistics.

use std::path::PathBuf;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::TensorArchive;
use crate::error::{Error, Result};
use crate::nn::conv2d;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExtractorConfig {
    /// Random He-initialized weights drawn from `seed`.
    Random { seed: u64, widths: Vec<usize>, layer_weights: Vec<f64> },
    /// Weights read from a tensor archive with entries `extractor.layer{i}.weight`
    /// and `extractor.layer{i}.bias`.
    File { path: PathBuf, layer_weights: Vec<f64> },
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig::Random {
            seed: 0x5EED,
            widths: vec![16, 32, 64],
            layer_weights: vec![1.0, 1.0, 1.0],
        }
    }
}

#[derive(Debug, Clone)]
struct Layer {
    weight: Tensor,
    bias: Tensor,
}

/// 3x3 conv + ReLU layers with 2x average pooling in between. Its weights
/// are plain tensors, so gradients only flow to the input.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    layers: Vec<Layer>,
    pub layer_weights: Vec<f64>,
    /// Human-readable identity recorded in metric reports.
    pub identity: String,
}

impl FeatureExtractor {
    pub fn from_config(config: &ExtractorConfig, dtype: DType) -> Result<Self> {
        match config {
            ExtractorConfig::Random {
                seed,
                widths,
                layer_weights,
            } => Self::random(*seed, widths, layer_weights.clone(), dtype),
            ExtractorConfig::File { path, layer_weights } => {
                let archive = TensorArchive::load(path)?;
                let mut layers = Vec::new();
                for i in 0.. {
                    let (Some(w), Some(b)) = (
                        archive.tensors.get(&format!("extractor.layer{i}.weight")),
                        archive.tensors.get(&format!("extractor.layer{i}.bias")),
                    ) else {
                        break;
                    };
                    layers.push(Layer {
                        weight: Tensor::from_slice(&w.1, w.0.as_slice(), &Device::Cpu)?.to_dtype(dtype)?,
                        bias: Tensor::from_slice(&b.1, b.0.as_slice(), &Device::Cpu)?.to_dtype(dtype)?,
                    });
                }
                if layers.is_empty() {
                    return Err(Error::Config(format!("{} holds no extractor layers", path.display())));
                }
                check_weights(layer_weights, layers.len())?;
                Ok(Self {
                    layers,
                    layer_weights: layer_weights.clone(),
                    identity: format!("file:{}", path.display()),
                })
            }
        }
    }

    pub fn random(seed: u64, widths: &[usize], layer_weights: Vec<f64>, dtype: DType) -> Result<Self> {
        if widths.is_empty() {
            return Err(Error::Config("extractor needs at least one layer".into()));
        }
        check_weights(&layer_weights, widths.len())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(widths.len());
        let mut in_ch = 3;
        for &out in widths {
            let fan_in = in_ch * 9;
            let std = (2.0 / fan_in as f64).sqrt();
            let w: Vec<f64> = (0..out * fan_in)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * std
                })
                .collect();
            layers.push(Layer {
                weight: Tensor::from_vec(w, (out, in_ch, 3, 3), &Device::Cpu)?.to_dtype(dtype)?,
                bias: Tensor::zeros(out, dtype, &Device::Cpu)?,
            });
            in_ch = out;
        }
        Ok(Self {
            layers,
            layer_weights,
            identity: format!("random-conv(seed={seed}, widths={widths:?})"),
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Feature maps after each layer for an (N, 3, H, W) batch.
    pub fn features(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        let mut x = image.to_dtype(self.layers[0].weight.dtype())?;
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                let (_, _, h, w) = x.dims4()?;
                if h >= 2 && w >= 2 {
                    x = x.avg_pool2d(2)?;
                }
            }
            x = conv2d(&x, &layer.weight, Some(&layer.bias), 1, 1)?.relu()?;
            out.push(x.clone());
        }
        Ok(out)
    }

    /// Global-average-pooled features of every layer, concatenated: (N, D).
    pub fn embed(&self, image: &Tensor) -> Result<Tensor> {
        let feats = self.features(image)?;
        let pooled = feats
            .iter()
            .map(|f| Ok(f.mean(3)?.mean(2)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&pooled, 1)?)
    }
}

fn check_weights(weights: &[f64], layers: usize) -> Result<()> {
    if weights.len() != layers {
        return Err(Error::Config(format!(
            "{} perceptual layer weights for {layers} extractor layers",
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::Config("perceptual layer weights must be finite and non-negative".into()));
    }
    Ok(())
}
