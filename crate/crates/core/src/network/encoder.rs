use candle_core::{DType, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::{leaky_relu, Conv2d, Linear, ParamStore};

/// Posterior style code for a batch. `sample` and `noise` are filled by
/// [`reparameterize`]; before that `sample` equals `mu`.
#[derive(Debug, Clone)]
pub struct StyleVector {
    pub mu: Tensor,
    pub logvar: Tensor,
    pub sample: Tensor,
    pub noise: Option<Tensor>,
}

impl StyleVector {
    pub fn from_posterior(mu: Tensor, logvar: Tensor) -> Self {
        Self {
            sample: mu.clone(),
            mu,
            logvar,
            noise: None,
        }
    }

    pub fn dim(&self) -> Result<usize> {
        Ok(self.mu.dims2()?.1)
    }
}

/// `sample = mu + exp(logvar / 2) * eps` with `eps ~ N(0, I)` drawn from `rng`.
pub fn reparameterize(style: &StyleVector, rng: &mut impl Rng) -> Result<StyleVector> {
    let shape = style.mu.dims().to_vec();
    let n: usize = shape.iter().product();
    let eps: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let eps = Tensor::from_vec(eps, shape, style.mu.device())?.to_dtype(style.mu.dtype())?;
    let std = (&style.logvar * 0.5)?.exp()?;
    let sample = (&style.mu + (std * &eps)?)?;
    Ok(StyleVector {
        mu: style.mu.clone(),
        logvar: style.logvar.clone(),
        sample,
        noise: Some(eps),
    })
}

/// Strided 3x3 conv stack down to 4x4, then two linear heads.
#[derive(Debug, Clone)]
pub struct StyleEncoder {
    pub convs: Vec<Conv2d>,
    pub fc_mu: Linear,
    pub fc_logvar: Linear,
    pub image_size: usize,
}

impl StyleEncoder {
    pub fn new(store: &mut ParamStore, prefix: &str, image_size: usize, width: usize, style_dim: usize) -> Result<Self> {
        if image_size < 8 || !image_size.is_power_of_two() {
            return Err(Error::Config(format!("encoder needs a power-of-two image size >= 8, got {image_size}")));
        }
        let layers = (image_size / 4).trailing_zeros() as usize;
        let mut convs = Vec::with_capacity(layers);
        let mut in_ch = 3;
        for i in 0..layers {
            let out_ch = width * (1 << i.min(3));
            convs.push(Conv2d::new(store, &format!("{prefix}.layer{i}"), in_ch, out_ch, 3, 2, 1, true)?);
            in_ch = out_ch;
        }
        let flat = in_ch * 16;
        Ok(Self {
            convs,
            fc_mu: Linear::new(store, &format!("{prefix}.fc_mu"), flat, style_dim, 0.0)?,
            fc_logvar: Linear::with_gain(store, &format!("{prefix}.fc_logvar"), flat, style_dim, 0.1, 0.0)?,
            image_size,
        })
    }

    pub fn forward(&self, image: &Tensor) -> Result<StyleVector> {
        let (n, c, h, w) = image.dims4()?;
        if c != 3 {
            return Err(Error::shape("3-channel image", format!("{c} channels")));
        }
        if h != self.image_size || w != self.image_size {
            return Err(Error::shape(
                format!("{0}x{0} image", self.image_size),
                format!("{h}x{w}"),
            ));
        }
        let mut x = image.clone();
        for conv in &self.convs {
            x = leaky_relu(&conv.forward(&x)?, 0.2)?;
        }
        let x = x.reshape((n, ()))?;
        Ok(StyleVector::from_posterior(self.fc_mu.forward(&x)?, self.fc_logvar.forward(&x)?))
    }
}

/// Standard-normal style codes for sampling without a reference image.
pub fn prior_style(n: usize, dim: usize, dtype: DType, rng: &mut impl Rng) -> Result<StyleVector> {
    let mu = Tensor::zeros((n, dim), dtype, &candle_core::Device::Cpu)?;
    let logvar = mu.clone();
    reparameterize(&StyleVector::from_posterior(mu, logvar), rng)
}
