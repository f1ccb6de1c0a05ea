use candle_core::Tensor;

use super::sian::CondTensors;
use crate::error::{Error, Result};
use crate::nn::{leaky_relu, Conv2d, ParamStore};

/// Patch classifier: `layers` 4x4 convs (stride 2 except the last, pad 1)
/// followed by a 4x4 stride-1 logit conv.
#[derive(Debug, Clone)]
pub struct PatchDiscriminator {
    pub layers: Vec<Conv2d>,
    pub logit: Conv2d,
}

impl PatchDiscriminator {
    pub fn new(store: &mut ParamStore, prefix: &str, in_ch: usize, width: usize, layers: usize) -> Result<Self> {
        let mut convs = Vec::with_capacity(layers);
        let mut c = in_ch;
        for i in 0..layers {
            let out = width * (1 << i.min(3));
            let stride = if i + 1 == layers { 1 } else { 2 };
            convs.push(Conv2d::new(store, &format!("{prefix}.layer{i}"), c, out, 4, stride, 1, true)?);
            c = out;
        }
        Ok(Self {
            layers: convs,
            logit: Conv2d::new(store, &format!("{prefix}.logit"), c, 1, 4, 1, 1, true)?,
        })
    }

    /// Spatial size of the logit map for a square input of side `size`.
    pub fn logit_size(&self, size: usize) -> usize {
        let mut s = size;
        for conv in self.layers.iter().chain(std::iter::once(&self.logit)) {
            s = (s + 2 * conv.padding - 4) / conv.stride + 1;
        }
        s
    }

    pub fn forward(&self, x: &Tensor) -> Result<DiscriminatorOutput> {
        let mut h = x.clone();
        let mut features = Vec::with_capacity(self.layers.len());
        for conv in &self.layers {
            h = leaky_relu(&conv.forward(&h)?, 0.2)?;
            features.push(h.clone());
        }
        Ok(DiscriminatorOutput {
            logits: self.logit.forward(&h)?,
            features,
        })
    }
}

#[derive(Debug, Clone)]
pub struct DiscriminatorOutput {
    pub logits: Tensor,
    /// Activations after each hidden layer, in order.
    pub features: Vec<Tensor>,
}

/// Patch discriminators applied to the conditioned input at successively
/// halved resolutions.
#[derive(Debug, Clone)]
pub struct MultiScaleDiscriminator {
    pub scales: Vec<PatchDiscriminator>,
    pub sees_instance: bool,
}

impl MultiScaleDiscriminator {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        scales: usize,
        width: usize,
        layers: usize,
        sees_instance: bool,
    ) -> Result<Self> {
        let in_ch = if sees_instance { 3 + 5 } else { 3 + 2 };
        let scales = (0..scales)
            .map(|i| PatchDiscriminator::new(store, &format!("{prefix}.scale{i}"), in_ch, width, layers))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { scales, sees_instance })
    }

    pub fn forward(&self, image: &Tensor, cond: &CondTensors) -> Result<Vec<DiscriminatorOutput>> {
        let (_, _, h, w) = image.dims4()?;
        if cond.spatial()? != (h, w) {
            let (ch, cw) = cond.spatial()?;
            return Err(Error::shape(format!("condition maps at {h}x{w}"), format!("{ch}x{cw}")));
        }
        let mut parts = vec![image.clone(), cond.semantic.clone()];
        if self.sees_instance {
            parts.push(cond.direction.clone());
            parts.push(cond.distance.clone());
        }
        let mut x = Tensor::cat(&parts, 1)?;
        let mut out = Vec::with_capacity(self.scales.len());
        for (i, scale) in self.scales.iter().enumerate() {
            if i > 0 {
                x = x.avg_pool2d(2)?;
            }
            out.push(scale.forward(&x)?);
        }
        Ok(out)
    }
}
