use candle_core::Tensor;

use super::sian::{CondTensors, SianBlock, SianFlags};
use crate::error::{Error, Result};
use crate::nn::{leaky_relu, upsample2x, Conv2d, Linear, ParamStore};

/// Residual block with SIAN normalization on both the main and skip paths.
///
/// main: (SIAN -> ReLU -> conv3x3) twice; skip: SIAN -> ReLU -> conv1x1.
#[derive(Debug, Clone)]
pub struct SianResBlock {
    pub norm_0: SianBlock,
    pub conv_0: Conv2d,
    pub norm_1: SianBlock,
    pub conv_1: Conv2d,
    /// `None` when the skip-path SIAN is ablated; the skip is then conv1x1(x).
    pub norm_skip: Option<SianBlock>,
    pub conv_skip: Conv2d,
}

#[derive(Debug, Clone, Copy)]
pub struct ResBlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub hidden: usize,
    pub style_dim: usize,
    pub flags: SianFlags,
    pub skip_sian: bool,
}

impl SianResBlock {
    pub fn new(store: &mut ParamStore, prefix: &str, spec: ResBlockSpec) -> Result<Self> {
        let middle = spec.in_channels.min(spec.out_channels);
        let norm = |store: &mut ParamStore, name: &str, ch: usize| {
            SianBlock::new(store, &format!("{prefix}.{name}"), ch, spec.hidden, spec.style_dim, spec.flags)
        };
        Ok(Self {
            norm_0: norm(store, "norm_0", spec.in_channels)?,
            conv_0: Conv2d::same3(store, &format!("{prefix}.conv_0"), spec.in_channels, middle)?,
            norm_1: norm(store, "norm_1", middle)?,
            conv_1: Conv2d::same3(store, &format!("{prefix}.conv_1"), middle, spec.out_channels)?,
            norm_skip: if spec.skip_sian {
                Some(norm(store, "norm_skip", spec.in_channels)?)
            } else {
                None
            },
            conv_skip: Conv2d::new(
                store,
                &format!("{prefix}.conv_skip"),
                spec.in_channels,
                spec.out_channels,
                1,
                1,
                0,
                false,
            )?,
        })
    }

    pub fn forward(&self, x: &Tensor, cond: &CondTensors, style: &Tensor) -> Result<Tensor> {
        let dx = self.conv_0.forward(&self.norm_0.forward(x, cond, style)?.relu()?)?;
        let dx = self.conv_1.forward(&self.norm_1.forward(&dx, cond, style)?.relu()?)?;
        let skip = match &self.norm_skip {
            Some(norm) => self.conv_skip.forward(&norm.forward(x, cond, style)?.relu()?)?,
            None => self.conv_skip.forward(x)?,
        };
        Ok((dx + skip)?)
    }
}

#[derive(Debug, Clone)]
pub struct GeneratorSpec {
    pub style_dim: usize,
    /// Output channels of each residual block; the first entry is also the
    /// width of the initial 2x2 projection.
    pub channels: Vec<usize>,
    pub hidden: usize,
    pub flags: SianFlags,
    pub skip_sian: bool,
}

/// Style code -> 2x2 projection -> residual blocks, each followed by a 2x
/// nearest upsample -> conv to RGB -> tanh.
#[derive(Debug, Clone)]
pub struct Generator {
    pub fc: Linear,
    pub blocks: Vec<SianResBlock>,
    pub conv_img: Conv2d,
    pub initial_channels: usize,
}

impl Generator {
    pub fn new(store: &mut ParamStore, prefix: &str, spec: &GeneratorSpec) -> Result<Self> {
        let c0 = *spec
            .channels
            .first()
            .ok_or_else(|| Error::Config("generator needs at least one residual block".into()))?;
        let fc = Linear::new(store, &format!("{prefix}.fc"), spec.style_dim, c0 * 4, 0.0)?;
        let mut blocks = Vec::with_capacity(spec.channels.len());
        let mut in_ch = c0;
        for (i, &out_ch) in spec.channels.iter().enumerate() {
            blocks.push(SianResBlock::new(
                store,
                &format!("{prefix}.resblk{i}"),
                ResBlockSpec {
                    in_channels: in_ch,
                    out_channels: out_ch,
                    hidden: spec.hidden,
                    style_dim: spec.style_dim,
                    flags: spec.flags,
                    skip_sian: spec.skip_sian,
                },
            )?);
            in_ch = out_ch;
        }
        let conv_img = Conv2d::same3(store, &format!("{prefix}.conv_img"), in_ch, 3)?;
        Ok(Self {
            fc,
            blocks,
            conv_img,
            initial_channels: c0,
        })
    }

    /// Spatial size each residual block runs at, coarsest first.
    pub fn level_sizes(&self) -> Vec<(usize, usize)> {
        (0..self.blocks.len()).map(|i| (2 << i, 2 << i)).collect()
    }

    pub fn output_size(&self) -> usize {
        4 << (self.blocks.len() - 1)
    }

    /// `style` is the sampled style code (N, D); `levels` has one entry per
    /// residual block at the matching resolution.
    pub fn forward(&self, style: &Tensor, levels: &[CondTensors]) -> Result<Tensor> {
        if levels.len() != self.blocks.len() {
            return Err(Error::Config(format!(
                "generator has {} residual blocks but the condition pyramid has {} levels",
                self.blocks.len(),
                levels.len()
            )));
        }
        for (level, want) in levels.iter().zip(self.level_sizes()) {
            let got = level.spatial()?;
            if got != want {
                return Err(Error::Config(format!(
                    "condition level at {}x{} where the generator expects {}x{}",
                    got.0, got.1, want.0, want.1
                )));
            }
        }
        let n = style.dims2()?.0;
        let mut x = self.fc.forward(style)?.reshape((n, self.initial_channels, 2, 2))?;
        for (block, cond) in self.blocks.iter().zip(levels) {
            x = upsample2x(&block.forward(&x, cond, style)?)?;
        }
        Ok(self.conv_img.forward(&leaky_relu(&x, 0.2)?)?.tanh()?)
    }
}
