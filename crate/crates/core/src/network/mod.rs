//! Generator, style encoder and multi-scale discriminator.

mod discriminator;
mod encoder;
mod generator;
mod sian;

pub use discriminator::{DiscriminatorOutput, MultiScaleDiscriminator, PatchDiscriminator};
pub use encoder::{prior_style, reparameterize, StyleEncoder, StyleVector};
pub use generator::{Generator, GeneratorSpec, ResBlockSpec, SianResBlock};
pub use sian::{BranchKind, CondTensors, SianBlock, SianBranch, SianFlags};

use candle_core::{DType, Device, Tensor};
use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurize::{build_condition_pyramid, featurize, ConditionMaps, ConditionPyramid};
use crate::mask::InstanceMask;
use crate::nn::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub image_size: usize,
    pub style_dim: usize,
    /// Output width of each residual block; its length is the block count.
    pub channels: Vec<usize>,
    /// Filter count of every conv inside a SIAN block.
    pub sian_hidden: usize,
    pub encoder_width: usize,
    pub disc_width: usize,
    pub disc_layers: usize,
    pub disc_scales: usize,
    /// Instance gating in SIAN blocks.
    pub inst: bool,
    /// Style modulation in SIAN blocks.
    pub style: bool,
    pub skip_sian: bool,
    /// Discriminator input includes direction and distance maps.
    pub disc_sees_instance: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl NetworkConfig {
    /// 64x64 CPU-scale configuration.
    pub fn desk() -> Self {
        Self {
            image_size: 64,
            style_dim: 256,
            channels: vec![256, 256, 128, 64, 32],
            sian_hidden: 16,
            encoder_width: 32,
            disc_width: 32,
            disc_layers: 4,
            disc_scales: 2,
            inst: true,
            style: true,
            skip_sian: true,
            disc_sees_instance: true,
        }
    }

    /// 256x256 configuration with seven residual blocks.
    pub fn paper() -> Self {
        Self {
            image_size: 256,
            style_dim: 256,
            channels: vec![1024, 1024, 1024, 512, 256, 128, 64],
            sian_hidden: 128,
            encoder_width: 64,
            disc_width: 64,
            disc_layers: 4,
            disc_scales: 2,
            ..Self::desk()
        }
    }

    pub fn resblocks(&self) -> usize {
        self.channels.len()
    }

    pub fn flags(&self) -> SianFlags {
        SianFlags {
            instance: self.inst,
            style: self.style,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let blocks = self.resblocks();
        if blocks == 0 || blocks > 12 {
            return Err(Error::Config(format!("unsupported residual block count {blocks}")));
        }
        if self.image_size != 1 << (blocks + 1) {
            return Err(Error::Config(format!(
                "image size {} is inconsistent with {} residual blocks (expected {})",
                self.image_size,
                blocks,
                1usize << (blocks + 1)
            )));
        }
        if self.image_size < 8 {
            return Err(Error::Config("image size must be at least 8".into()));
        }
        for (name, v) in [
            ("style_dim", self.style_dim),
            ("sian_hidden", self.sian_hidden),
            ("encoder_width", self.encoder_width),
            ("disc_width", self.disc_width),
            ("disc_layers", self.disc_layers),
            ("disc_scales", self.disc_scales),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.channels.contains(&0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        Ok(())
    }

    /// Resolution of each generator stage, coarsest first.
    pub fn level_sizes(&self) -> Vec<(usize, usize)> {
        (0..self.resblocks()).map(|i| (2 << i, 2 << i)).collect()
    }
}

/// All three networks sharing one parameter store, with names prefixed
/// `gen.`, `enc.` and `disc.`.
pub struct SianModel {
    pub config: NetworkConfig,
    pub store: ParamStore,
    pub generator: Generator,
    pub encoder: StyleEncoder,
    pub discriminator: MultiScaleDiscriminator,
}

impl SianModel {
    pub const GENERATOR_PREFIXES: [&'static str; 2] = ["gen.", "enc."];
    pub const DISCRIMINATOR_PREFIXES: [&'static str; 1] = ["disc."];

    pub fn new(config: NetworkConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(dtype, seed);
        let generator = Generator::new(
            &mut store,
            "gen",
            &GeneratorSpec {
                style_dim: config.style_dim,
                channels: config.channels.clone(),
                hidden: config.sian_hidden,
                flags: config.flags(),
                skip_sian: config.skip_sian,
            },
        )?;
        let encoder = StyleEncoder::new(&mut store, "enc", config.image_size, config.encoder_width, config.style_dim)?;
        let discriminator = MultiScaleDiscriminator::new(
            &mut store,
            "disc",
            config.disc_scales,
            config.disc_width,
            config.disc_layers,
            config.disc_sees_instance,
        )?;
        Ok(Self {
            config,
            store,
            generator,
            encoder,
            discriminator,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }
}

/// Batched condition tensors for the generator (one per block) and the
/// full-resolution maps for the discriminator.
#[derive(Debug, Clone)]
pub struct BatchConditions {
    pub levels: Vec<CondTensors>,
    pub full: CondTensors,
}

impl BatchConditions {
    pub fn from_maps(maps: &[ConditionMaps], level_sizes: &[(usize, usize)], dtype: DType) -> Result<Self> {
        if maps.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let pyramids = maps
            .iter()
            .map(|m| build_condition_pyramid(m, level_sizes))
            .collect::<Result<Vec<ConditionPyramid>>>()?;
        let levels = (0..level_sizes.len())
            .map(|l| {
                let level: Vec<&ConditionMaps> = pyramids.iter().map(|p| &p.levels[l]).collect();
                stack_conditions(&level, dtype)
            })
            .collect::<Result<Vec<_>>>()?;
        let full = stack_conditions(&maps.iter().collect::<Vec<_>>(), dtype)?;
        Ok(Self { levels, full })
    }

    pub fn from_masks(masks: &[InstanceMask], level_sizes: &[(usize, usize)], dtype: DType) -> Result<Self> {
        let maps: Vec<ConditionMaps> = masks.iter().map(featurize).collect();
        Self::from_maps(&maps, level_sizes, dtype)
    }
}

pub fn stack_conditions(maps: &[&ConditionMaps], dtype: DType) -> Result<CondTensors> {
    let pick = |f: &dyn Fn(&ConditionMaps) -> &Array3<f32>| -> Result<Tensor> {
        let arrays: Vec<&Array3<f32>> = maps.iter().map(|m| f(m)).collect();
        array_batch_to_tensor(&arrays, dtype)
    };
    Ok(CondTensors {
        semantic: pick(&|m| &m.semantic.0)?,
        direction: pick(&|m| &m.direction.0)?,
        distance: pick(&|m| &m.distance.0)?,
    })
}

/// Stacks (C, H, W) arrays into an (N, C, H, W) tensor.
pub fn array_batch_to_tensor(arrays: &[&Array3<f32>], dtype: DType) -> Result<Tensor> {
    let first = arrays.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let (c, h, w) = first.dim();
    let mut data = Vec::with_capacity(arrays.len() * c * h * w);
    for a in arrays {
        if a.dim() != (c, h, w) {
            return Err(Error::shape(format!("{:?}", (c, h, w)), format!("{:?}", a.dim())));
        }
        data.extend(a.iter().copied());
    }
    Ok(Tensor::from_vec(data, (arrays.len(), c, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn tensor_to_arrays(t: &Tensor) -> Result<Vec<Array3<f32>>> {
    let (n, c, h, w) = t.dims4()?;
    let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let all = Array4::from_shape_vec((n, c, h, w), data).expect("length matches dims");
    Ok(all.outer_iter().map(|a| a.to_owned()).collect())
}
