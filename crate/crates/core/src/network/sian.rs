//! The style-guided instance-adaptive normalization block.
//!
//! Activations are standardized with parameter-free batch statistics and then
//! modulated per pixel by `gamma * x_hat + beta`, where each of `gamma` and
//! `beta` is the sum of two branch outputs. Both branches embed the semantic
//! map, scale their conv input channels by an affine projection of the style
//! code, gate the result with a 1x1 projection of one instance layout
//! (direction for the first branch, distance for the second), and predict the
//! modulation maps after a compensation conv.

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::nn::{ensure_finite, Conv2d, Linear, ParamStore};

/// Per-level conditioning tensors, batched: semantic (N,2,H,W),
/// direction (N,2,H,W), distance (N,1,H,W).
#[derive(Debug, Clone)]
pub struct CondTensors {
    pub semantic: Tensor,
    pub direction: Tensor,
    pub distance: Tensor,
}

impl CondTensors {
    pub fn spatial(&self) -> Result<(usize, usize)> {
        let (_, _, h, w) = self.semantic.dims4()?;
        Ok((h, w))
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            semantic: self.semantic.to_dtype(dtype)?,
            direction: self.direction.to_dtype(dtype)?,
            distance: self.distance.to_dtype(dtype)?,
        })
    }
}

/// Ablation switches. With both off the block only sees the semantic map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SianFlags {
    pub instance: bool,
    pub style: bool,
}

impl Default for SianFlags {
    fn default() -> Self {
        Self {
            instance: true,
            style: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchKind {
    Direction,
    Distance,
}

impl BranchKind {
    fn name(self) -> &'static str {
        match self {
            BranchKind::Direction => "branch_p",
            BranchKind::Distance => "branch_q",
        }
    }

    fn layout_channels(self) -> usize {
        match self {
            BranchKind::Direction => 2,
            BranchKind::Distance => 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SianBranch {
    pub kind: BranchKind,
    pub semantic_conv: Conv2d,
    pub style_affine: Linear,
    pub branch_conv: Conv2d,
    pub instance_conv: Conv2d,
    pub compensation_conv: Conv2d,
    pub gamma_conv: Conv2d,
    pub beta_conv: Conv2d,
}

impl SianBranch {
    fn new(
        store: &mut ParamStore,
        prefix: &str,
        kind: BranchKind,
        channels: usize,
        hidden: usize,
        style_dim: usize,
    ) -> Result<Self> {
        let p = format!("{prefix}.{}", kind.name());
        let instance_conv = Conv2d::pointwise(store, &format!("{p}.instance_conv"), kind.layout_channels(), hidden)?;
        // gate starts near 1 so background pixels (zero layout) keep their semantics
        store.fill(&format!("{p}.instance_conv.bias"), 1.0)?;
        let gamma_conv = Conv2d::same3(store, &format!("{p}.gamma_conv"), hidden, channels)?;
        // the two branch biases sum to 1: plain standardization at init
        store.fill(&format!("{p}.gamma_conv.bias"), 0.5)?;
        Ok(Self {
            kind,
            semantic_conv: Conv2d::same3(store, &format!("{p}.semantic_conv"), 2, hidden)?,
            style_affine: Linear::with_gain(store, &format!("{p}.style_affine"), style_dim, hidden, 0.1, 1.0)?,
            branch_conv: Conv2d::same3(store, &format!("{p}.branch_conv"), hidden, hidden)?,
            instance_conv,
            compensation_conv: Conv2d::same3(store, &format!("{p}.compensation_conv"), hidden, hidden)?,
            gamma_conv,
            beta_conv: Conv2d::same3(store, &format!("{p}.beta_conv"), hidden, channels)?,
        })
    }

    /// `(gamma, beta)` contributed by this branch.
    pub fn modulation(&self, cond: &CondTensors, style: &Tensor, flags: SianFlags) -> Result<(Tensor, Tensor)> {
        let mut a = self.semantic_conv.forward(&cond.semantic)?.relu()?;
        if flags.style {
            // Scaling the conv input channels per sample is the same as
            // scaling the kernel's input-channel slices by the style vector.
            let (n, hidden) = (a.dims4()?.0, a.dims4()?.1);
            let s = self.style_affine.forward(style)?.reshape((n, hidden, 1, 1))?;
            a = a.broadcast_mul(&s)?;
        }
        let mut b = self.branch_conv.forward(&a)?;
        if flags.instance {
            let layout = match self.kind {
                BranchKind::Direction => &cond.direction,
                BranchKind::Distance => &cond.distance,
            };
            b = (b * self.instance_conv.forward(layout)?)?;
        }
        let c = self.compensation_conv.forward(&b)?.relu()?;
        Ok((self.gamma_conv.forward(&c)?, self.beta_conv.forward(&c)?))
    }
}

#[derive(Debug, Clone)]
pub struct SianBlock {
    pub channels: usize,
    pub eps: f64,
    pub flags: SianFlags,
    pub branches: [SianBranch; 2],
}

impl SianBlock {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        hidden: usize,
        style_dim: usize,
        flags: SianFlags,
    ) -> Result<Self> {
        Ok(Self {
            channels,
            eps: 1e-5,
            flags,
            branches: [
                SianBranch::new(store, prefix, BranchKind::Direction, channels, hidden, style_dim)?,
                SianBranch::new(store, prefix, BranchKind::Distance, channels, hidden, style_dim)?,
            ],
        })
    }

    /// Per-channel standardization with batch statistics over (N, H, W).
    pub fn standardize(&self, h: &Tensor) -> Result<Tensor> {
        let mean = h.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
        let centered = h.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
        let std = (var + self.eps)?.sqrt()?;
        Ok(centered.broadcast_div(&std)?)
    }

    /// Summed modulation maps `(gamma_i + gamma_j, beta_i + beta_j)`.
    pub fn modulation(&self, cond: &CondTensors, style: &Tensor) -> Result<(Tensor, Tensor)> {
        let (gi, bi) = self.branches[0].modulation(cond, style, self.flags)?;
        let (gj, bj) = self.branches[1].modulation(cond, style, self.flags)?;
        Ok(((gi + gj)?, (bi + bj)?))
    }

    pub fn forward(&self, h: &Tensor, cond: &CondTensors, style: &Tensor) -> Result<Tensor> {
        let (n, c, hh, ww) = h.dims4()?;
        if c != self.channels {
            return Err(Error::shape(format!("{} channels", self.channels), format!("{c} channels")));
        }
        let (ch, cw) = cond.spatial()?;
        if (ch, cw) != (hh, ww) {
            return Err(Error::shape(format!("condition maps at {hh}x{ww}"), format!("{ch}x{cw}")));
        }
        for (name, t, channels) in [
            ("semantic map", &cond.semantic, 2),
            ("direction map", &cond.direction, 2),
            ("distance map", &cond.distance, 1),
        ] {
            let (tn, tc, th, tw) = t.dims4()?;
            if (tn, tc, th, tw) != (n, channels, hh, ww) {
                return Err(Error::shape(
                    format!("{name} of shape [{n}, {channels}, {hh}, {ww}]"),
                    format!("{:?}", t.dims()),
                ));
            }
            ensure_finite(t, name)?;
        }
        if style.dims2()?.0 != n {
            return Err(Error::shape(format!("{n} style vectors"), format!("{:?}", style.dims())));
        }
        ensure_finite(h, "SIAN input activation")?;
        ensure_finite(style, "style vector")?;
        let normalized = self.standardize(h)?;
        let (gamma, beta) = self.modulation(cond, style)?;
        Ok(((gamma * normalized)? + beta)?)
    }
}
