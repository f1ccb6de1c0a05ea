//! Adversarial, feature-matching, perceptual and KL objectives.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extractor::FeatureExtractor;
use crate::network::{DiscriminatorOutput, StyleVector};
use crate::nn::{scalar, ParamStore};

/// Coefficients of the generator objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight on the hinge generator loss; 1 in normal training.
    pub adversarial: f64,
    pub feature_matching: f64,
    pub perceptual: f64,
    pub kld: f64,
    pub regularization: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            adversarial: 1.0,
            feature_matching: 10.0,
            perceptual: 10.0,
            kld: 0.05,
            regularization: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("adversarial", self.adversarial),
            ("feature_matching", self.feature_matching),
            ("perceptual", self.perceptual),
            ("kld", self.kld),
            ("regularization", self.regularization),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss weight {name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Regularization term hook.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    #[default]
    None,
    /// Mean squared value over all generator and encoder weights.
    WeightL2,
}

impl Regularizer {
    pub fn penalty(&self, store: &ParamStore, prefixes: &[&str]) -> Result<Option<Tensor>> {
        match self {
            Regularizer::None => Ok(None),
            Regularizer::WeightL2 => {
                let mut total: Option<Tensor> = None;
                let mut count = 0usize;
                for (name, var) in store.iter() {
                    if !prefixes.iter().any(|p| name.starts_with(p)) {
                        continue;
                    }
                    count += var.elem_count();
                    let s = var.as_tensor().sqr()?.sum_all()?;
                    total = Some(match total {
                        Some(t) => (t + s)?,
                        None => s,
                    });
                }
                Ok(total.map(|t| t / count.max(1) as f64).transpose()?)
            }
        }
    }
}

/// Per-step record of every objective term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub gan: f64,
    pub feature_match: f64,
    pub perceptual: f64,
    pub kld: f64,
    pub reg: f64,
    pub total: f64,
    pub discriminator: f64,
}

impl LossReport {
    /// Weighted sum with a fixed evaluation order. A zero weight drops its
    /// term entirely, so a non-finite regularizer cannot leak in.
    pub fn compose(gan: f64, feature_match: f64, perceptual: f64, kld: f64, reg: f64, w: &LossWeights) -> f64 {
        let term = |weight: f64, v: f64| if weight == 0.0 { 0.0 } else { weight * v };
        let mut total = term(w.adversarial, gan);
        total += term(w.feature_matching, feature_match);
        total += term(w.perceptual, perceptual);
        total += term(w.kld, kld);
        total += term(w.regularization, reg);
        total
    }
}

fn mean_over_scales(values: Vec<Tensor>) -> Result<Tensor> {
    let n = values.len();
    if n == 0 {
        return Err(Error::invalid("no discriminator scales"));
    }
    let stacked = Tensor::stack(&values, 0)?;
    Ok((stacked.sum_all()? / n as f64)?)
}

/// `mean(max(0, 1 - real)) + mean(max(0, 1 + fake))`, averaged over scales.
pub fn hinge_d_loss(real: &[Tensor], fake: &[Tensor]) -> Result<Tensor> {
    if real.len() != fake.len() {
        return Err(Error::shape(format!("{} scales", real.len()), format!("{} scales", fake.len())));
    }
    let per_scale = real
        .iter()
        .zip(fake)
        .map(|(r, f)| {
            let lr = r.affine(-1.0, 1.0)?.relu()?.mean_all()?;
            let lf = f.affine(1.0, 1.0)?.relu()?.mean_all()?;
            Ok((lr + lf)?)
        })
        .collect::<Result<Vec<_>>>()?;
    mean_over_scales(per_scale)
}

/// `-mean(fake)`, averaged over scales.
pub fn hinge_g_loss(fake: &[Tensor]) -> Result<Tensor> {
    let per_scale = fake
        .iter()
        .map(|f| Ok(f.mean_all()?.neg()?))
        .collect::<Result<Vec<_>>>()?;
    mean_over_scales(per_scale)
}

/// Mean over scales of the summed per-layer mean absolute differences. The
/// real-side features are treated as constants.
pub fn feature_matching_loss(real: &[Vec<Tensor>], fake: &[Vec<Tensor>]) -> Result<Tensor> {
    if real.len() != fake.len() {
        return Err(Error::shape(format!("{} scales", real.len()), format!("{} scales", fake.len())));
    }
    let per_scale = real
        .iter()
        .zip(fake)
        .map(|(rs, fs)| {
            if rs.len() != fs.len() {
                return Err(Error::shape(format!("{} layers", rs.len()), format!("{} layers", fs.len())));
            }
            let layers = rs
                .iter()
                .zip(fs)
                .map(|(r, f)| {
                    if r.dims() != f.dims() {
                        return Err(Error::shape(format!("{:?}", r.dims()), format!("{:?}", f.dims())));
                    }
                    Ok((f - r.detach())?.abs()?.mean_all()?)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Tensor::stack(&layers, 0)?.sum_all()?)
        })
        .collect::<Result<Vec<_>>>()?;
    mean_over_scales(per_scale)
}

/// Convenience: feature matching straight from discriminator outputs.
pub fn feature_matching_from_outputs(real: &[DiscriminatorOutput], fake: &[DiscriminatorOutput]) -> Result<Tensor> {
    let r: Vec<Vec<Tensor>> = real.iter().map(|o| o.features.clone()).collect();
    let f: Vec<Vec<Tensor>> = fake.iter().map(|o| o.features.clone()).collect();
    feature_matching_loss(&r, &f)
}

/// Weighted sum of mean absolute feature differences under a frozen
/// extractor.
pub fn perceptual_loss(real: &Tensor, fake: &Tensor, extractor: &FeatureExtractor) -> Result<Tensor> {
    if real.dims() != fake.dims() {
        return Err(Error::shape(format!("{:?}", real.dims()), format!("{:?}", fake.dims())));
    }
    let fr = extractor.features(real)?;
    let ff = extractor.features(fake)?;
    let mut total: Option<Tensor> = None;
    for ((r, f), &w) in fr.iter().zip(&ff).zip(&extractor.layer_weights) {
        let term = ((f - r.detach())?.abs()?.mean_all()? * w)?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    Ok(total.expect("extractor has layers"))
}

/// `0.5 * sum_d (mu^2 + exp(logvar) - logvar - 1)`, averaged over the batch.
pub fn kld_loss(style: &StyleVector) -> Result<Tensor> {
    let n = style.mu.dims2()?.0;
    let per = ((style.mu.sqr()? + style.logvar.exp()?)? - &style.logvar)?.affine(1.0, -1.0)?;
    Ok((per.sum_all()? * (0.5 / n as f64))?)
}

/// Generator objective terms as graph tensors, before weighting.
#[derive(Debug, Clone)]
pub struct LossParts {
    pub gan: Tensor,
    pub feature_match: Tensor,
    pub perceptual: Tensor,
    pub kld: Tensor,
    pub reg: Option<Tensor>,
}

/// Rounding slack for the non-negativity check on f32 loss terms.
pub const NEGATIVE_TOLERANCE: f64 = 1e-6;

/// Weighted generator loss for backprop plus its scalar report. Aborts with
/// the offending term named if any part is non-finite.
pub fn total_generator_loss(parts: &LossParts, weights: &LossWeights) -> Result<(Tensor, LossReport)> {
    weights.validate()?;
    let gan = scalar(&parts.gan)?;
    let fm = scalar(&parts.feature_match)?;
    let perc = scalar(&parts.perceptual)?;
    let kld = scalar(&parts.kld)?;
    let reg = match &parts.reg {
        Some(r) => scalar(r)?,
        None => 0.0,
    };
    for (name, v, weight) in [
        ("gan", gan, weights.adversarial),
        ("feature_match", fm, weights.feature_matching),
        ("perceptual", perc, weights.perceptual),
        ("kld", kld, weights.kld),
        ("reg", reg, weights.regularization),
    ] {
        if !v.is_finite() && weight != 0.0 {
            return Err(Error::NonFinite(format!("generator loss term {name}")));
        }
    }
    // every term but the adversarial one is a sum of non-negative parts
    for (name, v) in [("feature_match", fm), ("perceptual", perc), ("kld", kld), ("reg", reg)] {
        if v < -NEGATIVE_TOLERANCE * v.abs().max(1.0) {
            return Err(Error::invalid(format!("loss term {name} is negative ({v:e})")));
        }
    }
    let mut total: Option<Tensor> = None;
    let reg_term = parts.reg.as_ref();
    for (t, w) in [
        (Some(&parts.gan), weights.adversarial),
        (Some(&parts.feature_match), weights.feature_matching),
        (Some(&parts.perceptual), weights.perceptual),
        (Some(&parts.kld), weights.kld),
        (reg_term, weights.regularization),
    ] {
        if let (Some(t), true) = (t, w != 0.0) {
            let scaled = (t * w)?;
            total = Some(match total {
                Some(acc) => (acc + scaled)?,
                None => scaled,
            });
        }
    }
    let total = match total {
        Some(t) => t,
        None => parts.gan.zeros_like()?.detach(),
    };
    let report = LossReport {
        gan,
        feature_match: fm,
        perceptual: perc,
        kld,
        reg,
        total: LossReport::compose(gan, fm, perc, kld, reg, weights),
        discriminator: f64::NAN,
    };
    Ok((total, report))
}
