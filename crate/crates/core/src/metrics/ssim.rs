use ndarray::{Array2, ArrayView2, ArrayView3};

use crate::error::{Error, Result};

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
fn gaussian_taps() -> [f64; WINDOW] {
    let mut taps = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - c;
        *t = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Separable Gaussian filter keeping only fully covered positions.
fn filter_valid(x: &Array2<f64>, taps: &[f64; WINDOW]) -> Array2<f64> {
    let (h, w) = x.dim();
    let (ho, wo) = (h + 1 - WINDOW, w + 1 - WINDOW);
    let mut rows = Array2::<f64>::zeros((h, wo));
    for y in 0..h {
        for xo in 0..wo {
            rows[(y, xo)] = (0..WINDOW).map(|k| taps[k] * x[(y, xo + k)]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((ho, wo));
    for yo in 0..ho {
        for xo in 0..wo {
            out[(yo, xo)] = (0..WINDOW).map(|k| taps[k] * rows[(yo + k, xo)]).sum();
        }
    }
    out
}

/// Mean local SSIM of two single-channel images with dynamic range `range`.
pub fn ssim_channel(x: ArrayView2<'_, f32>, y: ArrayView2<'_, f32>, range: f64) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(Error::shape(format!("{:?}", x.dim()), format!("{:?}", y.dim())));
    }
    let (h, w) = x.dim();
    if h < WINDOW || w < WINDOW {
        return Err(Error::invalid(format!("SSIM needs images of at least {WINDOW}x{WINDOW}, got {h}x{w}")));
    }
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let taps = gaussian_taps();
    let xf = x.mapv(f64::from);
    let yf = y.mapv(f64::from);
    let mx = filter_valid(&xf, &taps);
    let my = filter_valid(&yf, &taps);
    let sxx = filter_valid(&(&xf * &xf), &taps);
    let syy = filter_valid(&(&yf * &yf), &taps);
    let sxy = filter_valid(&(&xf * &yf), &taps);
    let mut total = 0.0;
    for (((&mx, &my), (&sxx, &syy)), &sxy) in mx.iter().zip(&my).zip(sxx.iter().zip(&syy)).zip(&sxy) {
        let vx = sxx - mx * mx;
        let vy = syy - my * my;
        let cov = sxy - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    Ok(total / mx.len() as f64)
}

/// SSIM of (C, H, W) images averaged over channels.
pub fn ssim(x: ArrayView3<'_, f32>, y: ArrayView3<'_, f32>, range: f64) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(Error::shape(format!("{:?}", x.dim()), format!("{:?}", y.dim())));
    }
    let c = x.dim().0;
    if c == 0 {
        return Err(Error::invalid("image has no channels"));
    }
    let mut total = 0.0;
    for (xc, yc) in x.outer_iter().zip(y.outer_iter()) {
        total += ssim_channel(xc, yc, range)?;
    }
    Ok(total / c as f64)
}

/// SSIM of images stored in `[-1, 1]`, evaluated on the `[0, 1]` rescaling.
pub fn ssim_signed(x: ArrayView3<'_, f32>, y: ArrayView3<'_, f32>) -> Result<f64> {
    let to_unit = |a: ArrayView3<'_, f32>| a.mapv(|v| (v + 1.0) * 0.5);
    ssim(to_unit(x).view(), to_unit(y).view(), 1.0)
}
