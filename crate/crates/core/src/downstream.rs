//! Synthetic-augmentation experiment: a small three-class segmenter trained
//! with and without generated image/mask pairs, scored by DQ/SQ/PQ.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{AugmentParams, MaskgenParams, SegParams};
use crate::data::{augment, DatasetItem};
use crate::error::{Error, Result};
use crate::mask::{connected_components, InstanceMask};
use crate::maskgen::{derive_seed, generate_instance_mask};
use crate::metrics::{match_instances, PanopticCounts, PanopticScores};
use crate::network::array_batch_to_tensor;
use crate::nn::{leaky_relu, scalar, upsample2x, Adam, Conv2d, ParamStore};
use crate::synthesize::{StoredStyle, StyleSource, Synthesizer};

pub const BACKGROUND: u8 = 0;
pub const INTERIOR: u8 = 1;
pub const BOUNDARY: u8 = 2;
pub const NUM_CLASSES: usize = 3;

/// Boundary = instance pixels with a 4-neighbor of another label or
/// background; pixels beyond the image edge do not count as different.
pub fn masks_to_seg_targets(inst: &InstanceMask) -> Array2<u8> {
    let l = inst.labels();
    let (h, w) = l.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let v = l[(y, x)];
        if v == 0 {
            return BACKGROUND;
        }
        let differs = |yy: usize, xx: usize| l[(yy, xx)] != v;
        let edge = (y > 0 && differs(y - 1, x))
            || (y + 1 < h && differs(y + 1, x))
            || (x > 0 && differs(y, x - 1))
            || (x + 1 < w && differs(y, x + 1));
        if edge {
            BOUNDARY
        } else {
            INTERIOR
        }
    })
}

/// Interior components (4-connected, numbered in raster order of their
/// first pixel) grown once into boundary pixels. A boundary pixel joins a
/// 4-adjacent component if it has one, else an 8-adjacent one; among
/// equals the lowest-numbered (first-claimed) component wins.
pub fn instances_from_seg(pred: &Array2<u8>) -> InstanceMask {
    let (h, w) = pred.dim();
    let interior = pred.mapv(|c| c == INTERIOR);
    let comps = connected_components(interior.view(), |a, b| a && b);
    let mut out = comps.clone();
    for y in 0..h {
        for x in 0..w {
            if pred[(y, x)] != BOUNDARY {
                continue;
            }
            let mut best: Option<(u8, u32)> = None;
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                        continue;
                    }
                    let lab = comps[(yy as usize, xx as usize)];
                    if lab == 0 {
                        continue;
                    }
                    let rank = (if dy == 0 || dx == 0 { 0 } else { 1 }, lab);
                    if best.is_none_or(|b| rank < b) {
                        best = Some(rank);
                    }
                }
            }
            if let Some((_, lab)) = best {
                out[(y, x)] = lab;
            }
        }
    }
    InstanceMask::new(out).expect("non-empty grid")
}

/// Compact encoder-decoder: two full-resolution convs, a strided pair at
/// half resolution, nearest upsampling with a skip connection, and a
/// pointwise classifier.
pub struct Segmenter {
    pub store: ParamStore,
    enc1: Conv2d,
    enc2: Conv2d,
    down: Conv2d,
    mid: Conv2d,
    dec: Conv2d,
    head: Conv2d,
}

impl Segmenter {
    pub fn new(width: usize, seed: u64) -> Result<Self> {
        if width == 0 {
            return Err(Error::Config("segmenter width must be positive".into()));
        }
        let mut s = ParamStore::new(DType::F32, seed);
        let enc1 = Conv2d::same3(&mut s, "seg.enc1", 3, width)?;
        let enc2 = Conv2d::same3(&mut s, "seg.enc2", width, width)?;
        let down = Conv2d::new(&mut s, "seg.down", width, 2 * width, 3, 2, 1, true)?;
        let mid = Conv2d::same3(&mut s, "seg.mid", 2 * width, 2 * width)?;
        let dec = Conv2d::same3(&mut s, "seg.dec", 3 * width, width)?;
        let head = Conv2d::pointwise(&mut s, "seg.head", width, NUM_CLASSES)?;
        Ok(Self {
            store: s,
            enc1,
            enc2,
            down,
            mid,
            dec,
            head,
        })
    }

    /// Class logits (N, 3, H, W) for images (N, 3, H, W) with even sides.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("even image sides", format!("{h}x{w}")));
        }
        let a = leaky_relu(&self.enc1.forward(x)?, 0.1)?;
        let a = leaky_relu(&self.enc2.forward(&a)?, 0.1)?;
        let b = leaky_relu(&self.down.forward(&a)?, 0.1)?;
        let b = leaky_relu(&self.mid.forward(&b)?, 0.1)?;
        let up = upsample2x(&b)?;
        let c = leaky_relu(&self.dec.forward(&Tensor::cat(&[&up, &a], 1)?)?, 0.1)?;
        self.head.forward(&c)
    }

    pub fn predict(&self, image: &Array3<f32>) -> Result<Array2<u8>> {
        let x = array_batch_to_tensor(&[image], DType::F32)?;
        let cls = self.forward(&x)?.argmax(1)?.squeeze(0)?.to_dtype(DType::U32)?;
        let (h, w) = cls.dims2()?;
        let v = cls.flatten_all()?.to_vec1::<u32>()?;
        Ok(Array2::from_shape_vec((h, w), v.into_iter().map(|c| c as u8).collect()).expect("length matches"))
    }
}

/// Mean pixelwise cross-entropy of logits (N, C, H, W) against class maps.
pub fn cross_entropy(logits: &Tensor, targets: &[&Array2<u8>]) -> Result<Tensor> {
    let (n, c, h, w) = logits.dims4()?;
    if targets.len() != n {
        return Err(Error::shape(format!("{n} targets"), format!("{}", targets.len())));
    }
    let mut onehot = vec![0f32; n * c * h * w];
    for (b, t) in targets.iter().enumerate() {
        if t.dim() != (h, w) {
            return Err(Error::shape(format!("{h}x{w} target"), format!("{:?}", t.dim())));
        }
        for ((y, x), &k) in t.indexed_iter() {
            onehot[((b * c + k as usize) * h + y) * w + x] = 1.0;
        }
    }
    let onehot = Tensor::from_vec(onehot, (n, c, h, w), &Device::Cpu)?.to_dtype(logits.dtype())?;
    let max = logits.max_keepdim(1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(1)?.log()?;
    let log_prob = shifted.broadcast_sub(&lse)?;
    let picked = (log_prob * onehot)?.sum_all()?;
    Ok((picked * (-1.0 / (n * h * w) as f64))?)
}

/// Trains a fresh segmenter on `items`. Classic augmentation is drawn per
/// item from `(epoch, position)` seeds when `augment` is given.
pub fn train_segmenter(items: &[DatasetItem], params: &SegParams, augment_params: Option<&AugmentParams>) -> Result<Segmenter> {
    if items.is_empty() {
        return Err(Error::invalid("segmenter training set is empty"));
    }
    let seg = Segmenter::new(params.width, params.seed)?;
    let mut opt = Adam::new(params.lr, 0.9, 0.999);
    let mut order: Vec<usize> = (0..items.len()).collect();
    for epoch in 0..params.epochs {
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(params.seed, epoch)));
        for (bi, chunk) in order.chunks(params.batch_size).enumerate() {
            let batch: Vec<DatasetItem> = chunk
                .iter()
                .enumerate()
                .map(|(j, &i)| match augment_params {
                    Some(a) => {
                        let pos = (bi * params.batch_size + j) as u64;
                        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(params.seed ^ 0xA6, epoch), pos));
                        augment(&items[i], &mut rng, a)
                    }
                    None => items[i].clone(),
                })
                .collect();
            let images: Vec<&Array3<f32>> = batch.iter().map(|b| &b.image).collect();
            let targets: Vec<Array2<u8>> = batch.iter().map(|b| masks_to_seg_targets(&b.mask)).collect();
            let x = array_batch_to_tensor(&images, DType::F32)?;
            let loss = cross_entropy(&seg.forward(&x)?, &targets.iter().collect::<Vec<_>>())?;
            if !scalar(&loss)?.is_finite() {
                return Err(Error::NonFinite("segmenter cross-entropy".into()));
            }
            let grads = loss.backward()?;
            opt.step(&seg.store, &grads, &["seg."])?;
        }
    }
    Ok(seg)
}

/// Pooled panoptic scores of `seg` on `test`.
pub fn evaluate_segmenter(seg: &Segmenter, test: &[DatasetItem]) -> Result<PanopticScores> {
    let mut counts = PanopticCounts::default();
    for item in test {
        let pred = instances_from_seg(&seg.predict(&item.image)?);
        counts.add(&PanopticCounts::from_matching(&match_instances(&item.mask, &pred)?));
    }
    Ok(counts.scores())
}

/// Generated pairs: for each organ of `real`, `per_organ` new masks, each
/// rendered with one of up to `styles_per_organ` encoded reference styles.
pub fn synthesize_set(
    synth: &Synthesizer,
    real: &[DatasetItem],
    per_organ: usize,
    styles_per_organ: usize,
    maskgen: &MaskgenParams,
    seed: u64,
) -> Result<Vec<DatasetItem>> {
    if per_organ == 0 {
        return Ok(Vec::new());
    }
    if styles_per_organ == 0 {
        return Err(Error::Config("segmenter.styles_per_organ must be positive".into()));
    }
    let size = synth.image_size();
    let mut by_organ: BTreeMap<&str, Vec<&DatasetItem>> = BTreeMap::new();
    for it in real {
        by_organ.entry(it.organ.as_str()).or_default().push(it);
    }
    let mut layout = maskgen.layout.clone();
    layout.canvas = (size, size);
    let mut out = Vec::new();
    for (oi, (organ, refs)) in by_organ.iter().enumerate() {
        let styles = refs
            .iter()
            .take(styles_per_organ)
            .map(|r| synth.encode(&r.image))
            .collect::<Result<Vec<StoredStyle>>>()?;
        for k in 0..per_organ {
            let s = derive_seed(derive_seed(seed, oi as u64), k as u64);
            layout.seed = s;
            let mask = generate_instance_mask(&mut ChaCha8Rng::seed_from_u64(s), &layout, &maskgen.nucleus)?.mask;
            let image = synth.synthesize(StyleSource::Stored(&styles[k % styles.len()]), &mask, None)?;
            out.push(DatasetItem::new(image, mask, *organ, format!("synth_{organ}_{k:04}"))?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub setting: String,
    pub train_images: usize,
    pub dq: f64,
    pub sq: f64,
    pub pq: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub test_images: usize,
    pub synthetic_images: usize,
    pub rows: Vec<ExperimentRow>,
}

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("setting,train_images,dq,sq,pq\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{:.6},{:.6},{:.6}", r.setting, r.train_images, r.dq, r.sq, r.pq);
        }
        out
    }
}

pub const SETTING_REAL: &str = "real";
pub const SETTING_CLASSIC: &str = "real+classic";
pub const SETTING_SYNTHETIC: &str = "real+classic+synthetic";

/// Trains the segmenter on real data, real data with classic augmentation,
/// and real plus synthetic data with classic augmentation, then scores each
/// on `test`. Every row starts from the same initialization and schedule.
pub fn run_augmentation_experiment(
    real_train: &[DatasetItem],
    synthetic: &[DatasetItem],
    test: &[DatasetItem],
    params: &SegParams,
    classic: &AugmentParams,
) -> Result<ExperimentReport> {
    if test.is_empty() {
        return Err(Error::invalid("test set is empty"));
    }
    let mut rows = Vec::with_capacity(3);
    let mixed: Vec<DatasetItem> = real_train.iter().chain(synthetic).cloned().collect();
    for (name, set, aug) in [
        (SETTING_REAL, real_train, None),
        (SETTING_CLASSIC, real_train, Some(classic)),
        (SETTING_SYNTHETIC, mixed.as_slice(), Some(classic)),
    ] {
        let seg = train_segmenter(set, params, aug)?;
        let s = evaluate_segmenter(&seg, test)?;
        log::info!("{name}: dq {:.4} sq {:.4} pq {:.4}", s.dq, s.sq, s.pq);
        rows.push(ExperimentRow {
            setting: name.to_string(),
            train_images: set.len(),
            dq: s.dq,
            sq: s.sq,
            pq: s.pq,
        });
    }
    Ok(ExperimentReport {
        test_images: test.len(),
        synthetic_images: synthetic.len(),
        rows,
    })
}
