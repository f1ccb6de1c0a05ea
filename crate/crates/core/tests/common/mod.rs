#![allow(dead_code)]

use sian_core::config::{AugmentParams, Config};
use sian_core::network::NetworkConfig;

/// 16x16 network small enough for multi-step tests in seconds.
pub fn tiny_network() -> NetworkConfig {
    NetworkConfig {
        image_size: 16,
        style_dim: 8,
        channels: vec![16, 8, 8],
        sian_hidden: 4,
        encoder_width: 4,
        disc_width: 4,
        disc_layers: 2,
        disc_scales: 2,
        ..NetworkConfig::desk()
    }
}

pub fn tiny_config() -> Config {
    let mut cfg = Config {
        network: tiny_network(),
        ..Config::default()
    };
    cfg.train.batch_size = 2;
    cfg.train.epochs = 2;
    cfg.train.holdout_fraction = 0.25;
    cfg.augment = AugmentParams::default();
    cfg
}

use ndarray::{s, Array2};
use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use sian_core::mask::InstanceMask;
use sian_core::metrics::Matching;

/// Up to six axis-aligned boxes on a `size` x `size` canvas; later boxes
/// overwrite earlier ones.
pub fn random_boxes(rng: &mut ChaCha8Rng, size: usize) -> InstanceMask {
    let mut l = Array2::<u32>::zeros((size, size));
    let k = rng.random_range(0..7u32);
    for id in 1..=k {
        let (y, x) = (rng.random_range(0..size - 4), rng.random_range(0..size - 4));
        let (h, w) = (rng.random_range(2..10usize), rng.random_range(2..10usize));
        l.slice_mut(s![y..(y + h).min(size), x..(x + w).min(size)]).fill(id);
    }
    InstanceMask::new(l).unwrap()
}

/// Shifts a mask down/right by up to two pixels.
pub fn jitter(m: &InstanceMask, rng: &mut ChaCha8Rng) -> InstanceMask {
    let (dy, dx) = (rng.random_range(0..3usize), rng.random_range(0..3usize));
    let src = m.labels();
    let (h, w) = src.dim();
    let mut l = Array2::<u32>::zeros((h, w));
    for y in dy..h {
        for x in dx..w {
            l[(y, x)] = src[(y - dy, x - dx)];
        }
    }
    InstanceMask::new(l).unwrap()
}

/// Every (gt, pred) pair scored by counting pixels directly.
pub fn brute_force_matching(gt: &InstanceMask, pred: &InstanceMask) -> Matching {
    let g = gt.labels();
    let p = pred.labels();
    let mut pairs = Vec::new();
    for gi in gt.instance_ids() {
        for pi in pred.instance_ids() {
            let mut inter = 0u64;
            let mut union = 0u64;
            for (a, b) in g.iter().zip(p.iter()) {
                let (x, y) = (*a == gi, *b == pi);
                inter += (x && y) as u64;
                union += (x || y) as u64;
            }
            let iou = inter as f64 / union as f64;
            if iou > 0.5 {
                pairs.push((gi, pi, iou));
            }
        }
    }
    let unmatched_gt = gt.instance_ids().into_iter().filter(|i| !pairs.iter().any(|p| p.0 == *i)).collect();
    let unmatched_pred = pred.instance_ids().into_iter().filter(|i| !pairs.iter().any(|p| p.1 == *i)).collect();
    pairs.sort_by_key(|p| p.0);
    Matching {
        pairs,
        unmatched_gt,
        unmatched_pred,
    }
}

/// Whether two matchings agree, IoUs within `tol`.
pub fn same_matching(a: &Matching, b: &Matching, tol: f64) -> bool {
    a.pairs.len() == b.pairs.len()
        && a.pairs.iter().zip(&b.pairs).all(|(x, y)| x.0 == y.0 && x.1 == y.1 && (x.2 - y.2).abs() <= tol)
        && a.unmatched_gt == b.unmatched_gt
        && a.unmatched_pred == b.unmatched_pred
}
