use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::InstanceMask;

/// IoU-above-one-half correspondence between ground-truth and predicted
/// instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matching {
    /// `(gt_id, pred_id, iou)`, sorted by `gt_id`.
    pub pairs: Vec<(u32, u32, f64)>,
    pub unmatched_gt: Vec<u32>,
    pub unmatched_pred: Vec<u32>,
}

/// Matches every instance pair whose IoU exceeds 0.5. Such a pair is unique
/// for each instance, so no assignment search is needed.
pub fn match_instances(gt: &InstanceMask, pred: &InstanceMask) -> Result<Matching> {
    if gt.labels().dim() != pred.labels().dim() {
        return Err(Error::shape(
            format!("{:?}", gt.labels().dim()),
            format!("{:?}", pred.labels().dim()),
        ));
    }
    let mut gt_area: BTreeMap<u32, u64> = BTreeMap::new();
    let mut pred_area: BTreeMap<u32, u64> = BTreeMap::new();
    let mut inter: BTreeMap<(u32, u32), u64> = BTreeMap::new();
    for (&g, &p) in gt.labels().iter().zip(pred.labels().iter()) {
        if g > 0 {
            *gt_area.entry(g).or_default() += 1;
        }
        if p > 0 {
            *pred_area.entry(p).or_default() += 1;
        }
        if g > 0 && p > 0 {
            *inter.entry((g, p)).or_default() += 1;
        }
    }
    let mut pairs = Vec::new();
    for (&(g, p), &i) in &inter {
        let union = gt_area[&g] + pred_area[&p] - i;
        // IoU > 1/2  <=>  2 * intersection > union, decided in integers
        if 2 * i > union {
            pairs.push((g, p, i as f64 / union as f64));
        }
    }
    let matched_gt: Vec<u32> = pairs.iter().map(|p| p.0).collect();
    let matched_pred: std::collections::BTreeSet<u32> = pairs.iter().map(|p| p.1).collect();
    Ok(Matching {
        unmatched_gt: gt_area.keys().copied().filter(|g| !matched_gt.contains(g)).collect(),
        unmatched_pred: pred_area.keys().copied().filter(|p| !matched_pred.contains(p)).collect(),
        pairs,
    })
}

/// Additive TP/FP/FN tallies so panoptic scores can be pooled over a set.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PanopticCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub iou_sum: f64,
}

impl PanopticCounts {
    pub fn from_matching(m: &Matching) -> Self {
        Self {
            tp: m.pairs.len() as u64,
            fp: m.unmatched_pred.len() as u64,
            fn_: m.unmatched_gt.len() as u64,
            iou_sum: m.pairs.iter().map(|p| p.2).sum(),
        }
    }

    pub fn add(&mut self, other: &Self) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.iou_sum += other.iou_sum;
    }

    pub fn scores(&self) -> PanopticScores {
        if self.tp + self.fp + self.fn_ == 0 {
            log::info!("no instances on either side; panoptic scores set to 1 by convention");
            return PanopticScores { dq: 1.0, sq: 1.0, pq: 1.0 };
        }
        let tp = self.tp as f64;
        let dq = tp / (tp + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64);
        let sq = if self.tp == 0 { 0.0 } else { self.iou_sum / tp };
        PanopticScores { dq, sq, pq: dq * sq }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PanopticScores {
    pub dq: f64,
    pub sq: f64,
    pub pq: f64,
}

pub fn pq_metrics(matching: &Matching) -> PanopticScores {
    PanopticCounts::from_matching(matching).scores()
}
