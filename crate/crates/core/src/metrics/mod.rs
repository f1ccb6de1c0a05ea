//! Image-quality (SSIM, FID) and instance-segmentation (DQ, SQ, PQ) metrics.

mod fid;
mod panoptic;
mod ssim;

pub use fid::{embed_set, fid, GaussianStats};
pub use panoptic::{match_instances, pq_metrics, Matching, PanopticCounts, PanopticScores};
pub use ssim::{ssim, ssim_channel, ssim_signed, SIGMA, WINDOW};

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extractor::FeatureExtractor;
use crate::mask::InstanceMask;

/// Scores for one group of images. FID is absent when the group holds fewer
/// than two images; panoptic scores are absent when no predicted masks were
/// supplied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub count: usize,
    pub fid: Option<f64>,
    pub ssim: f64,
    pub dq: Option<f64>,
    pub sq: Option<f64>,
    pub pq: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Identity of the embedder behind the FID values.
    pub extractor: String,
    pub overall: GroupReport,
    pub organs: BTreeMap<String, GroupReport>,
}

/// Inputs of [`evaluate_sets`]. Images are (3, H, W) in `[-1, 1]`.
pub struct EvalSets<'a> {
    pub real: &'a [Array3<f32>],
    pub fake: &'a [Array3<f32>],
    pub gt_masks: &'a [InstanceMask],
    pub pred_masks: Option<&'a [InstanceMask]>,
    pub organs: Option<&'a [String]>,
}

pub fn evaluate_sets(sets: &EvalSets<'_>, extractor: &FeatureExtractor) -> Result<MetricReport> {
    let n = sets.real.len();
    if n == 0 {
        return Err(Error::invalid("cannot evaluate an empty set"));
    }
    if sets.fake.len() != n {
        return Err(Error::invalid(format!("{n} real images but {} generated", sets.fake.len())));
    }
    if let Some(pred) = sets.pred_masks {
        if sets.gt_masks.len() != n || pred.len() != n {
            return Err(Error::invalid(format!(
                "{n} images but {} ground-truth and {} predicted masks",
                sets.gt_masks.len(),
                pred.len()
            )));
        }
    }
    if let Some(org) = sets.organs {
        if org.len() != n {
            return Err(Error::invalid(format!("{n} images but {} organ tags", org.len())));
        }
    }
    let ssims = sets
        .real
        .iter()
        .zip(sets.fake)
        .map(|(r, f)| ssim_signed(r.view(), f.view()))
        .collect::<Result<Vec<_>>>()?;
    let counts = match sets.pred_masks {
        Some(pred) => Some(
            sets.gt_masks
                .iter()
                .zip(pred)
                .map(|(g, p)| Ok(PanopticCounts::from_matching(&match_instances(g, p)?)))
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };
    let group = |idx: &[usize]| -> Result<GroupReport> {
        let pick = |set: &[Array3<f32>]| idx.iter().map(|&i| set[i].clone()).collect::<Vec<_>>();
        let fid_value = if idx.len() >= 2 {
            let a = embed_set(&pick(sets.real), extractor)?;
            let b = embed_set(&pick(sets.fake), extractor)?;
            Some(fid(&a, &b)?)
        } else {
            None
        };
        let ssim_mean = idx.iter().map(|&i| ssims[i]).sum::<f64>() / idx.len() as f64;
        let scores = counts.as_ref().map(|c| {
            let mut pooled = PanopticCounts::default();
            for &i in idx {
                pooled.add(&c[i]);
            }
            pooled.scores()
        });
        Ok(GroupReport {
            count: idx.len(),
            fid: fid_value,
            ssim: ssim_mean,
            dq: scores.map(|s| s.dq),
            sq: scores.map(|s| s.sq),
            pq: scores.map(|s| s.pq),
        })
    };
    let all: Vec<usize> = (0..n).collect();
    let overall = group(&all)?;
    let mut organs = BTreeMap::new();
    if let Some(tags) = sets.organs {
        let mut by_organ: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, t) in tags.iter().enumerate() {
            by_organ.entry(t.as_str()).or_default().push(i);
        }
        for (tag, idx) in by_organ {
            organs.insert(tag.to_string(), group(&idx)?);
        }
    }
    Ok(MetricReport {
        extractor: extractor.identity.clone(),
        overall,
        organs,
    })
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row for the whole set (`organ = all`) and one per organ tag.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("organ,count,fid,ssim,dq,sq,pq\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut row = |name: &str, g: &GroupReport| {
            let _ = writeln!(
                out,
                "{name},{},{},{:.6},{},{},{}",
                g.count,
                opt(g.fid),
                g.ssim,
                opt(g.dq),
                opt(g.sq),
                opt(g.pq)
            );
        };
        row("all", &self.overall);
        for (tag, g) in &self.organs {
            row(tag, g);
        }
        out
    }

    /// Checks the documented ranges and the PQ = DQ * SQ identity.
    pub fn check_invariants(&self) -> Result<()> {
        for (name, g) in std::iter::once(("all", &self.overall)).chain(self.organs.iter().map(|(k, v)| (k.as_str(), v))) {
            let bad = |what: &str| Err(Error::invalid(format!("report entry {name}: {what}")));
            if !(-1.0..=1.0).contains(&g.ssim) {
                return bad("ssim outside [-1, 1]");
            }
            if g.fid.is_some_and(|f| f.is_nan() || f < 0.0) {
                return bad("negative fid");
            }
            for v in [g.dq, g.sq, g.pq].into_iter().flatten() {
                if !(0.0..=1.0).contains(&v) {
                    return bad("panoptic score outside [0, 1]");
                }
            }
            if let (Some(dq), Some(sq), Some(pq)) = (g.dq, g.sq, g.pq) {
                if (pq - dq * sq).abs() > 1e-9 {
                    return bad("pq != dq * sq");
                }
            }
        }
        Ok(())
    }
}
