//! COCO-style keypoint AP/AR: greedy score-order matching and 101-point
//! interpolated precision.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::oks::{oks, OksContext};
use crate::data::{KeypointInstance, SkeletonSpec};
use crate::error::{Error, Result};

/// One predicted instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub image_id: u64,
    pub keypoints: Vec<(f64, f64)>,
    /// Confidence in `[0, 1]`.
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalParams {
    pub thresholds: Vec<f64>,
    pub max_dets: usize,
}

impl Default for EvalParams {
    /// OKS thresholds `0.50:0.05:0.95`, at most 20 detections per image.
    fn default() -> Self {
        Self { thresholds: (0..10).map(|i| f64::from(50 + 5 * i) / 100.0).collect(), max_dets: 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdResult {
    pub threshold: f64,
    pub ap: Option<f64>,
    pub recall: Option<f64>,
}

/// Summary keyed like the usual AP/AR table columns. `None` marks a value that
/// is undefined because there is no ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "AP")]
    pub ap: Option<f64>,
    #[serde(rename = "AP50")]
    pub ap50: Option<f64>,
    #[serde(rename = "AP75")]
    pub ap75: Option<f64>,
    #[serde(rename = "AR")]
    pub ar: Option<f64>,
    #[serde(rename = "AR50")]
    pub ar50: Option<f64>,
    #[serde(rename = "AR75")]
    pub ar75: Option<f64>,
    pub num_ground_truth: usize,
    pub num_detections: usize,
    pub max_dets: usize,
    pub per_threshold: Vec<ThresholdResult>,
}

impl MetricsReport {
    /// Flat `KEY value` lines.
    pub fn to_text(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "absent".to_string(), |x| format!("{x:.4}"));
        let mut out = String::new();
        for (k, v) in [
            ("AP", self.ap),
            ("AP50", self.ap50),
            ("AP75", self.ap75),
            ("AR", self.ar),
            ("AR50", self.ar50),
            ("AR75", self.ar75),
        ] {
            let _ = writeln!(out, "{k:<5} {}", fmt(v));
        }
        let _ = writeln!(out, "ground_truth {}", self.num_ground_truth);
        let _ = writeln!(out, "detections {}", self.num_detections);
        let _ = writeln!(out, "max_dets {}", self.max_dets);
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// 101-point interpolated AP of detections in rank order.
///
/// `tp[i]` tells whether the `i`-th ranked detection matched a ground truth.
pub fn interpolated_ap(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        precision.push(hits as f64 / (i + 1) as f64);
        recall.push(hits as f64 / num_gt as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let level = f64::from(r) / 100.0;
        let idx = recall.partition_point(|&x| x < level);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / 101.0
}

/// Greedy assignment on one image at one threshold.
///
/// `sim[d][g]` is the OKS of detection `d` (already in rank order) with ground
/// truth `g`. Each detection takes the unmatched ground truth with the highest
/// OKS ≥ `threshold`, lower index on ties. Returns the matched index per detection.
pub fn greedy_match(sim: &[Vec<f64>], num_gt: usize, threshold: f64) -> Vec<Option<usize>> {
    let mut taken = vec![false; num_gt];
    sim.iter()
        .map(|row| {
            let mut best: Option<usize> = None;
            for (g, &s) in row.iter().enumerate() {
                if !taken[g] && s >= threshold && best.is_none_or(|b| s > row[b]) {
                    best = Some(g);
                }
            }
            if let Some(b) = best {
                taken[b] = true;
            }
            best
        })
        .collect()
}

/// Ranks detections by descending score; equal scores keep input order.
fn rank(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    order
}

/// AP/AR over all images. Ground truths without visible keypoints are ignored.
pub fn ap_ar(dets: &[Detection], gts: &[KeypointInstance], skeleton: &SkeletonSpec, params: &EvalParams) -> Result<MetricsReport> {
    let k = skeleton.sigmas.len();
    for (i, d) in dets.iter().enumerate() {
        if !(0.0..=1.0).contains(&d.score) {
            return Err(Error::InvalidArgument(format!("detection {i} has score {} outside [0, 1]", d.score)));
        }
        if d.keypoints.len() != k {
            return Err(Error::InvalidArgument(format!("detection {i} has {} keypoints, expected {k}", d.keypoints.len())));
        }
    }
    if params.max_dets == 0 || params.thresholds.is_empty() {
        return Err(Error::InvalidArgument("evaluation needs max_dets ≥ 1 and at least one threshold".into()));
    }

    let mut gt_by_image: BTreeMap<u64, Vec<(&KeypointInstance, OksContext)>> = BTreeMap::new();
    for g in gts.iter().filter(|g| g.num_labeled() > 0) {
        if g.keypoints.len() != k {
            return Err(Error::InvalidArgument(format!("ground truth {} has {} keypoints, expected {k}", g.id, g.keypoints.len())));
        }
        gt_by_image.entry(g.image_id).or_default().push((g, OksContext::for_instance(g, skeleton)?));
    }
    let num_gt: usize = gt_by_image.values().map(Vec::len).sum();

    // Detections kept after the per-image cap, in global rank order.
    let order = rank(dets);
    let mut per_image_count: BTreeMap<u64, usize> = BTreeMap::new();
    let kept: Vec<usize> = order
        .into_iter()
        .filter(|&i| {
            let c = per_image_count.entry(dets[i].image_id).or_default();
            *c += 1;
            *c <= params.max_dets
        })
        .collect();

    // OKS rows per kept detection against its image's ground truths.
    let mut sims: BTreeMap<u64, Vec<(usize, Vec<f64>)>> = BTreeMap::new();
    for (rank_pos, &i) in kept.iter().enumerate() {
        let d = &dets[i];
        let row = match gt_by_image.get(&d.image_id) {
            Some(list) => list
                .iter()
                .map(|(g, ctx)| {
                    let gp: Vec<(f64, f64)> = g.keypoints.iter().map(|p| (p.x, p.y)).collect();
                    oks(&d.keypoints, &gp, ctx)
                })
                .collect::<Result<Vec<f64>>>()?,
            None => Vec::new(),
        };
        sims.entry(d.image_id).or_default().push((rank_pos, row));
    }

    let mut per_threshold = Vec::with_capacity(params.thresholds.len());
    for &t in &params.thresholds {
        let mut tp = vec![false; kept.len()];
        for (image, rows) in &sims {
            let n = gt_by_image.get(image).map_or(0, Vec::len);
            let matrix: Vec<Vec<f64>> = rows.iter().map(|(_, r)| r.clone()).collect();
            for ((pos, _), m) in rows.iter().zip(greedy_match(&matrix, n, t)) {
                tp[*pos] = m.is_some();
            }
        }
        let (ap, recall) = if num_gt == 0 {
            (None, None)
        } else {
            let hits = tp.iter().filter(|&&x| x).count();
            (Some(interpolated_ap(&tp, num_gt)), Some(hits as f64 / num_gt as f64))
        };
        per_threshold.push(ThresholdResult { threshold: t, ap, recall });
    }

    let mean = |f: fn(&ThresholdResult) -> Option<f64>| -> Option<f64> {
        let vals: Option<Vec<f64>> = per_threshold.iter().map(f).collect();
        vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
    };
    let at = |t: f64, f: fn(&ThresholdResult) -> Option<f64>| {
        per_threshold.iter().find(|r| (r.threshold - t).abs() < 1e-9).and_then(f)
    };
    Ok(MetricsReport {
        ap: mean(|r| r.ap),
        ap50: at(0.5, |r| r.ap),
        ap75: at(0.75, |r| r.ap),
        ar: mean(|r| r.recall),
        ar50: at(0.5, |r| r.recall),
        ar75: at(0.75, |r| r.recall),
        num_ground_truth: num_gt,
        num_detections: kept.len(),
        max_dets: params.max_dets,
        per_threshold,
    })
}
