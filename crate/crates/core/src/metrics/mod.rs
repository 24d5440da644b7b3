//! OKS, COCO-style AP/AR and PCK.

pub mod ap;
pub mod oks;
pub mod results;

pub use ap::{ap_ar, greedy_match, interpolated_ap, Detection, EvalParams, MetricsReport, ThresholdResult};
pub use oks::{oks, OksContext};
pub use results::{parse_coco_results, to_coco_results};

use crate::data::{BBox, Keypoint};
use crate::error::{Error, Result};

/// Hits and visible keypoints for PCK: `‖pred − gt‖ ≤ alpha · max(w, h)` (inclusive).
pub fn pck_counts(pred: &[(f64, f64)], gt: &[Keypoint], bbox: &BBox, alpha: f64) -> Result<(usize, usize)> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidArgument(format!("PCK alpha must lie in (0, 1], got {alpha}")));
    }
    if pred.len() != gt.len() {
        return Err(Error::InvalidArgument(format!("{} predictions for {} keypoints", pred.len(), gt.len())));
    }
    let radius = alpha * bbox.w.max(bbox.h);
    let mut hits = 0;
    let mut total = 0;
    for (p, g) in pred.iter().zip(gt).filter(|(_, g)| g.is_labeled()) {
        total += 1;
        if (p.0 - g.x).hypot(p.1 - g.y) <= radius {
            hits += 1;
        }
    }
    Ok((hits, total))
}

/// Fraction of visible keypoints within `alpha · max(w, h)` of the truth.
pub fn pck(pred: &[(f64, f64)], gt: &[Keypoint], bbox: &BBox, alpha: f64) -> Result<f64> {
    let (hits, total) = pck_counts(pred, gt, bbox, alpha)?;
    if total == 0 {
        return Err(Error::InvalidArgument("PCK is undefined without visible keypoints".into()));
    }
    Ok(hits as f64 / total as f64)
}
