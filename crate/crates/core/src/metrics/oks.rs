//! Object keypoint similarity.

use crate::data::{KeypointInstance, SkeletonSpec};
use crate::error::{Error, Result};

/// Scale, per-keypoint falloff and visibility of one ground-truth instance.
#[derive(Clone, Debug, PartialEq)]
pub struct OksContext {
    /// Object scale `s²` in pixels².
    pub area: f64,
    pub sigmas: Vec<f64>,
    pub visibility: Vec<u8>,
}

impl OksContext {
    pub fn new(area: f64, sigmas: Vec<f64>, visibility: Vec<u8>) -> Result<Self> {
        if !(area > 0.0) || !area.is_finite() {
            return Err(Error::InvalidArgument(format!("OKS scale s² must be positive, got {area}")));
        }
        if let Some(k) = sigmas.iter().find(|k| !(**k > 0.0)) {
            return Err(Error::InvalidArgument(format!("OKS sigmas must be positive, got {k}")));
        }
        if sigmas.len() != visibility.len() {
            return Err(Error::InvalidArgument(format!(
                "{} sigmas for {} keypoints",
                sigmas.len(),
                visibility.len()
            )));
        }
        Ok(Self { area, sigmas, visibility })
    }

    /// Context of a dataset instance; the scale is [`KeypointInstance::scale_area`].
    pub fn for_instance(inst: &KeypointInstance, skeleton: &SkeletonSpec) -> Result<Self> {
        Self::new(inst.scale_area(), skeleton.sigmas.clone(), inst.keypoints.iter().map(|k| k.v).collect())
    }

    pub fn num_visible(&self) -> usize {
        self.visibility.iter().filter(|&&v| v > 0).count()
    }
}

/// `Σ exp(−dᵢ² / (2 s² kᵢ²)) · [vᵢ > 0] / Σ [vᵢ > 0]`.
pub fn oks(pred: &[(f64, f64)], gt: &[(f64, f64)], ctx: &OksContext) -> Result<f64> {
    let k = ctx.visibility.len();
    if pred.len() != k || gt.len() != k {
        return Err(Error::InvalidArgument(format!(
            "OKS needs {k} keypoints, got {} predicted and {} ground truth",
            pred.len(),
            gt.len()
        )));
    }
    let visible = ctx.num_visible();
    if visible == 0 {
        return Err(Error::InvalidArgument("OKS is undefined for an instance without visible keypoints".into()));
    }
    let mut sum = 0.0;
    for i in 0..k {
        if ctx.visibility[i] == 0 {
            continue;
        }
        let (dx, dy) = (pred[i].0 - gt[i].0, pred[i].1 - gt[i].1);
        let d2 = dx * dx + dy * dy;
        let denom = 2.0 * ctx.area * ctx.sigmas[i] * ctx.sigmas[i];
        sum += (-d2 / denom).exp();
    }
    Ok(sum / visible as f64)
}
