//! The 16-keypoint whole-body cattle scheme.
//!
//! Order (index: name): 0 head_top, 1 nose, 2 neck, 3 withers, 4 spine_mid,
//! 5 hip, 6 tail_base, 7 chest, 8 lf_knee, 9 lf_hoof, 10 rf_knee, 11 rf_hoof,
//! 12 lh_hock, 13 lh_hoof, 14 rh_hock, 15 rh_hoof. `l`/`r` are the animal's
//! left/right, `f`/`h` fore/hind limbs. This ordering is a repository
//! convention.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_KEYPOINTS: usize = 16;

pub const KEYPOINT_NAMES: [&str; NUM_KEYPOINTS] = [
    "head_top", "nose", "neck", "withers", "spine_mid", "hip", "tail_base", "chest", "lf_knee", "lf_hoof", "rf_knee",
    "rf_hoof", "lh_hock", "lh_hoof", "rh_hock", "rh_hoof",
];

/// Limb edges as keypoint index pairs, used for rendering.
pub const LIMBS: [(usize, usize); 15] = [
    (0, 1),
    (0, 2),
    (2, 3),
    (3, 4),
    (4, 5),
    (5, 6),
    (2, 7),
    (7, 8),
    (8, 9),
    (7, 10),
    (10, 11),
    (5, 12),
    (12, 13),
    (5, 14),
    (14, 15),
];

pub const DEFAULT_SIGMA: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkeletonSpec {
    pub names: Vec<String>,
    pub limbs: Vec<(usize, usize)>,
    /// Per-keypoint OKS falloff `k_i`.
    pub sigmas: Vec<f64>,
}

impl Default for SkeletonSpec {
    fn default() -> Self {
        Self {
            names: KEYPOINT_NAMES.iter().map(|s| s.to_string()).collect(),
            limbs: LIMBS.to_vec(),
            sigmas: vec![DEFAULT_SIGMA; NUM_KEYPOINTS],
        }
    }
}

impl SkeletonSpec {
    pub fn validate(&self) -> Result<()> {
        if self.names.len() != NUM_KEYPOINTS || self.sigmas.len() != NUM_KEYPOINTS {
            return Err(Error::Config(format!(
                "skeleton needs exactly {NUM_KEYPOINTS} names and sigmas, got {} and {}",
                self.names.len(),
                self.sigmas.len()
            )));
        }
        if let Some(s) = self.sigmas.iter().find(|s| !(**s > 0.0)) {
            return Err(Error::Config(format!("keypoint sigmas must be positive, got {s}")));
        }
        if let Some(l) = self.limbs.iter().find(|(a, b)| *a >= NUM_KEYPOINTS || *b >= NUM_KEYPOINTS) {
            return Err(Error::Config(format!("limb {l:?} references a keypoint outside 0..{NUM_KEYPOINTS}")));
        }
        Ok(())
    }

    /// Reads a JSON override of the form `{"sigmas": [...16 values...]}`.
    pub fn with_sigma_file(mut self, text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Override {
            sigmas: Vec<f64>,
        }
        let o: Override = serde_json::from_str(text)?;
        self.sigmas = o.sigmas;
        self.validate()?;
        Ok(self)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}
