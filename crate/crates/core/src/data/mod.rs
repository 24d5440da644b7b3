//! Annotations, images, splits, augmentation and the synthetic generator.

pub mod coco;
pub mod image;
pub mod skeleton;
pub mod split;
pub mod stats;
pub mod synth;
pub mod transform;

use serde::{Deserialize, Serialize};

pub use coco::{parse_annotations, BBox, Category, Dataset, ImageInfo, KeypointInstance};
pub use image::Image;
pub use skeleton::{SkeletonSpec, KEYPOINT_NAMES, LIMBS, NUM_KEYPOINTS};
pub use split::{split_dataset, Split, SplitAssignment};
pub use stats::{visibility_stats, VisibilityRow, VisibilityStats};
pub use synth::{synth_dataset, SynthDataset};
pub use transform::{augment, crop_and_normalize, Affine, AugmentPolicy, CropTransform};

/// One keypoint: position in pixels and visibility (0 invisible, 1 partial, 2 visible).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub v: u8,
}

impl Keypoint {
    pub fn new(x: f64, y: f64, v: u8) -> Self {
        Self { x, y, v }
    }

    pub fn is_labeled(&self) -> bool {
        self.v > 0
    }
}

/// SplitMix64 finalizer.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent per-item seed: `splitmix64(base + index · golden)`.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    splitmix64(base.wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}
