//! Affine crops, normalization and geometric/occlusion augmentation.
//!
//! Coordinates are pixel-centre based: pixel `(i, j)` sits at `(i, j)`, so an
//! image of width `W` spans `[-0.5, W - 0.5]`. A box `(x, y, w, h)` covers the
//! pixel edges `[x, x + w]`, i.e. its centre is `x + w/2 - 0.5`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::coco::{BBox, KeypointInstance};
use super::image::Image;
use super::Keypoint;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-channel RGB mean and standard deviation on the 0–255 scale (ImageNet statistics).
pub const PIXEL_MEAN: [f64; 3] = [123.675, 116.28, 103.53];
pub const PIXEL_STD: [f64; 3] = [58.395, 57.12, 57.375];
/// Box enlargement before cropping.
pub const BBOX_PADDING: f64 = 1.25;

/// `p' = [a b; d e] p + [c; f]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub m: [[f64; 3]; 2],
}

impl Affine {
    pub const IDENTITY: Affine = Affine { m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]] };

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.m;
        (m[0][0] * x + m[0][1] * y + m[0][2], m[1][0] * x + m[1][1] * y + m[1][2])
    }

    pub fn inverse(&self) -> Result<Affine> {
        let [[a, b, c], [d, e, f]] = self.m;
        let det = a * e - b * d;
        if det.abs() < 1e-12 || !det.is_finite() {
            return Err(Error::InvalidArgument("affine transform is singular".into()));
        }
        let (ia, ib, id, ie) = (e / det, -b / det, -d / det, a / det);
        Ok(Affine { m: [[ia, ib, -(ia * c + ib * f)], [id, ie, -(id * c + ie * f)]] })
    }

    /// `self ∘ other`: applies `other` first.
    pub fn then_after(&self, other: &Affine) -> Affine {
        let [[a, b, c], [d, e, f]] = self.m;
        let [[p, q, r], [s, t, u]] = other.m;
        Affine { m: [[a * p + b * s, a * q + b * t, a * r + b * u + c], [d * p + e * s, d * q + e * t, d * r + e * u + f]] }
    }

    /// Scale `s` and rotation `theta` (radians) about `center`, then translation `shift`.
    pub fn similarity(center: (f64, f64), scale: f64, theta: f64, shift: (f64, f64)) -> Affine {
        let (cs, sn) = (scale * theta.cos(), scale * theta.sin());
        let (cx, cy) = center;
        Affine {
            m: [
                [cs, -sn, cx - cs * cx + sn * cy + shift.0],
                [sn, cs, cy - sn * cx - cs * cy + shift.1],
            ],
        }
    }

    pub fn map_keypoints(&self, kps: &[Keypoint]) -> Vec<Keypoint> {
        kps.iter()
            .map(|k| {
                if k.is_labeled() {
                    let (x, y) = self.apply(k.x, k.y);
                    Keypoint::new(x, y, k.v)
                } else {
                    *k
                }
            })
            .collect()
    }

    /// Axis-aligned hull of the mapped box corners.
    pub fn map_bbox(&self, b: &BBox) -> BBox {
        let (x0, y0, x1, y1) = (b.x - 0.5, b.y - 0.5, b.x + b.w - 0.5, b.y + b.h - 0.5);
        let pts = [self.apply(x0, y0), self.apply(x1, y0), self.apply(x0, y1), self.apply(x1, y1)];
        let (mut lx, mut ly, mut hx, mut hy) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for (x, y) in pts {
            lx = lx.min(x);
            ly = ly.min(y);
            hx = hx.max(x);
            hy = hy.max(y);
        }
        BBox::new(lx + 0.5, ly + 0.5, hx - lx, hy - ly)
    }
}

/// Maps between an image and a fixed-size crop of it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropTransform {
    pub to_crop: Affine,
    pub to_image: Affine,
    pub width: usize,
    pub height: usize,
}

impl CropTransform {
    /// Crop of `bbox` enlarged by [`BBOX_PADDING`] and widened to the `width:height` aspect.
    pub fn for_bbox(bbox: &BBox, width: usize, height: usize) -> Result<Self> {
        if !(bbox.w > 0.0 && bbox.h > 0.0) || !bbox.x.is_finite() || !bbox.y.is_finite() || !bbox.w.is_finite() || !bbox.h.is_finite() {
            return Err(Error::InvalidArgument(format!("degenerate bbox {bbox:?}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument("crop size must be positive".into()));
        }
        let (cx, cy) = (bbox.x + bbox.w / 2.0 - 0.5, bbox.y + bbox.h / 2.0 - 0.5);
        let (mut bw, mut bh) = (bbox.w * BBOX_PADDING, bbox.h * BBOX_PADDING);
        let aspect = width as f64 / height as f64;
        if bw > bh * aspect {
            bh = bw / aspect;
        } else {
            bw = bh * aspect;
        }
        let s = bw / width as f64;
        debug_assert!((bh / height as f64 - s).abs() < 1e-9 * s.max(1.0));
        let (ux, uy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
        let to_image = Affine { m: [[s, 0.0, cx - s * ux], [0.0, s, cy - s * uy]] };
        Ok(Self { to_crop: to_image.inverse()?, to_image, width, height })
    }

    pub fn keypoints_to_crop(&self, kps: &[Keypoint]) -> Vec<Keypoint> {
        self.to_crop.map_keypoints(kps)
    }

    pub fn keypoints_to_image(&self, kps: &[Keypoint]) -> Vec<Keypoint> {
        self.to_image.map_keypoints(kps)
    }
}

/// Affine crop of `bbox` to `width × height`, bilinear resampling, per-channel normalization.
///
/// Returns a `[3, height, width]` tensor (gray images are replicated) and the crop transform.
pub fn crop_and_normalize(image: &Image, bbox: &BBox, width: usize, height: usize) -> Result<(Tensor, CropTransform)> {
    let t = CropTransform::for_bbox(bbox, width, height)?;
    let (iw, ih) = (image.width as f64, image.height as f64);
    if bbox.x >= iw || bbox.y >= ih || bbox.x + bbox.w <= 0.0 || bbox.y + bbox.h <= 0.0 {
        return Err(Error::InvalidArgument(format!("bbox {bbox:?} does not intersect the {iw}x{ih} image")));
    }
    let mut out = vec![0.0f32; 3 * width * height];
    for v in 0..height {
        for u in 0..width {
            let (x, y) = t.to_image.apply(u as f64, v as f64);
            for c in 0..3 {
                let src_c = if image.channels == 1 { 0 } else { c };
                let p = image.sample(x, y, src_c, PIXEL_MEAN[c]);
                out[(c * height + v) * width + u] = ((p - PIXEL_MEAN[c]) / PIXEL_STD[c]) as f32;
            }
        }
    }
    Ok((Tensor::new(vec![3, height, width], out)?, t))
}

/// Random ranges; all zero means identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    /// Relative scale jitter: `s ∈ [1 − scale, 1 + scale]`.
    pub scale: f64,
    /// Rotation range in degrees, symmetric.
    pub rotation_deg: f64,
    /// Shift as a fraction of the box size, symmetric.
    pub shift: f64,
    /// Maximum number of occlusion patches per image.
    pub occlusion_patches: usize,
    /// Maximum patch side as a fraction of the box side.
    pub occlusion_size: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self { scale: 0.25, rotation_deg: 30.0, shift: 0.1, occlusion_patches: 2, occlusion_size: 0.3 }
    }
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        Self { scale: 0.0, rotation_deg: 0.0, shift: 0.0, occlusion_patches: 0, occlusion_size: 0.0 }
    }
}

/// Draws `[-r, r]` without consuming randomness when `r == 0`.
fn sym(rng: &mut ChaCha8Rng, r: f64) -> f64 {
    if r > 0.0 {
        rng.gen_range(-r..=r)
    } else {
        0.0
    }
}

/// Warps `image` by `a` (output pixel `p` reads source `a⁻¹ p`), filling with `fill`.
pub fn warp(image: &Image, a: &Affine, fill: u8) -> Result<Image> {
    if *a == Affine::IDENTITY {
        return Ok(image.clone());
    }
    let inv = a.inverse()?;
    let mut out = Image::new(image.width, image.height, image.channels);
    for y in 0..image.height {
        for x in 0..image.width {
            let (sx, sy) = inv.apply(x as f64, y as f64);
            for c in 0..image.channels {
                let v = image.sample(sx, sy, c, f64::from(fill));
                out.put(x, y, c, v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Ok(out)
}

/// Random similarity transform about the box centre plus occlusion patches.
///
/// Keypoints follow the pixels exactly; occluded keypoints keep their label.
/// Draws that push a labeled keypoint out of the image are re-drawn up to 10
/// times, after which the geometric part falls back to identity.
pub fn augment(image: &Image, inst: &KeypointInstance, seed: u64, policy: &AugmentPolicy) -> Result<(Image, KeypointInstance, Affine)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center = (inst.bbox.x + inst.bbox.w / 2.0 - 0.5, inst.bbox.y + inst.bbox.h / 2.0 - 0.5);
    let inside = |k: &Keypoint| k.x >= 0.0 && k.y >= 0.0 && k.x <= image.width as f64 - 1.0 && k.y <= image.height as f64 - 1.0;
    let mut chosen = Affine::IDENTITY;
    for _ in 0..10 {
        let s = 1.0 + sym(&mut rng, policy.scale);
        let theta = sym(&mut rng, policy.rotation_deg).to_radians();
        let shift = (sym(&mut rng, policy.shift) * inst.bbox.w, sym(&mut rng, policy.shift) * inst.bbox.h);
        let a = Affine::similarity(center, s, theta, shift);
        if s > 0.0 && a.map_keypoints(&inst.keypoints).iter().filter(|k| k.is_labeled()).all(inside) {
            chosen = a;
            break;
        }
    }
    let mut out = warp(image, &chosen, 0)?;
    let mut moved = inst.clone();
    moved.keypoints = chosen.map_keypoints(&inst.keypoints);
    moved.bbox = chosen.map_bbox(&inst.bbox);

    let patches = if policy.occlusion_patches > 0 { rng.gen_range(0..=policy.occlusion_patches) } else { 0 };
    for _ in 0..patches {
        let side = |len: f64, rng: &mut ChaCha8Rng| (rng.gen_range(0.1..=1.0) * policy.occlusion_size * len).max(1.0);
        let (pw, ph) = (side(moved.bbox.w, &mut rng), side(moved.bbox.h, &mut rng));
        let px = moved.bbox.x + rng.gen_range(0.0..=1.0) * (moved.bbox.w - pw).max(0.0);
        let py = moved.bbox.y + rng.gen_range(0.0..=1.0) * (moved.bbox.h - ph).max(0.0);
        let gray: u8 = rng.gen();
        for y in (py.max(0.0) as usize)..((py + ph).min(out.height as f64) as usize) {
            for x in (px.max(0.0) as usize)..((px + pw).min(out.width as f64) as usize) {
                for c in 0..out.channels {
                    out.put(x, y, c, gray);
                }
            }
        }
    }
    Ok((out, moved, chosen))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::NUM_KEYPOINTS;
    use proptest::prelude::*;

    fn instance(kps: Vec<Keypoint>, bbox: BBox) -> KeypointInstance {
        KeypointInstance { id: 1, image_id: 1, category_id: 1, bbox, keypoints: kps, area: None }
    }

    #[test]
    fn full_image_centre_maps_to_crop_centre() {
        let t = CropTransform::for_bbox(&BBox::new(0.0, 0.0, 64.0, 64.0), 256, 192).unwrap();
        let (u, v) = t.to_crop.apply(31.5, 31.5);
        assert!((u - 127.5).abs() < 1e-9 && (v - 95.5).abs() < 1e-9);
    }

    #[test]
    fn crop_round_trip_is_identity() {
        let t = CropTransform::for_bbox(&BBox::new(13.0, 7.0, 40.0, 90.0), 256, 192).unwrap();
        for (u, v) in [(0.0, 0.0), (17.25, 191.0), (255.0, 3.5)] {
            let (x, y) = t.to_image.apply(u, v);
            let (u2, v2) = t.to_crop.apply(x, y);
            assert!((u - u2).abs() < 1e-4 && (v - v2).abs() < 1e-4);
        }
    }

    #[test]
    fn off_centre_box_matches_hand_affine() {
        // Box 40×90 at (13, 7): padded to 50×112.5, widened to 150×112.5 → scale 150/256.
        let t = CropTransform::for_bbox(&BBox::new(13.0, 7.0, 40.0, 90.0), 256, 192).unwrap();
        let s = 150.0 / 256.0;
        let (cx, cy) = (13.0 + 20.0 - 0.5, 7.0 + 45.0 - 0.5);
        let (u, v) = t.to_crop.apply(20.0, 30.0);
        assert!((u - ((20.0 - cx) / s + 127.5)).abs() < 1e-9);
        assert!((v - ((30.0 - cy) / s + 95.5)).abs() < 1e-9);
    }

    #[test]
    fn degenerate_or_disjoint_box_errors() {
        let img = Image::new(10, 10, 1);
        assert!(crop_and_normalize(&img, &BBox::new(1.0, 1.0, 0.0, 4.0), 8, 6).is_err());
        assert!(crop_and_normalize(&img, &BBox::new(20.0, 1.0, 3.0, 4.0), 8, 6).is_err());
    }

    #[test]
    fn crop_normalizes_gray_pixels() {
        let img = Image::filled(16, 16, 1, 200);
        let (t, _) = crop_and_normalize(&img, &BBox::new(4.0, 4.0, 8.0, 8.0), 8, 6).unwrap();
        assert_eq!(t.shape(), &[3, 6, 8]);
        for c in 0..3 {
            let want = ((200.0 - PIXEL_MEAN[c]) / PIXEL_STD[c]) as f32;
            assert!((t.at(&[c, 3, 4]) - want).abs() < 1e-6);
        }
    }

    #[test]
    fn identity_policy_leaves_input_unchanged() {
        let mut img = Image::new(20, 20, 3);
        img.data.iter_mut().enumerate().for_each(|(i, v)| *v = (i % 251) as u8);
        let kps = (0..NUM_KEYPOINTS).map(|i| Keypoint::new(i as f64, 3.0, 2)).collect();
        let inst = instance(kps, BBox::new(2.0, 2.0, 15.0, 15.0));
        let (out, moved, a) = augment(&img, &inst, 9, &AugmentPolicy::identity()).unwrap();
        assert_eq!(out, img);
        assert_eq!(moved, inst);
        assert_eq!(a, Affine::IDENTITY);
    }

    #[test]
    fn half_turn_is_point_symmetry() {
        let (w, h) = (32.0, 32.0);
        let a = Affine::similarity((15.5, 15.5), 1.0, std::f64::consts::PI, (0.0, 0.0));
        let (x, y) = a.apply(3.0, 20.0);
        assert!((x - (w - 1.0 - 3.0)).abs() < 1e-9 && (y - (h - 1.0 - 20.0)).abs() < 1e-9);
        let mut img = Image::new(32, 32, 1);
        img.put(3, 20, 0, 255);
        let out = warp(&img, &a, 0).unwrap();
        assert_eq!(out.get(28, 11, 0), 255);
    }

    fn brightest(img: &Image) -> (usize, usize) {
        let i = (0..img.data.len()).max_by_key(|&i| (img.data[i], std::cmp::Reverse(i))).unwrap();
        (i % img.width, i / img.width)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn keypoints_follow_the_pixels(seed in any::<u64>(), kx in 20usize..44, ky in 20usize..44) {
            let mut img = Image::new(64, 64, 1);
            img.put(kx, ky, 0, 255);
            let mut kps = vec![Keypoint::default(); NUM_KEYPOINTS];
            kps[0] = Keypoint::new(kx as f64, ky as f64, 2);
            let inst = instance(kps, BBox::new(16.0, 16.0, 32.0, 32.0));
            let policy = AugmentPolicy { occlusion_patches: 0, ..AugmentPolicy::default() };
            let (out, moved, a) = augment(&img, &inst, seed, &policy).unwrap();
            let (px, py) = brightest(&out);
            let k = moved.keypoints[0];
            prop_assert!((px as f64 - k.x).abs() <= 1.0 && (py as f64 - k.y).abs() <= 1.0, "{:?} vs {:?}", (px, py), k);
            let (ex, ey) = a.apply(kx as f64, ky as f64);
            prop_assert!((ex - k.x).abs() < 1e-9 && (ey - k.y).abs() < 1e-9);
        }

        #[test]
        fn augmentation_is_deterministic(seed in any::<u64>()) {
            let mut img = Image::new(40, 30, 3);
            img.data.iter_mut().enumerate().for_each(|(i, v)| *v = (i * 31 % 256) as u8);
            let kps = (0..NUM_KEYPOINTS).map(|i| Keypoint::new(10.0 + i as f64, 15.0, 1)).collect();
            let inst = instance(kps, BBox::new(8.0, 8.0, 20.0, 14.0));
            let a = augment(&img, &inst, seed, &AugmentPolicy::default()).unwrap();
            let b = augment(&img, &inst, seed, &AugmentPolicy::default()).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
