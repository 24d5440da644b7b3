//! Procedural quadruped stick figures on noisy grayscale backgrounds.
//!
//! Each image holds one animal, or two in the "mounting" mode: a second animal
//! rears up over the hindquarters of the first and is drawn on top. Keypoints of
//! the lower animal covered by the upper one are labeled `v = 1`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::coco::{BBox, Dataset, ImageInfo, KeypointInstance};
use super::image::Image;
use super::{derive_seed, Keypoint, NUM_KEYPOINTS};
use crate::error::{Error, Result};

pub const SYNTH_WIDTH: usize = 320;
pub const SYNTH_HEIGHT: usize = 240;
/// Probability that an image (with at least two instances left to draw) uses the mounting mode.
pub const MOUNTING_PROBABILITY: f64 = 0.3;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub dataset: Dataset,
    /// Parallel to `dataset.images`.
    pub images: Vec<Image>,
}

impl SynthDataset {
    /// Writes `annotations.json` and one PGM per image into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("annotations.json"), self.dataset.to_json()?)?;
        for (info, img) in self.dataset.images.iter().zip(&self.images) {
            img.save(&dir.join(&info.file_name))?;
        }
        Ok(())
    }
}

/// Thick line segments and discs making up one rendered animal.
#[derive(Clone, Debug)]
struct Figure {
    keypoints: [(f64, f64); NUM_KEYPOINTS],
    /// `(a, b, radius, intensity)`.
    strokes: Vec<((f64, f64), (f64, f64), f64, u8)>,
}

fn seg_dist2(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    qx * qx + qy * qy
}

impl Figure {
    /// Pixel coverage mask over the synthetic canvas.
    fn mask(&self) -> Vec<bool> {
        let mut m = vec![false; SYNTH_WIDTH * SYNTH_HEIGHT];
        self.paint(|x, y, _| m[y * SYNTH_WIDTH + x] = true);
        m
    }

    fn paint(&self, mut f: impl FnMut(usize, usize, u8)) {
        for &(a, b, r, shade) in &self.strokes {
            let x0 = (a.0.min(b.0) - r).floor().max(0.0) as usize;
            let x1 = ((a.0.max(b.0) + r).ceil().max(0.0) as usize).min(SYNTH_WIDTH - 1);
            let y0 = (a.1.min(b.1) - r).floor().max(0.0) as usize;
            let y1 = ((a.1.max(b.1) + r).ceil().max(0.0) as usize).min(SYNTH_HEIGHT - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    if seg_dist2((x as f64, y as f64), a, b) <= r * r {
                        f(x, y, shade);
                    }
                }
            }
        }
    }
}

/// Builds a figure from its spine-centre position, facing (`±1`), size and tilt.
fn figure(rng: &mut ChaCha8Rng, center: (f64, f64), dir: f64, len: f64, tilt: f64, rearing: bool) -> Figure {
    let j = |rng: &mut ChaCha8Rng| rng.gen_range(-0.03..=0.03) * len;
    let (st, ct) = tilt.sin_cos();
    // Local frame: x forward, y down; rotated by `tilt`, mirrored by `dir`.
    let place = |lx: f64, ly: f64| -> (f64, f64) {
        let (rx, ry) = (lx * ct - ly * st, lx * st + ly * ct);
        (center.0 + dir * rx, center.1 + ry)
    };
    let mut local = [(0.0f64, 0.0f64); NUM_KEYPOINTS];
    let head_drop = rng.gen_range(-0.12..=0.12);
    local[3] = (0.33 * len + j(rng), -0.06 * len + j(rng)); // withers
    local[4] = (j(rng), j(rng)); // spine_mid
    local[5] = (-0.33 * len + j(rng), -0.04 * len + j(rng)); // hip
    local[6] = (-0.47 * len + j(rng), 0.0 + j(rng)); // tail_base
    local[2] = (0.5 * len + j(rng), (-0.17 + head_drop / 2.0) * len + j(rng)); // neck
    local[0] = (0.62 * len + j(rng), (-0.32 + head_drop) * len + j(rng)); // head_top
    local[1] = (0.78 * len + j(rng), (-0.14 + head_drop) * len + j(rng)); // nose
    local[7] = (0.36 * len + j(rng), 0.2 * len + j(rng)); // chest
    let leg = |rng: &mut ChaCha8Rng, top: (f64, f64), dx: f64, lifted: bool| -> [(f64, f64); 2] {
        let swing: f64 = if lifted { rng.gen_range(0.9..=1.4) } else { rng.gen_range(-0.3..=0.3) };
        let (s, c) = swing.sin_cos();
        let seg = 0.26 * len;
        let knee = (top.0 + dx + s * seg, top.1 + c * seg);
        let bend: f64 = if lifted { swing - 1.2 } else { swing + rng.gen_range(-0.25..=0.25) };
        let (s2, c2) = bend.sin_cos();
        [knee, (knee.0 + s2 * seg, knee.1 + c2 * seg)]
    };
    let [k, h] = leg(rng, local[7], 0.0, rearing);
    local[8] = k;
    local[9] = h;
    let [k, h] = leg(rng, local[7], 0.07 * len, rearing);
    local[10] = k;
    local[11] = h;
    let hip_bottom = (local[5].0, local[5].1 + 0.12 * len);
    let [k, h] = leg(rng, hip_bottom, 0.0, false);
    local[12] = k;
    local[13] = h;
    let [k, h] = leg(rng, hip_bottom, 0.07 * len, false);
    local[14] = k;
    local[15] = h;

    let mut kp = [(0.0, 0.0); NUM_KEYPOINTS];
    for (dst, &(lx, ly)) in kp.iter_mut().zip(&local) {
        *dst = place(lx, ly);
    }
    let body: u8 = rng.gen_range(150..=210);
    let far: u8 = body.saturating_sub(25);
    let mut strokes = Vec::new();
    let seg = |a: usize, b: usize, r: f64, s: u8| (kp[a], kp[b], r, s);
    // Far-side legs first so near-side legs and the body overlap them.
    for &(a, b) in &[(7, 10), (10, 11), (5, 14), (14, 15)] {
        strokes.push(seg(a, b, 0.035 * len, far));
    }
    strokes.push(seg(6, 5, 0.1 * len, body));
    strokes.push(seg(5, 4, 0.13 * len, body));
    strokes.push(seg(4, 3, 0.13 * len, body));
    strokes.push(seg(3, 7, 0.1 * len, body));
    strokes.push(seg(3, 2, 0.07 * len, body));
    strokes.push(seg(2, 0, 0.06 * len, body));
    strokes.push(seg(0, 1, 0.05 * len, body.saturating_add(30)));
    for &(a, b) in &[(7, 8), (8, 9), (5, 12), (12, 13)] {
        strokes.push(seg(a, b, 0.035 * len, body));
    }
    // Dark hooves.
    for &h in &[9, 11, 13, 15] {
        strokes.push((kp[h], kp[h], 0.04 * len, 35));
    }
    Figure { keypoints: kp, strokes }
}

fn inside(p: (f64, f64)) -> bool {
    p.0 >= 0.0 && p.1 >= 0.0 && p.0 <= (SYNTH_WIDTH - 1) as f64 && p.1 <= (SYNTH_HEIGHT - 1) as f64
}

/// Keypoint labels of `fig`, with points covered by `above` marked `v = 1`.
fn label(fig: &Figure, above: Option<&[bool]>) -> Vec<Keypoint> {
    fig.keypoints
        .iter()
        .map(|&(x, y)| {
            if !inside((x, y)) {
                return Keypoint::new(0.0, 0.0, 0);
            }
            let covered = above.is_some_and(|m| m[y.round() as usize * SYNTH_WIDTH + x.round() as usize]);
            Keypoint::new(x, y, if covered { 1 } else { 2 })
        })
        .collect()
}

fn mask_bbox(mask: &[bool]) -> Option<(BBox, f64)> {
    let (mut x0, mut y0, mut x1, mut y1, mut n) = (usize::MAX, usize::MAX, 0, 0, 0usize);
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (x, y) = (i % SYNTH_WIDTH, i / SYNTH_WIDTH);
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
        n += 1;
    }
    (n > 0).then(|| (BBox::new(x0 as f64, y0 as f64, (x1 - x0 + 1) as f64, (y1 - y0 + 1) as f64), n as f64))
}

type Annotation = (Vec<Keypoint>, BBox, f64);

/// Renders one image with one (or, when `mounting`, two) animals, in draw order.
fn render(seed: u64, mounting: bool) -> (Image, Vec<Figure>, Vec<Annotation>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg: i32 = rng.gen_range(40..=90);
    let mut img = Image::new(SYNTH_WIDTH, SYNTH_HEIGHT, 1);
    for v in img.data.iter_mut() {
        *v = (bg + rng.gen_range(-12..=12)).clamp(0, 255) as u8;
    }
    let dir = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let len = if mounting { rng.gen_range(95.0..=120.0) } else { rng.gen_range(100.0..=140.0) };
    let center = (
        SYNTH_WIDTH as f64 / 2.0 + rng.gen_range(-25.0..=25.0),
        SYNTH_HEIGHT as f64 / 2.0 + rng.gen_range(-15.0..=15.0) - if mounting { -20.0 } else { 0.0 },
    );
    let tilt = rng.gen_range(-0.08..=0.08);
    let base = figure(&mut rng, center, dir, len, tilt, false);
    let mut figures = vec![base];
    if mounting {
        // The rider stands behind the hip, rears up and faces the same way.
        let hip = figures[0].keypoints[5];
        let rider_len = len * rng.gen_range(0.9..=1.05);
        let tilt = -rng.gen_range(0.35..=0.6);
        let rc = (hip.0 - dir * 0.2 * rider_len, hip.1 - 0.05 * rider_len);
        figures.push(figure(&mut rng, rc, dir, rider_len, tilt, true));
    }
    for f in &figures {
        f.paint(|x, y, s| {
            let noise: i32 = ((x * 7 + y * 13) % 9) as i32 - 4;
            img.put(x, y, 0, (i32::from(s) + noise).clamp(0, 255) as u8);
        });
    }
    let masks: Vec<Vec<bool>> = figures.iter().map(Figure::mask).collect();
    let mut out = Vec::new();
    for (i, f) in figures.iter().enumerate() {
        // Only the last-drawn figure can cover the others.
        let above = (i + 1 < figures.len()).then(|| masks[figures.len() - 1].as_slice());
        let kps = label(f, above);
        let (bbox, area) = mask_bbox(&masks[i]).unwrap_or((BBox::new(0.0, 0.0, 1.0, 1.0), 1.0));
        out.push((kps, bbox, area));
    }
    (img, figures, out)
}

/// Generates images until `n_instances` animals exist; fully determined by `seed`.
pub fn synth_dataset(n_instances: usize, seed: u64) -> Result<SynthDataset> {
    if n_instances == 0 {
        return Err(Error::InvalidArgument("synthetic dataset needs at least one instance".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dataset = Dataset { categories: Dataset::default_categories(), ..Dataset::default() };
    let mut images = Vec::new();
    let mut index = 0u64;
    while dataset.instances.len() < n_instances {
        let left = n_instances - dataset.instances.len();
        let mounting = left >= 2 && rng.gen_bool(MOUNTING_PROBABILITY);
        let image_id = index + 1;
        let (img, _, anns) = render(derive_seed(seed, index), mounting);
        dataset.images.push(ImageInfo {
            id: image_id,
            file_name: format!("synth_{image_id:05}.pgm"),
            width: SYNTH_WIDTH as u32,
            height: SYNTH_HEIGHT as u32,
        });
        for (keypoints, bbox, area) in anns {
            let id = dataset.instances.len() as u64 + 1;
            dataset.instances.push(KeypointInstance { id, image_id, category_id: 1, bbox, keypoints, area: Some(area) });
        }
        images.push(img);
        index += 1;
    }
    Ok(SynthDataset { dataset, images })
}

#[cfg(test)]
mod tests {
    use super::*;
    use sha2::{Digest, Sha256};

    #[test]
    fn generation_is_deterministic() {
        let a = synth_dataset(1, 42).unwrap();
        let b = synth_dataset(1, 42).unwrap();
        let hash = |s: &SynthDataset| hex::encode(Sha256::digest(&s.images[0].data));
        assert_eq!(hash(&a), hash(&b));
        assert_eq!(a, b);
        assert_ne!(hash(&a), hash(&synth_dataset(1, 43).unwrap()));
    }

    #[test]
    fn labeled_keypoints_are_inside_and_parse_back() {
        let s = synth_dataset(40, 3).unwrap();
        assert_eq!(s.dataset.instances.len(), 40);
        for inst in &s.dataset.instances {
            for k in inst.keypoints.iter().filter(|k| k.is_labeled()) {
                assert!(inside((k.x, k.y)), "{k:?}");
            }
        }
        let again = super::super::coco::parse_annotations(s.dataset.to_json().unwrap().as_bytes()).unwrap();
        assert_eq!(again, s.dataset);
    }

    #[test]
    fn mounting_occlusion_follows_draw_order() {
        let s = synth_dataset(60, 11).unwrap();
        let mut checked = 0;
        for (idx, info) in s.dataset.images.iter().enumerate() {
            let insts: Vec<_> = s.dataset.instances.iter().filter(|i| i.image_id == info.id).collect();
            if insts.len() != 2 {
                continue;
            }
            let (_, figures, _) = render(derive_seed(11, idx as u64), true);
            // Id buffer painted in draw order: the last writer owns each pixel.
            let mut owner = vec![usize::MAX; SYNTH_WIDTH * SYNTH_HEIGHT];
            for (fi, f) in figures.iter().enumerate() {
                f.paint(|x, y, _| owner[y * SYNTH_WIDTH + x] = fi);
            }
            for (k, p) in insts[0].keypoints.iter().zip(&figures[0].keypoints) {
                if !inside(*p) {
                    assert_eq!(k.v, 0);
                    continue;
                }
                let o = owner[p.1.round() as usize * SYNTH_WIDTH + p.0.round() as usize];
                assert_eq!(k.v == 1, o == 1, "keypoint {k:?} owner {o}");
                checked += usize::from(k.v == 1);
            }
            assert!(insts[1].keypoints.iter().all(|k| k.v != 1));
        }
        assert!(checked > 0, "no occluded keypoint in any mounting image");
    }
}
