//! Skeleton overlays and SimCC marginal heat strips.

use fsmc_core::data::{Image, Keypoint, LIMBS};

/// One colour per limb edge.
pub const LIMB_COLORS: [[u8; 3]; 15] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [128, 0, 0],
    [170, 255, 195],
];
pub const VISIBLE_COLOR: [u8; 3] = [0, 255, 0];
pub const PARTIAL_COLOR: [u8; 3] = [255, 255, 0];
pub const PREDICTED_COLOR: [u8; 3] = [255, 0, 255];

fn line(img: &mut Image, a: (f64, f64), b: (f64, f64), rgb: [u8; 3]) {
    let (mut x0, mut y0) = (a.0.round() as i64, a.1.round() as i64);
    let (x1, y1) = (b.0.round() as i64, b.1.round() as i64);
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let mut err = dx + dy;
    loop {
        img.plot(x0, y0, rgb);
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

fn square(img: &mut Image, c: (f64, f64), half: i64, rgb: [u8; 3]) {
    let (cx, cy) = (c.0.round() as i64, c.1.round() as i64);
    for y in cy - half..=cy + half {
        for x in cx - half..=cx + half {
            img.plot(x, y, rgb);
        }
    }
}

fn cross(img: &mut Image, c: (f64, f64), half: i64, rgb: [u8; 3]) {
    let (cx, cy) = (c.0.round() as i64, c.1.round() as i64);
    for d in -half..=half {
        img.plot(cx + d, cy + d, rgb);
        img.plot(cx + d, cy - d, rgb);
    }
}

/// Limbs between labeled endpoints, then keypoints coloured by visibility.
pub fn draw_ground_truth(img: &mut Image, kps: &[Keypoint]) {
    for (i, &(a, b)) in LIMBS.iter().enumerate() {
        let (ka, kb) = (kps[a], kps[b]);
        if ka.is_labeled() && kb.is_labeled() {
            line(img, (ka.x, ka.y), (kb.x, kb.y), LIMB_COLORS[i]);
        }
    }
    for k in kps.iter().filter(|k| k.is_labeled()) {
        square(img, (k.x, k.y), 2, if k.v == 2 { VISIBLE_COLOR } else { PARTIAL_COLOR });
    }
}

pub fn draw_prediction(img: &mut Image, pts: &[(f64, f64)]) {
    for &p in pts {
        cross(img, p, 3, PREDICTED_COLOR);
    }
}

/// Rows of per-keypoint marginals, `band` pixels tall each, brightness ∝ probability / row max.
pub fn heat_strip(probs: &[Vec<f64>], band: usize) -> Image {
    let bins = probs.first().map_or(1, Vec::len).max(1);
    let mut img = Image::new(bins, probs.len() * band, 3);
    for (k, row) in probs.iter().enumerate() {
        let peak = row.iter().copied().fold(0.0, f64::max).max(1e-12);
        for (b, &p) in row.iter().enumerate() {
            let t = (p / peak).clamp(0.0, 1.0);
            // Black → red → yellow.
            let rgb = [(255.0 * (2.0 * t).min(1.0)) as u8, (255.0 * (2.0 * t - 1.0).max(0.0)) as u8, 0];
            for y in k * band..(k + 1) * band {
                img.plot(b as i64, y as i64, rgb);
            }
        }
    }
    img
}

/// Row-wise softmax of `[K, bins]` logits stored contiguously.
pub fn softmax_rows(logits: &[f32], bins: usize) -> Vec<Vec<f64>> {
    logits
        .chunks_exact(bins)
        .map(|row| {
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let e: Vec<f64> = row.iter().map(|&v| f64::from(v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_reaches_both_ends() {
        let mut img = Image::new(10, 10, 3);
        line(&mut img, (1.0, 1.0), (8.0, 5.0), [9, 9, 9]);
        assert_eq!(img.get(1, 1, 0), 9);
        assert_eq!(img.get(8, 5, 0), 9);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = softmax_rows(&[0.0, 1.0, 2.0, 5.0, 5.0, 5.0], 3);
        for row in p {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
