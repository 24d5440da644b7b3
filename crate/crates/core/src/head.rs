//! SC2Head (spatial, channel and self-calibration attention with a residual
//! fusion) and the SimCC coordinate-classification output: projection,
//! decoding, target encoding and loss.

use crate::config::{HeadConfig, HeadGeometry};
use crate::data::Keypoint;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d, Init, Linear, ParamStore, Session};
use crate::profiler::{CostRow, LayerKind};
use crate::tensor::{Activation, ConvSpec, Graph, PoolKind, Tensor, Var};

/// Spatial attention: `X ⊙ σ(conv3×3([avg_c(X), max_c(X)]))`, the gate broadcast over channels.
#[derive(Clone, Debug)]
pub struct Sab {
    pub conv: Conv2d,
}

impl Sab {
    pub fn new(init: &mut Init, name: &str) -> Result<Self> {
        Ok(Self { conv: Conv2d::new(init, &format!("{name}.conv"), ConvSpec::new(2, 1, 3).padding(1), true)? })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let avg = s.g.channel_pool(x, PoolKind::Avg)?;
        let max = s.g.channel_pool(x, PoolKind::Max)?;
        let pooled = s.g.concat_channels(&[avg, max])?;
        let logits = self.conv.forward(s, pooled)?;
        let gate = s.g.sigmoid(logits)?;
        s.g.mul(x, gate)
    }

    pub fn cost(&self, name: &str, c: usize, h: usize, w: usize, rows: &mut Vec<CostRow>) -> Result<()> {
        let hw = (h * w) as u64;
        rows.push(CostRow { adds: 2 * c as u64 * hw, ..CostRow::new(format!("{name}.pool"), LayerKind::Resample, 0, 0) });
        rows.push(self.conv.cost(&format!("{name}.conv"), h, w)?.0);
        rows.push(CostRow::elementwise(format!("{name}.gate"), c as u64 * hw));
        Ok(())
    }
}

/// `conv(C→C/r) → BN → ReLU → conv(C/r→C) → sigmoid` on `[N, C, 1, 1]` descriptors.
#[derive(Clone, Debug)]
pub struct ChannelGate {
    pub reduce: Conv2d,
    pub bn: BatchNorm,
    pub expand: Conv2d,
}

impl ChannelGate {
    fn new(init: &mut Init, name: &str, c: usize, r: usize) -> Result<Self> {
        Ok(Self {
            reduce: Conv2d::new(init, &format!("{name}.reduce"), ConvSpec::new(c, c / r, 1), false)?,
            bn: BatchNorm::new(init, &format!("{name}.bn"), c / r),
            expand: Conv2d::new(init, &format!("{name}.expand"), ConvSpec::new(c / r, c, 1), true)?,
        })
    }

    fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let y = self.reduce.forward(s, x)?;
        let y = self.bn.forward(s, y)?;
        let y = s.g.relu(y)?;
        let y = self.expand.forward(s, y)?;
        s.g.sigmoid(y)
    }

    fn cost(&self, name: &str, rows: &mut Vec<CostRow>) -> Result<()> {
        rows.push(self.reduce.cost(&format!("{name}.reduce"), 1, 1)?.0);
        rows.push(self.bn.cost(&format!("{name}.bn"), 1, 1));
        rows.push(self.expand.cost(&format!("{name}.expand"), 1, 1)?.0);
        Ok(())
    }

    /// Pins the gate to `σ(bias)` everywhere.
    pub fn force(&self, store: &mut ParamStore, bias: f32) {
        store.get_mut(self.expand.weight).data_mut().fill(0.0);
        if let Some(b) = self.expand.bias {
            store.get_mut(b).data_mut().fill(bias);
        }
    }
}

/// Channel attention: global avg/max descriptors, mixed by a conv-BN-LeakyReLU
/// unit, split in halves and turned into two gates multiplied onto `X`.
#[derive(Clone, Debug)]
pub struct Cab {
    pub channels: usize,
    pub mix: Conv2d,
    pub mix_bn: BatchNorm,
    pub slope: f32,
    pub gate_avg: ChannelGate,
    pub gate_max: ChannelGate,
}

impl Cab {
    pub fn new(init: &mut Init, name: &str, channels: usize, reduction: usize, slope: f32) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 || channels / reduction == 0 {
            return Err(Error::InvalidArgument(format!(
                "channel attention needs C divisible by r with C/r >= 1, got C={channels}, r={reduction}"
            )));
        }
        Activation::LeakyRelu(slope).validate()?;
        let c2 = 2 * channels;
        Ok(Self {
            channels,
            mix: Conv2d::new(init, &format!("{name}.cbl.conv"), ConvSpec::new(c2, c2, 1), false)?,
            mix_bn: BatchNorm::new(init, &format!("{name}.cbl.bn"), c2),
            slope,
            gate_avg: ChannelGate::new(init, &format!("{name}.gate_avg"), channels, reduction)?,
            gate_max: ChannelGate::new(init, &format!("{name}.gate_max"), channels, reduction)?,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let avg = s.g.global_pool(x, PoolKind::Avg)?;
        let max = s.g.global_pool(x, PoolKind::Max)?;
        let desc = s.g.concat_channels(&[avg, max])?;
        let m = self.mix.forward(s, desc)?;
        let m = self.mix_bn.forward(s, m)?;
        let m = s.g.leaky_relu(m, self.slope)?;
        let xa = s.g.slice_channels(m, 0, self.channels)?;
        let xm = s.g.slice_channels(m, self.channels, self.channels)?;
        let fa = self.gate_avg.forward(s, xa)?;
        let fm = self.gate_max.forward(s, xm)?;
        let y = s.g.mul(x, fa)?;
        s.g.mul(y, fm)
    }

    pub fn cost(&self, name: &str, h: usize, w: usize, rows: &mut Vec<CostRow>) -> Result<()> {
        let n = (self.channels * h * w) as u64;
        rows.push(CostRow { adds: 2 * n, ..CostRow::new(format!("{name}.pool"), LayerKind::Resample, 0, 0) });
        rows.push(self.mix.cost(&format!("{name}.cbl.conv"), 1, 1)?.0);
        rows.push(self.mix_bn.cost(&format!("{name}.cbl.bn"), 1, 1));
        self.gate_avg.cost(&format!("{name}.gate_avg"), rows)?;
        self.gate_max.cost(&format!("{name}.gate_max"), rows)?;
        rows.push(CostRow::elementwise(format!("{name}.gate"), 2 * n));
        Ok(())
    }
}

/// Self-calibration: `σ(X + avgpool2×2(dwconv3×3(upsample2x(X))))`.
#[derive(Clone, Debug)]
pub struct Scb {
    pub dw: Conv2d,
}

impl Scb {
    pub fn new(init: &mut Init, name: &str, channels: usize) -> Result<Self> {
        Ok(Self { dw: Conv2d::new(init, &format!("{name}.dw"), ConvSpec::depthwise(channels, 3, 1), false)? })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let up = s.g.upsample2x(x)?;
        let y = self.dw.forward(s, up)?;
        let y = s.g.pool2d(y, PoolKind::Avg, (2, 2), (2, 2))?;
        let y = s.g.add(x, y)?;
        s.g.sigmoid(y)
    }

    pub fn cost(&self, name: &str, c: usize, h: usize, w: usize, rows: &mut Vec<CostRow>) -> Result<()> {
        let n = (c * h * w) as u64;
        // Bilinear: four weighted taps for each of the 4n output pixels.
        rows.push(CostRow::new(format!("{name}.upsample"), LayerKind::Resample, 0, 16 * n));
        rows.push(self.dw.cost(&format!("{name}.dw"), 2 * h, 2 * w)?.0);
        rows.push(CostRow { adds: 3 * n, ..CostRow::new(format!("{name}.pool"), LayerKind::Resample, 0, n) });
        rows.push(CostRow { adds: n, ..CostRow::elementwise(format!("{name}.residual"), 0) });
        Ok(())
    }
}

/// `C_o = conv1×1(concat[SA, CA] ⊙ concat[SC, SC]) + X`.
#[derive(Clone, Debug)]
pub struct Sc2Head {
    pub channels: usize,
    pub sab: Sab,
    pub cab: Cab,
    pub scb: Scb,
    pub fuse: Conv2d,
}

impl Sc2Head {
    pub fn new(init: &mut Init, name: &str, channels: usize, cfg: &HeadConfig) -> Result<Self> {
        Ok(Self {
            channels,
            sab: Sab::new(init, &format!("{name}.sab"))?,
            cab: Cab::new(init, &format!("{name}.cab"), channels, cfg.reduction, cfg.cbl_slope)?,
            scb: Scb::new(init, &format!("{name}.scb"), channels)?,
            fuse: Conv2d::new(init, &format!("{name}.fuse"), ConvSpec::new(2 * channels, channels, 1), true)?,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let sa = self.sab.forward(s, x)?;
        let ca = self.cab.forward(s, x)?;
        let sc = self.scb.forward(s, x)?;
        let cat = s.g.concat_channels(&[sa, ca])?;
        let sc2 = s.g.concat_channels(&[sc, sc])?;
        let prod = s.g.mul(cat, sc2)?;
        let y = self.fuse.forward(s, prod)?;
        s.g.add(y, x)
    }

    pub fn param_count(&self) -> usize {
        let gate = |g: &ChannelGate| g.reduce.param_count() + 2 * g.bn.channels + g.expand.param_count();
        self.sab.conv.param_count()
            + self.cab.mix.param_count()
            + 2 * self.cab.mix_bn.channels
            + gate(&self.cab.gate_avg)
            + gate(&self.cab.gate_max)
            + self.scb.dw.param_count()
            + self.fuse.param_count()
    }

    pub fn cost(&self, name: &str, h: usize, w: usize, rows: &mut Vec<CostRow>) -> Result<()> {
        let c = self.channels;
        self.sab.cost(&format!("{name}.sab"), c, h, w, rows)?;
        self.cab.cost(&format!("{name}.cab"), h, w, rows)?;
        self.scb.cost(&format!("{name}.scb"), c, h, w, rows)?;
        rows.push(CostRow::elementwise(format!("{name}.calibrate"), (2 * c * h * w) as u64));
        rows.push(self.fuse.cost(&format!("{name}.fuse"), h, w)?.0);
        rows.push(CostRow { adds: (c * h * w) as u64, ..CostRow::elementwise(format!("{name}.residual"), 0) });
        Ok(())
    }

    /// Zeroes the fusion conv; the head then passes features through unchanged.
    pub fn zero_final(&self, store: &mut ParamStore) {
        self.fuse.zero(store);
    }
}

/// 1×1 conv to `K` channels, flatten, and two fully connected bin classifiers.
#[derive(Clone, Debug)]
pub struct SimccHead {
    pub geo: HeadGeometry,
    pub conv: Conv2d,
    pub fc_x: Linear,
    pub fc_y: Linear,
}

impl SimccHead {
    pub fn new(init: &mut Init, name: &str, geo: HeadGeometry) -> Result<Self> {
        if geo.x_bins < 1 || geo.y_bins < 1 {
            return Err(Error::Config(format!("bin counts must be at least 1, got {}x{}", geo.x_bins, geo.y_bins)));
        }
        let spatial = geo.feat_h * geo.feat_w;
        Ok(Self {
            geo,
            conv: Conv2d::new(init, &format!("{name}.conv"), ConvSpec::new(geo.in_channels, geo.keypoints, 1), true)?,
            fc_x: Linear::new(init, &format!("{name}.fc_x"), spatial, geo.x_bins),
            fc_y: Linear::new(init, &format!("{name}.fc_y"), spatial, geo.y_bins),
        })
    }

    /// Features `[N, C, h, w]` to `(x_logits [N, K, Wbins], y_logits [N, K, Hbins])`.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<(Var, Var)> {
        let (n, _, h, w) = s.g.value(x).dims4()?;
        if (h, w) != (self.geo.feat_h, self.geo.feat_w) {
            return Err(Error::shape("simcc", format!("expected {}x{} features, got {h}x{w}", self.geo.feat_h, self.geo.feat_w)));
        }
        let k = self.geo.keypoints;
        let y = self.conv.forward(s, x)?;
        let flat = s.g.reshape(y, &[n * k, h * w])?;
        let xl = self.fc_x.forward(s, flat)?;
        let yl = self.fc_y.forward(s, flat)?;
        let xl = s.g.reshape(xl, &[n, k, self.geo.x_bins])?;
        let yl = s.g.reshape(yl, &[n, k, self.geo.y_bins])?;
        Ok((xl, yl))
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count() + self.fc_x.param_count() + self.fc_y.param_count()
    }

    pub fn cost(&self, name: &str, h: usize, w: usize, rows: &mut Vec<CostRow>) -> Result<()> {
        rows.push(self.conv.cost(&format!("{name}.conv"), h, w)?.0);
        rows.push(self.fc_x.cost(&format!("{name}.fc_x"), self.geo.keypoints));
        rows.push(self.fc_y.cost(&format!("{name}.fc_y"), self.geo.keypoints));
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// decoding

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictedKeypoint {
    /// Crop-frame pixels.
    pub x: f64,
    pub y: f64,
    /// Geometric mean of the two softmax peaks, in `[0, 1]`.
    pub score: f64,
}

/// Lowest index among the maxima, and the softmax probability there.
fn argmax_peak(row: &[f32]) -> (usize, f64) {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    let m = f64::from(row[best]);
    let denom: f64 = row.iter().map(|&v| (f64::from(v) - m).exp()).sum();
    (best, 1.0 / denom)
}

/// Per instance and keypoint: `argmax bin / split_ratio` on each axis.
pub fn simcc_decode(x_logits: &Tensor, y_logits: &Tensor, split_ratio: f32) -> Result<Vec<Vec<PredictedKeypoint>>> {
    let (xs, ys) = (x_logits.shape(), y_logits.shape());
    if xs.len() != 3 || ys.len() != 3 || xs[..2] != ys[..2] {
        return Err(Error::shape("simcc_decode", format!("logit shapes {xs:?} and {ys:?} disagree")));
    }
    if !(split_ratio > 0.0) {
        return Err(Error::InvalidArgument(format!("split ratio must be positive, got {split_ratio}")));
    }
    let (n, k, wb, hb) = (xs[0], xs[1], xs[2], ys[2]);
    let r = f64::from(split_ratio);
    Ok((0..n)
        .map(|ni| {
            (0..k)
                .map(|ki| {
                    let row = ni * k + ki;
                    let (bx, px) = argmax_peak(&x_logits.data()[row * wb..(row + 1) * wb]);
                    let (by, py) = argmax_peak(&y_logits.data()[row * hb..(row + 1) * hb]);
                    PredictedKeypoint { x: bx as f64 / r, y: by as f64 / r, score: (px * py).sqrt() }
                })
                .collect()
        })
        .collect())
}

// ---------------------------------------------------------------------------
// targets and loss

/// Per-axis Gaussian target distributions for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct SimccTargets {
    /// `[N, K, Wbins]`, each visible row sums to 1; invisible rows are zero.
    pub x: Tensor,
    pub y: Tensor,
    /// `1` for keypoints with `v > 0`, else `0`; length `N·K`.
    pub weights: Vec<f32>,
    /// Number of visible keypoints whose centre had to be clamped into the bin range.
    pub clamped: usize,
}

impl SimccTargets {
    pub fn visible(&self) -> usize {
        self.weights.iter().filter(|&&w| w > 0.0).count()
    }
}

fn gaussian_row(bins: usize, center: f64, sigma: f64) -> Vec<f32> {
    let raw: Vec<f64> = (0..bins).map(|b| (-(b as f64 - center).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| (v / total) as f32).collect()
}

/// Builds targets centred on `coordinate × split_ratio` with std `sigma` bins.
/// `keypoints[n]` holds the `K` crop-frame keypoints of instance `n`.
pub fn simcc_encode(keypoints: &[Vec<Keypoint>], geo: &HeadGeometry, sigma: f32) -> Result<SimccTargets> {
    let (n, k) = (keypoints.len(), geo.keypoints);
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("target sigma must be positive, got {sigma}")));
    }
    let mut x = vec![0.0f32; n * k * geo.x_bins];
    let mut y = vec![0.0f32; n * k * geo.y_bins];
    let mut weights = vec![0.0f32; n * k];
    let mut clamped = 0;
    let r = f64::from(geo.split_ratio);
    for (ni, inst) in keypoints.iter().enumerate() {
        if inst.len() != k {
            return Err(Error::shape("simcc_encode", format!("instance {ni} has {} keypoints, expected {k}", inst.len())));
        }
        for (ki, kp) in inst.iter().enumerate() {
            if !kp.is_labeled() {
                continue;
            }
            let row = ni * k + ki;
            weights[row] = 1.0;
            let mut place = |coord: f64, bins: usize, out: &mut [f32]| {
                let c = coord * r;
                let hi = (bins - 1) as f64;
                if !(0.0..=hi).contains(&c) {
                    clamped += 1;
                }
                out.copy_from_slice(&gaussian_row(bins, c.clamp(0.0, hi), f64::from(sigma)));
            };
            place(kp.x, geo.x_bins, &mut x[row * geo.x_bins..(row + 1) * geo.x_bins]);
            place(kp.y, geo.y_bins, &mut y[row * geo.y_bins..(row + 1) * geo.y_bins]);
        }
    }
    if clamped > 0 {
        log::warn!("{clamped} keypoint coordinates fell outside the crop and were clamped to the bin range");
    }
    Ok(SimccTargets {
        x: Tensor::new(vec![n, k, geo.x_bins], x)?,
        y: Tensor::new(vec![n, k, geo.y_bins], y)?,
        weights,
        clamped,
    })
}

/// Objective variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    /// `-Σ t log softmax(z)`; its minimum is the target entropy.
    CrossEntropy,
    /// Cross-entropy minus the target entropy; minimum 0, identical gradient.
    Kl,
}

fn row_entropy(t: &[f32]) -> f64 {
    t.iter().filter(|&&p| p > 0.0).map(|&p| -f64::from(p) * f64::from(p).ln()).sum()
}

fn row_cross_entropy(z: &[f32], t: &[f32]) -> f64 {
    let m = z.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let lse = f64::from(m) + z.iter().map(|&v| f64::from(v - m).exp()).sum::<f64>().ln();
    z.iter().zip(t).map(|(&zi, &ti)| -f64::from(ti) * (f64::from(zi) - lse)).sum()
}

fn softmax_minus_target(z: &[f32], t: &[f32], scale: f32, out: &mut [f32]) {
    let m = z.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let denom: f64 = z.iter().map(|&v| f64::from(v - m).exp()).sum();
    for ((o, &zi), &ti) in out.iter_mut().zip(z).zip(t) {
        *o = (((f64::from(zi - m).exp() / denom) as f32) - ti) * scale;
    }
}

/// Mean over visible keypoints of `H(t_x) + H(t_y)`: the cross-entropy floor.
pub fn target_entropy(t: &SimccTargets) -> f64 {
    let (wb, hb) = (t.x.shape()[2], t.y.shape()[2]);
    let vis = t.visible();
    if vis == 0 {
        return 0.0;
    }
    let total: f64 = t
        .weights
        .iter()
        .enumerate()
        .filter(|(_, &w)| w > 0.0)
        .map(|(r, _)| row_entropy(&t.x.data()[r * wb..(r + 1) * wb]) + row_entropy(&t.y.data()[r * hb..(r + 1) * hb]))
        .sum();
    total / vis as f64
}

/// Loss value without a tape.
pub fn simcc_loss_value(x_logits: &Tensor, y_logits: &Tensor, t: &SimccTargets, kind: LossKind) -> Result<f64> {
    check_loss_shapes(x_logits, y_logits, t)?;
    let (wb, hb) = (t.x.shape()[2], t.y.shape()[2]);
    let vis = t.visible();
    if vis == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (r, &w) in t.weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let (zx, tx) = (&x_logits.data()[r * wb..(r + 1) * wb], &t.x.data()[r * wb..(r + 1) * wb]);
        let (zy, ty) = (&y_logits.data()[r * hb..(r + 1) * hb], &t.y.data()[r * hb..(r + 1) * hb]);
        total += row_cross_entropy(zx, tx) + row_cross_entropy(zy, ty);
        if kind == LossKind::Kl {
            total -= row_entropy(tx) + row_entropy(ty);
        }
    }
    Ok(total / vis as f64)
}

fn check_loss_shapes(x_logits: &Tensor, y_logits: &Tensor, t: &SimccTargets) -> Result<()> {
    if x_logits.shape() != t.x.shape() || y_logits.shape() != t.y.shape() {
        return Err(Error::shape(
            "simcc_loss",
            format!(
                "logits {:?}/{:?} vs targets {:?}/{:?}",
                x_logits.shape(),
                y_logits.shape(),
                t.x.shape(),
                t.y.shape()
            ),
        ));
    }
    Ok(())
}

/// Soft-label loss averaged over visible keypoints (0 when none is visible), as a `[1]` tape node.
pub fn simcc_loss(g: &mut Graph, x_logits: Var, y_logits: Var, t: &SimccTargets, kind: LossKind) -> Result<Var> {
    let value = simcc_loss_value(g.value(x_logits), g.value(y_logits), t, kind)?;
    let targets = t.clone();
    g.record("simcc_loss", Tensor::scalar(value as f32), &[x_logits, y_logits], move |gout, p, _| {
        let vis = targets.visible();
        let mut gx = Tensor::zeros(p[0].shape());
        let mut gy = Tensor::zeros(p[1].shape());
        if vis > 0 {
            let scale = gout.data()[0] / vis as f32;
            let (wb, hb) = (targets.x.shape()[2], targets.y.shape()[2]);
            for (r, &w) in targets.weights.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let rx = r * wb..(r + 1) * wb;
                softmax_minus_target(&p[0].data()[rx.clone()], &targets.x.data()[rx.clone()], scale, &mut gx.data_mut()[rx]);
                let ry = r * hb..(r + 1) * hb;
                softmax_minus_target(&p[1].data()[ry.clone()], &targets.y.data()[ry.clone()], scale, &mut gy.data_mut()[ry]);
            }
        }
        Ok(vec![Some(gx), Some(gy)])
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::nn::ParamStore;
    use crate::tensor::gradcheck::{grad_check, separate_maxima, BLOCK_EPS};
    use crate::tensor::kernels::{self, BinaryOp};
    use crate::tensor::{NormMode, RunningStats};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn run<F>(store: &mut ParamStore, x: &Tensor, f: F) -> Tensor
    where
        F: Fn(&mut Session, Var) -> Result<Var>,
    {
        let mut g = Graph::inference();
        let mut s = Session::new(&mut g, store, NormMode::Eval, false);
        let xv = s.g.constant(x.clone());
        let y = f(&mut s, xv).unwrap();
        s.g.value(y).clone()
    }

    fn randomize(store: &mut ParamStore, seed: u64) {
        let mut r = rng(seed);
        for t in store.params_mut() {
            *t = Tensor::uniform(t.shape(), -0.5, 0.5, &mut r);
        }
    }

    fn getter(store: &ParamStore) -> impl Fn(&str) -> Tensor + '_ {
        move |n| store.get(store.find(n).unwrap_or_else(|| panic!("no param {n}"))).clone()
    }

    fn conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: ConvSpec) -> Tensor {
        kernels::conv2d(x, w, b, &spec).unwrap()
    }

    fn bin(a: &Tensor, b: &Tensor, op: BinaryOp) -> Tensor {
        kernels::binary(a, b, op).unwrap()
    }

    fn sigmoid(x: &Tensor) -> Tensor {
        kernels::activation(x, Activation::Sigmoid)
    }

    fn bn_eval(x: &Tensor, get: &dyn Fn(&str) -> Tensor, name: &str) -> Tensor {
        let gamma = get(&format!("{name}.gamma"));
        let mut stats = RunningStats::new(gamma.numel());
        kernels::batch_norm(x, &gamma, &get(&format!("{name}.beta")), &mut stats, NormMode::Eval).unwrap().0
    }

    fn sab_oracle(x: &Tensor, get: &dyn Fn(&str) -> Tensor, name: &str) -> Tensor {
        let avg = kernels::channel_pool(x, PoolKind::Avg).unwrap();
        let max = kernels::channel_pool(x, PoolKind::Max).unwrap();
        let cat = kernels::concat_channels(&[&avg, &max]).unwrap();
        let a = conv(&cat, &get(&format!("{name}.conv.weight")), Some(&get(&format!("{name}.conv.bias"))), ConvSpec::new(2, 1, 3).padding(1));
        bin(x, &sigmoid(&a), BinaryOp::Mul)
    }

    fn cab_oracle(x: &Tensor, get: &dyn Fn(&str) -> Tensor, name: &str, r: usize) -> Tensor {
        let (_, c, h, w) = x.dims4().unwrap();
        let avg = kernels::pool2d(x, PoolKind::Avg, (h, w), (1, 1)).unwrap();
        let max = kernels::pool2d(x, PoolKind::Max, (h, w), (1, 1)).unwrap();
        let m = kernels::concat_channels(&[&avg, &max]).unwrap();
        let m = conv(&m, &get(&format!("{name}.cbl.conv.weight")), None, ConvSpec::new(2 * c, 2 * c, 1));
        let m = kernels::activation(&bn_eval(&m, get, &format!("{name}.cbl.bn")), Activation::LeakyRelu(0.1));
        let gate = |part: &Tensor, gname: &str| {
            let y = conv(part, &get(&format!("{name}.{gname}.reduce.weight")), None, ConvSpec::new(c, c / r, 1));
            let y = kernels::activation(&bn_eval(&y, get, &format!("{name}.{gname}.bn")), Activation::Relu);
            let y = conv(
                &y,
                &get(&format!("{name}.{gname}.expand.weight")),
                Some(&get(&format!("{name}.{gname}.expand.bias"))),
                ConvSpec::new(c / r, c, 1),
            );
            sigmoid(&y)
        };
        let fa = gate(&kernels::slice_channels(&m, 0, c).unwrap(), "gate_avg");
        let fm = gate(&kernels::slice_channels(&m, c, c).unwrap(), "gate_max");
        bin(&bin(x, &fa, BinaryOp::Mul), &fm, BinaryOp::Mul)
    }

    fn scb_oracle(x: &Tensor, get: &dyn Fn(&str) -> Tensor, name: &str) -> Tensor {
        let c = x.shape()[1];
        let up = kernels::upsample_bilinear2x(x).unwrap();
        let y = conv(&up, &get(&format!("{name}.dw.weight")), None, ConvSpec::depthwise(c, 3, 1));
        let y = kernels::pool2d(&y, PoolKind::Avg, (2, 2), (2, 2)).unwrap();
        sigmoid(&bin(x, &y, BinaryOp::Add))
    }

    fn head_config() -> HeadConfig {
        HeadConfig::default()
    }

    #[test]
    fn sab_matches_transcription() {
        let mut init = Init::new(rng(1));
        let sab = Sab::new(&mut init, "sab").unwrap();
        let mut store = init.store;
        let x = Tensor::uniform(&[1, 4, 4, 4], -1.0, 1.0, &mut rng(2));
        let y = run(&mut store, &x, |s, x| sab.forward(s, x));
        assert_eq!(y.shape(), x.shape());
        assert!(y.max_abs_diff(&sab_oracle(&x, &getter(&store), "sab")) < 1e-6);

        let c = Tensor::full(&[1, 4, 3, 3], 0.7);
        let avg = kernels::channel_pool(&c, PoolKind::Avg).unwrap();
        let max = kernels::channel_pool(&c, PoolKind::Max).unwrap();
        assert!(avg.max_abs_diff(&max) < 1e-7);
    }

    #[test]
    fn cab_gates_and_transcription() {
        let mut init = Init::new(rng(3));
        let cab = Cab::new(&mut init, "cab", 8, 4, 0.1).unwrap();
        let mut store = init.store;
        randomize(&mut store, 4);
        let x = Tensor::uniform(&[1, 8, 4, 4], -1.0, 1.0, &mut rng(5));
        let y = run(&mut store, &x, |s, x| cab.forward(s, x));
        assert!(y.max_abs_diff(&cab_oracle(&x, &getter(&store), "cab", 4)) < 1e-6);

        cab.gate_avg.force(&mut store, 200.0);
        cab.gate_max.force(&mut store, 200.0);
        assert_eq!(run(&mut store, &x, |s, x| cab.forward(s, x)), x);
        cab.gate_max.force(&mut store, -200.0);
        assert_eq!(run(&mut store, &x, |s, x| cab.forward(s, x)).max_abs(), 0.0);

        assert!(Cab::new(&mut Init::new(rng(0)), "cab", 6, 4, 0.1).is_err());
    }

    #[test]
    fn scb_range_degenerate_and_transcription() {
        let mut init = Init::new(rng(6));
        let scb = Scb::new(&mut init, "scb", 2).unwrap();
        let mut store = init.store;
        let x = Tensor::uniform(&[1, 2, 4, 4], -3.0, 3.0, &mut rng(7));
        let y = run(&mut store, &x, |s, x| scb.forward(s, x));
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(y.max_abs_diff(&scb_oracle(&x, &getter(&store), "scb")) < 1e-6);

        scb.dw.zero(&mut store);
        assert_eq!(run(&mut store, &x, |s, x| scb.forward(s, x)), sigmoid(&x));
    }

    #[test]
    fn fusion_identity_and_transcription() {
        let mut init = Init::new(rng(8));
        let head = Sc2Head::new(&mut init, "head", 8, &head_config()).unwrap();
        let mut store = init.store;
        randomize(&mut store, 9);
        let x = Tensor::uniform(&[1, 8, 8, 6], -1.0, 1.0, &mut rng(10));
        let y = run(&mut store, &x, |s, x| head.forward(s, x));
        assert_eq!(y.shape(), x.shape());

        let get = getter(&store);
        let sa = sab_oracle(&x, &get, "head.sab");
        let ca = cab_oracle(&x, &get, "head.cab", 4);
        let sc = scb_oracle(&x, &get, "head.scb");
        let cat = kernels::concat_channels(&[&sa, &ca]).unwrap();
        let sc2 = kernels::concat_channels(&[&sc, &sc]).unwrap();
        let fused = conv(&bin(&cat, &sc2, BinaryOp::Mul), &get("head.fuse.weight"), Some(&get("head.fuse.bias")), ConvSpec::new(16, 8, 1));
        let expected = bin(&fused, &x, BinaryOp::Add);
        assert!(y.max_abs_diff(&expected) < 1e-5);
        drop(get);

        head.zero_final(&mut store);
        assert_eq!(run(&mut store, &x, |s, x| head.forward(s, x)), x);
    }

    fn check_block(store: &ParamStore, shape: &[usize], seed: u64, f: impl Fn(&mut Session, Var) -> Result<Var>) -> f64 {
        let mut x = Tensor::uniform(shape, -1.0, 1.0, &mut rng(seed));
        separate_maxima(&mut x, 0.1).unwrap();
        let probe = Tensor::uniform(shape, -1.0, 1.0, &mut rng(seed + 1));
        grad_check(
            |g, x| {
                let mut st = store.clone();
                let mut s = Session::new(g, &mut st, NormMode::Eval, false);
                let y = f(&mut s, x)?;
                let p = s.g.constant(probe.clone());
                s.g.mul(y, p)
            },
            &x,
            BLOCK_EPS,
        )
        .unwrap()
        .max_rel_error
    }

    #[test]
    fn head_blocks_pass_grad_check() {
        let mut init = Init::new(rng(11));
        let head = Sc2Head::new(&mut init, "head", 8, &head_config()).unwrap();
        let store = init.store;
        let shape = [1, 8, 4, 4];
        let sab = check_block(&store, &shape, 12, |s, x| head.sab.forward(s, x));
        let cab = check_block(&store, &shape, 13, |s, x| head.cab.forward(s, x));
        let scb = check_block(&store, &shape, 14, |s, x| head.scb.forward(s, x));
        let fusion = check_block(&store, &shape, 15, |s, x| head.forward(s, x));
        for (name, e) in [("sab", sab), ("cab", cab), ("scb", scb), ("fusion", fusion)] {
            assert!(e < 5e-3, "{name}: {e}");
        }
    }

    fn tiny_geometry() -> HeadGeometry {
        HeadGeometry {
            in_channels: 4,
            feat_h: 2,
            feat_w: 3,
            keypoints: 16,
            x_bins: 12,
            y_bins: 8,
            split_ratio: 2.0,
            input_width: 6,
            input_height: 4,
        }
    }

    #[test]
    fn simcc_shapes_and_zero_logits() {
        let geo = ModelConfig::desk().head_geometry();
        let mut init = Init::new(rng(16));
        let head = SimccHead::new(&mut init, "simcc", geo).unwrap();
        let mut store = init.store;
        let feats = Tensor::uniform(&[2, 64, 24, 32], -1.0, 1.0, &mut rng(17));
        let mut g = Graph::inference();
        let mut s = Session::new(&mut g, &mut store, NormMode::Eval, false);
        let fv = s.g.constant(feats.clone());
        let (xl, yl) = head.forward(&mut s, fv).unwrap();
        assert_eq!(s.g.shape(xl), &[2, 16, 512]);
        assert_eq!(s.g.shape(yl), &[2, 16, 384]);

        for t in store.params_mut() {
            t.data_mut().fill(0.0);
        }
        let mut g = Graph::inference();
        let mut s = Session::new(&mut g, &mut store, NormMode::Eval, false);
        let fv = s.g.constant(feats);
        let (xl, yl) = head.forward(&mut s, fv).unwrap();
        assert_eq!(s.g.value(xl).max_abs(), 0.0);
        assert_eq!(s.g.value(yl).max_abs(), 0.0);
    }

    #[test]
    fn simcc_head_grad_check() {
        let geo = tiny_geometry();
        let mut init = Init::new(rng(18));
        let head = SimccHead::new(&mut init, "simcc", geo).unwrap();
        let store = init.store;
        let probe_x = Tensor::uniform(&[1, 16, 12], -1.0, 1.0, &mut rng(19));
        let probe_y = Tensor::uniform(&[1, 16, 8], -1.0, 1.0, &mut rng(20));
        let x = Tensor::uniform(&[1, 4, 2, 3], -1.0, 1.0, &mut rng(21));
        let r = grad_check(
            |g, x| {
                let mut st = store.clone();
                let mut s = Session::new(g, &mut st, NormMode::Eval, false);
                let (xl, yl) = head.forward(&mut s, x)?;
                let (px, py) = (s.g.constant(probe_x.clone()), s.g.constant(probe_y.clone()));
                let a = s.g.mul(xl, px)?;
                let b = s.g.mul(yl, py)?;
                let (a, b) = (s.g.sum(a)?, s.g.sum(b)?);
                s.g.add(a, b)
            },
            &x,
            BLOCK_EPS,
        )
        .unwrap();
        assert!(r.max_rel_error < 5e-3, "{r:?}");
    }

    #[test]
    fn decode_examples() {
        let mut xl = Tensor::zeros(&[1, 1, 512]);
        xl.data_mut()[100] = 50.0;
        let yl = Tensor::zeros(&[1, 1, 384]);
        let p = simcc_decode(&xl, &yl, 2.0).unwrap()[0][0];
        assert_eq!(p.x, 50.0);
        assert_eq!(p.y, 0.0);

        let p = simcc_decode(&Tensor::zeros(&[1, 1, 512]), &yl, 2.0).unwrap()[0][0];
        assert_eq!((p.x, p.y), (0.0, 0.0));
        assert!((p.score - (1.0 / (512.0 * 384.0f64)).sqrt()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn decode_matches_brute_force(seed in any::<u64>(), wb in 1usize..20, hb in 1usize..20) {
            let mut r = rng(seed);
            // Coarse values so exact ties happen often.
            let mut draw = |n: usize| Tensor::from_fn(&[2, 3, n], |_| r.gen_range(0..4) as f32);
            let (xl, yl) = (draw(wb), draw(hb));
            let preds = simcc_decode(&xl, &yl, 2.0).unwrap();
            for n in 0..2 {
                for k in 0..3 {
                    let brute = |t: &Tensor, bins: usize| {
                        let row: Vec<f64> = (0..bins).map(|b| f64::from(t.at(&[n, k, b]))).collect();
                        let mut best = 0;
                        for b in 0..bins {
                            if row.iter().all(|&v| row[b] >= v) { best = b; break; }
                        }
                        let z: f64 = row.iter().map(|v| v.exp()).sum();
                        (best, row[best].exp() / z)
                    };
                    let (bx, px) = brute(&xl, wb);
                    let (by, py) = brute(&yl, hb);
                    let p = preds[n][k];
                    prop_assert_eq!(p.x, bx as f64 / 2.0);
                    prop_assert_eq!(p.y, by as f64 / 2.0);
                    prop_assert!((p.score - (px * py).sqrt()).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn encode_decode_round_trip(xs in prop::collection::vec((0.0f64..6.0, 0.0f64..4.0), 16)) {
            let geo = tiny_geometry();
            let kps: Vec<Keypoint> = xs.iter().map(|&(x, y)| Keypoint::new(x.min(5.5), y.min(3.5), 2)).collect();
            let t = simcc_encode(&[kps.clone()], &geo, 1.0).unwrap();
            prop_assert_eq!(t.clamped, 0);
            let logits_x = t.x.map(|p| p.max(1e-30).ln());
            let logits_y = t.y.map(|p| p.max(1e-30).ln());
            let preds = simcc_decode(&logits_x, &logits_y, geo.split_ratio).unwrap();
            for (p, k) in preds[0].iter().zip(&kps) {
                prop_assert!((p.x - k.x).abs() <= 0.25 + 1e-6);
                prop_assert!((p.y - k.y).abs() <= 0.25 + 1e-6);
            }
        }
    }

    #[test]
    fn loss_floor_masking_and_hand_case() {
        let geo = tiny_geometry();
        let mut kps = vec![Keypoint::default(); 16];
        kps[3] = Keypoint::new(2.2, 1.4, 1);
        let t = simcc_encode(&[kps.clone()], &geo, 1.5).unwrap();
        let lx = t.x.map(|p| p.ln());
        let ly = t.y.map(|p| if p > 0.0 { p.ln() } else { 0.0 });
        let lx = lx.map(|v| if v.is_finite() { v } else { 0.0 });
        let ce = simcc_loss_value(&lx, &ly, &t, LossKind::CrossEntropy).unwrap();
        assert!((ce - target_entropy(&t)).abs() < 1e-5, "{ce} vs {}", target_entropy(&t));
        assert!(simcc_loss_value(&lx, &ly, &t, LossKind::Kl).unwrap().abs() < 1e-5);

        let hidden = vec![Keypoint::new(1.0, 1.0, 0); 16];
        let t0 = simcc_encode(&[hidden], &geo, 1.5).unwrap();
        let z = Tensor::uniform(&[1, 16, 12], -1.0, 1.0, &mut rng(1));
        let zy = Tensor::uniform(&[1, 16, 8], -1.0, 1.0, &mut rng(2));
        assert_eq!(simcc_loss_value(&z, &zy, &t0, LossKind::CrossEntropy).unwrap(), 0.0);

        // 8-bin hand case on the y axis with uniform logits: CE = ln 8 regardless of target.
        let mut kps = vec![Keypoint::default(); 16];
        kps[0] = Keypoint::new(0.0, 2.0, 2);
        let t = simcc_encode(&[kps], &geo, 1.0).unwrap();
        let (zx, zy) = (Tensor::zeros(&[1, 16, 12]), Tensor::zeros(&[1, 16, 8]));
        let ce = simcc_loss_value(&zx, &zy, &t, LossKind::CrossEntropy).unwrap();
        assert!((ce - (12f64.ln() + 8f64.ln())).abs() < 1e-6);

        // Non-uniform hand case: y target centred on bin 4, logits [0, 1, ..., 7].
        let zy = Tensor::from_fn(&[1, 16, 8], |i| (i % 8) as f32);
        let ty: Vec<f64> = {
            let raw: Vec<f64> = (0..8).map(|b| (-(b as f64 - 4.0).powi(2) / 2.0).exp()).collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|v| v / s).collect()
        };
        let lse = (0..8).map(|b| (b as f64).exp()).sum::<f64>().ln();
        let hand_y: f64 = (0..8).map(|b| -ty[b] * (b as f64 - lse)).sum();
        let ce = simcc_loss_value(&zx, &zy, &t, LossKind::CrossEntropy).unwrap();
        assert!((ce - (12f64.ln() + hand_y)).abs() < 1e-5);
    }

    #[test]
    fn out_of_crop_targets_are_clamped_and_counted() {
        let geo = tiny_geometry();
        let mut kps = vec![Keypoint::default(); 16];
        kps[0] = Keypoint::new(-3.0, 10.0, 2);
        let t = simcc_encode(&[kps], &geo, 1.0).unwrap();
        assert_eq!(t.clamped, 2);
        let p = simcc_decode(&t.x.map(|p| p.max(1e-30).ln()), &t.y.map(|p| p.max(1e-30).ln()), 2.0).unwrap();
        assert_eq!((p[0][0].x, p[0][0].y), (0.0, 3.5));
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let geo = tiny_geometry();
        let mut kps = vec![Keypoint::default(); 16];
        kps[2] = Keypoint::new(1.3, 2.1, 2);
        kps[9] = Keypoint::new(4.9, 0.4, 1);
        let t = simcc_encode(&[kps], &geo, 1.0).unwrap();
        let zy = Tensor::uniform(&[1, 16, 8], -1.0, 1.0, &mut rng(3));
        let zx = Tensor::uniform(&[1, 16, 12], -1.0, 1.0, &mut rng(4));
        for kind in [LossKind::CrossEntropy, LossKind::Kl] {
            let r = grad_check(
                |g, x| {
                    let y = g.constant(zy.clone());
                    simcc_loss(g, x, y, &t, kind)
                },
                &zx,
                1e-2,
            )
            .unwrap();
            assert!(r.max_rel_error < 5e-3, "{r:?}");
        }
    }
}
