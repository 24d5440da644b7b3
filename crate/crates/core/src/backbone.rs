//! Backbone blocks: stem, inverted residual, spatial-frequency enhancement
//! (SFE) and receptive aggregation (RA), plus the stage-wise assembly.

use crate::config::{ModelConfig, StageConfig, StageKind};
use crate::error::{Error, Result};
use crate::freq::{gaussian_smooth_op, subband_conv_spec, wtconv_op, SMOOTH_SIZE};
use crate::nn::{Conv2d, ConvBn, Init, LayerNorm, ParamId, ParamStore, Session};
use crate::profiler::{CostRow, LayerKind};
use crate::tensor::{Activation, ConvSpec, Var};

/// Expand (1×1) → hardswish → depthwise 3×3 → hardswish → linear project (1×1),
/// each convolution followed by batch norm; skip connection when shapes allow.
#[derive(Clone, Debug)]
pub struct InvertedResidual {
    pub cfg: StageConfig,
    pub expand: Option<ConvBn>,
    pub dw: ConvBn,
    pub project: ConvBn,
}

impl InvertedResidual {
    pub fn new(init: &mut Init, name: &str, cfg: &StageConfig) -> Result<Self> {
        let hidden = cfg.in_channels * cfg.expansion;
        let act = Some(Activation::HardSwish);
        let expand = if cfg.expansion > 1 {
            Some(ConvBn::new(init, &format!("{name}.expand"), ConvSpec::new(cfg.in_channels, hidden, 1), act)?)
        } else {
            None
        };
        let dw_spec = ConvSpec::depthwise(hidden, 3, 1).stride(cfg.stride);
        Ok(Self {
            cfg: cfg.clone(),
            expand,
            dw: ConvBn::new(init, &format!("{name}.dw"), dw_spec, act)?,
            project: ConvBn::new(init, &format!("{name}.project"), ConvSpec::new(hidden, cfg.out_channels, 1), None)?,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let mut y = x;
        if let Some(e) = &self.expand {
            y = e.forward(s, y)?;
        }
        y = self.dw.forward(s, y)?;
        y = self.project.forward(s, y)?;
        if self.cfg.has_residual() {
            y = s.g.add(y, x)?;
        }
        Ok(y)
    }

    pub fn param_count(&self) -> usize {
        self.expand.as_ref().map_or(0, ConvBn::param_count) + self.dw.param_count() + self.project.param_count()
    }

    pub fn cost(&self, name: &str, h: usize, w: usize, rows: &mut Vec<CostRow>) -> Result<(usize, usize)> {
        if let Some(e) = &self.expand {
            e.cost(&format!("{name}.expand"), h, w, rows)?;
        }
        let (oh, ow) = self.dw.cost(&format!("{name}.dw"), h, w, rows)?;
        self.project.cost(&format!("{name}.project"), oh, ow, rows)?;
        if self.cfg.has_residual() {
            rows.push(adds_row(format!("{name}.residual"), self.cfg.out_channels * oh * ow));
        }
        Ok((oh, ow))
    }

    /// Zeroes the projection conv; with the skip connection the block becomes the identity.
    pub fn zero_final(&self, store: &mut ParamStore) {
        self.project.conv.zero(store);
    }
}

/// `F_out = refine(F_wt ⊙ fuse(F_wt + G(F_wt))) + x` with `F_wt = wtconv(x)`.
///
/// Odd spatial sizes are padded by replicating the last row/column and the
/// wavelet output is cropped back before smoothing.
#[derive(Clone, Debug)]
pub struct SfeBlock {
    pub channels: usize,
    pub wt_weight: ParamId,
    pub fuse: Conv2d,
    pub refine: Conv2d,
}

impl SfeBlock {
    pub fn new(init: &mut Init, name: &str, channels: usize) -> Result<Self> {
        let wt_weight = init.uniform(format!("{name}.wt.weight"), &subband_conv_spec(channels).weight_shape(), 9);
        Ok(Self {
            channels,
            wt_weight,
            fuse: Conv2d::new(init, &format!("{name}.fuse"), ConvSpec::new(channels, channels, 1), true)?,
            refine: Conv2d::new(init, &format!("{name}.refine"), ConvSpec::new(channels, channels, 3).padding(1), true)?,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (_, _, h, w) = s.g.value(x).dims4()?;
        let (ph, pw) = (h % 2, w % 2);
        let xp = if ph + pw > 0 { s.g.pad_replicate_end(x, ph, pw)? } else { x };
        let wt = s.p(self.wt_weight);
        let mut f_wt = wtconv_op(s.g, xp, wt)?;
        if ph + pw > 0 {
            f_wt = s.g.crop(f_wt, h, w)?;
        }
        let f_g = gaussian_smooth_op(s.g, f_wt)?;
        let mixed = s.g.add(f_wt, f_g)?;
        let f_tmp = self.fuse.forward(s, mixed)?;
        let gated = s.g.mul(f_wt, f_tmp)?;
        let refined = self.refine.forward(s, gated)?;
        s.g.add(refined, x)
    }

    pub fn param_count(&self) -> usize {
        4 * self.channels * 9 + self.fuse.param_count() + self.refine.param_count()
    }

    pub fn cost(&self, name: &str, h: usize, w: usize, rows: &mut Vec<CostRow>) -> Result<(usize, usize)> {
        let c = self.channels;
        let (eh, ew) = (h + h % 2, w + w % 2);
        // Each Haar coefficient is a ±½ sum of four inputs: 3 adds per output, both directions.
        rows.push(CostRow::transform(format!("{name}.wt.analysis"), (3 * c * eh * ew) as u64));
        let sub = subband_conv_spec(c);
        let (sh, sw) = sub.output_hw(eh / 2, ew / 2)?;
        let [o, i, kh, kw] = sub.weight_shape();
        rows.push(CostRow::new(format!("{name}.wt.subbands"), LayerKind::Conv, (o * i * kh * kw) as u64, (sh * sw * o * i * kh * kw) as u64));
        rows.push(CostRow::transform(format!("{name}.wt.synthesis"), (3 * c * eh * ew) as u64));
        let k2 = SMOOTH_SIZE * SMOOTH_SIZE;
        rows.push(CostRow::new(format!("{name}.gauss"), LayerKind::Conv, 0, (h * w * c * k2) as u64));
        rows.push(adds_row(format!("{name}.sum"), c * h * w));
        rows.push(self.fuse.cost(&format!("{name}.fuse"), h, w)?.0);
        rows.push(CostRow::elementwise(format!("{name}.gate"), (c * h * w) as u64));
        rows.push(self.refine.cost(&format!("{name}.refine"), h, w)?.0);
        rows.push(adds_row(format!("{name}.residual"), c * h * w));
        Ok((h, w))
    }

    /// Zeroes the 3×3 refinement conv so the block reduces to its residual.
    pub fn zero_final(&self, store: &mut ParamStore) {
        self.refine.zero(store);
    }
}

/// Three dilated depthwise 3×3 branches (dilation 1, 3, 5) over `x + b`,
/// summed, layer-normalized over channels, plus the input.
#[derive(Clone, Debug)]
pub struct RaBlock {
    pub channels: usize,
    pub channel_bias: ParamId,
    pub branches: [Conv2d; 3],
    pub norm: LayerNorm,
}

pub const RA_DILATIONS: [usize; 3] = [1, 3, 5];

impl RaBlock {
    pub fn new(init: &mut Init, name: &str, channels: usize) -> Result<Self> {
        let channel_bias = init.constant(format!("{name}.channel_bias"), &[channels], 0.0);
        let mut branch = |i: usize| {
            Conv2d::new(init, &format!("{name}.branch{}", i + 1), ConvSpec::depthwise(channels, 3, RA_DILATIONS[i]), true)
        };
        let branches = [branch(0)?, branch(1)?, branch(2)?];
        Ok(Self { channels, channel_bias, branches, norm: LayerNorm::new(init, &format!("{name}.norm"), channels) })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let bias = s.p(self.channel_bias);
        let bias = s.g.reshape(bias, &[1, self.channels, 1, 1])?;
        let shifted = s.g.add(x, bias)?;
        let mut total: Option<Var> = None;
        for b in &self.branches {
            let y = b.forward(s, shifted)?;
            let y = s.g.hardswish(y)?;
            total = Some(match total {
                Some(t) => s.g.add(t, y)?,
                None => y,
            });
        }
        let normed = self.norm.forward(s, total.expect("three branches"))?;
        s.g.add(normed, x)
    }

    pub fn param_count(&self) -> usize {
        self.channels + self.branches.iter().map(Conv2d::param_count).sum::<usize>() + 2 * self.channels
    }

    pub fn cost(&self, name: &str, h: usize, w: usize, rows: &mut Vec<CostRow>) -> Result<(usize, usize)> {
        let n = self.channels * h * w;
        rows.push(CostRow { adds: n as u64, ..CostRow::new(format!("{name}.channel_bias"), LayerKind::Elementwise, self.channels as u64, 0) });
        for (i, b) in self.branches.iter().enumerate() {
            rows.push(b.cost(&format!("{name}.branch{}", i + 1), h, w)?.0);
        }
        rows.push(adds_row(format!("{name}.sum"), 2 * n));
        rows.push(self.norm.cost(&format!("{name}.norm"), h, w));
        rows.push(adds_row(format!("{name}.residual"), n));
        Ok((h, w))
    }

    /// Zeroes the layer-norm affine parameters so the block reduces to its residual.
    pub fn zero_final(&self, store: &mut ParamStore) {
        store.get_mut(self.norm.gamma).data_mut().fill(0.0);
        store.get_mut(self.norm.beta).data_mut().fill(0.0);
    }
}

fn adds_row(name: String, adds: usize) -> CostRow {
    CostRow { adds: adds as u64, ..CostRow::elementwise(name, 0) }
}

#[derive(Clone, Debug)]
pub enum Stage {
    InvertedResidual(InvertedResidual),
    Sfe(SfeBlock),
    Ra(RaBlock),
}

impl Stage {
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        match self {
            Stage::InvertedResidual(b) => b.forward(s, x),
            Stage::Sfe(b) => b.forward(s, x),
            Stage::Ra(b) => b.forward(s, x),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Stage::InvertedResidual(b) => b.param_count(),
            Stage::Sfe(b) => b.param_count(),
            Stage::Ra(b) => b.param_count(),
        }
    }

    pub fn cost(&self, name: &str, h: usize, w: usize, rows: &mut Vec<CostRow>) -> Result<(usize, usize)> {
        match self {
            Stage::InvertedResidual(b) => b.cost(name, h, w, rows),
            Stage::Sfe(b) => b.cost(name, h, w, rows),
            Stage::Ra(b) => b.cost(name, h, w, rows),
        }
    }

    pub fn zero_final(&self, store: &mut ParamStore) {
        match self {
            Stage::InvertedResidual(b) => b.zero_final(store),
            Stage::Sfe(b) => b.zero_final(store),
            Stage::Ra(b) => b.zero_final(store),
        }
    }
}

/// Stem (3×3 stride-2 conv, BN, hardswish) followed by the configured stages.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub stem: ConvBn,
    /// `(config index, stage)`; disabled blocks are absent but keep their index in names.
    pub stages: Vec<(usize, Stage)>,
    input_hw: (usize, usize),
    image_channels: usize,
}

impl Backbone {
    pub fn new(init: &mut Init, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let stem_spec = ConvSpec::new(cfg.image_channels, cfg.stem_channels, 3).stride(2).padding(1);
        let stem = ConvBn::new(init, "backbone.stem", stem_spec, Some(Activation::HardSwish))?;
        let mut stages = Vec::new();
        for (i, sc) in cfg.active_stages() {
            let name = stage_name(i);
            let stage = match sc.kind {
                StageKind::InvertedResidual => Stage::InvertedResidual(InvertedResidual::new(init, &name, sc)?),
                StageKind::Sfe => Stage::Sfe(SfeBlock::new(init, &name, sc.in_channels)?),
                StageKind::Ra => Stage::Ra(RaBlock::new(init, &name, sc.in_channels)?),
            };
            stages.push((i, stage));
        }
        Ok(Self { stem, stages, input_hw: (cfg.input_height, cfg.input_width), image_channels: cfg.image_channels })
    }

    /// Normalized image `[N, 3, H, W]` to the stride-8 feature map.
    pub fn forward(&self, s: &mut Session, image: Var) -> Result<Var> {
        let (_, c, h, w) = s.g.value(image).dims4()?;
        if (h, w) != self.input_hw || c != self.image_channels {
            return Err(Error::InvalidArgument(format!(
                "backbone expects {}x{}x{} (C x H x W) input, got {c}x{h}x{w}",
                self.image_channels, self.input_hw.0, self.input_hw.1
            )));
        }
        let mut x = self.stem.forward(s, image)?;
        for (_, stage) in &self.stages {
            x = stage.forward(s, x)?;
        }
        Ok(x)
    }

    pub fn param_count(&self) -> usize {
        self.stem.param_count() + self.stages.iter().map(|(_, st)| st.param_count()).sum::<usize>()
    }

    pub fn cost(&self, h: usize, w: usize, rows: &mut Vec<CostRow>) -> Result<(usize, usize)> {
        let mut hw = self.stem.cost("backbone.stem", h, w, rows)?;
        for (i, stage) in &self.stages {
            hw = stage.cost(&stage_name(*i), hw.0, hw.1, rows)?;
        }
        Ok(hw)
    }

    /// Zeroes the final projection of every residual block.
    pub fn zero_final_projections(&self, store: &mut ParamStore) {
        for (_, stage) in &self.stages {
            stage.zero_final(store);
        }
    }
}

pub fn stage_name(index: usize) -> String {
    format!("backbone.stages.{index}")
}
