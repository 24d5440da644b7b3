//! Model configuration and its TOML file format.
//!
//! ```toml
//! input_width = 256
//! input_height = 192
//! image_channels = 3
//! stem_channels = 16
//! output_stride = 8
//! wavelet_levels = 1
//! use_sfe = true
//! use_ra = true
//! use_sc2head = true
//!
//! [[stages]]
//! kind = "inverted_residual"   # or "sfe", "ra"
//! in_channels = 16
//! out_channels = 24
//! stride = 2
//! expansion = 4                # inverted residual only
//!
//! [head]
//! keypoints = 16
//! split_ratio = 2.0
//! reduction = 4
//! target_sigma = 6.0
//! cbl_slope = 0.1
//! ```

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::skeleton::NUM_KEYPOINTS;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    InvertedResidual,
    Sfe,
    Ra,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub kind: StageKind,
    pub in_channels: usize,
    pub out_channels: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default = "one")]
    pub expansion: usize,
}

fn one() -> usize {
    1
}

impl StageConfig {
    pub fn inverted_residual(in_channels: usize, out_channels: usize, stride: usize, expansion: usize) -> Self {
        Self { kind: StageKind::InvertedResidual, in_channels, out_channels, stride, expansion }
    }

    pub fn sfe(channels: usize) -> Self {
        Self { kind: StageKind::Sfe, in_channels: channels, out_channels: channels, stride: 1, expansion: 1 }
    }

    pub fn ra(channels: usize) -> Self {
        Self { kind: StageKind::Ra, in_channels: channels, out_channels: channels, stride: 1, expansion: 1 }
    }

    /// Residual addition happens only for stride 1 with matching channels.
    pub fn has_residual(&self) -> bool {
        self.stride == 1 && self.in_channels == self.out_channels
    }

    fn validate(&self, index: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("stage {index}: {msg}")));
        if self.stride != 1 && self.stride != 2 {
            return bad(format!("stride must be 1 or 2, got {}", self.stride));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        match self.kind {
            StageKind::InvertedResidual if self.expansion == 0 => bad("expansion ratio must be >= 1".into()),
            StageKind::Sfe | StageKind::Ra if self.in_channels != self.out_channels || self.stride != 1 => {
                bad(format!("{:?} blocks keep shape: need in == out channels and stride 1", self.kind))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    #[serde(default = "default_keypoints")]
    pub keypoints: usize,
    #[serde(default = "default_split_ratio")]
    pub split_ratio: f32,
    /// Channel-attention bottleneck ratio `r`.
    #[serde(default = "default_reduction")]
    pub reduction: usize,
    /// Standard deviation of the training targets, in bins.
    #[serde(default = "default_target_sigma")]
    pub target_sigma: f32,
    /// Negative slope of the LeakyReLU inside the channel-attention mixer.
    #[serde(default = "default_cbl_slope")]
    pub cbl_slope: f32,
}

fn default_keypoints() -> usize {
    NUM_KEYPOINTS
}
fn default_split_ratio() -> f32 {
    2.0
}
fn default_reduction() -> usize {
    4
}
fn default_target_sigma() -> f32 {
    6.0
}
fn default_cbl_slope() -> f32 {
    0.1
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            keypoints: default_keypoints(),
            split_ratio: default_split_ratio(),
            reduction: default_reduction(),
            target_sigma: default_target_sigma(),
            cbl_slope: default_cbl_slope(),
        }
    }
}

/// Resolved head shapes for one model configuration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadGeometry {
    pub in_channels: usize,
    pub feat_h: usize,
    pub feat_w: usize,
    pub keypoints: usize,
    pub x_bins: usize,
    pub y_bins: usize,
    pub split_ratio: f32,
    pub input_width: usize,
    pub input_height: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Toggle {
    NoSfe,
    NoRa,
    NoSc2Head,
}

impl std::str::FromStr for Toggle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no-sfe" => Ok(Toggle::NoSfe),
            "no-ra" => Ok(Toggle::NoRa),
            "no-sc2head" => Ok(Toggle::NoSc2Head),
            other => Err(Error::Config(format!("unknown toggle {other:?} (expected no-sfe, no-ra or no-sc2head)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_width: usize,
    pub input_height: usize,
    #[serde(default = "default_image_channels")]
    pub image_channels: usize,
    pub stem_channels: usize,
    #[serde(default = "default_output_stride")]
    pub output_stride: usize,
    #[serde(default = "one")]
    pub wavelet_levels: usize,
    #[serde(default = "yes")]
    pub use_sfe: bool,
    #[serde(default = "yes")]
    pub use_ra: bool,
    #[serde(default = "yes")]
    pub use_sc2head: bool,
    pub stages: Vec<StageConfig>,
    #[serde(default)]
    pub head: HeadConfig,
}

fn default_image_channels() -> usize {
    3
}
fn default_output_stride() -> usize {
    8
}
fn yes() -> bool {
    true
}

impl ModelConfig {
    /// Reference desk configuration: 3×3/2 stem to 16 channels, inverted
    /// residuals 16→24/2, 24→32/2, an SFE block at 32, 32→64/1, an RA block at 64.
    pub fn desk() -> Self {
        Self {
            input_width: 256,
            input_height: 192,
            image_channels: 3,
            stem_channels: 16,
            output_stride: 8,
            wavelet_levels: 1,
            use_sfe: true,
            use_ra: true,
            use_sc2head: true,
            stages: vec![
                StageConfig::inverted_residual(16, 24, 2, 4),
                StageConfig::inverted_residual(24, 32, 2, 4),
                StageConfig::sfe(32),
                StageConfig::inverted_residual(32, 64, 1, 4),
                StageConfig::ra(64),
            ],
            head: HeadConfig::default(),
        }
    }

    pub fn with_toggle(mut self, toggle: Toggle) -> Self {
        match toggle {
            Toggle::NoSfe => self.use_sfe = false,
            Toggle::NoRa => self.use_ra = false,
            Toggle::NoSc2Head => self.use_sc2head = false,
        }
        self
    }

    pub fn with_resolution(mut self, width: usize, height: usize) -> Self {
        self.input_width = width;
        self.input_height = height;
        self
    }

    /// Stages that are actually built once toggles are applied.
    pub fn active_stages(&self) -> impl Iterator<Item = (usize, &StageConfig)> {
        self.stages.iter().enumerate().filter(|(_, s)| match s.kind {
            StageKind::Sfe => self.use_sfe,
            StageKind::Ra => self.use_ra,
            StageKind::InvertedResidual => true,
        })
    }

    pub fn final_channels(&self) -> usize {
        self.stages.last().map_or(self.stem_channels, |s| s.out_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_width == 0 || self.input_height == 0 {
            return Err(Error::Config("input resolution must be positive".into()));
        }
        if self.image_channels == 0 || self.stem_channels == 0 {
            return Err(Error::Config("image and stem channels must be positive".into()));
        }
        if self.wavelet_levels != 1 {
            return Err(Error::Config(format!("only one wavelet level is supported, got {}", self.wavelet_levels)));
        }
        let mut channels = self.stem_channels;
        let mut stride = 2;
        for (i, s) in self.stages.iter().enumerate() {
            s.validate(i)?;
            if s.in_channels != channels {
                return Err(Error::Config(format!(
                    "stage {i} expects {} input channels but the previous stage produces {channels}",
                    s.in_channels
                )));
            }
            channels = s.out_channels;
            stride *= s.stride;
        }
        if stride != self.output_stride {
            return Err(Error::Config(format!(
                "stem and stage strides multiply to {stride}, but output_stride is {}",
                self.output_stride
            )));
        }
        if self.input_width % stride != 0 || self.input_height % stride != 0 {
            return Err(Error::Config(format!(
                "input {}x{} is not divisible by the output stride {stride}",
                self.input_width, self.input_height
            )));
        }
        let h = &self.head;
        if h.keypoints != NUM_KEYPOINTS {
            return Err(Error::Config(format!("head predicts {} keypoints, the skeleton has {NUM_KEYPOINTS}", h.keypoints)));
        }
        if !(h.split_ratio > 0.0) || !(h.target_sigma > 0.0) {
            return Err(Error::Config("split_ratio and target_sigma must be positive".into()));
        }
        if self.x_bins() < 1 || self.y_bins() < 1 {
            return Err(Error::Config("coordinate bin counts must be at least 1".into()));
        }
        if h.reduction == 0 || channels % h.reduction != 0 {
            return Err(Error::Config(format!(
                "head channels {channels} are not divisible by the channel-attention reduction {}",
                h.reduction
            )));
        }
        if !(h.cbl_slope > 0.0 && h.cbl_slope < 1.0) {
            return Err(Error::Config(format!("cbl_slope must lie in (0, 1), got {}", h.cbl_slope)));
        }
        Ok(())
    }

    pub fn x_bins(&self) -> usize {
        (self.input_width as f32 * self.head.split_ratio).round() as usize
    }

    pub fn y_bins(&self) -> usize {
        (self.input_height as f32 * self.head.split_ratio).round() as usize
    }

    pub fn head_geometry(&self) -> HeadGeometry {
        HeadGeometry {
            in_channels: self.final_channels(),
            feat_h: self.input_height / self.output_stride,
            feat_w: self.input_width / self.output_stride,
            keypoints: self.head.keypoints,
            x_bins: self.x_bins(),
            y_bins: self.y_bins(),
            split_ratio: self.head.split_ratio,
            input_width: self.input_width,
            input_height: self.input_height,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(format!("cannot parse config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// SHA-256 of the canonical TOML rendering, hex encoded.
    pub fn hash(&self) -> String {
        let text = self.to_toml().unwrap_or_default();
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}
