//! Haar wavelet analysis/synthesis, per-subband convolution and the fixed
//! Gaussian smoothing used by the spatial-frequency block.

use crate::error::{Error, Result};
use crate::tensor::kernels;
use crate::tensor::{ConvSpec, Graph, Tensor, Var};

/// One-level subbands, each `[N, C, H/2, W/2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletBands {
    pub ll: Tensor,
    pub lh: Tensor,
    pub hl: Tensor,
    pub hh: Tensor,
}

impl WaveletBands {
    /// Concatenates along channels as `[ll | lh | hl | hh]`.
    pub fn stack(&self) -> Result<Tensor> {
        let shape = self.ll.shape();
        for (name, b) in [("lh", &self.lh), ("hl", &self.hl), ("hh", &self.hh)] {
            if b.shape() != shape {
                return Err(Error::shape("wavelet bands", format!("{name} has shape {:?}, ll has {:?}", b.shape(), shape)));
            }
        }
        kernels::concat_channels(&[&self.ll, &self.lh, &self.hl, &self.hh])
    }

    pub fn unstack(stacked: &Tensor) -> Result<Self> {
        let (_, c4, _, _) = stacked.dims4()?;
        if c4 % 4 != 0 {
            return Err(Error::shape("wavelet bands", format!("{c4} stacked channels is not a multiple of 4")));
        }
        let c = c4 / 4;
        Ok(Self {
            ll: kernels::slice_channels(stacked, 0, c)?,
            lh: kernels::slice_channels(stacked, c, c)?,
            hl: kernels::slice_channels(stacked, 2 * c, c)?,
            hh: kernels::slice_channels(stacked, 3 * c, c)?,
        })
    }

    pub fn energy(&self) -> f64 {
        [&self.ll, &self.lh, &self.hl, &self.hh]
            .iter()
            .flat_map(|b| b.data())
            .map(|&v| f64::from(v).powi(2))
            .sum()
    }
}

/// Orthonormal one-level Haar analysis. Odd spatial sizes are rejected.
pub fn dwt2_haar(x: &Tensor) -> Result<WaveletBands> {
    WaveletBands::unstack(&kernels::haar_analysis(x)?)
}

/// Exact inverse of [`dwt2_haar`].
pub fn idwt2_haar(bands: &WaveletBands) -> Result<Tensor> {
    kernels::haar_synthesis(&bands.stack()?)
}

/// Depthwise geometry applied to the `4C` stacked subbands.
pub fn subband_conv_spec(channels: usize) -> ConvSpec {
    ConvSpec::depthwise(4 * channels, 3, 1)
}

/// `IWT(Conv(W, WT(x)))` with `weights` of shape `[4C, 1, 3, 3]`, one kernel
/// per channel of each subband in `ll, lh, hl, hh` order, zero padding 1.
pub fn wtconv(x: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let (_, c, _, _) = x.dims4()?;
    let bands = kernels::haar_analysis(x)?;
    let filtered = kernels::conv2d(&bands, weights, None, &subband_conv_spec(c))?;
    kernels::haar_synthesis(&filtered)
}

/// Tape version of [`wtconv`].
pub fn wtconv_op(g: &mut Graph, x: Var, weights: Var) -> Result<Var> {
    let (_, c, _, _) = g.value(x).dims4()?;
    let bands = g.haar_analysis(x)?;
    let filtered = g.conv2d(bands, weights, None, subband_conv_spec(c))?;
    g.haar_synthesis(filtered)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianKernel {
    pub size: usize,
    pub sigma: f64,
    /// Row-major `size × size`, normalized to sum 1.
    pub weights: Vec<f64>,
}

impl GaussianKernel {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.size + j]
    }

    /// Depthwise weight tensor `[C, 1, size, size]`.
    pub fn depthwise_weight(&self, channels: usize) -> Tensor {
        let k = self.size * self.size;
        Tensor::from_fn(&[channels, 1, self.size, self.size], |i| self.weights[i % k] as f32)
    }
}

pub const SMOOTH_SIZE: usize = 5;
pub const SMOOTH_SIGMA: f64 = 1.0;

/// `w[i][j] ∝ exp(-((i-c)² + (j-c)²) / (2σ²))`, normalized to sum 1.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Result<GaussianKernel> {
    if size % 2 == 0 || size == 0 {
        return Err(Error::InvalidArgument(format!("Gaussian kernel size must be odd, got {size}")));
    }
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("Gaussian sigma must be positive, got {sigma}")));
    }
    let c = (size / 2) as f64;
    let mut weights: Vec<f64> = (0..size * size)
        .map(|idx| {
            let (i, j) = ((idx / size) as f64, (idx % size) as f64);
            (-((i - c).powi(2) + (j - c).powi(2)) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok(GaussianKernel { size, sigma, weights })
}

fn smoothing_kernel() -> GaussianKernel {
    gaussian_kernel(SMOOTH_SIZE, SMOOTH_SIGMA).expect("fixed kernel parameters are valid")
}

/// Per-channel 5×5, σ = 1 smoothing with reflect padding; shape preserved.
pub fn gaussian_smooth(x: &Tensor) -> Result<Tensor> {
    let (_, c, h, w) = x.dims4()?;
    check_spatial(h, w)?;
    let k = smoothing_kernel();
    let padded = kernels::pad_reflect(x, SMOOTH_SIZE / 2)?;
    kernels::conv2d(&padded, &k.depthwise_weight(c), None, &smooth_spec(c))
}

/// Tape version of [`gaussian_smooth`]; the kernel is a constant.
pub fn gaussian_smooth_op(g: &mut Graph, x: Var) -> Result<Var> {
    let (_, c, h, w) = g.value(x).dims4()?;
    check_spatial(h, w)?;
    let weight = g.constant(smoothing_kernel().depthwise_weight(c));
    let padded = g.pad_reflect(x, SMOOTH_SIZE / 2)?;
    g.conv2d(padded, weight, None, smooth_spec(c))
}

fn smooth_spec(c: usize) -> ConvSpec {
    ConvSpec::new(c, c, SMOOTH_SIZE).groups(c)
}

fn check_spatial(h: usize, w: usize) -> Result<()> {
    if h < 1 || w < 1 {
        return Err(Error::InvalidArgument(format!("gaussian_smooth needs spatial dims >= 1, got {h}x{w}")));
    }
    Ok(())
}
