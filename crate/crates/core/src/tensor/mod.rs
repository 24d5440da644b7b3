//! Dense `f32` tensors, convolution and normalization kernels, and a small
//! reverse-mode tape.
//!
//! Feature maps use `N, C, H, W` order. Raw kernels in [`kernels`] are plain
//! functions over [`Tensor`] values; [`Graph`] records them so that gradients
//! can be pulled back with [`Graph::backward`].

pub mod checkpoint;
mod gemm;
pub mod gradcheck;
mod graph;
pub mod kernels;

pub use graph::{Gradients, Graph, Var};

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} holds {} values but {} were given", shape, numel, data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: f32) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let numel: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..numel).map(&mut f).collect() }
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f32, hi: f32, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| rng.gen_range(lo..hi))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// `(N, C, H, W)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape("dims4", format!("expected rank 4 (N,C,H,W), got shape {:?}", self.shape))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot reshape {:?} into {:?}", self.shape, shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Value at a multi-index.
    pub fn at(&self, index: &[usize]) -> f32 {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut offset = 0;
        for (i, (&ix, &extent)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < extent, "index {ix} out of range for axis {i} of extent {extent}");
            offset = offset * extent + ix;
        }
        self.data[offset]
    }

    pub fn sum(&self) -> f32 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on differently shaped tensors");
        self.data.iter().zip(&other.data).fold(0.0f32, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(&self, op: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(op.to_string()))
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Geometry of a 2D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub groups: usize,
}

impl ConvSpec {
    /// Square kernel, stride 1, no padding, dense.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
            groups: 1,
        }
    }

    /// Depthwise square kernel with "same" padding for stride 1.
    pub fn depthwise(channels: usize, kernel: usize, dilation: usize) -> Self {
        Self::new(channels, channels, kernel)
            .groups(channels)
            .dilation(dilation)
            .padding(dilation * (kernel - 1) / 2)
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = (s, s);
        self
    }

    pub fn padding(mut self, p: usize) -> Self {
        self.padding = (p, p);
        self
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = (d, d);
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups > 1 && self.groups == self.in_channels && self.groups == self.out_channels
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels / self.groups, self.kernel.0, self.kernel.1]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(format!("conv spec: {msg}")));
        if self.in_channels == 0 || self.out_channels == 0 || self.groups == 0 {
            return bad(format!(
                "channel counts and groups must be positive (in {}, out {}, groups {})",
                self.in_channels, self.out_channels, self.groups
            ));
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return bad(format!(
                "in_channels {} and out_channels {} must both be divisible by groups {}",
                self.in_channels, self.out_channels, self.groups
            ));
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 || self.stride.0 == 0 || self.stride.1 == 0 {
            return bad("kernel and stride must be positive".into());
        }
        if self.dilation.0 == 0 || self.dilation.1 == 0 {
            return bad("dilation must be positive".into());
        }
        Ok(())
    }

    /// Output spatial size for an `h × w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let axis = |name: &str, len: usize, k: usize, s: usize, p: usize, d: usize| -> Result<usize> {
            let span = d * (k - 1) + 1;
            let padded = len + 2 * p;
            if padded < span {
                return Err(Error::shape(
                    "conv2d",
                    format!("output {name} would be non-positive: input {len} + 2*pad {p} < dilated kernel span {span}"),
                ));
            }
            Ok((padded - span) / s + 1)
        };
        Ok((
            axis("height", h, self.kernel.0, self.stride.0, self.padding.0, self.dilation.0)?,
            axis("width", w, self.kernel.1, self.stride.1, self.padding.1, self.dilation.1)?,
        ))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f32),
    Sigmoid,
    HardSwish,
}

impl Activation {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Activation::LeakyRelu(slope) if !(slope > 0.0 && slope < 1.0) => Err(Error::InvalidArgument(format!(
                "leaky_relu slope must lie in (0, 1), got {slope}"
            ))),
            _ => Ok(()),
        }
    }

    /// Parses `relu`, `sigmoid`, `hardswish` or `leaky_relu:<slope>`.
    pub fn parse(name: &str) -> Result<Self> {
        let act = match name {
            "relu" => Activation::Relu,
            "sigmoid" => Activation::Sigmoid,
            "hardswish" => Activation::HardSwish,
            other => match other.strip_prefix("leaky_relu:") {
                Some(slope) => Activation::LeakyRelu(
                    slope.parse().map_err(|_| Error::InvalidArgument(format!("bad leaky_relu slope {slope:?}")))?,
                ),
                None => return Err(Error::InvalidArgument(format!("unknown activation kind {other:?}"))),
            },
        };
        act.validate()?;
        Ok(act)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

/// Batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub momentum: f32,
    pub initialized: bool,
}

impl RunningStats {
    pub const DEFAULT_MOMENTUM: f32 = 0.1;

    /// Mean 0, variance 1.
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], var: vec![1.0; channels], momentum: Self::DEFAULT_MOMENTUM, initialized: true }
    }

    pub fn uninitialized(channels: usize) -> Self {
        Self { initialized: false, ..Self::new(channels) }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

pub const NORM_EPS: f32 = 1e-5;
