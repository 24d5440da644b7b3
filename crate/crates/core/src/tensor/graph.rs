use super::kernels::{self, BinaryOp};
use super::{Activation, ConvSpec, NormMode, PoolKind, RunningStats, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pullback: `(grad_out, parent_values, out_value) -> grad per parent`.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Result<Vec<Option<Tensor>>>>;

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Reverse-mode tape. Every op appends one node holding its output value.
///
/// A graph built with [`Graph::inference`] records values only, so nothing
/// requires a gradient and no pullbacks are kept alive.
pub struct Graph {
    nodes: Vec<Node>,
    record: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), record: true }
    }

    pub fn inference() -> Self {
        Self { nodes: Vec::new(), record: false }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, parents: Vec::new(), backward: None, requires_grad: requires_grad && self.record });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Appends an op result. Non-finite outputs are rejected here.
    pub(crate) fn record(
        &mut self,
        op: &str,
        value: Tensor,
        parents: &[Var],
        backward: impl Fn(&Tensor, &[&Tensor], &Tensor) -> Result<Vec<Option<Tensor>>> + 'static,
    ) -> Result<Var> {
        value.ensure_finite(op)?;
        let requires_grad = self.record && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let node = if requires_grad {
            Node { value, parents: parents.to_vec(), backward: Some(Box::new(backward)), requires_grad }
        } else {
            Node { value, parents: Vec::new(), backward: None, requires_grad: false }
        };
        self.nodes.push(node);
        Ok(Var(self.nodes.len() - 1))
    }

    /// Backpropagates from `out` seeded with ones.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let seed = Tensor::ones(self.shape(out));
        self.backward_with(out, seed)
    }

    /// Backpropagates from `out` with an explicit output gradient.
    ///
    /// Gradients of intermediate nodes are released once propagated; leaves keep theirs.
    pub fn backward_with(&self, out: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.shape(out) {
            return Err(Error::shape("backward", format!("seed {:?} vs output {:?}", seed.shape(), self.shape(out))));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = &node.backward else { continue };
            let Some(g) = grads[i].take() else { continue };
            let parents: Vec<&Tensor> = node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let pgrads = backward(&g, &parents, &node.value)?;
            debug_assert_eq!(pgrads.len(), node.parents.len());
            for (p, pg) in node.parents.iter().zip(pgrads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }

    // -----------------------------------------------------------------------
    // ops

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let out = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), &spec)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        let with_bias = b.is_some();
        self.record("conv2d", out, &parents, move |g, p, _| {
            let (gx, gw, gb) = kernels::conv2d_backward(p[0], p[1], &spec, with_bias, g)?;
            let mut v = vec![Some(gx), Some(gw)];
            if with_bias {
                v.push(gb);
            }
            Ok(v)
        })
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Result<Var> {
        act.validate()?;
        let out = kernels::activation(self.value(x), act);
        self.record("activation", out, &[x], move |g, p, y| Ok(vec![Some(kernels::activation_backward(p[0], y, act, g))]))
    }

    pub fn hardswish(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::HardSwish)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Result<Var> {
        self.activation(x, Activation::LeakyRelu(slope))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let out = kernels::layer_norm(self.value(x), self.value(gamma), self.value(beta))?;
        self.record("layer_norm", out, &[x, gamma, beta], |g, p, _| {
            let (gx, gg, gb) = kernels::layer_norm_backward(p[0], p[1], g)?;
            Ok(vec![Some(gx), Some(gg), Some(gb)])
        })
    }

    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, stats: &mut RunningStats, mode: NormMode) -> Result<Var> {
        let (out, moments) = kernels::batch_norm(self.value(x), self.value(gamma), self.value(beta), stats, mode)?;
        self.record("batch_norm", out, &[x, gamma, beta], move |g, p, _| {
            let (gx, gg, gb) = kernels::batch_norm_backward(p[0], p[1], &moments, mode, g)?;
            Ok(vec![Some(gx), Some(gg), Some(gb)])
        })
    }

    pub fn pool2d(&mut self, x: Var, kind: PoolKind, window: (usize, usize), stride: (usize, usize)) -> Result<Var> {
        let out = kernels::pool2d(self.value(x), kind, window, stride)?;
        self.record("pool2d", out, &[x], move |g, p, _| Ok(vec![Some(kernels::pool2d_backward(p[0], kind, window, stride, g)?)]))
    }

    /// Pools each channel over its whole `(H, W)` extent.
    pub fn global_pool(&mut self, x: Var, kind: PoolKind) -> Result<Var> {
        let (_, _, h, w) = self.value(x).dims4()?;
        self.pool2d(x, kind, (h, w), (1, 1))
    }

    pub fn channel_pool(&mut self, x: Var, kind: PoolKind) -> Result<Var> {
        let out = kernels::channel_pool(self.value(x), kind)?;
        self.record("channel_pool", out, &[x], move |g, p, _| Ok(vec![Some(kernels::channel_pool_backward(p[0], kind, g)?)]))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let out = kernels::upsample_bilinear2x(self.value(x))?;
        self.record("upsample2x", out, &[x], |g, p, _| Ok(vec![Some(kernels::upsample_bilinear2x_backward(p[0], g)?)]))
    }

    fn binary(&mut self, a: Var, b: Var, op: BinaryOp) -> Result<Var> {
        let out = kernels::binary(self.value(a), self.value(b), op)?;
        self.record("binary", out, &[a, b], move |g, p, _| {
            let (ga, gb) = kernels::binary_backward(p[0], p[1], op, g)?;
            Ok(vec![Some(ga), Some(gb)])
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Mul)
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Result<Var> {
        let out = self.value(x).map(|v| v * factor);
        self.record("scale", out, &[x], move |g, _, _| Ok(vec![Some(g.map(|v| v * factor))]))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let widths: Vec<usize> = values.iter().map(|t| t.shape()[1]).collect();
        let out = kernels::concat_channels(&values)?;
        self.record("concat_channels", out, parts, move |g, _, _| {
            let mut start = 0;
            widths
                .iter()
                .map(|&c| {
                    let s = kernels::slice_channels(g, start, c);
                    start += c;
                    s.map(Some)
                })
                .collect()
        })
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = kernels::slice_channels(self.value(x), start, len)?;
        self.record("slice_channels", out, &[x], move |g, p, _| {
            let (n, c, h, w) = p[0].dims4()?;
            let hw = h * w;
            let mut gx = Tensor::zeros(&[n, c, h, w]);
            for ni in 0..n {
                gx.data_mut()[(ni * c + start) * hw..(ni * c + start + len) * hw]
                    .copy_from_slice(&g.data()[ni * len * hw..(ni + 1) * len * hw]);
            }
            Ok(vec![Some(gx)])
        })
    }

    pub fn pad_reflect(&mut self, x: Var, pad: usize) -> Result<Var> {
        let out = kernels::pad_reflect(self.value(x), pad)?;
        self.record("pad_reflect", out, &[x], move |g, p, _| Ok(vec![Some(kernels::pad_reflect_backward(p[0].shape(), pad, g)?)]))
    }

    pub fn pad_replicate_end(&mut self, x: Var, extra_h: usize, extra_w: usize) -> Result<Var> {
        let out = kernels::pad_replicate_end(self.value(x), extra_h, extra_w)?;
        self.record("pad_replicate_end", out, &[x], |g, p, _| Ok(vec![Some(kernels::pad_replicate_end_backward(p[0].shape(), g)?)]))
    }

    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let out = kernels::crop(self.value(x), h, w)?;
        self.record("crop", out, &[x], |g, p, _| Ok(vec![Some(kernels::crop_backward(p[0].shape(), g)?)]))
    }

    /// Orthonormal, so the pullback is the synthesis transform.
    pub fn haar_analysis(&mut self, x: Var) -> Result<Var> {
        let out = kernels::haar_analysis(self.value(x))?;
        self.record("haar_analysis", out, &[x], |g, _, _| Ok(vec![Some(kernels::haar_synthesis(g)?)]))
    }

    pub fn haar_synthesis(&mut self, bands: Var) -> Result<Var> {
        let out = kernels::haar_synthesis(self.value(bands))?;
        self.record("haar_synthesis", out, &[bands], |g, _, _| Ok(vec![Some(kernels::haar_analysis(g)?)]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.record("reshape", out, &[x], |g, p, _| Ok(vec![Some(g.clone().reshape(p[0].shape())?)]))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = kernels::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut parents = vec![x, w];
        parents.extend(b);
        let with_bias = b.is_some();
        self.record("linear", out, &parents, move |g, p, _| {
            let (gx, gw, gb) = kernels::linear_backward(p[0], p[1], with_bias, g)?;
            let mut v = vec![Some(gx), Some(gw)];
            if with_bias {
                v.push(gb);
            }
            Ok(v)
        })
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().map(|&v| f64::from(v)).sum::<f64>() as f32;
        self.record("sum", Tensor::scalar(total), &[x], |g, p, _| Ok(vec![Some(Tensor::full(p[0].shape(), g.data()[0]))]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f32;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule_and_accumulation() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let y = g.add(sq, x).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, -3.0, 2.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(&[2]));
        let c = g.constant(Tensor::full(&[2], 3.0));
        let y = g.mul(x, c).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn inference_graph_records_no_pullbacks() {
        let mut g = Graph::inference();
        let x = g.param(Tensor::ones(&[2]));
        assert!(!g.requires_grad(x));
        let y = g.hardswish(x).unwrap();
        assert!(!g.requires_grad(y));
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1], f32::MAX));
        let err = g.scale(x, 10.0).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }
}
