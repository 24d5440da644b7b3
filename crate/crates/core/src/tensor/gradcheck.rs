//! Central finite-difference verification of tape gradients.
//!
//! The checked objective is the sum of all outputs of `f`. The sum and the
//! difference quotient are formed in f64 so that unchanged output elements
//! cancel exactly between the two perturbed evaluations.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f32 = 1e-3;

/// Step for composite blocks: at `1e-3` the f32 rounding of the forward pass
/// dominates the difference quotient for small gradient entries.
pub const BLOCK_EPS: f32 = 3e-2;
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

fn objective<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let out = f(&mut g, xv)?;
    let total: f64 = g.value(out).data().iter().map(|&v| f64::from(v)).sum();
    if !total.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    Ok(total)
}

/// Compares the reverse-mode gradient of `sum(f(x))` against central differences.
///
/// Returns the worst elementwise `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f32) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let out = f(&mut g, xv)?;
    let grads = g.backward(out)?;
    let analytic = grads.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut report = GradCheckReport { max_rel_error: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0 };
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        let mut eval = |delta: f32| -> Result<(f64, f64)> {
            let (up, down) = (orig + delta, orig - delta);
            probe.data_mut()[i] = up;
            let f_up = objective(&f, &probe)?;
            probe.data_mut()[i] = down;
            let f_down = objective(&f, &probe)?;
            probe.data_mut()[i] = orig;
            Ok((f_up - f_down, f64::from(up) - f64::from(down)))
        };
        let (diff, span) = eval(eps)?;
        let numeric = diff / span;
        let a = f64::from(analytic.data()[i]);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(ABS_FLOOR);
        if rel > report.max_rel_error || i == 0 {
            report = GradCheckReport { max_rel_error: rel, worst_index: i, analytic: a, numeric };
        }
    }
    Ok(report)
}

/// Nudges values so that, within every `[N, C, H, W]` plane, each channel-wise
/// and each spatial maximum leads its runner-up by at least `margin`, keeping
/// max pooling away from its non-differentiable ties.
pub fn separate_maxima(x: &mut Tensor, margin: f32) -> Result<()> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    for _ in 0..64 {
        let mut changed = false;
        let d = x.data_mut();
        let lift = |idx: &[usize], d: &mut [f32]| {
            if idx.len() < 2 {
                return false;
            }
            let best = idx.iter().copied().fold(idx[0], |b, i| if d[i] > d[b] { i } else { b });
            let runner = idx.iter().filter(|&&i| i != best).map(|&i| d[i]).fold(f32::NEG_INFINITY, f32::max);
            if d[best] - runner < margin {
                d[best] = runner + 1.5 * margin;
                return true;
            }
            false
        };
        for ni in 0..n {
            for s in 0..hw {
                let idx: Vec<usize> = (0..c).map(|ci| (ni * c + ci) * hw + s).collect();
                changed |= lift(&idx, d);
            }
            for ci in 0..c {
                let idx: Vec<usize> = (0..hw).map(|s| (ni * c + ci) * hw + s).collect();
                changed |= lift(&idx, d);
            }
        }
        if !changed {
            return Ok(());
        }
    }
    Err(Error::Invariant("separate_maxima did not converge".into()))
}
