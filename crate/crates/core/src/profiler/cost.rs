use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PoseModel;

/// Coarse category of a cost row; decides how MACs are interpreted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    /// Convolution: MACs scale with the output area.
    Conv,
    /// Fully connected, or a 1×1 conv on a 1×1 map.
    Dense,
    Norm,
    /// Attention gates, residual adds, activations: one MAC per multiply.
    Elementwise,
    /// Pooling and interpolation.
    Resample,
    /// Haar analysis/synthesis, counted as additions only.
    Transform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub name: String,
    pub kind: LayerKind,
    pub params: u64,
    pub macs: u64,
    /// Pure additions that are not part of a multiply-accumulate.
    pub adds: u64,
}

impl CostRow {
    pub fn new(name: impl Into<String>, kind: LayerKind, params: u64, macs: u64) -> Self {
        Self { name: name.into(), kind, params, macs, adds: 0 }
    }

    pub fn transform(name: impl Into<String>, adds: u64) -> Self {
        Self { name: name.into(), kind: LayerKind::Transform, params: 0, macs: 0, adds }
    }

    pub fn elementwise(name: impl Into<String>, macs: u64) -> Self {
        Self::new(name, LayerKind::Elementwise, 0, macs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostTotals {
    pub params: u64,
    pub macs: u64,
    /// Always `2 × macs`.
    pub flops: u64,
    pub adds: u64,
}

/// Per-layer parameter and MAC accounting for one input resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub input_width: usize,
    pub input_height: usize,
    pub rows: Vec<CostRow>,
    pub totals: CostTotals,
}

impl CostReport {
    pub fn from_rows(input_width: usize, input_height: usize, rows: Vec<CostRow>) -> Self {
        let params = rows.iter().map(|r| r.params).sum();
        let macs = rows.iter().map(|r| r.macs).sum();
        let adds = rows.iter().map(|r| r.adds).sum();
        Self { input_width, input_height, rows, totals: CostTotals { params, macs, flops: 2 * macs, adds } }
    }

    /// Sum over rows whose name starts with `prefix`.
    pub fn subtotal(&self, prefix: &str) -> CostTotals {
        let sel = || self.rows.iter().filter(|r| r.name.starts_with(prefix));
        let macs = sel().map(|r| r.macs).sum();
        CostTotals { params: sel().map(|r| r.params).sum(), macs, flops: 2 * macs, adds: sel().map(|r| r.adds).sum() }
    }

    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(5);
        let mut out = String::new();
        let _ = writeln!(out, "input {}x{} (width x height)", self.input_width, self.input_height);
        let _ = writeln!(
            out,
            "{:<width$}  {:<11}  {:>10}  {:>14}  {:>14}  {:>10}",
            "layer", "kind", "params", "MACs", "FLOPs(2xMAC)", "adds"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:<11}  {:>10}  {:>14}  {:>14}  {:>10}",
                r.name,
                format!("{:?}", r.kind).to_lowercase(),
                r.params,
                r.macs,
                2 * r.macs,
                r.adds
            );
        }
        let t = &self.totals;
        let _ = writeln!(
            out,
            "{:<width$}  {:<11}  {:>10}  {:>14}  {:>14}  {:>10}",
            "total", "", t.params, t.macs, t.flops, t.adds
        );
        let _ = writeln!(
            out,
            "params {:.6} M | MACs {:.6} G | FLOPs (2xMAC) {:.6} G",
            t.params as f64 / 1e6,
            t.macs as f64 / 1e9,
            t.flops as f64 / 1e9
        );
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Parameter rows at the model's configured input resolution.
pub fn count_params(model: &PoseModel) -> Result<CostReport> {
    let cfg = model.config();
    count_macs(model, (cfg.input_width, cfg.input_height))
}

/// Per-layer costs for a `(width, height)` input.
///
/// Shapes must be statically derivable: the resolution has to be positive and
/// divisible by the backbone output stride.
pub fn count_macs(model: &PoseModel, resolution: (usize, usize)) -> Result<CostReport> {
    let (w, h) = resolution;
    let stride = model.config().output_stride;
    if w == 0 || h == 0 || w % stride != 0 || h % stride != 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot derive static shapes for {w}x{h}: need positive dims divisible by the output stride {stride}"
        )));
    }
    let rows = model.cost_rows(h, w)?;
    Ok(CostReport::from_rows(w, h, rows))
}
