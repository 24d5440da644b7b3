//! Named parameter storage and the layer primitives shared by backbone and head.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::profiler::{CostRow, LayerKind};
use crate::tensor::{Activation, ConvSpec, Graph, NormMode, RunningStats, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StatsId(usize);

/// Trainable tensors plus batch-norm running statistics, both keyed by name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<(String, Tensor)>,
    stats: Vec<(String, RunningStats)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push((name.into(), value));
        ParamId(self.params.len() - 1)
    }

    pub fn add_stats(&mut self, name: impl Into<String>, channels: usize) -> StatsId {
        self.stats.push((name.into(), RunningStats::new(channels)));
        StatsId(self.stats.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].1
    }

    pub fn stats(&self, id: StatsId) -> &RunningStats {
        &self.stats[id.0].1
    }

    pub fn stats_mut(&mut self, id: StatsId) -> &mut RunningStats {
        &mut self.stats[id.0].1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut().map(|(_, t)| t)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|(n, _)| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn param_entries(&self) -> Vec<(String, Tensor)> {
        self.params.clone()
    }

    /// Running mean and variance as `<name>.running_mean` / `<name>.running_var`.
    pub fn stats_entries(&self) -> Vec<(String, Tensor)> {
        self.stats
            .iter()
            .flat_map(|(name, s)| {
                let c = s.channels();
                [
                    (format!("{name}.running_mean"), Tensor::new(vec![c], s.mean.clone()).expect("length matches")),
                    (format!("{name}.running_var"), Tensor::new(vec![c], s.var.clone()).expect("length matches")),
                ]
            })
            .collect()
    }

    /// Replaces every parameter from `entries`; names and shapes must match exactly.
    pub fn load_params(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        if entries.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model expects {}",
                entries.len(),
                self.params.len()
            )));
        }
        for ((name, slot), (ename, t)) in self.params.iter_mut().zip(entries) {
            if *name != ename || slot.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "expected {name} {:?}, found {ename} {:?}",
                    slot.shape(),
                    t.shape()
                )));
            }
            *slot = t;
        }
        Ok(())
    }

    pub fn load_stats(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        let lookup = |key: &str| entries.iter().find(|(n, _)| n == key).map(|(_, t)| t);
        for (name, s) in &mut self.stats {
            let (Some(mean), Some(var)) = (lookup(&format!("{name}.running_mean")), lookup(&format!("{name}.running_var"))) else {
                return Err(Error::Checkpoint(format!("missing running statistics for {name}")));
            };
            if mean.numel() != s.channels() || var.numel() != s.channels() {
                return Err(Error::Checkpoint(format!("running statistics for {name} have the wrong length")));
            }
            s.mean = mean.data().to_vec();
            s.var = var.data().to_vec();
            s.initialized = true;
        }
        Ok(())
    }

    /// Marks every running-statistics slot as never computed.
    pub fn reset_stats(&mut self) {
        for (_, s) in &mut self.stats {
            *s = RunningStats::uninitialized(s.channels());
        }
    }
}

/// Parameter factory with a seeded generator.
pub struct Init {
    pub store: ParamStore,
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Self { store: ParamStore::new(), rng }
    }

    /// `U(-1/√fan_in, 1/√fan_in)`.
    pub fn uniform(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
        let t = Tensor::uniform(shape, -bound, bound, &mut self.rng);
        self.store.add(name, t)
    }

    pub fn constant(&mut self, name: impl Into<String>, shape: &[usize], value: f32) -> ParamId {
        self.store.add(name, Tensor::full(shape, value))
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

enum StoreRef<'a> {
    Shared(&'a ParamStore),
    Exclusive(&'a mut ParamStore),
}

impl StoreRef<'_> {
    fn get(&self) -> &ParamStore {
        match self {
            StoreRef::Shared(s) => s,
            StoreRef::Exclusive(s) => s,
        }
    }
}

/// One forward pass: parameters bound as graph leaves plus access to running stats.
pub struct Session<'a> {
    pub g: &'a mut Graph,
    vars: Vec<Var>,
    store: StoreRef<'a>,
    pub mode: NormMode,
}

impl<'a> Session<'a> {
    /// Binds every parameter as a leaf; `trainable` leaves require gradients.
    pub fn new(g: &'a mut Graph, store: &'a mut ParamStore, mode: NormMode, trainable: bool) -> Self {
        let vars = store.params.iter().map(|(_, t)| g.leaf(t.clone(), trainable)).collect();
        Self { g, vars, store: StoreRef::Exclusive(store), mode }
    }

    /// Eval-mode session over a shared store; running statistics are read only.
    pub fn inference(g: &'a mut Graph, store: &'a ParamStore) -> Self {
        let vars = store.params.iter().map(|(_, t)| g.constant(t.clone())).collect();
        Self { g, vars, store: StoreRef::Shared(store), mode: NormMode::Eval }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn param_vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn store(&self) -> &ParamStore {
        self.store.get()
    }

    pub fn batch_norm(&mut self, x: Var, gamma: ParamId, beta: ParamId, stats: StatsId) -> Result<Var> {
        let (gv, bv) = (self.p(gamma), self.p(beta));
        let mode = self.mode;
        match &mut self.store {
            StoreRef::Exclusive(store) => self.g.batch_norm(x, gv, bv, store.stats_mut(stats), mode),
            StoreRef::Shared(store) if mode == NormMode::Eval => {
                let mut frozen = store.stats(stats).clone();
                self.g.batch_norm(x, gv, bv, &mut frozen, mode)
            }
            StoreRef::Shared(_) => Err(Error::InvalidArgument("train-mode batch norm needs a mutable store".into())),
        }
    }
}

// ---------------------------------------------------------------------------
// layers

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv2d {
    pub fn new(init: &mut Init, name: &str, spec: ConvSpec, bias: bool) -> Result<Self> {
        spec.validate()?;
        let fan_in = spec.in_channels / spec.groups * spec.kernel.0 * spec.kernel.1;
        let weight = init.uniform(format!("{name}.weight"), &spec.weight_shape(), fan_in);
        let bias = bias.then(|| init.uniform(format!("{name}.bias"), &[spec.out_channels], fan_in));
        Ok(Self { spec, weight, bias })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (w, b) = (s.p(self.weight), self.bias.map(|b| s.p(b)));
        s.g.conv2d(x, w, b, self.spec)
    }

    pub fn param_count(&self) -> usize {
        let [o, i, kh, kw] = self.spec.weight_shape();
        o * i * kh * kw + if self.bias.is_some() { o } else { 0 }
    }

    /// Cost row for an `h × w` input, plus the output size.
    pub fn cost(&self, name: &str, h: usize, w: usize) -> Result<(CostRow, (usize, usize))> {
        let (oh, ow) = self.spec.output_hw(h, w)?;
        let [o, i, kh, kw] = self.spec.weight_shape();
        let kind = if h == 1 && w == 1 && self.spec.kernel == (1, 1) { LayerKind::Dense } else { LayerKind::Conv };
        let macs = (oh * ow * o * i * kh * kw) as u64;
        Ok((CostRow::new(name, kind, self.param_count() as u64, macs), (oh, ow)))
    }

    /// Zeroes weight and bias.
    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).data_mut().fill(0.0);
        if let Some(b) = self.bias {
            store.get_mut(b).data_mut().fill(0.0);
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: StatsId,
}

impl BatchNorm {
    pub fn new(init: &mut Init, name: &str, channels: usize) -> Self {
        Self {
            channels,
            gamma: init.constant(format!("{name}.gamma"), &[channels], 1.0),
            beta: init.constant(format!("{name}.beta"), &[channels], 0.0),
            stats: init.store.add_stats(name, channels),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        s.batch_norm(x, self.gamma, self.beta, self.stats)
    }

    pub fn cost(&self, name: &str, h: usize, w: usize) -> CostRow {
        CostRow::new(name, LayerKind::Norm, 2 * self.channels as u64, (self.channels * h * w) as u64)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut Init, name: &str, channels: usize) -> Self {
        Self {
            channels,
            gamma: init.constant(format!("{name}.gamma"), &[channels], 1.0),
            beta: init.constant(format!("{name}.beta"), &[channels], 0.0),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (gm, bt) = (s.p(self.gamma), s.p(self.beta));
        s.g.layer_norm(x, gm, bt)
    }

    pub fn cost(&self, name: &str, h: usize, w: usize) -> CostRow {
        CostRow::new(name, LayerKind::Norm, 2 * self.channels as u64, (self.channels * h * w) as u64)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, in_features: usize, out_features: usize) -> Self {
        Self {
            in_features,
            out_features,
            weight: init.uniform(format!("{name}.weight"), &[out_features, in_features], in_features),
            bias: init.uniform(format!("{name}.bias"), &[out_features], in_features),
        }
    }

    /// `x` is `[M, in_features]`.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (w, b) = (s.p(self.weight), s.p(self.bias));
        s.g.linear(x, w, Some(b))
    }

    pub fn param_count(&self) -> usize {
        self.in_features * self.out_features + self.out_features
    }

    /// `rows` input vectors per forward pass.
    pub fn cost(&self, name: &str, rows: usize) -> CostRow {
        CostRow::new(name, LayerKind::Dense, self.param_count() as u64, (rows * self.in_features * self.out_features) as u64)
    }
}

/// Conv, batch norm, optional activation.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm,
    pub act: Option<Activation>,
}

impl ConvBn {
    pub fn new(init: &mut Init, name: &str, spec: ConvSpec, act: Option<Activation>) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(init, &format!("{name}.conv"), spec, false)?,
            bn: BatchNorm::new(init, &format!("{name}.bn"), spec.out_channels),
            act,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let y = self.conv.forward(s, x)?;
        let y = self.bn.forward(s, y)?;
        match self.act {
            Some(a) => s.g.activation(y, a),
            None => Ok(y),
        }
    }

    pub fn cost(&self, name: &str, h: usize, w: usize, rows: &mut Vec<CostRow>) -> Result<(usize, usize)> {
        let (row, (oh, ow)) = self.conv.cost(&format!("{name}.conv"), h, w)?;
        rows.push(row);
        rows.push(self.bn.cost(&format!("{name}.bn"), oh, ow));
        Ok((oh, ow))
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count() + 2 * self.bn.channels
    }
}
