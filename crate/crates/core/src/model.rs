//! The full network: backbone, optional SC2Head, SimCC output layers, and checkpoint I/O.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::Backbone;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::head::{Sc2Head, SimccHead};
use crate::nn::{Init, ParamStore, Session};
use crate::profiler::CostRow;
use crate::tensor::checkpoint::{read_checkpoint, write_checkpoint};
use crate::tensor::{Graph, Tensor, Var};

/// Layer structure without parameter values.
#[derive(Clone, Debug)]
pub struct PoseNet {
    pub backbone: Backbone,
    pub sc2: Option<Sc2Head>,
    pub simcc: SimccHead,
}

impl PoseNet {
    /// Image `[N, 3, H, W]` to `(x_logits, y_logits)`.
    pub fn forward(&self, s: &mut Session, image: Var) -> Result<(Var, Var)> {
        let mut f = self.backbone.forward(s, image)?;
        if let Some(h) = &self.sc2 {
            f = h.forward(s, f)?;
        }
        self.simcc.forward(s, f)
    }
}

#[derive(Clone, Debug)]
pub struct PoseModel {
    cfg: ModelConfig,
    pub net: PoseNet,
    pub store: ParamStore,
}

impl PoseModel {
    /// Builds and initializes every parameter from `seed`.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init::new(ChaCha8Rng::seed_from_u64(seed));
        let backbone = Backbone::new(&mut init, cfg)?;
        let geo = cfg.head_geometry();
        let sc2 = if cfg.use_sc2head { Some(Sc2Head::new(&mut init, "head.sc2", geo.in_channels, &cfg.head)?) } else { None };
        let simcc = SimccHead::new(&mut init, "head.simcc", geo)?;
        Ok(Self { cfg: cfg.clone(), net: PoseNet { backbone, sc2, simcc }, store: init.store })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Eval-mode forward pass on a shared model; safe to call from several threads.
    pub fn infer(&self, image: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::inference();
        let mut s = Session::inference(&mut g, &self.store);
        let x = s.g.constant(image.clone());
        let (xl, yl) = self.net.forward(&mut s, x)?;
        Ok((s.g.value(xl).clone(), s.g.value(yl).clone()))
    }

    pub fn param_count(&self) -> usize {
        self.store.num_scalars()
    }

    /// Per-layer cost rows for an `h × w` input.
    pub fn cost_rows(&self, h: usize, w: usize) -> Result<Vec<CostRow>> {
        let mut rows = Vec::new();
        let (fh, fw) = self.net.backbone.cost(h, w, &mut rows)?;
        if let Some(head) = &self.net.sc2 {
            head.cost("head.sc2", fh, fw, &mut rows)?;
        }
        self.net.simcc.cost("head.simcc", fh, fw, &mut rows)?;
        Ok(rows)
    }

    /// Zeroes the final projection of every residual block and of the SC2Head.
    pub fn zero_final_projections(&mut self) {
        self.net.backbone.zero_final_projections(&mut self.store);
        if let Some(h) = &self.net.sc2 {
            h.zero_final(&mut self.store);
        }
    }

    /// Path of the running-statistics companion of a checkpoint.
    pub fn stats_path(path: &Path) -> PathBuf {
        let mut p = path.as_os_str().to_owned();
        p.push(".stats");
        PathBuf::from(p)
    }

    /// Writes trainable parameters to `path` and batch-norm running statistics next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_checkpoint(&mut w, &self.store.param_entries())?;
        let mut w = BufWriter::new(File::create(Self::stats_path(path))?);
        write_checkpoint(&mut w, &self.store.stats_entries())?;
        Ok(())
    }

    /// Builds the architecture for `cfg` and loads parameters (and statistics, if present).
    pub fn load(cfg: &ModelConfig, path: &Path) -> Result<Self> {
        let mut model = Self::new(cfg, 0)?;
        let file = File::open(path).map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
        model.store.load_params(read_checkpoint(BufReader::new(file))?)?;
        let stats = Self::stats_path(path);
        if stats.exists() {
            model.store.load_stats(read_checkpoint(BufReader::new(File::open(stats)?))?)?;
        }
        Ok(model)
    }
}
