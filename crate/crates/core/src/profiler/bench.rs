use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PoseModel;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub batch: usize,
    pub warmup_iters: usize,
    pub timed_iters: usize,
    pub threads: usize,
    /// Seed of the fixed random input.
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { batch: 1, warmup_iters: 2, timed_iters: 10, threads: 1, seed: 0 }
    }
}

/// Reproducibility header attached to every benchmark report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub cpu_model: String,
    pub logical_cpus: usize,
    pub threads: usize,
    pub seed: u64,
    pub config_hash: String,
    pub os: String,
    pub arch: String,
}

impl Environment {
    pub fn detect(threads: usize, seed: u64, config_hash: String) -> Self {
        let cpu_model = std::fs::read_to_string("/proc/cpuinfo")
            .ok()
            .and_then(|s| {
                s.lines()
                    .find(|l| l.starts_with("model name"))
                    .and_then(|l| l.split(':').nth(1))
                    .map(|m| m.trim().to_string())
            })
            .unwrap_or_else(|| "unknown".into());
        Self {
            cpu_model,
            logical_cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            threads,
            seed,
            config_hash,
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub environment: Environment,
    pub config: BenchConfig,
    pub input_width: usize,
    pub input_height: usize,
    /// Wall-clock latency of each timed forward pass, in milliseconds.
    pub samples_ms: Vec<f64>,
    pub latency_mean_ms: f64,
    /// `batch / mean latency`.
    pub fps_mean: f64,
    /// `batch / median latency`.
    pub fps_p50: f64,
    /// `batch / 95th-percentile latency`, i.e. the slow tail.
    pub fps_p95: f64,
}

impl BenchReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_text(&self) -> String {
        let e = &self.environment;
        format!(
            "cpu: {} ({} logical, {} threads)\nseed: {} config: {}\ninput: {}x{} batch {}\n\
             warmup {} timed {}\nlatency mean {:.3} ms\nfps mean {:.2} p50 {:.2} p95 {:.2}\n",
            e.cpu_model,
            e.logical_cpus,
            e.threads,
            e.seed,
            e.config_hash,
            self.input_width,
            self.input_height,
            self.config.batch,
            self.config.warmup_iters,
            self.config.timed_iters,
            self.latency_mean_ms,
            self.fps_mean,
            self.fps_p50,
            self.fps_p95
        )
    }
}

/// Nearest-rank percentile of an ascending slice.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Runs the whole network on a fixed random batch split across `threads` workers.
fn forward_batch(model: &PoseModel, chunks: &[Tensor]) -> Result<()> {
    if chunks.len() == 1 {
        model.infer(&chunks[0])?;
        return Ok(());
    }
    std::thread::scope(|scope| {
        let handles: Vec<_> = chunks.iter().map(|c| scope.spawn(move || model.infer(c).map(|_| ()))).collect();
        handles
            .into_iter()
            .map(|h| h.join().map_err(|_| Error::Invariant("benchmark worker panicked".into()))?)
            .collect::<Result<()>>()
    })
}

/// End-to-end forward timing; `warmup_iters ≥ 1`, `timed_iters ≥ 10`.
pub fn bench_inference(model: &PoseModel, cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.warmup_iters < 1 || cfg.timed_iters < 10 {
        return Err(Error::InvalidArgument(format!(
            "benchmark needs warmup >= 1 and timed >= 10 iterations, got {} and {}",
            cfg.warmup_iters, cfg.timed_iters
        )));
    }
    if cfg.batch == 0 || cfg.threads == 0 {
        return Err(Error::InvalidArgument("batch and threads must be positive".into()));
    }
    let mc = model.config();
    let (h, w) = (mc.input_height, mc.input_width);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let workers = cfg.threads.min(cfg.batch);
    let chunks: Vec<Tensor> = (0..workers)
        .map(|i| {
            let n = cfg.batch / workers + usize::from(i < cfg.batch % workers);
            Tensor::uniform(&[n, mc.image_channels, h, w], -1.0, 1.0, &mut rng)
        })
        .collect();

    for _ in 0..cfg.warmup_iters {
        forward_batch(model, &chunks)?;
    }
    let mut samples_ms = Vec::with_capacity(cfg.timed_iters);
    for _ in 0..cfg.timed_iters {
        let start = Instant::now();
        forward_batch(model, &chunks)?;
        samples_ms.push(start.elapsed().as_secs_f64() * 1e3);
    }

    let mut sorted = samples_ms.clone();
    sorted.sort_by(f64::total_cmp);
    let mean = samples_ms.iter().sum::<f64>() / samples_ms.len() as f64;
    let fps = |ms: f64| cfg.batch as f64 / (ms.max(1e-9) / 1e3);
    Ok(BenchReport {
        environment: Environment::detect(cfg.threads, cfg.seed, mc.hash()),
        config: cfg.clone(),
        input_width: w,
        input_height: h,
        latency_mean_ms: mean,
        fps_mean: fps(mean),
        fps_p50: fps(percentile(&sorted, 50.0)),
        fps_p95: fps(percentile(&sorted, 95.0)),
        samples_ms,
    })
}
