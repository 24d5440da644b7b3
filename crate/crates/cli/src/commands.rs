use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fsmc_core::config::ModelConfig;
use fsmc_core::data::{
    crop_and_normalize, parse_annotations, split_dataset, synth_dataset, visibility_stats, Dataset, Image,
    SkeletonSpec, SplitAssignment, NUM_KEYPOINTS,
};
use fsmc_core::head::simcc_decode;
use fsmc_core::metrics::{ap_ar, parse_coco_results, to_coco_results, Detection, EvalParams};
use fsmc_core::model::PoseModel;
use fsmc_core::profiler::{bench_inference, count_macs, BenchConfig};
use fsmc_core::train::{evaluate_pck, predict, train, LossRecord, Samples, TrainConfig, TrainReport};
use fsmc_core::Error;
use serde::Serialize;

use crate::manifest::RunRecorder;
use crate::viz;
use crate::{Cli, Command, DataArgs};

/// Seed offset of the held-out synthetic slice, so it never overlaps training data.
const HOLDOUT_SEED_MIX: u64 = 0xABCD;
const PCK_ALPHA: f64 = 0.1;

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = cli.model_config()?;
    if cli.threads == 0 {
        bail!("--threads must be at least 1");
    }
    let mut rec = RunRecorder::start(&cli.out, cli.command.name(), cfg.hash(), cli.seed)?;
    let result = match &cli.command {
        Command::Train { data, iters, lr, batch, holdout } => {
            cmd_train(cli, &cfg, &mut rec, data, TrainConfig { iters: *iters, lr: *lr, batch: *batch, seed: cli.seed, ..TrainConfig::default() }, *holdout)
        }
        Command::Eval { data, checkpoint, predictions, batch } => {
            cmd_eval(cli, &cfg, &mut rec, data, checkpoint.as_deref(), predictions.as_deref(), *batch)
        }
        Command::Bench { batch, iters, warmup } => cmd_bench(cli, &cfg, &mut rec, *batch, *iters, *warmup),
        Command::Profile { resolution } => cmd_profile(cli, &cfg, &mut rec, *resolution),
        Command::Stats { data, split_file } => cmd_stats(cli, &mut rec, data, split_file.as_deref()),
        Command::Viz { data, checkpoint } => cmd_viz(cli, &cfg, &mut rec, data, checkpoint.as_deref()),
        Command::Synth { count } => cmd_synth(cli, &mut rec, *count),
        Command::Split { annotations, ratios } => cmd_split(cli, &mut rec, annotations, ratios),
    };
    // The manifest is written even when the command fails part-way.
    rec.finish()?;
    result
}

/// A dataset and whichever of its images could be decoded.
struct Loaded {
    dataset: Dataset,
    images: BTreeMap<u64, Image>,
    missing: Vec<PathBuf>,
}

impl Loaded {
    fn samples(&self) -> Samples<'_> {
        Samples::new(&self.dataset.instances, self.images.iter().map(|(&k, v)| (k, v)).collect())
    }
}

enum ImagePolicy {
    Skip,
    Required,
    BestEffort,
}

fn load_data(data: &DataArgs, seed: u64, policy: ImagePolicy) -> Result<Loaded> {
    if let Some(n) = data.synthetic {
        let synth = synth_dataset(n, seed)?;
        let images = synth.dataset.images.iter().map(|i| i.id).zip(synth.images).collect();
        return Ok(Loaded { dataset: synth.dataset, images, missing: Vec::new() });
    }
    let Some(ann) = &data.annotations else {
        bail!("no data: pass --synthetic N or --annotations FILE");
    };
    let bytes = std::fs::read(ann).with_context(|| format!("cannot read annotations {}", ann.display()))?;
    let dataset = parse_annotations(&bytes).with_context(|| format!("invalid annotations {}", ann.display()))?;
    let dir = data.images.clone().unwrap_or_else(|| ann.parent().map(Path::to_path_buf).unwrap_or_default());
    let mut images = BTreeMap::new();
    let mut missing = Vec::new();
    if !matches!(policy, ImagePolicy::Skip) {
        for info in &dataset.images {
            let path = dir.join(&info.file_name);
            match Image::load(&path) {
                Ok(img) => {
                    images.insert(info.id, img);
                }
                Err(e) if matches!(policy, ImagePolicy::BestEffort) => {
                    log::warn!("skipping image {}: {e}", path.display());
                    missing.push(path);
                }
                Err(e) => return Err(anyhow::Error::from(e).context(format!("cannot load image {}", path.display()))),
            }
        }
    }
    Ok(Loaded { dataset, images, missing })
}

fn load_model(cfg: &ModelConfig, checkpoint: Option<&Path>, seed: u64) -> Result<PoseModel> {
    Ok(match checkpoint {
        Some(p) => PoseModel::load(cfg, p).with_context(|| format!("cannot load checkpoint {}", p.display()))?,
        None => PoseModel::new(cfg, seed)?,
    })
}

fn check_skeleton(cfg: &ModelConfig) -> Result<()> {
    if cfg.head.keypoints != NUM_KEYPOINTS {
        bail!("skeleton mismatch: model predicts {} keypoints, the cattle skeleton has {NUM_KEYPOINTS}", cfg.head.keypoints);
    }
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    iters: usize,
    lr: f64,
    batch: usize,
    seed: u64,
    train_instances: usize,
    holdout_instances: usize,
    initial_loss: f64,
    final_loss: f64,
    /// `1 − final / initial` on the fixed probe batch.
    loss_reduction: f64,
    pck_initial: f64,
    pck_final: f64,
}

#[derive(Serialize)]
struct FailureDump<'a> {
    error: String,
    seed: u64,
    lr: f64,
    batch: usize,
    completed: &'a [LossRecord],
}

fn cmd_train(cli: &Cli, cfg: &ModelConfig, rec: &mut RunRecorder, data: &DataArgs, tcfg: TrainConfig, holdout: usize) -> Result<()> {
    let loaded = load_data(data, cli.seed, ImagePolicy::Required)?;
    let samples = loaded.samples();
    let held = synth_dataset(holdout.max(1), cli.seed ^ HOLDOUT_SEED_MIX)?;
    let held_samples = Samples::from_synth(&held);
    let mut model = PoseModel::new(cfg, cli.seed)?;
    rec.write("config.toml", cfg.to_toml()?)?;
    let pck_initial = evaluate_pck(&model, &held_samples, PCK_ALPHA)?;

    let mut completed = Vec::new();
    let result = train(&mut model, &samples, &tcfg, |r| {
        if r.iter % 20 == 0 || r.iter + 1 == tcfg.iters {
            log::info!("iter {:>5}  lr {:.2e}  loss {:.5}", r.iter, r.lr, r.loss);
        }
        completed.push(r.clone());
    });
    let report = match result {
        Ok(r) => r,
        Err(e @ Error::NonFinite(_)) => {
            let partial = TrainReport { records: completed.clone(), initial_loss: f64::NAN, final_loss: f64::NAN };
            rec.write("loss.csv", partial.loss_csv())?;
            let dump = FailureDump { error: e.to_string(), seed: cli.seed, lr: tcfg.lr, batch: tcfg.batch, completed: &completed };
            let path = rec.write("nonfinite_dump.json", serde_json::to_string_pretty(&dump)?)?;
            return Err(anyhow::Error::from(e).context(format!("training aborted; diagnostics in {}", path.display())));
        }
        Err(e) => return Err(e.into()),
    };

    let ckpt = rec.path("model.ckpt");
    model.save(&ckpt)?;
    rec.record("model.ckpt");
    rec.record("model.ckpt.stats");
    rec.write("loss.csv", report.loss_csv())?;
    let pck_final = evaluate_pck(&model, &held_samples, PCK_ALPHA)?;
    let summary = TrainSummary {
        iters: tcfg.iters,
        lr: tcfg.lr,
        batch: tcfg.batch,
        seed: cli.seed,
        train_instances: samples.instances.len(),
        holdout_instances: held_samples.instances.len(),
        initial_loss: report.initial_loss,
        final_loss: report.final_loss,
        loss_reduction: 1.0 - report.final_loss / report.initial_loss,
        pck_initial,
        pck_final,
    };
    rec.write("train_report.json", serde_json::to_string_pretty(&summary)?)?;
    println!(
        "loss {:.4} -> {:.4} ({:.1}% lower); PCK@{PCK_ALPHA} {:.4} -> {:.4}",
        summary.initial_loss,
        summary.final_loss,
        100.0 * summary.loss_reduction,
        pck_initial,
        pck_final
    );
    Ok(())
}

fn cmd_eval(
    cli: &Cli,
    cfg: &ModelConfig,
    rec: &mut RunRecorder,
    data: &DataArgs,
    checkpoint: Option<&Path>,
    predictions: Option<&Path>,
    batch: usize,
) -> Result<()> {
    let skeleton = SkeletonSpec::default();
    let (dataset, dets) = match predictions {
        Some(p) => {
            let loaded = load_data(data, cli.seed, ImagePolicy::Skip)?;
            let bytes = std::fs::read(p).with_context(|| format!("cannot read predictions {}", p.display()))?;
            (loaded.dataset, parse_coco_results(&bytes, skeleton.names.len())?)
        }
        None => {
            check_skeleton(cfg)?;
            let loaded = load_data(data, cli.seed, ImagePolicy::Required)?;
            let model = load_model(cfg, checkpoint, cli.seed)?;
            // Ground-truth boxes stand in for a detector.
            let items: Vec<(&Image, _)> =
                loaded.dataset.instances.iter().map(|i| (&loaded.images[&i.image_id], i.bbox)).collect();
            let preds = predict(&model, &items, batch)?;
            let dets = loaded
                .dataset
                .instances
                .iter()
                .zip(preds)
                .map(|(inst, p)| Detection { image_id: inst.image_id, keypoints: p.keypoints, score: p.score })
                .collect();
            (loaded.dataset, dets)
        }
    };
    let report = ap_ar(&dets, &dataset.instances, &skeleton, &EvalParams::default())?;
    let text = report.to_text();
    rec.write("metrics.txt", &text)?;
    rec.write("metrics.json", report.to_json()?)?;
    rec.write("results.json", to_coco_results(&dets)?)?;
    print!("{text}");
    Ok(())
}

fn cmd_bench(cli: &Cli, cfg: &ModelConfig, rec: &mut RunRecorder, batch: usize, iters: usize, warmup: usize) -> Result<()> {
    let model = PoseModel::new(cfg, cli.seed)?;
    let bcfg = BenchConfig { batch, warmup_iters: warmup, timed_iters: iters, threads: cli.threads, seed: cli.seed };
    let report = bench_inference(&model, &bcfg)?;
    let text = report.to_text();
    rec.write("bench.json", report.to_json()?)?;
    rec.write("bench.txt", &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_profile(cli: &Cli, cfg: &ModelConfig, rec: &mut RunRecorder, resolution: Option<(usize, usize)>) -> Result<()> {
    let (w, h) = resolution.unwrap_or((cfg.input_width, cfg.input_height));
    // The head's dense layers depend on the feature size, so build the model at the requested resolution.
    let sized = cfg.clone().with_resolution(w, h);
    sized.validate()?;
    let model = PoseModel::new(&sized, cli.seed)?;
    let report = count_macs(&model, (w, h))?;
    let table = report.to_table();
    rec.write("profile.txt", &table)?;
    rec.write("profile.json", report.to_json()?)?;
    print!("{table}");
    Ok(())
}

fn cmd_stats(cli: &Cli, rec: &mut RunRecorder, data: &DataArgs, split_file: Option<&Path>) -> Result<()> {
    let loaded = load_data(data, cli.seed, ImagePolicy::Skip)?;
    let splits = split_file
        .map(|p| -> Result<SplitAssignment> {
            let text = std::fs::read_to_string(p).with_context(|| format!("cannot read split file {}", p.display()))?;
            Ok(SplitAssignment::from_text(&text)?)
        })
        .transpose()?;
    let stats = visibility_stats(&loaded.dataset, splits.as_ref())?;
    let table = stats.to_table();
    rec.write("stats.txt", &table)?;
    rec.write("stats.json", stats.to_json()?)?;
    print!("{table}");
    Ok(())
}

fn cmd_viz(cli: &Cli, cfg: &ModelConfig, rec: &mut RunRecorder, data: &DataArgs, checkpoint: Option<&Path>) -> Result<()> {
    let loaded = load_data(data, cli.seed, ImagePolicy::BestEffort)?;
    let model = match checkpoint {
        Some(p) => {
            check_skeleton(cfg)?;
            Some(load_model(cfg, Some(p), cli.seed)?)
        }
        None => None,
    };
    let by_image = loaded.dataset.by_image();
    let mut written = 0;
    for info in &loaded.dataset.images {
        let Some(img) = loaded.images.get(&info.id) else { continue };
        let mut overlay = img.to_rgb();
        let instances = by_image.get(&info.id).map(Vec::as_slice).unwrap_or_default();
        for (n, inst) in instances.iter().enumerate() {
            viz::draw_ground_truth(&mut overlay, &inst.keypoints);
            let Some(model) = &model else { continue };
            let (w, h) = (cfg.input_width, cfg.input_height);
            let (crop, t) = crop_and_normalize(img, &inst.bbox, w, h)?;
            let (xl, yl) = model.infer(&crop.reshape(&[1, 3, h, w])?)?;
            let decoded = simcc_decode(&xl, &yl, cfg.head.split_ratio)?;
            let pts: Vec<(f64, f64)> = decoded[0].iter().map(|k| t.to_image.apply(k.x, k.y)).collect();
            viz::draw_prediction(&mut overlay, &pts);
            for (axis, logits) in [("x", &xl), ("y", &yl)] {
                let bins = logits.shape()[2];
                let strip = viz::heat_strip(&viz::softmax_rows(logits.data(), bins), 4);
                rec.write(&format!("heat_{}_{n}_{axis}.ppm", info.id), strip.to_pnm())?;
            }
        }
        rec.write(&format!("viz_{}.ppm", info.id), overlay.to_pnm())?;
        written += 1;
    }
    if written == 0 && !loaded.missing.is_empty() {
        bail!("none of the {} images could be loaded", loaded.missing.len());
    }
    println!("rendered {written} image(s), skipped {}", loaded.missing.len());
    Ok(())
}

fn cmd_synth(cli: &Cli, rec: &mut RunRecorder, count: usize) -> Result<()> {
    let synth = synth_dataset(count, cli.seed)?;
    rec.write("annotations.json", synth.dataset.to_json()?)?;
    for (info, img) in synth.dataset.images.iter().zip(&synth.images) {
        rec.write(&info.file_name, img.to_pnm())?;
    }
    println!("wrote {} images, {} instances", synth.images.len(), synth.dataset.instances.len());
    Ok(())
}

fn cmd_split(cli: &Cli, rec: &mut RunRecorder, annotations: &Path, ratios: &[f64]) -> Result<()> {
    let bytes = std::fs::read(annotations).with_context(|| format!("cannot read annotations {}", annotations.display()))?;
    let dataset = parse_annotations(&bytes)?;
    let [a, b, c] = ratios else { bail!("--ratios needs exactly three values") };
    let split = split_dataset(&dataset, [*a, *b, *c], cli.seed)?;
    rec.write("splits.tsv", split.to_text())?;
    Ok(())
}
