//! Desk-scale training: Adam with linear warmup on augmented crops of an
//! annotated image set, plus top-down prediction and PCK evaluation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    augment, crop_and_normalize, derive_seed, AugmentPolicy, BBox, CropTransform, Image, Keypoint, KeypointInstance, SynthDataset,
};
use crate::error::{Error, Result};
use crate::head::{simcc_decode, simcc_encode, simcc_loss, simcc_loss_value, LossKind};
use crate::metrics::pck_counts;
use crate::model::PoseModel;
use crate::nn::{ParamStore, Session};
use crate::tensor::{Graph, NormMode, Tensor};

/// Annotated instances with their source images.
#[derive(Clone, Debug)]
pub struct Samples<'a> {
    pub instances: &'a [KeypointInstance],
    pub images: BTreeMap<u64, &'a Image>,
}

impl<'a> Samples<'a> {
    pub fn new(instances: &'a [KeypointInstance], images: BTreeMap<u64, &'a Image>) -> Self {
        Self { instances, images }
    }

    /// Instances and images of a generated set.
    pub fn from_synth(synth: &'a SynthDataset) -> Self {
        let images = synth.dataset.images.iter().map(|i| i.id).zip(&synth.images).collect();
        Self { instances: &synth.dataset.instances, images }
    }

    fn image(&self, inst: &KeypointInstance) -> Result<&'a Image> {
        self.images
            .get(&inst.image_id)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("no image for image_id {}", inst.image_id)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iters: usize,
    pub lr: f64,
    /// Fraction of `iters` spent ramping the learning rate up linearly.
    pub warmup_frac: f64,
    pub batch: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub augment: AugmentPolicy,
    /// Fixed training instances used to measure the loss before and after training.
    pub probe_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iters: 200,
            lr: 1e-3,
            warmup_frac: 0.1,
            batch: 8,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            augment: AugmentPolicy::default(),
            probe_size: 16,
        }
    }
}

/// Learning rate at 0-based `iter`: linear ramp over the warmup, then constant.
pub fn lr_at(cfg: &TrainConfig, iter: usize) -> f64 {
    let warm = (cfg.warmup_frac * cfg.iters as f64).ceil() as usize;
    if iter < warm {
        cfg.lr * (iter + 1) as f64 / warm as f64
    } else {
        cfg.lr
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f32>> = store.params().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self { beta1, beta2, eps, step: 0, m: zeros.clone(), v: zeros }
    }

    /// Applies one update; `grads[i]` belongs to the `i`-th parameter (`None` = zero).
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::Invariant(format!("{} gradients for {} parameters", grads.len(), self.m.len())));
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        for (((p, g), m), v) in store.params_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = g else { continue };
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = f64::from(gi);
                let m1 = b1 * f64::from(*mi) + (1.0 - b1) * gi;
                let v1 = b2 * f64::from(*vi) + (1.0 - b2) * gi * gi;
                *mi = m1 as f32;
                *vi = v1 as f32;
                let update = lr * (m1 / c1) / ((v1 / c2).sqrt() + self.eps);
                *w = (f64::from(*w) - update) as f32;
            }
        }
        Ok(())
    }
}

/// Crop-frame input batch and keypoints.
pub struct Batch {
    pub images: Tensor,
    pub keypoints: Vec<Vec<Keypoint>>,
    pub transforms: Vec<CropTransform>,
}

fn stack(crops: Vec<Tensor>, h: usize, w: usize) -> Result<Tensor> {
    let n = crops.len();
    let data: Vec<f32> = crops.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::new(vec![n, 3, h, w], data)
}

/// Augments (when `policy` is given) and crops each instance to the model input.
pub fn prepare_batch(model: &PoseModel, samples: &Samples, indices: &[usize], seed: u64, policy: Option<&AugmentPolicy>) -> Result<Batch> {
    let cfg = model.config();
    let (w, h) = (cfg.input_width, cfg.input_height);
    let mut crops = Vec::with_capacity(indices.len());
    let mut keypoints = Vec::with_capacity(indices.len());
    let mut transforms = Vec::with_capacity(indices.len());
    for (slot, &i) in indices.iter().enumerate() {
        let inst = samples
            .instances
            .get(i)
            .ok_or_else(|| Error::InvalidArgument(format!("sample index {i} out of range")))?;
        let img = samples.image(inst)?;
        let (img, inst) = match policy {
            Some(p) => {
                let (a, b, _) = augment(img, inst, derive_seed(seed, slot as u64), p)?;
                (a, b)
            }
            None => (img.clone(), inst.clone()),
        };
        let (crop, t) = crop_and_normalize(&img, &inst.bbox, w, h)?;
        keypoints.push(t.keypoints_to_crop(&inst.keypoints));
        crops.push(crop);
        transforms.push(t);
    }
    Ok(Batch { images: stack(crops, h, w)?, keypoints, transforms })
}

/// Eval-mode loss on a fixed, unaugmented batch.
pub fn probe_loss(model: &PoseModel, samples: &Samples, indices: &[usize], kind: LossKind) -> Result<f64> {
    let batch = prepare_batch(model, samples, indices, 0, None)?;
    let (xl, yl) = model.infer(&batch.images)?;
    let geo = model.config().head_geometry();
    let targets = simcc_encode(&batch.keypoints, &geo, model.config().head.target_sigma)?;
    simcc_loss_value(&xl, &yl, &targets, kind)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
    pub batch_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<LossRecord>,
    /// Probe-batch KL loss before and after training.
    pub initial_loss: f64,
    pub final_loss: f64,
}

impl TrainReport {
    /// `iter,lr,loss,batch_seed` rows; header only when no step ran.
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("iter,lr,loss,batch_seed\n");
        for r in &self.records {
            out.push_str(&format!("{},{:e},{:.9},{}\n", r.iter, r.lr, r.loss, r.batch_seed));
        }
        out
    }
}

/// One optimisation step on a prepared batch; returns the batch loss.
fn train_step(model: &mut PoseModel, adam: &mut Adam, batch: &Batch, lr: f64) -> Result<f64> {
    let geo = model.config().head_geometry();
    let targets = simcc_encode(&batch.keypoints, &geo, model.config().head.target_sigma)?;
    let mut g = Graph::new();
    let (loss_value, grads) = {
        let mut s = Session::new(&mut g, &mut model.store, NormMode::Train, true);
        let x = s.g.constant(batch.images.clone());
        let (xl, yl) = model.net.forward(&mut s, x)?;
        let loss = simcc_loss(s.g, xl, yl, &targets, LossKind::Kl)?;
        let value = f64::from(s.g.value(loss).data()[0]);
        let mut grads = s.g.backward(loss)?;
        let per_param: Vec<Option<Tensor>> = s.param_vars().iter().map(|&v| grads.take(v)).collect();
        (value, per_param)
    };
    if !loss_value.is_finite() || grads.iter().flatten().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite("training loss or gradient".into()));
    }
    adam.step(&mut model.store, &grads, lr)?;
    Ok(loss_value)
}

/// Trains `model` in place. `on_step` sees each record as it is produced.
pub fn train(model: &mut PoseModel, samples: &Samples, cfg: &TrainConfig, mut on_step: impl FnMut(&LossRecord)) -> Result<TrainReport> {
    let n = samples.instances.len();
    if n == 0 {
        return Err(Error::InvalidArgument("training needs at least one instance".into()));
    }
    if cfg.batch == 0 || !(cfg.lr > 0.0) || !(0.0..=1.0).contains(&cfg.warmup_frac) {
        return Err(Error::InvalidArgument(format!(
            "invalid training settings: batch {}, lr {}, warmup {}",
            cfg.batch, cfg.lr, cfg.warmup_frac
        )));
    }
    let probe: Vec<usize> = (0..n.min(cfg.probe_size.max(1))).collect();
    let initial_loss = probe_loss(model, samples, &probe, LossKind::Kl)?;
    let mut adam = Adam::new(&model.store, cfg.beta1, cfg.beta2, cfg.eps);
    let mut order: Vec<usize> = Vec::new();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, u64::MAX));
    let mut records = Vec::with_capacity(cfg.iters);
    for iter in 0..cfg.iters {
        // Epoch-style sampling without replacement.
        let mut indices = Vec::with_capacity(cfg.batch);
        while indices.len() < cfg.batch {
            if order.is_empty() {
                order = (0..n).collect();
                order.shuffle(&mut shuffle_rng);
            }
            indices.push(order.pop().unwrap_or(0));
        }
        let batch_seed = derive_seed(cfg.seed, iter as u64);
        let lr = lr_at(cfg, iter);
        let batch = prepare_batch(model, samples, &indices, batch_seed, Some(&cfg.augment))?;
        let loss = train_step(model, &mut adam, &batch, lr).map_err(|e| match e {
            Error::NonFinite(what) => Error::NonFinite(format!(
                "{what} at iteration {iter} (batch seed {batch_seed}, instances {indices:?})"
            )),
            other => other,
        })?;
        let rec = LossRecord { iter, lr, loss, batch_seed };
        on_step(&rec);
        records.push(rec);
    }
    let final_loss = probe_loss(model, samples, &probe, LossKind::Kl)?;
    Ok(TrainReport { records, initial_loss, final_loss })
}

/// Top-down prediction for one box: image-frame keypoints and the instance score.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub keypoints: Vec<(f64, f64)>,
    pub keypoint_scores: Vec<f64>,
    pub score: f64,
}

/// Crops each `(image, box)` pair, runs the network in chunks of `batch`, and maps decoded points back.
pub fn predict(model: &PoseModel, items: &[(&Image, BBox)], batch: usize) -> Result<Vec<Prediction>> {
    let cfg = model.config();
    let (w, h) = (cfg.input_width, cfg.input_height);
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(batch.max(1)) {
        let mut crops = Vec::with_capacity(chunk.len());
        let mut transforms = Vec::with_capacity(chunk.len());
        for (img, bbox) in chunk {
            let (c, t) = crop_and_normalize(img, bbox, w, h)?;
            crops.push(c);
            transforms.push(t);
        }
        let (xl, yl) = model.infer(&stack(crops, h, w)?)?;
        for (kps, t) in simcc_decode(&xl, &yl, cfg.head.split_ratio)?.into_iter().zip(&transforms) {
            let keypoints = kps.iter().map(|k| t.to_image.apply(k.x, k.y)).collect();
            let keypoint_scores: Vec<f64> = kps.iter().map(|k| k.score).collect();
            let score = keypoint_scores.iter().sum::<f64>() / keypoint_scores.len().max(1) as f64;
            out.push(Prediction { keypoints, keypoint_scores, score });
        }
    }
    Ok(out)
}

/// PCK@`alpha` pooled over all visible keypoints, using ground-truth boxes.
pub fn evaluate_pck(model: &PoseModel, samples: &Samples, alpha: f64) -> Result<f64> {
    let items: Vec<(&Image, BBox)> =
        samples.instances.iter().map(|i| Ok((samples.image(i)?, i.bbox))).collect::<Result<_>>()?;
    let preds = predict(model, &items, 8)?;
    let (mut hits, mut total) = (0, 0);
    for (inst, p) in samples.instances.iter().zip(&preds) {
        let (a, b) = pck_counts(&p.keypoints, &inst.keypoints, &inst.bbox, alpha)?;
        hits += a;
        total += b;
    }
    if total == 0 {
        return Err(Error::InvalidArgument("PCK is undefined without visible keypoints".into()));
    }
    Ok(hits as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::data::synth_dataset;

    fn tiny() -> ModelConfig {
        let mut cfg = ModelConfig::desk().with_resolution(64, 48);
        cfg.head.split_ratio = 1.0;
        cfg
    }

    #[test]
    fn warmup_ramps_linearly_then_holds() {
        let cfg = TrainConfig { iters: 20, ..TrainConfig::default() };
        assert!((lr_at(&cfg, 0) - 5e-4).abs() < 1e-15);
        assert!((lr_at(&cfg, 1) - 1e-3).abs() < 1e-15);
        assert_eq!(lr_at(&cfg, 19), 1e-3);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        let mut adam = Adam::new(&store, 0.9, 0.999, 1e-8);
        adam.step(&mut store, &[Some(Tensor::new(vec![2], vec![3.0, -0.5]).unwrap())], 0.1).unwrap();
        let w = store.params().next().unwrap().1.data().to_vec();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_iterations_leave_parameters_untouched_and_runs_repeat() {
        let synth = synth_dataset(6, 1).unwrap();
        let samples = Samples::from_synth(&synth);
        let cfg = tiny();
        let mut m = PoseModel::new(&cfg, 3).unwrap();
        let before = m.store.param_entries();
        let r = train(&mut m, &samples, &TrainConfig { iters: 0, ..TrainConfig::default() }, |_| {}).unwrap();
        assert!(r.records.is_empty());
        assert_eq!(m.store.param_entries(), before);

        let tc = TrainConfig { iters: 3, batch: 2, ..TrainConfig::default() };
        let mut a = PoseModel::new(&cfg, 3).unwrap();
        let mut b = PoseModel::new(&cfg, 3).unwrap();
        let ra = train(&mut a, &samples, &tc, |_| {}).unwrap();
        let rb = train(&mut b, &samples, &tc, |_| {}).unwrap();
        assert_eq!(ra.loss_csv(), rb.loss_csv());
        assert_eq!(a.store.param_entries(), b.store.param_entries());
        assert!(ra.records.iter().all(|r| r.loss.is_finite()));
    }
}
