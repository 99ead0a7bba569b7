//! Losses, the SGD optimizer and the training loop.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var};
use sha2::{Digest, Sha256};
use serde::{Deserialize, Serialize};

use crate::data::{augment, AugmentationPolicy, Dataset, LabeledSample, SegMask};
use crate::error::{Error, Result};
use crate::model::{CheckpointMeta, Method, Model};

/// Mean per-pixel cross entropy. `logits` is `(B, P + 1, H, W)`, `targets`
/// is `(B, H, W)` of class indices in `0..=P`.
pub fn pixel_cross_entropy(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = logits.dims4()?;
    let (tb, th, tw) = targets.dims3()?;
    if (b, h, w) != (tb, th, tw) {
        return Err(Error::shape(format!(
            "logit batch {b}x{h}x{w} does not match target batch {tb}x{th}x{tw}"
        )));
    }
    let max_target = targets.flatten_all()?.max(0)?.to_scalar::<u32>()?;
    if max_target as usize >= c {
        return Err(Error::validation(format!(
            "pixel target {max_target} outside the {c} logit channels"
        )));
    }
    let log_probs = candle_nn::ops::log_softmax(logits, 1)?;
    let index = targets.unsqueeze(1)?;
    let picked = log_probs.gather(&index.contiguous()?, 1)?;
    Ok(picked.mean_all()?.neg()?)
}

/// Mean cross entropy for image-level labels. `logits` is `(B, P)`, labels
/// are 1-based.
pub fn class_cross_entropy(logits: &Tensor, labels: &[u32]) -> Result<Tensor> {
    let (b, p) = logits.dims2()?;
    if labels.len() != b {
        return Err(Error::shape(format!(
            "{b} logit rows but {} labels",
            labels.len()
        )));
    }
    let mut zero_based = Vec::with_capacity(b);
    for &l in labels {
        if l < 1 || l as usize > p {
            return Err(Error::validation(format!("label {l} outside 1..={p}")));
        }
        zero_based.push(l - 1);
    }
    let index = Tensor::from_vec(zero_based, (b, 1), logits.device())?;
    let log_probs = candle_nn::ops::log_softmax(logits, 1)?;
    let picked = log_probs.gather(&index, 1)?;
    Ok(picked.mean_all()?.neg()?)
}

/// Joint objective for the two-headed model: segmentation term plus
/// `lambda` times the classification term.
pub fn multitask_loss(
    seg_logits: &Tensor,
    targets: &Tensor,
    clf_logits: &Tensor,
    labels: &[u32],
    lambda: f64,
) -> Result<Tensor> {
    let seg = pixel_cross_entropy(seg_logits, targets)?;
    let clf = class_cross_entropy(clf_logits, labels)?;
    Ok((seg + (clf * lambda)?)?)
}

/// SGD with classical momentum. With `decoupled` the weight-decay term is
/// applied directly to the weights instead of being folded into the gradient.
pub struct SgdMomentum {
    pub momentum: f64,
    pub weight_decay: f64,
    pub decoupled: bool,
    velocity: BTreeMap<String, Tensor>,
}

impl SgdMomentum {
    pub fn new(momentum: f64, weight_decay: f64, decoupled: bool) -> Self {
        SgdMomentum {
            momentum,
            weight_decay,
            decoupled,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step<'a>(
        &mut self,
        params: impl Iterator<Item = (&'a str, &'a Var)>,
        grads: &candle_core::backprop::GradStore,
        lr: f64,
    ) -> Result<()> {
        for (name, var) in params {
            let Some(grad) = grads.get(var) else {
                continue;
            };
            let weight = var.as_tensor();
            let mut g = grad.clone();
            if self.weight_decay != 0.0 {
                if self.decoupled {
                    var.set(&(weight - (weight * (lr * self.weight_decay))?)?.detach())?;
                } else {
                    g = (g + (weight * self.weight_decay)?)?;
                }
            }
            // detach the state written back into the optimizer and the
            // variables: anything kept across steps must not hold on to the
            // step's backward graph, or memory grows without bound
            let v = match self.velocity.get(name) {
                Some(prev) => ((prev * self.momentum)? + g)?,
                None => g,
            }
            .detach();
            var.set(&(var.as_tensor() - (&v * lr)?)?.detach())?;
            self.velocity.insert(name.to_string(), v);
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // an empty tensor map is not a valid safetensors payload, so keep a
        // sentinel alongside the velocity buffers
        let mut tensors: HashMap<String, Tensor> = HashMap::new();
        tensors.insert(
            "step.marker".into(),
            Tensor::zeros(1, DType::F32, &Device::Cpu)?,
        );
        for (k, v) in &self.velocity {
            tensors.insert(format!("velocity.{k}"), v.clone());
        }
        candle_core::safetensors::save(&tensors, path)?;
        Ok(())
    }

    pub fn load(&mut self, path: &Path, device: &Device) -> Result<()> {
        let tensors = candle_core::safetensors::load(path, device)?;
        self.velocity.clear();
        for (name, t) in tensors {
            if let Some(param) = name.strip_prefix("velocity.") {
                self.velocity.insert(param.to_string(), t);
            }
        }
        Ok(())
    }
}

/// Cosine schedule from `base_lr` at epoch 0 down towards zero at
/// `total_epochs`.
pub fn cosine_lr(base_lr: f64, epoch: usize, total_epochs: usize) -> f64 {
    if total_epochs <= 1 {
        return base_lr;
    }
    let t = epoch as f64 / total_epochs as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decoupled_decay: bool,
    /// Weight of the classification term in the joint objective.
    pub lambda: f64,
    pub seed: u64,
    pub augmentation: AugmentationPolicy,
    pub checkpoint_dir: Option<PathBuf>,
    pub resume: bool,
    /// Evaluate the held-out split every this many epochs (0 = never).
    pub eval_every: usize,
    /// Checkpoint and return after this many epochs while keeping the full
    /// `epochs` horizon for the learning-rate schedule, so a later resumed
    /// run continues seamlessly.
    pub stop_after_epochs: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            decoupled_decay: false,
            lambda: 1.0,
            seed: 0,
            augmentation: AugmentationPolicy::empty(),
            checkpoint_dir: None,
            resume: false,
            eval_every: 0,
            stop_after_epochs: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("learning rate must be positive and finite"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must be in [0, 1)"));
        }
        if self.weight_decay < 0.0 || self.lambda < 0.0 {
            return Err(Error::config("weight decay and lambda must be >= 0"));
        }
        self.augmentation.validate()
    }
}

/// One line of the tab-separated metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

impl MetricRecord {
    pub fn render(&self) -> String {
        format!("{}\t{}\t{}\t{:.6}", self.epoch, self.split, self.metric, self.value)
    }
}

pub fn write_metric_log(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let mut text = String::from("epoch\tsplit\tmetric\tvalue\n");
    for r in records {
        text.push_str(&r.render());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub records: Vec<MetricRecord>,
    pub epochs_run: usize,
    pub final_train_loss: f64,
}

/// Stateless seed derivation: everything random inside an epoch is a pure
/// function of (run seed, epoch, name), so resuming from a checkpoint
/// replays the exact same stream.
pub fn derive_seed(seed: u64, epoch: usize, name: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((epoch as u64).to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

fn masks_to_targets(samples: &[&LabeledSample], device: &Device) -> Result<Tensor> {
    let mut rows: Vec<Tensor> = Vec::with_capacity(samples.len());
    for s in samples {
        let mask: &SegMask = s
            .mask
            .as_ref()
            .ok_or_else(|| Error::validation(format!("sample '{}' has no mask", s.id)))?;
        let values: Vec<u32> = mask.values.iter().map(|&v| v as u32).collect();
        rows.push(Tensor::from_vec(values, (mask.h, mask.w), device)?);
    }
    Ok(Tensor::stack(&rows, 0)?)
}

fn stack_images(samples: &[&LabeledSample], device: &Device) -> Result<Tensor> {
    let images: Vec<Tensor> = samples
        .iter()
        .map(|s| s.image.to_tensor(device))
        .collect::<Result<_>>()?;
    Ok(Tensor::stack(&images, 0)?)
}

fn batch_loss(model: &Model, samples: &[&LabeledSample], lambda: f64) -> Result<Tensor> {
    let device = candle_core::Device::Cpu;
    let images = stack_images(samples, &device)?;
    let labels: Vec<u32> = samples.iter().map(|s| s.label).collect();
    match model.method() {
        Method::Cvs | Method::SegmentationOnly => {
            let targets = masks_to_targets(samples, &device)?;
            let logits = model.forward_seg(&images, true)?;
            pixel_cross_entropy(&logits, &targets)
        }
        Method::Classification => {
            let logits = model.forward_clf(&images, true)?;
            class_cross_entropy(&logits, &labels)
        }
        Method::Multitask => {
            let targets = masks_to_targets(samples, &device)?;
            let (seg, clf) = model.forward_both(&images, true)?;
            multitask_loss(&seg, &targets, &clf, &labels, lambda)
        }
    }
}

/// Mean validation loss without gradient tracking or augmentation.
fn eval_loss(model: &Model, dataset: &Dataset, batch_size: usize, lambda: f64) -> Result<f64> {
    let device = candle_core::Device::Cpu;
    let mut total = 0.0f64;
    let mut count = 0usize;
    for chunk in dataset.samples().chunks(batch_size) {
        let refs: Vec<&LabeledSample> = chunk.iter().collect();
        let images = stack_images(&refs, &device)?;
        let labels: Vec<u32> = refs.iter().map(|s| s.label).collect();
        let loss = match model.method() {
            Method::Cvs | Method::SegmentationOnly => {
                let targets = masks_to_targets(&refs, &device)?;
                pixel_cross_entropy(&model.forward_seg(&images, false)?, &targets)?
            }
            Method::Classification => {
                class_cross_entropy(&model.forward_clf(&images, false)?, &labels)?
            }
            Method::Multitask => {
                let targets = masks_to_targets(&refs, &device)?;
                let (seg, clf) = model.forward_both(&images, false)?;
                multitask_loss(&seg, &targets, &clf, &labels, lambda)?
            }
        };
        total += loss.to_scalar::<f32>()? as f64 * refs.len() as f64;
        count += refs.len();
    }
    Ok(total / count as f64)
}

pub fn train(
    model: &mut Model,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    cfg.validate()?;
    if model.method().needs_masks() {
        for s in train_set.samples() {
            if s.mask.is_none() {
                return Err(Error::validation(format!(
                    "method '{}' needs pixel labels but sample '{}' has none",
                    model.method().as_str(),
                    s.id
                )));
            }
        }
    }
    let mut optimizer = SgdMomentum::new(cfg.momentum, cfg.weight_decay, cfg.decoupled_decay);
    let mut start_epoch = 0usize;
    let mut report = TrainReport::default();

    if cfg.resume {
        if let Some(dir) = &cfg.checkpoint_dir {
            if dir.join("graph.json").exists() {
                let (loaded, meta) = Model::load_checkpoint(dir)?;
                if loaded.method() != model.method()
                    || loaded.num_classes() != model.num_classes()
                {
                    return Err(Error::validation(
                        "checkpoint does not match the configured model",
                    ));
                }
                *model = loaded;
                let opt_path = dir.join("optimizer.safetensors");
                if opt_path.exists() {
                    optimizer.load(&opt_path, &candle_core::Device::Cpu)?;
                }
                start_epoch = meta.epoch;
            }
        }
    }

    let ids: Vec<String> = train_set.ids().cloned().collect();
    for epoch in start_epoch..cfg.epochs {
        let lr = cosine_lr(cfg.lr, epoch, cfg.epochs);
        let mut order = ids.clone();
        let mut shuffle_rng =
            rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch, "shuffle"));
        order.shuffle(&mut shuffle_rng);
        model.reseed_dropout(derive_seed(cfg.seed, epoch, "dropout"));

        let mut epoch_loss = 0.0f64;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut augmented = Vec::with_capacity(chunk.len());
            for id in chunk {
                let sample = train_set.get(id).expect("id from this dataset");
                augmented.push(augment(
                    sample,
                    &cfg.augmentation,
                    derive_seed(cfg.seed, epoch, id),
                )?);
            }
            let refs: Vec<&LabeledSample> = augmented.iter().collect();
            let loss = batch_loss(model, &refs, cfg.lambda)?;
            let loss_value = loss.to_scalar::<f32>()? as f64;
            if !loss_value.is_finite() {
                return Err(Error::Diverged(format!(
                    "training diverged at epoch {epoch} (loss {loss_value})"
                )));
            }
            let grads = loss.backward()?;
            optimizer.step(
                model.store.trainable().map(|(n, v)| (n.as_str(), v)),
                &grads,
                lr,
            )?;
            epoch_loss += loss_value * refs.len() as f64;
            seen += refs.len();
        }
        let train_loss = epoch_loss / seen as f64;
        report.records.push(MetricRecord {
            epoch,
            split: "train".into(),
            metric: "loss".into(),
            value: train_loss,
        });
        report.records.push(MetricRecord {
            epoch,
            split: "train".into(),
            metric: "lr".into(),
            value: lr,
        });
        report.final_train_loss = train_loss;
        report.epochs_run = epoch + 1;

        if let Some(val) = val_set {
            let due = cfg.eval_every != 0
                && ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs);
            if due {
                report.records.push(MetricRecord {
                    epoch,
                    split: "val".into(),
                    metric: "loss".into(),
                    value: eval_loss(model, val, cfg.batch_size, cfg.lambda)?,
                });
                if model.method() != Method::SegmentationOnly {
                    let predictions =
                        crate::eval::predict_labels(model, val, cfg.batch_size)?;
                    let truth: Vec<u32> = val.samples().iter().map(|s| s.label).collect();
                    report.records.push(MetricRecord {
                        epoch,
                        split: "val".into(),
                        metric: "accuracy".into(),
                        value: crate::eval::accuracy(&predictions, &truth)?,
                    });
                }
            }
        }

        if let Some(dir) = &cfg.checkpoint_dir {
            model.save_checkpoint(
                dir,
                &CheckpointMeta {
                    epoch: epoch + 1,
                    config_hash: String::new(),
                    best_metric: None,
                },
            )?;
            optimizer.save(&dir.join("optimizer.safetensors"))?;
        }
        if cfg.stop_after_epochs == Some(epoch + 1) {
            break;
        }
    }
    Ok(report)
}
