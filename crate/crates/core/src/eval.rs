//! Metrics, k-fold splitting and the experiment grid harness.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::{sample_per_class, Dataset, SegMask, SubsetSize, SubsetSpec};
use crate::error::{Error, Result};
use crate::infer::{class_scores_from_seg, SegLogits};
use crate::labels::argmax_mask;
use crate::model::{Method, Model, NetworkConfig};
use crate::train::{train, TrainConfig};

/// Image-level predictions in dataset order, 1-based.
pub fn predict_labels(model: &Model, dataset: &Dataset, batch_size: usize) -> Result<Vec<u32>> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be >= 1"));
    }
    let device = candle_core::Device::Cpu;
    let mut out = Vec::with_capacity(dataset.len());
    for chunk in dataset.samples().chunks(batch_size) {
        let images: Vec<Tensor> = chunk
            .iter()
            .map(|s| s.image.to_tensor(&device))
            .collect::<Result<_>>()?;
        let batch = Tensor::stack(&images, 0)?;
        match model.method() {
            Method::Cvs | Method::SegmentationOnly => {
                let logits = model.forward_seg(&batch, false)?;
                for i in 0..chunk.len() {
                    let scores = class_scores_from_seg(&SegLogits::from_tensor(&logits.get(i)?)?)?;
                    out.push(scores.predicted);
                }
            }
            Method::Classification | Method::Multitask => {
                let logits = model.forward_clf(&batch, false)?;
                let rows: Vec<Vec<f32>> = logits.to_vec2()?;
                for row in rows {
                    let mut best = 0usize;
                    for (i, &v) in row.iter().enumerate() {
                        if v > row[best] {
                            best = i;
                        }
                    }
                    out.push(best as u32 + 1);
                }
            }
        }
    }
    Ok(out)
}

/// Per-pixel argmax masks in dataset order.
pub fn predict_masks(model: &Model, dataset: &Dataset, batch_size: usize) -> Result<Vec<SegMask>> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be >= 1"));
    }
    let device = candle_core::Device::Cpu;
    let mut out = Vec::with_capacity(dataset.len());
    for chunk in dataset.samples().chunks(batch_size) {
        let images: Vec<Tensor> = chunk
            .iter()
            .map(|s| s.image.to_tensor(&device))
            .collect::<Result<_>>()?;
        let logits = model.forward_seg(&Tensor::stack(&images, 0)?, false)?;
        for i in 0..chunk.len() {
            out.push(argmax_mask(&SegLogits::from_tensor(&logits.get(i)?)?));
        }
    }
    Ok(out)
}

/// Fraction of matching entries; empty input is an error rather than 1.0.
pub fn accuracy(predictions: &[u32], truth: &[u32]) -> Result<f64> {
    if predictions.len() != truth.len() {
        return Err(Error::validation(format!(
            "{} predictions but {} labels",
            predictions.len(),
            truth.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::validation("accuracy of an empty set is undefined"));
    }
    let hits = predictions
        .iter()
        .zip(truth)
        .filter(|(a, b)| a == b)
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Mean intersection-over-union across foreground classes, with
/// intersections and unions aggregated over the whole collection. Classes
/// that appear in neither prediction nor ground truth are excluded from the
/// mean.
pub fn mean_iou(predictions: &[SegMask], truth: &[SegMask], num_classes: usize) -> Result<f64> {
    if predictions.len() != truth.len() {
        return Err(Error::validation(format!(
            "{} predicted masks but {} reference masks",
            predictions.len(),
            truth.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::validation("IoU of an empty set is undefined"));
    }
    let mut intersection = vec![0u64; num_classes + 1];
    let mut union = vec![0u64; num_classes + 1];
    for (pred, gt) in predictions.iter().zip(truth) {
        if (pred.h, pred.w) != (gt.h, gt.w) {
            return Err(Error::shape(format!(
                "predicted mask {}x{} does not match reference {}x{}",
                pred.h, pred.w, gt.h, gt.w
            )));
        }
        for (&p, &t) in pred.values.iter().zip(&gt.values) {
            let (p, t) = (p as usize, t as usize);
            if p > num_classes || t > num_classes {
                return Err(Error::validation("mask value exceeds class count"));
            }
            if p == t {
                intersection[p] += 1;
                union[p] += 1;
            } else {
                union[p] += 1;
                union[t] += 1;
            }
        }
    }
    let mut total = 0.0f64;
    let mut counted = 0usize;
    for c in 1..=num_classes {
        if union[c] == 0 {
            continue;
        }
        total += intersection[c] as f64 / union[c] as f64;
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::validation(
            "no foreground class present in predictions or references",
        ));
    }
    Ok(total / counted as f64)
}

/// Shuffle ids with a seeded generator and cut them into `k` contiguous
/// validation chunks whose sizes differ by at most one. Returns
/// `(train_ids, val_ids)` per fold.
pub fn kfold_split(ids: &[String], k: usize, seed: u64) -> Result<Vec<(Vec<String>, Vec<String>)>> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    if k < 2 {
        return Err(Error::config("k-fold needs k >= 2"));
    }
    if ids.len() < k {
        return Err(Error::config(format!(
            "cannot split {} ids into {k} folds",
            ids.len()
        )));
    }
    let unique: std::collections::BTreeSet<&String> = ids.iter().collect();
    if unique.len() != ids.len() {
        return Err(Error::validation("duplicate ids in k-fold input"));
    }
    let mut order: Vec<String> = ids.to_vec();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let base = order.len() / k;
    let extra = order.len() % k;
    let mut folds = Vec::with_capacity(k);
    let mut offset = 0usize;
    for fold in 0..k {
        let size = base + usize::from(fold < extra);
        let val: Vec<String> = order[offset..offset + size].to_vec();
        let mut train: Vec<String> = Vec::with_capacity(order.len() - size);
        train.extend_from_slice(&order[..offset]);
        train.extend_from_slice(&order[offset + size..]);
        folds.push((train, val));
        offset += size;
    }
    Ok(folds)
}

/// Evaluation summary for one trained model, carrying the annotation counts
/// the run consumed so downstream cost analysis can price it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: String,
    pub method: Method,
    pub n_test: usize,
    pub accuracy: Option<f64>,
    pub mean_iou: Option<f64>,
    /// Training images that contributed an image-level label.
    pub n_class_labeled: usize,
    /// Training images that contributed a pixel-level mask.
    pub n_seg_labeled: usize,
}

/// Score `model` on `test`; segmentation quality is reported only when every
/// test sample carries a reference mask.
pub fn evaluate_model(
    model: &Model,
    test: &Dataset,
    batch_size: usize,
    n_class_labeled: usize,
    n_seg_labeled: usize,
) -> Result<EvalReport> {
    let predictions = predict_labels(model, test, batch_size)?;
    let truth: Vec<u32> = test.samples().iter().map(|s| s.label).collect();
    let acc = accuracy(&predictions, &truth)?;
    let miou = if model.method().has_seg_head()
        && test.samples().iter().all(|s| s.mask.is_some())
    {
        let predicted = predict_masks(model, test, batch_size)?;
        let reference: Vec<SegMask> = test
            .samples()
            .iter()
            .map(|s| s.mask.clone().expect("checked above"))
            .collect();
        Some(mean_iou(&predicted, &reference, test.spec.num_classes)?)
    } else {
        None
    };
    Ok(EvalReport {
        model_id: model.model_id().to_string(),
        method: model.method(),
        n_test: test.len(),
        accuracy: Some(acc),
        mean_iou: miou,
        n_class_labeled,
        n_seg_labeled,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub method: Method,
    pub subset: SubsetSize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridOutcome {
    pub cell: GridCell,
    /// Accuracy on the test split, or the failure message for this cell.
    pub outcome: std::result::Result<f64, String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResultsTable {
    pub rows: Vec<GridOutcome>,
}

fn subset_to_string(s: SubsetSize) -> String {
    match s {
        SubsetSize::All => "all".into(),
        SubsetSize::PerClass(m) => m.to_string(),
    }
}

impl ResultsTable {
    /// Tab-separated rows: method, samples per class, seed, accuracy. Failed
    /// cells carry `error:<message>` in the accuracy column.
    pub fn render(&self) -> String {
        let mut out = String::from("method\tper_class\tseed\taccuracy\n");
        for row in &self.rows {
            let value = match &row.outcome {
                Ok(acc) => format!("{acc:.6}"),
                Err(msg) => format!("error:{}", msg.replace(['\t', '\n'], " ")),
            };
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                row.cell.method.as_str(),
                subset_to_string(row.cell.subset),
                row.cell.seed,
                value
            ));
        }
        out
    }

    pub fn parse(text: &str) -> Result<ResultsTable> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 {
                if line != "method\tper_class\tseed\taccuracy" {
                    return Err(Error::validation("unrecognized results table header"));
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(Error::validation(format!(
                    "results row {} has {} fields, expected 4",
                    i + 1,
                    fields.len()
                )));
            }
            let cell = GridCell {
                method: fields[0].parse()?,
                subset: fields[1].parse()?,
                seed: fields[2]
                    .parse()
                    .map_err(|_| Error::validation(format!("bad seed '{}'", fields[2])))?,
            };
            let outcome = if let Some(msg) = fields[3].strip_prefix("error:") {
                Err(msg.to_string())
            } else {
                Ok(fields[3]
                    .parse::<f64>()
                    .map_err(|_| Error::validation(format!("bad accuracy '{}'", fields[3])))?)
            };
            rows.push(GridOutcome { cell, outcome });
        }
        Ok(ResultsTable { rows })
    }

    /// Mean accuracy over seeds for each (method, subset) with at least one
    /// successful cell, in first-seen order.
    pub fn mean_over_seeds(&self) -> Vec<(Method, SubsetSize, f64)> {
        let mut keys: Vec<(Method, SubsetSize)> = Vec::new();
        let mut sums: std::collections::HashMap<(String, String), (f64, usize)> =
            std::collections::HashMap::new();
        for row in &self.rows {
            let Ok(acc) = &row.outcome else { continue };
            let key = (
                row.cell.method.as_str().to_string(),
                subset_to_string(row.cell.subset),
            );
            let entry = sums.entry(key).or_insert((0.0, 0));
            entry.0 += acc;
            entry.1 += 1;
            if !keys.contains(&(row.cell.method, row.cell.subset)) {
                keys.push((row.cell.method, row.cell.subset));
            }
        }
        keys.into_iter()
            .map(|(m, s)| {
                let (sum, n) =
                    sums[&(m.as_str().to_string(), subset_to_string(s))];
                (m, s, sum / n as f64)
            })
            .collect()
    }
}

/// Train and score one model per (method, subset size, seed) combination.
/// Cell failures are captured in the table instead of aborting the sweep.
#[allow(clippy::too_many_arguments)]
pub fn run_experiment_grid(
    train_set: &Dataset,
    test_set: &Dataset,
    net: &NetworkConfig,
    base_cfg: &TrainConfig,
    methods: &[Method],
    sizes: &[SubsetSize],
    seeds: &[u64],
    mut on_cell: impl FnMut(&GridCell, &std::result::Result<f64, String>),
) -> Result<ResultsTable> {
    if methods.is_empty() || sizes.is_empty() || seeds.is_empty() {
        return Err(Error::config("experiment grid has an empty axis"));
    }
    let mut table = ResultsTable::default();
    for &method in methods {
        for &size in sizes {
            for &seed in seeds {
                let cell = GridCell {
                    method,
                    subset: size,
                    seed,
                };
                let outcome = run_grid_cell(train_set, test_set, net, base_cfg, &cell)
                    .map_err(|e| e.to_string());
                on_cell(&cell, &outcome);
                table.rows.push(GridOutcome { cell, outcome });
            }
        }
    }
    Ok(table)
}

fn run_grid_cell(
    train_set: &Dataset,
    test_set: &Dataset,
    net: &NetworkConfig,
    base_cfg: &TrainConfig,
    cell: &GridCell,
) -> Result<f64> {
    let ids = sample_per_class(
        train_set,
        &SubsetSpec {
            size: cell.subset,
            seed: cell.seed,
        },
    )?;
    let subset = train_set.subset(&ids)?;
    let (h, w, c) = subset.spec.image_shape;
    let model_id = format!(
        "{}-{}-s{}",
        cell.method.as_str(),
        subset_to_string(cell.subset),
        cell.seed
    );
    let mut model = Model::build(
        cell.method,
        net,
        (h, w, c),
        subset.spec.num_classes,
        cell.seed,
        model_id,
    )?;
    let mut cfg = base_cfg.clone();
    cfg.seed = cell.seed;
    cfg.checkpoint_dir = None;
    train(&mut model, &subset, None, &cfg)?;
    let predictions = predict_labels(&model, test_set, cfg.batch_size)?;
    let truth: Vec<u32> = test_set.samples().iter().map(|s| s.label).collect();
    accuracy(&predictions, &truth)
}
