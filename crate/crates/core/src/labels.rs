//! Segmentation label synthesis: thresholding images into coarse masks and
//! propagating masks from a small trained segmentation model to the rest of
//! the training set.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use candle_core::Tensor;

use crate::data::{sample_per_class, Dataset, ImageData, SegMask, SubsetSize, SubsetSpec};
use crate::error::{Error, Result};
use crate::infer::SegLogits;
use crate::model::{Method, Model, NetworkConfig};
use crate::train::{train, TrainConfig, TrainReport};

/// Turn an image into a mask by thresholding: pixels whose value is strictly
/// greater than `threshold` (max over channels) get the sample's class label,
/// everything else becomes background.
pub fn binarize_to_mask(
    image: &ImageData,
    label: u32,
    num_classes: usize,
    threshold: f32,
) -> Result<SegMask> {
    if label < 1 || label as usize > num_classes {
        return Err(Error::validation(format!(
            "label {label} outside 1..={num_classes}"
        )));
    }
    if num_classes > u8::MAX as usize {
        return Err(Error::validation("more than 255 classes not supported"));
    }
    let mut mask = SegMask::zeros(image.h, image.w, num_classes);
    for y in 0..image.h {
        for x in 0..image.w {
            let mut v = image.get(0, y, x);
            for ch in 1..image.c {
                v = v.max(image.get(ch, y, x));
            }
            if v > threshold {
                mask.set(y, x, label as u8);
            }
        }
    }
    Ok(mask)
}

/// Attach a thresholded mask to every sample, replacing any existing masks.
pub fn binarize_dataset(dataset: Dataset, threshold: f32) -> Result<Dataset> {
    let num_classes = dataset.spec.num_classes;
    let mut masks = BTreeMap::new();
    for s in dataset.samples() {
        masks.insert(
            s.id.clone(),
            binarize_to_mask(&s.image, s.label, num_classes, threshold)?,
        );
    }
    dataset.with_masks(&masks)
}

/// Per-pixel argmax over all channels (background included); the lowest
/// channel index wins ties.
pub fn argmax_mask(logits: &SegLogits) -> SegMask {
    let mut mask = SegMask::zeros(logits.h, logits.w, logits.num_classes);
    for y in 0..logits.h {
        for x in 0..logits.w {
            let mut best = 0usize;
            let mut best_v = logits.get(0, y, x);
            for c in 1..=logits.num_classes {
                let v = logits.get(c, y, x);
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            mask.set(y, x, best as u8);
        }
    }
    mask
}

#[derive(Clone, Debug, PartialEq)]
pub struct PropagationReport {
    pub total: usize,
    pub propagated: usize,
    pub kept_manual: usize,
    /// Mean fraction of pixels labelled as foreground across propagated masks.
    pub mean_foreground_fraction: f64,
}

impl PropagationReport {
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "total={}", self.total);
        let _ = writeln!(s, "propagated={}", self.propagated);
        let _ = writeln!(s, "kept_manual={}", self.kept_manual);
        let _ = writeln!(
            s,
            "mean_foreground_fraction={:.6}",
            self.mean_foreground_fraction
        );
        s
    }
}

/// Run the segmentation model over every sample and replace its mask with the
/// predicted per-pixel argmax. With `keep_existing`, samples that already
/// carry a mask are left untouched.
pub fn propagate_labels(
    model: &Model,
    dataset: Dataset,
    batch_size: usize,
    keep_existing: bool,
) -> Result<(Dataset, PropagationReport)> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be >= 1"));
    }
    if model.num_classes() != dataset.spec.num_classes {
        return Err(Error::validation(format!(
            "model predicts {} classes but dataset has {}",
            model.num_classes(),
            dataset.spec.num_classes
        )));
    }
    let targets: Vec<String> = dataset
        .samples()
        .iter()
        .filter(|s| !(keep_existing && s.mask.is_some()))
        .map(|s| s.id.clone())
        .collect();
    let total = dataset.len();
    let kept_manual = total - targets.len();
    let device = candle_core::Device::Cpu;
    let mut masks = BTreeMap::new();
    let mut fg_fraction_sum = 0.0f64;
    for chunk in targets.chunks(batch_size) {
        let images: Vec<Tensor> = chunk
            .iter()
            .map(|id| dataset.get(id).expect("id from this dataset").image.to_tensor(&device))
            .collect::<Result<_>>()?;
        let batch = Tensor::stack(&images, 0)?;
        let logits = model.forward_seg(&batch, false)?;
        for (i, id) in chunk.iter().enumerate() {
            let sample_logits = SegLogits::from_tensor(&logits.get(i)?)?;
            let mask = argmax_mask(&sample_logits);
            fg_fraction_sum += mask.foreground_count() as f64 / (mask.h * mask.w) as f64;
            masks.insert(id.clone(), mask);
        }
    }
    let propagated = masks.len();
    let report = PropagationReport {
        total,
        propagated,
        kept_manual,
        mean_foreground_fraction: if propagated == 0 {
            0.0
        } else {
            fg_fraction_sum / propagated as f64
        },
    };
    Ok((dataset.with_masks(&masks)?, report))
}

/// Select `m` mask-carrying samples per class and train a segmentation-only
/// model on them. Returns the trained model (id `seg-<m>`), the ids it was
/// trained on, and the training report.
pub fn build_seg_m(
    dataset: &Dataset,
    m: usize,
    subset_seed: u64,
    net: &NetworkConfig,
    cfg: &TrainConfig,
) -> Result<(Model, Vec<String>, TrainReport)> {
    if m == 0 {
        return Err(Error::config("seg-M needs at least one sample per class"));
    }
    let masked: Vec<_> = dataset
        .samples()
        .iter()
        .filter(|s| s.mask.is_some())
        .cloned()
        .collect();
    if masked.is_empty() {
        return Err(Error::validation(
            "no samples carry masks; run binarization or provide manual masks first",
        ));
    }
    let mut spec = dataset.spec.clone();
    spec.size = masked.len();
    let masked_set = Dataset::from_samples(spec, masked)?;
    let ids = sample_per_class(
        &masked_set,
        &SubsetSpec {
            size: SubsetSize::PerClass(m),
            seed: subset_seed,
        },
    )?;
    let subset = masked_set.subset(&ids)?;
    let (h, w, c) = subset.spec.image_shape;
    let mut model = Model::build(
        Method::SegmentationOnly,
        net,
        (h, w, c),
        subset.spec.num_classes,
        cfg.seed,
        format!("seg-{m}"),
    )?;
    let report = train(&mut model, &subset, None, cfg)?;
    Ok((model, ids, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn binarize_strict_threshold() {
        let mut img = ImageData::zeros(1, 4, 4);
        img.set(0, 0, 0, 0.5);
        img.set(0, 1, 2, 1.0);
        img.set(0, 3, 3, 0.0); // exactly the threshold: background
        let mask = binarize_to_mask(&img, 7, 10, 0.0).unwrap();
        assert_eq!(mask.get(0, 0), 7);
        assert_eq!(mask.get(1, 2), 7);
        assert_eq!(mask.get(3, 3), 0);
        assert_eq!(mask.foreground_count(), 2);
    }

    #[test]
    fn binarize_random_images_match_pixelwise_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..50 {
            let mut img = ImageData::zeros(1, 28, 28);
            for v in img.data.iter_mut() {
                // roughly half the pixels exactly zero, like a digit image
                *v = if rng.gen_bool(0.5) { 0.0 } else { rng.gen_range(0.004..1.0) };
            }
            let label = (trial % 10) as u32 + 1;
            let mask = binarize_to_mask(&img, label, 10, 0.0).unwrap();
            for y in 0..28 {
                for x in 0..28 {
                    let expect = if img.get(0, y, x) > 0.0 { label as u8 } else { 0 };
                    assert_eq!(mask.get(y, x), expect);
                }
            }
        }
    }

    #[test]
    fn binarize_rejects_out_of_range_label() {
        let img = ImageData::zeros(1, 2, 2);
        assert!(binarize_to_mask(&img, 0, 3, 0.0).is_err());
        assert!(binarize_to_mask(&img, 4, 3, 0.0).is_err());
    }

    #[test]
    fn multichannel_uses_max_over_channels() {
        let mut img = ImageData::zeros(3, 2, 2);
        img.set(2, 1, 1, 0.9);
        let mask = binarize_to_mask(&img, 2, 5, 0.0).unwrap();
        assert_eq!(mask.get(1, 1), 2);
        assert_eq!(mask.foreground_count(), 1);
    }

    #[test]
    fn argmax_prefers_lowest_channel_on_ties() {
        let logits = SegLogits::new(2, 1, 2, vec![1.0, 0.0, 1.0, 2.0, 0.5, 2.0]).unwrap();
        let mask = argmax_mask(&logits);
        // pixel (0,0): channels (1.0, 1.0, 0.5) -> background wins the tie
        assert_eq!(mask.get(0, 0), 0);
        // pixel (0,1): channels (0.0, 2.0, 2.0) -> class 1 wins the tie
        assert_eq!(mask.get(0, 1), 1);
    }
}
