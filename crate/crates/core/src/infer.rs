//! Deriving a class label from segmentation logits.
//!
//! The background channel (index 0) is discarded, every remaining class
//! channel is averaged over all spatial positions, and a softmax over those
//! means yields class probabilities. Ties in the argmax go to the lowest
//! class index.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::model::Model;

/// Unnormalized per-pixel class logits, `(P + 1) x H x W` with channel 0 as
/// background.
#[derive(Clone, Debug)]
pub struct SegLogits {
    pub num_classes: usize,
    pub h: usize,
    pub w: usize,
    /// CHW layout with `num_classes + 1` channels.
    pub data: Vec<f32>,
}

impl SegLogits {
    pub fn new(num_classes: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::validation("segmentation logits need P >= 1"));
        }
        if data.len() != (num_classes + 1) * h * w {
            return Err(Error::shape(format!(
                "logit buffer of {} values does not match {}x{h}x{w}",
                data.len(),
                num_classes + 1
            )));
        }
        Ok(SegLogits {
            num_classes,
            h,
            w,
            data,
        })
    }

    /// From a `(P + 1, H, W)` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        if c < 2 {
            return Err(Error::shape(format!(
                "segmentation logits need at least 2 channels, got {c}"
            )));
        }
        let data = t.flatten_all()?.to_vec1::<f32>()?;
        SegLogits::new(c - 1, h, w, data)
    }

    pub fn get(&self, channel: usize, y: usize, x: usize) -> f32 {
        self.data[(channel * self.h + y) * self.w + x]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassScores {
    /// Spatial mean of each foreground channel, length P.
    pub logits: Vec<f64>,
    /// Softmax of `logits`, length P.
    pub probabilities: Vec<f64>,
    /// Predicted class in `1..=P` (lowest index on ties).
    pub predicted: u32,
}

/// The label-derivation rule: drop background, average each class channel
/// spatially, softmax, argmax.
pub fn class_scores_from_seg(h: &SegLogits) -> Result<ClassScores> {
    if h.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("segmentation logits contain non-finite values"));
    }
    let positions = (h.h * h.w) as f64;
    let mut logits = Vec::with_capacity(h.num_classes);
    for c in 1..=h.num_classes {
        let mut sum = 0.0f64;
        for y in 0..h.h {
            for x in 0..h.w {
                sum += h.get(c, y, x) as f64;
            }
        }
        logits.push(sum / positions);
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let probabilities: Vec<f64> = exps.iter().map(|&e| e / total).collect();
    let mut best = 0;
    for (i, &p) in probabilities.iter().enumerate() {
        if p > probabilities[best] {
            best = i;
        }
    }
    Ok(ClassScores {
        logits,
        probabilities,
        predicted: best as u32 + 1,
    })
}

/// Run the full image-to-label composition for a batch: segmentation forward
/// pass in inference mode, then [`class_scores_from_seg`] per sample.
pub fn predict_batch(model: &Model, images: &Tensor) -> Result<Vec<ClassScores>> {
    let logits = model.forward_seg(images, false)?;
    let batch = logits.dims4()?.0;
    let mut out = Vec::with_capacity(batch);
    for i in 0..batch {
        let sample = logits.get(i)?;
        out.push(class_scores_from_seg(&SegLogits::from_tensor(&sample)?)?);
    }
    Ok(out)
}
