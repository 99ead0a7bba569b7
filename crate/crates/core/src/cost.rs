//! Annotation-time accounting: price a training run by the number of
//! image-level and pixel-level labels it consumed, and emit accuracy versus
//! annotation-seconds curves.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{LayerDesc, NetworkGraph, TensorShape};
use crate::model::ModelDescription;

/// Seconds of annotator time per label kind.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRates {
    /// One image-level class label.
    pub class_label_seconds: f64,
    /// One dense per-pixel mask.
    pub seg_label_seconds: f64,
}

impl AnnotationRates {
    /// Measured rates for 10-class natural images.
    pub fn cifar10() -> Self {
        AnnotationRates {
            class_label_seconds: 3.5,
            seg_label_seconds: 29.52,
        }
    }

    /// Picking 1 of 100 classes is slower; mask time is unchanged. When the
    /// segmentation model is transferred from another dataset, charge the run
    /// with `n_seg = 0` instead of changing the rate.
    pub fn cifar100() -> Self {
        AnnotationRates {
            class_label_seconds: 8.5,
            seg_label_seconds: 29.52,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_label_seconds < 0.0 || self.seg_label_seconds < 0.0 {
            return Err(Error::config("annotation rates must be >= 0"));
        }
        Ok(())
    }
}

/// Total annotator seconds for a run that used `n_class` image-level labels
/// and `n_seg` dense masks.
pub fn annotation_cost(rates: &AnnotationRates, n_class: usize, n_seg: usize) -> f64 {
    n_class as f64 * rates.class_label_seconds + n_seg as f64 * rates.seg_label_seconds
}

/// Rough forward-pass FLOP count for one input, counting a multiply-add as
/// two operations. Used only as a relative compute marker on cost curves.
pub fn flops_estimate(graph: &NetworkGraph) -> Result<f64> {
    chain_flops(
        &graph.layers.iter().map(|l| l.desc.clone()).collect::<Vec<_>>(),
        graph.input,
    )
    .map(|(f, _)| f)
}

fn chain_flops(layers: &[LayerDesc], input: TensorShape) -> Result<(f64, TensorShape)> {
    let mut shape = input;
    let mut total = 0.0f64;
    for layer in layers {
        let out = layer.infer(shape)?;
        total += layer_flops(layer, shape, out)?;
        shape = out;
    }
    Ok((total, shape))
}

fn elems(shape: TensorShape) -> f64 {
    match shape {
        TensorShape::Spatial { c, h, w } => (c * h * w) as f64,
        TensorShape::Vector { len } => len as f64,
    }
}

fn layer_flops(layer: &LayerDesc, input: TensorShape, output: TensorShape) -> Result<f64> {
    let spatial = |s: TensorShape| match s {
        TensorShape::Spatial { c, h, w } => (c, h, w),
        TensorShape::Vector { len } => (len, 1, 1),
    };
    Ok(match layer {
        LayerDesc::Conv { kernel, .. } => {
            let (ci, _, _) = spatial(input);
            let (co, oh, ow) = spatial(output);
            2.0 * (kernel * kernel * ci * co * oh * ow) as f64
        }
        LayerDesc::ConvTranspose { kernel, .. } => {
            let (ci, ih, iw) = spatial(input);
            let (co, _, _) = spatial(output);
            2.0 * (kernel * kernel * ci * co * ih * iw) as f64
        }
        LayerDesc::Linear { out_features } => {
            let (ci, _, _) = spatial(input);
            2.0 * (ci * out_features) as f64
        }
        LayerDesc::BatchNorm => 2.0 * elems(input),
        LayerDesc::Relu | LayerDesc::Dropout { .. } | LayerDesc::GlobalAvgPool => elems(input),
        LayerDesc::MaxPool { kernel, .. } => (kernel * kernel) as f64 * elems(output),
        LayerDesc::UpsampleBilinear { .. } => 8.0 * elems(output),
        LayerDesc::ReplicateChannels { .. } => 0.0,
        LayerDesc::Residual { body, shortcut } => {
            let (bf, _) = chain_flops(body, input)?;
            let (sf, _) = chain_flops(shortcut, input)?;
            bf + sf + elems(output)
        }
        LayerDesc::AtrousPyramid {
            rates,
            out_channels,
        } => {
            let (ci, h, w) = spatial(input);
            let per_pixel_1x1 = 2.0 * (ci * out_channels) as f64;
            let per_pixel_3x3 = 9.0 * per_pixel_1x1;
            let pixels = (h * w) as f64;
            // 1x1 branch + one 3x3 branch per rate + pooled 1x1 branch +
            // 1x1 projection over the concatenated branches
            let branches = per_pixel_1x1 * pixels
                + per_pixel_3x3 * pixels * rates.len() as f64
                + per_pixel_1x1;
            let project =
                2.0 * ((rates.len() + 2) * out_channels * out_channels) as f64 * pixels;
            branches + project
        }
    })
}

/// Whole-model compute marker: backbone plus whichever heads exist.
pub fn model_flops(description: &ModelDescription) -> Result<f64> {
    let mut total = flops_estimate(&description.backbone)?;
    if let Some(g) = &description.seg_head {
        total += flops_estimate(g)?;
    }
    if let Some(g) = &description.clf_head {
        total += flops_estimate(g)?;
    }
    Ok(total)
}

/// One point on the accuracy-versus-annotation-time curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostPoint {
    pub method: String,
    pub n_class_labeled: usize,
    pub n_seg_labeled: usize,
    pub accuracy: f64,
    /// Forward FLOPs of the model behind this point.
    pub flops: f64,
}

/// Render the curve as tab-separated rows sorted by annotation seconds:
/// method, seconds, accuracy, compute marker.
pub fn emit_cost_curve(rates: &AnnotationRates, points: &[CostPoint]) -> Result<String> {
    rates.validate()?;
    if points.is_empty() {
        return Err(Error::validation("cost curve needs at least one point"));
    }
    let mut rows: Vec<(f64, &CostPoint)> = points
        .iter()
        .map(|p| {
            (
                annotation_cost(rates, p.n_class_labeled, p.n_seg_labeled),
                p,
            )
        })
        .collect();
    rows.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
    let mut out = String::from("method\tseconds\taccuracy\tcompute_marker\n");
    for (seconds, p) in rows {
        out.push_str(&format!(
            "{}\t{seconds:.1}\t{:.6}\t{:.3e}\n",
            p.method, p.accuracy, p.flops
        ));
    }
    Ok(out)
}
