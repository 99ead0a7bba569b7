//! Declarative layer graphs for backbones and heads.
//!
//! A [`NetworkGraph`] is a named chain of [`LayerDesc`] descriptors together
//! with declared input and output shapes. Shape inference walks the chain and
//! is checked against the declared output at construction time, so an
//! inconsistent graph cannot be built.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the value flowing between layers (batch dimension excluded).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TensorShape {
    /// Channels-first spatial tensor, C x H x W.
    Spatial { c: usize, h: usize, w: usize },
    /// Flat feature vector.
    Vector { len: usize },
}

impl TensorShape {
    pub fn spatial(c: usize, h: usize, w: usize) -> Self {
        TensorShape::Spatial { c, h, w }
    }

    pub fn vector(len: usize) -> Self {
        TensorShape::Vector { len }
    }
}

impl std::fmt::Display for TensorShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TensorShape::Spatial { c, h, w } => write!(f, "{c}x{h}x{w}"),
            TensorShape::Vector { len } => write!(f, "vec[{len}]"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LayerDesc {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
        bias: bool,
    },
    BatchNorm,
    Relu,
    Dropout {
        rate: f64,
    },
    ConvTranspose {
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    GlobalAvgPool,
    Linear {
        out_features: usize,
    },
    /// `body(x) + shortcut(x)`; an empty shortcut is the identity.
    Residual {
        body: Vec<LayerDesc>,
        shortcut: Vec<LayerDesc>,
    },
    /// Bilinear resize to a fixed spatial size (identity when already there).
    UpsampleBilinear {
        out_h: usize,
        out_w: usize,
    },
    /// Spatial pyramid of dilated convolutions plus an image-level pooling
    /// branch, concatenated and projected to `out_channels`.
    AtrousPyramid {
        rates: Vec<usize>,
        out_channels: usize,
    },
    /// Repeat the channel dimension, e.g. grayscale -> RGB.
    ReplicateChannels {
        factor: usize,
    },
}

impl LayerDesc {
    pub fn conv(out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerDesc::Conv {
            out_channels,
            kernel,
            stride,
            padding,
            dilation: 1,
            bias: false,
        }
    }

    pub fn conv_dilated(out_channels: usize, kernel: usize, dilation: usize) -> Self {
        LayerDesc::Conv {
            out_channels,
            kernel,
            stride: 1,
            padding: dilation * (kernel - 1) / 2,
            dilation,
            bias: false,
        }
    }

    /// Output shape of this layer given its input shape.
    pub fn infer(&self, input: TensorShape) -> Result<TensorShape> {
        let spatial = |shape: TensorShape, what: &str| match shape {
            TensorShape::Spatial { c, h, w } => Ok((c, h, w)),
            TensorShape::Vector { .. } => Err(Error::shape(format!(
                "{what} requires a spatial input, got {shape}"
            ))),
        };
        match self {
            LayerDesc::Conv {
                out_channels,
                kernel,
                stride,
                padding,
                dilation,
                ..
            } => {
                let (_, h, w) = spatial(input, "conv")?;
                let span = dilation * (kernel - 1) + 1;
                if h + 2 * padding < span || w + 2 * padding < span {
                    return Err(Error::shape(format!(
                        "conv kernel span {span} exceeds padded input {h}x{w}"
                    )));
                }
                let oh = (h + 2 * padding - span) / stride + 1;
                let ow = (w + 2 * padding - span) / stride + 1;
                Ok(TensorShape::spatial(*out_channels, oh, ow))
            }
            LayerDesc::MaxPool {
                kernel,
                stride,
                padding,
            } => {
                let (c, h, w) = spatial(input, "max_pool")?;
                let oh = (h + 2 * padding - kernel) / stride + 1;
                let ow = (w + 2 * padding - kernel) / stride + 1;
                Ok(TensorShape::spatial(c, oh, ow))
            }
            LayerDesc::ConvTranspose {
                out_channels,
                kernel,
                stride,
            } => {
                let (_, h, w) = spatial(input, "conv_transpose")?;
                Ok(TensorShape::spatial(
                    *out_channels,
                    (h - 1) * stride + kernel,
                    (w - 1) * stride + kernel,
                ))
            }
            LayerDesc::BatchNorm | LayerDesc::Relu | LayerDesc::Dropout { .. } => Ok(input),
            LayerDesc::GlobalAvgPool => {
                let (c, _, _) = spatial(input, "global_avg_pool")?;
                Ok(TensorShape::vector(c))
            }
            LayerDesc::Linear { out_features } => match input {
                TensorShape::Vector { .. } => Ok(TensorShape::vector(*out_features)),
                TensorShape::Spatial { .. } => Err(Error::shape(format!(
                    "linear requires a vector input, got {input}"
                ))),
            },
            LayerDesc::Residual { body, shortcut } => {
                let body_out = infer_chain(body, input)?;
                let shortcut_out = infer_chain(shortcut, input)?;
                if body_out != shortcut_out {
                    return Err(Error::shape(format!(
                        "residual branches disagree: body {body_out} vs shortcut {shortcut_out}"
                    )));
                }
                Ok(body_out)
            }
            LayerDesc::UpsampleBilinear { out_h, out_w } => {
                let (c, _, _) = spatial(input, "upsample")?;
                Ok(TensorShape::spatial(c, *out_h, *out_w))
            }
            LayerDesc::AtrousPyramid { out_channels, .. } => {
                let (_, h, w) = spatial(input, "atrous_pyramid")?;
                Ok(TensorShape::spatial(*out_channels, h, w))
            }
            LayerDesc::ReplicateChannels { factor } => {
                let (c, h, w) = spatial(input, "replicate_channels")?;
                Ok(TensorShape::spatial(c * factor, h, w))
            }
        }
    }
}

pub fn infer_chain(layers: &[LayerDesc], input: TensorShape) -> Result<TensorShape> {
    let mut shape = input;
    for layer in layers {
        shape = layer.infer(shape)?;
    }
    Ok(shape)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedLayer {
    pub name: String,
    pub desc: LayerDesc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkGraph {
    pub name: String,
    pub input: TensorShape,
    pub output: TensorShape,
    pub layers: Vec<NamedLayer>,
}

impl NetworkGraph {
    /// Build a graph, inferring and recording the output shape.
    pub fn new(name: impl Into<String>, input: TensorShape, layers: Vec<NamedLayer>) -> Result<Self> {
        let descs: Vec<LayerDesc> = layers.iter().map(|l| l.desc.clone()).collect();
        let output = infer_chain(&descs, input)?;
        Ok(NetworkGraph {
            name: name.into(),
            input,
            output,
            layers,
        })
    }

    pub fn infer_output(&self, input: TensorShape) -> Result<TensorShape> {
        let descs: Vec<LayerDesc> = self.layers.iter().map(|l| l.desc.clone()).collect();
        infer_chain(&descs, input)
    }
}

fn named(name: impl Into<String>, desc: LayerDesc) -> NamedLayer {
    NamedLayer {
        name: name.into(),
        desc,
    }
}

/// Backbone family; heads differ between the two.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    WideResnet,
    Resnet101,
}

impl std::str::FromStr for BackboneKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wide-resnet" => Ok(BackboneKind::WideResnet),
            "resnet101" => Ok(BackboneKind::Resnet101),
            other => Err(Error::config(format!("unknown backbone '{other}'"))),
        }
    }
}

/// Pre-activation wide residual network trunk.
///
/// An initial 3x3 conv is followed by three residual groups of
/// `(depth - 4) / 6` blocks at widths `16k, 32k, 64k` with strides `1, 2, 2`,
/// so the trunk downsamples by a factor of 4 overall. Each block is two
/// BatchNorm-ReLU-Conv stages with dropout after the first conv.
pub fn build_wide_resnet(
    depth: usize,
    width: usize,
    dropout_rate: f64,
    in_channels: usize,
    in_hw: (usize, usize),
) -> Result<NetworkGraph> {
    if depth < 10 || (depth - 4) % 6 != 0 {
        return Err(Error::config(format!(
            "wide-resnet depth must satisfy (depth - 4) % 6 == 0 and depth >= 10, got {depth}"
        )));
    }
    if width == 0 {
        return Err(Error::config("wide-resnet width must be >= 1"));
    }
    if !(0.0..1.0).contains(&dropout_rate) {
        return Err(Error::config(format!(
            "dropout rate must be in [0, 1), got {dropout_rate}"
        )));
    }
    let blocks_per_group = (depth - 4) / 6;
    let mut layers = vec![named("conv0", LayerDesc::conv(16, 3, 1, 1))];
    let mut in_c = 16;
    for (gi, (group_width, stride)) in [(16 * width, 1), (32 * width, 2), (64 * width, 2)]
        .into_iter()
        .enumerate()
    {
        for bi in 0..blocks_per_group {
            let stride = if bi == 0 { stride } else { 1 };
            let body = vec![
                LayerDesc::BatchNorm,
                LayerDesc::Relu,
                LayerDesc::conv(group_width, 3, stride, 1),
                LayerDesc::Dropout { rate: dropout_rate },
                LayerDesc::BatchNorm,
                LayerDesc::Relu,
                LayerDesc::conv(group_width, 3, 1, 1),
            ];
            let shortcut = if stride != 1 || in_c != group_width {
                vec![LayerDesc::conv(group_width, 1, stride, 0)]
            } else {
                vec![]
            };
            layers.push(named(
                format!("group{gi}.block{bi}"),
                LayerDesc::Residual { body, shortcut },
            ));
            in_c = group_width;
        }
    }
    NetworkGraph::new(
        format!("wrn-{depth}-{width}"),
        TensorShape::spatial(in_channels, in_hw.0, in_hw.1),
        layers,
    )
}

fn bottleneck(planes: usize, stride: usize, dilation: usize, project: bool) -> LayerDesc {
    let body = vec![
        LayerDesc::conv(planes, 1, 1, 0),
        LayerDesc::BatchNorm,
        LayerDesc::Relu,
        LayerDesc::Conv {
            out_channels: planes,
            kernel: 3,
            stride,
            padding: dilation,
            dilation,
            bias: false,
        },
        LayerDesc::BatchNorm,
        LayerDesc::Relu,
        LayerDesc::conv(planes * 4, 1, 1, 0),
        LayerDesc::BatchNorm,
    ];
    let shortcut = if project {
        vec![LayerDesc::conv(planes * 4, 1, stride, 0), LayerDesc::BatchNorm]
    } else {
        vec![]
    };
    LayerDesc::Residual { body, shortcut }
}

/// 101-layer bottleneck residual trunk.
///
/// In `dilated` (segmentation) mode the last two stages trade their strides
/// for dilations 2 and 4, giving an output stride of 8 instead of 32.
/// Single-channel inputs are replicated to three channels first.
pub fn build_resnet101(
    dilated: bool,
    in_channels: usize,
    in_hw: (usize, usize),
) -> Result<NetworkGraph> {
    let mut layers = Vec::new();
    if in_channels == 1 {
        layers.push(named("replicate", LayerDesc::ReplicateChannels { factor: 3 }));
    } else if in_channels != 3 {
        return Err(Error::config(format!(
            "resnet101 expects 1 or 3 input channels, got {in_channels}"
        )));
    }
    layers.push(named(
        "conv0",
        LayerDesc::Conv {
            out_channels: 64,
            kernel: 7,
            stride: 2,
            padding: 3,
            dilation: 1,
            bias: false,
        },
    ));
    layers.push(named("bn0", LayerDesc::BatchNorm));
    layers.push(named("relu0", LayerDesc::Relu));
    layers.push(named(
        "pool0",
        LayerDesc::MaxPool {
            kernel: 3,
            stride: 2,
            padding: 1,
        },
    ));
    let stage_blocks = [3usize, 4, 23, 3];
    let stage_planes = [64usize, 128, 256, 512];
    for (si, (&blocks, &planes)) in stage_blocks.iter().zip(&stage_planes).enumerate() {
        let (stage_stride, dilation) = match (si, dilated) {
            (0, _) => (1, 1),
            (1, _) => (2, 1),
            (2, false) => (2, 1),
            (3, false) => (2, 1),
            (2, true) => (1, 2),
            (_, true) => (1, 4),
            _ => unreachable!("four stages"),
        };
        for bi in 0..blocks {
            let stride = if bi == 0 { stage_stride } else { 1 };
            let project = bi == 0;
            layers.push(named(
                format!("layer{}.{bi}", si + 1),
                bottleneck(planes, stride, dilation, project),
            ));
            layers.push(named(format!("layer{}.{bi}.out", si + 1), LayerDesc::Relu));
        }
    }
    NetworkGraph::new(
        "resnet101",
        TensorShape::spatial(in_channels, in_hw.0, in_hw.1),
        layers,
    )
}

/// Segmentation head emitting `(P + 1) x H x W` logits that match the input
/// image resolution exactly.
pub fn build_cvs_head(
    backbone: BackboneKind,
    feature_shape: TensorShape,
    num_classes: usize,
    target_hw: (usize, usize),
) -> Result<NetworkGraph> {
    if num_classes == 0 {
        return Err(Error::config("num_classes must be >= 1"));
    }
    let (target_h, target_w) = target_hw;
    let (_, fh, fw) = match feature_shape {
        TensorShape::Spatial { c, h, w } => (c, h, w),
        other => return Err(Error::shape(format!("head needs spatial features, got {other}"))),
    };
    let out_c = num_classes + 1;
    let layers = match backbone {
        BackboneKind::WideResnet => {
            if fh * 4 != target_h || fw * 4 != target_w {
                return Err(Error::shape(format!(
                    "target {target_h}x{target_w} is not 4x the feature map {fh}x{fw}"
                )));
            }
            // two x2 stages rather than one x4 kernel: the intermediate
            // feature map lets the head resolve strokes thinner than the
            // feature stride
            vec![
                named("bn", LayerDesc::BatchNorm),
                named("relu", LayerDesc::Relu),
                named(
                    "deconv1",
                    LayerDesc::ConvTranspose {
                        out_channels: 64,
                        kernel: 2,
                        stride: 2,
                    },
                ),
                named("bn2", LayerDesc::BatchNorm),
                named("relu2", LayerDesc::Relu),
                named(
                    "deconv2",
                    LayerDesc::ConvTranspose {
                        out_channels: out_c,
                        kernel: 2,
                        stride: 2,
                    },
                ),
            ]
        }
        BackboneKind::Resnet101 => vec![
            named(
                "aspp",
                LayerDesc::AtrousPyramid {
                    rates: vec![12, 24, 36],
                    out_channels: 256,
                },
            ),
            named("conv", LayerDesc::conv(256, 3, 1, 1)),
            named("bn", LayerDesc::BatchNorm),
            named("relu", LayerDesc::Relu),
            named(
                "project",
                LayerDesc::Conv {
                    out_channels: out_c,
                    kernel: 1,
                    stride: 1,
                    padding: 0,
                    dilation: 1,
                    bias: true,
                },
            ),
            named(
                "upsample",
                LayerDesc::UpsampleBilinear {
                    out_h: target_h,
                    out_w: target_w,
                },
            ),
        ],
    };
    let graph = NetworkGraph::new("cvs-head", feature_shape, layers)?;
    debug_assert_eq!(
        graph.output,
        TensorShape::spatial(out_c, target_h, target_w)
    );
    Ok(graph)
}

/// Classification head: BatchNorm-ReLU-AveragePooling followed by a linear
/// layer to `P` scores.
pub fn build_linear_head(feature_shape: TensorShape, num_classes: usize) -> Result<NetworkGraph> {
    if num_classes == 0 {
        return Err(Error::config("num_classes must be >= 1"));
    }
    NetworkGraph::new(
        "linear-head",
        feature_shape,
        vec![
            named("bn", LayerDesc::BatchNorm),
            named("relu", LayerDesc::Relu),
            named("pool", LayerDesc::GlobalAvgPool),
            named("fc", LayerDesc::Linear { out_features: num_classes }),
        ],
    )
}

/// Dual heads sharing one trunk: a segmentation branch to `(P + 1) x H x W`
/// and a classification branch to `P` scores.
pub fn build_multitask_heads(
    backbone: BackboneKind,
    feature_shape: TensorShape,
    num_classes: usize,
    target_hw: (usize, usize),
) -> Result<(NetworkGraph, NetworkGraph)> {
    if num_classes == 0 {
        return Err(Error::config("num_classes must be >= 1"));
    }
    let (target_h, target_w) = target_hw;
    let out_c = num_classes + 1;
    let (fc, fh, fw) = match feature_shape {
        TensorShape::Spatial { c, h, w } => (c, h, w),
        other => return Err(Error::shape(format!("head needs spatial features, got {other}"))),
    };
    let (seg, clf) = match backbone {
        BackboneKind::WideResnet => {
            if fh * 4 != target_h || fw * 4 != target_w {
                return Err(Error::shape(format!(
                    "target {target_h}x{target_w} is not 4x the feature map {fh}x{fw}"
                )));
            }
            let seg = NetworkGraph::new(
                "mtl-seg-head",
                feature_shape,
                vec![
                    named("bn", LayerDesc::BatchNorm),
                    named("relu", LayerDesc::Relu),
                    named(
                        "deconv",
                        LayerDesc::ConvTranspose {
                            out_channels: out_c,
                            kernel: 4,
                            stride: 4,
                        },
                    ),
                ],
            )?;
            let clf = NetworkGraph::new(
                "mtl-clf-head",
                feature_shape,
                vec![
                    named("bn", LayerDesc::BatchNorm),
                    named("relu", LayerDesc::Relu),
                    named("pool", LayerDesc::GlobalAvgPool),
                    named("fc", LayerDesc::Linear { out_features: num_classes }),
                ],
            )?;
            (seg, clf)
        }
        BackboneKind::Resnet101 => {
            let mid = fc / 8;
            let seg = NetworkGraph::new(
                "mtl-seg-head",
                feature_shape,
                vec![
                    named(
                        "deconv0",
                        LayerDesc::ConvTranspose { out_channels: mid, kernel: 2, stride: 2 },
                    ),
                    named("relu0", LayerDesc::Relu),
                    named("bn0", LayerDesc::BatchNorm),
                    named(
                        "deconv1",
                        LayerDesc::ConvTranspose { out_channels: mid / 4, kernel: 2, stride: 2 },
                    ),
                    named("relu1", LayerDesc::Relu),
                    named("bn1", LayerDesc::BatchNorm),
                    named(
                        "deconv2",
                        LayerDesc::ConvTranspose { out_channels: out_c, kernel: 2, stride: 2 },
                    ),
                    // no-op when the 8x upsampled map already matches the target
                    named(
                        "resize",
                        LayerDesc::UpsampleBilinear { out_h: target_h, out_w: target_w },
                    ),
                ],
            )?;
            let clf = NetworkGraph::new(
                "mtl-clf-head",
                feature_shape,
                vec![
                    named("pool", LayerDesc::GlobalAvgPool),
                    named("fc", LayerDesc::Linear { out_features: num_classes }),
                ],
            )?;
            (seg, clf)
        }
    };
    Ok((seg, clf))
}
