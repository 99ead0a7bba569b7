//! Runtime instantiation of [`crate::graph::NetworkGraph`] descriptors on top
//! of candle tensors.
//!
//! All parameters live in a [`ParamStore`] keyed by hierarchical layer
//! identifiers, which is also the unit of checkpointing. Initialization and
//! dropout noise are driven by caller-provided ChaCha generators so runs are
//! reproducible from a single root seed.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{LayerDesc, NamedLayer, NetworkGraph, TensorShape};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Flat named map of model tensors: trainable parameters plus non-trainable
/// buffers (batch-norm running statistics).
#[derive(Debug)]
pub struct ParamStore {
    device: Device,
    dtype: DType,
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(device: Device) -> Self {
        Self::with_dtype(device, DType::F32)
    }

    /// A store whose parameters use the given float width; `DType::F64` makes
    /// numerical-accuracy tests independent of single-precision noise.
    pub fn with_dtype(device: Device, dtype: DType) -> Self {
        ParamStore {
            device,
            dtype,
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn add_param(&mut self, name: &str, value: Tensor) -> Result<Var> {
        let var = Var::from_tensor(&value)?;
        if self.params.insert(name.to_string(), var.clone()).is_some() {
            return Err(Error::config(format!("duplicate parameter name '{name}'")));
        }
        Ok(var)
    }

    fn add_buffer(&mut self, name: &str, value: Tensor) -> Result<Var> {
        let var = Var::from_tensor(&value)?;
        if self.buffers.insert(name.to_string(), var.clone()).is_some() {
            return Err(Error::config(format!("duplicate buffer name '{name}'")));
        }
        Ok(var)
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.params.iter()
    }

    pub fn num_trainable(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.params.get(name).or_else(|| self.buffers.get(name))
    }

    /// All tensors (parameters and buffers) for serialization.
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (k, v) in &self.params {
            out.insert(k.clone(), v.as_tensor().clone());
        }
        for (k, v) in &self.buffers {
            out.insert(format!("buffer.{k}"), v.as_tensor().clone());
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors: std::collections::HashMap<String, Tensor> =
            self.tensors().into_iter().collect();
        candle_core::safetensors::save(&tensors, path)?;
        Ok(())
    }

    /// Overwrite every parameter and buffer from a tensor archive. Missing or
    /// shape-mismatched entries are an error.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let tensors = candle_core::safetensors::load(path, &self.device)?;
        for (name, var) in self.params.iter() {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::validation(format!("checkpoint missing tensor '{name}'")))?;
            var.set(t).map_err(|e| {
                Error::shape(format!("checkpoint tensor '{name}' shape mismatch: {e}"))
            })?;
        }
        for (name, var) in self.buffers.iter() {
            let key = format!("buffer.{name}");
            let t = tensors
                .get(&key)
                .ok_or_else(|| Error::validation(format!("checkpoint missing buffer '{key}'")))?;
            var.set(t).map_err(|e| {
                Error::shape(format!("checkpoint buffer '{key}' shape mismatch: {e}"))
            })?;
        }
        Ok(())
    }
}

/// Standard normals via Box-Muller from a seeded generator.
fn normal_tensor(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    std: f64,
    device: &Device,
    dtype: DType,
) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        data.push((r * theta.cos() * std) as f32);
        if data.len() < n {
            data.push((r * theta.sin() * std) as f32);
        }
    }
    Ok(Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?)
}

enum RtLayer {
    Conv {
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        dilation: usize,
    },
    BatchNorm {
        gamma: Var,
        beta: Var,
        running_mean: Var,
        running_var: Var,
    },
    Relu,
    Dropout {
        rate: f64,
    },
    ConvTranspose {
        weight: Var,
        bias: Var,
        stride: usize,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    GlobalAvgPool,
    Linear {
        weight: Var,
        bias: Var,
    },
    Residual {
        body: Vec<(String, RtLayer)>,
        shortcut: Vec<(String, RtLayer)>,
    },
    Upsample {
        row_map: Tensor,
        col_map_t: Tensor,
        out_h: usize,
        out_w: usize,
    },
    Aspp {
        branches: Vec<Vec<(String, RtLayer)>>,
        pool_branch: Vec<(String, RtLayer)>,
        project: Vec<(String, RtLayer)>,
    },
    Replicate {
        factor: usize,
    },
}

/// Interpolation matrix for a bilinear resize along one axis
/// (half-pixel centers, edges clamped). Identity when sizes match.
fn bilinear_matrix(out_len: usize, in_len: usize, device: &Device, dtype: DType) -> Result<Tensor> {
    let mut data = vec![0f32; out_len * in_len];
    let scale = in_len as f64 / out_len as f64;
    for i in 0..out_len {
        let src = (i as f64 + 0.5) * scale - 0.5;
        let floor = src.floor();
        let t = (src - floor).max(0.0);
        let i0 = (floor.max(0.0) as usize).min(in_len - 1);
        let i1 = (i0 + 1).min(in_len - 1);
        data[i * in_len + i0] += (1.0 - t) as f32;
        data[i * in_len + i1] += t as f32;
    }
    Ok(Tensor::from_vec(data, (out_len, in_len), device)?.to_dtype(dtype)?)
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn conv(
        &mut self,
        prefix: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
        with_bias: bool,
    ) -> Result<RtLayer> {
        let fan_in = (in_c * kernel * kernel) as f64;
        let weight = self.store.add_param(
            &format!("{prefix}.weight"),
            normal_tensor(
                self.rng,
                &[out_c, in_c, kernel, kernel],
                (2.0 / fan_in).sqrt(),
                &self.store.device.clone(),
                self.store.dtype,
            )?,
        )?;
        let bias = if with_bias {
            Some(self.store.add_param(
                &format!("{prefix}.bias"),
                Tensor::zeros(out_c, self.store.dtype, &self.store.device.clone())?,
            )?)
        } else {
            None
        };
        Ok(RtLayer::Conv {
            weight,
            bias,
            stride,
            padding,
            dilation,
        })
    }

    fn batch_norm(&mut self, prefix: &str, c: usize) -> Result<RtLayer> {
        let device = self.store.device.clone();
        let dtype = self.store.dtype;
        let gamma = self
            .store
            .add_param(&format!("{prefix}.gamma"), Tensor::ones(c, dtype, &device)?)?;
        let beta = self
            .store
            .add_param(&format!("{prefix}.beta"), Tensor::zeros(c, dtype, &device)?)?;
        let running_mean = self.store.add_buffer(
            &format!("{prefix}.running_mean"),
            Tensor::zeros(c, dtype, &device)?,
        )?;
        let running_var = self.store.add_buffer(
            &format!("{prefix}.running_var"),
            Tensor::ones(c, dtype, &device)?,
        )?;
        Ok(RtLayer::BatchNorm {
            gamma,
            beta,
            running_mean,
            running_var,
        })
    }

    fn chain(
        &mut self,
        prefix: &str,
        descs: &[LayerDesc],
        mut shape: TensorShape,
    ) -> Result<(Vec<(String, RtLayer)>, TensorShape)> {
        let mut out = Vec::with_capacity(descs.len());
        for (i, desc) in descs.iter().enumerate() {
            let name = format!("{prefix}.{i}");
            let layer = self.build(&name, desc, shape)?;
            shape = desc.infer(shape)?;
            out.push((name, layer));
        }
        Ok((out, shape))
    }

    fn build(&mut self, name: &str, desc: &LayerDesc, input: TensorShape) -> Result<RtLayer> {
        let device = self.store.device.clone();
        let in_c = match input {
            TensorShape::Spatial { c, .. } => c,
            TensorShape::Vector { len } => len,
        };
        match desc {
            LayerDesc::Conv {
                out_channels,
                kernel,
                stride,
                padding,
                dilation,
                bias,
            } => self.conv(
                name, in_c, *out_channels, *kernel, *stride, *padding, *dilation, *bias,
            ),
            LayerDesc::BatchNorm => self.batch_norm(name, in_c),
            LayerDesc::Relu => Ok(RtLayer::Relu),
            LayerDesc::Dropout { rate } => Ok(RtLayer::Dropout { rate: *rate }),
            LayerDesc::ConvTranspose {
                out_channels,
                kernel,
                stride,
            } => {
                let fan_in = (in_c * kernel * kernel) as f64;
                let weight = self.store.add_param(
                    &format!("{name}.weight"),
                    normal_tensor(
                        self.rng,
                        &[in_c, *out_channels, *kernel, *kernel],
                        (2.0 / fan_in).sqrt(),
                        &device,
                        self.store.dtype,
                    )?,
                )?;
                let bias = self.store.add_param(
                    &format!("{name}.bias"),
                    Tensor::zeros(*out_channels, self.store.dtype, &device)?,
                )?;
                Ok(RtLayer::ConvTranspose {
                    weight,
                    bias,
                    stride: *stride,
                })
            }
            LayerDesc::MaxPool {
                kernel,
                stride,
                padding,
            } => Ok(RtLayer::MaxPool {
                kernel: *kernel,
                stride: *stride,
                padding: *padding,
            }),
            LayerDesc::GlobalAvgPool => Ok(RtLayer::GlobalAvgPool),
            LayerDesc::Linear { out_features } => {
                let weight = self.store.add_param(
                    &format!("{name}.weight"),
                    normal_tensor(
                        self.rng,
                        &[*out_features, in_c],
                        (2.0 / in_c as f64).sqrt(),
                        &device,
                        self.store.dtype,
                    )?,
                )?;
                let bias = self.store.add_param(
                    &format!("{name}.bias"),
                    Tensor::zeros(*out_features, self.store.dtype, &device)?,
                )?;
                Ok(RtLayer::Linear { weight, bias })
            }
            LayerDesc::Residual { body, shortcut } => {
                let (body, _) = self.chain(&format!("{name}.body"), body, input)?;
                let (shortcut, _) = self.chain(&format!("{name}.short"), shortcut, input)?;
                Ok(RtLayer::Residual { body, shortcut })
            }
            LayerDesc::UpsampleBilinear { out_h, out_w } => {
                let (h, w) = match input {
                    TensorShape::Spatial { h, w, .. } => (h, w),
                    _ => return Err(Error::shape("upsample needs spatial input")),
                };
                Ok(RtLayer::Upsample {
                    row_map: bilinear_matrix(*out_h, h, &device, self.store.dtype)?.unsqueeze(0)?,
                    col_map_t: bilinear_matrix(*out_w, w, &device, self.store.dtype)?.t()?.unsqueeze(0)?,
                    out_h: *out_h,
                    out_w: *out_w,
                })
            }
            LayerDesc::AtrousPyramid {
                rates,
                out_channels,
            } => {
                let branch_c = *out_channels;
                let mut branches = Vec::new();
                {
                    let conv = self.conv(
                        &format!("{name}.branch0.0"),
                        in_c,
                        branch_c,
                        1,
                        1,
                        0,
                        1,
                        false,
                    )?;
                    let bn = self.batch_norm(&format!("{name}.branch0.1"), branch_c)?;
                    branches.push(vec![
                        (format!("{name}.branch0.0"), conv),
                        (format!("{name}.branch0.1"), bn),
                        (format!("{name}.branch0.2"), RtLayer::Relu),
                    ]);
                }
                for (bi, rate) in rates.iter().enumerate() {
                    let prefix = format!("{name}.branch{}", bi + 1);
                    let conv = self.conv(
                        &format!("{prefix}.0"),
                        in_c,
                        branch_c,
                        3,
                        1,
                        *rate,
                        *rate,
                        false,
                    )?;
                    let bn = self.batch_norm(&format!("{prefix}.1"), branch_c)?;
                    branches.push(vec![
                        (format!("{prefix}.0"), conv),
                        (format!("{prefix}.1"), bn),
                        (format!("{prefix}.2"), RtLayer::Relu),
                    ]);
                }
                let pool_conv =
                    self.conv(&format!("{name}.pool.0"), in_c, branch_c, 1, 1, 0, 1, true)?;
                let pool_branch = vec![
                    (format!("{name}.pool.0"), pool_conv),
                    (format!("{name}.pool.1"), RtLayer::Relu),
                ];
                let concat_c = branch_c * (branches.len() + 1);
                let proj_conv = self.conv(
                    &format!("{name}.project.0"),
                    concat_c,
                    branch_c,
                    1,
                    1,
                    0,
                    1,
                    false,
                )?;
                let proj_bn = self.batch_norm(&format!("{name}.project.1"), branch_c)?;
                let project = vec![
                    (format!("{name}.project.0"), proj_conv),
                    (format!("{name}.project.1"), proj_bn),
                    (format!("{name}.project.2"), RtLayer::Relu),
                ];
                Ok(RtLayer::Aspp {
                    branches,
                    pool_branch,
                    project,
                })
            }
            LayerDesc::ReplicateChannels { factor } => Ok(RtLayer::Replicate { factor: *factor }),
        }
    }
}

fn forward_chain(
    layers: &[(String, RtLayer)],
    x: &Tensor,
    train: bool,
    rng: &RefCell<ChaCha8Rng>,
) -> Result<Tensor> {
    let mut x = x.clone();
    for (name, layer) in layers {
        x = layer
            .forward(&x, train, rng)
            .map_err(|e| Error::shape(format!("layer '{name}': {e}")))?;
    }
    Ok(x)
}

impl RtLayer {
    fn forward(&self, x: &Tensor, train: bool, rng: &RefCell<ChaCha8Rng>) -> Result<Tensor> {
        match self {
            RtLayer::Conv {
                weight,
                bias,
                stride,
                padding,
                dilation,
            } => {
                let y = x.conv2d(weight.as_tensor(), *padding, *stride, *dilation, 1)?;
                match bias {
                    Some(b) => {
                        let c = b.elem_count();
                        Ok(y.broadcast_add(&b.as_tensor().reshape((1, c, 1, 1))?)?)
                    }
                    None => Ok(y),
                }
            }
            RtLayer::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
            } => {
                let (_, c, _, _) = x.dims4()?;
                let gamma4 = gamma.as_tensor().reshape((1, c, 1, 1))?;
                let beta4 = beta.as_tensor().reshape((1, c, 1, 1))?;
                if train {
                    let (b, _, h, w) = x.dims4()?;
                    let n = (b * h * w) as f64;
                    let mean = x.mean_keepdim((0, 2, 3))?;
                    let centered = x.broadcast_sub(&mean)?;
                    let var = centered.sqr()?.mean_keepdim((0, 2, 3))?;
                    let y = centered
                        .broadcast_div(&var.affine(1.0, BN_EPS)?.sqrt()?)?
                        .broadcast_mul(&gamma4)?
                        .broadcast_add(&beta4)?;
                    let mean_c = mean.detach().reshape(c)?;
                    let var_c = if n > 1.0 {
                        var.detach().reshape(c)?.affine(n / (n - 1.0), 0.0)?
                    } else {
                        var.detach().reshape(c)?
                    };
                    // detached so successive updates do not chain the stored
                    // tensors together step after step
                    running_mean.set(
                        &(running_mean.as_tensor().affine(1.0 - BN_MOMENTUM, 0.0)?
                            + mean_c.affine(BN_MOMENTUM, 0.0)?)?
                            .detach(),
                    )?;
                    running_var.set(
                        &(running_var.as_tensor().affine(1.0 - BN_MOMENTUM, 0.0)?
                            + var_c.affine(BN_MOMENTUM, 0.0)?)?
                            .detach(),
                    )?;
                    Ok(y)
                } else {
                    let mean4 = running_mean.as_tensor().reshape((1, c, 1, 1))?;
                    let var4 = running_var.as_tensor().reshape((1, c, 1, 1))?;
                    Ok(x
                        .broadcast_sub(&mean4)?
                        .broadcast_div(&var4.affine(1.0, BN_EPS)?.sqrt()?)?
                        .broadcast_mul(&gamma4)?
                        .broadcast_add(&beta4)?)
                }
            }
            RtLayer::Relu => Ok(x.relu()?),
            RtLayer::Dropout { rate } => {
                if !train || *rate == 0.0 {
                    return Ok(x.clone());
                }
                let keep = 1.0 - rate;
                let n = x.elem_count();
                let mask: Vec<f32> = {
                    let mut rng = rng.borrow_mut();
                    (0..n)
                        .map(|_| {
                            if rng.gen::<f64>() < keep {
                                (1.0 / keep) as f32
                            } else {
                                0.0
                            }
                        })
                        .collect()
                };
                let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
                Ok((x * mask)?)
            }
            RtLayer::ConvTranspose {
                weight,
                bias,
                stride,
            } => {
                let y = x.conv_transpose2d(weight.as_tensor(), 0, 0, *stride, 1)?;
                let c = bias.elem_count();
                Ok(y.broadcast_add(&bias.as_tensor().reshape((1, c, 1, 1))?)?)
            }
            RtLayer::MaxPool {
                kernel,
                stride,
                padding,
            } => {
                let x = if *padding > 0 {
                    x.pad_with_zeros(2, *padding, *padding)?
                        .pad_with_zeros(3, *padding, *padding)?
                } else {
                    x.clone()
                };
                // expressed as an elementwise maximum over the kernel
                // offsets: the builtin pooling op does not backpropagate
                // correctly, while `maximum` and `index_select` do
                let (k, s) = (*kernel, *stride);
                let (_, _, h, w) = x.dims4()?;
                let (oh, ow) = ((h - k) / s + 1, (w - k) / s + 1);
                let dev = x.device();
                let mut pooled: Option<Tensor> = None;
                for dy in 0..k {
                    let rows: Vec<u32> = (0..oh).map(|i| (dy + s * i) as u32).collect();
                    let rows = Tensor::from_vec(rows, (oh,), dev)?;
                    for dx in 0..k {
                        let cols: Vec<u32> = (0..ow).map(|j| (dx + s * j) as u32).collect();
                        let cols = Tensor::from_vec(cols, (ow,), dev)?;
                        let shifted = x.index_select(&rows, 2)?.index_select(&cols, 3)?;
                        pooled = Some(match pooled {
                            None => shifted,
                            Some(acc) => acc.maximum(&shifted)?,
                        });
                    }
                }
                Ok(pooled.expect("kernel size is validated to be >= 1"))
            }
            RtLayer::GlobalAvgPool => Ok(x.flatten_from(2)?.mean(D::Minus1)?),
            RtLayer::Linear { weight, bias } => {
                Ok(x.matmul(&weight.as_tensor().t()?)?.broadcast_add(bias.as_tensor())?)
            }
            RtLayer::Residual { body, shortcut } => {
                let main = forward_chain(body, x, train, rng)?;
                let skip = if shortcut.is_empty() {
                    x.clone()
                } else {
                    forward_chain(shortcut, x, train, rng)?
                };
                Ok((main + skip)?)
            }
            RtLayer::Upsample {
                row_map,
                col_map_t,
                out_h,
                out_w,
            } => {
                let (b, c, h, w) = x.dims4()?;
                let flat = x.reshape((b * c, h, w))?;
                let rows = row_map.broadcast_matmul(&flat)?;
                let resized = rows.broadcast_matmul(col_map_t)?;
                Ok(resized.reshape((b, c, *out_h, *out_w))?)
            }
            RtLayer::Aspp {
                branches,
                pool_branch,
                project,
            } => {
                let (b, c, h, w) = x.dims4()?;
                let mut outs = Vec::with_capacity(branches.len() + 1);
                for branch in branches {
                    outs.push(forward_chain(branch, x, train, rng)?);
                }
                let pooled = x.reshape((b, c, h * w))?.mean_keepdim(D::Minus1)?.reshape((
                    b,
                    c,
                    1,
                    1,
                ))?;
                let pooled = forward_chain(pool_branch, &pooled, train, rng)?;
                let (_, pc, _, _) = pooled.dims4()?;
                outs.push(pooled.broadcast_as((b, pc, h, w))?.contiguous()?);
                let cat = Tensor::cat(&outs, 1)?;
                forward_chain(project, &cat, train, rng)
            }
            RtLayer::Replicate { factor } => Ok(x.repeat((1, *factor, 1, 1))?),
        }
    }
}

/// A graph instantiated with parameters.
pub struct Network {
    pub graph: NetworkGraph,
    layers: Vec<(String, RtLayer)>,
}

impl Network {
    /// Create parameters for every layer of `graph` under `prefix` in the
    /// store, initialized from `rng`.
    pub fn instantiate(
        graph: &NetworkGraph,
        prefix: &str,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Network> {
        let mut builder = Builder { store, rng };
        let mut shape = graph.input;
        let mut layers = Vec::with_capacity(graph.layers.len());
        for NamedLayer { name, desc } in &graph.layers {
            let full = format!("{prefix}.{name}");
            let layer = builder.build(&full, desc, shape)?;
            shape = desc.infer(shape)?;
            layers.push((full, layer));
        }
        if shape != graph.output {
            return Err(Error::shape(format!(
                "graph '{}' declares output {} but inference gives {shape}",
                graph.name, graph.output
            )));
        }
        Ok(Network {
            graph: graph.clone(),
            layers,
        })
    }

    /// Run the network. `train` enables dropout and batch statistics;
    /// inference mode is deterministic.
    pub fn forward(&self, x: &Tensor, train: bool, rng: &RefCell<ChaCha8Rng>) -> Result<Tensor> {
        forward_chain(&self.layers, x, train, rng)
    }
}
