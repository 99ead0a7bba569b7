//! Assembled trainable models (backbone plus heads) and their checkpoint
//! format: a directory holding a declarative graph description, a tensor
//! archive keyed by layer identifier, and run metadata.

use std::cell::RefCell;
use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{
    build_cvs_head, build_linear_head, build_multitask_heads, build_resnet101, build_wide_resnet,
    BackboneKind, NetworkGraph,
};
use crate::nn::{Network, ParamStore};

pub const CHECKPOINT_FORMAT: &str = "segclass-checkpoint-v1";

/// How the model turns images into labels and which losses apply.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Single segmentation head; the class label is derived from the
    /// predicted map.
    Cvs,
    /// Standard linear classification head.
    Classification,
    /// Shared trunk with separate segmentation and classification heads.
    Multitask,
    /// Segmentation head alone (used for the preliminary propagation models).
    SegmentationOnly,
}

impl Method {
    pub fn needs_masks(&self) -> bool {
        !matches!(self, Method::Classification)
    }

    pub fn has_clf_head(&self) -> bool {
        matches!(self, Method::Classification | Method::Multitask)
    }

    pub fn has_seg_head(&self) -> bool {
        !matches!(self, Method::Classification)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Cvs => "cvs",
            Method::Classification => "classification",
            Method::Multitask => "multitask",
            Method::SegmentationOnly => "segmentation-only",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cvs" => Ok(Method::Cvs),
            "classification" => Ok(Method::Classification),
            "multitask" => Ok(Method::Multitask),
            "segmentation-only" => Ok(Method::SegmentationOnly),
            other => Err(Error::config(format!("unknown method '{other}'"))),
        }
    }
}

/// Architecture selection; depth/width/dropout apply to the wide-resnet
/// backbone only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub backbone: BackboneKind,
    pub depth: usize,
    pub width: usize,
    pub dropout: f64,
    pub pretrained: bool,
    pub pretrained_weights: Option<PathBuf>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            backbone: BackboneKind::WideResnet,
            depth: 28,
            width: 10,
            dropout: 0.3,
            pretrained: false,
            pretrained_weights: None,
        }
    }
}

/// The declarative part of a checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelDescription {
    pub format: String,
    pub model_id: String,
    pub method: Method,
    pub num_classes: usize,
    /// (H, W, C)
    pub input_shape: (usize, usize, usize),
    pub backbone: NetworkGraph,
    pub seg_head: Option<NetworkGraph>,
    pub clf_head: Option<NetworkGraph>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub config_hash: String,
    pub best_metric: Option<f64>,
}

pub struct Model {
    pub description: ModelDescription,
    pub store: ParamStore,
    backbone: Network,
    seg_head: Option<Network>,
    clf_head: Option<Network>,
    drop_rng: RefCell<ChaCha8Rng>,
}

impl Model {
    /// Build the graphs for `method` and instantiate fresh parameters from
    /// `seed`.
    pub fn build(
        method: Method,
        net: &NetworkConfig,
        input_shape: (usize, usize, usize),
        num_classes: usize,
        seed: u64,
        model_id: impl Into<String>,
    ) -> Result<Model> {
        let (h, w, c) = input_shape;
        let backbone = match net.backbone {
            BackboneKind::WideResnet => {
                build_wide_resnet(net.depth, net.width, net.dropout, c, (h, w))?
            }
            BackboneKind::Resnet101 => build_resnet101(method.has_seg_head(), c, (h, w))?,
        };
        let feature_shape = backbone.output;
        let (seg_graph, clf_graph) = match method {
            Method::Cvs | Method::SegmentationOnly => (
                Some(build_cvs_head(net.backbone, feature_shape, num_classes, (h, w))?),
                None,
            ),
            Method::Classification => (None, Some(build_linear_head(feature_shape, num_classes)?)),
            Method::Multitask => {
                let (seg, clf) =
                    build_multitask_heads(net.backbone, feature_shape, num_classes, (h, w))?;
                (Some(seg), Some(clf))
            }
        };
        let description = ModelDescription {
            format: CHECKPOINT_FORMAT.to_string(),
            model_id: model_id.into(),
            method,
            num_classes,
            input_shape,
            backbone,
            seg_head: seg_graph,
            clf_head: clf_graph,
        };
        let mut model = Model::instantiate(description, seed)?;
        if net.pretrained {
            let path = net.pretrained_weights.as_ref().ok_or_else(|| {
                Error::config(
                    "pretrained weights requested but no weight file configured; \
                     refusing to fall back to random initialization",
                )
            })?;
            if !path.exists() {
                return Err(Error::config(format!(
                    "pretrained weight file {} not found",
                    path.display()
                )));
            }
            model.store.load_partial(path, "backbone.")?;
        }
        Ok(model)
    }

    fn instantiate(description: ModelDescription, seed: u64) -> Result<Model> {
        let mut store = ParamStore::new(Device::Cpu);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Network::instantiate(&description.backbone, "backbone", &mut store, &mut rng)?;
        let seg_head = description
            .seg_head
            .as_ref()
            .map(|g| Network::instantiate(g, "seg_head", &mut store, &mut rng))
            .transpose()?;
        let clf_head = description
            .clf_head
            .as_ref()
            .map(|g| Network::instantiate(g, "clf_head", &mut store, &mut rng))
            .transpose()?;
        Ok(Model {
            description,
            store,
            backbone,
            seg_head,
            clf_head,
            drop_rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed ^ DROPOUT_STREAM_TAG)),
        })
    }

    pub fn method(&self) -> Method {
        self.description.method
    }

    pub fn model_id(&self) -> &str {
        &self.description.model_id
    }

    pub fn num_classes(&self) -> usize {
        self.description.num_classes
    }

    /// Reset the dropout noise stream; called at the start of each epoch with
    /// a derived seed so training is reproducible and resumable.
    pub fn reseed_dropout(&self, seed: u64) {
        *self.drop_rng.borrow_mut() = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn forward_features(&self, images: &Tensor, train: bool) -> Result<Tensor> {
        self.backbone.forward(images, train, &self.drop_rng)
    }

    /// Backbone + segmentation head: `(B, P + 1, H, W)` logits.
    pub fn forward_seg(&self, images: &Tensor, train: bool) -> Result<Tensor> {
        let seg = self
            .seg_head
            .as_ref()
            .ok_or_else(|| Error::config("model has no segmentation head"))?;
        let features = self.forward_features(images, train)?;
        seg.forward(&features, train, &self.drop_rng)
    }

    /// Backbone + classification head: `(B, P)` scores.
    pub fn forward_clf(&self, images: &Tensor, train: bool) -> Result<Tensor> {
        let clf = self
            .clf_head
            .as_ref()
            .ok_or_else(|| Error::config("model has no classification head"))?;
        let features = self.forward_features(images, train)?;
        clf.forward(&features, train, &self.drop_rng)
    }

    /// Both heads from one shared trunk evaluation.
    pub fn forward_both(&self, images: &Tensor, train: bool) -> Result<(Tensor, Tensor)> {
        let seg = self
            .seg_head
            .as_ref()
            .ok_or_else(|| Error::config("model has no segmentation head"))?;
        let clf = self
            .clf_head
            .as_ref()
            .ok_or_else(|| Error::config("model has no classification head"))?;
        let features = self.forward_features(images, train)?;
        Ok((
            seg.forward(&features, train, &self.drop_rng)?,
            clf.forward(&features, train, &self.drop_rng)?,
        ))
    }

    pub fn save_checkpoint(&self, dir: &Path, meta: &CheckpointMeta) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json_atomic(&dir.join("graph.json"), &self.description)?;
        write_json_atomic(&dir.join("meta.json"), meta)?;
        let tmp = dir.join(".params.safetensors.tmp");
        self.store.save(&tmp)?;
        std::fs::rename(&tmp, dir.join("params.safetensors")).map_err(|e| Error::io(dir, e))?;
        Ok(())
    }

    pub fn load_checkpoint(dir: &Path) -> Result<(Model, CheckpointMeta)> {
        let graph_path = dir.join("graph.json");
        if !graph_path.exists() {
            return Err(Error::MissingSource(graph_path));
        }
        let description: ModelDescription = read_json(&graph_path)?;
        if description.format != CHECKPOINT_FORMAT {
            return Err(Error::validation(format!(
                "unsupported checkpoint format '{}'",
                description.format
            )));
        }
        let meta: CheckpointMeta = read_json(&dir.join("meta.json"))?;
        let mut model = Model::instantiate(description, 0)?;
        model.store.load(&dir.join("params.safetensors"))?;
        Ok((model, meta))
    }
}

// keeps the dropout noise stream distinct from the init stream
const DROPOUT_STREAM_TAG: u64 = 0x6f70_7072_6e67;

pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

impl ParamStore {
    /// Load only the tensors whose names start with `prefix`; used for the
    /// optional pretrained backbone hook.
    pub fn load_partial(&mut self, path: &Path, prefix: &str) -> Result<()> {
        let tensors: HashMap<String, Tensor> =
            candle_core::safetensors::load(path, &Device::Cpu)?;
        let mut loaded = 0usize;
        for (name, tensor) in &tensors {
            if !name.starts_with(prefix) {
                continue;
            }
            if let Some(var) = self.get(name) {
                var.set(tensor).map_err(|e| {
                    Error::shape(format!("pretrained tensor '{name}' shape mismatch: {e}"))
                })?;
                loaded += 1;
            }
        }
        if loaded == 0 {
            return Err(Error::validation(format!(
                "weight file {} contains no tensors under '{prefix}'",
                path.display()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    fn tiny_net() -> NetworkConfig {
        NetworkConfig {
            backbone: BackboneKind::WideResnet,
            depth: 10,
            width: 1,
            dropout: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn cvs_model_output_shape() {
        let model = Model::build(Method::Cvs, &tiny_net(), (16, 16, 1), 3, 0, "m").unwrap();
        let x = Tensor::zeros((2, 1, 16, 16), DType::F32, &Device::Cpu).unwrap();
        let y = model.forward_seg(&x, false).unwrap();
        assert_eq!(y.dims(), &[2, 4, 16, 16]);
    }

    #[test]
    fn batch_dimension_preserved() {
        let model = Model::build(Method::Classification, &tiny_net(), (16, 16, 1), 5, 0, "m").unwrap();
        let x = Tensor::zeros((8, 1, 16, 16), DType::F32, &Device::Cpu).unwrap();
        let y = model.forward_clf(&x, false).unwrap();
        assert_eq!(y.dims(), &[8, 5]);
    }

    #[test]
    fn checkpoint_roundtrip_preserves_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::build(Method::Cvs, &tiny_net(), (12, 12, 1), 2, 9, "seg-5").unwrap();
        model
            .save_checkpoint(
                dir.path(),
                &CheckpointMeta {
                    epoch: 3,
                    config_hash: "abc".into(),
                    best_metric: Some(0.5),
                },
            )
            .unwrap();
        let (loaded, meta) = Model::load_checkpoint(dir.path()).unwrap();
        assert_eq!(meta.epoch, 3);
        assert_eq!(loaded.model_id(), "seg-5");
        let x = Tensor::rand(0f32, 1f32, (1, 1, 12, 12), &Device::Cpu).unwrap();
        let a: Vec<f32> = model
            .forward_seg(&x, false)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        let b: Vec<f32> = loaded
            .forward_seg(&x, false)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pretrained_without_weights_is_an_error() {
        let net = NetworkConfig {
            pretrained: true,
            ..tiny_net()
        };
        assert!(matches!(
            Model::build(Method::Cvs, &net, (16, 16, 1), 3, 0, "m"),
            Err(Error::Config(_))
        ));
    }
}
