//! Image classification by dense prediction: train a segmentation network
//! from cheaply synthesized pixel labels and read the image-level class off
//! the predicted map. Ships the label-synthesis pipeline (thresholding and
//! mask propagation from a small hand-labelled pool), wide-resnet and
//! resnet101 trunks with segmentation and linear heads, a deterministic
//! trainer, evaluation and k-fold utilities, and annotation-cost reporting.

pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod infer;
pub mod labels;
pub mod model;
pub mod nn;
pub mod train;

pub use config::{default_batch_size, RunConfig};
pub use cost::{annotation_cost, emit_cost_curve, AnnotationRates, CostPoint};
pub use data::{
    augment, load_dataset, parse_manifest, read_mask, sample_per_class, write_image, write_manifest,
    write_mask, AugmentationPolicy, Dataset, DatasetSpec, ImageData, LabeledSample, ManifestRecord,
    SegMask, Split, SubsetSize, SubsetSpec, TransformDesc,
};
pub use error::{Error, Result};
pub use eval::{
    accuracy, evaluate_model, kfold_split, mean_iou, predict_labels, predict_masks,
    run_experiment_grid, EvalReport, GridCell, GridOutcome, ResultsTable,
};
pub use graph::{BackboneKind, LayerDesc, NetworkGraph, TensorShape};
pub use infer::{class_scores_from_seg, predict_batch, ClassScores, SegLogits};
pub use labels::{
    argmax_mask, binarize_dataset, binarize_to_mask, build_seg_m, propagate_labels,
    PropagationReport,
};
pub use model::{CheckpointMeta, Method, Model, ModelDescription, NetworkConfig};
pub use train::{
    class_cross_entropy, cosine_lr, derive_seed, multitask_loss, pixel_cross_entropy, train,
    write_metric_log, MetricRecord, SgdMomentum, TrainConfig, TrainReport,
};
