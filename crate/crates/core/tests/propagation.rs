//! Label propagation quality: a segmentation model trained on five masked
//! samples per class must transfer usable masks to the rest of the
//! training set.

use segclass::data::TransformDesc;
use segclass::{
    build_seg_m, load_dataset, mean_iou, propagate_labels, AugmentationPolicy, DatasetSpec,
    NetworkConfig, SegMask, TrainConfig,
};

#[test]
fn seg5_propagation_reaches_iou_070() {
    let spec = DatasetSpec::synthetic_shapes(3, (28, 28), 60);
    let full = load_dataset(&spec).unwrap();
    let reference: Vec<(String, SegMask)> = full
        .samples()
        .iter()
        .map(|s| (s.id.clone(), s.mask.clone().unwrap()))
        .collect();

    let net = NetworkConfig {
        depth: 10,
        width: 2,
        dropout: 0.0,
        ..Default::default()
    };
    // shift/zoom jitter is what lets per-pixel class identity generalize
    // from five masks per class; without it the masks stay sharp but the
    // class assignment does not transfer
    let cfg = TrainConfig {
        epochs: 120,
        batch_size: 5,
        lr: 0.1,
        weight_decay: 1e-4,
        seed: 3,
        augmentation: AugmentationPolicy {
            transforms: vec![TransformDesc::ShiftZoom {
                max_shift_frac: 0.12,
                zoom_range: (0.9, 1.1),
            }],
        },
        ..Default::default()
    };
    let (model, train_ids, report) = build_seg_m(&full, 5, 3, &net, &cfg).unwrap();
    assert_eq!(model.model_id(), "seg-5");
    assert_eq!(train_ids.len(), 15);
    assert!(report.final_train_loss.is_finite());

    // strip masks from everything the model did not train on, then propagate
    let samples: Vec<_> = full
        .samples()
        .iter()
        .cloned()
        .map(|mut s| {
            if !train_ids.contains(&s.id) {
                s.mask = None;
            }
            s
        })
        .collect();
    let stripped = segclass::Dataset::from_samples(full.spec.clone(), samples).unwrap();
    let (labelled, prop) = propagate_labels(&model, stripped, 16, true).unwrap();
    assert_eq!(prop.propagated, 45);
    assert_eq!(prop.kept_manual, 15);

    let mut predicted = Vec::new();
    let mut truth = Vec::new();
    for (id, gt) in &reference {
        if train_ids.contains(id) {
            continue;
        }
        predicted.push(labelled.get(id).unwrap().mask.clone().unwrap());
        truth.push(gt.clone());
    }
    let iou = mean_iou(&predicted, &truth, 3).unwrap();
    println!("seg-5 propagation mean foreground IoU: {iou:.4}");
    assert!(iou >= 0.7, "mean foreground IoU {iou:.4} below 0.7");
}
