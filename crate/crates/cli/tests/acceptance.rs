//! Release gate: the nine checks below cover the behaviour the project
//! promises end to end. Each test prints a single `criterion N ... : PASS`
//! (or `FAIL`) line so the whole gate can be read off the test output.

use std::cell::RefCell;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use segclass::graph::NamedLayer;
use segclass::nn::{Network, ParamStore};
use segclass::data::TransformDesc;
use segclass::{
    annotation_cost, binarize_to_mask, build_seg_m, class_scores_from_seg, kfold_split,
    load_dataset, mean_iou, pixel_cross_entropy, propagate_labels, run_experiment_grid,
    AnnotationRates, AugmentationPolicy, DatasetSpec, ImageData, LayerDesc, Method, Model,
    NetworkConfig, NetworkGraph, SegLogits, SegMask, SubsetSize, TensorShape, TrainConfig,
};

/// Run a criterion body and print its verdict on one line.
fn gate(number: u32, name: &str, body: impl FnOnce() + std::panic::UnwindSafe) {
    let result = std::panic::catch_unwind(body);
    match &result {
        Ok(()) => println!("criterion {number} ({name}): PASS"),
        Err(_) => println!("criterion {number} ({name}): FAIL"),
    }
    if let Err(e) = result {
        std::panic::resume_unwind(e);
    }
}

// ---------------------------------------------------------------- criterion 1

#[test]
fn criterion_1_dense_beats_linear_on_tiny_subsets() {
    gate(1, "dense head beats linear head at M=10", || {
        let started = Instant::now();
        let train_spec = DatasetSpec::synthetic_shapes(10, (28, 28), 600);
        let mut test_spec = DatasetSpec::synthetic_shapes(10, (28, 28), 2000);
        test_spec.source = "synthetic-shapes#test".into();
        let train_set = load_dataset(&train_spec).unwrap();
        let test_set = load_dataset(&test_spec).unwrap();
        assert_eq!(test_set.len(), 2000);

        let net = NetworkConfig {
            depth: 16,
            width: 2,
            dropout: 0.0,
            ..Default::default()
        };
        let cfg = TrainConfig {
            epochs: 20,
            batch_size: 16,
            lr: 0.03,
            eval_every: 100,
            ..Default::default()
        };
        let table = run_experiment_grid(
            &train_set,
            &test_set,
            &net,
            &cfg,
            &[Method::Cvs, Method::Classification],
            &[SubsetSize::PerClass(10)],
            &[1, 2, 3],
            |cell, outcome| {
                println!(
                    "  {} seed {}: {:?} [{:.0}s]",
                    cell.method.as_str(),
                    cell.seed,
                    outcome,
                    started.elapsed().as_secs_f64()
                );
            },
        )
        .unwrap();
        let means = table.mean_over_seeds();
        let mean_of = |m: Method| {
            means
                .iter()
                .find(|(method, _, _)| *method == m)
                .map(|(_, _, acc)| *acc)
                .unwrap()
        };
        let cvs = mean_of(Method::Cvs);
        let linear = mean_of(Method::Classification);
        println!("  mean accuracy: dense {cvs:.4} vs linear {linear:.4}");
        assert!(
            cvs >= linear + 0.05,
            "dense-head accuracy {cvs:.4} must exceed linear-head {linear:.4} by 5 points"
        );
        assert!(
            started.elapsed() < Duration::from_secs(30 * 60),
            "experiment exceeded its 30 minute budget"
        );
    });
}

// ---------------------------------------------------------------- criterion 2

#[test]
fn criterion_2_score_reduction_matches_naive_oracle() {
    gate(2, "score reduction matches a naive reimplementation", || {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..100 {
            let p = rng.gen_range(1..=12usize);
            let h = rng.gen_range(1..=9usize);
            let w = rng.gen_range(1..=9usize);
            let data: Vec<f32> = (0..(p + 1) * h * w)
                .map(|_| rng.gen_range(-4.0f32..4.0))
                .collect();
            let logits = SegLogits::new(p, h, w, data.clone()).unwrap();
            let scores = class_scores_from_seg(&logits).unwrap();

            // oracle: explicit loops, f64 all the way
            let mut means = vec![0.0f64; p];
            for c in 1..=p {
                let mut sum = 0.0f64;
                for y in 0..h {
                    for x in 0..w {
                        sum += data[(c * h + y) * w + x] as f64;
                    }
                }
                means[c - 1] = sum / (h * w) as f64;
            }
            let max = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exp: Vec<f64> = means.iter().map(|m| (m - max).exp()).collect();
            let z: f64 = exp.iter().sum();
            let mut best = 0usize;
            for (i, m) in means.iter().enumerate() {
                if *m > means[best] {
                    best = i;
                }
            }
            for c in 0..p {
                assert!((scores.logits[c] - means[c]).abs() < 1e-6);
                assert!((scores.probabilities[c] - exp[c] / z).abs() < 1e-6);
            }
            assert_eq!(scores.predicted, (best + 1) as u32);
        }
    });
}

// ---------------------------------------------------------------- criterion 3

fn named(name: &str, desc: LayerDesc) -> NamedLayer {
    NamedLayer {
        name: name.into(),
        desc,
    }
}

/// Aggregate-norm gradient check: backprop vs Richardson-extrapolated central
/// differences on a network well under 1k parameters.
fn gradient_norm_check(graph: NetworkGraph, x: Tensor, targets: Tensor, seed: u64) {
    // double precision keeps the finite-difference noise floor below 1e-3
    let mut store = ParamStore::with_dtype(Device::Cpu, DType::F64);
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Network::instantiate(&graph, "net", &mut store, &mut init_rng).unwrap();
    let rng = RefCell::new(ChaCha8Rng::seed_from_u64(seed));
    let loss_fn =
        || pixel_cross_entropy(&net.forward(&x, false, &rng).unwrap(), &targets).unwrap();

    let grads = loss_fn().backward().unwrap();
    let mut num_params = 0usize;
    let mut diff_sq = 0.0f64;
    let mut grad_sq = 0.0f64;
    for (name, var) in store.trainable() {
        let grad = grads
            .get(var)
            .unwrap_or_else(|| panic!("no gradient for '{name}'"))
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let values = var
            .as_tensor()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let shape = var.as_tensor().dims().to_vec();
        num_params += values.len();
        for i in 0..values.len() {
            let mut central = |eps: f64| {
                let mut p = values.clone();
                p[i] = values[i] + eps;
                var.set(&Tensor::from_vec(p.clone(), shape.as_slice(), &Device::Cpu).unwrap())
                    .unwrap();
                let up = loss_fn().to_scalar::<f64>().unwrap();
                p[i] = values[i] - eps;
                var.set(&Tensor::from_vec(p, shape.as_slice(), &Device::Cpu).unwrap())
                    .unwrap();
                let down = loss_fn().to_scalar::<f64>().unwrap();
                (up - down) / (2.0 * eps)
            };
            let coarse = central(2e-5);
            let fine = central(1e-5);
            var.set(&Tensor::from_vec(values.clone(), shape.as_slice(), &Device::Cpu).unwrap())
                .unwrap();
            if (coarse - fine).abs() > 1e-4 * coarse.abs().max(fine.abs()).max(0.01) {
                continue; // activation kink: the finite difference is unreliable
            }
            let fd = (4.0 * fine - coarse) / 3.0;
            diff_sq += (fd - grad[i]).powi(2);
            grad_sq += grad[i].powi(2);
        }
    }
    assert!(num_params > 0 && num_params <= 1000, "{num_params} params");
    let rel = (diff_sq / grad_sq).sqrt();
    assert!(rel <= 1e-3, "gradient vector relative error {rel}");
}

#[test]
fn criterion_3_pixel_loss_value_and_gradients() {
    gate(3, "uniform-logit loss value and gradient check", || {
        // a constant map gives every class probability 1/(P+1), so the
        // per-pixel loss is exactly ln(P+1)
        for p in [1usize, 2, 10] {
            let logits = Tensor::zeros((2, p + 1, 4, 4), candle_core::DType::F32, &Device::Cpu)
                .unwrap();
            let targets =
                Tensor::zeros((2, 4, 4), candle_core::DType::U32, &Device::Cpu).unwrap();
            let loss = pixel_cross_entropy(&logits, &targets)
                .unwrap()
                .to_scalar::<f32>()
                .unwrap() as f64;
            let expected = ((p + 1) as f64).ln();
            assert!(
                (loss - expected).abs() < 1e-6,
                "P={p}: loss {loss} vs ln(P+1)={expected}"
            );
        }

        let graph = NetworkGraph::new(
            "tiny",
            TensorShape::spatial(1, 6, 6),
            vec![
                named(
                    "conv1",
                    LayerDesc::Conv {
                        out_channels: 2,
                        kernel: 3,
                        stride: 1,
                        padding: 1,
                        dilation: 1,
                        bias: true,
                    },
                ),
                named("bn1", LayerDesc::BatchNorm),
                named("act1", LayerDesc::Relu),
                named(
                    "up",
                    LayerDesc::ConvTranspose {
                        out_channels: 3,
                        kernel: 2,
                        stride: 2,
                    },
                ),
            ],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::from_vec(
            (0..2 * 36)
                .map(|_| rng.gen_range(0.0f64..1.0))
                .collect::<Vec<_>>(),
            (2, 1, 6, 6),
            &Device::Cpu,
        )
        .unwrap();
        let targets = Tensor::from_vec(
            (0..2 * 144)
                .map(|_| rng.gen_range(0u32..3))
                .collect::<Vec<_>>(),
            (2, 12, 12),
            &Device::Cpu,
        )
        .unwrap();
        gradient_norm_check(graph, x, targets, 23);
    });
}

// ---------------------------------------------------------------- criterion 4

#[test]
fn criterion_4_binarization_contract() {
    gate(4, "thresholding contract on 50 random images", || {
        let mut rng = ChaCha8Rng::seed_from_u64(404);
        for _ in 0..50 {
            let pixels: Vec<f32> = (0..28 * 28).map(|_| rng.gen_range(0.0f32..1.0)).collect();
            let image = ImageData {
                c: 1,
                h: 28,
                w: 28,
                data: pixels.clone(),
            };
            let label = rng.gen_range(1..=10u32);
            let threshold = rng.gen_range(0.1f32..0.9);
            let mask = binarize_to_mask(&image, label, 10, threshold).unwrap();
            assert_eq!((mask.h, mask.w), (28, 28));
            for (v, px) in mask.values.iter().zip(&pixels) {
                if *px > threshold {
                    assert_eq!(*v as u32, label);
                } else {
                    assert_eq!(*v, 0);
                }
            }
        }
    });
}

// ---------------------------------------------------------------- criterion 5

#[test]
fn criterion_5_propagation_quality() {
    gate(5, "five masks per class propagate at IoU >= 0.7", || {
        let started = Instant::now();
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
        let (model, train_ids, _) = build_seg_m(&full, 5, 3, &net, &cfg).unwrap();

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
        println!(
            "  foreground IoU {iou:.4} after {:.0}s",
            started.elapsed().as_secs_f64()
        );
        assert!(iou >= 0.7, "mean foreground IoU {iou:.4} below 0.7");
        assert!(
            started.elapsed() < Duration::from_secs(10 * 60),
            "propagation exceeded its 10 minute budget"
        );
    });
}

// ---------------------------------------------------------------- criterion 6

#[test]
fn criterion_6_shape_suite() {
    gate(6, "output shapes for every backbone/head pair", || {
        for backbone in ["wide-resnet", "resnet101"] {
            for method in [Method::Cvs, Method::Classification, Method::Multitask] {
                for hw in [28usize, 32, 128] {
                    let net = NetworkConfig {
                        backbone: backbone.parse().unwrap(),
                        depth: 16,
                        width: 2,
                        dropout: 0.0,
                        ..Default::default()
                    };
                    let model = Model::build(
                        method,
                        &net,
                        (hw, hw, 1),
                        7,
                        0,
                        format!("{backbone}-{}-{hw}", method.as_str()),
                    )
                    .unwrap();
                    let d = &model.description;
                    if method.has_seg_head() {
                        assert_eq!(
                            d.seg_head.as_ref().unwrap().output,
                            TensorShape::spatial(8, hw, hw),
                            "{backbone}/{}/{hw}: segmentation output",
                            method.as_str()
                        );
                    }
                    if method.has_clf_head() {
                        assert_eq!(
                            d.clf_head.as_ref().unwrap().output,
                            TensorShape::vector(7),
                            "{backbone}/{}/{hw}: classifier output",
                            method.as_str()
                        );
                    }
                }
            }
        }
    });
}

// ---------------------------------------------------------------- criterion 7

#[test]
fn criterion_7_annotation_cost_identity() {
    gate(7, "annotation cost identity", || {
        let rates = AnnotationRates::cifar10();
        assert_eq!(rates.class_label_seconds, 3.5);
        assert_eq!(rates.seg_label_seconds, 29.52);
        assert_eq!(AnnotationRates::cifar100().class_label_seconds, 8.5);
        // the full-data reference point: 50000 class labels + 100 dense masks
        let total = annotation_cost(&rates, 50_000, 100);
        assert_eq!(total, 177_952.0);
        assert_eq!(annotation_cost(&rates, 10, 5), 10.0 * 3.5 + 5.0 * 29.52);
    });
}

// ---------------------------------------------------------------- criterion 8

#[test]
fn criterion_8_kfold_partition() {
    gate(8, "k-fold splits partition cleanly", || {
        let ids: Vec<String> = (0..45).map(|i| format!("s{i:03}")).collect();
        let folds = kfold_split(&ids, 5, 9).unwrap();
        assert_eq!(folds.len(), 5);
        let mut seen = std::collections::BTreeSet::new();
        for (train, val) in &folds {
            assert_eq!((train.len(), val.len()), (36, 9));
            for id in val {
                assert!(seen.insert(id.clone()), "id {id} in two validation folds");
                assert!(!train.contains(id), "id {id} leaks into its own train fold");
            }
        }
        assert_eq!(seen.len(), 45, "validation folds must cover every id");

        // the same invariants on 100 random (n, k, seed) triples
        let mut rng = ChaCha8Rng::seed_from_u64(808);
        for _ in 0..100 {
            let n = rng.gen_range(4..80usize);
            let k = rng.gen_range(2..=n.min(7));
            let seed = rng.gen::<u64>();
            let ids: Vec<String> = (0..n).map(|i| format!("x{i}")).collect();
            let folds = kfold_split(&ids, k, seed).unwrap();
            assert_eq!(folds.len(), k);
            let mut covered = std::collections::BTreeSet::new();
            for (train, val) in &folds {
                assert_eq!(train.len() + val.len(), n);
                assert!(val.len() >= n / k && val.len() <= n / k + 1);
                for id in val {
                    assert!(covered.insert(id.clone()));
                    assert!(!train.contains(id));
                }
            }
            assert_eq!(covered.len(), n);
        }
    });
}

// ---------------------------------------------------------------- criterion 9

#[test]
fn criterion_9_identical_runs_are_bit_identical() {
    gate(9, "same config and seed reproduce the metric log", || {
        let tmp = tempfile::TempDir::new().unwrap();
        let cfg_path = tmp.path().join("run.json");
        let cfg = serde_json::json!({
            "dataset": {
                "name": "synthetic-shapes",
                "num_classes": 3,
                "image_shape": [16, 16, 1],
                "size": 12,
                "source": "synthetic-shapes"
            },
            "method": "cvs",
            "network": { "backbone": "wide-resnet", "depth": 10, "width": 1, "dropout": 0.3 },
            "train": { "epochs": 2, "batch_size": 4, "lr": 0.05, "eval_every": 1,
                       "augmentation": { "transforms": [
                           { "kind": "shift_zoom", "max_shift_frac": 0.1, "zoom_range": [0.95, 1.05] }
                       ] } },
            "subset": { "perclass": 3 },
            "seed": 11
        });
        std::fs::write(&cfg_path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();

        let mut logs = Vec::new();
        for run in ["a", "b"] {
            let out = tmp.path().join(run);
            let status = std::process::Command::new(env!("CARGO_BIN_EXE_segclass"))
                .args([
                    "train",
                    "--config",
                    cfg_path.to_str().unwrap(),
                    "--out-dir",
                    out.to_str().unwrap(),
                ])
                .status()
                .unwrap();
            assert!(status.success());
            logs.push(std::fs::read(out.join("metrics.tsv")).unwrap());
        }
        assert_eq!(logs[0], logs[1], "metric logs differ between identical runs");
        assert!(!logs[0].is_empty());
    });
}
