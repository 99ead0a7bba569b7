use segclass::data::TransformDesc;
use segclass::{
    accuracy, load_dataset, predict_labels, sample_per_class, train, AugmentationPolicy,
    DatasetSpec, Method, Model, NetworkConfig, SubsetSize, SubsetSpec, TrainConfig,
};

#[test]
fn probe() {
    let hw = 16;
    let train_spec = DatasetSpec::synthetic_shapes(10, (hw, hw), 600);
    let mut test_spec = DatasetSpec::synthetic_shapes(10, (hw, hw), 2000);
    test_spec.source = "synthetic-shapes#test".into();
    let train_set = load_dataset(&train_spec).unwrap();
    let test_set = load_dataset(&test_spec).unwrap();
    let truth: Vec<u32> = test_set.samples().iter().map(|s| s.label).collect();

    let net = NetworkConfig { depth: 16, width: 2, dropout: 0.0, ..Default::default() };
    for aug in [true, false] {
        for method in [Method::Cvs, Method::Classification] {
            let ids = sample_per_class(&train_set, &SubsetSpec { size: SubsetSize::PerClass(10), seed: 1 }).unwrap();
            let subset = train_set.subset(&ids).unwrap();
            let mut model = Model::build(method, &net, (hw, hw, 1), 10, 1, "probe").unwrap();
            let augmentation = if aug {
                AugmentationPolicy { transforms: vec![TransformDesc::ShiftZoom { max_shift_frac: 0.12, zoom_range: (0.9, 1.1) }] }
            } else {
                AugmentationPolicy::empty()
            };
            let epochs = 30;
            let cfg = TrainConfig { epochs, batch_size: 16, lr: 0.05, eval_every: 100, seed: 1, augmentation, ..Default::default() };
            let t0 = std::time::Instant::now();
            let report = train(&mut model, &subset, None, &cfg).unwrap();
            let t_train = t0.elapsed().as_secs_f64();
            let preds = predict_labels(&model, &test_set, 16).unwrap();
            let t_eval = t0.elapsed().as_secs_f64() - t_train;
            let acc = accuracy(&preds, &truth).unwrap();
            println!("{method:?} aug={aug}: acc {acc:.4}, train {t_train:.0}s ({:.1}s/epoch), eval {t_eval:.0}s, final loss {:.4}",
                     t_train / epochs as f64, report.final_train_loss);
        }
    }
}
