//! Command-line front end: label preparation, training, propagation,
//! evaluation, experiment grids and annotation-cost reports.
//!
//! Exit codes: 0 on success, 1 on an operational error, 2 on bad usage
//! (clap's default).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use segclass::cost::{model_flops, CostPoint};
use segclass::data::write_image;
use segclass::{
    binarize_dataset, build_seg_m, evaluate_model, load_dataset, propagate_labels,
    run_experiment_grid, sample_per_class, train, write_manifest, write_mask, write_metric_log,
    AnnotationRates, CheckpointMeta, Dataset, DatasetSpec, ManifestRecord, Method, Model,
    ResultsTable, RunConfig, SubsetSize, SubsetSpec,
};

const RUN_FORMAT: &str = "segclass-run-v1";

/// Root directory that relative output paths are resolved against.
const OUTPUT_ROOT_ENV: &str = "SEGCLASS_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "segclass", version, about = "Classification via dense prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Path to the run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; relative paths resolve against $SEGCLASS_OUTPUT_ROOT.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Threshold training images into masks and write them with a manifest.
    PrepareLabels {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train a segmentation model on a few mask-carrying samples per class.
    TrainSeg {
        #[command(flatten)]
        common: CommonArgs,
        /// Mask-carrying samples per class.
        #[arg(long)]
        m: usize,
    },
    /// Train a model according to the configured method and subset.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Predict masks for the training set with a trained segmentation model.
    Propagate {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint directory of the segmentation model.
        #[arg(long)]
        model: PathBuf,
        /// Leave samples that already carry a mask untouched.
        #[arg(long)]
        keep_existing: bool,
    },
    /// Score a trained model on the held-out split.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint directory.
        #[arg(long)]
        model: PathBuf,
        /// Image-level labels the run consumed (for cost accounting).
        #[arg(long)]
        n_class_labeled: Option<usize>,
        /// Dense masks the run consumed (for cost accounting).
        #[arg(long, default_value_t = 0)]
        n_seg_labeled: usize,
    },
    /// Train and evaluate every (method, subset size, seed) combination.
    Grid {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated methods, e.g. `cvs,classification`.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<Method>,
        /// Comma-separated samples-per-class values (or `all`).
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<SubsetSize>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Turn a grid results table into an annotation-seconds curve.
    CostReport {
        #[command(flatten)]
        common: CommonArgs,
        /// Results table produced by `grid`.
        #[arg(long)]
        results: PathBuf,
        /// Rate preset: `cifar10` or `cifar100`.
        #[arg(long, default_value = "cifar10")]
        rates: String,
        /// Dense masks charged to methods with a segmentation head.
        #[arg(long, default_value_t = 0)]
        n_seg_labeled: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn resolve_out_dir(dir: &Path) -> PathBuf {
    if dir.is_absolute() {
        return dir.to_path_buf();
    }
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) => PathBuf::from(root).join(dir),
        None => dir.to_path_buf(),
    }
}

/// Simple advisory lock: refuse to reuse an output directory that another
/// invocation is still writing to.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> anyhow::Result<DirLock> {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(".lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => bail!(
                "{} is locked by another run (stale? remove {})",
                dir.display(),
                path.display()
            ),
            Err(e) => Err(e).with_context(|| format!("locking {}", dir.display())),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Write the fully expanded config, its hash and the format tag next to the
/// run outputs.
fn record_config(dir: &Path, cfg: &RunConfig) -> anyhow::Result<()> {
    let doc = serde_json::json!({
        "format": RUN_FORMAT,
        "config_hash": cfg.hash(),
        "config": cfg.resolved(),
    });
    std::fs::write(dir.join("config.resolved.json"), serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

fn load_config(path: &Path) -> anyhow::Result<RunConfig> {
    Ok(RunConfig::from_json_file(path)?)
}

fn test_spec(cfg: &RunConfig) -> DatasetSpec {
    let resolved = cfg.resolved();
    let mut spec = resolved.dataset.clone();
    if let Some(src) = resolved.test_source {
        spec.source = src;
    }
    spec
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::PrepareLabels { common } => prepare_labels(&common),
        Command::TrainSeg { common, m } => train_seg(&common, m),
        Command::Train { common, resume } => train_cmd(&common, resume),
        Command::Propagate {
            common,
            model,
            keep_existing,
        } => propagate_cmd(&common, &model, keep_existing),
        Command::Evaluate {
            common,
            model,
            n_class_labeled,
            n_seg_labeled,
        } => evaluate_cmd(&common, &model, n_class_labeled, n_seg_labeled),
        Command::Grid {
            common,
            methods,
            sizes,
            seeds,
        } => grid_cmd(&common, &methods, &sizes, &seeds),
        Command::CostReport {
            common,
            results,
            rates,
            n_seg_labeled,
        } => cost_report(&common, &results, &rates, n_seg_labeled),
    }
}

fn prepare_labels(common: &CommonArgs) -> anyhow::Result<()> {
    let cfg = load_config(&common.config)?;
    let out = resolve_out_dir(&common.out_dir);
    let _lock = DirLock::acquire(&out)?;
    record_config(&out, &cfg)?;
    let dataset = load_dataset(&cfg.dataset)?;
    let dataset = binarize_dataset(dataset, cfg.binarize_threshold)?;
    write_labelled_copy(&out, &dataset)?;
    println!("labelled {} samples into {}", dataset.len(), out.display());
    Ok(())
}

/// Materialize a dataset as PNG images plus masks and a manifest.
fn write_labelled_copy(out: &Path, dataset: &Dataset) -> anyhow::Result<()> {
    let images = out.join("images");
    let masks = out.join("masks");
    std::fs::create_dir_all(&images)?;
    std::fs::create_dir_all(&masks)?;
    let mut records = Vec::with_capacity(dataset.len());
    for s in dataset.samples() {
        let image_path = images.join(format!("{}.png", s.id));
        write_image(&image_path, &s.image)?;
        let mask_path = match &s.mask {
            Some(m) => {
                let p = masks.join(format!("{}.png", s.id));
                write_mask(&p, m)?;
                Some(p)
            }
            None => None,
        };
        records.push(ManifestRecord {
            id: s.id.clone(),
            image_path,
            label: s.label,
            mask_path,
        });
    }
    write_manifest(&out.join("manifest.tsv"), &records)?;
    Ok(())
}

fn train_seg(common: &CommonArgs, m: usize) -> anyhow::Result<()> {
    let cfg = load_config(&common.config)?;
    let out = resolve_out_dir(&common.out_dir);
    let _lock = DirLock::acquire(&out)?;
    record_config(&out, &cfg)?;
    let resolved = cfg.resolved();
    let mut dataset = load_dataset(&cfg.dataset)?;
    if dataset.samples().iter().all(|s| s.mask.is_none()) {
        dataset = binarize_dataset(dataset, cfg.binarize_threshold)?;
    }
    let mut train_cfg = resolved.train.clone();
    train_cfg.checkpoint_dir = Some(out.join("checkpoint"));
    let (model, ids, report) = build_seg_m(&dataset, m, cfg.seed, &cfg.network, &train_cfg)?;
    model.save_checkpoint(
        &out.join("checkpoint"),
        &CheckpointMeta {
            epoch: report.epochs_run,
            config_hash: cfg.hash(),
            best_metric: None,
        },
    )?;
    write_metric_log(&out.join("metrics.tsv"), &report.records)?;
    std::fs::write(out.join("train_ids.txt"), ids.join("\n") + "\n")?;
    println!(
        "trained {} on {} samples, final loss {:.4}",
        model.model_id(),
        ids.len(),
        report.final_train_loss
    );
    Ok(())
}

fn train_cmd(common: &CommonArgs, resume: bool) -> anyhow::Result<()> {
    let cfg = load_config(&common.config)?;
    let out = resolve_out_dir(&common.out_dir);
    let _lock = DirLock::acquire(&out)?;
    record_config(&out, &cfg)?;
    let resolved = cfg.resolved();
    let mut dataset = load_dataset(&cfg.dataset)?;
    if resolved.method.needs_masks() && dataset.samples().iter().any(|s| s.mask.is_none()) {
        dataset = binarize_dataset(dataset, cfg.binarize_threshold)?;
    }
    let ids = sample_per_class(
        &dataset,
        &SubsetSpec {
            size: resolved.subset,
            seed: cfg.seed,
        },
    )?;
    let subset = dataset.subset(&ids)?;
    let test = load_dataset(&test_spec(&cfg))?;
    let (h, w, c) = subset.spec.image_shape;
    let mut model = Model::build(
        resolved.method,
        &resolved.network,
        (h, w, c),
        subset.spec.num_classes,
        cfg.seed,
        format!("{}-{}", resolved.method.as_str(), cfg.hash().chars().take(8).collect::<String>()),
    )?;
    let mut train_cfg = resolved.train.clone();
    train_cfg.checkpoint_dir = Some(out.join("checkpoint"));
    train_cfg.resume = resume;
    let report = train(&mut model, &subset, Some(&test), &train_cfg)?;
    write_metric_log(&out.join("metrics.tsv"), &report.records)?;
    // thresholded masks are derived from the class label, so this pipeline
    // consumes no mask-annotation time
    let eval = evaluate_model(&model, &test, train_cfg.batch_size, subset.len(), 0)?;
    std::fs::write(
        out.join("report.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "format": RUN_FORMAT,
            "config_hash": cfg.hash(),
            "report": eval,
        }))?,
    )?;
    println!(
        "{}: accuracy {:.4} on {} test images",
        model.model_id(),
        eval.accuracy.unwrap_or(f64::NAN),
        eval.n_test
    );
    Ok(())
}

fn propagate_cmd(common: &CommonArgs, model_dir: &Path, keep_existing: bool) -> anyhow::Result<()> {
    let cfg = load_config(&common.config)?;
    let out = resolve_out_dir(&common.out_dir);
    let _lock = DirLock::acquire(&out)?;
    record_config(&out, &cfg)?;
    let (model, _) = Model::load_checkpoint(model_dir)?;
    let dataset = load_dataset(&cfg.dataset)?;
    let batch = cfg.resolved().train.batch_size;
    let (labelled, report) = propagate_labels(&model, dataset, batch, keep_existing)?;
    write_labelled_copy(&out, &labelled)?;
    std::fs::write(out.join("propagation.txt"), report.summary())?;
    print!("{}", report.summary());
    Ok(())
}

fn evaluate_cmd(
    common: &CommonArgs,
    model_dir: &Path,
    n_class_labeled: Option<usize>,
    n_seg_labeled: usize,
) -> anyhow::Result<()> {
    let cfg = load_config(&common.config)?;
    let out = resolve_out_dir(&common.out_dir);
    let _lock = DirLock::acquire(&out)?;
    record_config(&out, &cfg)?;
    let (model, _) = Model::load_checkpoint(model_dir)?;
    let test = load_dataset(&test_spec(&cfg))?;
    let resolved = cfg.resolved();
    let n_class = n_class_labeled.unwrap_or(match resolved.subset {
        SubsetSize::All => cfg.dataset.size,
        SubsetSize::PerClass(m) => m * cfg.dataset.num_classes,
    });
    let report = evaluate_model(
        &model,
        &test,
        resolved.train.batch_size,
        n_class,
        n_seg_labeled,
    )?;
    std::fs::write(
        out.join("report.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "format": RUN_FORMAT,
            "config_hash": cfg.hash(),
            "report": report,
        }))?,
    )?;
    println!(
        "{}: accuracy {:.4}{}",
        report.model_id,
        report.accuracy.unwrap_or(f64::NAN),
        report
            .mean_iou
            .map(|v| format!(", mean IoU {v:.4}"))
            .unwrap_or_default()
    );
    Ok(())
}

fn grid_cmd(
    common: &CommonArgs,
    methods: &[Method],
    sizes: &[SubsetSize],
    seeds: &[u64],
) -> anyhow::Result<()> {
    let cfg = load_config(&common.config)?;
    let out = resolve_out_dir(&common.out_dir);
    let _lock = DirLock::acquire(&out)?;
    record_config(&out, &cfg)?;
    let resolved = cfg.resolved();
    let mut dataset = load_dataset(&cfg.dataset)?;
    if methods.iter().any(|m| m.needs_masks())
        && dataset.samples().iter().any(|s| s.mask.is_none())
    {
        dataset = binarize_dataset(dataset, cfg.binarize_threshold)?;
    }
    let test = load_dataset(&test_spec(&cfg))?;
    let table = run_experiment_grid(
        &dataset,
        &test,
        &resolved.network,
        &resolved.train,
        methods,
        sizes,
        seeds,
        |cell, outcome| match outcome {
            Ok(acc) => println!(
                "{} m={:?} seed={}: accuracy {acc:.4}",
                cell.method.as_str(),
                cell.subset,
                cell.seed
            ),
            Err(msg) => println!(
                "{} m={:?} seed={}: failed: {msg}",
                cell.method.as_str(),
                cell.subset,
                cell.seed
            ),
        },
    )?;
    std::fs::write(out.join("results.tsv"), table.render())?;
    let mut means = String::from("method\tper_class\tmean_accuracy\n");
    for (method, subset, acc) in table.mean_over_seeds() {
        let m = match subset {
            SubsetSize::All => "all".to_string(),
            SubsetSize::PerClass(m) => m.to_string(),
        };
        means.push_str(&format!("{}\t{}\t{:.6}\n", method.as_str(), m, acc));
    }
    std::fs::write(out.join("means.tsv"), means)?;
    Ok(())
}

fn cost_report(
    common: &CommonArgs,
    results: &Path,
    rates: &str,
    n_seg_labeled: usize,
) -> anyhow::Result<()> {
    let cfg = load_config(&common.config)?;
    let out = resolve_out_dir(&common.out_dir);
    let _lock = DirLock::acquire(&out)?;
    record_config(&out, &cfg)?;
    let rates = match rates {
        "cifar10" => AnnotationRates::cifar10(),
        "cifar100" => AnnotationRates::cifar100(),
        other => bail!("unknown rate preset '{other}' (expected cifar10 or cifar100)"),
    };
    let text = std::fs::read_to_string(results)
        .with_context(|| format!("reading {}", results.display()))?;
    let table = ResultsTable::parse(&text)?;
    let resolved = cfg.resolved();
    let (h, w, c) = cfg.dataset.image_shape;
    let mut flops_cache: BTreeMap<&'static str, f64> = BTreeMap::new();
    let mut points = Vec::new();
    for (method, subset, acc) in table.mean_over_seeds() {
        let flops = match flops_cache.get(method.as_str()) {
            Some(&f) => f,
            None => {
                let model = Model::build(
                    method,
                    &resolved.network,
                    (h, w, c),
                    cfg.dataset.num_classes,
                    0,
                    "flops-probe",
                )?;
                let f = model_flops(&model.description)?;
                flops_cache.insert(method.as_str(), f);
                f
            }
        };
        let n_class = match subset {
            SubsetSize::All => cfg.dataset.size,
            SubsetSize::PerClass(m) => m * cfg.dataset.num_classes,
        };
        points.push(CostPoint {
            method: format!("{}-{:?}", method.as_str(), subset),
            n_class_labeled: n_class,
            n_seg_labeled: if method.has_seg_head() { n_seg_labeled } else { 0 },
            accuracy: acc,
            flops,
        });
    }
    let curve = segclass::emit_cost_curve(&rates, &points)?;
    std::fs::write(out.join("cost_curve.tsv"), &curve)?;
    print!("{curve}");
    Ok(())
}
