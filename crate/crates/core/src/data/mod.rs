//! Dataset ingestion, manifests, per-class subset sampling and augmentation.

mod augment;
mod builtin;
mod synthetic;

pub use augment::{augment, AugmentationPolicy, TransformDesc};
pub use synthetic::generate_synthetic_sample;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channels-first image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageData {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    /// CHW layout, length `c * h * w`.
    pub data: Vec<f32>,
}

impl ImageData {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        ImageData {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn get(&self, ch: usize, y: usize, x: usize) -> f32 {
        self.data[(ch * self.h + y) * self.w + x]
    }

    pub fn set(&mut self, ch: usize, y: usize, x: usize, v: f32) {
        self.data[(ch * self.h + y) * self.w + x] = v;
    }

    pub fn to_tensor(&self, device: &candle_core::Device) -> Result<candle_core::Tensor> {
        Ok(candle_core::Tensor::from_slice(
            &self.data,
            (self.c, self.h, self.w),
            device,
        )?)
    }
}

/// Integer segmentation map; 0 is background, classes are `1..=num_classes`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegMask {
    pub h: usize,
    pub w: usize,
    pub num_classes: usize,
    /// Row-major, length `h * w`.
    pub values: Vec<u8>,
}

impl SegMask {
    pub fn zeros(h: usize, w: usize, num_classes: usize) -> Self {
        SegMask {
            h,
            w,
            num_classes,
            values: vec![0; h * w],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.values[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.values[y * self.w + x] = v;
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.h * self.w {
            return Err(Error::validation("mask buffer does not match its shape"));
        }
        if let Some(v) = self.values.iter().find(|&&v| v as usize > self.num_classes) {
            return Err(Error::validation(format!(
                "mask value {v} exceeds class count {}",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Count of pixels carrying a non-background value.
    pub fn foreground_count(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0).count()
    }
}

/// The dataset triple: image, optional mask, 1-based class label.
#[derive(Clone, Debug)]
pub struct LabeledSample {
    pub id: String,
    pub image: ImageData,
    pub mask: Option<SegMask>,
    pub label: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    pub num_classes: usize,
    /// (H, W, C)
    pub image_shape: (usize, usize, usize),
    pub size: usize,
    /// Builtin identifier (`mnist`, `cifar10`, `cifar100`, `synthetic-shapes`),
    /// optionally with a root directory and a `#test` split suffix
    /// (`mnist:/data/mnist#test`), or a path to a manifest file.
    pub source: String,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w, c) = self.image_shape;
        if self.num_classes < 1 || h < 1 || w < 1 || c < 1 || self.size < 1 {
            return Err(Error::validation(format!(
                "dataset '{}' has degenerate dimensions (P={}, shape={}x{}x{}, N={})",
                self.name, self.num_classes, h, w, c, self.size
            )));
        }
        Ok(())
    }

    pub fn synthetic_shapes(num_classes: usize, hw: (usize, usize), size: usize) -> Self {
        DatasetSpec {
            name: "synthetic-shapes".into(),
            num_classes,
            image_shape: (hw.0, hw.1, 1),
            size,
            source: "synthetic-shapes".into(),
        }
    }
}

/// Immutable indexed sample collection, ordered by id.
#[derive(Debug)]
pub struct Dataset {
    pub spec: DatasetSpec,
    samples: Vec<LabeledSample>,
    by_id: BTreeMap<String, usize>,
}

impl Dataset {
    pub fn from_samples(spec: DatasetSpec, mut samples: Vec<LabeledSample>) -> Result<Self> {
        spec.validate()?;
        if samples.is_empty() {
            return Err(Error::validation(format!(
                "dataset '{}' resolved to zero samples",
                spec.name
            )));
        }
        samples.sort_by(|a, b| a.id.cmp(&b.id));
        let (h, w, c) = spec.image_shape;
        let mut by_id = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            if s.label < 1 || s.label as usize > spec.num_classes {
                return Err(Error::validation(format!(
                    "sample '{}' label {} outside 1..={}",
                    s.id, s.label, spec.num_classes
                )));
            }
            if (s.image.h, s.image.w, s.image.c) != (h, w, c) {
                return Err(Error::validation(format!(
                    "sample '{}' image shape {}x{}x{} does not match dataset {h}x{w}x{c}",
                    s.id, s.image.h, s.image.w, s.image.c
                )));
            }
            if let Some(m) = &s.mask {
                if (m.h, m.w) != (h, w) {
                    return Err(Error::validation(format!(
                        "sample '{}' mask shape {}x{} does not match dataset {h}x{w}",
                        s.id, m.h, m.w
                    )));
                }
                m.validate()?;
            }
            if by_id.insert(s.id.clone(), i).is_some() {
                return Err(Error::validation(format!("duplicate sample id '{}'", s.id)));
            }
        }
        Ok(Dataset {
            spec,
            samples,
            by_id,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[LabeledSample] {
        &self.samples
    }

    pub fn get(&self, id: &str) -> Option<&LabeledSample> {
        self.by_id.get(id).map(|&i| &self.samples[i])
    }

    pub fn ids(&self) -> impl Iterator<Item = &String> {
        self.samples.iter().map(|s| &s.id)
    }

    /// New dataset containing only the listed ids.
    pub fn subset(&self, ids: &[String]) -> Result<Dataset> {
        let mut samples = Vec::with_capacity(ids.len());
        for id in ids {
            let s = self
                .get(id)
                .ok_or_else(|| Error::validation(format!("unknown sample id '{id}'")))?;
            samples.push(s.clone());
        }
        let mut spec = self.spec.clone();
        spec.size = samples.len();
        Dataset::from_samples(spec, samples)
    }

    /// Replace masks by id; unknown ids are an error.
    pub fn with_masks(mut self, masks: &BTreeMap<String, SegMask>) -> Result<Self> {
        for (id, mask) in masks {
            let idx = *self
                .by_id
                .get(id)
                .ok_or_else(|| Error::validation(format!("mask for unknown sample id '{id}'")))?;
            mask.validate()?;
            self.samples[idx].mask = Some(mask.clone());
        }
        Ok(self)
    }
}

/// Samples-per-class selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubsetSize {
    All,
    PerClass(usize),
}

impl std::str::FromStr for SubsetSize {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(SubsetSize::All);
        }
        let m: usize = s
            .parse()
            .map_err(|_| Error::config(format!("invalid subset size '{s}'")))?;
        if m == 0 {
            return Err(Error::config("subset size must be >= 1 or 'all'"));
        }
        Ok(SubsetSize::PerClass(m))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetSpec {
    pub size: SubsetSize,
    pub seed: u64,
}

/// Draw `M` sample ids per class (all of them for [`SubsetSize::All`]),
/// deterministically for a given seed.
pub fn sample_per_class(dataset: &Dataset, subset: &SubsetSpec) -> Result<Vec<String>> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    let mut per_class: BTreeMap<u32, Vec<&str>> = BTreeMap::new();
    for s in dataset.samples() {
        per_class.entry(s.label).or_default().push(&s.id);
    }
    let mut out = Vec::new();
    match subset.size {
        SubsetSize::All => {
            for ids in per_class.values() {
                out.extend(ids.iter().map(|s| s.to_string()));
            }
        }
        SubsetSize::PerClass(m) => {
            for (class, ids) in &per_class {
                if ids.len() < m {
                    return Err(Error::validation(format!(
                        "class {class} has only {} samples, cannot draw {m} per class",
                        ids.len()
                    )));
                }
                let mut ids: Vec<&str> = ids.clone();
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(
                    subset.seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(*class as u64 + 1)),
                );
                ids.shuffle(&mut rng);
                out.extend(ids[..m].iter().map(|s| s.to_string()));
            }
        }
    }
    Ok(out)
}

/// One manifest record: `id<TAB>image_path<TAB>label<TAB>mask_path_or_dash`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub id: String,
    pub image_path: PathBuf,
    pub label: u32,
    pub mask_path: Option<PathBuf>,
}

pub fn parse_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::validation(format!(
                "{}:{}: expected 4 tab-separated fields, got {}",
                path.display(),
                lineno + 1,
                fields.len()
            )));
        }
        let label: u32 = fields[2].parse().map_err(|_| {
            Error::validation(format!(
                "{}:{}: label '{}' is not a positive integer",
                path.display(),
                lineno + 1,
                fields[2]
            ))
        })?;
        records.push(ManifestRecord {
            id: fields[0].to_string(),
            image_path: PathBuf::from(fields[1]),
            label,
            mask_path: if fields[3] == "-" {
                None
            } else {
                Some(PathBuf::from(fields[3]))
            },
        });
    }
    if records.is_empty() {
        return Err(Error::validation(format!(
            "manifest {} contains no records",
            path.display()
        )));
    }
    Ok(records)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        writeln!(
            out,
            "{}\t{}\t{}\t{}",
            r.id,
            r.image_path.display(),
            r.label,
            r.mask_path
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| "-".into()),
        )
        .expect("string write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Read a mask from a lossless single-channel 8-bit image where pixel value
/// is the class index.
pub fn read_mask(path: &Path, num_classes: usize) -> Result<SegMask> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mask = SegMask {
        h,
        w,
        num_classes,
        values: img.into_raw(),
    };
    mask.validate()?;
    Ok(mask)
}

pub fn write_mask(path: &Path, mask: &SegMask) -> Result<()> {
    let img = image::GrayImage::from_raw(mask.w as u32, mask.h as u32, mask.values.clone())
        .ok_or_else(|| Error::validation("mask buffer does not match its shape"))?;
    img.save(path)?;
    Ok(())
}

/// Write an image as lossless 8-bit PNG (grayscale or RGB).
pub fn write_image(path: &Path, image: &ImageData) -> Result<()> {
    let quant = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    match image.c {
        1 => {
            let raw: Vec<u8> = image.data.iter().map(|&v| quant(v)).collect();
            let img = image::GrayImage::from_raw(image.w as u32, image.h as u32, raw)
                .ok_or_else(|| Error::validation("image buffer does not match its shape"))?;
            img.save(path)?;
        }
        3 => {
            let mut raw = vec![0u8; image.h * image.w * 3];
            for y in 0..image.h {
                for x in 0..image.w {
                    for ch in 0..3 {
                        raw[(y * image.w + x) * 3 + ch] = quant(image.get(ch, y, x));
                    }
                }
            }
            let img = image::RgbImage::from_raw(image.w as u32, image.h as u32, raw)
                .ok_or_else(|| Error::validation("image buffer does not match its shape"))?;
            img.save(path)?;
        }
        other => {
            return Err(Error::validation(format!(
                "unsupported channel count {other} (expected 1 or 3)"
            )))
        }
    }
    Ok(())
}

fn read_image(path: &Path, channels: usize) -> Result<ImageData> {
    let img = image::open(path)?;
    match channels {
        1 => {
            let g = img.into_luma8();
            let (w, h) = (g.width() as usize, g.height() as usize);
            Ok(ImageData {
                c: 1,
                h,
                w,
                data: g.into_raw().iter().map(|&v| v as f32 / 255.0).collect(),
            })
        }
        3 => {
            let rgb = img.into_rgb8();
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            let raw = rgb.into_raw();
            let mut data = vec![0f32; 3 * h * w];
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..3 {
                        data[(ch * h + y) * w + x] = raw[(y * w + x) * 3 + ch] as f32 / 255.0;
                    }
                }
            }
            Ok(ImageData { c: 3, h, w, data })
        }
        other => Err(Error::validation(format!(
            "unsupported channel count {other} (expected 1 or 3)"
        ))),
    }
}

/// Which half of a builtin dataset to load.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Load a dataset from its source: builtin identifier or manifest path.
pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let (source, split) = match spec.source.strip_suffix("#test") {
        Some(rest) => (rest, Split::Test),
        None => (spec.source.as_str(), Split::Train),
    };
    let (kind, root) = match source.split_once(':') {
        Some((kind, root)) => (kind, Some(PathBuf::from(root))),
        None => (source, None),
    };
    match kind {
        "synthetic-shapes" => synthetic::load_synthetic(spec, split),
        "mnist" => builtin::load_mnist(spec, &require_root(kind, root)?, split),
        "cifar10" => builtin::load_cifar10(spec, &require_root(kind, root)?, split),
        "cifar100" => builtin::load_cifar100(spec, &require_root(kind, root)?, split),
        _ => load_from_manifest(spec, Path::new(source)),
    }
}

fn require_root(kind: &str, root: Option<PathBuf>) -> Result<PathBuf> {
    root.ok_or_else(|| {
        Error::config(format!(
            "builtin dataset '{kind}' needs a data directory, use '{kind}:<dir>'"
        ))
    })
}

fn load_from_manifest(spec: &DatasetSpec, path: &Path) -> Result<Dataset> {
    if !path.exists() {
        return Err(Error::MissingSource(path.to_path_buf()));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let records = parse_manifest(path)?;
    let (_, _, c) = spec.image_shape;
    let mut samples = Vec::with_capacity(records.len());
    for r in records {
        let image = read_image(&base.join(&r.image_path), c)?;
        let mask = r
            .mask_path
            .as_ref()
            .map(|p| read_mask(&base.join(p), spec.num_classes))
            .transpose()?;
        samples.push(LabeledSample {
            id: r.id,
            image,
            mask,
            label: r.label,
        });
    }
    Dataset::from_samples(spec.clone(), samples)
}
