//! Parsers for the MNIST IDX and CIFAR binary formats.
//!
//! Class labels are stored 1-based: raw label `d` becomes class `d + 1`.
//! For MNIST this is exactly the shift that keeps digit zero distinct from
//! the background class in binarized masks.

use std::path::Path;

use crate::error::{Error, Result};

use super::{Dataset, DatasetSpec, ImageData, LabeledSample, Split};

fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingSource(path.to_path_buf()));
    }
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ])
}

pub(super) fn load_mnist(spec: &DatasetSpec, root: &Path, split: Split) -> Result<Dataset> {
    let (images_name, labels_name, tag) = match split {
        Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", "train"),
        Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", "test"),
    };
    let images = read_file(&root.join(images_name))?;
    let labels = read_file(&root.join(labels_name))?;
    if images.len() < 16 || be_u32(&images, 0) != 2051 {
        return Err(Error::Load(format!("{images_name}: not an IDX image file")));
    }
    if labels.len() < 8 || be_u32(&labels, 0) != 2049 {
        return Err(Error::Load(format!("{labels_name}: not an IDX label file")));
    }
    let n = be_u32(&images, 4) as usize;
    let h = be_u32(&images, 8) as usize;
    let w = be_u32(&images, 12) as usize;
    if be_u32(&labels, 4) as usize != n {
        return Err(Error::Load("image/label counts disagree".into()));
    }
    if images.len() != 16 + n * h * w {
        return Err(Error::Load("IDX image payload truncated".into()));
    }
    let samples = (0..n)
        .map(|i| {
            let start = 16 + i * h * w;
            let data = images[start..start + h * w]
                .iter()
                .map(|&b| b as f32 / 255.0)
                .collect();
            LabeledSample {
                id: format!("mnist-{tag}-{i:06}"),
                image: ImageData { c: 1, h, w, data },
                mask: None,
                label: labels[8 + i] as u32 + 1,
            }
        })
        .collect();
    Dataset::from_samples(spec.clone(), samples)
}

fn cifar_records(
    bytes: &[u8],
    record_len: usize,
    label_offset: usize,
    ids: &mut u32,
    tag: &str,
    samples: &mut Vec<LabeledSample>,
) -> Result<()> {
    if bytes.len() % record_len != 0 {
        return Err(Error::Load(format!(
            "CIFAR batch length {} is not a multiple of the {record_len}-byte record",
            bytes.len()
        )));
    }
    for record in bytes.chunks_exact(record_len) {
        let label = record[label_offset] as u32 + 1;
        let pixels = &record[label_offset + 1..];
        let data = pixels.iter().map(|&b| b as f32 / 255.0).collect();
        samples.push(LabeledSample {
            id: format!("cifar-{tag}-{:06}", *ids),
            image: ImageData {
                c: 3,
                h: 32,
                w: 32,
                data,
            },
            mask: None,
            label,
        });
        *ids += 1;
    }
    Ok(())
}

pub(super) fn load_cifar10(spec: &DatasetSpec, root: &Path, split: Split) -> Result<Dataset> {
    let files: Vec<String> = match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".into()],
    };
    let tag = match split {
        Split::Train => "train",
        Split::Test => "test",
    };
    let mut samples = Vec::new();
    let mut ids = 0;
    for file in files {
        let bytes = read_file(&root.join(file))?;
        cifar_records(&bytes, 3073, 0, &mut ids, tag, &mut samples)?;
    }
    Dataset::from_samples(spec.clone(), samples)
}

pub(super) fn load_cifar100(spec: &DatasetSpec, root: &Path, split: Split) -> Result<Dataset> {
    let (file, tag) = match split {
        Split::Train => ("train.bin", "train"),
        Split::Test => ("test.bin", "test"),
    };
    let bytes = read_file(&root.join(file))?;
    let mut samples = Vec::new();
    let mut ids = 0;
    // records are <coarse><fine><3072 pixels>; the fine label is used
    cifar_records(&bytes, 3074, 1, &mut ids, tag, &mut samples)?;
    Dataset::from_samples(spec.clone(), samples)
}
