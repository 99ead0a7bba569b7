//! Procedural near-binary glyph dataset.
//!
//! Each sample is a single glyph (disk, square, triangle, ...) drawn with a
//! randomized position, scale, rotation and stroke intensity on an exactly
//! zero background, so intensity binarization recovers the ground-truth mask.
//! Generation is a pure function of the sample index, which makes train/test
//! splits (disjoint index ranges) and re-loads fully deterministic.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::{Dataset, DatasetSpec, ImageData, LabeledSample, SegMask, Split};

const TEST_INDEX_OFFSET: u64 = 1_000_000;
const MAX_GLYPHS: usize = 10;

#[derive(Clone, Copy)]
enum Glyph {
    Disk,
    Square,
    Triangle,
    Ring,
    Cross,
    Diamond,
    HBars,
    VBars,
    Corner,
    Checker,
}

const GLYPHS: [Glyph; MAX_GLYPHS] = [
    Glyph::Disk,
    Glyph::Square,
    Glyph::Triangle,
    Glyph::Ring,
    Glyph::Cross,
    Glyph::Diamond,
    Glyph::HBars,
    Glyph::VBars,
    Glyph::Corner,
    Glyph::Checker,
];

impl Glyph {
    /// Membership test in glyph-local coordinates, roughly `[-1, 1]^2`.
    fn contains(&self, u: f64, v: f64) -> bool {
        match self {
            Glyph::Disk => u * u + v * v <= 0.64,
            Glyph::Square => u.abs().max(v.abs()) <= 0.72,
            Glyph::Triangle => v >= -0.7 && v <= 0.8 && u.abs() <= (0.8 - v) * 0.55,
            Glyph::Ring => {
                let r2 = u * u + v * v;
                (0.16..=0.64).contains(&r2)
            }
            Glyph::Cross => (u.abs() <= 0.28 || v.abs() <= 0.28) && u.abs().max(v.abs()) <= 0.85,
            Glyph::Diamond => u.abs() + v.abs() <= 0.92,
            Glyph::HBars => {
                u.abs() <= 0.8 && v.abs() <= 0.8 && (((v + 0.8) / 0.4) as usize) % 2 == 0
            }
            Glyph::VBars => {
                u.abs() <= 0.8 && v.abs() <= 0.8 && (((u + 0.8) / 0.4) as usize) % 2 == 0
            }
            Glyph::Corner => {
                u.abs().max(v.abs()) <= 0.8 && !(u > -0.15 && v < 0.15)
            }
            Glyph::Checker => {
                u.abs() <= 0.8
                    && v.abs() <= 0.8
                    && ((((u + 0.8) / 0.8) as usize) + (((v + 0.8) / 0.8) as usize)) % 2 == 0
            }
        }
    }
}

/// Generate sample `index` of a `num_classes`-way glyph dataset.
///
/// Labels cycle through the classes so every contiguous index range is
/// balanced. Foreground pixels get intensities in roughly `[0.3, 1.0]`,
/// background is exactly zero, and the returned mask labels foreground with
/// the 1-based class.
pub fn generate_synthetic_sample(
    index: u64,
    num_classes: usize,
    h: usize,
    w: usize,
    channels: usize,
) -> (ImageData, SegMask, u32) {
    assert!(num_classes >= 1 && num_classes <= MAX_GLYPHS);
    let label = (index % num_classes as u64) as u32 + 1;
    let glyph = GLYPHS[(label - 1) as usize];
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e_9a11_c0de ^ index.wrapping_mul(0x9e37_79b9));

    let min_dim = h.min(w) as f64;
    let cx = w as f64 / 2.0 + rng.gen_range(-0.16..0.16) * w as f64;
    let cy = h as f64 / 2.0 + rng.gen_range(-0.16..0.16) * h as f64;
    let scale = rng.gen_range(0.28..0.46) * min_dim;
    let theta = rng.gen_range(-0.35..0.35f64);
    let (sin_t, cos_t) = theta.sin_cos();
    let base_intensity = rng.gen_range(0.55..0.95f64);

    let mut image = ImageData::zeros(channels, h, w);
    let mut mask = SegMask::zeros(h, w, num_classes);
    let tint: Vec<f64> = (0..channels).map(|_| rng.gen_range(0.7..1.0)).collect();
    for y in 0..h {
        for x in 0..w {
            let dx = (x as f64 - cx) / scale;
            let dy = (y as f64 - cy) / scale;
            let u = cos_t * dx + sin_t * dy;
            let v = -sin_t * dx + cos_t * dy;
            if glyph.contains(u, v) {
                mask.set(y, x, label as u8);
                let noise = rng.gen_range(-0.18..0.18);
                let value = (base_intensity + noise).clamp(0.3, 1.0);
                for ch in 0..channels {
                    image.set(ch, y, x, (value * tint[ch]) as f32);
                }
            } else {
                // keep rng consumption independent of glyph coverage
                let _ = rng.gen_range(-0.18..0.18f64);
            }
        }
    }
    (image, mask, label)
}

pub(super) fn load_synthetic(spec: &DatasetSpec, split: Split) -> Result<Dataset> {
    let (h, w, c) = spec.image_shape;
    if spec.num_classes > MAX_GLYPHS {
        return Err(Error::validation(format!(
            "synthetic-shapes supports at most {MAX_GLYPHS} classes, got {}",
            spec.num_classes
        )));
    }
    let offset = match split {
        Split::Train => 0,
        Split::Test => TEST_INDEX_OFFSET,
    };
    let samples = (0..spec.size as u64)
        .map(|i| {
            let index = offset + i;
            let (image, mask, label) =
                generate_synthetic_sample(index, spec.num_classes, h, w, c);
            LabeledSample {
                id: format!("shape-{index:07}"),
                image,
                mask: Some(mask),
                label,
            }
        })
        .collect();
    Dataset::from_samples(spec.clone(), samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thirty_samples_balanced_over_three_classes() {
        let spec = DatasetSpec::synthetic_shapes(3, (16, 16), 30);
        let ds = load_synthetic(&spec, Split::Train).unwrap();
        assert_eq!(ds.len(), 30);
        for class in 1..=3u32 {
            assert_eq!(
                ds.samples().iter().filter(|s| s.label == class).count(),
                10
            );
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let (a_img, a_mask, a_label) = generate_synthetic_sample(42, 3, 16, 16, 1);
        let (b_img, b_mask, b_label) = generate_synthetic_sample(42, 3, 16, 16, 1);
        assert_eq!(a_img, b_img);
        assert_eq!(a_mask, b_mask);
        assert_eq!(a_label, b_label);
    }

    #[test]
    fn mask_agrees_with_strictly_positive_pixels() {
        for index in 0..20 {
            let (img, mask, label) = generate_synthetic_sample(index, 10, 28, 28, 1);
            for y in 0..28 {
                for x in 0..28 {
                    let fg = img.get(0, y, x) > 0.0;
                    assert_eq!(mask.get(y, x) != 0, fg);
                    if fg {
                        assert_eq!(mask.get(y, x) as u32, label);
                    }
                }
            }
            assert!(mask.foreground_count() > 0, "sample {index} is empty");
        }
    }

    #[test]
    fn train_and_test_splits_are_disjoint_content() {
        let spec = DatasetSpec::synthetic_shapes(3, (16, 16), 10);
        let train = load_synthetic(&spec, Split::Train).unwrap();
        let test = load_synthetic(&spec, Split::Test).unwrap();
        let train_ids: std::collections::BTreeSet<_> = train.ids().cloned().collect();
        assert!(test.ids().all(|id| !train_ids.contains(id)));
    }
}
