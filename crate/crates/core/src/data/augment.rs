//! Paired image/mask augmentation.
//!
//! Geometric transforms are applied with identical parameters to the image
//! and (when present) the mask; photometric transforms touch the image only.
//! Masks are resampled with nearest-neighbor so values stay in `{0..P}`.
//! Exact flips and quarter-turn rotations use index permutations rather than
//! resampling, so they are lossless.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{ImageData, LabeledSample, SegMask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TransformDesc {
    /// Rotation by an angle uniform in `[-max_degrees, max_degrees]`; with
    /// `exact` the angle is exactly `max_degrees` (quarter turns are applied
    /// as index permutations).
    Rotate {
        max_degrees: f64,
        #[serde(default)]
        exact: bool,
    },
    ShiftZoom {
        max_shift_frac: f64,
        zoom_range: (f64, f64),
    },
    GaussianNoise {
        sigma: f64,
    },
    ColorDistort {
        strength: f64,
    },
    HorizontalFlip {
        prob: f64,
    },
    CropResize {
        scale_range: (f64, f64),
    },
}

impl TransformDesc {
    pub fn is_geometric(&self) -> bool {
        matches!(
            self,
            TransformDesc::Rotate { .. }
                | TransformDesc::ShiftZoom { .. }
                | TransformDesc::HorizontalFlip { .. }
                | TransformDesc::CropResize { .. }
        )
    }

    fn validate(&self) -> Result<()> {
        match self {
            TransformDesc::Rotate { max_degrees, .. } => {
                if !(0.0..=360.0).contains(max_degrees) {
                    return Err(Error::config(format!(
                        "rotate max_degrees must be in [0, 360], got {max_degrees}"
                    )));
                }
            }
            TransformDesc::ShiftZoom {
                max_shift_frac,
                zoom_range,
            } => {
                if !(0.0..=1.0).contains(max_shift_frac) {
                    return Err(Error::config(format!(
                        "shift_zoom max_shift_frac must be in [0, 1], got {max_shift_frac}"
                    )));
                }
                if zoom_range.0 <= 0.0 || zoom_range.0 > zoom_range.1 {
                    return Err(Error::config(format!(
                        "shift_zoom zoom_range must be a positive ascending pair, got {zoom_range:?}"
                    )));
                }
            }
            TransformDesc::GaussianNoise { sigma } => {
                if !(0.0..=1.0).contains(sigma) {
                    return Err(Error::config(format!(
                        "gaussian_noise sigma must be in [0, 1], got {sigma}"
                    )));
                }
            }
            TransformDesc::ColorDistort { strength } => {
                if !(0.0..=1.0).contains(strength) {
                    return Err(Error::config(format!(
                        "color_distort strength must be in [0, 1], got {strength}"
                    )));
                }
            }
            TransformDesc::HorizontalFlip { prob } => {
                if !(0.0..=1.0).contains(prob) {
                    return Err(Error::config(format!(
                        "horizontal_flip prob must be in [0, 1], got {prob}"
                    )));
                }
            }
            TransformDesc::CropResize { scale_range } => {
                if scale_range.0 <= 0.0 || scale_range.0 > scale_range.1 || scale_range.1 > 1.0 {
                    return Err(Error::config(format!(
                        "crop_resize scale_range must satisfy 0 < lo <= hi <= 1, got {scale_range:?}"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AugmentationPolicy {
    pub transforms: Vec<TransformDesc>,
}

impl AugmentationPolicy {
    pub fn empty() -> Self {
        AugmentationPolicy { transforms: vec![] }
    }

    pub fn validate(&self) -> Result<()> {
        self.transforms.iter().try_for_each(|t| t.validate())
    }
}

/// Inverse affine map from output pixel coordinates to input coordinates:
/// `in = a * out + b` per axis pair.
#[derive(Clone, Copy, Debug)]
struct InverseAffine {
    // in_x = m00 * out_x + m01 * out_y + m02
    m: [f64; 6],
}

impl InverseAffine {
    fn apply(&self, out_x: f64, out_y: f64) -> (f64, f64) {
        (
            self.m[0] * out_x + self.m[1] * out_y + self.m[2],
            self.m[3] * out_x + self.m[4] * out_y + self.m[5],
        )
    }
}

fn warp_image(image: &ImageData, inv: InverseAffine) -> ImageData {
    let mut out = ImageData::zeros(image.c, image.h, image.w);
    for y in 0..image.h {
        for x in 0..image.w {
            let (sx, sy) = inv.apply(x as f64, y as f64);
            if sx < -0.5 || sy < -0.5 || sx > image.w as f64 - 0.5 || sy > image.h as f64 - 0.5 {
                continue;
            }
            let x0 = sx.floor();
            let y0 = sy.floor();
            let tx = sx - x0;
            let ty = sy - y0;
            for ch in 0..image.c {
                let sample_ch = |yy: f64, xx: f64| -> f64 {
                    if yy < 0.0 || xx < 0.0 || yy >= image.h as f64 || xx >= image.w as f64 {
                        0.0
                    } else {
                        image.get(ch, yy as usize, xx as usize) as f64
                    }
                };
                let v = sample_ch(y0, x0) * (1.0 - tx) * (1.0 - ty)
                    + sample_ch(y0, x0 + 1.0) * tx * (1.0 - ty)
                    + sample_ch(y0 + 1.0, x0) * (1.0 - tx) * ty
                    + sample_ch(y0 + 1.0, x0 + 1.0) * tx * ty;
                out.set(ch, y, x, v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    out
}

fn warp_mask(mask: &SegMask, inv: InverseAffine) -> SegMask {
    let mut out = SegMask::zeros(mask.h, mask.w, mask.num_classes);
    for y in 0..mask.h {
        for x in 0..mask.w {
            let (sx, sy) = inv.apply(x as f64, y as f64);
            let nx = sx.round();
            let ny = sy.round();
            if nx < 0.0 || ny < 0.0 || nx >= mask.w as f64 || ny >= mask.h as f64 {
                continue;
            }
            out.set(y, x, mask.get(ny as usize, nx as usize));
        }
    }
    out
}

fn flip_image(image: &ImageData) -> ImageData {
    let mut out = image.clone();
    for ch in 0..image.c {
        for y in 0..image.h {
            for x in 0..image.w {
                out.set(ch, y, x, image.get(ch, y, image.w - 1 - x));
            }
        }
    }
    out
}

fn flip_mask(mask: &SegMask) -> SegMask {
    let mut out = mask.clone();
    for y in 0..mask.h {
        for x in 0..mask.w {
            out.set(y, x, mask.get(y, mask.w - 1 - x));
        }
    }
    out
}

/// Counterclockwise quarter turns: `out[i][j] = in[j][n - 1 - i]`.
fn rot90_indices(h: usize, w: usize, quarters: u32, y: usize, x: usize) -> (usize, usize) {
    let mut y = y;
    let mut x = x;
    for _ in 0..quarters % 4 {
        let (ny, nx) = (x, h - 1 - y);
        y = ny;
        x = nx;
        debug_assert_eq!(h, w);
    }
    (y, x)
}

fn rot90_image(image: &ImageData, quarters: u32) -> ImageData {
    let mut out = ImageData::zeros(image.c, image.h, image.w);
    for ch in 0..image.c {
        for y in 0..image.h {
            for x in 0..image.w {
                let (sy, sx) = rot90_indices(image.h, image.w, quarters, y, x);
                out.set(ch, y, x, image.get(ch, sy, sx));
            }
        }
    }
    out
}

fn rot90_mask(mask: &SegMask, quarters: u32) -> SegMask {
    let mut out = SegMask::zeros(mask.h, mask.w, mask.num_classes);
    for y in 0..mask.h {
        for x in 0..mask.w {
            let (sy, sx) = rot90_indices(mask.h, mask.w, quarters, y, x);
            out.set(y, x, mask.get(sy, sx));
        }
    }
    out
}

fn rotation_inverse(h: usize, w: usize, degrees: f64) -> InverseAffine {
    let theta = degrees.to_radians();
    let (s, c) = theta.sin_cos();
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    // inverse rotation about the image center
    InverseAffine {
        m: [
            c,
            s,
            cx - c * cx - s * cy,
            -s,
            c,
            cy + s * cx - c * cy,
        ],
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Apply `policy` to a sample. Pure in `(sample, policy, seed)`.
pub fn augment(
    sample: &LabeledSample,
    policy: &AugmentationPolicy,
    seed: u64,
) -> Result<LabeledSample> {
    policy.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut image = sample.image.clone();
    let mut mask = sample.mask.clone();

    for transform in &policy.transforms {
        match transform {
            TransformDesc::Rotate { max_degrees, exact } => {
                let degrees = if *exact {
                    *max_degrees
                } else {
                    rng.gen_range(-max_degrees..=*max_degrees)
                };
                if *exact && degrees.rem_euclid(90.0) == 0.0 {
                    if image.h != image.w {
                        return Err(Error::config(
                            "exact quarter-turn rotation requires square images",
                        ));
                    }
                    let quarters = (degrees.rem_euclid(360.0) / 90.0) as u32;
                    image = rot90_image(&image, quarters);
                    mask = mask.map(|m| rot90_mask(&m, quarters));
                } else {
                    let inv = rotation_inverse(image.h, image.w, degrees);
                    image = warp_image(&image, inv);
                    mask = mask.map(|m| warp_mask(&m, inv));
                }
            }
            TransformDesc::ShiftZoom {
                max_shift_frac,
                zoom_range,
            } => {
                let zoom = rng.gen_range(zoom_range.0..=zoom_range.1);
                let dx = rng.gen_range(-max_shift_frac..=*max_shift_frac) * image.w as f64;
                let dy = rng.gen_range(-max_shift_frac..=*max_shift_frac) * image.h as f64;
                let cx = (image.w as f64 - 1.0) / 2.0;
                let cy = (image.h as f64 - 1.0) / 2.0;
                // out = zoom * (in - c) + c + shift  =>  in = (out - c - shift) / zoom + c
                let inv = InverseAffine {
                    m: [
                        1.0 / zoom,
                        0.0,
                        cx - (cx + dx) / zoom,
                        0.0,
                        1.0 / zoom,
                        cy - (cy + dy) / zoom,
                    ],
                };
                image = warp_image(&image, inv);
                mask = mask.map(|m| warp_mask(&m, inv));
            }
            TransformDesc::GaussianNoise { sigma } => {
                for v in image.data.iter_mut() {
                    *v = (*v as f64 + gaussian(&mut rng) * sigma).clamp(0.0, 1.0) as f32;
                }
            }
            TransformDesc::ColorDistort { strength } => {
                let brightness = 1.0 + rng.gen_range(-0.5..0.5) * strength;
                let contrast = 1.0 + rng.gen_range(-0.5..0.5) * strength;
                let gains: Vec<f64> = (0..image.c)
                    .map(|_| {
                        if image.c > 1 {
                            1.0 + rng.gen_range(-0.3..0.3) * strength
                        } else {
                            1.0
                        }
                    })
                    .collect();
                for ch in 0..image.c {
                    for y in 0..image.h {
                        for x in 0..image.w {
                            let v = image.get(ch, y, x) as f64;
                            let v = ((v * brightness * gains[ch]) - 0.5) * contrast + 0.5;
                            image.set(ch, y, x, v.clamp(0.0, 1.0) as f32);
                        }
                    }
                }
            }
            TransformDesc::HorizontalFlip { prob } => {
                if rng.gen_range(0.0..1.0) < *prob {
                    image = flip_image(&image);
                    mask = mask.map(|m| flip_mask(&m));
                }
            }
            TransformDesc::CropResize { scale_range } => {
                let area = rng.gen_range(scale_range.0..=scale_range.1);
                let frac = area.sqrt();
                let crop_h = (image.h as f64 * frac).max(1.0);
                let crop_w = (image.w as f64 * frac).max(1.0);
                let top = rng.gen_range(0.0..=(image.h as f64 - crop_h));
                let left = rng.gen_range(0.0..=(image.w as f64 - crop_w));
                // output spans the crop window, resized back to full size
                let sx = crop_w / image.w as f64;
                let sy = crop_h / image.h as f64;
                let inv = InverseAffine {
                    m: [sx, 0.0, left, 0.0, sy, top],
                };
                image = warp_image(&image, inv);
                mask = mask.map(|m| warp_mask(&m, inv));
            }
        }
    }

    Ok(LabeledSample {
        id: sample.id.clone(),
        image,
        mask,
        label: sample.label,
    })
}
