//! Training-time augmentation: zero padding, random crop, horizontal flip.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CropMode {
    /// Any offset in the padded image.
    #[default]
    Uniform,
    /// One of the four corner offsets only.
    Corners,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub pad: usize,
    pub crop: CropMode,
    /// Horizontal flip with probability 1/2; `None` defers to the dataset
    /// default (see [`crate::data::DatasetKind::default_flip`]) and means no
    /// flip when used directly.
    pub flip: Option<bool>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            pad: 4,
            crop: CropMode::Uniform,
            flip: None,
        }
    }
}

impl AugmentConfig {
    /// Fills an unset `flip` with `default`.
    pub fn with_default_flip(mut self, default: bool) -> Self {
        self.flip.get_or_insert(default);
        self
    }
}

/// Crops an `H × W` window at `(dy, dx)` from `image` zero-padded by `pad`
/// on every side, mirroring the result horizontally if `flip`. `image` and
/// `out` hold one `C × H × W` image each.
pub fn augment_image_with<T: Element>(
    image: &[T],
    out: &mut [T],
    shape: [usize; 3],
    pad: usize,
    dy: usize,
    dx: usize,
    flip: bool,
) {
    let [c, h, w] = shape;
    debug_assert!(dy <= 2 * pad && dx <= 2 * pad);
    for ch in 0..c {
        let src = &image[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            let sy = (y + dy).wrapping_sub(pad);
            for x in 0..w {
                let xo = if flip { w - 1 - x } else { x };
                let sx = (xo + dx).wrapping_sub(pad);
                dst[y * w + x] = if sy < h && sx < w { src[sy * w + sx] } else { T::zero() };
            }
        }
    }
}

/// Applies a fresh random crop (and flip, if enabled) to every image of a
/// `[B, C, H, W]` batch. Draw order per image: crop offsets, then flip.
pub fn augment<T: Element>(batch: &Tensor<T>, cfg: &AugmentConfig, rng: &mut RngStream) -> Result<Tensor<T>> {
    let &[b, c, h, w] = batch.shape() else {
        return Err(Error::shape("augment", batch.shape(), &[0, 0, 0, 0]));
    };
    let per = c * h * w;
    let mut out = vec![T::zero(); b * per];
    let span = 2 * cfg.pad;
    for (src, dst) in batch.data().chunks_exact(per.max(1)).zip(out.chunks_exact_mut(per.max(1))) {
        let (dy, dx) = match cfg.crop {
            CropMode::Uniform => (
                rng.below(span as u64 + 1) as usize,
                rng.below(span as u64 + 1) as usize,
            ),
            CropMode::Corners => {
                let k = rng.below(4);
                (span * (k as usize / 2), span * (k as usize % 2))
            }
        };
        let flip = cfg.flip.unwrap_or(false) && rng.bernoulli(0.5);
        augment_image_with(src, dst, [c, h, w], cfg.pad, dy, dx, flip);
    }
    Tensor::new(batch.shape(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamId;

    fn ramp(c: usize, h: usize, w: usize) -> Vec<f64> {
        (0..c * h * w).map(|i| (i + 1) as f64).collect()
    }

    #[test]
    fn centered_crop_is_identity() {
        let img = ramp(2, 6, 5);
        let mut out = vec![0.0; img.len()];
        augment_image_with(&img, &mut out, [2, 6, 5], 4, 4, 4, false);
        assert_eq!(out, img);
    }

    #[test]
    fn top_left_crop_shifts_in_padding() {
        let (h, w) = (10, 9);
        let img = ramp(1, h, w);
        let mut out = vec![-1.0; img.len()];
        augment_image_with(&img, &mut out, [1, h, w], 4, 0, 0, false);
        for y in 0..h {
            for x in 0..w {
                let want = if y < 4 || x < 4 { 0.0 } else { img[(y - 4) * w + (x - 4)] };
                assert_eq!(out[y * w + x], want, "({y},{x})");
            }
        }
        // Bottom-right output corner comes from the original's interior.
        assert_eq!(out[h * w - 1], img[(h - 5) * w + (w - 5)]);
    }

    #[test]
    fn flip_mirrors_columns() {
        let img = ramp(1, 2, 3);
        let mut out = vec![0.0; 6];
        augment_image_with(&img, &mut out, [1, 2, 3], 4, 4, 4, true);
        assert_eq!(out, vec![3.0, 2.0, 1.0, 6.0, 5.0, 4.0]);
    }

    #[test]
    fn shape_and_range_preserved() {
        let mut rng = RngStream::new(1, StreamId::Augment);
        let data: Vec<f32> = (0..3 * 2 * 7 * 7).map(|_| rng.uniform() as f32).collect();
        let batch = Tensor::new(&[3, 2, 7, 7], data).unwrap();
        for crop in [CropMode::Uniform, CropMode::Corners] {
            let cfg = AugmentConfig { crop, flip: Some(true), ..Default::default() };
            let out = augment(&batch, &cfg, &mut rng).unwrap();
            assert_eq!(out.shape(), batch.shape());
            assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        assert!(augment(&Tensor::<f32>::zeros(&[3, 4]), &AugmentConfig::default(), &mut rng).is_err());
    }

    #[test]
    fn corners_mode_only_uses_corner_offsets() {
        // A single bright pixel in the center of a 9x9 image lands at one of
        // four positions after a corner crop.
        let mut img = vec![0.0f64; 81];
        img[4 * 9 + 4] = 1.0;
        let batch = Tensor::new(&[1, 1, 9, 9], img).unwrap();
        let cfg = AugmentConfig { crop: CropMode::Corners, ..Default::default() };
        let mut rng = RngStream::new(5, StreamId::Augment);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..64 {
            let out = augment(&batch, &cfg, &mut rng).unwrap();
            seen.insert(out.data().iter().position(|&v| v == 1.0));
        }
        let expected: std::collections::BTreeSet<_> =
            [(8, 8), (8, 0), (0, 8), (0, 0)].iter().map(|&(y, x)| Some(y * 9 + x)).collect();
        assert_eq!(seen, expected);
    }
}
