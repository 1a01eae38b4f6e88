use serde::{Deserialize, Serialize};
use weedsense_tensor::Tensor;

use crate::error::{Error, Result};

pub const NUM_SPECIES: usize = 16;
pub const MAX_WEEK: u32 = 11;
pub const MAX_HEIGHT_CM: f64 = 200.0;

/// One annotated plant image.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[3, H, W]`, RGB in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `H * W` class indices, 0 is background.
    pub mask: Vec<u8>,
    pub height_cm: f64,
    /// 1..=11.
    pub week: u32,
    /// 1..=16.
    pub species_id: usize,
}

impl Sample {
    pub fn hw(&self) -> (usize, usize) {
        let s = self.image.shape();
        (s[1], s[2])
    }

    /// Checks every field invariant, including each mask pixel.
    pub fn validate(&self) -> Result<()> {
        let fail = |d: String| Err(Error::data(&self.id, d));
        let s = self.image.shape();
        if s.len() != 3 || s[0] != 3 {
            return fail(format!("image must be [3, H, W], got {s:?}"));
        }
        if self.mask.len() != s[1] * s[2] {
            return fail(format!("mask has {} pixels, image has {}", self.mask.len(), s[1] * s[2]));
        }
        if !(1..=MAX_WEEK).contains(&self.week) {
            return fail(format!("week {} outside 1..={MAX_WEEK}", self.week));
        }
        if !(1..=NUM_SPECIES).contains(&self.species_id) {
            return fail(format!("species id {} outside 1..={NUM_SPECIES}", self.species_id));
        }
        if !(0.0..=MAX_HEIGHT_CM).contains(&self.height_cm) {
            return fail(format!("height {} cm outside 0..={MAX_HEIGHT_CM}", self.height_cm));
        }
        if let Some(&l) = self.mask.iter().find(|&&l| l != 0 && l as usize != self.species_id) {
            return fail(format!("mask label {l} is neither background nor species {}", self.species_id));
        }
        if self.image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return fail("image values outside [0, 1]".into());
        }
        Ok(())
    }

    /// Week label as a class index.
    pub fn week_class(&self) -> usize {
        self.week as usize - 1
    }
}

/// Per-channel affine normalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalization {
    pub const IMAGENET: Normalization = Normalization {
        mean: [0.485, 0.456, 0.406],
        std: [0.229, 0.224, 0.225],
    };

    pub const IDENTITY: Normalization = Normalization {
        mean: [0.0; 3],
        std: [1.0; 3],
    };

    fn check(&self, image: &Tensor<f32>) -> Result<usize> {
        if self.std.iter().any(|&s| s == 0.0 || !s.is_finite()) {
            return Err(Error::config(format!("normalization std {:?} must be non-zero", self.std)));
        }
        let s = image.shape();
        if s.len() < 3 || s[s.len() - 3] != 3 {
            return Err(Error::config(format!("normalization needs 3 channels, got shape {s:?}")));
        }
        Ok(s[s.len() - 2] * s[s.len() - 1])
    }

    /// `(x - mean) / std` per channel of a `[..., 3, H, W]` tensor.
    pub fn normalize(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        let plane = self.check(image)?;
        let mut out = image.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = (i / plane) % 3;
            *v = ((*v as f64 - self.mean[c]) / self.std[c]) as f32;
        }
        Ok(out)
    }

    pub fn denormalize(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        let plane = self.check(image)?;
        let mut out = image.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = (i / plane) % 3;
            *v = (*v as f64 * self.std[c] + self.mean[c]) as f32;
        }
        Ok(out)
    }
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization::IMAGENET
    }
}

/// Stacked, normalized inputs and targets of several samples.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    /// `[N, 3, H, W]`.
    pub images: Tensor<f32>,
    /// `N * H * W` class indices.
    pub masks: Vec<usize>,
    pub heights: Vec<f64>,
    /// Week class indices (week - 1).
    pub weeks: Vec<usize>,
}

impl Batch {
    pub fn new(samples: &[&Sample], norm: &Normalization) -> Result<Batch> {
        let first = samples.first().ok_or_else(|| Error::config("empty batch"))?;
        let (h, w) = first.hw();
        let mut data = Vec::with_capacity(samples.len() * 3 * h * w);
        let mut masks = Vec::with_capacity(samples.len() * h * w);
        for s in samples {
            if s.hw() != (h, w) {
                return Err(Error::data(&s.id, format!("size {:?} differs from batch size {:?}", s.hw(), (h, w))));
            }
            data.extend_from_slice(s.image.data());
            masks.extend(s.mask.iter().map(|&l| l as usize));
        }
        let images = norm.normalize(&Tensor::new([samples.len(), 3, h, w], data)?)?;
        Ok(Batch {
            ids: samples.iter().map(|s| s.id.clone()).collect(),
            images,
            masks,
            heights: samples.iter().map(|s| s.height_cm).collect(),
            weeks: samples.iter().map(|s| s.week as usize - 1).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn pixels_per_sample(&self) -> usize {
        self.masks.len() / self.len().max(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn image(v: Vec<f32>) -> Tensor<f32> {
        let n = v.len() / 3;
        Tensor::new([3, 1, n], v).unwrap()
    }

    #[test]
    fn identity_normalization() {
        let x = image(vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        assert_eq!(Normalization::IDENTITY.normalize(&x).unwrap(), x);
    }

    #[test]
    fn image_at_mean_normalizes_to_zero() {
        let m = Normalization::IMAGENET.mean;
        let x = image(vec![m[0] as f32, m[1] as f32, m[2] as f32]);
        let y = Normalization::IMAGENET.normalize(&x).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn zero_std_is_a_config_error() {
        let n = Normalization {
            mean: [0.0; 3],
            std: [1.0, 0.0, 1.0],
        };
        let e = n.normalize(&image(vec![0.0; 3])).unwrap_err();
        assert_eq!(e.category(), "config");
    }

    proptest! {
        #[test]
        fn normalize_round_trips(v in prop::collection::vec(0.0f32..1.0, 12)) {
            let x = image(v);
            let n = Normalization::IMAGENET;
            let back = n.denormalize(&n.normalize(&x).unwrap()).unwrap();
            for (a, b) in back.data().iter().zip(x.data()) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }
    }
}
