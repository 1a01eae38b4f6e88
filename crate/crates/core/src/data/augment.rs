use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma, Rgb};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use weedsense_tensor::Tensor;

use super::Sample;
use crate::error::{Error, Result};

type RgbF = ImageBuffer<Rgb<f32>, Vec<f32>>;
type Mask = ImageBuffer<Luma<u8>, Vec<u8>>;

/// Random rescale, crop or pad to a fixed size, and horizontal flip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugConfig {
    pub crop_scale_range: [f64; 2],
    pub hflip_prob: f64,
    /// `(height, width)`.
    pub target_size: (usize, usize),
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig {
            crop_scale_range: [0.5, 2.0],
            hflip_prob: 0.5,
            target_size: (512, 512),
        }
    }
}

impl AugConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.crop_scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::config(format!("scale range {lo}..{hi} must be positive and ordered")));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::config(format!("flip probability {} outside [0, 1]", self.hflip_prob)));
        }
        let (h, w) = self.target_size;
        if h == 0 || w == 0 {
            return Err(Error::config("target size must be positive"));
        }
        Ok(())
    }
}

fn to_rgb(t: &Tensor<f32>) -> RgbF {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let d = t.data();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([d[i], d[h * w + i], d[2 * h * w + i]])
    })
}

fn from_rgb(img: &RgbF) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    Tensor::from_fn([3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        img.get_pixel((p % w) as u32, (p / w) as u32)[c].clamp(0.0, 1.0)
    })
}

/// Places `src` into a `th x tw` canvas at offset `(oy, ox)`; negative offsets crop.
fn place<P: image::Pixel>(src: &ImageBuffer<P, Vec<P::Subpixel>>, th: u32, tw: u32, oy: i64, ox: i64, fill: P) -> ImageBuffer<P, Vec<P::Subpixel>> {
    ImageBuffer::from_fn(tw, th, |x, y| {
        let (sx, sy) = (x as i64 - ox, y as i64 - oy);
        if sx >= 0 && sy >= 0 && (sx as u32) < src.width() && (sy as u32) < src.height() {
            *src.get_pixel(sx as u32, sy as u32)
        } else {
            fill
        }
    })
}

/// Image resized bilinearly and mask by nearest neighbour with the same geometry.
/// Heights and weeks are unchanged.
pub fn augment(sample: &Sample, cfg: &AugConfig, seed: u64) -> Result<Sample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = sample.hw();
    let [lo, hi] = cfg.crop_scale_range;
    let s = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let nh = ((h as f64 * s).round() as u32).max(1);
    let nw = ((w as f64 * s).round() as u32).max(1);
    let img = imageops::resize(&to_rgb(&sample.image), nw, nh, FilterType::Triangle);
    let mask = Mask::from_raw(w as u32, h as u32, sample.mask.clone())
        .ok_or_else(|| Error::data(&sample.id, "mask size does not match image"))?;
    let mask = imageops::resize(&mask, nw, nh, FilterType::Nearest);

    let (th, tw) = (cfg.target_size.0 as u32, cfg.target_size.1 as u32);
    let mut offset = |target: u32, size: u32| -> i64 {
        if size >= target {
            -(rng.gen_range(0..=size - target) as i64)
        } else {
            rng.gen_range(0..=target - size) as i64
        }
    };
    let oy = offset(th, nh);
    let ox = offset(tw, nw);
    let mut img = place(&img, th, tw, oy, ox, Rgb([0.0; 3]));
    let mut mask = place(&mask, th, tw, oy, ox, Luma([0]));
    if rng.gen_bool(cfg.hflip_prob) {
        imageops::flip_horizontal_in_place(&mut img);
        imageops::flip_horizontal_in_place(&mut mask);
    }
    Ok(Sample {
        image: from_rgb(&img),
        mask: mask.into_raw(),
        ..sample.clone()
    })
}

/// Mirror image and mask left to right.
pub fn hflip(sample: &Sample) -> Sample {
    let (h, w) = sample.hw();
    let image = Tensor::from_fn([3, h, w], |i| {
        let (row, x) = (i / w, i % w);
        sample.image.data()[row * w + (w - 1 - x)]
    });
    let mask = (0..h * w).map(|i| sample.mask[(i / w) * w + (w - 1 - i % w)]).collect();
    Sample {
        image,
        mask,
        ..sample.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn sample() -> Sample {
        let (h, w) = (20, 24);
        Sample {
            id: "a".into(),
            image: Tensor::from_fn([3, h, w], |i| ((i * 7) % 11) as f32 / 10.0),
            mask: (0..h * w).map(|i| if (i / w) > 8 && i % w < 10 { 5 } else { 0 }).collect(),
            height_cm: 12.0,
            week: 3,
            species_id: 5,
        }
    }

    fn cfg() -> AugConfig {
        AugConfig {
            target_size: (32, 32),
            ..AugConfig::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let s = sample();
        assert_eq!(augment(&s, &cfg(), 9).unwrap(), augment(&s, &cfg(), 9).unwrap());
    }

    #[test]
    fn keeps_labels_and_targets() {
        let s = sample();
        for seed in 0..20 {
            let a = augment(&s, &cfg(), seed).unwrap();
            assert_eq!(a.hw(), (32, 32));
            let before: BTreeSet<u8> = s.mask.iter().copied().collect();
            assert!(a.mask.iter().all(|l| before.contains(l)));
            assert_eq!((a.height_cm, a.week, a.species_id), (12.0, 3, 5));
            a.validate().unwrap();
        }
    }

    #[test]
    fn flip_is_an_involution() {
        let s = sample();
        assert_ne!(hflip(&s), s);
        assert_eq!(hflip(&hflip(&s)), s);
    }

    #[test]
    fn unit_scale_without_flip_is_identity_at_same_size() {
        let s = sample();
        let c = AugConfig {
            crop_scale_range: [1.0, 1.0],
            hflip_prob: 0.0,
            target_size: (20, 24),
        };
        let a = augment(&s, &c, 3).unwrap();
        assert_eq!(a.mask, s.mask);
        for (x, y) in a.image.data().iter().zip(s.image.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}
