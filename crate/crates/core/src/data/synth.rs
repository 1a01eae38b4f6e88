//! Procedural plant images with exact masks and growth labels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use weedsense_tensor::Tensor;

use super::sample::{Sample, MAX_WEEK, NUM_SPECIES};
use crate::error::{Error, Result};
use crate::seeds::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Species {
    pub code: &'static str,
    pub growth_cm_per_week: f64,
}

/// Class `i + 1` of the segmentation output.
pub const SPECIES: [Species; NUM_SPECIES] = [
    Species { code: "AMATU", growth_cm_per_week: 13.72 },
    Species { code: "SORHA", growth_cm_per_week: 14.06 },
    Species { code: "SETFA", growth_cm_per_week: 11.75 },
    Species { code: "SORVU", growth_cm_per_week: 9.84 },
    Species { code: "PANDI", growth_cm_per_week: 8.40 },
    Species { code: "SETPU", growth_cm_per_week: 8.20 },
    Species { code: "DIGSA", growth_cm_per_week: 7.53 },
    Species { code: "ECHCG", growth_cm_per_week: 7.38 },
    Species { code: "SIDSP", growth_cm_per_week: 6.77 },
    Species { code: "AMARE", growth_cm_per_week: 6.86 },
    Species { code: "ABUTH", growth_cm_per_week: 6.32 },
    Species { code: "AMBEL", growth_cm_per_week: 6.19 },
    Species { code: "AMAPA", growth_cm_per_week: 5.66 },
    Species { code: "CYPES", growth_cm_per_week: 5.42 },
    Species { code: "CHEAL", growth_cm_per_week: 2.86 },
    Species { code: "ERICA", growth_cm_per_week: 1.70 },
];

/// `background` followed by the species codes.
pub fn class_names() -> Vec<String> {
    std::iter::once("background".to_string())
        .chain(SPECIES.iter().map(|s| s.code.to_string()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    /// Species ids (1-based) to generate.
    pub species: Vec<usize>,
    pub weeks: Vec<u32>,
    /// `(height, width)`.
    pub image_size: (usize, usize),
    pub px_per_cm: f64,
    /// Relative height jitter: `h = rate * week * (1 + noise * u)`, `u` uniform in [-1, 1].
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            species: (1..=NUM_SPECIES).collect(),
            weeks: (1..=MAX_WEEK).collect(),
            image_size: (128, 128),
            px_per_cm: 0.6,
            noise: 0.05,
            seed: 0,
        }
    }
}

const BASE_MARGIN: usize = 3;

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::config(format!("image size {h}x{w} must be a positive multiple of 32")));
        }
        if self.species.is_empty() || self.weeks.is_empty() {
            return Err(Error::config("need at least one species and one week"));
        }
        if let Some(s) = self.species.iter().find(|&&s| !(1..=NUM_SPECIES).contains(&s)) {
            return Err(Error::config(format!("species id {s} outside 1..={NUM_SPECIES}")));
        }
        if let Some(wk) = self.weeks.iter().find(|&&wk| !(1..=MAX_WEEK).contains(&wk)) {
            return Err(Error::config(format!("week {wk} outside 1..={MAX_WEEK}")));
        }
        if !(self.px_per_cm > 0.0) || !(0.0..1.0).contains(&self.noise) {
            return Err(Error::config("px_per_cm must be positive and noise in [0, 1)"));
        }
        Ok(())
    }

    /// Plant height for one draw `u` in [-1, 1].
    pub fn height_cm(&self, species: usize, week: u32, u: f64) -> f64 {
        SPECIES[species - 1].growth_cm_per_week * week as f64 * (1.0 + self.noise * u)
    }

    /// The `i`-th cell of a deterministic walk over species and weeks that spreads
    /// consecutive samples over different weeks.
    pub fn cell(&self, i: usize) -> (usize, u32) {
        let (ns, nw) = (self.species.len(), self.weeks.len());
        (self.species[i % ns], self.weeks[(i * 5 + i / ns) % nw])
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f32; 3] {
    let c = v * s;
    let hp = (h.rem_euclid(1.0)) * 6.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) as f32, (g + m) as f32, (b + m) as f32]
}

/// Distinct plant colour per species.
pub fn species_color(species: usize) -> [f32; 3] {
    hsv((species - 1) as f64 / NUM_SPECIES as f64, 0.75, 0.85)
}

/// Renders one plant: a vertical stem rising from near the bottom edge with leaves
/// clustered on its upper part. The mask is exactly the set of plant pixels.
pub fn render(spec: &SynthSpec, species: usize, week: u32, height_cm: f64, seed: u64, id: String) -> Result<Sample> {
    let (h, w) = spec.image_size;
    let stem_px = ((height_cm * spec.px_per_cm).round() as usize).max(1);
    let avail = h - BASE_MARGIN;
    if stem_px > avail {
        return Err(Error::data(
            id,
            format!(
                "plant of {height_cm:.1} cm needs {stem_px} px but only {avail} fit; use px_per_cm <= {:.3}",
                avail as f64 / height_cm
            ),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = vec![0u8; h * w];
    let label = species as u8;
    let scale = w as f64 / 128.0;
    let x0 = (w as f64 / 2.0 + rng.gen_range(-0.12..=0.12) * w as f64).round() as i64;
    let base = (h - 1 - BASE_MARGIN) as i64;
    let top = base - stem_px as i64 + 1;
    // larger plants have thicker stems and larger leaves
    let stem_w = 1 + (0.04 * stem_px as f64).round() as i64;
    let mut paint = |x: i64, y: i64| {
        if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
            mask[y as usize * w + x as usize] = label;
        }
    };
    for y in top..=base {
        for dx in 0..stem_w {
            paint(x0 - stem_w / 2 + dx, y);
        }
    }
    let leaves = 1 + week as i64 / 2;
    let rx = 2.0 * scale + 0.12 * stem_px as f64;
    let ry = (rx * 0.45).max(1.0);
    for k in 0..leaves {
        // upper 40% of the stem
        let t = if leaves == 1 { 0.0 } else { k as f64 / (leaves - 1) as f64 };
        let cy = top as f64 + t * 0.4 * stem_px as f64;
        let side = if k % 2 == 0 { -1.0 } else { 1.0 };
        let cx = x0 as f64 + side * rx;
        for y in (cy - ry).floor() as i64..=(cy + ry).ceil() as i64 {
            for x in (cx - rx).floor() as i64..=(cx + rx).ceil() as i64 {
                let (dx, dy) = ((x as f64 - cx) / rx, (y as f64 - cy) / ry);
                if dx * dx + dy * dy <= 1.0 {
                    paint(x, y);
                }
            }
        }
    }

    let plant = species_color(species);
    let soil = [0.45f32, 0.35, 0.25];
    let mut data = vec![0f32; 3 * h * w];
    for p in 0..h * w {
        let jitter: f32 = rng.gen_range(-0.04..=0.04);
        let base_color = if mask[p] != 0 { plant } else { soil };
        for c in 0..3 {
            data[c * h * w + p] = (base_color[c] + jitter).clamp(0.0, 1.0);
        }
    }
    let sample = Sample {
        id,
        image: Tensor::new([3, h, w], data)?,
        mask,
        height_cm,
        week,
        species_id: species,
    };
    sample.validate()?;
    Ok(sample)
}

fn generate(spec: &SynthSpec, species: usize, week: u32, k: usize) -> Result<Sample> {
    let seed = derive_seed(spec.seed, &[species as u64, week as u64, k as u64]);
    let u = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0])).gen_range(-1.0..=1.0);
    let height = spec.height_cm(species, week, u);
    let id = format!("{}_w{week:02}_{k}", SPECIES[species - 1].code);
    render(spec, species, week, height, derive_seed(seed, &[1]), id)
}

/// `n_per_cell` samples for every (species, week) pair.
pub fn synthesize_dataset(spec: &SynthSpec, n_per_cell: usize) -> Result<Vec<Sample>> {
    spec.validate()?;
    let mut out = Vec::new();
    for &s in &spec.species {
        for &wk in &spec.weeks {
            for k in 0..n_per_cell {
                out.push(generate(spec, s, wk, k)?);
            }
        }
    }
    Ok(out)
}

/// `n` samples following [`SynthSpec::cell`].
pub fn synthesize_n(spec: &SynthSpec, n: usize) -> Result<Vec<Sample>> {
    spec.validate()?;
    let cells = spec.species.len() * spec.weeks.len();
    (0..n)
        .map(|i| {
            let (s, wk) = spec.cell(i);
            generate(spec, s, wk, i / cells)
        })
        .collect()
}

/// A plant whose stem spans `fraction` of the usable image height, at the last week.
pub fn tall_plant(spec: &SynthSpec, species: usize, fraction: f64) -> Result<Sample> {
    spec.validate()?;
    if !(0.0..=1.0).contains(&fraction) || !(1..=NUM_SPECIES).contains(&species) {
        return Err(Error::config(format!("tall plant needs species 1..={NUM_SPECIES} and fraction in [0, 1]")));
    }
    let avail = (spec.image_size.0 - BASE_MARGIN) as f64;
    let height = (fraction * avail).floor() / spec.px_per_cm;
    let id = format!("{}_tall", SPECIES[species - 1].code);
    render(spec, species, MAX_WEEK, height, derive_seed(spec.seed, &[species as u64, 99]), id)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn week_one_height_is_the_rate() {
        let spec = SynthSpec {
            noise: 0.0,
            ..SynthSpec::default()
        };
        // ERICA grows 1.70 cm per week
        assert_eq!(spec.height_cm(16, 1, 0.7), 1.7);
    }

    #[test]
    fn mask_matches_the_painted_plant() {
        let spec = SynthSpec::default();
        let s = render(&spec, 3, 6, 40.0, 1, "x".into()).unwrap();
        let fg = s.mask.iter().filter(|&&l| l != 0).count();
        assert!(fg > 0);
        let plant = species_color(3);
        let painted = (0..128 * 128)
            .filter(|&p| (0..3).all(|c| (s.image.data()[c * 128 * 128 + p] - plant[c]).abs() <= 0.0401))
            .count();
        assert_eq!(painted, fg);
        assert!(s.mask.iter().all(|&l| l == 0 || l == 3));
    }

    #[test]
    fn too_tall_plant_is_rejected_with_advice() {
        let spec = SynthSpec {
            px_per_cm: 2.0,
            ..SynthSpec::default()
        };
        let e = render(&spec, 1, 11, 150.0, 0, "tall".into()).unwrap_err();
        assert!(e.to_string().contains("px_per_cm <="), "{e}");
    }

    #[test]
    fn mean_height_grows_with_week() {
        let spec = SynthSpec {
            species: vec![5],
            ..SynthSpec::default()
        };
        let data = synthesize_dataset(&spec, 4).unwrap();
        let mean = |wk: u32| {
            let v: Vec<f64> = data.iter().filter(|s| s.week == wk).map(|s| s.height_cm).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        for wk in 1..11 {
            assert!(mean(wk + 1) > mean(wk));
        }
    }

    #[test]
    fn deterministic_and_valid() {
        let spec = SynthSpec::default();
        let a = synthesize_n(&spec, 8).unwrap();
        assert_eq!(a, synthesize_n(&spec, 8).unwrap());
        let weeks: std::collections::BTreeSet<u32> = a.iter().map(|s| s.week).collect();
        assert_eq!(weeks.len(), 8);
        for s in &a {
            s.validate().unwrap();
        }
    }
}
