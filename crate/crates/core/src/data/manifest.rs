//! JSON dataset manifest.
//!
//! ```json
//! {
//!   "class_names": ["background", "AMATU", ...],   // 17 names
//!   "entries": [{
//!     "id": "AMATU_w03_0",        // unique
//!     "image": "images/AMATU_w03_0.png",   // RGB, relative to the manifest
//!     "mask": "masks/AMATU_w03_0.png",     // 8-bit gray, pixel = class index
//!     "height_cm": 41.2,          // 0..=200
//!     "week": 3,                  // 1..=11
//!     "species_id": 1,            // 1..=16
//!     "split": "train"            // train | val | test
//!   }]
//! }
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use weedsense_tensor::Tensor;

use super::sample::{Sample, MAX_HEIGHT_CM, MAX_WEEK, NUM_SPECIES};
use super::synth::class_names;
use crate::error::{Error, Result};
use crate::seeds::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::config(format!("unknown split {s:?}, expected train, val or test")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
    pub height_cm: f64,
    pub week: u32,
    pub species_id: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub class_names: Vec<String>,
    pub entries: Vec<ManifestEntry>,
    /// Directory that entry paths are relative to.
    #[serde(skip)]
    pub root: PathBuf,
}

fn problems(m: &Manifest, check_files: bool) -> Vec<String> {
    let mut out = Vec::new();
    if m.class_names.len() != NUM_SPECIES + 1 {
        out.push(format!("expected {} class names, found {}", NUM_SPECIES + 1, m.class_names.len()));
    }
    if m.entries.is_empty() {
        out.push("manifest has no entries".into());
    }
    let mut seen = HashSet::new();
    for e in &m.entries {
        let id = &e.id;
        if !seen.insert(id.as_str()) {
            out.push(format!("{id}: duplicate id"));
        }
        if !(1..=MAX_WEEK).contains(&e.week) {
            out.push(format!("{id}: week {} outside 1..={MAX_WEEK}", e.week));
        }
        if !(1..=NUM_SPECIES).contains(&e.species_id) {
            out.push(format!("{id}: species id {} outside 1..={NUM_SPECIES}", e.species_id));
        }
        if !(0.0..=MAX_HEIGHT_CM).contains(&e.height_cm) {
            out.push(format!("{id}: height {} cm outside 0..={MAX_HEIGHT_CM}", e.height_cm));
        }
        if check_files {
            for p in [&e.image, &e.mask] {
                let full = m.root.join(p);
                if !full.is_file() {
                    out.push(format!("{id}: missing file {}", full.display()));
                }
            }
        }
    }
    out
}

/// Parses and validates a manifest; all problems are reported together.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let p = problems(&m, true);
    if !p.is_empty() {
        return Err(Error::Invalid(p));
    }
    Ok(m)
}

impl Manifest {
    pub fn entries_in(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Decodes one entry; mask pixels are checked here.
    pub fn load_sample(&self, e: &ManifestEntry) -> Result<Sample> {
        let read = |p: &Path| {
            let full = self.root.join(p);
            image::open(&full).map_err(|err| Error::data(&e.id, format!("{}: {err}", full.display())))
        };
        let rgb = read(&e.image)?.to_rgb8();
        let mask = read(&e.mask)?;
        if mask.color() != image::ColorType::L8 {
            return Err(Error::data(&e.id, format!("mask must be 8-bit single channel, got {:?}", mask.color())));
        }
        let mask = mask.to_luma8();
        if mask.dimensions() != rgb.dimensions() {
            return Err(Error::data(&e.id, format!("mask {:?} and image {:?} differ in size", mask.dimensions(), rgb.dimensions())));
        }
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let raw = rgb.into_raw();
        let image = Tensor::from_fn([3, h, w], |i| raw[(i % (h * w)) * 3 + i / (h * w)] as f32 / 255.0);
        let s = Sample {
            id: e.id.clone(),
            image,
            mask: mask.into_raw(),
            height_cm: e.height_cm,
            week: e.week,
            species_id: e.species_id,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Sample>> {
        self.entries_in(split).map(|e| self.load_sample(e)).collect()
    }

    pub fn counts(&self) -> BTreeMap<Split, usize> {
        let mut c = BTreeMap::new();
        for e in &self.entries {
            *c.entry(e.split).or_insert(0) += 1;
        }
        c
    }
}

/// Reassigns splits per species so each species is divided by `fractions`
/// (train, val, test). Deterministic in `seed`.
pub fn split_dataset(manifest: &Manifest, fractions: [f64; 3], seed: u64) -> Result<Manifest> {
    if fractions.iter().any(|&f| !(0.0..=1.0).contains(&f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("split fractions {fractions:?} must be in [0, 1] and sum to 1")));
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        groups.entry(e.species_id).or_default().push(i);
    }
    let mut out = manifest.clone();
    for (species, mut idx) in groups {
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[species as u64])));
        let n = idx.len();
        let n_train = ((fractions[0] * n as f64).round() as usize).min(n);
        let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
        for (k, &i) in idx.iter().enumerate() {
            out.entries[i].split = if k < n_train {
                Split::Train
            } else if k < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    Ok(out)
}

/// Writes images, masks and `manifest.json` under `dir`.
pub fn write_dataset(dir: &Path, samples: &[Sample], splits: &[Split]) -> Result<Manifest> {
    let mkdir = |d: PathBuf| fs::create_dir_all(&d).map_err(|e| Error::io(d, e));
    mkdir(dir.join("images"))?;
    mkdir(dir.join("masks"))?;
    let mut entries = Vec::new();
    for (s, &split) in samples.iter().zip(splits) {
        let (h, w) = s.hw();
        let d = s.image.data();
        let rgb = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let p = y as usize * w + x as usize;
            image::Rgb([0, 1, 2].map(|c| (d[c * h * w + p] * 255.0).round().clamp(0.0, 255.0) as u8))
        });
        let mask = GrayImage::from_raw(w as u32, h as u32, s.mask.clone()).ok_or_else(|| Error::data(&s.id, "mask size mismatch"))?;
        let image_rel = PathBuf::from("images").join(format!("{}.png", s.id));
        let mask_rel = PathBuf::from("masks").join(format!("{}.png", s.id));
        let save_err = |p: &Path, e: image::ImageError| Error::Format(format!("{}: {e}", p.display()));
        rgb.save(dir.join(&image_rel)).map_err(|e| save_err(&image_rel, e))?;
        mask.save(dir.join(&mask_rel)).map_err(|e| save_err(&mask_rel, e))?;
        entries.push(ManifestEntry {
            id: s.id.clone(),
            image: image_rel,
            mask: mask_rel,
            height_cm: s.height_cm,
            week: s.week,
            species_id: s.species_id,
            split,
        });
    }
    let m = Manifest {
        class_names: class_names(),
        entries,
        root: dir.to_path_buf(),
    };
    m.save(&dir.join("manifest.json"))?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(i: usize, species: usize) -> ManifestEntry {
        ManifestEntry {
            id: format!("e{i}"),
            image: PathBuf::from("i.png"),
            mask: PathBuf::from("m.png"),
            height_cm: 10.0,
            week: 2,
            species_id: species,
            split: Split::Train,
        }
    }

    fn balanced(per_species: usize) -> Manifest {
        Manifest {
            class_names: class_names(),
            entries: (0..16 * per_species).map(|i| entry(i, 1 + i % 16)).collect(),
            root: PathBuf::new(),
        }
    }

    #[test]
    fn eighty_ten_ten_per_species() {
        let m = split_dataset(&balanced(100), [0.8, 0.1, 0.1], 3).unwrap();
        assert_eq!(m.counts()[&Split::Train], 1280);
        assert_eq!(m.counts()[&Split::Val], 160);
        assert_eq!(m.counts()[&Split::Test], 160);
        for s in 1..=16 {
            let n = |sp| m.entries.iter().filter(|e| e.species_id == s && e.split == sp).count();
            assert_eq!((n(Split::Train), n(Split::Val), n(Split::Test)), (80, 10, 10));
        }
        assert_eq!(m, split_dataset(&balanced(100), [0.8, 0.1, 0.1], 3).unwrap());
    }

    #[test]
    fn all_train_and_bad_fractions() {
        let m = split_dataset(&balanced(3), [1.0, 0.0, 0.0], 0).unwrap();
        assert!(m.entries.iter().all(|e| e.split == Split::Train));
        assert_eq!(split_dataset(&m, [0.5, 0.5, 0.5], 0).unwrap_err().category(), "config");
    }

    #[test]
    fn problems_are_itemized() {
        let mut m = balanced(1);
        m.entries[0].week = 12;
        m.entries[1].id = "e0".into();
        let p = problems(&m, false);
        assert_eq!(p.len(), 2);
        assert!(p[0].starts_with("e0: week 12"));
        assert!(p[1].contains("duplicate"));
    }
}
