//! Samples, manifests, the synthetic generator and augmentation.

pub mod augment;
pub mod manifest;
pub mod sample;
pub mod synth;
pub mod weights;

pub use augment::{augment, hflip, AugConfig};
pub use manifest::{load_manifest, split_dataset, write_dataset, Manifest, ManifestEntry, Split};
pub use sample::{Batch, Normalization, Sample, MAX_HEIGHT_CM, MAX_WEEK, NUM_SPECIES};
pub use synth::{class_names, species_color, synthesize_dataset, synthesize_n, tall_plant, SynthSpec, SPECIES};
pub use weights::class_pixel_weights;
