//! Multi-task network for weed segmentation, plant height regression and growth-week
//! classification, with training, evaluation and profiling utilities.

pub mod bench;
pub mod check;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcam;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod params;
pub mod profile;
pub mod seeds;
pub mod train;

pub use config::{ModelConfig, Size, Task, Tasks, UibKernels};
pub use error::{Error, Result};
pub use model::{ForwardOutput, Model, Network};
pub use weedsense_tensor as tensor;
