//! Image and sequence files, the synthetic toy dataset and whole-sequence
//! inference.

mod image_io;
mod manifest;
mod pipeline;
mod toy;

pub use image_io::{read_gray, read_image, write_image, PixelFormat};
pub use manifest::{SceneEntry, SequenceManifest};
pub use pipeline::{denoise_color_sequence, denoise_sequence, evaluate_sequence};
pub use toy::{generate_scene, make_toy_dataset, PatternFamily, ToyDatasetConfig, ToyScene};
