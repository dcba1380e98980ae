//! Image tiles, labels, manifests, splits, noise, and the procedural
//! surrogate corpus.

mod image;
mod labels;
mod manifest;
pub mod surrogate;

pub use image::{add_noise, decode_png, encode_png, load_png, quantize, save_png, tile_layer, CropBox, ImageTile};
pub use labels::{ClassLabel, LabelSet};
pub use manifest::{class_stats, split, ClassCount, ClassStats, DatasetManifest, ManifestEntry, Split, TRAIN_FRACTION};
pub use surrogate::{generate as surrogate_generate, SurrogateConfig, SurrogateOutput};
