//! Manifests, image files, the synthetic generator and protocol splits.

pub mod image;
pub mod manifest;
pub mod split;
pub mod synth;

pub use image::{load_image, read_image, write_image};
pub use manifest::{read_manifest, write_manifest, AttackType, Label, ManifestRecord};
pub use split::{split, ExtraMode, Protocol, SplitResult, SplitSpec};
pub use synth::{generate_synthetic, SynthConfig};
