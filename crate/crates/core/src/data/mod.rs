//! Dataset formats, synthetic corpus generation and augmentation.

pub mod augment;
pub mod manifest;
pub mod overlay;
pub mod synth;

pub(crate) use augment::gaussian_blur as gaussian_blur_raster;
pub use augment::{
    strong_augment, strong_augment_with, template_augment, template_augment_with, weak_augment,
    weak_augment_with, AugmentedView, GeomOp, PhotoOp, Raster, StrongAugConfig, TemplateAugConfig,
    Transform, WeakAugConfig,
};
pub use manifest::{load_manifest, split_labeled, DatasetManifest, ManifestEntry, Sample, Split, MANIFEST_FILE};
pub use overlay::make_overlay;
pub use synth::{generate_synthetic, SynthConfig};
