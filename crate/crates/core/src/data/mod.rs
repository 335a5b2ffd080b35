//! Synthetic aerial imagery and the patch-extraction protocols.

mod extract;
mod mosaic;

pub use extract::{
    extract_lt, extract_pre, split_mosaics, subsample_labels, LabeledDataset, LtOptions, PatchOrigin, PatchSet,
    Split, BACKGROUND, FOREGROUND,
};
pub use mosaic::{generate_mosaic, generate_mosaics, mosaic_specs, AnimalKind, BBox, Mosaic, MosaicSpec};

use crate::config::DataConfig;
use crate::rng::{stream, Tag};
use crate::Result;

/// Pretraining patches for `cfg`.
pub fn pretraining_set(mosaics: &[Mosaic], cfg: &DataConfig) -> Result<PatchSet> {
    extract_pre(
        mosaics,
        cfg.pre_patch,
        cfg.crops_per_image,
        cfg.extra_crops_with_animals,
        &mut stream(cfg.seed, 0, 0, Tag::ExtractPre),
    )
}

/// Long-tail options for `cfg`.
pub fn lt_options(cfg: &DataConfig) -> LtOptions {
    LtOptions {
        bg_patch: cfg.lt_bg_patch,
        fg_patch: cfg.lt_fg_patch,
        bg_per_fg: cfg.bg_per_fg,
        ratios: [cfg.split_train, cfg.split_val, cfg.split_test],
        fg_jitter: cfg.fg_jitter,
        seed: cfg.seed,
    }
}
