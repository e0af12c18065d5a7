//! View generation: standard random transforms, cut-mixed views and
//! adversarial views.

mod cutmix;
mod pgd;
mod transform;

pub use cutmix::{
    apply_grid, apply_mask, cutmix, cutmix_with_masks, sample_batch_masks, sample_cutmix_mask,
    sample_derangement, CutMask, CutMixConfig, MixedPseudoLabel,
};
pub use pgd::{pgd_attack, AdvConfig, PerturbNorm, PixelBounds};
pub use transform::{
    hflip, normalize, random_transform, resize_crop, sample_crop, transform_batch, CropBox,
    TransformConfig,
};
