//! Mask-head architectures: declarative specs and the networks built from them.

mod build;
mod spec;

pub use build::{
    build_fc_head, build_mask_head, scaled_size, LayerInfo, LayerKind, MaskHead, MaskHeadNetwork,
};
pub use spec::{dilate_layers, BlockRow, Family, MaskHeadSpec, TABLE_SIZE};
