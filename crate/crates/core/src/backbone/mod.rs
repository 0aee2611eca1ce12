//! The attention block, the conv-only ablation block and the four-stage
//! backbone built from them.

mod block;
mod config;
mod model;

pub use block::{
    conv_only_block_forward, downsample, vmi_sa_block_forward, vmi_sa_block_forward_with,
    ConvBlockParams, VmiSaBlockParams,
};
pub use config::{hybrid_schedule, Variant, VmiNetConfig, DEFAULT_DEPTHS, TOTAL_BLOCKS};
pub use model::{build_vminet, count_params, ForwardVars, Param, VmiNet};
