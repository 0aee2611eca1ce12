//! Attention mechanisms: softmax and separable self-attention baselines, the
//! sequential state-space scan, mask matrices, and the mask-gated separable
//! attention in recurrent and matrix forms.

mod analysis;
mod baseline;
mod mask;
mod vmi_sa;

pub use analysis::{elementwise_expansion_oracle, matmul_expansion_oracle, numeric_rank};
pub use baseline::{
    separable_self_attention, softmax_self_attention, ssm_scan_reference, SsmParams,
};
pub use mask::{build_mask, Mask, MaskFamily, MaskKind};
pub use vmi_sa::{context_vector, vmi_sa_matrix, vmi_sa_recurrent, AttentionForm, GateVector};
