//! User/group token separation: the UG mask, masked mixup, split FFNs,
//! information compensation and the separated residual.

mod block;
mod partition;
mod stack;
mod verify;

pub use block::{
    check_block_gradient, info_compensation, masked_mixup, masked_mixup_row_into, separated_residual, split_pffn,
    BlockConfig, BlockGrads, CompensationParams, CrossAttnParams, ResidualMode, UGSepBlock,
    UGSepBlockParams, USide,
};
pub use partition::{build_ug_mask, UGMask, UGPartition};
pub use stack::{logistic_loss, sigmoid, BlockSpec, Readout, Stack, StackConfig, StackGrads};
pub use verify::{verify_separability, BlockCheck, Divergence, SeparabilityReport};
