//! The recurrent encoder-decoder flow network.
//!
//! Layout, from input to output:
//!
//! ```text
//! events (2N ch) -> ConvGRU1 (per group, shared cell) -> encoder1..4 (stride 2, QCFS)
//!   -> two residual blocks -> concat(D8(F1), D4(F2), D2(F3), F4~) -> x2 bilinear
//!   -> decoder(s) (QCFS) -> generator (2 filters) -> x8 bilinear -> ConvGRU2 -> flow
//! ```
//!
//! Parameters live in a flat, ordered table of named tensors so that binding
//! to a tape, optimizer state and checkpoints all share one iteration order.

pub mod checkpoint;
mod forward;
mod params;

pub use checkpoint::{load_ann, save_ann, Checkpoint};

pub use forward::{
    convgru_step, forward_ann, forward_ann_tape, normalize_counts, qcfs, residual_block,
    ConvGruVars, ModelState,
};
pub(crate) use forward::{fuse, generator, refine};
pub use params::{Bound, NetworkConfig, STFlowNetParams, SpikingLayerSpec};
