//! Leaky integrate-and-fire dynamics and the ANN-to-SNN conversion.
//!
//! A converted model keeps the ANN weights unchanged and replaces each QCFS
//! activation with a soft-reset integrate-and-fire population whose
//! threshold is the activation's ceiling. Spike trains are multiplied by the
//! threshold before the next layer, so firing rates approximate the ANN
//! activations.

mod lif;
mod model;

pub use lif::{lif_step, LifConfig, LifState, LifTapeState, ResetMode};
pub use model::{convert_a2s, firing_report, FiringReport, SpikingModel, TauMap};
