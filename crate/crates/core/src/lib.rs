//! Spiking optical-flow estimation from event-camera streams.
//!
//! The crate covers a recurrent encoder-decoder flow network trained as an
//! ANN with clip-floor activations, its conversion to an integrate-and-fire
//! spiking network, surrogate-gradient retraining, self-supervised
//! contrast/smoothness losses, flow metrics, and operation-count energy
//! estimates.

pub mod energy;
pub mod error;
pub mod eval;
pub mod events;
pub mod flow;
pub mod model;
pub mod network;
pub mod spiking;
pub mod training;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
