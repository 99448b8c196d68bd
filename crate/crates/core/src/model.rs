//! A trained flow estimator of either kind, behind one interface.

use std::path::Path;

use crate::error::Result;
use crate::flow::FlowField;
use crate::network::{forward_ann_tape, load_ann, save_ann, Bound, Checkpoint, ModelState, STFlowNetParams};
use crate::spiking::{FiringReport, SpikingModel};
use crate::tensor::{Tape, Var};
use crate::training::WindowSample;

#[derive(Clone, Debug, PartialEq)]
pub enum FlowModel {
    Ann(STFlowNetParams),
    Snn(SpikingModel),
}

impl FlowModel {
    pub fn params(&self) -> &STFlowNetParams {
        match self {
            FlowModel::Ann(p) => p,
            FlowModel::Snn(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut STFlowNetParams {
        match self {
            FlowModel::Ann(p) => p,
            FlowModel::Snn(m) => &mut m.params,
        }
    }

    pub fn is_spiking(&self) -> bool {
        matches!(self, FlowModel::Snn(_))
    }

    /// Whether the optimizer may update the named tensor. Converted models
    /// keep their ceilings (now thresholds) fixed.
    pub fn trainable(&self, name: &str) -> bool {
        !(self.is_spiking() && name.ends_with(".lambda"))
    }

    /// One window on `tape`; returns the flow in pixels, the next state and,
    /// for a spiking model, its firing rates.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        bound: &Bound<'_>,
        sample: &WindowSample,
        state: Var,
    ) -> Result<(Var, Var, Option<FiringReport>)> {
        match self {
            FlowModel::Ann(_) => {
                let (f, s) = forward_ann_tape(tape, bound, &sample.ann_input, state)?;
                Ok((f, s, None))
            }
            FlowModel::Snn(m) => {
                let (f, s, r) = m.forward_tape(tape, bound, &sample.snn_input, state)?;
                Ok((f, s, Some(r)))
            }
        }
    }

    /// Inference over consecutive windows, carrying the state.
    pub fn predict_sequence(&self, windows: &[WindowSample]) -> Result<Vec<(FlowField, Option<FiringReport>)>> {
        let mut tape = Tape::new();
        let bound = self.params().bind(&mut tape, false);
        let mut state = tape.constant(ModelState::new().state_tensor(&self.params().config)?);
        let mut out = Vec::with_capacity(windows.len());
        for w in windows {
            let (flow, next, report) = self.forward_tape(&mut tape, &bound, w, state)?;
            out.push((FlowField::from_tensor(tape.value(flow))?, report));
            state = next;
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        match self {
            FlowModel::Ann(p) => save_ann(p, path),
            FlowModel::Snn(m) => m.save(path),
        }
    }

    /// Loads either kind, deciding by the checkpoint contents.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let cp = Checkpoint::load(path)?;
        if cp.is_spiking() {
            Ok(FlowModel::Snn(SpikingModel::from_checkpoint(path, &cp)?))
        } else {
            Ok(FlowModel::Ann(load_ann(path)?))
        }
    }
}
