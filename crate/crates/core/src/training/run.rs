use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::data::{Dataset, Sequence};
use super::loss::{total_loss_tape, LossBreakdown, LossConfig};
use super::optim::Adam;
use crate::error::{Error, Result};
use crate::model::FlowModel;
use crate::network::{ModelState, NetworkConfig, STFlowNetParams};
use crate::spiking::{convert_a2s, SpikingModel, TauMap};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs_ann: usize,
    pub epochs_bisnn: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning-rate decay per epoch.
    pub gamma: f64,
    pub seed: u64,
    /// Stops after this many iterations when set.
    pub max_iterations: Option<usize>,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_ann: 100,
            epochs_bisnn: 10,
            batch_size: 8,
            lr: 2e-4,
            gamma: 0.98,
            seed: 0,
            max_iterations: None,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.lr >= 0.0) || !(self.gamma > 0.0) {
            return Err(Error::invalid("lr must be non-negative and gamma positive"));
        }
        self.loss.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryRow {
    pub iter: usize,
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossHistory {
    pub rows: Vec<HistoryRow>,
}

impl LossHistory {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn totals(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss.total).collect()
    }

    /// Mean total loss over a trailing window of `k` rows ending at `i`.
    pub fn running_mean(&self, i: usize, k: usize) -> f64 {
        let lo = (i + 1).saturating_sub(k);
        let s = &self.rows[lo..=i];
        s.iter().map(|r| r.loss.total).sum::<f64>() / s.len() as f64
    }

    /// `iter,epoch,contrast,smooth,total,lr`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,epoch,contrast,smooth,total,lr\n");
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{},{}",
                r.iter, r.epoch, r.loss.contrast, r.loss.smooth, r.loss.total, r.lr
            )
            .unwrap();
        }
        s
    }
}

/// Loss of one sequence, averaged over its windows, with parameter
/// gradients when `with_grad` is set.
fn sequence_pass(
    model: &FlowModel,
    seq: &Sequence,
    cfg: &LossConfig,
    with_grad: bool,
) -> Result<(LossBreakdown, Option<Vec<Tensor>>)> {
    let mut tape = Tape::new();
    let params = model.params();
    let bound = params.bind(&mut tape, with_grad);
    let mut state = tape.constant(ModelState::new().state_tensor(&params.config)?);
    let mut losses = Vec::with_capacity(seq.windows.len());
    let mut parts = LossBreakdown::default();
    for w in &seq.windows {
        let (flow, next, _) = model.forward_tape(&mut tape, &bound, w, state)?;
        let (l, p) = total_loss_tape(&mut tape, flow, w.events.clone(), w.window, cfg)?;
        losses.push(l);
        parts += p;
        state = next;
    }
    let k = 1.0 / seq.windows.len().max(1) as f64;
    if !with_grad {
        return Ok((parts.scaled(k), None));
    }
    let mut sum = losses[0];
    for &l in &losses[1..] {
        sum = tape.add(sum, l)?;
    }
    let mean = tape.scale(sum, k);
    tape.backward(mean)?;
    Ok((parts.scaled(k), Some(bound.grads(&tape))))
}

/// Mean loss over a dataset without gradients.
pub fn evaluate_loss(model: &FlowModel, data: &Dataset, cfg: &LossConfig) -> Result<LossBreakdown> {
    if data.is_empty() {
        return Err(Error::Empty("dataset has no sequences".into()));
    }
    let parts: Vec<LossBreakdown> = data
        .sequences
        .par_iter()
        .map(|s| sequence_pass(model, s, cfg, false).map(|(l, _)| l))
        .collect::<Result<_>>()?;
    let mut acc = LossBreakdown::default();
    for p in parts {
        acc += p;
    }
    Ok(acc.scaled(1.0 / data.len() as f64))
}

/// The shared optimization loop: minibatch Adam over shuffled sequences.
/// Batch items run in parallel; gradients are summed in batch order.
fn optimize(mut model: FlowModel, data: &Dataset, cfg: &TrainConfig, epochs: usize) -> Result<(FlowModel, LossHistory)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("dataset has no sequences".into()));
    }
    let mut opt = Adam::new(cfg.lr, cfg.gamma)?;
    let mut history = LossHistory::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let trainable: Vec<bool> = model.params().names().map(|n| model.trainable(n)).collect();
    let mut iter = 0;
    'epochs: for epoch in 0..epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            if cfg.max_iterations.is_some_and(|m| iter >= m) {
                break 'epochs;
            }
            let results: Vec<(LossBreakdown, Option<Vec<Tensor>>)> = batch
                .par_iter()
                .map(|&i| sequence_pass(&model, &data.sequences[i], &cfg.loss, true))
                .collect::<Result<_>>()?;
            let k = 1.0 / batch.len() as f64;
            let mut loss = LossBreakdown::default();
            let mut grads: Option<Vec<Tensor>> = None;
            for (l, g) in results {
                loss += l;
                let g = g.expect("gradients requested");
                match grads.as_mut() {
                    None => grads = Some(g),
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b)),
                }
            }
            let grads: Vec<Option<Tensor>> = grads
                .expect("non-empty batch")
                .into_iter()
                .zip(&trainable)
                .map(|(g, &t)| t.then(|| g.map(|v| v * k)))
                .collect();
            history.rows.push(HistoryRow {
                iter,
                epoch,
                loss: loss.scaled(k),
                lr: opt.lr,
            });
            opt.step(model.params_mut().iter_mut().map(|(_, t)| t), &grads)?;
            clamp_ceilings(model.params_mut());
            iter += 1;
        }
        opt.end_epoch();
    }
    Ok((model, history))
}

/// Keeps every QCFS ceiling strictly positive.
fn clamp_ceilings(params: &mut STFlowNetParams) {
    for (name, t) in params.iter_mut() {
        if name.ends_with(".lambda") {
            t.data_mut().iter_mut().for_each(|v| *v = v.max(1e-3));
        }
    }
}

/// Trains the ANN for `epochs_ann` epochs.
pub fn train_ann(params: &STFlowNetParams, data: &Dataset, cfg: &TrainConfig) -> Result<(STFlowNetParams, LossHistory)> {
    let (model, history) = optimize(FlowModel::Ann(params.clone()), data, cfg, cfg.epochs_ann)?;
    match model {
        FlowModel::Ann(p) => Ok((p, history)),
        FlowModel::Snn(_) => unreachable!("ANN training yields an ANN"),
    }
}

/// Surrogate-gradient training of a spiking model's weights for
/// `epochs_bisnn` epochs; thresholds and leak rates stay fixed.
pub fn stbp_train(model: &SpikingModel, data: &Dataset, cfg: &TrainConfig) -> Result<(SpikingModel, LossHistory)> {
    let (model, history) = optimize(FlowModel::Snn(model.clone()), data, cfg, cfg.epochs_bisnn)?;
    match model {
        FlowModel::Snn(m) => Ok((m, history)),
        FlowModel::Ann(_) => unreachable!("spiking training yields a spiking model"),
    }
}

/// Conversion of a trained ANN followed by spiking retraining.
pub fn bisnn_train(
    ann: &STFlowNetParams,
    data: &Dataset,
    cfg: &TrainConfig,
    time_steps: usize,
    tau: TauMap,
) -> Result<(SpikingModel, LossHistory)> {
    let converted = convert_a2s(ann, time_steps, tau)?;
    stbp_train(&converted, data, cfg)
}

/// Spiking training from random weights initialized with `cfg.seed`; the
/// thresholds come from the initial ceilings, as for a converted model.
pub fn direct_stbp_train(
    config: &NetworkConfig,
    data: &Dataset,
    cfg: &TrainConfig,
    time_steps: usize,
    tau: TauMap,
) -> Result<(SpikingModel, LossHistory)> {
    let init = STFlowNetParams::init(config.clone(), cfg.seed)?;
    bisnn_train(&init, data, cfg, time_steps, tau)
}
