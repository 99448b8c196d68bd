//! Theoretical energy accounting: per-layer operation counts for the ANN and
//! the converted SNN, and their relative energy consumption.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::network::NetworkConfig;
use crate::spiking::{FiringReport, SpikingModel};

/// Joules per operation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyConstants {
    pub e_mac: f64,
    pub e_ac: f64,
}

impl Default for EnergyConstants {
    /// 45 nm figures.
    fn default() -> Self {
        Self {
            e_mac: 4.6e-12,
            e_ac: 0.9e-12,
        }
    }
}

impl EnergyConstants {
    pub fn new(e_mac: f64, e_ac: f64) -> Result<Self> {
        let c = Self { e_mac, e_ac };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.e_mac > 0.0 && self.e_ac > 0.0) {
            return Err(Error::invalid("energy per operation must be positive"));
        }
        if self.e_ac >= self.e_mac {
            return Err(Error::invalid("an accumulate must cost less than a multiply-accumulate"));
        }
        Ok(())
    }

    /// SNN/ANN energy of a module whose dense op count is the same in both
    /// models, run as accumulates at input rate `rate` for `steps` steps.
    pub fn ac_module_ratio(&self, rate: f64, steps: usize) -> f64 {
        self.e_ac / self.e_mac * rate * steps as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Mac,
    Ac,
}

impl OpKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OpKind::Mac => "MAC",
            OpKind::Ac => "AC",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerOps {
    pub name: String,
    pub kind: OpKind,
    /// Synaptic operations of one dense evaluation.
    pub dense_ops: u64,
    /// Evaluations per prediction.
    pub evaluations: usize,
    /// Mean input spike rate for accumulate layers; 1 for dense layers.
    pub rate: f64,
    /// Operations per prediction: `dense_ops × rate × evaluations`.
    pub ops: f64,
    /// Nonlinearity evaluations per prediction, outside the energy totals.
    pub activation_ops: u64,
    pub rationale: String,
}

impl LayerOps {
    pub fn energy_j(&self, c: &EnergyConstants) -> f64 {
        self.ops
            * match self.kind {
                OpKind::Mac => c.e_mac,
                OpKind::Ac => c.e_ac,
            }
    }

    /// Energy of a single evaluation, the per-step module figure.
    pub fn energy_per_evaluation_j(&self, c: &EnergyConstants) -> f64 {
        self.energy_j(c) / self.evaluations.max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpCountReport {
    pub layers: Vec<LayerOps>,
    pub constants: EnergyConstants,
}

impl OpCountReport {
    pub fn layer(&self, name: &str) -> Option<&LayerOps> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn total_energy_j(&self) -> f64 {
        self.layers.iter().map(|l| l.energy_j(&self.constants)).sum()
    }

    pub fn total_ops(&self, kind: OpKind) -> f64 {
        self.layers.iter().filter(|l| l.kind == kind).map(|l| l.ops).sum()
    }

    /// `layer,kind,ops,rate,energy_j`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,kind,ops,rate,energy_j\n");
        for l in &self.layers {
            writeln!(
                s,
                "{},{},{},{},{}",
                l.name,
                l.kind.as_str(),
                l.ops,
                l.rate,
                l.energy_j(&self.constants)
            )
            .unwrap();
        }
        s
    }
}

/// Relative energy consumption of the SNN against the ANN.
pub fn rec(ann: &OpCountReport, snn: &OpCountReport) -> Result<f64> {
    let base = ann.total_energy_j();
    if !(base > 0.0) {
        return Err(Error::invalid("ANN energy is zero; the ratio is undefined"));
    }
    Ok(snn.total_energy_j() / base)
}

/// The SNN report's CSV followed by a summary line.
pub fn energy_csv(ann: &OpCountReport, snn: &OpCountReport) -> Result<String> {
    let eta = rec(ann, snn)?;
    let mut s = snn.to_csv();
    writeln!(
        s,
        "# phi_ann_j={},phi_snn_j={},eta={}",
        ann.total_energy_j(),
        snn.total_energy_j(),
        eta
    )
    .unwrap();
    Ok(s)
}

struct Conv {
    name: String,
    cin: usize,
    cout: usize,
    out: (usize, usize),
    /// Elementwise nonlinearities after the conv, per output element.
    activations: usize,
}

impl Conv {
    fn macs(&self) -> u64 {
        (self.cout * self.out.0 * self.out.1 * self.cin * 9) as u64
    }

    fn activation_ops(&self) -> u64 {
        (self.activations * self.cout * self.out.0 * self.out.1) as u64
    }
}

/// ConvGRU cells are counted as one unit of their three gate convolutions.
struct Unit {
    name: String,
    convs: Vec<Conv>,
}

impl Unit {
    fn single(c: Conv) -> Self {
        Self {
            name: c.name.clone(),
            convs: vec![c],
        }
    }

    fn macs(&self) -> u64 {
        self.convs.iter().map(Conv::macs).sum()
    }

    fn activation_ops(&self) -> u64 {
        self.convs.iter().map(Conv::activation_ops).sum()
    }
}

fn convgru_unit(name: &str, h: usize, w: usize) -> Unit {
    // 2-channel state, 2-channel input; one sigmoid or tanh per gate output
    let gate = |g: &str| Conv {
        name: format!("{name}.{g}"),
        cin: 4,
        cout: 2,
        out: (h, w),
        activations: 1,
    };
    Unit {
        name: name.into(),
        convs: vec![gate("xi_r"), gate("xi_z"), gate("xi_i")],
    }
}

/// Every convolutional unit in forward order, with the ANN's input channels.
fn units(cfg: &NetworkConfig) -> Vec<Unit> {
    let (h, w) = (cfg.height, cfg.width);
    let b = cfg.base_channels;
    let conv = |name: String, cin, cout, div: usize, activations| {
        Unit::single(Conv {
            name,
            cin,
            cout,
            out: (h / div, w / div),
            activations,
        })
    };
    let mut out = vec![convgru_unit("convgru1", h, w)];
    out.push(conv("encoder1".into(), 2 * cfg.groups, b, 2, 1));
    for l in 2..=4 {
        out.push(conv(
            format!("encoder{l}"),
            cfg.encoder_channels(l - 1),
            cfg.encoder_channels(l),
            1 << l,
            1,
        ));
    }
    let c4 = cfg.encoder_channels(4);
    for blk in 1..=2 {
        for c in 1..=2 {
            out.push(conv(format!("block{blk}.conv{c}"), c4, c4, 16, 1));
        }
    }
    for (name, level) in [("fuse8", 1), ("fuse4", 2), ("fuse2", 3)] {
        let ch = cfg.encoder_channels(level);
        out.push(conv(name.into(), ch, ch, 16, 0));
    }
    let fused = cfg.fused_channels();
    for d in 1..=cfg.decoders {
        out.push(conv(format!("decoder{d}"), fused, fused, 8, 1));
    }
    out.push(conv("generator".into(), fused, 2, 8, 0));
    out.push(convgru_unit("convgru2", h, w));
    out
}

/// Dense counts for one ANN prediction. ConvGRU1 runs once per event group.
pub fn count_ann_ops(cfg: &NetworkConfig, constants: EnergyConstants) -> Result<OpCountReport> {
    cfg.validate()?;
    constants.validate()?;
    let layers = units(cfg)
        .into_iter()
        .map(|u| {
            let evaluations = if u.name == "convgru1" { cfg.groups } else { 1 };
            let dense = u.macs();
            LayerOps {
                kind: OpKind::Mac,
                dense_ops: dense,
                evaluations,
                rate: 1.0,
                ops: (dense * evaluations as u64) as f64,
                activation_ops: u.activation_ops() * evaluations as u64,
                rationale: "ANN: real-valued input, multiply-accumulate".into(),
                name: u.name,
            }
        })
        .collect();
    Ok(OpCountReport { layers, constants })
}

/// The spiking layer whose output feeds `layer`, for accumulate layers.
fn spike_source(layer: &str, decoders: usize) -> Option<String> {
    let s = match layer {
        "encoder2" | "fuse8" => "encoder1",
        "encoder3" | "fuse4" => "encoder2",
        "encoder4" | "fuse2" => "encoder3",
        "block1.conv1" => "encoder4",
        "block1.conv2" => "block1.conv1",
        "block2.conv1" => "block1.conv2",
        "block2.conv2" => "block2.conv1",
        "generator" => return Some(format!("decoder{decoders}")),
        other => {
            let d: usize = other.strip_prefix("decoder")?.parse().ok()?;
            return (d > 1).then(|| format!("decoder{}", d - 1));
        }
    };
    Some(s.into())
}

/// Counts for one SNN prediction given measured firing rates.
///
/// Layers whose input is a spike train do accumulates at the input rate on
/// every step. ConvGRU1 and ConvGRU2, Encoder1 and Decoder1 see real-valued
/// input and stay multiply-accumulate: Encoder1 runs every step on one
/// group's two channels, ConvGRU1 once per group, ConvGRU2 once per window.
pub fn count_snn_ops(model: &SpikingModel, firing: &FiringReport, constants: EnergyConstants) -> Result<OpCountReport> {
    constants.validate()?;
    let cfg = &model.params.config;
    let t = model.time_steps;
    let mut layers = Vec::new();
    for u in units(cfg) {
        let op = match u.name.as_str() {
            "convgru1" => mac(u, cfg.groups, "analog ConvGRU on event counts, once per group"),
            "convgru2" => mac(u, 1, "analog ConvGRU on the integrated readout, once per window"),
            "decoder1" => mac(u, t, "input mixes analog fusion outputs with spikes"),
            "encoder1" => {
                let mut u = u;
                // each step sees one group's two channels
                u.convs[0].cin = 2;
                mac(u, t, "input is the analog ConvGRU1 output")
            }
            name => {
                let src = spike_source(name, cfg.decoders)
                    .ok_or_else(|| Error::invalid(format!("no spike source known for layer {name}")))?;
                let i = firing
                    .layers
                    .iter()
                    .position(|l| *l == src)
                    .ok_or_else(|| Error::invalid(format!("firing report lacks layer {src}")))?;
                let per_step = &firing.rates[i];
                if per_step.len() != t {
                    return Err(Error::invalid(format!(
                        "firing report has {} steps for {src}, model runs {t}",
                        per_step.len()
                    )));
                }
                let rate = per_step.iter().sum::<f64>() / t as f64;
                let dense = u.macs();
                LayerOps {
                    kind: OpKind::Ac,
                    dense_ops: dense,
                    evaluations: t,
                    rate,
                    ops: dense as f64 * rate * t as f64,
                    activation_ops: u.activation_ops() * t as u64,
                    rationale: format!("input is the spike train of {src}"),
                    name: u.name,
                }
            }
        };
        layers.push(op);
    }
    Ok(OpCountReport { layers, constants })
}

fn mac(u: Unit, evaluations: usize, why: &str) -> LayerOps {
    let dense = u.macs();
    LayerOps {
        kind: OpKind::Mac,
        dense_ops: dense,
        evaluations,
        rate: 1.0,
        ops: (dense * evaluations as u64) as f64,
        activation_ops: u.activation_ops() * evaluations as u64,
        rationale: why.into(),
        name: u.name,
    }
}
