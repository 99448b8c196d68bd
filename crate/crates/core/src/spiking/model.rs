use std::collections::HashMap;
use std::path::Path;

use super::lif::{LifConfig, LifTapeState, ResetMode};
use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::network::{
    convgru_step, fuse, generator, normalize_counts, refine, Bound, Checkpoint, ConvGruVars, ModelState,
    STFlowNetParams,
};
use crate::tensor::{Tape, Tensor, Var};

/// Leak rates of the two non-spiking integrators. Every spiking layer is
/// leak-free.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct TauMap {
    /// Readout integrator after the flow generator.
    pub generator: f64,
    /// Decay applied to the state carried into ConvGRU2.
    pub convgru2: f64,
}

impl TauMap {
    pub fn new(generator: f64, convgru2: f64) -> Result<Self> {
        if !(generator >= 0.0 && convgru2 >= 0.0) {
            return Err(Error::invalid(format!(
                "leak rates must be non-negative, got ({generator}, {convgru2})"
            )));
        }
        Ok(Self { generator, convgru2 })
    }
}

/// A converted network: ANN weights plus per-layer thresholds.
#[derive(Clone, Debug, PartialEq)]
pub struct SpikingModel {
    pub params: STFlowNetParams,
    /// `(layer, threshold)` for every spiking layer, in forward order.
    pub thresholds: Vec<(String, f64)>,
    pub tau: TauMap,
    /// Simulation steps per window; a multiple of the group count.
    pub time_steps: usize,
    pub reset: ResetMode,
}

/// Copies the weights, sets every threshold to the layer's QCFS ceiling and
/// attaches the leak rates.
pub fn convert_a2s(ann: &STFlowNetParams, time_steps: usize, tau: TauMap) -> Result<SpikingModel> {
    let n = ann.config.groups;
    if time_steps == 0 || time_steps % n != 0 {
        return Err(Error::invalid(format!(
            "time steps must be a positive multiple of the group count {n}, got {time_steps}"
        )));
    }
    let tau = TauMap::new(tau.generator, tau.convgru2)?;
    let thresholds = ann
        .spiking_layers()
        .into_iter()
        .map(|l| {
            let lam = ann.lambda(&l.name).expect("every spiking layer has a ceiling");
            (l.name, lam)
        })
        .collect();
    Ok(SpikingModel {
        params: ann.clone(),
        thresholds,
        tau,
        time_steps,
        reset: ResetMode::Soft,
    })
}

/// Mean spike rate per spiking layer and step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FiringReport {
    pub layers: Vec<String>,
    /// `rates[layer][step]`.
    pub rates: Vec<Vec<f64>>,
}

impl FiringReport {
    pub fn mean_rate(&self, layer: &str) -> Option<f64> {
        let i = self.layers.iter().position(|l| l == layer)?;
        let r = &self.rates[i];
        Some(r.iter().sum::<f64>() / r.len().max(1) as f64)
    }

    /// Element-wise mean over several reports of the same model.
    pub fn average(reports: &[FiringReport]) -> Option<FiringReport> {
        let first = reports.first()?;
        let mut out = first.clone();
        for r in &reports[1..] {
            for (acc, row) in out.rates.iter_mut().zip(&r.rates) {
                acc.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
        }
        let k = reports.len() as f64;
        out.rates.iter_mut().flatten().for_each(|a| *a /= k);
        Some(out)
    }

    /// `layer,step,rate` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,step,rate\n");
        for (l, row) in self.layers.iter().zip(&self.rates) {
            for (t, r) in row.iter().enumerate() {
                s.push_str(&format!("{l},{t},{r}\n"));
            }
        }
        s
    }
}

struct Layer<'m> {
    name: &'m str,
    lif: LifConfig,
    state: LifTapeState,
}

impl SpikingModel {
    pub fn threshold(&self, layer: &str) -> f64 {
        self.thresholds
            .iter()
            .find(|(n, _)| n == layer)
            .map(|(_, t)| *t)
            .expect("threshold for every spiking layer")
    }

    /// Inner repeats of each event group.
    pub fn repeats(&self) -> usize {
        self.time_steps / self.params.config.groups
    }

    /// SNN forward for one window on `tape`. `groups` are the raw per-group
    /// `[1, 2, H, W]` count images; `state` is the carried state in network
    /// units. Returns the flow in pixels, the new state and firing rates.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        bound: &Bound<'_>,
        groups: &[Tensor],
        state: Var,
    ) -> Result<(Var, Var, FiringReport)> {
        let cfg = &self.params.config;
        let n = cfg.groups;
        if groups.len() != n {
            return Err(Error::shape(
                "forward_snn",
                format!("expected {n} event groups, got {}", groups.len()),
            ));
        }
        for g in groups {
            let (_, c, h, w) = g.dims4()?;
            if (c, h, w) != (2, cfg.height, cfg.width) {
                return Err(Error::shape(
                    "forward_snn",
                    format!("group shape {:?}, expected [1, 2, {}, {}]", g.shape(), cfg.height, cfg.width),
                ));
            }
        }
        let names: Vec<String> = self.thresholds.iter().map(|(n, _)| n.clone()).collect();
        let mut layers: Vec<Layer<'_>> = self
            .thresholds
            .iter()
            .map(|(name, th)| {
                Ok(Layer {
                    name,
                    lif: LifConfig::new(*th, 0.0, self.reset)?,
                    state: LifTapeState::default(),
                })
            })
            .collect::<Result<_>>()?;
        let mut rates = vec![Vec::with_capacity(self.time_steps); layers.len()];

        // ConvGRU1 sees the same carried state for every group, so its output
        // per group is computed once.
        let cell = ConvGruVars::from_bound(bound, "convgru1");
        let mut augmented = Vec::with_capacity(n);
        for g in groups {
            let x = tape.constant(normalize_counts(g)?);
            augmented.push(convgru_step(tape, &cell, x, state)?);
        }
        let enc1_w = bound.var("encoder1.weight");
        let enc1_slots: Vec<Var> = (0..n)
            .map(|i| tape.slice(enc1_w, 1, 2 * i, 2))
            .collect::<Result<_>>()?;
        // Each group drives only its own input channels of encoder1, scaled
        // so that the drive summed over a presentation of all groups equals
        // the ANN pre-activation.
        let scaled: Vec<Var> = augmented.iter().map(|&a| tape.scale(a, n as f64)).collect();

        let decay_gen = (-self.tau.generator).exp();
        let mut readout: Option<Var> = None;
        let mut gain = 0.0;

        for t in 0..self.time_steps {
            let gi = t / self.repeats();
            let mut li = 0;
            let mut fire = |tape: &mut Tape, layers: &mut Vec<Layer<'_>>, drive: Var| -> Result<Var> {
                let l = &mut layers[li];
                let s = l.state.step(tape, &l.lif, drive)?;
                rates[li].push(mean(tape.value(s).data()));
                let out = tape.scale(s, l.lif.threshold);
                li += 1;
                Ok(out)
            };
            let conv = |tape: &mut Tape, name: &str, x: Var, stride: usize| {
                tape.conv2d(
                    x,
                    bound.var(&format!("{name}.weight")),
                    Some(bound.var(&format!("{name}.bias"))),
                    stride,
                    1,
                )
            };

            let c = tape.conv2d(scaled[gi], enc1_slots[gi], Some(bound.var("encoder1.bias")), 2, 1)?;
            let f1 = fire(tape, &mut layers, c)?;
            let c = conv(tape, "encoder2", f1, 2)?;
            let f2 = fire(tape, &mut layers, c)?;
            let c = conv(tape, "encoder3", f2, 2)?;
            let f3 = fire(tape, &mut layers, c)?;
            let c = conv(tape, "encoder4", f3, 2)?;
            let mut b = fire(tape, &mut layers, c)?;
            for blk in 1..=2 {
                let c = conv(tape, &format!("block{blk}.conv1"), b, 1)?;
                let h = fire(tape, &mut layers, c)?;
                let c = conv(tape, &format!("block{blk}.conv2"), h, 1)?;
                let c = tape.add(c, b)?;
                b = fire(tape, &mut layers, c)?;
            }
            let mut d = fuse(tape, bound, f1, f2, f3, b)?;
            for i in 1..=cfg.decoders {
                let c = conv(tape, &format!("decoder{i}"), d, 1)?;
                d = fire(tape, &mut layers, c)?;
            }
            debug_assert_eq!(layers[li - 1].name, names[li - 1]);
            let g = generator(tape, bound, d)?;
            readout = Some(match readout {
                None => g,
                Some(r) => {
                    let r = tape.scale(r, decay_gen);
                    tape.add(r, g)?
                }
            });
            gain = decay_gen * gain + 1.0;
        }
        let readout = tape.scale(readout.expect("at least one step"), 1.0 / gain);
        let carried = tape.scale(state, (-self.tau.convgru2).exp());
        let (flow, out) = refine(tape, bound, readout, carried)?;
        Ok((flow, out, FiringReport { layers: names, rates }))
    }

    /// Inference-only SNN forward.
    pub fn forward(&self, groups: &[Tensor], state: &ModelState) -> Result<(FlowField, ModelState, FiringReport)> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let s = tape.constant(state.state_tensor(&self.params.config)?);
        let (flow, _, report) = self.forward_tape(&mut tape, &bound, groups, s)?;
        let flow = FlowField::from_tensor(tape.value(flow))?;
        Ok((
            flow.clone(),
            ModelState {
                prev_flow: Some(flow),
            },
            report,
        ))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut cp = Checkpoint::from_ann(&self.params);
        for (name, th) in &self.thresholds {
            cp.entries.push((format!("{name}.theta"), Tensor::scalar(*th)));
        }
        cp.entries.extend([
            ("tau.generator".to_string(), Tensor::scalar(self.tau.generator)),
            ("tau.convgru2".to_string(), Tensor::scalar(self.tau.convgru2)),
            ("meta.T".to_string(), Tensor::scalar(self.time_steps as f64)),
            ("meta.reset".to_string(), Tensor::scalar(self.reset.code())),
        ]);
        cp
    }

    pub fn from_checkpoint(path: &Path, cp: &Checkpoint) -> Result<Self> {
        let bad = |d: String| Error::format(path, d);
        if !cp.is_spiking() {
            return Err(bad("checkpoint holds an ANN; convert it first".into()));
        }
        let skip = |n: &str| n.ends_with(".theta") || n.starts_with("tau.");
        let params = cp.ann_params(skip).map_err(|e| bad(e.to_string()))?;
        let scalar = |name: &str| cp.scalar(name).ok_or_else(|| bad(format!("missing scalar {name}")));
        let thresholds = params
            .spiking_layers()
            .into_iter()
            .map(|l| Ok((l.name.clone(), scalar(&format!("{}.theta", l.name))?)))
            .collect::<Result<Vec<_>>>()?;
        let reset = ResetMode::from_code(scalar("meta.reset")?).ok_or_else(|| bad("bad meta.reset".into()))?;
        let model = SpikingModel {
            tau: TauMap::new(scalar("tau.generator")?, scalar("tau.convgru2")?).map_err(|e| bad(e.to_string()))?,
            time_steps: scalar("meta.T")? as usize,
            thresholds,
            reset,
            params,
        };
        if model.time_steps == 0 || model.time_steps % model.params.config.groups != 0 {
            return Err(bad(format!("meta.T = {} is not a multiple of the group count", model.time_steps)));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_checkpoint(path, &Checkpoint::load(path)?)
    }

    /// Threshold table as a map, for reporting.
    pub fn threshold_map(&self) -> HashMap<&str, f64> {
        self.thresholds.iter().map(|(n, t)| (n.as_str(), *t)).collect()
    }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len().max(1) as f64
}

/// Human-readable firing summary: mean rate per layer and overall.
pub fn firing_report(report: &FiringReport) -> String {
    let mut s = String::new();
    let mut total = 0.0;
    for l in &report.layers {
        let r = report.mean_rate(l).unwrap_or(0.0);
        total += r;
        s.push_str(&format!("{l:<14} {r:.4}\n"));
    }
    s.push_str(&format!("{:<14} {:.4}\n", "mean", total / report.layers.len().max(1) as f64));
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkConfig;

    fn small() -> STFlowNetParams {
        let cfg = NetworkConfig {
            base_channels: 4,
            groups: 2,
            height: 16,
            width: 16,
            ..NetworkConfig::default()
        };
        STFlowNetParams::init(cfg, 5).unwrap()
    }

    #[test]
    fn thresholds_copy_ceilings() {
        let mut p = small();
        p.get_mut("encoder3.lambda").unwrap().data_mut()[0] = 0.7;
        let m = convert_a2s(&p, 4, TauMap::new(0.1, 0.2).unwrap()).unwrap();
        assert_eq!(m.threshold_map()["encoder3"], 0.7);
        assert_eq!(m.thresholds.len(), 9);
        assert_eq!(m.params, p);
        assert_eq!(m.repeats(), 2);
    }

    #[test]
    fn step_count_must_cover_groups() {
        let p = small();
        assert!(convert_a2s(&p, 0, TauMap::default()).is_err());
        assert!(convert_a2s(&p, 3, TauMap::default()).is_err());
        assert!(convert_a2s(&p, 2, TauMap::new(-1.0, 0.0).unwrap_or_default()).is_ok());
    }

    #[test]
    fn snn_forward_produces_rates_per_step() {
        let m = convert_a2s(&small(), 4, TauMap::default()).unwrap();
        let groups = vec![Tensor::from_fn(&[1, 2, 16, 16], |i| (i % 3) as f64); 2];
        let (flow, state, rep) = m.forward(&groups, &ModelState::new()).unwrap();
        assert!(flow.is_finite());
        assert!(state.prev_flow.is_some());
        assert_eq!(rep.rates.len(), 9);
        assert!(rep.rates.iter().all(|r| r.len() == 4 && r.iter().all(|&x| (0.0..=1.0).contains(&x))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = convert_a2s(&small(), 2, TauMap::new(0.3, 0.6).unwrap()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.stfw");
        m.save(&path).unwrap();
        let back = SpikingModel::load(&path).unwrap();
        assert_eq!(back.time_steps, 2);
        assert_eq!(back.reset, ResetMode::Soft);
        assert!((back.tau.convgru2 - 0.6).abs() < 1e-7);
        assert!(crate::network::load_ann(&path).is_err());
    }
}
