use super::params::{Bound, NetworkConfig, STFlowNetParams};
use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::tensor::{Tape, Tensor, Var};

pub use crate::tensor::ops::qcfs;

/// Flow carried from one window to the next.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelState {
    /// Previous prediction in pixels; `None` before the first window.
    pub prev_flow: Option<FlowField>,
}

impl ModelState {
    pub fn new() -> Self {
        Self::default()
    }

    /// The recurrent state in network units, `[1, 2, H, W]`.
    pub fn state_tensor(&self, cfg: &NetworkConfig) -> Result<Tensor> {
        match &self.prev_flow {
            None => Ok(Tensor::zeros(&[1, 2, cfg.height, cfg.width])),
            Some(f) => {
                if (f.width, f.height) != (cfg.width, cfg.height) {
                    return Err(Error::shape(
                        "state",
                        format!("carried flow is {}x{}, network expects {}x{}", f.width, f.height, cfg.width, cfg.height),
                    ));
                }
                Ok(f.to_tensor().map(|v| v / cfg.flow_scale))
            }
        }
    }
}

/// Divides each channel plane by its maximum; all-zero planes stay zero.
pub fn normalize_counts(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let mut out = x.clone();
    for plane in out.data_mut().chunks_mut(h * w).take(b * c) {
        let m = plane.iter().cloned().fold(0.0f64, f64::max);
        if m > 0.0 {
            plane.iter_mut().for_each(|v| *v /= m);
        }
    }
    Ok(out)
}

/// Tape handles of one convolutional GRU cell.
#[derive(Clone, Copy, Debug)]
pub struct ConvGruVars {
    pub reset: (Var, Var),
    pub update: (Var, Var),
    pub candidate: (Var, Var),
}

impl ConvGruVars {
    pub fn from_bound(bound: &Bound<'_>, prefix: &str) -> Self {
        let pair = |g: &str| {
            (
                bound.var(&format!("{prefix}.{g}.weight")),
                bound.var(&format!("{prefix}.{g}.bias")),
            )
        };
        Self {
            reset: pair("xi_r"),
            update: pair("xi_z"),
            candidate: pair("xi_i"),
        }
    }
}

/// One ConvGRU update of `input` against `state`.
///
/// The reset gate has the state's channel count; the update gate and the
/// candidate have the input's. When the input is wider, the state is tiled
/// along channels before blending, so the output has the input's shape.
pub fn convgru_step(tape: &mut Tape, cell: &ConvGruVars, input: Var, state: Var) -> Result<Var> {
    let (_, cin, _, _) = tape.value(input).dims4()?;
    let (_, cs, _, _) = tape.value(state).dims4()?;
    if cin % cs != 0 {
        return Err(Error::shape(
            "convgru_step",
            format!("input channels {cin} not a multiple of state channels {cs}"),
        ));
    }
    let joined = tape.concat(&[state, input], 1)?;
    let r = tape.conv2d(joined, cell.reset.0, Some(cell.reset.1), 1, 1)?;
    let r = tape.sigmoid(r);
    let z = tape.conv2d(joined, cell.update.0, Some(cell.update.1), 1, 1)?;
    let z = tape.sigmoid(z);
    let gated = tape.mul(r, state)?;
    let joined = tape.concat(&[gated, input], 1)?;
    let cand = tape.conv2d(joined, cell.candidate.0, Some(cell.candidate.1), 1, 1)?;
    let cand = tape.tanh(cand);
    let lifted = if cin == cs {
        state
    } else {
        tape.concat(&vec![state; cin / cs], 1)?
    };
    let keep = tape.one_minus(z);
    let kept = tape.mul(keep, lifted)?;
    let fresh = tape.mul(z, cand)?;
    tape.add(kept, fresh)
}

fn qcfs_layer(tape: &mut Tape, bound: &Bound<'_>, name: &str, x: Var, stride: usize) -> Result<Var> {
    let cfg = &bound.params.config;
    let c = tape.conv2d(
        x,
        bound.var(&format!("{name}.weight")),
        Some(bound.var(&format!("{name}.bias"))),
        stride,
        1,
    )?;
    tape.qcfs(c, bound.var(&format!("{name}.lambda")), cfg.levels, cfg.shift())
}

/// `qcfs(conv2(qcfs(conv1(x))) + x)` for the block named `prefix`.
pub fn residual_block(tape: &mut Tape, bound: &Bound<'_>, prefix: &str, x: Var) -> Result<Var> {
    let cfg = &bound.params.config;
    let h = qcfs_layer(tape, bound, &format!("{prefix}.conv1"), x, 1)?;
    let c = tape.conv2d(
        h,
        bound.var(&format!("{prefix}.conv2.weight")),
        Some(bound.var(&format!("{prefix}.conv2.bias"))),
        1,
        1,
    )?;
    let c = tape.add(c, x)?;
    tape.qcfs(c, bound.var(&format!("{prefix}.conv2.lambda")), cfg.levels, cfg.shift())
}

pub(crate) fn fuse(tape: &mut Tape, bound: &Bound<'_>, f1: Var, f2: Var, f3: Var, bottleneck: Var) -> Result<Var> {
    let mut parts = Vec::with_capacity(4);
    for (name, x, stride) in [("fuse8", f1, 8), ("fuse4", f2, 4), ("fuse2", f3, 2)] {
        parts.push(tape.conv2d(
            x,
            bound.var(&format!("{name}.weight")),
            Some(bound.var(&format!("{name}.bias"))),
            stride,
            1,
        )?);
    }
    parts.push(bottleneck);
    let cat = tape.concat(&parts, 1)?;
    tape.upsample(cat, 2)
}

pub(crate) fn generator(tape: &mut Tape, bound: &Bound<'_>, x: Var) -> Result<Var> {
    tape.conv2d(x, bound.var("generator.weight"), Some(bound.var("generator.bias")), 1, 1)
}

/// Final refinement against the carried state; returns `(flow_px, state)`.
pub(crate) fn refine(tape: &mut Tape, bound: &Bound<'_>, basic_low: Var, state: Var) -> Result<(Var, Var)> {
    let basic = tape.upsample(basic_low, 8)?;
    let cell = ConvGruVars::from_bound(bound, "convgru2");
    let out = convgru_step(tape, &cell, basic, state)?;
    let flow = tape.scale(out, bound.params.config.flow_scale);
    Ok((flow, out))
}

/// ANN forward for one window. `counts` is the raw `[1, 2N, H, W]` event
/// image and `state` the carried state in network units. Returns the flow in
/// pixels and the new state.
pub fn forward_ann_tape(tape: &mut Tape, bound: &Bound<'_>, counts: &Tensor, state: Var) -> Result<(Var, Var)> {
    let cfg = &bound.params.config;
    let (_, c, h, w) = counts.dims4()?;
    if c != 2 * cfg.groups || h != cfg.height || w != cfg.width {
        return Err(Error::shape(
            "forward_ann",
            format!(
                "expected [1, {}, {}, {}] input, got {:?}",
                2 * cfg.groups,
                cfg.height,
                cfg.width,
                counts.shape()
            ),
        ));
    }
    let x = tape.constant(normalize_counts(counts)?);
    let cell = ConvGruVars::from_bound(bound, "convgru1");
    let mut augmented = Vec::with_capacity(cfg.groups);
    for n in 0..cfg.groups {
        let group = tape.slice(x, 1, 2 * n, 2)?;
        augmented.push(convgru_step(tape, &cell, group, state)?);
    }
    let x = tape.concat(&augmented, 1)?;
    let f1 = qcfs_layer(tape, bound, "encoder1", x, 2)?;
    let f2 = qcfs_layer(tape, bound, "encoder2", f1, 2)?;
    let f3 = qcfs_layer(tape, bound, "encoder3", f2, 2)?;
    let f4 = qcfs_layer(tape, bound, "encoder4", f3, 2)?;
    let b = residual_block(tape, bound, "block1", f4)?;
    let b = residual_block(tape, bound, "block2", b)?;
    let mut d = fuse(tape, bound, f1, f2, f3, b)?;
    for i in 1..=cfg.decoders {
        d = qcfs_layer(tape, bound, &format!("decoder{i}"), d, 1)?;
    }
    let g = generator(tape, bound, d)?;
    refine(tape, bound, g, state)
}

/// Inference-only ANN forward.
pub fn forward_ann(params: &STFlowNetParams, counts: &Tensor, state: &ModelState) -> Result<(FlowField, ModelState)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let s = tape.constant(state.state_tensor(&params.config)?);
    let (flow, _) = forward_ann_tape(&mut tape, &bound, counts, s)?;
    let flow = FlowField::from_tensor(tape.value(flow))?;
    Ok((
        flow.clone(),
        ModelState {
            prev_flow: Some(flow),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> NetworkConfig {
        NetworkConfig {
            base_channels: 4,
            groups: 2,
            height: 16,
            width: 16,
            ..NetworkConfig::default()
        }
    }

    fn zero_cell(tape: &mut Tape, cin: usize, cs: usize) -> ConvGruVars {
        let mut pair = |cout: usize| {
            (
                tape.leaf(Tensor::zeros(&[cout, cin + cs, 3, 3]), false),
                tape.leaf(Tensor::zeros(&[cout]), false),
            )
        };
        ConvGruVars {
            reset: pair(cs),
            update: pair(cin),
            candidate: pair(cin),
        }
    }

    #[test]
    fn zero_weights_halve_the_lifted_state() {
        let mut tape = Tape::new();
        let cell = zero_cell(&mut tape, 4, 2);
        let input = tape.constant(Tensor::from_fn(&[1, 4, 3, 3], |i| i as f64));
        let state = tape.constant(Tensor::from_fn(&[1, 2, 3, 3], |i| 1.0 + i as f64));
        let out = convgru_step(&mut tape, &cell, input, state).unwrap();
        let s = tape.value(state).data().to_vec();
        let expected: Vec<f64> = s.iter().chain(&s).map(|v| 0.5 * v).collect();
        assert_eq!(tape.value(out).data(), &expected[..]);
    }

    #[test]
    fn normalization_scales_each_plane() {
        let x = Tensor::new(vec![1, 2, 1, 2], vec![2.0, 4.0, 0.0, 0.0]).unwrap();
        assert_eq!(normalize_counts(&x).unwrap().data(), &[0.5, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn ann_output_shape_and_state() {
        let p = STFlowNetParams::init(small(), 3).unwrap();
        let counts = Tensor::from_fn(&[1, 4, 16, 16], |i| ((i * 7) % 5) as f64);
        let (flow, state) = forward_ann(&p, &counts, &ModelState::new()).unwrap();
        assert_eq!((flow.width, flow.height), (16, 16));
        assert!(flow.is_finite());
        assert!(flow.u.iter().all(|u| u.abs() < p.config.flow_scale));
        assert_eq!(state.prev_flow.as_ref(), Some(&flow));
    }

    #[test]
    fn wrong_input_channels_is_a_shape_error() {
        let p = STFlowNetParams::init(small(), 3).unwrap();
        let counts = Tensor::zeros(&[1, 6, 16, 16]);
        let err = forward_ann(&p, &counts, &ModelState::new()).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }), "{err}");
    }
}
