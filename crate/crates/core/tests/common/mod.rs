#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stflow::model::FlowModel;
use stflow::network::{ModelState, NetworkConfig, STFlowNetParams};
use stflow::spiking::{lif_step, LifConfig, LifState, ResetMode};
use stflow::tensor::{Tape, Tensor, Var};
use stflow::training::{total_loss_tape, Dataset, LossConfig, SyntheticSet};
use stflow::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Zero-padded cross-correlation written as a direct loop over output
/// pixels, channels and taps.
pub fn conv_loop(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let (b, cin, h, wd) = x.dims4().unwrap();
    let (cout, _, kh, kw) = w.dims4().unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let xi = |n: usize, c: usize, y: isize, xx: isize| -> f64 {
        if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
            0.0
        } else {
            x.data()[((n * cin + c) * h + y as usize) * wd + xx as usize]
        }
    };
    let mut out = Vec::with_capacity(b * cout * oh * ow);
    for n in 0..b {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |b| b.data()[co]);
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let y = (oy * stride + ky) as isize - pad as isize;
                                let xx = (ox * stride + kx) as isize - pad as isize;
                                acc += w.data()[((co * cin + ci) * kh + ky) * kw + kx] * xi(n, ci, y, xx);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    Tensor::new(vec![b, cout, oh, ow], out).unwrap()
}

/// Elementwise map over two equal-shape tensors.
pub fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.shape(), b.shape());
    Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect()).unwrap()
}

/// Channel concatenation of `[1, C, H, W]` tensors.
pub fn cat_channels(parts: &[&Tensor]) -> Tensor {
    let (_, _, h, w) = parts[0].dims4().unwrap();
    let c: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let data = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    Tensor::new(vec![1, c, h, w], data).unwrap()
}

pub fn qcfs_formula(x: f64, lambda: f64, levels: usize, shift: f64) -> f64 {
    let l = levels as f64;
    let k = (x * l / lambda + shift).floor();
    lambda * (k / l).clamp(0.0, 1.0)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Initial parameters with small random biases, so that no bias sits at an
/// activation kink by construction.
pub fn params_with_bias(cfg: NetworkConfig, seed: u64) -> STFlowNetParams {
    let mut p = STFlowNetParams::init(cfg, seed).unwrap();
    let mut r = rng(seed + 100);
    let names: Vec<String> = p.names().filter(|n| n.ends_with(".bias")).map(String::from).collect();
    for n in names {
        p.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|v| *v = r.gen_range(-0.1..0.1));
    }
    p
}

/// Two windows of the model on a relaxed tape, scalarized as the training
/// loss plus a random contraction of each predicted flow.
pub fn relaxed_objective(model: &FlowModel, data: &Dataset, tape: &mut Tape, grad: bool) -> Result<(Var, Vec<Var>)> {
    let params = model.params();
    let bound = params.bind(tape, grad);
    let vars = bound.vars().to_vec();
    let mut state = tape.constant(ModelState::new().state_tensor(&params.config)?);
    let mut r = rng(77);
    let mut total: Option<Var> = None;
    for w in &data.sequences[0].windows {
        let (flow, next, _) = model.forward_tape(tape, &bound, w, state)?;
        let (loss, _) = total_loss_tape(tape, flow, w.events.clone(), w.window, &LossConfig::default())?;
        let weights = tape.constant(random(&mut r, tape.value(flow).shape()));
        let c = tape.mul(flow, weights)?;
        let c = tape.sum(c);
        let c = tape.scale(c, 0.01);
        let term = tape.add(loss, c)?;
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
        state = next;
    }
    Ok((total.unwrap(), vars))
}

/// Central differences on `per_tensor` sampled elements of every parameter
/// tensor. Returns the worst relative error and where it occurred.
pub fn sampled_full_model_check(model: &FlowModel, data: &Dataset, per_tensor: usize, eps: f64) -> (f64, String) {
    let mut tape = Tape::relaxed();
    let (loss, vars) = relaxed_objective(model, data, &mut tape, true).unwrap();
    tape.backward(loss).unwrap();
    let grads: Vec<Tensor> = vars
        .iter()
        .zip(model.params().iter())
        .map(|(&v, (_, t))| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |m: &FlowModel| {
        let mut tape = Tape::relaxed();
        let (loss, _) = relaxed_objective(m, data, &mut tape, false).unwrap();
        tape.value(loss).data()[0]
    };
    let mut r = rng(9);
    let names: Vec<String> = model.params().names().map(String::from).collect();
    let mut worst = (0.0, String::new());
    for (i, name) in names.iter().enumerate() {
        let n = grads[i].numel();
        for _ in 0..per_tensor.min(n) {
            let e = r.gen_range(0..n);
            let mut probe = model.clone();
            let orig = probe.params().get(name).unwrap().data()[e];
            probe.params_mut().get_mut(name).unwrap().data_mut()[e] = orig + eps;
            let plus = eval(&probe);
            probe.params_mut().get_mut(name).unwrap().data_mut()[e] = orig - eps;
            let minus = eval(&probe);
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = grads[i].data()[e];
            let err = (analytic - numeric).abs() / numeric.abs().max(analytic.abs()).max(1e-3);
            if err > worst.0 {
                worst = (err, format!("{name}[{e}]: analytic {analytic:e}, numeric {numeric:e}"));
            }
        }
    }
    worst
}

/// Sets every QCFS ceiling to `lambda`. Fresh fan-in initialized layers
/// produce pre-activations well below 1, so the default ceiling leaves them
/// silent.
pub fn with_ceilings(mut p: STFlowNetParams, lambda: f64) -> STFlowNetParams {
    let names: Vec<String> = p.names().filter(|n| n.ends_with(".lambda")).map(String::from).collect();
    for n in names {
        *p.get_mut(&n).unwrap() = Tensor::scalar(lambda);
    }
    p
}

pub fn desk_data() -> Dataset {
    Dataset::synthetic(&SyntheticSet {
        width: 16,
        height: 16,
        groups: 2,
        sequences: 1,
        windows: 2,
        velocity: (3.0, 1.0),
        seed: 4,
        ..SyntheticSet::default()
    })
    .unwrap()
}

/// Runs `drive` held constant for `steps` steps and returns
/// `theta * spikes / steps` per neuron.
pub fn held_rate(drive: &[f64], theta: f64, steps: usize) -> Vec<f64> {
    let cfg = LifConfig::new(theta, 0.0, ResetMode::Soft).unwrap();
    let mut st = LifState::new(drive.len());
    let mut count = vec![0.0; drive.len()];
    for _ in 0..steps {
        let s = lif_step(&cfg, &mut st, drive).unwrap();
        count.iter_mut().zip(&s).for_each(|(c, s)| *c += s);
    }
    count.iter().map(|c| theta * c / steps as f64).collect()
}
