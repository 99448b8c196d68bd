mod common;

use common::rng;
use proptest::prelude::*;
use rand::Rng;
use stflow::eval::{aee, aee_windows, fwl, rsat, AeeMode};
use stflow::events::{group_events, partition_bounds, synth_translating_pattern, Event, EventStream, Polarity, SynthConfig, TimeWindow};
use stflow::flow::{FlowField, GroundTruthFlow};
use stflow::network::{NetworkConfig, STFlowNetParams};
use stflow::spiking::{convert_a2s, TauMap};
use stflow::tensor::{grad_check, Tape, Tensor};
use stflow::training::{
    bisnn_train, contrast_loss, contrast_loss_tape, direct_stbp_train, smoothness_loss, smoothness_loss_tape,
    stbp_train, total_loss, train_ann, Adam, Dataset, LossConfig, SyntheticSet, TrainConfig,
};

fn random_flow(r: &mut impl Rng, w: usize, h: usize, scale: f64) -> FlowField {
    let mut f = FlowField::zeros(w, h);
    for i in 0..w * h {
        f.u[i] = r.gen_range(-scale..scale);
        f.v[i] = r.gen_range(-scale..scale);
    }
    f
}

/// Events at dyadic timestamps inside `(0, 1)`, so shifts and scalings by
/// powers of two are exact.
fn dyadic_events(r: &mut impl Rng, k: usize, w: usize, h: usize) -> EventStream {
    let events = (0..k)
        .map(|_| Event {
            x: r.gen_range(0..w) as u16,
            y: r.gen_range(0..h) as u16,
            t: r.gen_range(1..1024) as f64 / 1024.0,
            p: if r.gen_bool(0.5) { Polarity::Positive } else { Polarity::Negative },
        })
        .collect();
    EventStream::new(w, h, events).unwrap()
}

fn map_times(s: &EventStream, f: impl Fn(f64) -> f64) -> EventStream {
    let events = s.events.iter().map(|e| Event { t: f(e.t), ..*e }).collect();
    EventStream::new(s.width, s.height, events).unwrap()
}

#[test]
fn gt_flow_beats_zero_flow_on_synthetic_patterns() {
    for (v, seed) in [((6.0, 0.0), 0), ((0.0, -5.0), 1), ((4.0, 3.0), 2), ((-6.0, 2.0), 3)] {
        let cfg = SynthConfig::new(32, 32, v, seed);
        let (events, gt) = synth_translating_pattern(&cfg).unwrap();
        let w = TimeWindow::new(0.0, cfg.duration).unwrap();
        let at_gt = contrast_loss(&gt.flow, &events, w, 1e-9).unwrap().value;
        let at_zero = contrast_loss(&FlowField::zeros(32, 32), &events, w, 1e-9).unwrap().value;
        assert!(at_gt < at_zero, "{v:?}: {at_gt} vs {at_zero}");
    }
}

#[test]
fn zero_smoothness_weight_gives_the_contrast_loss() {
    let mut r = rng(1);
    let events = dyadic_events(&mut r, 200, 12, 9);
    let flow = random_flow(&mut r, 12, 9, 2.0);
    let w = TimeWindow::new(0.0, 1.0).unwrap();
    let cfg = LossConfig {
        smooth_weight: 0.0,
        ..LossConfig::default()
    };
    let t = total_loss(&flow, &events, w, &cfg).unwrap();
    assert_eq!(t.total, contrast_loss(&flow, &events, w, cfg.eps_w).unwrap().value);
}

/// Neighbour differences visited explicitly, both components.
fn smoothness_loop(f: &FlowField, eps: f64, alpha: f64) -> f64 {
    let (w, h) = (f.width, f.height);
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for plane in [&f.u, &f.v] {
        for y in 0..h {
            for x in 0..w {
                for (nx, ny) in [(x + 1, y), (x, y + 1)] {
                    if nx < w && ny < h {
                        let d = plane[ny * w + nx] - plane[y * w + x];
                        sum += (d * d + eps * eps).powf(alpha);
                        pairs += 1;
                    }
                }
            }
        }
    }
    sum / pairs as f64
}

#[test]
fn smoothness_matches_loop_oracle() {
    for seed in 0..5 {
        let mut r = rng(seed);
        let f = random_flow(&mut r, 8, 8, 3.0);
        for (eps, alpha) in [(1e-3, 0.5), (0.1, 0.45), (1e-2, 1.0)] {
            let cfg = LossConfig {
                charbonnier_eps: eps,
                charbonnier_alpha: alpha,
                ..LossConfig::default()
            };
            let got = smoothness_loss(&f, &cfg);
            let want = smoothness_loop(&f, eps, alpha);
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }
}

#[test]
fn loss_gradients_match_finite_differences() {
    let mut r = rng(5);
    let events = std::sync::Arc::new(dyadic_events(&mut r, 150, 8, 6));
    let w = TimeWindow::new(0.0, 1.0).unwrap();
    let flow = random_flow(&mut r, 8, 6, 2.0).to_tensor();
    let cfg = LossConfig::default();
    let smooth = grad_check(Tape::new, |t, v| smoothness_loss_tape(t, v[0], &cfg), &[flow.clone()], 1e-6).unwrap();
    assert!(smooth.max_relative_error < 1e-6, "{smooth:?}");
    // the active-pixel count is piecewise constant; a small step stays on one piece
    let ev = events.clone();
    let contrast = grad_check(Tape::new, move |t, v| contrast_loss_tape(t, v[0], ev.clone(), w, 1e-9), &[flow], 1e-7).unwrap();
    assert!(contrast.max_relative_error < 1e-4, "{contrast:?}");
}

#[test]
fn adam_three_step_hand_trace() {
    let grads = [0.5, -0.2, 0.1];
    let (lr, b1, b2, eps) = (0.01, 0.9, 0.999, 1e-8);
    let mut opt = Adam::new(lr, 1.0).unwrap();
    let mut p = Tensor::scalar(1.0);
    let (mut m, mut v, mut want) = (0.0, 0.0, 1.0);
    for (t, g) in grads.iter().enumerate() {
        opt.step([&mut p], &[Some(Tensor::scalar(*g))]).unwrap();
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let k = (t + 1) as i32;
        want -= lr * (m / (1.0 - b1.powi(k))) / ((v / (1.0 - b2.powi(k))).sqrt() + eps);
        let (mm, vv) = opt.moments(0).unwrap();
        assert!((mm.data()[0] - m).abs() < 1e-15);
        assert!((vv.data()[0] - v).abs() < 1e-15);
        assert!((p.data()[0] - want).abs() < 1e-15);
    }
    // frozen by hand: m = 0.05, 0.025, 0.0325 after the three steps
    assert!((m - 0.0325).abs() < 1e-15);
    opt.end_epoch();
    assert_eq!(opt.lr, lr);
}

#[test]
fn adam_steps_approach_lr_under_constant_gradient() {
    let mut opt = Adam::new(0.1, 1.0).unwrap();
    let mut p = Tensor::scalar(0.0);
    let mut last = 0.0;
    for _ in 0..200 {
        let before = p.data()[0];
        opt.step([&mut p], &[Some(Tensor::scalar(-3.0))]).unwrap();
        last = p.data()[0] - before;
    }
    assert!((last - 0.1).abs() < 1e-6, "{last}");
}

fn tiny_net() -> NetworkConfig {
    NetworkConfig {
        base_channels: 2,
        groups: 2,
        height: 16,
        width: 16,
        ..NetworkConfig::default()
    }
}

fn tiny_data(seed: u64) -> Dataset {
    Dataset::synthetic(&SyntheticSet {
        width: 16,
        height: 16,
        groups: 2,
        sequences: 4,
        windows: 2,
        velocity: (3.0, 0.0),
        seed,
        ..SyntheticSet::default()
    })
    .unwrap()
}

fn quick(iterations: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        epochs_ann: 10,
        epochs_bisnn: 10,
        batch_size: 2,
        lr,
        max_iterations: Some(iterations),
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let p = STFlowNetParams::init(tiny_net(), 0).unwrap();
    let (q, h) = train_ann(&p, &tiny_data(0), &quick(1, 0.0)).unwrap();
    assert_eq!(h.len(), 1);
    assert_eq!(q, p);
}

#[test]
fn history_has_one_row_per_iteration_and_is_deterministic() {
    let p = STFlowNetParams::init(tiny_net(), 1).unwrap();
    let data = tiny_data(1);
    let (a, ha) = train_ann(&p, &data, &quick(5, 1e-3)).unwrap();
    let (b, hb) = train_ann(&p, &data, &quick(5, 1e-3)).unwrap();
    assert_eq!(ha.len(), 5);
    assert_eq!(ha.to_csv(), hb.to_csv());
    assert_eq!(ha, hb);
    assert_eq!(a, b);
    assert!(ha.to_csv().starts_with("iter,epoch,contrast,smooth,total,lr\n"));
    // two sequences per batch, four sequences: two iterations per epoch
    let epochs: Vec<usize> = ha.rows.iter().map(|r| r.epoch).collect();
    assert_eq!(epochs, vec![0, 0, 1, 1, 2]);
}

#[test]
fn learning_rate_decays_per_epoch() {
    let p = STFlowNetParams::init(tiny_net(), 1).unwrap();
    let cfg = TrainConfig {
        gamma: 0.5,
        ..quick(4, 1e-3)
    };
    let (_, h) = train_ann(&p, &tiny_data(1), &cfg).unwrap();
    let lrs: Vec<f64> = h.rows.iter().map(|r| r.lr).collect();
    assert_eq!(lrs, vec![1e-3, 1e-3, 5e-4, 5e-4]);
}

#[test]
fn no_retraining_is_plain_conversion() {
    let p = STFlowNetParams::init(tiny_net(), 2).unwrap();
    let tau = TauMap::new(0.2, 0.1).unwrap();
    let cfg = TrainConfig {
        epochs_bisnn: 0,
        ..quick(10, 1e-3)
    };
    let (m, h) = bisnn_train(&p, &tiny_data(2), &cfg, 4, tau).unwrap();
    assert!(h.is_empty());
    assert_eq!(m, convert_a2s(&p, 4, tau).unwrap());
}

#[test]
fn retraining_moves_weights_but_not_biological_parameters() {
    let p = STFlowNetParams::init(tiny_net(), 3).unwrap();
    let tau = TauMap::new(0.2, 0.1).unwrap();
    let converted = convert_a2s(&p, 2, tau).unwrap();
    let (m, h) = stbp_train(&converted, &tiny_data(3), &quick(2, 1e-2)).unwrap();
    assert_eq!(h.len(), 2);
    assert_eq!(m.thresholds, converted.thresholds);
    assert_eq!(m.tau, converted.tau);
    assert_eq!(m.time_steps, converted.time_steps);
    let moved = m
        .params
        .iter()
        .zip(converted.params.iter())
        .any(|((_, a), (_, b))| a.max_abs_diff(b) > 0.0);
    assert!(moved);
    for ((name, a), (_, b)) in m.params.iter().zip(converted.params.iter()) {
        if name.ends_with(".lambda") {
            assert_eq!(a, b, "{name}");
        }
    }
}

#[test]
fn direct_stbp_differs_from_bisnn_only_by_initialization() {
    let cfg = quick(2, 1e-3);
    let tau = TauMap::default();
    let data = tiny_data(4);
    let (direct, hd) = direct_stbp_train(&tiny_net(), &data, &cfg, 2, tau).unwrap();
    let init = STFlowNetParams::init(tiny_net(), cfg.seed).unwrap();
    let (bisnn, hb) = bisnn_train(&init, &data, &cfg, 2, tau).unwrap();
    assert_eq!(direct, bisnn);
    assert_eq!(hd, hb);
}

#[test]
fn empty_dataset_rejected() {
    let p = STFlowNetParams::init(tiny_net(), 0).unwrap();
    let empty = Dataset { sequences: vec![] };
    assert!(train_ann(&p, &empty, &quick(1, 1e-3)).is_err());
}

#[test]
fn metric_identities_on_synthetic_scenes() {
    for (v, seed) in [((6.0, 0.0), 0), ((0.0, 5.0), 1), ((4.0, -3.0), 2)] {
        let cfg = SynthConfig::new(32, 32, v, seed);
        let (events, gt) = synth_translating_pattern(&cfg).unwrap();
        let w = TimeWindow::new(0.0, cfg.duration).unwrap();
        let zero = FlowField::zeros(32, 32);
        assert_eq!(fwl(&events, &zero, w).unwrap(), Some(1.0));
        assert_eq!(rsat(&events, &zero, w, 1e-9).unwrap(), Some(1.0));
        assert!(fwl(&events, &gt.flow, w).unwrap().unwrap() > 1.0);
        assert!(fwl(&events, &gt.flow.scaled(-1.0), w).unwrap().unwrap() < 1.0);
        assert!(rsat(&events, &gt.flow, w, 1e-9).unwrap().unwrap() < 1.0);
        assert_eq!(aee(&gt.flow, &gt, &events.event_mask()).unwrap(), Some(0.0));
    }
}

#[test]
fn masked_aee_matches_loop() {
    let mut r = rng(8);
    let (w, h) = (10, 6);
    let pred = random_flow(&mut r, w, h, 4.0);
    let gt = GroundTruthFlow::new(random_flow(&mut r, w, h, 4.0), (0..w * h).map(|_| r.gen_bool(0.8)).collect()).unwrap();
    let mask: Vec<bool> = (0..w * h).map(|_| r.gen_bool(0.5)).collect();
    let (mut sum, mut n) = (0.0, 0);
    for i in 0..w * h {
        if mask[i] && gt.valid[i] {
            let du = pred.u[i] - gt.flow.u[i];
            let dv = pred.v[i] - gt.flow.v[i];
            sum += (du * du + dv * dv).sqrt();
            n += 1;
        }
    }
    let got = aee(&pred, &gt, &mask).unwrap().unwrap();
    assert!((got - sum / n as f64).abs() < 1e-12);
    assert_eq!(aee(&pred, &gt, &vec![false; w * h]).unwrap(), None);
}

#[test]
fn dt4_composes_quarters_over_the_group_partition() {
    let cfg = SynthConfig::new(32, 32, (6.0, 0.0), 5);
    let (events, gt) = synth_translating_pattern(&cfg).unwrap();
    let groups = group_events(&events, 4).unwrap();
    let mut sizes = Vec::new();
    let quarter = gt.flow.scaled(0.25);
    let err = aee_windows(
        |slice| {
            sizes.push(slice.len());
            Ok(quarter.clone())
        },
        &events,
        &gt,
        AeeMode::Dt4,
    )
    .unwrap()
    .unwrap();
    assert!(err < 1e-12);
    let want: Vec<usize> = partition_bounds(events.len(), 4).windows(2).map(|b| b[1] - b[0]).collect();
    let grouped: Vec<usize> = groups
        .frames
        .iter()
        .map(|(p, n)| (p.iter().sum::<u32>() + n.iter().sum::<u32>()) as usize)
        .collect();
    assert_eq!(sizes, want);
    assert_eq!(sizes, grouped);
    let dt1 = aee_windows(|_| Ok(gt.flow.clone()), &events, &gt, AeeMode::Dt1).unwrap();
    assert_eq!(dt1, Some(0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn contrast_is_invariant_to_time_shift_and_scale(seed in any::<u64>(), shift in -8i32..8, pow in 0i32..4) {
        let mut r = rng(seed);
        let events = dyadic_events(&mut r, 120, 9, 7);
        let flow = random_flow(&mut r, 9, 7, 3.0);
        let w = TimeWindow::new(0.0, 1.0).unwrap();
        let base = contrast_loss(&flow, &events, w, 1e-9).unwrap().value;
        let s = shift as f64;
        let k = 2f64.powi(pow);
        let moved = map_times(&events, |t| k * t + s);
        let wm = TimeWindow::new(s, k + s).unwrap();
        prop_assert_eq!(contrast_loss(&flow, &moved, wm, 1e-9).unwrap().value, base);
        let r1 = rsat(&events, &flow, w, 1e-9).unwrap();
        prop_assert_eq!(rsat(&moved, &flow, wm, 1e-9).unwrap(), r1);
    }

    #[test]
    fn total_loss_is_non_negative(seed in any::<u64>(), k in 0usize..80, scale in 0.0f64..10.0) {
        let mut r = rng(seed);
        let events = dyadic_events(&mut r, k, 8, 8);
        let flow = random_flow(&mut r, 8, 8, scale.max(1e-9));
        let w = TimeWindow::new(0.0, 1.0).unwrap();
        let l = total_loss(&flow, &events, w, &LossConfig::default()).unwrap();
        prop_assert!(l.total >= 0.0 && l.total.is_finite());
        prop_assert_eq!(contrast_loss(&flow, &events, w, 1e-9).unwrap().no_events, k == 0);
        // under zero flow no event leaves the sensor, and every timestamp is positive
        let still = contrast_loss(&FlowField::zeros(8, 8), &events, w, 1e-9).unwrap();
        prop_assert_eq!(still.value == 0.0, k == 0);
    }

    #[test]
    fn constant_flow_minimizes_smoothness(
        c in (-5.0f64..5.0, -5.0f64..5.0),
        seed in any::<u64>(),
        amp in 1e-6f64..2.0,
    ) {
        let (w, h) = (7, 5);
        let base = FlowField::constant(w, h, c.0, c.1);
        let mut r = rng(seed);
        let mut p = random_flow(&mut r, w, h, amp);
        // zero-mean perturbation keeps the mean flow fixed
        let mu = p.u.iter().sum::<f64>() / p.len() as f64;
        let mv = p.v.iter().sum::<f64>() / p.len() as f64;
        let perturbed = FlowField {
            u: base.u.iter().zip(&p.u).map(|(a, b)| a + b - mu).collect(),
            v: base.v.iter().zip(&p.v).map(|(a, b)| a + b - mv).collect(),
            ..base.clone()
        };
        p = perturbed;
        let cfg = LossConfig::default();
        prop_assert!(smoothness_loss(&p, &cfg) >= smoothness_loss(&base, &cfg));
    }

    #[test]
    fn fwl_and_rsat_of_zero_flow_are_one(seed in any::<u64>(), k in 2usize..200) {
        let mut r = rng(seed);
        let events = dyadic_events(&mut r, k, 9, 9);
        let zero = FlowField::zeros(9, 9);
        let w = TimeWindow::new(0.0, 1.0).unwrap();
        if let Some(f) = fwl(&events, &zero, w).unwrap() {
            prop_assert_eq!(f, 1.0);
        }
        prop_assert_eq!(rsat(&events, &zero, w, 1e-9).unwrap(), Some(1.0));
    }

    #[test]
    fn aee_triangle_bound(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (w, h) = (6, 5);
        let a = random_flow(&mut r, w, h, 5.0);
        let b = random_flow(&mut r, w, h, 5.0);
        let c = random_flow(&mut r, w, h, 5.0);
        let mask: Vec<bool> = (0..w * h).map(|_| r.gen_bool(0.7)).collect();
        prop_assume!(mask.iter().any(|&m| m));
        let d = |x: &FlowField, y: &FlowField| aee(x, &GroundTruthFlow::fully_valid(y.clone()), &mask).unwrap().unwrap();
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-12);
    }
}
