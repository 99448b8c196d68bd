use proptest::prelude::*;
use stflow::energy::{count_ann_ops, count_snn_ops, rec, EnergyConstants, OpKind};
use stflow::network::{NetworkConfig, STFlowNetParams};
use stflow::spiking::{convert_a2s, FiringReport, SpikingModel, TauMap};

fn cfg() -> NetworkConfig {
    NetworkConfig {
        base_channels: 4,
        groups: 3,
        height: 32,
        width: 48,
        ..NetworkConfig::default()
    }
}

fn model(steps: usize) -> SpikingModel {
    convert_a2s(&STFlowNetParams::init(cfg(), 0).unwrap(), steps, TauMap::default()).unwrap()
}

fn report(m: &SpikingModel, rate: impl Fn(usize, usize) -> f64) -> FiringReport {
    let layers: Vec<String> = m.thresholds.iter().map(|(n, _)| n.clone()).collect();
    let rates = (0..layers.len()).map(|l| (0..m.time_steps).map(|s| rate(l, s)).collect()).collect();
    FiringReport { layers, rates }
}

#[test]
fn dense_counts_match_hand_arithmetic() {
    // 3×3 kernels: out_channels · out_h · out_w · in_channels · 9
    let r = count_ann_ops(&cfg(), EnergyConstants::default()).unwrap();
    let ops = |n: &str| r.layer(n).unwrap().ops;
    assert_eq!(ops("convgru1"), (3 * 2 * 32 * 48 * 4 * 9 * 3) as f64);
    assert_eq!(ops("convgru2"), (3 * 2 * 32 * 48 * 4 * 9) as f64);
    assert_eq!(ops("encoder1"), (4 * 16 * 24 * 6 * 9) as f64);
    assert_eq!(ops("encoder3"), (16 * 4 * 6 * 8 * 9) as f64);
    assert_eq!(ops("block1.conv1"), (32 * 2 * 3 * 32 * 9) as f64);
    assert_eq!(ops("fuse2"), (16 * 2 * 3 * 16 * 9) as f64);
    assert!(r.layers.iter().all(|l| l.kind == OpKind::Mac));
}

#[test]
fn accumulate_module_matches_closed_form() {
    let c = EnergyConstants::default();
    let ann = count_ann_ops(&cfg(), c).unwrap();
    for steps in [3, 6, 12] {
        let m = model(steps);
        for rate in [0.0, 0.05, 0.25, 1.0] {
            let snn = count_snn_ops(&m, &report(&m, |_, _| rate), c).unwrap();
            for l in snn.layers.iter().filter(|l| l.kind == OpKind::Ac) {
                let a = ann.layer(&l.name).unwrap();
                let ratio = l.energy_j(&c) / a.energy_j(&c);
                let want = c.ac_module_ratio(rate, steps);
                assert!((ratio - want).abs() <= 1e-14 * want.max(1e-300), "{}: {ratio} vs {want}", l.name);
            }
        }
    }
    // frozen: 0.9 pJ / 4.6 pJ at rate 0.1 over 4 steps
    assert!((c.ac_module_ratio(0.1, 4) - 0.9 / 4.6 * 0.4).abs() < 1e-16);
}

#[test]
fn analog_input_layers_stay_multiply_accumulate() {
    let m = model(6);
    let snn = count_snn_ops(&m, &report(&m, |_, _| 0.2), EnergyConstants::default()).unwrap();
    let ann = count_ann_ops(&cfg(), EnergyConstants::default()).unwrap();
    assert_eq!(snn.layers.len(), ann.layers.len());
    for l in &snn.layers {
        let want = matches!(l.name.as_str(), "convgru1" | "convgru2" | "encoder1" | "decoder1");
        assert_eq!(l.kind == OpKind::Mac, want, "{}", l.name);
        assert!(!l.rationale.is_empty());
    }
    let names: Vec<_> = snn.layers.iter().map(|l| &l.name).collect();
    let mut uniq = names.clone();
    uniq.dedup();
    assert_eq!(uniq.len(), names.len());
    // the spiking encoder sees one group (two channels) per step
    assert_eq!(snn.layer("encoder1").unwrap().dense_ops * 3, ann.layer("encoder1").unwrap().dense_ops);
}

#[test]
fn missing_layer_in_report_is_an_error() {
    let m = model(3);
    let mut r = report(&m, |_, _| 0.1);
    let i = r.layers.iter().position(|l| l == "encoder2").unwrap();
    r.layers.remove(i);
    r.rates.remove(i);
    assert!(count_snn_ops(&m, &r, EnergyConstants::default()).is_err());
    let mut short = report(&m, |_, _| 0.1);
    short.rates[0].pop();
    assert!(count_snn_ops(&m, &short, EnergyConstants::default()).is_err());
}

#[test]
fn zero_firing_leaves_only_analog_layers() {
    let c = EnergyConstants::default();
    let m = model(6);
    let snn = count_snn_ops(&m, &report(&m, |_, _| 0.0), c).unwrap();
    assert_eq!(snn.total_ops(OpKind::Ac), 0.0);
    let analog: f64 = snn.layers.iter().filter(|l| l.kind == OpKind::Mac).map(|l| l.energy_j(&c)).sum();
    assert_eq!(snn.total_energy_j(), analog);
    let ann = count_ann_ops(&cfg(), c).unwrap();
    assert_eq!(rec(&ann, &snn).unwrap(), snn.total_energy_j() / ann.total_energy_j());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn snn_energy_grows_with_rates(
        base in prop::collection::vec(0.0f64..0.9, 11),
        layer in 0usize..11,
        bump in 0.0f64..0.1,
    ) {
        let c = EnergyConstants::default();
        let m = model(3);
        let n = m.thresholds.len();
        let lo = report(&m, |l, _| base[l % base.len()]);
        let hi = report(&m, |l, _| base[l % base.len()] + if l == layer % n { bump } else { 0.0 });
        let e_lo = count_snn_ops(&m, &lo, c).unwrap().total_energy_j();
        let e_hi = count_snn_ops(&m, &hi, c).unwrap().total_energy_j();
        prop_assert!(e_hi >= e_lo);
    }

    #[test]
    fn snn_energy_grows_with_steps(rate in 0.0f64..1.0, k in 1usize..4) {
        let c = EnergyConstants::default();
        let short = model(3 * k);
        let long = model(3 * (k + 1));
        let e = |m: &SpikingModel| count_snn_ops(m, &report(m, |_, _| rate), c).unwrap().total_energy_j();
        prop_assert!(e(&long) >= e(&short));
    }

    #[test]
    fn ratio_is_linear_in_rate_and_steps(rate in 0.0f64..1.0, steps in 1usize..64) {
        let c = EnergyConstants::default();
        let r = c.ac_module_ratio(rate, steps);
        prop_assert!((r - c.ac_module_ratio(1.0, 1) * rate * steps as f64).abs() <= 1e-12 * r.max(1.0));
    }
}
