//! Color-wheel flow rendering and binary PPM output.

use std::io::Write;

use stflow::flow::FlowField;

/// Wheel segments: red-yellow, yellow-green, green-cyan, cyan-blue,
/// blue-magenta, magenta-red.
const SEGMENTS: [usize; 6] = [15, 6, 4, 11, 13, 6];

fn color_wheel() -> Vec<[f64; 3]> {
    let mut wheel = Vec::with_capacity(SEGMENTS.iter().sum());
    let ramp = |i: usize, n: usize| 255.0 * i as f64 / n as f64;
    let [ry, yg, gc, cb, bm, mr] = SEGMENTS;
    wheel.extend((0..ry).map(|i| [255.0, ramp(i, ry), 0.0]));
    wheel.extend((0..yg).map(|i| [255.0 - ramp(i, yg), 255.0, 0.0]));
    wheel.extend((0..gc).map(|i| [0.0, 255.0, ramp(i, gc)]));
    wheel.extend((0..cb).map(|i| [0.0, 255.0 - ramp(i, cb), 255.0]));
    wheel.extend((0..bm).map(|i| [ramp(i, bm), 0.0, 255.0]));
    wheel.extend((0..mr).map(|i| [255.0, 0.0, 255.0 - ramp(i, mr)]));
    wheel
}

/// 99th percentile of the flow magnitude (nearest rank).
fn robust_max(flow: &FlowField) -> f64 {
    let mut m: Vec<f64> = flow.u.iter().zip(&flow.v).map(|(u, v)| u.hypot(*v)).collect();
    if m.is_empty() {
        return 0.0;
    }
    m.sort_by(|a, b| a.total_cmp(b));
    let rank = ((0.99 * m.len() as f64).ceil() as usize).clamp(1, m.len());
    m[rank - 1]
}

/// Row-major RGB bytes. Hue encodes direction, saturation the magnitude
/// relative to the 99th percentile; zero flow is white and magnitudes past
/// the percentile are dimmed.
pub fn render_flow(flow: &FlowField) -> Vec<u8> {
    let wheel = color_wheel();
    let n = wheel.len();
    let max = robust_max(flow);
    let mut out = Vec::with_capacity(3 * flow.len());
    for (&u, &v) in flow.u.iter().zip(&flow.v) {
        let rad = if max > 0.0 { u.hypot(v) / max } else { 0.0 };
        let angle = (-v).atan2(-u) / std::f64::consts::PI;
        let fk = (angle + 1.0) / 2.0 * (n - 1) as f64;
        let k0 = fk.floor() as usize % n;
        let k1 = (k0 + 1) % n;
        let f = fk - fk.floor();
        for c in 0..3 {
            let col = ((1.0 - f) * wheel[k0][c] + f * wheel[k1][c]) / 255.0;
            let col = if rad <= 1.0 { 1.0 - rad * (1.0 - col) } else { col * 0.75 };
            out.push((255.0 * col).floor().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

/// Binary PPM (P6) of `rgb`.
pub fn ppm_bytes(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(rgb.len() + 20);
    write!(out, "P6\n{width} {height}\n255\n").expect("write to vec");
    out.extend_from_slice(rgb);
    out
}

pub fn flow_ppm(flow: &FlowField) -> Vec<u8> {
    ppm_bytes(flow.width, flow.height, &render_flow(flow))
}
