//! Synthetic scenes with known flow: random dots translating at constant
//! velocity. Each dot emits, at jittered instants, an event at its leading
//! edge and the opposite-polarity event at its trailing edge, so the two
//! polarities separate once motion is compensated.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Event, EventStream, Polarity, TimeWindow};
use crate::error::{Error, Result};
use crate::flow::{FlowField, GroundTruthFlow};

/// Sensor area per dot, in pixels.
const PIXELS_PER_DOT: f64 = 32.0;
/// Distance between a dot's leading and trailing edge along the motion.
const DOT_LENGTH: f64 = 3.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    /// Events per pixel per window.
    pub density: f64,
    /// Displacement in pixels per window.
    pub velocity: (f64, f64),
    /// Window length in seconds.
    pub duration: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(width: usize, height: usize, velocity: (f64, f64), seed: u64) -> Self {
        Self {
            width,
            height,
            density: 0.5,
            velocity,
            duration: 0.05,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.density > 0.0) || !self.density.is_finite() {
            return Err(Error::invalid(format!("density must be positive, got {}", self.density)));
        }
        if !(self.duration > 0.0) {
            return Err(Error::invalid("duration must be positive"));
        }
        if self.width == 0 || self.height == 0 || self.width > u16::MAX as usize || self.height > u16::MAX as usize {
            return Err(Error::invalid(format!("unsupported sensor {}x{}", self.width, self.height)));
        }
        let limit = self.width.min(self.height) as f64 / 4.0;
        let (vx, vy) = self.velocity;
        if vx.abs() > limit || vy.abs() > limit {
            return Err(Error::invalid(format!(
                "velocity ({vx}, {vy}) exceeds {limit} px/window for a {}x{} sensor",
                self.width, self.height
            )));
        }
        Ok(())
    }
}

/// One window of a synthetic sequence.
#[derive(Clone, Debug)]
pub struct SynthWindow {
    pub events: EventStream,
    pub window: TimeWindow,
    pub gt: GroundTruthFlow,
}

/// A single window `[0, duration)` of a translating dot pattern.
pub fn synth_translating_pattern(cfg: &SynthConfig) -> Result<(EventStream, GroundTruthFlow)> {
    let mut seq = synth_sequence(cfg, 1)?;
    let w = seq.pop().expect("one window");
    Ok((w.events, w.gt))
}

/// `windows` consecutive windows of the same pattern, the dots moving
/// `velocity` pixels per window throughout.
pub fn synth_sequence(cfg: &SynthConfig, windows: usize) -> Result<Vec<SynthWindow>> {
    cfg.validate()?;
    if windows == 0 {
        return Err(Error::invalid("need at least one window"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let (vx, vy) = cfg.velocity;
    let speed = vx.hypot(vy);
    let (dx, dy) = if speed > 0.0 {
        (vx / speed * DOT_LENGTH, vy / speed * DOT_LENGTH)
    } else {
        (0.0, 0.0)
    };
    let k = windows as f64;
    let total = k * cfg.duration;

    let dots = ((w * h) / PIXELS_PER_DOT).round().max(1.0) as usize;
    let per_dot = (cfg.density * w * h * k / (2.0 * dots as f64)).round().max(1.0) as usize;

    // range of p0 keeping both edges inside the sensor for the whole sequence
    let range = |extent: f64, v: f64, d: f64| {
        let offsets = [0.0, k * v, -d, k * v - d];
        let lo = -offsets.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = extent - offsets.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    };
    let (xlo, xhi) = range(w, vx, dx);
    let (ylo, yhi) = range(h, vy, dy);
    if !(xhi > xlo && yhi > ylo) {
        return Err(Error::invalid("sensor too small for the requested motion"));
    }
    let pixel = |v: f64, hi: f64| (v.floor().max(0.0)).min(hi - 1.0) as u16;

    let mut events = Vec::with_capacity(2 * dots * per_dot);
    for _ in 0..dots {
        let x0 = rng.gen_range(xlo..xhi);
        let y0 = rng.gen_range(ylo..yhi);
        let bright = rng.gen_bool(0.5);
        let (lead_p, trail_p) = if bright {
            (Polarity::Positive, Polarity::Negative)
        } else {
            (Polarity::Negative, Polarity::Positive)
        };
        for j in 0..per_dot {
            let frac = (j as f64 + rng.gen::<f64>()) / per_dot as f64;
            let t = frac * total;
            let travelled = frac * k;
            let (lx, ly) = (x0 + vx * travelled, y0 + vy * travelled);
            events.push(Event {
                x: pixel(lx, w),
                y: pixel(ly, h),
                t,
                p: lead_p,
            });
            events.push(Event {
                x: pixel(lx - dx, w),
                y: pixel(ly - dy, h),
                t,
                p: trail_p,
            });
        }
    }
    let stream = EventStream::new(cfg.width, cfg.height, events)?;
    let gt = GroundTruthFlow::fully_valid(FlowField::constant(cfg.width, cfg.height, vx, vy));
    (0..windows)
        .map(|i| {
            let window = TimeWindow::new(i as f64 * cfg.duration, (i + 1) as f64 * cfg.duration)?;
            Ok(SynthWindow {
                events: stream.in_window(window),
                window,
                gt: gt.clone(),
            })
        })
        .collect()
}
