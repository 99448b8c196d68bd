use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::events::{group_events, synth_sequence, to_ann_input, to_snn_input, EventStream, SynthConfig, TimeWindow};
use crate::flow::GroundTruthFlow;
use crate::tensor::Tensor;

/// One prediction window with its network inputs precomputed.
#[derive(Clone, Debug)]
pub struct WindowSample {
    pub events: Arc<EventStream>,
    pub window: TimeWindow,
    pub gt: Option<GroundTruthFlow>,
    /// `[1, 2N, H, W]` counts.
    pub ann_input: Tensor,
    /// `N` tensors of `[1, 2, H, W]` counts.
    pub snn_input: Vec<Tensor>,
}

impl WindowSample {
    pub fn new(events: EventStream, window: TimeWindow, gt: Option<GroundTruthFlow>, groups: usize) -> Result<Self> {
        let g = group_events(&events, groups)?;
        Ok(Self {
            ann_input: to_ann_input(&g),
            snn_input: to_snn_input(&g),
            events: Arc::new(events),
            window,
            gt,
        })
    }
}

/// Consecutive windows; the recurrent state is carried across them.
#[derive(Clone, Debug)]
pub struct Sequence {
    pub windows: Vec<WindowSample>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub sequences: Vec<Sequence>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn windows(&self) -> impl Iterator<Item = &WindowSample> {
        self.sequences.iter().flat_map(|s| &s.windows)
    }

    /// One sequence cut from a recording into `windows` equal-length
    /// windows spanning its first to last timestamp. `gt`, when given,
    /// applies to every window.
    pub fn from_stream(stream: &EventStream, windows: usize, gt: Option<&GroundTruthFlow>, groups: usize) -> Result<Self> {
        if stream.is_empty() {
            return Err(Error::Empty("event stream has no events".into()));
        }
        if windows == 0 {
            return Err(Error::invalid("need at least one window"));
        }
        if let Some(gt) = gt {
            if (gt.flow.width, gt.flow.height) != (stream.width, stream.height) {
                return Err(Error::shape(
                    "dataset",
                    format!(
                        "ground truth is {}x{}, events are {}x{}",
                        gt.flow.width, gt.flow.height, stream.width, stream.height
                    ),
                ));
            }
        }
        let t0 = stream.events[0].t;
        let t1 = stream.events[stream.len() - 1].t;
        // the last window is closed on the right so the final event is kept
        let span = (t1 - t0).max(f64::MIN_POSITIVE) * (1.0 + 1e-12) + 1e-12;
        let len = span / windows as f64;
        let samples = (0..windows)
            .map(|i| {
                let window = TimeWindow::new(t0 + i as f64 * len, t0 + (i + 1) as f64 * len)?;
                WindowSample::new(stream.in_window(window), window, gt.cloned(), groups)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            sequences: vec![Sequence { windows: samples }],
        })
    }

    /// Translating dot patterns, one random pattern per sequence.
    pub fn synthetic(cfg: &SyntheticSet) -> Result<Self> {
        if cfg.sequences == 0 || cfg.windows == 0 {
            return Err(Error::invalid("synthetic set needs at least one sequence and one window"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut sequences = Vec::with_capacity(cfg.sequences);
        for _ in 0..cfg.sequences {
            let j = cfg.velocity_jitter;
            let jitter = |rng: &mut ChaCha8Rng| if j > 0.0 { rng.gen_range(-j..=j) } else { 0.0 };
            let velocity = (cfg.velocity.0 + jitter(&mut rng), cfg.velocity.1 + jitter(&mut rng));
            let mut sc = SynthConfig::new(cfg.width, cfg.height, velocity, rng.gen());
            sc.density = cfg.density;
            let windows = synth_sequence(&sc, cfg.windows)?
                .into_iter()
                .map(|w| WindowSample::new(w.events, w.window, Some(w.gt), cfg.groups))
                .collect::<Result<_>>()?;
            sequences.push(Sequence { windows });
        }
        Ok(Self { sequences })
    }
}

/// Recipe for a synthetic dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSet {
    pub width: usize,
    pub height: usize,
    pub groups: usize,
    pub sequences: usize,
    pub windows: usize,
    /// Pixels per window.
    pub velocity: (f64, f64),
    /// Each sequence's velocity is perturbed uniformly by up to this much
    /// per component.
    pub velocity_jitter: f64,
    pub density: f64,
    pub seed: u64,
}

impl Default for SyntheticSet {
    fn default() -> Self {
        Self {
            width: 32,
            height: 32,
            groups: 4,
            sequences: 16,
            windows: 2,
            velocity: (6.0, 0.0),
            velocity_jitter: 0.0,
            density: 0.5,
            seed: 0,
        }
    }
}
