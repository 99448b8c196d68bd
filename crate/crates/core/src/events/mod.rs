//! Event streams, their file formats, and frame-group representations.

mod io;
mod synth;

pub use io::{load_events, save_events, EventFormat};
pub use synth::{synth_sequence, synth_translating_pattern, SynthConfig, SynthWindow};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn sign(self) -> f64 {
        match self {
            Polarity::Positive => 1.0,
            Polarity::Negative => -1.0,
        }
    }

    /// On-disk encoding: 1 = positive, 0 = negative.
    pub fn to_bit(self) -> u8 {
        match self {
            Polarity::Positive => 1,
            Polarity::Negative => 0,
        }
    }

    pub fn from_bit(bit: u8) -> Option<Self> {
        match bit {
            1 => Some(Polarity::Positive),
            0 => Some(Polarity::Negative),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Event {
    pub x: u16,
    pub y: u16,
    /// seconds
    pub t: f64,
    pub p: Polarity,
}

/// Half-open time interval `[start, end)` covered by one prediction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeWindow {
    pub start: f64,
    pub end: f64,
}

impl TimeWindow {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !(end > start) {
            return Err(Error::invalid(format!(
                "time window must have positive length, got [{start}, {end})"
            )));
        }
        Ok(Self { start, end })
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

/// Time-ordered events from a `width` x `height` sensor.
#[derive(Clone, Debug, PartialEq)]
pub struct EventStream {
    pub width: usize,
    pub height: usize,
    pub events: Vec<Event>,
}

impl EventStream {
    /// Validates bounds and sorts by timestamp; ties keep their input order.
    pub fn new(width: usize, height: usize, mut events: Vec<Event>) -> Result<Self> {
        if let Some((i, e)) = events
            .iter()
            .enumerate()
            .find(|(_, e)| e.x as usize >= width || e.y as usize >= height)
        {
            return Err(Error::invalid(format!(
                "event {} at ({}, {}) outside {}x{} sensor",
                i, e.x, e.y, width, height
            )));
        }
        if events.iter().any(|e| !e.t.is_finite()) {
            return Err(Error::invalid("event timestamps must be finite"));
        }
        events.sort_by(|a, b| a.t.total_cmp(&b.t));
        Ok(Self {
            width,
            height,
            events,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            events: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Events with index in `range`, as a new stream over the same sensor.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            width: self.width,
            height: self.height,
            events: self.events[range].to_vec(),
        }
    }

    /// Events with `start <= t < end`.
    pub fn in_window(&self, window: TimeWindow) -> Self {
        let lo = self.events.partition_point(|e| e.t < window.start);
        let hi = self.events.partition_point(|e| e.t < window.end);
        self.slice(lo..hi)
    }

    /// Pixels touched by at least one event.
    pub fn event_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.width * self.height];
        for e in &self.events {
            mask[e.y as usize * self.width + e.x as usize] = true;
        }
        mask
    }
}

/// Index boundaries of the floor partition of `k` items into `n` groups.
/// Group `i` (0-based) covers `bounds[i]..bounds[i + 1]`.
pub fn partition_bounds(k: usize, n: usize) -> Vec<usize> {
    (0..=n).map(|i| k * i / n).collect()
}

/// Per-polarity event-count images for `n` consecutive slices of a stream.
#[derive(Clone, Debug, PartialEq)]
pub struct EventFrameGroups {
    pub width: usize,
    pub height: usize,
    /// `(positive, negative)` count images per group, row-major.
    pub frames: Vec<(Vec<u32>, Vec<u32>)>,
    /// Timestamps of the first and last events consumed.
    pub span: (f64, f64),
}

impl EventFrameGroups {
    pub fn n(&self) -> usize {
        self.frames.len()
    }
}

/// Splits the stream into `n` index-contiguous groups and counts events per
/// pixel and polarity. Group `i` holds events `floor(K i / n) .. floor(K (i+1) / n)`.
pub fn group_events(stream: &EventStream, n: usize) -> Result<EventFrameGroups> {
    let k = stream.len();
    if n == 0 {
        return Err(Error::invalid("group count must be positive"));
    }
    if n > k {
        return Err(Error::invalid(format!(
            "cannot split {k} events into {n} non-empty groups"
        )));
    }
    let pixels = stream.width * stream.height;
    let bounds = partition_bounds(k, n);
    let frames = bounds
        .windows(2)
        .map(|b| {
            let mut pos = vec![0u32; pixels];
            let mut neg = vec![0u32; pixels];
            for e in &stream.events[b[0]..b[1]] {
                let idx = e.y as usize * stream.width + e.x as usize;
                match e.p {
                    Polarity::Positive => pos[idx] += 1,
                    Polarity::Negative => neg[idx] += 1,
                }
            }
            (pos, neg)
        })
        .collect();
    Ok(EventFrameGroups {
        width: stream.width,
        height: stream.height,
        frames,
        span: (stream.events[0].t, stream.events[k - 1].t),
    })
}

fn counts_to_f64(c: &[u32]) -> impl Iterator<Item = f64> + '_ {
    c.iter().map(|&v| v as f64)
}

/// `[1, 2N, H, W]` tensor with channels `[f1+, f1-, ..., fN+, fN-]`.
pub fn to_ann_input(groups: &EventFrameGroups) -> Tensor {
    let mut data = Vec::with_capacity(2 * groups.n() * groups.width * groups.height);
    for (pos, neg) in &groups.frames {
        data.extend(counts_to_f64(pos));
        data.extend(counts_to_f64(neg));
    }
    Tensor::new(vec![1, 2 * groups.n(), groups.height, groups.width], data)
        .expect("group extents are consistent")
}

/// One `[1, 2, H, W]` tensor per group, in temporal order.
pub fn to_snn_input(groups: &EventFrameGroups) -> Vec<Tensor> {
    groups
        .frames
        .iter()
        .map(|(pos, neg)| {
            let data = counts_to_f64(pos).chain(counts_to_f64(neg)).collect();
            Tensor::new(vec![1, 2, groups.height, groups.width], data)
                .expect("group extents are consistent")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(x: u16, y: u16, t: f64, positive: bool) -> Event {
        Event {
            x,
            y,
            t,
            p: if positive {
                Polarity::Positive
            } else {
                Polarity::Negative
            },
        }
    }

    #[test]
    fn alternating_polarity_two_groups() {
        let events = (0..8).map(|i| ev(0, 0, i as f64, i % 2 == 0)).collect();
        let s = EventStream::new(2, 2, events).unwrap();
        let g = group_events(&s, 2).unwrap();
        for (pos, neg) in &g.frames {
            assert_eq!(pos[0], 2);
            assert_eq!(neg[0], 2);
        }
    }

    #[test]
    fn single_group_is_full_count_image() {
        let events = vec![
            ev(1, 0, 0.1, true),
            ev(1, 0, 0.2, true),
            ev(0, 1, 0.3, false),
            ev(2, 1, 0.4, true),
        ];
        let s = EventStream::new(3, 2, events).unwrap();
        let g = group_events(&s, 1).unwrap();
        assert_eq!(g.frames[0].0, vec![0, 2, 0, 0, 0, 1]);
        assert_eq!(g.frames[0].1, vec![0, 0, 0, 1, 0, 0]);
    }

    #[test]
    fn floor_partition_sizes() {
        let b = partition_bounds(10, 3);
        let sizes: Vec<_> = b.windows(2).map(|w| w[1] - w[0]).collect();
        assert_eq!(sizes, vec![3, 3, 4]);
    }

    #[test]
    fn more_groups_than_events_rejected() {
        let s = EventStream::new(1, 1, vec![ev(0, 0, 0.0, true)]).unwrap();
        assert!(group_events(&s, 2).is_err());
        assert!(group_events(&s, 0).is_err());
    }

    #[test]
    fn out_of_bounds_rejected() {
        assert!(EventStream::new(2, 2, vec![ev(2, 0, 0.0, true)]).is_err());
    }

    #[test]
    fn stream_sorted_with_stable_ties() {
        let events = vec![
            ev(0, 0, 0.5, true),
            ev(1, 0, 0.1, true),
            ev(2, 0, 0.5, false),
            ev(3, 0, 0.5, true),
        ];
        let s = EventStream::new(4, 1, events).unwrap();
        let xs: Vec<_> = s.events.iter().map(|e| e.x).collect();
        assert_eq!(xs, vec![1, 0, 2, 3]);
    }

    #[test]
    fn ann_and_snn_layouts_agree() {
        let events = (0..40)
            .map(|i| ev((i % 4) as u16, (i % 3) as u16, i as f64, i % 5 < 2))
            .collect();
        let s = EventStream::new(4, 3, events).unwrap();
        let g = group_events(&s, 4).unwrap();
        let ann = to_ann_input(&g);
        assert_eq!(ann.shape(), &[1, 8, 3, 4]);
        assert_eq!(ann.sum(), 40.0);
        // channel 5 is the negative image of group 3
        let ch5 = &ann.data()[5 * 12..6 * 12];
        let f3_neg: Vec<f64> = g.frames[2].1.iter().map(|&c| c as f64).collect();
        assert_eq!(ch5, &f3_neg[..]);

        let snn = to_snn_input(&g);
        assert_eq!(snn.len(), 4);
        let refs: Vec<&Tensor> = snn.iter().collect();
        assert_eq!(crate::tensor::ops::concat(&refs, 1).unwrap(), ann);
        let bounds = partition_bounds(40, 4);
        for (step, b) in snn.iter().zip(bounds.windows(2)) {
            assert_eq!(step.sum(), (b[1] - b[0]) as f64);
        }
    }
}
