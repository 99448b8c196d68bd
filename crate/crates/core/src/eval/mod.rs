//! Flow quality metrics and the event-warping kernel they share with the
//! training loss.

pub(crate) mod warp;

use std::fmt::Write as _;

pub use warp::{warp_events, WarpedEventImage};

use crate::error::{Error, Result};
use crate::events::{partition_bounds, EventStream, TimeWindow};
use crate::flow::{FlowField, GroundTruthFlow};
use crate::model::FlowModel;
use crate::training::{contrast_loss, Dataset};
use rayon::prelude::*;

/// Mean endpoint error over pixels that are valid in `gt` and set in `mask`.
/// `None` when no pixel qualifies.
pub fn aee(pred: &FlowField, gt: &GroundTruthFlow, mask: &[bool]) -> Result<Option<f64>> {
    pred.check_extents(&gt.flow)?;
    if mask.len() != pred.len() {
        return Err(Error::shape(
            "aee",
            format!("mask has {} pixels, flow has {}", mask.len(), pred.len()),
        ));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..pred.len() {
        if gt.valid[i] && mask[i] {
            sum += (pred.u[i] - gt.flow.u[i]).hypot(pred.v[i] - gt.flow.v[i]);
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AeeMode {
    /// One prediction from all window events.
    Dt1,
    /// Four sequential predictions from index quartiles, summed.
    Dt4,
}

impl std::str::FromStr for AeeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dt1" => Ok(AeeMode::Dt1),
            "dt4" => Ok(AeeMode::Dt4),
            other => Err(Error::invalid(format!("mode must be dt1 or dt4, got {other:?}"))),
        }
    }
}

/// AEE of a predictor over one window. `predict` is called once (dt1) or
/// four times in temporal order (dt4); the mask is the window's event
/// footprint.
pub fn aee_windows(
    mut predict: impl FnMut(&EventStream) -> Result<FlowField>,
    events: &EventStream,
    gt: &GroundTruthFlow,
    mode: AeeMode,
) -> Result<Option<f64>> {
    let pred = match mode {
        AeeMode::Dt1 => predict(events)?,
        AeeMode::Dt4 => {
            let bounds = partition_bounds(events.len(), 4);
            let mut acc = FlowField::zeros(events.width, events.height);
            for b in bounds.windows(2) {
                acc = acc.add(&predict(&events.slice(b[0]..b[1]))?)?;
            }
            acc
        }
    };
    aee(&pred, gt, &events.event_mask())
}

fn population_variance(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// Variance of the polarity-summed image warped to the window end, relative
/// to the unwarped image. `None` for an empty stream or a flat image.
pub fn fwl(events: &EventStream, flow: &FlowField, window: TimeWindow) -> Result<Option<f64>> {
    if events.is_empty() {
        return Ok(None);
    }
    let dt = window.duration();
    let zero = FlowField::zeros(flow.width, flow.height);
    let base = population_variance(&warp_events(events, &zero, window.end, dt)?.total_counts());
    let warped = population_variance(&warp_events(events, flow, window.end, dt)?.total_counts());
    Ok((base > 0.0).then(|| warped / base))
}

/// Contrast loss of `flow` relative to the zero flow. `None` without events.
pub fn rsat(events: &EventStream, flow: &FlowField, window: TimeWindow, eps_w: f64) -> Result<Option<f64>> {
    let zero = FlowField::zeros(flow.width, flow.height);
    let base = contrast_loss(&zero, events, window, eps_w)?;
    if base.no_events || base.value == 0.0 {
        return Ok(None);
    }
    Ok(Some(contrast_loss(flow, events, window, eps_w)?.value / base.value))
}

/// Mean of each metric over every window of a dataset, the recurrent state
/// carried within each sequence. Windows where a metric is undefined are
/// skipped for that metric.
pub fn evaluate_model(model: &FlowModel, data: &Dataset, eps_w: f64) -> Result<ScenarioMetrics> {
    let per_seq: Vec<Vec<[Option<f64>; 3]>> = data
        .sequences
        .par_iter()
        .map(|seq| {
            let preds = model.predict_sequence(&seq.windows)?;
            seq.windows
                .iter()
                .zip(preds)
                .map(|(w, (flow, _))| {
                    let a = match &w.gt {
                        Some(gt) => aee(&flow, gt, &w.events.event_mask())?,
                        None => None,
                    };
                    Ok([a, fwl(&w.events, &flow, w.window)?, rsat(&w.events, &flow, w.window, eps_w)?])
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let mean = |k: usize| {
        let v: Vec<f64> = per_seq.iter().flatten().filter_map(|m| m[k]).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    Ok(ScenarioMetrics {
        scenario: String::new(),
        aee1: mean(0),
        aee4: None,
        fwl: mean(1),
        rsat: mean(2),
    })
}

/// Mean AEE of the zero flow over a dataset.
pub fn zero_flow_aee(data: &Dataset) -> Result<Option<f64>> {
    let v: Vec<f64> = data
        .windows()
        .filter_map(|w| {
            let gt = w.gt.as_ref()?;
            let zero = FlowField::zeros(gt.flow.width, gt.flow.height);
            aee(&zero, gt, &w.events.event_mask()).transpose()
        })
        .collect::<Result<_>>()?;
    Ok((!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScenarioMetrics {
    pub scenario: String,
    pub aee1: Option<f64>,
    pub aee4: Option<f64>,
    pub fwl: Option<f64>,
    pub rsat: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub scenarios: Vec<ScenarioMetrics>,
}

impl MetricReport {
    fn rows(&self) -> impl Iterator<Item = (&str, &'static str, f64)> {
        self.scenarios.iter().flat_map(|s| {
            [("aee1", s.aee1), ("aee4", s.aee4), ("fwl", s.fwl), ("rsat", s.rsat)]
                .into_iter()
                .filter_map(move |(m, v)| v.map(|v| (s.scenario.as_str(), m, v)))
        })
    }

    /// `scenario,metric,value`; absent metrics are omitted.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("scenario,metric,value\n");
        for (sc, m, v) in self.rows() {
            writeln!(s, "{sc},{m},{v}").unwrap();
        }
        s
    }

    pub fn to_table(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        let mut s = format!("{:<16} {:>9} {:>9} {:>9} {:>9}\n", "scenario", "AEE1", "AEE4", "FWL", "RSAT");
        for sc in &self.scenarios {
            writeln!(
                s,
                "{:<16} {:>9} {:>9} {:>9} {:>9}",
                sc.scenario,
                cell(sc.aee1),
                cell(sc.aee4),
                cell(sc.fwl),
                cell(sc.rsat)
            )
            .unwrap();
        }
        s
    }
}
