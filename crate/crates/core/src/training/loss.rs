use std::sync::Arc;

use crate::error::{Error, Result};
use crate::eval::warp::{bilinear_corners, check_extents, polarity_index};
use crate::events::{EventStream, TimeWindow};
use crate::flow::FlowField;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub smooth_weight: f64,
    pub charbonnier_eps: f64,
    pub charbonnier_alpha: f64,
    /// Floor added to count denominators.
    pub eps_w: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            smooth_weight: 0.001,
            charbonnier_eps: 1e-3,
            charbonnier_alpha: 0.5,
            eps_w: 1e-9,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.smooth_weight >= 0.0) {
            return Err(Error::invalid("smooth_weight must be non-negative"));
        }
        if !(self.charbonnier_eps > 0.0) || !(self.eps_w > 0.0) {
            return Err(Error::invalid("charbonnier_eps and eps_w must be positive"));
        }
        if !(self.charbonnier_alpha > 0.0 && self.charbonnier_alpha <= 1.0) {
            return Err(Error::invalid("charbonnier_alpha must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Contrast loss value with a flag for the degenerate no-event case.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContrastLoss {
    pub value: f64,
    /// Set when the window held no events; `value` is then 0.
    pub no_events: bool,
}

type FlowGrad = (Vec<f64>, Vec<f64>);

/// Average-timestamp loss summed over the two reference times. Each event
/// carries its timestamp relative to the window start, normalized by the
/// window length; see [`crate::eval::warp_events`].
fn contrast_pass(
    events: &EventStream,
    u: &[f64],
    v: &[f64],
    window: TimeWindow,
    eps_w: f64,
    want_grad: bool,
) -> (f64, Option<FlowGrad>) {
    let (w, h) = (events.width, events.height);
    let n = w * h;
    let dt = window.duration();
    let mut total = 0.0;
    let mut grad = want_grad.then(|| (vec![0.0; n], vec![0.0; n]));
    for t_ref in [window.start, window.end] {
        let mut mass = [vec![0.0; n], vec![0.0; n]];
        let mut stamp = [vec![0.0; n], vec![0.0; n]];
        for e in &events.events {
            let pix = e.y as usize * w + e.x as usize;
            let frac = (t_ref - e.t) / dt;
            let tau = (e.t - window.start) / dt;
            let pi = polarity_index(e.p);
            let corners = bilinear_corners(e.x as f64 + frac * u[pix], e.y as f64 + frac * v[pix], w, h);
            for (k, wgt, _, _) in corners.into_iter().flatten() {
                mass[pi][k] += wgt;
                stamp[pi][k] += wgt * tau;
            }
        }
        let active = (0..n).filter(|&k| mass[0][k] + mass[1][k] > 0.0).count();
        let denom = active as f64 + eps_w;
        let mut sum = 0.0;
        for p in 0..2 {
            for k in 0..n {
                let t = stamp[p][k] / (mass[p][k] + eps_w);
                sum += t * t;
            }
        }
        total += sum / denom;

        if let Some((gu, gv)) = grad.as_mut() {
            // d loss / d mass and d loss / d stamp per pixel, the active count held fixed
            let mut g_mass = [vec![0.0; n], vec![0.0; n]];
            let mut g_stamp = [vec![0.0; n], vec![0.0; n]];
            for p in 0..2 {
                for k in 0..n {
                    let m = mass[p][k] + eps_w;
                    let t = stamp[p][k] / m;
                    let gt = 2.0 * t / denom;
                    g_stamp[p][k] = gt / m;
                    g_mass[p][k] = -gt * t / m;
                }
            }
            for e in &events.events {
                let pix = e.y as usize * w + e.x as usize;
                let frac = (t_ref - e.t) / dt;
                let tau = (e.t - window.start) / dt;
                let pi = polarity_index(e.p);
                let corners = bilinear_corners(e.x as f64 + frac * u[pix], e.y as f64 + frac * v[pix], w, h);
                let (mut gx, mut gy) = (0.0, 0.0);
                for (k, _, dwdx, dwdy) in corners.into_iter().flatten() {
                    let gw = g_stamp[pi][k] * tau + g_mass[pi][k];
                    gx += gw * dwdx;
                    gy += gw * dwdy;
                }
                gu[pix] += gx * frac;
                gv[pix] += gy * frac;
            }
        }
    }
    (total, grad)
}

pub fn contrast_loss(flow: &FlowField, events: &EventStream, window: TimeWindow, eps_w: f64) -> Result<ContrastLoss> {
    check_extents(events, flow)?;
    if events.is_empty() {
        return Ok(ContrastLoss {
            value: 0.0,
            no_events: true,
        });
    }
    let (value, _) = contrast_pass(events, &flow.u, &flow.v, window, eps_w, false);
    Ok(ContrastLoss {
        value,
        no_events: false,
    })
}

fn flow_planes(t: &Tensor, width: usize, height: usize) -> Result<(&[f64], &[f64])> {
    if t.shape() != [1, 2, height, width] {
        return Err(Error::shape(
            "loss",
            format!("flow {:?} does not match a {}x{} sensor", t.shape(), width, height),
        ));
    }
    Ok(t.data().split_at(width * height))
}

/// Tape version of [`contrast_loss`] over a `[1, 2, H, W]` flow.
pub fn contrast_loss_tape(
    tape: &mut Tape,
    flow: Var,
    events: Arc<EventStream>,
    window: TimeWindow,
    eps_w: f64,
) -> Result<Var> {
    let (w, h) = (events.width, events.height);
    let (u, v) = flow_planes(tape.value(flow), w, h)?;
    let (u, v) = (u.to_vec(), v.to_vec());
    if events.is_empty() {
        return Ok(tape.custom(&[flow], Tensor::scalar(0.0), move |_| {
            vec![Some(Tensor::zeros(&[1, 2, h, w]))]
        }));
    }
    let (value, _) = contrast_pass(&events, &u, &v, window, eps_w, false);
    Ok(tape.custom(&[flow], Tensor::scalar(value), move |g| {
        let g = g.data()[0];
        let (_, grad) = contrast_pass(&events, &u, &v, window, eps_w, true);
        let (gu, gv) = grad.expect("gradient requested");
        let data = gu.into_iter().chain(gv).map(|x| x * g).collect();
        vec![Some(Tensor::new(vec![1, 2, h, w], data).expect("flow shape"))]
    }))
}

fn charbonnier_pass(u: &[f64], v: &[f64], w: usize, h: usize, eps: f64, alpha: f64, grad: Option<(&mut [f64], &mut [f64])>) -> f64 {
    let pairs = 2 * (h * w.saturating_sub(1) + h.saturating_sub(1) * w);
    if pairs == 0 {
        return 0.0;
    }
    let norm = 1.0 / pairs as f64;
    let eps2 = eps * eps;
    let mut sum = 0.0;
    let mut grad = grad;
    for plane in 0..2 {
        let f = if plane == 0 { u } else { v };
        for y in 0..h {
            for x in 0..w {
                let a = y * w + x;
                for (ok, b) in [(x + 1 < w, a + 1), (y + 1 < h, a + w)] {
                    if !ok {
                        continue;
                    }
                    let d = f[b] - f[a];
                    let base = d * d + eps2;
                    sum += base.powf(alpha);
                    if let Some((gu, gv)) = grad.as_mut() {
                        let g = if plane == 0 { &mut **gu } else { &mut **gv };
                        let dd = norm * alpha * base.powf(alpha - 1.0) * 2.0 * d;
                        g[b] += dd;
                        g[a] -= dd;
                    }
                }
            }
        }
    }
    sum * norm
}

/// Mean Charbonnier penalty over all horizontal and vertical neighbour
/// differences of both flow components.
pub fn smoothness_loss(flow: &FlowField, cfg: &LossConfig) -> f64 {
    charbonnier_pass(
        &flow.u,
        &flow.v,
        flow.width,
        flow.height,
        cfg.charbonnier_eps,
        cfg.charbonnier_alpha,
        None,
    )
}

pub fn smoothness_loss_tape(tape: &mut Tape, flow: Var, cfg: &LossConfig) -> Result<Var> {
    let (_, _, h, w) = tape.value(flow).dims4()?;
    let (u, v) = flow_planes(tape.value(flow), w, h)?;
    let (eps, alpha) = (cfg.charbonnier_eps, cfg.charbonnier_alpha);
    let value = charbonnier_pass(u, v, w, h, eps, alpha, None);
    let (u, v) = (u.to_vec(), v.to_vec());
    Ok(tape.custom(&[flow], Tensor::scalar(value), move |g| {
        let mut gu = vec![0.0; w * h];
        let mut gv = vec![0.0; w * h];
        charbonnier_pass(&u, &v, w, h, eps, alpha, Some((&mut gu, &mut gv)));
        let g = g.data()[0];
        let data = gu.into_iter().chain(gv).map(|x| x * g).collect();
        vec![Some(Tensor::new(vec![1, 2, h, w], data).expect("flow shape"))]
    }))
}

/// Components of one loss evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub contrast: f64,
    pub smooth: f64,
    pub total: f64,
}

impl std::ops::AddAssign for LossBreakdown {
    fn add_assign(&mut self, o: Self) {
        self.contrast += o.contrast;
        self.smooth += o.smooth;
        self.total += o.total;
    }
}

impl LossBreakdown {
    pub fn scaled(self, k: f64) -> Self {
        Self {
            contrast: self.contrast * k,
            smooth: self.smooth * k,
            total: self.total * k,
        }
    }
}

pub fn total_loss(flow: &FlowField, events: &EventStream, window: TimeWindow, cfg: &LossConfig) -> Result<LossBreakdown> {
    let contrast = contrast_loss(flow, events, window, cfg.eps_w)?.value;
    let smooth = smoothness_loss(flow, cfg);
    Ok(LossBreakdown {
        contrast,
        smooth,
        total: contrast + cfg.smooth_weight * smooth,
    })
}

/// Records the weighted loss on the tape and returns it with its parts.
pub fn total_loss_tape(
    tape: &mut Tape,
    flow: Var,
    events: Arc<EventStream>,
    window: TimeWindow,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    let c = contrast_loss_tape(tape, flow, events, window, cfg.eps_w)?;
    let s = smoothness_loss_tape(tape, flow, cfg)?;
    let ws = tape.scale(s, cfg.smooth_weight);
    let total = tape.add(c, ws)?;
    let parts = LossBreakdown {
        contrast: tape.value(c).data()[0],
        smooth: tape.value(s).data()[0],
        total: tape.value(total).data()[0],
    };
    Ok((total, parts))
}
