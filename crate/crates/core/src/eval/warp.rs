use crate::error::{Error, Result};
use crate::events::{EventStream, Polarity};
use crate::flow::FlowField;

/// Bilinear footprint of a point: `(pixel, weight, dweight/dx, dweight/dy)`
/// for each of the four neighbours that fall inside the frame.
pub(crate) fn bilinear_corners(x: f64, y: f64, width: usize, height: usize) -> [Option<(usize, f64, f64, f64)>; 4] {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let corner = |dx: f64, dy: f64, w: f64, gx: f64, gy: f64| {
        let cx = x0 + dx;
        let cy = y0 + dy;
        if cx < 0.0 || cy < 0.0 || cx >= width as f64 || cy >= height as f64 {
            None
        } else {
            Some((cy as usize * width + cx as usize, w, gx, gy))
        }
    };
    [
        corner(0.0, 0.0, (1.0 - fx) * (1.0 - fy), -(1.0 - fy), -(1.0 - fx)),
        corner(1.0, 0.0, fx * (1.0 - fy), 1.0 - fy, -fx),
        corner(0.0, 1.0, (1.0 - fx) * fy, -fy, 1.0 - fx),
        corner(1.0, 1.0, fx * fy, fy, fx),
    ]
}

/// Events splatted at their motion-compensated positions.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpedEventImage {
    pub width: usize,
    pub height: usize,
    pub t_ref: f64,
    /// Warped counts, `[positive, negative]`.
    pub counts: [Vec<f64>; 2],
    /// Per-pixel mean of `|t_ref - t| / dt` over the warped mass; zero where
    /// no mass landed.
    pub avg_timestamp: [Vec<f64>; 2],
    /// Mass that fell outside the frame.
    pub clipped: f64,
}

impl WarpedEventImage {
    /// Polarity-summed counts.
    pub fn total_counts(&self) -> Vec<f64> {
        self.counts[0].iter().zip(&self.counts[1]).map(|(a, b)| a + b).collect()
    }

    pub fn mass(&self) -> f64 {
        self.counts.iter().flatten().sum()
    }

    pub fn nonzero_pixels(&self) -> usize {
        self.total_counts().iter().filter(|&&c| c > 0.0).count()
    }
}

pub(crate) fn polarity_index(p: Polarity) -> usize {
    match p {
        Polarity::Positive => 0,
        Polarity::Negative => 1,
    }
}

/// Moves each event by `(t_ref - t) / dt` times the flow at its pixel and
/// splats it bilinearly.
pub fn warp_events(events: &EventStream, flow: &FlowField, t_ref: f64, dt: f64) -> Result<WarpedEventImage> {
    if !(dt > 0.0) {
        return Err(Error::invalid(format!("dt must be positive, got {dt}")));
    }
    check_extents(events, flow)?;
    let (w, h) = (events.width, events.height);
    let mut counts = [vec![0.0; w * h], vec![0.0; w * h]];
    let mut stamps = [vec![0.0; w * h], vec![0.0; w * h]];
    let mut clipped = 0.0;
    for e in &events.events {
        let (u, v) = flow.at(e.x as usize, e.y as usize);
        let frac = (t_ref - e.t) / dt;
        let tau = frac.abs();
        let pi = polarity_index(e.p);
        let mut landed = 0.0;
        for (idx, wgt, _, _) in bilinear_corners(e.x as f64 + frac * u, e.y as f64 + frac * v, w, h)
            .into_iter()
            .flatten()
        {
            counts[pi][idx] += wgt;
            stamps[pi][idx] += wgt * tau;
            landed += wgt;
        }
        clipped += 1.0 - landed;
    }
    for (s, c) in stamps.iter_mut().zip(&counts) {
        s.iter_mut().zip(c).for_each(|(s, &c)| {
            if c > 0.0 {
                *s /= c
            }
        });
    }
    Ok(WarpedEventImage {
        width: w,
        height: h,
        t_ref,
        counts,
        avg_timestamp: stamps,
        clipped,
    })
}

pub(crate) fn check_extents(events: &EventStream, flow: &FlowField) -> Result<()> {
    if (events.width, events.height) != (flow.width, flow.height) {
        return Err(Error::shape(
            "warp",
            format!(
                "flow is {}x{} but sensor is {}x{}",
                flow.width, flow.height, events.width, events.height
            ),
        ));
    }
    Ok(())
}
