use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ResetMode {
    /// Subtract the threshold after a spike.
    #[default]
    Soft,
    /// Zero the potential after a spike.
    Hard,
}

impl ResetMode {
    pub fn code(self) -> f64 {
        match self {
            ResetMode::Soft => 0.0,
            ResetMode::Hard => 1.0,
        }
    }

    pub fn from_code(code: f64) -> Option<Self> {
        match code as i64 {
            0 => Some(ResetMode::Soft),
            1 => Some(ResetMode::Hard),
            _ => None,
        }
    }
}

impl std::str::FromStr for ResetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft" => Ok(ResetMode::Soft),
            "hard" => Ok(ResetMode::Hard),
            other => Err(Error::invalid(format!("reset must be soft or hard, got {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LifConfig {
    pub threshold: f64,
    /// Leak rate; the potential decays by `exp(-tau)` per step.
    pub tau: f64,
    pub reset: ResetMode,
}

impl LifConfig {
    pub fn new(threshold: f64, tau: f64, reset: ResetMode) -> Result<Self> {
        if !(threshold > 0.0) {
            return Err(Error::invalid(format!("threshold must be positive, got {threshold}")));
        }
        if !(tau >= 0.0) {
            return Err(Error::invalid(format!("tau must be non-negative, got {tau}")));
        }
        Ok(Self { threshold, tau, reset })
    }

    pub fn decay(&self) -> f64 {
        (-self.tau).exp()
    }
}

/// Membrane potential and last spikes of a population. The reset caused by
/// a spike is applied on the following step.
#[derive(Clone, Debug, PartialEq)]
pub struct LifState {
    pub potential: Vec<f64>,
    pub spikes: Vec<f64>,
}

impl LifState {
    pub fn new(size: usize) -> Self {
        Self {
            potential: vec![0.0; size],
            spikes: vec![0.0; size],
        }
    }

    /// Potential with the pending reset applied.
    pub fn residual(&self, cfg: &LifConfig) -> Vec<f64> {
        self.potential
            .iter()
            .zip(&self.spikes)
            .map(|(&v, &s)| match cfg.reset {
                ResetMode::Soft => v - s * cfg.threshold,
                ResetMode::Hard => v * (1.0 - s),
            })
            .collect()
    }
}

/// Advances every neuron by one step with input current `input` and returns
/// the emitted spikes (0 or 1).
pub fn lif_step(cfg: &LifConfig, state: &mut LifState, input: &[f64]) -> Result<Vec<f64>> {
    if input.len() != state.potential.len() {
        return Err(Error::shape(
            "lif_step",
            format!("{} inputs for {} neurons", input.len(), state.potential.len()),
        ));
    }
    let decay = cfg.decay();
    for ((v, s), &i) in state.potential.iter_mut().zip(state.spikes.iter_mut()).zip(input) {
        *v = match cfg.reset {
            ResetMode::Soft => decay * *v - *s * cfg.threshold + i,
            ResetMode::Hard => decay * *v * (1.0 - *s) + i,
        };
        *s = if *v >= cfg.threshold { 1.0 } else { 0.0 };
    }
    Ok(state.spikes.clone())
}

/// Tape-side counterpart of [`LifState`].
#[derive(Clone, Copy, Debug, Default)]
pub struct LifTapeState {
    prev: Option<(Var, Var)>,
}

impl LifTapeState {
    /// Integrates `drive` and emits spikes through the surrogate spike op.
    pub fn step(&mut self, tape: &mut Tape, cfg: &LifConfig, drive: Var) -> Result<Var> {
        let v = match self.prev {
            None => drive,
            Some((v, s)) => {
                let leaked = match cfg.reset {
                    ResetMode::Soft => {
                        let d = tape.scale(v, cfg.decay());
                        let r = tape.scale(s, cfg.threshold);
                        tape.sub(d, r)?
                    }
                    ResetMode::Hard => {
                        let keep = tape.one_minus(s);
                        let d = tape.scale(v, cfg.decay());
                        tape.mul(d, keep)?
                    }
                };
                tape.add(leaked, drive)?
            }
        };
        let s = tape.spike(v, cfg.threshold);
        self.prev = Some((v, s));
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn soft_reset_keeps_the_excess() {
        let cfg = LifConfig::new(1.0, 0.0, ResetMode::Soft).unwrap();
        let mut st = LifState::new(1);
        assert_eq!(lif_step(&cfg, &mut st, &[0.6]).unwrap(), vec![0.0]);
        assert_eq!(lif_step(&cfg, &mut st, &[0.6]).unwrap(), vec![1.0]);
        assert!((st.residual(&cfg)[0] - 0.2).abs() < 1e-12);
        let cfg = LifConfig { reset: ResetMode::Hard, ..cfg };
        assert_eq!(st.residual(&cfg)[0], 0.0);
    }

    #[test]
    fn leak_without_input() {
        let cfg = LifConfig::new(2.0, 0.8, ResetMode::Soft).unwrap();
        let mut st = LifState::new(1);
        lif_step(&cfg, &mut st, &[1.0]).unwrap();
        lif_step(&cfg, &mut st, &[0.0]).unwrap();
        assert!((st.potential[0] - 0.449_328_964).abs() < 1e-9);
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(LifConfig::new(0.0, 0.0, ResetMode::Soft).is_err());
        assert!(LifConfig::new(1.0, -0.1, ResetMode::Soft).is_err());
        let cfg = LifConfig::new(1.0, 0.0, ResetMode::Soft).unwrap();
        assert!(lif_step(&cfg, &mut LifState::new(2), &[1.0]).is_err());
    }
}
