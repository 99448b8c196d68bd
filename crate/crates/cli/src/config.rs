//! Flat `key=value` run configuration. Every key has a default; a config
//! file overrides defaults and command-line flags override the file.

use std::collections::BTreeMap;
use std::path::PathBuf;

use stflow::energy::EnergyConstants;
use stflow::eval::AeeMode;
use stflow::network::NetworkConfig;
use stflow::spiking::{ResetMode, TauMap};
use stflow::training::{LossConfig, SyntheticSet, TrainConfig};

use crate::CliError;

pub struct Key {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

const fn key(name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key { name, default, help }
}

/// Every recognised key. An empty default means "unset".
pub const KEYS: &[Key] = &[
    key("size", "32", "sensor width and height in pixels (square)"),
    key("velocity", "6,0", "synthetic motion in pixels per window, as u,v"),
    key("windows", "2", "windows per sequence; recordings are cut into this many"),
    key("sequences", "16", "synthetic sequences in a dataset"),
    key("density", "0.5", "synthetic events per pixel per window"),
    key("seed", "0", "seed for data generation, initialization and shuffling"),
    key("format", "bin", "event file format written by synth: bin or txt"),
    key("base_channels", "4", "encoder-1 width; channels double per encoder (reference scale: 32)"),
    key("groups", "4", "event groups N per window"),
    key("levels", "4", "QCFS quantization levels L"),
    key("decoders", "1", "decoder count (reference value: 1)"),
    key("flow_scale", "8", "pixels per unit of network output"),
    key("qcfs_shift", "false", "use the half-step shifted QCFS"),
    key("T", "4", "spiking time steps per window; a multiple of groups"),
    key("tau0", "0", "leak rate of the generator readout"),
    key("tau1", "0", "leak rate of the state carried into ConvGRU2"),
    key("reset", "soft", "membrane reset after a spike: soft or hard"),
    key("epochs", "", "training epochs (default: 100 for train, 10 for retrain, stbp and sweep)"),
    key("iterations", "0", "stop after this many iterations; 0 = no limit"),
    key("batch_size", "8", "sequences per optimizer step (reference value: 8)"),
    key("lr", "2e-4", "Adam learning rate (reference value: 2e-4)"),
    key("gamma", "0.98", "learning-rate decay per epoch"),
    key("smooth_weight", "0.001", "smoothness loss weight (reference value: 0.001)"),
    key("charbonnier_eps", "1e-3", "Charbonnier epsilon"),
    key("charbonnier_alpha", "0.5", "Charbonnier exponent"),
    key("eps_w", "1e-9", "contrast-loss normalization floor"),
    key("mode", "dt1", "AEE mode: dt1 or dt4"),
    key("grid", "5", "sweep grid points per leak rate over [0, 0.8]"),
    key("e_mac", "4.6e-12", "joules per multiply-accumulate"),
    key("e_ac", "0.9e-12", "joules per accumulate"),
    key("scenario", "synthetic", "scenario label in metric reports"),
    key("events", "", "event file (.txt/.csv text, anything else binary); synthetic data when unset"),
    key("gt", "", "ground-truth .flo file for the events"),
    key("flow", "", "flow .flo file (eval without a model, visualize)"),
    key("checkpoint", "", "input checkpoint"),
    key("out", "out", "output directory, or output file for visualize"),
];

pub fn lookup(name: &str) -> Option<&'static Key> {
    KEYS.iter().find(|k| k.name == name)
}

/// Raw key/value layers, later ones winning.
#[derive(Clone, Debug, Default)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        if lookup(key).is_none() {
            return Err(CliError::Usage(format!("unknown config key {key:?}")));
        }
        self.values.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    /// Parses `key=value` lines; blank lines and `#` comments are skipped.
    pub fn merge_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("{origin}:{}: expected key=value, got {line:?}", i + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| CliError::Usage(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| lookup(key).expect("known key").default)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub size: usize,
    pub velocity: (f64, f64),
    pub windows: usize,
    pub sequences: usize,
    pub density: f64,
    pub seed: u64,
    pub text_events: bool,
    pub network: NetworkConfig,
    pub time_steps: usize,
    pub tau: TauMap,
    pub reset: ResetMode,
    pub epochs: Option<usize>,
    pub train: TrainConfig,
    pub mode: AeeMode,
    pub grid: usize,
    pub energy: EnergyConstants,
    pub scenario: String,
    pub events: Option<PathBuf>,
    pub gt: Option<PathBuf>,
    pub flow: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: PathBuf,
}

fn parse<T: std::str::FromStr>(raw: &RawConfig, key: &str) -> Result<T, CliError> {
    let v = raw.get(key);
    v.parse()
        .map_err(|_| CliError::Usage(format!("{key}: cannot parse {v:?}")))
}

fn path(raw: &RawConfig, key: &str) -> Option<PathBuf> {
    let v = raw.get(key);
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl RunConfig {
    pub fn from_raw(raw: &RawConfig) -> Result<Self, CliError> {
        let velocity = {
            let v = raw.get("velocity");
            let parts: Vec<&str> = v.split(',').collect();
            match parts.as_slice() {
                [u, w] => (
                    u.trim().parse().map_err(|_| CliError::Usage(format!("velocity: bad u in {v:?}")))?,
                    w.trim().parse().map_err(|_| CliError::Usage(format!("velocity: bad v in {v:?}")))?,
                ),
                _ => return Err(CliError::Usage(format!("velocity must be u,v, got {v:?}"))),
            }
        };
        let text_events = match raw.get("format") {
            "bin" => false,
            "txt" => true,
            other => return Err(CliError::Usage(format!("format must be bin or txt, got {other:?}"))),
        };
        let size: usize = parse(raw, "size")?;
        let network = NetworkConfig {
            base_channels: parse(raw, "base_channels")?,
            groups: parse(raw, "groups")?,
            decoders: parse(raw, "decoders")?,
            levels: parse(raw, "levels")?,
            height: size,
            width: size,
            flow_scale: parse(raw, "flow_scale")?,
            qcfs_shift: parse(raw, "qcfs_shift")?,
            ..NetworkConfig::default()
        };
        let epochs = match raw.get("epochs") {
            "" => None,
            _ => Some(parse(raw, "epochs")?),
        };
        let iterations: usize = parse(raw, "iterations")?;
        let seed = parse(raw, "seed")?;
        let train = TrainConfig {
            batch_size: parse(raw, "batch_size")?,
            lr: parse(raw, "lr")?,
            gamma: parse(raw, "gamma")?,
            seed,
            max_iterations: (iterations > 0).then_some(iterations),
            loss: LossConfig {
                smooth_weight: parse(raw, "smooth_weight")?,
                charbonnier_eps: parse(raw, "charbonnier_eps")?,
                charbonnier_alpha: parse(raw, "charbonnier_alpha")?,
                eps_w: parse(raw, "eps_w")?,
            },
            ..TrainConfig::default()
        };
        let cfg = Self {
            size,
            velocity,
            windows: parse(raw, "windows")?,
            sequences: parse(raw, "sequences")?,
            density: parse(raw, "density")?,
            seed,
            text_events,
            network,
            time_steps: parse(raw, "T")?,
            tau: TauMap::new(parse(raw, "tau0")?, parse(raw, "tau1")?)?,
            reset: parse::<ResetMode>(raw, "reset")?,
            epochs,
            train,
            mode: raw.get("mode").parse()?,
            grid: parse(raw, "grid")?,
            energy: EnergyConstants::new(parse(raw, "e_mac")?, parse(raw, "e_ac")?)?,
            scenario: raw.get("scenario").to_string(),
            events: path(raw, "events"),
            gt: path(raw, "gt"),
            flow: path(raw, "flow"),
            checkpoint: path(raw, "checkpoint"),
            out: path(raw, "out").unwrap_or_else(|| PathBuf::from("out")),
        };
        cfg.train.validate()?;
        if cfg.grid == 0 {
            return Err(CliError::Usage("grid must be positive".into()));
        }
        Ok(cfg)
    }

    pub fn synthetic_set(&self) -> SyntheticSet {
        SyntheticSet {
            width: self.size,
            height: self.size,
            groups: self.network.groups,
            sequences: self.sequences,
            windows: self.windows,
            velocity: self.velocity,
            density: self.density,
            seed: self.seed,
            ..SyntheticSet::default()
        }
    }

    /// Training configuration with `default_epochs` unless `epochs` is set.
    pub fn train_config(&self, default_epochs: usize) -> TrainConfig {
        let e = self.epochs.unwrap_or(default_epochs);
        TrainConfig {
            epochs_ann: e,
            epochs_bisnn: e,
            ..self.train.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse() {
        let c = RunConfig::from_raw(&RawConfig::default()).unwrap();
        assert_eq!(c.velocity, (6.0, 0.0));
        assert_eq!(c.train.lr, 2e-4);
        assert_eq!(c.network.width, 32);
        assert!(c.epochs.is_none());
    }

    #[test]
    fn file_then_flag_precedence() {
        let mut raw = RawConfig::default();
        raw.merge_text("# comment\nlr = 0.01\nseed=3\n", "cfg").unwrap();
        raw.set("lr", "0.5").unwrap();
        let c = RunConfig::from_raw(&raw).unwrap();
        assert_eq!(c.train.lr, 0.5);
        assert_eq!(c.seed, 3);
    }

    #[test]
    fn unknown_and_malformed_rejected() {
        let mut raw = RawConfig::default();
        assert!(raw.merge_text("nope=1", "cfg").is_err());
        assert!(raw.merge_text("lr 1", "cfg").is_err());
        raw.set("velocity", "1;2").unwrap();
        assert!(RunConfig::from_raw(&raw).is_err());
    }
}
