//! The `stflow` command-line tool: synthetic data, the three training
//! paradigms, inference, evaluation, energy reports, leak-rate sweeps and
//! flow visualization.

pub mod config;
pub mod viz;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgMatches, Command};

use stflow::energy::{count_ann_ops, count_snn_ops, energy_csv, rec};
use stflow::eval::{aee, evaluate_model, fwl, rsat, AeeMode, MetricReport, ScenarioMetrics};
use stflow::events::{load_events, partition_bounds, save_events, synth_sequence, EventFormat, EventStream, SynthConfig};
use stflow::flow::{FlowField, GroundTruthFlow};
use stflow::model::FlowModel;
use stflow::network::STFlowNetParams;
use stflow::spiking::{convert_a2s, FiringReport, SpikingModel, TauMap};
use stflow::training::{stbp_train, train_ann, Dataset, LossHistory, WindowSample};

use config::{RawConfig, RunConfig, KEYS};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration; exit status 1.
    Usage(String),
    /// Unreadable, malformed or mismatched data; exit status 2.
    Data(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) => f.write_str(m),
        }
    }
}

impl From<stflow::Error> for CliError {
    fn from(e: stflow::Error) -> Self {
        match e {
            stflow::Error::InvalidArgument(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

const COMMANDS: &[(&str, &str)] = &[
    ("synth", "write a synthetic event recording and its ground-truth flow"),
    ("train", "train the ANN; writes ann.stfw and ann.loss.csv"),
    ("convert", "convert an ANN checkpoint to a spiking model; writes a2s.stfw"),
    ("retrain", "convert (if needed) and retrain with surrogate gradients; writes bisnn.stfw"),
    ("stbp", "train a spiking model directly from random weights; writes stbp.stfw"),
    ("infer", "predict flow per window; writes flow_NNN.flo and flow_NNN.ppm"),
    ("eval", "AEE, FWL and RSAT of a checkpoint or a flow file; writes metrics.csv"),
    ("energy", "operation counts and relative energy of a spiking model; writes energy.csv"),
    ("sweep", "evaluate a grid of leak rates over [0, 0.8]; writes sweep.csv"),
    ("visualize", "render a .flo file as a color-coded PPM image"),
];

pub fn command() -> Command {
    let mut root = Command::new("stflow")
        .about("Event-based optical flow with spiking networks")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .after_help("Exit status: 0 success, 1 usage error, 2 data or format error.")
        .arg(
            Arg::new("config")
                .long("config")
                .global(true)
                .value_name("FILE")
                .help("flat key=value file; flags override it"),
        );
    for k in KEYS {
        let default = if k.default.is_empty() { "unset" } else { k.default };
        root = root.arg(
            Arg::new(k.name)
                .long(k.name)
                .global(true)
                .value_name("VALUE")
                .help(format!("{} [default: {default}]", k.help)),
        );
    }
    for (name, about) in COMMANDS {
        root = root.subcommand(Command::new(*name).about(*about));
    }
    root
}

/// Runs the tool and returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match dispatch(&matches) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(m: &ArgMatches) -> CliResult<RunConfig> {
    let mut raw = RawConfig::default();
    if let Some(path) = m.get_one::<String>("config") {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("config {path}: {e}")))?;
        raw.merge_text(&text, path)?;
    }
    for k in KEYS {
        if let Some(v) = m.get_one::<String>(k.name) {
            raw.set(k.name, v)?;
        }
    }
    RunConfig::from_raw(&raw)
}

fn dispatch(m: &ArgMatches) -> CliResult<()> {
    let (name, sub) = m.subcommand().expect("subcommand required");
    let cfg = load_config(sub)?;
    match name {
        "synth" => cmd_synth(&cfg),
        "train" => cmd_train(&cfg),
        "convert" => cmd_convert(&cfg),
        "retrain" => cmd_retrain(&cfg),
        "stbp" => cmd_stbp(&cfg),
        "infer" => cmd_infer(&cfg),
        "eval" => cmd_eval(&cfg),
        "energy" => cmd_energy(&cfg),
        "sweep" => cmd_sweep(&cfg),
        "visualize" => cmd_visualize(&cfg),
        other => unreachable!("unregistered subcommand {other}"),
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn out_dir(cfg: &RunConfig) -> CliResult<&Path> {
    fs::create_dir_all(&cfg.out).map_err(|e| CliError::Data(format!("{}: {e}", cfg.out.display())))?;
    Ok(&cfg.out)
}

fn require<'a>(p: &'a Option<PathBuf>, key: &str) -> CliResult<&'a Path> {
    p.as_deref()
        .ok_or_else(|| CliError::Usage(format!("--{key} is required for this command")))
}

/// The recording named by `events` cut into windows, or a synthetic set.
fn dataset(cfg: &RunConfig) -> CliResult<Dataset> {
    match &cfg.events {
        Some(path) => {
            let stream = load_events(path, EventFormat::from_path(path), Some((cfg.size, cfg.size)))?;
            let gt = cfg.gt.as_ref().map(GroundTruthFlow::load).transpose()?;
            Ok(Dataset::from_stream(&stream, cfg.windows, gt.as_ref(), cfg.network.groups)?)
        }
        None => Ok(Dataset::synthetic(&cfg.synthetic_set())?),
    }
}

fn load_model(cfg: &RunConfig) -> CliResult<FlowModel> {
    let model = FlowModel::load(require(&cfg.checkpoint, "checkpoint")?)?;
    let net = &model.params().config;
    if (net.width, net.height) != (cfg.size, cfg.size) {
        return Err(CliError::Data(format!(
            "checkpoint expects {}x{} input but size is {}",
            net.width, net.height, cfg.size
        )));
    }
    Ok(model)
}

fn load_ann(cfg: &RunConfig) -> CliResult<STFlowNetParams> {
    match load_model(cfg)? {
        FlowModel::Ann(p) => Ok(p),
        FlowModel::Snn(_) => Err(CliError::Data("expected an ANN checkpoint, got a spiking one".into())),
    }
}

fn convert(cfg: &RunConfig, ann: &STFlowNetParams) -> CliResult<SpikingModel> {
    let mut m = convert_a2s(ann, cfg.time_steps, cfg.tau)?;
    m.reset = cfg.reset;
    Ok(m)
}

fn save_run(dir: &Path, stem: &str, model: &FlowModel, history: &LossHistory) -> CliResult<()> {
    let ckpt = dir.join(format!("{stem}.stfw"));
    model.save(&ckpt)?;
    write(&dir.join(format!("{stem}.loss.csv")), history.to_csv())?;
    match history.rows.last() {
        Some(r) => println!("{}: {} iterations, final loss {:.6}", ckpt.display(), history.len(), r.loss.total),
        None => println!("{}: no iterations run", ckpt.display()),
    }
    Ok(())
}

fn cmd_synth(cfg: &RunConfig) -> CliResult<()> {
    let mut sc = SynthConfig::new(cfg.size, cfg.size, cfg.velocity, cfg.seed);
    sc.density = cfg.density;
    let windows = synth_sequence(&sc, cfg.windows)?;
    let events: Vec<_> = windows.iter().flat_map(|w| w.events.events.iter().copied()).collect();
    let stream = EventStream::new(cfg.size, cfg.size, events)?;
    let dir = out_dir(cfg)?;
    let (name, format) = if cfg.text_events {
        ("events.txt", EventFormat::Text)
    } else {
        ("events.bin", EventFormat::Binary)
    };
    save_events(dir.join(name), &stream, format)?;
    let gt = &windows[0].gt;
    gt.save(dir.join("gt.flo"))?;
    println!(
        "{} events in {}; ground-truth flow magnitude {} px/window",
        stream.len(),
        dir.join(name).display(),
        gt.flow.mean_magnitude()
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> CliResult<()> {
    let data = dataset(cfg)?;
    let init = STFlowNetParams::init(cfg.network.clone(), cfg.seed)?;
    let (params, history) = train_ann(&init, &data, &cfg.train_config(100))?;
    save_run(out_dir(cfg)?, "ann", &FlowModel::Ann(params), &history)
}

fn cmd_convert(cfg: &RunConfig) -> CliResult<()> {
    let snn = convert(cfg, &load_ann(cfg)?)?;
    let path = out_dir(cfg)?.join("a2s.stfw");
    snn.save(&path)?;
    println!("{}: T={}, {} thresholds", path.display(), snn.time_steps, snn.thresholds.len());
    Ok(())
}

fn cmd_retrain(cfg: &RunConfig) -> CliResult<()> {
    let start = match load_model(cfg)? {
        FlowModel::Ann(p) => convert(cfg, &p)?,
        FlowModel::Snn(m) => m,
    };
    let data = dataset(cfg)?;
    let (model, history) = stbp_train(&start, &data, &cfg.train_config(10))?;
    save_run(out_dir(cfg)?, "bisnn", &FlowModel::Snn(model), &history)
}

fn cmd_stbp(cfg: &RunConfig) -> CliResult<()> {
    let data = dataset(cfg)?;
    let init = STFlowNetParams::init(cfg.network.clone(), cfg.seed)?;
    let (model, history) = stbp_train(&convert(cfg, &init)?, &data, &cfg.train_config(10))?;
    save_run(out_dir(cfg)?, "stbp", &FlowModel::Snn(model), &history)
}

fn cmd_infer(cfg: &RunConfig) -> CliResult<()> {
    let model = load_model(cfg)?;
    let data = dataset(cfg)?;
    let dir = out_dir(cfg)?;
    let seq = &data.sequences[0];
    for (i, (flow, _)) in model.predict_sequence(&seq.windows)?.iter().enumerate() {
        let stem = dir.join(format!("flow_{i:03}"));
        flow.write_flo(stem.with_extension("flo"))?;
        write(&stem.with_extension("ppm"), viz::flow_ppm(flow))?;
        println!("window {i}: mean flow magnitude {:.4} px", flow.mean_magnitude());
    }
    Ok(())
}

/// Predictions for every window; dt4 predicts on the four index quartiles
/// of each window in sequence and sums them.
fn predict(model: &FlowModel, seq: &[WindowSample], mode: AeeMode, groups: usize) -> CliResult<Vec<FlowField>> {
    match mode {
        AeeMode::Dt1 => Ok(model.predict_sequence(seq)?.into_iter().map(|(f, _)| f).collect()),
        AeeMode::Dt4 => {
            let mut parts = Vec::with_capacity(4 * seq.len());
            for w in seq {
                let b = partition_bounds(w.events.len(), 4);
                for q in b.windows(2) {
                    parts.push(WindowSample::new(w.events.slice(q[0]..q[1]), w.window, None, groups)?);
                }
            }
            let flows = model.predict_sequence(&parts)?;
            flows
                .chunks(4)
                .map(|c| {
                    c.iter()
                        .try_fold(FlowField::zeros(c[0].0.width, c[0].0.height), |acc, (f, _)| acc.add(f))
                        .map_err(CliError::from)
                })
                .collect()
        }
    }
}

fn cmd_eval(cfg: &RunConfig) -> CliResult<()> {
    let data = dataset(cfg)?;
    let fixed = cfg.flow.as_ref().map(FlowField::read_flo).transpose()?;
    let model = match &fixed {
        Some(_) => None,
        None => Some(load_model(cfg)?),
    };
    let (mut aees, mut fwls, mut rsats) = (Vec::new(), Vec::new(), Vec::new());
    for seq in &data.sequences {
        let flows = match (&fixed, &model) {
            (Some(f), _) => vec![f.clone(); seq.windows.len()],
            (None, Some(m)) => predict(m, &seq.windows, cfg.mode, cfg.network.groups)?,
            (None, None) => unreachable!("model loaded when no flow is given"),
        };
        for (w, f) in seq.windows.iter().zip(&flows) {
            if let Some(gt) = &w.gt {
                aees.extend(aee(f, gt, &w.events.event_mask())?);
            }
            fwls.extend(fwl(&w.events, f, w.window)?);
            rsats.extend(rsat(&w.events, f, w.window, cfg.train.loss.eps_w)?);
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let mut s = ScenarioMetrics {
        scenario: cfg.scenario.clone(),
        fwl: mean(&fwls),
        rsat: mean(&rsats),
        ..Default::default()
    };
    match cfg.mode {
        AeeMode::Dt1 => s.aee1 = mean(&aees),
        AeeMode::Dt4 => s.aee4 = mean(&aees),
    }
    let report = MetricReport { scenarios: vec![s] };
    write(&out_dir(cfg)?.join("metrics.csv"), report.to_csv())?;
    print!("{}", report.to_table());
    Ok(())
}

fn cmd_energy(cfg: &RunConfig) -> CliResult<()> {
    let model = match load_model(cfg)? {
        FlowModel::Snn(m) => m,
        FlowModel::Ann(_) => {
            return Err(CliError::Data(
                "energy needs a spiking checkpoint; run convert first".into(),
            ))
        }
    };
    let data = dataset(cfg)?;
    let snn = FlowModel::Snn(model.clone());
    let mut reports = Vec::new();
    for seq in &data.sequences {
        reports.extend(snn.predict_sequence(&seq.windows)?.into_iter().filter_map(|(_, r)| r));
    }
    let firing = FiringReport::average(&reports).expect("at least one window");
    let ann = count_ann_ops(&model.params.config, cfg.energy)?;
    let spiking = count_snn_ops(&model, &firing, cfg.energy)?;
    let eta = rec(&ann, &spiking)?;
    write(&out_dir(cfg)?.join("energy.csv"), energy_csv(&ann, &spiking)?)?;
    println!(
        "ANN {:.4e} J, SNN {:.4e} J, relative energy {eta:.4}",
        ann.total_energy_j(),
        spiking.total_energy_j()
    );
    Ok(())
}

fn cmd_sweep(cfg: &RunConfig) -> CliResult<()> {
    let ann = load_ann(cfg)?;
    let data = dataset(cfg)?;
    let tc = cfg.train_config(10);
    let g = cfg.grid;
    let grid: Vec<f64> = (0..g)
        .map(|i| if g == 1 { 0.0 } else { 0.8 * i as f64 / (g - 1) as f64 })
        .collect();
    let mut csv = String::from("tau0,tau1,aee1,fwl,rsat\n");
    let cell = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
    for &t0 in &grid {
        for &t1 in &grid {
            let mut c = cfg.clone();
            c.tau = TauMap::new(t0, t1)?;
            let mut m = convert(&c, &ann)?;
            if tc.epochs_bisnn > 0 {
                m = stbp_train(&m, &data, &tc)?.0;
            }
            let s = evaluate_model(&FlowModel::Snn(m), &data, cfg.train.loss.eps_w)?;
            writeln!(csv, "{t0},{t1},{},{},{}", cell(s.aee1), cell(s.fwl), cell(s.rsat)).unwrap();
            println!("tau0={t0:.2} tau1={t1:.2} aee1={}", cell(s.aee1));
        }
    }
    write(&out_dir(cfg)?.join("sweep.csv"), csv)
}

fn cmd_visualize(cfg: &RunConfig) -> CliResult<()> {
    let src = require(&cfg.flow, "flow")?;
    let flow = FlowField::read_flo(src)?;
    let dest = if cfg.out.extension().is_some_and(|e| e == "ppm") {
        if let Some(parent) = cfg.out.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| CliError::Data(format!("{}: {e}", parent.display())))?;
        }
        cfg.out.clone()
    } else {
        let stem = src.file_stem().map_or_else(|| "flow".into(), |s| s.to_os_string());
        out_dir(cfg)?.join(stem).with_extension("ppm")
    };
    write(&dest, viz::flow_ppm(&flow))?;
    println!("{}", dest.display());
    Ok(())
}
