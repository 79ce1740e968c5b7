//! `tactiforce` subcommands. Exit codes: 0 success, 2 usage, 1 runtime.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use tactiforce_core::mlp::{self, MlpParams, Predictor};
use tactiforce_core::poisson::{max_depth, Reconstructor};
use tactiforce_core::regress::{
    fit_poly3, run_calibration, CalibSample, DepthSource, ForceEstimator, PolyCurve,
};
use tactiforce_core::sim::{self, Indenter, IndenterShape};
use tactiforce_core::teleop::{
    self, ForceSensor, IdealSensor, OracleSensor, PipelineSensor, RegionMetrics, Scenario,
};

use crate::bench::run_bench;
use crate::bus::record::{read_record, record, replay};
use crate::bus::BusClient;
use crate::config::{Config, SensorMode};
use crate::formats::{
    self, fingerprint, fingerprint_bytes, read_checkpoint, read_curve, write_checkpoint, write_json,
    CheckpointMeta, CurveFile, Tfr1, TrainMetrics,
};
use crate::live::{self, LiveSensor};

#[derive(Debug, Parser)]
#[command(name = "tactiforce", version, about = "Vision-based tactile force sensing and teleoperation")]
pub struct Cli {
    /// TOML configuration; every key is optional.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a calibration dataset and train the normal network.
    Train(TrainArgs),
    /// Press the probe in steps and fit the depth to force curve.
    Calibrate(CalibrateArgs),
    /// Recover a depth map from a frame.
    Reconstruct(ReconstructArgs),
    /// Run a scripted teleoperation scenario.
    Simulate(SimulateArgs),
    /// Live mode: bus server, force pipeline and teleop loop.
    Serve(ServeArgs),
    /// Throughput of the frame to force pipeline.
    Bench(BenchArgs),
    /// Write bus traffic to a JSON-lines file.
    Record(RecordArgs),
    /// Republish a recorded session.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Checkpoint path; metadata goes to `<out>.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// Training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Rendered calibration images.
    #[arg(long)]
    pub images: Option<usize>,
    /// Images held out for the angular error metric.
    #[arg(long)]
    pub holdout: Option<usize>,
    /// Also write the metrics JSON here.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibMode {
    /// Simulator depth maps.
    Oracle,
    /// Rendered frames through the network and solver.
    Full,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long, value_enum, default_value_t = CalibMode::Oracle)]
    pub mode: CalibMode,
    /// Network checkpoint, required in full mode.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Curve JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Raw `depth_mm,force_n` samples.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    /// TFR1 frame file.
    #[arg(long, conflicts_with = "press", required_unless_present = "press")]
    pub input: Option<PathBuf>,
    /// Render a centred ball press of this depth (mm) instead.
    #[arg(long)]
    pub press: Option<f64>,
    /// Network checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Depth map as TFR1.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Predicted normals as TFR1.
    #[arg(long)]
    pub normals: Option<PathBuf>,
    /// Input frame as PNG.
    #[arg(long)]
    pub png: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scenario JSON.
    #[arg(long)]
    pub scenario: PathBuf,
    /// Telemetry, one JSON record per control tick.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the metrics JSON here.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Force feedback in every phase, overriding the scenario.
    #[arg(long, value_enum)]
    pub feedback: Option<Switch>,
    /// Force source of the loop; `teleop.sensor` otherwise.
    #[arg(long, value_enum)]
    pub sensor: Option<SensorMode>,
    /// Network checkpoint for the pipeline sensor.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Calibration curve; fitted on the fly when absent.
    #[arg(long)]
    pub curve: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// host:port; overrides TACTIFORCE_BUS_ADDR and the config.
    #[arg(long)]
    pub addr: Option<String>,
    /// Force source of the live force stage.
    #[arg(long, value_enum)]
    pub sensor: Option<SensorMode>,
    /// Network checkpoint for the pipeline sensor.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Calibration curve; fitted on the fly when absent.
    #[arg(long)]
    pub curve: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Frames to time.
    #[arg(long, default_value_t = 300, value_parser = clap::value_parser!(u64).range(1..))]
    pub frames: u64,
    /// Frame height in pixels; the gel's otherwise.
    #[arg(long)]
    pub height: Option<usize>,
    /// Frame width in pixels; the gel's otherwise.
    #[arg(long)]
    pub width: Option<usize>,
    /// Network checkpoint; a seeded untrained network otherwise.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Calibration curve; a Hertz oracle fit otherwise.
    #[arg(long)]
    pub curve: Option<PathBuf>,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RecordArgs {
    /// Server host:port.
    #[arg(long)]
    pub addr: Option<String>,
    /// Topics to record; all registered topics when empty.
    #[arg(long = "topic")]
    pub topics: Vec<String>,
    /// JSON-lines output.
    #[arg(long)]
    pub out: PathBuf,
    /// Seconds; until Ctrl-C or server shutdown otherwise.
    #[arg(long)]
    pub duration: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Server host:port.
    #[arg(long)]
    pub addr: Option<String>,
    /// Recording written by `record`.
    #[arg(long)]
    pub input: PathBuf,
    /// Playback rate; 2 halves the gaps between messages.
    #[arg(long, default_value_t = 1.0)]
    pub speed: f64,
}

/// A bad invocation that clap could not catch; exits with 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        2
    } else {
        1
    }
}

/// Parses `args` and runs the subcommand, printing errors to stderr.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = Config::load_or_default(cli.config.as_deref())?;
    match cli.command {
        Command::Train(a) => train(cfg, a),
        Command::Calibrate(a) => calibrate(cfg, a),
        Command::Reconstruct(a) => reconstruct(cfg, a),
        Command::Simulate(a) => simulate(cfg, a),
        Command::Serve(a) => serve(cfg, a),
        Command::Bench(a) => bench(cfg, a),
        Command::Record(a) => record_cmd(cfg, a),
        Command::Replay(a) => replay_cmd(cfg, a),
    }
}

fn print_json<T: Serialize>(value: &T) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn load_params(path: &Path) -> anyhow::Result<MlpParams> {
    read_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn load_curve(path: &Path) -> anyhow::Result<PolyCurve> {
    read_curve(path).with_context(|| format!("loading curve {}", path.display()))
}

fn tokio_rt() -> anyhow::Result<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_multi_thread().enable_all().build()?)
}

fn train(mut cfg: Config, a: TrainArgs) -> anyhow::Result<()> {
    if a.epochs == Some(0) {
        return Err(usage("epochs must be ≥ 1"));
    }
    let tc = &mut cfg.mlp.train;
    tc.epochs = a.epochs.unwrap_or(tc.epochs);
    tc.rng_seed = a.seed.unwrap_or(tc.rng_seed);
    let dc = &mut cfg.mlp.dataset;
    dc.n_images = a.images.unwrap_or(dc.n_images);
    dc.holdout_images = a.holdout.unwrap_or(dc.holdout_images);
    if dc.holdout_images >= dc.n_images {
        return Err(usage("holdout must leave at least one training image"));
    }
    cfg.mlp.train.validate().map_err(|e| usage(e.to_string()))?;

    let t0 = Instant::now();
    let ds = mlp::make_calib_dataset(&cfg.gel, &cfg.lighting, &cfg.mlp.dataset).context("building dataset")?;
    let dataset_fingerprint = fingerprint_bytes(ds.samples.iter().flat_map(|s| {
        s.input
            .iter()
            .chain(&s.target)
            .map(|v| v.to_le_bytes())
            .collect::<Vec<_>>()
    }));
    let (train_set, holdout) = ds.split(cfg.mlp.dataset.holdout_images);
    let outcome = mlp::train(train_set, &cfg.mlp.train).context("training")?;
    let final_loss = *outcome.loss_history.last().expect("at least one epoch");
    let holdout_err = if holdout.is_empty() {
        f64::NAN
    } else {
        mlp::median_angular_error(&outcome.params, holdout)
    };
    let metrics = TrainMetrics {
        final_loss,
        holdout_angular_error_deg: holdout_err,
    };
    let meta = CheckpointMeta {
        train: cfg.mlp.train.clone(),
        dataset: cfg.mlp.dataset,
        gel: cfg.gel,
        dataset_fingerprint,
        config_fingerprint: cfg.fingerprint(),
        metrics,
    };
    write_checkpoint(&a.out, &outcome.params, &meta)
        .with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(p) = &a.metrics {
        write_json(p, &metrics).with_context(|| format!("writing {}", p.display()))?;
    }

    #[derive(Serialize)]
    struct Report {
        #[serde(flatten)]
        metrics: TrainMetrics,
        epochs: usize,
        checkpoint: PathBuf,
        train_seconds: f64,
    }
    print_json(&Report {
        metrics,
        epochs: cfg.mlp.train.epochs,
        checkpoint: a.out,
        train_seconds: t0.elapsed().as_secs_f64(),
    })?;
    Ok(())
}

/// Calibration samples and their cubic fit.
pub fn calibrate_curve(cfg: &Config, params: Option<&MlpParams>) -> anyhow::Result<(Vec<CalibSample>, PolyCurve)> {
    let source = match params {
        Some(p) => DepthSource::Full(p),
        None => DepthSource::Oracle,
    };
    let samples = run_calibration(&cfg.gel, &cfg.lighting, &cfg.calibration, source)?;
    let curve = fit_poly3(&samples)?;
    Ok((samples, curve))
}

fn calibrate(cfg: Config, a: CalibrateArgs) -> anyhow::Result<()> {
    let params = match (a.mode, &a.checkpoint) {
        (CalibMode::Full, None) => return Err(anyhow!("full calibration needs --checkpoint")),
        (CalibMode::Full, Some(p)) => Some(load_params(p)?),
        (CalibMode::Oracle, _) => None,
    };
    let (samples, curve) = calibrate_curve(&cfg, params.as_ref())?;
    let file = CurveFile {
        curve,
        config_fingerprint: Some(cfg.fingerprint()),
    };
    write_json(&a.out, &file).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(p) = &a.csv {
        let f = File::create(p).with_context(|| format!("writing {}", p.display()))?;
        formats::write_samples_csv(BufWriter::new(f), &samples)?;
    }

    #[derive(Serialize)]
    struct Report {
        mode: CalibMode,
        samples: usize,
        r_squared: f64,
        curve: PolyCurve,
    }
    print_json(&Report {
        mode: a.mode,
        samples: samples.len(),
        r_squared: curve.r_squared,
        curve,
    })?;
    Ok(())
}

fn reconstruct(cfg: Config, a: ReconstructArgs) -> anyhow::Result<()> {
    let gel = cfg.gel;
    let (frame, truth) = match (&a.input, a.press) {
        (Some(path), _) => {
            let tfr = Tfr1::read(path).with_context(|| format!("reading {}", path.display()))?;
            (tfr.to_frame(0, 0.0)?, None)
        }
        (None, Some(d)) => {
            if !(d >= 0.0 && d.is_finite()) {
                return Err(usage("--press must be a finite depth ≥ 0"));
            }
            let ind = Indenter {
                shape: IndenterShape::CALIBRATION_BALL,
                center: gel.center_mm(),
                press_depth: d,
            };
            let (depth, frame) = sim::press_frame(&gel, &cfg.lighting, &ind)?;
            (frame, Some(depth.max()))
        }
        (None, None) => return Err(usage("one of --input or --press is required")),
    };
    let (h, w) = frame.pixels.shape();
    let params = load_params(&a.checkpoint)?;
    let t0 = Instant::now();
    let normals = Predictor::new(&params).predict(&frame);
    let rec = Reconstructor::new(h, w, gel.pixel_pitch)?;
    let depth = rec.depth_from_normals(&normals)?;
    let peak = max_depth(&depth, cfg.solver.median_filter);
    let wall = t0.elapsed();

    if let Some(p) = &a.out {
        Tfr1::from_depth(&depth).write(p)?;
    }
    if let Some(p) = &a.normals {
        Tfr1::from_normals(&normals).write(p)?;
    }
    if let Some(p) = &a.png {
        formats::write_png(p, &frame)?;
    }

    #[derive(Serialize)]
    struct Report {
        frame_id: u64,
        max_depth_mm: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        true_max_depth_mm: Option<f64>,
        t_wall_ms: f64,
    }
    print_json(&Report {
        frame_id: frame.frame_id,
        max_depth_mm: peak,
        true_max_depth_mm: truth,
        t_wall_ms: wall.as_secs_f64() * 1e3,
    })?;
    Ok(())
}

/// Scenario JSON, with the parser's line and column on failure.
pub fn load_scenario(path: &Path) -> anyhow::Result<Scenario> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let sc: Scenario = serde_json::from_str(&text).map_err(|e| {
        anyhow!(
            "{}: line {}, column {}: {}",
            path.display(),
            e.line(),
            e.column(),
            e
        )
    })?;
    sc.validate().with_context(|| format!("{}", path.display()))?;
    Ok(sc)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulateReport {
    pub sensor: SensorMode,
    pub regions: BTreeMap<String, RegionMetrics>,
    pub steps: usize,
    pub scenario_fingerprint: String,
    pub config_fingerprint: String,
}

fn curve_for(cfg: &Config, path: Option<&Path>, params: Option<&MlpParams>) -> anyhow::Result<PolyCurve> {
    match path {
        Some(p) => load_curve(p),
        None => Ok(calibrate_curve(cfg, params)?.1),
    }
}

fn simulate(cfg: Config, a: SimulateArgs) -> anyhow::Result<()> {
    let mut sc = load_scenario(&a.scenario)?;
    if let Some(sw) = a.feedback {
        let on = sw == Switch::On;
        sc.feedback_enabled = on;
        for p in &mut sc.phases {
            p.feedback = on;
        }
    }
    let mode = a.sensor.unwrap_or(cfg.teleop.sensor);
    let shape = sc.object.unwrap_or(cfg.teleop.object).shape;
    let sensor: Box<dyn ForceSensor> = match mode {
        SensorMode::Ideal => Box::new(IdealSensor(cfg.teleop.material)),
        SensorMode::Oracle => Box::new(OracleSensor {
            gel: cfg.gel,
            shape,
            curve: curve_for(&cfg, a.curve.as_deref(), None)?,
        }),
        SensorMode::Pipeline => {
            let path = a
                .checkpoint
                .as_deref()
                .ok_or_else(|| anyhow!("the pipeline sensor needs --checkpoint"))?;
            let params = load_params(path)?;
            let curve = curve_for(&cfg, a.curve.as_deref(), Some(&params))?;
            let mut est = ForceEstimator::new(&params, &cfg.gel, curve)?;
            est.pipeline = est.pipeline.with_median(cfg.solver.median_filter);
            Box::new(PipelineSensor::new(cfg.gel, cfg.lighting.clone(), shape, est))
        }
    };
    let log = teleop::run_scenario(&sc, &cfg.teleop.models(), sensor)?;

    if let Some(p) = &a.out {
        let mut w = BufWriter::new(File::create(p).with_context(|| format!("writing {}", p.display()))?);
        for r in &log {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    let mut labels: Vec<&str> = sc.phases.iter().map(|p| p.label.as_str()).collect();
    labels.sort_unstable();
    labels.dedup();
    let mut regions = BTreeMap::new();
    for l in labels {
        if let Ok(m) = teleop::region_metrics(&log, l) {
            regions.insert(l.to_owned(), m);
        }
    }
    let report = SimulateReport {
        sensor: mode,
        regions,
        steps: log.len(),
        scenario_fingerprint: fingerprint(&sc),
        config_fingerprint: cfg.fingerprint(),
    };
    if let Some(p) = &a.metrics {
        write_json(p, &report)?;
    }
    print_json(&report)?;
    Ok(())
}

fn live_sensor(cfg: &Config, mode: SensorMode, checkpoint: Option<&Path>, curve: Option<&Path>) -> anyhow::Result<LiveSensor> {
    Ok(match mode {
        SensorMode::Ideal => LiveSensor::Ideal,
        SensorMode::Oracle => LiveSensor::Oracle(curve_for(cfg, curve, None)?),
        SensorMode::Pipeline => {
            let path = checkpoint.ok_or_else(|| anyhow!("the pipeline sensor needs --checkpoint"))?;
            let params = load_params(path)?;
            let c = curve_for(cfg, curve, Some(&params))?;
            LiveSensor::Pipeline(Box::new(params), c)
        }
    })
}

fn serve(cfg: Config, a: ServeArgs) -> anyhow::Result<()> {
    let addr = cfg.bus_addr(a.addr.as_deref());
    let sensor = live_sensor(&cfg, a.sensor.unwrap_or(cfg.teleop.sensor), a.checkpoint.as_deref(), a.curve.as_deref())?;
    let rt = tokio_rt()?;
    rt.block_on(async {
        let handle = live::start(&cfg, &addr, sensor)
            .await
            .with_context(|| format!("starting live mode on {addr}"))?;
        eprintln!("serving on {}", handle.url());
        tokio::signal::ctrl_c().await?;
        eprintln!("shutting down");
        let stats = handle.stop().await?;
        eprintln!("published {} messages", stats.published.values().sum::<u64>());
        anyhow::Ok(())
    })?;
    Ok(())
}

fn bench(mut cfg: Config, a: BenchArgs) -> anyhow::Result<()> {
    cfg.gel.height_px = a.height.unwrap_or(cfg.gel.height_px);
    cfg.gel.width_px = a.width.unwrap_or(cfg.gel.width_px);
    cfg.gel.validate().map_err(|e| usage(e.to_string()))?;
    let params = match &a.checkpoint {
        Some(p) => load_params(p)?,
        None => MlpParams::init(&cfg.mlp.train.hidden, cfg.mlp.train.rng_seed),
    };
    let curve = match &a.curve {
        Some(p) => load_curve(p)?,
        None => hertz_curve(&cfg)?,
    };
    let report = run_bench(
        &cfg.gel,
        &cfg.lighting,
        &params,
        &curve,
        a.frames as usize,
        cfg.solver.median_filter,
        cfg.fingerprint(),
    )?;
    if let Some(p) = &a.out {
        write_json(p, &report)?;
    }
    print_json(&report)?;
    Ok(())
}

/// Cubic fit of the Hertz law over the calibration depth range.
fn hertz_curve(cfg: &Config) -> anyhow::Result<PolyCurve> {
    let c = &cfg.calibration;
    let samples: Vec<CalibSample> = (1..=c.steps.max(4))
        .map(|k| {
            let depth = k as f64 * c.step_depth;
            CalibSample {
                depth,
                force: c.material.force(depth),
            }
        })
        .collect();
    Ok(fit_poly3(&samples)?)
}

fn record_cmd(cfg: Config, a: RecordArgs) -> anyhow::Result<()> {
    let addr = cfg.bus_addr(a.addr.as_deref());
    let topics: Vec<String> = if a.topics.is_empty() {
        crate::bus::Registry::default()
            .topics()
            .map(|(name, _)| name.to_owned())
            .collect()
    } else {
        a.topics
    };
    let out = File::create(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let rt = tokio_rt()?;
    let n = rt.block_on(async {
        let mut client = BusClient::connect(&addr).await.with_context(|| format!("connecting to {addr}"))?;
        let refs: Vec<&str> = topics.iter().map(String::as_str).collect();
        let stop = async {
            match a.duration {
                Some(s) => tokio::time::sleep(std::time::Duration::from_secs_f64(s.max(0.0))).await,
                None => {
                    let _ = tokio::signal::ctrl_c().await;
                }
            }
        };
        let n = record(&mut client, &refs, BufWriter::new(out), stop).await?;
        client.close().await;
        anyhow::Ok(n)
    })?;
    eprintln!("recorded {n} messages");
    Ok(())
}

fn replay_cmd(cfg: Config, a: ReplayArgs) -> anyhow::Result<()> {
    if !(a.speed > 0.0 && a.speed.is_finite()) {
        return Err(usage("--speed must be > 0"));
    }
    let addr = cfg.bus_addr(a.addr.as_deref());
    let records = read_record(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let rt = tokio_rt()?;
    rt.block_on(async {
        let mut client = BusClient::connect(&addr).await.with_context(|| format!("connecting to {addr}"))?;
        replay(&mut client, &records, a.speed).await?;
        client.close().await;
        anyhow::Ok(())
    })?;
    eprintln!("replayed {} messages", records.len());
    Ok(())
}
