use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, ValueEnum};
use pilotstack_core::dataset::{split, summarize, Manifest, Tub};
use pilotstack_core::drive::{
    collect_reference_data, eval_laps, Clock, CnnPilot, CollectConfig, DriveMode, LapReport,
    LoopHandle, PurePursuitPilot, Session, SystemClock, TelemetrySink, VirtualClock, World,
};
use pilotstack_core::nn::{load_weights, save_weights, train as train_model, FrameSamples, ModelWeights};
use pilotstack_telemetry::{
    replay_tub, spawn_service, ServiceConfig, ServiceHandle, ServiceState, TelemetryHub,
    TelemetryPublisher,
};
use serde::Serialize;

use crate::config::AppConfig;
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PilotKind {
    /// Commands from telemetry clients.
    Teleop,
    /// Built-in pure-pursuit pilot (needs ground-truth pose; simulation only).
    Reference,
}

#[derive(Args)]
pub struct DriveArgs {
    #[arg(long, default_value = "manual")]
    pub mode: DriveMode,
    /// Who drives in the manual modes.
    #[arg(long, value_enum, default_value = "teleop")]
    pilot: PilotKind,
    /// Tub to record into (created if absent, appended to otherwise).
    #[arg(long)]
    tub: Option<PathBuf>,
    /// Stop after this many seconds; runs until Ctrl-C otherwise.
    #[arg(long)]
    duration: Option<f64>,
    /// Network weights for autopilot mode.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Cruise speed of the reference pilot, m/s.
    #[arg(long, default_value_t = 0.8)]
    speed: f64,
    /// Autopilot speed cap, m/s.
    #[arg(long)]
    speed_cap: Option<f64>,
    /// Simulated time instead of real time (needs --duration; no telemetry service).
    #[arg(long)]
    fast: bool,
    /// Do not start the telemetry service.
    #[arg(long)]
    no_serve: bool,
    /// Where to write the session summary (default: <tub>/session.json).
    #[arg(long)]
    session: Option<PathBuf>,
}

fn utc_now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

fn open_or_create_tub(path: &Path, cfg: &AppConfig) -> Result<Tub, CliError> {
    let has_catalog = path.is_dir()
        && std::fs::read_dir(path)
            .map_err(CliError::runtime)?
            .next()
            .is_some();
    let tub = if has_catalog {
        Tub::open_append(path)?
    } else {
        Tub::create(
            path,
            Manifest::new(cfg.camera.image_width_px, cfg.camera.image_height_px, utc_now()),
        )?
    };
    let m = tub.manifest();
    if (m.image_width, m.image_height) != (cfg.camera.image_width_px, cfg.camera.image_height_px) {
        return Err(CliError::config(format!(
            "tub {} holds {}x{} frames but the camera renders {}x{}",
            path.display(),
            m.image_width,
            m.image_height,
            cfg.camera.image_width_px,
            cfg.camera.image_height_px
        )));
    }
    Ok(tub)
}

fn load_cnn(cfg: &AppConfig, path: &Path) -> Result<CnnPilot<f32>, CliError> {
    let spec = cfg.model_spec()?;
    if !path.exists() {
        return Err(CliError::config(format!("weights file not found: {}", path.display())));
    }
    let weights: ModelWeights<f32> = load_weights(path, &spec).map_err(|e| match e {
        pilotstack_core::Error::FingerprintMismatch => CliError::config(format!(
            "{}: weights were trained for a different model architecture",
            path.display()
        )),
        other => CliError::config(format!("{}: {other}", path.display())),
    })?;
    Ok(CnnPilot::new(spec, weights)?)
}

fn start_service(cfg: &AppConfig, hub: TelemetryHub, handle: Option<Arc<LoopHandle>>) -> Result<ServiceHandle, CliError> {
    let bind = cfg.bind_address();
    let state = ServiceState {
        hub,
        handle,
        config: Arc::new(ServiceConfig {
            token: std::env::var(pilotstack_telemetry::TOKEN_ENV).ok().filter(|t| !t.is_empty()),
            ui_dir: cfg.telemetry.ui_dir.clone(),
            ..ServiceConfig::default()
        }),
    };
    let service = spawn_service(&bind, state)
        .map_err(|e| CliError::config(format!("cannot bind telemetry service to {bind}: {e}")))?;
    eprintln!("telemetry: http://{}/", service.local_addr());
    Ok(service)
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

pub fn drive(mut cfg: AppConfig, args: DriveArgs) -> Result<(), CliError> {
    if let Some(tub) = &args.tub {
        cfg.tub = Some(tub.clone());
    }
    if let Some(cap) = args.speed_cap {
        cfg.set_speed_cap(cap)?;
    }
    cfg.validate()?;
    if args.fast && args.duration.is_none() {
        return Err(CliError::config("--fast needs --duration"));
    }
    if let Some(d) = args.duration {
        if !(d > 0.0 && d.is_finite()) {
            return Err(CliError::config(format!("duration {d} must be positive")));
        }
    }
    if args.mode == DriveMode::ManualRecord && cfg.tub.is_none() {
        return Err(CliError::config("manual_record mode needs --tub"));
    }
    let autopilot: Option<Box<dyn pilotstack_core::drive::Pilot>> = match (&args.weights, args.pilot) {
        (Some(w), _) => Some(Box::new(load_cnn(&cfg, w)?)),
        (None, PilotKind::Reference) => Some(Box::new(PurePursuitPilot::for_speed(args.speed, &cfg.vehicle))),
        (None, PilotKind::Teleop) => None,
    };
    if args.mode == DriveMode::Autopilot && autopilot.is_none() {
        return Err(CliError::config("autopilot mode needs --weights (or --pilot reference)"));
    }
    cfg.echo();

    let world = World::new(cfg.track()?, cfg.vehicle, cfg.camera)?;
    let clock: Arc<dyn Clock> = if args.fast {
        Arc::new(VirtualClock::new())
    } else {
        Arc::new(SystemClock::new())
    };
    let handle = LoopHandle::new(clock, args.mode);
    let mut session = Session::new(world, cfg.loop_cfg.clone(), handle.clone())?;
    if args.pilot == PilotKind::Reference {
        session = session.with_manual(PurePursuitPilot::for_speed(args.speed, &cfg.vehicle));
    }
    if let Some(p) = autopilot {
        session = session.with_autopilot(BoxedPilot(p));
    }
    if let Some(path) = &cfg.tub {
        session = session.with_tub(open_or_create_tub(path, &cfg)?);
    }
    let service = if args.fast || args.no_serve {
        None
    } else {
        let hub = TelemetryHub::default();
        let publisher: Arc<dyn TelemetrySink> = Arc::new(TelemetryPublisher::new(
            hub.clone(),
            cfg.telemetry.stream_rate_hz,
            cfg.telemetry.jpeg_quality,
        ));
        session = session.with_sink(publisher);
        Some(start_service(&cfg, hub, Some(handle.clone()))?)
    };
    {
        let handle = handle.clone();
        if let Err(e) = ctrlc::set_handler(move || handle.request_shutdown()) {
            eprintln!("warning: cannot install Ctrl-C handler: {e}");
        }
    }

    let summary = session.run_loop(args.duration.map(Duration::from_secs_f64));
    if let Some(s) = service {
        s.shutdown();
    }
    let session_path = args
        .session
        .or_else(|| session.tub().map(|t| t.root().join("session.json")));
    if let Some(path) = session_path {
        summary.write_json(&path)?;
        eprintln!("session summary written to {}", path.display());
    }
    print_json(&summary);
    Ok(())
}

/// Lets a boxed pilot be handed to APIs that take `impl Pilot`.
struct BoxedPilot(Box<dyn pilotstack_core::drive::Pilot>);

impl pilotstack_core::drive::Pilot for BoxedPilot {
    fn name(&self) -> &str {
        self.0.name()
    }

    fn decide(
        &mut self,
        obs: &pilotstack_core::drive::Observation<'_>,
    ) -> pilotstack_core::Result<pilotstack_core::drive::PilotOutput> {
        self.0.decide(obs)
    }
}

#[derive(Args)]
pub struct CollectArgs {
    /// New tub to write.
    #[arg(long)]
    tub: PathBuf,
    #[arg(long, default_value_t = 2000)]
    frames: usize,
    #[arg(long, default_value_t = 200)]
    episode_frames: usize,
    /// Reference pilot cruise speed, m/s.
    #[arg(long, default_value_t = 0.8)]
    speed: f64,
    /// Standard deviation of the steering perturbation (normalized units).
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
}

pub fn collect(cfg: AppConfig, args: CollectArgs) -> Result<(), CliError> {
    cfg.validate()?;
    if args.frames == 0 || args.episode_frames == 0 {
        return Err(CliError::config("--frames and --episode-frames must be positive"));
    }
    cfg.echo();
    let world = World::new(cfg.track()?, cfg.vehicle, cfg.camera)?;
    let mut manifest = Manifest::new(cfg.camera.image_width_px, cfg.camera.image_height_px, utc_now());
    manifest.notes = format!("reference pilot, seed {}", cfg.seed);
    let tub = Tub::create(&args.tub, manifest)?;
    let collect_cfg = CollectConfig {
        frames: args.frames,
        episode_frames: args.episode_frames,
        speed_mps: args.speed,
        noise_sigma: args.noise,
        seed: cfg.seed,
        ..CollectConfig::default()
    };
    let tub = collect_reference_data(&world, &cfg.loop_cfg, &collect_cfg, tub)?;
    println!("wrote {} records to {}", tub.len(), tub.root().display());
    Ok(())
}

#[derive(Args)]
pub struct TrainArgs {
    /// Tub(s) to train on.
    #[arg(long = "tub", num_args = 1..)]
    tubs: Vec<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long, default_value_t = 0.2)]
    val_fraction: f64,
    /// Mirror random frames (and negate steering) during training.
    #[arg(long)]
    flip: bool,
    /// Output weight file.
    #[arg(long)]
    out: PathBuf,
    /// History CSV (default: next to the weights, `.csv` extension).
    #[arg(long)]
    history: Option<PathBuf>,
}

pub fn train(mut cfg: AppConfig, args: TrainArgs) -> Result<(), CliError> {
    if let Some(e) = args.epochs {
        cfg.trainer.epochs = e;
    }
    if let Some(b) = args.batch_size {
        cfg.trainer.batch_size = b;
    }
    if let Some(lr) = args.learning_rate {
        cfg.trainer.learning_rate = lr;
    }
    if args.flip {
        cfg.trainer.augment_flip = true;
    }
    cfg.trainer.seed = cfg.seed;
    let mut tubs = args.tubs.clone();
    if tubs.is_empty() {
        tubs.extend(cfg.tub.clone());
    }
    if tubs.is_empty() {
        return Err(CliError::config("train needs --tub"));
    }
    cfg.validate()?;
    cfg.echo();
    let spec = cfg.model_spec()?;
    let mut samples = FrameSamples::new(spec.input.height, spec.input.width);
    for path in &tubs {
        let tub = Tub::open(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        if tub.is_empty() {
            return Err(CliError::config(format!("tub {} is empty", path.display())));
        }
        samples.add_tub(&tub)?;
    }
    let sp = split(pilotstack_core::nn::SampleSet::len(&samples), args.val_fraction, cfg.seed)
        .map_err(CliError::config)?;
    eprintln!("training on {} frames, validating on {}", sp.train.len(), sp.val.len());
    let (weights, history) = train_model(&spec, &samples, &sp, &cfg.trainer, |e| {
        eprintln!(
            "epoch {:>3}  train_mse {:.5}  val_mse {:.5}  val_steering_mse {:.5}  {:.1}s",
            e.epoch, e.train_mse, e.val_mse, e.val_steering_mse, e.seconds
        )
    })
    .map_err(|e| match e {
        pilotstack_core::Error::Diverged { epoch } => {
            CliError::runtime(format!("training diverged (non-finite loss) at epoch {epoch}"))
        }
        other => other.into(),
    })?;
    save_weights(&weights, &args.out)?;
    let history_path = args
        .history
        .unwrap_or_else(|| args.out.with_extension("csv"));
    history.write_csv(&history_path)?;
    let last = history.last().expect("at least one epoch");
    println!(
        "final train_mse {:.6} val_mse {:.6} val_steering_mse {:.6}",
        last.train_mse, last.val_mse, last.val_steering_mse
    );
    println!("weights: {}  history: {}", args.out.display(), history_path.display());
    Ok(())
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long, conflicts_with = "reference", required_unless_present = "reference")]
    weights: Option<PathBuf>,
    /// Evaluate the built-in pure-pursuit pilot instead of a network.
    #[arg(long)]
    reference: bool,
    #[arg(long, default_value_t = 1)]
    laps: usize,
    /// Autopilot speed cap, m/s.
    #[arg(long, default_value_t = 0.65)]
    speed_cap: f64,
    /// Give up on a lap after this many simulated seconds.
    #[arg(long, default_value_t = 60.0)]
    timeout: f64,
    /// Also write the report as JSON (`-` for stdout).
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Serialize)]
struct LapEvaluation {
    pilot: String,
    speed_cap_mps: f64,
    track_perimeter_m: f64,
    all_completed: bool,
    laps: Vec<LapReport>,
}

pub fn eval_lap(mut cfg: AppConfig, args: EvalArgs) -> Result<(), CliError> {
    cfg.set_speed_cap(args.speed_cap)?;
    cfg.validate()?;
    if args.laps == 0 {
        return Err(CliError::config("--laps must be at least 1"));
    }
    cfg.echo();
    let world = World::new(cfg.track()?, cfg.vehicle, cfg.camera)?;
    let perimeter = world.track.perimeter();
    let handle = LoopHandle::new(Arc::new(VirtualClock::new()), DriveMode::Autopilot);
    let session = Session::new(world, cfg.loop_cfg.clone(), handle)?;
    let (mut session, pilot) = match &args.weights {
        Some(w) => (session.with_autopilot(load_cnn(&cfg, w)?), format!("cnn:{}", w.display())),
        None => (session.with_autopilot(PurePursuitPilot::new(0.45, 1.0)), "reference".to_string()),
    };
    let laps = eval_laps(&mut session, args.laps, args.timeout)?;
    // with `--json -` stdout carries only the JSON document
    let json_to_stdout = args.json.as_deref().is_some_and(|p| p.as_os_str() == "-");
    let mut table = String::new();
    table.push_str(&format!("{:>4}  {:>9}  {:>10}  {:>10}  {:>12}\n", "lap", "completed", "time_s", "speed_mps", "max_offset_m"));
    for l in &laps {
        table.push_str(&format!(
            "{:>4}  {:>9}  {:>10.2}  {:>10.3}  {:>12.3}{}\n",
            l.lap,
            l.completed,
            l.lap_time_s,
            l.mean_speed_mps,
            l.max_abs_offset_m,
            l.failure.as_deref().map(|f| format!("  ({f})")).unwrap_or_default()
        ));
    }
    if json_to_stdout {
        eprint!("{table}");
    } else {
        print!("{table}");
    }
    let all_completed = laps.len() == args.laps && laps.iter().all(|l| l.completed);
    let report = LapEvaluation {
        pilot,
        speed_cap_mps: args.speed_cap,
        track_perimeter_m: perimeter,
        all_completed,
        laps,
    };
    if let Some(path) = &args.json {
        let json = serde_json::to_string_pretty(&report).expect("serializable");
        if path.as_os_str() == "-" {
            println!("{json}");
        } else {
            std::fs::write(path, json + "\n").map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
        }
    }
    if all_completed {
        Ok(())
    } else {
        Err(CliError::runtime("not every lap was completed"))
    }
}

#[derive(Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    tub: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    bins: usize,
    /// Histogram CSV output.
    #[arg(long)]
    csv: Option<PathBuf>,
}

pub fn analyze(cfg: AppConfig, args: AnalyzeArgs) -> Result<(), CliError> {
    let path = args
        .tub
        .or(cfg.tub)
        .ok_or_else(|| CliError::config("analyze needs --tub"))?;
    if args.bins == 0 {
        return Err(CliError::config("--bins must be positive"));
    }
    let tub = Tub::open(&path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    if tub.is_empty() {
        return Err(CliError::config(format!("tub {} is empty", path.display())));
    }
    let stats = summarize(&tub, args.bins)?;
    println!("tub        {}", path.display());
    println!("count      {}", stats.count);
    println!("manual     {}", stats.manual_records);
    println!("autopilot  {}", stats.autopilot_records);
    println!("duration   {:.2} s", stats.duration_s);
    for (name, c) in [("steering", &stats.steering), ("throttle", &stats.throttle)] {
        println!(
            "{name:<10} mean {:+.4}  std {:.4}  min {:+.4}  max {:+.4}",
            c.mean, c.stddev, c.min, c.max
        );
    }
    println!(
        "pixels     mean {:.1} {:.1} {:.1}  std {:.1} {:.1} {:.1}",
        stats.pixel_mean[0],
        stats.pixel_mean[1],
        stats.pixel_mean[2],
        stats.pixel_stddev[0],
        stats.pixel_stddev[1],
        stats.pixel_stddev[2]
    );
    println!("steering histogram {:?}", stats.steering_histogram.counts);
    if let Some(csv) = args.csv {
        std::fs::write(&csv, stats.histogram_csv()).map_err(|e| CliError::runtime(format!("{}: {e}", csv.display())))?;
        println!("histograms written to {}", csv.display());
    }
    Ok(())
}

#[derive(Args)]
pub struct ReplayArgs {
    #[arg(long)]
    tub: Option<PathBuf>,
    /// Playback speed factor.
    #[arg(long, default_value_t = 1.0)]
    speed: f64,
    /// Wait for a client to connect before starting.
    #[arg(long)]
    wait_client: bool,
}

pub fn replay(cfg: AppConfig, args: ReplayArgs) -> Result<(), CliError> {
    let path = args
        .tub
        .or(cfg.tub.clone())
        .ok_or_else(|| CliError::config("replay needs --tub"))?;
    if !(args.speed > 0.0 && args.speed.is_finite()) {
        return Err(CliError::config(format!("replay speed {} must be positive", args.speed)));
    }
    let tub = Tub::open(&path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    if tub.is_empty() {
        return Err(CliError::config(format!("tub {} is empty", path.display())));
    }
    let hub = TelemetryHub::new(256);
    let service = start_service(&cfg, hub.clone(), None)?;
    let stop = Arc::new(AtomicBool::new(false));
    {
        let stop = stop.clone();
        if let Err(e) = ctrlc::set_handler(move || stop.store(true, std::sync::atomic::Ordering::SeqCst)) {
            eprintln!("warning: cannot install Ctrl-C handler: {e}");
        }
    }
    if args.wait_client {
        eprintln!("waiting for a client");
        while hub.receivers() == 0 && !stop.load(std::sync::atomic::Ordering::SeqCst) {
            std::thread::sleep(Duration::from_millis(50));
        }
    }
    let summary = replay_tub(&tub, &hub, &cfg.loop_cfg, args.speed, cfg.telemetry.stream_rate_hz, &stop)?;
    service.shutdown();
    println!(
        "replayed {} records ({} frames) in {:.2} s",
        summary.messages, summary.frames, summary.wall_time_s
    );
    Ok(())
}

#[derive(Args)]
pub struct MakeTrackArgs {
    /// Output JSON path.
    #[arg(long)]
    out: PathBuf,
}

pub fn make_track(cfg: AppConfig, args: MakeTrackArgs) -> Result<(), CliError> {
    let track = cfg.track()?;
    track.validate_for_vehicle(cfg.vehicle.width_m).map_err(CliError::config)?;
    track.save(&args.out)?;
    println!(
        "track: {} waypoints, perimeter {:.3} m, lane {:.2} m -> {}",
        track.centerline.len(),
        track.perimeter(),
        track.lane_width_m,
        args.out.display()
    );
    Ok(())
}
