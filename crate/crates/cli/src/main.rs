//! `hzl`: dehaze videos in-process, across processes, or sequentially.
//!
//! Exit status: 0 on success, 1 on a usage error, 2 on a runtime error.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use hzl_core::airlight_sync::{AirlightLog, DEFAULT_LAMBDA, DEFAULT_UPDATE_INTERVAL};
use hzl_core::bench::{bench, BenchCase, BenchPlan};
use hzl_core::estimators::{AirlightMode, CapParams, DcpParams, EstimatorKind};
use hzl_core::frame_io::{create_writer, read_all, read_frames, FrameIoError, FrameLocation};
use hzl_core::haze_model::DEFAULT_T_FLOOR;
use hzl_core::reference::{flicker_metric, sequential_reference, ReferenceFrame};
use hzl_core::synth::{synth_video, write_synth, SceneSpec};
use hzl_core::transport::{
    push_source, run_distributed, EndpointOptions, Role, SourceStream, StageServer, TopologyAssignment,
};
use hzl_core::{run_pipeline, AirlightParams, DehazeConfig, MonitorEvent, PipelineMetrics, Rgb8Image, StageConfig};

#[derive(Parser)]
#[command(name = "hzl", version, about = "Component-based parallel video dehazing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dehaze a video.
    Dehaze(DehazeArgs),
    /// Measure throughput over a grid of worker configurations.
    Bench(BenchArgs),
    /// Generate a synthetic hazy video with ground-truth sidecars.
    Synth(SynthArgs),
    /// Print the flicker metric of an airlight CSV log.
    Flicker(FlickerArgs),
    /// Run one process of a distributed topology.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    /// Staged multi-threaded pipeline in this process.
    InProcess,
    /// Remote stage endpoints listed in --assignment.
    Distributed,
    /// Single-threaded reference.
    Sequential,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum AlgoArg {
    Dcp,
    Cap,
}

impl From<AlgoArg> for EstimatorKind {
    fn from(a: AlgoArg) -> Self {
        match a {
            AlgoArg::Dcp => EstimatorKind::Dcp,
            AlgoArg::Cap => EstimatorKind::Cap,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum AirlightModeArg {
    Argmin,
    Robust,
}

fn parse_workers(s: &str) -> Result<(usize, usize, usize), String> {
    let parts: Vec<_> = s.split(',').map(|p| p.trim().parse::<usize>()).collect();
    match parts.as_slice() {
        [Ok(t), Ok(a), Ok(g)] if *t > 0 && *a > 0 && *g > 0 => Ok((*t, *a, *g)),
        [Ok(n)] if *n > 0 => Ok((*n, *n, *n)),
        _ => Err(format!("expected N or T,A,G with positive counts, got `{s}`")),
    }
}

/// Monitor wait; `None` waits forever.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Timeout(Option<Duration>);

fn parse_timeout(s: &str) -> Result<Timeout, String> {
    match s {
        "inf" | "none" => Ok(Timeout(None)),
        _ => s
            .parse::<u64>()
            .map(|ms| Timeout(Some(Duration::from_millis(ms))))
            .map_err(|_| format!("expected milliseconds or `inf`, got `{s}`")),
    }
}

fn parse_location(s: &str) -> Result<FrameLocation, String> {
    s.parse().map_err(|e: FrameIoError| e.to_string())
}

fn parse_rgb(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<_> = s.split(',').map(|p| p.trim().parse::<f64>()).collect();
    match parts.as_slice() {
        [Ok(r), Ok(g), Ok(b)] if [r, g, b].iter().all(|c| (0.0..=1.0).contains(*c)) => Ok([*r, *g, *b]),
        _ => Err(format!("expected R,G,B in [0, 1], got `{s}`")),
    }
}

/// Component parameters shared by every mode.
#[derive(Args, Clone)]
struct AlgoOpts {
    /// Transmission estimator.
    #[arg(long, value_enum, default_value = "dcp")]
    algo: AlgoArg,
    /// DCP patch radius (window side 2r+1).
    #[arg(long, default_value_t = DcpParams::default().patch_radius)]
    patch_radius: usize,
    /// CAP depth offset w0.
    #[arg(long, default_value_t = CapParams::default().w0, allow_negative_numbers = true)]
    cap_w0: f64,
    /// CAP value coefficient w1.
    #[arg(long, default_value_t = CapParams::default().w1, allow_negative_numbers = true)]
    cap_w1: f64,
    /// CAP saturation coefficient w2.
    #[arg(long, default_value_t = CapParams::default().w2, allow_negative_numbers = true)]
    cap_w2: f64,
    /// CAP scattering coefficient beta.
    #[arg(long, default_value_t = CapParams::default().beta)]
    cap_beta: f64,
    /// Lower bound on transmission during recovery.
    #[arg(long, default_value_t = DEFAULT_T_FLOOR)]
    t_floor: f64,
    /// Airlight update interval l, in frames.
    #[arg(long, default_value_t = DEFAULT_UPDATE_INTERVAL)]
    update_interval: u64,
    /// Airlight smoothing weight lambda.
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
    /// Airlight pixel selection.
    #[arg(long, value_enum, default_value = "argmin")]
    airlight_mode: AirlightModeArg,
}

impl AlgoOpts {
    fn config(&self) -> Result<DehazeConfig> {
        let cfg = DehazeConfig {
            algo: self.algo.into(),
            dcp: DcpParams { patch_radius: self.patch_radius },
            cap: CapParams { w0: self.cap_w0, w1: self.cap_w1, w2: self.cap_w2, beta: self.cap_beta },
            t_floor: self.t_floor,
            airlight: AirlightParams::new(self.update_interval, self.lambda)?,
            airlight_mode: match self.airlight_mode {
                AirlightModeArg::Argmin => AirlightMode::Argmin,
                AirlightModeArg::Robust => AirlightMode::Robust,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Worker pools, queues and monitor policy.
#[derive(Args, Clone)]
struct StageOpts {
    /// Workers per stage: N, or transmission,airlight,generator.
    #[arg(long, value_parser = parse_workers, default_value = "1,1,1")]
    workers: (usize, usize, usize),
    /// Queue capacity per stage [default: 2x the widest stage].
    #[arg(long)]
    queue_capacity: Option<usize>,
    /// Monitor wait for a missing frame, in ms, or `inf`.
    #[arg(long, value_parser = parse_timeout, default_value = "20")]
    timeout_ms: Timeout,
    /// Resolve airlight strictly in frame order (reproducible output).
    #[arg(long)]
    deterministic: bool,
}

impl StageOpts {
    fn config(&self) -> Result<StageConfig> {
        let (t, a, g) = self.workers;
        let mut cfg = StageConfig::new(t, a, g).timeout(self.timeout_ms.0).deterministic(self.deterministic);
        if let Some(q) = self.queue_capacity {
            cfg.queue_capacity = q;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Where run products go.
#[derive(Args, Clone)]
struct ReportOpts {
    /// Write the per-frame airlight as CSV.
    #[arg(long)]
    airlight_log: Option<PathBuf>,
    /// Write run metrics as JSON.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct DehazeArgs {
    /// Input: seq:<dir>, frv:<file> or frv:- for stdin.
    #[arg(long = "in", value_parser = parse_location)]
    input: FrameLocation,
    /// Output: seq:<dir>, frv:<file> or frv:- for stdout.
    #[arg(long = "out", value_parser = parse_location)]
    output: FrameLocation,
    /// Execution mode.
    #[arg(long, value_enum, default_value = "in-process")]
    mode: Mode,
    /// Topology JSON, required for --mode distributed.
    #[arg(long)]
    assignment: Option<PathBuf>,
    #[command(flatten)]
    algo: AlgoOpts,
    #[command(flatten)]
    stage: StageOpts,
    #[command(flatten)]
    report: ReportOpts,
}

#[derive(Args)]
struct BenchArgs {
    /// Estimators to compare.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "dcp")]
    algos: Vec<AlgoArg>,
    /// Worker configurations; repeat or separate with `;`.
    #[arg(long = "workers", value_parser = parse_workers, value_delimiter = ';', default_value = "1,1,1;2,2,2;3,3,3")]
    grid: Vec<(usize, usize, usize)>,
    /// Benchmark this video instead of a synthetic one.
    #[arg(long = "in", value_parser = parse_location)]
    input: Option<FrameLocation>,
    /// Synthetic frame width.
    #[arg(long, default_value_t = 640)]
    width: u32,
    /// Synthetic frame height.
    #[arg(long, default_value_t = 480)]
    height: u32,
    /// Synthetic frame count.
    #[arg(long, default_value_t = 200)]
    frames: u32,
    /// Untimed runs per configuration.
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    /// Timed runs per configuration, averaged.
    #[arg(long, default_value_t = 3)]
    measured: usize,
    /// Write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    #[command(flatten)]
    algo: AlgoOpts,
}

#[derive(Args)]
struct SynthArgs {
    /// Output: seq:<dir>, frv:<file> or frv:-.
    #[arg(long = "out", value_parser = parse_location)]
    output: FrameLocation,
    /// Frame width in pixels.
    #[arg(long, default_value_t = SceneSpec::default().width)]
    width: u32,
    /// Frame height in pixels.
    #[arg(long, default_value_t = SceneSpec::default().height)]
    height: u32,
    /// Number of frames.
    #[arg(long, default_value_t = SceneSpec::default().frames)]
    frames: u32,
    /// Half-width of the uniform per-frame airlight jitter.
    #[arg(long, default_value_t = SceneSpec::default().noise)]
    noise: f64,
    /// Seed for the airlight jitter.
    #[arg(long, default_value_t = SceneSpec::default().seed)]
    seed: u64,
    /// Scattering coefficient applied to the depth map.
    #[arg(long, default_value_t = SceneSpec::default().beta)]
    beta: f64,
    /// Base airlight R,G,B.
    #[arg(long, value_parser = parse_rgb, default_value = "0.85,0.86,0.9")]
    airlight: [f64; 3],
    /// Horizontal texture pan in pixels per frame.
    #[arg(long, default_value_t = SceneSpec::default().motion)]
    motion: f64,
}

#[derive(Args)]
struct FlickerArgs {
    /// Airlight CSV log (frame_id,a_r,a_g,a_b).
    #[arg(long)]
    log: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    /// source, monitor or stage:<transmission|airlight|generator> [default: role in the assignment].
    #[arg(long, value_parser = |s: &str| s.parse::<Role>())]
    role: Option<Role>,
    /// Topology JSON.
    #[arg(long)]
    assignment: PathBuf,
    /// Worker threads per connection (stage roles).
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Drop the connection after this many frames (stage roles, fault testing).
    #[arg(long)]
    fail_after: Option<u64>,
    /// Frames to send (source role).
    #[arg(long = "in", value_parser = parse_location)]
    input: Option<FrameLocation>,
    /// Where to write dehazed frames (monitor role).
    #[arg(long = "out", value_parser = parse_location)]
    output: Option<FrameLocation>,
    #[command(flatten)]
    stage: StageOpts,
    #[command(flatten)]
    report: ReportOpts,
}

/// Writes ordered monitor events to a frame writer, collecting the airlight log.
struct Sink {
    writer: Box<dyn hzl_core::frame_io::FrameWriter + Send>,
    log: AirlightLog,
}

impl Sink {
    fn open(location: &FrameLocation) -> Result<Self> {
        Ok(Self { writer: create_writer(location)?, log: AirlightLog::new() })
    }

    fn accept(&mut self, event: MonitorEvent) -> Result<(), FrameIoError> {
        match event {
            MonitorEvent::Frame(f) => {
                if let Some(a) = &f.airlight {
                    self.log.append(f.id, a);
                }
                let out = f.output().ok_or(FrameIoError::Missing { frame: f.id })?;
                self.writer.write_frame(f.id, &out)
            }
            MonitorEvent::Skip(id) => self.writer.skip(id),
            MonitorEvent::EndOfStream => Ok(()),
        }
    }

    fn finish(self, report: &ReportOpts, metrics: &PipelineMetrics) -> Result<()> {
        self.writer.finish()?;
        write_reports(report, &self.log, Some(metrics))
    }
}

fn write_reports(report: &ReportOpts, log: &AirlightLog, metrics: Option<&PipelineMetrics>) -> Result<()> {
    if let Some(path) = &report.airlight_log {
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        log.write_csv(BufWriter::new(file))?;
    }
    if let (Some(path), Some(m)) = (&report.metrics, metrics) {
        write_json(path, &m.to_json())?;
    }
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut file = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut file, value)?;
    writeln!(file)?;
    file.flush()?;
    Ok(())
}

fn frame_source(location: &FrameLocation) -> Result<impl Iterator<Item = Result<Rgb8Image, FrameIoError>> + Send> {
    Ok(read_frames(location)?.map(|r| r.map(|(_, img)| img)))
}

fn summarize(m: &PipelineMetrics) {
    info!(
        "frames in {} out {} dropped {} late {} ({:.2} fps)",
        m.frames_in, m.frames_out, m.frames_dropped, m.frames_late_discarded, m.throughput_fps
    );
}

fn cmd_dehaze(args: DehazeArgs) -> Result<()> {
    let dehaze = args.algo.config()?;
    let stage = args.stage.config()?;
    match args.mode {
        Mode::Sequential => {
            let frames = read_all(&args.input)?;
            let out = sequential_reference(&frames, &dehaze)?;
            let mut writer = create_writer(&args.output)?;
            for (id, frame) in out.frames.iter().enumerate() {
                match frame {
                    ReferenceFrame::Frame(img) => writer.write_frame(id as u64, img)?,
                    ReferenceFrame::Skip => writer.skip(id as u64)?,
                }
            }
            writer.finish()?;
            write_reports(&args.report, &out.airlight_log, None)?;
            if let Some(path) = &args.report.metrics {
                let emitted = out.frames.iter().filter(|f| f.image().is_some()).count();
                let json = serde_json::json!({
                    "frames_in": frames.len(),
                    "frames_out": emitted,
                    "frames_dropped": frames.len() - emitted,
                    "frames_late_discarded": 0,
                    "airlight_estimations": out.airlight_estimations,
                });
                write_json(path, &json)?;
            }
        }
        Mode::InProcess => {
            let source = frame_source(&args.input)?;
            let mut sink = Sink::open(&args.output)?;
            let metrics = run_pipeline(source, &stage, &dehaze, |ev| sink.accept(ev))?;
            summarize(&metrics);
            sink.finish(&args.report, &metrics)?;
        }
        Mode::Distributed => {
            let path = args.assignment.as_ref().ok_or_else(|| anyhow!("--mode distributed requires --assignment"))?;
            let mut topo = TopologyAssignment::load(path)?;
            topo.dehaze = dehaze;
            let source = frame_source(&args.input)?;
            let mut sink = Sink::open(&args.output)?;
            let metrics = run_distributed(&topo, &stage, &dehaze, source, |ev| sink.accept(ev))?;
            summarize(&metrics);
            sink.finish(&args.report, &metrics)?;
        }
    }
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let base = args.algo.config()?;
    let frames = match &args.input {
        Some(loc) => read_all(loc)?,
        None => synth_video(&SceneSpec::sized(args.width, args.height, args.frames)).frames,
    };
    let cases: Vec<_> = args
        .algos
        .iter()
        .flat_map(|&algo| args.grid.iter().map(move |&w| BenchCase::new(algo.into(), w)))
        .collect();
    let report = bench(&frames, &cases, BenchPlan { warmup: args.warmup, measured: args.measured }, &base)?;
    print!("{}", report.table());
    if let Some(path) = &args.json {
        write_json(path, &report.to_json())?;
    }
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    if args.width == 0 || args.height == 0 {
        bail!("width and height must be positive");
    }
    let scene = SceneSpec {
        width: args.width,
        height: args.height,
        frames: args.frames,
        noise: args.noise,
        seed: args.seed,
        beta: args.beta,
        airlight: args.airlight,
        motion: args.motion,
    };
    write_synth(&synth_video(&scene), &scene, &args.output)?;
    Ok(())
}

fn cmd_flicker(args: FlickerArgs) -> Result<()> {
    let file = File::open(&args.log).with_context(|| format!("opening {}", args.log.display()))?;
    let log = AirlightLog::read_csv(io::BufReader::new(file))?;
    println!("{:.6}", flicker_metric(&log)?);
    Ok(())
}

fn cmd_serve(args: ServeArgs) -> Result<()> {
    let topo = TopologyAssignment::load(&args.assignment)?;
    let role = args.role.or(topo.role).ok_or_else(|| anyhow!("no --role given and none in the assignment"))?;
    match role {
        Role::Stage(stage) => {
            let addr = topo.listen_address(role).ok_or_else(|| anyhow!("no address for {role}"))?;
            let options = EndpointOptions { workers: args.threads, fail_after: args.fail_after };
            let server = StageServer::bind(&addr, stage, topo.dehaze, options)?;
            info!("{role} listening on {}", server.local_addr());
            println!("listening {}", server.local_addr());
            io::stdout().flush()?;
            server.serve();
        }
        Role::Source => {
            let input = args.input.as_ref().ok_or_else(|| anyhow!("the source role needs --in"))?;
            let sent = push_source(&topo.monitor, frame_source(input)?)?;
            info!("sent {sent} frames to {}", topo.monitor);
        }
        Role::Monitor => {
            let output = args.output.as_ref().ok_or_else(|| anyhow!("the monitor role needs --out"))?;
            let addr = topo.listen_address(role).ok_or_else(|| anyhow!("no monitor address"))?;
            let listener = TcpListener::bind(&addr).with_context(|| format!("binding {addr}"))?;
            println!("listening {}", listener.local_addr()?);
            io::stdout().flush()?;
            let source = SourceStream::accept(&listener)?;
            let stage = args.stage.config()?;
            let mut sink = Sink::open(output)?;
            let metrics = run_distributed(&topo, &stage, &topo.dehaze, source, |ev| sink.accept(ev))?;
            summarize(&metrics);
            sink.finish(&args.report, &metrics)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Dehaze(a) => cmd_dehaze(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Flicker(a) => cmd_flicker(a),
        Command::Serve(a) => cmd_serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
