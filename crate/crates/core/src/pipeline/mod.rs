//! Five-layer staged dehazing pipeline.
//!
//! ```text
//! source -> [transmission xN] -> [airlight xN] -> [generator xN] -> monitor -> sink
//! ```
//!
//! Stages are worker pools draining bounded queues; a full queue blocks the
//! producer. Dropped frames travel on as tombstones so downstream stages and
//! the monitor never wait on them. A window of admission tokens caps the
//! number of frames in flight.
//!
//! In deterministic mode airlight decisions are made in frame-id order by a
//! sequencer, and DCP transmission workers wait for the exact airlight a
//! sequential run would use, so output is identical for any worker count.

mod frame;
mod metrics;
mod monitor;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, Receiver, Sender};
use thiserror::Error;

pub use frame::{Frame, Packet};
pub use metrics::{LatencySummary, PipelineMetrics};
pub(crate) use metrics::Recorder;
pub use monitor::{Monitor, MonitorCounts, MonitorEvent};

use crate::airlight_sync::{AirlightCell, AirlightState};
use crate::dehaze::DehazeConfig;
use crate::error::HazeError;
use crate::frame_io::FrameIoError;
use crate::haze_model::{dequantize, AtmosphericLight, FrameId, Rgb8Image};

pub const DEFAULT_MONITOR_TIMEOUT: Duration = Duration::from_millis(20);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Transmission,
    Airlight,
    Generator,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Transmission, Stage::Airlight, Stage::Generator];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Transmission => "transmission",
            Stage::Airlight => "airlight",
            Stage::Generator => "generator",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage `{s}`"))
    }
}

/// Worker counts, queue sizing and monitor policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageConfig {
    pub workers_transmission: usize,
    pub workers_airlight: usize,
    pub workers_generator: usize,
    pub queue_capacity: usize,
    /// `None` waits for missing frames forever.
    pub monitor_timeout: Option<Duration>,
    pub deterministic: bool,
}

impl StageConfig {
    /// Queue capacity defaults to twice the widest stage.
    pub fn new(transmission: usize, airlight: usize, generator: usize) -> Self {
        let widest = transmission.max(airlight).max(generator).max(1);
        Self {
            workers_transmission: transmission,
            workers_airlight: airlight,
            workers_generator: generator,
            queue_capacity: 2 * widest,
            monitor_timeout: Some(DEFAULT_MONITOR_TIMEOUT),
            deterministic: false,
        }
    }

    pub fn deterministic(mut self, on: bool) -> Self {
        self.deterministic = on;
        self
    }

    pub fn timeout(mut self, timeout: Option<Duration>) -> Self {
        self.monitor_timeout = timeout;
        self
    }

    pub fn workers(&self, stage: Stage) -> usize {
        match stage {
            Stage::Transmission => self.workers_transmission,
            Stage::Airlight => self.workers_airlight,
            Stage::Generator => self.workers_generator,
        }
    }

    pub fn validate(&self) -> Result<(), HazeError> {
        if Stage::ALL.iter().any(|&s| self.workers(s) == 0) || self.queue_capacity == 0 {
            return Err(HazeError::InvalidInput(format!(
                "worker counts and queue capacity must be >= 1: {self:?}"
            )));
        }
        Ok(())
    }

    /// Maximum number of frames admitted but not yet emitted.
    pub fn window(&self) -> usize {
        let workers: usize = Stage::ALL.iter().map(|&s| self.workers(s)).sum();
        3 * self.queue_capacity + workers
    }
}

impl Default for StageConfig {
    fn default() -> Self {
        Self::new(1, 1, 1)
    }
}

/// Injected misbehaviour for one frame at one stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    Delay(Duration),
    Fail,
}

pub trait FaultInjector: Send + Sync {
    fn fault(&self, stage: Stage, id: FrameId) -> Option<Fault>;
}

impl<F> FaultInjector for F
where
    F: Fn(Stage, FrameId) -> Option<Fault> + Send + Sync,
{
    fn fault(&self, stage: Stage, id: FrameId) -> Option<Fault> {
        self(stage, id)
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(#[from] HazeError),
    #[error("source failed after {} frames: {message}", metrics.frames_in)]
    Source { message: String, metrics: PipelineMetrics },
    #[error("sink failed: {error}")]
    Sink { error: FrameIoError, metrics: PipelineMetrics },
}

impl PipelineError {
    /// Partial metrics gathered before the failure, if the run got that far.
    pub fn metrics(&self) -> Option<&PipelineMetrics> {
        match self {
            PipelineError::Config(_) => None,
            PipelineError::Source { metrics, .. } | PipelineError::Sink { metrics, .. } => Some(metrics),
        }
    }
}

/// Downstream side of a stage worker.
pub trait Downstream {
    fn push(&self, packet: Packet);
}

impl Downstream for Sender<Packet> {
    fn push(&self, packet: Packet) {
        // receivers outlive senders inside a run; a closed channel means shutdown
        let _ = self.send(packet);
    }
}

impl Downstream for Monitor {
    fn push(&self, packet: Packet) {
        match packet {
            Packet::Frame(f) => {
                self.submit(f);
            }
            Packet::Dropped(id) => self.submit_dropped(id),
        }
    }
}

/// Result of applying a component to one frame.
pub type StepResult = Result<Box<Frame>, FrameId>;

/// Takes packets, applies `component` to frames, forwards everything.
///
/// Tombstones pass through untouched; a failing frame becomes a tombstone.
/// Sending blocks when the downstream queue is full.
pub fn stage_worker_loop<D: Downstream + ?Sized>(
    input: &Receiver<Packet>,
    mut component: impl FnMut(Box<Frame>) -> StepResult,
    output: &D,
) {
    for packet in input.iter() {
        match packet {
            Packet::Dropped(id) => output.push(Packet::Dropped(id)),
            Packet::Frame(frame) => match component(frame) {
                Ok(done) => output.push(Packet::Frame(done)),
                Err(id) => output.push(Packet::Dropped(id)),
            },
        }
    }
}

fn apply_fault(faults: Option<&dyn FaultInjector>, stage: Stage, id: FrameId) -> bool {
    match faults.and_then(|f| f.fault(stage, id)) {
        Some(Fault::Delay(d)) => {
            thread::sleep(d);
            true
        }
        Some(Fault::Fail) => false,
        None => true,
    }
}

/// Releases packets in id order to whichever worker is currently draining.
struct Sequencer {
    inner: Mutex<SeqInner>,
}

struct SeqInner {
    pending: BTreeMap<FrameId, Packet>,
    next: FrameId,
    draining: bool,
}

impl Sequencer {
    fn new() -> Self {
        Self { inner: Mutex::new(SeqInner { pending: BTreeMap::new(), next: 0, draining: false }) }
    }

    /// Stores `packet`; returns true if the caller must now drain.
    fn deposit(&self, packet: Packet) -> bool {
        let mut inner = self.inner.lock().unwrap_or_else(|p| p.into_inner());
        inner.pending.insert(packet.id(), packet);
        if !inner.draining && inner.pending.contains_key(&inner.next) {
            inner.draining = true;
            return true;
        }
        false
    }

    /// Next in-order packet, or `None` after giving up the drain role.
    fn take_next(&self) -> Option<Packet> {
        let mut inner = self.inner.lock().unwrap_or_else(|p| p.into_inner());
        let next = inner.next;
        match inner.pending.remove(&next) {
            Some(p) => {
                inner.next += 1;
                Some(p)
            }
            None => {
                inner.draining = false;
                None
            }
        }
    }
}

/// Configured pipeline, reusable across runs.
pub struct Pipeline {
    stage: StageConfig,
    dehaze: DehazeConfig,
    faults: Option<Arc<dyn FaultInjector>>,
}

impl Pipeline {
    pub fn new(stage: StageConfig, dehaze: DehazeConfig) -> Self {
        Self { stage, dehaze, faults: None }
    }

    pub fn with_faults(mut self, faults: Arc<dyn FaultInjector>) -> Self {
        self.faults = Some(faults);
        self
    }

    pub fn stage_config(&self) -> &StageConfig {
        &self.stage
    }

    pub fn dehaze_config(&self) -> &DehazeConfig {
        &self.dehaze
    }

    /// Runs the source to exhaustion; `sink` sees events strictly in id order.
    pub fn run<I, E, S>(&self, source: I, mut sink: S) -> Result<PipelineMetrics, PipelineError>
    where
        I: IntoIterator<Item = Result<Rgb8Image, E>>,
        I::IntoIter: Send,
        E: fmt::Display,
        S: FnMut(MonitorEvent) -> Result<(), FrameIoError>,
    {
        self.stage.validate()?;
        self.dehaze.validate()?;
        let stage = self.stage;
        let dehaze = self.dehaze;
        let faults = self.faults.as_deref();

        let cell = AirlightCell::<f32>::new(AirlightState::new(dehaze.airlight)?);
        let recorder = Recorder::default();
        let (window_tx, window_rx) = bounded::<()>(stage.window());
        let monitor = Monitor::new(stage.monitor_timeout).with_window(window_rx);
        let sequencer = Sequencer::new();
        let cancel = AtomicBool::new(false);
        let source_error: Mutex<Option<String>> = Mutex::new(None);

        let (trans_tx, trans_rx) = bounded::<Packet>(stage.queue_capacity);
        let (air_tx, air_rx) = bounded::<Packet>(stage.queue_capacity);
        let (gen_tx, gen_rx) = bounded::<Packet>(stage.queue_capacity);

        let started = Instant::now();
        let mut sink_error = None;
        let mut frames_out_latency = Vec::new();

        thread::scope(|scope| {
            let source = source.into_iter();
            let (cancel, recorder, source_error) = (&cancel, &recorder, &source_error);
            scope.spawn(move || {
                for (id, item) in source.enumerate() {
                    if cancel.load(Ordering::Relaxed) {
                        break;
                    }
                    let raster = match item {
                        Ok(raster) => raster,
                        Err(e) => {
                            *source_error.lock().unwrap_or_else(|p| p.into_inner()) = Some(e.to_string());
                            break;
                        }
                    };
                    if window_tx.send(()).is_err() {
                        break;
                    }
                    recorder.frames_in.fetch_add(1, Ordering::SeqCst);
                    let frame = Frame::new(id as FrameId, dequantize(&raster));
                    if trans_tx.send(Packet::Frame(Box::new(frame))).is_err() {
                        break;
                    }
                }
            });

            for _ in 0..stage.workers_transmission {
                let (rx, tx, cell) = (trans_rx.clone(), air_tx.clone(), &cell);
                scope.spawn(move || {
                    stage_worker_loop(
                        &rx,
                        |mut frame| {
                            let id = frame.id;
                            if !apply_fault(faults, Stage::Transmission, id) {
                                recorder.failures.fetch_add(1, Ordering::Relaxed);
                                return Err(id);
                            }
                            let snapshot = if !dehaze.algo.needs_airlight() {
                                AtmosphericLight::white()
                            } else if stage.deterministic {
                                cell.snapshot_for(id)
                            } else {
                                cell.snapshot()
                            };
                            let start = Instant::now();
                            let t = dehaze.estimate_transmission(&frame.image, &snapshot).map_err(|_| id)?;
                            recorder.record_stage(Stage::Transmission, start.elapsed());
                            frame.transmission = Some(t);
                            Ok(frame)
                        },
                        &tx,
                    );
                });
            }
            drop(air_tx);

            let estimate = move |frame: &Frame| {
                let t = frame.transmission.as_ref().expect("transmission stage ran");
                dehaze.estimate_airlight(&frame.image, t)
            };
            for _ in 0..stage.workers_airlight {
                let (rx, tx, cell, sequencer) = (air_rx.clone(), gen_tx.clone(), &cell, &sequencer);
                scope.spawn(move || {
                    let resolve_racy = |mut frame: Box<Frame>| -> StepResult {
                        let id = frame.id;
                        if !apply_fault(faults, Stage::Airlight, id) {
                            recorder.failures.fetch_add(1, Ordering::Relaxed);
                            return Err(id);
                        }
                        let start = Instant::now();
                        let a = cell.resolve(id, || estimate(&frame)).map_err(|_| id)?;
                        recorder.record_stage(Stage::Airlight, start.elapsed());
                        frame.airlight = Some(a);
                        Ok(frame)
                    };
                    if !stage.deterministic {
                        stage_worker_loop(&rx, resolve_racy, &tx);
                        return;
                    }
                    for packet in rx.iter() {
                        if !sequencer.deposit(packet) {
                            continue;
                        }
                        while let Some(packet) = sequencer.take_next() {
                            let out = match packet {
                                Packet::Dropped(id) => {
                                    cell.skip_in_order(id);
                                    Packet::Dropped(id)
                                }
                                Packet::Frame(mut frame) => {
                                    let id = frame.id;
                                    if !apply_fault(faults, Stage::Airlight, id) {
                                        recorder.failures.fetch_add(1, Ordering::Relaxed);
                                        cell.skip_in_order(id);
                                        tx.push(Packet::Dropped(id));
                                        continue;
                                    }
                                    let start = Instant::now();
                                    match cell.resolve_in_order(id, || estimate(&frame)) {
                                        Ok(a) => {
                                            recorder.record_stage(Stage::Airlight, start.elapsed());
                                            frame.airlight = Some(a);
                                            Packet::Frame(frame)
                                        }
                                        Err(_) => Packet::Dropped(id),
                                    }
                                }
                            };
                            tx.push(out);
                        }
                    }
                });
            }
            drop(gen_tx);

            let mut generators = Vec::new();
            for _ in 0..stage.workers_generator {
                let (rx, monitor) = (gen_rx.clone(), &monitor);
                generators.push(scope.spawn(move || {
                    stage_worker_loop(
                        &rx,
                        |mut frame| {
                            let id = frame.id;
                            if !apply_fault(faults, Stage::Generator, id) {
                                recorder.failures.fetch_add(1, Ordering::Relaxed);
                                return Err(id);
                            }
                            let start = Instant::now();
                            let (t, a) = (
                                frame.transmission.as_ref().expect("transmission stage ran"),
                                frame.airlight.as_ref().expect("airlight stage ran"),
                            );
                            let j = dehaze.generate(&frame.image, t, a).map_err(|_| id)?;
                            recorder.record_stage(Stage::Generator, start.elapsed());
                            frame.dehazed = Some(j);
                            Ok(frame)
                        },
                        monitor,
                    );
                }));
            }
            drop((trans_rx, air_rx, gen_rx));

            let (monitor_ref, cell_ref) = (&monitor, &cell);
            scope.spawn(move || {
                for g in generators {
                    let _ = g.join();
                }
                cell_ref.close();
                monitor_ref.close(recorder.frames_in());
            });

            loop {
                let event = monitor.next();
                if matches!(event, MonitorEvent::EndOfStream) {
                    break;
                }
                if let MonitorEvent::Frame(f) = &event {
                    frames_out_latency.push(f.ingest.elapsed());
                }
                if sink_error.is_none() {
                    if let Err(e) = sink(event) {
                        sink_error = Some(e);
                        cancel.store(true, Ordering::Relaxed);
                    }
                }
            }
        });

        let elapsed = started.elapsed();
        for took in frames_out_latency {
            recorder.record("end_to_end", took);
        }
        let counts = monitor.counts();
        let metrics = PipelineMetrics {
            frames_in: recorder.frames_in(),
            frames_out: counts.frames_out,
            frames_dropped: counts.frames_dropped,
            frames_late_discarded: counts.frames_late_discarded,
            throughput_fps: if elapsed.is_zero() {
                0.0
            } else {
                counts.frames_out as f64 / elapsed.as_secs_f64()
            },
            elapsed,
            latency_ms: recorder.latencies(),
            airlight_estimations: cell.estimations(),
        };
        if let Some(error) = sink_error {
            return Err(PipelineError::Sink { error, metrics });
        }
        if let Some(message) = source_error.into_inner().unwrap_or_else(|p| p.into_inner()) {
            return Err(PipelineError::Source { message, metrics });
        }
        Ok(metrics)
    }
}

/// Convenience wrapper around [`Pipeline::run`].
pub fn run_pipeline<I, E, S>(
    source: I,
    stage: &StageConfig,
    dehaze: &DehazeConfig,
    sink: S,
) -> Result<PipelineMetrics, PipelineError>
where
    I: IntoIterator<Item = Result<Rgb8Image, E>>,
    I::IntoIter: Send,
    E: fmt::Display,
    S: FnMut(MonitorEvent) -> Result<(), FrameIoError>,
{
    Pipeline::new(*stage, *dehaze).run(source, sink)
}
