//! Hub that drives remote stage endpoints from the monitor process.
//!
//! The driver owns every frame between stages: it dispatches each frame to
//! one endpoint of the next stage (round-robin), collects the reply and
//! hands finished frames to the monitor. Airlight updates committed by any
//! airlight endpoint are broadcast to the other airlight endpoints and to
//! the transmission endpoints.
//!
//! In deterministic mode airlight requests go out one at a time in id
//! order, and a DCP frame is only dispatched for transmission once the
//! airlight it must see is final, so the output matches the in-process
//! pipeline byte for byte.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::io::{BufReader, BufWriter, Write};
use std::net::{Shutdown, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, unbounded, Receiver, Sender};
use log::{debug, warn};
use thiserror::Error;

use super::codec::{read_message, write_message, Body, FramePayload, ProtocolError, WireMessage};
use super::topology::TopologyAssignment;
use crate::airlight_sync::AirlightState;
use crate::dehaze::DehazeConfig;
use crate::error::HazeError;
use crate::frame_io::FrameIoError;
use crate::haze_model::{dequantize, AtmosphericLight, FrameId, Rgb8Image, TransmissionMap};
use crate::pipeline::{Frame, Monitor, MonitorEvent, PipelineMetrics, Recorder, Stage, StageConfig};

const EOS_ACK_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("connecting to {addr}: {source}")]
    Connect { addr: String, source: std::io::Error },
    #[error("source failed after {} frames: {message}", metrics.frames_in)]
    Source { message: String, metrics: PipelineMetrics },
    #[error("sink failed: {error}")]
    Sink { error: FrameIoError, metrics: PipelineMetrics },
}

impl From<HazeError> for TransportError {
    fn from(e: HazeError) -> Self {
        TransportError::Config(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct LinkId {
    stage: Stage,
    index: usize,
}

enum Event {
    Source(FrameId, Rgb8Image),
    SourceEnd(Option<String>),
    Msg(LinkId, WireMessage),
    LinkDown(LinkId),
}

struct Link {
    id: LinkId,
    writer: Option<BufWriter<TcpStream>>,
    raw: TcpStream,
    in_flight: BTreeSet<FrameId>,
    /// Airlight version last sent on this link.
    airlight_version: u64,
    eos_acked: bool,
}

struct Pending {
    raster: Rgb8Image,
    transmission: Option<Vec<f32>>,
    airlight: Option<[f32; 3]>,
    ingest: Instant,
    dispatched: Instant,
}

struct Driver<'a> {
    stage: StageConfig,
    dehaze: DehazeConfig,
    links: BTreeMap<Stage, Vec<Link>>,
    rr: BTreeMap<Stage, usize>,
    frames: BTreeMap<FrameId, Pending>,
    /// Frames admitted but not yet sent for transmission, in id order.
    waiting: VecDeque<FrameId>,
    airlight: AirlightState<f32>,
    airlight_version: u64,
    /// Deterministic mode: every id below has been resolved or dropped in order.
    airlight_cursor: FrameId,
    /// Deterministic mode: transmission outcomes awaiting in-order airlight (false = dropped).
    airlight_ready: BTreeMap<FrameId, bool>,
    airlight_busy: Option<FrameId>,
    monitor: &'a Monitor,
    recorder: &'a Recorder,
    finished: u64,
    source_total: Option<u64>,
    source_error: Option<String>,
}

impl<'a> Driver<'a> {
    fn deterministic_dcp(&self) -> bool {
        self.stage.deterministic && self.dehaze.algo.needs_airlight()
    }

    fn settled(&self, m: FrameId) -> bool {
        !self.deterministic_dcp()
            || self.airlight_cursor >= m
            || self.airlight.last_update.is_some_and(|k| m <= k + self.airlight.params.update_interval)
    }

    fn next_link(&mut self, stage: Stage) -> Option<usize> {
        let links = self.links.get(&stage)?;
        let n = links.len();
        let start = self.rr.get(&stage).copied().unwrap_or(0);
        let idx = (0..n).map(|i| (start + i) % n).find(|&i| links[i].writer.is_some())?;
        self.rr.insert(stage, idx + 1);
        Some(idx)
    }

    fn airlight_message(&self) -> WireMessage {
        WireMessage::airlight(self.airlight.last_update, self.airlight.value.rgb, self.airlight_cursor)
    }

    fn write(&mut self, id: LinkId, msgs: &[WireMessage]) -> bool {
        let link = &mut self.links.get_mut(&id.stage).expect("known stage")[id.index];
        let Some(w) = link.writer.as_mut() else { return false };
        let ok = msgs.iter().try_for_each(|m| write_message(w, m)).and_then(|_| w.flush()).is_ok();
        if !ok {
            self.link_down(id);
        }
        ok
    }

    /// Sends the current airlight to `id` if it has not seen it yet.
    fn sync_airlight(&mut self, id: LinkId) -> bool {
        let version = self.airlight_version;
        let stale = self.links[&id.stage][id.index].airlight_version < version;
        if !stale {
            return true;
        }
        let msg = self.airlight_message();
        let ok = self.write(id, &[msg]);
        if ok {
            self.links.get_mut(&id.stage).expect("known stage")[id.index].airlight_version = version;
        }
        ok
    }

    fn broadcast_airlight(&mut self, except: Option<LinkId>) {
        let mut targets = vec![Stage::Airlight];
        if self.dehaze.algo.needs_airlight() {
            targets.push(Stage::Transmission);
        }
        for stage in targets {
            for index in 0..self.links[&stage].len() {
                let id = LinkId { stage, index };
                if Some(id) != except && self.links[&stage][index].writer.is_some() {
                    self.sync_airlight(id);
                }
            }
        }
    }

    fn payload(&self, id: FrameId) -> FramePayload {
        let p = &self.frames[&id];
        FramePayload {
            width: p.raster.width,
            height: p.raster.height,
            image: p.raster.data.clone(),
            dehazed: false,
            transmission: p.transmission.clone(),
            airlight: p.airlight,
        }
    }

    /// Sends frame `id` to the next live endpoint of `stage`; drops it if none is left.
    fn dispatch(&mut self, stage: Stage, id: FrameId) {
        loop {
            let Some(index) = self.next_link(stage) else {
                debug!("no live {stage} endpoint, dropping frame {id}");
                self.drop_frame(id, stage);
                return;
            };
            let link = LinkId { stage, index };
            let needs_sync = match stage {
                Stage::Transmission => self.dehaze.algo.needs_airlight(),
                Stage::Airlight => true,
                Stage::Generator => false,
            };
            if needs_sync && !self.sync_airlight(link) {
                continue;
            }
            let msg = WireMessage::frame(id, self.payload(id));
            if self.write(link, &[msg]) {
                self.links.get_mut(&stage).expect("known stage")[index].in_flight.insert(id);
                if let Some(p) = self.frames.get_mut(&id) {
                    p.dispatched = Instant::now();
                }
                return;
            }
        }
    }

    fn pump_transmission(&mut self) {
        while let Some(&id) = self.waiting.front() {
            if !self.settled(id) {
                break;
            }
            self.waiting.pop_front();
            self.dispatch(Stage::Transmission, id);
        }
    }

    fn pump_airlight(&mut self) {
        while self.airlight_busy.is_none() {
            let cursor = self.airlight_cursor;
            match self.airlight_ready.remove(&cursor) {
                Some(true) => {
                    self.airlight_busy = Some(cursor);
                    self.dispatch(Stage::Airlight, cursor);
                }
                Some(false) => self.airlight_cursor += 1,
                None => break,
            }
        }
    }

    /// Frame `id` left the system without output, while at `stage`.
    fn drop_frame(&mut self, id: FrameId, stage: Stage) {
        if self.frames.remove(&id).is_none() {
            return;
        }
        self.waiting.retain(|&w| w != id);
        if self.stage.deterministic {
            match stage {
                Stage::Transmission => {
                    self.airlight_ready.insert(id, false);
                }
                Stage::Airlight if self.airlight_busy == Some(id) => {
                    self.airlight_busy = None;
                    self.airlight_cursor = id + 1;
                }
                Stage::Airlight => {
                    self.airlight_ready.insert(id, false);
                }
                Stage::Generator => {}
            }
        }
        self.recorder.failures.fetch_add(1, Ordering::Relaxed);
        self.monitor.submit_dropped(id);
        self.finished += 1;
    }

    fn link_down(&mut self, id: LinkId) {
        let link = &mut self.links.get_mut(&id.stage).expect("known stage")[id.index];
        if link.writer.take().is_none() {
            return;
        }
        warn!("lost {} endpoint #{}", id.stage, id.index);
        let _ = link.raw.shutdown(Shutdown::Both);
        let lost: Vec<_> = std::mem::take(&mut link.in_flight).into_iter().collect();
        for frame in lost {
            self.drop_frame(frame, id.stage);
        }
        self.after_progress();
    }

    fn after_progress(&mut self) {
        if self.stage.deterministic {
            self.pump_airlight();
        }
        self.pump_transmission();
    }

    fn install_update(&mut self, k: Option<FrameId>, rgb: [f32; 3]) -> bool {
        let newer = match (self.airlight.last_update, k) {
            (_, None) => false,
            (None, Some(_)) => true,
            (Some(old), Some(new)) => new > old,
        };
        if newer {
            self.airlight.last_update = k;
            self.airlight.value = AtmosphericLight { rgb, source_frame_id: k };
            self.airlight_version += 1;
        }
        newer
    }

    fn on_message(&mut self, link: LinkId, msg: WireMessage) {
        let id = msg.frame_id;
        match msg.body {
            Body::AirlightUpdate(u) => {
                if self.install_update(u.committed.then_some(id), u.rgb) {
                    let version = self.airlight_version;
                    self.links.get_mut(&link.stage).expect("known stage")[link.index].airlight_version = version;
                    self.broadcast_airlight(Some(link));
                }
            }
            Body::EndOfStream { estimations } => {
                self.links.get_mut(&link.stage).expect("known stage")[link.index].eos_acked = true;
                if let Some(n) = estimations {
                    self.recorder.airlight_remote.fetch_add(n, Ordering::Relaxed);
                }
            }
            Body::Skip => {
                if self.links.get_mut(&link.stage).expect("known stage")[link.index].in_flight.remove(&id) {
                    self.drop_frame(id, link.stage);
                    self.after_progress();
                }
            }
            Body::FrameData(p) => {
                if !self.links.get_mut(&link.stage).expect("known stage")[link.index].in_flight.remove(&id) {
                    warn!("unexpected frame {id} from {} endpoint #{}", link.stage, link.index);
                    return;
                }
                if let Some(f) = self.frames.get(&id) {
                    self.recorder.record_stage(link.stage, f.dispatched.elapsed());
                }
                if let Err(e) = self.accept_reply(link.stage, id, p) {
                    warn!("bad reply for frame {id} from {}: {e}", link.stage);
                    self.drop_frame(id, link.stage);
                }
                self.after_progress();
            }
        }
    }

    fn accept_reply(&mut self, stage: Stage, id: FrameId, p: FramePayload) -> Result<(), String> {
        let pending = self.frames.get_mut(&id).ok_or("frame already dropped")?;
        let (w, h) = (pending.raster.width, pending.raster.height);
        if (p.width, p.height) != (w, h) {
            return Err(format!("dimensions {}x{} do not match {w}x{h}", p.width, p.height));
        }
        match stage {
            Stage::Transmission => {
                pending.transmission = Some(p.transmission.ok_or("missing transmission plane")?);
                if self.stage.deterministic {
                    self.airlight_ready.insert(id, true);
                } else {
                    self.dispatch(Stage::Airlight, id);
                }
            }
            Stage::Airlight => {
                pending.airlight = Some(p.airlight.ok_or("missing airlight")?);
                if self.stage.deterministic && self.airlight_busy == Some(id) {
                    self.airlight_busy = None;
                    self.airlight_cursor = id + 1;
                }
                self.dispatch(Stage::Generator, id);
            }
            Stage::Generator => {
                if !p.dehazed {
                    return Err("generator reply without dehazed image".into());
                }
                let pending = self.frames.remove(&id).expect("checked above");
                let out = Rgb8Image::new(p.width, p.height, p.image).map_err(|e| e.to_string())?;
                let mut frame = Frame::new(id, dequantize(&pending.raster));
                frame.ingest = pending.ingest;
                let (w, h) = (w as usize, h as usize);
                frame.transmission = pending.transmission.and_then(|t| TransmissionMap::from_vec(w, h, t).ok());
                frame.airlight = pending.airlight.map(|rgb| AtmosphericLight { rgb, source_frame_id: None });
                frame.dehazed = Some(dequantize(&out));
                self.recorder.record("end_to_end", pending.ingest.elapsed());
                self.monitor.submit(Box::new(frame));
                self.finished += 1;
            }
        }
        Ok(())
    }

    fn on_source(&mut self, id: FrameId, raster: Rgb8Image) {
        let now = Instant::now();
        self.frames.insert(id, Pending { raster, transmission: None, airlight: None, ingest: now, dispatched: now });
        self.waiting.push_back(id);
        self.pump_transmission();
    }

    fn done(&self) -> bool {
        self.source_total.is_some_and(|n| self.finished >= n)
    }

    fn run(&mut self, events: &Receiver<Event>) {
        while !self.done() {
            let Ok(event) = events.recv() else { break };
            match event {
                Event::Source(id, raster) => self.on_source(id, raster),
                Event::SourceEnd(error) => {
                    self.source_total = Some(self.recorder.frames_in());
                    self.source_error = error;
                }
                Event::Msg(link, msg) => self.on_message(link, msg),
                Event::LinkDown(link) => self.link_down(link),
            }
        }
        self.shutdown(events);
    }

    fn shutdown(&mut self, events: &Receiver<Event>) {
        let all: Vec<LinkId> = self.links.values().flatten().filter(|l| l.writer.is_some()).map(|l| l.id).collect();
        for &id in &all {
            self.write(id, &[WireMessage::end_of_stream(self.recorder.frames_in(), None)]);
        }
        let deadline = Instant::now() + EOS_ACK_TIMEOUT;
        while self.links.values().flatten().any(|l| l.writer.is_some() && !l.eos_acked) {
            match events.recv_deadline(deadline) {
                Ok(Event::Msg(link, msg)) => self.on_message(link, msg),
                Ok(Event::LinkDown(link)) => {
                    self.links.get_mut(&link.stage).expect("known stage")[link.index].writer = None;
                }
                Ok(_) => {}
                Err(_) => break,
            }
        }
        for link in self.links.values_mut().flatten() {
            link.writer = None;
            let _ = link.raw.shutdown(Shutdown::Both);
        }
    }
}

fn connect(addr: &str, id: LinkId, events: Sender<Event>) -> Result<Link, TransportError> {
    let err = |source| TransportError::Connect { addr: addr.to_string(), source };
    let stream = TcpStream::connect(addr).map_err(err)?;
    stream.set_nodelay(true).map_err(err)?;
    let reader = stream.try_clone().map_err(err)?;
    let raw = stream.try_clone().map_err(err)?;
    thread::spawn(move || {
        let mut reader = BufReader::new(reader);
        loop {
            match read_message(&mut reader) {
                Ok(Some(msg)) => {
                    if events.send(Event::Msg(id, msg)).is_err() {
                        return;
                    }
                }
                Ok(None) | Err(ProtocolError::Io(_)) => break,
                Err(e) => {
                    warn!("protocol error from {} endpoint #{}: {e}", id.stage, id.index);
                    break;
                }
            }
        }
        let _ = events.send(Event::LinkDown(id));
    });
    Ok(Link { id, writer: Some(BufWriter::new(stream)), raw, in_flight: BTreeSet::new(), airlight_version: 0, eos_acked: false })
}

/// Runs the pipeline over remote endpoints; same contract as [`crate::pipeline::run_pipeline`].
///
/// `stage` supplies the monitor timeout, determinism and the admission
/// window; worker counts are given by the endpoints themselves.
pub fn run_distributed<I, E, S>(
    assignment: &TopologyAssignment,
    stage: &StageConfig,
    dehaze: &DehazeConfig,
    source: I,
    mut sink: S,
) -> Result<PipelineMetrics, TransportError>
where
    I: IntoIterator<Item = Result<Rgb8Image, E>>,
    I::IntoIter: Send,
    E: fmt::Display,
    S: FnMut(MonitorEvent) -> Result<(), FrameIoError>,
{
    assignment.validate().map_err(|e| TransportError::Config(e.to_string()))?;
    stage.validate()?;
    dehaze.validate()?;

    let (event_tx, event_rx) = unbounded::<Event>();
    let mut links = BTreeMap::new();
    for s in Stage::ALL {
        let mut list = Vec::new();
        for (index, addr) in assignment.stages.get(s).iter().enumerate() {
            list.push(connect(addr, LinkId { stage: s, index }, event_tx.clone())?);
        }
        links.insert(s, list);
    }

    let recorder = Recorder::default();
    let endpoints: usize = Stage::ALL.iter().map(|&s| assignment.stages.get(s).len()).sum();
    let window = 3 * stage.queue_capacity + endpoints;
    let (window_tx, window_rx) = bounded::<()>(window);
    let monitor = Monitor::new(stage.monitor_timeout).with_window(window_rx);
    let cancel = AtomicBool::new(false);
    let started = Instant::now();
    let mut sink_error = None;
    let mut source_error = None;

    thread::scope(|scope| {
        let source = source.into_iter();
        let (recorder, cancel, monitor) = (&recorder, &cancel, &monitor);
        let source_events = event_tx.clone();
        scope.spawn(move || {
            let mut error = None;
            for (id, item) in source.enumerate() {
                if cancel.load(Ordering::Relaxed) {
                    break;
                }
                match item {
                    Ok(raster) => {
                        if window_tx.send(()).is_err() {
                            break;
                        }
                        recorder.frames_in.fetch_add(1, Ordering::SeqCst);
                        if source_events.send(Event::Source(id as FrameId, raster)).is_err() {
                            break;
                        }
                    }
                    Err(e) => {
                        error = Some(e.to_string());
                        break;
                    }
                }
            }
            let _ = source_events.send(Event::SourceEnd(error));
        });
        drop(event_tx);

        let driver = scope.spawn(move || {
            let mut driver = Driver {
                stage: *stage,
                dehaze: *dehaze,
                links,
                rr: BTreeMap::new(),
                frames: BTreeMap::new(),
                waiting: VecDeque::new(),
                airlight: AirlightState::new(dehaze.airlight).expect("validated"),
                airlight_version: 0,
                airlight_cursor: 0,
                airlight_ready: BTreeMap::new(),
                airlight_busy: None,
                monitor,
                recorder,
                finished: 0,
                source_total: None,
                source_error: None,
            };
            driver.run(&event_rx);
            monitor.close(recorder.frames_in());
            driver.source_error
        });

        loop {
            let event = monitor.next();
            if matches!(event, MonitorEvent::EndOfStream) {
                break;
            }
            if sink_error.is_none() {
                if let Err(e) = sink(event) {
                    sink_error = Some(e);
                    cancel.store(true, Ordering::Relaxed);
                }
            }
        }
        source_error = driver.join().unwrap_or_else(|_| Some("driver panicked".into()));
    });

    let elapsed = started.elapsed();
    let counts = monitor.counts();
    let metrics = PipelineMetrics {
        frames_in: recorder.frames_in(),
        frames_out: counts.frames_out,
        frames_dropped: counts.frames_dropped,
        frames_late_discarded: counts.frames_late_discarded,
        throughput_fps: if elapsed.is_zero() { 0.0 } else { counts.frames_out as f64 / elapsed.as_secs_f64() },
        elapsed,
        latency_ms: recorder.latencies(),
        airlight_estimations: recorder.airlight_remote.load(Ordering::Relaxed),
    };
    if let Some(error) = sink_error {
        return Err(TransportError::Sink { error, metrics });
    }
    if let Some(message) = source_error {
        return Err(TransportError::Source { message, metrics });
    }
    Ok(metrics)
}
