//! Stage endpoints and the remote source.
//!
//! An endpoint runs one component for every frame the driver sends it.
//! Each connection gets its own airlight state, a reader thread and a pool
//! of workers that share the connection's inbound queue.

use std::io::{BufReader, BufWriter, Write};
use std::net::{Shutdown, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

use crossbeam_channel::unbounded;
use log::{debug, warn};

use super::codec::{read_message, write_message, Body, FramePayload, ProtocolError, WireMessage};
use crate::airlight_sync::{AirlightCell, AirlightState};
use crate::dehaze::DehazeConfig;
use crate::error::HazeError;
use crate::haze_model::{dequantize, quantize, AtmosphericLight, FrameId, Rgb8Image, TransmissionMap};
use crate::pipeline::Stage;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EndpointOptions {
    /// Worker threads sharing each connection's inbound queue.
    pub workers: usize,
    /// Abruptly drop the connection and stop serving after this many frames.
    pub fail_after: Option<u64>,
}

impl Default for EndpointOptions {
    fn default() -> Self {
        Self { workers: 1, fail_after: None }
    }
}

struct Shared {
    stage: Stage,
    dehaze: DehazeConfig,
    options: EndpointOptions,
    processed: AtomicU64,
    stopped: AtomicBool,
}

/// A listening endpoint for one stage.
pub struct StageServer {
    listener: TcpListener,
    shared: Arc<Shared>,
}

/// Background server started by [`StageServer::spawn`].
pub struct ServerHandle {
    pub addr: String,
    shared: Arc<Shared>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    /// Stops accepting connections; open connections finish normally.
    pub fn stop(mut self) {
        self.shared.stopped.store(true, Ordering::SeqCst);
        // unblock accept()
        let _ = TcpStream::connect(&self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl StageServer {
    pub fn bind(
        addr: impl ToSocketAddrs,
        stage: Stage,
        dehaze: DehazeConfig,
        options: EndpointOptions,
    ) -> Result<Self, HazeError> {
        dehaze.validate()?;
        if options.workers == 0 {
            return Err(HazeError::InvalidInput("endpoint needs at least one worker".into()));
        }
        let listener = TcpListener::bind(addr).map_err(|e| HazeError::InvalidInput(format!("bind: {e}")))?;
        let shared = Arc::new(Shared {
            stage,
            dehaze,
            options,
            processed: AtomicU64::new(0),
            stopped: AtomicBool::new(false),
        });
        Ok(Self { listener, shared })
    }

    pub fn local_addr(&self) -> String {
        self.listener.local_addr().map(|a| a.to_string()).unwrap_or_default()
    }

    /// Accepts connections until stopped or until a scripted failure.
    pub fn serve(self) {
        for conn in self.listener.incoming() {
            if self.shared.stopped.load(Ordering::SeqCst) {
                break;
            }
            match conn {
                Ok(stream) => {
                    let shared = self.shared.clone();
                    thread::spawn(move || {
                        if let Err(e) = serve_connection(stream, &shared) {
                            debug!("{} endpoint connection ended: {e}", shared.stage);
                        }
                    });
                }
                Err(e) => warn!("accept failed: {e}"),
            }
        }
    }

    pub fn spawn(self) -> ServerHandle {
        let addr = self.local_addr();
        let shared = self.shared.clone();
        let thread = thread::spawn(move || self.serve());
        ServerHandle { addr, shared, thread: Some(thread) }
    }
}

type Writer = Arc<Mutex<BufWriter<TcpStream>>>;

fn send(writer: &Writer, msgs: &[WireMessage]) -> std::io::Result<()> {
    let mut w = writer.lock().unwrap_or_else(|p| p.into_inner());
    for m in msgs {
        write_message(&mut *w, m)?;
    }
    w.flush()
}

fn serve_connection(stream: TcpStream, shared: &Shared) -> Result<(), ProtocolError> {
    stream.set_nodelay(true)?;
    let raw = stream.try_clone()?;
    let writer: Writer = Arc::new(Mutex::new(BufWriter::new(stream.try_clone()?)));
    let mut reader = BufReader::new(stream);
    let cell = AirlightCell::<f32>::new(
        AirlightState::new(shared.dehaze.airlight).map_err(|e| ProtocolError::Malformed {
            kind: "config",
            msg: e.to_string(),
        })?,
    );
    let (tx, rx) = unbounded::<(FrameId, FramePayload)>();
    let failed = AtomicBool::new(false);

    let result = thread::scope(|scope| {
        for _ in 0..shared.options.workers {
            let (rx, writer, cell, raw, failed) = (rx.clone(), &writer, &cell, &raw, &failed);
            scope.spawn(move || {
                for (id, payload) in rx.iter() {
                    if failed.load(Ordering::SeqCst) {
                        break;
                    }
                    let n = shared.processed.fetch_add(1, Ordering::SeqCst) + 1;
                    if shared.options.fail_after.is_some_and(|limit| n > limit) {
                        failed.store(true, Ordering::SeqCst);
                        shared.stopped.store(true, Ordering::SeqCst);
                        let _ = raw.shutdown(Shutdown::Both);
                        break;
                    }
                    let replies = match process(shared.stage, &shared.dehaze, cell, id, payload) {
                        Ok(replies) => replies,
                        Err(e) => {
                            debug!("{} failed on frame {id}: {e}", shared.stage);
                            vec![WireMessage::skip(id)]
                        }
                    };
                    if send(writer, &replies).is_err() {
                        break;
                    }
                }
            });
        }
        drop(rx);
        let outcome = loop {
            match read_message(&mut reader) {
                Ok(Some(msg)) => match msg.body {
                    Body::FrameData(p) => {
                        let _ = tx.send((msg.frame_id, p));
                    }
                    Body::AirlightUpdate(u) => {
                        let value = AtmosphericLight { rgb: u.rgb, source_frame_id: u.committed.then_some(msg.frame_id) };
                        cell.install(u.committed.then_some(msg.frame_id), value, u.cursor);
                    }
                    Body::EndOfStream { .. } => break Ok(true),
                    Body::Skip => {}
                },
                Ok(None) => break Ok(false),
                Err(e) => break Err(e),
            }
        };
        drop(tx);
        outcome
    });
    if result? && !failed.load(Ordering::SeqCst) {
        let total = cell.estimations();
        send(&writer, &[WireMessage::end_of_stream(0, Some(total))])?;
    }
    let _ = raw.shutdown(Shutdown::Both);
    Ok(())
}

fn raster_of(p: &FramePayload) -> Result<Rgb8Image, HazeError> {
    Rgb8Image::new(p.width, p.height, p.image.clone())
}

fn transmission_of(p: &FramePayload) -> Result<TransmissionMap<f32>, HazeError> {
    let t = p.transmission.clone().ok_or_else(|| HazeError::InvalidInput("missing transmission plane".into()))?;
    TransmissionMap::from_vec(p.width as usize, p.height as usize, t)
}

/// Applies this endpoint's component and builds the replies.
fn process(
    stage: Stage,
    dehaze: &DehazeConfig,
    cell: &AirlightCell<f32>,
    id: FrameId,
    mut payload: FramePayload,
) -> Result<Vec<WireMessage>, HazeError> {
    let image = dequantize::<f32>(&raster_of(&payload)?);
    match stage {
        Stage::Transmission => {
            let snapshot = if dehaze.algo.needs_airlight() { cell.snapshot() } else { AtmosphericLight::white() };
            let t = dehaze.estimate_transmission(&image, &snapshot)?;
            payload.transmission = Some(t.into_vec());
            Ok(vec![WireMessage::frame(id, payload)])
        }
        Stage::Airlight => {
            let t = transmission_of(&payload)?;
            let due = cell.state().needs_estimate(id);
            let a = cell.resolve(id, || dehaze.estimate_airlight(&image, &t))?;
            payload.airlight = Some(a.rgb);
            let mut replies = Vec::with_capacity(2);
            let state = cell.state();
            if due && state.last_update == Some(id) {
                replies.push(WireMessage::airlight(Some(id), state.value.rgb, id + 1));
            }
            replies.push(WireMessage::frame(id, payload));
            Ok(replies)
        }
        Stage::Generator => {
            let t = transmission_of(&payload)?;
            let rgb = payload.airlight.ok_or_else(|| HazeError::InvalidInput("missing airlight".into()))?;
            let a = AtmosphericLight::new(rgb)?;
            let j = quantize(&dehaze.generate(&image, &t, &a)?);
            Ok(vec![WireMessage::frame(
                id,
                FramePayload { width: j.width, height: j.height, image: j.data, dehazed: true, transmission: None, airlight: None },
            )])
        }
    }
}

/// Remote source: streams frames to the monitor, then an end-of-stream marker.
pub fn push_source<I, E>(monitor: &str, frames: I) -> Result<u64, ProtocolError>
where
    I: IntoIterator<Item = Result<Rgb8Image, E>>,
    E: std::fmt::Display,
{
    let stream = TcpStream::connect(monitor)?;
    stream.set_nodelay(true)?;
    let mut w = BufWriter::new(stream);
    let mut count = 0u64;
    for item in frames {
        let raster = item.map_err(|e| ProtocolError::Malformed { kind: "source", msg: e.to_string() })?;
        write_message(&mut w, &WireMessage::frame(count, FramePayload::new(raster.width, raster.height, raster.data)))?;
        count += 1;
    }
    write_message(&mut w, &WireMessage::end_of_stream(count, None))?;
    w.flush()?;
    Ok(count)
}

/// Frames received from a remote source, in id order.
pub struct SourceStream {
    reader: BufReader<TcpStream>,
    next: FrameId,
    done: bool,
}

impl SourceStream {
    /// Waits for one source to connect on `listener`.
    pub fn accept(listener: &TcpListener) -> Result<Self, ProtocolError> {
        let (stream, _) = listener.accept()?;
        Ok(Self { reader: BufReader::new(stream), next: 0, done: false })
    }
}

impl Iterator for SourceStream {
    type Item = Result<Rgb8Image, ProtocolError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let fail = |msg: String| ProtocolError::Malformed { kind: "source stream", msg };
        let item = match read_message(&mut self.reader) {
            Ok(Some(WireMessage { frame_id, body: Body::FrameData(p) })) if frame_id == self.next => {
                self.next += 1;
                Rgb8Image::new(p.width, p.height, p.image).map_err(|e| fail(e.to_string()))
            }
            Ok(Some(WireMessage { body: Body::EndOfStream { .. }, .. })) => {
                self.done = true;
                return None;
            }
            Ok(Some(other)) => Err(fail(format!("unexpected message type {} for frame {}", other.msg_type(), other.frame_id))),
            Ok(None) => Err(fail(format!("connection closed before end of stream (at frame {})", self.next))),
            Err(e) => Err(e),
        };
        if item.is_err() {
            self.done = true;
        }
        Some(item)
    }
}
