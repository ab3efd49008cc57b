//! Order-restoring monitor.
//!
//! Completed frames arrive in any order and are held in an id-keyed queue.
//! The reader hands them out strictly in id order. When the expected id is
//! absent while later ids are already waiting, the reader waits at most
//! `timeout` for it, then emits `Skip(id)` and moves on. Anything that
//! turns up for an id the cursor already passed is discarded.

use std::collections::BTreeMap;
use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use crossbeam_channel::Receiver;

use super::frame::Frame;
use crate::haze_model::FrameId;

#[derive(Debug)]
pub enum MonitorEvent {
    Frame(Box<Frame>),
    Skip(FrameId),
    EndOfStream,
}

enum Pending {
    Frame(Box<Frame>),
    Dropped,
}

struct Inner {
    pending: BTreeMap<FrameId, Pending>,
    cursor: FrameId,
    total: Option<FrameId>,
    gap_since: Option<Instant>,
    out: u64,
    dropped: u64,
    late: u64,
}

impl Inner {
    fn has_gap(&self) -> bool {
        !self.pending.is_empty() && !self.pending.contains_key(&self.cursor)
    }

    fn advance(&mut self) {
        self.cursor += 1;
        self.gap_since = self.has_gap().then(Instant::now);
    }
}

/// Counters observed by the monitor.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MonitorCounts {
    pub frames_out: u64,
    pub frames_dropped: u64,
    pub frames_late_discarded: u64,
}

pub struct Monitor {
    inner: Mutex<Inner>,
    ready: Condvar,
    timeout: Option<Duration>,
    /// Admission tokens returned whenever a frame leaves the system.
    window: Option<Receiver<()>>,
}

impl Monitor {
    /// `timeout = None` waits for missing frames indefinitely.
    pub fn new(timeout: Option<Duration>) -> Self {
        Self::starting_at(0, timeout)
    }

    pub fn starting_at(cursor: FrameId, timeout: Option<Duration>) -> Self {
        Self {
            inner: Mutex::new(Inner {
                pending: BTreeMap::new(),
                cursor,
                total: None,
                gap_since: None,
                out: 0,
                dropped: 0,
                late: 0,
            }),
            ready: Condvar::new(),
            timeout,
            window: None,
        }
    }

    pub(crate) fn with_window(mut self, window: Receiver<()>) -> Self {
        self.window = Some(window);
        self
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn release(&self) {
        if let Some(w) = &self.window {
            let _ = w.try_recv();
        }
    }

    fn insert(&self, id: FrameId, entry: Pending) -> bool {
        let mut inner = self.lock();
        if id < inner.cursor || inner.pending.contains_key(&id) {
            if matches!(entry, Pending::Frame(_)) {
                inner.late += 1;
            }
            drop(inner);
            self.release();
            return false;
        }
        inner.pending.insert(id, entry);
        if inner.gap_since.is_none() && inner.has_gap() {
            inner.gap_since = Some(Instant::now());
        }
        drop(inner);
        self.ready.notify_all();
        true
    }

    /// Queues a completed frame. Returns false if it was discarded as late or duplicate.
    pub fn submit(&self, frame: Box<Frame>) -> bool {
        self.insert(frame.id, Pending::Frame(frame))
    }

    /// Records that `id` was dropped upstream so the reader need not wait for it.
    pub fn submit_dropped(&self, id: FrameId) {
        self.insert(id, Pending::Dropped);
    }

    /// No more submissions will arrive; ids below `total` still missing are skipped.
    pub fn close(&self, total: FrameId) {
        self.lock().total = Some(total);
        self.ready.notify_all();
    }

    pub fn counts(&self) -> MonitorCounts {
        let inner = self.lock();
        MonitorCounts {
            frames_out: inner.out,
            frames_dropped: inner.dropped,
            frames_late_discarded: inner.late,
        }
    }

    pub fn cursor(&self) -> FrameId {
        self.lock().cursor
    }

    /// Next event in id order; blocks as described in the module docs.
    pub fn next(&self) -> MonitorEvent {
        let mut inner = self.lock();
        loop {
            let cursor = inner.cursor;
            if let Some(entry) = inner.pending.remove(&cursor) {
                inner.advance();
                let event = match entry {
                    Pending::Frame(f) => {
                        inner.out += 1;
                        MonitorEvent::Frame(f)
                    }
                    Pending::Dropped => {
                        inner.dropped += 1;
                        MonitorEvent::Skip(cursor)
                    }
                };
                drop(inner);
                self.release();
                return event;
            }
            if let Some(total) = inner.total {
                if cursor >= total && inner.pending.is_empty() {
                    return MonitorEvent::EndOfStream;
                }
                // producers are finished, the frame can no longer arrive
                inner.dropped += 1;
                inner.advance();
                return MonitorEvent::Skip(cursor);
            }
            match (inner.gap_since, self.timeout) {
                (Some(since), Some(timeout)) => {
                    let deadline = since + timeout;
                    let now = Instant::now();
                    if now >= deadline {
                        inner.dropped += 1;
                        inner.advance();
                        return MonitorEvent::Skip(cursor);
                    }
                    inner = self
                        .ready
                        .wait_timeout(inner, deadline - now)
                        .unwrap_or_else(|p| p.into_inner())
                        .0;
                }
                _ => {
                    inner = self.ready.wait(inner).unwrap_or_else(|p| p.into_inner());
                }
            }
        }
    }
}
