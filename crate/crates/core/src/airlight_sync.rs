//! Cross-frame airlight coherence.
//!
//! Re-estimating the airlight on every frame makes the output flicker. The
//! shared [`AirlightState`] keeps the last committed estimate `A_k` (from
//! frame `k`) and only re-estimates once a frame `m` arrives with
//! `m - k >= l`; the new value is then blended in with weight `lambda`:
//!
//! ```text
//! A_m = lambda * A_new + (1 - lambda) * A_k
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::HazeError;
use crate::haze_model::{AtmosphericLight, FrameId};
use crate::scalar::Scalar;

pub const DEFAULT_UPDATE_INTERVAL: u64 = 8;
pub const DEFAULT_LAMBDA: f64 = 0.05;

/// Update interval `l` and smoothing weight `lambda`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AirlightParams {
    pub update_interval: u64,
    pub lambda: f64,
}

impl Default for AirlightParams {
    fn default() -> Self {
        Self { update_interval: DEFAULT_UPDATE_INTERVAL, lambda: DEFAULT_LAMBDA }
    }
}

impl AirlightParams {
    pub fn new(update_interval: u64, lambda: f64) -> Result<Self, HazeError> {
        let params = Self { update_interval, lambda };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<(), HazeError> {
        if self.update_interval < 1 {
            return Err(HazeError::InvalidInput("update interval must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(HazeError::InvalidInput(format!(
                "lambda {} outside [0, 1]",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Component-wise convex combination `lambda * a_new + (1 - lambda) * a_prev`.
pub fn blend_airlight<T: Scalar>(
    a_prev: &AtmosphericLight<T>,
    a_new: &AtmosphericLight<T>,
    lambda: T,
) -> Result<AtmosphericLight<T>, HazeError> {
    if !(lambda >= T::zero() && lambda <= T::one()) {
        return Err(HazeError::InvalidInput(format!("lambda {lambda} outside [0, 1]")));
    }
    let keep = T::one() - lambda;
    let mut rgb = [T::zero(); 3];
    for c in 0..3 {
        let (p, n) = (a_prev.rgb[c], a_new.rgb[c]);
        // keep the result inside [min(p, n), max(p, n)] despite rounding
        rgb[c] = (lambda * n + keep * p).max(p.min(n)).min(p.max(n));
    }
    Ok(AtmosphericLight { rgb, source_frame_id: a_new.source_frame_id })
}

/// Last committed airlight and the frame that committed it.
#[derive(Debug, Clone, PartialEq)]
pub struct AirlightState<T> {
    /// `None` until the first estimate (bootstrap).
    pub last_update: Option<FrameId>,
    pub value: AtmosphericLight<T>,
    pub params: AirlightParams,
}

impl<T: Scalar> AirlightState<T> {
    /// Bootstrap state; the value is white until the first estimate lands.
    pub fn new(params: AirlightParams) -> Result<Self, HazeError> {
        params.validate()?;
        Ok(Self { last_update: None, value: AtmosphericLight::white(), params })
    }

    /// Whether frame `m` would trigger a fresh estimate.
    pub fn needs_estimate(&self, m: FrameId) -> bool {
        match self.last_update {
            None => true,
            Some(k) => m >= k && m - k >= self.params.update_interval,
        }
    }
}

/// Airlight chosen for one frame, plus the state after the decision.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolution<T> {
    pub airlight: AtmosphericLight<T>,
    pub state: AirlightState<T>,
    pub estimated: bool,
}

/// Decides the airlight for frame `m`, invoking `fresh` only when an update is due.
pub fn resolve_airlight<T: Scalar, E>(
    state: &AirlightState<T>,
    m: FrameId,
    fresh: impl FnOnce() -> Result<AtmosphericLight<T>, E>,
) -> Result<Resolution<T>, E> {
    if !state.needs_estimate(m) {
        return Ok(Resolution { airlight: state.value, state: state.clone(), estimated: false });
    }
    let estimate = fresh()?.with_source(m);
    let value = match state.last_update {
        None => estimate,
        Some(_) => blend_airlight(&state.value, &estimate, T::lit(state.params.lambda))
            .expect("lambda validated on construction")
            .with_source(m),
    };
    let next = AirlightState { last_update: Some(m), value, params: state.params };
    Ok(Resolution { airlight: value, state: next, estimated: true })
}

struct CellInner<T> {
    state: AirlightState<T>,
    generation: u64,
    /// Every frame id below this has been resolved or skipped (ordered mode).
    cursor: FrameId,
    closed: bool,
}

/// Shared airlight state for concurrent workers.
///
/// Readers always observe a complete `(k, value)` pair. Two update paths
/// exist: [`AirlightCell::resolve`] races under a generation check, while
/// [`AirlightCell::resolve_in_order`] is driven by a single sequencer in
/// frame-id order and lets transmission workers wait for the exact
/// snapshot a sequential run would have used ([`AirlightCell::snapshot_for`]).
pub struct AirlightCell<T> {
    inner: Mutex<CellInner<T>>,
    changed: Condvar,
    estimations: AtomicU64,
}

impl<T: Scalar> AirlightCell<T> {
    pub fn new(state: AirlightState<T>) -> Self {
        Self {
            inner: Mutex::new(CellInner { state, generation: 0, cursor: 0, closed: false }),
            changed: Condvar::new(),
            estimations: AtomicU64::new(0),
        }
    }

    fn lock(&self) -> MutexGuard<'_, CellInner<T>> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn state(&self) -> AirlightState<T> {
        self.lock().state.clone()
    }

    pub fn snapshot(&self) -> AtmosphericLight<T> {
        self.lock().state.value
    }

    pub fn cursor(&self) -> FrameId {
        self.lock().cursor
    }

    pub fn estimations(&self) -> u64 {
        self.estimations.load(Ordering::Relaxed)
    }

    /// Blocks until the airlight that frame `m` must see is final, then returns it.
    ///
    /// The value is final once every earlier frame is resolved, or once the
    /// committed update is recent enough that no frame in `[cursor, m)` can
    /// trigger another one.
    pub fn snapshot_for(&self, m: FrameId) -> AtmosphericLight<T> {
        let mut inner = self.lock();
        loop {
            let settled = inner.cursor >= m
                || inner
                    .state
                    .last_update
                    .is_some_and(|k| m <= k + inner.state.params.update_interval);
            if settled || inner.closed {
                return inner.state.value;
            }
            inner = self.changed.wait(inner).unwrap_or_else(|p| p.into_inner());
        }
    }

    /// Concurrent resolution with compare-and-commit.
    ///
    /// The estimate runs outside the lock; if another worker committed in
    /// the meantime this call returns that fresher value instead.
    pub fn resolve<E>(
        &self,
        m: FrameId,
        fresh: impl FnOnce() -> Result<AtmosphericLight<T>, E>,
    ) -> Result<AtmosphericLight<T>, E> {
        let (state, generation) = {
            let inner = self.lock();
            (inner.state.clone(), inner.generation)
        };
        if !state.needs_estimate(m) {
            return Ok(state.value);
        }
        self.estimations.fetch_add(1, Ordering::Relaxed);
        let resolution = resolve_airlight(&state, m, fresh)?;
        let mut inner = self.lock();
        if inner.generation != generation {
            return Ok(inner.state.value);
        }
        inner.state = resolution.state;
        inner.generation += 1;
        drop(inner);
        self.changed.notify_all();
        Ok(resolution.airlight)
    }

    /// Resolves frame `m` as the next frame in id order and advances the cursor.
    pub fn resolve_in_order<E>(
        &self,
        m: FrameId,
        fresh: impl FnOnce() -> Result<AtmosphericLight<T>, E>,
    ) -> Result<AtmosphericLight<T>, E> {
        let state = self.state();
        let needs = state.needs_estimate(m);
        if needs {
            self.estimations.fetch_add(1, Ordering::Relaxed);
        }
        let outcome = resolve_airlight(&state, m, fresh);
        let mut inner = self.lock();
        if let Ok(resolution) = &outcome {
            if resolution.estimated {
                inner.state = resolution.state.clone();
                inner.generation += 1;
            }
        }
        inner.cursor = inner.cursor.max(m + 1);
        drop(inner);
        self.changed.notify_all();
        outcome.map(|r| r.airlight)
    }

    /// Marks frame `m` as dropped so later frames stop waiting on it.
    pub fn skip_in_order(&self, m: FrameId) {
        let mut inner = self.lock();
        inner.cursor = inner.cursor.max(m + 1);
        drop(inner);
        self.changed.notify_all();
    }

    /// Installs a remotely committed update. Older generations are ignored.
    /// Returns whether the value was applied.
    pub fn install(
        &self,
        last_update: Option<FrameId>,
        value: AtmosphericLight<T>,
        cursor: FrameId,
    ) -> bool {
        let mut inner = self.lock();
        let newer = match (inner.state.last_update, last_update) {
            (_, None) => false,
            (None, Some(_)) => true,
            (Some(old), Some(new)) => new > old,
        };
        if newer {
            inner.state.last_update = last_update;
            inner.state.value = value;
            inner.generation += 1;
        }
        inner.cursor = inner.cursor.max(cursor);
        drop(inner);
        self.changed.notify_all();
        newer
    }

    /// Releases any waiter in [`AirlightCell::snapshot_for`].
    pub fn close(&self) {
        self.lock().closed = true;
        self.changed.notify_all();
    }
}

#[derive(Debug, Error)]
pub enum AirlightLogError {
    #[error("flicker metric needs at least 2 log entries, found {0}")]
    TooShort(usize),
    #[error("airlight log I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("airlight log CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("airlight log row {row}: {msg}")]
    Malformed { row: usize, msg: String },
}

/// Per-frame airlight curve, ordered by frame id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AirlightLog {
    entries: BTreeMap<FrameId, [f64; 3]>,
}

#[derive(Serialize, Deserialize)]
struct LogRow {
    frame_id: FrameId,
    a_r: String,
    a_g: String,
    a_b: String,
}

impl AirlightLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records the airlight used for `frame_id`. Existing entries are never overwritten.
    pub fn append<T: Scalar>(&mut self, frame_id: FrameId, airlight: &AtmosphericLight<T>) {
        let rgb = airlight.rgb.map(|c| c.to_f64().unwrap_or(0.0));
        self.entries.entry(frame_id).or_insert(rgb);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (FrameId, [f64; 3])> + '_ {
        self.entries.iter().map(|(&k, &v)| (k, v))
    }

    pub fn last(&self) -> Option<(FrameId, [f64; 3])> {
        self.entries.iter().next_back().map(|(&k, &v)| (k, v))
    }

    /// Mean L-infinity distance between consecutive entries.
    pub fn flicker(&self) -> Result<f64, AirlightLogError> {
        if self.entries.len() < 2 {
            return Err(AirlightLogError::TooShort(self.entries.len()));
        }
        let values: Vec<[f64; 3]> = self.entries.values().copied().collect();
        let total: f64 = values
            .windows(2)
            .map(|w| (0..3).map(|c| (w[0][c] - w[1][c]).abs()).fold(0.0, f64::max))
            .sum();
        Ok(total / (values.len() - 1) as f64)
    }

    /// `frame_id,a_r,a_g,a_b` with six fractional digits.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), AirlightLogError> {
        let mut out = csv::Writer::from_writer(writer);
        for (frame_id, rgb) in self.iter() {
            out.serialize(LogRow {
                frame_id,
                a_r: format!("{:.6}", rgb[0]),
                a_g: format!("{:.6}", rgb[1]),
                a_b: format!("{:.6}", rgb[2]),
            })?;
        }
        if self.is_empty() {
            out.write_record(["frame_id", "a_r", "a_g", "a_b"])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self, AirlightLogError> {
        let mut input = csv::Reader::from_reader(reader);
        let headers = input.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["frame_id", "a_r", "a_g", "a_b"] {
            return Err(AirlightLogError::Malformed {
                row: 0,
                msg: format!("unexpected header {:?}", headers),
            });
        }
        let mut log = Self::new();
        for (row, record) in input.deserialize::<LogRow>().enumerate() {
            let record = record?;
            let parse = |s: &str| {
                s.trim().parse::<f64>().map_err(|e| AirlightLogError::Malformed {
                    row: row + 1,
                    msg: format!("`{s}`: {e}"),
                })
            };
            let rgb = [parse(&record.a_r)?, parse(&record.a_g)?, parse(&record.a_b)?];
            if log.entries.insert(record.frame_id, rgb).is_some() {
                return Err(AirlightLogError::Malformed {
                    row: row + 1,
                    msg: format!("duplicate frame id {}", record.frame_id),
                });
            }
        }
        Ok(log)
    }
}
