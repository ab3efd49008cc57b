use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::Serialize;
use serde_json::{Map, Value};

use super::Stage;

/// p50 / p95 / p99 in milliseconds (nearest rank).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LatencySummary {
    pub p50: f64,
    pub p95: f64,
    pub p99: f64,
}

impl LatencySummary {
    pub fn from_samples(samples: &mut [f64]) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        samples.sort_by(|a, b| a.total_cmp(b));
        let rank = |q: f64| {
            let idx = ((q * samples.len() as f64).ceil() as usize).clamp(1, samples.len()) - 1;
            samples[idx]
        };
        Some(Self { p50: rank(0.50), p95: rank(0.95), p99: rank(0.99) })
    }
}

/// Counters and latencies for one run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PipelineMetrics {
    pub frames_in: u64,
    pub frames_out: u64,
    /// Ids the sink never received a frame for (timeouts and failures).
    pub frames_dropped: u64,
    /// Frame submissions the monitor discarded because their id was already passed.
    pub frames_late_discarded: u64,
    pub throughput_fps: f64,
    pub elapsed: Duration,
    pub latency_ms: BTreeMap<String, LatencySummary>,
    pub airlight_estimations: u64,
}

impl PipelineMetrics {
    /// Flat JSON object; latency keys are `latency_ms_{stage}_{p50|p95|p99}`.
    pub fn to_json(&self) -> Value {
        let mut map = Map::new();
        map.insert("frames_in".into(), self.frames_in.into());
        map.insert("frames_out".into(), self.frames_out.into());
        map.insert("frames_dropped".into(), self.frames_dropped.into());
        map.insert("frames_late_discarded".into(), self.frames_late_discarded.into());
        map.insert("throughput_fps".into(), self.throughput_fps.into());
        for (stage, s) in &self.latency_ms {
            map.insert(format!("latency_ms_{stage}_p50"), s.p50.into());
            map.insert(format!("latency_ms_{stage}_p95"), s.p95.into());
            map.insert(format!("latency_ms_{stage}_p99"), s.p99.into());
        }
        map.insert("airlight_estimations".into(), self.airlight_estimations.into());
        Value::Object(map)
    }
}

#[derive(Default)]
pub(crate) struct Recorder {
    pub frames_in: AtomicU64,
    pub failures: AtomicU64,
    /// Estimates reported by remote airlight endpoints.
    pub airlight_remote: AtomicU64,
    samples: Mutex<BTreeMap<&'static str, Vec<f64>>>,
}

impl Recorder {
    pub fn record(&self, stage: &'static str, took: Duration) {
        let mut samples = self.samples.lock().unwrap_or_else(|p| p.into_inner());
        samples.entry(stage).or_default().push(took.as_secs_f64() * 1e3);
    }

    pub fn record_stage(&self, stage: Stage, took: Duration) {
        self.record(stage.name(), took);
    }

    pub fn frames_in(&self) -> u64 {
        self.frames_in.load(Ordering::SeqCst)
    }

    pub fn latencies(&self) -> BTreeMap<String, LatencySummary> {
        let mut samples = self.samples.lock().unwrap_or_else(|p| p.into_inner());
        samples
            .iter_mut()
            .filter_map(|(k, v)| LatencySummary::from_samples(v).map(|s| (k.to_string(), s)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_percentiles() {
        let mut v: Vec<f64> = (1..=100).map(f64::from).collect();
        let s = LatencySummary::from_samples(&mut v).unwrap();
        assert_eq!((s.p50, s.p95, s.p99), (50.0, 95.0, 99.0));
        assert!(LatencySummary::from_samples(&mut []).is_none());
    }

    #[test]
    fn json_keys() {
        let mut m = PipelineMetrics { frames_in: 3, frames_out: 2, frames_dropped: 1, ..Default::default() };
        m.latency_ms.insert("generator".into(), LatencySummary { p50: 1.0, p95: 2.0, p99: 3.0 });
        let json = m.to_json();
        for key in [
            "frames_in",
            "frames_out",
            "frames_dropped",
            "frames_late_discarded",
            "throughput_fps",
            "latency_ms_generator_p50",
            "latency_ms_generator_p95",
            "latency_ms_generator_p99",
            "airlight_estimations",
        ] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
        assert_eq!(json["frames_dropped"], 1);
    }
}
