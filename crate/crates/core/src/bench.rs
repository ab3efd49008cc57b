//! Throughput harness: each case runs `warmup` untimed passes and `measured`
//! timed passes of the in-process pipeline; the mean rate is reported.

use std::convert::Infallible;
use std::fmt::Write as _;

use serde::Serialize;
use serde_json::Value;

use crate::dehaze::DehazeConfig;
use crate::estimators::EstimatorKind;
use crate::haze_model::Rgb8Image;
use crate::pipeline::{run_pipeline, PipelineError, StageConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchCase {
    pub algo: EstimatorKind,
    pub stage: StageConfig,
}

impl BenchCase {
    pub fn new(algo: EstimatorKind, workers: (usize, usize, usize)) -> Self {
        Self { algo, stage: StageConfig::new(workers.0, workers.1, workers.2).timeout(None) }
    }

    pub fn workers(&self) -> (usize, usize, usize) {
        (self.stage.workers_transmission, self.stage.workers_airlight, self.stage.workers_generator)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchPlan {
    pub warmup: usize,
    pub measured: usize,
}

impl Default for BenchPlan {
    fn default() -> Self {
        Self { warmup: 1, measured: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub algo: EstimatorKind,
    pub workers: [usize; 3],
    pub frames: usize,
    pub width: u32,
    pub height: u32,
    /// Mean frames per second; `None` when there is nothing to time.
    pub fps: Option<f64>,
    pub runs_fps: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("report is plain data")
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<5} {:>9} {:>11} {:>7} {:>10}", "algo", "workers", "resolution", "frames", "fps");
        for r in &self.rows {
            let workers = format!("{},{},{}", r.workers[0], r.workers[1], r.workers[2]);
            let res = format!("{}x{}", r.width, r.height);
            let fps = r.fps.map_or_else(|| "n/a".to_string(), |f| format!("{f:.2}"));
            let _ = writeln!(out, "{:<5} {:>9} {:>11} {:>7} {:>10}", r.algo, workers, res, r.frames, fps);
        }
        out
    }

    /// Mean rate of the row matching `algo` and `workers`.
    pub fn fps(&self, algo: EstimatorKind, workers: (usize, usize, usize)) -> Option<f64> {
        let key = [workers.0, workers.1, workers.2];
        self.rows.iter().find(|r| r.algo == algo && r.workers == key).and_then(|r| r.fps)
    }
}

/// Measures one pipeline run and returns frames per second.
pub fn measure_once(frames: &[Rgb8Image], stage: &StageConfig, dehaze: &DehazeConfig) -> Result<f64, PipelineError> {
    let source = frames.iter().cloned().map(Ok::<_, Infallible>);
    let metrics = run_pipeline(source, stage, dehaze, |_| Ok(()))?;
    Ok(metrics.throughput_fps)
}

pub fn bench(
    frames: &[Rgb8Image],
    cases: &[BenchCase],
    plan: BenchPlan,
    base: &DehazeConfig,
) -> Result<BenchReport, PipelineError> {
    let (width, height) = frames.first().map_or((0, 0), |f| (f.width, f.height));
    let mut report = BenchReport::default();
    for case in cases {
        let dehaze = DehazeConfig { algo: case.algo, ..*base };
        let mut runs = Vec::new();
        if !frames.is_empty() {
            for _ in 0..plan.warmup {
                measure_once(frames, &case.stage, &dehaze)?;
            }
            for _ in 0..plan.measured {
                runs.push(measure_once(frames, &case.stage, &dehaze)?);
            }
        }
        let fps = (!runs.is_empty()).then(|| runs.iter().sum::<f64>() / runs.len() as f64);
        let (t, a, g) = case.workers();
        report.rows.push(BenchRow {
            algo: case.algo,
            workers: [t, a, g],
            frames: frames.len(),
            width,
            height,
            fps,
            runs_fps: runs,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_video, SceneSpec};

    #[test]
    fn zero_frames_reports_null() {
        let cases = [BenchCase::new(EstimatorKind::Dcp, (1, 1, 1))];
        let report = bench(&[], &cases, BenchPlan::default(), &DehazeConfig::default()).unwrap();
        assert_eq!(report.rows[0].fps, None);
        assert_eq!(report.to_json()["rows"][0]["fps"], Value::Null);
    }

    #[test]
    fn dcp_and_cap_rows_share_schema() {
        let frames = synth_video(&SceneSpec::sized(24, 16, 4)).frames;
        let cases = [BenchCase::new(EstimatorKind::Dcp, (1, 1, 1)), BenchCase::new(EstimatorKind::Cap, (1, 1, 1))];
        let plan = BenchPlan { warmup: 0, measured: 1 };
        let report = bench(&frames, &cases, plan, &DehazeConfig::default()).unwrap();
        assert_eq!(report.rows.len(), 2);
        let keys = |i: usize| {
            let mut k: Vec<_> = report.to_json()["rows"][i].as_object().unwrap().keys().cloned().collect();
            k.sort();
            k
        };
        assert_eq!(keys(0), keys(1));
        assert!(report.rows.iter().all(|r| r.fps.is_some_and(|f| f > 0.0)));
        assert!(report.table().contains("cap"));
    }
}
