//! Single-threaded oracle: the three components applied frame by frame,
//! airlight resolved strictly in id order. Every deterministic parallel
//! mode must reproduce its bytes.

use crate::airlight_sync::{resolve_airlight, AirlightLog, AirlightLogError, AirlightState};
use crate::dehaze::DehazeConfig;
use crate::error::HazeError;
use crate::haze_model::{dequantize, quantize, AtmosphericLight, FrameId, Rgb8Image};
use crate::ImageF;

/// Per-frame result of the oracle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReferenceFrame {
    Frame(Rgb8Image),
    /// A component rejected the frame.
    Skip,
}

impl ReferenceFrame {
    pub fn image(&self) -> Option<&Rgb8Image> {
        match self {
            ReferenceFrame::Frame(img) => Some(img),
            ReferenceFrame::Skip => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReferenceOutput {
    pub frames: Vec<ReferenceFrame>,
    /// Airlight applied to each emitted frame.
    pub airlight_log: AirlightLog,
    pub airlight_estimations: u64,
}

/// Dehazes one frame against `state`, advancing it. `None` marks a dropped frame.
fn process_frame(
    config: &DehazeConfig,
    state: &mut AirlightState<f32>,
    id: FrameId,
    image: &ImageF,
    estimations: &mut u64,
) -> Option<(Rgb8Image, AtmosphericLight<f32>)> {
    let snapshot = if config.algo.needs_airlight() { state.value } else { AtmosphericLight::white() };
    let t = config.estimate_transmission(image, &snapshot).ok()?;
    if state.needs_estimate(id) {
        *estimations += 1;
    }
    let resolution = resolve_airlight(state, id, || config.estimate_airlight(image, &t)).ok()?;
    *state = resolution.state;
    let j = config.generate(image, &t, &resolution.airlight).ok()?;
    Some((quantize(&j), resolution.airlight))
}

/// Runs the oracle over `frames`, numbering them from 0.
pub fn sequential_reference<'a, I>(frames: I, config: &DehazeConfig) -> Result<ReferenceOutput, HazeError>
where
    I: IntoIterator<Item = &'a Rgb8Image>,
{
    config.validate()?;
    let mut state = AirlightState::<f32>::new(config.airlight)?;
    let mut out = ReferenceOutput { frames: Vec::new(), airlight_log: AirlightLog::new(), airlight_estimations: 0 };
    for (i, raster) in frames.into_iter().enumerate() {
        let id = i as FrameId;
        let image = dequantize::<f32>(raster);
        match process_frame(config, &mut state, id, &image, &mut out.airlight_estimations) {
            Some((bytes, a)) => {
                out.airlight_log.append(id, &a);
                out.frames.push(ReferenceFrame::Frame(bytes));
            }
            None => out.frames.push(ReferenceFrame::Skip),
        }
    }
    Ok(out)
}

/// Mean L∞ distance between consecutive airlight entries.
pub fn flicker_metric(log: &AirlightLog) -> Result<f64, AirlightLogError> {
    log.flicker()
}
