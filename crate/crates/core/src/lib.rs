//! Component-based video dehazing.
//!
//! Each frame goes through three components: transmission estimation,
//! atmospheric-light resolution and haze-free image generation. The same
//! components run sequentially ([`reference`]), in a multi-threaded staged
//! pipeline ([`pipeline`]) or across processes ([`transport`]).
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`). The
//! pipeline and wire format use `f32`.

pub mod airlight_sync;
pub mod bench;
pub mod dehaze;
pub mod error;
pub mod estimators;
pub mod frame_io;
pub mod haze_model;
pub mod pipeline;
pub mod reference;
pub mod scalar;
pub mod synth;
pub mod transport;

pub use airlight_sync::{AirlightCell, AirlightLog, AirlightParams, AirlightState};
pub use dehaze::DehazeConfig;
pub use error::HazeError;
pub use estimators::{AirlightMode, CapParams, DcpParams, EstimatorKind};
pub use haze_model::{FrameId, Image, Rgb8Image, ScalarMap, TransmissionMap};
pub use pipeline::{run_pipeline, MonitorEvent, Pipeline, PipelineMetrics, StageConfig};
pub use scalar::Scalar;

pub type ImageF = Image<f32>;
pub type ImageF64 = Image<f64>;
pub type TransmissionMapF = TransmissionMap<f32>;
pub type TransmissionMapF64 = TransmissionMap<f64>;
pub type AtmosphericLight = haze_model::AtmosphericLight<f32>;
pub type AtmosphericLightF64 = haze_model::AtmosphericLight<f64>;
