use std::time::Instant;

use crate::haze_model::{quantize, AtmosphericLight, FrameId, Rgb8Image, TransmissionMap};
use crate::ImageF;

/// One video frame and the products attached to it as it moves through the stages.
#[derive(Debug, Clone)]
pub struct Frame {
    pub id: FrameId,
    pub image: ImageF,
    pub transmission: Option<TransmissionMap<f32>>,
    pub airlight: Option<AtmosphericLight<f32>>,
    pub dehazed: Option<ImageF>,
    pub ingest: Instant,
}

impl Frame {
    pub fn new(id: FrameId, image: ImageF) -> Self {
        Self { id, image, transmission: None, airlight: None, dehazed: None, ingest: Instant::now() }
    }

    /// The 8-bit output raster, once the generator has run.
    pub fn output(&self) -> Option<Rgb8Image> {
        self.dehazed.as_ref().map(quantize)
    }
}

/// Unit of transfer between stages: a frame, or the tombstone of one that was dropped.
#[derive(Debug)]
pub enum Packet {
    Frame(Box<Frame>),
    Dropped(FrameId),
}

impl Packet {
    pub fn id(&self) -> FrameId {
        match self {
            Packet::Frame(f) => f.id,
            Packet::Dropped(id) => *id,
        }
    }
}
