//! The three dehazing components and their shared configuration.

use serde::{Deserialize, Serialize};

use crate::airlight_sync::AirlightParams;
use crate::error::HazeError;
use crate::estimators::{
    estimate_airlight_with, estimate_transmission_cap, estimate_transmission_dcp, AirlightMode,
    CapParams, DcpParams, EstimatorKind,
};
use crate::haze_model::{recover_radiance, AtmosphericLight, Image, TransmissionMap, DEFAULT_T_FLOOR};
use crate::scalar::Scalar;

/// Algorithm parameters shared by every execution mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DehazeConfig {
    pub algo: EstimatorKind,
    pub dcp: DcpParams,
    pub cap: CapParams,
    pub t_floor: f64,
    pub airlight: AirlightParams,
    pub airlight_mode: AirlightMode,
}

impl Default for DehazeConfig {
    fn default() -> Self {
        Self {
            algo: EstimatorKind::Dcp,
            dcp: DcpParams::default(),
            cap: CapParams::default(),
            t_floor: DEFAULT_T_FLOOR,
            airlight: AirlightParams::default(),
            airlight_mode: AirlightMode::Argmin,
        }
    }
}

impl DehazeConfig {
    pub fn with_algo(algo: EstimatorKind) -> Self {
        Self { algo, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), HazeError> {
        if !(self.t_floor > 0.0 && self.t_floor <= 1.0) {
            return Err(HazeError::InvalidInput(format!(
                "t_floor {} must lie in (0, 1]",
                self.t_floor
            )));
        }
        self.cap.validate()?;
        self.airlight.validate()
    }

    /// First component. `airlight` is only consulted by DCP.
    pub fn estimate_transmission<T: Scalar>(
        &self,
        img: &Image<T>,
        airlight: &AtmosphericLight<T>,
    ) -> Result<TransmissionMap<T>, HazeError> {
        match self.algo {
            EstimatorKind::Dcp => estimate_transmission_dcp(img, airlight, &self.dcp),
            EstimatorKind::Cap => estimate_transmission_cap(img, &self.cap),
        }
    }

    /// Second component, the fresh per-frame airlight estimate.
    pub fn estimate_airlight<T: Scalar>(
        &self,
        img: &Image<T>,
        t: &TransmissionMap<T>,
    ) -> Result<AtmosphericLight<T>, HazeError> {
        estimate_airlight_with(self.airlight_mode, img, t)
    }

    /// Third component, the haze-free image.
    pub fn generate<T: Scalar>(
        &self,
        img: &Image<T>,
        t: &TransmissionMap<T>,
        airlight: &AtmosphericLight<T>,
    ) -> Result<Image<T>, HazeError> {
        recover_radiance(img, t, airlight, T::lit(self.t_floor))
    }
}
