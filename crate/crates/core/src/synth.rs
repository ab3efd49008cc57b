//! Synthetic hazy footage with known ground truth.
//!
//! A procedural scene (textured ground under a sky band) is assigned a
//! depth map, converted to transmission with `exp(-beta d)` and hazed with
//! a per-frame airlight. Optional uniform jitter on the airlight reproduces
//! the small estimation errors that cause flicker.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::airlight_sync::AirlightLog;
use crate::frame_io::{write_float_planes, write_frames, FrameIoError, FrameLocation};
use crate::haze_model::{
    composite_haze, depth_to_transmission, quantize, AtmosphericLight, FrameId, Image, Rgb8Image,
    ScalarMap,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: u32,
    pub height: u32,
    pub frames: u32,
    /// Half-width of the uniform per-channel airlight jitter.
    pub noise: f64,
    pub seed: u64,
    pub beta: f64,
    pub airlight: [f64; 3],
    /// Horizontal texture pan in pixels per frame.
    pub motion: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 320,
            height: 240,
            frames: 100,
            noise: 0.0,
            seed: 7,
            beta: 1.0,
            airlight: [0.85, 0.86, 0.9],
            motion: 1.0,
        }
    }
}

impl SceneSpec {
    pub fn sized(width: u32, height: u32, frames: u32) -> Self {
        Self { width, height, frames, ..Self::default() }
    }
}

/// Hazy frames plus the ground truth used to render them.
#[derive(Debug, Clone)]
pub struct SynthVideo {
    pub frames: Vec<Rgb8Image>,
    pub transmissions: Vec<Vec<f32>>,
    pub airlights: Vec<[f64; 3]>,
}

impl SynthVideo {
    pub fn airlight_log(&self) -> AirlightLog {
        let mut log = AirlightLog::new();
        for (i, rgb) in self.airlights.iter().enumerate() {
            log.append(i as FrameId, &AtmosphericLight { rgb: *rgb, source_frame_id: None });
        }
        log
    }
}

fn sky_rows(height: usize) -> usize {
    (height / 5).max(1).min(height)
}

fn depth_map(width: usize, height: usize) -> ScalarMap<f64> {
    let sky = sky_rows(height);
    let ground = (height - sky).max(1) as f64;
    let mut values = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let d = if y < sky {
                12.0
            } else {
                // far at the horizon, near at the bottom, with a gentle lateral tilt
                let near = (y - sky) as f64 / ground;
                0.3 + 2.7 * (1.0 - near) + 0.3 * (x as f64 / width.max(1) as f64)
            };
            values.push(d);
        }
    }
    ScalarMap::from_vec(width, height, values).expect("sized to width x height")
}

fn radiance(width: usize, height: usize, offset: f64) -> Image<f64> {
    let sky = sky_rows(height);
    let mut data = Vec::with_capacity(width * height * 3);
    for y in 0..height {
        for x in 0..width {
            if y < sky {
                data.extend([0.7, 0.75, 0.8]);
                continue;
            }
            let u = (x as f64 + offset).rem_euclid(width.max(1) as f64) / width.max(1) as f64;
            let v = y as f64 / height as f64;
            let cell = ((u * 12.0).floor() as i64 + (v * 9.0).floor() as i64) % 3;
            let px = match cell {
                0 => [0.55 + 0.3 * u, 0.35 * v, 0.08],
                1 => [0.1, 0.45 + 0.3 * (1.0 - u), 0.25 + 0.2 * v],
                _ => [0.3 * v, 0.2 + 0.2 * u, 0.6 + 0.3 * (1.0 - v)],
            };
            data.extend(px);
        }
    }
    Image::from_vec(width, height, data).expect("procedural radiance is in range")
}

pub fn synth_video(scene: &SceneSpec) -> SynthVideo {
    let (w, h) = (scene.width as usize, scene.height as usize);
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
    let depth = depth_map(w, h);
    let t = depth_to_transmission(&depth, scene.beta.max(0.0)).expect("depth is non-negative");
    let t32: Vec<f32> = t.as_slice().iter().map(|&v| v as f32).collect();

    let mut video = SynthVideo { frames: Vec::new(), transmissions: Vec::new(), airlights: Vec::new() };
    for frame in 0..scene.frames {
        let mut a = scene.airlight;
        if scene.noise > 0.0 {
            for c in &mut a {
                *c = (*c + rng.gen_range(-scene.noise..=scene.noise)).clamp(0.0, 1.0);
            }
        }
        let j = radiance(w, h, scene.motion * f64::from(frame));
        let light = AtmosphericLight::new(a.map(|c| c.clamp(0.0, 1.0))).expect("clamped");
        let hazy = composite_haze(&j, &t, &light).expect("matching dimensions");
        video.frames.push(quantize(&hazy));
        video.transmissions.push(t32.clone());
        video.airlights.push(light.rgb);
    }
    video
}

/// Paths of the ground-truth sidecars for an output location.
pub fn sidecar_paths(location: &FrameLocation) -> Option<(PathBuf, PathBuf)> {
    let with_suffix = |p: &Path, suffix: &str| {
        let mut s = p.as_os_str().to_owned();
        s.push(suffix);
        PathBuf::from(s)
    };
    match location {
        FrameLocation::Seq(dir) => Some((dir.join("transmission.ftv"), dir.join("airlight_truth.csv"))),
        FrameLocation::Frv(path) => Some((with_suffix(path, ".transmission.ftv"), with_suffix(path, ".airlight.csv"))),
        FrameLocation::FrvStdio => None,
    }
}

/// Writes the hazy frames and, for file targets, the ground-truth sidecars.
pub fn write_synth(video: &SynthVideo, scene: &SceneSpec, location: &FrameLocation) -> Result<(), FrameIoError> {
    write_frames(location, video.frames.iter().enumerate().map(|(i, f)| (i as FrameId, f)))?;
    let Some((t_path, a_path)) = sidecar_paths(location) else {
        return Ok(());
    };
    let last = video.frames.len().saturating_sub(1) as FrameId;
    let io_err = |source| FrameIoError::Io { frame: last, source };
    if let Some(parent) = t_path.parent() {
        fs::create_dir_all(parent).map_err(io_err)?;
    }
    let file = File::create(&t_path).map_err(io_err)?;
    write_float_planes(BufWriter::new(file), scene.width, scene.height, &video.transmissions).map_err(io_err)?;
    let file = File::create(&a_path).map_err(io_err)?;
    video.airlight_log().write_csv(BufWriter::new(file)).map_err(|e| FrameIoError::Malformed {
        frame: last,
        msg: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn static_noiseless_frames_identical() {
        let scene = SceneSpec { motion: 0.0, noise: 0.0, ..SceneSpec::sized(32, 24, 4) };
        let video = synth_video(&scene);
        assert_eq!(video.frames.len(), 4);
        assert!(video.frames.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn zero_frames_is_empty() {
        let video = synth_video(&SceneSpec::sized(16, 16, 0));
        assert!(video.frames.is_empty());
    }

    #[test]
    fn noise_perturbs_airlight_within_bounds() {
        let scene = SceneSpec { noise: 0.02, ..SceneSpec::sized(16, 16, 20) };
        let video = synth_video(&scene);
        assert!(video.airlights.windows(2).any(|w| w[0] != w[1]));
        for a in &video.airlights {
            for c in 0..3 {
                assert!((a[c] - scene.airlight[c]).abs() <= 0.02 + 1e-12);
            }
        }
        // same seed, same footage
        assert_eq!(synth_video(&scene).frames, video.frames);
    }

    #[test]
    fn sky_pixels_carry_the_airlight() {
        let scene = SceneSpec { noise: 0.0, ..SceneSpec::sized(20, 20, 1) };
        let video = synth_video(&scene);
        let px = &video.frames[0].data[..3];
        for c in 0..3 {
            assert!((f64::from(px[c]) / 255.0 - scene.airlight[c]).abs() < 2.0 / 255.0);
        }
    }
}
