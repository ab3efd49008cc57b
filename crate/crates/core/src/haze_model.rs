//! Atmospheric scattering model and radiance recovery.
//!
//! A hazy observation `I` of scene radiance `J` under global airlight `A`
//! and per-pixel transmission `t` is
//!
//! ```text
//! I(x) = J(x) t(x) + A (1 - t(x)),      t(x) = exp(-beta d(x))
//! ```
//!
//! All intensities are normalized to `[0, 1]` and treated as linear.

use crate::error::HazeError;
use crate::scalar::Scalar;

/// Lower bound applied to the transmission divisor during recovery.
pub const DEFAULT_T_FLOOR: f64 = 0.1;

/// Row-major RGB raster with real-valued intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Scalar> Image<T> {
    /// Wraps interleaved RGB data, validating length and range.
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self, HazeError> {
        let expected = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(3))
            .ok_or_else(|| HazeError::InvalidInput("image dimensions overflow".into()))?;
        if data.len() != expected {
            return Err(HazeError::InvalidInput(format!(
                "image data length {} does not match {width}x{height}x3",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.in_unit_range()) {
            return Err(HazeError::InvalidInput(format!(
                "intensity {} at sample {pos} outside [0, 1]",
                data[pos]
            )));
        }
        Ok(Self { width, height, data })
    }

    /// Every pixel set to `rgb`.
    pub fn filled(width: usize, height: usize, rgb: [T; 3]) -> Result<Self, HazeError> {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self::from_vec(width, height, data)
    }

    pub(crate) fn from_vec_unchecked(width: usize, height: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), width * height * 3);
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// RGB triple at row-major pixel index.
    #[inline]
    pub fn pixel(&self, index: usize) -> [T; 3] {
        let i = index * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn pixel_at(&self, x: usize, y: usize) -> [T; 3] {
        self.pixel(y * self.width + x)
    }

    pub fn pixels(&self) -> impl Iterator<Item = [T; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    /// Converts every sample to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Image<U> {
        let data = self
            .data
            .iter()
            .map(|v| U::from(*v).unwrap_or_else(U::zero).clamp01())
            .collect();
        Image::from_vec_unchecked(self.width, self.height, data)
    }
}

/// Per-pixel scalar map with no range restriction (depth, dark channel).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarMap<T> {
    width: usize,
    height: usize,
    values: Vec<T>,
}

impl<T: Scalar> ScalarMap<T> {
    pub fn from_vec(width: usize, height: usize, values: Vec<T>) -> Result<Self, HazeError> {
        if width.checked_mul(height) != Some(values.len()) {
            return Err(HazeError::InvalidInput(format!(
                "map length {} does not match {width}x{height}",
                values.len()
            )));
        }
        Ok(Self { width, height, values })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<T> {
        self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.values[y * self.width + x]
    }
}

/// Per-pixel transmission `t(x)`; 0 is fully hazed, 1 haze-free.
#[derive(Debug, Clone, PartialEq)]
pub struct TransmissionMap<T> {
    width: usize,
    height: usize,
    values: Vec<T>,
}

impl<T: Scalar> TransmissionMap<T> {
    pub fn from_vec(width: usize, height: usize, values: Vec<T>) -> Result<Self, HazeError> {
        if width.checked_mul(height) != Some(values.len()) {
            return Err(HazeError::InvalidInput(format!(
                "transmission length {} does not match {width}x{height}",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.in_unit_range()) {
            return Err(HazeError::InvalidInput(format!(
                "transmission {} at pixel {pos} outside [0, 1]",
                values[pos]
            )));
        }
        Ok(Self { width, height, values })
    }

    pub fn uniform(width: usize, height: usize, t: T) -> Result<Self, HazeError> {
        Self::from_vec(width, height, vec![t; width * height])
    }

    pub(crate) fn from_vec_unchecked(width: usize, height: usize, values: Vec<T>) -> Self {
        debug_assert_eq!(values.len(), width * height);
        Self { width, height, values }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<T> {
        self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.values[y * self.width + x]
    }
}

/// Frame identifier assigned by the source, starting at 0.
pub type FrameId = u64;

/// Global RGB airlight `A`, tagged with the frame that produced it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AtmosphericLight<T> {
    pub rgb: [T; 3],
    pub source_frame_id: Option<FrameId>,
}

impl<T: Scalar> AtmosphericLight<T> {
    pub fn new(rgb: [T; 3]) -> Result<Self, HazeError> {
        if rgb.iter().any(|c| !c.in_unit_range()) {
            return Err(HazeError::InvalidInput(format!(
                "airlight {rgb:?} outside [0, 1]"
            )));
        }
        Ok(Self { rgb, source_frame_id: None })
    }

    /// White light, used before any estimate exists.
    pub fn white() -> Self {
        Self { rgb: [T::one(); 3], source_frame_id: None }
    }

    pub fn with_source(mut self, id: FrameId) -> Self {
        self.source_frame_id = Some(id);
        self
    }

    /// Largest per-channel absolute difference.
    pub fn linf_distance(&self, other: &Self) -> T {
        (0..3).fold(T::zero(), |acc, c| acc.max((self.rgb[c] - other.rgb[c]).abs()))
    }
}

fn check_dims<T: Scalar>(img: &Image<T>, t: &TransmissionMap<T>) -> Result<(), HazeError> {
    if img.width() != t.width() || img.height() != t.height() {
        return Err(HazeError::DimensionMismatch {
            expected: (img.width(), img.height()),
            found: (t.width(), t.height()),
        });
    }
    Ok(())
}

/// Renders a hazy observation from radiance, transmission and airlight.
pub fn composite_haze<T: Scalar>(
    radiance: &Image<T>,
    t: &TransmissionMap<T>,
    airlight: &AtmosphericLight<T>,
) -> Result<Image<T>, HazeError> {
    check_dims(radiance, t)?;
    let a = airlight.rgb;
    let mut out = Vec::with_capacity(radiance.as_slice().len());
    for (px, &tx) in radiance.as_slice().chunks_exact(3).zip(t.as_slice()) {
        let haze = T::one() - tx;
        for c in 0..3 {
            out.push((px[c] * tx + a[c] * haze).clamp01());
        }
    }
    Ok(Image::from_vec_unchecked(radiance.width(), radiance.height(), out))
}

/// `t = exp(-beta * d)` for every depth sample.
pub fn depth_to_transmission<T: Scalar>(
    depth: &ScalarMap<T>,
    beta: T,
) -> Result<TransmissionMap<T>, HazeError> {
    if !(beta >= T::zero()) || !beta.is_finite() {
        return Err(HazeError::InvalidInput(format!("scattering coefficient {beta} must be >= 0")));
    }
    if let Some(pos) = depth.as_slice().iter().position(|d| !(*d >= T::zero())) {
        return Err(HazeError::InvalidInput(format!(
            "depth {} at pixel {pos} is negative",
            depth.as_slice()[pos]
        )));
    }
    let values = depth
        .as_slice()
        .iter()
        .map(|&d| (-(beta * d)).exp().clamp01())
        .collect();
    Ok(TransmissionMap::from_vec_unchecked(depth.width(), depth.height(), values))
}

/// Inverts the scattering model: `J = (I - A) / max(t, t_floor) + A`, clamped to `[0, 1]`.
pub fn recover_radiance<T: Scalar>(
    hazy: &Image<T>,
    t: &TransmissionMap<T>,
    airlight: &AtmosphericLight<T>,
    t_floor: T,
) -> Result<Image<T>, HazeError> {
    check_dims(hazy, t)?;
    if !(t_floor > T::zero() && t_floor <= T::one()) {
        return Err(HazeError::InvalidInput(format!("t_floor {t_floor} must lie in (0, 1]")));
    }
    let a = airlight.rgb;
    let mut out = Vec::with_capacity(hazy.as_slice().len());
    for (px, &tx) in hazy.as_slice().chunks_exact(3).zip(t.as_slice()) {
        let divisor = tx.max(t_floor);
        for c in 0..3 {
            out.push(((px[c] - a[c]) / divisor + a[c]).clamp01());
        }
    }
    Ok(Image::from_vec_unchecked(hazy.width(), hazy.height(), out))
}

/// Interleaved 8-bit RGB raster, the on-disk and on-wire pixel format.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rgb8Image {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl Rgb8Image {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self, HazeError> {
        let expected = (width as usize)
            .checked_mul(height as usize)
            .and_then(|n| n.checked_mul(3));
        if expected != Some(data.len()) {
            return Err(HazeError::InvalidInput(format!(
                "rgb8 length {} does not match {width}x{height}x3",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn byte_len(&self) -> usize {
        self.data.len()
    }
}

/// Maps `v` to `round_half_up(v * 255)` clamped to a byte.
#[inline]
pub fn quantize_sample<T: Scalar>(v: T) -> u8 {
    let scaled = (v * T::lit(255.0) + T::lit(0.5)).floor();
    scaled.to_f64().unwrap_or(0.0).clamp(0.0, 255.0) as u8
}

#[inline]
pub fn dequantize_sample<T: Scalar>(b: u8) -> T {
    T::lit(f64::from(b)) / T::lit(255.0)
}

pub fn quantize<T: Scalar>(img: &Image<T>) -> Rgb8Image {
    Rgb8Image {
        width: img.width() as u32,
        height: img.height() as u32,
        data: img.as_slice().iter().map(|&v| quantize_sample(v)).collect(),
    }
}

pub fn dequantize<T: Scalar>(raster: &Rgb8Image) -> Image<T> {
    let data = raster.data.iter().map(|&b| dequantize_sample(b)).collect();
    Image::from_vec_unchecked(raster.width as usize, raster.height as usize, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grey(v: f64) -> Image<f64> {
        Image::filled(1, 1, [v; 3]).unwrap()
    }

    fn white() -> AtmosphericLight<f64> {
        AtmosphericLight::new([1.0; 3]).unwrap()
    }

    #[test]
    fn composite_examples() {
        for (t, expected) in [(1.0, 0.2), (0.0, 1.0), (0.5, 0.6)] {
            let tm = TransmissionMap::uniform(1, 1, t).unwrap();
            let out = composite_haze(&grey(0.2), &tm, &white()).unwrap();
            for v in out.as_slice() {
                assert!((v - expected).abs() < 1e-12, "t={t}: {v} != {expected}");
            }
        }
    }

    #[test]
    fn composite_rejects_mismatch() {
        let tm = TransmissionMap::uniform(2, 1, 0.5).unwrap();
        let err = composite_haze(&grey(0.2), &tm, &white()).unwrap_err();
        assert!(matches!(err, HazeError::DimensionMismatch { .. }));
    }

    #[test]
    fn depth_examples() {
        let zero = ScalarMap::from_vec(2, 1, vec![0.0, 0.0]).unwrap();
        assert_eq!(depth_to_transmission(&zero, 3.0).unwrap().as_slice(), &[1.0, 1.0]);
        let far = ScalarMap::from_vec(2, 1, vec![5.0, 100.0]).unwrap();
        assert_eq!(depth_to_transmission(&far, 0.0).unwrap().as_slice(), &[1.0, 1.0]);
        // exp(-1) evaluated independently: 0.36787944117144233
        let one = ScalarMap::from_vec(1, 1, vec![1.0_f64]).unwrap();
        let t = depth_to_transmission(&one, 1.0).unwrap().as_slice()[0];
        assert!((t - 0.367879).abs() < 1e-6);
    }

    #[test]
    fn depth_rejects_negative_inputs() {
        let d = ScalarMap::from_vec(1, 1, vec![-1.0]).unwrap();
        assert!(depth_to_transmission(&d, 1.0).is_err());
        let d = ScalarMap::from_vec(1, 1, vec![1.0]).unwrap();
        assert!(depth_to_transmission(&d, -0.5).is_err());
    }

    #[test]
    fn recover_examples() {
        let a = white();
        // I = A everywhere
        let t = TransmissionMap::uniform(1, 1, 0.3).unwrap();
        let j = recover_radiance(&grey(1.0), &t, &a, 0.1).unwrap();
        assert_eq!(j.as_slice(), &[1.0; 3]);
        // t = 1 is the identity
        let t = TransmissionMap::uniform(1, 1, 1.0).unwrap();
        let j = recover_radiance(&grey(0.37), &t, &a, 0.1).unwrap();
        assert_eq!(j.as_slice(), &[0.37; 3]);
        // (0.5 - 1) / 0.5 + 1 = 0
        let t = TransmissionMap::uniform(1, 1, 0.5).unwrap();
        let j = recover_radiance(&grey(0.5), &t, &a, 0.1).unwrap();
        assert_eq!(j.as_slice(), &[0.0; 3]);
        // floor engaged: (0.5 - 1) / 0.1 + 1 = -4, clamped
        let t = TransmissionMap::uniform(1, 1, 0.05).unwrap();
        let j = recover_radiance(&grey(0.5), &t, &a, 0.1).unwrap();
        assert_eq!(j.as_slice(), &[0.0; 3]);
    }

    #[test]
    fn recover_rejects_bad_floor_and_mismatch() {
        let t = TransmissionMap::uniform(1, 1, 0.5).unwrap();
        assert!(recover_radiance(&grey(0.5), &t, &white(), 0.0).is_err());
        let t = TransmissionMap::uniform(1, 2, 0.5).unwrap();
        assert!(recover_radiance(&grey(0.5), &t, &white(), 0.1).is_err());
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize_sample(dequantize_sample::<f64>(255)), 255);
        assert_eq!(quantize_sample(dequantize_sample::<f32>(0)), 0);
        assert_eq!(quantize_sample(0.5f64), 128);
        assert_eq!(quantize_sample(0.5f32), 128);
        assert_eq!(dequantize_sample::<f64>(128), 128.0 / 255.0);
    }

    #[test]
    fn quantize_dequantize_identity_on_all_bytes() {
        for b in 0..=255u8 {
            assert_eq!(quantize_sample(dequantize_sample::<f32>(b)), b);
            assert_eq!(quantize_sample(dequantize_sample::<f64>(b)), b);
        }
    }

    #[test]
    fn image_validation() {
        assert!(Image::<f32>::from_vec(1, 1, vec![0.0, 0.5]).is_err());
        assert!(Image::<f32>::from_vec(1, 1, vec![0.0, 0.5, 1.5]).is_err());
        assert!(TransmissionMap::<f32>::from_vec(1, 1, vec![-0.1]).is_err());
        assert!(AtmosphericLight::<f32>::new([0.1, 0.2, 1.01]).is_err());
    }
}
