//! Transmission and airlight estimators.
//!
//! Two interchangeable transmission estimators are provided: the dark
//! channel prior (DCP) and the color attenuation prior (CAP). Airlight is
//! read off the hazy frame at the pixel of lowest transmission.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::HazeError;
use crate::haze_model::{AtmosphericLight, Image, ScalarMap, TransmissionMap};
use crate::scalar::Scalar;

/// Square local window `(2r+1) x (2r+1)`, clamped at image borders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DcpParams {
    pub patch_radius: usize,
}

impl Default for DcpParams {
    fn default() -> Self {
        Self { patch_radius: 7 }
    }
}

/// Linear depth model `d = w0 + w1 v + w2 s` followed by `t = exp(-beta d)`.
///
/// Defaults are the published color-attenuation-prior coefficients; they
/// are inputs, not something this crate learns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapParams {
    pub w0: f64,
    pub w1: f64,
    pub w2: f64,
    pub beta: f64,
}

impl Default for CapParams {
    fn default() -> Self {
        Self { w0: 0.121779, w1: 0.959710, w2: -0.780245, beta: 1.0 }
    }
}

impl CapParams {
    pub fn validate(&self) -> Result<(), HazeError> {
        let finite = [self.w0, self.w1, self.w2, self.beta].iter().all(|v| v.is_finite());
        if !finite || self.beta < 0.0 {
            return Err(HazeError::InvalidInput(format!("invalid CAP parameters {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Dcp,
    Cap,
}

impl EstimatorKind {
    /// Whether the transmission estimate depends on the current airlight.
    pub fn needs_airlight(self) -> bool {
        matches!(self, EstimatorKind::Dcp)
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EstimatorKind::Dcp => "dcp",
            EstimatorKind::Cap => "cap",
        })
    }
}

impl FromStr for EstimatorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "dcp" => Ok(EstimatorKind::Dcp),
            "cap" => Ok(EstimatorKind::Cap),
            other => Err(format!("unknown estimator `{other}` (expected dcp or cap)")),
        }
    }
}

/// How the airlight is picked from a frame and its transmission map.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AirlightMode {
    /// The single pixel of globally minimal transmission.
    #[default]
    Argmin,
    /// Mean over the lowest 0.1% transmission pixels.
    Robust,
}

/// Sliding minimum over `[i - r, i + r]` clamped to the slice.
fn min_filter_1d<T: Scalar>(input: &[T], radius: usize, out: &mut [T]) {
    let n = input.len();
    let mut window: VecDeque<usize> = VecDeque::with_capacity(2 * radius + 2);
    let mut next = 0;
    for i in 0..n {
        let hi = (i + radius).min(n - 1);
        while next <= hi {
            while window.back().is_some_and(|&b| input[b] >= input[next]) {
                window.pop_back();
            }
            window.push_back(next);
            next += 1;
        }
        let lo = i.saturating_sub(radius);
        while window.front().is_some_and(|&f| f < lo) {
            window.pop_front();
        }
        out[i] = input[window[0]];
    }
}

/// Separable square min-filter over a row-major plane.
fn min_filter_2d<T: Scalar>(plane: &[T], width: usize, height: usize, radius: usize) -> Vec<T> {
    if plane.is_empty() || radius == 0 {
        return plane.to_vec();
    }
    let mut rows = vec![T::zero(); plane.len()];
    for (src, dst) in plane.chunks_exact(width).zip(rows.chunks_exact_mut(width)) {
        min_filter_1d(src, radius, dst);
    }
    let mut out = vec![T::zero(); plane.len()];
    let mut column = vec![T::zero(); height];
    let mut filtered = vec![T::zero(); height];
    for x in 0..width {
        for y in 0..height {
            column[y] = rows[y * width + x];
        }
        min_filter_1d(&column, radius, &mut filtered);
        for y in 0..height {
            out[y * width + x] = filtered[y];
        }
    }
    out
}

/// Minimum over the clamped window and over the three channels.
pub fn dark_channel<T: Scalar>(img: &Image<T>, patch_radius: usize) -> ScalarMap<T> {
    let per_pixel: Vec<T> = img
        .pixels()
        .map(|[r, g, b]| r.min(g).min(b))
        .collect();
    let values = min_filter_2d(&per_pixel, img.width(), img.height(), patch_radius);
    ScalarMap::from_vec(img.width(), img.height(), values).expect("dimensions preserved")
}

/// `t(x) = 1 - min_{y in window(x)} min_c clamp(I^c(y) / A^c)`.
pub fn estimate_transmission_dcp<T: Scalar>(
    img: &Image<T>,
    airlight: &AtmosphericLight<T>,
    params: &DcpParams,
) -> Result<TransmissionMap<T>, HazeError> {
    let a = airlight.rgb;
    if a.iter().any(|c| !(*c > T::zero())) {
        return Err(HazeError::InvalidInput(format!(
            "airlight {:?} has a non-positive component",
            a
        )));
    }
    let ratios: Vec<T> = img
        .pixels()
        .map(|p| {
            (0..3)
                .map(|c| (p[c] / a[c]).clamp01())
                .fold(T::one(), |m, r| m.min(r))
        })
        .collect();
    let window_min = min_filter_2d(&ratios, img.width(), img.height(), params.patch_radius);
    let values = window_min.into_iter().map(|m| (T::one() - m).clamp01()).collect();
    Ok(TransmissionMap::from_vec_unchecked(img.width(), img.height(), values))
}

/// Value (max channel) and saturation `(max - min) / max` of one pixel.
#[inline]
pub fn value_saturation<T: Scalar>(p: [T; 3]) -> (T, T) {
    let max = p[0].max(p[1]).max(p[2]);
    let min = p[0].min(p[1]).min(p[2]);
    let s = if max > T::zero() { (max - min) / max } else { T::zero() };
    (max, s)
}

/// `t(x) = exp(-beta (w0 + w1 v(x) + w2 s(x)))`, clamped to `[0, 1]`.
pub fn estimate_transmission_cap<T: Scalar>(
    img: &Image<T>,
    params: &CapParams,
) -> Result<TransmissionMap<T>, HazeError> {
    params.validate()?;
    let (w0, w1, w2, beta) = (
        T::lit(params.w0),
        T::lit(params.w1),
        T::lit(params.w2),
        T::lit(params.beta),
    );
    let values = img
        .pixels()
        .map(|p| {
            let (v, s) = value_saturation(p);
            let depth = w0 + w1 * v + w2 * s;
            (-(beta * depth)).exp().clamp01()
        })
        .collect();
    Ok(TransmissionMap::from_vec_unchecked(img.width(), img.height(), values))
}

fn check_airlight_inputs<T: Scalar>(
    img: &Image<T>,
    t: &TransmissionMap<T>,
) -> Result<(), HazeError> {
    if img.width() != t.width() || img.height() != t.height() {
        return Err(HazeError::DimensionMismatch {
            expected: (img.width(), img.height()),
            found: (t.width(), t.height()),
        });
    }
    if img.pixel_count() == 0 {
        return Err(HazeError::InvalidInput("cannot estimate airlight of an empty image".into()));
    }
    Ok(())
}

/// The hazy pixel at the global transmission minimum (first in row-major order on ties).
pub fn estimate_airlight<T: Scalar>(
    img: &Image<T>,
    t: &TransmissionMap<T>,
) -> Result<AtmosphericLight<T>, HazeError> {
    check_airlight_inputs(img, t)?;
    let mut best = 0;
    for (i, &v) in t.as_slice().iter().enumerate().skip(1) {
        if v < t.as_slice()[best] {
            best = i;
        }
    }
    Ok(AtmosphericLight { rgb: img.pixel(best), source_frame_id: None })
}

/// Mean of the hazy pixels over the lowest 0.1% of transmissions (at least one pixel).
pub fn estimate_airlight_robust<T: Scalar>(
    img: &Image<T>,
    t: &TransmissionMap<T>,
) -> Result<AtmosphericLight<T>, HazeError> {
    check_airlight_inputs(img, t)?;
    let n = img.pixel_count();
    let take = n.div_ceil(1000).max(1);
    let mut order: Vec<usize> = (0..n).collect();
    let tv = t.as_slice();
    order.sort_by(|&a, &b| tv[a].partial_cmp(&tv[b]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let mut sum = [T::zero(); 3];
    for &i in &order[..take] {
        let p = img.pixel(i);
        for c in 0..3 {
            sum[c] = sum[c] + p[c];
        }
    }
    let count = T::lit(take as f64);
    Ok(AtmosphericLight {
        rgb: sum.map(|s| (s / count).clamp01()),
        source_frame_id: None,
    })
}

pub fn estimate_airlight_with<T: Scalar>(
    mode: AirlightMode,
    img: &Image<T>,
    t: &TransmissionMap<T>,
) -> Result<AtmosphericLight<T>, HazeError> {
    match mode {
        AirlightMode::Argmin => estimate_airlight(img, t),
        AirlightMode::Robust => estimate_airlight_robust(img, t),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn img(width: usize, height: usize, pixels: &[[f64; 3]]) -> Image<f64> {
        Image::from_vec(width, height, pixels.iter().flatten().copied().collect()).unwrap()
    }

    /// Nested-loop window scan, independent of the separable filter.
    fn dark_channel_oracle(img: &Image<f64>, r: usize) -> Vec<f64> {
        let (w, h) = (img.width() as isize, img.height() as isize);
        let r = r as isize;
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let mut m = f64::INFINITY;
                for yy in (y - r).max(0)..=(y + r).min(h - 1) {
                    for xx in (x - r).max(0)..=(x + r).min(w - 1) {
                        for c in img.pixel_at(xx as usize, yy as usize) {
                            m = m.min(c);
                        }
                    }
                }
                out.push(m);
            }
        }
        out
    }

    #[test]
    fn dark_channel_examples() {
        let single = img(1, 1, &[[0.3, 0.5, 0.7]]);
        for r in [0, 1, 5] {
            assert_eq!(dark_channel(&single, r).as_slice(), &[0.3]);
        }
        let uniform = Image::filled(5, 5, [0.8; 3]).unwrap();
        assert!(dark_channel(&uniform, 1).as_slice().iter().all(|&v| v == 0.8));
        let row = img(3, 1, &[[1.0; 3], [0.2, 1.0, 1.0], [1.0; 3]]);
        assert_eq!(dark_channel(&row, 1).as_slice(), &[0.2, 0.2, 0.2]);
    }

    #[test]
    fn dcp_examples() {
        let a = AtmosphericLight::new([0.8, 0.8, 0.8]).unwrap();
        let same = Image::filled(4, 3, a.rgb).unwrap();
        let t = estimate_transmission_dcp(&same, &a, &DcpParams::default()).unwrap();
        assert!(t.as_slice().iter().all(|&v| v == 0.0));

        let black = Image::filled(4, 3, [0.0; 3]).unwrap();
        let t = estimate_transmission_dcp(&black, &a, &DcpParams::default()).unwrap();
        assert!(t.as_slice().iter().all(|&v| v == 1.0));

        let one = img(1, 1, &[[0.4, 0.8, 0.8]]);
        let t = estimate_transmission_dcp(&one, &a, &DcpParams::default()).unwrap();
        assert!((t.as_slice()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn dcp_rejects_zero_airlight_component() {
        let a = AtmosphericLight::new([0.8, 0.0, 0.8]).unwrap();
        let one = img(1, 1, &[[0.4, 0.8, 0.8]]);
        assert!(estimate_transmission_dcp(&one, &a, &DcpParams::default()).is_err());
    }

    #[test]
    fn dcp_brighter_than_airlight_stays_in_range() {
        let a = AtmosphericLight::new([0.5, 0.5, 0.5]).unwrap();
        let bright = img(2, 1, &[[0.9, 0.9, 0.9], [1.0, 0.7, 0.6]]);
        let t = estimate_transmission_dcp(&bright, &a, &DcpParams { patch_radius: 0 }).unwrap();
        assert_eq!(t.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn cap_examples() {
        let px = img(1, 1, &[[0.5, 0.5, 0.5]]);
        let zero = CapParams { w0: 0.0, w1: 0.0, w2: 0.0, beta: 2.0 };
        assert_eq!(estimate_transmission_cap(&px, &zero).unwrap().as_slice(), &[1.0]);
        let flat = CapParams { beta: 0.0, ..CapParams::default() };
        assert_eq!(estimate_transmission_cap(&px, &flat).unwrap().as_slice(), &[1.0]);
        // v=0.5, s=0, d=0.601634, exp(-0.601634) = 0.54791561... (independent evaluation)
        let t = estimate_transmission_cap(&px, &CapParams::default()).unwrap().as_slice()[0];
        assert!((t - 0.547916).abs() < 1e-6, "{t}");
        let t32 = estimate_transmission_cap(&px.cast::<f32>(), &CapParams::default()).unwrap();
        assert!((t32.as_slice()[0] - 0.547916).abs() < 1e-6);
    }

    #[test]
    fn cap_rejects_negative_beta() {
        let px = img(1, 1, &[[0.5, 0.5, 0.5]]);
        let bad = CapParams { beta: -1.0, ..CapParams::default() };
        assert!(estimate_transmission_cap(&px, &bad).is_err());
    }

    #[test]
    fn airlight_examples() {
        let pixels = [[0.1; 3], [0.7, 0.6, 0.5], [0.2; 3], [0.3; 3]];
        let image = img(2, 2, &pixels);
        let t = TransmissionMap::from_vec(2, 2, vec![0.9, 0.2, 0.5, 0.8]).unwrap();
        assert_eq!(estimate_airlight(&image, &t).unwrap().rgb, [0.7, 0.6, 0.5]);

        let flat = TransmissionMap::uniform(2, 2, 0.4).unwrap();
        assert_eq!(estimate_airlight(&image, &flat).unwrap().rgb, [0.1; 3]);

        let pixels: Vec<[f64; 3]> = (0..10).map(|i| [i as f64 / 10.0; 3]).collect();
        let image = img(5, 2, &pixels);
        let mut tv = vec![0.9; 10];
        tv[3] = 0.1;
        tv[7] = 0.1;
        let t = TransmissionMap::from_vec(5, 2, tv).unwrap();
        assert_eq!(estimate_airlight(&image, &t).unwrap().rgb, [0.3; 3]);
    }

    #[test]
    fn airlight_rejects_empty_and_mismatch() {
        let empty = Image::<f64>::from_vec(0, 0, vec![]).unwrap();
        let t = TransmissionMap::from_vec(0, 0, vec![]).unwrap();
        assert!(estimate_airlight(&empty, &t).is_err());
        let one = img(1, 1, &[[0.5; 3]]);
        let t = TransmissionMap::uniform(2, 1, 0.5).unwrap();
        assert!(matches!(estimate_airlight(&one, &t), Err(HazeError::DimensionMismatch { .. })));
    }

    #[test]
    fn robust_airlight_single_pixel_for_small_images() {
        let image = img(2, 1, &[[0.2; 3], [0.6; 3]]);
        let t = TransmissionMap::from_vec(2, 1, vec![0.5, 0.1]).unwrap();
        assert_eq!(estimate_airlight_robust(&image, &t).unwrap().rgb, [0.6; 3]);
    }

    fn arb_image() -> impl Strategy<Value = Image<f64>> {
        (1usize..=8, 1usize..=8).prop_flat_map(|(w, h)| {
            prop::collection::vec(0.0f64..=1.0, w * h * 3)
                .prop_map(move |data| Image::from_vec(w, h, data).unwrap())
        })
    }

    proptest! {
        #[test]
        fn dark_channel_matches_brute_force(image in arb_image(), r in 0usize..5) {
            prop_assert_eq!(dark_channel(&image, r).into_vec(), dark_channel_oracle(&image, r));
        }

        #[test]
        fn dark_channel_radius_zero_is_idempotent(image in arb_image()) {
            let once = dark_channel(&image, 0);
            let grey: Vec<f64> = once.as_slice().iter().flat_map(|&v| [v; 3]).collect();
            let again = dark_channel(&Image::from_vec(image.width(), image.height(), grey).unwrap(), 0);
            prop_assert_eq!(once, again);
        }

        #[test]
        fn dcp_radius_zero_is_pixelwise(image in arb_image(), a in prop::array::uniform3(0.05f64..=1.0)) {
            let light = AtmosphericLight::new(a).unwrap();
            let t = estimate_transmission_dcp(&image, &light, &DcpParams { patch_radius: 0 }).unwrap();
            for (i, p) in image.pixels().enumerate() {
                let m = (0..3).map(|c| (p[c] / a[c]).min(1.0)).fold(1.0, f64::min);
                prop_assert_eq!(t.as_slice()[i], 1.0 - m);
            }
        }

        #[test]
        fn estimator_outputs_in_unit_range(image in arb_image(), a in prop::array::uniform3(0.01f64..=1.0), r in 0usize..4) {
            let light = AtmosphericLight::new(a).unwrap();
            let dcp = estimate_transmission_dcp(&image, &light, &DcpParams { patch_radius: r }).unwrap();
            let cap = estimate_transmission_cap(&image, &CapParams::default()).unwrap();
            for t in [&dcp, &cap] {
                prop_assert!(t.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
                let est = estimate_airlight(&image, t).unwrap();
                prop_assert!(est.rgb.iter().all(|v| (0.0..=1.0).contains(v)));
                prop_assert!(image.pixels().any(|p| p == est.rgb));
            }
        }

        #[test]
        fn cap_non_increasing_in_value(s in 0.0f64..1.0, v1 in 0.01f64..=1.0, v2 in 0.01f64..=1.0) {
            // build two pixels with the same saturation and different values
            let make = |v: f64| [v, v * (1.0 - s), v * (1.0 - s)];
            let (lo, hi) = if v1 <= v2 { (v1, v2) } else { (v2, v1) };
            let image = img(2, 1, &[make(lo), make(hi)]);
            let t = estimate_transmission_cap(&image, &CapParams::default()).unwrap();
            prop_assert!(t.as_slice()[1] <= t.as_slice()[0] + 1e-12);
        }

        #[test]
        fn dark_channel_translation_equivariant(image in arb_image(), r in 0usize..3) {
            // pad one white column on the left; interior results shift by one
            let (w, h) = (image.width(), image.height());
            let mut data = Vec::new();
            for y in 0..h {
                data.extend([1.0; 3]);
                for x in 0..w {
                    data.extend(image.pixel_at(x, y));
                }
            }
            let shifted = Image::from_vec(w + 1, h, data).unwrap();
            let a = dark_channel(&image, r);
            let b = dark_channel(&shifted, r);
            for y in 0..h {
                for x in 0..w {
                    // white padding never lowers a minimum
                    prop_assert_eq!(a.get(x, y), b.get(x + 1, y));
                }
            }
        }
    }
}
