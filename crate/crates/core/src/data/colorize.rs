//! Flow visualization on the Middlebury color wheel.
//!
//! Hue encodes direction, saturation encodes magnitude relative to a
//! normalizer; zero motion is white. Magnitudes at or beyond the normalizer
//! are drawn with darkened full-saturation colors.

use gmflow_tensor::Real;

use crate::types::FlowField;

const SEGMENTS: [(usize, [u8; 3], [u8; 3]); 6] = [
    (15, [255, 0, 0], [255, 255, 0]),
    (6, [255, 255, 0], [0, 255, 0]),
    (4, [0, 255, 0], [0, 255, 255]),
    (11, [0, 255, 255], [0, 0, 255]),
    (13, [0, 0, 255], [255, 0, 255]),
    (6, [255, 0, 255], [255, 0, 0]),
];

/// Number of wheel entries.
pub const WHEEL_SIZE: usize = 55;

/// The 55 RGB wheel entries, red to yellow to green to cyan to blue to
/// magenta and back.
pub fn color_wheel() -> Vec<[f64; 3]> {
    let mut wheel = Vec::with_capacity(WHEEL_SIZE);
    for (n, from, to) in SEGMENTS {
        for i in 0..n {
            let t = i as f64 / n as f64;
            let ramp = (255.0 * t).floor();
            wheel.push(std::array::from_fn(|c| match from[c].cmp(&to[c]) {
                std::cmp::Ordering::Less => ramp,
                std::cmp::Ordering::Greater => 255.0 - ramp,
                std::cmp::Ordering::Equal => from[c] as f64,
            }));
        }
    }
    wheel
}

/// Interleaved 8-bit RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// 99th percentile of the per-pixel magnitudes (nearest rank).
pub fn percentile_magnitude<T: Real>(flow: &FlowField<T>) -> f64 {
    let mut mags: Vec<f64> = flow
        .data
        .data()
        .chunks(2)
        .map(|c| c[0].to_f64().unwrap().hypot(c[1].to_f64().unwrap()))
        .collect();
    if mags.is_empty() {
        return 0.0;
    }
    mags.sort_by(f64::total_cmp);
    let rank = ((0.99 * mags.len() as f64).ceil() as usize).clamp(1, mags.len());
    mags[rank - 1]
}

/// Colorizes `flow`, normalizing magnitudes by `max_magnitude` or, when
/// absent, the field's 99th-percentile magnitude.
pub fn colorize_flow<T: Real>(flow: &FlowField<T>, max_magnitude: Option<f64>) -> RgbImage {
    let wheel = color_wheel();
    let norm = max_magnitude.unwrap_or_else(|| percentile_magnitude(flow));
    let norm = if norm > 0.0 && norm.is_finite() { norm } else { 1.0 };
    let mut pixels = Vec::with_capacity(flow.data.len() / 2 * 3);
    for c in flow.data.data().chunks(2) {
        let (u, v) = (c[0].to_f64().unwrap() / norm, c[1].to_f64().unwrap() / norm);
        let rad = u.hypot(v);
        if !rad.is_finite() {
            pixels.extend_from_slice(&[0, 0, 0]);
            continue;
        }
        let a = (-v).atan2(-u) / std::f64::consts::PI;
        let fk = (a + 1.0) / 2.0 * (WHEEL_SIZE - 1) as f64;
        let k0 = (fk.floor() as usize).min(WHEEL_SIZE - 1);
        let k1 = (k0 + 1) % WHEEL_SIZE;
        let f = fk - k0 as f64;
        for ch in 0..3 {
            let col = ((1.0 - f) * wheel[k0][ch] + f * wheel[k1][ch]) / 255.0;
            // The normalizing pixel itself must not flip on rounding.
            let col = if rad <= 1.0 + 1e-9 {
                1.0 - rad.min(1.0) * (1.0 - col)
            } else {
                col * 0.75
            };
            pixels.push((255.0 * col).round().clamp(0.0, 255.0) as u8);
        }
    }
    RgbImage {
        width: flow.width(),
        height: flow.height(),
        pixels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wheel_has_55_entries_starting_red() {
        let w = color_wheel();
        assert_eq!(w.len(), WHEEL_SIZE);
        assert_eq!(w[0], [255.0, 0.0, 0.0]);
        assert_eq!(w[15], [255.0, 255.0, 0.0]);
    }

    #[test]
    fn zero_flow_is_white() {
        let img = colorize_flow(&FlowField::<f32>::zeros(3, 4, 1), None);
        assert!(img.pixels.iter().all(|&p| p == 255));
        assert_eq!(img.pixels.len(), 36);
    }
}
