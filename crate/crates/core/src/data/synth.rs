//! Synthetic translation dataset with exact ground truth.
//!
//! Each sample draws a band-limited noise canvas larger than the frame.
//! Frame 1 is a crop of the canvas; frame 2 is the crop displaced by the
//! integer motion `t`, so `frame2(p + t) = frame1(p)` and regions entering
//! the view carry fresh canvas texture. An optional occluder patch with its
//! own texture and motion is pasted on top of both frames.

use gmflow_tensor::{Real, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};
use crate::types::{FlowField, ImagePair, OcclusionMask};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    /// Each motion component is uniform in `[−max_disp, max_disp]`.
    pub max_disp: i64,
    /// Gaussian blur of the white-noise texture, in pixels.
    pub blur: f64,
    /// Probability that a sample carries an occluder.
    pub occluder_prob: f64,
    /// Occluder side range as a fraction of the frame side.
    pub occluder_min: f64,
    pub occluder_max: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            max_disp: 12,
            blur: 3.0,
            occluder_prob: 0.0,
            occluder_min: 0.25,
            occluder_max: 0.45,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let side = self.height.min(self.width) as i64;
        if side == 0 || self.max_disp < 0 || self.max_disp >= side {
            return Err(FlowError::config(format!(
                "maximum displacement {} must be below the image extent {side}",
                self.max_disp
            )));
        }
        if !(0.0..=1.0).contains(&self.occluder_prob)
            || !(0.0 < self.occluder_min && self.occluder_min <= self.occluder_max && self.occluder_max < 1.0)
        {
            return Err(FlowError::config("occluder probability or size range out of bounds"));
        }
        if !(self.blur >= 0.0) {
            return Err(FlowError::config("blur must be non-negative"));
        }
        Ok(())
    }
}

/// One generated example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub images: ImagePair<T>,
    pub flow: FlowField<T>,
    /// Pixels of frame 1 that are covered or leave the view in frame 2.
    pub occlusion: OcclusionMask,
    pub valid: Vec<bool>,
}

/// Standard deviation of generated textures; about 1 in 350 values clips.
pub const TEXTURE_STD: f64 = 0.35;

/// `[3, h, w]` blurred white noise with standard deviation
/// [`TEXTURE_STD`], clipped to `[−1, 1]`.
pub fn noise_texture<R: Rng + ?Sized>(h: usize, w: usize, blur: f64, rng: &mut R) -> Vec<f64> {
    let mut img: Vec<f64> = (0..3 * h * w).map(|_| StandardNormal.sample(rng)).collect();
    if blur > 0.0 {
        let r = (3.0 * blur).ceil() as i64;
        let kernel: Vec<f64> = (-r..=r)
            .map(|i| (-(i * i) as f64 / (2.0 * blur * blur)).exp())
            .collect();
        let norm: f64 = kernel.iter().sum();
        let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
        let mut tmp = vec![0.0; img.len()];
        for c in 0..3 {
            let plane = c * h * w;
            for y in 0..h {
                for x in 0..w {
                    tmp[plane + y * w + x] = kernel
                        .iter()
                        .enumerate()
                        .map(|(k, kv)| {
                            let xx = (x as i64 + k as i64 - r).clamp(0, w as i64 - 1) as usize;
                            kv * img[plane + y * w + xx]
                        })
                        .sum();
                }
            }
            for y in 0..h {
                for x in 0..w {
                    img[plane + y * w + x] = kernel
                        .iter()
                        .enumerate()
                        .map(|(k, kv)| {
                            let yy = (y as i64 + k as i64 - r).clamp(0, h as i64 - 1) as usize;
                            kv * tmp[plane + yy * w + x]
                        })
                        .sum();
                }
            }
        }
    }
    let n = img.len() as f64;
    let mean = img.iter().sum::<f64>() / n;
    let sd = (img.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n)
        .sqrt()
        .max(1e-12);
    img.iter_mut()
        .for_each(|v| *v = ((*v - mean) / sd * TEXTURE_STD).clamp(-1.0, 1.0));
    img
}

struct Canvas {
    data: Vec<f64>,
    h: usize,
    w: usize,
    margin: i64,
}

impl Canvas {
    /// Pixel `(x, y)` of the frame coordinate system, channel `c`.
    fn at(&self, c: usize, x: i64, y: i64) -> f64 {
        let (cx, cy) = ((x + self.margin) as usize, (y + self.margin) as usize);
        self.data[c * self.h * self.w + cy * self.w + cx]
    }
}

/// Generates sample `index`; the result depends only on `(cfg, index)`.
pub fn synth_sample<T: Real>(cfg: &SynthConfig, index: u64) -> Result<Sample<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let (h, w) = (cfg.height, cfg.width);
    let m = cfg.max_disp;
    let margin = m + 1;
    let (ch, cw) = (h + 2 * margin as usize, w + 2 * margin as usize);
    let canvas = Canvas {
        data: noise_texture(ch, cw, cfg.blur, &mut rng),
        h: ch,
        w: cw,
        margin,
    };
    let t = (rng.gen_range(-m..=m), rng.gen_range(-m..=m));

    let mut f1 = vec![0.0; 3 * h * w];
    let mut f2 = vec![0.0; 3 * h * w];
    let mut flow = vec![0.0; h * w * 2];
    let mut occluded = vec![false; h * w];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let (xi, yi) = (x as i64, y as i64);
                f1[c * h * w + y * w + x] = canvas.at(c, xi, yi);
                f2[c * h * w + y * w + x] = canvas.at(c, xi - t.0, yi - t.1);
            }
        }
    }
    let inside = |x: i64, y: i64| x >= 0 && y >= 0 && x < w as i64 && y < h as i64;
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            flow[2 * p] = t.0 as f64;
            flow[2 * p + 1] = t.1 as f64;
            occluded[p] = !inside(x as i64 + t.0, y as i64 + t.1);
        }
    }

    if cfg.occluder_prob > 0.0 && rng.gen_bool(cfg.occluder_prob) {
        let side = |n: usize, rng: &mut ChaCha8Rng| {
            let lo = ((cfg.occluder_min * n as f64).round() as usize).max(1);
            let hi = ((cfg.occluder_max * n as f64).round() as usize).max(lo);
            rng.gen_range(lo..=hi)
        };
        let (oh, ow) = (side(h, &mut rng), side(w, &mut rng));
        let oy = rng.gen_range(0..=h - oh) as i64;
        let ox = rng.gen_range(0..=w - ow) as i64;
        let to = (rng.gen_range(-m..=m), rng.gen_range(-m..=m));
        let tex = noise_texture(oh, ow, cfg.blur, &mut rng);
        let in_patch = |x: i64, y: i64, dx: i64, dy: i64| {
            let (lx, ly) = (x - ox - dx, y - oy - dy);
            (lx >= 0 && ly >= 0 && lx < ow as i64 && ly < oh as i64).then_some((lx as usize, ly as usize))
        };
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let p = y as usize * w + x as usize;
                for c in 0..3 {
                    if let Some((lx, ly)) = in_patch(x, y, 0, 0) {
                        f1[c * h * w + p] = tex[c * oh * ow + ly * ow + lx];
                    }
                    if let Some((lx, ly)) = in_patch(x, y, to.0, to.1) {
                        f2[c * h * w + p] = tex[c * oh * ow + ly * ow + lx];
                    }
                }
                if in_patch(x, y, 0, 0).is_some() {
                    flow[2 * p] = to.0 as f64;
                    flow[2 * p + 1] = to.1 as f64;
                    occluded[p] = !inside(x + to.0, y + to.1);
                } else {
                    let (tx, ty) = (x + t.0, y + t.1);
                    occluded[p] = !inside(tx, ty) || in_patch(tx, ty, to.0, to.1).is_some();
                }
            }
        }
    }

    let lit = |v: Vec<f64>| v.into_iter().map(T::lit).collect::<Vec<_>>();
    Ok(Sample {
        images: ImagePair::new(Tensor::new(&[3, h, w], lit(f1))?, Tensor::new(&[3, h, w], lit(f2))?)?,
        flow: FlowField::new(Tensor::new(&[h, w, 2], lit(flow))?, 1)?,
        occlusion: OcclusionMask::new(h, w, occluded)?,
        valid: vec![true; h * w],
    })
}
