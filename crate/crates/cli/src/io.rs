//! PNG frames, masks and renderings.

use std::io::Cursor;
use std::path::Path;

use anyhow::{anyhow, bail, Context};
use gmflow::checkpoint::write_atomic;
use gmflow::data::colorize::RgbImage;
use gmflow::train::LogRecord;
use gmflow::{ImagePair, OcclusionMask};
use gmflow_tensor::Tensor;
use image::{DynamicImage, ImageFormat};

/// Loads an 8-bit image as `[3, H, W]` with values mapped to `[−1, 1]`.
pub fn read_frame(path: &Path) -> anyhow::Result<Tensor<f32>> {
    let img = image::open(path)
        .with_context(|| format!("reading {}", path.display()))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        raw[(i[1] * w + i[2]) * 3 + i[0]] as f32 / 127.5 - 1.0
    }))
}

pub fn read_pair(a: &Path, b: &Path) -> anyhow::Result<ImagePair<f32>> {
    let (f1, f2) = (read_frame(a)?, read_frame(b)?);
    if f1.shape() != f2.shape() {
        bail!(
            "frame dimensions differ: {} is {}x{}, {} is {}x{}",
            a.display(),
            f1.shape()[2],
            f1.shape()[1],
            b.display(),
            f2.shape()[2],
            f2.shape()[1]
        );
    }
    Ok(ImagePair::new(f1, f2)?)
}

fn write_png(path: &Path, img: DynamicImage) -> anyhow::Result<()> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    write_atomic(path, buf.get_ref()).with_context(|| format!("writing {}", path.display()))
}

pub fn write_rgb(path: &Path, img: &RgbImage) -> anyhow::Result<()> {
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.pixels.clone())
        .ok_or_else(|| anyhow!("raster size mismatch"))?;
    write_png(path, DynamicImage::ImageRgb8(buf))
}

/// Grayscale PNG; occluded pixels are 255, the rest 0.
pub fn write_mask(path: &Path, mask: &OcclusionMask) -> anyhow::Result<()> {
    let px = mask.data.iter().map(|&o| if o { 255 } else { 0 }).collect();
    let buf = image::GrayImage::from_raw(mask.width as u32, mask.height as u32, px)
        .ok_or_else(|| anyhow!("mask size mismatch"))?;
    write_png(path, DynamicImage::ImageLuma8(buf))
}

/// Reads a mask written by [`write_mask`]; any nonzero pixel is occluded.
pub fn read_mask(path: &Path) -> anyhow::Result<OcclusionMask> {
    let img = image::open(path)
        .with_context(|| format!("reading {}", path.display()))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(OcclusionMask::new(
        h,
        w,
        img.as_raw().iter().map(|&v| v != 0).collect(),
    )?)
}

/// Lines of an existing log up to and including `iteration`.
pub fn log_prefix(text: &str, iteration: usize) -> String {
    text.lines()
        .filter(|l| serde_json::from_str::<LogRecord>(l).is_ok_and(|r| r.iteration <= iteration))
        .flat_map(|l| [l, "\n"])
        .collect()
}
