//! Dense maps passed between pipeline stages.
//!
//! Coordinates are `(x, y)` with `x` indexing width; flow channels are
//! `(u, v) = (Δx, Δy)`.

use gmflow_tensor::{Real, Tensor};

use crate::error::{FlowError, Result};

/// Two RGB frames, each `[3, H, W]` with values in `[−1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair<T> {
    pub frame1: Tensor<T>,
    pub frame2: Tensor<T>,
}

impl<T: Real> ImagePair<T> {
    pub fn new(frame1: Tensor<T>, frame2: Tensor<T>) -> Result<Self> {
        if frame1.rank() != 3 || frame1.shape()[0] != 3 {
            return Err(FlowError::config(format!(
                "frames must be [3, H, W], got {:?}",
                frame1.shape()
            )));
        }
        if frame1.shape() != frame2.shape() {
            return Err(FlowError::config(format!(
                "frame dimensions differ: {:?} vs {:?}",
                frame1.shape(),
                frame2.shape()
            )));
        }
        Ok(Self { frame1, frame2 })
    }

    pub fn height(&self) -> usize {
        self.frame1.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frame1.shape()[2]
    }

    pub fn swapped(&self) -> Self {
        Self {
            frame1: self.frame2.clone(),
            frame2: self.frame1.clone(),
        }
    }
}

/// `[H, W, D]` features at `1/scale` of the image resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub data: Tensor<T>,
    pub scale: usize,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(data: Tensor<T>, scale: usize) -> Result<Self> {
        if data.rank() != 3 {
            return Err(FlowError::config(format!(
                "feature map must be [H, W, D], got {:?}",
                data.shape()
            )));
        }
        Ok(Self { data, scale })
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.data.shape()[2]
    }
}

/// `[H, W, 2]` displacement field in pixels of its own grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField<T> {
    pub data: Tensor<T>,
    pub scale: usize,
}

impl<T: Real> FlowField<T> {
    pub fn new(data: Tensor<T>, scale: usize) -> Result<Self> {
        if data.rank() != 3 || data.shape()[2] != 2 {
            return Err(FlowError::config(format!(
                "flow field must be [H, W, 2], got {:?}",
                data.shape()
            )));
        }
        Ok(Self { data, scale })
    }

    pub fn zeros(height: usize, width: usize, scale: usize) -> Self {
        Self {
            data: Tensor::zeros(&[height, width, 2]),
            scale,
        }
    }

    pub fn constant(height: usize, width: usize, u: f64, v: f64, scale: usize) -> Self {
        let (u, v) = (T::lit(u), T::lit(v));
        Self {
            data: Tensor::from_fn(&[height, width, 2], |i| if i[2] == 0 { u } else { v }),
            scale,
        }
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn at(&self, y: usize, x: usize) -> (T, T) {
        let i = (y * self.width() + x) * 2;
        (self.data.data()[i], self.data.data()[i + 1])
    }

    pub fn cast<U: Real>(&self) -> FlowField<U> {
        FlowField {
            data: self.data.cast(),
            scale: self.scale,
        }
    }
}

/// Per-pixel boolean mask; `true` marks an occluded or unmatched pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OcclusionMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl OcclusionMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(FlowError::config(format!(
                "mask of {} entries does not fit {height}x{width}",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn none(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}
