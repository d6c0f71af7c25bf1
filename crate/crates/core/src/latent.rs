//! Multi-view video latents laid out as `[V, T, H, W, C]`.

use std::ops::Range;

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GridDims {
    pub views: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl GridDims {
    pub fn new(views: usize, frames: usize, height: usize, width: usize, channels: usize) -> Self {
        Self {
            views,
            frames,
            height,
            width,
            channels,
        }
    }

    pub fn shape(&self) -> [usize; 5] {
        [self.views, self.frames, self.height, self.width, self.channels]
    }

    pub fn len(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn with_resolution(self, height: usize, width: usize) -> Self {
        Self { height, width, ..self }
    }

    pub fn with_frames(self, frames: usize) -> Self {
        Self { frames, ..self }
    }

    /// Values in one `(view, frame)` image.
    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn index(&self, v: usize, t: usize, i: usize, j: usize, c: usize) -> usize {
        (((v * self.frames + t) * self.height + i) * self.width + j) * self.channels + c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    dims: GridDims,
    tensor: Tensor,
}

impl LatentGrid {
    pub fn new(tensor: Tensor) -> Result<Self> {
        let s = tensor.shape();
        if s.len() != 5 || s.contains(&0) {
            return Err(invalid(format!("latent grid needs 5 positive extents, got {s:?}")));
        }
        let dims = GridDims::new(s[0], s[1], s[2], s[3], s[4]);
        Ok(Self { dims, tensor })
    }

    pub fn from_vec(dims: GridDims, data: Vec<f64>) -> Result<Self> {
        Self::new(Tensor::new(dims.shape().to_vec(), data)?)
    }

    pub fn zeros(dims: GridDims) -> Self {
        Self {
            dims,
            tensor: Tensor::zeros(&dims.shape()),
        }
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.dims.height, self.dims.width)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn data(&self) -> &[f64] {
        self.tensor.data()
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        self.tensor.data_mut()
    }

    pub fn get(&self, v: usize, t: usize, i: usize, j: usize, c: usize) -> f64 {
        self.tensor.data()[self.dims.index(v, t, i, j, c)]
    }

    pub fn image(&self, v: usize, t: usize) -> &[f64] {
        let n = self.dims.image_len();
        let s = (v * self.dims.frames + t) * n;
        &self.tensor.data()[s..s + n]
    }

    pub fn image_mut(&mut self, v: usize, t: usize) -> &mut [f64] {
        let n = self.dims.image_len();
        let s = (v * self.dims.frames + t) * n;
        &mut self.tensor.data_mut()[s..s + n]
    }

    fn check_compatible(&self, other: &LatentGrid, op: &'static str) -> Result<()> {
        let (a, b) = (self.dims, other.dims);
        if a.with_frames(0) != b.with_frames(0) {
            return Err(Error::Shape {
                op,
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Frames `range` of every view.
    pub fn frames(&self, range: Range<usize>) -> Result<LatentGrid> {
        if range.start >= range.end || range.end > self.dims.frames {
            return Err(invalid(format!("frame range {range:?} outside 0..{}", self.dims.frames)));
        }
        let dims = self.dims.with_frames(range.len());
        let mut out = LatentGrid::zeros(dims);
        for v in 0..dims.views {
            for (dst, t) in range.clone().enumerate() {
                out.image_mut(v, dst).copy_from_slice(self.image(v, t));
            }
        }
        Ok(out)
    }

    /// Overwrites frames `range` with the same frames of `src`.
    pub fn copy_frames_from(&mut self, src: &LatentGrid, range: Range<usize>) -> Result<()> {
        self.check_compatible(src, "copy_frames_from")?;
        if range.end > self.dims.frames.min(src.dims.frames) {
            return Err(invalid(format!("frame range {range:?} out of bounds")));
        }
        for v in 0..self.dims.views {
            for t in range.clone() {
                self.image_mut(v, t).copy_from_slice(src.image(v, t));
            }
        }
        Ok(())
    }

    /// Joins two clips along time.
    pub fn concat_frames(a: &LatentGrid, b: &LatentGrid) -> Result<LatentGrid> {
        a.check_compatible(b, "concat_frames")?;
        let dims = a.dims.with_frames(a.dims.frames + b.dims.frames);
        let mut out = LatentGrid::zeros(dims);
        for v in 0..dims.views {
            for t in 0..a.dims.frames {
                out.image_mut(v, t).copy_from_slice(a.image(v, t));
            }
            for t in 0..b.dims.frames {
                out.image_mut(v, a.dims.frames + t).copy_from_slice(b.image(v, t));
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &LatentGrid) -> Result<LatentGrid> {
        Ok(Self {
            dims: self.dims,
            tensor: self.tensor.add(&other.tensor)?,
        })
    }

    pub fn sub(&self, other: &LatentGrid) -> Result<LatentGrid> {
        Ok(Self {
            dims: self.dims,
            tensor: self.tensor.sub(&other.tensor)?,
        })
    }

    pub fn scale(&self, alpha: f64) -> LatentGrid {
        Self {
            dims: self.dims,
            tensor: self.tensor.scale(alpha),
        }
    }

    /// `self + alpha * other` in place.
    pub fn axpy(&mut self, alpha: f64, other: &LatentGrid) -> Result<()> {
        self.tensor.axpy(alpha, &other.tensor)
    }

    pub fn mse(&self, other: &LatentGrid) -> Result<f64> {
        Ok(self.sub(other)?.tensor.mean_sq())
    }
}
