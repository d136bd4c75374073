//! Dense single-channel grids and the pyramid layout they live on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One pyramid level: `stride` input pixels per cell, `height × width` cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelSpec {
    pub stride: u32,
    pub height: usize,
    pub width: usize,
}

impl LevelSpec {
    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    /// Image-space center of cell `(row, col)`.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        let s = self.stride as f64;
        ((col as f64 + 0.5) * s, (row as f64 + 0.5) * s)
    }
}

/// Per-level layout of the feature pyramid, finest level first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PyramidSpec {
    pub levels: Vec<LevelSpec>,
}

impl PyramidSpec {
    /// Builds the layout for an `image_height × image_width` input and the given strides.
    pub fn for_image(image_height: usize, image_width: usize, strides: &[u32]) -> Result<Self> {
        if strides.is_empty() {
            return Err(Error::Config("pyramid needs at least one level".into()));
        }
        if strides.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "pyramid strides must be strictly increasing, got {strides:?}"
            )));
        }
        let mut levels = Vec::with_capacity(strides.len());
        for &stride in strides {
            let s = stride as usize;
            if stride == 0 || image_height % s != 0 || image_width % s != 0 {
                return Err(Error::Config(format!(
                    "image {image_height}x{image_width} is not divisible by stride {stride}"
                )));
            }
            levels.push(LevelSpec { stride, height: image_height / s, width: image_width / s });
        }
        Ok(Self { levels })
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn total_cells(&self) -> usize {
        self.levels.iter().map(LevelSpec::cells).sum()
    }

    /// Iterates `(level, row, col)` over every cell in level-then-row-major order.
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.levels.iter().enumerate().flat_map(|(l, spec)| {
            (0..spec.height).flat_map(move |r| (0..spec.width).map(move |c| (l, r, c)))
        })
    }
}

/// A dense map of scalars at one pyramid level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureGrid {
    pub level_index: usize,
    pub stride: u32,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(level_index: usize, stride: u32, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || stride == 0 {
            return Err(Error::Config(format!(
                "grid dimensions must be positive (stride {stride}, {height}x{width})"
            )));
        }
        if values.len() != height * width {
            return Err(Error::ShapeMismatch {
                left: vec![height, width],
                right: vec![values.len()],
            });
        }
        Ok(Self { level_index, stride, height, width, values })
    }

    pub fn filled(level_index: usize, spec: LevelSpec, value: f64) -> Self {
        Self {
            level_index,
            stride: spec.stride,
            height: spec.height,
            width: spec.width,
            values: vec![value; spec.cells()],
        }
    }

    pub fn spec(&self) -> LevelSpec {
        LevelSpec { stride: self.stride, height: self.height, width: self.width }
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.height, self.width]
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.values[row * self.width + col] = value;
    }

    pub fn check_same_shape(&self, other: &FeatureGrid) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                left: self.shape().to_vec(),
                right: other.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// True when every value lies in `[0, 1]`.
    pub fn is_probability(&self) -> bool {
        self.values.iter().all(|v| (0.0..=1.0).contains(v))
    }
}
