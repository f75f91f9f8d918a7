//! Per-pixel rasters: RGB images, depth maps, flow maps and boolean masks.
//!
//! Pixel `(x, y)` is column `x`, row `y`; its center sits at integer image
//! coordinates, so pixel `(x, y)` covers `[x - 0.5, x + 0.5) x [y - 0.5, y + 0.5)`.
//! All rasters are stored row-major.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RasterError {
    #[error("raster shape mismatch: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("raster data length {len} does not match {width}x{height}")]
    BadLength { len: usize, width: usize, height: usize },
}

pub(crate) fn check_same_shape(
    a: (usize, usize),
    b: (usize, usize),
) -> Result<(), RasterError> {
    if a != b {
        return Err(RasterError::ShapeMismatch(a.0, a.1, b.0, b.1));
    }
    Ok(())
}

/// Row-major 2D grid of values.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Clone> Raster<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

impl<T> Raster<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self, RasterError> {
        if data.len() != width * height {
            return Err(RasterError::BadLength {
                len: data.len(),
                width,
                height,
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn get_mut(&mut self, x: usize, y: usize) -> &mut T {
        let w = self.width;
        &mut self.data[y * w + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: T) {
        let w = self.width;
        self.data[y * w + x] = value;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Raster<U> {
        Raster {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }

    /// Element-wise combination; panics on a shape mismatch.
    pub fn zip_with<U, V>(&self, other: &Raster<U>, mut f: impl FnMut(&T, &U) -> V) -> Raster<V> {
        assert_eq!(self.shape(), other.shape(), "raster shape mismatch");
        Raster {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(a, b)| f(a, b)).collect(),
        }
    }
}

/// RGB image with channels nominally in `[0, 1]`.
pub type Image = Raster<[f64; 3]>;

/// Boolean mask; for dynamic masks `true` marks dynamic (flame) pixels.
pub type Mask = Raster<bool>;

/// Scalar raster without validity, used for alpha maps.
pub type ScalarMap = Raster<f64>;

/// Rec. 709 luma of a linear RGB triple.
#[inline]
pub fn luminance(rgb: &[f64; 3]) -> f64 {
    0.2126 * rgb[0] + 0.7152 * rgb[1] + 0.0722 * rgb[2]
}

pub fn count_true(mask: &Mask) -> usize {
    mask.as_slice().iter().filter(|&&m| m).count()
}

/// Depth raster in meters with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub values: Raster<f64>,
    pub valid: Mask,
}

impl DepthMap {
    /// Builds a depth map, marking non-finite or non-positive values invalid.
    pub fn new(values: Raster<f64>) -> Self {
        let valid = values.map(|&v| v.is_finite() && v > 0.0);
        Self { values, valid }
    }

    pub fn with_mask(values: Raster<f64>, valid: Mask) -> Result<Self, RasterError> {
        check_same_shape(values.shape(), valid.shape())?;
        let valid = Raster::from_fn(values.width(), values.height(), |x, y| {
            let v = *values.get(x, y);
            *valid.get(x, y) && v.is_finite() && v > 0.0
        });
        Ok(Self { values, valid })
    }

    pub fn invalid(width: usize, height: usize) -> Self {
        Self {
            values: Raster::filled(width, height, 0.0),
            valid: Raster::filled(width, height, false),
        }
    }

    pub fn constant(width: usize, height: usize, depth: f64) -> Self {
        Self::new(Raster::filled(width, height, depth))
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.values.width()
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.values.height()
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }

    /// Depth at `(x, y)` when valid.
    #[inline]
    pub fn at(&self, x: usize, y: usize) -> Option<f64> {
        if *self.valid.get(x, y) {
            Some(*self.values.get(x, y))
        } else {
            None
        }
    }

    pub fn valid_count(&self) -> usize {
        count_true(&self.valid)
    }
}

/// Dense optical flow in pixels per frame, with validity.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowMap {
    pub flow: Raster<[f64; 2]>,
    pub valid: Mask,
}

impl FlowMap {
    pub fn new(flow: Raster<[f64; 2]>, valid: Mask) -> Result<Self, RasterError> {
        check_same_shape(flow.shape(), valid.shape())?;
        let valid = Raster::from_fn(flow.width(), flow.height(), |x, y| {
            let f = flow.get(x, y);
            *valid.get(x, y) && f[0].is_finite() && f[1].is_finite()
        });
        Ok(Self { flow, valid })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            flow: Raster::filled(width, height, [0.0; 2]),
            valid: Raster::filled(width, height, true),
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.flow.width()
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.flow.height()
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        self.flow.shape()
    }

    /// Bilinear flow sample at sub-pixel position `(u, v)`.
    ///
    /// Every neighbor with non-zero bilinear weight must be in bounds and
    /// valid; otherwise the sample is rejected.
    pub fn sample_bilinear(&self, u: f64, v: f64) -> Option<[f64; 2]> {
        let (w, h) = self.shape();
        if !(u >= 0.0 && v >= 0.0 && u <= (w - 1) as f64 && v <= (h - 1) as f64) {
            return None;
        }
        let x0 = u.floor() as usize;
        let y0 = v.floor() as usize;
        let fx = u - x0 as f64;
        let fy = v - y0 as f64;
        let mut acc = [0.0; 2];
        for (dy, wy) in [(0usize, 1.0 - fy), (1, fy)] {
            if wy == 0.0 {
                continue;
            }
            for (dx, wx) in [(0usize, 1.0 - fx), (1, fx)] {
                if wx == 0.0 {
                    continue;
                }
                let (x, y) = (x0 + dx, y0 + dy);
                if x >= w || y >= h || !*self.valid.get(x, y) {
                    return None;
                }
                let f = self.flow.get(x, y);
                acc[0] += wx * wy * f[0];
                acc[1] += wx * wy * f[1];
            }
        }
        Some(acc)
    }
}

/// Nearest pixel to a sub-pixel position, if inside the raster.
#[inline]
pub fn nearest_pixel(u: f64, v: f64, width: usize, height: usize) -> Option<(usize, usize)> {
    let x = u.round();
    let y = v.round();
    if x < 0.0 || y < 0.0 || x > (width - 1) as f64 || y > (height - 1) as f64 {
        return None;
    }
    Some((x as usize, y as usize))
}
