//! Dense float grids, validity masks and the on-disk sample container.
//!
//! Grids are row-major and channel-last: the value of channel `c` at pixel
//! `(row, col)` lives at `(row * width + col) * channels + c`. Pixel
//! coordinates used by the geometry code are `(u, v) = (col, row)`.

mod container;

pub use container::{
    add_fields, read_grid, read_mask, read_meta, read_sample, write_grid, write_mask, write_sample, Meta, SampleRecord,
    SfKind, META_FILE,
};

use crate::error::{Error, Result};

/// An `height x width x channels` grid of 32-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl FieldGrid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if !(1..=3).contains(&channels) {
            return Err(Error::Config(format!("grids hold 1, 2 or 3 channels, got {channels}")));
        }
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(Error::ShapeMismatch {
                field: "grid".into(),
                expected,
                found: data.len(),
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::new(height, width, channels, vec![0.0; height * width * channels])
            .expect("channel count must be 1, 2 or 3")
    }

    /// Builds a grid by evaluating `f(row, col, out)` for every pixel.
    pub fn from_fn(height: usize, width: usize, channels: usize, mut f: impl FnMut(usize, usize, &mut [f32])) -> Self {
        let mut grid = Self::zeros(height, width, channels);
        for row in 0..height {
            for col in 0..width {
                f(row, col, grid.at_mut(row, col));
            }
        }
        grid
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn len_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    #[inline]
    pub fn at_mut(&mut self, row: usize, col: usize) -> &mut [f32] {
        let start = (row * self.width + col) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    /// Pixel `index` (row-major) as an `f64` 3-vector; panics unless `channels == 3`.
    #[inline]
    pub fn point(&self, index: usize) -> nalgebra::Vector3<f64> {
        assert_eq!(self.channels, 3, "point access needs a 3-channel grid");
        let p = &self.data[index * 3..index * 3 + 3];
        nalgebra::Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64)
    }

    #[inline]
    pub fn set_point(&mut self, index: usize, p: &nalgebra::Vector3<f64>) {
        assert_eq!(self.channels, 3, "point access needs a 3-channel grid");
        let out = &mut self.data[index * 3..index * 3 + 3];
        out[0] = p.x as f32;
        out[1] = p.y as f32;
        out[2] = p.z as f32;
    }

    /// Extracts a single channel as a 1-channel grid.
    pub fn channel(&self, c: usize) -> FieldGrid {
        assert!(c < self.channels);
        let data = self.data.chunks_exact(self.channels).map(|px| px[c]).collect();
        FieldGrid {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }

    pub fn same_size(&self, other_h: usize, other_w: usize) -> bool {
        self.height == other_h && self.width == other_w
    }

    pub fn scaled(&self, s: f32) -> FieldGrid {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= s);
        out
    }

    /// Rejects the first NaN/Inf, naming `field`.
    pub fn check_finite(&self, field: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFinite {
                field: field.to_string(),
                index,
            }),
            None => Ok(()),
        }
    }

    /// Checks the grid is `height x width x channels`, naming `field` on failure.
    pub fn check_shape(&self, field: &str, height: usize, width: usize, channels: usize) -> Result<()> {
        if self.height != height || self.width != width || self.channels != channels {
            return Err(Error::invariant(
                field,
                format!(
                    "shape {}x{}x{} does not match expected {}x{}x{}",
                    self.height, self.width, self.channels, height, width, channels
                ),
            ));
        }
        Ok(())
    }
}

/// One byte per pixel, 1 for valid and 0 for invalid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidityMask {
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl ValidityMask {
    pub fn new(height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::ShapeMismatch {
                field: "mask".into(),
                expected: height * width,
                found: bits.len(),
            });
        }
        if let Some(i) = bits.iter().position(|&b| b > 1) {
            return Err(Error::invariant(
                "mask",
                format!("value {} at flat index {i} is not 0 or 1", bits[i]),
            ));
        }
        Ok(Self { height, width, bits })
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![1; height * width],
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for row in 0..height {
            for col in 0..width {
                bits.push(f(row, col) as u8);
            }
        }
        Self { height, width, bits }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col] != 0
    }

    #[inline]
    pub fn is_valid(&self, index: usize) -> bool {
        self.bits[index] != 0
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, valid: bool) {
        self.bits[row * self.width + col] = valid as u8;
    }

    #[inline]
    pub fn set_index(&mut self, index: usize, valid: bool) {
        self.bits[index] = valid as u8;
    }

    pub fn count_valid(&self) -> usize {
        self.bits.iter().filter(|&&b| b != 0).count()
    }

    /// Elementwise AND; shapes must match.
    pub fn and(&self, other: &ValidityMask) -> Result<ValidityMask> {
        self.check_shape("mask", other.height, other.width)?;
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| a & b).collect();
        Ok(ValidityMask {
            height: self.height,
            width: self.width,
            bits,
        })
    }

    pub fn check_shape(&self, field: &str, height: usize, width: usize) -> Result<()> {
        if self.height != height || self.width != width {
            return Err(Error::invariant(
                field,
                format!(
                    "mask shape {}x{} does not match grid {}x{}",
                    self.height, self.width, height, width
                ),
            ));
        }
        Ok(())
    }
}
