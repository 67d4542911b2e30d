//! Dense `h × w × c` real arrays in row-major, channel-interleaved order.
//!
//! Every image-like quantity in the crate (views, depth, disparity, blur
//! maps) is an [`Image`]; single-channel maps simply use `channels == 1`.

use crate::error::{LdpError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(LdpError::shape(format!(
                "buffer of {} values does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
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
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = self.index(y, x, 0);
        &self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.shape() == other.shape()
    }

    pub fn ensure_same_shape(&self, other: &Image, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(LdpError::domain(format!(
                "{what}: shape {:?} does not match {:?}",
                self.shape(),
                other.shape()
            )))
        }
    }

    /// Mirror about the vertical axis (column `j` ↦ `w − 1 − j`).
    pub fn hflip(&self) -> Image {
        let mut out = Image::zeros(self.height, self.width, self.channels);
        for y in 0..self.height {
            for x in 0..self.width {
                let src = self.index(y, self.width - 1 - x, 0);
                let dst = out.index(y, x, 0);
                out.data[dst..dst + self.channels]
                    .copy_from_slice(&self.data[src..src + self.channels]);
            }
        }
        out
    }

    /// Width-axis concatenation `[self | right]`.
    pub fn hconcat(&self, right: &Image) -> Result<Image> {
        if self.height != right.height || self.channels != right.channels {
            return Err(LdpError::domain(format!(
                "cannot concatenate {:?} and {:?} along width",
                self.shape(),
                right.shape()
            )));
        }
        let width = self.width + right.width;
        let mut data = Vec::with_capacity(self.height * width * self.channels);
        let lrow = self.width * self.channels;
        let rrow = right.width * right.channels;
        for y in 0..self.height {
            data.extend_from_slice(&self.data[y * lrow..(y + 1) * lrow]);
            data.extend_from_slice(&right.data[y * rrow..(y + 1) * rrow]);
        }
        Image::new(self.height, width, self.channels, data)
    }

    /// Channel-axis concatenation.
    pub fn cconcat(&self, other: &Image) -> Result<Image> {
        if self.height != other.height || self.width != other.width {
            return Err(LdpError::domain(format!(
                "cannot concatenate {:?} and {:?} along channels",
                self.shape(),
                other.shape()
            )));
        }
        let channels = self.channels + other.channels;
        let mut data = Vec::with_capacity(self.pixel_count() * channels);
        for y in 0..self.height {
            for x in 0..self.width {
                data.extend_from_slice(self.pixel(y, x));
                data.extend_from_slice(other.pixel(y, x));
            }
        }
        Image::new(self.height, self.width, channels, data)
    }

    pub fn crop(&self, y0: usize, x0: usize, height: usize, width: usize) -> Result<Image> {
        if y0 + height > self.height || x0 + width > self.width {
            return Err(LdpError::domain(format!(
                "crop {height}x{width}@({y0},{x0}) outside {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(height * width * self.channels);
        for y in y0..y0 + height {
            let start = self.index(y, x0, 0);
            data.extend_from_slice(&self.data[start..start + width * self.channels]);
        }
        Image::new(height, width, self.channels, data)
    }

    /// Zero-pad on the bottom and right to the given size.
    pub fn pad_to(&self, height: usize, width: usize) -> Image {
        let mut out = Image::zeros(height.max(self.height), width.max(self.width), self.channels);
        for y in 0..self.height {
            let src = self.index(y, 0, 0);
            let dst = out.index(y, 0, 0);
            out.data[dst..dst + self.width * self.channels]
                .copy_from_slice(&self.data[src..src + self.width * self.channels]);
        }
        out
    }

    /// Replicate-pad on the bottom and right to the given size.
    pub fn pad_edge_to(&self, height: usize, width: usize) -> Image {
        let (h, w) = (height.max(self.height), width.max(self.width));
        Image::from_fn(h, w, self.channels, |y, x, c| {
            self.get(y.min(self.height - 1), x.min(self.width - 1), c)
        })
    }

    pub fn channel(&self, c: usize) -> Image {
        Image::from_fn(self.height, self.width, 1, |y, x, _| self.get(y, x, c))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Image, f: impl Fn(f64, f64) -> f64) -> Result<Image> {
        self.ensure_same_shape(other, "elementwise op")?;
        Ok(Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn clamp01(&self) -> Image {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        assert!(self.same_shape(other), "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Rec. 601 luma of a 3-channel image.
    pub fn luma(&self) -> Result<Image> {
        if self.channels != 3 {
            return Err(LdpError::domain(format!(
                "luma needs 3 channels, got {}",
                self.channels
            )));
        }
        Ok(Image::from_fn(self.height, self.width, 1, |y, x, _| {
            let p = self.pixel(y, x);
            0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
        }))
    }
}
