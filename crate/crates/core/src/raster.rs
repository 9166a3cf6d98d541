//! Pixel containers shared by every stage of the pipeline.
//!
//! Images are stored planar (channel-major), values nominally in `[-1, 1]`.
//! Masks are single-plane with values in `[0, 1]`.

use crate::error::{ensure_shape, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        ensure_shape!(
            data.len() == channels * height * width,
            "buffer of {} values cannot hold {channels}x{height}x{width}",
            data.len()
        );
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn same_dims(&self, other: &ImageTensor) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    pub fn ensure_same_dims(&self, other: &ImageTensor, what: &str) -> Result<()> {
        ensure_shape!(
            self.same_dims(other),
            "{what}: {}x{}x{} vs {}x{}x{}",
            self.channels,
            self.height,
            self.width,
            other.channels,
            other.height,
            other.width
        );
        Ok(())
    }

    pub fn ensure_mask_dims(&self, mask: &AnomalyMask, what: &str) -> Result<()> {
        ensure_shape!(
            self.height == mask.height() && self.width == mask.width(),
            "{what}: image is {}x{}, mask is {}x{}",
            self.height,
            self.width,
            mask.height(),
            mask.width()
        );
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Self {
        self.map(|v| v.clamp(lo, hi))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &ImageTensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Rotates every plane counter-clockwise by `quarters` × 90°.
    pub fn rotate90(&self, quarters: usize) -> Self {
        let q = quarters % 4;
        let (h, w) = (self.height, self.width);
        let (nh, nw) = if q.is_multiple_of(2) { (h, w) } else { (w, h) };
        let mut out = Self::zeros(self.channels, nh, nw);
        for c in 0..self.channels {
            for y in 0..nh {
                for x in 0..nw {
                    let (sy, sx) = rotate_source(q, y, x, h, w);
                    out.set(c, y, x, self.get(c, sy, sx));
                }
            }
        }
        out
    }
}

/// Source coordinate for output `(y, x)` of a counter-clockwise rotation.
fn rotate_source(q: usize, y: usize, x: usize, h: usize, w: usize) -> (usize, usize) {
    match q {
        0 => (y, x),
        1 => (x, w - 1 - y),
        2 => (h - 1 - y, w - 1 - x),
        _ => (h - 1 - x, y),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMask {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl AnomalyMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self::filled(height, width, 1.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        ensure_shape!(
            data.len() == height * width,
            "buffer of {} values cannot hold {height}x{width} mask",
            data.len()
        );
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn same_dims(&self, other: &AnomalyMask) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn ensure_same_dims(&self, other: &AnomalyMask, what: &str) -> Result<()> {
        ensure_shape!(
            self.same_dims(other),
            "{what}: {}x{} vs {}x{}",
            self.height,
            self.width,
            other.height,
            other.width
        );
        Ok(())
    }

    /// `1 - M` pointwise.
    pub fn inverse(&self) -> Self {
        Self {
            data: self.data.iter().map(|v| 1.0 - v).collect(),
            ..*self
        }
    }

    /// Number of pixels with a nonzero value.
    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0.0).count()
    }

    pub fn area_fraction(&self) -> f64 {
        self.area() as f64 / self.data.len().max(1) as f64
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }

    pub fn rotate90(&self, quarters: usize) -> Self {
        let q = quarters % 4;
        let (h, w) = (self.height, self.width);
        let (nh, nw) = if q.is_multiple_of(2) { (h, w) } else { (w, h) };
        Self::from_fn(nh, nw, |y, x| {
            let (sy, sx) = rotate_source(q, y, x, h, w);
            self.get(sy, sx)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotation_round_trips() {
        let img = ImageTensor::from_fn(2, 3, 5, |c, y, x| (c * 100 + y * 10 + x) as f64);
        for q in 0..4 {
            let r = img.rotate90(q);
            assert_eq!(r.rotate90(4 - q), img);
        }
        let r = img.rotate90(1);
        assert_eq!((r.height(), r.width()), (5, 3));
        // counter-clockwise: top-right corner moves to top-left
        assert_eq!(r.get(0, 0, 0), img.get(0, 0, 4));
    }

    #[test]
    fn inverse_mask_is_complement() {
        let m = AnomalyMask::from_fn(4, 4, |y, x| ((y + x) % 3) as f64 / 2.0);
        let inv = m.inverse();
        for (a, b) in m.data().iter().zip(inv.data()) {
            assert_eq!(a + b, 1.0);
        }
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(ImageTensor::from_vec(3, 2, 2, vec![0.0; 11]).is_err());
        assert!(AnomalyMask::from_vec(2, 2, vec![0.0; 5]).is_err());
    }
}
