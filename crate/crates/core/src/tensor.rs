//! Dense row-major `f64` tensors.
//!
//! Feature maps are stored channel-major as `[C, H, W]`; attention code views
//! them as `[heads, C / heads, H * W]`. Batch size is always one, so there is
//! no batch axis.

use std::fmt;

use crate::error::{ensure, Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        ensure!(
            n == data.len(),
            Error::Shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                n,
                data.len()
            ))
        );
        Ok(Self { shape, data })
    }

    /// Like [`Tensor::new`] for internal call sites where the length is known to match.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(C, H, W)` of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::Shape(format!("expected [C, H, W], got {:?}", self.shape))),
        }
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn at3(&self, c: usize, y: usize, x: usize) -> f64 {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        ensure!(
            shape.iter().product::<usize>() == self.data.len(),
            Error::Shape(format!("cannot reshape {:?} to {:?}", self.shape, shape))
        );
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn check_same_shape(&self, other: &Tensor) -> Result<()> {
        ensure!(
            self.shape == other.shape,
            Error::Shape(format!("{:?} vs {:?}", self.shape, other.shape))
        );
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn rms(&self) -> f64 {
        (self.data.iter().map(|v| v * v).sum::<f64>() / self.data.len() as f64).sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// One channel of a `[C, H, W]` tensor as a slice.
    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.shape[1] * self.shape[2];
        &self.data[c * plane..(c + 1) * plane]
    }

    /// Spatial mean of every channel, `[C, H, W] -> [C]`.
    pub fn channel_means(&self) -> Vec<f64> {
        let c = self.shape[0];
        (0..c)
            .map(|i| {
                let ch = self.channel(i);
                ch.iter().sum::<f64>() / ch.len() as f64
            })
            .collect()
    }

    /// Block-averages a `[C, H, W]` tensor by `factor` along both spatial axes.
    pub fn area_downsample(&self, factor: usize) -> Result<Self> {
        let (c, h, w) = self.dims3()?;
        ensure!(
            factor > 0 && h % factor == 0 && w % factor == 0,
            Error::Shape(format!("{h}x{w} not divisible by {factor}"))
        );
        if factor == 1 {
            return Ok(self.clone());
        }
        let (oh, ow) = (h / factor, w / factor);
        let norm = 1.0 / (factor * factor) as f64;
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            let src = self.channel(ch);
            let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
            for y in 0..h {
                let row = &src[y * w..(y + 1) * w];
                let drow = &mut dst[(y / factor) * ow..(y / factor + 1) * ow];
                for (x, v) in row.iter().enumerate() {
                    drow[x / factor] += v;
                }
            }
            dst.iter_mut().for_each(|v| *v *= norm);
        }
        Ok(Self::from_parts(vec![c, oh, ow], out))
    }

    /// Reflection-pads the spatial axes of a `[C, H, W]` tensor at the bottom and right.
    pub fn pad_reflect(&self, pad_h: usize, pad_w: usize) -> Result<Self> {
        let (c, h, w) = self.dims3()?;
        ensure!(
            (pad_h == 0 || pad_h < h) && (pad_w == 0 || pad_w < w),
            Error::Shape(format!("cannot reflect-pad {h}x{w} by {pad_h}x{pad_w}"))
        );
        let (nh, nw) = (h + pad_h, w + pad_w);
        let reflect = |i: usize, n: usize| if i < n { i } else { 2 * (n - 1) - i };
        let mut out = Vec::with_capacity(c * nh * nw);
        for ch in 0..c {
            for y in 0..nh {
                let sy = reflect(y, h);
                for x in 0..nw {
                    out.push(self.at3(ch, sy, reflect(x, w)));
                }
            }
        }
        Ok(Self::from_parts(vec![c, nh, nw], out))
    }

    /// Top-left `h x w` crop of a `[C, H, W]` tensor.
    pub fn crop(&self, h: usize, w: usize) -> Result<Self> {
        let (c, sh, sw) = self.dims3()?;
        ensure!(
            h <= sh && w <= sw,
            Error::Shape(format!("crop {h}x{w} exceeds {sh}x{sw}"))
        );
        let mut out = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                let start = (ch * sh + y) * sw;
                out.extend_from_slice(&self.data[start..start + w]);
            }
        }
        Ok(Self::from_parts(vec![c, h, w], out))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Self {
        self.map(|v| v.clamp(lo, hi))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_length() {
        assert!(Tensor::new([2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new([2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn area_downsample_averages_blocks() {
        let t = Tensor::new([1, 2, 4], vec![1., 3., 5., 7., 1., 3., 5., 7.]).unwrap();
        let d = t.area_downsample(2).unwrap();
        assert_eq!(d.shape(), &[1, 1, 2]);
        assert_eq!(d.data(), &[2.0, 6.0]);
        assert!(t.area_downsample(3).is_err());
    }

    #[test]
    fn reflect_pad_then_crop_is_identity() {
        let t = Tensor::from_fn([2, 5, 6], |i| i as f64);
        let p = t.pad_reflect(3, 2).unwrap();
        assert_eq!(p.shape(), &[2, 8, 8]);
        assert_eq!(p.at3(1, 5, 0), t.at3(1, 3, 0));
        assert_eq!(p.at3(0, 0, 7), t.at3(0, 0, 3));
        assert_eq!(p.crop(5, 6).unwrap(), t);
    }
}
