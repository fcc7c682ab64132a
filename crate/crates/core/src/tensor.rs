//! Dense row-major f32 containers (NCHW without the batch axis).

use crate::error::{Error, Result};

/// `(c, h, w)` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    dims: [usize; 3],
    data: Vec<f32>,
}

impl Tensor3 {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor3 {
            dims: [c, h, w],
            data: vec![0.0; c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != c * h * w {
            return Err(Error::DimMismatch(format!(
                "tensor ({c}, {h}, {w}) needs {} elements, got {}",
                c * h * w,
                data.len()
            )));
        }
        Ok(Tensor3 { dims: [c, h, w], data })
    }

    pub fn from_fn(c: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(c * h * w);
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(ci, y, x));
                }
            }
        }
        Tensor3 { dims: [c, h, w], data }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.dims[0]
    }

    pub fn height(&self) -> usize {
        self.dims[1]
    }

    pub fn width(&self) -> usize {
        self.dims[2]
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    /// One spatial plane, `h * w` elements.
    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.dims[1] * self.dims[2];
        &self.data[c * plane..(c + 1) * plane]
    }
}

/// `(f, c, h, w)` filter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    dims: [usize; 4],
    data: Vec<f32>,
}

impl Tensor4 {
    pub fn zeros(f: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor4 {
            dims: [f, c, h, w],
            data: vec![0.0; f * c * h * w],
        }
    }

    pub fn from_vec(f: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != f * c * h * w {
            return Err(Error::DimMismatch(format!(
                "tensor ({f}, {c}, {h}, {w}) needs {} elements, got {}",
                f * c * h * w,
                data.len()
            )));
        }
        Ok(Tensor4 {
            dims: [f, c, h, w],
            data,
        })
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    #[inline]
    pub fn index(&self, f: usize, c: usize, y: usize, x: usize) -> usize {
        ((f * self.dims[1] + c) * self.dims[2] + y) * self.dims[3] + x
    }

    #[inline]
    pub fn get(&self, f: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(f, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, f: usize, c: usize, y: usize, x: usize, v: f32) {
        let i = self.index(f, c, y, x);
        self.data[i] = v;
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }
}

/// Row-major `rows x cols` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimMismatch(format!(
                "matrix {rows}x{cols} needs {} elements, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }
}

/// Element-wise relative error `|a - b| / max(|a|, |b|)`, 0 where both are 0.
pub fn max_relative_error(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let (x, y) = (x as f64, y as f64);
            let scale = x.abs().max(y.abs());
            if scale == 0.0 {
                0.0
            } else {
                (x - y).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor3::from_fn(2, 3, 4, |c, y, x| (c * 100 + y * 10 + x) as f32);
        assert_eq!(t.as_slice()[t.index(1, 2, 3)], 123.0);
        assert_eq!(t.as_slice()[4], 10.0);
        assert_eq!(t.channel(1)[0], 100.0);
        let mut f = Tensor4::zeros(2, 3, 2, 2);
        f.set(1, 2, 1, 0, 7.0);
        assert_eq!(f.as_slice()[((1 * 3 + 2) * 2 + 1) * 2], 7.0);
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor3::from_vec(1, 2, 2, vec![0.0; 3]).is_err());
        assert!(Tensor4::from_vec(1, 1, 2, 2, vec![0.0; 4]).is_ok());
        assert!(Matrix::from_vec(2, 3, vec![0.0; 5]).is_err());
    }

    #[test]
    fn relative_error() {
        assert_eq!(max_relative_error(&[0.0, 1.0], &[0.0, 1.0]), 0.0);
        assert!((max_relative_error(&[1.0], &[1.1]) - 0.1 / 1.1).abs() < 1e-6);
        assert_eq!(max_relative_error(&[0.0], &[1.0]), 1.0);
    }
}
