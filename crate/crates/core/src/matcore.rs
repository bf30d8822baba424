//! Strided row-major `f32` matrices.
//!
//! A [`Mat32`] stores `rows` rows of `cols` values, with consecutive rows
//! `stride` elements apart. Elements between `cols` and `stride` in a row are
//! padding: they are never read by any operation in this crate. Every
//! operation here returns a fresh, compact (`stride == cols`) matrix.

use std::fmt;

use crate::error::{shape_err, Error, Result};

#[derive(Clone, PartialEq)]
pub struct Mat32 {
    rows: usize,
    cols: usize,
    stride: usize,
    data: Vec<f32>,
}

impl Mat32 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f32) -> Self {
        Mat32 {
            rows,
            cols,
            stride: cols,
            data: vec![value; rows * cols],
        }
    }

    /// A zeroed matrix whose rows are `stride` elements apart.
    pub fn zeros_with_stride(rows: usize, cols: usize, stride: usize) -> Result<Self> {
        if stride < cols {
            return Err(Error::Invalid(format!(
                "stride {stride} is smaller than cols {cols}"
            )));
        }
        Ok(Mat32 {
            rows,
            cols,
            stride,
            data: vec![0.0; rows * stride],
        })
    }

    /// Wrap a compact row-major buffer.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Self::from_strided(rows, cols, cols, data)
    }

    pub fn from_strided(rows: usize, cols: usize, stride: usize, data: Vec<f32>) -> Result<Self> {
        if stride < cols {
            return Err(Error::Invalid(format!(
                "stride {stride} is smaller than cols {cols}"
            )));
        }
        if data.len() < rows * stride {
            return Err(Error::Invalid(format!(
                "buffer of {} elements cannot hold {rows} rows of stride {stride}",
                data.len()
            )));
        }
        Ok(Mat32 {
            rows,
            cols,
            stride,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat32 {
            rows,
            cols,
            stride: cols,
            data,
        }
    }

    /// Build from nested rows; all rows must have equal length.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(shape_err(
                    "from_rows",
                    format!("row {i} has {} elements, expected {cols}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn stride(&self) -> usize {
        self.stride
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.rows == 0 || self.cols == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.stride + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.stride + j] = v;
    }

    /// The `cols` live elements of row `i`.
    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        let s = i * self.stride;
        &self.data[s..s + self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let s = i * self.stride;
        &mut self.data[s..s + self.cols]
    }

    pub fn rows_iter(&self) -> impl Iterator<Item = &[f32]> + '_ {
        (0..self.rows).map(move |i| self.row(i))
    }

    /// Raw backing buffer, padding included.
    pub fn raw(&self) -> &[f32] {
        &self.data
    }

    pub fn raw_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Compact row-major copy of the live elements.
    pub fn to_vec(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.len());
        for r in self.rows_iter() {
            out.extend_from_slice(r);
        }
        out
    }

    /// Same values, re-laid out with a different stride.
    pub fn with_stride(&self, stride: usize) -> Result<Mat32> {
        let mut out = Mat32::zeros_with_stride(self.rows, self.cols, stride)?;
        for i in 0..self.rows {
            out.row_mut(i).copy_from_slice(self.row(i));
        }
        Ok(out)
    }

    /// Copy of rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Mat32> {
        if start > end || end > self.rows {
            return Err(Error::Bounds(format!(
                "row range {start}..{end} outside 0..{}",
                self.rows
            )));
        }
        let mut data = Vec::with_capacity((end - start) * self.cols);
        for i in start..end {
            data.extend_from_slice(self.row(i));
        }
        Mat32::from_vec(end - start, self.cols, data)
    }

    pub fn transpose(&self) -> Mat32 {
        Mat32::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn all_finite(&self) -> bool {
        self.rows_iter().all(|r| r.iter().all(|v| v.is_finite()))
    }

    pub fn same_shape(&self, other: &Mat32) -> bool {
        self.shape() == other.shape()
    }

    fn map(&self, f: impl Fn(f32) -> f32) -> Mat32 {
        let mut data = Vec::with_capacity(self.len());
        for r in self.rows_iter() {
            data.extend(r.iter().map(|&v| f(v)));
        }
        Mat32 {
            rows: self.rows,
            cols: self.cols,
            stride: self.cols,
            data,
        }
    }

    fn zip_map(&self, other: &Mat32, op: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Mat32> {
        check_same(op, self, other)?;
        let mut data = Vec::with_capacity(self.len());
        for (ra, rb) in self.rows_iter().zip(other.rows_iter()) {
            data.extend(ra.iter().zip(rb).map(|(&a, &b)| f(a, b)));
        }
        Ok(Mat32 {
            rows: self.rows,
            cols: self.cols,
            stride: self.cols,
            data,
        })
    }
}

impl fmt::Debug for Mat32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Mat32 {}x{} (stride {}) ", self.rows, self.cols, self.stride)?;
        if self.len() <= 64 {
            f.debug_list().entries(self.rows_iter()).finish()
        } else {
            f.write_str("[..]")
        }
    }
}

fn check_same(op: &'static str, a: &Mat32, b: &Mat32) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(shape_err(
            op,
            format!("{}x{} vs {}x{}", a.rows, a.cols, b.rows, b.cols),
        ))
    }
}

/// Elementwise (Hadamard) product.
pub fn elemwise_mul(a: &Mat32, b: &Mat32) -> Result<Mat32> {
    a.zip_map(b, "elemwise_mul", |x, y| x * y)
}

pub fn tanh_map(a: &Mat32) -> Mat32 {
    a.map(f32::tanh)
}

/// `1 - a²` elementwise, the derivative of `tanh` expressed through its output.
pub fn ones_minus_sq(a: &Mat32) -> Mat32 {
    a.map(|v| 1.0 - v * v)
}

/// `alpha * x + y`.
pub fn axpy_mat(alpha: f32, x: &Mat32, y: &Mat32) -> Result<Mat32> {
    x.zip_map(y, "axpy_mat", |a, b| alpha * a + b)
}

/// `a - b`.
pub fn sub_mat(a: &Mat32, b: &Mat32) -> Result<Mat32> {
    a.zip_map(b, "sub_mat", |x, y| x - y)
}

/// Inner product of the live elements, accumulated in `f64`.
pub fn dot_flat(a: &Mat32, b: &Mat32) -> Result<f64> {
    check_same("dot_flat", a, b)?;
    let mut acc = 0.0f64;
    for (ra, rb) in a.rows_iter().zip(b.rows_iter()) {
        for (&x, &y) in ra.iter().zip(rb) {
            acc += x as f64 * y as f64;
        }
    }
    Ok(acc)
}

/// `f64` inner product of two flat vectors.
pub fn dot_vec(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}
