use std::fmt;

use crate::error::{Error, Result};

/// Row-major matrix of `f64`.
///
/// Every constructor and arithmetic operation checks that the stored values
/// are finite, so a `DenseMatrix` never carries NaN or infinity.
#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        check_finite(&data)?;
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from equally long rows. An empty slice gives `0 x 0`.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on a zero chunk size
        (0..self.rows).map(move |i| self.row(i))
    }

    /// Crate-internal mutable access; callers must keep values finite.
    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub(crate) fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Sets one entry. Rejects non-finite values.
    pub fn set(&mut self, i: usize, j: usize, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite value at ({i}, {j})")));
        }
        self.data[i * self.cols + j] = value;
        Ok(())
    }

    /// Standard product `self * other`.
    ///
    /// Each output element is accumulated in increasing inner index order
    /// starting from zero, so results are reproducible bit for bit.
    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in a_row.iter().enumerate() {
                let b_row = other.row(k);
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        check_finite(&out.data)?;
        Ok(out)
    }

    /// `self * other^T`, i.e. all pairwise row dot products.
    pub fn matmul_transposed(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.cols {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by transpose of {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = DenseMatrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        check_finite(&out.data)?;
        Ok(out)
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Selects rows by index, in the given order.
    pub fn gather_rows(&self, indices: &[usize]) -> DenseMatrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        DenseMatrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Stacks `self` on top of `other`.
    pub fn vstack(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.cols && self.rows > 0 && other.rows > 0 {
            return Err(Error::Shape(format!(
                "cannot stack {} columns on {} columns",
                other.cols, self.cols
            )));
        }
        let cols = if self.rows > 0 { self.cols } else { other.cols };
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(DenseMatrix {
            rows: self.rows + other.rows,
            cols,
            data,
        })
    }

    pub fn scale(&mut self, factor: f64) -> Result<()> {
        self.data.iter_mut().for_each(|x| *x *= factor);
        check_finite(&self.data)
    }

    pub fn add_assign(&mut self, other: &DenseMatrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "cannot add {}x{} to {}x{}",
                other.rows, other.cols, self.rows, self.cols
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        check_finite(&self.data)
    }

    /// Sum of squared entries.
    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    /// Every row rescaled to unit L2 norm.
    pub fn normalize_rows(&self) -> Result<DenseMatrix> {
        let mut out = self.clone();
        for i in 0..self.rows {
            let unit = l2_normalize(self.row(i))?;
            out.row_mut(i).copy_from_slice(&unit);
        }
        Ok(out)
    }
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for r in self.iter_rows() {
            writeln!(f, "  {r:?}")?;
        }
        write!(f, "]")
    }
}

pub(crate) fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|x| !x.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::Numeric(format!(
            "non-finite value {} at flat index {i}",
            values[i]
        ))),
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_sq(v: &[f64]) -> f64 {
    dot(v, v)
}

/// Smallest norm accepted by [`l2_normalize`]. Below it the input is
/// rejected instead of regularised, which keeps the Jacobian exact.
pub const MIN_NORM: f64 = 1e-12;

fn checked_norm(v: &[f64]) -> Result<f64> {
    let n = norm_sq(v).sqrt();
    if !n.is_finite() {
        return Err(Error::Numeric("vector norm is not finite".into()));
    }
    if n < MIN_NORM {
        return Err(Error::Degenerate(format!(
            "cannot normalize vector with norm {n:e}"
        )));
    }
    Ok(n)
}

/// Projects `v` onto the unit sphere.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = checked_norm(v)?;
    Ok(v.iter().map(|x| x / n).collect())
}

/// Vector-Jacobian product of [`l2_normalize`] at `v`.
///
/// The Jacobian is `(I - u u^T) / |v|` with `u = v / |v|`; it is symmetric,
/// so this returns `(g - u <u, g>) / |v|`.
pub fn l2_normalize_backward(v: &[f64], grad_out: &[f64]) -> Result<Vec<f64>> {
    if v.len() != grad_out.len() {
        return Err(Error::Shape(format!(
            "gradient has length {}, vector has length {}",
            grad_out.len(),
            v.len()
        )));
    }
    let n = checked_norm(v)?;
    let radial: f64 = v.iter().zip(grad_out).map(|(x, g)| x * g).sum::<f64>() / n;
    Ok(v
        .iter()
        .zip(grad_out)
        .map(|(x, g)| (g - radial * x / n) / n)
        .collect())
}
