//! Dense vector and matrix primitives shared by every stage of the pipeline.
//!
//! Both types validate on construction (positive size, finite entries) and
//! are immutable afterwards, so they can be shared freely across threads.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms below this are treated as zero.
pub const ZERO_NORM: f64 = 1e-12;

/// A finite, non-empty vector of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyInput("vector has no entries".into()));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("vector"));
        }
        Ok(Vector(data))
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "zero-dimensional vector");
        Vector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Vector) -> Result<f64> {
        check_dim(self.dim(), other.dim())?;
        Ok(dot(&self.0, &other.0))
    }

    pub fn scale(&self, c: f64) -> Vector {
        Vector(self.0.iter().map(|x| x * c).collect())
    }

    /// Arithmetic mean of equally sized vectors.
    pub fn mean<'a>(items: impl IntoIterator<Item = &'a Vector>) -> Result<Vector> {
        let mut iter = items.into_iter();
        let first = iter
            .next()
            .ok_or_else(|| Error::EmptyInput("mean of zero vectors".into()))?;
        let mut acc = first.0.clone();
        let mut n = 1usize;
        for v in iter {
            check_dim(acc.len(), v.dim())?;
            for (a, b) in acc.iter_mut().zip(&v.0) {
                *a += b;
            }
            n += 1;
        }
        let inv = 1.0 / n as f64;
        acc.iter_mut().for_each(|a| *a *= inv);
        Ok(Vector(acc))
    }
}

impl TryFrom<Vec<f64>> for Vector {
    type Error = Error;

    fn try_from(data: Vec<f64>) -> Result<Self> {
        Vector::new(data)
    }
}

impl From<Vector> for Vec<f64> {
    fn from(v: Vector) -> Self {
        v.0
    }
}

/// Row-major dense matrix with finite entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatrixRepr", into = "MatrixRepr")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// On-disk form: `{"rows": R, "cols": C, "data": [[...], ...]}`.
#[derive(Serialize, Deserialize)]
struct MatrixRepr {
    rows: usize,
    cols: usize,
    data: Vec<Vec<f64>>,
}

impl TryFrom<MatrixRepr> for Matrix {
    type Error = Error;

    fn try_from(repr: MatrixRepr) -> Result<Self> {
        if repr.data.len() != repr.rows {
            return Err(Error::DimMismatch {
                expected: repr.rows,
                found: repr.data.len(),
            });
        }
        let m = Matrix::from_rows(repr.data)?;
        check_dim(repr.cols, m.cols)?;
        Ok(m)
    }
}

impl From<Matrix> for MatrixRepr {
    fn from(m: Matrix) -> Self {
        MatrixRepr {
            rows: m.rows,
            cols: m.cols,
            data: m.data.chunks(m.cols).map(<[f64]>::to_vec).collect(),
        }
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::EmptyInput(format!("{rows}x{cols} matrix")));
        }
        check_dim(rows * cols, data.len())?;
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("matrix"));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            check_dim(c, row.len())?;
            data.extend(row);
        }
        Matrix::new(r, c, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "empty matrix");
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_vector(&self, r: usize) -> Vector {
        Vector(self.row(r).to_vec())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Matrix {
            rows: self.cols,
            cols: self.rows,
            data: out,
        }
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        check_dim(self.cols, other.rows)?;
        let mut out = vec![0.0; self.rows * other.cols];
        for i in 0..self.rows {
            let out_row = &mut out[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(Matrix {
            rows: self.rows,
            cols: other.cols,
            data: out,
        })
    }

    pub fn scale(&self, c: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * c).collect(),
        }
    }

    /// `self += c * other`, elementwise.
    pub fn add_scaled(&mut self, other: &Matrix, c: f64) -> Result<()> {
        check_dim(self.rows, other.rows)?;
        check_dim(self.cols, other.cols)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }

    /// Largest absolute elementwise difference; `None` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Matrix) -> Option<f64> {
        (self.rows == other.rows && self.cols == other.cols).then(|| {
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        })
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimMismatch { expected, found })
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_normalize(v: &Vector) -> Result<Vector> {
    let n = v.norm();
    if n < ZERO_NORM {
        return Err(Error::ZeroVector);
    }
    Ok(Vector(v.0.iter().map(|x| x / n).collect()))
}

/// Cosine similarity computed as the dot product of the normalized inputs.
pub fn cosine_sim(a: &Vector, b: &Vector) -> Result<f64> {
    check_dim(a.dim(), b.dim())?;
    let a = l2_normalize(a)?;
    let b = l2_normalize(b)?;
    Ok(dot(&a.0, &b.0).clamp(-1.0, 1.0))
}

pub fn matvec(m: &Matrix, v: &Vector) -> Result<Vector> {
    check_dim(m.cols, v.dim())?;
    Ok(Vector(
        (0..m.rows).map(|r| dot(m.row(r), v.as_slice())).collect(),
    ))
}
