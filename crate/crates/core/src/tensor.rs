//! Dense row-major `f64` tensors and the small amount of linear algebra the
//! estimators and the toy trainer need.
//!
//! Every reduction accumulates left to right in index order, so results are
//! bit-reproducible for a fixed build.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

fn check_finite(data: &[f64], what: &str) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Numeric(format!(
            "{what}: non-finite value {} at flat index {i}",
            data[i]
        ))),
        None => Ok(()),
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::shape("tensor needs at least one dimension"));
        }
        if let Some(d) = shape.iter().position(|&d| d == 0) {
            return Err(Error::shape(format!("dimension {d} has size zero")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {numel} elements but {} were given",
                data.len()
            )));
        }
        check_finite(&data, "tensor construction")?;
        Ok(Tensor { shape, data })
    }

    /// 1-D tensor from a vector.
    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    /// 2-D tensor from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![0.0; numel])
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut t = Tensor::zeros(&[n, n])?;
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
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

    /// Mutable access to the flat buffer. Callers are responsible for keeping
    /// values finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    /// (rows, cols) of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(Error::shape(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn matvec(&self, v: &Tensor) -> Result<Tensor> {
        let (rows, cols) = self.dims2()?;
        if v.len() != cols {
            return Err(Error::shape(format!(
                "matvec: matrix has {cols} columns, vector has {} entries",
                v.len()
            )));
        }
        let out = matvec_slice(&self.data, rows, cols, &v.data);
        check_finite(&out, "matvec")?;
        Tensor::new(vec![rows], out)
    }

    /// `selfᵀ · v` without forming the transpose.
    pub fn matvec_transposed(&self, v: &Tensor) -> Result<Tensor> {
        let (rows, cols) = self.dims2()?;
        if v.len() != rows {
            return Err(Error::shape(format!(
                "transposed matvec: matrix has {rows} rows, vector has {} entries",
                v.len()
            )));
        }
        let out = matvec_transposed_slice(&self.data, rows, cols, &v.data);
        check_finite(&out, "transposed matvec")?;
        Tensor::new(vec![cols], out)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul: inner dimensions {k} and {k2} differ"
            )));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.data[i * k..(i + 1) * k];
            let dst = &mut out[i * n..(i + 1) * n];
            for (p, &a) in row.iter().enumerate() {
                let src = &other.data[p * n..(p + 1) * n];
                for (d, &b) in dst.iter_mut().zip(src) {
                    *d += a * b;
                }
            }
        }
        check_finite(&out, "matmul")?;
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    fn zip_with(&self, other: &Tensor, op: impl Fn(f64, f64) -> f64, name: &str) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{name}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        let data: Vec<f64> = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| op(a, b))
            .collect();
        check_finite(&data, name)?;
        Tensor::new(self.shape.clone(), data)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b, "add")
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a - b, "sub")
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a * b, "hadamard")
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        self.map(|v| v * c)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let data: Vec<f64> = self.data.iter().map(|&v| f(v)).collect();
        check_finite(&data, "map")?;
        Tensor::new(self.shape.clone(), data)
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::shape(format!(
                "dot: lengths {} and {} differ",
                self.len(),
                other.len()
            )));
        }
        Ok(dot(&self.data, &other.data))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Σ|x|, the entrywise ℓ1 norm.
    pub fn sum_abs(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }

    /// max |x|.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Entrywise ℓ2 (Frobenius) norm.
    pub fn norm_l2(&self) -> f64 {
        norm_l2(&self.data)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

pub(crate) fn norm_l2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn matvec_slice(m: &[f64], rows: usize, cols: usize, v: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|i| dot(&m[i * cols..(i + 1) * cols], v))
        .collect()
}

pub(crate) fn matvec_transposed_slice(m: &[f64], rows: usize, cols: usize, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for i in 0..rows {
        let vi = v[i];
        for (o, &a) in out.iter_mut().zip(&m[i * cols..(i + 1) * cols]) {
            *o += a * vi;
        }
    }
    out
}

/// A linear map given by its action and the action of its adjoint, on flat
/// row-major buffers.
pub trait LinearOperator: Sync {
    fn input_len(&self) -> usize;
    fn output_len(&self) -> usize;
    fn apply(&self, x: &[f64]) -> Vec<f64>;
    fn apply_adjoint(&self, y: &[f64]) -> Vec<f64>;
}

/// A dense matrix viewed as a [`LinearOperator`].
#[derive(Debug, Clone, Copy)]
pub struct MatrixOperator<'a> {
    matrix: &'a Tensor,
    rows: usize,
    cols: usize,
}

impl<'a> MatrixOperator<'a> {
    pub fn new(matrix: &'a Tensor) -> Result<Self> {
        let (rows, cols) = matrix.dims2()?;
        Ok(MatrixOperator { matrix, rows, cols })
    }
}

impl LinearOperator for MatrixOperator<'_> {
    fn input_len(&self) -> usize {
        self.cols
    }

    fn output_len(&self) -> usize {
        self.rows
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        matvec_slice(self.matrix.data(), self.rows, self.cols, x)
    }

    fn apply_adjoint(&self, y: &[f64]) -> Vec<f64> {
        matvec_transposed_slice(self.matrix.data(), self.rows, self.cols, y)
    }
}
