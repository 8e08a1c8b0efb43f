use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
///
/// Only rank 0 (scalars) and rank 2 (matrices) are produced by the graph
/// primitives; a batch of `N` feature vectors of width `d` is an `N x d` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::config(format!(
                "tensor shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::config(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Tensor::matrix(rows.len(), cols, data)
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

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// Row count of a matrix (1 for a scalar).
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Column count of a matrix (1 for a scalar).
    pub fn cols(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[1]
        } else {
            self.data.len()
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols().max(1))
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Selects rows by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor {
            shape: vec![idx.len(), c],
            data,
        }
    }

    /// Horizontal concatenation of two matrices with equal row counts.
    pub fn hconcat(&self, other: &Tensor) -> Result<Tensor> {
        if self.rows() != other.rows() {
            return Err(Error::config(format!(
                "hconcat row mismatch: {} vs {}",
                self.rows(),
                other.rows()
            )));
        }
        let cols = self.cols() + other.cols();
        let mut data = Vec::with_capacity(self.rows() * cols);
        for i in 0..self.rows() {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(other.row(i));
        }
        Tensor::matrix(self.rows(), cols, data)
    }

    /// Vertical concatenation of two matrices with equal column counts.
    pub fn vconcat(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols() != other.cols() {
            return Err(Error::config(format!(
                "vconcat column mismatch: {} vs {}",
                self.cols(),
                other.cols()
            )));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Tensor::matrix(self.rows() + other.rows(), self.cols(), data)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if !self.is_matrix() || !other.is_matrix() || self.cols() != other.rows() {
            return Err(Error::config(format!(
                "matmul shape mismatch: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let data = kernels::matmul(&self.data, &other.data, self.rows(), self.cols(), other.cols());
        Tensor::matrix(self.rows(), other.cols(), data)
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        Tensor {
            shape: vec![c, r],
            data: kernels::transpose(&self.data, r, c),
        }
    }

    /// Normalizes every row to unit Euclidean norm. Rows with norm at most
    /// `1e-12` are a domain error.
    pub fn normalize_rows(&self) -> Result<Tensor> {
        let mut out = self.clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let norm = kernels::dot(row, row).sqrt();
            if norm <= kernels::MIN_ROW_NORM {
                return Err(Error::Domain {
                    op: "row-l2-normalize",
                    row: i,
                    detail: format!("row norm {norm:e} is not above 1e-12"),
                });
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(out)
    }
}

/// Dense loops shared by the tensor type and the graph adjoints.
pub(crate) mod kernels {
    pub const MIN_ROW_NORM: f64 = 1e-12;

    #[inline]
    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    /// `A (m x k) * B (k x n)`.
    pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        out
    }

    /// `A (m x k) * B^T` where `B` is `n x k`.
    pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = dot(arow, &b[j * k..(j + 1) * k]);
            }
        }
        out
    }

    /// `A^T * B` where `A` is `m x k` and `B` is `m x n`.
    pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; k * n];
        for i in 0..m {
            let brow = &b[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let orow = &mut out[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        out
    }

    pub fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = a[i * c + j];
            }
        }
        out
    }
}
