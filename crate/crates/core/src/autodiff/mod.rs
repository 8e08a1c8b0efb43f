//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is a tape: every primitive evaluates eagerly, appends a node
//! holding its forward value, and returns a [`Var`] handle. Because nodes are
//! only ever appended, the tape is topologically ordered and the backward
//! sweep is a single reverse pass. Graphs are cheap to build and are meant to
//! be thrown away after each optimization step.
//!
//! The primitive set is deliberately small: exactly what the contrastive
//! losses and the tanh encoders need.

mod gradcheck;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use tensor::Tensor;

use crate::error::{Error, Result};
use tensor::kernels;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive kinds recorded on the tape.
#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Tanh(Var),
    Sum(Var),
    Mean(Var),
    /// Caches the pre-normalization row norms.
    RowNormalize(Var, Vec<f64>),
    RowDot(Var, Var),
    Gram(Var, Var),
    PairwiseSqDist(Var, Var),
    LogSumExpRows(Var),
    AddRowBroadcast(Var, Var),
    ClampMin(Var, f64),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Computation tape. Confined to one thread; build a fresh one per step.
#[derive(Default, Debug)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor (parameter or constant).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, name: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::config(format!("{name}: shape mismatch {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn matrix(&self, name: &str, a: Var) -> Result<(usize, usize)> {
        let t = self.value(a);
        if !t.is_matrix() {
            return Err(Error::config(format!("{name}: expected a matrix, got shape {:?}", t.shape())));
        }
        Ok((t.rows(), t.cols()))
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let ta = self.value(a);
        let tb = self.value(b);
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("shapes checked");
        self.push(op, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("subtract", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("elementwise-multiply", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Multiplication by a constant scalar.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v * c);
        self.push(Op::Scale(a, c), value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix("matrix-multiply", a)?;
        let (k2, n) = self.matrix("matrix-multiply", b)?;
        if k != k2 {
            return Err(Error::config(format!("matrix-multiply: inner dimensions {k} vs {k2}")));
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Op::MatMul(a, b), Tensor::matrix(m, n, data)?))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.matrix("transpose", a)?;
        let value = self.value(a).transpose();
        Ok(self.push(Op::Transpose(a), value))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), value)
    }

    /// Natural logarithm; every input must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if let Some(pos) = t.data().iter().position(|&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::Domain {
                op: "log",
                row: pos / t.cols().max(1),
                detail: format!("input {} is not strictly positive", t.data()[pos]),
            });
        }
        let value = t.map(f64::ln);
        Ok(self.push(Op::Log(a), value))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v * v);
        self.push(Op::Square(a), value)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), value)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = compensated_sum(self.value(a).data());
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::config("mean of an empty tensor"));
        }
        let m = compensated_sum(t.data()) / t.len() as f64;
        Ok(self.push(Op::Mean(a), Tensor::scalar(m)))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn row_normalize(&mut self, a: Var) -> Result<Var> {
        let (r, _) = self.matrix("row-l2-normalize", a)?;
        let t = self.value(a);
        let mut norms = Vec::with_capacity(r);
        for (i, row) in t.row_iter().enumerate() {
            let n = kernels::dot(row, row).sqrt();
            if !(n > kernels::MIN_ROW_NORM) {
                return Err(Error::Domain {
                    op: "row-l2-normalize",
                    row: i,
                    detail: format!("row norm {n:e} is not above 1e-12"),
                });
            }
            norms.push(n);
        }
        let value = t.normalize_rows()?;
        Ok(self.push(Op::RowNormalize(a, norms), value))
    }

    /// `out[j] = <a_j, b_j>` as an `N x 1` column.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matrix("rowwise-inner-product", a)?;
        self.same_shape("rowwise-inner-product", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data: Vec<f64> = ta.row_iter().zip(tb.row_iter()).map(|(x, y)| kernels::dot(x, y)).collect();
        let n = data.len();
        Ok(self.push(Op::RowDot(a, b), Tensor::matrix(n, 1, data)?))
    }

    /// `A * B^T`: all pairwise inner products between rows.
    pub fn gram(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix("pairwise-gram", a)?;
        let (n, k2) = self.matrix("pairwise-gram", b)?;
        if k != k2 {
            return Err(Error::config(format!("pairwise-gram: row widths {k} vs {k2}")));
        }
        let data = kernels::matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Op::Gram(a, b), Tensor::matrix(m, n, data)?))
    }

    /// `out[j][k] = ||a_j - b_k||^2`.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix("pairwise-squared-distance", a)?;
        let (n, k2) = self.matrix("pairwise-squared-distance", b)?;
        if k != k2 {
            return Err(Error::config(format!("pairwise-squared-distance: row widths {k} vs {k2}")));
        }
        let (ta, tb) = (self.value(a), self.value(b));
        let mut data = Vec::with_capacity(m * n);
        for ra in ta.row_iter() {
            for rb in tb.row_iter() {
                data.push(ra.iter().zip(rb).map(|(x, y)| (x - y) * (x - y)).sum());
            }
        }
        Ok(self.push(Op::PairwiseSqDist(a, b), Tensor::matrix(m, n, data)?))
    }

    /// Stable `log sum_k exp(x[j][k])` for every row, as an `N x 1` column.
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var> {
        let (r, _) = self.matrix("logsumexp-over-rows", a)?;
        let data: Vec<f64> = self.value(a).row_iter().map(logsumexp).collect();
        Ok(self.push(Op::LogSumExpRows(a), Tensor::matrix(r, 1, data)?))
    }

    /// Adds a `1 x d` row to every row of an `N x d` matrix (bias add).
    pub fn add_row_broadcast(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, c) = self.matrix("add-row-broadcast", a)?;
        let (rr, rc) = self.matrix("add-row-broadcast", row)?;
        if rr != 1 || rc != c {
            return Err(Error::config(format!(
                "add-row-broadcast: row shape {:?} does not fit {c} columns",
                self.value(row).shape()
            )));
        }
        let mut value = self.value(a).clone();
        let b = self.value(row).data();
        for i in 0..value.rows() {
            value.row_mut(i).iter_mut().zip(b).for_each(|(v, bv)| *v += bv);
        }
        Ok(self.push(Op::AddRowBroadcast(a, row), value))
    }

    /// `max(x, floor)` elementwise; the gradient is zero where clamped.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let value = self.value(a).map(|v| v.max(floor));
        self.push(Op::ClampMin(a, floor), value)
    }

    /// Reverse-mode gradients of a scalar `output` with respect to `wrt`.
    /// Nodes that do not reach `output` receive zero gradients.
    pub fn gradients(&self, output: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        if self.value(output).len() != 1 {
            return Err(Error::config(format!(
                "gradients need a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        adj[output.0] = Some(Tensor::new(self.value(output).shape().to_vec(), vec![1.0])?);

        for i in (0..=output.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.backprop_node(i, &g, &mut adj);
            adj[i] = Some(g);
        }

        Ok(wrt
            .iter()
            .map(|v| {
                adj.get(v.0)
                    .cloned()
                    .flatten()
                    .unwrap_or_else(|| Tensor::zeros(self.value(*v).shape()))
            })
            .collect())
    }

    fn backprop_node(&self, i: usize, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(adj, *a, self.value(*a).shape(), gd.to_vec());
                accumulate(adj, *b, self.value(*b).shape(), gd.to_vec());
            }
            Op::Sub(a, b) => {
                accumulate(adj, *a, self.value(*a).shape(), gd.to_vec());
                accumulate(adj, *b, self.value(*b).shape(), gd.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ga = gd.iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                let gb = gd.iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                accumulate(adj, *a, ta.shape(), ga);
                accumulate(adj, *b, tb.shape(), gb);
            }
            Op::Scale(a, c) => {
                accumulate(adj, *a, self.value(*a).shape(), gd.iter().map(|v| v * c).collect());
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                let ga = kernels::matmul_nt(gd, tb.data(), m, n, k);
                let gb = kernels::matmul_tn(ta.data(), gd, m, k, n);
                accumulate(adj, *a, ta.shape(), ga);
                accumulate(adj, *b, tb.shape(), gb);
            }
            Op::Transpose(a) => {
                let ta = self.value(*a);
                let gt = kernels::transpose(gd, ta.cols(), ta.rows());
                accumulate(adj, *a, ta.shape(), gt);
            }
            Op::Exp(a) => {
                let ga = gd.iter().zip(node.value.data()).map(|(g, y)| g * y).collect();
                accumulate(adj, *a, self.value(*a).shape(), ga);
            }
            Op::Log(a) => {
                let ta = self.value(*a);
                let ga = gd.iter().zip(ta.data()).map(|(g, x)| g / x).collect();
                accumulate(adj, *a, ta.shape(), ga);
            }
            Op::Square(a) => {
                let ta = self.value(*a);
                let ga = gd.iter().zip(ta.data()).map(|(g, x)| 2.0 * g * x).collect();
                accumulate(adj, *a, ta.shape(), ga);
            }
            Op::Tanh(a) => {
                let ga = gd.iter().zip(node.value.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
                accumulate(adj, *a, self.value(*a).shape(), ga);
            }
            Op::Sum(a) => {
                let ta = self.value(*a);
                accumulate(adj, *a, ta.shape(), vec![gd[0]; ta.len()]);
            }
            Op::Mean(a) => {
                let ta = self.value(*a);
                accumulate(adj, *a, ta.shape(), vec![gd[0] / ta.len() as f64; ta.len()]);
            }
            Op::RowNormalize(a, norms) => {
                let y = &node.value;
                let c = y.cols();
                let mut ga = Vec::with_capacity(y.len());
                for (i, norm) in norms.iter().enumerate() {
                    let yr = y.row(i);
                    let gr = &gd[i * c..(i + 1) * c];
                    let proj = kernels::dot(gr, yr);
                    ga.extend(gr.iter().zip(yr).map(|(g, yv)| (g - proj * yv) / norm));
                }
                accumulate(adj, *a, self.value(*a).shape(), ga);
            }
            Op::RowDot(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let c = ta.cols();
                let mut ga = Vec::with_capacity(ta.len());
                let mut gb = Vec::with_capacity(tb.len());
                for (j, gj) in gd.iter().enumerate() {
                    ga.extend(tb.row(j).iter().map(|v| gj * v));
                    gb.extend(ta.row(j).iter().map(|v| gj * v));
                }
                debug_assert_eq!(ga.len(), ta.rows() * c);
                accumulate(adj, *a, ta.shape(), ga);
                accumulate(adj, *b, tb.shape(), gb);
            }
            Op::Gram(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                let ga = kernels::matmul(gd, tb.data(), m, n, k);
                let gb = kernels::matmul_tn(gd, ta.data(), m, n, k);
                accumulate(adj, *a, ta.shape(), ga);
                accumulate(adj, *b, tb.shape(), gb);
            }
            Op::PairwiseSqDist(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                // d/da_j = 2 sum_k G_jk (a_j - b_k); d/db_k = 2 sum_j G_jk (b_k - a_j)
                let gbmat = kernels::matmul(gd, tb.data(), m, n, k);
                let gtamat = kernels::matmul_tn(gd, ta.data(), m, n, k);
                let mut ga = vec![0.0; m * k];
                let mut gb = vec![0.0; n * k];
                let mut colsum = vec![0.0; n];
                for j in 0..m {
                    let rs: f64 = gd[j * n..(j + 1) * n].iter().sum();
                    for (c, v) in colsum.iter_mut().zip(&gd[j * n..(j + 1) * n]) {
                        *c += v;
                    }
                    for p in 0..k {
                        ga[j * k + p] = 2.0 * (rs * ta.data()[j * k + p] - gbmat[j * k + p]);
                    }
                }
                for q in 0..n {
                    for p in 0..k {
                        gb[q * k + p] = 2.0 * (colsum[q] * tb.data()[q * k + p] - gtamat[q * k + p]);
                    }
                }
                accumulate(adj, *a, ta.shape(), ga);
                accumulate(adj, *b, tb.shape(), gb);
            }
            Op::LogSumExpRows(a) => {
                let ta = self.value(*a);
                let mut ga = Vec::with_capacity(ta.len());
                for (j, row) in ta.row_iter().enumerate() {
                    let lse = node.value.data()[j];
                    ga.extend(row.iter().map(|x| gd[j] * (x - lse).exp()));
                }
                accumulate(adj, *a, ta.shape(), ga);
            }
            Op::AddRowBroadcast(a, row) => {
                let ta = self.value(*a);
                let c = ta.cols();
                let mut gb = vec![0.0; c];
                for r in gd.chunks(c) {
                    gb.iter_mut().zip(r).for_each(|(s, v)| *s += v);
                }
                accumulate(adj, *a, ta.shape(), gd.to_vec());
                accumulate(adj, *row, self.value(*row).shape(), gb);
            }
            Op::ClampMin(a, floor) => {
                let ta = self.value(*a);
                let ga = gd
                    .iter()
                    .zip(ta.data())
                    .map(|(g, x)| if x > floor { *g } else { 0.0 })
                    .collect();
                accumulate(adj, *a, ta.shape(), ga);
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Tensor>], v: Var, shape: &[usize], grad: Vec<f64>) {
    match &mut adj[v.0] {
        Some(existing) => existing
            .data_mut()
            .iter_mut()
            .zip(&grad)
            .for_each(|(e, g)| *e += g),
        slot @ None => *slot = Some(Tensor::new(shape.to_vec(), grad).expect("adjoint shape")),
    }
}

/// Neumaier-compensated sum.
fn compensated_sum(xs: &[f64]) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for &x in xs {
        let t = s + x;
        c += if s.abs() >= x.abs() { (s - t) + x } else { (x - t) + s };
        s = t;
    }
    s + c
}

/// Max-shifted log-sum-exp of a slice.
pub fn logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
