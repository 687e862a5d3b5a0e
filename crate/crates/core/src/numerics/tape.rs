//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! Nodes are appended in evaluation order, so walking the node list
//! backwards from the root is a reverse topological order: each node is
//! visited once and only after every consumer has pushed its adjoint.
//! A tape is built per mini-batch and dropped after `backward`.

use super::{dot, Matrix, NumericsError, ZERO_NORM};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Exp(Var),
    NormalizeRows(Var, Vec<f64>),
    LogSoftmaxRows(Var),
    SumRows(Var),
    Sum(Var),
    Mean(Var),
    GatherRows(Var, Vec<usize>),
    Pick(Var, Vec<(usize, usize)>),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input. Parameters and constants are both leaves; whether a
    /// leaf's gradient is used is up to the caller.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_t(self.value(b));
        self.push(value, Op::MatMulT(a, b))
    }

    /// Adds the `1 x m` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(bias));
        assert_eq!(bv.shape(), (1, av.cols()), "add_row bias shape");
        let mut value = av.clone();
        for r in 0..value.rows() {
            for (x, b) in value.row_mut(r).iter_mut().zip(bv.as_slice()) {
                *x += b;
            }
        }
        self.push(value, Op::AddRow(a, bias))
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Matrix {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shape");
        let data = av.as_slice().iter().zip(bv.as_slice()).map(|(x, y)| f(*x, *y)).collect();
        Matrix::from_vec(av.rows(), av.cols(), data).expect("shape checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |x, y| x + y);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |x, y| x - y);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |x, y| x * y);
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.push(value, Op::Scale(a, factor))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a))
    }

    /// Divides each row by its L2 norm.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var, NumericsError> {
        let av = self.value(a);
        let mut value = av.clone();
        let mut norms = Vec::with_capacity(av.rows());
        for r in 0..av.rows() {
            let n = dot(av.row(r), av.row(r)).sqrt();
            if n < ZERO_NORM {
                return Err(NumericsError::ZeroVector);
            }
            value.row_mut(r).iter_mut().for_each(|x| *x /= n);
            norms.push(n);
        }
        Ok(self.push(value, Op::NormalizeRows(a, norms)))
    }

    /// Row-wise `x - max - ln Σ exp(x - max)`.
    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
            row.iter_mut().for_each(|x| *x -= lse);
        }
        self.push(value, Op::LogSoftmaxRows(a))
    }

    /// `n x m -> n x 1`
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av.iter_rows().map(|r| r.iter().sum()).collect();
        let value = Matrix::from_vec(av.rows(), 1, data).expect("n x 1");
        self.push(value, Op::SumRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).as_slice().iter().sum());
        self.push(value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        assert!(!av.is_empty(), "mean of empty node");
        let value = Matrix::scalar(av.as_slice().iter().sum::<f64>() / av.len() as f64);
        self.push(value, Op::Mean(a))
    }

    /// Builds a matrix whose row `r` is row `indices[r]` of `a`.
    pub fn gather_rows(&mut self, a: Var, indices: Vec<usize>) -> Var {
        let av = self.value(a);
        let mut value = Matrix::zeros(indices.len(), av.cols());
        for (r, &src) in indices.iter().enumerate() {
            value.row_mut(r).copy_from_slice(av.row(src));
        }
        self.push(value, Op::GatherRows(a, indices))
    }

    /// Column vector of the selected `(row, col)` entries.
    pub fn pick(&mut self, a: Var, entries: Vec<(usize, usize)>) -> Var {
        let av = self.value(a);
        let data = entries.iter().map(|&(r, c)| av.get(r, c)).collect();
        let value = Matrix::from_vec(entries.len(), 1, data).expect("k x 1");
        self.push(value, Op::Pick(a, entries))
    }

    /// Gradients of the `1 x 1` node `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Result<Gradients, NumericsError> {
        let (rows, cols) = self.value(root).shape();
        if (rows, cols) != (1, 1) {
            return Err(NumericsError::NotScalarRoot { rows, cols });
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::scalar(1.0));
        let mut visited = 0;

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            visited += 1;
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = g.matmul_t(self.value(*b));
                    let db = self.value(*a).t_matmul(&g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulT(a, b) => {
                    let da = g.matmul(self.value(*b));
                    let db = g.t_matmul(self.value(*a));
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::AddRow(a, bias) => {
                    let mut db = Matrix::zeros(1, g.cols());
                    for r in g.iter_rows() {
                        for (d, x) in db.as_mut_slice().iter_mut().zip(r) {
                            *d += x;
                        }
                    }
                    accumulate(&mut grads, *bias, db);
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.map(|x| -x));
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    let da = hadamard(&g, self.value(*b));
                    let db = hadamard(&g, self.value(*a));
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale(a, factor) => accumulate(&mut grads, *a, g.map(|x| x * factor)),
                Op::Tanh(a) => {
                    let local = node.value.map(|y| 1.0 - y * y);
                    accumulate(&mut grads, *a, hadamard(&g, &local));
                }
                Op::Exp(a) => accumulate(&mut grads, *a, hadamard(&g, &node.value)),
                Op::NormalizeRows(a, norms) => {
                    let y = &node.value;
                    let mut da = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let proj = dot(y.row(r), g.row(r));
                        for ((d, yv), gv) in da.row_mut(r).iter_mut().zip(y.row(r)).zip(g.row(r)) {
                            *d = (gv - yv * proj) / norms[r];
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &node.value;
                    let mut da = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let gsum: f64 = g.row(r).iter().sum();
                        for ((d, yv), gv) in da.row_mut(r).iter_mut().zip(y.row(r)).zip(g.row(r)) {
                            *d = gv - yv.exp() * gsum;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::SumRows(a) => {
                    let (ar, ac) = self.value(*a).shape();
                    let mut da = Matrix::zeros(ar, ac);
                    for r in 0..ar {
                        let gv = g.get(r, 0);
                        da.row_mut(r).iter_mut().for_each(|d| *d = gv);
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Sum(a) => {
                    let (ar, ac) = self.value(*a).shape();
                    accumulate(&mut grads, *a, Matrix::filled(ar, ac, g.get(0, 0)));
                }
                Op::Mean(a) => {
                    let (ar, ac) = self.value(*a).shape();
                    let share = g.get(0, 0) / (ar * ac) as f64;
                    accumulate(&mut grads, *a, Matrix::filled(ar, ac, share));
                }
                Op::GatherRows(a, indices) => {
                    let (ar, ac) = self.value(*a).shape();
                    let mut da = Matrix::zeros(ar, ac);
                    for (r, &src) in indices.iter().enumerate() {
                        for (d, gv) in da.row_mut(src).iter_mut().zip(g.row(r)) {
                            *d += gv;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Pick(a, entries) => {
                    let (ar, ac) = self.value(*a).shape();
                    let mut da = Matrix::zeros(ar, ac);
                    for (k, &(r, c)) in entries.iter().enumerate() {
                        da.set(r, c, da.get(r, c) + g.get(k, 0));
                    }
                    accumulate(&mut grads, *a, da);
                }
            }
            grads[i] = Some(g);
        }

        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
            grads,
            visited,
        })
    }
}

fn hadamard(a: &Matrix, b: &Matrix) -> Matrix {
    let data = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).collect();
    Matrix::from_vec(a.rows(), a.cols(), data).expect("same shape")
}

fn accumulate(grads: &mut [Option<Matrix>], target: Var, delta: Matrix) {
    match &mut grads[target.0] {
        Some(existing) => existing.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
    visited: usize,
}

impl Gradients {
    /// Gradient with respect to `v`; exactly zero when `v` does not feed the root.
    pub fn wrt(&self, v: Var) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    /// Number of nodes that received an adjoint.
    pub fn visited(&self) -> usize {
        self.visited
    }
}
