//! Define-by-run reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and the handles of its inputs, so creation order is already a
//! topological order. [`Graph::backward`] walks the tape once in reverse.
//!
//! Besides the textbook vocabulary there are a few row-batched operations
//! (`cayley_rows`, `rows_matmul`, `rows_matvec`) that treat every row of a
//! `B×n²` tensor as one row-major `n×n` matrix. They let a minibatch of
//! rotations flow through the graph as a single node.

use std::collections::{BTreeMap, HashMap};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lie_group::so_dim;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Identifies a trainable tensor across graphs: the owning network and the
/// tensor's position inside it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamKey {
    pub owner: u32,
    pub index: u32,
}

const BN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamKey),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Mul(Var, Var),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Inverse(Var),
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Swish(Var),
    Square(Var),
    Exp(Var),
    Sum(Var),
    Mean(Var),
    FrobeniusSq(Var),
    SkewEmbed { v: Var, n: usize },
    CayleyRows { coords: Var, n: usize, inverses: Vec<Tensor> },
    RowsMatMul { a: Var, b: Var, n: usize },
    RowsMatVec { r: Var, v: Var, n: usize, transpose: bool },
    SelectRows { x: Var, idx: Vec<usize> },
    SqDists(Var, Var),
    RowSqNorms(Var),
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64> },
    SoftmaxXent { logits: Var, labels: Vec<usize>, probs: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bindings: HashMap<ParamKey, Var>,
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: BTreeMap<ParamKey, Tensor>,
}

impl Gradients {
    /// Gradient with respect to any node that requires a gradient.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient accumulated over every use of a parameter in the graph.
    pub fn param(&self, key: ParamKey) -> Option<&Tensor> {
        self.params.get(&key)
    }

    pub fn params(&self) -> &BTreeMap<ParamKey, Tensor> {
        &self.params
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn mat_slice(data: &[f64], row: usize, n: usize) -> Tensor {
    Tensor::from_vec(n, n, data[row * n * n..(row + 1) * n * n].to_vec()).expect("n×n block")
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported through [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf bound to a trainable parameter. A key routed with
    /// [`Graph::bind`] resolves to its bound node instead.
    pub fn param(&mut self, key: ParamKey, value: &Tensor) -> Var {
        if let Some(&v) = self.bindings.get(&key) {
            debug_assert_eq!(self.value(v).shape(), value.shape(), "bound parameter shape");
            return v;
        }
        self.push(value.clone(), Op::Param(key), true)
    }

    /// Makes every later use of parameter `key` refer to `v`, so gradients
    /// with respect to a network's weights can be read off `v`.
    pub fn bind(&mut self, key: ParamKey, v: Var) {
        self.bindings.insert(key, v);
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn elementwise_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Adds a `1×k` row to every row of a `B×k` tensor.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::dim(
                "add_row",
                format!("1x{}", xv.cols()),
                format!("{:?}", bv.shape()),
            ));
        }
        let mut value = xv.clone();
        for r in 0..value.rows() {
            for (a, b) in value.row_slice_mut(r).iter_mut().zip(bv.data()) {
                *a += b;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(value, Op::AddRow(x, bias), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Matrix times column vector.
    pub fn matvec(&mut self, a: Var, v: Var) -> Result<Var> {
        if self.value(v).cols() != 1 {
            return Err(Error::dim(
                "matvec",
                "column vector",
                format!("{:?}", self.value(v).shape()),
            ));
        }
        self.matmul(a, v)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn mat_inverse(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).inverse()?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Inverse(a), rg))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let mut value = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = value.row_slice_mut(r);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::NonFinite {
                    stage: "l2_normalize".into(),
                    epoch: 0,
                    step: 0,
                    detail: format!("row {r} has norm {norm}"),
                    trace: Vec::new(),
                });
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let rg = self.rg(x);
        Ok(self.push(value, Op::L2NormalizeRows { x, norms }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        let rg = self.rg(x);
        self.push(value, Op::Tanh(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    /// `x · sigmoid(x)`
    pub fn swish(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * sigmoid(v));
        let rg = self.rg(x);
        self.push(value, Op::Swish(x), rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        let rg = self.rg(x);
        self.push(value, Op::Square(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::exp);
        let rg = self.rg(x);
        self.push(value, Op::Exp(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let value = Tensor::scalar(xv.sum() / xv.len() as f64);
        let rg = self.rg(x);
        Ok(self.push(value, Op::Mean(x), rg))
    }

    pub fn frobenius_sq(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).frobenius_sq());
        let rg = self.rg(x);
        self.push(value, Op::FrobeniusSq(x), rg)
    }

    /// `1×m` so(n) coordinates to an antisymmetric `n×n` matrix.
    pub fn skew_embed(&mut self, v: Var, n: usize) -> Result<Var> {
        let vv = self.value(v);
        if vv.rows() != 1 || vv.cols() != so_dim(n) {
            return Err(Error::dim(
                "skew_embed",
                format!("1x{}", so_dim(n)),
                format!("{:?}", vv.shape()),
            ));
        }
        let value = crate::lie_group::skew_from_slice(n, vv.data());
        let rg = self.rg(v);
        Ok(self.push(value, Op::SkewEmbed { v, n }, rg))
    }

    /// Row-wise Cayley transform: each row of the `B×m` input holds so(n)
    /// coordinates, each row of the `B×n²` output a row-major rotation.
    pub fn cayley_rows(&mut self, coords: Var, n: usize) -> Result<Var> {
        let cv = self.value(coords);
        let m = so_dim(n);
        if cv.cols() != m {
            return Err(Error::dim("cayley_rows", format!("Bx{m}"), format!("{:?}", cv.shape())));
        }
        let eye = Tensor::identity(n);
        let mut value = Tensor::zeros(cv.rows(), n * n);
        let mut inverses = Vec::with_capacity(cv.rows());
        for r in 0..cv.rows() {
            let a = crate::lie_group::skew_from_slice(n, cv.row_slice(r));
            let inv = eye.add(&a)?.inverse()?;
            let rot = eye.sub(&a)?.matmul(&inv)?;
            value.row_slice_mut(r).copy_from_slice(rot.data());
            inverses.push(inv);
        }
        let rg = self.rg(coords);
        Ok(self.push(value, Op::CayleyRows { coords, n, inverses }, rg))
    }

    /// Row-wise product of two batches of `n×n` matrices.
    pub fn rows_matmul(&mut self, a: Var, b: Var, n: usize) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("rows_matmul", av, bv)?;
        if av.cols() != n * n {
            return Err(Error::dim("rows_matmul", format!("Bx{}", n * n), format!("{:?}", av.shape())));
        }
        let mut value = Tensor::zeros(av.rows(), n * n);
        for r in 0..av.rows() {
            let p = mat_slice(av.data(), r, n).matmul(&mat_slice(bv.data(), r, n))?;
            value.row_slice_mut(r).copy_from_slice(p.data());
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::RowsMatMul { a, b, n }, rg))
    }

    /// Row-wise `R_b v_b` (or `R_bᵀ v_b` when `transpose`) for a `B×n²`
    /// batch of matrices and a `B×n` batch of vectors.
    pub fn rows_matvec(&mut self, r: Var, v: Var, n: usize, transpose: bool) -> Result<Var> {
        let (rv, vv) = (self.value(r), self.value(v));
        if rv.cols() != n * n || vv.cols() != n || rv.rows() != vv.rows() {
            return Err(Error::dim(
                "rows_matvec",
                format!("Bx{} and Bx{n}", n * n),
                format!("{:?} and {:?}", rv.shape(), vv.shape()),
            ));
        }
        let mut value = Tensor::zeros(vv.rows(), n);
        for b in 0..vv.rows() {
            let m = &rv.data()[b * n * n..(b + 1) * n * n];
            let x = vv.row_slice(b);
            let out = value.row_slice_mut(b);
            for i in 0..n {
                let mut s = 0.0;
                for j in 0..n {
                    let mij = if transpose { m[j * n + i] } else { m[i * n + j] };
                    s += mij * x[j];
                }
                out[i] = s;
            }
        }
        let rg = self.rg(r) || self.rg(v);
        Ok(self.push(value, Op::RowsMatVec { r, v, n, transpose }, rg))
    }

    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.rows()) {
            return Err(Error::dim("select_rows", format!("index < {}", xv.rows()), bad));
        }
        let value = xv.select_rows(idx);
        let rg = self.rg(x);
        Ok(self.push(value, Op::SelectRows { x, idx: idx.to_vec() }, rg))
    }

    /// Pairwise squared Euclidean distances between the rows of `x` (a×k)
    /// and `y` (b×k), as an a×b matrix.
    pub fn sq_dists(&mut self, x: Var, y: Var) -> Result<Var> {
        let (xv, yv) = (self.value(x), self.value(y));
        if xv.cols() != yv.cols() {
            return Err(Error::dim("sq_dists", xv.cols(), yv.cols()));
        }
        let mut value = Tensor::zeros(xv.rows(), yv.rows());
        for i in 0..xv.rows() {
            let xi = xv.row_slice(i);
            for j in 0..yv.rows() {
                let d = xi
                    .iter()
                    .zip(yv.row_slice(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                value.set(i, j, d);
            }
        }
        let rg = self.rg(x) || self.rg(y);
        Ok(self.push(value, Op::SqDists(x, y), rg))
    }

    /// Squared norm of every row, as a `B×1` column.
    pub fn row_sq_norms(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = (0..xv.rows())
            .map(|r| xv.row_slice(r).iter().map(|v| v * v).sum())
            .collect();
        let value = Tensor::from_vec(xv.rows(), 1, data).expect("column");
        let rg = self.rg(x);
        self.push(value, Op::RowSqNorms(x), rg)
    }

    /// Training-mode batch normalization with biased batch variance.
    /// Returns the output and the batch mean/variance for running stats.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let xv = self.value(x);
        let (b, k) = xv.shape();
        if b < 2 {
            return Err(Error::Contract("batch_norm needs at least two rows".into()));
        }
        for (name, p) in [("gamma", self.value(gamma)), ("beta", self.value(beta))] {
            if p.shape() != (1, k) {
                return Err(Error::dim("batch_norm", format!("{name} 1x{k}"), format!("{:?}", p.shape())));
            }
        }
        let mut mean = vec![0.0; k];
        let mut var = vec![0.0; k];
        for r in 0..b {
            for (m, v) in mean.iter_mut().zip(xv.row_slice(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= b as f64);
        for r in 0..b {
            for ((s, v), m) in var.iter_mut().zip(xv.row_slice(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= b as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = xv.clone();
        for r in 0..b {
            for ((v, m), s) in xhat.row_slice_mut(r).iter_mut().zip(&mean).zip(&inv_std) {
                *v = (*v - m) * s;
            }
        }
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut value = xhat.clone();
        for r in 0..b {
            for (j, v) in value.row_slice_mut(r).iter_mut().enumerate() {
                *v = *v * gv.data()[j] + bv.data()[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let out = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        );
        Ok((out, mean, var))
    }

    /// Mean softmax cross-entropy of `B×K` logits against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (b, k) = lv.shape();
        if labels.len() != b {
            return Err(Error::dim("softmax_cross_entropy", b, labels.len()));
        }
        if b == 0 {
            return Err(Error::Contract("softmax_cross_entropy on an empty batch".into()));
        }
        let mut probs = Tensor::zeros(b, k);
        let mut loss = 0.0;
        for r in 0..b {
            let row = lv.row_slice(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let y = labels[r];
            if y >= k {
                return Err(Error::dim("softmax_cross_entropy", format!("label < {k}"), y));
            }
            loss += z.ln() - (row[y] - max);
            for (p, v) in probs.row_slice_mut(r).iter_mut().zip(row) {
                *p = (v - max).exp() / z;
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss / b as f64),
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut params = BTreeMap::new();
        grads[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            for (input, gi) in self.local_grads(node, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.axpy(1.0, &gi),
                    slot => *slot = Some(gi),
                }
            }
            if let Op::Param(key) = node.op {
                match params.get_mut(&key) {
                    Some(acc) => Tensor::axpy(acc, 1.0, &g),
                    None => {
                        params.insert(key, g.clone());
                    }
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    /// Vector-Jacobian products of one node with respect to each input.
    fn local_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| self.value(v);
        let y = &node.value;
        Ok(match &node.op {
            Op::Leaf | Op::Param(_) => Vec::new(),
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
            Op::Scale(a, s) => vec![(*a, g.scale(*s))],
            Op::Mul(a, b) => vec![(*a, g.hadamard(val(*b))?), (*b, g.hadamard(val(*a))?)],
            Op::AddRow(x, bias) => {
                let mut gb = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (acc, v) in gb.data_mut().iter_mut().zip(g.row_slice(r)) {
                        *acc += v;
                    }
                }
                vec![(*x, g.clone()), (*bias, gb)]
            }
            Op::MatMul(a, b) => vec![(*a, g.matmul_t(val(*b))?), (*b, val(*a).t_matmul(g)?)],
            Op::Transpose(a) => vec![(*a, g.transpose())],
            Op::Inverse(a) => {
                // grad_A = −(A⁻¹)ᵀ G (A⁻¹)ᵀ
                let yt = y.transpose();
                vec![(*a, yt.matmul(g)?.matmul(&yt)?.scale(-1.0))]
            }
            Op::L2NormalizeRows { x, norms } => {
                let mut gx = g.clone();
                for r in 0..g.rows() {
                    let yr = y.row_slice(r);
                    let dot: f64 = yr.iter().zip(g.row_slice(r)).map(|(a, b)| a * b).sum();
                    for (gv, yv) in gx.row_slice_mut(r).iter_mut().zip(yr) {
                        *gv = (*gv - yv * dot) / norms[r];
                    }
                }
                vec![(*x, gx)]
            }
            Op::Relu(x) => vec![(*x, g.zip_map(val(*x), "relu", |gv, xv| if xv > 0.0 { gv } else { 0.0 })?)],
            Op::Tanh(x) => vec![(*x, g.zip_map(y, "tanh", |gv, yv| gv * (1.0 - yv * yv))?)],
            Op::Sigmoid(x) => vec![(*x, g.zip_map(y, "sigmoid", |gv, yv| gv * yv * (1.0 - yv))?)],
            Op::Swish(x) => vec![(
                *x,
                g.zip_map(val(*x), "swish", |gv, xv| {
                    let s = sigmoid(xv);
                    gv * (s + xv * s * (1.0 - s))
                })?,
            )],
            Op::Square(x) => vec![(*x, g.zip_map(val(*x), "square", |gv, xv| 2.0 * gv * xv)?)],
            Op::Exp(x) => vec![(*x, g.hadamard(y)?)],
            Op::Sum(x) => {
                let (r, c) = val(*x).shape();
                vec![(*x, Tensor::filled(r, c, g.item()))]
            }
            Op::Mean(x) => {
                let (r, c) = val(*x).shape();
                vec![(*x, Tensor::filled(r, c, g.item() / (r * c) as f64))]
            }
            Op::FrobeniusSq(x) => vec![(*x, val(*x).scale(2.0 * g.item()))],
            Op::SkewEmbed { v, n } => {
                let mut gv = Vec::with_capacity(so_dim(*n));
                for i in 0..*n {
                    for j in i + 1..*n {
                        gv.push(g.get(i, j) - g.get(j, i));
                    }
                }
                vec![(*v, Tensor::row(gv))]
            }
            Op::CayleyRows { coords, n, inverses } => {
                let n = *n;
                let eye = Tensor::identity(n);
                let mut gc = Tensor::zeros(g.rows(), so_dim(n));
                for r in 0..g.rows() {
                    // R = (I − A)M, M = (I + A)⁻¹  ⇒  grad_A = −(I + R)ᵀ G Mᵀ
                    let rot = mat_slice(y.data(), r, n);
                    let gr = mat_slice(g.data(), r, n);
                    let ga = eye
                        .add(&rot)?
                        .t_matmul(&gr)?
                        .matmul_t(&inverses[r])?;
                    let out = gc.row_slice_mut(r);
                    let mut k = 0;
                    for i in 0..n {
                        for j in i + 1..n {
                            out[k] = ga.get(j, i) - ga.get(i, j);
                            k += 1;
                        }
                    }
                }
                vec![(*coords, gc)]
            }
            Op::RowsMatMul { a, b, n } => {
                let n = *n;
                let (av, bv) = (val(*a), val(*b));
                let mut ga = Tensor::zeros(av.rows(), n * n);
                let mut gb = Tensor::zeros(av.rows(), n * n);
                for r in 0..av.rows() {
                    let gr = mat_slice(g.data(), r, n);
                    let ar = mat_slice(av.data(), r, n);
                    let br = mat_slice(bv.data(), r, n);
                    ga.row_slice_mut(r).copy_from_slice(gr.matmul_t(&br)?.data());
                    gb.row_slice_mut(r).copy_from_slice(ar.t_matmul(&gr)?.data());
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::RowsMatVec { r, v, n, transpose } => {
                let n = *n;
                let (rv, vv) = (val(*r), val(*v));
                let mut gr = Tensor::zeros(rv.rows(), n * n);
                let mut gv = Tensor::zeros(vv.rows(), n);
                for b in 0..vv.rows() {
                    let m = &rv.data()[b * n * n..(b + 1) * n * n];
                    let x = vv.row_slice(b);
                    let gy = g.row_slice(b);
                    let grow = gr.row_slice_mut(b);
                    for i in 0..n {
                        for j in 0..n {
                            if *transpose {
                                // y_i = Σ_j m[j,i] x_j
                                grow[j * n + i] = gy[i] * x[j];
                            } else {
                                grow[i * n + j] = gy[i] * x[j];
                            }
                        }
                    }
                    let gvr = gv.row_slice_mut(b);
                    for j in 0..n {
                        let mut s = 0.0;
                        for i in 0..n {
                            let mij = if *transpose { m[j * n + i] } else { m[i * n + j] };
                            s += mij * gy[i];
                        }
                        gvr[j] = s;
                    }
                }
                vec![(*r, gr), (*v, gv)]
            }
            Op::SelectRows { x, idx } => {
                let (r, c) = val(*x).shape();
                let mut gx = Tensor::zeros(r, c);
                for (k, &i) in idx.iter().enumerate() {
                    for (a, b) in gx.row_slice_mut(i).iter_mut().zip(g.row_slice(k)) {
                        *a += b;
                    }
                }
                vec![(*x, gx)]
            }
            Op::SqDists(x, yv) => {
                let (xm, ym) = (val(*x), val(*yv));
                let k = xm.cols();
                let mut gx = Tensor::zeros(xm.rows(), k);
                let mut gy = Tensor::zeros(ym.rows(), k);
                for i in 0..xm.rows() {
                    let xi = xm.row_slice(i);
                    for j in 0..ym.rows() {
                        let gij = 2.0 * g.get(i, j);
                        if gij == 0.0 {
                            continue;
                        }
                        let yj = ym.row_slice(j);
                        for c in 0..k {
                            let d = gij * (xi[c] - yj[c]);
                            gx.data_mut()[i * k + c] += d;
                            gy.data_mut()[j * k + c] -= d;
                        }
                    }
                }
                vec![(*x, gx), (*yv, gy)]
            }
            Op::RowSqNorms(x) => {
                let xm = val(*x);
                let mut gx = xm.clone();
                for r in 0..xm.rows() {
                    let s = 2.0 * g.get(r, 0);
                    gx.row_slice_mut(r).iter_mut().for_each(|v| *v *= s);
                }
                vec![(*x, gx)]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (b, k) = xhat.shape();
                let gam = val(*gamma);
                let mut ggamma = Tensor::zeros(1, k);
                let mut gbeta = Tensor::zeros(1, k);
                for r in 0..b {
                    for j in 0..k {
                        gbeta.data_mut()[j] += g.get(r, j);
                        ggamma.data_mut()[j] += g.get(r, j) * xhat.get(r, j);
                    }
                }
                let bf = b as f64;
                let mut gx = Tensor::zeros(b, k);
                for j in 0..k {
                    // with gxhat = g·γ:  gx = inv_std/B · (B·gxhat − Σgxhat − xhat·Σ(gxhat·xhat))
                    let gj = gam.data()[j];
                    let sum_gxhat = gbeta.data()[j] * gj;
                    let sum_gxhat_xhat = ggamma.data()[j] * gj;
                    for r in 0..b {
                        let gxhat = g.get(r, j) * gj;
                        let v = inv_std[j] / bf
                            * (bf * gxhat - sum_gxhat - xhat.get(r, j) * sum_gxhat_xhat);
                        gx.set(r, j, v);
                    }
                }
                vec![(*x, gx), (*gamma, ggamma), (*beta, gbeta)]
            }
            Op::SoftmaxXent {
                logits,
                labels,
                probs,
            } => {
                let b = probs.rows();
                let s = g.item() / b as f64;
                let mut gl = probs.clone();
                for (r, &lab) in labels.iter().enumerate() {
                    let row = gl.row_slice_mut(r);
                    row[lab] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= s);
                }
                vec![(*logits, gl)]
            }
        })
    }
}

/// Options for [`gradcheck_with`].
#[derive(Clone, Copy, Debug)]
pub struct GradcheckOptions {
    /// Coordinates of each input perturbed; all of them when the input is smaller.
    pub max_coords_per_input: usize,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            max_coords_per_input: 64,
            seed: 0,
        }
    }
}

/// Compares the reverse-mode gradient of a scalar function against central
/// differences. Returns the maximum over checked coordinates of
/// `|analytic − numeric| / max(1, |analytic|)`.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    gradcheck_with(f, inputs, h, GradcheckOptions::default())
}

pub fn gradcheck_with<F>(f: F, inputs: &[Tensor], h: f64, opts: GradcheckOptions) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Config(format!("finite-difference step {h} outside [1e-7, 1e-3]")));
    }
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.input(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.input(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let len = inputs[k].len();
        let analytic = grads
            .wrt(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].rows(), inputs[k].cols()));
        let coords: Vec<usize> = if len <= opts.max_coords_per_input {
            (0..len).collect()
        } else {
            let mut c = sample(&mut rng, len, opts.max_coords_per_input).into_vec();
            c.sort_unstable();
            c
        };
        for c in coords {
            let orig = work[k].data()[c];
            work[k].data_mut()[c] = orig + h;
            let plus = eval(&work)?;
            work[k].data_mut()[c] = orig - h;
            let minus = eval(&work)?;
            work[k].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[c];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
