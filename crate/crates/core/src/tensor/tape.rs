use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels;
use super::{Result, Tensor, TensorError};
use crate::scalar::{sgn, Scalar};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, S),
    Relu(usize),
    Softmax(usize),
    Log(usize),
    Mean(usize),
    Sum(usize),
    L1(usize, usize),
    L2(usize, usize),
    RowL1(usize, usize),
    RowL2(usize, usize),
    CrossEntropy(usize, Vec<usize>),
}

#[derive(Clone, Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    /// True when a `requires_grad` leaf is reachable through the parents.
    linked: bool,
}

/// Gradients of a scalar root with respect to every `requires_grad` leaf.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradMap<S> {
    grads: BTreeMap<Var, Tensor<S>>,
}

impl<S: Scalar> GradMap<S> {
    pub fn get(&self, var: Var) -> Option<&Tensor<S>> {
        self.grads.get(&var)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor<S>)> {
        self.grads.iter().map(|(v, t)| (*v, t))
    }
}

/// Explicit, per-forward-pass computation record.
///
/// Nodes are appended in creation order, which is a topological order by
/// construction. Leaves inserted without `requires_grad` are constants: no
/// gradient ever flows into them or through them.
#[derive(Debug)]
pub struct Tape<S> {
    id: u64,
    nodes: Vec<Node<S>>,
    kink_margin: Option<S>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            kink_margin: None,
        }
    }

    /// Drops every recorded node. Handles issued before the reset are
    /// invalidated.
    pub fn reset(&mut self) {
        self.id = NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed);
        self.nodes.clear();
        self.kink_margin = None;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a leaf; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        let linked = t.requires_grad();
        self.push(t, Op::Leaf, linked)
    }

    /// Inserts a trainable leaf.
    pub fn param(&mut self, t: Tensor<S>) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    /// Inserts a constant leaf.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<S>> {
        Ok(&self.node(v)?.value)
    }

    /// Whether gradient can flow from `v` back to some trainable leaf.
    pub fn is_linked(&self, v: Var) -> Result<bool> {
        Ok(self.node(v)?.linked)
    }

    /// Smallest distance to a non-differentiable point seen so far
    /// (ReLU inputs at 0, L1 coordinate differences at 0, L2 distances at 0).
    pub fn min_kink_distance(&self) -> Option<S> {
        self.kink_margin
    }

    fn node(&self, v: Var) -> Result<&Node<S>> {
        if v.tape != self.id {
            return Err(TensorError::ForeignVar);
        }
        self.nodes.get(v.index).ok_or(TensorError::ForeignVar)
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, linked: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value: value.with_requires_grad(linked),
            op,
            linked,
        });
        Var { tape: self.id, index }
    }

    fn note_kink(&mut self, d: S) {
        let d = d.abs();
        self.kink_margin = Some(match self.kink_margin {
            Some(m) if m <= d => m,
            _ => d,
        });
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.node(a)?.value.shape(), self.node(b)?.value.shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn linked2(&self, a: Var, b: Var) -> bool {
        self.nodes[a.index].linked || self.nodes[b.index].linked
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let out = kernels::matmul(ta.data(), tb.data(), m, k, n);
        let linked = self.linked2(a, b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a.index, b.index), linked))
    }

    fn zip_with(&mut self, op_name: &'static str, a: Var, b: Var, op: Op<S>, f: impl Fn(S, S) -> S) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let (ta, tb) = (&self.nodes[a.index].value, &self.nodes[b.index].value);
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let linked = self.linked2(a, b);
        Ok(self.push(value, op, linked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a.index, b.index), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a.index, b.index), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a.index, b.index), |x, y| x * y)
    }

    /// Adds `bias[n]` to every row of `a[m,n]`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(bias)?.value);
        if tb.rank() != 1 || ta.cols() != tb.len() {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let mut data = ta.data().to_vec();
        kernels::add_row_inplace(&mut data, tb.data());
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let linked = self.linked2(a, bias);
        Ok(self.push(value, Op::AddRow(a.index, bias.index), linked))
    }

    pub fn scale(&mut self, a: Var, s: S) -> Result<Var> {
        let value = self.node(a)?.value.map(|x| x * s);
        let linked = self.nodes[a.index].linked;
        Ok(self.push(value, Op::Scale(a.index, s), linked))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let input = &self.node(a)?.value;
        let margin = input.data().iter().map(|x| x.abs()).fold(S::infinity(), S::min);
        let mut value = input.detached();
        kernels::relu_inplace(value.data_mut());
        self.note_kink(margin);
        let linked = self.nodes[a.index].linked;
        Ok(self.push(value, Op::Relu(a.index), linked))
    }

    /// Softmax over each row (the whole vector for rank-1 input).
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let input = &self.node(a)?.value;
        let data = kernels::softmax_rows(input.data(), input.cols());
        let value = Tensor::new(input.shape().to_vec(), data)?;
        let linked = self.nodes[a.index].linked;
        Ok(self.push(value, Op::Softmax(a.index), linked))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let input = &self.node(a)?.value;
        if let Some(bad) = input.data().iter().find(|&&x| !(x > S::zero())) {
            return Err(TensorError::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        let value = input.map(|x| x.ln());
        let linked = self.nodes[a.index].linked;
        Ok(self.push(value, Op::Log(a.index), linked))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let input = &self.node(a)?.value;
        let m = input.data().iter().copied().sum::<S>() / S::from_usize_lossy(input.len());
        let linked = self.nodes[a.index].linked;
        Ok(self.push(Tensor::scalar(m), Op::Mean(a.index), linked))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.node(a)?.value.data().iter().copied().sum::<S>();
        let linked = self.nodes[a.index].linked;
        Ok(self.push(Tensor::scalar(s), Op::Sum(a.index), linked))
    }

    /// `Σ|a_i − b_i|`.
    pub fn l1_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("l1_dist", a, b)?;
        let (ta, tb) = (&self.nodes[a.index].value, &self.nodes[b.index].value);
        let d = kernels::row_l1(ta.data(), tb.data(), ta.len())[0];
        let margin = min_abs_diff(ta.data(), tb.data());
        self.note_kink(margin);
        let linked = self.linked2(a, b);
        Ok(self.push(Tensor::scalar(d), Op::L1(a.index, b.index), linked))
    }

    /// `sqrt(Σ(a_i − b_i)²)`.
    pub fn l2_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("l2_dist", a, b)?;
        let (ta, tb) = (&self.nodes[a.index].value, &self.nodes[b.index].value);
        let d = kernels::row_l2(ta.data(), tb.data(), ta.len())[0];
        self.note_kink(d);
        let linked = self.linked2(a, b);
        Ok(self.push(Tensor::scalar(d), Op::L2(a.index, b.index), linked))
    }

    /// Per-row L1 distance, shape `[rows]`.
    pub fn row_l1_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_l1_dist", a, b)?;
        let (ta, tb) = (&self.nodes[a.index].value, &self.nodes[b.index].value);
        let d = kernels::row_l1(ta.data(), tb.data(), ta.cols());
        let margin = min_abs_diff(ta.data(), tb.data());
        self.note_kink(margin);
        let linked = self.linked2(a, b);
        Ok(self.push(Tensor::vector(d)?, Op::RowL1(a.index, b.index), linked))
    }

    /// Per-row Euclidean distance, shape `[rows]`.
    pub fn row_l2_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_l2_dist", a, b)?;
        let (ta, tb) = (&self.nodes[a.index].value, &self.nodes[b.index].value);
        let d = kernels::row_l2(ta.data(), tb.data(), ta.cols());
        let margin = d.iter().copied().fold(S::infinity(), S::min);
        self.note_kink(margin);
        let linked = self.linked2(a, b);
        Ok(self.push(Tensor::vector(d)?, Op::RowL2(a.index, b.index), linked))
    }

    /// Batch mean of `−ln(max(p[row, label], 1e-12))`.
    ///
    /// Rows of `probs` must be probability vectors.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let p = &self.node(probs)?.value;
        let (rows, classes) = (p.rows(), p.cols());
        if labels.len() != rows {
            return Err(TensorError::LabelCount(labels.len(), rows));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(TensorError::InvalidLabel { label, classes });
        }
        let tol = S::of(1e-9).max(S::epsilon() * S::of(100.0));
        for r in 0..rows {
            let row = p.row(r);
            let total: S = row.iter().copied().sum();
            if (total - S::one()).abs() > tol || row.iter().any(|&x| x < S::zero()) {
                return Err(TensorError::Domain {
                    op: "cross_entropy",
                    detail: format!("row {r} is not a probability vector (sum {total})"),
                });
            }
        }
        let clamp = ce_clamp::<S>();
        let total: S = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| -p.data()[r * classes + l].max(clamp).ln())
            .sum();
        let value = Tensor::scalar(total / S::from_usize_lossy(rows));
        let linked = self.nodes[probs.index].linked;
        Ok(self.push(value, Op::CrossEntropy(probs.index, labels.to_vec()), linked))
    }

    /// Reverse sweep from a scalar `root`.
    ///
    /// The tape is left intact so several roots sharing one forward pass
    /// can be differentiated separately.
    pub fn backward(&self, root: Var) -> Result<GradMap<S>> {
        let root_node = self.node(root)?;
        if !root_node.value.is_scalar() {
            return Err(TensorError::NotScalar(root_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; root.index + 1];
        grads[root.index] = Some(vec![S::one()]);

        for i in (0..=root.index).rev() {
            let node = &self.nodes[i];
            if !node.linked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut out = BTreeMap::new();
        for (index, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.value.requires_grad() {
                continue;
            }
            let g = match grads.get_mut(index).and_then(Option::take) {
                Some(g) => g,
                None => vec![S::zero(); node.value.len()],
            };
            let var = Var { tape: self.id, index };
            out.insert(var, Tensor::new(node.value.shape().to_vec(), g)?);
        }
        Ok(GradMap { grads: out })
    }

    fn propagate(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.nodes[*a].linked {
                    let da = kernels::matmul_bt(g, tb.data(), m, n, k);
                    self.accumulate(grads, *a, &da);
                }
                if self.nodes[*b].linked {
                    let db = kernels::matmul_at(ta.data(), g, m, k, n);
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g);
                self.accumulate(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g);
                let neg: Vec<S> = g.iter().map(|&x| -x).collect();
                self.accumulate(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                let da: Vec<S> = g.iter().zip(tb).map(|(&gi, &y)| gi * y).collect();
                let db: Vec<S> = g.iter().zip(ta).map(|(&gi, &x)| gi * x).collect();
                self.accumulate(grads, *a, &da);
                self.accumulate(grads, *b, &db);
            }
            Op::AddRow(a, bias) => {
                self.accumulate(grads, *a, g);
                if self.nodes[*bias].linked {
                    let n = val(*bias).len();
                    let mut db = vec![S::zero(); n];
                    for row in g.chunks(n) {
                        for (d, &x) in db.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    self.accumulate(grads, *bias, &db);
                }
            }
            Op::Scale(a, s) => {
                let da: Vec<S> = g.iter().map(|&x| x * *s).collect();
                self.accumulate(grads, *a, &da);
            }
            Op::Relu(a) => {
                let x = val(*a).data();
                let da: Vec<S> = g
                    .iter()
                    .zip(x)
                    .map(|(&gi, &xi)| if xi > S::zero() { gi } else { S::zero() })
                    .collect();
                self.accumulate(grads, *a, &da);
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let cols = node.value.cols();
                let mut da = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(cols).zip(g.chunks(cols)) {
                    let dot: S = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    da.extend(yr.iter().zip(gr).map(|(&p, &q)| p * (q - dot)));
                }
                self.accumulate(grads, *a, &da);
            }
            Op::Log(a) => {
                let x = val(*a).data();
                let da: Vec<S> = g.iter().zip(x).map(|(&gi, &xi)| gi / xi).collect();
                self.accumulate(grads, *a, &da);
            }
            Op::Mean(a) => {
                let n = val(*a).len();
                let share = g[0] / S::from_usize_lossy(n);
                self.accumulate(grads, *a, &vec![share; n]);
            }
            Op::Sum(a) => {
                let n = val(*a).len();
                self.accumulate(grads, *a, &vec![g[0]; n]);
            }
            Op::L1(a, b) | Op::RowL1(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let cols = if matches!(node.op, Op::L1(..)) { ta.len() } else { ta.cols() };
                let mut da = Vec::with_capacity(ta.len());
                for ((ra, rb), &gr) in ta.data().chunks(cols).zip(tb.data().chunks(cols)).zip(g) {
                    da.extend(ra.iter().zip(rb).map(|(&x, &y)| gr * sgn(x - y)));
                }
                self.accumulate_pair(grads, *a, *b, da);
            }
            Op::L2(a, b) | Op::RowL2(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let cols = if matches!(node.op, Op::L2(..)) { ta.len() } else { ta.cols() };
                let dists = node.value.data();
                let mut da = Vec::with_capacity(ta.len());
                for (((ra, rb), &gr), &d) in ta
                    .data()
                    .chunks(cols)
                    .zip(tb.data().chunks(cols))
                    .zip(g)
                    .zip(dists)
                {
                    if d == S::zero() {
                        da.extend(std::iter::repeat_n(S::zero(), cols));
                    } else {
                        da.extend(ra.iter().zip(rb).map(|(&x, &y)| gr * (x - y) / d));
                    }
                }
                self.accumulate_pair(grads, *a, *b, da);
            }
            Op::CrossEntropy(p, labels) => {
                let probs = val(*p);
                let classes = probs.cols();
                let clamp = ce_clamp::<S>();
                let inv = g[0] / S::from_usize_lossy(labels.len());
                let mut dp = vec![S::zero(); probs.len()];
                for (r, &l) in labels.iter().enumerate() {
                    let q = probs.data()[r * classes + l];
                    if q >= clamp {
                        dp[r * classes + l] = -inv / q;
                    }
                }
                self.accumulate(grads, *p, &dp);
            }
        }
    }

    /// `a` receives `d`, `b` receives `−d`.
    fn accumulate_pair(&self, grads: &mut [Option<Vec<S>>], a: usize, b: usize, d: Vec<S>) {
        if self.nodes[b].linked {
            let neg: Vec<S> = d.iter().map(|&x| -x).collect();
            self.accumulate(grads, b, &neg);
        }
        self.accumulate(grads, a, &d);
    }

    fn accumulate(&self, grads: &mut [Option<Vec<S>>], j: usize, d: &[S]) {
        if !self.nodes[j].linked {
            return;
        }
        match &mut grads[j] {
            Some(acc) => {
                for (x, &y) in acc.iter_mut().zip(d) {
                    *x += y;
                }
            }
            slot @ None => *slot = Some(d.to_vec()),
        }
    }
}

fn min_abs_diff<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs())
        .fold(S::infinity(), S::min)
}

fn ce_clamp<S: Scalar>() -> S {
    S::of(1e-12)
}
