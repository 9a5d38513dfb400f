//! Dense row-major tensors and a define-by-run tape for reverse-mode
//! differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Values enter it as leaves
//! (constants, variables or registered parameters) and every operation appends
//! one record whose vector-Jacobian rule is applied, in reverse record order,
//! by [`Graph::backward`]. Records are appended only after their operands
//! exist, so the record list is always topologically ordered.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("label {label} at row {row} is out of range for {classes} classes")]
    Label {
        row: usize,
        label: usize,
        classes: usize,
    },
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense n-dimensional array of `f64` values with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Dimension {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
            grad: None,
        }
    }

    /// Builds a 2-D tensor from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(TensorError::Dimension {
                    op: "from_rows",
                    lhs: vec![cols],
                    rhs: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(vec![rows.len(), cols], data)
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn get2(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.shape[1] + col]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    /// Adds `g` into the gradient buffer, creating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(TensorError::Dimension {
                op: "accumulate_grad",
                lhs: self.shape.clone(),
                rhs: vec![g.len()],
            });
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, v)| *b += v),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Plain (untracked) 2-D transpose.
    pub fn transposed(&self) -> Result<Self> {
        let (rows, cols) = as_matrix("transpose", &self.shape)?;
        let mut out = vec![0.0; self.data.len()];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = self.data[r * cols + c];
            }
        }
        Self::new(vec![cols, rows], out)
    }
}

/// Stable identity of a trainable array across graph rebuilds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

impl ParamId {
    pub fn fresh() -> Self {
        static NEXT: AtomicU64 = AtomicU64::new(1);
        ParamId(NEXT.fetch_add(1, Ordering::Relaxed))
    }
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Relu(Var),
    Transpose(Var),
    Concat(Var, Var),
    SelectRows(Var, Vec<usize>),
    Sum(Var),
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    ReverseGradient(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Operation record for one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, Vec<Var>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape, t.data, Op::Leaf, false))
    }

    /// A differentiable leaf not tied to any parameter.
    pub fn variable(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, true)
    }

    /// A differentiable leaf whose gradient can later be collected by id.
    pub fn param(&mut self, id: ParamId, t: &Tensor) -> Var {
        let v = self.variable(t);
        self.params.entry(id).or_default().push(v);
        v
    }

    /// Copies the value of `v` into a fresh constant leaf, cutting the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = self.node(v);
        let (shape, data) = (n.shape.clone(), n.data.clone());
        self.push(shape, data, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let n = self.node(v);
        assert_eq!(n.data.len(), 1, "scalar() on shape {:?}", n.shape);
        n.data[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor {
            shape: n.shape.clone(),
            data: n.data.clone(),
            grad: self.grads[v.0].clone(),
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Sum of the gradients of every leaf registered under `id`.
    pub fn param_grad(&self, id: ParamId) -> Option<Vec<f64>> {
        let vars = self.params.get(&id)?;
        let mut total: Option<Vec<f64>> = None;
        for v in vars {
            if let Some(g) = self.grad(*v) {
                match &mut total {
                    Some(t) => t.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                    None => total = Some(g.to_vec()),
                }
            }
        }
        total
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    // ---- operations -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::Dimension {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a),
            (k, 1),
            self.value(b),
            (n, 1),
            &mut out,
            0.0,
        );
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let shape = self.shape(a).to_vec();
        self.push(shape, data, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let data = self.value(a).iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires_grad(a);
        self.push(shape, data, Op::Scale(a, factor), rg)
    }

    /// Adds a feature vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (rows, cols) = as_matrix("add_row", self.shape(x))?;
        if self.shape(row) != [cols] {
            return Err(TensorError::Dimension {
                op: "add_row",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        let mut data = self.value(x).to_vec();
        let r = self.value(row);
        for chunk in data.chunks_exact_mut(cols.max(1)).take(rows) {
            chunk.iter_mut().zip(r).for_each(|(d, b)| *d += b);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x) || self.requires_grad(row);
        Ok(self.push(shape, data, Op::AddRow(x, row), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.value(a).iter().map(|x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires_grad(a);
        self.push(shape, data, Op::Relu(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = as_matrix("transpose", self.shape(a))?;
        let src = self.value(a);
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = src[r * cols + c];
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push(vec![cols, rows], out, Op::Transpose(a), rg))
    }

    /// Concatenates along the last (feature) axis; `a` occupies the leading
    /// columns.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let compatible = sa.len() == sb.len()
            && !sa.is_empty()
            && sa[..sa.len() - 1] == sb[..sb.len() - 1];
        if !compatible {
            return Err(TensorError::Dimension {
                op: "concat",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (ca, cb) = (*sa.last().unwrap(), *sb.last().unwrap());
        let rows: usize = sa[..sa.len() - 1].iter().product();
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            out.extend_from_slice(&va[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&vb[r * cb..(r + 1) * cb]);
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(shape, out, Op::Concat(a, b), rg))
    }

    /// Gathers rows of a 2-D value; indices may repeat.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (n, cols) = as_matrix("select_rows", self.shape(a))?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(TensorError::Dimension {
                op: "select_rows",
                lhs: self.shape(a).to_vec(),
                rhs: vec![bad],
            });
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            out.extend_from_slice(&src[r * cols..(r + 1) * cols]);
        }
        let rg = self.requires_grad(a);
        Ok(self.push(
            vec![rows.len(), cols],
            out,
            Op::SelectRows(a, rows.to_vec()),
            rg,
        ))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.requires_grad(a);
        self.push(vec![], vec![s], Op::Sum(a), rg)
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, using the
    /// max-subtracted log-sum-exp.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, classes) = as_matrix("softmax_cross_entropy", self.shape(logits))?;
        if n != labels.len() || n == 0 {
            return Err(TensorError::Dimension {
                op: "softmax_cross_entropy",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(TensorError::Label {
                row,
                label,
                classes,
            });
        }
        let z = self.value(logits);
        if z.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite("softmax_cross_entropy"));
        }
        let mut probs = vec![0.0; z.len()];
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &z[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (p, &v) in probs[r * classes..(r + 1) * classes].iter_mut().zip(row) {
                *p = (v - max).exp();
                denom += *p;
            }
            probs[r * classes..(r + 1) * classes]
                .iter_mut()
                .for_each(|p| *p /= denom);
            total += denom.ln() - (row[label] - max);
        }
        let rg = self.requires_grad(logits);
        Ok(self.push(
            vec![],
            vec![total / n as f64],
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Identity on the forward pass; multiplies the incoming gradient by -1 on
    /// the backward pass.
    pub fn gradient_reversal(&mut self, a: Var) -> Var {
        let data = self.value(a).to_vec();
        let shape = self.shape(a).to_vec();
        let rg = self.requires_grad(a);
        self.push(shape, data, Op::ReverseGradient(a), rg)
    }

    // ---- backward ---------------------------------------------------------

    /// Propagates d`loss`/d(node) to every node the loss depends on.
    ///
    /// Intermediate gradients are recomputed on each call; leaf gradients
    /// accumulate until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.node(loss).data.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        if !self.requires_grad(loss) {
            return Err(TensorError::Contract(
                "loss does not depend on any differentiable leaf".into(),
            ));
        }
        for (node, grad) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) {
                *grad = None;
            }
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(up) = self.grads[i].take() else {
                continue;
            };
            self.apply_vjp(i, &up);
            self.grads[i] = Some(up);
        }
        Ok(())
    }

    fn apply_vjp(&mut self, i: usize, up: &[f64]) {
        let Self { nodes, grads, .. } = self;
        let node = &nodes[i];
        let wants = |v: &Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let len = nodes[v.0].data.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                if wants(a) {
                    // dA += dC · Bᵀ
                    let bv = &nodes[b.0].data;
                    acc(*a, &mut |g| gemm(m, n, k, up, (n, 1), bv, (1, n), g, 1.0));
                }
                if wants(b) {
                    // dB += Aᵀ · dC
                    let av = &nodes[a.0].data;
                    acc(*b, &mut |g| gemm(k, m, n, av, (1, k), up, (n, 1), g, 1.0));
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if wants(v) {
                        acc(*v, &mut |g| add_into(g, up));
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    acc(*a, &mut |g| add_into(g, up));
                }
                if wants(b) {
                    acc(*b, &mut |g| g.iter_mut().zip(up).for_each(|(g, u)| *g -= u));
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    let other = &nodes[b.0].data;
                    acc(*a, &mut |g| {
                        for ((g, u), o) in g.iter_mut().zip(up).zip(other) {
                            *g += u * o;
                        }
                    });
                }
                if wants(b) {
                    let other = &nodes[a.0].data;
                    acc(*b, &mut |g| {
                        for ((g, u), o) in g.iter_mut().zip(up).zip(other) {
                            *g += u * o;
                        }
                    });
                }
            }
            Op::Scale(a, factor) => {
                if wants(a) {
                    acc(*a, &mut |g| g.iter_mut().zip(up).for_each(|(g, u)| *g += u * factor));
                }
            }
            Op::AddRow(x, row) => {
                if wants(x) {
                    acc(*x, &mut |g| add_into(g, up));
                }
                if wants(row) {
                    let cols = nodes[row.0].data.len();
                    acc(*row, &mut |g| {
                        for chunk in up.chunks_exact(cols.max(1)) {
                            add_into(g, chunk);
                        }
                    });
                }
            }
            Op::Relu(a) => {
                if wants(a) {
                    let input = &nodes[a.0].data;
                    acc(*a, &mut |g| {
                        for ((g, u), x) in g.iter_mut().zip(up).zip(input) {
                            if *x > 0.0 {
                                *g += u;
                            }
                        }
                    });
                }
            }
            Op::Transpose(a) => {
                if wants(a) {
                    let (rows, cols) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                    acc(*a, &mut |g| {
                        for r in 0..rows {
                            for c in 0..cols {
                                g[r * cols + c] += up[c * rows + r];
                            }
                        }
                    });
                }
            }
            Op::Concat(a, b) => {
                let ca = *nodes[a.0].shape.last().unwrap();
                let cb = *nodes[b.0].shape.last().unwrap();
                let width = ca + cb;
                let rows = if width == 0 { 0 } else { up.len() / width };
                if wants(a) {
                    acc(*a, &mut |g| {
                        for r in 0..rows {
                            add_into(&mut g[r * ca..(r + 1) * ca], &up[r * width..r * width + ca]);
                        }
                    });
                }
                if wants(b) {
                    acc(*b, &mut |g| {
                        for r in 0..rows {
                            add_into(
                                &mut g[r * cb..(r + 1) * cb],
                                &up[r * width + ca..(r + 1) * width],
                            );
                        }
                    });
                }
            }
            Op::SelectRows(a, rows) => {
                if wants(a) {
                    let cols = nodes[a.0].shape[1];
                    acc(*a, &mut |g| {
                        for (i, &r) in rows.iter().enumerate() {
                            add_into(&mut g[r * cols..(r + 1) * cols], &up[i * cols..(i + 1) * cols]);
                        }
                    });
                }
            }
            Op::Sum(a) => {
                if wants(a) {
                    acc(*a, &mut |g| g.iter_mut().for_each(|g| *g += up[0]));
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if wants(logits) {
                    let classes = nodes[logits.0].shape[1];
                    let scale = up[0] / labels.len() as f64;
                    acc(*logits, &mut |g| {
                        for (r, &label) in labels.iter().enumerate() {
                            let base = r * classes;
                            for c in 0..classes {
                                let onehot = if c == label { 1.0 } else { 0.0 };
                                g[base + c] += scale * (probs[base + c] - onehot);
                            }
                        }
                    });
                }
            }
            Op::ReverseGradient(a) => {
                if wants(a) {
                    acc(*a, &mut |g| g.iter_mut().zip(up).for_each(|(g, u)| *g -= u));
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn as_matrix(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(TensorError::Dimension {
            op,
            lhs: shape.to_vec(),
            rhs: vec![],
        }),
    }
}

/// `c = beta * c + a · b` for an `m×k` by `k×n` product where `a` and `b` are
/// addressed through (row stride, column stride) pairs and `c` is dense
/// row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len());
    assert!((k - 1) * rsb + (n - 1) * csb < b.len());
    // SAFETY: the asserts above bound every element the kernel reads, and `c`
    // is exactly m×n with row stride n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.get2(i, p) * b.get2(p, j);
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut g = Graph::new();
        let eye = g.constant(&Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let m = g.constant(&Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let p = g.matmul(eye, m).unwrap();
        assert_eq!(g.value(p), &[1.0, 2.0, 3.0, 4.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = g.constant(&Tensor::zeros(&[2, 3]));
        let any = g.constant(&random(&mut rng, &[3, 4]));
        let p = g.matmul(z, any).unwrap();
        assert_eq!(g.shape(p), &[2, 4]);
        assert!(g.value(p).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let (a, b) = (random(&mut rng, &[3, 3]), random(&mut rng, &[3, 3]));
            let mut g = Graph::new();
            let (va, vb) = (g.constant(&a), g.constant(&b));
            let p = g.matmul(va, vb).unwrap();
            for (x, y) in g.value(p).iter().zip(naive_matmul(&a, &b)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(&Tensor::zeros(&[2, 3]));
        let b = g.constant(&Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::Dimension {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3] vs [2, 3]"));
    }

    #[test]
    fn relu_concat_transpose() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let r = g.relu(x);
        assert_eq!(g.value(r), &[0.0, 0.0, 2.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(&mut rng, &[4, 3]);
        let b = random(&mut rng, &[4, 5]);
        let (va, vb) = (g.constant(&a), g.constant(&b));
        let c = g.concat(va, vb).unwrap();
        assert_eq!(g.shape(c), &[4, 8]);
        let ct = g.tensor(c);
        for r in 0..4 {
            for col in 0..3 {
                assert_eq!(ct.get2(r, col), a.get2(r, col));
            }
            for col in 0..5 {
                assert_eq!(ct.get2(r, 3 + col), b.get2(r, col));
            }
        }

        let m = random(&mut rng, &[2, 3]);
        let vm = g.constant(&m);
        let t1 = g.transpose(vm).unwrap();
        let t2 = g.transpose(t1).unwrap();
        assert_eq!(g.shape(t1), &[3, 2]);
        assert_eq!(g.value(t2), m.data());
    }

    #[test]
    fn concat_rejects_mismatched_rows() {
        let mut g = Graph::new();
        let a = g.constant(&Tensor::zeros(&[2, 3]));
        let b = g.constant(&Tensor::zeros(&[3, 3]));
        assert!(matches!(g.concat(a, b), Err(TensorError::Dimension { .. })));
    }

    #[test]
    fn cross_entropy_reference_values() {
        let mut g = Graph::new();
        let z = g.constant(&Tensor::zeros(&[1, 2]));
        let l = g.softmax_cross_entropy(z, &[1]).unwrap();
        assert!((g.scalar(l) - std::f64::consts::LN_2).abs() < 1e-15);

        let z = g.constant(&Tensor::from_rows(&[vec![0.0, 1000.0, 0.0]]).unwrap());
        let l = g.softmax_cross_entropy(z, &[1]).unwrap();
        assert!(g.scalar(l).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_errors() {
        let mut g = Graph::new();
        let z = g.constant(&Tensor::zeros(&[2, 3]));
        assert_eq!(
            g.softmax_cross_entropy(z, &[0, 3]).unwrap_err(),
            TensorError::Label {
                row: 1,
                label: 3,
                classes: 3
            }
        );
        let z = g.constant(&Tensor::from_rows(&[vec![f64::NAN, 0.0]]).unwrap());
        assert!(matches!(
            g.softmax_cross_entropy(z, &[0]),
            Err(TensorError::NonFinite(_))
        ));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot_over_n() {
        let mut g = Graph::new();
        let z = g.variable(&Tensor::from_rows(&[vec![1.0, 2.0], vec![0.5, -0.5]]).unwrap());
        let l = g.softmax_cross_entropy(z, &[0, 1]).unwrap();
        g.backward(l).unwrap();
        let grad = g.grad(z).unwrap();
        let p0 = 1.0 / (1.0 + (1.0f64).exp());
        let p1 = 1.0 / (1.0 + (-1.0f64).exp());
        let expected = [(p0 - 1.0) / 2.0, (1.0 - p0) / 2.0, p1 / 2.0, (1.0 - p1 - 1.0) / 2.0];
        for (a, b) in grad.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn gradient_reversal_examples() {
        let mut g = Graph::new();
        let x = g.variable(&Tensor::new(vec![2], vec![3.5, -2.0]).unwrap());
        let r = g.gradient_reversal(x);
        assert_eq!(g.value(r), &[3.5, -2.0]);
        let s = g.sum(r);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[-1.0, -1.0]);

        let mut g = Graph::new();
        let x = g.variable(&Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap());
        let twice = g.scale(x, 2.0);
        let r = g.gradient_reversal(twice);
        let s = g.sum(r);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[-2.0, -2.0, -2.0]);
    }

    #[test]
    fn quadratic_gradient_and_accumulation() {
        let mut g = Graph::new();
        let x = g.variable(&Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0, 8.0, 12.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.variable(&Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(TensorError::Contract(_))));
    }

    #[test]
    fn select_rows_scatters_gradient() {
        let mut g = Graph::new();
        let x = g.variable(&Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let s = g.select_rows(x, &[1, 1, 0]).unwrap();
        assert_eq!(g.value(s), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        let l = g.sum(s);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn param_grads_sum_over_registrations() {
        let id = ParamId::fresh();
        let t = Tensor::new(vec![2], vec![1.0, -1.0]).unwrap();
        let mut g = Graph::new();
        let a = g.param(id, &t);
        let b = g.param(id, &t);
        let s = g.add(a, b).unwrap();
        let l = g.sum(s);
        g.backward(l).unwrap();
        assert_eq!(g.param_grad(id).unwrap(), vec![2.0, 2.0]);
    }

    fn central_difference(f: &dyn Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Vec<f64> {
        (0..x.numel())
            .map(|i| {
                let mut plus = x.clone();
                plus.data_mut()[i] += h;
                let mut minus = x.clone();
                minus.data_mut()[i] -= h;
                (f(&plus) - f(&minus)) / (2.0 * h)
            })
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn small_mlp_matches_finite_differences(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&mut rng, &[4, 5]);
            let w1 = random(&mut rng, &[5, 3]);
            let b1 = random(&mut rng, &[3]);
            let w2 = random(&mut rng, &[6, 2]);
            let labels = [0usize, 1, 1, 0];
            let build = |w1: &Tensor, g: &mut Graph| -> (Var, Var) {
                let vx = g.constant(&x);
                let vw = g.variable(w1);
                let vb = g.constant(&b1);
                let h = g.matmul(vx, vw).unwrap();
                let h = g.add_row(h, vb).unwrap();
                let h = g.relu(h);
                let picked = g.select_rows(h, &[3, 2, 1, 0]).unwrap();
                let cat = g.concat(h, picked).unwrap();
                let w = g.constant(&w2);
                let z = g.matmul(cat, w).unwrap();
                (vw, g.softmax_cross_entropy(z, &labels).unwrap())
            };
            let mut g = Graph::new();
            let (vw, loss) = build(&w1, &mut g);
            g.backward(loss).unwrap();
            let analytic = g.grad(vw).unwrap().to_vec();
            let f = |w: &Tensor| {
                let mut g = Graph::new();
                let (_, l) = build(w, &mut g);
                g.scalar(l)
            };
            let numeric = central_difference(&f, &w1, 1e-6);
            for (a, n) in analytic.iter().zip(&numeric) {
                prop_assert!((a - n).abs() / a.abs().max(1.0) < 1e-5, "{} vs {}", a, n);
            }
        }

        #[test]
        fn identical_inputs_give_identical_gradients(seed in any::<u64>()) {
            let run = || {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = random(&mut rng, &[3, 4]);
                let b = random(&mut rng, &[4, 2]);
                let mut g = Graph::new();
                let (va, vb) = (g.variable(&a), g.variable(&b));
                let p = g.matmul(va, vb).unwrap();
                let r = g.relu(p);
                let l = g.sum(r);
                g.backward(l).unwrap();
                (g.value(l).to_vec(), g.grad(va).map(<[f64]>::to_vec), g.grad(vb).map(<[f64]>::to_vec))
            };
            prop_assert_eq!(run(), run());
        }
    }
}
