//! Dense tensors and a tape-based reverse-mode differentiation engine.
//!
//! A [`Graph`] is rebuilt for every forward pass. Operations append nodes in
//! construction order, so the tape is already topologically sorted and
//! [`Graph::backward`] is a single reverse sweep. Model parameters enter the
//! tape by reference (no copy); their gradients come back in a [`Gradients`]
//! record which the caller adds into the parameters' own grad buffers.

use std::borrow::Cow;

use rand::Rng;

use crate::error::{MranError, Result};

/// Dense row-major tensor of `f64` values with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(MranError::Validation(format!(
                "tensor shape must be non-empty with positive dimensions, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(MranError::dim("tensor", &shape, &[values.len()]));
        }
        Ok(Tensor {
            shape,
            values,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![value],
            grad: None,
        }
    }

    pub fn vector(values: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![values.len()], values)
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], values)
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(MranError::dim("from_rows", &[cols], &[bad.len()]));
        }
        Tensor::matrix(rows.len(), cols, rows.concat())
    }

    /// Marks the tensor as a differentiable leaf with a zeroed gradient buffer.
    pub fn with_grad(mut self) -> Self {
        self.grad = Some(vec![0.0; self.values.len()]);
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Adds `delta` into the gradient buffer.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        let shape = self.shape.clone();
        let grad = self
            .grad
            .as_mut()
            .ok_or_else(|| MranError::Usage("tensor does not require grad".into()))?;
        if grad.len() != delta.len() {
            return Err(MranError::dim("accumulate_grad", &shape, &[delta.len()]));
        }
        grad.iter_mut().zip(delta).for_each(|(g, d)| *g += d);
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Width of a matrix; 1 for vectors.
    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.values[r * c..(r + 1) * c]
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.values.len() == 1 {
            Ok(self.values[0])
        } else {
            Err(MranError::Usage(format!(
                "expected a scalar, got shape {:?}",
                self.shape
            )))
        }
    }

    /// Gathers the given rows into a new matrix.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Tensor> {
        let c = self.cols();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= self.rows() {
                return Err(MranError::Usage(format!(
                    "row {r} out of range for {} rows",
                    self.rows()
                )));
            }
            out.extend_from_slice(self.row(r));
        }
        Tensor::matrix(rows.len(), c, out)
    }

    fn plain(shape: Vec<usize>, values: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Tensor {
            shape,
            values,
            grad: None,
        }
    }

    fn as_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(MranError::dim(op, &self.shape, &[0, 0]));
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

/// Handle to a node of one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identity of a trainable parameter, stable across graphs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    Dropout(Var, Vec<f64>),
    Concat(Var, Var),
    LogSoftmax(Var),
    NllSoft(Var, Vec<f64>),
    L1(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Vec<f64>),
    SelectRows(Var, Vec<usize>),
    Sum(Var),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation. Parameters are borrowed for the lifetime `'a`.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    /// Differentiable leaf owned by the graph (used for gradients w.r.t. inputs).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    /// Borrowed parameter. Gradients are reported under `id`.
    pub fn param(&mut self, t: &'a Tensor, id: ParamId) -> Var {
        self.push(Cow::Borrowed(t), Op::Param(id), true)
    }

    /// Borrowed constant, e.g. a frozen parameter.
    pub fn constant_ref(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = Tensor::plain(self.value(v).shape.clone(), self.value(v).values.clone());
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.as_matrix("matmul")?;
        let (k2, n) = tb.as_matrix("matmul")?;
        if k != k2 {
            return Err(MranError::dim("matmul", &ta.shape, &tb.shape));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ta.values[i * k + p];
                // bag-of-features inputs are mostly zeros
                if av == 0.0 {
                    continue;
                }
                let brow = &tb.values[p * n..(p + 1) * n];
                for (o, bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Cow::Owned(Tensor::plain(vec![m, n], out)),
            Op::MatMul(a, b),
            needs,
        ))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let (m, n) = tx.as_matrix("add_bias")?;
        if tb.shape != [n] {
            return Err(MranError::dim("add_bias", &tx.shape, &tb.shape));
        }
        let mut out = tx.values.clone();
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(&tb.values).for_each(|(o, b)| *o += b);
        }
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(
            Cow::Owned(Tensor::plain(vec![m, n], out)),
            Op::AddBias(x, b),
            needs,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = t.values.iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::plain(t.shape.clone(), out);
        let needs = self.needs(x);
        self.push(Cow::Owned(value), Op::Relu(x), needs)
    }

    /// Inverted dropout. Outside training, or at rate 0, returns `x` itself.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(MranError::Config(format!(
                "dropout rate must lie in [0, 1), got {rate}"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let t = self.value(x);
        let mask: Vec<f64> = (0..t.len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out = t.values.iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::plain(t.shape.clone(), out);
        let needs = self.needs(x);
        Ok(self.push(Cow::Owned(value), Op::Dropout(x, mask), needs))
    }

    /// Column-wise concatenation `[a | b]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, p) = ta.as_matrix("concat")?;
        let (m2, q) = tb.as_matrix("concat")?;
        if m != m2 {
            return Err(MranError::dim("concat", &ta.shape, &tb.shape));
        }
        let mut out = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            out.extend_from_slice(&ta.values[i * p..(i + 1) * p]);
            out.extend_from_slice(&tb.values[i * q..(i + 1) * q]);
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Cow::Owned(Tensor::plain(vec![m, p + q], out)),
            Op::Concat(a, b),
            needs,
        ))
    }

    /// Row-wise log-softmax with max-shift stabilisation.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (m, c) = t.as_matrix("log_softmax")?;
        if c < 2 {
            return Err(MranError::dim("log_softmax", &t.shape, &[m, 2]));
        }
        let mut out = Vec::with_capacity(m * c);
        for row in t.values.chunks(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        let needs = self.needs(x);
        Ok(self.push(
            Cow::Owned(Tensor::plain(vec![m, c], out)),
            Op::LogSoftmax(x),
            needs,
        ))
    }

    /// Mean over rows of `-sum_c target[c] * logp[c]` for soft targets.
    pub fn nll_soft(&mut self, logp: Var, target: &Tensor) -> Result<Var> {
        let t = self.value(logp);
        let (m, c) = t.as_matrix("nll_soft")?;
        if target.shape != t.shape {
            return Err(MranError::dim("nll_soft", &t.shape, &target.shape));
        }
        for (r, row) in target.values.chunks(c).enumerate() {
            let total: f64 = row.iter().sum();
            if row.iter().any(|&v| v < 0.0 || !v.is_finite()) || (total - 1.0).abs() > 1e-9 {
                return Err(MranError::Validation(format!(
                    "target row {r} is not a distribution: {row:?}"
                )));
            }
        }
        let loss = -t
            .values
            .iter()
            .zip(&target.values)
            .map(|(lp, y)| if *y == 0.0 { 0.0 } else { lp * y })
            .sum::<f64>()
            / m as f64;
        let needs = self.needs(logp);
        Ok(self.push(
            Cow::Owned(Tensor::scalar(loss)),
            Op::NllSoft(logp, target.values.clone()),
            needs,
        ))
    }

    /// Mean over rows of the row-wise l1 distance.
    pub fn l1_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(MranError::dim("l1_distance", &ta.shape, &tb.shape));
        }
        let m = ta.rows();
        let total: f64 = ta
            .values
            .iter()
            .zip(&tb.values)
            .map(|(x, y)| (x - y).abs())
            .sum();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Cow::Owned(Tensor::scalar(total / m as f64)),
            Op::L1(a, b),
            needs,
        ))
    }

    fn elementwise(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(MranError::dim(name, &ta.shape, &tb.shape));
        }
        let out = ta
            .values
            .iter()
            .zip(&tb.values)
            .map(|(x, y)| f(*x, *y))
            .collect();
        let value = Tensor::plain(ta.shape.clone(), out);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Cow::Owned(value), op, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x);
        let value = Tensor::plain(t.shape.clone(), t.values.iter().map(|v| v * factor).collect());
        let needs = self.needs(x);
        self.push(Cow::Owned(value), Op::Scale(x, factor), needs)
    }

    /// Multiplies row `r` of a matrix by `factors[r]`.
    pub fn scale_rows(&mut self, x: Var, factors: &[f64]) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = t.as_matrix("scale_rows")?;
        if factors.len() != m {
            return Err(MranError::dim("scale_rows", &t.shape, &[factors.len()]));
        }
        let mut out = t.values.clone();
        for (row, f) in out.chunks_mut(n).zip(factors) {
            row.iter_mut().for_each(|v| *v *= f);
        }
        let needs = self.needs(x);
        Ok(self.push(
            Cow::Owned(Tensor::plain(vec![m, n], out)),
            Op::ScaleRows(x, factors.to_vec()),
            needs,
        ))
    }

    /// Gathers rows of a matrix; repeated indices are allowed.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let value = self.value(x).select_rows(rows)?;
        let needs = self.needs(x);
        Ok(self.push(Cow::Owned(value), Op::SelectRows(x, rows.to_vec()), needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).values.iter().sum();
        let needs = self.needs(x);
        self.push(Cow::Owned(Tensor::scalar(total)), Op::Sum(x), needs)
    }

    /// Sum of scalar nodes; an empty list is an error.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| MranError::Usage("add_all of no terms".into()))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(MranError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        // `send` adds a contribution to a parent, allocating lazily
        let mut send = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let len = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape[0], ta.shape[1]);
                let n = tb.shape[1];
                send(*a, &mut |da| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &tb.values[p * n..(p + 1) * n];
                            da[r * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                send(*b, &mut |db| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let av = ta.values[r * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            let drow = &mut db[p * n..(p + 1) * n];
                            drow.iter_mut().zip(grow).for_each(|(d, x)| *d += av * x);
                        }
                    }
                });
            }
            Op::AddBias(x, b) => {
                let n = out.shape[1];
                send(*x, &mut |dx| dx.iter_mut().zip(g).for_each(|(d, v)| *d += v));
                send(*b, &mut |db| {
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                });
            }
            Op::Relu(x) => {
                let tx = self.value(*x);
                send(*x, &mut |dx| {
                    for ((d, v), gv) in dx.iter_mut().zip(&tx.values).zip(g) {
                        if *v > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Dropout(x, mask) => {
                send(*x, &mut |dx| {
                    for ((d, m), gv) in dx.iter_mut().zip(mask).zip(g) {
                        *d += m * gv;
                    }
                });
            }
            Op::Concat(a, b) => {
                let p = self.value(*a).shape[1];
                let q = self.value(*b).shape[1];
                let w = p + q;
                send(*a, &mut |da| {
                    for (r, row) in g.chunks(w).enumerate() {
                        da[r * p..(r + 1) * p]
                            .iter_mut()
                            .zip(&row[..p])
                            .for_each(|(d, v)| *d += v);
                    }
                });
                send(*b, &mut |db| {
                    for (r, row) in g.chunks(w).enumerate() {
                        db[r * q..(r + 1) * q]
                            .iter_mut()
                            .zip(&row[p..])
                            .for_each(|(d, v)| *d += v);
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let c = out.shape[1];
                send(*x, &mut |dx| {
                    for ((drow, yrow), grow) in
                        dx.chunks_mut(c).zip(out.values.chunks(c)).zip(g.chunks(c))
                    {
                        let gsum: f64 = grow.iter().sum();
                        for ((d, y), gv) in drow.iter_mut().zip(yrow).zip(grow) {
                            *d += gv - y.exp() * gsum;
                        }
                    }
                });
            }
            Op::NllSoft(logp, target) => {
                let m = self.value(*logp).shape[0] as f64;
                let scale = -g[0] / m;
                send(*logp, &mut |d| {
                    d.iter_mut().zip(target).for_each(|(d, y)| *d += scale * y);
                });
            }
            Op::L1(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let scale = g[0] / ta.shape[0] as f64;
                let sign = |x: f64, y: f64| {
                    let d = x - y;
                    if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                };
                send(*a, &mut |da| {
                    for ((d, x), y) in da.iter_mut().zip(&ta.values).zip(&tb.values) {
                        *d += scale * sign(*x, *y);
                    }
                });
                send(*b, &mut |db| {
                    for ((d, x), y) in db.iter_mut().zip(&ta.values).zip(&tb.values) {
                        *d -= scale * sign(*x, *y);
                    }
                });
            }
            Op::Add(a, b) => {
                send(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, v)| *d += v));
                send(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, v)| *d += v));
            }
            Op::Sub(a, b) => {
                send(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, v)| *d += v));
                send(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, v)| *d -= v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                send(*a, &mut |d| {
                    for ((d, y), gv) in d.iter_mut().zip(&tb.values).zip(g) {
                        *d += y * gv;
                    }
                });
                send(*b, &mut |d| {
                    for ((d, x), gv) in d.iter_mut().zip(&ta.values).zip(g) {
                        *d += x * gv;
                    }
                });
            }
            Op::Scale(x, factor) => {
                send(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, v)| *d += factor * v));
            }
            Op::ScaleRows(x, factors) => {
                let n = out.shape[1];
                send(*x, &mut |d| {
                    for ((drow, grow), f) in d.chunks_mut(n).zip(g.chunks(n)).zip(factors) {
                        drow.iter_mut().zip(grow).for_each(|(d, v)| *d += f * v);
                    }
                });
            }
            Op::SelectRows(x, rows) => {
                let n = out.cols();
                send(*x, &mut |d| {
                    for (grow, &r) in g.chunks(n).zip(rows) {
                        d[r * n..(r + 1) * n]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(d, v)| *d += v);
                    }
                });
            }
            Op::Sum(x) => {
                send(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0]));
            }
        }
    }
}

/// Result of one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, or `None` when no path reaches it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Whether the loss depends on `v` through any differentiable path.
    pub fn reached(&self, v: Var) -> bool {
        self.grad(v).is_some()
    }

    /// Parameter gradients. A parameter registered several times appears once
    /// per registration; callers sum them.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> + '_ {
        self.params
            .iter()
            .filter_map(|&(id, node)| self.grads[node].as_deref().map(|g| (id, g)))
    }
}

/// Central-difference derivative of `eval` at `point`, one coordinate at a time.
pub fn numeric_gradient<F>(point: &[f64], step: f64, mut eval: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut x = point.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let plus = eval(&x)?;
        x[i] = orig - step;
        let minus = eval(&x)?;
        x[i] = orig;
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

/// Max over coordinates of `|a - n| / max(1e-8, |a| + |n|)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / (a.abs() + n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// Compares the analytic gradient of `f` at `x` with central differences and
/// returns the maximum relative error.
pub fn finite_diff_check<F>(x: &Tensor, step: f64, f: F) -> Result<f64>
where
    F: for<'g> Fn(&mut Graph<'g>, Var) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(MranError::Config(format!("step must be positive, got {step}")));
    }
    let mut g = Graph::new();
    let leaf = g.leaf(Tensor::plain(x.shape.clone(), x.values.clone()));
    let loss = f(&mut g, leaf)?;
    let grads = g.backward(loss)?;
    let analytic = grads
        .grad(leaf)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);
    let numeric = numeric_gradient(&x.values, step, |vals| {
        let mut g = Graph::new();
        let v = g.input(Tensor::plain(x.shape.clone(), vals.to_vec()));
        let out = f(&mut g, v)?;
        g.scalar(out)
    })?;
    Ok(max_relative_error(&analytic, &numeric))
}
