//! Eagerly evaluated computation graph with reverse-mode differentiation.
//!
//! Every operation computes its value immediately and records how it was
//! produced. [`Graph::grad`] walks the record backwards and *builds the
//! gradient out of ordinary graph operations*, so a gradient is itself a
//! differentiable node. This is what makes penalties on input-gradient norms
//! trainable: differentiate once with respect to the inputs, form the
//! penalty, then differentiate again with respect to the parameters.
//!
//! All values are 2-D `f64` matrices. Binary element-wise operations
//! broadcast `1×n`, `m×1` and `1×1` operands the way numpy does.

use ndarray::{s, Array2, Axis};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Sigmoid(Var),
    Softplus(Var),
    SumTo(Var),
    Broadcast(Var),
    SliceCols { a: Var, start: usize },
    PadCols { a: Var, start: usize },
    Concat(Vec<Var>),
    Reshape(Var),
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::Sigmoid(a)
            | Op::Softplus(a)
            | Op::SumTo(a)
            | Op::Broadcast(a)
            | Op::Reshape(a) => vec![*a],
            Op::SliceCols { a, .. } | Op::PadCols { a, .. } => vec![*a],
            Op::Concat(parts) => parts.clone(),
        }
    }
}

struct Node {
    op: Op,
    value: Array2<f64>,
}

/// Arena of nodes. A fresh graph is normally built for every optimizer step.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize| -> usize {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("incompatible shapes for broadcasting: {a:?} vs {b:?}")
        }
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

fn shape_of(a: &Array2<f64>) -> (usize, usize) {
    a.dim()
}

fn sum_to(a: &Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    let (m, n) = a.dim();
    match shape {
        s if s == (m, n) => a.clone(),
        (1, 1) => Array2::from_elem((1, 1), a.sum()),
        (1, c) if c == n => a.sum_axis(Axis(0)).insert_axis(Axis(0)),
        (r, 1) if r == m => a.sum_axis(Axis(1)).insert_axis(Axis(1)),
        other => panic!("cannot reduce {m}x{n} to {other:?}"),
    }
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

    fn push(&mut self, op: Op, value: Array2<f64>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Inserts a leaf. Leaves can be differentiated against.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn scalar_leaf(&mut self, value: f64) -> Var {
        self.leaf(Array2::from_elem((1, 1), value))
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// The value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "node is not a scalar");
        val[[0, 0]]
    }

    /// Copies the value of `v` into a new leaf, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.leaf(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let value = match (ta, tb) {
            (false, false) => av.dot(bv),
            (true, false) => av.t().dot(bv),
            (false, true) => av.dot(&bv.t()),
            (true, true) => av.t().dot(&bv.t()),
        };
        self.push(Op::MatMul { a, b, ta, tb }, value)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Array2<f64> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let shape = broadcast_shape(av.dim(), bv.dim());
        let ab = av.broadcast(shape).expect("broadcast lhs");
        let bb = bv.broadcast(shape).expect("broadcast rhs");
        let mut out = Array2::zeros(shape);
        ndarray::Zip::from(&mut out)
            .and(&ab)
            .and(&bb)
            .for_each(|o, &x, &y| *o = f(x, y));
        out
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| x + y);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| x - y);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| x / y);
        self.push(Op::Div(a, b), v)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a) * factor;
        self.push(Op::Scale(a, factor), v)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(Op::Offset(a), v)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        self.push(Op::Log(a), v)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::sqrt);
        self.push(Op::Sqrt(a), v)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(Op::Sigmoid(a), v)
    }

    /// `ln(1 + e^a)`, evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(softplus);
        self.push(Op::Softplus(a), v)
    }

    /// Piecewise-linear activation `max(x, slope·x)`. The slope mask is a
    /// constant, so second derivatives vanish as they should.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let mask = self.value(a).mapv(|x| if x > 0.0 { 1.0 } else { slope });
        let m = self.leaf(mask);
        self.mul(a, m)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    /// Sums `a` down to `shape`, which must be `1×1`, `1×n` or `m×1`.
    pub fn sum_to(&mut self, a: Var, shape: (usize, usize)) -> Var {
        if self.shape(a) == shape {
            return a;
        }
        let v = sum_to(self.value(a), shape);
        self.push(Op::SumTo(a), v)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.sum_to(a, (1, 1))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let s = self.sum(a);
        self.scale(s, 1.0 / (m * n) as f64)
    }

    /// Column sums as a `1×n` row.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let n = self.shape(a).1;
        self.sum_to(a, (1, n))
    }

    /// Row sums as an `m×1` column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let m = self.shape(a).0;
        self.sum_to(a, (m, 1))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let m = self.shape(a).0;
        let s = self.sum_rows(a);
        self.scale(s, 1.0 / m as f64)
    }

    pub fn mean_cols(&mut self, a: Var) -> Var {
        let n = self.shape(a).1;
        let s = self.sum_cols(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn broadcast(&mut self, a: Var, shape: (usize, usize)) -> Var {
        if self.shape(a) == shape {
            return a;
        }
        let v = self
            .value(a)
            .broadcast(shape)
            .unwrap_or_else(|| panic!("cannot broadcast {:?} to {shape:?}", self.shape(a)))
            .to_owned();
        self.push(Op::Broadcast(a), v)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + width]).to_owned();
        self.push(Op::SliceCols { a, start }, v)
    }

    /// Places `a` at column `start` of a zero matrix `total` columns wide.
    pub fn pad_cols(&mut self, a: Var, start: usize, total: usize) -> Var {
        let (m, w) = self.shape(a);
        let mut v = Array2::zeros((m, total));
        v.slice_mut(s![.., start..start + w]).assign(self.value(a));
        self.push(Op::PadCols { a, start }, v)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        if parts.len() == 1 {
            return parts[0];
        }
        let m = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|p| self.shape(*p).1).sum();
        let mut v = Array2::zeros((m, total));
        let mut off = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.nrows(), m, "concat row mismatch");
            let w = pv.ncols();
            v.slice_mut(s![.., off..off + w]).assign(pv);
            off += w;
        }
        self.push(Op::Concat(parts.to_vec()), v)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, shape: (usize, usize)) -> Var {
        let src = self.value(a);
        assert_eq!(src.len(), shape.0 * shape.1, "reshape size mismatch");
        let flat: Vec<f64> = src.iter().copied().collect();
        let v = Array2::from_shape_vec(shape, flat).expect("reshape");
        self.push(Op::Reshape(a), v)
    }

    /// Row-wise softmax with a constant max-shift for stability.
    pub fn softmax(&mut self, a: Var) -> Var {
        let shift = self
            .value(a)
            .map_axis(Axis(1), |row| row.fold(f64::NEG_INFINITY, |m, &x| m.max(x)))
            .insert_axis(Axis(1));
        let c = self.leaf(shift);
        let z = self.sub(a, c);
        let e = self.exp(z);
        let s = self.sum_cols(e);
        self.div(e, s)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let shift = self
            .value(a)
            .map_axis(Axis(1), |row| row.fold(f64::NEG_INFINITY, |m, &x| m.max(x)))
            .insert_axis(Axis(1));
        let c = self.leaf(shift);
        let z = self.sub(a, c);
        let e = self.exp(z);
        let s = self.sum_cols(e);
        let ls = self.ln(s);
        self.sub(z, ls)
    }

    /// Sum of squares of every entry, as a scalar node.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let sq = self.square(a);
        self.sum(sq)
    }

    fn accumulate(&mut self, adj: &mut [Option<Var>], target: Var, contribution: Var) {
        let slot = &mut adj[target.0];
        *slot = Some(match *slot {
            None => contribution,
            Some(existing) => self.add(existing, contribution),
        });
    }

    /// Gradient contribution shaped back to the operand when it was
    /// broadcast in the forward pass.
    fn unbroadcast(&mut self, g: Var, operand: Var) -> Var {
        let shape = self.shape(operand);
        self.sum_to(g, shape)
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// The returned nodes live in this graph and are differentiable, so
    /// `grad` may be applied again to any scalar built from them. Inputs
    /// that `output` does not depend on get a zero gradient.
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Vec<Var> {
        assert_eq!(self.shape(output), (1, 1), "grad needs a scalar output");
        let n = output.0 + 1;
        let mut relevant = vec![false; n];
        for w in wrt {
            if w.0 < n {
                relevant[w.0] = true;
            }
        }
        for i in 0..n {
            if !relevant[i] {
                relevant[i] = self.nodes[i].op.parents().iter().any(|p| relevant[p.0]);
            }
        }

        let mut adj: Vec<Option<Var>> = vec![None; n];
        adj[output.0] = Some(self.scalar_leaf(1.0));

        for i in (0..n).rev() {
            if !relevant[i] {
                continue;
            }
            let Some(g) = adj[i] else { continue };
            let op = self.nodes[i].op.clone();
            let out = Var(i);
            match op {
                Op::Leaf => {}
                Op::MatMul { a, b, ta, tb } => {
                    if relevant[a.0] {
                        let ga = if ta {
                            self.matmul_t(b, g, tb, true)
                        } else {
                            self.matmul_t(g, b, false, !tb)
                        };
                        self.accumulate(&mut adj, a, ga);
                    }
                    if relevant[b.0] {
                        let gb = if tb {
                            self.matmul_t(g, a, true, ta)
                        } else {
                            self.matmul_t(a, g, !ta, false)
                        };
                        self.accumulate(&mut adj, b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if relevant[a.0] {
                        let ga = self.unbroadcast(g, a);
                        self.accumulate(&mut adj, a, ga);
                    }
                    if relevant[b.0] {
                        let gb = self.unbroadcast(g, b);
                        self.accumulate(&mut adj, b, gb);
                    }
                }
                Op::Sub(a, b) => {
                    if relevant[a.0] {
                        let ga = self.unbroadcast(g, a);
                        self.accumulate(&mut adj, a, ga);
                    }
                    if relevant[b.0] {
                        let ng = self.neg(g);
                        let gb = self.unbroadcast(ng, b);
                        self.accumulate(&mut adj, b, gb);
                    }
                }
                Op::Mul(a, b) => {
                    if relevant[a.0] {
                        let t = self.mul(g, b);
                        let ga = self.unbroadcast(t, a);
                        self.accumulate(&mut adj, a, ga);
                    }
                    if relevant[b.0] {
                        let t = self.mul(g, a);
                        let gb = self.unbroadcast(t, b);
                        self.accumulate(&mut adj, b, gb);
                    }
                }
                Op::Div(a, b) => {
                    if relevant[a.0] {
                        let t = self.div(g, b);
                        let ga = self.unbroadcast(t, a);
                        self.accumulate(&mut adj, a, ga);
                    }
                    if relevant[b.0] {
                        // d(a/b)/db = -(a/b)/b
                        let t = self.mul(g, out);
                        let t = self.div(t, b);
                        let t = self.neg(t);
                        let gb = self.unbroadcast(t, b);
                        self.accumulate(&mut adj, b, gb);
                    }
                }
                Op::Scale(a, f) => {
                    let ga = self.scale(g, f);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Offset(a) => self.accumulate(&mut adj, a, g),
                Op::Exp(a) => {
                    let ga = self.mul(g, out);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Log(a) => {
                    let ga = self.div(g, a);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Sqrt(a) => {
                    let h = self.scale(g, 0.5);
                    let ga = self.div(h, out);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Sigmoid(a) => {
                    let sq = self.mul(out, out);
                    let d = self.sub(out, sq);
                    let ga = self.mul(g, d);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Softplus(a) => {
                    let s = self.sigmoid(a);
                    let ga = self.mul(g, s);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::SumTo(a) => {
                    let shape = self.shape(a);
                    let ga = self.broadcast(g, shape);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Broadcast(a) => {
                    let ga = self.unbroadcast(g, a);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::SliceCols { a, start } => {
                    let total = self.shape(a).1;
                    let ga = self.pad_cols(g, start, total);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::PadCols { a, start } => {
                    let w = self.shape(a).1;
                    let ga = self.slice_cols(g, start, w);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.shape(p).1;
                        if relevant[p.0] {
                            let gp = self.slice_cols(g, off, w);
                            self.accumulate(&mut adj, p, gp);
                        }
                        off += w;
                    }
                }
                Op::Reshape(a) => {
                    let shape = self.shape(a);
                    let ga = self.reshape(g, shape);
                    self.accumulate(&mut adj, a, ga);
                }
            }
        }

        wrt.iter()
            .map(|w| match adj.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let shape = shape_of(self.value(*w));
                    self.leaf(Array2::zeros(shape))
                }
            })
            .collect()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
