//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Every node holds a dense [`Matrix`] value, so one node can carry a whole
//! batch (`n × t`) and an affine layer is a single matrix product. Node ids
//! increase monotonically and inputs always precede their consumers, so the
//! reverse sweep is a single pass over decreasing ids.
//!
//! Leaves are created either differentiable ([`Tape::var`]) or constant
//! ([`Tape::constant`]). A node requires a gradient when any of its inputs
//! does; [`Tape::stop_gradient`] never does. The reverse sweep only
//! propagates into nodes that require a gradient, which is how the inverse
//! pass of the path-gradient algorithm differentiates with respect to the
//! sample without paying for the parameter gradient.
//!
//! Recording a non-finite value is an error ([`Error::Numeric`]).

use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU32, Ordering};

use crate::math;
use crate::matrix::{gemm, Matrix};
use crate::{Error, Result};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    id: u32,
}

impl Var {
    pub fn id(self) -> usize {
        self.id as usize
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Scalar { label: &'static str, inputs: Vec<u32>, partials: Vec<f64> },
    Add(u32, u32),
    Sub(u32, u32),
    Mul(u32, u32),
    Div(u32, u32),
    Neg(u32),
    Exp(u32),
    Log(u32),
    Tanh(u32),
    Square(u32),
    Scale(u32, f64),
    Shift(u32),
    Sum(u32),
    RowSum(u32),
    Dot(u32, u32),
    Affine { x: u32, w: u32, b: u32 },
    Slice { src: u32, offset: usize },
    RepeatRows(u32),
    SelectCols { src: u32, cols: Vec<usize> },
    MergeCols { a: u32, a_cols: Vec<usize>, b: u32, b_cols: Vec<usize> },
    StopGradient,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Scalar { label, .. } => label,
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(_) => "neg",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Tanh(_) => "tanh",
            Op::Square(_) => "square",
            Op::Scale(..) => "scale",
            Op::Shift(_) => "shift",
            Op::Sum(_) => "sum",
            Op::RowSum(_) => "row_sum",
            Op::Dot(..) => "dot",
            Op::Affine { .. } => "affine",
            Op::Slice { .. } => "slice",
            Op::RepeatRows(_) => "repeat_rows",
            Op::SelectCols { .. } => "select_cols",
            Op::MergeCols { .. } => "merge_cols",
            Op::StopGradient => "stop_gradient",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Matrix,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.id as usize].value
    }

    /// Value of a `1 × 1` node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.id as usize].requires_grad
    }

    fn idx(&self, v: Var) -> Result<u32> {
        if v.tape != self.id {
            return Err(Error::usage("variable belongs to a different tape"));
        }
        Ok(v.id)
    }

    fn node(&self, id: u32) -> &Node {
        &self.nodes[id as usize]
    }

    fn push(&mut self, op: Op, value: Matrix, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(op.name()));
        }
        let id = u32::try_from(self.nodes.len()).map_err(|_| Error::usage("tape overflow"))?;
        self.nodes.push(Node { op, value, requires_grad });
        Ok(Var { tape: self.id, id })
    }

    /// Differentiable leaf.
    pub fn var(&mut self, value: Matrix) -> Result<Var> {
        self.push(Op::Leaf, value, true)
    }

    pub fn scalar_var(&mut self, value: f64) -> Result<Var> {
        self.var(Matrix::scalar(value))
    }

    /// Leaf that never receives an adjoint.
    pub fn constant(&mut self, value: Matrix) -> Result<Var> {
        self.push(Op::Leaf, value, false)
    }

    /// Records a scalar operation with caller-supplied local partials
    /// `∂value/∂input_i`. All inputs must be `1 × 1`.
    pub fn record(&mut self, label: &'static str, inputs: &[Var], value: f64, partials: &[f64]) -> Result<Var> {
        if inputs.len() != partials.len() {
            return Err(Error::usage("record: one partial per input required"));
        }
        let mut ids = Vec::with_capacity(inputs.len());
        let mut requires = false;
        for &v in inputs {
            let id = self.idx(v)?;
            if self.node(id).value.shape() != (1, 1) {
                return Err(Error::usage("record: inputs must be scalars"));
            }
            requires |= self.node(id).requires_grad;
            ids.push(id);
        }
        if partials.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric(label));
        }
        self.push(Op::Scalar { label, inputs: ids, partials: partials.to_vec() }, Matrix::scalar(value), requires)
    }

    fn binary_shape(&self, a: Var, b: Var) -> Result<(u32, u32)> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        if self.node(ia).value.shape() != self.node(ib).value.shape() {
            return Err(Error::usage("elementwise operands differ in shape"));
        }
        Ok((ia, ib))
    }

    fn zip(&mut self, a: Var, b: Var, op: fn(u32, u32) -> Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ia, ib) = self.binary_shape(a, b)?;
        let (na, nb) = (self.node(ia), self.node(ib));
        let (r, c) = na.value.shape();
        let data = na.value.as_slice().iter().zip(nb.value.as_slice()).map(|(&x, &y)| f(x, y)).collect();
        let req = na.requires_grad || nb.requires_grad;
        self.push(op(ia, ib), Matrix::from_vec(r, c, data), req)
    }

    fn unary(&mut self, a: Var, op: fn(u32) -> Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let na = self.node(ia);
        let value = na.value.map(f);
        let req = na.requires_grad;
        self.push(op(ia), value, req)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Div, |x, y| x / y)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Neg, |x| -x)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp, math::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Log, math::ln)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Tanh, math::tanh)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Square, |x| x * x)
    }

    /// `c · a`
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let na = self.node(ia);
        let value = na.value.map(|x| c * x);
        let req = na.requires_grad;
        self.push(Op::Scale(ia, c), value, req)
    }

    /// `a + c`
    pub fn shift(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::Shift, |x| x + c)
    }

    /// Sum of all entries, `1 × 1`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let na = self.node(ia);
        let s = na.value.as_slice().iter().sum();
        let req = na.requires_grad;
        self.push(Op::Sum(ia), Matrix::scalar(s), req)
    }

    /// Per-row sums, `n × 1`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let na = self.node(ia);
        let n = na.value.rows();
        let data = (0..n).map(|i| na.value.row(i).iter().sum()).collect();
        let req = na.requires_grad;
        self.push(Op::RowSum(ia), Matrix::from_vec(n, 1, data), req)
    }

    /// `Σ a ⊙ b`, `1 × 1`.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.binary_shape(a, b)?;
        let (na, nb) = (self.node(ia), self.node(ib));
        let s = math::dot(na.value.as_slice(), nb.value.as_slice());
        let req = na.requires_grad || nb.requires_grad;
        self.push(Op::Dot(ia, ib), Matrix::scalar(s), req)
    }

    /// `x Wᵀ + b` for `x: n × in`, `W: out × in`, `b: 1 × out`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (ix, iw, ib) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let (nx, nw, nb) = (self.node(ix), self.node(iw), self.node(ib));
        let (n, fan_in) = nx.value.shape();
        let (fan_out, w_in) = nw.value.shape();
        if w_in != fan_in || nb.value.shape() != (1, fan_out) {
            return Err(Error::usage("affine: shape mismatch"));
        }
        let mut out = Matrix::zeros(n, fan_out);
        {
            let bias = nb.value.as_slice();
            for i in 0..n {
                out.row_mut(i).copy_from_slice(bias);
            }
        }
        gemm(
            n,
            fan_in,
            fan_out,
            1.0,
            nx.value.as_slice(),
            (fan_in as isize, 1),
            nw.value.as_slice(),
            (1, fan_in as isize),
            1.0,
            out.as_mut_slice(),
        );
        let req = nx.requires_grad || nw.requires_grad || nb.requires_grad;
        self.push(Op::Affine { x: ix, w: iw, b: ib }, out, req)
    }

    /// `rows × cols` view of the flat entries of `src` starting at `offset`.
    pub fn slice(&mut self, src: Var, offset: usize, rows: usize, cols: usize) -> Result<Var> {
        let is = self.idx(src)?;
        let ns = self.node(is);
        let end = offset + rows * cols;
        if end > ns.value.as_slice().len() {
            return Err(Error::usage("slice out of range"));
        }
        let value = Matrix::from_vec(rows, cols, ns.value.as_slice()[offset..end].to_vec());
        let req = ns.requires_grad;
        self.push(Op::Slice { src: is, offset }, value, req)
    }

    /// Repeats a `1 × k` row `n` times.
    pub fn repeat_rows(&mut self, src: Var, n: usize) -> Result<Var> {
        let is = self.idx(src)?;
        let ns = self.node(is);
        if ns.value.rows() != 1 {
            return Err(Error::usage("repeat_rows expects a single row"));
        }
        let k = ns.value.cols();
        let mut data = Vec::with_capacity(n * k);
        for _ in 0..n {
            data.extend_from_slice(ns.value.as_slice());
        }
        let req = ns.requires_grad;
        self.push(Op::RepeatRows(is), Matrix::from_vec(n, k, data), req)
    }

    /// Columns `cols` of `src`, in that order (repeats allowed).
    pub fn select_cols(&mut self, src: Var, cols: &[usize]) -> Result<Var> {
        let is = self.idx(src)?;
        let ns = self.node(is);
        let (n, c) = ns.value.shape();
        if cols.iter().any(|&j| j >= c) {
            return Err(Error::usage("select_cols: column out of range"));
        }
        let mut data = Vec::with_capacity(n * cols.len());
        for i in 0..n {
            let row = ns.value.row(i);
            data.extend(cols.iter().map(|&j| row[j]));
        }
        let req = ns.requires_grad;
        self.push(Op::SelectCols { src: is, cols: cols.to_vec() }, Matrix::from_vec(n, cols.len(), data), req)
    }

    /// Interleaves the columns of `a` and `b` into a matrix with
    /// `a_cols.len() + b_cols.len()` columns; column `j` of `a` lands at
    /// `a_cols[j]`. The two index sets must partition the output columns.
    pub fn merge_cols(&mut self, a: Var, a_cols: &[usize], b: Var, b_cols: &[usize]) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (na, nb) = (self.node(ia), self.node(ib));
        let n = na.value.rows();
        let width = a_cols.len() + b_cols.len();
        if nb.value.rows() != n || na.value.cols() != a_cols.len() || nb.value.cols() != b_cols.len() {
            return Err(Error::usage("merge_cols: shape mismatch"));
        }
        let mut seen = vec![false; width];
        for &j in a_cols.iter().chain(b_cols) {
            if j >= width || seen[j] {
                return Err(Error::usage("merge_cols: columns must partition the output"));
            }
            seen[j] = true;
        }
        let mut out = Matrix::zeros(n, width);
        for i in 0..n {
            let (ra, rb) = (na.value.row(i), nb.value.row(i));
            let ro = out.row_mut(i);
            for (k, &j) in a_cols.iter().enumerate() {
                ro[j] = ra[k];
            }
            for (k, &j) in b_cols.iter().enumerate() {
                ro[j] = rb[k];
            }
        }
        let req = na.requires_grad || nb.requires_grad;
        self.push(Op::MergeCols { a: ia, a_cols: a_cols.to_vec(), b: ib, b_cols: b_cols.to_vec() }, out, req)
    }

    /// Same value as `v`; the reverse sweep stops here.
    pub fn stop_gradient(&mut self, v: Var) -> Result<Var> {
        let iv = self.idx(v)?;
        let value = self.node(iv).value.clone();
        self.push(Op::StopGradient, value, false)
    }

    /// Reverse sweep from a scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Adjoints> {
        let out = self.idx(output)?;
        if self.node(out).value.shape() != (1, 1) {
            return Err(Error::usage("backward expects a scalar output"));
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; out as usize + 1];
        adj[out as usize] = Some(Matrix::scalar(1.0));
        let mut kept: Vec<Option<Matrix>> = vec![None; out as usize + 1];
        for id in (0..=out).rev() {
            let Some(g) = adj[id as usize].take() else { continue };
            let node = self.node(id);
            if node.requires_grad {
                self.propagate(&node.op, &node.value, &g, &mut adj);
            }
            if id == out || matches!(node.op, Op::Leaf) {
                kept[id as usize] = Some(g);
            }
        }
        Ok(Adjoints { tape: self.id, adj: kept })
    }

    /// Adjoints of `output` with respect to each of `wrt`; zero-filled where
    /// `output` does not depend on the node.
    pub fn gradient(&self, output: Var, wrt: &[Var]) -> Result<Vec<Matrix>> {
        for &w in wrt {
            self.idx(w)?;
        }
        let adj = self.backward(output)?;
        Ok(wrt
            .iter()
            .map(|&w| {
                adj.get(w).cloned().unwrap_or_else(|| {
                    let (r, c) = self.value(w).shape();
                    Matrix::zeros(r, c)
                })
            })
            .collect())
    }

    fn propagate(&self, op: &Op, y: &Matrix, g: &Matrix, adj: &mut [Option<Matrix>]) {
        let gs = g.as_slice();
        match op {
            Op::Leaf | Op::StopGradient => {}
            Op::Scalar { inputs, partials, .. } => {
                for (&i, &p) in inputs.iter().zip(partials) {
                    self.acc(adj, i, |a| a[0] += gs[0] * p);
                }
            }
            Op::Add(a, b) => {
                self.acc(adj, *a, |d| add_into(d, gs));
                self.acc(adj, *b, |d| add_into(d, gs));
            }
            Op::Sub(a, b) => {
                self.acc(adj, *a, |d| add_into(d, gs));
                self.acc(adj, *b, |d| d.iter_mut().zip(gs).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.node(*a).value.as_slice(), self.node(*b).value.as_slice());
                self.acc(adj, *a, |d| zip3(d, gs, vb, |g, v| g * v));
                self.acc(adj, *b, |d| zip3(d, gs, va, |g, v| g * v));
            }
            Op::Div(a, b) => {
                let vb = self.node(*b).value.as_slice();
                self.acc(adj, *a, |d| zip3(d, gs, vb, |g, v| g / v));
                let vy = y.as_slice();
                self.acc(adj, *b, |d| {
                    for ((d, &g), (&yy, &bb)) in d.iter_mut().zip(gs).zip(vy.iter().zip(vb)) {
                        *d -= g * yy / bb;
                    }
                });
            }
            Op::Neg(a) => self.acc(adj, *a, |d| d.iter_mut().zip(gs).for_each(|(d, g)| *d -= g)),
            Op::Exp(a) => self.acc(adj, *a, |d| zip3(d, gs, y.as_slice(), |g, v| g * v)),
            Op::Log(a) => {
                let va = self.node(*a).value.as_slice();
                self.acc(adj, *a, |d| zip3(d, gs, va, |g, v| g / v));
            }
            Op::Tanh(a) => self.acc(adj, *a, |d| zip3(d, gs, y.as_slice(), |g, v| g * (1.0 - v * v))),
            Op::Square(a) => {
                let va = self.node(*a).value.as_slice();
                self.acc(adj, *a, |d| zip3(d, gs, va, |g, v| 2.0 * g * v));
            }
            Op::Scale(a, c) => self.acc(adj, *a, |d| d.iter_mut().zip(gs).for_each(|(d, g)| *d += c * g)),
            Op::Shift(a) => self.acc(adj, *a, |d| add_into(d, gs)),
            Op::Sum(a) => self.acc(adj, *a, |d| d.iter_mut().for_each(|d| *d += gs[0])),
            Op::RowSum(a) => {
                let c = self.node(*a).value.cols();
                self.acc(adj, *a, |d| {
                    for (row, &g) in d.chunks_mut(c.max(1)).zip(gs) {
                        row.iter_mut().for_each(|d| *d += g);
                    }
                });
            }
            Op::Dot(a, b) => {
                let (va, vb) = (self.node(*a).value.as_slice(), self.node(*b).value.as_slice());
                self.acc(adj, *a, |d| d.iter_mut().zip(vb).for_each(|(d, v)| *d += gs[0] * v));
                self.acc(adj, *b, |d| d.iter_mut().zip(va).for_each(|(d, v)| *d += gs[0] * v));
            }
            Op::Affine { x, w, b } => {
                let (vx, vw) = (&self.node(*x).value, &self.node(*w).value);
                let (n, fan_in) = vx.shape();
                let fan_out = vw.rows();
                // dx += g · W
                self.acc(adj, *x, |d| {
                    gemm(n, fan_out, fan_in, 1.0, gs, (fan_out as isize, 1), vw.as_slice(), (fan_in as isize, 1), 1.0, d)
                });
                // dW += gᵀ · x
                self.acc(adj, *w, |d| {
                    gemm(fan_out, n, fan_in, 1.0, gs, (1, fan_out as isize), vx.as_slice(), (fan_in as isize, 1), 1.0, d)
                });
                self.acc(adj, *b, |d| {
                    for row in gs.chunks(fan_out.max(1)) {
                        add_into(d, row);
                    }
                });
            }
            Op::Slice { src, offset } => {
                let off = *offset;
                self.acc(adj, *src, |d| add_into(&mut d[off..off + gs.len()], gs));
            }
            Op::RepeatRows(src) => {
                let k = self.node(*src).value.cols();
                self.acc(adj, *src, |d| {
                    for row in gs.chunks(k.max(1)) {
                        add_into(d, row);
                    }
                });
            }
            Op::SelectCols { src, cols } => {
                let c = self.node(*src).value.cols();
                let k = cols.len();
                self.acc(adj, *src, |d| {
                    for (drow, grow) in d.chunks_mut(c.max(1)).zip(gs.chunks(k.max(1))) {
                        for (&j, &gv) in cols.iter().zip(grow) {
                            drow[j] += gv;
                        }
                    }
                });
            }
            Op::MergeCols { a, a_cols, b, b_cols } => {
                let width = g.cols();
                for (src, cols) in [(*a, a_cols), (*b, b_cols)] {
                    let k = cols.len();
                    if k == 0 {
                        continue;
                    }
                    self.acc(adj, src, |d| {
                        for (drow, grow) in d.chunks_mut(k).zip(gs.chunks(width)) {
                            for (dv, &j) in drow.iter_mut().zip(cols.iter()) {
                                *dv += grow[j];
                            }
                        }
                    });
                }
            }
        }
    }

    fn acc(&self, adj: &mut [Option<Matrix>], id: u32, f: impl FnOnce(&mut [f64])) {
        let node = self.node(id);
        if !node.requires_grad {
            return;
        }
        let slot = &mut adj[id as usize];
        let m = slot.get_or_insert_with(|| {
            let (r, c) = node.value.shape();
            Matrix::zeros(r, c)
        });
        f(m.as_mut_slice());
    }
}

#[inline]
fn add_into(d: &mut [f64], g: &[f64]) {
    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
}

#[inline]
fn zip3(d: &mut [f64], g: &[f64], v: &[f64], f: impl Fn(f64, f64) -> f64) {
    for (d, (&g, &v)) in d.iter_mut().zip(g.iter().zip(v)) {
        *d += f(g, v);
    }
}

/// Result of a reverse sweep. Adjoints are retained for leaves and for the
/// output node; a node the output does not depend on has adjoint zero
/// (reported as `None`).
#[derive(Debug)]
pub struct Adjoints {
    tape: u32,
    adj: Vec<Option<Matrix>>,
}

impl Adjoints {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        if v.tape != self.tape {
            return None;
        }
        self.adj.get(v.id as usize).and_then(Option::as_ref)
    }

    /// Scalar adjoint, zero when unreachable.
    pub fn scalar(&self, v: Var) -> f64 {
        self.get(v).map_or(0.0, Matrix::item)
    }
}
