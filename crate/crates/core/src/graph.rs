//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so walking the node list backwards is a reverse
//! topological traversal in which every node is visited exactly once.
//! Parameters are borrowed from a [`ParamStore`] rather than copied.

use std::fmt;

use crate::crf;
use crate::error::{GtiError, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Operation kinds, used for diagnostics and backward fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Param,
    MatVec,
    Linear,
    Add,
    Sub,
    Mul,
    Scale,
    AddConst,
    MulConst,
    Sigmoid,
    Tanh,
    Slice,
    Row,
    StackRows,
    Concat,
    Gather,
    Conv1d,
    MaxRows,
    Sum,
    LogSumExp,
    CrfNll,
}

impl OpKind {
    pub const ALL: [OpKind; 22] = [
        OpKind::Leaf,
        OpKind::Param,
        OpKind::MatVec,
        OpKind::Linear,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::AddConst,
        OpKind::MulConst,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Slice,
        OpKind::Row,
        OpKind::StackRows,
        OpKind::Concat,
        OpKind::Gather,
        OpKind::Conv1d,
        OpKind::MaxRows,
        OpKind::Sum,
        OpKind::LogSumExp,
        OpKind::CrfNll,
    ];
}

impl std::str::FromStr for OpKind {
    type Err = GtiError;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| GtiError::arg(format!("unknown op `{s}`")))
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            OpKind::Leaf => "leaf",
            OpKind::Param => "param",
            OpKind::MatVec => "matvec",
            OpKind::Linear => "linear",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddConst => "add_const",
            OpKind::MulConst => "mul_const",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Slice => "slice",
            OpKind::Row => "row",
            OpKind::StackRows => "stack_rows",
            OpKind::Concat => "concat",
            OpKind::Gather => "gather",
            OpKind::Conv1d => "conv1d",
            OpKind::MaxRows => "max_rows",
            OpKind::Sum => "sum",
            OpKind::LogSumExp => "logsumexp",
            OpKind::CrfNll => "crf_nll",
        };
        f.write_str(name)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatVec(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MulConst(Var, Tensor),
    Sigmoid(Var),
    Tanh(Var),
    Slice {
        a: Var,
        start: usize,
    },
    Row {
        a: Var,
        row: usize,
    },
    StackRows(Vec<Var>),
    Concat(Vec<Var>),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Conv1d {
        input: Var,
        filters: Var,
        bias: Var,
        width: usize,
    },
    MaxRows {
        a: Var,
        argmax: Vec<usize>,
    },
    Sum(Var),
    LogSumExp(Var),
    CrfNll {
        em: Var,
        trans: Var,
        em_grad: Tensor,
        trans_grad: Tensor,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Param(_) => OpKind::Param,
            Op::MatVec(..) => OpKind::MatVec,
            Op::Linear { .. } => OpKind::Linear,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddConst(_) => OpKind::AddConst,
            Op::MulConst(..) => OpKind::MulConst,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Slice { .. } => OpKind::Slice,
            Op::Row { .. } => OpKind::Row,
            Op::StackRows(_) => OpKind::StackRows,
            Op::Concat(_) => OpKind::Concat,
            Op::Gather { .. } => OpKind::Gather,
            Op::Conv1d { .. } => OpKind::Conv1d,
            Op::MaxRows { .. } => OpKind::MaxRows,
            Op::Sum(_) => OpKind::Sum,
            Op::LogSumExp(_) => OpKind::LogSumExp,
            Op::CrfNll { .. } => OpKind::CrfNll,
        }
    }
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `max(v) + ln Σ exp(v - max(v))`.
pub fn logsumexp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(GtiError::arg("logsumexp of an empty vector"));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Ok(max);
    }
    Ok(max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln())
}

pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    fault: Option<OpKind>,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
            fault: None,
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    /// Test hook: the backward rule of `kind` is deliberately skewed.
    #[doc(hidden)]
    pub fn corrupt_backward(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.store.value(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable free input; its gradient is available via
    /// [`Graph::backward_inputs`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Node for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let p = self.store.get(id);
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            requires_grad: p.trainable(),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    fn dim_err(&self, op: &'static str, a: Var, b: Var) -> GtiError {
        GtiError::Dimension {
            op,
            left: self.shape(a).to_vec(),
            right: self.shape(b).to_vec(),
        }
    }

    /// `y = W x` for `W: [r, c]`, `x: [c]`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (wt, xt) = (self.value(w), self.value(x));
        if wt.shape().len() != 2 || xt.shape().len() != 1 || wt.cols() != xt.numel() {
            return Err(self.dim_err("matvec", w, x));
        }
        let y: Vec<f64> = (0..wt.rows())
            .map(|i| wt.row(i).iter().zip(xt.data()).map(|(a, b)| a * b).sum())
            .collect();
        let rg = self.rg(&[w, x]);
        Ok(self.push(Tensor::vector(y), Op::MatVec(w, x), rg))
    }

    /// Row-wise affine map `Y = X Wᵀ + b` for `X: [n, d_in]`, `W: [d_out, d_in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xt, wt) = (self.value(x), self.value(w));
        if xt.shape().len() != 2 || wt.shape().len() != 2 || xt.cols() != wt.cols() {
            return Err(self.dim_err("linear", x, w));
        }
        let (n, d_out) = (xt.rows(), wt.rows());
        if let Some(b) = b {
            if self.value(b).shape() != [d_out] {
                return Err(self.dim_err("linear bias", w, b));
            }
        }
        let mut y = Tensor::zeros(&[n, d_out]);
        for r in 0..n {
            let xr = xt.row(r);
            let yr = y.row_mut(r);
            for (o, yo) in yr.iter_mut().enumerate() {
                *yo = wt.row(o).iter().zip(xr).map(|(a, b)| a * b).sum();
            }
        }
        if let Some(b) = b {
            let bt = self.value(b).data().to_vec();
            for r in 0..n {
                for (yo, bo) in y.row_mut(r).iter_mut().zip(&bt) {
                    *yo += bo;
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(y, Op::Linear { x, w, b }, rg))
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &'static str, f: fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(self.dim_err(name, a, b));
        }
        let data = at.data().iter().zip(bt.data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(at.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, c), rg)
    }

    /// Adds the constant `c` to every element.
    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(t, Op::AddConst(a), rg)
    }

    /// Elementwise product with a constant tensor (e.g. a dropout mask).
    pub fn mul_const(&mut self, a: Var, mask: Tensor) -> Result<Var> {
        let at = self.value(a);
        if at.shape() != mask.shape() {
            return Err(GtiError::Dimension {
                op: "mul_const",
                left: at.shape().to_vec(),
                right: mask.shape().to_vec(),
            });
        }
        let data = at.data().iter().zip(mask.data()).map(|(x, m)| x * m).collect();
        let t = Tensor::new(at.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::MulConst(a, mask), rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(t, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::tanh);
        let rg = self.rg(&[a]);
        self.push(t, Op::Tanh(a), rg)
    }

    /// Contiguous sub-vector `a[start..start + len]`.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let at = self.value(a);
        if at.shape().len() != 1 || start + len > at.numel() {
            return Err(GtiError::Dimension {
                op: "slice",
                left: at.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let t = Tensor::vector(at.data()[start..start + len].to_vec());
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Slice { a, start }, rg))
    }

    pub fn row(&mut self, a: Var, row: usize) -> Result<Var> {
        let at = self.value(a);
        if at.shape().len() != 2 || row >= at.rows() {
            return Err(GtiError::Dimension {
                op: "row",
                left: at.shape().to_vec(),
                right: vec![row],
            });
        }
        let t = Tensor::vector(at.row(row).to_vec());
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Row { a, row }, rg))
    }

    /// Stacks equal-length vectors into a `[n, d]` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let first = rows.first().ok_or_else(|| GtiError::arg("stack_rows of no rows"))?;
        let d = self.value(*first).numel();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            let rt = self.value(r);
            if rt.shape() != [d] {
                return Err(self.dim_err("stack_rows", *first, r));
            }
            data.extend_from_slice(rt.data());
        }
        let t = Tensor::matrix(rows.len(), d, data)?;
        let rg = self.rg(rows);
        Ok(self.push(t, Op::StackRows(rows.to_vec()), rg))
    }

    /// Concatenation along the last axis. Vectors join end to end; matrices
    /// must agree on row count and join column-wise.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| GtiError::arg("concat of no parts"))?;
        let rank = self.shape(first).len();
        let rows = self.value(first).rows();
        let mut cols = 0;
        for &p in parts {
            let pt = self.value(p);
            if pt.shape().len() != rank || pt.rows() != rows || !(rank == 1 || rank == 2) {
                return Err(self.dim_err("concat", first, p));
            }
            cols += pt.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let pt = self.value(p);
                if rank == 1 {
                    data.extend_from_slice(pt.data());
                } else {
                    data.extend_from_slice(pt.row(r));
                }
            }
        }
        let shape = if rank == 1 { vec![cols] } else { vec![rows, cols] };
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::Concat(parts.to_vec()), rg))
    }

    /// Gathers table rows into a `[ids.len(), d]` matrix.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if tt.shape().len() != 2 {
            return Err(self.dim_err("gather", table, table));
        }
        let mut data = Vec::with_capacity(ids.len() * tt.cols());
        for &id in ids {
            if id >= tt.rows() {
                return Err(GtiError::Lookup {
                    index: id,
                    rows: tt.rows(),
                });
            }
            data.extend_from_slice(tt.row(id));
        }
        let t = Tensor::matrix(ids.len(), tt.cols(), data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            t,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Valid 1-d convolution over rows: `input: [l, d]`, `filters: [f, width·d]`,
    /// `bias: [f]` → `[l - width + 1, f]`.
    pub fn conv1d(&mut self, input: Var, filters: Var, bias: Var, width: usize) -> Result<Var> {
        let (it, ft, bt) = (self.value(input), self.value(filters), self.value(bias));
        let (l, d) = (it.rows(), it.cols());
        if it.shape().len() != 2
            || width == 0
            || l < width
            || ft.shape().len() != 2
            || ft.cols() != width * d
            || bt.shape() != [ft.rows()]
        {
            return Err(self.dim_err("conv1d", input, filters));
        }
        let n_out = l - width + 1;
        let nf = ft.rows();
        let mut out = Tensor::zeros(&[n_out, nf]);
        for p in 0..n_out {
            // rows p..p+width are contiguous, so the window is one flat slice
            let window = &it.data()[p * d..(p + width) * d];
            for f in 0..nf {
                let s: f64 = ft.row(f).iter().zip(window).map(|(a, b)| a * b).sum();
                out.set(p, f, s + bt.data()[f]);
            }
        }
        let rg = self.rg(&[input, filters, bias]);
        Ok(self.push(
            out,
            Op::Conv1d {
                input,
                filters,
                bias,
                width,
            },
            rg,
        ))
    }

    /// Column-wise max over rows (max-over-time pooling). Ties go to the
    /// earliest row.
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        let at = self.value(a);
        if at.shape().len() != 2 || at.rows() == 0 {
            return Err(self.dim_err("max_rows", a, a));
        }
        let mut argmax = vec![0usize; at.cols()];
        let mut best = at.row(0).to_vec();
        for r in 1..at.rows() {
            for (c, &x) in at.row(r).iter().enumerate() {
                if x > best[c] {
                    best[c] = x;
                    argmax[c] = r;
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::vector(best), Op::MaxRows { a, argmax }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        let s = logsumexp(self.value(a).data())?;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::LogSumExp(a), rg))
    }

    /// Linear-chain CRF negative log-likelihood of `gold`.
    ///
    /// `em: [n, t]`, `trans: [t + 2, t + 2]` with START = t and STOP = t + 1.
    /// `penalty`, when given, is added to the transitions (0 for permitted,
    /// a large negative constant for forbidden moves).
    pub fn crf_nll(&mut self, em: Var, trans: Var, gold: &[usize], penalty: Option<&Tensor>) -> Result<Var> {
        let (emt, tt) = (self.value(em), self.value(trans));
        let effective;
        let tt = match penalty {
            Some(p) => {
                let mut t = tt.clone();
                t.add_assign(p);
                effective = t;
                &effective
            }
            None => tt,
        };
        let fb = crf::forward_backward(emt, tt)?;
        let gold_score = crf::score_with(emt, tt, gold)?;
        let loss = fb.log_z - gold_score;

        // d loss / d em = marginals - onehot(gold); likewise for transitions.
        let mut em_grad = fb.unary;
        let mut trans_grad = fb.pairwise;
        let t = emt.cols();
        let (start, stop) = (t, t + 1);
        for (i, &y) in gold.iter().enumerate() {
            let v = em_grad.get(i, y);
            em_grad.set(i, y, v - 1.0);
            let from = if i == 0 { start } else { gold[i - 1] };
            let v = trans_grad.get(from, y);
            trans_grad.set(from, y, v - 1.0);
        }
        let last = *gold.last().expect("gold checked non-empty");
        let v = trans_grad.get(last, stop);
        trans_grad.set(last, stop, v - 1.0);

        let rg = self.rg(&[em, trans]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrfNll {
                em,
                trans,
                em_grad,
                trans_grad,
            },
            rg,
        ))
    }

    fn check_scalar(&self, loss: Var) -> Result<()> {
        let t = self.value(loss);
        if !t.is_scalar() {
            return Err(GtiError::arg(format!(
                "backward needs a scalar loss, got shape {:?}",
                t.shape()
            )));
        }
        Ok(())
    }

    /// Gradients of `loss` with respect to every trainable parameter that
    /// took part in its computation.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check_scalar(loss)?;
        let grads = self.propagate(loss);
        let mut out = Gradients::new(self.store.len());
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads[i]) {
                out.accumulate(*id, g);
            }
        }
        Ok(out)
    }

    /// Gradients of `loss` with respect to the given nodes; nodes that do
    /// not influence the loss get zeros.
    pub fn backward_inputs(&self, loss: Var, inputs: &[Var]) -> Result<Vec<Tensor>> {
        self.check_scalar(loss)?;
        let grads = self.propagate(loss);
        Ok(inputs
            .iter()
            .map(|v| grads[v.0].clone().unwrap_or_else(|| Tensor::zeros(self.shape(*v))))
            .collect())
    }

    fn propagate(&self, loss: Var) -> Vec<Option<Tensor>> {
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        let seed_shape = self.shape(loss).to_vec();
        grads[loss.0] = Some(Tensor::filled(&seed_shape, 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let (lo, hi) = grads.split_at_mut(i);
            let Some(g) = hi[0].as_ref() else { continue };
            let skew = if self.fault == Some(node.op.kind()) { 1.01 } else { 1.0 };
            self.backward_node(&node.op, Var(i), g, lo, skew);
        }
        grads
    }

    /// Returns the zero-initialised gradient buffer for `v` if it needs one.
    fn slot<'g>(&self, lo: &'g mut [Option<Tensor>], v: Var) -> Option<&'g mut [f64]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let slot = &mut lo[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        slot.as_mut().map(Tensor::data_mut)
    }

    fn backward_node(&self, op: &Op, out: Var, g: &Tensor, lo: &mut [Option<Tensor>], skew: f64) {
        let gd = g.data();
        match op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatVec(w, x) => {
                let (wt, xt) = (self.value(*w), self.value(*x));
                let c = wt.cols();
                if let Some(dw) = self.slot(lo, *w) {
                    for (i, gi) in gd.iter().enumerate() {
                        for (j, xj) in xt.data().iter().enumerate() {
                            dw[i * c + j] += skew * gi * xj;
                        }
                    }
                }
                if let Some(dx) = self.slot(lo, *x) {
                    for (i, gi) in gd.iter().enumerate() {
                        for (j, dxj) in dx.iter_mut().enumerate() {
                            *dxj += skew * wt.get(i, j) * gi;
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (xt, wt) = (self.value(*x), self.value(*w));
                let (n, d_in, d_out) = (xt.rows(), xt.cols(), wt.rows());
                if let Some(dx) = self.slot(lo, *x) {
                    for r in 0..n {
                        for o in 0..d_out {
                            let go = skew * gd[r * d_out + o];
                            if go == 0.0 {
                                continue;
                            }
                            for (k, wk) in wt.row(o).iter().enumerate() {
                                dx[r * d_in + k] += go * wk;
                            }
                        }
                    }
                }
                if let Some(dw) = self.slot(lo, *w) {
                    for r in 0..n {
                        let xr = xt.row(r);
                        for o in 0..d_out {
                            let go = skew * gd[r * d_out + o];
                            for (k, xk) in xr.iter().enumerate() {
                                dw[o * d_in + k] += go * xk;
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    if let Some(db) = self.slot(lo, *b) {
                        for r in 0..n {
                            for o in 0..d_out {
                                db[o] += skew * gd[r * d_out + o];
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if let Some(da) = self.slot(lo, *a) {
                    for (d, gi) in da.iter_mut().zip(gd) {
                        *d += skew * gi;
                    }
                }
                if let Some(db) = self.slot(lo, *b) {
                    for (d, gi) in db.iter_mut().zip(gd) {
                        *d += skew * sign * gi;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (at, bt) = (self.value(*a), self.value(*b));
                if let Some(da) = self.slot(lo, *a) {
                    for ((d, gi), bi) in da.iter_mut().zip(gd).zip(bt.data()) {
                        *d += skew * gi * bi;
                    }
                }
                if let Some(db) = self.slot(lo, *b) {
                    for ((d, gi), ai) in db.iter_mut().zip(gd).zip(at.data()) {
                        *d += skew * gi * ai;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(da) = self.slot(lo, *a) {
                    for (d, gi) in da.iter_mut().zip(gd) {
                        *d += skew * c * gi;
                    }
                }
            }
            Op::AddConst(a) => {
                if let Some(da) = self.slot(lo, *a) {
                    for (d, gi) in da.iter_mut().zip(gd) {
                        *d += skew * gi;
                    }
                }
            }
            Op::MulConst(a, mask) => {
                if let Some(da) = self.slot(lo, *a) {
                    for ((d, gi), m) in da.iter_mut().zip(gd).zip(mask.data()) {
                        *d += skew * gi * m;
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = self.value(out);
                if let Some(da) = self.slot(lo, *a) {
                    for ((d, gi), s) in da.iter_mut().zip(gd).zip(y.data()) {
                        *d += skew * gi * s * (1.0 - s);
                    }
                }
            }
            Op::Tanh(a) => {
                let y = self.value(out);
                if let Some(da) = self.slot(lo, *a) {
                    for ((d, gi), t) in da.iter_mut().zip(gd).zip(y.data()) {
                        *d += skew * gi * (1.0 - t * t);
                    }
                }
            }
            Op::Slice { a, start } => {
                if let Some(da) = self.slot(lo, *a) {
                    for (d, gi) in da[*start..].iter_mut().zip(gd) {
                        *d += skew * gi;
                    }
                }
            }
            Op::Row { a, row } => {
                let c = self.value(*a).cols();
                if let Some(da) = self.slot(lo, *a) {
                    for (d, gi) in da[row * c..(row + 1) * c].iter_mut().zip(gd) {
                        *d += skew * gi;
                    }
                }
            }
            Op::StackRows(rows) => {
                let d = g.cols();
                for (r, v) in rows.iter().enumerate() {
                    if let Some(dv) = self.slot(lo, *v) {
                        for (x, gi) in dv.iter_mut().zip(&gd[r * d..(r + 1) * d]) {
                            *x += skew * gi;
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for p in parts {
                    let pc = self.value(*p).cols();
                    if let Some(dp) = self.slot(lo, *p) {
                        for r in 0..rows {
                            let src = &gd[r * total + offset..r * total + offset + pc];
                            for (x, gi) in dp[r * pc..(r + 1) * pc].iter_mut().zip(src) {
                                *x += skew * gi;
                            }
                        }
                    }
                    offset += pc;
                }
            }
            Op::Gather { table, ids } => {
                let d = self.value(*table).cols();
                if let Some(dt) = self.slot(lo, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for (x, gi) in dt[id * d..(id + 1) * d].iter_mut().zip(&gd[r * d..(r + 1) * d]) {
                            *x += skew * gi;
                        }
                    }
                }
            }
            Op::Conv1d {
                input,
                filters,
                bias,
                width,
            } => {
                let (it, ft) = (self.value(*input), self.value(*filters));
                let d = it.cols();
                let nf = ft.rows();
                let n_out = g.rows();
                let span = width * d;
                if let Some(di) = self.slot(lo, *input) {
                    for p in 0..n_out {
                        for f in 0..nf {
                            let go = skew * gd[p * nf + f];
                            for (x, w) in di[p * d..p * d + span].iter_mut().zip(ft.row(f)) {
                                *x += go * w;
                            }
                        }
                    }
                }
                if let Some(df) = self.slot(lo, *filters) {
                    for p in 0..n_out {
                        let window = &it.data()[p * d..p * d + span];
                        for f in 0..nf {
                            let go = skew * gd[p * nf + f];
                            for (x, w) in df[f * span..(f + 1) * span].iter_mut().zip(window) {
                                *x += go * w;
                            }
                        }
                    }
                }
                if let Some(db) = self.slot(lo, *bias) {
                    for p in 0..n_out {
                        for f in 0..nf {
                            db[f] += skew * gd[p * nf + f];
                        }
                    }
                }
            }
            Op::MaxRows { a, argmax } => {
                let c = self.value(*a).cols();
                if let Some(da) = self.slot(lo, *a) {
                    for (col, &r) in argmax.iter().enumerate() {
                        da[r * c + col] += skew * gd[col];
                    }
                }
            }
            Op::Sum(a) => {
                let gs = gd[0];
                if let Some(da) = self.slot(lo, *a) {
                    for d in da.iter_mut() {
                        *d += skew * gs;
                    }
                }
            }
            Op::LogSumExp(a) => {
                let lse = self.value(out).item();
                let at = self.value(*a);
                let gs = gd[0];
                if let Some(da) = self.slot(lo, *a) {
                    for (d, x) in da.iter_mut().zip(at.data()) {
                        *d += skew * gs * (x - lse).exp();
                    }
                }
            }
            Op::CrfNll {
                em,
                trans,
                em_grad,
                trans_grad,
            } => {
                let gs = gd[0];
                if let Some(de) = self.slot(lo, *em) {
                    for (d, x) in de.iter_mut().zip(em_grad.data()) {
                        *d += skew * gs * x;
                    }
                }
                if let Some(dt) = self.slot(lo, *trans) {
                    for (d, x) in dt.iter_mut().zip(trans_grad.data()) {
                        *d += skew * gs * x;
                    }
                }
            }
        }
    }
}
