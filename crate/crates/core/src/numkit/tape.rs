//! Reverse-mode differentiation over a linear tape.
//!
//! Every primitive application appends one node holding its output value and
//! enough information to run its vector-Jacobian product. `backward` walks the
//! tape once in reverse order, so gradient accumulation order is fixed and the
//! result is bit-reproducible.

use std::rc::Rc;
use std::str::FromStr;
use std::sync::atomic::{AtomicU32, Ordering};

use super::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, transpose_data, Tensor};
use super::NumError;

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u32,
    idx: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx as usize
    }
}

/// Parameterised primitive kinds accepted by [`Tape::apply`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpKind {
    MatMul,
    Transpose,
    Add,
    Sub,
    Hadamard,
    Scale(f64),
    RowSoftmax,
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
    Sqrt,
    RowMean,
    ConcatCols,
    Sum,
    Mean,
    AddRow,
    MulCol,
    ScaleBy,
}

impl FromStr for OpKind {
    type Err = NumError;

    /// Parses parameterless kinds by name; `scale` and `leaky_relu` take their
    /// defaults (1.0 and 0.2).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "matmul" => OpKind::MatMul,
            "transpose" => OpKind::Transpose,
            "add" => OpKind::Add,
            "sub" => OpKind::Sub,
            "hadamard" => OpKind::Hadamard,
            "scale" => OpKind::Scale(1.0),
            "row_softmax" => OpKind::RowSoftmax,
            "relu" => OpKind::Relu,
            "leaky_relu" => OpKind::LeakyRelu(super::LEAKY_SLOPE),
            "sigmoid" => OpKind::Sigmoid,
            "tanh" => OpKind::Tanh,
            "sqrt" => OpKind::Sqrt,
            "row_mean" => OpKind::RowMean,
            "concat_cols" => OpKind::ConcatCols,
            "sum" => OpKind::Sum,
            "mean" => OpKind::Mean,
            "add_row" => OpKind::AddRow,
            "mul_col" => OpKind::MulCol,
            "scale_by" => OpKind::ScaleBy,
            other => return Err(NumError::UnknownOp(other.to_string())),
        })
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulCol(Var, Var),
    ScaleBy(Var, Var),
    // masked entries carry zero probability, so backward needs no mask
    RowSoftmax(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Sqrt(Var),
    RowMean(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Sum(Var),
    Mean(Var),
    GatherRows(Var, Rc<[usize]>),
    ScatterAddRows(Var, Rc<[usize]>),
    Nll(Var, usize, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of primitive applications, in evaluation order.
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

/// Result of [`Tape::backward`]: d(loss)/d(node) for every node on the tape.
#[derive(Debug)]
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zero when `v` did not participate in the loss.
    pub fn get(&self, v: Var) -> Result<Tensor, NumError> {
        if v.tape != self.tape || v.index() >= self.grads.len() {
            return Err(NumError::TapeMismatch);
        }
        let shape = self.shapes[v.index()].clone();
        Ok(match &self.grads[v.index()] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        })
    }

    /// Raw gradient buffer, `None` for non-participating nodes.
    pub fn raw(&self, v: Var) -> Option<&[f64]> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index()).and_then(|g| g.as_deref())
    }
}

fn check_finite(op: &str, data: &[f64]) -> Result<(), NumError> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NumError::NonFinite(format!("output of {op}")))
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> NumError {
    NumError::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    fn check(&self, v: Var) -> Result<&Node, NumError> {
        if v.tape != self.id {
            return Err(NumError::TapeMismatch);
        }
        self.nodes.get(v.index()).ok_or(NumError::TapeMismatch)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        &self.nodes[v.index()].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node { value, op, requires_grad });
        Var { tape: self.id, idx }
    }

    fn record(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var, NumError> {
        check_finite(name, &data)?;
        let rg = inputs.iter().any(|v| self.nodes[v.index()].requires_grad);
        Ok(self.push(Tensor::from_parts(shape, data), op, rg))
    }

    /// Records a leaf. Gradients flow into it iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    /// Leaf that receives gradients regardless of the tensor's flag.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let t = Tensor::from_parts(t.shape().to_vec(), t.data().to_vec());
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    /// Dynamic entry point: applies `kind` to `inputs`.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var, NumError> {
        for &v in inputs {
            self.check(v)?;
        }
        let arity = |n: usize| -> Result<(), NumError> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(NumError::Shape(format!("{kind:?} takes {n} inputs, got {}", inputs.len())))
            }
        };
        match kind {
            OpKind::ConcatCols => self.concat_cols(inputs),
            OpKind::MatMul
            | OpKind::Add
            | OpKind::Sub
            | OpKind::Hadamard
            | OpKind::AddRow
            | OpKind::MulCol
            | OpKind::ScaleBy => {
                arity(2)?;
                let (a, b) = (inputs[0], inputs[1]);
                match kind {
                    OpKind::MatMul => self.matmul(a, b),
                    OpKind::Add => self.add(a, b),
                    OpKind::Sub => self.sub(a, b),
                    OpKind::Hadamard => self.hadamard(a, b),
                    OpKind::AddRow => self.add_row(a, b),
                    OpKind::MulCol => self.mul_col(a, b),
                    _ => self.scale_by(a, b),
                }
            }
            _ => {
                arity(1)?;
                let a = inputs[0];
                match kind {
                    OpKind::Transpose => self.transpose(a),
                    OpKind::Scale(s) => self.scale(a, s),
                    OpKind::RowSoftmax => self.row_softmax(a),
                    OpKind::Relu => self.relu(a),
                    OpKind::LeakyRelu(s) => self.leaky_relu(a, s),
                    OpKind::Sigmoid => self.sigmoid(a),
                    OpKind::Tanh => self.tanh(a),
                    OpKind::Sqrt => self.sqrt(a),
                    OpKind::RowMean => self.row_mean(a),
                    OpKind::Sum => self.sum(a),
                    _ => self.mean(a),
                }
            }
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (av, bv) = (&self.check(a)?.value, &self.check(b)?.value);
        let (m, k) = av.dims2()?;
        let (k2, n) = bv.dims2()?;
        if k != k2 {
            return Err(shape_err("matmul", av.shape(), bv.shape()));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(av.data(), bv.data(), &mut out, m, k, n);
        self.record("matmul", vec![m, n], out, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumError> {
        let av = &self.check(a)?.value;
        let (r, c) = av.dims2()?;
        let out = transpose_data(av.data(), r, c);
        self.record("transpose", vec![c, r], out, Op::Transpose(a), &[a])
    }

    fn zip_same(
        &self,
        name: &str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Vec<usize>, Vec<f64>), NumError> {
        let (av, bv) = (&self.check(a)?.value, &self.check(b)?.value);
        if av.shape() != bv.shape() {
            return Err(shape_err(name, av.shape(), bv.shape()));
        }
        let out = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok((av.shape().to_vec(), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (shape, out) = self.zip_same("add", a, b, |x, y| x + y)?;
        self.record("add", shape, out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (shape, out) = self.zip_same("sub", a, b, |x, y| x - y)?;
        self.record("sub", shape, out, Op::Sub(a, b), &[a, b])
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (shape, out) = self.zip_same("hadamard", a, b, |x, y| x * y)?;
        self.record("hadamard", shape, out, Op::Hadamard(a, b), &[a, b])
    }

    fn map_unary(&mut self, name: &str, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var, NumError> {
        let av = &self.check(a)?.value;
        let shape = av.shape().to_vec();
        let out = av.data().iter().map(|&x| f(x)).collect();
        self.record(name, shape, out, op, &[a])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, NumError> {
        if !s.is_finite() {
            return Err(NumError::NonFinite("scale factor".into()));
        }
        self.map_unary("scale", a, Op::Scale(a, s), |x| x * s)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, NumError> {
        self.scale(a, -1.0)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, NumError> {
        self.map_unary("relu", a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var, NumError> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(NumError::Domain(format!("leaky-relu slope {slope} outside (0,1)")));
        }
        self.map_unary("leaky_relu", a, Op::LeakyRelu(a, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, NumError> {
        self.map_unary("sigmoid", a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, NumError> {
        self.map_unary("tanh", a, Op::Tanh(a), f64::tanh)
    }

    /// Elementwise square root; negative inputs are clamped to zero first.
    pub fn sqrt(&mut self, a: Var) -> Result<Var, NumError> {
        self.map_unary("sqrt", a, Op::Sqrt(a), |x| x.max(0.0).sqrt())
    }

    /// Adds a `1×c` row vector to every row of an `r×c` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumError> {
        let (av, rv) = (&self.check(a)?.value, &self.check(row)?.value);
        let (r, c) = av.dims2()?;
        if rv.dims2()? != (1, c) {
            return Err(shape_err("add_row", av.shape(), rv.shape()));
        }
        let rd = rv.data();
        let mut out = av.data().to_vec();
        for i in 0..r {
            for (o, &b) in out[i * c..(i + 1) * c].iter_mut().zip(rd) {
                *o += b;
            }
        }
        self.record("add_row", vec![r, c], out, Op::AddRow(a, row), &[a, row])
    }

    /// Scales row `i` of an `r×c` matrix by entry `i` of an `r×1` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var, NumError> {
        let (av, cv) = (&self.check(a)?.value, &self.check(col)?.value);
        let (r, c) = av.dims2()?;
        if cv.dims2()? != (r, 1) {
            return Err(shape_err("mul_col", av.shape(), cv.shape()));
        }
        let cd = cv.data();
        let mut out = av.data().to_vec();
        for i in 0..r {
            for o in &mut out[i * c..(i + 1) * c] {
                *o *= cd[i];
            }
        }
        self.record("mul_col", vec![r, c], out, Op::MulCol(a, col), &[a, col])
    }

    /// Multiplies every entry of `a` by the single value held in `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var, NumError> {
        let (av, sv) = (&self.check(a)?.value, &self.check(s)?.value);
        let k = sv.item()?;
        let shape = av.shape().to_vec();
        let out = av.data().iter().map(|&x| x * k).collect();
        self.record("scale_by", shape, out, Op::ScaleBy(a, s), &[a, s])
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var, NumError> {
        self.softmax_impl(a, None)
    }

    /// Row softmax restricted to entries where `mask` is true; the others
    /// get probability exactly zero. Every row needs at least one live entry.
    pub fn row_softmax_masked(&mut self, a: Var, mask: Rc<[bool]>) -> Result<Var, NumError> {
        self.softmax_impl(a, Some(mask))
    }

    fn softmax_impl(&mut self, a: Var, mask: Option<Rc<[bool]>>) -> Result<Var, NumError> {
        let av = &self.check(a)?.value;
        let (r, c) = av.dims2()?;
        if let Some(m) = &mask {
            if m.len() != r * c {
                return Err(NumError::Shape(format!("softmax mask of length {} for {r}x{c}", m.len())));
            }
        }
        let x = av.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let live = |j: usize| mask.as_ref().is_none_or(|m| m[i * c + j]);
            let row = &x[i * c..(i + 1) * c];
            let mx = (0..c).filter(|&j| live(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                return Err(NumError::Domain(format!("softmax row {i} has no unmasked entry")));
            }
            let o = &mut out[i * c..(i + 1) * c];
            let mut z = 0.0;
            for j in 0..c {
                if live(j) {
                    o[j] = (row[j] - mx).exp();
                    z += o[j];
                }
            }
            for v in o.iter_mut() {
                *v /= z;
            }
        }
        self.record("row_softmax", vec![r, c], out, Op::RowSoftmax(a), &[a])
    }

    /// Mean of each row, giving an `r×1` column.
    pub fn row_mean(&mut self, a: Var) -> Result<Var, NumError> {
        let av = &self.check(a)?.value;
        let (r, c) = av.dims2()?;
        let out = av.data().chunks(c).map(|row| row.iter().sum::<f64>() / c as f64).collect();
        self.record("row_mean", vec![r, 1], out, Op::RowMean(a), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        if parts.is_empty() {
            return Err(NumError::Shape("concat of nothing".into()));
        }
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            dims.push(self.check(p)?.value.dims2()?);
        }
        let r = dims[0].0;
        if dims.iter().any(|d| d.0 != r) {
            return Err(NumError::Shape(format!("concat_cols row counts {dims:?}")));
        }
        let total: usize = dims.iter().map(|d| d.1).sum();
        let mut out = vec![0.0; r * total];
        let mut off = 0;
        for (&p, &(_, c)) in parts.iter().zip(&dims) {
            let src = self.nodes[p.index()].value.data();
            for i in 0..r {
                out[i * total + off..i * total + off + c].copy_from_slice(&src[i * c..(i + 1) * c]);
            }
            off += c;
        }
        self.record("concat_cols", vec![r, total], out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumError> {
        let av = &self.check(a)?.value;
        let (r, c) = av.dims2()?;
        if len == 0 || start + len > c {
            return Err(NumError::Shape(format!("slice {start}..{} of {c} columns", start + len)));
        }
        let d = av.data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&d[i * c + start..i * c + start + len]);
        }
        self.record("slice_cols", vec![r, len], out, Op::SliceCols(a, start), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumError> {
        let s = self.check(a)?.value.data().iter().sum::<f64>();
        self.record("sum", Vec::new(), vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NumError> {
        let av = &self.check(a)?.value;
        let s = av.data().iter().sum::<f64>() / av.numel() as f64;
        self.record("mean", Vec::new(), vec![s], Op::Mean(a), &[a])
    }

    /// Row `k` of the result is row `index[k]` of `a`.
    pub fn gather_rows(&mut self, a: Var, index: Rc<[usize]>) -> Result<Var, NumError> {
        let av = &self.check(a)?.value;
        let (r, c) = av.dims2()?;
        if index.is_empty() {
            return Err(NumError::Shape("gather with empty index".into()));
        }
        let d = av.data();
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index.iter() {
            if i >= r {
                return Err(NumError::Shape(format!("gather index {i} out of {r} rows")));
            }
            out.extend_from_slice(&d[i * c..(i + 1) * c]);
        }
        self.record("gather_rows", vec![index.len(), c], out, Op::GatherRows(a, index), &[a])
    }

    /// Segment sum: row `index[k]` of the `rows×c` result accumulates row `k`
    /// of `a`, in increasing `k`.
    pub fn scatter_add_rows(&mut self, a: Var, index: Rc<[usize]>, rows: usize) -> Result<Var, NumError> {
        let av = &self.check(a)?.value;
        let (r, c) = av.dims2()?;
        if index.len() != r || rows == 0 {
            return Err(NumError::Shape(format!("scatter of {r} rows with {} indices", index.len())));
        }
        let d = av.data();
        let mut out = vec![0.0; rows * c];
        for (k, &i) in index.iter().enumerate() {
            if i >= rows {
                return Err(NumError::Shape(format!("scatter index {i} out of {rows} rows")));
            }
            for (o, &v) in out[i * c..(i + 1) * c].iter_mut().zip(&d[k * c..(k + 1) * c]) {
                *o += v;
            }
        }
        self.record("scatter_add_rows", vec![rows, c], out, Op::ScatterAddRows(a, index), &[a])
    }

    /// Negative log-likelihood of class `target` under a softmax over the
    /// logits in `a` (any shape with one row of values), computed as
    /// `logsumexp(z) - z[target]` with max subtraction.
    pub fn nll(&mut self, a: Var, target: usize) -> Result<Var, NumError> {
        let z = self.check(a)?.value.data();
        if target >= z.len() {
            return Err(NumError::Domain(format!("target {target} with {} classes", z.len())));
        }
        let mx = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - mx).exp()).sum();
        let lse = mx + sum.ln();
        let probs = z.iter().map(|v| (v - mx).exp() / sum).collect();
        let loss = lse - z[target];
        self.record("nll", Vec::new(), vec![loss], Op::Nll(a, target, probs), &[a])
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumError> {
        let node = self.check(loss)?;
        if node.value.numel() != 1 {
            return Err(NumError::NotScalar(node.value.shape().to_vec()));
        }
        let n = loss.index() + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.index()] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.vjp(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { tape: self.id, grads, shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect() })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.index()].requires_grad
    }

    fn vjp(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.index()].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if self.wants(v) {
                let len = self.nodes[v.index()].value.numel();
                let buf = grads[v.index()].get_or_insert_with(|| vec![0.0; len]);
                f(buf);
            }
        };
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2().expect("matrix");
                let n = val(*b).cols();
                let (ad, bd) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |buf| matmul_nt_into(g, bd, buf, m, n, k));
                acc(*b, &mut |buf| matmul_tn_into(ad, g, buf, k, m, n));
            }
            Op::Transpose(a) => {
                let (r, c) = val(*a).dims2().expect("matrix");
                let gt = transpose_data(g, c, r);
                acc(*a, &mut |buf| add_into(buf, &gt));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| add_into(buf, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, &d)| *o -= d));
            }
            Op::Hadamard(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |buf| zip3(buf, g, bd, |d, x| d * x));
                acc(*b, &mut |buf| zip3(buf, g, ad, |d, x| d * x));
            }
            Op::Scale(a, s) => acc(*a, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, &d)| *o += s * d)),
            Op::AddRow(a, row) => {
                let c = val(*a).cols();
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*row, &mut |buf| {
                    for chunk in g.chunks(c) {
                        add_into(buf, chunk);
                    }
                });
            }
            Op::MulCol(a, col) => {
                let c = val(*a).cols();
                let (ad, cd) = (val(*a).data(), val(*col).data());
                acc(*a, &mut |buf| {
                    for (i, (bchunk, gchunk)) in buf.chunks_mut(c).zip(g.chunks(c)).enumerate() {
                        bchunk.iter_mut().zip(gchunk).for_each(|(o, &d)| *o += d * cd[i]);
                    }
                });
                acc(*col, &mut |buf| {
                    for (i, (gchunk, achunk)) in g.chunks(c).zip(ad.chunks(c)).enumerate() {
                        buf[i] += gchunk.iter().zip(achunk).map(|(d, x)| d * x).sum::<f64>();
                    }
                });
            }
            Op::ScaleBy(a, s) => {
                let k = val(*s).data()[0];
                let ad = val(*a).data();
                acc(*a, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, &d)| *o += k * d));
                acc(*s, &mut |buf| buf[0] += g.iter().zip(ad).map(|(d, x)| d * x).sum::<f64>());
            }
            Op::RowSoftmax(a) => {
                let c = node.value.cols();
                acc(*a, &mut |buf| {
                    for ((bchunk, gchunk), ychunk) in buf.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let dot: f64 = gchunk.iter().zip(ychunk).map(|(d, p)| d * p).sum();
                        for ((o, &d), &p) in bchunk.iter_mut().zip(gchunk).zip(ychunk) {
                            *o += p * (d - dot);
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let ad = val(*a).data();
                acc(*a, &mut |buf| zip3(buf, g, ad, |d, x| if x > 0.0 { d } else { 0.0 }));
            }
            Op::LeakyRelu(a, s) => {
                let ad = val(*a).data();
                acc(*a, &mut |buf| zip3(buf, g, ad, |d, x| if x > 0.0 { d } else { s * d }));
            }
            Op::Sigmoid(a) => acc(*a, &mut |buf| zip3(buf, g, y, |d, p| d * p * (1.0 - p))),
            Op::Tanh(a) => acc(*a, &mut |buf| zip3(buf, g, y, |d, t| d * (1.0 - t * t))),
            Op::Sqrt(a) => acc(*a, &mut |buf| zip3(buf, g, y, |d, r| if r > 0.0 { 0.5 * d / r } else { 0.0 })),
            Op::RowMean(a) => {
                let c = val(*a).cols();
                acc(*a, &mut |buf| {
                    for (bchunk, &d) in buf.chunks_mut(c).zip(g) {
                        bchunk.iter_mut().for_each(|o| *o += d / c as f64);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut off = 0;
                for p in parts {
                    let c = val(*p).cols();
                    acc(*p, &mut |buf| {
                        for (i, bchunk) in buf.chunks_mut(c).enumerate() {
                            add_into(bchunk, &g[i * total + off..i * total + off + c]);
                        }
                    });
                    off += c;
                }
            }
            Op::SliceCols(a, start) => {
                let c = val(*a).cols();
                let len = node.value.cols();
                acc(*a, &mut |buf| {
                    for (i, gchunk) in g.chunks(len).enumerate() {
                        add_into(&mut buf[i * c + start..i * c + start + len], gchunk);
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |buf| buf.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(a) => {
                let n = val(*a).numel() as f64;
                acc(*a, &mut |buf| buf.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::GatherRows(a, index) => {
                let c = val(*a).cols();
                acc(*a, &mut |buf| {
                    for (k, &i) in index.iter().enumerate() {
                        add_into(&mut buf[i * c..(i + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                });
            }
            Op::ScatterAddRows(a, index) => {
                let c = val(*a).cols();
                acc(*a, &mut |buf| {
                    for (k, &i) in index.iter().enumerate() {
                        add_into(&mut buf[k * c..(k + 1) * c], &g[i * c..(i + 1) * c]);
                    }
                });
            }
            Op::Nll(a, target, probs) => {
                acc(*a, &mut |buf| {
                    for (j, (o, &p)) in buf.iter_mut().zip(probs).enumerate() {
                        let onehot = if j == *target { 1.0 } else { 0.0 };
                        *o += g[0] * (p - onehot);
                    }
                });
            }
        }
    }
}

fn add_into(buf: &mut [f64], g: &[f64]) {
    buf.iter_mut().zip(g).for_each(|(o, &d)| *o += d);
}

fn zip3(buf: &mut [f64], g: &[f64], x: &[f64], f: impl Fn(f64, f64) -> f64) {
    for ((o, &d), &v) in buf.iter_mut().zip(g).zip(x) {
        *o += f(d, v);
    }
}
