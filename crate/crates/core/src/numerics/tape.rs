//! Reverse-mode automatic differentiation over a single, linear tape.
//!
//! Every op appends a node holding its forward value. [`Tape::backward`]
//! consumes the tape and walks it in reverse, accumulating vector-Jacobian
//! products into the leaves that require gradients.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::{PI, SQRT_2};
use std::rc::Rc;

use super::tensor::matmul_into;
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Transpose(Var),
    SumAll(Var),
    MeanAll(Var),
    MeanRows(Var),
    LayerNorm { x: Var, rstd: Vec<f64> },
    Gelu(Var),
    Softmax(Var),
    Mse(Var, Var),
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    CrossEntropyRows { logits: Var, targets: Vec<usize>, probs: Tensor },
    BceWithLogits { logits: Var, targets: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Differentiation tape for one forward/backward pass.
///
/// A tape binds parameters from exactly one [`ParamStore`]; bindings are cached
/// so every use of a parameter shares one leaf.
#[derive(Debug)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    bound: RefCell<HashMap<ParamId, Var>>,
    track_params: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`] for leaves that required them.
#[derive(Debug, Default)]
pub struct Gradients {
    by_var: HashMap<Var, Tensor>,
    by_param: HashMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.by_var.get(&v)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.by_param.iter().map(|(k, v)| (*k, v))
    }

    pub fn into_params(self) -> HashMap<ParamId, Tensor> {
        self.by_param
    }
}

impl Tape {
    /// A tape on which bound parameters require gradients.
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            bound: RefCell::new(HashMap::new()),
            track_params: true,
        }
    }

    /// A tape on which parameters are bound as constants.
    pub fn inference() -> Self {
        Tape {
            track_params: false,
            ..Tape::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
            param: None,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn val(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    /// Forward value of a node.
    pub fn value(&self, v: Var) -> Rc<Tensor> {
        self.val(v)
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.val(v).data()[0]
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Leaf that does not take part in differentiation.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a parameter, reusing the existing leaf if already bound.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.bound.borrow().get(&id) {
            return *v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, self.track_params);
        self.nodes.borrow_mut()[v.0].param = Some(id);
        self.bound.borrow_mut().insert(id, v);
        v
    }

    fn dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        self.val(v)
            .dims2()
            .map_err(|_| Error::shape(op, format!("expected a matrix, got {:?}", self.shape(v))))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.val(a), self.val(b));
        let (m, k) = self.dims("matmul", a)?;
        let (k2, n) = self.dims("matmul", b)?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("[{m}, {k}] x [{k2}, {n}]: inner dimensions differ"),
            ));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(av.data(), bv.data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b), self.rg(a) || self.rg(b)))
    }

    fn zip_same(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (av, bv) = (self.val(a), self.val(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), self.rg(a) || self.rg(b)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), self.rg(a) || self.rg(b)))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), self.rg(a) || self.rg(b)))
    }

    fn row_broadcast(
        &self,
        op: &'static str,
        a: Var,
        row: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (m, n) = self.dims(op, a)?;
        let rv = self.val(row);
        if rv.numel() != n || rv.rows() != 1 {
            return Err(Error::shape(
                op,
                format!("row {:?} does not broadcast over [{m}, {n}]", rv.shape()),
            ));
        }
        let av = self.val(a);
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            data.extend(av.row(i).iter().zip(rv.data()).map(|(&x, &r)| f(x, r)));
        }
        Tensor::new(vec![m, n], data)
    }

    /// `a + row` with `row` of shape `[1, n]` broadcast over all rows.
    pub fn add_row(&self, a: Var, row: Var) -> Result<Var> {
        let t = self.row_broadcast("add_row", a, row, |x, r| x + r)?;
        Ok(self.push(t, Op::AddRow(a, row), self.rg(a) || self.rg(row)))
    }

    /// `a * row` elementwise with `row` broadcast over all rows.
    pub fn mul_row(&self, a: Var, row: Var) -> Result<Var> {
        let t = self.row_broadcast("mul_row", a, row, |x, r| x * r)?;
        Ok(self.push(t, Op::MulRow(a, row), self.rg(a) || self.rg(row)))
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let t = self.val(a).map(|x| x * s);
        self.push(t, Op::Scale(a, s), self.rg(a))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", "no operands"));
        }
        let (_, n) = self.dims("concat_rows", parts[0])?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.dims("concat_rows", p)?;
            if c != n {
                return Err(Error::shape(
                    "concat_rows",
                    format!("column counts differ: {n} vs {c}"),
                ));
            }
            rows += r;
            data.extend_from_slice(self.val(p).data());
        }
        let t = Tensor::new(vec![rows, n], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no operands"));
        }
        let (m, _) = self.dims("concat_cols", parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims("concat_cols", p)?;
            if r != m {
                return Err(Error::shape("concat_cols", format!("row counts differ: {m} vs {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let vals: Vec<_> = parts.iter().map(|&p| self.val(p)).collect();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for v in &vals {
                data.extend_from_slice(v.row(i));
            }
        }
        let t = Tensor::new(vec![m, total], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims("slice_rows", a)?;
        if len == 0 || start + len > m {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} out of range for {m} rows", start + len),
            ));
        }
        let av = self.val(a);
        let t = Tensor::new(vec![len, n], av.data()[start * n..(start + len) * n].to_vec())?;
        Ok(self.push(t, Op::SliceRows(a, start), self.rg(a)))
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims("slice_cols", a)?;
        if len == 0 || start + len > n {
            return Err(Error::shape(
                "slice_cols",
                format!("columns {start}..{} out of range for {n} columns", start + len),
            ));
        }
        let av = self.val(a);
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&av.row(i)[start..start + len]);
        }
        let t = Tensor::new(vec![m, len], data)?;
        Ok(self.push(t, Op::SliceCols(a, start), self.rg(a)))
    }

    pub fn gather_rows(&self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.val(a).gather_rows(idx)?;
        Ok(self.push(t, Op::GatherRows(a, idx.to_vec()), self.rg(a)))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let t = self.val(a).transpose()?;
        Ok(self.push(t, Op::Transpose(a), self.rg(a)))
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let s = self.val(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), self.rg(a))
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let v = self.val(a);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Tensor::scalar(s), Op::MeanAll(a), self.rg(a))
    }

    /// Column-wise mean, `[m, n] -> [1, n]`.
    pub fn mean_rows(&self, a: Var) -> Result<Var> {
        let (m, n) = self.dims("mean_rows", a)?;
        let av = self.val(a);
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, x) in out.iter_mut().zip(av.row(i)) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        let t = Tensor::new(vec![1, n], out)?;
        Ok(self.push(t, Op::MeanRows(a), self.rg(a)))
    }

    /// Row-wise normalization to zero mean and unit variance, without affine.
    /// `eps` is added to the variance inside the square root.
    pub fn layer_norm(&self, a: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims("layer_norm", a)?;
        let av = self.val(a);
        let mut data = Vec::with_capacity(m * n);
        let mut rstd = Vec::with_capacity(m);
        for i in 0..m {
            let row = av.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            data.extend(row.iter().map(|x| (x - mean) * r));
        }
        let t = Tensor::new(vec![m, n], data)?;
        Ok(self.push(t, Op::LayerNorm { x: a, rstd }, self.rg(a)))
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&self, a: Var) -> Var {
        let t = self.val(a).map(|x| x * std_normal_cdf(x));
        self.push(t, Op::Gelu(a), self.rg(a))
    }

    /// Softmax along the last axis of a matrix.
    pub fn softmax_rows(&self, a: Var) -> Result<Var> {
        let (m, n) = self.dims("softmax_rows", a)?;
        let av = self.val(a);
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            softmax_into(av.row(i), &mut data);
        }
        let t = Tensor::new(vec![m, n], data)?;
        Ok(self.push(t, Op::Softmax(a), self.rg(a)))
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&self, a: Var, b: Var) -> Result<Var> {
        let d = self.zip_same("mse", a, b, |x, y| x - y)?;
        let s = d.data().iter().map(|x| x * x).sum::<f64>() / d.numel() as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mse(a, b), self.rg(a) || self.rg(b)))
    }

    /// Scales each row to unit Euclidean norm. Zero rows are an error.
    pub fn l2_normalize_rows(&self, a: Var) -> Result<Var> {
        let (m, n) = self.dims("l2_normalize_rows", a)?;
        let av = self.val(a);
        let mut norms = Vec::with_capacity(m);
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = av.row(i);
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::invalid(format!(
                    "l2_normalize_rows: row {i} has norm {norm}"
                )));
            }
            norms.push(norm);
            data.extend(row.iter().map(|x| x / norm));
        }
        let t = Tensor::new(vec![m, n], data)?;
        Ok(self.push(t, Op::L2NormalizeRows { x: a, norms }, self.rg(a)))
    }

    /// Mean softmax cross-entropy of each row against an integer target.
    pub fn cross_entropy_rows(&self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, n) = self.dims("cross_entropy_rows", logits)?;
        if targets.len() != m {
            return Err(Error::shape(
                "cross_entropy_rows",
                format!("{} targets for {m} rows", targets.len()),
            ));
        }
        let lv = self.val(logits);
        let mut probs = Vec::with_capacity(m * n);
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= n {
                return Err(Error::shape(
                    "cross_entropy_rows",
                    format!("target {t} out of range for {n} classes"),
                ));
            }
            let row = lv.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            softmax_into(row, &mut probs);
        }
        let probs = Tensor::new(vec![m, n], probs)?;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss / m as f64),
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy with logits over all elements.
    pub fn bce_with_logits(&self, logits: Var, targets: &Tensor) -> Result<Var> {
        let lv = self.val(logits);
        if lv.shape() != targets.shape() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{:?} vs {:?}", lv.shape(), targets.shape()),
            ));
        }
        let s: f64 = lv
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .sum();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(s / lv.numel() as f64),
            Op::BceWithLogits {
                logits,
                targets: targets.clone(),
            },
            rg,
        ))
    }

    /// Runs reverse accumulation from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.into_inner();
        let root = &nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", root.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        let mut out = Gradients::default();
        if !root.requires_grad {
            return Ok(out);
        }
        grads[loss.0] = Some(Tensor::full(root.value.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                if let Some(p) = node.param {
                    out.by_param.insert(p, g.clone());
                }
                out.by_var.insert(Var(i), g);
                continue;
            }
            backprop(&nodes, node, &g, &mut grads);
        }
        Ok(out)
    }
}

fn softmax_into(row: &[f64], out: &mut Vec<f64>) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let start = out.len();
    let mut sum = 0.0;
    for &x in row {
        let e = (x - max).exp();
        sum += e;
        out.push(e);
    }
    out[start..].iter_mut().for_each(|e| *e /= sum);
}

pub(crate) fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], v: Var, delta: Tensor) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(g) => g
            .data_mut()
            .iter_mut()
            .zip(delta.data())
            .for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(delta),
    }
}

fn with_data(like: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor::new(like.shape().to_vec(), data).expect("gradient matches operand shape")
}

fn backprop(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |v: Var| -> &Tensor { &nodes[v.0].value };
    let rg = |v: Var| nodes[v.0].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k) = (av.rows(), av.cols());
            let n = bv.cols();
            if rg(*a) {
                let bt = bv.transpose().expect("matrix");
                let mut da = vec![0.0; m * k];
                matmul_into(g.data(), bt.data(), &mut da, m, n, k);
                accumulate(grads, nodes, *a, with_data(av, da));
            }
            if rg(*b) {
                let at = av.transpose().expect("matrix");
                let mut db = vec![0.0; k * n];
                matmul_into(at.data(), g.data(), &mut db, k, m, n);
                accumulate(grads, nodes, *b, with_data(bv, db));
            }
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.map(|x| -x));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if rg(*a) {
                let d = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                accumulate(grads, nodes, *a, with_data(av, d));
            }
            if rg(*b) {
                let d = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                accumulate(grads, nodes, *b, with_data(bv, d));
            }
        }
        Op::AddRow(a, r) => {
            accumulate(grads, nodes, *a, g.clone());
            if rg(*r) {
                let n = g.cols();
                let mut d = vec![0.0; n];
                for i in 0..g.rows() {
                    d.iter_mut().zip(g.row(i)).for_each(|(o, x)| *o += x);
                }
                accumulate(grads, nodes, *r, with_data(val(*r), d));
            }
        }
        Op::MulRow(a, r) => {
            let (av, rv) = (val(*a), val(*r));
            let n = g.cols();
            if rg(*a) {
                let mut d = Vec::with_capacity(g.numel());
                for i in 0..g.rows() {
                    d.extend(g.row(i).iter().zip(rv.data()).map(|(x, y)| x * y));
                }
                accumulate(grads, nodes, *a, with_data(av, d));
            }
            if rg(*r) {
                let mut d = vec![0.0; n];
                for i in 0..g.rows() {
                    for j in 0..n {
                        d[j] += g.row(i)[j] * av.row(i)[j];
                    }
                }
                accumulate(grads, nodes, *r, with_data(rv, d));
            }
        }
        Op::Scale(a, s) => accumulate(grads, nodes, *a, g.map(|x| x * s)),
        Op::ConcatRows(parts) => {
            let n = g.cols();
            let mut offset = 0;
            for p in parts {
                let pv = val(*p);
                let len = pv.numel();
                if rg(*p) {
                    let d = g.data()[offset..offset + len].to_vec();
                    accumulate(grads, nodes, *p, with_data(pv, d));
                }
                offset += len;
                debug_assert_eq!(len % n, 0);
            }
        }
        Op::ConcatCols(parts) => {
            let mut col = 0;
            for p in parts {
                let pv = val(*p);
                let w = pv.cols();
                if rg(*p) {
                    let mut d = Vec::with_capacity(pv.numel());
                    for i in 0..g.rows() {
                        d.extend_from_slice(&g.row(i)[col..col + w]);
                    }
                    accumulate(grads, nodes, *p, with_data(pv, d));
                }
                col += w;
            }
        }
        Op::SliceRows(a, start) => {
            let av = val(*a);
            let n = av.cols();
            let mut d = vec![0.0; av.numel()];
            d[start * n..start * n + g.numel()].copy_from_slice(g.data());
            accumulate(grads, nodes, *a, with_data(av, d));
        }
        Op::SliceCols(a, start) => {
            let av = val(*a);
            let n = av.cols();
            let w = g.cols();
            let mut d = vec![0.0; av.numel()];
            for i in 0..g.rows() {
                d[i * n + start..i * n + start + w].copy_from_slice(g.row(i));
            }
            accumulate(grads, nodes, *a, with_data(av, d));
        }
        Op::GatherRows(a, idx) => {
            let av = val(*a);
            let n = av.cols();
            let mut d = vec![0.0; av.numel()];
            for (k, &i) in idx.iter().enumerate() {
                d[i * n..(i + 1) * n]
                    .iter_mut()
                    .zip(g.row(k))
                    .for_each(|(o, x)| *o += x);
            }
            accumulate(grads, nodes, *a, with_data(av, d));
        }
        Op::Transpose(a) => {
            accumulate(grads, nodes, *a, g.transpose().expect("matrix"));
        }
        Op::SumAll(a) => {
            let av = val(*a);
            accumulate(grads, nodes, *a, Tensor::full(av.shape(), g.item()));
        }
        Op::MeanAll(a) => {
            let av = val(*a);
            let s = g.item() / av.numel() as f64;
            accumulate(grads, nodes, *a, Tensor::full(av.shape(), s));
        }
        Op::MeanRows(a) => {
            let av = val(*a);
            let m = av.rows() as f64;
            let mut d = Vec::with_capacity(av.numel());
            for _ in 0..av.rows() {
                d.extend(g.data().iter().map(|x| x / m));
            }
            accumulate(grads, nodes, *a, with_data(av, d));
        }
        Op::LayerNorm { x, rstd } => {
            let y = &node.value;
            let n = y.cols();
            let mut d = Vec::with_capacity(y.numel());
            for (i, r) in rstd.iter().enumerate() {
                let (gr, yr) = (g.row(i), y.row(i));
                let mean_g = gr.iter().sum::<f64>() / n as f64;
                let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                d.extend(gr.iter().zip(yr).map(|(gj, yj)| r * (gj - mean_g - yj * mean_gy)));
            }
            accumulate(grads, nodes, *x, with_data(val(*x), d));
        }
        Op::Gelu(a) => {
            let av = val(*a);
            let d = g
                .data()
                .iter()
                .zip(av.data())
                .map(|(gi, &x)| gi * (std_normal_cdf(x) + x * std_normal_pdf(x)))
                .collect();
            accumulate(grads, nodes, *a, with_data(av, d));
        }
        Op::Softmax(a) => {
            let y = &node.value;
            let mut d = Vec::with_capacity(y.numel());
            for i in 0..y.rows() {
                let (gr, yr) = (g.row(i), y.row(i));
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                d.extend(gr.iter().zip(yr).map(|(gj, yj)| yj * (gj - dot)));
            }
            accumulate(grads, nodes, *a, with_data(val(*a), d));
        }
        Op::Mse(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let s = 2.0 * g.item() / av.numel() as f64;
            let d: Vec<f64> = av.data().iter().zip(bv.data()).map(|(x, y)| s * (x - y)).collect();
            if rg(*b) {
                accumulate(grads, nodes, *b, with_data(bv, d.iter().map(|x| -x).collect()));
            }
            accumulate(grads, nodes, *a, with_data(av, d));
        }
        Op::L2NormalizeRows { x, norms } => {
            let y = &node.value;
            let mut d = Vec::with_capacity(y.numel());
            for (i, norm) in norms.iter().enumerate() {
                let (gr, yr) = (g.row(i), y.row(i));
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                d.extend(gr.iter().zip(yr).map(|(gj, yj)| (gj - yj * dot) / norm));
            }
            accumulate(grads, nodes, *x, with_data(val(*x), d));
        }
        Op::CrossEntropyRows {
            logits,
            targets,
            probs,
        } => {
            let m = probs.rows() as f64;
            let n = probs.cols();
            let s = g.item() / m;
            let mut d: Vec<f64> = probs.data().iter().map(|p| p * s).collect();
            for (i, &t) in targets.iter().enumerate() {
                d[i * n + t] -= s;
            }
            accumulate(grads, nodes, *logits, with_data(probs, d));
        }
        Op::BceWithLogits { logits, targets } => {
            let lv = val(*logits);
            let s = g.item() / lv.numel() as f64;
            let d = lv
                .data()
                .iter()
                .zip(targets.data())
                .map(|(&x, &t)| s * (sigmoid(x) - t))
                .collect();
            accumulate(grads, nodes, *logits, with_data(lv, d));
        }
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
