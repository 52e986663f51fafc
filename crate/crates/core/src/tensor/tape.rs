use std::borrow::Cow;
use std::collections::HashMap;
use std::marker::PhantomData;

use super::ops;
use super::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
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
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Gelu(usize),
    Softmax { x: usize, allowed: Option<Vec<bool>> },
    LayerNorm { x: usize, gain: usize, bias: usize, eps: f64 },
    CrossEntropy { logits: usize, targets: Vec<usize> },
    GatherRows { table: usize, ids: Vec<usize> },
    SliceCols { x: usize, start: usize, len: usize },
    ConcatCols(Vec<usize>),
    MeanRows { x: usize, mask: Vec<bool> },
    Sum(usize),
}

#[derive(Clone, Debug)]
enum Saved {
    None,
    LayerNorm { xhat: Vec<f64>, inv_std: Vec<f64> },
    Probs(Vec<f64>),
}

struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    op: Op,
    saved: Saved,
    needs_grad: bool,
}

/// Records executed operations for a reverse sweep.
///
/// Parameters are bound by reference with [`Tape::param`]; the same tensor
/// bound twice yields the same [`Var`]. A tape is single-threaded: build it,
/// call [`Tape::backward`], and drop it on the same thread.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    params: HashMap<usize, usize>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn addr(t: &Tensor) -> usize {
    t as *const Tensor as usize
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Binds a tensor by reference. It participates in backward iff
    /// `requires_grad` is set.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        if let Some(&id) = self.params.get(&addr(t)) {
            return Var(id);
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Cow::Borrowed(t.data()),
            op: Op::Leaf,
            saved: Saved::None,
            needs_grad: t.requires_grad(),
        });
        self.params.insert(addr(t), id);
        Var(id)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push_raw(shape, Cow::Owned(t.into_data()), Op::Leaf, Saved::None, false)
    }

    fn push_raw(&mut self, shape: Vec<usize>, value: Cow<'a, [f64]>, op: Op, saved: Saved, needs_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            shape,
            value,
            op,
            saved,
            needs_grad,
        });
        Var(id)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Copies a recorded value out as a tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let mut t = Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("recorded shape");
        t.set_requires_grad(false);
        t
    }

    fn dims2(&self, v: usize) -> (usize, usize) {
        let s = &self.nodes[v].shape;
        match s.len() {
            1 => (1, s[0]),
            _ => (s[0], s[1]),
        }
    }

    fn record(&mut self, op: Op) -> Result<Var> {
        let (shape, value, saved) = self.compute(&op)?;
        let needs_grad = self.inputs(&op).iter().any(|&i| self.nodes[i].needs_grad);
        Ok(self.push_raw(shape, Cow::Owned(value), op, saved, needs_grad))
    }

    fn inputs(&self, op: &Op) -> Vec<usize> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Transpose(x) | Op::Scale(x, _) | Op::Gelu(x) | Op::Sum(x) => vec![*x],
            Op::Softmax { x, .. } | Op::SliceCols { x, .. } | Op::MeanRows { x, .. } => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::GatherRows { table, .. } => vec![*table],
            Op::ConcatCols(parts) => parts.clone(),
        }
    }

    fn compute(&self, op: &Op) -> Result<(Vec<usize>, Vec<f64>, Saved)> {
        let val = |i: usize| -> &[f64] { &self.nodes[i].value };
        Ok(match op {
            Op::Leaf => unreachable!("leaves are not recomputed"),
            &Op::MatMul(a, b) => {
                let (m, k) = self.dims2(a);
                let (k2, n) = self.dims2(b);
                if k != k2 || self.nodes[a].shape.len() != 2 || self.nodes[b].shape.len() != 2 {
                    return Err(TensorError::Shape {
                        op: "matmul",
                        left: self.nodes[a].shape.clone(),
                        right: self.nodes[b].shape.clone(),
                    });
                }
                (vec![m, n], ops::matmul(val(a), val(b), m, k, n), Saved::None)
            }
            &Op::Transpose(x) => {
                let (m, n) = self.dims2(x);
                (vec![n, m], ops::transpose(val(x), m, n), Saved::None)
            }
            &Op::Add(a, b) | &Op::Mul(a, b) => {
                if self.nodes[a].shape != self.nodes[b].shape {
                    return Err(TensorError::Shape {
                        op: "elementwise",
                        left: self.nodes[a].shape.clone(),
                        right: self.nodes[b].shape.clone(),
                    });
                }
                let f = if matches!(op, Op::Add(..)) {
                    |x: f64, y: f64| x + y
                } else {
                    |x: f64, y: f64| x * y
                };
                let out = val(a).iter().zip(val(b)).map(|(&x, &y)| f(x, y)).collect();
                (self.nodes[a].shape.clone(), out, Saved::None)
            }
            &Op::AddRow(x, b) => {
                let (m, n) = self.dims2(x);
                if self.nodes[b].value.len() != n {
                    return Err(TensorError::Shape {
                        op: "add_row",
                        left: self.nodes[x].shape.clone(),
                        right: self.nodes[b].shape.clone(),
                    });
                }
                let bias = val(b);
                let mut out = val(x).to_vec();
                for i in 0..m {
                    for j in 0..n {
                        out[i * n + j] += bias[j];
                    }
                }
                (self.nodes[x].shape.clone(), out, Saved::None)
            }
            &Op::Scale(x, s) => (self.nodes[x].shape.clone(), val(x).iter().map(|v| v * s).collect(), Saved::None),
            &Op::Gelu(x) => (self.nodes[x].shape.clone(), val(x).iter().map(|&v| ops::gelu(v)).collect(), Saved::None),
            Op::Softmax { x, allowed } => {
                let (m, n) = self.dims2(*x);
                if let Some(a) = allowed {
                    if a.len() != m * n {
                        return Err(TensorError::Shape {
                            op: "softmax_rows",
                            left: vec![m, n],
                            right: vec![a.len()],
                        });
                    }
                }
                let y = ops::softmax_rows(val(*x), m, n, allowed.as_deref())?;
                (self.nodes[*x].shape.clone(), y, Saved::None)
            }
            &Op::LayerNorm { x, gain, bias, eps } => {
                let (m, d) = self.dims2(x);
                if val(gain).len() != d || val(bias).len() != d {
                    return Err(TensorError::Shape {
                        op: "layer_norm",
                        left: self.nodes[x].shape.clone(),
                        right: self.nodes[gain].shape.clone(),
                    });
                }
                if eps <= 0.0 {
                    return Err(TensorError::Contract("layer_norm eps must be positive".into()));
                }
                let out = ops::layer_norm(val(x), m, d, val(gain), val(bias), eps);
                (
                    self.nodes[x].shape.clone(),
                    out.y,
                    Saved::LayerNorm {
                        xhat: out.xhat,
                        inv_std: out.inv_std,
                    },
                )
            }
            Op::CrossEntropy { logits, targets } => {
                let (m, c) = self.dims2(*logits);
                let (loss, probs) = ops::cross_entropy(val(*logits), m, c, targets)?;
                (vec![1], vec![loss], Saved::Probs(probs))
            }
            Op::GatherRows { table, ids } => {
                let (v, d) = self.dims2(*table);
                let t = val(*table);
                let mut out = Vec::with_capacity(ids.len() * d);
                for &id in ids {
                    if id >= v {
                        return Err(TensorError::Index {
                            op: "gather_rows",
                            index: id,
                            bound: v,
                        });
                    }
                    out.extend_from_slice(&t[id * d..(id + 1) * d]);
                }
                if ids.is_empty() {
                    return Err(TensorError::Contract("gather_rows with no ids".into()));
                }
                (vec![ids.len(), d], out, Saved::None)
            }
            &Op::SliceCols { x, start, len } => {
                let (m, n) = self.dims2(x);
                if len == 0 || start + len > n {
                    return Err(TensorError::Index {
                        op: "slice_cols",
                        index: start + len,
                        bound: n,
                    });
                }
                let v = val(x);
                let mut out = Vec::with_capacity(m * len);
                for i in 0..m {
                    out.extend_from_slice(&v[i * n + start..i * n + start + len]);
                }
                (vec![m, len], out, Saved::None)
            }
            Op::ConcatCols(parts) => {
                let m = self.dims2(parts[0]).0;
                let widths: Vec<usize> = parts.iter().map(|&p| self.dims2(p).1).collect();
                if parts.iter().any(|&p| self.dims2(p).0 != m) {
                    return Err(TensorError::Contract("concat_cols row counts differ".into()));
                }
                let n: usize = widths.iter().sum();
                let mut out = Vec::with_capacity(m * n);
                for i in 0..m {
                    for (&p, &w) in parts.iter().zip(&widths) {
                        out.extend_from_slice(&val(p)[i * w..(i + 1) * w]);
                    }
                }
                (vec![m, n], out, Saved::None)
            }
            Op::MeanRows { x, mask } => {
                let (m, n) = self.dims2(*x);
                if mask.len() != m {
                    return Err(TensorError::Shape {
                        op: "mean_rows",
                        left: vec![m, n],
                        right: vec![mask.len()],
                    });
                }
                let count = mask.iter().filter(|&&b| b).count();
                if count == 0 {
                    return Err(TensorError::Contract("mean_rows over zero rows".into()));
                }
                let v = val(*x);
                let mut out = vec![0.0; n];
                for i in (0..m).filter(|&i| mask[i]) {
                    for j in 0..n {
                        out[j] += v[i * n + j];
                    }
                }
                out.iter_mut().for_each(|o| *o /= count as f64);
                (vec![1, n], out, Saved::None)
            }
            &Op::Sum(x) => (vec![1], vec![val(x).iter().sum()], Saved::None),
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMul(a.0, b.0))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Transpose(x.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add(a.0, b.0))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul(a.0, b.0))
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.record(Op::AddRow(x.0, bias.0))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.record(Op::Scale(x.0, s))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Gelu(x.0))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Softmax { x: x.0, allowed: None })
    }

    /// Row softmax restricted to entries where `allowed` is true; the rest
    /// are treated as `-inf` and get probability exactly zero.
    pub fn masked_softmax_rows(&mut self, x: Var, allowed: Vec<bool>) -> Result<Var> {
        self.record(Op::Softmax {
            x: x.0,
            allowed: Some(allowed),
        })
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        self.record(Op::LayerNorm {
            x: x.0,
            gain: gain.0,
            bias: bias.0,
            eps,
        })
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Result<Var> {
        self.record(Op::CrossEntropy {
            logits: logits.0,
            targets,
        })
    }

    pub fn gather_rows(&mut self, table: Var, ids: Vec<usize>) -> Result<Var> {
        self.record(Op::GatherRows { table: table.0, ids })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.record(Op::SliceCols { x: x.0, start, len })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Contract("concat_cols of nothing".into()));
        }
        self.record(Op::ConcatCols(parts.iter().map(|v| v.0).collect()))
    }

    /// Mean of the rows selected by `mask`, as a `1×n` matrix.
    pub fn mean_rows(&mut self, x: Var, mask: Vec<bool>) -> Result<Var> {
        self.record(Op::MeanRows { x: x.0, mask })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Sum(x.0))
    }

    /// Recomputes every recorded op from its recorded inputs and returns the
    /// values in tape order. Leaves are returned as stored.
    pub fn replay(&self) -> Result<Vec<Vec<f64>>> {
        let mut replayed = Tape {
            nodes: Vec::with_capacity(self.nodes.len()),
            params: HashMap::new(),
        };
        for node in &self.nodes {
            let value = match node.op {
                Op::Leaf => node.value.to_vec(),
                ref op => replayed.compute(op)?.1,
            };
            replayed.nodes.push(Node {
                shape: node.shape.clone(),
                value: Cow::Owned(value),
                op: Op::Leaf,
                saved: Saved::None,
                needs_grad: false,
            });
        }
        Ok(replayed.nodes.into_iter().map(|n| n.value.into_owned()).collect())
    }

    /// All recorded values in tape order.
    pub fn values(&self) -> Vec<Vec<f64>> {
        self.nodes.iter().map(|n| n.value.to_vec()).collect()
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<'a>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(dy) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(dy);
                continue;
            }
            self.backward_node(id, &dy, &mut grads);
        }
        let mut by_param = HashMap::new();
        for (&a, &id) in &self.params {
            if self.nodes[id].needs_grad {
                let g = grads[id].take().unwrap_or_else(|| vec![0.0; self.nodes[id].value.len()]);
                by_param.insert(a, g);
            }
        }
        Ok(Gradients {
            by_param,
            _borrow: PhantomData,
        })
    }

    fn backward_node(&self, id: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let val = |i: usize| -> &[f64] { &self.nodes[i].value };
        let wants = |i: usize| self.nodes[i].needs_grad;
        // Accumulator for input `i`; None when it does not need a gradient.
        macro_rules! acc {
            ($i:expr) => {{
                let i = $i;
                if wants(i) {
                    let len = self.nodes[i].value.len();
                    Some(grads[i].get_or_insert_with(|| vec![0.0; len]))
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.dims2(a);
                let n = self.dims2(b).1;
                if let Some(ga) = acc!(a) {
                    ops::matmul_a_bt_acc(ga, dy, val(b), m, n, k);
                }
                if let Some(gb) = acc!(b) {
                    ops::matmul_at_b_acc(gb, val(a), dy, m, k, n);
                }
            }
            &Op::Transpose(x) => {
                let (m, n) = self.dims2(x);
                if let Some(g) = acc!(x) {
                    let t = ops::transpose(dy, n, m);
                    g.iter_mut().zip(t).for_each(|(a, b)| *a += b);
                }
            }
            &Op::Add(a, b) => {
                for i in [a, b] {
                    if let Some(g) = acc!(i) {
                        g.iter_mut().zip(dy).for_each(|(a, b)| *a += b);
                    }
                }
            }
            &Op::Mul(a, b) => {
                if let Some(g) = acc!(a) {
                    for ((g, d), o) in g.iter_mut().zip(dy).zip(val(b)) {
                        *g += d * o;
                    }
                }
                if let Some(g) = acc!(b) {
                    for ((g, d), o) in g.iter_mut().zip(dy).zip(val(a)) {
                        *g += d * o;
                    }
                }
            }
            &Op::AddRow(x, b) => {
                let (m, n) = self.dims2(x);
                if let Some(g) = acc!(x) {
                    g.iter_mut().zip(dy).for_each(|(a, b)| *a += b);
                }
                if let Some(g) = acc!(b) {
                    for i in 0..m {
                        for j in 0..n {
                            g[j] += dy[i * n + j];
                        }
                    }
                }
            }
            &Op::Scale(x, s) => {
                if let Some(g) = acc!(x) {
                    g.iter_mut().zip(dy).for_each(|(a, b)| *a += s * b);
                }
            }
            &Op::Gelu(x) => {
                if let Some(g) = acc!(x) {
                    for ((g, d), v) in g.iter_mut().zip(dy).zip(val(x)) {
                        *g += d * ops::gelu_grad(*v);
                    }
                }
            }
            Op::Softmax { x, .. } => {
                let (m, n) = self.dims2(*x);
                if let Some(g) = acc!(*x) {
                    ops::softmax_rows_backward(g, &node.value, dy, m, n);
                }
            }
            &Op::LayerNorm { x, gain, bias, .. } => {
                let (m, d) = self.dims2(x);
                let Saved::LayerNorm { xhat, inv_std } = &node.saved else {
                    unreachable!()
                };
                // Three distinct inputs: take buffers out to satisfy the borrow checker.
                let mut take = |i: usize| -> Option<Vec<f64>> {
                    if wants(i) {
                        let len = self.nodes[i].value.len();
                        Some(grads[i].take().unwrap_or_else(|| vec![0.0; len]))
                    } else {
                        None
                    }
                };
                let (mut gx, mut gg, mut gb) = (take(x), take(gain), take(bias));
                ops::layer_norm_backward(
                    gx.as_deref_mut(),
                    gg.as_deref_mut(),
                    gb.as_deref_mut(),
                    dy,
                    xhat,
                    inv_std,
                    val(gain),
                    m,
                    d,
                );
                for (i, g) in [(x, gx), (gain, gg), (bias, gb)] {
                    if g.is_some() {
                        grads[i] = g;
                    }
                }
            }
            Op::CrossEntropy { logits, targets } => {
                let (m, c) = self.dims2(*logits);
                let Saved::Probs(p) = &node.saved else { unreachable!() };
                if let Some(g) = acc!(*logits) {
                    let scale = dy[0] / m as f64;
                    for i in 0..m {
                        for j in 0..c {
                            let onehot = if targets[i] == j { 1.0 } else { 0.0 };
                            g[i * c + j] += scale * (p[i * c + j] - onehot);
                        }
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                let d = self.dims2(*table).1;
                if let Some(g) = acc!(*table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            g[id * d + j] += dy[r * d + j];
                        }
                    }
                }
            }
            &Op::SliceCols { x, start, len } => {
                let (m, n) = self.dims2(x);
                if let Some(g) = acc!(x) {
                    for i in 0..m {
                        for j in 0..len {
                            g[i * n + start + j] += dy[i * len + j];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let m = self.dims2(parts[0]).0;
                let widths: Vec<usize> = parts.iter().map(|&p| self.dims2(p).1).collect();
                let n: usize = widths.iter().sum();
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    if let Some(g) = acc!(p) {
                        for i in 0..m {
                            for j in 0..w {
                                g[i * w + j] += dy[i * n + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::MeanRows { x, mask } => {
                let (m, n) = self.dims2(*x);
                let count = mask.iter().filter(|&&b| b).count() as f64;
                if let Some(g) = acc!(*x) {
                    for i in (0..m).filter(|&i| mask[i]) {
                        for j in 0..n {
                            g[i * n + j] += dy[j] / count;
                        }
                    }
                }
            }
            &Op::Sum(x) => {
                if let Some(g) = acc!(x) {
                    g.iter_mut().for_each(|a| *a += dy[0]);
                }
            }
        }
    }
}

/// Gradients of the parameters bound on a tape, looked up by tensor.
///
/// Borrows the bound parameters, so gradients must be copied out (e.g. with
/// [`Gradients::take`]) before the parameters can be mutated.
pub struct Gradients<'a> {
    by_param: HashMap<usize, Vec<f64>>,
    _borrow: PhantomData<&'a Tensor>,
}

impl<'a> Gradients<'a> {
    /// Gradient for a bound tensor; zeros if it required grad but the loss
    /// did not depend on it, `None` if it was not bound or is frozen.
    pub fn get(&self, t: &'a Tensor) -> Option<&[f64]> {
        self.by_param.get(&addr(t)).map(Vec::as_slice)
    }

    pub fn take(&mut self, t: &'a Tensor) -> Option<Vec<f64>> {
        self.by_param.remove(&addr(t))
    }
}
