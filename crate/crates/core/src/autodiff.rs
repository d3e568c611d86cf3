//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every operation on a [`Var`] evaluates eagerly and appends a node to its
//! [`Tape`]. [`Tape::backward`] walks the nodes in reverse insertion order,
//! which is a valid reverse topological order because a node can only refer
//! to nodes recorded before it. Gradients of nodes that feed several
//! consumers accumulate additively.
//!
//! Only the operations the detector needs are provided, and broadcasting is
//! limited to adding a trailing-suffix-shaped tensor.

use std::cell::{Cell, RefCell};
use std::fmt;

use rand::Rng;

use crate::error::{invalid, shape, DtaadError, Result};
use crate::tensor::{Real, Tensor};

/// Ordered record of executed operations.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddSuffix(usize, usize),
    Scale(usize, T),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    MatMul(usize, usize),
    BatchMatMul(usize, usize),
    Conv1d(Box<ConvSaved>),
    WeightNorm { v: usize, g: usize, norms: Vec<T> },
    LeakyRelu(usize, T),
    Sigmoid(usize),
    Softmax(usize),
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<T>, rstd: Vec<T> },
    Dropout(usize, Vec<T>),
    Sum(usize),
    Mean(usize),
    Mse(usize, usize),
}

struct ConvSaved {
    input: usize,
    kernel: usize,
    bias: usize,
    batch: usize,
    c_in: usize,
    c_out: usize,
    k: usize,
    len_in: usize,
    len_out: usize,
    dilation: usize,
    left_pad: usize,
}

/// Handle to a node on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

/// Gradients of the leaves of a consumed tape.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of `var`, present for every leaf that requires a gradient.
    pub fn get(&self, var: Var<'_, T>) -> Option<&[T]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    pub fn tensor(&self, var: Var<'_, T>) -> Option<Tensor<T>> {
        let g = self.get(var)?;
        Tensor::new(self.shapes[var.id].clone(), g.to_vec()).ok()
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf; it receives a gradient iff `tensor.requires_grad()`.
    pub fn leaf(&self, tensor: &Tensor<T>) -> Var<'_, T> {
        self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            Op::Leaf,
            tensor.requires_grad(),
        )
    }

    /// Records a leaf that receives a gradient.
    pub fn param(&self, tensor: &Tensor<T>) -> Var<'_, T> {
        self.push(tensor.shape().to_vec(), tensor.data().to_vec(), Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&self, tensor: &Tensor<T>) -> Var<'_, T> {
        self.push(tensor.shape().to_vec(), tensor.data().to_vec(), Op::Leaf, false)
    }

    fn push(&self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut nodes = self.nodes.borrow_mut();
        if cfg!(debug_assertions) && !matches!(op, Op::Leaf) && !value.iter().all(|x| x.is_finite()) {
            let inputs_finite = op_inputs(&op)
                .iter()
                .all(|&i| nodes[i].value.iter().all(|x| x.is_finite()));
            debug_assert!(!inputs_finite, "non-finite output from finite inputs");
        }
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Propagates d`loss`/d(node) back to every leaf. The tape can be
    /// differentiated only once.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(invalid("loss belongs to a different tape"));
        }
        if self.consumed.get() {
            return Err(DtaadError::State("backward called on a consumed tape".into()));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].shape
            )));
        }
        self.consumed.set(true);

        let n = nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads);
        }
        for (id, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[id].is_none() {
                grads[id] = Some(vec![T::zero(); node.value.len()]);
            }
        }
        Ok(Gradients {
            grads,
            shapes: nodes.iter().map(|n| n.shape.clone()).collect(),
        })
    }
}

fn op_inputs<T>(op: &Op<T>) -> Vec<usize> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddSuffix(a, b) => vec![*a, *b],
        Op::MatMul(a, b) | Op::BatchMatMul(a, b) | Op::Mse(a, b) => vec![*a, *b],
        Op::Scale(x, _) | Op::Reshape(x) | Op::Permute(x, _) | Op::LeakyRelu(x, _) => vec![*x],
        Op::Sigmoid(x) | Op::Softmax(x) | Op::Dropout(x, _) | Op::Sum(x) | Op::Mean(x) => vec![*x],
        Op::Conv1d(c) => vec![c.input, c.kernel, c.bias],
        Op::WeightNorm { v, g, .. } => vec![*v, *g],
        Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
    }
}

fn accumulate<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    id: usize,
    f: impl FnOnce(&mut [T]),
) {
    if !nodes[id].requires_grad {
        return;
    }
    let g = grads[id].get_or_insert_with(|| vec![T::zero(); nodes[id].value.len()]);
    f(g);
}

fn backprop<T: Real>(nodes: &[Node<T>], id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[id];
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |ga| add_into(ga, g));
            accumulate(nodes, grads, *b, |gb| add_into(gb, g));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |ga| add_into(ga, g));
            accumulate(nodes, grads, *b, |gb| {
                gb.iter_mut().zip(g).for_each(|(d, &s)| *d = *d - s)
            });
        }
        Op::Mul(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            accumulate(nodes, grads, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] = ga[i] + g[i] * vb[i];
                }
            });
            accumulate(nodes, grads, *b, |gb| {
                for i in 0..gb.len() {
                    gb[i] = gb[i] + g[i] * va[i];
                }
            });
        }
        Op::AddSuffix(x, y) => {
            accumulate(nodes, grads, *x, |gx| add_into(gx, g));
            accumulate(nodes, grads, *y, |gy| {
                let ny = gy.len();
                for (i, &s) in g.iter().enumerate() {
                    gy[i % ny] = gy[i % ny] + s;
                }
            });
        }
        Op::Scale(x, c) => {
            let c = *c;
            accumulate(nodes, grads, *x, |gx| {
                gx.iter_mut().zip(g).for_each(|(d, &s)| *d = *d + c * s)
            });
        }
        Op::Reshape(x) => accumulate(nodes, grads, *x, |gx| add_into(gx, g)),
        Op::Permute(x, axes) => {
            let inverse = invert_axes(axes);
            let permuted = permute_data(g, &node.shape, &inverse);
            accumulate(nodes, grads, *x, |gx| add_into(gx, &permuted));
        }
        Op::MatMul(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            let kdim = nodes[*b].shape[0];
            let p = nodes[*b].shape[1];
            let rows = va.len() / kdim;
            accumulate(nodes, grads, *a, |ga| {
                for r in 0..rows {
                    for kk in 0..kdim {
                        let mut acc = T::zero();
                        for j in 0..p {
                            acc = acc + g[r * p + j] * vb[kk * p + j];
                        }
                        ga[r * kdim + kk] = ga[r * kdim + kk] + acc;
                    }
                }
            });
            accumulate(nodes, grads, *b, |gb| {
                for r in 0..rows {
                    for kk in 0..kdim {
                        let a_rk = va[r * kdim + kk];
                        for j in 0..p {
                            gb[kk * p + j] = gb[kk * p + j] + a_rk * g[r * p + j];
                        }
                    }
                }
            });
        }
        Op::BatchMatMul(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            let sa = &nodes[*a].shape;
            let (batch, n, kdim) = (sa[0], sa[1], sa[2]);
            let p = nodes[*b].shape[2];
            accumulate(nodes, grads, *a, |ga| {
                for bi in 0..batch {
                    let (ao, bo, go) = (bi * n * kdim, bi * kdim * p, bi * n * p);
                    for i in 0..n {
                        for kk in 0..kdim {
                            let mut acc = T::zero();
                            for j in 0..p {
                                acc = acc + g[go + i * p + j] * vb[bo + kk * p + j];
                            }
                            ga[ao + i * kdim + kk] = ga[ao + i * kdim + kk] + acc;
                        }
                    }
                }
            });
            accumulate(nodes, grads, *b, |gb| {
                for bi in 0..batch {
                    let (ao, bo, go) = (bi * n * kdim, bi * kdim * p, bi * n * p);
                    for i in 0..n {
                        for kk in 0..kdim {
                            let a_ik = va[ao + i * kdim + kk];
                            for j in 0..p {
                                gb[bo + kk * p + j] = gb[bo + kk * p + j] + a_ik * g[go + i * p + j];
                            }
                        }
                    }
                }
            });
        }
        Op::Conv1d(c) => conv1d_backward(nodes, c, g, grads),
        Op::WeightNorm { v, g: gain, norms } => {
            let vv = &nodes[*v].value;
            let gv = &nodes[*gain].value;
            let c_out = gv.len();
            let per = vv.len() / c_out;
            // w = g v / |v|;  dw/dg = v/|v|;  dw/dv = g/|v| (I - u u^T)
            let mut dot = vec![T::zero(); c_out];
            for c in 0..c_out {
                let mut acc = T::zero();
                for e in 0..per {
                    acc = acc + g[c * per + e] * vv[c * per + e];
                }
                dot[c] = acc / norms[c];
            }
            accumulate(nodes, grads, *gain, |gg| {
                for c in 0..c_out {
                    gg[c] = gg[c] + dot[c];
                }
            });
            accumulate(nodes, grads, *v, |gvv| {
                for c in 0..c_out {
                    let scale = gv[c] / norms[c];
                    for e in 0..per {
                        let i = c * per + e;
                        let u = vv[i] / norms[c];
                        gvv[i] = gvv[i] + scale * (g[i] - u * dot[c]);
                    }
                }
            });
        }
        Op::LeakyRelu(x, leak) => {
            let xv = &nodes[*x].value;
            let leak = *leak;
            accumulate(nodes, grads, *x, |gx| {
                for i in 0..gx.len() {
                    let slope = if xv[i] > T::zero() { T::one() } else { leak };
                    gx[i] = gx[i] + g[i] * slope;
                }
            });
        }
        Op::Sigmoid(x) => {
            let y = &node.value;
            accumulate(nodes, grads, *x, |gx| {
                for i in 0..gx.len() {
                    gx[i] = gx[i] + g[i] * y[i] * (T::one() - y[i]);
                }
            });
        }
        Op::Softmax(x) => {
            let y = &node.value;
            let d = *node.shape.last().unwrap_or(&1);
            accumulate(nodes, grads, *x, |gx| {
                for r in 0..y.len() / d {
                    let row = r * d..(r + 1) * d;
                    let dot: T = row.clone().map(|i| g[i] * y[i]).sum();
                    for i in row {
                        gx[i] = gx[i] + y[i] * (g[i] - dot);
                    }
                }
            });
        }
        Op::LayerNorm { x, gain, bias, xhat, rstd } => {
            let gamma = &nodes[*gain].value;
            let d = gamma.len();
            let rows = xhat.len() / d;
            accumulate(nodes, grads, *gain, |gg| {
                for r in 0..rows {
                    for j in 0..d {
                        gg[j] = gg[j] + g[r * d + j] * xhat[r * d + j];
                    }
                }
            });
            accumulate(nodes, grads, *bias, |gb| {
                for r in 0..rows {
                    for j in 0..d {
                        gb[j] = gb[j] + g[r * d + j];
                    }
                }
            });
            accumulate(nodes, grads, *x, |gx| {
                let inv_d = T::one() / T::lit(d as f64);
                for r in 0..rows {
                    let o = r * d;
                    let mut mean_g = T::zero();
                    let mut mean_gx = T::zero();
                    for j in 0..d {
                        let dxh = g[o + j] * gamma[j];
                        mean_g = mean_g + dxh;
                        mean_gx = mean_gx + dxh * xhat[o + j];
                    }
                    mean_g = mean_g * inv_d;
                    mean_gx = mean_gx * inv_d;
                    for j in 0..d {
                        let dxh = g[o + j] * gamma[j];
                        gx[o + j] = gx[o + j] + rstd[r] * (dxh - mean_g - xhat[o + j] * mean_gx);
                    }
                }
            });
        }
        Op::Dropout(x, mask) => {
            accumulate(nodes, grads, *x, |gx| {
                for i in 0..gx.len() {
                    gx[i] = gx[i] + g[i] * mask[i];
                }
            });
        }
        Op::Sum(x) => {
            let s = g[0];
            accumulate(nodes, grads, *x, |gx| gx.iter_mut().for_each(|d| *d = *d + s));
        }
        Op::Mean(x) => {
            let s = g[0] / T::lit(nodes[*x].value.len() as f64);
            accumulate(nodes, grads, *x, |gx| gx.iter_mut().for_each(|d| *d = *d + s));
        }
        Op::Mse(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            let scale = T::lit(2.0) * g[0] / T::lit(va.len() as f64);
            accumulate(nodes, grads, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] = ga[i] + scale * (va[i] - vb[i]);
                }
            });
            accumulate(nodes, grads, *b, |gb| {
                for i in 0..gb.len() {
                    gb[i] = gb[i] - scale * (va[i] - vb[i]);
                }
            });
        }
    }
}

fn conv1d_backward<T: Real>(
    nodes: &[Node<T>],
    c: &ConvSaved,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let x = &nodes[c.input].value;
    let w = &nodes[c.kernel].value;
    let (k, d, pad) = (c.k, c.dilation, c.left_pad);
    accumulate(nodes, grads, c.bias, |gb| {
        for b in 0..c.batch {
            for co in 0..c.c_out {
                let o = (b * c.c_out + co) * c.len_out;
                gb[co] = gb[co] + g[o..o + c.len_out].iter().copied().sum();
            }
        }
    });
    accumulate(nodes, grads, c.kernel, |gw| {
        for b in 0..c.batch {
            for co in 0..c.c_out {
                let go = (b * c.c_out + co) * c.len_out;
                for ci in 0..c.c_in {
                    let xo = (b * c.c_in + ci) * c.len_in;
                    for j in 0..k {
                        let wi = (co * c.c_in + ci) * k + j;
                        let mut acc = T::zero();
                        for t in 0..c.len_out {
                            let s = t + j * d;
                            if s >= pad {
                                acc = acc + g[go + t] * x[xo + s - pad];
                            }
                        }
                        gw[wi] = gw[wi] + acc;
                    }
                }
            }
        }
    });
    accumulate(nodes, grads, c.input, |gx| {
        for b in 0..c.batch {
            for co in 0..c.c_out {
                let go = (b * c.c_out + co) * c.len_out;
                for ci in 0..c.c_in {
                    let xo = (b * c.c_in + ci) * c.len_in;
                    for j in 0..k {
                        let wv = w[(co * c.c_in + ci) * k + j];
                        for t in 0..c.len_out {
                            let s = t + j * d;
                            if s >= pad {
                                gx[xo + s - pad] = gx[xo + s - pad] + g[go + t] * wv;
                            }
                        }
                    }
                }
            }
        }
    });
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
}

fn invert_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Reorders `data` of shape `shape` so that output axis `i` is input axis `axes[i]`.
fn permute_data<T: Copy>(data: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}

/// Numerically stable logistic function, clamped to the open unit interval.
pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    let y = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    let hi = T::one() - T::epsilon() / T::lit(2.0);
    y.max(T::min_positive_value()).min(hi)
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn value(&self) -> Tensor<T> {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// The value of a single-element node.
    pub fn item(&self) -> T {
        self.tape.nodes.borrow()[self.id].value[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn check_tape(&self, other: &Var<'_, T>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(invalid("operands belong to different tapes"))
        }
    }

    fn unary(self, f: impl FnOnce(&Node<T>) -> (Vec<usize>, Vec<T>, Op<T>)) -> Var<'t, T> {
        let (shape, value, op, rg) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let (s, v, op) = f(n);
            (s, v, op, n.requires_grad)
        };
        self.tape.push(shape, value, op, rg)
    }

    fn elementwise(self, other: Var<'t, T>, name: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var<'t, T>> {
        self.check_tape(&other)?;
        let (shape, value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape != b.shape {
                return Err(shape(format!("{name}: shapes {:?} and {:?} differ", a.shape, b.shape)));
            }
            let v = a.value.iter().zip(&b.value).map(|(&x, &y)| f(x, y)).collect();
            (a.shape.clone(), v, a.requires_grad || b.requires_grad)
        };
        Ok(self.tape.push(shape, value, op, rg))
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.elementwise(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.elementwise(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.elementwise(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    /// Adds `other`, whose shape must equal a trailing suffix of this shape,
    /// broadcast over the leading axes.
    pub fn add_suffix(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_tape(&other)?;
        let (shape_out, value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (x, y) = (&nodes[self.id], &nodes[other.id]);
            if y.shape.len() > x.shape.len() || !x.shape.ends_with(&y.shape) {
                return Err(shape(format!(
                    "cannot broadcast {:?} over {:?}",
                    y.shape, x.shape
                )));
            }
            let ny = y.value.len();
            let v = x
                .value
                .iter()
                .enumerate()
                .map(|(i, &a)| a + y.value[i % ny])
                .collect();
            (x.shape.clone(), v, x.requires_grad || y.requires_grad)
        };
        Ok(self.tape.push(shape_out, value, Op::AddSuffix(self.id, other.id), rg))
    }

    pub fn scale(self, c: T) -> Var<'t, T> {
        self.unary(|n| {
            let v = n.value.iter().map(|&x| x * c).collect();
            (n.shape.clone(), v, Op::Scale(self.id, c))
        })
    }

    pub fn reshape(self, new_shape: &[usize]) -> Result<Var<'t, T>> {
        let numel: usize = new_shape.iter().product();
        let cur = self.shape();
        if numel != cur.iter().product::<usize>() {
            return Err(shape(format!("cannot reshape {cur:?} into {new_shape:?}")));
        }
        Ok(self.unary(|n| (new_shape.to_vec(), n.value.clone(), Op::Reshape(self.id))))
    }

    /// Output axis `i` is input axis `axes[i]`.
    pub fn permute(self, axes: &[usize]) -> Result<Var<'t, T>> {
        let cur = self.shape();
        let mut seen = vec![false; cur.len()];
        if axes.len() != cur.len() || axes.iter().any(|&a| a >= cur.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(invalid(format!("axes {axes:?} are not a permutation of rank {}", cur.len())));
        }
        Ok(self.unary(|n| {
            let out_shape = axes.iter().map(|&a| n.shape[a]).collect();
            let v = permute_data(&n.value, &n.shape, axes);
            (out_shape, v, Op::Permute(self.id, axes.to_vec()))
        }))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(self) -> Result<Var<'t, T>> {
        let r = self.shape().len();
        if r < 2 {
            return Err(invalid("transpose needs rank >= 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    /// `[.., k] x [k, p] -> [.., p]`.
    pub fn matmul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_tape(&rhs)?;
        let (out_shape, value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[rhs.id]);
            if b.shape.len() != 2 || a.shape.last() != Some(&b.shape[0]) {
                return Err(invalid(format!("matmul: {:?} x {:?}", a.shape, b.shape)));
            }
            let (kdim, p) = (b.shape[0], b.shape[1]);
            let rows = a.value.len() / kdim.max(1);
            let mut out = vec![T::zero(); rows * p];
            for r in 0..rows {
                for kk in 0..kdim {
                    let a_rk = a.value[r * kdim + kk];
                    let orow = &mut out[r * p..(r + 1) * p];
                    for (o, &bv) in orow.iter_mut().zip(&b.value[kk * p..(kk + 1) * p]) {
                        *o = *o + a_rk * bv;
                    }
                }
            }
            let mut s = a.shape.clone();
            *s.last_mut().expect("rank >= 1") = p;
            (s, out, a.requires_grad || b.requires_grad)
        };
        Ok(self.tape.push(out_shape, value, Op::MatMul(self.id, rhs.id), rg))
    }

    /// `[B, n, k] x [B, k, p] -> [B, n, p]`.
    pub fn bmm(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_tape(&rhs)?;
        let (out_shape, value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[rhs.id]);
            if a.shape.len() != 3 || b.shape.len() != 3 || a.shape[0] != b.shape[0] || a.shape[2] != b.shape[1] {
                return Err(invalid(format!("bmm: {:?} x {:?}", a.shape, b.shape)));
            }
            let (batch, n, kdim, p) = (a.shape[0], a.shape[1], a.shape[2], b.shape[2]);
            let mut out = vec![T::zero(); batch * n * p];
            for bi in 0..batch {
                for i in 0..n {
                    for kk in 0..kdim {
                        let a_ik = a.value[(bi * n + i) * kdim + kk];
                        let bo = (bi * kdim + kk) * p;
                        let oo = (bi * n + i) * p;
                        for j in 0..p {
                            out[oo + j] = out[oo + j] + a_ik * b.value[bo + j];
                        }
                    }
                }
            }
            (vec![batch, n, p], out, a.requires_grad || b.requires_grad)
        };
        Ok(self.tape.push(out_shape, value, Op::BatchMatMul(self.id, rhs.id), rg))
    }

    /// Dilated 1-D convolution with zero padding prepended on the time axis.
    ///
    /// `self` is `[C_in, L]` or `[B, C_in, L]`, `kernel` is `[C_out, C_in, k]`
    /// and `bias` is `[C_out]`. The output length is
    /// `L + left_pad - dilation * (k - 1)`.
    pub fn conv1d(self, kernel: Var<'t, T>, bias: Var<'t, T>, dilation: usize, left_pad: usize) -> Result<Var<'t, T>> {
        self.check_tape(&kernel)?;
        self.check_tape(&bias)?;
        if dilation == 0 {
            return Err(invalid("dilation must be positive"));
        }
        let (out_shape, value, saved, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (x, w, b) = (&nodes[self.id], &nodes[kernel.id], &nodes[bias.id]);
            let (batch, c_in, len_in, unbatched) = match x.shape.as_slice() {
                [c, l] => (1, *c, *l, true),
                [bt, c, l] => (*bt, *c, *l, false),
                s => return Err(invalid(format!("conv1d input must be rank 2 or 3, got {s:?}"))),
            };
            let [c_out, kc_in, k] = w.shape[..] else {
                return Err(invalid(format!("conv1d kernel must be rank 3, got {:?}", w.shape)));
            };
            if kc_in != c_in {
                return Err(invalid(format!(
                    "conv1d kernel expects {kc_in} input channels, input has {c_in}"
                )));
            }
            if b.shape != [c_out] {
                return Err(invalid(format!("conv1d bias shape {:?}, expected [{c_out}]", b.shape)));
            }
            let span = dilation * (k - 1);
            if len_in + left_pad <= span {
                return Err(invalid(format!(
                    "conv1d output would be empty: L={len_in}, pad={left_pad}, span={span}"
                )));
            }
            let len_out = len_in + left_pad - span;
            let mut out = vec![T::zero(); batch * c_out * len_out];
            for bi in 0..batch {
                for co in 0..c_out {
                    let oo = (bi * c_out + co) * len_out;
                    out[oo..oo + len_out].fill(b.value[co]);
                    for ci in 0..c_in {
                        let xo = (bi * c_in + ci) * len_in;
                        for j in 0..k {
                            let wv = w.value[(co * c_in + ci) * k + j];
                            let shift = j * dilation;
                            // out[t] += w * x[t + shift - pad] for t + shift >= pad
                            let t0 = left_pad.saturating_sub(shift);
                            for t in t0..len_out {
                                out[oo + t] = out[oo + t] + wv * x.value[xo + t + shift - left_pad];
                            }
                        }
                    }
                }
            }
            let out_shape = if unbatched { vec![c_out, len_out] } else { vec![batch, c_out, len_out] };
            let saved = ConvSaved {
                input: self.id,
                kernel: kernel.id,
                bias: bias.id,
                batch,
                c_in,
                c_out,
                k,
                len_in,
                len_out,
                dilation,
                left_pad,
            };
            (out_shape, out, saved, x.requires_grad || w.requires_grad || b.requires_grad)
        };
        Ok(self.tape.push(out_shape, value, Op::Conv1d(Box::new(saved)), rg))
    }

    /// Weight normalization `g * v / |v|`, with the norm taken per leading
    /// (output-channel) index over all remaining axes. `gain` has one entry
    /// per output channel.
    pub fn weight_norm(self, gain: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_tape(&gain)?;
        let (out_shape, value, norms, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (v, g) = (&nodes[self.id], &nodes[gain.id]);
            let c_out = *v.shape.first().ok_or_else(|| invalid("weight_norm on a scalar"))?;
            if g.value.len() != c_out {
                return Err(invalid(format!(
                    "weight_norm gain has {} entries for {c_out} channels",
                    g.value.len()
                )));
            }
            let per = v.value.len() / c_out.max(1);
            let mut norms = Vec::with_capacity(c_out);
            let mut out = Vec::with_capacity(v.value.len());
            for c in 0..c_out {
                let row = &v.value[c * per..(c + 1) * per];
                let norm = row.iter().map(|&x| x * x).sum::<T>().sqrt();
                if !(norm > T::zero()) {
                    return Err(DtaadError::NumericDegenerate(format!(
                        "weight_norm: channel {c} has zero norm"
                    )));
                }
                norms.push(norm);
                out.extend(row.iter().map(|&x| g.value[c] * x / norm));
            }
            (v.shape.clone(), out, norms, v.requires_grad || g.requires_grad)
        };
        Ok(self.tape.push(
            out_shape,
            value,
            Op::WeightNorm { v: self.id, g: gain.id, norms },
            rg,
        ))
    }

    /// `max(0, x) + leak * min(0, x)`.
    pub fn leaky_relu(self, leak: T) -> Var<'t, T> {
        self.unary(|n| {
            let v = n
                .value
                .iter()
                .map(|&x| if x > T::zero() { x } else { leak * x })
                .collect();
            (n.shape.clone(), v, Op::LeakyRelu(self.id, leak))
        })
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.unary(|n| {
            let v = n.value.iter().map(|&x| sigmoid_scalar(x)).collect();
            (n.shape.clone(), v, Op::Sigmoid(self.id))
        })
    }

    /// Softmax along the last axis, with max subtraction.
    pub fn softmax_rows(self) -> Var<'t, T> {
        self.unary(|n| {
            let d = *n.shape.last().unwrap_or(&1);
            let mut v = n.value.clone();
            for row in v.chunks_mut(d.max(1)) {
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for x in row.iter_mut() {
                    *x = (*x - m).exp();
                    total = total + *x;
                }
                for x in row.iter_mut() {
                    *x = *x / total;
                }
            }
            (n.shape.clone(), v, Op::Softmax(self.id))
        })
    }

    /// Normalizes over the last axis: `gain * (x - mean) / sqrt(var + eps) + bias`.
    pub fn layer_norm(self, gain: Var<'t, T>, bias: Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
        self.check_tape(&gain)?;
        self.check_tape(&bias)?;
        let (out_shape, value, xhat, rstd, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (x, gm, bt) = (&nodes[self.id], &nodes[gain.id], &nodes[bias.id]);
            let d = *x.shape.last().ok_or_else(|| invalid("layer_norm on a scalar"))?;
            if gm.value.len() != d || bt.value.len() != d {
                return Err(invalid(format!(
                    "layer_norm over {d} features with gain {:?} and bias {:?}",
                    gm.shape, bt.shape
                )));
            }
            let inv_d = T::one() / T::lit(d as f64);
            let rows = x.value.len() / d;
            let mut xhat = Vec::with_capacity(x.value.len());
            let mut rstd = Vec::with_capacity(rows);
            let mut out = Vec::with_capacity(x.value.len());
            for row in x.value.chunks(d) {
                let mean = row.iter().copied().sum::<T>() * inv_d;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
                let r = T::one() / (var + eps).sqrt();
                rstd.push(r);
                for (j, &v) in row.iter().enumerate() {
                    let h = (v - mean) * r;
                    xhat.push(h);
                    out.push(gm.value[j] * h + bt.value[j]);
                }
            }
            (
                x.shape.clone(),
                out,
                xhat,
                rstd,
                x.requires_grad || gm.requires_grad || bt.requires_grad,
            )
        };
        Ok(self.tape.push(
            out_shape,
            value,
            Op::LayerNorm { x: self.id, gain: gain.id, bias: bias.id, xhat, rstd },
            rg,
        ))
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - p)`. Identity when
    /// `training` is false or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(self, p: f64, training: bool, rng: &mut R) -> Result<Var<'t, T>> {
        if !(0.0..1.0).contains(&p) {
            return Err(invalid(format!("dropout probability {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(self);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        Ok(self.unary(|n| {
            let mask: Vec<T> = (0..n.value.len())
                .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
                .collect();
            let v = n.value.iter().zip(&mask).map(|(&x, &m)| x * m).collect();
            (n.shape.clone(), v, Op::Dropout(self.id, mask))
        }))
    }

    pub fn sum(self) -> Var<'t, T> {
        self.unary(|n| (Vec::new(), vec![n.value.iter().copied().sum()], Op::Sum(self.id)))
    }

    pub fn mean(self) -> Var<'t, T> {
        self.unary(|n| {
            let m = n.value.iter().copied().sum::<T>() / T::lit(n.value.len() as f64);
            (Vec::new(), vec![m], Op::Mean(self.id))
        })
    }

    /// Mean of squared differences over all elements.
    pub fn mse(self, target: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_tape(&target)?;
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[target.id]);
            if a.shape != b.shape {
                return Err(shape(format!("mse: shapes {:?} and {:?} differ", a.shape, b.shape)));
            }
            let s: T = a.value.iter().zip(&b.value).map(|(&x, &y)| (x - y) * (x - y)).sum();
            (s / T::lit(a.value.len() as f64), a.requires_grad || b.requires_grad)
        };
        Ok(self.tape.push(Vec::new(), vec![value], Op::Mse(self.id, target.id), rg))
    }
}
