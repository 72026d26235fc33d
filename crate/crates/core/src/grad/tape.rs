use super::kernels::{matmul_into, matmul_nt_into, matmul_tn_into, Window};
use super::tensor::{Real, Tensor};
use super::GradError;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operator set understood by the tape.
///
/// Binary elementwise ops accept a right operand of the same shape, of the
/// trailing shape (broadcast over the leading batch axis), or of a single
/// element.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    /// `[m,k] x [k,n]`, or `[m,k] x [n,k]^T` when `transpose_b`.
    MatMul {
        transpose_b: bool,
    },
    /// Inputs: `x [N,C,H,W]`, `w [O,C,k,k]`, `b [O]`. Output spatial extent is
    /// `ceil(in / stride)` with asymmetric zero padding.
    Conv2d {
        stride: usize,
    },
    /// Inputs: `x [N,Ci,H,W]`, `w [Ci,Co,4,4]`, `b [Co]`. Stride 2, padding 1,
    /// output `[N,Co,2H,2W]`.
    ConvTranspose2d,
    /// Training inputs: `x, gamma, beta`. Eval inputs additionally carry
    /// `running_mean, running_var`. Channel axis is 1; `x` is rank 2 or 4.
    BatchNorm {
        eps: f64,
        training: bool,
    },
    LeakyRelu {
        slope: f64,
    },
    Sigmoid,
    Exp,
    Log,
    Add,
    Sub,
    Mul,
    Clamp {
        min: f64,
        max: f64,
    },
    Reshape {
        shape: Vec<usize>,
    },
    Concat {
        axis: usize,
    },
    Slice {
        axis: usize,
        start: usize,
        end: usize,
    },
    /// `None` reduces every element to a `[1]` tensor.
    ReduceSum {
        axis: Option<usize>,
    },
    ReduceMean {
        axis: Option<usize>,
    },
    LogSumExp {
        axis: usize,
    },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul { .. } => "matmul",
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::ConvTranspose2d => "conv_transpose2d",
            OpKind::BatchNorm { .. } => "batchnorm",
            OpKind::LeakyRelu { .. } => "leaky_relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Clamp { .. } => "clamp",
            OpKind::Reshape { .. } => "reshape",
            OpKind::Concat { .. } => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::ReduceSum { .. } => "reduce_sum",
            OpKind::ReduceMean { .. } => "reduce_mean",
            OpKind::LogSumExp { .. } => "logsumexp",
        }
    }
}

#[derive(Clone, Debug)]
enum NodeKind {
    Leaf,
    Op(OpKind),
}

struct Node<T> {
    kind: NodeKind,
    inputs: Vec<Var>,
    value: Tensor<T>,
    saved: Vec<Tensor<T>>,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, which is a valid topological order, so
/// the reverse pass is a single backwards sweep.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of the node's shape when `v` does not reach the loss.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        self.grads[v.0].take().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Leading,
    Scalar,
}

fn bcast_kind(op: &'static str, a: &[usize], b: &[usize]) -> Result<Bcast, GradError> {
    if a == b {
        Ok(Bcast::Same)
    } else if b.iter().product::<usize>() == 1 {
        Ok(Bcast::Scalar)
    } else if a.len() > b.len() && a[a.len() - b.len()..] == *b {
        Ok(Bcast::Leading)
    } else {
        Err(GradError::ShapeMismatch {
            op,
            shapes: vec![a.to_vec(), b.to_vec()],
        })
    }
}

/// Splits `shape` around `axis` into `(outer, len, inner)`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(NodeKind::Leaf, Vec::new(), value, Vec::new(), true)
    }

    /// Records a non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(NodeKind::Leaf, Vec::new(), value, Vec::new(), false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Batch mean and biased variance recorded by a training-mode batchnorm node,
    /// with the number of elements each channel statistic was computed over.
    pub fn batch_stats(&self, v: Var) -> Option<(&Tensor<T>, &Tensor<T>, usize)> {
        let node = &self.nodes[v.0];
        match &node.kind {
            NodeKind::Op(OpKind::BatchNorm { training: true, .. }) => {
                let x = self.value(node.inputs[0]);
                let count = x.numel() / x.shape()[1];
                Some((&node.saved[2], &node.saved[3], count))
            }
            _ => None,
        }
    }

    fn push(&mut self, kind: NodeKind, inputs: Vec<Var>, value: Tensor<T>, saved: Vec<Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            kind,
            inputs,
            value,
            saved,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Evaluates `kind` on `inputs` and records the result.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var, GradError> {
        let (value, saved) = self.forward(&kind, inputs)?;
        if !value.all_finite() {
            return Err(GradError::NonFinite { op: kind.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(NodeKind::Op(kind), inputs.to_vec(), value, saved, requires_grad))
    }

    fn expect_arity(kind: &OpKind, inputs: &[Var], n: usize) -> Result<(), GradError> {
        if inputs.len() != n {
            return Err(GradError::Arity {
                op: kind.name(),
                expected: n,
                got: inputs.len(),
            });
        }
        Ok(())
    }

    fn mismatch(&self, op: &'static str, inputs: &[Var]) -> GradError {
        GradError::ShapeMismatch {
            op,
            shapes: inputs.iter().map(|v| self.shape(*v).to_vec()).collect(),
        }
    }

    fn forward(&self, kind: &OpKind, inputs: &[Var]) -> Result<(Tensor<T>, Vec<Tensor<T>>), GradError> {
        let op = kind.name();
        match kind {
            OpKind::MatMul { transpose_b } => {
                Self::expect_arity(kind, inputs, 2)?;
                let (a, b) = (self.value(inputs[0]), self.value(inputs[1]));
                if a.rank() != 2 || b.rank() != 2 {
                    return Err(self.mismatch(op, inputs));
                }
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let (kb, n) = if *transpose_b {
                    (b.shape()[1], b.shape()[0])
                } else {
                    (b.shape()[0], b.shape()[1])
                };
                if k != kb {
                    return Err(self.mismatch(op, inputs));
                }
                let mut out = Tensor::zeros(&[m, n]);
                matmul_into(a.data(), b.data(), out.data_mut(), m, k, n, *transpose_b, false);
                Ok((out, vec![]))
            }
            OpKind::Conv2d { stride } => {
                Self::expect_arity(kind, inputs, 3)?;
                let (x, w, b) = (self.value(inputs[0]), self.value(inputs[1]), self.value(inputs[2]));
                let ok = x.rank() == 4
                    && w.rank() == 4
                    && w.shape()[1] == x.shape()[1]
                    && w.shape()[2] == w.shape()[3]
                    && b.shape() == [w.shape()[0]]
                    && *stride >= 1;
                if !ok {
                    return Err(self.mismatch(op, inputs));
                }
                let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
                let o = w.shape()[0];
                let win = Window::ceil_halving(c, h, wd, w.shape()[2], *stride);
                let plane = win.col_cols();
                let mut cols = vec![T::zero(); win.col_rows() * plane];
                let mut out = Tensor::zeros(&[n, o, win.out_h, win.out_w]);
                let in_sz = c * h * wd;
                for s in 0..n {
                    win.im2col(&x.data()[s * in_sz..(s + 1) * in_sz], &mut cols);
                    let dst = &mut out.data_mut()[s * o * plane..(s + 1) * o * plane];
                    for (oc, row) in dst.chunks_mut(plane).enumerate() {
                        row.iter_mut().for_each(|v| *v = b.data()[oc]);
                    }
                    matmul_into(w.data(), &cols, dst, o, win.col_rows(), plane, false, true);
                }
                Ok((out, vec![]))
            }
            OpKind::ConvTranspose2d => {
                Self::expect_arity(kind, inputs, 3)?;
                let (x, w, b) = (self.value(inputs[0]), self.value(inputs[1]), self.value(inputs[2]));
                let ok = x.rank() == 4
                    && w.rank() == 4
                    && w.shape()[0] == x.shape()[1]
                    && w.shape()[2] == 4
                    && w.shape()[3] == 4
                    && b.shape() == [w.shape()[1]];
                if !ok {
                    return Err(self.mismatch(op, inputs));
                }
                let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
                let co = w.shape()[1];
                let win = Self::convt_window(co, h, wd);
                let plane = h * wd;
                let out_plane = 4 * plane;
                let mut cols = vec![T::zero(); win.col_rows() * plane];
                let mut out = Tensor::zeros(&[n, co, 2 * h, 2 * wd]);
                for s in 0..n {
                    let xs = &x.data()[s * ci * plane..(s + 1) * ci * plane];
                    matmul_tn_into(w.data(), xs, &mut cols, win.col_rows(), ci, plane, false);
                    let dst = &mut out.data_mut()[s * co * out_plane..(s + 1) * co * out_plane];
                    for (oc, ch) in dst.chunks_mut(out_plane).enumerate() {
                        ch.iter_mut().for_each(|v| *v = b.data()[oc]);
                    }
                    win.col2im(&cols, dst);
                }
                Ok((out, vec![]))
            }
            OpKind::BatchNorm { eps, training } => {
                Self::expect_arity(kind, inputs, if *training { 3 } else { 5 })?;
                let x = self.value(inputs[0]);
                if x.rank() != 2 && x.rank() != 4 {
                    return Err(self.mismatch(op, inputs));
                }
                let c = x.shape()[1];
                if inputs[1..].iter().any(|v| self.shape(*v) != [c]) {
                    return Err(self.mismatch(op, inputs));
                }
                let (outer, _, inner) = axis_split(x.shape(), 1);
                let count = outer * inner;
                let eps = T::lit(*eps);
                let (mean, var) = if *training {
                    let mut mean = vec![T::zero(); c];
                    let mut var = vec![T::zero(); c];
                    for o in 0..outer {
                        for ch in 0..c {
                            let base = (o * c + ch) * inner;
                            mean[ch] += x.data()[base..base + inner].iter().copied().sum::<T>();
                        }
                    }
                    let inv_count = T::one() / T::lit(count as f64);
                    mean.iter_mut().for_each(|m| *m *= inv_count);
                    for o in 0..outer {
                        for ch in 0..c {
                            let base = (o * c + ch) * inner;
                            var[ch] += x.data()[base..base + inner].iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum::<T>();
                        }
                    }
                    var.iter_mut().for_each(|v| *v *= inv_count);
                    (mean, var)
                } else {
                    (self.value(inputs[3]).data().to_vec(), self.value(inputs[4]).data().to_vec())
                };
                let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                let (gamma, beta) = (self.value(inputs[1]).data(), self.value(inputs[2]).data());
                let mut xhat = Tensor::zeros(x.shape());
                let mut out = Tensor::zeros(x.shape());
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        for i in base..base + inner {
                            let h = (x.data()[i] - mean[ch]) * inv_std[ch];
                            xhat.data_mut()[i] = h;
                            out.data_mut()[i] = gamma[ch] * h + beta[ch];
                        }
                    }
                }
                let saved = vec![
                    xhat,
                    Tensor::new(vec![c], inv_std)?,
                    Tensor::new(vec![c], mean)?,
                    Tensor::new(vec![c], var)?,
                ];
                Ok((out, saved))
            }
            OpKind::LeakyRelu { slope } => {
                Self::expect_arity(kind, inputs, 1)?;
                let s = T::lit(*slope);
                Ok((self.value(inputs[0]).map(|v| if v > T::zero() { v } else { v * s }), vec![]))
            }
            OpKind::Sigmoid => {
                Self::expect_arity(kind, inputs, 1)?;
                Ok((self.value(inputs[0]).map(sigmoid), vec![]))
            }
            OpKind::Exp => {
                Self::expect_arity(kind, inputs, 1)?;
                Ok((self.value(inputs[0]).map(|v| v.exp()), vec![]))
            }
            OpKind::Log => {
                Self::expect_arity(kind, inputs, 1)?;
                Ok((self.value(inputs[0]).map(|v| v.ln()), vec![]))
            }
            OpKind::Add | OpKind::Sub | OpKind::Mul => {
                Self::expect_arity(kind, inputs, 2)?;
                let (a, b) = (self.value(inputs[0]), self.value(inputs[1]));
                let bc = bcast_kind(op, a.shape(), b.shape())?;
                let f = match kind {
                    OpKind::Add => |x: T, y: T| x + y,
                    OpKind::Sub => |x: T, y: T| x - y,
                    _ => |x: T, y: T| x * y,
                };
                let bd = b.data();
                let mut out = Tensor::zeros(a.shape());
                match bc {
                    Bcast::Same => {
                        for ((o, &x), &y) in out.data_mut().iter_mut().zip(a.data()).zip(bd) {
                            *o = f(x, y);
                        }
                    }
                    Bcast::Scalar => {
                        let y = bd[0];
                        for (o, &x) in out.data_mut().iter_mut().zip(a.data()) {
                            *o = f(x, y);
                        }
                    }
                    Bcast::Leading => {
                        let inner = bd.len();
                        for (oc, xc) in out.data_mut().chunks_mut(inner).zip(a.data().chunks(inner)) {
                            for ((o, &x), &y) in oc.iter_mut().zip(xc).zip(bd) {
                                *o = f(x, y);
                            }
                        }
                    }
                }
                Ok((out, vec![]))
            }
            OpKind::Clamp { min, max } => {
                Self::expect_arity(kind, inputs, 1)?;
                if min > max {
                    return Err(GradError::InvalidAttr {
                        op,
                        detail: format!("min {min} > max {max}"),
                    });
                }
                let (lo, hi) = (T::lit(*min), T::lit(*max));
                Ok((self.value(inputs[0]).map(|v| v.max(lo).min(hi)), vec![]))
            }
            OpKind::Reshape { shape } => {
                Self::expect_arity(kind, inputs, 1)?;
                let x = self.value(inputs[0]);
                if shape.iter().product::<usize>() != x.numel() {
                    return Err(GradError::ShapeMismatch {
                        op,
                        shapes: vec![x.shape().to_vec(), shape.clone()],
                    });
                }
                Ok((x.clone().reshaped(shape)?, vec![]))
            }
            OpKind::Concat { axis } => {
                if inputs.is_empty() {
                    return Err(GradError::Arity { op, expected: 1, got: 0 });
                }
                let first = self.shape(inputs[0]).to_vec();
                if *axis >= first.len() {
                    return Err(self.mismatch(op, inputs));
                }
                let mut total = 0;
                for v in inputs {
                    let s = self.shape(*v);
                    let same_rest = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == *axis || a == b);
                    if !same_rest {
                        return Err(self.mismatch(op, inputs));
                    }
                    total += s[*axis];
                }
                let mut shape = first.clone();
                shape[*axis] = total;
                let (outer, _, inner) = axis_split(&first, *axis);
                let mut data = Vec::with_capacity(shape.iter().product());
                for o in 0..outer {
                    for v in inputs {
                        let t = self.value(*v);
                        let chunk = t.shape()[*axis] * inner;
                        data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                    }
                }
                Ok((Tensor::new(shape, data)?, vec![]))
            }
            OpKind::Slice { axis, start, end } => {
                Self::expect_arity(kind, inputs, 1)?;
                let x = self.value(inputs[0]);
                if *axis >= x.rank() || start > end || *end > x.shape()[*axis] {
                    return Err(GradError::InvalidAttr {
                        op,
                        detail: format!("range {start}..{end} on axis {axis} of {:?}", x.shape()),
                    });
                }
                let (outer, len, inner) = axis_split(x.shape(), *axis);
                let mut shape = x.shape().to_vec();
                shape[*axis] = end - start;
                let mut data = Vec::with_capacity(outer * (end - start) * inner);
                for o in 0..outer {
                    let base = o * len * inner;
                    data.extend_from_slice(&x.data()[base + start * inner..base + end * inner]);
                }
                Ok((Tensor::new(shape, data)?, vec![]))
            }
            OpKind::ReduceSum { axis } | OpKind::ReduceMean { axis } => {
                Self::expect_arity(kind, inputs, 1)?;
                let x = self.value(inputs[0]);
                let mean = matches!(kind, OpKind::ReduceMean { .. });
                match axis {
                    None => {
                        let mut s: T = x.data().iter().copied().sum();
                        if mean {
                            s /= T::lit(x.numel() as f64);
                        }
                        Ok((Tensor::scalar(s), vec![]))
                    }
                    Some(ax) => {
                        if *ax >= x.rank() {
                            return Err(self.mismatch(op, inputs));
                        }
                        let (outer, len, inner) = axis_split(x.shape(), *ax);
                        let mut shape = x.shape().to_vec();
                        shape.remove(*ax);
                        let mut out = vec![T::zero(); outer * inner];
                        for o in 0..outer {
                            for l in 0..len {
                                let src = &x.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                                for (d, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                                    *d += v;
                                }
                            }
                        }
                        if mean {
                            let inv = T::one() / T::lit(len as f64);
                            out.iter_mut().for_each(|v| *v *= inv);
                        }
                        Ok((Tensor::new(shape, out)?, vec![]))
                    }
                }
            }
            OpKind::LogSumExp { axis } => {
                Self::expect_arity(kind, inputs, 1)?;
                let x = self.value(inputs[0]);
                if *axis >= x.rank() || x.shape()[*axis] == 0 {
                    return Err(self.mismatch(op, inputs));
                }
                let (outer, len, inner) = axis_split(x.shape(), *axis);
                let mut shape = x.shape().to_vec();
                shape.remove(*axis);
                let mut out = vec![T::zero(); outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| x.data()[(o * len + l) * inner + i];
                        let m = (0..len).map(at).fold(T::neg_infinity(), T::max);
                        let s: T = (0..len).map(|l| (at(l) - m).exp()).sum();
                        out[o * inner + i] = m + s.ln();
                    }
                }
                Ok((Tensor::new(shape, out)?, vec![]))
            }
        }
    }

    fn convt_window(co: usize, h: usize, w: usize) -> Window {
        // Viewed from the output image: a 4x4, stride-2, pad-1 window grid of
        // size (h, w) over a (2h, 2w) canvas.
        Window {
            channels: co,
            in_h: 2 * h,
            in_w: 2 * w,
            kernel: 4,
            stride: 2,
            pad_top: 1,
            pad_left: 1,
            out_h: h,
            out_w: w,
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, GradError> {
        let loss_shape = self.shape(loss);
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(GradError::NonScalarLoss(loss_shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(loss_shape, T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let NodeKind::Op(kind) = &node.kind else {
                continue;
            };
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let input_grads = self.vjp(kind, node, &g);
            grads[idx] = Some(g);
            for (input, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(ig.data()) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(ig),
                }
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    /// Vector-Jacobian product of one node: gradient for each input that needs one.
    fn vjp(&self, kind: &OpKind, node: &Node<T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let need = |i: usize| self.nodes[node.inputs[i].0].requires_grad;
        let input = |i: usize| self.value(node.inputs[i]);
        let gd = g.data();
        match kind {
            OpKind::MatMul { transpose_b } => {
                let (a, b) = (input(0), input(1));
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = g.shape()[1];
                let da = need(0).then(|| {
                    let mut da = Tensor::zeros(a.shape());
                    // dA = G * B^T  (B as [k,n]), or G * B when B was given as [n,k]
                    if *transpose_b {
                        matmul_into(gd, b.data(), da.data_mut(), m, n, k, false, false);
                    } else {
                        matmul_nt_into(gd, b.data(), da.data_mut(), m, n, k, false);
                    }
                    da
                });
                let db = need(1).then(|| {
                    let mut db = Tensor::zeros(b.shape());
                    if *transpose_b {
                        // dB[n,k] = G^T * A
                        matmul_tn_into(gd, a.data(), db.data_mut(), n, m, k, false);
                    } else {
                        // dB[k,n] = A^T * G
                        matmul_tn_into(a.data(), gd, db.data_mut(), k, m, n, false);
                    }
                    db
                });
                vec![da, db]
            }
            OpKind::Conv2d { stride } => {
                let (x, w) = (input(0), input(1));
                let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
                let o = w.shape()[0];
                let win = Window::ceil_halving(c, h, wd, w.shape()[2], *stride);
                let plane = win.col_cols();
                let rows = win.col_rows();
                let in_sz = c * h * wd;
                let mut dx = need(0).then(|| Tensor::zeros(x.shape()));
                let mut dw = need(1).then(|| Tensor::zeros(w.shape()));
                let mut db = need(2).then(|| Tensor::zeros(&[o]));
                let mut cols = vec![T::zero(); rows * plane];
                for s in 0..n {
                    let gs = &gd[s * o * plane..(s + 1) * o * plane];
                    if let Some(db) = db.as_mut() {
                        for (oc, row) in gs.chunks(plane).enumerate() {
                            db.data_mut()[oc] += row.iter().copied().sum::<T>();
                        }
                    }
                    if let Some(dw) = dw.as_mut() {
                        win.im2col(&x.data()[s * in_sz..(s + 1) * in_sz], &mut cols);
                        matmul_nt_into(gs, &cols, dw.data_mut(), o, plane, rows, true);
                    }
                    if let Some(dx) = dx.as_mut() {
                        matmul_tn_into(w.data(), gs, &mut cols, rows, o, plane, false);
                        win.col2im(&cols, &mut dx.data_mut()[s * in_sz..(s + 1) * in_sz]);
                    }
                }
                vec![dx, dw, db]
            }
            OpKind::ConvTranspose2d => {
                let (x, w) = (input(0), input(1));
                let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
                let co = w.shape()[1];
                let win = Self::convt_window(co, h, wd);
                let plane = h * wd;
                let out_sz = co * 4 * plane;
                let rows = win.col_rows();
                let mut dx = need(0).then(|| Tensor::zeros(x.shape()));
                let mut dw = need(1).then(|| Tensor::zeros(w.shape()));
                let mut db = need(2).then(|| Tensor::zeros(&[co]));
                let mut gcols = vec![T::zero(); rows * plane];
                for s in 0..n {
                    let gs = &gd[s * out_sz..(s + 1) * out_sz];
                    if let Some(db) = db.as_mut() {
                        for (oc, ch) in gs.chunks(4 * plane).enumerate() {
                            db.data_mut()[oc] += ch.iter().copied().sum::<T>();
                        }
                    }
                    if dx.is_none() && dw.is_none() {
                        continue;
                    }
                    win.im2col(gs, &mut gcols);
                    if let Some(dx) = dx.as_mut() {
                        let dst = &mut dx.data_mut()[s * ci * plane..(s + 1) * ci * plane];
                        matmul_into(w.data(), &gcols, dst, ci, rows, plane, false, false);
                    }
                    if let Some(dw) = dw.as_mut() {
                        let xs = &x.data()[s * ci * plane..(s + 1) * ci * plane];
                        matmul_nt_into(xs, &gcols, dw.data_mut(), ci, plane, rows, true);
                    }
                }
                vec![dx, dw, db]
            }
            OpKind::BatchNorm { training, .. } => {
                let x = input(0);
                let c = x.shape()[1];
                let (outer, _, inner) = axis_split(x.shape(), 1);
                let count = T::lit((outer * inner) as f64);
                let xhat = node.saved[0].data();
                let inv_std = node.saved[1].data();
                let gamma = input(1).data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        for i in base..base + inner {
                            sum_g[ch] += gd[i];
                            sum_gx[ch] += gd[i] * xhat[i];
                        }
                    }
                }
                let dx = need(0).then(|| {
                    let mut dx = Tensor::zeros(x.shape());
                    for o in 0..outer {
                        for ch in 0..c {
                            let base = (o * c + ch) * inner;
                            let scale = gamma[ch] * inv_std[ch];
                            for i in base..base + inner {
                                dx.data_mut()[i] = if *training {
                                    scale * (gd[i] - sum_g[ch] / count - xhat[i] * sum_gx[ch] / count)
                                } else {
                                    scale * gd[i]
                                };
                            }
                        }
                    }
                    dx
                });
                let dgamma = need(1).then(|| Tensor::new(vec![c], sum_gx.clone()).unwrap());
                let dbeta = need(2).then(|| Tensor::new(vec![c], sum_g.clone()).unwrap());
                let mut out = vec![dx, dgamma, dbeta];
                if !*training {
                    out.extend([None, None]);
                }
                out
            }
            OpKind::LeakyRelu { slope } => {
                let s = T::lit(*slope);
                let x = input(0);
                let mut dx = g.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
                    if v <= T::zero() {
                        *d *= s;
                    }
                }
                vec![Some(dx)]
            }
            OpKind::Sigmoid => {
                let mut dx = g.clone();
                for (d, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    *d *= y * (T::one() - y);
                }
                vec![Some(dx)]
            }
            OpKind::Exp => {
                let mut dx = g.clone();
                for (d, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    *d *= y;
                }
                vec![Some(dx)]
            }
            OpKind::Log => {
                let mut dx = g.clone();
                for (d, &x) in dx.data_mut().iter_mut().zip(input(0).data()) {
                    *d /= x;
                }
                vec![Some(dx)]
            }
            OpKind::Add | OpKind::Sub | OpKind::Mul => {
                let (a, b) = (input(0), input(1));
                let bc = bcast_kind("", a.shape(), b.shape()).expect("checked in forward");
                let da = need(0).then(|| match kind {
                    OpKind::Mul => {
                        let mut da = g.clone();
                        let bd = b.data();
                        match bc {
                            Bcast::Same => da.data_mut().iter_mut().zip(bd).for_each(|(d, &y)| *d *= y),
                            Bcast::Scalar => da.data_mut().iter_mut().for_each(|d| *d *= bd[0]),
                            Bcast::Leading => {
                                for chunk in da.data_mut().chunks_mut(bd.len()) {
                                    chunk.iter_mut().zip(bd).for_each(|(d, &y)| *d *= y);
                                }
                            }
                        }
                        da
                    }
                    _ => g.clone(),
                });
                let db = need(1).then(|| {
                    // Elementwise partial w.r.t. b, then reduce over broadcast axes.
                    let local: Vec<T> = match kind {
                        OpKind::Add => gd.to_vec(),
                        OpKind::Sub => gd.iter().map(|&v| -v).collect(),
                        _ => gd.iter().zip(a.data()).map(|(&v, &x)| v * x).collect(),
                    };
                    let mut db = Tensor::zeros(b.shape());
                    match bc {
                        Bcast::Same => db.data_mut().copy_from_slice(&local),
                        Bcast::Scalar => db.data_mut()[0] = local.iter().copied().sum(),
                        Bcast::Leading => {
                            let inner = b.numel();
                            for chunk in local.chunks(inner) {
                                db.data_mut().iter_mut().zip(chunk).for_each(|(d, &v)| *d += v);
                            }
                        }
                    }
                    db
                });
                vec![da, db]
            }
            OpKind::Clamp { min, max } => {
                let (lo, hi) = (T::lit(*min), T::lit(*max));
                let mut dx = g.clone();
                for (d, &x) in dx.data_mut().iter_mut().zip(input(0).data()) {
                    if x < lo || x > hi {
                        *d = T::zero();
                    }
                }
                vec![Some(dx)]
            }
            OpKind::Reshape { .. } => {
                vec![Some(g.clone().reshaped(input(0).shape()).expect("same numel"))]
            }
            OpKind::Concat { axis } => {
                let first = input(0).shape().to_vec();
                let (outer, _, inner) = axis_split(&first, *axis);
                let total = g.shape()[*axis];
                let mut offset = 0;
                node.inputs
                    .iter()
                    .enumerate()
                    .map(|(i, v)| {
                        let t = self.value(*v);
                        let len = t.shape()[*axis];
                        let out = need(i).then(|| {
                            let mut data = Vec::with_capacity(t.numel());
                            for o in 0..outer {
                                let base = (o * total + offset) * inner;
                                data.extend_from_slice(&gd[base..base + len * inner]);
                            }
                            Tensor::new(t.shape().to_vec(), data).unwrap()
                        });
                        offset += len;
                        out
                    })
                    .collect()
            }
            OpKind::Slice { axis, start, end } => {
                let x = input(0);
                let (outer, len, inner) = axis_split(x.shape(), *axis);
                let width = (end - start) * inner;
                let mut dx = Tensor::zeros(x.shape());
                for o in 0..outer {
                    let base = o * len * inner + start * inner;
                    dx.data_mut()[base..base + width].copy_from_slice(&gd[o * width..(o + 1) * width]);
                }
                vec![Some(dx)]
            }
            OpKind::ReduceSum { axis } | OpKind::ReduceMean { axis } => {
                let x = input(0);
                let mean = matches!(kind, OpKind::ReduceMean { .. });
                match axis {
                    None => {
                        let mut v = gd[0];
                        if mean {
                            v /= T::lit(x.numel() as f64);
                        }
                        vec![Some(Tensor::full(x.shape(), v))]
                    }
                    Some(ax) => {
                        let (outer, len, inner) = axis_split(x.shape(), *ax);
                        let scale = if mean { T::one() / T::lit(len as f64) } else { T::one() };
                        let mut dx = Tensor::zeros(x.shape());
                        for o in 0..outer {
                            for l in 0..len {
                                let dst = &mut dx.data_mut()[(o * len + l) * inner..(o * len + l + 1) * inner];
                                for (d, &v) in dst.iter_mut().zip(&gd[o * inner..(o + 1) * inner]) {
                                    *d = v * scale;
                                }
                            }
                        }
                        vec![Some(dx)]
                    }
                }
            }
            OpKind::LogSumExp { axis } => {
                let x = input(0);
                let (outer, len, inner) = axis_split(x.shape(), *axis);
                let y = node.value.data();
                let mut dx = Tensor::zeros(x.shape());
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            let at = (o * len + l) * inner + i;
                            let r = o * inner + i;
                            dx.data_mut()[at] = gd[r] * (x.data()[at] - y[r]).exp();
                        }
                    }
                }
                vec![Some(dx)]
            }
        }
    }

    // Convenience wrappers; each records exactly one op unless noted.

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.apply(OpKind::MatMul { transpose_b: false }, &[a, b])
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.apply(OpKind::MatMul { transpose_b: true }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.apply(OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.apply(OpKind::Mul, &[a, b])
    }

    /// `a * c` for a constant `c` (records the constant and one `mul`).
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, GradError> {
        let k = self.constant(Tensor::scalar(T::lit(c)));
        self.mul(a, k)
    }

    /// `a + c` for a constant `c`.
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, GradError> {
        let k = self.constant(Tensor::scalar(T::lit(c)));
        self.add(a, k)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, GradError> {
        self.apply(OpKind::Exp, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var, GradError> {
        self.apply(OpKind::Log, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, GradError> {
        self.apply(OpKind::Sigmoid, &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var, GradError> {
        self.apply(OpKind::LeakyRelu { slope }, &[a])
    }

    pub fn clamp(&mut self, a: Var, min: f64, max: f64) -> Result<Var, GradError> {
        self.apply(OpKind::Clamp { min, max }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, GradError> {
        self.apply(OpKind::Reshape { shape: shape.to_vec() }, &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, GradError> {
        self.apply(OpKind::Concat { axis }, parts)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var, GradError> {
        self.apply(OpKind::Slice { axis, start, end }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, GradError> {
        self.apply(OpKind::ReduceSum { axis: None }, &[a])
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, GradError> {
        self.apply(OpKind::ReduceSum { axis: Some(axis) }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, GradError> {
        self.apply(OpKind::ReduceMean { axis: None }, &[a])
    }

    pub fn logsumexp(&mut self, a: Var, axis: usize) -> Result<Var, GradError> {
        self.apply(OpKind::LogSumExp { axis }, &[a])
    }
}

#[inline]
fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
