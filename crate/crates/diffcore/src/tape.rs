use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{DiffError, Result};
use crate::linalg::{self, ConvGeom};
use crate::tensor::Tensor;

/// Inputs to `acos` are clipped to `[-1 + ε, 1 - ε]` when forming the derivative.
pub const ACOS_CLIP_EPS: f64 = 1e-7;

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle of a node recorded on a particular tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId {
    tape: u64,
    index: usize,
}

impl NodeId {
    pub fn index(&self) -> usize {
        self.index
    }
}

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "#{}", self.index)
    }
}

#[derive(Clone, Debug)]
enum OpKind {
    Leaf,
    Identity,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    Offset,
    MatMul { m: usize, k: usize, n: usize },
    MatVec { m: usize, k: usize },
    Transpose { rows: usize, cols: usize },
    Reshape,
    Concat,
    Gather(Arc<[usize]>),
    Sum,
    Mean,
    Powf(f64),
    Sqrt,
    Exp,
    Tanh,
    LeakyRelu(f64),
    Sigmoid,
    Softplus,
    MaxConst(f64),
    Abs,
    Norm,
    Acos,
    Cross,
    ExpSkew,
    Conv2d(ConvGeom),
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Identity => "identity",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Neg => "neg",
            OpKind::Scale(_) => "scale",
            OpKind::Offset => "offset",
            OpKind::MatMul { .. } => "matmul",
            OpKind::MatVec { .. } => "matvec",
            OpKind::Transpose { .. } => "transpose",
            OpKind::Reshape => "reshape",
            OpKind::Concat => "concat",
            OpKind::Gather(_) => "gather",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Powf(_) => "powf",
            OpKind::Sqrt => "sqrt",
            OpKind::Exp => "exp",
            OpKind::Tanh => "tanh",
            OpKind::LeakyRelu(_) => "leaky_relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Softplus => "softplus",
            OpKind::MaxConst(_) => "max_const",
            OpKind::Abs => "abs",
            OpKind::Norm => "norm",
            OpKind::Acos => "acos",
            OpKind::Cross => "cross",
            OpKind::ExpSkew => "exp_skew",
            OpKind::Conv2d(_) => "conv2d",
        }
    }
}

struct Node {
    kind: OpKind,
    inputs: Vec<Tensor>,
    out: Arc<[f64]>,
    shape: Arc<[usize]>,
    saved: Option<Arc<[f64]>>,
}

/// Append-only record of primitive operations for reverse-mode differentiation.
///
/// Operations whose inputs are all constants are evaluated but not recorded,
/// so constants never acquire gradients. A tape created with
/// [`Tape::no_grad`] evaluates everything through the same kernels without
/// recording anything.
pub struct Tape {
    id: u64,
    recording: bool,
    nodes: Vec<Node>,
    decay: HashMap<usize, f64>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Accumulated gradients, one entry per recorded node that the loss depends on.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientStore {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
}

impl GradientStore {
    /// Gradient for a tensor, or `None` for constants and unreached nodes.
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        let id = t.node()?;
        if id.tape != self.tape {
            return None;
        }
        self.grads.get(id.index)?.as_deref()
    }

    /// Gradient for a tensor, zeros when the loss does not depend on it.
    pub fn get_or_zeros(&self, t: &Tensor) -> Vec<f64> {
        self.get(t).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()])
    }

    pub fn by_node(&self, id: NodeId) -> Option<&[f64]> {
        if id.tape != self.tape {
            return None;
        }
        self.grads.get(id.index)?.as_deref()
    }

    /// Number of nodes holding a gradient.
    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Arc<[usize]>> {
    if a.shape() == b.shape() {
        Ok(a.shape_arc())
    } else if a.numel() == 1 {
        Ok(b.shape_arc())
    } else if b.numel() == 1 {
        Ok(a.shape_arc())
    } else {
        Err(DiffError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

#[inline]
fn at(v: &[f64], i: usize) -> f64 {
    if v.len() == 1 {
        v[0]
    } else {
        v[i]
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl Fn(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

/// Adds `contrib` into a slot of length `len`, summing when the input was broadcast.
fn accumulate_reduced(slot: &mut Option<Vec<f64>>, len: usize, contrib: &[f64]) {
    accumulate(slot, len, |buf| {
        if len == contrib.len() {
            for (b, c) in buf.iter_mut().zip(contrib) {
                *b += c;
            }
        } else {
            buf[0] += contrib.iter().sum::<f64>();
        }
    });
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            recording: true,
            nodes: Vec::new(),
            decay: HashMap::new(),
        }
    }

    /// A tape that evaluates operations without recording them.
    pub fn no_grad() -> Tape {
        Tape {
            recording: false,
            ..Tape::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Smallest distance of any recorded input from a point where its op is
    /// not differentiable (leaky ReLU and abs at 0, max_const at its bound,
    /// acos at its clip limits). Infinite when no such op was recorded.
    ///
    /// Finite-difference checks are only meaningful when perturbations stay
    /// well inside this margin.
    pub fn kink_margin(&self) -> f64 {
        let acos_edge = 1.0 - ACOS_CLIP_EPS;
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            let kink: fn(f64, f64) -> f64 = match node.kind {
                OpKind::LeakyRelu(_) | OpKind::Abs => |x, _| x.abs(),
                OpKind::MaxConst(_) => |x, c| (x - c).abs(),
                OpKind::Acos => |x, e| (x.abs() - e).abs(),
                _ => continue,
            };
            let c = match node.kind {
                OpKind::MaxConst(c) => c,
                _ => acos_edge,
            };
            for &x in node.inputs[0].values() {
                margin = margin.min(kink(x, c));
            }
        }
        margin
    }

    fn check_owned(&self, t: &Tensor) -> Result<()> {
        match t.node() {
            Some(id) if id.tape != self.id || id.index >= self.nodes.len() => Err(DiffError::NotOnTape),
            _ => Ok(()),
        }
    }

    fn push(
        &mut self,
        kind: OpKind,
        inputs: Vec<Tensor>,
        out: Vec<f64>,
        shape: Arc<[usize]>,
        saved: Option<Arc<[f64]>>,
    ) -> Result<Tensor> {
        if out.iter().any(|v| !v.is_finite()) {
            return Err(DiffError::NonFinite { op: kind.name() });
        }
        for t in &inputs {
            self.check_owned(t)?;
        }
        let out: Arc<[f64]> = out.into();
        let tracked = matches!(kind, OpKind::Leaf) || inputs.iter().any(|t| !t.is_constant());
        if !self.recording || !tracked {
            return Ok(Tensor::from_parts(shape, out, None));
        }
        let id = NodeId {
            tape: self.id,
            index: self.nodes.len(),
        };
        self.nodes.push(Node {
            kind,
            inputs,
            out: out.clone(),
            shape: shape.clone(),
            saved,
        });
        Ok(Tensor::from_parts(shape, out, Some(id)))
    }

    /// Registers a differentiable leaf (parameter or input variable).
    pub fn var(&mut self, t: &Tensor) -> Tensor {
        let shape = t.shape_arc();
        let data = t.data_arc();
        if !self.recording {
            return Tensor::from_parts(shape, data, None);
        }
        let id = NodeId {
            tape: self.id,
            index: self.nodes.len(),
        };
        self.nodes.push(Node {
            kind: OpKind::Leaf,
            inputs: Vec::new(),
            out: data.clone(),
            shape: shape.clone(),
            saved: None,
        });
        Tensor::from_parts(shape, data, Some(id))
    }

    /// Identity in the forward pass; contributes no gradient to `x` or its ancestors.
    pub fn stop_gradient(&self, x: &Tensor) -> Tensor {
        x.detached()
    }

    /// A fresh node holding the same values as `x`; used to give a tensor its own
    /// identity, e.g. as the target of a step-boundary mark.
    pub fn identity(&mut self, x: &Tensor) -> Result<Tensor> {
        self.push(OpKind::Identity, vec![x.clone()], x.to_vec(), x.shape_arc(), None)
    }

    /// Scales every gradient flowing backward through the given nodes by
    /// `exp(-alpha * dt)`. Marking a node twice is an error.
    pub fn mark_step_boundary(&mut self, nodes: &[&Tensor], alpha: f64, dt: f64) -> Result<()> {
        if !(alpha >= 0.0 && alpha.is_finite()) || !(dt > 0.0 && dt.is_finite()) {
            return Err(DiffError::InvalidArgument(format!(
                "step boundary needs alpha >= 0 and dt > 0, got alpha={alpha}, dt={dt}"
            )));
        }
        let factor = (-alpha * dt).exp();
        let mut ids = Vec::with_capacity(nodes.len());
        for t in nodes {
            let Some(id) = t.node() else { continue };
            self.check_owned(t)?;
            if self.decay.contains_key(&id.index) || ids.contains(&id.index) {
                return Err(DiffError::AlreadyMarked(id));
            }
            ids.push(id.index);
        }
        for i in ids {
            self.decay.insert(i, factor);
        }
        Ok(())
    }

    fn binary(&mut self, kind: OpKind, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let shape = broadcast_shape(kind.name(), a, b)?;
        let n = a.numel().max(b.numel());
        let (av, bv) = (a.values(), b.values());
        let out: Vec<f64> = match kind {
            OpKind::Add => (0..n).map(|i| at(av, i) + at(bv, i)).collect(),
            OpKind::Sub => (0..n).map(|i| at(av, i) - at(bv, i)).collect(),
            OpKind::Mul => (0..n).map(|i| at(av, i) * at(bv, i)).collect(),
            OpKind::Div => (0..n).map(|i| at(av, i) / at(bv, i)).collect(),
            _ => unreachable!("not a binary op"),
        };
        self.push(kind, vec![a.clone(), b.clone()], out, shape, None)
    }

    /// Elementwise sum; a one-element operand broadcasts.
    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(OpKind::Add, a, b)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(OpKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(OpKind::Mul, a, b)
    }

    pub fn div(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(OpKind::Div, a, b)
    }

    fn unary(&mut self, kind: OpKind, x: &Tensor, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let out = x.values().iter().map(|&v| f(v)).collect();
        self.push(kind, vec![x.clone()], out, x.shape_arc(), None)
    }

    pub fn neg(&mut self, x: &Tensor) -> Result<Tensor> {
        self.unary(OpKind::Neg, x, |v| -v)
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, x: &Tensor, c: f64) -> Result<Tensor> {
        self.unary(OpKind::Scale(c), x, |v| c * v)
    }

    /// Addition of a constant.
    pub fn offset(&mut self, x: &Tensor, c: f64) -> Result<Tensor> {
        self.unary(OpKind::Offset, x, |v| v + c)
    }

    /// `x^p` for a constant exponent.
    pub fn powf(&mut self, x: &Tensor, p: f64) -> Result<Tensor> {
        self.unary(OpKind::Powf(p), x, |v| v.powf(p))
    }

    pub fn sqrt(&mut self, x: &Tensor) -> Result<Tensor> {
        self.unary(OpKind::Sqrt, x, f64::sqrt)
    }

    pub fn exp(&mut self, x: &Tensor) -> Result<Tensor> {
        self.unary(OpKind::Exp, x, f64::exp)
    }

    pub fn tanh(&mut self, x: &Tensor) -> Result<Tensor> {
        self.unary(OpKind::Tanh, x, f64::tanh)
    }

    pub fn leaky_relu(&mut self, x: &Tensor, slope: f64) -> Result<Tensor> {
        self.unary(OpKind::LeakyRelu(slope), x, |v| if v > 0.0 { v } else { slope * v })
    }

    pub fn sigmoid(&mut self, x: &Tensor) -> Result<Tensor> {
        self.unary(OpKind::Sigmoid, x, sigmoid)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: &Tensor) -> Result<Tensor> {
        self.unary(OpKind::Softplus, x, |v| v.max(0.0) + (-v.abs()).exp().ln_1p())
    }

    /// `max(x, c)` elementwise against a constant.
    pub fn max_const(&mut self, x: &Tensor, c: f64) -> Result<Tensor> {
        self.unary(OpKind::MaxConst(c), x, |v| v.max(c))
    }

    pub fn abs(&mut self, x: &Tensor) -> Result<Tensor> {
        self.unary(OpKind::Abs, x, f64::abs)
    }

    /// `arccos`, with the derivative evaluated on inputs clipped to `[-1+ε, 1-ε]`.
    pub fn acos(&mut self, x: &Tensor) -> Result<Tensor> {
        self.unary(OpKind::Acos, x, |v| v.clamp(-1.0, 1.0).acos())
    }

    pub fn sum(&mut self, x: &Tensor) -> Result<Tensor> {
        let s = x.values().iter().sum();
        self.push(OpKind::Sum, vec![x.clone()], vec![s], Arc::from([1usize]), None)
    }

    pub fn mean(&mut self, x: &Tensor) -> Result<Tensor> {
        let s = x.values().iter().sum::<f64>() / x.numel() as f64;
        self.push(OpKind::Mean, vec![x.clone()], vec![s], Arc::from([1usize]), None)
    }

    /// Euclidean norm over all elements.
    pub fn norm(&mut self, x: &Tensor) -> Result<Tensor> {
        let s = x.values().iter().map(|v| v * v).sum::<f64>().sqrt();
        self.push(OpKind::Norm, vec![x.clone()], vec![s], Arc::from([1usize]), None)
    }

    pub fn dot(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(DiffError::ShapeMismatch {
                op: "dot",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let p = self.mul(a, b)?;
        self.sum(&p)
    }

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        linalg::gemm(m, k, n, a.values(), false, b.values(), false, 0.0, &mut out);
        self.push(
            OpKind::MatMul { m, k, n },
            vec![a.clone(), b.clone()],
            out,
            Arc::from([m, n]),
            None,
        )
    }

    /// Matrix `[m, k]` times vector `[k]`.
    pub fn matvec(&mut self, w: &Tensor, x: &Tensor) -> Result<Tensor> {
        let (sw, sx) = (w.shape(), x.shape());
        if sw.len() != 2 || sx.len() != 1 || sw[1] != sx[0] {
            return Err(DiffError::ShapeMismatch {
                op: "matvec",
                lhs: sw.to_vec(),
                rhs: sx.to_vec(),
            });
        }
        let (m, k) = (sw[0], sw[1]);
        let (wv, xv) = (w.values(), x.values());
        let out = (0..m)
            .map(|i| wv[i * k..(i + 1) * k].iter().zip(xv).map(|(a, b)| a * b).sum())
            .collect();
        self.push(
            OpKind::MatVec { m, k },
            vec![w.clone(), x.clone()],
            out,
            Arc::from([m]),
            None,
        )
    }

    pub fn transpose(&mut self, a: &Tensor) -> Result<Tensor> {
        let s = a.shape();
        if s.len() != 2 {
            return Err(DiffError::InvalidShape {
                op: "transpose",
                shape: s.to_vec(),
            });
        }
        let (rows, cols) = (s[0], s[1]);
        let v = a.values();
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = v[i * cols + j];
            }
        }
        self.push(
            OpKind::Transpose { rows, cols },
            vec![a.clone()],
            out,
            Arc::from([cols, rows]),
            None,
        )
    }

    pub fn reshape(&mut self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != a.numel() || shape.contains(&0) {
            return Err(DiffError::ShapeMismatch {
                op: "reshape",
                lhs: a.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        self.push(OpKind::Reshape, vec![a.clone()], a.to_vec(), shape.into(), None)
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| DiffError::InvalidArgument("concat of zero tensors".into()))?;
        let tail = &first.shape()[1..];
        let mut lead = 0;
        let mut out = Vec::new();
        for p in parts {
            if p.shape().len() != first.shape().len() || &p.shape()[1..] != tail {
                return Err(DiffError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            lead += p.shape()[0];
            out.extend_from_slice(p.values());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(tail);
        let inputs = parts.iter().map(|t| (*t).clone()).collect();
        self.push(OpKind::Concat, inputs, out, shape.into(), None)
    }

    /// Picks flat elements by index into a 1-D result.
    pub fn gather(&mut self, x: &Tensor, indices: &[usize]) -> Result<Tensor> {
        if indices.is_empty() || indices.iter().any(|&i| i >= x.numel()) {
            return Err(DiffError::InvalidArgument(format!(
                "gather indices out of range for {} elements",
                x.numel()
            )));
        }
        let v = x.values();
        let out = indices.iter().map(|&i| v[i]).collect();
        self.push(
            OpKind::Gather(indices.into()),
            vec![x.clone()],
            out,
            Arc::from([indices.len()]),
            None,
        )
    }

    /// Contiguous flat range `[start, start + len)` as a 1-D tensor.
    pub fn slice(&mut self, x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather(x, &idx)
    }

    pub fn cross(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != [3] || b.shape() != [3] {
            return Err(DiffError::ShapeMismatch {
                op: "cross",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let out = cross3(a.values(), b.values()).to_vec();
        self.push(
            OpKind::Cross,
            vec![a.clone(), b.clone()],
            out,
            Arc::from([3usize]),
            None,
        )
    }

    /// Matrix exponential of the skew-symmetric matrix built from a 3-vector.
    pub fn exp_skew(&mut self, w: &Tensor) -> Result<Tensor> {
        if w.shape() != [3] {
            return Err(DiffError::InvalidShape {
                op: "exp_skew",
                shape: w.shape().to_vec(),
            });
        }
        let v = w.values();
        let out = linalg::exp_so3(&[v[0], v[1], v[2]]).to_vec();
        self.push(OpKind::ExpSkew, vec![w.clone()], out, Arc::from([3usize, 3]), None)
    }

    /// 2-D convolution. `input` is `[C, H, W]`, `weight` is `[O, C, k, k]`,
    /// `bias` is `[O]`; zero padding `pad` on every side.
    pub fn conv2d(
        &mut self,
        input: &Tensor,
        weight: &Tensor,
        bias: &Tensor,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor> {
        let (si, sw) = (input.shape(), weight.shape());
        let mismatch = || DiffError::ShapeMismatch {
            op: "conv2d",
            lhs: si.to_vec(),
            rhs: sw.to_vec(),
        };
        if si.len() != 3 || sw.len() != 4 || sw[1] != si[0] || sw[2] != sw[3] {
            return Err(mismatch());
        }
        if bias.shape() != [sw[0]] {
            return Err(DiffError::ShapeMismatch {
                op: "conv2d",
                lhs: sw.to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let g = ConvGeom {
            in_channels: si[0],
            in_h: si[1],
            in_w: si[2],
            out_channels: sw[0],
            kernel: sw[2],
            stride,
            pad,
        };
        if !g.valid() {
            return Err(mismatch());
        }
        let col = linalg::im2col(&g, input.values());
        let cols = g.col_cols();
        let mut out = vec![0.0; g.out_channels * cols];
        for (o, b) in bias.values().iter().enumerate() {
            out[o * cols..(o + 1) * cols].fill(*b);
        }
        linalg::gemm(
            g.out_channels,
            g.col_rows(),
            cols,
            weight.values(),
            false,
            &col,
            false,
            1.0,
            &mut out,
        );
        self.push(
            OpKind::Conv2d(g),
            vec![input.clone(), weight.clone(), bias.clone()],
            out,
            Arc::from([g.out_channels, g.out_h(), g.out_w()]),
            Some(col.into()),
        )
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: &Tensor) -> Result<GradientStore> {
        if loss.numel() != 1 {
            return Err(DiffError::NotScalar(loss.shape().to_vec()));
        }
        let root = match loss.node() {
            Some(id) if id.tape == self.id && id.index < self.nodes.len() => id.index,
            _ => return Err(DiffError::NotOnTape),
        };
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root] = Some(vec![1.0]);
        for i in (0..=root).rev() {
            let Some(mut g) = grads[i].take() else { continue };
            if let Some(f) = self.decay.get(&i) {
                g.iter_mut().for_each(|v| *v *= f);
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(GradientStore { tape: self.id, grads })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let ins = &node.inputs;
        let slot = |t: &Tensor| t.node().map(|id| id.index);
        let out = &node.out;
        match &node.kind {
            OpKind::Leaf => {}
            OpKind::Identity | OpKind::Reshape => {
                if let Some(j) = slot(&ins[0]) {
                    accumulate_reduced(&mut grads[j], g.len(), g);
                }
            }
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => {
                let (a, b) = (&ins[0], &ins[1]);
                let (av, bv) = (a.values(), b.values());
                let n = g.len();
                if let Some(j) = slot(a) {
                    let c: Vec<f64> = match node.kind {
                        OpKind::Add | OpKind::Sub => g.to_vec(),
                        OpKind::Mul => (0..n).map(|k| g[k] * at(bv, k)).collect(),
                        _ => (0..n).map(|k| g[k] / at(bv, k)).collect(),
                    };
                    accumulate_reduced(&mut grads[j], a.numel(), &c);
                }
                if let Some(j) = slot(b) {
                    let c: Vec<f64> = match node.kind {
                        OpKind::Add => g.to_vec(),
                        OpKind::Sub => g.iter().map(|v| -v).collect(),
                        OpKind::Mul => (0..n).map(|k| g[k] * at(av, k)).collect(),
                        _ => (0..n)
                            .map(|k| {
                                let d = at(bv, k);
                                -g[k] * at(av, k) / (d * d)
                            })
                            .collect(),
                    };
                    accumulate_reduced(&mut grads[j], b.numel(), &c);
                }
            }
            OpKind::Neg
            | OpKind::Scale(_)
            | OpKind::Offset
            | OpKind::Powf(_)
            | OpKind::Sqrt
            | OpKind::Exp
            | OpKind::Tanh
            | OpKind::LeakyRelu(_)
            | OpKind::Sigmoid
            | OpKind::Softplus
            | OpKind::MaxConst(_)
            | OpKind::Abs
            | OpKind::Acos => {
                let Some(j) = slot(&ins[0]) else { return };
                let x = ins[0].values();
                let kind = &node.kind;
                let d = |k: usize| -> f64 {
                    let (xv, yv) = (x[k], out[k]);
                    match *kind {
                        OpKind::Neg => -1.0,
                        OpKind::Scale(c) => c,
                        OpKind::Offset => 1.0,
                        OpKind::Powf(p) => p * xv.powf(p - 1.0),
                        OpKind::Sqrt => 0.5 / yv,
                        OpKind::Exp => yv,
                        OpKind::Tanh => 1.0 - yv * yv,
                        OpKind::LeakyRelu(s) => {
                            if xv > 0.0 {
                                1.0
                            } else {
                                s
                            }
                        }
                        OpKind::Sigmoid => yv * (1.0 - yv),
                        OpKind::Softplus => sigmoid(xv),
                        OpKind::MaxConst(c) => {
                            if xv > c {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        OpKind::Abs => {
                            if xv > 0.0 {
                                1.0
                            } else if xv < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        }
                        OpKind::Acos => {
                            let c = xv.clamp(-1.0 + ACOS_CLIP_EPS, 1.0 - ACOS_CLIP_EPS);
                            -1.0 / (1.0 - c * c).sqrt()
                        }
                        _ => unreachable!(),
                    }
                };
                accumulate(&mut grads[j], x.len(), |buf| {
                    for (k, b) in buf.iter_mut().enumerate() {
                        *b += g[k] * d(k);
                    }
                });
            }
            OpKind::Sum | OpKind::Mean => {
                let Some(j) = slot(&ins[0]) else { return };
                let n = ins[0].numel();
                let v = if matches!(node.kind, OpKind::Mean) {
                    g[0] / n as f64
                } else {
                    g[0]
                };
                accumulate(&mut grads[j], n, |buf| buf.iter_mut().for_each(|b| *b += v));
            }
            OpKind::Norm => {
                let Some(j) = slot(&ins[0]) else { return };
                let x = ins[0].values();
                let nrm = out[0];
                accumulate(&mut grads[j], x.len(), |buf| {
                    if nrm > 0.0 {
                        for (b, xv) in buf.iter_mut().zip(x) {
                            *b += g[0] * xv / nrm;
                        }
                    }
                });
            }
            OpKind::MatMul { m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (a, b) = (&ins[0], &ins[1]);
                if let Some(j) = slot(a) {
                    accumulate(&mut grads[j], m * k, |buf| {
                        linalg::gemm(m, n, k, g, false, b.values(), true, 1.0, buf);
                    });
                }
                if let Some(j) = slot(b) {
                    accumulate(&mut grads[j], k * n, |buf| {
                        linalg::gemm(k, m, n, a.values(), true, g, false, 1.0, buf);
                    });
                }
            }
            OpKind::MatVec { m, k } => {
                let (m, k) = (*m, *k);
                let (w, x) = (&ins[0], &ins[1]);
                if let Some(j) = slot(w) {
                    let xv = x.values();
                    accumulate(&mut grads[j], m * k, |buf| {
                        for r in 0..m {
                            let gr = g[r];
                            if gr != 0.0 {
                                for (b, xv) in buf[r * k..(r + 1) * k].iter_mut().zip(xv) {
                                    *b += gr * xv;
                                }
                            }
                        }
                    });
                }
                if let Some(j) = slot(x) {
                    let wv = w.values();
                    accumulate(&mut grads[j], k, |buf| {
                        for r in 0..m {
                            let gr = g[r];
                            for (b, wv) in buf.iter_mut().zip(&wv[r * k..(r + 1) * k]) {
                                *b += gr * wv;
                            }
                        }
                    });
                }
            }
            OpKind::Transpose { rows, cols } => {
                let Some(j) = slot(&ins[0]) else { return };
                let (rows, cols) = (*rows, *cols);
                accumulate(&mut grads[j], rows * cols, |buf| {
                    for r in 0..rows {
                        for c in 0..cols {
                            buf[r * cols + c] += g[c * rows + r];
                        }
                    }
                });
            }
            OpKind::Concat => {
                let mut off = 0;
                for t in ins {
                    let n = t.numel();
                    if let Some(j) = slot(t) {
                        accumulate_reduced(&mut grads[j], n, &g[off..off + n]);
                    }
                    off += n;
                }
            }
            OpKind::Gather(idx) => {
                let Some(j) = slot(&ins[0]) else { return };
                accumulate(&mut grads[j], ins[0].numel(), |buf| {
                    for (gv, &ix) in g.iter().zip(idx.iter()) {
                        buf[ix] += gv;
                    }
                });
            }
            OpKind::Cross => {
                let (a, b) = (ins[0].values(), ins[1].values());
                if let Some(j) = slot(&ins[0]) {
                    let c = cross3(b, g);
                    accumulate_reduced(&mut grads[j], 3, &c);
                }
                if let Some(j) = slot(&ins[1]) {
                    let c = cross3(g, a);
                    accumulate_reduced(&mut grads[j], 3, &c);
                }
            }
            OpKind::ExpSkew => {
                let Some(j) = slot(&ins[0]) else { return };
                let c = exp_skew_vjp(ins[0].values(), g);
                accumulate_reduced(&mut grads[j], 3, &c);
            }
            OpKind::Conv2d(geom) => {
                let geom = *geom;
                let col = node.saved.as_ref().expect("conv2d saves its im2col buffer");
                let (rows, cols) = (geom.col_rows(), geom.col_cols());
                let oc = geom.out_channels;
                if let Some(j) = slot(&ins[1]) {
                    accumulate(&mut grads[j], oc * rows, |buf| {
                        linalg::gemm(oc, cols, rows, g, false, col, true, 1.0, buf);
                    });
                }
                if let Some(j) = slot(&ins[2]) {
                    accumulate(&mut grads[j], oc, |buf| {
                        for (o, b) in buf.iter_mut().enumerate() {
                            *b += g[o * cols..(o + 1) * cols].iter().sum::<f64>();
                        }
                    });
                }
                if let Some(j) = slot(&ins[0]) {
                    let mut dcol = vec![0.0; rows * cols];
                    linalg::gemm(rows, oc, cols, ins[1].values(), true, g, false, 0.0, &mut dcol);
                    accumulate(&mut grads[j], ins[0].numel(), |buf| {
                        linalg::col2im_add(&geom, &dcol, buf);
                    });
                }
            }
        }
    }

    /// Shape of a recorded node.
    pub fn node_shape(&self, id: NodeId) -> Option<&[usize]> {
        if id.tape != self.id {
            return None;
        }
        self.nodes.get(id.index).map(|n| &*n.shape)
    }

    /// Name of the primitive that produced a node.
    pub fn node_op(&self, id: NodeId) -> Option<&'static str> {
        if id.tape != self.id {
            return None;
        }
        self.nodes.get(id.index).map(|n| n.kind.name())
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn cross3(a: &[f64], b: &[f64]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Vector-Jacobian product of `w ↦ exp([w]×)` with upstream `g` (3×3 row-major).
fn exp_skew_vjp(w: &[f64], g: &[f64]) -> [f64; 3] {
    let theta = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
    let (a, b, da, db) = linalg::rodrigues_coeffs(theta);
    let k = linalg::skew(w);
    let k2 = linalg::mat3_mul(&k, &k);
    let frob = |m: &[f64; 9]| -> f64 { m.iter().zip(g).map(|(x, y)| x * y).sum() };
    let gk = frob(&k);
    let gk2 = frob(&k2);
    let mut out = [0.0; 3];
    for (i, o) in out.iter_mut().enumerate() {
        let mut e = [0.0; 3];
        e[i] = 1.0;
        let ei = linalg::skew(&e);
        let ek = linalg::mat3_mul(&ei, &k);
        let ke = linalg::mat3_mul(&k, &ei);
        let mut sym = [0.0; 9];
        for q in 0..9 {
            sym[q] = ek[q] + ke[q];
        }
        *o = da * w[i] * gk + a * frob(&ei) + db * w[i] * gk2 + b * frob(&sym);
    }
    out
}
