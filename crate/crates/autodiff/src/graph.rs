use std::collections::BTreeMap;

use crate::error::{dim_err, AutodiffError, Result};
use crate::params::{GradientMap, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryKind {
    Sigmoid,
    Tanh,
    Log,
    Exp,
    Neg,
    Square,
    LeakyRelu(f64),
    Scale(f64),
    Offset(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

/// Operation selector for [`Graph::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElementwiseKind {
    Unary(UnaryKind),
    Binary(BinaryKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(UnaryKind, Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Binary(BinaryKind, Var, Var),
    MatMul(Var, Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Sum(Var),
    Softmax { x: Var, axis: usize, tau: f64 },
    Conv2d { x: Var, w: Var, b: Var, spec: Conv2dSpec },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Computation graph for one forward pass.
///
/// Nodes are appended in evaluation order, so the arena index is already a
/// topological order and backward is a single reverse sweep. Build a fresh
/// graph per pass and drop it after [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b || a.ends_with(b) {
        Ok(a.to_vec())
    } else if b.ends_with(a) {
        Ok(b.to_vec())
    } else {
        Err(dim_err(op, a, b))
    }
}

fn conv_out_size(input: usize, pad: usize, k: usize, stride: usize) -> Option<usize> {
    (input + 2 * pad).checked_sub(k).map(|r| r / stride + 1)
}

struct ConvGeom {
    batch: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let p = self.positions();
        for c in 0..self.c {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let y = (oy * self.stride + i) as isize - self.pad as isize;
                        for ox in 0..self.ow {
                            let xx = (ox * self.stride + j) as isize - self.pad as isize;
                            dst[oy * self.ow + ox] = if y >= 0
                                && (y as usize) < self.h
                                && xx >= 0
                                && (xx as usize) < self.w
                            {
                                x[(c * self.h + y as usize) * self.w + xx as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[f64], gx: &mut [f64]) {
        let p = self.positions();
        for c in 0..self.c {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let y = (oy * self.stride + i) as isize - self.pad as isize;
                        if y < 0 || y as usize >= self.h {
                            continue;
                        }
                        for ox in 0..self.ow {
                            let xx = (ox * self.stride + j) as isize - self.pad as isize;
                            if xx >= 0 && (xx as usize) < self.w {
                                gx[(c * self.h + y as usize) * self.w + xx as usize] +=
                                    src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `c (m×n) = alpha · a (m×k) · b (k×n) + beta · c` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass slices whose extents cover every index reachable
    // through the given dimensions and strides; `c` is row-major m×n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies of `v`'s value as a constant leaf (stops gradient flow).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// A named leaf that receives gradient. Registering the same name twice
    /// returns the existing node.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf, true);
        self.params.insert(name.to_owned(), v);
        v
    }

    /// Registers `name` from `store`.
    pub fn param_from(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.get(name)?;
        Ok(self.param(name, value))
    }

    pub fn elementwise(&mut self, kind: ElementwiseKind, a: Var, b: Option<Var>) -> Result<Var> {
        match (kind, b) {
            (ElementwiseKind::Unary(k), None) => self.unary(k, a),
            (ElementwiseKind::Binary(k), Some(b)) => self.binary(k, a, b),
            (ElementwiseKind::Unary(k), Some(_)) => Err(AutodiffError::Contract(format!(
                "unary {k:?} given a second operand"
            ))),
            (ElementwiseKind::Binary(k), None) => Err(AutodiffError::Contract(format!(
                "binary {k:?} missing its second operand"
            ))),
        }
    }

    pub fn unary(&mut self, kind: UnaryKind, a: Var) -> Result<Var> {
        let x = self.value(a);
        let f: fn(f64, f64) -> f64 = match kind {
            UnaryKind::Sigmoid => |x, _| sigmoid(x),
            UnaryKind::Tanh => |x, _| x.tanh(),
            UnaryKind::Log => {
                if let Some(bad) = x.data().iter().find(|v| !(**v > 0.0)) {
                    return Err(AutodiffError::Domain {
                        op: "log",
                        detail: format!("non-positive input {bad}"),
                    });
                }
                |x, _| x.ln()
            }
            UnaryKind::Exp => |x, _| x.exp(),
            UnaryKind::Neg => |x, _| -x,
            UnaryKind::Square => |x, _| x * x,
            UnaryKind::LeakyRelu(_) => |x, s| if x > 0.0 { x } else { s * x },
            UnaryKind::Scale(_) => |x, c| c * x,
            UnaryKind::Offset(_) => |x, c| x + c,
        };
        let k = match kind {
            UnaryKind::LeakyRelu(c) | UnaryKind::Scale(c) | UnaryKind::Offset(c) => c,
            _ => 0.0,
        };
        let data = x.data().iter().map(|&v| f(v, k)).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let ng = self.needs(a);
        Ok(self.push(value, Op::Unary(kind, a), ng))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Tanh, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Neg, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Square, a)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.unary(UnaryKind::LeakyRelu(slope), a)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.unary(UnaryKind::Scale(factor), a)
    }

    pub fn offset(&mut self, a: Var, shift: f64) -> Result<Var> {
        self.unary(UnaryKind::Offset(shift), a)
    }

    /// Clips into `[lo, hi]`; gradient passes only where the input was inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo <= hi) {
            return Err(AutodiffError::Parameter(format!(
                "clamp bounds [{lo}, {hi}] are empty"
            )));
        }
        let x = self.value(a);
        let data = x.data().iter().map(|v| v.clamp(lo, hi)).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let ng = self.needs(a);
        Ok(self.push(value, Op::Clamp { x: a, lo, hi }, ng))
    }

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let op = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        let (xa, xb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(op, xa.shape(), xb.shape())?;
        if kind == BinaryKind::Div && xb.data().contains(&0.0) {
            return Err(AutodiffError::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        let (da, db) = (xa.data(), xb.data());
        let (na, nb) = (da.len(), db.len());
        let n = numel(&shape);
        let f: fn(f64, f64) -> f64 = match kind {
            BinaryKind::Add => |x, y| x + y,
            BinaryKind::Sub => |x, y| x - y,
            BinaryKind::Mul => |x, y| x * y,
            BinaryKind::Div => |x, y| x / y,
        };
        let data = (0..n).map(|i| f(da[i % na], db[i % nb])).collect();
        let value = Tensor::new(shape, data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Binary(kind, a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    /// Rank-2 matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (xa, xb) = (self.value(a), self.value(b));
        let (sa, sb) = (xa.shape(), xb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, xa.data(), (k, 1), xb.data(), (n, 1), 0.0, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| AutodiffError::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(dim_err("concat", &base, &[axis]));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(dim_err("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for v in inputs {
                let x = self.value(*v);
                let block = x.shape()[axis] * inner;
                data.extend_from_slice(&x.data()[o * block..(o + 1) * block]);
            }
        }
        let value = Tensor::new(shape, data)?;
        let ng = inputs.iter().any(|v| self.needs(*v));
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// `len` entries of `a` along `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        let s = x.shape();
        if axis >= s.len() || start + len > s[axis] {
            return Err(dim_err("slice", s, &[axis, start, len]));
        }
        let (outer, n, inner) = split_axis(s, axis);
        let mut shape = s.to_vec();
        shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let value = Tensor::new(shape, data)?;
        let ng = self.needs(a);
        Ok(self.push(value, Op::Slice { x: a, axis, start }, ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        let ng = self.needs(a);
        Ok(self.push(value, Op::Reshape(a), ng))
    }

    /// Sum of all entries as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).data().iter().sum();
        let ng = self.needs(a);
        Ok(self.push(Tensor::scalar(total), Op::Sum(a), ng))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(AutodiffError::Contract("mean of empty tensor".into()));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// `exp(x_i/τ) / Σ_j exp(x_j/τ)` along `axis`, evaluated with max subtraction.
    pub fn softmax_axis(&mut self, a: Var, axis: usize, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(AutodiffError::Parameter(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let x = self.value(a);
        let s = x.shape();
        if axis >= s.len() {
            return Err(dim_err("softmax", s, &[axis]));
        }
        let (outer, n, inner) = split_axis(s, axis);
        let mut out = vec![0.0; x.numel()];
        let xd = x.data();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| xd[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = ((xd[idx(j)] - max) / temperature).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[idx(j)] /= total;
                }
            }
        }
        let value = Tensor::new(s.to_vec(), out)?;
        let ng = self.needs(a);
        Ok(self.push(
            value,
            Op::Softmax {
                x: a,
                axis,
                tau: temperature,
            },
            ng,
        ))
    }

    fn conv_geom(&self, x: Var, w: Var, b: Var, spec: Conv2dSpec) -> Result<ConvGeom> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] {
            return Err(dim_err("conv2d", sx, sw));
        }
        if sb != [sw[0]] {
            return Err(dim_err("conv2d bias", sb, &sw[..1]));
        }
        if spec.stride == 0 {
            return Err(AutodiffError::Parameter("conv2d stride must be ≥ 1".into()));
        }
        let (oh, ow) = match (
            conv_out_size(sx[2], spec.pad, sw[2], spec.stride),
            conv_out_size(sx[3], spec.pad, sw[3], spec.stride),
        ) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => return Err(dim_err("conv2d kernel exceeds padded input", sx, sw)),
        };
        Ok(ConvGeom {
            batch: sx[0],
            c: sx[1],
            h: sx[2],
            w: sx[3],
            o: sw[0],
            kh: sw[2],
            kw: sw[3],
            oh,
            ow,
            stride: spec.stride,
            pad: spec.pad,
        })
    }

    /// Cross-correlation of `x` (batch×C×H×W) with `w` (O×C×kh×kw) plus bias `b` (O).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: Conv2dSpec) -> Result<Var> {
        let g = self.conv_geom(x, w, b, spec)?;
        let (patch, p) = (g.patch(), g.positions());
        let in_stride = g.c * g.h * g.w;
        let mut cols = vec![0.0; patch * p];
        let mut out = vec![0.0; g.batch * g.o * p];
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        for n in 0..g.batch {
            g.im2col(&xv.data()[n * in_stride..(n + 1) * in_stride], &mut cols);
            let dst = &mut out[n * g.o * p..(n + 1) * g.o * p];
            for (o, row) in dst.chunks_mut(p).enumerate() {
                row.fill(bv.data()[o]);
            }
            gemm(g.o, patch, p, wv.data(), (patch, 1), &cols, (p, 1), 1.0, dst);
        }
        let value = Tensor::new(vec![g.batch, g.o, g.oh, g.ow], out)?;
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, spec }, ng))
    }

    /// Reverse sweep from the scalar `loss`.
    ///
    /// Returns one gradient per entry of `params`; names that are not
    /// registered in this graph, or not reachable from `loss`, get zeros and
    /// are reported through [`GradientMap::unreached`].
    pub fn backward(&self, loss: Var, params: &ParamStore) -> Result<GradientMap> {
        let grads = self.backward_raw(loss)?;
        let mut out = BTreeMap::new();
        let mut unreached = Vec::new();
        for (name, value) in params.iter() {
            let g = self
                .params
                .get(name)
                .and_then(|v| grads[v.0].as_ref().map(|g| (v, g)));
            match g {
                Some((v, g)) => {
                    let shape = self.shape(*v);
                    if shape != value.shape() {
                        return Err(dim_err("backward", shape, value.shape()));
                    }
                    out.insert(name.to_owned(), Tensor::new(shape.to_vec(), g.clone())?);
                }
                None => {
                    out.insert(name.to_owned(), Tensor::zeros(value.shape()));
                    unreached.push(name.to_owned());
                }
            }
        }
        Ok(GradientMap::from_parts(out, unreached))
    }

    /// Gradient of `loss` with respect to every node, `None` where unreached.
    fn backward_raw(&self, loss: Var) -> Result<Vec<Option<Vec<f64>>>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(AutodiffError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Ok(grads)
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        // Accumulation buffer for input `v`, allocated on first touch.
        fn slot<'a>(
            graph: &Graph,
            grads: &'a mut [Option<Vec<f64>>],
            v: Var,
        ) -> Option<&'a mut Vec<f64>> {
            if !graph.nodes[v.0].needs_grad {
                return None;
            }
            let n = graph.nodes[v.0].value.numel();
            Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
        }

        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Unary(kind, a) => {
                let x = self.value(*a).data();
                let Some(ga) = slot(self, grads, *a) else { return };
                for i in 0..g.len() {
                    let d = match *kind {
                        UnaryKind::Sigmoid => y[i] * (1.0 - y[i]),
                        UnaryKind::Tanh => 1.0 - y[i] * y[i],
                        UnaryKind::Log => 1.0 / x[i],
                        UnaryKind::Exp => y[i],
                        UnaryKind::Neg => -1.0,
                        UnaryKind::Square => 2.0 * x[i],
                        UnaryKind::LeakyRelu(s) => {
                            if x[i] > 0.0 {
                                1.0
                            } else {
                                s
                            }
                        }
                        UnaryKind::Scale(c) => c,
                        UnaryKind::Offset(_) => 1.0,
                    };
                    ga[i] += g[i] * d;
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x).data();
                let Some(gx) = slot(self, grads, *x) else { return };
                for i in 0..g.len() {
                    if xv[i] >= *lo && xv[i] <= *hi {
                        gx[i] += g[i];
                    }
                }
            }
            Op::Binary(kind, a, b) => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                let (na, nb) = (xa.len(), xb.len());
                if let Some(ga) = slot(self, grads, *a) {
                    for i in 0..g.len() {
                        let d = match kind {
                            BinaryKind::Add | BinaryKind::Sub => 1.0,
                            BinaryKind::Mul => xb[i % nb],
                            BinaryKind::Div => 1.0 / xb[i % nb],
                        };
                        ga[i % na] += g[i] * d;
                    }
                }
                if let Some(gb) = slot(self, grads, *b) {
                    for i in 0..g.len() {
                        let d = match kind {
                            BinaryKind::Add => 1.0,
                            BinaryKind::Sub => -1.0,
                            BinaryKind::Mul => xa[i % na],
                            BinaryKind::Div => -y[i] / xb[i % nb],
                        };
                        gb[i % nb] += g[i] * d;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if let Some(ga) = slot(self, grads, *a) {
                    // dA = dC · Bᵀ
                    gemm(m, n, k, g, (n, 1), vb.data(), (1, n), 1.0, ga);
                }
                if let Some(gb) = slot(self, grads, *b) {
                    // dB = Aᵀ · dC
                    gemm(k, m, n, va.data(), (1, k), g, (n, 1), 1.0, gb);
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for v in inputs {
                    let len = self.shape(*v)[*axis];
                    if let Some(gv) = slot(self, grads, *v) {
                        let block = len * inner;
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..][..block];
                            for (d, s) in gv[o * block..(o + 1) * block].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                let len = node.value.shape()[*axis];
                let Some(gx) = slot(self, grads, *x) else { return };
                for o in 0..outer {
                    let dst = &mut gx[(o * n + start) * inner..][..len * inner];
                    for (d, s) in dst.iter_mut().zip(&g[o * len * inner..(o + 1) * len * inner]) {
                        *d += s;
                    }
                }
            }
            Op::Reshape(x) => {
                let Some(gx) = slot(self, grads, *x) else { return };
                for (d, s) in gx.iter_mut().zip(g) {
                    *d += s;
                }
            }
            Op::Sum(x) => {
                let Some(gx) = slot(self, grads, *x) else { return };
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Softmax { x, axis, tau } => {
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                let Some(gx) = slot(self, grads, *x) else { return };
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let dot: f64 = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..n {
                            gx[idx(j)] += y[idx(j)] * (g[idx(j)] - dot) / tau;
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, spec } => {
                let geom = self
                    .conv_geom(*x, *w, *b, *spec)
                    .expect("geometry validated in forward");
                let (patch, p) = (geom.patch(), geom.positions());
                let in_stride = geom.c * geom.h * geom.w;
                let out_stride = geom.o * p;
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                if let Some(gb) = slot(self, grads, *b) {
                    for n in 0..geom.batch {
                        for (o, row) in g[n * out_stride..(n + 1) * out_stride]
                            .chunks(p)
                            .enumerate()
                        {
                            gb[o] += row.iter().sum::<f64>();
                        }
                    }
                }
                let mut cols = vec![0.0; patch * p];
                if self.needs(*w) {
                    let mut gw_acc = vec![0.0; geom.o * patch];
                    for n in 0..geom.batch {
                        geom.im2col(&xv[n * in_stride..(n + 1) * in_stride], &mut cols);
                        // dW += dOut · colsᵀ
                        let go = &g[n * out_stride..(n + 1) * out_stride];
                        gemm(geom.o, p, patch, go, (p, 1), &cols, (1, p), 1.0, &mut gw_acc);
                    }
                    if let Some(gw) = slot(self, grads, *w) {
                        for (d, s) in gw.iter_mut().zip(&gw_acc) {
                            *d += s;
                        }
                    }
                }
                if let Some(gx) = slot(self, grads, *x) {
                    for n in 0..geom.batch {
                        // dcols = Wᵀ · dOut
                        let go = &g[n * out_stride..(n + 1) * out_stride];
                        gemm(patch, geom.o, p, wv, (1, patch), go, (p, 1), 0.0, &mut cols);
                        geom.col2im_add(&cols, &mut gx[n * in_stride..(n + 1) * in_stride]);
                    }
                }
            }
        }
    }
}
