//! Define-by-run reverse-mode tape.
//!
//! Every primitive appends a node holding its forward value and whatever it
//! needs for the backward sweep. [`Tape::backward`] walks the nodes in reverse
//! creation order, which is a valid reverse topological order because inputs
//! are always created before their consumers.

use super::tensor::{axis_blocks, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Im2ColMap {
    // Source offset per output element, `usize::MAX` for padding.
    src: Vec<usize>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    GatherRows(Var, Vec<usize>),
    Sum { x: Var, axis: Option<usize> },
    Mean { x: Var, axis: Option<usize> },
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Clamp { x: Var, lo: f64, hi: f64 },
    Minimum(Var, Var),
    Maximum(Var, Var),
    Im2Col(Var, Im2ColMap),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that required one.
#[derive(Debug)]
pub struct Gradients {
    slots: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.slots.get(v.0).and_then(|s| s.as_deref())
    }

    /// Gradient of `v`, zero-filled when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len])
    }
}

/// Trailing-suffix broadcast: `b` repeats over the leading axes of `a`.
fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

fn accumulate(slots: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    slots[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Copy of `x` cut off from the gradient path.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if !broadcast_ok(av.shape(), bv.shape()) || bv.is_empty() {
            return Err(Error::Shape {
                op: name,
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let bd = bv.data();
        let m = bd.len();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % m]))
            .collect();
        Tensor::new(av.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("div", a, b, |x, y| x / y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Div(a, b), rg))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("minimum", a, b)?;
        let v = self.binary("minimum", a, b, f64::min)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Minimum(a, b), rg))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("maximum", a, b)?;
        let v = self.binary("maximum", a, b, f64::max)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Maximum(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.map(x, |t| t * c);
        let rg = self.rg(&[x]);
        self.push(v, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let v = self.map(x, |t| t + c);
        let rg = self.rg(&[x]);
        self.push(v, Op::AddScalar(x), rg)
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let xv = self.value(x);
        Tensor::from_fn(xv.shape(), |i| f(xv.data()[i]))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.map(x, f);
        let rg = self.rg(&[x]);
        self.push(v, op, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |t| if t < 0.0 { 0.0 } else { t }, Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    /// Clamp with zero gradient at and beyond the bounds.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |t| t.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::arg("transpose", format!("expected 2-D, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let xd = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xd[i * c + j];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[c, r], out)?, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::arg("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::arg("concat", format!("axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (p, q))| d == axis || p == q);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_blocks(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &x in xs {
                let ext = self.shape(x)[axis];
                let block = ext * inner;
                out.extend_from_slice(&self.value(x).data()[o * block..(o + 1) * block]);
            }
        }
        let rg = self.rg(xs);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Concat(xs.to_vec(), axis), rg))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::arg(
                "slice",
                format!("[{start}, {}) on axis {axis} of {s:?}", start + len),
            ));
        }
        let (outer, ext, inner) = axis_blocks(&s, axis);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ext * inner + start * inner;
            out.extend_from_slice(&xd[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Slice { x, axis, start },
            rg,
        ))
    }

    /// Select rows along axis 0; repeated indices are allowed.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() {
            return Err(Error::arg("gather_rows", "scalar input"));
        }
        let width: usize = s[1..].iter().product();
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            if r >= s[0] {
                return Err(Error::Index {
                    what: "gather_rows",
                    index: r,
                    size: s[0],
                });
            }
            out.extend_from_slice(&xd[r * width..(r + 1) * width]);
        }
        let mut shape = s;
        shape[0] = rows.len();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::GatherRows(x, rows.to_vec()),
            rg,
        ))
    }

    fn reduce(&self, x: Var, axis: Option<usize>, scale_by_count: bool) -> Result<Tensor> {
        let xv = self.value(x);
        match axis {
            None => {
                let s: f64 = xv.data().iter().sum();
                let n = xv.len().max(1) as f64;
                Ok(Tensor::scalar(if scale_by_count { s / n } else { s }))
            }
            Some(a) => {
                if a >= xv.ndim() {
                    return Err(Error::arg("sum", format!("axis {a} of {:?}", xv.shape())));
                }
                let (outer, ext, inner) = axis_blocks(xv.shape(), a);
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for e in 0..ext {
                        let src = &xv.data()[(o * ext + e) * inner..(o * ext + e + 1) * inner];
                        for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                if scale_by_count {
                    let n = ext as f64;
                    out.iter_mut().for_each(|v| *v /= n);
                }
                let mut shape = xv.shape().to_vec();
                shape.remove(a);
                Tensor::new(&shape, out)
            }
        }
    }

    /// Sum over one axis (removed from the shape) or over everything.
    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        let v = self.reduce(x, axis, false)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Sum { x, axis }, rg))
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        let v = self.reduce(x, axis, true)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Mean { x, axis }, rg))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.softmax_value(x, axis, false)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Softmax { x, axis }, rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.softmax_value(x, axis, true)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::LogSoftmax { x, axis }, rg))
    }

    fn softmax_value(&self, x: Var, axis: usize, log: bool) -> Result<Tensor> {
        let xv = self.value(x);
        if axis >= xv.ndim() {
            return Err(Error::arg("softmax", format!("axis {axis} of {:?}", xv.shape())));
        }
        let (outer, ext, inner) = axis_blocks(xv.shape(), axis);
        let xd = xv.data();
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |e: usize| (o * ext + e) * inner + i;
                let max = (0..ext).map(|e| xd[at(e)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for e in 0..ext {
                    let z = (xd[at(e)] - max).exp();
                    out[at(e)] = z;
                    total += z;
                }
                if log {
                    let lse = total.ln();
                    for e in 0..ext {
                        out[at(e)] = xd[at(e)] - max - lse;
                    }
                } else {
                    for e in 0..ext {
                        out[at(e)] /= total;
                    }
                }
            }
        }
        Tensor::new(xv.shape(), out)
    }

    /// Normalization over the last axis, without affine parameters.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let n = *xv
            .shape()
            .last()
            .ok_or_else(|| Error::arg("layer_norm", "scalar input"))?;
        let rows = xv.len() / n;
        let mut out = vec![0.0; xv.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv.data()[r * n..(r + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (o, v) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = (v - mu) * is;
            }
            inv_std.push(is);
        }
        let v = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::LayerNorm { x, inv_std }, rg))
    }

    /// Unfold `[C, H, W]` into `[Ho*Wo, C*k*k]` patches (zero padding).
    pub fn im2col(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || stride == 0 || kernel == 0 {
            return Err(Error::arg("im2col", format!("input {s:?}, kernel {kernel}, stride {stride}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        if h + 2 * pad < kernel || w + 2 * pad < kernel {
            return Err(Error::arg("im2col", format!("kernel {kernel} larger than padded {s:?}")));
        }
        let ho = (h + 2 * pad - kernel) / stride + 1;
        let wo = (w + 2 * pad - kernel) / stride + 1;
        let cols = c * kernel * kernel;
        let mut src = vec![usize::MAX; ho * wo * cols];
        for oy in 0..ho {
            for ox in 0..wo {
                let row = (oy * wo + ox) * cols;
                for ch in 0..c {
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                src[row + (ch * kernel + ky) * kernel + kx] =
                                    (ch * h + iy as usize) * w + ix as usize;
                            }
                        }
                    }
                }
            }
        }
        let xd = self.value(x).data();
        let out = src
            .iter()
            .map(|&i| if i == usize::MAX { 0.0 } else { xd[i] })
            .collect();
        let v = Tensor::new(&[ho * wo, cols], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Im2Col(x, Im2ColMap { src }), rg))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::arg(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut slots: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        slots[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = slots[idx].take() else { continue };
            self.backprop(node, &g, &mut slots);
            slots[idx] = Some(g);
        }
        Ok(Gradients { slots })
    }

    fn backprop(&self, node: &Node, g: &[f64], slots: &mut [Option<Vec<f64>>]) {
        let val = node.value.data();
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let len = |v: Var| self.nodes[v.0].value.len();
        let data = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if rg(*a) {
                    let ga = accumulate(slots, *a, g.len());
                    ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if rg(*b) {
                    let m = len(*b);
                    let gb = accumulate(slots, *b, m);
                    for (i, s) in g.iter().enumerate() {
                        gb[i % m] += sign * s;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (data(*a), data(*b));
                let m = bd.len();
                if rg(*a) {
                    let ga = accumulate(slots, *a, g.len());
                    for (i, s) in g.iter().enumerate() {
                        ga[i] += s * bd[i % m];
                    }
                }
                if rg(*b) {
                    let gb = accumulate(slots, *b, m);
                    for (i, s) in g.iter().enumerate() {
                        gb[i % m] += s * ad[i];
                    }
                }
            }
            Op::Div(a, b) => {
                let bd = data(*b);
                let m = bd.len();
                if rg(*a) {
                    let ga = accumulate(slots, *a, g.len());
                    for (i, s) in g.iter().enumerate() {
                        ga[i] += s / bd[i % m];
                    }
                }
                if rg(*b) {
                    let gb = accumulate(slots, *b, m);
                    for (i, s) in g.iter().enumerate() {
                        // d(a/b)/db = -(a/b)/b
                        gb[i % m] -= s * val[i] / bd[i % m];
                    }
                }
            }
            Op::Minimum(a, b) | Op::Maximum(a, b) => {
                let is_min = matches!(node.op, Op::Minimum(..));
                let (ad, bd) = (data(*a), data(*b));
                // Ties route to `a`.
                let pick_a = |i: usize| if is_min { ad[i] <= bd[i] } else { ad[i] >= bd[i] };
                if rg(*a) {
                    let ga = accumulate(slots, *a, g.len());
                    for (i, s) in g.iter().enumerate() {
                        if pick_a(i) {
                            ga[i] += s;
                        }
                    }
                }
                if rg(*b) {
                    let gb = accumulate(slots, *b, g.len());
                    for (i, s) in g.iter().enumerate() {
                        if !pick_a(i) {
                            gb[i] += s;
                        }
                    }
                }
            }
            Op::Scale(x, c) => {
                let gx = accumulate(slots, *x, g.len());
                gx.iter_mut().zip(g).for_each(|(d, s)| *d += c * s);
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                let gx = accumulate(slots, *x, g.len());
                gx.iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if rg(*a) {
                    // dA = G · Bᵀ
                    let bd = data(*b);
                    let ga = accumulate(slots, *a, m * k);
                    gemm(m, n, k, g, (n as isize, 1), bd, (1, n as isize), ga);
                }
                if rg(*b) {
                    // dB = Aᵀ · G
                    let ad = data(*a);
                    let gb = accumulate(slots, *b, k * n);
                    gemm(k, m, n, ad, (1, k as isize), g, (n as isize, 1), gb);
                }
            }
            Op::Transpose(x) => {
                let s = self.nodes[x.0].value.shape();
                let (r, c) = (s[0], s[1]);
                let gx = accumulate(slots, *x, r * c);
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Concat(xs, axis) => {
                let (outer, _, inner) = axis_blocks(node.value.shape(), *axis);
                let total = node.value.shape()[*axis];
                let mut offset = 0;
                for &x in xs {
                    let ext = self.nodes[x.0].value.shape()[*axis];
                    if rg(x) {
                        let gx = accumulate(slots, x, outer * ext * inner);
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + ext) * inner];
                            let dst = &mut gx[o * ext * inner..(o + 1) * ext * inner];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    }
                    offset += ext;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.nodes[x.0].value.shape();
                let (outer, ext, inner) = axis_blocks(xs, *axis);
                let take = node.value.shape()[*axis];
                let gx = accumulate(slots, *x, outer * ext * inner);
                for o in 0..outer {
                    let base = o * ext * inner + start * inner;
                    let src = &g[o * take * inner..(o + 1) * take * inner];
                    gx[base..base + take * inner]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, s)| *d += s);
                }
            }
            Op::GatherRows(x, rows) => {
                let n = len(*x);
                let width = g.len() / rows.len().max(1);
                let gx = accumulate(slots, *x, n);
                for (k, &r) in rows.iter().enumerate() {
                    for c in 0..width {
                        gx[r * width + c] += g[k * width + c];
                    }
                }
            }
            Op::Sum { x, axis } | Op::Mean { x, axis } => {
                let xs = self.nodes[x.0].value.shape();
                let n = len(*x);
                let is_mean = matches!(node.op, Op::Mean { .. });
                let gx = accumulate(slots, *x, n);
                match axis {
                    None => {
                        let s = if is_mean { g[0] / n.max(1) as f64 } else { g[0] };
                        gx.iter_mut().for_each(|d| *d += s);
                    }
                    Some(a) => {
                        let (outer, ext, inner) = axis_blocks(xs, *a);
                        let f = if is_mean { 1.0 / ext as f64 } else { 1.0 };
                        for o in 0..outer {
                            for e in 0..ext {
                                for i in 0..inner {
                                    gx[(o * ext + e) * inner + i] += f * g[o * inner + i];
                                }
                            }
                        }
                    }
                }
            }
            Op::Tanh(x) => {
                let gx = accumulate(slots, *x, g.len());
                for i in 0..g.len() {
                    gx[i] += g[i] * (1.0 - val[i] * val[i]);
                }
            }
            Op::Sigmoid(x) => {
                let gx = accumulate(slots, *x, g.len());
                for i in 0..g.len() {
                    gx[i] += g[i] * val[i] * (1.0 - val[i]);
                }
            }
            Op::Relu(x) => {
                let xd = data(*x);
                let gx = accumulate(slots, *x, g.len());
                for i in 0..g.len() {
                    if xd[i] > 0.0 {
                        gx[i] += g[i];
                    }
                }
            }
            Op::Exp(x) => {
                let gx = accumulate(slots, *x, g.len());
                for i in 0..g.len() {
                    gx[i] += g[i] * val[i];
                }
            }
            Op::Log(x) => {
                let xd = data(*x);
                let gx = accumulate(slots, *x, g.len());
                for i in 0..g.len() {
                    gx[i] += g[i] / xd[i];
                }
            }
            Op::Abs(x) => {
                let xd = data(*x);
                let gx = accumulate(slots, *x, g.len());
                for i in 0..g.len() {
                    if xd[i] > 0.0 {
                        gx[i] += g[i];
                    } else if xd[i] < 0.0 {
                        gx[i] -= g[i];
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xd = data(*x);
                let gx = accumulate(slots, *x, g.len());
                for i in 0..g.len() {
                    if xd[i] > *lo && xd[i] < *hi {
                        gx[i] += g[i];
                    }
                }
            }
            Op::Softmax { x, axis } | Op::LogSoftmax { x, axis } => {
                let is_log = matches!(node.op, Op::LogSoftmax { .. });
                let (outer, ext, inner) = axis_blocks(node.value.shape(), *axis);
                let gx = accumulate(slots, *x, g.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |e: usize| (o * ext + e) * inner + i;
                        if is_log {
                            let gsum: f64 = (0..ext).map(|e| g[at(e)]).sum();
                            for e in 0..ext {
                                gx[at(e)] += g[at(e)] - val[at(e)].exp() * gsum;
                            }
                        } else {
                            let dot: f64 = (0..ext).map(|e| g[at(e)] * val[at(e)]).sum();
                            for e in 0..ext {
                                gx[at(e)] += val[at(e)] * (g[at(e)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, inv_std } => {
                let n = *node.value.shape().last().unwrap();
                let gx = accumulate(slots, *x, g.len());
                for (r, is) in inv_std.iter().enumerate() {
                    let gr = &g[r * n..(r + 1) * n];
                    let xh = &val[r * n..(r + 1) * n];
                    let mg = gr.iter().sum::<f64>() / n as f64;
                    let mgx = gr.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        gx[r * n + j] += is * (gr[j] - mg - xh[j] * mgx);
                    }
                }
            }
            Op::Im2Col(x, map) => {
                let gx = accumulate(slots, *x, len(*x));
                for (o, &src) in map.src.iter().enumerate() {
                    if src != usize::MAX {
                        gx[src] += g[o];
                    }
                }
            }
        }
    }
}

pub(crate) fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `c += a · b` with explicit (row, col) strides for `a` (`m×k`) and `b` (`k×n`);
/// `c` is dense row-major `m×n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: extents and strides describe in-bounds views of `a`, `b`, `c`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_and_broadcast_forward_values() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[5.0, 6.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[17.0, 39.0]);
        let r = tape.constant(t(&[2], &[10.0, 20.0]));
        let s = tape.add(a, r).unwrap();
        assert_eq!(tape.value(s).data(), &[11.0, 22.0, 13.0, 24.0]);
    }

    #[test]
    fn broadcast_gradient_sums_over_rows() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[3, 2]));
        let r = tape.leaf(Tensor::zeros(&[2]));
        let s = tape.add(a, r).unwrap();
        let l = tape.sum(s, None).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(r).unwrap(), &[3.0, 3.0]);
        assert_eq!(g.get(a).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let d = tape.detach(x);
        let y = tape.mul(x, d).unwrap();
        let l = tape.sum(y, None).unwrap();
        let g = tape.backward(l).unwrap();
        // d/dx of x·stop(x) is stop(x)
        assert_eq!(g.get(x).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_relu_keeps_nan() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, -1e3, 0.0, 1e3]));
        let s = tape.softmax(x, 1).unwrap();
        for r in 0..2 {
            let sum: f64 = tape.value(s).row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-15);
        }
        let n = tape.constant(t(&[1], &[f64::NAN]));
        let y = tape.relu(n);
        assert!(tape.value(y).data()[0].is_nan());
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape { op: "matmul", .. })));
        let c = tape.constant(Tensor::zeros(&[4]));
        assert!(tape.add(a, c).is_err());
        assert!(tape.slice(a, 1, 2, 2).is_err());
        assert!(matches!(tape.gather_rows(a, &[5]), Err(Error::Index { .. })));
        assert!(tape.backward(a).is_err());
    }

    #[test]
    fn im2col_places_padded_patches() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[1, 2, 2], |i| i as f64 + 1.0));
        let p = tape.im2col(x, 3, 2, 1).unwrap();
        assert_eq!(tape.shape(p), &[1, 9]);
        assert_eq!(tape.value(p).data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 3.0, 4.0]);
    }
}
