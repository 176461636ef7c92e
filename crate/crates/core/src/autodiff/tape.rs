use std::sync::atomic::{AtomicU32, Ordering};

use super::kernels::{self, ConvGeom};
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};
use crate::geometry::lie;

static NEXT_TAPE: AtomicU32 = AtomicU32::new(1);

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    id: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.id as usize
    }
}

/// Result of [`Tape::bilinear_sample`]: sampled values plus a per-point
/// validity mask (`1.0` inside the map, `0.0` outside).
#[derive(Debug)]
pub struct Sampled {
    pub values: Var,
    pub mask: Tensor,
}

/// Weights of a GRU cell. `w_x` is `[in, 3H]`, `w_h` is `[H, 3H]`, `b` is
/// `[3H]`; the three column blocks are (update, reset, candidate).
#[derive(Clone, Copy, Debug)]
pub struct GruWeights {
    pub w_x: Var,
    pub w_h: Var,
    pub b: Var,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Conv2d { input: Var, weight: Var, geom: ConvGeom },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Pow(Var, f64),
    Abs(Var),
    Softplus(Var),
    Sin(Var),
    Cos(Var),
    Clamp(Var, f64, f64),
    SumAll(Var),
    MeanAll(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    PickAxis { input: Var, picks: Vec<usize> },
    Broadcast(Var),
    Concat(Vec<Var>, usize),
    Slice { input: Var, axis: usize, start: usize },
    Reshape(Var),
    Gather { input: Var, rows: Vec<usize> },
    Bilinear { map: Var, coords: Var, taps: Vec<Option<kernels::BilinearTaps>> },
    Upsample2x(Var),
    Gru { h: Var, x: Var, w: GruWeights, gates: Vec<f64> },
    Se3Exp { input: Var, jac: Vec<f64> },
    Moments { views: Vec<Var>, masks: Vec<Vec<f64>> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Pow(..) => "pow",
            Op::Abs(..) => "abs",
            Op::Softplus(..) => "softplus",
            Op::Sin(..) => "sin",
            Op::Cos(..) => "cos",
            Op::Clamp(..) => "clamp",
            Op::SumAll(..) => "sum",
            Op::MeanAll(..) => "mean",
            Op::SumAxis(..) => "sum_axis",
            Op::MeanAxis(..) => "mean_axis",
            Op::PickAxis { .. } => "min_max_axis",
            Op::Broadcast(..) => "broadcast",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(..) => "reshape",
            Op::Gather { .. } => "gather",
            Op::Bilinear { .. } => "bilinear_sample",
            Op::Upsample2x(..) => "upsample2x",
            Op::Gru { .. } => "gru_cell",
            Op::Se3Exp { .. } => "se3_exp",
            Op::Moments { .. } => "masked_moments",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Linear record of primitive evaluations. Operations execute eagerly as they
/// are recorded; [`Tape::backward`] replays the record in reverse.
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, keyed by leaf variable.
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` did not influence the output.
    pub fn wrt(&self, v: Var) -> Tensor {
        assert_eq!(v.tape, self.tape, "variable from a different tape");
        match &self.grads[v.index()] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.index()]),
        }
    }

    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index()).and_then(|g| g.as_ref())
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: {a:?} vs {b:?}"))
}

/// Numpy-style broadcast of two shapes.
fn ew<'a>(g: &'a [f64], d: impl Fn(usize) -> f64 + 'a) -> impl FnMut(&mut [f64]) + 'a {
    move |s: &mut [f64]| {
        for (i, x) in s.iter_mut().enumerate() {
            *x += g[i] * d(i);
        }
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

/// For each output element of a broadcast, the flat index of its source.
/// Common broadcast layouts, checked before falling back to an index table.
enum BroadcastKind {
    /// Source is the trailing block of the destination, repeated.
    Tile(usize),
    /// Each source element is repeated over a contiguous run.
    Repeat(usize),
    General(Vec<usize>),
}

fn broadcast_kind(src: &[usize], dst: &[usize]) -> BroadcastKind {
    let n = numel(src);
    let off = dst.len() - src.len();
    let padded: Vec<usize> = std::iter::repeat_n(1, off).chain(src.iter().copied()).collect();
    let lead = padded.iter().take_while(|&&d| d == 1).count();
    if padded[lead..] == dst[lead..] {
        return BroadcastKind::Tile(n.max(1));
    }
    let trail = padded.iter().rev().take_while(|&&d| d == 1).count();
    let keep = dst.len() - trail;
    if padded[..keep] == dst[..keep] {
        return BroadcastKind::Repeat(numel(&dst[keep..]));
    }
    BroadcastKind::General(broadcast_index(src, dst))
}

fn broadcast_gather(src: &[usize], dst: &[usize], sv: &[f64]) -> Vec<f64> {
    match broadcast_kind(src, dst) {
        BroadcastKind::Tile(_) => sv.iter().copied().cycle().take(numel(dst)).collect(),
        BroadcastKind::Repeat(r) => sv.iter().flat_map(|&v| std::iter::repeat_n(v, r)).collect(),
        BroadcastKind::General(idx) => idx.iter().map(|&i| sv[i]).collect(),
    }
}

fn broadcast_scatter(src: &[usize], dst: &[usize], g: &[f64], d: &mut [f64]) {
    match broadcast_kind(src, dst) {
        BroadcastKind::Tile(n) => {
            for chunk in g.chunks_exact(n) {
                for (x, &y) in d.iter_mut().zip(chunk) {
                    *x += y;
                }
            }
        }
        BroadcastKind::Repeat(r) => {
            for (x, chunk) in d.iter_mut().zip(g.chunks_exact(r)) {
                *x += chunk.iter().sum::<f64>();
            }
        }
        BroadcastKind::General(idx) => {
            for (k, &i) in idx.iter().enumerate() {
                d[i] += g[k];
            }
        }
    }
}

fn broadcast_index(src: &[usize], dst: &[usize]) -> Vec<usize> {
    let nd = dst.len();
    let off = nd - src.len();
    let mut strides = vec![0usize; nd];
    let mut s = 1;
    for i in (0..src.len()).rev() {
        strides[i + off] = if src[i] == 1 { 0 } else { s };
        s *= src[i];
    }
    let total = numel(dst);
    let mut idx = Vec::with_capacity(total);
    let mut counter = vec![0usize; nd];
    let mut cur = 0usize;
    for _ in 0..total {
        idx.push(cur);
        for d in (0..nd).rev() {
            counter[d] += 1;
            cur += strides[d];
            if counter[d] < dst[d] {
                break;
            }
            cur -= strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    idx
}

/// (outer, axis length, inner) decomposition around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let id = self.nodes.len() as u32;
        self.nodes.push(Node { value, op, needs_grad });
        Var { tape: self.id, id }
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index() >= self.nodes.len() {
            return Err(Error::State(format!("variable {} was not recorded on this tape", v.id)));
        }
        Ok(())
    }

    fn node(&self, v: Var) -> &Node {
        debug_assert_eq!(v.tape, self.id);
        &self.nodes[v.index()]
    }

    fn ng(&self, v: Var) -> bool {
        self.node(v).needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    /// Leaf whose differentiability follows [`Tensor::requires_grad`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let g = t.requires_grad();
        self.push(t, Op::Leaf, g)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t.with_grad(), Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    // ---- elementwise binary -------------------------------------------------

    fn coerce(&mut self, op: &str, a: Var, b: Var) -> Result<(Var, Var)> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa == sb {
            return Ok((a, b));
        }
        let out = broadcast_shape(&sa, &sb).ok_or_else(|| shape_err(op, &sa, &sb))?;
        let a = if sa == out { a } else { self.broadcast_to(a, &out)? };
        let b = if sb == out { b } else { self.broadcast_to(b, &out)? };
        Ok((a, b))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(va.shape().to_vec(), data)
    }

    /// Elementwise sum; broadcasts when shapes differ.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.coerce("add", a, b)?;
        let v = self.binary(a, b, |x, y| x + y);
        let g = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.coerce("sub", a, b)?;
        let v = self.binary(a, b, |x, y| x - y);
        let g = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Sub(a, b), g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.coerce("mul", a, b)?;
        let v = self.binary(a, b, |x, y| x * y);
        let g = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Mul(a, b), g))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.coerce("div", a, b)?;
        let v = self.binary(a, b, |x, y| x / y);
        let g = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Div(a, b), g))
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a).map(|x| x * c);
        let g = self.ng(a);
        Ok(self.push(v, Op::Scale(a, c), g))
    }

    /// Add a constant.
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a).map(|x| x + c);
        let g = self.ng(a);
        Ok(self.push(v, Op::AddScalar(a), g))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    // ---- linear algebra ----------------------------------------------------

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let g = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), g))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::Shape(format!("transpose: expected a matrix, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let g = self.ng(a);
        Ok(self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(a), g))
    }

    /// 2-D convolution, NHWC input `[n,h,w,ci]`, weight `[kh,kw,ci,co]`,
    /// zero padding.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, pad: usize) -> Result<Var> {
        self.check(input)?;
        self.check(weight)?;
        let (si, sw) = (self.shape(input), self.shape(weight));
        if si.len() != 4 || sw.len() != 4 || si[3] != sw[2] {
            return Err(shape_err("conv2d", si, sw));
        }
        if !(1..=2).contains(&stride) {
            return Err(Error::Shape(format!("conv2d: stride {stride} not in 1..=2")));
        }
        let (n, h, w, ci) = (si[0], si[1], si[2], si[3]);
        let (kh, kw, co) = (sw[0], sw[1], sw[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(shape_err("conv2d", si, sw));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let geom = ConvGeom { n, h, w, ci, kh, kw, co, stride, pad, oh, ow };
        let mut out = vec![0.0; n * oh * ow * co];
        kernels::conv2d_forward(&geom, self.value(input).data(), self.value(weight).data(), &mut out);
        let g = self.ng(input) || self.ng(weight);
        Ok(self.push(Tensor::from_parts(vec![n, oh, ow, co], out), Op::Conv2d { input, weight, geom }, g))
    }

    // ---- elementwise unary -------------------------------------------------

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a).map(f);
        let g = self.ng(a);
        Ok(self.push(v, op, g))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Log(a), f64::ln)
    }

    /// `x^p`. The derivative at `x = 0` with `p < 1` is taken as zero.
    pub fn pow(&mut self, a: Var, p: f64) -> Result<Var> {
        self.unary(a, Op::Pow(a, p), move |x| x.powf(p))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.pow(a, 0.5)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Softplus(a), |x| x.max(0.0) + (-x.abs()).exp().ln_1p())
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sin(a), f64::sin)
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Cos(a), f64::cos)
    }

    /// Clamp into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(a, Op::Clamp(a, lo, hi), move |x| x.clamp(lo, hi))
    }

    // ---- reductions ----------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = Tensor::scalar(self.value(a).sum());
        let g = self.ng(a);
        Ok(self.push(v, Op::SumAll(a), g))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(Error::Shape("mean: empty tensor".into()));
        }
        let v = Tensor::scalar(t.sum() / t.numel() as f64);
        let g = self.ng(a);
        Ok(self.push(v, Op::MeanAll(a), g))
    }

    fn axis_check(&self, op: &str, a: Var, axis: usize) -> Result<()> {
        self.check(a)?;
        let s = self.shape(a);
        if axis >= s.len() || s[axis] == 0 {
            return Err(Error::Shape(format!("{op}: axis {axis} invalid for {s:?}")));
        }
        Ok(())
    }

    fn reduced_shape(&self, a: Var, axis: usize) -> Vec<usize> {
        let mut s = self.shape(a).to_vec();
        s.remove(axis);
        s
    }

    /// Sum over one axis (the axis is removed).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.axis_check("sum_axis", a, axis)?;
        let (outer, len, inner) = split_axis(self.shape(a), axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let shape = self.reduced_shape(a, axis);
        let g = self.ng(a);
        Ok(self.push(Tensor::from_parts(shape, out), Op::SumAxis(a, axis), g))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.sum_axis(a, axis)?;
        let len = self.shape(a)[axis] as f64;
        let node = &mut self.nodes[s.index()];
        for x in node.value.data_mut() {
            *x /= len;
        }
        node.op = Op::MeanAxis(a, axis);
        Ok(s)
    }

    fn pick_axis(&mut self, a: Var, axis: usize, take_max: bool) -> Result<Var> {
        self.axis_check(if take_max { "max_axis" } else { "min_axis" }, a, axis)?;
        let (outer, len, inner) = split_axis(self.shape(a), axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        let mut picks = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = o * len * inner + i;
                for l in 1..len {
                    let idx = (o * len + l) * inner + i;
                    let better = if take_max { src[idx] > src[best] } else { src[idx] < src[best] };
                    if better {
                        best = idx;
                    }
                }
                out[o * inner + i] = src[best];
                picks[o * inner + i] = best;
            }
        }
        let shape = self.reduced_shape(a, axis);
        let g = self.ng(a);
        Ok(self.push(Tensor::from_parts(shape, out), Op::PickAxis { input: a, picks }, g))
    }

    /// Maximum over one axis; the gradient flows to the first maximizer.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.pick_axis(a, axis, true)
    }

    /// Minimum over one axis; the gradient flows to the first minimizer.
    pub fn min_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.pick_axis(a, axis, false)
    }

    // ---- shape manipulation -----------------------------------------------

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        let src = self.shape(a).to_vec();
        match broadcast_shape(&src, shape) {
            Some(s) if s == shape => {}
            _ => return Err(shape_err("broadcast", &src, shape)),
        }
        let data = broadcast_gather(&src, shape, self.value(a).data());
        let g = self.ng(a);
        Ok(self.push(Tensor::from_parts(shape.to_vec(), data), Op::Broadcast(a), g))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Shape("concat: no inputs".into()))?;
        for &p in parts {
            self.check(p)?;
        }
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::Shape(format!("concat: axis {axis} invalid for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(shape_err("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let chunk = len * inner;
                out.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let g = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat(parts.to_vec(), axis), g))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.check(a)?;
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start > end || end > s[axis] {
            return Err(Error::Shape(format!("slice: {start}..{end} on axis {axis} of {s:?}")));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let src = self.value(a).data();
        let width = (end - start) * inner;
        let mut out = Vec::with_capacity(outer * width);
        for o in 0..outer {
            let b = (o * len + start) * inner;
            out.extend_from_slice(&src[b..b + width]);
        }
        let mut shape = s;
        shape[axis] = end - start;
        let g = self.ng(a);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Slice { input: a, axis, start }, g))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a).reshape(shape)?;
        let g = self.ng(a);
        Ok(self.push(v, Op::Reshape(a), g))
    }

    /// Selects rows (entries of the leading axis), repeats allowed.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        self.check(a)?;
        let s = self.shape(a).to_vec();
        if s.is_empty() {
            return Err(Error::Shape("gather_rows: scalar input".into()));
        }
        let width = numel(&s[1..]);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            if r >= s[0] {
                return Err(Error::Shape(format!("gather_rows: row {r} out of range for {s:?}")));
            }
            out.extend_from_slice(&src[r * width..(r + 1) * width]);
        }
        let mut shape = s;
        shape[0] = rows.len();
        let g = self.ng(a);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Gather { input: a, rows: rows.to_vec() }, g))
    }

    // ---- sampling --------------------------------------------------------------

    /// Bilinear interpolation of `map` (`[h,w,c]`) at continuous pixel
    /// coordinates `coords` (`[n,2]`, `(x,y)` with texel centres on integers).
    /// Points outside the texel grid produce zeros and a zero mask entry.
    pub fn bilinear_sample(&mut self, map: Var, coords: Var) -> Result<Sampled> {
        self.check(map)?;
        self.check(coords)?;
        let (sm, sc) = (self.shape(map), self.shape(coords));
        if sm.len() != 3 || sc.len() != 2 || sc[1] != 2 {
            return Err(shape_err("bilinear_sample", sm, sc));
        }
        let (h, w, c) = (sm[0], sm[1], sm[2]);
        if h < 2 || w < 2 {
            return Err(Error::Shape(format!("bilinear_sample: map {sm:?} needs H,W >= 2")));
        }
        let n = sc[0];
        let cd = self.value(coords).data();
        if let Some(bad) = cd.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "bilinear_sample", index: bad / 2 });
        }
        let md = self.value(map).data();
        let mut out = vec![0.0; n * c];
        let mut mask = vec![0.0; n];
        let mut taps = Vec::with_capacity(n);
        for p in 0..n {
            let t = kernels::bilinear_taps(cd[2 * p], cd[2 * p + 1], h, w);
            if let Some(t) = t {
                mask[p] = 1.0;
                let o = &mut out[p * c..(p + 1) * c];
                let b00 = (t.y0 * w + t.x0) * c;
                let b01 = b00 + c;
                let b10 = b00 + w * c;
                let b11 = b10 + c;
                let (w00, w01) = ((1.0 - t.fx) * (1.0 - t.fy), t.fx * (1.0 - t.fy));
                let (w10, w11) = ((1.0 - t.fx) * t.fy, t.fx * t.fy);
                for k in 0..c {
                    o[k] = w00 * md[b00 + k] + w01 * md[b01 + k] + w10 * md[b10 + k] + w11 * md[b11 + k];
                }
            }
            taps.push(t);
        }
        let g = self.ng(map) || self.ng(coords);
        let values = self.push(Tensor::from_parts(vec![n, c], out), Op::Bilinear { map, coords, taps }, g);
        Ok(Sampled { values, mask: Tensor::from_parts(vec![n, 1], mask) })
    }

    /// Aligned 2x upsampling of an NHWC map: even output texels copy the
    /// input texel below them, odd ones average two neighbours.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(Error::Shape(format!("upsample2x: expected NHWC, got {s:?}")));
        }
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let src = self.value(a).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * oh * ow * c];
        for b in 0..n {
            for oy in 0..oh {
                let ty = kernels::upsample_taps(oy, h);
                for ox in 0..ow {
                    let tx = kernels::upsample_taps(ox, w);
                    let ob = ((b * oh + oy) * ow + ox) * c;
                    for &(iy, wy) in &ty {
                        for &(ix, wx) in &tx {
                            let wt = wy * wx;
                            if wt == 0.0 {
                                continue;
                            }
                            let ib = ((b * h + iy) * w + ix) * c;
                            for k in 0..c {
                                out[ob + k] += wt * src[ib + k];
                            }
                        }
                    }
                }
            }
        }
        let g = self.ng(a);
        Ok(self.push(Tensor::from_parts(vec![n, oh, ow, c], out), Op::Upsample2x(a), g))
    }

    // ---- fused blocks ----------------------------------------------------------

    /// Batched GRU cell: `h' = (1-z)*h + z*n`, `z = sigmoid(x Wxz + h Whz + bz)`,
    /// `r = sigmoid(x Wxr + h Whr + br)`, `n = tanh(x Wxn + (r*h) Whn + bn)`.
    pub fn gru_cell(&mut self, h: Var, x: Var, w: GruWeights) -> Result<Var> {
        for v in [h, x, w.w_x, w.w_h, w.b] {
            self.check(v)?;
        }
        let (sh, sx) = (self.shape(h).to_vec(), self.shape(x).to_vec());
        let (swx, swh, sb) = (self.shape(w.w_x).to_vec(), self.shape(w.w_h).to_vec(), self.shape(w.b).to_vec());
        if sh.len() != 2 || sx.len() != 2 || sh[0] != sx[0] {
            return Err(shape_err("gru_cell (hidden vs input)", &sh, &sx));
        }
        let (batch, hid, inp) = (sh[0], sh[1], sx[1]);
        if swx != [inp, 3 * hid] {
            return Err(shape_err("gru_cell (input weights)", &swx, &[inp, 3 * hid]));
        }
        if swh != [hid, 3 * hid] {
            return Err(shape_err("gru_cell (hidden weights)", &swh, &[hid, 3 * hid]));
        }
        if sb != [3 * hid] {
            return Err(shape_err("gru_cell (bias)", &sb, &[3 * hid]));
        }
        let h3 = 3 * hid;
        let hv = self.value(h).data();
        let mut ax = vec![0.0; batch * h3];
        kernels::matmul_acc(self.value(x).data(), self.value(w.w_x).data(), &mut ax, batch, inp, h3);
        let bv = self.value(w.b).data();
        let whv = self.value(w.w_h).data();
        // hidden projections for the z and r blocks
        let mut ah = vec![0.0; batch * h3];
        kernels::matmul_acc(hv, whv, &mut ah, batch, hid, h3);
        let mut gates = vec![0.0; batch * h3];
        let mut rh = vec![0.0; batch * hid];
        for bi in 0..batch {
            for j in 0..hid {
                let z = sigmoid(ax[bi * h3 + j] + ah[bi * h3 + j] + bv[j]);
                let r = sigmoid(ax[bi * h3 + hid + j] + ah[bi * h3 + hid + j] + bv[hid + j]);
                gates[bi * h3 + j] = z;
                gates[bi * h3 + hid + j] = r;
                rh[bi * hid + j] = r * hv[bi * hid + j];
            }
        }
        let mut cn = vec![0.0; batch * hid];
        for bi in 0..batch {
            for p in 0..hid {
                let a = rh[bi * hid + p];
                if a == 0.0 {
                    continue;
                }
                for j in 0..hid {
                    cn[bi * hid + j] += a * whv[p * h3 + 2 * hid + j];
                }
            }
        }
        let mut out = vec![0.0; batch * hid];
        for bi in 0..batch {
            for j in 0..hid {
                let n = (ax[bi * h3 + 2 * hid + j] + cn[bi * hid + j] + bv[2 * hid + j]).tanh();
                gates[bi * h3 + 2 * hid + j] = n;
                let z = gates[bi * h3 + j];
                out[bi * hid + j] = (1.0 - z) * hv[bi * hid + j] + z * n;
            }
        }
        let g = [h, x, w.w_x, w.w_h, w.b].iter().any(|&v| self.ng(v));
        Ok(self.push(Tensor::from_parts(vec![batch, hid], out), Op::Gru { h, x, w, gates }, g))
    }

    /// Row-wise SE(3) exponential: `[b,6]` twists (rotation first) to `[b,12]`
    /// transforms stored as a row-major rotation followed by the translation.
    pub fn se3_exp(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.shape(a);
        if s.len() != 2 || s[1] != 6 {
            return Err(Error::Shape(format!("se3_exp: expected [b,6], got {s:?}")));
        }
        let b = s[0];
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(b * 12);
        let mut jac = Vec::with_capacity(b * 72);
        for r in 0..b {
            let xi: [f64; 6] = src[6 * r..6 * r + 6].try_into().unwrap();
            let (m, j) = lie::exp_with_jacobian(&xi);
            out.extend_from_slice(&m);
            for row in j.iter() {
                jac.extend_from_slice(row);
            }
        }
        let g = self.ng(a);
        Ok(self.push(Tensor::from_parts(vec![b, 12], out), Op::Se3Exp { input: a, jac }, g))
    }

    /// Masked per-channel mean and variance across views. Each view is
    /// `[n,c]` with a `[n]` 0/1 mask; the output is `[n,2c]` holding
    /// `[mean | variance]` over the valid views (zeros where none is valid).
    /// Sums are taken over sorted values, so the result does not depend on
    /// view order.
    pub fn masked_moments(&mut self, views: &[Var], masks: &[Vec<f64>]) -> Result<Var> {
        let first = *views.first().ok_or_else(|| Error::Shape("masked_moments: no views".into()))?;
        if views.len() != masks.len() {
            return Err(Error::Shape(format!(
                "masked_moments: {} views but {} masks",
                views.len(),
                masks.len()
            )));
        }
        for &v in views {
            self.check(v)?;
        }
        let s = self.shape(first).to_vec();
        if s.len() != 2 {
            return Err(Error::Shape(format!("masked_moments: expected [n,c], got {s:?}")));
        }
        let (n, c) = (s[0], s[1]);
        for (&v, m) in views.iter().zip(masks) {
            if self.shape(v) != s.as_slice() || m.len() != n {
                return Err(shape_err("masked_moments", &s, self.shape(v)));
            }
        }
        let mut out = vec![0.0; n * 2 * c];
        let mut buf = Vec::with_capacity(views.len());
        for p in 0..n {
            let cnt: f64 = masks.iter().map(|m| m[p]).sum();
            if cnt == 0.0 {
                continue;
            }
            for k in 0..c {
                buf.clear();
                for (&v, m) in views.iter().zip(masks) {
                    if m[p] != 0.0 {
                        buf.push(self.value(v).data()[p * c + k]);
                    }
                }
                kernels::sort_small(&mut buf);
                let mean = buf.iter().sum::<f64>() / cnt;
                for x in buf.iter_mut() {
                    *x = (*x - mean) * (*x - mean);
                }
                kernels::sort_small(&mut buf);
                out[p * 2 * c + k] = mean;
                out[p * 2 * c + c + k] = buf.iter().sum::<f64>() / cnt;
            }
        }
        let g = views.iter().any(|&v| self.ng(v));
        let op = Op::Moments { views: views.to_vec(), masks: masks.to_vec() };
        Ok(self.push(Tensor::from_parts(vec![n, 2 * c], out), op, g))
    }

    // ---- backward ------------------------------------------------------------

    /// Reverse sweep from `out`. A scalar output may omit `seed` (taken as 1).
    pub fn backward(&self, out: Var, seed: Option<&Tensor>) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::State("backward called before any forward evaluation".into()));
        }
        self.check(out)?;
        let oshape = self.shape(out);
        let seed = match seed {
            Some(s) if s.shape() == oshape => s.data().to_vec(),
            Some(s) => return Err(shape_err("backward seed", s.shape(), oshape)),
            None if self.value(out).numel() == 1 => vec![1.0],
            None => return Err(Error::State(format!("backward from non-scalar {oshape:?} needs a seed"))),
        };
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.index()] = Some(seed);
        for i in (0..=out.index()).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match (g, &n.op) {
                (Some(g), Op::Leaf) if n.needs_grad => Some(Tensor::from_parts(n.value.shape().to_vec(), g)),
                _ => None,
            })
            .collect();
        Ok(Gradients { tape: self.id, grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.ng(v) {
                return;
            }
            let slot = grads[v.index()].get_or_insert_with(|| vec![0.0; self.value(v).numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                acc(a, &mut ew(g, |_| 1.0));
                acc(b, &mut ew(g, |_| 1.0));
            }
            &Op::Sub(a, b) => {
                acc(a, &mut ew(g, |_| 1.0));
                acc(b, &mut ew(g, |_| -1.0));
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                acc(a, &mut ew(g, |i| vb[i]));
                acc(b, &mut ew(g, |i| va[i]));
            }
            &Op::Div(a, b) => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                acc(a, &mut ew(g, |i| 1.0 / vb[i]));
                acc(b, &mut ew(g, |i| -va[i] / (vb[i] * vb[i])));
            }
            &Op::Scale(a, c) => acc(a, &mut ew(g, |_| c)),
            &Op::AddScalar(a) => acc(a, &mut ew(g, |_| 1.0)),
            &Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                acc(a, &mut |s| kernels::matmul_grad_a(g, vb, s, m, k, n));
                acc(b, &mut |s| kernels::matmul_grad_b(va, g, s, m, k, n));
            }
            &Op::Transpose(a) => {
                let s = self.shape(a);
                let (r, c) = (s[0], s[1]);
                acc(a, &mut |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            &Op::Conv2d { input, weight, geom } => {
                let (vi, vw) = (self.value(input).data(), self.value(weight).data());
                if self.ng(input) {
                    acc(input, &mut |d| kernels::conv2d_backward(&geom, vi, vw, g, Some(d), None));
                }
                if self.ng(weight) {
                    acc(weight, &mut |d| kernels::conv2d_backward(&geom, vi, vw, g, None, Some(d)));
                }
            }
            &Op::Relu(a) => {
                let va = self.value(a).data();
                acc(a, &mut ew(g, |i| if va[i] > 0.0 { 1.0 } else { 0.0 }));
            }
            &Op::Sigmoid(a) => acc(a, &mut ew(g, |i| out[i] * (1.0 - out[i]))),
            &Op::Tanh(a) => acc(a, &mut ew(g, |i| 1.0 - out[i] * out[i])),
            &Op::Exp(a) => acc(a, &mut ew(g, |i| out[i])),
            &Op::Log(a) => {
                let va = self.value(a).data();
                acc(a, &mut ew(g, |i| 1.0 / va[i]));
            }
            &Op::Pow(a, p) => {
                let va = self.value(a).data();
                acc(
                    a,
                    &mut ew(g, |i| {
                        if va[i] == 0.0 && p < 1.0 {
                            0.0
                        } else {
                            p * va[i].powf(p - 1.0)
                        }
                    }),
                );
            }
            &Op::Abs(a) => {
                let va = self.value(a).data();
                acc(a, &mut ew(g, |i| if va[i] > 0.0 { 1.0 } else if va[i] < 0.0 { -1.0 } else { 0.0 }));
            }
            &Op::Softplus(a) => {
                let va = self.value(a).data();
                acc(a, &mut ew(g, |i| sigmoid(va[i])));
            }
            &Op::Sin(a) => {
                let va = self.value(a).data();
                acc(a, &mut ew(g, |i| va[i].cos()));
            }
            &Op::Cos(a) => {
                let va = self.value(a).data();
                acc(a, &mut ew(g, |i| -va[i].sin()));
            }
            &Op::Clamp(a, lo, hi) => {
                let va = self.value(a).data();
                acc(a, &mut ew(g, |i| if va[i] >= lo && va[i] <= hi { 1.0 } else { 0.0 }));
            }
            &Op::SumAll(a) => acc(a, &mut |d| d.iter_mut().for_each(|x| *x += g[0])),
            &Op::MeanAll(a) => {
                let n = self.value(a).numel() as f64;
                acc(a, &mut |d| d.iter_mut().for_each(|x| *x += g[0] / n));
            }
            &Op::SumAxis(a, axis) | &Op::MeanAxis(a, axis) => {
                let (outer, len, inner) = split_axis(self.shape(a), axis);
                let scale = if matches!(node.op, Op::MeanAxis(..)) { 1.0 / len as f64 } else { 1.0 };
                acc(a, &mut |d| {
                    for o in 0..outer {
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            for i in 0..inner {
                                d[base + i] += g[o * inner + i] * scale;
                            }
                        }
                    }
                });
            }
            Op::PickAxis { input, picks, .. } => {
                acc(*input, &mut |d| {
                    for (k, &p) in picks.iter().enumerate() {
                        d[p] += g[k];
                    }
                });
            }
            &Op::Broadcast(a) => {
                acc(a, &mut |d| broadcast_scatter(self.shape(a), node.value.shape(), g, d));
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    acc(p, &mut |d| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            for i in 0..len * inner {
                                d[dst + i] += g[src + i];
                            }
                        }
                    });
                    offset += len;
                }
            }
            &Op::Slice { input, axis, start } => {
                let (outer, len, inner) = split_axis(self.shape(input), axis);
                let width = node.value.shape()[axis] * inner;
                acc(input, &mut |d| {
                    for o in 0..outer {
                        let b = (o * len + start) * inner;
                        for i in 0..width {
                            d[b + i] += g[o * width + i];
                        }
                    }
                });
            }
            &Op::Reshape(a) => acc(a, &mut ew(g, |_| 1.0)),
            Op::Gather { input, rows } => {
                let width = node.value.numel() / rows.len().max(1);
                acc(*input, &mut |d| {
                    for (k, &r) in rows.iter().enumerate() {
                        for i in 0..width {
                            d[r * width + i] += g[k * width + i];
                        }
                    }
                });
            }
            Op::Bilinear { map, coords, taps } => self.bilinear_backward(*map, *coords, taps, g, &mut acc),
            &Op::Upsample2x(a) => {
                let s = self.shape(a);
                let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
                let (oh, ow) = (2 * h, 2 * w);
                acc(a, &mut |d| {
                    for b in 0..n {
                        for oy in 0..oh {
                            let ty = kernels::upsample_taps(oy, h);
                            for ox in 0..ow {
                                let tx = kernels::upsample_taps(ox, w);
                                let ob = ((b * oh + oy) * ow + ox) * c;
                                for &(iy, wy) in &ty {
                                    for &(ix, wx) in &tx {
                                        let wt = wy * wx;
                                        if wt == 0.0 {
                                            continue;
                                        }
                                        let ib = ((b * h + iy) * w + ix) * c;
                                        for k in 0..c {
                                            d[ib + k] += wt * g[ob + k];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Gru { h, x, w, gates } => self.gru_backward(*h, *x, *w, gates, g, &mut acc),
            Op::Se3Exp { input, jac } => {
                let b = self.shape(*input)[0];
                acc(*input, &mut |d| {
                    for r in 0..b {
                        for o in 0..12 {
                            let go = g[r * 12 + o];
                            if go == 0.0 {
                                continue;
                            }
                            for k in 0..6 {
                                d[r * 6 + k] += go * jac[r * 72 + o * 6 + k];
                            }
                        }
                    }
                });
            }
            Op::Moments { views, masks } => {
                let s = self.shape(views[0]);
                let (n, c) = (s[0], s[1]);
                let moments = node.value.data();
                for (&v, m) in views.iter().zip(masks) {
                    let vd = self.value(v).data();
                    acc(v, &mut |d| {
                        for p in 0..n {
                            if m[p] == 0.0 {
                                continue;
                            }
                            let cnt: f64 = masks.iter().map(|mm| mm[p]).sum();
                            for k in 0..c {
                                let mean = moments[p * 2 * c + k];
                                let gm = g[p * 2 * c + k];
                                let gv = g[p * 2 * c + c + k];
                                d[p * c + k] += (gm + 2.0 * gv * (vd[p * c + k] - mean)) / cnt;
                            }
                        }
                    });
                }
            }
        }
    }

    fn bilinear_backward(
        &self,
        map: Var,
        coords: Var,
        taps: &[Option<kernels::BilinearTaps>],
        g: &[f64],
        acc: &mut impl FnMut(Var, &mut dyn FnMut(&mut [f64])),
    ) {
        let s = self.shape(map);
        let (w, c) = (s[1], s[2]);
        let md = self.value(map).data();
        acc(map, &mut |d| {
            for (p, t) in taps.iter().enumerate() {
                let Some(t) = t else { continue };
                let b00 = (t.y0 * w + t.x0) * c;
                let (b01, b10) = (b00 + c, b00 + w * c);
                let b11 = b10 + c;
                let (w00, w01) = ((1.0 - t.fx) * (1.0 - t.fy), t.fx * (1.0 - t.fy));
                let (w10, w11) = ((1.0 - t.fx) * t.fy, t.fx * t.fy);
                for k in 0..c {
                    let gk = g[p * c + k];
                    d[b00 + k] += w00 * gk;
                    d[b01 + k] += w01 * gk;
                    d[b10 + k] += w10 * gk;
                    d[b11 + k] += w11 * gk;
                }
            }
        });
        acc(coords, &mut |d| {
            for (p, t) in taps.iter().enumerate() {
                let Some(t) = t else { continue };
                let b00 = (t.y0 * w + t.x0) * c;
                let (b01, b10) = (b00 + c, b00 + w * c);
                let b11 = b10 + c;
                let (mut gx, mut gy) = (0.0, 0.0);
                for k in 0..c {
                    let gk = g[p * c + k];
                    let (v00, v01, v10, v11) = (md[b00 + k], md[b01 + k], md[b10 + k], md[b11 + k]);
                    gx += gk * ((1.0 - t.fy) * (v01 - v00) + t.fy * (v11 - v10));
                    gy += gk * ((1.0 - t.fx) * (v10 - v00) + t.fx * (v11 - v01));
                }
                d[2 * p] += gx;
                d[2 * p + 1] += gy;
            }
        });
    }

    #[allow(clippy::too_many_arguments)]
    fn gru_backward(
        &self,
        h: Var,
        x: Var,
        w: GruWeights,
        gates: &[f64],
        g: &[f64],
        acc: &mut impl FnMut(Var, &mut dyn FnMut(&mut [f64])),
    ) {
        let (batch, hid) = (self.shape(h)[0], self.shape(h)[1]);
        let inp = self.shape(x)[1];
        let h3 = 3 * hid;
        let hv = self.value(h).data();
        let xv = self.value(x).data();
        let wxv = self.value(w.w_x).data();
        let whv = self.value(w.w_h).data();
        // d(pre-activation) for the three blocks
        let mut dpre = vec![0.0; batch * h3];
        let mut dh = vec![0.0; batch * hid];
        let mut rh = vec![0.0; batch * hid];
        let mut dpre_n_only = vec![0.0; batch * hid];
        for bi in 0..batch {
            for j in 0..hid {
                let z = gates[bi * h3 + j];
                let r = gates[bi * h3 + hid + j];
                let n = gates[bi * h3 + 2 * hid + j];
                let gj = g[bi * hid + j];
                let hj = hv[bi * hid + j];
                dh[bi * hid + j] += gj * (1.0 - z);
                dpre[bi * h3 + j] = gj * (n - hj) * z * (1.0 - z);
                let dn = gj * z * (1.0 - n * n);
                dpre[bi * h3 + 2 * hid + j] = dn;
                dpre_n_only[bi * hid + j] = dn;
                rh[bi * hid + j] = r * hj;
            }
        }
        // candidate path through (r*h) W_hn
        for bi in 0..batch {
            for p in 0..hid {
                let mut d_rh = 0.0;
                for j in 0..hid {
                    d_rh += dpre_n_only[bi * hid + j] * whv[p * h3 + 2 * hid + j];
                }
                let r = gates[bi * h3 + hid + p];
                dh[bi * hid + p] += d_rh * r;
                dpre[bi * h3 + hid + p] = d_rh * hv[bi * hid + p] * r * (1.0 - r);
            }
        }
        // z and r blocks of W_h feed back into h
        for bi in 0..batch {
            for p in 0..hid {
                let mut s = 0.0;
                for j in 0..2 * hid {
                    s += dpre[bi * h3 + j] * whv[p * h3 + j];
                }
                dh[bi * hid + p] += s;
            }
        }
        acc(h, &mut |d| d.iter_mut().zip(&dh).for_each(|(a, b)| *a += b));
        acc(x, &mut |d| kernels::matmul_grad_a(&dpre, wxv, d, batch, inp, h3));
        acc(w.w_x, &mut |d| kernels::matmul_grad_b(xv, &dpre, d, batch, inp, h3));
        acc(w.w_h, &mut |d| {
            for bi in 0..batch {
                for p in 0..hid {
                    let (hp, rp) = (hv[bi * hid + p], rh[bi * hid + p]);
                    for j in 0..2 * hid {
                        d[p * h3 + j] += hp * dpre[bi * h3 + j];
                    }
                    for j in 0..hid {
                        d[p * h3 + 2 * hid + j] += rp * dpre[bi * h3 + 2 * hid + j];
                    }
                }
            }
        });
        acc(w.b, &mut |d| {
            for bi in 0..batch {
                for j in 0..h3 {
                    d[j] += dpre[bi * h3 + j];
                }
            }
        });
    }

    /// Name of the primitive that produced `v` (diagnostics only).
    pub fn op_name(&self, v: Var) -> &'static str {
        self.node(v).op.name()
    }
}
