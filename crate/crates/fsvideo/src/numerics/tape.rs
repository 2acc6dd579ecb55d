//! Reverse-mode autodiff tape.
//!
//! Operations are recorded eagerly: each call computes its value, checks it
//! for NaN/Inf (any non-finite result is an error naming the op), and pushes
//! a node. `backward` replays the tape in reverse, accumulating exact
//! gradients into every node that transitively depends on a `param` leaf.
//!
//! Values are immutable after creation; gradient accumulation is confined to
//! a single backward pass, so independent tapes may run on independent
//! threads.

use crate::error::{Error, Result};
use crate::numerics::kernels::{self, ConvDims, ConvMode};
use crate::numerics::tensor::{numel_of, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Value(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Value, Value),
    Sub(Value, Value),
    Mul(Value, Value),
    Div(Value, Value),
    Neg(Value),
    Scale(Value, f64),
    AddScalar(Value),
    Relu(Value),
    ClampMin(Value, f64),
    Abs(Value),
    Sqrt(Value),
    Exp(Value),
    Ln(Value),
    Silu(Value),
    SumAll(Value),
    MeanAll(Value),
    SumAxis(Value, usize),
    MeanAxis(Value, usize),
    Softmax(Value, usize),
    Matmul(Value, Value),
    Bmm(Value, Value),
    Reshape(Value),
    Permute(Value, Vec<usize>),
    Slice {
        x: Value,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<Value>,
        axis: usize,
    },
    Conv3d {
        x: Value,
        w: Value,
        b: Value,
        mode: ConvMode,
    },
    InterpSpatial {
        x: Value,
        th: usize,
        tw: usize,
    },
    AvgPoolT {
        x: Value,
        kernel: usize,
        skip_first: bool,
    },
    Shuffle {
        x: Value,
        factors: [usize; 3],
        down: bool,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    needs_grad: bool,
    op: Op,
    name: &'static str,
}

/// Recording tape for one computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient is tracked through it.
    pub fn leaf(&mut self, value: Tensor) -> Value {
        self.push_unchecked(Op::Leaf, value, false, "leaf")
    }

    /// Differentiable input.
    pub fn param(&mut self, value: Tensor) -> Value {
        self.push_unchecked(Op::Leaf, value, true, "param")
    }

    pub fn value(&self, v: Value) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Value) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated by the last `backward` call, if any reached `v`.
    pub fn grad(&self, v: Value) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Value) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool, name: &'static str) -> Result<Value> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        Ok(self.push_unchecked(op, value, needs_grad, name))
    }

    fn push_unchecked(&mut self, op: Op, value: Tensor, needs_grad: bool, name: &'static str) -> Value {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
            name,
        });
        Value(self.nodes.len() - 1)
    }

    fn needs(&self, v: Value) -> bool {
        self.nodes[v.0].needs_grad
    }

    // -- elementwise binary (broadcasting) ---------------------------------

    fn binary(
        &mut self,
        a: Value,
        b: Value,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(Value, Value) -> Op,
        name: &'static str,
    ) -> Result<Value> {
        let out = kernels::broadcast_binary(self.value(a), self.value(b), f)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(make(a, b), out, needs, name)
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary(a, b, |x, y| x + y, Op::Add, "add")
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary(a, b, |x, y| x - y, Op::Sub, "sub")
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary(a, b, |x, y| x * y, Op::Mul, "mul")
    }

    pub fn div(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary(a, b, |x, y| x / y, Op::Div, "div")
    }

    // -- elementwise unary --------------------------------------------------

    fn unary(
        &mut self,
        x: Value,
        f: impl Fn(f64) -> f64,
        op: Op,
        name: &'static str,
    ) -> Result<Value> {
        let out = self.value(x).map(f);
        let needs = self.needs(x);
        self.push(op, out, needs, name)
    }

    pub fn neg(&mut self, x: Value) -> Result<Value> {
        self.unary(x, |v| -v, Op::Neg(x), "neg")
    }

    pub fn scale(&mut self, x: Value, c: f64) -> Result<Value> {
        self.unary(x, |v| v * c, Op::Scale(x, c), "scale")
    }

    pub fn add_scalar(&mut self, x: Value, c: f64) -> Result<Value> {
        self.unary(x, |v| v + c, Op::AddScalar(x), "add_scalar")
    }

    pub fn relu(&mut self, x: Value) -> Result<Value> {
        self.unary(x, |v| v.max(0.0), Op::Relu(x), "relu")
    }

    /// max(x, c); used as a strictly-positive denominator guard.
    pub fn clamp_min(&mut self, x: Value, c: f64) -> Result<Value> {
        self.unary(x, |v| v.max(c), Op::ClampMin(x, c), "clamp_min")
    }

    pub fn abs(&mut self, x: Value) -> Result<Value> {
        self.unary(x, f64::abs, Op::Abs(x), "abs")
    }

    pub fn sqrt(&mut self, x: Value) -> Result<Value> {
        self.unary(x, f64::sqrt, Op::Sqrt(x), "sqrt")
    }

    pub fn exp(&mut self, x: Value) -> Result<Value> {
        self.unary(x, f64::exp, Op::Exp(x), "exp")
    }

    pub fn ln(&mut self, x: Value) -> Result<Value> {
        self.unary(x, f64::ln, Op::Ln(x), "ln")
    }

    pub fn silu(&mut self, x: Value) -> Result<Value> {
        self.unary(x, |v| v / (1.0 + (-v).exp()), Op::Silu(x), "silu")
    }

    // -- reductions ----------------------------------------------------------

    pub fn sum_all(&mut self, x: Value) -> Result<Value> {
        let s: f64 = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Op::SumAll(x), Tensor::scalar(s), needs, "sum_all")
    }

    pub fn mean_all(&mut self, x: Value) -> Result<Value> {
        let n = self.value(x).numel() as f64;
        let s: f64 = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Op::MeanAll(x), Tensor::scalar(s / n), needs, "mean_all")
    }

    fn axis_reduce(&mut self, x: Value, axis: usize, mean: bool) -> Result<Value> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid_arg("axis_reduce", format!("axis {axis} out of range")));
        }
        let (outer, len, inner) = kernels::lanes(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = 1;
        let xd = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut s = 0.0;
                for k in 0..len {
                    s += xd[base + k * inner];
                }
                out[o * inner + i] = if mean { s / len as f64 } else { s };
            }
        }
        let needs = self.needs(x);
        let op = if mean { Op::MeanAxis(x, axis) } else { Op::SumAxis(x, axis) };
        let name = if mean { "mean_axis" } else { "sum_axis" };
        self.push(op, Tensor::new(out_shape, out)?, needs, name)
    }

    /// Sum along `axis`, keeping the axis with length 1.
    pub fn sum_axis(&mut self, x: Value, axis: usize) -> Result<Value> {
        self.axis_reduce(x, axis, false)
    }

    /// Mean along `axis`, keeping the axis with length 1.
    pub fn mean_axis(&mut self, x: Value, axis: usize) -> Result<Value> {
        self.axis_reduce(x, axis, true)
    }

    pub fn softmax(&mut self, x: Value, axis: usize) -> Result<Value> {
        if axis >= self.shape(x).len() {
            return Err(Error::invalid_arg("softmax", format!("axis {axis} out of range")));
        }
        let out = kernels::softmax(self.value(x), axis);
        let needs = self.needs(x);
        self.push(Op::Softmax(x, axis), out, needs, "softmax")
    }

    // -- linear algebra -------------------------------------------------------

    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Matmul(a, b), Tensor::new(vec![m, n], out)?, needs, "matmul")
    }

    /// Batched matmul: (B,m,k) @ (B,k,n) -> (B,m,n).
    pub fn bmm(&mut self, a: Value, b: Value) -> Result<Value> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::ShapeMismatch {
                op: "bmm",
                left: sa,
                right: sb,
            });
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = Vec::with_capacity(bs * m * n);
        for i in 0..bs {
            let av = &self.value(a).data()[i * m * k..(i + 1) * m * k];
            let bv = &self.value(b).data()[i * k * n..(i + 1) * k * n];
            out.extend(kernels::matmul(av, bv, m, k, n));
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Bmm(a, b), Tensor::new(vec![bs, m, n], out)?, needs, "bmm")
    }

    // -- movement -------------------------------------------------------------

    pub fn reshape(&mut self, x: Value, shape: &[usize]) -> Result<Value> {
        let out = self.value(x).reshape(shape)?;
        let needs = self.needs(x);
        self.push(Op::Reshape(x), out, needs, "reshape")
    }

    pub fn permute(&mut self, x: Value, perm: &[usize]) -> Result<Value> {
        let rank = self.shape(x).len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid_arg("permute", format!("bad permutation {perm:?}")));
        }
        let out = kernels::permute_tensor(self.value(x), perm);
        let needs = self.needs(x);
        self.push(Op::Permute(x, perm.to_vec()), out, needs, "permute")
    }

    pub fn slice(&mut self, x: Value, axis: usize, start: usize, len: usize) -> Result<Value> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::invalid_arg(
                "slice",
                format!("axis {axis} range {start}..{} out of {shape:?}", start + len),
            ));
        }
        let (outer, alen, inner) = kernels::lanes(&shape, axis);
        let xd = self.value(x).data();
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * alen + start) * inner;
            out.extend_from_slice(&xd[base..base + len * inner]);
        }
        let needs = self.needs(x);
        self.push(
            Op::Slice { x, axis, start },
            Tensor::new(out_shape, out)?,
            needs,
            "slice",
        )
    }

    pub fn concat(&mut self, xs: &[Value], axis: usize) -> Result<Value> {
        if xs.is_empty() {
            return Err(Error::invalid_arg("concat", "no inputs"));
        }
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::invalid_arg("concat", format!("axis {axis} out of range")));
        }
        let mut total = 0usize;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: first.clone(),
                    right: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = kernels::lanes(&out_shape, axis);
        let mut out = vec![0.0; numel_of(&out_shape)];
        let mut off = 0usize;
        for &v in xs {
            let alen = self.shape(v)[axis];
            let xd = self.value(v).data();
            for o in 0..outer {
                let src = o * alen * inner;
                let dst = (o * total + off) * inner;
                out[dst..dst + alen * inner].copy_from_slice(&xd[src..src + alen * inner]);
            }
            off += alen;
        }
        let needs = xs.iter().any(|&v| self.needs(v));
        self.push(
            Op::Concat { xs: xs.to_vec(), axis },
            Tensor::new(out_shape, out)?,
            needs,
            "concat",
        )
    }

    // -- structured ops ---------------------------------------------------------

    /// Shape-preserving 3D convolution of x:(ci,t,h,w) with w:(co,ci,kt,kh,kw),
    /// b:(co). Temporal padding is governed by `mode`; spatial padding is
    /// symmetric zero-pad, so kh and kw must be odd, as must kt.
    pub fn conv3d(&mut self, x: Value, w: Value, b: Value, mode: ConvMode) -> Result<Value> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 4 || ws.len() != 5 || xs[0] != ws[1] {
            return Err(Error::ShapeMismatch {
                op: "conv3d",
                left: xs,
                right: ws,
            });
        }
        if bs != [ws[0]] {
            return Err(Error::ShapeMismatch {
                op: "conv3d bias",
                left: bs,
                right: vec![ws[0]],
            });
        }
        let d = ConvDims {
            ci: xs[0],
            co: ws[0],
            t: xs[1],
            h: xs[2],
            w: xs[3],
            kt: ws[2],
            kh: ws[3],
            kw: ws[4],
        };
        if d.kt % 2 == 0 || d.kh % 2 == 0 || d.kw % 2 == 0 {
            return Err(Error::invalid_arg(
                "conv3d",
                format!("kernel extents must be odd, got ({}, {}, {})", d.kt, d.kh, d.kw),
            ));
        }
        if let ConvMode::GroupCausal(g) = mode {
            if !matches!(g, 1 | 2 | 4) {
                return Err(Error::invalid_arg("conv3d", format!("group size {g} not in {{1,2,4}}")));
            }
        }
        let out = kernels::conv3d_forward(self.value(x), self.value(w), self.value(b), mode, &d);
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(Op::Conv3d { x, w, b, mode }, out, needs, "conv3d")
    }

    /// Bilinear interpolation of (c,t,h,w) to spatial size (th,tw).
    pub fn interp_spatial(&mut self, x: Value, th: usize, tw: usize) -> Result<Value> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::InvalidShape {
                op: "interp_spatial",
                shape: s,
                reason: "expected (c,t,h,w)".into(),
            });
        }
        if th == 0 || tw == 0 {
            return Err(Error::invalid_arg("interp_spatial", "zero-sized target"));
        }
        if (th, tw) == (s[2], s[3]) {
            // identity target shape: bit-identical passthrough
            let out = self.value(x).clone();
            let needs = self.needs(x);
            return self.push(Op::InterpSpatial { x, th, tw }, out, needs, "interp_spatial");
        }
        let out = kernels::interp_spatial_forward(self.value(x), th, tw);
        let needs = self.needs(x);
        self.push(Op::InterpSpatial { x, th, tw }, out, needs, "interp_spatial")
    }

    /// Temporal average pooling in groups of `kernel`; with `skip_first`,
    /// frame 0 passes through and grouping starts at frame 1.
    pub fn avgpool_temporal(&mut self, x: Value, kernel: usize, skip_first: bool) -> Result<Value> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::InvalidShape {
                op: "avgpool_temporal",
                shape: s,
                reason: "expected (c,t,h,w)".into(),
            });
        }
        if kernel == 0 {
            return Err(Error::invalid_arg("avgpool_temporal", "kernel must be >= 1"));
        }
        let t = s[1];
        if skip_first {
            if t == 0 || (t - 1) % kernel != 0 {
                return Err(Error::Divisibility {
                    op: "avgpool_temporal",
                    dim: "t - 1",
                    value: t.saturating_sub(1),
                    divisor: kernel,
                });
            }
        } else if t % kernel != 0 {
            return Err(Error::Divisibility {
                op: "avgpool_temporal",
                dim: "t",
                value: t,
                divisor: kernel,
            });
        }
        let out = kernels::avgpool_t_forward(self.value(x), kernel, skip_first);
        let needs = self.needs(x);
        self.push(Op::AvgPoolT { x, kernel, skip_first }, out, needs, "avgpool_temporal")
    }

    /// Time-spatial pixel shuffle. Down moves (ft,fh,fw) blocks into channels;
    /// up is the exact inverse permutation.
    pub fn time_spatial_shuffle(&mut self, x: Value, factors: [usize; 3], down: bool) -> Result<Value> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::InvalidShape {
                op: "time_spatial_shuffle",
                shape: s,
                reason: "expected (c,t,h,w)".into(),
            });
        }
        let [ft, fh, fw] = factors;
        if ft == 0 || fh == 0 || fw == 0 {
            return Err(Error::invalid_arg("time_spatial_shuffle", "factors must be >= 1"));
        }
        if down {
            for (dim, (len, f)) in [("t", (s[1], ft)), ("h", (s[2], fh)), ("w", (s[3], fw))] {
                if len % f != 0 {
                    return Err(Error::Divisibility {
                        op: "time_spatial_shuffle",
                        dim,
                        value: len,
                        divisor: f,
                    });
                }
            }
        } else if s[0] % (ft * fh * fw) != 0 {
            return Err(Error::Divisibility {
                op: "time_spatial_shuffle",
                dim: "c",
                value: s[0],
                divisor: ft * fh * fw,
            });
        }
        let out = kernels::shuffle_forward(self.value(x), factors, down);
        let needs = self.needs(x);
        self.push(Op::Shuffle { x, factors, down }, out, needs, "time_spatial_shuffle")
    }

    // -- composites --------------------------------------------------------------

    /// x / sqrt(mean(x^2, axis) + eps^2): RMS normalization along one axis.
    pub fn rms_norm(&mut self, x: Value, axis: usize, eps: f64) -> Result<Value> {
        let sq = self.mul(x, x)?;
        let ms = self.mean_axis(sq, axis)?;
        let guarded = self.add_scalar(ms, eps * eps)?;
        let rms = self.sqrt(guarded)?;
        self.div(x, rms)
    }

    /// mean(|a - b|)
    pub fn l1(&mut self, a: Value, b: Value) -> Result<Value> {
        let d = self.sub(a, b)?;
        let ad = self.abs(d)?;
        self.mean_all(ad)
    }

    // -- backward ----------------------------------------------------------------

    fn accumulate(&mut self, v: Value, contribution: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.nodes[v.0].grad {
            Some(g) => {
                debug_assert_eq!(g.shape(), contribution.shape());
                for (gi, ci) in g.data_mut().iter_mut().zip(contribution.data()) {
                    *gi += ci;
                }
            }
            slot => *slot = Some(contribution),
        }
    }

    /// Reverse pass from a scalar root. Gradients of earlier backward calls
    /// on the same tape are cleared first.
    pub fn backward(&mut self, root: Value) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::NonScalarRoot {
                shape: self.shape(root).to_vec(),
            });
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let seed = Tensor::full(self.shape(root), 1.0);
        self.nodes[root.0].grad = Some(seed);

        for id in (0..=root.0).rev() {
            if self.nodes[id].grad.is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let g = self.nodes[id].grad.clone().expect("checked above");
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    op: self.nodes[id].name,
                });
            }
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    if self.needs(a) {
                        let ga = kernels::reduce_to_shape(&g, &self.shape(a).to_vec());
                        self.accumulate(a, ga);
                    }
                    if self.needs(b) {
                        let gb = kernels::reduce_to_shape(&g, &self.shape(b).to_vec());
                        self.accumulate(b, gb);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(a) {
                        let ga = kernels::reduce_to_shape(&g, &self.shape(a).to_vec());
                        self.accumulate(a, ga);
                    }
                    if self.needs(b) {
                        let gb = kernels::reduce_to_shape(&g.map(|v| -v), &self.shape(b).to_vec());
                        self.accumulate(b, gb);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(a) {
                        let prod = kernels::broadcast_binary(&g, self.value(b), |x, y| x * y)?;
                        let ga = kernels::reduce_to_shape(&prod, &self.shape(a).to_vec());
                        self.accumulate(a, ga);
                    }
                    if self.needs(b) {
                        let prod = kernels::broadcast_binary(&g, self.value(a), |x, y| x * y)?;
                        let gb = kernels::reduce_to_shape(&prod, &self.shape(b).to_vec());
                        self.accumulate(b, gb);
                    }
                }
                Op::Div(a, b) => {
                    if self.needs(a) {
                        let prod = kernels::broadcast_binary(&g, self.value(b), |x, y| x / y)?;
                        let ga = kernels::reduce_to_shape(&prod, &self.shape(a).to_vec());
                        self.accumulate(a, ga);
                    }
                    if self.needs(b) {
                        // d(a/b)/db = -a / b^2
                        let num = kernels::broadcast_binary(&g, self.value(a), |x, y| x * y)?;
                        let gb_full = kernels::broadcast_binary(&num, self.value(b), |x, y| -x / (y * y))?;
                        let gb = kernels::reduce_to_shape(&gb_full, &self.shape(b).to_vec());
                        self.accumulate(b, gb);
                    }
                }
                Op::Neg(x) => {
                    self.accumulate(x, g.map(|v| -v));
                }
                Op::Scale(x, c) => {
                    self.accumulate(x, g.map(|v| v * c));
                }
                Op::AddScalar(x) => {
                    self.accumulate(x, g);
                }
                Op::Relu(x) => {
                    let gx = g.zip_map(self.value(x), |gv, xv| if xv > 0.0 { gv } else { 0.0 })?;
                    self.accumulate(x, gx);
                }
                Op::ClampMin(x, c) => {
                    let gx = g.zip_map(self.value(x), |gv, xv| if xv > c { gv } else { 0.0 })?;
                    self.accumulate(x, gx);
                }
                Op::Abs(x) => {
                    // subgradient 0 at exactly 0
                    let gx = g.zip_map(self.value(x), |gv, xv| {
                        if xv > 0.0 {
                            gv
                        } else if xv < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    })?;
                    self.accumulate(x, gx);
                }
                Op::Sqrt(x) => {
                    let gx = g.zip_map(&self.nodes[id].value, |gv, yv| 0.5 * gv / yv)?;
                    self.accumulate(x, gx);
                }
                Op::Exp(x) => {
                    let gx = g.zip_map(&self.nodes[id].value, |gv, yv| gv * yv)?;
                    self.accumulate(x, gx);
                }
                Op::Ln(x) => {
                    let gx = g.zip_map(self.value(x), |gv, xv| gv / xv)?;
                    self.accumulate(x, gx);
                }
                Op::Silu(x) => {
                    let gx = g.zip_map(self.value(x), |gv, xv| {
                        let s = 1.0 / (1.0 + (-xv).exp());
                        gv * s * (1.0 + xv * (1.0 - s))
                    })?;
                    self.accumulate(x, gx);
                }
                Op::SumAll(x) => {
                    let gv = g.item();
                    self.accumulate(x, Tensor::full(&self.shape(x).to_vec(), gv));
                }
                Op::MeanAll(x) => {
                    let n = self.value(x).numel() as f64;
                    let gv = g.item() / n;
                    self.accumulate(x, Tensor::full(&self.shape(x).to_vec(), gv));
                }
                Op::SumAxis(x, axis) | Op::MeanAxis(x, axis) => {
                    let mean = matches!(self.nodes[id].op, Op::MeanAxis(..));
                    let shape = self.shape(x).to_vec();
                    let (outer, len, inner) = kernels::lanes(&shape, axis);
                    let scale = if mean { 1.0 / len as f64 } else { 1.0 };
                    let gd = g.data();
                    let mut gx = Tensor::zeros(&shape);
                    let gxd = gx.data_mut();
                    for o in 0..outer {
                        for i in 0..inner {
                            let gv = gd[o * inner + i] * scale;
                            let base = o * len * inner + i;
                            for k in 0..len {
                                gxd[base + k * inner] += gv;
                            }
                        }
                    }
                    self.accumulate(x, gx);
                }
                Op::Softmax(x, axis) => {
                    let gx = kernels::softmax_backward(&self.nodes[id].value, &g, axis);
                    self.accumulate(x, gx);
                }
                Op::Matmul(a, b) => {
                    let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                    let n = self.shape(b)[1];
                    if self.needs(a) {
                        let ga = kernels::matmul_bt(g.data(), self.value(b).data(), m, n, k);
                        self.accumulate(a, Tensor::new(vec![m, k], ga)?);
                    }
                    if self.needs(b) {
                        let gb = kernels::matmul_at(self.value(a).data(), g.data(), m, k, n);
                        self.accumulate(b, Tensor::new(vec![k, n], gb)?);
                    }
                }
                Op::Bmm(a, b) => {
                    let (bs, m, k) = (self.shape(a)[0], self.shape(a)[1], self.shape(a)[2]);
                    let n = self.shape(b)[2];
                    if self.needs(a) {
                        let mut ga = Vec::with_capacity(bs * m * k);
                        for i in 0..bs {
                            let gv = &g.data()[i * m * n..(i + 1) * m * n];
                            let bv = &self.value(b).data()[i * k * n..(i + 1) * k * n];
                            ga.extend(kernels::matmul_bt(gv, bv, m, n, k));
                        }
                        self.accumulate(a, Tensor::new(vec![bs, m, k], ga)?);
                    }
                    if self.needs(b) {
                        let mut gb = Vec::with_capacity(bs * k * n);
                        for i in 0..bs {
                            let av = &self.value(a).data()[i * m * k..(i + 1) * m * k];
                            let gv = &g.data()[i * m * n..(i + 1) * m * n];
                            gb.extend(kernels::matmul_at(av, gv, m, k, n));
                        }
                        self.accumulate(b, Tensor::new(vec![bs, k, n], gb)?);
                    }
                }
                Op::Reshape(x) => {
                    let gx = g.reshape(&self.shape(x).to_vec())?;
                    self.accumulate(x, gx);
                }
                Op::Permute(x, perm) => {
                    let gx = kernels::permute_tensor(&g, &kernels::inverse_perm(&perm));
                    self.accumulate(x, gx);
                }
                Op::Slice { x, axis, start } => {
                    let shape = self.shape(x).to_vec();
                    let (outer, alen, inner) = kernels::lanes(&shape, axis);
                    let len = g.shape()[axis];
                    let mut gx = Tensor::zeros(&shape);
                    let gxd = gx.data_mut();
                    let gd = g.data();
                    for o in 0..outer {
                        let dst = (o * alen + start) * inner;
                        let src = o * len * inner;
                        gxd[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                    }
                    self.accumulate(x, gx);
                }
                Op::Concat { xs, axis } => {
                    let out_shape = self.nodes[id].value.shape().to_vec();
                    let (outer, total, inner) = kernels::lanes(&out_shape, axis);
                    let gd = g.data();
                    let mut off = 0usize;
                    for &v in &xs {
                        let alen = self.shape(v)[axis];
                        if self.needs(v) {
                            let mut shape = out_shape.clone();
                            shape[axis] = alen;
                            let mut gx = Tensor::zeros(&shape);
                            let gxd = gx.data_mut();
                            for o in 0..outer {
                                let src = (o * total + off) * inner;
                                let dst = o * alen * inner;
                                gxd[dst..dst + alen * inner]
                                    .copy_from_slice(&gd[src..src + alen * inner]);
                            }
                            self.accumulate(v, gx);
                        }
                        off += alen;
                    }
                }
                Op::Conv3d { x, w, b, mode } => {
                    let xs = self.shape(x).to_vec();
                    let ws = self.shape(w).to_vec();
                    let d = ConvDims {
                        ci: xs[0],
                        co: ws[0],
                        t: xs[1],
                        h: xs[2],
                        w: xs[3],
                        kt: ws[2],
                        kh: ws[3],
                        kw: ws[4],
                    };
                    let mut dx = self.needs(x).then(|| Tensor::zeros(&xs));
                    let mut dw = self.needs(w).then(|| Tensor::zeros(&ws));
                    let mut db = self.needs(b).then(|| Tensor::zeros(&[d.co]));
                    kernels::conv3d_backward(
                        self.value(x),
                        self.value(w),
                        &g,
                        mode,
                        &d,
                        dx.as_mut(),
                        dw.as_mut(),
                        db.as_mut(),
                    );
                    if let Some(dx) = dx {
                        self.accumulate(x, dx);
                    }
                    if let Some(dw) = dw {
                        self.accumulate(w, dw);
                    }
                    if let Some(db) = db {
                        self.accumulate(b, db);
                    }
                }
                Op::InterpSpatial { x, th, tw } => {
                    let shape = self.shape(x).to_vec();
                    let gx = if (th, tw) == (shape[2], shape[3]) {
                        g
                    } else {
                        kernels::interp_spatial_backward(&shape, &g, th, tw)
                    };
                    self.accumulate(x, gx);
                }
                Op::AvgPoolT { x, kernel, skip_first } => {
                    let shape = self.shape(x).to_vec();
                    let gx = kernels::avgpool_t_backward(&shape, &g, kernel, skip_first);
                    self.accumulate(x, gx);
                }
                Op::Shuffle { x, factors, down } => {
                    let gx = kernels::shuffle_forward(&g, factors, !down);
                    self.accumulate(x, gx);
                }
            }
        }
        Ok(())
    }

    /// Evaluate a scalar root and return its value together with gradients
    /// for each of `wrt` (zero tensors where the graph is disconnected).
    pub fn forward_backward(&mut self, root: Value, wrt: &[Value]) -> Result<(f64, Vec<Tensor>)> {
        for &v in wrt {
            if !self.requires_grad(v) {
                return Err(Error::NoGradRequested {
                    name: format!("wrt node {}", v.0),
                });
            }
        }
        self.backward(root)?;
        let mut grads = Vec::with_capacity(wrt.len());
        for &v in wrt {
            let g = match self.grad(v) {
                Some(g) => {
                    if !g.is_finite() {
                        return Err(Error::NonFinite { op: "gradient" });
                    }
                    g.clone()
                }
                None => Tensor::zeros(&self.shape(v).to_vec()),
            };
            grads.push(g);
        }
        Ok((self.value(root).item(), grads))
    }
}
