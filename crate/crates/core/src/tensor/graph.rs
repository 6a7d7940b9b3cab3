//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operator appends one node holding its forward value. `backward`
//! walks the tape from the loss towards the leaves, visiting each node once
//! and accumulating gradients additively, so a value consumed by several
//! operators receives the sum of all its contributions.

use super::conv::{self, col2im, im2col, ConvSpec, Geometry};
use super::{Real, Tensor};
use crate::error::{arg_err, shape_err, Error, Result};
use crate::exec;
use indexmap::IndexMap;

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Named tensor axis for per-slice operators.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Channel,
    Height,
    Width,
}

#[derive(Clone, Copy, Debug)]
enum Unary<T> {
    Affine { scale: T, shift: T },
    Relu,
    LeakyRelu(T),
    Tanh,
    Sigmoid,
    Ln,
    Abs,
    Clamp { lo: T, hi: T },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    Upsample { x: Var, factor: usize },
    Softmax { x: Var, axis: Axis },
    L2Normalize { x: Var, axis: Axis, eps: T },
    Unary { x: Var, kind: Unary<T> },
    Binary { a: Var, b: Var, kind: Binary },
    InstanceNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Concat { xs: Vec<Var> },
    Sum { x: Var },
    Mean { x: Var },
    MeanAbsDiff { a: Var, b: Var },
    Reshape { x: Var },
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Unfold { x: Var, geom: Geometry },
    Fold { x: Var, geom: Geometry },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// One forward pass worth of recorded operations.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(String, Var)>,
    backward_done: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), params: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("forward value of {}", op_name(&op))));
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Registers a named learnable leaf; its gradient is reported by [`Graph::param_grads`].
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("parameter {name}")));
        }
        let v = self.leaf(value, true)?;
        self.params.push((name.to_string(), v));
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every registered parameter, in registration order.
    pub fn param_grads(&self) -> IndexMap<String, Tensor<T>> {
        self.params
            .iter()
            .map(|(name, v)| {
                let g = self
                    .grad(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.shape(*v)));
                (name.clone(), g)
            })
            .collect()
    }

    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    // ---- operators -------------------------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let out = conv::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), &spec)?;
        let rg = self.needs(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        self.push(out, Op::Conv2d { x, w, b, spec }, rg)
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(arg_err("upsample_nearest", "factor must be >= 1"));
        }
        let src = self.value(x);
        let [n, c, h, w] = src.shape();
        let (oh, ow) = (h * factor, w * factor);
        let mut out = Tensor::zeros([n, c, oh, ow]);
        let s = src.data();
        for (p, dst) in out.data_mut().chunks_mut(oh * ow).enumerate() {
            let plane = &s[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                for xx in 0..ow {
                    dst[y * ow + xx] = plane[(y / factor) * w + xx / factor];
                }
            }
        }
        let rg = self.needs(&[x]);
        self.push(out, Op::Upsample { x, factor }, rg)
    }

    pub fn softmax(&mut self, x: Var, axis: Axis) -> Result<Var> {
        let mut out = self.value(x).clone();
        let shape = out.shape();
        let data = out.data_mut();
        for_each_slice(shape, axis, |idx| {
            let max = idx.clone().map(|i| data[i]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for i in idx.clone() {
                data[i] = (data[i] - max).exp();
                total += data[i];
            }
            for i in idx {
                data[i] = data[i] / total;
            }
        });
        let rg = self.needs(&[x]);
        self.push(out, Op::Softmax { x, axis }, rg)
    }

    /// Scales every slice along `axis` to unit L2 norm, `x / (‖x‖ + eps)`.
    pub fn l2_normalize(&mut self, x: Var, axis: Axis, eps: T) -> Result<Var> {
        let mut out = self.value(x).clone();
        let shape = out.shape();
        let data = out.data_mut();
        for_each_slice(shape, axis, |idx| {
            let norm = idx.clone().map(|i| data[i] * data[i]).sum::<T>().sqrt();
            let denom = norm + eps;
            for i in idx {
                data[i] = data[i] / denom;
            }
        });
        let rg = self.needs(&[x]);
        self.push(out, Op::L2Normalize { x, axis, eps }, rg)
    }

    fn unary(&mut self, x: Var, kind: Unary<T>) -> Result<Var> {
        let out = self.value(x).map(|v| apply_unary(kind, v));
        let rg = self.needs(&[x]);
        self.push(out, Op::Unary { x, kind }, rg)
    }

    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Result<Var> {
        self.unary(x, Unary::Affine { scale, shift })
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        self.affine(x, s, T::zero())
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Result<Var> {
        self.unary(x, Unary::LeakyRelu(slope))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Ln)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Abs)
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        self.unary(x, Unary::Clamp { lo, hi })
    }

    fn binary(&mut self, a: Var, b: Var, kind: Binary, op: &'static str) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        check_broadcast(op, sa, sb)?;
        let mut out = Tensor::zeros(sa);
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            let f = |x: T, y: T| match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
            };
            let dst = out.data_mut();
            if sa == sb {
                for ((o, &x), &y) in dst.iter_mut().zip(av).zip(bv) {
                    *o = f(x, y);
                }
            } else {
                for_each_broadcast(sa, sb, |ia, ib| dst[ia] = f(av[ia], bv[ib]));
            }
        }
        let rg = self.needs(&[a, b]);
        self.push(out, Op::Binary { a, b, kind }, rg)
    }

    /// `a + b`, with `b` broadcast over any of its unit axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub, "sub")
    }

    /// `a ⊙ b`, with `b` broadcast over any of its unit axes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul, "mul")
    }

    /// Per-sample per-channel standardization followed by a channel affine map.
    pub fn instance_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        for (name, v) in [("gain", gain), ("bias", bias)] {
            if self.value(v).numel() != c {
                return Err(shape_err(
                    "instance_norm",
                    format!("{name} has {} values for {c} channels", self.value(v).numel()),
                ));
            }
        }
        let hw = h * w;
        if hw == 0 {
            return Err(shape_err("instance_norm", "empty spatial plane"));
        }
        let count = T::from_usize(hw).unwrap();
        let src = self.value(x).data();
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![T::zero(); n * c * hw];
        let mut inv_std = vec![T::zero(); n * c];
        let mut out = Tensor::zeros([n, c, h, w]);
        let dst = out.data_mut();
        for p in 0..n * c {
            let plane = &src[p * hw..(p + 1) * hw];
            let mean = plane.iter().copied().sum::<T>() / count;
            let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[p] = inv;
            let ch = p % c;
            for (i, &v) in plane.iter().enumerate() {
                let xh = (v - mean) * inv;
                xhat[p * hw + i] = xh;
                dst[p * hw + i] = gv[ch] * xh + bv[ch];
            }
        }
        let rg = self.needs(&[x, gain, bias]);
        self.push(out, Op::InstanceNorm { x, gain, bias, xhat, inv_std }, rg)
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| shape_err("concat_channels", "no inputs"))?;
        let [n, _, h, w] = self.shape(first);
        let mut total_c = 0;
        for &v in xs {
            let [vn, vc, vh, vw] = self.shape(v);
            if (vn, vh, vw) != (n, h, w) {
                return Err(shape_err(
                    "concat_channels",
                    format!(
                        "input {:?} does not share (n, h, w) = ({n}, {h}, {w}) with the first input",
                        self.shape(v)
                    ),
                ));
            }
            total_c += vc;
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * total_c * hw);
        for i in 0..n {
            for &v in xs {
                let t = self.value(v);
                let len = t.shape()[1] * hw;
                data.extend_from_slice(&t.data()[i * len..(i + 1) * len]);
            }
        }
        let out = Tensor::from_vec([n, total_c, h, w], data)?;
        let rg = self.needs(xs);
        self.push(out, Op::Concat { xs: xs.to_vec() }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<T>() / T::from_usize(t.numel()).unwrap();
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Mean { x }, rg)
    }

    /// `mean(|a - b|)` over all elements.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err("mean_abs_diff", format!("{sa:?} vs {sb:?}")));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let s = av.iter().zip(bv).map(|(&x, &y)| (x - y).abs()).sum::<T>()
            / T::from_usize(av.len()).unwrap();
        let rg = self.needs(&[a, b]);
        self.push(Tensor::scalar(s), Op::MeanAbsDiff { a, b }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: [usize; 4]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.needs(&[x]);
        self.push(out, Op::Reshape { x }, rg)
    }

    /// Batched matrix product over (n, 1, rows, cols) tensors, with optional
    /// transposition of either operand.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[1] != 1 || sb[1] != 1 || sa[0] != sb[0] {
            return Err(shape_err(
                "matmul",
                format!("operands must be (n, 1, r, c) with equal n, got {sa:?} and {sb:?}"),
            ));
        }
        let la = MatView::new(sa, ta);
        let lb = MatView::new(sb, tb);
        if la.cols != lb.rows {
            return Err(shape_err(
                "matmul",
                format!("inner dimensions differ: {} vs {}", la.cols, lb.rows),
            ));
        }
        let n = sa[0];
        let (m, k, p) = (la.rows, la.cols, lb.cols);
        let mut out = Tensor::zeros([n, 1, m, p]);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let (alen, blen) = (sa[2] * sa[3], sb[2] * sb[3]);
        exec::for_each_chunk_mut(out.data_mut(), m * p, |i, dst| {
            T::gemm(
                m,
                k,
                p,
                T::one(),
                &av[i * alen..(i + 1) * alen],
                la.rs,
                la.cs,
                &bv[i * blen..(i + 1) * blen],
                lb.rs,
                lb.cs,
                T::zero(),
                dst,
                p as isize,
                1,
            );
        });
        let rg = self.needs(&[a, b]);
        self.push(out, Op::MatMul { a, b, ta, tb }, rg)
    }

    /// Extracts k×k patches as columns: (n, c, h, w) -> (n, 1, c·k·k, patches).
    pub fn unfold(&mut self, x: Var, k: usize, stride: usize, padding: usize) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if k > h + 2 * padding || k > w + 2 * padding {
            return Err(arg_err(
                "unfold",
                format!("patch size {k} exceeds padded spatial size {}x{}", h + 2 * padding, w + 2 * padding),
            ));
        }
        let geom = ConvSpec::new(1, k).stride(stride).padding(padding).geometry(c, h, w)?;
        let (rows, cols) = (geom.rows(), geom.cols());
        let mut out = Tensor::zeros([n, 1, rows, cols]);
        let src = self.value(x).data();
        exec::for_each_chunk_mut(out.data_mut(), rows * cols, |i, dst| {
            im2col(&src[i * c * h * w..(i + 1) * c * h * w], &geom, dst);
        });
        let rg = self.needs(&[x]);
        self.push(out, Op::Unfold { x, geom }, rg)
    }

    /// Adjoint of [`Graph::unfold`]: sums overlapping patch columns back into
    /// an (n, c, h, w) map.
    pub fn fold(
        &mut self,
        x: Var,
        out_chw: (usize, usize, usize),
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (c, h, w) = out_chw;
        let geom = ConvSpec::new(1, k).stride(stride).padding(padding).geometry(c, h, w)?;
        let [n, one, rows, cols] = self.shape(x);
        if one != 1 || rows != geom.rows() || cols != geom.cols() {
            return Err(shape_err(
                "fold",
                format!(
                    "columns {:?} do not match ({}, {}) for output {out_chw:?}",
                    self.shape(x),
                    geom.rows(),
                    geom.cols()
                ),
            ));
        }
        let mut out = Tensor::zeros([n, c, h, w]);
        let src = self.value(x).data();
        exec::for_each_chunk_mut(out.data_mut(), c * h * w, |i, dst| {
            col2im(&src[i * rows * cols..(i + 1) * rows * cols], &geom, dst);
        });
        let rg = self.needs(&[x]);
        self.push(out, Op::Fold { x, geom }, rg)
    }

    // ---- backward --------------------------------------------------------

    /// Accumulates d(loss)/d(value) into every node that requires gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let shape = self.shape(loss);
        if shape != [1, 1, 1, 1] {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                let g = grads[i].get_or_insert_with(|| Tensor::zeros(node.value.shape()));
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of leaf {i}")));
                }
            }
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let mut acc = |v: Var, t: Tensor<T>| {
            if self.nodes[v.0].requires_grad {
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, spec } => {
                let need = (
                    self.requires_grad(*x),
                    self.requires_grad(*w),
                    b.is_some_and(|b| self.requires_grad(b)),
                );
                let grads = conv::conv2d_backward(self.value(*x), self.value(*w), g, spec, need)?;
                if let Some(dx) = grads.dx {
                    acc(*x, dx);
                }
                if let Some(dw) = grads.dw {
                    acc(*w, dw);
                }
                if let (Some(b), Some(db)) = (b, grads.db) {
                    let shape = self.shape(*b);
                    acc(*b, db.reshape(shape)?);
                }
            }
            Op::Upsample { x, factor } => {
                let [n, c, h, w] = self.shape(*x);
                let (oh, ow) = (h * factor, w * factor);
                let mut dx = Tensor::zeros([n, c, h, w]);
                let gs = g.data();
                for (p, dst) in dx.data_mut().chunks_mut(h * w).enumerate() {
                    let plane = &gs[p * oh * ow..(p + 1) * oh * ow];
                    for y in 0..oh {
                        for xx in 0..ow {
                            dst[(y / factor) * w + xx / factor] += plane[y * ow + xx];
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let gs = g.data();
                let mut dx = Tensor::zeros(node.value.shape());
                let d = dx.data_mut();
                for_each_slice(node.value.shape(), *axis, |idx| {
                    let dot = idx.clone().map(|j| gs[j] * y[j]).sum::<T>();
                    for j in idx {
                        d[j] = y[j] * (gs[j] - dot);
                    }
                });
                acc(*x, dx);
            }
            Op::L2Normalize { x, axis, eps } => {
                let xv = self.value(*x).data();
                let gs = g.data();
                let mut dx = Tensor::zeros(node.value.shape());
                let d = dx.data_mut();
                for_each_slice(node.value.shape(), *axis, |idx| {
                    let r = idx.clone().map(|j| xv[j] * xv[j]).sum::<T>().sqrt();
                    let n = r + *eps;
                    let gx = idx.clone().map(|j| gs[j] * xv[j]).sum::<T>();
                    let coef = if r > T::zero() { gx / (n * n * r) } else { T::zero() };
                    for j in idx {
                        d[j] = gs[j] / n - xv[j] * coef;
                    }
                });
                acc(*x, dx);
            }
            Op::Unary { x, kind } => {
                let xv = self.value(*x).data();
                let y = node.value.data();
                let mut dx = g.clone();
                for ((d, &xi), &yi) in dx.data_mut().iter_mut().zip(xv).zip(y) {
                    *d = *d * unary_derivative(*kind, xi, yi);
                }
                acc(*x, dx);
            }
            Op::Binary { a, b, kind } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                if self.requires_grad(*a) {
                    let da = match kind {
                        Binary::Add | Binary::Sub => g.clone(),
                        Binary::Mul => {
                            let bv = self.value(*b).data();
                            let mut da = g.clone();
                            let d = da.data_mut();
                            if sa == sb {
                                for (x, &y) in d.iter_mut().zip(bv) {
                                    *x = *x * y;
                                }
                            } else {
                                for_each_broadcast(sa, sb, |ia, ib| d[ia] = d[ia] * bv[ib]);
                            }
                            da
                        }
                    };
                    acc(*a, da);
                }
                if self.requires_grad(*b) {
                    let mut db = Tensor::zeros(sb);
                    let d = db.data_mut();
                    let gs = g.data();
                    match kind {
                        Binary::Add => for_each_broadcast(sa, sb, |ia, ib| d[ib] += gs[ia]),
                        Binary::Sub => for_each_broadcast(sa, sb, |ia, ib| d[ib] -= gs[ia]),
                        Binary::Mul => {
                            let av = self.value(*a).data();
                            for_each_broadcast(sa, sb, |ia, ib| d[ib] += gs[ia] * av[ia]);
                        }
                    }
                    acc(*b, db);
                }
            }
            Op::InstanceNorm { x, gain, bias, xhat, inv_std } => {
                let [n, c, h, w] = self.shape(*x);
                let hw = h * w;
                let count = T::from_usize(hw).unwrap();
                let gv = self.value(*gain).data();
                let gs = g.data();
                let mut dx = Tensor::zeros([n, c, h, w]);
                let mut dgain = Tensor::zeros(self.shape(*gain));
                let mut dbias = Tensor::zeros(self.shape(*bias));
                for p in 0..n * c {
                    let ch = p % c;
                    let range = p * hw..(p + 1) * hw;
                    let (gp, xp) = (&gs[range.clone()], &xhat[range.clone()]);
                    let mut sum_g = T::zero();
                    let mut sum_gx = T::zero();
                    for (&gi, &xi) in gp.iter().zip(xp) {
                        sum_g += gi;
                        sum_gx += gi * xi;
                    }
                    dgain.data_mut()[ch] += sum_gx;
                    dbias.data_mut()[ch] += sum_g;
                    let scale = gv[ch] * inv_std[p] / count;
                    for ((d, &gi), &xi) in dx.data_mut()[range].iter_mut().zip(gp).zip(xp) {
                        *d = scale * (count * gi - sum_g - xi * sum_gx);
                    }
                }
                acc(*x, dx);
                acc(*gain, dgain);
                acc(*bias, dbias);
            }
            Op::Concat { xs } => {
                let [n, total_c, h, w] = g.shape();
                let hw = h * w;
                let mut offset = 0;
                for &v in xs {
                    let c = self.shape(v)[1];
                    if self.requires_grad(v) {
                        let mut part = Vec::with_capacity(n * c * hw);
                        for i in 0..n {
                            let start = (i * total_c + offset) * hw;
                            part.extend_from_slice(&g.data()[start..start + c * hw]);
                        }
                        acc(v, Tensor::from_vec([n, c, h, w], part)?);
                    }
                    offset += c;
                }
            }
            Op::Sum { x } => acc(*x, Tensor::full(self.shape(*x), g.item())),
            Op::Mean { x } => {
                let shape = self.shape(*x);
                let n = T::from_usize(shape.iter().product()).unwrap();
                acc(*x, Tensor::full(shape, g.item() / n));
            }
            Op::MeanAbsDiff { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let scale = g.item() / T::from_usize(av.len()).unwrap();
                let d: Vec<T> = av
                    .iter()
                    .zip(bv)
                    .map(|(&x, &y)| sign(x - y) * scale)
                    .collect();
                let da = Tensor::from_vec(self.shape(*a), d)?;
                if self.requires_grad(*b) {
                    acc(*b, da.map(|v| -v));
                }
                acc(*a, da);
            }
            Op::Reshape { x } => acc(*x, g.clone().reshape(self.shape(*x))?),
            Op::MatMul { a, b, ta, tb } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let la = MatView::new(sa, *ta);
                let lb = MatView::new(sb, *tb);
                let (m, k, p) = (la.rows, la.cols, lb.cols);
                let n = sa[0];
                let (alen, blen) = (sa[2] * sa[3], sb[2] * sb[3]);
                let gs = g.data();
                if self.requires_grad(*a) {
                    // dA = dC · Bᵀ, written through A's storage layout.
                    let bv = self.value(*b).data();
                    let mut da = Tensor::zeros(sa);
                    exec::for_each_chunk_mut(da.data_mut(), alen, |i, dst| {
                        T::gemm(
                            m,
                            p,
                            k,
                            T::one(),
                            &gs[i * m * p..(i + 1) * m * p],
                            p as isize,
                            1,
                            &bv[i * blen..(i + 1) * blen],
                            lb.cs,
                            lb.rs,
                            T::zero(),
                            dst,
                            la.rs,
                            la.cs,
                        );
                    });
                    acc(*a, da);
                }
                if self.requires_grad(*b) {
                    // dB = Aᵀ · dC, written through B's storage layout.
                    let av = self.value(*a).data();
                    let mut db = Tensor::zeros(sb);
                    exec::for_each_chunk_mut(db.data_mut(), blen, |i, dst| {
                        T::gemm(
                            k,
                            m,
                            p,
                            T::one(),
                            &av[i * alen..(i + 1) * alen],
                            la.cs,
                            la.rs,
                            &gs[i * m * p..(i + 1) * m * p],
                            p as isize,
                            1,
                            T::zero(),
                            dst,
                            lb.rs,
                            lb.cs,
                        );
                    });
                    acc(*b, db);
                }
                let _ = n;
            }
            Op::Unfold { x, geom } => {
                let shape = self.shape(*x);
                let [_, c, h, w] = shape;
                let len = geom.rows() * geom.cols();
                let mut dx = Tensor::zeros(shape);
                let gs = g.data();
                exec::for_each_chunk_mut(dx.data_mut(), c * h * w, |i, dst| {
                    col2im(&gs[i * len..(i + 1) * len], geom, dst);
                });
                acc(*x, dx);
            }
            Op::Fold { x, geom } => {
                let shape = self.shape(*x);
                let [_, _, rows, cols] = shape;
                let plane = geom.c * geom.h * geom.w;
                let mut dx = Tensor::zeros(shape);
                let gs = g.data();
                exec::for_each_chunk_mut(dx.data_mut(), rows * cols, |i, dst| {
                    im2col(&gs[i * plane..(i + 1) * plane], geom, dst);
                });
                acc(*x, dx);
            }
        }
        Ok(())
    }
}

/// Row/column strides of a logical matrix stored as an (n, 1, r, c) slice.
struct MatView {
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl MatView {
    fn new(shape: [usize; 4], transposed: bool) -> Self {
        let (r, c) = (shape[2], shape[3]);
        if transposed {
            MatView { rows: c, cols: r, rs: 1, cs: c as isize }
        } else {
            MatView { rows: r, cols: c, rs: c as isize, cs: 1 }
        }
    }
}

fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn apply_unary<T: Real>(kind: Unary<T>, v: T) -> T {
    match kind {
        Unary::Affine { scale, shift } => scale * v + shift,
        Unary::Relu => v.max(T::zero()),
        Unary::LeakyRelu(slope) => {
            if v > T::zero() {
                v
            } else {
                slope * v
            }
        }
        Unary::Tanh => v.tanh(),
        Unary::Sigmoid => T::one() / (T::one() + (-v).exp()),
        Unary::Ln => v.ln(),
        Unary::Abs => v.abs(),
        Unary::Clamp { lo, hi } => v.max(lo).min(hi),
    }
}

fn unary_derivative<T: Real>(kind: Unary<T>, x: T, y: T) -> T {
    match kind {
        Unary::Affine { scale, .. } => scale,
        Unary::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        Unary::LeakyRelu(slope) => {
            if x > T::zero() {
                T::one()
            } else {
                slope
            }
        }
        Unary::Tanh => T::one() - y * y,
        Unary::Sigmoid => y * (T::one() - y),
        Unary::Ln => T::one() / x,
        Unary::Abs => sign(x),
        Unary::Clamp { lo, hi } => {
            if x >= lo && x <= hi {
                T::one()
            } else {
                T::zero()
            }
        }
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Conv2d { .. } => "conv2d",
        Op::Upsample { .. } => "upsample_nearest",
        Op::Softmax { .. } => "softmax",
        Op::L2Normalize { .. } => "l2_normalize",
        Op::Unary { kind, .. } => match kind {
            Unary::Affine { .. } => "affine",
            Unary::Relu => "relu",
            Unary::LeakyRelu(_) => "leaky_relu",
            Unary::Tanh => "tanh",
            Unary::Sigmoid => "sigmoid",
            Unary::Ln => "ln",
            Unary::Abs => "abs",
            Unary::Clamp { .. } => "clamp",
        },
        Op::Binary { kind, .. } => match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        },
        Op::InstanceNorm { .. } => "instance_norm",
        Op::Concat { .. } => "concat_channels",
        Op::Sum { .. } => "sum",
        Op::Mean { .. } => "mean",
        Op::MeanAbsDiff { .. } => "mean_abs_diff",
        Op::Reshape { .. } => "reshape",
        Op::MatMul { .. } => "matmul",
        Op::Unfold { .. } => "unfold",
        Op::Fold { .. } => "fold",
    }
}

fn check_broadcast(op: &'static str, a: [usize; 4], b: [usize; 4]) -> Result<()> {
    for (d, (&x, &y)) in a.iter().zip(&b).enumerate() {
        if x != y && y != 1 {
            let axis = ["batch", "channel", "height", "width"][d];
            return Err(shape_err(
                op,
                format!("{axis} dimension {y} cannot broadcast to {x} ({b:?} vs {a:?})"),
            ));
        }
    }
    Ok(())
}

/// Calls `f(index_in_a, index_in_b)` for every element of `a`'s shape.
fn for_each_broadcast(a: [usize; 4], b: [usize; 4], mut f: impl FnMut(usize, usize)) {
    let pick = |i: usize, d: usize| if b[d] == 1 { 0 } else { i };
    let mut ia = 0;
    for n in 0..a[0] {
        for c in 0..a[1] {
            for h in 0..a[2] {
                let row = ((pick(n, 0) * b[1] + pick(c, 1)) * b[2] + pick(h, 2)) * b[3];
                for w in 0..a[3] {
                    f(ia, row + pick(w, 3));
                    ia += 1;
                }
            }
        }
    }
}

/// Index sequence of one slice along an axis.
#[derive(Clone)]
struct SliceIdx {
    next: usize,
    stride: usize,
    left: usize,
}

impl Iterator for SliceIdx {
    type Item = usize;
    fn next(&mut self) -> Option<usize> {
        if self.left == 0 {
            return None;
        }
        let i = self.next;
        self.next += self.stride;
        self.left -= 1;
        Some(i)
    }
}

fn for_each_slice(shape: [usize; 4], axis: Axis, mut f: impl FnMut(SliceIdx)) {
    let [n, c, h, w] = shape;
    let (len, stride, outer, inner) = match axis {
        Axis::Channel => (c, h * w, n, h * w),
        Axis::Height => (h, w, n * c, w),
        Axis::Width => (w, 1, n * c * h, 1),
    };
    for o in 0..outer {
        for i in 0..inner {
            f(SliceIdx { next: o * len * stride + i, stride, left: len });
        }
    }
}
