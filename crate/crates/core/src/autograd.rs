//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is an append-only tape. Every operation evaluates eagerly,
//! stores its output and enough context to run the adjoint, and returns a
//! [`Var`] handle. [`Graph::backward`] walks the tape in reverse and returns
//! the gradient of a scalar with respect to every node that needs one.
//!
//! All arithmetic is `f64` and single-threaded, so a given sequence of ops is
//! bit-reproducible.

use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::{numel, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy)]
enum UnaryKind {
    Neg,
    Scale(f64),
    AddConst(f64),
    Sigmoid,
    Relu,
    LeakyRelu(f64),
    Elu,
    Silu,
    Exp,
    Ln,
    LogCosh,
    Square,
    Clamp(f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Min,
}

enum Op {
    Leaf,
    Param,
    Binary { kind: BinKind, a: Var, b: Var },
    Unary { kind: UnaryKind, x: Var },
    SumTo { x: Var },
    MaxChannel { x: Var, argmax: Vec<usize> },
    Conv2d { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Pool3 { x: Var, source: Vec<usize> },
    Resize { x: Var },
    AdaptiveAvg { x: Var },
    Concat { xs: Vec<Var> },
    Reshape { x: Var },
    Transpose { x: Var },
    Matmul { a: Var, b: Var },
    SelectBatch { x: Var, index: usize },
    StackBatch { xs: Vec<Var> },
    SoftmaxRows { x: Var },
    InstanceNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

pub struct Graph<'s> {
    store: Option<&'s ParamStore>,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl Default for Graph<'static> {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph<'static> {
    /// A graph without parameters, for pure tensor expressions.
    pub fn new() -> Self {
        Graph {
            store: None,
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }
}

impl<'s> Graph<'s> {
    pub fn with_params(store: &'s ParamStore) -> Self {
        Graph {
            store: Some(store),
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf whose gradient is not tracked.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable leaf.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// The current value of a stored parameter as a differentiable leaf.
    /// Repeated calls for one id return the same variable.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let store = self
            .store
            .expect("Graph::param called on a graph without a parameter store");
        let t = store.get(id).clone();
        let v = self.push(t, Op::Param, true);
        self.params.insert(id, v);
        v
    }

    /// Gradients for every parameter used in this graph, sorted by id.
    pub fn param_grads(&self, grads: &Grads) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = self
            .params
            .iter()
            .map(|(&id, &v)| {
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.shape(v)));
                (id, g)
            })
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    // ---------------------------------------------------------------- binary

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let plan = BroadcastPlan::new(self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let f = |x: f64, y: f64| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
            BinKind::Div => x / y,
        };
        let out: Vec<f64> = if self.shape(a) == self.shape(b) {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut out = vec![0.0; numel(&plan.out)];
            plan.for_each(|o, ia, ib| out[o] = f(av[ia], bv[ib]));
            out
        };
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            Tensor::from_parts(plan.out, out),
            Op::Binary { kind, a, b },
            ng,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, a, b)
    }

    // ----------------------------------------------------------------- unary

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let out = self.value(x).map(|v| unary_forward(kind, v));
        let ng = self.ng(x);
        self.push(out, Op::Unary { kind, x }, ng)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Neg, x)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.unary(UnaryKind::Scale(factor), x)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(UnaryKind::AddConst(c), x)
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let n = self.scale(x, -1.0);
        self.add_scalar(n, 1.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(UnaryKind::LeakyRelu(slope), x)
    }

    pub fn elu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Elu, x)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Silu, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Ln, x)
    }

    pub fn log_cosh(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::LogCosh, x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Square, x)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(UnaryKind::Clamp(lo, hi), x)
    }

    // ------------------------------------------------------------ reductions

    /// Sums `x` down to `shape`, which must be broadcast-compatible with it.
    pub fn sum_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let plan = BroadcastPlan::new(&xs, shape)?;
        if plan.out != xs {
            return Err(Error::Shape(format!("cannot sum {xs:?} to {shape:?}")));
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; numel(shape)];
        plan.for_each(|o, _, ib| out[ib] += xv[o]);
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::from_parts(shape.to_vec(), out),
            Op::SumTo { x },
            ng,
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let ones = vec![1; self.shape(x).len()];
        self.sum_to(x, &ones)
            .expect("reducing to all-ones shape is always valid")
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Per-sample per-channel spatial mean of an `N×C×H×W` tensor, `N×C×1×1`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let s = self.sum_to(x, &[n, c, 1, 1])?;
        Ok(self.scale(s, 1.0 / (h * w) as f64))
    }

    /// Channel-wise maximum of `N×C×H×W`, keeping a singleton channel axis.
    pub fn max_channel(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let xv = self.value(x).data();
        let hw = h * w;
        let mut out = vec![0.0; n * hw];
        let mut argmax = vec![0usize; n * hw];
        for b in 0..n {
            for p in 0..hw {
                let mut best = f64::NEG_INFINITY;
                let mut idx = 0;
                for ch in 0..c {
                    let i = (b * c + ch) * hw + p;
                    if xv[i] > best {
                        best = xv[i];
                        idx = i;
                    }
                }
                out[b * hw + p] = best;
                argmax[b * hw + p] = idx;
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::from_parts(vec![n, 1, h, w], out),
            Op::MaxChannel { x, argmax },
            ng,
        ))
    }

    // --------------------------------------------------------- convolutions

    /// 2-D cross-correlation with zero padding. `w` is `O×(C/groups)×kh×kw`,
    /// `b` (if given) has `O` elements.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (o, cg, kh, kw) = self.value(w).dims4()?;
        let g = spec.groups.max(1);
        if c % g != 0 || o % g != 0 || c / g != cg {
            return Err(Error::Shape(format!(
                "conv2d: input channels {c}, weight {:?}, groups {g}",
                self.shape(w)
            )));
        }
        if let Some(b) = b {
            if self.value(b).len() != o {
                return Err(Error::Shape(format!(
                    "conv2d: bias has {} values for {o} outputs",
                    self.value(b).len()
                )));
            }
        }
        let geo = ConvGeom::new(h, wd, kh, kw, spec)?;
        let og = o / g;
        let k = cg * kh * kw;
        let p = geo.oh * geo.ow;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; n * o * p];
        let mut cols = vec![0.0; k * p];
        for bi in 0..n {
            for gi in 0..g {
                let xin = &xv[(bi * c + gi * cg) * h * wd..(bi * c + (gi + 1) * cg) * h * wd];
                let colref: &[f64] = if geo.is_pointwise() {
                    xin
                } else {
                    im2col(xin, cg, h, wd, &geo, &mut cols);
                    &cols
                };
                let wg = &wv[gi * og * k..(gi + 1) * og * k];
                let dst = &mut out[(bi * o + gi * og) * p..(bi * o + (gi + 1) * og) * p];
                gemm(og, k, p, wg, false, colref, false, dst, false);
            }
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            for bi in 0..n {
                for oc in 0..o {
                    let bias = bv[oc];
                    for v in &mut out[(bi * o + oc) * p..(bi * o + oc + 1) * p] {
                        *v += bias;
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(
            Tensor::from_parts(vec![n, o, geo.oh, geo.ow], out),
            Op::Conv2d { x, w, b, spec },
            ng,
        ))
    }

    /// 2×2 max pooling with stride 2. Spatial sizes must be even.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!(
                "max_pool2 needs even spatial size, got {h}×{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        for plane in 0..n * c {
            let base = plane * h * w;
            for r in 0..oh {
                for q in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut idx = 0;
                    for (dr, dq) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * r + dr) * w + 2 * q + dq;
                        if xv[i] > best {
                            best = xv[i];
                            idx = i;
                        }
                    }
                    let o = plane * oh * ow + r * ow + q;
                    out[o] = best;
                    argmax[o] = idx;
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::from_parts(vec![n, c, oh, ow], out),
            Op::MaxPool2 { x, argmax },
            ng,
        ))
    }

    /// 3×3, stride-1 max or min pooling with replicated borders; output has the
    /// input's shape. Ties resolve to the first element in raster order.
    pub fn pool3(&mut self, x: Var, kind: PoolKind) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        let mut source = vec![0usize; xv.len()];
        for plane in 0..n * c {
            let base = plane * h * w;
            for r in 0..h {
                let rows = [r.saturating_sub(1), r, (r + 1).min(h - 1)];
                for q in 0..w {
                    let cols = [q.saturating_sub(1), q, (q + 1).min(w - 1)];
                    let mut best = match kind {
                        PoolKind::Max => f64::NEG_INFINITY,
                        PoolKind::Min => f64::INFINITY,
                    };
                    let mut idx = 0;
                    for &rr in &rows {
                        for &qq in &cols {
                            let i = base + rr * w + qq;
                            let better = match kind {
                                PoolKind::Max => xv[i] > best,
                                PoolKind::Min => xv[i] < best,
                            };
                            if better {
                                best = xv[i];
                                idx = i;
                            }
                        }
                    }
                    out[base + r * w + q] = best;
                    source[base + r * w + q] = idx;
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::from_parts(vec![n, c, h, w], out),
            Op::Pool3 { x, source },
            ng,
        ))
    }

    /// Bilinear resampling to `oh×ow` with half-pixel centers (no corner alignment).
    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if oh == h && ow == w {
            // Half-pixel bilinear at unit scale samples exactly on input pixels.
            let t = self.value(x).clone();
            let ng = self.ng(x);
            return Ok(self.push(t, Op::Reshape { x }, ng));
        }
        let ry = bilinear_taps(h, oh);
        let rx = bilinear_taps(w, ow);
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            let src = &xv[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for (r, ty) in ry.iter().enumerate() {
                for (q, tx) in rx.iter().enumerate() {
                    dst[r * ow + q] = ty.w0 * (tx.w0 * src[ty.i0 * w + tx.i0] + tx.w1 * src[ty.i0 * w + tx.i1])
                        + ty.w1 * (tx.w0 * src[ty.i1 * w + tx.i0] + tx.w1 * src[ty.i1 * w + tx.i1]);
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::from_parts(vec![n, c, oh, ow], out),
            Op::Resize { x },
            ng,
        ))
    }

    /// Adaptive average pooling with floor/ceil bin edges.
    pub fn adaptive_avg_pool(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if oh == 0 || ow == 0 || oh > h || ow > w {
            return Err(Error::Shape(format!(
                "adaptive pool {h}×{w} -> {oh}×{ow} is not a reduction"
            )));
        }
        let by = adaptive_bins(h, oh);
        let bx = adaptive_bins(w, ow);
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            let src = &xv[plane * h * w..(plane + 1) * h * w];
            for (r, &(y0, y1)) in by.iter().enumerate() {
                for (q, &(x0, x1)) in bx.iter().enumerate() {
                    let mut s = 0.0;
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            s += src[yy * w + xx];
                        }
                    }
                    out[plane * oh * ow + r * ow + q] = s / ((y1 - y0) * (x1 - x0)) as f64;
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::from_parts(vec![n, c, oh, ow], out),
            Op::AdaptiveAvg { x },
            ng,
        ))
    }

    // -------------------------------------------------------------- layout

    /// Concatenation along the channel axis of 4-D tensors.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let (n, _, h, w) = self.value(first).dims4()?;
        let mut ctot = 0;
        for &v in xs {
            let (n2, c2, h2, w2) = self.value(v).dims4()?;
            if (n2, h2, w2) != (n, h, w) {
                return Err(Error::Shape(format!(
                    "concat mismatch {:?} vs {:?}",
                    self.shape(v),
                    self.shape(first)
                )));
            }
            ctot += c2;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * ctot * hw);
        for b in 0..n {
            for &v in xs {
                let t = self.value(v);
                let c = t.shape()[1];
                out.extend_from_slice(&t.data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        let ng = xs.iter().any(|&v| self.ng(v));
        Ok(self.push(
            Tensor::from_parts(vec![n, ctot, h, w], out),
            Op::Concat { xs: xs.to_vec() },
            ng,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape { x }, ng))
    }

    /// Transpose of a 2-D matrix.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = dims2(t)?;
        let out = transpose_data(t.data(), r, c);
        let ng = self.ng(x);
        Ok(self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose { x }, ng))
    }

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a))?;
        let (k2, n) = dims2(self.value(b))?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul {m}×{k} · {k2}×{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::Matmul { a, b }, ng))
    }

    /// Item `index` along the leading axis, keeping a leading 1.
    pub fn select_batch(&mut self, x: Var, index: usize) -> Result<Var> {
        let lead = self.shape(x)[0];
        if index >= lead {
            return Err(Error::Shape(format!("batch index {index} of {lead}")));
        }
        let t = self.value(x).batch_item(index);
        let ng = self.ng(x);
        Ok(self.push(t, Op::SelectBatch { x, index }, ng))
    }

    pub fn stack_batch(&mut self, xs: &[Var]) -> Result<Var> {
        let items: Vec<Tensor> = xs.iter().map(|&v| self.value(v).clone()).collect();
        let t = Tensor::stack_batch(&items)?;
        let ng = xs.iter().any(|&v| self.ng(v));
        Ok(self.push(t, Op::StackBatch { xs: xs.to_vec() }, ng))
    }

    /// Row-wise softmax of a 2-D matrix. With a mask (`true` = allowed,
    /// row-major, same size) disallowed entries receive exactly zero weight,
    /// equivalent to adding `-inf` before the softmax. Each row needs at least
    /// one allowed entry.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<Rc<Vec<bool>>>) -> Result<Var> {
        let (r, c) = dims2(self.value(x))?;
        if let Some(m) = &mask {
            if m.len() != r * c {
                return Err(Error::Shape("softmax mask size mismatch".into()));
            }
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let allowed = |j: usize| mask.as_ref().is_none_or(|m| m[i * c + j]);
            let row = &xv[i * c..(i + 1) * c];
            let mut mx = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if allowed(j) && v > mx {
                    mx = v;
                }
            }
            if mx == f64::NEG_INFINITY {
                return Err(Error::Shape(format!("softmax row {i} has no allowed entry")));
            }
            let mut s = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if allowed(j) {
                    let e = (v - mx).exp();
                    out[i * c + j] = e;
                    s += e;
                }
            }
            for o in &mut out[i * c..(i + 1) * c] {
                *o /= s;
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::from_parts(vec![r, c], out),
            Op::SoftmaxRows { x },
            ng,
        ))
    }

    /// Normalises every `(sample, channel)` plane of `x` to zero mean and unit
    /// variance, then applies per-channel `gamma` and `beta` (`C` values each).
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::Shape(format!(
                "instance_norm: {c} channels but gamma {:?}, beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let hw = h * w;
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; n * c];
        let mut out = vec![0.0; xv.len()];
        for plane in 0..n * c {
            let ch = plane % c;
            let r = plane * hw..(plane + 1) * hw;
            let src = &xv[r.clone()];
            let mean = src.iter().sum::<f64>() / hw as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[plane] = is;
            for ((xh, o), &v) in xhat[r.clone()].iter_mut().zip(&mut out[r]).zip(src) {
                *xh = (v - mean) * is;
                *o = gv[ch] * *xh + bv[ch];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            Tensor::from_parts(vec![n, c, h, w], out),
            Op::InstanceNorm { x, gamma, beta, xhat, inv_std },
            ng,
        ))
    }

    // -------------------------------------------------------------- backward

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Binary { kind, a, b } => {
                let (a, b) = (*a, *b);
                let plan = BroadcastPlan::new(self.shape(a), self.shape(b))
                    .expect("plan was valid in forward");
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if self.shape(a) == self.shape(b) {
                    if self.ng(a) {
                        let ga: Vec<f64> = match kind {
                            BinKind::Add | BinKind::Sub => gd.to_vec(),
                            BinKind::Mul => gd.iter().zip(bv).map(|(g, y)| g * y).collect(),
                            BinKind::Div => gd.iter().zip(bv).map(|(g, y)| g / y).collect(),
                        };
                        self.accumulate(grads, a, Tensor::from_parts(self.shape(a).to_vec(), ga));
                    }
                    if self.ng(b) {
                        let gb: Vec<f64> = match kind {
                            BinKind::Add => gd.to_vec(),
                            BinKind::Sub => gd.iter().map(|g| -g).collect(),
                            BinKind::Mul => gd.iter().zip(av).map(|(g, x)| g * x).collect(),
                            BinKind::Div => gd.iter().zip(av).zip(bv).map(|((g, x), y)| -g * x / (y * y)).collect(),
                        };
                        self.accumulate(grads, b, Tensor::from_parts(self.shape(b).to_vec(), gb));
                    }
                    return;
                }
                if self.ng(a) {
                    let mut ga = vec![0.0; av.len()];
                    plan.for_each(|o, ia, ib| {
                        ga[ia] += gd[o]
                            * match kind {
                                BinKind::Add | BinKind::Sub => 1.0,
                                BinKind::Mul => bv[ib],
                                BinKind::Div => 1.0 / bv[ib],
                            };
                    });
                    self.accumulate(grads, a, Tensor::from_parts(self.shape(a).to_vec(), ga));
                }
                if self.ng(b) {
                    let mut gb = vec![0.0; bv.len()];
                    plan.for_each(|o, ia, ib| {
                        gb[ib] += gd[o]
                            * match kind {
                                BinKind::Add => 1.0,
                                BinKind::Sub => -1.0,
                                BinKind::Mul => av[ia],
                                BinKind::Div => -av[ia] / (bv[ib] * bv[ib]),
                            };
                    });
                    self.accumulate(grads, b, Tensor::from_parts(self.shape(b).to_vec(), gb));
                }
            }
            Op::Unary { kind, x } => {
                let xv = self.value(*x).data();
                let yv = node.value.data();
                let gx: Vec<f64> = (0..xv.len())
                    .map(|j| gd[j] * unary_derivative(*kind, xv[j], yv[j]))
                    .collect();
                self.accumulate(grads, *x, Tensor::from_parts(self.shape(*x).to_vec(), gx));
            }
            Op::SumTo { x } => {
                let xs = self.shape(*x).to_vec();
                let plan = BroadcastPlan::new(&xs, node.value.shape()).expect("valid");
                let mut gx = vec![0.0; numel(&xs)];
                plan.for_each(|o, _, ib| gx[o] = gd[ib]);
                self.accumulate(grads, *x, Tensor::from_parts(xs, gx));
            }
            Op::MaxChannel { x, argmax } | Op::MaxPool2 { x, argmax } => {
                let mut gx = vec![0.0; self.value(*x).len()];
                for (o, &src) in argmax.iter().enumerate() {
                    gx[src] += gd[o];
                }
                self.accumulate(grads, *x, Tensor::from_parts(self.shape(*x).to_vec(), gx));
            }
            Op::Pool3 { x, source } => {
                let mut gx = vec![0.0; self.value(*x).len()];
                for (o, &src) in source.iter().enumerate() {
                    gx[src] += gd[o];
                }
                self.accumulate(grads, *x, Tensor::from_parts(self.shape(*x).to_vec(), gx));
            }
            Op::Conv2d { x, w, b, spec } => self.conv_backward(*x, *w, *b, *spec, g, grads),
            Op::Resize { x } => {
                let (n, c, h, w) = self.value(*x).dims4().expect("4-D");
                let (_, _, oh, ow) = node.value.dims4().expect("4-D");
                let ry = bilinear_taps(h, oh);
                let rx = bilinear_taps(w, ow);
                let mut gx = vec![0.0; n * c * h * w];
                for plane in 0..n * c {
                    let src = &gd[plane * oh * ow..(plane + 1) * oh * ow];
                    let dst = &mut gx[plane * h * w..(plane + 1) * h * w];
                    for (r, ty) in ry.iter().enumerate() {
                        for (q, tx) in rx.iter().enumerate() {
                            let v = src[r * ow + q];
                            dst[ty.i0 * w + tx.i0] += ty.w0 * tx.w0 * v;
                            dst[ty.i0 * w + tx.i1] += ty.w0 * tx.w1 * v;
                            dst[ty.i1 * w + tx.i0] += ty.w1 * tx.w0 * v;
                            dst[ty.i1 * w + tx.i1] += ty.w1 * tx.w1 * v;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(vec![n, c, h, w], gx));
            }
            Op::AdaptiveAvg { x } => {
                let (n, c, h, w) = self.value(*x).dims4().expect("4-D");
                let (_, _, oh, ow) = node.value.dims4().expect("4-D");
                let by = adaptive_bins(h, oh);
                let bx = adaptive_bins(w, ow);
                let mut gx = vec![0.0; n * c * h * w];
                for plane in 0..n * c {
                    let dst = &mut gx[plane * h * w..(plane + 1) * h * w];
                    for (r, &(y0, y1)) in by.iter().enumerate() {
                        for (q, &(x0, x1)) in bx.iter().enumerate() {
                            let v = gd[plane * oh * ow + r * ow + q]
                                / ((y1 - y0) * (x1 - x0)) as f64;
                            for yy in y0..y1 {
                                for xx in x0..x1 {
                                    dst[yy * w + xx] += v;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(vec![n, c, h, w], gx));
            }
            Op::Concat { xs } => {
                let (n, ctot, h, w) = node.value.dims4().expect("4-D");
                let hw = h * w;
                let mut off = 0;
                for &v in xs {
                    let c = self.shape(v)[1];
                    if self.ng(v) {
                        let mut gv = Vec::with_capacity(n * c * hw);
                        for b in 0..n {
                            let start = (b * ctot + off) * hw;
                            gv.extend_from_slice(&gd[start..start + c * hw]);
                        }
                        self.accumulate(grads, v, Tensor::from_parts(vec![n, c, h, w], gv));
                    }
                    off += c;
                }
            }
            Op::Reshape { x } => {
                let t = Tensor::from_parts(self.shape(*x).to_vec(), gd.to_vec());
                self.accumulate(grads, *x, t);
            }
            Op::Transpose { x } => {
                let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                let t = Tensor::from_parts(vec![c, r], transpose_data(gd, r, c));
                self.accumulate(grads, *x, t);
            }
            Op::Matmul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.ng(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, self.value(*b).data(), true, &mut ga, false);
                    self.accumulate(grads, *a, Tensor::from_parts(vec![m, k], ga));
                }
                if self.ng(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, self.value(*a).data(), true, gd, false, &mut gb, false);
                    self.accumulate(grads, *b, Tensor::from_parts(vec![k, n], gb));
                }
            }
            Op::SelectBatch { x, index } => {
                let xs = self.shape(*x).to_vec();
                let per = gd.len();
                let mut gx = vec![0.0; numel(&xs)];
                gx[index * per..(index + 1) * per].copy_from_slice(gd);
                self.accumulate(grads, *x, Tensor::from_parts(xs, gx));
            }
            Op::StackBatch { xs } => {
                let mut off = 0;
                for &v in xs {
                    let len = self.value(v).len();
                    let t = Tensor::from_parts(self.shape(v).to_vec(), gd[off..off + len].to_vec());
                    self.accumulate(grads, v, t);
                    off += len;
                }
            }
            Op::InstanceNorm { x, gamma, beta, xhat, inv_std } => {
                let (n, c, h, w) = self.value(*x).dims4().expect("4-D");
                let hw = h * w;
                let gv = self.value(*gamma).data();
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                let mut gx = vec![0.0; n * c * hw];
                for plane in 0..n * c {
                    let ch = plane % c;
                    let r = plane * hw..(plane + 1) * hw;
                    let (dy, xh) = (&gd[r.clone()], &xhat[r.clone()]);
                    let sum_dy: f64 = dy.iter().sum();
                    let sum_dy_xh: f64 = dy.iter().zip(xh).map(|(a, b)| a * b).sum();
                    gb[ch] += sum_dy;
                    gg[ch] += sum_dy_xh;
                    let k = gv[ch] * inv_std[plane];
                    let (m1, m2) = (sum_dy / hw as f64, sum_dy_xh / hw as f64);
                    for ((o, &d), &xv) in gx[r].iter_mut().zip(dy).zip(xh) {
                        *o = k * (d - m1 - xv * m2);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(vec![n, c, h, w], gx));
                self.accumulate(grads, *gamma, Tensor::from_parts(self.shape(*gamma).to_vec(), gg));
                self.accumulate(grads, *beta, Tensor::from_parts(self.shape(*beta).to_vec(), gb));
            }
            Op::SoftmaxRows { x, .. } => {
                let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                let y = node.value.data();
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    let row = i * c..(i + 1) * c;
                    let dot: f64 = y[row.clone()].iter().zip(&gd[row.clone()]).map(|(a, b)| a * b).sum();
                    for j in row {
                        gx[j] = y[j] * (gd[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(vec![r, c], gx));
            }
        }
    }

    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (n, c, h, wd) = self.value(x).dims4().expect("4-D");
        let (o, cg, kh, kw) = self.value(w).dims4().expect("4-D");
        let gr = spec.groups.max(1);
        let geo = ConvGeom::new(h, wd, kh, kw, spec).expect("valid in forward");
        let og = o / gr;
        let k = cg * kh * kw;
        let p = geo.oh * geo.ow;
        let gd = g.data();
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let need_x = self.ng(x);
        let need_w = self.ng(w);
        let mut gx = need_x.then(|| vec![0.0; xv.len()]);
        let mut gw = need_w.then(|| vec![0.0; wv.len()]);
        let mut cols = vec![0.0; k * p];
        let mut dcols = vec![0.0; k * p];
        for bi in 0..n {
            for gi in 0..gr {
                let xr = (bi * c + gi * cg) * h * wd..(bi * c + (gi + 1) * cg) * h * wd;
                let dy = &gd[(bi * o + gi * og) * p..(bi * o + (gi + 1) * og) * p];
                let wg = &wv[gi * og * k..(gi + 1) * og * k];
                if let Some(gw) = gw.as_mut() {
                    let colref: &[f64] = if geo.is_pointwise() {
                        &xv[xr.clone()]
                    } else {
                        im2col(&xv[xr.clone()], cg, h, wd, &geo, &mut cols);
                        &cols
                    };
                    gemm(og, p, k, dy, false, colref, true, &mut gw[gi * og * k..(gi + 1) * og * k], true);
                }
                if let Some(gx) = gx.as_mut() {
                    if geo.is_pointwise() {
                        gemm(k, og, p, wg, true, dy, false, &mut gx[xr], true);
                    } else {
                        gemm(k, og, p, wg, true, dy, false, &mut dcols, false);
                        col2im_add(&dcols, cg, h, wd, &geo, &mut gx[xr]);
                    }
                }
            }
        }
        if let Some(gx) = gx {
            self.accumulate(grads, x, Tensor::from_parts(vec![n, c, h, wd], gx));
        }
        if let Some(gw) = gw {
            self.accumulate(grads, w, Tensor::from_parts(vec![o, cg, kh, kw], gw));
        }
        if let Some(b) = b {
            if self.ng(b) {
                let mut gb = vec![0.0; o];
                for bi in 0..n {
                    for (oc, gbv) in gb.iter_mut().enumerate() {
                        *gbv += gd[(bi * o + oc) * p..(bi * o + oc + 1) * p].iter().sum::<f64>();
                    }
                }
                self.accumulate(grads, b, Tensor::from_parts(vec![o], gb));
            }
        }
    }
}

fn unary_forward(kind: UnaryKind, v: f64) -> f64 {
    match kind {
        UnaryKind::Neg => -v,
        UnaryKind::Scale(f) => v * f,
        UnaryKind::AddConst(c) => v + c,
        UnaryKind::Sigmoid => sigmoid(v),
        UnaryKind::Relu => {
            if v > 0.0 {
                v
            } else {
                0.0
            }
        }
        UnaryKind::LeakyRelu(s) => {
            if v > 0.0 {
                v
            } else {
                s * v
            }
        }
        UnaryKind::Elu => {
            if v > 0.0 {
                v
            } else {
                v.exp_m1()
            }
        }
        UnaryKind::Silu => v * sigmoid(v),
        UnaryKind::Exp => v.exp(),
        UnaryKind::Ln => v.ln(),
        UnaryKind::LogCosh => {
            let a = v.abs();
            a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
        }
        UnaryKind::Square => v * v,
        UnaryKind::Clamp(lo, hi) => v.clamp(lo, hi),
    }
}

fn unary_derivative(kind: UnaryKind, x: f64, y: f64) -> f64 {
    match kind {
        UnaryKind::Neg => -1.0,
        UnaryKind::Scale(f) => f,
        UnaryKind::AddConst(_) => 1.0,
        UnaryKind::Sigmoid => y * (1.0 - y),
        UnaryKind::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        UnaryKind::LeakyRelu(s) => {
            if x > 0.0 {
                1.0
            } else {
                s
            }
        }
        UnaryKind::Elu => {
            if x > 0.0 {
                1.0
            } else {
                y + 1.0
            }
        }
        UnaryKind::Silu => {
            let s = sigmoid(x);
            s + x * s * (1.0 - s)
        }
        UnaryKind::Exp => y,
        UnaryKind::Ln => 1.0 / x,
        UnaryKind::LogCosh => x.tanh(),
        UnaryKind::Square => 2.0 * x,
        UnaryKind::Clamp(lo, hi) => {
            if x >= lo && x <= hi {
                1.0
            } else {
                0.0
            }
        }
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

fn dims2(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Shape(format!("expected a matrix, got {s:?}"))),
    }
}

fn transpose_data(d: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = d[i * c + j];
        }
    }
    out
}

/// `c = op(a)·op(b)` (or `c += ...` with `accumulate`), row-major, where
/// `op(a)` is `m×k` and `op(b)` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the kernel touches
    // (rows < m, cols < n, inner < k with the strides chosen to match the
    // row-major layouts of lengths m*k, k*n and m*n).
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
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct ConvGeom {
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(h: usize, w: usize, kh: usize, kw: usize, spec: ConvSpec) -> Result<Self> {
        let stride = spec.stride.max(1);
        let pad = spec.padding;
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::Shape(format!(
                "conv kernel {kh}×{kw} larger than padded input {h}×{w}"
            )));
        }
        Ok(Self {
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `[lo, hi)` whose tap `k` lands inside an input row of
/// length `len`.
fn valid_range(k: usize, len: usize, out: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if len + pad > k { ((len + pad - k - 1) / stride + 1).min(out) } else { 0 };
    (lo.min(hi), hi)
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize, geo: &ConvGeom, cols: &mut [f64]) {
    debug_assert_eq!((geo.h, geo.w), (h, w));
    let p = geo.oh * geo.ow;
    let s = geo.stride;
    for ch in 0..c {
        for ky in 0..geo.kh {
            let (ylo, yhi) = valid_range(ky, h, geo.oh, s, geo.pad);
            for kx in 0..geo.kw {
                let (xlo, xhi) = valid_range(kx, w, geo.ow, s, geo.pad);
                let row = (ch * geo.kh + ky) * geo.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                dst[..ylo * geo.ow].fill(0.0);
                dst[yhi * geo.ow..].fill(0.0);
                for oy in ylo..yhi {
                    let iy = oy * s + ky - geo.pad;
                    let src = &x[(ch * h + iy) * w..(ch * h + iy + 1) * w];
                    let drow = &mut dst[oy * geo.ow..(oy + 1) * geo.ow];
                    drow[..xlo].fill(0.0);
                    drow[xhi..].fill(0.0);
                    if s == 1 {
                        let i0 = xlo + kx - geo.pad;
                        drow[xlo..xhi].copy_from_slice(&src[i0..i0 + (xhi - xlo)]);
                    } else {
                        for ox in xlo..xhi {
                            drow[ox] = src[ox * s + kx - geo.pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], c: usize, h: usize, w: usize, geo: &ConvGeom, x: &mut [f64]) {
    let p = geo.oh * geo.ow;
    let s = geo.stride;
    for ch in 0..c {
        for ky in 0..geo.kh {
            let (ylo, yhi) = valid_range(ky, h, geo.oh, s, geo.pad);
            for kx in 0..geo.kw {
                let (xlo, xhi) = valid_range(kx, w, geo.ow, s, geo.pad);
                let row = (ch * geo.kh + ky) * geo.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in ylo..yhi {
                    let iy = oy * s + ky - geo.pad;
                    let dst = &mut x[(ch * h + iy) * w..(ch * h + iy + 1) * w];
                    let srow = &src[oy * geo.ow..(oy + 1) * geo.ow];
                    if s == 1 {
                        let i0 = xlo + kx - geo.pad;
                        for (d, v) in dst[i0..i0 + (xhi - xlo)].iter_mut().zip(&srow[xlo..xhi]) {
                            *d += v;
                        }
                    } else {
                        for ox in xlo..xhi {
                            dst[ox * s + kx - geo.pad] += srow[ox];
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Tap {
    i0: usize,
    i1: usize,
    w0: f64,
    w1: f64,
}

fn bilinear_taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let l1 = src - i0 as f64;
            let l1 = if i1 == i0 { 0.0 } else { l1 };
            Tap {
                i0,
                i1,
                w0: 1.0 - l1,
                w1: l1,
            }
        })
        .collect()
}

pub(crate) fn adaptive_bins(input: usize, output: usize) -> Vec<(usize, usize)> {
    (0..output)
        .map(|i| {
            let start = i * input / output;
            let end = ((i + 1) * input).div_ceil(output);
            (start, end)
        })
        .collect()
}

/// NumPy-style broadcasting between two equal-rank shapes.
struct BroadcastPlan {
    out: Vec<usize>,
    sa: Vec<usize>,
    sb: Vec<usize>,
}

impl BroadcastPlan {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::Shape(format!("rank mismatch {a:?} vs {b:?}")));
        }
        let mut out = Vec::with_capacity(a.len());
        for (&x, &y) in a.iter().zip(b) {
            out.push(match (x, y) {
                _ if x == y => x,
                (1, _) => y,
                (_, 1) => x,
                _ => return Err(Error::Shape(format!("cannot broadcast {a:?} with {b:?}"))),
            });
        }
        Ok(Self {
            sa: broadcast_strides(a),
            sb: broadcast_strides(b),
            out,
        })
    }

    /// Calls `f(out_index, a_index, b_index)` for every output element in order.
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let total = numel(&self.out);
        if total == 0 {
            return;
        }
        let nd = self.out.len();
        if nd == 0 {
            f(0, 0, 0);
            return;
        }
        let last = self.out[nd - 1];
        let (ia_step, ib_step) = (self.sa[nd - 1], self.sb[nd - 1]);
        let mut idx = vec![0usize; nd.saturating_sub(1)];
        let mut o = 0;
        loop {
            let mut ia = 0;
            let mut ib = 0;
            for (d, &i) in idx.iter().enumerate() {
                ia += i * self.sa[d];
                ib += i * self.sb[d];
            }
            for _ in 0..last {
                f(o, ia, ib);
                o += 1;
                ia += ia_step;
                ib += ib_step;
            }
            // odometer over the leading dims
            let mut d = nd - 1;
            loop {
                if d == 0 {
                    return;
                }
                d -= 1;
                idx[d] += 1;
                if idx[d] < self.out[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
    }
}

fn broadcast_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = if shape[d] == 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of d(build(x))/dx for a scalar-valued builder.
    fn check_input_grad(x0: Tensor, build: impl Fn(&mut Graph, Var) -> Var) {
        let mut g = Graph::new();
        let x = g.input(x0.clone());
        let y = build(&mut g, x);
        let grads = g.backward(y).unwrap();
        let analytic = grads.get(x).unwrap().clone();
        let h = 1e-6;
        let mut num = vec![0.0; x0.len()];
        for i in 0..x0.len() {
            let mut plus = x0.clone();
            plus.data_mut()[i] += h;
            let mut minus = x0.clone();
            minus.data_mut()[i] -= h;
            let eval = |t: Tensor| {
                let mut g = Graph::new();
                let v = g.input(t);
                let y = build(&mut g, v);
                g.value(y).data()[0]
            };
            num[i] = (eval(plus) - eval(minus)) / (2.0 * h);
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&num)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let scale = analytic.l2_norm().max(num.iter().map(|v| v * v).sum::<f64>().sqrt()).max(1e-12);
        assert!(diff / scale < 1e-6, "relative gradient error {}", diff / scale);
    }

    fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = rand_tensor(&mut rng, g.shape(y));
        let w = g.constant(w);
        let p = g.mul(y, w).unwrap();
        g.sum_all(p)
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w0 = rand_tensor(&mut rng, &[4, 3, 3, 3]);
        let x0 = rand_tensor(&mut rng, &[2, 3, 5, 6]);
        for &(stride, padding) in &[(1, 1), (2, 1), (1, 0)] {
            let w_in = w0.clone();
            check_input_grad(x0.clone(), move |g, x| {
                let w = g.constant(w_in.clone());
                let y = g.conv2d(x, w, None, ConvSpec { stride, padding, groups: 1 }).unwrap();
                weighted_sum(g, y, 7)
            });
            let x_in = x0.clone();
            check_input_grad(w0.clone(), move |g, w| {
                let x = g.constant(x_in.clone());
                let y = g.conv2d(x, w, None, ConvSpec { stride, padding, groups: 1 }).unwrap();
                weighted_sum(g, y, 7)
            });
        }
    }

    #[test]
    fn grouped_and_pointwise_conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dw = rand_tensor(&mut rng, &[4, 1, 3, 3]);
        let pw = rand_tensor(&mut rng, &[3, 4, 1, 1]);
        let bias = rand_tensor(&mut rng, &[3]);
        check_input_grad(rand_tensor(&mut rng, &[2, 4, 4, 4]), move |g, x| {
            let dw = g.constant(dw.clone());
            let pw = g.constant(pw.clone());
            let b = g.input(bias.clone());
            let y = g.conv2d(x, dw, None, ConvSpec { stride: 1, padding: 1, groups: 4 }).unwrap();
            let y = g.conv2d(y, pw, Some(b), ConvSpec { stride: 1, padding: 0, groups: 1 }).unwrap();
            weighted_sum(g, y, 3)
        });
    }

    #[test]
    fn pooling_resize_and_layout_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        check_input_grad(rand_tensor(&mut rng, &[1, 2, 6, 6]), |g, x| {
            let a = g.max_pool2(x).unwrap();
            let a = g.resize_bilinear(a, 6, 6).unwrap();
            let b = g.pool3(x, PoolKind::Min).unwrap();
            let c = g.pool3(x, PoolKind::Max).unwrap();
            let d = g.adaptive_avg_pool(x, 4, 4).unwrap();
            let d = g.resize_bilinear(d, 5, 7).unwrap();
            let d = g.resize_bilinear(d, 6, 6).unwrap();
            let m = g.max_channel(x).unwrap();
            let cat = g.concat_channels(&[a, b, c, d, m]).unwrap();
            weighted_sum(g, cat, 11)
        });
    }

    #[test]
    fn instance_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gamma = rand_tensor(&mut rng, &[1, 3, 1, 1]);
        let beta = rand_tensor(&mut rng, &[1, 3, 1, 1]);
        let x0 = rand_tensor(&mut rng, &[2, 3, 4, 5]);
        let (g0, b0) = (gamma.clone(), beta.clone());
        check_input_grad(x0.clone(), move |g, x| {
            let (ga, be) = (g.constant(g0.clone()), g.constant(b0.clone()));
            let y = g.instance_norm(x, ga, be, 1e-5).unwrap();
            weighted_sum(g, y, 5)
        });
        let (x1, b1) = (x0.clone(), beta.clone());
        check_input_grad(gamma.clone(), move |g, ga| {
            let (x, be) = (g.constant(x1.clone()), g.constant(b1.clone()));
            let y = g.instance_norm(x, ga, be, 1e-5).unwrap();
            weighted_sum(g, y, 5)
        });
        check_input_grad(beta, move |g, be| {
            let (x, ga) = (g.constant(x0.clone()), g.constant(gamma.clone()));
            let y = g.instance_norm(x, ga, be, 1e-5).unwrap();
            weighted_sum(g, y, 5)
        });
    }

    #[test]
    fn matrix_and_softmax_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b0 = rand_tensor(&mut rng, &[3, 4]);
        let mask = Rc::new(vec![
            true, false, true, true, //
            true, true, false, false, //
            false, false, false, true, //
            true, true, true, true, //
            false, true, true, false,
        ]);
        check_input_grad(rand_tensor(&mut rng, &[5, 3]), move |g, a| {
            let b = g.constant(b0.clone());
            let p = g.matmul(a, b).unwrap();
            let s = g.softmax_rows(p, Some(mask.clone())).unwrap();
            let t = g.transpose(s).unwrap();
            let e = g.elu(t);
            weighted_sum(g, e, 5)
        });
    }

    #[test]
    fn unary_and_broadcast_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let col = Tensor::from_fn(&[1, 3, 1, 1], |i| 0.5 + i as f64);
        check_input_grad(rand_tensor(&mut rng, &[2, 3, 2, 2]), move |g, x| {
            let s = g.sigmoid(x);
            let l = g.leaky_relu(x, 0.2);
            let si = g.silu(x);
            let e = g.exp(x);
            let lc = g.log_cosh(x);
            let q = g.square(x);
            let sum = g.add(s, l).unwrap();
            let sum = g.add(sum, si).unwrap();
            let sum = g.add(sum, lc).unwrap();
            let sum = g.sub(sum, q).unwrap();
            let c = g.constant(col.clone());
            let d = g.div(e, c).unwrap();
            let d = g.mul(d, sum).unwrap();
            let pooled = g.global_avg_pool(d).unwrap();
            let pooled = g.add_scalar(pooled, 3.0);
            let lnv = g.ln(pooled);
            let bc = g.mul(x, lnv).unwrap();
            weighted_sum(g, bc, 9)
        });
    }

    #[test]
    fn masked_softmax_gives_exact_zeros() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 3], vec![5.0, -2.0, 1.0]).unwrap());
        let s = g
            .softmax_rows(x, Some(Rc::new(vec![true, false, true])))
            .unwrap();
        let v = g.value(s).data();
        assert_eq!(v[1], 0.0);
        assert!((v[0] + v[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn bilinear_matches_hand_values() {
        // 1×2 -> 1×4 upsample with half-pixel centers: [a, .75a+.25b, .25a+.75b, b]
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 1, 1, 2], vec![1.0, 3.0]).unwrap());
        let y = g.resize_bilinear(x, 1, 4).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 1.5, 2.5, 3.0]);
    }
}
