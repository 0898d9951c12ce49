//! Tape-based reverse-mode differentiation over exactly the operations the
//! camera network needs.
//!
//! A [`Graph`] borrows a [`ParamStore`] for the duration of one step. Nodes
//! are appended in evaluation order, so the tape is already topologically
//! sorted and [`Graph::backward`] walks it once in reverse. Parameter
//! gradients come back as a [`ParamGrads`] owned value, which lets the caller
//! drop the graph before handing the gradients to the optimizer.

mod kernels;
mod optim;
mod param;

use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Real, Result, Tensor};
use kernels::{BnCache, ConvGeom};

pub use optim::{lr_schedule, sgd_step, Sgd};
pub use param::{ParamGrads, ParamId, ParamRole, ParamStore, Parameter};

pub(crate) use kernels::{dot, softmax_rows};

/// Clamp applied to probabilities before taking logarithms.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batchnorm behaviour for one call.
#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a, T> {
    /// Normalize by batch statistics; the caller folds the returned
    /// [`BatchStats`] into its running estimates.
    Train { eps: f64 },
    /// Normalize by running statistics.
    Eval { mean: &'a [T], var: &'a [T], eps: f64 },
}

/// Biased per-channel statistics of one training batch plus the element count
/// per channel, so callers can form the unbiased variance.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

/// Log-loss applied to softmax probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `-(1/K) Σ_i [l_i ln p_i + (1-l_i) ln(1-p_i)]` per row.
    #[default]
    BceOverSoftmax,
    /// `-ln p_label` per row.
    CrossEntropy,
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv2d { x: NodeId, w: NodeId, b: NodeId, geom: ConvGeom },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, cache: BnCache<T>, dims: (usize, usize, usize) },
    Relu { x: NodeId },
    MaxPool { x: NodeId, argmax: Vec<usize> },
    Reshape { x: NodeId },
    Linear { a: NodeId, w: NodeId, b: NodeId, dims: (usize, usize, usize) },
    Softmax { x: NodeId, k: usize },
    LogLoss { p: NodeId, targets: Vec<Option<usize>>, scale: T, kind: LossKind },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    ConcatCols { parts: Vec<(NodeId, usize)> },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf | Op::Param(_) => Vec::new(),
            Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Relu { x } | Op::MaxPool { x, .. } | Op::Reshape { x } | Op::Softmax { x, .. } => vec![*x],
            Op::Linear { a, w, b, .. } => vec![*a, *w, *b],
            Op::LogLoss { p, .. } => vec![*p],
            Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::ConcatCols { parts } => parts.iter().map(|p| p.0).collect(),
        }
    }
}

struct Node<T> {
    op: Op<T>,
    value: Option<Tensor<T>>,
    shape: Vec<usize>,
    requires_grad: bool,
}

pub struct Graph<'p, T: Real> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
}

fn mismatch(op: &'static str, detail: alloc::string::String) -> Error {
    Error::ShapeMismatch { op, detail }
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self { params, nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        let node = &self.nodes[id.0];
        match (&node.op, &node.value) {
            (Op::Param(pid), _) => &self.params.get(*pid).tensor,
            (_, Some(v)) => v,
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Gradient of an input or intermediate node after [`Graph::backward`].
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.nodes[id.0].value.as_ref().and_then(|t| t.grad())
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, opname: &'static str) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: opname });
        }
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        let shape = value.shape().to_vec();
        self.nodes.push(Node { op, value: Some(value), shape, requires_grad });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Adds a constant or differentiable input.
    pub fn input(&mut self, t: Tensor<T>) -> Result<NodeId> {
        if !t.is_finite() {
            return Err(Error::NonFinite { op: "input" });
        }
        let requires_grad = t.requires_grad();
        let shape = t.shape().to_vec();
        self.nodes.push(Node { op: Op::Leaf, value: Some(t), shape, requires_grad });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        let shape = self.params.get(id).tensor.shape().to_vec();
        self.nodes.push(Node { op: Op::Param(id), value: None, shape, requires_grad: true });
        NodeId(self.nodes.len() - 1)
    }

    /// Cross-correlation of `x: N×C×H×W` with `w: F×C×kh×kw` plus bias `b: F`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 4 || ws.len() != 4 || bs.len() != 1 || xs[1] != ws[1] || bs[0] != ws[0] || stride == 0 {
            return Err(mismatch("conv2d", alloc::format!("x {xs:?} w {ws:?} b {bs:?} stride {stride}")));
        }
        let (kh, kw) = (ws[2], ws[3]);
        if kh > xs[2] + 2 * padding || kw > xs[3] + 2 * padding {
            return Err(mismatch("conv2d", alloc::format!("kernel {kh}x{kw} exceeds padded input {xs:?}")));
        }
        let geom = ConvGeom {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            f: ws[0],
            kh,
            kw,
            stride,
            pad: padding,
            ho: (xs[2] + 2 * padding - kh) / stride + 1,
            wo: (xs[3] + 2 * padding - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(self.value(x).values(), self.value(w).values(), self.value(b).values(), &geom);
        let t = Tensor::new(&[geom.n, geom.f, geom.ho, geom.wo], out)?;
        self.push(Op::Conv2d { x, w, b, geom }, t, "conv2d")
    }

    pub fn batchnorm2d(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mode: BnMode<'_, T>,
    ) -> Result<(NodeId, Option<BatchStats<T>>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || self.shape(gamma) != [xs[1]] || self.shape(beta) != [xs[1]] {
            return Err(mismatch("batchnorm2d", alloc::format!("x {xs:?}")));
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let (running, eps) = match mode {
            BnMode::Train { eps } => {
                if n < 2 {
                    return Err(Error::BatchTooSmall);
                }
                (None, eps)
            }
            BnMode::Eval { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(mismatch("batchnorm2d", alloc::format!("running stats for {c} channels")));
                }
                (Some((mean, var)), eps)
            }
        };
        let (y, cache, mean, var) = kernels::batchnorm_forward(
            self.value(x).values(),
            n,
            c,
            hw,
            self.value(gamma).values(),
            self.value(beta).values(),
            running,
            T::from_f64(eps),
        );
        let stats = cache.train.then(|| BatchStats { mean, var, count: n * hw });
        let t = Tensor::new(&xs, y)?;
        let id = self.push(Op::BatchNorm { x, gamma, beta, cache, dims: (n, c, hw) }, t, "batchnorm2d")?;
        Ok((id, stats))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let out: Vec<T> = v.values().iter().map(|&a| if a > T::zero() { a } else { T::zero() }).collect();
        let t = Tensor::new(v.shape(), out)?;
        self.push(Op::Relu { x }, t, "relu")
    }

    pub fn maxpool2d(&mut self, x: NodeId, kernel: usize, stride: usize) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || kernel == 0 || stride == 0 || kernel > xs[2] || kernel > xs[3] {
            return Err(mismatch("maxpool2d", alloc::format!("x {xs:?} kernel {kernel} stride {stride}")));
        }
        let (out, argmax) =
            kernels::maxpool_forward(self.value(x).values(), xs[0] * xs[1], xs[2], xs[3], kernel, stride);
        let shape = [xs[0], xs[1], (xs[2] - kernel) / stride + 1, (xs[3] - kernel) / stride + 1];
        let t = Tensor::new(&shape, out)?;
        self.push(Op::MaxPool { x, argmax }, t, "maxpool2d")
    }

    /// `N×C×H×W → N×CHW`.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.is_empty() {
            return Err(mismatch("flatten", "scalar input".into()));
        }
        let rest: usize = xs[1..].iter().product();
        let t = self.value(x).clone().reshape(&[xs[0], rest])?;
        self.push(Op::Reshape { x }, t, "flatten")
    }

    /// Same values under a new shape with the same element count.
    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push(Op::Reshape { x }, t, "reshape")
    }

    /// `a: N×D`, `w: O×D`, `b: O` → `N×O`.
    pub fn linear(&mut self, a: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (as_, ws, bs) = (self.shape(a).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        if as_.len() != 2 || ws.len() != 2 || bs.len() != 1 || as_[1] != ws[1] || bs[0] != ws[0] {
            return Err(mismatch("linear", alloc::format!("a {as_:?} w {ws:?} b {bs:?}")));
        }
        let dims = (as_[0], as_[1], ws[0]);
        let out = kernels::linear_forward(
            self.value(a).values(),
            self.value(w).values(),
            self.value(b).values(),
            dims.0,
            dims.1,
            dims.2,
        );
        let t = Tensor::new(&[dims.0, dims.2], out)?;
        self.push(Op::Linear { a, w, b, dims }, t, "linear")
    }

    /// Softmax over the last axis of an `N×K` node; the denominator runs over
    /// all `K` entries.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || xs[1] == 0 {
            return Err(mismatch("softmax", alloc::format!("x {xs:?}")));
        }
        let y = kernels::softmax_rows(self.value(x).values(), xs[1]);
        let t = Tensor::new(&xs, y)?;
        self.push(Op::Softmax { x, k: xs[1] }, t, "softmax")
    }

    /// `scale · Σ_rows loss(row)` over the rows whose target is `Some`.
    /// Probabilities are clamped to `[1e-7, 1-1e-7]` before the logarithms.
    pub fn log_loss(&mut self, p: NodeId, targets: &[Option<usize>], scale: T, kind: LossKind) -> Result<NodeId> {
        let ps = self.shape(p).to_vec();
        if ps.len() != 2 || ps[0] != targets.len() {
            return Err(mismatch("log_loss", alloc::format!("p {ps:?} with {} targets", targets.len())));
        }
        let k = ps[1];
        if let Some(&bad) = targets.iter().flatten().find(|&&t| t >= k) {
            return Err(Error::LabelOutOfRange { label: bad, classes: k });
        }
        let lo = T::from_f64(PROB_CLAMP);
        let hi = T::one() - lo;
        let kf = T::from_usize(k);
        let mut total = T::zero();
        for (row, t) in self.value(p).values().chunks_exact(k).zip(targets) {
            let Some(t) = *t else { continue };
            let loss = match kind {
                LossKind::BceOverSoftmax => {
                    let mut s = T::zero();
                    for (i, &pi) in row.iter().enumerate() {
                        let pc = pi.max(lo).min(hi);
                        s += if i == t { pc.ln() } else { (T::one() - pc).ln() };
                    }
                    -s / kf
                }
                LossKind::CrossEntropy => -row[t].max(lo).min(hi).ln(),
            };
            total += loss;
        }
        let t = Tensor::scalar(scale * total);
        self.push(Op::LogLoss { p, targets: targets.to_vec(), scale, kind }, t, "log_loss")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("add", alloc::format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let out: Vec<T> = self.value(a).values().iter().zip(self.value(b).values()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(self.shape(a), out)?;
        self.push(Op::Add { a, b }, t, "add")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("mul", alloc::format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let out: Vec<T> = self.value(a).values().iter().zip(self.value(b).values()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(self.shape(a), out)?;
        self.push(Op::Mul { a, b }, t, "mul")
    }

    /// Joins `N×k_i` nodes column-wise into `N×Σk_i`.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return Err(mismatch("concat_cols", "no inputs".into()));
        };
        let n = self.shape(first)[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != n {
                return Err(mismatch("concat_cols", alloc::format!("{s:?} with {n} rows")));
            }
            widths.push((p, s[1]));
        }
        let total: usize = widths.iter().map(|w| w.1).sum();
        let mut out = vec![T::zero(); n * total];
        let mut off = 0;
        for &(p, k) in &widths {
            let v = self.value(p).values();
            for r in 0..n {
                out[r * total + off..r * total + off + k].copy_from_slice(&v[r * k..(r + 1) * k]);
            }
            off += k;
        }
        let t = Tensor::new(&[n, total], out)?;
        self.push(Op::ConcatCols { parts: widths }, t, "concat_cols")
    }

    /// Reverse pass from a scalar `loss`. Gradients of non-parameter nodes
    /// are stored on the nodes; parameter gradients are returned, accumulated
    /// over every use of each parameter.
    pub fn backward(&mut self, loss: NodeId) -> Result<ParamGrads<T>> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(bad) = node.op.inputs().into_iter().find(|inp| inp.0 >= i) {
                return Err(Error::Cycle { node: i, input: bad.0 });
            }
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out = ParamGrads::new(self.params.len());
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let contributions = self.node_backward(i, &g)?;
            for (inp, gi) in contributions {
                if !self.nodes[inp.0].requires_grad {
                    continue;
                }
                match &mut grads[inp.0] {
                    Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(gi),
                }
            }
            match self.nodes[i].op {
                Op::Param(pid) => out.accumulate(pid, &g),
                _ => {
                    if let Some(v) = self.nodes[i].value.as_mut() {
                        v.set_grad(g);
                    }
                }
            }
        }
        Ok(out)
    }

    fn node_backward(&self, i: usize, g: &[T]) -> Result<Vec<(NodeId, Vec<T>)>> {
        let rg = |id: NodeId| self.nodes[id.0].requires_grad;
        let out = match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => Vec::new(),
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) =
                    kernels::conv2d_backward(self.value(*x).values(), self.value(*w).values(), g, geom, rg(*x));
                let mut v = vec![(*w, dw), (*b, db)];
                if let Some(dx) = dx {
                    v.push((*x, dx));
                }
                v
            }
            Op::BatchNorm { x, gamma, beta, cache, dims } => {
                let (dx, dg, db) =
                    kernels::batchnorm_backward(g, cache, dims.0, dims.1, dims.2, self.value(*gamma).values());
                vec![(*x, dx), (*gamma, dg), (*beta, db)]
            }
            Op::Relu { x } => {
                let dx = self
                    .value(*x)
                    .values()
                    .iter()
                    .zip(g)
                    .map(|(&a, &d)| if a > T::zero() { d } else { T::zero() })
                    .collect();
                vec![(*x, dx)]
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (&j, &d) in argmax.iter().zip(g) {
                    dx[j] += d;
                }
                vec![(*x, dx)]
            }
            Op::Reshape { x } => vec![(*x, g.to_vec())],
            Op::Linear { a, w, b, dims } => {
                let (da, dw, db) = kernels::linear_backward(
                    self.value(*a).values(),
                    self.value(*w).values(),
                    g,
                    dims.0,
                    dims.1,
                    dims.2,
                    rg(*a),
                );
                let mut v = vec![(*w, dw), (*b, db)];
                if let Some(da) = da {
                    v.push((*a, da));
                }
                v
            }
            Op::Softmax { x, k } => {
                let y = self.nodes[i].value.as_ref().map(|t| t.values()).unwrap_or_default();
                let mut dx = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks_exact(*k).zip(g.chunks_exact(*k)).zip(dx.chunks_exact_mut(*k)) {
                    let s = dot(yr, gr);
                    for ((d, &yi), &gi) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yi * (gi - s);
                    }
                }
                vec![(*x, dx)]
            }
            Op::LogLoss { p, targets, scale, kind } => {
                let pv = self.value(*p);
                let k = pv.shape()[1];
                let lo = T::from_f64(PROB_CLAMP);
                let hi = T::one() - lo;
                let kf = T::from_usize(k);
                let up = g[0] * *scale;
                let mut dp = vec![T::zero(); pv.len()];
                for ((row, dr), t) in pv.values().chunks_exact(k).zip(dp.chunks_exact_mut(k)).zip(targets) {
                    let Some(t) = *t else { continue };
                    for (idx, (&pi, d)) in row.iter().zip(dr.iter_mut()).enumerate() {
                        if pi < lo || pi > hi {
                            continue;
                        }
                        *d = match kind {
                            LossKind::BceOverSoftmax if idx == t => -up / (kf * pi),
                            LossKind::BceOverSoftmax => up / (kf * (T::one() - pi)),
                            LossKind::CrossEntropy if idx == t => -up / pi,
                            LossKind::CrossEntropy => T::zero(),
                        };
                    }
                }
                vec![(*p, dp)]
            }
            Op::Add { a, b } => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).values(), self.value(*b).values());
                let da = g.iter().zip(bv).map(|(&d, &y)| d * y).collect();
                let db = g.iter().zip(av).map(|(&d, &x)| d * x).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::ConcatCols { parts } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let n = g.len() / total;
                let mut off = 0;
                let mut v = Vec::with_capacity(parts.len());
                for &(p, k) in parts {
                    let mut d = vec![T::zero(); n * k];
                    for r in 0..n {
                        d[r * k..(r + 1) * k].copy_from_slice(&g[r * total + off..r * total + off + k]);
                    }
                    v.push((p, d));
                    off += k;
                }
                v
            }
        };
        for (_, gi) in &out {
            if gi.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "backward" });
            }
        }
        Ok(out)
    }
}

/// Standalone softmax over a single logit vector.
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    if logits.is_empty() {
        return Vec::new();
    }
    softmax_rows(logits, logits.len())
}

/// Log-loss of one probability vector against a one-hot label vector.
pub fn bce_over_softmax<T: Real>(p: &[T], one_hot: &[T]) -> Result<T> {
    let label = one_hot_index(one_hot)?;
    if p.len() != one_hot.len() {
        return Err(mismatch("bce_over_softmax", alloc::format!("{} probs vs {} labels", p.len(), one_hot.len())));
    }
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let pn = g.input(Tensor::new(&[1, p.len()], p.to_vec())?)?;
    let l = g.log_loss(pn, &[Some(label)], T::one(), LossKind::BceOverSoftmax)?;
    Ok(g.value(l).item())
}

/// Index of the single 1 in a one-hot vector.
pub fn one_hot_index<T: Real>(one_hot: &[T]) -> Result<usize> {
    let mut idx = None;
    for (i, &v) in one_hot.iter().enumerate() {
        if v == T::one() {
            if idx.is_some() {
                return Err(Error::NotOneHot);
            }
            idx = Some(i);
        } else if v != T::zero() {
            return Err(Error::NotOneHot);
        }
    }
    idx.ok_or(Error::NotOneHot)
}
