//! Reverse-mode automatic differentiation over a Wengert list.
//!
//! Every op appends one node whose inputs already exist on the tape, so node
//! order is a topological order. [`Tape::backward`] walks the list once in
//! reverse and accumulates into the `grad` buffer of every leaf created with
//! `requires_grad`. Repeated calls accumulate; [`Tape::zero_grads`] resets.
//!
//! Only exact-shape binary ops and scalar broadcasts are supported.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, Lu};
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    ScaleBy(Var, Var),
    Relu(Var),
    Clip(Var, T, T),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        k: Var,
        geom: ConvGeom,
    },
    BiasAdd(Var, Var),
    AvgPool(Var, usize),
    Box3(Var),
    Sum(Var),
    Mean(Var),
    NegSqDist(Var, Var),
    Solve {
        a: Var,
        b: Var,
        lu: Lu<T>,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Kl {
        p: Var,
        q: Var,
        p_probs: Vec<T>,
        q_probs: Vec<T>,
        kl_rows: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Recorded computation. One tape per forward/backward pass; tapes are not
/// shared across threads.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf node. With `requires_grad`, [`backward`](Self::backward) fills its gradient.
    pub fn var(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.var(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a `requires_grad` leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            requires_grad: false,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        self.value(a).check_same(op, self.value(b))
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("shape checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |p, q| p + q);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |p, q| p - q);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |p, q| p * q);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x + s);
        self.push(out, Op::AddScalar(a), &[a])
    }

    /// Multiply every element of `a` by the one-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "scale_by",
                left: self.shape(a).to_vec(),
                right: self.shape(s).to_vec(),
            });
        }
        let sv = self.value(s).item();
        let out = self.value(a).map(|x| x * sv);
        Ok(self.push(out, Op::ScaleBy(a, s), &[a, s]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(out, Op::Relu(a), &[a])
    }

    /// Box projection onto `[lo, hi]`. Gradient passes strictly inside the box
    /// and is zero at or beyond either bound.
    pub fn clip(&mut self, a: Var, lo: T, hi: T) -> Var {
        let out = self.value(a).map(|x| x.max(lo).min(hi));
        self.push(out, Op::Clip(a, lo, hi), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(&[m, n]);
        kernels::matmul_acc(m, k, n, self.value(a).data(), self.value(b).data(), out.data_mut());
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("transpose", format!("expected 2-d, got {s:?}")));
        }
        let out = transpose2(self.value(a));
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// Flatten `[B, ...]` to `[B, prod(...)]`.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        let b = s[0];
        let rest = s[1..].iter().product();
        self.reshape(a, &[b, rest])
    }

    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(k), stride, pad)?;
        let mut out = Tensor::zeros(&[geom.n, geom.f, geom.oh, geom.ow]);
        kernels::conv2d_forward(&geom, self.value(x).data(), self.value(k).data(), out.data_mut());
        Ok(self.push(out, Op::Conv2d { x, k, geom }, &[x, k]))
    }

    /// Add a per-channel bias `[C]` to `[N, C, ...]`.
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.len() < 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(Error::ShapeMismatch {
                op: "bias_add",
                left: sx.to_vec(),
                right: sb.to_vec(),
            });
        }
        let c = sx[1];
        let inner: usize = sx[2..].iter().product();
        let mut out = self.value(x).clone();
        let bias = self.value(b).data();
        for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let bv = bias[i % c];
            for v in chunk {
                *v += bv;
            }
        }
        Ok(self.push(out, Op::BiasAdd(x, b), &[x, b]))
    }

    /// Non-overlapping `size x size` mean pooling on `[N, C, H, W]`.
    pub fn avg_pool(&mut self, x: Var, size: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || size == 0 || s[2] < size || s[3] < size {
            return Err(Error::shape("avg_pool", format!("pool {size} on {s:?}")));
        }
        let mut out = Tensor::zeros(&[s[0], s[1], s[2] / size, s[3] / size]);
        kernels::avg_pool_forward(&s, size, self.value(x).data(), out.data_mut());
        Ok(self.push(out, Op::AvgPool(x, size), &[x]))
    }

    /// Zero-padded 3x3 box mean over each channel of `[N, C, H, W]`.
    pub fn box_filter3(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] == 0 || s[3] == 0 {
            return Err(Error::shape(
                "box_filter3",
                format!("expected [N,C,H,W] with H,W >= 1, got {s:?}"),
            ));
        }
        let mut out = Tensor::zeros(&s);
        kernels::box3_accumulate(&s, self.value(x).data(), out.data_mut());
        Ok(self.push(out, Op::Box3(x), &[x]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: T = v.data().iter().copied().sum::<T>() / T::of(v.len().max(1) as f64);
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// `out[b, k] = -||x_b - c_k||^2` for `x: [B, D]`, `c: [K, D]`.
    pub fn neg_sq_dist(&mut self, x: Var, c: Var) -> Result<Var> {
        let (sx, sc) = (self.shape(x), self.shape(c));
        if sx.len() != 2 || sc.len() != 2 || sx[1] != sc[1] {
            return Err(Error::ShapeMismatch {
                op: "neg_sq_dist",
                left: sx.to_vec(),
                right: sc.to_vec(),
            });
        }
        let (b, k, d) = (sx[0], sc[0], sx[1]);
        let (xv, cv) = (self.value(x).data(), self.value(c).data());
        let mut out = Tensor::zeros(&[b, k]);
        for i in 0..b {
            let xr = &xv[i * d..(i + 1) * d];
            for j in 0..k {
                let cr = &cv[j * d..(j + 1) * d];
                let mut acc = T::zero();
                for (&p, &q) in xr.iter().zip(cr) {
                    let t = p - q;
                    acc += t * t;
                }
                out.data_mut()[i * k + j] = -acc;
            }
        }
        Ok(self.push(out, Op::NegSqDist(x, c), &[x, c]))
    }

    /// Solve `A X = B` with `A: [n, n]`, `B: [n, m]`.
    pub fn solve(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sa[1] || sa[0] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "solve",
                left: sa,
                right: sb,
            });
        }
        let lu = Lu::factor(sa[0], self.value(a).data())?;
        let x = lu.solve(self.value(b).data(), sb[1]);
        let out = Tensor::new(sb, x)?;
        Ok(self.push(out, Op::Solve { a, b, lu }, &[a, b]))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, max-subtracted.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {s:?} with {} labels", labels.len()),
            ));
        }
        let (b, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange { label: bad, classes: k });
        }
        let probs = softmax_rows(self.value(logits).data(), b, k);
        let mut total = T::zero();
        let lv = self.value(logits).data();
        for (i, &l) in labels.iter().enumerate() {
            total += -log_softmax_at(&lv[i * k..(i + 1) * k], l);
        }
        let loss = total / T::of(b.max(1) as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Mean over the batch of `KL(softmax(p) || softmax(q))`.
    pub fn kl_divergence(&mut self, p: Var, q: Var) -> Result<Var> {
        self.same_shape("kl_divergence", p, q)?;
        let s = self.shape(p).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("kl_divergence", format!("expected [B,K], got {s:?}")));
        }
        let (b, k) = (s[0], s[1]);
        let (pv, qv) = (self.value(p).data(), self.value(q).data());
        let p_probs = softmax_rows(pv, b, k);
        let q_probs = softmax_rows(qv, b, k);
        let mut kl_rows = Vec::with_capacity(b);
        for i in 0..b {
            let lp = log_softmax_row(&pv[i * k..(i + 1) * k]);
            let lq = log_softmax_row(&qv[i * k..(i + 1) * k]);
            let mut acc = T::zero();
            for j in 0..k {
                acc += p_probs[i * k + j] * (lp[j] - lq[j]);
            }
            kl_rows.push(acc);
        }
        let total: T = kl_rows.iter().copied().sum();
        let loss = total / T::of(b.max(1) as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Kl {
                p,
                q,
                p_probs,
                q_probs,
                kl_rows,
            },
            &[p, q],
        ))
    }

    /// Reverse pass from a one-element `loss`, seeded with 1.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let shape = self.shape(loss).to_vec();
        self.backward_with(loss, Tensor::full(&shape, T::one()))
    }

    /// Reverse pass from `root` with an explicit upstream gradient.
    pub fn backward_with(&mut self, root: Var, seed: Tensor<T>) -> Result<()> {
        self.value(root).check_same("backward seed", &seed)?;
        let mut adj: Vec<Option<Tensor<T>>> = (0..=root.0).map(|_| None).collect();
        adj[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if self.nodes[i].requires_grad {
                match &mut self.nodes[i].grad {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g.clone()),
                }
            }
            self.propagate(i, &g, &mut adj)?;
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, adj: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(adj, *a, g.clone());
                }
                if self.needs(*b) {
                    accumulate(adj, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    accumulate(adj, *a, g.clone());
                }
                if self.needs(*b) {
                    accumulate(adj, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    accumulate(adj, *a, hadamard(g, self.value(*b)));
                }
                if self.needs(*b) {
                    accumulate(adj, *b, hadamard(g, self.value(*a)));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                accumulate(adj, *a, g.map(|x| x * s));
            }
            Op::AddScalar(a) => accumulate(adj, *a, g.clone()),
            Op::ScaleBy(a, s) => {
                let sv = self.value(*s).item();
                if self.needs(*a) {
                    accumulate(adj, *a, g.map(|x| x * sv));
                }
                if self.needs(*s) {
                    let d: T = g.data().iter().zip(self.value(*a).data()).map(|(&p, &q)| p * q).sum();
                    let shape = self.shape(*s).to_vec();
                    accumulate(adj, *s, Tensor::full(&shape, d));
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                    .collect();
                accumulate(adj, *a, Tensor::new(x.shape().to_vec(), data)?);
            }
            Op::Clip(a, lo, hi) => {
                let x = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&d, &v)| if v > *lo && v < *hi { d } else { T::zero() })
                    .collect();
                accumulate(adj, *a, Tensor::new(x.shape().to_vec(), data)?);
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    let mut da = Tensor::zeros(sa);
                    kernels::matmul_a_bt_acc(m, k, n, g.data(), self.value(*b).data(), da.data_mut());
                    accumulate(adj, *a, da);
                }
                if self.needs(*b) {
                    let mut db = Tensor::zeros(sb);
                    kernels::matmul_at_b_acc(m, k, n, self.value(*a).data(), g.data(), db.data_mut());
                    accumulate(adj, *b, db);
                }
            }
            Op::Transpose(a) => accumulate(adj, *a, transpose2(g)),
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                accumulate(adj, *a, g.clone().reshape(&shape)?);
            }
            Op::Conv2d { x, k, geom } => {
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(self.shape(*x));
                    kernels::conv2d_backward_input(geom, g.data(), self.value(*k).data(), dx.data_mut());
                    accumulate(adj, *x, dx);
                }
                if self.needs(*k) {
                    let mut dk = Tensor::zeros(self.shape(*k));
                    kernels::conv2d_backward_kernel(geom, g.data(), self.value(*x).data(), dk.data_mut());
                    accumulate(adj, *k, dk);
                }
            }
            Op::BiasAdd(x, b) => {
                if self.needs(*x) {
                    accumulate(adj, *x, g.clone());
                }
                if self.needs(*b) {
                    let s = out.shape();
                    let c = s[1];
                    let inner: usize = s[2..].iter().product();
                    let mut db = Tensor::zeros(&[c]);
                    for (idx, chunk) in g.data().chunks(inner).enumerate() {
                        let mut acc = T::zero();
                        for &v in chunk {
                            acc += v;
                        }
                        db.data_mut()[idx % c] += acc;
                    }
                    accumulate(adj, *b, db);
                }
            }
            Op::AvgPool(x, size) => {
                let s = self.shape(*x).to_vec();
                let mut dx = Tensor::zeros(&s);
                kernels::avg_pool_backward(&s, *size, g.data(), dx.data_mut());
                accumulate(adj, *x, dx);
            }
            Op::Box3(x) => {
                let s = self.shape(*x).to_vec();
                let mut dx = Tensor::zeros(&s);
                kernels::box3_accumulate(&s, g.data(), dx.data_mut());
                accumulate(adj, *x, dx);
            }
            Op::Sum(a) => {
                let gv = g.item();
                accumulate(adj, *a, Tensor::full(self.shape(*a), gv));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len().max(1);
                let gv = g.item() / T::of(n as f64);
                accumulate(adj, *a, Tensor::full(self.shape(*a), gv));
            }
            Op::NegSqDist(x, c) => {
                let (sx, sc) = (self.shape(*x), self.shape(*c));
                let (b, k, d) = (sx[0], sc[0], sx[1]);
                let (xv, cv) = (self.value(*x).data(), self.value(*c).data());
                let mut dx = Tensor::zeros(sx);
                let mut dc = Tensor::zeros(sc);
                let two = T::of(2.0);
                for i in 0..b {
                    for j in 0..k {
                        let w = g.data()[i * k + j] * two;
                        if w == T::zero() {
                            continue;
                        }
                        for t in 0..d {
                            let diff = xv[i * d + t] - cv[j * d + t];
                            dx.data_mut()[i * d + t] -= w * diff;
                            dc.data_mut()[j * d + t] += w * diff;
                        }
                    }
                }
                if self.needs(*x) {
                    accumulate(adj, *x, dx);
                }
                if self.needs(*c) {
                    accumulate(adj, *c, dc);
                }
            }
            Op::Solve { a, b, lu } => {
                let m = out.shape()[1];
                let db = Tensor::new(self.shape(*b).to_vec(), lu.solve_transposed(g.data(), m))?;
                if self.needs(*a) {
                    let n = self.shape(*a)[0];
                    let mut da = Tensor::zeros(&[n, n]);
                    // dA = -dB X^T
                    kernels::matmul_a_bt_acc(n, n, m, db.data(), out.data(), da.data_mut());
                    da.scale_in_place(-T::one());
                    accumulate(adj, *a, da);
                }
                if self.needs(*b) {
                    accumulate(adj, *b, db);
                }
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                let s = self.shape(*logits);
                let (b, k) = (s[0], s[1]);
                let scale = g.item() / T::of(b.max(1) as f64);
                let mut d = Tensor::new(s.to_vec(), probs.clone())?;
                for (i, &l) in labels.iter().enumerate() {
                    d.data_mut()[i * k + l] -= T::one();
                }
                d.scale_in_place(scale);
                accumulate(adj, *logits, d);
            }
            Op::Kl {
                p,
                q,
                p_probs,
                q_probs,
                kl_rows,
            } => {
                let s = self.shape(*p);
                let (b, k) = (s[0], s[1]);
                let scale = g.item() / T::of(b.max(1) as f64);
                if self.needs(*p) {
                    let (pv, qv) = (self.value(*p).data(), self.value(*q).data());
                    let mut d = Tensor::zeros(s);
                    for i in 0..b {
                        let lp = log_softmax_row(&pv[i * k..(i + 1) * k]);
                        let lq = log_softmax_row(&qv[i * k..(i + 1) * k]);
                        for j in 0..k {
                            let pj = p_probs[i * k + j];
                            d.data_mut()[i * k + j] = scale * pj * (lp[j] - lq[j] - kl_rows[i]);
                        }
                    }
                    accumulate(adj, *p, d);
                }
                if self.needs(*q) {
                    let data = q_probs
                        .iter()
                        .zip(p_probs)
                        .map(|(&qj, &pj)| scale * (qj - pj))
                        .collect();
                    accumulate(adj, *q, Tensor::new(s.to_vec(), data)?);
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(adj: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut adj[v.0] {
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn hadamard<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn transpose2<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (a.shape()[0], a.shape()[1]);
    let src = a.data();
    Tensor::from_fn(&[c, r], |i| src[(i % r) * c + i / r])
}

pub(crate) fn softmax_rows<T: Real>(x: &[T], b: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); b * k];
    for i in 0..b {
        let row = &x[i * k..(i + 1) * k];
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for (o, &v) in out[i * k..(i + 1) * k].iter_mut().zip(row) {
            *o = (v - m).exp();
            z += *o;
        }
        for o in &mut out[i * k..(i + 1) * k] {
            *o /= z;
        }
    }
    out
}

fn log_softmax_row<T: Real>(row: &[T]) -> Vec<T> {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let z: T = row.iter().map(|&v| (v - m).exp()).sum();
    let lz = z.ln() + m;
    row.iter().map(|&v| v - lz).collect()
}

fn log_softmax_at<T: Real>(row: &[T], idx: usize) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let z: T = row.iter().map(|&v| (v - m).exp()).sum();
    row[idx] - m - z.ln()
}
