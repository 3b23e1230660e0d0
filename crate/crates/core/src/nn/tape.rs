//! Reverse-mode automatic differentiation over an append-only operation log.
//!
//! Every operation appends one node holding its output value and whatever it
//! needs for the backward pass. `backward` walks the nodes once, newest first,
//! accumulating vector-Jacobian products into the inputs that require gradients.

use super::kernels::{col2im, gemm_nn, gemm_nt, gemm_tn, im2col, ConvGeom};
use super::{ParamStore, Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Padding {
    /// Zero padding of `k / 2` on every side.
    Same,
    Valid,
}

enum Op<S> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Relu {
        x: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    Upsample {
        x: Var,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    L2 {
        a: Var,
        b: Var,
        lambda: S,
        per_sample: bool,
        norms: Vec<S>,
    },
    Bce {
        logits: Var,
        labels: Vec<S>,
    },
    WeightedSum {
        x: Var,
        weights: Vec<S>,
    },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Norms below this are treated as exactly zero by the L2 objective's gradient.
pub const L2_GRAD_FLOOR: f64 = 1e-12;

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    params: Vec<(String, Var)>,
    grad_enabled: bool,
    backward_done: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: Vec::new(),
            grad_enabled: true,
            backward_done: false,
        }
    }

    /// A tape that never tracks gradients; parameters enter as constants.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a tensor; it takes part in differentiation when its `requires_grad` flag is set.
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    /// Records a tensor that never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor<S>) -> Var {
        t.set_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    /// Records a named parameter from `store`.
    pub fn param(&mut self, store: &ParamStore<S>, name: &str) -> Result<Var> {
        let t = store
            .get(name)
            .ok_or_else(|| Error::Usage(format!("unknown parameter `{name}`")))?
            .clone()
            .with_grad();
        let v = self.leaf(t);
        self.params.push((name.to_string(), v));
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor<S>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::from_vec(self.shape(v), g.clone()).ok()
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws.h != ws.w || ws.h % 2 == 0 || ws.c != xs.c {
            return Err(Error::Config(format!(
                "conv2d: weight {ws} incompatible with input {xs} (need (c_out, {}, k, k) with odd k)",
                xs.c
            )));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::Config(format!("conv2d: unsupported stride {stride}")));
        }
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs != Shape::new(1, ws.n, 1, 1) {
                return Err(Error::Config(format!(
                    "conv2d: bias {bs} does not match weight {ws}"
                )));
            }
        }
        let k = ws.h;
        let pad = match padding {
            Padding::Same => k / 2,
            Padding::Valid => 0,
        };
        if xs.h + 2 * pad < k || xs.w + 2 * pad < k {
            return Err(Error::Config(format!(
                "conv2d: input {xs} smaller than kernel {ws}"
            )));
        }
        let geom = ConvGeom {
            c_in: xs.c,
            h: xs.h,
            w: xs.w,
            k,
            stride,
            pad,
            out_h: (xs.h + 2 * pad - k) / stride + 1,
            out_w: (xs.w + 2 * pad - k) / stride + 1,
        };
        let c_out = ws.n;
        let out_shape = Shape::new(xs.n, c_out, geom.out_h, geom.out_w);
        let mut out = vec![S::zero(); out_shape.numel()];
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let mut col = if geom.is_pointwise() {
            Vec::new()
        } else {
            vec![S::zero(); rows * cols]
        };
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = b.map(|b| self.value(b).data());
            let per_in = xs.c * xs.plane();
            for n in 0..xs.n {
                let xin = &xv[n * per_in..(n + 1) * per_in];
                let dst = &mut out[n * c_out * cols..(n + 1) * c_out * cols];
                if let Some(bv) = bv {
                    for (o, chunk) in dst.chunks_mut(cols).enumerate() {
                        chunk.fill(bv[o]);
                    }
                }
                let colm: &[S] = if geom.is_pointwise() {
                    xin
                } else {
                    im2col(&geom, xin, &mut col);
                    &col
                };
                gemm_nn(c_out, rows, cols, wv, colm, dst);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let t = Tensor::from_vec(out_shape, out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| if v > S::zero() { v } else { S::zero() });
        let rg = self.rg(x);
        self.push(t, Op::Relu { x }, rg)
    }

    pub fn max_pool_2x2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.h % 2 != 0 || s.w % 2 != 0 {
            return Err(Error::Config(format!(
                "max_pool_2x2 needs even spatial dims, got {s}"
            )));
        }
        let (oh, ow) = (s.h / 2, s.w / 2);
        let os = Shape::new(s.n, s.c, oh, ow);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(os.numel());
        let mut argmax = Vec::with_capacity(os.numel());
        for nc in 0..s.n * s.c {
            let base = nc * s.plane();
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * s.w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * s.w + 2 * ox + dx;
                        if xv[i] > xv[best] {
                            best = i;
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let rg = self.rg(x);
        let t = Tensor::from_vec(os, out)?;
        Ok(self.push(t, Op::MaxPool { x, argmax }, rg))
    }

    pub fn upsample_2x_nearest(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let os = Shape::new(s.n, s.c, 2 * s.h, 2 * s.w);
        let xv = self.value(x).data();
        let mut out = vec![S::zero(); os.numel()];
        for nc in 0..s.n * s.c {
            for y in 0..os.h {
                for xx in 0..os.w {
                    out[nc * os.plane() + y * os.w + xx] = xv[nc * s.plane() + (y / 2) * s.w + xx / 2];
                }
            }
        }
        let rg = self.rg(x);
        let t = Tensor::from_vec(os, out).expect("upsample shape");
        self.push(t, Op::Upsample { x }, rg)
    }

    pub fn group_norm(
        &mut self,
        x: Var,
        groups: usize,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var> {
        let s = self.shape(x);
        if groups == 0 || s.c % groups != 0 {
            return Err(Error::Config(format!(
                "group_norm: {} channels not divisible into {groups} groups",
                s.c
            )));
        }
        let affine = Shape::new(1, s.c, 1, 1);
        if self.shape(gamma) != affine || self.shape(beta) != affine {
            return Err(Error::Config(format!(
                "group_norm: gamma {} / beta {} must be {affine}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let per_group = (s.c / groups) * s.plane();
        let count = S::of(per_group as f64);
        let eps = S::of(eps);
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![S::zero(); s.numel()];
        let mut inv_std = Vec::with_capacity(s.n * groups);
        let mut out = vec![S::zero(); s.numel()];
        for ng in 0..s.n * groups {
            let range = ng * per_group..(ng + 1) * per_group;
            let chunk = &xv[range.clone()];
            let mean = chunk.iter().copied().sum::<S>() / count;
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / count;
            let is = S::one() / (var + eps).sqrt();
            inv_std.push(is);
            let first_channel = (ng % groups) * (s.c / groups);
            for (j, (&v, xh)) in chunk.iter().zip(&mut xhat[range.clone()]).enumerate() {
                *xh = (v - mean) * is;
                let c = first_channel + j / s.plane();
                out[range.start + j] = gv[c] * *xh + bv[c];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let t = Tensor::from_vec(s, out)?;
        Ok(self.push(
            t,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w) {
            return Err(Error::Config(format!(
                "concat_channels: {sa} and {sb} differ outside the channel axis"
            )));
        }
        let os = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
        let (pa, pb) = (sa.c * sa.plane(), sb.c * sb.plane());
        let mut out = Vec::with_capacity(os.numel());
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for n in 0..sa.n {
            out.extend_from_slice(&av[n * pa..(n + 1) * pa]);
            out.extend_from_slice(&bv[n * pb..(n + 1) * pb]);
        }
        let rg = self.rg(a) || self.rg(b);
        let t = Tensor::from_vec(os, out)?;
        Ok(self.push(t, Op::Concat { a, b }, rg))
    }

    /// `H(x) = F(x) + x` for a residual branch `fx`.
    pub fn residual_add(&mut self, x: Var, fx: Var) -> Result<Var> {
        let (sx, sf) = (self.shape(x), self.shape(fx));
        if sx != sf {
            return Err(Error::Config(format!(
                "residual_add: shapes {sx} and {sf} differ"
            )));
        }
        let out: Vec<S> = self
            .value(fx)
            .data()
            .iter()
            .zip(self.value(x).data())
            .map(|(&f, &v)| f + v)
            .collect();
        let rg = self.rg(x) || self.rg(fx);
        let t = Tensor::from_vec(sx, out)?;
        Ok(self.push(t, Op::Add { a: x, b: fx }, rg))
    }

    /// Affine map of each flattened sample. `w` is `(1, 1, out, in)`, `b` is `(1, out, 1, 1)`;
    /// the result is `(n, out, 1, 1)`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let features = xs.c * xs.plane();
        if ws.n != 1 || ws.c != 1 || ws.w != features {
            return Err(Error::Config(format!(
                "dense: weight {ws} does not map {features} input features"
            )));
        }
        let outs = ws.h;
        if self.shape(b) != Shape::new(1, outs, 1, 1) {
            return Err(Error::Config(format!(
                "dense: bias {} does not match {outs} outputs",
                self.shape(b)
            )));
        }
        let mut out = Vec::with_capacity(xs.n * outs);
        for _ in 0..xs.n {
            out.extend_from_slice(self.value(b).data());
        }
        gemm_nt(
            xs.n,
            features,
            outs,
            self.value(x).data(),
            self.value(w).data(),
            &mut out,
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let t = Tensor::from_vec(Shape::new(xs.n, outs, 1, 1), out)?;
        Ok(self.push(t, Op::Dense { x, w, b }, rg))
    }

    /// `lambda · ‖a − b‖₂` over the whole tensors.
    pub fn l2_loss(&mut self, a: Var, b: Var, lambda: f64) -> Result<Var> {
        self.l2_impl(a, b, lambda, false)
    }

    /// Mean over the batch of `lambda · ‖a_n − b_n‖₂`.
    pub fn l2_loss_per_sample(&mut self, a: Var, b: Var, lambda: f64) -> Result<Var> {
        self.l2_impl(a, b, lambda, true)
    }

    fn l2_impl(&mut self, a: Var, b: Var, lambda: f64, per_sample: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Config(format!("l2_loss: shapes {sa} and {sb} differ")));
        }
        let lambda = S::of(lambda);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let chunk = if per_sample { sa.numel() / sa.n.max(1) } else { sa.numel() };
        let mut norms = Vec::new();
        if chunk > 0 {
            for (ca, cb) in av.chunks(chunk).zip(bv.chunks(chunk)) {
                let ss: S = ca.iter().zip(cb).map(|(&x, &y)| (x - y) * (x - y)).sum();
                norms.push(ss.sqrt());
            }
        }
        let total = if norms.is_empty() {
            S::zero()
        } else {
            lambda * norms.iter().copied().sum::<S>() / S::of(norms.len() as f64)
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::scalar(total),
            Op::L2 {
                a,
                b,
                lambda,
                per_sample,
                norms,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy of `(n, 1, 1, 1)` logits against 0/1 labels, computed
    /// through the stable log-sigmoid form.
    pub fn bce_loss(&mut self, logits: Var, labels: &[u8]) -> Result<Var> {
        let s = self.shape(logits);
        if s.numel() != labels.len() || s.numel() == 0 {
            return Err(Error::Config(format!(
                "bce_loss: {} logits vs {} labels",
                s.numel(),
                labels.len()
            )));
        }
        let labels: Vec<S> = labels
            .iter()
            .map(|&l| if l != 0 { S::one() } else { S::zero() })
            .collect();
        let total: S = self
            .value(logits)
            .data()
            .iter()
            .zip(&labels)
            .map(|(&z, &y)| bce_term(z, y))
            .sum();
        let loss = total / S::of(labels.len() as f64);
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss), Op::Bce { logits, labels }, rg))
    }

    /// `Σ x ⊙ weights` as a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor<S>) -> Result<Var> {
        if weights.shape() != self.shape(x) {
            return Err(Error::Config(format!(
                "weighted_sum: weights {} vs input {}",
                weights.shape(),
                self.shape(x)
            )));
        }
        let total: S = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a * b)
            .sum();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::scalar(total),
            Op::WeightedSum {
                x,
                weights: weights.data().to_vec(),
            },
            rg,
        ))
    }

    /// Propagates d`loss`/d(node) to every recorded value that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Usage(
                "backward already ran on this tape; record a fresh tape".into(),
            ));
        }
        if self.shape(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {}",
                self.shape(loss)
            )));
        }
        if !self.rg(loss) {
            return Err(Error::Usage(
                "backward called on a value that does not depend on any differentiable input"
                    .into(),
            ));
        }
        self.backward_done = true;
        let Tape { nodes, grads, .. } = self;
        grads.clear();
        grads.resize_with(nodes.len(), || None);
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let mut emit = |v: Var, contribution: Vec<S>| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(contribution) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contribution),
                }
            };
            backward_node(nodes, node, &g, &mut emit);
            grads[i] = Some(g);
        }
        Ok(())
    }

    /// Copies the gradients of every recorded parameter into `store`, summing repeated uses.
    pub fn write_param_grads(&self, store: &mut ParamStore<S>) -> Result<()> {
        if !self.backward_done {
            return Err(Error::Usage("write_param_grads before backward".into()));
        }
        store.zero_grad();
        for (name, v) in &self.params {
            let shape = self.shape(*v);
            let g = match self.grads.get(v.0).and_then(|g| g.as_ref()) {
                Some(g) => g.clone(),
                None => vec![S::zero(); shape.numel()],
            };
            store.accumulate_grad(name, &Tensor::from_vec(shape, g)?)?;
        }
        Ok(())
    }
}

fn bce_term<S: Scalar>(z: S, y: S) -> S {
    let zero = S::zero();
    z.max(zero) - z * y + (-z.abs()).exp().ln_1p()
}

fn sigmoid<S: Scalar>(z: S) -> S {
    if z >= S::zero() {
        S::one() / (S::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (S::one() + e)
    }
}

fn backward_node<S: Scalar>(
    nodes: &[Node<S>],
    node: &Node<S>,
    g: &[S],
    emit: &mut impl FnMut(Var, Vec<S>),
) {
    let val = |v: Var| &nodes[v.0].value;
    let needs = |v: Var| nodes[v.0].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d { x, w, b, geom } => {
            let xs = val(*x).shape();
            let wv = val(*w).data();
            let c_out = val(*w).shape().n;
            let (rows, cols) = (geom.col_rows(), geom.col_cols());
            let per_in = xs.c * xs.plane();
            let mut dx = needs(*x).then(|| vec![S::zero(); xs.numel()]);
            let mut dw = needs(*w).then(|| vec![S::zero(); c_out * rows]);
            let mut col = vec![S::zero(); if geom.is_pointwise() { 0 } else { rows * cols }];
            let mut dcol = vec![S::zero(); rows * cols];
            for n in 0..xs.n {
                let gy = &g[n * c_out * cols..(n + 1) * c_out * cols];
                if let Some(dw) = dw.as_mut() {
                    let xin = &val(*x).data()[n * per_in..(n + 1) * per_in];
                    let colm: &[S] = if geom.is_pointwise() {
                        xin
                    } else {
                        im2col(geom, xin, &mut col);
                        &col
                    };
                    gemm_nt(c_out, cols, rows, gy, colm, dw);
                }
                if let Some(dx) = dx.as_mut() {
                    let dst = &mut dx[n * per_in..(n + 1) * per_in];
                    if geom.is_pointwise() {
                        gemm_tn(rows, c_out, cols, wv, gy, dst);
                    } else {
                        dcol.fill(S::zero());
                        gemm_tn(rows, c_out, cols, wv, gy, &mut dcol);
                        col2im(geom, &dcol, dst);
                    }
                }
            }
            if let Some(dx) = dx {
                emit(*x, dx);
            }
            if let Some(dw) = dw {
                emit(*w, dw);
            }
            if let Some(b) = b {
                if needs(*b) {
                    let mut db = vec![S::zero(); c_out];
                    for (i, chunk) in g.chunks(cols).enumerate() {
                        db[i % c_out] += chunk.iter().copied().sum::<S>();
                    }
                    emit(*b, db);
                }
            }
        }
        Op::Relu { x } => {
            let d = val(*x)
                .data()
                .iter()
                .zip(g)
                .map(|(&v, &gv)| if v > S::zero() { gv } else { S::zero() })
                .collect();
            emit(*x, d);
        }
        Op::MaxPool { x, argmax } => {
            let mut d = vec![S::zero(); val(*x).numel()];
            for (&i, &gv) in argmax.iter().zip(g) {
                d[i as usize] += gv;
            }
            emit(*x, d);
        }
        Op::Upsample { x } => {
            let s = val(*x).shape();
            let (oh, ow) = (2 * s.h, 2 * s.w);
            let mut d = vec![S::zero(); s.numel()];
            for nc in 0..s.n * s.c {
                for y in 0..oh {
                    for xx in 0..ow {
                        d[nc * s.plane() + (y / 2) * s.w + xx / 2] += g[nc * oh * ow + y * ow + xx];
                    }
                }
            }
            emit(*x, d);
        }
        Op::GroupNorm {
            x,
            gamma,
            beta,
            groups,
            xhat,
            inv_std,
        } => {
            let s = val(*x).shape();
            let plane = s.plane();
            let cpg = s.c / groups;
            let per_group = cpg * plane;
            let gv = val(*gamma).data();
            if needs(*gamma) || needs(*beta) {
                let mut dg = vec![S::zero(); s.c];
                let mut db = vec![S::zero(); s.c];
                for (i, (&gy, &xh)) in g.iter().zip(xhat).enumerate() {
                    let c = (i / plane) % s.c;
                    dg[c] += gy * xh;
                    db[c] += gy;
                }
                emit(*gamma, dg);
                emit(*beta, db);
            }
            if needs(*x) {
                let m = S::of(per_group as f64);
                let mut dx = vec![S::zero(); s.numel()];
                for ng in 0..s.n * groups {
                    let start = ng * per_group;
                    let first_channel = (ng % groups) * cpg;
                    let mut sum_d = S::zero();
                    let mut sum_dx = S::zero();
                    let dxhat: Vec<S> = (0..per_group)
                        .map(|j| {
                            let d = g[start + j] * gv[first_channel + j / plane];
                            sum_d += d;
                            sum_dx += d * xhat[start + j];
                            d
                        })
                        .collect();
                    let is = inv_std[ng];
                    for (j, &d) in dxhat.iter().enumerate() {
                        dx[start + j] = is / m * (m * d - sum_d - xhat[start + j] * sum_dx);
                    }
                }
                emit(*x, dx);
            }
        }
        Op::Concat { a, b } => {
            let (sa, sb) = (val(*a).shape(), val(*b).shape());
            let (pa, pb) = (sa.c * sa.plane(), sb.c * sb.plane());
            let mut da = Vec::with_capacity(sa.numel());
            let mut db = Vec::with_capacity(sb.numel());
            for n in 0..sa.n {
                let base = n * (pa + pb);
                da.extend_from_slice(&g[base..base + pa]);
                db.extend_from_slice(&g[base + pa..base + pa + pb]);
            }
            emit(*a, da);
            emit(*b, db);
        }
        Op::Add { a, b } => {
            emit(*a, g.to_vec());
            emit(*b, g.to_vec());
        }
        Op::Dense { x, w, b } => {
            let xs = val(*x).shape();
            let features = xs.c * xs.plane();
            let outs = val(*w).shape().h;
            if needs(*x) {
                let mut dx = vec![S::zero(); xs.numel()];
                gemm_nn(xs.n, outs, features, g, val(*w).data(), &mut dx);
                emit(*x, dx);
            }
            if needs(*w) {
                let mut dw = vec![S::zero(); outs * features];
                gemm_tn(outs, xs.n, features, g, val(*x).data(), &mut dw);
                emit(*w, dw);
            }
            if needs(*b) {
                let mut db = vec![S::zero(); outs];
                for row in g.chunks(outs) {
                    for (d, &gv) in db.iter_mut().zip(row) {
                        *d += gv;
                    }
                }
                emit(*b, db);
            }
        }
        Op::L2 {
            a,
            b,
            lambda,
            per_sample,
            norms,
        } => {
            let s = val(*a).shape();
            let (av, bv) = (val(*a).data(), val(*b).data());
            let chunk = if *per_sample { s.numel() / s.n.max(1) } else { s.numel() };
            let scale = g[0] * *lambda / S::of(norms.len().max(1) as f64);
            let floor = S::of(L2_GRAD_FLOOR);
            let da: Vec<S> = av
                .iter()
                .zip(bv)
                .enumerate()
                .map(|(i, (&x, &y))| {
                    let norm = norms[i / chunk];
                    if norm < floor {
                        S::zero()
                    } else {
                        scale * (x - y) / norm
                    }
                })
                .collect();
            if needs(*b) {
                emit(*b, da.iter().map(|&v| -v).collect());
            }
            emit(*a, da);
        }
        Op::Bce { logits, labels } => {
            let n = S::of(labels.len() as f64);
            let d = val(*logits)
                .data()
                .iter()
                .zip(labels)
                .map(|(&z, &y)| g[0] * (sigmoid(z) - y) / n)
                .collect();
            emit(*logits, d);
        }
        Op::WeightedSum { x, weights } => {
            emit(*x, weights.iter().map(|&w| w * g[0]).collect());
        }
    }
}

/// Logistic function, stable for large magnitudes.
pub fn logistic<S: Scalar>(z: S) -> S {
    sigmoid(z)
}

/// Per-example binary cross-entropy, stable for large magnitudes.
pub fn bce_value<S: Scalar>(logit: S, label: u8) -> S {
    bce_term(logit, if label != 0 { S::one() } else { S::zero() })
}
