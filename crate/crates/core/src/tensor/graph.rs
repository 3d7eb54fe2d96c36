use super::conv::{self, ConvGeom};
use super::{Element, Result, Tensor, TensorError};
use crate::wavelet;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of a user-supplied primitive. Receives the input
/// values and the upstream gradient of the output; returns one gradient per
/// input (`None` where the input has no gradient contribution).
pub type BackwardFn<T> = Box<dyn Fn(&[&Tensor<T>], &[T]) -> Vec<Option<Vec<T>>>>;

enum Op<T> {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Var, geom: ConvGeom },
    DynConv2d { input: Var, attn: Var, kernels: Var, biases: Var, geom: ConvGeom },
    Relu(Var),
    Softmax(Var),
    GlobalAvgPool(Var),
    Add(Vec<Var>),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Concat(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    Dwt(Var),
    Idwt(Var),
    Mse { pred: Var, target: Var, scale: T },
    Charbonnier { pred: Var, target: Var, eps: T },
    Custom { inputs: Vec<Var>, backward: BackwardFn<T> },
}

/// A tape of primitive applications. Nodes are appended in evaluation order,
/// so every node's inputs precede it and [`Graph::backward`] is a single
/// reverse sweep.
///
/// Gradients are only retained for leaves created with `requires_grad`;
/// intermediate gradients are dropped as soon as they have been propagated.
pub struct Graph<T: Element> {
    values: Vec<Tensor<T>>,
    ops: Vec<Op<T>>,
    requires: Vec<bool>,
    grads: Vec<Option<Vec<T>>>,
    inference: bool,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn add_into<T: Element>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { values: Vec::new(), ops: Vec::new(), requires: Vec::new(), grads: Vec::new(), inference: false }
    }

    /// A graph that never tracks gradients and lets callers [`release`]
    /// intermediate values once they are no longer needed.
    ///
    /// [`release`]: Graph::release
    pub fn inference() -> Self {
        Self { inference: true, ..Self::new() }
    }

    pub fn is_inference(&self) -> bool {
        self.inference
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires = !self.inference && inputs.iter().any(|v| self.requires[v.0]);
        self.values.push(value);
        self.ops.push(op);
        self.requires.push(requires);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let requires = requires_grad && !self.inference;
        let grad = requires.then(|| vec![T::zero(); value.numel()]);
        self.values.push(value);
        self.ops.push(Op::Leaf);
        self.requires.push(requires);
        self.grads.push(grad);
        Var(self.values.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Accumulated gradient of a leaf; `None` when the leaf does not require grad.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        match self.ops[v.0] {
            Op::Leaf => self.grads[v.0].as_deref(),
            _ => None,
        }
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        self.grad(v).map(|g| Tensor::new(self.values[v.0].shape().to_vec(), g.to_vec()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        for (i, g) in self.grads.iter_mut().enumerate() {
            match (&self.ops[i], g.as_mut()) {
                (Op::Leaf, Some(g)) => g.fill(T::zero()),
                _ => *g = None,
            }
        }
    }

    /// Drops the value held by `v`. Only honoured on inference graphs, where
    /// no backward sweep will need it.
    pub fn release(&mut self, v: Var) {
        if self.inference {
            self.values[v.0] = Tensor::zeros([0]);
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                expected: self.shape(a).to_vec(),
                got: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    // ---- primitives ---------------------------------------------------

    /// Stride-1 convolution; `padding = (k - 1) / 2` preserves spatial size.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, padding: usize) -> Result<Var> {
        let x = self.value(input);
        let (geom, n) = ConvGeom::infer("conv2d", x, self.value(weight).shape(), self.value(bias).numel(), padding)?;
        let in_len = geom.cin * geom.h * geom.w;
        let out_len = geom.cout * geom.out_h() * geom.out_w();
        let mut out = Tensor::zeros([n, geom.cout, geom.out_h(), geom.out_w()]);
        let mut scratch = Vec::new();
        let (w, b) = (self.value(weight).data(), self.value(bias).data());
        for s in 0..n {
            conv::forward_sample(
                &x.data()[s * in_len..(s + 1) * in_len],
                w,
                b,
                &geom,
                &mut out.data_mut()[s * out_len..(s + 1) * out_len],
                &mut scratch,
            );
        }
        Ok(self.push(out, Op::Conv2d { input, weight, bias, geom }, &[input, weight, bias]))
    }

    /// Per-sample convolution with kernel `sum_i attn[n, i] * kernels[i]` and
    /// bias `sum_i attn[n, i] * biases[i]`.
    ///
    /// Shapes: input N x Cin x H x W, attn N x K, kernels K x Cout x Cin x k x k,
    /// biases K x Cout.
    pub fn dynamic_conv2d(&mut self, input: Var, attn: Var, kernels: Var, biases: Var, padding: usize) -> Result<Var> {
        let ks = self.shape(kernels).to_vec();
        if ks.len() != 5 {
            return Err(TensorError::Rank { op: "dynamic_conv2d", rank: 5, got: ks });
        }
        let nk = ks[0];
        let x = self.value(input);
        let (geom, n) = ConvGeom::infer("dynamic_conv2d", x, &ks[1..], ks[1], padding)?;
        if self.shape(attn) != [n, nk] {
            return Err(TensorError::ShapeMismatch {
                op: "dynamic_conv2d",
                expected: vec![n, nk],
                got: self.shape(attn).to_vec(),
            });
        }
        if self.shape(biases) != [nk, geom.cout] {
            return Err(TensorError::ShapeMismatch {
                op: "dynamic_conv2d",
                expected: vec![nk, geom.cout],
                got: self.shape(biases).to_vec(),
            });
        }
        let in_len = geom.cin * geom.h * geom.w;
        let out_len = geom.cout * geom.out_h() * geom.out_w();
        let mut out = Tensor::zeros([n, geom.cout, geom.out_h(), geom.out_w()]);
        let mut scratch = Vec::new();
        let a = self.value(attn).data();
        let (kd, bd) = (self.value(kernels).data(), self.value(biases).data());
        for s in 0..n {
            let (w, b) = aggregate(&a[s * nk..(s + 1) * nk], kd, bd);
            conv::forward_sample(
                &x.data()[s * in_len..(s + 1) * in_len],
                &w,
                &b,
                &geom,
                &mut out.data_mut()[s * out_len..(s + 1) * out_len],
                &mut scratch,
            );
        }
        Ok(self.push(out, Op::DynConv2d { input, attn, kernels, biases, geom }, &[input, attn, kernels, biases]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&e| if e > T::zero() { e } else { T::zero() }).collect(),
        )
        .expect("same shape");
        self.push(out, Op::Relu(x), &[x])
    }

    /// Row-wise softmax of an N x K tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let [_, k] = match *v.shape() {
            [n, k] if k >= 1 => [n, k],
            _ => return Err(TensorError::Rank { op: "softmax", rank: 2, got: v.shape().to_vec() }),
        };
        let mut out = v.data().to_vec();
        for row in out.chunks_exact_mut(k) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for e in row.iter_mut() {
                *e = (*e - m).exp();
                s = s + *e;
            }
            for e in row.iter_mut() {
                *e = *e / s;
            }
        }
        let out = Tensor::new(v.shape().to_vec(), out)?;
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    /// Mean over H x W: N x C x H x W -> N x C.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let [n, c, h, w] = v.dims4("global_avg_pool")?;
        let denom = T::lit((h * w) as f64);
        let out: Vec<T> = v.data().chunks_exact(h * w).map(|p| p.iter().copied().sum::<T>() / denom).collect();
        let out = Tensor::new([n, c], out)?;
        Ok(self.push(out, Op::GlobalAvgPool(x), &[x]))
    }

    /// Elementwise sum of equally shaped tensors.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| TensorError::Invalid("add of zero tensors".into()))?;
        for &x in &xs[1..] {
            self.same_shape("add", first, x)?;
        }
        let mut acc = self.value(first).data().to_vec();
        for &x in &xs[1..] {
            add_into(&mut acc, self.value(x).data());
        }
        let out = Tensor::new(self.shape(first).to_vec(), acc)?;
        Ok(self.push(out, Op::Add(xs.to_vec()), xs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add_n(&[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let d = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| *x - *y).collect();
        let out = Tensor::new(self.shape(a).to_vec(), d)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let d = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| *x * *y).collect();
        let out = Tensor::new(self.shape(a).to_vec(), d)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&e| e * c).collect()).expect("same shape");
        self.push(out, Op::Scale(x, c), &[x])
    }

    /// Stacks rank-4 tensors along the channel axis, in argument order.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
        let [n, _, h, w] = self.value(first).dims4("concat_channels")?;
        let mut channels = Vec::with_capacity(xs.len());
        for &x in xs {
            let [xn, xc, xh, xw] = self.value(x).dims4("concat_channels")?;
            if (xn, xh, xw) != (n, h, w) {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_channels",
                    expected: vec![n, xc, h, w],
                    got: vec![xn, xc, xh, xw],
                });
            }
            channels.push(xc);
        }
        let total: usize = channels.iter().sum();
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total * plane);
        for s in 0..n {
            for (&x, &c) in xs.iter().zip(&channels) {
                out.extend_from_slice(&self.value(x).data()[s * c * plane..(s + 1) * c * plane]);
            }
        }
        let out = Tensor::new([n, total, h, w], out)?;
        Ok(self.push(out, Op::Concat(xs.to_vec()), xs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Single-level orthonormal Haar analysis, N x C x H x W -> N x 4C x H/2 x W/2.
    pub fn dwt2d(&mut self, x: Var) -> Result<Var> {
        let out = wavelet::dwt2d(self.value(x))?;
        Ok(self.push(out, Op::Dwt(x), &[x]))
    }

    /// Inverse of [`Graph::dwt2d`].
    pub fn idwt2d(&mut self, x: Var) -> Result<Var> {
        let out = wavelet::idwt2d(self.value(x))?;
        Ok(self.push(out, Op::Idwt(x), &[x]))
    }

    /// `scale * sum((pred - target)^2)` as a scalar.
    pub fn squared_error(&mut self, pred: Var, target: Var, scale: T) -> Result<Var> {
        self.same_shape("squared_error", pred, target)?;
        let s: T =
            self.value(pred).data().iter().zip(self.value(target).data()).map(|(p, t)| (*p - *t) * (*p - *t)).sum();
        Ok(self.push(Tensor::scalar(s * scale), Op::Mse { pred, target, scale }, &[pred, target]))
    }

    /// Mean over elements of `sqrt((pred - target)^2 + eps^2)`.
    pub fn charbonnier(&mut self, pred: Var, target: Var, eps: T) -> Result<Var> {
        self.same_shape("charbonnier", pred, target)?;
        let n = T::lit(self.value(pred).numel() as f64);
        let s: T = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(p, t)| ((*p - *t) * (*p - *t) + eps * eps).sqrt())
            .sum();
        Ok(self.push(Tensor::scalar(s / n), Op::Charbonnier { pred, target, eps }, &[pred, target]))
    }

    /// Records an externally computed primitive with its own backward rule.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, backward: BackwardFn<T>) -> Var {
        self.push(output, Op::Custom { inputs: inputs.to_vec(), backward }, inputs)
    }

    // ---- reverse sweep --------------------------------------------------

    fn accumulate(&mut self, v: Var, g: &[T]) {
        if !self.requires[v.0] {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => add_into(acc, g),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    /// Accumulates d(loss)/d(leaf) into every leaf that requires grad.
    /// Calling it again without [`Graph::zero_grad`] adds to the same buffers.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        if !self.requires[loss.0] {
            return Ok(());
        }
        self.accumulate(loss, &[T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.requires[i] || matches!(self.ops[i], Op::Leaf) {
                continue;
            }
            let Some(up) = self.grads[i].take() else {
                continue;
            };
            self.backward_node(i, &up);
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, up: &[T]) {
        // The op is moved out so the node's inputs can be borrowed mutably.
        let op = std::mem::replace(&mut self.ops[i], Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, geom } => self.backward_conv(*input, *weight, *bias, geom, up),
            Op::DynConv2d { input, attn, kernels, biases, geom } => {
                self.backward_dyn_conv(*input, *attn, *kernels, *biases, geom, up)
            }
            Op::Relu(x) => {
                let g: Vec<T> = self.values[x.0]
                    .data()
                    .iter()
                    .zip(up)
                    .map(|(&v, &u)| if v > T::zero() { u } else { T::zero() })
                    .collect();
                self.accumulate(*x, &g);
            }
            Op::Softmax(x) => {
                let y = self.values[i].data();
                let k = self.values[i].shape()[1];
                let mut g = vec![T::zero(); y.len()];
                for ((yr, ur), gr) in y.chunks_exact(k).zip(up.chunks_exact(k)).zip(g.chunks_exact_mut(k)) {
                    let dot: T = yr.iter().zip(ur).map(|(a, b)| *a * *b).sum();
                    for j in 0..k {
                        gr[j] = yr[j] * (ur[j] - dot);
                    }
                }
                self.accumulate(*x, &g);
            }
            Op::GlobalAvgPool(x) => {
                let [_, _, h, w] = self.values[x.0].dims4("global_avg_pool").expect("rank 4");
                let inv = T::one() / T::lit((h * w) as f64);
                let mut g = Vec::with_capacity(up.len() * h * w);
                for &u in up {
                    g.extend(std::iter::repeat_n(u * inv, h * w));
                }
                self.accumulate(*x, &g);
            }
            Op::Add(xs) => {
                for &x in xs {
                    self.accumulate(x, up);
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, up);
                let neg: Vec<T> = up.iter().map(|&u| -u).collect();
                self.accumulate(*b, &neg);
            }
            Op::Mul(a, b) => {
                let ga: Vec<T> = up.iter().zip(self.values[b.0].data()).map(|(u, v)| *u * *v).collect();
                let gb: Vec<T> = up.iter().zip(self.values[a.0].data()).map(|(u, v)| *u * *v).collect();
                self.accumulate(*a, &ga);
                self.accumulate(*b, &gb);
            }
            Op::Scale(x, c) => {
                let g: Vec<T> = up.iter().map(|&u| u * *c).collect();
                self.accumulate(*x, &g);
            }
            Op::Concat(xs) => {
                let [n, total, h, w] = self.values[i].dims4("concat_channels").expect("rank 4");
                let plane = h * w;
                let mut offset = 0;
                for &x in xs {
                    let c = self.values[x.0].shape()[1];
                    if self.requires[x.0] {
                        let mut g = Vec::with_capacity(n * c * plane);
                        for s in 0..n {
                            let start = (s * total + offset) * plane;
                            g.extend_from_slice(&up[start..start + c * plane]);
                        }
                        self.accumulate(x, &g);
                    }
                    offset += c;
                }
            }
            Op::Reshape(x) => self.accumulate(*x, up),
            Op::Sum(x) => {
                let g = vec![up[0]; self.values[x.0].numel()];
                self.accumulate(*x, &g);
            }
            Op::Dwt(x) => {
                // orthonormal: the adjoint is the inverse
                let shape = self.values[i].shape().to_vec();
                let g = wavelet::idwt2d(&Tensor::new(shape, up.to_vec()).expect("grad shape"))
                    .expect("validated in forward");
                self.accumulate(*x, g.data());
            }
            Op::Idwt(x) => {
                let shape = self.values[i].shape().to_vec();
                let g = wavelet::dwt2d(&Tensor::new(shape, up.to_vec()).expect("grad shape"))
                    .expect("validated in forward");
                self.accumulate(*x, g.data());
            }
            Op::Mse { pred, target, scale } => {
                let two = T::lit(2.0);
                let g: Vec<T> = self.values[pred.0]
                    .data()
                    .iter()
                    .zip(self.values[target.0].data())
                    .map(|(p, t)| two * *scale * (*p - *t) * up[0])
                    .collect();
                self.accumulate(*pred, &g);
                let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                self.accumulate(*target, &neg);
            }
            Op::Charbonnier { pred, target, eps } => {
                let n = T::lit(self.values[pred.0].numel() as f64);
                let g: Vec<T> = self.values[pred.0]
                    .data()
                    .iter()
                    .zip(self.values[target.0].data())
                    .map(|(p, t)| {
                        let r = *p - *t;
                        r / (r * r + *eps * *eps).sqrt() / n * up[0]
                    })
                    .collect();
                self.accumulate(*pred, &g);
                let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                self.accumulate(*target, &neg);
            }
            Op::Custom { inputs, backward } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.values[v.0]).collect();
                let grads = backward(&vals, up);
                for (&x, g) in inputs.iter().zip(grads) {
                    if let Some(g) = g {
                        self.accumulate(x, &g);
                    }
                }
            }
        }
        self.ops[i] = op;
    }

    fn backward_conv(&mut self, input: Var, weight: Var, bias: Var, geom: &ConvGeom, up: &[T]) {
        let n = self.values[input.0].shape()[0];
        let in_len = geom.cin * geom.h * geom.w;
        let out_len = geom.cout * geom.out_h() * geom.out_w();
        let mut dx = self.requires[input.0].then(|| vec![T::zero(); n * in_len]);
        let mut dw = self.requires[weight.0].then(|| vec![T::zero(); self.values[weight.0].numel()]);
        let mut db = self.requires[bias.0].then(|| vec![T::zero(); geom.cout]);
        let mut scratch = Vec::new();
        let x = self.values[input.0].data();
        let w = self.values[weight.0].data();
        for s in 0..n {
            conv::backward_sample(
                &x[s * in_len..(s + 1) * in_len],
                w,
                geom,
                &up[s * out_len..(s + 1) * out_len],
                dx.as_mut().map(|d| &mut d[s * in_len..(s + 1) * in_len]),
                dw.as_deref_mut(),
                db.as_deref_mut(),
                &mut scratch,
            );
        }
        for (v, g) in [(input, dx), (weight, dw), (bias, db)] {
            if let Some(g) = g {
                self.accumulate(v, &g);
            }
        }
    }

    fn backward_dyn_conv(&mut self, input: Var, attn: Var, kernels: Var, biases: Var, geom: &ConvGeom, up: &[T]) {
        let n = self.values[input.0].shape()[0];
        let nk = self.values[kernels.0].shape()[0];
        let in_len = geom.cin * geom.h * geom.w;
        let out_len = geom.cout * geom.out_h() * geom.out_w();
        let wlen = geom.cout * geom.patch_len();
        let need_agg = self.requires[attn.0] || self.requires[kernels.0] || self.requires[biases.0];
        let mut dx = self.requires[input.0].then(|| vec![T::zero(); n * in_len]);
        let mut dk = vec![T::zero(); nk * wlen];
        let mut dbs = vec![T::zero(); nk * geom.cout];
        let mut da = vec![T::zero(); n * nk];
        let mut scratch = Vec::new();
        let x = self.values[input.0].data();
        let a = self.values[attn.0].data();
        let kd = self.values[kernels.0].data();
        let bd = self.values[biases.0].data();
        for s in 0..n {
            let aw = &a[s * nk..(s + 1) * nk];
            let (w, _) = aggregate(aw, kd, bd);
            let mut dw = need_agg.then(|| vec![T::zero(); wlen]);
            let mut db = need_agg.then(|| vec![T::zero(); geom.cout]);
            conv::backward_sample(
                &x[s * in_len..(s + 1) * in_len],
                &w,
                geom,
                &up[s * out_len..(s + 1) * out_len],
                dx.as_mut().map(|d| &mut d[s * in_len..(s + 1) * in_len]),
                dw.as_deref_mut(),
                db.as_deref_mut(),
                &mut scratch,
            );
            if let (Some(dw), Some(db)) = (dw, db) {
                for i in 0..nk {
                    let ki = &kd[i * wlen..(i + 1) * wlen];
                    let bi = &bd[i * geom.cout..(i + 1) * geom.cout];
                    let dot_w: T = dw.iter().zip(ki).map(|(g, k)| *g * *k).sum();
                    let dot_b: T = db.iter().zip(bi).map(|(g, b)| *g * *b).sum();
                    da[s * nk + i] = dot_w + dot_b;
                    for (d, g) in dk[i * wlen..(i + 1) * wlen].iter_mut().zip(&dw) {
                        *d = *d + aw[i] * *g;
                    }
                    for (d, g) in dbs[i * geom.cout..(i + 1) * geom.cout].iter_mut().zip(&db) {
                        *d = *d + aw[i] * *g;
                    }
                }
            }
        }
        if let Some(dx) = dx {
            self.accumulate(input, &dx);
        }
        if need_agg {
            self.accumulate(attn, &da);
            self.accumulate(kernels, &dk);
            self.accumulate(biases, &dbs);
        }
    }
}

/// Convex combination of K kernel/bias sets under attention weights.
pub(crate) fn aggregate<T: Element>(attn: &[T], kernels: &[T], biases: &[T]) -> (Vec<T>, Vec<T>) {
    let nk = attn.len();
    let wlen = kernels.len() / nk;
    let blen = biases.len() / nk;
    let mut w = vec![T::zero(); wlen];
    let mut b = vec![T::zero(); blen];
    for (i, &ai) in attn.iter().enumerate() {
        for (d, k) in w.iter_mut().zip(&kernels[i * wlen..(i + 1) * wlen]) {
            *d = *d + ai * *k;
        }
        for (d, k) in b.iter_mut().zip(&biases[i * blen..(i + 1) * blen]) {
            *d = *d + ai * *k;
        }
    }
    (w, b)
}
