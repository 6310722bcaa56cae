//! Reverse-mode differentiation over a linear tape of tensor operations.
//!
//! A [`Graph`] records every operation as it is evaluated. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! the gradient of every node that depends on a trainable leaf.

use crate::kernels::{self, AffinityMode, ConvSaved, PacSaved};
use crate::tensor::{Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        saved: ConvSaved<T>,
    },
    Pac {
        x: Var,
        guide: Option<Var>,
        w: Var,
        b: Option<Var>,
        log_sigma: Var,
        saved: PacSaved<T>,
    },
    Add(Var, Var),
    Affine {
        x: Var,
        scale: T,
    },
    Elu(Var),
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Tanh(Var),
    Sigmoid(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample2(Var),
    Concat(Var, Var),
    MinMaxNorm {
        x: Var,
        argmin: Vec<usize>,
        argmax: Vec<usize>,
        range: Vec<T>,
    },
    MeanAbsDiff(Var, Var),
    Rmse(Var, Var),
    Mse(Var, Var),
    MeanLog {
        x: Var,
        complement: bool,
        eps: T,
    },
    BceLogits {
        x: Var,
        target: Vec<T>,
    },
    WeightedSum(Vec<(Var, T)>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of evaluated operations.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], kept for leaf nodes only.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copy of `v` cut from the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let [cout, cin, k, k2] = self.value(w).shape();
        assert_eq!(k, k2, "square kernels only");
        assert_eq!(cin, self.value(x).channels(), "conv2d: channel mismatch");
        let bias = b.map(|b| self.value(b).data().to_vec());
        let (out, saved) = kernels::conv_forward(
            self.value(x),
            self.value(w).data(),
            bias.as_deref(),
            cout,
            k,
            stride,
            pad,
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(out, Op::Conv { x, w, b, saved }, &inputs)
    }

    /// Pixel-adaptive convolution; `guide` must be spatially aligned with `x`
    /// when `mode` is [`AffinityMode::Gaussian`].
    pub fn pac2d(
        &mut self,
        x: Var,
        guide: Option<Var>,
        w: Var,
        b: Option<Var>,
        log_sigma: Var,
        mode: AffinityMode,
    ) -> Var {
        let [cout, cin, k, _] = self.value(w).shape();
        assert_eq!(cin, self.value(x).channels(), "pac2d: channel mismatch");
        let guide_t = match mode {
            AffinityMode::Gaussian => {
                let gv = guide.expect("gaussian PAC needs guidance");
                let (xs, gs) = (self.value(x).shape(), self.value(gv).shape());
                assert_eq!(
                    (xs[0], xs[2], xs[3]),
                    (gs[0], gs[2], gs[3]),
                    "pac2d: guidance misaligned"
                );
                Some(gv)
            }
            AffinityMode::ConstantOne => None,
        };
        let bias = b.map(|b| self.value(b).data().to_vec());
        let (out, saved) = kernels::pac_forward(
            self.value(x),
            guide_t.map(|g| self.value(g)),
            self.value(w).data(),
            bias.as_deref(),
            self.value(log_sigma).data(),
            cout,
            k,
            mode,
        );
        let mut inputs = vec![x, w, log_sigma];
        inputs.extend(b);
        inputs.extend(guide_t);
        self.push(
            out,
            Op::Pac {
                x,
                guide: guide_t,
                w,
                b,
                log_sigma,
                saved,
            },
            &inputs,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "add: shape mismatch"
        );
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b), &[a, b])
    }

    /// `scale·x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        self.push(out, Op::Affine { x, scale }, &[x])
    }

    pub fn elu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { v.exp_m1() });
        self.push(out, Op::Elu(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let out = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { slope * v });
        self.push(out, Op::LeakyRelu { x, slope }, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(T::tanh);
        self.push(out, Op::Tanh(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let eps = T::lit(1e-5);
        let xt = self.value(x);
        let [n, c, _, _] = xt.shape();
        assert!(
            groups > 0 && c % groups == 0,
            "group_norm: {c} channels not divisible by {groups}"
        );
        let p = xt.plane();
        let per_group = c / groups * p;
        let mut xhat = vec![T::zero(); xt.len()];
        let mut rstd = vec![T::zero(); n * groups];
        for (gi, chunk) in xt.data().chunks(per_group).enumerate() {
            let count = T::from_usize(per_group).unwrap();
            let mean = chunk.iter().copied().sum::<T>() / count;
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
            let r = T::one() / (var + eps).sqrt();
            rstd[gi] = r;
            for (o, &v) in xhat[gi * per_group..(gi + 1) * per_group]
                .iter_mut()
                .zip(chunk)
            {
                *o = (v - mean) * r;
            }
        }
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![T::zero(); xhat.len()];
        for (plane, (o, h)) in out.chunks_mut(p).zip(xhat.chunks(p)).enumerate() {
            let (s, b) = (gm[plane % c], bt[plane % c]);
            for (o, &h) in o.iter_mut().zip(h) {
                *o = s * h + b;
            }
        }
        let out = Tensor::from_vec(xt.shape(), out).unwrap();
        self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// 2×2 max pooling with stride 2.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let [n, c, h, w] = xt.shape();
        assert!(
            h % 2 == 0 && w % 2 == 0,
            "max_pool2: odd spatial size {h}×{w}"
        );
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(out.capacity());
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xt.data()[idx] > xt.data()[best] {
                            best = idx;
                        }
                    }
                    argmax.push(best);
                    out.push(xt.data()[best]);
                }
            }
        }
        let out = Tensor::from_vec([n, c, ho, wo], out).unwrap();
        self.push(out, Op::MaxPool2 { x, argmax }, &[x])
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let [n, c, h, w] = xt.shape();
        let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        *out.at_mut(b, ch, y, xx) = xt.at(b, ch, y / 2, xx / 2);
                    }
                }
            }
        }
        self.push(out, Op::Upsample2(x), &[x])
    }

    /// Channel concatenation `[a, b]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (at, bt) = (self.value(a), self.value(b));
        let [n, ca, h, w] = at.shape();
        let [nb, cb, hb, wb] = bt.shape();
        assert_eq!((n, h, w), (nb, hb, wb), "concat: shape mismatch");
        let p = h * w;
        let mut data = Vec::with_capacity(at.len() + bt.len());
        for i in 0..n {
            data.extend_from_slice(&at.data()[i * ca * p..(i + 1) * ca * p]);
            data.extend_from_slice(&bt.data()[i * cb * p..(i + 1) * cb * p]);
        }
        let out = Tensor::from_vec([n, ca + cb, h, w], data).unwrap();
        self.push(out, Op::Concat(a, b), &[a, b])
    }

    /// Per-plane min–max normalization to `[0,1]`; constant planes map to 0.
    pub fn min_max_norm(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let p = xt.plane();
        let planes = xt.len() / p.max(1);
        let mut out = vec![T::zero(); xt.len()];
        let mut argmin = Vec::with_capacity(planes);
        let mut argmax = Vec::with_capacity(planes);
        let mut range = Vec::with_capacity(planes);
        for (pi, chunk) in xt.data().chunks(p).enumerate() {
            let (mut lo, mut hi) = (0, 0);
            for (i, &v) in chunk.iter().enumerate() {
                if v < chunk[lo] {
                    lo = i;
                }
                if v > chunk[hi] {
                    hi = i;
                }
            }
            let r = chunk[hi] - chunk[lo];
            argmin.push(pi * p + lo);
            argmax.push(pi * p + hi);
            range.push(r);
            if r > T::zero() {
                for (o, &v) in out[pi * p..(pi + 1) * p].iter_mut().zip(chunk) {
                    *o = ((v - chunk[lo]) / r).min(T::one()).max(T::zero());
                }
            }
        }
        let out = Tensor::from_vec(xt.shape(), out).unwrap();
        self.push(
            out,
            Op::MinMaxNorm {
                x,
                argmin,
                argmax,
                range,
            },
            &[x],
        )
    }

    /// Mean absolute difference, a scalar.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Var {
        let (at, bt) = (self.value(a), self.value(b));
        assert_eq!(at.shape(), bt.shape(), "mean_abs_diff: shape mismatch");
        let n = T::from_usize(at.len()).unwrap();
        let s = at
            .data()
            .iter()
            .zip(bt.data())
            .map(|(&x, &y)| (x - y).abs())
            .sum::<T>()
            / n;
        self.push(Tensor::scalar(s), Op::MeanAbsDiff(a, b), &[a, b])
    }

    fn mean_sq(&self, a: Var, b: Var) -> T {
        let (at, bt) = (self.value(a), self.value(b));
        assert_eq!(at.shape(), bt.shape(), "shape mismatch in squared error");
        let n = T::from_usize(at.len()).unwrap();
        at.data()
            .iter()
            .zip(bt.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<T>()
            / n
    }

    /// Root of the mean squared difference, a scalar.
    pub fn rmse(&mut self, a: Var, b: Var) -> Var {
        let s = self.mean_sq(a, b).sqrt();
        self.push(Tensor::scalar(s), Op::Rmse(a, b), &[a, b])
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let s = self.mean_sq(a, b);
        self.push(Tensor::scalar(s), Op::Mse(a, b), &[a, b])
    }

    /// Mean of `ln p` (or `ln(1 − p)` when `complement`), with `p` clamped to `[eps, 1−eps]`.
    pub fn mean_log(&mut self, x: Var, complement: bool, eps: T) -> Var {
        let xt = self.value(x);
        let n = T::from_usize(xt.len()).unwrap();
        let s = xt
            .data()
            .iter()
            .map(|&p| {
                let p = p.max(eps).min(T::one() - eps);
                if complement {
                    (T::one() - p).ln()
                } else {
                    p.ln()
                }
            })
            .sum::<T>()
            / n;
        self.push(Tensor::scalar(s), Op::MeanLog { x, complement, eps }, &[x])
    }

    /// Mean binary cross-entropy of logits against `{0,1}` targets.
    pub fn bce_with_logits(&mut self, x: Var, target: &Tensor<T>) -> Var {
        let xt = self.value(x);
        assert_eq!(
            xt.shape(),
            target.shape(),
            "bce_with_logits: shape mismatch"
        );
        let n = T::from_usize(xt.len()).unwrap();
        let s = xt
            .data()
            .iter()
            .zip(target.data())
            .map(|(&z, &t)| z.max(T::zero()) - z * t + (-z.abs()).exp().ln_1p())
            .sum::<T>()
            / n;
        let target = target.data().to_vec();
        self.push(Tensor::scalar(s), Op::BceLogits { x, target }, &[x])
    }

    /// `Σ wᵢ·xᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        let mut s = T::zero();
        for &(v, w) in terms {
            s += w * self.value(v).item();
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(Tensor::scalar(s), Op::WeightedSum(terms.to_vec()), &inputs)
    }

    /// Gradients of the scalar `loss` with respect to every upstream node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        self.backward_with(loss, Tensor::scalar(T::one()))
    }

    /// Vector-Jacobian product seeded with `seed` at `out`.
    pub fn backward_with(&self, out: Var, seed: Tensor<T>) -> Gradients<T> {
        assert_eq!(
            self.value(out).shape(),
            seed.shape(),
            "backward: seed shape mismatch"
        );
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Gradients { grads }
    }

    fn send(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if self.nodes[v.0].requires_grad {
            accumulate(&mut grads[v.0], g);
        }
    }

    fn send_vec(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Vec<T>) {
        if self.nodes[v.0].requires_grad {
            let t = Tensor::from_vec(self.value(v).shape(), g).expect("gradient matches shape");
            accumulate(&mut grads[v.0], t);
        }
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let one = T::one();
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, saved } => {
                let (dx, dw, db) = kernels::conv_backward(
                    saved,
                    self.value(*w).data(),
                    g,
                    self.requires_grad(*x),
                    self.requires_grad(*w),
                );
                if let Some(dx) = dx {
                    self.send_vec(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.send_vec(grads, *w, dw);
                }
                if let Some(b) = b {
                    self.send_vec(grads, *b, db);
                }
            }
            Op::Pac {
                x,
                guide,
                w,
                b,
                log_sigma,
                saved,
            } => {
                let needs = kernels::PacNeeds {
                    input: self.requires_grad(*x),
                    guide: guide.is_some_and(|gv| self.requires_grad(gv)),
                };
                let pg = kernels::pac_backward(
                    saved,
                    self.value(*x),
                    guide.map(|gv| self.value(gv)),
                    self.value(*w).data(),
                    self.value(*log_sigma).data(),
                    g,
                    needs,
                );
                if let Some(dx) = pg.input {
                    self.send_vec(grads, *x, dx);
                }
                self.send_vec(grads, *w, pg.weight);
                self.send_vec(grads, *log_sigma, pg.log_sigma);
                if let Some(b) = b {
                    self.send_vec(grads, *b, pg.bias);
                }
                if let (Some(gv), Some(dg)) = (guide, pg.guide) {
                    self.send_vec(grads, *gv, dg);
                }
            }
            Op::Add(a, b) => {
                self.send(grads, *a, g.clone());
                self.send(grads, *b, g.clone());
            }
            Op::Affine { x, scale } => {
                let s = *scale;
                self.send(grads, *x, g.map(|v| v * s));
            }
            Op::Elu(x) => {
                let xt = self.value(*x);
                let dx = zip_map(g, xt, &node.value, |gv, xv, yv| {
                    if xv > T::zero() {
                        gv
                    } else {
                        gv * (yv + one)
                    }
                });
                self.send_vec(grads, *x, dx);
            }
            Op::LeakyRelu { x, slope } => {
                let s = *slope;
                let dx = zip_map(g, self.value(*x), &node.value, |gv, xv, _| {
                    if xv > T::zero() {
                        gv
                    } else {
                        gv * s
                    }
                });
                self.send_vec(grads, *x, dx);
            }
            Op::Tanh(x) => {
                let dx = zip_map(g, &node.value, &node.value, |gv, yv, _| {
                    gv * (one - yv * yv)
                });
                self.send_vec(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let dx = zip_map(g, &node.value, &node.value, |gv, yv, _| {
                    gv * yv * (one - yv)
                });
                self.send_vec(grads, *x, dx);
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            } => {
                let [_, c, _, _] = node.value.shape();
                let p = node.value.plane();
                let gm = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                // dh = g·γ, formed plane by plane.
                let mut dh = vec![T::zero(); xhat.len()];
                for (plane, ((d, gp), hp)) in dh
                    .chunks_mut(p)
                    .zip(g.data().chunks(p))
                    .zip(xhat.chunks(p))
                    .enumerate()
                {
                    let ch = plane % c;
                    let (mut sg, mut sgh) = (T::zero(), T::zero());
                    for ((d, &gv), &h) in d.iter_mut().zip(gp).zip(hp) {
                        *d = gv * gm[ch];
                        sg += gv;
                        sgh += gv * h;
                    }
                    dgamma[ch] += sgh;
                    dbeta[ch] += sg;
                }
                let per_group = c / groups * p;
                let count = T::from_usize(per_group).unwrap();
                let mut dx = vec![T::zero(); xhat.len()];
                for (gi, ((dxg, dhg), hg)) in dx
                    .chunks_mut(per_group)
                    .zip(dh.chunks(per_group))
                    .zip(xhat.chunks(per_group))
                    .enumerate()
                {
                    let (mut sum_dh, mut sum_dh_h) = (T::zero(), T::zero());
                    for (&d, &h) in dhg.iter().zip(hg) {
                        sum_dh += d;
                        sum_dh_h += d * h;
                    }
                    let (m1, m2, r) = (sum_dh / count, sum_dh_h / count, rstd[gi]);
                    for ((o, &d), &h) in dxg.iter_mut().zip(dhg).zip(hg) {
                        *o = r * (d - m1 - h * m2);
                    }
                }
                self.send_vec(grads, *x, dx);
                self.send_vec(grads, *gamma, dgamma);
                self.send_vec(grads, *beta, dbeta);
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    dx[src] += gv;
                }
                self.send_vec(grads, *x, dx);
            }
            Op::Upsample2(x) => {
                let [n, c, h, w] = self.value(*x).shape();
                let mut dx = Tensor::zeros([n, c, h, w]);
                for b in 0..n {
                    for ch in 0..c {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                *dx.at_mut(b, ch, y / 2, xx / 2) += g.at(b, ch, y, xx);
                            }
                        }
                    }
                }
                self.send(grads, *x, dx);
            }
            Op::Concat(a, b) => {
                let ca = self.value(*a).channels();
                let [n, c, h, w] = g.shape();
                let p = h * w;
                let cb = c - ca;
                let mut da = Vec::with_capacity(n * ca * p);
                let mut db = Vec::with_capacity(n * cb * p);
                for i in 0..n {
                    let base = i * c * p;
                    da.extend_from_slice(&g.data()[base..base + ca * p]);
                    db.extend_from_slice(&g.data()[base + ca * p..base + c * p]);
                }
                self.send_vec(grads, *a, da);
                self.send_vec(grads, *b, db);
            }
            Op::MinMaxNorm {
                x,
                argmin,
                argmax,
                range,
            } => {
                let p = node.value.plane();
                let y = node.value.data();
                let mut dx = vec![T::zero(); y.len()];
                for (pi, &r) in range.iter().enumerate() {
                    if r <= T::zero() {
                        continue;
                    }
                    let mut dmin = T::zero();
                    let mut dmax = T::zero();
                    for i in pi * p..(pi + 1) * p {
                        let gv = g.data()[i];
                        dx[i] += gv / r;
                        // y = (x − lo)/(hi − lo)
                        dmin += gv * (y[i] - one) / r;
                        dmax -= gv * y[i] / r;
                    }
                    dx[argmin[pi]] += dmin;
                    dx[argmax[pi]] += dmax;
                }
                self.send_vec(grads, *x, dx);
            }
            Op::MeanAbsDiff(a, b) => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let scale = g.item() / T::from_usize(at.len()).unwrap();
                let da: Vec<T> = at
                    .data()
                    .iter()
                    .zip(bt.data())
                    .map(|(&x, &y)| {
                        let d = x - y;
                        if d > T::zero() {
                            scale
                        } else if d < T::zero() {
                            -scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                let db: Vec<T> = da.iter().map(|&v| -v).collect();
                self.send_vec(grads, *a, da);
                self.send_vec(grads, *b, db);
            }
            Op::Rmse(a, b) | Op::Mse(a, b) => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let n = T::from_usize(at.len()).unwrap();
                let factor = match node.op {
                    Op::Rmse(..) => {
                        let r = node.value.item();
                        if r > T::zero() {
                            g.item() / (n * r)
                        } else {
                            T::zero()
                        }
                    }
                    _ => T::lit(2.0) * g.item() / n,
                };
                let da: Vec<T> = at
                    .data()
                    .iter()
                    .zip(bt.data())
                    .map(|(&x, &y)| factor * (x - y))
                    .collect();
                let db: Vec<T> = da.iter().map(|&v| -v).collect();
                self.send_vec(grads, *a, da);
                self.send_vec(grads, *b, db);
            }
            Op::MeanLog { x, complement, eps } => {
                let xt = self.value(*x);
                let scale = g.item() / T::from_usize(xt.len()).unwrap();
                let (lo, hi) = (*eps, one - *eps);
                let dx: Vec<T> = xt
                    .data()
                    .iter()
                    .map(|&p| {
                        if p < lo || p > hi {
                            T::zero()
                        } else if *complement {
                            -scale / (one - p)
                        } else {
                            scale / p
                        }
                    })
                    .collect();
                self.send_vec(grads, *x, dx);
            }
            Op::BceLogits { x, target } => {
                let xt = self.value(*x);
                let scale = g.item() / T::from_usize(xt.len()).unwrap();
                let dx: Vec<T> = xt
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&z, &t)| scale * (one / (one + (-z).exp()) - t))
                    .collect();
                self.send_vec(grads, *x, dx);
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    self.send(grads, v, Tensor::scalar(w * g.item()));
                }
            }
        }
    }
}

fn zip_map<T: Real>(
    g: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T, T) -> T,
) -> Vec<T> {
    g.data()
        .iter()
        .zip(a.data())
        .zip(b.data())
        .map(|((&gv, &av), &bv)| f(gv, av, bv))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    type Build = dyn Fn(&mut Graph<f64>, Var) -> Var;

    /// Central-difference check of `d loss / d x` for a unary pipeline.
    fn check_unary(shape: [usize; 4], build: &Build) {
        let data: Vec<f64> = (0..shape.iter().product::<usize>())
            .map(|i| ((i * 53 % 97) as f64 / 97.0 - 0.45) * 1.7)
            .collect();
        let x0 = Tensor::from_vec(shape, data).unwrap();
        let weights: Vec<f64> = (0..200)
            .map(|i| ((i * 31 % 17) as f64 / 17.0) - 0.4)
            .collect();
        let eval = |x: &Tensor<f64>| -> (f64, Option<Tensor<f64>>) {
            let mut g = Graph::new();
            let xv = g.param(x.clone());
            let y = build(&mut g, xv);
            let yt = g.value(y).clone();
            let w = Tensor::from_vec(yt.shape(), weights[..yt.len()].to_vec()).unwrap();
            let loss: f64 = yt.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
            let grads = g.backward_with(y, w);
            (loss, grads.get(xv).cloned())
        };
        let (_, analytic) = eval(&x0);
        let analytic = analytic.expect("gradient reaches input");
        let h = 1e-6;
        for i in 0..x0.len() {
            let mut xp = x0.clone();
            xp.data_mut()[i] += h;
            let mut xm = x0.clone();
            xm.data_mut()[i] -= h;
            let fd = (eval(&xp).0 - eval(&xm).0) / (2.0 * h);
            let a = analytic.data()[i];
            assert!(
                (fd - a).abs() <= 1e-6 * (1.0 + fd.abs()),
                "index {i}: analytic {a} vs fd {fd}"
            );
        }
    }

    #[test]
    fn elementwise_gradients() {
        check_unary([1, 2, 3, 3], &|g, x| g.elu(x));
        check_unary([1, 2, 3, 3], &|g, x| g.tanh(x));
        check_unary([1, 2, 3, 3], &|g, x| g.sigmoid(x));
        check_unary([1, 2, 3, 3], &|g, x| g.leaky_relu(x, 0.2));
        check_unary([1, 2, 3, 3], &|g, x| g.affine(x, 0.5, 0.5));
    }

    #[test]
    fn structural_gradients() {
        check_unary([2, 2, 4, 4], &|g, x| g.max_pool2(x));
        check_unary([1, 2, 2, 3], &|g, x| g.upsample2(x));
        check_unary([2, 3, 2, 2], &|g, x| {
            let y = g.tanh(x);
            g.concat(x, y)
        });
        check_unary([2, 2, 3, 3], &|g, x| g.min_max_norm(x));
    }

    #[test]
    fn group_norm_gradient() {
        check_unary([2, 4, 3, 3], &|g, x| {
            let gamma = g.param(Tensor::from_vec([1, 4, 1, 1], vec![1.0, 0.5, -0.7, 2.0]).unwrap());
            let beta = g.param(Tensor::from_vec([1, 4, 1, 1], vec![0.1, 0.0, 0.3, -0.2]).unwrap());
            g.group_norm(x, gamma, beta, 2)
        });
    }

    #[test]
    fn reduction_gradients() {
        let target = Tensor::from_vec([1, 1, 2, 3], vec![0.3, -0.1, 0.2, 0.9, -0.5, 0.05]).unwrap();
        let t2 = target.clone();
        check_unary([1, 1, 2, 3], &move |g, x| {
            let t = g.constant(t2.clone());
            g.rmse(x, t)
        });
        let t3 = target.clone();
        check_unary([1, 1, 2, 3], &move |g, x| {
            let t = g.constant(t3.clone());
            g.mse(x, t)
        });
        let t4 = target.map(|v| if v > 0.1 { 1.0 } else { 0.0 });
        check_unary([1, 1, 2, 3], &move |g, x| g.bce_with_logits(x, &t4));
        check_unary([1, 1, 2, 3], &|g, x| {
            let p = g.sigmoid(x);
            g.mean_log(p, true, 1e-7)
        });
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(2.0));
        let d = g.detach(x);
        let y = g.weighted_sum(&[(x, 1.0), (d, 5.0)]);
        let grads = g.backward(y);
        assert_eq!(grads.get(x).unwrap().item(), 1.0);
        assert!(grads.get(d).is_none());
    }
}
