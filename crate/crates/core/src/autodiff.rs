//! Reverse-mode automatic differentiation over batched tensors.
//!
//! A [`Graph`] records every operation of one forward pass. Values are
//! computed eagerly; [`Graph::backward`] walks the tape in reverse and
//! returns gradients for every node that depends on a parameter or a
//! differentiable input.
//!
//! Image-like tensors use the `(batch, channels, height, width)` layout.
//! Per-sample loss terms are `(batch,)` vectors.

use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_size(&self, size: usize) -> usize {
        (size + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

#[derive(Debug)]
struct AdaInCache<T> {
    // per (sample, channel): content mean/std, style mean/std, floored flags
    content_mean: Vec<T>,
    content_std: Vec<T>,
    content_floored: Vec<bool>,
    style_mean: Vec<T>,
    style_std: Vec<T>,
    style_floored: Vec<bool>,
}

#[derive(Debug)]
enum Op<T> {
    Constant,
    Input,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Softplus(Var),
    ClampMax(Var, T),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    GlobalAvgPool(Var),
    Concat(Var, Var),
    Column(Var, usize),
    AdaIn {
        content: Var,
        style: Var,
        cache: AdaInCache<T>,
    },
    SpatialMask(Var, Tensor<T>),
    /// Per-position norms `sqrt(Σ_c x² + eps)`, `(N·h·w)`.
    UnitPositions(Var, Vec<T>),
    WeightedSqDist {
        a: Var,
        b: Var,
        weights: Tensor<T>,
        denom: T,
    },
    Chamfer {
        a: Var,
        b: Var,
        nn_ab: Vec<usize>,
        nn_ba: Vec<usize>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn of(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient accumulated for `id` across every use of the parameter.
    pub fn param(&self, id: ParamId) -> Option<Tensor<T>> {
        let mut acc: Option<Tensor<T>> = None;
        for &(pid, node) in &self.params {
            if pid != id {
                continue;
            }
            if let Some(g) = &self.grads[node] {
                match &mut acc {
                    Some(a) => a.add_assign(g),
                    None => acc = Some(g.clone()),
                }
            }
        }
        acc
    }
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Value that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Value that receives a gradient (used for input-gradient checks).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, true)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    /// Copy of `v` cut from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let t = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Add(a, b), t)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let t = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Sub(a, b), t)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let t = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Mul(a, b), t)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x * s);
        let t = self.tracked(a);
        self.push(value, Op::Scale(a, s), t)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x + s);
        let t = self.tracked(a);
        self.push(value, Op::AddScalar(a), t)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let t = self.tracked(a);
        self.push(value, Op::Relu(a), t)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let value = self.value(a).map(|x| if x > T::zero() { x } else { x * slope });
        let t = self.tracked(a);
        self.push(value, Op::LeakyRelu(a, slope), t)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus);
        let t = self.tracked(a);
        self.push(value, Op::Softplus(a), t)
    }

    /// `min(x, ceiling)`; zero gradient where the ceiling is active.
    pub fn clamp_max(&mut self, a: Var, ceiling: T) -> Var {
        let value = self.value(a).map(|x| if x > ceiling { ceiling } else { x });
        let t = self.tracked(a);
        self.push(value, Op::ClampMax(a, ceiling), t)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let t = self.tracked(a);
        self.push(value, Op::Sum(a), t)
    }

    /// 2-D convolution with bias. `x: (N, Cin, H, W)`, `w: (Cout, Cin, k, k)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW");
        assert_eq!(ws.len(), 4, "conv2d weight must be (Cout, Cin, k, k)");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
        assert_eq!(ws[2], ws[3], "square kernels only");
        let geom = ConvGeom {
            kernel: ws[2],
            stride,
            pad,
        };
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let cout = ws[0];
        let ho = geom.out_size(h);
        let wo = geom.out_size(wd);
        let kdim = cin * geom.kernel * geom.kernel;
        let p = ho * wo;
        let mut cols = vec![T::zero(); n * kdim * p];
        let mut out = vec![T::zero(); n * cout * p];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            for s in 0..n {
                let col = &mut cols[s * kdim * p..(s + 1) * kdim * p];
                im2col(
                    &xv[s * cin * h * wd..(s + 1) * cin * h * wd],
                    cin,
                    h,
                    wd,
                    geom,
                    ho,
                    wo,
                    col,
                );
                let o = &mut out[s * cout * p..(s + 1) * cout * p];
                for (co, row) in o.chunks_mut(p).enumerate() {
                    row.fill(bv[co]);
                }
                T::gemm(
                    cout,
                    kdim,
                    p,
                    T::one(),
                    wv,
                    (kdim as isize, 1),
                    col,
                    (p as isize, 1),
                    T::one(),
                    o,
                    (p as isize, 1),
                );
            }
        }
        let value = Tensor::from_vec(&[n, cout, ho, wo], out).expect("conv output shape");
        let t = self.tracked(x) || self.tracked(w) || self.tracked(b);
        self.push(value, Op::Conv2d { x, w, b, geom, cols }, t)
    }

    /// `x: (N, D)`, `w: (O, D)`, `b: (O,)` → `(N, O)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 2);
        assert_eq!(xs[1], ws[1], "linear input width mismatch");
        let (n, d, o) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); n * o];
        let bv = self.value(b).data();
        for row in out.chunks_mut(o) {
            row.copy_from_slice(bv);
        }
        T::gemm(
            n,
            d,
            o,
            T::one(),
            self.value(x).data(),
            (d as isize, 1),
            self.value(w).data(),
            (1, d as isize),
            T::one(),
            &mut out,
            (o as isize, 1),
        );
        let value = Tensor::from_vec(&[n, o], out).expect("linear output shape");
        let t = self.tracked(x) || self.tracked(w) || self.tracked(b);
        self.push(value, Op::Linear { x, w, b }, t)
    }

    /// `(N, C, H, W)` → `(N, C)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (n, c, p) = (s[0], s[1], s[2] * s[3]);
        let inv = T::one() / T::from_usize(p).unwrap();
        let xv = self.value(x).data();
        let out: Vec<T> = xv.chunks(p).map(|ch| ch.iter().copied().sum::<T>() * inv).collect();
        let value = Tensor::from_vec(&[n, c], out).expect("pool shape");
        let t = self.tracked(x);
        self.push(value, Op::GlobalAvgPool(x), t)
    }

    /// Channel concatenation of two `(N, C, H, W)` tensors.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert_eq!(sa[0], sb[0]);
        assert_eq!(sa[2..], sb[2..], "concat spatial mismatch");
        let n = sa[0];
        let la = sa[1..].iter().product::<usize>();
        let lb = sb[1..].iter().product::<usize>();
        let mut out = Vec::with_capacity(n * (la + lb));
        for s in 0..n {
            out.extend_from_slice(&self.value(a).data()[s * la..(s + 1) * la]);
            out.extend_from_slice(&self.value(b).data()[s * lb..(s + 1) * lb]);
        }
        let value = Tensor::from_vec(&[n, sa[1] + sb[1], sa[2], sa[3]], out).expect("concat");
        let t = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Concat(a, b), t)
    }

    /// Column `j` of an `(N, K)` matrix.
    pub fn column(&mut self, x: Var, j: usize) -> Var {
        let s = self.shape(x).to_vec();
        let k = s[1];
        let out: Vec<T> = self.value(x).data().chunks(k).map(|r| r[j]).collect();
        let value = Tensor::from_vec(&[s[0]], out).expect("column");
        let t = self.tracked(x);
        self.push(value, Op::Column(x, j), t)
    }

    /// Adaptive instance normalization: re-statistics each channel of
    /// `content` to the spatial mean and standard deviation of `style`.
    /// Population standard deviations are floored at `eps`.
    pub fn adain(&mut self, content: Var, style: Var, eps: T) -> Var {
        let s = self.shape(content).to_vec();
        assert_eq!(s, self.shape(style), "adain shape mismatch");
        let p = s[2] * s[3];
        let groups = s[0] * s[1];
        let cv = self.value(content).data();
        let sv = self.value(style).data();
        let mut cache = AdaInCache {
            content_mean: Vec::with_capacity(groups),
            content_std: Vec::with_capacity(groups),
            content_floored: Vec::with_capacity(groups),
            style_mean: Vec::with_capacity(groups),
            style_std: Vec::with_capacity(groups),
            style_floored: Vec::with_capacity(groups),
        };
        let mut out = vec![T::zero(); cv.len()];
        for g in 0..groups {
            let c = &cv[g * p..(g + 1) * p];
            let st = &sv[g * p..(g + 1) * p];
            let (cm, cs, cf) = moments(c, eps);
            let (sm, ss, sf) = moments(st, eps);
            for (o, &x) in out[g * p..(g + 1) * p].iter_mut().zip(c) {
                *o = ss * (x - cm) / cs + sm;
            }
            cache.content_mean.push(cm);
            cache.content_std.push(cs);
            cache.content_floored.push(cf);
            cache.style_mean.push(sm);
            cache.style_std.push(ss);
            cache.style_floored.push(sf);
        }
        let value = Tensor::from_vec(&s, out).expect("adain shape");
        let t = self.tracked(content) || self.tracked(style);
        self.push(value, Op::AdaIn { content, style, cache }, t)
    }

    /// Multiply every channel of `x: (N, C, H, W)` by a constant `(N, H, W)` mask.
    pub fn spatial_mask(&mut self, x: Var, mask: Tensor<T>) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(mask.shape(), [s[0], s[2], s[3]], "mask shape mismatch");
        let p = s[2] * s[3];
        let mut out = self.value(x).data().to_vec();
        for (i, chunk) in out.chunks_mut(p).enumerate() {
            let m = mask.outer(i / s[1]);
            for (o, &w) in chunk.iter_mut().zip(m) {
                *o *= w;
            }
        }
        let value = Tensor::from_vec(&s, out).expect("mask shape");
        let t = self.tracked(x);
        self.push(value, Op::SpatialMask(x, mask), t)
    }

    /// Scales every position's channel vector of `x: (N, C, H, W)` to unit
    /// length: `x / sqrt(Σ_c x² + eps)`.
    pub fn unit_positions(&mut self, x: Var, eps: T) -> Var {
        let s = self.shape(x).to_vec();
        let (n, c, p) = (s[0], s[1], s[2] * s[3]);
        let xv = self.value(x).data();
        let mut norms = vec![eps; n * p];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * p;
                for q in 0..p {
                    norms[i * p + q] += xv[base + q] * xv[base + q];
                }
            }
        }
        norms.iter_mut().for_each(|v| *v = v.sqrt());
        let mut out = xv.to_vec();
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * p;
                for q in 0..p {
                    out[base + q] /= norms[i * p + q];
                }
            }
        }
        let value = Tensor::from_vec(&s, out).expect("unit shape");
        let t = self.tracked(x);
        self.push(value, Op::UnitPositions(x, norms), t)
    }

    /// Per sample `Σ_ij w_ij ‖a_ij − b_ij‖² / denom`, with the squared norm
    /// taken over channels. `weights: (N, H, W)` is constant.
    pub fn weighted_sq_dist(&mut self, a: Var, b: Var, weights: Tensor<T>, denom: T) -> Var {
        let s = self.shape(a).to_vec();
        assert_eq!(s, self.shape(b), "weighted distance shape mismatch");
        assert_eq!(weights.shape(), [s[0], s[2], s[3]], "weight shape mismatch");
        let (n, c, p) = (s[0], s[1], s[2] * s[3]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); n];
        for (i, o) in out.iter_mut().enumerate() {
            let w = weights.outer(i);
            let mut acc = T::zero();
            for ch in 0..c {
                let base = (i * c + ch) * p;
                for q in 0..p {
                    let d = av[base + q] - bv[base + q];
                    acc += w[q] * d * d;
                }
            }
            *o = acc / denom;
        }
        let value = Tensor::from_vec(&[n], out).expect("dist shape");
        let t = self.tracked(a) || self.tracked(b);
        self.push(value, Op::WeightedSqDist { a, b, weights, denom }, t)
    }

    /// Symmetric chamfer distance between the spatial positions of `a` and
    /// `b`, each position being a channel vector. Per sample
    /// `(Σ_i min_j ‖a_i − b_j‖² + Σ_j min_i ‖b_j − a_i‖²) / (2 h w)`.
    pub fn chamfer(&mut self, a: Var, b: Var) -> Var {
        let s = self.shape(a).to_vec();
        assert_eq!(s, self.shape(b), "chamfer shape mismatch");
        let (n, c, p) = (s[0], s[1], s[2] * s[3]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut nn_ab = vec![0usize; n * p];
        let mut nn_ba = vec![0usize; n * p];
        let mut out = vec![T::zero(); n];
        let mut dist = vec![T::zero(); p * p];
        for i in 0..n {
            let xa = &av[i * c * p..(i + 1) * c * p];
            let xb = &bv[i * c * p..(i + 1) * c * p];
            pairwise_sq_dist(xa, xb, c, p, &mut dist);
            let mut total = T::zero();
            for q in 0..p {
                let (j, d) = argmin(&dist[q * p..(q + 1) * p]);
                nn_ab[i * p + q] = j;
                total += d;
            }
            for r in 0..p {
                let mut best = 0;
                let mut bd = dist[r];
                for q in 1..p {
                    let d = dist[q * p + r];
                    if d < bd {
                        bd = d;
                        best = q;
                    }
                }
                nn_ba[i * p + r] = best;
                total += bd;
            }
            out[i] = total / T::from_usize(2 * p).unwrap();
        }
        let value = Tensor::from_vec(&[n], out).expect("chamfer shape");
        let t = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Chamfer { a, b, nn_ab, nn_ba }, t)
    }

    /// Gradients of the scalar (single-element) node `root`.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));
        let mut params = Vec::new();
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if let Op::Param(pid) = node.op {
                params.push((pid, idx));
            }
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads, params }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.tracked(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Constant | Op::Input | Op::Param(_) => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let ga = g.zip_map(self.value(*b), |x, y| x * y);
                let gb = g.zip_map(self.value(*a), |x, y| x * y);
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|v| v * s));
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Relu(a) => {
                let ga = g.zip_map(self.value(*a), |d, x| if x > T::zero() { d } else { T::zero() });
                self.accumulate(grads, *a, ga);
            }
            Op::LeakyRelu(a, slope) => {
                let slope = *slope;
                let ga = g.zip_map(self.value(*a), |d, x| if x > T::zero() { d } else { d * slope });
                self.accumulate(grads, *a, ga);
            }
            Op::Softplus(a) => {
                let ga = g.zip_map(self.value(*a), |d, x| d * sigmoid(x));
                self.accumulate(grads, *a, ga);
            }
            Op::ClampMax(a, ceiling) => {
                let c = *ceiling;
                let ga = g.zip_map(self.value(*a), |d, x| if x > c { T::zero() } else { d });
                self.accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                let ga = Tensor::full(self.value(*a).shape(), gv);
                self.accumulate(grads, *a, ga);
            }
            Op::Conv2d { x, w, b, geom, cols } => self.conv2d_backward(*x, *w, *b, *geom, cols, g, grads),
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x).to_vec();
                let (n, d) = (xs[0], xs[1]);
                let o = self.shape(*w)[0];
                if self.tracked(*x) {
                    let mut dx = vec![T::zero(); n * d];
                    T::gemm(
                        n,
                        o,
                        d,
                        T::one(),
                        g.data(),
                        (o as isize, 1),
                        self.value(*w).data(),
                        (d as isize, 1),
                        T::zero(),
                        &mut dx,
                        (d as isize, 1),
                    );
                    self.accumulate(grads, *x, Tensor::from_vec(&xs, dx).unwrap());
                }
                if self.tracked(*w) {
                    let mut dw = vec![T::zero(); o * d];
                    T::gemm(
                        o,
                        n,
                        d,
                        T::one(),
                        g.data(),
                        (1, o as isize),
                        self.value(*x).data(),
                        (d as isize, 1),
                        T::zero(),
                        &mut dw,
                        (d as isize, 1),
                    );
                    self.accumulate(grads, *w, Tensor::from_vec(&[o, d], dw).unwrap());
                }
                if self.tracked(*b) {
                    let mut db = vec![T::zero(); o];
                    for row in g.data().chunks(o) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::from_vec(&[o], db).unwrap());
                }
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x).to_vec();
                let p = s[2] * s[3];
                let inv = T::one() / T::from_usize(p).unwrap();
                let mut dx = Vec::with_capacity(s.iter().product());
                for &gv in g.data() {
                    dx.extend(std::iter::repeat_n(gv * inv, p));
                }
                self.accumulate(grads, *x, Tensor::from_vec(&s, dx).unwrap());
            }
            Op::Concat(a, b) => {
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                let n = sa[0];
                let la = sa[1..].iter().product::<usize>();
                let lb = sb[1..].iter().product::<usize>();
                let mut ga = Vec::with_capacity(n * la);
                let mut gb = Vec::with_capacity(n * lb);
                for s in 0..n {
                    let base = s * (la + lb);
                    ga.extend_from_slice(&g.data()[base..base + la]);
                    gb.extend_from_slice(&g.data()[base + la..base + la + lb]);
                }
                self.accumulate(grads, *a, Tensor::from_vec(&sa, ga).unwrap());
                self.accumulate(grads, *b, Tensor::from_vec(&sb, gb).unwrap());
            }
            Op::Column(x, j) => {
                let s = self.shape(*x).to_vec();
                let mut dx = Tensor::zeros(&s);
                let k = s[1];
                for (i, &gv) in g.data().iter().enumerate() {
                    dx.data_mut()[i * k + j] = gv;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::AdaIn { content, style, cache } => self.adain_backward(*content, *style, cache, g, grads),
            Op::SpatialMask(x, mask) => {
                let s = self.shape(*x).to_vec();
                let p = s[2] * s[3];
                let mut dx = g.data().to_vec();
                for (i, chunk) in dx.chunks_mut(p).enumerate() {
                    let m = mask.outer(i / s[1]);
                    for (o, &w) in chunk.iter_mut().zip(m) {
                        *o *= w;
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(&s, dx).unwrap());
            }
            Op::UnitPositions(x, norms) => {
                // dx = (dy − y (y·dy)) / n per position
                let s = self.shape(*x).to_vec();
                let (n, c, p) = (s[0], s[1], s[2] * s[3]);
                let y = self.value(Var(idx)).data();
                let mut dot = vec![T::zero(); n * p];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * p;
                        for q in 0..p {
                            dot[i * p + q] += y[base + q] * g.data()[base + q];
                        }
                    }
                }
                let mut dx = vec![T::zero(); g.len()];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * p;
                        for q in 0..p {
                            let k = i * p + q;
                            dx[base + q] = (g.data()[base + q] - y[base + q] * dot[k]) / norms[k];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(&s, dx).unwrap());
            }
            Op::WeightedSqDist { a, b, weights, denom } => {
                let s = self.shape(*a).to_vec();
                let (c, p) = (s[1], s[2] * s[3]);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let two = T::from_f64_lossy(2.0);
                let mut da = vec![T::zero(); av.len()];
                for (i, &gv) in g.data().iter().enumerate() {
                    let w = weights.outer(i);
                    let k = gv * two / *denom;
                    for ch in 0..c {
                        let base = (i * c + ch) * p;
                        for q in 0..p {
                            da[base + q] = k * w[q] * (av[base + q] - bv[base + q]);
                        }
                    }
                }
                let db: Vec<T> = da.iter().map(|&v| -v).collect();
                self.accumulate(grads, *a, Tensor::from_vec(&s, da).unwrap());
                self.accumulate(grads, *b, Tensor::from_vec(&s, db).unwrap());
            }
            Op::Chamfer { a, b, nn_ab, nn_ba } => {
                let s = self.shape(*a).to_vec();
                let (c, p) = (s[1], s[2] * s[3]);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let mut da = vec![T::zero(); av.len()];
                let mut db = vec![T::zero(); bv.len()];
                for (i, &gv) in g.data().iter().enumerate() {
                    // d/dx of ‖x − y‖² / (2p) is (x − y) / p
                    let k = gv / T::from_usize(p).unwrap();
                    let base = i * c * p;
                    for q in 0..p {
                        let j = nn_ab[i * p + q];
                        for ch in 0..c {
                            let d = av[base + ch * p + q] - bv[base + ch * p + j];
                            da[base + ch * p + q] += k * d;
                            db[base + ch * p + j] -= k * d;
                        }
                    }
                    for r in 0..p {
                        let q = nn_ba[i * p + r];
                        for ch in 0..c {
                            let d = bv[base + ch * p + r] - av[base + ch * p + q];
                            db[base + ch * p + r] += k * d;
                            da[base + ch * p + q] -= k * d;
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::from_vec(&s, da).unwrap());
                self.accumulate(grads, *b, Tensor::from_vec(&s, db).unwrap());
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: &[T],
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let cout = ws[0];
        let (ho, wo) = (g.dim(2), g.dim(3));
        let p = ho * wo;
        let kdim = cin * geom.kernel * geom.kernel;
        let gd = g.data();
        if self.tracked(w) {
            let mut dw = vec![T::zero(); cout * kdim];
            for s in 0..n {
                T::gemm(
                    cout,
                    p,
                    kdim,
                    T::one(),
                    &gd[s * cout * p..(s + 1) * cout * p],
                    (p as isize, 1),
                    &cols[s * kdim * p..(s + 1) * kdim * p],
                    (1, p as isize),
                    T::one(),
                    &mut dw,
                    (kdim as isize, 1),
                );
            }
            self.accumulate(grads, w, Tensor::from_vec(&ws, dw).unwrap());
        }
        if self.tracked(b) {
            let mut db = vec![T::zero(); cout];
            for (i, row) in gd.chunks(p).enumerate() {
                db[i % cout] += row.iter().copied().sum::<T>();
            }
            self.accumulate(grads, b, Tensor::from_vec(&[cout], db).unwrap());
        }
        if self.tracked(x) {
            let wv = self.value(w).data();
            let mut dx = vec![T::zero(); n * cin * h * wd];
            let mut dcol = vec![T::zero(); kdim * p];
            for s in 0..n {
                T::gemm(
                    kdim,
                    cout,
                    p,
                    T::one(),
                    wv,
                    (1, kdim as isize),
                    &gd[s * cout * p..(s + 1) * cout * p],
                    (p as isize, 1),
                    T::zero(),
                    &mut dcol,
                    (p as isize, 1),
                );
                col2im(
                    &dcol,
                    cin,
                    h,
                    wd,
                    geom,
                    ho,
                    wo,
                    &mut dx[s * cin * h * wd..(s + 1) * cin * h * wd],
                );
            }
            self.accumulate(grads, x, Tensor::from_vec(&xs, dx).unwrap());
        }
    }

    fn adain_backward(
        &self,
        content: Var,
        style: Var,
        cache: &AdaInCache<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let s = self.shape(content).to_vec();
        let p = s[2] * s[3];
        let pf = T::from_usize(p).unwrap();
        let cv = self.value(content).data();
        let sv = self.value(style).data();
        let gd = g.data();
        let mut dc = vec![T::zero(); cv.len()];
        let mut ds = vec![T::zero(); sv.len()];
        for grp in 0..s[0] * s[1] {
            let range = grp * p..(grp + 1) * p;
            let (cm, cs) = (cache.content_mean[grp], cache.content_std[grp]);
            let (sm, ss) = (cache.style_mean[grp], cache.style_std[grp]);
            let gg = &gd[range.clone()];
            let xc = &cv[range.clone()];
            // style side: out = ss * xhat + sm
            let mut d_ss = T::zero();
            let mut d_sm = T::zero();
            let mut mean_dxhat = T::zero();
            let mut mean_dxhat_xhat = T::zero();
            for (&gv, &x) in gg.iter().zip(xc) {
                let xhat = (x - cm) / cs;
                d_ss += gv * xhat;
                d_sm += gv;
                mean_dxhat += gv * ss;
                mean_dxhat_xhat += gv * ss * xhat;
            }
            mean_dxhat /= pf;
            mean_dxhat_xhat /= pf;
            for (q, &y) in sv[range.clone()].iter().enumerate() {
                let mut d = d_sm / pf;
                if !cache.style_floored[grp] {
                    d += d_ss * (y - sm) / (pf * ss);
                }
                ds[grp * p + q] = d;
            }
            for (q, (&gv, &x)) in gg.iter().zip(xc).enumerate() {
                let dxhat = gv * ss;
                let d = if cache.content_floored[grp] {
                    (dxhat - mean_dxhat) / cs
                } else {
                    let xhat = (x - cm) / cs;
                    (dxhat - mean_dxhat - xhat * mean_dxhat_xhat) / cs
                };
                dc[grp * p + q] = d;
            }
        }
        self.accumulate(grads, content, Tensor::from_vec(&s, dc).unwrap());
        self.accumulate(grads, style, Tensor::from_vec(&s, ds).unwrap());
    }
}

/// Spatial mean and floored population standard deviation of one channel.
pub(crate) fn moments<T: Scalar>(xs: &[T], eps: T) -> (T, T, bool) {
    let n = T::from_usize(xs.len()).unwrap();
    let mean = xs.iter().copied().sum::<T>() / n;
    let var = xs.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
    let sd = var.sqrt();
    if sd < eps {
        (mean, eps, true)
    } else {
        (mean, sd, false)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus<T: Scalar>(x: T) -> T {
    let zero = T::zero();
    let m = if x > zero { x } else { zero };
    m + (-x.abs()).exp().ln_1p()
}

/// Logistic function, stable for large |x|.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn argmin<T: Scalar>(xs: &[T]) -> (usize, T) {
    let mut best = 0;
    let mut bd = xs[0];
    for (i, &d) in xs.iter().enumerate().skip(1) {
        if d < bd {
            bd = d;
            best = i;
        }
    }
    (best, bd)
}

/// `dist[q * p + r] = ‖a_q − b_r‖²` for channel-major `(c, p)` blocks.
fn pairwise_sq_dist<T: Scalar>(a: &[T], b: &[T], c: usize, p: usize, dist: &mut [T]) {
    dist.fill(T::zero());
    for ch in 0..c {
        let ar = &a[ch * p..(ch + 1) * p];
        let br = &b[ch * p..(ch + 1) * p];
        for (q, &x) in ar.iter().enumerate() {
            let row = &mut dist[q * p..(q + 1) * p];
            for (d, &y) in row.iter_mut().zip(br) {
                let diff = x - y;
                *d += diff * diff;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(x: &[T], cin: usize, h: usize, w: usize, geom: ConvGeom, ho: usize, wo: usize, col: &mut [T]) {
    let k = geom.kernel;
    let p = ho * wo;
    for c in 0..cin {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                for oi in 0..ho {
                    let ii = (oi * geom.stride + ki) as isize - geom.pad as isize;
                    for oj in 0..wo {
                        let jj = (oj * geom.stride + kj) as isize - geom.pad as isize;
                        dst[oi * wo + oj] = if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                            x[(c * h + ii as usize) * w + jj as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(col: &[T], cin: usize, h: usize, w: usize, geom: ConvGeom, ho: usize, wo: usize, dx: &mut [T]) {
    let k = geom.kernel;
    let p = ho * wo;
    for c in 0..cin {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &col[row * p..(row + 1) * p];
                for oi in 0..ho {
                    let ii = (oi * geom.stride + ki) as isize - geom.pad as isize;
                    if ii < 0 || ii as usize >= h {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * geom.stride + kj) as isize - geom.pad as isize;
                        if jj >= 0 && (jj as usize) < w {
                            dx[(c * h + ii as usize) * w + jj as usize] += src[oi * wo + oj];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Central finite difference of `f` w.r.t. every entry of `x`.
    fn numeric_grad(x: &Tensor<f64>, f: &dyn Fn(&Tensor<f64>) -> f64) -> Tensor<f64> {
        let h = 1e-6;
        let mut out = Tensor::zeros(x.shape());
        for i in 0..x.len() {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            out.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        out
    }

    fn assert_close(analytic: &Tensor<f64>, numeric: &Tensor<f64>, tol: f64) {
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            let scale = a.abs().max(n.abs()).max(1e-3);
            assert!((a - n).abs() / scale < tol, "analytic {a} vs numeric {n}");
        }
    }

    /// Checks d(sum(op(x) * probe))/dx for a single-input op.
    fn check_unary(x: Tensor<f64>, op: impl Fn(&mut Graph<f64>, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let eval = |xv: &Tensor<f64>, probe: Option<&Tensor<f64>>| {
            let mut g = Graph::new();
            let xi = g.input(xv.clone());
            let y = op(&mut g, xi);
            let probe = probe.cloned().unwrap_or_else(|| Tensor::full(g.shape(y), 1.0));
            let pv = g.constant(probe);
            let m = g.mul(y, pv);
            let s = g.sum(m);
            (g, xi, s)
        };
        let out_shape = {
            let mut g = Graph::new();
            let xi = g.input(x.clone());
            let y = op(&mut g, xi);
            g.shape(y).to_vec()
        };
        let probe = random(&out_shape, &mut rng);
        let (g, xi, s) = eval(&x, Some(&probe));
        let grads = g.backward(s);
        let analytic = grads.of(xi).unwrap().clone();
        let numeric = numeric_grad(&x, &|xv| {
            let (g, _, s) = eval(xv, Some(&probe));
            g.value(s).data()[0]
        });
        assert_close(&analytic, &numeric, 1e-5);
    }

    #[test]
    fn conv2d_forward_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[2, 3, 5, 5], &mut rng);
        let w = random(&[4, 3, 3, 3], &mut rng);
        let b = random(&[4], &mut rng);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv2d(xv, wv, bv, 2, 1);
        assert_eq!(g.shape(y), [2, 4, 3, 3]);
        let out = g.value(y);
        for n in 0..2 {
            for co in 0..4 {
                for oi in 0..3 {
                    for oj in 0..3 {
                        let mut acc = b.data()[co];
                        for ci in 0..3 {
                            for ki in 0..3 {
                                for kj in 0..3 {
                                    let ii = (oi * 2 + ki) as isize - 1;
                                    let jj = (oj * 2 + kj) as isize - 1;
                                    if ii < 0 || jj < 0 || ii >= 5 || jj >= 5 {
                                        continue;
                                    }
                                    acc += w.data()[((co * 3 + ci) * 3 + ki) * 3 + kj]
                                        * x.data()[((n * 3 + ci) * 5 + ii as usize) * 5 + jj as usize];
                                }
                            }
                        }
                        let got = out.data()[((n * 4 + co) * 3 + oi) * 3 + oj];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn conv2d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let b = random(&[3], &mut rng);
        let (w2, b2) = (w.clone(), b.clone());
        check_unary(random(&[2, 2, 5, 4], &mut rng), move |g, x| {
            let wv = g.constant(w2.clone());
            let bv = g.constant(b2.clone());
            g.conv2d(x, wv, bv, 1, 1)
        });
        let x = random(&[2, 2, 5, 5], &mut rng);
        let bb = b.clone();
        let xx = x.clone();
        check_unary(w.clone(), move |g, wv| {
            let xv = g.constant(xx.clone());
            let bv = g.constant(bb.clone());
            g.conv2d(xv, wv, bv, 2, 1)
        });
        check_unary(b, move |g, bv| {
            let xv = g.constant(x.clone());
            let wv = g.constant(w.clone());
            g.conv2d(xv, wv, bv, 2, 0)
        });
    }

    #[test]
    fn elementwise_and_pooling_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 3, 2, 2], &mut rng);
        check_unary(x.clone(), |g, v| g.leaky_relu(v, 0.2));
        check_unary(x.clone(), |g, v| g.softplus(v));
        check_unary(x.clone(), |g, v| g.global_avg_pool(v));
        check_unary(x.clone(), |g, v| g.scale(v, -1.5));
        check_unary(x.clone(), |g, v| {
            let sq = g.mul(v, v);
            g.add_scalar(sq, 0.3)
        });
        let other = random(&[2, 1, 2, 2], &mut rng);
        check_unary(x.clone(), move |g, v| {
            let o = g.constant(other.clone());
            g.concat(o, v)
        });
        let m = random(&[2, 2, 2], &mut rng);
        check_unary(x, move |g, v| g.spatial_mask(v, m.clone()));
    }

    #[test]
    fn linear_and_column_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = random(&[3, 4], &mut rng);
        let b = random(&[3], &mut rng);
        let x = random(&[2, 4], &mut rng);
        let (w1, b1) = (w.clone(), b.clone());
        check_unary(x.clone(), move |g, v| {
            let wv = g.constant(w1.clone());
            let bv = g.constant(b1.clone());
            let y = g.linear(v, wv, bv);
            g.column(y, 1)
        });
        check_unary(w, move |g, wv| {
            let xv = g.constant(x.clone());
            let bv = g.constant(b.clone());
            g.linear(xv, wv, bv)
        });
    }

    #[test]
    fn adain_gradients_both_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let content = random(&[2, 3, 3, 3], &mut rng);
        let style = random(&[2, 3, 3, 3], &mut rng);
        let s2 = style.clone();
        check_unary(content.clone(), move |g, c| {
            let s = g.constant(s2.clone());
            g.adain(c, s, 1e-5)
        });
        check_unary(style, move |g, s| {
            let c = g.constant(content.clone());
            g.adain(c, s, 1e-5)
        });
    }

    #[test]
    fn chamfer_and_weighted_distance_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random(&[2, 4, 3, 3], &mut rng);
        let b = random(&[2, 4, 3, 3], &mut rng);
        let b2 = b.clone();
        check_unary(a.clone(), move |g, v| {
            let o = g.constant(b2.clone());
            g.chamfer(v, o)
        });
        let a2 = a.clone();
        check_unary(b.clone(), move |g, v| {
            let o = g.constant(a2.clone());
            g.chamfer(o, v)
        });
        let w = Tensor::from_fn(&[2, 3, 3], |i| (i % 3) as f64 / 2.0);
        check_unary(a, move |g, v| {
            let o = g.constant(b.clone());
            g.weighted_sq_dist(v, o, w.clone(), 8.0)
        });
    }

    #[test]
    fn unit_positions_forward_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&[2, 4, 4, 4], &mut rng);
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let u = g.unit_positions(v, 1e-12);
        let out = g.value(u);
        for q in 0..16 {
            let norm: f64 = (0..4).map(|ch| out.data()[ch * 16 + q].powi(2)).sum();
            assert!((norm - 1.0).abs() < 1e-9);
        }
        check_unary(x, |g, v| g.unit_positions(v, 1e-6));
    }

    #[test]
    fn params_collect_gradients_across_uses() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("w", Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap());
        let mut g = Graph::new();
        let a = g.param(&store, id);
        let b = g.param(&store, id);
        let m = g.mul(a, b);
        let s = g.sum(m);
        let grads = g.backward(s);
        // d/dw sum(w * w) = 2w, split across the two uses
        assert_eq!(grads.param(id).unwrap().data(), &[2.0, -4.0]);
    }

    #[test]
    fn detached_values_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let d = g.detach(x);
        let y = g.mul(x, d);
        let s = g.sum(y);
        let grads = g.backward(s);
        assert_eq!(grads.of(x).unwrap().data(), &[1.0, 2.0]);
        assert!(grads.of(d).is_none());
    }

    #[test]
    fn softplus_is_stable_for_large_inputs() {
        assert_eq!(softplus(1000.0f64), 1000.0);
        assert!(softplus(-1000.0f64) >= 0.0);
        assert!((softplus(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
