use crate::kernels::{self, ConvGeom};
use crate::{Element, Tensor};

const NORM_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    Square(Var),
    Abs(Var),
    Exp(Var),
    Ln(Var),
    Sigmoid(Var),
    Silu(Var),
    Sum(Var),
    Mean(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Upsample2x(Var),
    Concat(Vec<Var>),
    Blur { x: Var, kernel: Vec<f64>, along_width: bool },
    GlobalAvgPool(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    NormalizeRows(Var),
    MatmulNt(Var, Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Gather { x: Var, index: Vec<usize> },
    Reshape(Var),
}

struct Node<E> {
    value: Tensor<E>,
    op: Op,
    needs_grad: bool,
}

/// Eagerly evaluated computation tape.
///
/// Every operation computes its value immediately and records how it was
/// produced; [`Graph::backward`] then replays the tape in reverse. A graph is
/// meant to live for one optimisation step.
pub struct Graph<E: Element> {
    nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Gradients are only propagated to leaves created with
    /// `needs_grad`.
    pub fn leaf(&mut self, value: Tensor<E>, needs_grad: bool) -> Var {
        self.push(value, Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor<E>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<E>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(E) -> E) -> Var {
        let value = self.value(a).map(f);
        let ng = self.needs_grad(a);
        self.push(value, op, ng)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(E, E) -> E) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "elementwise operands differ in shape");
        let value = self.value(a).zip_map(self.value(b), f);
        let ng = self.needs_grad(a) || self.needs_grad(b);
        self.push(value, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let s = E::of(s);
        self.unary(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let se = E::of(s);
        self.unary(a, Op::Scale(a, s), |x| x * se)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), |x| x.abs())
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), |x| x.ln())
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Silu(a), |x| x * sigmoid(x))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let ng = self.needs_grad(a);
        self.push(value, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).mean());
        let ng = self.needs_grad(a);
        self.push(value, Op::Mean(a), ng)
    }

    /// Cross-correlation of an NCHW input with `[out, in, k, k]` weights,
    /// zero padding `pad` on every side.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let [n, c, h, wd] = self.value(x).dims4();
        let [co, ci, kh, kw] = self.value(w).dims4();
        assert_eq!(ci, c, "conv2d: weight expects {ci} input channels, input has {c}");
        assert_eq!(kh, kw, "conv2d: only square kernels are supported");
        assert!(stride >= 1, "conv2d: stride must be positive");
        assert!(h + 2 * pad >= kh && wd + 2 * pad >= kw, "conv2d: input smaller than kernel");
        if let Some(b) = b {
            assert_eq!(self.value(b).shape(), &[co], "conv2d: bias shape");
        }
        let geom =
            ConvGeom { batch: n, in_channels: c, height: h, width: wd, out_channels: co, kernel: kh, stride, pad };
        let value = kernels::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), &geom);
        let ng = self.needs_grad(x) || self.needs_grad(w) || b.is_some_and(|b| self.needs_grad(b));
        self.push(value, Op::Conv2d { x, w, b, geom }, ng)
    }

    /// Nearest-neighbour 2x spatial upsampling.
    pub fn upsample2x(&mut self, a: Var) -> Var {
        let value = kernels::upsample2x(self.value(a));
        let ng = self.needs_grad(a);
        self.push(value, Op::Upsample2x(a), ng)
    }

    /// Concatenation of rank-4 tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let [n, _, h, w] = self.value(parts[0]).dims4();
        let total_c: usize = parts
            .iter()
            .map(|&p| {
                let [pn, pc, ph, pw] = self.value(p).dims4();
                assert_eq!((pn, ph, pw), (n, h, w), "concat: mismatched batch or spatial dims");
                pc
            })
            .sum();
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total_c * plane);
        for b in 0..n {
            for &p in parts {
                let t = self.value(p);
                let pc = t.dims4()[1];
                out.extend_from_slice(&t.data()[b * pc * plane..(b + 1) * pc * plane]);
            }
        }
        let ng = parts.iter().any(|&p| self.needs_grad(p));
        self.push(Tensor::new(vec![n, total_c, h, w], out), Op::Concat(parts.to_vec()), ng)
    }

    /// Valid-region 1-D correlation along rows (`along_width`) or columns.
    pub fn blur(&mut self, x: Var, kernel: &[f64], along_width: bool) -> Var {
        let k: Vec<E> = kernel.iter().map(|&v| E::of(v)).collect();
        let [_, _, h, w] = self.value(x).dims4();
        let extent = if along_width { w } else { h };
        assert!(extent >= kernel.len(), "blur: input extent {extent} smaller than kernel {}", kernel.len());
        let value = kernels::blur_valid(self.value(x), &k, along_width);
        let ng = self.needs_grad(x);
        self.push(value, Op::Blur { x, kernel: kernel.to_vec(), along_width }, ng)
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.value(x).dims4();
        let plane = h * w;
        let inv = E::of(1.0 / plane as f64);
        let data = self.value(x).data().chunks(plane).map(|p| p.iter().copied().sum::<E>() * inv).collect();
        let ng = self.needs_grad(x);
        self.push(Tensor::new(vec![n, c], data), Op::GlobalAvgPool(x), ng)
    }

    /// `x [N, C] -> x W^T + b` with `W [D, C]`, `b [D]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let [n, c] = self.value(x).dims2();
        let [d, wc] = self.value(w).dims2();
        assert_eq!(c, wc, "linear: input width {c} vs weight width {wc}");
        let mut out = vec![E::zero(); n * d];
        if let Some(b) = b {
            let bias = self.value(b).data();
            assert_eq!(bias.len(), d, "linear: bias length");
            for row in out.chunks_mut(d) {
                row.copy_from_slice(bias);
            }
        }
        E::gemm(n, c, d, E::one(), self.value(x).data(), false, self.value(w).data(), true, E::one(), &mut out);
        let ng = self.needs_grad(x) || self.needs_grad(w) || b.is_some_and(|b| self.needs_grad(b));
        self.push(Tensor::new(vec![n, d], out), Op::Linear { x, w, b }, ng)
    }

    /// Scales every row of a rank-2 tensor to unit Euclidean norm. Rows are
    /// divided by `max(norm, 1e-12)`, so a zero row stays zero.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let [_, d] = t.dims2();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(d) {
            let norm = row.iter().map(|&v| v * v).sum::<E>().sqrt().max(E::of(NORM_EPS));
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        let shape = t.shape().to_vec();
        let ng = self.needs_grad(x);
        self.push(Tensor::new(shape, out), Op::NormalizeRows(x), ng)
    }

    /// `a [N, D] * b^T` for `b [M, D]`, giving `[N, M]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let [n, d] = self.value(a).dims2();
        let [m, bd] = self.value(b).dims2();
        assert_eq!(d, bd, "matmul_nt: inner dims {d} vs {bd}");
        let mut out = vec![E::zero(); n * m];
        E::gemm(n, d, m, E::one(), self.value(a).data(), false, self.value(b).data(), true, E::zero(), &mut out);
        let ng = self.needs_grad(a) || self.needs_grad(b);
        self.push(Tensor::new(vec![n, m], out), Op::MatmulNt(a, b), ng)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let [_, m] = t.dims2();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(m) {
            let max = row.iter().copied().fold(E::neg_infinity(), E::max);
            let mut total = E::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let shape = t.shape().to_vec();
        let ng = self.needs_grad(x);
        self.push(Tensor::new(shape, out), Op::SoftmaxRows(x), ng)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let [_, m] = t.dims2();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(m) {
            let max = row.iter().copied().fold(E::neg_infinity(), E::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<E>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let shape = t.shape().to_vec();
        let ng = self.needs_grad(x);
        self.push(Tensor::new(shape, out), Op::LogSoftmaxRows(x), ng)
    }

    /// Picks `x[n, index[n]]` from a rank-2 tensor, giving `[N]`.
    pub fn gather(&mut self, x: Var, index: &[usize]) -> Var {
        let t = self.value(x);
        let [n, m] = t.dims2();
        assert_eq!(index.len(), n, "gather: one index per row required");
        let data = index
            .iter()
            .enumerate()
            .map(|(r, &j)| {
                assert!(j < m, "gather: column {j} out of range");
                t.data()[r * m + j]
            })
            .collect();
        let ng = self.needs_grad(x);
        self.push(Tensor::new(vec![n], data), Op::Gather { x, index: index.to_vec() }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().reshape(shape.to_vec());
        let ng = self.needs_grad(x);
        self.push(value, Op::Reshape(x), ng)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<E> {
        assert_eq!(self.value(loss).numel(), 1, "backward requires a scalar loss");
        let mut grads: Vec<Option<Tensor<E>>> = vec![None; self.nodes.len()];
        let mut kept: Vec<Option<Tensor<E>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), E::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                kept[i] = Some(g);
            }
        }
        Gradients { grads: kept }
    }

    fn propagate(&self, i: usize, g: &Tensor<E>, grads: &mut [Option<Tensor<E>>]) {
        let y = &self.nodes[i].value;
        let mut acc = |v: Var, contribution: Tensor<E>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&contribution),
                slot @ None => *slot = Some(contribution),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, g.zip_map(bv, |gv, x| gv * x));
                acc(*b, g.zip_map(av, |gv, x| gv * x));
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, g.zip_map(bv, |gv, x| gv / x));
                let db: Vec<E> =
                    g.data().iter().zip(av.data()).zip(bv.data()).map(|((&gv, &x), &d)| -gv * x / (d * d)).collect();
                acc(*b, Tensor::new(bv.shape().to_vec(), db));
            }
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Scale(a, s) => {
                let s = E::of(*s);
                acc(*a, g.map(|v| v * s));
            }
            Op::Square(a) => {
                let two = E::of(2.0);
                acc(*a, g.zip_map(self.value(*a), |gv, x| two * x * gv));
            }
            Op::Abs(a) => acc(
                *a,
                g.zip_map(self.value(*a), |gv, x| {
                    if x > E::zero() {
                        gv
                    } else if x < E::zero() {
                        -gv
                    } else {
                        E::zero()
                    }
                }),
            ),
            Op::Exp(a) => acc(*a, g.zip_map(y, |gv, e| gv * e)),
            Op::Ln(a) => acc(*a, g.zip_map(self.value(*a), |gv, x| gv / x)),
            Op::Sigmoid(a) => acc(*a, g.zip_map(y, |gv, s| gv * s * (E::one() - s))),
            Op::Silu(a) => acc(
                *a,
                g.zip_map(self.value(*a), |gv, x| {
                    let s = sigmoid(x);
                    gv * s * (E::one() + x * (E::one() - s))
                }),
            ),
            Op::Sum(a) => {
                let gv = g.item();
                acc(*a, Tensor::full(self.value(*a).shape().to_vec(), gv));
            }
            Op::Mean(a) => {
                let t = self.value(*a);
                let gv = g.item() / E::of(t.numel() as f64);
                acc(*a, Tensor::full(t.shape().to_vec(), gv));
            }
            Op::Conv2d { x, w, b, geom } => {
                let want = (
                    self.nodes[x.0].needs_grad,
                    self.nodes[w.0].needs_grad,
                    b.is_some_and(|b| self.nodes[b.0].needs_grad),
                );
                let grads = kernels::conv2d_backward(self.value(*x), self.value(*w), g, geom, want);
                if let Some(dx) = grads.dx {
                    acc(*x, dx);
                }
                if let Some(dw) = grads.dw {
                    acc(*w, dw);
                }
                if let (Some(b), Some(db)) = (b, grads.db) {
                    acc(*b, db);
                }
            }
            Op::Upsample2x(a) => acc(*a, kernels::upsample2x_backward(g)),
            Op::Concat(parts) => {
                let [n, total_c, h, w] = g.dims4();
                let plane = h * w;
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).dims4()[1];
                    if self.nodes[p.0].needs_grad {
                        let mut d = Vec::with_capacity(n * pc * plane);
                        for b in 0..n {
                            let start = (b * total_c + offset) * plane;
                            d.extend_from_slice(&g.data()[start..start + pc * plane]);
                        }
                        acc(p, Tensor::new(vec![n, pc, h, w], d));
                    }
                    offset += pc;
                }
            }
            Op::Blur { x, kernel, along_width } => {
                let k: Vec<E> = kernel.iter().map(|&v| E::of(v)).collect();
                let shape = self.value(*x).shape().to_vec();
                acc(*x, kernels::blur_valid_backward(g, &k, *along_width, &shape));
            }
            Op::GlobalAvgPool(x) => {
                let shape = self.value(*x).shape().to_vec();
                let plane = shape[2] * shape[3];
                let inv = E::of(1.0 / plane as f64);
                let mut d = Vec::with_capacity(g.numel() * plane);
                for &gv in g.data() {
                    d.extend(std::iter::repeat_n(gv * inv, plane));
                }
                acc(*x, Tensor::new(shape, d));
            }
            Op::Linear { x, w, b } => {
                let [n, c] = self.value(*x).dims2();
                let [d, _] = self.value(*w).dims2();
                if self.nodes[x.0].needs_grad {
                    let mut dx = vec![E::zero(); n * c];
                    E::gemm(n, d, c, E::one(), g.data(), false, self.value(*w).data(), false, E::zero(), &mut dx);
                    acc(*x, Tensor::new(vec![n, c], dx));
                }
                if self.nodes[w.0].needs_grad {
                    let mut dw = vec![E::zero(); d * c];
                    E::gemm(d, n, c, E::one(), g.data(), true, self.value(*x).data(), false, E::zero(), &mut dw);
                    acc(*w, Tensor::new(vec![d, c], dw));
                }
                if let Some(b) = b {
                    let mut db = vec![E::zero(); d];
                    for row in g.data().chunks(d) {
                        for (s, &v) in db.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    acc(*b, Tensor::new(vec![d], db));
                }
            }
            Op::NormalizeRows(x) => {
                let xv = self.value(*x);
                let [_, d] = xv.dims2();
                let mut dx = Vec::with_capacity(xv.numel());
                for ((xr, yr), gr) in xv.data().chunks(d).zip(y.data().chunks(d)).zip(g.data().chunks(d)) {
                    let norm = xr.iter().map(|&v| v * v).sum::<E>().sqrt();
                    if norm > E::of(NORM_EPS) {
                        let dot: E = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        dx.extend(gr.iter().zip(yr).map(|(&gv, &yv)| (gv - yv * dot) / norm));
                    } else {
                        dx.extend(gr.iter().map(|&gv| gv / E::of(NORM_EPS)));
                    }
                }
                acc(*x, Tensor::new(xv.shape().to_vec(), dx));
            }
            Op::MatmulNt(a, b) => {
                let [n, d] = self.value(*a).dims2();
                let [m, _] = self.value(*b).dims2();
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![E::zero(); n * d];
                    E::gemm(n, m, d, E::one(), g.data(), false, self.value(*b).data(), false, E::zero(), &mut da);
                    acc(*a, Tensor::new(vec![n, d], da));
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![E::zero(); m * d];
                    E::gemm(m, n, d, E::one(), g.data(), true, self.value(*a).data(), false, E::zero(), &mut db);
                    acc(*b, Tensor::new(vec![m, d], db));
                }
            }
            Op::SoftmaxRows(x) => {
                let [_, m] = y.dims2();
                let mut dx = Vec::with_capacity(y.numel());
                for (yr, gr) in y.data().chunks(m).zip(g.data().chunks(m)) {
                    let dot: E = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - dot)));
                }
                acc(*x, Tensor::new(y.shape().to_vec(), dx));
            }
            Op::LogSoftmaxRows(x) => {
                let [_, m] = y.dims2();
                let mut dx = Vec::with_capacity(y.numel());
                for (yr, gr) in y.data().chunks(m).zip(g.data().chunks(m)) {
                    let total: E = gr.iter().copied().sum();
                    dx.extend(yr.iter().zip(gr).map(|(&lp, &gv)| gv - lp.exp() * total));
                }
                acc(*x, Tensor::new(y.shape().to_vec(), dx));
            }
            Op::Gather { x, index } => {
                let xv = self.value(*x);
                let [_, m] = xv.dims2();
                let mut dx = vec![E::zero(); xv.numel()];
                for (r, (&j, &gv)) in index.iter().zip(g.data()).enumerate() {
                    dx[r * m + j] += gv;
                }
                acc(*x, Tensor::new(xv.shape().to_vec(), dx));
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                acc(*x, g.clone().reshape(shape));
            }
        }
    }
}

#[inline]
fn sigmoid<E: Element>(x: E) -> E {
    if x >= E::zero() {
        E::one() / (E::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::one() + e)
    }
}

/// Gradients of a scalar with respect to the leaves that asked for them.
pub struct Gradients<E> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Gradients<E> {
    /// `None` when `v` is not a gradient-tracking leaf or the loss does not
    /// depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<E>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<E>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
