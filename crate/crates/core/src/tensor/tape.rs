use super::kernels::{self, ConvGeom};
use super::{check_softmax_args, Tensor};
use crate::error::{invalid_arg, shape_err, Result};

/// Floor applied to the reference distribution inside `log` for KL terms.
pub const KL_FLOOR: f32 = 1e-8;

const NORM_EPS: f32 = 1e-5;
const L2_EPS: f32 = 1e-8;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Square(Var),
    Abs(Var),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    AddBias(Var, Var),
    Conv2d { x: Var, kernel: Var, geom: ConvGeom },
    Relu(Var),
    MaxPool2d { x: Var, argmax: Vec<usize> },
    Reshape(Var),
    Standardize { x: Var, group: usize, inv_std: Vec<f32> },
    Softmax { x: Var, tau: f32 },
    LogSoftmax { x: Var, tau: f32 },
    CrossEntropy { logits: Var, labels: Vec<usize> },
    KlDiv { p: Var, q: Var },
    SumChannels { x: Var, channels: usize },
    L2NormalizeRows { x: Var, norms: Vec<f32> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records one forward pass. Nodes are appended in evaluation order, which
/// is a topological order by construction.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copies `v` into a fresh constant leaf; nothing flows back through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        Ok(())
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f32) -> f32) -> Var {
        let t = self.value(a);
        let value = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&v| f(v)).collect(),
        };
        self.push(value, op, &[a])
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, what: &str, f: impl Fn(f32, f32) -> f32) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let value = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect(),
        };
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = kernels::matmul_dims(ta.shape(), tb.shape())?;
        let value = Tensor {
            shape: vec![m, n],
            data: kernels::matmul(ta.data(), tb.data(), m, k, n),
        };
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(shape_err!("transpose expects rank 2, got {:?}", t.shape()));
        }
        let (r, c) = (t.shape[0], t.shape[1]);
        let value = Tensor {
            shape: vec![c, r],
            data: kernels::transpose(t.data(), r, c),
        };
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        self.map(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, Op::Square(a), |x| x * x)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, Op::Abs(a), f32::abs)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.map(a, Op::Sqrt(a), f32::sqrt)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data.iter().map(|&v| v as f64).sum();
        self.push(Tensor::scalar(s as f32), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: f64 = t.data.iter().map(|&v| v as f64).sum();
        let m = s / t.len() as f64;
        self.push(Tensor::scalar(m as f32), Op::Mean(a), &[a])
    }

    /// Adds a per-channel bias: `x` is `[n, c, ...]`, `bias` is `[c]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tx.rank() < 2 || tb.rank() != 1 || tx.shape[1] != tb.shape[0] {
            return Err(shape_err!(
                "bias {:?} does not match channel axis of {:?}",
                tb.shape(),
                tx.shape()
            ));
        }
        let c = tx.shape[1];
        let inner: usize = tx.shape[2..].iter().product();
        let mut data = tx.data.clone();
        for (i, v) in data.iter_mut().enumerate() {
            *v += tb.data[(i / inner) % c];
        }
        let value = Tensor {
            shape: tx.shape.clone(),
            data,
        };
        Ok(self.push(value, Op::AddBias(x, bias), &[x, bias]))
    }

    /// 2-D convolution without bias. `x` is `[n,c,h,w]`, `kernel` is `[o,c,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        if stride == 0 {
            return Err(invalid_arg!("conv stride must be positive"));
        }
        let (tx, tk) = (self.value(x), self.value(kernel));
        if tx.rank() != 4 || tk.rank() != 4 {
            return Err(shape_err!(
                "conv2d expects [n,c,h,w] and [o,c,kh,kw], got {:?} and {:?}",
                tx.shape(),
                tk.shape()
            ));
        }
        let (n, c, h, w) = (tx.shape[0], tx.shape[1], tx.shape[2], tx.shape[3]);
        let (o, kc, kh, kw) = (tk.shape[0], tk.shape[1], tk.shape[2], tk.shape[3]);
        if c != kc {
            return Err(shape_err!("conv2d input has {c} channels, kernel expects {kc}"));
        }
        let (Some(oh), Some(ow)) = (
            kernels::conv_output_dim(h, kh, stride, padding),
            kernels::conv_output_dim(w, kw, stride, padding),
        ) else {
            return Err(shape_err!(
                "kernel {kh}x{kw} larger than padded input {h}x{w} (padding {padding})"
            ));
        };
        let geom = ConvGeom {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            stride,
            padding,
            oh,
            ow,
        };
        let col = kernels::im2col(tx.data(), &geom);
        let kt = kernels::transpose(tk.data(), o, geom.patch_len());
        let flat = kernels::matmul(&col, &kt, geom.positions(), geom.patch_len(), o);
        let value = Tensor {
            shape: vec![n, o, oh, ow],
            data: kernels::positions_to_channels(&flat, n, o, oh * ow),
        };
        Ok(self.push(value, Op::Conv2d { x, kernel, geom }, &[x, kernel]))
    }

    /// Non-overlapping max pooling with window and stride `size`.
    pub fn max_pool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let t = self.value(x);
        if size == 0 {
            return Err(invalid_arg!("pool size must be positive"));
        }
        if t.rank() != 4 || t.shape[2] < size || t.shape[3] < size {
            return Err(shape_err!("max_pool2d({size}) cannot pool {:?}", t.shape()));
        }
        let (n, c, h, w) = (t.shape[0], t.shape[1], t.shape[2], t.shape[3]);
        let (oh, ow) = (h / size, w / size);
        let mut data = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * size * w + ox * size;
                    for dy in 0..size {
                        for dx in 0..size {
                            let idx = base + (oy * size + dy) * w + ox * size + dx;
                            if t.data[idx] > t.data[best] {
                                best = idx;
                            }
                        }
                    }
                    data.push(t.data[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor {
            shape: vec![n, c, oh, ow],
            data,
        };
        Ok(self.push(value, Op::MaxPool2d { x, argmax }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Parameter-free standardization over consecutive groups of `group`
    /// values: `(x - mean) / sqrt(var + eps)`.
    pub fn standardize(&mut self, x: Var, group: usize) -> Result<Var> {
        let t = self.value(x);
        if group == 0 || !t.len().is_multiple_of(group) {
            return Err(shape_err!("cannot split {} values into groups of {group}", t.len()));
        }
        let mut data = vec![0f32; t.len()];
        let mut inv_std = Vec::with_capacity(t.len() / group);
        for (src, dst) in t.data.chunks(group).zip(data.chunks_mut(group)) {
            let mean = src.iter().map(|&v| v as f64).sum::<f64>() / group as f64;
            let var = src.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / group as f64;
            let inv = (1.0 / (var + NORM_EPS as f64).sqrt()) as f32;
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - mean as f32) * inv;
            }
            inv_std.push(inv);
        }
        let value = Tensor {
            shape: t.shape.clone(),
            data,
        };
        Ok(self.push(value, Op::Standardize { x, group, inv_std }, &[x]))
    }

    pub fn softmax(&mut self, x: Var, tau: f32) -> Result<Var> {
        let t = self.value(x);
        check_softmax_args(t, tau)?;
        let value = Tensor {
            shape: t.shape.clone(),
            data: kernels::softmax_rows(t.data(), t.shape[1], tau),
        };
        Ok(self.push(value, Op::Softmax { x, tau }, &[x]))
    }

    pub fn log_softmax(&mut self, x: Var, tau: f32) -> Result<Var> {
        let t = self.value(x);
        check_softmax_args(t, tau)?;
        let value = Tensor {
            shape: t.shape.clone(),
            data: kernels::log_softmax_rows(t.data(), t.shape[1], tau),
        };
        Ok(self.push(value, Op::LogSoftmax { x, tau }, &[x]))
    }

    /// Batch-mean cross entropy of `[n, C]` logits against hard labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        check_softmax_args(t, 1.0)?;
        let (n, classes) = (t.shape[0], t.shape[1]);
        if labels.len() != n {
            return Err(shape_err!("{n} logit rows but {} labels", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(invalid_arg!("label {bad} out of range for {classes} classes"));
        }
        let logp = kernels::log_softmax_rows(t.data(), classes, 1.0);
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -(logp[i * classes + y] as f64))
            .sum();
        let value = Tensor::scalar((total / n as f64) as f32);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            &[logits],
        ))
    }

    /// Batch mean of `sum_j p_j * ln(p_j / max(q_j, KL_FLOOR))` with
    /// `0 * ln 0 := 0`.
    pub fn kl_div(&mut self, p: Var, q: Var) -> Result<Var> {
        self.same_shape(p, q, "kl_div")?;
        let (tp, tq) = (self.value(p), self.value(q));
        if tp.rank() != 2 {
            return Err(shape_err!("kl_div expects [n, C], got {:?}", tp.shape()));
        }
        let n = tp.shape[0];
        let mut total = 0f64;
        for (&pv, &qv) in tp.data.iter().zip(&tq.data) {
            if pv > 0.0 {
                total += pv as f64 * ((pv as f64).ln() - (qv.max(KL_FLOOR) as f64).ln());
            }
        }
        let value = Tensor::scalar((total / n as f64) as f32);
        Ok(self.push(value, Op::KlDiv { p, q }, &[p, q]))
    }

    /// Sums `[n, c, ...]` over the channel axis, giving `[n, prod(...)]`.
    pub fn sum_channels(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() < 2 {
            return Err(shape_err!("sum_channels expects rank >= 2, got {:?}", t.shape()));
        }
        let (n, c) = (t.shape[0], t.shape[1]);
        let inner: usize = t.shape[2..].iter().product();
        let mut data = vec![0f32; n * inner];
        for b in 0..n {
            for ch in 0..c {
                let src = &t.data[(b * c + ch) * inner..(b * c + ch + 1) * inner];
                for (d, &s) in data[b * inner..(b + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let value = Tensor {
            shape: vec![n, inner],
            data,
        };
        Ok(self.push(value, Op::SumChannels { x, channels: c }, &[x]))
    }

    /// Divides each leading-dimension row by its Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let w = t.row_len();
        let mut data = t.data.clone();
        let mut norms = Vec::with_capacity(t.rows());
        for row in data.chunks_mut(w) {
            let norm = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt() as f32;
            let norm = norm.max(L2_EPS);
            for v in row.iter_mut() {
                *v /= norm;
            }
            norms.push(norm);
        }
        let value = Tensor {
            shape: t.shape.clone(),
            data,
        };
        self.push(value, Op::L2NormalizeRows { x, norms }, &[x])
    }

    /// Reverse pass from a scalar `loss`. Gradients accumulate on nodes
    /// used more than once.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(invalid_arg!("backward needs a scalar loss, got shape {:?}", lv.shape()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| self.nodes[i].requires_grad).map(|data| Tensor {
                    shape: self.nodes[i].value.shape.clone(),
                    data,
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f32>>], v: Var, contrib: Vec<f32>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contrib) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                if self.requires_grad(*a) {
                    let bt = kernels::transpose(tb.data(), k, n);
                    self.accumulate(grads, *a, kernels::matmul(g, &bt, m, n, k));
                }
                if self.requires_grad(*b) {
                    let at = kernels::transpose(ta.data(), m, k);
                    self.accumulate(grads, *b, kernels::matmul(&at, g, k, m, n));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (out.shape[0], out.shape[1]);
                self.accumulate(grads, *a, kernels::transpose(g, r, c));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                self.accumulate(grads, *a, g.iter().zip(&tb.data).map(|(g, y)| g * y).collect());
                self.accumulate(grads, *b, g.iter().zip(&ta.data).map(|(g, x)| g * x).collect());
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, g.iter().map(|v| v * c).collect());
            }
            Op::Square(a) => {
                let x = &val(*a).data;
                self.accumulate(grads, *a, g.iter().zip(x).map(|(g, x)| 2.0 * x * g).collect());
            }
            Op::Abs(a) => {
                let x = &val(*a).data;
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| if x > 0.0 { *g } else if x < 0.0 { -g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Sqrt(a) => {
                let d = g
                    .iter()
                    .zip(&out.data)
                    .map(|(g, &y)| if y > 0.0 { g / (2.0 * y) } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                self.accumulate(grads, *a, vec![g[0]; val(*a).len()]);
            }
            Op::Mean(a) => {
                let len = val(*a).len();
                self.accumulate(grads, *a, vec![g[0] / len as f32; len]);
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, g.to_vec());
                if self.requires_grad(*bias) {
                    let c = out.shape[1];
                    let inner: usize = out.shape[2..].iter().product();
                    let mut db = vec![0f32; c];
                    for (i, gv) in g.iter().enumerate() {
                        db[(i / inner) % c] += gv;
                    }
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::Conv2d { x, kernel, geom } => {
                let spatial = geom.oh * geom.ow;
                let gflat = kernels::channels_to_positions(g, geom.n, geom.o, spatial);
                let (rows, plen) = (geom.positions(), geom.patch_len());
                if self.requires_grad(*kernel) {
                    let col = kernels::im2col(&val(*x).data, geom);
                    let gt = kernels::transpose(&gflat, rows, geom.o);
                    self.accumulate(grads, *kernel, kernels::matmul(&gt, &col, geom.o, rows, plen));
                }
                if self.requires_grad(*x) {
                    let dcol = kernels::matmul(&gflat, &val(*kernel).data, rows, geom.o, plen);
                    self.accumulate(grads, *x, kernels::col2im(&dcol, geom));
                }
            }
            Op::Relu(a) => {
                let x = &val(*a).data;
                let d = g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect();
                self.accumulate(grads, *a, d);
            }
            Op::MaxPool2d { x, argmax } => {
                let mut d = vec![0f32; val(*x).len()];
                for (gv, &src) in g.iter().zip(argmax) {
                    d[src] += gv;
                }
                self.accumulate(grads, *x, d);
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, g.to_vec());
            }
            Op::Standardize { x, group, inv_std } => {
                let mut d = vec![0f32; g.len()];
                for (k, ((gs, ys), ds)) in g
                    .chunks(*group)
                    .zip(out.data.chunks(*group))
                    .zip(d.chunks_mut(*group))
                    .enumerate()
                {
                    let gm = gs.iter().map(|&v| v as f64).sum::<f64>() / *group as f64;
                    let gym = gs
                        .iter()
                        .zip(ys)
                        .map(|(&g, &y)| g as f64 * y as f64)
                        .sum::<f64>()
                        / *group as f64;
                    for ((dv, &gv), &yv) in ds.iter_mut().zip(gs).zip(ys) {
                        *dv = ((gv as f64 - gm - yv as f64 * gym) * inv_std[k] as f64) as f32;
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Softmax { x, tau } => {
                let classes = out.shape[1];
                let mut d = vec![0f32; g.len()];
                for ((gs, ys), ds) in g
                    .chunks(classes)
                    .zip(out.data.chunks(classes))
                    .zip(d.chunks_mut(classes))
                {
                    let dot: f64 = gs.iter().zip(ys).map(|(&g, &y)| g as f64 * y as f64).sum();
                    for ((dv, &gv), &yv) in ds.iter_mut().zip(gs).zip(ys) {
                        *dv = (yv as f64 * (gv as f64 - dot) / *tau as f64) as f32;
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::LogSoftmax { x, tau } => {
                let classes = out.shape[1];
                let mut d = vec![0f32; g.len()];
                for ((gs, ls), ds) in g
                    .chunks(classes)
                    .zip(out.data.chunks(classes))
                    .zip(d.chunks_mut(classes))
                {
                    let gsum: f64 = gs.iter().map(|&v| v as f64).sum();
                    for ((dv, &gv), &lv) in ds.iter_mut().zip(gs).zip(ls) {
                        *dv = ((gv as f64 - (lv as f64).exp() * gsum) / *tau as f64) as f32;
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::CrossEntropy { logits, labels } => {
                let t = val(*logits);
                let classes = t.shape[1];
                let n = labels.len() as f32;
                let mut d = kernels::softmax_rows(&t.data, classes, 1.0);
                for (i, &y) in labels.iter().enumerate() {
                    d[i * classes + y] -= 1.0;
                }
                for v in d.iter_mut() {
                    *v *= g[0] / n;
                }
                self.accumulate(grads, *logits, d);
            }
            Op::KlDiv { p, q } => {
                let (tp, tq) = (val(*p), val(*q));
                let scale = g[0] as f64 / tp.shape[0] as f64;
                if self.requires_grad(*p) {
                    let d = tp
                        .data
                        .iter()
                        .zip(&tq.data)
                        .map(|(&pv, &qv)| {
                            if pv > 0.0 {
                                (scale
                                    * ((pv as f64).ln() - (qv.max(KL_FLOOR) as f64).ln() + 1.0))
                                    as f32
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    self.accumulate(grads, *p, d);
                }
                if self.requires_grad(*q) {
                    let d = tp
                        .data
                        .iter()
                        .zip(&tq.data)
                        .map(|(&pv, &qv)| {
                            if qv > KL_FLOOR {
                                (-scale * pv as f64 / qv as f64) as f32
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    self.accumulate(grads, *q, d);
                }
            }
            Op::SumChannels { x, channels } => {
                let (n, inner) = (out.shape[0], out.shape[1]);
                let mut d = vec![0f32; n * channels * inner];
                for b in 0..n {
                    let gs = &g[b * inner..(b + 1) * inner];
                    for ch in 0..*channels {
                        d[(b * channels + ch) * inner..(b * channels + ch + 1) * inner]
                            .copy_from_slice(gs);
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::L2NormalizeRows { x, norms } => {
                let w = out.row_len();
                let mut d = vec![0f32; g.len()];
                for (k, ((gs, ys), ds)) in g
                    .chunks(w)
                    .zip(out.data.chunks(w))
                    .zip(d.chunks_mut(w))
                    .enumerate()
                {
                    let dot: f64 = gs.iter().zip(ys).map(|(&g, &y)| g as f64 * y as f64).sum();
                    let clamped = norms[k] <= L2_EPS;
                    for ((dv, &gv), &yv) in ds.iter_mut().zip(gs).zip(ys) {
                        *dv = if clamped {
                            gv / norms[k]
                        } else {
                            ((gv as f64 - yv as f64 * dot) / norms[k] as f64) as f32
                        };
                    }
                }
                self.accumulate(grads, *x, d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![3], vec![1., 2., 3.]).unwrap());
        let sq = tape.square(x);
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2., 4., 6.]);
    }

    #[test]
    fn cross_entropy_gradient_is_p_minus_y() {
        let mut tape = Tape::new();
        let z = tape.param(Tensor::new(vec![1, 3], vec![0.5, -1.0, 2.0]).unwrap());
        let loss = tape.cross_entropy(z, &[1]).unwrap();
        let grads = tape.backward(loss).unwrap();
        let p = crate::tensor::softmax_with_temperature(tape.value(z), 1.0).unwrap();
        let expected = [p.data()[0], p.data()[1] - 1.0, p.data()[2]];
        for (g, e) in grads.get(z).unwrap().data().iter().zip(expected) {
            assert!((g - e).abs() < 1e-6, "{g} vs {e}");
        }
    }

    #[test]
    fn shared_nodes_accumulate() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![2], vec![1., -2.]).unwrap());
        let y = tape.add(x, x).unwrap();
        let z = tape.mul(y, x).unwrap();
        let loss = tape.sum(z);
        // loss = 2 x^2 -> 4x
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[4., -8.]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::InvalidArg(_))));
    }

    #[test]
    fn detach_stops_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![2], vec![1., 2.]).unwrap());
        let d = tape.detach(x);
        let y = tape.mul(x, d).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1., 2.]);
        assert!(grads.get(d).is_none());
    }

    #[test]
    fn conv2d_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let k = tape.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.value(y), &Tensor::full(&[1, 1, 3, 3], 1.0));

        let data: Vec<f32> = (1..=9).map(|v| v as f32).collect();
        let x = tape.constant(Tensor::new(vec![1, 1, 3, 3], data.clone()).unwrap());
        let k = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        // sliding-window oracle
        let mut naive = vec![];
        for oy in 0..2 {
            for ox in 0..2 {
                let mut s = 0.0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        s += data[(oy + dy) * 3 + ox + dx];
                    }
                }
                naive.push(s);
            }
        }
        assert_eq!(naive, vec![12., 16., 24., 28.]);
        assert_eq!(tape.value(y).data(), naive.as_slice());
        assert_eq!(tape.value(y).shape(), &[1, 1, 2, 2]);
    }

    #[test]
    fn conv2d_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let k = tape.constant(Tensor::zeros(&[1, 3, 2, 2]));
        assert!(matches!(tape.conv2d(x, k, 1, 0), Err(Error::ShapeMismatch(_))));
        let k = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
        assert!(matches!(tape.conv2d(x, k, 0, 0), Err(Error::InvalidArg(_))));
        let k = tape.constant(Tensor::zeros(&[1, 2, 7, 7]));
        assert!(matches!(tape.conv2d(x, k, 1, 1), Err(Error::ShapeMismatch(_))));
        let k = tape.constant(Tensor::zeros(&[1, 2, 6, 6]));
        let y = tape.conv2d(x, k, 1, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
    }

    #[test]
    fn conv2d_output_size_with_stride_and_padding() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 1, 7, 5]));
        let k = tape.constant(Tensor::zeros(&[4, 1, 3, 3]));
        let y = tape.conv2d(x, k, 2, 1).unwrap();
        // (7+2-3)/2+1 = 4, (5+2-3)/2+1 = 3
        assert_eq!(tape.value(y).shape(), &[2, 4, 4, 3]);
    }

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::from_rows(&[vec![0.2, 0.8], vec![0.5, 0.5]]).unwrap());
        let q = tape.constant(Tensor::from_rows(&[vec![0.2, 0.8], vec![0.5, 0.5]]).unwrap());
        let kl = tape.kl_div(p, q).unwrap();
        assert_eq!(tape.value(kl).data()[0], 0.0);
    }

    #[test]
    fn standardize_rows_have_zero_mean() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![1., 2., 3., 4.], vec![-3., 0., 0., 7.]]).unwrap());
        let y = tape.standardize(x, 4).unwrap();
        for row in tape.value(y).data().chunks(4) {
            let m: f32 = row.iter().sum::<f32>() / 4.0;
            assert!(m.abs() < 1e-6);
        }
    }
}
