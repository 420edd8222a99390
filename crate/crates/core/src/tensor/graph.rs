use rand::Rng;

use super::kernels::{conv1d_backward, conv1d_forward, ConvGeom};
use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Per-channel statistics observed by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance.
    pub var: Vec<T>,
    pub count: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf { param: Option<ParamId> },
    Conv1d { x: Var, w: Var, bias: Option<Var>, geom: ConvGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    Relu(Var),
    Sigmoid(Var),
    Dropout { x: Var, mask: Vec<T> },
    Add(Var, Var),
    Mul(Var, Var),
    MeanTime { x: Var, window: usize },
    ExpandTime { x: Var, window: usize },
    LogSoftmax(Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Sum(Var),
    Scale(Var, T),
    External { x: Var, local_grad: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A tape of operations, evaluated eagerly and differentiated in reverse.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of every differentiable node after [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn same_shape(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

fn as_ct(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match shape {
        [c, t] => Ok((*c, *t)),
        _ => Err(Error::Shape(format!("{what} expects [C×T], got {shape:?}"))),
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("node shapes are consistent")
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let t = &store.get(id).tensor;
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf { param: Some(id) }, true)
    }

    /// A leaf that is not differentiated.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf { param: None }, false)
    }

    /// A leaf whose gradient is reported through [`Gradients`].
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf { param: None }, true)
    }

    /// Zero-padded 1D convolution over `[C_in×T]` with odd kernel width.
    ///
    /// `w` is `[C_out×C_in/groups×K]`, or `[C_out×C_in]` for a pointwise
    /// layer. Output length is `ceil(T/stride)`.
    pub fn conv1d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, groups: usize) -> Result<Var> {
        let (c_in, t_in) = as_ct(self.shape(x), "conv1d input")?;
        let (c_out, cin_g, kernel) = match *self.shape(w) {
            [o, i, k] => (o, i, k),
            [o, i] => (o, i, 1),
            ref s => return Err(Error::Shape(format!("conv1d weight rank {}", s.len()))),
        };
        if kernel % 2 == 0 {
            return Err(Error::InvalidArgument(format!("conv1d kernel width {kernel} must be odd")));
        }
        if stride == 0 || groups == 0 {
            return Err(Error::InvalidArgument("stride and groups must be positive".into()));
        }
        if c_in % groups != 0 || c_out % groups != 0 || cin_g != c_in / groups {
            return Err(Error::Shape(format!(
                "conv1d: {c_in} input channels, {c_out} outputs, weight expects {cin_g} per group, {groups} groups"
            )));
        }
        if t_in == 0 {
            return Err(Error::Empty("conv1d input has no frames"));
        }
        if let Some(b) = bias {
            same_shape(self.shape(b), &[c_out], "conv1d bias")?;
        }
        let geom = ConvGeom::new(c_in, c_out, t_in, kernel, stride, groups);
        let value = conv1d_forward(
            &geom,
            self.value(x),
            self.value(w),
            bias.map(|b| self.value(b)),
        );
        let rg = self.rg(x) || self.rg(w) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(vec![c_out, geom.t_out], value, Op::Conv1d { x, w, bias, geom }, rg))
    }

    /// Batch norm with statistics taken over time for each channel.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats<T>)> {
        let (c, t) = as_ct(self.shape(x), "batch_norm input")?;
        if t == 0 {
            return Err(Error::Empty("batch_norm over zero frames"));
        }
        let n = T::lit(t as f64);
        let xs = self.value(x);
        let mut mean = Vec::with_capacity(c);
        let mut var = Vec::with_capacity(c);
        for row in xs.chunks(t) {
            let m = row.iter().copied().sum::<T>() / n;
            let v = row.iter().map(|&a| (a - m) * (a - m)).sum::<T>() / n;
            mean.push(m);
            var.push(v);
        }
        let inv_std: Vec<T> = var.iter().map(|&v| (v + T::lit(eps)).sqrt().recip()).collect();
        let stats = BatchStats { mean: mean.clone(), var, count: t };
        let y = self.normalize(x, gamma, beta, &mean, inv_std, true)?;
        Ok((y, stats))
    }

    /// Batch norm using fixed (running) statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: f64) -> Result<Var> {
        let inv_std = var.iter().map(|&v| (v + T::lit(eps)).sqrt().recip()).collect();
        self.normalize(x, gamma, beta, mean, inv_std, false)
    }

    fn normalize(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], inv_std: Vec<T>, train: bool) -> Result<Var> {
        let (c, t) = as_ct(self.shape(x), "batch_norm input")?;
        if t == 0 {
            return Err(Error::Empty("batch_norm over zero frames"));
        }
        same_shape(self.shape(gamma), &[c], "batch_norm gamma")?;
        same_shape(self.shape(beta), &[c], "batch_norm beta")?;
        if mean.len() != c || inv_std.len() != c {
            return Err(Error::Shape("batch_norm statistics length".into()));
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = Vec::with_capacity(c * t);
        let mut y = Vec::with_capacity(c * t);
        for (ch, row) in self.value(x).chunks(t).enumerate() {
            for &a in row {
                let h = (a - mean[ch]) * inv_std[ch];
                xhat.push(h);
                y.push(g[ch] * h + b[ch]);
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            vec![c, t],
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|&a| a.max(T::zero())).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), value, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self
            .value(x)
            .iter()
            .map(|&a| T::one() / (T::one() + (-a).exp()))
            .collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), value, Op::Sigmoid(x), rg)
    }

    /// Inverted dropout; returns `x` itself in eval mode or when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("dropout probability {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let value = self.value(x).iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let rg = self.rg(x);
        Ok(self.push(self.shape(x).to_vec(), value, Op::Dropout { x, mask }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.shape(a), self.shape(b), "add")?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(&p, &q)| p + q).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.shape(a), self.shape(b), "mul")?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(&p, &q)| p * q).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Mul(a, b), rg))
    }

    /// Mean over non-overlapping time windows; `None` pools the whole
    /// sequence. The last window may be short and is averaged over its
    /// true length.
    pub fn mean_time(&mut self, x: Var, window: Option<usize>) -> Result<Var> {
        let (c, t) = as_ct(self.shape(x), "mean_time input")?;
        if t == 0 {
            return Err(Error::Empty("mean over zero frames"));
        }
        let window = resolve_window(window, t)?;
        let w_out = t.div_ceil(window);
        let mut value = Vec::with_capacity(c * w_out);
        for row in self.value(x).chunks(t) {
            for chunk in row.chunks(window) {
                value.push(chunk.iter().copied().sum::<T>() / T::lit(chunk.len() as f64));
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![c, w_out], value, Op::MeanTime { x, window }, rg))
    }

    /// Broadcasts per-window values `[C×W]` back over `len` frames.
    pub fn expand_time(&mut self, x: Var, window: Option<usize>, len: usize) -> Result<Var> {
        let (c, w_in) = as_ct(self.shape(x), "expand_time input")?;
        let window = resolve_window(window, len)?;
        if len.div_ceil(window) != w_in {
            return Err(Error::Shape(format!(
                "expand_time: {w_in} windows cannot cover {len} frames at window {window}"
            )));
        }
        let mut value = Vec::with_capacity(c * len);
        for row in self.value(x).chunks(w_in) {
            value.extend((0..len).map(|t| row[t / window]));
        }
        let rg = self.rg(x);
        Ok(self.push(vec![c, len], value, Op::ExpandTime { x, window }, rg))
    }

    /// Log-softmax over classes (axis 0) independently for every frame.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (k, t) = as_ct(self.shape(x), "log_softmax input")?;
        let xs = self.value(x);
        let mut value = xs.to_vec();
        for j in 0..t {
            let mut m = T::neg_infinity();
            for i in 0..k {
                m = m.max(xs[i * t + j]);
            }
            let lse = m + (0..k).map(|i| (xs[i * t + j] - m).exp()).sum::<T>().ln();
            for i in 0..k {
                value[i * t + j] = xs[i * t + j] - lse;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![k, t], value, Op::LogSoftmax(x), rg))
    }

    /// Concatenates `[C×T_i]` nodes along time.
    pub fn concat_time(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or(Error::Empty("concat of no tensors"))?;
        let (c, _) = as_ct(self.shape(first), "concat input")?;
        let mut lens = Vec::with_capacity(xs.len());
        for &v in xs {
            let (ci, ti) = as_ct(self.shape(v), "concat input")?;
            if ci != c {
                return Err(Error::Shape(format!("concat channels {ci} vs {c}")));
            }
            lens.push(ti);
        }
        let total: usize = lens.iter().sum();
        let mut value = Vec::with_capacity(c * total);
        for ch in 0..c {
            for (&v, &ti) in xs.iter().zip(&lens) {
                value.extend_from_slice(&self.value(v)[ch * ti..(ch + 1) * ti]);
            }
        }
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(vec![c, total], value, Op::Concat(xs.to_vec()), rg))
    }

    /// Frames `start..start+len` of a `[C×T]` node.
    pub fn slice_time(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (c, t) = as_ct(self.shape(x), "slice input")?;
        if start + len > t {
            return Err(Error::Shape(format!("slice {start}+{len} beyond {t} frames")));
        }
        let xs = self.value(x);
        let value = (0..c)
            .flat_map(|ch| xs[ch * t + start..ch * t + start + len].iter().copied())
            .collect();
        let rg = self.rg(x);
        Ok(self.push(vec![c, len], value, Op::Slice { x, start }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).iter().map(|&a| a * factor).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), value, Op::Scale(x, factor), rg)
    }

    /// Records a scalar computed outside the graph from `x`, together with
    /// its gradient with respect to `x`.
    pub fn external_scalar(&mut self, x: Var, value: T, local_grad: Vec<T>) -> Result<Var> {
        if local_grad.len() != self.value(x).len() {
            return Err(Error::Shape("external gradient length".into()));
        }
        let rg = self.rg(x);
        Ok(self.push(vec![1], vec![value], Op::External { x, local_grad }, rg))
    }

    /// Reverse pass from a scalar `loss`. Parameter gradients in `store` are
    /// overwritten (unreached parameters end with zero gradient).
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let grads = self.gradients(loss)?;
        store.zero_grads();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Leaf { param: Some(id) }, Some(g)) = (&node.op, &grads.grads[i]) {
                let dst = store
                    .get_mut(*id)
                    .tensor
                    .grad_mut()
                    .expect("parameters carry gradients");
                add_into(dst, g);
            }
        }
        Ok(grads)
    }

    /// Reverse pass without touching any parameter store.
    pub fn gradients(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(node, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => add_into(g, &contrib),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, node: &Node<T>, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Conv1d { x, w, bias, geom } => {
                let (dx, dw, db) = conv1d_backward(geom, self.value(*x), self.value(*w), dy, bias.is_some());
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
                if let (Some(b), Some(db)) = (bias, db) {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (c, t) = (node.shape[0], node.shape[1]);
                let g = self.value(*gamma);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); c * t];
                let n = T::lit(t as f64);
                for ch in 0..c {
                    let rows = ch * t..(ch + 1) * t;
                    let (dyr, hr) = (&dy[rows.clone()], &xhat[rows.clone()]);
                    let sum_dy: T = dyr.iter().copied().sum();
                    let sum_dyh: T = dyr.iter().zip(hr).map(|(&a, &h)| a * h).sum();
                    dgamma[ch] = sum_dyh;
                    dbeta[ch] = sum_dy;
                    let scale = g[ch] * inv_std[ch];
                    for (d, (&a, &h)) in dx[rows].iter_mut().zip(dyr.iter().zip(hr)) {
                        *d = if *train {
                            scale * (a - sum_dy / n - h * sum_dyh / n)
                        } else {
                            scale * a
                        };
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::Relu(x) => {
                let dx = self
                    .value(*x)
                    .iter()
                    .zip(dy)
                    .map(|(&a, &g)| if a > T::zero() { g } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let dx = node
                    .value
                    .iter()
                    .zip(dy)
                    .map(|(&s, &g)| g * s * (T::one() - s))
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Dropout { x, mask } => {
                let dx = mask.iter().zip(dy).map(|(&m, &g)| m * g).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.to_vec());
                self.accumulate(grads, *b, dy.to_vec());
            }
            Op::Mul(a, b) => {
                let da = self.value(*b).iter().zip(dy).map(|(&q, &g)| q * g).collect();
                let db = self.value(*a).iter().zip(dy).map(|(&p, &g)| p * g).collect();
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::MeanTime { x, window } => {
                let t = self.shape(*x)[1];
                let w_out = node.shape[1];
                let mut dx = Vec::with_capacity(self.value(*x).len());
                for row in dy.chunks(w_out) {
                    for j in 0..t {
                        let wi = j / window;
                        let len = (t - wi * window).min(*window);
                        dx.push(row[wi] / T::lit(len as f64));
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ExpandTime { x, window } => {
                let t = node.shape[1];
                let w_in = self.shape(*x)[1];
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (row, drow) in dy.chunks(t).zip(dx.chunks_mut(w_in)) {
                    for (j, &g) in row.iter().enumerate() {
                        drow[j / window] = drow[j / window] + g;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LogSoftmax(x) => {
                let (k, t) = (node.shape[0], node.shape[1]);
                let mut dx = dy.to_vec();
                for j in 0..t {
                    let s: T = (0..k).map(|i| dy[i * t + j]).sum();
                    for i in 0..k {
                        dx[i * t + j] = dy[i * t + j] - node.value[i * t + j].exp() * s;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Concat(xs) => {
                let (c, total) = (node.shape[0], node.shape[1]);
                let mut offset = 0;
                for &v in xs {
                    let ti = self.shape(v)[1];
                    let dx = (0..c)
                        .flat_map(|ch| dy[ch * total + offset..ch * total + offset + ti].iter().copied())
                        .collect();
                    self.accumulate(grads, v, dx);
                    offset += ti;
                }
            }
            Op::Slice { x, start } => {
                let (c, t) = (self.shape(*x)[0], self.shape(*x)[1]);
                let len = node.shape[1];
                let mut dx = vec![T::zero(); c * t];
                for ch in 0..c {
                    dx[ch * t + start..ch * t + start + len].copy_from_slice(&dy[ch * len..(ch + 1) * len]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Sum(x) => {
                let dx = vec![dy[0]; self.value(*x).len()];
                self.accumulate(grads, *x, dx);
            }
            Op::Scale(x, f) => {
                let dx = dy.iter().map(|&g| g * *f).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::External { x, local_grad } => {
                let dx = local_grad.iter().map(|&g| g * dy[0]).collect();
                self.accumulate(grads, *x, dx);
            }
        }
    }
}

fn resolve_window(window: Option<usize>, t: usize) -> Result<usize> {
    match window {
        Some(0) => Err(Error::InvalidArgument("pooling window must be >= 1".into())),
        Some(w) => Ok(w),
        None => Ok(t.max(1)),
    }
}
