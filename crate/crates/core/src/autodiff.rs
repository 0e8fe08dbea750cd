//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Operations are recorded in execution order, so a node's inputs always
//! precede it. [`Tape::backward`] walks the list in reverse once and returns
//! gradients for every node that depends on a parameter leaf.

use crate::error::TensorError;
use crate::kernels::{self, ConvGeom, NormKind};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm normalization source.
#[derive(Debug, Clone, Copy)]
pub enum BatchNormMode<'a, T> {
    /// Normalize with the batch's own statistics.
    Train,
    /// Normalize with stored running statistics.
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Per-channel statistics observed by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Population variance over N·H·W.
    pub var: Vec<T>,
    pub count: usize,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Min(Var, Var),
    Relu(Var),
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    Depthwise { x: Var, w: Var, geom: ConvGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, training: bool },
    InstanceNorm { x: Var, inv_std: Vec<T> },
    AvgPool { x: Var, geom: ConvGeom },
    GlobalAvgPool(Var),
    Linear { x: Var, w: Var, b: Var },
    CrossEntropy { logits: Var, probs: Vec<T>, labels: Vec<usize> },
    ConcatChannels(Vec<Var>),
    PadChannels { x: Var },
    ChannelBias { x: Var, b: Var },
    WeightedSum { x: Var, weights: Tensor<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Min(..) => "elementwise_min",
            Op::Relu(..) => "relu",
            Op::Conv2d { .. } => "conv2d",
            Op::Depthwise { .. } => "depthwise_conv2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::InstanceNorm { .. } => "instance_norm",
            Op::AvgPool { .. } => "avg_pool2d",
            Op::GlobalAvgPool(..) => "global_avg_pool",
            Op::Linear { .. } => "linear",
            Op::CrossEntropy { .. } => "softmax_cross_entropy",
            Op::ConcatChannels(..) => "concat_channels",
            Op::PadChannels { .. } => "pad_channels",
            Op::ChannelBias { .. } => "channel_bias",
            Op::WeightedSum { .. } => "weighted_sum",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Min(a, b) => vec![*a, *b],
            Op::Relu(x) | Op::GlobalAvgPool(x) => vec![*x],
            Op::Conv2d { x, w, .. } | Op::Depthwise { x, w, .. } => vec![*x, *w],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::InstanceNorm { x, .. } | Op::AvgPool { x, .. } | Op::PadChannels { x } | Op::WeightedSum { x, .. } => {
                vec![*x]
            }
            Op::Linear { x, w, b } => vec![*x, *w, *b],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::ConcatChannels(xs) => xs.clone(),
            Op::ChannelBias { x, b } => vec![*x, *b],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records one forward pass.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
    }
    Ok(())
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(existing) => existing.add_assign(&g).expect("gradient shape matches its node"),
        None => *slot = Some(g),
    }
}

impl<T: Scalar> Tape<T> {
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a constant input; no gradient is produced for it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Records a learnable leaf; [`Tape::backward`] returns its gradient.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("add", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        self.push(out, Op::Add(a, b))
    }

    /// Elementwise minimum. Backward routes the gradient to the smaller
    /// input and splits it evenly on ties.
    pub fn min(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("elementwise_min", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x.min(y)).collect();
        let out = Tensor::new(ta.shape(), data)?;
        self.push(out, Op::Min(a, b))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).map(|v| v.max(T::zero()));
        self.push(out, Op::Relu(a))
    }

    /// Bias-free cross-correlation of NCHW `x` with OIKK `w`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var, TensorError> {
        let (out, geom) = kernels::conv2d(self.value(x), self.value(w), stride, pad)?;
        self.push(out, Op::Conv2d { x, w, geom })
    }

    /// Per-channel convolution with a `C×1×K×K` kernel.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var, TensorError> {
        let (out, geom) = kernels::depthwise_conv2d(self.value(x), self.value(w), stride, pad)?;
        self.push(out, Op::Depthwise { x, w, geom })
    }

    /// Batch normalization with learnable per-channel `gamma`/`beta`.
    ///
    /// In training mode the batch statistics are returned so the caller can
    /// fold them into its running averages.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>), TensorError> {
        let tx = self.value(x);
        let (n, c, h, w) = tx.dims4()?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(TensorError::InvalidArgument(format!(
                    "batch_norm: {name} shape {:?} does not match {c} channels",
                    self.value(v).shape()
                )));
            }
        }
        let map = h * w;
        let (xhat, inv_std, stats, training) = match mode {
            BatchNormMode::Train => {
                let norm = kernels::normalize(tx, NormKind::PerChannel)?;
                let stats = BatchStats { mean: norm.mean, var: norm.var, count: n * map };
                (norm.xhat, norm.inv_std, Some(stats), true)
            }
            BatchNormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(TensorError::InvalidArgument(format!(
                        "batch_norm: running statistics sized {} / {} for {c} channels",
                        mean.len(),
                        var.len()
                    )));
                }
                let eps = T::from_f64_lossy(T::NORM_EPS);
                let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                let mut xhat = vec![T::zero(); tx.numel()];
                for (k, (dst, src)) in xhat.chunks_mut(map).zip(tx.data().chunks(map)).enumerate() {
                    let (m, s) = (mean[k % c], inv_std[k % c]);
                    for (d, &v) in dst.iter_mut().zip(src) {
                        *d = (v - m) * s;
                    }
                }
                (xhat, inv_std, None, false)
            }
        };
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut data = xhat.clone();
        for (k, chunk) in data.chunks_mut(map).enumerate() {
            let (gk, bk) = (g[k % c], b[k % c]);
            for v in chunk {
                *v = gk * *v + bk;
            }
        }
        let out = Tensor::new(tx.shape(), data)?;
        let var = self.push(out, Op::BatchNorm { x, gamma, beta, xhat, inv_std, training })?;
        Ok((var, stats))
    }

    /// Per-sample, per-channel normalization without affine parameters.
    pub fn instance_norm(&mut self, x: Var) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let norm = kernels::normalize(tx, NormKind::PerMap)?;
        let out = Tensor::new(tx.shape(), norm.xhat)?;
        self.push(out, Op::InstanceNorm { x, inv_std: norm.inv_std })
    }

    pub fn avg_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var, TensorError> {
        let (out, geom) = kernels::avg_pool2d(self.value(x), kernel, stride)?;
        self.push(out, Op::AvgPool { x, geom })
    }

    /// `[n, c, h, w] -> [n, c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let (n, c, h, w) = tx.dims4()?;
        let scale = T::one() / T::from_usize(h * w).unwrap();
        let data = tx.data().chunks(h * w).map(|m| m.iter().copied().sum::<T>() * scale).collect();
        let out = Tensor::new(&[n, c], data)?;
        self.push(out, Op::GlobalAvgPool(x))
    }

    /// `y = x·wᵀ + b` for `x: [n, f]`, `w: [o, f]`, `b: [o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (&[n, f], &[o, wf], &[bo]) = (tx.shape(), tw.shape(), tb.shape()) else {
            return Err(TensorError::InvalidArgument(format!(
                "linear: unsupported shapes {:?} {:?} {:?}",
                tx.shape(),
                tw.shape(),
                tb.shape()
            )));
        };
        if f != wf || o != bo {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: tx.shape().to_vec(),
                rhs: tw.shape().to_vec(),
            });
        }
        let mut data: Vec<T> = (0..n * o).map(|i| tb.data()[i % o]).collect();
        T::gemm(n, f, o, T::one(), tx.data(), f, 1, tw.data(), 1, f, T::one(), &mut data, o, 1);
        let out = Tensor::new(&[n, o], data)?;
        self.push(out, Op::Linear { x, w, b })
    }

    /// Mean softmax cross-entropy over the batch, as a one-element tensor.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let tl = self.value(logits);
        let &[n, classes] = tl.shape() else {
            return Err(TensorError::Rank { op: "softmax_cross_entropy", expected: 2, shape: tl.shape().to_vec() });
        };
        if labels.len() != n {
            return Err(TensorError::InvalidArgument(format!(
                "softmax_cross_entropy: {} labels for batch of {n}",
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(TensorError::LabelOutOfRange { label, classes });
        }
        let probs = kernels::softmax_rows(tl.data(), classes);
        let mut loss = T::zero();
        for (s, &label) in labels.iter().enumerate() {
            let row = &tl.data()[s * classes..(s + 1) * classes];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            loss = loss + lse - row[label];
        }
        let loss = loss / T::from_usize(n).unwrap();
        self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, probs, labels: labels.to_vec() })
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        let first = xs.first().ok_or_else(|| TensorError::InvalidArgument("concat_channels: no inputs".into()))?;
        let (n, _, h, w) = self.value(*first).dims4()?;
        let mut total = 0;
        for &v in xs {
            let (vn, vc, vh, vw) = self.value(v).dims4()?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_channels",
                    lhs: self.value(*first).shape().to_vec(),
                    rhs: self.value(v).shape().to_vec(),
                });
            }
            total += vc;
        }
        let map = h * w;
        let mut data = Vec::with_capacity(n * total * map);
        for s in 0..n {
            for &v in xs {
                let t = self.value(v);
                let c = t.shape()[1];
                data.extend_from_slice(&t.data()[s * c * map..(s + 1) * c * map]);
            }
        }
        let out = Tensor::new(&[n, total, h, w], data)?;
        self.push(out, Op::ConcatChannels(xs.to_vec()))
    }

    /// Appends `extra` all-zero channels.
    pub fn pad_channels(&mut self, x: Var, extra: usize) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let (n, c, h, w) = tx.dims4()?;
        let map = h * w;
        let mut data = Vec::with_capacity(n * (c + extra) * map);
        for s in 0..n {
            data.extend_from_slice(&tx.data()[s * c * map..(s + 1) * c * map]);
            data.extend(std::iter::repeat_n(T::zero(), extra * map));
        }
        let out = Tensor::new(&[n, c + extra, h, w], data)?;
        self.push(out, Op::PadChannels { x })
    }

    /// Adds a per-channel bias `b: [c]` to NCHW `x`.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var, TensorError> {
        let (tx, tb) = (self.value(x), self.value(b));
        let (_, c, h, w) = tx.dims4()?;
        if tb.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "channel_bias",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let map = h * w;
        let mut data = tx.data().to_vec();
        for (k, chunk) in data.chunks_mut(map).enumerate() {
            let bk = tb.data()[k % c];
            for v in chunk {
                *v = *v + bk;
            }
        }
        let out = Tensor::new(tx.shape(), data)?;
        self.push(out, Op::ChannelBias { x, b })
    }

    /// `Σ x[i]·weights[i]` as a one-element tensor.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor<T>) -> Result<Var, TensorError> {
        let tx = self.value(x);
        same_shape("weighted_sum", tx, &weights)?;
        let total = tx.data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        self.push(Tensor::scalar(total), Op::WeightedSum { x, weights })
    }

    /// Backpropagates from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(TensorError::InvalidArgument(format!(
                "backward: loss must have one element, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            for (input, g) in self.node_backward(node, &dy)? {
                if self.nodes[input.0].requires_grad {
                    accumulate(&mut grads[input.0], g);
                }
            }
        }
        for g in grads.iter().flatten() {
            if !g.is_finite() {
                return Err(TensorError::NonFinite { op: "backward" });
            }
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, node: &Node<T>, dy: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>, TensorError> {
        let half = T::from_f64_lossy(0.5);
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, dy.clone()), (*b, dy.clone())],
            Op::Min(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let mut ga = vec![T::zero(); dy.numel()];
                let mut gb = vec![T::zero(); dy.numel()];
                for i in 0..dy.numel() {
                    let (x, y, d) = (ta.data()[i], tb.data()[i], dy.data()[i]);
                    if x < y {
                        ga[i] = d;
                    } else if y < x {
                        gb[i] = d;
                    } else {
                        ga[i] = d * half;
                        gb[i] = d * half;
                    }
                }
                vec![(*a, Tensor::new(ta.shape(), ga)?), (*b, Tensor::new(tb.shape(), gb)?)]
            }
            Op::Relu(a) => {
                let ta = self.value(*a);
                let g =
                    ta.data().iter().zip(dy.data()).map(|(&x, &d)| if x > T::zero() { d } else { T::zero() }).collect();
                vec![(*a, Tensor::new(ta.shape(), g)?)]
            }
            Op::Conv2d { x, w, geom } => {
                let (dx, dw) =
                    kernels::conv2d_backward(geom, self.value(*x), self.value(*w), dy, self.needs(*x), self.needs(*w));
                dx.map(|g| (*x, g)).into_iter().chain(dw.map(|g| (*w, g))).collect()
            }
            Op::Depthwise { x, w, geom } => {
                let (dx, dw) = kernels::depthwise_conv2d_backward(
                    geom,
                    self.value(*x),
                    self.value(*w),
                    dy,
                    self.needs(*x),
                    self.needs(*w),
                );
                dx.map(|g| (*x, g)).into_iter().chain(dw.map(|g| (*w, g))).collect()
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, training } => {
                let shape = self.value(*x).shape();
                let (_, c, h, w) = self.value(*x).dims4()?;
                let map = h * w;
                let g = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dxhat = vec![T::zero(); dy.numel()];
                for (k, ((dst, dm), xm)) in
                    dxhat.chunks_mut(map).zip(dy.data().chunks(map)).zip(xhat.chunks(map)).enumerate()
                {
                    let ch = k % c;
                    let (mut sg, mut sb) = (T::zero(), T::zero());
                    for ((o, &d), &xh) in dst.iter_mut().zip(dm).zip(xm) {
                        sg = sg + d * xh;
                        sb = sb + d;
                        *o = d * g[ch];
                    }
                    dgamma[ch] = dgamma[ch] + sg;
                    dbeta[ch] = dbeta[ch] + sb;
                }
                let mut res = vec![(*gamma, Tensor::new(&[c], dgamma)?), (*beta, Tensor::new(&[c], dbeta)?)];
                if self.needs(*x) {
                    let dx = if *training {
                        kernels::normalize_backward(shape, NormKind::PerChannel, xhat, inv_std, &dxhat)
                    } else {
                        let mut dx = dxhat;
                        for (k, chunk) in dx.chunks_mut(map).enumerate() {
                            let s = inv_std[k % c];
                            for v in chunk {
                                *v = *v * s;
                            }
                        }
                        dx
                    };
                    res.push((*x, Tensor::new(shape, dx)?));
                }
                res
            }
            Op::InstanceNorm { x, inv_std } => {
                let shape = self.value(*x).shape();
                let dx = kernels::normalize_backward(shape, NormKind::PerMap, node.value.data(), inv_std, dy.data());
                vec![(*x, Tensor::new(shape, dx)?)]
            }
            Op::AvgPool { x, geom } => vec![(*x, kernels::avg_pool2d_backward(geom, dy))],
            Op::GlobalAvgPool(x) => {
                let tx = self.value(*x);
                let (_, _, h, w) = tx.dims4()?;
                let scale = T::one() / T::from_usize(h * w).unwrap();
                let g = dy.data().iter().flat_map(|&d| std::iter::repeat_n(d * scale, h * w)).collect();
                vec![(*x, Tensor::new(tx.shape(), g)?)]
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (n, f) = (tx.shape()[0], tx.shape()[1]);
                let o = tw.shape()[0];
                let mut res = Vec::with_capacity(3);
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); n * f];
                    T::gemm(n, o, f, T::one(), dy.data(), o, 1, tw.data(), f, 1, T::zero(), &mut dx, f, 1);
                    res.push((*x, Tensor::new(tx.shape(), dx)?));
                }
                let mut dw = vec![T::zero(); o * f];
                T::gemm(o, n, f, T::one(), dy.data(), 1, o, tx.data(), f, 1, T::zero(), &mut dw, f, 1);
                res.push((*w, Tensor::new(tw.shape(), dw)?));
                let mut db = vec![T::zero(); o];
                for row in dy.data().chunks(o) {
                    for (acc, &d) in db.iter_mut().zip(row) {
                        *acc = *acc + d;
                    }
                }
                res.push((*b, Tensor::new(&[o], db)?));
                res
            }
            Op::CrossEntropy { logits, probs, labels } => {
                let tl = self.value(*logits);
                let classes = tl.shape()[1];
                let scale = dy.data()[0] / T::from_usize(labels.len()).unwrap();
                let mut g: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (s, &label) in labels.iter().enumerate() {
                    g[s * classes + label] = g[s * classes + label] - scale;
                }
                vec![(*logits, Tensor::new(tl.shape(), g)?)]
            }
            Op::ConcatChannels(xs) => {
                let (n, _, h, w) = dy.dims4()?;
                let map = h * w;
                let total = dy.shape()[1];
                let mut offset = 0;
                let mut res = Vec::with_capacity(xs.len());
                for &v in xs {
                    let c = self.value(v).shape()[1];
                    let mut g = Vec::with_capacity(n * c * map);
                    for s in 0..n {
                        let start = (s * total + offset) * map;
                        g.extend_from_slice(&dy.data()[start..start + c * map]);
                    }
                    offset += c;
                    res.push((v, Tensor::new(self.value(v).shape(), g)?));
                }
                res
            }
            Op::PadChannels { x } => {
                let tx = self.value(*x);
                let (n, c, h, w) = tx.dims4()?;
                let map = h * w;
                let total = dy.shape()[1];
                let mut g = Vec::with_capacity(tx.numel());
                for s in 0..n {
                    g.extend_from_slice(&dy.data()[s * total * map..(s * total + c) * map]);
                }
                vec![(*x, Tensor::new(tx.shape(), g)?)]
            }
            Op::ChannelBias { x, b } => {
                let (_, c, h, w) = dy.dims4()?;
                let map = h * w;
                let mut db = vec![T::zero(); c];
                for (k, chunk) in dy.data().chunks(map).enumerate() {
                    db[k % c] = db[k % c] + chunk.iter().copied().sum::<T>();
                }
                vec![(*x, dy.clone()), (*b, Tensor::new(&[c], db)?)]
            }
            Op::WeightedSum { x, weights } => {
                let d = dy.data()[0];
                vec![(*x, weights.map(|w| w * d))]
            }
        };
        Ok(out)
    }
}
