//! Define-by-run tape. Every forward op appends one node whose inputs all
//! precede it, so the node list is already a topological order and backward
//! is a single reverse sweep.

use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};

/// Probabilities below this are clamped before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    batch: usize,
    in_channels: usize,
    height: usize,
    width: usize,
    out_channels: usize,
    kernel_h: usize,
    kernel_w: usize,
    out_h: usize,
    out_w: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        geom: ConvGeometry,
        // im2col buffers, one per batch item; empty in no-grad graphs
        cols: Vec<Vec<T>>,
    },
    MaxPool2 {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Dense {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Relu {
        input: NodeId,
    },
    Softmax {
        input: NodeId,
    },
    CrossEntropy {
        input: NodeId,
        labels: Vec<usize>,
    },
    Entropy {
        input: NodeId,
    },
    Sum {
        input: NodeId,
    },
    Add {
        lhs: NodeId,
        rhs: NodeId,
    },
    ConcatChannels {
        lhs: NodeId,
        rhs: NodeId,
    },
    Reshape {
        input: NodeId,
    },
    Mse {
        input: NodeId,
        target: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, NodeId)>,
    grad_enabled: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that keeps no backward buffers; `backward` on it is an error.
    pub fn no_grad() -> Self {
        Graph {
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

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, name: &'static str) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Ok(id)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Graph input. Gradients flow to it iff the tensor was created with
    /// `requires_grad`.
    pub fn input(&mut self, tensor: Tensor<T>) -> NodeId {
        let rg = tensor.requires_grad();
        self.push(tensor, Op::Leaf, rg, "input")
            .expect("non-finite graph input")
    }

    /// Trainable parameter leaf; always tracked unless the graph is no-grad.
    pub fn param(&mut self, name: &str, tensor: &Tensor<T>) -> NodeId {
        let value = tensor.clone().with_requires_grad(true);
        let id = self
            .push(value, Op::Leaf, true, "param")
            .expect("non-finite parameter");
        self.params.push((name.to_string(), id));
        id
    }

    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, bias: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 4 || ks.len() != 4 {
            return Err(Error::shape("conv2d", &xs, &ks));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be >= 1"));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kc, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if kc != c || kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::shape("conv2d", &xs, &ks));
        }
        if bs.iter().product::<usize>() != o {
            return Err(Error::shape("conv2d bias", &ks, &bs));
        }
        let geom = ConvGeometry {
            batch: n,
            in_channels: c,
            height: h,
            width: w,
            out_channels: o,
            kernel_h: kh,
            kernel_w: kw,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
            stride,
            pad,
        };
        let rg = self.needs(&[input, kernel, bias]);
        let keep_cols = rg && self.grad_enabled;

        let x = self.value(input).data();
        let k = self.value(kernel).data();
        let b = self.value(bias).data();
        let (plen, olen) = (geom.patch_len(), geom.out_len());
        let in_len = c * h * w;
        let mut out = vec![T::zero(); n * o * olen];
        let mut cols = Vec::with_capacity(if keep_cols { n } else { 0 });
        let mut col = vec![T::zero(); plen * olen];
        for item in 0..n {
            im2col(&x[item * in_len..(item + 1) * in_len], &geom, &mut col);
            let dst = &mut out[item * o * olen..(item + 1) * o * olen];
            T::gemm(o, plen, olen, k, (plen as isize, 1), &col, (olen as isize, 1), T::zero(), dst);
            for (oc, row) in dst.chunks_mut(olen).enumerate() {
                let bias = b[oc];
                row.iter_mut().for_each(|v| *v = *v + bias);
            }
            if keep_cols {
                cols.push(col.clone());
            }
        }
        let value = Tensor::new(vec![n, o, geom.out_h, geom.out_w], out)?;
        self.push(value, Op::Conv2d { input, kernel, bias, geom, cols }, rg, "conv2d")
    }

    /// 2x2 max pooling with stride 2. Ties go to the first cell in
    /// row-major order.
    pub fn maxpool2(&mut self, input: NodeId) -> Result<NodeId> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 || xs[2] % 2 != 0 || xs[3] % 2 != 0 {
            return Err(Error::invalid(format!("maxpool2 needs NCHW with even H and W, got {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h / 2, w / 2);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.needs(&[input]);
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        self.push(value, Op::MaxPool2 { input, argmax }, rg, "maxpool2")
    }

    /// Affine map `x W + b` for `x: N x F`, `W: F x K`, `b: K`.
    pub fn dense(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::shape("dense", &xs, &ws));
        }
        let (n, f, k) = (xs[0], xs[1], ws[1]);
        if bs.iter().product::<usize>() != k {
            return Err(Error::shape("dense bias", &ws, &bs));
        }
        let mut out = vec![T::zero(); n * k];
        let b = self.value(bias).data();
        for row in out.chunks_mut(k) {
            row.copy_from_slice(b);
        }
        T::gemm(
            n,
            f,
            k,
            self.value(input).data(),
            (f as isize, 1),
            self.value(weight).data(),
            (k as isize, 1),
            T::one(),
            &mut out,
        );
        let rg = self.needs(&[input, weight, bias]);
        let value = Tensor::new(vec![n, k], out)?;
        self.push(value, Op::Dense { input, weight, bias }, rg, "dense")
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.needs(&[input]);
        self.push(value, Op::Relu { input }, rg, "relu")
    }

    /// Row-wise softmax over `N x K` logits, max-subtracted.
    pub fn softmax(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let xs = x.shape();
        if xs.len() != 2 || xs[1] < 2 {
            return Err(Error::invalid(format!("softmax needs N x K logits with K >= 2, got {xs:?}")));
        }
        if !x.all_finite() {
            return Err(Error::NonFinite("softmax logits"));
        }
        let k = xs[1];
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks(k) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
            let total: T = exps.iter().copied().sum();
            out.extend(exps.into_iter().map(|e| e / total));
        }
        let value = Tensor::new(xs.to_vec(), out)?;
        let rg = self.needs(&[input]);
        self.push(value, Op::Softmax { input }, rg, "softmax")
    }

    /// Mean negative log-likelihood of `labels` under row-normalized `probs`.
    pub fn cross_entropy(&mut self, probs: NodeId, labels: &[usize]) -> Result<NodeId> {
        let p = self.value(probs);
        let ps = p.shape();
        if ps.len() != 2 || ps[0] != labels.len() {
            return Err(Error::shape("cross_entropy", ps, &[labels.len()]));
        }
        let k = ps[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
        }
        let floor = T::from_f64(PROB_FLOOR);
        let total: T = labels
            .iter()
            .enumerate()
            .map(|(row, &l)| -p.data()[row * k + l].max(floor).ln())
            .sum();
        let loss = total / T::from_f64(labels.len().max(1) as f64);
        let rg = self.needs(&[probs]);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                input: probs,
                labels: labels.to_vec(),
            },
            rg,
            "cross_entropy",
        )
    }

    /// Mean over rows of `-sum p ln p`, natural log, `0 ln 0 = 0`.
    pub fn entropy(&mut self, probs: NodeId) -> Result<NodeId> {
        let p = self.value(probs);
        let ps = p.shape();
        if ps.len() != 2 {
            return Err(Error::invalid(format!("entropy needs N x K probabilities, got {ps:?}")));
        }
        let total: T = p
            .data()
            .iter()
            .map(|&v| if v > T::zero() { -v * v.ln() } else { T::zero() })
            .sum();
        let h = total / T::from_f64(ps[0].max(1) as f64);
        let rg = self.needs(&[probs]);
        self.push(Tensor::scalar(h), Op::Entropy { input: probs }, rg, "entropy")
    }

    pub fn sum(&mut self, input: NodeId) -> Result<NodeId> {
        let total: T = self.value(input).data().iter().copied().sum();
        let rg = self.needs(&[input]);
        self.push(Tensor::scalar(total), Op::Sum { input }, rg, "sum")
    }

    pub fn add(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        if a.shape() != b.shape() {
            return Err(Error::shape("add", a.shape(), b.shape()));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(a.shape().to_vec(), data)?;
        let rg = self.needs(&[lhs, rhs]);
        self.push(value, Op::Add { lhs, rhs }, rg, "add")
    }

    /// Concatenates two NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::shape("concat_channels", sa, sb));
        }
        let plane = sa[2] * sa[3];
        let (ca, cb) = (sa[1], sb[1]);
        let mut out = Vec::with_capacity(a.len() + b.len());
        for item in 0..sa[0] {
            out.extend_from_slice(&a.data()[item * ca * plane..(item + 1) * ca * plane]);
            out.extend_from_slice(&b.data()[item * cb * plane..(item + 1) * cb * plane]);
        }
        let value = Tensor::new(vec![sa[0], ca + cb, sa[2], sa[3]], out)?;
        let rg = self.needs(&[lhs, rhs]);
        self.push(value, Op::ConcatChannels { lhs, rhs }, rg, "concat_channels")
    }

    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(input).clone().reshape(shape.to_vec())?;
        let rg = self.needs(&[input]);
        self.push(value.with_requires_grad(false), Op::Reshape { input }, rg, "reshape")
    }

    /// Flattens everything after the batch axis.
    pub fn flatten(&mut self, input: NodeId) -> Result<NodeId> {
        let s = self.shape(input);
        let n = s[0];
        let rest = s[1..].iter().product();
        self.reshape(input, &[n, rest])
    }

    /// Mean squared error against a constant target of the same shape.
    pub fn mse(&mut self, input: NodeId, target: &Tensor<T>) -> Result<NodeId> {
        let p = self.value(input);
        if p.shape() != target.shape() {
            return Err(Error::shape("mse", p.shape(), target.shape()));
        }
        let total: T = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        let loss = total / T::from_f64(p.len().max(1) as f64);
        let rg = self.needs(&[input]);
        self.push(
            Tensor::scalar(loss),
            Op::Mse {
                input,
                target: target.data().to_vec(),
            },
            rg,
            "mse",
        )
    }

    /// Which side of every kink the forward pass landed on: ReLU signs and
    /// max-pool winners. Two evaluations with equal signatures lie on the
    /// same smooth piece of the network function.
    pub fn piecewise_signature(&self) -> Vec<usize> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { input } => sig.extend(
                    self.nodes[input.0]
                        .value
                        .data()
                        .iter()
                        .map(|&v| usize::from(v > T::zero())),
                ),
                Op::MaxPool2 { argmax, .. } => sig.extend_from_slice(argmax),
                _ => {}
            }
        }
        sig
    }

    /// Reverse sweep from a scalar root. Returns gradients for every tracked
    /// leaf reachable from `root`; contributions from shared inputs add up.
    /// Leaf tensors inside the graph also receive their gradient buffer.
    pub fn backward(&mut self, root: NodeId) -> Result<Gradients<T>> {
        if !self.grad_enabled {
            return Err(Error::invalid("backward called on a no-grad graph"));
        }
        if !self.value(root).is_scalar() {
            return Err(Error::invalid(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![T::one()]);

        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::Conv2d { input, kernel, bias, geom, cols } => {
                    self.conv_backward(&g, *input, *kernel, *bias, geom, cols, &mut grads);
                }
                Op::MaxPool2 { input, argmax } => {
                    if let Some(dx) = self.slot(&mut grads, *input) {
                        for (&src, &gv) in argmax.iter().zip(&g) {
                            dx[src] = dx[src] + gv;
                        }
                    }
                }
                Op::Dense { input, weight, bias } => {
                    let x = self.value(*input);
                    let w = self.value(*weight);
                    let (n, f, k) = (x.shape()[0], x.shape()[1], w.shape()[1]);
                    let x_data = x.data();
                    let w_data = w.data();
                    if let Some(dx) = self.slot(&mut grads, *input) {
                        T::gemm(n, k, f, &g, (k as isize, 1), w_data, (1, k as isize), T::one(), dx);
                    }
                    if let Some(dw) = self.slot(&mut grads, *weight) {
                        T::gemm(f, n, k, x_data, (1, f as isize), &g, (k as isize, 1), T::one(), dw);
                    }
                    if let Some(db) = self.slot(&mut grads, *bias) {
                        for row in g.chunks(k) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d = *d + v;
                            }
                        }
                    }
                }
                Op::Relu { input } => {
                    let x = self.value(*input).data();
                    if let Some(dx) = self.slot(&mut grads, *input) {
                        for ((d, &gv), &xv) in dx.iter_mut().zip(&g).zip(x) {
                            if xv > T::zero() {
                                *d = *d + gv;
                            }
                        }
                    }
                }
                Op::Softmax { input } => {
                    let y = node.value.data();
                    let k = node.value.shape()[1];
                    if let Some(dx) = self.slot(&mut grads, *input) {
                        for ((drow, grow), yrow) in dx.chunks_mut(k).zip(g.chunks(k)).zip(y.chunks(k)) {
                            let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                            for ((d, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                                *d = *d + yv * (gv - dot);
                            }
                        }
                    }
                }
                Op::CrossEntropy { input, labels } => {
                    let p = self.value(*input).data();
                    let k = self.shape(*input)[1];
                    let scale = g[0] / T::from_f64(labels.len().max(1) as f64);
                    let floor = T::from_f64(PROB_FLOOR);
                    if let Some(dp) = self.slot(&mut grads, *input) {
                        for (row, &l) in labels.iter().enumerate() {
                            let pv = p[row * k + l];
                            if pv > floor {
                                dp[row * k + l] = dp[row * k + l] - scale / pv;
                            }
                        }
                    }
                }
                Op::Entropy { input } => {
                    let p = self.value(*input).data();
                    let rows = self.shape(*input)[0];
                    let scale = g[0] / T::from_f64(rows.max(1) as f64);
                    let floor = T::from_f64(PROB_FLOOR);
                    if let Some(dp) = self.slot(&mut grads, *input) {
                        for (d, &pv) in dp.iter_mut().zip(p) {
                            *d = *d - scale * (pv.max(floor).ln() + T::one());
                        }
                    }
                }
                Op::Sum { input } => {
                    if let Some(dx) = self.slot(&mut grads, *input) {
                        dx.iter_mut().for_each(|d| *d = *d + g[0]);
                    }
                }
                Op::Add { lhs, rhs } => {
                    for side in [*lhs, *rhs] {
                        if let Some(dx) = self.slot(&mut grads, side) {
                            for (d, &gv) in dx.iter_mut().zip(&g) {
                                *d = *d + gv;
                            }
                        }
                    }
                }
                Op::ConcatChannels { lhs, rhs } => {
                    let sa = self.shape(*lhs).to_vec();
                    let cb = self.shape(*rhs)[1];
                    let plane = sa[2] * sa[3];
                    let (la, lb) = (sa[1] * plane, cb * plane);
                    if let Some(da) = self.slot(&mut grads, *lhs) {
                        for (item, chunk) in da.chunks_mut(la).enumerate() {
                            let src = &g[item * (la + lb)..item * (la + lb) + la];
                            chunk.iter_mut().zip(src).for_each(|(d, &v)| *d = *d + v);
                        }
                    }
                    if let Some(db) = self.slot(&mut grads, *rhs) {
                        for (item, chunk) in db.chunks_mut(lb).enumerate() {
                            let src = &g[item * (la + lb) + la..(item + 1) * (la + lb)];
                            chunk.iter_mut().zip(src).for_each(|(d, &v)| *d = *d + v);
                        }
                    }
                }
                Op::Reshape { input } => {
                    if let Some(dx) = self.slot(&mut grads, *input) {
                        dx.iter_mut().zip(&g).for_each(|(d, &v)| *d = *d + v);
                    }
                }
                Op::Mse { input, target } => {
                    let p = self.value(*input).data();
                    let scale = T::from_f64(2.0) * g[0] / T::from_f64(p.len().max(1) as f64);
                    if let Some(dx) = self.slot(&mut grads, *input) {
                        for ((d, &pv), &tv) in dx.iter_mut().zip(p).zip(target) {
                            *d = *d + scale * (pv - tv);
                        }
                    }
                }
            }
        }

        for (idx, slot) in grads.iter().enumerate() {
            if let (Some(g), Op::Leaf) = (slot, &self.nodes[idx].op) {
                self.nodes[idx].value.set_grad(g.clone())?;
            }
        }
        let params = self
            .params
            .iter()
            .filter(|(_, id)| id.0 <= root.0)
            .cloned()
            .collect();
        Ok(Gradients { grads, params })
    }

    /// Gradient accumulator for `id`, allocated on first use; `None` when the
    /// node is not tracked.
    fn slot<'a>(&self, grads: &'a mut [Option<Vec<T>>], id: NodeId) -> Option<&'a mut Vec<T>> {
        if !self.nodes[id.0].requires_grad {
            return None;
        }
        let len = self.nodes[id.0].value.len();
        Some(grads[id.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        g: &[T],
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        geom: &ConvGeometry,
        cols: &[Vec<T>],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (o, plen, olen) = (geom.out_channels, geom.patch_len(), geom.out_len());
        let in_len = geom.in_channels * geom.height * geom.width;
        let k = self.value(kernel).data();

        if let Some(db) = self.slot(grads, bias) {
            for item in 0..geom.batch {
                for (oc, d) in db.iter_mut().enumerate() {
                    let start = (item * o + oc) * olen;
                    *d = *d + g[start..start + olen].iter().copied().sum();
                }
            }
        }
        if let Some(dk) = self.slot(grads, kernel) {
            for item in 0..geom.batch {
                let go = &g[item * o * olen..(item + 1) * o * olen];
                T::gemm(o, olen, plen, go, (olen as isize, 1), &cols[item], (1, olen as isize), T::one(), dk);
            }
        }
        if let Some(dx) = self.slot(grads, input) {
            let mut dcol = vec![T::zero(); plen * olen];
            for item in 0..geom.batch {
                let go = &g[item * o * olen..(item + 1) * o * olen];
                T::gemm(plen, o, olen, k, (1, plen as isize), go, (olen as isize, 1), T::zero(), &mut dcol);
                col2im_add(&dcol, geom, &mut dx[item * in_len..(item + 1) * in_len]);
            }
        }
    }
}

fn im2col<T: Real>(x: &[T], geom: &ConvGeometry, col: &mut [T]) {
    let (h, w) = (geom.height as isize, geom.width as isize);
    let olen = geom.out_len();
    let mut row = 0;
    for c in 0..geom.in_channels {
        let plane = &x[c * geom.height * geom.width..(c + 1) * geom.height * geom.width];
        for ki in 0..geom.kernel_h {
            for kj in 0..geom.kernel_w {
                let dst = &mut col[row * olen..(row + 1) * olen];
                for oy in 0..geom.out_h {
                    let y = (oy * geom.stride + ki) as isize - geom.pad as isize;
                    let line = &mut dst[oy * geom.out_w..(oy + 1) * geom.out_w];
                    if y < 0 || y >= h {
                        line.fill(T::zero());
                        continue;
                    }
                    for (ox, v) in line.iter_mut().enumerate() {
                        let xx = (ox * geom.stride + kj) as isize - geom.pad as isize;
                        *v = if xx < 0 || xx >= w {
                            T::zero()
                        } else {
                            plane[(y * w + xx) as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im_add<T: Real>(col: &[T], geom: &ConvGeometry, dx: &mut [T]) {
    let (h, w) = (geom.height as isize, geom.width as isize);
    let olen = geom.out_len();
    let mut row = 0;
    for c in 0..geom.in_channels {
        let plane = &mut dx[c * geom.height * geom.width..(c + 1) * geom.height * geom.width];
        for ki in 0..geom.kernel_h {
            for kj in 0..geom.kernel_w {
                let src = &col[row * olen..(row + 1) * olen];
                for oy in 0..geom.out_h {
                    let y = (oy * geom.stride + ki) as isize - geom.pad as isize;
                    if y < 0 || y >= h {
                        continue;
                    }
                    for ox in 0..geom.out_w {
                        let xx = (ox * geom.stride + kj) as isize - geom.pad as isize;
                        if xx >= 0 && xx < w {
                            let idx = (y * w + xx) as usize;
                            plane[idx] = plane[idx] + src[oy * geom.out_w + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Result of a backward sweep.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(String, NodeId)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the root with respect to a tracked leaf.
    pub fn wrt(&self, id: NodeId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, name: &str) -> Option<&[T]> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|(_, id)| self.wrt(*id))
    }

    /// `(name, gradient)` for every parameter that received one.
    pub fn params(&self) -> impl Iterator<Item = (&str, &[T])> {
        self.params
            .iter()
            .filter_map(|(n, id)| self.wrt(*id).map(|g| (n.as_str(), g)))
    }
}
