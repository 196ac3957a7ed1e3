//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records operations in topological order as they are built; a
//! single [`Graph::backward`] pass walks the record in reverse and accumulates
//! gradients for every leaf created with [`Graph::parameter`]. Leaves created
//! with [`Graph::constant`] never receive gradients and whole subtrees that
//! cannot reach a parameter are skipped during the backward sweep.
//!
//! Shapes follow a small set of conventions:
//! * convolutions take `C x H x W` or batched `B x C x H x W` inputs,
//! * fully-connected layers take `n` or `B x n`,
//! * elementwise ops accept equal shapes, and additionally allow the
//!   right-hand side to broadcast over the leading axes of the left
//!   (e.g. `B x 2 x I x J` combined with `2 x I x J`).

use crate::error::TensorError;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Per-channel batch statistics produced by a train-mode batch norm, used by
/// the caller to update running estimates.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Tensor,
    pub var: Tensor,
}

enum Op {
    Leaf,
    Add { lhs: NodeId, rhs: NodeId },
    Hadamard { lhs: NodeId, rhs: NodeId },
    Relu { input: NodeId },
    Tanh { input: NodeId },
    Reshape { input: NodeId },
    Sum { input: NodeId },
    Conv2dSame { input: NodeId, weight: NodeId, bias: NodeId },
    FullyConnected { input: NodeId, weight: NodeId, bias: NodeId },
    BatchNormTrain { input: NodeId, gamma: NodeId, beta: NodeId, mean: Vec<f64>, inv_std: Vec<f64> },
    BatchNormInfer { input: NodeId, gamma: NodeId, beta: NodeId, mean: Tensor, inv_std: Vec<f64> },
    MseLoss { pred: NodeId, target: NodeId },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every parameter leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `id`. Parameters untouched by the loss report an exact
    /// zero tensor of the parameter's shape.
    pub fn get(&self, id: NodeId, graph: &Graph) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(graph.value(id).shape()),
        }
    }
}

/// Interpret a shape as batched conv input: returns (batch, c, h, w).
fn conv_dims(shape: &[usize]) -> Option<(usize, usize, usize, usize)> {
    match shape {
        [c, h, w] => Some((1, *c, *h, *w)),
        [b, c, h, w] => Some((*b, *c, *h, *w)),
        _ => None,
    }
}

fn fc_dims(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [n] => Some((1, *n)),
        [b, n] => Some((*b, *n)),
        _ => None,
    }
}

/// Broadcast compatibility for elementwise ops: equal shapes, or `rhs` equal
/// to a suffix of `lhs` (repeated over the leading axes).
fn broadcast_blocks(lhs: &[usize], rhs: &[usize]) -> Option<usize> {
    if lhs.len() < rhs.len() || lhs[lhs.len() - rhs.len()..] != *rhs {
        return None;
    }
    Some(lhs[..lhs.len() - rhs.len()].iter().product())
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Trainable leaf: receives a gradient from `backward`.
    pub fn parameter(&mut self, value: Tensor) -> NodeId {
        self.push(value, true, Op::Leaf)
    }

    /// Non-trainable leaf (inputs, targets, fixed masks).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, false, Op::Leaf)
    }

    pub fn add(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId, TensorError> {
        self.elementwise(lhs, rhs, "add", |a, b| a + b, |l, r| Op::Add { lhs: l, rhs: r })
    }

    pub fn hadamard(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId, TensorError> {
        self.elementwise(
            lhs,
            rhs,
            "hadamard",
            |a, b| a * b,
            |l, r| Op::Hadamard { lhs: l, rhs: r },
        )
    }

    fn elementwise(
        &mut self,
        lhs: NodeId,
        rhs: NodeId,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(NodeId, NodeId) -> Op,
    ) -> Result<NodeId, TensorError> {
        let lv = self.value(lhs);
        let rv = self.value(rhs);
        let blocks = broadcast_blocks(lv.shape(), rv.shape()).ok_or_else(|| {
            TensorError::ShapeMismatch {
                op: name,
                lhs: lv.shape().to_vec(),
                rhs: rv.shape().to_vec(),
            }
        })?;
        let n = rv.len();
        let mut data = Vec::with_capacity(lv.len());
        for block in 0..blocks {
            let ls = &lv.data()[block * n..(block + 1) * n];
            for (a, b) in ls.iter().zip(rv.data()) {
                data.push(f(*a, *b));
            }
        }
        let value = Tensor::new(lv.shape().to_vec(), data)?;
        let rg = self.needs(lhs) || self.needs(rhs);
        Ok(self.push(value, rg, make(lhs, rhs)))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let value = self.value(input).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.needs(input);
        self.push(value, rg, Op::Relu { input })
    }

    pub fn tanh(&mut self, input: NodeId) -> NodeId {
        let value = self.value(input).map(f64::tanh);
        let rg = self.needs(input);
        self.push(value, rg, Op::Tanh { input })
    }

    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId, TensorError> {
        let value = self.value(input).reshape(shape)?;
        let rg = self.needs(input);
        Ok(self.push(value, rg, Op::Reshape { input }))
    }

    /// Sum of all elements, yielding a scalar.
    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(input).sum());
        let rg = self.needs(input);
        self.push(value, rg, Op::Sum { input })
    }

    /// Stride-1 zero-padded convolution preserving spatial size. The kernel
    /// anchor is `(k-1)/2`, which for even kernels puts the extra padding on
    /// the high side.
    pub fn conv2d_same(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    ) -> Result<NodeId, TensorError> {
        let iv = self.value(input);
        let wv = self.value(weight);
        let bv = self.value(bias);
        let (batch, c_in, h, w) =
            conv_dims(iv.shape()).ok_or_else(|| TensorError::BadRank {
                op: "conv2d_same",
                shape: iv.shape().to_vec(),
            })?;
        let (c_out, wc_in, k) = match wv.shape() {
            [co, ci, kh, kw] if kh == kw => (*co, *ci, *kh),
            _ => {
                return Err(TensorError::BadRank {
                    op: "conv2d_same(weight)",
                    shape: wv.shape().to_vec(),
                })
            }
        };
        if wc_in != c_in || bv.shape() != [c_out] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d_same",
                lhs: iv.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; batch * c_out * h * w];
        conv_forward(
            iv.data(),
            wv.data(),
            bv.data(),
            &mut out,
            batch,
            c_in,
            c_out,
            h,
            w,
            k,
        );
        let mut shape = iv.shape().to_vec();
        let ch_axis = shape.len() - 3;
        shape[ch_axis] = c_out;
        let value = Tensor::new(shape, out)?;
        let rg = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(value, rg, Op::Conv2dSame { input, weight, bias }))
    }

    /// Affine map `y = W x + b` with `W: m x n`, applied per batch row.
    pub fn fully_connected(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    ) -> Result<NodeId, TensorError> {
        let xv = self.value(input);
        let wv = self.value(weight);
        let bv = self.value(bias);
        let (batch, n) = fc_dims(xv.shape()).ok_or_else(|| TensorError::BadRank {
            op: "fully_connected",
            shape: xv.shape().to_vec(),
        })?;
        let (m, wn) = match wv.shape() {
            [m, n] => (*m, *n),
            _ => {
                return Err(TensorError::BadRank {
                    op: "fully_connected(weight)",
                    shape: wv.shape().to_vec(),
                })
            }
        };
        if wn != n || bv.shape() != [m] {
            return Err(TensorError::ShapeMismatch {
                op: "fully_connected",
                lhs: xv.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; batch * m];
        for b in 0..batch {
            let x = &xv.data()[b * n..(b + 1) * n];
            for i in 0..m {
                let row = &wv.data()[i * n..(i + 1) * n];
                let mut acc = bv.data()[i];
                for (wij, xj) in row.iter().zip(x) {
                    acc += wij * xj;
                }
                out[b * m + i] = acc;
            }
        }
        let shape = if xv.rank() == 1 { vec![m] } else { vec![batch, m] };
        let value = Tensor::new(shape, out)?;
        let rg = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(value, rg, Op::FullyConnected { input, weight, bias }))
    }

    /// Train-mode batch normalization over a `B x C x H x W` input: per
    /// channel, normalize by the batch mean/variance (biased, over B*H*W),
    /// then scale and shift. Returns the batch statistics so the caller can
    /// fold them into running estimates.
    pub fn batch_norm_train(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, BatchStats), TensorError> {
        let xv = self.value(input);
        let (batch, c, h, w) = match xv.shape() {
            [b, c, h, w] => (*b, *c, *h, *w),
            _ => {
                return Err(TensorError::BadRank {
                    op: "batch_norm_train",
                    shape: xv.shape().to_vec(),
                })
            }
        };
        self.check_bn_params(gamma, beta, c)?;
        let plane = h * w;
        let count = (batch * plane) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for b in 0..batch {
            for (ch, slot) in mean.iter_mut().enumerate() {
                let s = &xv.data()[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                *slot += s.iter().sum::<f64>();
            }
        }
        for m in &mut mean {
            *m /= count;
        }
        for b in 0..batch {
            for ch in 0..c {
                let s = &xv.data()[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                var[ch] += s.iter().map(|x| (x - mean[ch]) * (x - mean[ch])).sum::<f64>();
            }
        }
        for v in &mut var {
            *v /= count;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut out = vec![0.0; xv.len()];
        for b in 0..batch {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                let (g, be, m, is) = (gv[ch], bv[ch], mean[ch], inv_std[ch]);
                for (o, x) in out[base..base + plane]
                    .iter_mut()
                    .zip(&self.value(input).data()[base..base + plane])
                {
                    *o = g * (x - m) * is + be;
                }
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let stats = BatchStats {
            mean: Tensor::new(vec![c], mean.clone())?,
            var: Tensor::new(vec![c], var.clone())?,
        };
        let rg = self.needs(input) || self.needs(gamma) || self.needs(beta);
        let id = self.push(
            value,
            rg,
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                mean,
                inv_std,
            },
        );
        Ok((id, stats))
    }

    /// Inference-mode batch normalization using fixed running statistics.
    pub fn batch_norm_infer(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &Tensor,
        running_var: &Tensor,
        eps: f64,
    ) -> Result<NodeId, TensorError> {
        let xv = self.value(input);
        let (_batch, c, h, w) = conv_dims(xv.shape()).ok_or_else(|| TensorError::BadRank {
            op: "batch_norm_infer",
            shape: xv.shape().to_vec(),
        })?;
        self.check_bn_params(gamma, beta, c)?;
        if running_mean.shape() != [c] || running_var.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm_infer",
                lhs: running_mean.shape().to_vec(),
                rhs: vec![c],
            });
        }
        let inv_std: Vec<f64> = running_var.data().iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let plane = h * w;
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut out = vec![0.0; xv.len()];
        let planes = xv.len() / plane;
        for p in 0..planes {
            let ch = p % c;
            let base = p * plane;
            let (g, be, m, is) = (gv[ch], bv[ch], running_mean.data()[ch], inv_std[ch]);
            for (o, x) in out[base..base + plane]
                .iter_mut()
                .zip(&self.value(input).data()[base..base + plane])
            {
                *o = g * (x - m) * is + be;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.needs(input) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            value,
            rg,
            Op::BatchNormInfer {
                input,
                gamma,
                beta,
                mean: running_mean.clone(),
                inv_std,
            },
        ))
    }

    fn check_bn_params(&self, gamma: NodeId, beta: NodeId, c: usize) -> Result<(), TensorError> {
        for id in [gamma, beta] {
            if self.value(id).shape() != [c] {
                return Err(TensorError::ShapeMismatch {
                    op: "batch_norm",
                    lhs: self.value(id).shape().to_vec(),
                    rhs: vec![c],
                });
            }
        }
        Ok(())
    }

    /// Mean over all elements of the squared difference.
    pub fn mse_loss(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId, TensorError> {
        let pv = self.value(pred);
        let tv = self.value(target);
        if pv.shape() != tv.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mse_loss",
                lhs: pv.shape().to_vec(),
                rhs: tv.shape().to_vec(),
            });
        }
        let n = pv.len() as f64;
        let sum: f64 = pv
            .data()
            .iter()
            .zip(tv.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        let value = Tensor::scalar(sum / n);
        let rg = self.needs(pred) || self.needs(target);
        Ok(self.push(value, rg, Op::MseLoss { pred, target }))
    }

    /// Gradients of a scalar root with respect to every parameter leaf.
    /// Nodes are visited in reverse construction order, each exactly once.
    pub fn backward(&self, root: NodeId) -> Result<Gradients, TensorError> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(TensorError::NonScalarRoot {
                shape: root_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            let gout = grads[idx].take().unwrap();
            let keep = matches!(self.nodes[idx].op, Op::Leaf);
            self.propagate(idx, &gout, &mut grads)?;
            if keep {
                grads[idx] = Some(gout);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, delta: &[f64]) {
        if !self.needs(id) {
            return;
        }
        let slot = &mut grads[id.0];
        match slot {
            Some(existing) => {
                for (g, d) in existing.data_mut().iter_mut().zip(delta) {
                    *g += d;
                }
            }
            None => {
                let shape = self.value(id).shape().to_vec();
                *slot = Some(Tensor::new(shape, delta.to_vec()).expect("gradient shape"));
            }
        }
    }

    fn propagate(
        &self,
        idx: usize,
        gout: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<(), TensorError> {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add { lhs, rhs } => {
                self.accumulate(grads, *lhs, gout.data());
                if self.needs(*rhs) {
                    let reduced = reduce_broadcast(gout.data(), self.value(*rhs).len());
                    self.accumulate(grads, *rhs, &reduced);
                }
            }
            Op::Hadamard { lhs, rhs } => {
                let lv = self.value(*lhs);
                let rv = self.value(*rhs);
                let n = rv.len();
                if self.needs(*lhs) {
                    let mut d = vec![0.0; lv.len()];
                    for (i, g) in gout.data().iter().enumerate() {
                        d[i] = g * rv.data()[i % n];
                    }
                    self.accumulate(grads, *lhs, &d);
                }
                if self.needs(*rhs) {
                    let mut d = vec![0.0; n];
                    for (i, g) in gout.data().iter().enumerate() {
                        d[i % n] += g * lv.data()[i];
                    }
                    self.accumulate(grads, *rhs, &d);
                }
            }
            Op::Relu { input } => {
                let iv = self.value(*input);
                let d: Vec<f64> = gout
                    .data()
                    .iter()
                    .zip(iv.data())
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *input, &d);
            }
            Op::Tanh { input } => {
                let yv = &self.nodes[idx].value;
                let d: Vec<f64> = gout
                    .data()
                    .iter()
                    .zip(yv.data())
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect();
                self.accumulate(grads, *input, &d);
            }
            Op::Reshape { input } => {
                self.accumulate(grads, *input, gout.data());
            }
            Op::Sum { input } => {
                let g = gout.data()[0];
                let d = vec![g; self.value(*input).len()];
                self.accumulate(grads, *input, &d);
            }
            Op::Conv2dSame { input, weight, bias } => {
                let iv = self.value(*input);
                let wv = self.value(*weight);
                let (batch, c_in, h, w) = conv_dims(iv.shape()).expect("validated");
                let c_out = wv.shape()[0];
                let k = wv.shape()[2];
                if self.needs(*input) {
                    let mut gin = vec![0.0; iv.len()];
                    conv_backward_input(
                        gout.data(),
                        wv.data(),
                        &mut gin,
                        batch,
                        c_in,
                        c_out,
                        h,
                        w,
                        k,
                    );
                    self.accumulate(grads, *input, &gin);
                }
                if self.needs(*weight) {
                    let mut gw = vec![0.0; wv.len()];
                    conv_backward_weight(
                        gout.data(),
                        iv.data(),
                        &mut gw,
                        batch,
                        c_in,
                        c_out,
                        h,
                        w,
                        k,
                    );
                    self.accumulate(grads, *weight, &gw);
                }
                if self.needs(*bias) {
                    let plane = h * w;
                    let mut gb = vec![0.0; c_out];
                    for b in 0..batch {
                        for (co, slot) in gb.iter_mut().enumerate() {
                            let s = &gout.data()[(b * c_out + co) * plane..(b * c_out + co + 1) * plane];
                            *slot += s.iter().sum::<f64>();
                        }
                    }
                    self.accumulate(grads, *bias, &gb);
                }
            }
            Op::FullyConnected { input, weight, bias } => {
                let xv = self.value(*input);
                let wv = self.value(*weight);
                let (batch, n) = fc_dims(xv.shape()).expect("validated");
                let m = wv.shape()[0];
                if self.needs(*input) {
                    let mut gx = vec![0.0; xv.len()];
                    for b in 0..batch {
                        for i in 0..m {
                            let g = gout.data()[b * m + i];
                            let row = &wv.data()[i * n..(i + 1) * n];
                            for (gxj, wij) in gx[b * n..(b + 1) * n].iter_mut().zip(row) {
                                *gxj += g * wij;
                            }
                        }
                    }
                    self.accumulate(grads, *input, &gx);
                }
                if self.needs(*weight) {
                    let mut gw = vec![0.0; wv.len()];
                    for b in 0..batch {
                        let x = &xv.data()[b * n..(b + 1) * n];
                        for i in 0..m {
                            let g = gout.data()[b * m + i];
                            for (gwij, xj) in gw[i * n..(i + 1) * n].iter_mut().zip(x) {
                                *gwij += g * xj;
                            }
                        }
                    }
                    self.accumulate(grads, *weight, &gw);
                }
                if self.needs(*bias) {
                    let mut gb = vec![0.0; m];
                    for b in 0..batch {
                        for (gbi, g) in gb.iter_mut().zip(&gout.data()[b * m..(b + 1) * m]) {
                            *gbi += g;
                        }
                    }
                    self.accumulate(grads, *bias, &gb);
                }
            }
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let xv = self.value(*input);
                let (batch, c, h, w) = match xv.shape() {
                    [b, c, h, w] => (*b, *c, *h, *w),
                    _ => unreachable!(),
                };
                let plane = h * w;
                let count = (batch * plane) as f64;
                let gv = self.value(*gamma).data();
                // Accumulate per-channel reductions first.
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for b in 0..batch {
                    for ch in 0..c {
                        let base = (b * c + ch) * plane;
                        for (g, x) in gout.data()[base..base + plane]
                            .iter()
                            .zip(&xv.data()[base..base + plane])
                        {
                            sum_g[ch] += g;
                            sum_gx[ch] += g * (x - mean[ch]) * inv_std[ch];
                        }
                    }
                }
                if self.needs(*input) {
                    let mut gin = vec![0.0; xv.len()];
                    for b in 0..batch {
                        for ch in 0..c {
                            let base = (b * c + ch) * plane;
                            let (g_ch, is, m) = (gv[ch], inv_std[ch], mean[ch]);
                            for i in 0..plane {
                                let xhat = (xv.data()[base + i] - m) * is;
                                let go = gout.data()[base + i];
                                gin[base + i] = g_ch * is / count
                                    * (count * go - sum_g[ch] - xhat * sum_gx[ch]);
                            }
                        }
                    }
                    self.accumulate(grads, *input, &gin);
                }
                if self.needs(*gamma) {
                    self.accumulate(grads, *gamma, &sum_gx);
                }
                if self.needs(*beta) {
                    self.accumulate(grads, *beta, &sum_g);
                }
            }
            Op::BatchNormInfer {
                input,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let xv = self.value(*input);
                let (_batch, c, h, w) = conv_dims(xv.shape()).expect("validated");
                let plane = h * w;
                let planes = xv.len() / plane;
                let gv = self.value(*gamma).data();
                if self.needs(*input) {
                    let mut gin = vec![0.0; xv.len()];
                    for p in 0..planes {
                        let ch = p % c;
                        let base = p * plane;
                        let scale = gv[ch] * inv_std[ch];
                        for i in 0..plane {
                            gin[base + i] = gout.data()[base + i] * scale;
                        }
                    }
                    self.accumulate(grads, *input, &gin);
                }
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut gg = vec![0.0; c];
                    let mut gb = vec![0.0; c];
                    for p in 0..planes {
                        let ch = p % c;
                        let base = p * plane;
                        for i in 0..plane {
                            let xhat = (xv.data()[base + i] - mean.data()[ch]) * inv_std[ch];
                            gg[ch] += gout.data()[base + i] * xhat;
                            gb[ch] += gout.data()[base + i];
                        }
                    }
                    self.accumulate(grads, *gamma, &gg);
                    self.accumulate(grads, *beta, &gb);
                }
            }
            Op::MseLoss { pred, target } => {
                let pv = self.value(*pred);
                let tv = self.value(*target);
                let n = pv.len() as f64;
                let g = gout.data()[0];
                if self.needs(*pred) {
                    let d: Vec<f64> = pv
                        .data()
                        .iter()
                        .zip(tv.data())
                        .map(|(p, t)| g * 2.0 * (p - t) / n)
                        .collect();
                    self.accumulate(grads, *pred, &d);
                }
                if self.needs(*target) {
                    let d: Vec<f64> = pv
                        .data()
                        .iter()
                        .zip(tv.data())
                        .map(|(p, t)| g * 2.0 * (t - p) / n)
                        .collect();
                    self.accumulate(grads, *target, &d);
                }
            }
        }
        Ok(())
    }
}

/// Sum a broadcast gradient back down to the smaller operand's length.
fn reduce_broadcast(gout: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for (i, g) in gout.iter().enumerate() {
        out[i % n] += g;
    }
    out
}

// Shared loop skeleton for the three convolution passes: for a given kernel
// offset (dy, dx) the valid output rows are y in [max(0, off-dy), min(h,
// h+off-dy)) and columns x in [max(0, off-dx), min(w, w+off-dx)), pairing
// output (y, x) with input (y+dy-off, x+dx-off). Inner loops run over
// contiguous row slices.

#[inline]
fn valid_range(extent: usize, off: usize, d: usize) -> (usize, usize) {
    let lo = off.saturating_sub(d);
    let hi = (extent + off).saturating_sub(d).min(extent);
    (lo, hi.max(lo))
}

/// One row of a width-3 horizontal stencil: `out[x] += w0*in[x-1] + w1*in[x]
/// + w2*in[x+1]` with zero padding at the row ends.
#[inline]
fn row_stencil3(out: &mut [f64], input: &[f64], w0: f64, w1: f64, w2: f64) {
    let w = out.len();
    if w == 1 {
        out[0] += w1 * input[0];
        return;
    }
    out[0] += w1 * input[0] + w2 * input[1];
    for x in 1..w - 1 {
        out[x] += w0 * input[x - 1] + w1 * input[x] + w2 * input[x + 1];
    }
    out[w - 1] += w0 * input[w - 2] + w1 * input[w - 1];
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(
    input: &[f64],
    weight: &[f64],
    bias: &[f64],
    out: &mut [f64],
    batch: usize,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    k: usize,
) {
    let off = (k - 1) / 2;
    let plane = h * w;
    for b in 0..batch {
        for co in 0..c_out {
            let out_plane = &mut out[(b * c_out + co) * plane..(b * c_out + co + 1) * plane];
            out_plane.fill(bias[co]);
            for ci in 0..c_in {
                let in_plane = &input[(b * c_in + ci) * plane..(b * c_in + ci + 1) * plane];
                if k == 3 {
                    let wk = &weight[(co * c_in + ci) * 9..(co * c_in + ci) * 9 + 9];
                    for y in 0..h {
                        for dy in 0..3usize {
                            let iy = y as i64 + dy as i64 - 1;
                            if iy < 0 || iy >= h as i64 {
                                continue;
                            }
                            let irow = &in_plane[iy as usize * w..(iy as usize + 1) * w];
                            let orow = &mut out_plane[y * w..(y + 1) * w];
                            row_stencil3(orow, irow, wk[dy * 3], wk[dy * 3 + 1], wk[dy * 3 + 2]);
                        }
                    }
                    continue;
                }
                for dy in 0..k {
                    let (y0, y1) = valid_range(h, off, dy);
                    for dx in 0..k {
                        let wv = weight[((co * c_in + ci) * k + dy) * k + dx];
                        let (x0, x1) = valid_range(w, off, dx);
                        if x0 >= x1 {
                            continue;
                        }
                        for y in y0..y1 {
                            let iy = y + dy - off;
                            let orow = &mut out_plane[y * w + x0..y * w + x1];
                            let irow = &in_plane[iy * w + x0 + dx - off..iy * w + x1 + dx - off];
                            for (o, i) in orow.iter_mut().zip(irow) {
                                *o += wv * i;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward_input(
    gout: &[f64],
    weight: &[f64],
    gin: &mut [f64],
    batch: usize,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    k: usize,
) {
    let off = (k - 1) / 2;
    let plane = h * w;
    for b in 0..batch {
        for co in 0..c_out {
            let gout_plane = &gout[(b * c_out + co) * plane..(b * c_out + co + 1) * plane];
            for ci in 0..c_in {
                let gin_plane = &mut gin[(b * c_in + ci) * plane..(b * c_in + ci + 1) * plane];
                if k == 3 {
                    // The input gradient is the correlation with the kernel
                    // flipped in both axes.
                    let wk = &weight[(co * c_in + ci) * 9..(co * c_in + ci) * 9 + 9];
                    for iy in 0..h {
                        for dy in 0..3usize {
                            let y = iy as i64 + 1 - dy as i64;
                            if y < 0 || y >= h as i64 {
                                continue;
                            }
                            let grow = &gout_plane[y as usize * w..(y as usize + 1) * w];
                            let irow = &mut gin_plane[iy * w..(iy + 1) * w];
                            row_stencil3(irow, grow, wk[dy * 3 + 2], wk[dy * 3 + 1], wk[dy * 3]);
                        }
                    }
                    continue;
                }
                for dy in 0..k {
                    let (y0, y1) = valid_range(h, off, dy);
                    for dx in 0..k {
                        let wv = weight[((co * c_in + ci) * k + dy) * k + dx];
                        let (x0, x1) = valid_range(w, off, dx);
                        if x0 >= x1 {
                            continue;
                        }
                        for y in y0..y1 {
                            let iy = y + dy - off;
                            let grow = &gout_plane[y * w + x0..y * w + x1];
                            let irow =
                                &mut gin_plane[iy * w + x0 + dx - off..iy * w + x1 + dx - off];
                            for (gi, g) in irow.iter_mut().zip(grow) {
                                *gi += wv * g;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward_weight(
    gout: &[f64],
    input: &[f64],
    gw: &mut [f64],
    batch: usize,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    k: usize,
) {
    let off = (k - 1) / 2;
    let plane = h * w;
    for b in 0..batch {
        for co in 0..c_out {
            let gout_plane = &gout[(b * c_out + co) * plane..(b * c_out + co + 1) * plane];
            for ci in 0..c_in {
                let in_plane = &input[(b * c_in + ci) * plane..(b * c_in + ci + 1) * plane];
                for dy in 0..k {
                    let (y0, y1) = valid_range(h, off, dy);
                    for dx in 0..k {
                        let (x0, x1) = valid_range(w, off, dx);
                        if x0 >= x1 {
                            continue;
                        }
                        // Four independent accumulators keep the reduction
                        // off the FP latency chain.
                        let mut acc = [0.0f64; 4];
                        for y in y0..y1 {
                            let iy = y + dy - off;
                            let grow = &gout_plane[y * w + x0..y * w + x1];
                            let irow = &in_plane[iy * w + x0 + dx - off..iy * w + x1 + dx - off];
                            let mut gc = grow.chunks_exact(4);
                            let mut ic = irow.chunks_exact(4);
                            for (g4, i4) in (&mut gc).zip(&mut ic) {
                                acc[0] += g4[0] * i4[0];
                                acc[1] += g4[1] * i4[1];
                                acc[2] += g4[2] * i4[2];
                                acc[3] += g4[3] * i4[3];
                            }
                            for (g, i) in gc.remainder().iter().zip(ic.remainder()) {
                                acc[0] += g * i;
                            }
                        }
                        gw[((co * c_in + ci) * k + dy) * k + dx] +=
                            (acc[0] + acc[1]) + (acc[2] + acc[3]);
                    }
                }
            }
        }
    }
}
