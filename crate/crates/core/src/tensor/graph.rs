use super::{matmul_dims, matmul_into, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Per-channel batch moments computed by a train-mode batch-norm node.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance used for normalization.
    pub var: Vec<f64>,
    /// Elements reduced per channel.
    pub count: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Reshape(NodeId),
    SliceRows {
        src: NodeId,
        start: usize,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        x_hat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    GlobalAvgPool(NodeId),
    SoftmaxCrossEntropy {
        logits: NodeId,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
    Mse {
        pred: NodeId,
        target: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradient tape. Nodes are appended in evaluation order, so reverse index
/// order is a valid topological order for backpropagation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

/// View an activation as `[N, C, S]` where `S` is the spatial extent.
fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    let n = shape[0];
    let c = shape.get(1).copied().unwrap_or(1);
    let s = shape.iter().skip(2).product();
    (n, c, s)
}

fn conv_out(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        debug_assert!(value.all_finite(), "non-finite output from {op:?}");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Register a leaf. Its `requires_grad` flag decides whether it collects gradients.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k, n) = matmul_dims(self.shape(a), self.shape(b))?;
        let mut out = vec![0.0; m * n];
        matmul_into(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `x[m×n] + b[n]` broadcast over rows.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 2 || bs != [xs[1]] {
            return Err(shape_err("add_bias", &xs, &bs));
        }
        let n = xs[1];
        let bias = self.value(b).data();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bias[i % n])
            .collect();
        let rg = self.rg(&[x, b]);
        Ok(self.push(Tensor::new(xs, out)?, Op::AddBias(x, b), rg))
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, op, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a);
        let out = v.data().iter().map(|x| x * c).collect();
        let t = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let out = v.data().iter().map(|x| x.max(0.0)).collect();
        let t = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len().max(1) as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let t = self.value(a).clone().with_requires_grad(false);
        let t = Tensor::new(t.shape().to_vec(), t.into_data())?.reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Rows `[start, end)` along the leading axis.
    pub fn slice_rows(&mut self, src: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let shape = self.shape(src).to_vec();
        if shape.is_empty() || start > end || end > shape[0] {
            return Err(shape_err("slice_rows", &shape, &[start, end]));
        }
        let t = self.value(src).slice_rows(start, end);
        let rg = self.rg(&[src]);
        Ok(self.push(t, Op::SliceRows { src, start }, rg))
    }

    /// 2-D convolution, `x: [N, C, H, W]`, `w: [O, C, K, K]`, no bias.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] || stride == 0 {
            return Err(shape_err("conv2d", &xs, &ws));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(shape_err("conv2d", &xs, &ws));
        }
        let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(wd, k, stride, pad));
        let xd = self.value(x).data();
        let wdta = self.value(w).data();
        let mut out = vec![0.0; n * o * ho * wo];
        for ni in 0..n {
            for oi in 0..o {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ki in 0..k {
                                let y = (i * stride + ki) as isize - pad as isize;
                                if y < 0 || y >= h as isize {
                                    continue;
                                }
                                for kj in 0..k {
                                    let xx = (j * stride + kj) as isize - pad as isize;
                                    if xx < 0 || xx >= wd as isize {
                                        continue;
                                    }
                                    acc += wdta[((oi * c + ci) * k + ki) * k + kj]
                                        * xd[((ni * c + ci) * h + y as usize) * wd + xx as usize];
                                }
                            }
                        }
                        out[((ni * o + oi) * ho + i) * wo + j] = acc;
                    }
                }
            }
        }
        let rg = self.rg(&[x, w]);
        Ok(self.push(
            Tensor::new(vec![n, o, ho, wo], out)?,
            Op::Conv2d { x, w, stride, pad },
            rg,
        ))
    }

    /// Train-mode batch normalization over every axis but the channel axis (axis 1).
    /// Returns the output node and the batch moments for running-stat updates.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, BatchStats)> {
        let xs = self.shape(x).to_vec();
        let (n, c, s) = channel_layout(&xs);
        self.check_affine("batch_norm_train", &xs, c, gamma, beta)?;
        let m = n * s;
        let xd = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * s;
                mean[ci] += xd[base..base + s].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m as f64);
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * s;
                var[ci] += xd[base..base + s]
                    .iter()
                    .map(|v| (v - mean[ci]).powi(2))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= m as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (out, x_hat) = self.normalize(x, gamma, beta, &mean, &inv_std, (n, c, s));
        let rg = self.rg(&[x, gamma, beta]);
        let id = self.push(
            Tensor::new(xs, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
                train: true,
            },
            rg,
        );
        Ok((
            id,
            BatchStats {
                mean,
                var,
                count: m,
            },
        ))
    }

    /// Eval-mode batch normalization with fixed running moments.
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let (n, c, s) = channel_layout(&xs);
        self.check_affine("batch_norm_eval", &xs, c, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(shape_err("batch_norm_eval", &xs, &[running_mean.len()]));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (out, x_hat) = self.normalize(x, gamma, beta, running_mean, &inv_std, (n, c, s));
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(xs, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
                train: false,
            },
            rg,
        ))
    }

    fn check_affine(
        &self,
        op: &'static str,
        xs: &[usize],
        c: usize,
        gamma: NodeId,
        beta: NodeId,
    ) -> Result<()> {
        if xs.len() < 2 || self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err(op, xs, self.shape(gamma)));
        }
        Ok(())
    }

    fn normalize(
        &self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[f64],
        inv_std: &[f64],
        (n, c, s): (usize, usize, usize),
    ) -> (Vec<f64>, Vec<f64>) {
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut x_hat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * s;
                for si in base..base + s {
                    let h = (xd[si] - mean[ci]) * inv_std[ci];
                    x_hat[si] = h;
                    out[si] = g[ci] * h + b[ci];
                }
            }
        }
        (out, x_hat)
    }

    /// Mean over spatial axes: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(shape_err("global_avg_pool", &xs, &[4]));
        }
        let (n, c, s) = channel_layout(&xs);
        let xd = self.value(x).data();
        let out: Vec<f64> = (0..n * c)
            .map(|i| xd[i * s..(i + 1) * s].iter().sum::<f64>() / s as f64)
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![n, c], out)?, Op::GlobalAvgPool(x), rg))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(shape_err("softmax_cross_entropy", &ls, &[labels.len()]));
        }
        let (b, c) = (ls[0], ls[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::LabelOutOfRange {
                label: bad,
                classes: c,
            });
        }
        let ld = self.value(logits).data();
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = &ld[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for (j, v) in row.iter().enumerate() {
                probs[i * c + j] = (v - max).exp() / z;
            }
            loss += max + z.ln() - row[label];
        }
        let loss = if b == 0 { 0.0 } else { loss / b as f64 };
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Mean squared error against a constant target, averaged over all elements.
    pub fn mse(&mut self, pred: NodeId, target: &[f64]) -> Result<NodeId> {
        let p = self.value(pred);
        if p.len() != target.len() {
            return Err(shape_err("mse", p.shape(), &[target.len()]));
        }
        let n = p.len().max(1) as f64;
        let loss = p
            .data()
            .iter()
            .zip(target)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / n;
        let rg = self.rg(&[pred]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    /// Backpropagate from a scalar node. Leaf gradients accumulate across calls;
    /// use [`Graph::zero_grad`] to reset them.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let len = self.value(loss).len();
        if len != 1 {
            return Err(TensorError::NotScalar { len });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                self.nodes[idx].value.accumulate_grad(&g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        Ok(())
    }

    fn send(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, delta: Vec<f64>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
            slot => *slot = Some(delta),
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.wants(*a) {
                    // dA = G · Bᵀ
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for r in 0..k {
                            let brow = &bv.data()[r * n..(r + 1) * n];
                            let grow = &g[i * n..(i + 1) * n];
                            da[i * k + r] = brow.iter().zip(grow).map(|(x, y)| x * y).sum();
                        }
                    }
                    self.send(grads, *a, da);
                }
                if self.wants(*b) {
                    // dB = Aᵀ · G
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for r in 0..k {
                            let av_ir = av.data()[i * k + r];
                            if av_ir == 0.0 {
                                continue;
                            }
                            let row = &mut db[r * n..(r + 1) * n];
                            for (d, gv) in row.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                                *d += av_ir * gv;
                            }
                        }
                    }
                    self.send(grads, *b, db);
                }
            }
            Op::AddBias(x, b) => {
                if self.wants(*x) {
                    self.send(grads, *x, g.to_vec());
                }
                if self.wants(*b) {
                    let n = self.value(*b).len();
                    let mut db = vec![0.0; n];
                    for (i, gv) in g.iter().enumerate() {
                        db[i % n] += gv;
                    }
                    self.send(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.send(grads, *a, g.to_vec());
                self.send(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, g.to_vec());
                self.send(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    self.send(grads, *a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                }
                if self.wants(*b) {
                    self.send(grads, *b, g.iter().zip(av).map(|(x, y)| x * y).collect());
                }
            }
            Op::Scale(a, c) => self.send(grads, *a, g.iter().map(|v| v * c).collect()),
            Op::Relu(a) => {
                let av = self.value(*a).data();
                let d = g
                    .iter()
                    .zip(av)
                    .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.send(grads, *a, d);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.send(grads, *a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                self.send(grads, *a, vec![g[0] / n.max(1) as f64; n]);
            }
            Op::Reshape(a) => self.send(grads, *a, g.to_vec()),
            Op::SliceRows { src, start } => {
                let sv = self.value(*src);
                let row: usize = sv.shape()[1..].iter().product();
                let mut d = vec![0.0; sv.len()];
                d[start * row..start * row + g.len()].copy_from_slice(g);
                self.send(grads, *src, d);
            }
            Op::Conv2d { x, w, stride, pad } => {
                self.conv2d_backward(*x, *w, *stride, *pad, g, grads)
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
                train,
            } => {
                let xs = self.shape(*x);
                let (n, c, s) = channel_layout(xs);
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * s;
                        for si in base..base + s {
                            dgamma[ci] += g[si] * x_hat[si];
                            dbeta[ci] += g[si];
                        }
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; g.len()];
                    if *train {
                        let m = (n * s) as f64;
                        // Σ dx̂ = γ·Σ dy,  Σ dx̂·x̂ = γ·Σ dy·x̂
                        for ni in 0..n {
                            for ci in 0..c {
                                let base = (ni * c + ci) * s;
                                for si in base..base + s {
                                    let dxh = g[si] * gam[ci];
                                    dx[si] = inv_std[ci] / m
                                        * (m * dxh
                                            - gam[ci] * dbeta[ci]
                                            - x_hat[si] * gam[ci] * dgamma[ci]);
                                }
                            }
                        }
                    } else {
                        for ni in 0..n {
                            for ci in 0..c {
                                let base = (ni * c + ci) * s;
                                for si in base..base + s {
                                    dx[si] = g[si] * gam[ci] * inv_std[ci];
                                }
                            }
                        }
                    }
                    self.send(grads, *x, dx);
                }
                if self.wants(*gamma) {
                    self.send(grads, *gamma, dgamma);
                }
                if self.wants(*beta) {
                    self.send(grads, *beta, dbeta);
                }
            }
            Op::GlobalAvgPool(x) => {
                let (n, c, s) = channel_layout(self.shape(*x));
                let mut dx = vec![0.0; n * c * s];
                for i in 0..n * c {
                    let v = g[i] / s as f64;
                    dx[i * s..(i + 1) * s].iter_mut().for_each(|d| *d = v);
                }
                self.send(grads, *x, dx);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let c = self.shape(*logits)[1];
                let b = labels.len().max(1) as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * g[0] / b).collect();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * c + l] -= g[0] / b;
                }
                self.send(grads, *logits, d);
            }
            Op::Mse { pred, target } => {
                let pv = self.value(*pred).data();
                let n = pv.len().max(1) as f64;
                let d = pv
                    .iter()
                    .zip(target)
                    .map(|(p, t)| 2.0 * (p - t) / n * g[0])
                    .collect();
                self.send(grads, *pred, d);
            }
        }
    }

    fn conv2d_backward(
        &self,
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(wd, k, stride, pad));
        let xd = self.value(x).data();
        let wdta = self.value(w).data();
        let want_x = self.wants(x);
        let want_w = self.wants(w);
        let mut dx = vec![0.0; if want_x { xd.len() } else { 0 }];
        let mut dw = vec![0.0; if want_w { wdta.len() } else { 0 }];
        for ni in 0..n {
            for oi in 0..o {
                for i in 0..ho {
                    for j in 0..wo {
                        let gv = g[((ni * o + oi) * ho + i) * wo + j];
                        if gv == 0.0 {
                            continue;
                        }
                        for ci in 0..c {
                            for ki in 0..k {
                                let y = (i * stride + ki) as isize - pad as isize;
                                if y < 0 || y >= h as isize {
                                    continue;
                                }
                                for kj in 0..k {
                                    let xx = (j * stride + kj) as isize - pad as isize;
                                    if xx < 0 || xx >= wd as isize {
                                        continue;
                                    }
                                    let xi = ((ni * c + ci) * h + y as usize) * wd + xx as usize;
                                    let wi = ((oi * c + ci) * k + ki) * k + kj;
                                    if want_w {
                                        dw[wi] += gv * xd[xi];
                                    }
                                    if want_x {
                                        dx[xi] += gv * wdta[wi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if want_x {
            self.send(grads, x, dx);
        }
        if want_w {
            self.send(grads, w, dw);
        }
    }
}
