use super::conv::Conv3dGeometry;
use super::gemm::gemm;
use super::{softmax_in_place, Tensor};
use crate::error::{Error, Result};

/// Handle to a value held by a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    /// Normalize with batch statistics and fold them into the running estimates.
    Train,
    /// Normalize with the running estimates.
    Eval,
}

/// Per-channel running mean/variance of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Detached,
    Conv3d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: Conv3dGeometry,
    },
    GlobalAvgPool {
        input: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Relu {
        input: Var,
    },
    Add {
        lhs: Var,
        rhs: Var,
    },
    Mul {
        lhs: Var,
        rhs: Var,
    },
    Scale {
        input: Var,
        factor: f64,
    },
    Sum {
        input: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
        mode: BatchNormMode,
    },
    AdjointScale {
        input: Var,
        factor: f64,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Detached => "detached",
            Op::Conv3d { .. } => "conv3d",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::Linear { .. } => "linear",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::Relu { .. } => "relu",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Sum { .. } => "sum",
            Op::BatchNorm { .. } => "batch_norm",
            Op::AdjointScale { .. } => "adjoint_scale",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Record of executed primitives.
///
/// Nodes are appended in execution order, so reversing the node list replays
/// adjoints in exact reverse order. A graph built with [`Graph::inference`]
/// computes values without recording anything.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    recording: bool,
    adjoints: Vec<Option<Vec<f64>>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            recording: true,
            adjoints: Vec::new(),
        }
    }

    pub fn inference() -> Self {
        Graph {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Names of the recorded primitives, in execution order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that tracks gradients.
    pub fn param(&mut self, tensor: &Tensor) -> Var {
        let mut t = tensor.clone().with_requires_grad(true);
        t.clear_grad();
        self.leaf(t)
    }

    /// Leaf that never tracks gradients.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Adjoint of `v` from the most recent [`Graph::backward`], if it was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.adjoints.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = self.recording && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let op = if self.recording { op } else { Op::Detached };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv3d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        let geom = Conv3dGeometry::new(x.shape(), w.shape(), stride, padding)?;
        if b.shape() != [geom.out_channels] {
            return Err(Error::Shape(format!(
                "conv3d bias {:?} does not match weight {:?}",
                b.shape(),
                w.shape()
            )));
        }
        let out = geom.forward(x.data(), w.data(), b.data());
        let value = Tensor::new(geom.output_shape(), out)?;
        Ok(self.push(
            value,
            Op::Conv3d {
                input,
                weight,
                bias,
                geom,
            },
            &[input, weight, bias],
        ))
    }

    /// `[N, C, ...] -> [N, C]`, mean over all trailing axes.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.ndim() < 3 {
            return Err(Error::Shape(format!(
                "global_avg_pool expects [N,C,...], got {:?}",
                x.shape()
            )));
        }
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let cell: usize = x.shape()[2..].iter().product();
        let out: Vec<f64> = x
            .data()
            .chunks(cell)
            .map(|block| block.iter().sum::<f64>() / cell as f64)
            .collect();
        let value = Tensor::new(vec![n, c], out)?;
        Ok(self.push(value, Op::GlobalAvgPool { input }, &[input]))
    }

    /// `input[N,F] * weight[K,F]^T + bias[K]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        if x.ndim() != 2 || w.ndim() != 2 || x.shape()[1] != w.shape()[1] || b.shape() != [w.shape()[0]] {
            return Err(Error::Shape(format!(
                "linear: input {:?}, weight {:?}, bias {:?}",
                x.shape(),
                w.shape(),
                b.shape()
            )));
        }
        let (n, f, k) = (x.shape()[0], x.shape()[1], w.shape()[0]);
        let mut out = vec![0.0; n * k];
        for row in out.chunks_mut(k) {
            row.copy_from_slice(b.data());
        }
        gemm(n, f, k, x.data(), false, w.data(), true, &mut out, true);
        let value = Tensor::new(vec![n, k], out)?;
        Ok(self.push(value, Op::Linear { input, weight, bias }, &[input, weight, bias]))
    }

    /// Mean over the batch of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        if z.ndim() != 2 || z.shape()[0] != targets.len() {
            return Err(Error::Shape(format!(
                "softmax_cross_entropy: logits {:?} with {} targets",
                z.shape(),
                targets.len()
            )));
        }
        let (n, k) = (z.shape()[0], z.shape()[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Index(format!("target {bad} outside [0, {k})")));
        }
        let mut probs = z.data().to_vec();
        let mut loss = 0.0;
        for (row, (&t, zrow)) in probs.chunks_mut(k).zip(targets.iter().zip(z.data().chunks(k))) {
            let max = zrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + zrow.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - zrow[t];
            softmax_in_place(row);
        }
        let value = Tensor::scalar(loss / n as f64);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let out = x.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(x.shape().to_vec(), out).expect("same shape");
        self.push(value, Op::Relu { input }, &[input])
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        if a.shape() != b.shape() {
            return Err(Error::Shape(format!("add: {:?} vs {:?}", a.shape(), b.shape())));
        }
        let out = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(a.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Add { lhs, rhs }, &[lhs, rhs]))
    }

    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        if a.shape() != b.shape() {
            return Err(Error::Shape(format!("mul: {:?} vs {:?}", a.shape(), b.shape())));
        }
        let out = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(a.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Mul { lhs, rhs }, &[lhs, rhs]))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let x = self.value(input);
        let out = x.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(x.shape().to_vec(), out).expect("same shape");
        self.push(value, Op::Scale { input, factor }, &[input])
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum { input }, &[input])
    }

    /// Identity on the forward pass whose adjoint is multiplied by `factor`.
    ///
    /// Only useful as a negative control for gradient checking.
    #[doc(hidden)]
    pub fn adjoint_scale(&mut self, input: Var, factor: f64) -> Var {
        let value = self.value(input).clone().with_requires_grad(false);
        self.push(value, Op::AdjointScale { input, factor }, &[input])
    }

    /// Per-channel normalization over every axis except axis 1.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        mode: BatchNormMode,
    ) -> Result<Var> {
        let x = self.value(input);
        if x.ndim() < 2 {
            return Err(Error::Shape(format!("batch_norm expects [N,C,...], got {:?}", x.shape())));
        }
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let cell: usize = x.shape()[2..].iter().product();
        let g = self.value(gamma);
        let b = self.value(beta);
        if g.shape() != [c] || b.shape() != [c] || stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::Shape(format!(
                "batch_norm: input {:?}, gamma {:?}, beta {:?}, running stats over {} channels",
                x.shape(),
                g.shape(),
                b.shape(),
                stats.mean.len()
            )));
        }
        let count = n * cell;
        if mode == BatchNormMode::Train && count < 2 {
            return Err(Error::Shape(format!(
                "batch_norm in train mode needs at least 2 values per channel, input {:?}",
                x.shape()
            )));
        }
        let xd = x.data();
        let mut inv_std = vec![0.0; c];
        let mut mean = vec![0.0; c];
        match mode {
            BatchNormMode::Train => {
                for ch in 0..c {
                    let mut s = 0.0;
                    for i in 0..n {
                        s += xd[(i * c + ch) * cell..(i * c + ch + 1) * cell].iter().sum::<f64>();
                    }
                    let m = s / count as f64;
                    let mut ss = 0.0;
                    for i in 0..n {
                        ss += xd[(i * c + ch) * cell..(i * c + ch + 1) * cell]
                            .iter()
                            .map(|v| (v - m) * (v - m))
                            .sum::<f64>();
                    }
                    let var = ss / count as f64;
                    mean[ch] = m;
                    inv_std[ch] = 1.0 / (var + stats.eps).sqrt();
                    let unbiased = ss / (count - 1) as f64;
                    stats.mean[ch] = (1.0 - stats.momentum) * stats.mean[ch] + stats.momentum * m;
                    stats.var[ch] = (1.0 - stats.momentum) * stats.var[ch] + stats.momentum * unbiased;
                }
            }
            BatchNormMode::Eval => {
                for ch in 0..c {
                    mean[ch] = stats.mean[ch];
                    inv_std[ch] = 1.0 / (stats.var[ch] + stats.eps).sqrt();
                }
            }
        }
        let mut normalized = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for i in 0..n {
            for ch in 0..c {
                let range = (i * c + ch) * cell..(i * c + ch + 1) * cell;
                for j in range {
                    let h = (xd[j] - mean[ch]) * inv_std[ch];
                    normalized[j] = h;
                    out[j] = g.data()[ch] * h + b.data()[ch];
                }
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
                mode,
            },
            &[input, gamma, beta],
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Every node's adjoint from this sweep is kept (see [`Graph::grad`]) and
    /// every gradient-tracking leaf reached gets its `grad` overwritten.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Usage(format!("backward on unknown value #{}", loss.0)))?;
        if node.value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.value.shape()
            )));
        }
        if !self.recording || matches!(node.op, Op::Detached) {
            return Err(Error::Usage("backward on a value that was not recorded".into()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.propagate(i, &g, &mut adj);
            }
            adj[i] = Some(g);
        }
        for (node, a) in self.nodes.iter_mut().zip(&adj) {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() {
                if let Some(a) = a {
                    node.value.set_grad(a.clone())?;
                }
            }
        }
        self.adjoints = adj;
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        match &self.nodes[i].op {
            Op::Leaf | Op::Detached => {}
            Op::Conv3d {
                input,
                weight,
                bias,
                geom,
            } => {
                let need_params = self.wants(*weight) || self.wants(*bias);
                let (dx, dw, db) = geom.backward(
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g,
                    self.wants(*input),
                    need_params,
                );
                if let Some(dx) = dx {
                    accumulate(adj, *input, dx);
                }
                if self.wants(*weight) {
                    accumulate(adj, *weight, dw.expect("requested"));
                }
                if self.wants(*bias) {
                    accumulate(adj, *bias, db.expect("requested"));
                }
            }
            Op::GlobalAvgPool { input } => {
                if self.wants(*input) {
                    let x = self.value(*input);
                    let cell: usize = x.shape()[2..].iter().product();
                    let mut dx = vec![0.0; x.numel()];
                    for (block, &gv) in dx.chunks_mut(cell).zip(g) {
                        block.fill(gv / cell as f64);
                    }
                    accumulate(adj, *input, dx);
                }
            }
            Op::Linear { input, weight, bias } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (n, f, k) = (x.shape()[0], x.shape()[1], w.shape()[0]);
                if self.wants(*input) {
                    let mut dx = vec![0.0; n * f];
                    gemm(n, k, f, g, false, w.data(), false, &mut dx, false);
                    accumulate(adj, *input, dx);
                }
                if self.wants(*weight) {
                    let mut dw = vec![0.0; k * f];
                    gemm(k, n, f, g, true, x.data(), false, &mut dw, false);
                    accumulate(adj, *weight, dw);
                }
                if self.wants(*bias) {
                    let mut db = vec![0.0; k];
                    for row in g.chunks(k) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(adj, *bias, db);
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if self.wants(*logits) {
                    let n = targets.len();
                    let k = probs.len() / n;
                    let scale = g[0] / n as f64;
                    let mut dz: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (row, &t) in dz.chunks_mut(k).zip(targets) {
                        row[t] -= scale;
                    }
                    accumulate(adj, *logits, dz);
                }
            }
            Op::Relu { input } => {
                let x = self.value(*input).data();
                let dx = x.iter().zip(g).map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 }).collect();
                accumulate(adj, *input, dx);
            }
            Op::Add { lhs, rhs } => {
                if self.wants(*lhs) {
                    accumulate(adj, *lhs, g.to_vec());
                }
                if self.wants(*rhs) {
                    accumulate(adj, *rhs, g.to_vec());
                }
            }
            Op::Mul { lhs, rhs } => {
                let (a, b) = (self.value(*lhs).data(), self.value(*rhs).data());
                if self.wants(*lhs) {
                    accumulate(adj, *lhs, g.iter().zip(b).map(|(gv, y)| gv * y).collect());
                }
                if self.wants(*rhs) {
                    accumulate(adj, *rhs, g.iter().zip(a).map(|(gv, x)| gv * x).collect());
                }
            }
            Op::Scale { input, factor } | Op::AdjointScale { input, factor } => {
                accumulate(adj, *input, g.iter().map(|v| v * factor).collect());
            }
            Op::Sum { input } => {
                let n = self.value(*input).numel();
                accumulate(adj, *input, vec![g[0]; n]);
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
                mode,
            } => {
                let x = self.value(*input);
                let (n, c) = (x.shape()[0], x.shape()[1]);
                let cell: usize = x.shape()[2..].iter().product();
                let count = (n * cell) as f64;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let r = (i * c + ch) * cell..(i * c + ch + 1) * cell;
                        for (gv, h) in g[r.clone()].iter().zip(&normalized[r]) {
                            dbeta[ch] += gv;
                            dgamma[ch] += gv * h;
                        }
                    }
                }
                if self.wants(*input) {
                    let mut dx = vec![0.0; x.numel()];
                    for i in 0..n {
                        for ch in 0..c {
                            let r = (i * c + ch) * cell..(i * c + ch + 1) * cell;
                            let k = gam[ch] * inv_std[ch];
                            for j in r {
                                dx[j] = match mode {
                                    BatchNormMode::Train => {
                                        k * (g[j] - dbeta[ch] / count - normalized[j] * dgamma[ch] / count)
                                    }
                                    BatchNormMode::Eval => k * g[j],
                                };
                            }
                        }
                    }
                    accumulate(adj, *input, dx);
                }
                if self.wants(*gamma) {
                    accumulate(adj, *gamma, dgamma);
                }
                if self.wants(*beta) {
                    accumulate(adj, *beta, dbeta);
                }
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], v: Var, contribution: Vec<f64>) {
    match &mut adj[v.0] {
        Some(existing) => {
            for (a, c) in existing.iter_mut().zip(&contribution) {
                *a += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}
