//! Minimal reverse-mode automatic differentiation over dense 2-D tensors.
//!
//! A [`Graph`] is an append-only tape: every op computes its forward value
//! eagerly and records what its backward rule needs. [`Graph::backward`]
//! walks the tape in reverse insertion order (which is a reverse
//! topological order) and visits each node exactly once.
//!
//! Values are held in f64 so central-difference gradient checks are
//! meaningful at 1e-4 relative tolerance; persisted weights are f32 and are
//! widened on graph entry.
//!
//! The quantization-aware piece is [`Graph::fake_quant`]: its forward is
//! the quantize-dequantize composition from [`crate::quant`], and its
//! backward treats the non-differentiable sign/round step as the identity
//! (straight-through estimator), optionally gated by a hard-tanh mask.
//! With `scale_backprop` enabled the group scale contributes to the chain
//! rule as a differentiable function of the weights; with it disabled the
//! scale acts as a detached constant.

pub mod optim;

use crate::error::{Error, Result};
use crate::quant::{self, QuantDetail, QuantMode, QuantScheme};

/// Dense row-major f64 matrix. Vectors are `(1, n)`, scalars `(1, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    data: Vec<f64>,
    shape: (usize, usize),
    requires_grad: bool,
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: (usize, usize)) -> Result<Self> {
        if data.len() != shape.0 * shape.1 {
            return Err(Error::ShapeMismatch(format!(
                "{} values for shape {}x{}",
                data.len(),
                shape.0,
                shape.1
            )));
        }
        Ok(Self {
            data,
            shape,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: (usize, usize)) -> Self {
        Self {
            data: vec![0.0; shape.0 * shape.1],
            shape,
            requires_grad: false,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            data: vec![v],
            shape: (1, 1),
            requires_grad: false,
        }
    }

    pub fn from_f32(data: &[f32], shape: (usize, usize)) -> Result<Self> {
        Self::new(data.iter().map(|&v| v as f64).collect(), shape)
    }

    /// Mark the tensor as a trainable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> (usize, usize) {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.numel()));
        }
        Ok(self.data[0])
    }
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Backward behavior of the non-differentiable quantization step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SteKind {
    /// Pass the upstream gradient through unchanged.
    #[default]
    Identity,
    /// Pass through, but zero the gradient where `|w| > 1`.
    HardTanh,
}

/// Options for [`Graph::fake_quant`].
#[derive(Debug, Clone, Copy)]
pub struct FakeQuantOpts {
    /// Let the scale participate in the chain rule as a function of the
    /// weights instead of acting as a detached constant.
    pub scale_backprop: bool,
    pub ste: SteKind,
}

impl Default for FakeQuantOpts {
    fn default() -> Self {
        Self {
            scale_backprop: true,
            ste: SteKind::Identity,
        }
    }
}

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    AddRowBias(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    /// `a . wᵀ` where `w` is `[out x in]`.
    Linear(NodeId, NodeId),
    Relu(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    MeanPool {
        x: NodeId,
        group: usize,
    },
    ReduceMean(NodeId),
    ReduceSum(NodeId),
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
    },
    FakeQuant {
        w: NodeId,
        scheme: QuantScheme,
        opts: FakeQuantOpts,
        detail: Box<QuantDetail<f64>>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients keyed by node id after a backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.index()).and_then(|g| g.as_ref())
    }
}

impl NodeId {
    fn index(self) -> usize {
        self.0
    }
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

    /// Insert a leaf tensor; its `requires_grad` flag decides whether
    /// [`Graph::backward`] produces a gradient for it.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        let requires_grad = value.requires_grad;
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape != vb.shape {
            return Err(Error::ShapeMismatch(format!(
                "add: {:?} vs {:?}",
                va.shape, vb.shape
            )));
        }
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
        let value = Tensor::new(data, va.shape)?;
        Ok(self.push(value, Op::Add(a, b), self.needs_grad(&[a, b])))
    }

    /// Add a `(1, cols)` bias row to every row of `a`.
    pub fn add_row_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(bias));
        if vb.shape.0 != 1 || vb.shape.1 != va.shape.1 {
            return Err(Error::ShapeMismatch(format!(
                "add_row_bias: {:?} vs bias {:?}",
                va.shape, vb.shape
            )));
        }
        let cols = va.shape.1;
        let data = va
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| x + vb.data[i % cols])
            .collect();
        let value = Tensor::new(data, va.shape)?;
        Ok(self.push(value, Op::AddRowBias(a, bias), self.needs_grad(&[a, bias])))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape != vb.shape {
            return Err(Error::ShapeMismatch(format!(
                "mul: {:?} vs {:?}",
                va.shape, vb.shape
            )));
        }
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
        let value = Tensor::new(data, va.shape)?;
        Ok(self.push(value, Op::Mul(a, b), self.needs_grad(&[a, b])))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = va.shape;
        let (k2, n) = vb.shape;
        if k != k2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul: {:?} vs {:?}",
                va.shape, vb.shape
            )));
        }
        let value = Tensor::new(mat_nn(&va.data, &vb.data, m, k, n), (m, n))?;
        Ok(self.push(value, Op::MatMul(a, b), self.needs_grad(&[a, b])))
    }

    /// `a . wᵀ` with `w` stored `[out x in]`, the linear-layer orientation
    /// used by the quantizers and the packed kernel.
    pub fn linear(&mut self, a: NodeId, w: NodeId) -> Result<NodeId> {
        let (va, vw) = (self.value(a), self.value(w));
        let (m, k) = va.shape;
        let (n, k2) = vw.shape;
        if k != k2 {
            return Err(Error::ShapeMismatch(format!(
                "linear: {:?} vs weight {:?}",
                va.shape, vw.shape
            )));
        }
        let value = Tensor::new(mat_nt(&va.data, &vw.data, m, k, n), (m, n))?;
        Ok(self.push(value, Op::Linear(a, w), self.needs_grad(&[a, w])))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let data = vx.data.iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor {
            data,
            shape: vx.shape,
            requires_grad: false,
        };
        let needs = self.nodes[x.0].requires_grad;
        self.push(value, Op::Relu(x), needs)
    }

    /// Row-wise normalization with a learned per-column gain and shift:
    /// `y = gain * (x - mean) / sqrt(var + eps) + bias`.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let (_, cols) = vx.shape;
        if vg.shape != (1, cols) || vb.shape != (1, cols) {
            return Err(Error::ShapeMismatch(format!(
                "layer_norm: x {:?}, gain {:?}, bias {:?}",
                vx.shape, vg.shape, vb.shape
            )));
        }
        let mut data = vec![0.0; vx.numel()];
        for (r, row) in vx.data.chunks(cols).enumerate() {
            let (mean, sigma) = row_moments(row, eps);
            for c in 0..cols {
                let xhat = (row[c] - mean) / sigma;
                data[r * cols + c] = vg.data[c] * xhat + vb.data[c];
            }
        }
        let value = Tensor::new(data, vx.shape)?;
        Ok(self.push(
            value,
            Op::LayerNorm { x, gain, bias, eps },
            self.needs_grad(&[x, gain, bias]),
        ))
    }

    /// Average each run of `group` consecutive rows: `[R x C]` becomes
    /// `[R/group x C]`.
    pub fn mean_pool(&mut self, x: NodeId, group: usize) -> Result<NodeId> {
        let vx = self.value(x);
        let (rows, cols) = vx.shape;
        if group == 0 || rows % group != 0 {
            return Err(Error::ShapeMismatch(format!(
                "mean_pool: group {group} does not divide {rows} rows"
            )));
        }
        let out_rows = rows / group;
        let mut data = vec![0.0; out_rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[(r / group) * cols + c] += vx.data[r * cols + c] / group as f64;
            }
        }
        let value = Tensor::new(data, (out_rows, cols))?;
        let needs = self.nodes[x.0].requires_grad;
        Ok(self.push(value, Op::MeanPool { x, group }, needs))
    }

    pub fn reduce_mean(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let mean = vx.data.iter().sum::<f64>() / vx.numel() as f64;
        let needs = self.nodes[x.0].requires_grad;
        self.push(Tensor::scalar(mean), Op::ReduceMean(x), needs)
    }

    pub fn reduce_sum(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let sum = vx.data.iter().sum::<f64>();
        let needs = self.nodes[x.0].requires_grad;
        self.push(Tensor::scalar(sum), Op::ReduceSum(x), needs)
    }

    /// Mean cross-entropy between the row-wise softmax of `logits` and
    /// integer class labels.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let vl = self.value(logits);
        let (rows, cols) = vl.shape;
        if labels.len() != rows {
            return Err(Error::ShapeMismatch(format!(
                "softmax_cross_entropy: {} labels for {rows} rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(Error::ShapeMismatch(format!(
                "label {bad} out of range for {cols} classes"
            )));
        }
        let mut loss = 0.0;
        for (row, &label) in vl.data.chunks(cols).zip(labels) {
            let log_probs = row_log_softmax(row);
            loss -= log_probs[label];
        }
        loss /= rows as f64;
        let needs = self.nodes[logits.0].requires_grad;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            needs,
        ))
    }

    /// Quantize-dequantize `w` under `scheme` (the fake-quantization
    /// training forward) with a straight-through backward.
    pub fn fake_quant(
        &mut self,
        w: NodeId,
        scheme: &QuantScheme,
        opts: FakeQuantOpts,
    ) -> Result<NodeId> {
        let vw = self.value(w);
        let want_aux = scheme.mode == QuantMode::AbsmaxAsymmetric;
        let (values, detail) =
            quant::fake_quant_detail(&vw.data, vw.shape.0, vw.shape.1, scheme, want_aux)?;
        let value = Tensor::new(values, vw.shape)?;
        let needs = self.nodes[w.0].requires_grad;
        Ok(self.push(
            value,
            Op::FakeQuant {
                w,
                scheme: *scheme,
                opts,
                detail: Box::new(detail),
            },
            needs,
        ))
    }

    /// Reverse pass from a scalar loss. Returns gradients for every node
    /// that `requires_grad`, visiting each tape entry exactly once in
    /// reverse topological order.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_value.numel()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].clone() else { continue };
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, g.data.clone(), g.shape);
                    self.accumulate(&mut grads, *b, g.data.clone(), g.shape);
                }
                Op::AddRowBias(a, bias) => {
                    let cols = g.shape.1;
                    let mut gb = vec![0.0; cols];
                    for (i, v) in g.data.iter().enumerate() {
                        gb[i % cols] += v;
                    }
                    self.accumulate(&mut grads, *a, g.data.clone(), g.shape);
                    self.accumulate(&mut grads, *bias, gb, (1, cols));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let ga: Vec<f64> = g.data.iter().zip(&vb.data).map(|(g, y)| g * y).collect();
                    let gb: Vec<f64> = g.data.iter().zip(&va.data).map(|(g, x)| g * x).collect();
                    self.accumulate(&mut grads, *a, ga, va.shape);
                    self.accumulate(&mut grads, *b, gb, vb.shape);
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (m, k) = va.shape;
                    let n = vb.shape.1;
                    // dA = G . Bᵀ ; dB = Aᵀ . G
                    let ga = mat_nt(&g.data, &vb.data, m, n, k);
                    let gb = mat_tn(&va.data, &g.data, m, k, n);
                    self.accumulate(&mut grads, *a, ga, va.shape);
                    self.accumulate(&mut grads, *b, gb, vb.shape);
                }
                Op::Linear(a, w) => {
                    let (va, vw) = (self.value(*a), self.value(*w));
                    let (m, k) = va.shape;
                    let n = vw.shape.0;
                    // y = A . Wᵀ : dA = G . W ; dW = Gᵀ . A
                    let ga = mat_nn(&g.data, &vw.data, m, n, k);
                    let gw = mat_tn(&g.data, &va.data, m, n, k);
                    self.accumulate(&mut grads, *a, ga, va.shape);
                    self.accumulate(&mut grads, *w, gw, vw.shape);
                }
                Op::Relu(x) => {
                    let vx = self.value(*x);
                    let gx = g
                        .data
                        .iter()
                        .zip(&vx.data)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect();
                    self.accumulate(&mut grads, *x, gx, vx.shape);
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let (vx, vg) = (self.value(*x), self.value(*gain));
                    let (rows, cols) = vx.shape;
                    let mut gx = vec![0.0; rows * cols];
                    let mut ggain = vec![0.0; cols];
                    let mut gbias = vec![0.0; cols];
                    for r in 0..rows {
                        let row = &vx.data[r * cols..(r + 1) * cols];
                        let grow = &g.data[r * cols..(r + 1) * cols];
                        let (mean, sigma) = row_moments(row, *eps);
                        let mut mean_gy = 0.0;
                        let mut mean_gy_xhat = 0.0;
                        let mut xhat = vec![0.0; cols];
                        for c in 0..cols {
                            xhat[c] = (row[c] - mean) / sigma;
                            let gy = grow[c] * vg.data[c];
                            mean_gy += gy;
                            mean_gy_xhat += gy * xhat[c];
                        }
                        mean_gy /= cols as f64;
                        mean_gy_xhat /= cols as f64;
                        for c in 0..cols {
                            let gy = grow[c] * vg.data[c];
                            gx[r * cols + c] = (gy - mean_gy - xhat[c] * mean_gy_xhat) / sigma;
                            ggain[c] += grow[c] * xhat[c];
                            gbias[c] += grow[c];
                        }
                    }
                    self.accumulate(&mut grads, *x, gx, vx.shape);
                    self.accumulate(&mut grads, *gain, ggain, (1, cols));
                    self.accumulate(&mut grads, *bias, gbias, (1, cols));
                }
                Op::MeanPool { x, group } => {
                    let vx = self.value(*x);
                    let (rows, cols) = vx.shape;
                    let mut gx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            gx[r * cols + c] = g.data[(r / group) * cols + c] / *group as f64;
                        }
                    }
                    self.accumulate(&mut grads, *x, gx, vx.shape);
                }
                Op::ReduceMean(x) => {
                    let vx = self.value(*x);
                    let scale = g.data[0] / vx.numel() as f64;
                    self.accumulate(&mut grads, *x, vec![scale; vx.numel()], vx.shape);
                }
                Op::ReduceSum(x) => {
                    let vx = self.value(*x);
                    self.accumulate(&mut grads, *x, vec![g.data[0]; vx.numel()], vx.shape);
                }
                Op::SoftmaxCrossEntropy { logits, labels } => {
                    let vl = self.value(*logits);
                    let (rows, cols) = vl.shape;
                    let mut gx = vec![0.0; rows * cols];
                    for (r, (row, &label)) in vl.data.chunks(cols).zip(labels).enumerate() {
                        let log_probs = row_log_softmax(row);
                        for c in 0..cols {
                            let p = log_probs[c].exp();
                            let onehot = if c == label { 1.0 } else { 0.0 };
                            gx[r * cols + c] = g.data[0] * (p - onehot) / rows as f64;
                        }
                    }
                    self.accumulate(&mut grads, *logits, gx, vl.shape);
                }
                Op::FakeQuant {
                    w,
                    scheme,
                    opts,
                    detail,
                } => {
                    let vw = self.value(*w);
                    let gw = fake_quant_backward(&g.data, &vw.data, scheme, detail, *opts);
                    self.accumulate(&mut grads, *w, gw, vw.shape);
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Tensor>],
        id: NodeId,
        delta: Vec<f64>,
        shape: (usize, usize),
    ) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => {
                for (e, d) in existing.data.iter_mut().zip(&delta) {
                    *e += d;
                }
            }
            slot @ None => {
                *slot = Some(Tensor {
                    data: delta,
                    shape,
                    requires_grad: false,
                });
            }
        }
    }
}

/// Straight-through pass of an upstream gradient across the sign/round
/// step: the identity map, optionally zeroed where `|w| > 1`.
pub fn ste_passthrough(upstream: &[f64], w: &[f64], kind: SteKind) -> Vec<f64> {
    match kind {
        SteKind::Identity => upstream.to_vec(),
        SteKind::HardTanh => upstream
            .iter()
            .zip(w)
            .map(|(&g, &w)| if w.abs() <= 1.0 { g } else { 0.0 })
            .collect(),
    }
}

fn fake_quant_backward(
    g: &[f64],
    w: &[f64],
    scheme: &QuantScheme,
    detail: &QuantDetail<f64>,
    opts: FakeQuantOpts,
) -> Vec<f64> {
    let layout = &detail.layout;
    let cols = layout.cols;
    let through = ste_passthrough(g, w, opts.ste);
    let mut gw = vec![0.0; w.len()];
    match scheme.mode {
        QuantMode::AbsmeanSymmetric => {
            // y_i = s * sign(w_i): the sign step backs through as identity
            // scaled by the detached group scale; with scale backprop the
            // absmean adds (sum_i g_i c_i) * sign(w_j) / len per group.
            for gidx in 0..layout.group_count() {
                let span = layout.group_span(gidx);
                let base = span.row * cols;
                let scale = detail.scales[gidx];
                let len = (span.col_end - span.col_start) as f64;
                let mut dot = 0.0;
                if opts.scale_backprop {
                    for col in span.col_start..span.col_end {
                        dot += g[base + col] * sign_code(w[base + col]);
                    }
                }
                for col in span.col_start..span.col_end {
                    let idx = base + col;
                    gw[idx] = through[idx] * scale;
                    if opts.scale_backprop {
                        gw[idx] += dot * sign_code(w[idx]) / len;
                    }
                }
            }
        }
        QuantMode::AbsmaxAsymmetric => {
            // Identity through the round step for in-range values. With
            // scale backprop the range endpoints are functions of the group
            // min/max, so rounding residuals and clipped values push
            // gradient onto the argmin/argmax elements.
            let aux = detail
                .affine
                .as_ref()
                .expect("absmax detail carries affine aux");
            let zps = detail.zero_points.as_ref().unwrap();
            let levels = (scheme.levels() - 1) as f64;
            let clip = scheme.clip as f64;
            for gidx in 0..layout.group_count() {
                let span = layout.group_span(gidx);
                let base = span.row * cols;
                let lo = zps[gidx];
                let mut resid_dot = 0.0;
                let mut low_clip = 0.0;
                let mut high_clip = 0.0;
                for col in span.col_start..span.col_end {
                    let idx = base + col;
                    if aux.in_range[idx] {
                        gw[idx] = through[idx];
                        if opts.scale_backprop {
                            resid_dot += g[idx] * aux.resid[idx];
                        }
                    } else if opts.scale_backprop {
                        if w[idx] < lo {
                            low_clip += g[idx];
                        } else {
                            high_clip += g[idx];
                        }
                    }
                }
                if opts.scale_backprop {
                    gw[aux.argmax[gidx]] += clip * (resid_dot / levels + high_clip);
                    gw[aux.argmin[gidx]] += clip * (-resid_dot / levels + low_clip);
                }
            }
        }
    }
    gw
}

/// Sign with the zero-substitution convention: exact zeros count as +1.
fn sign_code(v: f64) -> f64 {
    if v < 0.0 {
        -1.0
    } else {
        1.0
    }
}

fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, (var + eps).sqrt())
}

fn row_log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_z = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|&v| v - log_z).collect()
}

// Row-major matrix product helpers, f64 accumulation throughout.

/// `C[m x n] = A[m x k] . B[k x n]`
fn mat_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            for j in 0..n {
                out[i * n + j] += av * b[p * n + j];
            }
        }
    }
    out
}

/// `C[m x n] = A[m x k] . B[n x k]ᵀ`
fn mat_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[j * k + p];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// `C[k x n] = A[m x k]ᵀ . B[m x n]`
fn mat_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            for j in 0..n {
                out[p * n + j] += av * b[i * n + j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::QuantScheme;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
    }

    #[test]
    fn matmul_identity_passes_input_through() {
        let mut g = Graph::new();
        let eye = g.leaf(Tensor::new(vec![1.0, 0.0, 0.0, 1.0], (2, 2)).unwrap());
        let x = g.leaf(Tensor::new(vec![3.0, -1.0, 2.0, 0.5], (2, 2)).unwrap());
        let y = g.matmul(eye, x).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn uniform_logits_loss_is_ln_c() {
        let mut g = Graph::new();
        for classes in [2usize, 5, 7] {
            let logits = g.leaf(Tensor::zeros((3, classes)));
            let loss = g
                .softmax_cross_entropy(logits, &[0, 1, classes - 1])
                .unwrap();
            let expect = (classes as f64).ln();
            assert!(close(g.value(loss).item().unwrap(), expect, 1e-12));
        }
    }

    #[test]
    fn reduce_mean_gradient_is_one_over_n() {
        let mut g = Graph::new();
        let x = g.leaf(
            Tensor::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], (2, 3))
                .unwrap()
                .with_grad(),
        );
        let loss = g.reduce_mean(x);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), vec![1.0 / 6.0; 6].as_slice());
    }

    #[test]
    fn sum_gradients_match_closed_forms() {
        // loss = sum(w) -> grad = ones
        let mut g = Graph::new();
        let w = g.leaf(
            Tensor::new(vec![1.0, -2.0, 0.5], (1, 3))
                .unwrap()
                .with_grad(),
        );
        let loss = g.reduce_sum(w);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 1.0, 1.0]);

        // loss = sum(w * w) -> grad = 2w
        let mut g = Graph::new();
        let w = g.leaf(
            Tensor::new(vec![1.0, -2.0, 0.5], (1, 3))
                .unwrap()
                .with_grad(),
        );
        let sq = g.mul(w, w).unwrap();
        let loss = g.reduce_sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros((2, 2)).with_grad());
        let err = g.backward(x).unwrap_err();
        assert!(matches!(err, Error::NonScalarLoss(4)));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros((2, 3)));
        let b = g.leaf(Tensor::zeros((3, 2)));
        assert!(g.add(a, b).is_err());
        assert!(g.mul(a, b).is_err());
        assert!(g.linear(a, b).is_err());
    }

    #[test]
    fn ste_backward_is_elementwise_identity() {
        let upstream = [0.3, -1.2, 0.0, 7.5];
        let w = [0.1, -0.5, 2.0, -3.0];
        let out = ste_passthrough(&upstream, &w, SteKind::Identity);
        assert_eq!(out, upstream.to_vec());

        let masked = ste_passthrough(&upstream, &w, SteKind::HardTanh);
        assert_eq!(masked, vec![0.3, -1.2, 0.0, 0.0]);
    }

    #[test]
    fn detached_scale_reduces_to_diagonal_scale() {
        // With scale_backprop = false the Jacobian of s * ste(sign(w)) is
        // diag(scale per group).
        let mut g = Graph::new();
        let w = g.leaf(
            Tensor::new(vec![0.5, -1.0, 1.5, -0.25, 2.0, -2.0, 1.0, 3.0], (2, 4))
                .unwrap()
                .with_grad(),
        );
        let fq = g
            .fake_quant(
                w,
                &QuantScheme::absmean1(),
                FakeQuantOpts {
                    scale_backprop: false,
                    ste: SteKind::Identity,
                },
            )
            .unwrap();
        let loss = g.reduce_sum(fq);
        let grads = g.backward(loss).unwrap();
        let scale0 = (0.5 + 1.0 + 1.5 + 0.25) / 4.0;
        let scale1 = (2.0 + 2.0 + 1.0 + 3.0) / 4.0;
        let expect = vec![
            scale0, scale0, scale0, scale0, scale1, scale1, scale1, scale1,
        ];
        for (got, want) in grads.get(w).unwrap().data().iter().zip(&expect) {
            assert!(close(*got, *want, 1e-12), "{got} vs {want}");
        }
    }

    #[test]
    fn scale_backprop_adds_absmean_term() {
        // grad_j = g_j * s + (sum_i g_i c_i) * c_j / K for loss = sum(fq).
        let mut g = Graph::new();
        let w = g.leaf(Tensor::new(vec![1.0, 2.0], (1, 2)).unwrap().with_grad());
        let fq = g
            .fake_quant(w, &QuantScheme::absmean1(), FakeQuantOpts::default())
            .unwrap();
        let loss = g.reduce_sum(fq);
        let grads = g.backward(loss).unwrap();
        // s = 1.5, codes [1, 1], dot = 2 -> grad = 1.5 + 2/2 = 2.5.
        assert_eq!(grads.get(w).unwrap().data(), &[2.5, 2.5]);
    }

    #[test]
    fn absmax_scale_backprop_routes_residuals_to_extrema() {
        // w = [-1, 0.4, 1, 2], 2 bits, clip 1: lo=-1, hi=2, s=1, codes
        // [0, 1, 2, 3], rounding residuals [0, -0.4, 0, 0]. For
        // loss = sum(fq): base grad is 1 everywhere; the residual sum
        // (-0.4)/3 lands on the argmax and its negation on the argmin.
        let mut g = Graph::new();
        let w = g.leaf(
            Tensor::new(vec![-1.0, 0.4, 1.0, 2.0], (1, 4))
                .unwrap()
                .with_grad(),
        );
        let fq = g
            .fake_quant(w, &QuantScheme::absmax_asym(2), FakeQuantOpts::default())
            .unwrap();
        let loss = g.reduce_sum(fq);
        let grads = g.backward(loss).unwrap();
        let got = grads.get(w).unwrap().data();
        let expect = [1.0 + 0.4 / 3.0, 1.0, 1.0, 1.0 - 0.4 / 3.0];
        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-12, "{got:?} vs {expect:?}");
        }

        // Detached scale leaves only the in-range identity.
        let mut g = Graph::new();
        let w = g.leaf(
            Tensor::new(vec![-1.0, 0.4, 1.0, 2.0], (1, 4))
                .unwrap()
                .with_grad(),
        );
        let fq = g
            .fake_quant(
                w,
                &QuantScheme::absmax_asym(2),
                FakeQuantOpts {
                    scale_backprop: false,
                    ste: SteKind::Identity,
                },
            )
            .unwrap();
        let loss = g.reduce_sum(fq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn clipped_values_route_gradient_to_range_endpoints() {
        // With clip 0.5 the range shrinks to [-0.5, 1.0]; -1 and 2 are
        // clipped, so their upstream gradients move to the group extrema.
        let mut g = Graph::new();
        let w = g.leaf(
            Tensor::new(vec![-1.0, 0.4, 2.0], (1, 3))
                .unwrap()
                .with_grad(),
        );
        let scheme = QuantScheme::absmax_asym(2).with_clip(0.5);
        let fq = g.fake_quant(w, &scheme, FakeQuantOpts::default()).unwrap();
        let loss = g.reduce_sum(fq);
        let grads = g.backward(loss).unwrap();
        let got = grads.get(w).unwrap().data();
        // lo=-0.5, hi=1.0, s=0.5: u(0.4)=1.8 -> code 2, resid 0.2.
        // argmin gets clip*(low_clip - resid/3), argmax clip*(high_clip + resid/3).
        let resid = 0.2;
        let expect = [0.5 * (1.0 - resid / 3.0), 1.0, 0.5 * (1.0 + resid / 3.0)];
        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-12, "{got:?} vs {expect:?}");
        }
    }

    #[test]
    fn gradients_flow_through_a_small_network() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![0.4, -0.3, 0.8, 0.2, -0.6, 0.1], (2, 3)).unwrap());
        let w = g.leaf(
            Tensor::new(vec![0.2, -0.4, 0.5, 0.7, 0.1, -0.2], (2, 3))
                .unwrap()
                .with_grad(),
        );
        let b = g.leaf(Tensor::new(vec![0.05, -0.02], (1, 2)).unwrap().with_grad());
        let h = g.linear(x, w).unwrap();
        let h = g.add_row_bias(h, b).unwrap();
        let h = g.relu(h);
        let loss = g.softmax_cross_entropy(h, &[0, 1]).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(w).is_some());
        assert!(grads.get(b).is_some());
        assert!(grads.get(x).is_none(), "constant input must carry no grad");
        assert!(g.value(loss).item().unwrap().is_finite());
    }

    #[test]
    fn mean_pool_averages_row_groups() {
        let mut g = Graph::new();
        let x = g.leaf(
            Tensor::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0], (4, 2))
                .unwrap()
                .with_grad(),
        );
        let pooled = g.mean_pool(x, 2).unwrap();
        assert_eq!(g.value(pooled).shape(), (2, 2));
        assert_eq!(g.value(pooled).data(), &[2.0, 3.0, 6.0, 7.0]);
        let loss = g.reduce_sum(pooled);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), vec![0.5; 8].as_slice());
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut g = Graph::new();
            let w = g.leaf(
                Tensor::new(vec![0.3, -0.7, 0.9, -0.1, 0.6, -0.5], (2, 3))
                    .unwrap()
                    .with_grad(),
            );
            let fq = g
                .fake_quant(w, &QuantScheme::e2(), FakeQuantOpts::default())
                .unwrap();
            let loss = g.reduce_sum(fq);
            let grads = g.backward(loss).unwrap();
            (
                g.value(loss).item().unwrap().to_bits(),
                grads.get(w).unwrap().data().to_vec(),
            )
        };
        assert_eq!(run(), run());
    }
}
