//! Tape-based compute graph with reverse-mode automatic differentiation.
//!
//! One graph lives for one forward pass. Nodes are appended in execution
//! order, which is therefore a valid topological order; `backward` walks the
//! tape once in reverse and returns the parameter gradients as a bundle
//! (the graph immutably borrows the `ParameterSet` while alive, so the
//! caller stores the bundle into the tensors after dropping the graph).
//!
//! Gradient accumulation: a node used by several consumers sums the
//! contributions, which is what the jump connections rely on.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::CsiError;
use crate::params::{ParamId, ParameterSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    Conv3x3 { x: NodeId, k: NodeId, bias: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Hadamard { a: NodeId, b: NodeId },
    Sigmoid { x: NodeId },
    Tanh { x: NodeId },
    LeakyRelu { x: NodeId, slope: f64 },
    Affine { x: NodeId, mul: f64 },
    AddBiasCols { x: NodeId, bias: NodeId },
    SumAll { x: NodeId },
    Reshape { x: NodeId },
    FlattenSamples { x: NodeId },
    UnflattenSamples { x: NodeId },
    ChannelNorm { x: NodeId, scale: NodeId, shift: NodeId, mean: NodeId, var: NodeId, eps: f64 },
}

#[derive(Debug)]
enum Value<S: Scalar> {
    Owned(Tensor<S>),
    Param(ParamId),
}

#[derive(Debug)]
struct Node<S: Scalar> {
    op: Op,
    value: Value<S>,
    /// A gradient flows to this node (it is a trainable leaf or depends on one).
    tracked: bool,
    grad: Option<Vec<S>>,
}

/// Per-channel batch statistics observed by a normalization node whose
/// running buffers are parameters; the trainer uses these for the momentum
/// update of the running statistics.
#[derive(Debug, Clone)]
pub struct NormObservation<S: Scalar> {
    pub mean_param: ParamId,
    pub var_param: ParamId,
    pub batch_mean: Vec<S>,
    pub batch_var: Vec<S>,
}

pub struct Graph<'p, S: Scalar> {
    params: &'p ParameterSet<S>,
    nodes: Vec<Node<S>>,
    param_nodes: Vec<Option<NodeId>>,
    norm_observations: Vec<NormObservation<S>>,
    consumed: bool,
    leaky_margin: f64,
    leaky_signs: Vec<bool>,
}

impl<'p, S: Scalar> Graph<'p, S> {
    pub fn new(params: &'p ParameterSet<S>) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
            norm_observations: Vec::new(),
            consumed: false,
            leaky_margin: f64::INFINITY,
            leaky_signs: Vec::new(),
        }
    }

    /// Smallest |x| seen by any LeakyReLU in this graph. Finite-difference
    /// gradient validation is only meaningful when the evaluation point
    /// keeps a margin from the activation kinks; this reports it.
    pub fn leaky_kink_margin(&self) -> f64 {
        self.leaky_margin
    }

    /// Branch (x >= 0) taken per LeakyReLU input, in execution order. Two
    /// forward passes of the same network straddle an activation kink iff
    /// their sign traces differ.
    pub fn leaky_signs(&self) -> &[bool] {
        &self.leaky_signs
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        match &self.nodes[id.0].value {
            Value::Owned(t) => t,
            Value::Param(pid) => self.params.tensor(*pid),
        }
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.value(id).shape()
    }

    fn data(&self, id: NodeId) -> &[S] {
        self.value(id).data()
    }

    fn tracked(&self, id: NodeId) -> bool {
        self.nodes[id.0].tracked
    }

    pub fn norm_observations(&self) -> &[NormObservation<S>] {
        &self.norm_observations
    }

    /// Enter a constant (non-differentiated) tensor.
    pub fn constant(&mut self, t: Tensor<S>) -> NodeId {
        self.push(Op::Leaf, Value::Owned(t), false)
    }

    /// Enter a parameter leaf; repeated calls return the same node so the
    /// gradient accumulates in one place.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes[id.index()] {
            return n;
        }
        let tracked = self.params.get(id).trainable;
        let n = self.push(Op::Leaf, Value::Param(id), tracked);
        self.param_nodes[id.index()] = Some(n);
        n
    }

    fn push(&mut self, op: Op, value: Value<S>, tracked: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            tracked,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push_result(&mut self, op: Op, shape: Vec<usize>, data: Vec<S>, tracked: bool) -> Result<NodeId> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(CsiError::Contract(
                "non-finite value produced by graph operation".into(),
            ));
        }
        let t = Tensor::from_raw(shape, data);
        Ok(self.push(op, Value::Owned(t), tracked))
    }

    // ── operations ──────────────────────────────────────────────────────

    /// C[r x c] = A[r x k] . B[k x c].
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(CsiError::Dimension(format!(
                "matmul expects [r x k].[k x c], got {sa:?} . {sb:?}"
            )));
        }
        let (r, k, c) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::ZERO; r * c];
        kernels::matmul(self.data(a), self.data(b), &mut out, r, k, c);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push_result(Op::MatMul { a, b }, vec![r, c], out, tracked)
    }

    /// Same-padding 3x3 convolution with stride 1 on [B, Cin, H, W]
    /// (a rank-3 [Cin, H, W] input is treated as a single sample).
    pub fn conv2d_3x3(&mut self, x: NodeId, k: NodeId, bias: NodeId) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let (bs, cin, h, w, rank3) = match sx.len() {
            3 => (1, sx[0], sx[1], sx[2], true),
            4 => (sx[0], sx[1], sx[2], sx[3], false),
            _ => {
                return Err(CsiError::Dimension(format!(
                    "conv2d_3x3 expects rank 3 or 4 input, got {sx:?}"
                )))
            }
        };
        let sk = self.shape(k).to_vec();
        if sk.len() != 4 || sk[2] != 3 || sk[3] != 3 {
            return Err(CsiError::Dimension(format!(
                "conv2d_3x3 kernels must be [Cout x Cin x 3 x 3], got {sk:?}"
            )));
        }
        let (cout, kcin) = (sk[0], sk[1]);
        if kcin != cin {
            return Err(CsiError::Dimension(format!(
                "conv2d_3x3 channel mismatch: input {cin} channels, kernels expect {kcin}"
            )));
        }
        if self.shape(bias) != [cout] {
            return Err(CsiError::Dimension(format!(
                "conv2d_3x3 bias must be [{cout}], got {:?}",
                self.shape(bias)
            )));
        }
        let mut out = vec![S::ZERO; bs * cout * h * w];
        kernels::conv3x3(
            self.data(x),
            self.data(k),
            self.data(bias),
            &mut out,
            bs,
            cin,
            cout,
            h,
            w,
        );
        let tracked = self.tracked(x) || self.tracked(k) || self.tracked(bias);
        let shape = if rank3 {
            vec![cout, h, w]
        } else {
            vec![bs, cout, h, w]
        };
        self.push_result(Op::Conv3x3 { x, k, bias }, shape, out, tracked)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, Op::Add { a, b }, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, Op::Sub { a, b }, |x, y| x - y)
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, Op::Hadamard { a, b }, |x, y| x * y)
    }

    fn binary_same_shape(
        &mut self,
        a: NodeId,
        b: NodeId,
        op: Op,
        f: impl Fn(S, S) -> S,
    ) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(CsiError::Dimension(format!(
                "elementwise op needs equal shapes, got {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let shape = self.shape(a).to_vec();
        let out: Vec<S> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let tracked = self.tracked(a) || self.tracked(b);
        self.push_result(op, shape, out, tracked)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Op::Sigmoid { x }, |v| v.sigmoid())
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Op::Tanh { x }, |v| v.tanh())
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> Result<NodeId> {
        let mut margin = self.leaky_margin;
        let mut signs = core::mem::take(&mut self.leaky_signs);
        for v in self.data(x) {
            margin = margin.min(v.abs().to_f64());
            signs.push(*v >= S::ZERO);
        }
        self.leaky_margin = margin;
        self.leaky_signs = signs;
        let s = S::from_f64(slope);
        self.unary(x, Op::LeakyRelu { x, slope }, move |v| {
            if v >= S::ZERO {
                v
            } else {
                s * v
            }
        })
    }

    /// y = mul * x + add, elementwise with scalar coefficients.
    pub fn affine(&mut self, x: NodeId, mul: f64, add: f64) -> Result<NodeId> {
        let (m, a) = (S::from_f64(mul), S::from_f64(add));
        self.unary(x, Op::Affine { x, mul }, move |v| m * v + a)
    }

    fn unary(&mut self, x: NodeId, op: Op, f: impl Fn(S) -> S) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let out: Vec<S> = self.data(x).iter().map(|&v| f(v)).collect();
        let tracked = self.tracked(x);
        self.push_result(op, shape, out, tracked)
    }

    /// y[i, j] = x[i, j] + bias[i] for x of shape [r x c].
    pub fn add_bias_cols(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let sx = self.shape(x);
        if sx.len() != 2 || self.shape(bias) != [sx[0]] {
            return Err(CsiError::Dimension(format!(
                "add_bias_cols expects [r x c] and [r], got {:?} and {:?}",
                sx,
                self.shape(bias)
            )));
        }
        let (r, c) = (sx[0], sx[1]);
        let xd = self.data(x);
        let bd = self.data(bias);
        let mut out = vec![S::ZERO; r * c];
        for i in 0..r {
            let bi = bd[i];
            for (o, &v) in out[i * c..(i + 1) * c].iter_mut().zip(&xd[i * c..(i + 1) * c]) {
                *o = v + bi;
            }
        }
        let tracked = self.tracked(x) || self.tracked(bias);
        self.push_result(Op::AddBiasCols { x, bias }, vec![r, c], out, tracked)
    }

    /// Reduce all entries to a single scalar node of shape [1].
    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let total: S = self.data(x).iter().copied().sum();
        let tracked = self.tracked(x);
        self.push_result(Op::SumAll { x }, vec![1], vec![total], tracked)
    }

    /// Same data, new extents.
    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.data(x).len() {
            return Err(CsiError::Dimension(format!(
                "reshape of {:?} to {shape:?} changes element count",
                self.shape(x)
            )));
        }
        let out = self.data(x).to_vec();
        let tracked = self.tracked(x);
        self.push_result(Op::Reshape { x }, shape, out, tracked)
    }

    /// [B, C, H, W] -> [C*H*W x B]: one flattened sample per column.
    pub fn flatten_samples(&mut self, x: NodeId) -> Result<NodeId> {
        let sx = self.shape(x);
        if sx.len() != 4 {
            return Err(CsiError::Dimension(format!(
                "flatten_samples expects rank 4, got {sx:?}"
            )));
        }
        let (bs, f) = (sx[0], sx[1] * sx[2] * sx[3]);
        let xd = self.data(x);
        let mut out = vec![S::ZERO; bs * f];
        for b in 0..bs {
            for (i, &v) in xd[b * f..(b + 1) * f].iter().enumerate() {
                out[i * bs + b] = v;
            }
        }
        let tracked = self.tracked(x);
        self.push_result(Op::FlattenSamples { x }, vec![f, bs], out, tracked)
    }

    /// [N x B] -> [B, C, H, W] with N = C*H*W; inverse of `flatten_samples`.
    pub fn unflatten_samples(&mut self, x: NodeId, c: usize, h: usize, w: usize) -> Result<NodeId> {
        let sx = self.shape(x);
        let f = c * h * w;
        if sx.len() != 2 || sx[0] != f {
            return Err(CsiError::Dimension(format!(
                "unflatten_samples expects [{f} x B], got {sx:?}"
            )));
        }
        let bs = sx[1];
        let xd = self.data(x);
        let mut out = vec![S::ZERO; bs * f];
        for b in 0..bs {
            for i in 0..f {
                out[b * f + i] = xd[i * bs + b];
            }
        }
        let tracked = self.tracked(x);
        self.push_result(Op::UnflattenSamples { x }, vec![bs, c, h, w], out, tracked)
    }

    /// Per-channel normalization of [B, C, H, W] by fixed statistics with a
    /// trainable scale and shift:
    /// `y = scale[c] * (x - mean[c]) / sqrt(var[c] + eps) + shift[c]`.
    ///
    /// `mean` and `var` act as constants in the differentiated function;
    /// when they are parameter leaves, the observed batch statistics are
    /// recorded for the trainer's running-statistics update.
    pub fn channel_norm(
        &mut self,
        x: NodeId,
        scale: NodeId,
        shift: NodeId,
        mean: NodeId,
        var: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(CsiError::Dimension(format!(
                "channel_norm expects rank 4, got {sx:?}"
            )));
        }
        let (bs, ch, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        for (name, id) in [("scale", scale), ("shift", shift), ("mean", mean), ("var", var)] {
            if self.shape(id) != [ch] {
                return Err(CsiError::Dimension(format!(
                    "channel_norm {name} must be [{ch}], got {:?}",
                    self.shape(id)
                )));
            }
        }
        let plane = h * w;
        let xd = self.data(x);
        let eps_s = S::from_f64(eps);
        let inv_std: Vec<S> = self
            .data(var)
            .iter()
            .map(|&v| S::ONE / (v + eps_s).sqrt())
            .collect();
        let mean_d = self.data(mean).to_vec();
        let scale_d = self.data(scale).to_vec();
        let shift_d = self.data(shift).to_vec();

        let mut out = vec![S::ZERO; xd.len()];
        let mut batch_mean = vec![S::ZERO; ch];
        let mut batch_sq = vec![S::ZERO; ch];
        for b in 0..bs {
            for c in 0..ch {
                let base = (b * ch + c) * plane;
                let g = scale_d[c] * inv_std[c];
                let off = shift_d[c] - mean_d[c] * g;
                let mut sum = S::ZERO;
                let mut sq = S::ZERO;
                for (o, &v) in out[base..base + plane].iter_mut().zip(&xd[base..base + plane]) {
                    *o = g * v + off;
                    sum += v;
                    sq += v * v;
                }
                batch_mean[c] += sum;
                batch_sq[c] += sq;
            }
        }
        let count = S::from_f64((bs * plane) as f64);
        for c in 0..ch {
            batch_mean[c] = batch_mean[c] / count;
            batch_sq[c] = batch_sq[c] / count - batch_mean[c] * batch_mean[c];
        }
        if let (Value::Param(mp), Value::Param(vp)) =
            (&self.nodes[mean.0].value, &self.nodes[var.0].value)
        {
            self.norm_observations.push(NormObservation {
                mean_param: *mp,
                var_param: *vp,
                batch_mean,
                batch_var: batch_sq,
            });
        }
        let tracked = self.tracked(x) || self.tracked(scale) || self.tracked(shift);
        self.push_result(
            Op::ChannelNorm { x, scale, shift, mean, var, eps },
            sx,
            out,
            tracked,
        )
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss node. Returns the gradient bundle for
    /// all trainable parameter leaves reachable from the loss. A graph can
    /// be consumed exactly once.
    pub fn backward(&mut self, loss: NodeId) -> Result<Vec<(ParamId, Vec<S>)>> {
        if self.consumed {
            return Err(CsiError::State(
                "backward already run on this graph".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(CsiError::Contract(format!(
                "loss must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        if !self.nodes[loss.0].tracked {
            return Ok(Vec::new());
        }
        self.nodes[loss.0].grad = Some(vec![S::ONE]);

        for i in (0..self.nodes.len()).rev() {
            if self.nodes[i].grad.is_none() || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let grad = self.nodes[i].grad.take().expect("checked above");
            let op = self.nodes[i].op.clone();
            self.propagate(i, &op, &grad)?;
        }

        let mut bundle = Vec::new();
        for node in &mut self.nodes {
            if let (Value::Param(pid), Some(g)) = (&node.value, node.grad.take()) {
                bundle.push((*pid, g));
            }
        }
        Ok(bundle)
    }

    fn grad_buf(&mut self, id: NodeId) -> &mut [S] {
        let numel = self.value(id).numel();
        self.nodes[id.0]
            .grad
            .get_or_insert_with(|| vec![S::ZERO; numel])
    }

    fn propagate(&mut self, out: usize, op: &Op, grad: &[S]) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let sa = self.shape(a);
                let (r, k) = (sa[0], sa[1]);
                let c = self.shape(b)[1];
                if self.tracked(a) {
                    let mut da = vec![S::ZERO; r * k];
                    kernels::matmul_grad_lhs(grad, self.data(b), &mut da, r, k, c);
                    self.accumulate(a, &da);
                }
                if self.tracked(b) {
                    let mut db = vec![S::ZERO; k * c];
                    kernels::matmul_grad_rhs(self.data(a), grad, &mut db, r, k, c);
                    self.accumulate(b, &db);
                }
            }
            Op::Conv3x3 { x, k, bias } => {
                let sx = self.shape(x).to_vec();
                let (bs, cin, h, w) = match sx.len() {
                    3 => (1, sx[0], sx[1], sx[2]),
                    _ => (sx[0], sx[1], sx[2], sx[3]),
                };
                let cout = self.shape(k)[0];
                if self.tracked(x) {
                    let mut dx = vec![S::ZERO; bs * cin * h * w];
                    kernels::conv3x3_grad_input(grad, self.data(k), &mut dx, bs, cin, cout, h, w);
                    self.accumulate(x, &dx);
                }
                if self.tracked(k) {
                    let mut dk = vec![S::ZERO; cout * cin * 9];
                    kernels::conv3x3_grad_kernels(grad, self.data(x), &mut dk, bs, cin, cout, h, w);
                    self.accumulate(k, &dk);
                }
                if self.tracked(bias) {
                    let mut db = vec![S::ZERO; cout];
                    let plane = h * w;
                    for b in 0..bs {
                        for o in 0..cout {
                            let base = (b * cout + o) * plane;
                            db[o] += grad[base..base + plane].iter().copied().sum();
                        }
                    }
                    self.accumulate(bias, &db);
                }
            }
            Op::Add { a, b } => {
                if self.tracked(a) {
                    self.accumulate(a, grad);
                }
                if self.tracked(b) {
                    self.accumulate(b, grad);
                }
            }
            Op::Sub { a, b } => {
                if self.tracked(a) {
                    self.accumulate(a, grad);
                }
                if self.tracked(b) {
                    let neg: Vec<S> = grad.iter().map(|&g| -g).collect();
                    self.accumulate(b, &neg);
                }
            }
            Op::Hadamard { a, b } => {
                if self.tracked(a) {
                    let da: Vec<S> = grad.iter().zip(self.data(b)).map(|(&g, &v)| g * v).collect();
                    self.accumulate(a, &da);
                }
                if self.tracked(b) {
                    let db: Vec<S> = grad.iter().zip(self.data(a)).map(|(&g, &v)| g * v).collect();
                    self.accumulate(b, &db);
                }
            }
            Op::Sigmoid { x } => {
                if self.tracked(x) {
                    let out = self.nodes[out].value_data();
                    let dx: Vec<S> = grad
                        .iter()
                        .zip(out)
                        .map(|(&g, &s)| g * s * (S::ONE - s))
                        .collect();
                    self.accumulate(x, &dx);
                }
            }
            Op::Tanh { x } => {
                if self.tracked(x) {
                    let out = self.nodes[out].value_data();
                    let dx: Vec<S> = grad
                        .iter()
                        .zip(out)
                        .map(|(&g, &t)| g * (S::ONE - t * t))
                        .collect();
                    self.accumulate(x, &dx);
                }
            }
            Op::LeakyRelu { x, slope } => {
                if self.tracked(x) {
                    let s = S::from_f64(slope);
                    let dx: Vec<S> = grad
                        .iter()
                        .zip(self.data(x))
                        .map(|(&g, &v)| if v >= S::ZERO { g } else { g * s })
                        .collect();
                    self.accumulate(x, &dx);
                }
            }
            Op::Affine { x, mul } => {
                if self.tracked(x) {
                    let m = S::from_f64(mul);
                    let dx: Vec<S> = grad.iter().map(|&g| g * m).collect();
                    self.accumulate(x, &dx);
                }
            }
            Op::AddBiasCols { x, bias } => {
                if self.tracked(x) {
                    self.accumulate(x, grad);
                }
                if self.tracked(bias) {
                    let r = self.shape(bias)[0];
                    let c = grad.len() / r;
                    let db: Vec<S> = (0..r)
                        .map(|i| grad[i * c..(i + 1) * c].iter().copied().sum())
                        .collect();
                    self.accumulate(bias, &db);
                }
            }
            Op::SumAll { x } => {
                if self.tracked(x) {
                    let g = grad[0];
                    let dx = vec![g; self.value(x).numel()];
                    self.accumulate(x, &dx);
                }
            }
            Op::Reshape { x } => {
                if self.tracked(x) {
                    self.accumulate(x, grad);
                }
            }
            Op::FlattenSamples { x } => {
                if self.tracked(x) {
                    let sx = self.shape(x);
                    let (bs, f) = (sx[0], sx[1] * sx[2] * sx[3]);
                    let mut dx = vec![S::ZERO; bs * f];
                    for b in 0..bs {
                        for i in 0..f {
                            dx[b * f + i] = grad[i * bs + b];
                        }
                    }
                    self.accumulate(x, &dx);
                }
            }
            Op::UnflattenSamples { x } => {
                if self.tracked(x) {
                    let sx = self.shape(x);
                    let (f, bs) = (sx[0], sx[1]);
                    let mut dx = vec![S::ZERO; f * bs];
                    for b in 0..bs {
                        for i in 0..f {
                            dx[i * bs + b] = grad[b * f + i];
                        }
                    }
                    self.accumulate(x, &dx);
                }
            }
            Op::ChannelNorm { x, scale, shift, mean, var, eps } => {
                let sx = self.shape(x).to_vec();
                let (bs, ch, plane) = (sx[0], sx[1], sx[2] * sx[3]);
                let eps_s = S::from_f64(eps);
                let inv_std: Vec<S> = self
                    .data(var)
                    .iter()
                    .map(|&v| S::ONE / (v + eps_s).sqrt())
                    .collect();
                let mean_d = self.data(mean).to_vec();
                let scale_d = self.data(scale).to_vec();
                if self.tracked(x) {
                    let mut dx = vec![S::ZERO; grad.len()];
                    for b in 0..bs {
                        for c in 0..ch {
                            let base = (b * ch + c) * plane;
                            let g = scale_d[c] * inv_std[c];
                            for (d, &gr) in dx[base..base + plane].iter_mut().zip(&grad[base..base + plane]) {
                                *d = gr * g;
                            }
                        }
                    }
                    self.accumulate(x, &dx);
                }
                if self.tracked(scale) {
                    let xd = self.data(x);
                    let mut ds = vec![S::ZERO; ch];
                    for b in 0..bs {
                        for c in 0..ch {
                            let base = (b * ch + c) * plane;
                            let mut acc = S::ZERO;
                            for (&gr, &v) in grad[base..base + plane].iter().zip(&xd[base..base + plane]) {
                                acc += gr * ((v - mean_d[c]) * inv_std[c]);
                            }
                            ds[c] += acc;
                        }
                    }
                    self.accumulate(scale, &ds);
                }
                if self.tracked(shift) {
                    let mut dsh = vec![S::ZERO; ch];
                    for b in 0..bs {
                        for c in 0..ch {
                            let base = (b * ch + c) * plane;
                            dsh[c] += grad[base..base + plane].iter().copied().sum();
                        }
                    }
                    self.accumulate(shift, &dsh);
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, delta: &[S]) {
        let buf = self.grad_buf(id);
        for (g, &d) in buf.iter_mut().zip(delta) {
            *g += d;
        }
    }
}

impl<S: Scalar> Node<S> {
    fn value_data(&self) -> &[S] {
        match &self.value {
            Value::Owned(t) => t.data(),
            Value::Param(_) => unreachable!("non-leaf nodes own their values"),
        }
    }
}

/// Dense kernels shared by forward and backward. Inner loops run over
/// contiguous slices so they vectorize.
mod kernels {
    use crate::scalar::Scalar;
    use alloc::vec;

    pub fn matmul<S: Scalar>(a: &[S], b: &[S], out: &mut [S], r: usize, k: usize, c: usize) {
        for i in 0..r {
            let arow = &a[i * k..(i + 1) * k];
            let orow = &mut out[i * c..(i + 1) * c];
            for (p, &av) in arow.iter().enumerate() {
                let brow = &b[p * c..(p + 1) * c];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }

    /// dA += G . B^T for C = A.B; G is [r x c], B is [k x c].
    pub fn matmul_grad_lhs<S: Scalar>(g: &[S], b: &[S], da: &mut [S], r: usize, k: usize, c: usize) {
        // Transpose B once so the inner loop is contiguous.
        let mut bt = vec![S::ZERO; c * k];
        for p in 0..k {
            for j in 0..c {
                bt[j * k + p] = b[p * c + j];
            }
        }
        for i in 0..r {
            let grow = &g[i * c..(i + 1) * c];
            let darow = &mut da[i * k..(i + 1) * k];
            for (j, &gv) in grow.iter().enumerate() {
                let btrow = &bt[j * k..(j + 1) * k];
                for (d, &bv) in darow.iter_mut().zip(btrow) {
                    *d += gv * bv;
                }
            }
        }
    }

    /// dB += A^T . G for C = A.B; A is [r x k], G is [r x c].
    pub fn matmul_grad_rhs<S: Scalar>(a: &[S], g: &[S], db: &mut [S], r: usize, k: usize, c: usize) {
        for i in 0..r {
            let arow = &a[i * k..(i + 1) * k];
            let grow = &g[i * c..(i + 1) * c];
            for (p, &av) in arow.iter().enumerate() {
                let dbrow = &mut db[p * c..(p + 1) * c];
                for (d, &gv) in dbrow.iter_mut().zip(grow) {
                    *d += av * gv;
                }
            }
        }
    }

    /// Rows of the output that a 3x3 tap (dy, dx) reaches, and the matching
    /// column windows: out[y, x0..x1] overlaps in[y+dy-1, x0+dx-1..x1+dx-1].
    #[inline]
    fn col_window(d: usize, w: usize) -> (usize, usize) {
        match d {
            0 => (1, w),
            1 => (0, w),
            _ => (0, w - 1),
        }
    }

    pub fn conv3x3<S: Scalar>(
        x: &[S],
        k: &[S],
        bias: &[S],
        out: &mut [S],
        bs: usize,
        cin: usize,
        cout: usize,
        h: usize,
        w: usize,
    ) {
        let plane = h * w;
        for b in 0..bs {
            for o in 0..cout {
                let oplane = &mut out[(b * cout + o) * plane..(b * cout + o + 1) * plane];
                oplane.fill(bias[o]);
                for ci in 0..cin {
                    let xplane = &x[(b * cin + ci) * plane..(b * cin + ci + 1) * plane];
                    let taps = &k[(o * cin + ci) * 9..(o * cin + ci) * 9 + 9];
                    for dy in 0..3usize {
                        for dx in 0..3usize {
                            let wgt = taps[dy * 3 + dx];
                            let (x0, x1) = col_window(dx, w);
                            if x1 <= x0 {
                                continue;
                            }
                            for y in 0..h {
                                let sy = y + dy;
                                if sy < 1 || sy > h {
                                    continue;
                                }
                                let sy = sy - 1;
                                let src = &xplane[sy * w + x0 + dx - 1..sy * w + x1 + dx - 1];
                                let dst = &mut oplane[y * w + x0..y * w + x1];
                                for (d, &s) in dst.iter_mut().zip(src) {
                                    *d += wgt * s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// dX for the 3x3 convolution: scatter G back through each tap.
    pub fn conv3x3_grad_input<S: Scalar>(
        g: &[S],
        k: &[S],
        dx_out: &mut [S],
        bs: usize,
        cin: usize,
        cout: usize,
        h: usize,
        w: usize,
    ) {
        let plane = h * w;
        for b in 0..bs {
            for ci in 0..cin {
                let dplane = &mut dx_out[(b * cin + ci) * plane..(b * cin + ci + 1) * plane];
                for o in 0..cout {
                    let gplane = &g[(b * cout + o) * plane..(b * cout + o + 1) * plane];
                    let taps = &k[(o * cin + ci) * 9..(o * cin + ci) * 9 + 9];
                    for dy in 0..3usize {
                        for dxp in 0..3usize {
                            let wgt = taps[dy * 3 + dxp];
                            let (x0, x1) = col_window(dxp, w);
                            if x1 <= x0 {
                                continue;
                            }
                            for y in 0..h {
                                let sy = y + dy;
                                if sy < 1 || sy > h {
                                    continue;
                                }
                                let sy = sy - 1;
                                let src = &gplane[y * w + x0..y * w + x1];
                                let dst = &mut dplane[sy * w + x0 + dxp - 1..sy * w + x1 + dxp - 1];
                                for (d, &s) in dst.iter_mut().zip(src) {
                                    *d += wgt * s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// dK for the 3x3 convolution: per-tap dot products of G and X windows.
    pub fn conv3x3_grad_kernels<S: Scalar>(
        g: &[S],
        x: &[S],
        dk: &mut [S],
        bs: usize,
        cin: usize,
        cout: usize,
        h: usize,
        w: usize,
    ) {
        let plane = h * w;
        for b in 0..bs {
            for o in 0..cout {
                let gplane = &g[(b * cout + o) * plane..(b * cout + o + 1) * plane];
                for ci in 0..cin {
                    let xplane = &x[(b * cin + ci) * plane..(b * cin + ci + 1) * plane];
                    let taps = &mut dk[(o * cin + ci) * 9..(o * cin + ci) * 9 + 9];
                    for dy in 0..3usize {
                        for dxp in 0..3usize {
                            let (x0, x1) = col_window(dxp, w);
                            if x1 <= x0 {
                                continue;
                            }
                            let mut acc = S::ZERO;
                            for y in 0..h {
                                let sy = y + dy;
                                if sy < 1 || sy > h {
                                    continue;
                                }
                                let sy = sy - 1;
                                let grow = &gplane[y * w + x0..y * w + x1];
                                let xrow = &xplane[sy * w + x0 + dxp - 1..sy * w + x1 + dxp - 1];
                                let mut dot = S::ZERO;
                                for (&gv, &xv) in grow.iter().zip(xrow) {
                                    dot += gv * xv;
                                }
                                acc += dot;
                            }
                            taps[dy * 3 + dxp] += acc;
                        }
                    }
                }
            }
        }
    }
}
