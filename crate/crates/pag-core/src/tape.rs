//! Recorded-tape reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and enough
//! metadata to run the chain rule backwards. Nodes are created in topological
//! order by construction, so `backward` is a single reverse sweep. A tape is
//! single-writer: one forward pass, one backward pass, no sharing across
//! concurrent passes. Random numbers never enter this module; stochastic
//! inputs (Gumbel noise) arrive as pre-drawn constant tensors.

use crate::conv::{
    conv2d_backward, conv2d_forward, conv2d_perforated_backward, conv2d_perforated_forward,
    ConvSpec,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Fixed normalization moments for the frozen batch-norm form.
#[derive(Clone, Debug)]
pub struct NormMoments {
    pub mean: Tensor,
    pub var: Tensor,
    pub eps: f64,
}

impl NormMoments {
    /// Identity moments: mean 0, variance 1.
    pub fn identity(channels: usize) -> Self {
        NormMoments {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::full(&[channels], 1.0).expect("finite"),
            eps: 1e-5,
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    /// x (C,H,W) * mask (H,W) broadcast over channels.
    MulSpatial { x: NodeId, mask: NodeId },
    /// x (C,H,W) + bias (C) broadcast over space.
    AddBias { x: NodeId, bias: NodeId },
    Relu { x: NodeId },
    FrozenNorm { x: NodeId, scale: NodeId, shift: NodeId, moments: NormMoments },
    Conv2d { input: NodeId, kernel: NodeId, spec: ConvSpec },
    Conv2dPerforated { input: NodeId, kernel: NodeId, mask: NodeId, spec: ConvSpec },
    /// Forward: exact one-hot argmax of (logits + gumbels).
    /// Backward: Jacobian of softmax((logits + gumbels) / tau).
    StGate { logits: NodeId, gumbels: Tensor, tau: f64 },
    /// Extract channel `c` of a (K,H,W) tensor as (H,W).
    Channel { x: NodeId, c: usize },
    /// Per-pixel softmax across the channel dimension.
    SoftmaxChannels { x: NodeId },
    SumAll { x: NodeId },
    MeanAll { x: NodeId },
    Scale { x: NodeId, factor: f64 },
    /// x (any shape) * s (single element).
    ScalarBroadcastMul { x: NodeId, s: NodeId },
    /// (C,H,W) -> (C,1,1) spatial mean.
    GlobalAvgPool { x: NodeId },
    /// 2x2 average pooling with stride 2.
    AvgPool2 { x: NodeId },
    /// 2x nearest-neighbor upsampling.
    Upsample2 { x: NodeId },
    ConcatChannels { parts: Vec<NodeId> },
    /// rho*log(rho/g) + (1-rho)*log((1-rho)/(1-g)) with g clamped.
    SparsityKl { g: NodeId, rho: f64 },
    SemanticLoss { logits: NodeId, labels: Tensor },
    /// One branch of the class-balanced logistic boundary loss.
    BoundaryLoss { logits: NodeId, target: Tensor, beta_pos: f64, beta_neg: f64 },
    DepthLoss { pred: NodeId, target: Tensor, gamma: f64 },
    /// Includes the internal unit normalization of predictions.
    NormalLoss { pred: NodeId, target: Tensor, weight: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Density clamp used by the sparsity KL term.
pub const KL_DENSITY_CLAMP: f64 = 1e-6;
/// Wider clamp anchoring the KL slope in backward passes.
pub const KL_SLOPE_CLAMP: f64 = 0.01;
/// Dot-product clamp applied before arccos in the normal loss.
pub const NORMAL_DOT_CLAMP: f64 = 1e-7;
/// Ignore label skipped by the semantic loss.
pub const IGNORE_LABEL: f64 = 255.0;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    /// Gradient of the last backward pass, if any reached this node.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push_unchecked(value, Op::Leaf)
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, context: &str) -> Result<NodeId> {
        value.check_finite(context)?;
        Ok(self.push_unchecked(value, op))
    }

    fn same_dims(&self, a: NodeId, b: NodeId, context: &str) -> Result<()> {
        if self.value(a).dims() != self.value(b).dims() {
            return Err(Error::DimMismatch(format!(
                "{context}: {:?} vs {:?}",
                self.value(a).dims(),
                self.value(b).dims()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_dims(a, b, "add")?;
        let value = Tensor::new(
            self.value(a).dims().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x + y)
                .collect(),
        )?;
        self.push(value, Op::Add { a, b }, "add")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_dims(a, b, "mul")?;
        let value = Tensor::new(
            self.value(a).dims().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x * y)
                .collect(),
        )?;
        self.push(value, Op::Mul { a, b }, "mul")
    }

    /// Multiply a (C,H,W) tensor by an (H,W) map, broadcast over channels.
    pub fn mul_spatial(&mut self, x: NodeId, mask: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let mv = self.value(mask);
        if xv.rank() != 3 || mv.rank() != 2 || xv.dims()[1..] != *mv.dims() {
            return Err(Error::DimMismatch(format!(
                "mul_spatial: {:?} vs map {:?}",
                xv.dims(),
                mv.dims()
            )));
        }
        let (c, h, w) = (xv.dims()[0], xv.dims()[1], xv.dims()[2]);
        let mut value = Tensor::zeros(xv.dims());
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    value.set3(ci, y, xx, xv.get3(ci, y, xx) * mv.get2(y, xx));
                }
            }
        }
        self.push(value, Op::MulSpatial { x, mask }, "mul_spatial")
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let bv = self.value(bias);
        if xv.rank() != 3 || bv.dims() != [xv.dims()[0]] {
            return Err(Error::DimMismatch(format!(
                "add_bias: {:?} with bias {:?}",
                xv.dims(),
                bv.dims()
            )));
        }
        let (c, h, w) = (xv.dims()[0], xv.dims()[1], xv.dims()[2]);
        let mut value = Tensor::zeros(xv.dims());
        for ci in 0..c {
            let b = bv.data()[ci];
            for y in 0..h {
                for xx in 0..w {
                    value.set3(ci, y, xx, xv.get3(ci, y, xx) + b);
                }
            }
        }
        self.push(value, Op::AddBias { x, bias }, "add_bias")
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let value = Tensor::new(
            self.value(x).dims().to_vec(),
            self.value(x).data().iter().map(|&v| v.max(0.0)).collect(),
        )?;
        self.push(value, Op::Relu { x }, "relu")
    }

    /// Frozen-moment normalization: per channel, scale*(x-mean)/sqrt(var+eps)+shift.
    /// Moments are constants; scale and shift are differentiable nodes.
    pub fn frozen_norm(
        &mut self,
        x: NodeId,
        scale: NodeId,
        shift: NodeId,
        moments: &NormMoments,
    ) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() != 3 {
            return Err(Error::DimMismatch(format!(
                "frozen_norm input must be CxHxW, got {:?}",
                xv.dims()
            )));
        }
        let c = xv.dims()[0];
        if self.value(scale).dims() != [c]
            || self.value(shift).dims() != [c]
            || moments.mean.dims() != [c]
            || moments.var.dims() != [c]
        {
            return Err(Error::DimMismatch(format!(
                "frozen_norm parameters must all be [{c}]"
            )));
        }
        let (h, w) = (xv.dims()[1], xv.dims()[2]);
        let mut value = Tensor::zeros(xv.dims());
        for ci in 0..c {
            let inv = 1.0 / (moments.var.data()[ci] + moments.eps).sqrt();
            let m = moments.mean.data()[ci];
            let s = self.value(scale).data()[ci];
            let b = self.value(shift).data()[ci];
            for y in 0..h {
                for xx in 0..w {
                    let v = self.value(x).get3(ci, y, xx);
                    value.set3(ci, y, xx, s * (v - m) * inv + b);
                }
            }
        }
        self.push(
            value,
            Op::FrozenNorm { x, scale, shift, moments: moments.clone() },
            "frozen_norm",
        )
    }

    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, spec: &ConvSpec) -> Result<NodeId> {
        let value = conv2d_forward(self.value(input), self.value(kernel), spec)?;
        self.push(
            value,
            Op::Conv2d { input, kernel, spec: spec.clone() },
            "conv2d",
        )
    }

    pub fn conv2d_perforated(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        mask: NodeId,
        spec: &ConvSpec,
    ) -> Result<NodeId> {
        let value = conv2d_perforated_forward(
            self.value(input),
            self.value(kernel),
            spec,
            self.value(mask),
        )?;
        self.push(
            value,
            Op::Conv2dPerforated { input, kernel, mask, spec: spec.clone() },
            "conv2d_perforated",
        )
    }

    /// Discrete gate with the straight-through estimator.
    ///
    /// The forward value is the exact per-pixel one-hot argmax of
    /// (logits + gumbels); ties resolve to the lowest index. The recorded
    /// backward rule is the Jacobian of the tempered softmax relaxation, so
    /// forward and backward intentionally disagree.
    pub fn straight_through_gate(
        &mut self,
        logits: NodeId,
        gumbels: Tensor,
        tau: f64,
    ) -> Result<NodeId> {
        let lv = self.value(logits);
        if tau <= 0.0 {
            return Err(Error::InvalidArg(format!("gate tau must be positive, got {tau}")));
        }
        if lv.rank() != 3 || lv.dims()[0] < 2 {
            return Err(Error::DimMismatch(format!(
                "gate logits must be KxHxW with K >= 2, got {:?}",
                lv.dims()
            )));
        }
        if gumbels.dims() != lv.dims() {
            return Err(Error::DimMismatch(format!(
                "gumbels {:?} do not match logits {:?}",
                gumbels.dims(),
                lv.dims()
            )));
        }
        gumbels.check_finite("straight_through_gate gumbels")?;
        let (k, h, w) = (lv.dims()[0], lv.dims()[1], lv.dims()[2]);
        let mut value = Tensor::zeros(lv.dims());
        for y in 0..h {
            for x in 0..w {
                let mut best = 0;
                let mut best_v = lv.get3(0, y, x) + gumbels.get3(0, y, x);
                for c in 1..k {
                    let v = lv.get3(c, y, x) + gumbels.get3(c, y, x);
                    if v > best_v {
                        best_v = v;
                        best = c;
                    }
                }
                value.set3(best, y, x, 1.0);
            }
        }
        self.push(value, Op::StGate { logits, gumbels, tau }, "straight_through_gate")
    }

    pub fn channel(&mut self, x: NodeId, c: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() != 3 || c >= xv.dims()[0] {
            return Err(Error::DimMismatch(format!(
                "channel {c} of tensor {:?}",
                xv.dims()
            )));
        }
        let (h, w) = (xv.dims()[1], xv.dims()[2]);
        let mut value = Tensor::zeros(&[h, w]);
        for y in 0..h {
            for xx in 0..w {
                value.set2(y, xx, xv.get3(c, y, xx));
            }
        }
        self.push(value, Op::Channel { x, c }, "channel")
    }

    pub fn softmax_channels(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() != 3 {
            return Err(Error::DimMismatch(format!(
                "softmax_channels input must be KxHxW, got {:?}",
                xv.dims()
            )));
        }
        let (k, h, w) = (xv.dims()[0], xv.dims()[1], xv.dims()[2]);
        let mut value = Tensor::zeros(xv.dims());
        for y in 0..h {
            for xx in 0..w {
                let mut m = f64::NEG_INFINITY;
                for c in 0..k {
                    m = m.max(xv.get3(c, y, xx));
                }
                let mut z = 0.0;
                for c in 0..k {
                    z += (xv.get3(c, y, xx) - m).exp();
                }
                for c in 0..k {
                    value.set3(c, y, xx, (xv.get3(c, y, xx) - m).exp() / z);
                }
            }
        }
        self.push(value, Op::SoftmaxChannels { x }, "softmax_channels")
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let value = Tensor::scalar(self.value(x).sum())?;
        self.push(value, Op::SumAll { x }, "sum_all")
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let value = Tensor::scalar(self.value(x).mean())?;
        self.push(value, Op::MeanAll { x }, "mean_all")
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        if !factor.is_finite() {
            return Err(Error::NonFinite(format!("scale factor {factor}")));
        }
        let value = Tensor::new(
            self.value(x).dims().to_vec(),
            self.value(x).data().iter().map(|v| v * factor).collect(),
        )?;
        self.push(value, Op::Scale { x, factor }, "scale")
    }

    pub fn scalar_broadcast_mul(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.value(s).len() != 1 {
            return Err(Error::DimMismatch(format!(
                "scalar_broadcast_mul: scalar operand has {} elements",
                self.value(s).len()
            )));
        }
        let sv = self.value(s).data()[0];
        let value = Tensor::new(
            self.value(x).dims().to_vec(),
            self.value(x).data().iter().map(|v| v * sv).collect(),
        )?;
        self.push(value, Op::ScalarBroadcastMul { x, s }, "scalar_broadcast_mul")
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() != 3 {
            return Err(Error::DimMismatch(format!(
                "global_avg_pool input must be CxHxW, got {:?}",
                xv.dims()
            )));
        }
        let (c, h, w) = (xv.dims()[0], xv.dims()[1], xv.dims()[2]);
        let mut value = Tensor::zeros(&[c, 1, 1]);
        for ci in 0..c {
            let mut acc = 0.0;
            for y in 0..h {
                for xx in 0..w {
                    acc += xv.get3(ci, y, xx);
                }
            }
            value.set3(ci, 0, 0, acc / (h * w) as f64);
        }
        self.push(value, Op::GlobalAvgPool { x }, "global_avg_pool")
    }

    pub fn avg_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() != 3 || xv.dims()[1] % 2 != 0 || xv.dims()[2] % 2 != 0 {
            return Err(Error::DimMismatch(format!(
                "avg_pool2 needs CxHxW with even H and W, got {:?}",
                xv.dims()
            )));
        }
        let (c, h, w) = (xv.dims()[0], xv.dims()[1] / 2, xv.dims()[2] / 2);
        let mut value = Tensor::zeros(&[c, h, w]);
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let s = xv.get3(ci, 2 * y, 2 * xx)
                        + xv.get3(ci, 2 * y, 2 * xx + 1)
                        + xv.get3(ci, 2 * y + 1, 2 * xx)
                        + xv.get3(ci, 2 * y + 1, 2 * xx + 1);
                    value.set3(ci, y, xx, s / 4.0);
                }
            }
        }
        self.push(value, Op::AvgPool2 { x }, "avg_pool2")
    }

    pub fn upsample2(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() != 3 {
            return Err(Error::DimMismatch(format!(
                "upsample2 input must be CxHxW, got {:?}",
                xv.dims()
            )));
        }
        let (c, h, w) = (xv.dims()[0], xv.dims()[1], xv.dims()[2]);
        let mut value = Tensor::zeros(&[c, 2 * h, 2 * w]);
        for ci in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    value.set3(ci, y, xx, xv.get3(ci, y / 2, xx / 2));
                }
            }
        }
        self.push(value, Op::Upsample2 { x }, "upsample2")
    }

    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidArg("concat_channels of zero parts".into()));
        }
        let (h, w) = {
            let first = self.value(parts[0]);
            if first.rank() != 3 {
                return Err(Error::DimMismatch("concat_channels parts must be CxHxW".into()));
            }
            (first.dims()[1], first.dims()[2])
        };
        let mut total_c = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rank() != 3 || pv.dims()[1] != h || pv.dims()[2] != w {
                return Err(Error::DimMismatch(format!(
                    "concat_channels part {:?} does not match {h}x{w}",
                    pv.dims()
                )));
            }
            total_c += pv.dims()[0];
        }
        let mut data = Vec::with_capacity(total_c * h * w);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![total_c, h, w], data)?;
        self.push(value, Op::ConcatChannels { parts: parts.to_vec() }, "concat_channels")
    }

    /// Bernoulli KL divergence between the target density rho and the
    /// measured density g (a scalar node), with g clamped away from {0, 1}.
    pub fn sparsity_kl(&mut self, g: NodeId, rho: f64) -> Result<NodeId> {
        if !(0.0..=1.0).contains(&rho) || rho == 0.0 || rho == 1.0 {
            return Err(Error::InvalidArg(format!("rho must lie in (0,1), got {rho}")));
        }
        let gv = self.value(g).item()?;
        let value = Tensor::scalar(kl_bernoulli(rho, clamp_density(gv)))?;
        self.push(value, Op::SparsityKl { g, rho }, "sparsity_kl")
    }

    /// K-way cross-entropy summed over pixels. Labels are integer class
    /// indices stored as f64; the value 255 marks ignored pixels.
    pub fn semantic_loss(&mut self, logits: NodeId, labels: &Tensor) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.rank() != 3 {
            return Err(Error::DimMismatch(format!(
                "semantic logits must be KxHxW, got {:?}",
                lv.dims()
            )));
        }
        let (k, h, w) = (lv.dims()[0], lv.dims()[1], lv.dims()[2]);
        if labels.dims() != [h, w] {
            return Err(Error::DimMismatch(format!(
                "labels {:?} do not match logits {h}x{w}",
                labels.dims()
            )));
        }
        let mut total = 0.0;
        for y in 0..h {
            for x in 0..w {
                let lab = labels.get2(y, x);
                if lab == IGNORE_LABEL {
                    continue;
                }
                if lab.fract() != 0.0 || lab < 0.0 || lab as usize >= k {
                    return Err(Error::InvalidArg(format!(
                        "label {lab} at ({y}, {x}) outside [0, {k})"
                    )));
                }
                total += log_sum_exp_minus(lv, k, y, x, lab as usize);
            }
        }
        let value = Tensor::scalar(total)?;
        self.push(
            value,
            Op::SemanticLoss { logits, labels: labels.clone() },
            "semantic_loss",
        )
    }

    /// Class-balanced logistic loss for one prediction branch.
    pub fn boundary_loss_branch(
        &mut self,
        logits: NodeId,
        target: &Tensor,
        beta_pos: f64,
        beta_neg: f64,
    ) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.dims() != target.dims() {
            return Err(Error::DimMismatch(format!(
                "boundary logits {:?} vs target {:?}",
                lv.dims(),
                target.dims()
            )));
        }
        if !target.is_binary() {
            return Err(Error::NonBinaryMask("boundary target".into()));
        }
        let mut total = 0.0;
        for (l, t) in lv.data().iter().zip(target.data()) {
            // -log sigmoid(l) = softplus(-l); -log(1 - sigmoid(l)) = softplus(l)
            total += if *t == 1.0 {
                beta_pos * softplus(-l)
            } else {
                beta_neg * softplus(*l)
            };
        }
        let value = Tensor::scalar(total)?;
        self.push(
            value,
            Op::BoundaryLoss { logits, target: target.clone(), beta_pos, beta_neg },
            "boundary_loss",
        )
    }

    /// Mixed quadratic/absolute error on log-depth maps.
    pub fn depth_loss(&mut self, pred: NodeId, target: &Tensor, gamma: f64) -> Result<NodeId> {
        let pv = self.value(pred);
        if pv.dims() != target.dims() {
            return Err(Error::DimMismatch(format!(
                "depth pred {:?} vs target {:?}",
                pv.dims(),
                target.dims()
            )));
        }
        target.check_finite("depth target")?;
        let mut total = 0.0;
        for (p, t) in pv.data().iter().zip(target.data()) {
            let e = p - t;
            total += e * e + gamma * e.abs();
        }
        let value = Tensor::scalar(total)?;
        self.push(
            value,
            Op::DepthLoss { pred, target: target.clone(), gamma },
            "depth_loss",
        )
    }

    /// Cosine plus weighted inverse-cosine distance between predicted and
    /// target normals. Predictions are unit-normalized internally; the dot
    /// product is clamped before arccos where its gradient is singular.
    pub fn normal_loss(&mut self, pred: NodeId, target: &Tensor, weight: f64) -> Result<NodeId> {
        let pv = self.value(pred);
        if pv.rank() != 3 || pv.dims()[0] != 3 || pv.dims() != target.dims() {
            return Err(Error::DimMismatch(format!(
                "normal pred {:?} vs target {:?} (want 3xHxW)",
                pv.dims(),
                target.dims()
            )));
        }
        let (h, w) = (pv.dims()[1], pv.dims()[2]);
        for y in 0..h {
            for x in 0..w {
                let n = (0..3)
                    .map(|c| target.get3(c, y, x).powi(2))
                    .sum::<f64>()
                    .sqrt();
                if (n - 1.0).abs() > 1e-6 {
                    return Err(Error::InvalidArg(format!(
                        "normal target at ({y}, {x}) has length {n}, expected unit"
                    )));
                }
            }
        }
        let mut total = 0.0;
        for y in 0..h {
            for x in 0..w {
                let v = [pv.get3(0, y, x), pv.get3(1, y, x), pv.get3(2, y, x)];
                let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if norm < 1e-15 {
                    return Err(Error::InvalidArg(format!(
                        "zero-length normal prediction at ({y}, {x})"
                    )));
                }
                let dot = (0..3)
                    .map(|c| v[c] / norm * target.get3(c, y, x))
                    .sum::<f64>();
                let clamped = dot.clamp(-1.0 + NORMAL_DOT_CLAMP, 1.0 - NORMAL_DOT_CLAMP);
                total += -dot + weight * clamped.acos();
            }
        }
        let value = Tensor::scalar(total)?;
        self.push(
            value,
            Op::NormalLoss { pred, target: target.clone(), weight },
            "normal_loss",
        )
    }

    /// Reverse sweep from a scalar loss node. Gradients are stored per node
    /// and readable through `grad` afterwards; a second call re-runs cleanly.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss { len: self.value(loss).len() });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0)?);
        for idx in (0..=loss.0).rev() {
            let Some(g_out) = grads[idx].take() else { continue };
            self.backward_op(idx, &g_out, &mut grads)?;
            grads[idx] = Some(g_out);
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_op(&self, idx: usize, g_out: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                accumulate(grads, *a, g_out.clone(), self.value(*a).dims());
                accumulate(grads, *b, g_out.clone(), self.value(*b).dims());
            }
            Op::Mul { a, b } => {
                let da = zip_mul(g_out, self.value(*b));
                let db = zip_mul(g_out, self.value(*a));
                accumulate(grads, *a, da, self.value(*a).dims());
                accumulate(grads, *b, db, self.value(*b).dims());
            }
            Op::MulSpatial { x, mask } => {
                let xv = self.value(*x);
                let mv = self.value(*mask);
                let (c, h, w) = (xv.dims()[0], xv.dims()[1], xv.dims()[2]);
                let mut dx = Tensor::zeros(xv.dims());
                let mut dm = Tensor::zeros(mv.dims());
                for ci in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            let g = g_out.get3(ci, y, xx);
                            let di = dx.idx3(ci, y, xx);
                            dx.data_mut()[di] = g * mv.get2(y, xx);
                            let mi = dm.idx2(y, xx);
                            dm.data_mut()[mi] += g * xv.get3(ci, y, xx);
                        }
                    }
                }
                accumulate(grads, *x, dx, xv.dims());
                accumulate(grads, *mask, dm, mv.dims());
            }
            Op::AddBias { x, bias } => {
                let xv = self.value(*x);
                let (c, h, w) = (xv.dims()[0], xv.dims()[1], xv.dims()[2]);
                let mut db = Tensor::zeros(&[c]);
                for ci in 0..c {
                    let mut acc = 0.0;
                    for y in 0..h {
                        for xx in 0..w {
                            acc += g_out.get3(ci, y, xx);
                        }
                    }
                    db.data_mut()[ci] = acc;
                }
                accumulate(grads, *x, g_out.clone(), xv.dims());
                accumulate(grads, *bias, db, &[c]);
            }
            Op::Relu { x } => {
                let xv = self.value(*x);
                let dx = Tensor::new(
                    xv.dims().to_vec(),
                    xv.data()
                        .iter()
                        .zip(g_out.data())
                        .map(|(v, g)| if *v > 0.0 { *g } else { 0.0 })
                        .collect(),
                )?;
                accumulate(grads, *x, dx, xv.dims());
            }
            Op::FrozenNorm { x, scale, shift, moments } => {
                let xv = self.value(*x);
                let (c, h, w) = (xv.dims()[0], xv.dims()[1], xv.dims()[2]);
                let mut dx = Tensor::zeros(xv.dims());
                let mut ds = Tensor::zeros(&[c]);
                let mut db = Tensor::zeros(&[c]);
                for ci in 0..c {
                    let inv = 1.0 / (moments.var.data()[ci] + moments.eps).sqrt();
                    let m = moments.mean.data()[ci];
                    let s = self.value(*scale).data()[ci];
                    let mut dsc = 0.0;
                    let mut dsh = 0.0;
                    for y in 0..h {
                        for xx in 0..w {
                            let g = g_out.get3(ci, y, xx);
                            let di = dx.idx3(ci, y, xx);
                            dx.data_mut()[di] = g * s * inv;
                            dsc += g * (xv.get3(ci, y, xx) - m) * inv;
                            dsh += g;
                        }
                    }
                    ds.data_mut()[ci] = dsc;
                    db.data_mut()[ci] = dsh;
                }
                accumulate(grads, *x, dx, xv.dims());
                accumulate(grads, *scale, ds, &[c]);
                accumulate(grads, *shift, db, &[c]);
            }
            Op::Conv2d { input, kernel, spec } => {
                let (di, dk) = conv2d_backward(self.value(*input), self.value(*kernel), spec, g_out);
                accumulate(grads, *input, di, self.value(*input).dims());
                accumulate(grads, *kernel, dk, self.value(*kernel).dims());
            }
            Op::Conv2dPerforated { input, kernel, mask, spec } => {
                let (di, dk) = conv2d_perforated_backward(
                    self.value(*input),
                    self.value(*kernel),
                    spec,
                    self.value(*mask),
                    g_out,
                )?;
                accumulate(grads, *input, di, self.value(*input).dims());
                accumulate(grads, *kernel, dk, self.value(*kernel).dims());
                // The mask is non-differentiable through perforation; its
                // gradient arrives only via the gate's straight-through rule.
            }
            Op::StGate { logits, gumbels, tau } => {
                let lv = self.value(*logits);
                let (k, h, w) = (lv.dims()[0], lv.dims()[1], lv.dims()[2]);
                let mut dl = Tensor::zeros(lv.dims());
                let mut soft = vec![0.0; k];
                for y in 0..h {
                    for x in 0..w {
                        let mut m = f64::NEG_INFINITY;
                        for c in 0..k {
                            let v = (lv.get3(c, y, x) + gumbels.get3(c, y, x)) / tau;
                            soft[c] = v;
                            m = m.max(v);
                        }
                        let mut z = 0.0;
                        for s in soft.iter_mut() {
                            *s = (*s - m).exp();
                            z += *s;
                        }
                        for s in soft.iter_mut() {
                            *s /= z;
                        }
                        let mut dot = 0.0;
                        for c in 0..k {
                            dot += g_out.get3(c, y, x) * soft[c];
                        }
                        for c in 0..k {
                            let di = dl.idx3(c, y, x);
                            dl.data_mut()[di] =
                                soft[c] * (g_out.get3(c, y, x) - dot) / tau;
                        }
                    }
                }
                accumulate(grads, *logits, dl, lv.dims());
            }
            Op::Channel { x, c } => {
                let xv = self.value(*x);
                let (h, w) = (xv.dims()[1], xv.dims()[2]);
                let mut dx = Tensor::zeros(xv.dims());
                for y in 0..h {
                    for xx in 0..w {
                        let di = dx.idx3(*c, y, xx);
                        dx.data_mut()[di] = g_out.get2(y, xx);
                    }
                }
                accumulate(grads, *x, dx, xv.dims());
            }
            Op::SoftmaxChannels { x } => {
                let yv = &node.value;
                let (k, h, w) = (yv.dims()[0], yv.dims()[1], yv.dims()[2]);
                let mut dx = Tensor::zeros(yv.dims());
                for y in 0..h {
                    for xx in 0..w {
                        let mut dot = 0.0;
                        for c in 0..k {
                            dot += g_out.get3(c, y, xx) * yv.get3(c, y, xx);
                        }
                        for c in 0..k {
                            let di = dx.idx3(c, y, xx);
                            dx.data_mut()[di] =
                                yv.get3(c, y, xx) * (g_out.get3(c, y, xx) - dot);
                        }
                    }
                }
                accumulate(grads, *x, dx, yv.dims());
            }
            Op::SumAll { x } => {
                let g = g_out.data()[0];
                let dx = Tensor::new(
                    self.value(*x).dims().to_vec(),
                    vec![g; self.value(*x).len()],
                )?;
                accumulate(grads, *x, dx, self.value(*x).dims());
            }
            Op::MeanAll { x } => {
                let n = self.value(*x).len() as f64;
                let g = g_out.data()[0] / n;
                let dx = Tensor::new(
                    self.value(*x).dims().to_vec(),
                    vec![g; self.value(*x).len()],
                )?;
                accumulate(grads, *x, dx, self.value(*x).dims());
            }
            Op::Scale { x, factor } => {
                let dx = Tensor::new(
                    g_out.dims().to_vec(),
                    g_out.data().iter().map(|g| g * factor).collect(),
                )?;
                accumulate(grads, *x, dx, self.value(*x).dims());
            }
            Op::ScalarBroadcastMul { x, s } => {
                let sv = self.value(*s).data()[0];
                let xv = self.value(*x);
                let dx = Tensor::new(
                    g_out.dims().to_vec(),
                    g_out.data().iter().map(|g| g * sv).collect(),
                )?;
                let ds = Tensor::scalar(
                    g_out
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(g, v)| g * v)
                        .sum(),
                )?;
                accumulate(grads, *x, dx, xv.dims());
                accumulate(grads, *s, ds, self.value(*s).dims());
            }
            Op::GlobalAvgPool { x } => {
                let xv = self.value(*x);
                let (c, h, w) = (xv.dims()[0], xv.dims()[1], xv.dims()[2]);
                let scale = 1.0 / (h * w) as f64;
                let mut dx = Tensor::zeros(xv.dims());
                for ci in 0..c {
                    let g = g_out.get3(ci, 0, 0) * scale;
                    for y in 0..h {
                        for xx in 0..w {
                            let di = dx.idx3(ci, y, xx);
                            dx.data_mut()[di] = g;
                        }
                    }
                }
                accumulate(grads, *x, dx, xv.dims());
            }
            Op::AvgPool2 { x } => {
                let xv = self.value(*x);
                let (c, h, w) = (xv.dims()[0], xv.dims()[1], xv.dims()[2]);
                let mut dx = Tensor::zeros(xv.dims());
                for ci in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            let g = g_out.get3(ci, y / 2, xx / 2) / 4.0;
                            let di = dx.idx3(ci, y, xx);
                            dx.data_mut()[di] = g;
                        }
                    }
                }
                accumulate(grads, *x, dx, xv.dims());
            }
            Op::Upsample2 { x } => {
                let xv = self.value(*x);
                let (c, h, w) = (xv.dims()[0], xv.dims()[1], xv.dims()[2]);
                let mut dx = Tensor::zeros(xv.dims());
                for ci in 0..c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            let di = dx.idx3(ci, y / 2, xx / 2);
                            dx.data_mut()[di] += g_out.get3(ci, y, xx);
                        }
                    }
                }
                accumulate(grads, *x, dx, xv.dims());
            }
            Op::ConcatChannels { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let n = pv.len();
                    let dx = Tensor::new(
                        pv.dims().to_vec(),
                        g_out.data()[offset..offset + n].to_vec(),
                    )?;
                    accumulate(grads, p, dx, pv.dims());
                    offset += n;
                }
            }
            Op::SparsityKl { g, rho } => {
                let gv = self.value(*g).item()?;
                // Slope anchored inside [KL_SLOPE_CLAMP, 1 - KL_SLOPE_CLAMP]:
                // saturated layers keep a bounded, nonzero restoring signal
                // instead of stalling at the clamp.
                let anchor = gv.clamp(KL_SLOPE_CLAMP, 1.0 - KL_SLOPE_CLAMP);
                let grad = (-rho / anchor + (1.0 - rho) / (1.0 - anchor)) * g_out.data()[0];
                accumulate(grads, *g, Tensor::scalar(grad)?, &[1]);
            }
            Op::SemanticLoss { logits, labels } => {
                let lv = self.value(*logits);
                let (k, h, w) = (lv.dims()[0], lv.dims()[1], lv.dims()[2]);
                let g = g_out.data()[0];
                let mut dl = Tensor::zeros(lv.dims());
                for y in 0..h {
                    for x in 0..w {
                        let lab = labels.get2(y, x);
                        if lab == IGNORE_LABEL {
                            continue;
                        }
                        let target = lab as usize;
                        let mut m = f64::NEG_INFINITY;
                        for c in 0..k {
                            m = m.max(lv.get3(c, y, x));
                        }
                        let mut z = 0.0;
                        for c in 0..k {
                            z += (lv.get3(c, y, x) - m).exp();
                        }
                        for c in 0..k {
                            let p = (lv.get3(c, y, x) - m).exp() / z;
                            let delta = if c == target { 1.0 } else { 0.0 };
                            let di = dl.idx3(c, y, x);
                            dl.data_mut()[di] = g * (p - delta);
                        }
                    }
                }
                accumulate(grads, *logits, dl, lv.dims());
            }
            Op::BoundaryLoss { logits, target, beta_pos, beta_neg } => {
                let lv = self.value(*logits);
                let g = g_out.data()[0];
                let dl = Tensor::new(
                    lv.dims().to_vec(),
                    lv.data()
                        .iter()
                        .zip(target.data())
                        .map(|(l, t)| {
                            let sig = sigmoid(*l);
                            if *t == 1.0 {
                                g * beta_pos * (sig - 1.0)
                            } else {
                                g * beta_neg * sig
                            }
                        })
                        .collect(),
                )?;
                accumulate(grads, *logits, dl, lv.dims());
            }
            Op::DepthLoss { pred, target, gamma } => {
                let pv = self.value(*pred);
                let g = g_out.data()[0];
                let dp = Tensor::new(
                    pv.dims().to_vec(),
                    pv.data()
                        .iter()
                        .zip(target.data())
                        .map(|(p, t)| {
                            let e = p - t;
                            // The L1 subgradient at zero error is zero.
                            g * (2.0 * e + gamma * sign(e))
                        })
                        .collect(),
                )?;
                accumulate(grads, *pred, dp, pv.dims());
            }
            Op::NormalLoss { pred, target, weight } => {
                let pv = self.value(*pred);
                let (h, w) = (pv.dims()[1], pv.dims()[2]);
                let g = g_out.data()[0];
                let mut dp = Tensor::zeros(pv.dims());
                for y in 0..h {
                    for x in 0..w {
                        let v = [pv.get3(0, y, x), pv.get3(1, y, x), pv.get3(2, y, x)];
                        let t = [
                            target.get3(0, y, x),
                            target.get3(1, y, x),
                            target.get3(2, y, x),
                        ];
                        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                        let u = [v[0] / norm, v[1] / norm, v[2] / norm];
                        let dot = u[0] * t[0] + u[1] * t[1] + u[2] * t[2];
                        let interior =
                            dot > -1.0 + NORMAL_DOT_CLAMP && dot < 1.0 - NORMAL_DOT_CLAMP;
                        // d/du of (-u.t + weight*acos(u.t)); acos slope only inside the clamp.
                        let mut coeff = -1.0;
                        if interior {
                            coeff += weight * (-1.0 / (1.0 - dot * dot).sqrt());
                        }
                        // Project through the unit normalization: (I - u u^T)/|v|.
                        for c in 0..3 {
                            let mut acc = 0.0;
                            for c2 in 0..3 {
                                let jac = (if c == c2 { 1.0 } else { 0.0 }) - u[c2] * u[c];
                                acc += coeff * t[c2] * jac;
                            }
                            let di = dp.idx3(c, y, x);
                            dp.data_mut()[di] = g * acc / norm;
                        }
                    }
                }
                accumulate(grads, *pred, dp, pv.dims());
            }
        }
        Ok(())
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn clamp_density(g: f64) -> f64 {
    g.clamp(KL_DENSITY_CLAMP, 1.0 - KL_DENSITY_CLAMP)
}

/// KL(rho || g) for Bernoulli distributions; g must already be clamped.
pub(crate) fn kl_bernoulli(rho: f64, g: f64) -> f64 {
    rho * (rho / g).ln() + (1.0 - rho) * ((1.0 - rho) / (1.0 - g)).ln()
}

/// -log softmax(logits)[target] at pixel (y, x), computed stably.
fn log_sum_exp_minus(lv: &Tensor, k: usize, y: usize, x: usize, target: usize) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for c in 0..k {
        m = m.max(lv.get3(c, y, x));
    }
    let mut z = 0.0;
    for c in 0..k {
        z += (lv.get3(c, y, x) - m).exp();
    }
    z.ln() + m - lv.get3(target, y, x)
}

fn zip_mul(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = a.clone();
    for (o, v) in out.data_mut().iter_mut().zip(b.data()) {
        *o *= v;
    }
    out
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor, dims: &[usize]) {
    debug_assert_eq!(delta.dims(), dims);
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(dims, |_| rng.gen_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![4], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
        let loss = tape.sum_all(x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn sum_of_squares_gradient_is_two_x() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.5, -0.5, 2.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[3.0, -1.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, Error::NonScalarLoss { len: 2 }));
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = sum(x*x) + sum(x) => grad = 2x + 1
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![2.0, -3.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let s1 = tape.sum_all(sq).unwrap();
        let s2 = tape.sum_all(x).unwrap();
        let loss = tape.add(s1, s2).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[5.0, -5.0]);
    }

    #[test]
    fn non_finite_result_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1], vec![1e308]).unwrap());
        let err = tape.add(x, x).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn st_gate_forward_is_one_hot_with_low_index_ties() {
        let mut tape = Tape::new();
        let logits = tape.leaf(
            Tensor::new(vec![2, 1, 2], vec![0.0, 0.7, 1.0, 0.7]).unwrap(),
        );
        let gate = tape
            .straight_through_gate(logits, Tensor::zeros(&[2, 1, 2]), 0.5)
            .unwrap();
        let v = tape.value(gate);
        // Pixel 0: channel 1 wins (1.0 > 0.0). Pixel 1: exact tie, lowest index wins.
        assert_eq!(v.get3(0, 0, 0), 0.0);
        assert_eq!(v.get3(1, 0, 0), 1.0);
        assert_eq!(v.get3(0, 0, 1), 1.0);
        assert_eq!(v.get3(1, 0, 1), 0.0);
    }

    #[test]
    fn conv_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = rand_tensor(&[2, 4, 4], &mut rng);
        let k0 = rand_tensor(&[2, 2, 3, 3], &mut rng);
        let spec = ConvSpec::new(2, 2, 3, 3, 1);

        let eval = |x: &Tensor| -> f64 {
            let mut tape = Tape::new();
            let xi = tape.leaf(x.clone());
            let ki = tape.leaf(k0.clone());
            let c = tape.conv2d(xi, ki, &spec).unwrap();
            let l = tape.sum_all(c).unwrap();
            tape.value(l).data()[0]
        };

        let mut tape = Tape::new();
        let xi = tape.leaf(x0.clone());
        let ki = tape.leaf(k0.clone());
        let c = tape.conv2d(xi, ki, &spec).unwrap();
        let l = tape.sum_all(c).unwrap();
        tape.backward(l).unwrap();
        let analytic = tape.grad(xi).unwrap().clone();

        let eps = 1e-5;
        for i in 0..x0.len() {
            let mut xp = x0.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x0.clone();
            xm.data_mut()[i] -= eps;
            let num = (eval(&xp) - eval(&xm)) / (2.0 * eps);
            let a = analytic.data()[i];
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-8);
            assert!(rel < 1e-6, "coord {i}: analytic {a} vs numeric {num}");
        }
    }

    #[test]
    fn semantic_loss_uniform_logits() {
        let mut tape = Tape::new();
        let k = 4;
        let logits = tape.leaf(Tensor::zeros(&[k, 3, 3]));
        let labels = Tensor::from_fn(&[3, 3], |i| (i % k) as f64).unwrap();
        let loss = tape.semantic_loss(logits, &labels).unwrap();
        let expect = 9.0 * (k as f64).ln();
        assert!((tape.value(loss).data()[0] - expect).abs() < 1e-10);
    }

    #[test]
    fn semantic_loss_rejects_out_of_range_label() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(&[2, 1, 1]));
        let labels = Tensor::new(vec![1, 1], vec![5.0]).unwrap();
        assert!(tape.semantic_loss(logits, &labels).is_err());
    }

    #[test]
    fn semantic_loss_skips_ignore_label() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(&[2, 1, 2]));
        let labels = Tensor::new(vec![1, 2], vec![0.0, 255.0]).unwrap();
        let loss = tape.semantic_loss(logits, &labels).unwrap();
        assert!((tape.value(loss).data()[0] - 2.0f64.ln()).abs() < 1e-12);
    }
}
