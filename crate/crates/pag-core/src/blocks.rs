//! Bottleneck residual blocks with per-pixel gated execution, plus the
//! layer-skip and static-perforation baselines and ponder-map accumulation.
//!
//! The gated block computes its reduction and gate head densely, then runs
//! the spatial 3x3 transform and the expanding 1x1 transform perforated on
//! the gate's active pixels. Inactive pixels pass the input through exactly.

use rand::Rng;

use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::gating::{gumbel_sample, GateMask};
use crate::tape::{NodeId, NormMoments, Tape};
use crate::tensor::Tensor;

/// Freshly inserted gates start strongly biased toward "compute" so the
/// pretrained dense behavior is disturbed as little as possible.
pub const GATE_ON_BIAS: f64 = 3.0;

/// How a network routes computation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoutingPolicy {
    Dense,
    Pag,
    LayerSkip,
    StaticPerforation,
    Truncated,
}

impl RoutingPolicy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(RoutingPolicy::Dense),
            "pag" => Ok(RoutingPolicy::Pag),
            "layer-skip" => Ok(RoutingPolicy::LayerSkip),
            "static-perforation" => Ok(RoutingPolicy::StaticPerforation),
            "truncated" => Ok(RoutingPolicy::Truncated),
            other => Err(Error::InvalidArg(format!("unknown policy '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            RoutingPolicy::Dense => "dense",
            RoutingPolicy::Pag => "pag",
            RoutingPolicy::LayerSkip => "layer-skip",
            RoutingPolicy::StaticPerforation => "static-perforation",
            RoutingPolicy::Truncated => "truncated",
        }
    }
}

/// One convolution stage: kernel, bias, frozen-moment norm parameters.
#[derive(Clone, Debug)]
pub struct ConvUnitParams {
    pub spec: ConvSpec,
    pub kernel: Tensor,
    pub bias: Tensor,
    pub scale: Tensor,
    pub shift: Tensor,
    pub moments: NormMoments,
}

impl ConvUnitParams {
    pub fn new(spec: ConvSpec, kernel: Tensor, bias: Tensor) -> Result<Self> {
        let c = spec.out_channels;
        if bias.dims() != [c] {
            return Err(Error::DimMismatch(format!(
                "bias {:?} for {c} output channels",
                bias.dims()
            )));
        }
        Ok(ConvUnitParams {
            spec,
            kernel,
            bias,
            scale: Tensor::full(&[c], 1.0)?,
            shift: Tensor::zeros(&[c]),
            moments: NormMoments::identity(c),
        })
    }

    pub fn random<R: Rng>(
        out_channels: usize,
        in_channels: usize,
        kh: usize,
        kw: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Self {
        let spec = ConvSpec::new(out_channels, in_channels, kh, kw, dilation);
        let fan_in = (in_channels * kh * kw) as f64;
        let bound = (2.0 / fan_in).sqrt();
        let kernel = Tensor::from_fn(&[out_channels, in_channels, kh, kw], |_| {
            rng.gen_range(-bound..bound)
        })
        .expect("finite init");
        let bias = Tensor::zeros(&[out_channels]);
        ConvUnitParams::new(spec, kernel, bias).expect("consistent dims")
    }
}

/// Gate head: a 1x1 convolution from the block input to K logit channels.
#[derive(Clone, Debug)]
pub struct GateHeadParams {
    pub kernel: Tensor,
    pub bias: Tensor,
}

impl GateHeadParams {
    /// Initialize with a positive on-bias so training starts near-dense.
    pub fn random<R: Rng>(in_channels: usize, k: usize, on_bias: f64, rng: &mut R) -> Self {
        let bound = (2.0 / in_channels as f64).sqrt();
        let kernel = Tensor::from_fn(&[k, in_channels, 1, 1], |_| rng.gen_range(-bound..bound))
            .expect("finite init");
        let mut bias = Tensor::zeros(&[k]);
        if k >= 2 {
            bias.data_mut()[k - 1] = on_bias;
        }
        GateHeadParams { kernel, bias }
    }

    pub fn spec(&self) -> ConvSpec {
        let d = self.kernel.dims();
        ConvSpec::new(d[0], d[1], d[2], d[3], 1)
    }
}

/// Bottleneck parameters: reduce (1x1, C -> C/r), spatial (3x3, C/r -> C/r),
/// expand (1x1, C/r -> C), and an optional two-channel gate head.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub reduce: ConvUnitParams,
    pub spatial: ConvUnitParams,
    pub expand: ConvUnitParams,
    pub gate: Option<GateHeadParams>,
}

impl BlockParams {
    pub fn random<R: Rng>(channels: usize, ratio: usize, gated: bool, rng: &mut R) -> Result<Self> {
        if ratio == 0 || channels % ratio != 0 {
            return Err(Error::InvalidArg(format!(
                "bottleneck ratio {ratio} must divide channel count {channels}"
            )));
        }
        let mid = channels / ratio;
        Ok(BlockParams {
            reduce: ConvUnitParams::random(mid, channels, 1, 1, 1, rng),
            spatial: ConvUnitParams::random(mid, mid, 3, 3, 1, rng),
            expand: ConvUnitParams::random(channels, mid, 1, 1, 1, rng),
            gate: gated.then(|| GateHeadParams::random(channels, 2, GATE_ON_BIAS, rng)),
        })
    }

    pub fn channels(&self) -> usize {
        self.expand.spec.out_channels
    }
}

/// Tape node ids for one registered convolution stage.
#[derive(Clone, Copy, Debug)]
pub struct ConvUnitIds {
    pub kernel: NodeId,
    pub bias: NodeId,
    pub scale: NodeId,
    pub shift: NodeId,
}

#[derive(Clone, Copy, Debug)]
pub struct GateHeadIds {
    pub kernel: NodeId,
    pub bias: NodeId,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockIds {
    pub reduce: ConvUnitIds,
    pub spatial: ConvUnitIds,
    pub expand: ConvUnitIds,
    pub gate: Option<GateHeadIds>,
}

pub fn register_conv_unit(tape: &mut Tape, p: &ConvUnitParams) -> ConvUnitIds {
    ConvUnitIds {
        kernel: tape.leaf(p.kernel.clone()),
        bias: tape.leaf(p.bias.clone()),
        scale: tape.leaf(p.scale.clone()),
        shift: tape.leaf(p.shift.clone()),
    }
}

pub fn register_block(tape: &mut Tape, p: &BlockParams) -> BlockIds {
    BlockIds {
        reduce: register_conv_unit(tape, &p.reduce),
        spatial: register_conv_unit(tape, &p.spatial),
        expand: register_conv_unit(tape, &p.expand),
        gate: p.gate.as_ref().map(|g| GateHeadIds {
            kernel: tape.leaf(g.kernel.clone()),
            bias: tape.leaf(g.bias.clone()),
        }),
    }
}

/// conv -> bias -> frozen norm (-> relu), optionally perforated on a mask.
/// When perforated, the masked multiply after the norm keeps inactive output
/// pixels exactly zero while active pixels match the dense composition.
pub fn conv_unit(
    tape: &mut Tape,
    x: NodeId,
    p: &ConvUnitParams,
    ids: &ConvUnitIds,
    relu: bool,
    perforate: Option<NodeId>,
) -> Result<NodeId> {
    let conv = match perforate {
        Some(mask) => tape.conv2d_perforated(x, ids.kernel, mask, &p.spec)?,
        None => tape.conv2d(x, ids.kernel, &p.spec)?,
    };
    let biased = tape.add_bias(conv, ids.bias)?;
    let normed = tape.frozen_norm(biased, ids.scale, ids.shift, &p.moments)?;
    let activated = if relu { tape.relu(normed)? } else { normed };
    match perforate {
        Some(mask) => tape.mul_spatial(activated, mask),
        None => Ok(activated),
    }
}

/// Standard bottleneck residual block: O = I + expand(spatial(reduce(I))).
pub fn standard_block(tape: &mut Tape, input: NodeId, p: &BlockParams, ids: &BlockIds) -> Result<NodeId> {
    let x = conv_unit(tape, input, &p.reduce, &ids.reduce, true, None)?;
    let y = conv_unit(tape, x, &p.spatial, &ids.spatial, true, None)?;
    let z = conv_unit(tape, y, &p.expand, &ids.expand, false, None)?;
    tape.add(input, z)
}

/// Output bundle of a pixel-gated block.
#[derive(Clone, Copy, Debug)]
pub struct GatedBlockOut {
    pub output: NodeId,
    /// Binary on-mask (H, W).
    pub mask: NodeId,
    /// Full one-hot gate output (2, H, W).
    pub onehot: NodeId,
    /// Gate logits, when the gate was driven by logits rather than forced.
    pub logits: Option<NodeId>,
}

fn gate_logits(tape: &mut Tape, input: NodeId, head: &GateHeadParams, ids: &GateHeadIds) -> Result<NodeId> {
    let conv = tape.conv2d(input, ids.kernel, &head.spec())?;
    tape.add_bias(conv, ids.bias)
}

fn draw_gumbels<R: Rng>(dims: &[usize], rng: Option<&mut R>) -> Tensor {
    match rng {
        Some(r) => gumbel_sample(dims, r),
        None => Tensor::zeros(dims),
    }
}

fn gated_body(
    tape: &mut Tape,
    input: NodeId,
    p: &BlockParams,
    ids: &BlockIds,
    onehot: NodeId,
    dense_expand: bool,
) -> Result<GatedBlockOut> {
    let on = tape.channel(onehot, 1)?;
    let off = tape.channel(onehot, 0)?;
    let x = conv_unit(tape, input, &p.reduce, &ids.reduce, true, None)?;
    // The 3x3 transform runs only at active pixels; reads of dense x are fine.
    let y = conv_unit(tape, x, &p.spatial, &ids.spatial, true, Some(on))?;
    let kept = tape.mul_spatial(x, off)?;
    let updated = tape.mul_spatial(y, on)?;
    let mixed = tape.add(kept, updated)?;
    let z = if dense_expand {
        conv_unit(tape, mixed, &p.expand, &ids.expand, false, None)?
    } else {
        conv_unit(tape, mixed, &p.expand, &ids.expand, false, Some(on))?
    };
    let output = tape.add(input, z)?;
    Ok(GatedBlockOut { output, mask: on, onehot, logits: None })
}

/// Pixel-gated residual block. The gate head runs on the block input in
/// parallel with the reduction; active pixels follow the standard block,
/// inactive pixels return the input unchanged (strict perforation).
/// With `dense_expand` the final 1x1 transform instead runs densely over the
/// gate-mixed map.
pub fn pag_block<R: Rng>(
    tape: &mut Tape,
    input: NodeId,
    p: &BlockParams,
    ids: &BlockIds,
    tau: f64,
    rng: Option<&mut R>,
    dense_expand: bool,
) -> Result<GatedBlockOut> {
    let head = p.gate.as_ref().ok_or_else(|| {
        Error::InvalidArg("pag_block requires gate head parameters".into())
    })?;
    let head_ids = ids.gate.as_ref().ok_or_else(|| {
        Error::InvalidArg("pag_block requires registered gate head".into())
    })?;
    let logits = gate_logits(tape, input, head, head_ids)?;
    let gumbels = draw_gumbels(tape.value(logits).dims(), rng);
    let onehot = tape.straight_through_gate(logits, gumbels, tau)?;
    let mut out = gated_body(tape, input, p, ids, onehot, dense_expand)?;
    out.logits = Some(logits);
    Ok(out)
}

/// Pixel-gated block with an externally supplied mask, bypassing the gate
/// head. Used by tests and by mask-replay tooling.
pub fn pag_block_forced(
    tape: &mut Tape,
    input: NodeId,
    p: &BlockParams,
    ids: &BlockIds,
    mask: &GateMask,
    dense_expand: bool,
) -> Result<GatedBlockOut> {
    let dims = tape.value(input).dims();
    if mask.dims() != [dims[1], dims[2]] {
        return Err(Error::DimMismatch(format!(
            "forced mask {:?} vs input {:?}",
            mask.dims(),
            dims
        )));
    }
    let (h, w) = (mask.dims()[0], mask.dims()[1]);
    let mut onehot = Tensor::zeros(&[2, h, w]);
    for y in 0..h {
        for x in 0..w {
            let v = mask.as_tensor().get2(y, x);
            onehot.set3(1, y, x, v);
            onehot.set3(0, y, x, 1.0 - v);
        }
    }
    let onehot = tape.leaf(onehot);
    gated_body(tape, input, p, ids, onehot, dense_expand)
}

/// Output bundle of a layer-skip block.
#[derive(Clone, Copy, Debug)]
pub struct SkipBlockOut {
    pub output: NodeId,
    /// Hard scalar gate in {0, 1}.
    pub gate: NodeId,
    /// Relaxed on-probability, used as the sparsity surrogate.
    pub on_prob: NodeId,
}

/// Whole-layer gating baseline: one binary decision from globally pooled
/// gate-head logits switches the entire residual on or off.
pub fn layer_skip_block<R: Rng>(
    tape: &mut Tape,
    input: NodeId,
    p: &BlockParams,
    ids: &BlockIds,
    tau: f64,
    rng: Option<&mut R>,
) -> Result<SkipBlockOut> {
    let head = p.gate.as_ref().ok_or_else(|| {
        Error::InvalidArg("layer_skip_block requires gate head parameters".into())
    })?;
    let head_ids = ids.gate.as_ref().ok_or_else(|| {
        Error::InvalidArg("layer_skip_block requires registered gate head".into())
    })?;
    let logits = gate_logits(tape, input, head, head_ids)?;
    let pooled = tape.global_avg_pool(logits)?;
    let gumbels = draw_gumbels(&[2, 1, 1], rng);

    let onehot = tape.straight_through_gate(pooled, gumbels.clone(), tau)?;
    let on_map = tape.channel(onehot, 1)?;
    let gate = tape.mean_all(on_map)?;

    // Relaxed on-probability of the same draw, for budget penalties.
    let noise = tape.leaf(gumbels);
    let noisy = tape.add(pooled, noise)?;
    let scaled = tape.scale(noisy, 1.0 / tau)?;
    let soft = tape.softmax_channels(scaled)?;
    let soft_on = tape.channel(soft, 1)?;
    let on_prob = tape.mean_all(soft_on)?;

    let x = conv_unit(tape, input, &p.reduce, &ids.reduce, true, None)?;
    let y = conv_unit(tape, x, &p.spatial, &ids.spatial, true, None)?;
    let z = conv_unit(tape, y, &p.expand, &ids.expand, false, None)?;
    let gated = tape.scalar_broadcast_mul(z, gate)?;
    let output = tape.add(input, gated)?;
    Ok(SkipBlockOut { output, gate, on_prob })
}

/// Input-independent perforation baseline: the gate draws from trainable
/// per-pixel logits of a fixed spatial size, so inputs must match that size.
pub fn static_perforation_block<R: Rng>(
    tape: &mut Tape,
    input: NodeId,
    p: &BlockParams,
    ids: &BlockIds,
    static_logits: NodeId,
    tau: f64,
    rng: Option<&mut R>,
    dense_expand: bool,
) -> Result<GatedBlockOut> {
    let in_dims = tape.value(input).dims().to_vec();
    let logit_dims = tape.value(static_logits).dims().to_vec();
    if logit_dims.len() != 3 || logit_dims[0] != 2 {
        return Err(Error::DimMismatch(format!(
            "static logits must be 2xHxW, got {logit_dims:?}"
        )));
    }
    if in_dims[1] != logit_dims[1] || in_dims[2] != logit_dims[2] {
        return Err(Error::DimMismatch(format!(
            "input spatial size {}x{} does not match the learned mask {}x{}",
            in_dims[1], in_dims[2], logit_dims[1], logit_dims[2]
        )));
    }
    let gumbels = draw_gumbels(&logit_dims, rng);
    let onehot = tape.straight_through_gate(static_logits, gumbels, tau)?;
    let mut out = gated_body(tape, input, p, ids, onehot, dense_expand)?;
    out.logits = Some(static_logits);
    Ok(out)
}

/// Per-pixel count of active gates across layers.
#[derive(Clone, Debug, PartialEq)]
pub struct PonderMap {
    pub values: Tensor,
    pub layer_count: usize,
}

impl PonderMap {
    /// 8-bit PGM rows with pixel value round(255 * ponder / layer_count).
    pub fn to_pgm_pixels(&self) -> Vec<u8> {
        self.values
            .data()
            .iter()
            .map(|&v| (255.0 * v / self.layer_count as f64).round() as u8)
            .collect()
    }
}

/// Element-wise sum of binary masks across layers.
pub fn accumulate_ponder(masks: &[GateMask]) -> Result<PonderMap> {
    let first = masks
        .first()
        .ok_or_else(|| Error::InvalidArg("accumulate_ponder needs at least one mask".into()))?;
    let dims = first.dims().to_vec();
    let mut values = Tensor::zeros(&dims);
    for m in masks {
        if m.dims() != dims {
            return Err(Error::DimMismatch(format!(
                "ponder mask {:?} vs {:?}",
                m.dims(),
                dims
            )));
        }
        for (acc, v) in values.data_mut().iter_mut().zip(m.as_tensor().data()) {
            *acc += v;
        }
    }
    Ok(PonderMap { values, layer_count: masks.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(dims, |_| rng.gen_range(-1.0..1.0)).unwrap()
    }

    fn random_mask(dims: &[usize; 2], density: f64, rng: &mut ChaCha8Rng) -> GateMask {
        let t = Tensor::from_fn(dims, |_| if rng.gen_bool(density) { 1.0 } else { 0.0 }).unwrap();
        GateMask::from_tensor(t).unwrap()
    }

    #[test]
    fn zero_params_make_identity_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut p = BlockParams::random(4, 2, false, &mut rng).unwrap();
        for unit in [&mut p.reduce, &mut p.spatial, &mut p.expand] {
            unit.kernel = Tensor::zeros(unit.kernel.dims());
            unit.bias = Tensor::zeros(unit.bias.dims());
        }
        let input = rand_tensor(&[4, 6, 6], &mut rng);
        let mut tape = Tape::new();
        let i = tape.leaf(input.clone());
        let ids = register_block(&mut tape, &p);
        let o = standard_block(&mut tape, i, &p, &ids).unwrap();
        assert_eq!(tape.value(o), &input);
    }

    #[test]
    fn standard_block_matches_straight_line_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = BlockParams::random(4, 2, false, &mut rng).unwrap();
        let input = rand_tensor(&[4, 5, 5], &mut rng);

        let mut tape = Tape::new();
        let i = tape.leaf(input.clone());
        let ids = register_block(&mut tape, &p);
        let o = standard_block(&mut tape, i, &p, &ids).unwrap();

        // Reference composition assembled step by step from tape primitives.
        let mut ref_tape = Tape::new();
        let ri = ref_tape.leaf(input.clone());
        let rids = register_block(&mut ref_tape, &p);
        let c1 = ref_tape.conv2d(ri, rids.reduce.kernel, &p.reduce.spec).unwrap();
        let b1 = ref_tape.add_bias(c1, rids.reduce.bias).unwrap();
        let n1 = ref_tape
            .frozen_norm(b1, rids.reduce.scale, rids.reduce.shift, &p.reduce.moments)
            .unwrap();
        let r1 = ref_tape.relu(n1).unwrap();
        let c2 = ref_tape.conv2d(r1, rids.spatial.kernel, &p.spatial.spec).unwrap();
        let b2 = ref_tape.add_bias(c2, rids.spatial.bias).unwrap();
        let n2 = ref_tape
            .frozen_norm(b2, rids.spatial.scale, rids.spatial.shift, &p.spatial.moments)
            .unwrap();
        let r2 = ref_tape.relu(n2).unwrap();
        let c3 = ref_tape.conv2d(r2, rids.expand.kernel, &p.expand.spec).unwrap();
        let b3 = ref_tape.add_bias(c3, rids.expand.bias).unwrap();
        let n3 = ref_tape
            .frozen_norm(b3, rids.expand.scale, rids.expand.shift, &p.expand.moments)
            .unwrap();
        let ro = ref_tape.add(ri, n3).unwrap();

        assert_eq!(tape.value(o), ref_tape.value(ro));
    }

    #[test]
    fn standard_block_is_not_linear() {
        // ReLU breaks additivity: f(a+b) != f(a)+f(b)-f(0) on a crafted input.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = BlockParams::random(2, 2, false, &mut rng).unwrap();
        let a = Tensor::full(&[2, 4, 4], 0.8).unwrap();
        let b = Tensor::full(&[2, 4, 4], -0.8).unwrap();

        let run = |input: &Tensor| -> Tensor {
            let mut tape = Tape::new();
            let i = tape.leaf(input.clone());
            let ids = register_block(&mut tape, &p);
            let o = standard_block(&mut tape, i, &p, &ids).unwrap();
            tape.value(o).clone()
        };

        let sum_in = Tensor::new(
            vec![2, 4, 4],
            a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
        )
        .unwrap();
        let f_sum = run(&sum_in);
        let f_a = run(&a);
        let f_b = run(&b);
        let f_zero = run(&Tensor::zeros(&[2, 4, 4]));
        let mut linear_combo = Tensor::zeros(&[2, 4, 4]);
        for i in 0..f_a.len() {
            linear_combo.data_mut()[i] = f_a.data()[i] + f_b.data()[i] - f_zero.data()[i];
        }
        assert!(f_sum.max_abs_diff(&linear_combo).unwrap() > 1e-6);
    }

    #[test]
    fn full_gate_equals_standard_block_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let p = BlockParams::random(4, 2, true, &mut rng).unwrap();
        let input = rand_tensor(&[4, 6, 5], &mut rng);

        let mut tape = Tape::new();
        let i = tape.leaf(input.clone());
        let ids = register_block(&mut tape, &p);
        let std_out = standard_block(&mut tape, i, &p, &ids).unwrap();
        let forced = pag_block_forced(&mut tape, i, &p, &ids, &GateMask::full(&[6, 5]), false).unwrap();
        assert_eq!(tape.value(std_out).data(), tape.value(forced.output).data());
    }

    #[test]
    fn empty_gate_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let p = BlockParams::random(4, 2, true, &mut rng).unwrap();
        let input = rand_tensor(&[4, 5, 4], &mut rng);
        let mut tape = Tape::new();
        let i = tape.leaf(input.clone());
        let ids = register_block(&mut tape, &p);
        let out = pag_block_forced(&mut tape, i, &p, &ids, &GateMask::empty(&[5, 4]), false).unwrap();
        assert!(tape.value(out.output).max_abs_diff(&input).unwrap() == 0.0);
    }

    #[test]
    fn random_gate_selects_between_standard_and_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for _ in 0..5 {
            let p = BlockParams::random(4, 2, true, &mut rng).unwrap();
            let input = rand_tensor(&[4, 7, 6], &mut rng);
            let mask = random_mask(&[7, 6], 0.5, &mut rng);

            let mut tape = Tape::new();
            let i = tape.leaf(input.clone());
            let ids = register_block(&mut tape, &p);
            let std_out = standard_block(&mut tape, i, &p, &ids).unwrap();
            let gated = pag_block_forced(&mut tape, i, &p, &ids, &mask, false).unwrap();

            let std_v = tape.value(std_out);
            let gate_v = tape.value(gated.output);
            for y in 0..7 {
                for x in 0..6 {
                    for c in 0..4 {
                        let want = if mask.as_tensor().get2(y, x) == 1.0 {
                            std_v.get3(c, y, x)
                        } else {
                            input.get3(c, y, x)
                        };
                        assert!((gate_v.get3(c, y, x) - want).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn pixel_locality_of_active_outputs() {
        // Perturbing the input at an inactive pixel outside the receptive
        // field of every active pixel leaves active outputs unchanged.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let p = BlockParams::random(4, 2, true, &mut rng).unwrap();
        let input = rand_tensor(&[4, 8, 8], &mut rng);
        let mut mask_t = Tensor::zeros(&[8, 8]);
        mask_t.set2(1, 1, 1.0);
        mask_t.set2(2, 1, 1.0);
        let mask = GateMask::from_tensor(mask_t).unwrap();

        let run = |inp: &Tensor| -> Tensor {
            let mut tape = Tape::new();
            let i = tape.leaf(inp.clone());
            let ids = register_block(&mut tape, &p);
            let out = pag_block_forced(&mut tape, i, &p, &ids, &mask, false).unwrap();
            tape.value(out.output).clone()
        };

        let base = run(&input);
        let mut poked = input.clone();
        // (6, 6) is inactive and more than one pixel away from both active pixels.
        for c in 0..4 {
            let v = poked.get3(c, 6, 6) + 0.7;
            poked.set3(c, 6, 6, v);
        }
        let moved = run(&poked);
        for &(y, x) in &[(1usize, 1usize), (2, 1)] {
            for c in 0..4 {
                assert_eq!(base.get3(c, y, x), moved.get3(c, y, x));
            }
        }
    }

    #[test]
    fn layer_skip_gate_one_matches_standard_and_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let mut p = BlockParams::random(4, 2, true, &mut rng).unwrap();
        let input = rand_tensor(&[4, 6, 6], &mut rng);

        // Bias the gate head decisively and use zero noise for determinism.
        let run = |p: &BlockParams| -> (Tensor, f64) {
            let mut tape = Tape::new();
            let i = tape.leaf(input.clone());
            let ids = register_block(&mut tape, p);
            let out =
                layer_skip_block::<ChaCha8Rng>(&mut tape, i, p, &ids, 0.5, None).unwrap();
            (
                tape.value(out.output).clone(),
                tape.value(out.gate).data()[0],
            )
        };

        p.gate.as_mut().unwrap().bias = Tensor::new(vec![2], vec![-10.0, 10.0]).unwrap();
        let (on_out, g_on) = run(&p);
        assert_eq!(g_on, 1.0);
        let mut tape = Tape::new();
        let i = tape.leaf(input.clone());
        let ids = register_block(&mut tape, &p);
        let std_out = standard_block(&mut tape, i, &p, &ids).unwrap();
        assert!(on_out.max_abs_diff(tape.value(std_out)).unwrap() < 1e-12);

        p.gate.as_mut().unwrap().bias = Tensor::new(vec![2], vec![10.0, -10.0]).unwrap();
        let (off_out, g_off) = run(&p);
        assert_eq!(g_off, 0.0);
        assert!(off_out.max_abs_diff(&input).unwrap() == 0.0);
    }

    #[test]
    fn layer_skip_execution_frequency_near_half_for_equal_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut p = BlockParams::random(2, 2, true, &mut rng).unwrap();
        // Zero head => equal logits per pixel => pooled logits equal.
        let head = p.gate.as_mut().unwrap();
        head.kernel = Tensor::zeros(head.kernel.dims());
        head.bias = Tensor::zeros(&[2]);
        let input = rand_tensor(&[2, 4, 4], &mut rng);

        let mut on = 0;
        let n = 1000;
        for _ in 0..n {
            let mut tape = Tape::new();
            let i = tape.leaf(input.clone());
            let ids = register_block(&mut tape, &p);
            let out = layer_skip_block(&mut tape, i, &p, &ids, 1.0, Some(&mut rng)).unwrap();
            if tape.value(out.gate).data()[0] == 1.0 {
                on += 1;
            }
        }
        let freq = on as f64 / n as f64;
        assert!((freq - 0.5).abs() < 0.05, "execution frequency {freq}");
    }

    #[test]
    fn static_perforation_rejects_mismatched_input_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let p = BlockParams::random(4, 2, false, &mut rng).unwrap();
        let input = rand_tensor(&[4, 6, 6], &mut rng);
        let mut tape = Tape::new();
        let i = tape.leaf(input);
        let ids = register_block(&mut tape, &p);
        let logits = tape.leaf(Tensor::zeros(&[2, 8, 8]));
        let err = static_perforation_block::<ChaCha8Rng>(
            &mut tape, i, &p, &ids, logits, 0.5, None, false,
        )
        .unwrap_err();
        assert!(matches!(err, Error::DimMismatch(_)));
    }

    #[test]
    fn static_perforation_is_deterministic_at_inference() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = BlockParams::random(4, 2, false, &mut rng).unwrap();
        let input = rand_tensor(&[4, 5, 5], &mut rng);
        let logits_t = rand_tensor(&[2, 5, 5], &mut rng);

        let run = || -> Tensor {
            let mut tape = Tape::new();
            let i = tape.leaf(input.clone());
            let ids = register_block(&mut tape, &p);
            let logits = tape.leaf(logits_t.clone());
            let out = static_perforation_block::<ChaCha8Rng>(
                &mut tape, i, &p, &ids, logits, 0.5, None, false,
            )
            .unwrap();
            tape.value(out.output).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn static_perforation_matches_pag_with_same_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let p = BlockParams::random(4, 2, true, &mut rng).unwrap();
        let input = rand_tensor(&[4, 6, 6], &mut rng);
        // Static logits that argmax to a checkerboard.
        let logits_t = Tensor::from_fn(&[2, 6, 6], |i| {
            let ch = i / 36;
            let px = i % 36;
            let on = (px / 6 + px % 6) % 2 == 0;
            match (ch, on) {
                (1, true) | (0, false) => 5.0,
                _ => -5.0,
            }
        })
        .unwrap();
        let mask_t = Tensor::from_fn(&[6, 6], |px| {
            if (px / 6 + px % 6) % 2 == 0 { 1.0 } else { 0.0 }
        })
        .unwrap();
        let mask = GateMask::from_tensor(mask_t).unwrap();

        let mut tape = Tape::new();
        let i = tape.leaf(input.clone());
        let ids = register_block(&mut tape, &p);
        let logits = tape.leaf(logits_t);
        let st = static_perforation_block::<ChaCha8Rng>(
            &mut tape, i, &p, &ids, logits, 0.5, None, false,
        )
        .unwrap();
        let forced = pag_block_forced(&mut tape, i, &p, &ids, &mask, false).unwrap();
        assert_eq!(
            tape.value(st.output).data(),
            tape.value(forced.output).data()
        );
    }

    #[test]
    fn ponder_accumulation() {
        let ones = GateMask::full(&[3, 3]);
        let zeros = GateMask::empty(&[3, 3]);
        let p = accumulate_ponder(&[ones.clone(), ones.clone(), ones.clone()]).unwrap();
        assert!(p.values.data().iter().all(|&v| v == 3.0));
        let p = accumulate_ponder(&[zeros.clone(), zeros]).unwrap();
        assert!(p.values.data().iter().all(|&v| v == 0.0));
        assert!(accumulate_ponder(&[]).is_err());
    }

    #[test]
    fn ponder_matches_elementwise_sum_and_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let masks: Vec<GateMask> = (0..5).map(|_| random_mask(&[6, 4], 0.4, &mut rng)).collect();
        let p = accumulate_ponder(&masks).unwrap();
        for y in 0..6 {
            for x in 0..4 {
                let want: f64 = masks.iter().map(|m| m.as_tensor().get2(y, x)).sum();
                assert_eq!(p.values.get2(y, x), want);
            }
        }
        // Mean ponder / L equals the mean per-layer density.
        let mean_density: f64 = masks.iter().map(|m| m.density()).sum::<f64>() / 5.0;
        assert!((p.values.mean() / 5.0 - mean_density).abs() < 1e-12);
    }

    #[test]
    fn pag_network_is_fully_convolutional() {
        // The same parameters run at any spatial size >= the receptive field.
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let p = BlockParams::random(4, 2, true, &mut rng).unwrap();
        for (h, w) in [(6, 6), (9, 5), (12, 16)] {
            let input = rand_tensor(&[4, h, w], &mut rng);
            let mut tape = Tape::new();
            let i = tape.leaf(input);
            let ids = register_block(&mut tape, &p);
            let out = pag_block(&mut tape, i, &p, &ids, 0.7, Some(&mut rng), false).unwrap();
            assert_eq!(tape.value(out.output).dims(), &[4, h, w]);
        }
    }
}
