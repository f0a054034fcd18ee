//! Toy network assembly: a downsampling stem, a stack of gateable bottleneck
//! blocks, an optional multi-pool module before the last block, and a 2x
//! upsampling task head. Parameters live in named structured storage; the
//! checkpoint format is one PTSR file per parameter plus a manifest and a
//! config snapshot.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pag_core::blocks::{
    conv_unit, layer_skip_block, pag_block, standard_block,
    static_perforation_block, BlockIds, BlockParams, ConvUnitParams, GateHeadParams,
};
use pag_core::io::{read_ptsr, write_ptsr};
use pag_core::multipool::{multipool, PoolBranchIds, PoolBranchSet, PoolMode};
use pag_core::tape::{NodeId, Tape};
use pag_core::{ConvSpec, NetworkCost, RoutingPolicy, Tensor};

use crate::config::{MultiPoolKind, RunConfig, TaskKind};
use crate::error::{HarnessError, Result};

const GATE_SEED_SALT: u64 = 0x6761_7465;
const MP_SEED_SALT: u64 = 0x6d70_6f6f_6c00;

/// One prediction surface per task kind.
pub enum TaskPred {
    /// K x S x S class logits.
    Semantic(NodeId),
    /// Per-branch logit maps (side branches then the fused branch).
    Boundary(Vec<NodeId>),
    /// 1 x S x S log-depth map.
    Depth(NodeId),
    /// 3 x S x S pre-normalization normal features.
    Normal(NodeId),
}

/// One gated layer in a forward pass.
pub struct GateInfo {
    pub name: String,
    /// H x W binary mask node (1 x 1 for layer skipping).
    pub mask: NodeId,
    /// Zero-noise (deployment) density node.
    pub density: NodeId,
    /// Density of the executed (sampled) mask.
    pub sampled_density: Option<NodeId>,
    /// Relaxed on-probability (layer skipping only).
    pub soft: Option<NodeId>,
}

pub struct ForwardResult {
    pub pred: TaskPred,
    pub gates: Vec<GateInfo>,
    /// Multi-pool selection node (P x H x W), when the module is active.
    pub selection: Option<NodeId>,
    /// Every parameter registered on the tape, by name.
    pub params: Vec<(String, NodeId)>,
}

struct Reg {
    nodes: Vec<(String, NodeId)>,
}

impl Reg {
    fn leaf(&mut self, tape: &mut Tape, name: String, t: &Tensor) -> NodeId {
        let id = tape.leaf(t.clone());
        self.nodes.push((name, id));
        id
    }

    fn unit(&mut self, tape: &mut Tape, prefix: &str, p: &ConvUnitParams) -> pag_core::blocks::ConvUnitIds {
        pag_core::blocks::ConvUnitIds {
            kernel: self.leaf(tape, format!("{prefix}.kernel"), &p.kernel),
            bias: self.leaf(tape, format!("{prefix}.bias"), &p.bias),
            scale: self.leaf(tape, format!("{prefix}.scale"), &p.scale),
            shift: self.leaf(tape, format!("{prefix}.shift"), &p.shift),
        }
    }

    fn block(&mut self, tape: &mut Tape, prefix: &str, p: &BlockParams) -> BlockIds {
        BlockIds {
            reduce: self.unit(tape, &format!("{prefix}.reduce"), &p.reduce),
            spatial: self.unit(tape, &format!("{prefix}.spatial"), &p.spatial),
            expand: self.unit(tape, &format!("{prefix}.expand"), &p.expand),
            gate: p.gate.as_ref().map(|g| pag_core::blocks::GateHeadIds {
                kernel: self.leaf(tape, format!("{prefix}.gate.kernel"), &g.kernel),
                bias: self.leaf(tape, format!("{prefix}.gate.bias"), &g.bias),
            }),
        }
    }
}

pub struct ToyNet {
    pub cfg: RunConfig,
    stem: ConvUnitParams,
    blocks: Vec<BlockParams>,
    static_logits: Vec<Option<Tensor>>,
    mp: Option<PoolBranchSet>,
    head_mid: Option<ConvUnitParams>,
    head_out: Option<(Tensor, Tensor)>,
    side: Vec<(Tensor, Tensor)>,
    fuse: Option<(Tensor, Tensor)>,
    /// Blocks (shallowest first) currently gated.
    pub gated_blocks: usize,
    /// Whether the multi-pool module participates in forward passes.
    pub mp_active: bool,
}

fn head_out_channels(task: TaskKind, classes: usize) -> usize {
    match task {
        TaskKind::Semantic => classes,
        TaskKind::Boundary => 1,
        TaskKind::Depth => 1,
        TaskKind::Normal => 3,
    }
}

impl ToyNet {
    pub fn build(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9).wrapping_add(1));
        let c = cfg.channels;
        let stem = ConvUnitParams::random(c, 3, 3, 3, 1, &mut rng);
        let blocks: Vec<BlockParams> = (0..cfg.keep_blocks)
            .map(|_| BlockParams::random(c, cfg.bottleneck, false, &mut rng))
            .collect::<std::result::Result<_, _>>()?;
        let static_logits = vec![None; cfg.keep_blocks];

        let (head_mid, head_out, side, fuse) = if cfg.task == TaskKind::Boundary {
            let bound = (2.0 / c as f64).sqrt();
            let mut side_conv = || {
                let k = Tensor::from_fn(&[1, c, 1, 1], |_| rng.gen_range(-bound..bound))
                    .expect("finite init");
                (k, Tensor::zeros(&[1]))
            };
            let sides = vec![side_conv(), side_conv()];
            let fuse_k =
                Tensor::from_fn(&[1, 2, 1, 1], |_| rng.gen_range(-1.0..1.0)).expect("finite init");
            (None, None, sides, Some((fuse_k, Tensor::zeros(&[1]))))
        } else {
            let mid = ConvUnitParams::random(c / 2, c, 1, 1, 1, &mut rng);
            let k_out = head_out_channels(cfg.task, cfg.classes);
            let bound = (2.0 / (c / 2) as f64).sqrt();
            let out_k = Tensor::from_fn(&[k_out, c / 2, 1, 1], |_| rng.gen_range(-bound..bound))
                .expect("finite init");
            (Some(mid), Some((out_k, Tensor::zeros(&[k_out]))), Vec::new(), None)
        };

        let mut net = ToyNet {
            cfg: cfg.clone(),
            stem,
            blocks,
            static_logits,
            mp: None,
            head_mid,
            head_out,
            side,
            fuse,
            gated_blocks: 0,
            mp_active: false,
        };
        if let Some(g) = cfg.gated_blocks {
            net.enable_gating_up_to(g)?;
        }
        Ok(net)
    }

    pub fn feature_size(&self) -> usize {
        self.cfg.image_size / 2
    }

    fn gating_possible(&self) -> bool {
        matches!(
            self.cfg.policy,
            RoutingPolicy::Pag | RoutingPolicy::LayerSkip | RoutingPolicy::StaticPerforation
        ) && self.cfg.rho < 1.0
    }

    /// Add gate parameters for blocks [0, k). Existing gates are kept; the
    /// per-block init is a pure function of the run seed, so insertion order
    /// does not matter.
    pub fn enable_gating_up_to(&mut self, k: usize) -> Result<()> {
        if k > self.blocks.len() {
            return Err(HarnessError::Config(format!(
                "cannot gate {k} blocks, only {} exist",
                self.blocks.len()
            )));
        }
        if !self.gating_possible() {
            return Ok(());
        }
        let half = self.feature_size();
        for i in 0..k {
            match self.cfg.policy {
                RoutingPolicy::Pag | RoutingPolicy::LayerSkip => {
                    if self.blocks[i].gate.is_none() {
                        let mut rng = ChaCha8Rng::seed_from_u64(
                            self.cfg.seed ^ GATE_SEED_SALT.wrapping_add(i as u64),
                        );
                        self.blocks[i].gate =
                            Some(GateHeadParams::random(
                            self.cfg.channels,
                            2,
                            pag_core::blocks::GATE_ON_BIAS,
                            &mut rng,
                        ));
                    }
                }
                RoutingPolicy::StaticPerforation => {
                    if self.static_logits[i].is_none() {
                        let mut logits = Tensor::zeros(&[2, half, half]);
                        for px in 0..half * half {
                            logits.data_mut()[half * half + px] = pag_core::blocks::GATE_ON_BIAS;
                        }
                        self.static_logits[i] = Some(logits);
                    }
                }
                _ => {}
            }
        }
        self.gated_blocks = self.gated_blocks.max(k);
        Ok(())
    }

    pub fn enable_multipool(&mut self) -> Result<()> {
        if self.cfg.multipool == MultiPoolKind::None {
            return Ok(());
        }
        if self.mp.is_none() {
            let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ MP_SEED_SALT);
            self.mp = Some(PoolBranchSet::random(
                self.cfg.channels,
                &self.cfg.multipool_rates,
                &mut rng,
            )?);
        }
        self.mp_active = true;
        Ok(())
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        image: &Tensor,
        tau: f64,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardResult> {
        if image.rank() != 3 || image.dims()[0] != 3 {
            return Err(HarnessError::Data(format!(
                "expected a 3xHxW image, got {:?}",
                image.dims()
            )));
        }
        let mut reg = Reg { nodes: Vec::new() };
        let img = tape.leaf(image.clone());
        let pooled = tape.avg_pool2(img)?;
        let stem_ids = reg.unit(tape, "stem", &self.stem);
        let mut x = conv_unit(tape, pooled, &self.stem, &stem_ids, true, None)?;

        let keep = self.blocks.len();
        let mp_slot = keep.saturating_sub(1);
        let side_taps = [mp_slot / 2, keep - 1];
        let mut side_features: Vec<NodeId> = Vec::new();
        let mut gates = Vec::new();
        let mut selection = None;

        for (i, block) in self.blocks.iter().enumerate() {
            if self.mp_active && i == mp_slot {
                let mp = self.mp.as_ref().expect("mp params exist when active");
                let ids = register_mp(&mut reg, tape, mp);
                let mode = match self.cfg.multipool {
                    MultiPoolKind::Hard => PoolMode::Hard,
                    MultiPoolKind::Soft => PoolMode::Soft,
                    MultiPoolKind::None => unreachable!("mp_active implies a mode"),
                };
                let tau_arg = (mode == PoolMode::Hard).then_some(tau);
                let out = multipool(tape, x, mp, &ids, mode, tau_arg, rng.as_deref_mut())?;
                x = out.output;
                selection = Some(out.selection);
            }

            let prefix = format!("block{i}");
            let ids = reg.block(tape, &prefix, block);
            let gated = i < self.gated_blocks && self.gating_possible();
            if !gated {
                x = standard_block(tape, x, block, &ids)?;
            } else {
                match self.cfg.policy {
                    RoutingPolicy::Pag => {
                        let out = pag_block(
                            tape,
                            x,
                            block,
                            &ids,
                            tau,
                            rng.as_deref_mut(),
                            self.cfg.dense_f3,
                        )?;
                        let density = deterministic_density(tape, out.logits)?;
                        let sampled = tape.mean_all(out.mask)?;
                        gates.push(GateInfo {
                            name: format!("{prefix}.mask"),
                            mask: out.mask,
                            density,
                            sampled_density: Some(sampled),
                            soft: None,
                        });
                        x = out.output;
                    }
                    RoutingPolicy::LayerSkip => {
                        let out =
                            layer_skip_block(tape, x, block, &ids, tau, rng.as_deref_mut())?;
                        let mask_map = tape.value(out.gate).clone();
                        let mask = tape.leaf(
                            Tensor::new(vec![1, 1], mask_map.data().to_vec())
                                .expect("scalar gate reshapes to 1x1"),
                        );
                        gates.push(GateInfo {
                            name: format!("{prefix}.mask"),
                            mask,
                            density: out.gate,
                            sampled_density: None,
                            soft: Some(out.on_prob),
                        });
                        x = out.output;
                    }
                    RoutingPolicy::StaticPerforation => {
                        let logits_t = self.static_logits[i]
                            .as_ref()
                            .expect("static logits exist for gated block");
                        let logits =
                            reg.leaf(tape, format!("{prefix}.static_logits"), logits_t);
                        let out = static_perforation_block(
                            tape,
                            x,
                            block,
                            &ids,
                            logits,
                            tau,
                            rng.as_deref_mut(),
                            self.cfg.dense_f3,
                        )?;
                        let density = deterministic_density(tape, out.logits)?;
                        let sampled = tape.mean_all(out.mask)?;
                        gates.push(GateInfo {
                            name: format!("{prefix}.mask"),
                            mask: out.mask,
                            density,
                            sampled_density: Some(sampled),
                            soft: None,
                        });
                        x = out.output;
                    }
                    _ => unreachable!("gating_possible excludes dense policies"),
                }
            }
            if self.cfg.task == TaskKind::Boundary && side_taps.contains(&i) {
                for (tap_idx, &tap) in side_taps.iter().enumerate() {
                    if tap == i {
                        let (k, b) = &self.side[tap_idx];
                        let kid = reg.leaf(tape, format!("side{tap_idx}.kernel"), k);
                        let bid = reg.leaf(tape, format!("side{tap_idx}.bias"), b);
                        let spec = ConvSpec::new(1, self.cfg.channels, 1, 1, 1);
                        let conv = tape.conv2d(x, kid, &spec)?;
                        let biased = tape.add_bias(conv, bid)?;
                        side_features.push(tape.upsample2(biased)?);
                    }
                }
            }
        }

        let pred = match self.cfg.task {
            TaskKind::Boundary => {
                let (fk, fb) = self.fuse.as_ref().expect("boundary nets carry a fuse conv");
                let kid = reg.leaf(tape, "fuse.kernel".into(), fk);
                let bid = reg.leaf(tape, "fuse.bias".into(), fb);
                let stacked = tape.concat_channels(&side_features)?;
                let fused_conv = tape.conv2d(stacked, kid, &ConvSpec::new(1, 2, 1, 1, 1))?;
                let fused = tape.add_bias(fused_conv, bid)?;
                let mut branches = side_features;
                branches.push(fused);
                TaskPred::Boundary(branches)
            }
            task => {
                let up = tape.upsample2(x)?;
                let mid = self.head_mid.as_ref().expect("dense-head tasks carry head_mid");
                let mid_ids = reg.unit(tape, "head.mid", mid);
                let hidden = conv_unit(tape, up, mid, &mid_ids, true, None)?;
                let (ok, ob) = self.head_out.as_ref().expect("dense-head tasks carry head_out");
                let kid = reg.leaf(tape, "head.out.kernel".into(), ok);
                let bid = reg.leaf(tape, "head.out.bias".into(), ob);
                let k_out = head_out_channels(task, self.cfg.classes);
                let spec = ConvSpec::new(k_out, self.cfg.channels / 2, 1, 1, 1);
                let conv = tape.conv2d(hidden, kid, &spec)?;
                let logits = tape.add_bias(conv, bid)?;
                match task {
                    TaskKind::Semantic => TaskPred::Semantic(logits),
                    TaskKind::Depth => TaskPred::Depth(logits),
                    TaskKind::Normal => TaskPred::Normal(logits),
                    TaskKind::Boundary => unreachable!(),
                }
            }
        };

        Ok(ForwardResult { pred, gates, selection, params: reg.nodes })
    }

    /// Cost model matching the current forward configuration. Mask names
    /// align with `ForwardResult::gates` and the multi-pool branch masks.
    pub fn network_cost(&self) -> NetworkCost {
        let half = self.feature_size();
        let full = self.cfg.image_size;
        let c = self.cfg.channels;
        let mid = c / self.cfg.bottleneck;
        let mut net = NetworkCost::default();
        net.push("stem", c, 3, 3, 3, half, half, None);
        let keep = self.blocks.len();
        let mp_slot = keep.saturating_sub(1);
        for i in 0..keep {
            if self.mp_active && i == mp_slot {
                if let Some(mp) = &self.mp {
                    let p = mp.branch_count();
                    net.push("multipool.selector", p, c, 1, 1, half, half, None);
                    for &rate in &mp.rates {
                        if rate == 0 {
                            continue;
                        }
                        let gate = (self.cfg.multipool == MultiPoolKind::Hard)
                            .then(|| format!("multipool.branch{rate}.mask"));
                        net.push(
                            format!("multipool.branch{rate}"),
                            c,
                            c,
                            3,
                            3,
                            half,
                            half,
                            gate,
                        );
                    }
                }
            }
            let gated = i < self.gated_blocks && self.gating_possible();
            net.push(format!("block{i}.reduce"), mid, c, 1, 1, half, half, None);
            if gated
                && matches!(self.cfg.policy, RoutingPolicy::Pag | RoutingPolicy::LayerSkip)
            {
                net.push(format!("block{i}.gate"), 2, c, 1, 1, half, half, None);
            }
            let mask = gated.then(|| format!("block{i}.mask"));
            net.push(format!("block{i}.spatial"), mid, mid, 3, 3, half, half, mask.clone());
            let expand_mask = if self.cfg.dense_f3 { None } else { mask };
            net.push(format!("block{i}.expand"), c, mid, 1, 1, half, half, expand_mask);
        }
        match self.cfg.task {
            TaskKind::Boundary => {
                net.push("side0", 1, c, 1, 1, half, half, None);
                net.push("side1", 1, c, 1, 1, half, half, None);
                net.push("fuse", 1, 2, 1, 1, full, full, None);
            }
            _ => {
                net.push("head.mid", c / 2, c, 1, 1, full, full, None);
                let k_out = head_out_channels(self.cfg.task, self.cfg.classes);
                net.push("head.out", k_out, c / 2, 1, 1, full, full, None);
            }
        }
        net
    }

    pub fn param_list(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        let unit = |prefix: &str, u: &ConvUnitParams, out: &mut Vec<(String, Tensor)>| {
            out.push((format!("{prefix}.kernel"), u.kernel.clone()));
            out.push((format!("{prefix}.bias"), u.bias.clone()));
            out.push((format!("{prefix}.scale"), u.scale.clone()));
            out.push((format!("{prefix}.shift"), u.shift.clone()));
        };
        unit("stem", &self.stem, &mut out);
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("block{i}");
            unit(&format!("{p}.reduce"), &b.reduce, &mut out);
            unit(&format!("{p}.spatial"), &b.spatial, &mut out);
            unit(&format!("{p}.expand"), &b.expand, &mut out);
            if let Some(g) = &b.gate {
                out.push((format!("{p}.gate.kernel"), g.kernel.clone()));
                out.push((format!("{p}.gate.bias"), g.bias.clone()));
            }
            if let Some(s) = &self.static_logits[i] {
                out.push((format!("{p}.static_logits"), s.clone()));
            }
        }
        if let Some(mp) = &self.mp {
            out.push(("multipool.selector.kernel".into(), mp.selector_kernel.clone()));
            out.push(("multipool.selector.bias".into(), mp.selector_bias.clone()));
            for (i, branch) in mp.branches.iter().enumerate() {
                if let Some((k, b)) = branch {
                    let rate = mp.rates[i];
                    out.push((format!("multipool.branch{rate}.kernel"), k.clone()));
                    out.push((format!("multipool.branch{rate}.bias"), b.clone()));
                }
            }
        }
        if let Some(mid) = &self.head_mid {
            unit("head.mid", mid, &mut out);
        }
        if let Some((k, b)) = &self.head_out {
            out.push(("head.out.kernel".into(), k.clone()));
            out.push(("head.out.bias".into(), b.clone()));
        }
        for (i, (k, b)) in self.side.iter().enumerate() {
            out.push((format!("side{i}.kernel"), k.clone()));
            out.push((format!("side{i}.bias"), b.clone()));
        }
        if let Some((k, b)) = &self.fuse {
            out.push(("fuse.kernel".into(), k.clone()));
            out.push(("fuse.bias".into(), b.clone()));
        }
        out
    }

    /// Visit every trainable tensor mutably, in the same order and with the
    /// same names as `param_list`.
    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        fn unit(prefix: &str, u: &mut ConvUnitParams, f: &mut impl FnMut(&str, &mut Tensor)) {
            f(&format!("{prefix}.kernel"), &mut u.kernel);
            f(&format!("{prefix}.bias"), &mut u.bias);
            f(&format!("{prefix}.scale"), &mut u.scale);
            f(&format!("{prefix}.shift"), &mut u.shift);
        }
        unit("stem", &mut self.stem, &mut f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("block{i}");
            unit(&format!("{p}.reduce"), &mut b.reduce, &mut f);
            unit(&format!("{p}.spatial"), &mut b.spatial, &mut f);
            unit(&format!("{p}.expand"), &mut b.expand, &mut f);
            if let Some(g) = &mut b.gate {
                f(&format!("{p}.gate.kernel"), &mut g.kernel);
                f(&format!("{p}.gate.bias"), &mut g.bias);
            }
            if let Some(s) = &mut self.static_logits[i] {
                f(&format!("{p}.static_logits"), s);
            }
        }
        if let Some(mp) = &mut self.mp {
            f("multipool.selector.kernel", &mut mp.selector_kernel);
            f("multipool.selector.bias", &mut mp.selector_bias);
            for (i, branch) in mp.branches.iter_mut().enumerate() {
                if let Some((k, b)) = branch {
                    let rate = mp.rates[i];
                    f(&format!("multipool.branch{rate}.kernel"), k);
                    f(&format!("multipool.branch{rate}.bias"), b);
                }
            }
        }
        if let Some(mid) = &mut self.head_mid {
            unit("head.mid", mid, &mut f);
        }
        if let Some((k, b)) = &mut self.head_out {
            f("head.out.kernel", k);
            f("head.out.bias", b);
        }
        for (i, (k, b)) in self.side.iter_mut().enumerate() {
            f(&format!("side{i}.kernel"), k);
            f(&format!("side{i}.bias"), b);
        }
        if let Some((k, b)) = &mut self.fuse {
            f("fuse.kernel", k);
            f("fuse.bias", b);
        }
    }

    /// Write the checkpoint: config snapshot, manifest, one PTSR per parameter.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut cfg = self.cfg.clone();
        cfg.gated_blocks = Some(self.gated_blocks);
        let mut cfg_text = cfg.to_config_string();
        if self.mp_active {
            cfg_text.push_str("# multipool module state is inferred from the manifest\n");
        }
        std::fs::write(dir.join("config.cfg"), cfg_text)?;
        let mut manifest = String::new();
        for (name, tensor) in self.param_list() {
            let file = format!("{name}.ptsr");
            write_ptsr(&dir.join(&file), &tensor)?;
            let dims: Vec<String> = tensor.dims().iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!("{name}\t{file}\t{}\n", dims.join("x")));
        }
        std::fs::write(dir.join("manifest.txt"), manifest)?;
        Ok(())
    }

    /// Rebuild a network from a checkpoint directory.
    pub fn load(dir: &Path) -> Result<Self> {
        let cfg_text = std::fs::read_to_string(dir.join("config.cfg"))?;
        let cfg = RunConfig::parse(&cfg_text)?;
        let mut net = ToyNet::build(&cfg)?;

        let manifest = std::fs::read_to_string(dir.join("manifest.txt"))?;
        let mut stored: BTreeMap<String, (String, Vec<usize>)> = BTreeMap::new();
        for line in manifest.lines() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let (Some(name), Some(file), Some(dims)) = (parts.next(), parts.next(), parts.next())
            else {
                return Err(HarnessError::Config(format!("bad manifest line '{line}'")));
            };
            let dims: Vec<usize> = dims
                .split('x')
                .map(|d| d.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| HarnessError::Config(format!("bad dims in manifest line '{line}'")))?;
            stored.insert(name.to_string(), (file.to_string(), dims));
        }

        // The manifest tells us whether the multi-pool module was materialized.
        if stored.keys().any(|k| k.starts_with("multipool.")) {
            net.enable_multipool()?;
        }

        let mut missing = Vec::new();
        let mut error: Option<HarnessError> = None;
        net.visit_params_mut(|name, tensor| {
            if error.is_some() {
                return;
            }
            match stored.remove(name) {
                None => missing.push(name.to_string()),
                Some((file, dims)) => match read_ptsr(&dir.join(&file)) {
                    Err(e) => error = Some(e.into()),
                    Ok(loaded) => {
                        if loaded.dims() != dims.as_slice() || loaded.dims() != tensor.dims() {
                            error = Some(HarnessError::Config(format!(
                                "parameter '{name}': manifest dims {dims:?}, file {:?}, expected {:?}",
                                loaded.dims(),
                                tensor.dims()
                            )));
                        } else {
                            *tensor = loaded;
                        }
                    }
                },
            }
        });
        if let Some(e) = error {
            return Err(e);
        }
        if !missing.is_empty() {
            return Err(HarnessError::Config(format!(
                "checkpoint manifest missing parameters: {missing:?}"
            )));
        }
        if !stored.is_empty() {
            let extra: Vec<String> = stored.into_keys().collect();
            return Err(HarnessError::Config(format!(
                "checkpoint manifest has unknown parameters: {extra:?}"
            )));
        }
        Ok(net)
    }
}

/// Density of the zero-noise (deployment) gate decision for these logits.
/// The budget penalty binds this quantity -- the density the model shows at
/// evaluation time -- while the forward compute path keeps its sampled mask.
/// Its backward temperature is fixed rather than annealed so the restoring
/// pressure toward the target stays alive after the sampling temperature
/// has cooled.
const DENSITY_TAU: f64 = 0.5;

fn deterministic_density(
    tape: &mut Tape,
    logits: Option<pag_core::NodeId>,
) -> Result<pag_core::NodeId> {
    let logits = logits.ok_or_else(|| {
        HarnessError::Config("gated block did not expose its logits".into())
    })?;
    let zeros = Tensor::zeros(tape.value(logits).dims());
    let det = tape.straight_through_gate(logits, zeros, DENSITY_TAU)?;
    let on = tape.channel(det, 1)?;
    Ok(tape.mean_all(on)?)
}

fn register_mp(reg: &mut Reg, tape: &mut Tape, mp: &PoolBranchSet) -> PoolBranchIds {
    PoolBranchIds {
        branches: mp
            .branches
            .iter()
            .enumerate()
            .map(|(i, b)| {
                b.as_ref().map(|(k, bias)| {
                    let rate = mp.rates[i];
                    (
                        reg.leaf(tape, format!("multipool.branch{rate}.kernel"), k),
                        reg.leaf(tape, format!("multipool.branch{rate}.bias"), bias),
                    )
                })
            })
            .collect(),
        selector_kernel: reg.leaf(tape, "multipool.selector.kernel".into(), &mp.selector_kernel),
        selector_bias: reg.leaf(tape, "multipool.selector.bias".into(), &mp.selector_bias),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.image_size = 16;
        cfg.crop_margin = 2;
        cfg.depth = 2;
        cfg.keep_blocks = 2;
        cfg.channels = 8;
        cfg.train_images = 2;
        cfg.eval_images = 2;
        cfg
    }

    #[test]
    fn forward_shapes_per_task() {
        for (task, want) in [
            (TaskKind::Semantic, vec![4usize, 16, 16]),
            (TaskKind::Depth, vec![1, 16, 16]),
            (TaskKind::Normal, vec![3, 16, 16]),
        ] {
            let mut cfg = small_cfg();
            cfg.task = task;
            let net = ToyNet::build(&cfg).unwrap();
            let image = Tensor::full(&[3, 16, 16], 0.4).unwrap();
            let mut tape = Tape::new();
            let out = net.forward(&mut tape, &image, 1.0, None).unwrap();
            let node = match out.pred {
                TaskPred::Semantic(n) | TaskPred::Depth(n) | TaskPred::Normal(n) => n,
                TaskPred::Boundary(_) => unreachable!(),
            };
            assert_eq!(tape.value(node).dims(), want.as_slice());
        }

        let mut cfg = small_cfg();
        cfg.task = TaskKind::Boundary;
        let net = ToyNet::build(&cfg).unwrap();
        let image = Tensor::full(&[3, 16, 16], 0.4).unwrap();
        let mut tape = Tape::new();
        let out = net.forward(&mut tape, &image, 1.0, None).unwrap();
        let TaskPred::Boundary(branches) = out.pred else { panic!() };
        assert_eq!(branches.len(), 3);
        for b in branches {
            assert_eq!(tape.value(b).dims(), &[1, 16, 16]);
        }
    }

    #[test]
    fn gating_adds_parameters_without_removing_any() {
        let mut cfg = small_cfg();
        cfg.policy = RoutingPolicy::Pag;
        cfg.rho = 0.7;
        let mut net = ToyNet::build(&cfg).unwrap();
        let before: Vec<String> = net.param_list().into_iter().map(|(n, _)| n).collect();
        net.enable_gating_up_to(2).unwrap();
        let after: Vec<String> = net.param_list().into_iter().map(|(n, _)| n).collect();
        for name in &before {
            assert!(after.contains(name), "parameter {name} disappeared");
        }
        assert!(after.len() > before.len());
        assert!(after.iter().any(|n| n == "block0.gate.kernel"));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_cfg();
        cfg.policy = RoutingPolicy::Pag;
        cfg.rho = 0.5;
        cfg.multipool = MultiPoolKind::Hard;
        cfg.multipool_rates = vec![0, 1, 2];
        let mut net = ToyNet::build(&cfg).unwrap();
        net.enable_gating_up_to(2).unwrap();
        net.enable_multipool().unwrap();
        net.save(dir.path()).unwrap();
        let loaded = ToyNet::load(dir.path()).unwrap();
        assert_eq!(loaded.gated_blocks, 2);
        assert!(loaded.mp_active);
        let a = net.param_list();
        let b = loaded.param_list();
        assert_eq!(a.len(), b.len());
        for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
            assert_eq!(na, nb);
            assert_eq!(ta, tb);
        }
    }

    #[test]
    fn load_rejects_missing_parameter_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg();
        let net = ToyNet::build(&cfg).unwrap();
        net.save(dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("stem.kernel.ptsr")).unwrap();
        // Manifest still names the file, so the read fails.
        assert!(ToyNet::load(dir.path()).is_err());
    }
}
