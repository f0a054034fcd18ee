//! Stage-wise trainer: base model first, then the multi-pool module, then
//! gates inserted one block at a time (shallowest first), and finally the
//! density target lowered step by step, fine-tuning from the higher-density
//! state each time. Plain SGD with the poly learning-rate schedule, batch
//! size one, random left-right flips and margin crops.

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pag_core::gating::TemperatureSchedule;
use pag_core::losses::{
    boundary_loss, total_loss, SparsityBudget, SparsityScope, TaskTarget, DEPTH_GAMMA,
    NORMAL_WEIGHT,
};
use pag_core::tape::{NodeId, Tape};
use pag_core::{sparsity_kl_value, RoutingPolicy, Tensor};

use crate::config::{RunConfig, StageKind};
use crate::dataset::{crop_flip, gen_dataset, Split};
use crate::error::{HarnessError, Result};
use crate::model::{ForwardResult, TaskPred, ToyNet};

const AUG_SEED_SALT: u64 = 0x6175_676d_656e_7400;
const NOISE_SEED_SALT: u64 = 0x6e6f_6973_6500;

/// Poly learning rate at the defaults: 2e-4 * (1 - iter/maxiter)^0.9.
pub fn poly_lr(iter: usize, max_iter: usize) -> Result<f64> {
    poly_lr_with(iter, max_iter, 2e-4, 0.9)
}

pub fn poly_lr_with(iter: usize, max_iter: usize, base: f64, power: f64) -> Result<f64> {
    if max_iter == 0 || iter >= max_iter {
        return Err(HarnessError::Config(format!(
            "iteration {iter} outside [0, {max_iter})"
        )));
    }
    Ok(base * (1.0 - iter as f64 / max_iter as f64).powf(power))
}

/// Slope of KL(rho || g) in g, used for the whole-layer gate surrogate.
fn kl_slope(rho: f64, g: f64) -> f64 {
    -rho / g + (1.0 - rho) / (1.0 - g)
}

#[derive(Clone, Debug)]
struct Phase {
    label: String,
    iters: usize,
    gated: usize,
    mp: bool,
    rho: f64,
    /// Sample gate noise during this phase; the final density step runs
    /// deterministically so the deployed routing is what gets fine-tuned.
    stochastic: bool,
    /// Length of the poly learning-rate cycle this phase belongs to; gate
    /// insertion sub-phases share their stage's cycle so the rate does not
    /// spike back up at every insertion.
    lr_total: usize,
    /// Offset of this phase inside its learning-rate cycle.
    lr_offset: usize,
}

fn split_evenly(total: usize, parts: usize) -> Vec<usize> {
    let base = total / parts;
    let rem = total % parts;
    (0..parts).map(|i| base + usize::from(i < rem)).collect()
}

fn build_plan(cfg: &RunConfig) -> Vec<Phase> {
    let gates_possible = matches!(
        cfg.policy,
        RoutingPolicy::Pag | RoutingPolicy::LayerSkip | RoutingPolicy::StaticPerforation
    ) && cfg.rho < 1.0;
    let ladder = cfg.rho_ladder();
    let mut mp = false;
    let mut gated = 0usize;
    let mut plan = Vec::new();
    for stage in &cfg.stages {
        match stage.kind {
            StageKind::Base => plan.push(Phase {
                label: "base".into(),
                iters: stage.iters,
                gated,
                mp,
                rho: ladder[0],
                stochastic: true,
                lr_total: stage.iters,
                lr_offset: 0,
            }),
            StageKind::Multipool => {
                if cfg.multipool != crate::config::MultiPoolKind::None {
                    mp = true;
                    plan.push(Phase {
                        label: "multipool".into(),
                        iters: stage.iters,
                        gated,
                        mp,
                        rho: ladder[0],
                        stochastic: true,
                        lr_total: stage.iters,
                        lr_offset: 0,
                    });
                }
            }
            StageKind::Pag => {
                if gates_possible {
                    let blocks = cfg.keep_blocks;
                    let mut offset = 0;
                    for (k, iters) in split_evenly(stage.iters, blocks).into_iter().enumerate() {
                        gated = k + 1;
                        plan.push(Phase {
                            label: format!("pag{gated}"),
                            iters,
                            gated,
                            mp,
                            rho: ladder[0],
                            stochastic: true,
                            lr_total: stage.iters,
                            lr_offset: offset,
                        });
                        offset += iters;
                    }
                } else {
                    // Ungated policies keep training so every policy sees
                    // the same iteration budget.
                    plan.push(Phase {
                        label: "cont".into(),
                        iters: stage.iters,
                        gated,
                        mp,
                        rho: ladder[0],
                        stochastic: true,
                        lr_total: stage.iters,
                        lr_offset: 0,
                    });
                }
            }
            StageKind::Rho => {
                let steps: Vec<f64> = if gates_possible && ladder.len() > 1 {
                    ladder[1..].to_vec()
                } else {
                    vec![ladder[0]]
                };
                let n_steps = steps.len();
                for (i, (rho, iters)) in steps
                    .iter()
                    .zip(split_evenly(stage.iters, n_steps))
                    .enumerate()
                {
                    // The last density step splits into a stochastic half and
                    // a deterministic fine-tune of the deployed routing.
                    let last = i + 1 == n_steps && gates_possible;
                    let label = if gates_possible {
                        format!("rho{rho}")
                    } else {
                        "cont".into()
                    };
                    if last {
                        let first = iters / 2;
                        plan.push(Phase {
                            label: label.clone(),
                            iters: first,
                            gated,
                            mp,
                            rho: *rho,
                            stochastic: true,
                            lr_total: iters,
                            lr_offset: 0,
                        });
                        plan.push(Phase {
                            label: format!("{label}det"),
                            iters: iters - first,
                            gated,
                            mp,
                            rho: *rho,
                            stochastic: false,
                            lr_total: iters,
                            lr_offset: first,
                        });
                    } else {
                        plan.push(Phase {
                            label,
                            iters,
                            gated,
                            mp,
                            rho: *rho,
                            stochastic: true,
                            lr_total: iters,
                            lr_offset: 0,
                        });
                    }
                }
            }
        }
    }
    plan.retain(|p| p.iters > 0);
    // One poly cycle spans everything up to the density descent, so gate
    // insertions happen at an already-decayed rate; each density step is its
    // own fine-tuning cycle, restarting from the base rate.
    let head_total: usize = plan
        .iter()
        .filter(|p| !p.label.starts_with("rho"))
        .map(|p| p.iters)
        .sum();
    let mut offset = 0;
    for phase in &mut plan {
        if phase.label.starts_with("rho") {
            phase.lr_total = phase.iters;
            phase.lr_offset = 0;
        } else {
            phase.lr_total = head_total;
            phase.lr_offset = offset;
            offset += phase.iters;
        }
    }
    plan
}

/// Attach the task loss for the sample's target to the prediction.
pub fn task_loss_node(tape: &mut Tape, pred: &TaskPred, target: &TaskTarget) -> Result<NodeId> {
    match (pred, target) {
        (TaskPred::Semantic(logits), TaskTarget::Semantic { labels, .. }) => {
            Ok(tape.semantic_loss(*logits, labels)?)
        }
        (TaskPred::Boundary(branches), TaskTarget::Boundary { edges }) => {
            Ok(boundary_loss(tape, branches, edges)?)
        }
        (TaskPred::Depth(pred), TaskTarget::Depth { log_depth }) => {
            Ok(tape.depth_loss(*pred, log_depth, DEPTH_GAMMA)?)
        }
        (TaskPred::Normal(pred), TaskTarget::Normal { normals }) => {
            Ok(tape.normal_loss(*pred, normals, NORMAL_WEIGHT)?)
        }
        _ => Err(HarnessError::Data(
            "prediction and target kinds do not match".into(),
        )),
    }
}

pub struct TrainOutput {
    pub checkpoint_dir: PathBuf,
    pub metrics_path: PathBuf,
    pub net: ToyNet,
}

pub fn train(cfg: &RunConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let data = gen_dataset(
        cfg.task,
        cfg.canvas_size(),
        cfg.train_images,
        cfg.seed,
        cfg.classes,
        Split::Train,
    )?;
    let mut net = ToyNet::build(cfg)?;
    let plan = build_plan(cfg);
    if plan.is_empty() {
        return Err(HarnessError::Config("stage plan contains no iterations".into()));
    }

    let gate_iters: usize = plan.iter().filter(|p| p.gated > 0).map(|p| p.iters).sum();
    let tau_schedule = if gate_iters > 0 {
        Some(TemperatureSchedule::new(cfg.tau_start, cfg.tau_end, gate_iters)?)
    } else {
        None
    };

    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ AUG_SEED_SALT);
    let mut gate_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ NOISE_SEED_SALT);
    let mut ema = vec![1.0f64; cfg.keep_blocks];

    let mut csv = String::from("iter,stage,lr,tau,task_loss,sparsity_loss,total_loss");
    for l in 0..cfg.keep_blocks {
        let _ = write!(csv, ",g_{l}");
    }
    csv.push('\n');

    let mut global_iter = 0usize;
    let mut gate_step = 0usize;
    for phase in &plan {
        net.enable_gating_up_to(phase.gated)?;
        if phase.mp {
            net.enable_multipool()?;
        }
        for it in 0..phase.iters {
            let lr = poly_lr_with(phase.lr_offset + it, phase.lr_total, cfg.base_lr, cfg.lr_power)?;
            let tau = match (&tau_schedule, phase.gated > 0) {
                (Some(s), true) => s.tau_at(gate_step)?,
                _ => cfg.tau_start,
            };

            let idx = data_rng.gen_range(0..data.samples.len());
            let dy = data_rng.gen_range(0..=2 * cfg.crop_margin);
            let dx = data_rng.gen_range(0..=2 * cfg.crop_margin);
            let flip = data_rng.gen_bool(0.5);
            let sample = crop_flip(&data.samples[idx], dy, dx, cfg.image_size, flip)?;

            let mut tape = Tape::new();
            let noise = phase.stochastic.then_some(&mut gate_rng);
            let fr = net.forward(&mut tape, &sample.image, tau, noise)?;
            let task = task_loss_node(&mut tape, &fr.pred, &sample.target)?;
            let loss = attach_sparsity(&mut tape, cfg, phase.rho, task, &fr, &ema)?;
            tape.backward(loss)?;

            let mut grads: std::collections::BTreeMap<String, Tensor> =
                std::collections::BTreeMap::new();
            for (name, node) in &fr.params {
                if let Some(g) = tape.grad(*node) {
                    grads.insert(name.clone(), g.clone());
                }
            }
            if cfg.clip_norm > 0.0 {
                let norm_sq: f64 = grads
                    .values()
                    .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
                    .sum();
                let norm = norm_sq.sqrt();
                if norm > cfg.clip_norm {
                    let scale = cfg.clip_norm / norm;
                    for g in grads.values_mut() {
                        for v in g.data_mut() {
                            *v *= scale;
                        }
                    }
                }
            }
            if std::env::var("PAG_DEBUG_GRADS").is_ok() {
                let mut worst = ("", 0.0f64);
                for (name, g) in &grads {
                    let m = g.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
                    if m > worst.1 {
                        worst = (name.as_str(), m);
                    }
                }
                eprintln!("iter {global_iter} loss {} worst-grad {} {:.3e}", tape.value(task).data()[0], worst.0, worst.1);
            }
            net.visit_params_mut(|name, tensor| {
                if std::env::var("PAG_FREEZE_GATES").is_ok() && name.contains(".gate.") {
                    return;
                }
                if let Some(g) = grads.get(name) {
                    for (v, gv) in tensor.data_mut().iter_mut().zip(g.data()) {
                        *v -= lr * gv;
                    }
                }
            });

            // Executed (sampled) densities feed the log; the controller EMA
            // tracks the deterministic decision that evaluation will use.
            let mut densities = vec![1.0f64; cfg.keep_blocks];
            for (slot, gate) in fr.gates.iter().enumerate() {
                densities[slot] = tape.value(gate.mask).mean();
                let det = tape.value(gate.density).data()[0];
                ema[slot] = 0.95 * ema[slot] + 0.05 * det;
            }
            let sparsity_value = if cfg.lambda > 0.0 && phase.gated > 0 && phase.rho < 1.0 {
                let kl_sum: f64 = densities[..phase.gated]
                    .iter()
                    .map(|&g| sparsity_kl_value(g, phase.rho).unwrap_or(0.0))
                    .sum();
                cfg.lambda * kl_sum
            } else {
                0.0
            };
            let task_v = tape.value(task).data()[0];
            let total_v = tape.value(loss).data()[0];
            let _ = write!(
                csv,
                "{},{},{},{},{},{},{}",
                global_iter, phase.label, lr, tau, task_v, sparsity_value, total_v
            );
            for d in &densities {
                let _ = write!(csv, ",{d}");
            }
            csv.push('\n');
            global_iter += 1;
            if phase.gated > 0 {
                gate_step += 1;
            }
            if global_iter % 100 == 0 {
                std::fs::write(cfg.out_dir.join("metrics.csv"), &csv)?;
            }
        }
        // Keep the partial log around if a later phase fails.
        std::fs::write(cfg.out_dir.join("metrics.csv"), &csv)?;
    }

    let metrics_path = cfg.out_dir.join("metrics.csv");
    std::fs::write(&metrics_path, csv)?;
    let checkpoint_dir = cfg.out_dir.join("checkpoint");
    net.save(&checkpoint_dir)?;
    Ok(TrainOutput { checkpoint_dir, metrics_path, net })
}

/// Add the density penalty to the task loss. Pixel-level and static gates
/// take the budget KL directly on their straight-through density nodes
/// (forward: the zero-noise hard density; backward: the tempered softmax
/// Jacobian). Whole-layer gates have no usable interior density in a single
/// binary draw, so they use a linear surrogate whose slope comes from the KL
/// at a running density estimate.
fn attach_sparsity(
    tape: &mut Tape,
    cfg: &RunConfig,
    rho: f64,
    task: NodeId,
    fr: &ForwardResult,
    ema: &[f64],
) -> Result<NodeId> {
    if cfg.lambda == 0.0 || rho >= 1.0 || fr.gates.is_empty() {
        return Ok(task);
    }
    match cfg.policy {
        RoutingPolicy::Pag | RoutingPolicy::StaticPerforation => {
            // The budget binds both views of each gate: the zero-noise
            // decision evaluation will use and the sampled mask actually
            // executed. Holding both at rho forces the per-pixel
            // probabilities to polarize instead of hovering near the
            // decision boundary.
            let deployed: Vec<NodeId> = fr.gates.iter().map(|g| g.density).collect();
            let executed: Vec<NodeId> = fr
                .gates
                .iter()
                .map(|g| {
                    g.sampled_density.ok_or_else(|| {
                        HarnessError::Config("pixel gate missing sampled density".into())
                    })
                })
                .collect::<Result<_>>()?;
            let half = SparsityBudget::new(rho, cfg.lambda / 2.0, cfg.sparsity_scope)?;
            let with_deployed = total_loss(tape, task, &deployed, &half)?;
            Ok(total_loss(tape, with_deployed, &executed, &half)?)
        }
        RoutingPolicy::LayerSkip => {
            let mut loss = task;
            let mean_ema: f64 =
                ema[..fr.gates.len()].iter().sum::<f64>() / fr.gates.len() as f64;
            for (slot, gate) in fr.gates.iter().enumerate() {
                let soft = gate.soft.ok_or_else(|| {
                    HarnessError::Config("layer-skip gate missing soft probability".into())
                })?;
                let anchor = match cfg.sparsity_scope {
                    SparsityScope::PerLayer => ema[slot],
                    SparsityScope::Total => mean_ema,
                };
                let coeff = cfg.lambda * kl_slope(rho, anchor.clamp(0.02, 0.98));
                let term = tape.scale(soft, coeff)?;
                loss = tape.add(loss, term)?;
            }
            Ok(loss)
        }
        _ => Ok(task),
    }
}
