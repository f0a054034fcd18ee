//! Objective functions: the per-layer sparsity budget, the combined loss,
//! and the four task losses (boundary, semantic, depth, surface normal).
//!
//! The task losses themselves are tape operations (see `Tape`); this module
//! supplies their host-side values, the class-balance weights, and the
//! budget composition that glues densities into the training objective.

use crate::error::{Error, Result};
use crate::tape::{clamp_density, kl_bernoulli, NodeId, Tape};
use crate::tensor::Tensor;

/// Relative weight of the quadratic vs. absolute depth error terms.
pub const DEPTH_GAMMA: f64 = 2.0;
/// Weight of the inverse-cosine term in the surface-normal loss.
pub const NORMAL_WEIGHT: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SparsityScope {
    PerLayer,
    Total,
}

impl SparsityScope {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "per-layer" => Ok(SparsityScope::PerLayer),
            "total" => Ok(SparsityScope::Total),
            other => Err(Error::InvalidArg(format!("unknown sparsity scope '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SparsityScope::PerLayer => "per-layer",
            SparsityScope::Total => "total",
        }
    }
}

/// Target density, penalty weight, and whether the budget binds each layer
/// individually or only their mean.
#[derive(Clone, Copy, Debug)]
pub struct SparsityBudget {
    pub rho: f64,
    pub lambda: f64,
    pub scope: SparsityScope,
}

impl SparsityBudget {
    pub fn new(rho: f64, lambda: f64, scope: SparsityScope) -> Result<Self> {
        if !(rho > 0.0 && rho < 1.0) {
            return Err(Error::InvalidArg(format!("rho must lie in (0,1), got {rho}")));
        }
        if lambda < 0.0 {
            return Err(Error::InvalidArg(format!("lambda must be >= 0, got {lambda}")));
        }
        Ok(SparsityBudget { rho, lambda, scope })
    }
}

/// Host-side value of KL(rho || g) with the density clamp applied.
pub fn sparsity_kl_value(g: f64, rho: f64) -> Result<f64> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::InvalidArg(format!("rho must lie in (0,1), got {rho}")));
    }
    Ok(kl_bernoulli(rho, clamp_density(g)))
}

/// Combine a task loss with the sparsity budget over per-layer densities.
/// lambda = 0 returns the task node untouched.
pub fn total_loss(
    tape: &mut Tape,
    task: NodeId,
    densities: &[NodeId],
    budget: &SparsityBudget,
) -> Result<NodeId> {
    if budget.lambda == 0.0 {
        return Ok(task);
    }
    if densities.is_empty() {
        return Err(Error::InvalidArg(
            "sparsity budget with lambda > 0 needs at least one gated layer".into(),
        ));
    }
    let penalty = match budget.scope {
        SparsityScope::PerLayer => {
            let mut acc: Option<NodeId> = None;
            for &g in densities {
                let kl = tape.sparsity_kl(g, budget.rho)?;
                acc = Some(match acc {
                    Some(prev) => tape.add(prev, kl)?,
                    None => kl,
                });
            }
            acc.expect("non-empty densities")
        }
        SparsityScope::Total => {
            let mut acc: Option<NodeId> = None;
            for &g in densities {
                acc = Some(match acc {
                    Some(prev) => tape.add(prev, g)?,
                    None => g,
                });
            }
            let mean = tape.scale(acc.expect("non-empty"), 1.0 / densities.len() as f64)?;
            tape.sparsity_kl(mean, budget.rho)?
        }
    };
    let weighted = tape.scale(penalty, budget.lambda)?;
    tape.add(task, weighted)
}

/// Class-balance weights for the boundary loss: beta_pos = |Y-| / |Y| and
/// beta_neg = 1 - beta_pos, computed per image from the target.
pub fn boundary_class_weights(target: &Tensor) -> Result<(f64, f64)> {
    if !target.is_binary() {
        return Err(Error::NonBinaryMask("boundary target".into()));
    }
    let total = target.len() as f64;
    let positives = target.data().iter().filter(|&&v| v == 1.0).count() as f64;
    let beta_pos = (total - positives) / total;
    Ok((beta_pos, 1.0 - beta_pos))
}

/// Class-balanced logistic loss summed over prediction branches.
pub fn boundary_loss(tape: &mut Tape, branches: &[NodeId], target: &Tensor) -> Result<NodeId> {
    if branches.is_empty() {
        return Err(Error::InvalidArg("boundary loss needs at least one branch".into()));
    }
    let (beta_pos, beta_neg) = boundary_class_weights(target)?;
    let mut acc: Option<NodeId> = None;
    for &logits in branches {
        let branch = tape.boundary_loss_branch(logits, target, beta_pos, beta_neg)?;
        acc = Some(match acc {
            Some(prev) => tape.add(prev, branch)?,
            None => branch,
        });
    }
    Ok(acc.expect("non-empty branches"))
}

/// Ground truth for one training sample.
#[derive(Clone, Debug)]
pub enum TaskTarget {
    /// Binary edge map.
    Boundary { edges: Tensor },
    /// Integer class indices with 255 marking ignored pixels.
    Semantic { labels: Tensor, classes: usize },
    /// Log-scale depth map.
    Depth { log_depth: Tensor },
    /// Unit-length normal vectors, 3xHxW.
    Normal { normals: Tensor },
}

impl TaskTarget {
    pub fn kind_name(&self) -> &'static str {
        match self {
            TaskTarget::Boundary { .. } => "boundary",
            TaskTarget::Semantic { .. } => "semantic",
            TaskTarget::Depth { .. } => "depth",
            TaskTarget::Normal { .. } => "normal",
        }
    }
}
