//! Dynamic-inference building blocks for per-pixel labeling at desk scale:
//! a dense f64 tensor with a recorded-tape reverse-mode autodiff engine,
//! perforated (mask-restricted) convolution, Gumbel straight-through gating,
//! gated bottleneck blocks with FLOP accounting, a per-pixel multi-scale
//! pooling selector, the four task losses with a sparsity budget, and the
//! panorama surface-normal rotation.

pub mod blocks;
pub mod conv;
pub mod error;
pub mod flops;
pub mod gating;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod multipool;
pub mod pano;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

pub use conv::{conv2d_forward, conv2d_perforated_forward, ConvSpec};
pub use gradcheck::grad_check;
pub use tape::{NodeId, NormMoments, Tape};

pub use blocks::{
    accumulate_ponder, layer_skip_block, pag_block, pag_block_forced, register_block,
    standard_block, static_perforation_block, BlockIds, BlockParams, GateHeadParams,
    GatedBlockOut, PonderMap, RoutingPolicy, SkipBlockOut,
};
pub use flops::{count_flops, count_flops_with_densities, predicted_ratio, FlopReport, NetworkCost};
pub use gating::{
    concrete_relax, gumbel_from_uniform, gumbel_sample, GateMask, TemperatureSchedule,
};
pub use losses::{
    boundary_class_weights, boundary_loss, sparsity_kl_value, total_loss, SparsityBudget,
    SparsityScope, TaskTarget, DEPTH_GAMMA, NORMAL_WEIGHT,
};
pub use multipool::{
    multipool, register_branch_set, MultiPoolOut, PoolBranchIds, PoolBranchSet, PoolMode,
    SelectionMask, DEFAULT_RATES,
};
pub use pano::{
    compare_canonical_choices, globals_to_locals, locals_to_globals, rotation_for_column,
    NormalMap,
};
