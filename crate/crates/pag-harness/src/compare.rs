//! Policy comparison at matched compute budgets: dense reference, truncated
//! stacks, whole-layer skipping, static perforation, and per-pixel gating,
//! one row per policy and budget.

use std::fmt::Write as _;
use std::path::PathBuf;

use pag_core::{predicted_ratio, RoutingPolicy};

use crate::config::{RunConfig, TaskKind};
use crate::dataset::{gen_dataset, Split};
use crate::error::Result;
use crate::eval::evaluate;
use crate::train::train;

#[derive(Clone, Debug)]
pub struct CompareRow {
    pub policy: String,
    pub rho: f64,
    pub requested_ratio: f64,
    pub measured_ratio: f64,
    pub metric_name: String,
    pub metric: f64,
    pub note: String,
}

pub struct CompareOutput {
    pub rows: Vec<CompareRow>,
    pub csv_path: PathBuf,
}

fn run_once(cfg: &RunConfig) -> Result<(f64, f64, &'static str, f64)> {
    let out = train(cfg)?;
    let eval_data = gen_dataset(
        cfg.task,
        cfg.canvas_size(),
        cfg.eval_images,
        cfg.seed,
        cfg.classes,
        Split::Eval,
    )?;
    let summary = evaluate(&out.net, &eval_data, None)?;
    let (name, value) = summary.primary_metric(cfg.task);
    Ok((summary.gated_flops, summary.dense_flops, name, value))
}

/// Dense FLOPs of the full (untruncated) dense-policy architecture; every
/// measured budget is expressed against this reference.
fn full_dense_flops(template: &RunConfig) -> Result<f64> {
    let mut cfg = template.clone();
    cfg.policy = RoutingPolicy::Dense;
    cfg.keep_blocks = cfg.depth;
    let net = crate::model::ToyNet::build(&cfg)?;
    let cost = net.network_cost();
    Ok(pag_core::count_flops_with_densities(&cost, &Default::default(), None)?.dense_total)
}

/// Budget each dynamic policy targets at density rho, from the gated cost model.
fn budget_ratio(template: &RunConfig, rho: f64) -> Result<f64> {
    let mut cfg = template.clone();
    cfg.policy = RoutingPolicy::Pag;
    cfg.rho = rho.min(0.999_999);
    cfg.gated_blocks = Some(cfg.depth);
    let mut net = crate::model::ToyNet::build(&cfg)?;
    net.enable_multipool()?;
    Ok(predicted_ratio(&net.network_cost(), rho)?)
}

/// Blocks to keep so a truncated stack lands nearest the requested budget.
fn nearest_truncation(template: &RunConfig, want_ratio: f64) -> Result<(usize, f64)> {
    let full = full_dense_flops(template)?;
    let mut best = (template.depth, 1.0);
    let mut best_gap = f64::INFINITY;
    for keep in 1..=template.depth {
        let mut cfg = template.clone();
        cfg.policy = RoutingPolicy::Truncated;
        cfg.keep_blocks = keep;
        let net = crate::model::ToyNet::build(&cfg)?;
        let cost = net.network_cost();
        let total =
            pag_core::count_flops_with_densities(&cost, &Default::default(), None)?.dense_total;
        let ratio = total / full;
        let gap = (ratio - want_ratio).abs();
        if gap < best_gap {
            best_gap = gap;
            best = (keep, ratio);
        }
    }
    Ok(best)
}

/// Train and evaluate every policy at every configured budget.
pub fn compare_policies(template: &RunConfig) -> Result<CompareOutput> {
    std::fs::create_dir_all(&template.out_dir)?;
    let full_dense = full_dense_flops(template)?;
    let metric_label = match template.task {
        TaskKind::Semantic => "iou",
        TaskKind::Boundary => "f_ods",
        TaskKind::Depth => "delta1",
        TaskKind::Normal => "neg_mean_angular_error",
    };
    let mut rows = Vec::new();

    // Dense reference row.
    {
        let mut cfg = template.clone();
        cfg.policy = RoutingPolicy::Dense;
        cfg.rho = 1.0;
        cfg.lambda = 0.0;
        cfg.keep_blocks = cfg.depth;
        cfg.out_dir = template.out_dir.join("runs").join("dense");
        let (gated, _dense, name, value) = run_once(&cfg)?;
        rows.push(CompareRow {
            policy: "dense".into(),
            rho: 1.0,
            requested_ratio: 1.0,
            measured_ratio: gated / full_dense,
            metric_name: name.into(),
            metric: value,
            note: String::new(),
        });
    }

    for &rho in &template.budgets {
        let want_ratio = budget_ratio(template, rho)?;
        for policy in [
            RoutingPolicy::Truncated,
            RoutingPolicy::LayerSkip,
            RoutingPolicy::StaticPerforation,
            RoutingPolicy::Pag,
        ] {
            let mut cfg = template.clone();
            cfg.policy = policy;
            cfg.rho = rho;
            cfg.keep_blocks = cfg.depth;
            let mut note = String::new();
            if policy == RoutingPolicy::Truncated {
                let (keep, achieved) = nearest_truncation(template, want_ratio)?;
                cfg.keep_blocks = keep;
                note = format!("nearest achievable budget {achieved:.4} with {keep} blocks");
            }
            if policy == RoutingPolicy::StaticPerforation {
                let side = cfg.image_size;
                note = format!("fixed input size {side}x{side}");
            }
            cfg.out_dir = template
                .out_dir
                .join("runs")
                .join(format!("{}_rho{rho}", policy.name()));
            let (gated, _dense, name, value) = run_once(&cfg)?;
            rows.push(CompareRow {
                policy: policy.name().into(),
                rho,
                requested_ratio: want_ratio,
                measured_ratio: gated / full_dense,
                metric_name: name.into(),
                metric: value,
                note,
            });
        }
    }

    let mut csv = format!("policy,rho,requested_ratio,measured_ratio,{metric_label},note\n");
    for row in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            row.policy, row.rho, row.requested_ratio, row.measured_ratio, row.metric, row.note
        );
    }
    let csv_path = template.out_dir.join("compare.csv");
    std::fs::write(&csv_path, csv)?;
    Ok(CompareOutput { rows, csv_path })
}
