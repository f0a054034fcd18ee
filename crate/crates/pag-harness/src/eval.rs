//! Deterministic evaluation: zero gate noise, center crops, task metrics,
//! measured FLOP ratios, and ponder/selection map exports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use pag_core::blocks::accumulate_ponder;
use pag_core::gating::GateMask;
use pag_core::io::{pgm_bytes, write_ptsr};
use pag_core::losses::TaskTarget;
use pag_core::multipool::SelectionMask;
use pag_core::tape::Tape;
use pag_core::count_flops;

use crate::config::{MultiPoolKind, TaskKind};
use crate::dataset::{crop_flip, SyntheticDataset, IGNORE};
use crate::error::{HarnessError, Result};
use crate::model::{TaskPred, ToyNet};

const BOUNDARY_THRESHOLDS: usize = 19;

#[derive(Clone, Debug)]
pub struct EvalSummary {
    /// Aggregate metric values keyed by name.
    pub metrics: BTreeMap<String, f64>,
    /// Measured FLOPs of gated execution over the dense cost of this net.
    pub flop_ratio: f64,
    pub gated_flops: f64,
    pub dense_flops: f64,
    /// Mean per-layer gate density over the evaluation set (gated layers only).
    pub layer_densities: Vec<f64>,
}

impl EvalSummary {
    /// Higher-is-better headline metric for the task.
    pub fn primary_metric(&self, task: TaskKind) -> (&'static str, f64) {
        match task {
            TaskKind::Semantic => ("iou", self.metrics["iou"]),
            TaskKind::Boundary => ("f_ods", self.metrics["f_ods"]),
            TaskKind::Depth => ("delta1", self.metrics["delta1"]),
            TaskKind::Normal => (
                "neg_mean_angular_error",
                -self.metrics["mean_angular_error_deg"],
            ),
        }
    }
}

struct SemanticAgg {
    classes: usize,
    inter: Vec<f64>,
    pred: Vec<f64>,
    targ: Vec<f64>,
    correct: f64,
    valid: f64,
}

impl SemanticAgg {
    fn new(classes: usize) -> Self {
        SemanticAgg {
            classes,
            inter: vec![0.0; classes],
            pred: vec![0.0; classes],
            targ: vec![0.0; classes],
            correct: 0.0,
            valid: 0.0,
        }
    }

    fn add(&mut self, pred_class: usize, label: f64) {
        if label == IGNORE {
            return;
        }
        let t = label as usize;
        self.valid += 1.0;
        self.pred[pred_class] += 1.0;
        self.targ[t] += 1.0;
        if pred_class == t {
            self.correct += 1.0;
            self.inter[t] += 1.0;
        }
    }

    fn iou(&self) -> f64 {
        let mut total = 0.0;
        let mut present = 0.0;
        for c in 0..self.classes {
            let union = self.pred[c] + self.targ[c] - self.inter[c];
            if union > 0.0 {
                total += self.inter[c] / union;
                present += 1.0;
            }
        }
        if present > 0.0 {
            total / present
        } else {
            0.0
        }
    }

    fn pixel_acc(&self) -> f64 {
        if self.valid > 0.0 {
            self.correct / self.valid
        } else {
            0.0
        }
    }
}

#[derive(Clone, Copy, Default)]
struct BinCounts {
    tp: f64,
    fp: f64,
    fn_: f64,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Evaluate a network on a dataset. Gates are deterministic (zero noise).
/// When `out_dir` is given, writes eval.csv plus per-image ponder and
/// multi-pool selection maps.
pub fn evaluate(net: &ToyNet, data: &SyntheticDataset, out_dir: Option<&Path>) -> Result<EvalSummary> {
    if data.kind != net.cfg.task {
        return Err(HarnessError::Data(format!(
            "dataset kind {} does not match checkpoint task {}",
            data.kind.name(),
            net.cfg.task.name()
        )));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let size = net.cfg.image_size;
    let cost_model = net.network_cost();

    let mut semantic = SemanticAgg::new(net.cfg.classes);
    let mut boundary = vec![BinCounts::default(); BOUNDARY_THRESHOLDS];
    let mut depth_ok = [0.0f64; 3];
    let mut depth_total = 0.0f64;
    let mut normal_err_sum = 0.0f64;
    let mut normal_count = 0.0f64;

    let mut dense_total = 0.0;
    let mut gated_total = 0.0;
    let mut density_sum: Vec<f64> = Vec::new();
    let mut per_image_rows: Vec<(usize, f64, f64)> = Vec::new();

    for (index, raw) in data.samples.iter().enumerate() {
        let canvas = raw.image.dims()[1];
        if canvas < size {
            return Err(HarnessError::Data(format!(
                "canvas {canvas} smaller than crop {size}"
            )));
        }
        let off = (canvas - size) / 2;
        let sample = crop_flip(raw, off, off, size, false)?;

        let mut tape = Tape::new();
        let fr = net.forward(&mut tape, &sample.image, net.cfg.tau_end, None)?;

        // Collect per-layer and multi-pool masks for FLOP accounting.
        let mut masks: BTreeMap<String, GateMask> = BTreeMap::new();
        let mut spatial_masks: Vec<GateMask> = Vec::new();
        for gate in &fr.gates {
            let mask = GateMask::from_tensor(tape.value(gate.mask).clone())?;
            if mask.dims() == [net.feature_size(), net.feature_size()] {
                spatial_masks.push(mask.clone());
            }
            masks.insert(gate.name.clone(), mask);
        }
        let mut selection_mask = None;
        if let Some(sel) = fr.selection {
            if net.cfg.multipool == MultiPoolKind::Hard {
                let sel_mask = SelectionMask::from_tensor(tape.value(sel).clone())?;
                if let Some(mp_rates) = mp_rates(net) {
                    for (i, rate) in mp_rates.iter().enumerate() {
                        if *rate == 0 {
                            continue;
                        }
                        masks.insert(
                            format!("multipool.branch{rate}.mask"),
                            sel_mask.branch_mask(i)?,
                        );
                    }
                }
                selection_mask = Some(sel_mask);
            }
        }
        let report = count_flops(&cost_model, &masks, Some(net.cfg.rho))?;
        dense_total += report.dense_total;
        gated_total += report.gated_total;
        if density_sum.is_empty() {
            density_sum = vec![0.0; fr.gates.len()];
        }
        for (slot, gate) in fr.gates.iter().enumerate() {
            density_sum[slot] += tape.value(gate.density).data()[0];
        }

        // Task metrics.
        let image_metric;
        match (&fr.pred, &sample.target) {
            (TaskPred::Semantic(logits), TaskTarget::Semantic { labels, .. }) => {
                let lv = tape.value(*logits);
                let mut img_agg = SemanticAgg::new(net.cfg.classes);
                for y in 0..size {
                    for x in 0..size {
                        let mut best = 0;
                        let mut best_v = lv.get3(0, y, x);
                        for c in 1..net.cfg.classes {
                            let v = lv.get3(c, y, x);
                            if v > best_v {
                                best_v = v;
                                best = c;
                            }
                        }
                        let lab = labels.get2(y, x);
                        semantic.add(best, lab);
                        img_agg.add(best, lab);
                    }
                }
                image_metric = img_agg.iou();
            }
            (TaskPred::Boundary(branches), TaskTarget::Boundary { edges }) => {
                let fused = *branches.last().expect("boundary nets have branches");
                let lv = tape.value(fused);
                let mut img_tp = 0.0;
                let mut img_pos = 0.0;
                for y in 0..size {
                    for x in 0..size {
                        let prob = sigmoid(lv.get3(0, y, x));
                        let positive = edges.get2(y, x) == 1.0;
                        if positive {
                            img_pos += 1.0;
                        }
                        if positive && prob >= 0.5 {
                            img_tp += 1.0;
                        }
                        for (t, counts) in boundary.iter_mut().enumerate() {
                            let thr = (t as f64 + 1.0) * 0.05;
                            match (prob >= thr, positive) {
                                (true, true) => counts.tp += 1.0,
                                (true, false) => counts.fp += 1.0,
                                (false, true) => counts.fn_ += 1.0,
                                (false, false) => {}
                            }
                        }
                    }
                }
                image_metric = if img_pos > 0.0 { img_tp / img_pos } else { 1.0 };
            }
            (TaskPred::Depth(pred), TaskTarget::Depth { log_depth }) => {
                let pv = tape.value(*pred);
                let mut ok = 0.0;
                for (p, t) in pv.data().iter().zip(log_depth.data()) {
                    let gap = (p - t).abs();
                    depth_total += 1.0;
                    for (k, slot) in depth_ok.iter_mut().enumerate() {
                        if gap < 1.25f64.ln() * (k as f64 + 1.0) {
                            *slot += 1.0;
                        }
                    }
                    if gap < 1.25f64.ln() {
                        ok += 1.0;
                    }
                }
                image_metric = ok / pv.len() as f64;
            }
            (TaskPred::Normal(pred), TaskTarget::Normal { normals }) => {
                let pv = tape.value(*pred);
                let mut err_sum = 0.0;
                for y in 0..size {
                    for x in 0..size {
                        let v = [pv.get3(0, y, x), pv.get3(1, y, x), pv.get3(2, y, x)];
                        let norm =
                            (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-12);
                        let dot: f64 = (0..3)
                            .map(|c| v[c] / norm * normals.get3(c, y, x))
                            .sum();
                        let err = dot.clamp(-1.0, 1.0).acos().to_degrees();
                        err_sum += err;
                    }
                }
                normal_err_sum += err_sum;
                normal_count += (size * size) as f64;
                image_metric = err_sum / (size * size) as f64;
            }
            _ => return Err(HarnessError::Data("prediction/target kind mismatch".into())),
        }
        per_image_rows.push((index, image_metric, report.ratio()));

        if let Some(dir) = out_dir {
            if !spatial_masks.is_empty() {
                let ponder = accumulate_ponder(&spatial_masks)?;
                let h = ponder.values.dims()[0];
                let w = ponder.values.dims()[1];
                let bytes = pgm_bytes(w, h, &ponder.to_pgm_pixels())?;
                std::fs::write(dir.join(format!("ponder_{index:03}.pgm")), bytes)?;
            }
            if let Some(sel) = &selection_mask {
                let dims = sel.as_tensor().dims().to_vec();
                let bytes = pgm_bytes(dims[2], dims[1], &sel.to_pgm_pixels())?;
                std::fs::write(dir.join(format!("selection_{index:03}.pgm")), bytes)?;
            }
            // Prediction snapshot for offline inspection.
            if index == 0 {
                if let TaskPred::Semantic(logits) = &fr.pred {
                    write_ptsr(&dir.join("logits_000.ptsr"), tape.value(*logits))?;
                }
            }
        }
    }

    let n = data.samples.len() as f64;
    let mut metrics = BTreeMap::new();
    match net.cfg.task {
        TaskKind::Semantic => {
            metrics.insert("iou".into(), semantic.iou());
            metrics.insert("pixel_acc".into(), semantic.pixel_acc());
        }
        TaskKind::Boundary => {
            let mut best = 0.0f64;
            for counts in &boundary {
                let p_den = counts.tp + counts.fp;
                let r_den = counts.tp + counts.fn_;
                if p_den == 0.0 || r_den == 0.0 {
                    continue;
                }
                let p = counts.tp / p_den;
                let r = counts.tp / r_den;
                if p + r > 0.0 {
                    best = best.max(2.0 * p * r / (p + r));
                }
            }
            metrics.insert("f_ods".into(), best);
        }
        TaskKind::Depth => {
            for (k, ok) in depth_ok.iter().enumerate() {
                metrics.insert(format!("delta{}", k + 1), ok / depth_total.max(1.0));
            }
        }
        TaskKind::Normal => {
            metrics.insert(
                "mean_angular_error_deg".into(),
                normal_err_sum / normal_count.max(1.0),
            );
        }
    }

    let flop_ratio = if dense_total > 0.0 { gated_total / dense_total } else { 1.0 };
    let layer_densities: Vec<f64> = density_sum.iter().map(|s| s / n).collect();

    if let Some(dir) = out_dir {
        let mut csv = String::from("index,metric,flop_ratio\n");
        for (index, metric, ratio) in &per_image_rows {
            let _ = writeln!(csv, "{index},{metric},{ratio}");
        }
        let mean_metric: f64 =
            per_image_rows.iter().map(|(_, m, _)| m).sum::<f64>() / n;
        let _ = writeln!(csv, "mean,{mean_metric},{flop_ratio}");
        std::fs::write(dir.join("eval.csv"), csv)?;
    }

    Ok(EvalSummary {
        metrics,
        flop_ratio,
        gated_flops: gated_total / n,
        dense_flops: dense_total / n,
        layer_densities,
    })
}

fn mp_rates(net: &ToyNet) -> Option<Vec<usize>> {
    if net.mp_active {
        Some(net.cfg.multipool_rates.clone())
    } else {
        None
    }
}
