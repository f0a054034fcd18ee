//! Plain-text run configuration: `key = value` lines, `#` comments, unknown
//! keys rejected. The same format round-trips into checkpoint directories so
//! evaluation can rebuild the architecture.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use pag_core::losses::SparsityScope;
use pag_core::RoutingPolicy;

use crate::error::{HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Semantic,
    Boundary,
    Depth,
    Normal,
}

impl TaskKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "shapes-semantic" => Ok(TaskKind::Semantic),
            "shapes-boundary" => Ok(TaskKind::Boundary),
            "ramp-depth" => Ok(TaskKind::Depth),
            "facet-normal" => Ok(TaskKind::Normal),
            other => Err(HarnessError::Config(format!("unknown task kind '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Semantic => "shapes-semantic",
            TaskKind::Boundary => "shapes-boundary",
            TaskKind::Depth => "ramp-depth",
            TaskKind::Normal => "facet-normal",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MultiPoolKind {
    None,
    Hard,
    Soft,
}

impl MultiPoolKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(MultiPoolKind::None),
            "hard" => Ok(MultiPoolKind::Hard),
            "soft" => Ok(MultiPoolKind::Soft),
            other => Err(HarnessError::Config(format!("unknown multipool mode '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MultiPoolKind::None => "none",
            MultiPoolKind::Hard => "hard",
            MultiPoolKind::Soft => "soft",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageKind {
    Base,
    Multipool,
    Pag,
    Rho,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stage {
    pub kind: StageKind,
    pub iters: usize,
}

fn parse_stages(s: &str) -> Result<Vec<Stage>> {
    let mut out = Vec::new();
    for part in s.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let (name, iters) = part
            .split_once(':')
            .ok_or_else(|| HarnessError::Config(format!("stage '{part}' is not name:iters")))?;
        let kind = match name.trim() {
            "base" => StageKind::Base,
            "multipool" => StageKind::Multipool,
            "pag" => StageKind::Pag,
            "rho" => StageKind::Rho,
            other => return Err(HarnessError::Config(format!("unknown stage '{other}'"))),
        };
        let iters: usize = iters
            .trim()
            .parse()
            .map_err(|_| HarnessError::Config(format!("bad iteration count in '{part}'")))?;
        out.push(Stage { kind, iters });
    }
    if out.is_empty() {
        return Err(HarnessError::Config("stage list is empty".into()));
    }
    Ok(out)
}

fn stages_to_string(stages: &[Stage]) -> String {
    stages
        .iter()
        .map(|s| {
            let name = match s.kind {
                StageKind::Base => "base",
                StageKind::Multipool => "multipool",
                StageKind::Pag => "pag",
                StageKind::Rho => "rho",
            };
            format!("{name}:{}", s.iters)
        })
        .collect::<Vec<_>>()
        .join(",")
}

/// Complete description of one training run.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub task: TaskKind,
    pub out_dir: PathBuf,
    /// Training crop size (square, even).
    pub image_size: usize,
    pub crop_margin: usize,
    pub classes: usize,
    pub depth: usize,
    /// Blocks retained under the truncated policy.
    pub keep_blocks: usize,
    pub channels: usize,
    pub bottleneck: usize,
    pub policy: RoutingPolicy,
    /// Target density; 1.0 disables the gating loss entirely.
    pub rho: f64,
    pub lambda: f64,
    pub sparsity_scope: SparsityScope,
    pub dense_f3: bool,
    pub multipool: MultiPoolKind,
    pub multipool_rates: Vec<usize>,
    pub tau_start: f64,
    pub tau_end: f64,
    pub base_lr: f64,
    pub lr_power: f64,
    /// Global-norm gradient clip; 0 disables clipping.
    pub clip_norm: f64,
    pub stages: Vec<Stage>,
    pub train_images: usize,
    pub eval_images: usize,
    pub seed: u64,
    /// Budgets swept by the compare command.
    pub budgets: Vec<f64>,
    /// Checkpoint-state key: blocks already gated (written by the trainer).
    pub gated_blocks: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: TaskKind::Semantic,
            out_dir: PathBuf::from("runs/out"),
            image_size: 32,
            crop_margin: 4,
            classes: 4,
            depth: 4,
            keep_blocks: 4,
            channels: 16,
            bottleneck: 2,
            policy: RoutingPolicy::Dense,
            rho: 1.0,
            lambda: 1e-4,
            sparsity_scope: SparsityScope::PerLayer,
            dense_f3: false,
            multipool: MultiPoolKind::None,
            multipool_rates: vec![0, 1, 2, 4, 6, 8, 10],
            tau_start: 1.0,
            tau_end: 0.1,
            base_lr: 2e-4,
            lr_power: 0.9,
            clip_norm: 4000.0,
            stages: vec![
                Stage { kind: StageKind::Base, iters: 300 },
                Stage { kind: StageKind::Multipool, iters: 200 },
                Stage { kind: StageKind::Pag, iters: 240 },
                Stage { kind: StageKind::Rho, iters: 200 },
            ],
            train_images: 40,
            eval_images: 12,
            seed: 7,
            budgets: vec![0.5, 0.7, 0.9],
            gated_blocks: None,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut keep_blocks_set = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                HarnessError::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad = |what: &str| HarnessError::Config(format!("line {}: bad {what} '{value}'", lineno + 1));
            match key {
                "task" => cfg.task = TaskKind::parse(value)?,
                "out_dir" => cfg.out_dir = PathBuf::from(value),
                "image_size" => cfg.image_size = value.parse().map_err(|_| bad("image_size"))?,
                "crop_margin" => cfg.crop_margin = value.parse().map_err(|_| bad("crop_margin"))?,
                "classes" => cfg.classes = value.parse().map_err(|_| bad("classes"))?,
                "depth" => cfg.depth = value.parse().map_err(|_| bad("depth"))?,
                "keep_blocks" => {
                    cfg.keep_blocks = value.parse().map_err(|_| bad("keep_blocks"))?;
                    keep_blocks_set = true;
                }
                "channels" => cfg.channels = value.parse().map_err(|_| bad("channels"))?,
                "bottleneck" => cfg.bottleneck = value.parse().map_err(|_| bad("bottleneck"))?,
                "policy" => cfg.policy = RoutingPolicy::parse(value)?,
                "rho" => cfg.rho = value.parse().map_err(|_| bad("rho"))?,
                "lambda" => cfg.lambda = value.parse().map_err(|_| bad("lambda"))?,
                "sparsity_scope" => cfg.sparsity_scope = SparsityScope::parse(value)?,
                "dense_f3" => cfg.dense_f3 = value.parse().map_err(|_| bad("dense_f3"))?,
                "multipool" => cfg.multipool = MultiPoolKind::parse(value)?,
                "multipool_rates" => {
                    cfg.multipool_rates = value
                        .split(',')
                        .map(|v| v.trim().parse())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad("multipool_rates"))?;
                }
                "tau_start" => cfg.tau_start = value.parse().map_err(|_| bad("tau_start"))?,
                "tau_end" => cfg.tau_end = value.parse().map_err(|_| bad("tau_end"))?,
                "base_lr" => cfg.base_lr = value.parse().map_err(|_| bad("base_lr"))?,
                "lr_power" => cfg.lr_power = value.parse().map_err(|_| bad("lr_power"))?,
                "clip_norm" => cfg.clip_norm = value.parse().map_err(|_| bad("clip_norm"))?,
                "stages" => cfg.stages = parse_stages(value)?,
                "train_images" => cfg.train_images = value.parse().map_err(|_| bad("train_images"))?,
                "eval_images" => cfg.eval_images = value.parse().map_err(|_| bad("eval_images"))?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad("seed"))?,
                "budgets" => {
                    cfg.budgets = value
                        .split(',')
                        .map(|v| v.trim().parse())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad("budgets"))?;
                }
                "gated_blocks" => {
                    cfg.gated_blocks = Some(value.parse().map_err(|_| bad("gated_blocks"))?)
                }
                other => {
                    return Err(HarnessError::Config(format!(
                        "line {}: unknown key '{other}'",
                        lineno + 1
                    )))
                }
            }
        }
        if !keep_blocks_set {
            cfg.keep_blocks = cfg.depth;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::parse(&text)?;
        cfg.apply_seed_env()?;
        Ok(cfg)
    }

    /// PAG_SEED overrides the configured seed when set.
    pub fn apply_seed_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var("PAG_SEED") {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| HarnessError::Config(format!("PAG_SEED '{v}' is not a u64")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(HarnessError::Config(msg));
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return err(format!("rho must lie in (0, 1], got {}", self.rho));
        }
        if self.lambda < 0.0 {
            return err(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if self.image_size == 0 || self.image_size % 2 != 0 {
            return err(format!("image_size must be a positive even number, got {}", self.image_size));
        }
        if self.classes < 2 || self.classes > 8 {
            return err(format!("classes must lie in [2, 8], got {}", self.classes));
        }
        if self.depth == 0 {
            return err("depth must be at least 1".into());
        }
        if self.keep_blocks == 0 || self.keep_blocks > self.depth {
            return err(format!(
                "keep_blocks {} outside [1, depth={}]",
                self.keep_blocks, self.depth
            ));
        }
        if self.bottleneck == 0 || self.channels % self.bottleneck != 0 {
            return err(format!(
                "bottleneck {} must divide channels {}",
                self.bottleneck, self.channels
            ));
        }
        if !(self.tau_end > 0.0 && self.tau_start >= self.tau_end) {
            return err(format!(
                "need tau_start >= tau_end > 0, got {} and {}",
                self.tau_start, self.tau_end
            ));
        }
        if self.train_images == 0 || self.eval_images == 0 {
            return err("train_images and eval_images must be positive".into());
        }
        if self.multipool != MultiPoolKind::None && self.multipool_rates.is_empty() {
            return err("multipool enabled but no rates given".into());
        }
        Ok(())
    }

    /// Serialize back to the `key = value` format.
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "task = {}", self.task.name());
        let _ = writeln!(s, "out_dir = {}", self.out_dir.display());
        let _ = writeln!(s, "image_size = {}", self.image_size);
        let _ = writeln!(s, "crop_margin = {}", self.crop_margin);
        let _ = writeln!(s, "classes = {}", self.classes);
        let _ = writeln!(s, "depth = {}", self.depth);
        let _ = writeln!(s, "keep_blocks = {}", self.keep_blocks);
        let _ = writeln!(s, "channels = {}", self.channels);
        let _ = writeln!(s, "bottleneck = {}", self.bottleneck);
        let _ = writeln!(s, "policy = {}", self.policy.name());
        let _ = writeln!(s, "rho = {}", self.rho);
        let _ = writeln!(s, "lambda = {}", self.lambda);
        let _ = writeln!(s, "sparsity_scope = {}", self.sparsity_scope.name());
        let _ = writeln!(s, "dense_f3 = {}", self.dense_f3);
        let _ = writeln!(s, "multipool = {}", self.multipool.name());
        let rates: Vec<String> = self.multipool_rates.iter().map(|r| r.to_string()).collect();
        let _ = writeln!(s, "multipool_rates = {}", rates.join(","));
        let _ = writeln!(s, "tau_start = {}", self.tau_start);
        let _ = writeln!(s, "tau_end = {}", self.tau_end);
        let _ = writeln!(s, "base_lr = {}", self.base_lr);
        let _ = writeln!(s, "lr_power = {}", self.lr_power);
        let _ = writeln!(s, "clip_norm = {}", self.clip_norm);
        let _ = writeln!(s, "stages = {}", stages_to_string(&self.stages));
        let _ = writeln!(s, "train_images = {}", self.train_images);
        let _ = writeln!(s, "eval_images = {}", self.eval_images);
        let _ = writeln!(s, "seed = {}", self.seed);
        let budgets: Vec<String> = self.budgets.iter().map(|b| b.to_string()).collect();
        let _ = writeln!(s, "budgets = {}", budgets.join(","));
        if let Some(g) = self.gated_blocks {
            let _ = writeln!(s, "gated_blocks = {g}");
        }
        s
    }

    /// Canvas size produced by the generators: crop size plus both margins.
    pub fn canvas_size(&self) -> usize {
        self.image_size + 2 * self.crop_margin
    }

    /// Ladder of decreasing densities ending at the target rho.
    pub fn rho_ladder(&self) -> Vec<f64> {
        if self.rho >= 1.0 {
            return vec![1.0];
        }
        let mut ladder: Vec<f64> = [0.9, 0.7, 0.5]
            .iter()
            .copied()
            .filter(|&r| r > self.rho + 1e-9)
            .collect();
        if ladder.is_empty() || self.rho > ladder[0] {
            ladder.clear();
        }
        ladder.push(self.rho);
        ladder
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_roundtrip_and_comments() {
        let text = "\n# a comment\ntask = ramp-depth\nrho = 0.7  # trailing comment\npolicy = pag\nstages = base:10,pag:20\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.task, TaskKind::Depth);
        assert_eq!(cfg.rho, 0.7);
        assert_eq!(cfg.policy, RoutingPolicy::Pag);
        assert_eq!(cfg.stages.len(), 2);
        let back = RunConfig::parse(&cfg.to_config_string()).unwrap();
        assert_eq!(back.rho, cfg.rho);
        assert_eq!(back.task, cfg.task);
        assert_eq!(back.stages, cfg.stages);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse("learning_rate = 0.1\n").unwrap_err();
        assert!(matches!(err, HarnessError::Config(_)));
    }

    #[test]
    fn invariants_are_enforced() {
        assert!(RunConfig::parse("rho = 0.0\n").is_err());
        assert!(RunConfig::parse("rho = 1.5\n").is_err());
        assert!(RunConfig::parse("image_size = 31\n").is_err());
        assert!(RunConfig::parse("depth = 2\nkeep_blocks = 3\n").is_err());
    }

    #[test]
    fn rho_ladder_steps_down_to_target() {
        let mut cfg = RunConfig::default();
        cfg.rho = 0.5;
        assert_eq!(cfg.rho_ladder(), vec![0.9, 0.7, 0.5]);
        cfg.rho = 0.7;
        assert_eq!(cfg.rho_ladder(), vec![0.9, 0.7]);
        cfg.rho = 0.8;
        assert_eq!(cfg.rho_ladder(), vec![0.9, 0.8]);
        cfg.rho = 0.95;
        assert_eq!(cfg.rho_ladder(), vec![0.95]);
        cfg.rho = 1.0;
        assert_eq!(cfg.rho_ladder(), vec![1.0]);
    }
}
