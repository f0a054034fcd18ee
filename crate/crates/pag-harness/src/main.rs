use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pag_core::io::{ppm_bytes, read_ptsr, write_ptsr};
use pag_core::pano::{globals_to_locals, NormalMap};
use pag_core::Tape;

use pag_harness::compare::compare_policies;
use pag_harness::config::RunConfig;
use pag_harness::dataset::{gen_dataset, Split};
use pag_harness::error::{HarnessError, Result};
use pag_harness::eval::evaluate;
use pag_harness::model::ToyNet;
use pag_harness::train::train;
use pag_harness::TaskKind;

/// Dynamic-inference engine for per-pixel labeling with learned
/// per-pixel computation routing.
#[derive(Parser)]
#[command(name = "pag", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file (key = value lines).
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on a freshly generated dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset spec: kind=<task>[,n=<count>][,seed=<u64>]
        #[arg(long)]
        data: String,
        /// Output directory (defaults to <checkpoint>/eval).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every routing policy at the configured budgets.
    Compare {
        #[arg(long)]
        config: PathBuf,
    },
    /// Render the ponder map of one image through a checkpoint.
    Ponder {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input image as a PTSR tensor, 3 x H x W.
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rotate world-fixed panorama normals into the camera-relative frame.
    PanoNormals {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        canonical_column: usize,
        #[arg(long)]
        out: PathBuf,
        /// Optional false-color PPM rendering of the result.
        #[arg(long)]
        viz: Option<PathBuf>,
    },
}

/// Spec format: kind=<task>[,n=<count>][,seed=<u64>]
struct DataSpec {
    kind: TaskKind,
    n: usize,
    seed: u64,
}

fn parse_data_spec(spec: &str) -> Result<DataSpec> {
    let mut kind = None;
    let mut n = 8usize;
    let mut seed = 0u64;
    for part in spec.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| HarnessError::Config(format!("data spec '{part}' is not key=value")))?;
        match key.trim() {
            "kind" => kind = Some(TaskKind::parse(value.trim())?),
            "n" => {
                n = value
                    .trim()
                    .parse()
                    .map_err(|_| HarnessError::Config(format!("bad n '{value}'")))?
            }
            "seed" => {
                seed = value
                    .trim()
                    .parse()
                    .map_err(|_| HarnessError::Config(format!("bad seed '{value}'")))?
            }
            other => {
                return Err(HarnessError::Config(format!(
                    "unknown data spec key '{other}'"
                )))
            }
        }
    }
    let kind = kind.ok_or_else(|| HarnessError::Config("data spec needs kind=<task>".into()))?;
    if let Ok(v) = std::env::var("PAG_SEED") {
        seed = v
            .trim()
            .parse()
            .map_err(|_| HarnessError::Config(format!("PAG_SEED '{v}' is not a u64")))?;
    }
    Ok(DataSpec { kind, n, seed })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config } => {
            let cfg = RunConfig::load(&config)?;
            let out = train(&cfg)?;
            println!("checkpoint: {}", out.checkpoint_dir.display());
            println!("metrics: {}", out.metrics_path.display());
        }
        Command::Eval { checkpoint, data, out } => {
            let net = ToyNet::load(&checkpoint)?;
            let spec = parse_data_spec(&data)?;
            if spec.kind != net.cfg.task {
                return Err(HarnessError::Config(format!(
                    "checkpoint was trained for {}, data spec asks for {}",
                    net.cfg.task.name(),
                    spec.kind.name()
                )));
            }
            let dataset = gen_dataset(
                spec.kind,
                net.cfg.canvas_size(),
                spec.n,
                spec.seed,
                net.cfg.classes,
                Split::Eval,
            )?;
            let out_dir = out.unwrap_or_else(|| checkpoint.join("eval"));
            let summary = evaluate(&net, &dataset, Some(&out_dir))?;
            for (name, value) in &summary.metrics {
                println!("{name}: {value}");
            }
            if !summary.layer_densities.is_empty() {
                let joined: Vec<String> =
                    summary.layer_densities.iter().map(|d| format!("{d:.4}")).collect();
                println!("layer_densities: {}", joined.join(","));
            }
            println!("flop_ratio: {}", summary.flop_ratio);
            println!("outputs: {}", out_dir.display());
        }
        Command::Compare { config } => {
            let cfg = RunConfig::load(&config)?;
            let out = compare_policies(&cfg)?;
            for row in &out.rows {
                println!(
                    "{} rho={} ratio={:.4} {}={:.4}",
                    row.policy, row.rho, row.measured_ratio, row.metric_name, row.metric
                );
            }
            println!("table: {}", out.csv_path.display());
        }
        Command::Ponder { checkpoint, image, out } => {
            let net = ToyNet::load(&checkpoint)?;
            let img = read_ptsr(&image)?;
            let mut tape = Tape::new();
            let fr = net.forward(&mut tape, &img, net.cfg.tau_end, None)?;
            let mut masks = Vec::new();
            for gate in &fr.gates {
                let mask = pag_core::GateMask::from_tensor(tape.value(gate.mask).clone())?;
                if mask.dims().len() == 2 && mask.dims()[0] > 1 {
                    masks.push(mask);
                }
            }
            if masks.is_empty() {
                return Err(HarnessError::Config(
                    "checkpoint has no spatial gates to accumulate".into(),
                ));
            }
            let ponder = pag_core::accumulate_ponder(&masks)?;
            let (h, w) = (ponder.values.dims()[0], ponder.values.dims()[1]);
            let bytes = pag_core::io::pgm_bytes(w, h, &ponder.to_pgm_pixels())?;
            std::fs::write(&out, bytes)?;
            println!("ponder map: {}", out.display());
        }
        Command::PanoNormals { input, canonical_column, out, viz } => {
            let map = NormalMap::from_tensor(read_ptsr(&input)?)?;
            let local = globals_to_locals(&map, canonical_column)?;
            write_ptsr(&out, local.as_tensor())?;
            println!("local normals: {}", out.display());
            if let Some(viz_path) = viz {
                let bytes = ppm_bytes(local.width(), local.height(), &local.to_ppm_pixels())?;
                std::fs::write(&viz_path, bytes)?;
                println!("visualization: {}", viz_path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
