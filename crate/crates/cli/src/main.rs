use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use mitseg::app::{self, EvalArgs, PredictArgs, TrainArgs};
use mitseg::config::RunConfig;
use mitseg::data::synthetic::SyntheticSpec;

/// Mix-Transformer semantic segmentation: train, evaluate, predict, analyze, cost.
#[derive(Debug, Parser)]
#[command(name = "mitseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model from a run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Resume an interrupted run from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Start a new schedule from the weights of this checkpoint.
        #[arg(long, conflicts_with = "checkpoint")]
        init: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Dataset root, overriding the configuration.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory (also settable through MITSEG_OUT).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute per-class IoU and mIoU on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
        /// Comma-separated test scales, e.g. 0.5,1.0,1.5.
        #[arg(long)]
        scales: Option<String>,
        /// Also average horizontally mirrored passes.
        #[arg(long)]
        flip: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Segment one image into a label-map PNG.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Label-map PNG to write.
        #[arg(long)]
        out: PathBuf,
        /// Optional colour overlay PNG.
        #[arg(long)]
        overlay: Option<PathBuf>,
        /// Palette file with one r,g,b line per class.
        #[arg(long)]
        palette: Option<PathBuf>,
        #[arg(long)]
        scales: Option<String>,
        #[arg(long)]
        flip: bool,
    },
    /// Class pixel distribution of a dataset split (CSV + bar chart).
    Analyze {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long, default_value = "analysis")]
        out: PathBuf,
    },
    /// Analytic parameter and MAC count of a model variant.
    Cost {
        /// Built-in variant name or path to a variant file.
        #[arg(long, conflicts_with = "config")]
        variant: Option<String>,
        /// Take the variant (with overrides) from a run configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Input resolution as HxW.
        #[arg(long, default_value = "512x512")]
        resolution: String,
    },
    /// Write a synthetic block-mosaic dataset split.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 16)]
        block: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_resolution(s: &str) -> Result<(usize, usize)> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .with_context(|| format!("resolution {s:?} must look like 512x512"))?;
    Ok((h.trim().parse()?, w.trim().parse()?))
}

fn scales(s: &Option<String>) -> Result<Option<Vec<f64>>> {
    Ok(s.as_deref().map(app::parse_scales).transpose()?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, checkpoint, init, seed, data, out } => {
            let s = app::cmd_train(&TrainArgs { config, resume: checkpoint, init, seed, data, out })?;
            if let Some(l) = &s.last {
                println!("final iter {} loss {:.4}", l.iter, l.main_loss);
            }
            println!("checkpoint: {}", s.checkpoint.display());
        }
        Command::Eval { checkpoint, data, split, scales: sc, flip, out } => {
            let args = EvalArgs { checkpoint, data, split, scales: scales(&sc)?, flip: flip.then_some(true), out };
            let o = app::cmd_eval(&args)?;
            print!("{}", o.report.summary());
            println!("reports written to {}", o.out_dir.display());
        }
        Command::Predict { checkpoint, image, out, overlay, palette, scales: sc, flip } => {
            let args = PredictArgs { checkpoint, image, out: out.clone(), overlay, palette, scales: scales(&sc)?, flip };
            let label = app::cmd_predict(&args)?;
            println!("{}x{} label map written to {}", label.height(), label.width(), out.display());
        }
        Command::Analyze { data, split, out } => {
            let h = app::cmd_analyze(&data, &split, &out)?;
            println!("{} labelled pixels; histogram written to {}", h.total, out.display());
        }
        Command::Cost { variant, config, resolution } => {
            let (h, w) = parse_resolution(&resolution)?;
            let report = match (variant, config) {
                (Some(v), _) => app::cmd_cost(&v, h, w)?,
                (None, Some(c)) => {
                    let cfg = RunConfig::load(&c)?;
                    mitseg::eval::count_cost(&cfg.model_config()?, h, w)?
                }
                (None, None) => bail!("pass --variant or --config"),
            };
            print!("{}", report.to_text());
        }
        Command::Synth { out, split, count, size, block, seed } => {
            let spec = SyntheticSpec { count, height: size, width: size, block, seed, ..Default::default() };
            let n = app::cmd_synth(&out, &split, &spec)?;
            println!("wrote {n} samples to {}", out.display());
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
