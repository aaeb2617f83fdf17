use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use maskforge::cli::{self, AblationAxis};
use maskforge::config::RunConfig;
use maskforge::Error;

#[derive(Parser)]
#[command(name = "maskforge", about = "Dynamic-mask concept forgetting on a toy diffusion model")]
struct Cli {
    /// Path to a JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the config output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Model checkpoint to start from (unlearn, eval, sample, ablate).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base conditional denoiser.
    Pretrain,
    /// Run the sequential forgetting pipeline from a base checkpoint.
    Unlearn,
    /// Evaluate a checkpoint against the configured forgetting tasks.
    Eval,
    /// Draw samples under one condition token; writes CSV and SVG.
    Sample {
        /// Condition token name (e.g. "north-east-a", "north-east", "null").
        #[arg(long)]
        cond: String,
        /// Number of samples.
        #[arg(long, default_value_t = 200)]
        n: usize,
    },
    /// Sweep a hyperparameter and report end-of-sequence metrics per value.
    Ablate {
        #[arg(long, value_enum)]
        axis: AblationAxis,
        /// Comma-separated values to sweep.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Summarize mask churn from a previous run directory.
    MaskStats {
        /// Run directory holding task_*_mask_stats.csv files.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.to_string_lossy().into_owned();
    }
    Ok(cfg)
}

fn require_checkpoint(cli: &Cli) -> Result<PathBuf, Error> {
    cli.checkpoint
        .clone()
        .ok_or_else(|| Error::Config("--checkpoint is required for this command".into()))
}

fn run(cli: Cli) -> Result<(), Error> {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Pretrain => {
            let ckpt = cli::cmd_pretrain(&cfg)?;
            println!("wrote {}", ckpt.display());
        }
        Command::Unlearn => {
            let ckpt = require_checkpoint(&cli)?;
            let outcome = cli::cmd_unlearn(&cfg, &ckpt)?;
            if let Some(last) = outcome.log.rows.last() {
                for (c, fr) in &last.forget_rates {
                    println!("forget_rate[{c}]={fr:.4}");
                }
                println!("others_acc={:.4}", last.others_acc);
                for (c, sa) in &last.super_align {
                    println!("super_alignment[{c}]={sa:.4}");
                }
            }
            println!("artifacts under {}", cfg.output_dir);
        }
        Command::Eval => {
            let ckpt = require_checkpoint(&cli)?;
            let out = PathBuf::from(&cfg.output_dir).join("eval.csv");
            let report = cli::cmd_eval(&cfg, &ckpt, &out)?;
            for (c, fr) in &report.per_concept_forget_rate {
                println!("forget_rate[{c}]={fr:.4}");
            }
            println!("others_acc={:.4}", report.others_acc);
            for (c, sa) in &report.super_align {
                println!("super_alignment[{c}]={sa:.4}");
            }
            println!("wrote {}", out.display());
        }
        Command::Sample { cond, n } => {
            let ckpt = require_checkpoint(&cli)?;
            let base = PathBuf::from(&cfg.output_dir).join(format!("samples_{cond}"));
            std::fs::create_dir_all(&cfg.output_dir).map_err(Error::from)?;
            cli::cmd_sample(&cfg, &ckpt, cond, *n, &base)?;
            println!("wrote {} and {}", base.with_extension("csv").display(), base.with_extension("svg").display());
        }
        Command::Ablate { axis, values } => {
            let ckpt = require_checkpoint(&cli)?;
            let path = cli::cmd_ablate(&cfg, &ckpt, *axis, values)?;
            println!("wrote {}", path.display());
        }
        Command::MaskStats { dir } => {
            let dir = dir.clone().unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
            let summary = cli::cmd_mask_stats(&dir)?;
            println!("{summary}");
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
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
