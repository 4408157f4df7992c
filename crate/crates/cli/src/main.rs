use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use crossfuse::commands::{self, ColorPolicy, FusionRequest};
use crossfuse::config::RunConfig;
use crossfuse::{CliError, CliResult};

/// Train, run and evaluate a two-branch multimodal image fusion network.
///
/// Set CROSSFUSE_THREADS to fix the worker thread count.
#[derive(Debug, Parser)]
#[command(name = "crossfuse", version)]
struct Cli {
    /// Flat TOML file overriding network and training settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random stream (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train on a directory of images and write a checkpoint.
    Train {
        /// Directory of PNG/TIFF training images.
        corpus: PathBuf,
        /// Checkpoint to write; the loss log goes to `<out>.loss.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fuse two aligned images.
    Fuse {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = ColorPolicy::LuminanceFuse)]
        color_policy: ColorPolicy,
    },
    /// Compute PSNR, FMI and Q_cv for fused images against their sources.
    Eval {
        dir_a: PathBuf,
        dir_b: PathBuf,
        fused: PathBuf,
        /// Text report; a JSON copy is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the four ablation variants and tabulate their metrics.
    Ablate {
        corpus: PathBuf,
        eval_a: PathBuf,
        eval_b: PathBuf,
        /// Directory receiving ablation.txt and ablation.json.
        #[arg(long)]
        out: PathBuf,
    },
}

fn configure_threads() -> CliResult<()> {
    if let Ok(v) = std::env::var("CROSSFUSE_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| CliError::usage(anyhow::anyhow!("CROSSFUSE_THREADS must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(CliError::usage)?;
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    let cfg = RunConfig::resolve(cli.config.as_deref(), cli.seed)?;
    let _ = crossfuse_core::training::seed_all(cfg.train.seed);
    match cli.command {
        Command::Train { corpus, out } => {
            let (_, log) = commands::cmd_train(&corpus, &cfg, &out)?;
            if let Some(last) = log.last() {
                println!("trained {} steps, final loss {:.6}; wrote {}", last.step, last.loss, out.display());
            }
        }
        Command::Fuse {
            a,
            b,
            checkpoint,
            out,
            color_policy,
        } => {
            commands::cmd_fuse(&FusionRequest {
                path_a: a,
                path_b: b,
                checkpoint,
                output: out.clone(),
                color_policy,
            })?;
            println!("wrote {}", out.display());
        }
        Command::Eval { dir_a, dir_b, fused, out } => {
            let report = commands::cmd_eval(&dir_a, &dir_b, &fused, &out)?;
            println!(
                "{} pairs: PSNR {:.4} dB, FMI {:.4}, Q_cv {:.4}",
                report.per_pair.len(),
                report.psnr,
                report.fmi,
                report.qcv
            );
        }
        Command::Ablate {
            corpus,
            eval_a,
            eval_b,
            out,
        } => {
            let table = commands::cmd_ablate(&corpus, &eval_a, &eval_b, &cfg, &out)?;
            print!("{}", table.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
