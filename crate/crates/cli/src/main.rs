//! `remcaps`: train capsule networks, prune them, and measure the
//! entropy of their routing parse trees.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};

use remcaps_core::commands::{init_threads, run_analyze, run_report, run_train};
use remcaps_core::config::{ExperimentConfig, KChoice};
use remcaps_core::data::{DataSource, SplitTag};
use remcaps_core::error::Error;

#[derive(Parser)]
#[command(name = "remcaps", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file, writing logs and checkpoints.
    Train {
        /// Experiment config (flat key = value lines).
        #[arg(long)]
        config: PathBuf,
        /// Override the config's optimizer.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: ./runs/<timestamp-seed>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset split: quantize couplings,
    /// build the parse dictionary, report entropies, emit clusters.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory with IDX files, or a synth: spec.
        #[arg(long)]
        data: String,
        /// Quantization levels: an integer or 'auto'.
        #[arg(long, default_value = "auto")]
        k: String,
        #[arg(long, default_value = "test")]
        split: String,
        /// Cluster overlays to emit per class.
        #[arg(long, default_value_t = 5)]
        top_n: usize,
        /// Output directory (default: ./runs/<timestamp>-analyze).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize finished runs (training log + entropy report) as CSV.
    Report {
        /// Run directories.
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
}

fn default_out(suffix: &str) -> PathBuf {
    let ts = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    PathBuf::from("runs").join(format!("{ts}-{suffix}"))
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let mut cfg = ExperimentConfig::parse_file(&config)?;
            if let Some(seed) = seed {
                cfg.optimizer.seed = seed;
            }
            let run_dir = out
                .or_else(|| cfg.out_dir.clone())
                .unwrap_or_else(|| default_out(&cfg.optimizer.seed.to_string()));
            let outcome = run_train(&cfg, &run_dir)?;
            println!("run dir: {}", outcome.run_dir.display());
            for log in &outcome.logs {
                let entropy = log
                    .val_entropy_bits
                    .map(|h| format!(" val_entropy={h:.4}"))
                    .unwrap_or_default();
                println!(
                    "epoch {:>3}: loss={:.6} val_acc={:.4} sparsity={:.4}{}",
                    log.epoch, log.train_loss, log.val_accuracy, log.sparsity, entropy
                );
            }
            println!("final checkpoint: {}", outcome.final_checkpoint.display());
            if let Some(best) = &outcome.best_checkpoint {
                println!("best checkpoint: {}", best.display());
            }
            Ok(())
        }
        Command::Analyze {
            checkpoint,
            data,
            k,
            split,
            top_n,
            out,
        } => {
            let source: DataSource = data.parse()?;
            let k: KChoice = k.parse()?;
            let split: SplitTag = split.parse()?;
            let out_dir = out.unwrap_or_else(|| default_out("analyze"));
            let outcome = run_analyze(&checkpoint, &source, k, split, top_n, &out_dir)?;
            println!("out dir: {}", outcome.out_dir.display());
            println!(
                "K={} accuracy={:.4} (unquantized {:.4}) network_entropy={:.4} bits",
                outcome.chosen_k,
                outcome.report.accuracy,
                outcome.report.accuracy_unquantized,
                outcome.report.network_entropy_bits
            );
            Ok(())
        }
        Command::Report { dirs } => {
            let outcome = run_report(&dirs)?;
            for w in &outcome.warnings {
                eprintln!("warning: {w}");
            }
            if outcome.rows == 0 {
                return Err(Error::Data {
                    path: PathBuf::from("."),
                    detail: "no run directory had both a training log and an entropy report".into(),
                });
            }
            print!("{}", outcome.csv);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    init_threads();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
