use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ugsep_cli::commands::{self, AblateWhich};
use ugsep_cli::config::SEED_ENV;
use ugsep_cli::{CliError, RunConfig};
use ugsep_core::quant::QuantFormat;

#[derive(Parser)]
#[command(name = "ugsep", version, about = "UG-Sep verification, training, ablation, benchmarking and quantization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for reports and checkpoints.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the config seed and UGSEP_SEED.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Separability and cached-vs-naive serving checks; exit 1 on any violation.
    Verify(Common),
    /// Train the configured variant and save a checkpoint.
    Train(Common),
    /// U:G ratio and compensation ablations.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "both")]
        which: AblateWhich,
    },
    /// Naive vs cached vs cached+W8A16 serving.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Skip timing; report FLOPs and equivalence only.
        #[arg(long)]
        flops_only: bool,
        /// Dense checkpoint to benchmark instead of random weights.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write a W8A16 copy of a dense checkpoint.
    Quantize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = parse_format)]
        scheme: Option<QuantFormat>,
    },
}

fn parse_format(s: &str) -> Result<QuantFormat, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown scheme '{s}' (int8, fp8-e4m3)"))
}

fn config(c: &Common) -> Result<RunConfig, CliError> {
    let env = std::env::var(SEED_ENV).ok();
    RunConfig::load(c.config.as_deref())?.with_seed_overrides(env.as_deref(), c.seed)
}

fn run(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Verify(c) => {
            let r = commands::cmd_verify(&config(&c)?, &c.out)?;
            let status = |p: bool| if p { "PASS" } else { "FAIL" };
            println!("separability: {} ({} trials)", status(r.separability.pass), r.separability.trials);
            for b in &r.separability.blocks {
                if let Some(d) = &b.first_divergence {
                    println!(
                        "  block {}: first divergence at row {} col {} (trial {}, stage {})",
                        b.block_index, d.row, d.col, d.trial, d.stage
                    );
                }
            }
            println!(
                "serving equivalence: {} ({} requests, {} candidates)",
                status(r.serving.pass),
                r.serving.requests,
                r.serving.candidates
            );
            println!("report: {}", c.out.join("verify.json").display());
            Ok(if r.pass { 0 } else { 1 })
        }
        Command::Train(c) => {
            let r = commands::cmd_train(&config(&c)?, &c.out)?;
            println!(
                "test AUC {:.5} (initial {:.5}) after {} steps",
                r.test_auc, r.initial_test_auc, r.steps
            );
            println!("checkpoint: {}", c.out.join(&r.checkpoint).display());
            Ok(0)
        }
        Command::Ablate { common, which } => {
            let r = commands::cmd_ablate(&config(&common)?, &common.out, which)?;
            for t in [&r.ratios, &r.compensation].into_iter().flatten() {
                println!("{}", t.to_text());
            }
            Ok(0)
        }
        Command::Bench {
            common,
            flops_only,
            checkpoint,
        } => {
            let r = commands::cmd_bench(&config(&common)?, &common.out, flops_only, checkpoint.as_deref())?;
            for m in &r.modes {
                let wall = m
                    .wallclock_ms
                    .map(|w| format!("p50 {:.3} ms  p90 {:.3} ms", w.p50, w.p90))
                    .unwrap_or_else(|| "-".into());
                println!("{:<14} flops {:>14}  {}  equivalent: {}", m.mode, m.flops, wall, m.equivalence);
            }
            println!("cached/naive flops: {:.4}", r.flops.cached_over_naive);
            println!("{}", r.note);
            Ok(0)
        }
        Command::Quantize {
            common,
            checkpoint,
            scheme,
        } => {
            let r = commands::cmd_quantize(&checkpoint, scheme, &common.out)?;
            for m in &r.matrices {
                println!("{:<40} {:>4}x{:<4} max round-trip error {:.3e}", m.name, m.shape[0], m.shape[1], m.max_round_trip_error);
            }
            println!("footprint ratio vs 16-bit: {:.4}", r.footprint.ratio);
            println!(
                "test AUC {:.5} -> {:.5} (drift {:.2e})",
                r.drift.test_auc_dense, r.drift.test_auc_quantized, r.drift.auc_drift
            );
            println!("checkpoint: {}", common.out.join(&r.checkpoint).display());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
