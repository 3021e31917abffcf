//! Command-line entry point wiring dataset generation, training,
//! evaluation, gradient verification, routing complexity accounting, and
//! specialization inspection.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage/config error,
//! 3 I/O error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::analysis;
use crate::checkpoint;
use crate::config::{self, RunConfig};
use crate::error::{Error, Result};
use crate::tensor::gradcheck::CheckParams;
use crate::train;
use crate::weathergen;

#[derive(Parser)]
#[command(
    name = "uniwrv",
    about = "Unified hybrid-weather video restoration at desk scale",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a paired hybrid-weather dataset.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the master seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train on a generated dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint: per-condition PSNR/SSIM plus restored frames.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Finite-difference verification of the registered primitives and
    /// composite losses.
    Gradcheck {
        /// Check a single op by name.
        #[arg(long, conflicts_with = "all")]
        op: Option<String>,
        /// Check everything in the registry.
        #[arg(long)]
        all: bool,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 10)]
        trials: usize,
    },
    /// Analytic params/MACs table for the four aggregation schemes.
    BenchRouting {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Input size (square) for the MAC counts.
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Routing and prior specialization statistics for a checkpoint.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Samples per condition.
        #[arg(long, default_value_t = 32)]
        samples: usize,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_)
        | Error::Shape { .. }
        | Error::NotScalar { .. }
        | Error::UnknownOp(_) => 2,
        Error::Io { .. } | Error::Image { .. } | Error::Dataset(_) | Error::Checkpoint(_) => 3,
        Error::NonFinite { .. } => 1,
    }
}

pub fn run() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Generate {
            config,
            out,
            seed,
            force,
        } => {
            let mut cfg = config::load(&config)?;
            if let Some(seed) = seed {
                cfg.data.master_seed = seed;
            }
            let summary = weathergen::make_dataset(&cfg.data, &out, force)?;
            config::write_resolved(&cfg, &out)?;
            println!(
                "wrote {} train clips and {} test clips to {}",
                summary.train_clips,
                summary.test_clips,
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Train { config, data, out } => {
            let cfg = config::load(&config)?;
            config::write_resolved(&cfg, &out)?;
            let report = train::train(
                &cfg.model,
                &cfg.train,
                cfg.flags.hard_routing,
                cfg.flags.grad_mode_64bit,
                &data,
                &out,
            )?;
            println!(
                "trained {} iterations: loss {:.5} -> {:.5}, final lr {:.2e}",
                report.iterations, report.first_loss, report.final_loss, report.final_lr
            );
            println!("checkpoint: {}", report.checkpoint.display());
            println!("metrics:    {}", report.metrics_csv.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval { ckpt, data, report } => {
            let loaded = checkpoint::load(&ckpt)?;
            let eval = analysis::evaluate(&loaded.model, &loaded.store, &data, Some(&report))?;
            let resolved = RunConfig {
                model: loaded.model.config.clone(),
                ..RunConfig::default()
            };
            config::write_resolved(&resolved, &report)?;
            for row in &eval.rows {
                println!(
                    "{:22} clip {:3}: psnr {:6.2} (degraded {:6.2})  ssim {:.4} (degraded {:.4})",
                    weathergen::condition_name(row.condition),
                    row.clip,
                    row.psnr_restored,
                    row.psnr_degraded,
                    row.ssim_restored,
                    row.ssim_degraded
                );
            }
            println!(
                "mean over {} clips ({} triplets): psnr {:.3} (degraded {:.3}), ssim {:.4} (degraded {:.4})",
                eval.rows.len(),
                eval.total_triplets,
                eval.mean_psnr_restored,
                eval.mean_psnr_degraded,
                eval.mean_ssim_restored,
                eval.mean_ssim_degraded
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck {
            op,
            all,
            eps,
            tol,
            trials,
        } => {
            let reg = crate::full_gradcheck_registry();
            let params = CheckParams {
                trials,
                eps,
                tol,
                ..CheckParams::default()
            };
            let reports = match (op, all) {
                (Some(name), _) => vec![reg.check(&name, params)?],
                (None, _) => reg.check_all(params)?,
            };
            let mut failed = 0usize;
            println!("{:36} {:>8} {:>12}  result", "op", "trials", "max rel err");
            for r in &reports {
                println!(
                    "{:36} {:>8} {:>12.3e}  {}",
                    r.name,
                    r.trials,
                    r.max_err,
                    if r.pass { "PASS" } else { "FAIL" }
                );
                if !r.pass {
                    failed += 1;
                }
            }
            if failed > 0 {
                println!("{failed} op(s) failed");
                Ok(ExitCode::from(1))
            } else {
                Ok(ExitCode::SUCCESS)
            }
        }
        Command::BenchRouting { config, out, size } => {
            let cfg = config::load(&config)?;
            let rows: Vec<analysis::ComplexityRow> = analysis::Scheme::ALL
                .iter()
                .map(|&s| analysis::count_complexity(&cfg.model, (size, size), s))
                .collect::<Result<_>>()?;
            analysis::write_complexity_csv(&out, &rows)?;
            println!("{:20} {:>12} {:>14}", "scheme", "params", "macs");
            for row in &rows {
                println!("{:20} {:>12} {:>14}", row.scheme, row.params, row.macs);
            }
            println!("wrote {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Inspect {
            ckpt,
            data,
            out,
            samples,
        } => {
            let loaded = checkpoint::load(&ckpt)?;
            let report =
                analysis::specialization_report(&loaded.model, &loaded.store, &data, samples)?;
            analysis::write_specialization_csvs(&report, &out)?;
            let resolved = RunConfig {
                model: loaded.model.config.clone(),
                ..RunConfig::default()
            };
            config::write_resolved(&resolved, &out)?;
            for c in &report.conditions {
                println!(
                    "{:22} samples {:3}  top-3 purity {:.3}",
                    weathergen::condition_name(c.condition),
                    c.samples,
                    c.purity_top3
                );
            }
            println!("wrote CSVs to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}
