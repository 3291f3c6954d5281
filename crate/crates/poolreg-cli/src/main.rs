//! poolreg: pooled logistic regression from the command line.
//!
//! Subcommands cover the centralized workflow (`fit`, `pool-fit`), the
//! distributed one (`coordinator`, `node`), data generation (`gen-data`)
//! and the replication harness (`simulate`). Seeds are always explicit
//! arguments or config fields; there is no environment fallback, so a
//! command line fully determines its outputs.
//!
//! Exit codes: 0 success, 2 validation error, 3 numerical failure,
//! 4 protocol failure.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "poolreg", version, about = "Pooled logistic regression toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct SizeArgs {
    /// Single pool size; per-stratum remainders are excluded at random.
    #[arg(long, conflicts_with_all = ["sizes", "auto", "case_sizes"])]
    size: Option<usize>,
    /// Two sizes "small,large" covering each stratum exactly.
    #[arg(long, conflicts_with_all = ["auto", "case_sizes"])]
    sizes: Option<String>,
    /// Adjacent-size planner: sizes {g, g+1}.
    #[arg(long, conflicts_with = "case_sizes")]
    auto: Option<usize>,
    /// Explicit per-stratum size list "3,3,4" (requires --control-sizes).
    #[arg(long, requires = "control_sizes")]
    case_sizes: Option<String>,
    #[arg(long, requires = "case_sizes")]
    control_sizes: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Standard individual-level logistic fit.
    Fit {
        /// Microdata CSV: subject_id,outcome,<covariates...>
        #[arg(long)]
        data: std::path::PathBuf,
        /// Model config (term list).
        #[arg(long)]
        model: std::path::PathBuf,
        #[arg(long, default_value = "out")]
        out_dir: std::path::PathBuf,
    },
    /// Centralized pooled analysis: plan, aggregate, fit.
    PoolFit {
        #[arg(long)]
        data: std::path::PathBuf,
        #[arg(long)]
        model: std::path::PathBuf,
        #[command(flatten)]
        size: SizeArgs,
        #[arg(long)]
        seed: u64,
        /// Allow pools of size 1 (exact-equivalence studies).
        #[arg(long)]
        research: bool,
        /// Make privacy-guard warnings fatal.
        #[arg(long)]
        strict: bool,
        #[arg(long, default_value = "out")]
        out_dir: std::path::PathBuf,
    },
    /// Run the analytical center of a distributed session.
    Coordinator {
        #[arg(long)]
        config: std::path::PathBuf,
    },
    /// Run one data node of a distributed session.
    Node {
        #[arg(long)]
        config: std::path::PathBuf,
    },
    /// Replication study: standard vs pooled analysis over pool sizes.
    Simulate {
        #[arg(long, default_value_t = 500)]
        reps: usize,
        #[arg(long, default_value_t = 30_000)]
        subjects: usize,
        /// Pool sizes, comma separated.
        #[arg(long, default_value = "2,3,4,6")]
        sizes: String,
        #[arg(long)]
        seed: u64,
        /// Arm paired against the unpooled estimates in the scatter file.
        #[arg(long)]
        scatter_g: Option<usize>,
        #[arg(long, default_value = "out")]
        out_dir: std::path::PathBuf,
    },
    /// Generate a synthetic cohort CSV under the replication model.
    GenData {
        #[arg(long, default_value_t = 30_000)]
        subjects: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: std::path::PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fit {
            data,
            model,
            out_dir,
        } => commands::cmd_fit(&data, &model, &out_dir),
        Command::PoolFit {
            data,
            model,
            size,
            seed,
            research,
            strict,
            out_dir,
        } => commands::cmd_pool_fit(&data, &model, &size, seed, research, strict, &out_dir),
        Command::Coordinator { config } => commands::cmd_coordinator(&config),
        Command::Node { config } => commands::cmd_node(&config),
        Command::Simulate {
            reps,
            subjects,
            sizes,
            seed,
            scatter_g,
            out_dir,
        } => commands::cmd_simulate(reps, subjects, &sizes, seed, scatter_g, &out_dir),
        Command::GenData {
            subjects,
            seed,
            out,
        } => commands::cmd_gen_data(subjects, seed, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("poolreg: {}", error.message());
            ExitCode::from(error.exit_code())
        }
    }
}
