use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lowrank_tp::Variant;
use lowrank_tp_cli::checks::validate;
use lowrank_tp_cli::compare::{compare, write_comparison};
use lowrank_tp_cli::{analyze, load_resolved, write_outputs, CliError, Overrides, Result};

#[derive(Parser)]
#[command(name = "lrtp", version, about = "Tensor-parallel low-rank training simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and write report.json and trace.csv.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run the property suite for a scenario and print a PASS/FAIL table.
    Validate {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Tabulate several scenarios into comparison.json and comparison.csv.
    Compare {
        #[arg(long = "config", required = true)]
        configs: Vec<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = ["1", "2", "4", "8"])]
    element_bytes: Option<String>,
    /// Largest hidden size that is executed; larger models are analytical only.
    #[arg(long)]
    exec_cap: Option<usize>,
    #[arg(long)]
    lowrank_architecture_type: Option<Variant>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    enable_btp: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    enable_online_rmsnorm: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    enable_grouping: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    enable_lowrank_ckpt: Option<bool>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            element_bytes: self.element_bytes.as_deref().map(|s| s.parse().expect("validated by clap")),
            exec_cap: self.exec_cap,
            lowrank_architecture_type: self.lowrank_architecture_type,
            enable_btp: self.enable_btp,
            enable_online_rmsnorm: self.enable_online_rmsnorm,
            enable_grouping: self.enable_grouping,
            enable_lowrank_ckpt: self.enable_lowrank_ckpt,
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, out, common } => {
            let r = load_resolved(&config, &common.overrides())?;
            let a = analyze(&r)?;
            for w in &a.report.warnings {
                eprintln!("warning: {w}");
            }
            write_outputs(&a, &out)?;
            if let Some(m) = a.report.mismatch() {
                return Err(CliError::Mismatch(m));
            }
            println!("wrote {} and {}", out.join("report.json").display(), out.join("trace.csv").display());
            Ok(())
        }
        Command::Validate { config, common } => {
            let r = load_resolved(&config, &common.overrides())?;
            let checks = validate(&r)?;
            for c in &checks {
                println!("{c}");
            }
            let failed: Vec<&str> = checks.iter().filter(|c| !c.pass).map(|c| c.label.as_str()).collect();
            if failed.is_empty() {
                Ok(())
            } else {
                Err(CliError::Mismatch(format!("failed: {}", failed.join(", "))))
            }
        }
        Command::Compare { configs, out, common } => {
            let o = common.overrides();
            let scenarios = configs.iter().map(|c| load_resolved(c, &o)).collect::<Result<Vec<_>>>()?;
            let c = compare(&scenarios)?;
            for w in &c.warnings {
                eprintln!("warning: {w}");
            }
            if !c.incompatible.is_empty() {
                eprintln!("warning: model or shape differs from the first scenario: {}", c.incompatible.join(", "));
            }
            write_comparison(&c, &out)?;
            println!("wrote {} rows to {}", c.rows.len(), out.join("comparison.csv").display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
