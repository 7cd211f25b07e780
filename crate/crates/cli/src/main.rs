use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use gmail_core::model::RealFlowPolicy;
use gmail_core::ErrorClass;

mod commands;
mod config;

use config::RunConfig;

/// Process failure with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn config(message: String) -> Self {
        Self { code: 2, message }
    }

    pub fn io(message: String) -> Self {
        Self { code: 3, message }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<gmail_core::Error> for Failure {
    fn from(e: gmail_core::Error) -> Self {
        let code = match e.class() {
            ErrorClass::Config => 2,
            ErrorClass::Io => 3,
            ErrorClass::Numeric => 4,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::io(e.to_string())
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Self::io(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "gmail", version, about = "Generated-to-real alignment experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum RealFlow {
    Frozen,
    LoraRealProj,
}

impl From<RealFlow> for RealFlowPolicy {
    fn from(r: RealFlow) -> Self {
        match r {
            RealFlow::Frozen => RealFlowPolicy::FrozenBase,
            RealFlow::LoraRealProj => RealFlowPolicy::LoraWithRealProj,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Sweep {
    Rank,
    Align,
    Scale,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic paired dataset.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Dataset file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain, align (unless skipped) and fit the downstream probe.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        skip_align: bool,
        #[arg(long, value_enum)]
        real_flow: Option<RealFlow>,
        /// Output directory; falls back to `out_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one ablation sweep and write a CSV row per configuration.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        sweep: Sweep,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write 2-D projection and paired-similarity CSVs for a checkpoint.
    ExportPlot {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = RunConfig::load(&config)?;
            commands::gen_data(&cfg, &out)
        }
        Command::Run {
            config,
            data,
            skip_align,
            real_flow,
            out,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(r) = real_flow {
                cfg.train.real_flow_policy = r.into();
            }
            let out = cfg.out_dir(out.as_deref())?;
            commands::run(&cfg, &data, skip_align, &out)
        }
        Command::Ablate {
            config,
            data,
            sweep,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            let out = cfg.out_dir(out.as_deref())?;
            commands::ablate(&cfg, &data, sweep, &out)
        }
        Command::ExportPlot { ckpt, data, out } => commands::export_plot(&ckpt, &data, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
