//! `dtikit`: file-in/file-out front end for the toolkit.
//!
//! Exit codes: 0 success, 2 missing or unreadable input, 3 shape, format or
//! argument violation, 4 numerical failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dtikit::{Error, ErrorKind};

#[derive(Parser, Debug)]
#[command(name = "dtikit", version, about = "Diffusion tensor fitting, geometry-constrained losses and evaluation")]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalOpts {
    /// Emit machine-readable JSON instead of human text.
    #[arg(long, global = true)]
    pub json: bool,
    /// Replace existing output files.
    #[arg(long, global = true)]
    pub overwrite: bool,
    /// Seed for every random draw (phantoms, block parameters, demo inputs).
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; outputs do not depend on this.
    #[arg(long, global = true, env = "DTI_THREADS")]
    pub threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a tensor per voxel from a DWI series and FSL gradient tables.
    Fit(commands::FitArgs),
    /// Write FA, MD, AD and RD maps of a tensor volume.
    Metrics(commands::MetricsArgs),
    /// Pick an evenly spread subset of directions (greedy Kennard-Stone).
    Subsample(commands::SubsampleArgs),
    /// Compare a predicted tensor volume with a reference.
    Evaluate(commands::EvaluateArgs),
    /// Geometry-constrained loss between two tensor volumes.
    Loss(commands::LossArgs),
    /// Generate a synthetic phantom directory.
    Synth(commands::SynthArgs),
    /// Run one gradient-encoding block on seeded random input.
    DgeDemo(commands::DgeDemoArgs),
    /// Descend the geometry loss directly on a tensor field.
    Refine(commands::RefineArgs),
}

/// Everything that can end a command early.
#[derive(Debug)]
pub enum Failure {
    Core(Error),
    /// The analytic gradient disagreed with finite differences.
    GradientCheck {
        worst: f64,
        limit: f64,
    },
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(Error::from(e))
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Core(e) => match e.kind() {
                ErrorKind::Input => 2,
                ErrorKind::Format => 3,
                ErrorKind::Numerical => 4,
            },
            Failure::GradientCheck { .. } => 4,
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Core(e) => e.to_string(),
            Failure::GradientCheck { worst, limit } => {
                format!("gradient check failed: max relative error {worst:e} exceeds {limit:e}")
            }
        }
    }
}

/// Result of a successful command: human lines and a JSON document.
pub struct Summary {
    pub lines: Vec<String>,
    pub json: serde_json::Value,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let g = cli.global.clone();
    if let Some(n) = g.threads {
        if n == 0 {
            return report_failure(&g, &Failure::Core(Error::InvalidArgument("--threads must be at least 1".into())));
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return report_failure(&g, &Failure::Core(Error::InvalidArgument(format!("thread pool: {e}"))));
        }
    }
    let outcome = match cli.command {
        Command::Fit(a) => commands::fit(&g, a),
        Command::Metrics(a) => commands::metrics(&g, a),
        Command::Subsample(a) => commands::subsample(&g, a),
        Command::Evaluate(a) => commands::evaluate(&g, a),
        Command::Loss(a) => commands::loss(&g, a),
        Command::Synth(a) => commands::synth(&g, a),
        Command::DgeDemo(a) => commands::dge_demo(&g, a),
        Command::Refine(a) => commands::refine(&g, a),
    };
    match outcome {
        Ok(summary) => {
            if g.json {
                println!("{}", serde_json::to_string_pretty(&summary.json).expect("summary is valid JSON"));
            } else {
                for line in summary.lines {
                    println!("{line}");
                }
            }
            ExitCode::SUCCESS
        }
        Err(f) => report_failure(&g, &f),
    }
}

fn report_failure(g: &GlobalOpts, f: &Failure) -> ExitCode {
    let code = f.exit_code();
    if g.json {
        let doc = serde_json::json!({ "error": f.message(), "exit_code": code });
        eprintln!("{doc}");
    } else {
        eprintln!("dtikit: {}", f.message());
    }
    ExitCode::from(code)
}

/// Output paths that exist are refused unless `--overwrite` was given.
pub fn check_outputs(g: &GlobalOpts, paths: &[&PathBuf]) -> Result<(), Failure> {
    if g.overwrite {
        return Ok(());
    }
    for p in paths {
        if p.exists() {
            return Err(
                Error::InvalidArgument(format!("{} exists (pass --overwrite to replace it)", p.display())).into()
            );
        }
    }
    Ok(())
}
