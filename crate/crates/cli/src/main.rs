use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod specs;

/// Coarse-to-fine panoramic detection and hierarchical activity recognition.
#[derive(Debug, Parser)]
#[command(name = "panofocus", version, about)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// `key = value` configuration file.
    #[arg(long, global = true, env = "PANOFOCUS_CONFIG")]
    pub config: Option<PathBuf>,
    /// Overrides one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Worker threads for per-frame and per-region work.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Refines detections with the adapt-focuser and writes fused boxes.
    Focus(commands::FocusArgs),
    /// Runs the encoder and recognition heads.
    Forward(commands::ForwardArgs),
    /// Compares reverse-mode gradients with finite differences.
    Gradcheck(commands::GradcheckArgs),
    /// Scores predictions against ground truth.
    Eval(commands::EvalArgs),
    /// Draws boxes over frame images as SVG.
    Render(commands::RenderArgs),
    /// Runs focus, forward and eval in sequence.
    Pipeline(commands::PipelineArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.global.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global() {
            eprintln!("error: cannot start {jobs} workers: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = if e.is::<commands::Internal>() { 2 } else { 1 };
            ExitCode::from(code)
        }
    }
}
