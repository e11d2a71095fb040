use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use nrit_core::harness::{Ablation, Pipeline, PipelineConfig};
use nrit_core::NritError;

/// Context-aware neuron mining and neuron-guided tuning on a micro language model.
#[derive(Parser)]
#[command(name = "nrit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic world, tokenizer and datasets.
    GenWorld(Common),
    /// Warm-up training: corpus language modelling plus YES/NO supervision.
    Warmup(Common),
    /// Integrated Gradients over every attribution instance.
    Attribute(Common),
    /// Mine, decouple and rank context-aware neurons.
    Mine(Common),
    /// Stage 1: irrelevant-context neurons learn to emit EOT.
    Denoise(Common),
    /// Stage 2: mined neurons and dense layers learn relevant summaries.
    Tune(Common),
    /// Score the warm-up and tuned models with the Match metric.
    Eval(Common),
    /// Every stage in order.
    RunAll(Common),
    /// Print the summary of a finished run.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// key=value configuration file; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    /// Leave out part of the method: no-denoise, no-neurons or no-layers.
    #[arg(long, default_value = "none")]
    ablate: String,
}

impl Common {
    fn pipeline(&self) -> Result<Pipeline, NritError> {
        let config = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        Ok(Pipeline::new(config, &self.out, self.ablate.parse::<Ablation>()?))
    }
}

fn run(cli: Cli) -> Result<(), NritError> {
    let (common, name) = match &cli.command {
        Command::GenWorld(c) => (c, "gen-world"),
        Command::Warmup(c) => (c, "warmup"),
        Command::Attribute(c) => (c, "attribute"),
        Command::Mine(c) => (c, "mine"),
        Command::Denoise(c) => (c, "denoise"),
        Command::Tune(c) => (c, "tune"),
        Command::Eval(c) => (c, "eval"),
        Command::RunAll(c) => (c, "run-all"),
        Command::Report(c) => (c, "report"),
    };
    let p = common.pipeline()?;
    let start = Instant::now();
    match name {
        "gen-world" => p.gen_world()?,
        "warmup" => p.warmup()?,
        "attribute" => p.attribute()?,
        "mine" => p.mine()?,
        "denoise" => p.denoise()?,
        "tune" => p.tune()?,
        "eval" => {
            let (base, tuned) = p.eval()?;
            for r in [base, tuned] {
                print!("{}", r.to_kv());
            }
        }
        "report" => print!("{}", p.report()?),
        _ => {
            let summary = p.run_all(&mut |stage| {
                eprintln!("[{:>7.1}s] {stage}", start.elapsed().as_secs_f64());
            })?;
            print!("{summary}");
        }
    }
    eprintln!("{name} finished in {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
