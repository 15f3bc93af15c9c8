use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use curricula::config::PipelineConfig;
use curricula::{ablate, pipeline, Error};

#[derive(Parser)]
#[command(name = "curricula", version, about = "Curriculum mixing pipeline for cross-language transfer")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// JSON config file (required).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set schedule.t_grow=1000`. Repeatable.
    #[arg(long = "set", value_name = "K=V", global = true)]
    sets: Vec<String>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the mixing table at evenly spaced checkpoints.
    Plan {
        #[arg(short, long, default_value_t = 11)]
        n: usize,
    },
    /// Generate the synthetic corpora.
    Gen,
    /// Draw training instances from the schedule.
    Sample {
        /// Number of instances (defaults to `sampler.n_samples`).
        #[arg(short, long)]
        n: Option<u64>,
    },
    /// Pack sampled instances into fixed-length sequences.
    Pack,
    /// Extend the vocabulary (and checkpoint, if present) with new tokens.
    Extend,
    /// Train the model on the packed sequences.
    Train,
    /// Report held-out perplexity of the checkpoint.
    Eval,
    /// Dynamic-versus-fixed schedule comparison over several seeds.
    Ablate,
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut sets = cli.sets;
    if let Some(out) = cli.out {
        sets.push(format!("out_dir={}", serde_json::to_string(&out.display().to_string())?));
    }
    let path = cli
        .config
        .ok_or_else(|| Error::Config("--config <path> is required".into()))?;
    let cfg = PipelineConfig::load(&path, &sets)?;
    let summary = match cli.cmd {
        Cmd::Plan { n } => {
            print!("{}", pipeline::cmd_plan(&cfg, n)?);
            return Ok(());
        }
        Cmd::Gen => pipeline::cmd_gen(&cfg)?,
        Cmd::Sample { n } => pipeline::cmd_sample(&cfg, n)?,
        Cmd::Pack => pipeline::cmd_pack(&cfg)?,
        Cmd::Extend => pipeline::cmd_extend(&cfg)?,
        Cmd::Train => pipeline::cmd_train(&cfg)?,
        Cmd::Eval => pipeline::cmd_eval(&cfg)?,
        Cmd::Ablate => ablate::cmd_ablate(&cfg)?,
    };
    println!("{summary}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            println!("{}", serde_json::json!({"error": e.to_string()}));
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
