//! `jointok`: train, sample, evaluate and diagnose jointly trained tokenizers.
//!
//! Every invocation writes one run directory under the run root
//! (`--run-root`, or `JOINTOK_RUN_ROOT`, default `runs`). Exit status is 0 on
//! success, 1 for usage and input errors and 2 for internal failures.

mod commands;
mod plot;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use commands::{DiagnoseArgs, EvalArgs, OrderingArgs, SampleArgs, TrainArgs};

#[derive(Parser)]
#[command(name = "jointok", version, about = "Joint training of a 1D image tokenizer and an autoregressive generator")]
struct Cli {
    /// directory that receives one sub-directory per run
    #[arg(long, env = "JOINTOK_RUN_ROOT", default_value = "runs", global = true)]
    run_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train tokenizer and generator jointly
    Train {
        #[arg(long, default_value = "desk")]
        preset: String,
        /// TOML file layered over the preset
        #[arg(long)]
        config: Option<PathBuf>,
        /// `key=value` override of any config key, applied last (repeatable)
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// shorthand for `--set steps=N`
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        name: Option<String>,
        /// also keep `step_NNNNNN.ckpt` every N steps
        #[arg(long, default_value_t = 0)]
        checkpoint_every: usize,
        /// continue the run in this directory from its `last.ckpt`
        #[arg(long, conflicts_with_all = ["name", "preset"])]
        resume: Option<PathBuf>,
    },
    /// Sample a labelled image grid from a checkpoint
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        /// comma-separated class labels, one image each
        #[arg(long, value_delimiter = ',', required = true)]
        classes: Vec<usize>,
        /// `none`, `cfg:<scale>` or `auto:<scale>`
        #[arg(long, default_value = "none")]
        guidance: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long)]
        greedy: bool,
        /// auxiliary generator checkpoint for auto-guidance
        #[arg(long)]
        aux_ckpt: Option<PathBuf>,
        #[arg(long)]
        name: Option<String>,
    },
    /// Reconstruction and generation metrics of a checkpoint
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// defaults to `cfg:<cfg_scale>` from the checkpoint config
        #[arg(long)]
        guidance: Option<String>,
        /// generated images; defaults to `eval_samples`
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        aux_ckpt: Option<PathBuf>,
        #[arg(long)]
        name: Option<String>,
    },
    /// Code usage, token frequencies, PCA coordinates and loss curves
    Diagnose {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        name: Option<String>,
    },
    /// Retrain a generator on re-ordered tokens of a frozen tokenizer
    Ordering {
        #[arg(long)]
        ckpt: PathBuf,
        /// `original`, `reversed` or `random:<seed>`
        #[arg(long)]
        order: String,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        name: Option<String>,
    },
}

fn dispatch(cli: Cli, argv: &[String]) -> Result<PathBuf> {
    let root = cli.run_root.as_path();
    match cli.command {
        Command::Train { preset, config, mut set, steps, seed, name, checkpoint_every, resume } => {
            set.extend(steps.map(|n| format!("steps={n}")));
            set.extend(seed.map(|s| format!("seed={s}")));
            commands::train(root, &TrainArgs { preset, config, overrides: set, name, checkpoint_every, resume }, argv)
        }
        Command::Sample { ckpt, classes, guidance, seed, temperature, greedy, aux_ckpt, name } => {
            commands::sample(root, &SampleArgs { ckpt, classes, guidance, seed, temperature, greedy, aux_ckpt, name }, argv)
        }
        Command::Eval { ckpt, guidance, samples, seed, aux_ckpt, name } => {
            commands::eval(root, &EvalArgs { ckpt, guidance, samples, seed, aux_ckpt, name }, argv)
        }
        Command::Diagnose { ckpt, name } => commands::diagnose(root, &DiagnoseArgs { ckpt, name }, argv),
        Command::Ordering { ckpt, order, steps, samples, name } => {
            commands::ordering(root, &OrderingArgs { ckpt, order, steps, samples, name }, argv)
        }
    }
}

/// Non-finite losses and panics are internal; everything else traces back to the input.
fn exit_code(err: &anyhow::Error) -> u8 {
    let internal = err.chain().filter_map(|e| e.downcast_ref::<jointok_core::Error>()).any(|e| !e.is_user_error());
    if internal {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match std::panic::catch_unwind(|| dispatch(cli, &argv[1..])) {
        Ok(Ok(dir)) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Ok(Err(e)) => {
            // io errors repeat their source in the message; print each cause once
            let mut msg = String::new();
            for cause in e.chain().map(|c| c.to_string()) {
                if !msg.contains(&cause) {
                    msg = if msg.is_empty() { cause } else { format!("{msg}: {cause}") };
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(&e))
        }
        Err(_) => ExitCode::from(2),
    }
}
