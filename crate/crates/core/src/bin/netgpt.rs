use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use netgpt::cli::{self, CliError, Loaded, RunOptions};
use netgpt::trainer::EvalMode;

#[derive(Parser, Debug)]
#[command(name = "netgpt", about = "Collaborative reasoning core: run, sft, train, eval")]
struct Args {
    /// JSON run config; defaults to the built-in case study.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Policy checkpoint (run, eval) or initial parameters (train).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Config override, `key=value`; repeatable.
    #[arg(long = "set", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Run a single episode and append its trajectory log line.
    Run {
        #[arg(long)]
        task_class: Option<String>,
        /// Stub policy: answer immediately with this token.
        #[arg(long)]
        force_answer: Option<String>,
    },
    /// Supervised warm-up from a JSONL dataset or generated demonstrations.
    Sft {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Number of generated demonstrations (ignored with --dataset).
        #[arg(long)]
        demos: Option<usize>,
    },
    /// Group-relative policy-gradient training.
    Train,
    /// Evaluate a checkpoint (or the uniform policy).
    Eval {
        #[arg(long, default_value_t = 1000)]
        episodes: usize,
        /// Sample actions instead of taking the argmax.
        #[arg(long)]
        sample: bool,
    },
    /// Print the active scenario's agent cards as a card file.
    Cards,
}

fn load(args: &Args) -> Result<Loaded, CliError> {
    let mut overrides = args.overrides.clone();
    if let Some(seed) = args.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(out) = &args.out {
        overrides.push(format!("output_dir={}", serde_json::to_string(out).expect("path serializes")));
    }
    if let Cmd::Sft { demos: Some(n), .. } = &args.cmd {
        overrides.push(format!("sft.demos={n}"));
    }
    cli::load_config(args.config.as_deref(), &overrides)
}

fn dispatch(args: &Args) -> Result<cli::CmdOutput, CliError> {
    let loaded = load(args)?;
    let ckpt = args.checkpoint.as_deref();
    match &args.cmd {
        Cmd::Run { task_class, force_answer } => cli::cmd_run(
            &loaded,
            &RunOptions {
                task_class: task_class.as_deref(),
                checkpoint: ckpt,
                force_answer: force_answer.as_deref(),
            },
        ),
        Cmd::Sft { dataset, .. } => cli::cmd_sft(&loaded, dataset.as_deref()).map(|(o, _)| o),
        Cmd::Train => cli::cmd_train(&loaded, ckpt).map(|(o, _)| o),
        Cmd::Eval { episodes, sample } => {
            let mode = if *sample { EvalMode::Sample } else { EvalMode::Greedy };
            cli::cmd_eval(&loaded, ckpt, *episodes, mode).map(|(o, _)| o)
        }
        Cmd::Cards => Ok(cli::CmdOutput {
            stdout: cli::card_file_json(&loaded.scenario) + "\n",
            exit_code: cli::EXIT_OK,
        }),
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    match dispatch(&args) {
        Ok(out) => {
            print!("{}", out.stdout);
            ExitCode::from(out.exit_code as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
