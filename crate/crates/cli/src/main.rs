use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sparkdqn::models::ArchKind;
use sparkdqn::snn::DendriteSharing;
use sparkdqn_cli::checkpoint;
use sparkdqn_cli::config::split_override;
use sparkdqn_cli::run::{self, resolve_config};
use sparkdqn_cli::CliError;

#[derive(Parser)]
#[command(name = "sparkdqn", version, about = "Spiking multi-task deep Q-learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a Q-network round-robin over the configured games.
    TrainRl(TrainArgs),
    /// Train the image classifier over one or more datasets.
    TrainClassify(TrainArgs),
    /// Evaluate a checkpoint written by either training command.
    Eval {
        checkpoint: PathBuf,
        /// Episodes per game (RL checkpoints).
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Print the trainable parameter count of a full-size network.
    CountParams {
        #[arg(value_parser = parse_kind)]
        kind: ArchKind,
        #[arg(long, default_value_t = 18)]
        actions: usize,
        #[arg(long, default_value_t = 3)]
        tasks: usize,
        /// `per_neuron` or `shared`.
        #[arg(long, value_parser = parse_sharing, default_value = "per_neuron")]
        sharing: DendriteSharing,
        /// Also print the layer-by-layer extents.
        #[arg(long)]
        layers: bool,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Configuration file of `key=value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

fn parse_kind(s: &str) -> Result<ArchKind, String> {
    s.parse().map_err(|e: sparkdqn::Error| e.to_string())
}

fn parse_sharing(s: &str) -> Result<DendriteSharing, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|e| e.to_string())
}

fn train(args: TrainArgs, classify: bool) -> Result<(), CliError> {
    let resume = args.resume.as_deref().map(checkpoint::load).transpose()?;
    let text = args.config.as_deref().map(std::fs::read_to_string).transpose()?;
    let mut overrides = args.set.iter().map(|s| split_override(s)).collect::<Result<Vec<_>, _>>()?;
    if let Some(seed) = args.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    if let Some(out) = &args.out {
        overrides.push(("out_dir".into(), out.display().to_string()));
    }
    let cfg = resolve_config(resume.as_ref(), text.as_deref(), &overrides)?;
    if classify {
        for r in run::train_classify(&cfg, resume)? {
            println!("{}", serde_json::to_string(&r).map_err(std::io::Error::from)?);
        }
    } else {
        for r in run::train_rl(&cfg, resume)? {
            println!("{}", serde_json::to_string(&r).map_err(std::io::Error::from)?);
        }
    }
    Ok(())
}

fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::TrainRl(args) => train(args, false),
        Command::TrainClassify(args) => train(args, true),
        Command::Eval { checkpoint, episodes } => {
            for line in run::eval(&checkpoint, episodes)?.lines() {
                println!("{line}");
            }
            Ok(())
        }
        Command::CountParams { kind, actions, tasks, sharing, layers } => {
            let (count, trace) = run::count_params(kind, actions, tasks, sharing)?;
            println!("{count}");
            if layers {
                for r in trace {
                    let stream = r.stream.map(|s| format!("[{s}] ")).unwrap_or_default();
                    println!("{stream}{}\t{}\t{}", r.layer, r.input, r.output);
                }
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
