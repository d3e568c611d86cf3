use std::process::ExitCode;

use clap::Parser;

use dtaad_cli::args::{Cli, Command};
use dtaad_cli::commands::{cmd_detect, cmd_evaluate, cmd_run, cmd_synth, cmd_train, AGGREGATE_FILE, CHECKPOINT_FILE, SCORES_FILE};
use dtaad_cli::{exit_code, UsageError};

fn init_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("DTAAD_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| UsageError(format!("DTAAD_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads()?;
    match cli.command {
        Command::Synth(args) => cmd_synth(&args.spec(), &args.out),
        Command::Train(args) => cmd_train(&args.resolve()?).map(|_| ()),
        Command::Detect(args) => {
            let cfg = args.common.resolve()?;
            let ckpt = args.checkpoint.unwrap_or_else(|| cfg.out.join(CHECKPOINT_FILE));
            cmd_detect(&cfg, &ckpt).map(|_| ())
        }
        Command::Evaluate(args) => {
            let cfg = args.common.resolve()?;
            let scores = args.scores.unwrap_or_else(|| cfg.out.join(SCORES_FILE));
            let preds = args.predictions.unwrap_or_else(|| cfg.out.join(AGGREGATE_FILE));
            cmd_evaluate(&cfg, &scores, &preds, None).map(|_| ())
        }
        Command::Run(args) => cmd_run(&args.resolve()?).map(|_| ()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err) as u8)
        }
    }
}
