//! `lorp`: corpus generation, training, personalization, synthesis,
//! evaluation and sweeps.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 missing input file,
//! 3 invalid configuration or input, 4 hash mismatch.

mod commands;
mod manifest;

use std::io::ErrorKind;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lorp::Error;

#[derive(Parser, Debug)]
#[command(name = "lorp", version = concat!(env!("CARGO_PKG_VERSION"), " (checkpoint format LORPCKPT1)"), about)]
struct Cli {
    /// Root seed; every component derives its own seed from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus.
    GenCorpus {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the base model, duration predictor and frame classifier.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit adapters to one or more prompt files.
    Adapt {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "prompt", required = true)]
        prompts: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthesize a token sequence in the prompt's voice.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        adapters: Option<PathBuf>,
        #[arg(long)]
        prompt: PathBuf,
        /// Token ids separated by spaces or commas.
        #[arg(long)]
        text: String,
        #[arg(long)]
        ode_steps: Option<usize>,
        /// Feature CSV output.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        wav: Option<PathBuf>,
    },
    /// Score a single configuration.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Report CSV; a JSON copy is written alongside.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a grid of configurations; finished cells are reused.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Print the configuration keys.
    Schema,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { source, .. } if source.kind() == ErrorKind::NotFound => 2,
        Error::Config(_)
        | Error::Invalid(_)
        | Error::Dim(_)
        | Error::Missing { .. }
        | Error::RankTooLarge { .. }
        | Error::Archive { .. }
        | Error::InfeasibleTarget { .. } => 3,
        Error::HashMismatch { .. } => 4,
        _ => 1,
    }
}

fn run(cli: Cli) -> lorp::Result<()> {
    let seed = cli.seed;
    match &cli.command {
        Command::GenCorpus { config, out } => commands::gen_corpus(config.as_deref(), out, seed),
        Command::Train { config, corpus, out } => commands::train(config.as_deref(), corpus, out, seed),
        Command::Adapt {
            config,
            checkpoint,
            prompts,
            out,
        } => commands::adapt_cmd(config.as_deref(), checkpoint, prompts, out, seed),
        Command::Synth {
            config,
            checkpoint,
            adapters,
            prompt,
            text,
            ode_steps,
            out,
            wav,
        } => commands::synth(
            &commands::SynthArgs {
                config: config.as_deref(),
                checkpoint,
                adapters: adapters.as_deref(),
                prompt,
                text,
                ode_steps: *ode_steps,
                out,
                wav: wav.as_deref(),
            },
            seed,
        ),
        Command::Eval {
            config,
            checkpoint,
            corpus,
            out,
        } => commands::eval(config.as_deref(), checkpoint, corpus, out, seed),
        Command::Sweep {
            config,
            checkpoint,
            corpus,
            out,
            jobs,
        } => commands::sweep(config.as_deref(), checkpoint, corpus, out, *jobs, seed),
        Command::Schema => {
            print!("{}", lorp::config::schema_doc());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 3 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn version_names_checkpoint_format() {
        let v = Cli::command().get_version().unwrap().to_string();
        assert!(v.ends_with(&format!("(checkpoint format {})", lorp::system::FORMAT_VERSION)));
        Cli::command().debug_assert();
    }

    #[test]
    fn exit_codes_are_distinct() {
        let missing = Error::io("x", std::io::Error::from(ErrorKind::NotFound));
        let denied = Error::io("x", std::io::Error::from(ErrorKind::PermissionDenied));
        let hash = Error::HashMismatch {
            what: "x".into(),
            expected: "a".into(),
            found: "b".into(),
        };
        assert_eq!(
            [missing, Error::Config("bad".into()), hash, denied].iter().map(exit_code).collect::<Vec<_>>(),
            [2, 3, 4, 1]
        );
    }

    #[test]
    fn text_parsing() {
        assert_eq!(commands::parse_text("3 1,4  1").unwrap(), vec![3, 1, 4, 1]);
        assert!(commands::parse_text("3 x").is_err());
    }
}
