use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ngrammer::BenchSettings;
use ngrammer_cli::commands::{self, ModelSource};
use ngrammer_cli::CliError;

#[derive(Parser)]
#[command(name = "ngrammer", version, about = "Train and inspect N-Grammer language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, log and metrics.
    Train {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Held-out perplexity of a trained model.
    Eval {
        /// Directory written by `train`.
        checkpoint: PathBuf,
        /// Read latents from the cache built by `build-cache`.
        #[arg(long)]
        use_cache: bool,
    },
    /// Train every N-Grammer insertion point and report perplexities.
    AblatePosition {
        config: PathBuf,
        /// Seeds per variant; the table reports the median.
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the token-to-latent cache of a trained model.
    BuildCache {
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Report which tokens share a cluster.
    Inspect {
        /// Directory written by `train`.
        #[arg(long, conflicts_with = "config", required_unless_present = "config")]
        checkpoint: Option<PathBuf>,
        /// Inspect an untrained model built from this config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Most populated clusters per head; all of them when omitted.
        #[arg(long)]
        top: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time assignment against cached lookup across codebook sizes.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = [256usize, 1024, 4096])]
        k: Vec<usize>,
        #[arg(long, default_value_t = 20_000)]
        tokens: usize,
        #[arg(long, default_value_t = 4096)]
        vocab: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => Box::new(std::io::BufWriter::new(
            std::fs::File::create(p).map_err(|e| CliError::io(p, e))?,
        )),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config, out } => {
            let m = commands::cmd_train(&config, &out)?;
            println!("steps\t{}\nfinal_loss\t{:.6}\nperplexity\t{:.6}", m.steps, m.final_loss, m.perplexity);
        }
        Command::Eval { checkpoint, use_cache } => {
            let ppl = commands::cmd_eval(&checkpoint, use_cache)?;
            println!("perplexity\t{ppl:?}");
        }
        Command::AblatePosition { config, seeds, out } => {
            let mut w = output(&out)?;
            let rows = commands::cmd_ablate_position(&config, seeds, &mut w)?;
            w.flush().map_err(|e| CliError::Io(e.to_string()))?;
            let best = rows.iter().min_by(|a, b| a.perplexity.total_cmp(&b.perplexity));
            if let Some(best) = best {
                eprintln!("lowest perplexity: {} ({:.4})", best.variant, best.perplexity);
            }
        }
        Command::BuildCache { checkpoint, out } => {
            let path = commands::cmd_build_cache(&checkpoint, out.as_deref())?;
            eprintln!("wrote {}", path.display());
        }
        Command::Inspect { checkpoint, config, top, out } => {
            let source = match (checkpoint, config) {
                (Some(dir), _) => ModelSource::Checkpoint(dir),
                (None, Some(cfg)) => ModelSource::Config(cfg),
                (None, None) => unreachable!("clap requires one source"),
            };
            let mut w = output(&out)?;
            let report = commands::cmd_inspect(&source, top, &mut w)?;
            w.flush().map_err(|e| CliError::Io(e.to_string()))?;
            for head in 0..report.heads() {
                eprintln!("head {head}: {} of {} clusters used", report.nonempty_clusters(head), report.k());
            }
        }
        Command::Bench { k, tokens, vocab, repeats, out } => {
            let settings = BenchSettings {
                vocab,
                repeats,
                ..BenchSettings::default()
            };
            let mut w = output(&out)?;
            commands::cmd_bench(&k, tokens, settings, &mut w)?;
            w.flush().map_err(|e| CliError::Io(e.to_string()))?;
        }
    }
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
