use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gazeprior::{Error, Result};
use gazeprior_cli::{
    cmd_eval, cmd_inspect_attention, cmd_preprocess_gaze, cmd_sweep, cmd_synth,
    cmd_tokenizer_train, cmd_train, Experiment, RunConfig, SynthSpec,
};

#[derive(Parser)]
#[command(
    name = "gazeprior",
    version,
    about = "Gaze-informed attention priors for code summarization"
)]
struct Cli {
    /// Run configuration (TOML, or JSON by extension).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (or file, for inspect-attention).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for evaluation.
    #[arg(long, global = true)]
    device_threads: Option<usize>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn a byte-level BPE vocabulary from a JSONL corpus.
    TokenizerTrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 4096)]
        vocab_size: usize,
    },
    /// Generate a template corpus, gaze set, vocabulary and run config.
    Synth {
        #[arg(long, default_value_t = 500)]
        train: usize,
        #[arg(long, default_value_t = 50)]
        test: usize,
        #[arg(long, default_value_t = 100)]
        gaze: usize,
        #[arg(long, default_value_t = 512)]
        vocab_size: usize,
    },
    /// Align fixations to subtokens and report mapping accuracy.
    PreprocessGaze {
        #[arg(long)]
        gaze: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        sigma_min: f64,
    },
    /// Train per the config's experiment (train or sft_baseline).
    Train,
    /// Greedy generation on a test corpus plus metrics.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, default_value_t = 32)]
        max_new: usize,
    },
    /// Dump the EyeLayer prior for one code snippet.
    InspectAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// File holding the code snippet.
        #[arg(long)]
        code: PathBuf,
    },
    /// Run layer_sweep or mode_ablation (overrides the config's experiment).
    Sweep {
        #[arg(long, value_parser = ["layer_sweep", "mode_ablation"])]
        kind: Option<String>,
    },
}

fn run_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("--config is required for this command".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.paths.out_dir = out.clone();
    }
    if let Some(t) = cli.device_threads {
        cfg.threads = t;
    }
    Ok(cfg)
}

/// Writes a line to stdout; a reader that closed the pipe early is not an error.
fn emit(line: &str) -> Result<()> {
    match writeln!(std::io::stdout(), "{line}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn print<T: serde::Serialize>(value: &T) -> Result<()> {
    emit(&serde_json::to_string_pretty(value)?)
}

fn run(cli: Cli) -> Result<()> {
    let out = || cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    match &cli.cmd {
        Command::TokenizerTrain { corpus, vocab_size } => {
            let path = cli
                .out
                .clone()
                .unwrap_or_else(|| PathBuf::from("vocab.json"));
            let v = cmd_tokenizer_train(corpus, *vocab_size, &path)?;
            emit(&format!("{} entries -> {}", v.len(), path.display()))?;
        }
        Command::Synth {
            train,
            test,
            gaze,
            vocab_size,
        } => {
            let spec = SynthSpec {
                train: *train,
                test: *test,
                gaze: *gaze,
                vocab_size: *vocab_size,
                seed: cli.seed.unwrap_or(0),
            };
            cmd_synth(&spec, &out())?;
            emit(&format!("corpus written to {}", out().display()))?;
        }
        Command::PreprocessGaze {
            gaze,
            vocab,
            sigma_min,
        } => {
            print(&cmd_preprocess_gaze(gaze, vocab, *sigma_min, &out())?)?;
        }
        Command::Train => print(&cmd_train(&run_config(&cli)?)?)?,
        Command::Eval {
            checkpoint,
            test,
            vocab,
            max_new,
        } => {
            let threads = cli.device_threads.unwrap_or(1);
            print(&cmd_eval(
                checkpoint,
                test,
                vocab,
                *max_new,
                threads,
                &out(),
            )?)?;
        }
        Command::InspectAttention {
            checkpoint,
            vocab,
            code,
        } => {
            let path = cli
                .out
                .clone()
                .unwrap_or_else(|| PathBuf::from("attention.json"));
            let code = std::fs::read_to_string(code)?;
            cmd_inspect_attention(checkpoint, vocab, code.trim_end(), &path)?;
            emit(&format!("dump written to {}", path.display()))?;
        }
        Command::Sweep { kind } => {
            let mut cfg = run_config(&cli)?;
            match kind.as_deref() {
                Some("layer_sweep") => cfg.experiment = Experiment::LayerSweep,
                Some("mode_ablation") => cfg.experiment = Experiment::ModeAblation,
                _ => {}
            }
            print(&cmd_sweep(&cfg)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GAZEPRIOR_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let full = e.to_string().replace('\n', " ");
            // Drop the "<kind> error: " lead-in of the display form; the tag replaces it.
            let msg = match full.split_once(": ") {
                Some((head, rest)) if head.ends_with("error") => rest.to_string(),
                _ => full,
            };
            eprintln!("error: {}: {msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
