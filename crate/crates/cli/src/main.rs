//! `mse2e`: one binary for the whole experiment pipeline.
//!
//! Exit codes separate the failure classes: 2 for configuration problems,
//! 3 for I/O and malformed files, 4 for numeric failures. Success is 0.

use clap::{Parser, Subcommand};
use mse2e_cli::{analyze, commands};
use mse2e_core::Error;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "mse2e", version, about = "Multi-stream sequence recognition pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic two-view corpus from a config.
    Gen {
        #[arg(long)]
        config: PathBuf,
        /// Directory for feature files, transcripts, and the config echo.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the recognizer and the label language model.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Corpus directory produced by `gen`.
        #[arg(long)]
        data: PathBuf,
        /// Directory for checkpoints and loss logs.
        #[arg(long)]
        out: PathBuf,
    },
    /// Beam-search decode a data set and write n-best lists.
    Decode {
        #[arg(long)]
        model: PathBuf,
        /// Language-model checkpoint; omit to decode without one.
        #[arg(long)]
        lm: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Output directory (defaults to the working directory).
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Which side of the corpus to decode.
        #[arg(long, default_value = "test")]
        set: String,
        /// Beam width override.
        #[arg(long)]
        beam: Option<usize>,
        /// Lattice weight in the joint score, in [0, 1].
        #[arg(long = "ctc-weight")]
        ctc_weight: Option<f64>,
        /// Language-model weight in the joint score.
        #[arg(long = "lm-weight")]
        lm_weight: Option<f64>,
        /// Hypotheses reported per utterance.
        #[arg(long)]
        nbest: Option<usize>,
        /// Length cap as a fraction of the shortest encoded stream.
        #[arg(long = "max-len-ratio")]
        max_len_ratio: Option<f64>,
        /// Also write the per-step attention of each best hypothesis.
        #[arg(long = "dump-attention")]
        dump_attention: bool,
    },
    /// Character error rate of a hypothesis file against a reference.
    Score {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        hyp: PathBuf,
    },
    /// Stream-reliability studies.
    Analyze {
        #[command(subcommand)]
        what: AnalyzeCmd,
    },
}

#[derive(Subcommand)]
enum AnalyzeCmd {
    /// Corrupt the first feature view at decode time and measure how the
    /// stream attention and error rate respond.
    Shift {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        lm: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Noise level added to the first view.
        #[arg(long)]
        sigma: f64,
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Retrain with the second encoder muted, shallow, and deep; report
    /// the fusion weight it earns per capacity setting.
    Weaken {
        /// Checkpoint supplying the config (weights are retrained).
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Training seeds per capacity setting.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
}

fn run(cli: Cli) -> mse2e_core::Result<()> {
    match cli.cmd {
        Cmd::Gen { config, out } => commands::cmd_gen(&config, &out),
        Cmd::Train { config, data, out } => commands::cmd_train(&config, &data, &out),
        Cmd::Decode {
            model,
            lm,
            data,
            out,
            set,
            beam,
            ctc_weight,
            lm_weight,
            nbest,
            max_len_ratio,
            dump_attention,
        } => commands::cmd_decode(&commands::DecodeArgs {
            model,
            lm,
            data,
            out,
            set,
            beam,
            ctc_weight,
            lm_weight,
            nbest,
            max_len_ratio,
            dump_attention,
        }),
        Cmd::Score { reference, hyp } => {
            print!("{}", commands::score_report(&reference, &hyp)?);
            Ok(())
        }
        Cmd::Analyze { what } => match what {
            AnalyzeCmd::Shift { model, lm, data, out, sigma, beam } => {
                analyze::cmd_shift(&analyze::ShiftArgs { model, lm, data, out, sigma, beam })
            }
            AnalyzeCmd::Weaken { model, data, out, seeds } => {
                analyze::cmd_weaken(&analyze::WeakenArgs { model, data, out, seeds })
            }
        },
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Alphabet(_) | Error::InputTooShort { .. } => 2,
        Error::Io { .. } | Error::Format { .. } | Error::Join(_) => 3,
        Error::Numeric(_) => 4,
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
