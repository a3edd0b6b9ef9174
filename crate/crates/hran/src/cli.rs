//! Argument parsing and dispatch.

use std::ffi::OsString;
use std::io::{BufRead, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hran_core::corpus::{FilterRules, Side};
use hran_core::evaluation::Normalization;

use crate::chat::DEFAULT_OPENING;
use crate::checkpoint::Checkpoint;
use crate::commands::{self, ExportPaths};
use crate::config::DecodeOptions;
use crate::error::{CliError, CliResult, EXIT_OK, EXIT_USAGE};

#[derive(Debug, Parser)]
#[command(
    name = "hran",
    version,
    about = "Hierarchical recurrent attention network for multi-turn response generation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SideArg {
    Context,
    Response,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum NormArg {
    Tokens,
    Examples,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    /// Beam width [default: checkpoint setting, else 10]
    #[arg(long)]
    pub beam: Option<usize>,
    /// Responses kept per context [default: checkpoint setting, else 1]
    #[arg(long)]
    pub nbest: Option<usize>,
    /// Token budget per response, EOS included [default: checkpoint setting, else 50]
    #[arg(long = "max-len")]
    pub max_len: Option<usize>,
    /// Let the decoder emit the unknown-word token
    #[arg(long = "allow-unk")]
    pub allow_unk: bool,
}

impl DecodeArgs {
    fn resolve(&self, ckpt_defaults: &DecodeOptions) -> DecodeOptions {
        DecodeOptions {
            beam: self.beam.unwrap_or(ckpt_defaults.beam),
            n_best: self.nbest.unwrap_or(ckpt_defaults.n_best),
            max_len: self.max_len.unwrap_or(ckpt_defaults.max_len),
            allow_unk: self.allow_unk || ckpt_defaults.allow_unk,
            length_normalize: ckpt_defaults.length_normalize,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Filter a raw corpus into JSON Lines examples
    Prep {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "min-turns", default_value_t = 3)]
        min_turns: usize,
        #[arg(long = "max-utt-len", default_value_t = 50)]
        max_utt_len: usize,
        #[arg(long = "max-resp-count", default_value_t = 50)]
        max_resp_count: usize,
    },
    /// Shuffle examples into train, validation and test files
    Split {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        valid: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Three fractions, comma separated
        #[arg(long, value_delimiter = ',', default_values_t = [0.9, 0.05, 0.05])]
        fractions: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Build a vocabulary file from one side of the examples
    Vocab {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        side: SideArg,
        /// Words kept besides the four reserved tokens
        #[arg(long, default_value_t = 40000)]
        size: usize,
    },
    /// Train a model as described by a JSON run config
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a last-epoch checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Teacher-forced perplexity of a checkpoint on examples
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Perplexity normalization [default: as trained]
        #[arg(long, value_enum)]
        normalization: Option<NormArg>,
        /// Write the report here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decode responses for contexts (one per line, TAB between turns)
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        contexts: PathBuf,
        #[command(flatten)]
        decode: DecodeArgs,
        /// Greedy decoding instead of beam search
        #[arg(long, conflicts_with_all = ["beam", "nbest"])]
        greedy: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Talk to a checkpoint; commands: /reset, /trace on|off, /quit
    Chat {
        #[arg(long)]
        ckpt: PathBuf,
        /// Print utterance weights after every response
        #[arg(long)]
        trace: bool,
        /// The bot's first turn, which completes the first context
        #[arg(long, default_value = DEFAULT_OPENING)]
        opening: String,
        #[command(flatten)]
        decode: DecodeArgs,
    },
    /// Export step-averaged attention weights as JSON and an SVG heatmap
    AttnExport {
        #[arg(long)]
        ckpt: PathBuf,
        /// One utterance per line
        #[arg(long)]
        context: PathBuf,
        /// Response to score; greedy decoding when absent
        #[arg(long)]
        response: Option<PathBuf>,
        #[arg(long)]
        json: PathBuf,
        #[arg(long)]
        svg: PathBuf,
        #[arg(long = "max-len")]
        max_len: Option<usize>,
        #[arg(long = "allow-unk")]
        allow_unk: bool,
    },
    /// Train every attention variant of a run config and compare perplexities
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn decode_defaults(ckpt: &std::path::Path) -> CliResult<DecodeOptions> {
    Ok(Checkpoint::load(ckpt)?.run.decode)
}

pub fn execute(cmd: Command, stdin: &mut dyn BufRead, out: &mut dyn Write) -> CliResult<()> {
    match cmd {
        Command::Prep {
            input,
            out: output,
            min_turns,
            max_utt_len,
            max_resp_count,
        } => {
            let rules = FilterRules {
                min_turns,
                max_utterance_len: max_utt_len,
                max_response_count: max_resp_count,
            };
            commands::prep(&input, &output, &rules, out)
        }
        Command::Split {
            input,
            train,
            valid,
            test,
            fractions,
            seed,
        } => {
            let f: [f64; 3] = fractions
                .try_into()
                .map_err(|_| CliError::Usage("--fractions takes three values".into()))?;
            commands::split(&input, [&train, &valid, &test], f, seed, out)
        }
        Command::Vocab {
            input,
            out: output,
            side,
            size,
        } => {
            let side = match side {
                SideArg::Context => Side::Context,
                SideArg::Response => Side::Response,
            };
            commands::vocab(&input, &output, side, size, out)
        }
        Command::Train { config, resume } => commands::train(&config, resume.as_deref(), out),
        Command::Eval {
            ckpt,
            data,
            normalization,
            out: output,
        } => {
            let norm = normalization.map(|n| match n {
                NormArg::Tokens => Normalization::Tokens,
                NormArg::Examples => Normalization::Examples,
            });
            commands::eval(&ckpt, &data, norm, output.as_deref(), out)
        }
        Command::Generate {
            ckpt,
            contexts,
            decode,
            greedy,
            out: output,
        } => {
            let opts = decode.resolve(&decode_defaults(&ckpt)?);
            commands::generate(&ckpt, &contexts, &opts, greedy, output.as_deref(), out)
        }
        Command::Chat {
            ckpt,
            trace,
            opening,
            decode,
        } => {
            let opts = decode.resolve(&decode_defaults(&ckpt)?);
            commands::chat(&ckpt, &opts, &opening, trace, stdin, out)
        }
        Command::AttnExport {
            ckpt,
            context,
            response,
            json,
            svg,
            max_len,
            allow_unk,
        } => {
            let defaults = decode_defaults(&ckpt)?;
            let opts = DecodeOptions {
                max_len: max_len.unwrap_or(defaults.max_len),
                allow_unk: allow_unk || defaults.allow_unk,
                ..defaults
            };
            let paths = ExportPaths {
                context: &context,
                response: response.as_deref(),
                json: &json,
                svg: &svg,
            };
            commands::attn_export(&ckpt, &paths, &opts)
        }
        Command::Ablate { config } => commands::ablate(&config, out),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Errors are reported on `err`.
pub fn run<I, T>(args: I, stdin: &mut dyn BufRead, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                err.write_all(text.as_bytes())
            } else {
                out.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match execute(cli.command, stdin, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let mut shown = e.to_string();
            let _ = writeln!(err, "error: {shown}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                // most messages already embed their source
                let text = s.to_string();
                if !shown.contains(&text) {
                    let _ = writeln!(err, "  caused by: {text}");
                    shown = text;
                }
                source = s.source();
            }
            e.exit_code()
        }
    }
}
