//! Command-line driver for the embedding pipeline.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use pinfuse::Error;
use serde_json::json;

use crate::commands::{Ctx, Dtype};
use crate::config::{key_listing, RunConfig};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_IO: i32 = 4;
pub const EXIT_FORMAT: i32 = 5;
pub const EXIT_PRECONDITION: i32 = 6;
pub const EXIT_DIVERGED: i32 = 7;
pub const EXIT_GRADCHECK: i32 = 8;

#[derive(Debug, Parser)]
#[command(name = "pinfuse", version, about = "Train, export and evaluate multimodal pin embeddings")]
pub struct Cli {
    /// TOML config file; omitted keys keep their defaults.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.steps=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus, graphs and filter survivors.
    GenData,
    /// Build the random-walk neighbor cache.
    BuildCache,
    /// Sample neighbor training pairs from the cache.
    SamplePairs,
    /// Train the model and write the checkpoint and metrics.
    Train {
        /// Continue from the saved checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Export float embedding stores per modality and prefix.
    Embed,
    /// Write int8 copies of the float stores.
    Quantize,
    /// Compute Recall@K for every task.
    Eval {
        /// Prefix length; defaults to the full width.
        #[arg(long)]
        prefix: Option<usize>,
        /// float32 or int8.
        #[arg(long, default_value = "float32")]
        dtype: String,
    },
    /// Finite-difference audit of the full pipeline.
    Gradcheck,
    /// Print every config key with its default.
    Keys,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Io { .. } => EXIT_IO,
        Error::Format { .. } => EXIT_FORMAT,
        Error::Precondition(_) | Error::Tensor(_) => EXIT_PRECONDITION,
        Error::Diverged { .. } => EXIT_DIVERGED,
    }
}

fn kind(code: i32) -> &'static str {
    match code {
        EXIT_USAGE => "usage",
        EXIT_CONFIG => "config",
        EXIT_IO => "io",
        EXIT_FORMAT => "format",
        EXIT_PRECONDITION => "precondition",
        EXIT_DIVERGED => "diverged",
        EXIT_GRADCHECK => "gradcheck",
        _ => "error",
    }
}

fn fail(err: &mut dyn Write, code: i32, message: &str) -> i32 {
    let line = json!({ "error": kind(code), "code": code, "message": message });
    let _ = writeln!(err, "{line}");
    code
}

pub fn command() -> clap::Command {
    Cli::command().after_long_help(format!("Config keys (name = default):\n{}", key_listing()))
}

/// Parses `args` (program name first), runs one command and returns the
/// exit status. Success summaries go to `out`, errors to `err` as one
/// JSON line.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match command().try_get_matches_from(args).and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{}", e.render());
                    0
                }
                _ => {
                    let msg = e.render().to_string();
                    let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
                    fail(err, EXIT_USAGE, &first)
                }
            };
        }
    };
    if let Command::Keys = cli.command {
        let _ = write!(out, "{}", key_listing());
        return 0;
    }
    let cfg = match RunConfig::load(cli.config.as_deref(), &cli.overrides) {
        Ok(c) => c,
        Err(e) => return fail(err, exit_code(&e), &e.to_string()),
    };
    let ctx = Ctx::new(&cfg);
    let result = match cli.command {
        Command::GenData => commands::gen_data(&ctx),
        Command::BuildCache => commands::build_cache(&ctx),
        Command::SamplePairs => commands::sample_pairs_cmd(&ctx),
        Command::Train { resume } => commands::train(&ctx, resume),
        Command::Embed => commands::embed(&ctx),
        Command::Quantize => commands::quantize(&ctx),
        Command::Eval { prefix, dtype } => match Dtype::parse(&dtype) {
            Some(d) => commands::eval(&ctx, prefix, d).map(|(v, _)| v),
            None => return fail(err, EXIT_USAGE, &format!("unknown dtype `{dtype}`; use float32 or int8")),
        },
        Command::Gradcheck => match commands::gradcheck(&ctx) {
            Ok((v, o)) if !o.passed() => {
                let _ = writeln!(out, "{v}");
                return fail(
                    err,
                    EXIT_GRADCHECK,
                    &format!("max relative error {:e} exceeds {:e}", o.max_rel_error, o.tolerance),
                );
            }
            r => r.map(|(v, _)| v),
        },
        Command::Keys => unreachable!("handled above"),
    };
    match result {
        Ok(v) => {
            let _ = writeln!(out, "{v}");
            0
        }
        Err(e) => fail(err, exit_code(&e), &e.to_string()),
    }
}
