//! `salientsleep`: prepare recordings, train and evaluate folds, count
//! parameters and export stream activations.

mod params;
mod prepare;
mod run;
mod saliency;

use std::path::Path;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use salientsleep::model::{ModelConfig, Variant};
use salientsleep::Error;
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "salientsleep", version, about = "Sleep staging from single-channel EEG and EOG")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse EDF recordings and hypnograms into epoch caches.
    Prepare(prepare::Args),
    /// Train one cross-validation fold.
    Train(run::TrainArgs),
    /// Re-evaluate a trained fold from its checkpoint.
    Eval(run::EvalArgs),
    /// Print the parameter count of a variant.
    Params(params::Args),
    /// Export per-sample stream activations for a cached night.
    Saliency(saliency::Args),
}

/// Model size presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    /// 20 epochs per window and the full filter widths.
    Full,
    /// 4 epochs per window, narrow filters and shallow units.
    Small,
    /// 2 epochs of 100 samples. Only for parameter accounting, since caches
    /// hold 3000-sample epochs.
    Toy,
}

impl Scale {
    pub fn config(self, variant: Variant) -> ModelConfig {
        let base = match self {
            Scale::Full => ModelConfig::default(),
            Scale::Small => ModelConfig::small(),
            Scale::Toy => ModelConfig::toy(),
        };
        base.with_variant(variant)
    }
}

pub fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> salientsleep::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> salientsleep::Result<T> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Ok(serde_json::from_str(&text)?)
}

/// 0 success, 1 usage, 2 bad input data, 3 numeric failure.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric(_) => 3,
        Error::Config(_) | Error::Argument(_) => 1,
        Error::Shape(_) => 2,
        e if e.is_data_error() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Prepare(a) => prepare::run(a),
        Command::Train(a) => run::train(a),
        Command::Eval(a) => run::eval(a),
        Command::Params(a) => params::run(a),
        Command::Saliency(a) => saliency::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
