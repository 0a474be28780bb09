//! `attnforge` command-line driver.
//!
//! Exit codes: 0 when every check passes, 1 on a semantic or tolerance
//! failure, 2 on unreadable or invalid input.

mod commands;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use attnforge::{builtin, AttentionSpec, DeviceConfig, VariantFile};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "attnforge", version, about = "Compile, check and schedule attention variants")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// List built-in variants.
    List {
        #[arg(long)]
        json: bool,
    },
    /// Compare the blockwise executor against the plain reference.
    Check(CheckArgs),
    /// Compare autodiff gradients against central finite differences.
    Gradcheck(GradArgs),
    /// Pick a tile configuration and memory plan for a device.
    Schedule(ScheduleArgs),
    /// Schedule, lower and write kernel text.
    Emit(EmitArgs),
    /// Time reference and blockwise executors.
    Bench(BenchArgs),
}

#[derive(Args, Clone)]
pub struct VariantArgs {
    /// Built-in variant name.
    #[arg(value_name = "VARIANT")]
    name: Option<String>,
    /// Built-in variant name (alternative to the positional form).
    #[arg(long = "variant", conflicts_with = "name")]
    flag_name: Option<String>,
    /// Variant definition file (JSON).
    #[arg(long, conflicts_with_all = ["name", "flag_name"])]
    file: Option<PathBuf>,
    /// Multiplier on both sequence lengths.
    #[arg(long)]
    scale: Option<f64>,
    /// Override the query length (e.g. `--seqq 1` for decoding).
    #[arg(long)]
    seqq: Option<usize>,
    /// Instance seed; falls back to ATTNFORGE_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
pub struct CheckArgs {
    #[command(flatten)]
    variant: VariantArgs,
    /// Check only this block (parallel) or chunk (recurrent) size.
    #[arg(long)]
    chunk: Option<usize>,
}

#[derive(Args)]
pub struct GradArgs {
    #[command(flatten)]
    variant: VariantArgs,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    /// Sampled coordinates per input tensor; 0 compares every element.
    #[arg(long, default_value_t = 24)]
    samples: usize,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Mode {
    Analytic,
    Measured,
}

#[derive(Args)]
pub struct ScheduleArgs {
    #[command(flatten)]
    variant: VariantArgs,
    /// Device description (JSON); the built-in default device otherwise.
    #[arg(long)]
    device: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Mode::Analytic)]
    mode: Mode,
    /// Also run the brute-force search and compare costs.
    #[arg(long)]
    verify: bool,
}

#[derive(Args)]
pub struct EmitArgs {
    #[command(flatten)]
    variant: VariantArgs,
    #[arg(long)]
    device: Option<PathBuf>,
    /// Output path; stdout when absent.
    #[arg(short = 'o', long = "output")]
    output: Option<PathBuf>,
    /// Run the lowered kernel on the reference engine and compare.
    #[arg(long)]
    check: bool,
}

#[derive(Args)]
pub struct BenchArgs {
    /// Variants to time; every built-in when empty.
    #[arg(value_name = "VARIANT")]
    names: Vec<String>,
    #[arg(long, default_value_t = 1.0 / 16.0)]
    scale: f64,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    /// Block (or chunk) sizes, one row per size.
    #[arg(long, value_delimiter = ',', default_value = "64")]
    blocks: Vec<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    json: bool,
}

/// Input that could not be read or validated; exits with status 2.
#[derive(Debug)]
pub struct InputError(String);

impl fmt::Display for InputError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

pub fn input_error(msg: impl fmt::Display) -> anyhow::Error {
    anyhow::Error::new(InputError(msg.to_string()))
}

pub fn resolve_seed(flag: Option<u64>) -> anyhow::Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var("ATTNFORGE_SEED") {
        Ok(v) => v.trim().parse().map_err(|_| input_error(format!("ATTNFORGE_SEED=`{v}` is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

impl VariantArgs {
    /// Loads the variant and applies `--scale` (or `default_scale`) and `--seqq`.
    pub fn load(&self, default_scale: f64) -> anyhow::Result<AttentionSpec> {
        let spec = match (&self.file, self.name.as_ref().or(self.flag_name.as_ref())) {
            (Some(path), _) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))
                    .map_err(|e| input_error(format!("{e:#}")))?;
                let file =
                    VariantFile::from_json(&text).map_err(|e| input_error(format!("{}: {e}", path.display())))?;
                file.to_spec().map_err(|e| input_error(format!("{}: {e}", path.display())))?
            }
            (None, Some(name)) => builtin(name).map_err(input_error)?,
            (None, None) => return Err(input_error("name a built-in variant or pass --file")),
        };
        let scale = self.scale.unwrap_or(default_scale);
        if !(scale.is_finite() && scale > 0.0) {
            return Err(input_error(format!("--scale must be positive, got {scale}")));
        }
        let mut dims = spec.dims.scaled(scale);
        if let Some(s) = self.seqq {
            if s == 0 {
                return Err(input_error("--seqq must be positive"));
            }
            if spec.pattern == attnforge::Pattern::Recurrent {
                return Err(input_error("--seqq applies to parallel variants only"));
            }
            dims.seq_q = s;
        }
        let spec = spec.with_dims(dims);
        spec.validate().map_err(input_error)?;
        Ok(spec)
    }

    pub fn seed(&self) -> anyhow::Result<u64> {
        resolve_seed(self.seed)
    }
}

pub fn load_device(path: &Option<PathBuf>) -> anyhow::Result<DeviceConfig> {
    match path {
        None => Ok(DeviceConfig::default_device()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| input_error(format!("reading {}: {e}", p.display())))?;
            DeviceConfig::from_json(&text).map_err(|e| input_error(format!("{}: {e}", p.display())))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::List { json } => commands::list(*json),
        Command::Check(a) => commands::check(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Schedule(a) => commands::schedule(a),
        Command::Emit(a) => commands::emit(a),
        Command::Bench(a) => commands::bench(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<InputError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
