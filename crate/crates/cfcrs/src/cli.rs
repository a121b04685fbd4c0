//! Argument parsing and the process entry point.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::Parser;
use serde_json::{json, Value};

use crate::commands::{run, Command};
use crate::config::{parse_assignment, resolve, Preset, RunConfig};
use crate::error::{Error, Result, EXIT_CONFIG, EXIT_OK};
use crate::formats::read_to_string;

#[derive(Debug, Parser)]
#[command(name = "cfcrs", version, about = "Counterfactual dialogue simulation for conversational recommenders")]
pub struct Cli {
    /// JSON config document, layered over the preset.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value = "default")]
    pub preset: Preset,
    /// Override any config field, e.g. `--set pipeline.courses.mix_ratio=2`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Triples, `head<TAB>relation<TAB>tail`.
    #[arg(long, global = true, value_name = "FILE")]
    pub kg: Option<PathBuf>,
    /// Type map, `entity<TAB>type`.
    #[arg(long, global = true, value_name = "FILE")]
    pub types: Option<PathBuf>,
    /// Dialogue corpus, JSON Lines.
    #[arg(long, global = true, value_name = "FILE")]
    pub dialogues: Option<PathBuf>,
    /// Start from this recommender checkpoint instead of pre-training.
    #[arg(long, global = true, value_name = "FILE")]
    pub rec_checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Number of curriculum courses.
    #[arg(long, global = true)]
    pub courses: Option<usize>,
    #[arg(long, global = true)]
    pub min_support: Option<usize>,
    /// Dialogues to generate (`simulate`).
    #[arg(long, global = true)]
    pub count: Option<usize>,
    /// Seeds for `evaluate` and `sweep`, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Sweep grid values, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub rho: Vec<f64>,
    #[arg(long, global = true, value_delimiter = ',')]
    pub delta: Vec<f64>,
    #[arg(long, global = true, value_delimiter = ',')]
    pub mix: Vec<f64>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

impl Cli {
    /// Flag values as dotted config assignments, after the `--set` ones.
    fn overrides(&self) -> Result<Vec<(String, Value)>> {
        let mut o = self.set.iter().map(|s| parse_assignment(s)).collect::<Result<Vec<_>>>()?;
        let path = |p: &PathBuf| json!(p.to_string_lossy());
        let mut push = |k: &str, v: Option<Value>| {
            if let Some(v) = v {
                o.push((k.to_string(), v));
            }
        };
        push("pipeline.seed", self.seed.map(|s| json!(s)));
        push("paths.output", self.out.as_ref().map(path));
        push("paths.kg", self.kg.as_ref().map(path));
        push("paths.types", self.types.as_ref().map(path));
        push("paths.dialogues", self.dialogues.as_ref().map(path));
        push("paths.rec_checkpoint", self.rec_checkpoint.as_ref().map(path));
        push("workers", self.workers.map(|w| json!(w)));
        push("pipeline.courses.curriculum.courses", self.courses.map(|n| json!(n)));
        push("pipeline.min_support", self.min_support.map(|n| json!(n)));
        push("simulate.count", self.count.map(|n| json!(n)));
        let list = |v: &Vec<f64>| (!v.is_empty()).then(|| json!(v));
        push("seeds", (!self.seeds.is_empty()).then(|| json!(self.seeds)));
        push("sweep.rho", list(&self.rho));
        push("sweep.delta", list(&self.delta));
        push("sweep.mix_ratio", list(&self.mix));
        Ok(o)
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        let file = match &self.config {
            Some(p) => Some(read_to_string(p).map_err(|e| Error::config("config", e.to_string()))?),
            None => None,
        };
        resolve(self.preset, file.as_deref(), &self.overrides()?)
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
    let result = cli.resolve().and_then(|cfg| run(cli.command, &cfg));
    match result {
        Ok(out) => {
            print!("{}", out.text);
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
