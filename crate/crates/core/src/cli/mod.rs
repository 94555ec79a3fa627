//! Command-line front end: `pretrain`, `compress`, `evaluate`, `report` and
//! `corpus`.
//!
//! Exit codes: 0 success, 2 usage/config/input, 3 io/format, 4 numerical or
//! dimension failure.

pub mod artifacts;
pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;

use crate::error::AraError;
use crate::zoo::{ModelConfig, PretrainConfig, BYTE_VOCAB};

pub use commands::{cmd_compress, cmd_corpus, cmd_evaluate, cmd_pretrain, cmd_report, EvalReport};
pub use config::CompressSpec;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

pub fn exit_code(err: &AraError) -> i32 {
    match err {
        AraError::Usage(_) | AraError::Config { .. } | AraError::Input(_) => EXIT_USAGE,
        AraError::Io { .. } | AraError::Format { .. } => EXIT_IO,
        AraError::Numerical(_) | AraError::Dimension(_) => EXIT_NUMERICAL,
    }
}

#[derive(Debug, Parser)]
#[command(name = "ara", version, about = "Adaptive rank allocation for low-rank compression of small language models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a dense byte-level model on a corpus.
    Pretrain(PretrainArgs),
    /// Learn a rank allocation and write the compressed model and run artifacts.
    Compress(CompressArgs),
    /// Held-out cross-entropy, perplexity and parameter counts of a model.
    Evaluate(EvaluateArgs),
    /// Write the per-layer ratio table of a compress run.
    Report(ReportArgs),
    /// Write a seeded synthetic text corpus.
    Corpus(CorpusArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

impl OnOff {
    fn enabled(self) -> bool {
        self == OnOff::On
    }
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub model_out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    /// Defaults to twice the width.
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long, default_value_t = 2)]
    pub depth: usize,
    #[arg(long, default_value_t = 3)]
    pub context: usize,
    #[arg(long, default_value_t = 600)]
    pub steps: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 64)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 3e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.0)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.1)]
    pub heldout: f64,
    #[arg(long, default_value_t = 64)]
    pub window: usize,
}

#[derive(Debug, Args)]
pub struct CompressArgs {
    /// TOML file of flat keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Replays the configuration recorded in a run manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long = "D")]
    pub d: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub model_in: Option<PathBuf>,
    #[arg(long)]
    pub model_out: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub heldout: Option<f64>,
    #[arg(long)]
    pub clamp_guidance: Option<OnOff>,
    #[arg(long)]
    pub dense_switch: Option<OnOff>,
}

impl CompressArgs {
    /// Defaults, then manifest, then config file, then flags.
    pub fn resolve(&self) -> Result<CompressSpec, AraError> {
        let mut flat = config::FlatConfig::new();
        if let Some(p) = &self.manifest {
            flat.extend(artifacts::Manifest::load(p)?.config);
        }
        if let Some(p) = &self.config {
            flat.extend(config::load_toml(p)?);
        }
        let path = |p: &PathBuf| Value::String(p.display().to_string());
        let overrides: [(&str, Option<Value>); 18] = [
            ("method", self.method.clone().map(Value::String)),
            ("target_ratio", self.ratio.map(Value::from)),
            ("lambda1", self.lambda1.map(Value::from)),
            ("lambda2", self.lambda2.map(Value::from)),
            ("d", self.d.map(Value::from)),
            ("lr", self.lr.map(Value::from)),
            ("epochs", self.epochs.map(Value::from)),
            ("samples", self.samples.map(Value::from)),
            ("seq_len", self.seq_len.map(Value::from)),
            ("batch_size", self.batch_size.map(Value::from)),
            ("seed", self.seed.map(Value::from)),
            ("corpus", self.corpus.as_ref().map(path)),
            ("model_in", self.model_in.as_ref().map(path)),
            ("model_out", self.model_out.as_ref().map(path)),
            ("out_dir", self.out_dir.as_ref().map(path)),
            ("heldout", self.heldout.map(Value::from)),
            ("clamp_guidance", self.clamp_guidance.map(|v| Value::Bool(v.enabled()))),
            ("dense_switch", self.dense_switch.map(|v| Value::Bool(v.enabled()))),
        ];
        for (k, v) in overrides {
            if let Some(v) = v {
                flat.insert(k.into(), v);
            }
        }
        CompressSpec::from_flat(&flat)
    }
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Trailing fraction of the corpus evaluated.
    #[arg(long, default_value_t = 0.1)]
    pub heldout: f64,
    #[arg(long, default_value_t = 64)]
    pub window: usize,
    /// Print the report as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub run_dir: PathBuf,
    /// Defaults to `<run-dir>/ratios.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1_100_000)]
    pub bytes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn run(cli: Cli) -> Result<(), AraError> {
    match cli.command {
        Command::Pretrain(a) => {
            let mut config = ModelConfig::new(a.width, a.depth, BYTE_VOCAB);
            config.context = a.context;
            if let Some(h) = a.hidden {
                config.hidden = h;
            }
            let spec = commands::PretrainSpec {
                corpus: a.corpus,
                model_out: a.model_out.clone(),
                config,
                train: PretrainConfig {
                    steps: a.steps,
                    batch_size: a.batch_size,
                    seq_len: a.seq_len,
                    lr: a.lr,
                    weight_decay: a.weight_decay,
                    seed: a.seed,
                },
                heldout: a.heldout,
                eval_window: a.window,
            };
            let r = cmd_pretrain(&spec)?;
            println!("params            {}", r.params);
            println!("initial held-out  {:.6}", r.initial_ce);
            println!("final train loss  {:.6}", r.final_train_loss);
            println!("held-out CE       {:.6}", r.heldout_ce);
            println!("wrote             {}", a.model_out.display());
        }
        Command::Compress(a) => {
            let spec = a.resolve()?;
            let out = cmd_compress(&spec)?;
            let alloc = &out.allocation;
            println!(
                "method {} target {} realized {:.6} scale {:.6} dense layers {}",
                alloc.method, alloc.target_ratio, alloc.realized_ratio, alloc.scale, alloc.dense_layers
            );
            for l in &alloc.layers {
                let rank = l.rank.map(|r| r.to_string()).unwrap_or_else(|| "-".into());
                println!("  {:<16} {:>4}x{:<4} {:<8} rank {:>4} R {:.4} G_R {:.4}", l.name, l.m, l.n, l.mode, rank, l.ratio, l.capacity);
            }
            println!("wrote {} and run artifacts in {}", out.model_path.display(), out.out_dir.display());
        }
        Command::Evaluate(a) => {
            let r = cmd_evaluate(&a.model, &a.corpus, a.heldout, a.window)?;
            if a.json {
                let text = serde_json::to_string_pretty(&r).map_err(|e| AraError::input(e.to_string()))?;
                println!("{text}");
            } else {
                println!("held-out CE          {:.6}", r.ce);
                println!("perplexity           {:.4}", r.perplexity);
                println!("tokens               {}", r.tokens);
                println!("params               {}", r.params);
                println!("dense-equivalent     {}", r.dense_equivalent_params);
                println!("layer params         {} of {}", r.layer_stored_params, r.layer_dense_params);
                println!("compression ratio    {:.6}", r.compression_ratio);
            }
        }
        Command::Report(a) => {
            let path = cmd_report(&a.run_dir, a.out.as_deref())?;
            println!("wrote {}", path.display());
        }
        Command::Corpus(a) => {
            let n = cmd_corpus(&a.out, a.bytes, a.seed)?;
            println!("wrote {n} bytes to {}", a.out.display());
        }
    }
    Ok(())
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
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
