use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use clutch_core::experiment::{self, ExperimentConfig};
use clutch_core::model::{decode_checkpoint, read_entries, InputSpec};
use clutch_core::Error;

/// Overrides the root that relative `run.output_dir` paths resolve against.
const OUTPUT_ROOT_VAR: &str = "CLUTCH_OUTPUT_ROOT";

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "clutch", version, about = "Run and summarize CLUTCH bandit experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed of an experiment and write its run directory.
    Run {
        /// TOML config; keys it sets override the preset.
        #[arg(long)]
        config: Option<PathBuf>,
        /// comb-small, comb-paper, volatile-small or fuzz-small.
        #[arg(long)]
        preset: Option<String>,
        /// Added to every configured seed.
        #[arg(long, default_value_t = 0)]
        seed_offset: u64,
    },
    /// Compare completed run directories by their headline metric.
    Summarize {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Print the contents of a model checkpoint.
    CheckpointInspect { file: PathBuf },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_config_error() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn output_dir(config: &ExperimentConfig) -> PathBuf {
    let dir = &config.run.output_dir;
    match std::env::var_os(OUTPUT_ROOT_VAR) {
        Some(root) if dir.is_relative() => Path::new(&root).join(dir),
        _ => dir.clone(),
    }
}

fn load_config(config: Option<&Path>, preset: Option<&str>, seed_offset: u64) -> Result<ExperimentConfig, Failure> {
    if config.is_none() && preset.is_none() {
        return Err(Failure::Config("pass --config, --preset or both".into()));
    }
    let mut loaded = ExperimentConfig::load(config, preset).map_err(|e| match e {
        Error::Io { .. } => Failure::Config(e.to_string()),
        other => other.into(),
    })?;
    for seed in &mut loaded.run.seeds {
        *seed = seed
            .checked_add(seed_offset)
            .ok_or_else(|| Failure::Config("--seed-offset overflows a seed".into()))?;
    }
    loaded.validate()?;
    Ok(loaded)
}

fn run(config: Option<&Path>, preset: Option<&str>, seed_offset: u64) -> Result<(), Failure> {
    let config = load_config(config, preset, seed_offset)?;
    let dir = output_dir(&config);
    let summary = experiment::run(&config, &dir)?;
    println!(
        "{} / {}: {} seeds x {} rounds in {:.1}s -> {}",
        summary.mode.name(),
        summary.selector,
        summary.seeds.len(),
        summary.horizon,
        summary.wall_time_secs,
        dir.display()
    );
    for (name, stat) in &summary.metrics {
        println!("  {name:<22} {:>12.4} +- {:.4}", stat.mean, stat.sd);
    }
    println!("  config hash {}", summary.config_hash);
    Ok(())
}

fn summarize(dirs: &[PathBuf], csv: Option<&Path>) -> Result<(), Failure> {
    let table = experiment::summarize(dirs)?;
    print!("{}", table.to_text());
    if let Some(path) = csv {
        std::fs::write(path, table.to_csv()).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn inspect(file: &Path) -> Result<(), Failure> {
    let bytes = std::fs::read(file).map_err(|e| Failure::Runtime(format!("{}: {e}", file.display())))?;
    let model = decode_checkpoint(&bytes)?;
    let entries = read_entries(&bytes)?;
    match model.input_spec() {
        InputSpec::Tokens {
            vocab_size,
            start_token,
        } => {
            println!("input       tokens (vocabulary {vocab_size}, start token {start_token})")
        }
        InputSpec::Dense { feature_dim } => println!("input       dense ({feature_dim} features)"),
    }
    let dims = model.dims();
    println!(
        "widths      embed {}, hidden {}, attention {}",
        dims.embed_dim, dims.hidden_dim, dims.attention_dim
    );
    println!("parameters  {}", model.parameter_count());
    let p = model.drop_probabilities();
    println!("dropout p   {:.4} {:.4} {:.4} {:.4}", p[0], p[1], p[2], p[3]);
    for (name, value) in &entries {
        let norm = value.iter().map(|v| v * v).sum::<f64>().sqrt();
        println!("  {name:<28} {:>4} x {:<4} |w| {norm:.4}", value.nrows(), value.ncols());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run {
            config,
            preset,
            seed_offset,
        } => run(config.as_deref(), preset.as_deref(), *seed_offset),
        Command::Summarize { dirs, csv } => summarize(dirs, csv.as_deref()),
        Command::CheckpointInspect { file } => inspect(file),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(message)) => {
            eprintln!("config error: {message}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Runtime(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
