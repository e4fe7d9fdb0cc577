//! Configuration, seeded repetitions, run artifacts and summaries.
//!
//! A run directory holds `config.toml`, one `seed_<s>.csv` per seed,
//! `summary.json`, and for CLUTCH one `checkpoint_seed_<s>.clu` per seed.
//! [`load_run`] rebuilds the summary from the CSVs alone.

pub mod config;
pub mod runner;
pub mod summary;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub use config::{preset, ExperimentConfig, FuzzConfig, Mode, SelectorName, PRESETS};
pub use runner::{run_seed, run_seeds, BenchRow, FuzzRow, Fuzzer, SeedLog, SeedRun};
pub use summary::{compare, Comparison, RunSummary, Stat};

use crate::error::{Error, Result};
use crate::ir::{MutationKind, Outcome};
use crate::model::save_checkpoint;

pub const CONFIG_FILE: &str = "config.toml";
pub const SUMMARY_FILE: &str = "summary.json";
pub const BENCH_HEADER: [&str; 4] = ["t", "chosen_indices", "inst_regret", "cum_regret"];
pub const FUZZ_HEADER: [&str; 7] = [
    "t",
    "mutation",
    "locations",
    "outcome",
    "reward",
    "new_branches",
    "sites_hit",
];

pub fn seed_csv_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("seed_{seed}.csv"))
}

pub fn checkpoint_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("checkpoint_seed_{seed}.clu"))
}

fn join_indices(indices: &[usize]) -> String {
    indices.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(";")
}

fn split_indices(text: &str, line: usize) -> Result<Vec<usize>> {
    if text.is_empty() {
        return Ok(Vec::new());
    }
    text.split(';')
        .map(|s| {
            s.parse().map_err(|_| Error::Parse {
                line,
                message: format!("bad index `{s}`"),
            })
        })
        .collect()
}

/// Per-round CSV text for one seed.
pub fn log_to_csv(log: &SeedLog) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::InvalidArgument(format!("csv write: {e}"));
    match log {
        SeedLog::Bench(rows) => {
            w.write_record(BENCH_HEADER).map_err(csv_err)?;
            for r in rows {
                w.write_record([
                    r.t.to_string(),
                    join_indices(&r.chosen),
                    r.inst_regret.to_string(),
                    r.cum_regret.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
        SeedLog::Fuzz(rows) => {
            w.write_record(FUZZ_HEADER).map_err(csv_err)?;
            for r in rows {
                w.write_record([
                    r.t.to_string(),
                    r.mutation.name().to_string(),
                    join_indices(&r.locations),
                    r.outcome.name().to_string(),
                    r.reward.to_string(),
                    r.new_branches.to_string(),
                    r.sites_hit.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
    }
    w.into_inner()
        .map_err(|e| Error::InvalidArgument(format!("csv flush: {e}")))
}

fn field<T: std::str::FromStr>(record: &csv::StringRecord, i: usize, line: usize) -> Result<T> {
    let text = record.get(i).ok_or_else(|| Error::Parse {
        line,
        message: format!("missing column {i}"),
    })?;
    text.parse().map_err(|_| Error::Parse {
        line,
        message: format!("bad value `{text}` in column {i}"),
    })
}

/// Parses a per-round CSV written by [`log_to_csv`].
pub fn log_from_csv(mode: Mode, bytes: &[u8]) -> Result<SeedLog> {
    let mut reader = csv::Reader::from_reader(bytes);
    let header = reader
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let expected: Vec<&str> = if mode.is_bench() {
        BENCH_HEADER.to_vec()
    } else {
        FUZZ_HEADER.to_vec()
    };
    if header.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header {}", expected.join(",")),
        });
    }
    let mut bench = Vec::new();
    let mut fuzz = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if mode.is_bench() {
            bench.push(BenchRow {
                t: field(&record, 0, line)?,
                chosen: split_indices(&record[1], line)?,
                inst_regret: field(&record, 2, line)?,
                cum_regret: field(&record, 3, line)?,
            });
        } else {
            let bad = |what: &str| Error::Parse {
                line,
                message: format!("unknown {what}"),
            };
            fuzz.push(FuzzRow {
                t: field(&record, 0, line)?,
                mutation: MutationKind::from_name(&record[1]).ok_or_else(|| bad("mutation"))?,
                locations: split_indices(&record[2], line)?,
                outcome: Outcome::ALL
                    .into_iter()
                    .find(|o| o.name() == &record[3])
                    .ok_or_else(|| bad("outcome"))?,
                reward: field(&record, 4, line)?,
                new_branches: field(&record, 5, line)?,
                sites_hit: field(&record, 6, line)?,
            });
        }
    }
    Ok(if mode.is_bench() {
        SeedLog::Bench(bench)
    } else {
        SeedLog::Fuzz(fuzz)
    })
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn summarize_runs(config: &ExperimentConfig, runs: &[SeedRun], wall_time_secs: f64) -> RunSummary {
    RunSummary {
        mode: config.mode(),
        selector: config.selector.name.name().to_string(),
        config_hash: config.hash(),
        seeds: runs.iter().map(|r| r.seed).collect(),
        horizon: config.run.horizon,
        metrics: summary::metrics_of(runs),
        wall_time_secs,
    }
}

/// Runs every seed and writes the run directory `dir`.
pub fn run(config: &ExperimentConfig, dir: &Path) -> Result<RunSummary> {
    config.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join(CONFIG_FILE), config.to_toml())?;
    let start = Instant::now();
    let runs = run_seeds(config)?;
    let wall = start.elapsed().as_secs_f64();
    for r in &runs {
        write(&seed_csv_path(dir, r.seed), log_to_csv(&r.log)?)?;
        if let Some(model) = &r.model {
            save_checkpoint(model, checkpoint_path(dir, r.seed))?;
        }
    }
    let summary = summarize_runs(config, &runs, wall);
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write(&dir.join(SUMMARY_FILE), json + "\n")?;
    Ok(summary)
}

/// Rebuilds a run's summary from its config snapshot and per-seed CSVs;
/// wall time is taken from `summary.json` when present.
pub fn load_run(dir: &Path) -> Result<RunSummary> {
    let config_path = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&config_path).map_err(|e| Error::io(&config_path, e))?;
    let config = ExperimentConfig::from_toml_str(&text)?;
    let mut runs = Vec::new();
    for &seed in &config.run.seeds {
        let path = seed_csv_path(dir, seed);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let log = log_from_csv(config.mode(), &bytes)?;
        if log.len() != config.run.horizon {
            return Err(Error::InvalidArgument(format!(
                "{} has {} rows, expected {}",
                path.display(),
                log.len(),
                config.run.horizon
            )));
        }
        runs.push(SeedRun { seed, log, model: None });
    }
    let wall = fs::read_to_string(dir.join(SUMMARY_FILE))
        .ok()
        .and_then(|s| serde_json::from_str::<RunSummary>(&s).ok())
        .map_or(0.0, |s| s.wall_time_secs);
    Ok(summarize_runs(&config, &runs, wall))
}

/// Loads and compares completed run directories.
pub fn summarize(dirs: &[PathBuf]) -> Result<Comparison> {
    let runs = dirs
        .iter()
        .map(|d| {
            let label = d
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| d.display().to_string());
            Ok((label, load_run(d)?))
        })
        .collect::<Result<Vec<_>>>()?;
    compare(&runs)
}
