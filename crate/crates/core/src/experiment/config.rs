//! TOML experiment configuration and the shipped presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::LinearConfig;
use crate::envs::{CombEnvConfig, RewardKind, VolatileEnvConfig};
use crate::error::{Error, Result};
use crate::ir::DEFAULT_MAX_LEN;
use crate::model::{ClutchConfig, ModelDims, OptimizerKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    BenchVolatile,
    BenchComb,
    FuzzSim,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::BenchVolatile => "bench_volatile",
            Mode::BenchComb => "bench_comb",
            Mode::FuzzSim => "fuzz_sim",
        }
    }

    pub fn is_bench(self) -> bool {
        !matches!(self, Mode::FuzzSim)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectorName {
    Clutch,
    Random,
    Comblinucb,
    Comblints,
}

impl SelectorName {
    pub const ALL: [SelectorName; 4] = [
        SelectorName::Clutch,
        SelectorName::Random,
        SelectorName::Comblinucb,
        SelectorName::Comblints,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SelectorName::Clutch => "clutch",
            SelectorName::Random => "random",
            SelectorName::Comblinucb => "comblinucb",
            SelectorName::Comblints => "comblints",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub mode: Mode,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection { mode: Mode::BenchComb }
    }
}

/// `clutch.seed` and `clutch.n_select` are replaced per run by the run seed
/// and the environment's selection size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectorConfig {
    pub name: SelectorName,
    pub clutch: ClutchConfig,
    pub linear: LinearConfig,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        SelectorConfig {
            name: SelectorName::Clutch,
            clutch: ClutchConfig::default(),
            linear: LinearConfig::default(),
        }
    }
}

/// Fuzzing-loop settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FuzzConfig {
    /// Locations mutated per test case (fewer when the case is shorter).
    pub n_select: usize,
    pub max_len: usize,
    /// Valid generated programs that form the initial corpus.
    pub corpus_seeds: usize,
    /// Inclusive size range of generated seeds.
    pub seed_size: [usize; 2],
}

impl Default for FuzzConfig {
    fn default() -> Self {
        FuzzConfig {
            n_select: 7,
            max_len: DEFAULT_MAX_LEN,
            corpus_seeds: 32,
            seed_size: [8, 24],
        }
    }
}

impl FuzzConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_select == 0 {
            return Err(Error::config("env.fuzz.n_select", "must be >= 1"));
        }
        if self.corpus_seeds == 0 {
            return Err(Error::config("env.fuzz.corpus_seeds", "must be >= 1"));
        }
        let [low, high] = self.seed_size;
        if low == 0 || low > high {
            return Err(Error::config("env.fuzz.seed_size", "must satisfy 1 <= low <= high"));
        }
        if high > self.max_len {
            return Err(Error::config(
                "env.fuzz.max_len",
                "must be at least the largest seed size",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub comb: CombEnvConfig,
    pub volatile: VolatileEnvConfig,
    pub fuzz: FuzzConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub horizon: usize,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            horizon: 2000,
            seeds: vec![0, 1, 2],
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub selector: SelectorConfig,
    pub env: EnvConfig,
    pub run: RunSection,
}

impl ExperimentConfig {
    pub fn mode(&self) -> Mode {
        self.experiment.mode
    }

    pub fn validate(&self) -> Result<()> {
        if self.run.horizon == 0 {
            return Err(Error::config("run.horizon", "must be >= 1"));
        }
        if self.run.seeds.is_empty() {
            return Err(Error::config("run.seeds", "must list at least one seed"));
        }
        let mut seen = self.run.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.run.seeds.len() {
            return Err(Error::config("run.seeds", "seeds must be distinct"));
        }
        if self.run.output_dir.as_os_str().is_empty() {
            return Err(Error::config("run.output_dir", "must not be empty"));
        }
        self.selector.clutch.validate()?;
        self.selector.linear.validate()?;
        match self.mode() {
            Mode::BenchComb => self.env.comb.validate(),
            Mode::BenchVolatile => self.env.volatile.validate(),
            Mode::FuzzSim => self.env.fuzz.validate(),
        }
    }

    /// Canonical TOML text; parsing it yields an equal config.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// SHA-256 of the canonical TOML text, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let value: toml::Table = text.parse().map_err(|e: toml::de::Error| toml_error(e))?;
        Self::from_table(value)
    }

    pub fn from_table(table: toml::Table) -> Result<Self> {
        let config: ExperimentConfig = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
            let key = e.path().to_string();
            Error::config(
                if key == "." { "<root>".to_string() } else { key },
                e.into_inner().to_string(),
            )
        })?;
        config.validate()?;
        Ok(config)
    }

    /// Starts from `preset` (when given) and overlays the keys set in the
    /// file at `path` (when given).
    pub fn load(path: Option<&Path>, preset: Option<&str>) -> Result<Self> {
        let mut table = match preset {
            Some(name) => preset_table(name)?,
            None => toml::Table::new(),
        };
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let overlay: toml::Table = text.parse().map_err(|e: toml::de::Error| toml_error(e))?;
            merge(&mut table, overlay);
        }
        Self::from_table(table)
    }
}

fn toml_error(e: toml::de::Error) -> Error {
    let key = e
        .span()
        .map(|s| format!("<byte {}>", s.start))
        .unwrap_or_else(|| "<root>".into());
    Error::config(key, e.message().to_string())
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (key, value) in overlay {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}

pub const PRESETS: [&str; 4] = ["comb-small", "comb-paper", "volatile-small", "fuzz-small"];

/// A named preset as a config.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    ExperimentConfig::from_table(preset_table(name)?)
}

fn preset_table(name: &str) -> Result<toml::Table> {
    let config = match name {
        "comb-small" => ExperimentConfig {
            experiment: ExperimentSection { mode: Mode::BenchComb },
            selector: SelectorConfig {
                clutch: desk_clutch(2000),
                ..SelectorConfig::default()
            },
            env: EnvConfig {
                comb: CombEnvConfig {
                    context_dim: 2,
                    reward: RewardKind::R1,
                    ..CombEnvConfig::default()
                },
                ..EnvConfig::default()
            },
            run: RunSection {
                horizon: 2000,
                seeds: vec![0, 1, 2],
                output_dir: PathBuf::from("runs/comb-small"),
            },
        },
        "comb-paper" => ExperimentConfig {
            experiment: ExperimentSection { mode: Mode::BenchComb },
            selector: SelectorConfig {
                clutch: desk_clutch(10_000),
                ..SelectorConfig::default()
            },
            env: EnvConfig {
                comb: CombEnvConfig {
                    context_dim: 80,
                    reward: RewardKind::R1,
                    ..CombEnvConfig::default()
                },
                ..EnvConfig::default()
            },
            run: RunSection {
                horizon: 10_000,
                seeds: (0..10).collect(),
                output_dir: PathBuf::from("runs/comb-paper"),
            },
        },
        "volatile-small" => ExperimentConfig {
            experiment: ExperimentSection {
                mode: Mode::BenchVolatile,
            },
            selector: SelectorConfig {
                clutch: volatile_clutch(2000),
                ..SelectorConfig::default()
            },
            run: RunSection {
                horizon: 2000,
                seeds: vec![0, 1, 2],
                output_dir: PathBuf::from("runs/volatile-small"),
            },
            ..ExperimentConfig::default()
        },
        "fuzz-small" => ExperimentConfig {
            experiment: ExperimentSection { mode: Mode::FuzzSim },
            selector: SelectorConfig {
                clutch: fuzz_clutch(),
                ..SelectorConfig::default()
            },
            run: RunSection {
                horizon: 5000,
                seeds: vec![0, 1, 2],
                output_dir: PathBuf::from("runs/fuzz-small"),
            },
            ..ExperimentConfig::default()
        },
        other => {
            return Err(Error::config(
                "preset",
                format!("unknown preset `{other}`; expected one of {}", PRESETS.join(", ")),
            ))
        }
    };
    Ok(toml::Table::try_from(&config).expect("preset serializes to a TOML table"))
}

/// Smaller, faster-adapting CLUTCH settings for desk-scale benchmarks; the
/// learning rate decays linearly over `horizon` rounds.
pub fn desk_clutch(horizon: usize) -> ClutchConfig {
    ClutchConfig {
        learning_rate: 0.005,
        update_step: 8,
        optimizer: OptimizerKind::Adam,
        epochs: 8,
        decay_horizon: Some(horizon),
        dims: ModelDims {
            embed_dim: 16,
            hidden_dim: 32,
            attention_dim: 64,
        },
        ..ClutchConfig::default()
    }
}

pub fn volatile_clutch(horizon: usize) -> ClutchConfig {
    ClutchConfig {
        learning_rate: 0.01,
        ..desk_clutch(horizon)
    }
}

pub fn fuzz_clutch() -> ClutchConfig {
    ClutchConfig {
        learning_rate: 0.01,
        update_step: 32,
        optimizer: OptimizerKind::Adam,
        epochs: 2,
        dims: ModelDims {
            embed_dim: 16,
            hidden_dim: 32,
            attention_dim: 64,
        },
        ..ClutchConfig::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let config = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(config, ExperimentConfig::default());
        assert_eq!(config.mode(), Mode::BenchComb);
        assert_eq!(config.env.comb.reward, RewardKind::R1);
        assert_eq!(config.selector.name, SelectorName::Clutch);
    }

    #[test]
    fn negative_horizon_names_the_key() {
        match ExperimentConfig::from_toml_str("[run]\nhorizon = -1\n") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "run.horizon"),
            other => panic!("{other:?}"),
        }
        match ExperimentConfig::from_toml_str("[run]\nhorizon = 0\n") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "run.horizon"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_and_mistyped_keys_name_the_key() {
        let cases = [
            ("[run]\nhorizn = 5\n", "run.horizn"),
            (
                "[selector.clutch]\nlearning_rate = \"fast\"\n",
                "selector.clutch.learning_rate",
            ),
            ("[env.comb]\nreward = \"R9\"\n", "env.comb.reward"),
            ("[experiment]\nmode = \"live\"\n", "experiment.mode"),
            ("[selector.clutch]\nupdate_step = 0\n", "selector.clutch.update_step"),
            ("[selector.linear]\nalpha = -1.0\n", "selector.linear.alpha"),
        ];
        for (text, expected) in cases {
            match ExperimentConfig::from_toml_str(text) {
                Err(Error::Config { key, message }) => {
                    assert_eq!(key, expected, "{text}: {message}");
                }
                other => panic!("{text}: {other:?}"),
            }
        }
        let err = ExperimentConfig::from_toml_str("[run]\nhorizn = 5\n").unwrap_err();
        assert!(err.to_string().contains("horizn"), "{err}");
    }

    #[test]
    fn printing_round_trips() {
        for name in PRESETS {
            let config = preset(name).unwrap();
            let text = config.to_toml();
            let back = ExperimentConfig::from_toml_str(&text).unwrap();
            assert_eq!(back, config);
            assert_eq!(back.to_toml(), text);
            assert_eq!(back.hash(), config.hash());
        }
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.run.horizon += 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn presets_have_the_documented_shape() {
        let small = preset("comb-small").unwrap();
        assert_eq!(
            (small.run.horizon, small.env.comb.context_dim, small.run.seeds.len()),
            (2000, 2, 3)
        );
        let paper = preset("comb-paper").unwrap();
        assert_eq!(
            (paper.run.horizon, paper.env.comb.context_dim, paper.run.seeds.len()),
            (10_000, 80, 10)
        );
        let fuzz = preset("fuzz-small").unwrap();
        assert_eq!(
            (fuzz.mode(), fuzz.run.horizon, fuzz.run.seeds.len()),
            (Mode::FuzzSim, 5000, 3)
        );
        assert!(preset("nope").is_err());
    }

    #[test]
    fn file_overlays_preset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[env.comb]\nreward = \"R3\"\n[run]\nseeds = [7]\n").unwrap();
        let config = ExperimentConfig::load(Some(&path), Some("comb-small")).unwrap();
        assert_eq!(config.env.comb.reward, RewardKind::R3);
        assert_eq!(config.run.seeds, vec![7]);
        assert_eq!(config.run.horizon, 2000);
        assert_eq!(config.selector.clutch, desk_clutch(2000));
    }
}
