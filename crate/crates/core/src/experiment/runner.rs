//! Seeded bench and fuzzing loops.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::{ExperimentConfig, FuzzConfig, Mode, SelectorName};
use crate::baselines::{feature_dim_for_tokens, LinearRule, LinearSelector, RandomSelector};
use crate::envs::{CheckinEnv, CombEnv, Environment, RegretTracker, VolatileEnv};
use crate::error::{Error, Result};
use crate::ir::{
    apply_mutation, execute, generate_seed, tokenize, DonorPool, MutationKind, Outcome, Program, BRANCH_SITES,
    DONOR_CAPACITY, START_TOKEN, VOCAB_SIZE,
};
use crate::model::{ArmRound, ClutchModel, InputSpec};
use crate::reward::{compute_reward, CoverageStats, RewardInputs};
use crate::selector::{ClutchSelector, Selector};

const SELECTOR_TAG: u64 = 0x5e1e_c708;
const FUZZ_TAG: u64 = 0xf022_0000;

/// Independent seed for one component of a run.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub t: usize,
    pub chosen: Vec<usize>,
    pub inst_regret: f64,
    pub cum_regret: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FuzzRow {
    pub t: usize,
    pub mutation: MutationKind,
    pub locations: Vec<usize>,
    pub outcome: Outcome,
    pub reward: f64,
    /// Sites hit for the first time in this run.
    pub new_branches: usize,
    /// Distinct sites this test case hit.
    pub sites_hit: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum SeedLog {
    Bench(Vec<BenchRow>),
    Fuzz(Vec<FuzzRow>),
}

impl SeedLog {
    pub fn len(&self) -> usize {
        match self {
            SeedLog::Bench(rows) => rows.len(),
            SeedLog::Fuzz(rows) => rows.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub struct SeedRun {
    pub seed: u64,
    pub log: SeedLog,
    pub model: Option<ClutchModel>,
}

pub fn make_selector(
    config: &ExperimentConfig,
    spec: InputSpec,
    n_select: usize,
    seed: u64,
) -> Result<Box<dyn Selector>> {
    let seed = derive_seed(seed, SELECTOR_TAG);
    let dim = match spec {
        InputSpec::Dense { feature_dim } => feature_dim,
        InputSpec::Tokens { vocab_size, .. } => feature_dim_for_tokens(vocab_size),
    };
    let linear = config.selector.linear;
    Ok(match config.selector.name {
        SelectorName::Clutch => {
            let clutch = crate::model::ClutchConfig {
                seed,
                n_select,
                ..config.selector.clutch.clone()
            };
            Box::new(ClutchSelector::new(spec, clutch)?)
        }
        SelectorName::Random => Box::new(RandomSelector::new(seed)),
        SelectorName::Comblinucb => Box::new(LinearSelector::new(LinearRule::Ucb, dim, linear, seed)?),
        SelectorName::Comblints => Box::new(LinearSelector::new(LinearRule::Thompson, dim, linear, seed)?),
    })
}

fn make_env(config: &ExperimentConfig, seed: u64) -> Result<Box<dyn Environment>> {
    match config.mode() {
        Mode::BenchComb => Ok(Box::new(CombEnv::new(config.env.comb.clone(), seed)?)),
        Mode::BenchVolatile => match &config.env.volatile.checkins {
            Some(path) => {
                let data = crate::envs::load_checkins(path)?;
                Ok(Box::new(CheckinEnv::new(data, &config.env.volatile, seed)?))
            }
            None => Ok(Box::new(VolatileEnv::new(config.env.volatile.clone(), seed)?)),
        },
        Mode::FuzzSim => Err(Error::InvalidArgument("fuzz_sim has no bandit environment".into())),
    }
}

/// One seed of a bench mode: synthetic rounds with semi-bandit feedback.
pub fn run_bench_seed(config: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
    let mut env = make_env(config, seed)?;
    let k = env.k();
    let spec = InputSpec::Dense {
        feature_dim: env.context_dim(),
    };
    let mut selector = make_selector(config, spec, k, seed)?;
    let mut tracker = RegretTracker::default();
    let mut rows = Vec::with_capacity(config.run.horizon);
    for _ in 0..config.run.horizon {
        let round = env.sample_round();
        let n = k.min(round.true_rewards.len());
        let picks = selector.select(&ArmRound::dense(round.contexts.clone(), n)?)?;
        let rewards: Vec<f64> = picks.iter().map(|&i| env.observe(round.true_rewards[i])).collect();
        selector.observe(&rewards)?;
        let log = tracker.record(&round, &picks)?;
        rows.push(BenchRow {
            t: log.t,
            chosen: log.selected,
            inst_regret: log.inst_regret,
            cum_regret: log.cum_regret,
        });
    }
    Ok(SeedRun {
        seed,
        log: SeedLog::Bench(rows),
        model: selector.model().cloned(),
    })
}

/// Valid generated programs for the initial corpus.
pub fn initial_corpus<R: Rng + ?Sized>(fuzz: &FuzzConfig, rng: &mut R) -> Result<Vec<Program>> {
    let mut corpus = Vec::with_capacity(fuzz.corpus_seeds);
    let attempts = 100 * fuzz.corpus_seeds;
    for _ in 0..attempts {
        if corpus.len() == fuzz.corpus_seeds {
            break;
        }
        let size = rng.random_range(fuzz.seed_size[0]..=fuzz.seed_size[1]);
        let program = generate_seed(rng, size);
        if execute(&program).outcome.is_valid() {
            corpus.push(program);
        }
    }
    if corpus.is_empty() {
        return Err(Error::Training("could not generate a single valid seed program".into()));
    }
    Ok(corpus)
}

/// Per-run fuzzing state: corpus, donors and coverage bookkeeping.
pub struct Fuzzer {
    pub corpus: Vec<Program>,
    pub donors: DonorPool,
    pub stats: CoverageStats,
    pub max_counts: Vec<u32>,
    pub seen: Vec<bool>,
    pub cc_max: u32,
    config: FuzzConfig,
    rng: ChaCha8Rng,
    t: usize,
}

impl Fuzzer {
    pub fn new(config: FuzzConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, FUZZ_TAG));
        let corpus = initial_corpus(&config, &mut rng)?;
        let mut donors = DonorPool::new(DONOR_CAPACITY);
        let mut max_counts = vec![0u32; BRANCH_SITES];
        let mut cc_max = 1;
        for program in &corpus {
            donors.push(program.clone());
            let result = execute(program);
            for (m, &c) in max_counts.iter_mut().zip(&result.branch_counts) {
                *m = (*m).max(c);
            }
            cc_max = cc_max.max(result.cc);
        }
        Ok(Fuzzer {
            corpus,
            donors,
            stats: CoverageStats::new(BRANCH_SITES),
            max_counts,
            seen: vec![false; BRANCH_SITES],
            cc_max,
            config,
            rng,
            t: 0,
        })
    }

    /// One iteration: pick a case and an operator, let `selector` choose the
    /// locations, mutate, execute, score and feed the reward back.
    pub fn step(&mut self, selector: &mut dyn Selector) -> Result<FuzzRow> {
        self.t += 1;
        let program = self
            .corpus
            .choose(&mut self.rng)
            .expect("corpus is never empty")
            .clone();
        let kind = *MutationKind::ALL.choose(&mut self.rng).expect("six operators");
        let round = tokenize(&program, kind, self.config.n_select)?;
        let locations = selector.select(&round)?;
        let mutated = apply_mutation(
            &program,
            kind,
            &locations,
            &self.donors,
            self.config.max_len,
            &mut self.rng,
        )?;
        let result = execute(&mutated);
        let valid = result.outcome.is_valid();
        self.cc_max = self.cc_max.max(result.cc);
        let reward = compute_reward(
            &RewardInputs {
                valid,
                cc: result.cc,
                cc_max: self.cc_max,
                branch_counts: result.counts(),
            },
            &mut self.stats,
        )?;
        selector.observe(&vec![reward; locations.len()])?;

        let mut new_branches = 0;
        for (seen, &c) in self.seen.iter_mut().zip(&result.branch_counts) {
            if c > 0 && !*seen {
                *seen = true;
                new_branches += 1;
            }
        }
        if valid {
            let mut raised = false;
            for (m, &c) in self.max_counts.iter_mut().zip(&result.branch_counts) {
                if c > *m {
                    *m = c;
                    raised = true;
                }
            }
            if raised {
                self.donors.push(mutated.clone());
                self.corpus.push(mutated);
            }
        }
        Ok(FuzzRow {
            t: self.t,
            mutation: kind,
            locations,
            outcome: result.outcome,
            reward,
            new_branches,
            sites_hit: result.sites_hit(),
        })
    }
}

pub fn fuzz_input_spec() -> InputSpec {
    InputSpec::Tokens {
        vocab_size: VOCAB_SIZE,
        start_token: START_TOKEN,
    }
}

pub fn run_fuzz_seed(config: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
    let mut fuzzer = Fuzzer::new(config.env.fuzz.clone(), seed)?;
    let mut selector = make_selector(config, fuzz_input_spec(), config.env.fuzz.n_select, seed)?;
    let rows = (0..config.run.horizon)
        .map(|_| fuzzer.step(selector.as_mut()))
        .collect::<Result<Vec<_>>>()?;
    Ok(SeedRun {
        seed,
        log: SeedLog::Fuzz(rows),
        model: selector.model().cloned(),
    })
}

pub fn run_seed(config: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
    if config.mode().is_bench() {
        run_bench_seed(config, seed)
    } else {
        run_fuzz_seed(config, seed)
    }
}

/// Every configured seed, in parallel, in seed-list order.
pub fn run_seeds(config: &ExperimentConfig) -> Result<Vec<SeedRun>> {
    config.validate()?;
    config
        .run
        .seeds
        .par_iter()
        .map(|&seed| run_seed(config, seed))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::config::preset;

    #[test]
    fn derived_seeds_differ_by_tag() {
        assert_ne!(derive_seed(0, 1), derive_seed(0, 2));
        assert_ne!(derive_seed(0, 1), derive_seed(1, 1));
        assert_eq!(derive_seed(5, 9), derive_seed(5, 9));
    }

    #[test]
    fn random_bench_has_one_row_per_round() {
        let mut config = ExperimentConfig::default();
        config.selector.name = SelectorName::Random;
        config.run.horizon = 100;
        let run = run_bench_seed(&config, 0).unwrap();
        let SeedLog::Bench(rows) = run.log else { panic!() };
        assert_eq!(rows.len(), 100);
        assert!(rows.last().unwrap().cum_regret > 0.0);
        assert!(rows.windows(2).all(|w| w[1].cum_regret >= w[0].cum_regret));
        assert!(run.model.is_none());
    }

    #[test]
    fn fuzz_rows_stay_in_range() {
        let mut config = preset("fuzz-small").unwrap();
        config.selector.name = SelectorName::Random;
        config.run.horizon = 300;
        let run = run_fuzz_seed(&config, 1).unwrap();
        let SeedLog::Fuzz(rows) = run.log else { panic!() };
        let total: usize = rows.iter().map(|r| r.new_branches).sum();
        assert!(total <= BRANCH_SITES);
        assert!(rows.iter().all(|r| r.reward == -1.0 || r.reward >= 1.0));
        assert!(rows.iter().any(|r| r.outcome.is_valid()));
        assert!(rows.iter().all(|r| r.locations.len() <= config.env.fuzz.n_select));
    }

    #[test]
    fn every_selector_runs_every_mode() {
        for mode in [Mode::BenchComb, Mode::BenchVolatile, Mode::FuzzSim] {
            for name in SelectorName::ALL {
                let mut config = ExperimentConfig::default();
                config.experiment.mode = mode;
                config.selector.name = name;
                config.selector.clutch = crate::experiment::config::desk_clutch(40);
                config.run.horizon = 40;
                config.run.seeds = vec![3];
                let runs = run_seeds(&config).unwrap();
                assert_eq!(runs[0].log.len(), 40, "{mode:?} {name:?}");
                assert_eq!(runs[0].model.is_some(), name == SelectorName::Clutch);
            }
        }
    }
}
