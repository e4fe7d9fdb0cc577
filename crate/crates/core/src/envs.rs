//! Synthetic bandit environments and regret accounting.
//!
//! * [`CombEnv`]: a fixed-size pool of unit-sphere contexts per round with a
//!   hidden unit vector `a` and reward `x·a`, `(x·a)²` or `cos(π x·a)`.
//! * [`VolatileEnv`]: a random number of arms per round with contexts in
//!   `[0,1]²` scored by a fixed smooth surface.
//! * [`CheckinEnv`]: rounds drawn from a check-in CSV with a reward column.
//!
//! Contexts and observation noise come from separate ChaCha streams of the
//! same seed, so the context sequence does not depend on how often noise is
//! drawn.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::select_top;

const NOISE_STREAM: u64 = 1;
const SURFACE_STREAM: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RewardKind {
    R1,
    R2,
    R3,
}

impl RewardKind {
    pub const ALL: [RewardKind; 3] = [RewardKind::R1, RewardKind::R2, RewardKind::R3];

    pub fn apply(self, dot: f64) -> f64 {
        match self {
            RewardKind::R1 => dot,
            RewardKind::R2 => dot * dot,
            RewardKind::R3 => (std::f64::consts::PI * dot).cos(),
        }
    }
}

/// One environment round: a context per arm and the noise-free rewards.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvRound {
    pub contexts: Array2<f64>,
    pub true_rewards: Array1<f64>,
}

pub trait Environment: Send {
    fn sample_round(&mut self) -> EnvRound;
    /// Noisy observation of a true reward.
    fn observe(&mut self, true_reward: f64) -> f64;
    fn k(&self) -> usize;
    fn context_dim(&self) -> usize;
}

fn streams(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let main = ChaCha8Rng::seed_from_u64(seed);
    let mut noise = ChaCha8Rng::seed_from_u64(seed);
    noise.set_stream(NOISE_STREAM);
    (main, noise)
}

fn noise(sd: f64) -> Result<Normal<f64>> {
    Normal::new(0.0, sd).map_err(|e| Error::config("env.noise_sd", e.to_string()))
}

/// Uniform direction on the unit sphere in `dim` dimensions.
pub fn unit_vector<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Array1<f64> {
    loop {
        let v: Array1<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.dot(&v).sqrt();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CombEnvConfig {
    pub pool_size: usize,
    pub context_dim: usize,
    pub k: usize,
    pub reward: RewardKind,
    pub noise_sd: f64,
}

impl Default for CombEnvConfig {
    fn default() -> Self {
        CombEnvConfig {
            pool_size: 20,
            context_dim: 2,
            k: 4,
            reward: RewardKind::R1,
            noise_sd: 0.01,
        }
    }
}

impl CombEnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.context_dim == 0 {
            return Err(Error::config("env.comb.context_dim", "must be at least 1"));
        }
        if self.k == 0 || self.k > self.pool_size {
            return Err(Error::config("env.comb.k", "must satisfy 1 <= k <= pool_size"));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::config("env.comb.noise_sd", "must be finite and non-negative"));
        }
        Ok(())
    }
}

pub struct CombEnv {
    config: CombEnvConfig,
    hidden: Array1<f64>,
    rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    noise: Normal<f64>,
}

impl CombEnv {
    pub fn new(config: CombEnvConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (mut rng, noise_rng) = streams(seed);
        let hidden = unit_vector(&mut rng, config.context_dim);
        Ok(CombEnv {
            noise: noise(config.noise_sd)?,
            config,
            hidden,
            rng,
            noise_rng,
        })
    }

    pub fn hidden(&self) -> ArrayView1<'_, f64> {
        self.hidden.view()
    }

    pub fn reward_of(&self, context: ArrayView1<f64>) -> f64 {
        self.config.reward.apply(context.dot(&self.hidden))
    }
}

impl Environment for CombEnv {
    fn sample_round(&mut self) -> EnvRound {
        let (n, d) = (self.config.pool_size, self.config.context_dim);
        let mut contexts = Array2::zeros((n, d));
        for mut row in contexts.axis_iter_mut(Axis(0)) {
            row.assign(&unit_vector(&mut self.rng, d));
        }
        let true_rewards = contexts.rows().into_iter().map(|x| self.reward_of(x)).collect();
        EnvRound { contexts, true_rewards }
    }

    fn observe(&mut self, true_reward: f64) -> f64 {
        true_reward + self.noise.sample(&mut self.noise_rng)
    }

    fn k(&self) -> usize {
        self.config.k
    }

    fn context_dim(&self) -> usize {
        self.config.context_dim
    }
}

/// `f(x) = Σ w_i exp(−‖x − c_i‖² / 0.08)`, rescaled to `[0,1]` over the unit square.
#[derive(Clone, Debug, PartialEq)]
pub struct Surface {
    centers: Vec<[f64; 2]>,
    weights: Vec<f64>,
    low: f64,
    high: f64,
}

const BUMPS: usize = 5;
const BUMP_WIDTH: f64 = 0.08;
const SURFACE_GRID: usize = 201;

impl Surface {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let centers = (0..BUMPS).map(|_| [rng.random::<f64>(), rng.random::<f64>()]).collect();
        let weights = (0..BUMPS).map(|_| rng.random_range(0.2..1.0)).collect();
        let mut s = Surface {
            centers,
            weights,
            low: 0.0,
            high: 1.0,
        };
        let mut low = f64::INFINITY;
        let mut high = f64::NEG_INFINITY;
        let step = 1.0 / (SURFACE_GRID - 1) as f64;
        for i in 0..SURFACE_GRID {
            for j in 0..SURFACE_GRID {
                let v = s.raw(i as f64 * step, j as f64 * step);
                low = low.min(v);
                high = high.max(v);
            }
        }
        s.low = low;
        s.high = high;
        s
    }

    fn raw(&self, x: f64, y: f64) -> f64 {
        self.centers
            .iter()
            .zip(&self.weights)
            .map(|(c, w)| w * (-((x - c[0]).powi(2) + (y - c[1]).powi(2)) / BUMP_WIDTH).exp())
            .sum()
    }

    pub fn value(&self, x: f64, y: f64) -> f64 {
        ((self.raw(x, y) - self.low) / (self.high - self.low).max(1e-12)).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VolatileEnvConfig {
    pub arm_count_range: [usize; 2],
    pub k: usize,
    pub noise_sd: f64,
    /// Check-in CSV to draw rounds from instead of the synthetic surface.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkins: Option<std::path::PathBuf>,
}

impl Default for VolatileEnvConfig {
    fn default() -> Self {
        VolatileEnvConfig {
            arm_count_range: [10, 50],
            k: 4,
            noise_sd: 0.01,
            checkins: None,
        }
    }
}

impl VolatileEnvConfig {
    pub fn validate(&self) -> Result<()> {
        let [low, high] = self.arm_count_range;
        if low > high {
            return Err(Error::config(
                "env.volatile.arm_count_range",
                "low must not exceed high",
            ));
        }
        if self.k == 0 || low < self.k {
            return Err(Error::config(
                "env.volatile.k",
                "must satisfy 1 <= k <= arm_count_range low",
            ));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::config(
                "env.volatile.noise_sd",
                "must be finite and non-negative",
            ));
        }
        Ok(())
    }
}

pub struct VolatileEnv {
    config: VolatileEnvConfig,
    surface: Surface,
    rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    noise: Normal<f64>,
}

impl VolatileEnv {
    pub fn new(config: VolatileEnvConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (rng, noise_rng) = streams(seed);
        let mut surface_rng = ChaCha8Rng::seed_from_u64(seed);
        surface_rng.set_stream(SURFACE_STREAM);
        Ok(VolatileEnv {
            noise: noise(config.noise_sd)?,
            surface: Surface::random(&mut surface_rng),
            config,
            rng,
            noise_rng,
        })
    }

    pub fn surface(&self) -> &Surface {
        &self.surface
    }
}

impl Environment for VolatileEnv {
    fn sample_round(&mut self) -> EnvRound {
        let [low, high] = self.config.arm_count_range;
        let n = self.rng.random_range(low..=high);
        let contexts = Array2::from_shape_simple_fn((n, 2), || self.rng.random::<f64>());
        let true_rewards = contexts
            .rows()
            .into_iter()
            .map(|x| self.surface.value(x[0], x[1]))
            .collect();
        EnvRound { contexts, true_rewards }
    }

    fn observe(&mut self, true_reward: f64) -> f64 {
        true_reward + self.noise.sample(&mut self.noise_rng)
    }

    fn k(&self) -> usize {
        self.config.k
    }

    fn context_dim(&self) -> usize {
        2
    }
}

/// Check-in rows with coordinates min-max normalised over the file.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckinData {
    /// `[lat, lon]` per row, each in `[0,1]`.
    pub coords: Array2<f64>,
    pub rewards: Array1<f64>,
}

#[derive(Deserialize)]
struct CheckinRow {
    #[allow(dead_code)]
    user_id: String,
    lat: f64,
    lon: f64,
    reward: f64,
}

pub fn load_checkins(path: impl AsRef<Path>) -> Result<CheckinData> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_checkins(file)
}

pub fn parse_checkins<R: std::io::Read>(input: R) -> Result<CheckinData> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = reader.headers().map_err(|e| Error::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    for column in ["user_id", "lat", "lon", "reward"] {
        if !headers.iter().any(|h| h == column) {
            return Err(Error::Parse {
                line: 1,
                message: format!("missing column `{column}`"),
            });
        }
    }
    let mut rows = Vec::new();
    for record in reader.deserialize::<CheckinRow>() {
        let row = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        rows.push(row);
    }
    let normalise = |values: Vec<f64>| -> Vec<f64> {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        values
            .iter()
            .map(|v| if hi > lo { (v - lo) / (hi - lo) } else { 0.5 })
            .collect()
    };
    let lat = normalise(rows.iter().map(|r| r.lat).collect());
    let lon = normalise(rows.iter().map(|r| r.lon).collect());
    let mut coords = Array2::zeros((rows.len(), 2));
    for i in 0..rows.len() {
        coords[[i, 0]] = lat[i];
        coords[[i, 1]] = lon[i];
    }
    Ok(CheckinData {
        coords,
        rewards: rows.iter().map(|r| r.reward).collect(),
    })
}

/// Rounds of `U[low, high]` distinct check-ins drawn from a loaded file.
pub struct CheckinEnv {
    data: CheckinData,
    range: [usize; 2],
    k: usize,
    rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    noise: Normal<f64>,
}

impl CheckinEnv {
    pub fn new(data: CheckinData, config: &VolatileEnvConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let rows = data.rewards.len();
        if rows < config.k {
            return Err(Error::InvalidArgument(format!(
                "{rows} check-ins cannot fill k = {}",
                config.k
            )));
        }
        let [low, high] = config.arm_count_range;
        let (rng, noise_rng) = streams(seed);
        Ok(CheckinEnv {
            range: [low.min(rows), high.min(rows)],
            data,
            k: config.k,
            rng,
            noise_rng,
            noise: noise(config.noise_sd)?,
        })
    }
}

impl Environment for CheckinEnv {
    fn sample_round(&mut self) -> EnvRound {
        let n = self.rng.random_range(self.range[0]..=self.range[1]);
        let mut picks = rand::seq::index::sample(&mut self.rng, self.data.rewards.len(), n).into_vec();
        picks.sort_unstable();
        EnvRound {
            contexts: self.data.coords.select(Axis(0), &picks),
            true_rewards: picks.iter().map(|&i| self.data.rewards[i]).collect(),
        }
    }

    fn observe(&mut self, true_reward: f64) -> f64 {
        true_reward + self.noise.sample(&mut self.noise_rng)
    }

    fn k(&self) -> usize {
        self.k
    }

    fn context_dim(&self) -> usize {
        2
    }
}

/// Indices of the `k` largest true rewards, ties to the lowest index.
pub fn oracle_select(true_rewards: ArrayView1<f64>, k: usize) -> Result<Vec<usize>> {
    select_top(true_rewards, k)
}

/// `Σ true(oracle) − Σ true(selected)`.
pub fn regret(oracle: &[usize], selected: &[usize], true_rewards: ArrayView1<f64>) -> Result<f64> {
    if oracle.len() != selected.len() {
        return Err(Error::shape("regret", oracle.len(), selected.len()));
    }
    let n = true_rewards.len();
    let sum = |set: &[usize]| -> Result<f64> {
        set.iter()
            .map(|&i| {
                true_rewards.get(i).copied().ok_or(Error::Index {
                    what: "true rewards",
                    index: i,
                    size: n,
                })
            })
            .sum()
    };
    Ok(sum(oracle)? - sum(selected)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundLog {
    pub t: usize,
    pub true_rewards: Array1<f64>,
    pub selected: Vec<usize>,
    pub oracle: Vec<usize>,
    pub inst_regret: f64,
    pub cum_regret: f64,
}

/// Running regret total over a run.
#[derive(Clone, Debug, Default)]
pub struct RegretTracker {
    rounds: usize,
    cumulative: f64,
}

impl RegretTracker {
    pub fn record(&mut self, round: &EnvRound, selected: &[usize]) -> Result<RoundLog> {
        let oracle = oracle_select(round.true_rewards.view(), selected.len())?;
        let inst = regret(&oracle, selected, round.true_rewards.view())?.max(0.0);
        self.rounds += 1;
        self.cumulative += inst;
        Ok(RoundLog {
            t: self.rounds,
            true_rewards: round.true_rewards.clone(),
            selected: selected.to_vec(),
            oracle,
            inst_regret: inst,
            cum_regret: self.cumulative,
        })
    }

    pub fn total(&self) -> f64 {
        self.cumulative
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn aligned_and_orthogonal_rewards() {
        assert_eq!(RewardKind::R1.apply(1.0), 1.0);
        assert_eq!(RewardKind::R2.apply(1.0), 1.0);
        assert!((RewardKind::R3.apply(1.0) + 1.0).abs() < 1e-15);
        assert_eq!(RewardKind::R3.apply(0.0), 1.0);
        let env = CombEnv::new(CombEnvConfig::default(), 3).unwrap();
        let a = env.hidden().to_owned();
        assert!((env.reward_of(a.view()) - 1.0).abs() < 1e-12);
        let perp = array![-a[1], a[0]];
        assert!(env.reward_of(perp.view()).abs() < 1e-12);
    }

    #[test]
    fn comb_rounds_live_on_the_sphere() {
        for kind in RewardKind::ALL {
            let config = CombEnvConfig {
                context_dim: 80,
                reward: kind,
                ..CombEnvConfig::default()
            };
            let mut env = CombEnv::new(config, 5).unwrap();
            assert!((env.hidden().dot(&env.hidden()) - 1.0).abs() < 1e-12);
            for _ in 0..50 {
                let round = env.sample_round();
                assert_eq!(round.contexts.dim(), (20, 80));
                for row in round.contexts.rows() {
                    assert!((row.dot(&row) - 1.0).abs() < 1e-12);
                }
                let (lo, hi) = match kind {
                    RewardKind::R2 => (0.0, 1.0),
                    _ => (-1.0, 1.0),
                };
                assert!(round.true_rewards.iter().all(|r| (lo - 1e-12..=hi + 1e-12).contains(r)));
            }
        }
    }

    #[test]
    fn volatile_counts_stay_in_range() {
        let mut env = VolatileEnv::new(VolatileEnvConfig::default(), 7).unwrap();
        for _ in 0..1000 {
            let round = env.sample_round();
            let n = round.contexts.nrows();
            assert!((10..=50).contains(&n));
            assert!(round.contexts.iter().all(|c| (0.0..=1.0).contains(c)));
            assert!(round.true_rewards.iter().all(|r| (0.0..=1.0).contains(r)));
        }
    }

    #[test]
    fn environments_replay_from_seed() {
        let mut a = VolatileEnv::new(VolatileEnvConfig::default(), 11).unwrap();
        let mut b = VolatileEnv::new(VolatileEnvConfig::default(), 11).unwrap();
        for _ in 0..20 {
            assert_eq!(a.sample_round(), b.sample_round());
            assert_eq!(a.observe(0.5), b.observe(0.5));
        }
        let mut c = CombEnv::new(CombEnvConfig::default(), 11).unwrap();
        let mut d = CombEnv::new(CombEnvConfig::default(), 11).unwrap();
        d.observe(0.0);
        assert_eq!(c.sample_round(), d.sample_round());
    }

    #[test]
    fn noise_has_the_configured_spread() {
        let mut env = CombEnv::new(CombEnvConfig::default(), 1).unwrap();
        let draws: Vec<f64> = (0..20_000).map(|_| env.observe(0.0)).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let sd = (draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / draws.len() as f64).sqrt();
        assert!(mean.abs() < 1e-3 && (sd - 0.01).abs() < 5e-4, "{mean} {sd}");
    }

    #[test]
    fn oracle_examples() {
        assert_eq!(oracle_select(array![3.0, 1.0, 2.0].view(), 2).unwrap(), vec![0, 2]);
        assert_eq!(oracle_select(array![1.0, 1.0, 1.0].view(), 2).unwrap(), vec![0, 1]);
        assert_eq!(oracle_select(array![1.0, 5.0].view(), 2).unwrap(), vec![0, 1]);
        assert!(oracle_select(array![1.0].view(), 2).is_err());
    }

    #[test]
    fn regret_examples() {
        let r = array![1.0, 0.0, 0.0];
        assert_eq!(regret(&[0], &[0], r.view()).unwrap(), 0.0);
        assert_eq!(regret(&[0], &[2], r.view()).unwrap(), 1.0);
        assert!(regret(&[0, 1], &[2], r.view()).is_err());
    }

    #[test]
    fn cumulative_regret_never_decreases() {
        let mut env = CombEnv::new(CombEnvConfig::default(), 2).unwrap();
        let mut tracker = RegretTracker::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut last = 0.0;
        for _ in 0..500 {
            let round = env.sample_round();
            let mut pick = rand::seq::index::sample(&mut rng, 20, 4).into_vec();
            pick.sort_unstable();
            let log = tracker.record(&round, &pick).unwrap();
            assert!(log.inst_regret >= 0.0);
            assert!(log.cum_regret >= last);
            last = log.cum_regret;
        }
    }

    #[test]
    fn checkins_normalise_and_fill_rounds() {
        let csv = "user_id,lat,lon,reward\nu1,10,100,0.5\nu2,20,300,0.25\nu3,15,200,1.0\n";
        let data = parse_checkins(csv.as_bytes()).unwrap();
        assert_eq!(data.coords[[2, 0]], 0.5);
        assert_eq!(data.coords[[2, 1]], 0.5);
        assert_eq!(data.coords[[0, 0]], 0.0);
        assert_eq!(data.rewards[1], 0.25);

        let two = parse_checkins("user_id,lat,lon,reward\na,0,0,1\nb,1,1,0\n".as_bytes()).unwrap();
        let config = VolatileEnvConfig {
            arm_count_range: [2, 2],
            k: 2,
            noise_sd: 0.0,
            checkins: None,
        };
        let mut env = CheckinEnv::new(two, &config, 0).unwrap();
        for _ in 0..10 {
            let round = env.sample_round();
            assert_eq!(round.true_rewards, array![1.0, 0.0]);
        }
    }

    #[test]
    fn checkin_errors_are_reported() {
        match parse_checkins("user_id,lat,lon,reward\na,1,2,3\nb,north,2,3\n".as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_checkins("user_id,lat,reward\na,1,3\n".as_bytes()),
            Err(Error::Parse { line: 1, .. })
        ));
        let one = parse_checkins("user_id,lat,lon,reward\na,0,0,1\n".as_bytes()).unwrap();
        assert!(CheckinEnv::new(
            one,
            &VolatileEnvConfig {
                arm_count_range: [2, 2],
                k: 2,
                noise_sd: 0.0,
                checkins: None,
            },
            0
        )
        .is_err());
    }

    #[test]
    fn invalid_configs_name_their_key() {
        let bad = CombEnvConfig {
            k: 30,
            ..CombEnvConfig::default()
        };
        match CombEnv::new(bad, 0) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "env.comb.k"),
            _ => panic!(),
        }
        let bad = VolatileEnvConfig {
            arm_count_range: [3, 50],
            ..VolatileEnvConfig::default()
        };
        assert!(VolatileEnv::new(bad, 0).is_err());
    }
}
