//! Uniform-random and linear (ridge) comparison selectors.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView1};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{select_top, ArmFeatures, ArmRound};
use crate::selector::Selector;

/// Uniformly random `k`-subset, ascending.
pub fn random_select<R: Rng + ?Sized>(arms: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if k > arms {
        return Err(Error::InvalidArgument(format!("cannot select {k} of {arms} arms")));
    }
    let mut picks = rand::seq::index::sample(rng, arms, k).into_vec();
    picks.sort_unstable();
    Ok(picks)
}

pub struct RandomSelector {
    rng: ChaCha8Rng,
}

impl RandomSelector {
    pub fn new(seed: u64) -> Self {
        RandomSelector {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Selector for RandomSelector {
    fn name(&self) -> &'static str {
        "random"
    }

    fn select(&mut self, round: &ArmRound) -> Result<Vec<usize>> {
        random_select(round.arm_count(), round.n_select, &mut self.rng)
    }

    fn observe(&mut self, _rewards: &[f64]) -> Result<Option<f64>> {
        Ok(None)
    }
}

/// Shared-parameter ridge regression: `A = λI + Σ x xᵀ`, `b = Σ r x`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearBanditState {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl LinearBanditState {
    pub fn new(dim: usize, lambda: f64) -> Result<Self> {
        if dim == 0 || !(lambda > 0.0) {
            return Err(Error::InvalidArgument(
                "ridge state needs dim >= 1 and lambda > 0".into(),
            ));
        }
        Ok(LinearBanditState {
            a: DMatrix::identity(dim, dim) * lambda,
            b: DVector::zeros(dim),
        })
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    fn cholesky(&self) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
        self.a
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Training("design matrix lost positive definiteness".into()))
    }

    /// `θ̂ = A⁻¹ b`.
    pub fn theta(&self) -> Result<DVector<f64>> {
        Ok(self.cholesky()?.solve(&self.b))
    }

    /// `x_iᵀθ̂ + α √(x_iᵀ A⁻¹ x_i)` per row.
    pub fn ucb_scores(&self, contexts: &Array2<f64>, alpha: f64) -> Result<Vec<f64>> {
        let chol = self.cholesky()?;
        let theta = chol.solve(&self.b);
        let mut scores = Vec::with_capacity(contexts.nrows());
        for row in contexts.rows() {
            let x = to_vector(row);
            let width = x.dot(&chol.solve(&x)).max(0.0).sqrt();
            scores.push(x.dot(&theta) + alpha * width);
        }
        Ok(scores)
    }

    /// A draw `θ̃ ~ N(θ̂, v² A⁻¹)`.
    pub fn sample_theta<R: Rng + ?Sized>(&self, v: f64, rng: &mut R) -> Result<DVector<f64>> {
        let chol = self.cholesky()?;
        let theta = chol.solve(&self.b);
        if v == 0.0 {
            return Ok(theta);
        }
        let z = DVector::from_iterator(self.dim(), (0..self.dim()).map(|_| StandardNormal.sample(rng)));
        // With A = L Lᵀ, solving Lᵀ y = z gives y ~ N(0, A⁻¹).
        let y = chol
            .l()
            .transpose()
            .solve_upper_triangular(&z)
            .ok_or_else(|| Error::Training("singular Cholesky factor".into()))?;
        Ok(theta + y * v)
    }
}

fn to_vector(row: ArrayView1<f64>) -> DVector<f64> {
    DVector::from_iterator(row.len(), row.iter().copied())
}

/// `A += x xᵀ`, `b += r x` for every selected context.
pub fn linear_update(state: &mut LinearBanditState, contexts: &Array2<f64>, rewards: &[f64]) -> Result<()> {
    if contexts.nrows() != rewards.len() {
        return Err(Error::shape("linear_update", contexts.nrows(), rewards.len()));
    }
    if contexts.ncols() != state.dim() {
        return Err(Error::shape("linear_update", state.dim(), contexts.ncols()));
    }
    for (row, &r) in contexts.rows().into_iter().zip(rewards) {
        let x = to_vector(row);
        state.a.ger(1.0, &x, &x, 1.0);
        state.b.axpy(r, &x, 1.0);
    }
    Ok(())
}

fn top_k(scores: Vec<f64>, k: usize) -> Result<Vec<usize>> {
    select_top(ndarray::Array1::from(scores).view(), k)
}

pub fn linucb_select(state: &LinearBanditState, contexts: &Array2<f64>, k: usize, alpha: f64) -> Result<Vec<usize>> {
    top_k(state.ucb_scores(contexts, alpha)?, k)
}

pub fn lints_select<R: Rng + ?Sized>(
    state: &LinearBanditState,
    contexts: &Array2<f64>,
    k: usize,
    v: f64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let theta = state.sample_theta(v, rng)?;
    let scores = contexts.rows().into_iter().map(|x| to_vector(x).dot(&theta)).collect();
    top_k(scores, k)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearConfig {
    pub lambda: f64,
    /// UCB exploration scale.
    pub alpha: f64,
    /// Thompson posterior scale.
    pub v: f64,
}

impl Default for LinearConfig {
    fn default() -> Self {
        LinearConfig {
            lambda: 1.0,
            alpha: 1.0,
            v: 0.5,
        }
    }
}

impl LinearConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("selector.linear.lambda", "must be positive"));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("selector.linear.alpha", "must be non-negative"));
        }
        if !(self.v >= 0.0 && self.v.is_finite()) {
            return Err(Error::config("selector.linear.v", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LinearRule {
    Ucb,
    Thompson,
}

/// Feature width the linear selectors use for a round layout: dense rounds
/// use their contexts, token rounds a one-hot of the arm token concatenated
/// with a one-hot of the mutation token.
pub fn feature_dim_for_tokens(vocab_size: usize) -> usize {
    2 * vocab_size
}

pub fn round_features(round: &ArmRound, dim: usize) -> Result<Array2<f64>> {
    match &round.features {
        ArmFeatures::Dense(ctx) => {
            if ctx.ncols() != dim {
                return Err(Error::shape("round_features", dim, ctx.ncols()));
            }
            Ok(ctx.clone())
        }
        ArmFeatures::Tokens { mutation, ids } => {
            let vocab = dim / 2;
            let mut out = Array2::zeros((ids.len(), dim));
            for (i, &id) in ids.iter().enumerate() {
                if id >= vocab {
                    return Err(Error::Index {
                        what: "token vocabulary",
                        index: id,
                        size: vocab,
                    });
                }
                out[[i, id]] = 1.0;
                if let Some(m) = *mutation {
                    if m >= vocab {
                        return Err(Error::Index {
                            what: "token vocabulary",
                            index: m,
                            size: vocab,
                        });
                    }
                    out[[i, vocab + m]] = 1.0;
                }
            }
            Ok(out)
        }
    }
}

/// CombLinUCB / CombLinTS: score every arm with the shared ridge model and
/// take the top `k`.
pub struct LinearSelector {
    rule: LinearRule,
    config: LinearConfig,
    state: LinearBanditState,
    rng: ChaCha8Rng,
    pending: Option<Array2<f64>>,
}

impl LinearSelector {
    pub fn new(rule: LinearRule, dim: usize, config: LinearConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(LinearSelector {
            rule,
            state: LinearBanditState::new(dim, config.lambda)?,
            config,
            rng: ChaCha8Rng::seed_from_u64(seed),
            pending: None,
        })
    }

    pub fn state(&self) -> &LinearBanditState {
        &self.state
    }
}

impl Selector for LinearSelector {
    fn name(&self) -> &'static str {
        match self.rule {
            LinearRule::Ucb => "comblinucb",
            LinearRule::Thompson => "comblints",
        }
    }

    fn select(&mut self, round: &ArmRound) -> Result<Vec<usize>> {
        let features = round_features(round, self.state.dim())?;
        let picks = match self.rule {
            LinearRule::Ucb => linucb_select(&self.state, &features, round.n_select, self.config.alpha)?,
            LinearRule::Thompson => lints_select(&self.state, &features, round.n_select, self.config.v, &mut self.rng)?,
        };
        self.pending = Some(features.select(ndarray::Axis(0), &picks));
        Ok(picks)
    }

    fn observe(&mut self, rewards: &[f64]) -> Result<Option<f64>> {
        let chosen = self
            .pending
            .take()
            .ok_or_else(|| Error::InvalidArgument("observe called without a pending selection".into()))?;
        linear_update(&mut self.state, &chosen, rewards)?;
        Ok(None)
    }
}
