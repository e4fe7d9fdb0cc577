use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ArmRound, ClutchModel, Decision, DropoutNoise, DropoutSettings, InputSpec, ModelDims};
use crate::error::{Error, Result};

/// A stored round: what was shown, what was chosen, what it paid.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub round: ArmRound,
    pub decision: Decision,
    /// Realised reward per selected arm, aligned with `decision.selected`.
    pub rewards: Vec<f64>,
}

impl Transition {
    /// A transition whose single set-level reward is credited to every
    /// selected arm.
    pub fn shared(round: ArmRound, decision: Decision, reward: f64) -> Result<Self> {
        let rewards = vec![reward; decision.selected.len()];
        Self::per_arm(round, decision, rewards)
    }

    pub fn per_arm(round: ArmRound, decision: Decision, rewards: Vec<f64>) -> Result<Self> {
        if rewards.len() != decision.selected.len() {
            return Err(Error::shape(
                "transition rewards",
                decision.selected.len(),
                rewards.len(),
            ));
        }
        if rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::InvalidArgument("transition reward is not finite".into()));
        }
        Ok(Self {
            round,
            decision,
            rewards,
        })
    }
}

/// Per-arm data term of the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// `e^{−φ} + (R − a)² + φ`
    Verbatim,
    /// `e^{−φ}(R − a)² + φ`
    Heteroskedastic,
}

impl LossKind {
    pub fn term(self, a: f64, log_var: f64, reward: f64) -> (f64, f64, f64) {
        let resid = reward - a;
        let inv_var = (-log_var).exp();
        match self {
            LossKind::Verbatim => (inv_var + resid * resid + log_var, -2.0 * resid, 1.0 - inv_var),
            LossKind::Heteroskedastic => (
                inv_var * resid * resid + log_var,
                -2.0 * inv_var * resid,
                1.0 - inv_var * resid * resid,
            ),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// Linear decay from α to α/10 over the decay horizon.
    Linear,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClutchConfig {
    pub learning_rate: f64,
    /// Rounds collected between parameter updates.
    pub update_step: usize,
    pub lr_schedule: LrSchedule,
    /// Stored for completeness; no code path reads it.
    pub gamma: f64,
    pub n_select: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Gradient steps taken on the memory at each update.
    pub epochs: usize,
    pub heteroskedastic_strict: bool,
    /// Rounds over which the linear schedule decays; `None` keeps α fixed.
    pub decay_horizon: Option<usize>,
    pub dims: ModelDims,
    pub dropout: DropoutSettings,
}

impl Default for ClutchConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.005,
            update_step: 200,
            lr_schedule: LrSchedule::Linear,
            gamma: 0.9,
            n_select: 7,
            seed: 0,
            optimizer: OptimizerKind::Sgd,
            epochs: 1,
            heteroskedastic_strict: false,
            decay_horizon: None,
            dims: ModelDims::default(),
            dropout: DropoutSettings::default(),
        }
    }
}

impl ClutchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::config(format!("selector.clutch.{key}"), msg));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be a finite non-negative number");
        }
        if self.update_step == 0 {
            return bad("update_step", "must be >= 1");
        }
        if self.n_select == 0 {
            return bad("n_select", "must be >= 1");
        }
        if self.epochs == 0 {
            return bad("epochs", "must be >= 1");
        }
        if self.dims.embed_dim == 0 || self.dims.hidden_dim == 0 || self.dims.attention_dim == 0 {
            return bad("dims", "all widths must be >= 1");
        }
        let d = &self.dropout;
        if !(d.initial_p > 0.0 && d.initial_p < 1.0) {
            return bad("dropout.initial_p", "must lie in (0, 1)");
        }
        if !(d.temperature > 0.0) {
            return bad("dropout.temperature", "must be positive");
        }
        if d.weight_reg < 0.0 || d.dropout_reg < 0.0 {
            return bad("dropout", "regularisation weights must be non-negative");
        }
        Ok(())
    }

    pub fn loss_kind(&self) -> LossKind {
        if self.heteroskedastic_strict {
            LossKind::Heteroskedastic
        } else {
            LossKind::Verbatim
        }
    }

    /// Dropout settings with the KL weight divided by the memory size.
    pub fn scaled_dropout(&self) -> DropoutSettings {
        DropoutSettings {
            dropout_reg: self.dropout.dropout_reg / self.update_step as f64,
            ..self.dropout
        }
    }

    pub fn learning_rate_at(&self, rounds_seen: usize) -> f64 {
        match (self.lr_schedule, self.decay_horizon) {
            (LrSchedule::Linear, Some(h)) if h > 0 => {
                let progress = (rounds_seen as f64 / h as f64).min(1.0);
                self.learning_rate * (1.0 - 0.9 * progress)
            }
            _ => self.learning_rate,
        }
    }
}

fn forward_batch_item(
    model: &ClutchModel,
    t: &Transition,
    noise: &DropoutNoise,
    kind: LossKind,
    scale: f64,
) -> Result<(super::Trace, f64, Array1<f64>, Array1<f64>)> {
    let trace = model.forward_traced(&t.round, noise, &t.decision.selected)?;
    let mut d_scores = Array1::zeros(trace.scores.len());
    let mut d_log_vars = Array1::zeros(t.decision.selected.len());
    let mut data = 0.0;
    for (k, (&arm, &reward)) in t.decision.selected.iter().zip(&t.rewards).enumerate() {
        let (value, da, dphi) = kind.term(trace.scores[arm], trace.log_vars[k], reward);
        data += value;
        d_scores[arm] += scale * da;
        d_log_vars[k] = scale * dphi;
    }
    Ok((trace, data, d_scores, d_log_vars))
}

fn check_batch(batch: &[Transition], noises: &[DropoutNoise]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Empty("transition batch"));
    }
    if noises.len() != batch.len() {
        return Err(Error::shape("dropout noise batch", batch.len(), noises.len()));
    }
    Ok(())
}

/// `(1/T) Σ_t Σ_{j∈l_t} term(a_tj, φ_tj, R_tj) + T · Σ_k r_k`.
pub fn loss(model: &ClutchModel, batch: &[Transition], noises: &[DropoutNoise], kind: LossKind) -> Result<f64> {
    check_batch(batch, noises)?;
    let count = batch.len() as f64;
    let mut data = 0.0;
    for (t, noise) in batch.iter().zip(noises) {
        data += forward_batch_item(model, t, noise, kind, 1.0)?.1;
    }
    let total = data / count + count * model.regularization();
    if !total.is_finite() {
        return Err(Error::Training("loss is not finite".into()));
    }
    Ok(total)
}

/// Loss value with gradients accumulated into the model's parameters.
pub fn loss_and_grad(
    model: &mut ClutchModel,
    batch: &[Transition],
    noises: &[DropoutNoise],
    kind: LossKind,
) -> Result<f64> {
    check_batch(batch, noises)?;
    let count = batch.len() as f64;
    let mut data = 0.0;
    for (t, noise) in batch.iter().zip(noises) {
        let (trace, value, d_scores, d_log_vars) = forward_batch_item(model, t, noise, kind, 1.0 / count)?;
        data += value;
        model.backward(&t.round, &trace, d_scores.view(), d_log_vars.view());
    }
    model.regularization_backward(count);
    let total = data / count + count * model.regularization();
    if !total.is_finite() {
        return Err(Error::Training("loss is not finite".into()));
    }
    if let Some(p) = model.params().into_iter().find(|p| !p.grad_is_finite()) {
        return Err(Error::Training(format!("non-finite gradient in {}", p.name)));
    }
    Ok(total)
}

#[derive(Debug, Clone)]
enum OptimizerState {
    Sgd,
    Adam {
        step: i32,
        first: Vec<Array2<f64>>,
        second: Vec<Array2<f64>>,
    },
}

/// Gradient-descent driver holding optimiser state across updates.
#[derive(Debug, Clone)]
pub struct Trainer {
    state: OptimizerState,
    pub updates: usize,
}

impl Trainer {
    pub fn new(kind: OptimizerKind, model: &ClutchModel) -> Self {
        let state = match kind {
            OptimizerKind::Sgd => OptimizerState::Sgd,
            OptimizerKind::Adam => {
                let zeros: Vec<Array2<f64>> = model
                    .params()
                    .iter()
                    .map(|p| Array2::zeros(p.value.raw_dim()))
                    .collect();
                OptimizerState::Adam {
                    step: 0,
                    first: zeros.clone(),
                    second: zeros,
                }
            }
        };
        Self { state, updates: 0 }
    }

    fn apply(&mut self, model: &mut ClutchModel, lr: f64) {
        match &mut self.state {
            OptimizerState::Sgd => {
                for p in model.params_mut() {
                    p.value.scaled_add(-lr, &p.grad);
                }
            }
            OptimizerState::Adam { step, first, second } => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                *step += 1;
                let c1 = 1.0 - B1.powi(*step);
                let c2 = 1.0 - B2.powi(*step);
                for ((p, m), v) in model
                    .params_mut()
                    .into_iter()
                    .zip(first.iter_mut())
                    .zip(second.iter_mut())
                {
                    ndarray::Zip::from(&mut p.value)
                        .and(&p.grad)
                        .and(m)
                        .and(v)
                        .for_each(|w, &g, m, v| {
                            *m = B1 * *m + (1.0 - B1) * g;
                            *v = B2 * *v + (1.0 - B2) * g * g;
                            *w -= lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
                        });
                }
            }
        }
    }

    /// Takes `config.epochs` gradient steps on `memory`, then clears it.
    /// Returns the loss before the first step.
    pub fn update(
        &mut self,
        model: &mut ClutchModel,
        memory: &mut Vec<Transition>,
        config: &ClutchConfig,
        rng: &mut ChaCha8Rng,
        rounds_seen: usize,
    ) -> Result<f64> {
        if memory.is_empty() {
            return Err(Error::Empty("replay memory"));
        }
        let lr = config.learning_rate_at(rounds_seen);
        let kind = config.loss_kind();
        let mut first_loss = None;
        for _ in 0..config.epochs {
            let noises: Vec<DropoutNoise> = memory.iter().map(|_| DropoutNoise::sample(model, rng)).collect();
            model.zero_grad();
            let value = loss_and_grad(model, memory, &noises, kind)?;
            first_loss.get_or_insert(value);
            self.apply(model, lr);
        }
        model.zero_grad();
        memory.clear();
        self.updates += 1;
        Ok(first_loss.expect("epochs >= 1"))
    }
}

/// The full select → observe → periodically update loop around a model.
#[derive(Debug, Clone)]
pub struct ClutchAgent {
    pub model: ClutchModel,
    pub config: ClutchConfig,
    pub trainer: Trainer,
    memory: Vec<Transition>,
    pending: Option<(ArmRound, Decision)>,
    rng: ChaCha8Rng,
    rounds: usize,
    last_loss: Option<f64>,
}

impl ClutchAgent {
    pub fn new(spec: InputSpec, config: ClutchConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = ClutchModel::new(spec, config.dims, config.scaled_dropout(), &mut rng)?;
        Ok(Self::from_model(model, config, rng))
    }

    pub fn from_model(model: ClutchModel, config: ClutchConfig, rng: ChaCha8Rng) -> Self {
        let trainer = Trainer::new(config.optimizer, &model);
        Self {
            model,
            config,
            trainer,
            memory: Vec::new(),
            pending: None,
            rng,
            rounds: 0,
            last_loss: None,
        }
    }

    pub fn rounds(&self) -> usize {
        self.rounds
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.last_loss
    }

    pub fn memory_len(&self) -> usize {
        self.memory.len()
    }

    /// Scores the round with fresh dropout noise and picks the top arms.
    pub fn decide(&mut self, round: ArmRound) -> Result<Decision> {
        let noise = DropoutNoise::sample(&self.model, &mut self.rng);
        let decision = self.model.decide(&round, &noise)?;
        self.pending = Some((round, decision.clone()));
        Ok(decision)
    }

    /// Records per-arm rewards for the last decision; runs an update once
    /// `update_step` transitions are stored and returns its loss.
    pub fn observe(&mut self, rewards: Vec<f64>) -> Result<Option<f64>> {
        let (round, decision) = self
            .pending
            .take()
            .ok_or_else(|| Error::InvalidArgument("observe called without a pending decision".into()))?;
        self.memory.push(Transition::per_arm(round, decision, rewards)?);
        self.rounds += 1;
        if self.memory.len() >= self.config.update_step {
            let value = self.trainer.update(
                &mut self.model,
                &mut self.memory,
                &self.config,
                &mut self.rng,
                self.rounds,
            )?;
            self.last_loss = Some(value);
            return Ok(Some(value));
        }
        Ok(None)
    }

    /// Set-level feedback: one reward shared by every selected arm.
    pub fn observe_shared(&mut self, reward: f64) -> Result<Option<f64>> {
        let n = self
            .pending
            .as_ref()
            .map(|(_, d)| d.selected.len())
            .ok_or_else(|| Error::InvalidArgument("observe called without a pending decision".into()))?;
        self.observe(vec![reward; n])
    }
}
