//! The interface shared by every arm-selection strategy.

use crate::error::Result;
use crate::model::{ArmRound, ClutchAgent, ClutchConfig, ClutchModel, InputSpec};

pub trait Selector: Send {
    fn name(&self) -> &'static str;

    /// Picks `round.n_select` arms; indices are returned in ascending order.
    fn select(&mut self, round: &ArmRound) -> Result<Vec<usize>>;

    /// Feedback for the previous selection, one reward per selected arm in
    /// the order `select` returned them. Returns a training loss when the
    /// call triggered a parameter update.
    fn observe(&mut self, rewards: &[f64]) -> Result<Option<f64>>;

    /// The trained network, for selectors that have one.
    fn model(&self) -> Option<&ClutchModel> {
        None
    }
}

/// The pointer-attention bandit behind the [`Selector`] interface.
pub struct ClutchSelector {
    agent: ClutchAgent,
}

impl ClutchSelector {
    pub fn new(spec: InputSpec, config: ClutchConfig) -> Result<Self> {
        Ok(ClutchSelector {
            agent: ClutchAgent::new(spec, config)?,
        })
    }

    pub fn agent(&self) -> &ClutchAgent {
        &self.agent
    }
}

impl Selector for ClutchSelector {
    fn name(&self) -> &'static str {
        "clutch"
    }

    fn select(&mut self, round: &ArmRound) -> Result<Vec<usize>> {
        Ok(self.agent.decide(round.clone())?.selected)
    }

    fn observe(&mut self, rewards: &[f64]) -> Result<Option<f64>> {
        self.agent.observe(rewards.to_vec())
    }

    fn model(&self) -> Option<&ClutchModel> {
        Some(&self.agent.model)
    }
}
