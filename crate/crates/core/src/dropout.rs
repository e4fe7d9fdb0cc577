//! Concrete dropout: a relaxed Bernoulli mask whose drop probability is a
//! trainable parameter, plus the approximate KL regulariser that goes with it.

use ndarray::{Array1, ArrayView1};
use rand::Rng;

use crate::error::{Error, Result};
use crate::substrate::{logit, sigmoid, Parameter};

#[derive(Debug, Clone, PartialEq)]
pub struct ConcreteDropoutLayer {
    /// `p = σ(p_logit)`, stored as a `1 × 1` parameter.
    pub p_logit: Parameter,
    pub temperature: f64,
    pub weight_reg: f64,
    pub dropout_reg: f64,
    pub input_dim: usize,
}

/// A sampled mask together with `d mask / d p_logit` per element.
#[derive(Debug, Clone)]
pub struct MaskSample {
    pub mask: Array1<f64>,
    pub dmask_dlogit: Array1<f64>,
}

impl ConcreteDropoutLayer {
    pub fn new(
        name: impl Into<String>,
        input_dim: usize,
        initial_p: f64,
        temperature: f64,
        weight_reg: f64,
        dropout_reg: f64,
    ) -> Result<Self> {
        if !(initial_p > 0.0 && initial_p < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "dropout probability {initial_p} not in (0, 1)"
            )));
        }
        if !(temperature > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "temperature {temperature} must be positive"
            )));
        }
        let mut p_logit = Parameter::zeros(name, 1, 1);
        p_logit.value[[0, 0]] = logit(initial_p);
        Ok(Self {
            p_logit,
            temperature,
            weight_reg,
            dropout_reg,
            input_dim,
        })
    }

    pub fn logit(&self) -> f64 {
        self.p_logit.value[[0, 0]]
    }

    pub fn p(&self) -> f64 {
        sigmoid(self.logit())
    }

    /// Draws uniform noise strictly inside `(0, 1)`.
    pub fn draw_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> Array1<f64> {
        Array1::from_shape_simple_fn(self.input_dim, || {
            let u: f64 = rng.random();
            u.clamp(1e-12, 1.0 - 1e-12)
        })
    }

    pub fn sample_mask(&self, noise: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        Ok(self.sample(noise)?.mask)
    }

    /// `z̃ = σ((logit p + logit u) / t)`, `mask = (1 − z̃) / (1 − p)`.
    pub fn sample(&self, noise: ArrayView1<'_, f64>) -> Result<MaskSample> {
        if let Some(&bad) = noise.iter().find(|&&u| !(u > 0.0 && u < 1.0)) {
            return Err(Error::InvalidArgument(format!("dropout noise {bad} outside (0, 1)")));
        }
        let l = self.logit();
        let p = sigmoid(l);
        let keep = sigmoid(-l);
        let t = self.temperature;
        let mut mask = Array1::zeros(noise.len());
        let mut grad = Array1::zeros(noise.len());
        for ((m, g), &u) in mask.iter_mut().zip(grad.iter_mut()).zip(noise.iter()) {
            let drop = sigmoid((l + u.ln() - (-u).ln_1p()) / t);
            *m = (1.0 - drop) / keep;
            *g = -drop * (1.0 - drop) / (t * keep) + (1.0 - drop) * p / keep;
        }
        Ok(MaskSample {
            mask,
            dmask_dlogit: grad,
        })
    }

    /// `λ_w ‖W‖² / (1 − p) + λ_d · K · (p ln p + (1 − p) ln(1 − p))`.
    pub fn regularizer(&self, weights: &Parameter) -> f64 {
        let l = self.logit();
        let p = sigmoid(l);
        let keep = sigmoid(-l);
        let entropy = p * p.ln() + keep * keep.ln();
        self.weight_reg * weights.squared_norm() / keep + self.dropout_reg * self.input_dim as f64 * entropy
    }

    /// Accumulates `scale · ∂r` into the gradients of `p_logit` and `weights`.
    pub fn regularizer_backward(&mut self, weights: &mut Parameter, scale: f64) {
        let l = self.logit();
        let p = sigmoid(l);
        let keep = sigmoid(-l);
        let sq = weights.squared_norm();
        let d_logit = self.weight_reg * sq * p / keep + self.dropout_reg * self.input_dim as f64 * l * p * keep;
        self.p_logit.grad[[0, 0]] += scale * d_logit;
        let w_scale = scale * 2.0 * self.weight_reg / keep;
        weights.grad.scaled_add(w_scale, &weights.value);
    }
}
