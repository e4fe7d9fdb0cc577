//! The pointer-attention bandit.
//!
//! A GRU encoder reads one input per arm (a token embedding or a projected
//! context vector, optionally preceded by a mutation token). A single decoder
//! step, seeded with the encoder's terminal state and a learned start input,
//! yields a query `d`. Each arm `j` is then scored by
//!
//! ```text
//! u_j = v_rᵀ tanh(m₀ ⊙ W₁e_j + m₁ ⊙ W₂d)      a = softmax(u)
//! φ_j = v_φᵀ tanh(m₂ ⊙ W₁e_j + m₃ ⊙ W₂d)
//! ```
//!
//! where `m₀…m₃` are concrete-dropout masks. Nothing in the parameter set
//! depends on the number of arms.

mod checkpoint;
mod train;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, read_entries, save_checkpoint, CHECKPOINT_MAGIC,
};
pub use train::{
    loss, loss_and_grad, ClutchAgent, ClutchConfig, LossKind, LrSchedule, OptimizerKind, Trainer, Transition,
};

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dropout::ConcreteDropoutLayer;
use crate::error::{Error, Result};
use crate::substrate::{
    embed, embed_backward, softmax, softmax_backward, EmbeddingTable, GruCell, GruSequence, Parameter,
};

/// Layer widths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub attention_dim: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            hidden_dim: 64,
            attention_dim: 512,
        }
    }
}

/// Concrete-dropout settings shared by the four attention-path layers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropoutSettings {
    pub initial_p: f64,
    pub temperature: f64,
    pub weight_reg: f64,
    pub dropout_reg: f64,
}

impl Default for DropoutSettings {
    fn default() -> Self {
        Self {
            initial_p: 0.1,
            temperature: 0.1,
            weight_reg: 1e-6,
            dropout_reg: 1e-3,
        }
    }
}

/// What the model reads per arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputSpec {
    /// Vocabulary ids; `start_token` seeds the decoder.
    Tokens { vocab_size: usize, start_token: usize },
    /// Real feature vectors of a fixed width.
    Dense { feature_dim: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum InputLayer {
    Tokens {
        table: EmbeddingTable,
        start_token: usize,
    },
    Dense {
        weight: Parameter,
        bias: Parameter,
        start: Parameter,
    },
}

impl InputLayer {
    fn new<R: Rng + ?Sized>(spec: InputSpec, embed_dim: usize, rng: &mut R) -> Result<Self> {
        match spec {
            InputSpec::Tokens {
                vocab_size,
                start_token,
            } => {
                if start_token >= vocab_size {
                    return Err(Error::Index {
                        what: "vocabulary",
                        index: start_token,
                        size: vocab_size,
                    });
                }
                Ok(InputLayer::Tokens {
                    table: EmbeddingTable::new("input.embedding", vocab_size, embed_dim, rng),
                    start_token,
                })
            }
            InputSpec::Dense { feature_dim } => Ok(InputLayer::Dense {
                weight: Parameter::uniform("input.weight", embed_dim, feature_dim, feature_dim, rng),
                bias: Parameter::uniform("input.bias", 1, embed_dim, feature_dim, rng),
                start: Parameter::uniform("input.start", 1, embed_dim, embed_dim, rng),
            }),
        }
    }

    pub fn spec(&self) -> InputSpec {
        match self {
            InputLayer::Tokens { table, start_token } => InputSpec::Tokens {
                vocab_size: table.vocab_size(),
                start_token: *start_token,
            },
            InputLayer::Dense { weight, .. } => InputSpec::Dense {
                feature_dim: weight.value.ncols(),
            },
        }
    }

    fn embed_dim(&self) -> usize {
        match self {
            InputLayer::Tokens { table, .. } => table.dim(),
            InputLayer::Dense { weight, .. } => weight.value.nrows(),
        }
    }

    fn params(&self) -> Vec<&Parameter> {
        match self {
            InputLayer::Tokens { table, .. } => vec![&table.rows],
            InputLayer::Dense { weight, bias, start } => vec![weight, bias, start],
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        match self {
            InputLayer::Tokens { table, .. } => vec![&mut table.rows],
            InputLayer::Dense { weight, bias, start } => vec![weight, bias, start],
        }
    }

    fn start_input(&self) -> Array2<f64> {
        match self {
            InputLayer::Tokens { table, start_token } => {
                table.rows.value.slice(s![*start_token..=*start_token, ..]).to_owned()
            }
            InputLayer::Dense { start, .. } => start.value.clone(),
        }
    }

    fn encode(&self, features: &ArmFeatures) -> Result<Array2<f64>> {
        match (self, features) {
            (InputLayer::Tokens { table, .. }, ArmFeatures::Tokens { .. }) => embed(table, &features.sequence_ids()),
            (InputLayer::Dense { weight, bias, .. }, ArmFeatures::Dense(ctx)) => {
                if ctx.ncols() != weight.value.ncols() {
                    return Err(Error::shape("dense input", weight.value.ncols(), ctx.ncols()));
                }
                Ok(ctx.dot(&weight.value.t()) + &bias.value)
            }
            (InputLayer::Tokens { .. }, ArmFeatures::Dense(_)) => {
                Err(Error::InvalidArgument("token model given dense contexts".into()))
            }
            (InputLayer::Dense { .. }, ArmFeatures::Tokens { .. }) => {
                Err(Error::InvalidArgument("dense model given token contexts".into()))
            }
        }
    }

    fn backward(&mut self, features: &ArmFeatures, d_inputs: ArrayView2<'_, f64>, d_start: ArrayView1<'_, f64>) {
        match (self, features) {
            (InputLayer::Tokens { table, start_token }, ArmFeatures::Tokens { .. }) => {
                embed_backward(table, &features.sequence_ids(), d_inputs);
                let mut row = table.rows.grad.row_mut(*start_token);
                row += &d_start;
            }
            (InputLayer::Dense { weight, bias, start }, ArmFeatures::Dense(ctx)) => {
                weight.grad += &d_inputs.t().dot(ctx);
                bias.grad += &d_inputs.sum_axis(Axis(0));
                let mut row = start.grad.row_mut(0);
                row += &d_start;
            }
            _ => unreachable!("encode rejects mismatched features"),
        }
    }
}

/// Per-arm inputs of one round.
#[derive(Debug, Clone, PartialEq)]
pub enum ArmFeatures {
    /// One vocabulary id per arm, optionally preceded by a mutation token.
    Tokens { mutation: Option<usize>, ids: Vec<usize> },
    /// One context row per arm.
    Dense(Array2<f64>),
}

impl ArmFeatures {
    /// Encoder input ids: the mutation token, if any, then one id per arm.
    pub fn sequence_ids(&self) -> Vec<usize> {
        match self {
            ArmFeatures::Tokens { mutation, ids } => mutation.iter().chain(ids.iter()).copied().collect(),
            ArmFeatures::Dense(_) => Vec::new(),
        }
    }

    /// Index of the first arm in the encoder sequence.
    fn arm_offset(&self) -> usize {
        match self {
            ArmFeatures::Tokens { mutation: Some(_), .. } => 1,
            _ => 0,
        }
    }

    pub fn arm_count(&self) -> usize {
        match self {
            ArmFeatures::Tokens { ids, .. } => ids.len(),
            ArmFeatures::Dense(ctx) => ctx.nrows(),
        }
    }
}

/// One decision round: a volatile set of arms and how many to pick.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmRound {
    pub features: ArmFeatures,
    pub n_select: usize,
}

impl ArmRound {
    pub fn tokens(mutation_token: Option<usize>, tokens: Vec<usize>, n_select: usize) -> Result<Self> {
        Self::new(
            ArmFeatures::Tokens {
                mutation: mutation_token,
                ids: tokens,
            },
            n_select,
        )
    }

    pub fn dense(contexts: Array2<f64>, n_select: usize) -> Result<Self> {
        Self::new(ArmFeatures::Dense(contexts), n_select)
    }

    fn new(features: ArmFeatures, n_select: usize) -> Result<Self> {
        let arms = features.arm_count();
        if arms == 0 {
            return Err(Error::Empty("arm round"));
        }
        if n_select > arms {
            return Err(Error::InvalidArgument(format!(
                "cannot select {n_select} of {arms} arms"
            )));
        }
        Ok(Self { features, n_select })
    }

    pub fn arm_count(&self) -> usize {
        self.features.arm_count()
    }
}

/// Output of one forward pass plus the top-n selection.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    /// Softmax-normalised attention, one entry per arm.
    pub scores: Array1<f64>,
    pub log_vars: Array1<f64>,
    /// Selected arm indices in ascending order.
    pub selected: Vec<usize>,
    /// `scores` at the selected indices.
    pub predicted: Vec<f64>,
}

/// Uniform noise for the four dropout layers, or no dropout at all.
#[derive(Debug, Clone, PartialEq)]
pub enum DropoutNoise {
    Disabled,
    Sampled(Box<[Array1<f64>; 4]>),
}

impl DropoutNoise {
    pub fn sample<R: Rng + ?Sized>(model: &ClutchModel, rng: &mut R) -> Self {
        let [a, b, c, d] = &model.dropout;
        DropoutNoise::Sampled(Box::new([
            a.draw_noise(rng),
            b.draw_noise(rng),
            c.draw_noise(rng),
            d.draw_noise(rng),
        ]))
    }
}

/// Returns the `n` indices with the largest values, ties to the lower index,
/// in ascending index order.
pub fn select_top(values: ArrayView1<'_, f64>, n: usize) -> Result<Vec<usize>> {
    if n > values.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot select {n} of {} arms",
            values.len()
        )));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[j].total_cmp(&values[i]).then(i.cmp(&j)));
    let mut picked = order[..n].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClutchModel {
    pub input: InputLayer,
    pub encoder: GruCell,
    pub decoder: GruCell,
    pub w1: Parameter,
    pub w2: Parameter,
    pub v_reward: Parameter,
    pub v_logvar: Parameter,
    /// Masks on: reward/encoder, reward/decoder, log-var/encoder, log-var/decoder.
    pub dropout: [ConcreteDropoutLayer; 4],
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub(crate) struct Trace {
    sequence: Array2<f64>,
    encoder: GruSequence,
    decoder: GruSequence,
    offset: usize,
    p1: Array2<f64>,
    p2: Array1<f64>,
    masks: Option<[crate::dropout::MaskSample; 4]>,
    h_reward: Array2<f64>,
    pub(crate) scores: Array1<f64>,
    logits: Array1<f64>,
    /// Arms whose log-variance was evaluated, with their hidden rows.
    logvar_rows: Vec<usize>,
    h_logvar: Array2<f64>,
    pub(crate) log_vars: Array1<f64>,
}

impl ClutchModel {
    pub fn new<R: Rng + ?Sized>(
        spec: InputSpec,
        dims: ModelDims,
        dropout: DropoutSettings,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.embed_dim == 0 || dims.hidden_dim == 0 || dims.attention_dim == 0 {
            return Err(Error::InvalidArgument("model dimensions must be positive".into()));
        }
        let input = InputLayer::new(spec, dims.embed_dim, rng)?;
        let encoder = GruCell::new("encoder", dims.embed_dim, dims.hidden_dim, rng);
        let decoder = GruCell::new("decoder", dims.embed_dim, dims.hidden_dim, rng);
        let a = dims.attention_dim;
        let h = dims.hidden_dim;
        let w1 = Parameter::uniform("attn.w1", a, h, h, rng);
        let w2 = Parameter::uniform("attn.w2", a, h, h, rng);
        let v_reward = Parameter::uniform("head.v_reward", 1, a, a, rng);
        let v_logvar = Parameter::uniform("head.v_logvar", 1, a, a, rng);
        let layer = |i: usize| {
            ConcreteDropoutLayer::new(
                format!("dropout.{i}.p_logit"),
                a,
                dropout.initial_p,
                dropout.temperature,
                dropout.weight_reg,
                dropout.dropout_reg,
            )
        };
        let dropout = [layer(0)?, layer(1)?, layer(2)?, layer(3)?];
        Ok(Self {
            input,
            encoder,
            decoder,
            w1,
            w2,
            v_reward,
            v_logvar,
            dropout,
        })
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            embed_dim: self.input.embed_dim(),
            hidden_dim: self.encoder.hidden_dim(),
            attention_dim: self.w1.value.nrows(),
        }
    }

    pub fn input_spec(&self) -> InputSpec {
        self.input.spec()
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = self.input.params();
        out.extend(self.encoder.params());
        out.extend(self.decoder.params());
        out.extend([&self.w1, &self.w2, &self.v_reward, &self.v_logvar]);
        out.extend(self.dropout.iter().map(|d| &d.p_logit));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.input.params_mut();
        out.extend(self.encoder.params_mut());
        out.extend(self.decoder.params_mut());
        out.extend([&mut self.w1, &mut self.w2, &mut self.v_reward, &mut self.v_logvar]);
        out.extend(self.dropout.iter_mut().map(|d| &mut d.p_logit));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn drop_probabilities(&self) -> [f64; 4] {
        [0, 1, 2, 3].map(|i| self.dropout[i].p())
    }

    /// Sum of the four dropout regularisers (weights: W₁ for layers 0 and 2,
    /// W₂ for layers 1 and 3).
    pub fn regularization(&self) -> f64 {
        self.dropout
            .iter()
            .enumerate()
            .map(|(i, d)| d.regularizer(if i % 2 == 0 { &self.w1 } else { &self.w2 }))
            .sum()
    }

    pub(crate) fn regularization_backward(&mut self, scale: f64) {
        let Self { dropout, w1, w2, .. } = self;
        for (i, d) in dropout.iter_mut().enumerate() {
            d.regularizer_backward(if i % 2 == 0 { &mut *w1 } else { &mut *w2 }, scale);
        }
    }

    /// Attention scores `a` and log-variances `φ` for every arm.
    pub fn forward(&self, round: &ArmRound, noise: &DropoutNoise) -> Result<(Array1<f64>, Array1<f64>)> {
        let all: Vec<usize> = (0..round.arm_count()).collect();
        let trace = self.forward_traced(round, noise, &all)?;
        Ok((trace.scores, trace.log_vars))
    }

    /// Forward pass followed by top-`n_select` selection.
    pub fn decide(&self, round: &ArmRound, noise: &DropoutNoise) -> Result<Decision> {
        let (scores, log_vars) = self.forward(round, noise)?;
        let selected = select_top(scores.view(), round.n_select)?;
        let predicted = selected.iter().map(|&i| scores[i]).collect();
        Ok(Decision {
            scores,
            log_vars,
            selected,
            predicted,
        })
    }

    /// Forward pass that keeps intermediates; log-variances are evaluated
    /// only for `logvar_rows`.
    pub(crate) fn forward_traced(
        &self,
        round: &ArmRound,
        noise: &DropoutNoise,
        logvar_rows: &[usize],
    ) -> Result<Trace> {
        let n = round.arm_count();
        if n == 0 {
            return Err(Error::Empty("arm round"));
        }
        if let Some(&bad) = logvar_rows.iter().find(|&&r| r >= n) {
            return Err(Error::Index {
                what: "arm round",
                index: bad,
                size: n,
            });
        }
        let sequence = self.input.encode(&round.features)?;
        let hidden = self.encoder.hidden_dim();
        let encoder = self
            .encoder
            .forward_sequence(sequence.view(), Array1::zeros(hidden).view())?;
        let start = self.input.start_input();
        let decoder = self.decoder.forward_sequence(start.view(), encoder.last().view())?;
        let offset = round.features.arm_offset();
        let arms = encoder.outputs.slice(s![offset.., ..]);
        let d = decoder.outputs.row(0);

        let p1 = arms.dot(&self.w1.value.t());
        let p2 = self.w2.value.dot(&d);

        let masks = match noise {
            DropoutNoise::Disabled => None,
            DropoutNoise::Sampled(u) => {
                let mut out = Vec::with_capacity(4);
                for (layer, u) in self.dropout.iter().zip(u.iter()) {
                    if u.len() != layer.input_dim {
                        return Err(Error::shape("dropout noise", layer.input_dim, u.len()));
                    }
                    out.push(layer.sample(u.view())?);
                }
                let [a, b, c, d]: [_; 4] = out.try_into().expect("four layers");
                Some([a, b, c, d])
            }
        };
        let (enc_mask_r, dec_term_r, enc_mask_v, dec_term_v) = match &masks {
            None => (None, p2.clone(), None, p2.clone()),
            Some(m) => (Some(&m[0].mask), &p2 * &m[1].mask, Some(&m[2].mask), &p2 * &m[3].mask),
        };

        let mut h_reward = match enc_mask_r {
            Some(m) => &p1 * m,
            None => p1.clone(),
        };
        h_reward += &dec_term_r;
        h_reward.mapv_inplace(f64::tanh);
        let logits = h_reward.dot(&self.v_reward.as_vector());
        let scores = softmax(logits.view())?;

        let mut h_logvar = p1.select(Axis(0), logvar_rows);
        if let Some(m) = enc_mask_v {
            h_logvar *= m;
        }
        h_logvar += &dec_term_v;
        h_logvar.mapv_inplace(f64::tanh);
        let log_vars = h_logvar.dot(&self.v_logvar.as_vector());

        Ok(Trace {
            sequence,
            encoder,
            decoder,
            offset,
            p1,
            p2,
            masks,
            h_reward,
            scores,
            logits,
            logvar_rows: logvar_rows.to_vec(),
            h_logvar,
            log_vars,
        })
    }

    /// Accumulates parameter gradients given `dL/da` for every arm and
    /// `dL/dφ` for each evaluated log-variance row.
    pub(crate) fn backward(
        &mut self,
        round: &ArmRound,
        trace: &Trace,
        d_scores: ArrayView1<'_, f64>,
        d_log_vars: ArrayView1<'_, f64>,
    ) {
        let d_logits = softmax_backward(trace.scores.view(), d_scores);
        debug_assert_eq!(d_logits.len(), trace.logits.len());

        // Reward head.
        self.v_reward
            .grad
            .row_mut(0)
            .scaled_add(1.0, &trace.h_reward.t().dot(&d_logits));
        let v_r = self.v_reward.as_vector();
        let mut d_pre_r = Array2::zeros(trace.h_reward.raw_dim());
        Zip::from(d_pre_r.rows_mut())
            .and(trace.h_reward.rows())
            .and(&d_logits)
            .for_each(|mut out, h, &du| {
                Zip::from(&mut out)
                    .and(&h)
                    .and(&v_r)
                    .for_each(|o, &h, &v| *o = du * v * (1.0 - h * h));
            });

        // Log-variance head.
        self.v_logvar
            .grad
            .row_mut(0)
            .scaled_add(1.0, &trace.h_logvar.t().dot(&d_log_vars));
        let v_v = self.v_logvar.as_vector();
        let mut d_pre_v = Array2::zeros(trace.h_logvar.raw_dim());
        Zip::from(d_pre_v.rows_mut())
            .and(trace.h_logvar.rows())
            .and(&d_log_vars)
            .for_each(|mut out, h, &dphi| {
                Zip::from(&mut out)
                    .and(&h)
                    .and(&v_v)
                    .for_each(|o, &h, &v| *o = dphi * v * (1.0 - h * h));
            });

        let sum_r = d_pre_r.sum_axis(Axis(0));
        let sum_v = d_pre_v.sum_axis(Axis(0));
        let mut d_p1;
        let d_p2;
        match &trace.masks {
            None => {
                d_p1 = d_pre_r;
                for (k, &row) in trace.logvar_rows.iter().enumerate() {
                    let mut target = d_p1.row_mut(row);
                    target += &d_pre_v.row(k);
                }
                d_p2 = &sum_r + &sum_v;
            }
            Some(m) => {
                let p1_v = trace.p1.select(Axis(0), &trace.logvar_rows);
                let d_mask = [
                    (&d_pre_r * &trace.p1).sum_axis(Axis(0)),
                    &sum_r * &trace.p2,
                    (&d_pre_v * &p1_v).sum_axis(Axis(0)),
                    &sum_v * &trace.p2,
                ];
                for (layer, (dm, sample)) in self.dropout.iter_mut().zip(d_mask.iter().zip(m.iter())) {
                    layer.p_logit.grad[[0, 0]] += dm.dot(&sample.dmask_dlogit);
                }
                d_p1 = d_pre_r * &m[0].mask;
                let d_pv = d_pre_v * &m[2].mask;
                for (k, &row) in trace.logvar_rows.iter().enumerate() {
                    let mut target = d_p1.row_mut(row);
                    target += &d_pv.row(k);
                }
                d_p2 = &sum_r * &m[1].mask + &sum_v * &m[3].mask;
            }
        }

        let offset = trace.offset;
        let arms = trace.encoder.outputs.slice(s![offset.., ..]);
        self.w1.grad += &d_p1.t().dot(&arms);
        let d_arms = d_p1.dot(&self.w1.value);
        let d = trace.decoder.outputs.row(0);
        crate::substrate::outer_accumulate(&mut self.w2.grad, d_p2.view(), d);
        let d_d = self.w2.value.t().dot(&d_p2);

        let hidden = self.encoder.hidden_dim();
        let d_dec_out = d_d.insert_axis(Axis(0));
        let (d_start, d_enc_last) =
            self.decoder
                .backward_sequence(&trace.decoder, d_dec_out.view(), Array1::zeros(hidden).view());

        let mut d_enc_out = Array2::zeros(trace.encoder.outputs.raw_dim());
        d_enc_out.slice_mut(s![offset.., ..]).assign(&d_arms);
        let (d_inputs, _) = self
            .encoder
            .backward_sequence(&trace.encoder, d_enc_out.view(), d_enc_last.view());
        debug_assert_eq!(d_inputs.nrows(), trace.sequence.nrows());

        self.input.backward(&round.features, d_inputs.view(), d_start.row(0));
    }
}
