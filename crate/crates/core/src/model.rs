//! The Mamba Hawkes Process and its hybrid variant.
//!
//! A sequence `(t_i, k_i)` is embedded, passed through Mamba blocks whose
//! step sizes are the transformed inter-event gaps, optionally through causal
//! attention blocks, and finally through a two-layer MLP, giving one hidden
//! state `h_j` per event. Between `t_j` and `t_{j+1}` type `k` fires with
//! intensity
//!
//! ```text
//! λ_k(t) = β_k · log(1 + exp((α_k (t − t_j) + w_k·h_j + b_k) / β_k))
//! ```
//!
//! The log-likelihood is `Σ_{i≥2} log λ_{k_i}(t_i) − ∫_{t_1}^{t_n} Σ_k λ_k(t) dt`.
//! Two linear heads on `h_j` predict the next type and the next time.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::AttentionBlock;
use crate::data::{Batch, EventSequence, PAD_TYPE};
use crate::error::{Error, Result};
use crate::nn::{Linear, RmsNorm};
use crate::ssm::MambaBlock;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    /// Mamba blocks only.
    Mhp,
    /// Mamba blocks followed by causal attention blocks.
    MhpE,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Mhp => "mhp",
            Arch::MhpE => "mhp-e",
        })
    }
}

impl FromStr for Arch {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mhp" => Ok(Arch::Mhp),
            "mhp-e" => Ok(Arch::MhpE),
            _ => Err(format!("unknown architecture `{s}` (expected mhp or mhp-e)")),
        }
    }
}

/// How inter-event gaps become SSM step sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeltaTransform {
    /// `clamp(softplus(gap), delta_min, delta_max)`.
    Softplus,
    /// `clamp(gap, delta_min, delta_max)`.
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MhpConfig {
    pub num_types: usize,
    pub arch: Arch,
    pub d_model: usize,
    pub d_state: usize,
    pub d_conv: usize,
    pub expand: usize,
    /// Number of Mamba blocks.
    pub n_layers: usize,
    pub mlp_hidden: usize,
    pub attn_blocks: usize,
    pub attn_heads: usize,
    pub ffn_width: usize,
    /// Uniform draws per interval for the training compensator.
    pub mc_samples: usize,
    /// Trapezoid nodes per interval for the reporting compensator.
    pub quad_points: usize,
    /// Weight of the next-type cross-entropy.
    pub event_weight: f64,
    /// Weight of the next-time squared error.
    pub time_weight: f64,
    pub delta_transform: DeltaTransform,
    pub delta_min: f64,
    pub delta_max: f64,
    /// Use `log Σ_k λ_k(t_i)` instead of `log λ_{k_i}(t_i)` in the event term.
    pub total_intensity_loglik: bool,
    /// Timestamps are divided by this before entering the model.
    pub time_scale: f64,
}

impl Default for MhpConfig {
    fn default() -> Self {
        MhpConfig {
            num_types: 1,
            arch: Arch::Mhp,
            d_model: 64,
            d_state: 16,
            d_conv: 4,
            expand: 2,
            n_layers: 4,
            mlp_hidden: 64,
            attn_blocks: 4,
            attn_heads: 4,
            ffn_width: 256,
            mc_samples: 100,
            quad_points: 1024,
            event_weight: 1.0,
            time_weight: 1e-4,
            delta_transform: DeltaTransform::Softplus,
            delta_min: 1e-6,
            delta_max: 1e4,
            total_intensity_loglik: false,
            time_scale: 1.0,
        }
    }
}

impl MhpConfig {
    pub fn new(num_types: usize) -> Self {
        MhpConfig {
            num_types,
            ..Self::default()
        }
    }

    /// Hybrid encoder: two Mamba blocks then attention.
    pub fn hybrid(num_types: usize) -> Self {
        MhpConfig {
            num_types,
            arch: Arch::MhpE,
            n_layers: 2,
            ..Self::default()
        }
    }

    /// Sets `d_model` together with the widths that default to it.
    pub fn with_d_model(mut self, d_model: usize) -> Self {
        self.d_model = d_model;
        self.mlp_hidden = d_model;
        self.ffn_width = 4 * d_model;
        self
    }

    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_types", self.num_types),
            ("d_model", self.d_model),
            ("d_state", self.d_state),
            ("d_conv", self.d_conv),
            ("expand", self.expand),
            ("mlp_hidden", self.mlp_hidden),
            ("mc_samples", self.mc_samples),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.quad_points < 2 {
            return Err(Error::Config("quad_points must be at least 2".into()));
        }
        if self.arch == Arch::MhpE && self.attn_blocks > 0 {
            if self.attn_heads == 0 || self.d_model % self.attn_heads != 0 {
                return Err(Error::Config(format!(
                    "d_model {} must be divisible by attn_heads {}",
                    self.d_model, self.attn_heads
                )));
            }
            if self.ffn_width == 0 {
                return Err(Error::Config("ffn_width must be positive".into()));
            }
        }
        let finite_pos = |v: f64| v > 0.0 && v.is_finite();
        if !(finite_pos(self.delta_min) && finite_pos(self.delta_max) && self.delta_min <= self.delta_max) {
            return Err(Error::Config("need 0 < delta_min <= delta_max".into()));
        }
        if !finite_pos(self.time_scale) {
            return Err(Error::Config("time_scale must be positive".into()));
        }
        if !(self.event_weight >= 0.0 && self.time_weight >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    /// Step size fed to the SSM for a gap.
    pub fn step_size(&self, gap: f64) -> f64 {
        let d = match self.delta_transform {
            DeltaTransform::Softplus => crate::tensor::softplus_value(gap),
            DeltaTransform::Raw => gap,
        };
        d.clamp(self.delta_min, self.delta_max)
    }
}

/// How the compensator `∫ λ` is computed on each interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Integrator {
    /// `samples` uniform points per interval. The draws for a sequence come
    /// from a ChaCha stream keyed by `(seed, sequence id)`.
    MonteCarlo { samples: usize, seed: u64 },
    /// Trapezoid rule with `points` nodes per interval, endpoints included.
    Trapezoid { points: usize },
}

/// Learned intensity parameters: `α`, `w` (as the columns of a `[D, K]`
/// weight), `b` and `log β`.
#[derive(Clone, Copy, Debug)]
pub struct IntensityHead {
    pub alpha: ParamId,
    pub proj: Linear,
    pub log_beta: ParamId,
}

impl IntensityHead {
    /// `λ_k` at `elapsed` time units after an event with hidden state `h`.
    pub fn evaluate(&self, store: &ParamStore, h: &[f64], elapsed: f64) -> Vec<f64> {
        let w = store.value(self.proj.weight);
        let k = w.shape()[1];
        let b = self.proj.bias.map(|id| store.value(id).data().to_vec()).unwrap_or(vec![0.0; k]);
        let alpha = store.value(self.alpha).data();
        let beta = store.value(self.log_beta).data();
        (0..k)
            .map(|j| {
                let score: f64 = h.iter().enumerate().map(|(d, hv)| hv * w.data()[d * k + j]).sum();
                crate::tensor::softplus_scaled_value(alpha[j] * elapsed + score + b[j], beta[j].exp())
            })
            .collect()
    }
}

/// Next-event prediction from the history seen so far.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probs: Vec<f64>,
    /// 0-based type with the largest probability.
    pub argmax: usize,
    /// Predicted absolute time of the next event.
    pub time: f64,
    /// Predicted gap, the difference of consecutive time predictions (the
    /// first prediction is measured from the first event's time).
    pub gap: f64,
}

/// Graph outputs for one batch. Every loss is summed over the batch rows.
pub struct Losses<'g> {
    pub hidden: Var<'g>,
    pub log_likelihood: Var<'g>,
    /// Event part of the log-likelihood, `Σ log λ` at the observed events.
    pub event_log_intensity: Var<'g>,
    /// Integrated total intensity.
    pub compensator: Var<'g>,
    pub event: Var<'g>,
    pub time: Var<'g>,
    pub total: Var<'g>,
    /// `[B, L−1, K]`, row `j` scores the type of event `j + 1`.
    pub type_logits: Var<'g>,
    /// `[B, L−1]`, predicted gap to event `j + 1`.
    pub predicted_gaps: Var<'g>,
}

/// Per-sequence evaluation totals.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SequenceStats {
    pub log_likelihood: f64,
    /// Number of predicted events, `n − 1`.
    pub targets: usize,
    pub correct: usize,
    pub squared_error: f64,
    pub event_loss: f64,
    pub time_loss: f64,
}

impl SequenceStats {
    pub fn merge(&mut self, other: &SequenceStats) {
        self.log_likelihood += other.log_likelihood;
        self.targets += other.targets;
        self.correct += other.correct;
        self.squared_error += other.squared_error;
        self.event_loss += other.event_loss;
        self.time_loss += other.time_loss;
    }
}

/// Model parameters and wiring.
#[derive(Clone, Debug)]
pub struct Mhp {
    config: MhpConfig,
    store: ParamStore,
    embedding: ParamId,
    blocks: Vec<MambaBlock>,
    attention: Vec<AttentionBlock>,
    final_norm: RmsNorm,
    mlp1: Linear,
    mlp2: Linear,
    intensity: IntensityHead,
    type_head: Linear,
    time_head: Linear,
}

/// Constant tensors derived from a batch.
struct BatchInputs {
    b: usize,
    l: usize,
    /// `[B, L]` scaled times.
    times: Vec<f64>,
    /// `[B, L]` SSM step sizes.
    steps: Tensor,
    /// `[B, L, K]` one-hot event types, zero rows at pads.
    onehot: Tensor,
}

impl Mhp {
    pub fn new(config: MhpConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (k, d) = (config.num_types, config.d_model);
        let embed_init = Tensor::new(vec![d, k], (0..d * k).map(|_| StandardNormal.sample(&mut rng)).collect())?;
        let embedding = store.add("embedding.weight", embed_init)?;
        let blocks = (0..config.n_layers)
            .map(|i| {
                MambaBlock::new(
                    &mut store,
                    &format!("mamba.{i}"),
                    d,
                    config.d_inner(),
                    config.d_state,
                    config.d_conv,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let final_norm = RmsNorm::new(&mut store, "final_norm", d)?;
        let mlp1 = Linear::new(&mut store, "mlp.0", d, config.mlp_hidden, true, &mut rng)?;
        let mlp2 = Linear::new(&mut store, "mlp.1", config.mlp_hidden, d, true, &mut rng)?;
        let intensity = IntensityHead {
            alpha: store.add("intensity.alpha", Tensor::full(vec![k], -0.1))?,
            proj: Linear::new(&mut store, "intensity.proj", d, k, true, &mut rng)?,
            log_beta: store.add("intensity.log_beta", Tensor::zeros(vec![k]))?,
        };
        let type_head = Linear::new(&mut store, "type_head", d, k, false, &mut rng)?;
        let time_head = Linear::new(&mut store, "time_head", d, 1, false, &mut rng)?;
        let attention = if config.arch == Arch::MhpE {
            (0..config.attn_blocks)
                .map(|i| {
                    AttentionBlock::new(
                        &mut store,
                        &format!("attention.{i}"),
                        d,
                        config.attn_heads,
                        config.ffn_width,
                        &mut rng,
                    )
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(Mhp {
            config,
            store,
            embedding,
            blocks,
            attention,
            final_norm,
            mlp1,
            mlp2,
            intensity,
            type_head,
            time_head,
        })
    }

    pub fn config(&self) -> &MhpConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn mamba_blocks(&self) -> &[MambaBlock] {
        &self.blocks
    }

    pub fn attention_blocks(&self) -> &[AttentionBlock] {
        &self.attention
    }

    pub fn intensity_head(&self) -> &IntensityHead {
        &self.intensity
    }

    pub fn param(&self, name: &str) -> Result<ParamId> {
        self.store
            .id(name)
            .ok_or_else(|| Error::Config(format!("no parameter named `{name}`")))
    }

    /// Overwrites a parameter by name.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self.param(name)?;
        Ok(self.store.set_value(id, value)?)
    }

    fn check_types(&self, batch: &Batch) -> Result<()> {
        let k = self.config.num_types;
        match batch.types.iter().find(|&&t| t != PAD_TYPE && t >= k) {
            Some(&t) => Err(Error::TypeOutOfRange { k: t + 1, num_types: k }),
            None => Ok(()),
        }
    }

    fn inputs(&self, batch: &Batch) -> Result<BatchInputs> {
        self.check_types(batch)?;
        let (b, l, k) = (batch.size, batch.max_len, self.config.num_types);
        let scale = self.config.time_scale;
        let times: Vec<f64> = batch.times.iter().map(|t| t / scale).collect();
        let mut steps = vec![1.0; b * l];
        let mut onehot = vec![0.0; b * l * k];
        for r in 0..b {
            for i in 0..batch.lengths[r] {
                let idx = r * l + i;
                let gap = if i == 0 { times[idx] } else { times[idx] - times[idx - 1] };
                steps[idx] = self.config.step_size(gap);
                onehot[idx * k + batch.types[idx]] = 1.0;
            }
        }
        Ok(BatchInputs {
            b,
            l,
            times,
            steps: Tensor::new(vec![b, l], steps)?,
            onehot: Tensor::new(vec![b, l, k], onehot)?,
        })
    }

    /// `[B, L, D]` event embeddings: row `i` is column `k_i` of the
    /// embedding matrix, zero at pads.
    pub fn embed<'g>(&self, g: &'g Graph, batch: &Batch) -> Result<Var<'g>> {
        let inputs = self.inputs(batch)?;
        self.embed_inputs(g, &inputs)
    }

    fn embed_inputs<'g>(&self, g: &'g Graph, inputs: &BatchInputs) -> Result<Var<'g>> {
        let w = g.param(&self.store, self.embedding).t()?;
        Ok(g.constant(inputs.onehot.clone()).matmul(w)?)
    }

    fn encode_inputs<'g>(&self, g: &'g Graph, inputs: &BatchInputs) -> Result<Var<'g>> {
        let store = &self.store;
        let mut x = self.embed_inputs(g, inputs)?;
        let steps = g.constant(inputs.steps.clone());
        for block in &self.blocks {
            x = block.forward(store, x, steps)?;
        }
        for block in &self.attention {
            x = block.forward(store, x)?;
        }
        let x = self.final_norm.forward(store, x)?;
        let hidden = self.mlp1.forward(store, x)?.silu();
        Ok(self.mlp2.forward(store, hidden)?)
    }

    /// Hidden states `[B, L, D]`; row `j` depends only on events `1..=j`.
    pub fn encode<'g>(&self, g: &'g Graph, batch: &Batch) -> Result<Var<'g>> {
        let inputs = self.inputs(batch)?;
        self.encode_inputs(g, &inputs)
    }

    /// Hidden states of one sequence as an `[L, D]` tensor.
    pub fn encode_sequence(&self, seq: &EventSequence) -> Result<Tensor> {
        let g = Graph::new();
        let h = self.encode(&g, &Batch::single(seq))?;
        let d = self.config.d_model;
        Ok(h.value().reshape(vec![seq.len(), d])?)
    }

    /// Losses for a batch. Rows with a single event contribute nothing.
    pub fn forward<'g>(&self, g: &'g Graph, batch: &Batch, integrator: Integrator) -> Result<Losses<'g>> {
        if batch.max_len < 2 {
            return Err(Error::SequenceTooShort {
                len: batch.max_len,
                min: 2,
            });
        }
        let inputs = self.inputs(batch)?;
        let hidden = self.encode_inputs(g, &inputs)?;
        let (b, l, k) = (inputs.b, inputs.l, self.config.num_types);
        let m = l - 1;
        let store = &self.store;
        let h = hidden.slice(1, 0, m)?;

        // per interval: true gap, validity, next-type one-hot, first time
        let mut gaps = vec![0.0; b * m];
        let mut valid = vec![0.0; b * m];
        let mut next = vec![0.0; b * m * k];
        let mut first = vec![0.0; b * m];
        for r in 0..b {
            first[r * m] = inputs.times[r * l];
            for j in 0..batch.lengths[r].saturating_sub(1) {
                let idx = r * m + j;
                gaps[idx] = inputs.times[r * l + j + 1] - inputs.times[r * l + j];
                valid[idx] = 1.0;
                next[idx * k + batch.types[r * l + j + 1]] = 1.0;
            }
        }
        let gaps_t = Tensor::new(vec![b, m], gaps)?;
        let valid_v = g.constant(Tensor::new(vec![b, m], valid)?);
        let next_v = g.constant(Tensor::new(vec![b, m, k], next)?);

        // intensity arguments: α (t − t_j) + w·h_j + b
        let score = self.intensity.proj.forward(store, h)?;
        let alpha = g.param(store, self.intensity.alpha);
        let beta = g.param(store, self.intensity.log_beta).exp();
        let gap_col = g.constant(gaps_t.reshape(vec![b, m, 1])?);
        let at_events = score.add(gap_col.mul(alpha)?)?.softplus_scaled(beta)?;
        let event_term = if self.config.total_intensity_loglik {
            safe_log(at_events.sum_axis(2)?)?.mul(valid_v)?.sum_all()
        } else {
            safe_log(at_events)?.mul(next_v)?.sum_all()
        };

        let (offsets, weights, s) = integration_nodes(batch, &gaps_t, integrator)?;
        let offsets = g.constant(offsets);
        let weights = g.constant(weights);
        let at_nodes = score
            .reshape(vec![b, m, 1, k])?
            .add(offsets.mul(alpha)?)?
            .softplus_scaled(beta)?;
        debug_assert_eq!(at_nodes.shape(), vec![b, m, s, k]);
        let compensator = at_nodes.sum_axis(3)?.mul(weights)?.sum_all();
        let mut log_likelihood = event_term.sub(compensator)?;
        let shift = self.config.time_scale.ln();
        if shift != 0.0 {
            let n: usize = batch.lengths.iter().map(|n| n.saturating_sub(1)).sum();
            log_likelihood = log_likelihood.add_scalar(-(n as f64) * shift);
        }

        let type_logits = self.type_head.forward(store, h)?;
        let event = type_logits.log_softmax(2)?.mul(next_v)?.sum_all().neg();

        // t̂ for events 2..L, then predicted gaps with t̂_1 = t_1
        let t_hat = self.time_head.forward(store, h)?.reshape(vec![b, m])?;
        let prev = t_hat
            .pad(1, 1, 0)?
            .slice(1, 0, m)?
            .add(g.constant(Tensor::new(vec![b, m], first)?))?;
        let predicted_gaps = t_hat.sub(prev)?;
        let time = g
            .constant(gaps_t)
            .sub(predicted_gaps)?
            .mul(valid_v)?
            .square()
            .sum_all();

        let total = log_likelihood
            .neg()
            .add(event.scale(self.config.event_weight))?
            .add(time.scale(self.config.time_weight))?;
        Ok(Losses {
            hidden,
            log_likelihood,
            event_log_intensity: event_term,
            compensator,
            event,
            time,
            total,
            type_logits,
            predicted_gaps,
        })
    }

    /// Log-likelihood of one sequence, in the original time units.
    pub fn log_likelihood(&self, seq: &EventSequence, integrator: Integrator) -> Result<f64> {
        let g = Graph::new();
        Ok(self.forward(&g, &Batch::single(seq), integrator)?.log_likelihood.item())
    }

    /// `(L_event, L_time, L_total)` for one sequence.
    pub fn losses(&self, seq: &EventSequence, integrator: Integrator) -> Result<(f64, f64, f64)> {
        let g = Graph::new();
        let l = self.forward(&g, &Batch::single(seq), integrator)?;
        Ok((l.event.item(), l.time.item(), l.total.item()))
    }

    /// The deterministic compensator used for reporting.
    pub fn quadrature(&self) -> Integrator {
        Integrator::Trapezoid {
            points: self.config.quad_points,
        }
    }

    /// Log-likelihood, accuracy and error totals for one sequence. `id`
    /// keys the Monte Carlo stream and is ignored by quadrature.
    pub fn evaluate_sequence(&self, seq: &EventSequence, integrator: Integrator, id: usize) -> Result<SequenceStats> {
        let g = Graph::new();
        let mut batch = Batch::single(seq);
        batch.ids[0] = id;
        let l = self.forward(&g, &batch, integrator)?;
        let logits = l.type_logits.value();
        let pred = l.predicted_gaps.value();
        let k = self.config.num_types;
        let scale = self.config.time_scale;
        let mut stats = SequenceStats {
            log_likelihood: l.log_likelihood.item(),
            targets: seq.len() - 1,
            event_loss: l.event.item(),
            time_loss: l.time.item(),
            ..SequenceStats::default()
        };
        let (times, types) = (seq.times(), seq.types());
        for j in 0..seq.len() - 1 {
            if argmax(&logits.data()[j * k..(j + 1) * k]) == types[j + 1] {
                stats.correct += 1;
            }
            let err = (times[j + 1] - times[j]) - pred.data()[j] * scale;
            stats.squared_error += err * err;
        }
        Ok(stats)
    }

    /// Intensities `λ_k(t)` given the events of `seq` up to time `t`.
    pub fn intensity(&self, seq: &EventSequence, t: f64) -> Result<Vec<f64>> {
        let times = seq.times();
        if t < times[0] {
            return Err(Error::Config(format!(
                "time {t} precedes the first event at {}",
                times[0]
            )));
        }
        let j = times.partition_point(|&x| x <= t) - 1;
        let h = self.encode_sequence(&seq.prefix(j + 1)?)?;
        let d = self.config.d_model;
        let elapsed = (t - times[j]) / self.config.time_scale;
        let mut lambda = self.intensity.evaluate(&self.store, &h.data()[j * d..(j + 1) * d], elapsed);
        lambda.iter_mut().for_each(|v| *v /= self.config.time_scale);
        Ok(lambda)
    }

    /// Distribution of the next type and the predicted next time after the
    /// last event of `seq`.
    pub fn predict_next(&self, seq: &EventSequence) -> Result<Prediction> {
        let h = self.encode_sequence(seq)?;
        let (n, d, k) = (seq.len(), self.config.d_model, self.config.num_types);
        let row = |j: usize| &h.data()[j * d..(j + 1) * d];
        let dot = |x: &[f64], w: &Tensor, col: usize, width: usize| -> f64 {
            x.iter().enumerate().map(|(i, v)| v * w.data()[i * width + col]).sum()
        };
        let pe = self.store.value(self.type_head.weight);
        let logits: Vec<f64> = (0..k).map(|c| dot(row(n - 1), pe, c, k)).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
        let pt = self.store.value(self.time_head.weight);
        let scale = self.config.time_scale;
        let time = dot(row(n - 1), pt, 0, 1) * scale;
        let prev = if n == 1 {
            seq.times()[0]
        } else {
            dot(row(n - 2), pt, 0, 1) * scale
        };
        Ok(Prediction {
            argmax: argmax(&logits),
            probs,
            time,
            gap: time - prev,
        })
    }
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

/// `log` that keeps tiny intensities finite.
fn safe_log(x: Var<'_>) -> Result<Var<'_>> {
    Ok(x.clamp(f64::MIN_POSITIVE, f64::INFINITY).log()?)
}

/// Offsets from `t_j` `[B, L−1, S, 1]` and weights `[B, L−1, S]` of the
/// integration nodes on every interval; pad intervals get zero weight.
fn integration_nodes(batch: &Batch, gaps: &Tensor, integrator: Integrator) -> Result<(Tensor, Tensor, usize)> {
    let (b, m) = (gaps.shape()[0], gaps.shape()[1]);
    let s = match integrator {
        Integrator::MonteCarlo { samples, .. } => samples,
        Integrator::Trapezoid { points } => points,
    };
    if s == 0 || matches!(integrator, Integrator::Trapezoid { points: 1 }) {
        return Err(Error::Config(format!("invalid integrator {integrator:?}")));
    }
    let mut offsets = vec![0.0; b * m * s];
    let mut weights = vec![0.0; b * m * s];
    for r in 0..b {
        let intervals = batch.lengths[r].saturating_sub(1);
        let mut rng = match integrator {
            Integrator::MonteCarlo { seed, .. } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(batch.ids[r] as u64);
                Some(rng)
            }
            Integrator::Trapezoid { .. } => None,
        };
        for j in 0..intervals {
            let gap = gaps.data()[r * m + j];
            let base = (r * m + j) * s;
            for q in 0..s {
                let (u, w) = match rng.as_mut() {
                    Some(rng) => (rng.random::<f64>(), 1.0 / s as f64),
                    None => {
                        let u = q as f64 / (s - 1) as f64;
                        let w = if q == 0 || q == s - 1 { 0.5 } else { 1.0 };
                        (u, w / (s - 1) as f64)
                    }
                };
                offsets[base + q] = u * gap;
                weights[base + q] = w * gap;
            }
        }
    }
    Ok((
        Tensor::new(vec![b, m, s, 1], offsets)?,
        Tensor::new(vec![b, m, s], weights)?,
        s,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fd::{numeric_grad, rel_err};
    use std::f64::consts::LN_2;

    fn tiny(num_types: usize, arch: Arch) -> MhpConfig {
        let mut c = match arch {
            Arch::Mhp => MhpConfig::new(num_types),
            Arch::MhpE => MhpConfig::hybrid(num_types),
        }
        .with_d_model(8);
        c.d_state = 4;
        c.n_layers = 1;
        c.attn_blocks = 1;
        c.attn_heads = 2;
        c.mc_samples = 20;
        c.quad_points = 64;
        c
    }

    fn seq(times: &[f64], types: &[usize]) -> EventSequence {
        EventSequence::new(times.to_vec(), types.to_vec()).unwrap()
    }

    /// Pins every λ_k to the constant `softplus(bias)`.
    fn constant_intensity(model: &mut Mhp, bias: f64) {
        let (d, k) = (model.config.d_model, model.config.num_types);
        model.set_param("intensity.alpha", Tensor::zeros(vec![k])).unwrap();
        model.set_param("intensity.proj.weight", Tensor::zeros(vec![d, k])).unwrap();
        model.set_param("intensity.proj.bias", Tensor::full(vec![k], bias)).unwrap();
        model.set_param("intensity.log_beta", Tensor::zeros(vec![k])).unwrap();
    }

    #[test]
    fn identity_embedding_selects_columns() {
        let mut c = tiny(3, Arch::Mhp).with_d_model(3);
        c.n_layers = 0;
        let mut model = Mhp::new(c, 0).unwrap();
        model.set_param("embedding.weight", Tensor::eye(3)).unwrap();
        let g = Graph::new();
        let x = model.embed(&g, &Batch::single(&seq(&[1.0, 2.0], &[1, 0]))).unwrap().value();
        assert_eq!(x.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn out_of_range_type_is_rejected() {
        let model = Mhp::new(tiny(2, Arch::Mhp), 0).unwrap();
        let g = Graph::new();
        let err = model.embed(&g, &Batch::single(&seq(&[1.0], &[2]))).unwrap_err();
        assert!(matches!(err, Error::TypeOutOfRange { k: 3, num_types: 2 }));
    }

    #[test]
    fn embedding_gradient_counts_occurrences() {
        let mut c = tiny(2, Arch::Mhp);
        c.n_layers = 0;
        let model = Mhp::new(c, 0).unwrap();
        let g = Graph::new();
        let x = model.embed(&g, &Batch::single(&seq(&[1.0, 2.0, 3.0], &[1, 0, 1]))).unwrap();
        let grads = g.backward(x.sum_all()).unwrap();
        let gw = grads.param_grad(model.embedding).unwrap();
        for d in 0..8 {
            assert_eq!(gw.get(&[d, 0]), 1.0);
            assert_eq!(gw.get(&[d, 1]), 2.0);
        }
    }

    #[test]
    fn single_event_encodes_to_one_row() {
        let model = Mhp::new(tiny(2, Arch::Mhp), 1).unwrap();
        let h = model.encode_sequence(&seq(&[0.7], &[0])).unwrap();
        assert_eq!(h.shape(), &[1, 8]);
    }

    #[test]
    fn default_wiring() {
        let model = Mhp::new(MhpConfig::new(5), 0).unwrap();
        assert_eq!(model.mamba_blocks().len(), 4);
        assert_eq!(model.store().value(model.param("mamba.0.norm.scale").unwrap()).shape(), &[64]);
        assert_eq!(model.config().d_state, 16);
        assert!(model.attention_blocks().is_empty());
        let hybrid = Mhp::new(MhpConfig::hybrid(5), 0).unwrap();
        assert_eq!(hybrid.mamba_blocks().len(), 2);
        assert_eq!(hybrid.attention_blocks().len(), 4);
    }

    #[test]
    fn encoder_is_causal() {
        for arch in [Arch::Mhp, Arch::MhpE] {
            let model = Mhp::new(tiny(3, arch), 2).unwrap();
            let a = seq(&[0.5, 1.0, 1.7, 2.0, 3.1], &[0, 1, 2, 1, 0]);
            let b = seq(&[0.5, 1.0, 1.7, 2.4, 3.1], &[0, 1, 2, 0, 2]);
            let ha = model.encode_sequence(&a).unwrap();
            let hb = model.encode_sequence(&b).unwrap();
            assert_eq!(&ha.data()[..3 * 8], &hb.data()[..3 * 8], "{arch}");
            assert_ne!(&ha.data()[3 * 8..4 * 8], &hb.data()[3 * 8..4 * 8]);
        }
    }

    #[test]
    fn intensity_at_zero_argument_is_ln2() {
        let mut model = Mhp::new(tiny(2, Arch::Mhp), 0).unwrap();
        constant_intensity(&mut model, 0.0);
        let s = seq(&[0.0, 1.0], &[0, 1]);
        for t in [0.0, 0.3, 1.0, 5.0] {
            for l in model.intensity(&s, t).unwrap() {
                assert!((l - LN_2).abs() < 1e-15);
            }
        }
        assert!(model.intensity(&seq(&[1.0], &[0]), 0.5).is_err());
    }

    #[test]
    fn intensity_grows_with_positive_slope() {
        let mut model = Mhp::new(tiny(3, Arch::Mhp), 4).unwrap();
        model.set_param("intensity.alpha", Tensor::from_vec(vec![0.3, 1.0, 2.5])).unwrap();
        let s = seq(&[0.2, 1.0, 1.5], &[0, 2, 1]);
        let early = model.intensity(&s, 1.6).unwrap();
        let late = model.intensity(&s, 2.9).unwrap();
        assert!(early.iter().zip(&late).all(|(a, b)| b > a));
    }

    #[test]
    fn two_event_closed_form() {
        let mut model = Mhp::new(tiny(1, Arch::Mhp), 0).unwrap();
        constant_intensity(&mut model, 0.0);
        let s = seq(&[0.0, 1.0], &[0, 0]);
        let ll = model.log_likelihood(&s, model.quadrature()).unwrap();
        assert!((ll - (LN_2.ln() - LN_2)).abs() < 1e-12);
        assert!((ll + 1.0598).abs() < 1e-3);
    }

    #[test]
    fn constant_intensity_is_poisson() {
        let mut model = Mhp::new(tiny(1, Arch::Mhp), 0).unwrap();
        constant_intensity(&mut model, 0.4);
        let c = crate::tensor::softplus_value(0.4);
        let s = seq(&[0.3, 0.9, 2.0, 2.2, 4.0, 6.5], &[0; 6]);
        let want = 5.0 * c.ln() - c * (6.5 - 0.3);
        let quad = model.log_likelihood(&s, model.quadrature()).unwrap();
        assert!((quad - want).abs() < 1e-10);
        let mc = model
            .log_likelihood(&s, Integrator::MonteCarlo { samples: 1000, seed: 1 })
            .unwrap();
        assert!(((mc - want) / want).abs() < 1e-10);
    }

    #[test]
    fn total_intensity_variant() {
        let mut c = tiny(3, Arch::Mhp);
        c.total_intensity_loglik = true;
        let mut model = Mhp::new(c, 0).unwrap();
        constant_intensity(&mut model, 0.0);
        let s = seq(&[0.0, 1.0], &[0, 2]);
        let ll = model.log_likelihood(&s, model.quadrature()).unwrap();
        assert!((ll - ((3.0 * LN_2).ln() - 3.0 * LN_2)).abs() < 1e-12);
    }

    #[test]
    fn time_scale_keeps_likelihood_in_original_units() {
        let mut model = Mhp::new(tiny(1, Arch::Mhp), 0).unwrap();
        constant_intensity(&mut model, 0.4);
        let c = crate::tensor::softplus_value(0.4);
        model.config.time_scale = 2.0;
        // in original units the rate is c / 2
        let s = seq(&[1.0, 3.0, 4.0], &[0, 0, 0]);
        let want = 2.0 * (c / 2.0).ln() - c / 2.0 * 3.0;
        let ll = model.log_likelihood(&s, model.quadrature()).unwrap();
        assert!((ll - want).abs() < 1e-12);
        assert!((model.intensity(&s, 3.5).unwrap()[0] - c / 2.0).abs() < 1e-15);
    }

    #[test]
    fn monte_carlo_close_to_quadrature() {
        let model = Mhp::new(tiny(2, Arch::Mhp), 9).unwrap();
        let s = seq(&[0.4, 1.1, 1.3, 2.8, 3.0, 4.4], &[0, 1, 1, 0, 1, 0]);
        let quad = model.log_likelihood(&s, Integrator::Trapezoid { points: 10_000 }).unwrap();
        let mc = model
            .log_likelihood(&s, Integrator::MonteCarlo { samples: 1000, seed: 3 })
            .unwrap();
        assert!(((mc - quad) / quad).abs() < 0.01, "{mc} vs {quad}");
    }

    #[test]
    fn monte_carlo_is_unbiased() {
        let model = Mhp::new(tiny(2, Arch::Mhp), 5).unwrap();
        let s = seq(&[0.4, 1.1, 1.3, 2.8], &[0, 1, 1, 0]);
        let quad = model.log_likelihood(&s, Integrator::Trapezoid { points: 10_000 }).unwrap();
        let draws: Vec<f64> = (0..100)
            .map(|seed| {
                model
                    .log_likelihood(&s, Integrator::MonteCarlo { samples: 10, seed })
                    .unwrap()
            })
            .collect();
        let mean = draws.iter().sum::<f64>() / 100.0;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / 99.0;
        assert!((mean - quad).abs() < 3.0 * (var / 100.0).sqrt() + 1e-9);
    }

    #[test]
    fn raising_event_intensity_raises_likelihood() {
        let model = Mhp::new(tiny(2, Arch::Mhp), 6).unwrap();
        let s = seq(&[0.4, 1.1, 1.3, 2.8], &[0, 1, 1, 0]);
        let g = Graph::new();
        let l = model.forward(&g, &Batch::single(&s), model.quadrature()).unwrap();
        let grads = g.backward(l.log_likelihood).unwrap();
        assert_eq!(grads.wrt(l.event_log_intensity).unwrap().item(), 1.0);
        assert_eq!(grads.wrt(l.compensator).unwrap().item(), -1.0);
    }

    #[test]
    fn zero_type_head_is_uniform() {
        let mut model = Mhp::new(tiny(4, Arch::Mhp), 0).unwrap();
        model.set_param("type_head.weight", Tensor::zeros(vec![8, 4])).unwrap();
        let p = model.predict_next(&seq(&[0.1, 0.5], &[0, 3])).unwrap();
        assert!(p.probs.iter().all(|&x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn shifted_logits_keep_argmax() {
        let v = [0.3, 2.0, -1.0, 1.9];
        let shifted: Vec<f64> = v.iter().map(|x| x + 17.5).collect();
        assert_eq!(argmax(&v), argmax(&shifted));
        assert_eq!(argmax(&v), 1);
    }

    #[test]
    fn prediction_matches_batched_heads() {
        let model = Mhp::new(tiny(3, Arch::Mhp), 7).unwrap();
        let s = seq(&[0.4, 1.1, 1.3, 2.8], &[0, 1, 2, 0]);
        let g = Graph::new();
        let l = model.forward(&g, &Batch::single(&s), model.quadrature()).unwrap();
        let p = model.predict_next(&s.prefix(3).unwrap()).unwrap();
        let logits = l.type_logits.value();
        let row = &logits.data()[2 * 3..3 * 3];
        assert_eq!(p.argmax, argmax(row));
        assert!((p.gap - l.predicted_gaps.value().data()[2]).abs() < 1e-12);
    }

    #[test]
    fn loss_minima() {
        let mut model = Mhp::new(tiny(2, Arch::Mhp), 0).unwrap();
        model.set_param("time_head.weight", Tensor::zeros(vec![8, 1])).unwrap();
        // with t̂ ≡ 0 the first predicted gap is −t_1 and later ones are 0
        let s = seq(&[1.0, 3.0, 4.0], &[0, 1, 0]);
        let (_, time, _) = model.losses(&s, model.quadrature()).unwrap();
        assert!((time - ((2.0 + 1.0f64).powi(2) + 1.0)).abs() < 1e-12);
        let (event, _, total) = model.losses(&s, model.quadrature()).unwrap();
        let ll = model.log_likelihood(&s, model.quadrature()).unwrap();
        assert!((total - (-ll + event + 1e-4 * time)).abs() < 1e-10);
    }

    #[test]
    fn zero_attention_blocks_equal_plain_stack() {
        let mut plain = tiny(3, Arch::Mhp);
        plain.n_layers = 2;
        let mut hybrid = tiny(3, Arch::MhpE);
        hybrid.n_layers = 2;
        hybrid.attn_blocks = 0;
        let a = Mhp::new(plain, 13).unwrap();
        let b = Mhp::new(hybrid, 13).unwrap();
        let s = seq(&[0.4, 1.1, 1.3, 2.8, 3.0], &[0, 1, 2, 0, 1]);
        assert_eq!(a.encode_sequence(&s).unwrap(), b.encode_sequence(&s).unwrap());
    }

    #[test]
    fn hybrid_shapes() {
        let model = Mhp::new(tiny(3, Arch::MhpE), 1).unwrap();
        for len in [1, 5, 64] {
            let times: Vec<f64> = (0..len).map(|i| 0.5 + i as f64 * 0.3).collect();
            let types: Vec<usize> = (0..len).map(|i| i % 3).collect();
            let h = model.encode_sequence(&seq(&times, &types)).unwrap();
            assert_eq!(h.shape(), &[len, 8]);
        }
    }

    #[test]
    fn hybrid_has_no_positional_parameters() {
        let model = Mhp::new(MhpConfig::hybrid(5), 0).unwrap();
        for (_, p) in model.store().iter() {
            let name = p.name.to_lowercase();
            assert!(!name.contains("pos") && !name.contains("temporal"), "{name}");
        }
    }

    fn gradcheck(arch: Arch) {
        let mut c = tiny(2, arch);
        if arch == Arch::MhpE {
            c.attn_heads = 1;
        }
        let mut model = Mhp::new(c, 21).unwrap();
        let s = seq(&[0.3, 0.8, 1.9, 2.2, 3.6], &[0, 1, 1, 0, 1]);
        let integ = Integrator::MonteCarlo { samples: 8, seed: 2 };
        let g = Graph::new();
        let l = model.forward(&g, &Batch::single(&s), integ).unwrap();
        let grads = g.backward(l.total).unwrap();
        let ids: Vec<ParamId> = model.store().iter().map(|(id, _)| id).collect();
        for id in ids {
            let analytic = grads
                .param_grad(id)
                .unwrap_or_else(|| Tensor::zeros(model.store().value(id).shape().to_vec()));
            let value = model.store().value(id).clone();
            let numeric = numeric_grad(&value, 1e-5, |p| {
                model.store_mut().set_value(id, p.clone()).unwrap();
                let v = model.losses(&s, integ).unwrap().2;
                model.store_mut().set_value(id, value.clone()).unwrap();
                v
            });
            let err = rel_err(&analytic, &numeric, 1e-6);
            assert!(err < 1e-4, "{arch} {}: {err:e}", model.store().get(id).name);
        }
    }

    #[test]
    fn gradients_match_finite_differences_mhp() {
        gradcheck(Arch::Mhp);
    }

    #[test]
    fn gradients_match_finite_differences_hybrid() {
        gradcheck(Arch::MhpE);
    }

    #[test]
    fn config_validation() {
        let mut c = MhpConfig::hybrid(2);
        c.attn_heads = 3;
        assert!(matches!(Mhp::new(c, 0), Err(Error::Config(_))));
        let mut c = MhpConfig::new(2);
        c.d_model = 0;
        assert!(Mhp::new(c, 0).is_err());
        assert_eq!("mhp-e".parse::<Arch>().unwrap(), Arch::MhpE);
        assert!("mamba".parse::<Arch>().is_err());
    }
}
