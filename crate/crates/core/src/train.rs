//! Training loop, evaluation metrics and the homogeneous Poisson baseline.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{Dataset, EventSequence, Split};
use crate::error::{Error, Result};
use crate::model::{Arch, Integrator, Mhp, MhpConfig, SequenceStats};
use crate::tensor::{Graph, ParamStore, Tensor};

pub const METRICS_HEADER: &str = "epoch,split,ll_per_event,accuracy,rmse,seconds";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub arch: Arch,
    /// Model hyper-parameters; `num_types` and `arch` are filled in from the
    /// data and from `arch`.
    pub model: MhpConfig,
    /// Mamba blocks used when `arch` is the hybrid.
    pub hybrid_mamba_layers: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Upper bound on epochs.
    pub epochs: usize,
    /// Stop after this many epochs without a better dev log-likelihood.
    pub patience: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    /// Use only the first `n` training sequences.
    pub train_limit: Option<usize>,
    /// Divide times by the mean training gap.
    pub normalize_time: bool,
    /// Directory holding `train.jsonl`, `dev.jsonl` and `test.jsonl`.
    pub data: PathBuf,
    /// Output directory for checkpoint and metrics.
    pub out: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arch: Arch::Mhp,
            model: MhpConfig::default(),
            hybrid_mamba_layers: 2,
            learning_rate: 1e-4,
            batch_size: 4,
            epochs: 50,
            patience: 10,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 5.0,
            seed: 0,
            train_limit: None,
            normalize_time: false,
            data: PathBuf::from("data"),
            out: PathBuf::from("run"),
        }
    }
}

impl TrainConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Model configuration for data with `num_types` event types.
    pub fn model_config(&self, num_types: usize) -> MhpConfig {
        let mut c = self.model.clone();
        c.num_types = num_types;
        c.arch = self.arch;
        if self.arch == Arch::MhpE {
            c.n_layers = self.hybrid_mamba_layers;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape().to_vec()))
                .collect()
        };
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update from the gradients held in `store`.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad.data();
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                *w -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if max_norm > 0.0 && norm > max_norm {
        let factor = max_norm / norm;
        for p in store.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= factor);
        }
    }
    norm
}

/// Dataset-level metrics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// `Σ LL / Σ (n − 1)`.
    pub ll_per_event: f64,
    /// Percentage of correctly predicted next types.
    pub accuracy: f64,
    pub rmse: f64,
    pub sequences: usize,
    pub targets: usize,
}

impl Metrics {
    pub fn from_stats(stats: &SequenceStats, sequences: usize) -> Self {
        let n = stats.targets.max(1) as f64;
        Metrics {
            ll_per_event: stats.log_likelihood / n,
            accuracy: 100.0 * stats.correct as f64 / n,
            rmse: (stats.squared_error / n).sqrt(),
            sequences,
            targets: stats.targets,
        }
    }
}

/// Evaluates every sequence with at least two events. Sequences run in
/// parallel; totals are reduced in dataset order.
pub fn evaluate(model: &Mhp, dataset: &Dataset, integrator: Integrator) -> Result<Metrics> {
    if dataset.num_types != model.config().num_types {
        return Err(Error::TypeCountMismatch {
            model: model.config().num_types,
            data: dataset.num_types,
        });
    }
    let per_seq = dataset
        .sequences
        .par_iter()
        .enumerate()
        .filter(|(_, s)| s.len() >= 2)
        .map(|(i, s)| model.evaluate_sequence(s, integrator, i))
        .collect::<Result<Vec<_>>>()?;
    let mut total = SequenceStats::default();
    for s in &per_seq {
        total.merge(s);
    }
    Ok(Metrics::from_stats(&total, per_seq.len()))
}

/// Marked homogeneous Poisson process: a pooled rate and type frequencies
/// with add-one smoothing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoissonBaseline {
    pub rate: f64,
    pub type_probs: Vec<f64>,
}

impl PoissonBaseline {
    /// Rate `Σ (n − 1) / Σ (t_n − t_1)`, types counted over events `2..n`.
    pub fn fit(dataset: &Dataset) -> Result<Self> {
        let mut events = 0usize;
        let mut span = 0.0;
        let mut counts = vec![1.0; dataset.num_types];
        for s in &dataset.sequences {
            let t = s.times();
            events += s.len() - 1;
            span += t[t.len() - 1] - t[0];
            for &k in &s.types()[1..] {
                counts[k] += 1.0;
            }
        }
        if events == 0 || !(span > 0.0) {
            return Err(Error::Config("Poisson fit needs sequences with at least two events".into()));
        }
        let total: f64 = counts.iter().sum();
        Ok(PoissonBaseline {
            rate: events as f64 / span,
            type_probs: counts.iter().map(|c| c / total).collect(),
        })
    }

    pub fn log_likelihood(&self, seq: &EventSequence) -> f64 {
        let t = seq.times();
        let events: f64 = seq.types()[1..]
            .iter()
            .map(|&k| (self.rate * self.type_probs[k]).ln())
            .sum();
        events - self.rate * (t[t.len() - 1] - t[0])
    }

    pub fn ll_per_event(&self, dataset: &Dataset) -> f64 {
        let (ll, n) = dataset
            .sequences
            .iter()
            .filter(|s| s.len() >= 2)
            .fold((0.0, 0usize), |(ll, n), s| (ll + self.log_likelihood(s), n + s.len() - 1));
        ll / n.max(1) as f64
    }

    /// Accuracy (%) of always predicting the most frequent type.
    pub fn majority_accuracy(&self, dataset: &Dataset) -> f64 {
        let best = crate::model::argmax(&self.type_probs);
        let (hits, n) = dataset
            .sequences
            .iter()
            .flat_map(|s| s.types().get(1..).unwrap_or(&[]))
            .fold((0usize, 0usize), |(h, n), &k| (h + usize::from(k == best), n + 1));
        100.0 * hits as f64 / n.max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: Metrics,
    pub dev: Metrics,
    pub mean_loss: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best dev log-likelihood.
    pub model: Mhp,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub seconds: f64,
}

/// Deterministic 64-bit mix for deriving per-step seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn step_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    mix(mix(seed ^ mix(epoch as u64)) ^ batch as u64)
}

/// Trains with Adam on `train`, selecting the epoch by dev log-likelihood.
/// `on_epoch` sees every epoch as it finishes.
pub fn fit(
    config: &TrainConfig,
    train: &Dataset,
    dev: &Dataset,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.num_types != dev.num_types {
        return Err(Error::TypeCountMismatch {
            model: train.num_types,
            data: dev.num_types,
        });
    }
    let usable: Vec<usize> = (0..train.len()).filter(|&i| train.sequences[i].len() >= 2).collect();
    if usable.is_empty() {
        return Err(Error::Config("no training sequence has two or more events".into()));
    }
    let mut model_cfg = config.model_config(train.num_types);
    if config.normalize_time {
        model_cfg.time_scale = train.mean_gap().unwrap_or(1.0);
    }
    let mut model = Mhp::new(model_cfg, config.seed)?;
    let mut adam = Adam::new(
        model.store(),
        config.learning_rate,
        config.adam_beta1,
        config.adam_beta2,
        config.adam_eps,
    );
    let mc = model.config().mc_samples;
    let train_eval = Integrator::MonteCarlo {
        samples: mc,
        seed: mix(config.seed ^ 0x7EA1),
    };
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut history = Vec::new();
    let started = Instant::now();
    for epoch in 1..=config.epochs {
        let epoch_start = Instant::now();
        let mut order = usable.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(config.seed) ^ epoch as u64));
        let batches = train.batches_in_order(&order, config.batch_size);
        let mut loss_sum = 0.0;
        for (bi, batch) in batches.iter().enumerate() {
            let g = Graph::new();
            let integrator = Integrator::MonteCarlo {
                samples: mc,
                seed: step_seed(config.seed, epoch, bi),
            };
            let losses = model.forward(&g, batch, integrator)?;
            let loss = losses.total.scale(1.0 / batch.size as f64);
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::NumericAbort { epoch, batch: bi });
            }
            let grads = g.backward(loss)?;
            let store = model.store_mut();
            store.zero_grad();
            store.accumulate(&grads);
            if !store.grad_norm().is_finite() {
                return Err(Error::NumericAbort { epoch, batch: bi });
            }
            clip_gradients(store, config.clip_norm);
            adam.step(store);
            loss_sum += value;
        }
        let train_metrics = evaluate(&model, train, train_eval)?;
        let dev_metrics = evaluate(&model, dev, model.quadrature())?;
        if !dev_metrics.ll_per_event.is_finite() {
            return Err(Error::NumericAbort { epoch, batch: batches.len() });
        }
        let record = EpochRecord {
            epoch,
            train: train_metrics,
            dev: dev_metrics,
            mean_loss: loss_sum / batches.len() as f64,
            seconds: epoch_start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} train ll {:.4} dev ll {:.4} dev acc {:.2}%",
            record.mean_loss,
            record.train.ll_per_event,
            record.dev.ll_per_event,
            record.dev.accuracy
        );
        on_epoch(&record);
        history.push(record);
        let improved = best.as_ref().is_none_or(|(ll, _, _)| dev_metrics.ll_per_event > *ll);
        if improved {
            best = Some((dev_metrics.ll_per_event, epoch, model.store().clone()));
        } else if best.as_ref().is_some_and(|(_, e, _)| epoch - e >= config.patience) {
            log::info!("early stop after epoch {epoch}");
            break;
        }
    }
    let best_epoch = match best {
        Some((_, e, store)) => {
            *model.store_mut() = store;
            e
        }
        None => 0,
    };
    Ok(TrainOutcome {
        model,
        best_epoch,
        history,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// One CSV row. The `seconds` column is left empty so that runs with the
/// same seed produce identical files; timings go to the JSON summary.
pub fn metrics_row(epoch: usize, split: Split, m: &Metrics) -> String {
    format!("{epoch},{split},{:.10},{:.6},{:.10},", m.ll_per_event, m.accuracy, m.rmse)
}

pub fn load_split(dir: &Path, split: Split) -> Result<Dataset> {
    Ok(Dataset::load_jsonl(dir.join(split.file_name()))?.with_split(split))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Summary {
    pub arch: Arch,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub dev: Metrics,
    pub test: Metrics,
    pub poisson_test_ll_per_event: f64,
    pub majority_accuracy: f64,
    pub epoch_seconds: Vec<f64>,
    pub total_seconds: f64,
}

/// Reads the splits from `config.data`, trains, and writes
/// `checkpoint.json`, `metrics.csv`, `summary.json` and `config.json` into
/// `config.out`.
pub fn run_training(config: &TrainConfig) -> Result<Summary> {
    let mut train = load_split(&config.data, Split::Train)?;
    let dev = load_split(&config.data, Split::Dev)?;
    let test = load_split(&config.data, Split::Test)?;
    if let Some(n) = config.train_limit {
        train.sequences.truncate(n);
    }
    let io = |path: PathBuf| move |source| Error::Io { path, source };
    fs::create_dir_all(&config.out).map_err(io(config.out.clone()))?;
    let csv_path = config.out.join("metrics.csv");
    let mut csv = fs::File::create(&csv_path).map_err(io(csv_path.clone()))?;
    writeln!(csv, "{METRICS_HEADER}").map_err(io(csv_path.clone()))?;
    let mut write_err = None;
    let outcome = fit(config, &train, &dev, |r| {
        for (split, m) in [(Split::Train, &r.train), (Split::Dev, &r.dev)] {
            if let Err(e) = writeln!(csv, "{}", metrics_row(r.epoch, split, m)) {
                write_err.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(io(csv_path)(e));
    }
    let model = &outcome.model;
    let test_metrics = evaluate(model, &test, model.quadrature())?;
    writeln!(csv, "{}", metrics_row(outcome.best_epoch, Split::Test, &test_metrics)).map_err(io(csv_path))?;
    checkpoint::save(model, config.out.join("checkpoint.json"))?;
    let cfg_path = config.out.join("config.json");
    let cfg_text = serde_json::to_string_pretty(config).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(&cfg_path, cfg_text).map_err(io(cfg_path))?;
    let baseline = PoissonBaseline::fit(&train)?;
    let best_dev = outcome
        .history
        .iter()
        .find(|r| r.epoch == outcome.best_epoch)
        .map(|r| r.dev)
        .unwrap_or_default();
    let summary = Summary {
        arch: config.arch,
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.history.len(),
        dev: best_dev,
        test: test_metrics,
        poisson_test_ll_per_event: baseline.ll_per_event(&test),
        majority_accuracy: baseline.majority_accuracy(&test),
        epoch_seconds: outcome.history.iter().map(|r| r.seconds).collect(),
        total_seconds: outcome.seconds,
    };
    let sum_path = config.out.join("summary.json");
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(&sum_path, text).map_err(io(sum_path))?;
    Ok(summary)
}
