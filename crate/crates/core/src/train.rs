//! Training loop, polyphone accuracy, and the multi-seed protocol.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{split_corpus, Sample};
use crate::error::{G2pError, Result};
use crate::model::{G2pModel, ModelConfig};
use crate::optim::{AdamConfig, AdamState};
use crate::params::Component;
use crate::reinforcer::ReinforcerConfig;
use crate::sequence::LmConfig;
use crate::tensor::Scalar;
use crate::vocab::{PolyphoneDictionary, Vocabulary};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl FromStr for Precision {
    type Err = G2pError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(G2pError::Config(format!("unknown precision `{other}` (use f32 or f64)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub label_smoothing: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Components whose parameters stay fixed.
    pub frozen: Vec<Component>,
    /// Validation interval in epochs; 0 disables validation.
    pub eval_every: usize,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 32,
            label_smoothing: 0.1,
            epochs: 10,
            seed: 0,
            frozen: Vec::new(),
            eval_every: 1,
            precision: Precision::F64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(G2pError::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(G2pError::Config(format!(
                "label smoothing must be in [0, 1), got {}",
                self.label_smoothing
            )));
        }
        if self.batch_size == 0 {
            return Err(G2pError::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// Architecture choice independent of the vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub embed_dim: usize,
    pub reinforcer: ReinforcerConfig,
    pub lm: LmConfig,
}

impl ModelSpec {
    pub fn build<S: Scalar>(&self, vocab: &Vocabulary, dict: &PolyphoneDictionary, seed: u64) -> Result<G2pModel<S>> {
        G2pModel::new(self.embed_dim, self.reinforcer, self.lm, vocab.clone(), dict.clone(), seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub param_count: usize,
    /// Loss over the training split before any update.
    pub initial_train_loss: f64,
    /// Mean loss per epoch, weighted by polyphone positions.
    pub epoch_losses: Vec<f64>,
    /// Validation accuracy (restricted) after each evaluation, as `(epoch, %)`;
    /// epoch 0 is the initial model.
    pub val_history: Vec<(usize, f64)>,
    /// Epoch whose parameters were kept; 0 means the initialization.
    pub best_epoch: usize,
    pub val_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub test_accuracy_unrestricted: Option<f64>,
    pub wall_time_secs: f64,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Percentage of polyphone positions predicted correctly. Sentences without
/// polyphones contribute nothing; an empty total is an error.
pub fn evaluate<S: Scalar>(model: &G2pModel<S>, samples: &[Sample], restrict: bool) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for s in samples.iter().filter(|s| !s.polyphone_positions.is_empty()) {
        let pred = model.predict_sample(s, restrict)?;
        correct += pred.iter().zip(s.polyphone_targets()).filter(|(p, g)| **p == *g).count();
        total += pred.len();
    }
    if total == 0 {
        return Err(G2pError::Data("accuracy is undefined without polyphone positions".into()));
    }
    Ok(100.0 * correct as f64 / total as f64)
}

/// Mean smoothed loss over all polyphone positions of `samples`.
pub fn dataset_loss<S: Scalar>(model: &G2pModel<S>, samples: &[Sample], epsilon: f64) -> Result<f64> {
    let mut weighted = 0.0;
    let mut total = 0usize;
    for chunk in samples.chunks(64) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let k: usize = chunk.iter().map(|s| s.polyphone_positions.len()).sum();
        let mut g = Graph::new();
        if let Some(loss) = model.batch_loss(&mut g, &refs, epsilon)? {
            weighted += g.value(loss).data()[0].to_f64() * k as f64;
            total += k;
        }
    }
    Ok(if total == 0 { 0.0 } else { weighted / total as f64 })
}

/// Trains in place with seeded shuffling and Adam, keeping the parameters
/// with the best validation accuracy when `val` is non-empty and
/// validation is enabled, otherwise the final parameters.
pub fn train<S: Scalar>(
    model: &mut G2pModel<S>,
    train_set: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
) -> Result<RunReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(G2pError::Data("training split is empty".into()));
    }
    let start = Instant::now();
    model.store.freeze(&cfg.frozen);
    let mut adam = AdamState::new(&model.store, cfg.adam());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let validate = cfg.eval_every > 0 && val.iter().any(|s| !s.polyphone_positions.is_empty());

    let initial_train_loss = dataset_loss(model, train_set, cfg.label_smoothing)?;
    let mut val_history = Vec::new();
    let mut best: Option<(f64, usize, crate::params::ParamStore<S>)> = None;
    if validate {
        let acc = evaluate(model, val, true)?;
        val_history.push((0, acc));
        best = Some((acc, 0, model.store.clone()));
    }

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut weighted = 0.0;
        let mut positions = 0usize;
        for batch_idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = batch_idx.iter().map(|&i| &train_set[i]).collect();
            let mut g = Graph::new();
            let Some(loss) = model.batch_loss(&mut g, &batch, cfg.label_smoothing)? else {
                continue;
            };
            let value = g.value(loss).data()[0].to_f64();
            if !value.is_finite() {
                let culprit = g
                    .first_non_finite()
                    .map(|(i, op)| format!("node {i} ({op})"))
                    .unwrap_or_else(|| "the loss".into());
                return Err(G2pError::Numeric(format!(
                    "non-finite loss at epoch {epoch}; first non-finite tensor is {culprit}"
                )));
            }
            let k: usize = batch.iter().map(|s| s.polyphone_positions.len()).sum();
            weighted += value * k as f64;
            positions += k;
            let grads = g.backward(loss)?;
            model.store.zero_grad();
            grads.accumulate_into(&mut model.store);
            adam.step(&mut model.store);
        }
        let epoch_loss = if positions == 0 { 0.0 } else { weighted / positions as f64 };
        epoch_losses.push(epoch_loss);
        debug!("epoch {epoch}: loss {epoch_loss:.5}");

        if validate && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs) {
            let acc = evaluate(model, val, true)?;
            val_history.push((epoch, acc));
            info!("epoch {epoch}: loss {epoch_loss:.5}, val accuracy {acc:.2}%");
            if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                best = Some((acc, epoch, model.store.clone()));
            }
        }
    }
    model.store.zero_grad();

    let (best_epoch, val_accuracy) = match best {
        Some((acc, epoch, store)) => {
            model.store = store;
            model.store.zero_grad();
            (epoch, Some(acc))
        }
        None => (cfg.epochs, None),
    };
    Ok(RunReport {
        seed: cfg.seed,
        model: model.config,
        train: cfg.clone(),
        param_count: model.num_params(),
        initial_train_loss,
        epoch_losses,
        val_history,
        best_epoch,
        val_accuracy,
        test_accuracy: None,
        test_accuracy_unrestricted: None,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

/// Splits 8:1:1 with `seed`, trains a model initialised from `seed`, and
/// fills in test accuracy both with and without candidate restriction.
pub fn run_split<S: Scalar>(
    samples: &[Sample],
    vocab: &Vocabulary,
    dict: &PolyphoneDictionary,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(G2pModel<S>, RunReport)> {
    let split = split_corpus(samples, (8.0, 1.0, 1.0), seed)?;
    let mut model = spec.build::<S>(vocab, dict, seed)?;
    let cfg = TrainConfig { seed, ..cfg.clone() };
    let mut report = train(&mut model, &split.train, &split.val, &cfg)?;
    report.test_accuracy = Some(evaluate(&model, &split.test, true)?);
    report.test_accuracy_unrestricted = Some(evaluate(&model, &split.test, false)?);
    Ok((model, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiSeedReport {
    pub seeds: Vec<u64>,
    pub runs: Vec<RunReport>,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation.
    pub std: f64,
    pub param_count: usize,
    pub cell: String,
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Parameter count as `1.9M`, `10M`, `45.2K`, or a plain number.
pub fn format_param_count(n: usize) -> String {
    let x = n as f64;
    if x >= 10e6 {
        format!("{:.0}M", x / 1e6)
    } else if x >= 1e6 {
        format!("{:.1}M", x / 1e6)
    } else if x >= 1e3 {
        format!("{:.1}K", x / 1e3)
    } else {
        n.to_string()
    }
}

/// Table cell such as `93.72±0.91 (1.9M)`.
pub fn format_cell(mean: f64, std: f64, params: usize) -> String {
    format!("{mean:.2}±{std:.2} ({})", format_param_count(params))
}

/// Re-splits, trains, and tests once per seed.
pub fn multi_seed_run<S: Scalar>(
    samples: &[Sample],
    vocab: &Vocabulary,
    dict: &PolyphoneDictionary,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<MultiSeedReport> {
    if seeds.len() < 2 {
        return Err(G2pError::Config("the multi-seed protocol needs at least two seeds".into()));
    }
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let (_, report) = run_split::<S>(samples, vocab, dict, spec, cfg, seed)?;
        info!("seed {seed}: test accuracy {:.2}%", report.test_accuracy.unwrap_or(f64::NAN));
        runs.push(report);
    }
    let accuracies: Vec<f64> = runs.iter().map(|r| r.test_accuracy.expect("set by run_split")).collect();
    let (mean, std) = mean_std(&accuracies);
    let param_count = runs[0].param_count;
    Ok(MultiSeedReport {
        seeds: seeds.to_vec(),
        cell: format_cell(mean, std, param_count),
        runs,
        accuracies,
        mean,
        std,
        param_count,
    })
}

/// Model-by-layer-count accuracy grid.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AccuracyTable {
    pub layers: Vec<usize>,
    /// Row label and one cell per entry of `layers`.
    pub rows: Vec<(String, Vec<String>)>,
}

impl AccuracyTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model");
        for l in &self.layers {
            out.push_str(&format!(",layers={l}"));
        }
        out.push('\n');
        for (name, cells) in &self.rows {
            out.push_str(name);
            for c in cells {
                out.push(',');
                out.push_str(c);
            }
            out.push('\n');
        }
        out
    }
}
