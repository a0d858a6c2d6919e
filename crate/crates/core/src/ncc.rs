//! Neural Causation Coefficient.
//!
//! The NCC embeds every observation `(x_i, y_i)` of a pair with a small
//! rectifier MLP, mean-pools the embeddings over the sample, and classifies
//! the pooled vector with a second MLP. Its output is the probability that
//! `X` causes `Y`. Mean pooling makes the score invariant to sample order.

use std::collections::HashSet;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::causepairs::{standardize_pair, Direction, PairError, SamplePairSet};
use crate::nn::checkpoint::{self, CheckpointError};
use crate::nn::{bce_with_logit, relu, sigmoid, Adam, AdamConfig, Dense, ParamRef, Parameterized};
use crate::rng;

pub const NCC_MODEL_VERSION: u32 = 1;
pub const DEFAULT_HIDDEN: usize = 100;
const CHECKPOINT_KIND: &str = "ncc";

#[derive(Debug, Error)]
pub enum NccError {
    #[error("model dimensions do not chain: {0}")]
    DimensionMismatch(String),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("pair {0} has no direction label")]
    UnlabeledPair(String),
    #[error("no pairs to evaluate")]
    EmptyInput,
    #[error("total pair weight is zero")]
    ZeroWeight,
    #[error("invalid NCC training config: {0}")]
    InvalidConfig(String),
    #[error("unsupported NCC model version {0}")]
    VersionUnsupported(u32),
    #[error(transparent)]
    Pair(#[from] PairError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Parameters of the set classifier.
///
/// `embed` maps each observation `2 -> h -> h`; `classifier` maps the pooled
/// embedding `h -> h -> h -> 1`. Every layer but the last is followed by a
/// rectifier.
#[derive(Debug, Clone, PartialEq)]
pub struct NccModel {
    pub embed: Vec<Dense>,
    pub classifier: Vec<Dense>,
    pub version: u32,
}

/// Probability that `X` causes `Y` for one pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NccScore {
    pub pair_id: String,
    pub p_xy: f64,
}

impl NccModel {
    /// He-initialised model with a zero output layer, so a fresh model
    /// predicts exactly 0.5 everywhere.
    pub fn new<R: Rng + ?Sized>(hidden: usize, rng: &mut R) -> Self {
        NccModel {
            embed: vec![Dense::he(2, hidden, rng), Dense::he(hidden, hidden, rng)],
            classifier: vec![
                Dense::he(hidden, hidden, rng),
                Dense::he(hidden, hidden, rng),
                Dense::zeros(hidden, 1),
            ],
            version: NCC_MODEL_VERSION,
        }
    }

    pub fn zeros(hidden: usize) -> Self {
        NccModel {
            embed: vec![Dense::zeros(2, hidden), Dense::zeros(hidden, hidden)],
            classifier: vec![
                Dense::zeros(hidden, hidden),
                Dense::zeros(hidden, hidden),
                Dense::zeros(hidden, 1),
            ],
            version: NCC_MODEL_VERSION,
        }
    }

    pub fn hidden(&self) -> usize {
        self.embed[0].output_dim()
    }

    fn zeros_like(&self) -> Self {
        NccModel::zeros(self.hidden())
    }

    pub fn check_dims(&self) -> Result<(), NccError> {
        if self.embed.len() != 2 || self.classifier.len() != 3 {
            return Err(NccError::DimensionMismatch(format!(
                "expected 2 embedding and 3 classifier layers, found {} and {}",
                self.embed.len(),
                self.classifier.len()
            )));
        }
        let mut width = 2;
        for (i, layer) in self.embed.iter().chain(&self.classifier).enumerate() {
            if layer.input_dim() != width || layer.bias.len() != layer.output_dim() {
                return Err(NccError::DimensionMismatch(format!(
                    "layer {i} expects input {} but receives {width}",
                    layer.input_dim()
                )));
            }
            width = layer.output_dim();
        }
        if width != 1 {
            return Err(NccError::DimensionMismatch(format!(
                "output width {width}, expected 1"
            )));
        }
        Ok(())
    }

    fn embed_pool(&self, x: ArrayView2<'_, f64>) -> Array1<f64> {
        let mut h = self.embed[0].forward(x);
        h.mapv_inplace(relu);
        let mut h = self.embed[1].forward(h.view());
        h.mapv_inplace(relu);
        h.mean_axis(Axis(0)).expect("non-empty sample")
    }

    fn classify(&self, pooled: Array1<f64>) -> f64 {
        let mut c = pooled;
        for layer in &self.classifier[..2] {
            c = layer.forward_vec(c.view()).mapv(relu);
        }
        self.classifier[2].forward_vec(c.view())[0]
    }

    /// Pre-sigmoid output for a sample given as an `n x 2` matrix.
    pub fn logit(&self, x: ArrayView2<'_, f64>) -> Result<f64, NccError> {
        self.check_dims()?;
        if x.ncols() != 2 || x.nrows() < 2 {
            return Err(NccError::DimensionMismatch(format!(
                "sample must be n x 2 with n >= 2, got {} x {}",
                x.nrows(),
                x.ncols()
            )));
        }
        Ok(self.classify(self.embed_pool(x)))
    }

    /// Loss and parameter gradient for one labelled pair, without dropout.
    pub fn loss_gradient(&self, p: &SamplePairSet) -> Result<(f64, NccModel), NccError> {
        let target = p
            .direction
            .target()
            .ok_or_else(|| NccError::UnlabeledPair(p.id.clone()))?;
        self.check_dims()?;
        let mut grad = self.zeros_like();
        let loss = self.backprop(&pair_matrix(p), target, None, 0.0, &mut grad);
        Ok((loss, grad))
    }

    /// Forward and backward pass; gradients are accumulated into `grad`.
    fn backprop(
        &self,
        x: &Array2<f64>,
        target: f64,
        mut dropout: Option<&mut dyn rand::RngCore>,
        dropout_rate: f64,
        grad: &mut NccModel,
    ) -> f64 {
        let n = x.nrows() as f64;
        let z1 = self.embed[0].forward(x.view());
        let h1 = z1.mapv(relu);
        let z2 = self.embed[1].forward(h1.view());
        let h2 = z2.mapv(relu);
        let pooled = h2.mean_axis(Axis(0)).expect("non-empty sample");

        let mut acts = vec![pooled];
        let mut masks = Vec::with_capacity(2);
        for layer in &self.classifier[..2] {
            let z = layer.forward_vec(acts.last().expect("input").view());
            let mut a = z.mapv(relu);
            let keep = 1.0 - dropout_rate;
            let mask: Array1<f64> = match dropout.as_deref_mut() {
                Some(r) if dropout_rate > 0.0 => {
                    Array1::from_shape_fn(a.len(), |_| {
                        if r.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                }
                _ => Array1::ones(a.len()),
            };
            a *= &mask;
            masks.push((z, mask));
            acts.push(a);
        }
        let logit = self.classifier[2].forward_vec(acts[2].view())[0];
        let loss = bce_with_logit(logit, target);

        let dlogit = Array1::from_elem(1, sigmoid(logit) - target);
        let mut d = self.classifier[2].backward_vec(acts[2].view(), dlogit.view(), &mut grad.classifier[2]);
        for i in (0..2).rev() {
            let (z, mask) = &masks[i];
            d = &d * mask;
            d.zip_mut_with(z, |g, zv| {
                if *zv <= 0.0 {
                    *g = 0.0
                }
            });
            d = self.classifier[i].backward_vec(acts[i].view(), d.view(), &mut grad.classifier[i]);
        }
        // Mean pooling spreads the pooled gradient evenly over the samples.
        let mut dh2 = Array2::from_shape_fn(h2.raw_dim(), |(_, j)| d[j] / n);
        dh2.zip_mut_with(&z2, |g, zv| {
            if *zv <= 0.0 {
                *g = 0.0
            }
        });
        let mut dh1 = self.embed[1].backward(h1.view(), dh2.view(), &mut grad.embed[1]);
        dh1.zip_mut_with(&z1, |g, zv| {
            if *zv <= 0.0 {
                *g = 0.0
            }
        });
        let _ = self.embed[0].backward(x.view(), dh1.view(), &mut grad.embed[0]);
        loss
    }
}

impl Parameterized for NccModel {
    fn params(&self) -> Vec<ParamRef<'_>> {
        let mut out = Vec::new();
        let named = self
            .embed
            .iter()
            .enumerate()
            .map(|(i, l)| (format!("embed.{i}"), l))
            .chain(
                self.classifier
                    .iter()
                    .enumerate()
                    .map(|(i, l)| (format!("classifier.{i}"), l)),
            );
        for (name, layer) in named {
            out.push(ParamRef {
                name: format!("{name}.weight"),
                shape: layer.weight.shape().to_vec(),
                data: layer.weight.as_slice().expect("standard layout"),
            });
            out.push(ParamRef {
                name: format!("{name}.bias"),
                shape: layer.bias.shape().to_vec(),
                data: layer.bias.as_slice().expect("standard layout"),
            });
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for layer in self.embed.iter_mut().chain(self.classifier.iter_mut()) {
            out.push(layer.weight.as_slice_mut().expect("standard layout"));
            out.push(layer.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }
}

/// `n x 2` matrix of a pair's observations.
pub fn pair_matrix(p: &SamplePairSet) -> Array2<f64> {
    Array2::from_shape_fn((p.len(), 2), |(i, j)| if j == 0 { p.xs[i] } else { p.ys[i] })
}

fn swapped_matrix(p: &SamplePairSet) -> Array2<f64> {
    Array2::from_shape_fn((p.len(), 2), |(i, j)| if j == 0 { p.ys[i] } else { p.xs[i] })
}

/// Probability that `X` causes `Y`; expects a standardized pair.
pub fn ncc_forward(m: &NccModel, p: &SamplePairSet) -> Result<f64, NccError> {
    Ok(sigmoid(m.logit(pair_matrix(p).view())?))
}

/// Antisymmetrised score `0.5 * (f(X, Y) + 1 - f(Y, X))`.
pub fn ncc_score_symmetric(m: &NccModel, p: &SamplePairSet) -> Result<NccScore, NccError> {
    let forward = sigmoid(m.logit(pair_matrix(p).view())?);
    let backward = sigmoid(m.logit(swapped_matrix(p).view())?);
    Ok(NccScore {
        pair_id: p.id.clone(),
        p_xy: 0.5 * (forward + (1.0 - backward)),
    })
}

/// Anything that can assign `P(X -> Y)` to a pair.
pub trait PairScorer {
    fn p_xy(&self, p: &SamplePairSet) -> Result<f64, NccError>;
}

impl PairScorer for NccModel {
    fn p_xy(&self, p: &SamplePairSet) -> Result<f64, NccError> {
        Ok(ncc_score_symmetric(self, p)?.p_xy)
    }
}

/// Standardize and score every pair.
pub fn score_pairs<S: PairScorer + ?Sized>(
    scorer: &S,
    pairs: &[SamplePairSet],
) -> Result<Vec<NccScore>, NccError> {
    pairs
        .iter()
        .map(|p| {
            let p = standardize_pair(p)?;
            Ok(NccScore {
                pair_id: p.id.clone(),
                p_xy: scorer.p_xy(&p)?,
            })
        })
        .collect()
}

/// Weight-averaged directional accuracy with threshold 0.5.
///
/// A pair counts as correct when `p_xy > 0.5` agrees with an `XtoY` label;
/// `p_xy == 0.5` is always incorrect.
pub fn weighted_accuracy(scores: &[NccScore], pairs: &[SamplePairSet]) -> Result<f64, NccError> {
    if pairs.is_empty() {
        return Err(NccError::EmptyInput);
    }
    let mut total = 0.0;
    let mut correct = 0.0;
    for (s, p) in scores.iter().zip(pairs) {
        let forward = match p.direction {
            Direction::XtoY => true,
            Direction::YtoX => false,
            Direction::Unlabeled => return Err(NccError::UnlabeledPair(p.id.clone())),
        };
        total += p.weight;
        let hit = if forward { s.p_xy > 0.5 } else { s.p_xy < 0.5 };
        if hit {
            correct += p.weight;
        }
    }
    if total <= 0.0 {
        return Err(NccError::ZeroWeight);
    }
    Ok(correct / total)
}

pub fn evaluate_weighted_accuracy<S: PairScorer + ?Sized>(
    scorer: &S,
    pairs: &[SamplePairSet],
) -> Result<f64, NccError> {
    if pairs.is_empty() {
        return Err(NccError::EmptyInput);
    }
    weighted_accuracy(&score_pairs(scorer, pairs)?, pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NccTrainConfig {
    pub epochs: usize,
    pub batch_pairs: usize,
    pub learning_rate: f64,
    pub rng_seed: u64,
    pub dropout_rate: f64,
    pub hidden: usize,
    pub holdout_fraction: f64,
}

impl Default for NccTrainConfig {
    fn default() -> Self {
        NccTrainConfig {
            epochs: 12,
            batch_pairs: 32,
            learning_rate: 1e-3,
            rng_seed: 0,
            dropout_rate: 0.0,
            hidden: DEFAULT_HIDDEN,
            holdout_fraction: 0.1,
        }
    }
}

impl NccTrainConfig {
    pub fn validate(&self) -> Result<(), NccError> {
        let bad = |m: &str| Err(NccError::InvalidConfig(m.to_string()));
        if self.epochs < 1 {
            return bad("epochs must be >= 1");
        }
        if self.batch_pairs < 1 {
            return bad("batch_pairs must be >= 1");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must be in [0, 1)");
        }
        if self.hidden < 1 {
            return bad("hidden must be >= 1");
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return bad("holdout_fraction must be in (0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean training loss over the epoch (`None` for epoch 0, before any step).
    pub train_loss: Option<f64>,
    pub heldout_loss: f64,
    pub heldout_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct NccTraining {
    pub model: NccModel,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
}

impl NccTraining {
    pub fn best(&self) -> &EpochStats {
        &self.history[self.best_epoch]
    }
}

/// Swap twins share a group so they land on the same side of the split.
fn group_key(id: &str) -> &str {
    id.strip_suffix("-swap").unwrap_or(id)
}

fn holdout_split(corpus: &[SamplePairSet], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut seen = HashSet::new();
    let keys: Vec<&str> = corpus
        .iter()
        .map(|p| group_key(&p.id))
        .filter(|k| seen.insert(*k))
        .collect();
    if keys.len() < 2 {
        log::warn!("corpus has a single pair group; held-out metrics use the training pairs");
        let all: Vec<usize> = (0..corpus.len()).collect();
        return (all.clone(), all);
    }
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.shuffle(&mut rng::seeded(rng::derive_seed(seed, "ncc-holdout")));
    let n_held = ((keys.len() as f64 * fraction).round() as usize).clamp(1, keys.len() - 1);
    let held: HashSet<&str> = order[..n_held].iter().map(|&i| keys[i]).collect();
    (0..corpus.len()).partition(|&i| !held.contains(group_key(&corpus[i].id)))
}

fn heldout_stats(m: &NccModel, corpus: &[SamplePairSet], idx: &[usize]) -> (f64, f64) {
    let mut loss = 0.0;
    let mut hits = 0usize;
    for &i in idx {
        let p = &corpus[i];
        let target = p.direction.target().expect("labels checked");
        let logit = m.classify(m.embed_pool(pair_matrix(p).view()));
        loss += bce_with_logit(logit, target);
        if (logit > 0.0) == (target > 0.5) && logit != 0.0 {
            hits += 1;
        }
    }
    let n = idx.len().max(1) as f64;
    (loss / n, hits as f64 / n)
}

/// Train an NCC on a labelled, standardized, direction-balanced corpus.
///
/// Minimises binary cross-entropy with Adam over mini-batches of
/// `batch_pairs` pairs. A seeded `holdout_fraction` of the corpus (swap
/// twins kept together) is held out, and the parameters of the epoch with
/// the best held-out accuracy are returned. Epoch 0 is the initial model.
pub fn train_ncc(corpus: &[SamplePairSet], cfg: &NccTrainConfig) -> Result<NccTraining, NccError> {
    train_ncc_observed(corpus, cfg, |_, _| {})
}

/// [`train_ncc`] with a callback invoked after every epoch.
pub fn train_ncc_observed<F>(
    corpus: &[SamplePairSet],
    cfg: &NccTrainConfig,
    mut observe: F,
) -> Result<NccTraining, NccError>
where
    F: FnMut(&EpochStats, &NccModel),
{
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(NccError::EmptyCorpus);
    }
    if let Some(p) = corpus.iter().find(|p| p.direction == Direction::Unlabeled) {
        return Err(NccError::UnlabeledPair(p.id.clone()));
    }
    let (mut train, heldout) = holdout_split(corpus, cfg.holdout_fraction, cfg.rng_seed);
    let mut init_rng = rng::seeded(rng::derive_seed(cfg.rng_seed, "ncc-init"));
    let mut shuffle_rng = rng::seeded(rng::derive_seed(cfg.rng_seed, "ncc-shuffle"));
    let mut dropout_rng = rng::seeded(rng::derive_seed(cfg.rng_seed, "ncc-dropout"));

    let mut model = NccModel::new(cfg.hidden, &mut init_rng);
    let sizes: Vec<usize> = model.params().iter().map(|p| p.data.len()).collect();
    let mut adam = Adam::new(AdamConfig::with_learning_rate(cfg.learning_rate), &sizes);
    let mut grad = model.zeros_like();

    let (loss0, acc0) = heldout_stats(&model, corpus, &heldout);
    let mut history = vec![EpochStats {
        epoch: 0,
        train_loss: None,
        heldout_loss: loss0,
        heldout_accuracy: acc0,
    }];
    let mut best = (0usize, model.clone());

    for epoch in 1..=cfg.epochs {
        train.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in train.chunks(cfg.batch_pairs) {
            grad.zero();
            for &i in batch {
                let p = &corpus[i];
                let target = p.direction.target().expect("labels checked");
                epoch_loss += model.backprop(
                    &pair_matrix(p),
                    target,
                    Some(&mut dropout_rng),
                    cfg.dropout_rate,
                    &mut grad,
                );
            }
            let scale = 1.0 / batch.len() as f64;
            let g: Vec<Vec<f64>> = grad
                .params()
                .iter()
                .map(|t| t.data.iter().map(|v| v * scale).collect())
                .collect();
            adam.step(model.params_mut(), g.iter().map(Vec::as_slice).collect());
        }
        let (heldout_loss, heldout_accuracy) = heldout_stats(&model, corpus, &heldout);
        let stats = EpochStats {
            epoch,
            train_loss: Some(epoch_loss / train.len() as f64),
            heldout_loss,
            heldout_accuracy,
        };
        log::info!(
            "ncc epoch {epoch}: train_loss={:.4} heldout_loss={heldout_loss:.4} heldout_acc={heldout_accuracy:.4}",
            stats.train_loss.unwrap_or(f64::NAN)
        );
        let incumbent = &history[best.0];
        if heldout_accuracy > incumbent.heldout_accuracy
            || (heldout_accuracy == incumbent.heldout_accuracy
                && heldout_loss < incumbent.heldout_loss)
        {
            best = (epoch, model.clone());
        }
        observe(&stats, &model);
        history.push(stats);
    }
    Ok(NccTraining {
        model: best.1,
        history,
        best_epoch: best.0,
    })
}

pub fn save_ncc(m: &NccModel, path: impl AsRef<Path>) -> Result<(), NccError> {
    m.check_dims()?;
    let config = serde_json::json!({ "hidden": m.hidden(), "model_version": m.version });
    checkpoint::write(path, CHECKPOINT_KIND, config, &m.params())?;
    Ok(())
}

pub fn load_ncc(path: impl AsRef<Path>) -> Result<NccModel, NccError> {
    let path = path.as_ref();
    let ck = checkpoint::read(path, CHECKPOINT_KIND)?;
    let malformed = |reason: &str| {
        NccError::Checkpoint(CheckpointError::Malformed {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        })
    };
    let version = ck.manifest.config["model_version"]
        .as_u64()
        .ok_or_else(|| malformed("missing model_version"))? as u32;
    if version != NCC_MODEL_VERSION {
        return Err(NccError::VersionUnsupported(version));
    }
    let hidden = ck.manifest.config["hidden"]
        .as_u64()
        .ok_or_else(|| malformed("missing hidden width"))? as usize;
    let mut model = NccModel::zeros(hidden);
    let specs: Vec<(String, Vec<usize>)> = model
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.shape.clone()))
        .collect();
    for ((name, shape), dst) in specs.iter().zip(model.params_mut()) {
        let src = ck
            .tensor(name, shape)
            .ok_or_else(|| malformed(&format!("tensor {name} missing or misshapen")))?;
        dst.copy_from_slice(src);
    }
    Ok(model)
}
