use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::classifier::argmax;
use super::{ClassifierModel, ClassifierSpec, ImageDataset, ImagingError};
use crate::nn::{Adam, AdamConfig, Parameterized};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        ClassifierTrainConfig {
            epochs: 30,
            learning_rate: 1e-4,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl ClassifierTrainConfig {
    pub fn validate(&self) -> Result<(), ImagingError> {
        if self.batch_size == 0 {
            return Err(ImagingError::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(ImagingError::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Statistics after `epoch` passes over the training set; epoch 0 is the
/// freshly initialised model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierEpoch {
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct ClassifierTraining {
    /// Model of the epoch with the best validation accuracy.
    pub model: ClassifierModel,
    pub history: Vec<ClassifierEpoch>,
    pub best_epoch: usize,
}

impl ClassifierTraining {
    pub fn best(&self) -> &ClassifierEpoch {
        &self.history[self.best_epoch]
    }
}

/// Mean cross-entropy and accuracy of `model` over `ds`.
pub fn evaluate_classifier(model: &ClassifierModel, ds: &ImageDataset) -> Result<(f64, f64), ImagingError> {
    if ds.is_empty() {
        return Ok((f64::NAN, 0.0));
    }
    let (mut loss, mut correct) = (0.0, 0usize);
    for im in &ds.images {
        let logits = model.logits(im.pixels.view())?;
        let probs = crate::nn::softmax(logits.as_slice().expect("contiguous"));
        loss -= probs[im.label].max(f64::MIN_POSITIVE).ln();
        if argmax(&probs) == im.label {
            correct += 1;
        }
    }
    let n = ds.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Mini-batch cross-entropy training with Adam. Selection keeps the epoch
/// with the highest validation accuracy; ties go to the lower validation
/// loss, then to the earlier epoch.
pub fn train_classifier(
    spec: ClassifierSpec,
    train: &ImageDataset,
    val: &ImageDataset,
    cfg: &ClassifierTrainConfig,
) -> Result<ClassifierTraining, ImagingError> {
    cfg.validate()?;
    if train.class_names != val.class_names {
        return Err(ImagingError::ClassMismatch(
            train.class_names.clone(),
            val.class_names.clone(),
        ));
    }
    if train.is_empty() {
        return Err(ImagingError::InvalidDataset("training set is empty".into()));
    }
    if spec.num_classes != train.num_classes() {
        return Err(ImagingError::InvalidConfig(format!(
            "spec has {} classes, dataset has {}",
            spec.num_classes,
            train.num_classes()
        )));
    }
    let mut init_rng = rng::seeded(rng::derive_seed(cfg.seed, "classifier-init"));
    let mut shuffle_rng = rng::seeded(rng::derive_seed(cfg.seed, "classifier-shuffle"));
    let mut model = ClassifierModel::new(spec.clone(), &mut init_rng)?;
    let sizes: Vec<usize> = model.params().iter().map(|p| p.data.len()).collect();
    let mut adam = Adam::new(AdamConfig::with_learning_rate(cfg.learning_rate), &sizes);

    let (val_loss, val_accuracy) = evaluate_classifier(&model, val)?;
    let mut history = vec![ClassifierEpoch {
        epoch: 0,
        train_loss: None,
        val_loss,
        val_accuracy,
    }];
    let mut best = model.clone();
    let mut best_epoch = 0;
    log::info!("classifier epoch 0: val_loss={val_loss:.4} val_acc={val_accuracy:.4}");

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut grad = ClassifierModel::zeros(spec);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grad.zero();
            for &i in batch {
                let im = &train.images[i];
                let (loss, _) = model.accumulate_gradient(im.pixels.view(), im.label, &mut grad)?;
                total += loss;
            }
            let scale = 1.0 / batch.len() as f64;
            let mut grads = grad.params_mut();
            for g in grads.iter_mut() {
                g.iter_mut().for_each(|v| *v *= scale);
            }
            let grads: Vec<&[f64]> = grads.into_iter().map(|g| &*g).collect();
            adam.step(model.params_mut(), grads);
        }
        let (val_loss, val_accuracy) = evaluate_classifier(&model, val)?;
        let stats = ClassifierEpoch {
            epoch,
            train_loss: Some(total / train.len() as f64),
            val_loss,
            val_accuracy,
        };
        log::info!(
            "classifier epoch {epoch}: train_loss={:.4} val_loss={val_loss:.4} val_acc={val_accuracy:.4}",
            total / train.len() as f64
        );
        let prev = &history[best_epoch];
        if val_accuracy > prev.val_accuracy
            || (val_accuracy == prev.val_accuracy && val_loss < prev.val_loss)
        {
            best = model.clone();
            best_epoch = epoch;
        }
        history.push(stats);
    }
    Ok(ClassifierTraining {
        model: best,
        history,
        best_epoch,
    })
}
