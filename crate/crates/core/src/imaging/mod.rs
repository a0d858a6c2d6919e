//! Image datasets, the CNN classifier and pooled feature extraction.
//!
//! Images are `3 x H x W` arrays of `f64` in `[0, 1]`; masks are `H x W`
//! arrays of `u8` holding only 0 and 1.

mod blobs;
mod classifier;
mod dataset;
mod train;

use std::collections::HashSet;
use std::fmt;
use std::path::PathBuf;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use blobs::{generate_blob_dataset, BLOB_HUE_JITTER};
pub use classifier::{
    BackboneSpec, ClassifierModel, ClassifierSpec, EffectVariable, ForwardTrace, MapGradient,
    CLASSIFIER_MODEL_VERSION,
};
pub use dataset::{
    load_image_dataset, save_image_dataset, split_stratified, write_mask_png, DatasetSplits,
};
pub use train::{
    evaluate_classifier, train_classifier, ClassifierEpoch, ClassifierTrainConfig,
    ClassifierTraining,
};

use crate::nn::checkpoint::CheckpointError;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("class folder {0} contains no images")]
    EmptyClass(PathBuf),
    #[error("mask for {id} is {mask:?} but the image is {image:?}")]
    MaskShapeMismatch {
        id: String,
        mask: (u32, u32),
        image: (u32, u32),
    },
    #[error("cannot read image {id}: {reason}")]
    UnreadableImage { id: String, reason: String },
    #[error("no class folders under {0}")]
    NoClasses(PathBuf),
    #[error("input is {found:?}, model expects {expected:?}")]
    SizeMismatch {
        expected: (usize, usize, usize),
        found: (usize, usize, usize),
    },
    #[error("class index {k} out of range for {classes} classes")]
    ClassOutOfRange { k: usize, classes: usize },
    #[error("train and validation sets disagree on classes: {0:?} vs {1:?}")]
    ClassMismatch(Vec<String>, Vec<String>),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("invalid classifier config: {0}")]
    InvalidConfig(String),
    #[error("unsupported classifier model version {0}")]
    VersionUnsupported(u32),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Surface,
    Section,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    /// A dataset that has not been split.
    All,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub id: String,
    pub pixels: Array3<f64>,
    pub label: usize,
    pub human_mask: Option<Array2<u8>>,
    pub view: Option<View>,
}

impl LabeledImage {
    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageDataset {
    pub images: Vec<LabeledImage>,
    pub class_names: Vec<String>,
    pub split: Split,
}

impl ImageDataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&LabeledImage> {
        self.images.iter().find(|im| im.id == id)
    }

    /// Images of class `k`, in dataset order.
    pub fn class_images(&self, k: usize) -> impl Iterator<Item = &LabeledImage> {
        self.images.iter().filter(move |im| im.label == k)
    }

    pub fn validate(&self) -> Result<(), ImagingError> {
        let k = self.num_classes();
        let mut ids = HashSet::new();
        for im in &self.images {
            let bad = |m: String| Err(ImagingError::InvalidDataset(format!("{}: {m}", im.id)));
            if im.label >= k {
                return bad(format!("label {} >= {k} classes", im.label));
            }
            if !ids.insert(im.id.as_str()) {
                return bad("duplicate id".into());
            }
            if im.pixels.dim().0 != 3 {
                return bad(format!("{} channels, expected 3", im.pixels.dim().0));
            }
            if im.pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return bad("pixel outside [0, 1]".into());
            }
            if let Some(mask) = &im.human_mask {
                if mask.dim() != (im.height(), im.width()) {
                    return bad("mask shape differs from image".into());
                }
                if mask.iter().any(|v| *v > 1) {
                    return bad("mask is not binary".into());
                }
            }
        }
        Ok(())
    }
}

/// Which image a feature vector was extracted from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Original,
    ObjectOnly,
    ContextOnly,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Original, Variant::ObjectOnly, Variant::ContextOnly];
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Original => "original",
            Variant::ObjectOnly => "object_only",
            Variant::ContextOnly => "context_only",
        })
    }
}

/// Global-average-pooled activations of the last convolutional block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub image_id: String,
    pub variant: Variant,
    pub values: Vec<f64>,
}
