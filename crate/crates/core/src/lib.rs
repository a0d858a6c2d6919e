//! Causal explanation scores for the latent features of image classifiers.
//!
//! The crate is organised along the pipeline:
//!
//! - [`causepairs`]: direction-labelled scalar pair sets, the synthetic
//!   additive-noise generator and the Tübingen benchmark loader.
//! - [`ncc`]: the Neural Causation Coefficient, a permutation-invariant set
//!   classifier that scores the probability that `X` causes `Y`.
//! - [`imaging`]: image datasets, a procedural stand-in dataset, the CNN
//!   classifier and pooled feature extraction.
//! - [`saliency`]: squared GradCAM heatmaps, quantile thresholding and
//!   object/context cutouts.
//! - [`caes`]: per-class NCC scoring of features, top-fraction selection,
//!   feature ratios, bounded scores and report emission.
//!
//! Shared numerical building blocks (dense and convolutional layers, the
//! Adam optimiser, checkpoints) live in [`nn`].

pub mod caes;
pub mod causepairs;
pub mod imaging;
pub mod ncc;
pub mod nn;
pub mod rng;
pub mod saliency;
