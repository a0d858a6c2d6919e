//! Minimal neural-network building blocks shared by the NCC and the image
//! classifier: dense and convolutional layers with hand-written backward
//! passes, the Adam optimiser and the checkpoint format.
//!
//! Everything computes in `f64`; matrix products go through `ndarray`.

pub mod adam;
pub mod checkpoint;
pub mod conv;
pub mod dense;

pub use adam::{Adam, AdamConfig};
pub use conv::{Conv2d, MaxPool2};
pub use dense::Dense;

/// Borrowed view of one named parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

/// A model whose trainable state is a fixed list of `f64` tensors.
///
/// `params` and `params_mut` must list the tensors in the same order; that
/// order is the checkpoint declaration order and the optimiser slot order.
pub trait Parameterized {
    fn params(&self) -> Vec<ParamRef<'_>>;
    fn params_mut(&mut self) -> Vec<&mut [f64]>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.data.len()).sum()
    }

    /// Flattened copy of every parameter, in declaration order.
    fn flat_params(&self) -> Vec<f64> {
        self.params()
            .iter()
            .flat_map(|p| p.data.iter().copied())
            .collect()
    }

    fn all_finite(&self) -> bool {
        self.params()
            .iter()
            .all(|p| p.data.iter().all(|v| v.is_finite()))
    }

    fn zero(&mut self) {
        for t in self.params_mut() {
            t.fill(0.0);
        }
    }

    /// `self += scale * other`, tensor by tensor.
    fn add_scaled(&mut self, other: &Self, scale: f64)
    where
        Self: Sized,
    {
        let src = other.params();
        for (dst, src) in self.params_mut().into_iter().zip(src) {
            for (d, s) in dst.iter_mut().zip(src.data) {
                *d += scale * s;
            }
        }
    }
}

pub fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of a logit against a 0/1 target, computed without
/// forming the probability.
pub fn bce_with_logit(logit: f64, target: f64) -> f64 {
    logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p()
}

/// Softmax probabilities of a logit vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
