use std::path::Path;

use ndarray::{Array1, Array3, ArrayView3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{FeatureVector, ImagingError, Variant};
use crate::nn::checkpoint::{self, CheckpointError};
use crate::nn::conv::PoolIndices;
use crate::nn::{relu, softmax, Conv2d, Dense, MaxPool2, ParamRef, Parameterized};

pub const CLASSIFIER_MODEL_VERSION: u32 = 1;
const CHECKPOINT_KIND: &str = "classifier";

/// Plain convolutional stack: block `i` is a 3x3 convolution to
/// `channels[i]` maps followed by a rectifier and, except for the last
/// block, 2x2 max pooling.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub channels: Vec<usize>,
    pub conv_bias: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub input_size: usize,
    pub backbone: BackboneSpec,
    /// Width of the two fully connected hidden layers.
    pub head_width: usize,
    pub num_classes: usize,
}

impl ClassifierSpec {
    /// 224x224 input, 512 last-block maps, two 512-wide hidden layers.
    pub fn standard(num_classes: usize) -> Self {
        ClassifierSpec {
            input_size: 224,
            backbone: BackboneSpec {
                channels: vec![64, 128, 256, 512],
                conv_bias: false,
            },
            head_width: 512,
            num_classes,
        }
    }

    /// Small 3-block model for 64x64 inputs with 64 last-block maps.
    pub fn desk(num_classes: usize) -> Self {
        ClassifierSpec {
            input_size: 64,
            backbone: BackboneSpec {
                channels: vec![16, 32, 64],
                conv_bias: false,
            },
            head_width: 64,
            num_classes,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.channels.last().copied().unwrap_or(0)
    }

    /// Total spatial stride of the extractor.
    pub fn stride(&self) -> usize {
        1 << self.backbone.channels.len().saturating_sub(1)
    }

    pub fn feature_map_size(&self) -> usize {
        self.input_size / self.stride()
    }

    pub fn validate(&self) -> Result<(), ImagingError> {
        let bad = |m: String| Err(ImagingError::InvalidConfig(m));
        if self.backbone.channels.is_empty() || self.backbone.channels.contains(&0) {
            return bad("backbone needs at least one block with non-zero channels".into());
        }
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.head_width == 0 {
            return bad("head_width must be positive".into());
        }
        if self.input_size == 0 || self.input_size % self.stride() != 0 {
            return bad(format!(
                "input_size {} must be a positive multiple of the stride {}",
                self.input_size,
                self.stride()
            ));
        }
        Ok(())
    }
}

/// Quantity of the classifier output used as the effect variable.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EffectVariable {
    /// Softmax probability of the class.
    #[default]
    Prob,
    /// Pre-softmax logit of the class.
    Logit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    pub spec: ClassifierSpec,
    pub convs: Vec<Conv2d>,
    /// `L -> w -> w -> K`, rectifiers between layers.
    pub head: Vec<Dense>,
    pub version: u32,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    block_inputs: Vec<Array3<f64>>,
    cols: Vec<ndarray::Array2<f64>>,
    pre_act: Vec<Array3<f64>>,
    pool: Vec<Option<(PoolIndices, (usize, usize, usize))>>,
    head_inputs: Vec<Array1<f64>>,
    head_pre: Vec<Array1<f64>>,
    /// Last-block feature maps `L x Hf x Wf`.
    pub maps: Array3<f64>,
    pub pooled: Array1<f64>,
    pub logits: Array1<f64>,
}

/// Last-block maps and the gradient of one class logit with respect to them.
#[derive(Debug, Clone)]
pub struct MapGradient {
    pub maps: Array3<f64>,
    pub gradient: Array3<f64>,
    pub logits: Array1<f64>,
}

impl ClassifierModel {
    pub fn new<R: Rng + ?Sized>(spec: ClassifierSpec, rng: &mut R) -> Result<Self, ImagingError> {
        spec.validate()?;
        let mut convs = Vec::new();
        let mut input = 3;
        for &c in &spec.backbone.channels {
            convs.push(Conv2d::he(input, c, spec.backbone.conv_bias, rng));
            input = c;
        }
        let (l, w, k) = (spec.feature_dim(), spec.head_width, spec.num_classes);
        let head = vec![Dense::he(l, w, rng), Dense::he(w, w, rng), Dense::zeros(w, k)];
        Ok(ClassifierModel {
            spec,
            convs,
            head,
            version: CLASSIFIER_MODEL_VERSION,
        })
    }

    pub fn zeros(spec: ClassifierSpec) -> Self {
        let mut convs = Vec::new();
        let mut input = 3;
        for &c in &spec.backbone.channels {
            convs.push(Conv2d::zeros(input, c, spec.backbone.conv_bias));
            input = c;
        }
        let (l, w, k) = (spec.feature_dim(), spec.head_width, spec.num_classes);
        let head = vec![Dense::zeros(l, w), Dense::zeros(w, w), Dense::zeros(w, k)];
        ClassifierModel {
            spec,
            convs,
            head,
            version: CLASSIFIER_MODEL_VERSION,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim()
    }

    pub fn input_dim(&self) -> (usize, usize, usize) {
        (3, self.spec.input_size, self.spec.input_size)
    }

    fn check_input(&self, x: &ArrayView3<'_, f64>) -> Result<(), ImagingError> {
        if x.dim() != self.input_dim() {
            return Err(ImagingError::SizeMismatch {
                expected: self.input_dim(),
                found: x.dim(),
            });
        }
        Ok(())
    }

    fn check_class(&self, k: usize) -> Result<(), ImagingError> {
        if k >= self.num_classes() {
            return Err(ImagingError::ClassOutOfRange {
                k,
                classes: self.num_classes(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView3<'_, f64>) -> Result<ForwardTrace, ImagingError> {
        self.check_input(&x)?;
        let blocks = self.convs.len();
        let mut block_inputs = Vec::with_capacity(blocks);
        let mut cols = Vec::with_capacity(blocks);
        let mut pre_act = Vec::with_capacity(blocks);
        let mut pool = Vec::with_capacity(blocks);
        let mut a = x.to_owned();
        for (i, conv) in self.convs.iter().enumerate() {
            let (z, c) = conv.forward(a.view());
            let act = z.mapv(relu);
            block_inputs.push(std::mem::replace(&mut a, act));
            cols.push(c);
            pre_act.push(z);
            if i + 1 < blocks {
                let dim = a.dim();
                let (pooled, idx) = MaxPool2.forward(a.view());
                a = pooled;
                pool.push(Some((idx, dim)));
            } else {
                pool.push(None);
            }
        }
        let maps = a;
        let pooled = global_average(&maps);
        let (head_inputs, head_pre, logits) = self.head_forward(&pooled);
        Ok(ForwardTrace {
            block_inputs,
            cols,
            pre_act,
            pool,
            head_inputs,
            head_pre,
            maps,
            pooled,
            logits,
        })
    }

    fn head_forward(&self, pooled: &Array1<f64>) -> (Vec<Array1<f64>>, Vec<Array1<f64>>, Array1<f64>) {
        let mut inputs = Vec::with_capacity(3);
        let mut pre = Vec::with_capacity(2);
        let mut h = pooled.clone();
        for layer in &self.head[..2] {
            let z = layer.forward_vec(h.view());
            inputs.push(h);
            h = z.mapv(relu);
            pre.push(z);
        }
        let logits = self.head[2].forward_vec(h.view());
        inputs.push(h);
        (inputs, pre, logits)
    }

    /// Logits as a function of the last-block maps.
    pub fn logits_from_maps(&self, maps: &Array3<f64>) -> Array1<f64> {
        self.head_forward(&global_average(maps)).2
    }

    /// Backpropagate `dlogits` through the head; returns `dL/dpooled`.
    fn head_backward(
        &self,
        trace: &ForwardTrace,
        dlogits: &Array1<f64>,
        grad_head: &mut [Dense],
    ) -> Array1<f64> {
        let mut d = self.head[2].backward_vec(trace.head_inputs[2].view(), dlogits.view(), &mut grad_head[2]);
        for i in (0..2).rev() {
            d.zip_mut_with(&trace.head_pre[i], |g, z| {
                if *z <= 0.0 {
                    *g = 0.0
                }
            });
            d = self.head[i].backward_vec(trace.head_inputs[i].view(), d.view(), &mut grad_head[i]);
        }
        d
    }

    fn maps_gradient(&self, trace: &ForwardTrace, dpooled: &Array1<f64>) -> Array3<f64> {
        let (l, h, w) = trace.maps.dim();
        let area = (h * w) as f64;
        Array3::from_shape_fn((l, h, w), |(c, _, _)| dpooled[c] / area)
    }

    /// Full backward pass accumulating parameter gradients into `grad`.
    fn backward(&self, trace: &ForwardTrace, dlogits: &Array1<f64>, grad: &mut ClassifierModel) {
        let dpooled = self.head_backward(trace, dlogits, &mut grad.head);
        let mut d = self.maps_gradient(trace, &dpooled);
        for i in (0..self.convs.len()).rev() {
            if let Some((idx, dim)) = &trace.pool[i] {
                d = MaxPool2.backward(d.view(), idx, *dim);
            }
            d.zip_mut_with(&trace.pre_act[i], |g, z| {
                if *z <= 0.0 {
                    *g = 0.0
                }
            });
            let dx = self.convs[i].backward(trace.cols[i].view(), d.view(), &mut grad.convs[i]);
            debug_assert_eq!(dx.dim(), trace.block_inputs[i].dim());
            d = dx;
        }
    }

    /// Cross-entropy loss of one image; parameter gradients are added to
    /// `grad`. Returns the loss and the logits.
    pub fn accumulate_gradient(
        &self,
        x: ArrayView3<'_, f64>,
        label: usize,
        grad: &mut ClassifierModel,
    ) -> Result<(f64, Array1<f64>), ImagingError> {
        self.check_class(label)?;
        let trace = self.forward(x)?;
        let probs = softmax(trace.logits.as_slice().expect("contiguous"));
        let loss = -probs[label].max(f64::MIN_POSITIVE).ln();
        let mut dlogits = Array1::from(probs);
        dlogits[label] -= 1.0;
        self.backward(&trace, &dlogits, grad);
        Ok((loss, trace.logits))
    }

    pub fn loss_gradient(
        &self,
        x: ArrayView3<'_, f64>,
        label: usize,
    ) -> Result<(f64, ClassifierModel), ImagingError> {
        let mut grad = ClassifierModel::zeros(self.spec.clone());
        let (loss, _) = self.accumulate_gradient(x, label, &mut grad)?;
        Ok((loss, grad))
    }

    /// Gradient of logit `k` with respect to the last-block maps.
    pub fn map_gradient(&self, x: ArrayView3<'_, f64>, k: usize) -> Result<MapGradient, ImagingError> {
        self.check_class(k)?;
        let trace = self.forward(x)?;
        let mut scratch: Vec<Dense> = self
            .head
            .iter()
            .map(|d| Dense::zeros(d.input_dim(), d.output_dim()))
            .collect();
        let mut onehot = Array1::zeros(self.num_classes());
        onehot[k] = 1.0;
        let dpooled = self.head_backward(&trace, &onehot, &mut scratch);
        let gradient = self.maps_gradient(&trace, &dpooled);
        Ok(MapGradient {
            maps: trace.maps,
            gradient,
            logits: trace.logits,
        })
    }

    pub fn logits(&self, x: ArrayView3<'_, f64>) -> Result<Array1<f64>, ImagingError> {
        Ok(self.forward(x)?.logits)
    }

    pub fn class_probabilities(&self, x: ArrayView3<'_, f64>) -> Result<Vec<f64>, ImagingError> {
        Ok(softmax(self.logits(x)?.as_slice().expect("contiguous")))
    }

    pub fn class_probability(&self, x: ArrayView3<'_, f64>, k: usize) -> Result<f64, ImagingError> {
        self.check_class(k)?;
        Ok(self.class_probabilities(x)?[k])
    }

    /// Index of the largest logit (lowest index on ties).
    pub fn predict(&self, x: ArrayView3<'_, f64>) -> Result<usize, ImagingError> {
        Ok(argmax(self.logits(x)?.as_slice().expect("contiguous")))
    }

    pub fn effect_value(
        &self,
        x: ArrayView3<'_, f64>,
        k: usize,
        variable: EffectVariable,
    ) -> Result<f64, ImagingError> {
        self.check_class(k)?;
        let logits = self.logits(x)?;
        Ok(match variable {
            EffectVariable::Logit => logits[k],
            EffectVariable::Prob => softmax(logits.as_slice().expect("contiguous"))[k],
        })
    }

    pub fn feature_maps(&self, x: ArrayView3<'_, f64>) -> Result<Array3<f64>, ImagingError> {
        Ok(self.forward(x)?.maps)
    }

    /// Spatial means of the last-block maps.
    pub fn extract_features(
        &self,
        x: ArrayView3<'_, f64>,
        image_id: &str,
        variant: Variant,
    ) -> Result<FeatureVector, ImagingError> {
        let trace = self.forward(x)?;
        Ok(FeatureVector {
            image_id: image_id.to_string(),
            variant,
            values: trace.pooled.to_vec(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ImagingError> {
        let config = serde_json::json!({
            "spec": self.spec,
            "model_version": self.version,
        });
        checkpoint::write(path, CHECKPOINT_KIND, config, &self.params())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ImagingError> {
        let path = path.as_ref();
        let ck = checkpoint::read(path, CHECKPOINT_KIND)?;
        let malformed = |reason: String| {
            ImagingError::Checkpoint(CheckpointError::Malformed {
                path: path.to_path_buf(),
                reason,
            })
        };
        let version = ck.manifest.config["model_version"]
            .as_u64()
            .ok_or_else(|| malformed("missing model_version".into()))? as u32;
        if version != CLASSIFIER_MODEL_VERSION {
            return Err(ImagingError::VersionUnsupported(version));
        }
        let spec: ClassifierSpec = serde_json::from_value(ck.manifest.config["spec"].clone())
            .map_err(|e| malformed(format!("spec: {e}")))?;
        spec.validate()?;
        let mut model = ClassifierModel::zeros(spec);
        let specs: Vec<(String, Vec<usize>)> = model
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.shape.clone()))
            .collect();
        for ((name, shape), dst) in specs.iter().zip(model.params_mut()) {
            let src = ck
                .tensor(name, shape)
                .ok_or_else(|| malformed(format!("tensor {name} missing or misshapen")))?;
            dst.copy_from_slice(src);
        }
        Ok(model)
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn global_average(maps: &Array3<f64>) -> Array1<f64> {
    let (l, h, w) = maps.dim();
    let flat = maps
        .view()
        .into_shape_with_order((l, h * w))
        .expect("contiguous maps");
    flat.sum_axis(Axis(1)) / (h * w) as f64
}

impl Parameterized for ClassifierModel {
    fn params(&self) -> Vec<ParamRef<'_>> {
        let mut out = Vec::new();
        for (i, conv) in self.convs.iter().enumerate() {
            out.push(ParamRef {
                name: format!("conv.{i}.weight"),
                shape: conv.weight.shape().to_vec(),
                data: conv.weight.as_slice().expect("standard layout"),
            });
            if let Some(b) = &conv.bias {
                out.push(ParamRef {
                    name: format!("conv.{i}.bias"),
                    shape: b.shape().to_vec(),
                    data: b.as_slice().expect("standard layout"),
                });
            }
        }
        for (i, layer) in self.head.iter().enumerate() {
            out.push(ParamRef {
                name: format!("head.{i}.weight"),
                shape: layer.weight.shape().to_vec(),
                data: layer.weight.as_slice().expect("standard layout"),
            });
            out.push(ParamRef {
                name: format!("head.{i}.bias"),
                shape: layer.bias.shape().to_vec(),
                data: layer.bias.as_slice().expect("standard layout"),
            });
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for conv in &mut self.convs {
            out.push(conv.weight.as_slice_mut().expect("standard layout"));
            if let Some(b) = &mut conv.bias {
                out.push(b.as_slice_mut().expect("standard layout"));
            }
        }
        for layer in &mut self.head {
            out.push(layer.weight.as_slice_mut().expect("standard layout"));
            out.push(layer.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }
}
