//! Squared GradCAM heatmaps, quantile thresholding into binary masks and
//! object/context cutouts.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{write_mask_png, ClassifierModel, ImageDataset, ImagingError};

pub const DEFAULT_RETAIN_FRACTION: f64 = 0.30;

#[derive(Debug, Error)]
pub enum SaliencyError {
    #[error("gradient unavailable for {id}: {reason}")]
    GradientUnavailable { id: String, reason: String },
    #[error("heatmap of {id} is constant")]
    DegenerateHeatmap { id: String },
    #[error("retain fraction must lie in (0, 1), got {0}")]
    InvalidRetainFraction(f64),
    #[error("mask is {mask:?} but the image is {image:?}")]
    ShapeMismatch {
        mask: (usize, usize),
        image: (usize, usize),
    },
    #[error("images without a human mask: {0:?}")]
    MissingHumanMask(Vec<String>),
    #[error("gradcam masks need a classifier")]
    ModelRequired,
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskSource {
    Human,
    Gradcam,
}

impl MaskSource {
    pub const ALL: [MaskSource; 2] = [MaskSource::Human, MaskSource::Gradcam];
}

impl fmt::Display for MaskSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskSource::Human => "human",
            MaskSource::Gradcam => "gradcam",
        })
    }
}

impl std::str::FromStr for MaskSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "human" => Ok(MaskSource::Human),
            "gradcam" => Ok(MaskSource::Gradcam),
            other => Err(format!("unknown mask source {other:?} (expected human or gradcam)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    /// Non-negative heatmap at input resolution.
    pub values: Array2<f64>,
    pub image_id: String,
    pub target_class: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub values: Array2<u8>,
    pub source: MaskSource,
    /// Requested foreground fraction; `None` for human masks.
    pub retain_fraction: Option<f64>,
    /// Quantile threshold used for gradcam masks.
    pub threshold: Option<f64>,
    /// Share of pixels whose value equals the threshold.
    pub tie_slack: f64,
}

impl BinaryMask {
    pub fn human(values: Array2<u8>) -> Self {
        BinaryMask {
            values,
            source: MaskSource::Human,
            retain_fraction: None,
            threshold: None,
            tie_slack: 0.0,
        }
    }

    pub fn foreground_fraction(&self) -> f64 {
        let on = self.values.iter().filter(|v| **v != 0).count();
        on as f64 / self.values.len().max(1) as f64
    }

    /// More than one pixel sits exactly on the threshold.
    pub fn is_tied(&self) -> bool {
        self.tie_slack * self.values.len() as f64 > 1.5
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CutoutPair {
    pub object_only: Array3<f64>,
    pub context_only: Array3<f64>,
    pub image_id: String,
}

/// `S = sum_l alpha_l A^l` with `alpha_l` the spatial mean of the gradient.
pub fn class_activation(maps: ArrayView3<'_, f64>, gradient: ArrayView3<'_, f64>) -> Array2<f64> {
    let (_, h, w) = maps.dim();
    let alphas = gradient
        .to_owned()
        .into_shape_with_order((gradient.len_of(Axis(0)), h * w))
        .expect("contiguous gradient")
        .mean_axis(Axis(1))
        .expect("non-empty maps");
    let mut s = Array2::zeros((h, w));
    for (a, alpha) in maps.axis_iter(Axis(0)).zip(alphas.iter()) {
        s.scaled_add(*alpha, &a);
    }
    s
}

/// Square the activation map elementwise and upsample it to `out`.
///
/// Squaring already makes every value non-negative, so the usual rectifier
/// leaves the result unchanged.
pub fn squared_heatmap(s: ArrayView2<'_, f64>, out: (usize, usize)) -> Array2<f64> {
    let sq = s.mapv(|v| (v * v).max(0.0));
    bilinear_resize(sq.view(), out)
}

/// Bilinear resampling with pixel-centre alignment and edge clamping.
pub fn bilinear_resize(src: ArrayView2<'_, f64>, out: (usize, usize)) -> Array2<f64> {
    let (h, w) = src.dim();
    let (oh, ow) = out;
    let coord = |i: usize, n_in: usize, n_out: usize| {
        let c = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = c.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, c - lo as f64)
    };
    let ys: Vec<_> = (0..oh).map(|i| coord(i, h, oh)).collect();
    let xs: Vec<_> = (0..ow).map(|j| coord(j, w, ow)).collect();
    Array2::from_shape_fn((oh, ow), |(i, j)| {
        let (y0, y1, fy) = ys[i];
        let (x0, x1, fx) = xs[j];
        let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
        let bottom = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Squared GradCAM heatmap for class `k`, using gradients of the class logit.
pub fn gradcam_squared(
    model: &ClassifierModel,
    pixels: ArrayView3<'_, f64>,
    k: usize,
    image_id: &str,
) -> Result<SaliencyMap, SaliencyError> {
    let g = model.map_gradient(pixels, k)?;
    if !g.gradient.iter().all(|v| v.is_finite()) || !g.maps.iter().all(|v| v.is_finite()) {
        return Err(SaliencyError::GradientUnavailable {
            id: image_id.to_string(),
            reason: "non-finite feature maps or gradients".into(),
        });
    }
    let (_, h, w) = pixels.dim();
    let s = class_activation(g.maps.view(), g.gradient.view());
    Ok(SaliencyMap {
        values: squared_heatmap(s.view(), (h, w)),
        image_id: image_id.to_string(),
        target_class: k,
    })
}

/// Linear-interpolation quantile of sorted values at probability `p`.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Keep the pixels at or above the `(1 - retain_fraction)` quantile.
pub fn threshold_mask(s: &SaliencyMap, retain_fraction: f64) -> Result<BinaryMask, SaliencyError> {
    if !(retain_fraction > 0.0 && retain_fraction < 1.0) {
        return Err(SaliencyError::InvalidRetainFraction(retain_fraction));
    }
    let mut sorted: Vec<f64> = s.values.iter().copied().collect();
    sorted.sort_by(f64::total_cmp);
    if sorted.is_empty() || sorted[0] == sorted[sorted.len() - 1] {
        return Err(SaliencyError::DegenerateHeatmap {
            id: s.image_id.clone(),
        });
    }
    let q = quantile_sorted(&sorted, 1.0 - retain_fraction);
    let ties = sorted.iter().filter(|v| **v == q).count();
    Ok(BinaryMask {
        values: s.values.mapv(|v| u8::from(v >= q)),
        source: MaskSource::Gradcam,
        retain_fraction: Some(retain_fraction),
        threshold: Some(q),
        tie_slack: ties as f64 / sorted.len() as f64,
    })
}

/// Split an image into its masked part and the exact remainder.
pub fn make_cutouts(
    pixels: ArrayView3<'_, f64>,
    mask: &BinaryMask,
    image_id: &str,
) -> Result<CutoutPair, SaliencyError> {
    let (_, h, w) = pixels.dim();
    if mask.values.dim() != (h, w) {
        return Err(SaliencyError::ShapeMismatch {
            mask: mask.values.dim(),
            image: (h, w),
        });
    }
    let mut object_only = pixels.to_owned();
    for mut channel in object_only.axis_iter_mut(Axis(0)) {
        Zip::from(&mut channel).and(&mask.values).for_each(|p, m| {
            if *m == 0 {
                *p = 0.0;
            }
        });
    }
    let context_only = &pixels - &object_only;
    Ok(CutoutPair {
        object_only,
        context_only,
        image_id: image_id.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub source: MaskSource,
    pub retain_fraction: Option<f64>,
    pub masks: BTreeMap<String, BinaryMask>,
    /// Images left out because their heatmap was constant.
    pub degenerate: Vec<String>,
}

/// Masks for every image of `ds`. Gradcam masks target each image's
/// predicted class.
pub fn masks_for_dataset(
    model: Option<&ClassifierModel>,
    ds: &ImageDataset,
    source: MaskSource,
    retain_fraction: f64,
) -> Result<MaskSet, SaliencyError> {
    let mut masks = BTreeMap::new();
    let mut degenerate = Vec::new();
    match source {
        MaskSource::Human => {
            let missing: Vec<String> = ds
                .images
                .iter()
                .filter(|im| im.human_mask.is_none())
                .map(|im| im.id.clone())
                .collect();
            if !missing.is_empty() {
                return Err(SaliencyError::MissingHumanMask(missing));
            }
            for im in &ds.images {
                let m = im.human_mask.clone().expect("checked above");
                masks.insert(im.id.clone(), BinaryMask::human(m));
            }
        }
        MaskSource::Gradcam => {
            if !(retain_fraction > 0.0 && retain_fraction < 1.0) {
                return Err(SaliencyError::InvalidRetainFraction(retain_fraction));
            }
            let model = model.ok_or(SaliencyError::ModelRequired)?;
            for im in &ds.images {
                let k = model.predict(im.pixels.view())?;
                let map = gradcam_squared(model, im.pixels.view(), k, &im.id)?;
                match threshold_mask(&map, retain_fraction) {
                    Ok(mask) => {
                        masks.insert(im.id.clone(), mask);
                    }
                    Err(SaliencyError::DegenerateHeatmap { id }) => {
                        log::warn!("constant heatmap for {id}; image excluded");
                        degenerate.push(id);
                    }
                    Err(e) => return Err(e),
                }
            }
        }
    }
    Ok(MaskSet {
        source,
        retain_fraction: (source == MaskSource::Gradcam).then_some(retain_fraction),
        masks,
        degenerate,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub image_id: String,
    pub foreground_fraction: f64,
    pub tie_slack: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MasksReport {
    pub source: MaskSource,
    pub retain_fraction: Option<f64>,
    pub images: Vec<MaskRecord>,
    pub degenerate: Vec<String>,
}

impl MaskSet {
    pub fn report(&self) -> MasksReport {
        MasksReport {
            source: self.source,
            retain_fraction: self.retain_fraction,
            images: self
                .masks
                .iter()
                .map(|(id, m)| MaskRecord {
                    image_id: id.clone(),
                    foreground_fraction: m.foreground_fraction(),
                    tie_slack: m.tie_slack,
                })
                .collect(),
            degenerate: self.degenerate.clone(),
        }
    }

    /// Write `<dir>/<image_id>.png` for each mask plus `masks-report.json`.
    pub fn write(&self, dir: &Path) -> Result<(), SaliencyError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| SaliencyError::Io { path, source }
        };
        for (id, mask) in &self.masks {
            let path = dir.join(format!("{id}.png"));
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(io(parent))?;
            }
            write_mask_png(&mask.values, &path)?;
        }
        fs::create_dir_all(dir).map_err(io(dir))?;
        let path = dir.join("masks-report.json");
        let json = serde_json::to_string_pretty(&self.report()).expect("report serializes");
        fs::write(&path, json + "\n").map_err(io(&path))
    }
}
