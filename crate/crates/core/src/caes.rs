//! Causal explanation scores: NCC scoring of pooled features against the
//! class output, top-fraction selection, object/context feature ratios and
//! their bounded summaries.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::causepairs::{standardize, Direction, SamplePairSet};
use crate::imaging::{ClassifierModel, EffectVariable, ImageDataset, ImagingError, Variant};
use crate::ncc::{NccError, PairScorer};
use crate::saliency::{make_cutouts, MaskSet, MaskSource, SaliencyError};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_FRACTION: f64 = 0.01;
/// Fewest class images accepted for NCC scoring.
pub const MIN_CLASS_IMAGES: usize = 8;

#[derive(Debug, Error)]
pub enum CaesError {
    #[error("class {class} has {m} usable images, need at least {min}")]
    TooFewSamples { class: usize, m: usize, min: usize },
    #[error("bound_score needs a non-negative input, got {0}")]
    NegativeInput(f64),
    #[error("bound_score needs a finite input, got {0}")]
    NonFiniteInput(f64),
    #[error("fraction must lie in (0, 1], got {0}")]
    InvalidFraction(f64),
    #[error("no feature scores for class {0}")]
    IncompleteScoring(usize),
    #[error("feature table is inconsistent: {0}")]
    InvalidTable(String),
    #[error("image {id}: {source}")]
    Extraction {
        id: String,
        #[source]
        source: ImagingError,
    },
    #[error(transparent)]
    Ncc(#[from] NccError),
    #[error(transparent)]
    Saliency(#[from] SaliencyError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CaesError + '_ {
    move |source| CaesError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Pooled features of one image under the three variants, plus its effect
/// value for its own class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub image_id: String,
    pub class: usize,
    pub effect: f64,
    pub original: Vec<f64>,
    pub object_only: Vec<f64>,
    pub context_only: Vec<f64>,
}

impl FeatureRow {
    pub fn variant(&self, v: Variant) -> &[f64] {
        match v {
            Variant::Original => &self.original,
            Variant::ObjectOnly => &self.object_only,
            Variant::ContextOnly => &self.context_only,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTable {
    pub class_names: Vec<String>,
    pub feature_dim: usize,
    pub effect_variable: EffectVariable,
    pub mask_source: MaskSource,
    pub rows: Vec<FeatureRow>,
    /// Images without a usable mask.
    pub excluded: Vec<String>,
}

impl FeatureTable {
    pub fn class_rows(&self, k: usize) -> impl Iterator<Item = &FeatureRow> {
        self.rows.iter().filter(move |r| r.class == k)
    }

    pub fn validate(&self) -> Result<(), CaesError> {
        for r in &self.rows {
            let l = self.feature_dim;
            if r.original.len() != l || r.object_only.len() != l || r.context_only.len() != l {
                return Err(CaesError::InvalidTable(format!(
                    "{} does not have {l} features in every variant",
                    r.image_id
                )));
            }
            if r.class >= self.class_names.len() {
                return Err(CaesError::InvalidTable(format!("{} has class {}", r.image_id, r.class)));
            }
        }
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<(), CaesError> {
        let json = serde_json::to_string(self).expect("table serializes");
        fs::write(path, json).map_err(io_err(path))
    }

    pub fn read_json(path: &Path) -> Result<Self, CaesError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let table: FeatureTable = serde_json::from_str(&text).map_err(|source| CaesError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        table.validate()?;
        Ok(table)
    }
}

/// Extract original, object-only and context-only features for every image
/// that has a mask.
pub fn build_feature_table(
    model: &ClassifierModel,
    ds: &ImageDataset,
    masks: &MaskSet,
    effect_variable: EffectVariable,
) -> Result<FeatureTable, CaesError> {
    let mut rows = Vec::with_capacity(ds.len());
    let mut excluded = Vec::new();
    for im in &ds.images {
        let Some(mask) = masks.masks.get(&im.id) else {
            excluded.push(im.id.clone());
            continue;
        };
        let cut = make_cutouts(im.pixels.view(), mask, &im.id)?;
        let wrap = |source| CaesError::Extraction {
            id: im.id.clone(),
            source,
        };
        let feats = |x: &ndarray::Array3<f64>, v| {
            model
                .extract_features(x.view(), &im.id, v)
                .map(|f| f.values)
                .map_err(wrap)
        };
        rows.push(FeatureRow {
            image_id: im.id.clone(),
            class: im.label,
            effect: model
                .effect_value(im.pixels.view(), im.label, effect_variable)
                .map_err(wrap)?,
            original: feats(&im.pixels, Variant::Original)?,
            object_only: feats(&cut.object_only, Variant::ObjectOnly)?,
            context_only: feats(&cut.context_only, Variant::ContextOnly)?,
        });
    }
    Ok(FeatureTable {
        class_names: ds.class_names.clone(),
        feature_dim: model.feature_dim(),
        effect_variable,
        mask_source: masks.source,
        rows,
        excluded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureCausalScore {
    pub feature: usize,
    pub class: usize,
    /// Probability that the feature causes the class output.
    pub p_causal: f64,
    pub n_batches_averaged: usize,
    /// Feature or effect was constant; `p_causal` is then 0.5.
    pub zero_variance: bool,
}

/// NCC score of each feature of class `k` against the class effect value.
///
/// With `batches > 1` the class images are cut into that many contiguous
/// groups and the scores of the non-degenerate groups are averaged.
pub fn score_features_ncc<S: PairScorer + ?Sized>(
    ncc: &S,
    table: &FeatureTable,
    k: usize,
    batches: usize,
) -> Result<Vec<FeatureCausalScore>, CaesError> {
    let rows: Vec<&FeatureRow> = table.class_rows(k).collect();
    if rows.len() < MIN_CLASS_IMAGES {
        return Err(CaesError::TooFewSamples {
            class: k,
            m: rows.len(),
            min: MIN_CLASS_IMAGES,
        });
    }
    let chunk = rows.len().div_ceil(batches.max(1)).max(2);
    let mut out = Vec::with_capacity(table.feature_dim);
    for l in 0..table.feature_dim {
        let (mut sum, mut n) = (0.0, 0usize);
        for group in rows.chunks(chunk) {
            let xs: Vec<f64> = group.iter().map(|r| r.original[l]).collect();
            let ys: Vec<f64> = group.iter().map(|r| r.effect).collect();
            let (Some(xs), Some(ys)) = (standardize(&xs), standardize(&ys)) else {
                continue;
            };
            let pair = SamplePairSet::new(format!("class{k}/f{l}"), xs, ys, Direction::Unlabeled, 1.0)
                .map_err(NccError::from)?;
            sum += ncc.p_xy(&pair)?;
            n += 1;
        }
        out.push(FeatureCausalScore {
            feature: l,
            class: k,
            p_causal: if n == 0 { 0.5 } else { sum / n as f64 },
            n_batches_averaged: n,
            zero_variance: n == 0,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSet {
    Causal,
    Anticausal,
}

impl FeatureSet {
    pub const ALL: [FeatureSet; 2] = [FeatureSet::Causal, FeatureSet::Anticausal];
}

impl fmt::Display for FeatureSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureSet::Causal => "causal",
            FeatureSet::Anticausal => "anticausal",
        })
    }
}

/// Number of features kept for a fraction of `l`: at least one.
pub fn selection_size(fraction: f64, l: usize) -> usize {
    ((fraction * l as f64).ceil() as usize).clamp(1.min(l), l)
}

/// Feature indices of the `ceil(fraction * L)` highest `p_causal` (causal)
/// or `1 - p_causal` (anticausal), best first, ties by ascending index.
pub fn select_top_fraction(
    scores: &[FeatureCausalScore],
    fraction: f64,
    set: FeatureSet,
) -> Result<Vec<usize>, CaesError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CaesError::InvalidFraction(fraction));
    }
    let key = |s: &FeatureCausalScore| match set {
        FeatureSet::Causal => s.p_causal,
        FeatureSet::Anticausal => 1.0 - s.p_causal,
    };
    let mut ranked: Vec<&FeatureCausalScore> = scores.iter().collect();
    ranked.sort_by(|a, b| key(b).total_cmp(&key(a)).then(a.feature.cmp(&b.feature)));
    Ok(ranked
        .into_iter()
        .take(selection_size(fraction, scores.len()))
        .map(|s| s.feature)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RatioKind {
    /// Change of the feature when the object is removed.
    Object,
    /// Change of the feature when the context is removed.
    Context,
}

impl RatioKind {
    pub const ALL: [RatioKind; 2] = [RatioKind::Object, RatioKind::Context];
}

impl fmt::Display for RatioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RatioKind::Object => "object",
            RatioKind::Context => "context",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ratio {
    pub value: f64,
    /// The feature is zero on every class image.
    pub dead: bool,
}

/// `sum_j |g_jl - f_jl| / sum_j |f_jl|` over the class-`k` rows, where `g`
/// is the context-only features for the object ratio and the object-only
/// features for the context ratio.
pub fn feature_ratio(table: &FeatureTable, k: usize, l: usize, which: RatioKind) -> Ratio {
    let other = match which {
        RatioKind::Object => Variant::ContextOnly,
        RatioKind::Context => Variant::ObjectOnly,
    };
    let (mut num, mut den) = (0.0, 0.0);
    for r in table.class_rows(k) {
        let f = r.original[l];
        num += (r.variant(other)[l] - f).abs();
        den += f.abs();
    }
    if den == 0.0 {
        Ratio {
            value: 0.0,
            dead: true,
        }
    } else {
        Ratio {
            value: num / den,
            dead: false,
        }
    }
}

/// `2 / (1 + exp(-s)) - 1`, evaluated as `tanh(s / 2)`. Saturated values
/// are held at the largest double below one.
pub fn bound_score(s: f64) -> Result<f64, CaesError> {
    if !s.is_finite() {
        return Err(CaesError::NonFiniteInput(s));
    }
    if s < 0.0 {
        return Err(CaesError::NegativeInput(s));
    }
    Ok((0.5 * s).tanh().min(1.0 - f64::EPSILON / 2.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Summary {
        let n = values.len();
        if n == 0 {
            return Summary {
                mean: 0.0,
                std: 0.0,
                n,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        Summary {
            mean,
            std: var.sqrt(),
            n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDetail {
    pub feature: usize,
    pub p_causal: f64,
    pub object_ratio: f64,
    pub context_ratio: f64,
    pub sigma_object: f64,
    pub sigma_context: f64,
    pub dead: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetReport {
    pub set: FeatureSet,
    pub features: Vec<FeatureDetail>,
    pub sigma_object: Summary,
    pub sigma_context: Summary,
}

impl SetReport {
    pub fn summary(&self, ratio: RatioKind) -> Summary {
        match ratio {
            RatioKind::Object => self.sigma_object,
            RatioKind::Context => self.sigma_context,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaesClassReport {
    pub class: usize,
    pub class_name: String,
    pub mask_source: MaskSource,
    pub n_images: usize,
    pub excluded_image_count: usize,
    pub causal: SetReport,
    pub anticausal: SetReport,
    pub zero_variance_features: Vec<usize>,
}

impl CaesClassReport {
    pub fn set(&self, set: FeatureSet) -> &SetReport {
        match set {
            FeatureSet::Causal => &self.causal,
            FeatureSet::Anticausal => &self.anticausal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaesRunReport {
    pub schema_version: u32,
    pub run_id: String,
    pub mask_source: MaskSource,
    pub fraction: f64,
    pub effect_variable: EffectVariable,
    pub classes: Vec<CaesClassReport>,
    pub config: serde_json::Value,
    /// SHA-256 of the model checkpoints used, by role.
    pub checksums: BTreeMap<String, String>,
    pub timestamp: String,
}

impl CaesRunReport {
    /// Every reported sigma, in report order.
    pub fn all_sigmas(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for c in &self.classes {
            for set in FeatureSet::ALL {
                let s = c.set(set);
                out.extend([s.sigma_object.mean, s.sigma_object.std, s.sigma_context.mean, s.sigma_context.std]);
                for f in &s.features {
                    out.extend([f.sigma_object, f.sigma_context]);
                }
            }
        }
        out
    }

    /// Mean over classes and sets of the reported standard deviations.
    pub fn mean_sigma_std(&self) -> f64 {
        let stds: Vec<f64> = self
            .classes
            .iter()
            .flat_map(|c| {
                FeatureSet::ALL
                    .into_iter()
                    .flat_map(move |s| RatioKind::ALL.map(|r| c.set(s).summary(r).std))
            })
            .collect();
        Summary::of(&stds).mean
    }
}

pub struct ReportInputs<'a> {
    pub table: &'a FeatureTable,
    pub scores: &'a BTreeMap<usize, Vec<FeatureCausalScore>>,
    pub fraction: f64,
    pub run_id: String,
    pub config: serde_json::Value,
    pub checksums: BTreeMap<String, String>,
}

fn set_report(
    table: &FeatureTable,
    k: usize,
    scores: &[FeatureCausalScore],
    fraction: f64,
    set: FeatureSet,
) -> Result<SetReport, CaesError> {
    let by_feature: BTreeMap<usize, f64> = scores.iter().map(|s| (s.feature, s.p_causal)).collect();
    let mut features = Vec::new();
    for l in select_top_fraction(scores, fraction, set)? {
        let o = feature_ratio(table, k, l, RatioKind::Object);
        let c = feature_ratio(table, k, l, RatioKind::Context);
        features.push(FeatureDetail {
            feature: l,
            p_causal: by_feature[&l],
            object_ratio: o.value,
            context_ratio: c.value,
            sigma_object: bound_score(o.value)?,
            sigma_context: bound_score(c.value)?,
            dead: o.dead,
        });
    }
    let so: Vec<f64> = features.iter().map(|f| f.sigma_object).collect();
    let sc: Vec<f64> = features.iter().map(|f| f.sigma_context).collect();
    Ok(SetReport {
        set,
        sigma_object: Summary::of(&so),
        sigma_context: Summary::of(&sc),
        features,
    })
}

/// Per-class summaries for every class with rows in the table.
pub fn build_run_report(inputs: ReportInputs<'_>) -> Result<CaesRunReport, CaesError> {
    let table = inputs.table;
    table.validate()?;
    let mut classes = Vec::new();
    for (k, name) in table.class_names.iter().enumerate() {
        let n_images = table.class_rows(k).count();
        if n_images == 0 {
            continue;
        }
        let scores = inputs
            .scores
            .get(&k)
            .filter(|s| s.len() == table.feature_dim)
            .ok_or(CaesError::IncompleteScoring(k))?;
        let excluded_image_count = table
            .excluded
            .iter()
            .filter(|id| id.split('/').next() == Some(name.as_str()))
            .count();
        classes.push(CaesClassReport {
            class: k,
            class_name: name.clone(),
            mask_source: table.mask_source,
            n_images,
            excluded_image_count,
            causal: set_report(table, k, scores, inputs.fraction, FeatureSet::Causal)?,
            anticausal: set_report(table, k, scores, inputs.fraction, FeatureSet::Anticausal)?,
            zero_variance_features: scores.iter().filter(|s| s.zero_variance).map(|s| s.feature).collect(),
        });
    }
    Ok(CaesRunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        run_id: inputs.run_id,
        mask_source: table.mask_source,
        fraction: inputs.fraction,
        effect_variable: table.effect_variable,
        classes,
        config: inputs.config,
        checksums: inputs.checksums,
        timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
    })
}

pub fn report_csv(report: &CaesRunReport) -> String {
    let mut out = String::from("class,set,ratio,mean,std,n\n");
    for c in &report.classes {
        for set in FeatureSet::ALL {
            for ratio in RatioKind::ALL {
                let s = c.set(set).summary(ratio);
                out.push_str(&format!("{},{set},{ratio},{},{},{}\n", c.class_name, s.mean, s.std, s.n));
            }
        }
    }
    out
}

fn escape_xml(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Bar chart of the per-class mean sigma with one-std error bars.
pub fn report_svg(report: &CaesRunReport, set: FeatureSet, ratio: RatioKind) -> String {
    let (w, h) = (120.0 + 80.0 * report.classes.len() as f64, 320.0);
    let (left, top, plot_h) = (60.0, 40.0, 220.0);
    let y = |v: f64| top + plot_h * (1.0 - v.clamp(0.0, 1.0));
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\" text-anchor=\"middle\">CaES {set} features, {ratio} ratio ({})</text>\n",
        w / 2.0,
        report.mask_source
    );
    for tick in 0..=4 {
        let v = tick as f64 / 4.0;
        svg.push_str(&format!(
            "<line x1=\"{left}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"#ddd\"/>\n\
             <text x=\"{2}\" y=\"{3}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">{v:.2}</text>\n",
            y(v),
            w - 20.0,
            left - 6.0,
            y(v) + 3.0
        ));
    }
    let color = match set {
        FeatureSet::Causal => "#4c72b0",
        FeatureSet::Anticausal => "#dd8452",
    };
    for (i, c) in report.classes.iter().enumerate() {
        let s = c.set(set).summary(ratio);
        let x = left + 20.0 + 80.0 * i as f64;
        let (cx, bar_top) = (x + 20.0, y(s.mean));
        let (err_lo, err_hi) = (y(s.mean - s.std), y(s.mean + s.std));
        let bar_h = top + plot_h - bar_top;
        let label_y = top + plot_h + 16.0;
        let name = escape_xml(&c.class_name);
        svg.push_str(&format!(
            "<rect x=\"{x}\" y=\"{bar_top}\" width=\"40\" height=\"{bar_h}\" fill=\"{color}\"/>\n\
             <line x1=\"{cx}\" y1=\"{err_lo}\" x2=\"{cx}\" y2=\"{err_hi}\" stroke=\"black\"/>\n\
             <text x=\"{cx}\" y=\"{label_y}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">{name}</text>\n"
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

pub fn chart_file_name(set: FeatureSet, ratio: RatioKind) -> String {
    format!("caes-{set}-{ratio}.svg")
}

/// Write `caes.json`, `caes.csv` and one chart per (set, ratio).
pub fn emit_report(report: &CaesRunReport, out_dir: &Path) -> Result<Vec<PathBuf>, CaesError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut files = Vec::new();
    let mut write = |name: String, body: String| -> Result<(), CaesError> {
        let path = out_dir.join(name);
        fs::write(&path, body).map_err(io_err(&path))?;
        files.push(path);
        Ok(())
    };
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    write("caes.json".into(), json + "\n")?;
    write("caes.csv".into(), report_csv(report))?;
    for set in FeatureSet::ALL {
        for ratio in RatioKind::ALL {
            write(chart_file_name(set, ratio), report_svg(report, set, ratio))?;
        }
    }
    Ok(files)
}

pub fn read_report(path: &Path) -> Result<CaesRunReport, CaesError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| CaesError::Json {
        path: path.to_path_buf(),
        source,
    })
}
