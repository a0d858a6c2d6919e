//! Scalar cause-effect pair sets.
//!
//! A [`SamplePairSet`] is a finite sample of a bivariate distribution with an
//! optional causal direction label. Pairs come from two places: the synthetic
//! additive-noise generator ([`generate_anm_pair`], [`make_training_corpus`])
//! used to train the NCC, and the Tübingen benchmark directory format
//! ([`load_tubingen`]) used to evaluate it.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

/// Maximum number of redraws before [`generate_anm_pair`] gives up.
pub const MAX_GENERATION_ATTEMPTS: usize = 10;

#[derive(Debug, Error)]
pub enum PairError {
    #[error("pair {id}: xs has {xs} samples but ys has {ys}")]
    LengthMismatch { id: String, xs: usize, ys: usize },
    #[error("pair {id}: need at least 2 samples, got {n}")]
    TooFewSamples { id: String, n: usize },
    #[error("pair {id}: non-finite value at sample {index}")]
    NonFinite { id: String, index: usize },
    #[error("pair {id}: negative weight {weight}")]
    NegativeWeight { id: String, weight: f64 },
    #[error("pair {id}: {axis} marginal has zero variance")]
    ZeroVariance { id: String, axis: Axis },
    #[error("no non-degenerate pair after {attempts} attempts")]
    GenerationFailure { attempts: usize },
    #[error("invalid synthetic pair config: {0}")]
    InvalidConfig(String),
    #[error("training corpus size must be even and at least 2, got {0}")]
    InvalidCorpusSize(usize),
    #[error("no pairmeta.txt in {0}")]
    MissingMeta(PathBuf),
    #[error("{file}:{line}: {reason}")]
    MalformedRow {
        file: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PairError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        PairError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Axis::X => f.write_str("x"),
            Axis::Y => f.write_str("y"),
        }
    }
}

/// Causal direction label of a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    XtoY,
    YtoX,
    Unlabeled,
}

impl Direction {
    pub fn flipped(self) -> Self {
        match self {
            Direction::XtoY => Direction::YtoX,
            Direction::YtoX => Direction::XtoY,
            Direction::Unlabeled => Direction::Unlabeled,
        }
    }

    /// Binary training target: 1 for `XtoY`, 0 for `YtoX`.
    pub fn target(self) -> Option<f64> {
        match self {
            Direction::XtoY => Some(1.0),
            Direction::YtoX => Some(0.0),
            Direction::Unlabeled => None,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Direction::XtoY => "XtoY",
            Direction::YtoX => "YtoX",
            Direction::Unlabeled => "Unlabeled",
        };
        f.write_str(s)
    }
}

/// A finite sample of scalar `(x, y)` observations.
///
/// Constructed through [`SamplePairSet::new`], which enforces equal lengths,
/// `n >= 2`, finite values and a non-negative weight. Deserialization goes
/// through the same checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPair")]
pub struct SamplePairSet {
    pub id: String,
    pub direction: Direction,
    pub weight: f64,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

#[derive(Deserialize)]
struct RawPair {
    id: String,
    direction: Direction,
    #[serde(default = "default_weight")]
    weight: f64,
    xs: Vec<f64>,
    ys: Vec<f64>,
}

fn default_weight() -> f64 {
    1.0
}

impl TryFrom<RawPair> for SamplePairSet {
    type Error = PairError;

    fn try_from(raw: RawPair) -> Result<Self, Self::Error> {
        SamplePairSet::new(raw.id, raw.xs, raw.ys, raw.direction, raw.weight)
    }
}

impl SamplePairSet {
    pub fn new(
        id: impl Into<String>,
        xs: Vec<f64>,
        ys: Vec<f64>,
        direction: Direction,
        weight: f64,
    ) -> Result<Self, PairError> {
        let pair = SamplePairSet {
            id: id.into(),
            direction,
            weight,
            xs,
            ys,
        };
        pair.validate()?;
        Ok(pair)
    }

    pub fn validate(&self) -> Result<(), PairError> {
        let id = || self.id.clone();
        if self.xs.len() != self.ys.len() {
            return Err(PairError::LengthMismatch {
                id: id(),
                xs: self.xs.len(),
                ys: self.ys.len(),
            });
        }
        if self.xs.len() < 2 {
            return Err(PairError::TooFewSamples {
                id: id(),
                n: self.xs.len(),
            });
        }
        if let Some(index) = self
            .xs
            .iter()
            .zip(&self.ys)
            .position(|(x, y)| !x.is_finite() || !y.is_finite())
        {
            return Err(PairError::NonFinite { id: id(), index });
        }
        if !(self.weight >= 0.0) || !self.weight.is_finite() {
            return Err(PairError::NegativeWeight {
                id: id(),
                weight: self.weight,
            });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    /// The same sample with the roles of `X` and `Y` exchanged.
    pub fn swapped(&self) -> Self {
        SamplePairSet {
            id: self.id.clone(),
            direction: self.direction.flipped(),
            weight: self.weight,
            xs: self.ys.clone(),
            ys: self.xs.clone(),
        }
    }
}

/// Closed integer interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntRange {
    pub lo: usize,
    pub hi: usize,
}

impl IntRange {
    pub const fn new(lo: usize, hi: usize) -> Self {
        IntRange { lo, hi }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.random_range(self.lo..=self.hi)
    }
}

/// Closed real interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RealRange {
    pub lo: f64,
    pub hi: f64,
}

impl RealRange {
    pub const fn new(lo: f64, hi: f64) -> Self {
        RealRange { lo, hi }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.random_range(self.lo..=self.hi)
        }
    }
}

/// Hyperparameters of the additive-noise pair generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticPairConfig {
    pub n_samples_range: IntRange,
    pub n_gaussian_components_range: IntRange,
    pub mechanism_knots_range: IntRange,
    pub noise_scale_range: RealRange,
    pub rng_seed: u64,
}

impl Default for SyntheticPairConfig {
    fn default() -> Self {
        SyntheticPairConfig {
            n_samples_range: IntRange::new(100, 500),
            n_gaussian_components_range: IntRange::new(1, 5),
            mechanism_knots_range: IntRange::new(4, 10),
            noise_scale_range: RealRange::new(0.0, 0.75),
            rng_seed: 0,
        }
    }
}

impl SyntheticPairConfig {
    pub fn validate(&self) -> Result<(), PairError> {
        let int_ranges = [
            ("n_samples_range", self.n_samples_range, 2),
            ("n_gaussian_components_range", self.n_gaussian_components_range, 1),
            ("mechanism_knots_range", self.mechanism_knots_range, 1),
        ];
        for (name, r, min) in int_ranges {
            if r.lo < min {
                return Err(PairError::InvalidConfig(format!(
                    "{name}: lower bound {} below {min}",
                    r.lo
                )));
            }
            if r.lo > r.hi {
                return Err(PairError::InvalidConfig(format!(
                    "{name}: empty range [{}, {}]",
                    r.lo, r.hi
                )));
            }
        }
        let noise = self.noise_scale_range;
        if !(noise.lo >= 0.0) || !noise.hi.is_finite() || noise.lo > noise.hi {
            return Err(PairError::InvalidConfig(format!(
                "noise_scale_range: invalid range [{}, {}]",
                noise.lo, noise.hi
            )));
        }
        Ok(())
    }
}

fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn is_constant(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[0] == w[1])
}

/// Shift and scale `values` to zero mean and unit population variance.
pub fn standardize(values: &[f64]) -> Option<Vec<f64>> {
    if is_constant(values) {
        return None;
    }
    let (mean, std) = mean_and_std(values);
    if !(std > 0.0) || !std.is_finite() {
        return None;
    }
    Some(values.iter().map(|v| (v - mean) / std).collect())
}

/// Standardize both marginals of a pair (population variance convention).
pub fn standardize_pair(p: &SamplePairSet) -> Result<SamplePairSet, PairError> {
    let zero = |axis| PairError::ZeroVariance {
        id: p.id.clone(),
        axis,
    };
    let xs = standardize(&p.xs).ok_or_else(|| zero(Axis::X))?;
    let ys = standardize(&p.ys).ok_or_else(|| zero(Axis::Y))?;
    Ok(SamplePairSet {
        id: p.id.clone(),
        direction: p.direction,
        weight: p.weight,
        xs,
        ys,
    })
}

/// Natural cubic spline through `(knots[i], heights[i])`.
#[derive(Debug, Clone)]
struct NaturalSpline {
    knots: Vec<f64>,
    heights: Vec<f64>,
    second: Vec<f64>,
}

impl NaturalSpline {
    fn new(knots: Vec<f64>, heights: Vec<f64>) -> Self {
        let n = knots.len();
        let mut second = vec![0.0; n];
        if n > 2 {
            // Tridiagonal system for interior second derivatives (Thomas algorithm).
            let m = n - 2;
            let mut diag = vec![0.0; m];
            let mut upper = vec![0.0; m];
            let mut rhs = vec![0.0; m];
            for i in 1..n - 1 {
                let h0 = knots[i] - knots[i - 1];
                let h1 = knots[i + 1] - knots[i];
                diag[i - 1] = 2.0 * (h0 + h1);
                upper[i - 1] = h1;
                rhs[i - 1] =
                    6.0 * ((heights[i + 1] - heights[i]) / h1 - (heights[i] - heights[i - 1]) / h0);
            }
            for i in 1..m {
                let lower = knots[i + 1] - knots[i];
                let w = lower / diag[i - 1];
                diag[i] -= w * upper[i - 1];
                rhs[i] -= w * rhs[i - 1];
            }
            let mut sol = vec![0.0; m];
            sol[m - 1] = rhs[m - 1] / diag[m - 1];
            for i in (0..m - 1).rev() {
                sol[i] = (rhs[i] - upper[i] * sol[i + 1]) / diag[i];
            }
            second[1..n - 1].copy_from_slice(&sol);
        }
        NaturalSpline {
            knots,
            heights,
            second,
        }
    }

    fn eval(&self, x: f64) -> f64 {
        let n = self.knots.len();
        if n == 1 {
            return self.heights[0];
        }
        let seg = match self.knots.partition_point(|k| *k <= x) {
            0 => 0,
            i if i >= n => n - 2,
            i => i - 1,
        };
        let (x0, x1) = (self.knots[seg], self.knots[seg + 1]);
        let h = x1 - x0;
        let a = (x1 - x) / h;
        let b = (x - x0) / h;
        a * self.heights[seg]
            + b * self.heights[seg + 1]
            + ((a * a * a - a) * self.second[seg] + (b * b * b - b) * self.second[seg + 1]) * h * h
                / 6.0
    }
}

fn sample_gmm<R: Rng + ?Sized>(rng: &mut R, n: usize, components: usize) -> Vec<f64> {
    let mut normal = || -> f64 { StandardNormal.sample(rng) };
    let means: Vec<f64> = (0..components).map(|_| 2.0 * normal()).collect();
    let stds: Vec<f64> = (0..components)
        .map(|_| (2.0 * normal() + 1.0).abs().max(1e-3))
        .collect();
    let weights: Vec<f64> = (0..components).map(|_| rng.random::<f64>() + 1e-6).collect();
    let total: f64 = weights.iter().sum();
    (0..n)
        .map(|_| {
            let mut u = rng.random::<f64>() * total;
            let mut c = components - 1;
            for (i, w) in weights.iter().enumerate() {
                if u < *w {
                    c = i;
                    break;
                }
                u -= w;
            }
            let z: f64 = StandardNormal.sample(rng);
            means[c] + stds[c] * z
        })
        .collect()
}

fn random_mechanism<R: Rng + ?Sized>(rng: &mut R, xs: &[f64], n_knots: usize) -> NaturalSpline {
    let (_, std) = mean_and_std(xs);
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min) - std;
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max) + std;
    let knots: Vec<f64> = if n_knots == 1 {
        vec![lo]
    } else {
        (0..n_knots)
            .map(|i| lo + (hi - lo) * i as f64 / (n_knots - 1) as f64)
            .collect()
    };
    let heights = (0..n_knots).map(|_| StandardNormal.sample(rng)).collect();
    NaturalSpline::new(knots, heights)
}

/// Draw one `X -> Y` pair from the additive-noise family.
///
/// The cause is a Gaussian mixture, the mechanism a natural cubic spline with
/// random knot heights spanning the cause's range, and the effect is the
/// standardized mechanism output plus `v * e`, `e ~ N(0, 1)`. Both marginals
/// are standardized. Degenerate draws (a constant marginal) are redrawn up to
/// [`MAX_GENERATION_ATTEMPTS`] times.
pub fn generate_anm_pair<R: Rng + ?Sized>(
    cfg: &SyntheticPairConfig,
    rng: &mut R,
) -> Result<SamplePairSet, PairError> {
    cfg.validate()?;
    for _ in 0..MAX_GENERATION_ATTEMPTS {
        let n = cfg.n_samples_range.sample(rng);
        let components = cfg.n_gaussian_components_range.sample(rng);
        let xs = sample_gmm(rng, n, components);
        let Some(xs) = standardize(&xs) else { continue };
        let knots = cfg.mechanism_knots_range.sample(rng);
        let spline = random_mechanism(rng, &xs, knots);
        let fx: Vec<f64> = xs.iter().map(|&x| spline.eval(x)).collect();
        let Some(fx) = standardize(&fx) else { continue };
        let v = cfg.noise_scale_range.sample(rng);
        let ys: Vec<f64> = fx
            .iter()
            .map(|f| {
                let e: f64 = StandardNormal.sample(rng);
                f + v * e
            })
            .collect();
        let Some(ys) = standardize(&ys) else { continue };
        return SamplePairSet::new("anm", xs, ys, Direction::XtoY, 1.0);
    }
    Err(PairError::GenerationFailure {
        attempts: MAX_GENERATION_ATTEMPTS,
    })
}

/// Direction-balanced synthetic corpus of `n_pairs` records.
///
/// Generates `n_pairs / 2` pairs (pair `i` drawn from seed `rng_seed ^ i`)
/// and emits each followed by its swapped `YtoX` twin.
pub fn make_training_corpus(
    cfg: &SyntheticPairConfig,
    n_pairs: usize,
) -> Result<Vec<SamplePairSet>, PairError> {
    if n_pairs < 2 || n_pairs % 2 != 0 {
        return Err(PairError::InvalidCorpusSize(n_pairs));
    }
    cfg.validate()?;
    let mut corpus = Vec::with_capacity(n_pairs);
    for i in 0..n_pairs / 2 {
        let mut r = rng::item_rng(cfg.rng_seed, i as u64);
        let mut pair = generate_anm_pair(cfg, &mut r)?;
        pair.id = format!("anm{i:06}");
        let mut twin = pair.swapped();
        twin.id = format!("anm{i:06}-swap");
        corpus.push(pair);
        corpus.push(twin);
    }
    Ok(corpus)
}

#[derive(Debug, Clone, PartialEq)]
struct MetaRow {
    id: String,
    cause: (usize, usize),
    effect: (usize, usize),
    weight: f64,
}

fn parse_meta_row(file: &Path, line_no: usize, line: &str) -> Result<MetaRow, PairError> {
    let malformed = |reason: String| PairError::MalformedRow {
        file: file.to_path_buf(),
        line: line_no,
        reason,
    };
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 6 {
        return Err(malformed(format!("expected 6 fields, found {}", fields.len())));
    }
    let col = |s: &str| -> Result<usize, PairError> {
        match s.parse::<usize>() {
            Ok(c) if c >= 1 => Ok(c),
            _ => Err(malformed(format!("bad column index {s:?}"))),
        }
    };
    let weight: f64 = fields[5]
        .parse()
        .map_err(|_| malformed(format!("bad weight {:?}", fields[5])))?;
    if !(weight >= 0.0) || !weight.is_finite() {
        return Err(malformed(format!("negative or non-finite weight {weight}")));
    }
    Ok(MetaRow {
        id: fields[0].to_string(),
        cause: (col(fields[1])?, col(fields[2])?),
        effect: (col(fields[3])?, col(fields[4])?),
        weight,
    })
}

fn read_pair_columns(
    file: &Path,
    cause: usize,
    effect: usize,
) -> Result<(Vec<f64>, Vec<f64>), PairError> {
    let reader = BufReader::new(File::open(file).map_err(|e| PairError::io(file, e))?);
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| PairError::io(file, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| PairError::MalformedRow {
            file: file.to_path_buf(),
            line: i + 1,
            reason,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        let need = cause.max(effect);
        if fields.len() < need {
            return Err(malformed(format!(
                "expected at least {need} columns, found {}",
                fields.len()
            )));
        }
        let parse = |s: &str| -> Result<f64, PairError> {
            match s.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(malformed(format!("non-numeric value {s:?}"))),
            }
        };
        xs.push(parse(fields[cause - 1])?);
        ys.push(parse(fields[effect - 1])?);
    }
    Ok((xs, ys))
}

/// Load the univariate pairs of a Tübingen-format benchmark directory.
///
/// `dir` must hold `pairmeta.txt` (rows `NNNN cause_first cause_last
/// effect_first effect_last weight`, 1-based columns) and one
/// `pairNNNN.txt` per row. Pairs whose cause or effect spans several
/// columns are skipped. Every returned pair is labelled `XtoY` with the
/// cause as `xs`.
pub fn load_tubingen(dir: impl AsRef<Path>) -> Result<Vec<SamplePairSet>, PairError> {
    let dir = dir.as_ref();
    let meta_path = dir.join("pairmeta.txt");
    if !meta_path.is_file() {
        return Err(PairError::MissingMeta(dir.to_path_buf()));
    }
    let meta = fs::read_to_string(&meta_path).map_err(|e| PairError::io(&meta_path, e))?;
    let mut pairs = Vec::new();
    for (i, line) in meta.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = parse_meta_row(&meta_path, i + 1, line)?;
        if row.cause.0 != row.cause.1 || row.effect.0 != row.effect.1 {
            log::info!("skipping multivariate pair {}", row.id);
            continue;
        }
        let file = dir.join(format!("pair{}.txt", row.id));
        let (xs, ys) = read_pair_columns(&file, row.cause.0, row.effect.0)?;
        let pair = SamplePairSet::new(
            format!("pair{}", row.id),
            xs,
            ys,
            Direction::XtoY,
            row.weight,
        )
        .map_err(|e| PairError::MalformedRow {
            file: file.clone(),
            line: 0,
            reason: e.to_string(),
        })?;
        pairs.push(pair);
    }
    Ok(pairs)
}

/// Write pairs as JSON lines, one object per pair.
pub fn write_pairs_jsonl(path: impl AsRef<Path>, pairs: &[SamplePairSet]) -> Result<(), PairError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| PairError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in pairs {
        let line = serde_json::to_string(p).expect("pair serializes");
        writeln!(w, "{line}").map_err(|e| PairError::io(path, e))?;
    }
    w.flush().map_err(|e| PairError::io(path, e))
}

pub fn read_pairs_jsonl(path: impl AsRef<Path>) -> Result<Vec<SamplePairSet>, PairError> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path).map_err(|e| PairError::io(path, e))?);
    let mut pairs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| PairError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let pair = serde_json::from_str(&line).map_err(|e| PairError::MalformedRow {
            file: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        pairs.push(pair);
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair(xs: Vec<f64>, ys: Vec<f64>) -> SamplePairSet {
        SamplePairSet::new("t", xs, ys, Direction::XtoY, 1.0).unwrap()
    }

    #[test]
    fn standardize_linear_triplet() {
        let p = standardize_pair(&pair(vec![1.0, 2.0, 3.0], vec![2.0, 4.0, 6.0])).unwrap();
        // (v - 2) / sqrt(2/3)
        let expected = [-1.224_744_871_391_589, 0.0, 1.224_744_871_391_589];
        for (a, b) in p.xs.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in p.ys.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(p.direction, Direction::XtoY);
    }

    #[test]
    fn standardize_constant_is_zero_variance() {
        let err = standardize_pair(&pair(vec![5.0, 5.0, 5.0], vec![1.0, 2.0, 3.0])).unwrap_err();
        assert!(matches!(err, PairError::ZeroVariance { axis: Axis::X, .. }));
    }

    #[test]
    fn invariants_enforced() {
        assert!(SamplePairSet::new("a", vec![1.0], vec![1.0], Direction::XtoY, 1.0).is_err());
        assert!(SamplePairSet::new("a", vec![1.0, 2.0], vec![1.0], Direction::XtoY, 1.0).is_err());
        assert!(
            SamplePairSet::new("a", vec![1.0, f64::NAN], vec![1.0, 2.0], Direction::XtoY, 1.0)
                .is_err()
        );
        assert!(SamplePairSet::new("a", vec![1.0, 2.0], vec![1.0, 2.0], Direction::XtoY, -1.0)
            .is_err());
    }

    #[test]
    fn spline_interpolates_knots() {
        let s = NaturalSpline::new(vec![0.0, 1.0, 2.5, 4.0], vec![1.0, -2.0, 0.5, 3.0]);
        for (k, h) in s.knots.iter().zip(&s.heights) {
            assert!((s.eval(*k) - h).abs() < 1e-12);
        }
        // Two knots give the straight line through them.
        let line = NaturalSpline::new(vec![0.0, 2.0], vec![1.0, 5.0]);
        assert!((line.eval(0.5) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_noise_two_knot_mechanism_is_deterministic() {
        let cfg = SyntheticPairConfig {
            noise_scale_range: RealRange::new(0.0, 0.0),
            mechanism_knots_range: IntRange::new(2, 2),
            ..Default::default()
        };
        let p = generate_anm_pair(&cfg, &mut rng::seeded(11)).unwrap();
        // A 2-knot spline is affine and the noise is zero: y is +-x.
        let corr: f64 = p.xs.iter().zip(&p.ys).map(|(x, y)| x * y).sum::<f64>() / p.len() as f64;
        assert!((corr.abs() - 1.0).abs() < 1e-9, "corr = {corr}");
        for (x, y) in p.xs.iter().zip(&p.ys) {
            assert!((y - corr.signum() * x).abs() < 1e-9);
        }
    }

    #[test]
    fn generation_is_seeded() {
        let cfg = SyntheticPairConfig::default();
        let a = generate_anm_pair(&cfg, &mut rng::seeded(7)).unwrap();
        let b = generate_anm_pair(&cfg, &mut rng::seeded(7)).unwrap();
        assert_eq!(a, b);
        assert!(a.xs.iter().zip(&b.xs).all(|(u, v)| u.to_bits() == v.to_bits()));
    }

    #[test]
    fn single_knot_mechanism_fails_after_retries() {
        let cfg = SyntheticPairConfig {
            noise_scale_range: RealRange::new(0.0, 0.0),
            mechanism_knots_range: IntRange::new(1, 1),
            ..Default::default()
        };
        let err = generate_anm_pair(&cfg, &mut rng::seeded(1)).unwrap_err();
        assert!(matches!(err, PairError::GenerationFailure { attempts: 10 }));
    }

    #[test]
    fn generated_pairs_are_labelled_forward() {
        let cfg = SyntheticPairConfig {
            n_samples_range: IntRange::new(20, 40),
            ..Default::default()
        };
        let mut r = rng::seeded(5);
        let forward = (0..1000)
            .filter(|_| generate_anm_pair(&cfg, &mut r).unwrap().direction == Direction::XtoY)
            .count();
        assert_eq!(forward, 1000);
    }

    #[test]
    fn corpus_is_balanced_with_swapped_twins() {
        let cfg = SyntheticPairConfig {
            n_samples_range: IntRange::new(20, 30),
            ..Default::default()
        };
        let corpus = make_training_corpus(&cfg, 10).unwrap();
        assert_eq!(corpus.len(), 10);
        let fwd = corpus.iter().filter(|p| p.direction == Direction::XtoY).count();
        assert_eq!(fwd, 5);
        for twin in corpus.chunks(2) {
            assert_eq!(twin[1].xs, twin[0].ys);
            assert_eq!(twin[1].ys, twin[0].xs);
            assert_eq!(twin[1].direction, Direction::YtoX);
        }
        assert!(matches!(
            make_training_corpus(&cfg, 3),
            Err(PairError::InvalidCorpusSize(3))
        ));
    }

    #[test]
    fn config_validation() {
        let mut cfg = SyntheticPairConfig::default();
        cfg.mechanism_knots_range = IntRange::new(0, 3);
        assert!(cfg.validate().is_err());
        cfg = SyntheticPairConfig::default();
        cfg.noise_scale_range = RealRange::new(0.5, 0.1);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn tubingen_skips_multivariate_and_reports_rows() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("pairmeta.txt"),
            "0001 1 1 2 2 1.0\n0002 1 2 3 3 0.5\n0003 2 2 1 1 0.25\n",
        )
        .unwrap();
        fs::write(dir.path().join("pair0001.txt"), "1 2\n2 4.5\n3 7\n").unwrap();
        fs::write(dir.path().join("pair0003.txt"), "10 1\n20 2\n").unwrap();
        let pairs = load_tubingen(dir.path()).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].xs, vec![1.0, 2.0, 3.0]);
        // Cause in column 2.
        assert_eq!(pairs[1].xs, vec![1.0, 2.0]);
        assert_eq!(pairs[1].ys, vec![10.0, 20.0]);
        assert_eq!(pairs[1].weight, 0.25);

        fs::write(dir.path().join("pair0001.txt"), "1 2\n2 oops\n").unwrap();
        match load_tubingen(dir.path()).unwrap_err() {
            PairError::MalformedRow { file, line, .. } => {
                assert!(file.ends_with("pair0001.txt"));
                assert_eq!(line, 2);
            }
            e => panic!("unexpected {e}"),
        }
        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_tubingen(empty.path()),
            Err(PairError::MissingMeta(_))
        ));
    }

    #[test]
    fn jsonl_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        let pairs = vec![pair(vec![1.0, 2.0], vec![3.0, 4.5])];
        write_pairs_jsonl(&path, &pairs).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(r#"{"id":"t","direction":"XtoY","weight":1.0,"xs""#));
        assert_eq!(read_pairs_jsonl(&path).unwrap(), pairs);
        fs::write(&path, r#"{"id":"bad","direction":"XtoY","xs":[1],"ys":[2]}"#).unwrap();
        assert!(read_pairs_jsonl(&path).is_err());
    }

    proptest! {
        #[test]
        fn standardize_is_idempotent(
            xs in prop::collection::vec(-1e3f64..1e3, 2..50),
            ys in prop::collection::vec(-1e3f64..1e3, 2..50),
        ) {
            let n = xs.len().min(ys.len());
            let p = pair(xs[..n].to_vec(), ys[..n].to_vec());
            if let Ok(once) = standardize_pair(&p) {
                let twice = standardize_pair(&once).unwrap();
                for (a, b) in once.xs.iter().zip(&twice.xs).chain(once.ys.iter().zip(&twice.ys)) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
                let (m, s) = mean_and_std(&once.xs);
                prop_assert!(m.abs() < 1e-12);
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn corpus_balanced_for_even_sizes(half in 1usize..6, seed in 0u64..1000) {
            let cfg = SyntheticPairConfig {
                n_samples_range: IntRange::new(10, 20),
                rng_seed: seed,
                ..Default::default()
            };
            let corpus = make_training_corpus(&cfg, 2 * half).unwrap();
            let fwd = corpus.iter().filter(|p| p.direction == Direction::XtoY).count();
            prop_assert_eq!(fwd, half);
            prop_assert_eq!(corpus.len() - fwd, half);
        }
    }
}
