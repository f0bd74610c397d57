//! Online pair construction, soft mining scores and class-aware attention.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, DistanceMatrix, Matrix};

/// Pair weighting scheme; one per ablation arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Every pair weighted 1.
    Baseline,
    /// Soft mining scores only.
    Osm,
    /// Soft mining scores times pair attention.
    OsmCaa,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Baseline, Mode::Osm, Mode::OsmCaa];

    pub fn uses_caa(self) -> bool {
        matches!(self, Mode::OsmCaa)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Osm => "osm",
            Mode::OsmCaa => "osm-caa",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "osm" => Ok(Mode::Osm),
            "osm-caa" | "osm+caa" => Ok(Mode::OsmCaa),
            other => Err(Error::config(
                "mode",
                format!("`{other}` is not one of baseline, osm, osm-caa"),
            )),
        }
    }
}

/// Which representation the attention softmax sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum CaaInput {
    /// The unit-norm embeddings used for distances.
    #[default]
    Normalized,
    /// The network output before normalization.
    Raw,
}

impl FromStr for CaaInput {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normalized" => Ok(CaaInput::Normalized),
            "raw" => Ok(CaaInput::Raw),
            other => Err(Error::config(
                "caa_input",
                format!("`{other}` is not one of normalized, raw"),
            )),
        }
    }
}

impl fmt::Display for CaaInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CaaInput::Normalized => "normalized",
            CaaInput::Raw => "raw",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiningConfig {
    pub sigma_osm: f64,
    pub alpha: f64,
    pub sigma_caa: f64,
    pub caa_input: CaaInput,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            sigma_osm: 0.8,
            alpha: 1.2,
            sigma_caa: 0.18,
            caa_input: CaaInput::Normalized,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("sigma_osm", self.sigma_osm),
            ("alpha", self.alpha),
            ("sigma_caa", self.sigma_caa),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(field, format!("must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Context vectors `c_k`, one row per training class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassContext {
    pub vectors: Matrix,
}

impl ClassContext {
    pub fn new(vectors: Matrix) -> Result<Self> {
        if vectors.rows() == 0 {
            return Err(Error::DimensionMismatch(
                "context needs at least one class".into(),
            ));
        }
        if !vectors.is_finite() {
            return Err(Error::NonFinite("context vectors".into()));
        }
        Ok(Self { vectors })
    }

    pub fn num_classes(&self) -> usize {
        self.vectors.rows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }
}

/// Unordered index pairs `(i, j)`, `i < j`, split by label agreement.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSets {
    pub positives: Vec<(usize, usize)>,
    pub negatives: Vec<(usize, usize)>,
}

impl PairSets {
    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// All `m(m-1)/2` pairs, each routed by whether the labels match.
pub fn construct_pairs(labels: &[usize]) -> PairSets {
    let m = labels.len();
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for i in 0..m {
        for j in (i + 1)..m {
            if labels[i] == labels[j] {
                positives.push((i, j));
            } else {
                negatives.push((i, j));
            }
        }
    }
    PairSets {
        positives,
        negatives,
    }
}

/// Gaussian of the distance, `exp(-d^2 / sigma^2)`.
pub fn osm_positive_score(d: f64, sigma_osm: f64) -> f64 {
    (-(d * d) / (sigma_osm * sigma_osm)).exp()
}

/// Margin hinge, `max(0, alpha - d)`.
pub fn osm_negative_score(d: f64, alpha: f64) -> f64 {
    (alpha - d).max(0.0)
}

pub fn osm_positive_scores(d: &DistanceMatrix, pairs: &PairSets, cfg: &MiningConfig) -> Vec<f64> {
    pairs
        .positives
        .iter()
        .map(|&(i, j)| osm_positive_score(d.get(i, j), cfg.sigma_osm))
        .collect()
}

pub fn osm_negative_scores(d: &DistanceMatrix, pairs: &PairSets, cfg: &MiningConfig) -> Vec<f64> {
    pairs
        .negatives
        .iter()
        .map(|&(i, j)| osm_negative_score(d.get(i, j), cfg.alpha))
        .collect()
}

pub(crate) fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().position(|&y| y >= classes) {
        Some(sample) => Err(Error::LabelOutOfRange {
            sample,
            label: labels[sample],
            classes,
        }),
        None => Ok(()),
    }
}

/// Row-wise softmax of `f_i . c_k / sigma` over all classes (m x C).
pub fn class_softmax(f: &Matrix, ctx: &ClassContext, sigma_caa: f64) -> Result<Matrix> {
    if f.cols() != ctx.dim() {
        return Err(Error::DimensionMismatch(format!(
            "embedding width {} vs context width {}",
            f.cols(),
            ctx.dim()
        )));
    }
    let classes = ctx.num_classes();
    let mut probs = Matrix::zeros(f.rows(), classes);
    for i in 0..f.rows() {
        let row = probs.row_mut(i);
        for (k, p) in row.iter_mut().enumerate() {
            *p = dot(f.row(i), ctx.vectors.row(k)) / sigma_caa;
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for p in row.iter_mut() {
            *p = (*p - max).exp();
            total += *p;
        }
        row.iter_mut().for_each(|p| *p /= total);
    }
    Ok(probs)
}

/// Per-image attention `a_i`: the softmax probability of the image's own label.
pub fn caa_scores(
    f: &Matrix,
    labels: &[usize],
    ctx: &ClassContext,
    cfg: &MiningConfig,
) -> Result<Vec<f64>> {
    check_labels(labels, ctx.num_classes())?;
    let probs = class_softmax(f, ctx, cfg.sigma_caa)?;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &y)| probs.get(i, y))
        .collect())
}

/// `a_ij = min(a_i, a_j)` over a pair list.
pub fn pair_caa(a_img: &[f64], pairs: &[(usize, usize)]) -> Vec<f64> {
    pairs.iter().map(|&(i, j)| a_img[i].min(a_img[j])).collect()
}

/// Every score and weight attached to one batch's pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairWeights {
    pub s_pos: Vec<f64>,
    pub s_neg: Vec<f64>,
    pub a_img: Vec<f64>,
    pub a_pair_pos: Vec<f64>,
    pub a_pair_neg: Vec<f64>,
    pub w_pos: Vec<f64>,
    pub w_neg: Vec<f64>,
}

/// Combines scores into pair weights for the given mode.
///
/// Baseline fixes every weight to 1, OSM uses the scores, OSM+CAA multiplies
/// scores by pair attention. The inputs are stored either way so dumps are
/// comparable across modes.
pub fn combine_weights(
    s_pos: Vec<f64>,
    s_neg: Vec<f64>,
    a_img: Vec<f64>,
    pairs: &PairSets,
    mode: Mode,
) -> PairWeights {
    debug_assert_eq!(s_pos.len(), pairs.positives.len());
    debug_assert_eq!(s_neg.len(), pairs.negatives.len());
    let a_pair_pos = pair_caa(&a_img, &pairs.positives);
    let a_pair_neg = pair_caa(&a_img, &pairs.negatives);
    let (w_pos, w_neg) = match mode {
        Mode::Baseline => (vec![1.0; s_pos.len()], vec![1.0; s_neg.len()]),
        Mode::Osm => (s_pos.clone(), s_neg.clone()),
        Mode::OsmCaa => (
            s_pos.iter().zip(&a_pair_pos).map(|(s, a)| s * a).collect(),
            s_neg.iter().zip(&a_pair_neg).map(|(s, a)| s * a).collect(),
        ),
    };
    PairWeights {
        s_pos,
        s_neg,
        a_img,
        a_pair_pos,
        a_pair_neg,
        w_pos,
        w_neg,
    }
}

/// Scores and weights for a batch from its distances and attention inputs.
///
/// `caa_features` are the vectors the attention softmax sees (see
/// [`CaaInput`]).
pub fn mine(
    d: &DistanceMatrix,
    caa_features: &Matrix,
    labels: &[usize],
    ctx: &ClassContext,
    pairs: &PairSets,
    cfg: &MiningConfig,
    mode: Mode,
) -> Result<PairWeights> {
    let s_pos = osm_positive_scores(d, pairs, cfg);
    let s_neg = osm_negative_scores(d, pairs, cfg);
    let a_img = caa_scores(caa_features, labels, ctx, cfg)?;
    Ok(combine_weights(s_pos, s_neg, a_img, pairs, mode))
}

#[derive(Serialize)]
struct WeightDump<'a> {
    positives: &'a [(usize, usize)],
    negatives: &'a [(usize, usize)],
    #[serde(flatten)]
    weights: &'a PairWeights,
}

/// JSON document with the pair index lists and every score array.
pub fn weights_to_json(weights: &PairWeights, pairs: &PairSets) -> serde_json::Value {
    serde_json::to_value(WeightDump {
        positives: &pairs.positives,
        negatives: &pairs.negatives,
        weights,
    })
    .expect("weight dump is always serializable")
}
