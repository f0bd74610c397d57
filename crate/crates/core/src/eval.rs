//! Leave-one-out retrieval metrics: Recall@K (identical to CMC@K) and mAP.
//!
//! Each sample queries a gallery of all other samples ranked by ascending
//! Euclidean distance; equal distances are ordered by ascending gallery
//! index.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{forward, ModelParams};
use crate::numerics::{pairwise_distances, Matrix};

pub const DEFAULT_KS: [usize; 6] = [1, 2, 4, 8, 16, 32];
const EMBED_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub recall_at: BTreeMap<usize, f64>,
    pub map_score: f64,
    /// 1-based rank of the first same-class gallery item per query.
    pub per_query_ranks: Vec<usize>,
}

impl RetrievalResult {
    /// Fraction of queries whose first correct match is within the top `k`.
    pub fn cmc(&self, k: usize) -> f64 {
        let hits = self.per_query_ranks.iter().filter(|&&r| r <= k).count();
        hits as f64 / self.per_query_ranks.len() as f64
    }

    /// CMC@1..=max_k.
    pub fn cmc_curve(&self, max_k: usize) -> Vec<f64> {
        (1..=max_k).map(|k| self.cmc(k)).collect()
    }
}

/// Mean over relevant positions of (relevant items so far / position).
pub fn average_precision(relevant_in_rank_order: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (pos, _) in relevant_in_rank_order
        .iter()
        .enumerate()
        .filter(|(_, &r)| r)
    {
        hits += 1;
        sum += hits as f64 / (pos + 1) as f64;
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

pub fn evaluate(embeddings: &Matrix, labels: &[usize], ks: &[usize]) -> Result<RetrievalResult> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::config(
            "ks",
            "need a non-empty list of positive K values",
        ));
    }
    let n = embeddings.rows();
    if labels.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{n} embeddings but {} labels",
            labels.len()
        )));
    }
    let mut class_sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for &y in labels {
        *class_sizes.entry(y).or_default() += 1;
    }
    if let Some(query) = labels.iter().position(|y| class_sizes[y] < 2) {
        return Err(Error::NoPositiveInGallery {
            query,
            label: labels[query],
        });
    }

    let d = pairwise_distances(embeddings)?;
    let mut ranks = Vec::with_capacity(n);
    let mut ap_sum = 0.0;
    let mut gallery: Vec<usize> = Vec::with_capacity(n.saturating_sub(1));
    let mut relevant: Vec<bool> = Vec::with_capacity(n.saturating_sub(1));
    for q in 0..n {
        gallery.clear();
        gallery.extend((0..n).filter(|&g| g != q));
        gallery.sort_by(|&a, &b| d.get(q, a).total_cmp(&d.get(q, b)).then(a.cmp(&b)));

        relevant.clear();
        relevant.extend(gallery.iter().map(|&g| labels[g] == labels[q]));
        let first = relevant
            .iter()
            .position(|&r| r)
            .expect("class size checked above");
        ranks.push(first + 1);
        ap_sum += average_precision(&relevant);
    }

    let mut result = RetrievalResult {
        recall_at: BTreeMap::new(),
        map_score: ap_sum / n as f64,
        per_query_ranks: ranks,
    };
    for &k in ks {
        let r = result.cmc(k);
        result.recall_at.insert(k, r);
    }
    Ok(result)
}

/// Embeds every row of the dataset, preserving row order.
pub fn embed_dataset(params: &ModelParams, ds: &Dataset) -> Result<Matrix> {
    let n = ds.len();
    let mut data = Vec::with_capacity(n * params.dims().embed);
    let mut start = 0;
    while start < n {
        let end = (start + EMBED_CHUNK).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let cache = forward(params, &ds.features.select_rows(&idx))?;
        data.extend_from_slice(cache.embeddings.as_slice());
        start = end;
    }
    Matrix::new(n, params.dims().embed, data)
}
