//! Retrieval evaluation: average precision, mAP and CMC under the cross-camera protocol.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{squared_distance, Tensor};

/// Ranks reported by [`evaluate_reid`].
pub const CMC_RANKS: [usize; 3] = [1, 5, 10];

/// Mean of precision@k over the relevant positions of a ranked list.
pub fn average_precision(relevance: &[bool]) -> Result<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &rel) in relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(Error::NoRelevant);
    }
    Ok(sum / hits as f64)
}

/// Identity and camera of a query or gallery entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalMeta {
    pub identity: usize,
    pub camera: usize,
}

/// One query's filtered gallery ranking.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedResult {
    pub query_index: usize,
    /// Gallery indices by ascending distance, ties by index.
    pub gallery_order: Vec<usize>,
    pub relevance: Vec<bool>,
}

impl RankedResult {
    /// 0-based rank of the first relevant entry.
    pub fn first_hit(&self) -> Option<usize> {
        self.relevance.iter().position(|&r| r)
    }
}

/// Ranks the gallery for one query, dropping same-identity same-camera entries.
pub fn rank_query(query_index: usize, query: &[f64], meta: EvalMeta, gallery: &Tensor, gallery_meta: &[EvalMeta]) -> RankedResult {
    let mut scored: Vec<(f64, usize)> = (0..gallery.dim(0))
        .filter(|&g| !(gallery_meta[g].identity == meta.identity && gallery_meta[g].camera == meta.camera))
        .map(|g| (squared_distance(query, gallery.row(g)), g))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let relevance = scored
        .iter()
        .map(|&(_, g)| gallery_meta[g].identity == meta.identity)
        .collect();
    RankedResult {
        query_index,
        gallery_order: scored.into_iter().map(|(_, g)| g).collect(),
        relevance,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub map: f64,
    /// Rank `k` to the fraction of queries whose first match is within the top `k`.
    pub cmc: BTreeMap<usize, f64>,
    pub num_query: usize,
    pub num_gallery: usize,
    /// Queries with at least one relevant gallery entry; the denominator of both metrics.
    pub num_valid_queries: usize,
}

impl EvalResult {
    pub fn rank(&self, k: usize) -> f64 {
        self.cmc[&k]
    }
}

pub fn evaluate_reid(query: &Tensor, query_meta: &[EvalMeta], gallery: &Tensor, gallery_meta: &[EvalMeta]) -> Result<EvalResult> {
    if gallery.is_empty() || gallery.dim(0) == 0 {
        return Err(Error::EmptyGallery);
    }
    if query.dim(1) != gallery.dim(1) {
        return Err(Error::DimensionMismatch(query.dim(1), gallery.dim(1)));
    }
    if query.dim(0) != query_meta.len() || gallery.dim(0) != gallery_meta.len() {
        return Err(Error::ShapeMismatch("feature rows and metadata differ in length".into()));
    }
    let mut ap_sum = 0.0;
    let mut hits_at = vec![0usize; CMC_RANKS.len()];
    let mut valid = 0usize;
    for (q, meta) in query_meta.iter().enumerate() {
        let ranked = rank_query(q, query.row(q), *meta, gallery, gallery_meta);
        let Some(first) = ranked.first_hit() else {
            continue;
        };
        valid += 1;
        ap_sum += average_precision(&ranked.relevance)?;
        for (slot, &k) in hits_at.iter_mut().zip(&CMC_RANKS) {
            if first < k {
                *slot += 1;
            }
        }
    }
    if valid == 0 {
        return Err(Error::NoRelevant);
    }
    Ok(EvalResult {
        map: ap_sum / valid as f64,
        cmc: CMC_RANKS
            .iter()
            .zip(hits_at)
            .map(|(&k, h)| (k, h as f64 / valid as f64))
            .collect(),
        num_query: query.dim(0),
        num_gallery: gallery.dim(0),
        num_valid_queries: valid,
    })
}

/// Contents of `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    #[serde(rename = "mAP")]
    pub map: f64,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub num_query: usize,
    pub num_gallery: usize,
    pub config_hash: String,
}

impl MetricsReport {
    pub fn new(result: &EvalResult, config_hash: impl Into<String>) -> Self {
        MetricsReport {
            map: result.map,
            rank1: result.rank(1),
            rank5: result.rank(5),
            rank10: result.rank(10),
            num_query: result.num_query,
            num_gallery: result.num_gallery,
            config_hash: config_hash.into(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Reads and checks a report: every field present, metrics finite and in `[0, 1]`.
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let report: MetricsReport = serde_json::from_str(&text)?;
        for (name, v) in [("mAP", report.map), ("rank1", report.rank1), ("rank5", report.rank5), ("rank10", report.rank10)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("metrics.json: {name} = {v} outside [0, 1]")));
            }
        }
        Ok(report)
    }
}
