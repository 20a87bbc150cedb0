//! Cross-camera retrieval evaluation: Euclidean distance matrix, cumulative
//! matching characteristic, and mean average precision.
//!
//! Junk filtering follows the usual open-set protocol: a gallery item that
//! shares both identity and camera with the query is dropped from its ranked
//! list. A correct match is the same identity seen from a different camera.
//! Queries with no valid match are skipped and excluded from both the CMC
//! and mAP denominators, but reported.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{extract_embedding, ModelConfig, Params};
use crate::tensor::Tensor;

/// `(identity, camera)` metadata for a query or gallery item.
pub type ItemMeta = (usize, usize);

/// CMC curve, mAP, per-query average precisions, and skipped queries.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    /// `cmc[k - 1]` is the fraction of evaluated queries whose first correct
    /// match appears at rank `<= k` (1-indexed ranks).
    pub cmc: Vec<f64>,
    pub map: f64,
    pub per_query_ap: Vec<(usize, f64)>,
    pub skipped_queries: Vec<usize>,
}

impl RankingResult {
    /// CMC at 1-indexed rank `k`, saturating beyond the computed range.
    pub fn cmc_at(&self, k: usize) -> f64 {
        assert!(k >= 1, "ranks are 1-indexed");
        self.cmc[(k - 1).min(self.cmc.len() - 1)]
    }

    /// The key-value report block: `cmc_1`, `cmc_5`, `cmc_10`, `map`,
    /// `skipped`.
    pub fn report_block(&self) -> String {
        let mut out = String::new();
        writeln!(out, "cmc_1 = {:.4}", self.cmc_at(1)).unwrap();
        writeln!(out, "cmc_5 = {:.4}", self.cmc_at(5)).unwrap();
        writeln!(out, "cmc_10 = {:.4}", self.cmc_at(10)).unwrap();
        writeln!(out, "map = {:.4}", self.map).unwrap();
        writeln!(out, "skipped = {}", self.skipped_queries.len()).unwrap();
        out
    }

    /// Per-query AP table as CSV with a header row.
    pub fn write_per_query_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("query_index,average_precision\n");
        for (idx, ap) in &self.per_query_ap {
            writeln!(out, "{idx},{ap}").unwrap();
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Pairwise Euclidean distances, `[Q x G]`.
pub fn distance_matrix(queries: &[Tensor], gallery: &[Tensor]) -> Result<Tensor> {
    if queries.is_empty() || gallery.is_empty() {
        return Err(Error::Config("distance matrix needs non-empty sides".into()));
    }
    let dim = queries[0].len();
    for e in queries.iter().chain(gallery) {
        if e.rank() != 1 || e.len() != dim {
            return Err(Error::shape(
                "distance_matrix",
                format!("embedding {:?} vs dimension {dim}", e.shape()),
            ));
        }
    }
    let mut dist = Tensor::zeros(&[queries.len(), gallery.len()]);
    for (q, qe) in queries.iter().enumerate() {
        for (g, ge) in gallery.iter().enumerate() {
            let sq: f64 = qe
                .data()
                .iter()
                .zip(ge.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            *dist.at2_mut(q, g) = sq.sqrt();
        }
    }
    Ok(dist)
}

/// Evaluates a distance matrix under the cross-camera protocol.
///
/// Per query: the gallery is sorted by ascending distance with ties broken by
/// ascending gallery index, junk entries (same identity and same camera) are
/// dropped, AP is the mean of the precision at each true-positive rank, and
/// the CMC counts the rank of the first true positive.
pub fn evaluate_protocol(
    dist: &Tensor,
    query_meta: &[ItemMeta],
    gallery_meta: &[ItemMeta],
    max_rank: usize,
) -> Result<RankingResult> {
    if max_rank < 1 {
        return Err(Error::Config("max_rank must be at least 1".into()));
    }
    if dist.rank() != 2 {
        return Err(Error::shape("evaluate_protocol", format!("{:?}", dist.shape())));
    }
    let (nq, ng) = (dist.shape()[0], dist.shape()[1]);
    if query_meta.len() != nq || gallery_meta.len() != ng {
        return Err(Error::shape(
            "evaluate_protocol",
            format!(
                "meta lengths {} / {} vs distance matrix {:?}",
                query_meta.len(),
                gallery_meta.len(),
                dist.shape()
            ),
        ));
    }

    let mut first_match_hist = vec![0usize; max_rank];
    let mut per_query_ap = Vec::new();
    let mut skipped = Vec::new();
    for (q, &(q_id, q_cam)) in query_meta.iter().enumerate() {
        let mut order: Vec<usize> = (0..ng).collect();
        order.sort_by(|&a, &b| {
            dist.at2(q, a)
                .partial_cmp(&dist.at2(q, b))
                .expect("finite distances")
                .then(a.cmp(&b))
        });

        let mut rank = 0usize; // rank within the junk-filtered list
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        let mut first_match: Option<usize> = None;
        for &g in &order {
            let (g_id, g_cam) = gallery_meta[g];
            if g_id == q_id && g_cam == q_cam {
                continue; // junk
            }
            rank += 1;
            if g_id == q_id {
                hits += 1;
                precision_sum += hits as f64 / rank as f64;
                first_match.get_or_insert(rank);
            }
        }
        match first_match {
            None => skipped.push(q),
            Some(r) => {
                if r <= max_rank {
                    first_match_hist[r - 1] += 1;
                }
                per_query_ap.push((q, precision_sum / hits as f64));
            }
        }
    }
    let evaluated = per_query_ap.len();
    if evaluated == 0 {
        return Err(Error::Config(
            "every query was skipped: no valid cross-camera match in the gallery".into(),
        ));
    }
    let mut cmc = Vec::with_capacity(max_rank);
    let mut acc = 0usize;
    for count in first_match_hist {
        acc += count;
        cmc.push(acc as f64 / evaluated as f64);
    }
    let map = per_query_ap.iter().map(|(_, ap)| ap).sum::<f64>() / evaluated as f64;
    Ok(RankingResult {
        cmc,
        map,
        per_query_ap,
        skipped_queries: skipped,
    })
}

/// Extracts embeddings for the query and gallery splits of a dataset and
/// evaluates the protocol at `max_rank`.
pub fn evaluate_model(
    params: &Params,
    cfg: &ModelConfig,
    samples: &[crate::dataset::Sample],
    max_rank: usize,
) -> Result<RankingResult> {
    use crate::dataset::Split;
    let mut queries = Vec::new();
    let mut query_meta = Vec::new();
    let mut gallery = Vec::new();
    let mut gallery_meta = Vec::new();
    for s in samples {
        match s.split {
            Split::Query => {
                queries.push(extract_embedding(params, cfg, &s.image)?);
                query_meta.push((s.identity, s.camera));
            }
            Split::Gallery => {
                gallery.push(extract_embedding(params, cfg, &s.image)?);
                gallery_meta.push((s.identity, s.camera));
            }
            Split::Train => {}
        }
    }
    if queries.is_empty() || gallery.is_empty() {
        return Err(Error::Config(
            "dataset needs non-empty query and gallery splits".into(),
        ));
    }
    let dist = distance_matrix(&queries, &gallery)?;
    evaluate_protocol(&dist, &query_meta, &gallery_meta, max_rank)
}
