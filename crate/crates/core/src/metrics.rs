//! Retrieval evaluation: CMC curve and mean average precision.

use std::cmp::Ordering;
use std::fmt::Write as _;

use crate::error::{dim_err, Error, Result};
use crate::kernels::map_range;
use crate::tensor::{Scalar, Tensor};

/// Labeled query and gallery embeddings.
#[derive(Debug, Clone)]
pub struct EmbeddingGallery {
    pub query: Tensor<f64>,
    pub query_ids: Vec<usize>,
    pub query_cams: Vec<usize>,
    pub gallery: Tensor<f64>,
    pub gallery_ids: Vec<usize>,
    pub gallery_cams: Vec<usize>,
}

impl EmbeddingGallery {
    pub fn new<T: Scalar>(
        query: &Tensor<T>,
        query_ids: Vec<usize>,
        query_cams: Vec<usize>,
        gallery: &Tensor<T>,
        gallery_ids: Vec<usize>,
        gallery_cams: Vec<usize>,
    ) -> Result<Self> {
        if query.rank() != 2 || gallery.rank() != 2 || query.shape()[1] != gallery.shape()[1] {
            return Err(dim_err(format!(
                "query {:?} and gallery {:?} embeddings must be [n, D] with equal D",
                query.shape(),
                gallery.shape()
            )));
        }
        if query_ids.len() != query.shape()[0] || query_cams.len() != query.shape()[0] {
            return Err(dim_err("query labels do not match query count"));
        }
        if gallery_ids.len() != gallery.shape()[0] || gallery_cams.len() != gallery.shape()[0] {
            return Err(dim_err("gallery labels do not match gallery count"));
        }
        Ok(Self { query: query.cast(), query_ids, query_cams, gallery: gallery.cast(), gallery_ids, gallery_cams })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    Plain,
    /// Gallery entries sharing both identity and camera with the query are
    /// dropped from its ranking.
    CrossCamera,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    /// `cmc[r-1]` is the rank-r accuracy; length = gallery size.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub per_query_ap: Vec<f64>,
}

pub const REPORT_KEYS: [&str; 5] = ["r1", "r5", "r10", "r20", "map"];

impl RetrievalResult {
    /// Rank-r accuracy; ranks beyond the gallery size clamp to the last entry.
    pub fn rank(&self, r: usize) -> f64 {
        self.cmc[r.clamp(1, self.cmc.len()) - 1]
    }

    pub fn key_values(&self) -> Vec<(&'static str, f64)> {
        vec![("r1", self.rank(1)), ("r5", self.rank(5)), ("r10", self.rank(10)), ("r20", self.rank(20)), ("map", self.map)]
    }

    /// `key = value` lines, one per report key.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.key_values() {
            let _ = writeln!(s, "{k} = {v:.6}");
        }
        s
    }

    pub fn to_text(&self) -> String {
        format!(
            "R-1 {:6.2}%  R-5 {:6.2}%  R-10 {:6.2}%  R-20 {:6.2}%  mAP {:6.2}%  ({} queries)",
            100.0 * self.rank(1),
            100.0 * self.rank(5),
            100.0 * self.rank(10),
            100.0 * self.rank(20),
            100.0 * self.map,
            self.per_query_ap.len()
        )
    }
}

/// Pairwise Euclidean distances `[nq × ng]`, computed from direct differences.
pub fn distance_matrix<T: Scalar>(q: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<f64>> {
    if q.rank() != 2 || g.rank() != 2 || q.shape()[1] != g.shape()[1] {
        return Err(dim_err(format!("distance between {:?} and {:?}", q.shape(), g.shape())));
    }
    let (nq, ng) = (q.shape()[0], g.shape()[0]);
    let rows = map_range(nq, |i| {
        (0..ng)
            .map(|j| {
                q.row(i)
                    .iter()
                    .zip(g.row(j))
                    .map(|(&a, &b)| {
                        let d = a.as_f64() - b.as_f64();
                        d * d
                    })
                    .sum::<f64>()
                    .sqrt()
            })
            .collect::<Vec<f64>>()
    });
    Tensor::new(&[nq, ng], rows.concat())
}

/// Gallery indices sorted by ascending distance, ties by gallery index.
pub fn ranking(dist_row: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dist_row.len()).collect();
    idx.sort_by(|&a, &b| dist_row[a].partial_cmp(&dist_row[b]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    idx
}

pub fn evaluate(gal: &EmbeddingGallery, protocol: Protocol) -> Result<RetrievalResult> {
    let dist = distance_matrix(&gal.query, &gal.gallery)?;
    evaluate_distances(&dist, gal, protocol)
}

/// Score a precomputed distance matrix.
pub fn evaluate_distances(dist: &Tensor<f64>, gal: &EmbeddingGallery, protocol: Protocol) -> Result<RetrievalResult> {
    let (nq, ng) = (gal.query_ids.len(), gal.gallery_ids.len());
    if dist.shape() != [nq, ng] {
        return Err(dim_err(format!("distance matrix {:?} for {nq} queries and {ng} gallery entries", dist.shape())));
    }
    if nq == 0 {
        return Err(Error::EmptySet("no queries".into()));
    }
    let per_query: Vec<Result<(usize, f64)>> = map_range(nq, |qi| {
        let (qid, qcam) = (gal.query_ids[qi], gal.query_cams[qi]);
        let order = ranking(dist.row(qi));
        let mut pos = 0usize;
        let mut hits = 0usize;
        let mut first = None;
        let mut ap = 0.0;
        for gi in order {
            let same_id = gal.gallery_ids[gi] == qid;
            if protocol == Protocol::CrossCamera && same_id && gal.gallery_cams[gi] == qcam {
                continue;
            }
            pos += 1;
            if same_id {
                hits += 1;
                first.get_or_insert(pos);
                ap += hits as f64 / pos as f64;
            }
        }
        match first {
            Some(f) => Ok((f, ap / hits as f64)),
            None => Err(Error::Protocol { query: qi }),
        }
    });
    let mut cmc = vec![0.0; ng];
    let mut aps = Vec::with_capacity(nq);
    for r in per_query {
        let (first, ap) = r?;
        for c in &mut cmc[first - 1..] {
            *c += 1.0;
        }
        aps.push(ap);
    }
    cmc.iter_mut().for_each(|c| *c /= nq as f64);
    let map = aps.iter().sum::<f64>() / nq as f64;
    Ok(RetrievalResult { cmc, map, per_query_ap: aps })
}
