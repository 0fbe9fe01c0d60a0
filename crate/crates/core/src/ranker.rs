//! Exact cosine top-K search over a [`GalleryIndex`].
//!
//! Ordering is total: score descending, then gallery id ascending. Scoring is
//! split across rayon workers, each keeping a bounded heap of size `k`; the
//! merge sorts by the same total order, so the result does not depend on how
//! the gallery was partitioned.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::ComposedQuery;
use crate::store::{cosine_with_norms, Embedding, GalleryIndex};

/// Gallery chunk size per rayon task.
const CHUNK: usize = 2048;

#[derive(Debug, Error)]
pub enum RankError {
    #[error("gallery is empty after exclusions")]
    EmptyGallery,
    #[error("query dimension {query} does not match gallery dimension {gallery}")]
    DimMismatch { query: usize, gallery: usize },
    #[error("unknown gallery id {0:?}")]
    UnknownId(String),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("query vector has zero norm")]
    ZeroQuery,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub gallery_id: String,
    pub score: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateList {
    pub query_id: String,
    pub candidates: Vec<ScoredCandidate>,
    pub k: usize,
}

impl CandidateList {
    pub fn ids(&self) -> Vec<&str> {
        self.candidates.iter().map(|c| c.gallery_id.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    /// Builds a list from (id, score) pairs already in rank order.
    pub fn from_scored(query_id: impl Into<String>, items: Vec<(String, f64)>) -> Self {
        let k = items.len().max(1);
        let candidates = items
            .into_iter()
            .enumerate()
            .map(|(rank, (gallery_id, score))| ScoredCandidate { gallery_id, score, rank })
            .collect();
        Self {
            query_id: query_id.into(),
            candidates,
            k,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Hit<'a> {
    score: f64,
    id: &'a str,
}

impl Hit<'_> {
    /// `Less` means `self` ranks ahead of `other`.
    fn rank_cmp(&self, other: &Self) -> Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then_with(|| self.id.cmp(other.id))
    }
}

impl PartialEq for Hit<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.rank_cmp(other) == Ordering::Equal
    }
}
impl Eq for Hit<'_> {}
impl PartialOrd for Hit<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
// max-heap top = worst-ranked hit
impl Ord for Hit<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.rank_cmp(other)
    }
}

fn push_bounded<'a>(heap: &mut BinaryHeap<Hit<'a>>, hit: Hit<'a>, k: usize) {
    if heap.len() < k {
        heap.push(hit);
    } else if let Some(worst) = heap.peek() {
        if hit.rank_cmp(worst) == Ordering::Less {
            heap.pop();
            heap.push(hit);
        }
    }
}

fn query_norm(q: &Embedding, index: &GalleryIndex) -> Result<f64, RankError> {
    if q.dim() != index.dim() {
        return Err(RankError::DimMismatch {
            query: q.dim(),
            gallery: index.dim(),
        });
    }
    let n = q.norm();
    if n == 0.0 {
        return Err(RankError::ZeroQuery);
    }
    Ok(n)
}

fn finish(query_id: &str, mut hits: Vec<Hit<'_>>, k: usize) -> CandidateList {
    hits.sort_unstable_by(Hit::rank_cmp);
    hits.truncate(k);
    CandidateList {
        query_id: query_id.to_string(),
        candidates: hits
            .into_iter()
            .enumerate()
            .map(|(rank, h)| ScoredCandidate {
                gallery_id: h.id.to_string(),
                score: h.score,
                rank,
            })
            .collect(),
        k,
    }
}

/// Top-`k` search for a raw query vector.
pub fn rank_embedding(
    query_id: &str,
    q: &Embedding,
    index: &GalleryIndex,
    k: usize,
    exclude: &HashSet<String>,
) -> Result<CandidateList, RankError> {
    if k == 0 {
        return Err(RankError::ZeroK);
    }
    let qn = query_norm(q, index)?;
    let qv = q.as_slice();
    let positions: Vec<usize> = (0..index.len()).collect();
    let heaps: Vec<BinaryHeap<Hit<'_>>> = positions
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut heap = BinaryHeap::with_capacity(k.min(chunk.len()) + 1);
            for &pos in chunk {
                let (id, v, n) = index.entry(pos);
                if n == 0.0 || exclude.contains(id) {
                    continue;
                }
                let score = cosine_with_norms(qv, v, qn, n);
                push_bounded(&mut heap, Hit { score, id }, k);
            }
            heap
        })
        .collect();
    let merged: Vec<Hit<'_>> = heaps.into_iter().flat_map(BinaryHeap::into_vec).collect();
    if merged.is_empty() {
        return Err(RankError::EmptyGallery);
    }
    Ok(finish(query_id, merged, k))
}

/// Scores the whole gallery against `q.q_final` and keeps the best `k`.
pub fn global_rank(
    q: &ComposedQuery,
    index: &GalleryIndex,
    k: usize,
    exclude: &HashSet<String>,
) -> Result<CandidateList, RankError> {
    rank_embedding(&q.query_id, &q.q_final, index, k, exclude)
}

/// Scores only `subset` (a restricted candidate pool) and sorts all of it.
pub fn rank_subset_embedding(
    query_id: &str,
    q: &Embedding,
    index: &GalleryIndex,
    subset: &[String],
) -> Result<CandidateList, RankError> {
    let qn = query_norm(q, index)?;
    let mut seen = HashSet::with_capacity(subset.len());
    let mut hits = Vec::with_capacity(subset.len());
    for id in subset {
        let pos = index.position(id).ok_or_else(|| RankError::UnknownId(id.clone()))?;
        if !seen.insert(id.as_str()) {
            continue;
        }
        let (id, v, n) = index.entry(pos);
        let score = if n == 0.0 { -1.0 } else { cosine_with_norms(q.as_slice(), v, qn, n) };
        hits.push(Hit { score, id });
    }
    if hits.is_empty() {
        return Err(RankError::EmptyGallery);
    }
    let k = hits.len();
    Ok(finish(query_id, hits, k))
}

pub fn rank_subset(q: &ComposedQuery, index: &GalleryIndex, subset: &[String]) -> Result<CandidateList, RankError> {
    rank_subset_embedding(&q.query_id, &q.q_final, index, subset)
}

// ---------------------------------------------------------------------------
// Ranking dump: one JSON object per line, scores with 6 decimals.
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
struct DumpLine {
    query_id: String,
    candidates: Vec<DumpCandidate>,
}

#[derive(Deserialize)]
struct DumpCandidate {
    id: String,
    score: f64,
}

/// Formats one ranking dump line (no trailing newline).
pub fn dump_line(list: &CandidateList) -> String {
    let mut s = String::with_capacity(32 + list.candidates.len() * 32);
    s.push_str("{\"query_id\":");
    s.push_str(&serde_json::to_string(&list.query_id).expect("string serializes"));
    s.push_str(",\"candidates\":[");
    for (i, c) in list.candidates.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        s.push_str("{\"id\":");
        s.push_str(&serde_json::to_string(&c.gallery_id).expect("string serializes"));
        // -0.000000 is valid JSON but normalize it anyway
        let score = if c.score.abs() < 5e-7 { 0.0 } else { c.score };
        s.push_str(&format!(",\"score\":{score:.6}}}"));
    }
    s.push_str("]}");
    s
}

pub fn write_rankings<'a, W, I>(mut w: W, lists: I) -> std::io::Result<()>
where
    W: Write,
    I: IntoIterator<Item = &'a CandidateList>,
{
    for list in lists {
        writeln!(w, "{}", dump_line(list))?;
    }
    w.flush()
}

pub fn read_rankings<R: BufRead>(r: R) -> anyhow::Result<Vec<CandidateList>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: DumpLine = serde_json::from_str(&line)
            .map_err(|e| anyhow::anyhow!("ranking dump line {}: {e}", n + 1))?;
        out.push(CandidateList::from_scored(
            parsed.query_id,
            parsed.candidates.into_iter().map(|c| (c.id, c.score)).collect(),
        ));
    }
    Ok(out)
}
