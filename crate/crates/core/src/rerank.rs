//! Turning an MLLM completion into a window permutation.
//!
//! The model returns (possibly partial) label indices `π'`. Indices the model
//! omitted keep their initial order and follow `π'`, giving the full window
//! permutation `π = π' ⊕ π_rem`.

use std::collections::HashSet;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ranker::{CandidateList, ScoredCandidate};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RerankError {
    #[error("duplicate index {0} in partial ranking")]
    DuplicateIndex(usize),
    #[error("index {index} out of range for window of {k}")]
    IndexOutOfRange { index: usize, k: usize },
    #[error("permutation length {perm} does not match candidate count {candidates}")]
    LengthMismatch { perm: usize, candidates: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RerankStatus {
    /// The model ranked every candidate.
    Full,
    /// The model ranked a nonempty subset; the rest were appended.
    Partial,
    /// No usable completion (API failure after retries); initial order kept.
    Skipped,
    /// A completion arrived but contained no usable index; initial order kept.
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankOutcome {
    pub query_id: String,
    pub status: RerankStatus,
    pub pi_prime: Vec<usize>,
    pub pi_final: Vec<usize>,
    pub raw_completion: String,
}

impl RerankOutcome {
    /// Builds the outcome for a completion over a window of `k` candidates.
    pub fn from_completion(query_id: impl Into<String>, completion: &str, k: usize) -> Self {
        let pi_prime = parse_indices(completion, k);
        let pi_final = merge_ranking(&pi_prime, k).expect("parse_indices output is deduplicated and in range");
        let status = if pi_prime.is_empty() {
            RerankStatus::Fallback
        } else if pi_prime.len() == k {
            RerankStatus::Full
        } else {
            RerankStatus::Partial
        };
        Self {
            query_id: query_id.into(),
            status,
            pi_prime,
            pi_final,
            raw_completion: completion.to_string(),
        }
    }

    /// Outcome for a query whose rerank call failed outright.
    pub fn skipped(query_id: impl Into<String>, k: usize, reason: &str) -> Self {
        Self {
            query_id: query_id.into(),
            status: RerankStatus::Skipped,
            pi_prime: Vec::new(),
            pi_final: (0..k).collect(),
            raw_completion: reason.to_string(),
        }
    }
}

/// Extracts the first run of decimal integers from a completion.
///
/// A run is a sequence of integers separated only by commas, whitespace,
/// semicolons, or sitting inside one pair of square brackets. Any other
/// character ends the run, so trailing prose cannot leak indices in. Values
/// `>= k` are dropped, as are repeats (first occurrence wins).
pub fn parse_indices(completion: &str, k: usize) -> Vec<usize> {
    let mut run: Vec<u128> = Vec::new();
    let mut chars = completion.char_indices().peekable();
    let bytes = completion.as_bytes();
    let mut started = false;
    let mut pending_sep = false;

    while let Some((i, c)) = chars.next() {
        if c.is_ascii_digit() {
            // a '-' glued to the number marks it negative: skip it entirely
            let negative = i > 0 && bytes[i - 1] == b'-';
            let mut end = i + 1;
            while let Some(&(j, d)) = chars.peek() {
                if d.is_ascii_digit() {
                    end = j + 1;
                    chars.next();
                } else {
                    break;
                }
            }
            // decimals such as "2.5" are not indices: stop at them
            if let Some(&(_, '.')) = chars.peek() {
                let mut look = completion[end + 1..].chars();
                if look.next().is_some_and(|d| d.is_ascii_digit()) {
                    if started {
                        break;
                    }
                    // skip the fractional part and keep searching
                    chars.next();
                    while chars.peek().is_some_and(|&(_, d)| d.is_ascii_digit()) {
                        chars.next();
                    }
                    continue;
                }
            }
            if started && !pending_sep {
                break;
            }
            started = true;
            pending_sep = false;
            if !negative {
                // saturate absurdly long numbers; they are out of range anyway
                run.push(completion[i..end].parse::<u128>().unwrap_or(u128::MAX));
            }
        } else if started {
            match c {
                ',' | ';' | ' ' | '\t' | '\n' | '\r' | '[' => pending_sep = true,
                '-' if chars.peek().is_some_and(|&(_, d)| d.is_ascii_digit()) => pending_sep = true,
                _ => break,
            }
        }
    }

    let mut seen = HashSet::new();
    run.into_iter()
        .filter(|&v| v < k as u128)
        .map(|v| v as usize)
        .filter(|v| seen.insert(*v))
        .collect()
}

/// `π' ⊕ π_rem`: the partial order followed by every missing index ascending.
pub fn merge_ranking(pi_prime: &[usize], k: usize) -> Result<Vec<usize>, RerankError> {
    let mut present = vec![false; k];
    for &i in pi_prime {
        if i >= k {
            return Err(RerankError::IndexOutOfRange { index: i, k });
        }
        if present[i] {
            return Err(RerankError::DuplicateIndex(i));
        }
        present[i] = true;
    }
    let mut out = pi_prime.to_vec();
    out.extend((0..k).filter(|&i| !present[i]));
    Ok(out)
}

/// Reorders `candidates` so output rank `j` holds input candidate `pi[j]`.
/// Scores travel with their candidates; ranks are rewritten.
pub fn apply_rerank(candidates: &CandidateList, pi: &[usize]) -> Result<CandidateList, RerankError> {
    let n = candidates.candidates.len();
    if pi.len() != n {
        return Err(RerankError::LengthMismatch {
            perm: pi.len(),
            candidates: n,
        });
    }
    let mut seen = vec![false; n];
    let mut out = Vec::with_capacity(n);
    for (rank, &src) in pi.iter().enumerate() {
        if src >= n {
            return Err(RerankError::IndexOutOfRange { index: src, k: n });
        }
        if std::mem::replace(&mut seen[src], true) {
            return Err(RerankError::DuplicateIndex(src));
        }
        let c = &candidates.candidates[src];
        out.push(ScoredCandidate {
            gallery_id: c.gallery_id.clone(),
            score: c.score,
            rank,
        });
    }
    Ok(CandidateList {
        query_id: candidates.query_id.clone(),
        candidates: out,
        k: candidates.k,
    })
}

/// Applies `pi` to the first `pi.len()` candidates and leaves the tail as is.
pub fn apply_to_window(list: &CandidateList, pi: &[usize]) -> Result<CandidateList, RerankError> {
    let w = pi.len();
    if w > list.candidates.len() {
        return Err(RerankError::LengthMismatch {
            perm: w,
            candidates: list.candidates.len(),
        });
    }
    let head = CandidateList {
        query_id: list.query_id.clone(),
        candidates: list.candidates[..w].to_vec(),
        k: w,
    };
    let mut out = apply_rerank(&head, pi)?;
    out.candidates.extend(list.candidates[w..].iter().cloned());
    out.k = list.k;
    Ok(out)
}

#[derive(Serialize)]
struct AuditLine<'a> {
    query_id: &'a str,
    status: RerankStatus,
    pi_prime: &'a [usize],
    pi_final: &'a [usize],
    raw_completion: &'a str,
}

pub fn write_audit_log<'a, W, I>(mut w: W, outcomes: I) -> std::io::Result<()>
where
    W: Write,
    I: IntoIterator<Item = &'a RerankOutcome>,
{
    for o in outcomes {
        let line = AuditLine {
            query_id: &o.query_id,
            status: o.status,
            pi_prime: &o.pi_prime,
            pi_final: &o.pi_final,
            raw_completion: &o.raw_completion,
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}
