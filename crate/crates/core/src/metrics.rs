//! Benchmark metrics: Recall@K, Recall_subset@K and mAP@K, macro-averaged
//! over queries, with per-group breakdowns (FashionIQ categories, GeneCIS
//! tasks).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::QueryAnnotation;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("average precision needs at least one target")]
    EmptyTargets,
    #[error("no ranking for query {0:?}")]
    MissingRanking(String),
    #[error("query {0:?} has no subset ids but a subset metric was requested")]
    MissingSubset(String),
    #[error("cannot parse metric {0:?} (expected R@K, Rs@K or mAP@K)")]
    BadMetric(String),
}

/// 1 iff any target is within the first `k` ranks.
pub fn recall_at_k<S: AsRef<str>>(ranking: &[S], targets: &HashSet<String>, k: usize) -> u8 {
    u8::from(ranking.iter().take(k).any(|id| targets.contains(id.as_ref())))
}

/// Truncated average precision with `min(|targets|, k)` normalization.
pub fn average_precision_at_k<S: AsRef<str>>(
    ranking: &[S],
    targets: &HashSet<String>,
    k: usize,
) -> Result<f64, MetricsError> {
    if targets.is_empty() {
        return Err(MetricsError::EmptyTargets);
    }
    if k == 0 {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (j, id) in ranking.iter().take(k).enumerate() {
        if targets.contains(id.as_ref()) {
            hits += 1;
            sum += hits as f64 / (j + 1) as f64;
        }
    }
    Ok(sum / targets.len().min(k) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MetricKind {
    Recall,
    RecallSubset,
    MeanAp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MetricSpec {
    pub kind: MetricKind,
    pub k: usize,
}

impl MetricSpec {
    pub fn recall(k: usize) -> Self {
        Self { kind: MetricKind::Recall, k }
    }
    pub fn recall_subset(k: usize) -> Self {
        Self { kind: MetricKind::RecallSubset, k }
    }
    pub fn map(k: usize) -> Self {
        Self { kind: MetricKind::MeanAp, k }
    }

    /// Parses a comma-separated list such as `"R@1,R@5,mAP@5"`.
    pub fn parse_list(s: &str) -> Result<Vec<Self>, MetricsError> {
        s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect()
    }
}

impl fmt::Display for MetricSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            MetricKind::Recall => write!(f, "R@{}", self.k),
            MetricKind::RecallSubset => write!(f, "R_subset@{}", self.k),
            MetricKind::MeanAp => write!(f, "mAP@{}", self.k),
        }
    }
}

impl FromStr for MetricSpec {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || MetricsError::BadMetric(s.to_string());
        let (name, k) = s.trim().split_once('@').ok_or_else(bad)?;
        let k: usize = k.parse().map_err(|_| bad())?;
        if k == 0 {
            return Err(bad());
        }
        let kind = match name.to_ascii_lowercase().as_str() {
            "r" | "recall" => MetricKind::Recall,
            "rs" | "r_subset" | "recall_subset" => MetricKind::RecallSubset,
            "map" => MetricKind::MeanAp,
            _ => return Err(bad()),
        };
        Ok(Self { kind, k })
    }
}

/// Ranked id lists per query. `subset` holds restricted-pool rankings; when a
/// query is absent there, its full ranking filtered to the pool is used.
#[derive(Debug, Clone, Default)]
pub struct Rankings {
    pub full: HashMap<String, Vec<String>>,
    pub subset: HashMap<String, Vec<String>>,
}

impl Rankings {
    pub fn from_full(full: HashMap<String, Vec<String>>) -> Self {
        Self {
            full,
            subset: HashMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Column order of the metrics.
    pub metrics: Vec<String>,
    /// Macro-average over all queries, in percent with 2 decimals.
    pub per_metric: BTreeMap<String, f64>,
    pub per_group: BTreeMap<String, BTreeMap<String, f64>>,
    /// Unweighted mean of the per-group values (the "Average" column of
    /// category-split benchmarks). Present only when groups exist.
    pub group_average: Option<BTreeMap<String, f64>>,
    pub query_count: usize,
}

fn pct(x: f64) -> f64 {
    (x * 10_000.0).round() / 100.0
}

fn restricted<'a>(ranking: &'a [String], pool: &[String]) -> Vec<&'a str> {
    let pool: HashSet<&str> = pool.iter().map(String::as_str).collect();
    ranking.iter().map(String::as_str).filter(|id| pool.contains(id)).collect()
}

fn score_query(
    ann: &QueryAnnotation,
    rankings: &Rankings,
    spec: &[MetricSpec],
) -> Result<Vec<f64>, MetricsError> {
    let full = rankings
        .full
        .get(&ann.query_id)
        .ok_or_else(|| MetricsError::MissingRanking(ann.query_id.clone()))?;
    let targets = ann.target_set();
    spec.iter()
        .map(|m| match m.kind {
            MetricKind::Recall => Ok(f64::from(recall_at_k(full, &targets, m.k))),
            MetricKind::MeanAp => average_precision_at_k(full, &targets, m.k),
            MetricKind::RecallSubset => {
                let pool = ann
                    .subset_ids
                    .as_ref()
                    .ok_or_else(|| MetricsError::MissingSubset(ann.query_id.clone()))?;
                let value = match rankings.subset.get(&ann.query_id) {
                    Some(sub) => recall_at_k(sub, &targets, m.k),
                    None => recall_at_k(&restricted(full, pool), &targets, m.k),
                };
                Ok(f64::from(value))
            }
        })
        .collect()
}

fn mean_columns(rows: &[Vec<f64>], n: usize) -> Vec<f64> {
    let mut sums = vec![0.0; n];
    for r in rows {
        for (s, v) in sums.iter_mut().zip(r) {
            *s += v;
        }
    }
    let count = rows.len().max(1) as f64;
    sums.into_iter().map(|s| s / count).collect()
}

fn named(spec: &[MetricSpec], values: &[f64]) -> BTreeMap<String, f64> {
    spec.iter().zip(values).map(|(m, &v)| (m.to_string(), pct(v))).collect()
}

/// Scores every annotated query and aggregates.
pub fn evaluate(
    rankings: &Rankings,
    annotations: &[QueryAnnotation],
    spec: &[MetricSpec],
) -> Result<EvalReport, MetricsError> {
    let rows: Vec<Vec<f64>> = annotations
        .iter()
        .map(|a| score_query(a, rankings, spec))
        .collect::<Result<_, _>>()?;

    let overall = mean_columns(&rows, spec.len());

    let mut groups: BTreeMap<&str, Vec<Vec<f64>>> = BTreeMap::new();
    for (a, row) in annotations.iter().zip(&rows) {
        if let Some(g) = a.group.as_deref() {
            groups.entry(g).or_default().push(row.clone());
        }
    }
    let group_means: BTreeMap<String, Vec<f64>> = groups
        .iter()
        .map(|(g, rs)| (g.to_string(), mean_columns(rs, spec.len())))
        .collect();
    let group_average = (!group_means.is_empty()).then(|| {
        let means: Vec<Vec<f64>> = group_means.values().cloned().collect();
        named(spec, &mean_columns(&means, spec.len()))
    });

    Ok(EvalReport {
        metrics: spec.iter().map(ToString::to_string).collect(),
        per_metric: named(spec, &overall),
        per_group: group_means.iter().map(|(g, v)| (g.clone(), named(spec, v))).collect(),
        group_average,
        query_count: annotations.len(),
    })
}

impl EvalReport {
    /// Aligned plain-text table: one row per group, then "Average" (when
    /// grouped) and "All".
    pub fn to_table(&self) -> String {
        let mut rows: Vec<(String, &BTreeMap<String, f64>)> =
            self.per_group.iter().map(|(g, m)| (g.clone(), m)).collect();
        if let Some(avg) = &self.group_average {
            rows.push(("Average".into(), avg));
        }
        rows.push((format!("All ({} queries)", self.query_count), &self.per_metric));

        let first = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(5);
        let widths: Vec<usize> = self.metrics.iter().map(|m| m.len().max(6)).collect();
        let mut out = format!("{:<first$}", "Split");
        for (m, w) in self.metrics.iter().zip(&widths) {
            out.push_str(&format!("  {m:>w$}"));
        }
        out.push('\n');
        for (name, vals) in rows {
            out.push_str(&format!("{name:<first$}"));
            for (m, w) in self.metrics.iter().zip(&widths) {
                out.push_str(&format!("  {:>w$.2}", vals.get(m).copied().unwrap_or(f64::NAN)));
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(ids: &[&str]) -> HashSet<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    fn ranking(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("g{i}")).collect()
    }

    #[test]
    fn recall_boundaries() {
        let r = ranking(10);
        assert_eq!(recall_at_k(&r, &set(&["g0"]), 1), 1);
        assert_eq!(recall_at_k(&r, &set(&["g5"]), 5), 0);
        assert_eq!(recall_at_k(&r, &set(&["g9", "g3"]), 5), 1);
    }

    #[test]
    fn ap_worked_values() {
        let r = ranking(10);
        assert_eq!(average_precision_at_k(&r, &set(&["g0"]), 5).unwrap(), 1.0);
        assert_eq!(average_precision_at_k(&r, &set(&["g1"]), 5).unwrap(), 0.5);
        let two = average_precision_at_k(&r, &set(&["g0", "g2"]), 5).unwrap();
        assert!((two - 0.5 * (1.0 + 2.0 / 3.0)).abs() < 1e-15);
        assert_eq!(format!("{two:.4}"), "0.8333");
        assert_eq!(average_precision_at_k(&r, &HashSet::new(), 5), Err(MetricsError::EmptyTargets));
    }

    #[test]
    fn metric_parsing() {
        let v = MetricSpec::parse_list("R@1, Rs@2,mAP@50").unwrap();
        assert_eq!(v, vec![MetricSpec::recall(1), MetricSpec::recall_subset(2), MetricSpec::map(50)]);
        assert_eq!(v[1].to_string(), "R_subset@2");
        assert!("X@1".parse::<MetricSpec>().is_err());
        assert!("R@0".parse::<MetricSpec>().is_err());
    }

    fn ann(id: &str, targets: &[&str], group: Option<&str>) -> QueryAnnotation {
        QueryAnnotation {
            query_id: id.into(),
            reference_id: "ref".into(),
            modification_text: "t".into(),
            target_ids: targets.iter().map(|s| s.to_string()).collect(),
            subset_ids: None,
            group: group.map(Into::into),
        }
    }

    #[test]
    fn two_query_mean() {
        let mut full = HashMap::new();
        full.insert("q1".to_string(), ranking(5));
        full.insert("q2".to_string(), ranking(5));
        let anns = vec![ann("q1", &["g0"], None), ann("q2", &["g3"], None)];
        let r = evaluate(&Rankings::from_full(full), &anns, &[MetricSpec::recall(1)]).unwrap();
        assert_eq!(r.per_metric["R@1"], 50.0);
        assert!(r.group_average.is_none());
    }

    #[test]
    fn grouped_report() {
        let mut full = HashMap::new();
        for q in ["d1", "d2", "s1", "t1"] {
            full.insert(q.to_string(), ranking(20));
        }
        let anns = vec![
            ann("d1", &["g0"], Some("dress")),
            ann("d2", &["g15"], Some("dress")),
            ann("s1", &["g15"], Some("shirt")),
            ann("t1", &["g2"], Some("toptee")),
        ];
        let r = evaluate(&Rankings::from_full(full), &anns, &[MetricSpec::recall(10)]).unwrap();
        assert_eq!(r.per_group["dress"]["R@10"], 50.0);
        assert_eq!(r.per_group["shirt"]["R@10"], 0.0);
        assert_eq!(r.per_group["toptee"]["R@10"], 100.0);
        assert_eq!(r.group_average.as_ref().unwrap()["R@10"], 50.0);
        assert_eq!(r.per_metric["R@10"], 50.0);
        let table = r.to_table();
        assert!(table.contains("Average"));
        assert!(table.lines().count() == 6);
    }

    #[test]
    fn missing_inputs() {
        let anns = vec![ann("q1", &["g0"], None)];
        assert_eq!(
            evaluate(&Rankings::default(), &anns, &[MetricSpec::recall(1)]),
            Err(MetricsError::MissingRanking("q1".into()))
        );
        let mut full = HashMap::new();
        full.insert("q1".to_string(), ranking(3));
        assert_eq!(
            evaluate(&Rankings::from_full(full), &anns, &[MetricSpec::recall_subset(1)]),
            Err(MetricsError::MissingSubset("q1".into()))
        );
    }

    #[test]
    fn subset_restricts_full_ranking() {
        let mut a = ann("q1", &["g4"], None);
        a.subset_ids = Some(vec!["g4".into(), "g7".into(), "g9".into()]);
        let mut full = HashMap::new();
        full.insert("q1".to_string(), ranking(10));
        let r = evaluate(&Rankings::from_full(full), &[a], &[MetricSpec::recall(1), MetricSpec::recall_subset(1)])
            .unwrap();
        assert_eq!(r.per_metric["R@1"], 0.0);
        assert_eq!(r.per_metric["R_subset@1"], 100.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn recall_monotone_in_k(n in 1usize..40, t in 0usize..40, k in 1usize..40) {
                let r = ranking(n);
                let targets = set(&[&format!("g{t}")]);
                prop_assert!(recall_at_k(&r, &targets, k) <= recall_at_k(&r, &targets, k + 1));
            }

            #[test]
            fn moving_target_earlier_never_hurts(n in 2usize..30, tcount in 1usize..5, pos in 1usize..30, k in 1usize..30) {
                let mut r = ranking(n);
                let pos = pos % n;
                prop_assume!(pos >= 1);
                let targets: HashSet<String> = (0..tcount.min(n)).map(|i| format!("g{}", (i * 7 + pos) % n)).collect();
                prop_assume!(targets.contains(&r[pos]));
                let before = average_precision_at_k(&r, &targets, k).unwrap();
                r.swap(pos - 1, pos);
                let after = average_precision_at_k(&r, &targets, k).unwrap();
                prop_assert!(after + 1e-12 >= before);
            }

            #[test]
            fn ideal_order_is_perfect(tcount in 1usize..6, k in 1usize..10) {
                let r = ranking(20);
                let targets: HashSet<String> = (0..tcount).map(|i| format!("g{i}")).collect();
                prop_assert!((average_precision_at_k(&r, &targets, k).unwrap() - 1.0).abs() < 1e-12);
            }
        }
    }
}
