//! Classification-driven shape retrieval and its evaluation.
//!
//! A query retrieves every shape whose predicted class matches its own,
//! ranked by the probability of that class (the L1 list). A second,
//! subcategory-level model then moves shapes sharing the query's predicted
//! subcategory to the front, keeping the order otherwise (the L2 list).
//!
//! Metric conventions:
//!
//! - a retrieved shape is relevant when its category equals the query's;
//! - `N` is the list length, `R` the number of relevant shapes in the corpus
//!   (query excluded);
//! - AP sums precision at each relevant rank and divides by `R`;
//! - NDCG uses binary gain and discount `1/log2(k + 1)` for rank `k >= 1`,
//!   normalized by the ideal list of `min(R, 1000)` relevant shapes;
//! - micro averages weight every query equally, macro averages first average
//!   within each category; F1 is the harmonic mean of the averaged P and R.

use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;

use log::warn;

use crate::error::{Error, Result};
use crate::model::Prediction;

/// Longest rank list kept per query.
pub const MAX_RANK_LEN: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    L1,
    L2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankEntry {
    pub shape_id: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankList {
    pub query_id: String,
    pub entries: Vec<RankEntry>,
    pub stage: Stage,
}

impl RankList {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.shape_id.as_str())
    }
}

/// Ground-truth category and optional subcategory per shape id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroundTruth {
    labels: HashMap<String, (usize, Option<usize>)>,
}

impl GroundTruth {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, shape_id: impl Into<String>, category: usize, sub: Option<usize>) {
        self.labels.insert(shape_id.into(), (category, sub));
    }

    pub fn category(&self, shape_id: &str) -> Option<usize> {
        self.labels.get(shape_id).map(|l| l.0)
    }

    pub fn subcategory(&self, shape_id: &str) -> Option<usize> {
        self.labels.get(shape_id).and_then(|l| l.1)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shapes of `category`, not counting `exclude`.
    pub fn count_category(&self, category: usize, exclude: &str) -> usize {
        self.labels
            .iter()
            .filter(|(id, l)| l.0 == category && id.as_str() != exclude)
            .count()
    }
}

/// L1 list: corpus shapes predicted in the query's class, by that class's
/// probability (descending, ties by ascending id), at most 1000 long.
pub fn build_l1(query_id: &str, query: &Prediction, corpus: &[(String, Prediction)]) -> RankList {
    let class = query.class();
    let mut entries: Vec<RankEntry> = corpus
        .iter()
        .filter(|(id, p)| id != query_id && p.class() == class)
        .map(|(id, p)| RankEntry {
            shape_id: id.clone(),
            score: p.probabilities[class],
        })
        .collect();
    entries.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.shape_id.cmp(&b.shape_id))
    });
    entries.truncate(MAX_RANK_LEN);
    RankList {
        query_id: query_id.to_string(),
        entries,
        stage: Stage::L1,
    }
}

/// L2 list: stable partition of `l1` putting shapes whose predicted
/// subcategory equals `query_sub` first. Entries without a prediction count
/// as non-matching.
pub fn rerank_l2(
    l1: &RankList,
    query_sub: usize,
    sub_predictions: &HashMap<String, usize>,
) -> RankList {
    let mut missing = 0;
    let (mut matched, rest): (Vec<RankEntry>, Vec<RankEntry>) = l1
        .entries
        .iter()
        .cloned()
        .partition(|e| match sub_predictions.get(&e.shape_id) {
            Some(&s) => s == query_sub,
            None => {
                missing += 1;
                false
            }
        });
    if missing > 0 {
        warn!(
            "query {}: {missing} entries lack a subcategory prediction",
            l1.query_id
        );
    }
    matched.extend(rest);
    RankList {
        query_id: l1.query_id.clone(),
        entries: matched,
        stage: Stage::L2,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct QueryScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub average_precision: f64,
    pub ndcg: f64,
}

impl QueryScores {
    fn uniform(v: f64) -> Self {
        Self {
            precision: v,
            recall: v,
            f1: v,
            average_precision: v,
            ndcg: v,
        }
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Scores a binary relevance sequence against `total_relevant` shapes.
pub fn score_relevance(relevance: &[bool], total_relevant: usize) -> QueryScores {
    let n = relevance.len();
    if n == 0 {
        return QueryScores::default();
    }
    let hits = relevance.iter().filter(|&&r| r).count();
    let precision = hits as f64 / n as f64;
    if total_relevant == 0 {
        return QueryScores {
            precision,
            ..QueryScores::default()
        };
    }
    let recall = hits as f64 / total_relevant as f64;
    let mut seen = 0usize;
    let mut ap_sum = 0.0;
    let mut dcg = 0.0;
    for (i, &rel) in relevance.iter().enumerate() {
        if rel {
            seen += 1;
            ap_sum += seen as f64 / (i + 1) as f64;
            dcg += 1.0 / ((i + 2) as f64).log2();
        }
    }
    let ideal: f64 = (0..total_relevant.min(MAX_RANK_LEN))
        .map(|i| 1.0 / ((i + 2) as f64).log2())
        .sum();
    QueryScores {
        precision,
        recall,
        f1: f1(precision, recall),
        average_precision: ap_sum / total_relevant as f64,
        ndcg: dcg / ideal,
    }
}

/// Per-query scores of `rank` against `gt`.
pub fn score_query(rank: &RankList, gt: &GroundTruth) -> Result<QueryScores> {
    let category = gt.category(&rank.query_id).ok_or_else(|| {
        Error::InvalidArgument(format!("query {} missing from ground truth", rank.query_id))
    })?;
    let relevance = rank
        .ids()
        .map(|id| {
            gt.category(id).map(|c| c == category).ok_or_else(|| {
                Error::InvalidArgument(format!("retrieved shape {id} missing from ground truth"))
            })
        })
        .collect::<Result<Vec<bool>>>()?;
    let total = gt.count_category(category, &rank.query_id);
    if total == 0 {
        warn!(
            "query {}: no other corpus shape has category {category}",
            rank.query_id
        );
    }
    Ok(score_relevance(&relevance, total))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricBlock {
    pub p_at_n: f64,
    pub r_at_n: f64,
    pub f1_at_n: f64,
    pub map: f64,
    pub ndcg: f64,
}

impl MetricBlock {
    fn mean_of<'a>(scores: impl Iterator<Item = &'a QueryScores>) -> Self {
        let mut total = QueryScores::uniform(0.0);
        let mut n = 0usize;
        for s in scores {
            total.precision += s.precision;
            total.recall += s.recall;
            total.average_precision += s.average_precision;
            total.ndcg += s.ndcg;
            n += 1;
        }
        if n == 0 {
            return Self::default();
        }
        let n = n as f64;
        let (p, r) = (total.precision / n, total.recall / n);
        Self {
            p_at_n: p,
            r_at_n: r,
            f1_at_n: f1(p, r),
            map: total.average_precision / n,
            ndcg: total.ndcg / n,
        }
    }

    fn mean_of_blocks<'a>(blocks: impl Iterator<Item = &'a MetricBlock>) -> Self {
        let mut sum = Self::default();
        let mut n = 0usize;
        for b in blocks {
            sum.p_at_n += b.p_at_n;
            sum.r_at_n += b.r_at_n;
            sum.map += b.map;
            sum.ndcg += b.ndcg;
            n += 1;
        }
        if n == 0 {
            return sum;
        }
        let n = n as f64;
        let (p, r) = (sum.p_at_n / n, sum.r_at_n / n);
        Self {
            p_at_n: p,
            r_at_n: r,
            f1_at_n: f1(p, r),
            map: sum.map / n,
            ndcg: sum.ndcg / n,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub micro: MetricBlock,
    pub macro_: MetricBlock,
}

/// Micro (query-weighted) and macro (category-balanced) averages of
/// `(query category, scores)` pairs.
pub fn aggregate(per_query: &[(usize, QueryScores)]) -> Result<MetricsReport> {
    if per_query.is_empty() {
        return Err(Error::InvalidArgument("no queries to aggregate".into()));
    }
    let micro = MetricBlock::mean_of(per_query.iter().map(|(_, s)| s));
    let mut by_category: BTreeMap<usize, Vec<QueryScores>> = BTreeMap::new();
    for (c, s) in per_query {
        by_category.entry(*c).or_default().push(*s);
    }
    let per_category: Vec<MetricBlock> = by_category
        .values()
        .map(|v| MetricBlock::mean_of(v.iter()))
        .collect();
    Ok(MetricsReport {
        micro,
        macro_: MetricBlock::mean_of_blocks(per_category.iter()),
    })
}

impl MetricsReport {
    /// `scope.metric=value` lines.
    pub fn key_values(&self) -> String {
        let mut s = String::new();
        for (scope, b) in [("micro", &self.micro), ("macro", &self.macro_)] {
            for (name, v) in [
                ("p_at_n", b.p_at_n),
                ("r_at_n", b.r_at_n),
                ("f1_at_n", b.f1_at_n),
                ("map", b.map),
                ("ndcg", b.ndcg),
            ] {
                writeln!(s, "{scope}.{name}={v:.6}").unwrap();
            }
        }
        s
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<6} {:>7} {:>7} {:>7} {:>7} {:>7}",
            "", "P@N", "R@N", "F1@N", "mAP", "NDCG"
        )?;
        for (scope, b) in [("micro", &self.micro), ("macro", &self.macro_)] {
            writeln!(
                f,
                "{:<6} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4}",
                scope, b.p_at_n, b.r_at_n, b.f1_at_n, b.map, b.ndcg
            )?;
        }
        Ok(())
    }
}

/// One line per query: the query id then the retrieved ids, space separated.
pub fn format_rank_lists(lists: &[RankList]) -> String {
    let mut s = String::new();
    for l in lists {
        s.push_str(&l.query_id);
        for id in l.ids() {
            s.push(' ');
            s.push_str(id);
        }
        s.push('\n');
    }
    s
}

pub fn write_rank_lists(path: impl AsRef<Path>, lists: &[RankList]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_rank_lists(lists)).map_err(|e| Error::io(path, e))
}

/// Parses a rank-list file into `(query, retrieved ids)` pairs.
pub fn parse_rank_lists(text: &str) -> Vec<(String, Vec<String>)> {
    text.lines()
        .filter_map(|line| {
            let mut it = line.split_whitespace();
            let q = it.next()?.to_string();
            Some((q, it.map(str::to_string).collect()))
        })
        .collect()
}
