//! Leave-last-out ranking metrics, hallucination counting, recall curves
//! and popularity-decile comparisons.

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cosette::SemanticIdTable;
use crate::data::EvalCase;
use crate::error::{Error, Result};

/// A top-k list. Generative models may emit tuples that map to no item;
/// those slots hold `None` and still occupy their rank.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Ranked {
    pub items: Vec<Option<usize>>,
    /// Generated code tuples aligned with `items`; empty for ID-based models.
    pub tuples: Vec<Vec<usize>>,
}

impl Ranked {
    pub fn from_items(items: impl IntoIterator<Item = usize>) -> Self {
        Self { items: items.into_iter().map(Some).collect(), tuples: Vec::new() }
    }
}

pub trait Recommender {
    /// Top-`k` lists for a batch of histories (most recent item last).
    fn recommend(&self, histories: &[&[usize]], k: usize) -> Result<Vec<Ranked>>;
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        Err(Error::Config("K must be positive".into()))
    } else {
        Ok(())
    }
}

/// One-based rank of `target`, if present.
pub fn rank_of(list: &[Option<usize>], target: usize) -> Option<usize> {
    list.iter().position(|&x| x == Some(target)).map(|p| p + 1)
}

pub fn recall_at_k(list: &[Option<usize>], target: usize, k: usize) -> Result<f64> {
    check_k(k)?;
    Ok(match rank_of(list, target) {
        Some(r) if r <= k => 1.0,
        _ => 0.0,
    })
}

/// `1 / log2(rank + 1)` within the cutoff; the ideal DCG is 1 for a single target.
pub fn ndcg_at_k(list: &[Option<usize>], target: usize, k: usize) -> Result<f64> {
    check_k(k)?;
    Ok(match rank_of(list, target) {
        Some(r) if r <= k => 1.0 / ((r + 1) as f64).log2(),
        _ => 0.0,
    })
}

/// Mean recall over users.
pub fn mean_recall(lists: &[Ranked], targets: &[usize], k: usize) -> Result<f64> {
    mean_metric(lists, targets, k, recall_at_k)
}

pub fn mean_ndcg(lists: &[Ranked], targets: &[usize], k: usize) -> Result<f64> {
    mean_metric(lists, targets, k, ndcg_at_k)
}

fn mean_metric(
    lists: &[Ranked],
    targets: &[usize],
    k: usize,
    f: fn(&[Option<usize>], usize, usize) -> Result<f64>,
) -> Result<f64> {
    check_k(k)?;
    if lists.len() != targets.len() {
        return Err(Error::Data(format!("{} lists for {} targets", lists.len(), targets.len())));
    }
    if lists.is_empty() {
        return Err(Error::Data("no users to evaluate".into()));
    }
    let mut s = 0.0;
    for (l, &t) in lists.iter().zip(targets) {
        s += f(&l.items, t, k)?;
    }
    Ok(s / lists.len() as f64)
}

/// Generated tuples that match no item, and the total generated.
pub fn hallucination_count(generated: &[Vec<usize>], table: &SemanticIdTable) -> (usize, usize) {
    let bad = generated.iter().filter(|t| table.item_of(t).is_none()).count();
    (bad, generated.len())
}

/// Recall at each cutoff of an ascending list.
pub fn recall_curve(lists: &[Ranked], targets: &[usize], ks: &[usize]) -> Result<Vec<(usize, f64)>> {
    if ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("cutoffs must be strictly ascending".into()));
    }
    ks.iter().map(|&k| Ok((k, mean_recall(lists, targets, k)?))).collect()
}

/// Popularity decile (0 = most frequent) of every item. Items are sorted by
/// descending train count, ties by id, and cut into ten bins of equal size;
/// when the catalog does not divide evenly the extra items go to the lower
/// deciles.
pub fn popularity_deciles(train_counts: &[u64]) -> Result<Vec<usize>> {
    let n = train_counts.len();
    if n < 10 {
        return Err(Error::Config(format!("decile analysis needs at least 10 items, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| train_counts[b].cmp(&train_counts[a]).then(a.cmp(&b)));
    let (base, extra) = (n / 10, n % 10);
    let mut decile = vec![0; n];
    let mut pos = 0;
    for d in 0..10 {
        let size = base + usize::from(d < extra);
        for &item in &order[pos..pos + size] {
            decile[item] = d;
        }
        pos += size;
    }
    Ok(decile)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DecileRow {
    pub decile: usize,
    pub share_a: f64,
    pub share_b: f64,
    pub share_delta: f64,
    pub recall_a: f64,
    pub recall_b: f64,
    pub recall_delta: f64,
    pub users: usize,
}

/// Per-decile prediction share and recall@k of model A minus model B.
/// Shares count the non-hallucinated items in every top-k list; recall is
/// averaged over users whose target falls in the decile.
pub fn decile_analysis(
    a: &[Ranked],
    b: &[Ranked],
    targets: &[usize],
    train_counts: &[u64],
    k: usize,
) -> Result<Vec<DecileRow>> {
    check_k(k)?;
    let deciles = popularity_deciles(train_counts)?;
    if a.len() != targets.len() || b.len() != targets.len() {
        return Err(Error::Data("prediction and target counts differ".into()));
    }
    let shares = |lists: &[Ranked]| {
        let mut c = [0usize; 10];
        for l in lists {
            for &i in l.items.iter().take(k).flatten() {
                c[deciles[i]] += 1;
            }
        }
        let total: usize = c.iter().sum();
        c.map(|x| if total == 0 { 0.0 } else { x as f64 / total as f64 })
    };
    let (sa, sb) = (shares(a), shares(b));
    let mut rows: Vec<DecileRow> = (0..10).map(|d| DecileRow { decile: d + 1, ..Default::default() }).collect();
    for (u, &t) in targets.iter().enumerate() {
        let row = &mut rows[deciles[t]];
        row.users += 1;
        row.recall_a += recall_at_k(&a[u].items, t, k)?;
        row.recall_b += recall_at_k(&b[u].items, t, k)?;
    }
    for (d, row) in rows.iter_mut().enumerate() {
        if row.users > 0 {
            row.recall_a /= row.users as f64;
            row.recall_b /= row.users as f64;
        }
        row.recall_delta = row.recall_a - row.recall_b;
        row.share_a = sa[d];
        row.share_b = sb[d];
        row.share_delta = sa[d] - sb[d];
    }
    Ok(rows)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub users: usize,
    pub recall: Vec<(usize, f64)>,
    pub ndcg: Vec<(usize, f64)>,
    pub hallucinated: usize,
    pub generated: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub deciles: Vec<DecileRow>,
}

impl MetricReport {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.iter().find(|(c, _)| *c == k).map(|x| x.1)
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.ndcg.iter().find(|(c, _)| *c == k).map(|x| x.1)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Rows of `metric,K,value`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,K,value\n");
        for (k, v) in &self.recall {
            let _ = writeln!(s, "recall,{k},{v:.6}");
        }
        for (k, v) in &self.ndcg {
            let _ = writeln!(s, "ndcg,{k},{v:.6}");
        }
        let _ = writeln!(s, "users,0,{}", self.users);
        let _ = writeln!(s, "hallucinated,0,{}", self.hallucinated);
        let _ = writeln!(s, "generated,0,{}", self.generated);
        for r in &self.deciles {
            let _ = writeln!(s, "decile{}_share_delta,0,{:.6}", r.decile, r.share_delta);
            let _ = writeln!(s, "decile{}_recall_delta,0,{:.6}", r.decile, r.recall_delta);
        }
        s
    }
}

/// Top-`max(ks)` lists for every case, in case order.
pub fn predict(model: &dyn Recommender, cases: &[EvalCase], k: usize) -> Result<Vec<Ranked>> {
    let histories: Vec<&[usize]> = cases.iter().map(|c| c.input.as_slice()).collect();
    let lists = model.recommend(&histories, k)?;
    if lists.len() != cases.len() {
        return Err(Error::Data(format!("{} lists for {} cases", lists.len(), cases.len())));
    }
    Ok(lists)
}

/// Recall and NDCG at every cutoff plus hallucination totals.
pub fn evaluate_model(model: &dyn Recommender, cases: &[EvalCase], ks: &[usize]) -> Result<MetricReport> {
    if cases.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let max_k = *ks.iter().max().ok_or_else(|| Error::Config("no cutoffs given".into()))?;
    let lists = predict(model, cases, max_k)?;
    report_from_lists(&lists, cases, ks)
}

pub fn report_from_lists(lists: &[Ranked], cases: &[EvalCase], ks: &[usize]) -> Result<MetricReport> {
    let targets: Vec<usize> = cases.iter().map(|c| c.target).collect();
    let mut report = MetricReport { users: cases.len(), ..Default::default() };
    for &k in ks {
        report.recall.push((k, mean_recall(lists, &targets, k)?));
        report.ndcg.push((k, mean_ndcg(lists, &targets, k)?));
    }
    for l in lists {
        report.generated += l.items.len();
        report.hallucinated += l.items.iter().filter(|x| x.is_none()).count();
    }
    Ok(report)
}

/// Ranks items by training frequency, ties by id.
#[derive(Clone, Debug)]
pub struct PopularityRecommender {
    order: Vec<usize>,
    pub filter_seen: bool,
}

impl PopularityRecommender {
    pub fn new(train_counts: &[u64], filter_seen: bool) -> Self {
        let mut order: Vec<usize> = (0..train_counts.len()).collect();
        order.sort_by(|&a, &b| train_counts[b].cmp(&train_counts[a]).then(a.cmp(&b)));
        Self { order, filter_seen }
    }
}

impl Recommender for PopularityRecommender {
    fn recommend(&self, histories: &[&[usize]], k: usize) -> Result<Vec<Ranked>> {
        Ok(histories
            .iter()
            .map(|h| {
                let seen: HashSet<usize> = if self.filter_seen { h.iter().copied().collect() } else { HashSet::new() };
                Ranked::from_items(self.order.iter().copied().filter(|i| !seen.contains(i)).take(k))
            })
            .collect())
    }
}
