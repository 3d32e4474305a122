//! Interaction logs, k-core filtering, leave-last-out splits, timeline
//! augmentation, co-occurrence supervision and item embedding files.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Default cap on timeline length fed to the sequence models.
pub const MAX_LEN: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Event {
    pub item: usize,
    pub timestamp: i64,
}

/// User timelines over a contiguous item catalog.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionDataset {
    user_ids: Vec<String>,
    item_ids: Vec<String>,
    timelines: Vec<Vec<Event>>,
    train_counts: Vec<u64>,
}

impl InteractionDataset {
    /// Builds a dataset, stable-sorting every timeline by timestamp.
    pub fn new(user_ids: Vec<String>, item_ids: Vec<String>, mut timelines: Vec<Vec<Event>>) -> Result<Self> {
        if user_ids.len() != timelines.len() {
            return Err(Error::Data(format!("{} user ids for {} timelines", user_ids.len(), timelines.len())));
        }
        for t in &mut timelines {
            if let Some(e) = t.iter().find(|e| e.item >= item_ids.len()) {
                return Err(Error::Data(format!("item {} outside catalog of {}", e.item, item_ids.len())));
            }
            t.sort_by_key(|e| e.timestamp);
        }
        let mut train_counts = vec![0u64; item_ids.len()];
        for t in &timelines {
            for e in &t[..train_len(t.len())] {
                train_counts[e.item] += 1;
            }
        }
        Ok(Self { user_ids, item_ids, timelines, train_counts })
    }

    pub fn n_users(&self) -> usize {
        self.timelines.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn n_interactions(&self) -> usize {
        self.timelines.iter().map(Vec::len).sum()
    }

    pub fn timelines(&self) -> &[Vec<Event>] {
        &self.timelines
    }

    pub fn timeline(&self, user: usize) -> &[Event] {
        &self.timelines[user]
    }

    pub fn user_id(&self, user: usize) -> &str {
        &self.user_ids[user]
    }

    pub fn item_id(&self, item: usize) -> &str {
        &self.item_ids[item]
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    /// Interaction counts per item over the training part of every timeline
    /// (everything except the validation and test targets).
    pub fn train_counts(&self) -> &[u64] {
        &self.train_counts
    }

    /// Writes `user<TAB>item<TAB>timestamp` rows in timeline order.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        for (u, t) in self.timelines.iter().enumerate() {
            for e in t {
                writeln!(w, "{}\t{}\t{}", self.user_ids[u], self.item_ids[e.item], e.timestamp)?;
            }
        }
        Ok(())
    }
}

/// Training prefix length under leave-last-out.
fn train_len(n: usize) -> usize {
    if n >= 3 {
        n - 2
    } else {
        n
    }
}

/// Parses tab- or comma-separated `user, item, unix timestamp` rows.
/// Catalog ids follow first appearance in the file.
pub fn parse_interactions<R: BufRead>(reader: R) -> Result<InteractionDataset> {
    let mut users: HashMap<String, usize> = HashMap::new();
    let mut items: HashMap<String, usize> = HashMap::new();
    let mut user_ids = Vec::new();
    let mut item_ids = Vec::new();
    let mut timelines: Vec<Vec<Event>> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let sep = if trimmed.contains('\t') { '\t' } else { ',' };
        let fields: Vec<&str> = trimmed.split(sep).map(str::trim).collect();
        if fields.len() != 3 {
            return Err(Error::Parse { line: lineno, msg: format!("expected 3 fields, found {}", fields.len()) });
        }
        let timestamp: i64 = fields[2]
            .parse()
            .map_err(|_| Error::Parse { line: lineno, msg: format!("timestamp {:?} is not an integer", fields[2]) })?;
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(Error::Parse { line: lineno, msg: "empty user or item field".into() });
        }
        let u = *users.entry(fields[0].to_string()).or_insert_with(|| {
            user_ids.push(fields[0].to_string());
            timelines.push(Vec::new());
            user_ids.len() - 1
        });
        let it = *items.entry(fields[1].to_string()).or_insert_with(|| {
            item_ids.push(fields[1].to_string());
            item_ids.len() - 1
        });
        timelines[u].push(Event { item: it, timestamp });
    }
    if timelines.is_empty() {
        return Err(Error::EmptyDataset);
    }
    InteractionDataset::new(user_ids, item_ids, timelines)
}

pub fn ingest_interactions(path: impl AsRef<Path>) -> Result<InteractionDataset> {
    parse_interactions(BufReader::new(File::open(path)?))
}

/// Drops users and items with fewer than `k` interactions, repeating until
/// nothing changes. Surviving ids are renumbered preserving order.
pub fn k_core_filter(ds: &InteractionDataset, k: usize) -> Result<InteractionDataset> {
    let mut timelines: Vec<Option<Vec<Event>>> = ds.timelines.iter().cloned().map(Some).collect();
    loop {
        let mut item_counts = vec![0usize; ds.n_items()];
        for t in timelines.iter().flatten() {
            for e in t {
                item_counts[e.item] += 1;
            }
        }
        let mut changed = false;
        for slot in timelines.iter_mut() {
            let Some(t) = slot else { continue };
            let before = t.len();
            t.retain(|e| item_counts[e.item] >= k);
            changed |= t.len() != before;
            if t.len() < k {
                *slot = None;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let mut item_map = vec![usize::MAX; ds.n_items()];
    let mut seen = vec![false; ds.n_items()];
    for t in timelines.iter().flatten() {
        for e in t {
            seen[e.item] = true;
        }
    }
    let mut item_ids = Vec::new();
    for (i, s) in seen.iter().enumerate() {
        if *s {
            item_map[i] = item_ids.len();
            item_ids.push(ds.item_ids[i].clone());
        }
    }
    let mut user_ids = Vec::new();
    let mut kept = Vec::new();
    for (u, t) in timelines.into_iter().enumerate() {
        if let Some(t) = t {
            user_ids.push(ds.user_ids[u].clone());
            kept.push(t.into_iter().map(|e| Event { item: item_map[e.item], timestamp: e.timestamp }).collect());
        }
    }
    if kept.is_empty() {
        return Err(Error::EmptyAfterFilter(k));
    }
    InteractionDataset::new(user_ids, item_ids, kept)
}

pub fn five_core_filter(ds: &InteractionDataset) -> Result<InteractionDataset> {
    k_core_filter(ds, 5)
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserSplit {
    pub user: usize,
    pub train: Vec<Event>,
    pub validation: Option<usize>,
    pub test: Option<usize>,
}

/// One prediction query: the input timeline and the item to recover.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalCase {
    pub user: usize,
    pub input: Vec<usize>,
    pub target: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Validation,
    Test,
}

/// Leave-last-out split of every user.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitSpec {
    pub users: Vec<UserSplit>,
}

impl SplitSpec {
    /// Training prefixes as item-id sequences.
    pub fn train_sequences(&self) -> Vec<Vec<usize>> {
        self.users.iter().map(|u| u.train.iter().map(|e| e.item).collect()).collect()
    }

    /// Validation queries read the training prefix; test queries also see
    /// the validation item.
    pub fn cases(&self, kind: SplitKind) -> Vec<EvalCase> {
        self.users
            .iter()
            .filter_map(|u| {
                let (Some(val), Some(test)) = (u.validation, u.test) else { return None };
                let mut input: Vec<usize> = u.train.iter().map(|e| e.item).collect();
                let target = match kind {
                    SplitKind::Validation => val,
                    SplitKind::Test => {
                        input.push(val);
                        test
                    }
                };
                Some(EvalCase { user: u.user, input, target })
            })
            .collect()
    }
}

/// Last item is the test target, the one before it the validation target.
pub fn split_leave_last_out(ds: &InteractionDataset) -> SplitSpec {
    let users = ds
        .timelines
        .iter()
        .enumerate()
        .map(|(user, t)| {
            if t.len() < 3 {
                UserSplit { user, train: t.clone(), validation: None, test: None }
            } else {
                let n = t.len();
                UserSplit {
                    user,
                    train: t[..n - 2].to_vec(),
                    validation: Some(t[n - 2].item),
                    test: Some(t[n - 1].item),
                }
            }
        })
        .collect();
    SplitSpec { users }
}

/// Random contiguous window (start uniform over `0..=len-2`, length
/// `min(remaining, max_len)`), then items sharing a timestamp are shuffled
/// among themselves. Timelines shorter than two events come back unchanged.
pub fn crop_and_shuffle(timeline: &[Event], max_len: usize, rng: &mut impl Rng) -> Vec<Event> {
    if timeline.len() < 2 {
        return timeline.to_vec();
    }
    let max_len = max_len.max(2);
    let start = rng.gen_range(0..=timeline.len() - 2);
    let end = (start + max_len).min(timeline.len());
    let mut window = timeline[start..end].to_vec();
    let mut i = 0;
    while i < window.len() {
        let mut j = i + 1;
        while j < window.len() && window[j].timestamp == window[i].timestamp {
            j += 1;
        }
        if j - i > 1 {
            window[i..j].shuffle(rng);
        }
        i = j;
    }
    window
}

/// Unique items of a set of timelines with pairwise co-occurrence labels.
#[derive(Clone, Debug, PartialEq)]
pub struct CooccurrenceBatch {
    /// Catalog ids in first-appearance order.
    pub items: Vec<usize>,
    /// Row-major `items.len()²` labels: +1 when both items share a timeline, else -1.
    /// The diagonal is stored as -1 and never used.
    pub labels: Vec<i8>,
    /// Number of positive partners per item, self excluded.
    pub positives: Vec<usize>,
}

impl CooccurrenceBatch {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn label(&self, i: usize, j: usize) -> i8 {
        self.labels[i * self.items.len() + j]
    }
}

pub fn batch_cooccurrence(timelines: &[Vec<usize>]) -> Result<CooccurrenceBatch> {
    let mut index: HashMap<usize, usize> = HashMap::new();
    let mut items = Vec::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    for t in timelines {
        let mut local = Vec::new();
        for &it in t {
            let k = *index.entry(it).or_insert_with(|| {
                items.push(it);
                items.len() - 1
            });
            if !local.contains(&k) {
                local.push(k);
            }
        }
        members.push(local);
    }
    let n = items.len();
    if n < 2 {
        return Err(Error::DegenerateBatch(format!("{n} unique item(s), no pairs to contrast")));
    }
    let mut labels = vec![-1i8; n * n];
    for local in &members {
        for &a in local {
            for &b in local {
                if a != b {
                    labels[a * n + b] = 1;
                }
            }
        }
    }
    let positives = (0..n).map(|i| labels[i * n..(i + 1) * n].iter().filter(|&&y| y == 1).count()).collect();
    Ok(CooccurrenceBatch { items, labels, positives })
}

/// Dense per-item content embeddings aligned with catalog ids.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::Alignment(format!("{} values for {rows}x{dim}", data.len())));
        }
        if let Some(p) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::Data(format!("non-finite value in row {}", p / dim.max(1))));
        }
        Ok(Self { rows, dim, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// 16-byte header (row count, dim as little-endian u64) then row-major f32.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&(self.rows as u64).to_le_bytes())?;
        w.write_all(&(self.dim as u64).to_le_bytes())?;
        for x in &self.data {
            w.write_all(&x.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header)?;
        let rows = u64::from_le_bytes(header[..8].try_into().expect("8 bytes")) as usize;
        let dim = u64::from_le_bytes(header[8..].try_into().expect("8 bytes")) as usize;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != rows * dim * 4 {
            return Err(Error::Alignment(format!(
                "header declares {rows}x{dim} but payload holds {} bytes",
                bytes.len()
            )));
        }
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Self::new(rows, dim, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write(BufWriter::new(File::create(path)?))
    }

    /// Keeps the listed rows, in order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Self { rows: rows.len(), dim: self.dim, data }
    }
}

/// Reads an embedding file whose rows must line up with `catalog_size` items.
pub fn load_embedding_matrix(path: impl AsRef<Path>, catalog_size: usize) -> Result<EmbeddingMatrix> {
    let m = EmbeddingMatrix::read(BufReader::new(File::open(path)?))?;
    if m.rows != catalog_size {
        return Err(Error::Alignment(format!("{} embedding rows for a catalog of {catalog_size} items", m.rows)));
    }
    Ok(m)
}

/// Parameters of the planted generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_items: usize,
    pub n_users: usize,
    pub markov_order: usize,
    pub seed: u64,
    /// Defaults to `n_items / 50` (at least 2).
    pub n_clusters: Option<usize>,
    pub embedding_dim: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that an event repeats the previous timestamp.
    pub tie_prob: f64,
    /// Per-item noise around the cluster centroid.
    pub noise: f64,
    /// Zipf exponent of item popularity inside a cluster.
    pub zipf: f64,
}

impl SyntheticConfig {
    pub fn new(n_items: usize, n_users: usize, markov_order: usize, seed: u64) -> Self {
        Self {
            n_items,
            n_users,
            markov_order,
            seed,
            n_clusters: None,
            embedding_dim: 64,
            min_len: 5,
            max_len: 30,
            tie_prob: 0.1,
            noise: 0.5,
            zipf: 1.0,
        }
    }
}

/// Mixture weights of the successor clusters in each planted transition row.
const FANOUT: [f64; 4] = [0.5, 0.25, 0.15, 0.10];

/// Cluster-level Markov chain plus within-cluster popularity.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantedChain {
    pub order: usize,
    /// `n_clusters x n_clusters`, rows sum to one.
    pub transition: Vec<Vec<f64>>,
    /// Raw item ids (generator numbering) per cluster, most popular first.
    pub members: Vec<Vec<usize>>,
    /// Within-cluster sampling weights aligned with `members`.
    pub member_weights: Vec<Vec<f64>>,
}

impl PlantedChain {
    pub fn n_clusters(&self) -> usize {
        self.transition.len()
    }

    /// Row of the transition matrix used after the given cluster history
    /// (most recent last).
    pub fn row_for(&self, history: &[usize]) -> usize {
        let c = self.n_clusters();
        let mut idx = 0usize;
        for (i, &h) in history.iter().rev().take(self.order).enumerate() {
            idx = (idx + h * (1 + 7 * i)) % c;
        }
        idx
    }

    pub fn sample_next_cluster(&self, history: &[usize], rng: &mut impl Rng) -> usize {
        sample_weighted(&self.transition[self.row_for(history)], rng)
    }

    pub fn sample_item(&self, cluster: usize, rng: &mut impl Rng) -> usize {
        self.members[cluster][sample_weighted(&self.member_weights[cluster], rng)]
    }
}

fn sample_weighted(weights: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// Planted dataset for end-to-end checks.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub dataset: InteractionDataset,
    pub embeddings: EmbeddingMatrix,
    pub chain: PlantedChain,
    /// Planted cluster of each catalog item.
    pub item_cluster: Vec<usize>,
}

/// Timelines from a planted Markov chain over item clusters; embeddings
/// are cluster centroids plus noise so content and behaviour agree.
pub fn make_synthetic_dataset(
    n_items: usize,
    n_users: usize,
    markov_order: usize,
    seed: u64,
) -> Result<SyntheticDataset> {
    generate_synthetic(&SyntheticConfig::new(n_items, n_users, markov_order, seed))
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    if cfg.n_items < 20 {
        return Err(Error::Config(format!("synthetic catalog needs at least 20 items, got {}", cfg.n_items)));
    }
    if cfg.markov_order == 0 || cfg.min_len < 2 || cfg.max_len < cfg.min_len {
        return Err(Error::Config("invalid synthetic timeline parameters".into()));
    }
    let n_clusters = cfg.n_clusters.unwrap_or(cfg.n_items / 50).max(2);
    let mut rng = seed::rng(cfg.seed, "synthetic");

    let mut perm: Vec<usize> = (0..cfg.n_items).collect();
    perm.shuffle(&mut rng);
    let mut members = vec![Vec::new(); n_clusters];
    let mut raw_cluster = vec![0usize; cfg.n_items];
    for (pos, &item) in perm.iter().enumerate() {
        members[pos % n_clusters].push(item);
        raw_cluster[item] = pos % n_clusters;
    }
    let member_weights =
        members.iter().map(|m| (0..m.len()).map(|r| 1.0 / ((r + 1) as f64).powf(cfg.zipf)).collect()).collect();
    let transition = (0..n_clusters)
        .map(|_| {
            let mut row = vec![0.0; n_clusters];
            let mut targets: Vec<usize> = (0..n_clusters).collect();
            targets.shuffle(&mut rng);
            for (w, &t) in FANOUT.iter().zip(&targets) {
                row[t] += w;
            }
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= s);
            row
        })
        .collect();
    let chain = PlantedChain { order: cfg.markov_order, transition, members, member_weights };

    let mut raw_events: Vec<(usize, usize, i64)> = Vec::new();
    for u in 0..cfg.n_users {
        let len = rng.gen_range(cfg.min_len..=cfg.max_len);
        let mut history = vec![rng.gen_range(0..n_clusters)];
        let mut ts: i64 = 1_600_000_000 + rng.gen_range(0..1_000_000);
        for step in 0..len {
            if step > 0 {
                let next = chain.sample_next_cluster(&history, &mut rng);
                history.push(next);
                if rng.gen::<f64>() >= cfg.tie_prob {
                    ts += rng.gen_range(1..86_400);
                }
            }
            let item = chain.sample_item(*history.last().expect("non-empty"), &mut rng);
            raw_events.push((u, item, ts));
        }
    }

    let mut item_index: HashMap<usize, usize> = HashMap::new();
    let mut item_ids = Vec::new();
    let mut raw_of = Vec::new();
    let mut timelines = vec![Vec::new(); cfg.n_users];
    for &(u, raw, ts) in &raw_events {
        let id = *item_index.entry(raw).or_insert_with(|| {
            item_ids.push(format!("i{raw}"));
            raw_of.push(raw);
            item_ids.len() - 1
        });
        timelines[u].push(Event { item: id, timestamp: ts });
    }
    let user_ids = (0..cfg.n_users).map(|u| format!("u{u}")).collect();
    let dataset = InteractionDataset::new(user_ids, item_ids, timelines)?;

    let mut erng = seed::rng(cfg.seed, "synthetic-embeddings");
    let centroids: Vec<Vec<f32>> =
        (0..n_clusters).map(|_| (0..cfg.embedding_dim).map(|_| StandardNormal.sample(&mut erng)).collect()).collect();
    let raw_noise: Vec<Vec<f32>> = (0..cfg.n_items)
        .map(|_| {
            (0..cfg.embedding_dim)
                .map(|_| {
                    let z: f32 = StandardNormal.sample(&mut erng);
                    z * cfg.noise as f32
                })
                .collect()
        })
        .collect();
    let mut data = Vec::with_capacity(raw_of.len() * cfg.embedding_dim);
    let mut item_cluster = Vec::with_capacity(raw_of.len());
    for &raw in &raw_of {
        let c = raw_cluster[raw];
        item_cluster.push(c);
        data.extend(centroids[c].iter().zip(&raw_noise[raw]).map(|(a, b)| a + b));
    }
    let embeddings = EmbeddingMatrix::new(raw_of.len(), cfg.embedding_dim, data)?;
    Ok(SyntheticDataset { dataset, embeddings, chain, item_cluster })
}

/// Filters a synthetic dataset and keeps the embedding rows and cluster
/// labels aligned with the renumbered catalog.
pub fn filter_synthetic(s: &SyntheticDataset, k: usize) -> Result<SyntheticDataset> {
    let dataset = k_core_filter(&s.dataset, k)?;
    let index: HashMap<&str, usize> = s.dataset.item_ids().iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let rows: Vec<usize> = dataset.item_ids().iter().map(|n| index[n.as_str()]).collect();
    Ok(SyntheticDataset {
        embeddings: s.embeddings.select_rows(&rows),
        item_cluster: rows.iter().map(|&r| s.item_cluster[r]).collect(),
        chain: s.chain.clone(),
        dataset,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn parse(s: &str) -> Result<InteractionDataset> {
        parse_interactions(s.as_bytes())
    }

    #[test]
    fn three_rows_one_user_sorted() {
        let ds = parse("u1\ta\t30\nu1\tb\t10\nu1\tc\t20\n").unwrap();
        assert_eq!(ds.n_users(), 1);
        let items: Vec<&str> = ds.timeline(0).iter().map(|e| ds.item_id(e.item)).collect();
        assert_eq!(items, ["b", "c", "a"]);
        // ids by first appearance
        assert_eq!(ds.item_ids(), ["a", "b", "c"]);
    }

    #[test]
    fn equal_timestamps_keep_file_order() {
        let ds = parse("u,x,5\nu,y,5\nu,z,1\n").unwrap();
        let items: Vec<&str> = ds.timeline(0).iter().map(|e| ds.item_id(e.item)).collect();
        assert_eq!(items, ["z", "x", "y"]);
    }

    #[test]
    fn bad_timestamp_names_the_line() {
        let err = parse("u\ta\t1\nu\tb\tsoon\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
        assert!(matches!(parse("u\ta\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse(""), Err(Error::EmptyDataset)));
    }

    fn ds_from(timelines: &[&[usize]]) -> InteractionDataset {
        let n_items = timelines.iter().flat_map(|t| t.iter()).max().map_or(0, |m| m + 1);
        let tl = timelines
            .iter()
            .map(|t| t.iter().enumerate().map(|(i, &item)| Event { item, timestamp: i as i64 }).collect())
            .collect();
        InteractionDataset::new(
            (0..timelines.len()).map(|u| format!("u{u}")).collect(),
            (0..n_items).map(|i| format!("i{i}")).collect(),
            tl,
        )
        .unwrap()
    }

    #[test]
    fn filter_fixpoint_unchanged_when_dense() {
        let t: &[usize] = &[0, 1, 2, 3, 4];
        let ds = ds_from(&[t, t, t, t, t]);
        assert_eq!(five_core_filter(&ds).unwrap(), ds);
    }

    #[test]
    fn filter_cascades() {
        // Items 0..4 are each seen by users 0..4 (5 times). Item 5 is seen only
        // by users 5 and 6 and is dropped in round one, which pulls users 5
        // and 6 below five events; removing them drops item 0 to five ->
        // still fine. User 4 also holds item 6, seen by user 6 only.
        let base: &[usize] = &[0, 1, 2, 3, 4];
        let u4: &[usize] = &[0, 1, 2, 3, 4, 6];
        let u5: &[usize] = &[5, 0, 1, 2, 3];
        let u6: &[usize] = &[5, 6, 1, 2, 3];
        let ds = ds_from(&[base, base, base, base, u4, u5, u6]);
        // Round 1: item 5 (2), item 6 (2) removed; users 5,6 fall to 4 events.
        // Round 2: users 5,6 removed; items 0..4 keep >= 5. Round 3: stable.
        let f = five_core_filter(&ds).unwrap();
        assert_eq!(f.n_users(), 5);
        assert_eq!(f.n_items(), 5);
        assert!(f.timelines().iter().all(|t| t.len() == 5));
        assert_eq!(five_core_filter(&f).unwrap(), f);
    }

    #[test]
    fn filter_can_empty_the_dataset() {
        let ds = ds_from(&[&[0, 1, 2], &[3, 4]]);
        assert!(matches!(five_core_filter(&ds), Err(Error::EmptyAfterFilter(5))));
    }

    #[test]
    fn leave_last_out_positions() {
        let ds = ds_from(&[&[0, 1, 2, 3, 4], &[0, 1, 2, 4, 4], &[1, 2]]);
        let split = split_leave_last_out(&ds);
        let u0 = &split.users[0];
        assert_eq!(u0.train.iter().map(|e| e.item).collect::<Vec<_>>(), [0, 1, 2]);
        assert_eq!((u0.validation, u0.test), (Some(3), Some(4)));
        assert_eq!((split.users[1].validation, split.users[1].test), (Some(4), Some(4)));
        assert_eq!((split.users[2].validation, split.users[2].test), (None, None));
        let val = split.cases(SplitKind::Validation);
        let test = split.cases(SplitKind::Test);
        assert_eq!(val.len(), 2);
        assert_eq!(val[0].input, [0, 1, 2]);
        assert_eq!(test[0].input, [0, 1, 2, 3]);
        assert_eq!(test[0].target, 4);
        assert_eq!(ds.train_counts(), &[2, 3, 3, 0, 0]);
    }

    #[test]
    fn crop_identity_without_ties() {
        let t: Vec<Event> = (0..5).map(|i| Event { item: i, timestamp: i as i64 }).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let out = crop_and_shuffle(&t, 50, &mut rng);
            if out.len() == 5 {
                assert_eq!(out, t);
            }
            assert!(out.len() >= 2);
            let start = out[0].item;
            assert_eq!(out, t[start..start + out.len()]);
        }
        let short = vec![t[0]];
        assert_eq!(crop_and_shuffle(&short, 50, &mut rng), short);
    }

    #[test]
    fn cooccurrence_examples() {
        let b = batch_cooccurrence(&[vec![0, 1, 2]]).unwrap();
        assert_eq!(b.positives, [2, 2, 2]);
        let b = batch_cooccurrence(&[vec![0, 1], vec![2, 3]]).unwrap();
        assert_eq!(b.label(0, 2), -1);
        assert_eq!(b.label(1, 3), -1);
        assert_eq!(b.label(0, 1), 1);
        // a=10, b=11, c=12
        let b = batch_cooccurrence(&[vec![10, 11], vec![11, 12]]).unwrap();
        assert_eq!(b.items, [10, 11, 12]);
        assert_eq!(b.label(0, 2), -1);
        assert_eq!(b.label(0, 1), 1);
        assert_eq!(b.label(1, 2), 1);
        assert_eq!(b.positives, [1, 2, 1]);
        assert!(matches!(batch_cooccurrence(&[vec![4, 4]]), Err(Error::DegenerateBatch(_))));
    }

    #[test]
    fn embedding_alignment_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.bin");
        let m = EmbeddingMatrix::new(3, 4, (0..12).map(|x| x as f32).collect()).unwrap();
        m.save(&path).unwrap();
        assert_eq!(load_embedding_matrix(&path, 3).unwrap(), m);
        let two = EmbeddingMatrix::new(2, 4, vec![0.0; 8]).unwrap();
        two.save(&path).unwrap();
        assert!(matches!(load_embedding_matrix(&path, 3), Err(Error::Alignment(_))));
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&1u64.to_le_bytes());
        bytes.extend_from_slice(&2u64.to_le_bytes());
        bytes.extend_from_slice(&1f32.to_le_bytes());
        bytes.extend_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(EmbeddingMatrix::read(bytes.as_slice()), Err(Error::Data(_))));
    }

    #[test]
    fn synthetic_is_deterministic_and_stochastic() {
        let a = make_synthetic_dataset(100, 50, 1, 7).unwrap();
        let b = make_synthetic_dataset(100, 50, 1, 7).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.embeddings, b.embeddings);
        for row in &a.chain.transition {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(make_synthetic_dataset(19, 10, 1, 0).is_err());
    }
}
