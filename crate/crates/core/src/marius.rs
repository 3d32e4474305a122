//! MARIUS: a causal temporal transformer over fused code embeddings, a
//! projection, and a small depth transformer that decodes the `L` codes of
//! the next item one level at a time. Generation is a batched beam search
//! with a key/value cache on the depth stack.

use std::time::{Duration, Instant};

use genrec_substrate::nn::{trunc_normal, INIT_STD};
use genrec_substrate::{
    lr_schedule, AdamW, Graph, KvCache, Linear, ParamId, ParamStore, Scalar, SeqLayout, Tensor, TransformerConfig,
    TransformerStack, Var,
};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cosette::SemanticIdTable;
use crate::data::{crop_and_shuffle, Event, MAX_LEN};
use crate::error::{Error, Result};
use crate::eval::{Ranked, Recommender};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MariusConfig {
    pub codebook_size: usize,
    pub levels: usize,
    pub d_temporal: usize,
    pub temporal_layers: usize,
    pub temporal_dropout: f64,
    pub d_depth: usize,
    pub depth_layers: usize,
    pub depth_dropout: f64,
    pub head_dim: usize,
    pub max_len: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub warmup_steps: usize,
    pub beam_size: usize,
    pub augment: bool,
}

impl Default for MariusConfig {
    fn default() -> Self {
        Self {
            codebook_size: 256,
            levels: 4,
            d_temporal: 256,
            temporal_layers: 2,
            temporal_dropout: 0.4,
            d_depth: 256,
            depth_layers: 2,
            depth_dropout: 0.1,
            head_dim: 64,
            max_len: MAX_LEN,
            lr: 5e-4,
            weight_decay: 1e-4,
            batch_size: 256,
            steps: 80_000,
            warmup_steps: 1_000,
            beam_size: 10,
            augment: true,
        }
    }
}

impl MariusConfig {
    /// Sizing presets: `small`, `medium`, `large`.
    pub fn for_scale(scale: &str) -> Result<Self> {
        let (d, lt, ld) = match scale {
            "small" => (256, 2, 2),
            "medium" => (512, 4, 4),
            "large" => (512, 4, 6),
            other => return Err(Error::Config(format!("unknown scale {other:?}; expected small, medium or large"))),
        };
        Ok(Self { d_temporal: d, d_depth: d, temporal_layers: lt, depth_layers: ld, ..Self::default() })
    }

    pub fn temporal_config(&self) -> TransformerConfig {
        TransformerConfig {
            head_dim: self.head_dim,
            ..TransformerConfig::new(self.d_temporal, self.temporal_layers, self.temporal_dropout, true, self.max_len)
        }
    }

    pub fn depth_config(&self) -> TransformerConfig {
        TransformerConfig {
            head_dim: self.head_dim,
            ..TransformerConfig::new(self.d_depth, self.depth_layers, self.depth_dropout, true, self.levels)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        for (what, cfg) in [("temporal", self.temporal_config()), ("depth", self.depth_config())] {
            if let Err(e) = cfg.validate() {
                bad.push(format!("{what}: {e}"));
            }
        }
        if self.levels == 0 || self.codebook_size < 2 {
            bad.push("need at least one level and two codes".into());
        }
        if self.max_len < 2 {
            bad.push("max_len must be at least 2".into());
        }
        if self.warmup_steps >= self.steps.max(1) {
            bad.push(format!("warmup {} must be below steps {}", self.warmup_steps, self.steps));
        }
        if self.beam_size == 0 {
            bad.push("beam size must be positive".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

/// Temporal and depth stack configurations for a sizing preset.
pub fn marius_defaults(scale: &str) -> Result<(TransformerConfig, TransformerConfig)> {
    let cfg = MariusConfig::for_scale(scale)?;
    Ok((cfg.temporal_config(), cfg.depth_config()))
}

/// Left-padded code tuples of a batch of timelines.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeMatrix {
    pub batch: usize,
    pub len: usize,
    pub levels: usize,
    /// `batch * len * levels` codes; zero at padding.
    pub codes: Vec<usize>,
    pub valid: Vec<bool>,
}

impl CodeMatrix {
    pub fn from_tuples(seqs: &[Vec<Vec<usize>>], levels: usize) -> Self {
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut codes = vec![0; seqs.len() * len * levels];
        let mut valid = vec![false; seqs.len() * len];
        for (b, s) in seqs.iter().enumerate() {
            let start = len - s.len();
            for (i, t) in s.iter().enumerate() {
                assert_eq!(t.len(), levels, "tuple length");
                let p = b * len + start + i;
                valid[p] = true;
                codes[p * levels..(p + 1) * levels].copy_from_slice(t);
            }
        }
        Self { batch: seqs.len(), len, levels, codes, valid }
    }

    pub fn from_items(seqs: &[&[usize]], table: &SemanticIdTable) -> Self {
        let tuples: Vec<Vec<Vec<usize>>> =
            seqs.iter().map(|s| s.iter().map(|&i| table.codes(i).to_vec()).collect()).collect();
        Self::from_tuples(&tuples, table.levels())
    }

    pub fn tuple(&self, b: usize, p: usize) -> &[usize] {
        let r = b * self.len + p;
        &self.codes[r * self.levels..(r + 1) * self.levels]
    }
}

/// Parameter layout.
#[derive(Clone, Debug)]
pub struct Marius {
    pub cfg: MariusConfig,
    pub code_embedding: ParamId,
    pub temporal: TransformerStack,
    pub projection: Linear,
    pub depth_embedding: ParamId,
    pub depth: TransformerStack,
    pub head: Linear,
}

/// One finished beam.
#[derive(Clone, Debug, PartialEq)]
pub struct Beam {
    pub codes: Vec<usize>,
    pub log_prob: f64,
}

/// Wall time spent in each phase of a generation call.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PhaseTimes {
    pub temporal: Duration,
    pub depth: Duration,
    /// Largest number of positions held in the depth cache.
    pub depth_positions: usize,
}

/// Sums the `L` code embeddings of each item: row `(j * K + v_j)` per level.
pub fn fuse_item_embeddings<T: Scalar>(g: &mut Graph<T>, table: Var, codes: &[usize], k: usize, levels: usize) -> Var {
    assert_eq!(codes.len() % levels, 0, "codes are whole tuples");
    let idx: Vec<usize> = codes
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            assert!(v < k, "code {v} out of range for K = {k}");
            (i % levels) * k + v
        })
        .collect();
    let rows = g.gather_rows(table, &idx);
    g.sum_row_groups(rows, levels)
}

pub(crate) fn log_softmax_range<T: Scalar>(row: &[T], lo: usize, hi: usize) -> Vec<f64> {
    let xs: Vec<f64> = row[lo..hi].iter().map(|v| v.as_f64()).collect();
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    xs.iter().map(|x| x - lse).collect()
}

impl Marius {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: MariusConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let kl = cfg.codebook_size * cfg.levels;
        let code_embedding = store.add("code_embedding", trunc_normal(&[kl, cfg.d_temporal], INIT_STD, rng), false);
        let temporal = TransformerStack::new(store, "temporal", cfg.temporal_config(), rng)?;
        let projection = Linear::new(store, "projection", cfg.d_temporal, cfg.d_depth, rng);
        let depth_embedding = store.add("depth_embedding", trunc_normal(&[kl, cfg.d_depth], INIT_STD, rng), false);
        let depth = TransformerStack::new(store, "depth", cfg.depth_config(), rng)?;
        let head = Linear::new(store, "head", cfg.d_depth, kl, rng);
        Ok(Self { cfg, code_embedding, temporal, projection, depth_embedding, depth, head })
    }

    fn level_ranges(&self, rows: usize) -> Vec<(usize, usize)> {
        let k = self.cfg.codebook_size;
        (0..rows).map(|r| ((r % self.cfg.levels) * k, (r % self.cfg.levels + 1) * k)).collect()
    }

    /// Fused inputs with padding rows zeroed, `[batch * len, d]`.
    pub fn fuse<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, m: &CodeMatrix) -> Var {
        let table = g.param(store, self.code_embedding);
        let x = fuse_item_embeddings(g, table, &m.codes, self.cfg.codebook_size, self.cfg.levels);
        if m.valid.iter().all(|&v| v) {
            return x;
        }
        let d = self.cfg.d_temporal;
        let mask = Tensor::new(
            &[m.batch * m.len, d],
            m.valid.iter().flat_map(|&v| std::iter::repeat_n(if v { T::one() } else { T::zero() }, d)).collect(),
        )
        .expect("mask shape");
        g.mul_const(x, mask)
    }

    /// Temporal stack output at every position, `[batch * len, d]`.
    /// Position `p` summarizes items `..=p` and predicts item `p + 1`.
    pub fn temporal_hidden<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        m: &CodeMatrix,
        cache: Option<&mut KvCache<T>>,
    ) -> Result<Var> {
        let x = self.fuse(g, store, m);
        let layout = SeqLayout { batch: m.batch, len: m.len, valid: Some(m.valid.clone()) };
        Ok(self.temporal.forward(g, store, x, &layout, cache)?)
    }

    /// Depth inputs `[h'_m, E'(v_1), ..., E'(v_{L-1})]` for each row of
    /// `hprime` and its target tuple, as `[rows * L, d']`.
    fn depth_inputs<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        hprime: Var,
        targets: &[&[usize]],
    ) -> Var {
        let (k, levels) = (self.cfg.codebook_size, self.cfg.levels);
        let rows = targets.len();
        if levels == 1 {
            return hprime;
        }
        let idx: Vec<usize> = targets.iter().flat_map(|t| (0..levels - 1).map(move |j| j * k + t[j])).collect();
        let table = g.param(store, self.depth_embedding);
        let prev = g.gather_rows(table, &idx);
        let all = g.concat_rows(hprime, prev);
        let order: Vec<usize> = (0..rows)
            .flat_map(|m| std::iter::once(m).chain((0..levels - 1).map(move |j| rows + m * (levels - 1) + j)))
            .collect();
        g.gather_rows(all, &order)
    }

    /// Level logits `[rows * L, K * L]` for teacher-forced target tuples.
    pub fn depth_logits<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        hprime: Var,
        targets: &[&[usize]],
    ) -> Result<Var> {
        let x = self.depth_inputs(g, store, hprime, targets);
        let layout = SeqLayout::dense(targets.len(), self.cfg.levels);
        let h = self.depth.forward(g, store, x, &layout, None)?;
        Ok(self.head.forward(g, store, h))
    }

    /// Mean cross-entropy over every non-padding position after the first
    /// item of each timeline and every level.
    pub fn loss<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, m: &CodeMatrix) -> Result<Var> {
        let mut rows = Vec::new();
        let mut targets: Vec<&[usize]> = Vec::new();
        for b in 0..m.batch {
            for p in 0..m.len.saturating_sub(1) {
                if m.valid[b * m.len + p] {
                    rows.push(b * m.len + p);
                    targets.push(m.tuple(b, p + 1));
                }
            }
        }
        if rows.is_empty() {
            return Err(Error::DegenerateBatch("no supervised position in the batch".into()));
        }
        let h = self.temporal_hidden(g, store, m, None)?;
        let h = g.gather_rows(h, &rows);
        let hp = self.projection.forward(g, store, h);
        let logits = self.depth_logits(g, store, hp, &targets)?;
        let k = self.cfg.codebook_size;
        let tgt: Vec<Option<usize>> =
            targets.iter().flat_map(|t| t.iter().enumerate().map(move |(j, &v)| Some(j * k + v))).collect();
        let ranges = self.level_ranges(tgt.len());
        Ok(g.cross_entropy(logits, &tgt, Some(&ranges)).expect("targets present"))
    }

    /// Beam search over the next item of each timeline. Histories longer
    /// than `max_len` keep their most recent items.
    pub fn beam_search<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        histories: &[Vec<Vec<usize>>],
        beam: usize,
        n_out: usize,
    ) -> Result<Vec<Vec<Beam>>> {
        Ok(self.beam_search_timed(store, histories, beam, n_out)?.0)
    }

    pub fn beam_search_timed<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        histories: &[Vec<Vec<usize>>],
        beam: usize,
        n_out: usize,
    ) -> Result<(Vec<Vec<Beam>>, PhaseTimes)> {
        let (k, levels) = (self.cfg.codebook_size, self.cfg.levels);
        let space = k.checked_pow(levels as u32).unwrap_or(usize::MAX);
        if beam > space {
            return Err(Error::Capacity(format!("beam {beam} exceeds {k}^{levels} tuples")));
        }
        if n_out > beam {
            return Err(Error::Config(format!("{n_out} outputs requested from {beam} beams")));
        }
        if histories.iter().any(Vec::is_empty) {
            return Err(Error::Data("beam search needs a non-empty history".into()));
        }
        let mut times = PhaseTimes::default();
        let n = histories.len();
        if n == 0 {
            return Ok((Vec::new(), times));
        }

        let t0 = Instant::now();
        let clipped: Vec<Vec<Vec<usize>>> =
            histories.iter().map(|h| h[h.len().saturating_sub(self.cfg.max_len)..].to_vec()).collect();
        let m = CodeMatrix::from_tuples(&clipped, levels);
        let mut g = Graph::eval();
        let h = self.temporal_hidden(&mut g, store, &m, None)?;
        let last: Vec<usize> = (0..n).map(|b| b * m.len + m.len - 1).collect();
        let h = g.gather_rows(h, &last);
        let hp = self.projection.forward(&mut g, store, h);
        let hp_value = g.value(hp).clone();
        times.temporal = t0.elapsed();

        let t1 = Instant::now();
        let mut cache: KvCache<T> = self.depth.new_cache(n);
        // (timeline, prefix, score) for every live row of the cache
        let mut live: Vec<(usize, Vec<usize>, f64)> = (0..n).map(|b| (b, Vec::new(), 0.0)).collect();
        let mut input = hp_value;
        for level in 0..levels {
            let mut g = Graph::eval();
            let x = g.constant(input);
            let layout = SeqLayout::dense(live.len(), 1);
            let hd = self.depth.forward(&mut g, store, x, &layout, Some(&mut cache))?;
            times.depth_positions = times.depth_positions.max(cache.len());
            let logits = self.head.forward(&mut g, store, hd);
            let lv = g.value(logits);
            let keep = beam.min(k.saturating_pow(level as u32 + 1));
            let mut cands: Vec<Vec<(f64, Vec<usize>, usize)>> = vec![Vec::new(); n];
            for (row, (b, prefix, score)) in live.iter().enumerate() {
                let lp = log_softmax_range(lv.row(row), level * k, (level + 1) * k);
                for (c, l) in lp.into_iter().enumerate() {
                    let mut t = prefix.clone();
                    t.push(c);
                    cands[*b].push((score + l, t, row));
                }
            }
            let mut next = Vec::with_capacity(n * keep);
            let mut parents = Vec::with_capacity(n * keep);
            for (b, mut c) in cands.into_iter().enumerate() {
                c.sort_by(|x, y| y.0.total_cmp(&x.0).then_with(|| x.1.cmp(&y.1)));
                for (score, t, parent) in c.into_iter().take(keep) {
                    next.push((b, t, score));
                    parents.push(parent);
                }
            }
            live = next;
            if level + 1 < levels {
                cache.select(&parents);
                let idx: Vec<usize> = live.iter().map(|(_, t, _)| level * k + t[level]).collect();
                let table = store.value(self.depth_embedding);
                let d = self.cfg.d_depth;
                let mut data = Vec::with_capacity(idx.len() * d);
                for &i in &idx {
                    data.extend_from_slice(table.row(i));
                }
                input = Tensor::new(&[idx.len(), d], data)?;
            } else {
                input = Tensor::zeros(&[0, self.cfg.d_depth]);
            }
        }
        let mut out = vec![Vec::with_capacity(n_out); n];
        for (b, codes, log_prob) in live {
            if out[b].len() < n_out {
                out[b].push(Beam { codes, log_prob });
            }
        }
        times.depth = t1.elapsed();
        Ok((out, times))
    }
}

/// Trained model in training precision.
#[derive(Clone, Debug)]
pub struct MariusState {
    pub model: Marius,
    pub store: ParamStore<f32>,
}

impl MariusState {
    pub fn new(cfg: MariusConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let model = Marius::new(&mut store, cfg, &mut seed::rng(seed, "marius-init"))?;
        Ok(Self { model, store })
    }
}

/// Generative recommender over a semantic-ID table. Generated tuples that
/// map to no item stay in the list as `None`.
pub struct MariusRecommender<'a> {
    pub state: &'a MariusState,
    pub table: &'a SemanticIdTable,
    pub beam: usize,
    pub batch: usize,
    /// Drops generated items already in the history (the list may shrink).
    pub filter_seen: bool,
}

impl Recommender for MariusRecommender<'_> {
    fn recommend(&self, histories: &[&[usize]], k: usize) -> Result<Vec<Ranked>> {
        let mut out = Vec::with_capacity(histories.len());
        for chunk in histories.chunks(self.batch.max(1)) {
            let tuples: Vec<Vec<Vec<usize>>> =
                chunk.iter().map(|h| h.iter().map(|&i| self.table.codes(i).to_vec()).collect()).collect();
            let beams = self.state.model.beam_search(&self.state.store, &tuples, self.beam.max(k), k)?;
            for (bs, h) in beams.into_iter().zip(chunk) {
                let mut r = Ranked::default();
                for b in bs {
                    let item = self.table.item_of(&b.codes);
                    if self.filter_seen && item.is_some_and(|i| h.contains(&i)) {
                        continue;
                    }
                    r.items.push(item);
                    r.tuples.push(b.codes);
                }
                out.push(r);
            }
        }
        Ok(out)
    }
}

/// Trains on the users' training prefixes (item ids with timestamps).
/// Each step samples `batch_size` timelines with at least two events.
pub fn train_marius(
    cfg: &MariusConfig,
    table: &SemanticIdTable,
    train: &[Vec<Event>],
    seed: u64,
    mut on_step: impl FnMut(usize, f64),
) -> Result<MariusState> {
    if table.codebook_size() != cfg.codebook_size || table.levels() != cfg.levels {
        return Err(Error::Config(format!(
            "table is {}x{} but model expects K={} L={}",
            table.codebook_size(),
            table.levels(),
            cfg.codebook_size,
            cfg.levels
        )));
    }
    let mut state = MariusState::new(cfg.clone(), seed)?;
    let usable: Vec<usize> = (0..train.len()).filter(|&u| train[u].len() >= 2).collect();
    if usable.is_empty() {
        return Err(Error::DegenerateBatch("no training timeline has two events".into()));
    }
    let mut sampler = seed::rng(seed, "marius-sampling");
    let dropout_seed = seed::substream(seed, "marius-dropout");
    let opt = AdamW { weight_decay: cfg.weight_decay, ..AdamW::default() };
    for step in 0..cfg.steps {
        let seqs: Vec<Vec<Vec<usize>>> = (0..cfg.batch_size)
            .map(|_| {
                let t = &train[usable[sampler.gen_range(0..usable.len())]];
                let window = if cfg.augment {
                    crop_and_shuffle(t, cfg.max_len, &mut sampler)
                } else {
                    t[t.len().saturating_sub(cfg.max_len)..].to_vec()
                };
                window.iter().map(|e| table.codes(e.item).to_vec()).collect()
            })
            .collect();
        let m = CodeMatrix::from_tuples(&seqs, cfg.levels);
        let mut g = Graph::new(true, dropout_seed.wrapping_add(step as u64));
        let loss = state.model.loss(&mut g, &state.store, &m)?;
        let value = g.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::Data(format!("non-finite MARIUS loss at step {step}")));
        }
        let grads = g.backward(loss);
        let lr = lr_schedule(step as u64, cfg.steps as u64, cfg.warmup_steps as u64, cfg.lr)?;
        opt.step(&mut state.store, &grads, lr)?;
        on_step(step, value);
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(k: usize, levels: usize) -> MariusConfig {
        MariusConfig {
            codebook_size: k,
            levels,
            d_temporal: 8,
            temporal_layers: 1,
            d_depth: 8,
            depth_layers: 1,
            head_dim: 4,
            max_len: 8,
            steps: 10,
            warmup_steps: 1,
            ..MariusConfig::default()
        }
    }

    #[test]
    fn presets() {
        let (t, d) = marius_defaults("small").unwrap();
        assert_eq!((t.d_model, t.layers, d.layers), (256, 2, 2));
        let (t, d) = marius_defaults("medium").unwrap();
        assert_eq!((t.d_model, t.layers, d.layers), (512, 4, 4));
        let (t, d) = marius_defaults("large").unwrap();
        assert_eq!((t.d_model, d.d_model, t.layers, d.layers), (512, 512, 4, 6));
        assert_eq!((t.dropout, d.dropout, t.head_dim), (0.4, 0.1, 64));
        assert!(matches!(marius_defaults("huge"), Err(Error::Config(_))));
        let c = MariusConfig::default();
        assert_eq!((c.lr, c.weight_decay, c.batch_size, c.steps, c.beam_size), (5e-4, 1e-4, 256, 80_000, 10));
    }

    #[test]
    fn fusion_sums_levels() {
        let mut g = Graph::<f64>::eval();
        // K = 2, L = 2; one-hot rows of width 4
        let eye = Tensor::from_f64(&[4, 4], &[1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1.]).unwrap();
        let table = g.constant(eye);
        let x = fuse_item_embeddings(&mut g, table, &[1, 0, 0, 1], 2, 2);
        assert_eq!(g.value(x).data(), &[0., 1., 1., 0., 1., 0., 0., 1.]);
        let zero = g.constant(Tensor::zeros(&[4, 3]));
        let x = fuse_item_embeddings(&mut g, zero, &[1, 1], 2, 2);
        assert!(g.value(x).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn left_padding_puts_latest_last() {
        let m = CodeMatrix::from_tuples(&[vec![vec![1, 2]], vec![vec![0, 1], vec![1, 0]]], 2);
        assert_eq!(m.len, 2);
        assert_eq!(m.valid, [false, true, true, true]);
        assert_eq!(m.tuple(0, 1), [1, 2]);
    }

    #[test]
    fn all_padding_is_degenerate() {
        let mut store = ParamStore::<f64>::new();
        let model = Marius::new(&mut store, tiny(3, 2), &mut seed::rng(0, "t")).unwrap();
        let m = CodeMatrix::from_tuples(&[vec![vec![0, 1]], vec![vec![2, 2]]], 2);
        let mut g = Graph::eval();
        assert!(matches!(model.loss(&mut g, &store, &m), Err(Error::DegenerateBatch(_))));
    }

    #[test]
    fn beam_capacity_and_uniform_ties() {
        let mut store = ParamStore::<f64>::new();
        let model = Marius::new(&mut store, tiny(2, 2), &mut seed::rng(0, "t")).unwrap();
        assert!(matches!(model.beam_search(&store, &[vec![vec![0, 0]]], 5, 1), Err(Error::Capacity(_))));
        // zero head makes every level uniform
        for id in [model.head.weight, model.head.bias] {
            store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let beams = model.beam_search(&store, &[vec![vec![1, 1]]], 3, 3).unwrap();
        let tuples: Vec<_> = beams[0].iter().map(|b| b.codes.clone()).collect();
        assert_eq!(tuples, [vec![0, 0], vec![0, 1], vec![1, 0]]);
        for b in &beams[0] {
            assert!((b.log_prob - 2.0 * 0.5f64.ln()).abs() < 1e-12);
        }
    }
}
