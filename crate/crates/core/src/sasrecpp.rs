//! SASRec++: a causal transformer over learned item embeddings with a tied
//! output projection, trained with full softmax cross-entropy, sampled
//! InfoNCE or the original one-negative BCE, with seen-item filtering at
//! ranking time.

use std::collections::HashSet;

use genrec_substrate::nn::{trunc_normal, INIT_STD};
use genrec_substrate::{
    lr_schedule, AdamW, Graph, ParamId, ParamStore, Scalar, SeqLayout, Tensor, TransformerConfig, TransformerStack, Var,
};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{crop_and_shuffle, Event, MAX_LEN};
use crate::error::{Error, Result};
use crate::eval::{Ranked, Recommender};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    FullCe,
    SampledInfonce,
    BceOneNegative,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SasrecConfig {
    pub d_model: usize,
    pub layers: usize,
    pub head_dim: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub loss: LossMode,
    pub temperature: f64,
    pub negatives: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub warmup_steps: usize,
    pub augment: bool,
    pub filter_seen: bool,
}

impl Default for SasrecConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            layers: 2,
            head_dim: 64,
            dropout: 0.4,
            max_len: MAX_LEN,
            loss: LossMode::FullCe,
            temperature: 0.05,
            negatives: 30_000,
            lr: 5e-4,
            weight_decay: 1e-4,
            batch_size: 256,
            steps: 80_000,
            warmup_steps: 1_000,
            augment: true,
            filter_seen: true,
        }
    }
}

/// Catalogs at least this large default to sampled InfoNCE.
pub const LARGE_CATALOG: usize = 50_000;

impl SasrecConfig {
    /// Defaults with the loss picked by catalog size.
    pub fn for_catalog(n_items: usize) -> Self {
        let loss = if n_items < LARGE_CATALOG { LossMode::FullCe } else { LossMode::SampledInfonce };
        Self { loss, ..Self::default() }
    }

    pub fn stack_config(&self) -> TransformerConfig {
        TransformerConfig {
            head_dim: self.head_dim,
            ..TransformerConfig::new(self.d_model, self.layers, self.dropout, true, self.max_len)
        }
    }

    pub fn validate(&self, n_items: usize) -> Result<()> {
        let mut bad = Vec::new();
        if let Err(e) = self.stack_config().validate() {
            bad.push(e.to_string());
        }
        if self.loss == LossMode::SampledInfonce && self.negatives >= n_items {
            bad.push(format!("{} negatives need a catalog larger than {n_items}", self.negatives));
        }
        if self.loss != LossMode::FullCe && n_items < 2 {
            bad.push("sampled losses need at least two items".into());
        }
        if self.temperature <= 0.0 {
            bad.push("temperature must be positive".into());
        }
        if self.warmup_steps >= self.steps.max(1) {
            bad.push(format!("warmup {} must be below steps {}", self.warmup_steps, self.steps));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

#[derive(Clone, Debug)]
pub struct Sasrec {
    pub cfg: SasrecConfig,
    pub n_items: usize,
    pub item_embedding: ParamId,
    pub stack: TransformerStack,
}

/// Left-padded item ids; padding rows are zero vectors and never attended.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemMatrix {
    pub batch: usize,
    pub len: usize,
    pub items: Vec<usize>,
    pub valid: Vec<bool>,
}

impl ItemMatrix {
    pub fn left_padded(seqs: &[&[usize]]) -> Self {
        let len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut items = vec![0; seqs.len() * len];
        let mut valid = vec![false; seqs.len() * len];
        for (b, s) in seqs.iter().enumerate() {
            let start = b * len + len - s.len();
            items[start..start + s.len()].copy_from_slice(s);
            valid[start..start + s.len()].iter_mut().for_each(|v| *v = true);
        }
        Self { batch: seqs.len(), len, items, valid }
    }
}

impl Sasrec {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        cfg: SasrecConfig,
        n_items: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate(n_items)?;
        let item_embedding = store.add("item_embedding", trunc_normal(&[n_items, cfg.d_model], INIT_STD, rng), false);
        let stack = TransformerStack::new(store, "stack", cfg.stack_config(), rng)?;
        Ok(Self { cfg, n_items, item_embedding, stack })
    }

    /// Hidden state at every position, `[batch * len, d]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, m: &ItemMatrix) -> Result<Var> {
        if let Some(&bad) = m.items.iter().find(|&&i| i >= self.n_items) {
            return Err(Error::Data(format!("item {bad} outside catalog of {}", self.n_items)));
        }
        let table = g.param(store, self.item_embedding);
        let mut x = g.gather_rows(table, &m.items);
        if m.valid.iter().any(|&v| !v) {
            let d = self.cfg.d_model;
            let mask =
                m.valid.iter().flat_map(|&v| std::iter::repeat_n(if v { T::one() } else { T::zero() }, d)).collect();
            x = g.mul_const(x, Tensor::new(&[m.batch * m.len, d], mask)?);
        }
        let layout = SeqLayout { batch: m.batch, len: m.len, valid: Some(m.valid.clone()) };
        Ok(self.stack.forward(g, store, x, &layout, None)?)
    }

    /// Training loss over every position whose next item is known.
    pub fn loss<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        m: &ItemMatrix,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for b in 0..m.batch {
            for p in 0..m.len.saturating_sub(1) {
                if m.valid[b * m.len + p] {
                    rows.push(b * m.len + p);
                    targets.push(m.items[b * m.len + p + 1]);
                }
            }
        }
        if rows.is_empty() {
            return Err(Error::DegenerateBatch("no supervised position in the batch".into()));
        }
        let h = self.forward(g, store, m)?;
        let h = g.gather_rows(h, &rows);
        let table = g.param(store, self.item_embedding);
        Ok(match self.cfg.loss {
            LossMode::FullCe => full_ce_loss(g, h, table, &targets),
            LossMode::SampledInfonce => {
                let negs = sample_negatives(self.n_items, &targets, self.cfg.negatives, rng)?;
                sampled_infonce_loss(g, h, table, &targets, &negs, self.cfg.temperature, true)
            }
            LossMode::BceOneNegative => {
                let negs = sample_negatives(self.n_items, &targets, 1, rng)?;
                let negs: Vec<usize> = negs.into_iter().map(|n| n[0]).collect();
                bce_one_negative_loss(g, h, table, &targets, &negs)
            }
        })
    }
}

/// Softmax cross-entropy over the whole catalog with tied output weights.
pub fn full_ce_loss<T: Scalar>(g: &mut Graph<T>, h: Var, table: Var, targets: &[usize]) -> Var {
    let logits = g.matmul(h, table, true);
    let t: Vec<Option<usize>> = targets.iter().map(|&t| Some(t)).collect();
    g.cross_entropy(logits, &t, None).expect("non-empty targets")
}

/// Per-row negatives drawn uniformly without replacement, never the target.
pub fn sample_negatives(n_items: usize, targets: &[usize], n: usize, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    if n >= n_items {
        return Err(Error::Config(format!("{n} negatives need a catalog larger than {n_items}")));
    }
    Ok(targets
        .iter()
        .map(|&t| {
            // draw from the catalog with the target removed, then shift past it
            sample(rng, n_items - 1, n).into_iter().map(|i| if i >= t { i + 1 } else { i }).collect()
        })
        .collect())
}

/// InfoNCE over `[target, negatives...]`. With `cosine`, hidden states and
/// candidates are unit-normalized before the dot product; logits are then
/// divided by `temperature`.
pub fn sampled_infonce_loss<T: Scalar>(
    g: &mut Graph<T>,
    h: Var,
    table: Var,
    targets: &[usize],
    negatives: &[Vec<usize>],
    temperature: f64,
    cosine: bool,
) -> Var {
    let per_row = 1 + negatives.first().map_or(0, Vec::len);
    let idx: Vec<usize> = targets
        .iter()
        .zip(negatives)
        .flat_map(|(&t, n)| {
            assert_eq!(n.len() + 1, per_row, "ragged negatives");
            std::iter::once(t).chain(n.iter().copied())
        })
        .collect();
    let mut cands = g.gather_rows(table, &idx);
    let mut h = h;
    if cosine {
        h = g.l2_normalize(h);
        cands = g.l2_normalize(cands);
    }
    let logits = g.candidate_dot(h, cands, per_row);
    let logits = g.scale(logits, T::of(1.0 / temperature));
    let t = vec![Some(0); targets.len()];
    g.cross_entropy(logits, &t, None).expect("non-empty targets")
}

/// `mean(softplus(-s_pos) + softplus(s_neg))` with one negative per row.
pub fn bce_one_negative_loss<T: Scalar>(
    g: &mut Graph<T>,
    h: Var,
    table: Var,
    targets: &[usize],
    negatives: &[usize],
) -> Var {
    let idx: Vec<usize> = targets.iter().zip(negatives).flat_map(|(&t, &n)| [t, n]).collect();
    let cands = g.gather_rows(table, &idx);
    let s = g.candidate_dot(h, cands, 2);
    let m = targets.len();
    let sign = Tensor::new(&[m, 2], (0..m).flat_map(|_| [-T::one(), T::one()]).collect()).expect("sign shape");
    let s = g.mul_const(s, sign);
    let l = g.softplus(s);
    g.weighted_sum(l, Tensor::full(&[m, 2], T::one() / T::of(m as f64)))
}

/// Sorts the catalog by descending score, ties by id. With `filter_seen`,
/// items of the timeline score below everything else.
pub fn rank_items(scores: &[f64], timeline: &[usize], filter_seen: bool) -> Vec<usize> {
    let mut s = scores.to_vec();
    if filter_seen {
        for &i in timeline {
            s[i] = f64::NEG_INFINITY;
        }
    }
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    order
}

#[derive(Clone, Debug)]
pub struct SasrecState {
    pub model: Sasrec,
    pub store: ParamStore<f32>,
}

impl SasrecState {
    pub fn new(cfg: SasrecConfig, n_items: usize, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let model = Sasrec::new(&mut store, cfg, n_items, &mut seed::rng(seed, "sasrec-init"))?;
        Ok(Self { model, store })
    }

    /// Full-catalog scores after each history, `[histories, n_items]`.
    pub fn scores(&self, histories: &[&[usize]]) -> Result<Tensor<f32>> {
        let clipped: Vec<&[usize]> =
            histories.iter().map(|h| &h[h.len().saturating_sub(self.model.cfg.max_len)..]).collect();
        let m = ItemMatrix::left_padded(&clipped);
        let mut g = Graph::eval();
        let h = self.model.forward(&mut g, &self.store, &m)?;
        let last: Vec<usize> = (0..m.batch).map(|b| b * m.len + m.len - 1).collect();
        let h = g.gather_rows(h, &last);
        Ok(g.value(h).matmul(self.store.value(self.model.item_embedding), true)?)
    }
}

impl Recommender for SasrecState {
    fn recommend(&self, histories: &[&[usize]], k: usize) -> Result<Vec<Ranked>> {
        let mut out = Vec::with_capacity(histories.len());
        for chunk in histories.chunks(256) {
            let scores = self.scores(chunk)?;
            for (i, h) in chunk.iter().enumerate() {
                let s: Vec<f64> = scores.row(i).iter().map(|&x| x as f64).collect();
                let seen: HashSet<usize> = h.iter().copied().collect();
                let ranked = rank_items(&s, h, self.model.cfg.filter_seen);
                let keep = if self.model.cfg.filter_seen { k.min(s.len() - seen.len()) } else { k };
                out.push(Ranked::from_items(ranked.into_iter().take(keep)));
            }
        }
        Ok(out)
    }
}

pub fn train_sasrec(
    cfg: &SasrecConfig,
    n_items: usize,
    train: &[Vec<Event>],
    seed: u64,
    mut on_step: impl FnMut(usize, f64),
) -> Result<SasrecState> {
    let mut state = SasrecState::new(cfg.clone(), n_items, seed)?;
    let usable: Vec<usize> = (0..train.len()).filter(|&u| train[u].len() >= 2).collect();
    if usable.is_empty() {
        return Err(Error::DegenerateBatch("no training timeline has two events".into()));
    }
    let mut sampler = seed::rng(seed, "sasrec-sampling");
    let mut negatives = seed::rng(seed, "sasrec-negatives");
    let dropout_seed = seed::substream(seed, "sasrec-dropout");
    let opt = AdamW { weight_decay: cfg.weight_decay, ..AdamW::default() };
    for step in 0..cfg.steps {
        let seqs: Vec<Vec<usize>> = (0..cfg.batch_size)
            .map(|_| {
                let t = &train[usable[sampler.gen_range(0..usable.len())]];
                let window = if cfg.augment {
                    crop_and_shuffle(t, cfg.max_len, &mut sampler)
                } else {
                    t[t.len().saturating_sub(cfg.max_len)..].to_vec()
                };
                window.iter().map(|e| e.item).collect()
            })
            .collect();
        let refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
        let m = ItemMatrix::left_padded(&refs);
        let mut g = Graph::new(true, dropout_seed.wrapping_add(step as u64));
        let loss = state.model.loss(&mut g, &state.store, &m, &mut negatives)?;
        let value = g.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::Data(format!("non-finite SASRec loss at step {step}")));
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
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_item_uniform_full_ce() {
        let mut g = Graph::<f64>::eval();
        let h = g.constant(Tensor::from_f64(&[1, 2], &[0.0, 0.0]).unwrap());
        let e = g.constant(Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let l = full_ce_loss(&mut g, h, e, &[1]);
        assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn infonce_with_identical_negative() {
        let mut g = Graph::<f64>::eval();
        let h = g.constant(Tensor::from_f64(&[1, 2], &[0.3, -0.2]).unwrap());
        let e = g.constant(Tensor::from_f64(&[2, 2], &[1.0, 2.0, 1.0, 2.0]).unwrap());
        let l = sampled_infonce_loss(&mut g, h, e, &[0], &[vec![1]], 0.05, true);
        assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn negatives_exclude_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = sample_negatives(10, &[0, 4, 9], 9, &mut rng).unwrap();
        for (row, t) in n.iter().zip([0, 4, 9]) {
            let mut s = row.clone();
            s.sort();
            assert_eq!(s, (0..10).filter(|&i| i != t).collect::<Vec<_>>());
        }
        assert!(matches!(sample_negatives(10, &[0], 10, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn ranking_by_hand() {
        let scores = [0.1, 0.9, 0.5, 0.9, -1.0];
        assert_eq!(rank_items(&scores, &[], false), [1, 3, 2, 0, 4]);
        assert_eq!(rank_items(&scores, &[1, 2], true), [3, 0, 4, 1, 2]);
        assert_eq!(rank_items(&scores, &[0, 1, 2, 3, 4], true), [0, 1, 2, 3, 4]);
    }

    #[test]
    fn bce_value() {
        let mut g = Graph::<f64>::eval();
        let h = g.constant(Tensor::from_f64(&[1, 2], &[1.0, 0.0]).unwrap());
        let e = g.constant(Tensor::from_f64(&[2, 2], &[2.0, 0.0, -1.0, 0.0]).unwrap());
        let l = bce_one_negative_loss(&mut g, h, e, &[0], &[1]);
        let want = (1.0 + (-2f64).exp()).ln() + (1.0 + (-1f64).exp()).ln();
        assert!((g.value(l).item() - want).abs() < 1e-12);
    }

    #[test]
    fn config_checks() {
        let cfg = SasrecConfig { loss: LossMode::SampledInfonce, negatives: 10, ..SasrecConfig::default() };
        assert!(cfg.validate(10).is_err());
        assert!(cfg.validate(11).is_ok());
        assert_eq!(SasrecConfig::for_catalog(12_101).loss, LossMode::FullCe);
        assert_eq!(SasrecConfig::for_catalog(200_000).loss, LossMode::SampledInfonce);
    }
}
