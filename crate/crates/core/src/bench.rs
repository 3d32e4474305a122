//! Cost benchmarks: a flattened encoder-decoder reference with the same
//! codes and embedding layout as MARIUS, analytic forward flop counts,
//! steady-state throughput measurement and log-log scaling fits.

use std::fmt;
use std::io::Write;
use std::time::{Duration, Instant};

use genrec_substrate::nn::{trunc_normal, INIT_STD};
use genrec_substrate::{
    lr_schedule, AdamW, AttentionSpec, Graph, LayerNorm, Linear, ParamId, ParamStore, Scalar, SeqLayout, Tensor,
    TransformerConfig, TransformerStack, Var,
};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cosette::SemanticIdTable;
use crate::data::{crop_and_shuffle, Event};
use crate::error::{Error, Result};
use crate::eval::{Ranked, Recommender};
use crate::marius::{log_softmax_range, CodeMatrix, MariusConfig, MariusState, PhaseTimes};
use crate::seed;

pub const WARMUP_BATCHES: usize = 10;
pub const MEASURED_BATCHES: usize = 100;
pub const STEADY_CV: f64 = 0.15;
const BENCH_LR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlatSeq2SeqConfig {
    pub codebook_size: usize,
    pub levels: usize,
    pub d_model: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub head_dim: usize,
    pub max_len: usize,
    pub mlp_ratio: usize,
}

impl FlatSeq2SeqConfig {
    /// Same codes, widths and depths as a MARIUS configuration.
    pub fn matching(m: &MariusConfig) -> Self {
        Self {
            codebook_size: m.codebook_size,
            levels: m.levels,
            d_model: m.d_temporal,
            encoder_layers: m.temporal_layers,
            decoder_layers: m.depth_layers,
            head_dim: m.head_dim,
            max_len: m.max_len,
            mlp_ratio: m.temporal_config().mlp_ratio,
        }
    }

    fn encoder_config(&self) -> TransformerConfig {
        TransformerConfig {
            head_dim: self.head_dim,
            mlp_ratio: self.mlp_ratio,
            ..TransformerConfig::new(self.d_model, self.encoder_layers, 0.0, false, self.max_len * self.levels)
        }
    }
}

#[derive(Clone, Debug)]
struct DecoderBlock {
    ln1: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln_cross: LayerNorm,
    xq: Linear,
    xk: Linear,
    xv: Linear,
    xo: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

/// Decoder self-attention keys and values per layer, `[rows * len, d]`.
#[derive(Clone, Debug)]
struct DecoderCache<T> {
    keys: Vec<Tensor<T>>,
    values: Vec<Tensor<T>>,
    len: usize,
}

impl<T: Scalar> DecoderCache<T> {
    fn new(layers: usize, d: usize) -> Self {
        Self { keys: vec![Tensor::zeros(&[0, d]); layers], values: vec![Tensor::zeros(&[0, d]); layers], len: 0 }
    }

    fn select(&mut self, rows: &[usize]) {
        for t in self.keys.iter_mut().chain(self.values.iter_mut()) {
            *t = pick_blocks(t, rows, self.len);
        }
    }
}

/// Rows `r * block .. (r + 1) * block` of `t` for each listed `r`.
fn pick_blocks<T: Scalar>(t: &Tensor<T>, rows: &[usize], block: usize) -> Tensor<T> {
    let n = t.cols();
    let mut data = Vec::with_capacity(rows.len() * block * n);
    for &r in rows {
        data.extend_from_slice(&t.data()[r * block * n..(r + 1) * block * n]);
    }
    Tensor::new(&[rows.len() * block, n], data).expect("block shape")
}

/// Encoder memory seen by the decoder: per-layer cross-attention keys and
/// values for every flattened code of every timeline.
struct Memory {
    kv: Vec<(Var, Var)>,
    len: usize,
    valid: Option<Vec<bool>>,
}

/// Bidirectional encoder over the `N * L` flattened codes and a decoder
/// that cross-attends to all of them while emitting one code per level.
#[derive(Clone, Debug)]
pub struct FlatSeq2Seq {
    pub cfg: FlatSeq2SeqConfig,
    pub code_embedding: ParamId,
    pub encoder: TransformerStack,
    pub bos: ParamId,
    pub decoder_embedding: ParamId,
    pub decoder_positions: ParamId,
    blocks: Vec<DecoderBlock>,
    final_norm: LayerNorm,
    pub head: Linear,
}

impl FlatSeq2Seq {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: FlatSeq2SeqConfig, rng: &mut impl Rng) -> Result<Self> {
        let enc = cfg.encoder_config();
        enc.validate()?;
        let (d, kl) = (cfg.d_model, cfg.codebook_size * cfg.levels);
        let code_embedding = store.add("flat.code_embedding", trunc_normal(&[kl, d], INIT_STD, rng), false);
        let encoder = TransformerStack::new(store, "flat.encoder", enc, rng)?;
        let bos = store.add("flat.bos", trunc_normal(&[1, d], INIT_STD, rng), false);
        let decoder_embedding = store.add("flat.decoder_embedding", trunc_normal(&[kl, d], INIT_STD, rng), false);
        let decoder_positions =
            store.add("flat.decoder_positions", trunc_normal(&[cfg.levels, d], INIT_STD, rng), false);
        let blocks = (0..cfg.decoder_layers)
            .map(|i| {
                let p = format!("flat.decoder.{i}");
                let lin =
                    |s: &mut ParamStore<T>, n: &str, a, b, r: &mut _| Linear::new(s, &format!("{p}.{n}"), a, b, r);
                DecoderBlock {
                    ln1: LayerNorm::new(store, &format!("{p}.ln1"), d),
                    wq: lin(store, "wq", d, d, rng),
                    wk: lin(store, "wk", d, d, rng),
                    wv: lin(store, "wv", d, d, rng),
                    wo: lin(store, "wo", d, d, rng),
                    ln_cross: LayerNorm::new(store, &format!("{p}.ln_cross"), d),
                    xq: lin(store, "xq", d, d, rng),
                    xk: lin(store, "xk", d, d, rng),
                    xv: lin(store, "xv", d, d, rng),
                    xo: lin(store, "xo", d, d, rng),
                    ln2: LayerNorm::new(store, &format!("{p}.ln2"), d),
                    fc1: lin(store, "fc1", d, d * cfg.mlp_ratio, rng),
                    fc2: lin(store, "fc2", d * cfg.mlp_ratio, d, rng),
                }
            })
            .collect();
        let final_norm = LayerNorm::new(store, "flat.decoder.final_norm", d);
        let head = Linear::new(store, "flat.head", d, kl, rng);
        Ok(Self { cfg, code_embedding, encoder, bos, decoder_embedding, decoder_positions, blocks, final_norm, head })
    }

    /// Encoder input length for timelines of `n` items.
    pub fn encoder_len(&self, n: usize) -> usize {
        n * self.cfg.levels
    }

    /// Encoder outputs `[batch * len * L, d]` with per-token validity.
    fn encode<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, m: &CodeMatrix) -> Result<(Var, Vec<bool>)> {
        let (k, levels) = (self.cfg.codebook_size, self.cfg.levels);
        let idx: Vec<usize> = m.codes.iter().enumerate().map(|(i, &v)| (i % levels) * k + v).collect();
        let table = g.param(store, self.code_embedding);
        let x = g.gather_rows(table, &idx);
        let valid: Vec<bool> = m.valid.iter().flat_map(|&v| std::iter::repeat_n(v, levels)).collect();
        let layout = SeqLayout { batch: m.batch, len: m.len * levels, valid: Some(valid.clone()) };
        Ok((self.encoder.forward(g, store, x, &layout, None)?, valid))
    }

    fn memory<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        enc: Var,
        len: usize,
        valid: Vec<bool>,
    ) -> Memory {
        let kv = self.blocks.iter().map(|b| (b.xk.forward(g, store, enc), b.xv.forward(g, store, enc))).collect();
        let valid = valid.iter().any(|&v| !v).then_some(valid);
        Memory { kv, len, valid }
    }

    /// Decoder logits `[rows * q_len, K * L]` for `x` holding `q_len` new
    /// tokens per row, placed after any cached prefix.
    fn decode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        rows: usize,
        q_len: usize,
        memory: &Memory,
        mut cache: Option<&mut DecoderCache<T>>,
    ) -> Var {
        let past = cache.as_ref().map_or(0, |c| c.len);
        let pos_idx: Vec<usize> = (0..rows).flat_map(|_| past..past + q_len).collect();
        let table = g.param(store, self.decoder_positions);
        let pos = g.gather_rows(table, &pos_idx);
        let mut h = g.add(x, pos);
        let heads = self.cfg.d_model / self.cfg.head_dim;
        for (li, b) in self.blocks.iter().enumerate() {
            let n1 = b.ln1.forward(g, store, h);
            let q = b.wq.forward(g, store, n1);
            let mut k = b.wk.forward(g, store, n1);
            let mut v = b.wv.forward(g, store, n1);
            if let Some(c) = cache.as_mut() {
                if past > 0 {
                    let ck = g.constant(c.keys[li].clone());
                    let cv = g.constant(c.values[li].clone());
                    k = g.concat_seq(ck, k, rows);
                    v = g.concat_seq(cv, v, rows);
                }
                c.keys[li] = g.value(k).clone();
                c.values[li] = g.value(v).clone();
            }
            let spec = AttentionSpec {
                batch: rows,
                q_len,
                kv_len: past + q_len,
                heads,
                causal: true,
                kv_valid: None,
                dropout: 0.0,
            };
            let a = g.attention(q, k, v, spec);
            let a = b.wo.forward(g, store, a);
            h = g.add(h, a);

            let nx = b.ln_cross.forward(g, store, h);
            let q = b.xq.forward(g, store, nx);
            let (mk, mv) = memory.kv[li];
            let spec = AttentionSpec {
                batch: rows,
                q_len,
                kv_len: memory.len,
                heads,
                causal: false,
                kv_valid: memory.valid.clone(),
                dropout: 0.0,
            };
            let a = g.attention(q, mk, mv, spec);
            let a = b.xo.forward(g, store, a);
            h = g.add(h, a);

            let n2 = b.ln2.forward(g, store, h);
            let m = b.fc1.forward(g, store, n2);
            let m = g.gelu(m);
            let m = b.fc2.forward(g, store, m);
            h = g.add(h, m);
        }
        if let Some(c) = cache {
            c.len = past + q_len;
        }
        let h = self.final_norm.forward(g, store, h);
        self.head.forward(g, store, h)
    }

    /// Teacher-forced cross-entropy of the last item of each timeline given
    /// the items before it; one supervised item per timeline.
    pub fn loss<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, m: &CodeMatrix) -> Result<Var> {
        if m.len < 2 {
            return Err(Error::DegenerateBatch("flattened reference needs two items per timeline".into()));
        }
        let (k, levels) = (self.cfg.codebook_size, self.cfg.levels);
        let mut input = CodeMatrix { batch: m.batch, len: m.len - 1, levels, codes: Vec::new(), valid: Vec::new() };
        let mut targets = Vec::with_capacity(m.batch);
        for b in 0..m.batch {
            for p in 0..m.len - 1 {
                input.codes.extend_from_slice(m.tuple(b, p));
                input.valid.push(m.valid[b * m.len + p]);
            }
            targets.push(m.tuple(b, m.len - 1));
        }
        let (enc, valid) = self.encode(g, store, &input)?;
        let memory = self.memory(g, store, enc, input.len * levels, valid);

        let bos = g.param(store, self.bos);
        let bos = g.gather_rows(bos, &vec![0; m.batch]);
        let x = if levels > 1 {
            let idx: Vec<usize> = targets.iter().flat_map(|t| (0..levels - 1).map(move |j| j * k + t[j])).collect();
            let table = g.param(store, self.decoder_embedding);
            let prev = g.gather_rows(table, &idx);
            let all = g.concat_rows(bos, prev);
            let n = m.batch;
            let order: Vec<usize> = (0..n)
                .flat_map(|b| std::iter::once(b).chain((0..levels - 1).map(move |j| n + b * (levels - 1) + j)))
                .collect();
            g.gather_rows(all, &order)
        } else {
            bos
        };
        let logits = self.decode(g, store, x, m.batch, levels, &memory, None);
        let tgt: Vec<Option<usize>> =
            targets.iter().flat_map(|t| t.iter().enumerate().map(move |(j, &v)| Some(j * k + v))).collect();
        let ranges: Vec<(usize, usize)> = (0..tgt.len()).map(|r| ((r % levels) * k, (r % levels + 1) * k)).collect();
        Ok(g.cross_entropy(logits, &tgt, Some(&ranges)).expect("targets present"))
    }

    /// Beam search for the next tuple of each timeline; the encoder runs
    /// once over each full history, the decoder once per level.
    pub fn beam_search_timed<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        histories: &[Vec<Vec<usize>>],
        beam: usize,
    ) -> Result<(Vec<Vec<(Vec<usize>, f64)>>, PhaseTimes)> {
        let (k, levels, d) = (self.cfg.codebook_size, self.cfg.levels, self.cfg.d_model);
        if beam > k.checked_pow(levels as u32).unwrap_or(usize::MAX) {
            return Err(Error::Capacity(format!("beam {beam} exceeds {k}^{levels} tuples")));
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
        let mem_len = m.len * levels;
        let mut g = Graph::eval();
        let (enc, valid) = self.encode(&mut g, store, &m)?;
        let memory = self.memory(&mut g, store, enc, mem_len, valid);
        let mem_kv: Vec<(Tensor<T>, Tensor<T>)> =
            memory.kv.iter().map(|&(a, b)| (g.value(a).clone(), g.value(b).clone())).collect();
        let mem_valid = memory.valid.clone();
        drop(g);
        times.temporal = t0.elapsed();

        let t1 = Instant::now();
        let mut cache = DecoderCache::new(self.cfg.decoder_layers, d);
        let mut live: Vec<(usize, Vec<usize>, f64)> = (0..n).map(|b| (b, Vec::new(), 0.0)).collect();
        let bos = store.value(self.bos);
        let mut input = Tensor::new(&[n, d], (0..n).flat_map(|_| bos.data().iter().copied()).collect())?;
        for level in 0..levels {
            let owners: Vec<usize> = live.iter().map(|(b, _, _)| *b).collect();
            let mut g = Graph::eval();
            let kv = mem_kv
                .iter()
                .map(|(a, b)| {
                    (g.constant(pick_blocks(a, &owners, mem_len)), g.constant(pick_blocks(b, &owners, mem_len)))
                })
                .collect();
            let valid = mem_valid
                .as_ref()
                .map(|v| owners.iter().flat_map(|&b| v[b * mem_len..(b + 1) * mem_len].iter().copied()).collect());
            let memory = Memory { kv, len: mem_len, valid };
            let x = g.constant(input);
            let logits = self.decode(&mut g, store, x, live.len(), 1, &memory, Some(&mut cache));
            times.depth_positions = times.depth_positions.max(cache.len);
            let lv = g.value(logits);
            let keep = beam.min(k.saturating_pow(level as u32 + 1));
            let mut cands: Vec<Vec<(f64, Vec<usize>, usize)>> = vec![Vec::new(); n];
            for (row, (b, prefix, score)) in live.iter().enumerate() {
                for (c, l) in log_softmax_range(lv.row(row), level * k, (level + 1) * k).into_iter().enumerate() {
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
            cache.select(&parents);
            let table = store.value(self.decoder_embedding);
            let mut data = Vec::with_capacity(live.len() * d);
            for (_, t, _) in &live {
                data.extend_from_slice(table.row(level * k + t[level]));
            }
            input = Tensor::new(&[live.len(), d], data)?;
        }
        let mut out = vec![Vec::new(); n];
        for (b, codes, score) in live {
            out[b].push((codes, score));
        }
        times.depth = t1.elapsed();
        Ok((out, times))
    }
}

fn transformer_flops(tokens: f64, kv_per_query: f64, d: f64, layers: f64, mlp_ratio: f64) -> f64 {
    layers * (8.0 * tokens * d * d + 4.0 * mlp_ratio * tokens * d * d + 4.0 * tokens * kv_per_query * d)
}

/// Forward multiply-add flops (two per MAC) of one teacher-forced pass of
/// the flattened reference on a timeline of `n` items.
pub fn flat_forward_flops(cfg: &FlatSeq2SeqConfig, n: usize) -> f64 {
    let (d, l, r) = (cfg.d_model as f64, cfg.levels as f64, cfg.mlp_ratio as f64);
    let t = n as f64 * l;
    let encoder = transformer_flops(t, t, d, cfg.encoder_layers as f64, r);
    let self_attn = transformer_flops(l, l, d, cfg.decoder_layers as f64, r);
    let cross = cfg.decoder_layers as f64 * (4.0 * l * d * d + 4.0 * t * d * d + 4.0 * l * t * d);
    let head = 2.0 * l * d * (cfg.codebook_size as f64 * l);
    encoder + self_attn + cross + head
}

/// The part of [`flat_forward_flops`] quadratic in `n`.
pub fn flat_quadratic_flops(cfg: &FlatSeq2SeqConfig, n: usize) -> f64 {
    let t = (n * cfg.levels) as f64;
    cfg.encoder_layers as f64 * 4.0 * t * t * cfg.d_model as f64
}

/// Forward flops of one MARIUS pass over a timeline of `n` items with
/// every position supervised.
pub fn marius_forward_flops(cfg: &MariusConfig, n: usize) -> f64 {
    let (dt, dd, l) = (cfg.d_temporal as f64, cfg.d_depth as f64, cfg.levels as f64);
    let nf = n as f64;
    let r = cfg.temporal_config().mlp_ratio as f64;
    let temporal = transformer_flops(nf, nf, dt, cfg.temporal_layers as f64, r);
    let projection = 2.0 * nf * dt * dd;
    let depth = transformer_flops(nf * l, l, dd, cfg.depth_layers as f64, cfg.depth_config().mlp_ratio as f64);
    let head = 2.0 * nf * l * dd * (cfg.codebook_size as f64 * l);
    temporal + projection + depth + head
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Generate,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Train => "train",
            Phase::Generate => "generate",
        })
    }
}

/// A model under measurement. Training counts supervised items, generation
/// counts emitted tuples.
pub trait BenchModel {
    fn tag(&self) -> &str;
    fn train_step(&mut self, batch: &[Vec<Vec<usize>>], seed: u64) -> Result<usize>;
    fn generate(&self, batch: &[Vec<Vec<usize>>], beam: usize) -> Result<(usize, PhaseTimes)>;
}

pub struct MariusBench {
    pub state: MariusState,
    opt: AdamW,
}

impl MariusBench {
    pub fn new(cfg: MariusConfig, seed: u64) -> Result<Self> {
        Ok(Self { state: MariusState::new(cfg, seed)?, opt: AdamW::default() })
    }
}

impl BenchModel for MariusBench {
    fn tag(&self) -> &str {
        "marius"
    }

    fn train_step(&mut self, batch: &[Vec<Vec<usize>>], seed: u64) -> Result<usize> {
        let m = CodeMatrix::from_tuples(batch, self.state.model.cfg.levels);
        let mut g = Graph::new(true, seed);
        let loss = self.state.model.loss(&mut g, &self.state.store, &m)?;
        let grads = g.backward(loss);
        self.opt.step(&mut self.state.store, &grads, BENCH_LR)?;
        Ok(batch.iter().map(|t| t.len().saturating_sub(1)).sum())
    }

    fn generate(&self, batch: &[Vec<Vec<usize>>], beam: usize) -> Result<(usize, PhaseTimes)> {
        let (out, times) = self.state.model.beam_search_timed(&self.state.store, batch, beam, beam)?;
        Ok((out.iter().map(Vec::len).sum(), times))
    }
}

pub struct FlatBench {
    pub model: FlatSeq2Seq,
    pub store: ParamStore<f32>,
    opt: AdamW,
}

impl FlatBench {
    pub fn new(cfg: FlatSeq2SeqConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let model = FlatSeq2Seq::new(&mut store, cfg, &mut seed::rng(seed, "flat-init"))?;
        Ok(Self { model, store, opt: AdamW::default() })
    }
}

impl BenchModel for FlatBench {
    fn tag(&self) -> &str {
        "flat_seq2seq"
    }

    fn train_step(&mut self, batch: &[Vec<Vec<usize>>], seed: u64) -> Result<usize> {
        let m = CodeMatrix::from_tuples(batch, self.model.cfg.levels);
        let mut g = Graph::new(true, seed);
        let loss = self.model.loss(&mut g, &self.store, &m)?;
        let grads = g.backward(loss);
        self.opt.step(&mut self.store, &grads, BENCH_LR)?;
        Ok(batch.len())
    }

    fn generate(&self, batch: &[Vec<Vec<usize>>], beam: usize) -> Result<(usize, PhaseTimes)> {
        let (out, times) = self.model.beam_search_timed(&self.store, batch, beam)?;
        Ok((out.iter().map(Vec::len).sum(), times))
    }
}

/// Trains the flattened reference on the users' training prefixes with the
/// same sampling, schedule and optimizer settings as `train_marius`.
pub fn train_flat(
    cfg: &MariusConfig,
    table: &SemanticIdTable,
    train: &[Vec<Event>],
    seed: u64,
    mut on_step: impl FnMut(usize, f64),
) -> Result<FlatBench> {
    if table.codebook_size() != cfg.codebook_size || table.levels() != cfg.levels {
        return Err(Error::Config(format!(
            "table is {}x{} but model expects K={} L={}",
            table.codebook_size(),
            table.levels(),
            cfg.codebook_size,
            cfg.levels
        )));
    }
    let mut flat = FlatBench::new(FlatSeq2SeqConfig::matching(cfg), seed)?;
    let usable: Vec<usize> = (0..train.len()).filter(|&u| train[u].len() >= 2).collect();
    if usable.is_empty() {
        return Err(Error::DegenerateBatch("no training timeline has two events".into()));
    }
    let mut sampler = seed::rng(seed, "flat-sampling");
    let dropout_seed = seed::substream(seed, "flat-dropout");
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
        let loss = flat.model.loss(&mut g, &flat.store, &m)?;
        let value = g.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::Data(format!("non-finite flattened-reference loss at step {step}")));
        }
        let grads = g.backward(loss);
        let lr = lr_schedule(step as u64, cfg.steps as u64, cfg.warmup_steps as u64, cfg.lr)?;
        opt.step(&mut flat.store, &grads, lr)?;
        on_step(step, value);
    }
    Ok(flat)
}

/// Generative recommender backed by the flattened reference.
pub struct FlatRecommender<'a> {
    pub flat: &'a FlatBench,
    pub table: &'a SemanticIdTable,
    pub beam: usize,
    pub batch: usize,
    pub filter_seen: bool,
}

impl Recommender for FlatRecommender<'_> {
    fn recommend(&self, histories: &[&[usize]], k: usize) -> Result<Vec<Ranked>> {
        let mut out = Vec::with_capacity(histories.len());
        for chunk in histories.chunks(self.batch.max(1)) {
            let tuples: Vec<Vec<Vec<usize>>> =
                chunk.iter().map(|h| h.iter().map(|&i| self.table.codes(i).to_vec()).collect()).collect();
            let (beams, _) = self.flat.model.beam_search_timed(&self.flat.store, &tuples, self.beam.max(k))?;
            for (bs, h) in beams.into_iter().zip(chunk) {
                let mut r = Ranked::default();
                for (codes, _) in bs.into_iter().take(k) {
                    let item = self.table.item_of(&codes);
                    if self.filter_seen && item.is_some_and(|i| h.contains(&i)) {
                        continue;
                    }
                    r.items.push(item);
                    r.tuples.push(codes);
                }
                out.push(r);
            }
        }
        Ok(out)
    }
}

/// Timelines of `n` uniformly random code tuples.
pub fn synthetic_code_timelines(
    batch: usize,
    n: usize,
    k: usize,
    levels: usize,
    rng: &mut impl Rng,
) -> Vec<Vec<Vec<usize>>> {
    (0..batch).map(|_| (0..n).map(|_| (0..levels).map(|_| rng.gen_range(0..k)).collect()).collect()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub batch_size: usize,
    pub warmup: usize,
    pub batches: usize,
    pub seed: u64,
}

impl Default for Protocol {
    fn default() -> Self {
        Self { batch_size: 256, warmup: WARMUP_BATCHES, batches: MEASURED_BATCHES, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub model: String,
    pub phase: Phase,
    pub n: usize,
    pub beam: usize,
    pub batch_size: usize,
    pub threads: usize,
    /// Mean seconds per steady-state batch.
    pub wall_per_batch: f64,
    pub items_per_batch: f64,
    pub items_per_sec: f64,
    pub cv: f64,
    pub steady: bool,
    /// Mean seconds in the temporal stack or encoder during generation.
    pub first_phase: f64,
    /// Mean seconds in the depth stack or decoder during generation.
    pub second_phase: f64,
}

pub const CSV_HEADER: &str = "model,phase,N,B,items_per_sec,cv";

impl TimingRecord {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{:.6},{:.6}", self.model, self.phase, self.n, self.beam, self.items_per_sec, self.cv)
    }
}

pub fn write_csv(records: &[TimingRecord], mut w: impl Write) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in records {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

fn mean_cv(xs: &[f64]) -> (f64, f64) {
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
    (mean, var.sqrt() / mean)
}

/// Runs `protocol.warmup` unrecorded batches, then times `protocol.batches`
/// batches of fresh synthetic timelines of `n` items.
pub fn measure_throughput(
    model: &mut dyn BenchModel,
    phase: Phase,
    n: usize,
    beam: usize,
    levels: usize,
    codebook_size: usize,
    protocol: &Protocol,
) -> Result<TimingRecord> {
    if protocol.batches == 0 || protocol.batch_size == 0 {
        return Err(Error::Config("throughput needs at least one batch of one timeline".into()));
    }
    let mut rng = seed::rng(protocol.seed, &format!("bench-{}-{phase}-{n}", model.tag()));
    let dropout = seed::substream(protocol.seed, "bench-dropout");
    let mut walls = Vec::with_capacity(protocol.batches);
    let (mut items, mut first, mut second) = (0.0, 0.0, 0.0);
    for i in 0..protocol.warmup + protocol.batches {
        let batch = synthetic_code_timelines(protocol.batch_size, n, codebook_size, levels, &mut rng);
        let start = Instant::now();
        let (count, times) = match phase {
            Phase::Train => (model.train_step(&batch, dropout.wrapping_add(i as u64))?, PhaseTimes::default()),
            Phase::Generate => model.generate(&batch, beam)?,
        };
        let wall = start.elapsed();
        if i < protocol.warmup {
            continue;
        }
        if wall == Duration::ZERO {
            return Err(Error::Measurement(format!("batch {i} finished below timer resolution")));
        }
        walls.push(wall.as_secs_f64());
        items += count as f64;
        first += times.temporal.as_secs_f64();
        second += times.depth.as_secs_f64();
    }
    let b = protocol.batches as f64;
    let (wall_per_batch, cv) = mean_cv(&walls);
    Ok(TimingRecord {
        model: model.tag().to_string(),
        phase,
        n,
        beam,
        batch_size: protocol.batch_size,
        threads: 1,
        wall_per_batch,
        items_per_batch: items / b,
        items_per_sec: items / b / wall_per_batch,
        cv,
        steady: cv < STEADY_CV,
        first_phase: first / b,
        second_phase: second / b,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogLogFit {
    pub slope: f64,
    pub intercept: f64,
    pub points: usize,
}

/// Least-squares line through `(ln N, ln t)`.
pub fn complexity_fit(points: &[(f64, f64)]) -> Result<LogLogFit> {
    if points.len() < 3 {
        return Err(Error::Fit(format!("{} points, need at least 3", points.len())));
    }
    if points.iter().any(|&(n, t)| !(n > 0.0 && t > 0.0 && n.is_finite() && t.is_finite())) {
        return Err(Error::Fit("sizes and times must be positive and finite".into()));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Fit("all sizes are equal".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    Ok(LogLogFit { slope, intercept: my - slope * mx, points: points.len() })
}

/// Fit of seconds per batch against `N` for one model and phase.
pub fn fit_records(records: &[TimingRecord], model: &str, phase: Phase) -> Result<LogLogFit> {
    let pts: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| r.model == model && r.phase == phase)
        .map(|r| (r.n as f64, r.wall_per_batch))
        .collect();
    complexity_fit(&pts)
}

/// Measures both models at every `N` for the given phase.
pub fn scaling_sweep(
    marius_cfg: &MariusConfig,
    phase: Phase,
    ns: &[usize],
    beam: usize,
    protocol: &Protocol,
) -> Result<Vec<TimingRecord>> {
    let max_n = ns.iter().copied().max().unwrap_or(1);
    let cfg = MariusConfig { max_len: marius_cfg.max_len.max(max_n), ..marius_cfg.clone() };
    let mut marius = MariusBench::new(cfg.clone(), protocol.seed)?;
    let mut flat = FlatBench::new(FlatSeq2SeqConfig::matching(&cfg), protocol.seed)?;
    let mut out = Vec::new();
    for &n in ns {
        for model in [&mut marius as &mut dyn BenchModel, &mut flat] {
            out.push(measure_throughput(model, phase, n, beam, cfg.levels, cfg.codebook_size, protocol)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> MariusConfig {
        MariusConfig {
            codebook_size: 4,
            levels: 3,
            d_temporal: 16,
            d_depth: 16,
            head_dim: 8,
            max_len: 8,
            ..MariusConfig::default()
        }
    }

    #[test]
    fn planted_power_laws() {
        let quad: Vec<(f64, f64)> = [10.0, 20.0, 40.0, 80.0, 160.0].iter().map(|&n| (n, 3.0 * n * n)).collect();
        assert!((complexity_fit(&quad).unwrap().slope - 2.0).abs() < 0.01);
        let lin: Vec<(f64, f64)> = [10.0, 20.0, 40.0, 80.0, 160.0].iter().map(|&n| (n, 0.5 * n)).collect();
        assert!((complexity_fit(&lin).unwrap().slope - 1.0).abs() < 1e-12);
        assert!(matches!(complexity_fit(&quad[..2]), Err(Error::Fit(_))));
    }

    #[test]
    fn quadratic_term_quadruples() {
        let cfg = FlatSeq2SeqConfig::matching(&MariusConfig::default());
        assert_eq!(flat_quadratic_flops(&cfg, 200), 4.0 * flat_quadratic_flops(&cfg, 100));
        let r = flat_forward_flops(&cfg, 200_000) / flat_forward_flops(&cfg, 100_000);
        assert!(r > 3.9 && r < 4.0, "{r}");
        let m =
            marius_forward_flops(&MariusConfig::default(), 200) / marius_forward_flops(&MariusConfig::default(), 100);
        assert!(m < r);
    }

    #[test]
    fn flat_shapes() {
        let cfg = FlatSeq2SeqConfig::matching(&tiny());
        let mut store = ParamStore::<f64>::new();
        let model = FlatSeq2Seq::new(&mut store, cfg, &mut seed::rng(0, "t")).unwrap();
        assert_eq!(model.encoder_len(5), 15);
        let mut rng = seed::rng(1, "codes");
        let batch = synthetic_code_timelines(3, 5, 4, 3, &mut rng);
        let mut g = Graph::new(true, 0);
        let m = CodeMatrix::from_tuples(&batch, 3);
        let l = model.loss(&mut g, &store, &m).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 0.1);
        let (out, times) = model.beam_search_timed(&store, &batch, 5).unwrap();
        assert!(out.iter().all(|b| b.len() == 5));
        assert_eq!(times.depth_positions, 3);
        for beams in &out {
            assert!(beams.windows(2).all(|w| w[0].1 >= w[1].1));
        }
    }

    #[test]
    fn throughput_records() {
        let p = Protocol { batch_size: 2, warmup: 1, batches: 3, seed: 0 };
        let recs = scaling_sweep(&tiny(), Phase::Train, &[3, 6], 4, &p).unwrap();
        assert_eq!(recs.len(), 4);
        let marius = &recs[0];
        assert_eq!(marius.items_per_batch, 4.0);
        assert_eq!(recs[1].items_per_batch, 2.0);
        assert!(recs.iter().all(|r| r.wall_per_batch > 0.0 && r.items_per_sec > 0.0));
        let g = scaling_sweep(&tiny(), Phase::Generate, &[3], 4, &p).unwrap();
        assert_eq!(g[0].items_per_batch, 8.0);
        let mut csv = Vec::new();
        write_csv(&g, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("model,phase,N,B,items_per_sec,cv\nmarius,generate,3,4,"));
    }
}
