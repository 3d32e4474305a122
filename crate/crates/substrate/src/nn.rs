//! Layers built on the graph: linear maps, layer norm and pre-norm
//! transformer stacks with an optional key/value cache for incremental
//! decoding.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{AttentionSpec, Graph, Var};
use crate::optim::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

/// Normal samples with `std`, redrawn until they fall within two deviations.
pub fn trunc_normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let x: f64 = StandardNormal.sample(rng);
            if x.abs() <= 2.0 {
                break T::of(x * std);
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape")
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(&format!("{name}.weight"), trunc_normal(&[in_dim, out_dim], INIT_STD, rng), true);
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[out_dim]), false);
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w, false);
        g.add_bias(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gamma = store.add(&format!("{name}.gamma"), Tensor::full(&[dim], T::one()), false);
        let beta = store.add(&format!("{name}.beta"), Tensor::zeros(&[dim]), false);
        Self { gamma, beta }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub layers: usize,
    pub head_dim: usize,
    pub dropout: f64,
    pub causal: bool,
    pub max_positions: usize,
    pub mlp_ratio: usize,
}

impl TransformerConfig {
    pub fn new(d_model: usize, layers: usize, dropout: f64, causal: bool, max_positions: usize) -> Self {
        Self { d_model, layers, head_dim: 64, dropout, causal, max_positions, mlp_ratio: 4 }
    }

    pub fn heads(&self) -> usize {
        self.d_model / self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.head_dim) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of head_dim {}",
                self.d_model, self.head_dim
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.max_positions == 0 {
            return Err(Error::Config("max_positions must be positive".into()));
        }
        Ok(())
    }
}

/// How the rows of a stack input split into sequences.
#[derive(Clone, Debug)]
pub struct SeqLayout {
    pub batch: usize,
    pub len: usize,
    /// `batch * len` flags; padded tokens are never attended to.
    pub valid: Option<Vec<bool>>,
}

impl SeqLayout {
    pub fn dense(batch: usize, len: usize) -> Self {
        Self { batch, len, valid: None }
    }
}

/// Keys and values of every layer for the tokens seen so far.
#[derive(Clone, Debug)]
pub struct KvCache<T> {
    keys: Vec<Tensor<T>>,
    values: Vec<Tensor<T>>,
    valid: Vec<bool>,
    batch: usize,
    len: usize,
}

impl<T: Scalar> KvCache<T> {
    pub fn new(layers: usize, batch: usize, d_model: usize) -> Self {
        Self {
            keys: (0..layers).map(|_| Tensor::zeros(&[0, d_model])).collect(),
            values: (0..layers).map(|_| Tensor::zeros(&[0, d_model])).collect(),
            valid: Vec::new(),
            batch,
            len: 0,
        }
    }

    /// Cached positions per sequence.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Rebuilds the cache from the listed sequences (repeats allowed), as
    /// when beams are expanded or pruned.
    pub fn select(&mut self, rows: &[usize]) {
        let pick = |t: &Tensor<T>, len: usize| {
            let n = t.cols();
            let mut data = Vec::with_capacity(rows.len() * len * n);
            for &r in rows {
                data.extend_from_slice(&t.data()[r * len * n..(r + 1) * len * n]);
            }
            Tensor::new(&[rows.len() * len, n], data).expect("cache shape")
        };
        for t in self.keys.iter_mut().chain(self.values.iter_mut()) {
            *t = pick(t, self.len);
        }
        let mut valid = Vec::with_capacity(rows.len() * self.len);
        for &r in rows {
            valid.extend_from_slice(&self.valid[r * self.len..(r + 1) * self.len]);
        }
        self.valid = valid;
        self.batch = rows.len();
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

/// Pre-norm transformer stack with learned absolute positions.
#[derive(Clone, Debug)]
pub struct TransformerStack {
    pub cfg: TransformerConfig,
    pub positions: ParamId,
    blocks: Vec<Block>,
    final_norm: LayerNorm,
}

impl TransformerStack {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: TransformerConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let positions =
            store.add(&format!("{name}.positions"), trunc_normal(&[cfg.max_positions, d], INIT_STD, rng), false);
        let blocks = (0..cfg.layers)
            .map(|i| {
                let p = format!("{name}.blocks.{i}");
                Block {
                    ln1: LayerNorm::new(store, &format!("{p}.ln1"), d),
                    wq: Linear::new(store, &format!("{p}.wq"), d, d, rng),
                    wk: Linear::new(store, &format!("{p}.wk"), d, d, rng),
                    wv: Linear::new(store, &format!("{p}.wv"), d, d, rng),
                    wo: Linear::new(store, &format!("{p}.wo"), d, d, rng),
                    ln2: LayerNorm::new(store, &format!("{p}.ln2"), d),
                    fc1: Linear::new(store, &format!("{p}.fc1"), d, d * cfg.mlp_ratio, rng),
                    fc2: Linear::new(store, &format!("{p}.fc2"), d * cfg.mlp_ratio, d, rng),
                }
            })
            .collect();
        let final_norm = LayerNorm::new(store, &format!("{name}.final_norm"), d);
        Ok(Self { cfg, positions, blocks, final_norm })
    }

    pub fn new_cache<T: Scalar>(&self, batch: usize) -> KvCache<T> {
        KvCache::new(self.cfg.layers, batch, self.cfg.d_model)
    }

    /// Parameter ids of every block's attention and MLP projections.
    pub fn projection_params(&self) -> Vec<ParamId> {
        self.blocks
            .iter()
            .flat_map(|b| [&b.wq, &b.wk, &b.wv, &b.wo, &b.fc1, &b.fc2])
            .flat_map(|l| [l.weight, l.bias])
            .collect()
    }

    /// Residual stream after the last block, before the final norm.
    ///
    /// With a cache, `x` holds only the new tokens; they are placed after
    /// the cached positions and their keys/values are appended.
    pub fn forward_hidden<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        layout: &SeqLayout,
        mut cache: Option<&mut KvCache<T>>,
    ) -> Result<Var> {
        let past = cache.as_ref().map_or(0, |c| c.len);
        if past + layout.len > self.cfg.max_positions {
            return Err(Error::Config(format!(
                "sequence length {} exceeds max positions {}",
                past + layout.len,
                self.cfg.max_positions
            )));
        }
        if g.value(x).rows() != layout.batch * layout.len || g.value(x).cols() != self.cfg.d_model {
            return Err(Error::Shape(format!(
                "stack input {:?} does not match layout {}x{}x{}",
                g.shape(x),
                layout.batch,
                layout.len,
                self.cfg.d_model
            )));
        }
        if let Some(c) = cache.as_ref() {
            if c.batch != layout.batch {
                return Err(Error::Shape(format!("cache batch {} vs input batch {}", c.batch, layout.batch)));
            }
        }
        let pos_idx: Vec<usize> = (0..layout.batch).flat_map(|_| past..past + layout.len).collect();
        let table = g.param(store, self.positions);
        let pos = g.gather_rows(table, &pos_idx);
        let mut h = g.add(x, pos);

        let new_valid = layout.valid.clone().unwrap_or_else(|| vec![true; layout.batch * layout.len]);
        let kv_valid = match cache.as_ref() {
            Some(c) if past > 0 => {
                let mut v = Vec::with_capacity(layout.batch * (past + layout.len));
                for b in 0..layout.batch {
                    v.extend_from_slice(&c.valid[b * past..(b + 1) * past]);
                    v.extend_from_slice(&new_valid[b * layout.len..(b + 1) * layout.len]);
                }
                v
            }
            _ => new_valid,
        };
        let any_invalid = kv_valid.iter().any(|&v| !v);

        for (li, block) in self.blocks.iter().enumerate() {
            let n1 = block.ln1.forward(g, store, h);
            let q = block.wq.forward(g, store, n1);
            let mut k = block.wk.forward(g, store, n1);
            let mut v = block.wv.forward(g, store, n1);
            if let Some(c) = cache.as_mut() {
                if past > 0 {
                    let ck = g.constant(c.keys[li].clone());
                    let cv = g.constant(c.values[li].clone());
                    k = g.concat_seq(ck, k, layout.batch);
                    v = g.concat_seq(cv, v, layout.batch);
                }
                c.keys[li] = g.value(k).clone();
                c.values[li] = g.value(v).clone();
            }
            let spec = AttentionSpec {
                batch: layout.batch,
                q_len: layout.len,
                kv_len: past + layout.len,
                heads: self.cfg.heads(),
                causal: self.cfg.causal,
                kv_valid: any_invalid.then(|| kv_valid.clone()),
                dropout: self.cfg.dropout,
            };
            let a = g.attention(q, k, v, spec);
            let a = block.wo.forward(g, store, a);
            h = g.add(h, a);
            let n2 = block.ln2.forward(g, store, h);
            let m = block.fc1.forward(g, store, n2);
            let m = g.gelu(m);
            let m = block.fc2.forward(g, store, m);
            let m = g.dropout(m, self.cfg.dropout);
            h = g.add(h, m);
        }
        if let Some(c) = cache {
            c.valid = kv_valid;
            c.len = past + layout.len;
        }
        Ok(h)
    }

    /// [`forward_hidden`](Self::forward_hidden) followed by the final layer norm.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        layout: &SeqLayout,
        cache: Option<&mut KvCache<T>>,
    ) -> Result<Var> {
        let h = self.forward_hidden(g, store, x, layout, cache)?;
        Ok(self.final_norm.forward(g, store, h))
    }
}
